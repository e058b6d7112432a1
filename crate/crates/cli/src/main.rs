//! adrec: synthetic marketplace generation, staged model refresh, offline
//! evaluation and similar-item serving.

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use adrec_core::eval::{feature_importance, EvalReport};
use adrec_core::hybrid::HybridModel;
use adrec_core::serve::{refresh, resolve_snapshot_dir, serve_http, RefreshOptions, Snapshot};
use adrec_core::synthgen::{generate, SynthConfig};
use adrec_core::{Error, Result};

const SNAPSHOT_DIR_ENV: &str = "RECSYS_SNAPSHOT_DIR";

#[derive(Parser)]
#[command(name = "adrec", about = "hybrid similar-item recommender for marketplace ads")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic marketplace data directory.
    Synth {
        /// key=value config file; defaults apply when omitted
        #[arg(long)]
        config: Option<PathBuf>,
        /// output data directory
        #[arg(long)]
        out: PathBuf,
        /// overrides the config seed
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the staged training pipeline and publish a snapshot.
    Refresh {
        /// data directory with events.tsv, ads.tsv and images.imgf
        #[arg(long)]
        data: PathBuf,
        /// pipeline output directory
        #[arg(long)]
        out: PathBuf,
        /// reuse stage-1 artifacts whose recorded inputs match
        #[arg(long)]
        reuse: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Hit-rate evaluation of a snapshot against held-out pairs.
    Eval {
        /// snapshot directory, or a refresh output directory with CURRENT
        #[arg(long)]
        model: PathBuf,
        /// tab-separated pair file; positives are evaluated
        #[arg(long)]
        pairs: PathBuf,
        /// comma-separated list of n values
        #[arg(long, default_value = "1,5,10")]
        n: String,
        #[arg(long, default_value_t = 100)]
        distractors: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// also write the machine-readable report here
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve top-k similar-item queries over HTTP.
    Serve {
        /// snapshot directory; falls back to $RECSYS_SNAPSHOT_DIR
        #[arg(long)]
        snapshot: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Synth { config, out, seed } => {
            let mut cfg = match config {
                Some(path) => SynthConfig::from_file(&path)?,
                None => SynthConfig::default(),
            };
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            let data = generate(&cfg)?;
            data.write_to_dir(&out)?;
            println!(
                "wrote {} ads, {} events, {} image features to {}",
                data.ads.len(),
                data.events.len(),
                data.images.len(),
                out.display()
            );
            Ok(())
        }
        Command::Refresh {
            data,
            out,
            reuse,
            seed,
        } => {
            let mut opts = RefreshOptions::new(data, out);
            opts.reuse = reuse;
            opts.seed = seed;
            let snapshot_dir = refresh(&opts)?;
            println!("published {}", snapshot_dir.display());
            Ok(())
        }
        Command::Eval {
            model,
            pairs,
            n,
            distractors,
            seed,
            out,
        } => {
            let snapshot_dir = resolve_snapshot_dir(&model)?;
            let snapshot = Snapshot::load(&snapshot_dir)?;
            let all_pairs = adrec_core::hybrid::load_pairs(&pairs)?;
            let mut test: Vec<_> = all_pairs.into_iter().filter(|p| p.is_positive()).collect();
            let before = test.len();
            test.retain(|p| snapshot.contains(&p.a) && snapshot.contains(&p.b));
            if test.len() < before {
                log::warn!("skipped {} pairs not in the snapshot", before - test.len());
            }
            let ns: Vec<usize> = n
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("bad n value {v:?}")))
                })
                .collect::<Result<_>>()?;
            let universe: Vec<String> = snapshot
                .ids()
                .iter()
                .filter(|id| snapshot.is_active(id) == Some(true))
                .cloned()
                .collect();
            let scorer = |a: &str, b: &str| -> f64 {
                match (snapshot.vector(a), snapshot.vector(b)) {
                    (Some(x), Some(y)) => x
                        .iter()
                        .zip(y)
                        .map(|(&p, &q)| p as f64 * q as f64)
                        .sum(),
                    _ => f64::MIN,
                }
            };
            // group weight shares when the hybrid artifact is reachable
            let importance = snapshot_dir
                .parent()
                .and_then(|p| p.parent())
                .map(|root| root.join("stage2/hybrid"))
                .filter(|p| p.exists())
                .and_then(|p| HybridModel::load(&p).ok())
                .map(|m| feature_importance(&m));
            let report = EvalReport::compute(
                snapshot.id(),
                &scorer,
                &test,
                &universe,
                &ns,
                distractors,
                seed,
                importance,
            )?;
            print!("{}", report.text_summary());
            if let Some(path) = out {
                report.write_kv(&path)?;
                println!("report written to {}", path.display());
            }
            Ok(())
        }
        Command::Serve { snapshot, port } => {
            let dir = match snapshot {
                Some(d) => d,
                None => std::env::var(SNAPSHOT_DIR_ENV)
                    .map(PathBuf::from)
                    .map_err(|_| {
                        Error::Config(format!(
                            "no --snapshot given and {SNAPSHOT_DIR_ENV} is unset"
                        ))
                    })?,
            };
            let dir = resolve_snapshot_dir(&dir)?;
            let handle = serve_http(&dir, port)?;
            println!("serving {} on {}", handle.snapshot_id(), handle.addr);
            std::io::stdout().flush().ok();
            loop {
                std::thread::sleep(std::time::Duration::from_secs(3600));
            }
        }
    }
}
