//! The staged training pipeline: stage 1 pre-trains the per-modality
//! models on plentiful noisy signals, stage 2 trains the hybrid fusion on
//! scarce conversion pairs, stage 3 represents every active item and
//! builds a snapshot. Each stage persists before the next begins, stage-1
//! artifacts are reusable across refreshes, and a failed run never
//! replaces the served snapshot.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::datamodel::{
    self, filter_sparse, window, AdCorpus, EventLog, ImageFeatures, SignalWeightConfig, ADS_FILE,
    EVENTS_FILE, IMAGES_FILE,
};
use crate::error::{Error, Result};
use crate::hybrid::{
    self, assemble, build_pairs, hybrid_fit, sample_negatives, FeatureBundle, HybridModel,
    HybridOptions, ItemRepresentation,
};
use crate::imagepipe::{self, image_embed, mlp_fit, ImageProjector, MlpOptions};
use crate::linalg::{fnv1a64, EmbeddingTable, Matrix};
use crate::mf::{als_fit, build_matrix, location_fit, AlsOptions, FactorModel};
use crate::serve::build_index;
use crate::textpipe::{
    cnn_fit, text_embed, tokenize, word2vec_fit, TextClassifier, TextCnnOptions, Word2VecOptions,
    WordVectors,
};

/// Name of the pointer file inside an output directory that names the
/// currently served snapshot.
pub const CURRENT_FILE: &str = "CURRENT";

const WEIGHTS_FILE: &str = "weights.cfg";
const FINGERPRINT_FILE: &str = "inputs";

#[derive(Debug, Clone)]
pub struct RefreshOptions {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Skip retraining stage-1 artifacts whose recorded inputs match.
    pub reuse: bool,
    /// Master seed; every stage derives its own seed from it.
    pub seed: u64,
    pub lookback_days: u32,
    pub weights: SignalWeightConfig,
    pub als: AlsOptions,
    pub location: AlsOptions,
    pub word2vec: Word2VecOptions,
    pub cnn: TextCnnOptions,
    pub mlp: MlpOptions,
    pub hybrid: HybridOptions,
    pub negative_ratio: usize,
}

impl RefreshOptions {
    pub fn new(data_dir: impl Into<PathBuf>, out_dir: impl Into<PathBuf>) -> Self {
        RefreshOptions {
            data_dir: data_dir.into(),
            out_dir: out_dir.into(),
            reuse: false,
            seed: 0,
            lookback_days: 20,
            weights: SignalWeightConfig::default(),
            als: AlsOptions::default(),
            location: AlsOptions {
                rank: 10,
                ..AlsOptions::default()
            },
            word2vec: Word2VecOptions::default(),
            cnn: TextCnnOptions::default(),
            mlp: MlpOptions::default(),
            hybrid: HybridOptions::default(),
            negative_ratio: 1,
        }
    }

    /// Canonical text form, hashed into the stage fingerprints so option
    /// changes invalidate reusable artifacts.
    fn canonical(&self) -> String {
        format!(
            "seed={};lookback={};als={},{},{},{};loc={},{},{},{};w2v={},{},{},{},{},{};cnn={},{},{},{},{},{};mlp={},{},{},{};hyb={:?},{:?},{},{},{},{},{};neg={}",
            self.seed,
            self.lookback_days,
            self.als.rank,
            self.als.reg,
            self.als.alpha,
            self.als.iters,
            self.location.rank,
            self.location.reg,
            self.location.alpha,
            self.location.iters,
            self.word2vec.dim,
            self.word2vec.window,
            self.word2vec.negatives,
            self.word2vec.min_count,
            self.word2vec.epochs,
            self.word2vec.step,
            self.cnn.filters_per_width,
            self.cnn.hidden_dim,
            self.cnn.seq_len,
            self.cnn.epochs,
            self.cnn.step,
            self.cnn.batch_size,
            self.mlp.epochs,
            self.mlp.step,
            self.mlp.batch_size,
            self.mlp.momentum,
            self.hybrid.group_dims,
            self.hybrid.tower_widths,
            self.hybrid.tau_init,
            self.hybrid.epochs,
            self.hybrid.step,
            self.hybrid.batch_size,
            self.hybrid.momentum,
            self.negative_ratio,
        )
    }
}

fn stage_seed(master: u64, stage: &str) -> u64 {
    let mut bytes = master.to_le_bytes().to_vec();
    bytes.extend_from_slice(stage.as_bytes());
    fnv1a64(&bytes)
}

fn read_fingerprint(dir: &Path) -> Option<String> {
    std::fs::read_to_string(dir.join(FINGERPRINT_FILE))
        .ok()
        .map(|s| s.trim().to_owned())
}

fn write_fingerprint(dir: &Path, fp: &str) -> Result<()> {
    let path = dir.join(FINGERPRINT_FILE);
    std::fs::write(&path, format!("{fp}\n")).map_err(|e| Error::io(&path, e))
}

struct LoadedData {
    events: EventLog,
    ads: AdCorpus,
    images: ImageFeatures,
    weights: SignalWeightConfig,
    /// FNV over the raw input files and canonical options.
    fingerprint: String,
    /// max event timestamp; the pipeline's notion of "now"
    now: i64,
}

fn load_data(opts: &RefreshOptions) -> Result<LoadedData> {
    let events_path = opts.data_dir.join(EVENTS_FILE);
    let ads_path = opts.data_dir.join(ADS_FILE);
    let images_path = opts.data_dir.join(IMAGES_FILE);
    let events = datamodel::load_events(&events_path)?;
    let ads = datamodel::load_corpus(&ads_path)?;
    let images = datamodel::read_image_features(&images_path)?;
    if events.is_empty() {
        return Err(Error::InvalidInput("no events in the data directory".into()));
    }

    let weights_path = opts.data_dir.join(WEIGHTS_FILE);
    let weights = if weights_path.exists() {
        SignalWeightConfig::from_file(&weights_path)?
    } else {
        opts.weights.clone()
    };

    let mut bytes = Vec::new();
    for path in [&events_path, &ads_path, &images_path] {
        bytes.extend_from_slice(&std::fs::read(path).map_err(|e| Error::io(path, e))?);
        bytes.push(0);
    }
    bytes.extend_from_slice(opts.canonical().as_bytes());
    let fingerprint = format!("{:016x}", fnv1a64(&bytes));

    let now = events.iter().map(|e| e.ts).max().unwrap();
    Ok(LoadedData {
        events,
        ads,
        images,
        weights,
        fingerprint,
        now,
    })
}

/// Trains or reuses one stage-1 artifact: when `reuse` is set and the
/// stored fingerprint matches, the trainer is skipped and nothing in the
/// directory is touched.
fn ensure_artifact(
    dir: &Path,
    reuse: bool,
    fingerprint: &str,
    train_and_save: impl FnOnce(&Path) -> Result<()>,
) -> Result<()> {
    if reuse && read_fingerprint(dir).as_deref() == Some(fingerprint) {
        log::info!("reusing artifact {}", dir.display());
        return Ok(());
    }
    if dir.exists() {
        std::fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    train_and_save(dir)?;
    write_fingerprint(dir, fingerprint)
}

fn ad_sentences(ads: &AdCorpus) -> Vec<Vec<String>> {
    ads.iter()
        .map(|ad| {
            let mut t = tokenize(&ad.title);
            t.extend(tokenize(&ad.description));
            t
        })
        .collect()
}

fn embedding_table_from(ids: Vec<String>, rows: Vec<Vec<f64>>, dim: usize) -> EmbeddingTable {
    let mut data = Vec::with_capacity(rows.len() * dim);
    for r in &rows {
        data.extend_from_slice(r);
    }
    EmbeddingTable::new(ids, Matrix::from_vec(rows.len(), dim, data))
}

/// Runs the full staged pipeline and atomically publishes a new snapshot
/// under `<out_dir>/snapshots/<id>`, repointing `<out_dir>/CURRENT` only
/// after the snapshot is complete. Returns the snapshot directory.
pub fn refresh(opts: &RefreshOptions) -> Result<PathBuf> {
    let data = load_data(opts)?;
    std::fs::create_dir_all(&opts.out_dir).map_err(|e| Error::io(&opts.out_dir, e))?;
    let stage1 = opts.out_dir.join("stage1");
    let stage2 = opts.out_dir.join("stage2");
    std::fs::create_dir_all(&stage1).map_err(|e| Error::io(&stage1, e))?;

    let windowed = window(&data.events, opts.lookback_days, data.now);
    if windowed.is_empty() {
        return Err(Error::InvalidInput(
            "no events inside the look-back window".into(),
        ));
    }
    let filtered = filter_sparse(&windowed);
    if filtered.is_empty() {
        return Err(Error::InvalidInput(
            "no events survive sparsity filtering".into(),
        ));
    }

    // ---- stage 1: per-modality models on noisy signals ----
    log::info!("stage 1: collaborative filtering");
    let als_dir = stage1.join("als");
    ensure_artifact(&als_dir, opts.reuse, &data.fingerprint, |dir| {
        let matrix = build_matrix(&filtered, &data.weights)?;
        let als_opts = AlsOptions {
            seed: stage_seed(opts.seed, "als"),
            ..opts.als.clone()
        };
        als_fit(&matrix, &als_opts)?.save(dir, "als")
    })?;

    log::info!("stage 1: location embedding");
    let loc_dir = stage1.join("location");
    ensure_artifact(&loc_dir, opts.reuse, &data.fingerprint, |dir| {
        let loc_opts = AlsOptions {
            seed: stage_seed(opts.seed, "location"),
            ..opts.location.clone()
        };
        location_fit(&filtered, &data.ads, &data.weights, &loc_opts)?.save(dir, "location")
    })?;

    log::info!("stage 1: word vectors");
    let w2v_dir = stage1.join("word2vec");
    ensure_artifact(&w2v_dir, opts.reuse, &data.fingerprint, |dir| {
        let sentences = ad_sentences(&data.ads);
        let w2v_opts = Word2VecOptions {
            seed: stage_seed(opts.seed, "word2vec"),
            ..opts.word2vec.clone()
        };
        word2vec_fit(&sentences, &w2v_opts)?.save(dir)
    })?;
    // downstream stages read the persisted artifact, so a fresh run and a
    // reused one feed identical bytes forward
    let wv = WordVectors::load(&w2v_dir)?;

    log::info!("stage 1: text classifier");
    let cnn_dir = stage1.join("textcnn");
    ensure_artifact(&cnn_dir, opts.reuse, &data.fingerprint, |dir| {
        let cnn_opts = TextCnnOptions {
            seed: stage_seed(opts.seed, "textcnn"),
            ..opts.cnn.clone()
        };
        cnn_fit(data.ads.ads(), &wv, &cnn_opts)?.save(dir)
    })?;
    let clf = TextClassifier::load(&cnn_dir)?;

    log::info!("stage 1: image projector");
    let mlp_dir = stage1.join("imagemlp");
    ensure_artifact(&mlp_dir, opts.reuse, &data.fingerprint, |dir| {
        let targets = imagepipe::title_targets(data.ads.ads(), &wv);
        let mlp_opts = MlpOptions {
            seed: stage_seed(opts.seed, "imagemlp"),
            ..opts.mlp.clone()
        };
        mlp_fit(&data.images, &targets, &mlp_opts)?.save(dir)
    })?;
    let projector = ImageProjector::load(&mlp_dir)?;
    let cf_model = FactorModel::load(&als_dir)?;
    let location_model = FactorModel::load(&loc_dir)?;

    // ---- stage 2: embeddings, conversion pairs, hybrid fusion ----
    std::fs::create_dir_all(&stage2).map_err(|e| Error::io(&stage2, e))?;
    log::info!("stage 2: item embeddings");
    let text_table = {
        let ids: Vec<String> = data.ads.iter().map(|ad| ad.item_id.clone()).collect();
        let rows: Vec<Vec<f64>> = data
            .ads
            .iter()
            .map(|ad| text_embed(ad, &clf, &wv))
            .collect();
        embedding_table_from(ids, rows, clf.embedding_dim())
    };
    text_table.save(&stage2, "text_embeddings")?;
    let image_table = {
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        for (id, feat) in data.images.iter() {
            ids.push(id.to_owned());
            rows.push(image_embed(feat, &projector)?);
        }
        embedding_table_from(ids, rows, projector.output_dim())
    };
    image_table.save(&stage2, "image_embeddings")?;
    let location_table = location_model.col_table();

    let mut bundles: HashMap<String, FeatureBundle> = HashMap::new();
    for ad in data.ads.iter() {
        let bundle = assemble(
            &ad.item_id,
            &cf_model,
            &text_table,
            &image_table,
            &location_table,
            &data.ads,
        )?;
        bundles.insert(ad.item_id.clone(), bundle);
    }

    log::info!("stage 2: conversion pairs");
    let positives = build_pairs(&windowed);
    if positives.is_empty() {
        return Err(Error::InvalidInput(
            "no same-day conversion pairs in the window".into(),
        ));
    }
    let universe: Vec<String> = data
        .ads
        .iter()
        .filter(|ad| ad.active)
        .map(|ad| ad.item_id.clone())
        .collect();
    let negatives = sample_negatives(
        &positives,
        &universe,
        opts.negative_ratio,
        stage_seed(opts.seed, "negatives"),
    )?;
    let mut pairs = positives;
    pairs.extend(negatives);
    hybrid::write_pairs(&stage2.join("pairs.tsv"), &pairs)?;

    log::info!("stage 2: hybrid fusion model ({} pairs)", pairs.len());
    let hybrid_dir = stage2.join("hybrid");
    let hybrid_opts = HybridOptions {
        seed: stage_seed(opts.seed, "hybrid"),
        ..opts.hybrid.clone()
    };
    let model = hybrid_fit(&bundles, &pairs, &hybrid_opts)?;
    if hybrid_dir.exists() {
        std::fs::remove_dir_all(&hybrid_dir).map_err(|e| Error::io(&hybrid_dir, e))?;
    }
    model.save(&hybrid_dir)?;
    let model = HybridModel::load(&hybrid_dir)?;

    // ---- stage 3: represent active items, build and publish snapshot ----
    log::info!("stage 3: snapshot");
    let mut representations = Vec::new();
    for ad in data.ads.iter() {
        if !ad.active {
            continue;
        }
        let r = hybrid::represent(&bundles[&ad.item_id], &model);
        representations.push(ItemRepresentation::new(ad.item_id.clone(), r));
    }
    let snapshot_id = format!("snap-{}-{}", data.now, &data.fingerprint[..8]);
    let snapshot = build_index(&snapshot_id, &representations, &data.ads)?;

    let extras: Vec<(String, String)> = vec![
        ("artifact_als".into(), "stage1/als".into()),
        ("artifact_location".into(), "stage1/location".into()),
        ("artifact_word2vec".into(), "stage1/word2vec".into()),
        ("artifact_textcnn".into(), "stage1/textcnn".into()),
        ("artifact_imagemlp".into(), "stage1/imagemlp".into()),
        ("artifact_hybrid".into(), "stage2/hybrid".into()),
        ("pairs".into(), "stage2/pairs.tsv".into()),
    ];

    let snapshots_dir = opts.out_dir.join("snapshots");
    std::fs::create_dir_all(&snapshots_dir).map_err(|e| Error::io(&snapshots_dir, e))?;
    let tmp_dir = snapshots_dir.join(format!(".tmp-{snapshot_id}"));
    if tmp_dir.exists() {
        std::fs::remove_dir_all(&tmp_dir).map_err(|e| Error::io(&tmp_dir, e))?;
    }
    snapshot.save(&tmp_dir, &extras)?;
    let final_dir = snapshots_dir.join(&snapshot_id);
    if final_dir.exists() {
        std::fs::remove_dir_all(&final_dir).map_err(|e| Error::io(&final_dir, e))?;
    }
    std::fs::rename(&tmp_dir, &final_dir).map_err(|e| Error::io(&final_dir, e))?;

    // repoint CURRENT last; a failure before this line leaves the old
    // snapshot served
    let current_tmp = opts.out_dir.join(".CURRENT.tmp");
    std::fs::write(&current_tmp, format!("snapshots/{snapshot_id}\n"))
        .map_err(|e| Error::io(&current_tmp, e))?;
    let current = opts.out_dir.join(CURRENT_FILE);
    std::fs::rename(&current_tmp, &current).map_err(|e| Error::io(&current, e))?;

    log::info!("published {snapshot_id}");
    Ok(final_dir)
}

/// Resolves a snapshot directory: either the path itself, or the snapshot
/// named by its `CURRENT` pointer when the path is a refresh output
/// directory.
pub fn resolve_snapshot_dir(path: &Path) -> Result<PathBuf> {
    let current = path.join(CURRENT_FILE);
    if current.exists() {
        let name = std::fs::read_to_string(&current).map_err(|e| Error::io(&current, e))?;
        Ok(path.join(name.trim()))
    } else {
        Ok(path.to_path_buf())
    }
}
