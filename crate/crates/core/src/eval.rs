//! Offline evaluation: hit rate over held-out conversion pairs against
//! sampled distractors, relative CTR arithmetic, and the per-group weight
//! report of a trained hybrid model.

use std::collections::HashSet;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hybrid::{HybridModel, PairExample, GROUP_COUNT, GROUP_NAMES};
use crate::linalg::fnv1a64;

/// Splits positives into disjoint train/test sets. The test side gets
/// `floor(fraction * n)` pairs but at least one; deterministic given the
/// seed.
pub fn split_pairs(
    positives: &[PairExample],
    holdout_fraction: f64,
    seed: u64,
) -> Result<(Vec<PairExample>, Vec<PairExample>)> {
    if !(holdout_fraction > 0.0 && holdout_fraction < 1.0) {
        return Err(Error::Config("holdout_fraction must be in (0, 1)".into()));
    }
    if positives.len() < 2 {
        return Err(Error::InvalidInput(
            "need at least two pairs to split".into(),
        ));
    }
    let n_test = ((holdout_fraction * positives.len() as f64).floor() as usize).max(1);
    let n_train = positives.len() - n_test;
    if n_train == 0 {
        return Err(Error::InvalidInput(
            "holdout would leave no training pairs".into(),
        ));
    }
    let mut order: Vec<usize> = (0..positives.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let test: Vec<PairExample> = order[..n_test].iter().map(|&i| positives[i].clone()).collect();
    let train: Vec<PairExample> = order[n_test..].iter().map(|&i| positives[i].clone()).collect();
    Ok((train, test))
}

fn pair_rng(seed: u64, a: &str, b: &str) -> ChaCha8Rng {
    let mut bytes = Vec::with_capacity(a.len() + b.len() + 1);
    bytes.extend_from_slice(a.as_bytes());
    bytes.push(0);
    bytes.extend_from_slice(b.as_bytes());
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a64(&bytes))
}

/// 1-based rank of the true partner `b` among `{b}` plus `n_distractors`
/// distinct items sampled uniformly from the universe (excluding `a` and
/// `b`), ordered by `scorer(a, .)` descending with ties broken by item id
/// ascending. Distractors are drawn from a per-pair RNG, so the result is
/// independent of test-pair order.
fn pair_rank<S>(scorer: &S, a: &str, b: &str, universe: &[String], n_distractors: usize, seed: u64) -> usize
where
    S: Fn(&str, &str) -> f64 + Sync,
{
    let mut rng = pair_rng(seed, a, b);
    let mut chosen: HashSet<usize> = HashSet::with_capacity(n_distractors);
    let mut candidates: Vec<&str> = Vec::with_capacity(n_distractors + 1);
    while candidates.len() < n_distractors {
        let idx = rng.random_range(0..universe.len());
        let item = universe[idx].as_str();
        if item == a || item == b || chosen.contains(&idx) {
            continue;
        }
        chosen.insert(idx);
        candidates.push(item);
    }
    let score_b = scorer(a, b);
    let mut beaten = 0usize;
    for &x in &candidates {
        let s = scorer(a, x);
        if s > score_b || (s == score_b && x < b) {
            beaten += 1;
        }
    }
    beaten + 1
}

/// Ranks of every test pair's true partner; the basis for HR@n at any n.
pub fn partner_ranks<S>(
    scorer: &S,
    test_pairs: &[PairExample],
    universe: &[String],
    n_distractors: usize,
    seed: u64,
) -> Result<Vec<usize>>
where
    S: Fn(&str, &str) -> f64 + Sync,
{
    if test_pairs.is_empty() {
        return Err(Error::InvalidInput("empty test set".into()));
    }
    if n_distractors < 1 {
        return Err(Error::Config("need at least one distractor".into()));
    }
    // the rejection sampler must be able to find enough distinct items
    if universe.len() < n_distractors + 2 {
        return Err(Error::InvalidInput(format!(
            "universe of {} cannot supply {} distinct distractors",
            universe.len(),
            n_distractors
        )));
    }
    Ok(test_pairs
        .par_iter()
        .map(|p| pair_rank(scorer, &p.a, &p.b, universe, n_distractors, seed))
        .collect())
}

/// HR@n: the fraction of test pairs whose true partner ranks in the top n.
pub fn hit_rate<S>(
    scorer: &S,
    test_pairs: &[PairExample],
    universe: &[String],
    n: usize,
    n_distractors: usize,
    seed: u64,
) -> Result<f64>
where
    S: Fn(&str, &str) -> f64 + Sync,
{
    if n < 1 {
        return Err(Error::Config("n must be >= 1".into()));
    }
    let ranks = partner_ranks(scorer, test_pairs, universe, n_distractors, seed)?;
    Ok(ranks.iter().filter(|&&r| r <= n).count() as f64 / ranks.len() as f64)
}

/// Relative CTR change `(ctr_b - ctr_a) / ctr_a`.
pub fn delta_ctr(ctr_a: f64, ctr_b: f64) -> Result<f64> {
    if !(ctr_a > 0.0) {
        return Err(Error::InvalidInput(format!(
            "baseline CTR must be positive, got {ctr_a}"
        )));
    }
    Ok((ctr_b - ctr_a) / ctr_a)
}

/// Per-group share of the first tower layer's weight mass: the sum of
/// column Euclidean norms over each group's slice of the concatenation,
/// normalized to sum to one.
pub fn feature_importance(model: &HybridModel) -> [(String, f64); GROUP_COUNT] {
    let first = &model.tower().weights()[0];
    let dims = model.group_dims();
    let mut sums = [0.0; GROUP_COUNT];
    let mut offset = 0;
    for g in 0..GROUP_COUNT {
        for c in offset..offset + dims[g] {
            let mut sq = 0.0;
            for r in 0..first.rows() {
                let v = first.at(r, c);
                sq += v * v;
            }
            sums[g] += sq.sqrt();
        }
        offset += dims[g];
    }
    let total: f64 = sums.iter().sum();
    let mut out: [(String, f64); GROUP_COUNT] = Default::default();
    for g in 0..GROUP_COUNT {
        out[g] = (
            GROUP_NAMES[g].to_string(),
            if total > 0.0 { sums[g] / total } else { 0.0 },
        );
    }
    out
}

/// Offline evaluation report.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub model_id: String,
    pub seed: u64,
    pub n_distractors: usize,
    pub n_test_pairs: usize,
    /// (n, HR@n), ascending in n.
    pub hit_rates: Vec<(usize, f64)>,
    pub importance: Option<[(String, f64); GROUP_COUNT]>,
}

impl EvalReport {
    /// Runs the ranking once and reads HR@n off the ranks for every
    /// requested n, so the distractor draw is shared and HR is monotone.
    pub fn compute<S>(
        model_id: &str,
        scorer: &S,
        test_pairs: &[PairExample],
        universe: &[String],
        ns: &[usize],
        n_distractors: usize,
        seed: u64,
        importance: Option<[(String, f64); GROUP_COUNT]>,
    ) -> Result<EvalReport>
    where
        S: Fn(&str, &str) -> f64 + Sync,
    {
        if ns.is_empty() {
            return Err(Error::Config("need at least one n".into()));
        }
        let ranks = partner_ranks(scorer, test_pairs, universe, n_distractors, seed)?;
        let mut ns_sorted = ns.to_vec();
        ns_sorted.sort_unstable();
        ns_sorted.dedup();
        let hit_rates = ns_sorted
            .into_iter()
            .map(|n| {
                (
                    n,
                    ranks.iter().filter(|&&r| r <= n).count() as f64 / ranks.len() as f64,
                )
            })
            .collect();
        Ok(EvalReport {
            model_id: model_id.to_owned(),
            seed,
            n_distractors,
            n_test_pairs: test_pairs.len(),
            hit_rates,
            importance,
        })
    }

    pub fn text_summary(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("model: {}\n", self.model_id));
        out.push_str(&format!(
            "test pairs: {}   distractors: {}   seed: {}\n",
            self.n_test_pairs, self.n_distractors, self.seed
        ));
        for (n, hr) in &self.hit_rates {
            out.push_str(&format!("HR@{n}: {hr:.4}\n"));
        }
        if let Some(imp) = &self.importance {
            out.push_str("feature group weight share:\n");
            for (name, v) in imp {
                out.push_str(&format!("  {name}: {v:.4}\n"));
            }
        }
        out
    }

    /// Machine-readable `key=value` form.
    pub fn write_kv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str(&format!("model={}\n", self.model_id));
        out.push_str(&format!("seed={}\n", self.seed));
        out.push_str(&format!("distractors={}\n", self.n_distractors));
        out.push_str(&format!("test_pairs={}\n", self.n_test_pairs));
        for (n, hr) in &self.hit_rates {
            out.push_str(&format!("hr@{n}={hr}\n"));
        }
        if let Some(imp) = &self.importance {
            for (name, v) in imp {
                out.push_str(&format!("importance_{name}={v}\n"));
            }
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}
