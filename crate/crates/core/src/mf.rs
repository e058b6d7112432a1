//! Weighted implicit-feedback alternating least squares.
//!
//! Behavior events become a sparse user x item confidence matrix; ALS
//! factorizes it into latent row/column factors. The same machinery
//! factorizes a user x postcode matrix to produce location embeddings.
//!
//! Implicit formulation: preference is 1 on observed cells and 0
//! elsewhere; confidence is `1 + alpha * aggregated signal weight`. Each
//! half-sweep solves independent ridge systems per row (or column), so the
//! regularized objective never increases.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::datamodel::{signal_weight, AdCorpus, Event, SignalWeightConfig};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_solve, dot, read_mat0, write_mat0, EmbeddingTable, Matrix};

/// Sparse interaction matrix with positive confidences. Row and column
/// ids are assigned in first-seen order, which keeps everything
/// deterministic for a given event order.
#[derive(Debug, Clone)]
pub struct InteractionMatrix {
    row_ids: Vec<String>,
    col_ids: Vec<String>,
    /// per-row list of (col, confidence)
    rows: Vec<Vec<(u32, f64)>>,
    /// per-column list of (row, confidence)
    cols: Vec<Vec<(u32, f64)>>,
    nnz: usize,
}

impl InteractionMatrix {
    /// Aggregates (row_id, col_id, weight) observations; duplicate cells
    /// sum their weights.
    pub fn aggregate<I>(observations: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String, f64)>,
    {
        let mut row_index: HashMap<String, u32> = HashMap::new();
        let mut col_index: HashMap<String, u32> = HashMap::new();
        let mut row_ids = Vec::new();
        let mut col_ids = Vec::new();
        let mut cells: HashMap<(u32, u32), f64> = HashMap::new();
        for (row, col, w) in observations {
            if !(w > 0.0) || !w.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "confidence for ({row}, {col}) must be positive, got {w}"
                )));
            }
            let r = *row_index.entry(row.clone()).or_insert_with(|| {
                row_ids.push(row);
                (row_ids.len() - 1) as u32
            });
            let c = *col_index.entry(col.clone()).or_insert_with(|| {
                col_ids.push(col);
                (col_ids.len() - 1) as u32
            });
            *cells.entry((r, c)).or_default() += w;
        }
        if cells.is_empty() {
            return Err(Error::InvalidInput(
                "no observations to factorize".into(),
            ));
        }
        let mut rows = vec![Vec::new(); row_ids.len()];
        let mut cols = vec![Vec::new(); col_ids.len()];
        let nnz = cells.len();
        let mut sorted: Vec<((u32, u32), f64)> = cells.into_iter().collect();
        sorted.sort_by_key(|&((r, c), _)| (r, c));
        for ((r, c), w) in sorted {
            rows[r as usize].push((c, w));
            cols[c as usize].push((r, w));
        }
        Ok(InteractionMatrix {
            row_ids,
            col_ids,
            rows,
            cols,
            nnz,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn n_cols(&self) -> usize {
        self.col_ids.len()
    }

    pub fn nnz(&self) -> usize {
        self.nnz
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    pub fn col_ids(&self) -> &[String] {
        &self.col_ids
    }

    pub fn row(&self, r: usize) -> &[(u32, f64)] {
        &self.rows[r]
    }

    pub fn confidence(&self, row_id: &str, col_id: &str) -> Option<f64> {
        let r = self.row_ids.iter().position(|id| id == row_id)?;
        let c = self.col_ids.iter().position(|id| id == col_id)? as u32;
        self.rows[r].iter().find(|(ci, _)| *ci == c).map(|(_, w)| *w)
    }
}

/// Builds the user x item confidence matrix from a (windowed, sparsity
/// filtered) event log: cell(u, i) is the sum of signal weights over all
/// events of u on i.
pub fn build_matrix(events: &[Event], cfg: &SignalWeightConfig) -> Result<InteractionMatrix> {
    if events.is_empty() {
        return Err(Error::InvalidInput("empty event log".into()));
    }
    InteractionMatrix::aggregate(
        events
            .iter()
            .map(|e| (e.user.clone(), e.item.clone(), signal_weight(e.signal, cfg))),
    )
}

#[derive(Debug, Clone)]
pub struct AlsOptions {
    pub rank: usize,
    pub reg: f64,
    /// Confidence scale: c = 1 + alpha * weight.
    pub alpha: f64,
    pub iters: usize,
    pub seed: u64,
}

impl Default for AlsOptions {
    fn default() -> Self {
        AlsOptions {
            rank: 100,
            reg: 0.01,
            alpha: 1.0,
            iters: 15,
            seed: 0,
        }
    }
}

/// Paired latent factors from ALS.
#[derive(Debug, Clone)]
pub struct FactorModel {
    pub rank: usize,
    pub regularization: f64,
    pub alpha: f64,
    pub seed: u64,
    row_ids: Vec<String>,
    col_ids: Vec<String>,
    row_index: HashMap<String, usize>,
    col_index: HashMap<String, usize>,
    pub row_factors: Matrix,
    pub col_factors: Matrix,
}

impl FactorModel {
    fn new(
        rank: usize,
        regularization: f64,
        alpha: f64,
        seed: u64,
        row_ids: Vec<String>,
        col_ids: Vec<String>,
        row_factors: Matrix,
        col_factors: Matrix,
    ) -> Self {
        let row_index = row_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        let col_index = col_ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.clone(), i))
            .collect();
        FactorModel {
            rank,
            regularization,
            alpha,
            seed,
            row_ids,
            col_ids,
            row_index,
            col_index,
            row_factors,
            col_factors,
        }
    }

    pub fn row_ids(&self) -> &[String] {
        &self.row_ids
    }

    pub fn col_ids(&self) -> &[String] {
        &self.col_ids
    }

    pub fn row_vector(&self, id: &str) -> Option<&[f64]> {
        self.row_index.get(id).map(|&i| self.row_factors.row(i))
    }

    pub fn col_vector(&self, id: &str) -> Option<&[f64]> {
        self.col_index.get(id).map(|&i| self.col_factors.row(i))
    }

    pub fn has_col(&self, id: &str) -> bool {
        self.col_index.contains_key(id)
    }

    /// Column factors as an id-keyed table (e.g. postcode embeddings).
    pub fn col_table(&self) -> EmbeddingTable {
        EmbeddingTable::new(self.col_ids.clone(), self.col_factors.clone())
    }

    /// Predicted preference for a (row, col) id pair, if both are known.
    pub fn predict(&self, row_id: &str, col_id: &str) -> Option<f64> {
        Some(dot(self.row_vector(row_id)?, self.col_vector(col_id)?))
    }

    pub fn save(&self, dir: &Path, kind: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = dir.join("manifest");
        let text = format!(
            "kind={kind}\nrank={}\nreg={}\nalpha={}\nseed={}\nrows={}\ncols={}\n",
            self.rank,
            self.regularization,
            self.alpha,
            self.seed,
            self.row_ids.len(),
            self.col_ids.len(),
        );
        std::fs::write(&manifest, text).map_err(|e| Error::io(&manifest, e))?;
        write_ids(&dir.join("row_ids.txt"), &self.row_ids)?;
        write_ids(&dir.join("col_ids.txt"), &self.col_ids)?;
        write_mat0(&dir.join("row_factors.mat"), &self.row_factors)?;
        write_mat0(&dir.join("col_factors.mat"), &self.col_factors)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = parse_manifest(&dir.join("manifest"))?;
        let get = |key: &str| -> Result<&String> {
            manifest
                .get(key)
                .ok_or_else(|| Error::Config(format!("manifest missing {key}")))
        };
        let rank: usize = get("rank")?.parse().map_err(|_| Error::Config("bad rank".into()))?;
        let reg: f64 = get("reg")?.parse().map_err(|_| Error::Config("bad reg".into()))?;
        let alpha: f64 = get("alpha")?
            .parse()
            .map_err(|_| Error::Config("bad alpha".into()))?;
        let seed: u64 = get("seed")?.parse().map_err(|_| Error::Config("bad seed".into()))?;
        let row_ids = read_ids(&dir.join("row_ids.txt"))?;
        let col_ids = read_ids(&dir.join("col_ids.txt"))?;
        let row_factors = read_mat0(&dir.join("row_factors.mat"))?;
        let col_factors = read_mat0(&dir.join("col_factors.mat"))?;
        if row_factors.rows() != row_ids.len()
            || col_factors.rows() != col_ids.len()
            || row_factors.cols() != rank
            || col_factors.cols() != rank
        {
            return Err(Error::Dimension("factor model shape mismatch".into()));
        }
        Ok(FactorModel::new(
            rank, reg, alpha, seed, row_ids, col_ids, row_factors, col_factors,
        ))
    }
}

fn write_ids(path: &Path, ids: &[String]) -> Result<()> {
    let mut out = String::new();
    for id in ids {
        out.push_str(id);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn read_ids(path: &Path) -> Result<Vec<String>> {
    Ok(std::fs::read_to_string(path)
        .map_err(|e| Error::io(path, e))?
        .lines()
        .map(str::to_owned)
        .collect())
}

pub(crate) fn parse_manifest(path: &Path) -> Result<HashMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(path, lineno + 1, "expected key=value"))?;
        map.insert(k.trim().to_owned(), v.trim().to_owned());
    }
    Ok(map)
}

/// Solves one ridge row of the implicit-ALS normal equations for a fixed
/// opposite factor matrix:
/// `(G + sum_obs alpha*w * y y^T + reg I) x = sum_obs (1 + alpha*w) y`
/// where `G = opposite^T opposite` must be precomputed by the caller.
pub fn solve_factor_row(
    opposite: &Matrix,
    gram: &[f64],
    observed: &[(u32, f64)],
    alpha: f64,
    reg: f64,
) -> Result<Vec<f64>> {
    let k = opposite.cols();
    let mut a = gram.to_vec();
    let mut b = vec![0.0; k];
    for &(j, w) in observed {
        let y = opposite.row(j as usize);
        let cw = alpha * w;
        for r in 0..k {
            let yr = y[r];
            b[r] += (1.0 + cw) * yr;
            let row = &mut a[r * k..(r + 1) * k];
            for (av, yv) in row.iter_mut().zip(y) {
                *av += cw * yr * yv;
            }
        }
    }
    for r in 0..k {
        a[r * k + r] += reg;
    }
    cholesky_solve(&mut a, &mut b)?;
    Ok(b)
}

fn gram(m: &Matrix) -> Vec<f64> {
    let k = m.cols();
    let mut g = vec![0.0; k * k];
    for r in 0..m.rows() {
        let row = m.row(r);
        for i in 0..k {
            let ri = row[i];
            if ri != 0.0 {
                let dst = &mut g[i * k..(i + 1) * k];
                for (d, v) in dst.iter_mut().zip(row) {
                    *d += ri * v;
                }
            }
        }
    }
    g
}

/// One half-sweep: re-solves every row of `target` against `opposite`.
/// Row solves are independent, so the parallel result is bit-identical to
/// sequential execution.
fn half_sweep(
    target: &mut Matrix,
    opposite: &Matrix,
    observed: &[Vec<(u32, f64)>],
    alpha: f64,
    reg: f64,
) -> Result<()> {
    let g = gram(opposite);
    let k = target.cols();
    let results: Vec<Result<Vec<f64>>> = (0..target.rows())
        .into_par_iter()
        .map(|r| solve_factor_row(opposite, &g, &observed[r], alpha, reg))
        .collect();
    for (r, res) in results.into_iter().enumerate() {
        let solved = res?;
        target.row_mut(r)[..k].copy_from_slice(&solved);
    }
    Ok(())
}

/// Implicit-feedback ALS. Deterministic given the seed; factors are
/// initialized uniformly in [-0.1/sqrt(rank), 0.1/sqrt(rank)].
pub fn als_fit(m: &InteractionMatrix, opts: &AlsOptions) -> Result<FactorModel> {
    als_fit_inner(m, opts, None).map(|(model, _)| model)
}

/// Like [`als_fit`] but also returns the exact objective after every
/// half-sweep (2 * iters values).
pub fn als_fit_traced(m: &InteractionMatrix, opts: &AlsOptions) -> Result<(FactorModel, Vec<f64>)> {
    let mut trace = Vec::with_capacity(opts.iters * 2);
    let (model, _) = als_fit_inner(m, opts, Some(&mut trace))?;
    Ok((model, trace))
}

fn als_fit_inner(
    m: &InteractionMatrix,
    opts: &AlsOptions,
    mut trace: Option<&mut Vec<f64>>,
) -> Result<(FactorModel, ())> {
    if opts.rank < 1 {
        return Err(Error::Config("rank must be >= 1".into()));
    }
    if opts.iters < 1 {
        return Err(Error::Config("iters must be >= 1".into()));
    }
    if !(opts.reg > 0.0) {
        return Err(Error::Config("reg must be positive".into()));
    }
    if opts.rank > m.n_rows().min(m.n_cols()) {
        log::warn!(
            "rank {} exceeds min dimension {} of a {}x{} matrix",
            opts.rank,
            m.n_rows().min(m.n_cols()),
            m.n_rows(),
            m.n_cols()
        );
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let s = 0.1 / (opts.rank as f64).sqrt();
    let mut rows = Matrix::from_fn(m.n_rows(), opts.rank, |_, _| rng.random_range(-s..s));
    let mut cols = Matrix::from_fn(m.n_cols(), opts.rank, |_, _| rng.random_range(-s..s));

    let mut model = FactorModel::new(
        opts.rank,
        opts.reg,
        opts.alpha,
        opts.seed,
        m.row_ids().to_vec(),
        m.col_ids().to_vec(),
        Matrix::zeros(0, 0),
        Matrix::zeros(0, 0),
    );

    for _ in 0..opts.iters {
        half_sweep(&mut rows, &cols, &m.rows, opts.alpha, opts.reg)?;
        if !rows.is_finite() {
            return Err(Error::Training("non-finite row factors".into()));
        }
        if let Some(t) = trace.as_deref_mut() {
            t.push(objective_factors(&rows, &cols, m, opts.alpha, opts.reg));
        }
        half_sweep(&mut cols, &rows, &m.cols, opts.alpha, opts.reg)?;
        if !cols.is_finite() {
            return Err(Error::Training("non-finite column factors".into()));
        }
        if let Some(t) = trace.as_deref_mut() {
            t.push(objective_factors(&rows, &cols, m, opts.alpha, opts.reg));
        }
    }
    model.row_factors = rows;
    model.col_factors = cols;
    Ok((model, ()))
}

/// Exact regularized implicit-ALS loss:
/// `sum_{u,i} c_ui (p_ui - x_u . y_i)^2 + reg (sum ||x||^2 + sum ||y||^2)`
/// with p = 1 and c = 1 + alpha*w on observed cells, p = 0 and c = 1
/// elsewhere. Evaluated by the straightforward double loop.
pub fn objective(model: &FactorModel, m: &InteractionMatrix) -> Result<f64> {
    if model.row_factors.rows() != m.n_rows() || model.col_factors.rows() != m.n_cols() {
        return Err(Error::Dimension(format!(
            "model is {}x{}, matrix is {}x{}",
            model.row_factors.rows(),
            model.col_factors.rows(),
            m.n_rows(),
            m.n_cols()
        )));
    }
    Ok(objective_factors(
        &model.row_factors,
        &model.col_factors,
        m,
        model.alpha,
        model.regularization,
    ))
}

fn objective_factors(
    rows: &Matrix,
    cols: &Matrix,
    m: &InteractionMatrix,
    alpha: f64,
    reg: f64,
) -> f64 {
    let mut loss = 0.0;
    for r in 0..m.n_rows() {
        let x = rows.row(r);
        let mut observed: HashMap<u32, f64> = HashMap::new();
        for &(c, w) in &m.rows[r] {
            observed.insert(c, w);
        }
        for c in 0..m.n_cols() {
            let pred = dot(x, cols.row(c));
            match observed.get(&(c as u32)) {
                Some(&w) => {
                    let conf = 1.0 + alpha * w;
                    loss += conf * (1.0 - pred) * (1.0 - pred);
                }
                None => loss += pred * pred,
            }
        }
    }
    let sq = |m: &Matrix| m.data().iter().map(|v| v * v).sum::<f64>();
    loss + reg * (sq(rows) + sq(cols))
}

/// Factorizes the user x postcode matrix implied by mapping each event's
/// item to its ad's postcode. Column factors keyed by postcode are the
/// location embeddings.
pub fn location_fit(
    events: &[Event],
    ads: &AdCorpus,
    cfg: &SignalWeightConfig,
    opts: &AlsOptions,
) -> Result<FactorModel> {
    if events.is_empty() {
        return Err(Error::InvalidInput("empty event log".into()));
    }
    let mut unknown: Vec<String> = Vec::new();
    let mut obs = Vec::with_capacity(events.len());
    for e in events {
        match ads.get(&e.item) {
            Some(ad) => obs.push((
                e.user.clone(),
                ad.postcode.clone(),
                signal_weight(e.signal, cfg),
            )),
            None => {
                if !unknown.contains(&e.item) {
                    unknown.push(e.item.clone());
                }
            }
        }
    }
    if !unknown.is_empty() {
        return Err(Error::UnknownItems(unknown));
    }
    let m = InteractionMatrix::aggregate(obs)?;
    als_fit(&m, opts)
}
