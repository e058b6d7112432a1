//! Image embeddings: a seven-layer dense network projects precomputed
//! 2048-d image features into the word-vector space by regressing onto the
//! mean vector of the first five in-vocabulary title tokens.
//!
//! The upstream feature extractor is out of scope; features arrive via the
//! `IMGF` file format.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datamodel::{Ad, ImageFeatures};
use crate::error::{Error, Result};
use crate::linalg::EmbeddingTable;
use crate::nn::{DenseStack, StackMomentum};
use crate::textpipe::{tokenize, WordVectors};

/// 2048 -> ... -> 100 with a geometric taper: seven weight layers.
pub const PROJECTOR_WIDTHS: [usize; 8] = [2048, 1024, 512, 256, 256, 128, 128, 100];

/// Number of leading in-vocabulary title tokens averaged into the target.
pub const TARGET_TOKENS: usize = 5;

/// Mean word vector of the first five in-vocabulary title tokens. `None`
/// when no title token is in the vocabulary; such items are excluded from
/// training.
pub fn title_target(ad: &Ad, wv: &WordVectors) -> Option<Vec<f64>> {
    let mut mean = vec![0.0; wv.dim()];
    let mut n = 0usize;
    for tok in tokenize(&ad.title) {
        if n == TARGET_TOKENS {
            break;
        }
        if let Some(v) = wv.get(&tok) {
            for (m, x) in mean.iter_mut().zip(v) {
                *m += x;
            }
            n += 1;
        }
    }
    if n == 0 {
        return None;
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    Some(mean)
}

/// The seven-layer dense projector. Construction enforces exactly seven
/// weight layers from 2048 to 100.
#[derive(Debug, Clone)]
pub struct ImageProjector {
    stack: DenseStack,
}

impl ImageProjector {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageProjector {
            stack: DenseStack::new(&PROJECTOR_WIDTHS, &mut rng),
        }
    }

    /// Wraps an existing stack, validating the structural invariants.
    pub fn from_stack(stack: DenseStack) -> Result<Self> {
        if stack.n_layers() != 7 {
            return Err(Error::Dimension(format!(
                "projector must have exactly 7 layers, got {}",
                stack.n_layers()
            )));
        }
        if stack.input_dim() != PROJECTOR_WIDTHS[0] {
            return Err(Error::Dimension(format!(
                "projector input width must be {}, got {}",
                PROJECTOR_WIDTHS[0],
                stack.input_dim()
            )));
        }
        if stack.output_dim() != *PROJECTOR_WIDTHS.last().unwrap() {
            return Err(Error::Dimension(format!(
                "projector output width must be {}, got {}",
                PROJECTOR_WIDTHS.last().unwrap(),
                stack.output_dim()
            )));
        }
        Ok(ImageProjector { stack })
    }

    pub fn input_dim(&self) -> usize {
        self.stack.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.stack.output_dim()
    }

    pub fn stack(&self) -> &DenseStack {
        &self.stack
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = dir.join("manifest");
        std::fs::write(
            &manifest,
            format!(
                "kind=imagemlp\nlayers={}\ninput={}\noutput={}\n",
                self.stack.n_layers(),
                self.input_dim(),
                self.output_dim()
            ),
        )
        .map_err(|e| Error::io(&manifest, e))?;
        self.stack.save(dir, "layer")
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let stack = DenseStack::load(dir, "layer", 7)?;
        ImageProjector::from_stack(stack)
    }
}

/// Forward pass: the 100-d image embedding of one feature vector.
pub fn image_embed(feature: &[f32], proj: &ImageProjector) -> Result<Vec<f64>> {
    if feature.len() != proj.input_dim() {
        return Err(Error::Dimension(format!(
            "feature has {} components, projector expects {}",
            feature.len(),
            proj.input_dim()
        )));
    }
    if feature.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(
            "image feature contains non-finite components".into(),
        ));
    }
    let x: Vec<f64> = feature.iter().map(|&v| v as f64).collect();
    Ok(proj.stack.forward(&x))
}

#[derive(Debug, Clone)]
pub struct MlpOptions {
    pub epochs: usize,
    pub step: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for MlpOptions {
    fn default() -> Self {
        MlpOptions {
            epochs: 20,
            step: 0.002,
            batch_size: 32,
            momentum: 0.9,
            seed: 0,
        }
    }
}

/// Mean over samples of the squared error between the stack output and
/// the target vector.
pub fn mse_batch_loss(stack: &DenseStack, inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> f64 {
    assert_eq!(inputs.len(), targets.len());
    let mut total = 0.0;
    for (x, t) in inputs.iter().zip(targets) {
        let y = stack.forward(x);
        total += y.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    total / inputs.len() as f64
}

/// Flat gradient of [`mse_batch_loss`] with respect to the stack
/// parameters.
pub fn mse_batch_gradient(stack: &DenseStack, inputs: &[Vec<f64>], targets: &[Vec<f64>]) -> Vec<f64> {
    let mut grads = stack.zero_grads();
    let scale = 2.0 / inputs.len() as f64;
    for (x, t) in inputs.iter().zip(targets) {
        let cache = stack.forward_cached(x);
        let y = cache.inputs.last().unwrap();
        let d_out: Vec<f64> = y.iter().zip(t).map(|(a, b)| scale * (a - b)).collect();
        stack.backward(&cache, &d_out, &mut grads);
    }
    let mut out = Vec::with_capacity(stack.num_params());
    DenseStack::grads_flat(&grads, &mut out);
    out
}

/// Trains the projector by mini-batch gradient descent with momentum on
/// the MSE between projected features and title targets. Returns the model
/// plus the mean training MSE per epoch (entry 0 is the pre-training MSE).
pub fn mlp_fit_traced(
    features: &ImageFeatures,
    targets: &EmbeddingTable,
    opts: &MlpOptions,
) -> Result<(ImageProjector, Vec<f64>)> {
    if opts.step <= 0.0 {
        return Err(Error::Config("step must be positive".into()));
    }
    if opts.epochs < 1 || opts.batch_size < 1 {
        return Err(Error::Config("epochs and batch_size must be >= 1".into()));
    }
    let mut proj = ImageProjector::new(opts.seed);
    if features.dim() != proj.input_dim() {
        return Err(Error::Dimension(format!(
            "image features are {}-d, projector expects {}",
            features.dim(),
            proj.input_dim()
        )));
    }
    if targets.dim() != proj.output_dim() {
        return Err(Error::Dimension(format!(
            "targets are {}-d, projector emits {}",
            targets.dim(),
            proj.output_dim()
        )));
    }
    let mut inputs: Vec<Vec<f64>> = Vec::new();
    let mut outs: Vec<Vec<f64>> = Vec::new();
    for (id, feat) in features.iter() {
        if let Some(t) = targets.get(id) {
            inputs.push(feat.iter().map(|&v| v as f64).collect());
            outs.push(t.to_vec());
        }
    }
    if inputs.is_empty() {
        return Err(Error::InvalidInput(
            "no (feature, target) training pairs".into(),
        ));
    }
    // standardize the raw features so the step size is meaningful for any
    // input scale; the shift and scale are folded into the first layer
    // afterwards, so the persisted projector runs on raw features
    let count = (inputs.len() * features.dim()) as f64;
    let mean = inputs.iter().flatten().sum::<f64>() / count;
    let var = inputs
        .iter()
        .flatten()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / count;
    let scale = var.sqrt().max(1e-12);
    for x in inputs.iter_mut() {
        for v in x.iter_mut() {
            *v = (*v - mean) / scale;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut momentum = StackMomentum::new(&proj.stack);
    let mut losses = vec![mse_batch_loss(&proj.stack, &inputs, &outs)];
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(opts.batch_size) {
            let bx: Vec<Vec<f64>> = chunk.iter().map(|&i| inputs[i].clone()).collect();
            let bt: Vec<Vec<f64>> = chunk.iter().map(|&i| outs[i].clone()).collect();
            let mut grads = proj.stack.zero_grads();
            let scale = 2.0 / bx.len() as f64;
            for (x, t) in bx.iter().zip(&bt) {
                let cache = proj.stack.forward_cached(x);
                let y = cache.inputs.last().unwrap();
                let d_out: Vec<f64> = y.iter().zip(t).map(|(a, b)| scale * (a - b)).collect();
                proj.stack.backward(&cache, &d_out, &mut grads);
            }
            momentum.apply(&mut proj.stack, &grads, opts.step, opts.momentum);
        }
        if !proj.stack.is_finite() {
            return Err(Error::Training("image projector diverged".into()));
        }
        losses.push(mse_batch_loss(&proj.stack, &inputs, &outs));
    }

    // fold the standardization into layer 0:
    // W (x - mean)/scale + b  ==  (W/scale) x + (b - mean * (W/scale) . 1)
    {
        let (w, b) = proj.stack.layer_mut(0);
        for r in 0..b.len() {
            let row = w.row_mut(r);
            let mut row_sum = 0.0;
            for v in row.iter_mut() {
                *v /= scale;
                row_sum += *v;
            }
            b[r] -= mean * row_sum;
        }
    }
    Ok((proj, losses))
}

pub fn mlp_fit(
    features: &ImageFeatures,
    targets: &EmbeddingTable,
    opts: &MlpOptions,
) -> Result<ImageProjector> {
    mlp_fit_traced(features, targets, opts).map(|(p, _)| p)
}

/// Computes title targets for every ad with at least one in-vocabulary
/// title token.
pub fn title_targets(ads: &[Ad], wv: &WordVectors) -> EmbeddingTable {
    let mut ids = Vec::new();
    let mut rows = Vec::new();
    for ad in ads {
        if let Some(t) = title_target(ad, wv) {
            ids.push(ad.item_id.clone());
            rows.push(t);
        }
    }
    let dim = wv.dim();
    let mut data = Vec::with_capacity(rows.len() * dim);
    for r in &rows {
        data.extend_from_slice(r);
    }
    EmbeddingTable::new(ids, crate::linalg::Matrix::from_vec(rows.len(), dim, data))
}
