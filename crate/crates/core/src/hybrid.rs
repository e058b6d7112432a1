//! Attention-gated Siamese fusion: per-item feature bundles from the
//! first-stage models, same-day conversion pairs with sampled negatives,
//! and a shared-weight tower producing unit-norm 100-d item
//! representations compared by cosine.
//!
//! Attention is a per-group scalar gate: each group's score is a learned
//! linear function of its vector (`dot(w_g, v_g) / dim_g + b_g`), absent
//! groups score negative infinity, and the softmax over present groups
//! yields weights that are exactly zero on absent groups. Group vectors
//! are rescaled by `4 * weight` so the concatenation magnitude stays
//! comparable across mask patterns.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datamodel::{day_index, AdCorpus, Event, SignalKind};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, read_mat0, write_mat0, EmbeddingTable, Matrix};
use crate::mf::FactorModel;
use crate::nn::{log_sigmoid, momentum_update, sigmoid, DenseStack, StackMomentum};

pub const GROUP_COUNT: usize = 4;
pub const GROUP_NAMES: [&str; GROUP_COUNT] = ["cf", "text", "image", "location"];
pub const DEFAULT_GROUP_DIMS: [usize; GROUP_COUNT] = [100, 100, 100, 10];
/// Rescale factor applied to each present group (the group count), so a
/// fully-present bundle and a text-only bundle feed comparable magnitudes
/// into the tower.
const GROUP_RESCALE: f64 = GROUP_COUNT as f64;

/// Per-item fusion input: one optional vector per feature group. Text is
/// always present (every ad has a title).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub cf: Option<Vec<f64>>,
    pub text: Vec<f64>,
    pub image: Option<Vec<f64>>,
    pub location: Option<Vec<f64>>,
}

impl FeatureBundle {
    pub fn presence(&self) -> [bool; GROUP_COUNT] {
        [
            self.cf.is_some(),
            true,
            self.image.is_some(),
            self.location.is_some(),
        ]
    }

    fn group(&self, g: usize) -> Option<&[f64]> {
        match g {
            0 => self.cf.as_deref(),
            1 => Some(&self.text),
            2 => self.image.as_deref(),
            3 => self.location.as_deref(),
            _ => unreachable!(),
        }
    }
}

fn unit_or_zero(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

/// Collects an item's first-stage embeddings into a bundle. Presence per
/// group: cf iff the item is in the ALS column index, image iff an image
/// embedding exists, location iff the ad's postcode is in the location
/// table; text is always computed.
///
/// Each group vector is scaled to unit length: the upstream models emit
/// wildly different magnitudes (classifier activations run an order of
/// magnitude hotter than latent factors), and the attention gate should
/// weigh directions, not incidental norms.
pub fn assemble(
    item_id: &str,
    cf_model: &FactorModel,
    text_embeddings: &EmbeddingTable,
    image_embeddings: &EmbeddingTable,
    location_table: &EmbeddingTable,
    ads: &AdCorpus,
) -> Result<FeatureBundle> {
    let ad = ads
        .get(item_id)
        .ok_or_else(|| Error::NotFound(format!("item {item_id} not in corpus")))?;
    let text = text_embeddings
        .get(item_id)
        .ok_or_else(|| Error::InvalidInput(format!("no text embedding for {item_id}")))?;
    Ok(FeatureBundle {
        cf: cf_model.col_vector(item_id).map(unit_or_zero),
        text: unit_or_zero(text),
        image: image_embeddings.get(item_id).map(unit_or_zero),
        location: location_table.get(&ad.postcode).map(unit_or_zero),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PairLabel {
    Positive,
    Negative,
}

/// An (item, item) training example. The two sides are always distinct.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PairExample {
    pub a: String,
    pub b: String,
    pub label: PairLabel,
}

impl PairExample {
    pub fn new(a: impl Into<String>, b: impl Into<String>, label: PairLabel) -> Self {
        let (a, b) = (a.into(), b.into());
        debug_assert_ne!(a, b, "pair sides must differ");
        PairExample { a, b, label }
    }

    pub fn is_positive(&self) -> bool {
        self.label == PairLabel::Positive
    }
}

fn canonical(a: &str, b: &str) -> (String, String) {
    if a <= b {
        (a.to_owned(), b.to_owned())
    } else {
        (b.to_owned(), a.to_owned())
    }
}

/// Positive pairs: for every user and UTC calendar day, all unordered
/// pairs of distinct items the user sent a message about or viewed the
/// phone number for, deduplicated globally. Output is sorted.
pub fn build_pairs(events: &[Event]) -> Vec<PairExample> {
    let mut by_user_day: BTreeMap<(&str, i64), BTreeSet<&str>> = BTreeMap::new();
    for e in events {
        if matches!(e.signal, SignalKind::SendMessage | SignalKind::ShowPhone) {
            by_user_day
                .entry((e.user.as_str(), day_index(e.ts)))
                .or_default()
                .insert(e.item.as_str());
        }
    }
    let mut seen: HashSet<(String, String)> = HashSet::new();
    let mut pairs = Vec::new();
    for items in by_user_day.values() {
        let items: Vec<&&str> = items.iter().collect();
        for i in 0..items.len() {
            for j in (i + 1)..items.len() {
                let key = canonical(items[i], items[j]);
                if seen.insert(key.clone()) {
                    pairs.push(PairExample::new(key.0, key.1, PairLabel::Positive));
                }
            }
        }
    }
    pairs.sort_by(|x, y| (&x.a, &x.b).cmp(&(&y.a, &y.b)));
    pairs
}

const NEGATIVE_SAMPLING_RETRIES: usize = 100;

/// For each positive (a, b), draws `ratio` partner items uniformly from
/// the universe, keeping the anchor `a` and rejecting the anchor itself
/// and anything already a positive pair with it.
pub fn sample_negatives(
    positives: &[PairExample],
    universe: &[String],
    ratio: usize,
    seed: u64,
) -> Result<Vec<PairExample>> {
    if ratio < 1 {
        return Err(Error::Config("negative ratio must be >= 1".into()));
    }
    if universe.len() < 2 {
        return Err(Error::InvalidInput("universe too small".into()));
    }
    let positive_set: HashSet<(String, String)> = positives
        .iter()
        .map(|p| canonical(&p.a, &p.b))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut negatives = Vec::with_capacity(positives.len() * ratio);
    for pos in positives {
        for _ in 0..ratio {
            let mut accepted = false;
            for _ in 0..NEGATIVE_SAMPLING_RETRIES {
                let x = &universe[rng.random_range(0..universe.len())];
                if *x == pos.a || positive_set.contains(&canonical(&pos.a, x)) {
                    continue;
                }
                negatives.push(PairExample::new(pos.a.clone(), x.clone(), PairLabel::Negative));
                accepted = true;
                break;
            }
            if !accepted {
                return Err(Error::SamplingExhausted {
                    anchor: pos.a.clone(),
                    retries: NEGATIVE_SAMPLING_RETRIES,
                });
            }
        }
    }
    Ok(negatives)
}

/// A unit-norm 100-d item representation.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemRepresentation {
    pub item_id: String,
    pub vector: Vec<f64>,
}

impl ItemRepresentation {
    pub fn new(item_id: impl Into<String>, vector: Vec<f64>) -> Self {
        ItemRepresentation {
            item_id: item_id.into(),
            vector,
        }
    }
}

/// Cosine of two unit-norm representations (their dot product).
pub fn score(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b)
}

#[derive(Debug, Clone)]
pub struct HybridOptions {
    pub group_dims: [usize; GROUP_COUNT],
    /// Hidden and output widths of the tower (input width is the
    /// concatenation size).
    pub tower_widths: Vec<usize>,
    pub tau_init: f64,
    pub epochs: usize,
    pub step: f64,
    pub batch_size: usize,
    pub momentum: f64,
    /// Probability of masking each optional group (cf, image, location)
    /// per side during training. Serving-time bundles with missing groups
    /// are then in-distribution, which is what lets the gate shift onto
    /// content for cold items.
    pub group_dropout: f64,
    /// Initial attention biases. The default trusts the behavior group
    /// most when it is available; the gates remain free to move.
    pub attn_bias_init: [f64; GROUP_COUNT],
    pub seed: u64,
}

impl Default for HybridOptions {
    fn default() -> Self {
        HybridOptions {
            group_dims: DEFAULT_GROUP_DIMS,
            tower_widths: vec![256, 128, 100],
            tau_init: 5.0,
            epochs: 8,
            step: 0.05,
            batch_size: 32,
            momentum: 0.9,
            group_dropout: 0.2,
            attn_bias_init: [0.0; GROUP_COUNT],
            seed: 0,
        }
    }
}

/// The Siamese fusion model: attention gates plus the towering network and
/// a learnable similarity temperature.
#[derive(Debug, Clone)]
pub struct HybridModel {
    group_dims: [usize; GROUP_COUNT],
    attn_w: [Vec<f64>; GROUP_COUNT],
    attn_b: [f64; GROUP_COUNT],
    tower: DenseStack,
    tau: f64,
}

struct RepresentCache {
    presence: [bool; GROUP_COUNT],
    weights: [f64; GROUP_COUNT],
    tower_cache: crate::nn::StackCache,
    y_norm: f64,
    r: Vec<f64>,
}

/// Gradient accumulator mirroring the parameters.
pub struct HybridGrads {
    attn_w: [Vec<f64>; GROUP_COUNT],
    attn_b: [f64; GROUP_COUNT],
    tower: crate::nn::StackGrads,
    tau: f64,
}

impl HybridModel {
    pub fn new(opts: &HybridOptions) -> Self {
        assert!(opts.tau_init > 0.0, "temperature must be positive");
        let input_dim: usize = opts.group_dims.iter().sum();
        let mut widths = vec![input_dim];
        widths.extend_from_slice(&opts.tower_widths);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut tower = DenseStack::new(&widths, &mut rng);
        // a nonzero output bias keeps the pre-normalization vector away
        // from the origin even when every hidden rectifier is off, so any
        // bundle gets a valid unit-norm representation
        {
            let last = tower.n_layers() - 1;
            let mut bias = vec![0.0; *widths.last().unwrap()];
            for b in bias.iter_mut() {
                *b = rng.random_range(-0.1..0.1);
            }
            tower.set_bias(last, bias);
        }
        HybridModel {
            group_dims: opts.group_dims,
            attn_w: opts.group_dims.map(|d| vec![0.0; d]),
            attn_b: opts.attn_bias_init,
            tower,
            tau: opts.tau_init,
        }
    }

    pub fn group_dims(&self) -> [usize; GROUP_COUNT] {
        self.group_dims
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn tower(&self) -> &DenseStack {
        &self.tower
    }

    pub fn representation_dim(&self) -> usize {
        self.tower.output_dim()
    }

    fn check_bundle(&self, bundle: &FeatureBundle) {
        for g in 0..GROUP_COUNT {
            if let Some(v) = bundle.group(g) {
                assert_eq!(
                    v.len(),
                    self.group_dims[g],
                    "{} group has wrong dimension",
                    GROUP_NAMES[g]
                );
            }
        }
    }

    /// Attention weights for a presence mask: softmax over the linear
    /// scores of present groups, exactly zero on absent groups.
    fn attention_with_presence(
        &self,
        bundle: &FeatureBundle,
        presence: [bool; GROUP_COUNT],
    ) -> [f64; GROUP_COUNT] {
        let mut scores = [f64::NEG_INFINITY; GROUP_COUNT];
        for g in 0..GROUP_COUNT {
            if presence[g] {
                let v = bundle.group(g).expect("present group has a vector");
                scores[g] = dot(&self.attn_w[g], v) / self.group_dims[g] as f64 + self.attn_b[g];
            }
        }
        let max = scores
            .iter()
            .filter(|s| s.is_finite())
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(max.is_finite(), "at least one group must be present");
        let mut weights = [0.0; GROUP_COUNT];
        let mut total = 0.0;
        for g in 0..GROUP_COUNT {
            if presence[g] {
                weights[g] = (scores[g] - max).exp();
                total += weights[g];
            }
        }
        for w in weights.iter_mut() {
            *w /= total;
        }
        weights
    }

    fn represent_cached(
        &self,
        bundle: &FeatureBundle,
        presence: [bool; GROUP_COUNT],
    ) -> RepresentCache {
        self.check_bundle(bundle);
        let weights = self.attention_with_presence(bundle, presence);
        let mut x = Vec::with_capacity(self.group_dims.iter().sum());
        for g in 0..GROUP_COUNT {
            match bundle.group(g) {
                Some(v) if presence[g] => {
                    let s = GROUP_RESCALE * weights[g];
                    x.extend(v.iter().map(|&vi| s * vi));
                }
                _ => x.extend(std::iter::repeat_n(0.0, self.group_dims[g])),
            }
        }
        let tower_cache = self.tower.forward_cached(&x);
        let y = tower_cache.inputs.last().unwrap().clone();
        let y_norm = norm(&y).max(1e-300);
        let r = y.iter().map(|v| v / y_norm).collect();
        RepresentCache {
            presence,
            weights,
            tower_cache,
            y_norm,
            r,
        }
    }

    /// Representation under an explicit presence mask. The public
    /// [`represent`] uses the bundle's own mask; this exists so tests can
    /// assert that an absent group equals a zeroed present group whose
    /// attention score is forced out.
    #[doc(hidden)]
    pub fn represent_with_presence(
        &self,
        bundle: &FeatureBundle,
        presence: [bool; GROUP_COUNT],
    ) -> Vec<f64> {
        self.represent_cached(bundle, presence).r
    }

    pub fn num_params(&self) -> usize {
        self.group_dims.iter().sum::<usize>() + GROUP_COUNT + 1 + self.tower.num_params()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for w in &self.attn_w {
            out.extend_from_slice(w);
        }
        out.extend_from_slice(&self.attn_b);
        out.push(self.tau);
        self.tower.params_flat(&mut out);
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.num_params());
        let mut it = params.iter().cloned();
        for w in &mut self.attn_w {
            for v in w.iter_mut() {
                *v = it.next().unwrap();
            }
        }
        for b in &mut self.attn_b {
            *b = it.next().unwrap();
        }
        self.tau = it.next().unwrap();
        self.tower.set_params_flat(&mut it);
    }

    pub fn zero_grads(&self) -> HybridGrads {
        HybridGrads {
            attn_w: self.group_dims.map(|d| vec![0.0; d]),
            attn_b: [0.0; GROUP_COUNT],
            tower: self.tower.zero_grads(),
            tau: 0.0,
        }
    }

    /// Loss of one pair plus gradient accumulation (when `grads` is
    /// provided). Both sides share every parameter.
    fn pair_loss_backward(
        &self,
        a: &FeatureBundle,
        b: &FeatureBundle,
        label: PairLabel,
        grads: Option<&mut HybridGrads>,
    ) -> f64 {
        self.pair_loss_backward_masked(a, b, a.presence(), b.presence(), label, grads)
    }

    fn pair_loss_backward_masked(
        &self,
        a: &FeatureBundle,
        b: &FeatureBundle,
        presence_a: [bool; GROUP_COUNT],
        presence_b: [bool; GROUP_COUNT],
        label: PairLabel,
        mut grads: Option<&mut HybridGrads>,
    ) -> f64 {
        let ca = self.represent_cached(a, presence_a);
        let cb = self.represent_cached(b, presence_b);
        let s = dot(&ca.r, &cb.r);
        let z = self.tau * s;
        let y = match label {
            PairLabel::Positive => 1.0,
            PairLabel::Negative => 0.0,
        };
        let loss = -(y * log_sigmoid(z) + (1.0 - y) * log_sigmoid(-z));
        if let Some(grads) = grads.as_deref_mut() {
            let dz = sigmoid(z) - y;
            grads.tau += dz * s;
            let ds = dz * self.tau;
            let dra: Vec<f64> = cb.r.iter().map(|v| ds * v).collect();
            let drb: Vec<f64> = ca.r.iter().map(|v| ds * v).collect();
            self.side_backward(a, &ca, &dra, grads);
            self.side_backward(b, &cb, &drb, grads);
        }
        loss
    }

    fn side_backward(
        &self,
        bundle: &FeatureBundle,
        cache: &RepresentCache,
        d_r: &[f64],
        grads: &mut HybridGrads,
    ) {
        // through the normalization: dL/dy = (g - r (r . g)) / ||y||
        let rg = dot(&cache.r, d_r);
        let d_y: Vec<f64> = d_r
            .iter()
            .zip(&cache.r)
            .map(|(g, r)| (g - r * rg) / cache.y_norm)
            .collect();
        let d_x = self.tower.backward(&cache.tower_cache, &d_y, &mut grads.tower);
        // through the attention gates
        let mut d_alpha = [0.0; GROUP_COUNT];
        let mut offset = 0;
        for g in 0..GROUP_COUNT {
            let d = self.group_dims[g];
            if cache.presence[g] {
                let v = bundle.group(g).unwrap();
                d_alpha[g] = GROUP_RESCALE * dot(v, &d_x[offset..offset + d]);
            }
            offset += d;
        }
        let weighted_sum: f64 = (0..GROUP_COUNT)
            .filter(|&g| cache.presence[g])
            .map(|g| cache.weights[g] * d_alpha[g])
            .sum();
        for g in 0..GROUP_COUNT {
            if !cache.presence[g] {
                continue;
            }
            let d_score = cache.weights[g] * (d_alpha[g] - weighted_sum);
            let v = bundle.group(g).unwrap();
            let inv_dim = 1.0 / self.group_dims[g] as f64;
            for (gw, &vi) in grads.attn_w[g].iter_mut().zip(v) {
                *gw += d_score * vi * inv_dim;
            }
            grads.attn_b[g] += d_score;
        }
    }

    /// Mean pair loss over a batch.
    pub fn batch_loss(&self, batch: &[(&FeatureBundle, &FeatureBundle, PairLabel)]) -> f64 {
        let total: f64 = batch
            .iter()
            .map(|(a, b, l)| self.pair_loss_backward(a, b, *l, None))
            .sum();
        total / batch.len() as f64
    }

    /// Flat mean gradient over a batch, aligned with
    /// [`HybridModel::params_flat`].
    pub fn batch_gradient(&self, batch: &[(&FeatureBundle, &FeatureBundle, PairLabel)]) -> Vec<f64> {
        let mut grads = self.zero_grads();
        for (a, b, l) in batch {
            self.pair_loss_backward(a, b, *l, Some(&mut grads));
        }
        let scale = 1.0 / batch.len() as f64;
        let mut out = Vec::with_capacity(self.num_params());
        for w in &grads.attn_w {
            out.extend(w.iter().map(|v| v * scale));
        }
        out.extend(grads.attn_b.iter().map(|v| v * scale));
        out.push(grads.tau * scale);
        let mut tower_flat = Vec::new();
        DenseStack::grads_flat(&grads.tower, &mut tower_flat);
        out.extend(tower_flat.iter().map(|v| v * scale));
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let widths: Vec<String> = self.tower.widths().iter().map(usize::to_string).collect();
        let dims: Vec<String> = self.group_dims.iter().map(usize::to_string).collect();
        let manifest = dir.join("manifest");
        std::fs::write(
            &manifest,
            format!(
                "kind=hybrid\ngroup_dims={}\ntower={}\ntau={}\n",
                dims.join(","),
                widths.join(","),
                self.tau
            ),
        )
        .map_err(|e| Error::io(&manifest, e))?;
        for (g, w) in self.attn_w.iter().enumerate() {
            let m = Matrix::from_vec(1, w.len(), w.clone());
            write_mat0(&dir.join(format!("attn_w{g}.mat")), &m)?;
        }
        let b = Matrix::from_vec(1, GROUP_COUNT, self.attn_b.to_vec());
        write_mat0(&dir.join("attn_b.mat"), &b)?;
        self.tower.save(dir, "tower")
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = crate::mf::parse_manifest(&dir.join("manifest"))?;
        let tau: f64 = manifest
            .get("tau")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Config("manifest missing tau".into()))?;
        let tower_widths: Vec<usize> = manifest
            .get("tower")
            .ok_or_else(|| Error::Config("manifest missing tower".into()))?
            .split(',')
            .map(|v| v.parse().map_err(|_| Error::Config("bad tower width".into())))
            .collect::<Result<_>>()?;
        let dims_vec: Vec<usize> = manifest
            .get("group_dims")
            .ok_or_else(|| Error::Config("manifest missing group_dims".into()))?
            .split(',')
            .map(|v| v.parse().map_err(|_| Error::Config("bad group dim".into())))
            .collect::<Result<_>>()?;
        if dims_vec.len() != GROUP_COUNT {
            return Err(Error::Config("expected 4 group dims".into()));
        }
        let group_dims = [dims_vec[0], dims_vec[1], dims_vec[2], dims_vec[3]];
        let mut attn_w: [Vec<f64>; GROUP_COUNT] = Default::default();
        for (g, slot) in attn_w.iter_mut().enumerate() {
            let m = read_mat0(&dir.join(format!("attn_w{g}.mat")))?;
            *slot = m.data().to_vec();
        }
        let attn_b_m = read_mat0(&dir.join("attn_b.mat"))?;
        let attn_b_vec = attn_b_m.data();
        let tower = DenseStack::load(dir, "tower", tower_widths.len() - 1)?;
        if !(tau > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(HybridModel {
            group_dims,
            attn_w,
            attn_b: [attn_b_vec[0], attn_b_vec[1], attn_b_vec[2], attn_b_vec[3]],
            tower,
            tau,
        })
    }
}

/// Attention weights over the four groups for a bundle: nonnegative, zero
/// on absent groups, summing to one over present groups.
pub fn attention(bundle: &FeatureBundle, model: &HybridModel) -> [f64; GROUP_COUNT] {
    model.attention_with_presence(bundle, bundle.presence())
}

/// The unit-norm item representation of a bundle.
pub fn represent(bundle: &FeatureBundle, model: &HybridModel) -> Vec<f64> {
    model.represent_with_presence(bundle, bundle.presence())
}

/// Trains the Siamese model with mini-batch gradient descent plus momentum
/// on the binary cross-entropy of `sigmoid(tau * cos)`. The step decays
/// linearly to a tenth of its initial value, and the returned parameters
/// are the average over the final quarter of the epochs, which damps the
/// batch-to-batch wander of a small pair set. Returns the model and mean
/// loss per epoch.
pub fn hybrid_fit_traced(
    bundles: &HashMap<String, FeatureBundle>,
    pairs: &[PairExample],
    opts: &HybridOptions,
) -> Result<(HybridModel, Vec<f64>)> {
    if opts.step <= 0.0 {
        return Err(Error::Config("step must be positive".into()));
    }
    if opts.epochs < 1 || opts.batch_size < 1 {
        return Err(Error::Config("epochs and batch_size must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&opts.group_dropout) {
        return Err(Error::Config("group_dropout must be in [0, 1)".into()));
    }
    let n_pos = pairs.iter().filter(|p| p.is_positive()).count();
    if n_pos == 0 || n_pos == pairs.len() {
        return Err(Error::InvalidInput(
            "training needs at least one positive and one negative pair".into(),
        ));
    }
    let mut missing: Vec<String> = Vec::new();
    for p in pairs {
        for id in [&p.a, &p.b] {
            if !bundles.contains_key(id) && !missing.contains(id) {
                missing.push(id.clone());
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::UnknownItems(missing));
    }

    let mut model = HybridModel::new(opts);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut attn_w_vel: [Vec<f64>; GROUP_COUNT] = opts.group_dims.map(|d| vec![0.0; d]);
    let mut attn_b_vel = [0.0; GROUP_COUNT];
    let mut tau_vel = 0.0;
    let mut tower_momentum = StackMomentum::new(&model.tower);

    // text (group 1) is never dropped; it is the one group every ad has
    let droppable = [0usize, 2, 3];
    let tail = (opts.epochs / 4).max(1);
    let mut tail_sum: Vec<f64> = Vec::new();
    let mut tail_count = 0usize;
    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        let step = opts.step * (1.0 - epoch as f64 / opts.epochs as f64).max(0.1);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(opts.batch_size) {
            let mut grads = model.zero_grads();
            for &i in chunk {
                let p = &pairs[i];
                let (a, b) = (&bundles[&p.a], &bundles[&p.b]);
                let mut presence_a = a.presence();
                let mut presence_b = b.presence();
                if opts.group_dropout > 0.0 {
                    for &g in &droppable {
                        if presence_a[g] && rng.random::<f64>() < opts.group_dropout {
                            presence_a[g] = false;
                        }
                        if presence_b[g] && rng.random::<f64>() < opts.group_dropout {
                            presence_b[g] = false;
                        }
                    }
                }
                total += model.pair_loss_backward_masked(
                    a,
                    b,
                    presence_a,
                    presence_b,
                    p.label,
                    Some(&mut grads),
                );
            }
            let scale = 1.0 / chunk.len() as f64;
            for g in 0..GROUP_COUNT {
                for v in grads.attn_w[g].iter_mut() {
                    *v *= scale;
                }
                grads.attn_b[g] *= scale;
                momentum_update(
                    &mut model.attn_w[g],
                    &grads.attn_w[g],
                    &mut attn_w_vel[g],
                    step,
                    opts.momentum,
                );
            }
            momentum_update(
                &mut model.attn_b,
                &grads.attn_b,
                &mut attn_b_vel,
                step,
                opts.momentum,
            );
            grads.tau *= scale;
            tau_vel = opts.momentum * tau_vel - step * grads.tau;
            model.tau += tau_vel;
            // keep the temperature in its valid range
            if model.tau < 1e-3 {
                model.tau = 1e-3;
                tau_vel = 0.0;
            }
            for w in grads.tower.weights.iter_mut() {
                for v in w.data_mut() {
                    *v *= scale;
                }
            }
            for b in grads.tower.biases.iter_mut() {
                for v in b.iter_mut() {
                    *v *= scale;
                }
            }
            tower_momentum.apply(&mut model.tower, &grads.tower, step, opts.momentum);
        }
        if !model.tower.is_finite() || !model.tau.is_finite() {
            return Err(Error::Training("hybrid model diverged".into()));
        }
        epoch_losses.push(total / pairs.len() as f64);
    }
    Ok((model, epoch_losses))
}

pub fn hybrid_fit(
    bundles: &HashMap<String, FeatureBundle>,
    pairs: &[PairExample],
    opts: &HybridOptions,
) -> Result<HybridModel> {
    hybrid_fit_traced(bundles, pairs, opts).map(|(m, _)| m)
}

/// Pair persistence: `item_a<TAB>item_b<TAB>label` lines with labels
/// `positive` / `negative`.
pub fn write_pairs(path: &Path, pairs: &[PairExample]) -> Result<()> {
    let mut out = String::new();
    for p in pairs {
        let label = match p.label {
            PairLabel::Positive => "positive",
            PairLabel::Negative => "negative",
        };
        out.push_str(&format!("{}\t{}\t{}\n", p.a, p.b, label));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_pairs(path: &Path) -> Result<Vec<PairExample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::parse(path, lineno + 1, "expected 3 fields"));
        }
        let label = match fields[2] {
            "positive" => PairLabel::Positive,
            "negative" => PairLabel::Negative,
            other => {
                return Err(Error::parse(
                    path,
                    lineno + 1,
                    format!("unknown label {other:?}"),
                ))
            }
        };
        if fields[0] == fields[1] {
            return Err(Error::parse(path, lineno + 1, "pair sides must differ"));
        }
        pairs.push(PairExample::new(fields[0], fields[1], label));
    }
    Ok(pairs)
}
