//! Textual embeddings: word vectors trained on marketplace text with
//! skip-gram negative sampling, a convolutional category classifier over
//! those vectors, and extraction of the classifier's last hidden layer as
//! the 100-d textual embedding.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datamodel::Ad;
use crate::error::{Error, Result};
use crate::linalg::{dot, read_mat0, write_mat0, Matrix};
use crate::nn::{
    log_sigmoid, relu, sigmoid, softmax_cross_entropy, DenseStack, StackMomentum,
};

/// Lowercases and splits on runs of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
        .collect()
}

/// Word vectors with their vocabulary.
#[derive(Debug, Clone)]
pub struct WordVectors {
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Matrix,
}

impl WordVectors {
    fn new(vocab: Vec<String>, vectors: Matrix) -> Self {
        assert_eq!(vocab.len(), vectors.rows());
        let index = vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        WordVectors {
            vocab,
            index,
            vectors,
        }
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.index.get(token).map(|&i| self.vectors.row(i))
    }

    /// Saved as a vocabulary file (one token per line) plus a `MAT0`
    /// matrix aligned with it.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let vocab_path = dir.join("vocab.txt");
        let mut out = String::new();
        for t in &self.vocab {
            out.push_str(t);
            out.push('\n');
        }
        std::fs::write(&vocab_path, out).map_err(|e| Error::io(&vocab_path, e))?;
        write_mat0(&dir.join("vectors.mat"), &self.vectors)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let vocab_path = dir.join("vocab.txt");
        let text = std::fs::read_to_string(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?;
        let vocab: Vec<String> = text.lines().map(str::to_owned).collect();
        let vectors = read_mat0(&dir.join("vectors.mat"))?;
        if vocab.len() != vectors.rows() {
            return Err(Error::Dimension("vocabulary/matrix size mismatch".into()));
        }
        Ok(WordVectors::new(vocab, vectors))
    }
}

#[derive(Debug, Clone)]
pub struct Word2VecOptions {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub min_count: usize,
    pub epochs: usize,
    pub step: f64,
    pub seed: u64,
}

impl Default for Word2VecOptions {
    fn default() -> Self {
        Word2VecOptions {
            dim: 100,
            window: 5,
            negatives: 5,
            min_count: 2,
            epochs: 10,
            step: 0.025,
            seed: 0,
        }
    }
}

/// Skip-gram with negative sampling over token sequences. Single-threaded
/// and deterministic given the seed. Negatives follow the unigram^0.75
/// distribution.
pub fn word2vec_fit(corpus: &[Vec<String>], opts: &Word2VecOptions) -> Result<WordVectors> {
    if opts.dim < 1 || opts.window < 1 || opts.epochs < 1 {
        return Err(Error::Config("dim, window and epochs must be >= 1".into()));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for sentence in corpus {
        for tok in sentence {
            *counts.entry(tok).or_default() += 1;
        }
    }
    let mut vocab: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|&(_, c)| c >= opts.min_count)
        .collect();
    vocab.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    if vocab.is_empty() {
        return Err(Error::InvalidInput(
            "no tokens survive the minimum count filter".into(),
        ));
    }
    let index: HashMap<&str, usize> = vocab
        .iter()
        .enumerate()
        .map(|(i, &(t, _))| (t, i))
        .collect();

    // cumulative unigram^0.75 table for negative sampling
    let mut cum = Vec::with_capacity(vocab.len());
    let mut acc = 0.0;
    for &(_, c) in &vocab {
        acc += (c as f64).powf(0.75);
        cum.push(acc);
    }
    let total = acc;

    let sentences: Vec<Vec<usize>> = corpus
        .iter()
        .map(|s| s.iter().filter_map(|t| index.get(t.as_str()).copied()).collect())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let v = vocab.len();
    let half = 0.5 / opts.dim as f64;
    let mut input = Matrix::from_fn(v, opts.dim, |_, _| rng.random_range(-half..half));
    let mut output = Matrix::zeros(v, opts.dim);

    let mut neu1e = vec![0.0; opts.dim];
    for epoch in 0..opts.epochs {
        let lr = opts.step * (1.0 - 0.9 * epoch as f64 / opts.epochs as f64);
        for sentence in &sentences {
            for (t, &center) in sentence.iter().enumerate() {
                let b = rng.random_range(1..=opts.window);
                let lo = t.saturating_sub(b);
                let hi = (t + b).min(sentence.len() - 1);
                for j in lo..=hi {
                    if j == t {
                        continue;
                    }
                    let context = sentence[j];
                    neu1e.iter_mut().for_each(|x| *x = 0.0);
                    for k in 0..=opts.negatives {
                        let (target, label) = if k == 0 {
                            (context, 1.0)
                        } else {
                            let r = rng.random::<f64>() * total;
                            let neg = cum.partition_point(|&c| c <= r).min(v - 1);
                            if neg == context {
                                continue;
                            }
                            (neg, 0.0)
                        };
                        let f = sigmoid(dot(input.row(center), output.row(target)));
                        let g = (label - f) * lr;
                        for (e, &o) in neu1e.iter_mut().zip(output.row(target)) {
                            *e += g * o;
                        }
                        let center_row = input.row(center).to_vec();
                        for (o, &c) in output.row_mut(target).iter_mut().zip(&center_row) {
                            *o += g * c;
                        }
                    }
                    for (iv, &e) in input.row_mut(center).iter_mut().zip(&neu1e) {
                        *iv += e;
                    }
                }
            }
        }
    }
    if !input.is_finite() {
        return Err(Error::Training("word vectors diverged".into()));
    }
    Ok(WordVectors::new(
        vocab.iter().map(|&(t, _)| t.to_owned()).collect(),
        input,
    ))
}

/// Maps tokens through the vocabulary (unknown tokens dropped), truncates
/// to `seq_len` and pads with zero vectors.
pub fn embed_sequence(tokens: &[String], wv: &WordVectors, seq_len: usize) -> Vec<f64> {
    let d = wv.dim();
    let mut seq = vec![0.0; seq_len * d];
    let mut pos = 0;
    for tok in tokens {
        if pos == seq_len {
            break;
        }
        if let Some(vec) = wv.get(tok) {
            seq[pos * d..(pos + 1) * d].copy_from_slice(vec);
            pos += 1;
        }
    }
    seq
}

pub const FILTER_WIDTHS: [usize; 3] = [2, 3, 4];

#[derive(Debug, Clone)]
pub struct TextCnnOptions {
    pub filters_per_width: usize,
    pub hidden_dim: usize,
    pub seq_len: usize,
    pub epochs: usize,
    pub step: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TextCnnOptions {
    fn default() -> Self {
        TextCnnOptions {
            filters_per_width: 32,
            hidden_dim: 100,
            seq_len: 64,
            epochs: 8,
            step: 0.05,
            batch_size: 32,
            momentum: 0.9,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
struct ConvLayer {
    width: usize,
    /// filters x (width * dim)
    w: Matrix,
    b: Vec<f64>,
}

/// Convolutional category classifier over word-vector sequences. The
/// hidden dense layer (before the softmax output) is the textual
/// embedding.
#[derive(Debug, Clone)]
pub struct TextClassifier {
    wv_dim: usize,
    seq_len: usize,
    filters_per_width: usize,
    labels: Vec<String>,
    convs: Vec<ConvLayer>,
    /// [3F, hidden, n_labels]: hidden is rectified, output is linear.
    trunk: DenseStack,
}

struct CnnCache {
    /// winning position per (conv index, filter)
    argmax: Vec<Vec<usize>>,
    /// pre-rectifier pooled value per (conv, filter)
    pooled_z: Vec<Vec<f64>>,
    trunk_cache: crate::nn::StackCache,
}

struct CnnGrads {
    convs: Vec<(Matrix, Vec<f64>)>,
    trunk: crate::nn::StackGrads,
}

impl TextClassifier {
    /// A freshly initialized (untrained) classifier; [`cnn_fit`] starts
    /// from this.
    pub fn new(wv_dim: usize, labels: Vec<String>, opts: &TextCnnOptions) -> Self {
        assert!(labels.len() >= 2);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let convs = FILTER_WIDTHS
            .iter()
            .map(|&width| {
                let fan_in = width * wv_dim;
                let s = 1.0 / (fan_in as f64).sqrt();
                ConvLayer {
                    width,
                    w: Matrix::from_fn(opts.filters_per_width, fan_in, |_, _| {
                        rng.random_range(-s..s)
                    }),
                    b: vec![0.0; opts.filters_per_width],
                }
            })
            .collect();
        let feat = FILTER_WIDTHS.len() * opts.filters_per_width;
        let trunk = DenseStack::new(&[feat, opts.hidden_dim, labels.len()], &mut rng);
        TextClassifier {
            wv_dim,
            seq_len: opts.seq_len,
            filters_per_width: opts.filters_per_width,
            labels,
            convs,
            trunk,
        }
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn wv_dim(&self) -> usize {
        self.wv_dim
    }

    pub fn embedding_dim(&self) -> usize {
        self.trunk.widths()[1]
    }

    fn forward_cached(&self, seq: &[f64]) -> CnnCache {
        assert_eq!(seq.len(), self.seq_len * self.wv_dim);
        let d = self.wv_dim;
        let mut features = Vec::with_capacity(self.convs.len() * self.filters_per_width);
        let mut argmax = Vec::with_capacity(self.convs.len());
        let mut pooled_z = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let positions = self.seq_len + 1 - conv.width;
            let span = conv.width * d;
            let mut arg = Vec::with_capacity(self.filters_per_width);
            let mut zs = Vec::with_capacity(self.filters_per_width);
            for f in 0..self.filters_per_width {
                let wrow = conv.w.row(f);
                let mut best = f64::NEG_INFINITY;
                let mut best_p = 0;
                for p in 0..positions {
                    let z = dot(wrow, &seq[p * d..p * d + span]) + conv.b[f];
                    if z > best {
                        best = z;
                        best_p = p;
                    }
                }
                arg.push(best_p);
                zs.push(best);
                features.push(relu(best));
            }
            argmax.push(arg);
            pooled_z.push(zs);
        }
        let trunk_cache = self.trunk.forward_cached(&features);
        CnnCache {
            argmax,
            pooled_z,
            trunk_cache,
        }
    }

    /// Softmax probabilities over labels.
    pub fn predict_probs(&self, seq: &[f64]) -> Vec<f64> {
        let cache = self.forward_cached(seq);
        crate::nn::softmax(cache.trunk_cache.inputs.last().unwrap())
    }

    pub fn predict_label(&self, seq: &[f64]) -> usize {
        let probs = self.predict_probs(seq);
        probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap()
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// The textual embedding: the rectified hidden activation feeding the
    /// softmax layer.
    pub fn hidden_activation(&self, seq: &[f64]) -> Vec<f64> {
        let cache = self.forward_cached(seq);
        cache.trunk_cache.inputs[1].clone()
    }

    fn zero_grads(&self) -> CnnGrads {
        CnnGrads {
            convs: self
                .convs
                .iter()
                .map(|c| (Matrix::zeros(c.w.rows(), c.w.cols()), vec![0.0; c.b.len()]))
                .collect(),
            trunk: self.trunk.zero_grads(),
        }
    }

    /// Accumulates the gradient of one example's cross-entropy loss.
    fn backward(&self, seq: &[f64], cache: &CnnCache, label: usize, grads: &mut CnnGrads) -> f64 {
        let logits = cache.trunk_cache.inputs.last().unwrap();
        let (loss, dlogits) = softmax_cross_entropy(logits, label);
        let dfeat = self
            .trunk
            .backward(&cache.trunk_cache, &dlogits, &mut grads.trunk);
        let d = self.wv_dim;
        for (ci, conv) in self.convs.iter().enumerate() {
            let span = conv.width * d;
            for f in 0..self.filters_per_width {
                let g = dfeat[ci * self.filters_per_width + f];
                if g == 0.0 || cache.pooled_z[ci][f] <= 0.0 {
                    continue;
                }
                let p = cache.argmax[ci][f];
                let window = &seq[p * d..p * d + span];
                let wrow = grads.convs[ci].0.row_mut(f);
                for (wv, &x) in wrow.iter_mut().zip(window) {
                    *wv += g * x;
                }
                grads.convs[ci].1[f] += g;
            }
        }
        loss
    }

    pub fn num_params(&self) -> usize {
        self.convs
            .iter()
            .map(|c| c.w.data().len() + c.b.len())
            .sum::<usize>()
            + self.trunk.num_params()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for c in &self.convs {
            out.extend_from_slice(c.w.data());
            out.extend_from_slice(&c.b);
        }
        self.trunk.params_flat(&mut out);
        out
    }

    pub fn set_params_flat(&mut self, params: &[f64]) {
        assert_eq!(params.len(), self.num_params());
        let mut it = params.iter().cloned();
        for c in &mut self.convs {
            for v in c.w.data_mut() {
                *v = it.next().unwrap();
            }
            for v in c.b.iter_mut() {
                *v = it.next().unwrap();
            }
        }
        self.trunk.set_params_flat(&mut it);
    }

    /// Mean cross-entropy over a prepared batch.
    pub fn batch_loss(&self, seqs: &[Vec<f64>], labels: &[usize]) -> f64 {
        assert_eq!(seqs.len(), labels.len());
        let mut total = 0.0;
        for (seq, &label) in seqs.iter().zip(labels) {
            let cache = self.forward_cached(seq);
            let logits = cache.trunk_cache.inputs.last().unwrap();
            total += softmax_cross_entropy(logits, label).0;
        }
        total / seqs.len() as f64
    }

    /// Mean-gradient over a prepared batch, flattened like
    /// [`TextClassifier::params_flat`].
    pub fn batch_gradient(&self, seqs: &[Vec<f64>], labels: &[usize]) -> Vec<f64> {
        let mut grads = self.zero_grads();
        for (seq, &label) in seqs.iter().zip(labels) {
            let cache = self.forward_cached(seq);
            self.backward(seq, &cache, label, &mut grads);
        }
        let scale = 1.0 / seqs.len() as f64;
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in &grads.convs {
            out.extend(w.data().iter().map(|v| v * scale));
            out.extend(b.iter().map(|v| v * scale));
        }
        let mut trunk_flat = Vec::new();
        DenseStack::grads_flat(&grads.trunk, &mut trunk_flat);
        out.extend(trunk_flat.iter().map(|v| v * scale));
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = dir.join("manifest");
        std::fs::write(
            &manifest,
            format!(
                "kind=textcnn\nwv_dim={}\nseq_len={}\nfilters={}\nhidden={}\nlabels={}\n",
                self.wv_dim,
                self.seq_len,
                self.filters_per_width,
                self.embedding_dim(),
                self.labels.len(),
            ),
        )
        .map_err(|e| Error::io(&manifest, e))?;
        let labels_path = dir.join("labels.txt");
        std::fs::write(&labels_path, self.labels.join("\n") + "\n")
            .map_err(|e| Error::io(&labels_path, e))?;
        for conv in &self.convs {
            write_mat0(&dir.join(format!("conv{}_w.mat", conv.width)), &conv.w)?;
            let bm = Matrix::from_vec(1, conv.b.len(), conv.b.clone());
            write_mat0(&dir.join(format!("conv{}_b.mat", conv.width)), &bm)?;
        }
        self.trunk.save(dir, "trunk")
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = crate::mf::parse_manifest(&dir.join("manifest"))?;
        let get = |key: &str| -> Result<usize> {
            manifest
                .get(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Config(format!("manifest missing {key}")))
        };
        let wv_dim = get("wv_dim")?;
        let seq_len = get("seq_len")?;
        let filters_per_width = get("filters")?;
        let labels_path = dir.join("labels.txt");
        let labels: Vec<String> = std::fs::read_to_string(&labels_path)
            .map_err(|e| Error::io(&labels_path, e))?
            .lines()
            .map(str::to_owned)
            .collect();
        let mut convs = Vec::new();
        for width in FILTER_WIDTHS {
            let w = read_mat0(&dir.join(format!("conv{width}_w.mat")))?;
            let b = read_mat0(&dir.join(format!("conv{width}_b.mat")))?;
            convs.push(ConvLayer {
                width,
                w,
                b: b.data().to_vec(),
            });
        }
        let trunk = DenseStack::load(dir, "trunk", 2)?;
        Ok(TextClassifier {
            wv_dim,
            seq_len,
            filters_per_width,
            labels,
            convs,
            trunk,
        })
    }
}

/// The flat classifier label of an ad.
pub fn ad_label(ad: &Ad) -> String {
    format!("{}/{}", ad.category, ad.subcategory)
}

fn ad_sequence(ad: &Ad, wv: &WordVectors, seq_len: usize) -> Vec<f64> {
    let mut tokens = tokenize(&ad.title);
    tokens.extend(tokenize(&ad.description));
    embed_sequence(&tokens, wv, seq_len)
}

/// Trains the category classifier with mini-batch gradient descent plus
/// momentum over frozen word vectors. Returns the classifier and the mean
/// loss per epoch.
pub fn cnn_fit_traced(
    ads: &[Ad],
    wv: &WordVectors,
    opts: &TextCnnOptions,
) -> Result<(TextClassifier, Vec<f64>)> {
    if opts.step <= 0.0 {
        return Err(Error::Config("step must be positive".into()));
    }
    if opts.epochs < 1 || opts.batch_size < 1 {
        return Err(Error::Config("epochs and batch_size must be >= 1".into()));
    }
    let mut labels: Vec<String> = ads.iter().map(ad_label).collect();
    labels.sort();
    labels.dedup();
    if labels.len() < 2 {
        return Err(Error::InvalidInput(
            "need at least two distinct labels to train a classifier".into(),
        ));
    }
    let mut clf = TextClassifier::new(wv.dim(), labels, opts);
    let examples: Vec<(Vec<f64>, usize)> = ads
        .iter()
        .map(|ad| {
            (
                ad_sequence(ad, wv, opts.seq_len),
                clf.label_index(&ad_label(ad)).unwrap(),
            )
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut conv_momentum: Vec<(Matrix, Vec<f64>)> = clf
        .convs
        .iter()
        .map(|c| (Matrix::zeros(c.w.rows(), c.w.cols()), vec![0.0; c.b.len()]))
        .collect();
    let mut trunk_momentum = StackMomentum::new(&clf.trunk);

    let mut epoch_losses = Vec::with_capacity(opts.epochs);
    for _ in 0..opts.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(opts.batch_size) {
            let mut grads = clf.zero_grads();
            for &i in chunk {
                let (seq, label) = &examples[i];
                let cache = clf.forward_cached(seq);
                total += clf.backward(seq, &cache, *label, &mut grads);
            }
            let scale = 1.0 / chunk.len() as f64;
            for ((conv, (gw, gb)), (mw, mb)) in clf
                .convs
                .iter_mut()
                .zip(&mut grads.convs)
                .zip(&mut conv_momentum)
            {
                for g in gw.data_mut() {
                    *g *= scale;
                }
                for g in gb.iter_mut() {
                    *g *= scale;
                }
                crate::nn::momentum_update(
                    conv.w.data_mut(),
                    gw.data(),
                    mw.data_mut(),
                    opts.step,
                    opts.momentum,
                );
                crate::nn::momentum_update(&mut conv.b, gb, mb, opts.step, opts.momentum);
            }
            for w in grads.trunk.weights.iter_mut() {
                for g in w.data_mut() {
                    *g *= scale;
                }
            }
            for b in grads.trunk.biases.iter_mut() {
                for g in b.iter_mut() {
                    *g *= scale;
                }
            }
            trunk_momentum.apply(&mut clf.trunk, &grads.trunk, opts.step, opts.momentum);
        }
        epoch_losses.push(total / examples.len() as f64);
    }
    if !clf.trunk.is_finite() {
        return Err(Error::Training("classifier diverged".into()));
    }
    Ok((clf, epoch_losses))
}

pub fn cnn_fit(ads: &[Ad], wv: &WordVectors, opts: &TextCnnOptions) -> Result<TextClassifier> {
    cnn_fit_traced(ads, wv, opts).map(|(clf, _)| clf)
}

/// The textual embedding of an ad: the classifier's hidden activation on
/// the title + description sequence. Deterministic; empty text maps to
/// the all-padding activation.
pub fn text_embed(ad: &Ad, clf: &TextClassifier, wv: &WordVectors) -> Vec<f64> {
    clf.hidden_activation(&ad_sequence(ad, wv, clf.seq_len()))
}

/// Loss used by word2vec, exposed for diagnostics: mean negative
/// log-likelihood of one (center, context) pair against sampled negatives.
pub fn sgns_pair_loss(center: &[f64], context: &[f64], negatives: &[&[f64]]) -> f64 {
    let mut loss = -log_sigmoid(dot(center, context));
    for n in negatives {
        loss -= log_sigmoid(-dot(center, n));
    }
    loss
}
