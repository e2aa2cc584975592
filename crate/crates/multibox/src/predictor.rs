//! A small fully-connected predictor over crop pixels, hand-rolled:
//! forward, exact reverse-mode gradients, Adagrad, mini-batch training,
//! and checkpoint serialization.
//!
//! Localizer topology: D pixels → H1 (rectified linear) → H2 (rectified
//! linear) → a location head emitting K·4 residuals to the prior boxes and
//! a confidence head emitting K logits. The classifier shares the trunk
//! shape and ends in a single softmax head over C shape classes plus a
//! background class.
//!
//! Parameters live in one flat `Vec<f64>` in declared layer order
//! (`w1, b1, w2, b2, heads…`), which keeps Adagrad, checkpointing, and
//! finite-difference checks trivial.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MultiboxError, Result};
use crate::loss::{
    multibox_loss, GroundTruthSet, LossReport, MatchMode, PredictionSet,
};
use crate::priors::PriorSet;

/// Salt separating the batch-shuffling RNG stream from the init stream.
const SHUFFLE_SALT: u64 = 0x9E37_79B9_7F4A_7C15;

// ---------------------------------------------------------------------------
// Dense-layer arithmetic on flat slices.

fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators so the reduction pipelines; order is fixed, so the
    // result is identical on every run.
    let mut s0 = 0.0;
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    let mut s3 = 0.0;
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = 4 * i;
        s0 += a[j] * b[j];
        s1 += a[j + 1] * b[j + 1];
        s2 += a[j + 2] * b[j + 2];
        s3 += a[j + 3] * b[j + 3];
    }
    for j in 4 * chunks..a.len() {
        s0 += a[j] * b[j];
    }
    (s0 + s1) + (s2 + s3)
}

/// out[r] = b[r] + w[r,:]·x for a row-major (rows × cols) matrix.
fn affine(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for (r, o) in out.iter_mut().enumerate() {
        *o = b[r] + dot(&w[r * cols..(r + 1) * cols], x);
    }
}

fn relu_inplace(v: &mut [f64]) {
    for x in v.iter_mut() {
        *x = x.max(0.0);
    }
}

/// Accumulates the gradient of an affine layer: gw += gout ⊗ x, gb += gout,
/// and (optionally) gx += wᵀ·gout.
fn affine_backward(
    w: &[f64],
    x: &[f64],
    gout: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    mut gx: Option<&mut [f64]>,
) {
    let cols = x.len();
    for (r, &g) in gout.iter().enumerate() {
        gb[r] += g;
        let wrow = &w[r * cols..(r + 1) * cols];
        let gwrow = &mut gw[r * cols..(r + 1) * cols];
        if g != 0.0 {
            for c in 0..cols {
                gwrow[c] += g * x[c];
            }
            if let Some(gx) = gx.as_deref_mut() {
                for c in 0..cols {
                    gx[c] += g * wrow[c];
                }
            }
        }
    }
}

/// Zeroes entries of `grad` where the rectified activation was clamped.
fn relu_mask(activation: &[f64], grad: &mut [f64]) {
    for (g, &a) in grad.iter_mut().zip(activation) {
        if a <= 0.0 {
            *g = 0.0;
        }
    }
}

// ---------------------------------------------------------------------------
// Topologies and flat parameter layout.

/// Fixed shape of the localizer network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalizerTopology {
    pub input: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub k: usize,
}

struct Layout {
    w1: Range<usize>,
    b1: Range<usize>,
    w2: Range<usize>,
    b2: Range<usize>,
    heads: Vec<(Range<usize>, Range<usize>)>,
    total: usize,
}

fn build_layout(input: usize, hidden1: usize, hidden2: usize, head_widths: &[usize]) -> Layout {
    let mut at = 0usize;
    let mut span = |len: usize| {
        let r = at..at + len;
        at += len;
        r
    };
    let w1 = span(hidden1 * input);
    let b1 = span(hidden1);
    let w2 = span(hidden2 * hidden1);
    let b2 = span(hidden2);
    let heads = head_widths
        .iter()
        .map(|&w| (span(w * hidden2), span(w)))
        .collect();
    Layout { w1, b1, w2, b2, heads, total: at }
}

impl LocalizerTopology {
    fn layout(&self) -> Layout {
        build_layout(self.input, self.hidden1, self.hidden2, &[self.k * 4, self.k])
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }
}

/// Fixed shape of the crop classifier; `outputs` counts the shape classes
/// plus the background class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassifierTopology {
    pub input: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub outputs: usize,
}

impl ClassifierTopology {
    fn layout(&self) -> Layout {
        build_layout(self.input, self.hidden1, self.hidden2, &[self.outputs])
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }
}

/// Seeded uniform(−a, a) weight init with a = sqrt(6/(fan_in+fan_out));
/// biases start at zero.
fn init_theta(
    layout: &Layout,
    dims: &[(usize, usize)], // (fan_out, fan_in) per weight block, in layout order
    seed: u64,
) -> Vec<f64> {
    let mut theta = vec![0.0f64; layout.total];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut blocks: Vec<&Range<usize>> = vec![&layout.w1, &layout.w2];
    for (w, _) in &layout.heads {
        blocks.push(w);
    }
    assert_eq!(blocks.len(), dims.len());
    for (range, &(fan_out, fan_in)) in blocks.iter().zip(dims) {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for v in &mut theta[(*range).clone()] {
            *v = rng.random_range(-a..a);
        }
    }
    theta
}

/// Localizer parameters: one flat vector plus its topology and init seed.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    topo: LocalizerTopology,
    seed: u64,
    theta: Vec<f64>,
}

impl ModelParams {
    pub fn init(topo: LocalizerTopology, seed: u64) -> Self {
        let layout = topo.layout();
        let dims = [
            (topo.hidden1, topo.input),
            (topo.hidden2, topo.hidden1),
            (topo.k * 4, topo.hidden2),
            (topo.k, topo.hidden2),
        ];
        ModelParams { topo, seed, theta: init_theta(&layout, &dims, seed) }
    }

    pub fn zeros(topo: LocalizerTopology) -> Self {
        ModelParams { topo, seed: 0, theta: vec![0.0; topo.param_count()] }
    }

    pub fn topology(&self) -> LocalizerTopology {
        self.topo
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }
}

/// Classifier parameters; same storage scheme as [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    topo: ClassifierTopology,
    seed: u64,
    theta: Vec<f64>,
}

impl ClassifierParams {
    pub fn init(topo: ClassifierTopology, seed: u64) -> Self {
        let layout = topo.layout();
        let dims = [
            (topo.hidden1, topo.input),
            (topo.hidden2, topo.hidden1),
            (topo.outputs, topo.hidden2),
        ];
        ClassifierParams { topo, seed, theta: init_theta(&layout, &dims, seed) }
    }

    pub fn zeros(topo: ClassifierTopology) -> Self {
        ClassifierParams { topo, seed: 0, theta: vec![0.0; topo.param_count()] }
    }

    pub fn topology(&self) -> ClassifierTopology {
        self.topo
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }
}

// ---------------------------------------------------------------------------
// Forward / backward.

struct TrunkActs {
    h1: Vec<f64>,
    h2: Vec<f64>,
}

fn trunk_forward(theta: &[f64], layout: &Layout, x: &[f64], h1_len: usize, h2_len: usize) -> TrunkActs {
    let mut h1 = vec![0.0; h1_len];
    affine(&theta[layout.w1.clone()], &theta[layout.b1.clone()], x, &mut h1);
    relu_inplace(&mut h1);
    let mut h2 = vec![0.0; h2_len];
    affine(&theta[layout.w2.clone()], &theta[layout.b2.clone()], &h1, &mut h2);
    relu_inplace(&mut h2);
    TrunkActs { h1, h2 }
}

/// Backprop through the shared trunk given dL/dh2 (post-activation).
fn trunk_backward(
    theta: &[f64],
    layout: &Layout,
    x: &[f64],
    acts: &TrunkActs,
    mut dh2: Vec<f64>,
    grad: &mut [f64],
) {
    relu_mask(&acts.h2, &mut dh2);
    let mut dh1 = vec![0.0; acts.h1.len()];
    {
        let (gw2, gb2) = grad_pair(grad, &layout.w2, &layout.b2);
        affine_backward(&theta[layout.w2.clone()], &acts.h1, &dh2, gw2, gb2, Some(&mut dh1));
    }
    relu_mask(&acts.h1, &mut dh1);
    let (gw1, gb1) = grad_pair(grad, &layout.w1, &layout.b1);
    affine_backward(&theta[layout.w1.clone()], x, &dh1, gw1, gb1, None);
}

/// Two disjoint mutable views into the flat gradient vector.
fn grad_pair<'a>(
    grad: &'a mut [f64],
    w: &Range<usize>,
    b: &Range<usize>,
) -> (&'a mut [f64], &'a mut [f64]) {
    debug_assert!(w.end <= b.start);
    let (head, tail) = grad.split_at_mut(b.start);
    (&mut head[w.clone()], &mut tail[..b.len()])
}

fn check_input(expected: usize, pixels: &[f64]) -> Result<()> {
    if pixels.len() != expected {
        return Err(MultiboxError::ShapeMismatch {
            what: "crop pixels",
            expected,
            actual: pixels.len(),
        });
    }
    Ok(())
}

/// Raw head outputs: K·4 location residuals and K confidence logits.
fn localizer_heads(params: &ModelParams, layout: &Layout, acts: &TrunkActs) -> (Vec<f64>, Vec<f64>) {
    let t = &params.topo;
    let mut residuals = vec![0.0; t.k * 4];
    let (w_loc, b_loc) = &layout.heads[0];
    affine(&params.theta[w_loc.clone()], &params.theta[b_loc.clone()], &acts.h2, &mut residuals);
    let mut logits = vec![0.0; t.k];
    let (w_conf, b_conf) = &layout.heads[1];
    affine(&params.theta[w_conf.clone()], &params.theta[b_conf.clone()], &acts.h2, &mut logits);
    (residuals, logits)
}

/// Runs the localizer on one crop. Locations are the priors plus the
/// predicted residuals, kept raw (they may leave the unit square); clipping
/// and ordering repair belong to inference-time decoding, not the loss.
pub fn forward(params: &ModelParams, pixels: &[f64], priors: &PriorSet) -> Result<PredictionSet> {
    let t = &params.topo;
    check_input(t.input, pixels)?;
    if priors.k() != t.k {
        return Err(MultiboxError::ShapeMismatch {
            what: "prior count",
            expected: t.k,
            actual: priors.k(),
        });
    }
    let layout = t.layout();
    let acts = trunk_forward(&params.theta, &layout, pixels, t.hidden1, t.hidden2);
    let (residuals, logits) = localizer_heads(params, &layout, &acts);
    let locations: Vec<[f64; 4]> = priors
        .priors()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let pa = p.to_array();
            std::array::from_fn(|d| pa[d] + residuals[i * 4 + d])
        })
        .collect();
    PredictionSet::from_logits(locations, logits)
}

fn localizer_backward_into(
    params: &ModelParams,
    pixels: &[f64],
    grad_residuals: &[f64],
    grad_logits: &[f64],
    grad: &mut [f64],
) {
    let t = &params.topo;
    let layout = t.layout();
    let acts = trunk_forward(&params.theta, &layout, pixels, t.hidden1, t.hidden2);
    let mut dh2 = vec![0.0; t.hidden2];
    {
        let (w_loc, b_loc) = &layout.heads[0];
        let (gw, gb) = grad_pair(grad, w_loc, b_loc);
        affine_backward(&params.theta[w_loc.clone()], &acts.h2, grad_residuals, gw, gb, Some(&mut dh2));
    }
    {
        let (w_conf, b_conf) = &layout.heads[1];
        let (gw, gb) = grad_pair(grad, w_conf, b_conf);
        affine_backward(&params.theta[w_conf.clone()], &acts.h2, grad_logits, gw, gb, Some(&mut dh2));
    }
    trunk_backward(&params.theta, &layout, pixels, &acts, dh2, grad);
}

/// Exact gradient of `f_total` with respect to every parameter, given the
/// per-slot loss gradients of the matching forward pass. Location
/// gradients pass through unchanged because each location is
/// `prior + residual` with unit Jacobian.
pub fn backward(params: &ModelParams, pixels: &[f64], report: &LossReport) -> Result<Vec<f64>> {
    let t = &params.topo;
    check_input(t.input, pixels)?;
    if report.grad_logits.len() != t.k {
        return Err(MultiboxError::ShapeMismatch {
            what: "loss gradient slots",
            expected: t.k,
            actual: report.grad_logits.len(),
        });
    }
    let mut grad_res = vec![0.0; t.k * 4];
    for (i, gl) in report.grad_locations.iter().enumerate() {
        grad_res[i * 4..i * 4 + 4].copy_from_slice(gl);
    }
    let mut grad = vec![0.0; params.theta.len()];
    localizer_backward_into(params, pixels, &grad_res, &report.grad_logits, &mut grad);
    Ok(grad)
}

// ---------------------------------------------------------------------------
// Adagrad.

/// Per-parameter squared-gradient accumulators.
#[derive(Debug, Clone)]
pub struct AdagradState {
    accum: Vec<f64>,
    pub lr: f64,
    pub epsilon: f64,
}

impl AdagradState {
    pub fn new(param_count: usize, lr: f64) -> Self {
        AdagradState { accum: vec![0.0; param_count], lr, epsilon: 1e-8 }
    }

    pub fn accumulators(&self) -> &[f64] {
        &self.accum
    }
}

/// One Adagrad update: `accum += g²; theta -= lr·g/(sqrt(accum)+eps)`.
pub fn adagrad_step(theta: &mut [f64], state: &mut AdagradState, grads: &[f64]) {
    assert_eq!(theta.len(), grads.len());
    assert_eq!(theta.len(), state.accum.len());
    for i in 0..theta.len() {
        let g = grads[i];
        state.accum[i] += g * g;
        theta[i] -= state.lr * g / (state.accum[i].sqrt() + state.epsilon);
    }
}

// ---------------------------------------------------------------------------
// Training.

/// One localizer training example: flattened resized crop pixels plus the
/// boxes visible in that crop, in crop-local coordinates.
#[derive(Debug, Clone)]
pub struct LocalizerExample {
    pub pixels: Vec<f64>,
    pub gt: GroundTruthSet,
}

/// Localizer training configuration.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub alpha: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub mode: MatchMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.3,
            lr: 0.05,
            batch_size: 128,
            steps: 2000,
            seed: 0,
            mode: MatchMode::PriorMatching,
        }
    }
}

/// One training-log row: batch-mean loss values at a step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub f_total: f64,
    pub f_match: f64,
    pub f_conf: f64,
}

/// Deterministic Fisher–Yates shuffle.
fn shuffle(indices: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..indices.len()).rev() {
        let j = rng.random_range(0..=i);
        indices.swap(i, j);
    }
}

/// Trains the localizer with mini-batch Adagrad on the mean multibox loss.
///
/// Examples are visited in a seeded per-epoch shuffle; gradients are
/// accumulated serially in example order, so the run is bitwise
/// reproducible for a fixed `(dataset, priors, config)`.
pub fn train_localizer(
    dataset: &[LocalizerExample],
    priors: &PriorSet,
    topo: LocalizerTopology,
    config: &TrainConfig,
) -> Result<(ModelParams, Vec<LogRow>)> {
    train_localizer_from(ModelParams::init(topo, config.seed), dataset, priors, config)
}

/// Continues training from existing parameters with a fresh optimizer.
///
/// The Adagrad accumulators restart at zero under `config.lr`, so chaining
/// runs with decreasing rates implements a staged learning-rate schedule;
/// `config.seed` only drives the shuffle order here.
pub fn train_localizer_from(
    start: ModelParams,
    dataset: &[LocalizerExample],
    priors: &PriorSet,
    config: &TrainConfig,
) -> Result<(ModelParams, Vec<LogRow>)> {
    let topo = start.topology();
    if dataset.is_empty() {
        return Err(MultiboxError::InvalidConfig("training dataset is empty".into()));
    }
    if topo.k != priors.k() {
        return Err(MultiboxError::ShapeMismatch {
            what: "prior count",
            expected: topo.k,
            actual: priors.k(),
        });
    }
    if config.batch_size == 0 {
        return Err(MultiboxError::InvalidConfig("batch_size must be >= 1".into()));
    }
    for ex in dataset {
        if ex.gt.len() > topo.k {
            return Err(MultiboxError::InfeasibleMatch {
                predictions: topo.k,
                ground_truth: ex.gt.len(),
            });
        }
        check_input(topo.input, &ex.pixels)?;
    }

    let mut params = start;
    let mut state = AdagradState::new(params.theta.len(), config.lr);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_SALT);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    shuffle(&mut order, &mut shuffle_rng);
    let mut cursor = 0usize;

    let mut grad = vec![0.0f64; params.theta.len()];
    let mut log = Vec::with_capacity(config.steps);
    let layout = topo.layout();
    let prior_arrays: Vec<[f64; 4]> = priors.priors().iter().map(|b| b.to_array()).collect();

    for step in 0..config.steps {
        grad.fill(0.0);
        let mut f_total = 0.0;
        let mut f_match = 0.0;
        let mut f_conf = 0.0;
        let batch_len = config.batch_size.min(dataset.len());
        for _ in 0..batch_len {
            if cursor == order.len() {
                shuffle(&mut order, &mut shuffle_rng);
                cursor = 0;
            }
            let ex = &dataset[order[cursor]];
            cursor += 1;

            let acts = trunk_forward(&params.theta, &layout, &ex.pixels, topo.hidden1, topo.hidden2);
            let (residuals, logits) = localizer_heads(&params, &layout, &acts);
            let locations: Vec<[f64; 4]> = prior_arrays
                .iter()
                .enumerate()
                .map(|(i, pa)| std::array::from_fn(|d| pa[d] + residuals[i * 4 + d]))
                .collect();
            let preds = PredictionSet::from_logits(locations, logits)?;
            let report = multibox_loss(&preds, &ex.gt, config.alpha, config.mode, Some(priors))?;
            f_total += report.f_total;
            f_match += report.f_match;
            f_conf += report.f_conf;

            let mut grad_res = vec![0.0; topo.k * 4];
            for (i, gl) in report.grad_locations.iter().enumerate() {
                grad_res[i * 4..i * 4 + 4].copy_from_slice(gl);
            }
            let mut dh2 = vec![0.0; topo.hidden2];
            {
                let (w_loc, b_loc) = &layout.heads[0];
                let (gw, gb) = grad_pair(&mut grad, w_loc, b_loc);
                affine_backward(&params.theta[w_loc.clone()], &acts.h2, &grad_res, gw, gb, Some(&mut dh2));
            }
            {
                let (w_conf, b_conf) = &layout.heads[1];
                let (gw, gb) = grad_pair(&mut grad, w_conf, b_conf);
                affine_backward(
                    &params.theta[w_conf.clone()],
                    &acts.h2,
                    &report.grad_logits,
                    gw,
                    gb,
                    Some(&mut dh2),
                );
            }
            trunk_backward(&params.theta, &layout, &ex.pixels, &acts, dh2, &mut grad);
        }
        let inv = 1.0 / batch_len as f64;
        for g in grad.iter_mut() {
            *g *= inv;
        }
        adagrad_step(&mut params.theta, &mut state, &grad);
        log.push(LogRow {
            step,
            f_total: f_total * inv,
            f_match: f_match * inv,
            f_conf: f_conf * inv,
        });
    }
    Ok((params, log))
}

/// Mean loss of the current parameters over a dataset (no gradient).
pub fn evaluate_loss(
    params: &ModelParams,
    dataset: &[LocalizerExample],
    priors: &PriorSet,
    alpha: f64,
    mode: MatchMode,
) -> Result<f64> {
    let mut total = 0.0;
    for ex in dataset {
        let preds = forward(params, &ex.pixels, priors)?;
        let report = multibox_loss(&preds, &ex.gt, alpha, mode, Some(priors))?;
        total += report.f_total;
    }
    Ok(total / dataset.len().max(1) as f64)
}

// ---------------------------------------------------------------------------
// Classifier.

/// One labeled classifier crop; `label == num_shape_classes` means
/// background.
#[derive(Debug, Clone)]
pub struct ClassifierExample {
    pub pixels: Vec<f64>,
    pub label: usize,
}

/// Classifier training configuration.
#[derive(Debug, Clone)]
pub struct ClassifierTrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig { lr: 0.05, batch_size: 128, steps: 2000, seed: 0 }
    }
}

/// Softmax probabilities for one crop; sums to 1.
pub fn classify_crop(params: &ClassifierParams, pixels: &[f64]) -> Result<Vec<f64>> {
    let t = &params.topo;
    check_input(t.input, pixels)?;
    let layout = t.layout();
    let acts = trunk_forward(&params.theta, &layout, pixels, t.hidden1, t.hidden2);
    let mut logits = vec![0.0; t.outputs];
    let (w, b) = &layout.heads[0];
    affine(&params.theta[w.clone()], &params.theta[b.clone()], &acts.h2, &mut logits);
    Ok(softmax(&logits))
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

/// Stable `-log softmax(logits)[label]`.
fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

/// Trains the crop classifier with mini-batch Adagrad on mean softmax
/// cross-entropy. Deterministic for a fixed seed.
pub fn train_classifier(
    dataset: &[ClassifierExample],
    topo: ClassifierTopology,
    config: &ClassifierTrainConfig,
) -> Result<(ClassifierParams, Vec<LogRow>)> {
    if dataset.is_empty() {
        return Err(MultiboxError::InvalidConfig("training dataset is empty".into()));
    }
    if config.batch_size == 0 {
        return Err(MultiboxError::InvalidConfig("batch_size must be >= 1".into()));
    }
    for ex in dataset {
        if ex.label >= topo.outputs {
            return Err(MultiboxError::LabelOutOfRange {
                label: ex.label,
                max: topo.outputs - 1,
            });
        }
        check_input(topo.input, &ex.pixels)?;
    }

    let mut params = ClassifierParams::init(topo, config.seed);
    let mut state = AdagradState::new(params.theta.len(), config.lr);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_SALT);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    shuffle(&mut order, &mut shuffle_rng);
    let mut cursor = 0usize;

    let layout = topo.layout();
    let mut grad = vec![0.0f64; params.theta.len()];
    let mut log = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        grad.fill(0.0);
        let mut loss_sum = 0.0;
        let batch_len = config.batch_size.min(dataset.len());
        for _ in 0..batch_len {
            if cursor == order.len() {
                shuffle(&mut order, &mut shuffle_rng);
                cursor = 0;
            }
            let ex = &dataset[order[cursor]];
            cursor += 1;

            let acts = trunk_forward(&params.theta, &layout, &ex.pixels, topo.hidden1, topo.hidden2);
            let mut logits = vec![0.0; topo.outputs];
            let (w, b) = &layout.heads[0];
            affine(&params.theta[w.clone()], &params.theta[b.clone()], &acts.h2, &mut logits);
            loss_sum += cross_entropy(&logits, ex.label);

            // dCE/dlogits = softmax - onehot.
            let mut dz = softmax(&logits);
            dz[ex.label] -= 1.0;
            let mut dh2 = vec![0.0; topo.hidden2];
            {
                let (gw, gb) = grad_pair(&mut grad, w, b);
                affine_backward(&params.theta[w.clone()], &acts.h2, &dz, gw, gb, Some(&mut dh2));
            }
            trunk_backward(&params.theta, &layout, &ex.pixels, &acts, dh2, &mut grad);
        }
        let inv = 1.0 / batch_len as f64;
        for g in grad.iter_mut() {
            *g *= inv;
        }
        adagrad_step(&mut params.theta, &mut state, &grad);
        log.push(LogRow { step, f_total: loss_sum * inv, f_match: 0.0, f_conf: loss_sum * inv });
    }
    Ok((params, log))
}

// ---------------------------------------------------------------------------
// Checkpoints and training-log CSV.

const CKPT_MAGIC: &str = "multibox-ckpt v1";

fn write_theta(w: &mut impl Write, theta: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(theta.len() * 8);
    for v in theta {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&bytes)?;
    Ok(())
}

fn read_theta(r: &mut impl Read, count: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; count * 8];
    r.read_exact(&mut bytes).map_err(|e| MultiboxError::Format {
        what: "checkpoint",
        detail: format!("short parameter block: {e}"),
    })?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn read_header_line(r: &mut impl Read) -> Result<String> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        let n = r.read(&mut byte)?;
        if n == 0 || byte[0] == b'\n' {
            break;
        }
        line.push(byte[0]);
        if line.len() > 4096 {
            return Err(MultiboxError::Format {
                what: "checkpoint",
                detail: "unterminated header".into(),
            });
        }
    }
    String::from_utf8(line).map_err(|_| MultiboxError::Format {
        what: "checkpoint",
        detail: "header is not utf-8".into(),
    })
}

fn header_fields(header: &str, kind: &str) -> Result<std::collections::HashMap<String, u64>> {
    let rest = header.strip_prefix(CKPT_MAGIC).ok_or_else(|| MultiboxError::Format {
        what: "checkpoint",
        detail: format!("bad magic: {header:?}"),
    })?;
    let mut map = std::collections::HashMap::new();
    let mut saw_kind = false;
    for tok in rest.split_whitespace() {
        if let Some(v) = tok.strip_prefix("kind=") {
            if v != kind {
                return Err(MultiboxError::Format {
                    what: "checkpoint",
                    detail: format!("expected kind={kind}, found kind={v}"),
                });
            }
            saw_kind = true;
        } else if let Some((key, v)) = tok.split_once('=') {
            let parsed = v.parse().map_err(|_| MultiboxError::Format {
                what: "checkpoint",
                detail: format!("bad field {tok:?}"),
            })?;
            map.insert(key.to_string(), parsed);
        }
    }
    if !saw_kind {
        return Err(MultiboxError::Format {
            what: "checkpoint",
            detail: format!("missing kind={kind}"),
        });
    }
    Ok(map)
}

fn field(map: &std::collections::HashMap<String, u64>, key: &str) -> Result<u64> {
    map.get(key).copied().ok_or_else(|| MultiboxError::Format {
        what: "checkpoint",
        detail: format!("missing {key}="),
    })
}

/// Writes `multibox-ckpt v1 kind=localizer …` followed by the parameters as
/// little-endian 64-bit floats in layout order.
pub fn write_localizer_checkpoint(w: &mut impl Write, params: &ModelParams) -> Result<()> {
    let t = &params.topo;
    writeln!(
        w,
        "{CKPT_MAGIC} kind=localizer input={} hidden1={} hidden2={} k={} seed={}",
        t.input, t.hidden1, t.hidden2, t.k, params.seed
    )?;
    write_theta(w, &params.theta)
}

pub fn read_localizer_checkpoint(r: &mut impl Read) -> Result<ModelParams> {
    let header = read_header_line(r)?;
    let map = header_fields(&header, "localizer")?;
    let topo = LocalizerTopology {
        input: field(&map, "input")? as usize,
        hidden1: field(&map, "hidden1")? as usize,
        hidden2: field(&map, "hidden2")? as usize,
        k: field(&map, "k")? as usize,
    };
    let seed = field(&map, "seed")?;
    let theta = read_theta(r, topo.param_count())?;
    Ok(ModelParams { topo, seed, theta })
}

pub fn save_localizer_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_localizer_checkpoint(&mut w, params)?;
    w.flush()?;
    Ok(())
}

pub fn load_localizer_checkpoint(path: &Path) -> Result<ModelParams> {
    let mut r = BufReader::new(File::open(path)?);
    read_localizer_checkpoint(&mut r)
}

/// Classifier checkpoint; `classes=` stores the output count including the
/// background class.
pub fn write_classifier_checkpoint(w: &mut impl Write, params: &ClassifierParams) -> Result<()> {
    let t = &params.topo;
    writeln!(
        w,
        "{CKPT_MAGIC} kind=classifier input={} hidden1={} hidden2={} classes={} seed={}",
        t.input, t.hidden1, t.hidden2, t.outputs, params.seed
    )?;
    write_theta(w, &params.theta)
}

pub fn read_classifier_checkpoint(r: &mut impl Read) -> Result<ClassifierParams> {
    let header = read_header_line(r)?;
    let map = header_fields(&header, "classifier")?;
    let topo = ClassifierTopology {
        input: field(&map, "input")? as usize,
        hidden1: field(&map, "hidden1")? as usize,
        hidden2: field(&map, "hidden2")? as usize,
        outputs: field(&map, "classes")? as usize,
    };
    let seed = field(&map, "seed")?;
    let theta = read_theta(r, topo.param_count())?;
    Ok(ClassifierParams { topo, seed, theta })
}

pub fn save_classifier_checkpoint(path: &Path, params: &ClassifierParams) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_classifier_checkpoint(&mut w, params)?;
    w.flush()?;
    Ok(())
}

pub fn load_classifier_checkpoint(path: &Path) -> Result<ClassifierParams> {
    let mut r = BufReader::new(File::open(path)?);
    read_classifier_checkpoint(&mut r)
}

/// Training log as CSV: `step,f_total,f_match,f_conf`.
pub fn write_training_log(w: &mut impl Write, log: &[LogRow]) -> Result<()> {
    writeln!(w, "step,f_total,f_match,f_conf")?;
    for row in log {
        writeln!(w, "{},{},{},{}", row.step, row.f_total, row.f_match, row.f_conf)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::NormBox;
    use crate::gradcheck::{central_diff_sparse, max_rel_error, rel_error};
    use crate::loss::solve_assignment;

    fn tiny_topo() -> LocalizerTopology {
        LocalizerTopology { input: 8, hidden1: 6, hidden2: 5, k: 3 }
    }

    fn tiny_priors() -> PriorSet {
        PriorSet::from_boxes_unsorted(
            vec![
                NormBox::new(0.1, 0.1, 0.4, 0.4),
                NormBox::new(0.3, 0.3, 0.7, 0.7),
                NormBox::new(0.6, 0.6, 0.9, 0.9),
            ],
            0,
        )
    }

    fn tiny_pixels(seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..8).map(|_| rng.random_range(0.0..1.0)).collect()
    }

    #[test]
    fn zero_network_outputs_priors_at_half_confidence() {
        let params = ModelParams::zeros(tiny_topo());
        let priors = tiny_priors();
        let preds = forward(&params, &tiny_pixels(1), &priors).unwrap();
        for (loc, p) in preds.locations().iter().zip(priors.priors()) {
            assert_eq!(*loc, p.to_array());
        }
        for &c in preds.confidences() {
            assert_eq!(c, 0.5);
        }
    }

    #[test]
    fn init_is_deterministic_and_finite() {
        let a = ModelParams::init(tiny_topo(), 99);
        let b = ModelParams::init(tiny_topo(), 99);
        assert_eq!(a.theta(), b.theta());
        assert!(a.theta().iter().all(|v| v.is_finite()));
        let c = ModelParams::init(tiny_topo(), 100);
        assert_ne!(a.theta(), c.theta());
        // Biases start at zero: check one bias block.
        let layout = tiny_topo().layout();
        assert!(a.theta()[layout.b1].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let topo = tiny_topo();
        let priors = tiny_priors();
        let params = ModelParams::init(topo, 7);
        let pixels = tiny_pixels(2);
        let gt = GroundTruthSet::new(vec![
            NormBox::new(0.15, 0.15, 0.45, 0.45),
            NormBox::new(0.55, 0.6, 0.85, 0.95),
        ]);
        let alpha = 0.3;

        let preds = forward(&params, &pixels, &priors).unwrap();
        let assignment = solve_assignment(&preds, &gt, alpha).unwrap();
        let report =
            crate::loss::loss_and_grad(&preds, &gt, alpha, &assignment).unwrap();
        let analytic = backward(&params, &pixels, &report).unwrap();

        // Loss as a function of theta with the assignment held fixed.
        let f = |theta: &[f64]| {
            let mut p = params.clone();
            p.theta_mut().copy_from_slice(theta);
            let preds = forward(&p, &pixels, &priors).unwrap();
            crate::loss::loss_and_grad(&preds, &gt, alpha, &assignment)
                .unwrap()
                .f_total
        };
        // Full check is affordable at this size.
        let coords: Vec<usize> = (0..params.theta().len()).collect();
        let numeric = central_diff_sparse(f, params.theta(), 1e-5, &coords);
        assert!(max_rel_error(&analytic, &numeric) < 1e-4);
    }

    #[test]
    fn conf_bias_gradient_equals_grad_logits() {
        let topo = tiny_topo();
        let priors = tiny_priors();
        let params = ModelParams::init(topo, 3);
        let pixels = tiny_pixels(4);
        let gt = GroundTruthSet::new(vec![NormBox::new(0.2, 0.2, 0.5, 0.5)]);
        let preds = forward(&params, &pixels, &priors).unwrap();
        let report =
            crate::loss::multibox_loss(&preds, &gt, 0.3, MatchMode::Direct, None).unwrap();
        let grad = backward(&params, &pixels, &report).unwrap();
        let layout = topo.layout();
        let (_, b_conf) = &layout.heads[1];
        for (i, gi) in grad[b_conf.clone()].iter().enumerate() {
            assert!((gi - report.grad_logits[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let topo = tiny_topo();
        let params = ModelParams::init(topo, 5);
        let pixels = tiny_pixels(6);
        let report = LossReport {
            f_total: 0.0,
            f_match: 0.0,
            f_conf: 0.0,
            grad_locations: vec![[0.0; 4]; topo.k],
            grad_logits: vec![0.0; topo.k],
            assignment: crate::loss::Assignment::empty(topo.k),
        };
        let grad = backward(&params, &pixels, &report).unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn adagrad_examples() {
        let mut theta = vec![1.0, -2.0];
        let mut state = AdagradState::new(2, 0.1);

        adagrad_step(&mut theta, &mut state, &[0.0, 0.0]);
        assert_eq!(theta, vec![1.0, -2.0]);
        assert_eq!(state.accumulators(), &[0.0, 0.0]);

        // First nonzero step: update ≈ -lr·sign(g).
        adagrad_step(&mut theta, &mut state, &[0.5, -0.25]);
        assert!(rel_error(theta[0], 1.0 - 0.1) < 1e-6);
        assert!(rel_error(theta[1], -2.0 + 0.1) < 1e-6);

        // Second identical step: accumulator = 2g², magnitude ≈ lr/√2.
        let before = theta[0];
        adagrad_step(&mut theta, &mut state, &[0.5, -0.25]);
        assert!(rel_error(before - theta[0], 0.1 / 2.0f64.sqrt()) < 1e-6);

        // Accumulators never decrease.
        let acc_before = state.accumulators().to_vec();
        adagrad_step(&mut theta, &mut state, &[0.1, 0.0]);
        for (a, b) in acc_before.iter().zip(state.accumulators()) {
            assert!(b >= a);
        }
    }

    fn toy_localizer_dataset() -> (Vec<LocalizerExample>, PriorSet) {
        // Two pixel patterns, each always paired with the same box; the
        // network can drive the loss down by memorizing the mapping.
        let mut data = Vec::new();
        for rep in 0..16 {
            let mut a = vec![0.0; 8];
            a[rep % 4] = 1.0;
            data.push(LocalizerExample {
                pixels: a,
                gt: GroundTruthSet::new(vec![NormBox::new(0.1, 0.1, 0.35, 0.35)]),
            });
            let mut b = vec![0.0; 8];
            b[4 + rep % 4] = 1.0;
            data.push(LocalizerExample {
                pixels: b,
                gt: GroundTruthSet::new(vec![NormBox::new(0.62, 0.58, 0.93, 0.91)]),
            });
        }
        (data, tiny_priors())
    }

    #[test]
    fn training_reduces_loss_and_reproduces_bitwise() {
        let (data, priors) = toy_localizer_dataset();
        let config = TrainConfig {
            alpha: 0.3,
            lr: 0.05,
            batch_size: 8,
            steps: 300,
            seed: 11,
            mode: MatchMode::PriorMatching,
        };
        let topo = tiny_topo();
        let init_loss =
            evaluate_loss(&ModelParams::init(topo, 11), &data, &priors, 0.3, config.mode).unwrap();
        let (params, log) = train_localizer(&data, &priors, topo, &config).unwrap();
        let trained_loss = evaluate_loss(&params, &data, &priors, 0.3, config.mode).unwrap();
        assert!(
            trained_loss < init_loss,
            "loss did not improve: {init_loss} -> {trained_loss}"
        );

        let (params2, log2) = train_localizer(&data, &priors, topo, &config).unwrap();
        assert_eq!(params.theta(), params2.theta());
        for (a, b) in log.iter().zip(&log2) {
            assert_eq!(a.f_total.to_bits(), b.f_total.to_bits());
        }
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let (data, priors) = toy_localizer_dataset();
        let config = TrainConfig { steps: 0, seed: 42, ..TrainConfig::default() };
        let (params, log) = train_localizer(&data, &priors, tiny_topo(), &config).unwrap();
        assert!(log.is_empty());
        assert_eq!(params.theta(), ModelParams::init(tiny_topo(), 42).theta());
    }

    #[test]
    fn training_rejects_oversized_ground_truth() {
        let gt = GroundTruthSet::new(vec![
            NormBox::new(0.0, 0.0, 0.2, 0.2),
            NormBox::new(0.3, 0.3, 0.5, 0.5),
            NormBox::new(0.6, 0.6, 0.8, 0.8),
            NormBox::new(0.1, 0.6, 0.3, 0.8),
        ]);
        let data = vec![LocalizerExample { pixels: vec![0.0; 8], gt }];
        let err = train_localizer(&data, &tiny_priors(), tiny_topo(), &TrainConfig::default());
        assert!(matches!(err, Err(MultiboxError::InfeasibleMatch { .. })));
    }

    #[test]
    fn classifier_uniform_init_cross_entropy() {
        // Zero parameters give uniform logits, so CE = ln(outputs).
        let topo = ClassifierTopology { input: 4, hidden1: 3, hidden2: 3, outputs: 4 };
        let params = ClassifierParams {
            topo,
            seed: 0,
            theta: vec![0.0; topo.param_count()],
        };
        let probs = classify_crop(&params, &[0.2, 0.4, 0.1, 0.9]).unwrap();
        assert!(probs.iter().all(|&p| (p - 0.25).abs() < 1e-12));
        let ce = cross_entropy(&vec![0.0; 4], 2);
        assert!((ce - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn classifier_learns_separable_toy_data() {
        let topo = ClassifierTopology { input: 4, hidden1: 8, hidden2: 6, outputs: 3 };
        let mut data = Vec::new();
        for rep in 0..10 {
            for label in 0..3usize {
                let mut pixels = vec![0.05 * (rep as f64 % 3.0); 4];
                pixels[label] = 1.0;
                data.push(ClassifierExample { pixels, label });
            }
        }
        let config = ClassifierTrainConfig { lr: 0.05, batch_size: 10, steps: 500, seed: 5 };
        let (params, log) = train_classifier(&data, topo, &config).unwrap();
        assert!(log.last().unwrap().f_total < log.first().unwrap().f_total);
        let correct = data
            .iter()
            .filter(|ex| {
                let probs = classify_crop(&params, &ex.pixels).unwrap();
                let argmax = probs
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .unwrap()
                    .0;
                argmax == ex.label
            })
            .count();
        assert_eq!(correct, data.len());

        // Probabilities normalize.
        let probs = classify_crop(&params, &data[0].pixels).unwrap();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn classifier_rejects_out_of_range_labels() {
        let topo = ClassifierTopology { input: 2, hidden1: 2, hidden2: 2, outputs: 3 };
        let data = vec![ClassifierExample { pixels: vec![0.0, 0.0], label: 3 }];
        assert!(matches!(
            train_classifier(&data, topo, &ClassifierTrainConfig::default()),
            Err(MultiboxError::LabelOutOfRange { label: 3, max: 2 })
        ));
    }

    #[test]
    fn classifier_gradient_matches_finite_differences() {
        let topo = ClassifierTopology { input: 5, hidden1: 4, hidden2: 4, outputs: 3 };
        let params = ClassifierParams::init(topo, 13);
        let pixels = vec![0.3, -0.2, 0.8, 0.1, 0.5];
        let label = 1usize;
        let layout = topo.layout();

        let f = |theta: &[f64]| {
            let p = ClassifierParams { topo, seed: 13, theta: theta.to_vec() };
            let acts = trunk_forward(&p.theta, &layout, &pixels, topo.hidden1, topo.hidden2);
            let mut logits = vec![0.0; topo.outputs];
            let (w, b) = &layout.heads[0];
            affine(&p.theta[w.clone()], &p.theta[b.clone()], &acts.h2, &mut logits);
            cross_entropy(&logits, label)
        };

        let mut grad = vec![0.0; params.theta.len()];
        {
            let acts = trunk_forward(&params.theta, &layout, &pixels, topo.hidden1, topo.hidden2);
            let mut logits = vec![0.0; topo.outputs];
            let (w, b) = &layout.heads[0];
            affine(&params.theta[w.clone()], &params.theta[b.clone()], &acts.h2, &mut logits);
            let mut dz = softmax(&logits);
            dz[label] -= 1.0;
            let mut dh2 = vec![0.0; topo.hidden2];
            {
                let (gw, gb) = grad_pair(&mut grad, w, b);
                affine_backward(&params.theta[w.clone()], &acts.h2, &dz, gw, gb, Some(&mut dh2));
            }
            trunk_backward(&params.theta, &layout, &pixels, &acts, dh2, &mut grad);
        }
        let coords: Vec<usize> = (0..params.theta.len()).collect();
        let numeric = central_diff_sparse(f, &params.theta, 1e-5, &coords);
        assert!(max_rel_error(&grad, &numeric) < 1e-4);
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let params = ModelParams::init(tiny_topo(), 2024);
        let mut buf = Vec::new();
        write_localizer_checkpoint(&mut buf, &params).unwrap();
        let loaded = read_localizer_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(loaded.topology(), params.topology());
        assert_eq!(loaded.seed(), 2024);
        for (a, b) in params.theta().iter().zip(loaded.theta()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }

        let ctopo = ClassifierTopology { input: 6, hidden1: 4, hidden2: 3, outputs: 4 };
        let cparams = ClassifierParams::init(ctopo, 7);
        let mut cbuf = Vec::new();
        write_classifier_checkpoint(&mut cbuf, &cparams).unwrap();
        let cloaded = read_classifier_checkpoint(&mut cbuf.as_slice()).unwrap();
        assert_eq!(cloaded.topology(), ctopo);
        assert_eq!(cloaded.theta(), cparams.theta());

        // Kind mismatch is rejected.
        assert!(read_localizer_checkpoint(&mut cbuf.as_slice()).is_err());
    }

    #[test]
    fn training_log_csv_shape() {
        let log = vec![
            LogRow { step: 0, f_total: 1.5, f_match: 0.25, f_conf: 1.425 },
            LogRow { step: 1, f_total: 1.25, f_match: 0.2, f_conf: 1.19 },
        ];
        let mut buf = Vec::new();
        write_training_log(&mut buf, &log).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("step,f_total,f_match,f_conf"));
        assert_eq!(lines.next(), Some("0,1.5,0.25,1.425"));
        assert_eq!(lines.next(), Some("1,1.25,0.2,1.19"));
    }
}
