//! Dense linear algebra, activations, SGD and gradient checking shared by
//! the recurrent and convolutional networks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Matrix { rows, cols, data }
    }

    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, range: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.random_range(-range..=range)).collect();
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// `out += x^T · self`, i.e. each row scaled by the matching entry of `x`.
    pub fn add_rows_weighted(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (r, &w) in x.iter().enumerate() {
            if w != 0.0 {
                axpy(w, self.row(r), out);
            }
        }
    }

    /// `out[r] = self.row(r) · x`.
    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            *o = dot(self.row(r), x);
        }
    }

    /// `self.row(r) += scale * a[r] * b` for every `r`.
    pub fn add_outer(&mut self, scale: f64, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (r, &ar) in a.iter().enumerate() {
            if ar != 0.0 {
                axpy(scale * ar, b, self.row_mut(r));
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Word embeddings, one row per vocabulary entry. Shared by all networks.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable(pub Matrix);

impl EmbeddingTable {
    pub fn uniform<R: Rng + ?Sized>(vocab: usize, dim: usize, range: f64, rng: &mut R) -> Self {
        EmbeddingTable(Matrix::uniform(vocab, dim, range, rng))
    }

    pub fn zeros(vocab: usize, dim: usize) -> Self {
        EmbeddingTable(Matrix::zeros(vocab, dim))
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.0.rows()
    }

    pub fn row(&self, token: usize) -> &[f64] {
        self.0.row(token)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out
}

pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

/// `-Σ p ln q`
pub fn cross_entropy(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(pi, _)| **pi > 0.0).map(|(pi, qi)| -pi * qi.ln()).sum()
}

pub fn entropy(p: &[f64]) -> f64 {
    cross_entropy(p, p)
}

/// Binary cross-entropy of a predicted probability against a 0/1 target.
pub fn binary_cross_entropy(p: f64, target: f64) -> f64 {
    let p = p.clamp(1e-300, 1.0 - 1e-16);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// A bundle of parameter tensors that can be flattened for updates and checks.
pub trait Parameters {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    fn assign(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        assert_eq!(offset, flat.len(), "flat parameter length");
    }

    fn zero(&mut self) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Optimizer and stopping settings for one network.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub l2_coeff: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Relative validation improvement below which the rate is halved.
    pub min_improvement: f64,
    pub update_embeddings: bool,
    pub shuffle_seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            learning_rate: 0.1,
            l2_coeff: 1e-7,
            max_epochs: 50,
            patience: 2,
            min_improvement: 0.005,
            update_embeddings: true,
            shuffle_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_cost: f64,
    pub valid_cost: f64,
}

/// Per-epoch costs of one training run. Costs are per predicted unit
/// (token for the language models, example for the CNN).
#[derive(Debug, Clone, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct TrainLog {
    pub initial_valid_cost: f64,
    pub epochs: Vec<EpochStats>,
    /// 0 when no epoch beat the initial parameters.
    pub best_epoch: usize,
    pub best_valid_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("training and validation sets must be nonempty")]
    EmptyData,
    #[error("training diverged in epoch {epoch}; parameters restored to the last finite checkpoint")]
    Diverged { epoch: usize, log: TrainLog },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("non-finite gradient; update aborted")]
pub struct Divergence;

/// Plain SGD with an l2 shrink applied every [`SgdState::L2_PERIOD`] examples.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub learning_rate: f64,
    pub l2_coeff: f64,
    pub example_counter: usize,
}

impl SgdState {
    pub const L2_PERIOD: usize = 10;

    pub fn new(learning_rate: f64, l2_coeff: f64) -> Self {
        SgdState { learning_rate, l2_coeff, example_counter: 0 }
    }
}

/// One per-example update: `p -= lr * g`, then every tenth example
/// `p *= 1 - lr * l2`. Leaves everything untouched on a non-finite gradient.
pub fn sgd_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut SgdState,
) -> Result<(), Divergence> {
    assert_eq!(params.len(), grads.len(), "parameter/gradient count");
    if grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Divergence);
    }
    let lr = state.learning_rate;
    for (p, g) in params.iter_mut().zip(grads) {
        assert_eq!(p.len(), g.len(), "parameter/gradient shape");
        axpy(-lr, g, p);
    }
    state.example_counter += 1;
    if state.example_counter >= SgdState::L2_PERIOD {
        state.example_counter = 0;
        let shrink = 1.0 - lr * state.l2_coeff;
        for p in params.iter_mut() {
            p.iter_mut().for_each(|v| *v *= shrink);
        }
    }
    Ok(())
}

/// Max relative error between `analytic` and central differences of `loss`
/// over the given entries (all entries when `entries` is `None`).
pub fn grad_check<F>(mut loss: F, params: &[f64], analytic: &[f64], eps: f64, entries: Option<&[usize]>) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len());
    let all: Vec<usize>;
    let entries = match entries {
        Some(e) => e,
        None => {
            all = (0..params.len()).collect();
            &all
        }
    };
    let mut work = params.to_vec();
    let mut worst: f64 = 0.0;
    for &i in entries {
        let orig = work[i];
        work[i] = orig + eps;
        let plus = loss(&work);
        work[i] = orig - eps;
        let minus = loss(&work);
        work[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

/// Like [`grad_check`] for a loss that is a sum of terms: the central
/// difference is taken term by term before summing, which keeps the
/// cancellation error proportional to each term rather than to the total.
pub fn grad_check_terms<F>(mut terms: F, params: &[f64], analytic: &[f64], eps: f64, entries: Option<&[usize]>) -> f64
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    assert_eq!(params.len(), analytic.len());
    let entries: Vec<usize> = entries.map_or_else(|| (0..params.len()).collect(), <[usize]>::to_vec);
    let mut work = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in entries {
        let orig = work[i];
        work[i] = orig + eps;
        let plus = terms(&work);
        work[i] = orig - eps;
        let minus = terms(&work);
        work[i] = orig;
        let numeric: f64 = plus.iter().zip(&minus).map(|(a, b)| a - b).sum::<f64>() / (2.0 * eps);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

/// Learning-rate halving plus early stopping on a validation cost.
///
/// The rate halves whenever an epoch improves the validation cost by less
/// than `min_improvement` (relative). Training stops after `patience`
/// consecutive epochs without a new best, or at `max_epochs`.
#[derive(Debug, Clone)]
pub struct Schedule {
    pub learning_rate: f64,
    pub min_improvement: f64,
    pub patience: usize,
    pub max_epochs: usize,
    best: f64,
    last: f64,
    stale: usize,
    epochs: usize,
}

impl Schedule {
    pub fn new(learning_rate: f64, min_improvement: f64, patience: usize, max_epochs: usize, initial_cost: f64) -> Self {
        Schedule {
            learning_rate,
            min_improvement,
            patience,
            max_epochs,
            best: initial_cost,
            last: initial_cost,
            stale: 0,
            epochs: 0,
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn epochs(&self) -> usize {
        self.epochs
    }

    /// Records one epoch's validation cost; true on a new best.
    pub fn record(&mut self, cost: f64) -> bool {
        self.epochs += 1;
        let rel = if self.last.is_finite() && self.last > 0.0 { (self.last - cost) / self.last } else { 1.0 };
        if rel < self.min_improvement {
            self.learning_rate *= 0.5;
        }
        self.last = cost;
        if cost < self.best {
            self.best = cost;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn finished(&self) -> bool {
        self.stale >= self.patience || self.epochs >= self.max_epochs
    }
}

/// Per-example SGD over `train` with early stopping on `valid`.
///
/// `loss_grad` accumulates the gradient of one example into the zeroed
/// buffers and returns its loss; `eval` returns the validation cost per
/// unit. On return the model and embeddings hold the best checkpoint,
/// including after divergence.
#[allow(clippy::too_many_arguments)]
pub fn train_loop<M, G, E>(
    model: &mut M,
    emb: &mut EmbeddingTable,
    grads: &mut G,
    train: &[E],
    valid: &[E],
    cfg: &OptimConfig,
    mut loss_grad: impl FnMut(&M, &EmbeddingTable, &E, &mut G, &mut Matrix) -> f64,
    mut eval: impl FnMut(&M, &EmbeddingTable, &[E]) -> f64,
    units: impl Fn(&E) -> usize,
) -> Result<TrainLog, TrainError>
where
    M: Parameters + Clone,
    G: Parameters,
{
    if train.is_empty() || valid.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let initial = eval(model, emb, valid);
    let mut log = TrainLog {
        initial_valid_cost: initial,
        epochs: Vec::new(),
        best_epoch: 0,
        best_valid_cost: initial,
    };
    let mut best = (model.clone(), emb.clone());
    let mut schedule = Schedule::new(cfg.learning_rate, cfg.min_improvement, cfg.patience, cfg.max_epochs, initial);
    let mut sgd = SgdState::new(cfg.learning_rate, cfg.l2_coeff);
    let mut emb_grad = Matrix::zeros(emb.vocab_size(), emb.dim());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);

    while !schedule.finished() {
        let epoch = schedule.epochs() + 1;
        order.shuffle(&mut rng);
        sgd.learning_rate = schedule.learning_rate;
        let mut total = 0.0;
        let mut count = 0usize;
        let mut diverged = false;
        for &i in &order {
            grads.zero();
            emb_grad.fill(0.0);
            let loss = loss_grad(model, emb, &train[i], grads, &mut emb_grad);
            if !loss.is_finite() {
                diverged = true;
                break;
            }
            let mut params = model.tensors_mut();
            let mut g = grads.tensors();
            if cfg.update_embeddings {
                params.push(emb.0.data_mut());
                g.push(emb_grad.data());
            }
            if sgd_step(&mut params, &g, &mut sgd).is_err() {
                diverged = true;
                break;
            }
            total += loss;
            count += units(&train[i]);
        }
        let valid_cost = if diverged { f64::NAN } else { eval(model, emb, valid) };
        if diverged || !valid_cost.is_finite() || !model.all_finite() {
            *model = best.0;
            *emb = best.1;
            return Err(TrainError::Diverged { epoch, log });
        }
        let lr_used = sgd.learning_rate;
        if schedule.record(valid_cost) {
            best = (model.clone(), emb.clone());
            log.best_epoch = epoch;
            log.best_valid_cost = valid_cost;
        }
        log.epochs.push(EpochStats {
            epoch,
            learning_rate: lr_used,
            train_cost: total / count.max(1) as f64,
            valid_cost,
        });
    }
    *model = best.0;
    *emb = best.1;
    Ok(log)
}
