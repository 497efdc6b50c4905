//! Convolutional sentence model used to score semantic consistency.
//!
//! Each filter is a short weight vector slid down every embedding column of
//! the utterance matrix; the valid responses are averaged over time, the K
//! pooled vectors are concatenated and squashed with tanh, and a single
//! sigmoid hidden layer feeds an act-type softmax and one sigmoid per
//! slot-category bit.

use rand::Rng;
use thiserror::Error;

use crate::delex::TokenId;
use crate::generator::SeqExample;
use crate::neural::{
    binary_cross_entropy, dot, sigmoid, softmax_in_place, train_loop, EmbeddingTable, Matrix, OptimConfig,
    Parameters, TrainError, TrainLog,
};
use crate::ontology::ControlVector;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CnnError {
    #[error("token id {0} is outside the vocabulary")]
    TokenOutOfRange(TokenId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel {
    /// One weight vector per filter; its length is the filter width.
    pub filters: Vec<Vec<f64>>,
    /// Pooled features (K·h) to hidden, input-major.
    pub w_hidden: Matrix,
    pub b_hidden: Vec<f64>,
    /// Hidden to act logits, one row per act.
    pub w_act: Matrix,
    pub b_act: Vec<f64>,
    /// Hidden to slot-bit logits, one row per bit.
    pub w_slot: Matrix,
    pub b_slot: Vec<f64>,
}

impl Parameters for CnnModel {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut t: Vec<&[f64]> = self.filters.iter().map(|f| &f[..]).collect();
        t.extend([
            self.w_hidden.data(),
            &self.b_hidden[..],
            self.w_act.data(),
            &self.b_act[..],
            self.w_slot.data(),
            &self.b_slot[..],
        ]);
        t
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut t: Vec<&mut [f64]> = self.filters.iter_mut().map(|f| &mut f[..]).collect();
        t.push(self.w_hidden.data_mut());
        t.push(&mut self.b_hidden[..]);
        t.push(self.w_act.data_mut());
        t.push(&mut self.b_act[..]);
        t.push(self.w_slot.data_mut());
        t.push(&mut self.b_slot[..]);
        t
    }
}

#[derive(Debug, Clone)]
pub struct CnnGrads(pub CnnModel);

impl Parameters for CnnGrads {
    fn tensors(&self) -> Vec<&[f64]> {
        self.0.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.0.tensors_mut()
    }
}

/// Act distribution and per-bit slot probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct CnnPrediction {
    pub act: Vec<f64>,
    pub slots: Vec<f64>,
}

/// Stacks embedding rows, one per token.
pub fn build_utterance_matrix(emb: &EmbeddingTable, tokens: &[TokenId]) -> Result<Matrix, CnnError> {
    let h = emb.dim();
    let mut data = Vec::with_capacity(tokens.len() * h);
    for &t in tokens {
        if t >= emb.vocab_size() {
            return Err(CnnError::TokenOutOfRange(t));
        }
        data.extend_from_slice(emb.row(t));
    }
    Ok(Matrix::from_vec(tokens.len(), h, data))
}

/// Sum of rows `start..start+len` of `u`, where rows before `pad` are
/// implicit zeros.
fn window_sum(u: &Matrix, pad: usize, start: usize, len: usize, out: &mut [f64]) {
    out.fill(0.0);
    let lo = start.max(pad);
    for r in lo..start + len {
        for (o, v) in out.iter_mut().zip(u.row(r - pad)) {
            *o += v;
        }
    }
}

struct Forward {
    /// Per filter and tap: column sums of the rows that tap sees, divided
    /// by the number of valid positions.
    taps: Vec<Vec<Vec<f64>>>,
    pooled: Vec<f64>,
    hidden: Vec<f64>,
    act: Vec<f64>,
    slots: Vec<f64>,
    pad: usize,
}

impl CnnModel {
    pub fn zeros(widths: &[usize], embed: usize, hidden: usize, acts: usize, slot_bits: usize) -> Self {
        assert!(!widths.is_empty() && widths.iter().all(|&w| w >= 1), "filter widths must be positive");
        CnnModel {
            filters: widths.iter().map(|&w| vec![0.0; w]).collect(),
            w_hidden: Matrix::zeros(widths.len() * embed, hidden),
            b_hidden: vec![0.0; hidden],
            w_act: Matrix::zeros(acts, hidden),
            b_act: vec![0.0; acts],
            w_slot: Matrix::zeros(slot_bits, hidden),
            b_slot: vec![0.0; slot_bits],
        }
    }

    /// Weights uniform in `±range`; biases start at zero.
    #[allow(clippy::too_many_arguments)]
    pub fn uniform<R: Rng + ?Sized>(
        widths: &[usize],
        embed: usize,
        hidden: usize,
        acts: usize,
        slot_bits: usize,
        range: f64,
        rng: &mut R,
    ) -> Self {
        let mut m = Self::zeros(widths, embed, hidden, acts, slot_bits);
        for f in &mut m.filters {
            for v in f.iter_mut() {
                *v = rng.random_range(-range..=range);
            }
        }
        m.w_hidden = Matrix::uniform(widths.len() * embed, hidden, range, rng);
        m.w_act = Matrix::uniform(acts, hidden, range, rng);
        m.w_slot = Matrix::uniform(slot_bits, hidden, range, rng);
        m
    }

    pub fn widths(&self) -> Vec<usize> {
        self.filters.iter().map(Vec::len).collect()
    }

    pub fn max_width(&self) -> usize {
        self.filters.iter().map(Vec::len).max().unwrap_or(1)
    }

    pub fn embed_size(&self) -> usize {
        self.w_hidden.rows() / self.filters.len()
    }

    pub fn hidden_size(&self) -> usize {
        self.b_hidden.len()
    }

    pub fn num_acts(&self) -> usize {
        self.b_act.len()
    }

    pub fn num_slot_bits(&self) -> usize {
        self.b_slot.len()
    }

    /// Pooled, tanh-squashed convolution features (K·h entries).
    pub fn convolve_pool(&self, u: &Matrix) -> Vec<f64> {
        self.features(u).1
    }

    fn features(&self, u: &Matrix) -> (Vec<Vec<Vec<f64>>>, Vec<f64>, usize) {
        let h = u.cols();
        let n = u.rows().max(self.max_width());
        let pad = n - u.rows();
        let mut taps = Vec::with_capacity(self.filters.len());
        let mut pooled = Vec::with_capacity(self.filters.len() * h);
        for f in &self.filters {
            let m = f.len();
            let count = n - m + 1;
            let mut ftaps = Vec::with_capacity(m);
            let mut s = vec![0.0; h];
            for (r, &w) in f.iter().enumerate() {
                let mut col = vec![0.0; h];
                window_sum(u, pad, r, count, &mut col);
                for c in col.iter_mut() {
                    *c /= count as f64;
                }
                for (sj, cj) in s.iter_mut().zip(&col) {
                    *sj += w * cj;
                }
                ftaps.push(col);
            }
            pooled.extend(s.iter().map(|v| v.tanh()));
            taps.push(ftaps);
        }
        (taps, pooled, pad)
    }

    fn forward(&self, u: &Matrix) -> Forward {
        let (taps, pooled, pad) = self.features(u);
        let mut hidden = self.b_hidden.clone();
        self.w_hidden.add_rows_weighted(&pooled, &mut hidden);
        for v in hidden.iter_mut() {
            *v = sigmoid(*v);
        }
        let mut act = vec![0.0; self.num_acts()];
        self.w_act.matvec(&hidden, &mut act);
        for (a, b) in act.iter_mut().zip(&self.b_act) {
            *a += b;
        }
        softmax_in_place(&mut act);
        let mut slots = vec![0.0; self.num_slot_bits()];
        self.w_slot.matvec(&hidden, &mut slots);
        for (s, b) in slots.iter_mut().zip(&self.b_slot) {
            *s = sigmoid(*s + b);
        }
        Forward { taps, pooled, hidden, act, slots, pad }
    }

    pub fn predict(&self, emb: &EmbeddingTable, tokens: &[TokenId]) -> Result<CnnPrediction, CnnError> {
        let u = build_utterance_matrix(emb, tokens)?;
        let f = self.forward(&u);
        Ok(CnnPrediction { act: f.act, slots: f.slots })
    }

    /// `(1 - p_act[required]) + Σ_b |p_b - y_b|` against the ungated
    /// control vector of the required act.
    pub fn cost(&self, emb: &EmbeddingTable, tokens: &[TokenId], cv: &ControlVector) -> Result<f64, CnnError> {
        let p = self.predict(emb, tokens)?;
        Ok(hamming_cost(&p, cv))
    }

    /// Act cross-entropy plus per-bit binary cross-entropy.
    pub fn loss(&self, emb: &EmbeddingTable, tokens: &[TokenId], cv: &ControlVector) -> Result<f64, CnnError> {
        let p = self.predict(emb, tokens)?;
        Ok(classification_loss(&p, cv))
    }

    /// The individual loss terms: act cross-entropy, then one binary
    /// cross-entropy per slot bit.
    pub fn loss_terms(&self, emb: &EmbeddingTable, tokens: &[TokenId], cv: &ControlVector) -> Result<Vec<f64>, CnnError> {
        let p = self.predict(emb, tokens)?;
        let targets = &cv.as_slice()[cv.num_acts()..];
        let mut terms = vec![-p.act[cv.act_index()].ln()];
        terms.extend(p.slots.iter().zip(targets).map(|(&p, &y)| binary_cross_entropy(p, y)));
        Ok(terms)
    }

    /// Accumulates gradients into `grads` / `emb_grad`; returns the loss.
    pub fn loss_and_grad(
        &self,
        emb: &EmbeddingTable,
        tokens: &[TokenId],
        cv: &ControlVector,
        grads: &mut CnnGrads,
        emb_grad: &mut Matrix,
    ) -> f64 {
        let u = build_utterance_matrix(emb, tokens).expect("tokens checked by caller");
        let f = self.forward(&u);
        let target_act = cv.act_index();
        let targets = &cv.as_slice()[cv.num_acts()..];
        let g = &mut grads.0;

        let mut d_act = f.act.clone();
        d_act[target_act] -= 1.0;
        let d_slot: Vec<f64> = f.slots.iter().zip(targets).map(|(p, y)| p - y).collect();
        let loss = classification_loss(&CnnPrediction { act: f.act.clone(), slots: f.slots.clone() }, cv);

        g.w_act.add_outer(1.0, &d_act, &f.hidden);
        g.w_slot.add_outer(1.0, &d_slot, &f.hidden);
        for (b, d) in g.b_act.iter_mut().zip(&d_act) {
            *b += d;
        }
        for (b, d) in g.b_slot.iter_mut().zip(&d_slot) {
            *b += d;
        }

        let mut dh = vec![0.0; self.hidden_size()];
        self.w_act.add_rows_weighted(&d_act, &mut dh);
        self.w_slot.add_rows_weighted(&d_slot, &mut dh);
        for (d, h) in dh.iter_mut().zip(&f.hidden) {
            *d *= h * (1.0 - h);
        }
        g.w_hidden.add_outer(1.0, &f.pooled, &dh);
        for (b, d) in g.b_hidden.iter_mut().zip(&dh) {
            *b += d;
        }

        let h = u.cols();
        let n = u.rows() + f.pad;
        let mut dpool = vec![0.0; f.pooled.len()];
        self.w_hidden.matvec(&dh, &mut dpool);
        for (d, z) in dpool.iter_mut().zip(&f.pooled) {
            *d *= 1.0 - z * z;
        }
        let mut du = Matrix::zeros(u.rows(), h);
        for (k, filt) in self.filters.iter().enumerate() {
            let ds = &dpool[k * h..(k + 1) * h];
            let count = n - filt.len() + 1;
            for (r, &w) in filt.iter().enumerate() {
                g.filters[k][r] += dot(ds, &f.taps[k][r]);
                let scale = w / count as f64;
                for row in r.max(f.pad)..r + count {
                    for (x, d) in du.row_mut(row - f.pad).iter_mut().zip(ds) {
                        *x += scale * d;
                    }
                }
            }
        }
        for (row, &t) in tokens.iter().enumerate() {
            for (e, d) in emb_grad.row_mut(t).iter_mut().zip(du.row(row)) {
                *e += d;
            }
        }
        loss
    }

    pub fn train(
        &mut self,
        emb: &mut EmbeddingTable,
        train: &[SeqExample],
        valid: &[SeqExample],
        cfg: &OptimConfig,
    ) -> Result<TrainLog, TrainError> {
        let mut grads = CnnGrads(self.clone());
        train_loop(
            self,
            emb,
            &mut grads,
            train,
            valid,
            cfg,
            |m, e, ex, g, eg| m.loss_and_grad(e, &ex.tokens, &ex.control, g, eg),
            |m, e, set| mean_loss(m, e, set),
            |_| 1,
        )
    }
}

pub fn hamming_cost(p: &CnnPrediction, cv: &ControlVector) -> f64 {
    let targets = &cv.as_slice()[cv.num_acts()..];
    let slot: f64 = p.slots.iter().zip(targets).map(|(p, y)| (p - y).abs()).sum();
    (1.0 - p.act[cv.act_index()]) + slot
}

fn classification_loss(p: &CnnPrediction, cv: &ControlVector) -> f64 {
    let targets = &cv.as_slice()[cv.num_acts()..];
    let slot: f64 = p.slots.iter().zip(targets).map(|(&p, &y)| binary_cross_entropy(p, y)).sum();
    -p.act[cv.act_index()].ln() + slot
}

/// Mean classification loss per example.
pub fn mean_loss(model: &CnnModel, emb: &EmbeddingTable, set: &[SeqExample]) -> f64 {
    let total: f64 = set
        .iter()
        .map(|ex| model.loss(emb, &ex.tokens, &ex.control).unwrap_or(f64::INFINITY))
        .sum();
    total / set.len().max(1) as f64
}
