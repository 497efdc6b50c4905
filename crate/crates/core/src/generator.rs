//! Gated recurrent generator.
//!
//! At each step the hidden state is
//! `h_t = sigmoid(W_hh h_{t-1} + W_wh e(w_t) + W_fh f_t)` and the next token
//! is drawn from `softmax(W_ho h_t)`, where `f_t` is the dialogue-act control
//! vector with each emitted slot's value bit decayed by `delta^(t - t_s)`.
//! The same network run over reversed sequences is the backward reranker.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::delex::{TokenId, Vocabulary, BOS_ID, EOS_ID};
use crate::neural::{
    dot, sigmoid, softmax_in_place, train_loop, EmbeddingTable, Matrix, OptimConfig, Parameters,
    TrainError, TrainLog,
};
use crate::ontology::ControlVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GenError {
    #[error("token id {0} is outside the vocabulary")]
    TokenOutOfRange(TokenId),
}

/// Per-slot gate over a control vector.
///
/// Only the "value" bit of a slot is ever decayed; act bits and the
/// dontcare/yes/no bits pass through unchanged.
#[derive(Debug, Clone)]
pub struct FeatureGate {
    base: Vec<f64>,
    current: Vec<f64>,
    decay: f64,
    /// (value bit, first emission time)
    emitted: Vec<(usize, usize)>,
}

impl FeatureGate {
    pub fn new(cv: &ControlVector, decay: f64) -> Self {
        assert!((0.0..=1.0).contains(&decay), "gate decay must lie in [0, 1]");
        FeatureGate {
            base: cv.as_slice().to_vec(),
            current: cv.as_slice().to_vec(),
            decay,
            emitted: Vec::new(),
        }
    }

    pub fn first_emission(&self, bit: usize) -> Option<usize> {
        self.emitted.iter().find(|(b, _)| *b == bit).map(|(_, t)| *t)
    }

    /// Observes the token at time `t` (its slot value bit, if any) and
    /// returns the gated features `f_t`.
    pub fn update(&mut self, value_bit: Option<usize>, t: usize) -> &[f64] {
        if let Some(bit) = value_bit {
            if self.first_emission(bit).is_none() {
                self.emitted.push((bit, t));
            }
        }
        for &(bit, ts) in &self.emitted {
            let age = t.saturating_sub(ts);
            self.current[bit] = self.base[bit] * self.decay.powi(age as i32);
        }
        &self.current
    }

    pub fn features(&self) -> &[f64] {
        &self.current
    }
}

/// Convenience wrapper: update a gate with the emitted token.
pub fn gate_update<'g>(gate: &'g mut FeatureGate, vocab: &Vocabulary, emitted: TokenId, t: usize) -> &'g [f64] {
    gate.update(vocab.value_bit(emitted), t)
}

/// Recurrent language model conditioned on a control vector.
///
/// Weight layouts put the input dimension first so each input unit owns a
/// contiguous row: `w_wh` is h×H, `w_fh` is D×H, `w_hh` is H×H. The output
/// layer `w_ho` is stored |V|×H, one row per token.
#[derive(Debug, Clone, PartialEq)]
pub struct RnnLm {
    pub direction: Direction,
    pub decay: f64,
    pub w_wh: Matrix,
    pub w_fh: Matrix,
    pub w_hh: Matrix,
    pub w_ho: Matrix,
}

impl Parameters for RnnLm {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![self.w_wh.data(), self.w_fh.data(), self.w_hh.data(), self.w_ho.data()]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.w_wh.data_mut(), self.w_fh.data_mut(), self.w_hh.data_mut(), self.w_ho.data_mut()]
    }
}

/// Gradient buffers matching [`RnnLm`].
#[derive(Debug, Clone)]
pub struct RnnGrads(pub RnnLm);

impl Parameters for RnnGrads {
    fn tensors(&self) -> Vec<&[f64]> {
        self.0.tensors()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.0.tensors_mut()
    }
}

/// Token sequence plus the act it realizes, in natural (left-to-right) order.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqExample {
    pub tokens: Vec<TokenId>,
    pub control: ControlVector,
}

struct StepCache {
    token: TokenId,
    features: Vec<f64>,
    hidden: Vec<f64>,
    probs: Vec<f64>,
}

/// Draw from the generator with its cost.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Natural order, `BOS ... EOS`.
    pub tokens: Vec<TokenId>,
    /// Negative log-likelihood of `tokens` under the sampling model.
    pub cost: f64,
    pub truncated: bool,
    /// Probability of each drawn token (plus the closing EOS when truncated).
    pub step_probs: Vec<f64>,
}

impl RnnLm {
    pub fn zeros(vocab: usize, embed: usize, hidden: usize, control: usize, direction: Direction, decay: f64) -> Self {
        RnnLm {
            direction,
            decay,
            w_wh: Matrix::zeros(embed, hidden),
            w_fh: Matrix::zeros(control, hidden),
            w_hh: Matrix::zeros(hidden, hidden),
            w_ho: Matrix::zeros(vocab, hidden),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn uniform<R: Rng + ?Sized>(
        vocab: usize,
        embed: usize,
        hidden: usize,
        control: usize,
        direction: Direction,
        decay: f64,
        range: f64,
        rng: &mut R,
    ) -> Self {
        RnnLm {
            direction,
            decay,
            w_wh: Matrix::uniform(embed, hidden, range, rng),
            w_fh: Matrix::uniform(control, hidden, range, rng),
            w_hh: Matrix::uniform(hidden, hidden, range, rng),
            w_ho: Matrix::uniform(vocab, hidden, range, rng),
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.w_hh.rows()
    }

    pub fn vocab_size(&self) -> usize {
        self.w_ho.rows()
    }

    pub fn embed_size(&self) -> usize {
        self.w_wh.rows()
    }

    pub fn control_size(&self) -> usize {
        self.w_fh.rows()
    }

    /// Puts a natural-order sequence into this model's reading order: the
    /// backward model reads the interior reversed, still from BOS to EOS.
    pub fn orient(&self, tokens: &[TokenId]) -> Vec<TokenId> {
        let mut out = tokens.to_vec();
        if self.direction == Direction::Backward && out.len() > 2 {
            let n = out.len();
            let lo = usize::from(out[0] == BOS_ID);
            let hi = if out[n - 1] == EOS_ID { n - 1 } else { n };
            out[lo..hi].reverse();
        }
        out
    }

    /// One recurrence step. Writes `h_t` and the next-token distribution.
    pub fn step_into(
        &self,
        emb: &EmbeddingTable,
        token: TokenId,
        features: &[f64],
        h_prev: &[f64],
        hidden: &mut [f64],
        probs: &mut [f64],
    ) {
        hidden.fill(0.0);
        self.w_hh.add_rows_weighted(h_prev, hidden);
        self.w_wh.add_rows_weighted(emb.row(token), hidden);
        self.w_fh.add_rows_weighted(features, hidden);
        for v in hidden.iter_mut() {
            *v = sigmoid(*v);
        }
        self.w_ho.matvec(hidden, probs);
        softmax_in_place(probs);
    }

    pub fn rnn_step(
        &self,
        emb: &EmbeddingTable,
        token: TokenId,
        features: &[f64],
        h_prev: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let mut h = vec![0.0; self.hidden_size()];
        let mut p = vec![0.0; self.vocab_size()];
        self.step_into(emb, token, features, h_prev, &mut h, &mut p);
        (h, p)
    }

    fn check_tokens(&self, tokens: &[TokenId]) -> Result<(), GenError> {
        match tokens.iter().find(|&&t| t >= self.vocab_size()) {
            Some(&t) => Err(GenError::TokenOutOfRange(t)),
            None => Ok(()),
        }
    }

    /// Runs the model over an oriented sequence, keeping every step.
    fn forward_pass(
        &self,
        emb: &EmbeddingTable,
        vocab: &Vocabulary,
        seq: &[TokenId],
        cv: &ControlVector,
        decay: f64,
    ) -> Vec<StepCache> {
        let hsize = self.hidden_size();
        let mut gate = FeatureGate::new(cv, decay);
        let mut steps: Vec<StepCache> = Vec::with_capacity(seq.len().saturating_sub(1));
        let zero = vec![0.0; hsize];
        for (t, &token) in seq.iter().take(seq.len().saturating_sub(1)).enumerate() {
            let features = gate_update(&mut gate, vocab, token, t).to_vec();
            let mut hidden = vec![0.0; hsize];
            let mut probs = vec![0.0; self.vocab_size()];
            let h_prev = steps.last().map_or(&zero[..], |s| &s.hidden[..]);
            self.step_into(emb, token, &features, h_prev, &mut hidden, &mut probs);
            steps.push(StepCache { token, features, hidden, probs });
        }
        steps
    }

    /// `-Σ_t ln P(w_{t+1} | w_<=t, f_t)` of a natural-order sequence, using
    /// the given gate decay.
    pub fn sequence_nll_with_decay(
        &self,
        emb: &EmbeddingTable,
        vocab: &Vocabulary,
        tokens: &[TokenId],
        cv: &ControlVector,
        decay: f64,
    ) -> Result<f64, GenError> {
        self.check_tokens(tokens)?;
        let seq = self.orient(tokens);
        let hsize = self.hidden_size();
        let mut gate = FeatureGate::new(cv, decay);
        let mut h_prev = vec![0.0; hsize];
        let mut hidden = vec![0.0; hsize];
        let mut probs = vec![0.0; self.vocab_size()];
        let mut nll = 0.0;
        for t in 0..seq.len().saturating_sub(1) {
            let features = gate_update(&mut gate, vocab, seq[t], t);
            self.step_into(emb, seq[t], features, &h_prev, &mut hidden, &mut probs);
            nll -= probs[seq[t + 1]].ln();
            std::mem::swap(&mut h_prev, &mut hidden);
        }
        Ok(nll)
    }

    /// Sequence cost under the model's own gate decay.
    pub fn sequence_nll(
        &self,
        emb: &EmbeddingTable,
        vocab: &Vocabulary,
        tokens: &[TokenId],
        cv: &ControlVector,
    ) -> Result<f64, GenError> {
        self.sequence_nll_with_decay(emb, vocab, tokens, cv, self.decay)
    }

    /// Full-sequence BPTT. Accumulates into `grads` / `emb_grad` and returns the loss.
    pub fn loss_and_grad(
        &self,
        emb: &EmbeddingTable,
        vocab: &Vocabulary,
        tokens: &[TokenId],
        cv: &ControlVector,
        grads: &mut RnnGrads,
        emb_grad: &mut Matrix,
    ) -> f64 {
        let seq = self.orient(tokens);
        let steps = self.forward_pass(emb, vocab, &seq, cv, self.decay);
        let hsize = self.hidden_size();
        let g = &mut grads.0;
        let mut loss = 0.0;
        let mut dh_next = vec![0.0; hsize];
        let mut dh = vec![0.0; hsize];
        let mut dout = vec![0.0; self.vocab_size()];
        let zero = vec![0.0; hsize];
        for t in (0..steps.len()).rev() {
            let step = &steps[t];
            let target = seq[t + 1];
            loss -= step.probs[target].ln();
            dout.copy_from_slice(&step.probs);
            dout[target] -= 1.0;
            g.w_ho.add_outer(1.0, &dout, &step.hidden);
            dh.copy_from_slice(&dh_next);
            self.w_ho.add_rows_weighted(&dout, &mut dh);
            for (d, h) in dh.iter_mut().zip(&step.hidden) {
                *d *= h * (1.0 - h);
            }
            let da = &dh;
            let h_prev = if t > 0 { &steps[t - 1].hidden[..] } else { &zero[..] };
            g.w_hh.add_outer(1.0, h_prev, da);
            g.w_wh.add_outer(1.0, emb.row(step.token), da);
            g.w_fh.add_outer(1.0, &step.features, da);
            let erow = emb_grad.row_mut(step.token);
            for (j, e) in erow.iter_mut().enumerate() {
                *e += dot(self.w_wh.row(j), da);
            }
            for (i, d) in dh_next.iter_mut().enumerate() {
                *d = dot(self.w_hh.row(i), da);
            }
        }
        loss
    }

    /// Samples one utterance at temperature 1, starting from BOS with a
    /// zero hidden state, until EOS or `max_len` draws. BOS is never drawn.
    /// A truncated draw is closed with EOS and charged `-ln P(EOS)`.
    #[allow(clippy::too_many_arguments)]
    pub fn sample_utterance<R: Rng + ?Sized>(
        &self,
        emb: &EmbeddingTable,
        vocab: &Vocabulary,
        cv: &ControlVector,
        decay: f64,
        max_len: usize,
        rng: &mut R,
    ) -> Sample {
        let hsize = self.hidden_size();
        let mut gate = FeatureGate::new(cv, decay);
        let mut h_prev = vec![0.0; hsize];
        let mut hidden = vec![0.0; hsize];
        let mut probs = vec![0.0; self.vocab_size()];
        let mut seq = vec![BOS_ID];
        let mut step_probs = Vec::new();
        let mut cost = 0.0;
        let mut truncated = true;
        for t in 0..max_len {
            let features = gate_update(&mut gate, vocab, seq[t], t);
            self.step_into(emb, seq[t], features, &h_prev, &mut hidden, &mut probs);
            std::mem::swap(&mut h_prev, &mut hidden);
            let next = draw_excluding(&probs, BOS_ID, rng);
            step_probs.push(probs[next]);
            cost -= probs[next].ln();
            seq.push(next);
            if next == EOS_ID {
                truncated = false;
                break;
            }
        }
        if truncated {
            let t = seq.len() - 1;
            let features = gate_update(&mut gate, vocab, seq[t], t);
            self.step_into(emb, seq[t], features, &h_prev, &mut hidden, &mut probs);
            step_probs.push(probs[EOS_ID]);
            cost -= probs[EOS_ID].ln();
            seq.push(EOS_ID);
        }
        let tokens = self.orient(&seq);
        Sample { tokens, cost, truncated, step_probs }
    }

    /// Trains with full BPTT and early stopping; see [`train_loop`].
    pub fn train(
        &mut self,
        emb: &mut EmbeddingTable,
        vocab: &Vocabulary,
        train: &[SeqExample],
        valid: &[SeqExample],
        cfg: &OptimConfig,
    ) -> Result<TrainLog, TrainError> {
        let mut grads = RnnGrads(self.clone());
        train_loop(
            self,
            emb,
            &mut grads,
            train,
            valid,
            cfg,
            |m, e, ex, g, eg| m.loss_and_grad(e, vocab, &ex.tokens, &ex.control, g, eg),
            |m, e, set| entropy(m, e, vocab, set),
            |ex| ex.tokens.len().saturating_sub(1),
        )
    }
}

/// Per-token cross-entropy (nats) of a set of sequences.
pub fn entropy(model: &RnnLm, emb: &EmbeddingTable, vocab: &Vocabulary, set: &[SeqExample]) -> f64 {
    let mut nll = 0.0;
    let mut n = 0usize;
    for ex in set {
        nll += model
            .sequence_nll(emb, vocab, &ex.tokens, &ex.control)
            .unwrap_or(f64::INFINITY);
        n += ex.tokens.len().saturating_sub(1);
    }
    nll / n.max(1) as f64
}

fn draw_excluding<R: Rng + ?Sized>(probs: &[f64], excluded: usize, rng: &mut R) -> usize {
    let mass = 1.0 - probs[excluded];
    let mut u = rng.random::<f64>() * mass;
    let mut last = EOS_ID;
    for (i, &p) in probs.iter().enumerate() {
        if i == excluded {
            continue;
        }
        if u < p {
            return i;
        }
        u -= p;
        if p > 0.0 {
            last = i;
        }
    }
    last
}
