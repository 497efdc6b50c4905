//! Over-generation and reranking.
//!
//! The forward generator samples a pool of candidates; each distinct
//! candidate is scored by the backward language model, the convolutional
//! classifier and a slot-token count, and the pool is sorted by
//! `R* = -(cost_f + cost_b + cost_cnn) - λ·ERR`.

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cnn::CnnModel;
use crate::delex::{relexicalize_lossy, DelexUtterance, TokenId, Vocabulary};
use crate::generator::{RnnLm, Sample};
use crate::neural::EmbeddingTable;
use crate::ontology::{canonicalize_da, encode_control, ControlVector, DialogueAct, Ontology, SlotId, SlotValue};

/// Candidate `i` draws from stream `i`; the final top-n draw uses a stream
/// with this bit set, keyed on the act (see [`selection_rng`]).
pub const SELECTION_STREAM: u64 = 1 << 63;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam: usize,
    pub top_n: usize,
    /// Gate decay used when sampling and scoring; `None` uses each model's own.
    pub decay: Option<f64>,
    pub lambda: f64,
    pub seed: u64,
    pub max_len: usize,
    pub use_backward: bool,
    pub use_cnn: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: 100,
            top_n: 1,
            decay: None,
            lambda: 100.0,
            seed: 0,
            max_len: 60,
            use_backward: true,
            use_cnn: true,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.beam == 0 {
            return Err("beam must be at least 1".into());
        }
        if self.top_n == 0 || self.top_n > self.beam {
            return Err(format!("top_n must lie in 1..={} (the beam)", self.beam));
        }
        if let Some(d) = self.decay {
            if !(0.0..=1.0).contains(&d) {
                return Err(format!("decay {d} is outside [0, 1]"));
            }
        }
        if !(self.lambda >= 0.0) {
            return Err("lambda must be non-negative".into());
        }
        if self.max_len == 0 {
            return Err("max_len must be at least 1".into());
        }
        Ok(())
    }
}

/// Which cost terms enter the score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankWeights {
    pub use_backward: bool,
    pub use_cnn: bool,
    pub lambda: f64,
}

impl From<&DecodeConfig> for RankWeights {
    fn from(c: &DecodeConfig) -> Self {
        RankWeights { use_backward: c.use_backward, use_cnn: c.use_cnn, lambda: c.lambda }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Candidate {
    /// Natural order, `BOS ... EOS`.
    pub tokens: Vec<TokenId>,
    pub cost_f: f64,
    pub cost_b: f64,
    pub cost_cnn: f64,
    /// Slot error plus the number of slot tokens that could not be filled.
    pub err: usize,
    pub r: f64,
    pub r_star: f64,
    pub surface: String,
    /// Index of the first sample that produced this sequence.
    pub first_sample: usize,
}

/// Everything the decoder reads; the backward model and classifier are optional.
#[derive(Debug, Clone, Copy)]
pub struct Models<'a> {
    pub ont: &'a Ontology,
    pub vocab: &'a Vocabulary,
    pub emb: &'a EmbeddingTable,
    pub fwd: &'a RnnLm,
    pub bwd: Option<&'a RnnLm>,
    pub cnn: Option<&'a CnnModel>,
}

fn err_count(ont: &Ontology, slots: impl Iterator<Item = SlotId>, da: &DialogueAct) -> usize {
    let mut occurrences = vec![0usize; ont.num_slots()];
    for s in slots {
        occurrences[s.0] += 1;
    }
    let mut required = vec![0usize; ont.num_slots()];
    for (slot, value) in &da.pairs {
        if matches!(value, SlotValue::Categorical(_)) && ont.slot_token(*slot).is_some() {
            required[slot.0] += 1;
        }
    }
    // missing: required pairs whose token never appears; redundant: surplus tokens
    required
        .iter()
        .zip(&occurrences)
        .map(|(&req, &occ)| if occ == 0 { req } else { occ.saturating_sub(req) })
        .sum()
}

/// Missing plus redundant slot tokens, over delexicalizable slots only.
///
/// A categorical pair is missing when its slot token never appears; every
/// occurrence beyond the slot's required count is redundant.
pub fn slot_error(ont: &Ontology, delex: &DelexUtterance, da: &DialogueAct) -> usize {
    err_count(ont, delex.tokens.iter().filter_map(|t| ont.slot_for_token(t)), da)
}

/// [`slot_error`] over token ids.
pub fn slot_error_ids(ont: &Ontology, vocab: &Vocabulary, tokens: &[TokenId], da: &DialogueAct) -> usize {
    err_count(ont, tokens.iter().filter_map(|&t| vocab.slot_of(t)), da)
}

/// Draws `beam` samples, sample `i` from its own stream of `seed`.
pub fn sample_pool(m: &Models<'_>, cv: &ControlVector, cfg: &DecodeConfig) -> Vec<Sample> {
    let decay = cfg.decay.unwrap_or(m.fwd.decay);
    (0..cfg.beam)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            m.fwd.sample_utterance(m.emb, m.vocab, cv, decay, cfg.max_len, &mut rng)
        })
        .collect()
}

/// Collapses identical token sequences, keeping first-drawn order.
pub fn dedup(samples: &[Sample]) -> Vec<Candidate> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if seen.insert(s.tokens.clone()) {
            out.push(Candidate {
                tokens: s.tokens.clone(),
                cost_f: s.cost,
                cost_b: 0.0,
                cost_cnn: 0.0,
                err: 0,
                r: -s.cost,
                r_star: -s.cost,
                surface: String::new(),
                first_sample: i,
            });
        }
    }
    out
}

/// Samples `beam` utterances and returns the distinct ones.
pub fn overgenerate(m: &Models<'_>, da: &DialogueAct, cfg: &DecodeConfig) -> Vec<Candidate> {
    let cv = encode_control(m.ont, da);
    dedup(&sample_pool(m, &cv, cfg))
}

/// Fills every cost field the available models allow, plus ERR and the
/// surface text. Scores are left for [`rank`].
pub fn score(m: &Models<'_>, cands: &mut [Candidate], da: &DialogueAct, decay: Option<f64>) {
    let cv = encode_control(m.ont, da);
    for c in cands.iter_mut() {
        if let Some(bwd) = m.bwd {
            let d = decay.unwrap_or(bwd.decay);
            c.cost_b = bwd
                .sequence_nll_with_decay(m.emb, m.vocab, &c.tokens, &cv, d)
                .expect("candidate tokens come from the same vocabulary");
        }
        if let Some(cnn) = m.cnn {
            c.cost_cnn = cnn.cost(m.emb, &c.tokens, &cv).expect("candidate tokens come from the same vocabulary");
        }
        let words = m.vocab.decode(&c.tokens);
        let (surface, dangling) = relexicalize_lossy(m.ont, &words, da);
        c.err = slot_error_ids(m.ont, m.vocab, &c.tokens, da) + dangling;
        c.surface = surface;
    }
}

/// Computes `r` and `r*` under `w` and sorts best first. Ties go to the
/// lower forward cost, then to the lexicographically smaller token ids.
pub fn rank(cands: &mut [Candidate], w: RankWeights) {
    for c in cands.iter_mut() {
        let mut cost = c.cost_f;
        if w.use_backward {
            cost += c.cost_b;
        }
        if w.use_cnn {
            cost += c.cost_cnn;
        }
        c.r = -cost;
        c.r_star = c.r - w.lambda * c.err as f64;
    }
    cands.sort_by(compare);
}

fn compare(a: &Candidate, b: &Candidate) -> Ordering {
    b.r_star
        .total_cmp(&a.r_star)
        .then_with(|| a.cost_f.total_cmp(&b.cost_f))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Scores and ranks a candidate set.
pub fn rerank(m: &Models<'_>, mut cands: Vec<Candidate>, da: &DialogueAct, cfg: &DecodeConfig) -> Vec<Candidate> {
    let m = Models {
        bwd: m.bwd.filter(|_| cfg.use_backward),
        cnn: m.cnn.filter(|_| cfg.use_cnn),
        ..*m
    };
    score(&m, &mut cands, da, cfg.decay);
    rank(&mut cands, RankWeights::from(cfg));
    cands
}

/// Uniform draw among the first `min(top_n, len)` ranked candidates.
pub fn select_index<R: Rng + ?Sized>(count: usize, top_n: usize, rng: &mut R) -> usize {
    assert!(count > 0, "no candidates to select from");
    let n = top_n.clamp(1, count);
    if n == 1 {
        0
    } else {
        rng.random_range(0..n)
    }
}

/// Rng for the top-n draw. Keying the stream on the act keeps one act's
/// output reproducible while draws across a test set stay independent;
/// with a single shared stream every act would take the same rank.
pub fn selection_rng(seed: u64, da: &DialogueAct) -> ChaCha8Rng {
    let mut key = format!("{}", da.act.0);
    for (slot, value) in &da.pairs {
        let _ = write!(key, "|{}={:?}", slot.0, value);
    }
    let digest = Sha256::digest(key.as_bytes());
    let word = u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SELECTION_STREAM | word);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Decoded {
    pub ranked: Vec<Candidate>,
    pub chosen: usize,
}

impl Decoded {
    pub fn output(&self) -> &Candidate {
        &self.ranked[self.chosen]
    }

    pub fn surface(&self) -> &str {
        &self.ranked[self.chosen].surface
    }
}

/// Full pipeline for one act.
pub fn generate(m: &Models<'_>, da: &DialogueAct, cfg: &DecodeConfig) -> Decoded {
    let da = canonicalize_da(da);
    let cands = overgenerate(m, &da, cfg);
    let ranked = rerank(m, cands, &da, cfg);
    let chosen = select_index(ranked.len(), cfg.top_n, &mut selection_rng(cfg.seed, &da));
    Decoded { ranked, chosen }
}

/// One tab-separated line per candidate:
/// rank, r*, r, cost_f, cost_b, cost_cnn, err, surface.
pub fn ranked_report(cands: &[Candidate]) -> String {
    let mut out = String::from("rank\tr_star\tr\tcost_f\tcost_b\tcost_cnn\terr\tsurface\n");
    for (i, c) in cands.iter().enumerate() {
        let _ = writeln!(
            out,
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}",
            i + 1,
            c.r_star,
            c.r,
            c.cost_f,
            c.cost_b,
            c.cost_cnn,
            c.err,
            c.surface
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::Direction;
    use crate::ontology::parse_da;

    fn cand(tokens: Vec<TokenId>, f: f64, b: f64, c: f64, err: usize) -> Candidate {
        Candidate {
            tokens,
            cost_f: f,
            cost_b: b,
            cost_cnn: c,
            err,
            r: 0.0,
            r_star: 0.0,
            surface: String::new(),
            first_sample: 0,
        }
    }

    #[test]
    fn slot_error_examples() {
        let o = Ontology::restaurant();
        let da = parse_da(&o, "inform(name=x,pricerange=cheap)").unwrap();
        let d = DelexUtterance::parse("BOS SLOT_NAME and SLOT_NAME EOS");
        assert_eq!(slot_error(&o, &d, &da), 2);
        let d = DelexUtterance::parse("BOS SLOT_NAME is SLOT_PRICERANGE EOS");
        assert_eq!(slot_error(&o, &d, &da), 0);
        let bye = parse_da(&o, "goodbye()").unwrap();
        assert_eq!(slot_error(&o, &DelexUtterance::parse("BOS SLOT_FOOD EOS"), &bye), 1);
        // special values are not policed by tokens
        let dc = parse_da(&o, "inform(name=x,food=dontcare,kidsallowed=yes)").unwrap();
        assert_eq!(slot_error(&o, &DelexUtterance::parse("BOS SLOT_NAME EOS"), &dc), 0);
        assert_eq!(slot_error(&o, &DelexUtterance::parse("BOS SLOT_NAME SLOT_FOOD EOS"), &dc), 1);
        let req = parse_da(&o, "request(near)").unwrap();
        assert_eq!(slot_error(&o, &DelexUtterance::parse("BOS near ? EOS"), &req), 0);
        // a slot required twice: one token counts as present, none as two missing
        let two = parse_da(&o, "select(food=thai,food=greek)").unwrap();
        assert_eq!(slot_error(&o, &DelexUtterance::parse("BOS SLOT_FOOD EOS"), &two), 0);
        assert_eq!(slot_error(&o, &DelexUtterance::parse("BOS EOS"), &two), 2);
        assert_eq!(slot_error(&o, &DelexUtterance::parse("BOS SLOT_FOOD SLOT_FOOD SLOT_FOOD EOS"), &two), 1);
    }

    #[test]
    fn lambda_dominates_and_zero_lambda_orders_by_r() {
        let w = RankWeights { use_backward: true, use_cnn: true, lambda: 100.0 };
        let mut c = vec![cand(vec![0, 5, 1], 1.0, 0.5, 0.5, 1), cand(vec![0, 4, 1], 2.0, 2.0, 1.0, 0)];
        rank(&mut c, w);
        assert_eq!(c[0].tokens, vec![0, 4, 1]);
        assert_eq!(c[0].r_star, -5.0);
        assert_eq!(c[1].r_star, -102.0);
        rank(&mut c, RankWeights { lambda: 0.0, ..w });
        assert_eq!(c[0].tokens, vec![0, 5, 1]);
        for x in &c {
            assert!(x.r_star <= x.r);
        }
    }

    #[test]
    fn ranking_ignores_input_order() {
        let w = RankWeights { use_backward: true, use_cnn: false, lambda: 100.0 };
        let base = vec![
            cand(vec![0, 3, 1], 1.0, 1.0, 9.0, 0),
            cand(vec![0, 4, 1], 2.0, 0.0, 0.0, 0),
            cand(vec![0, 2, 1], 1.0, 1.0, 0.0, 0),
            cand(vec![0, 5, 1], 0.5, 0.0, 0.0, 1),
        ];
        let mut a = base.clone();
        rank(&mut a, w);
        let mut b: Vec<_> = base.into_iter().rev().collect();
        rank(&mut b, w);
        assert_eq!(a, b);
        // equal r*: lower forward cost first, then token order
        assert_eq!(a[0].tokens, vec![0, 2, 1]);
        assert_eq!(a[1].tokens, vec![0, 3, 1]);
        assert_eq!(a[2].tokens, vec![0, 4, 1]);
    }

    #[test]
    fn dedup_keeps_first_occurrence() {
        let s = |t: Vec<usize>, c: f64| Sample { tokens: t, cost: c, truncated: false, step_probs: vec![] };
        let pool = vec![s(vec![0, 4, 1], 1.0), s(vec![0, 5, 1], 2.0), s(vec![0, 4, 1], 1.0)];
        let d = dedup(&pool);
        assert_eq!(d.len(), 2);
        assert_eq!(d[1].first_sample, 1);
    }

    #[test]
    fn selection_is_bounded_and_reproducible() {
        let da = DialogueAct::new(crate::ontology::ActType(0));
        assert_eq!(select_index(10, 1, &mut selection_rng(3, &da)), 0);
        let a: Vec<_> = (0..20).map(|s| select_index(10, 5, &mut selection_rng(s, &da))).collect();
        let b: Vec<_> = (0..20).map(|s| select_index(10, 5, &mut selection_rng(s, &da))).collect();
        assert_eq!(a, b);
        assert!(a.iter().all(|&i| i < 5));
        assert!(a.iter().any(|&i| i > 0));
        assert!((0..20).all(|s| select_index(2, 5, &mut selection_rng(s, &da)) < 2));
        // one seed, different acts: draws are not all the same rank
        let per_act: HashSet<usize> = (0..20)
            .map(|a| select_index(10, 5, &mut selection_rng(7, &DialogueAct::new(crate::ontology::ActType(a % 8)).with(SlotId(a), SlotValue::DontCare))))
            .collect();
        assert!(per_act.len() > 1);
    }

    #[test]
    fn generate_on_a_small_model() {
        use crate::delex::build_vocab;
        use rand::SeedableRng;
        let o = Ontology::restaurant();
        let v = build_vocab(&o, &[DelexUtterance::parse("BOS a b SLOT_FOOD EOS")]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let fwd = RnnLm::uniform(v.len(), 4, 4, o.control_dim(), Direction::Forward, 0.0, 0.5, &mut rng);
        let bwd = RnnLm::uniform(v.len(), 4, 4, o.control_dim(), Direction::Backward, 0.0, 0.5, &mut rng);
        let cnn = CnnModel::uniform(&[1, 2], 4, 5, 8, 48, 0.5, &mut rng);
        let emb = EmbeddingTable::uniform(v.len(), 4, 0.5, &mut rng);
        let m = Models { ont: &o, vocab: &v, emb: &emb, fwd: &fwd, bwd: Some(&bwd), cnn: Some(&cnn) };
        let da = parse_da(&o, "inform(food=thai)").unwrap();

        let one = DecodeConfig { beam: 1, ..DecodeConfig::default() };
        let a = generate(&m, &da, &one);
        assert_eq!(a.ranked.len(), 1);
        assert_eq!(a, generate(&m, &da, &one));

        let cfg = DecodeConfig { beam: 30, top_n: 5, max_len: 6, ..DecodeConfig::default() };
        let d = generate(&m, &da, &cfg);
        assert_eq!(d, generate(&m, &da, &cfg));
        assert!(d.chosen < 5);
        for c in &d.ranked {
            assert!((c.r + c.cost_f + c.cost_b + c.cost_cnn).abs() < 1e-9);
            assert_eq!(c.r_star, c.r - 100.0 * c.err as f64);
            let nll = fwd.sequence_nll(&emb, &v, &c.tokens, &encode_control(&o, &da)).unwrap();
            assert!((nll - c.cost_f).abs() < 1e-9);
        }
        let report = ranked_report(&d.ranked);
        assert_eq!(report.lines().count(), d.ranked.len() + 1);
        assert_eq!(report.lines().nth(1).unwrap().split('\t').count(), 8);
    }
}
