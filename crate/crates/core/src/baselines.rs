//! Comparison systems: nearest-neighbour template retrieval, per-class
//! n-gram generators and a fixed handcrafted template per act.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Prepared;
use crate::decoder::{select_index, selection_rng, slot_error};
use crate::delex::{relexicalize_lossy, DelexUtterance, BOS, EOS};
use crate::ontology::{canonicalize_da, encode_control, ActType, DaKey, DialogueAct, Ontology, SlotId, SlotValue};

/// What every generator hands to the evaluator.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub surface: String,
    pub delex: DelexUtterance,
    /// Slot error plus dangling slot tokens.
    pub err: usize,
}

impl Generated {
    pub fn from_delex(ont: &Ontology, delex: DelexUtterance, da: &DialogueAct) -> Self {
        let (surface, dangling) = relexicalize_lossy(ont, &delex.tokens, da);
        let err = slot_error(ont, &delex, da) + dangling;
        Generated { surface, delex, err }
    }
}

// ---------------------------------------------------------------- kNN

#[derive(Debug, Clone)]
struct StoreEntry {
    key: DaKey,
    control: Vec<f64>,
    norm: f64,
    templates: Vec<DelexUtterance>,
}

/// Training templates grouped by act key, in first-seen order.
#[derive(Debug, Clone)]
pub struct TemplateStore {
    entries: Vec<StoreEntry>,
}

impl TemplateStore {
    pub fn build(ont: &Ontology, train: &[Prepared]) -> Self {
        let mut entries: Vec<StoreEntry> = Vec::new();
        let mut index: HashMap<DaKey, usize> = HashMap::new();
        for p in train {
            let key = p.da.key();
            let i = *index.entry(key.clone()).or_insert_with(|| {
                let control = encode_control(ont, &p.da).as_slice().to_vec();
                let norm = control.iter().map(|x| x * x).sum::<f64>().sqrt();
                entries.push(StoreEntry { key, control, norm, templates: Vec::new() });
                entries.len() - 1
            });
            let t = DelexUtterance { tokens: p.delex.tokens.clone(), lex_map: Vec::new() };
            if !entries[i].templates.contains(&t) {
                entries[i].templates.push(t);
            }
        }
        TemplateStore { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn templates(&self, key: &DaKey) -> Option<&[DelexUtterance]> {
        self.entries.iter().find(|e| &e.key == key).map(|e| e.templates.as_slice())
    }

    /// Index of the most similar stored act and its cosine similarity.
    /// Earlier entries win ties.
    pub fn nearest(&self, ont: &Ontology, da: &DialogueAct) -> Option<(usize, f64)> {
        let q = encode_control(ont, da);
        let q = q.as_slice();
        let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut best: Option<(usize, f64)> = None;
        for (i, e) in self.entries.iter().enumerate() {
            let dot: f64 = q.iter().zip(&e.control).map(|(a, b)| a * b).sum();
            let cos = if qn == 0.0 || e.norm == 0.0 { 0.0 } else { dot / (qn * e.norm) };
            if best.is_none_or(|(_, b)| cos > b) {
                best = Some((i, cos));
            }
        }
        best
    }

    pub fn key(&self, i: usize) -> &DaKey {
        &self.entries[i].key
    }
}

/// Lexicalizes the first template of the nearest stored act.
pub fn knn_generate(ont: &Ontology, store: &TemplateStore, da: &DialogueAct) -> Generated {
    let da = canonicalize_da(da);
    let (i, _) = store.nearest(ont, &da).expect("template store is empty");
    Generated::from_delex(ont, store.entries[i].templates[0].clone(), &da)
}

// ---------------------------------------------------------------- class n-gram

pub const BACKOFF_ALPHA: f64 = 0.4;

/// Partition key: act type plus its first `k` distinct slots in ontology
/// order. The level-0 key is shared by every utterance.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ClassKey {
    pub act: Option<ActType>,
    pub slots: Vec<SlotId>,
}

impl ClassKey {
    pub fn global() -> Self {
        ClassKey { act: None, slots: Vec::new() }
    }

    pub fn of(da: &DialogueAct, k: usize) -> Self {
        if k == 0 {
            return Self::global();
        }
        let mut slots: Vec<SlotId> = da.pairs.iter().map(|(s, _)| *s).collect();
        slots.sort();
        slots.dedup();
        slots.truncate(k);
        ClassKey { act: Some(da.act), slots }
    }
}

/// Counts of next tokens, keyed by context (the previous up to n−1 tokens).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NgramCounts {
    /// `orders[j]` holds contexts of length `j`.
    #[serde(with = "orders_serde")]
    pub orders: Orders,
    pub utterances: usize,
}

impl NgramCounts {
    fn new(n: usize) -> Self {
        NgramCounts { orders: vec![BTreeMap::new(); n], utterances: 0 }
    }

    fn add(&mut self, seq: &[u32]) {
        let n = self.orders.len();
        for t in 1..seq.len() {
            for j in 0..n.min(t + 1) {
                let ctx = seq[t - j..t].to_vec();
                *self.orders[j].entry(ctx).or_default().entry(seq[t]).or_insert(0) += 1;
            }
        }
        self.utterances += 1;
    }
}

#[derive(Debug, Error)]
pub enum NgramError {
    #[error("slots per class must be 0..=3 and order 3..=5 (got k={k}, n={n})")]
    Params { k: usize, n: usize },
    #[error("empty training corpus")]
    Empty,
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed n-gram model: {0}")]
    Format(String),
}

/// One stupid-backoff n-gram model per utterance class, with coarser
/// classes kept for backing off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NgramClassLm {
    pub k: usize,
    pub n: usize,
    pub vocab: Vec<String>,
    /// `levels[j]` maps level-`j` class keys to their counts.
    #[serde(with = "levels_serde")]
    pub levels: Vec<BTreeMap<ClassKey, NgramCounts>>,
}

mod levels_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[BTreeMap<ClassKey, NgramCounts>], s: S) -> Result<S::Ok, S::Error> {
        let flat: Vec<Vec<(&ClassKey, &NgramCounts)>> = v.iter().map(|m| m.iter().collect()).collect();
        flat.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<BTreeMap<ClassKey, NgramCounts>>, D::Error> {
        let flat: Vec<Vec<(ClassKey, NgramCounts)>> = Vec::deserialize(d)?;
        Ok(flat.into_iter().map(|m| m.into_iter().collect()).collect())
    }
}

type Orders = Vec<BTreeMap<Vec<u32>, BTreeMap<u32, u32>>>;

mod orders_serde {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Orders, s: S) -> Result<S::Ok, S::Error> {
        let flat: Vec<Vec<(&Vec<u32>, &BTreeMap<u32, u32>)>> = v.iter().map(|m| m.iter().collect()).collect();
        flat.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Orders, D::Error> {
        let flat: Vec<Vec<(Vec<u32>, BTreeMap<u32, u32>)>> = Vec::deserialize(d)?;
        Ok(flat.into_iter().map(|m| m.into_iter().collect()).collect())
    }
}

const BOS_IDX: u32 = 0;
const EOS_IDX: u32 = 1;

pub fn train_class_ngram(corpus: &[Prepared], k: usize, n: usize) -> Result<NgramClassLm, NgramError> {
    if k > 3 || !(3..=5).contains(&n) {
        return Err(NgramError::Params { k, n });
    }
    if corpus.is_empty() {
        return Err(NgramError::Empty);
    }
    let mut words: Vec<&str> = corpus
        .iter()
        .flat_map(|p| p.delex.tokens.iter())
        .map(String::as_str)
        .filter(|t| *t != BOS && *t != EOS)
        .collect();
    words.sort_unstable();
    words.dedup();
    let mut vocab = vec![BOS.to_string(), EOS.to_string()];
    vocab.extend(words.into_iter().map(str::to_string));
    let index: HashMap<&str, u32> = vocab.iter().enumerate().map(|(i, w)| (w.as_str(), i as u32)).collect();

    let mut levels = vec![BTreeMap::new(); k + 1];
    for p in corpus {
        let seq: Vec<u32> = p.delex.tokens.iter().map(|t| index[t.as_str()]).collect();
        for (j, level) in levels.iter_mut().enumerate() {
            level.entry(ClassKey::of(&p.da, j)).or_insert_with(|| NgramCounts::new(n)).add(&seq);
        }
    }
    Ok(NgramClassLm { k, n, vocab, levels })
}

impl NgramClassLm {
    pub fn num_classes(&self) -> usize {
        self.levels[self.k].len()
    }

    /// Counts for the finest class available for `da`, backing off level by level.
    pub fn class_for(&self, da: &DialogueAct) -> &NgramCounts {
        (0..=self.k)
            .rev()
            .find_map(|j| self.levels[j].get(&ClassKey::of(da, j)))
            .expect("level 0 always holds the global class")
    }

    /// Normalized next-token distribution after `history`. BOS has zero mass.
    pub fn distribution(&self, counts: &NgramCounts, history: &[u32]) -> Vec<f64> {
        let v = self.vocab.len();
        let mut dist = vec![1.0 / v as f64; v];
        for (j, order) in counts.orders.iter().enumerate() {
            if j > history.len() {
                break;
            }
            let Some(next) = order.get(&history[history.len() - j..]) else { break };
            let total: u32 = next.values().sum();
            let mut level = vec![0.0; v];
            for w in 0..v {
                level[w] = BACKOFF_ALPHA * dist[w];
            }
            for (&w, &c) in next {
                level[w as usize] = c as f64 / total as f64;
            }
            dist = level;
        }
        dist[BOS_IDX as usize] = 0.0;
        let z: f64 = dist.iter().sum();
        dist.iter_mut().for_each(|p| *p /= z);
        dist
    }

    fn index(&self, token: &str) -> Option<u32> {
        self.vocab.iter().position(|w| w == token).map(|i| i as u32)
    }

    /// Negative log probability of a delexicalized utterance under the
    /// class model for `da`. Unknown words take the floor probability.
    pub fn nll(&self, da: &DialogueAct, delex: &DelexUtterance) -> f64 {
        let counts = self.class_for(da);
        let seq: Vec<Option<u32>> = delex.tokens.iter().map(|t| self.index(t)).collect();
        let mut hist: Vec<u32> = vec![BOS_IDX];
        let mut nll = 0.0;
        for tok in &seq[1..] {
            let h = &hist[hist.len().saturating_sub(self.n - 1)..];
            let dist = self.distribution(counts, h);
            let p = match tok {
                Some(w) => dist[*w as usize],
                None => dist.iter().cloned().filter(|p| *p > 0.0).fold(f64::INFINITY, f64::min),
            };
            nll -= p.ln();
            hist.push(tok.unwrap_or(EOS_IDX));
        }
        nll
    }

    /// Draws one utterance; returns delex tokens and their NLL.
    pub fn sample<R: Rng + ?Sized>(&self, da: &DialogueAct, max_len: usize, greedy: bool, rng: &mut R) -> (DelexUtterance, f64) {
        let counts = self.class_for(da);
        let mut seq = vec![BOS_IDX];
        let mut nll = 0.0;
        loop {
            let h = &seq[seq.len().saturating_sub(self.n - 1)..];
            let mut dist = self.distribution(counts, h);
            if seq.len() > max_len {
                dist = vec![0.0; dist.len()];
                dist[EOS_IDX as usize] = 1.0;
            }
            let w = if greedy { argmax(&dist) } else { draw(&dist, rng) };
            nll -= dist[w].ln();
            seq.push(w as u32);
            if w as u32 == EOS_IDX {
                break;
            }
        }
        let tokens = seq.iter().map(|&i| self.vocab[i as usize].clone()).collect();
        (DelexUtterance { tokens, lex_map: Vec::new() }, nll)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("n-gram model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, NgramError> {
        let lm: NgramClassLm = serde_json::from_str(text).map_err(|e| NgramError::Format(e.to_string()))?;
        if lm.levels.len() != lm.k + 1 || lm.vocab.len() < 2 || lm.vocab[0] != BOS || lm.vocab[1] != EOS {
            return Err(NgramError::Format("inconsistent levels or vocabulary".into()));
        }
        if lm.levels[0].get(&ClassKey::global()).is_none() {
            return Err(NgramError::Format("missing global class".into()));
        }
        Ok(lm)
    }

    pub fn load(path: &Path) -> Result<Self, NgramError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| NgramError::Io { path: path.display().to_string(), source })?;
        Self::from_json(&text)
    }
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > p[best] {
            best = i;
        }
    }
    best
}

fn draw<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &x) in p.iter().enumerate() {
        if x > 0.0 {
            acc += x;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NgramConfig {
    pub beam: usize,
    pub top_n: usize,
    pub lambda: f64,
    pub seed: u64,
    pub max_len: usize,
}

impl Default for NgramConfig {
    fn default() -> Self {
        NgramConfig { beam: 100, top_n: 1, lambda: 100.0, seed: 0, max_len: 60 }
    }
}

/// A reranked n-gram candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct NgramCandidate {
    pub delex: DelexUtterance,
    pub nll: f64,
    pub err: usize,
    pub score: f64,
}

/// Over-generates `beam` samples, ranks distinct ones by −(NLL + λ·ERR).
pub fn ngram_candidates(ont: &Ontology, lm: &NgramClassLm, da: &DialogueAct, cfg: &NgramConfig) -> Vec<NgramCandidate> {
    let da = canonicalize_da(da);
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for i in 0..cfg.beam.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(i as u64);
        let (delex, nll) = lm.sample(&da, cfg.max_len, false, &mut rng);
        if seen.insert(delex.tokens.clone()) {
            let g = Generated::from_delex(ont, delex, &da);
            let score = -(nll + cfg.lambda * g.err as f64);
            out.push(NgramCandidate { delex: g.delex, nll, err: g.err, score });
        }
    }
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.nll.total_cmp(&b.nll))
            .then_with(|| a.delex.tokens.cmp(&b.delex.tokens))
    });
    out
}

pub fn ngram_generate(ont: &Ontology, lm: &NgramClassLm, da: &DialogueAct, cfg: &NgramConfig) -> Generated {
    let da = canonicalize_da(da);
    let ranked = ngram_candidates(ont, lm, &da, cfg);
    let i = select_index(ranked.len(), cfg.top_n, &mut selection_rng(cfg.seed, &da));
    Generated::from_delex(ont, ranked[i].delex.clone(), &da)
}

// ---------------------------------------------------------------- handcrafted

#[derive(Debug, Error)]
pub enum HandcraftedError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed handcrafted templates: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhraseSet {
    pub value: String,
    pub dontcare: String,
    pub yes: String,
    pub no: String,
    pub unvalued: String,
}

/// One fixed frame per act type; slots are listed with generic phrases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Handcrafted {
    pub frames: BTreeMap<String, String>,
    pub phrases: PhraseSet,
    pub labels: BTreeMap<String, String>,
    pub joiner: String,
}

impl Handcrafted {
    pub fn restaurant() -> Self {
        serde_json::from_str(include_str!("../data/handcrafted.json")).expect("bundled templates parse")
    }

    pub fn load(path: &Path) -> Result<Self, HandcraftedError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| HandcraftedError::Io { path: path.display().to_string(), source })?;
        serde_json::from_str(&text).map_err(|e| HandcraftedError::Format(e.to_string()))
    }

    pub fn validate(&self, ont: &Ontology) -> Result<(), HandcraftedError> {
        for act in &ont.acts {
            if !self.frames.contains_key(act) {
                return Err(HandcraftedError::Format(format!("no frame for act `{act}`")));
            }
        }
        for s in ont.slot_ids() {
            if !self.labels.contains_key(ont.slot_name(s)) {
                return Err(HandcraftedError::Format(format!("no label for slot `{}`", ont.slot_name(s))));
            }
        }
        Ok(())
    }

    pub fn generate(&self, ont: &Ontology, da: &DialogueAct) -> Generated {
        let da = canonicalize_da(da);
        let frame = self.frames.get(ont.act_name(da.act)).map(String::as_str).unwrap_or("{slots}");
        let in_frame = |slot: SlotId| ont.slot_token(slot).is_some_and(|t| frame.split_whitespace().any(|w| w == t));
        let phrases: Vec<String> = da
            .pairs
            .iter()
            .filter(|(s, v)| !(in_frame(*s) && matches!(v, SlotValue::Categorical(_))))
            .map(|(s, v)| {
                let label = self.labels.get(ont.slot_name(*s)).map(String::as_str).unwrap_or(ont.slot_name(*s));
                let pattern = match v {
                    SlotValue::Categorical(_) => &self.phrases.value,
                    SlotValue::DontCare => &self.phrases.dontcare,
                    SlotValue::Yes => &self.phrases.yes,
                    SlotValue::No => &self.phrases.no,
                    SlotValue::Unvalued => &self.phrases.unvalued,
                };
                let slot_tok = ont.slot_token(*s).unwrap_or_default();
                pattern.replace("{label}", label).replace("SLOT", &slot_tok)
            })
            .collect();
        let text = frame.replace("{slots}", &phrases.join(&self.joiner));
        Generated::from_delex(ont, DelexUtterance::parse(&text), &da)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::delex::delexicalize;
    use crate::ontology::parse_da;

    fn prep(o: &Ontology, da: &str, text: &str) -> Prepared {
        let da = canonicalize_da(&parse_da(o, da).unwrap());
        let delex = delexicalize(o, text, &da);
        Prepared { da, text: text.to_string(), delex }
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
    }

    #[test]
    fn knn_exact_match_returns_own_template() {
        let o = Ontology::restaurant();
        let train = vec![
            prep(&o, "inform(name=nopa,food=thai)", "nopa serves thai food ."),
            prep(&o, "goodbye()", "good bye ."),
            prep(&o, "inform(name=nopa,food=thai)", "nopa has thai food ."),
        ];
        let store = TemplateStore::build(&o, &train);
        assert_eq!(store.len(), 2);
        let g = knn_generate(&o, &store, &parse_da(&o, "inform(name=kokkari,food=greek)").unwrap());
        assert_eq!(g.surface, "kokkari serves greek food .");
        assert_eq!(g.err, 0);
        let g = knn_generate(&o, &store, &parse_da(&o, "goodbye()").unwrap());
        assert_eq!(g.surface, "good bye .");
    }

    #[test]
    fn knn_picks_the_nearer_of_two_by_cosine() {
        let o = Ontology::restaurant();
        let a = prep(&o, "inform(name=nopa)", "nopa is here .");
        let b = prep(&o, "inform(name=nopa,food=thai,area=soma)", "nopa serves thai food in soma .");
        let q = parse_da(&o, "inform(name=x,food=y)").unwrap();
        // hand computation: q has 3 active bits (act, name, food);
        // a shares 2 of its 2, b shares 3 of its 4.
        let ca = 2.0 / (3.0f64.sqrt() * 2.0f64.sqrt());
        let cb = 3.0 / (3.0f64.sqrt() * 4.0f64.sqrt());
        let qv = encode_control(&o, &q);
        assert!((cosine(qv.as_slice(), encode_control(&o, &a.da).as_slice()) - ca).abs() < 1e-12);
        assert!(cb > ca);
        for train in [vec![a.clone(), b.clone()], vec![b.clone(), a.clone()]] {
            let store = TemplateStore::build(&o, &train);
            let (i, cos) = store.nearest(&o, &q).unwrap();
            assert_eq!(store.key(i), &b.da.key());
            assert!((cos - cb).abs() < 1e-12);
        }
        // identical cosine: earlier entry wins
        let c = prep(&o, "inform(name=nopa,area=soma)", "nopa is in soma .");
        let d = prep(&o, "inform(name=nopa,food=thai)", "nopa serves thai .");
        let q = parse_da(&o, "inform(name=x,near=y)").unwrap();
        for (first, train) in [(&c, vec![c.clone(), d.clone()]), (&d, vec![d.clone(), c.clone()])] {
            let store = TemplateStore::build(&o, &train);
            assert_eq!(store.key(store.nearest(&o, &q).unwrap().0), &first.da.key());
        }
    }

    #[test]
    fn class_keys_and_counts() {
        let o = Ontology::restaurant();
        let train = vec![
            prep(&o, "inform(name=nopa,food=thai)", "nopa serves thai food ."),
            prep(&o, "inform(name=nopa,area=soma)", "nopa is in soma ."),
            prep(&o, "inform(name=nopa,food=thai,area=soma)", "nopa serves thai food in soma ."),
            prep(&o, "request(food)", "what food ?"),
        ];
        let mut prev = 0;
        for k in 0..=3 {
            let lm = train_class_ngram(&train, k, 3).unwrap();
            // oracle: distinct (act, first k sorted slots)
            let mut keys: Vec<(usize, Vec<usize>)> = train
                .iter()
                .map(|p| {
                    if k == 0 {
                        return (usize::MAX, vec![]);
                    }
                    let mut s: Vec<usize> = p.da.pairs.iter().map(|(s, _)| s.0).collect();
                    s.sort();
                    s.dedup();
                    s.truncate(k);
                    (p.da.act.0, s)
                })
                .collect();
            keys.sort();
            keys.dedup();
            assert_eq!(lm.num_classes(), keys.len(), "k={k}");
            assert!(lm.num_classes() >= prev);
            prev = lm.num_classes();
            let total: usize = lm.levels[k].values().map(|c| c.utterances).sum();
            assert_eq!(total, train.len());
        }
        assert_eq!(train_class_ngram(&train, 0, 3).unwrap().num_classes(), 1);
        assert!(train_class_ngram(&train, 4, 3).is_err());
        assert!(train_class_ngram(&train, 1, 6).is_err());
    }

    #[test]
    fn single_utterance_regenerates_greedily() {
        let o = Ontology::restaurant();
        let train = vec![prep(&o, "inform(name=nopa,food=thai)", "nopa is a lovely place serving thai food .")];
        let lm = train_class_ngram(&train, 2, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (d, _) = lm.sample(&train[0].da, 60, true, &mut rng);
        assert_eq!(d.tokens, train[0].delex.tokens);
    }

    #[test]
    fn backoff_scores_are_finite_and_normalized() {
        let o = Ontology::restaurant();
        let train = vec![
            prep(&o, "inform(name=nopa,food=thai)", "nopa serves thai food ."),
            prep(&o, "request(area)", "which area ?"),
        ];
        let lm = train_class_ngram(&train, 3, 4).unwrap();
        let da = parse_da(&o, "confirm(near=x)").unwrap();
        let odd = DelexUtterance::parse("area food SLOT_NAME ? ? never seen");
        assert!(lm.nll(&da, &odd).is_finite());
        let counts = lm.class_for(&da);
        for h in [vec![0u32], vec![0, 3, 4], vec![5, 5, 5]] {
            let p = lm.distribution(counts, &h);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(p[0], 0.0);
            assert!(p[1..].iter().all(|x| *x > 0.0));
        }
        assert_eq!(lm.class_for(&da).utterances, 2);
        let r = parse_da(&o, "request(area)").unwrap();
        assert_eq!(lm.class_for(&r).utterances, 1);
    }

    #[test]
    fn stupid_backoff_by_hand() {
        let o = Ontology::restaurant();
        let train = vec![prep(&o, "goodbye()", "a b ."), prep(&o, "goodbye()", "a c .")];
        let lm = train_class_ngram(&train, 0, 3).unwrap();
        // vocab: BOS EOS . a b c
        assert_eq!(lm.vocab, vec!["BOS", "EOS", ".", "a", "b", "c"]);
        let counts = lm.class_for(&train[0].da);
        // after "BOS a": trigram counts b:1 c:1; others back off to bigram
        // after "a" (b:1 c:1) -> 0.4 * unigram level
        let p = lm.distribution(counts, &[0, 3]);
        let v = 6.0;
        let uni_total = 8.0; // a a b c . . EOS EOS
        let uni = |c: f64| if c > 0.0 { c / uni_total } else { 0.4 / v };
        let raw = [0.0, 0.4 * 0.4 * uni(2.0), 0.4 * 0.4 * uni(2.0), 0.4 * 0.4 * uni(2.0), 0.5, 0.5];
        let z: f64 = raw.iter().sum();
        for i in 0..6 {
            assert!((p[i] - raw[i] / z).abs() < 1e-12, "{i}: {} vs {}", p[i], raw[i] / z);
        }
    }

    #[test]
    fn ngram_generation_is_reproducible_and_err_dominates() {
        let o = Ontology::restaurant();
        let train = vec![
            prep(&o, "inform(name=nopa,food=thai)", "nopa serves thai food ."),
            prep(&o, "inform(name=nopa,area=soma)", "nopa is in soma ."),
        ];
        let lm = train_class_ngram(&train, 1, 3).unwrap();
        let da = parse_da(&o, "inform(name=kokkari,food=greek)").unwrap();
        let cfg = NgramConfig { beam: 1, seed: 9, ..NgramConfig::default() };
        assert_eq!(ngram_generate(&o, &lm, &da, &cfg), ngram_generate(&o, &lm, &da, &cfg));
        let cfg = NgramConfig { beam: 50, ..cfg };
        let ranked = ngram_candidates(&o, &lm, &da, &cfg);
        for w in ranked.windows(2) {
            assert!(w[0].score >= w[1].score);
            if w[0].err < w[1].err && (w[1].nll - w[0].nll).abs() < 100.0 {
                assert!(w[0].score > w[1].score);
            }
        }
        let first_bad = ranked.iter().position(|c| c.err > 0).unwrap_or(ranked.len());
        assert!(ranked[first_bad..].iter().all(|c| c.err > 0));
    }

    #[test]
    fn ngram_model_json_round_trip() {
        let o = Ontology::restaurant();
        let train = vec![
            prep(&o, "inform(name=nopa,food=thai)", "nopa serves thai food ."),
            prep(&o, "request(area)", "which area ?"),
        ];
        let lm = train_class_ngram(&train, 2, 5).unwrap();
        let back = NgramClassLm::from_json(&lm.to_json()).unwrap();
        assert_eq!(back, lm);
        assert!(NgramClassLm::from_json("{}").is_err());
    }

    #[test]
    fn handcrafted_covers_every_act() {
        let o = Ontology::restaurant();
        let h = Handcrafted::restaurant();
        h.validate(&o).unwrap();
        let da = parse_da(&o, "inform(name=nopa,food=thai,kidsallowed=yes,area=dontcare)").unwrap();
        let g = h.generate(&o, &da);
        assert_eq!(g.surface, "nopa is a restaurant with food thai , any area , kids allowed .");
        assert_eq!(g.err, 0);
        let g = h.generate(&o, &parse_da(&o, "request(pricerange)").unwrap());
        assert_eq!(g.surface, "please specify price range .");
        assert_eq!(g.err, 0);
    }
}
