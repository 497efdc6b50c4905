//! Synthetic corpus generation, corpus files and train/valid/test splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::slot_error;
use crate::delex::{delexicalize, normalize, relexicalize, DelexUtterance};
use crate::ontology::{
    canonicalize_da, parse_da, ActType, Category, DaKey, DialogueAct, Ontology, ParseError, SlotId, SlotValue,
};

const RESTAURANT_PACK: &str = include_str!("../data/restaurant_templates.json");
const MAX_VALUE_RESAMPLES: usize = 50;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Format { path: String, line: usize, message: String },
    #[error("{path}:{line}: {source}")]
    Act { path: String, line: usize, source: ParseError },
    #[error("template pack: {0}")]
    Pack(String),
    #[error("could not realize {da} without value collisions")]
    Collision { da: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameMode {
    /// Required slots plus a list of optional slot phrases.
    List,
    /// One slot offered with two categories.
    Alternatives,
    /// A single unvalued slot, realized by its question.
    Request,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActTemplates {
    pub weight: u32,
    pub mode: FrameMode,
    pub style: String,
    pub joiner: String,
    pub required: Vec<String>,
    pub optional: Vec<String>,
    pub min_optional: usize,
    pub max_optional: usize,
    pub dontcare_rate: f64,
    pub frames: Vec<String>,
}

/// Per-act frames, per-style slot phrases and value lists.
///
/// A frame is a delexicalized token string in which `{slots}` expands to
/// the act's optional slot phrases in ontology order. `describe` and
/// `constraint` styles map slot → category → phrase variants; the
/// `request` style maps slot → question variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplatePack {
    pub values: BTreeMap<String, Vec<String>>,
    pub phrases: BTreeMap<String, serde_json::Value>,
    pub acts: BTreeMap<String, ActTemplates>,
}

#[derive(Debug, Clone)]
struct ActPlan {
    act: ActType,
    weight: u32,
    mode: FrameMode,
    joiner: String,
    required: Vec<SlotId>,
    optional: Vec<SlotId>,
    min_optional: usize,
    max_optional: usize,
    dontcare_rate: f64,
    frames: Vec<String>,
    /// slot → category → variants
    phrases: BTreeMap<(SlotId, Category), Vec<String>>,
}

/// A validated template pack bound to an ontology.
#[derive(Debug, Clone)]
pub struct CorpusGenerator {
    plans: Vec<ActPlan>,
    values: BTreeMap<SlotId, Vec<String>>,
}

impl TemplatePack {
    pub fn restaurant() -> Self {
        serde_json::from_str(RESTAURANT_PACK).expect("bundled template pack is valid")
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|e| CorpusError::Pack(e.to_string()))
    }
}

fn frame_slot_tokens(ont: &Ontology, frame: &str) -> Vec<SlotId> {
    frame.split_whitespace().filter_map(|t| ont.slot_for_token(t)).collect()
}

impl CorpusGenerator {
    pub fn new(ont: &Ontology, pack: &TemplatePack) -> Result<Self, CorpusError> {
        let err = |m: String| CorpusError::Pack(m);
        let slot = |name: &str| ont.slot(name).ok_or_else(|| err(format!("unknown slot `{name}`")));
        let mut values = BTreeMap::new();
        for (name, list) in &pack.values {
            let s = slot(name)?;
            if list.is_empty() || list.iter().any(|v| normalize(v).is_empty()) {
                return Err(err(format!("empty value list or value for `{name}`")));
            }
            values.insert(s, list.iter().map(|v| normalize(v)).collect());
        }
        let mut plans = Vec::new();
        for (name, t) in &pack.acts {
            let act = ont.act(name).ok_or_else(|| err(format!("unknown act `{name}`")))?;
            let required = t.required.iter().map(|s| slot(s)).collect::<Result<Vec<_>, _>>()?;
            let mut optional = t.optional.iter().map(|s| slot(s)).collect::<Result<Vec<_>, _>>()?;
            optional.sort();
            if t.frames.is_empty() {
                return Err(err(format!("act `{name}` has no frames")));
            }
            if t.min_optional > t.max_optional || t.max_optional > optional.len() {
                return Err(err(format!("act `{name}` has an inconsistent optional-slot range")));
            }
            if !(0.0..=1.0).contains(&t.dontcare_rate) {
                return Err(err(format!("act `{name}` has a dontcare rate outside [0, 1]")));
            }
            for frame in &t.frames {
                for s in frame_slot_tokens(ont, frame) {
                    if !required.contains(&s) {
                        return Err(err(format!(
                            "frame `{frame}` of `{name}` uses slot `{}` outside its required slots",
                            ont.slot_name(s)
                        )));
                    }
                }
            }
            let style = pack
                .phrases
                .get(&t.style)
                .ok_or_else(|| err(format!("act `{name}` uses unknown style `{}`", t.style)))?;
            let mut phrases = BTreeMap::new();
            for &s in &optional {
                let entry = style.get(ont.slot_name(s)).ok_or_else(|| {
                    err(format!("style `{}` has no phrases for slot `{}`", t.style, ont.slot_name(s)))
                })?;
                let parsed: Vec<(Category, Vec<String>)> = match t.mode {
                    FrameMode::Request => {
                        let list: Vec<String> = serde_json::from_value(entry.clone()).map_err(|e| err(e.to_string()))?;
                        vec![(Category::Value, list)]
                    }
                    _ => {
                        let map: BTreeMap<String, Vec<String>> =
                            serde_json::from_value(entry.clone()).map_err(|e| err(e.to_string()))?;
                        map.into_iter()
                            .map(|(c, l)| {
                                Category::from_name(&c)
                                    .map(|c| (c, l))
                                    .ok_or_else(|| err(format!("unknown category `{c}`")))
                            })
                            .collect::<Result<_, _>>()?
                    }
                };
                for (cat, list) in parsed {
                    if list.is_empty() {
                        return Err(err(format!("no phrases for `{}`", ont.slot_name(s))));
                    }
                    for p in &list {
                        for used in frame_slot_tokens(ont, p) {
                            if used != s || cat != Category::Value || t.mode == FrameMode::Request {
                                return Err(err(format!("phrase `{p}` may not contain `{}`", ont.slot_name(used))));
                            }
                        }
                        if cat == Category::Value && t.mode != FrameMode::Request && ont.slot_token(s).is_some() {
                            let tok = ont.slot_token(s).unwrap();
                            if !p.split_whitespace().any(|w| w == tok) {
                                return Err(err(format!("value phrase `{p}` must contain {tok}")));
                            }
                        }
                    }
                    phrases.insert((s, cat), list);
                }
                if t.mode == FrameMode::Alternatives
                    && !ont.is_binary(s)
                    && !phrases.contains_key(&(s, Category::DontCare))
                {
                    return Err(err(format!("slot `{}` needs dontcare phrases to be offered", ont.slot_name(s))));
                }
                if ont.is_binary(s) && t.mode != FrameMode::Request {
                    for c in [Category::Yes, Category::No] {
                        if !phrases.contains_key(&(s, c)) {
                            return Err(err(format!("binary slot `{}` needs yes and no phrases", ont.slot_name(s))));
                        }
                    }
                } else if !phrases.contains_key(&(s, Category::Value)) {
                    return Err(err(format!("slot `{}` needs value phrases", ont.slot_name(s))));
                }
            }
            for &s in &required {
                if !ont.is_binary(s) && !values.contains_key(&s) {
                    return Err(err(format!("no values for required slot `{}`", ont.slot_name(s))));
                }
            }
            for &s in &optional {
                if t.mode == FrameMode::List && !ont.is_binary(s) && !values.contains_key(&s) {
                    return Err(err(format!("no values for slot `{}`", ont.slot_name(s))));
                }
            }
            plans.push(ActPlan {
                act,
                weight: t.weight,
                mode: t.mode,
                joiner: t.joiner.clone(),
                required,
                optional,
                min_optional: t.min_optional,
                max_optional: t.max_optional,
                dontcare_rate: t.dontcare_rate,
                frames: t.frames.clone(),
                phrases,
            });
        }
        if plans.iter().all(|p| p.weight == 0) {
            return Err(err("all act weights are zero".into()));
        }
        plans.sort_by_key(|p| p.act);
        Ok(CorpusGenerator { plans, values })
    }

    pub fn acts(&self) -> Vec<ActType> {
        self.plans.iter().map(|p| p.act).collect()
    }

    /// Every phrase variant that realizes a dontcare/yes/no pair, tokenized.
    pub fn special_phrases(&self) -> BTreeMap<(SlotId, Category), Vec<Vec<String>>> {
        let mut out: BTreeMap<(SlotId, Category), Vec<Vec<String>>> = BTreeMap::new();
        for plan in &self.plans {
            for ((slot, cat), variants) in &plan.phrases {
                if !cat.is_special() {
                    continue;
                }
                let list = out.entry((*slot, *cat)).or_default();
                for v in variants {
                    let toks: Vec<String> = v.split_whitespace().map(str::to_string).collect();
                    if !list.contains(&toks) {
                        list.push(toks);
                    }
                }
            }
        }
        out
    }

    fn choose_plan<R: Rng + ?Sized>(&self, rng: &mut R) -> &ActPlan {
        let total: u32 = self.plans.iter().map(|p| p.weight).sum();
        let mut u = rng.random_range(0..total);
        for p in &self.plans {
            if u < p.weight {
                return p;
            }
            u -= p.weight;
        }
        unreachable!("weights sum to total")
    }

    /// Draws one (act, delexicalized template) pair with values left unset.
    fn draw_shape<R: Rng + ?Sized>(&self, ont: &Ontology, rng: &mut R) -> (ActType, Vec<(SlotId, Category)>, String) {
        let plan = self.choose_plan(rng);
        let frame = plan.frames.choose(rng).expect("frames are nonempty");
        let mut pairs: Vec<(SlotId, Category)> = plan.required.iter().map(|&s| (s, Category::Value)).collect();
        let n = rng.random_range(plan.min_optional..=plan.max_optional);
        let mut chosen: Vec<SlotId> = plan.optional.choose_multiple(rng, n).copied().collect();
        chosen.sort();
        let mut parts: Vec<String> = Vec::new();
        for &s in &chosen {
            let cats: Vec<Category> = match plan.mode {
                FrameMode::Request => vec![Category::Value],
                FrameMode::Alternatives => {
                    if ont.is_binary(s) {
                        vec![Category::Yes, Category::No]
                    } else {
                        vec![Category::Value, Category::DontCare]
                    }
                }
                FrameMode::List => {
                    if ont.is_binary(s) {
                        vec![if rng.random::<bool>() { Category::Yes } else { Category::No }]
                    } else if plan.phrases.contains_key(&(s, Category::DontCare))
                        && rng.random::<f64>() < plan.dontcare_rate
                    {
                        vec![Category::DontCare]
                    } else {
                        vec![Category::Value]
                    }
                }
            };
            for c in cats {
                let variants = &plan.phrases[&(s, c)];
                parts.push(variants.choose(rng).expect("phrases are nonempty").clone());
                pairs.push((s, c));
            }
        }
        let text = frame.replace("{slots}", &parts.join(&plan.joiner));
        (plan.act, pairs, text)
    }

    fn fill<R: Rng + ?Sized>(
        &self,
        act: ActType,
        shape: &[(SlotId, Category)],
        mode_request: bool,
        rng: &mut R,
    ) -> DialogueAct {
        let mut da = DialogueAct::new(act);
        for &(s, c) in shape {
            let v = match c {
                Category::DontCare => SlotValue::DontCare,
                Category::Yes => SlotValue::Yes,
                Category::No => SlotValue::No,
                Category::Value if mode_request => SlotValue::Unvalued,
                Category::Value => SlotValue::Categorical(self.values[&s].choose(rng).expect("nonempty").clone()),
            };
            da = da.with(s, v);
        }
        canonicalize_da(&da)
    }

    /// One example; values are redrawn until the utterance delexicalizes
    /// back to its own template.
    pub fn sample<R: Rng + ?Sized>(&self, ont: &Ontology, rng: &mut R) -> Result<CorpusExample, CorpusError> {
        let (act, shape, template) = self.draw_shape(ont, rng);
        let is_request = self.plans.iter().any(|p| p.act == act && p.mode == FrameMode::Request);
        let delex = DelexUtterance::parse(&template);
        let mut last = String::new();
        for _ in 0..MAX_VALUE_RESAMPLES {
            let da = self.fill(act, &shape, is_request, rng);
            last = da.render(ont);
            let Ok(text) = relexicalize(ont, &delex.tokens, &da) else { continue };
            if delexicalize(ont, &text, &da).tokens == delex.tokens && slot_error(ont, &delex, &da) == 0 {
                return Ok(CorpusExample { da: last, text });
            }
        }
        Err(CorpusError::Collision { da: last })
    }
}

/// One line of a corpus file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusExample {
    pub da: String,
    pub text: String,
}

/// `count` examples from the pack, reproducible from `seed`.
pub fn generate_corpus(
    ont: &Ontology,
    pack: &TemplatePack,
    count: usize,
    seed: u64,
) -> Result<Vec<CorpusExample>, CorpusError> {
    let gen = CorpusGenerator::new(ont, pack)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| gen.sample(ont, &mut rng)).collect()
}

pub fn write_corpus(path: &Path, corpus: &[CorpusExample]) -> Result<(), CorpusError> {
    let mut out = String::new();
    for ex in corpus {
        out.push_str(&serde_json::to_string(ex).expect("plain strings serialize"));
        out.push('\n');
    }
    crate::model::write_atomic(path, out.as_bytes()).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_corpus(path: &Path) -> Result<Vec<CorpusExample>, CorpusError> {
    let p = path.display().to_string();
    let file = File::open(path).map_err(|source| CorpusError::Io { path: p.clone(), source })?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| CorpusError::Io { path: p.clone(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: CorpusExample = serde_json::from_str(&line).map_err(|e| CorpusError::Format {
            path: p.clone(),
            line: i + 1,
            message: e.to_string(),
        })?;
        if ex.text.trim().is_empty() {
            return Err(CorpusError::Format { path: p.clone(), line: i + 1, message: "empty text".into() });
        }
        out.push(ex);
    }
    Ok(out)
}

/// Writes any serializable rows as JSON lines to `w`.
pub fn write_jsonl<W: Write, T: Serialize>(mut w: W, rows: &[T]) -> std::io::Result<()> {
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// A corpus example with its act parsed and its text delexicalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    pub da: DialogueAct,
    pub text: String,
    pub delex: DelexUtterance,
}

/// Parses and delexicalizes every example. Values missing from their
/// text are returned as warnings.
pub fn prepare(ont: &Ontology, corpus: &[CorpusExample]) -> Result<(Vec<Prepared>, Vec<String>), CorpusError> {
    let mut out = Vec::with_capacity(corpus.len());
    let mut warnings = Vec::new();
    for (i, ex) in corpus.iter().enumerate() {
        let da = canonicalize_da(&parse_da(ont, &ex.da).map_err(|source| CorpusError::Act {
            path: "<corpus>".into(),
            line: i + 1,
            source,
        })?);
        let text = normalize(&ex.text);
        let delex = delexicalize(ont, &text, &da);
        for s in crate::delex::unmatched_values(ont, &delex, &da) {
            warnings.push(format!("example {}: value of `{}` not found in text", i + 1, ont.slot_name(s)));
        }
        out.push(Prepared { da, text, delex });
    }
    Ok((out, warnings))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit<T> {
    pub train: Vec<T>,
    pub valid: Vec<T>,
    pub test: Vec<T>,
}

/// Seeded shuffle into 3:1:1 train/valid/test.
pub fn split<T: Clone>(corpus: &[T], seed: u64) -> CorpusSplit<T> {
    let mut idx: Vec<usize> = (0..corpus.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_valid = corpus.len() / 5;
    let n_test = corpus.len() / 5;
    let n_train = corpus.len() - n_valid - n_test;
    let pick = |r: &[usize]| r.iter().map(|&i| corpus[i].clone()).collect::<Vec<T>>();
    CorpusSplit {
        train: pick(&idx[..n_train]),
        valid: pick(&idx[n_train..n_train + n_valid]),
        test: pick(&idx[n_train + n_valid..]),
    }
}

pub const MAX_REPLICATION: usize = 10;

/// Replicates each act type's examples (cycling in order) until its count
/// reaches the largest act-type count, at most ×[`MAX_REPLICATION`].
pub fn upsample(train: &[Prepared]) -> Vec<Prepared> {
    let mut by_act: BTreeMap<ActType, Vec<&Prepared>> = BTreeMap::new();
    for ex in train {
        by_act.entry(ex.da.act).or_default().push(ex);
    }
    let max = by_act.values().map(Vec::len).max().unwrap_or(0);
    let mut out: Vec<Prepared> = train.to_vec();
    for group in by_act.values() {
        let target = max.min(group.len() * MAX_REPLICATION);
        out.extend(group.iter().cycle().skip(group.len()).take(target - group.len()).map(|e| (*e).clone()));
    }
    out
}

/// Split, then up-sample the training part only.
pub fn prepare_splits(prepared: &[Prepared], seed: u64) -> (CorpusSplit<Prepared>, Vec<Prepared>) {
    let s = split(prepared, seed);
    let up = upsample(&s.train);
    (s, up)
}

/// Distinct act keys in a corpus.
pub fn distinct_keys(prepared: &[Prepared]) -> BTreeSet<DaKey> {
    prepared.iter().map(|p| p.da.key()).collect()
}
