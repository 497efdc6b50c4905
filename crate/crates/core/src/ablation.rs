//! Component ablations: gate decay, classifier reranking, backward
//! reranking and training-set size, all scored without the slot-error
//! penalty unless the grid says otherwise.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{
    generate_corpus, prepare, read_corpus, split, upsample, CorpusError, CorpusGenerator, CorpusSplit, Prepared,
    TemplatePack,
};
use crate::decoder::{overgenerate, rank, score, select_index, selection_rng, Candidate, DecodeConfig, RankWeights};
use crate::evaluation::{build_references, is_hard, mean_std, BleuError, BleuStats};
use crate::model::ModelBundle;
use crate::ontology::{canonicalize_da, Category, DialogueAct, Ontology, SlotId};
use crate::train::{train_system, ConfigError, PipelineError, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationGrid {
    pub seeds: Vec<u64>,
    /// JSONL corpus; a synthetic one is generated when absent.
    pub corpus: Option<PathBuf>,
    pub corpus_size: usize,
    pub corpus_seed: u64,
    pub decays: Vec<f64>,
    /// Decay of the models used by the classifier, backward and size figures.
    pub base_decay: f64,
    pub fractions: Vec<f64>,
    pub gate_beams: Vec<usize>,
    pub gate_top_n: usize,
    pub top_ns: Vec<usize>,
    pub beam: usize,
    pub lambda: f64,
    pub train: TrainConfig,
}

impl Default for AblationGrid {
    fn default() -> Self {
        AblationGrid {
            seeds: (1..=10).collect(),
            corpus: None,
            corpus_size: 2000,
            corpus_seed: 1,
            decays: vec![1.0, 0.7, 0.0],
            base_decay: 0.0,
            fractions: vec![0.25, 0.5, 0.75, 1.0],
            gate_beams: vec![1, 5, 10, 20, 50, 100],
            gate_top_n: 5,
            top_ns: vec![1, 5, 10],
            beam: 100,
            lambda: 0.0,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum AblationError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid grid {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid grid: {0}")]
    Invalid(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Train(#[from] PipelineError),
    #[error(transparent)]
    Bleu(#[from] BleuError),
}

impl AblationError {
    pub fn is_divergence(&self) -> bool {
        matches!(self, AblationError::Train(e) if e.is_divergence())
    }
}

impl AblationGrid {
    pub fn load(path: &Path) -> Result<Self, AblationError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| AblationError::Io { path: path.display().to_string(), source })?;
        let grid: AblationGrid = toml::from_str(&text)
            .map_err(|e| AblationError::Parse { path: path.display().to_string(), message: e.to_string() })?;
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<(), AblationError> {
        let bad = |m: &str| Err(AblationError::Invalid(m.to_string()));
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        if self.decays.iter().chain([&self.base_decay]).any(|d| !(0.0..=1.0).contains(d)) {
            return bad("decays must lie in [0, 1]");
        }
        if self.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return bad("fractions must lie in (0, 1]");
        }
        if self.beam == 0 || self.gate_beams.contains(&0) || self.top_ns.contains(&0) || self.gate_top_n == 0 {
            return bad("beams and top_n values must be positive");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be non-negative");
        }
        self.train.validate().map_err(|e: ConfigError| AblationError::Invalid(e.to_string()))
    }
}

/// Trains models on demand and keeps them, keyed by decay, training
/// fraction and seed.
pub struct ModelCache {
    ont: Ontology,
    split: CorpusSplit<Prepared>,
    base: TrainConfig,
    models: HashMap<(u64, u64, u64), ModelBundle>,
}

impl ModelCache {
    pub fn new(ont: &Ontology, split: CorpusSplit<Prepared>, base: TrainConfig) -> Self {
        ModelCache { ont: ont.clone(), split, base, models: HashMap::new() }
    }

    pub fn split(&self) -> &CorpusSplit<Prepared> {
        &self.split
    }

    /// The leading `fraction` of the (already shuffled) training split.
    pub fn train_subset(&self, fraction: f64) -> &[Prepared] {
        let n = ((self.split.train.len() as f64 * fraction).round() as usize).clamp(1, self.split.train.len());
        &self.split.train[..n]
    }

    pub fn get(&mut self, decay: f64, fraction: f64, seed: u64) -> Result<&ModelBundle, PipelineError> {
        let key = (decay.to_bits(), fraction.to_bits(), seed);
        if !self.models.contains_key(&key) {
            let cfg = TrainConfig { decay, seed, ..self.base.clone() };
            let up = upsample(self.train_subset(fraction));
            let (bundle, _) = train_system(&self.ont, &up, &self.split.valid, &cfg, None)?;
            self.models.insert(key, bundle);
        }
        Ok(&self.models[&key])
    }
}

/// Checks dontcare/yes/no realizations against the phrases that express them.
#[derive(Debug, Clone)]
pub struct SpecialPhrases {
    phrases: BTreeMap<(SlotId, Category), Vec<Vec<String>>>,
}

impl SpecialPhrases {
    pub fn new(phrases: BTreeMap<(SlotId, Category), Vec<Vec<String>>>) -> Self {
        SpecialPhrases { phrases }
    }

    pub fn from_pack(ont: &Ontology, pack: &TemplatePack) -> Result<Self, CorpusError> {
        Ok(Self::new(CorpusGenerator::new(ont, pack)?.special_phrases()))
    }

    /// Special pairs that are required but unrealized, plus realized ones
    /// the act does not contain.
    pub fn mismatches(&self, tokens: &[String], da: &DialogueAct) -> usize {
        self.phrases
            .iter()
            .filter(|((slot, cat), variants)| {
                let required = da.pairs.iter().any(|(s, v)| s == slot && v.category() == *cat);
                let present = variants
                    .iter()
                    .any(|v| !v.is_empty() && tokens.windows(v.len()).any(|w| w == v.as_slice()));
                required != present
            })
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Figure {
    Gate,
    Cnn,
    Backward,
    Size,
}

impl Figure {
    pub fn name(self) -> &'static str {
        match self {
            Figure::Gate => "gate",
            Figure::Cnn => "cnn",
            Figure::Backward => "backward",
            Figure::Size => "size",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    All,
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationCell {
    pub figure: Figure,
    pub decay: f64,
    pub fraction: f64,
    pub beam: usize,
    pub top_n: usize,
    pub use_cnn: bool,
    pub use_backward: bool,
    pub subset: Subset,
    pub examples: usize,
    pub bleu: f64,
    pub bleu_std: f64,
    /// Seed-mean total slot error, in expectation over the uniform top-n
    /// draw (one draw per act is too noisy to compare cells at top 5/10).
    pub err: f64,
    /// Seed-mean total of dontcare/yes/no mismatches, same expectation.
    pub special_err: f64,
    /// The same two totals for the outputs actually drawn.
    pub err_drawn: f64,
    pub special_err_drawn: f64,
    pub per_seed_bleu: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub lambda: f64,
    pub cells: Vec<AblationCell>,
}

#[derive(Debug, Clone, Copy)]
struct Variant {
    figure: Figure,
    beam: usize,
    top_n: usize,
    use_cnn: bool,
    use_backward: bool,
    subset: Subset,
}

/// Candidate pools for one model and seed, scored by every available
/// model so that scoring variants only re-rank.
fn scored_pools(b: &ModelBundle, test: &[Prepared], beam: usize, seed: u64) -> Vec<Vec<Candidate>> {
    let m = b.models();
    let cfg = DecodeConfig { beam, seed, ..DecodeConfig::default() };
    test.iter()
        .map(|p| {
            let mut c = overgenerate(&m, &p.da, &cfg);
            score(&m, &mut c, &p.da, None);
            c
        })
        .collect()
}

/// Picks the output of one scoring variant from a scored pool.
pub fn pick(pool: &[Candidate], da: &DialogueAct, beam: usize, w: RankWeights, top_n: usize, seed: u64) -> Candidate {
    let mut cands = ranked_prefix(pool, beam, w);
    let i = select_index(cands.len(), top_n, &mut selection_rng(seed, da));
    cands.swap_remove(i)
}

/// The pool restricted to the first `beam` samples, ranked under `w`.
pub fn ranked_prefix(pool: &[Candidate], beam: usize, w: RankWeights) -> Vec<Candidate> {
    let mut cands: Vec<Candidate> = pool.iter().filter(|c| c.first_sample < beam).cloned().collect();
    rank(&mut cands, w);
    cands
}

struct Tally {
    bleu: Vec<f64>,
    err: Vec<f64>,
    special: Vec<f64>,
    err_drawn: Vec<f64>,
    special_drawn: Vec<f64>,
    examples: usize,
}

pub fn run_ablation(ont: &Ontology, grid: &AblationGrid) -> Result<AblationReport, AblationError> {
    grid.validate()?;
    let pack = TemplatePack::restaurant();
    let corpus = match &grid.corpus {
        Some(path) => read_corpus(path)?,
        None => generate_corpus(ont, &pack, grid.corpus_size, grid.corpus_seed)?,
    };
    let (prepared, _) = prepare(ont, &corpus)?;
    let special = SpecialPhrases::from_pack(ont, &pack)?;
    let mut cache = ModelCache::new(ont, split(&prepared, grid.corpus_seed), grid.train.clone());
    run_ablation_with(ont, grid, &prepared, &special, &mut cache)
}

/// Runs every figure of `grid` on models drawn from `cache`. `corpus` is
/// the full corpus the references are merged from.
pub fn run_ablation_with(
    ont: &Ontology,
    grid: &AblationGrid,
    corpus: &[Prepared],
    special: &SpecialPhrases,
    cache: &mut ModelCache,
) -> Result<AblationReport, AblationError> {
    grid.validate()?;
    let test = cache.split().test.clone();
    let (refs, _) = build_references(ont, corpus, &test);
    let hard: Vec<bool> = test.iter().map(|p| is_hard(&p.da)).collect();

    // (decay, fraction) → variants evaluated on that model
    let mut plan: Vec<((f64, f64), Vec<Variant>)> = Vec::new();
    let mut add = |key: (f64, f64), v: Variant| match plan.iter_mut().find(|(k, _)| *k == key) {
        Some((_, list)) => list.push(v),
        None => plan.push((key, vec![v])),
    };
    let v = |figure, beam, top_n, use_cnn, use_backward, subset| Variant { figure, beam, top_n, use_cnn, use_backward, subset };
    for &d in &grid.decays {
        for &b in &grid.gate_beams {
            add((d, 1.0), v(Figure::Gate, b, grid.gate_top_n, false, false, Subset::All));
        }
    }
    let base = (grid.base_decay, 1.0);
    for subset in [Subset::All, Subset::Hard] {
        for &n in &grid.top_ns {
            for cnn in [false, true] {
                add(base, v(Figure::Cnn, grid.beam, n, cnn, false, subset));
            }
        }
    }
    for &n in &grid.top_ns {
        for bwd in [false, true] {
            add(base, v(Figure::Backward, grid.beam, n, true, bwd, Subset::All));
        }
    }
    for &f in &grid.fractions {
        for &n in &grid.top_ns {
            add((grid.base_decay, f), v(Figure::Size, grid.beam, n, true, true, Subset::All));
        }
    }

    let mut cells = Vec::new();
    for ((decay, fraction), variants) in plan {
        let max_beam = variants.iter().map(|v| v.beam).max().unwrap_or(grid.beam);
        let mut tallies: Vec<Tally> = variants
            .iter()
            .map(|_| Tally {
                bleu: Vec::new(),
                err: Vec::new(),
                special: Vec::new(),
                err_drawn: Vec::new(),
                special_drawn: Vec::new(),
                examples: 0,
            })
            .collect();
        for &seed in &grid.seeds {
            let bundle = cache.get(decay, fraction, seed)?;
            let pools = scored_pools(bundle, &test, max_beam, seed);
            for (var, tally) in variants.iter().zip(tallies.iter_mut()) {
                let w = RankWeights { use_backward: var.use_backward, use_cnn: var.use_cnn, lambda: grid.lambda };
                let mut stats = BleuStats::default();
                let (mut err, mut sp, mut n) = (0usize, 0usize, 0usize);
                let (mut err_exp, mut sp_exp) = (0.0, 0.0);
                for (i, p) in test.iter().enumerate() {
                    if var.subset == Subset::Hard && !hard[i] {
                        continue;
                    }
                    let da = canonicalize_da(&p.da);
                    let mut ranked = ranked_prefix(&pools[i], var.beam, w);
                    let k = var.top_n.clamp(1, ranked.len());
                    for c in &ranked[..k] {
                        err_exp += c.err as f64 / k as f64;
                        sp_exp += special.mismatches(&bundle.vocab.decode(&c.tokens), &p.da) as f64 / k as f64;
                    }
                    let c = ranked.swap_remove(select_index(ranked.len(), var.top_n, &mut selection_rng(seed, &da)));
                    stats.add(&crate::delex::tokenize(&c.surface), &refs[i]);
                    err += c.err;
                    sp += special.mismatches(&bundle.vocab.decode(&c.tokens), &p.da);
                    n += 1;
                }
                if n == 0 {
                    return Err(AblationError::Bleu(BleuError::Empty));
                }
                tally.bleu.push(stats.score());
                tally.err.push(err_exp);
                tally.special.push(sp_exp);
                tally.err_drawn.push(err as f64);
                tally.special_drawn.push(sp as f64);
                tally.examples = n;
            }
        }
        for (var, t) in variants.iter().zip(tallies) {
            let (bleu, bleu_std) = mean_std(&t.bleu);
            cells.push(AblationCell {
                figure: var.figure,
                decay,
                fraction,
                beam: var.beam,
                top_n: var.top_n,
                use_cnn: var.use_cnn,
                use_backward: var.use_backward,
                subset: var.subset,
                examples: t.examples,
                bleu,
                bleu_std,
                err: mean_std(&t.err).0,
                special_err: mean_std(&t.special).0,
                err_drawn: mean_std(&t.err_drawn).0,
                special_err_drawn: mean_std(&t.special_drawn).0,
                per_seed_bleu: t.bleu,
            });
        }
    }
    cells.sort_by(|a, b| a.figure.cmp(&b.figure));
    Ok(AblationReport { seeds: grid.seeds.clone(), lambda: grid.lambda, cells })
}

impl AblationReport {
    pub fn find(&self, figure: Figure, pred: impl Fn(&AblationCell) -> bool) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.figure == figure && pred(c))
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(
            "figure\tdecay\tfraction\tbeam\ttop_n\tcnn\tbackward\tsubset\texamples\tbleu\tbleu_std\terr\tspecial_err\terr_drawn\tspecial_err_drawn\n",
        );
        for c in &self.cells {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:.4}\t{:.4}\t{:.2}\t{:.2}\t{:.2}\t{:.2}",
                c.figure.name(),
                c.decay,
                c.fraction,
                c.beam,
                c.top_n,
                if c.use_cnn { "on" } else { "off" },
                if c.use_backward { "on" } else { "off" },
                if c.subset == Subset::Hard { "hard" } else { "all" },
                c.examples,
                c.bleu,
                c.bleu_std,
                c.err,
                c.special_err,
                c.err_drawn,
                c.special_err_drawn
            );
        }
        out
    }

    /// Plot-ready series per figure: `series,x,bleu,bleu_std,err`.
    pub fn to_csv(&self) -> BTreeMap<&'static str, String> {
        let mut out: BTreeMap<&'static str, String> = BTreeMap::new();
        for c in &self.cells {
            let (series, x) = match c.figure {
                Figure::Gate => (format!("delta={}", c.decay), c.beam.to_string()),
                Figure::Cnn => (
                    format!("{}-{}", if c.subset == Subset::Hard { "hard" } else { "all" }, if c.use_cnn { "cnn" } else { "no-cnn" }),
                    c.top_n.to_string(),
                ),
                Figure::Backward => (
                    if c.use_backward { "backward".to_string() } else { "no-backward".to_string() },
                    c.top_n.to_string(),
                ),
                Figure::Size => (format!("top-{}", c.top_n), c.fraction.to_string()),
            };
            let s = out.entry(c.figure.name()).or_insert_with(|| "series,x,bleu,bleu_std,err,special_err\n".to_string());
            let _ = writeln!(s, "{series},{x},{:.6},{:.6},{:.4},{:.4}", c.bleu, c.bleu_std, c.err, c.special_err);
        }
        out
    }
}
