//! Multi-reference BLEU-4, slot error totals and per-system reports.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::Serialize;
use thiserror::Error;

use crate::baselines::Generated;
use crate::corpus::Prepared;
use crate::delex::{relexicalize_lossy, tokenize};
use crate::ontology::{DaKey, DialogueAct, Ontology};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BleuError {
    #[error("no hypotheses to score")]
    Empty,
    #[error("{hyps} hypotheses but {refs} reference sets")]
    Misaligned { hyps: usize, refs: usize },
    #[error("hypothesis {index} has no references")]
    NoReferences { index: usize },
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Per-order (clipped matches, hypothesis n-grams) plus the hypothesis
/// and effective reference lengths.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BleuStats {
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn add(&mut self, hyp: &[String], refs: &[Vec<String>]) {
        for n in 1..=4 {
            let h = ngrams(hyp, n);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in refs {
                for (g, c) in ngrams(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            self.matches[n - 1] += h.iter().map(|(g, c)| (*c).min(max_ref.get(g).copied().unwrap_or(0))).sum::<usize>();
            self.totals[n - 1] += hyp.len().saturating_sub(n - 1);
        }
        self.hyp_len += hyp.len();
        // closest reference length, shorter on ties
        self.ref_len += refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(hyp.len()), l))
            .unwrap_or(0);
    }

    pub fn score(&self) -> f64 {
        if self.hyp_len == 0 || self.matches.contains(&0) {
            return 0.0;
        }
        let log_p: f64 = (0..4).map(|i| (self.matches[i] as f64 / self.totals[i] as f64).ln()).sum::<f64>() / 4.0;
        let bp = if self.hyp_len > self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        };
        bp * log_p.exp()
    }
}

/// Corpus-level BLEU-4 against per-hypothesis reference sets.
pub fn bleu4(hyps: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> Result<f64, BleuError> {
    if hyps.is_empty() {
        return Err(BleuError::Empty);
    }
    if hyps.len() != refs.len() {
        return Err(BleuError::Misaligned { hyps: hyps.len(), refs: refs.len() });
    }
    let mut stats = BleuStats::default();
    for (i, (h, r)) in hyps.iter().zip(refs).enumerate() {
        if r.is_empty() {
            return Err(BleuError::NoReferences { index: i });
        }
        stats.add(h, r);
    }
    Ok(stats.score())
}

/// Distinct delexicalized templates per act key, in corpus order.
#[derive(Debug, Clone, Default)]
pub struct ReferenceSet {
    templates: HashMap<DaKey, Vec<Vec<String>>>,
}

impl ReferenceSet {
    pub fn build(corpus: &[Prepared]) -> Self {
        let mut templates: HashMap<DaKey, Vec<Vec<String>>> = HashMap::new();
        for p in corpus {
            let list = templates.entry(p.da.key()).or_default();
            if !list.contains(&p.delex.tokens) {
                list.push(p.delex.tokens.clone());
            }
        }
        ReferenceSet { templates }
    }

    pub fn templates(&self, key: &DaKey) -> Option<&[Vec<String>]> {
        self.templates.get(key).map(Vec::as_slice)
    }

    /// Templates for `da`'s key, lexicalized with its values and tokenized.
    pub fn lexicalized(&self, ont: &Ontology, da: &DialogueAct) -> Option<Vec<Vec<String>>> {
        let list = self.templates.get(&da.key())?;
        let mut out: Vec<Vec<String>> = Vec::with_capacity(list.len());
        for t in list {
            let words = tokenize(&relexicalize_lossy(ont, t, da).0);
            if !out.contains(&words) {
                out.push(words);
            }
        }
        Some(out)
    }
}

/// Reference lists for each test example, built from the whole corpus.
/// Examples whose key is absent fall back to their own text (with a warning).
pub fn build_references(ont: &Ontology, corpus: &[Prepared], test: &[Prepared]) -> (Vec<Vec<Vec<String>>>, Vec<String>) {
    let set = ReferenceSet::build(corpus);
    let mut warnings = Vec::new();
    let refs = test
        .iter()
        .map(|p| {
            set.lexicalized(ont, &p.da).unwrap_or_else(|| {
                warnings.push(format!("no corpus templates for {}; using the paired text", p.da.render(ont)));
                vec![tokenize(&p.text)]
            })
        })
        .collect();
    (refs, warnings)
}

/// Acts with at least one dontcare/yes/no pair.
pub fn is_hard(da: &DialogueAct) -> bool {
    da.has_special_value()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedScore {
    pub seed: u64,
    pub bleu: f64,
    pub err: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActScore {
    pub count: usize,
    /// Seed-mean BLEU over this act type's examples.
    pub bleu: f64,
    /// Seed-mean total slot error.
    pub err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub system: String,
    pub seeds: Vec<u64>,
    pub examples: usize,
    pub bleu: f64,
    pub bleu_std: f64,
    /// Seed-mean of the total slot error over the test set.
    pub err: f64,
    pub per_seed: Vec<SeedScore>,
    pub per_act: BTreeMap<String, ActScore>,
    /// Distinct outputs over all seeds and examples.
    pub distinct_outputs: usize,
    pub config: serde_json::Value,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64;
    (m, var.sqrt())
}

/// Runs `generate(seed, da)` over the test set once per seed.
pub fn evaluate_system<F>(
    ont: &Ontology,
    system: &str,
    config: serde_json::Value,
    test: &[Prepared],
    refs: &[Vec<Vec<String>>],
    seeds: &[u64],
    mut generate: F,
) -> Result<EvalReport, BleuError>
where
    F: FnMut(u64, &DialogueAct) -> Generated,
{
    if test.is_empty() || seeds.is_empty() {
        return Err(BleuError::Empty);
    }
    if test.len() != refs.len() {
        return Err(BleuError::Misaligned { hyps: test.len(), refs: refs.len() });
    }
    let mut per_seed = Vec::with_capacity(seeds.len());
    let mut act_stats: BTreeMap<String, (usize, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut distinct = HashSet::new();
    for &seed in seeds {
        let mut hyps = Vec::with_capacity(test.len());
        let mut by_act: BTreeMap<String, (BleuStats, usize, usize)> = BTreeMap::new();
        let mut err = 0;
        for (p, r) in test.iter().zip(refs) {
            let g = generate(seed, &p.da);
            let words = tokenize(&g.surface);
            let entry = by_act.entry(ont.act_name(p.da.act).to_string()).or_default();
            if r.is_empty() {
                return Err(BleuError::NoReferences { index: hyps.len() });
            }
            entry.0.add(&words, r);
            entry.1 += 1;
            entry.2 += g.err;
            err += g.err;
            distinct.insert(g.surface);
            hyps.push(words);
        }
        let bleu = bleu4(&hyps, refs)?;
        per_seed.push(SeedScore { seed, bleu, err });
        for (act, (stats, count, e)) in by_act {
            let a = act_stats.entry(act).or_insert_with(|| (count, Vec::new(), Vec::new()));
            a.1.push(stats.score());
            a.2.push(e as f64);
        }
    }
    let (bleu, bleu_std) = mean_std(&per_seed.iter().map(|s| s.bleu).collect::<Vec<_>>());
    let (err, _) = mean_std(&per_seed.iter().map(|s| s.err as f64).collect::<Vec<_>>());
    let per_act = act_stats
        .into_iter()
        .map(|(act, (count, b, e))| (act, ActScore { count, bleu: mean_std(&b).0, err: mean_std(&e).0 }))
        .collect();
    Ok(EvalReport {
        system: system.to_string(),
        seeds: seeds.to_vec(),
        examples: test.len(),
        bleu,
        bleu_std,
        err,
        per_seed,
        per_act,
        distinct_outputs: distinct.len(),
        config,
    })
}

/// Tab-separated summary table, one row per report.
pub fn reports_table(reports: &[EvalReport]) -> String {
    let mut out = String::from("system\tbleu\tbleu_std\terr\tdistinct\tseeds\n");
    for r in reports {
        out.push_str(&format!(
            "{}\t{:.4}\t{:.4}\t{:.2}\t{}\t{}\n",
            r.system,
            r.bleu,
            r.bleu_std,
            r.err,
            r.distinct_outputs,
            r.seeds.len()
        ));
    }
    out
}
