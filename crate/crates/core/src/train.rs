//! Training configuration and the three-stage training pipeline.
//!
//! The forward generator is trained first and owns the embedding updates;
//! the backward language model and the classifier are then fitted on top
//! of the same, now fixed, embedding table.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cnn::CnnModel;
use crate::corpus::Prepared;
use crate::delex::{build_vocab, DelexUtterance, Vocabulary};
use crate::generator::{Direction, RnnLm, SeqExample};
use crate::model::ModelBundle;
use crate::neural::{EmbeddingTable, OptimConfig, TrainError, TrainLog};
use crate::ontology::{encode_control, Ontology};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub embed_size: usize,
    pub hidden_size: usize,
    pub cnn_hidden: usize,
    pub cnn_widths: Vec<usize>,
    pub init_range: f64,
    /// Gate decay δ for both recurrent models.
    pub decay: f64,
    pub learning_rate: f64,
    pub l2_coeff: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_improvement: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            embed_size: 50,
            hidden_size: 80,
            cnn_hidden: 100,
            cnn_widths: vec![1, 2, 3, 4],
            init_range: 0.1,
            decay: 0.0,
            learning_rate: 0.1,
            l2_coeff: 1e-7,
            max_epochs: 50,
            patience: 2,
            min_improvement: 0.005,
            seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid config {path}: {message}")]
    Parse { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let cfg: TrainConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.embed_size == 0 || self.hidden_size == 0 || self.cnn_hidden == 0 {
            return bad("layer sizes must be positive");
        }
        if self.cnn_widths.is_empty() || self.cnn_widths.contains(&0) {
            return bad("cnn_widths must be a nonempty list of positive widths");
        }
        if !(0.0..=1.0).contains(&self.decay) {
            return bad("decay must lie in [0, 1]");
        }
        if !(self.learning_rate > 0.0) || !(self.l2_coeff >= 0.0) || !(self.init_range >= 0.0) {
            return bad("learning_rate must be positive; l2_coeff and init_range non-negative");
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return bad("max_epochs and patience must be positive");
        }
        Ok(())
    }

    pub fn optim(&self, update_embeddings: bool) -> OptimConfig {
        OptimConfig {
            learning_rate: self.learning_rate,
            l2_coeff: self.l2_coeff,
            max_epochs: self.max_epochs,
            patience: self.patience,
            min_improvement: self.min_improvement,
            update_embeddings,
            shuffle_seed: self.seed,
        }
    }
}

/// Fresh, untrained bundle with weights drawn from `rng`.
pub fn init_bundle<R: Rng + ?Sized>(ont: &Ontology, vocab: Vocabulary, cfg: &TrainConfig, rng: &mut R) -> ModelBundle {
    let (v, h, hid, d, r) = (vocab.len(), cfg.embed_size, cfg.hidden_size, ont.control_dim(), cfg.init_range);
    let emb = EmbeddingTable::uniform(v, h, r, rng);
    let fwd = RnnLm::uniform(v, h, hid, d, Direction::Forward, cfg.decay, r, rng);
    let bwd = RnnLm::uniform(v, h, hid, d, Direction::Backward, cfg.decay, r, rng);
    let cnn = CnnModel::uniform(&cfg.cnn_widths, h, cfg.cnn_hidden, ont.num_acts(), ont.slot_bits(), r, rng);
    ModelBundle { ontology: ont.clone(), vocab, emb, fwd, bwd, cnn, config: cfg.clone() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Forward,
    Backward,
    Cnn,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Forward => "forward",
            Stage::Backward => "backward",
            Stage::Cnn => "cnn",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub vocab_size: usize,
    pub train_examples: usize,
    pub valid_examples: usize,
    pub forward: TrainLog,
    pub backward: TrainLog,
    pub cnn: TrainLog,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{stage} model: {source}")]
    Train { stage: Stage, source: TrainError },
    #[error("embedding table is {rows}x{cols}, expected {vocab}x{embed}")]
    Embeddings { rows: usize, cols: usize, vocab: usize, embed: usize },
    #[error(transparent)]
    Config(#[from] ConfigError),
}

impl PipelineError {
    pub fn is_divergence(&self) -> bool {
        matches!(self, PipelineError::Train { source: TrainError::Diverged { .. }, .. })
    }
}

/// Encodes prepared pairs; out-of-vocabulary words map to UNK.
pub fn encode_examples(ont: &Ontology, vocab: &Vocabulary, data: &[Prepared]) -> Vec<SeqExample> {
    data.iter()
        .map(|p| SeqExample { tokens: vocab.encode_lossy(&p.delex), control: encode_control(ont, &p.da) })
        .collect()
}

/// Trains forward, backward and classifier models on `train` (already
/// up-sampled) with early stopping on `valid`.
pub fn train_system(
    ont: &Ontology,
    train: &[Prepared],
    valid: &[Prepared],
    cfg: &TrainConfig,
    embeddings: Option<EmbeddingTable>,
) -> Result<(ModelBundle, TrainReport), PipelineError> {
    cfg.validate()?;
    let delex: Vec<DelexUtterance> = train.iter().map(|p| p.delex.clone()).collect();
    let vocab = build_vocab(ont, &delex);
    let tr = encode_examples(ont, &vocab, train);
    let va = encode_examples(ont, &vocab, valid);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut b = init_bundle(ont, vocab, cfg, &mut rng);
    if let Some(e) = embeddings {
        if e.vocab_size() != b.vocab.len() || e.dim() != cfg.embed_size {
            return Err(PipelineError::Embeddings {
                rows: e.vocab_size(),
                cols: e.dim(),
                vocab: b.vocab.len(),
                embed: cfg.embed_size,
            });
        }
        b.emb = e;
    }
    let wrap = |stage| move |source| PipelineError::Train { stage, source };
    let forward = b.fwd.train(&mut b.emb, &b.vocab, &tr, &va, &cfg.optim(true)).map_err(wrap(Stage::Forward))?;
    let backward = b.bwd.train(&mut b.emb, &b.vocab, &tr, &va, &cfg.optim(false)).map_err(wrap(Stage::Backward))?;
    let cnn = b.cnn.train(&mut b.emb, &tr, &va, &cfg.optim(false)).map_err(wrap(Stage::Cnn))?;
    let report = TrainReport {
        vocab_size: b.vocab.len(),
        train_examples: tr.len(),
        valid_examples: va.len(),
        forward,
        backward,
        cnn,
    };
    Ok((b, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, prepare, prepare_splits, TemplatePack};
    use crate::generator::entropy;

    #[test]
    fn config_parses_and_validates() {
        let cfg: TrainConfig = toml::from_str("hidden_size = 20\ndecay = 0.7\n").unwrap();
        assert_eq!(cfg.hidden_size, 20);
        assert_eq!(cfg.embed_size, 50);
        assert!(cfg.validate().is_ok());
        assert!(toml::from_str::<TrainConfig>("hidden = 3\n").is_err());
        let bad = TrainConfig { decay: 1.5, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn small_pipeline_trains_and_round_trips() {
        let o = Ontology::restaurant();
        let c = generate_corpus(&o, &TemplatePack::restaurant(), 60, 3).unwrap();
        let (prep, _) = prepare(&o, &c).unwrap();
        let (s, up) = prepare_splits(&prep, 1);
        let cfg = TrainConfig {
            embed_size: 8,
            hidden_size: 10,
            cnn_hidden: 10,
            max_epochs: 5,
            patience: 5,
            ..TrainConfig::default()
        };
        let (b, report) = train_system(&o, &up, &s.valid, &cfg, None).unwrap();
        let costs: Vec<f64> = report.forward.epochs.iter().map(|e| e.valid_cost).collect();
        assert!(costs.windows(2).all(|w| w[1] < w[0]), "{costs:?}");
        let back = ModelBundle::from_json(&b.to_json()).unwrap();
        let va = encode_examples(&o, &back.vocab, &s.valid);
        let before = entropy(&b.fwd, &b.emb, &b.vocab, &va);
        let after = entropy(&back.fwd, &back.emb, &back.vocab, &va);
        assert_eq!(before.to_bits(), after.to_bits());
        assert_eq!(before.to_bits(), report.forward.best_valid_cost.to_bits());
    }
}
