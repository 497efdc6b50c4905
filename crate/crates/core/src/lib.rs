//! Dialogue-act-conditioned language generation with a gated recurrent
//! generator, sampling-based over-generation, and convolutional/backward
//! reranking.

pub mod ablation;
pub mod baselines;
pub mod cnn;
pub mod corpus;
pub mod decoder;
pub mod delex;
pub mod evaluation;
pub mod generator;
pub mod model;
pub mod neural;
pub mod ontology;
pub mod train;

pub use ablation::{AblationGrid, AblationReport};
pub use baselines::{Generated, Handcrafted, NgramClassLm, TemplateStore};
pub use cnn::CnnModel;
pub use corpus::{CorpusExample, Prepared, TemplatePack};
pub use decoder::{Candidate, DecodeConfig, Models};
pub use delex::{DelexUtterance, Vocabulary};
pub use evaluation::{bleu4, EvalReport};
pub use generator::{Direction, RnnLm};
pub use model::ModelBundle;
pub use neural::{EmbeddingTable, Matrix, OptimConfig};
pub use ontology::{ControlVector, DialogueAct, Ontology};
pub use train::TrainConfig;
