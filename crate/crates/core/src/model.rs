//! Model files: a JSON envelope holding a checksum and the payload.
//!
//! Tensors are stored as base64 of little-endian `f64`s so a save/load
//! round trip is bit-exact. The checksum is the SHA-256 of the exact
//! payload text.

use std::io::Write;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cnn::CnnModel;
use crate::decoder::Models;
use crate::delex::Vocabulary;
use crate::generator::{Direction, RnnLm};
use crate::neural::{EmbeddingTable, Matrix};
use crate::ontology::Ontology;
use crate::train::TrainConfig;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("model file is corrupt or truncated (checksum mismatch)")]
    Checksum,
    #[error("unsupported model format version {found} (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("inconsistent model: {0}")]
    Shape(String),
    #[error("malformed model payload: {0}")]
    Payload(String),
}

/// Everything needed to decode: ontology, vocabulary, shared embeddings
/// and the three networks, plus the configuration they were trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub ontology: Ontology,
    pub vocab: Vocabulary,
    pub emb: EmbeddingTable,
    pub fwd: RnnLm,
    pub bwd: RnnLm,
    pub cnn: CnnModel,
    pub config: TrainConfig,
}

impl ModelBundle {
    pub fn models(&self) -> Models<'_> {
        Models {
            ont: &self.ontology,
            vocab: &self.vocab,
            emb: &self.emb,
            fwd: &self.fwd,
            bwd: Some(&self.bwd),
            cnn: Some(&self.cnn),
        }
    }

    pub fn check(&self) -> Result<(), ModelError> {
        let v = self.vocab.len();
        let h = self.emb.dim();
        let d = self.ontology.control_dim();
        let bad = |m: &str| Err(ModelError::Shape(m.to_string()));
        if self.emb.vocab_size() != v {
            return bad("embedding rows differ from vocabulary size");
        }
        for (m, dir) in [(&self.fwd, Direction::Forward), (&self.bwd, Direction::Backward)] {
            let hid = m.hidden_size();
            if m.direction != dir {
                return bad("recurrent model has the wrong direction");
            }
            if m.vocab_size() != v || m.embed_size() != h || m.control_size() != d {
                return bad("recurrent model does not match vocabulary, embeddings or control vector");
            }
            if m.w_hh.cols() != hid || m.w_wh.cols() != hid || m.w_fh.cols() != hid || m.w_ho.cols() != hid {
                return bad("recurrent hidden sizes disagree");
            }
            if !(0.0..=1.0).contains(&m.decay) {
                return bad("gate decay outside [0, 1]");
            }
        }
        let c = &self.cnn;
        let k = c.filters.len();
        let ch = c.hidden_size();
        if k == 0 || c.filters.iter().any(Vec::is_empty) {
            return bad("convolutional filters must be nonempty");
        }
        if c.w_hidden.rows() != k * h || c.w_hidden.cols() != ch {
            return bad("convolutional hidden layer does not match filters and embeddings");
        }
        if c.w_act.rows() != self.ontology.num_acts() || c.w_act.cols() != ch || c.b_act.len() != c.w_act.rows() {
            return bad("act head does not match the ontology");
        }
        if c.w_slot.rows() != self.ontology.slot_bits() || c.w_slot.cols() != ch || c.b_slot.len() != c.w_slot.rows() {
            return bad("slot head does not match the ontology");
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let payload = Payload {
            format_version: FORMAT_VERSION,
            ontology: self.ontology.clone(),
            vocabulary: self.vocab.tokens().to_vec(),
            embeddings: Tensor::from(&self.emb.0),
            forward: RnnFile::from(&self.fwd),
            backward: RnnFile::from(&self.bwd),
            cnn: CnnFile::from(&self.cnn),
            config: self.config.clone(),
        };
        let text = serde_json::to_string(&payload).expect("payload serializes");
        format!("{{\"checksum\":\"{}\",\"payload\":{}}}\n", sha256_hex(text.as_bytes()), text)
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        let env: Envelope<'_> = serde_json::from_str(text).map_err(|_| ModelError::Checksum)?;
        if sha256_hex(env.payload.get().as_bytes()) != env.checksum {
            return Err(ModelError::Checksum);
        }
        let probe: VersionProbe =
            serde_json::from_str(env.payload.get()).map_err(|e| ModelError::Payload(e.to_string()))?;
        if probe.format_version != FORMAT_VERSION {
            return Err(ModelError::Version { found: probe.format_version });
        }
        let p: Payload = serde_json::from_str(env.payload.get()).map_err(|e| ModelError::Payload(e.to_string()))?;
        p.ontology.validate().map_err(|e| ModelError::Shape(e.to_string()))?;
        let vocab = Vocabulary::from_tokens(&p.ontology, p.vocabulary).map_err(ModelError::Shape)?;
        let bundle = ModelBundle {
            emb: EmbeddingTable(p.embeddings.into_matrix()?),
            fwd: p.forward.into_model(Direction::Forward)?,
            bwd: p.backward.into_model(Direction::Backward)?,
            cnn: p.cnn.into_model()?,
            ontology: p.ontology,
            vocab,
            config: p.config,
        };
        bundle.check()?;
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        write_atomic(path, self.to_json().as_bytes()).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}

/// Writes via a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Deserialize)]
struct Envelope<'a> {
    checksum: String,
    #[serde(borrow)]
    payload: &'a RawValue,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Payload {
    format_version: u32,
    ontology: Ontology,
    vocabulary: Vec<String>,
    embeddings: Tensor,
    forward: RnnFile,
    backward: RnnFile,
    cnn: CnnFile,
    config: TrainConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Tensor {
    rows: usize,
    cols: usize,
    data: String,
}

impl From<&Matrix> for Tensor {
    fn from(m: &Matrix) -> Self {
        Tensor { rows: m.rows(), cols: m.cols(), data: encode_f64(m.data()) }
    }
}

impl From<&[f64]> for Tensor {
    fn from(v: &[f64]) -> Self {
        Tensor { rows: 1, cols: v.len(), data: encode_f64(v) }
    }
}

impl Tensor {
    fn into_matrix(self) -> Result<Matrix, ModelError> {
        let data = decode_f64(&self.data)?;
        if data.len() != self.rows * self.cols {
            return Err(ModelError::Shape(format!(
                "tensor declares {}x{} but holds {} values",
                self.rows,
                self.cols,
                data.len()
            )));
        }
        Ok(Matrix::from_vec(self.rows, self.cols, data))
    }

    fn into_vec(self) -> Result<Vec<f64>, ModelError> {
        Ok(self.into_matrix()?.data().to_vec())
    }
}

fn encode_f64(v: &[f64]) -> String {
    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
    B64.encode(bytes)
}

fn decode_f64(s: &str) -> Result<Vec<f64>, ModelError> {
    let bytes = B64.decode(s).map_err(|e| ModelError::Payload(e.to_string()))?;
    if bytes.len() % 8 != 0 {
        return Err(ModelError::Payload("tensor byte length is not a multiple of 8".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RnnFile {
    decay: f64,
    w_wh: Tensor,
    w_fh: Tensor,
    w_hh: Tensor,
    w_ho: Tensor,
}

impl From<&RnnLm> for RnnFile {
    fn from(m: &RnnLm) -> Self {
        RnnFile {
            decay: m.decay,
            w_wh: Tensor::from(&m.w_wh),
            w_fh: Tensor::from(&m.w_fh),
            w_hh: Tensor::from(&m.w_hh),
            w_ho: Tensor::from(&m.w_ho),
        }
    }
}

impl RnnFile {
    fn into_model(self, direction: Direction) -> Result<RnnLm, ModelError> {
        Ok(RnnLm {
            direction,
            decay: self.decay,
            w_wh: self.w_wh.into_matrix()?,
            w_fh: self.w_fh.into_matrix()?,
            w_hh: self.w_hh.into_matrix()?,
            w_ho: self.w_ho.into_matrix()?,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CnnFile {
    filters: Vec<Tensor>,
    w_hidden: Tensor,
    b_hidden: Tensor,
    w_act: Tensor,
    b_act: Tensor,
    w_slot: Tensor,
    b_slot: Tensor,
}

impl From<&CnnModel> for CnnFile {
    fn from(m: &CnnModel) -> Self {
        CnnFile {
            filters: m.filters.iter().map(|f| Tensor::from(&f[..])).collect(),
            w_hidden: Tensor::from(&m.w_hidden),
            b_hidden: Tensor::from(&m.b_hidden[..]),
            w_act: Tensor::from(&m.w_act),
            b_act: Tensor::from(&m.b_act[..]),
            w_slot: Tensor::from(&m.w_slot),
            b_slot: Tensor::from(&m.b_slot[..]),
        }
    }
}

impl CnnFile {
    fn into_model(self) -> Result<CnnModel, ModelError> {
        Ok(CnnModel {
            filters: self.filters.into_iter().map(Tensor::into_vec).collect::<Result<_, _>>()?,
            w_hidden: self.w_hidden.into_matrix()?,
            b_hidden: self.b_hidden.into_vec()?,
            w_act: self.w_act.into_matrix()?,
            b_act: self.b_act.into_vec()?,
            w_slot: self.w_slot.into_matrix()?,
            b_slot: self.b_slot.into_vec()?,
        })
    }
}

/// Reads an external embedding table stored as a model-file tensor
/// envelope: `{"checksum": ..., "payload": {"rows", "cols", "data"}}`.
pub fn load_embeddings(path: &Path) -> Result<EmbeddingTable, ModelError> {
    let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let env: Envelope<'_> = serde_json::from_str(&text).map_err(|_| ModelError::Checksum)?;
    if sha256_hex(env.payload.get().as_bytes()) != env.checksum {
        return Err(ModelError::Checksum);
    }
    let t: Tensor = serde_json::from_str(env.payload.get()).map_err(|e| ModelError::Payload(e.to_string()))?;
    Ok(EmbeddingTable(t.into_matrix()?))
}

/// Inverse of [`load_embeddings`].
pub fn embeddings_to_json(emb: &EmbeddingTable) -> String {
    let text = serde_json::to_string(&Tensor::from(&emb.0)).expect("tensor serializes");
    format!("{{\"checksum\":\"{}\",\"payload\":{}}}\n", sha256_hex(text.as_bytes()), text)
}
