//! Model assembly: two deconfounded-attention stacks (phrases, regions),
//! their codebooks, and the counterfactual similarity head — plus the
//! versioned binary checkpoint format.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::GroundingCorpus;
use crate::ici::{IciNodes, IciParams};
use crate::ida::{
    build_dictionary, DictSource, DictionaryError, DictionaryNodes, GlobalDictionary,
    IdaLayerNodes, IdaLayerParams,
};
use crate::tensor::{Tape, Tensor};

const CHECKPOINT_MAGIC: &[u8; 8] = b"IECICKPT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("corpus dims (d_p={d_p}, d_r={d_r}) do not match the model dim {dim}")]
    DimMismatch { dim: usize, d_p: usize, d_r: usize },
    #[error("model dim {dim} does not split into {heads} heads")]
    BadHeadCount { dim: usize, heads: usize },
    #[error("train split is empty; cannot build codebooks")]
    EmptyTrainSplit,
    #[error(transparent)]
    Dictionary(#[from] DictionaryError),
    #[error("failed to access checkpoint {path}: {source}")]
    CheckpointIo {
        path: String,
        source: std::io::Error,
    },
    #[error("checkpoint {path} is not in the expected format: {detail}")]
    CheckpointFormat { path: String, detail: String },
    #[error("checkpoint is missing parameter {name}")]
    MissingParam { name: String },
    #[error("checkpoint parameter {name} has shape {got:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
}

/// Which blocks of the pipeline are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    NoIda,
    NoIci,
    NoBoth,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [
        Ablation::Full,
        Ablation::NoIda,
        Ablation::NoIci,
        Ablation::NoBoth,
    ];

    pub fn uses_ida(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoIci)
    }

    pub fn uses_ici(self) -> bool {
        matches!(self, Ablation::Full | Ablation::NoIda)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoIda => "no_ida",
            Ablation::NoIci => "no_ici",
            Ablation::NoBoth => "no_both",
        }
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "full" => Ok(Ablation::Full),
            "no_ida" => Ok(Ablation::NoIda),
            "no_ici" => Ok(Ablation::NoIci),
            "no_both" => Ok(Ablation::NoBoth),
            other => Err(format!(
                "unknown ablation '{other}' (expected full, no_ida, no_ici, or no_both)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Shared feature/model dimension.
    pub dim: usize,
    pub heads: usize,
    /// Layer count for each attention stack.
    pub ida_layers: usize,
    /// Codebook entries per modality.
    pub dict_entries: usize,
    /// Add the image→sentence direction to the contrastive loss.
    pub symmetric_contrastive: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 32,
            heads: 4,
            ida_layers: 6,
            dict_entries: 32,
            symmetric_contrastive: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub phrase_ida: Vec<IdaLayerParams>,
    pub region_ida: Vec<IdaLayerParams>,
    pub phrase_dict: GlobalDictionary,
    pub region_dict: GlobalDictionary,
    pub ici: IciParams,
}

impl Model {
    /// Initialize parameters and build both codebooks from the pooled
    /// train-split features.
    pub fn init(
        config: &ModelConfig,
        corpus: &GroundingCorpus,
        seed: u64,
    ) -> std::result::Result<Model, ModelError> {
        if corpus.d_p != config.dim || corpus.d_r != config.dim {
            return Err(ModelError::DimMismatch {
                dim: config.dim,
                d_p: corpus.d_p,
                d_r: corpus.d_r,
            });
        }
        if config.heads == 0 || config.dim % config.heads != 0 {
            return Err(ModelError::BadHeadCount {
                dim: config.dim,
                heads: config.heads,
            });
        }
        if corpus.train.is_empty() {
            return Err(ModelError::EmptyTrainSplit);
        }
        let phrase_rows: Vec<Vec<f64>> = corpus
            .train
            .iter()
            .flat_map(|p| p.sentence.iter().map(|ph| ph.embedding.clone()))
            .collect();
        let region_rows: Vec<Vec<f64>> = corpus
            .train
            .iter()
            .flat_map(|p| p.image.iter().map(|r| r.embedding.clone()))
            .collect();
        let phrase_feats = Tensor::from_rows(&phrase_rows).expect("uniform dims");
        let region_feats = Tensor::from_rows(&region_rows).expect("uniform dims");
        let phrase_dict = build_dictionary(
            &phrase_feats,
            config.dict_entries,
            seed,
            DictSource::Phrases,
        )?;
        let region_dict = build_dictionary(
            &region_feats,
            config.dict_entries,
            seed.wrapping_add(1),
            DictSource::Regions,
        )?;

        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
        let layers = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<IdaLayerParams> {
            (0..config.ida_layers)
                .map(|_| IdaLayerParams::init(config.dim, config.heads, rng))
                .collect()
        };
        Ok(Model {
            config: config.clone(),
            phrase_ida: layers(&mut rng),
            region_ida: layers(&mut rng),
            phrase_dict,
            region_dict,
            ici: IciParams::init(config.dim),
        })
    }

    /// All-zero skeleton with the right shapes; used when loading
    /// checkpoints.
    fn skeleton(config: &ModelConfig) -> Model {
        let d = config.dim;
        let zero_layer = || IdaLayerParams {
            w_qm: Tensor::zeros(vec![d, d]),
            w_km: Tensor::zeros(vec![d, d]),
            w_vm: Tensor::zeros(vec![d, d]),
            w_qc: Tensor::zeros(vec![d, d]),
            w_fuse: Tensor::zeros(vec![3 * d, d]),
            b_fuse: Tensor::zeros(vec![d]),
            ln_gain: Tensor::zeros(vec![d]),
            ln_bias: Tensor::zeros(vec![d]),
            heads: config.heads,
        };
        let zero_dict = |source| GlobalDictionary {
            source,
            keys: Tensor::zeros(vec![config.dict_entries, d]),
            values: Tensor::zeros(vec![config.dict_entries, d]),
            kmeans_objective_trace: vec![],
        };
        Model {
            config: config.clone(),
            phrase_ida: (0..config.ida_layers).map(|_| zero_layer()).collect(),
            region_ida: (0..config.ida_layers).map(|_| zero_layer()).collect(),
            phrase_dict: zero_dict(DictSource::Phrases),
            region_dict: zero_dict(DictSource::Regions),
            ici: IciParams {
                r: Tensor::zeros(vec![d]),
                w_phrase: Tensor::zeros(vec![d, d]),
                w_region: Tensor::zeros(vec![d, d]),
                scale: 1.0 / (d as f64).sqrt(),
            },
        }
    }

    /// Canonical parameter enumeration. [`Model::bind`] binds nodes in this
    /// exact order, so gradient collection and the optimizer can walk the
    /// two lists in lockstep.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.phrase_ida.iter().enumerate() {
            for (name, t) in layer.fields() {
                out.push((format!("phrase_ida.{i}.{name}"), t));
            }
        }
        for (i, layer) in self.region_ida.iter().enumerate() {
            for (name, t) in layer.fields() {
                out.push((format!("region_ida.{i}.{name}"), t));
            }
        }
        out.push(("phrase_dict.keys".into(), &self.phrase_dict.keys));
        out.push(("phrase_dict.values".into(), &self.phrase_dict.values));
        out.push(("region_dict.keys".into(), &self.region_dict.keys));
        out.push(("region_dict.values".into(), &self.region_dict.values));
        for (name, t) in self.ici.fields() {
            out.push((format!("ici.{name}"), t));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.phrase_ida.iter_mut().enumerate() {
            for (name, t) in layer.fields_mut() {
                out.push((format!("phrase_ida.{i}.{name}"), t));
            }
        }
        for (i, layer) in self.region_ida.iter_mut().enumerate() {
            for (name, t) in layer.fields_mut() {
                out.push((format!("region_ida.{i}.{name}"), t));
            }
        }
        out.push(("phrase_dict.keys".into(), &mut self.phrase_dict.keys));
        out.push(("phrase_dict.values".into(), &mut self.phrase_dict.values));
        out.push(("region_dict.keys".into(), &mut self.region_dict.keys));
        out.push(("region_dict.values".into(), &mut self.region_dict.values));
        for (name, t) in self.ici.fields_mut() {
            out.push((format!("ici.{name}"), t));
        }
        out
    }

    /// Register every parameter on the tape. Node order matches
    /// [`Model::named_tensors`].
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let phrase_layers: Vec<IdaLayerNodes> =
            self.phrase_ida.iter().map(|l| l.bind(tape)).collect();
        let region_layers: Vec<IdaLayerNodes> =
            self.region_ida.iter().map(|l| l.bind(tape)).collect();
        let phrase_dict = self.phrase_dict.bind(tape);
        let region_dict = self.region_dict.bind(tape);
        let ici = self.ici.bind(tape);
        BoundModel {
            phrase_layers,
            region_layers,
            phrase_dict,
            region_dict,
            ici,
        }
    }
}

/// Tape-bound view of the model for one forward/backward pass.
pub struct BoundModel {
    pub phrase_layers: Vec<IdaLayerNodes>,
    pub region_layers: Vec<IdaLayerNodes>,
    pub phrase_dict: DictionaryNodes,
    pub region_dict: DictionaryNodes,
    pub ici: IciNodes,
}

impl BoundModel {
    /// Parameter nodes in [`Model::named_tensors`] order.
    pub fn param_nodes(&self) -> Vec<crate::tensor::NodeId> {
        let mut out = Vec::new();
        for layer in self.phrase_layers.iter().chain(&self.region_layers) {
            out.extend([
                layer.w_qm,
                layer.w_km,
                layer.w_vm,
                layer.w_qc,
                layer.w_fuse,
                layer.b_fuse,
                layer.ln_gain,
                layer.ln_bias,
            ]);
        }
        out.extend([
            self.phrase_dict.keys,
            self.phrase_dict.values,
            self.region_dict.keys,
            self.region_dict.values,
        ]);
        out.extend([self.ici.r, self.ici.w_phrase, self.ici.w_region]);
        out
    }
}

// ── Checkpoints ──────────────────────────────────────────────────────

fn push_block(buf: &mut Vec<u8>, bytes: &[u8]) {
    buf.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(bytes);
}

/// Write the model and a caller-supplied config echo to a versioned
/// binary file. Parameter data is stored as little-endian f32.
pub fn save_checkpoint(
    path: &Path,
    model: &Model,
    config_echo: &serde_json::Value,
) -> std::result::Result<(), ModelError> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let model_config = serde_json::to_vec(&model.config).expect("config serializes");
    push_block(&mut buf, &model_config);
    let echo = serde_json::to_vec(config_echo).expect("echo serializes");
    push_block(&mut buf, &echo);

    let named = model.named_tensors();
    buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, tensor) in named {
        push_block(&mut buf, name.as_bytes());
        buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &dim in tensor.shape() {
            buf.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, &buf).map_err(|source| ModelError::CheckpointIo {
        path: path.display().to_string(),
        source,
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], ModelError> {
        let slice = self.bytes.get(self.at..self.at + n).ok_or_else(|| {
            ModelError::CheckpointFormat {
                path: self.path.display().to_string(),
                detail: format!("truncated at byte {}", self.at),
            }
        })?;
        self.at += n;
        Ok(slice)
    }

    fn u32(&mut self) -> std::result::Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn block(&mut self) -> std::result::Result<&'a [u8], ModelError> {
        let len = self.u32()? as usize;
        self.take(len)
    }
}

/// Load a model plus the config echo stored alongside it.
pub fn load_checkpoint(
    path: &Path,
) -> std::result::Result<(Model, serde_json::Value), ModelError> {
    let bytes = std::fs::read(path).map_err(|source| ModelError::CheckpointIo {
        path: path.display().to_string(),
        source,
    })?;
    let format_err = |detail: String| ModelError::CheckpointFormat {
        path: path.display().to_string(),
        detail,
    };
    let mut r = Reader {
        bytes: &bytes,
        at: 0,
        path,
    };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(format_err("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let config: ModelConfig = serde_json::from_slice(r.block()?)
        .map_err(|e| format_err(format!("model config: {e}")))?;
    let echo: serde_json::Value = serde_json::from_slice(r.block()?)
        .map_err(|e| format_err(format!("config echo: {e}")))?;

    let param_count = r.u32()? as usize;
    let mut stored: std::collections::HashMap<String, Tensor> = std::collections::HashMap::new();
    for _ in 0..param_count {
        let name = String::from_utf8(r.block()?.to_vec())
            .map_err(|e| format_err(format!("parameter name: {e}")))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let data: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let tensor =
            Tensor::new(shape, data).map_err(|e| format_err(format!("parameter {name}: {e}")))?;
        stored.insert(name, tensor);
    }

    let mut model = Model::skeleton(&config);
    for (name, slot) in model.named_tensors_mut() {
        let tensor = stored
            .remove(&name)
            .ok_or(ModelError::MissingParam { name: name.clone() })?;
        if tensor.shape() != slot.shape() {
            return Err(ModelError::ParamShape {
                name,
                expected: slot.shape().to_vec(),
                got: tensor.shape().to_vec(),
            });
        }
        *slot = tensor;
    }
    Ok((model, echo))
}
