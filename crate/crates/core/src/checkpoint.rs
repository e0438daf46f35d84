//! Self-describing JSON checkpoints.
//!
//! A checkpoint maps parameter names to shaped arrays and carries the
//! architecture, so a model can be rebuilt from the file alone. Arrays are
//! base64-encoded little-endian `f64`, which keeps reloads bit-exact.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::losses::{Discriminator, FeatureExtractor};
use crate::networks::{Generator, GeneratorConfig, LayerSpec, NetworkError};
use crate::nn::{AdamState, Parameters};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error at {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("unsupported format_version {0}")]
    Version(u32),
    #[error("tensor mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// `f64` slice encoded as base64 of its little-endian bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EncodedF64(String);

impl EncodedF64 {
    pub fn encode(values: &[f64]) -> Self {
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self(STANDARD.encode(bytes))
    }

    pub fn decode(&self) -> Result<Vec<f64>, CheckpointError> {
        let bytes = STANDARD.decode(&self.0).map_err(|e| CheckpointError::Format(e.to_string()))?;
        if bytes.len() % 8 != 0 {
            return Err(CheckpointError::Format("tensor byte length not a multiple of 8".into()));
        }
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: EncodedF64,
}

/// Parameters of a model in visiting order.
pub fn export_tensors<P: Parameters>(model: &P) -> Vec<NamedTensor> {
    let mut out = Vec::new();
    model.visit(&mut |name, shape, data| {
        out.push(NamedTensor { name: name.to_string(), shape: shape.to_vec(), data: EncodedF64::encode(data) });
    });
    out
}

/// Loads tensors into `model`; names, shapes and order must match exactly.
pub fn import_tensors<P: Parameters>(model: &mut P, tensors: &[NamedTensor]) -> Result<(), CheckpointError> {
    let mut expected = Vec::new();
    model.visit(&mut |name, shape, _| expected.push((name.to_string(), shape.to_vec())));
    if expected.len() != tensors.len() {
        return Err(CheckpointError::Mismatch(format!(
            "model has {} tensors, checkpoint has {}",
            expected.len(),
            tensors.len()
        )));
    }
    let mut flat = Vec::with_capacity(model.param_count());
    for ((name, shape), t) in expected.iter().zip(tensors) {
        if *name != t.name || *shape != t.shape {
            return Err(CheckpointError::Mismatch(format!(
                "expected {name} {shape:?}, found {} {:?}",
                t.name, t.shape
            )));
        }
        let data = t.data.decode()?;
        if data.len() != shape.iter().product::<usize>() {
            return Err(CheckpointError::Mismatch(format!("{name}: wrong element count")));
        }
        flat.extend(data);
    }
    model.load_flat(&flat);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerRecord {
    pub step: u64,
    pub m: EncodedF64,
    pub v: EncodedF64,
}

impl OptimizerRecord {
    pub fn from_state(s: &AdamState) -> Self {
        Self { step: s.step, m: EncodedF64::encode(&s.m), v: EncodedF64::encode(&s.v) }
    }

    pub fn to_state(&self) -> Result<AdamState, CheckpointError> {
        Ok(AdamState { step: self.step, m: self.m.decode()?, v: self.v.decode()? })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorRecord {
    pub base_channels: usize,
    pub tensors: Vec<NamedTensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    /// `pretrain` or `finetune`; free-form for other producers.
    pub stage: String,
    /// Completed training iterations.
    pub iteration: u64,
    pub config: GeneratorConfig,
    pub tensors: Vec<NamedTensor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub discriminator: Option<DiscriminatorRecord>,
    /// Snapshot of the training configuration that produced the file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_config: Option<serde_json::Value>,
}

impl Checkpoint {
    pub fn from_generator(model: &Generator, stage: &str, iteration: u64) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            stage: stage.to_string(),
            iteration,
            config: model.config(),
            tensors: export_tensors(model),
            optimizer: None,
            discriminator: None,
            train_config: None,
        }
    }

    pub fn with_discriminator(mut self, disc: &Discriminator, base_channels: usize, opt: Option<&AdamState>) -> Self {
        self.discriminator = Some(DiscriminatorRecord {
            base_channels,
            tensors: export_tensors(disc),
            optimizer: opt.map(OptimizerRecord::from_state),
        });
        self
    }

    /// Rebuilds the generator described by the file.
    pub fn generator(&self) -> Result<Generator, CheckpointError> {
        let mut g = Generator::build(&self.config, 0)?;
        import_tensors(&mut g, &self.tensors)?;
        Ok(g)
    }

    pub fn discriminator(&self) -> Result<Option<Discriminator>, CheckpointError> {
        let Some(rec) = &self.discriminator else { return Ok(None) };
        let mut d = Discriminator::new(0, rec.base_channels);
        import_tensors(&mut d, &rec.tensors)?;
        Ok(Some(d))
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io = |source| CheckpointError::Io { path: path.display().to_string(), source };
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io)?;
        }
        let json = serde_json::to_string(self).map_err(|e| CheckpointError::Format(e.to_string()))?;
        // Write-then-rename so a crash never leaves a truncated checkpoint.
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, json).map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = fs::read_to_string(path)
            .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        let header: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| CheckpointError::Format(e.to_string()))?;
        let version = header
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| CheckpointError::Format("missing format_version".into()))?;
        if version != u64::from(FORMAT_VERSION) {
            return Err(CheckpointError::Version(version as u32));
        }
        serde_json::from_value(header).map_err(|e| CheckpointError::Format(e.to_string()))
    }
}

/// Writes a bare generator checkpoint.
pub fn save_generator(model: &Generator, path: &Path) -> Result<(), CheckpointError> {
    Checkpoint::from_generator(model, "export", 0).save(path)
}

pub fn load_generator(path: &Path) -> Result<Generator, CheckpointError> {
    Checkpoint::load(path)?.generator()
}

/// Weights of a feature extractor: a layer list, five tap indices and tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractorFile {
    pub format_version: u32,
    pub layers: Vec<LayerSpec>,
    pub taps: Vec<usize>,
    pub tensors: Vec<NamedTensor>,
}

pub fn save_extractor(layers: &[LayerSpec], extractor: &FeatureExtractor, path: &Path) -> Result<(), CheckpointError> {
    let stack = extractor.stack().ok_or_else(|| CheckpointError::Format("extractor has no weights".into()))?;
    let file = ExtractorFile {
        format_version: FORMAT_VERSION,
        layers: layers.to_vec(),
        taps: extractor.taps().to_vec(),
        tensors: export_tensors(stack),
    };
    let json = serde_json::to_string(&file).map_err(|e| CheckpointError::Format(e.to_string()))?;
    fs::write(path, json).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
}

pub fn load_extractor(path: &Path) -> Result<FeatureExtractor, CheckpointError> {
    let text = fs::read_to_string(path)
        .map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
    let file: ExtractorFile = serde_json::from_str(&text).map_err(|e| CheckpointError::Format(e.to_string()))?;
    if file.format_version != FORMAT_VERSION {
        return Err(CheckpointError::Version(file.format_version));
    }
    let mut rng = crate::rng::stream_rng(0, crate::rng::Stream::Init, 0);
    let mut stack = crate::networks::build_stack("extractor", &file.layers, &mut rng);
    import_tensors(&mut stack, &file.tensors)?;
    FeatureExtractor::from_stack(stack, file.taps).map_err(|e| CheckpointError::Format(e.to_string()))
}
