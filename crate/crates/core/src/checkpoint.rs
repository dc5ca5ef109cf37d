//! Single-file checkpoints: magic, JSON manifest, raw little-endian `f32`
//! tensors. The byte layout is described in `docs/checkpoint-format.md`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layout::SubspaceLayout;
use crate::model::{EmbeddingModel, ModelConfig};
use crate::nn::{Adam, Param, Parameterized};
use crate::trainer::{Trainer, TrainerConfig, TrainingState};
use crate::wss::{Segmenter, SegmenterConfig};

pub const MAGIC: &[u8; 8] = b"DSLCKPT1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the tensor section.
    pub offset: u64,
    /// Number of `f32` elements.
    pub len: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointKind {
    EmbeddingModel,
    Segmenter,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub kind: CheckpointKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_config: Option<ModelConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trainer_config: Option<TrainerConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmenter_config: Option<SegmenterConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<SubspaceLayout>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<TrainingState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<Adam>,
    pub tensors: Vec<TensorEntry>,
}

impl Manifest {
    fn new(kind: CheckpointKind) -> Self {
        Self {
            version: FORMAT_VERSION,
            kind,
            model_config: None,
            trainer_config: None,
            segmenter_config: None,
            layout: None,
            state: None,
            optimizer: None,
            tensors: Vec::new(),
        }
    }
}

/// A parsed checkpoint file.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: BTreeMap<String, Vec<f32>>,
}

/// Moment tensors carry these suffixes after the parameter name.
const M_SUFFIX: &str = "#adam_m";
const V_SUFFIX: &str = "#adam_v";

fn collect<P: Parameterized<f32>>(net: &P, moments: bool) -> Vec<(String, Vec<usize>, Vec<f32>)> {
    let mut out = Vec::new();
    net.visit_params(&mut |name, p: &Param<f32>| {
        out.push((name.to_string(), p.shape.clone(), p.value.clone()));
        if moments {
            out.push((format!("{name}{M_SUFFIX}"), p.shape.clone(), p.m.clone()));
            out.push((format!("{name}{V_SUFFIX}"), p.shape.clone(), p.v.clone()));
        }
    });
    out
}

/// Writes `manifest` and `tensors` to `path` via a temporary file and an
/// atomic rename.
pub fn write(path: &Path, mut manifest: Manifest, tensors: Vec<(String, Vec<usize>, Vec<f32>)>) -> Result<()> {
    manifest.tensors.clear();
    let mut offset = 0u64;
    for (name, shape, data) in &tensors {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Dimension(format!("tensor {name} does not match its shape")));
        }
        manifest.tensors.push(TensorEntry { name: name.clone(), shape: shape.clone(), offset, len: data.len() as u64 });
        offset += 4 * data.len() as u64;
    }
    let json = serde_json::to_vec(&manifest)?;
    let mut buf = Vec::with_capacity(16 + json.len() + offset as usize);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, _, data) in &tensors {
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&buf)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse(&bytes)
}

pub fn parse(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format("missing checkpoint magic".into()));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = 16usize.checked_add(mlen).filter(|e| *e <= bytes.len()).ok_or_else(|| Error::Format("manifest length exceeds the file".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..body])?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", manifest.version)));
    }
    let blob = &bytes[body..];
    let mut tensors = BTreeMap::new();
    for t in &manifest.tensors {
        let start = t.offset as usize;
        let end = start + 4 * t.len as usize;
        if end > blob.len() || t.shape.iter().product::<usize>() as u64 != t.len {
            return Err(Error::Format(format!("tensor {} is truncated or misshapen", t.name)));
        }
        let data = blob[start..end].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
        tensors.insert(t.name.clone(), data);
    }
    Ok(Checkpoint { manifest, tensors })
}

fn restore<P: Parameterized<f32>>(net: &mut P, ckpt: &Checkpoint) -> Result<()> {
    let mut err = None;
    net.visit_params_mut(&mut |name, p| {
        if err.is_some() {
            return;
        }
        let Some(v) = ckpt.tensors.get(name) else {
            err = Some(Error::Format(format!("checkpoint lacks tensor {name}")));
            return;
        };
        if v.len() != p.len() {
            err = Some(Error::Format(format!("tensor {name} has {} values, expected {}", v.len(), p.len())));
            return;
        }
        p.value.copy_from_slice(v);
        for (suffix, dst) in [(M_SUFFIX, &mut p.m), (V_SUFFIX, &mut p.v)] {
            match ckpt.tensors.get(&format!("{name}{suffix}")) {
                Some(m) if m.len() == dst.len() => dst.copy_from_slice(m),
                _ => dst.iter_mut().for_each(|x| *x = 0.0),
            }
        }
    });
    err.map_or(Ok(()), Err)
}

/// Saves a trained embedding model with its layout and, if given, the
/// training state needed to resume.
pub fn save_model(
    path: &Path,
    model: &EmbeddingModel<f32>,
    model_config: &ModelConfig,
    layout: &SubspaceLayout,
    training: Option<(&TrainerConfig, &TrainingState, &Adam)>,
) -> Result<()> {
    let mut m = Manifest::new(CheckpointKind::EmbeddingModel);
    m.model_config = Some(model_config.clone());
    m.layout = Some(layout.clone());
    if let Some((cfg, state, opt)) = training {
        m.trainer_config = Some(cfg.clone());
        m.state = Some(state.clone());
        m.optimizer = Some(opt.clone());
    }
    write(path, m, collect(model, training.is_some()))
}

pub fn save_trainer(path: &Path, trainer: &Trainer<f32, crate::model::SmallCnn<f32>>, model_config: &ModelConfig) -> Result<()> {
    save_model(
        path,
        &trainer.model,
        model_config,
        &trainer.layout,
        Some((&trainer.config, &trainer.state, &trainer.optimizer)),
    )
}

/// Everything stored in an embedding-model checkpoint.
pub struct LoadedModel {
    pub model: EmbeddingModel<f32>,
    pub model_config: ModelConfig,
    pub layout: SubspaceLayout,
    pub trainer_config: Option<TrainerConfig>,
    pub state: Option<TrainingState>,
    pub optimizer: Option<Adam>,
}

impl LoadedModel {
    /// Rebuilds a trainer that continues where the checkpoint stopped.
    pub fn into_trainer(self) -> Result<Trainer<f32, crate::model::SmallCnn<f32>>> {
        match (self.trainer_config, self.state, self.optimizer) {
            (Some(c), Some(s), Some(o)) => Trainer::resume(c, self.model, self.layout, s, o),
            _ => Err(Error::Format("checkpoint carries no training state".into())),
        }
    }
}

pub fn load_model(path: &Path) -> Result<LoadedModel> {
    let ckpt = read(path)?;
    let m = &ckpt.manifest;
    if m.kind != CheckpointKind::EmbeddingModel {
        return Err(Error::Format("not an embedding-model checkpoint".into()));
    }
    let model_config = m.model_config.clone().ok_or_else(|| Error::Format("missing model config".into()))?;
    let layout = m.layout.clone().ok_or_else(|| Error::Format("missing layout".into()))?;
    layout.validate()?;
    let mut model = EmbeddingModel::<f32>::new(&model_config, 0)?;
    if layout.dim() != model.embedding_dim() {
        return Err(Error::Format("layout does not match the model".into()));
    }
    restore(&mut model, &ckpt)?;
    Ok(LoadedModel {
        model,
        model_config,
        layout,
        trainer_config: m.trainer_config.clone(),
        state: m.state.clone(),
        optimizer: m.optimizer.clone(),
    })
}

pub fn save_segmenter(path: &Path, net: &Segmenter<f32>) -> Result<()> {
    let mut m = Manifest::new(CheckpointKind::Segmenter);
    m.segmenter_config = Some(net.config);
    write(path, m, collect(net, false))
}

pub fn load_segmenter(path: &Path) -> Result<Segmenter<f32>> {
    let ckpt = read(path)?;
    if ckpt.manifest.kind != CheckpointKind::Segmenter {
        return Err(Error::Format("not a segmenter checkpoint".into()));
    }
    let cfg = ckpt.manifest.segmenter_config.ok_or_else(|| Error::Format("missing segmenter config".into()))?;
    let mut net = Segmenter::new(cfg, 0)?;
    restore(&mut net, &ckpt)?;
    Ok(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{InputSpec, SmallCnnConfig};

    fn cfg() -> ModelConfig {
        ModelConfig {
            input: InputSpec::square(3, 16),
            backbone: SmallCnnConfig { in_channels: 3, widths: vec![4, 8] },
            embedding_dim: 6,
            use_attention: true,
        }
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut model = EmbeddingModel::<f32>::new(&cfg(), 11).unwrap();
        model.head.weight.m[3] = 0.25;
        let layout = SubspaceLayout::single(6).commit(&[1, 4]).unwrap();
        let tc = TrainerConfig { embedding_dim: 6, ..TrainerConfig::desk() };
        let mut state = TrainingState::new(2);
        state.best_score = Some(0.5);
        let mut opt = Adam::new(1e-3);
        opt.t = 7;
        save_model(&path, &model, &cfg(), &layout, Some((&tc, &state, &opt))).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.layout, layout);
        assert_eq!(back.state.as_ref(), Some(&state));
        assert_eq!(back.optimizer.as_ref().unwrap().t, 7);
        let mut a = Vec::new();
        let mut b = Vec::new();
        model.visit_params(&mut |_, p| a.push((p.value.clone(), p.m.clone())));
        back.model.visit_params(&mut |_, p| b.push((p.value.clone(), p.m.clone())));
        assert_eq!(a, b);
        assert!(!path.with_extension("tmp").exists());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        assert!(matches!(parse(b"NOTACKPT\0\0\0\0\0\0\0\0"), Err(Error::Format(_))));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = EmbeddingModel::<f32>::new(&cfg(), 1).unwrap();
        save_model(&path, &model, &cfg(), &SubspaceLayout::single(6), None).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(matches!(parse(&bytes[..bytes.len() - 4]), Err(Error::Format(_))));
        assert!(load_segmenter(&path).is_err());
    }

    #[test]
    fn header_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ckpt");
        let net = Segmenter::<f32>::new(SegmenterConfig { in_channels: 3, base_width: 2, depth: 1 }, 3).unwrap();
        save_segmenter(&path, &net).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let mlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let n = net.num_params();
        assert_eq!(bytes.len(), 16 + mlen + 4 * n);
        let back = load_segmenter(&path).unwrap();
        let mut a = Vec::new();
        let mut b = Vec::new();
        net.visit_params(&mut |_, p| a.extend(p.value.clone()));
        back.visit_params(&mut |_, p| b.extend(p.value.clone()));
        assert_eq!(a, b);
    }
}
