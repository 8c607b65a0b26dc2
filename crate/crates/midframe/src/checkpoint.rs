//! Single-file checkpoint container.
//!
//! Layout: `b"MFCK"` magic, u32 LE format version, u64 LE header length, a
//! JSON header (config snapshot, stage, counters, RNG position, tensor
//! directory with name/dtype/shape/offset), the raw little-endian f32
//! payloads, and a trailing SHA-256 of everything before it. Writes go to a
//! sibling temp file first and are renamed into place, so a crash never
//! leaves a half-written checkpoint at the target path.

use crate::config::{ModelConfig, RunConfig, Stage};
use crate::cost::ArchVariant;
use crate::params::{InitPolicy, ParamStore};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 4] = b"MFCK";
const FORMAT_VERSION: u32 = 1;
const OPT_M: &str = "opt.m.";
const OPT_V: &str = "opt.v.";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0} (expected {FORMAT_VERSION})")]
    UnsupportedVersion(u32),
    #[error("checksum mismatch: file is truncated or corrupt")]
    ChecksumMismatch,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(
        "checkpoint base width {stored} does not match requested base width {requested}"
    )]
    WidthMismatch { requested: usize, stored: usize },
    #[error("checkpoint config incompatible: {0}")]
    ConfigMismatch(String),
    #[error("bad checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
}

/// Adam moment estimates, index-aligned with the weight store's entry order.
#[derive(Clone, Debug)]
pub struct OptState {
    /// Bias-correction step count (number of optimizer updates applied).
    pub step: u64,
    pub m: Vec<ArrayD<f32>>,
    pub v: Vec<ArrayD<f32>>,
}

impl OptState {
    pub fn fresh(weights: &ParamStore) -> Self {
        let zeros: Vec<ArrayD<f32>> =
            weights.iter().map(|(_, a)| ArrayD::zeros(a.raw_dim())).collect();
        OptState { step: 0, m: zeros.clone(), v: zeros }
    }
}

/// Position of the training RNG, sufficient to reproduce its stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(seed: u64, rng: &rand_chacha::ChaCha8Rng) -> Self {
        RngState { seed, word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> rand_chacha::ChaCha8Rng {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything a training run needs to stop and continue: weights, optimizer
/// moments, stage/step counters, the config snapshot, and the RNG position.
#[derive(Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub stage: Stage,
    /// Steps completed within the current stage.
    pub step: u64,
    pub epoch: u64,
    pub weights: ParamStore,
    pub opt: Option<OptState>,
    pub rng: RngState,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    stage: Stage,
    step: u64,
    epoch: u64,
    opt_step: Option<u64>,
    rng_seed: u64,
    /// u128 as decimal text; JSON numbers cannot carry it.
    rng_word_pos: String,
    tensors: Vec<TensorEntry>,
}

fn tensor_bytes(a: &ArrayD<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(a.len() * 4);
    for &v in a.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn tensor_from_bytes(name: &str, shape: &[usize], bytes: &[u8]) -> Result<ArrayD<f32>, CheckpointError> {
    let n: usize = shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(CheckpointError::Corrupt(format!(
            "tensor `{name}`: {} bytes for shape {shape:?}",
            bytes.len()
        )));
    }
    let vals: Vec<f32> =
        bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(ArrayD::from_shape_vec(IxDyn(shape), vals).expect("shape/len checked above"))
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut dir: Vec<TensorEntry> = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        let push = |name: String, a: &ArrayD<f32>, dir: &mut Vec<TensorEntry>, payload: &mut Vec<u8>| {
            let bytes = tensor_bytes(a);
            dir.push(TensorEntry {
                name,
                dtype: "f32".into(),
                shape: a.shape().to_vec(),
                offset: payload.len() as u64,
                len: bytes.len() as u64,
            });
            payload.extend_from_slice(&bytes);
        };
        for (name, a) in self.weights.iter() {
            push(name.to_string(), a, &mut dir, &mut payload);
        }
        if let Some(opt) = &self.opt {
            for ((name, _), m) in self.weights.iter().zip(&opt.m) {
                push(format!("{OPT_M}{name}"), m, &mut dir, &mut payload);
            }
            for ((name, _), v) in self.weights.iter().zip(&opt.v) {
                push(format!("{OPT_V}{name}"), v, &mut dir, &mut payload);
            }
        }
        let header = Header {
            config: self.config.clone(),
            stage: self.stage,
            step: self.step,
            epoch: self.epoch,
            opt_step: self.opt.as_ref().map(|o| o.step),
            rng_seed: self.rng.seed,
            rng_word_pos: self.rng.word_pos.to_string(),
            tensors: dir,
        };
        let header_json = serde_json::to_vec(&header)?;

        let mut file = Vec::with_capacity(4 + 4 + 8 + header_json.len() + payload.len() + 32);
        file.extend_from_slice(MAGIC);
        file.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        file.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        file.extend_from_slice(&header_json);
        file.extend_from_slice(&payload);
        let digest = Sha256::digest(&file);
        file.extend_from_slice(&digest);

        let io = |e: std::io::Error| CheckpointError::Io { path: path.to_path_buf(), source: e };
        let tmp = path.with_file_name(format!(
            "{}.tmp{}",
            path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default(),
            std::process::id()
        ));
        std::fs::write(&tmp, &file)
            .map_err(|e| CheckpointError::Io { path: tmp.clone(), source: e })?;
        std::fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        let bytes = std::fs::read(path)
            .map_err(|e| CheckpointError::Io { path: path.to_path_buf(), source: e })?;
        if bytes.len() >= 4 && &bytes[0..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < 4 + 4 + 8 + 32 {
            return Err(CheckpointError::ChecksumMismatch);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let body_end = bytes.len() - 32;
        let digest = Sha256::digest(&bytes[..body_end]);
        if digest.as_slice() != &bytes[body_end..] {
            return Err(CheckpointError::ChecksumMismatch);
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        if 16 + header_len > body_end {
            return Err(CheckpointError::Corrupt("header overruns file".into()));
        }
        let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])?;
        header.config.validate().map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        let payload = &bytes[16 + header_len..body_end];

        let mut weights: Vec<(String, ArrayD<f32>)> = Vec::new();
        let mut moments: std::collections::HashMap<String, ArrayD<f32>> = Default::default();
        for entry in &header.tensors {
            if entry.dtype != "f32" {
                return Err(CheckpointError::Corrupt(format!(
                    "tensor `{}` has unsupported dtype `{}`",
                    entry.name, entry.dtype
                )));
            }
            let (start, end) = (entry.offset as usize, (entry.offset + entry.len) as usize);
            if end > payload.len() || start > end {
                return Err(CheckpointError::Corrupt(format!(
                    "tensor `{}` overruns the payload",
                    entry.name
                )));
            }
            let a = tensor_from_bytes(&entry.name, &entry.shape, &payload[start..end])?;
            if entry.name.starts_with(OPT_M) || entry.name.starts_with(OPT_V) {
                moments.insert(entry.name.clone(), a);
            } else {
                weights.push((entry.name.clone(), a));
            }
        }
        let weights = ParamStore::from_entries(weights);
        validate_against_config(&header.config.model, &weights)?;

        let opt = match header.opt_step {
            None if moments.is_empty() => None,
            Some(step) => {
                let mut m = Vec::with_capacity(weights.len());
                let mut v = Vec::with_capacity(weights.len());
                for (name, w) in weights.iter() {
                    for (prefix, dst) in [(OPT_M, &mut m), (OPT_V, &mut v)] {
                        let key = format!("{prefix}{name}");
                        let a = moments.remove(&key).ok_or_else(|| {
                            CheckpointError::Corrupt(format!("missing moment `{key}`"))
                        })?;
                        if a.shape() != w.shape() {
                            return Err(CheckpointError::Corrupt(format!(
                                "moment `{key}` shape {:?} != weight shape {:?}",
                                a.shape(),
                                w.shape()
                            )));
                        }
                        dst.push(a);
                    }
                }
                Some(OptState { step, m, v })
            }
            None => {
                return Err(CheckpointError::Corrupt(
                    "optimizer moments present but opt_step missing".into(),
                ))
            }
        };
        if !moments.is_empty() {
            return Err(CheckpointError::Corrupt(format!(
                "{} orphaned optimizer tensors",
                moments.len()
            )));
        }
        let word_pos: u128 = header
            .rng_word_pos
            .parse()
            .map_err(|_| CheckpointError::Corrupt("bad rng_word_pos".into()))?;
        Ok(Checkpoint {
            config: header.config,
            stage: header.stage,
            step: header.step,
            epoch: header.epoch,
            weights,
            opt,
            rng: RngState { seed: header.rng_seed, word_pos },
        })
    }
}

/// The stored tensors must be exactly those the config enumerates, shape for
/// shape, so a loaded checkpoint can never half-fit a model.
fn validate_against_config(cfg: &ModelConfig, weights: &ParamStore) -> Result<(), CheckpointError> {
    let expected = ParamStore::build(cfg, &ArchVariant::default(), InitPolicy::Standard, 0);
    if expected.len() != weights.len() {
        return Err(CheckpointError::Corrupt(format!(
            "tensor directory has {} weight tensors, config enumerates {}",
            weights.len(),
            expected.len()
        )));
    }
    for ((en, ea), (gn, ga)) in expected.iter().zip(weights.iter()) {
        if en != gn || ea.shape() != ga.shape() {
            return Err(CheckpointError::Corrupt(format!(
                "tensor `{gn}` {:?} where config expects `{en}` {:?}",
                ga.shape(),
                ea.shape()
            )));
        }
    }
    Ok(())
}

/// Guards loading a checkpoint into a differently-configured run.
pub fn ensure_model_compat(
    requested: &ModelConfig,
    stored: &ModelConfig,
) -> Result<(), CheckpointError> {
    if requested.base_width != stored.base_width {
        return Err(CheckpointError::WidthMismatch {
            requested: requested.base_width,
            stored: stored.base_width,
        });
    }
    if requested != stored {
        return Err(CheckpointError::ConfigMismatch(format!(
            "stored {stored:?} vs requested {requested:?}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::model::{FlowMode, Model};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tempfile::TempDir;

    fn small_checkpoint() -> Checkpoint {
        let cfg = ModelConfig::with_base_width(2, 1);
        let mut run = RunConfig::default();
        run.model = cfg.clone();
        let weights =
            ParamStore::build(&cfg, &ArchVariant::default(), InitPolicy::AllRandom, 42);
        let mut opt = OptState::fresh(&weights);
        opt.step = 17;
        for m in &mut opt.m {
            m.mapv_inplace(|_| 0.125);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let _: u64 = rand::Rng::gen(&mut rng);
        Checkpoint {
            config: run,
            stage: Stage::Full,
            step: 321,
            epoch: 5,
            weights,
            opt: Some(opt),
            rng: RngState::capture(9, &rng),
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("model.ckpt");
        let ck = small_checkpoint();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();

        assert_eq!(back.config, ck.config);
        assert_eq!(back.stage, Stage::Full);
        assert_eq!(back.step, 321);
        assert_eq!(back.epoch, 5);
        assert_eq!(back.rng, ck.rng);
        let opt = back.opt.as_ref().unwrap();
        assert_eq!(opt.step, 17);
        for ((_, a), b) in ck.weights.iter().zip(back.weights.iter().map(|(_, b)| b)) {
            assert_eq!(a, b);
        }
        for (a, b) in ck.opt.as_ref().unwrap().m.iter().zip(&opt.m) {
            assert_eq!(a, b);
        }

        // the restored RNG continues the stream, not restarts it
        let mut orig = ck.rng.restore();
        let mut rest = back.rng.restore();
        assert_eq!(rand::Rng::gen::<u64>(&mut orig), rand::Rng::gen::<u64>(&mut rest));

        let probe0 = crate::gradcheck::test_array::<f32>(&[3, 32, 32], 1, 0.0, 1.0);
        let probe1 = crate::gradcheck::test_array::<f32>(&[3, 32, 32], 2, 0.0, 1.0);
        let before = Model::from_store(ck.config.model.clone(), ck.weights)
            .interpolate(&probe0, &probe1, FlowMode::Original)
            .unwrap();
        let after = Model::from_store(back.config.model.clone(), back.weights)
            .interpolate(&probe0, &probe1, FlowMode::Original)
            .unwrap();
        assert_eq!(before.frame, after.frame, "probe outputs must round-trip bitwise");
    }

    #[test]
    fn weights_only_checkpoints_drop_the_optimizer() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("weights.ckpt");
        let mut ck = small_checkpoint();
        ck.opt = None;
        ck.save(&path).unwrap();
        assert!(Checkpoint::load(&path).unwrap().opt.is_none());
    }

    #[test]
    fn corruption_and_truncation_are_caught() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("model.ckpt");
        small_checkpoint().save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let truncated = dir.path().join("truncated.ckpt");
        std::fs::write(&truncated, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(
            Checkpoint::load(&truncated),
            Err(CheckpointError::ChecksumMismatch)
        ));

        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 0x40;
        let corrupt = dir.path().join("corrupt.ckpt");
        std::fs::write(&corrupt, &flipped).unwrap();
        assert!(matches!(Checkpoint::load(&corrupt), Err(CheckpointError::ChecksumMismatch)));

        let other = dir.path().join("other.bin");
        std::fs::write(&other, b"PK\x03\x04 definitely not a checkpoint").unwrap();
        assert!(matches!(Checkpoint::load(&other), Err(CheckpointError::BadMagic)));

        assert!(matches!(
            Checkpoint::load(&dir.path().join("absent.ckpt")),
            Err(CheckpointError::Io { .. })
        ));
    }

    #[test]
    fn width_mismatch_names_both_widths() {
        let stored = ModelConfig::with_base_width(2, 1);
        let requested = ModelConfig::with_base_width(4, 1);
        let err = ensure_model_compat(&requested, &stored).unwrap_err().to_string();
        assert!(err.contains('2') && err.contains('4'), "{err}");
        ensure_model_compat(&stored, &stored.clone()).unwrap();

        let mut kernels = stored.clone();
        kernels.highres_kernels = [3, 3, 3];
        assert!(matches!(
            ensure_model_compat(&kernels, &stored),
            Err(CheckpointError::ConfigMismatch(_))
        ));
    }

    #[test]
    fn saving_replaces_atomically() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("model.ckpt");
        let ck = small_checkpoint();
        ck.save(&path).unwrap();
        let first = std::fs::read(&path).unwrap();
        ck.save(&path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), first, "identical state, identical bytes");
        let leftovers: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_name() != "model.ckpt")
            .collect();
        assert!(leftovers.is_empty(), "temp files must not survive: {leftovers:?}");
    }
}
