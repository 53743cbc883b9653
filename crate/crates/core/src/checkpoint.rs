//! Versioned binary checkpoints.
//!
//! Layout: `MCFNETCK` magic, `u32` format version, `u64` header length, a
//! JSON header (epoch, config, RNG state and a tensor index), the tensors as
//! little-endian `f32`, and a SHA-256 digest of everything before it. A
//! pretty-printed JSON copy of the config is written next to the file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::Mcfnet;
use crate::nn::{group_of, AdamState};
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 8] = b"MCFNETCK";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const PREAMBLE_LEN: usize = 8 + 4 + 8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal string; the position is a 128-bit counter.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().unwrap_or(0));
        rng
    }
}

/// Everything needed to resume training or run inference.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub epoch: usize,
    pub step: u64,
    pub config: TrainConfig,
    /// Parameter name to value, for every group of the model.
    pub params: BTreeMap<String, Tensor>,
    pub generator_opt: AdamState,
    pub discriminator_opt: AdamState,
    pub rng: RngState,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    key: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    epoch: usize,
    step: u64,
    config: TrainConfig,
    rng: RngState,
    generator_steps: u64,
    discriminator_steps: u64,
    tensors: Vec<TensorEntry>,
}

const PARAM: &str = "param/";
const GEN_M: &str = "gen_opt/m/";
const GEN_V: &str = "gen_opt/v/";
const DISC_M: &str = "disc_opt/m/";
const DISC_V: &str = "disc_opt/v/";

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

impl Checkpoint {
    pub fn capture(
        config: &TrainConfig,
        model: &Mcfnet,
        generator_opt: AdamState,
        discriminator_opt: AdamState,
        rng: RngState,
        epoch: usize,
        step: u64,
    ) -> Result<Self> {
        let params = model
            .store()
            .vars()
            .into_iter()
            .map(|(name, var)| Ok((name, var.as_tensor().copy()?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            epoch,
            step,
            config: config.clone(),
            params,
            generator_opt,
            discriminator_opt,
            rng,
        })
    }

    /// Path of the JSON config sidecar for a checkpoint file.
    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".json");
        path.with_file_name(name)
    }

    fn entries(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self.params.iter().map(|(k, t)| (format!("{PARAM}{k}"), t)).collect();
        for (state, m_prefix, v_prefix) in [
            (&self.generator_opt, GEN_M, GEN_V),
            (&self.discriminator_opt, DISC_M, DISC_V),
        ] {
            for (k, (m, v)) in &state.moments {
                out.push((format!("{m_prefix}{k}"), m));
                out.push((format!("{v_prefix}{k}"), v));
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let entries = self.entries();
        let mut payload = Vec::new();
        let mut index = Vec::with_capacity(entries.len());
        for (key, t) in &entries {
            let values = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            payload.reserve(values.len() * 4);
            for v in values {
                payload.extend_from_slice(&v.to_le_bytes());
            }
            index.push(TensorEntry {
                key: key.clone(),
                shape: t.dims().to_vec(),
            });
        }
        let header = serde_json::to_vec(&Header {
            epoch: self.epoch,
            step: self.step,
            config: self.config.clone(),
            rng: self.rng.clone(),
            generator_steps: self.generator_opt.step,
            discriminator_steps: self.discriminator_opt.step,
            tensors: index,
        })?;
        let mut out = Vec::with_capacity(PREAMBLE_LEN + header.len() + payload.len() + DIGEST_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREAMBLE_LEN + DIGEST_LEN || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file (bad magic or truncated header)"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch (file truncated or modified)"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion {
                expected: FORMAT_VERSION,
                found: version,
            });
        }
        let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = PREAMBLE_LEN
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| corrupt("header length exceeds file size"))?;
        let header: Header = serde_json::from_slice(&body[PREAMBLE_LEN..header_end])
            .map_err(|e| corrupt(format!("unreadable header: {e}")))?;
        let mut payload = &body[header_end..];

        let mut params = BTreeMap::new();
        let mut gen_moments: BTreeMap<String, (Option<Tensor>, Option<Tensor>)> = BTreeMap::new();
        let mut disc_moments: BTreeMap<String, (Option<Tensor>, Option<Tensor>)> = BTreeMap::new();
        for entry in header.tensors {
            let count: usize = entry.shape.iter().product();
            if payload.len() < count * 4 {
                return Err(corrupt(format!("payload too short for `{}`", entry.key)));
            }
            let (raw, rest) = payload.split_at(count * 4);
            payload = rest;
            let values: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::from_vec(values, entry.shape.as_slice(), &Device::Cpu)?;
            let key = entry.key;
            if let Some(name) = key.strip_prefix(PARAM) {
                params.insert(name.to_string(), t);
            } else if let Some(name) = key.strip_prefix(GEN_M) {
                gen_moments.entry(name.to_string()).or_default().0 = Some(t);
            } else if let Some(name) = key.strip_prefix(GEN_V) {
                gen_moments.entry(name.to_string()).or_default().1 = Some(t);
            } else if let Some(name) = key.strip_prefix(DISC_M) {
                disc_moments.entry(name.to_string()).or_default().0 = Some(t);
            } else if let Some(name) = key.strip_prefix(DISC_V) {
                disc_moments.entry(name.to_string()).or_default().1 = Some(t);
            } else {
                return Err(corrupt(format!("unknown tensor key `{key}`")));
            }
        }
        if !payload.is_empty() {
            return Err(corrupt("trailing bytes after the last tensor"));
        }
        let finish = |m: BTreeMap<String, (Option<Tensor>, Option<Tensor>)>, step| -> Result<AdamState> {
            let moments = m
                .into_iter()
                .map(|(k, pair)| match pair {
                    (Some(a), Some(b)) => Ok((k, (a, b))),
                    _ => Err(corrupt(format!("incomplete optimizer state for `{k}`"))),
                })
                .collect::<Result<_>>()?;
            Ok(AdamState { step, moments })
        };
        Ok(Self {
            epoch: header.epoch,
            step: header.step,
            config: header.config,
            params,
            generator_opt: finish(gen_moments, header.generator_steps)?,
            discriminator_opt: finish(disc_moments, header.discriminator_steps)?,
            rng: header.rng,
        })
    }

    /// Writes the checkpoint and its JSON sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))?;
        let sidecar = Self::sidecar_path(path);
        let json = serde_json::json!({
            "format_version": FORMAT_VERSION,
            "epoch": self.epoch,
            "step": self.step,
            "config": self.config,
        });
        fs::write(&sidecar, serde_json::to_string_pretty(&json)?).map_err(|e| Error::io(&sidecar, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Copies the stored parameters into `model`. Every model parameter must
    /// be present with the same shape, and the checkpoint may not hold
    /// parameters the model lacks.
    pub fn load_into(&self, model: &Mcfnet) -> Result<()> {
        let vars = model.store().vars();
        for (name, var) in &vars {
            let stored = self.params.get(name).ok_or_else(|| Error::MissingParam {
                group: group_of(name).to_string(),
                name: name.clone(),
            })?;
            if stored.dims() != var.dims() {
                return Err(Error::ParamShape {
                    group: group_of(name).to_string(),
                    name: name.clone(),
                    expected: var.dims().to_vec(),
                    found: stored.dims().to_vec(),
                });
            }
        }
        if let Some(extra) = self.params.keys().find(|k| !vars.iter().any(|(n, _)| n == *k)) {
            return Err(Error::Config(format!(
                "checkpoint parameter `{extra}` (group `{}`) does not exist in this model",
                group_of(extra)
            )));
        }
        for (name, var) in &vars {
            var.set(&self.params[name].to_dtype(model.dtype())?.to_device(model.device())?)?;
        }
        Ok(())
    }

    /// Builds the model described by the stored config and loads the
    /// parameters into it.
    pub fn build_model(&self, dtype: DType, device: &Device) -> Result<Mcfnet> {
        let model = Mcfnet::new(&self.config.model, self.config.seed, dtype, device)?;
        self.load_into(&model)?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic_pairs, Dataset};
    use crate::model::ModelConfig;
    use crate::trainer::Trainer;

    fn tiny() -> TrainConfig {
        let mut model = ModelConfig::desk();
        model.grm_width = 2;
        model.gb_width = 2;
        model.cfem_width = 2;
        model.feature_channels = 2;
        model.fusion_width = 2;
        model.spade_hidden = 2;
        model.disc_width = 2;
        TrainConfig {
            total_epochs: 2,
            stage1_end: 1,
            batch_size: 4,
            model,
            use_augmentation: false,
            ..TrainConfig::default()
        }
    }

    fn trained() -> Trainer {
        let ds = Dataset::from_pairs(make_synthetic_pairs(4, 32, 3).unwrap());
        let mut t = Trainer::new(tiny()).unwrap();
        t.run_epoch(&ds).unwrap();
        t
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let t = trained();
        let ckpt = t.checkpoint().unwrap();
        let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
        assert_eq!(back.epoch, 1);
        assert_eq!(back.config, ckpt.config);
        assert_eq!(back.rng, ckpt.rng);
        assert_eq!(back.generator_opt.step, ckpt.generator_opt.step);
        let model = back.build_model(DType::F32, &Device::Cpu).unwrap();
        let x = Tensor::rand(0f32, 1.0, (2, 1, 32, 32), &Device::Cpu).unwrap();
        let a = t.model().colorize(&x).unwrap().y_rgb.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let b = model.colorize(&x).unwrap().y_rgb.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn truncation_and_version_are_detected() {
        let bytes = trained().checkpoint().unwrap().to_bytes().unwrap();
        let cut = &bytes[..bytes.len() - 100];
        assert!(matches!(Checkpoint::from_bytes(cut), Err(Error::CorruptCheckpoint(m)) if m.contains("checksum")));

        let mut other = bytes[..bytes.len() - DIGEST_LEN].to_vec();
        other[8..12].copy_from_slice(&7u32.to_le_bytes());
        let digest = Sha256::digest(&other);
        other.extend_from_slice(&digest);
        assert!(matches!(
            Checkpoint::from_bytes(&other),
            Err(Error::CheckpointVersion { expected: 1, found: 7 })
        ));
    }

    #[test]
    fn width_mismatch_names_the_group() {
        let ckpt = trained().checkpoint().unwrap();
        let mut cfg = ckpt.config.model.clone();
        cfg.gb_width = 3;
        let model = Mcfnet::new(&cfg, 0, DType::F32, &Device::Cpu).unwrap();
        match ckpt.load_into(&model) {
            Err(Error::ParamShape { group, .. }) => assert_eq!(group, "gb"),
            other => panic!("expected a shape error, got {other:?}"),
        }
    }

    #[test]
    fn rng_state_round_trips() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let _: u64 = rng.gen();
        let state = RngState::capture(&rng);
        let mut restored = state.restore();
        assert_eq!(rng.gen::<u64>(), restored.gen::<u64>());
    }

    #[test]
    fn sidecar_is_written() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        trained().checkpoint().unwrap().save(&path).unwrap();
        let side: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(Checkpoint::sidecar_path(&path)).unwrap()).unwrap();
        assert_eq!(side["epoch"], 1);
        assert_eq!(side["config"]["total_epochs"], 2);
        assert_eq!(Checkpoint::load(&path).unwrap().epoch, 1);
    }
}
