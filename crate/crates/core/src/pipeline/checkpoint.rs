//! Checkpoint container: magic bytes, a length-prefixed JSON manifest, then raw
//! little-endian array payloads.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::ParamStore;
use crate::tensor::Tensor;

use super::config::{Stage, TrainConfig};
use super::optim::AdamState;

pub const MAGIC: &[u8; 8] = b"COREUDA1";
pub const FORMAT_VERSION: u32 = 1;
pub const DTYPE: &str = "f64";

/// Seed and position of the training random stream at save time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricEntry {
    pub stage: Stage,
    pub epoch: usize,
    pub name: String,
    pub value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrayKind {
    Param,
    Buffer,
    TeacherParam,
    TeacherBuffer,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub kind: ArrayKind,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the payload that follows the manifest.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub stage: Stage,
    pub epoch: usize,
    pub config_hash: String,
    pub config: TrainConfig,
    pub rng: RngState,
    pub adam_step: u64,
    pub ema_step: u64,
    pub metric_history: Vec<MetricEntry>,
    pub arrays: Vec<ArrayEntry>,
    pub payload_bytes: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    /// Number of completed epochs.
    pub epoch: usize,
    pub config: TrainConfig,
    pub rng: RngState,
    /// The trained network; the student during fine-tuning.
    pub params: ParamStore,
    pub teacher: Option<ParamStore>,
    pub optimizer: AdamState,
    pub ema_step: u64,
    pub metric_history: Vec<MetricEntry>,
}

impl Checkpoint {
    pub fn config_hash(&self) -> String {
        self.config.hash()
    }

    /// The network to evaluate: the teacher if present, otherwise the trained parameters.
    pub fn eval_params(&self) -> &ParamStore {
        self.teacher.as_ref().unwrap_or(&self.params)
    }

    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metric_history.iter().rev().find(|m| m.name == name).map(|m| m.value)
    }

    fn arrays(&self) -> Vec<(ArrayKind, &String, &Tensor)> {
        let mut out: Vec<(ArrayKind, &String, &Tensor)> = Vec::new();
        out.extend(self.params.params().map(|(k, v)| (ArrayKind::Param, k, v)));
        out.extend(self.params.buffers().map(|(k, v)| (ArrayKind::Buffer, k, v)));
        if let Some(t) = &self.teacher {
            out.extend(t.params().map(|(k, v)| (ArrayKind::TeacherParam, k, v)));
            out.extend(t.buffers().map(|(k, v)| (ArrayKind::TeacherBuffer, k, v)));
        }
        out.extend(self.optimizer.m.iter().map(|(k, v)| (ArrayKind::AdamM, k, v)));
        out.extend(self.optimizer.v.iter().map(|(k, v)| (ArrayKind::AdamV, k, v)));
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::new();
        for (kind, name, t) in self.arrays() {
            entries.push(ArrayEntry {
                name: name.clone(),
                kind,
                shape: t.shape().to_vec(),
                dtype: DTYPE.into(),
                offset: payload.len() as u64,
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            stage: self.stage,
            epoch: self.epoch,
            config_hash: self.config_hash(),
            config: self.config.clone(),
            rng: self.rng,
            adam_step: self.optimizer.step,
            ema_step: self.ema_step,
            metric_history: self.metric_history.clone(),
            arrays: entries,
            payload_bytes: payload.len() as u64,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (manifest, payload) = read_manifest(bytes)?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: manifest.format_version,
                expected: FORMAT_VERSION,
            });
        }
        if payload.len() as u64 != manifest.payload_bytes {
            return Err(Error::CorruptFile(format!(
                "payload has {} bytes, manifest says {}",
                payload.len(),
                manifest.payload_bytes
            )));
        }
        let mut params = ParamStore::new();
        let mut teacher = ParamStore::new();
        let mut optimizer = AdamState {
            step: manifest.adam_step,
            ..AdamState::default()
        };
        for entry in &manifest.arrays {
            let t = read_array(entry, payload)?;
            let name = entry.name.clone();
            match entry.kind {
                ArrayKind::Param => params.set_param(name, t),
                ArrayKind::Buffer => params.set_buffer(name, t),
                ArrayKind::TeacherParam => teacher.set_param(name, t),
                ArrayKind::TeacherBuffer => teacher.set_buffer(name, t),
                ArrayKind::AdamM => {
                    optimizer.m.insert(name, t);
                }
                ArrayKind::AdamV => {
                    optimizer.v.insert(name, t);
                }
            }
        }
        let has_teacher = manifest
            .arrays
            .iter()
            .any(|a| matches!(a.kind, ArrayKind::TeacherParam | ArrayKind::TeacherBuffer));
        let ckpt = Checkpoint {
            stage: manifest.stage,
            epoch: manifest.epoch,
            config: manifest.config,
            rng: manifest.rng,
            params,
            teacher: has_teacher.then_some(teacher),
            optimizer,
            ema_step: manifest.ema_step,
            metric_history: manifest.metric_history,
        };
        if ckpt.config_hash() != manifest.config_hash {
            return Err(Error::CorruptFile("config hash does not match the stored config".into()));
        }
        Ok(ckpt)
    }
}

/// Splits a container into its manifest and raw payload.
pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::CorruptFile("missing COREUDA1 header".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::CorruptFile(format!("manifest length {len} exceeds file")))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..end])
        .map_err(|e| Error::CorruptFile(format!("manifest: {e}")))?;
    Ok((manifest, &bytes[end..]))
}

fn read_array(entry: &ArrayEntry, payload: &[u8]) -> Result<Tensor> {
    if entry.dtype != DTYPE {
        return Err(Error::CorruptFile(format!("`{}` has dtype {}", entry.name, entry.dtype)));
    }
    let count: usize = entry.shape.iter().product();
    let start = entry.offset as usize;
    let end = start + count * 8;
    let raw = payload
        .get(start..end)
        .ok_or_else(|| Error::CorruptFile(format!("`{}` runs past the payload", entry.name)))?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(Tensor::from_vec(&entry.shape, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut params = ParamStore::new();
        params.set_param("a", Tensor::from_vec(&[2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300]));
        params.set_param("b", Tensor::from_vec(&[3], vec![0.1, 0.2, 0.3]));
        Checkpoint {
            stage: Stage::Pretrain,
            epoch: 3,
            config: TrainConfig::toy(Stage::Pretrain),
            rng: RngState { seed: 7, word_pos: 1234 },
            params,
            teacher: None,
            optimizer: AdamState::default(),
            ema_step: 0,
            metric_history: vec![MetricEntry {
                stage: Stage::Pretrain,
                epoch: 3,
                name: "loss".into(),
                value: 1.5,
            }],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut ck = sample();
        let mut teacher = ck.params.clone();
        teacher.set_buffer("rm", Tensor::from_vec(&[1], vec![std::f64::consts::PI]));
        ck.teacher = Some(teacher);
        ck.optimizer.step = 9;
        ck.optimizer.m.insert("a".into(), Tensor::filled(&[2, 2], 0.5));
        ck.optimizer.v.insert("a".into(), Tensor::filled(&[2, 2], 0.25));
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.params.checksum(), ck.params.checksum());
        assert_eq!(back, ck);
    }

    proptest::proptest! {
        #[test]
        fn metric_values_survive_exactly(values in proptest::collection::vec(proptest::num::f64::NORMAL, 1..8)) {
            let mut ck = sample();
            ck.metric_history = values
                .iter()
                .map(|&value| MetricEntry { stage: Stage::Pretrain, epoch: 0, name: "m".into(), value })
                .collect();
            let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
            proptest::prop_assert_eq!(back, ck);
        }
    }

    #[test]
    fn hand_parsed_manifest() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"COREUDA1");
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json: serde_json::Value = serde_json::from_slice(&bytes[16..16 + len]).unwrap();
        let arrays = json["arrays"].as_array().unwrap();
        assert_eq!(arrays.len(), 2);
        assert_eq!(arrays[0]["name"], "a");
        assert_eq!(arrays[0]["shape"], serde_json::json!([2, 2]));
        assert_eq!(arrays[0]["offset"], 0);
        assert_eq!(arrays[1]["name"], "b");
        assert_eq!(arrays[1]["offset"], 32);
        assert_eq!(bytes.len(), 16 + len + 7 * 8);
        let b0 = f64::from_le_bytes(bytes[16 + len + 32..16 + len + 40].try_into().unwrap());
        assert_eq!(b0, 0.1);
    }

    #[test]
    fn corrupt_and_versioned_files() {
        let bytes = sample().to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::CorruptFile(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..20]), Err(Error::CorruptFile(_))));
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad_magic), Err(Error::CorruptFile(_))));

        let (mut manifest, payload) = read_manifest(&bytes).unwrap();
        manifest.format_version = 99;
        let json = serde_json::to_vec(&manifest).unwrap();
        let mut v = MAGIC.to_vec();
        v.extend((json.len() as u64).to_le_bytes());
        v.extend(json);
        v.extend(payload);
        assert!(matches!(
            Checkpoint::from_bytes(&v),
            Err(Error::VersionMismatch { found: 99, expected: 1 })
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        sample().save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), sample());
        assert!(Checkpoint::load(&dir.path().join("missing")).is_err());
    }
}
