//! Single-file checkpoints.
//!
//! Layout: the 8-byte magic `CIPACKP1`, a little-endian `u64` header length,
//! a JSON header, then one TSR1 blob per tensor. The header records each
//! tensor's name, byte offset (from the start of the blob section) and shape
//! next to the model and training configuration.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::CipaConfig;
use crate::params::ParamStore;
use crate::tensor::{read_tsr_from, write_tsr_to, Tensor};
use crate::train::{AdamState, TrainConfig, Trainer};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"CIPACKP1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub offset: u64,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model: CipaConfig,
    pub train: TrainConfig,
    pub step: u64,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: CipaConfig,
    pub train: TrainConfig,
    pub step: u64,
    pub store: ParamStore,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn of(t: &Trainer) -> Self {
        Self {
            model: t.model.clone(),
            train: t.cfg.clone(),
            step: t.step,
            store: t.store.clone(),
            adam: t.adam.clone(),
        }
    }

    pub fn into_trainer(self) -> Result<Trainer> {
        Trainer::from_parts(self.model, self.train, self.store, self.adam, self.step)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blobs = Vec::new();
        let mut tensors = Vec::new();
        let mut push = |name: String, t: &Tensor<f32>| -> Result<()> {
            tensors.push(TensorEntry {
                name,
                offset: blobs.len() as u64,
                shape: t.shape().to_vec(),
            });
            write_tsr_to(t, &mut blobs)?;
            Ok(())
        };
        for (i, (_, name, t)) in self.store.iter().enumerate() {
            push(format!("param/{name}"), t)?;
            push(format!("adam_m/{name}"), &Tensor::new(t.shape().to_vec(), self.adam.m[i].clone())?)?;
            push(format!("adam_v/{name}"), &Tensor::new(t.shape().to_vec(), self.adam.v[i].clone())?)?;
        }
        let header = serde_json::to_vec(&CheckpointHeader {
            model: self.model.clone(),
            train: self.train.clone(),
            step: self.step,
            tensors,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + blobs.len());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&blobs);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |d: String| Error::format(origin, d);
        if bytes.len() < 16 || bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = 16usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad(format!("header length {len} exceeds file size")))?;
        let header: CheckpointHeader =
            serde_json::from_slice(&bytes[16..body]).map_err(|e| bad(format!("invalid header: {e}")))?;
        let blobs = &bytes[body..];
        let load = |e: &TensorEntry| -> Result<Tensor<f32>> {
            let start = usize::try_from(e.offset)
                .ok()
                .filter(|&s| s < blobs.len())
                .ok_or_else(|| bad(format!("{}: offset {} out of range", e.name, e.offset)))?;
            let t = read_tsr_from(&blobs[start..], origin)?;
            if t.shape() != e.shape.as_slice() {
                return Err(bad(format!("{}: shape {:?} but header says {:?}", e.name, t.shape(), e.shape)));
            }
            Ok(t)
        };
        if !header.tensors.len().is_multiple_of(3) {
            return Err(bad(format!("{} tensors is not a multiple of 3", header.tensors.len())));
        }
        let mut store = ParamStore::new();
        let mut adam = AdamState { m: Vec::new(), v: Vec::new() };
        for triple in header.tensors.chunks_exact(3) {
            let name = triple[0]
                .name
                .strip_prefix("param/")
                .ok_or_else(|| bad(format!("expected a parameter, found {}", triple[0].name)))?;
            if triple[1].name != format!("adam_m/{name}") || triple[2].name != format!("adam_v/{name}") {
                return Err(bad(format!("moments of {name} are missing or out of order")));
            }
            store.add(name, load(&triple[0])?)?;
            adam.m.push(load(&triple[1])?.into_data());
            adam.v.push(load(&triple[2])?.into_data());
        }
        Ok(Self {
            model: header.model,
            train: header.train,
            step: header.step,
            store,
            adam,
        })
    }

    /// Writes to a sibling temporary file, then renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut tmp = PathBuf::from(path);
        let mut name = path.file_name().unwrap_or_default().to_os_string();
        name.push(".tmp");
        tmp.set_file_name(name);
        let mut f = File::create(&tmp)?;
        let written = f.write_all(&bytes).and_then(|_| f.sync_all());
        if let Err(e) = written {
            let _ = fs::remove_file(&tmp);
            return Err(e.into());
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::format(path, format!("cannot read: {e}")))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthSpec};
    use crate::net::infer;

    fn tiny() -> CipaConfig {
        CipaConfig {
            resolution: 32,
            widths: [4, 8, 16, 32],
            depths: [1, 1, 1, 1],
            state: 4,
            crm_token_len: 8,
            ..CipaConfig::default()
        }
    }

    #[test]
    fn reload_reproduces_inference_and_training() {
        let data = synth_generate(&SynthSpec {
            count: 3,
            resolution: 32,
            radius: [3.0, 6.0],
            ..SynthSpec::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            steps: 4,
            batch_size: 2,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        let mut a = Trainer::new(tiny(), cfg).unwrap();
        a.train_step(&data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        Checkpoint::of(&a).save(&path).unwrap();
        assert!(!dir.path().join("ckpt.bin.tmp").exists());
        let mut b = Checkpoint::load(&path).unwrap().into_trainer().unwrap();
        assert_eq!(b.step, 1);
        let m1 = infer(&a.net, &a.store, &data[0].pet, &data[0].ct).unwrap();
        let m2 = infer(&b.net, &b.store, &data[0].pet, &data[0].ct).unwrap();
        assert_eq!(m1, m2);
        for _ in 0..3 {
            assert_eq!(a.train_step(&data).unwrap(), b.train_step(&data).unwrap());
        }
        assert_eq!(Checkpoint::of(&a).to_bytes().unwrap(), Checkpoint::of(&b).to_bytes().unwrap());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let t = Trainer::new(tiny(), TrainConfig::default()).unwrap();
        let bytes = Checkpoint::of(&t).to_bytes().unwrap();
        let origin = Path::new("x.ckpt");
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], origin).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&wrong, origin), Err(Error::Format { .. })));
    }

    #[test]
    fn mismatched_config_is_refused() {
        let t = Trainer::new(tiny(), TrainConfig::default()).unwrap();
        let mut ck = Checkpoint::of(&t);
        ck.model.widths = [8, 16, 32, 64];
        assert!(matches!(ck.into_trainer(), Err(Error::Config(_))));
    }
}
