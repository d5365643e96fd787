//! Datasets on disk: `<root>/<split>/<id>.{pet,ct,mask}.tsr` plus a JSON
//! manifest at the root.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ModalityPair, SynthSpec};
use crate::error::{Error, Result};
use crate::tensor::{read_tsr, write_tsr};

pub const MANIFEST_NAME: &str = "manifest.json";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub resolution: usize,
    pub spacing: (f64, f64),
    /// Whether every sample carries a mask file.
    #[serde(default = "yes")]
    pub labelled: bool,
    /// Split name to sample ids.
    pub splits: BTreeMap<String, Vec<String>>,
    /// Generator settings when the data is synthetic.
    #[serde(default)]
    pub generator: Option<SynthSpec>,
}

fn yes() -> bool {
    true
}

impl Manifest {
    /// Schema, non-empty ids and disjoint splits.
    pub fn validate(&self, path: &Path) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::format(
                path,
                format!("schema version {} (expected {SCHEMA_VERSION})", self.schema_version),
            ));
        }
        let mut seen: BTreeMap<&str, &str> = BTreeMap::new();
        for (split, ids) in &self.splits {
            for id in ids {
                if id.is_empty() || id.contains(['/', '\\']) {
                    return Err(Error::format(path, format!("bad sample id {id:?} in split {split}")));
                }
                if let Some(other) = seen.insert(id, split) {
                    return Err(Error::format(
                        path,
                        format!("sample {id} appears in both {other} and {split}"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, name: &str) -> Result<&[String]> {
        self.splits.get(name).map(Vec::as_slice).ok_or_else(|| {
            let known: BTreeSet<_> = self.splits.keys().collect();
            Error::Config(format!("no split {name:?} (have {known:?})"))
        })
    }
}

fn sample_path(root: &Path, split: &str, id: &str, plane: &str) -> PathBuf {
    root.join(split).join(format!("{id}.{plane}.tsr"))
}

/// Writes every split and the manifest; returns the manifest.
pub fn write_dataset(
    root: &Path,
    splits: &[(&str, &[ModalityPair])],
    generator: Option<&SynthSpec>,
) -> Result<Manifest> {
    let first = splits
        .iter()
        .flat_map(|(_, pairs)| pairs.iter())
        .next()
        .ok_or_else(|| Error::contract("cannot write an empty dataset"))?;
    let (h, w) = first.dims();
    if h != w {
        return Err(Error::contract(format!("{}: planes must be square, got {h}x{w}", first.id)));
    }
    let labelled = splits.iter().all(|(_, ps)| ps.iter().all(|p| p.mask.is_some()));
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        resolution: h,
        spacing: first.spacing,
        labelled,
        splits: splits
            .iter()
            .map(|(s, ps)| (s.to_string(), ps.iter().map(|p| p.id.clone()).collect()))
            .collect(),
        generator: generator.cloned(),
    };
    let manifest_path = root.join(MANIFEST_NAME);
    manifest.validate(&manifest_path)?;
    for (split, pairs) in splits {
        fs::create_dir_all(root.join(split))?;
        for p in pairs.iter() {
            p.validate()?;
            if p.dims() != (h, w) {
                return Err(Error::contract(format!("{}: shape {:?} differs from {h}x{w}", p.id, p.dims())));
            }
            write_tsr(&p.pet, &sample_path(root, split, &p.id, "pet"))?;
            write_tsr(&p.ct, &sample_path(root, split, &p.id, "ct"))?;
            if let Some(m) = &p.mask {
                write_tsr(m, &sample_path(root, split, &p.id, "mask"))?;
            }
        }
    }
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(|e| Error::format(&path, format!("cannot read: {e}")))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, format!("invalid manifest: {e}")))?;
    manifest.validate(&path)?;
    Ok(manifest)
}

/// Loads and validates one split. A missing file is reported by path.
pub fn read_split(root: &Path, manifest: &Manifest, split: &str) -> Result<Vec<ModalityPair>> {
    let n = manifest.resolution;
    manifest
        .split(split)?
        .iter()
        .map(|id| {
            let load = |plane: &str| -> Result<_> {
                let path = sample_path(root, split, id, plane);
                if !path.is_file() {
                    return Err(Error::format(path, "missing sample file"));
                }
                let t = read_tsr(&path)?;
                if t.shape() != [n, n] {
                    return Err(Error::format(path, format!("shape {:?}, expected [{n}, {n}]", t.shape())));
                }
                Ok(t)
            };
            let pair = ModalityPair {
                id: id.clone(),
                pet: load("pet")?,
                ct: load("ct")?,
                mask: if manifest.labelled { Some(load("mask")?) } else { None },
                spacing: manifest.spacing,
            };
            pair.validate()?;
            Ok(pair)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_generate;

    fn dataset(dir: &Path) -> (Vec<ModalityPair>, Manifest) {
        let spec = SynthSpec {
            count: 5,
            resolution: 32,
            radius: [2.0, 5.0],
            ..SynthSpec::default()
        };
        let pairs = synth_generate(&spec).unwrap();
        let m = write_dataset(dir, &[("train", &pairs[..3]), ("test", &pairs[3..])], Some(&spec)).unwrap();
        (pairs, m)
    }

    #[test]
    fn round_trip_preserves_every_plane() {
        let dir = tempfile::tempdir().unwrap();
        let (pairs, m) = dataset(dir.path());
        let back = read_manifest(dir.path()).unwrap();
        assert_eq!(back, m);
        let train = read_split(dir.path(), &back, "train").unwrap();
        let test = read_split(dir.path(), &back, "test").unwrap();
        assert_eq!([train, test].concat(), pairs);
    }

    #[test]
    fn missing_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let (pairs, m) = dataset(dir.path());
        let victim = sample_path(dir.path(), "test", &pairs[4].id, "mask");
        fs::remove_file(&victim).unwrap();
        let err = read_split(dir.path(), &m, "test").unwrap_err();
        assert!(err.to_string().contains(&victim.display().to_string()), "{err}");
    }

    #[test]
    fn overlapping_splits_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let (pairs, _) = dataset(dir.path());
        let err = write_dataset(dir.path(), &[("train", &pairs[..3]), ("test", &pairs[2..])], None).unwrap_err();
        assert!(err.to_string().contains("both"), "{err}");
    }

    #[test]
    fn unknown_split_and_schema_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let (_, mut m) = dataset(dir.path());
        assert!(matches!(read_split(dir.path(), &m, "val"), Err(Error::Config(_))));
        m.schema_version = 9;
        fs::write(dir.path().join(MANIFEST_NAME), serde_json::to_string(&m).unwrap()).unwrap();
        assert!(matches!(read_manifest(dir.path()), Err(Error::Format { .. })));
    }
}
