//! Modality pairs: preprocessing, augmentation, the synthetic generator and
//! on-disk shards.

mod augment;
mod preprocess;
mod shards;
mod synth;

pub use augment::{augment, crop_side_range, Augmentation};
pub use preprocess::{preprocess_ct, preprocess_pet, HU_WINDOW};
pub use shards::{read_manifest, read_split, write_dataset, Manifest, MANIFEST_NAME, SCHEMA_VERSION};
pub use synth::{generate_raw, synth_generate, split_patients, RawSample, SynthSpec, Tumor};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Co-registered PET and CT planes with an optional tumour mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityPair {
    pub id: String,
    /// `[H, W]`
    pub pet: Tensor<f32>,
    /// `[H, W]`
    pub ct: Tensor<f32>,
    /// `[H, W]` with values in `{0, 1}`
    pub mask: Option<Tensor<f32>>,
    /// Pixel spacing `(row, col)` in millimetres.
    pub spacing: (f64, f64),
}

impl ModalityPair {
    pub fn dims(&self) -> (usize, usize) {
        (self.pet.shape()[0], self.pet.shape()[1])
    }

    /// Checks shapes, the `[0, 255]` value range and mask binarity.
    pub fn validate(&self) -> Result<()> {
        let shape = self.pet.shape();
        if shape.len() != 2 || self.ct.shape() != shape {
            return Err(Error::contract(format!(
                "{}: pet {:?} and ct {:?} must be equal 2D planes",
                self.id,
                shape,
                self.ct.shape()
            )));
        }
        for (name, plane) in [("pet", &self.pet), ("ct", &self.ct)] {
            if let Some(v) = plane.data().iter().find(|v| !(0.0..=255.0).contains(*v)) {
                return Err(Error::contract(format!("{}: {name} value {v} outside [0, 255]", self.id)));
            }
        }
        if let Some(mask) = &self.mask {
            if mask.shape() != shape {
                return Err(Error::contract(format!("{}: mask shape {:?}", self.id, mask.shape())));
            }
            if let Some(v) = mask.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
                return Err(Error::contract(format!("{}: mask value {v} is not binary", self.id)));
            }
        }
        Ok(())
    }
}
