//! Cross-modal PET-CT tumour segmentation built from selective state-space
//! scans.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine
//! ([`autodiff`]) carries every layer, from the scan kernels ([`ssm`]) up to
//! the full dual-branch network ([`net`]).

pub mod autodiff;
pub mod bench;
pub mod checkpoint;
pub mod crm;
pub mod data;
pub mod dcim;
pub mod error;
pub mod gradcheck;
pub mod imgops;
pub mod metrics;
pub mod net;
pub mod params;
pub mod ssm;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod vss;

pub use error::{Error, Result};
pub use tensor::{Float, Tensor};
