//! Radiogenomic MGMT classification pipeline.
//!
//! DICOM series are parsed into volumes ([`dicom`], [`volume`]), augmented
//! ([`augment`]), classified per MRI modality by a 3D vision transformer
//! ([`vit`], trained by [`train`]), combined across modalities ([`ensemble`])
//! and scored ([`metrics`]). [`synth`] writes synthetic datasets with a
//! planted signal so the whole chain can run without the challenge data.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod dicom;
pub mod ensemble;
pub mod metrics;
mod modality;
pub mod synth;
pub mod train;
pub mod vit;
pub mod volume;

pub use modality::{Modality, ParseModalityError};
pub use volume::Volume;
