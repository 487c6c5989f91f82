use std::fmt;
use std::path::Path;

use radiogen_core::dicom::{DatasetError, DicomError};
use radiogen_core::ensemble::EnsembleError;
use radiogen_core::metrics::MetricsError;
use radiogen_core::synth::SynthError;
use radiogen_core::train::TrainError;
use radiogen_core::vit::{CheckpointError, VitError};
use radiogen_core::volume::VolumeError;

pub const USAGE: &str = "UsageError";

/// An error tagged with the category name printed on stderr.
#[derive(Debug)]
pub struct Failure {
    pub category: &'static str,
    pub message: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

pub fn usage(message: impl Into<String>) -> anyhow::Error {
    Failure { category: USAGE, message: message.into() }.into()
}

pub fn io_failure(path: &Path, err: std::io::Error) -> anyhow::Error {
    Failure { category: "IoError", message: format!("{}: {err}", path.display()) }.into()
}

pub trait Categorized: fmt::Display {
    fn category(&self) -> &'static str;
}

macro_rules! categorized {
    ($($t:ty),*) => {
        $(impl Categorized for $t {
            fn category(&self) -> &'static str {
                <$t>::category(self)
            }
        })*
    };
}

categorized!(
    CheckpointError,
    DatasetError,
    DicomError,
    EnsembleError,
    MetricsError,
    SynthError,
    TrainError,
    VitError,
    VolumeError
);

pub trait OrFail<T> {
    fn or_fail(self) -> anyhow::Result<T>;
}

impl<T, E: Categorized> OrFail<T> for Result<T, E> {
    fn or_fail(self) -> anyhow::Result<T> {
        self.map_err(|e| Failure { category: e.category(), message: e.to_string() }.into())
    }
}

/// `(category, one-line message)` for anything that reaches `main`.
pub fn describe(err: &anyhow::Error) -> (&'static str, String) {
    let category = err.downcast_ref::<Failure>().map_or("RuntimeError", |f| f.category);
    let message = format!("{err:#}").lines().map(str::trim).collect::<Vec<_>>().join(" ");
    (category, message)
}
