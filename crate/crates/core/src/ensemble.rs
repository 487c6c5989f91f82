//! Combining per-modality probabilities: plain averaging or a logistic
//! regression stacker.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dicom::normalize_subject_id;
use crate::Modality;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("subject {0} has no modality probabilities")]
    EmptyPrediction(String),
    #[error("subject {subject} is missing {modality}")]
    MissingModality { subject: String, modality: Modality },
    #[error("stacking needs both classes in the labels")]
    SingleClassLabels,
    #[error("no label for subject {0}")]
    MissingLabel(String),
    #[error("{predictions} predictions but {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("subject {subject}: probability {value} outside [0,1]")]
    ProbabilityOutOfRange { subject: String, value: f64 },
    #[error("invalid stacking options: {0}")]
    InvalidOptions(String),
    #[error("{path}: {reason}")]
    MalformedCsv { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
}

impl EnsembleError {
    pub fn category(&self) -> &'static str {
        match self {
            EnsembleError::EmptyPrediction(_) => "EmptyPrediction",
            EnsembleError::MissingModality { .. } => "MissingModality",
            EnsembleError::SingleClassLabels => "SingleClassLabels",
            EnsembleError::MissingLabel(_) => "MissingLabel",
            EnsembleError::LengthMismatch { .. } => "LengthMismatch",
            EnsembleError::ProbabilityOutOfRange { .. } => "ProbabilityOutOfRange",
            EnsembleError::InvalidOptions(_) => "InvalidOptions",
            EnsembleError::MalformedCsv { .. } => "MalformedCsv",
            EnsembleError::Io { .. } => "IoError",
            EnsembleError::Json { .. } => "BadStacker",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub subject_id: String,
    pub per_modality: BTreeMap<Modality, f64>,
    pub final_probability: Option<f64>,
}

impl Prediction {
    pub fn new(subject_id: impl Into<String>) -> Self {
        Prediction { subject_id: subject_id.into(), per_modality: BTreeMap::new(), final_probability: None }
    }

    pub fn with(mut self, modality: Modality, p: f64) -> Self {
        self.per_modality.insert(modality, p);
        self
    }

    /// The four probabilities in T1w, T1wCE, T2w, FLAIR order.
    pub fn features(&self) -> Result<[f64; 4], EnsembleError> {
        let mut x = [0.0; 4];
        for m in Modality::ALL {
            x[m.index()] = *self
                .per_modality
                .get(&m)
                .ok_or_else(|| EnsembleError::MissingModality { subject: self.subject_id.clone(), modality: m })?;
        }
        Ok(x)
    }
}

/// Mean of whatever modalities each subject has.
pub fn average_ensemble(preds: &[Prediction]) -> Result<Vec<Prediction>, EnsembleError> {
    preds
        .iter()
        .map(|p| {
            if p.per_modality.is_empty() {
                return Err(EnsembleError::EmptyPrediction(p.subject_id.clone()));
            }
            let mean = p.per_modality.values().sum::<f64>() / p.per_modality.len() as f64;
            Ok(Prediction { final_probability: Some(mean), ..p.clone() })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StackingModel {
    /// T1w, T1wCE, T2w, FLAIR.
    pub weights: [f64; 4],
    pub bias: f64,
    pub l2_lambda: f64,
}

impl StackingModel {
    pub fn probability(&self, x: &[f64; 4]) -> f64 {
        let z = self.bias + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        crate::vit::probability(z)
    }

    pub fn save(&self, path: &Path) -> Result<(), EnsembleError> {
        let json = serde_json::to_string_pretty(self).map_err(|source| EnsembleError::Json { path: path.to_path_buf(), source })?;
        fs::write(path, json + "\n").map_err(|source| EnsembleError::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self, EnsembleError> {
        let text = fs::read_to_string(path).map_err(|source| EnsembleError::Io { path: path.to_path_buf(), source })?;
        serde_json::from_str(&text).map_err(|source| EnsembleError::Json { path: path.to_path_buf(), source })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StackingOptions {
    pub l2_lambda: f64,
    pub lr: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for StackingOptions {
    fn default() -> Self {
        StackingOptions { l2_lambda: 0.01, lr: 0.1, tolerance: 1e-8, max_iterations: 100_000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StackingFit {
    pub model: StackingModel,
    pub iterations: usize,
    pub gradient_norm: f64,
}

/// Gradient of `mean logloss + lambda/2 |w|^2`, split into the data term
/// for the weights and the bias gradient.
fn data_gradient(x: &[[f64; 4]], y: &[u8], w: &[f64; 4], b: f64) -> ([f64; 4], f64) {
    let n = x.len() as f64;
    let mut gw = [0.0; 4];
    let mut gb = 0.0;
    for (xi, &yi) in x.iter().zip(y) {
        let z = b + w.iter().zip(xi).map(|(a, v)| a * v).sum::<f64>();
        let r = crate::vit::sigmoid(z) - f64::from(yi);
        for k in 0..4 {
            gw[k] += r * xi[k];
        }
        gb += r;
    }
    (gw.map(|g| g / n), gb / n)
}

pub fn fit_stacking(preds: &[Prediction], labels: &[u8], options: &StackingOptions) -> Result<StackingFit, EnsembleError> {
    fit_stacking_from(preds, labels, options, [0.0; 4], 0.0)
}

/// Full-batch proximal gradient descent: an explicit step on the data loss
/// followed by the closed-form shrink for the L2 term. Same minimizer as
/// plain gradient descent, but stable for any lambda.
pub fn fit_stacking_from(
    preds: &[Prediction],
    labels: &[u8],
    options: &StackingOptions,
    init_weights: [f64; 4],
    init_bias: f64,
) -> Result<StackingFit, EnsembleError> {
    if preds.len() != labels.len() {
        return Err(EnsembleError::LengthMismatch { predictions: preds.len(), labels: labels.len() });
    }
    if !(options.lr > 0.0) || !(options.l2_lambda >= 0.0) || !(options.tolerance > 0.0) {
        return Err(EnsembleError::InvalidOptions(format!("{options:?}")));
    }
    let x: Vec<[f64; 4]> = preds.iter().map(Prediction::features).collect::<Result<_, _>>()?;
    if !labels.contains(&0) || !labels.contains(&1) || labels.iter().any(|&y| y > 1) {
        return Err(EnsembleError::SingleClassLabels);
    }
    let (lr, lambda) = (options.lr, options.l2_lambda);
    let (mut w, mut b) = (init_weights, init_bias);
    let mut iterations = 0;
    let mut gradient_norm;
    loop {
        let (gw, gb) = data_gradient(&x, labels, &w, b);
        gradient_norm = gw.iter().zip(&w).map(|(g, wk)| (g + lambda * wk).abs()).fold(gb.abs(), f64::max);
        if gradient_norm < options.tolerance || iterations >= options.max_iterations {
            break;
        }
        for k in 0..4 {
            w[k] = (w[k] - lr * gw[k]) / (1.0 + lr * lambda);
        }
        b -= lr * gb;
        iterations += 1;
    }
    Ok(StackingFit { model: StackingModel { weights: w, bias: b, l2_lambda: lambda }, iterations, gradient_norm })
}

pub fn predict_stacking(model: &StackingModel, preds: &[Prediction]) -> Result<Vec<Prediction>, EnsembleError> {
    preds
        .iter()
        .map(|p| Ok(Prediction { final_probability: Some(model.probability(&p.features()?)), ..p.clone() }))
        .collect()
}

pub const PREDICTION_HEADER: [&str; 2] = ["BraTS21ID", "MGMT_value"];

/// Reads a `BraTS21ID,MGMT_value` file; IDs come back zero-padded.
pub fn read_predictions_csv(path: &Path) -> Result<Vec<(String, f64)>, EnsembleError> {
    let malformed = |reason: String| EnsembleError::MalformedCsv { path: path.to_path_buf(), reason };
    let mut reader = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(source) => EnsembleError::Io { path: path.to_path_buf(), source },
        other => malformed(format!("{other:?}")),
    })?;
    let headers = reader.headers().map_err(|e| malformed(e.to_string()))?.clone();
    if headers.iter().map(str::trim).ne(PREDICTION_HEADER) {
        return Err(malformed(format!("expected header {}", PREDICTION_HEADER.join(","))));
    }
    let mut out: Vec<(String, f64)> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| malformed(e.to_string()))?;
        let id = normalize_subject_id(record[0].trim()).ok_or_else(|| malformed(format!("bad subject id {:?}", &record[0])))?;
        let p: f64 = record[1].trim().parse().map_err(|_| malformed(format!("bad probability {:?}", &record[1])))?;
        if !(0.0..=1.0).contains(&p) {
            return Err(EnsembleError::ProbabilityOutOfRange { subject: id, value: p });
        }
        if out.iter().any(|(s, _)| *s == id) {
            return Err(malformed(format!("duplicate subject {id}")));
        }
        out.push((id, p));
    }
    Ok(out)
}

pub fn predictions_csv(rows: &[(String, f64)]) -> String {
    let mut out = PREDICTION_HEADER.join(",") + "\n";
    for (id, p) in rows {
        out.push_str(&format!("{id},{p:.9}\n"));
    }
    out
}

pub fn write_predictions_csv(path: &Path, rows: &[(String, f64)]) -> Result<(), EnsembleError> {
    fs::write(path, predictions_csv(rows)).map_err(|source| EnsembleError::Io { path: path.to_path_buf(), source })
}

/// Joins one prediction list per modality into per-subject predictions,
/// sorted by subject. Subjects absent from a list simply lack that modality.
pub fn merge_modalities(per_modality: &[(Modality, Vec<(String, f64)>)]) -> Vec<Prediction> {
    let mut by_subject: BTreeMap<String, Prediction> = BTreeMap::new();
    for (m, rows) in per_modality {
        for (id, p) in rows {
            by_subject.entry(id.clone()).or_insert_with(|| Prediction::new(id.clone())).per_modality.insert(*m, *p);
        }
    }
    by_subject.into_values().collect()
}

/// Labels aligned with `preds`.
pub fn aligned_labels(preds: &[Prediction], labels: &BTreeMap<String, u8>) -> Result<Vec<u8>, EnsembleError> {
    preds
        .iter()
        .map(|p| labels.get(&p.subject_id).copied().ok_or_else(|| EnsembleError::MissingLabel(p.subject_id.clone())))
        .collect()
}
