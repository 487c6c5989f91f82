use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::Modality;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("malformed labels CSV {path}: {reason}")]
    MalformedLabelsCsv { path: PathBuf, reason: String },
    #[error("subject id {0} appears more than once")]
    DuplicateSubjectId(String),
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl DatasetError {
    pub fn category(&self) -> &'static str {
        match self {
            DatasetError::MalformedLabelsCsv { .. } => "MalformedLabelsCsv",
            DatasetError::DuplicateSubjectId(_) => "DuplicateSubjectId",
            DatasetError::Io { .. } => "IoError",
        }
    }
}

/// All DICOM files found for one subject, keyed by modality. Every modality
/// key is present; a missing series is an empty list.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectSeries {
    pub subject_id: String,
    pub series: BTreeMap<Modality, Vec<PathBuf>>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetIndex {
    pub subjects: Vec<SubjectSeries>,
    pub labels: Option<BTreeMap<String, u8>>,
}

impl DatasetIndex {
    pub fn label(&self, subject_id: &str) -> Option<u8> {
        self.labels.as_ref()?.get(subject_id).copied()
    }
}

/// Zero-pads a decimal id to five digits. Returns `None` for anything that
/// is not one to five ASCII digits.
pub fn normalize_subject_id(raw: &str) -> Option<String> {
    let raw = raw.trim();
    if raw.is_empty() || raw.len() > 5 || !raw.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    Some(format!("{raw:0>5}"))
}

/// Walks `<root>/<subject>/<modality>/*.dcm`.
///
/// Directories whose names are not numeric ids, and modality folders other
/// than the four known ones, are ignored.
pub fn scan_dataset(root: &Path, labels_csv: Option<&Path>) -> Result<DatasetIndex, DatasetError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| DatasetError::Io { path, source }
    };
    let mut subjects: BTreeMap<String, SubjectSeries> = BTreeMap::new();
    for entry in std::fs::read_dir(root).map_err(io(root))? {
        let entry = entry.map_err(io(root))?;
        let path = entry.path();
        if !path.is_dir() {
            continue;
        }
        let Some(id) = path.file_name().and_then(|n| n.to_str()).and_then(normalize_subject_id) else {
            continue;
        };
        if subjects.contains_key(&id) {
            return Err(DatasetError::DuplicateSubjectId(id));
        }
        let mut series: BTreeMap<Modality, Vec<PathBuf>> = Modality::ALL.iter().map(|m| (*m, Vec::new())).collect();
        for sub in std::fs::read_dir(&path).map_err(io(&path))? {
            let sub = sub.map_err(io(&path))?.path();
            let Some(modality) = sub.file_name().and_then(|n| n.to_str()).and_then(|n| n.parse::<Modality>().ok()) else {
                continue;
            };
            if !sub.is_dir() {
                continue;
            }
            let mut files = Vec::new();
            for file in std::fs::read_dir(&sub).map_err(io(&sub))? {
                let file = file.map_err(io(&sub))?.path();
                let is_dcm = file
                    .extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("dcm"));
                if is_dcm && file.is_file() {
                    files.push(file);
                }
            }
            files.sort();
            series.insert(modality, files);
        }
        subjects.insert(id.clone(), SubjectSeries { subject_id: id, series });
    }
    let labels = labels_csv.map(read_labels_csv).transpose()?;
    Ok(DatasetIndex { subjects: subjects.into_values().collect(), labels })
}

/// Reads a `BraTS21ID,MGMT_value` file with integer ids and 0/1 labels.
pub fn read_labels_csv(path: &Path) -> Result<BTreeMap<String, u8>, DatasetError> {
    let malformed = |reason: String| DatasetError::MalformedLabelsCsv { path: path.to_path_buf(), reason };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(source) => DatasetError::Io { path: path.to_path_buf(), source },
            other => malformed(format!("{other:?}")),
        })?;
    let headers = reader.headers().map_err(|e| malformed(e.to_string()))?.clone();
    if headers.len() != 2 || &headers[0] != "BraTS21ID" || &headers[1] != "MGMT_value" {
        return Err(malformed(format!("expected header BraTS21ID,MGMT_value, found {:?}", headers.iter().collect::<Vec<_>>())));
    }
    let mut labels = BTreeMap::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| malformed(e.to_string()))?;
        let row = line + 2;
        let id = normalize_subject_id(&record[0]).ok_or_else(|| malformed(format!("line {row}: bad id {:?}", &record[0])))?;
        let label = match &record[1] {
            "0" => 0,
            "1" => 1,
            other => return Err(malformed(format!("line {row}: MGMT_value {other:?} is not 0 or 1"))),
        };
        if labels.insert(id.clone(), label).is_some() {
            return Err(DatasetError::DuplicateSubjectId(id));
        }
    }
    Ok(labels)
}
