//! Volume assembly from DICOM slices: ordering, rescale, linear VOI
//! windowing, corner-aligned resampling and min-max normalization.

use std::path::{Path, PathBuf};

use crate::dicom::{read_dicom_file, DicomError, DicomSlice};
use crate::Modality;

pub const DEFAULT_TARGET: Dims = Dims { height: 256, width: 256, depth: 64 };

const CACHE_MAGIC: &[u8; 4] = b"VOL1";
const CACHE_HEADER_LEN: usize = 4 + 3 * 4 + 1;

#[derive(Debug, thiserror::Error)]
pub enum VolumeError {
    #[error("no slices given")]
    EmptySeries,
    #[error("slices can be ordered neither by z position nor by instance number")]
    NoOrderingKey,
    #[error("slice {index} is {rows}x{cols}, expected {expected_rows}x{expected_cols}")]
    InconsistentGeometry { index: usize, rows: usize, cols: usize, expected_rows: usize, expected_cols: usize },
    #[error("invalid VOI window: center {center}, width {width}, output [{y_min}, {y_max}]")]
    InvalidWindow { center: f64, width: f64, y_min: f64, y_max: f64 },
    #[error("invalid volume dimensions {0}")]
    InvalidDimensions(String),
    #[error("volume cache: {0}")]
    BadCache(String),
    #[error("{path}: {source}")]
    Dicom { path: PathBuf, source: DicomError },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl VolumeError {
    pub fn category(&self) -> &'static str {
        match self {
            VolumeError::EmptySeries => "EmptySeries",
            VolumeError::NoOrderingKey => "NoOrderingKey",
            VolumeError::InconsistentGeometry { .. } => "InconsistentGeometry",
            VolumeError::InvalidWindow { .. } => "InvalidWindow",
            VolumeError::InvalidDimensions(_) => "InvalidDimensions",
            VolumeError::BadCache(_) => "BadVolumeCache",
            VolumeError::Dicom { source, .. } => source.category(),
            VolumeError::Io(_) => "IoError",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Dims {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
}

impl Dims {
    pub fn new(height: usize, width: usize, depth: usize) -> Self {
        Dims { height, width, depth }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.depth
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.height, self.width, self.depth)
    }
}

impl std::str::FromStr for Dims {
    type Err = String;

    /// Parses `HxWxD`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<usize> = s
            .split(['x', 'X'])
            .map(|p| p.trim().parse::<usize>().map_err(|_| format!("bad dimension {p:?} in {s:?}")))
            .collect::<Result<_, _>>()?;
        match parts[..] {
            [h, w, d] if h > 0 && w > 0 && d > 0 => Ok(Dims::new(h, w, d)),
            _ => Err(format!("expected HxWxD with positive extents, got {s:?}")),
        }
    }
}

/// A real-valued voxel grid, stored depth-major then row-major:
/// voxel `(z, r, c)` lives at `z * H * W + r * W + c`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub subject_id: String,
    pub modality: Modality,
    dims: Dims,
    voxels: Vec<f32>,
}

impl Volume {
    pub fn new(subject_id: impl Into<String>, modality: Modality, dims: Dims, voxels: Vec<f32>) -> Result<Self, VolumeError> {
        if dims.is_empty() {
            return Err(VolumeError::InvalidDimensions(dims.to_string()));
        }
        if voxels.len() != dims.len() {
            return Err(VolumeError::InvalidDimensions(format!("{dims} needs {} voxels, got {}", dims.len(), voxels.len())));
        }
        Ok(Volume { subject_id: subject_id.into(), modality, dims, voxels })
    }

    pub fn filled(subject_id: impl Into<String>, modality: Modality, dims: Dims, value: f32) -> Result<Self, VolumeError> {
        Self::new(subject_id, modality, dims, vec![value; dims.len()])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn height(&self) -> usize {
        self.dims.height
    }

    pub fn width(&self) -> usize {
        self.dims.width
    }

    pub fn depth(&self) -> usize {
        self.dims.depth
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [f32] {
        &mut self.voxels
    }

    pub fn into_voxels(self) -> Vec<f32> {
        self.voxels
    }

    pub fn index(&self, z: usize, r: usize, c: usize) -> usize {
        (z * self.dims.height + r) * self.dims.width + c
    }

    pub fn get(&self, z: usize, r: usize, c: usize) -> f32 {
        self.voxels[self.index(z, r, c)]
    }

    pub fn slice(&self, z: usize) -> &[f32] {
        let plane = self.dims.height * self.dims.width;
        &self.voxels[z * plane..(z + 1) * plane]
    }

    /// Same metadata, new grid.
    pub fn with_voxels(&self, dims: Dims, voxels: Vec<f32>) -> Result<Self, VolumeError> {
        Volume::new(self.subject_id.clone(), self.modality, dims, voxels)
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.voxels
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Sort permutation for a series: ascending z position when every slice has
/// one, else ascending instance number. Ties keep input order.
pub fn order_slices(slices: &[DicomSlice]) -> Result<Vec<usize>, VolumeError> {
    if slices.is_empty() {
        return Err(VolumeError::EmptySeries);
    }
    let mut order: Vec<usize> = (0..slices.len()).collect();
    if let Some(z) = slices.iter().map(|s| s.header.z_position).collect::<Option<Vec<f64>>>() {
        order.sort_by(|&a, &b| z[a].total_cmp(&z[b]));
    } else if let Some(n) = slices.iter().map(|s| s.header.instance_number).collect::<Option<Vec<i32>>>() {
        order.sort_by_key(|&i| n[i]);
    } else {
        return Err(VolumeError::NoOrderingKey);
    }
    Ok(order)
}

/// Linear VOI LUT function mapping a rescaled value into `[y_min, y_max]`.
pub fn apply_voi_lut(x: f64, center: f64, width: f64, y_min: f64, y_max: f64) -> Result<f64, VolumeError> {
    if !(width > 1.0) || !(y_min < y_max) || !center.is_finite() || !width.is_finite() {
        return Err(VolumeError::InvalidWindow { center, width, y_min, y_max });
    }
    let half = (width - 1.0) / 2.0;
    let mid = center - 0.5;
    let y = if x <= mid - half {
        y_min
    } else if x > mid + half {
        y_max
    } else {
        ((x - mid) / (width - 1.0) + 0.5) * (y_max - y_min) + y_min
    };
    Ok(y.clamp(y_min, y_max))
}

/// Corner-aligned source coordinate for each output sample along one axis,
/// as `(lower index, upper index, weight of upper)`.
fn axis_weights(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            let src = if n_in == 1 {
                0.0
            } else if n_out == 1 {
                (n_in - 1) as f64 / 2.0
            } else {
                i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
            };
            let lo = (src.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Linear resampling of one axis of a 3-axis grid laid out `[a][b][c]`.
fn resample_axis(data: &[f64], shape: [usize; 3], axis: usize, n_out: usize) -> (Vec<f64>, [usize; 3]) {
    let weights = axis_weights(shape[axis], n_out);
    let mut out_shape = shape;
    out_shape[axis] = n_out;
    let [_, s1, s2] = shape;
    let mut out = vec![0.0; out_shape.iter().product()];
    let [_, o1, o2] = out_shape;
    for a in 0..out_shape[0] {
        for b in 0..o1 {
            for c in 0..o2 {
                let mut coords = [a, b, c];
                let (lo, hi, t) = weights[coords[axis]];
                coords[axis] = lo;
                let v0 = data[(coords[0] * s1 + coords[1]) * s2 + coords[2]];
                coords[axis] = hi;
                let v1 = data[(coords[0] * s1 + coords[1]) * s2 + coords[2]];
                out[(a * o1 + b) * o2 + c] = if t == 0.0 { v0 } else { v0 + (v1 - v0) * t };
            }
        }
    }
    (out, out_shape)
}

/// Bilinear in-plane resampling to `H'xW'` followed by linear resampling
/// along depth to `D'`, with output endpoints on input endpoints.
pub fn resize_volume(v: &Volume, target: Dims) -> Result<Volume, VolumeError> {
    if target.is_empty() {
        return Err(VolumeError::InvalidDimensions(target.to_string()));
    }
    if target == v.dims {
        return Ok(v.clone());
    }
    let data: Vec<f64> = v.voxels.iter().map(|&x| f64::from(x)).collect();
    let shape = [v.depth(), v.height(), v.width()];
    let (data, shape) = resample_axis(&data, shape, 2, target.width);
    let (data, shape) = resample_axis(&data, shape, 1, target.height);
    let (data, _) = resample_axis(&data, shape, 0, target.depth);
    v.with_voxels(target, data.into_iter().map(|x| x as f32).collect())
}

/// Per-volume min-max scaling to `[0, 1]`; a constant volume becomes zeros.
pub fn normalize_volume(v: &Volume) -> Volume {
    let (lo, hi) = v.min_max();
    let (lo, hi) = (f64::from(lo), f64::from(hi));
    let span = hi - lo;
    let voxels = if span > 0.0 {
        v.voxels.iter().map(|&x| ((f64::from(x) - lo) / span) as f32).collect()
    } else {
        vec![0.0; v.voxels.len()]
    };
    Volume { voxels, ..v.clone() }
}

/// Orders, rescales, windows (when the slice carries a window) and stacks
/// the slices into an `rows x cols x n` volume, without resizing or
/// normalization.
pub fn assemble_volume(slices: &[DicomSlice], subject_id: &str, modality: Modality) -> Result<Volume, VolumeError> {
    let first = slices.first().ok_or(VolumeError::EmptySeries)?;
    let (rows, cols) = (first.header.rows, first.header.cols);
    for (index, s) in slices.iter().enumerate() {
        if s.header.rows != rows || s.header.cols != cols {
            return Err(VolumeError::InconsistentGeometry {
                index,
                rows: s.header.rows,
                cols: s.header.cols,
                expected_rows: rows,
                expected_cols: cols,
            });
        }
    }
    let order = order_slices(slices)?;
    let mut voxels = Vec::with_capacity(rows * cols * slices.len());
    for &i in &order {
        let s = &slices[i];
        match (s.header.window_center, s.header.window_width) {
            (Some(c), Some(w)) => {
                for &raw in &s.pixels {
                    voxels.push(apply_voi_lut(s.rescaled(raw), c, w, 0.0, 1.0)? as f32);
                }
            }
            _ => voxels.extend(s.pixels.iter().map(|&raw| s.rescaled(raw) as f32)),
        }
    }
    Volume::new(subject_id, modality, Dims::new(rows, cols, slices.len()), voxels)
}

/// The full slice-to-model-input pipeline: assemble, resize, normalize.
pub fn build_volume(slices: &[DicomSlice], subject_id: &str, modality: Modality, target: Dims) -> Result<Volume, VolumeError> {
    let raw = assemble_volume(slices, subject_id, modality)?;
    Ok(normalize_volume(&resize_volume(&raw, target)?))
}

/// Reads every file of a series and runs [`build_volume`] on them.
pub fn load_series(paths: &[PathBuf], subject_id: &str, modality: Modality, target: Dims) -> Result<Volume, VolumeError> {
    let slices = paths
        .iter()
        .map(|p| read_dicom_file(p).map_err(|source| VolumeError::Dicom { path: p.clone(), source }))
        .collect::<Result<Vec<_>, _>>()?;
    build_volume(&slices, subject_id, modality, target)
}

/// Serializes to the `VOL1` cache layout.
pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let mut out = Vec::with_capacity(CACHE_HEADER_LEN + 4 * v.voxels.len());
    out.extend_from_slice(CACHE_MAGIC);
    for extent in [v.height(), v.width(), v.depth()] {
        out.extend_from_slice(&(extent as u32).to_le_bytes());
    }
    out.push(v.modality.code());
    for x in &v.voxels {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_volume(bytes: &[u8], subject_id: &str) -> Result<Volume, VolumeError> {
    if bytes.len() < CACHE_HEADER_LEN || &bytes[..4] != CACHE_MAGIC {
        return Err(VolumeError::BadCache("missing VOL1 header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let dims = Dims::new(word(0), word(1), word(2));
    let modality = Modality::from_code(bytes[16]).ok_or_else(|| VolumeError::BadCache(format!("modality code {}", bytes[16])))?;
    let body = &bytes[CACHE_HEADER_LEN..];
    if dims.len().checked_mul(4) != Some(body.len()) {
        return Err(VolumeError::BadCache(format!("{dims} needs {} bytes of voxels, found {}", dims.len() * 4, body.len())));
    }
    let voxels = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Volume::new(subject_id, modality, dims, voxels)
}

pub fn write_volume_cache(v: &Volume, path: &Path) -> Result<(), VolumeError> {
    std::fs::write(path, encode_volume(v))?;
    Ok(())
}

pub fn read_volume_cache(path: &Path, subject_id: &str) -> Result<Volume, VolumeError> {
    decode_volume(&std::fs::read(path)?, subject_id)
}
