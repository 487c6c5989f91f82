//! Synthetic DICOM datasets with a planted bright cube in positive
//! subjects, plus the explicit VR little endian writer they are built with.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::sample_rng;
use crate::dicom::{tags, DicomError, DicomHeader, DicomSlice, PixelRepresentation, Tag, EXPLICIT_VR_LITTLE_ENDIAN};
use crate::volume::Dims;
use crate::Modality;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic dataset spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Dicom(#[from] DicomError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl SynthError {
    pub fn category(&self) -> &'static str {
        match self {
            SynthError::InvalidSpec(_) => "InvalidSpec",
            SynthError::Dicom(e) => e.category(),
            SynthError::Io { .. } => "IoError",
        }
    }
}

const MR_IMAGE_STORAGE: &str = "1.2.840.10008.5.1.4.1.1.4";
const DEFAULT_INSTANCE_UID: &str = "2.25.1";

/// Tags the writer derives from the header; anything else found in
/// `DicomSlice::tags` is copied through as `UN`.
const GENERATED: [Tag; 14] = [
    tags::INSTANCE_NUMBER,
    tags::IMAGE_POSITION_PATIENT,
    tags::SAMPLES_PER_PIXEL,
    tags::PHOTOMETRIC_INTERPRETATION,
    tags::ROWS,
    tags::COLUMNS,
    tags::BITS_ALLOCATED,
    tags::BITS_STORED,
    tags::HIGH_BIT,
    tags::PIXEL_REPRESENTATION,
    tags::WINDOW_CENTER,
    tags::WINDOW_WIDTH,
    tags::RESCALE_INTERCEPT,
    tags::RESCALE_SLOPE,
];

fn padded(mut bytes: Vec<u8>, pad: u8) -> Vec<u8> {
    if bytes.len() % 2 == 1 {
        bytes.push(pad);
    }
    bytes
}

fn text(s: &str) -> Vec<u8> {
    padded(s.as_bytes().to_vec(), b' ')
}

fn uid(s: &str) -> Vec<u8> {
    padded(s.as_bytes().to_vec(), 0)
}

/// Decimal string that parses back to the same f64. Values with a long
/// shortest representation exceed the nominal 16-character DS limit.
fn decimal(x: f64) -> Vec<u8> {
    text(&format!("{x}"))
}

fn us(v: u16) -> Vec<u8> {
    v.to_le_bytes().to_vec()
}

fn push_element(out: &mut Vec<u8>, tag: Tag, vr: &[u8; 2], value: &[u8]) {
    out.extend_from_slice(&tag.0.to_le_bytes());
    out.extend_from_slice(&tag.1.to_le_bytes());
    out.extend_from_slice(vr);
    if matches!(vr, b"OB" | b"OW" | b"UN" | b"SQ" | b"UT") {
        out.extend_from_slice(&[0, 0]);
        out.extend_from_slice(&(value.len() as u32).to_le_bytes());
    } else {
        out.extend_from_slice(&(value.len() as u16).to_le_bytes());
    }
    out.extend_from_slice(value);
}

/// Serializes a slice as an explicit VR little endian Part-10 file.
pub fn encode_dicom(slice: &DicomSlice) -> Result<Vec<u8>, DicomError> {
    let h = &slice.header;
    let invalid = |tag: Tag, reason: String| DicomError::InvalidTagValue { tag, reason };
    if h.bits_allocated != 8 && h.bits_allocated != 16 || h.bits_stored == 0 || h.bits_stored > h.bits_allocated {
        return Err(DicomError::UnsupportedPixelFormat(format!("{} of {} bits", h.bits_stored, h.bits_allocated)));
    }
    let rows = u16::try_from(h.rows).ok().filter(|&r| r > 0).ok_or_else(|| invalid(tags::ROWS, format!("{} rows", h.rows)))?;
    let cols = u16::try_from(h.cols).ok().filter(|&c| c > 0).ok_or_else(|| invalid(tags::COLUMNS, format!("{} columns", h.cols)))?;
    if slice.pixels.len() != h.rows * h.cols {
        return Err(DicomError::LengthMismatch { expected: h.rows * h.cols, actual: slice.pixels.len() });
    }
    let (lo, hi) = h.value_range();
    if let Some(&bad) = slice.pixels.iter().find(|&&p| p < lo || p > hi) {
        return Err(invalid(tags::PIXEL_DATA, format!("pixel {bad} outside [{lo}, {hi}]")));
    }
    if let Some(w) = h.window_width.filter(|&w| !(w > 1.0)) {
        return Err(invalid(tags::WINDOW_WIDTH, format!("window width {w} must exceed 1")));
    }

    let mut data: BTreeMap<Tag, ([u8; 2], Vec<u8>)> = BTreeMap::new();
    for (&tag, value) in &slice.tags {
        if tag.0 != 0x0002 && tag.0 != 0xFFFE && tag != tags::PIXEL_DATA && !GENERATED.contains(&tag) {
            data.insert(tag, (*b"UN", value.clone()));
        }
    }
    if let Some(n) = h.instance_number {
        data.insert(tags::INSTANCE_NUMBER, (*b"IS", text(&n.to_string())));
    }
    if let Some(z) = h.z_position {
        data.insert(tags::IMAGE_POSITION_PATIENT, (*b"DS", text(&format!("0\\0\\{z}"))));
    }
    data.insert(tags::SAMPLES_PER_PIXEL, (*b"US", us(1)));
    data.insert(tags::PHOTOMETRIC_INTERPRETATION, (*b"CS", text("MONOCHROME2")));
    data.insert(tags::ROWS, (*b"US", us(rows)));
    data.insert(tags::COLUMNS, (*b"US", us(cols)));
    data.insert(tags::BITS_ALLOCATED, (*b"US", us(h.bits_allocated)));
    data.insert(tags::BITS_STORED, (*b"US", us(h.bits_stored)));
    data.insert(tags::HIGH_BIT, (*b"US", us(h.bits_stored - 1)));
    let signed = u16::from(h.pixel_representation == PixelRepresentation::Signed);
    data.insert(tags::PIXEL_REPRESENTATION, (*b"US", us(signed)));
    if let Some(c) = h.window_center {
        data.insert(tags::WINDOW_CENTER, (*b"DS", decimal(c)));
    }
    if let Some(w) = h.window_width {
        data.insert(tags::WINDOW_WIDTH, (*b"DS", decimal(w)));
    }
    data.insert(tags::RESCALE_INTERCEPT, (*b"DS", decimal(h.rescale_intercept)));
    data.insert(tags::RESCALE_SLOPE, (*b"DS", decimal(h.rescale_slope)));

    let mask = (1u32 << h.bits_stored) - 1;
    let pixels: Vec<u8> = if h.bits_allocated == 8 {
        padded(slice.pixels.iter().map(|&p| (p as u32 & mask) as u8).collect(), 0)
    } else {
        slice.pixels.iter().flat_map(|&p| ((p as u32 & mask) as u16).to_le_bytes()).collect()
    };
    let pixel_vr = if h.bits_allocated == 8 { *b"OB" } else { *b"OW" };
    data.insert(tags::PIXEL_DATA, (pixel_vr, pixels));

    let meta_uid = |tag: Tag, default: &str| -> String {
        slice
            .tags
            .get(&tag)
            .and_then(|v| std::str::from_utf8(v).ok())
            .map(|s| s.trim_end_matches(['\0', ' ']).to_string())
            .filter(|s| !s.is_empty())
            .unwrap_or_else(|| default.to_string())
    };
    let mut meta = Vec::new();
    push_element(&mut meta, tags::FILE_META_VERSION, b"OB", &[0, 1]);
    push_element(&mut meta, tags::MEDIA_SOP_CLASS_UID, b"UI", &uid(&meta_uid(tags::MEDIA_SOP_CLASS_UID, MR_IMAGE_STORAGE)));
    push_element(&mut meta, tags::MEDIA_SOP_INSTANCE_UID, b"UI", &uid(&meta_uid(tags::MEDIA_SOP_INSTANCE_UID, DEFAULT_INSTANCE_UID)));
    push_element(&mut meta, tags::TRANSFER_SYNTAX_UID, b"UI", &uid(EXPLICIT_VR_LITTLE_ENDIAN));

    let mut out = vec![0u8; 128];
    out.extend_from_slice(b"DICM");
    push_element(&mut out, (0x0002, 0x0000), b"UL", &(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    for (tag, (vr, value)) in &data {
        push_element(&mut out, *tag, vr, value);
    }
    Ok(out)
}

pub fn write_dicom(slice: &DicomSlice, path: &Path) -> Result<(), SynthError> {
    let bytes = encode_dicom(slice)?;
    fs::write(path, bytes).map_err(|source| SynthError::Io { path: path.to_path_buf(), source })
}

/// A slice with random geometry, pixel format, optional tags and pixels.
pub fn random_slice<R: Rng + ?Sized>(rng: &mut R) -> DicomSlice {
    let bits_allocated = if rng.random_bool(0.5) { 8 } else { 16 };
    let mut header = DicomHeader::new(rng.random_range(1..=24), rng.random_range(1..=24), bits_allocated);
    header.bits_stored = rng.random_range(1..=bits_allocated);
    if rng.random_bool(0.5) {
        header.pixel_representation = PixelRepresentation::Signed;
    }
    header.rescale_slope = if rng.random_bool(0.5) { 1.0 } else { rng.random_range(-8.0..8.0) };
    header.rescale_intercept = if rng.random_bool(0.5) { f64::from(rng.random_range(-2048..2048)) } else { rng.random_range(-1e4..1e4) };
    if rng.random_bool(0.7) {
        header.window_center = Some(rng.random_range(-1e3..4e3));
        header.window_width = Some(rng.random_range(1.5..5e3));
    }
    header.instance_number = rng.random_bool(0.8).then(|| rng.random());
    header.z_position = rng.random_bool(0.8).then(|| rng.random_range(-500.0..500.0));
    let (lo, hi) = header.value_range();
    let pixels = (0..header.rows * header.cols).map(|_| rng.random_range(lo..=hi)).collect();
    let mut tags = BTreeMap::new();
    if rng.random_bool(0.5) {
        tags.insert((0x0010, 0x0010), text(&format!("Subject^{}", rng.random::<u16>())));
    }
    DicomSlice { tags, header, pixels }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_subjects: usize,
    pub dims: Dims,
    pub positive_fraction: f64,
    pub lesion_side: usize,
    /// Added to the rescaled intensity inside the cube.
    pub lesion_delta: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(num_subjects: usize, dims: Dims, seed: u64) -> Self {
        SynthSpec { num_subjects, dims, positive_fraction: 0.5, lesion_side: 8, lesion_delta: 1000.0, noise_sigma: 5.0, seed }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidSpec(m));
        if self.num_subjects == 0 {
            return bad("at least one subject is needed".into());
        }
        if self.dims.is_empty() || self.dims.height > 4096 || self.dims.width > 4096 {
            return bad(format!("dims {}", self.dims));
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return bad(format!("positive fraction {}", self.positive_fraction));
        }
        let smallest = self.dims.height.min(self.dims.width).min(self.dims.depth);
        if self.lesion_side == 0 || self.lesion_side > smallest {
            return bad(format!("lesion side {} does not fit in {}", self.lesion_side, self.dims));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() || !self.lesion_delta.is_finite() {
            return bad(format!("noise {} / delta {}", self.noise_sigma, self.lesion_delta));
        }
        Ok(())
    }

    pub fn num_positives(&self) -> usize {
        (self.num_subjects as f64 * self.positive_fraction).round() as usize
    }
}

/// Stored value = rescaled value - intercept.
pub const RESCALE_INTERCEPT: f64 = -1024.0;
pub const WINDOW_CENTER: f64 = 1200.0;
pub const WINDOW_WIDTH: f64 = 2600.0;

/// Brain intensity per modality, before noise.
pub fn base_intensity(m: Modality) -> f64 {
    700.0 + 100.0 * f64::from(m.code())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSubject {
    pub subject_id: String,
    pub label: u8,
    /// `(z, row, col)` of the cube's first voxel, positives only.
    pub lesion_origin: Option<[usize; 3]>,
}

/// Lesion origins are drawn from the central half of each axis so the whole
/// cube lies inside the brain ellipsoid.
fn lesion_origin<R: Rng + ?Sized>(extent: usize, side: usize, rng: &mut R) -> usize {
    let (lo, hi) = if side <= extent / 2 { (extent / 4, extent - extent / 4 - side) } else { (0, extent - side) };
    rng.random_range(lo..=hi.max(lo))
}

fn in_brain(dims: Dims, z: usize, r: usize, c: usize) -> bool {
    let term = |i: usize, n: usize| {
        let centre = (n as f64 - 1.0) / 2.0;
        let radius = 0.45 * n as f64;
        ((i as f64 - centre) / radius).powi(2)
    };
    term(z, dims.depth) + term(r, dims.height) + term(c, dims.width) <= 1.0
}

/// Rescaled intensities of one subject and modality, depth-major.
pub fn subject_intensities<R: Rng + ?Sized>(spec: &SynthSpec, modality: Modality, origin: Option<[usize; 3]>, rng: &mut R) -> Vec<f64> {
    let d = spec.dims;
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let inside = |o: usize, i: usize| i >= o && i < o + spec.lesion_side;
    let mut out = Vec::with_capacity(d.len());
    for z in 0..d.depth {
        for r in 0..d.height {
            for c in 0..d.width {
                let mut v = if in_brain(d, z, r, c) { base_intensity(modality) } else { 0.0 };
                if let Some([oz, or, oc]) = origin {
                    if inside(oz, z) && inside(or, r) && inside(oc, c) {
                        v += spec.lesion_delta;
                    }
                }
                if spec.noise_sigma > 0.0 {
                    v += noise.sample(rng);
                }
                out.push(v);
            }
        }
    }
    out
}

fn slice_for(spec: &SynthSpec, intensities: &[f64], z: usize, uid: String) -> DicomSlice {
    let d = spec.dims;
    let plane = &intensities[z * d.height * d.width..(z + 1) * d.height * d.width];
    let pixels = plane.iter().map(|&v| (v - RESCALE_INTERCEPT).round().clamp(0.0, 65535.0) as i32).collect();
    let mut header = DicomHeader::new(d.height, d.width, 16);
    header.rescale_intercept = RESCALE_INTERCEPT;
    header.window_center = Some(WINDOW_CENTER);
    header.window_width = Some(WINDOW_WIDTH);
    header.instance_number = Some(z as i32 + 1);
    header.z_position = Some(z as f64 - (d.depth / 2) as f64);
    let mut tags = BTreeMap::new();
    tags.insert(tags::MEDIA_SOP_INSTANCE_UID, uid.into_bytes());
    DicomSlice { tags, header, pixels }
}

/// Labels and lesion placement for every subject, before any file is
/// written.
pub fn plan_subjects(spec: &SynthSpec) -> Result<Vec<SynthSubject>, SynthError> {
    spec.validate()?;
    let mut order: Vec<usize> = (0..spec.num_subjects).collect();
    order.shuffle(&mut sample_rng(spec.seed, 0));
    let mut labels = vec![0u8; spec.num_subjects];
    for &i in &order[..spec.num_positives()] {
        labels[i] = 1;
    }
    Ok((0..spec.num_subjects)
        .map(|i| {
            let mut rng = sample_rng(spec.seed, 1 + 2 * i as u64);
            let origin = (labels[i] == 1).then(|| {
                let z = lesion_origin(spec.dims.depth, spec.lesion_side, &mut rng);
                let r = lesion_origin(spec.dims.height, spec.lesion_side, &mut rng);
                let c = lesion_origin(spec.dims.width, spec.lesion_side, &mut rng);
                [z, r, c]
            });
            SynthSubject { subject_id: format!("{i:05}"), label: labels[i], lesion_origin: origin }
        })
        .collect())
}

/// Writes `<out>/<id>/<modality>/Image-<k>.dcm` for every subject and a
/// `labels.csv` beside them.
pub fn generate_dataset(spec: &SynthSpec, out_dir: &Path) -> Result<Vec<SynthSubject>, SynthError> {
    let subjects = plan_subjects(spec)?;
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| SynthError::Io { path, source }
    };
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    subjects.par_iter().enumerate().try_for_each(|(i, s)| -> Result<(), SynthError> {
        let mut rng = sample_rng(spec.seed, 2 + 2 * i as u64);
        for m in Modality::ALL {
            let dir = out_dir.join(&s.subject_id).join(m.as_str());
            fs::create_dir_all(&dir).map_err(io(&dir))?;
            let intensities = subject_intensities(spec, m, s.lesion_origin, &mut rng);
            for z in 0..spec.dims.depth {
                let uid = format!("2.25.{}{}{:05}", i + 1, m.code(), z + 1);
                write_dicom(&slice_for(spec, &intensities, z, uid), &dir.join(format!("Image-{}.dcm", z + 1)))?;
            }
        }
        Ok(())
    })?;
    let mut csv = String::from("BraTS21ID,MGMT_value\n");
    for (i, s) in subjects.iter().enumerate() {
        csv.push_str(&format!("{i},{}\n", s.label));
    }
    let labels = out_dir.join("labels.csv");
    fs::write(&labels, csv).map_err(io(&labels))?;
    Ok(subjects)
}
