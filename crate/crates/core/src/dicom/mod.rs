//! A reader for the uncompressed little-endian subset of DICOM Part-10 files.
//!
//! Only the two uncompressed little-endian transfer syntaxes are accepted.
//! Every element is kept in [`DicomSlice::tags`] as raw bytes; the handful of
//! image-pixel attributes needed downstream are decoded into a
//! [`DicomHeader`]. Sequences are skipped using their length structure.

mod dataset;

use std::collections::BTreeMap;
use std::path::Path;

pub use dataset::{normalize_subject_id, read_labels_csv, scan_dataset, DatasetError, DatasetIndex, SubjectSeries};

/// `(group, element)`.
pub type Tag = (u16, u16);

pub mod tags {
    use super::Tag;

    pub const FILE_META_VERSION: Tag = (0x0002, 0x0001);
    pub const MEDIA_SOP_CLASS_UID: Tag = (0x0002, 0x0002);
    pub const MEDIA_SOP_INSTANCE_UID: Tag = (0x0002, 0x0003);
    pub const TRANSFER_SYNTAX_UID: Tag = (0x0002, 0x0010);
    pub const INSTANCE_NUMBER: Tag = (0x0020, 0x0013);
    pub const IMAGE_POSITION_PATIENT: Tag = (0x0020, 0x0032);
    pub const SAMPLES_PER_PIXEL: Tag = (0x0028, 0x0002);
    pub const PHOTOMETRIC_INTERPRETATION: Tag = (0x0028, 0x0004);
    pub const ROWS: Tag = (0x0028, 0x0010);
    pub const COLUMNS: Tag = (0x0028, 0x0011);
    pub const BITS_ALLOCATED: Tag = (0x0028, 0x0100);
    pub const BITS_STORED: Tag = (0x0028, 0x0101);
    pub const HIGH_BIT: Tag = (0x0028, 0x0102);
    pub const PIXEL_REPRESENTATION: Tag = (0x0028, 0x0103);
    pub const WINDOW_CENTER: Tag = (0x0028, 0x1050);
    pub const WINDOW_WIDTH: Tag = (0x0028, 0x1051);
    pub const RESCALE_INTERCEPT: Tag = (0x0028, 0x1052);
    pub const RESCALE_SLOPE: Tag = (0x0028, 0x1053);
    pub const PIXEL_DATA: Tag = (0x7FE0, 0x0010);

    pub const ITEM: Tag = (0xFFFE, 0xE000);
    pub const ITEM_DELIMITATION: Tag = (0xFFFE, 0xE00D);
    pub const SEQUENCE_DELIMITATION: Tag = (0xFFFE, 0xE0DD);
}

pub const EXPLICIT_VR_LITTLE_ENDIAN: &str = "1.2.840.10008.1.2.1";
pub const IMPLICIT_VR_LITTLE_ENDIAN: &str = "1.2.840.10008.1.2";

const PREAMBLE_LEN: usize = 128;
const MAGIC: &[u8; 4] = b"DICM";
const UNDEFINED_LENGTH: u32 = 0xFFFF_FFFF;
const MAX_SEQUENCE_DEPTH: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum DicomError {
    #[error("not a DICOM Part-10 file (no DICM magic after the preamble)")]
    MissingMagic,
    #[error("unsupported transfer syntax {0}")]
    UnsupportedTransferSyntax(String),
    #[error("required tag {name} ({:04X},{:04X}) is missing", tag.0, tag.1)]
    MissingRequiredTag { tag: Tag, name: &'static str },
    #[error("element ({:04X},{:04X}) at offset {offset} declares {declared} bytes but only {remaining} remain", tag.0, tag.1)]
    TruncatedElement { tag: Tag, offset: usize, declared: usize, remaining: usize },
    #[error("pixel data holds {actual} bytes, expected {expected}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("unsupported pixel format: {0}")]
    UnsupportedPixelFormat(String),
    #[error("invalid value for ({:04X},{:04X}): {reason}", tag.0, tag.1)]
    InvalidTagValue { tag: Tag, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DicomError {
    pub fn category(&self) -> &'static str {
        match self {
            DicomError::MissingMagic => "MissingMagic",
            DicomError::UnsupportedTransferSyntax(_) => "UnsupportedTransferSyntax",
            DicomError::MissingRequiredTag { .. } => "MissingRequiredTag",
            DicomError::TruncatedElement { .. } => "TruncatedElement",
            DicomError::LengthMismatch { .. } => "LengthMismatch",
            DicomError::UnsupportedPixelFormat(_) => "UnsupportedPixelFormat",
            DicomError::InvalidTagValue { .. } => "InvalidTagValue",
            DicomError::Io(_) => "IoError",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelRepresentation {
    Unsigned,
    Signed,
}

/// Image attributes of one slice, everything except the pixel matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DicomHeader {
    pub rows: usize,
    pub cols: usize,
    pub bits_allocated: u16,
    pub bits_stored: u16,
    pub pixel_representation: PixelRepresentation,
    pub rescale_slope: f64,
    pub rescale_intercept: f64,
    pub window_center: Option<f64>,
    pub window_width: Option<f64>,
    pub instance_number: Option<i32>,
    /// Third component of Image Position (Patient).
    pub z_position: Option<f64>,
}

impl DicomHeader {
    /// Header for an unsigned, fully stored slice with identity rescale and
    /// no window.
    pub fn new(rows: usize, cols: usize, bits_allocated: u16) -> Self {
        DicomHeader {
            rows,
            cols,
            bits_allocated,
            bits_stored: bits_allocated,
            pixel_representation: PixelRepresentation::Unsigned,
            rescale_slope: 1.0,
            rescale_intercept: 0.0,
            window_center: None,
            window_width: None,
            instance_number: None,
            z_position: None,
        }
    }

    pub fn bytes_per_pixel(&self) -> usize {
        usize::from(self.bits_allocated / 8)
    }

    /// Inclusive range of representable stored values.
    pub fn value_range(&self) -> (i32, i32) {
        let bits = u32::from(self.bits_stored);
        match self.pixel_representation {
            PixelRepresentation::Unsigned => (0, ((1i64 << bits) - 1) as i32),
            PixelRepresentation::Signed => (-(1i32 << (bits - 1)), (1i32 << (bits - 1)) - 1),
        }
    }

    fn validate(&self) -> Result<(), DicomError> {
        if self.bits_allocated != 8 && self.bits_allocated != 16 {
            return Err(DicomError::UnsupportedPixelFormat(format!(
                "bits allocated {} (only 8 and 16 are supported)",
                self.bits_allocated
            )));
        }
        if self.bits_stored == 0 || self.bits_stored > self.bits_allocated {
            return Err(DicomError::UnsupportedPixelFormat(format!(
                "bits stored {} with {} bits allocated",
                self.bits_stored, self.bits_allocated
            )));
        }
        if self.rows == 0 || self.cols == 0 {
            return Err(DicomError::UnsupportedPixelFormat(format!("empty image {}x{}", self.rows, self.cols)));
        }
        Ok(())
    }
}

/// One parsed DICOM file.
#[derive(Debug, Clone, PartialEq)]
pub struct DicomSlice {
    /// Every element encountered, including the file meta group, as raw
    /// value bytes.
    pub tags: BTreeMap<Tag, Vec<u8>>,
    pub header: DicomHeader,
    /// `rows * cols` stored values, row-major.
    pub pixels: Vec<i32>,
}

impl DicomSlice {
    pub fn pixel(&self, row: usize, col: usize) -> i32 {
        self.pixels[row * self.header.cols + col]
    }

    /// Stored value mapped through the modality rescale.
    pub fn rescaled(&self, raw: i32) -> f64 {
        self.header.rescale_slope * f64::from(raw) + self.header.rescale_intercept
    }
}

pub fn read_dicom_file(path: impl AsRef<Path>) -> Result<DicomSlice, DicomError> {
    let bytes = std::fs::read(path)?;
    parse_dicom_file(&bytes)
}

/// Parses a complete Part-10 file held in memory.
pub fn parse_dicom_file(bytes: &[u8]) -> Result<DicomSlice, DicomError> {
    if bytes.len() < PREAMBLE_LEN + MAGIC.len() || &bytes[PREAMBLE_LEN..PREAMBLE_LEN + 4] != MAGIC {
        return Err(DicomError::MissingMagic);
    }
    let mut tags = BTreeMap::new();

    // File meta group: always explicit VR little endian.
    let mut reader = Reader { buf: bytes, pos: PREAMBLE_LEN + 4, explicit: true };
    while reader.peek_group() == Some(0x0002) {
        let (tag, value) = reader.read_element(0)?;
        tags.insert(tag, value.to_vec());
    }
    let syntax = tags
        .get(&tags::TRANSFER_SYNTAX_UID)
        .map(|v| trim_value(v).to_string())
        .ok_or(DicomError::MissingRequiredTag { tag: tags::TRANSFER_SYNTAX_UID, name: "TransferSyntaxUID" })?;
    reader.explicit = match syntax.as_str() {
        EXPLICIT_VR_LITTLE_ENDIAN => true,
        IMPLICIT_VR_LITTLE_ENDIAN => false,
        _ => return Err(DicomError::UnsupportedTransferSyntax(syntax)),
    };

    while !reader.at_end() {
        let (tag, value) = reader.read_element(0)?;
        tags.insert(tag, value.to_vec());
    }

    let header = header_from_tags(&tags)?;
    let raw = tags
        .get(&tags::PIXEL_DATA)
        .ok_or(DicomError::MissingRequiredTag { tag: tags::PIXEL_DATA, name: "PixelData" })?;
    let pixels = decode_pixel_data(&header, raw)?;
    Ok(DicomSlice { tags, header, pixels })
}

/// Decodes little-endian stored values, masked to `bits_stored` and sign
/// extended when the representation is signed.
pub fn decode_pixel_data(header: &DicomHeader, raw: &[u8]) -> Result<Vec<i32>, DicomError> {
    header.validate()?;
    let bpp = header.bytes_per_pixel();
    let expected = header
        .rows
        .checked_mul(header.cols)
        .and_then(|n| n.checked_mul(bpp))
        .ok_or_else(|| DicomError::UnsupportedPixelFormat("image dimensions overflow".into()))?;
    // Odd-length values carry one byte of padding.
    let data = if raw.len() == expected || (expected % 2 == 1 && raw.len() == expected + 1) {
        &raw[..expected]
    } else {
        return Err(DicomError::LengthMismatch { expected, actual: raw.len() });
    };

    let bits = u32::from(header.bits_stored);
    let mask: u32 = if bits == 32 { u32::MAX } else { (1u32 << bits) - 1 };
    let signed = header.pixel_representation == PixelRepresentation::Signed;
    let interpret = |word: u32| -> i32 {
        let v = word & mask;
        if signed && v & (1 << (bits - 1)) != 0 {
            v as i32 - (1i32 << bits)
        } else {
            v as i32
        }
    };
    let pixels = match bpp {
        1 => data.iter().map(|&b| interpret(u32::from(b))).collect(),
        _ => data
            .chunks_exact(2)
            .map(|c| interpret(u32::from(u16::from_le_bytes([c[0], c[1]]))))
            .collect(),
    };
    Ok(pixels)
}

fn header_from_tags(tags: &BTreeMap<Tag, Vec<u8>>) -> Result<DicomHeader, DicomError> {
    let required_us = |tag: Tag, name: &'static str| -> Result<u16, DicomError> {
        let value = tags.get(&tag).ok_or(DicomError::MissingRequiredTag { tag, name })?;
        read_us(tag, value)
    };
    let rows = required_us(tags::ROWS, "Rows")?;
    let cols = required_us(tags::COLUMNS, "Columns")?;
    let bits_allocated = required_us(tags::BITS_ALLOCATED, "BitsAllocated")?;
    let bits_stored = match tags.get(&tags::BITS_STORED) {
        Some(v) => read_us(tags::BITS_STORED, v)?,
        None => bits_allocated,
    };
    let pixel_representation = match tags.get(&tags::PIXEL_REPRESENTATION) {
        None => PixelRepresentation::Unsigned,
        Some(v) => match read_us(tags::PIXEL_REPRESENTATION, v)? {
            0 => PixelRepresentation::Unsigned,
            1 => PixelRepresentation::Signed,
            other => {
                return Err(DicomError::InvalidTagValue {
                    tag: tags::PIXEL_REPRESENTATION,
                    reason: format!("pixel representation {other}"),
                })
            }
        },
    };
    let decimal = |tag: Tag, index: usize| -> Result<Option<f64>, DicomError> {
        match tags.get(&tag) {
            None => Ok(None),
            Some(v) => read_decimal(tag, v, index),
        }
    };
    let window_width = decimal(tags::WINDOW_WIDTH, 0)?;
    if let Some(w) = window_width {
        if w <= 1.0 {
            return Err(DicomError::InvalidTagValue { tag: tags::WINDOW_WIDTH, reason: format!("window width {w} must exceed 1") });
        }
    }
    let instance_number = match tags.get(&tags::INSTANCE_NUMBER) {
        None => None,
        Some(v) => read_decimal(tags::INSTANCE_NUMBER, v, 0)?
            .map(|n| {
                if n.fract() == 0.0 && n.abs() <= f64::from(i32::MAX) {
                    Ok(n as i32)
                } else {
                    Err(DicomError::InvalidTagValue { tag: tags::INSTANCE_NUMBER, reason: format!("{n} is not an integer") })
                }
            })
            .transpose()?,
    };

    let header = DicomHeader {
        rows: usize::from(rows),
        cols: usize::from(cols),
        bits_allocated,
        bits_stored,
        pixel_representation,
        rescale_slope: decimal(tags::RESCALE_SLOPE, 0)?.unwrap_or(1.0),
        rescale_intercept: decimal(tags::RESCALE_INTERCEPT, 0)?.unwrap_or(0.0),
        window_center: decimal(tags::WINDOW_CENTER, 0)?,
        window_width,
        instance_number,
        z_position: decimal(tags::IMAGE_POSITION_PATIENT, 2)?,
    };
    header.validate()?;
    Ok(header)
}

fn read_us(tag: Tag, value: &[u8]) -> Result<u16, DicomError> {
    match value {
        [a, b, ..] => Ok(u16::from_le_bytes([*a, *b])),
        _ => Err(DicomError::InvalidTagValue { tag, reason: format!("expected a 2-byte US value, got {} bytes", value.len()) }),
    }
}

/// Reads component `index` of a backslash-separated DS/IS string. An empty
/// value or a missing component yields `None`.
fn read_decimal(tag: Tag, value: &[u8], index: usize) -> Result<Option<f64>, DicomError> {
    let text = std::str::from_utf8(value)
        .map_err(|_| DicomError::InvalidTagValue { tag, reason: "value is not ASCII".into() })?;
    let text = text.trim_matches(|c: char| c == '\0' || c.is_ascii_whitespace());
    if text.is_empty() {
        return Ok(None);
    }
    let Some(component) = text.split('\\').nth(index) else {
        return Ok(None);
    };
    let component = component.trim();
    component
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .map(Some)
        .ok_or_else(|| DicomError::InvalidTagValue { tag, reason: format!("{component:?} is not a number") })
}

fn trim_value(value: &[u8]) -> &str {
    std::str::from_utf8(value)
        .unwrap_or("")
        .trim_matches(|c: char| c == '\0' || c.is_ascii_whitespace())
}

fn has_long_length(vr: [u8; 2]) -> bool {
    matches!(&vr, b"OB" | b"OD" | b"OF" | b"OL" | b"OV" | b"OW" | b"SQ" | b"SV" | b"UC" | b"UN" | b"UR" | b"UT" | b"UV")
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    explicit: bool,
}

impl<'a> Reader<'a> {
    fn at_end(&self) -> bool {
        self.pos >= self.buf.len()
    }

    fn peek_group(&self) -> Option<u16> {
        self.buf.get(self.pos..self.pos + 2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn take(&mut self, n: usize, tag: Tag) -> Result<&'a [u8], DicomError> {
        let remaining = self.buf.len() - self.pos;
        if n > remaining {
            return Err(DicomError::TruncatedElement { tag, offset: self.pos, declared: n, remaining });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self, tag: Tag) -> Result<u16, DicomError> {
        let b = self.take(2, tag)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, tag: Tag) -> Result<u32, DicomError> {
        let b = self.take(4, tag)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    /// Reads a tag, optional VR and value length.
    fn read_header(&mut self) -> Result<(Tag, Option<[u8; 2]>, u32), DicomError> {
        let unknown = (0xFFFF, 0xFFFF);
        let group = self.u16(unknown)?;
        let element = self.u16((group, 0xFFFF))?;
        let tag = (group, element);
        if group == 0xFFFE || !self.explicit {
            let len = self.u32(tag)?;
            return Ok((tag, None, len));
        }
        let vr_bytes = self.take(2, tag)?;
        let vr = [vr_bytes[0], vr_bytes[1]];
        let len = if has_long_length(vr) {
            self.take(2, tag)?;
            self.u32(tag)?
        } else {
            u32::from(self.u16(tag)?)
        };
        Ok((tag, Some(vr), len))
    }

    /// Reads one element and returns its value bytes. Undefined-length
    /// sequences are walked and returned whole, delimiters included.
    fn read_element(&mut self, depth: usize) -> Result<(Tag, &'a [u8]), DicomError> {
        let (tag, vr, len) = self.read_header()?;
        if len != UNDEFINED_LENGTH {
            return Ok((tag, self.take(len as usize, tag)?));
        }
        if tag == tags::PIXEL_DATA {
            return Err(DicomError::UnsupportedTransferSyntax("encapsulated pixel data".into()));
        }
        let start = self.pos;
        // Undefined-length UN holds implicit VR content.
        let saved = self.explicit;
        if vr == Some(*b"UN") {
            self.explicit = false;
        }
        let walked = self.skip_sequence(tag, depth + 1);
        self.explicit = saved;
        walked?;
        Ok((tag, &self.buf[start..self.pos]))
    }

    fn skip_sequence(&mut self, owner: Tag, depth: usize) -> Result<(), DicomError> {
        if depth > MAX_SEQUENCE_DEPTH {
            return Err(DicomError::InvalidTagValue { tag: owner, reason: "sequences nested too deeply".into() });
        }
        loop {
            let group = self.u16(owner)?;
            let element = self.u16(owner)?;
            let tag = (group, element);
            let len = self.u32(tag)?;
            match tag {
                tags::SEQUENCE_DELIMITATION => return Ok(()),
                tags::ITEM if len == UNDEFINED_LENGTH => self.skip_item(depth)?,
                tags::ITEM => {
                    self.take(len as usize, tag)?;
                }
                _ => {
                    return Err(DicomError::InvalidTagValue {
                        tag: owner,
                        reason: format!("unexpected ({group:04X},{element:04X}) inside a sequence"),
                    })
                }
            }
        }
    }

    fn skip_item(&mut self, depth: usize) -> Result<(), DicomError> {
        loop {
            if self.peek_group() == Some(0xFFFE) {
                let save = self.pos;
                let (tag, _, _) = self.read_header()?;
                if tag == tags::ITEM_DELIMITATION {
                    return Ok(());
                }
                self.pos = save;
            }
            if self.at_end() {
                return Err(DicomError::TruncatedElement { tag: tags::ITEM, offset: self.pos, declared: 8, remaining: 0 });
            }
            self.read_element(depth)?;
        }
    }
}
