//! Seeded volume augmentation: lossless 90° turns and horizontal flips, and
//! a random in-plane rotation plus translation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::volume::Volume;

#[derive(Debug, thiserror::Error)]
pub enum AugmentError {
    #[error("quarter turns need a square plane, got {height}x{width}")]
    NonSquarePlane { height: usize, width: usize },
    #[error("invalid augmentation policy: {0}")]
    InvalidPolicy(String),
}

impl AugmentError {
    pub fn category(&self) -> &'static str {
        match self {
            AugmentError::NonSquarePlane { .. } => "NonSquarePlane",
            AugmentError::InvalidPolicy(_) => "InvalidPolicy",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AugmentKind {
    Rot90CW,
    Rot90CCW,
    Rot180,
    HFlip,
    RandomAffine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub kind: AugmentKind,
    pub max_rotation_deg: f64,
    pub max_translate_frac: f64,
    pub seed: u64,
}

impl AugmentPolicy {
    pub fn new(kind: AugmentKind, seed: u64) -> Self {
        AugmentPolicy { kind, max_rotation_deg: 36.0, max_translate_frac: 0.10, seed }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        if !(self.max_rotation_deg >= 0.0) || !self.max_rotation_deg.is_finite() {
            return Err(AugmentError::InvalidPolicy(format!("max rotation {}", self.max_rotation_deg)));
        }
        if !(0.0..1.0).contains(&self.max_translate_frac) {
            return Err(AugmentError::InvalidPolicy(format!("max translation fraction {}", self.max_translate_frac)));
        }
        Ok(())
    }

    /// Applies the policy to the `index`-th sample. The generator is derived
    /// from `(seed, index)` only, so results do not depend on scheduling.
    pub fn apply(&self, v: &Volume, index: u64) -> Result<Volume, AugmentError> {
        self.validate()?;
        match self.kind {
            AugmentKind::Rot90CW => rotate90(v, 1),
            AugmentKind::Rot180 => rotate90(v, 2),
            AugmentKind::Rot90CCW => rotate90(v, 3),
            AugmentKind::HFlip => Ok(horizontal_flip(v)),
            AugmentKind::RandomAffine => random_affine(v, self, &mut sample_rng(self.seed, index)),
        }
    }
}

/// Independent generator stream for sample `index`.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Rotates every depth slice by `k` quarter turns clockwise.
pub fn rotate90(v: &Volume, k: u32) -> Result<Volume, AugmentError> {
    let (h, w) = (v.height(), v.width());
    let k = k % 4;
    if k % 2 == 1 && h != w {
        return Err(AugmentError::NonSquarePlane { height: h, width: w });
    }
    if k == 0 {
        return Ok(v.clone());
    }
    let mut out = vec![0.0; v.voxels().len()];
    for z in 0..v.depth() {
        let src = v.slice(z);
        let dst = &mut out[z * h * w..(z + 1) * h * w];
        for r in 0..h {
            for c in 0..w {
                dst[r * w + c] = match k {
                    1 => src[(h - 1 - c) * w + r],
                    2 => src[(h - 1 - r) * w + (w - 1 - c)],
                    _ => src[c * w + (w - 1 - r)],
                };
            }
        }
    }
    Ok(v.with_voxels(v.dims(), out).expect("rotation keeps dims"))
}

/// Reverses the columns of every slice.
pub fn horizontal_flip(v: &Volume) -> Volume {
    let w = v.width();
    let mut out = v.voxels().to_vec();
    for row in out.chunks_exact_mut(w) {
        row.reverse();
    }
    v.with_voxels(v.dims(), out).expect("flip keeps dims")
}

/// One draw of the random in-plane transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub angle_deg: f64,
    /// Column offset in voxels.
    pub dx: f64,
    /// Row offset in voxels.
    pub dy: f64,
}

/// Samples `angle ~ U[-max_rot, max_rot]`, `dx ~ U[-f*W, f*W]`,
/// `dy ~ U[-f*H, f*H]`. Always consumes three draws.
pub fn sample_affine<R: Rng + ?Sized>(policy: &AugmentPolicy, height: usize, width: usize, rng: &mut R) -> AffineParams {
    let mut symmetric = |bound: f64| bound * (2.0 * rng.random::<f64>() - 1.0);
    let angle_deg = symmetric(policy.max_rotation_deg);
    let dx = symmetric(policy.max_translate_frac * width as f64);
    let dy = symmetric(policy.max_translate_frac * height as f64);
    AffineParams { angle_deg, dx, dy }
}

/// Rotates each slice about its centre, then translates, resampling
/// bilinearly with zeros outside the frame.
pub fn apply_affine(v: &Volume, params: AffineParams) -> Volume {
    let (h, w) = (v.height(), v.width());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = params.angle_deg.to_radians().sin_cos();
    let mut out = vec![0.0f32; v.voxels().len()];
    for z in 0..v.depth() {
        let src = v.slice(z);
        let fetch = |r: isize, c: isize| -> f64 {
            if r < 0 || c < 0 || r as usize >= h || c as usize >= w {
                0.0
            } else {
                f64::from(src[r as usize * w + c as usize])
            }
        };
        let dst = &mut out[z * h * w..(z + 1) * h * w];
        for r in 0..h {
            for c in 0..w {
                // inverse map: undo the translation, then the rotation
                let u = c as f64 - cx - params.dx;
                let t = r as f64 - cy - params.dy;
                let x = cos * u + sin * t + cx;
                let y = -sin * u + cos * t + cy;
                let (x0, y0) = (x.floor(), y.floor());
                let (fx, fy) = (x - x0, y - y0);
                let (xi, yi) = (x0 as isize, y0 as isize);
                let mut acc = fetch(yi, xi) * (1.0 - fx) * (1.0 - fy);
                if fx > 0.0 {
                    acc += fetch(yi, xi + 1) * fx * (1.0 - fy);
                }
                if fy > 0.0 {
                    acc += fetch(yi + 1, xi) * (1.0 - fx) * fy;
                    if fx > 0.0 {
                        acc += fetch(yi + 1, xi + 1) * fx * fy;
                    }
                }
                dst[r * w + c] = acc as f32;
            }
        }
    }
    v.with_voxels(v.dims(), out).expect("affine keeps dims")
}

pub fn random_affine<R: Rng + ?Sized>(v: &Volume, policy: &AugmentPolicy, rng: &mut R) -> Result<Volume, AugmentError> {
    policy.validate()?;
    let params = sample_affine(policy, v.height(), v.width(), rng);
    Ok(apply_affine(v, params))
}

/// Originals followed by every volume turned 90° clockwise, then 180°, then
/// 90° counterclockwise. Output `i` shares the label of input `i % n`.
pub fn expand_training_set(volumes: &[Volume]) -> Result<Vec<Volume>, AugmentError> {
    let mut out = volumes.to_vec();
    for k in 1..=3 {
        for v in volumes {
            out.push(rotate90(v, k)?);
        }
    }
    Ok(out)
}
