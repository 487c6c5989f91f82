use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{apply_mask, dropout_mask, trunc_normal, EncoderBlock, EncoderBlockCache, LayerNorm, LayerNormCache, Linear, Mode};
use super::tensor::{Real, Tensor};
use super::VitError;
use crate::volume::{Dims, Volume};

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Vit3dConfig {
    pub image_size: Dims,
    /// Edge of the cubic patch.
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub dropout_rate: f64,
    pub mlp_hidden_dim: usize,
}

impl Vit3dConfig {
    /// Two blocks of 16 heads, dropout 0.1, width 128 and a 4x MLP.
    pub fn standard(image_size: Dims, patch_size: usize) -> Self {
        Vit3dConfig { image_size, patch_size, embed_dim: 128, num_blocks: 2, num_heads: 16, dropout_rate: 0.1, mlp_hidden_dim: 512 }
    }

    /// Small model for tests and synthetic runs.
    pub fn tiny(image_size: Dims, patch_size: usize, embed_dim: usize, num_heads: usize) -> Self {
        Vit3dConfig { embed_dim, num_heads, mlp_hidden_dim: 4 * embed_dim, ..Self::standard(image_size, patch_size) }
    }

    pub fn validate(&self) -> Result<(), VitError> {
        let p = self.patch_size;
        let Dims { height, width, depth } = self.image_size;
        if p == 0 || !height.is_multiple_of(p) || !width.is_multiple_of(p) || !depth.is_multiple_of(p) || self.image_size.is_empty() {
            return Err(VitError::IndivisibleDims { dims: self.image_size, patch: p });
        }
        if self.num_heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(VitError::InvalidConfig(format!("embed dim {} is not divisible by {} heads", self.embed_dim, self.num_heads)));
        }
        if self.num_blocks == 0 || self.mlp_hidden_dim == 0 {
            return Err(VitError::InvalidConfig("need at least one block and a non-empty MLP".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(VitError::InvalidConfig(format!("dropout rate {}", self.dropout_rate)));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let p = self.patch_size;
        (self.image_size.height / p) * (self.image_size.width / p) * (self.image_size.depth / p)
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size.pow(3)
    }

    /// Patches plus the class token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }
}

/// Cuts a volume into non-overlapping `p³` cubes, enumerated depth-major then
/// row-major; each cube is flattened in the same (depth, row, column) order.
pub fn patchify<T: Real>(v: &Volume, p: usize) -> Result<Tensor<T>, VitError> {
    let dims = v.dims();
    if p == 0 || !dims.height.is_multiple_of(p) || !dims.width.is_multiple_of(p) || !dims.depth.is_multiple_of(p) {
        return Err(VitError::IndivisibleDims { dims, patch: p });
    }
    let (nz, nr, nc) = (dims.depth / p, dims.height / p, dims.width / p);
    let voxels = v.voxels();
    let mut data = Vec::with_capacity(voxels.len());
    for pz in 0..nz {
        for pr in 0..nr {
            for pc in 0..nc {
                for z in pz * p..(pz + 1) * p {
                    for r in pr * p..(pr + 1) * p {
                        let start = v.index(z, r, pc * p);
                        data.extend(voxels[start..start + p].iter().map(|&x| T::of(f64::from(x))));
                    }
                }
            }
        }
    }
    Ok(Tensor::from_vec(&[nz * nr * nc, p * p * p], data))
}

/// Inverse of [`patchify`] for `f32` patches.
pub fn unpatchify(patches: &Tensor<f32>, dims: Dims, p: usize) -> Result<Vec<f32>, VitError> {
    if p == 0 || !dims.height.is_multiple_of(p) || !dims.width.is_multiple_of(p) || !dims.depth.is_multiple_of(p) {
        return Err(VitError::IndivisibleDims { dims, patch: p });
    }
    let (nz, nr, nc) = (dims.depth / p, dims.height / p, dims.width / p);
    if patches.shape() != [nz * nr * nc, p * p * p] {
        return Err(VitError::ShapeMismatch { what: "patches", expected: vec![nz * nr * nc, p * p * p], found: patches.shape().to_vec() });
    }
    let mut out = vec![0.0; dims.len()];
    let mut src = patches.data().chunks_exact(p);
    for pz in 0..nz {
        for pr in 0..nr {
            for pc in 0..nc {
                for z in pz * p..(pz + 1) * p {
                    for r in pr * p..(pr + 1) * p {
                        let start = (z * dims.height + r) * dims.width + pc * p;
                        out[start..start + p].copy_from_slice(src.next().expect("patch rows counted above"));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// All learned tensors. The same struct carries gradients and optimizer
/// moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Vit3dParams<T> {
    pub patch_embed: Linear<T>,
    pub class_token: Tensor<T>,
    pub pos_embed: Tensor<T>,
    pub blocks: Vec<EncoderBlock<T>>,
    pub final_norm: LayerNorm<T>,
    pub head: Linear<T>,
}

impl<T: Real> Vit3dParams<T> {
    /// Every tensor zero, including layer-norm scales.
    pub fn zeros(config: &Vit3dConfig) -> Self {
        let d = config.embed_dim;
        Vit3dParams {
            patch_embed: Linear::zeros(config.patch_len(), d),
            class_token: Tensor::zeros(&[1, d]),
            pos_embed: Tensor::zeros(&[config.num_tokens(), d]),
            blocks: (0..config.num_blocks).map(|_| EncoderBlock::zeros(d, config.mlp_hidden_dim)).collect(),
            final_norm: LayerNorm::zeros(d),
            head: Linear::zeros(d, 1),
        }
    }

    /// Truncated-normal (std 0.02) weights and class token, zero biases and
    /// positional embedding, unit layer-norm scales.
    pub fn init<R: Rng + ?Sized>(config: &Vit3dConfig, rng: &mut R) -> Self {
        let d = config.embed_dim;
        Vit3dParams {
            patch_embed: Linear::init(config.patch_len(), d, rng),
            class_token: trunc_normal(&[1, d], 0.02, rng),
            pos_embed: Tensor::zeros(&[config.num_tokens(), d]),
            blocks: (0..config.num_blocks).map(|_| EncoderBlock::init(d, config.mlp_hidden_dim, rng)).collect(),
            final_norm: LayerNorm::new(d),
            head: Linear::init(d, 1, rng),
        }
    }

    /// Named tensors in canonical (checkpoint) order.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("patch_embed.weight".into(), &self.patch_embed.weight),
            ("patch_embed.bias".into(), &self.patch_embed.bias),
            ("class_token".into(), &self.class_token),
            ("pos_embed".into(), &self.pos_embed),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = |s: &str| format!("blocks.{i}.{s}");
            out.extend([
                (p("ln1.gamma"), &b.ln1.gamma),
                (p("ln1.beta"), &b.ln1.beta),
                (p("attn.q.weight"), &b.attn.q.weight),
                (p("attn.q.bias"), &b.attn.q.bias),
                (p("attn.k.weight"), &b.attn.k.weight),
                (p("attn.k.bias"), &b.attn.k.bias),
                (p("attn.v.weight"), &b.attn.v.weight),
                (p("attn.v.bias"), &b.attn.v.bias),
                (p("attn.o.weight"), &b.attn.o.weight),
                (p("attn.o.bias"), &b.attn.o.bias),
                (p("ln2.gamma"), &b.ln2.gamma),
                (p("ln2.beta"), &b.ln2.beta),
                (p("mlp.fc1.weight"), &b.mlp.fc1.weight),
                (p("mlp.fc1.bias"), &b.mlp.fc1.bias),
                (p("mlp.fc2.weight"), &b.mlp.fc2.weight),
                (p("mlp.fc2.bias"), &b.mlp.fc2.bias),
            ]);
        }
        out.extend([
            ("final_norm.gamma".into(), &self.final_norm.gamma),
            ("final_norm.beta".into(), &self.final_norm.beta),
            ("head.weight".into(), &self.head.weight),
            ("head.bias".into(), &self.head.bias),
        ]);
        out
    }

    /// Mutable tensors in the same order as [`Vit3dParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.patch_embed.weight, &mut self.patch_embed.bias, &mut self.class_token, &mut self.pos_embed];
        for b in &mut self.blocks {
            out.extend([
                &mut b.ln1.gamma,
                &mut b.ln1.beta,
                &mut b.attn.q.weight,
                &mut b.attn.q.bias,
                &mut b.attn.k.weight,
                &mut b.attn.k.bias,
                &mut b.attn.v.weight,
                &mut b.attn.v.bias,
                &mut b.attn.o.weight,
                &mut b.attn.o.bias,
                &mut b.ln2.gamma,
                &mut b.ln2.beta,
                &mut b.mlp.fc1.weight,
                &mut b.mlp.fc1.bias,
                &mut b.mlp.fc2.weight,
                &mut b.mlp.fc2.bias,
            ]);
        }
        out.extend([&mut self.final_norm.gamma, &mut self.final_norm.beta, &mut self.head.weight, &mut self.head.bias]);
        out
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let index = self.named().iter().position(|(n, _)| n == name)?;
        self.tensors_mut().into_iter().nth(index)
    }

    pub fn cast<U: Real>(&self) -> Vit3dParams<U> {
        let mut out = Vit3dParams::<U> {
            patch_embed: Linear::zeros(0, 0),
            class_token: Tensor::zeros(&[0]),
            pos_embed: Tensor::zeros(&[0]),
            blocks: self.blocks.iter().map(|_| EncoderBlock::zeros(0, 0)).collect(),
            final_norm: LayerNorm::zeros(0),
            head: Linear::zeros(0, 0),
        };
        for (dst, (_, src)) in out.tensors_mut().into_iter().zip(self.named()) {
            *dst = src.cast();
        }
        out
    }

    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        out.tensors_mut().into_iter().for_each(|t| t.fill(T::zero()));
        out
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, (_, b)) in self.tensors_mut().into_iter().zip(other.named()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, factor: T) {
        self.tensors_mut().into_iter().for_each(|t| t.scale(factor));
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|(_, t)| t.is_finite())
    }

    pub fn num_values(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    /// Checks every tensor against the shapes implied by `config`.
    pub fn check_shapes(&self, config: &Vit3dConfig) -> Result<(), VitError> {
        let reference = Vit3dParams::<T>::zeros(config);
        let mine = self.named();
        let theirs = reference.named();
        if mine.len() != theirs.len() {
            return Err(VitError::InvalidConfig(format!("{} tensors, config implies {}", mine.len(), theirs.len())));
        }
        for ((name, t), (_, r)) in mine.iter().zip(&theirs) {
            if t.shape() != r.shape() {
                return Err(VitError::ParamShape { name: name.clone(), expected: r.shape().to_vec(), found: t.shape().to_vec() });
            }
        }
        Ok(())
    }
}

struct ForwardCache<T> {
    patches: Tensor<T>,
    embed_mask: Option<Vec<T>>,
    blocks: Vec<EncoderBlockCache<T>>,
    final_norm: LayerNormCache<T>,
    cls: Tensor<T>,
}

/// A model instance: configuration, parameters and the activations of the
/// most recent recorded forward pass.
pub struct Vit3d<T> {
    pub config: Vit3dConfig,
    pub params: Vit3dParams<T>,
    cache: Option<ForwardCache<T>>,
}

impl<T: Real> Vit3d<T> {
    pub fn new(config: Vit3dConfig, params: Vit3dParams<T>) -> Result<Self, VitError> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(Vit3d { config, params, cache: None })
    }

    pub fn init<R: Rng + ?Sized>(config: Vit3dConfig, rng: &mut R) -> Result<Self, VitError> {
        config.validate()?;
        Ok(Vit3d { config, params: Vit3dParams::init(&config, rng), cache: None })
    }

    fn check_volume(&self, v: &Volume) -> Result<(), VitError> {
        if v.dims() != self.config.image_size {
            return Err(VitError::VolumeSize { expected: self.config.image_size, found: v.dims() });
        }
        Ok(())
    }

    /// Patch embedding, class token and positional embedding: `(N+1, d)`.
    pub fn embed(&self, patches: &Tensor<T>) -> Result<Tensor<T>, VitError> {
        let expected = [self.config.num_patches(), self.config.patch_len()];
        if patches.shape() != expected {
            return Err(VitError::ShapeMismatch { what: "patches", expected: expected.to_vec(), found: patches.shape().to_vec() });
        }
        let d = self.config.embed_dim;
        let e = self.params.patch_embed.forward(patches);
        let mut tokens = Vec::with_capacity(self.config.num_tokens() * d);
        tokens.extend_from_slice(self.params.class_token.data());
        tokens.extend_from_slice(e.data());
        let mut z = Tensor::from_vec(&[self.config.num_tokens(), d], tokens);
        z.add_assign(&self.params.pos_embed);
        Ok(z)
    }

    fn run<R: Rng + ?Sized>(&self, v: &Volume, mode: Mode, rng: &mut R) -> Result<(T, ForwardCache<T>), VitError> {
        self.check_volume(v)?;
        let patches = patchify::<T>(v, self.config.patch_size)?;
        let mut z = self.embed(&patches)?;
        let embed_mask = dropout_mask(z.len(), self.config.dropout_rate, mode, rng);
        apply_mask(&mut z, embed_mask.as_ref());
        let mut blocks = Vec::with_capacity(self.params.blocks.len());
        for block in &self.params.blocks {
            let (next, cache) = block.forward(&z, self.config.num_heads, self.config.dropout_rate, mode, rng);
            blocks.push(cache);
            z = next;
        }
        let cls_in = Tensor::from_vec(&[1, self.config.embed_dim], z.row(0).to_vec());
        let (cls, final_norm) = self.params.final_norm.forward(&cls_in);
        let logit = self.params.head.forward(&cls).data()[0];
        Ok((logit, ForwardCache { patches, embed_mask, blocks, final_norm, cls }))
    }

    /// Forward pass returning the logit and recording activations for
    /// [`Vit3d::backward`].
    pub fn forward_logit<R: Rng + ?Sized>(&mut self, v: &Volume, mode: Mode, rng: &mut R) -> Result<T, VitError> {
        let (logit, cache) = self.run(v, mode, rng)?;
        self.cache = Some(cache);
        Ok(logit)
    }

    /// MGMT probability in `(0, 1)`.
    pub fn forward<R: Rng + ?Sized>(&mut self, v: &Volume, mode: Mode, rng: &mut R) -> Result<T, VitError> {
        self.forward_logit(v, mode, rng).map(probability)
    }

    /// Eval-mode logit without touching the recorded activations.
    pub fn logit(&self, v: &Volume) -> Result<T, VitError> {
        self.run(v, Mode::Eval, &mut NoRng).map(|(logit, _)| logit)
    }

    pub fn predict(&self, v: &Volume) -> Result<T, VitError> {
        self.logit(v).map(probability)
    }

    /// Gradients of the loss for the recorded forward pass, given
    /// `dLoss/dlogit`. Consumes the recorded activations.
    pub fn backward(&mut self, dlogit: T) -> Result<Vit3dParams<T>, VitError> {
        let mut grads = self.params.zeros_like();
        self.backward_into(dlogit, &mut grads)?;
        Ok(grads)
    }

    /// Like [`Vit3d::backward`] but accumulates into `grads`.
    pub fn backward_into(&mut self, dlogit: T, grads: &mut Vit3dParams<T>) -> Result<(), VitError> {
        let cache = self.cache.take().ok_or(VitError::NoRecordedForward)?;
        let p = &self.params;
        let d = self.config.embed_dim;
        let dy = Tensor::from_vec(&[1, 1], vec![dlogit]);
        let dcls = p.head.backward(&cache.cls, &dy, &mut grads.head);
        let dcls_in = p.final_norm.backward(&cache.final_norm, &dcls, &mut grads.final_norm);
        let mut dz = Tensor::zeros(&[self.config.num_tokens(), d]);
        dz.row_mut(0).copy_from_slice(dcls_in.data());
        for ((block, bc), g) in p.blocks.iter().zip(&cache.blocks).zip(grads.blocks.iter_mut()).rev() {
            dz = block.backward(bc, &dz, self.config.num_heads, g);
        }
        apply_mask(&mut dz, cache.embed_mask.as_ref());
        grads.pos_embed.add_assign(&dz);
        for (g, &x) in grads.class_token.data_mut().iter_mut().zip(dz.row(0)) {
            *g += x;
        }
        let de = Tensor::from_vec(&[self.config.num_patches(), d], dz.data()[d..].to_vec());
        p.patch_embed.backward(&cache.patches, &de, &mut grads.patch_embed);
        Ok(())
    }

    pub fn has_recorded_forward(&self) -> bool {
        self.cache.is_some()
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Sigmoid kept strictly inside `(0, 1)` at the precision of `T`.
pub fn probability<T: Real>(logit: T) -> T {
    let half_eps = T::epsilon() / T::of(2.0);
    sigmoid(logit).max(T::min_positive_value()).min(T::one() - half_eps)
}

/// Generator for eval-mode passes, which never draw.
struct NoRng;

impl rand::RngCore for NoRng {
    fn next_u32(&mut self) -> u32 {
        unreachable!("eval mode does not sample")
    }

    fn next_u64(&mut self) -> u64 {
        unreachable!("eval mode does not sample")
    }

    fn fill_bytes(&mut self, _dst: &mut [u8]) {
        unreachable!("eval mode does not sample")
    }
}
