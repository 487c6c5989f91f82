#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use radiogen_core::vit::{Mode, Real, Vit3d, Vit3dConfig, Vit3dParams};
use radiogen_core::volume::{Dims, Volume};
use radiogen_core::Modality;

pub fn random_volume(dims: Dims, seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let voxels = (0..dims.len()).map(|_| rng.random::<f32>()).collect();
    Volume::new("00001", Modality::T1wCE, dims, voxels).unwrap()
}

/// Parameters with every entry drawn from N(0, std²) (layer-norm scales
/// around 1), so no gradient is structurally zero.
pub fn random_params(config: &Vit3dConfig, std: f64, seed: u64) -> Vit3dParams<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).unwrap();
    let mut params = Vit3dParams::<f32>::zeros(config);
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    for (name, t) in names.iter().zip(params.tensors_mut()) {
        let offset = if name.ends_with("gamma") { 1.0 } else { 0.0 };
        for x in t.data_mut() {
            *x = (offset + normal.sample(&mut rng)) as f32;
        }
    }
    params
}

/// Binary cross-entropy of a logit, written out directly.
pub fn bce(logit: f64, label: f64) -> f64 {
    logit.max(0.0) - logit * label + (-logit.abs()).exp().ln_1p()
}

pub fn loss_at<T: Real>(config: Vit3dConfig, params: &Vit3dParams<T>, v: &Volume, label: f64, mode: Mode, seed: u64) -> f64 {
    let mut model = Vit3d::new(config, params.clone()).unwrap();
    let logit = model.forward_logit(v, mode, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    bce(logit.to_f64().unwrap(), label)
}

/// Central difference of the loss along one parameter coordinate, in f64.
#[allow(clippy::too_many_arguments)]
pub fn numeric_grad(
    config: Vit3dConfig,
    params: &Vit3dParams<f64>,
    tensor: &str,
    index: usize,
    v: &Volume,
    label: f64,
    mode: Mode,
    seed: u64,
    step: f64,
) -> f64 {
    let mut plus = params.clone();
    plus.tensor_mut(tensor).unwrap().data_mut()[index] += step;
    let mut minus = params.clone();
    minus.tensor_mut(tensor).unwrap().data_mut()[index] -= step;
    (loss_at(config, &plus, v, label, mode, seed) - loss_at(config, &minus, v, label, mode, seed)) / (2.0 * step)
}

/// Analytic gradient through the model's own backward pass.
pub fn analytic_grads<T: Real>(config: Vit3dConfig, params: &Vit3dParams<T>, v: &Volume, label: f64, mode: Mode, seed: u64) -> Vit3dParams<T> {
    let mut model = Vit3d::new(config, params.clone()).unwrap();
    let logit = model.forward_logit(v, mode, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let z = logit.to_f64().unwrap();
    let p = 1.0 / (1.0 + (-z).exp());
    model.backward(T::of(p - label)).unwrap()
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Runs the finite-difference comparison over `coords` random entries of
/// every tensor; returns (tensor name, worst relative error).
pub fn gradient_check<T: Real>(
    config: Vit3dConfig,
    params32: &Vit3dParams<f32>,
    v: &Volume,
    coords: usize,
    floor: f64,
    seed: u64,
) -> Vec<(String, f64)> {
    let label = 1.0;
    let mode = Mode::Train;
    let pt: Vit3dParams<T> = params32.cast();
    let p64: Vit3dParams<f64> = params32.cast();
    let grads = analytic_grads(config, &pt, v, label, mode, seed);
    let mut pick = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut out = Vec::new();
    for (name, g) in grads.named() {
        let n = g.len();
        let indices: Vec<usize> = if n <= coords { (0..n).collect() } else { (0..coords).map(|_| pick.random_range(0..n)).collect() };
        let mut worst: f64 = 0.0;
        for i in indices {
            let a = g.data()[i].to_f64().unwrap();
            let num = numeric_grad(config, &p64, &name, i, v, label, mode, seed, 1e-5);
            worst = worst.max(rel_err(a, num, floor));
        }
        out.push((name, worst));
    }
    out
}

/// The planted-signal fixture: `n` subjects of `dims`, half positive, low
/// noise, written as DICOM and read back through the volume pipeline.
#[allow(dead_code)]
pub fn planted_fixture(n: usize, dims: Dims, seed: u64, modality: Modality) -> (Vec<Volume>, Vec<u8>) {
    use radiogen_core::dicom::scan_dataset;
    use radiogen_core::synth::{generate_dataset, SynthSpec};
    use radiogen_core::volume::load_series;
    let dir = tempfile::tempdir().unwrap();
    let spec = SynthSpec::new(n, dims, seed);
    generate_dataset(&spec, dir.path()).unwrap();
    let index = scan_dataset(dir.path(), Some(&dir.path().join("labels.csv"))).unwrap();
    let mut volumes = Vec::new();
    let mut labels = Vec::new();
    for s in &index.subjects {
        volumes.push(load_series(&s.series[&modality], &s.subject_id, modality, dims).unwrap());
        labels.push(index.label(&s.subject_id).unwrap());
    }
    (volumes, labels)
}
