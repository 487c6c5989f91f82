//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use radiogen_core::dicom::{parse_dicom_file, scan_dataset};
use radiogen_core::ensemble::{average_ensemble, fit_stacking, fit_stacking_from, predict_stacking, Prediction, StackingOptions};
use radiogen_core::metrics::roc_auc;
use radiogen_core::synth::{encode_dicom, generate_dataset, random_slice, SynthSpec};
use radiogen_core::train::{train_with, EarlyStopping, EpochLog, TrainConfig, TrainObserver, Verdict};
use radiogen_core::vit::{patchify, unpatchify, Checkpoint, Mode, Real, Vit3d, Vit3dConfig, Vit3dParams};
use radiogen_core::volume::{apply_voi_lut, load_series, Dims, Volume};
use radiogen_core::Modality;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

// ---------------------------------------------------------------- 2

/// Floor for the relative-error denominator; the attention key bias has an
/// identically zero gradient.
const GRAD_FLOOR: f64 = 1e-4;

fn random_params(config: &Vit3dConfig, seed: u64) -> Vit3dParams<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vit3dParams::<f32>::zeros(config);
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    for (name, t) in names.iter().zip(params.tensors_mut()) {
        let offset = if name.ends_with("gamma") { 1.0 } else { 0.0 };
        for x in t.data_mut() {
            *x = offset + rng.random_range(-0.5f32..0.5);
        }
    }
    params
}

fn bce(logit: f64, y: f64) -> f64 {
    logit.max(0.0) - logit * y + (-logit.abs()).exp().ln_1p()
}

fn loss<T: Real>(config: Vit3dConfig, params: &Vit3dParams<T>, v: &Volume, seed: u64) -> f64 {
    let mut model = Vit3d::new(config, params.clone()).unwrap();
    let z = model.forward_logit(v, Mode::Train, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    bce(z.to_f64().unwrap(), 1.0)
}

/// Worst relative error over every tensor, analytic gradients in `T`,
/// central differences in f64.
fn worst_grad_error<T: Real>(config: Vit3dConfig, seed: u64) -> (f64, String, usize) {
    let params32 = random_params(&config, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let voxels = (0..config.image_size.len()).map(|_| rng.random::<f32>()).collect();
    let v = Volume::new("00001", Modality::T1wCE, config.image_size, voxels).unwrap();
    let dropout_seed = seed + 2;

    let pt: Vit3dParams<T> = params32.cast();
    let p64: Vit3dParams<f64> = params32.cast();
    let mut model = Vit3d::new(config, pt).unwrap();
    let z = model.forward_logit(&v, Mode::Train, &mut ChaCha8Rng::seed_from_u64(dropout_seed)).unwrap().to_f64().unwrap();
    let grads = model.backward(T::of(1.0 / (1.0 + (-z).exp()) - 1.0)).unwrap();

    let h = 1e-5;
    let mut worst = (0.0, String::new(), 0);
    for (name, g) in grads.named() {
        worst.2 += 1;
        for _ in 0..20 {
            let i = rng.random_range(0..g.len());
            let mut plus = p64.clone();
            plus.tensor_mut(&name).unwrap().data_mut()[i] += h;
            let mut minus = p64.clone();
            minus.tensor_mut(&name).unwrap().data_mut()[i] -= h;
            let numeric = (loss(config, &plus, &v, dropout_seed) - loss(config, &minus, &v, dropout_seed)) / (2.0 * h);
            let analytic = g.data()[i].to_f64().unwrap();
            let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
            if err > worst.0 {
                worst.0 = err;
                worst.1.clone_from(&name);
            }
        }
    }
    worst
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let config = Vit3dConfig::tiny(Dims::new(16, 16, 16), 8, 16, 4);
    let (e32, t32, tensors) = worst_grad_error::<f32>(config, 101);
    let (e64, t64, _) = worst_grad_error::<f64>(config, 202);
    let elapsed = start.elapsed();
    outcome(
        e32 <= 1e-3 && e64 <= 1e-6 && elapsed < Duration::from_secs(60),
        format!(
            "{tensors} tensors x 20 coords; f32 worst {e32:.2e} ({t32}) <= 1e-3, f64 worst {e64:.2e} ({t64}) <= 1e-6, {:.1} s < 60 s",
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 3

fn load_fixture(dir: &Path, seed: u64, modality: Modality) -> (Vec<Volume>, Vec<u8>) {
    let dims = Dims::new(32, 32, 32);
    generate_dataset(&SynthSpec::new(8, dims, seed), dir).unwrap();
    let index = scan_dataset(dir, Some(&dir.join("labels.csv"))).unwrap();
    index
        .subjects
        .iter()
        .map(|s| (load_series(&s.series[&modality], &s.subject_id, modality, dims).unwrap(), index.label(&s.subject_id).unwrap()))
        .unzip()
}

fn auc_on(model: &Vit3d<f32>, data: &[(&Volume, u8)]) -> f64 {
    let scores: Vec<f64> = data.iter().map(|(v, _)| f64::from(model.predict(v).unwrap())).collect();
    let labels: Vec<u8> = data.iter().map(|(_, y)| *y).collect();
    roc_auc(&scores, &labels).unwrap().0
}

struct UntilTrainAuc {
    reached: Option<(usize, f64)>,
    first: Option<f64>,
}

impl TrainObserver for UntilTrainAuc {
    fn epoch_end(&mut self, row: &EpochLog, model: &Vit3d<f32>, train: &[(&Volume, u8)]) -> bool {
        let auc = auc_on(model, train);
        self.first.get_or_insert(auc);
        if auc >= 0.95 {
            self.reached = Some((row.epoch, auc));
        }
        self.reached.is_none()
    }
}

fn planted_signal_overfit() -> Outcome {
    let start = Instant::now();
    let model_config = Vit3dConfig::tiny(Dims::new(32, 32, 32), 8, 32, 4);
    let mut wins = 0;
    let mut notes = Vec::new();
    for seed in 1..=4u64 {
        let dir = tempfile::tempdir().unwrap();
        let (volumes, labels) = load_fixture(dir.path(), seed, Modality::T1wCE);
        let config = TrainConfig { epochs: 200, val_split: 0.25, early_stop_patience: 200, ..TrainConfig::new(Modality::T1wCE, seed) };
        let mut obs = UntilTrainAuc { reached: None, first: None };
        let out = train_with(&volumes, &labels, &model_config, &config, None, &mut obs).unwrap();
        let initial = Vit3d::<f32>::init(model_config, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let train_set: Vec<(&Volume, u8)> = volumes
            .iter()
            .zip(&labels)
            .filter(|(v, _)| out.split.train.contains(&v.subject_id))
            .map(|(v, &y)| (v, y))
            .collect();
        let before = auc_on(&initial, &train_set);
        match obs.reached {
            Some((epoch, auc)) => {
                wins += 1;
                notes.push(format!("seed {seed}: {auc:.3} at epoch {epoch} (untrained {before:.3})"));
            }
            None => notes.push(format!("seed {seed}: not reached in {} epochs (untrained {before:.3})", out.log.len())),
        }
    }
    let elapsed = start.elapsed();
    outcome(
        wins >= 3 && elapsed < Duration::from_secs(300),
        format!("{wins}/4 seeds reach train AUC >= 0.95; {}; {:.1} s < 300 s", notes.join("; "), elapsed.as_secs_f64()),
    )
}

// ---------------------------------------------------------------- 4

fn pair_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

fn auc_oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let mut with_ties = 0;
    for _ in 0..500 {
        let n = rng.random_range(2..=200);
        let levels = rng.random_range(1..=n.max(2) as u32);
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..levels)) / f64::from(levels)).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..=1)).collect();
        labels[0] = 0;
        labels[1] = 1;
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            with_ties += 1;
        }
        let (auc, _) = roc_auc(&scores, &labels).unwrap();
        worst = worst.max((auc - pair_auc(&scores, &labels)).abs());
    }
    let (example, _) = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
    outcome(
        worst <= 1e-12 && example == 0.75,
        format!("500 instances ({with_ties} with ties), max |diff| {worst:.1e} <= 1e-12; worked example {example} == 0.75"),
    )
}

// ---------------------------------------------------------------- 5

fn dicom_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = 0;
    let mut truncations = 0;
    let mut bad_truncations = 0;
    for _ in 0..1000 {
        let slice = random_slice(&mut rng);
        let bytes = encode_dicom(&slice).unwrap();
        // The parsed element map also holds the file meta group and the
        // header elements the writer regenerates.
        let same = parse_dicom_file(&bytes).is_ok_and(|back| {
            back.header == slice.header
                && back.pixels == slice.pixels
                && slice.tags.iter().all(|(tag, value)| back.tags.get(tag) == Some(value))
        });
        if !same {
            mismatches += 1;
        }
        for _ in 0..5 {
            let cut = rng.random_range(0..bytes.len());
            truncations += 1;
            let result = catch_unwind(|| parse_dicom_file(&bytes[..cut]).map_err(|e| e.category()));
            if !matches!(result, Ok(Err(category)) if !category.is_empty()) {
                bad_truncations += 1;
            }
        }
    }
    outcome(
        mismatches == 0 && bad_truncations == 0,
        format!("1000 slices, {mismatches} mismatches; {truncations} truncations, {bad_truncations} not a categorized error"),
    )
}

// ---------------------------------------------------------------- 6

fn voi_lut_conformance() -> Outcome {
    let lut = |x: f64, c: f64, w: f64| apply_voi_lut(x, c, w, 0.0, 1.0).unwrap();
    let low = lut(0.0, 2048.0, 4096.0);
    let high = lut(4095.0, 2048.0, 4096.0);
    let mid = lut(2047.5, 2048.0, 4096.0);
    let vectors = low.abs() <= 1e-12 && (high - 1.0).abs() <= 1e-12 && (mid - 0.5).abs() <= 1e-12;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut violations = 0;
    for _ in 0..100_000 {
        let c = rng.random_range(-5000.0..5000.0);
        let w = rng.random_range(1.0001..10_000.0);
        let a = rng.random_range(-10_000.0..10_000.0);
        let b = rng.random_range(-10_000.0..10_000.0);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        if lut(lo, c, w) > lut(hi, c, w) {
            violations += 1;
        }
    }
    outcome(
        vectors && violations == 0,
        format!("f(0)={low}, f(4095)={high}, f(c-0.5)={mid}; {violations} monotonicity violations in 1e5 draws"),
    )
}

// ---------------------------------------------------------------- 7

fn patchify_shape_law() -> Outcome {
    let big = Volume::filled("00001", Modality::Flair, Dims::new(256, 256, 64), 0.25).unwrap();
    let s32 = patchify::<f32>(&big, 32).unwrap().shape().to_vec();
    let s16 = patchify::<f32>(&big, 16).unwrap().shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut identities = 0;
    let mut trials = 0;
    for _ in 0..20 {
        let p = [2usize, 4, 8][rng.random_range(0..3)];
        let dims = Dims::new(p * rng.random_range(1..5), p * rng.random_range(1..5), p * rng.random_range(1..5));
        let voxels: Vec<f32> = (0..dims.len()).map(|_| rng.random()).collect();
        let v = Volume::new("00002", Modality::T2w, dims, voxels.clone()).unwrap();
        trials += 1;
        if unpatchify(&patchify::<f32>(&v, p).unwrap(), dims, p).unwrap() == voxels {
            identities += 1;
        }
    }
    outcome(
        s32 == [128, 32768] && s16 == [1024, 4096] && identities == trials,
        format!("p=32 -> {s32:?}, p=16 -> {s16:?}; unpatchify(patchify(v)) == v on {identities}/{trials} random volumes"),
    )
}

// ---------------------------------------------------------------- 8

fn full(id: &str, x: [f64; 4]) -> Prediction {
    Modality::ALL.iter().fold(Prediction::new(id), |acc, &m| acc.with(m, x[m.index()]))
}

fn ensemble_laws() -> Outcome {
    let avg = average_ensemble(&[full("00001", [0.2, 0.4, 0.6, 0.8])]).unwrap()[0].final_probability.unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut preds = Vec::new();
    let mut labels = Vec::new();
    for i in 0..40 {
        let y = (i % 2) as u8;
        let ce = if y == 1 { rng.random_range(0.9..1.0) } else { rng.random_range(0.0..0.1) };
        preds.push(full(&format!("{i:05}"), [rng.random(), ce, rng.random(), rng.random()]));
        labels.push(y);
    }
    let options = StackingOptions::default();
    let fit = fit_stacking(&preds, &labels, &options).unwrap();
    let out = predict_stacking(&fit.model, &preds).unwrap();
    let correct = out.iter().zip(&labels).filter(|(p, &y)| u8::from(p.final_probability.unwrap() >= 0.5) == y).count();
    let accuracy = correct as f64 / labels.len() as f64;

    let mut spread: f64 = 0.0;
    for _ in 0..10 {
        let w0: [f64; 4] = std::array::from_fn(|_| rng.random_range(-5.0..5.0));
        let refit = fit_stacking_from(&preds, &labels, &options, w0, rng.random_range(-5.0..5.0)).unwrap();
        let diff = refit
            .model
            .weights
            .iter()
            .zip(&fit.model.weights)
            .map(|(a, b)| (a - b).abs())
            .fold((refit.model.bias - fit.model.bias).abs(), f64::max);
        spread = spread.max(diff);
    }
    outcome(
        (avg - 0.5).abs() <= 1e-12 && accuracy == 1.0 && spread <= 1e-4,
        format!("average {avg}; stacking train accuracy {accuracy}; 10 random inits within {spread:.1e} <= 1e-4"),
    )
}

// ---------------------------------------------------------------- 9

fn radiogen(args: &[&str]) {
    let status = Command::new(env!("CARGO_BIN_EXE_radiogen")).arg("-q").args(args).stdout(Stdio::null()).status().expect("spawn radiogen");
    assert!(status.success(), "radiogen {args:?} exited with {status}");
}

/// Runs synth through eval under `root` and returns every artifact's bytes.
fn pipeline(root: &Path, jobs: &str) -> BTreeMap<String, Vec<u8>> {
    let p = |rel: &str| root.join(rel).to_str().unwrap().to_string();
    radiogen(&["synth", "--out", &p("raw"), "--subjects", "8", "--dims", "32x32x32", "--seed", "3", "--jobs", jobs]);
    radiogen(&["prep", "--input", &p("raw"), "--output", &p("prep"), "--size", "32", "--depth", "32", "--jobs", jobs]);
    let mut pred_files = Vec::new();
    for m in Modality::ALL {
        let (ckpt, preds) = (p(&format!("models/{m}.ckpt")), p(&format!("preds/{m}.csv")));
        radiogen(&[
            "train", "--data", &p("prep"), "--labels", &p("raw/labels.csv"), "--modality", m.as_str(), "--patch", "8",
            "--image-size", "32", "--depth", "32", "--embed-dim", "32", "--heads", "4", "--epochs", "4", "--val-split",
            "0.25", "--seed", "3", "--out", &ckpt,
        ]);
        radiogen(&["predict", "--model", &ckpt, "--data", &p("prep"), "--out", &preds]);
        pred_files.push(preds);
    }
    radiogen(&["ensemble", "--mode", "average", "--preds", &pred_files.join(","), "--out", &p("final.csv")]);
    radiogen(&["eval", "--preds", &p("final.csv"), "--labels", &p("raw/labels.csv"), "--out-dir", &p("report")]);

    let mut artifacts = BTreeMap::new();
    for m in Modality::ALL {
        for rel in [format!("models/{m}.ckpt"), format!("models/{m}.ckpt.log.csv"), format!("preds/{m}.csv")] {
            artifacts.insert(rel.clone(), std::fs::read(root.join(&rel)).unwrap());
        }
    }
    for rel in ["final.csv", "report/report.txt", "report/roc.csv", "report/roc.svg"] {
        artifacts.insert(rel.to_string(), std::fs::read(root.join(rel)).unwrap());
    }
    artifacts
}

fn cli_determinism() -> Outcome {
    let start = Instant::now();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = pipeline(a.path(), "4");
    let second = pipeline(b.path(), "1");
    let differing: Vec<&String> = first.iter().filter(|(k, v)| second.get(*k) != Some(v)).map(|(k, _)| k).collect();
    let report_ok = std::str::from_utf8(&first["report/report.txt"]).is_ok_and(|t| t.contains("auc = "));
    outcome(
        differing.is_empty() && first.len() == second.len() && report_ok,
        format!(
            "two runs (--jobs 4 vs 1), {} artifacts compared, differing: {differing:?}; {:.1} s",
            first.len(),
            start.elapsed().as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------- 10

struct Scripted {
    losses: [f64; 5],
    snapshots: Vec<Vit3dParams<f32>>,
}

impl TrainObserver for Scripted {
    fn validation_loss(&mut self, epoch: usize, _measured: f64) -> f64 {
        self.losses.get(epoch - 1).copied().unwrap_or(f64::INFINITY)
    }

    fn epoch_end(&mut self, _row: &EpochLog, model: &Vit3d<f32>, _train: &[(&Volume, u8)]) -> bool {
        self.snapshots.push(model.params.clone());
        true
    }
}

fn early_stopping_contract() -> Outcome {
    let seq = [0.9, 0.8, 0.85, 0.86, 0.87];
    let mut stopper = EarlyStopping::new(3);
    let verdicts: Vec<Verdict> = seq.iter().enumerate().map(|(i, &l)| stopper.observe(i + 1, l)).collect();
    let expected = [Verdict::Improved, Verdict::Improved, Verdict::Continue, Verdict::Continue, Verdict::Stop];

    let dir = tempfile::tempdir().unwrap();
    let (volumes, labels) = load_fixture(&dir.path().join("data"), 10, Modality::T1w);
    let model = Vit3dConfig::tiny(Dims::new(32, 32, 32), 8, 16, 4);
    let config = TrainConfig { epochs: 50, val_split: 0.25, early_stop_patience: 3, ..TrainConfig::new(Modality::T1w, 10) };
    let path = dir.path().join("best.ckpt");
    let mut script = Scripted { losses: seq, snapshots: Vec::new() };
    let out = train_with(&volumes, &labels, &model, &config, Some(&path), &mut script).unwrap();
    let saved = Checkpoint::load(&path).unwrap();
    let epochs = out.log.len();
    let pass = verdicts == expected
        && out.stopped_early
        && epochs == 5
        && saved.epoch == 2
        && saved.best_val_loss == Some(0.8)
        && saved.params == script.snapshots[1];
    outcome(
        pass,
        format!(
            "verdicts {verdicts:?}; training stopped after epoch {epochs}; saved checkpoint epoch {} (val loss {:?}), weights equal epoch 2's: {}",
            saved.epoch,
            saved.best_val_loss,
            saved.params == script.snapshots[1]
        ),
    )
}

type Criterion = (u8, &'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 9] = [
        (2, "gradient correctness", gradient_correctness),
        (3, "planted-signal overfit", planted_signal_overfit),
        (4, "AUC oracle equivalence", auc_oracle_equivalence),
        (5, "DICOM round trip", dicom_round_trip),
        (6, "VOI LUT conformance", voi_lut_conformance),
        (7, "patchify shape law", patchify_shape_law),
        (8, "ensemble laws", ensemble_laws),
        (9, "CLI determinism", cli_determinism),
        (10, "early-stopping contract", early_stopping_contract),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| f == &id.to_string()) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let verdict = if result.pass { "PASS" } else { "FAIL" };
        if !result.pass {
            failed += 1;
        }
        println!("{verdict} {id:>2} {name} [{:.1} s]: {}", start.elapsed().as_secs_f64(), result.detail);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
