use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use radiogen_core::dicom::{normalize_subject_id, read_labels_csv, scan_dataset};
use radiogen_core::ensemble::{
    aligned_labels, average_ensemble, fit_stacking, merge_modalities, predict_stacking, read_predictions_csv,
    write_predictions_csv, Prediction, StackingModel, StackingOptions,
};
use radiogen_core::metrics::{emit_report, report_text, MetricsReport, ReportPaths};
use radiogen_core::synth::{generate_dataset, SynthSpec};
use radiogen_core::train::{evaluate, log_csv, train_with, EpochLog, TrainConfig, TrainObserver};
use radiogen_core::vit::{Checkpoint, Vit3d, Vit3dConfig, VitError};
use radiogen_core::volume::{load_series, read_volume_cache, write_volume_cache, Dims, Volume};
use radiogen_core::Modality;
use serde::Serialize;

use crate::failure::{io_failure, usage, OrFail};
use crate::{EnsembleArgs, EnsembleMode, EvalArgs, PredictArgs, PrepArgs, SynthArgs, TrainArgs};

const SIDECAR_SUFFIX: &str = ".run.json";

#[derive(Serialize)]
struct RunRecord<'a, A: Serialize> {
    program: &'static str,
    version: &'static str,
    command: &'a str,
    args: &'a A,
    #[serde(skip_serializing_if = "serde_json::Value::is_null")]
    effective: serde_json::Value,
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = OsString::from(path.as_os_str());
    s.push(suffix);
    PathBuf::from(s)
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))
}

fn create_parent(path: &Path) -> anyhow::Result<()> {
    match path.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(dir) => create_dir(dir),
        None => Ok(()),
    }
}

/// Logs the effective configuration and writes it next to the artifact.
fn record<A: Serialize>(command: &str, args: &A, effective: serde_json::Value, sidecar: &Path) -> anyhow::Result<()> {
    let run = RunRecord { program: "radiogen", version: env!("CARGO_PKG_VERSION"), command, args, effective };
    let json = serde_json::to_string_pretty(&run)?;
    info!("{command} {}", serde_json::to_string(&run)?);
    fs::write(sidecar, json + "\n").map_err(|e| io_failure(sidecar, e))
}

fn thread_pool(jobs: Option<usize>) -> anyhow::Result<rayon::ThreadPool> {
    if jobs == Some(0) {
        return Err(usage("--jobs must be at least 1"));
    }
    Ok(rayon::ThreadPoolBuilder::new().num_threads(jobs.unwrap_or(0)).build()?)
}

pub fn synth(args: &SynthArgs) -> anyhow::Result<()> {
    let spec = SynthSpec {
        positive_fraction: args.positive_fraction,
        lesion_side: args.lesion_side,
        lesion_delta: args.lesion_delta,
        noise_sigma: args.noise_sigma,
        ..SynthSpec::new(args.subjects, args.dims, args.seed)
    };
    spec.validate().or_fail()?;
    let pool = thread_pool(args.jobs)?;
    create_dir(&args.out)?;
    let subjects = pool.install(|| generate_dataset(&spec, &args.out)).or_fail()?;
    let positives = subjects.iter().filter(|s| s.label == 1).count();
    info!("wrote {} subjects ({positives} positive) to {}", subjects.len(), args.out.display());
    record("synth", args, serde_json::Value::Null, &args.out.join("run.json"))
}

pub fn prep(args: &PrepArgs) -> anyhow::Result<()> {
    if args.size == 0 || args.depth == 0 {
        return Err(usage("--size and --depth must be positive"));
    }
    if args.modalities.is_empty() {
        return Err(usage("--modalities is empty"));
    }
    let target = Dims::new(args.size, args.size, args.depth);
    let pool = thread_pool(args.jobs)?;
    let index = scan_dataset(&args.input, None).or_fail()?;
    let mut work = Vec::new();
    for subject in &index.subjects {
        for &m in &args.modalities {
            match subject.series.get(&m) {
                Some(files) if !files.is_empty() => work.push((subject.subject_id.as_str(), m, files.as_slice())),
                _ => warn!("subject {} has no {m} series", subject.subject_id),
            }
        }
    }
    create_dir(&args.output)?;
    pool.install(|| {
        use rayon::prelude::*;
        work.par_iter().try_for_each(|&(id, m, files)| -> anyhow::Result<()> {
            let volume = load_series(files, id, m, target).or_fail()?;
            let dir = args.output.join(id);
            create_dir(&dir)?;
            write_volume_cache(&volume, &dir.join(format!("{m}.vol"))).or_fail()
        })
    })?;
    info!("prepared {} volumes from {} subjects", work.len(), index.subjects.len());
    record("prep", args, serde_json::Value::Null, &args.output.join("run.json"))
}

/// Prepared volumes of one modality, sorted by subject.
fn load_prepared(data: &Path, modality: Modality) -> anyhow::Result<Vec<Volume>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(data).map_err(|e| io_failure(data, e))? {
        let path = entry.map_err(|e| io_failure(data, e))?.path();
        if let Some(id) = path.file_name().and_then(|n| n.to_str()).and_then(normalize_subject_id) {
            let file = path.join(format!("{modality}.vol"));
            if file.is_file() {
                ids.push((id, file));
            }
        }
    }
    ids.sort();
    ids.iter().map(|(id, file)| read_volume_cache(file, id).or_fail()).collect()
}

struct Progress;

impl TrainObserver for Progress {
    fn epoch_end(&mut self, row: &EpochLog, _model: &Vit3d<f32>, _train: &[(&Volume, u8)]) -> bool {
        let auc = row.val_auc.map_or_else(|| "undefined".to_string(), |a| format!("{a:.4}"));
        info!(
            "epoch {} train_loss {:.6} val_loss {:.6} val_auc {auc} lr {:.3e}",
            row.epoch, row.train_loss, row.val_loss, row.lr
        );
        true
    }
}

pub fn train(args: &TrainArgs) -> anyhow::Result<()> {
    let model_config = Vit3dConfig {
        image_size: Dims::new(args.image_size, args.image_size, args.depth),
        patch_size: args.patch,
        embed_dim: args.embed_dim,
        num_blocks: args.blocks,
        num_heads: args.heads,
        dropout_rate: args.dropout,
        mlp_hidden_dim: args.mlp_dim.unwrap_or(4 * args.embed_dim),
    };
    match model_config.validate() {
        Err(e @ (VitError::IndivisibleDims { .. } | VitError::InvalidConfig(_))) => return Err(usage(e.to_string())),
        other => other.or_fail()?,
    }
    let config = TrainConfig {
        epochs: args.epochs,
        val_split: args.val_split,
        batch_size: args.batch_size,
        lr: args.lr,
        lr_decay: args.lr_decay,
        early_stop_patience: args.patience,
        augment: !args.no_augment,
        ..TrainConfig::new(args.modality, args.seed)
    };
    config.validate().map_err(|e| usage(e.to_string()))?;

    let labels = read_labels_csv(&args.labels).or_fail()?;
    let mut volumes = load_prepared(&args.data, args.modality)?;
    let before = volumes.len();
    volumes.retain(|v| labels.contains_key(&v.subject_id));
    if volumes.len() < before {
        warn!("{} {} volumes have no label and are skipped", before - volumes.len(), args.modality);
    }
    let ys: Vec<u8> = volumes.iter().map(|v| labels[&v.subject_id]).collect();
    info!("training {} on {} subjects", args.modality, volumes.len());

    create_parent(&args.out)?;
    let effective = serde_json::json!({ "model": model_config, "train": config });
    record("train", args, effective, &with_suffix(&args.out, SIDECAR_SUFFIX))?;
    let outcome = train_with(&volumes, &ys, &model_config, &config, Some(&args.out), &mut Progress).or_fail()?;
    let log_path = with_suffix(&args.out, ".log.csv");
    fs::write(&log_path, log_csv(&outcome.log)).map_err(|e| io_failure(&log_path, e))?;
    match &outcome.best {
        Some(best) => info!("best epoch {} val_loss {:?}; checkpoint at {}", best.epoch, best.best_val_loss, args.out.display()),
        None => anyhow::bail!("no epoch produced a finite validation loss"),
    }
    Ok(())
}

fn checkpoint_modality(ckpt: &Checkpoint) -> Option<Modality> {
    serde_json::from_value(ckpt.run.get("train")?.get("modality")?.clone()).ok()
}

pub fn predict(args: &PredictArgs) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(&args.model).or_fail()?;
    let modality = match (args.modality, checkpoint_modality(&ckpt)) {
        (Some(m), _) | (None, Some(m)) => m,
        (None, None) => return Err(usage("the checkpoint does not record its modality; pass --modality")),
    };
    let volumes = load_prepared(&args.data, modality)?;
    let preds = evaluate(&ckpt, &volumes).or_fail()?;
    let rows: Vec<(String, f64)> = preds.iter().map(|p| (p.subject_id.clone(), p.per_modality[&modality])).collect();
    create_parent(&args.out)?;
    write_predictions_csv(&args.out, &rows).or_fail()?;
    info!("scored {} {modality} volumes", rows.len());
    let effective = serde_json::json!({ "modality": modality, "checkpoint_epoch": ckpt.epoch });
    record("predict", args, effective, &with_suffix(&args.out, SIDECAR_SUFFIX))
}

fn read_label_map(path: &Path) -> anyhow::Result<BTreeMap<String, u8>> {
    read_labels_csv(path).or_fail()
}

pub fn ensemble(args: &EnsembleArgs) -> anyhow::Result<()> {
    if args.preds.len() != args.modalities.len() {
        return Err(usage(format!("{} prediction files for {} modalities", args.preds.len(), args.modalities.len())));
    }
    let mut seen = Vec::new();
    for m in &args.modalities {
        if seen.contains(m) {
            return Err(usage(format!("modality {m} listed twice")));
        }
        seen.push(*m);
    }
    let per_modality = args
        .modalities
        .iter()
        .zip(&args.preds)
        .map(|(&m, path)| Ok((m, read_predictions_csv(path).or_fail()?)))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let merged = merge_modalities(&per_modality);

    let (combined, effective): (Vec<Prediction>, serde_json::Value) = match args.mode {
        EnsembleMode::Average => (average_ensemble(&merged).or_fail()?, serde_json::Value::Null),
        EnsembleMode::Stack => {
            let model = match (&args.labels, &args.stacker) {
                (Some(labels), stacker) => {
                    let ys = aligned_labels(&merged, &read_label_map(labels)?).or_fail()?;
                    let options = StackingOptions { l2_lambda: args.l2_lambda, ..StackingOptions::default() };
                    let fit = fit_stacking(&merged, &ys, &options).or_fail()?;
                    info!("stacker converged in {} iterations (gradient {:.3e})", fit.iterations, fit.gradient_norm);
                    if let Some(path) = stacker {
                        create_parent(path)?;
                        fit.model.save(path).or_fail()?;
                    }
                    fit.model
                }
                (None, Some(path)) => StackingModel::load(path).or_fail()?,
                (None, None) => return Err(usage("stack mode needs --labels to fit or --stacker to load")),
            };
            (predict_stacking(&model, &merged).or_fail()?, serde_json::to_value(model)?)
        }
    };
    let rows: Vec<(String, f64)> = combined
        .iter()
        .map(|p| (p.subject_id.clone(), p.final_probability.expect("ensemble sets the final probability")))
        .collect();
    create_parent(&args.out)?;
    write_predictions_csv(&args.out, &rows).or_fail()?;
    info!("combined {} subjects", rows.len());
    record("ensemble", args, effective, &with_suffix(&args.out, SIDECAR_SUFFIX))
}

pub fn eval(args: &EvalArgs) -> anyhow::Result<()> {
    let preds = read_predictions_csv(&args.preds).or_fail()?;
    let labels = read_label_map(&args.labels)?;
    let subjects: Vec<Prediction> = preds.iter().map(|(id, _)| Prediction::new(id.clone())).collect();
    let ys = aligned_labels(&subjects, &labels).or_fail()?;
    let scores: Vec<f64> = preds.iter().map(|(_, p)| *p).collect();
    let report = MetricsReport::compute(&scores, &ys, &args.split).or_fail()?;
    create_dir(&args.out_dir)?;
    emit_report(&report, &ReportPaths::in_dir(&args.out_dir)).or_fail()?;
    print!("{}", report_text(&report));
    record("eval", args, serde_json::Value::Null, &args.out_dir.join("run.json"))
}
