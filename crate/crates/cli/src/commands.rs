//! Subcommand implementations.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

use advseg::checkpoint::{checkpoint_dtype, load_disc, load_seg};
use advseg::data::argmax_labels;
use advseg::dataset::{generate_shapes_dataset, load_image, save_folder_dataset, split_labeled, Dataset};
use advseg::eval::{
    confusion, export_confidence_png, export_prediction_png, mean_iou, palette, selected_pixel_counts, ConfusionMatrix,
    IouReport, SelectedCounts, SelectedPixelReport,
};
use advseg::fsio::write_atomic;
use advseg::networks::{DiscNet, SegNet};
use advseg::real::{DType, Real};
use advseg::trainer::{latest_checkpoint, TrainConfig, Trainer};

use crate::run::{
    load_config, load_dataset, prepare_out, resolve_checkpoint, usage, DatasetInfo, Flags, RunManifest, CHECKPOINTS,
    CONFIG_SNAPSHOT, EXPORTS, LAYOUT, MANIFEST, METRICS, SELECTED, SUMMARY, TRAIN_LOG,
};
use crate::{ConfidenceArgs, EvalArgs, GenDataArgs, SweepArgs, SweepParam, TrainArgs};

const RUN_ENTRIES: &[&str] = &[CONFIG_SNAPSHOT, TRAIN_LOG, CHECKPOINTS, METRICS, SUMMARY, SELECTED, EXPORTS, MANIFEST];

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let ds = generate_shapes_dataset(a.n, a.size, a.size, a.classes, a.seed)?;
    prepare_out(&a.out, a.force, &["images", "labels", "dataset.toml"])?;
    save_folder_dataset(&ds, &a.out, Some(a.seed))?;
    println!("wrote {} samples to {}", ds.len(), a.out.display());
    Ok(())
}

/// Applies the ablation flags and dataset facts to a base configuration.
fn effective_config(mut cfg: TrainConfig, a: &TrainArgs, classes: usize) -> Result<TrainConfig> {
    if a.no_adv && !a.no_semi && !a.allow_degenerate {
        return Err(usage(
            "--no-adv without --no-semi trusts an untrained discriminator; pass --allow-degenerate to run it anyway",
        ));
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg = cfg.with_classes(classes);
    if a.no_adv {
        cfg.hp.lambda_adv_labeled = 0.0;
        cfg.hp.lambda_adv_unlabeled = 0.0;
    }
    if a.no_semi {
        cfg.hp.lambda_semi = 0.0;
        cfg.warm_up_iterations = cfg.max_iterations;
    }
    if a.global_disc {
        cfg.disc.fully_convolutional = false;
        cfg.disc.input_size = Some([cfg.augment.crop_h, cfg.augment.crop_w]);
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(a: TrainArgs) -> Result<()> {
    if !(a.fraction > 0.0 && a.fraction <= 1.0) {
        return Err(usage(format!("--fraction {} outside (0, 1]", a.fraction)));
    }
    let ds = load_dataset(&a.data)?;
    let val = a.val.as_deref().map(load_dataset).transpose()?;
    let cfg = effective_config(load_config(a.config.as_deref())?, &a, ds.classes)?;
    if a.resume {
        fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    } else {
        prepare_out(&a.out, a.force, RUN_ENTRIES)?;
    }
    let mean = run_training(&cfg, &a, &ds, val.as_ref())?;
    if let Some(m) = mean {
        println!("mean IU {m}");
    }
    Ok(())
}

/// Trains into `a.out` and returns the validation mean IU when a
/// validation set is given.
fn run_training(cfg: &TrainConfig, a: &TrainArgs, ds: &Dataset, val: Option<&Dataset>) -> Result<Option<f64>> {
    match cfg.precision {
        DType::F32 => run_training_as::<f32>(cfg, a, ds, val),
        DType::F64 => run_training_as::<f64>(cfg, a, ds, val),
    }
}

fn run_training_as<T: Real>(cfg: &TrainConfig, a: &TrainArgs, ds: &Dataset, val: Option<&Dataset>) -> Result<Option<f64>> {
    let out = &a.out;
    let split = split_labeled(ds, a.fraction, cfg.seed)?;
    write_atomic(&out.join(CONFIG_SNAPSHOT), cfg.to_toml_string().as_bytes())?;
    let checkpoints = out.join(CHECKPOINTS);
    let mut trainer = match latest_checkpoint(&checkpoints).filter(|_| a.resume) {
        Some(dir) => Trainer::<T>::resume(&dir, Some(cfg)).with_context(|| format!("resuming from {}", dir.display()))?,
        None => Trainer::<T>::new(cfg.clone())?,
    };
    trainer.run(ds, &split, Some(&checkpoints)).context("training")?;
    write_atomic(&out.join(TRAIN_LOG), trainer.log.to_csv().as_bytes())?;

    let mean = match val {
        Some(v) => {
            let report = mean_iou(&evaluate(&trainer.seg, v, None)?)?;
            write_metrics(out, &report, v.len(), &out.join(CHECKPOINTS))?;
            Some(report.mean)
        }
        None => None,
    };

    let cfg_text = cfg.to_toml_string();
    let fingerprint = ds.fingerprint();
    let mut id = stable_hash(cfg_text.as_bytes());
    id = id.wrapping_mul(31).wrapping_add(fingerprint);
    id = id.wrapping_mul(31).wrapping_add(stable_hash(a.fraction.to_string().as_bytes()));
    let manifest = RunManifest {
        run_id: format!("{id:08x}"),
        config_snapshot: CONFIG_SNAPSHOT,
        dataset: DatasetInfo {
            path: a.data.display().to_string(),
            fingerprint: format!("{fingerprint:08x}"),
            samples: ds.len(),
            classes: ds.classes,
        },
        seeds: vec![cfg.seed],
        fraction: a.fraction,
        labeled_samples: split.labeled.len(),
        flags: Flags {
            no_adv: a.no_adv,
            no_semi: a.no_semi,
            global_disc: a.global_disc,
            allow_degenerate: a.allow_degenerate,
        },
        completed_iterations: trainer.completed(),
        layout: LAYOUT,
    };
    write_json(&out.join(MANIFEST), &manifest)?;
    Ok(mean)
}

/// FNV-1a; only needs to be stable across runs.
fn stable_hash(bytes: &[u8]) -> u32 {
    bytes
        .iter()
        .fold(0x811C_9DC5u32, |h, &b| (h ^ b as u32).wrapping_mul(0x0100_0193))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

#[derive(Serialize)]
struct Summary {
    mean_iu: f64,
    per_class_iu: Vec<Option<f64>>,
    samples: usize,
    checkpoint: String,
}

fn write_metrics(out: &Path, report: &IouReport, samples: usize, checkpoint: &Path) -> Result<()> {
    write_atomic(&out.join(METRICS), report.to_csv().as_bytes())?;
    let summary = Summary {
        mean_iu: report.mean,
        per_class_iu: report.per_class.clone(),
        samples,
        checkpoint: checkpoint.display().to_string(),
    };
    write_json(&out.join(SUMMARY), &summary)
}

/// Confusion over the labeled samples, writing prediction PNGs into
/// `exports` when given.
fn evaluate<T: Real>(seg: &SegNet<T>, ds: &Dataset, exports: Option<&Path>) -> Result<ConfusionMatrix> {
    if ds.classes != seg.config.classes {
        return Err(advseg::Error::ConfigMismatch(format!(
            "dataset has {} classes, checkpoint {}",
            ds.classes, seg.config.classes
        ))
        .into());
    }
    let colors = palette();
    let mut total = ConfusionMatrix::new(ds.classes);
    for s in &ds.samples {
        let pred = argmax_labels(&seg.predict(&s.image)?);
        if let Some(gt) = &s.label {
            total.add(&confusion(&pred, gt, ds.classes)?)?;
        }
        if let Some(dir) = exports {
            export_prediction_png(&pred, &colors, &dir.join(format!("{}.png", s.id)))?;
        }
    }
    Ok(total)
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let files = resolve_checkpoint(&a.checkpoint)?;
    let ds = load_dataset(&a.data)?;
    if let Some(t) = a.thresholds.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(usage(format!("threshold {t} outside [0, 1]")));
    }
    prepare_out(&a.out, a.force, &[METRICS, SUMMARY, SELECTED, EXPORTS])?;
    match checkpoint_dtype(&files.seg)? {
        DType::F32 => eval_as::<f32>(&a, &files, &ds),
        DType::F64 => eval_as::<f64>(&a, &files, &ds),
    }
}

fn eval_as<T: Real>(a: &EvalArgs, files: &crate::run::CheckpointFiles, ds: &Dataset) -> Result<()> {
    let seg: SegNet<T> = load_seg(&files.seg, None)?;
    let exports = a.out.join(EXPORTS);
    if !a.no_export {
        fs::create_dir_all(&exports).with_context(|| format!("creating {}", exports.display()))?;
    }
    let report = mean_iou(&evaluate(&seg, ds, (!a.no_export).then_some(exports.as_path()))?)?;
    write_metrics(&a.out, &report, ds.len(), &files.seg)?;
    println!("mean IU {}", report.mean);

    if let Some(disc_path) = &files.disc {
        let disc: DiscNet<T> = load_disc(disc_path, None)?;
        if disc.config.classes != seg.config.classes {
            return Err(advseg::Error::ConfigMismatch("discriminator and segmentation net disagree on classes".into()).into());
        }
        let mut counts = vec![SelectedCounts::default(); a.thresholds.len()];
        for s in &ds.samples {
            let Some(gt) = &s.label else { continue };
            let prob = seg.predict(&s.image)?;
            let conf = disc.confidence(&prob)?;
            let pred = argmax_labels(&prob);
            for (c, &t) in counts.iter_mut().zip(&a.thresholds) {
                c.add(selected_pixel_counts(&conf, &pred, gt, t)?);
            }
        }
        let report = SelectedPixelReport {
            rows: counts.iter().zip(&a.thresholds).map(|(c, &t)| c.row(t)).collect(),
        };
        write_atomic(&a.out.join(SELECTED), report.to_csv().as_bytes())?;
    }
    Ok(())
}

pub fn sweep(a: SweepArgs) -> Result<()> {
    if a.values.is_empty() {
        return Err(usage("--values needs at least one value"));
    }
    if a.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    let ds = load_dataset(&a.data)?;
    let val = load_dataset(&a.val)?;
    let base = load_config(a.config.as_deref())?;
    let name = match a.param {
        SweepParam::LambdaSemi => "lambda_semi",
        SweepParam::TSemi => "t_semi",
        SweepParam::LambdaAdv => "lambda_adv",
    };
    prepare_out(&a.out, a.force, &["sweep.csv", "sweep.json", "runs"])?;

    #[derive(Serialize)]
    struct Point {
        value: f64,
        seeds: Vec<u64>,
        mean_iu_per_seed: Vec<f64>,
        mean_iu: f64,
    }
    let mut csv = String::from("data_amount,lambda_adv,lambda_semi,t_semi,mean_iu\n");
    let mut points = Vec::new();
    for &v in &a.values {
        let mut cfg = base.clone();
        match a.param {
            SweepParam::LambdaSemi => cfg.hp.lambda_semi = v,
            SweepParam::TSemi => cfg.hp.t_semi = v,
            SweepParam::LambdaAdv => cfg.hp.lambda_adv_labeled = v,
        }
        let seeds: Vec<u64> = (0..a.seeds).map(|i| base.seed + i).collect();
        let mut scores = Vec::new();
        for &seed in &seeds {
            let args = TrainArgs {
                data: a.data.clone(),
                config: None,
                fraction: a.fraction,
                seed: Some(seed),
                out: a.out.join("runs").join(format!("{name}_{v}")).join(format!("seed_{seed}")),
                no_adv: false,
                no_semi: false,
                global_disc: false,
                allow_degenerate: true,
                val: Some(a.val.clone()),
                resume: false,
                force: true,
            };
            let run_cfg = effective_config(cfg.clone(), &args, ds.classes)?;
            prepare_out(&args.out, true, RUN_ENTRIES)?;
            let m = run_training(&run_cfg, &args, &ds, Some(&val))?.expect("validation set given");
            println!("{name}={v} seed={seed} mean IU {m}");
            scores.push(m);
        }
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            a.fraction, cfg.hp.lambda_adv_labeled, cfg.hp.lambda_semi, cfg.hp.t_semi, mean
        ));
        points.push(Point {
            value: v,
            seeds,
            mean_iu_per_seed: scores,
            mean_iu: mean,
        });
    }
    write_atomic(&a.out.join("sweep.csv"), csv.as_bytes())?;
    write_json(&a.out.join("sweep.json"), &points)?;
    if a.seeds == 1 {
        println!("note: one seed per grid point, mean_iu is a single run");
    }
    print!("{csv}");
    Ok(())
}

pub fn confidence(a: ConfidenceArgs) -> Result<()> {
    let files = resolve_checkpoint(&a.checkpoint)?;
    let disc = files
        .disc
        .clone()
        .ok_or_else(|| usage(format!("{} has no discriminator checkpoint", a.checkpoint.display())))?;
    let image = load_image(&a.image)?;
    prepare_out(&a.out, a.force, &["prediction.png", "confidence.png"])?;
    let (seg_path, out) = (&files.seg, &a.out);
    let (pred, conf) = match checkpoint_dtype(seg_path)? {
        DType::F32 => {
            let seg: SegNet<f32> = load_seg(seg_path, None)?;
            let prob = seg.predict(&image)?;
            (argmax_labels(&prob), load_disc::<f32>(&disc, None)?.confidence(&prob)?)
        }
        DType::F64 => {
            let seg: SegNet<f64> = load_seg(seg_path, None)?;
            let prob = seg.predict(&image)?;
            (argmax_labels(&prob), load_disc::<f64>(&disc, None)?.confidence(&prob)?)
        }
    };
    export_prediction_png(&pred, &palette(), &out.join("prediction.png"))?;
    export_confidence_png(&conf, &out.join("confidence.png"))?;
    println!("wrote {} and {}", out.join("prediction.png").display(), out.join("confidence.png").display());
    Ok(())
}
