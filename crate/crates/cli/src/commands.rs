use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ocrm_core::container;
use ocrm_core::data::{
    load_cifar_batch, load_image_dir, load_image_file, load_mnist, one_class_split, LabelMap,
};
use ocrm_core::eval::{
    emit_report, run_ablation, run_trials_with, write_score_dump, EvalReport, PreparedSplit,
    ReportFormat,
};
use ocrm_core::pipeline::{fit_svdd_stage, train_with, write_loss_csv, Detector, EpochLosses};
use ocrm_core::{Dataset, Error, Result};

use crate::run_config::{DatasetKind, RunConfig};

pub const MODEL_NAME: &str = "model.ocrm";
pub const LOSS_NAME: &str = "loss.csv";
pub const SCORES_NAME: &str = "scores.csv";

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

/// Creates the output directory and records the resolved config in it as
/// `<command>.config.txt`.
fn prepare_out(cfg: &RunConfig, command: &str) -> Result<()> {
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    let path = cfg.out.join(format!("{command}.config.txt"));
    fs::write(&path, cfg.to_kv()).map_err(|e| Error::io(&path, e))
}

fn load_dataset(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let dir = cfg.resolved_data_dir();
    match cfg.dataset {
        DatasetKind::Mnist => load_mnist(&dir),
        DatasetKind::Cifar10 => {
            let mut train: Option<Dataset> = None;
            for i in 1..=5 {
                let part = load_cifar_batch(&dir.join(format!("data_batch_{i}.bin")))?;
                train = Some(match train {
                    None => part,
                    Some(mut t) => {
                        t.images.extend(part.images);
                        t.labels.extend(part.labels);
                        t
                    }
                });
            }
            let test = load_cifar_batch(&dir.join("test_batch.bin"))?;
            Ok((train.expect("five batches"), test))
        }
        DatasetKind::Images => {
            let train = load_image_dir(&dir.join("train"), &LabelMap::Constant(cfg.class))?;
            let rules = (0..=u8::MAX).map(|l| (format!("{l}_"), l)).collect();
            let test = load_image_dir(&dir.join("test"), &LabelMap::Prefix(rules))?;
            Ok((train, test))
        }
    }
}

fn prepared(cfg: &RunConfig) -> Result<PreparedSplit> {
    let (train, test) = load_dataset(cfg)?;
    let split = one_class_split(&train, &test, cfg.class)?;
    PreparedSplit::new(&split, cfg.train_limit)
}

fn progress(e: &EpochLosses) {
    eprintln!(
        "epoch {:>3}  l_mse {:.6}  loss_G {:.4}  loss_D {:.4}",
        e.epoch, e.l_mse, e.loss_g, e.loss_d
    );
}

pub fn train(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let data = prepared(cfg)?;
    prepare_out(cfg, "train")?;
    let model = train_with(&data.train, &cfg.train, progress)?;
    let loss_path = cfg.out.join(LOSS_NAME);
    let mut w = create(&loss_path)?;
    write_loss_csv(&model.history, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(&loss_path, e))?;
    let model_path = cfg.out.join(MODEL_NAME);
    container::save(&Detector { model, svdd: None }, &model_path)?;
    Ok(model_path)
}

/// Fits the sphere on the training split and rewrites the model file.
pub fn fit_svdd(cfg: &RunConfig, model_path: &Path) -> Result<()> {
    let mut detector: Detector = container::load(model_path)?;
    if !detector.model.arm().uses_svdd() {
        return Err(Error::Config(format!(
            "arm `{}` scores by reconstruction error and has no svdd stage",
            detector.model.arm()
        )));
    }
    cfg.validate()?;
    let data = prepared(cfg)?;
    prepare_out(cfg, "fit-svdd")?;
    detector.svdd = Some(fit_svdd_stage(&detector.model, &data.train)?);
    container::save(&detector, model_path)
}

/// Scores an image file or every file of a directory; returns the CSV path.
pub fn score(cfg: &RunConfig, model_path: &Path, input: &Path) -> Result<PathBuf> {
    let detector: Detector = container::load(model_path)?;
    let images = if input.is_dir() {
        load_image_dir(input, &LabelMap::Constant(0))?
    } else {
        let img = load_image_file(input)?;
        Dataset::new("input", vec![img], vec![0])?
    };
    let scores = detector.score_images(&images.to_tensor()?)?;
    prepare_out(cfg, "score")?;
    let path = cfg.out.join(SCORES_NAME);
    let mut w = create(&path)?;
    let written: std::io::Result<()> = (|| {
        writeln!(w, "sample_index,score")?;
        for (i, s) in scores.iter().enumerate() {
            writeln!(w, "{i},{s}")?;
        }
        w.flush()
    })();
    written.map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn report_path(cfg: &RunConfig) -> PathBuf {
    cfg.out.join(match cfg.format {
        ReportFormat::Csv => "report.csv",
        ReportFormat::Markdown => "report.md",
    })
}

/// Runs the trials, writes the report plus one score dump per trial.
pub fn eval(cfg: &RunConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let data = prepared(cfg)?;
    prepare_out(cfg, "eval")?;
    let mut dump_err = None;
    let report = run_trials_with(&data, &cfg.train, cfg.trials, |i, run| {
        let path = cfg.out.join(format!("scores_trial{i}.csv"));
        let res = create(&path).and_then(|mut w| {
            write_score_dump(&data.test_labels, &data.is_positive, &run.scores, &mut w)
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(&path, e))
        });
        if let Err(e) = res {
            dump_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = dump_err {
        return Err(e);
    }
    emit_report(std::slice::from_ref(&report), &report_path(cfg), cfg.format)?;
    Ok(report)
}

pub fn ablate(cfg: &RunConfig) -> Result<Vec<EvalReport>> {
    cfg.validate()?;
    let data = prepared(cfg)?;
    prepare_out(cfg, "ablate")?;
    let reports = run_ablation(&data, &cfg.train, cfg.trials)?;
    emit_report(&reports, &report_path(cfg), cfg.format)?;
    Ok(reports)
}
