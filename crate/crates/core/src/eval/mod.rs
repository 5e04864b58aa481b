//! AUC, the multi-trial one-class protocol and the ablation runner.

mod auc;
mod report;

pub use auc::{roc_auc, ScoredSet};
pub use report::{
    emit_report, parse_report_csv, render_csv, render_markdown, report_rows, write_score_dump,
    ReportFormat, ReportRow, CSV_HEADER,
};

use crate::autodiff::Tensor;
use crate::data::OneClassSplit;
use crate::error::{Error, Result};
use crate::pipeline::{
    fit_svdd_stage_for, score_images_for, train_with, Arm, EpochLosses, TrainConfig, TrainedModel,
};
use crate::svdd::SvddModel;

/// Preprocessed tensors for one class.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSplit {
    pub positive_class: u8,
    pub train: Tensor<f32>,
    pub test: Tensor<f32>,
    pub test_labels: Vec<u8>,
    pub is_positive: Vec<bool>,
}

impl PreparedSplit {
    /// Keeps the first `train_limit` in-class training images when given.
    pub fn new(split: &OneClassSplit, train_limit: Option<usize>) -> Result<Self> {
        let train = match train_limit {
            Some(n) => split.train.take(n),
            None => split.train.clone(),
        };
        Ok(PreparedSplit {
            positive_class: split.positive_class,
            train: train.to_tensor()?,
            test: split.test.to_tensor()?,
            test_labels: split.test.labels.clone(),
            is_positive: split.is_positive(),
        })
    }

    pub fn train_len(&self) -> usize {
        self.train.shape()[0]
    }
}

/// Everything produced by one train, fit and score run of one arm.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialRun {
    pub arm: Arm,
    pub model: TrainedModel,
    pub svdd: Option<SvddModel>,
    pub scores: Vec<f64>,
    pub auc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrialOutcome {
    pub trial: usize,
    pub seed: u64,
    /// `None` when the trial failed.
    pub auc: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub class: u8,
    pub arm: Arm,
    pub trials: Vec<TrialOutcome>,
    /// Mean over successful trials (NaN when none succeeded).
    pub mean: f64,
    /// Sample standard deviation over successful trials; 0 for a single one.
    pub std: f64,
    pub config: String,
}

impl EvalReport {
    pub fn new(class: u8, arm: Arm, trials: Vec<TrialOutcome>, config: String) -> Self {
        let aucs: Vec<f64> = trials.iter().filter_map(|t| t.auc).collect();
        let (mean, std) = mean_std(&aucs);
        EvalReport {
            class,
            arm,
            trials,
            mean,
            std,
            config,
        }
    }

    pub fn failed(&self) -> usize {
        self.trials.iter().filter(|t| t.auc.is_none()).count()
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

fn score_and_auc(
    data: &PreparedSplit,
    model: &TrainedModel,
    arm: Arm,
    svdd: Option<SvddModel>,
) -> Result<(Option<SvddModel>, Vec<f64>, f64)> {
    let svdd = match (arm.uses_svdd(), svdd) {
        (true, Some(s)) => Some(s),
        (true, None) => Some(fit_svdd_stage_for(model, arm, &data.train)?),
        (false, _) => None,
    };
    let scores = score_images_for(model, arm, svdd.as_ref(), &data.test)?;
    let auc = roc_auc(&ScoredSet::new(scores.clone(), data.is_positive.clone())?)?;
    Ok((svdd, scores, auc))
}

/// Trains `config.arm`, fits the sphere where needed and scores the test set.
pub fn run_trial(data: &PreparedSplit, config: &TrainConfig) -> Result<TrialRun> {
    run_trial_with(data, config, |_| {})
}

pub fn run_trial_with(
    data: &PreparedSplit,
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochLosses),
) -> Result<TrialRun> {
    let model = train_with(&data.train, config, on_epoch)?;
    let (svdd, scores, auc) = score_and_auc(data, &model, config.arm, None)?;
    Ok(TrialRun {
        arm: config.arm,
        model,
        svdd,
        scores,
        auc,
    })
}

fn outcome(trial: usize, seed: u64, r: Result<f64>) -> TrialOutcome {
    match r {
        Ok(auc) => TrialOutcome {
            trial,
            seed,
            auc: Some(auc),
            error: None,
        },
        Err(e) => TrialOutcome {
            trial,
            seed,
            auc: None,
            error: Some(e.to_string()),
        },
    }
}

/// `n_trials` independent runs with seeds `config.seed + i`. A failing trial
/// is recorded in the report instead of aborting the rest.
pub fn run_trials(
    data: &PreparedSplit,
    config: &TrainConfig,
    n_trials: usize,
) -> Result<EvalReport> {
    run_trials_with(data, config, n_trials, |_, _| {})
}

/// [`run_trials`] with a callback receiving each successful trial.
pub fn run_trials_with(
    data: &PreparedSplit,
    config: &TrainConfig,
    n_trials: usize,
    mut on_trial: impl FnMut(usize, &TrialRun),
) -> Result<EvalReport> {
    config.validate()?;
    if n_trials == 0 {
        return Err(Error::Config("trials must be at least 1".into()));
    }
    let trials = (0..n_trials)
        .map(|i| {
            let seed = config.seed.wrapping_add(i as u64);
            let cfg = TrainConfig {
                seed,
                ..config.clone()
            };
            let run = run_trial(data, &cfg);
            if let Ok(r) = &run {
                on_trial(i, r);
            }
            outcome(i, seed, run.map(|r| r.auc))
        })
        .collect();
    Ok(EvalReport::new(
        data.positive_class,
        config.arm,
        trials,
        config_summary(config),
    ))
}

/// All five arms with shared seeds. Arms that differ only in scoring reuse
/// one training run.
pub fn run_ablation(
    data: &PreparedSplit,
    config: &TrainConfig,
    n_trials: usize,
) -> Result<Vec<EvalReport>> {
    config.validate()?;
    if n_trials == 0 {
        return Err(Error::Config("trials must be at least 1".into()));
    }
    let mut per_arm: Vec<Vec<TrialOutcome>> = vec![Vec::new(); Arm::ALL.len()];
    for i in 0..n_trials {
        let seed = config.seed.wrapping_add(i as u64);
        for key in [Arm::AeSvdd, Arm::AeDiscSvdd, Arm::Full] {
            let cfg = TrainConfig {
                seed,
                arm: key,
                ..config.clone()
            };
            let trained = train_with(&data.train, &cfg, |_| {});
            for (slot, arm) in Arm::ALL.into_iter().enumerate() {
                if arm.training_key() != key {
                    continue;
                }
                let r = match &trained {
                    Ok(model) => score_and_auc(data, model, arm, None).map(|(_, _, auc)| auc),
                    Err(e) => Err(Error::Contract(e.to_string())),
                };
                per_arm[slot].push(outcome(i, seed, r));
            }
        }
    }
    Ok(Arm::ALL
        .into_iter()
        .zip(per_arm)
        .map(|(arm, trials)| {
            let cfg = TrainConfig {
                arm,
                ..config.clone()
            };
            EvalReport::new(data.positive_class, arm, trials, config_summary(&cfg))
        })
        .collect())
}

/// One-line description of a config for report headers.
pub fn config_summary(c: &TrainConfig) -> String {
    format!(
        "arm={} lambda={} lr_generator={} lr_discriminator_ratio={} batch_size={} epochs={} k={} seed={} c={}",
        c.arm,
        c.lambda,
        c.lr_generator,
        c.lr_discriminator_ratio,
        c.batch_size,
        c.epochs,
        c.k,
        c.seed,
        c.c.map_or_else(|| "auto".to_string(), |c| c.to_string())
    )
}
