//! Flat `key = value` run configuration: every training key plus data and
//! output settings.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ocrm_core::config::parse_kv;
use ocrm_core::eval::ReportFormat;
use ocrm_core::{Error, Result, TrainConfig};

pub const DATA_DIR_ENV: &str = "OCRM_DATA_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    /// IDX files with the standard MNIST names.
    Mnist,
    /// CIFAR-10 binary batches `data_batch_{1..5}.bin` and `test_batch.bin`.
    Cifar10,
    /// `train/` and `test/` image directories; test files are labelled by a
    /// `<label>_` name prefix, all training files belong to `class`.
    Images,
}

impl DatasetKind {
    fn name(self) -> &'static str {
        match self {
            DatasetKind::Mnist => "mnist",
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Images => "images",
        }
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetKind::Mnist),
            "cifar10" => Ok(DatasetKind::Cifar10),
            "images" => Ok(DatasetKind::Images),
            _ => Err(Error::Config(format!("unknown dataset `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub dataset: DatasetKind,
    /// `None` resolves to `$OCRM_DATA_DIR/<dataset>`, else `data/<dataset>`.
    pub data_dir: Option<PathBuf>,
    pub class: u8,
    /// Keep only the first `train_limit` in-class training images.
    pub train_limit: Option<usize>,
    pub trials: usize,
    pub out: PathBuf,
    pub format: ReportFormat,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            dataset: DatasetKind::Mnist,
            data_dir: None,
            class: 0,
            train_limit: None,
            trials: 1,
            out: PathBuf::from("out"),
            format: ReportFormat::Csv,
        }
    }
}

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for key `{key}`")))
}

impl RunConfig {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset" => self.dataset = value.parse()?,
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "class" => self.class = parse(key, value)?,
            "train_limit" => {
                self.train_limit = match value {
                    "all" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "trials" => self.trials = parse(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "format" => self.format = value.parse()?,
            _ => {
                if !self.train.apply(key, value)? {
                    return Err(Error::Config(format!("unknown config key `{key}`")));
                }
            }
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in parse_kv(text)? {
            cfg.apply(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if self.train_limit == Some(0) {
            return Err(Error::Config("train_limit must be positive".into()));
        }
        Ok(())
    }

    pub fn resolved_data_dir(&self) -> PathBuf {
        match &self.data_dir {
            Some(d) => d.clone(),
            None => std::env::var_os(DATA_DIR_ENV)
                .map_or_else(|| PathBuf::from("data"), PathBuf::from)
                .join(self.dataset.name()),
        }
    }

    /// Text that reproduces this run when fed back through `--config`.
    pub fn to_kv(&self) -> String {
        let mut s = self.train.to_kv();
        let _ = writeln!(s, "dataset = {}", self.dataset.name());
        let _ = writeln!(s, "data_dir = {}", self.resolved_data_dir().display());
        let _ = writeln!(s, "class = {}", self.class);
        let _ = writeln!(
            s,
            "train_limit = {}",
            self.train_limit
                .map_or_else(|| "all".to_string(), |n| n.to_string())
        );
        let _ = writeln!(s, "trials = {}", self.trials);
        let _ = writeln!(s, "out = {}", self.out.display());
        let format = match self.format {
            ReportFormat::Csv => "csv",
            ReportFormat::Markdown => "markdown",
        };
        let _ = writeln!(s, "format = {format}");
        s
    }
}
