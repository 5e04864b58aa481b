//! Flat `key = value` text configuration.

use crate::error::{Error, Result};
use crate::pipeline::TrainConfig;
use crate::svdd::Kernel;

/// Parses `key = value` lines. `#` starts a comment; blank lines are skipped;
/// a repeated key is an error.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "line {}: expected `key = value`, got `{line}`",
                no + 1
            ))
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", no + 1)));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(Error::Config(format!(
                "line {}: duplicate key `{k}`",
                no + 1
            )));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

pub(crate) fn parse_value<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for key `{key}`")))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 11] = [
        "lambda",
        "lr_generator",
        "lr_discriminator_ratio",
        "batch_size",
        "epochs",
        "k",
        "seed",
        "arm",
        "c",
        "kernel",
        "gamma",
    ];

    /// Applies one key. Returns `Ok(false)` for keys this config does not own.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "lambda" => self.lambda = parse_value(key, value)?,
            "lr_generator" => self.lr_generator = parse_value(key, value)?,
            "lr_discriminator_ratio" => self.lr_discriminator_ratio = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "k" => self.k = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "arm" => self.arm = value.parse()?,
            "c" => {
                self.c = match value {
                    "auto" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "kernel" => {
                self.kernel = match value {
                    "linear" => Kernel::Linear,
                    "rbf" => Kernel::Rbf {
                        gamma: match self.kernel {
                            Kernel::Rbf { gamma } => gamma,
                            Kernel::Linear => 1.0,
                        },
                    },
                    _ => return Err(Error::Config(format!("unknown kernel `{value}`"))),
                }
            }
            "gamma" => {
                let gamma = parse_value(key, value)?;
                if let Kernel::Rbf { gamma: g } = &mut self.kernel {
                    *g = gamma;
                } else {
                    self.kernel = Kernel::Rbf { gamma };
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_kv(&self) -> String {
        let (kernel, gamma) = match self.kernel {
            Kernel::Linear => ("linear", None),
            Kernel::Rbf { gamma } => ("rbf", Some(gamma)),
        };
        let mut s = format!(
            "lambda = {}\nlr_generator = {}\nlr_discriminator_ratio = {}\nbatch_size = {}\nepochs = {}\nk = {}\nseed = {}\narm = {}\nc = {}\nkernel = {kernel}\n",
            self.lambda,
            self.lr_generator,
            self.lr_discriminator_ratio,
            self.batch_size,
            self.epochs,
            self.k,
            self.seed,
            self.arm,
            self.c.map_or_else(|| "auto".to_string(), |c| c.to_string()),
        );
        if let Some(g) = gamma {
            s.push_str(&format!("gamma = {g}\n"));
        }
        s
    }

    /// Strict parse: every key must belong to [`TrainConfig`].
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (k, v) in parse_kv(text)? {
            if !cfg.apply(&k, &v)? {
                return Err(Error::Config(format!("unknown config key `{k}`")));
            }
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::Arm;

    #[test]
    fn round_trip() {
        let cfg = TrainConfig {
            lambda: 0.3,
            seed: 17,
            c: Some(0.25),
            arm: Arm::AeDiscMse,
            kernel: Kernel::Rbf { gamma: 0.125 },
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_and_duplicate_keys() {
        assert!(
            matches!(TrainConfig::from_kv("epochz = 3"), Err(Error::Config(m)) if m.contains("epochz"))
        );
        assert!(parse_kv("k = 1\nk = 2").is_err());
        assert!(parse_kv("no equals sign").is_err());
        assert_eq!(
            parse_kv("# c\n\n a = b # tail\n").unwrap(),
            vec![("a".into(), "b".into())]
        );
    }
}
