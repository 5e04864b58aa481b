//! Two-stage training and inference.
//!
//! Stage one trains encoder, decoder and (for adversarial arms) a
//! discriminator that pushes the feature distribution toward `N(0, I)`.
//! Stage two fits an SVDD sphere on the frozen model's training features.

mod infer;
mod optim;
mod train;

pub use infer::{
    extract_features, fit_svdd_stage, fit_svdd_stage_for, infer_score, score_images,
    score_images_for, Detector, Features,
};
pub use optim::Adam;
pub use train::{
    generator_gradients, train, train_step, train_with, write_loss_csv, EpochLosses, LossTerms,
    Networks, Optimizers, StepLosses, TrainedModel,
};

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Element, Tensor};
use crate::error::{Error, Result};
use crate::networks::{discriminate, Discriminator};
use crate::svdd::{default_c, Kernel};

/// Probability clamp inside every logarithm.
pub const PROB_EPS: f64 = 1e-7;

/// The five train/score configurations of the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arm {
    AeSvdd,
    AeMse,
    AeDiscSvdd,
    AeDiscMse,
    Full,
}

impl Arm {
    pub const ALL: [Arm; 5] = [
        Arm::AeSvdd,
        Arm::AeMse,
        Arm::AeDiscSvdd,
        Arm::AeDiscMse,
        Arm::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arm::AeSvdd => "ae_svdd",
            Arm::AeMse => "ae_mse",
            Arm::AeDiscSvdd => "ae_disc_svdd",
            Arm::AeDiscMse => "ae_disc_mse",
            Arm::Full => "full",
        }
    }

    /// Human-readable description used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            Arm::AeSvdd => "SVDD on autoencoder features",
            Arm::AeMse => "MSE on autoencoder features",
            Arm::AeDiscSvdd => "SVDD on autoencoder features + discriminator",
            Arm::AeDiscMse => "MSE on autoencoder features + discriminator",
            Arm::Full => "SVDD on augmented features + discriminator",
        }
    }

    pub fn has_discriminator(self) -> bool {
        matches!(self, Arm::AeDiscSvdd | Arm::AeDiscMse | Arm::Full)
    }

    pub fn augmented(self) -> bool {
        self == Arm::Full
    }

    pub fn uses_svdd(self) -> bool {
        matches!(self, Arm::AeSvdd | Arm::AeDiscSvdd | Arm::Full)
    }

    /// Arms with the same key share an identical training run.
    pub fn training_key(self) -> Arm {
        match self {
            Arm::AeMse => Arm::AeSvdd,
            Arm::AeDiscMse => Arm::AeDiscSvdd,
            a => a,
        }
    }

    /// Width of the feature the discriminator and SVDD see.
    pub fn feature_dim(self, k: usize) -> usize {
        if self.augmented() {
            2 * k
        } else {
            k
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown arm `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Weight of the reconstruction term in the generator loss.
    pub lambda: f64,
    pub lr_generator: f64,
    /// Discriminator learning rate as a fraction of `lr_generator`.
    pub lr_discriminator_ratio: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Latent dimension.
    pub k: usize,
    pub seed: u64,
    pub arm: Arm,
    /// SVDD trade-off; `None` picks [`default_c`] for the training-set size.
    pub c: Option<f64>,
    pub kernel: Kernel,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1.0,
            lr_generator: 2e-4,
            lr_discriminator_ratio: 0.01,
            batch_size: 64,
            epochs: 50,
            k: 256,
            seed: 0,
            arm: Arm::Full,
            c: None,
            kernel: Kernel::Linear,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.lambda) {
            return Err(Error::Config(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        if !positive(self.lr_generator) || !positive(self.lr_discriminator_ratio) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be at least 2 for batch norm, got {}",
                self.batch_size
            )));
        }
        if self.epochs == 0 || self.k == 0 {
            return Err(Error::Config("epochs and k must be positive".into()));
        }
        if let Some(c) = self.c {
            if !(c > 0.0 && c <= 1.0) {
                return Err(Error::Config(format!("c must lie in (0, 1], got {c}")));
            }
        }
        self.kernel
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }

    /// Trade-off for `n` training features, raised to `1/n` if infeasible.
    pub fn resolved_c(&self, n: usize) -> f64 {
        self.c
            .unwrap_or_else(|| default_c(n))
            .max(1.0 / n.max(1) as f64)
    }

    pub fn lr_discriminator(&self) -> f64 {
        self.lr_generator * self.lr_discriminator_ratio
    }
}

/// Latent code with the reconstruction error appended `k` times.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedFeature {
    values: Vec<f64>,
    k: usize,
}

impl AugmentedFeature {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn latent(&self) -> &[f64] {
        &self.values[..self.k]
    }

    pub fn error(&self) -> f64 {
        self.values[self.k]
    }

    pub fn split(&self) -> (&[f64], f64) {
        (self.latent(), self.error())
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

pub fn augment(z: &[f64], e: f64) -> Result<AugmentedFeature> {
    if !(e >= 0.0) {
        return Err(Error::Contract(format!(
            "reconstruction error must be non-negative, got {e}"
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("latent code must be finite".into()));
    }
    let k = z.len();
    let mut values = Vec::with_capacity(2 * k);
    values.extend_from_slice(z);
    values.extend(std::iter::repeat_n(e, k));
    Ok(AugmentedFeature { values, k })
}

/// Mean squared per-pixel difference of two equally shaped images.
pub fn recon_error<T: Element>(x: &Tensor<T>, x_hat: &Tensor<T>) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(Error::dim(format!(
            "reconstruction shape {:?} vs input {:?}",
            x_hat.shape(),
            x.shape()
        )));
    }
    let s: f64 = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(a, b)| {
            let d = a.to_f64_lossy() - b.to_f64_lossy();
            d * d
        })
        .sum();
    Ok(s / x.numel() as f64)
}

/// `n` i.i.d. standard normal rows of width `dim`.
pub fn sample_prior<T: Element, R: Rng + ?Sized>(
    n: usize,
    dim: usize,
    rng: &mut R,
) -> Result<Tensor<T>> {
    if n == 0 || dim == 0 {
        return Err(Error::Contract(format!(
            "prior sample needs n, dim >= 1, got {n}x{dim}"
        )));
    }
    let data = (0..n * dim)
        .map(|_| T::from_f64_lossy(rng.sample::<f64, _>(StandardNormal)))
        .collect();
    Tensor::new(vec![n, dim], data)
}

fn clamped_log(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS).ln()
}

/// Discriminator loss on prior vs feature batches and the non-saturating
/// generator loss on the feature batch.
pub fn gan_losses<T: Element>(
    disc: &Discriminator<T>,
    real: &Tensor<T>,
    fake: &Tensor<T>,
) -> Result<(f64, f64)> {
    let pr = discriminate(disc, real)?;
    let pf = discriminate(disc, fake)?;
    let mean = |t: &Tensor<T>, f: &dyn Fn(f64) -> f64| {
        t.data().iter().map(|v| f(v.to_f64_lossy())).sum::<f64>() / t.numel() as f64
    };
    let log_real = mean(&pr, &clamped_log);
    let log_fake_rejected = mean(&pf, &|p| clamped_log(1.0 - p));
    let log_fake_accepted = mean(&pf, &clamped_log);
    Ok((-(log_real + log_fake_rejected), -log_fake_accepted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn augment_layout() {
        let f = augment(&[0.3, -0.4], 0.05).unwrap();
        assert_eq!(f.values(), &[0.3, -0.4, 0.05, 0.05]);
        assert_eq!(f.split(), (&[0.3, -0.4][..], 0.05));
        assert_eq!(augment(&[1.0; 256], 0.0).unwrap().values().len(), 512);
        assert!(augment(&[1.0], -0.1).is_err());
    }

    #[test]
    fn recon_error_basics() {
        let ones = Tensor::<f64>::ones(vec![1, 32, 32]);
        let zeros = Tensor::<f64>::zeros(vec![1, 32, 32]);
        assert_eq!(recon_error(&ones, &ones).unwrap(), 0.0);
        assert_eq!(recon_error(&ones, &zeros).unwrap(), 1.0);
        assert!(recon_error(&ones, &Tensor::zeros(vec![3, 32, 32])).is_err());
    }

    #[test]
    fn gan_losses_at_half() {
        let d = Discriminator::<f64>::zeroed(4);
        let real = Tensor::full(vec![3, 4], 0.7);
        let fake = Tensor::full(vec![3, 4], -0.2);
        let (ld, lg) = gan_losses(&d, &real, &fake).unwrap();
        assert!((ld - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((lg - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn prior_is_seeded() {
        let a: Tensor<f64> = sample_prior(5, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b: Tensor<f64> = sample_prior(5, 3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn arm_names_round_trip() {
        for a in Arm::ALL {
            assert_eq!(a.name().parse::<Arm>().unwrap(), a);
        }
        assert!("bogus".parse::<Arm>().is_err());
        assert_eq!(Arm::AeMse.training_key(), Arm::AeSvdd);
        assert_eq!(Arm::Full.feature_dim(256), 512);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            batch_size: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}
