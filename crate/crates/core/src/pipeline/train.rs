use std::io::{self, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{sample_prior, Adam, Arm, TrainConfig, PROB_EPS};
use crate::autodiff::{Element, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::networks::{Decoder, Discriminator, Encoder, EncoderSpec, Module};

/// RNG streams derived from the run seed.
const STREAM_DISCRIMINATOR: u64 = 1;
const STREAM_DATA: u64 = 2;

pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct Networks<T: Element> {
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
    /// Present only for adversarial arms.
    pub discriminator: Option<Discriminator<T>>,
}

impl<T: Element> Networks<T> {
    /// Seeded initialization. Encoder and decoder draw from the main stream so
    /// arms with and without a discriminator start from identical weights.
    pub fn new(channels: usize, config: &TrainConfig) -> Result<Self> {
        let spec = EncoderSpec::new(channels, config.k);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let encoder = Encoder::new(spec, &mut rng)?;
        let decoder = Decoder::new(spec, &mut rng)?;
        let discriminator = if config.arm.has_discriminator() {
            let mut r = stream(config.seed, STREAM_DISCRIMINATOR);
            Some(Discriminator::new(
                config.arm.feature_dim(config.k),
                &mut r,
            )?)
        } else {
            None
        };
        Ok(Networks {
            encoder,
            decoder,
            discriminator,
        })
    }

    pub fn channels(&self) -> usize {
        self.encoder.spec().channels
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.spec().latent_dim
    }

    fn generator_parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut p = self.encoder.parameters_mut();
        p.extend(self.decoder.parameters_mut());
        p
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizers<T: Element> {
    pub generator: Adam<T>,
    pub discriminator: Option<Adam<T>>,
}

impl<T: Element> Optimizers<T> {
    pub fn new(config: &TrainConfig) -> Self {
        Optimizers {
            generator: Adam::new(config.lr_generator),
            discriminator: config
                .arm
                .has_discriminator()
                .then(|| Adam::new(config.lr_discriminator())),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLosses {
    pub l_mse: f64,
    /// Generator adversarial loss; zero for arms without a discriminator.
    pub loss_g: f64,
    /// Discriminator loss before its update; zero without a discriminator.
    pub loss_d: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLosses {
    pub epoch: usize,
    pub l_mse: f64,
    pub loss_g: f64,
    pub loss_d: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel<T: Element = f32> {
    pub networks: Networks<T>,
    pub config: TrainConfig,
    pub history: Vec<EpochLosses>,
}

impl<T: Element> TrainedModel<T> {
    pub fn arm(&self) -> Arm {
        self.config.arm
    }

    pub fn channels(&self) -> usize {
        self.networks.channels()
    }
}

struct GeneratorPass {
    params: Vec<Var>,
    z: Var,
    err: Var,
    l_mse: Var,
}

fn generator_pass<T: Element>(
    g: &mut Graph<T>,
    encoder: &mut Encoder<T>,
    decoder: &mut Decoder<T>,
    batch: &Tensor<T>,
) -> Result<GeneratorPass> {
    let x = g.input(batch.clone());
    let (z, mut params) = encoder.forward_train(g, x)?;
    let (x_hat, dec_params) = decoder.forward_train(g, z)?;
    params.extend(dec_params);
    let err = g.row_mse(x_hat, batch)?;
    let l_mse = g.mean(err)?;
    Ok(GeneratorPass {
        params,
        z,
        err,
        l_mse,
    })
}

/// What the discriminator sees: `[z, e, ..., e]` for the full arm, else `z`.
fn feature_var<T: Element>(g: &mut Graph<T>, pass: &GeneratorPass, arm: Arm) -> Result<Var> {
    if arm.augmented() {
        let k = g.shape(pass.z)[1];
        let rep = g.repeat_cols(pass.err, k)?;
        g.concat_cols(pass.z, rep)
    } else {
        Ok(pass.z)
    }
}

fn grads_of<T: Element>(g: &Graph<T>, vars: &[Var]) -> Vec<Vec<T>> {
    vars.iter()
        .map(|&v| {
            g.grad(v)
                .map(<[T]>::to_vec)
                .unwrap_or_else(|| vec![T::zero(); g.value(v).numel()])
        })
        .collect()
}

fn scalar<T: Element>(g: &Graph<T>, v: Var) -> f64 {
    g.value(v).data()[0].to_f64_lossy()
}

/// One discriminator update on prior samples vs detached features.
fn discriminator_step<T: Element>(
    disc: &mut Discriminator<T>,
    opt: &mut Adam<T>,
    real: Tensor<T>,
    fake: Tensor<T>,
) -> Result<f64> {
    let mut g = Graph::new();
    let rv = g.input(real);
    let fv = g.input(fake);
    let (pr, real_vars) = disc.forward(&mut g, rv, true)?;
    let (pf, fake_vars) = disc.forward(&mut g, fv, true)?;
    let lr = g.bce(pr, true, PROB_EPS)?;
    let lf = g.bce(pf, false, PROB_EPS)?;
    let loss = g.add(lr, lf)?;
    g.backward(loss)?;
    let grads: Vec<Vec<T>> = grads_of(&g, &real_vars)
        .into_iter()
        .zip(grads_of(&g, &fake_vars))
        .map(|(a, b)| a.iter().zip(&b).map(|(&x, &y)| x + y).collect())
        .collect();
    let value = scalar(&g, loss);
    opt.update(disc.parameters_mut(), &grads)?;
    Ok(value)
}

/// One training step: forward, discriminator update on the detached features,
/// then a generator update on `lambda * l_mse + loss_G` through the updated
/// discriminator.
pub fn train_step<T: Element, R: Rng + ?Sized>(
    batch: &Tensor<T>,
    nets: &mut Networks<T>,
    opt: &mut Optimizers<T>,
    config: &TrainConfig,
    rng: &mut R,
) -> Result<StepLosses> {
    let n = batch.shape()[0];
    if n < 2 {
        return Err(Error::Contract(format!(
            "training batch needs at least 2 images, got {n}"
        )));
    }
    let mut g = Graph::new();
    let pass = generator_pass(&mut g, &mut nets.encoder, &mut nets.decoder, batch)?;
    let mut losses = StepLosses {
        l_mse: scalar(&g, pass.l_mse),
        ..StepLosses::default()
    };
    let mut total = g.scale(pass.l_mse, T::from_f64_lossy(config.lambda))?;

    if let Some(disc) = nets.discriminator.as_mut() {
        let d_opt = opt
            .discriminator
            .as_mut()
            .ok_or_else(|| Error::Contract("discriminator without optimizer".into()))?;
        let feature = feature_var(&mut g, &pass, config.arm)?;
        let fake = g.value(feature).clone();
        let real = sample_prior(n, fake.shape()[1], rng)?;
        losses.loss_d = discriminator_step(disc, d_opt, real, fake)?;
        let (p, _) = disc.forward(&mut g, feature, false)?;
        let loss_g = g.bce(p, true, PROB_EPS)?;
        losses.loss_g = scalar(&g, loss_g);
        total = g.add(total, loss_g)?;
    }

    g.backward(total)?;
    let grads = grads_of(&g, &pass.params);
    opt.generator
        .update(nets.generator_parameters_mut(), &grads)?;
    Ok(losses)
}

/// Which generator loss terms [`generator_gradients`] differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossTerms {
    pub reconstruction: bool,
    pub adversarial: bool,
}

/// Gradients of the selected generator terms with respect to encoder and
/// decoder parameters, without updating anything. Batch norm runs in train
/// mode on copies of the networks.
pub fn generator_gradients<T: Element>(
    nets: &Networks<T>,
    batch: &Tensor<T>,
    arm: Arm,
    lambda: f64,
    terms: LossTerms,
) -> Result<Vec<Vec<T>>> {
    let mut encoder = nets.encoder.clone();
    let mut decoder = nets.decoder.clone();
    let mut g = Graph::new();
    let pass = generator_pass(&mut g, &mut encoder, &mut decoder, batch)?;
    let mut total = g.scale(
        pass.l_mse,
        T::from_f64_lossy(if terms.reconstruction { lambda } else { 0.0 }),
    )?;
    if terms.adversarial {
        let disc = nets
            .discriminator
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("arm {arm} has no discriminator")))?;
        let feature = feature_var(&mut g, &pass, arm)?;
        let (p, _) = disc.forward(&mut g, feature, false)?;
        let loss_g = g.bce(p, true, PROB_EPS)?;
        total = g.add(total, loss_g)?;
    }
    g.backward(total)?;
    Ok(grads_of(&g, &pass.params))
}

fn gather<T: Element>(images: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    let per: usize = images.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(&images.data()[i * per..(i + 1) * per]);
    }
    let mut shape = images.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, data)
}

fn diverged(err: Error, epoch: usize, step: usize) -> Error {
    match err {
        Error::NonFinite(what) => Error::Divergence { epoch, step, what },
        other => other,
    }
}

/// Stage one. `images` is `[N, C, 32, 32]` with values in `[0, 1]`.
pub fn train<T: Element>(images: &Tensor<T>, config: &TrainConfig) -> Result<TrainedModel<T>> {
    train_with(images, config, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with<T: Element>(
    images: &Tensor<T>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLosses),
) -> Result<TrainedModel<T>> {
    config.validate()?;
    let shape = images.shape();
    if shape.len() != 4 {
        return Err(Error::dim(format!(
            "training images must be [N, C, H, W], got {shape:?}"
        )));
    }
    let n = shape[0];
    if n < 2 {
        return Err(Error::EmptyDataset);
    }
    let mut nets = Networks::new(shape[1], config)?;
    let mut opt = Optimizers::new(config);
    let mut rng = stream(config.seed, STREAM_DATA);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut sum = StepLosses::default();
        let mut steps = 0usize;
        // a trailing batch of one cannot be batch-normalized
        for (step, idx) in order
            .chunks(config.batch_size)
            .filter(|c| c.len() >= 2)
            .enumerate()
        {
            let batch = gather(images, idx)?;
            let s = train_step(&batch, &mut nets, &mut opt, config, &mut rng)
                .map_err(|e| diverged(e, epoch, step))?;
            for (v, what) in [
                (s.l_mse, "l_mse"),
                (s.loss_g, "loss_G"),
                (s.loss_d, "loss_D"),
            ] {
                if !v.is_finite() {
                    return Err(Error::Divergence { epoch, step, what });
                }
            }
            sum.l_mse += s.l_mse;
            sum.loss_g += s.loss_g;
            sum.loss_d += s.loss_d;
            steps += 1;
        }
        let k = steps as f64;
        let e = EpochLosses {
            epoch,
            l_mse: sum.l_mse / k,
            loss_g: sum.loss_g / k,
            loss_d: sum.loss_d / k,
        };
        on_epoch(&e);
        history.push(e);
    }
    Ok(TrainedModel {
        networks: nets,
        config: config.clone(),
        history,
    })
}

/// `epoch,l_mse,loss_G,loss_D` with shortest round-trip decimal values.
pub fn write_loss_csv<W: Write>(history: &[EpochLosses], mut out: W) -> io::Result<()> {
    writeln!(out, "epoch,l_mse,loss_G,loss_D")?;
    for e in history {
        writeln!(out, "{},{},{},{}", e.epoch, e.l_mse, e.loss_g, e.loss_d)?;
    }
    Ok(())
}
