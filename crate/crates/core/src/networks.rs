//! Encoder, decoder and discriminator.
//!
//! Encoder: `conv 7x7/2 (64) -> ReLU -> BN`, then three `conv 3x3/2 (64) -> ReLU -> BN`,
//! flattened to 256 values for 32x32 input and optionally projected to `k`.
//! Decoder mirrors it with transposed convolutions and LeakyReLU(0.2), ending in a
//! sigmoid. The discriminator is a 256-64-1 perceptron with LeakyReLU(0.2).

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Activation, BatchNormStats, BnMode, Element, Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const IMAGE_SIZE: usize = 32;
pub const FEATURE_CHANNELS: usize = 64;
/// Spatial size after the four stride-2 encoder layers.
pub const BOTTLENECK_SIZE: usize = 2;
pub const FLAT_FEATURES: usize = FEATURE_CHANNELS * BOTTLENECK_SIZE * BOTTLENECK_SIZE;
pub const DISC_HIDDEN: [usize; 2] = [256, 64];

/// (kernel, padding) for each encoder layer; every layer has stride 2.
const ENCODER_LAYERS: [(usize, usize); 4] = [(7, 3), (3, 1), (3, 1), (3, 1)];
const STRIDE: usize = 2;
/// Every transposed layer needs one extra row/column to land on an even size.
const OUTPUT_PADDING: usize = 1;

fn he_normal<T: Element, R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    rng: &mut R,
) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            T::from_f64_lossy(v * std)
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Spatial sizes through the encoder stack for a square input.
pub fn encoder_spatial_chain(input: usize) -> Vec<usize> {
    let mut sizes = vec![input];
    let mut s = input;
    for (k, p) in ENCODER_LAYERS {
        s = (s + 2 * p).saturating_sub(k) / STRIDE + 1;
        sizes.push(s);
    }
    sizes
}

/// Registers a tensor as a tracked parameter or as a constant.
fn register<T: Element>(g: &mut Graph<T>, t: &Tensor<T>, track: bool, vars: &mut Vec<Var>) -> Var {
    let v = if track {
        g.param(t.clone())
    } else {
        g.input(t.clone())
    };
    vars.push(v);
    v
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<T: Element> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub stats: BatchNormStats<T>,
}

impl<T: Element> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Tensor::ones(vec![channels]),
            beta: Tensor::zeros(vec![channels]),
            stats: BatchNormStats::new(channels),
        }
    }

    fn forward(
        &self,
        g: &mut Graph<T>,
        x: Var,
        stats: &mut BatchNormStats<T>,
        mode: BnMode,
        track: bool,
        vars: &mut Vec<Var>,
    ) -> Result<Var> {
        let gamma = register(g, &self.gamma, track, vars);
        let beta = register(g, &self.beta, track, vars);
        g.batch_norm2d(x, gamma, beta, stats, mode)
    }
}

/// Fully connected layer, `weight: [in, out]`, `bias: [out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<T: Element> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Element> Dense<T> {
    pub fn new<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        Dense {
            weight: he_normal(&[inputs, outputs], inputs, rng),
            bias: Tensor::zeros(vec![outputs]),
        }
    }

    pub fn zeroed(inputs: usize, outputs: usize) -> Self {
        Dense {
            weight: Tensor::zeros(vec![inputs, outputs]),
            bias: Tensor::zeros(vec![outputs]),
        }
    }

    fn forward(&self, g: &mut Graph<T>, x: Var, track: bool, vars: &mut Vec<Var>) -> Result<Var> {
        let w = register(g, &self.weight, track, vars);
        let b = register(g, &self.bias, track, vars);
        g.linear(x, w, Some(b))
    }
}

/// Named parameter and buffer access shared by the three networks.
///
/// `parameters` and `parameters_mut` list trainable tensors in the same order
/// as the vars returned by a tracked forward pass.
pub trait Module<T: Element> {
    fn parameters(&self) -> Vec<(String, &Tensor<T>)>;
    fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>>;
    /// Non-trainable state (batch-norm running statistics).
    fn buffers(&self) -> Vec<(String, &[T])> {
        Vec::new()
    }
    fn buffers_mut(&mut self) -> Vec<&mut Vec<T>> {
        Vec::new()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderSpec {
    pub channels: usize,
    pub latent_dim: usize,
}

impl EncoderSpec {
    pub fn new(channels: usize, latent_dim: usize) -> Self {
        EncoderSpec {
            channels,
            latent_dim,
        }
    }

    pub fn projected(&self) -> bool {
        self.latent_dim != FLAT_FEATURES
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T: Element> {
    spec: EncoderSpec,
    /// `[64, C_in, k, k]` for each layer.
    pub convs: Vec<Tensor<T>>,
    pub norms: Vec<BatchNorm<T>>,
    pub projection: Option<Dense<T>>,
}

impl<T: Element> Encoder<T> {
    pub fn new<R: Rng + ?Sized>(spec: EncoderSpec, rng: &mut R) -> Result<Self> {
        validate_spec(spec)?;
        let mut convs = Vec::new();
        let mut c_in = spec.channels;
        for (k, _) in ENCODER_LAYERS {
            convs.push(he_normal(
                &[FEATURE_CHANNELS, c_in, k, k],
                c_in * k * k,
                rng,
            ));
            c_in = FEATURE_CHANNELS;
        }
        let norms = (0..ENCODER_LAYERS.len())
            .map(|_| BatchNorm::new(FEATURE_CHANNELS))
            .collect();
        let projection = spec
            .projected()
            .then(|| Dense::new(FLAT_FEATURES, spec.latent_dim, rng));
        Ok(Encoder {
            spec,
            convs,
            norms,
            projection,
        })
    }

    pub fn spec(&self) -> EncoderSpec {
        self.spec
    }

    fn check_input(&self, g: &Graph<T>, x: Var) -> Result<()> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != self.spec.channels || s[2] != IMAGE_SIZE || s[3] != IMAGE_SIZE {
            return Err(Error::dim(format!(
                "encoder expects [N, {}, {IMAGE_SIZE}, {IMAGE_SIZE}], got {s:?}",
                self.spec.channels
            )));
        }
        Ok(())
    }

    fn run(
        &self,
        g: &mut Graph<T>,
        x: Var,
        stats: &mut [BatchNormStats<T>],
        mode: BnMode,
        track: bool,
    ) -> Result<(Var, Vec<Var>)> {
        self.check_input(g, x)?;
        let mut vars = Vec::new();
        let mut h = x;
        for (i, (w, (_, pad))) in self.convs.iter().zip(ENCODER_LAYERS).enumerate() {
            let wv = register(g, w, track, &mut vars);
            h = g.conv2d(h, wv, STRIDE, pad)?;
            h = g.activation(h, Activation::Relu)?;
            h = self.norms[i].forward(g, h, &mut stats[i], mode, track, &mut vars)?;
        }
        let n = g.shape(x)[0];
        h = g.reshape(h, &[n, FLAT_FEATURES])?;
        if let Some(p) = &self.projection {
            h = p.forward(g, h, track, &mut vars)?;
        }
        Ok((h, vars))
    }

    /// Train-mode forward: batch statistics, running stats updated, parameters
    /// tracked. Returns the latent batch `[N, k]` and the parameter vars.
    pub fn forward_train(&mut self, g: &mut Graph<T>, x: Var) -> Result<(Var, Vec<Var>)> {
        let mut stats: Vec<_> = self.norms.iter().map(|n| n.stats.clone()).collect();
        let out = self.run(g, x, &mut stats, BnMode::Train, true)?;
        for (n, s) in self.norms.iter_mut().zip(stats) {
            n.stats = s;
        }
        Ok(out)
    }

    /// Eval-mode forward with running statistics; nothing is tracked or mutated.
    pub fn forward_eval(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let mut stats: Vec<_> = self.norms.iter().map(|n| n.stats.clone()).collect();
        Ok(self.run(g, x, &mut stats, BnMode::Eval, false)?.0)
    }

    /// Eval-mode forward that still tracks parameters (for gradient checks).
    pub fn forward_eval_tracked(&self, g: &mut Graph<T>, x: Var) -> Result<(Var, Vec<Var>)> {
        let mut stats: Vec<_> = self.norms.iter().map(|n| n.stats.clone()).collect();
        self.run(g, x, &mut stats, BnMode::Eval, true)
    }
}

impl<T: Element> Module<T> for Encoder<T> {
    fn parameters(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, (w, bn)) in self.convs.iter().zip(&self.norms).enumerate() {
            out.push((format!("encoder.conv{i}.weight"), w));
            out.push((format!("encoder.bn{i}.gamma"), &bn.gamma));
            out.push((format!("encoder.bn{i}.beta"), &bn.beta));
        }
        if let Some(p) = &self.projection {
            out.push(("encoder.proj.weight".into(), &p.weight));
            out.push(("encoder.proj.bias".into(), &p.bias));
        }
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for (w, bn) in self.convs.iter_mut().zip(self.norms.iter_mut()) {
            out.push(w);
            out.push(&mut bn.gamma);
            out.push(&mut bn.beta);
        }
        if let Some(p) = &mut self.projection {
            out.push(&mut p.weight);
            out.push(&mut p.bias);
        }
        out
    }

    fn buffers(&self) -> Vec<(String, &[T])> {
        bn_buffers("encoder", &self.norms)
    }

    fn buffers_mut(&mut self) -> Vec<&mut Vec<T>> {
        bn_buffers_mut(&mut self.norms)
    }
}

fn bn_buffers<'a, T: Element>(prefix: &str, norms: &'a [BatchNorm<T>]) -> Vec<(String, &'a [T])> {
    norms
        .iter()
        .enumerate()
        .flat_map(|(i, bn)| {
            [
                (
                    format!("{prefix}.bn{i}.running_mean"),
                    bn.stats.mean.as_slice(),
                ),
                (
                    format!("{prefix}.bn{i}.running_var"),
                    bn.stats.var.as_slice(),
                ),
            ]
        })
        .collect()
}

fn bn_buffers_mut<T: Element>(norms: &mut [BatchNorm<T>]) -> Vec<&mut Vec<T>> {
    norms
        .iter_mut()
        .flat_map(|bn| [&mut bn.stats.mean, &mut bn.stats.var])
        .collect()
}

fn validate_spec(spec: EncoderSpec) -> Result<()> {
    if spec.channels == 0 || spec.latent_dim == 0 {
        return Err(Error::Contract(
            "channels and latent dim must be positive".into(),
        ));
    }
    let chain = encoder_spatial_chain(IMAGE_SIZE);
    if chain != [32, 16, 8, 4, BOTTLENECK_SIZE] {
        return Err(Error::dim(format!(
            "unexpected encoder spatial chain {chain:?}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<T: Element> {
    spec: EncoderSpec,
    pub projection: Option<Dense<T>>,
    /// Transposed-conv weights `[C_in, C_out, k, k]`, deepest layer first.
    pub convs: Vec<Tensor<T>>,
    pub norms: Vec<BatchNorm<T>>,
    /// Per-channel bias of the output layer.
    pub output_bias: Tensor<T>,
}

impl<T: Element> Decoder<T> {
    pub fn new<R: Rng + ?Sized>(spec: EncoderSpec, rng: &mut R) -> Result<Self> {
        validate_spec(spec)?;
        let projection = spec
            .projected()
            .then(|| Dense::new(spec.latent_dim, FLAT_FEATURES, rng));
        let mut convs = Vec::new();
        for (i, (k, _)) in ENCODER_LAYERS.iter().rev().enumerate() {
            let c_out = if i == ENCODER_LAYERS.len() - 1 {
                spec.channels
            } else {
                FEATURE_CHANNELS
            };
            convs.push(he_normal(
                &[FEATURE_CHANNELS, c_out, *k, *k],
                FEATURE_CHANNELS * k * k,
                rng,
            ));
        }
        let norms = (0..ENCODER_LAYERS.len() - 1)
            .map(|_| BatchNorm::new(FEATURE_CHANNELS))
            .collect();
        Ok(Decoder {
            spec,
            projection,
            convs,
            norms,
            output_bias: Tensor::zeros(vec![spec.channels]),
        })
    }

    pub fn spec(&self) -> EncoderSpec {
        self.spec
    }

    fn run(
        &self,
        g: &mut Graph<T>,
        z: Var,
        stats: &mut [BatchNormStats<T>],
        mode: BnMode,
        track: bool,
    ) -> Result<(Var, Vec<Var>)> {
        let s = g.shape(z).to_vec();
        if s.len() != 2 || s[1] != self.spec.latent_dim {
            return Err(Error::dim(format!(
                "decoder expects [N, {}], got {s:?}",
                self.spec.latent_dim
            )));
        }
        let n = s[0];
        let mut vars = Vec::new();
        let mut h = z;
        if let Some(p) = &self.projection {
            h = p.forward(g, h, track, &mut vars)?;
        }
        h = g.reshape(h, &[n, FEATURE_CHANNELS, BOTTLENECK_SIZE, BOTTLENECK_SIZE])?;
        let last = self.convs.len() - 1;
        for (i, (w, (_, pad))) in self
            .convs
            .iter()
            .zip(ENCODER_LAYERS.iter().rev())
            .enumerate()
        {
            let wv = register(g, w, track, &mut vars);
            h = g.conv_transpose2d(h, wv, STRIDE, *pad, OUTPUT_PADDING)?;
            if i < last {
                h = g.activation(h, Activation::LEAKY)?;
                h = self.norms[i].forward(g, h, &mut stats[i], mode, track, &mut vars)?;
            }
        }
        let b = register(g, &self.output_bias, track, &mut vars);
        h = g.channel_bias(h, b)?;
        h = g.activation(h, Activation::Sigmoid)?;
        Ok((h, vars))
    }

    pub fn forward_train(&mut self, g: &mut Graph<T>, z: Var) -> Result<(Var, Vec<Var>)> {
        let mut stats: Vec<_> = self.norms.iter().map(|n| n.stats.clone()).collect();
        let out = self.run(g, z, &mut stats, BnMode::Train, true)?;
        for (n, s) in self.norms.iter_mut().zip(stats) {
            n.stats = s;
        }
        Ok(out)
    }

    pub fn forward_eval(&self, g: &mut Graph<T>, z: Var) -> Result<Var> {
        let mut stats: Vec<_> = self.norms.iter().map(|n| n.stats.clone()).collect();
        Ok(self.run(g, z, &mut stats, BnMode::Eval, false)?.0)
    }

    pub fn forward_eval_tracked(&self, g: &mut Graph<T>, z: Var) -> Result<(Var, Vec<Var>)> {
        let mut stats: Vec<_> = self.norms.iter().map(|n| n.stats.clone()).collect();
        self.run(g, z, &mut stats, BnMode::Eval, true)
    }
}

impl<T: Element> Module<T> for Decoder<T> {
    fn parameters(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        if let Some(p) = &self.projection {
            out.push(("decoder.proj.weight".into(), &p.weight));
            out.push(("decoder.proj.bias".into(), &p.bias));
        }
        for (i, w) in self.convs.iter().enumerate() {
            out.push((format!("decoder.deconv{i}.weight"), w));
            if let Some(bn) = self.norms.get(i) {
                out.push((format!("decoder.bn{i}.gamma"), &bn.gamma));
                out.push((format!("decoder.bn{i}.beta"), &bn.beta));
            }
        }
        out.push(("decoder.output.bias".into(), &self.output_bias));
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        if let Some(p) = &mut self.projection {
            out.push(&mut p.weight);
            out.push(&mut p.bias);
        }
        let mut norms = self.norms.iter_mut();
        for w in self.convs.iter_mut() {
            out.push(w);
            if let Some(bn) = norms.next() {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out.push(&mut self.output_bias);
        out
    }

    fn buffers(&self) -> Vec<(String, &[T])> {
        bn_buffers("decoder", &self.norms)
    }

    fn buffers_mut(&mut self) -> Vec<&mut Vec<T>> {
        bn_buffers_mut(&mut self.norms)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T: Element> {
    input_dim: usize,
    pub layers: Vec<Dense<T>>,
}

impl<T: Element> Discriminator<T> {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, rng: &mut R) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::Contract(
                "discriminator input dim must be positive".into(),
            ));
        }
        let dims = [input_dim, DISC_HIDDEN[0], DISC_HIDDEN[1], 1];
        let layers = dims
            .windows(2)
            .map(|w| Dense::new(w[0], w[1], rng))
            .collect();
        Ok(Discriminator { input_dim, layers })
    }

    /// All weights and biases zero; outputs 0.5 everywhere.
    pub fn zeroed(input_dim: usize) -> Self {
        let dims = [input_dim, DISC_HIDDEN[0], DISC_HIDDEN[1], 1];
        let layers = dims.windows(2).map(|w| Dense::zeroed(w[0], w[1])).collect();
        Discriminator { input_dim, layers }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Probability that each row of `v: [N, d]` is a prior sample, `[N, 1]`.
    pub fn forward(&self, g: &mut Graph<T>, v: Var, track: bool) -> Result<(Var, Vec<Var>)> {
        let s = g.shape(v);
        if s.len() != 2 || s[1] != self.input_dim {
            return Err(Error::dim(format!(
                "discriminator expects [N, {}], got {s:?}",
                self.input_dim
            )));
        }
        let mut vars = Vec::new();
        let mut h = v;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h, track, &mut vars)?;
            h = if i < last {
                g.activation(h, Activation::LEAKY)?
            } else {
                g.activation(h, Activation::Sigmoid)?
            };
        }
        Ok((h, vars))
    }
}

impl<T: Element> Module<T> for Discriminator<T> {
    fn parameters(&self) -> Vec<(String, &Tensor<T>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("discriminator.fc{i}.weight"), &l.weight),
                    (format!("discriminator.fc{i}.bias"), &l.bias),
                ]
            })
            .collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

/// Eval-mode latent codes for an image batch `[N, C, 32, 32]`.
pub fn encode<T: Element>(enc: &Encoder<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let z = enc.forward_eval(&mut g, xv)?;
    Ok(g.value(z).clone())
}

/// Eval-mode reconstructions for a latent batch `[N, k]`.
pub fn decode<T: Element>(dec: &Decoder<T>, z: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let zv = g.input(z.clone());
    let x = dec.forward_eval(&mut g, zv)?;
    Ok(g.value(x).clone())
}

/// Discriminator probabilities for `v: [N, d]`.
pub fn discriminate<T: Element>(disc: &Discriminator<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let vv = g.input(v.clone());
    let (p, _) = disc.forward(&mut g, vv, false)?;
    Ok(g.value(p).clone())
}
