use super::conv::{batch_to_channel_major, channel_major_to_batch, col2im, im2col, ConvGeometry};
use super::tensor::{Element, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    /// Leaky rectifier with the given negative slope.
    LeakyRelu(f64),
    Sigmoid,
}

impl Activation {
    pub const LEAKY: Activation = Activation::LeakyRelu(0.2);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running statistics owned by a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormStats<T: Element> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Element> BatchNormStats<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormStats {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

enum Op<T: Element> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeometry,
        filters: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        // geometry of the matching forward convolution, output -> input
        geom: ConvGeometry,
        in_channels: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Activation {
        x: Var,
        kind: Activation,
    },
    BatchNorm2d {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        mode: BnMode,
    },
    ChannelBias {
        x: Var,
        b: Var,
    },
    Reshape {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Add {
        a: Var,
        b: Var,
    },
    DotConst {
        x: Var,
        weights: Vec<T>,
    },
    RowMse {
        pred: Var,
        target: Vec<T>,
    },
    RepeatCols {
        x: Var,
        times: usize,
    },
    ConcatCols {
        a: Var,
        b: Var,
    },
    Bce {
        p: Var,
        positive: bool,
        eps: f64,
    },
}

struct Node<T: Element> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of recorded operations for one forward/backward pass.
///
/// Nodes are appended in execution order, so node index order is a valid
/// topological order and backward walks it in reverse.
pub struct Graph<T: Element> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Element>(t: &Tensor<T>, op: &'static str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

fn accumulate<T: Element>(slot: &mut Option<Vec<T>>, contribution: Vec<T>) {
    match slot {
        Some(existing) => existing
            .iter_mut()
            .zip(contribution)
            .for_each(|(e, c)| *e = *e + c),
        None => *slot = Some(contribution),
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; gradients are kept only if `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let requires_grad = tensor.requires_grad();
        self.push(tensor, Op::Leaf, requires_grad)
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Trainable parameter (gradient tracked).
    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad()
    }

    /// Clears stored gradients and re-arms [`Graph::backward`].
    pub fn reset(&mut self) {
        for node in &mut self.nodes {
            node.value.clear_grad();
        }
        self.consumed = false;
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn finish(
        &mut self,
        value: Tensor<T>,
        op: Op<T>,
        inputs: &[Var],
        name: &'static str,
    ) -> Result<Var> {
        check_finite(&value, name)?;
        let rg = self.needs_grad(inputs);
        Ok(self.push(value, op, rg))
    }

    /// 2-D convolution without bias. `x: [N, C, H, W]`, `w: [F, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::dim(format!(
                "conv2d expects rank-4 operands, got {xs:?} and {ws:?}"
            )));
        }
        if xs[1] != ws[1] {
            return Err(Error::dim(format!(
                "conv2d channel mismatch: input has {} channels, weight expects {}",
                xs[1], ws[1]
            )));
        }
        let geom = ConvGeometry::new([xs[0], xs[1], xs[2], xs[3]], ws[2], ws[3], stride, padding)
            .ok_or_else(|| {
            Error::dim(format!(
                "kernel {ws:?} with stride {stride}, padding {padding} does not fit input {xs:?}"
            ))
        })?;
        let filters = ws[0];
        let cols = im2col(self.value(x).data(), &geom);
        let mut out = vec![T::zero(); filters * geom.columns()];
        T::gemm(
            false,
            false,
            filters,
            geom.patch_len(),
            geom.columns(),
            T::one(),
            self.value(w).data(),
            &cols,
            T::zero(),
            &mut out,
        );
        let out = channel_major_to_batch(&out, geom.n, filters, geom.out_positions());
        let value = Tensor::new(vec![geom.n, filters, geom.oh, geom.ow], out)?;
        self.finish(
            value,
            Op::Conv2d {
                x,
                w,
                geom,
                filters,
            },
            &[x, w],
            "conv2d",
        )
    }

    /// Transposed convolution. `x: [N, Cin, H, W]`, `w: [Cin, Cout, kh, kw]`;
    /// output spatial size is `(H - 1) * stride - 2 * padding + kh + output_padding`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        stride: usize,
        padding: usize,
        output_padding: usize,
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::dim(format!(
                "conv_transpose2d expects rank-4 operands, got {xs:?} and {ws:?}"
            )));
        }
        if xs[1] != ws[0] {
            return Err(Error::dim(format!(
                "conv_transpose2d channel mismatch: input has {} channels, weight expects {}",
                xs[1], ws[0]
            )));
        }
        if stride == 0 || output_padding >= stride {
            return Err(Error::dim(format!(
                "output_padding {output_padding} must be smaller than stride {stride}"
            )));
        }
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[1], ws[2], ws[3]);
        let oh = ((h - 1) * stride + kh + output_padding)
            .checked_sub(2 * padding)
            .filter(|&v| v > 0);
        let ow = ((wd - 1) * stride + kw + output_padding)
            .checked_sub(2 * padding)
            .filter(|&v| v > 0);
        let (Some(oh), Some(ow)) = (oh, ow) else {
            return Err(Error::dim(format!(
                "padding {padding} too large for {xs:?}"
            )));
        };
        let geom = ConvGeometry::new([n, cout, oh, ow], kh, kw, stride, padding)
            .filter(|g| g.oh == h && g.ow == wd)
            .ok_or_else(|| Error::dim("inconsistent transposed convolution geometry"))?;
        let xm = batch_to_channel_major(self.value(x).data(), n, cin, h * wd);
        let mut cols = vec![T::zero(); geom.patch_len() * geom.columns()];
        T::gemm(
            true,
            false,
            geom.patch_len(),
            cin,
            geom.columns(),
            T::one(),
            self.value(w).data(),
            &xm,
            T::zero(),
            &mut cols,
        );
        let out = col2im(&cols, &geom);
        let value = Tensor::new(vec![n, cout, oh, ow], out)?;
        self.finish(
            value,
            Op::ConvTranspose2d {
                x,
                w,
                geom,
                in_channels: cin,
            },
            &[x, w],
            "conv_transpose2d",
        )
    }

    /// Affine map `x W + b` with `x: [N, D]`, `w: [D, M]`, `b: [M]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::dim(format!(
                "linear: cannot multiply {xs:?} by {ws:?}"
            )));
        }
        let (n, d, m) = (xs[0], xs[1], ws[1]);
        let mut out = vec![T::zero(); n * m];
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.shape() != [m] {
                return Err(Error::dim(format!(
                    "linear: bias shape {:?}, expected [{m}]",
                    bias.shape()
                )));
            }
            for row in out.chunks_mut(m) {
                row.copy_from_slice(bias.data());
            }
        }
        T::gemm(
            false,
            false,
            n,
            d,
            m,
            T::one(),
            self.value(x).data(),
            self.value(w).data(),
            T::one(),
            &mut out,
        );
        let value = Tensor::new(vec![n, m], out)?;
        let inputs: Vec<Var> = std::iter::once(x)
            .chain(std::iter::once(w))
            .chain(b)
            .collect();
        self.finish(value, Op::Linear { x, w, b }, &inputs, "linear")
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let input = self.value(x);
        let data: Vec<T> = match kind {
            Activation::Relu => input.data().iter().map(|&v| v.max(T::zero())).collect(),
            Activation::LeakyRelu(slope) => {
                let slope = T::from_f64_lossy(slope);
                input
                    .data()
                    .iter()
                    .map(|&v| if v > T::zero() { v } else { v * slope })
                    .collect()
            }
            Activation::Sigmoid => input.data().iter().map(|&v| sigmoid(v)).collect(),
        };
        let value = Tensor::new(input.shape().to_vec(), data)?;
        self.finish(value, Op::Activation { x, kind }, &[x], "activation")
    }

    /// Per-channel batch normalization of `x: [N, C, H, W]`.
    ///
    /// Train mode normalizes with biased batch statistics and folds the
    /// unbiased variance into `stats`; eval mode uses `stats` only.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut BatchNormStats<T>,
        mode: BnMode,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(Error::dim(format!(
                "batch_norm2d expects [N, C, H, W], got {xs:?}"
            )));
        }
        let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::dim(format!("batch_norm2d {name} must be [{c}]")));
            }
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::dim(format!(
                "batch_norm2d running stats must have {c} channels"
            )));
        }
        let count = n * hw;
        if mode == BnMode::Train && count < 2 {
            return Err(Error::DegenerateVariance(count));
        }
        let eps = T::from_f64_lossy(stats.eps);
        let data = self.value(x).data();
        let mut inv_std = vec![T::zero(); c];
        let mut means = vec![T::zero(); c];
        match mode {
            BnMode::Train => {
                let cnt = T::from_usize(count).unwrap();
                let momentum = T::from_f64_lossy(stats.momentum);
                for ch in 0..c {
                    let mut sum = T::zero();
                    for ni in 0..n {
                        for &v in &data[(ni * c + ch) * hw..][..hw] {
                            sum = sum + v;
                        }
                    }
                    let mean = sum / cnt;
                    let mut sq = T::zero();
                    for ni in 0..n {
                        for &v in &data[(ni * c + ch) * hw..][..hw] {
                            sq = sq + (v - mean) * (v - mean);
                        }
                    }
                    let var = sq / cnt;
                    means[ch] = mean;
                    inv_std[ch] = T::one() / (var + eps).sqrt();
                    let unbiased = sq / (cnt - T::one());
                    stats.mean[ch] = (T::one() - momentum) * stats.mean[ch] + momentum * mean;
                    stats.var[ch] = (T::one() - momentum) * stats.var[ch] + momentum * unbiased;
                }
            }
            BnMode::Eval => {
                for ch in 0..c {
                    means[ch] = stats.mean[ch];
                    inv_std[ch] = T::one() / (stats.var[ch] + eps).sqrt();
                }
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); data.len()];
        let mut out = vec![T::zero(); data.len()];
        for ni in 0..n {
            for ch in 0..c {
                let base = (ni * c + ch) * hw;
                for i in base..base + hw {
                    let h = (data[i] - means[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + b[ch];
                }
            }
        }
        let value = Tensor::new(xs, out)?;
        self.finish(
            value,
            Op::BatchNorm2d {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            },
            &[x, gamma, beta],
            "batch_norm2d",
        )
    }

    /// Adds `b: [C]` to every position of channel `c` in `x: [N, C, H, W]`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || self.shape(b) != [xs[1]] {
            return Err(Error::dim(format!(
                "channel_bias: {:?} cannot bias {xs:?}",
                self.shape(b)
            )));
        }
        let hw = xs[2] * xs[3];
        let bias = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .enumerate()
            .flat_map(|(i, plane)| {
                let shift = bias[i % xs[1]];
                plane.iter().map(move |&v| v + shift)
            })
            .collect();
        let value = Tensor::new(xs, data)?;
        self.finish(value, Op::ChannelBias { x, b }, &[x, b], "channel_bias")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape.to_vec())?;
        self.finish(value, Op::Reshape { x }, &[x], "reshape")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum();
        self.finish(Tensor::scalar(s), Op::Sum { x }, &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s: T = t.data().iter().copied().sum();
        let m = s / T::from_usize(t.numel()).unwrap();
        self.finish(Tensor::scalar(m), Op::Mean { x }, &[x], "mean")
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v * factor).collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        self.finish(value, Op::Scale { x, factor }, &[x], "scale")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(format!(
                "add: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.finish(value, Op::Add { a, b }, &[a, b], "add")
    }

    /// Scalar `sum_i weights[i] * x[i]` against constant weights.
    pub fn dot_const(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        let t = self.value(x);
        if weights.len() != t.numel() {
            return Err(Error::dim(format!(
                "dot_const: {} weights for {} values",
                weights.len(),
                t.numel()
            )));
        }
        let s = t.data().iter().zip(&weights).map(|(&a, &b)| a * b).sum();
        self.finish(
            Tensor::scalar(s),
            Op::DotConst { x, weights },
            &[x],
            "dot_const",
        )
    }

    /// Per-sample mean squared error against a constant target, shape `[N, 1]`.
    pub fn row_mse(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(Error::dim(format!(
                "row_mse: prediction {:?} vs target {:?}",
                p.shape(),
                target.shape()
            )));
        }
        let n = p.shape()[0];
        let per = p.numel() / n;
        let denom = T::from_usize(per).unwrap();
        let out: Vec<T> = p
            .data()
            .chunks(per)
            .zip(target.data().chunks(per))
            .map(|(a, b)| a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>() / denom)
            .collect();
        let value = Tensor::new(vec![n, 1], out)?;
        self.finish(
            value,
            Op::RowMse {
                pred,
                target: target.data().to_vec(),
            },
            &[pred],
            "row_mse",
        )
    }

    /// `[N, 1]` to `[N, times]` by repeating the single column.
    pub fn repeat_cols(&mut self, x: Var, times: usize) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 || t.shape()[1] != 1 {
            return Err(Error::dim(format!(
                "repeat_cols expects [N, 1], got {:?}",
                t.shape()
            )));
        }
        let n = t.shape()[0];
        let data = t
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, times))
            .collect();
        let value = Tensor::new(vec![n, times], data)?;
        self.finish(value, Op::RepeatCols { x, times }, &[x], "repeat_cols")
    }

    /// `[N, p]` and `[N, q]` to `[N, p + q]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[0] != tb.shape()[0] {
            return Err(Error::dim(format!(
                "concat_cols: {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let (n, p, q) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut data = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            data.extend_from_slice(&ta.data()[i * p..(i + 1) * p]);
            data.extend_from_slice(&tb.data()[i * q..(i + 1) * q]);
        }
        let value = Tensor::new(vec![n, p + q], data)?;
        self.finish(value, Op::ConcatCols { a, b }, &[a, b], "concat_cols")
    }

    /// Mean binary cross-entropy of probabilities `p` against an all-`positive`
    /// label, with `p` clamped to `[eps, 1 - eps]` inside the logarithm.
    pub fn bce(&mut self, p: Var, positive: bool, eps: f64) -> Result<Var> {
        let t = self.value(p);
        let (lo, hi) = (T::from_f64_lossy(eps), T::from_f64_lossy(1.0 - eps));
        let s: T = t
            .data()
            .iter()
            .map(|&v| {
                let c = v.max(lo).min(hi);
                if positive {
                    -c.ln()
                } else {
                    -(T::one() - c).ln()
                }
            })
            .sum();
        let loss = s / T::from_usize(t.numel()).unwrap();
        self.finish(
            Tensor::scalar(loss),
            Op::Bce { p, positive, eps },
            &[p],
            "bce",
        )
    }

    /// Reverse-mode pass from a scalar `loss`; fills gradients of every node
    /// that depends on a parameter. A graph can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let shape = self.shape(loss).to_vec();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let contributions = self.vjp(idx, &gy);
            for (var, g) in contributions {
                if self.nodes[var.0].requires_grad {
                    accumulate(&mut grads[var.0], g);
                }
            }
            grads[idx] = Some(gy);
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("backward"));
                }
                node.value.set_grad(g);
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `idx` for upstream gradient `gy`.
    fn vjp(&self, idx: usize, gy: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[idx];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                geom,
                filters,
            } => {
                let gm = batch_to_channel_major(gy, geom.n, *filters, geom.out_positions());
                if rg(*w) {
                    let cols = im2col(self.value(*x).data(), geom);
                    let mut gw = vec![T::zero(); filters * geom.patch_len()];
                    T::gemm(
                        false,
                        true,
                        *filters,
                        geom.columns(),
                        geom.patch_len(),
                        T::one(),
                        &gm,
                        &cols,
                        T::zero(),
                        &mut gw,
                    );
                    out.push((*w, gw));
                }
                if rg(*x) {
                    let mut gcols = vec![T::zero(); geom.patch_len() * geom.columns()];
                    T::gemm(
                        true,
                        false,
                        geom.patch_len(),
                        *filters,
                        geom.columns(),
                        T::one(),
                        self.value(*w).data(),
                        &gm,
                        T::zero(),
                        &mut gcols,
                    );
                    out.push((*x, col2im(&gcols, geom)));
                }
            }
            Op::ConvTranspose2d {
                x,
                w,
                geom,
                in_channels,
            } => {
                let gcols = im2col(gy, geom);
                let positions = geom.out_positions();
                if rg(*w) {
                    let xm = batch_to_channel_major(
                        self.value(*x).data(),
                        geom.n,
                        *in_channels,
                        positions,
                    );
                    let mut gw = vec![T::zero(); in_channels * geom.patch_len()];
                    T::gemm(
                        false,
                        true,
                        *in_channels,
                        geom.columns(),
                        geom.patch_len(),
                        T::one(),
                        &xm,
                        &gcols,
                        T::zero(),
                        &mut gw,
                    );
                    out.push((*w, gw));
                }
                if rg(*x) {
                    let mut gxm = vec![T::zero(); in_channels * geom.columns()];
                    T::gemm(
                        false,
                        false,
                        *in_channels,
                        geom.patch_len(),
                        geom.columns(),
                        T::one(),
                        self.value(*w).data(),
                        &gcols,
                        T::zero(),
                        &mut gxm,
                    );
                    out.push((
                        *x,
                        channel_major_to_batch(&gxm, geom.n, *in_channels, positions),
                    ));
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (n, d) = (xs[0], xs[1]);
                let m = self.shape(*w)[1];
                if rg(*w) {
                    let mut gw = vec![T::zero(); d * m];
                    T::gemm(
                        true,
                        false,
                        d,
                        n,
                        m,
                        T::one(),
                        self.value(*x).data(),
                        gy,
                        T::zero(),
                        &mut gw,
                    );
                    out.push((*w, gw));
                }
                if rg(*x) {
                    let mut gx = vec![T::zero(); n * d];
                    T::gemm(
                        false,
                        true,
                        n,
                        m,
                        d,
                        T::one(),
                        gy,
                        self.value(*w).data(),
                        T::zero(),
                        &mut gx,
                    );
                    out.push((*x, gx));
                }
                if let Some(b) = b.filter(|&b| rg(b)) {
                    let mut gb = vec![T::zero(); m];
                    for row in gy.chunks(m) {
                        gb.iter_mut().zip(row).for_each(|(a, &g)| *a = *a + g);
                    }
                    out.push((b, gb));
                }
            }
            Op::Activation { x, kind } => {
                let input = self.value(*x).data();
                let g = match *kind {
                    Activation::Relu => input
                        .iter()
                        .zip(gy)
                        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                        .collect(),
                    Activation::LeakyRelu(slope) => {
                        let slope = T::from_f64_lossy(slope);
                        input
                            .iter()
                            .zip(gy)
                            .map(|(&v, &g)| if v > T::zero() { g } else { g * slope })
                            .collect()
                    }
                    Activation::Sigmoid => node
                        .value
                        .data()
                        .iter()
                        .zip(gy)
                        .map(|(&s, &g)| g * s * (T::one() - s))
                        .collect(),
                };
                out.push((*x, g));
            }
            Op::BatchNorm2d {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            } => {
                let xs = self.shape(*x);
                let (n, c, hw) = (xs[0], xs[1], xs[2] * xs[3]);
                let g = self.value(*gamma).data();
                let mut sum_gy = vec![T::zero(); c];
                let mut sum_gy_xhat = vec![T::zero(); c];
                for ni in 0..n {
                    for ch in 0..c {
                        let base = (ni * c + ch) * hw;
                        for i in base..base + hw {
                            sum_gy[ch] = sum_gy[ch] + gy[i];
                            sum_gy_xhat[ch] = sum_gy_xhat[ch] + gy[i] * xhat[i];
                        }
                    }
                }
                if rg(*x) {
                    let mut gx = vec![T::zero(); gy.len()];
                    let cnt = T::from_usize(n * hw).unwrap();
                    for ni in 0..n {
                        for ch in 0..c {
                            let base = (ni * c + ch) * hw;
                            let k = g[ch] * inv_std[ch];
                            for i in base..base + hw {
                                gx[i] = match mode {
                                    BnMode::Eval => k * gy[i],
                                    BnMode::Train => {
                                        k * (gy[i]
                                            - sum_gy[ch] / cnt
                                            - xhat[i] * sum_gy_xhat[ch] / cnt)
                                    }
                                };
                            }
                        }
                    }
                    out.push((*x, gx));
                }
                if rg(*gamma) {
                    out.push((*gamma, sum_gy_xhat));
                }
                if rg(*beta) {
                    out.push((*beta, sum_gy));
                }
            }
            Op::ChannelBias { x, b } => {
                let xs = self.shape(*x);
                let (c, hw) = (xs[1], xs[2] * xs[3]);
                let mut gb = vec![T::zero(); c];
                for (i, plane) in gy.chunks(hw).enumerate() {
                    gb[i % c] = gb[i % c] + plane.iter().copied().sum::<T>();
                }
                out.push((*x, gy.to_vec()));
                out.push((*b, gb));
            }
            Op::Reshape { x } => out.push((*x, gy.to_vec())),
            Op::Sum { x } => out.push((*x, vec![gy[0]; self.value(*x).numel()])),
            Op::Mean { x } => {
                let n = self.value(*x).numel();
                out.push((*x, vec![gy[0] / T::from_usize(n).unwrap(); n]));
            }
            Op::Scale { x, factor } => out.push((*x, gy.iter().map(|&g| g * *factor).collect())),
            Op::Add { a, b } => {
                out.push((*a, gy.to_vec()));
                out.push((*b, gy.to_vec()));
            }
            Op::DotConst { x, weights } => {
                out.push((*x, weights.iter().map(|&w| w * gy[0]).collect()));
            }
            Op::RowMse { pred, target } => {
                let p = self.value(*pred);
                let per = p.numel() / p.shape()[0];
                let two_over = T::from_f64_lossy(2.0) / T::from_usize(per).unwrap();
                let g = p
                    .data()
                    .iter()
                    .zip(target)
                    .enumerate()
                    .map(|(i, (&a, &b))| gy[i / per] * two_over * (a - b))
                    .collect();
                out.push((*pred, g));
            }
            Op::RepeatCols { x, times } => {
                out.push((
                    *x,
                    gy.chunks(*times)
                        .map(|row| row.iter().copied().sum())
                        .collect(),
                ));
            }
            Op::ConcatCols { a, b } => {
                let (p, q) = (self.shape(*a)[1], self.shape(*b)[1]);
                let mut ga = Vec::with_capacity(gy.len() / (p + q) * p);
                let mut gb = Vec::with_capacity(gy.len() / (p + q) * q);
                for row in gy.chunks(p + q) {
                    ga.extend_from_slice(&row[..p]);
                    gb.extend_from_slice(&row[p..]);
                }
                out.push((*a, ga));
                out.push((*b, gb));
            }
            Op::Bce { p, positive, eps } => {
                let t = self.value(*p);
                let n = T::from_usize(t.numel()).unwrap();
                let (lo, hi) = (T::from_f64_lossy(*eps), T::from_f64_lossy(1.0 - *eps));
                let g = t
                    .data()
                    .iter()
                    .map(|&v| {
                        if v < lo || v > hi {
                            T::zero()
                        } else if *positive {
                            -gy[0] / (v * n)
                        } else {
                            gy[0] / ((T::one() - v) * n)
                        }
                    })
                    .collect();
                out.push((*p, g));
            }
        }
        out
    }
}

fn sigmoid<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
