//! Central finite-difference oracle for the autodiff ops.
//!
//! Every check builds a scalar loss `sum_i w_i * op(inputs)_i` with fixed random
//! weights `w`, compares the tape gradient of each input against
//! `(f(x + h) - f(x - h)) / 2h`, and reports the worst relative error.

use ocrm_core::autodiff::{Activation, BatchNormStats, BnMode, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Gradients smaller than this are compared in absolute terms.
const FLOOR: f64 = 1e-3;

pub type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Var;

fn eval(build: &Build, inputs: &[Tensor<f64>]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    g.value(out).item().expect("scalar loss")
}

/// Worst relative error between analytic and numeric gradients.
pub fn max_rel_error(build: &Build, inputs: &[Tensor<f64>]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    g.backward(out).expect("backward");
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = g
            .grad(*v)
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            let numeric = (eval(build, &plus) - eval(build, &minus)) / (2.0 * STEP);
            let a = analytic[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max(err);
        }
    }
    worst
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Uniform values with magnitude in `[margin, scale]`, random sign.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64, scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(margin..scale);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Loss head: random projection of `y` to a scalar.
fn head(g: &mut Graph<f64>, y: Var, w: &[f64]) -> Var {
    g.dot_const(y, w.to_vec()).unwrap()
}

pub struct OpCheck {
    pub name: &'static str,
    pub trials: usize,
    pub worst: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.worst < REL_TOL
    }
}

fn run(
    name: &'static str,
    trials: usize,
    seed: u64,
    mut trial: impl FnMut(&mut ChaCha8Rng) -> f64,
) -> OpCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let worst = (0..trials).map(|_| trial(&mut rng)).fold(0.0, f64::max);
    OpCheck {
        name,
        trials,
        worst,
    }
}

pub fn conv2d(trials: usize) -> OpCheck {
    run("conv2d", trials, 11, |rng| {
        let n = rng.random_range(1..=2);
        let c = rng.random_range(1..=2);
        let f = rng.random_range(1..=3);
        let k = if rng.random_bool(0.5) { 3 } else { 2 };
        let stride = rng.random_range(1..=2);
        let pad = rng.random_range(0..=1);
        let x = random_tensor(rng, &[n, c, 5, 5], 1.0);
        let w = random_tensor(rng, &[f, c, k, k], 1.0);
        let oh = (5 + 2 * pad - k) / stride + 1;
        let lw = weights(rng, n * f * oh * oh);
        let build = move |g: &mut Graph<f64>, v: &[Var]| {
            let y = g.conv2d(v[0], v[1], stride, pad).unwrap();
            head(g, y, &lw)
        };
        max_rel_error(&build, &[x, w])
    })
}

pub fn conv_transpose2d(trials: usize) -> OpCheck {
    run("conv_transpose2d", trials, 12, |rng| {
        let n = rng.random_range(1..=2);
        let cin = rng.random_range(1..=2);
        let cout = rng.random_range(1..=2);
        let k = 3;
        let stride = rng.random_range(1..=2);
        let pad = rng.random_range(0..=1);
        let op = if stride == 2 {
            rng.random_range(0..=1)
        } else {
            0
        };
        let h = rng.random_range(2..=4);
        let x = random_tensor(rng, &[n, cin, h, h], 1.0);
        let w = random_tensor(rng, &[cin, cout, k, k], 1.0);
        let oh = (h - 1) * stride + k + op - 2 * pad;
        let lw = weights(rng, n * cout * oh * oh);
        let build = move |g: &mut Graph<f64>, v: &[Var]| {
            let y = g.conv_transpose2d(v[0], v[1], stride, pad, op).unwrap();
            head(g, y, &lw)
        };
        max_rel_error(&build, &[x, w])
    })
}

pub fn linear(trials: usize) -> OpCheck {
    run("linear", trials, 13, |rng| {
        let n = rng.random_range(1..=4);
        let d = rng.random_range(1..=6);
        let m = rng.random_range(1..=5);
        let x = random_tensor(rng, &[n, d], 1.0);
        let w = random_tensor(rng, &[d, m], 1.0);
        let b = random_tensor(rng, &[m], 1.0);
        let lw = weights(rng, n * m);
        let build = move |g: &mut Graph<f64>, v: &[Var]| {
            let y = g.linear(v[0], v[1], Some(v[2])).unwrap();
            head(g, y, &lw)
        };
        max_rel_error(&build, &[x, w, b])
    })
}

pub fn activation(kind: Activation, name: &'static str, seed: u64, trials: usize) -> OpCheck {
    run(name, trials, seed, |rng| {
        // keep clear of the rectifier kink so the finite difference is one-sided-free
        let x = away_from_zero(rng, &[3, 4], 1e-2, 3.0);
        let lw = weights(rng, 12);
        let build = move |g: &mut Graph<f64>, v: &[Var]| {
            let y = g.activation(v[0], kind).unwrap();
            head(g, y, &lw)
        };
        max_rel_error(&build, &[x])
    })
}

pub fn batch_norm(mode: BnMode, trials: usize) -> OpCheck {
    let name = match mode {
        BnMode::Train => "batch_norm2d[train]",
        BnMode::Eval => "batch_norm2d[eval]",
    };
    run(name, trials, 14, |rng| {
        let n = rng.random_range(2..=3);
        let c = rng.random_range(1..=3);
        let x = random_tensor(rng, &[n, c, 2, 2], 2.0);
        let gamma = random_tensor(rng, &[c], 1.5);
        let beta = random_tensor(rng, &[c], 1.0);
        let mut stats = BatchNormStats::<f64>::new(c);
        for ch in 0..c {
            stats.mean[ch] = rng.random_range(-0.5..0.5);
            stats.var[ch] = rng.random_range(0.5..2.0);
        }
        let lw = weights(rng, n * c * 4);
        let build = move |g: &mut Graph<f64>, v: &[Var]| {
            let mut s = stats.clone();
            let y = g.batch_norm2d(v[0], v[1], v[2], &mut s, mode).unwrap();
            head(g, y, &lw)
        };
        max_rel_error(&build, &[x, gamma, beta])
    })
}

pub fn channel_bias(trials: usize) -> OpCheck {
    run("channel_bias", trials, 23, |rng| {
        let n = rng.random_range(1..=2);
        let c = rng.random_range(1..=3);
        let x = random_tensor(rng, &[n, c, 3, 2], 1.0);
        let b = random_tensor(rng, &[c], 1.0);
        let lw = weights(rng, n * c * 6);
        let build = move |g: &mut Graph<f64>, v: &[Var]| {
            let y = g.channel_bias(v[0], v[1]).unwrap();
            head(g, y, &lw)
        };
        max_rel_error(&build, &[x, b])
    })
}

pub fn row_mse(trials: usize) -> OpCheck {
    run("row_mse", trials, 15, |rng| {
        let n = rng.random_range(1..=3);
        let x = random_tensor(rng, &[n, 2, 3, 3], 1.0);
        let target = random_tensor(rng, &[n, 2, 3, 3], 1.0);
        let lw = weights(rng, n);
        let build = move |g: &mut Graph<f64>, v: &[Var]| {
            let e = g.row_mse(v[0], &target).unwrap();
            head(g, e, &lw)
        };
        max_rel_error(&build, &[x])
    })
}

/// Augmentation ops: repeat the error column and append it to the latent block.
pub fn augment(trials: usize) -> OpCheck {
    run("repeat_cols+concat_cols", trials, 16, |rng| {
        let n = rng.random_range(1..=3);
        let k = rng.random_range(1..=4);
        let z = random_tensor(rng, &[n, k], 1.0);
        let e = random_tensor(rng, &[n, 1], 1.0);
        let lw = weights(rng, n * 2 * k);
        let build = move |g: &mut Graph<f64>, v: &[Var]| {
            let r = g.repeat_cols(v[1], k).unwrap();
            let a = g.concat_cols(v[0], r).unwrap();
            head(g, a, &lw)
        };
        max_rel_error(&build, &[z, e])
    })
}

pub fn bce(trials: usize) -> OpCheck {
    run("bce", trials, 17, |rng| {
        let n = rng.random_range(1..=5);
        let data = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
        let p = Tensor::new(vec![n, 1], data).unwrap();
        let positive = rng.random_bool(0.5);
        let build = move |g: &mut Graph<f64>, v: &[Var]| g.bce(v[0], positive, 1e-7).unwrap();
        max_rel_error(&build, &[p])
    })
}

/// Scalar reductions and elementwise helpers chained together.
pub fn elementwise(trials: usize) -> OpCheck {
    run("reshape+scale+add+sum+mean", trials, 18, |rng| {
        let a = random_tensor(rng, &[2, 3], 1.0);
        let b = random_tensor(rng, &[2, 3], 1.0);
        let factor = rng.random_range(-2.0..2.0);
        let lw = weights(rng, 6);
        let build = move |g: &mut Graph<f64>, v: &[Var]| {
            let s = g.scale(v[0], factor).unwrap();
            let y = g.add(s, v[1]).unwrap();
            let r = g.reshape(y, &[3, 2]).unwrap();
            let h = head(g, r, &lw);
            let m = g.mean(r).unwrap();
            let t = g.sum(r).unwrap();
            let hm = g.add(h, m).unwrap();
            g.add(hm, t).unwrap()
        };
        max_rel_error(&build, &[a, b])
    })
}

/// conv -> relu -> linear composite. Trials whose pre-activations fall within
/// 1e-3 of the kink are redrawn; the count of redraws is returned alongside.
pub fn composite(trials: usize) -> (OpCheck, usize) {
    let mut redraws = 0;
    let check = run("conv2d->relu->linear", trials, 19, |rng| loop {
        let x = random_tensor(rng, &[2, 2, 5, 5], 1.0);
        let w = random_tensor(rng, &[3, 2, 3, 3], 0.5);
        let lw = random_tensor(rng, &[3 * 3 * 3, 4], 0.5);
        let lb = random_tensor(rng, &[4], 0.5);
        let near_kink = {
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let wv = g.input(w.clone());
            let y = g.conv2d(xv, wv, 2, 1).unwrap();
            g.value(y).data().iter().any(|v| v.abs() < 1e-3)
        };
        if near_kink {
            redraws += 1;
            continue;
        }
        let hw = weights(rng, 8);
        let build = move |g: &mut Graph<f64>, v: &[Var]| {
            let y = g.conv2d(v[0], v[1], 2, 1).unwrap();
            let y = g.activation(y, Activation::Relu).unwrap();
            let y = g.reshape(y, &[2, 27]).unwrap();
            let y = g.linear(y, v[2], Some(v[3])).unwrap();
            head(g, y, &hw)
        };
        break max_rel_error(&build, &[x, w, lw, lb]);
    });
    (check, redraws)
}

/// Every differentiable op at the given trial count.
pub fn all_ops(trials: usize) -> Vec<OpCheck> {
    vec![
        conv2d(trials),
        conv_transpose2d(trials),
        linear(trials),
        activation(Activation::Relu, "relu", 20, trials),
        activation(Activation::LEAKY, "leaky_relu(0.2)", 21, trials),
        activation(Activation::Sigmoid, "sigmoid", 22, trials),
        batch_norm(BnMode::Train, trials),
        batch_norm(BnMode::Eval, trials),
        channel_bias(trials),
        row_mse(trials),
        augment(trials),
        bce(trials),
        elementwise(trials),
        composite(trials).0,
    ]
}
