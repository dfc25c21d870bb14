//! Finite-width networks used as oracles for the infinite-width kernels,
//! and a small trainer for transferring distilled supports to real nets.
//!
//! Oracle networks use NTK parameterization: a dense layer computes
//! `√(σ_w²/n_in)·W a + σ_b·b` with standard normal `W`, `b`, and a conv
//! layer scales by `√(σ_w²/(f²·C_in))` with zero padding. The scalar head
//! is a dense layer over the flattened last activations, whose weights are
//! averaged out exactly: `E_v[f(x)f(y)] = σ_w²/n·⟨φ(x), φ(y)⟩ + σ_b²`.
//!
//! The nonlinearity is `√2·max(0, u)`, whose output and derivative
//! covariances are exactly the normalized arc-cosine kernels κ1 and κ0.

use std::f64::consts::SQRT_2;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::distill::SupportSet;
use crate::error::{Error, Result};
use crate::images::{Dataset, ImageSet};
use crate::kernels::{Family, KernelSpec};
use crate::krr::LabelMatrix;
use crate::linalg::{eigh, SymMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    /// `√2·max(0, u)`.
    Relu,
    Linear,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => SQRT_2 * v.max(0.0),
            Activation::Linear => v,
        }
    }
}

/// Monte-Carlo mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
}

fn summarize(values: &[f64]) -> McEstimate {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    McEstimate {
        mean,
        stderr: (var / n).sqrt(),
    }
}

fn sample_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn check_mc(width: usize, samples: usize) -> Result<()> {
    if width < 16 || samples < 10 {
        return Err(Error::Config(format!(
            "Monte-Carlo needs width ≥ 16 and samples ≥ 10, got {width} and {samples}"
        )));
    }
    Ok(())
}

/// Monte-Carlo NNGP of a random ReLU network of the given family, with
/// `width` units (or channels) per hidden layer. Sample `s` draws from
/// stream `s` of the seeded generator.
pub fn mc_nngp(
    x: &[f64],
    y: &[f64],
    shape: (usize, usize, usize),
    spec: &KernelSpec,
    width: usize,
    samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    spec.validate()?;
    let d = shape.0 * shape.1 * shape.2;
    if x.len() != d || y.len() != d {
        return Err(Error::ShapeMismatch(format!("inputs of length {} and {} for shape {shape:?}", x.len(), y.len())));
    }
    match spec.family {
        Family::Fc => mc_nngp_fc(x, y, spec, Activation::Relu, width, samples, seed),
        _ => mc_nngp_conv(x, y, shape, spec, width, samples, seed),
    }
}

/// FC Monte-Carlo NNGP by exact layerwise sampling: given the previous
/// activations of both inputs, each unit's pair of pre-activations is an
/// independent bivariate normal, so a layer costs `O(width)`.
pub fn mc_nngp_fc(
    x: &[f64],
    y: &[f64],
    spec: &KernelSpec,
    activation: Activation,
    width: usize,
    samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    check_mc(width, samples)?;
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::ShapeMismatch("inputs differ in length".into()));
    }
    let (sw, sb) = (spec.weight_variance, spec.bias_variance);
    let d = x.len() as f64;
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    let first = (dot(x, x) / d, dot(x, y) / d, dot(y, y) / d);
    let values: Vec<f64> = (0..samples)
        .into_par_iter()
        .map(|s| {
            let mut rng = sample_rng(seed, s as u64);
            let (mut gxx, mut gxy, mut gyy) = first;
            let mut ax = vec![0.0; width];
            let mut ay = vec![0.0; width];
            for _ in 0..spec.depth {
                let (cxx, cxy, cyy) = (sw * gxx + sb, sw * gxy + sb, sw * gyy + sb);
                // Cholesky of [[cxx, cxy], [cxy, cyy]], tolerating rank one
                let l11 = cxx.max(0.0).sqrt();
                let l21 = if l11 > 0.0 { cxy / l11 } else { 0.0 };
                let l22 = (cyy - l21 * l21).max(0.0).sqrt();
                for j in 0..width {
                    let (z1, z2) = (normal(&mut rng), normal(&mut rng));
                    ax[j] = activation.apply(l11 * z1);
                    ay[j] = activation.apply(l21 * z1 + l22 * z2);
                }
                let n = width as f64;
                gxx = dot(&ax, &ax) / n;
                gxy = dot(&ax, &ay) / n;
                gyy = dot(&ay, &ay) / n;
            }
            sw * gxy + sb
        })
        .collect();
    Ok(summarize(&values))
}

/// Zero-padded `f × f` convolution of an `h × w × c_in` map with weights
/// `(f²·c_in) × c_out`, via an im2col product.
fn conv(input: &[f64], h: usize, w: usize, c_in: usize, f: usize, weights: &DMatrix<f64>) -> DMatrix<f64> {
    let r = (f / 2) as isize;
    let k = f * f * c_in;
    let mut cols = DMatrix::zeros(h * w, k);
    for i in 0..h as isize {
        for j in 0..w as isize {
            let p = (i * w as isize + j) as usize;
            for a in -r..=r {
                for b in -r..=r {
                    let (qi, qj) = (i + a, j + b);
                    if qi < 0 || qj < 0 || qi >= h as isize || qj >= w as isize {
                        continue;
                    }
                    let q = (qi * w as isize + qj) as usize;
                    let off = (((a + r) * f as isize + (b + r)) as usize) * c_in;
                    for c in 0..c_in {
                        cols[(p, off + c)] = input[q * c_in + c];
                    }
                }
            }
        }
    }
    cols * weights
}

/// 2×2 stride-2 average pool, dropping a trailing odd row or column.
fn avg_pool(m: &DMatrix<f64>, h: usize, w: usize) -> (DMatrix<f64>, usize, usize) {
    let (ho, wo) = (h / 2, w / 2);
    let c = m.ncols();
    let mut out = DMatrix::zeros(ho * wo, c);
    for i in 0..ho {
        for j in 0..wo {
            for ch in 0..c {
                let mut s = 0.0;
                for (a, b) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    s += m[((2 * i + a) * w + 2 * j + b, ch)];
                }
                out[(i * wo + j, ch)] = 0.25 * s;
            }
        }
    }
    (out, ho, wo)
}

/// Conv Monte-Carlo NNGP by sampling filters with `width` channels.
pub fn mc_nngp_conv(
    x: &[f64],
    y: &[f64],
    shape: (usize, usize, usize),
    spec: &KernelSpec,
    width: usize,
    samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    check_mc(width, samples)?;
    let (sw, sb) = (spec.weight_variance, spec.bias_variance);
    let f = spec.filter_size;
    let pooled = spec.pooled();
    {
        let (mut h, mut w) = (shape.0, shape.1);
        for _ in 0..spec.depth {
            if pooled {
                h /= 2;
                w /= 2;
            }
        }
        if h == 0 || w == 0 {
            return Err(Error::InvalidSpec(format!("{shape:?} input is too small for {} pooling stages", spec.depth)));
        }
    }
    let values: Vec<f64> = (0..samples)
        .into_par_iter()
        .map(|s| {
            let mut rng = sample_rng(seed, s as u64);
            let (mut h, mut w, mut c) = shape;
            let mut ax = DMatrix::from_row_slice(h * w, c, x);
            let mut ay = DMatrix::from_row_slice(h * w, c, y);
            for _ in 0..spec.depth {
                let scale = (sw / (f * f * c) as f64).sqrt();
                let weights = DMatrix::from_fn(f * f * c, width, |_, _| scale * normal(&mut rng));
                let bias: Vec<f64> = (0..width).map(|_| sb.sqrt() * normal(&mut rng)).collect();
                let layer = |a: &DMatrix<f64>| {
                    let flat: Vec<f64> = a.transpose().as_slice().to_vec();
                    let mut z = conv(&flat, h, w, c, f, &weights);
                    for (j, mut col) in z.column_iter_mut().enumerate() {
                        col.apply(|v| *v = SQRT_2 * (*v + bias[j]).max(0.0));
                    }
                    z
                };
                let (zx, zy) = (layer(&ax), layer(&ay));
                c = width;
                if pooled {
                    let (px, ho, wo) = avg_pool(&zx, h, w);
                    ax = px;
                    ay = avg_pool(&zy, h, w).0;
                    h = ho;
                    w = wo;
                } else {
                    ax = zx;
                    ay = zy;
                }
            }
            let n = (h * w * c) as f64;
            sw * ax.dot(&ay) / n + sb
        })
        .collect();
    Ok(summarize(&values))
}

/// How a finite network scales its weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Parameterization {
    /// `√(σ_w²/n_in)·W a + σ_b·b` with unit-variance parameters.
    Ntk,
    /// `W a + b` with `W ~ N(0, σ_w²/n_in)` and `b ~ N(0, σ_b²)`.
    Standard,
}

/// A fully connected `√2·ReLU` network with `depth` hidden layers.
#[derive(Clone, Debug, PartialEq)]
pub struct FcNet {
    pub param: Parameterization,
    pub weight_variance: f64,
    pub bias_variance: f64,
    /// `n_out × n_in` per layer, readout last.
    pub weights: Vec<DMatrix<f64>>,
    pub biases: Vec<DVector<f64>>,
}

struct Cache {
    /// Input of each layer, one column per example.
    inputs: Vec<DMatrix<f64>>,
    /// Pre-activations of each hidden layer.
    pre: Vec<DMatrix<f64>>,
    out: DMatrix<f64>,
}

impl FcNet {
    pub fn init(
        input_dim: usize,
        width: usize,
        depth: usize,
        outputs: usize,
        spec: &KernelSpec,
        param: Parameterization,
        seed: u64,
    ) -> Self {
        let mut dims = vec![input_dim];
        dims.extend(std::iter::repeat_n(width, depth));
        dims.push(outputs);
        let (sw, sb) = (spec.weight_variance, spec.bias_variance);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..dims.len() - 1 {
            let mut rng = sample_rng(seed, l as u64);
            let (ws, bs) = match param {
                Parameterization::Ntk => (1.0, 1.0),
                Parameterization::Standard => ((sw / dims[l] as f64).sqrt(), sb.sqrt()),
            };
            weights.push(DMatrix::from_fn(dims[l + 1], dims[l], |_, _| ws * normal(&mut rng)));
            biases.push(DVector::from_fn(dims[l + 1], |_, _| bs * normal(&mut rng)));
        }
        FcNet {
            param,
            weight_variance: sw,
            bias_variance: sb,
            weights,
            biases,
        }
    }

    /// Forward multipliers of layer `l`'s weights and bias.
    fn mults(&self, l: usize) -> (f64, f64) {
        match self.param {
            Parameterization::Ntk => (
                (self.weight_variance / self.weights[l].ncols() as f64).sqrt(),
                self.bias_variance.sqrt(),
            ),
            Parameterization::Standard => (1.0, 1.0),
        }
    }

    fn forward_cached(&self, x: &DMatrix<f64>) -> Cache {
        let last = self.weights.len() - 1;
        let mut inputs = vec![x.clone()];
        let mut pre = Vec::new();
        for l in 0..=last {
            let (wm, bm) = self.mults(l);
            let mut h = &self.weights[l] * &inputs[l] * wm;
            for mut col in h.column_iter_mut() {
                col.axpy(bm, &self.biases[l], 1.0);
            }
            if l == last {
                return Cache { inputs, pre, out: h };
            }
            inputs.push(h.map(|v| SQRT_2 * v.max(0.0)));
            pre.push(h);
        }
        unreachable!()
    }

    /// Outputs for the columns of `x`.
    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.forward_cached(x).out
    }

    /// Cotangents on every layer's output for output cotangent `d_out`.
    fn deltas(&self, cache: &Cache, d_out: DMatrix<f64>) -> Vec<DMatrix<f64>> {
        let layers = self.weights.len();
        let mut out = vec![DMatrix::zeros(0, 0); layers];
        let mut delta = d_out;
        for l in (0..layers).rev() {
            if l > 0 {
                let (wm, _) = self.mults(l);
                let mut prev = self.weights[l].transpose() * &delta * wm;
                prev.zip_apply(&cache.pre[l - 1], |g, h| *g = if h > 0.0 { SQRT_2 * *g } else { 0.0 });
                out[l] = delta;
                delta = prev;
            } else {
                out[l] = delta.clone();
            }
        }
        out
    }

    /// Empirical NTK of output `k` between all pairs of columns of `x`:
    /// `Σ_l (Δ_lᵀΔ_l) ∘ (w_l² A_lᵀA_l + b_l²)`.
    pub fn ntk_gram(&self, x: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
        let cache = self.forward_cached(x);
        let n = x.ncols();
        let outputs = self.weights.last().expect("readout").nrows();
        let d_out = DMatrix::from_fn(outputs, n, |r, _| if r == k { 1.0 } else { 0.0 });
        let deltas = self.deltas(&cache, d_out);
        let mut gram = DMatrix::zeros(n, n);
        for (l, delta) in deltas.iter().enumerate() {
            let (wm, bm) = self.mults(l);
            let dd = delta.transpose() * delta;
            let aa = cache.inputs[l].transpose() * &cache.inputs[l];
            gram += dd.component_mul(&aa.map(|v| wm * wm * v + bm * bm));
        }
        gram
    }

    /// MSE loss `½/B·‖f − Y‖²` with its parameter gradients.
    fn loss_grad(&self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> (f64, Vec<DMatrix<f64>>, Vec<DVector<f64>>) {
        let cache = self.forward_cached(x);
        let b = x.ncols() as f64;
        let resid = &cache.out - y;
        let loss = 0.5 * resid.norm_squared() / b;
        let deltas = self.deltas(&cache, resid / b);
        let mut gw = Vec::with_capacity(deltas.len());
        let mut gb = Vec::with_capacity(deltas.len());
        for (l, delta) in deltas.iter().enumerate() {
            let (wm, bm) = self.mults(l);
            gw.push(delta * cache.inputs[l].transpose() * wm);
            gb.push(delta.column_sum() * bm);
        }
        (loss, gw, gb)
    }
}

/// Images as columns.
fn columns(x: &ImageSet) -> DMatrix<f64> {
    DMatrix::from_column_slice(x.image_len(), x.len(), x.pixels())
}

fn check_fc(spec: &KernelSpec) -> Result<()> {
    spec.validate()?;
    if spec.family != Family::Fc {
        return Err(Error::InvalidSpec("finite networks are fully connected only".into()));
    }
    Ok(())
}

/// Empirical NTK Gram matrix of one random width-`width` network.
pub fn empirical_ntk_gram(x: &ImageSet, spec: &KernelSpec, width: usize, seed: u64) -> Result<SymMatrix> {
    check_fc(spec)?;
    let net = FcNet::init(x.image_len(), width, spec.depth, 1, spec, Parameterization::Ntk, seed);
    Ok(SymMatrix::symmetrized(net.ntk_gram(&columns(x), 0)))
}

/// `Σ_j ∂_j f(x) ∂_j f(y)` over every parameter of one random network.
pub fn empirical_ntk(x: &[f64], y: &[f64], spec: &KernelSpec, width: usize, seed: u64) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::ShapeMismatch("inputs differ in length".into()));
    }
    let pair = ImageSet::from_vectors(&[x.to_vec(), y.to_vec()])?;
    Ok(empirical_ntk_gram(&pair, spec, width, seed)?[(0, 1)])
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub width: usize,
    pub epochs: usize,
    /// `η₀ = lr_factor · η_critical`.
    pub lr_factor: f64,
    pub momentum: f64,
    pub param: Parameterization,
    /// Supports up to this size train full-batch.
    pub batch_size: usize,
    /// Share of the eval set held out for checkpoint selection.
    pub val_fraction: f64,
    /// Train `f − f₀`, subtracting the network at initialization so the
    /// prediction does not carry the random initial function.
    pub center: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            width: 1024,
            epochs: 200,
            lr_factor: 0.5,
            momentum: 0.9,
            param: Parameterization::Standard,
            batch_size: 100,
            val_fraction: 0.1,
            center: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Test accuracy at the epoch with the best validation accuracy.
    pub accuracy: f64,
    pub val_accuracy: f64,
    pub best_epoch: usize,
    pub eta_critical: f64,
    pub final_loss: f64,
}

/// Accuracy of `net(x) − offset`.
fn net_accuracy(net: &FcNet, x: &DMatrix<f64>, offset: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Ok(0.0);
    }
    let out = net.forward(x) - offset;
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged("network outputs are not finite".into()));
    }
    let pred = LabelMatrix::from_matrix(out.transpose())?;
    Ok(crate::krr::accuracy(&pred, labels))
}

/// Trains a finite FC net on the support with MSE, momentum and cosine
/// learning-rate decay `η(t) = η₀(1 + cos(πt/T))/2`.
pub fn train_finite(support: &SupportSet, spec: &KernelSpec, cfg: &TrainConfig, eval: &Dataset) -> Result<TrainReport> {
    check_fc(spec)?;
    if support.is_empty() || cfg.width == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("training needs a support, a width and a batch size".into()));
    }
    if !(0.0..1.0).contains(&cfg.val_fraction) || !(cfg.lr_factor > 0.0) || !(0.0..1.0).contains(&cfg.momentum) {
        return Err(Error::Config("bad validation fraction, learning-rate factor or momentum".into()));
    }
    let xs = columns(&support.images);
    let n = support.len();
    let outputs = support.labels.classes();
    let mut net = FcNet::init(xs.nrows(), cfg.width, spec.depth, outputs, spec, cfg.param, cfg.seed);
    let offset = |x: &DMatrix<f64>| {
        if cfg.center {
            net.forward(x)
        } else {
            DMatrix::zeros(outputs, x.ncols())
        }
    };

    let n_val = if eval.len() >= 2 {
        ((cfg.val_fraction * eval.len() as f64).round() as usize).clamp(1, eval.len() - 1)
    } else {
        0
    };
    let xe = columns(&eval.images);
    let x_val = xe.columns(0, n_val).into_owned();
    let x_test = xe.columns(n_val, eval.len() - n_val).into_owned();
    let (l_val, l_test) = eval.labels.split_at(n_val);
    let (o_val, o_test) = (offset(&x_val), offset(&x_test));
    let ys = support.labels.values().transpose() + offset(&xs);

    let probe = n.min(64);
    let gram = net.ntk_gram(&xs.columns(0, probe).into_owned(), 0);
    let (vals, _) = eigh(&SymMatrix::symmetrized(gram))?;
    let top = vals.max();
    if !(top > 0.0) {
        return Err(Error::Diverged("empirical NTK has no positive eigenvalue".into()));
    }
    // the loss averages over the batch, so the Gram is scaled by 1/probe
    let eta_critical = 2.0 * probe as f64 / top;
    let eta0 = cfg.lr_factor * eta_critical;

    let batch = cfg.batch_size.min(n);
    let steps_per_epoch = n.div_ceil(batch);
    let total = (cfg.epochs * steps_per_epoch).max(1) as f64;
    let mut vel_w: Vec<DMatrix<f64>> = net.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect();
    let mut vel_b: Vec<DVector<f64>> = net.biases.iter().map(|b| DVector::zeros(b.len())).collect();
    let mut rng = sample_rng(cfg.seed, u64::MAX);
    let mut order: Vec<usize> = (0..n).collect();

    let score = |net: &FcNet| -> Result<(f64, f64)> {
        let val = net_accuracy(net, &x_val, &o_val, l_val)?;
        Ok((val, net_accuracy(net, &x_test, &o_test, l_test)?))
    };
    let (v0, t0) = score(&net)?;
    let mut best = (v0, t0, 0usize);
    let mut step = 0usize;
    let mut final_loss = f64::NAN;
    for epoch in 1..=cfg.epochs {
        if batch < n {
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(batch) {
            let (loss, gw, gb) = if batch == n {
                net.loss_grad(&xs, &ys)
            } else {
                net.loss_grad(&xs.select_columns(chunk), &ys.select_columns(chunk))
            };
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("loss {loss} at epoch {epoch}")));
            }
            epoch_loss += loss * chunk.len() as f64 / n as f64;
            let eta = eta0 * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total).cos());
            for l in 0..net.weights.len() {
                vel_w[l] *= cfg.momentum;
                vel_w[l] += &gw[l];
                net.weights[l] -= &vel_w[l] * eta;
                vel_b[l] *= cfg.momentum;
                vel_b[l] += &gb[l];
                net.biases[l] -= &vel_b[l] * eta;
            }
            step += 1;
        }
        final_loss = epoch_loss;
        let (v, t) = score(&net)?;
        if v > best.0 {
            best = (v, t, epoch);
        }
    }
    Ok(TrainReport {
        accuracy: best.1,
        val_accuracy: best.0,
        best_epoch: best.2,
        eta_critical,
        final_loss,
    })
}

#[cfg(test)]
mod tests;
