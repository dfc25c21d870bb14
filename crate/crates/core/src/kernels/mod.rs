//! Closed-form NNGP and NTK kernels of infinitely wide ReLU networks in NTK
//! parameterization.
//!
//! Three families are supported: fully-connected stacks (`FC`), convolution
//! towers with a flattened dense readout (`ConvVec`) and convolution towers
//! with 2×2 average pooling after every layer (`ConvNet`). Every weight layer,
//! including the first and the readout, carries variance `σ_w²` and bias
//! variance `σ_b²`. `depth` counts ReLU layers, so `FC3` has three hidden
//! layers and four weight layers.

mod layout;
mod recursion;

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::images::ImageSet;

pub(crate) use layout::box_filter;
pub(crate) use recursion::{forward, Diags, Plan, SelfState, Tape};

pub use crate::images::Preprocessing;

/// Correlations are clamped to `[-1, 1]` for evaluation; inputs further than
/// this outside the interval indicate a corrupted recursion.
pub const CORRELATION_SLACK: f64 = 1e-6;
/// Beyond `|c| > 1 - CLAMP_EPS` the derivative through the correlation is
/// taken to be zero, keeping gradients off the arccos branch point.
pub const CLAMP_EPS: f64 = 1e-7;
/// Variances at or below this are treated as zero.
pub const ZERO_VARIANCE: f64 = 1e-30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Fc,
    ConvVec,
    ConvNet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Nngp,
    Ntk,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: Family,
    pub depth: usize,
    pub weight_variance: f64,
    pub bias_variance: f64,
    pub kind: KernelKind,
    pub filter_size: usize,
}

impl KernelSpec {
    pub fn new(family: Family, depth: usize, kind: KernelKind) -> Self {
        KernelSpec {
            family,
            depth,
            weight_variance: 2.0,
            bias_variance: 0.0,
            kind,
            filter_size: if family == Family::Fc { 1 } else { 3 },
        }
    }

    pub fn fc(depth: usize) -> Self {
        Self::new(Family::Fc, depth, KernelKind::Ntk)
    }

    pub fn conv_vec(depth: usize) -> Self {
        Self::new(Family::ConvVec, depth, KernelKind::Ntk)
    }

    pub fn convnet(depth: usize) -> Self {
        Self::new(Family::ConvNet, depth, KernelKind::Ntk)
    }

    pub fn with_kind(mut self, kind: KernelKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn nngp(self) -> Self {
        self.with_kind(KernelKind::Nngp)
    }

    pub fn ntk(self) -> Self {
        self.with_kind(KernelKind::Ntk)
    }

    pub fn with_variances(mut self, weight: f64, bias: f64) -> Self {
        self.weight_variance = weight;
        self.bias_variance = bias;
        self
    }

    pub fn with_filter(mut self, filter_size: usize) -> Self {
        self.filter_size = filter_size;
        self
    }

    /// Whether a 2×2 stride-2 average pool follows every ReLU.
    pub fn pooled(&self) -> bool {
        self.family == Family::ConvNet
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::InvalidSpec("depth must be at least 1".into()));
        }
        if self.filter_size == 0 || self.filter_size % 2 == 0 {
            return Err(Error::InvalidSpec(format!(
                "filter size must be odd and positive, got {}",
                self.filter_size
            )));
        }
        if !(self.weight_variance > 0.0) || !self.weight_variance.is_finite() {
            return Err(Error::InvalidSpec("weight variance must be positive".into()));
        }
        if !(self.bias_variance >= 0.0) || !self.bias_variance.is_finite() {
            return Err(Error::InvalidSpec("bias variance must be nonnegative".into()));
        }
        Ok(())
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let family = match self.family {
            Family::Fc => "fc",
            Family::ConvVec => "convvec",
            Family::ConvNet => "convnet",
        };
        let kind = match self.kind {
            KernelKind::Nngp => "nngp",
            KernelKind::Ntk => "ntk",
        };
        write!(f, "{family}{}-{kind}", self.depth)
    }
}

impl FromStr for KernelSpec {
    type Err = Error;

    /// Parses names such as `fc3`, `convnet3-nngp` or `convvec2-ntk`.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let (arch, kind) = match lower.split_once('-') {
            Some((a, "ntk")) => (a.to_string(), KernelKind::Ntk),
            Some((a, "nngp")) => (a.to_string(), KernelKind::Nngp),
            Some(_) => return Err(Error::Config(format!("unknown kernel kind in {s:?}"))),
            None => (lower.clone(), KernelKind::Ntk),
        };
        let split = arch.find(|c: char| c.is_ascii_digit()).unwrap_or(arch.len());
        let (name, digits) = arch.split_at(split);
        let family = match name {
            "fc" => Family::Fc,
            "convvec" | "conv-vec" => Family::ConvVec,
            "convnet" | "conv" => Family::ConvNet,
            _ => return Err(Error::Config(format!("unknown architecture {s:?}"))),
        };
        let depth = if digits.is_empty() {
            3
        } else {
            digits
                .parse()
                .map_err(|_| Error::Config(format!("bad depth in {s:?}")))?
        };
        let spec = KernelSpec::new(family, depth, kind);
        spec.validate()?;
        Ok(spec)
    }
}

fn check_correlation(c: f64) -> Result<f64> {
    if !c.is_finite() || c.abs() > 1.0 + CORRELATION_SLACK {
        return Err(Error::DomainError(c));
    }
    Ok(c.clamp(-1.0, 1.0))
}

#[inline]
pub(crate) fn kappa0(c: f64) -> f64 {
    (std::f64::consts::PI - c.acos()) * std::f64::consts::FRAC_1_PI
}

/// `(κ0(c), κ1(c))` sharing one `acos`.
#[inline]
pub(crate) fn kappas(c: f64) -> (f64, f64) {
    let k0 = (std::f64::consts::PI - c.acos()) * std::f64::consts::FRAC_1_PI;
    (k0, (1.0 - c * c).max(0.0).sqrt() * std::f64::consts::FRAC_1_PI + k0 * c)
}

#[inline]
pub(crate) fn kappa1(c: f64) -> f64 {
    ((1.0 - c * c).max(0.0).sqrt() + (std::f64::consts::PI - c.acos()) * c) * std::f64::consts::FRAC_1_PI
}

/// `dκ0/dc`, zero beyond the clamp boundary.
#[inline]
pub(crate) fn kappa0_prime(c: f64) -> f64 {
    if c.abs() > 1.0 - CLAMP_EPS {
        0.0
    } else {
        std::f64::consts::FRAC_1_PI / (1.0 - c * c).sqrt()
    }
}

/// `dκ1/dc = κ0(c)`, zero beyond the clamp boundary.
#[inline]
pub(crate) fn kappa1_prime(c: f64) -> f64 {
    if c.abs() > 1.0 - CLAMP_EPS {
        0.0
    } else {
        kappa0(c)
    }
}

/// Arc-cosine kernel of order 0, `(π − arccos c)/π`: the normalized
/// covariance of ReLU derivatives.
pub fn arccos_k0(c: f64) -> Result<f64> {
    check_correlation(c).map(kappa0)
}

/// Arc-cosine kernel of order 1, `(√(1−c²) + (π − arccos c)·c)/π`: the
/// normalized covariance of ReLU outputs.
pub fn arccos_k1(c: f64) -> Result<f64> {
    check_correlation(c).map(kappa1)
}

/// FC recursion from layer-0 second moments `x·y/d`, `x·x/d`, `y·y/d`.
/// Returns `(nngp, ntk)`.
pub(crate) fn fc_from_moments(gxy: f64, gxx: f64, gyy: f64, spec: &KernelSpec) -> Result<(f64, f64)> {
    let (sw, sb) = (spec.weight_variance, spec.bias_variance);
    let mut sxy = sw * gxy + sb;
    let mut sxx = sw * gxx + sb;
    let mut syy = sw * gyy + sb;
    let mut theta = sxy;
    for layer in 0..spec.depth {
        if sxx <= ZERO_VARIANCE || syy <= ZERO_VARIANCE {
            return Err(Error::ZeroNormInput { layer });
        }
        let s = (sxx * syy).sqrt();
        let c = check_correlation(sxy / s)?;
        let k = s * kappa1(c);
        let kdot = kappa0(c);
        theta = sw * (k + kdot * theta) + sb;
        sxy = sw * k + sb;
        // self pairs sit at c = 1, where κ1 = 1
        sxx = sw * sxx + sb;
        syy = sw * syy + sb;
    }
    Ok((sxy, theta))
}

pub(crate) fn pick(spec: &KernelSpec, (nngp, ntk): (f64, f64)) -> f64 {
    match spec.kind {
        KernelKind::Nngp => nngp,
        KernelKind::Ntk => ntk,
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fully-connected kernel between two vectors.
pub fn kernel_fc(x: &[f64], y: &[f64], spec: &KernelSpec) -> Result<f64> {
    spec.validate()?;
    if spec.family != Family::Fc {
        return Err(Error::InvalidSpec(format!("kernel_fc called with {spec}")));
    }
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "vectors of length {} and {}",
            x.len(),
            y.len()
        )));
    }
    let d = x.len() as f64;
    let out = fc_from_moments(dot(x, y) / d, dot(x, x) / d, dot(y, y) / d, spec)?;
    Ok(pick(spec, out))
}

/// Convolutional kernel between two images of shape `(h, w, c)`.
pub fn kernel_conv(x: &[f64], y: &[f64], shape: (usize, usize, usize), spec: &KernelSpec) -> Result<f64> {
    if spec.family == Family::Fc {
        return Err(Error::InvalidSpec("kernel_conv needs a convolutional family".into()));
    }
    let (h, w, c) = shape;
    if x.len() != h * w * c || y.len() != h * w * c {
        return Err(Error::ShapeMismatch(format!(
            "images of length {} and {} for shape {h}x{w}x{c}",
            x.len(),
            y.len()
        )));
    }
    let plan = Plan::new(spec, shape)?;
    let sx = plan.self_state(x)?;
    let sy = plan.self_state(y)?;
    let out = forward(&plan, x, y, Diags::Cross(&sx, &sy), None)?;
    Ok(pick(spec, (out.nngp, out.ntk)))
}

pub(crate) fn check_compatible(x: &ImageSet, y: &ImageSet) -> Result<()> {
    if !x.same_shape(y) {
        return Err(Error::ShapeMismatch(format!(
            "image shapes {:?} and {:?} differ",
            x.shape(),
            y.shape()
        )));
    }
    Ok(())
}

/// Per-image self-covariance diagonals, reusable across many kernel matrix
/// evaluations against the same images.
pub struct Prepared {
    pub(crate) plan: Option<Plan>,
    pub(crate) spec: KernelSpec,
    pub(crate) states: Vec<SelfState>,
    pub(crate) fc_norms: Vec<f64>,
}

impl Prepared {
    pub fn new(x: &ImageSet, spec: &KernelSpec) -> Result<Self> {
        spec.validate()?;
        if spec.family == Family::Fc {
            let d = x.image_len() as f64;
            let fc_norms = x.iter().map(|v| dot(v, v) / d).collect();
            return Ok(Prepared {
                plan: None,
                spec: *spec,
                states: Vec::new(),
                fc_norms,
            });
        }
        let plan = Plan::new(spec, x.shape())?;
        let states = (0..x.len())
            .into_par_iter()
            .map(|i| plan.self_state(x.image(i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Prepared {
            plan: Some(plan),
            spec: *spec,
            states,
            fc_norms: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.states.len().max(self.fc_norms.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Kernel value of image `i` with itself.
    pub fn self_value(&self, i: usize) -> f64 {
        match &self.plan {
            Some(_) => pick(&self.spec, (self.states[i].nngp, self.states[i].ntk)),
            None => {
                let n = self.fc_norms[i];
                pick(&self.spec, fc_from_moments(n, n, n, &self.spec).unwrap_or((0.0, 0.0)))
            }
        }
    }
}

/// Kernel matrix between image sets with precomputed self states.
pub fn kernel_matrix_prepared(x: &ImageSet, px: &Prepared, y: &ImageSet, py: &Prepared) -> Result<DMatrix<f64>> {
    check_compatible(x, y)?;
    let spec = px.spec;
    let (n, m) = (x.len(), y.len());
    if spec.family == Family::Fc {
        let d = x.image_len();
        let xm = DMatrix::from_row_slice(n, d, x.pixels());
        let ym = DMatrix::from_row_slice(m, d, y.pixels());
        let gram = xm * ym.transpose() / d as f64;
        let mut out = DMatrix::zeros(n, m);
        for i in 0..n {
            for j in 0..m {
                out[(i, j)] = pick(
                    &spec,
                    fc_from_moments(gram[(i, j)], px.fc_norms[i], py.fc_norms[j], &spec)?,
                );
            }
        }
        return Ok(out);
    }
    let plan = px.plan.as_ref().expect("conv plan");
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..m)
                .map(|j| {
                    let out = forward(
                        plan,
                        x.image(i),
                        y.image(j),
                        Diags::Cross(&px.states[i], &py.states[j]),
                        None,
                    )?;
                    Ok(pick(&spec, (out.nngp, out.ntk)))
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

/// `|X| × |Y|` kernel matrix.
pub fn kernel_matrix(x: &ImageSet, y: &ImageSet, spec: &KernelSpec) -> Result<DMatrix<f64>> {
    check_compatible(x, y)?;
    let px = Prepared::new(x, spec)?;
    if std::ptr::eq(x, y) {
        return kernel_matrix_prepared(x, &px, y, &px);
    }
    let py = Prepared::new(y, spec)?;
    kernel_matrix_prepared(x, &px, y, &py)
}
