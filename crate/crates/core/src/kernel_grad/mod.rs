//! Reverse-mode gradients of kernel blocks and of the KRR loss.
//!
//! A kernel value `K(x, y)` depends on `x` through the cross-covariance maps
//! of the pair and through the per-layer variances of `x` alone. The block
//! VJP backpropagates each pair through its recorded forward pass, collects
//! the cotangents that land on each image's variances, and then pushes those
//! through one self-pair backward pass per image.

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::distill::SupportSet;
use crate::error::{Error, Result};
use crate::images::ImageSet;
use crate::kernels::{
    box_filter, check_compatible, forward, kappa0, kappa0_prime, kappa1, kappa1_prime, kappas,
    kernel_matrix, Diags, KernelKind, KernelSpec, Plan, Prepared, SelfState, Tape, ZERO_VARIANCE,
};
use crate::krr::{adaptive_lambda, LabelMatrix};
use crate::linalg::{solve_psd, SymMatrix};


/// Which image gradients a block VJP should produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sides {
    Both,
    X,
    Y,
}

impl Sides {
    fn x(self) -> bool {
        self != Sides::Y
    }

    fn y(self) -> bool {
        self != Sides::X
    }
}

/// Whether the loss gradient includes the dependence of the adaptive ridge on
/// the support images.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LambdaMode {
    #[default]
    Adaptive,
    Frozen,
}

/// `Σ_ij C[i,j] ∂K(x_i, y_j)/∂x` and the analogous gradient for `y`, each
/// flattened in the layout of the image set's pixels.
pub fn kernel_block_vjp(
    x: &ImageSet,
    y: &ImageSet,
    spec: &KernelSpec,
    cotangent: &DMatrix<f64>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    kernel_block_vjp_sides(x, y, spec, cotangent, Sides::Both)
}

/// [`kernel_block_vjp`] restricted to the requested sides; skipped sides come
/// back empty.
pub fn kernel_block_vjp_sides(
    x: &ImageSet,
    y: &ImageSet,
    spec: &KernelSpec,
    cotangent: &DMatrix<f64>,
    sides: Sides,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_compatible(x, y)?;
    if cotangent.nrows() != x.len() || cotangent.ncols() != y.len() {
        return Err(Error::ShapeMismatch(format!(
            "cotangent is {}x{} for a {}x{} block",
            cotangent.nrows(),
            cotangent.ncols(),
            x.len(),
            y.len()
        )));
    }
    if cotangent.iter().any(|v| !v.is_finite()) {
        return Err(Error::ShapeMismatch("cotangent has non-finite entries".into()));
    }
    let px = Prepared::new(x, spec)?;
    let (gx, gy) = if std::ptr::eq(x, y) {
        block_vjp(x, &px, y, &px, cotangent, sides)?
    } else {
        let py = Prepared::new(y, spec)?;
        block_vjp(x, &px, y, &py, cotangent, sides)?
    };
    if gx.iter().chain(&gy).any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    Ok((gx, gy))
}

fn block_vjp(
    x: &ImageSet,
    px: &Prepared,
    y: &ImageSet,
    py: &Prepared,
    ct: &DMatrix<f64>,
    sides: Sides,
) -> Result<(Vec<f64>, Vec<f64>)> {
    match &px.plan {
        None => Ok(fc_block_vjp(x, px, y, py, ct, sides)),
        Some(plan) => conv_block_vjp(plan, x, &px.states, y, &py.states, ct, sides),
    }
}

/// Backward of [`fc_from_moments`]: cotangents on `(gxy, gxx, gyy)` for a
/// unit cotangent on the selected kernel value.
pub(crate) fn fc_moments_backward(gxy: f64, gxx: f64, gyy: f64, spec: &KernelSpec) -> (f64, f64, f64) {
    let (sw, sb) = (spec.weight_variance, spec.bias_variance);
    struct Rec {
        sxx: f64,
        syy: f64,
        s: f64,
        c: f64,
        theta: f64,
    }
    let mut recs = Vec::with_capacity(spec.depth);
    let mut sxy = sw * gxy + sb;
    let mut sxx = sw * gxx + sb;
    let mut syy = sw * gyy + sb;
    let mut theta = sxy;
    for _ in 0..spec.depth {
        let s = (sxx * syy).sqrt();
        let c = if s > ZERO_VARIANCE { (sxy / s).clamp(-1.0, 1.0) } else { 0.0 };
        recs.push(Rec { sxx, syy, s, c, theta });
        let k = s * kappa1(c);
        theta = sw * (k + kappa0(c) * theta) + sb;
        sxy = sw * k + sb;
        sxx = sw * sxx + sb;
        syy = sw * syy + sb;
    }
    let (mut a_xy, mut a_th) = match spec.kind {
        KernelKind::Nngp => (1.0, 0.0),
        KernelKind::Ntk => (0.0, 1.0),
    };
    let (mut a_xx, mut a_yy) = (0.0, 0.0);
    for r in recs.iter().rev() {
        let gk = sw * (a_xy + a_th);
        let gkd = sw * a_th * r.theta;
        let g_theta = sw * a_th * kappa0(r.c);
        let (mut g_sxy, mut g_s) = (0.0, 0.0);
        if r.s > ZERO_VARIANCE {
            let k1p = kappa1_prime(r.c);
            let k0p = kappa0_prime(r.c);
            g_sxy = gk * k1p + gkd * k0p / r.s;
            g_s = gk * (kappa1(r.c) - r.c * k1p) - gkd * k0p * r.c / r.s;
        }
        let (g_sxx, g_syy) = if r.s > ZERO_VARIANCE {
            (g_s * r.syy / (2.0 * r.s), g_s * r.sxx / (2.0 * r.s))
        } else {
            (0.0, 0.0)
        };
        a_xx = sw * a_xx + g_sxx;
        a_yy = sw * a_yy + g_syy;
        a_xy = g_sxy;
        a_th = g_theta;
    }
    // the first layer's NTK equals its NNGP
    a_xy += a_th;
    (sw * a_xy, sw * a_xx, sw * a_yy)
}

fn fc_block_vjp(x: &ImageSet, px: &Prepared, y: &ImageSet, py: &Prepared, ct: &DMatrix<f64>, sides: Sides) -> (Vec<f64>, Vec<f64>) {
    let spec = px.spec;
    let (n, m, d) = (x.len(), y.len(), x.image_len());
    let xm = DMatrix::from_row_slice(n, d, x.pixels());
    let ym = DMatrix::from_row_slice(m, d, y.pixels());
    let gram = &xm * ym.transpose() / d as f64;
    let mut cross = DMatrix::zeros(n, m);
    let mut wx = vec![0.0; n];
    let mut wy = vec![0.0; m];
    for i in 0..n {
        for j in 0..m {
            let c = ct[(i, j)];
            if c == 0.0 {
                continue;
            }
            let (a, b, e) = fc_moments_backward(gram[(i, j)], px.fc_norms[i], py.fc_norms[j], &spec);
            cross[(i, j)] = c * a;
            wx[i] += c * b;
            wy[j] += c * e;
        }
    }
    let scale = 1.0 / d as f64;
    let flat = |m: DMatrix<f64>| -> Vec<f64> { m.transpose().as_slice().to_vec() };
    let gx = if sides.x() {
        let mut g = &cross * &ym * scale;
        for i in 0..n {
            let a = 2.0 * wx[i] * scale;
            for k in 0..d {
                g[(i, k)] += a * xm[(i, k)];
            }
        }
        flat(g)
    } else {
        Vec::new()
    };
    let gy = if sides.y() {
        let mut g = cross.transpose() * &xm * scale;
        for j in 0..m {
            let a = 2.0 * wy[j] * scale;
            for k in 0..d {
                g[(j, k)] += a * ym[(j, k)];
            }
        }
        flat(g)
    } else {
        Vec::new()
    };
    (gx, gy)
}

/// How a backward pass treats the per-layer variances.
enum Variances<'a> {
    /// Read from precomputed states; their cotangents are accumulated into
    /// `dx` and `dy`.
    Cross {
        sx: &'a SelfState,
        sy: &'a SelfState,
        dx: &'a mut [Vec<f64>],
        dy: &'a mut [Vec<f64>],
    },
    /// Read off the pair's own maps, with external cotangents `ext` on them.
    Own { ext: &'a [Vec<f64>] },
}

/// Backpropagates cotangent `g` on the pair's kernel value (NNGP or NTK per
/// the plan) through the forward pass recorded in `tape`, accumulating image
/// gradients into `gx` and `gy`.
fn backward(
    plan: &Plan,
    x: &[f64],
    y: &[f64],
    tape: &Tape,
    g: f64,
    mut vars: Variances<'_>,
    gx: &mut [f64],
    gy: &mut [f64],
) {
    let sw = plan.spec.weight_variance;
    let ntk = plan.ntk();
    let r = &plan.readout;
    let w = g * sw / r.pixels() as f64;
    let mut gk = vec![0.0; r.len()];
    let mut gt = if ntk { vec![0.0; r.len()] } else { Vec::new() };
    for p in 0..r.pixels() {
        gk[r.diag_index(p)] = w;
        if ntk {
            gt[r.diag_index(p)] = w;
        }
    }
    let scale = plan.pool_scale();
    let same = std::ptr::eq(x, y) || x == y;
    for l in (0..plan.layers.len()).rev() {
        let layout = &plan.layers[l];
        let sigma = &tape.sigma[l];
        let theta = &tape.theta[l];
        let own;
        let (rx, ry): (&[f64], &[f64]) = match &vars {
            Variances::Cross { sx, sy, .. } => (&sx.roots[l], &sy.roots[l]),
            Variances::Own { .. } => {
                own = tape.diags[l].iter().map(|v| v.sqrt()).collect::<Vec<f64>>();
                (&own, &own)
            }
        };
        let mut gsig = vec![0.0; layout.len()];
        let mut gth = if ntk { vec![0.0; layout.len()] } else { Vec::new() };
        let mut grx = vec![0.0; layout.pixels()];
        let mut gry = vec![0.0; layout.pixels()];
        for rt in &plan.routes[l] {
            let (p, q) = (rt.p as usize, rt.q as usize);
            let s = rx[p] * ry[q];
            if s <= ZERO_VARIANCE {
                continue;
            }
            let idx = rt.idx as usize;
            let dest = rt.dest as usize;
            let c = if same && rt.p == rt.q { 1.0 } else { (sigma[idx] / s).clamp(-1.0, 1.0) };
            let a = scale * gk[dest];
            let (k0, k1) = kappas(c);
            let k1p = kappa1_prime(c);
            let mut g_sig = a * k1p;
            let mut g_s = a * (k1 - c * k1p);
            if ntk {
                let b = scale * gt[dest];
                let k0p = kappa0_prime(c);
                let th = theta[idx];
                g_sig += b * th * k0p / s;
                g_s -= b * th * k0p * c / s;
                gth[idx] += b * k0;
            }
            gsig[idx] += g_sig;
            grx[p] += g_s * ry[q];
            gry[q] += g_s * rx[p];
        }
        // s = √σx·√σy, so d√σ/dσ = 1/(2√σ)
        let to_var = |gr: &mut [f64], roots: &[f64]| {
            for (g, &rt) in gr.iter_mut().zip(roots) {
                *g = if rt > 0.0 { *g / (2.0 * rt) } else { 0.0 };
            }
        };
        to_var(&mut grx, rx);
        to_var(&mut gry, ry);
        match &mut vars {
            Variances::Cross { dx, dy, .. } => {
                dx[l].iter_mut().zip(&grx).for_each(|(d, v)| *d += v);
                dy[l].iter_mut().zip(&gry).for_each(|(d, v)| *d += v);
            }
            Variances::Own { ext } => {
                for p in 0..layout.pixels() {
                    gsig[layout.diag_index(p)] += grx[p] + gry[p] + ext[l][p];
                }
            }
        }
        let mask = &plan.masks[l];
        let mut next_t = Vec::new();
        if ntk {
            gsig.iter_mut().zip(&gth).for_each(|(s, t)| *s += t);
            if l > 0 {
                next_t = vec![0.0; layout.len()];
                box_filter(layout, plan.filter, mask, &gth, &mut next_t);
                next_t.iter_mut().for_each(|v| *v *= sw);
            }
        }
        let mut next_k = vec![0.0; layout.len()];
        box_filter(layout, plan.filter, mask, &gsig, &mut next_k);
        next_k.iter_mut().for_each(|v| *v *= sw);
        gk = next_k;
        gt = next_t;
    }
    // input gram
    let c = plan.channels;
    let inv = 1.0 / c as f64;
    plan.layers[0].for_each_valid(|idx, p, q| {
        let gg = gk[idx] * inv;
        if gg == 0.0 {
            return;
        }
        for ch in 0..c {
            gx[p * c + ch] += gg * y[q * c + ch];
            gy[q * c + ch] += gg * x[p * c + ch];
        }
    });
}

fn zero_vars(plan: &Plan) -> Vec<Vec<f64>> {
    plan.layers.iter().map(|l| vec![0.0; l.pixels()]).collect()
}

fn add_vars(acc: &mut [Vec<f64>], src: &[Vec<f64>]) {
    for (a, s) in acc.iter_mut().zip(src) {
        a.iter_mut().zip(s).for_each(|(a, s)| *a += s);
    }
}

struct RowGrad {
    gx: Vec<f64>,
    dx: Vec<Vec<f64>>,
    gy: Vec<f64>,
    dy: Vec<Vec<f64>>,
}

fn conv_block_vjp(
    plan: &Plan,
    x: &ImageSet,
    sx: &[SelfState],
    y: &ImageSet,
    sy: &[SelfState],
    ct: &DMatrix<f64>,
    sides: Sides,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, m, len) = (x.len(), y.len(), x.image_len());
    let row = |i: usize| -> Result<RowGrad> {
        let mut out = RowGrad {
            gx: vec![0.0; len],
            dx: zero_vars(plan),
            gy: vec![0.0; if sides.y() { m * len } else { len }],
            dy: if sides.y() {
                (0..m).flat_map(|_| zero_vars(plan)).collect()
            } else {
                zero_vars(plan)
            },
        };
        let nl = plan.layers.len();
        for j in 0..m {
            let c = ct[(i, j)];
            if c == 0.0 {
                continue;
            }
            let mut tape = Tape::default();
            forward(plan, x.image(i), y.image(j), Diags::Cross(&sx[i], &sy[j]), Some(&mut tape))?;
            let (gy, dy) = if sides.y() {
                (&mut out.gy[j * len..(j + 1) * len], &mut out.dy[j * nl..(j + 1) * nl])
            } else {
                // y side discarded; reuse one scratch slot
                out.gy.fill(0.0);
                out.dy.iter_mut().for_each(|v| v.fill(0.0));
                (&mut out.gy[..], &mut out.dy[..])
            };
            let vars = Variances::Cross {
                sx: &sx[i],
                sy: &sy[j],
                dx: &mut out.dx,
                dy,
            };
            backward(plan, x.image(i), y.image(j), &tape, c, vars, &mut out.gx, gy);
        }
        Ok(out)
    };

    // rows fan out; partial sums are reduced in row order so the result does
    // not depend on the thread count
    let mut gx = vec![0.0; if sides.x() { n * len } else { 0 }];
    let mut dx: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut gy = vec![0.0; if sides.y() { m * len } else { 0 }];
    let mut dy: Vec<Vec<f64>> = if sides.y() {
        (0..m).flat_map(|_| zero_vars(plan)).collect()
    } else {
        Vec::new()
    };
    let chunk = rayon::current_num_threads().max(1) * 2;
    for start in (0..n).step_by(chunk) {
        let end = (start + chunk).min(n);
        let rows: Vec<RowGrad> = (start..end).into_par_iter().map(row).collect::<Result<_>>()?;
        for (k, r) in rows.into_iter().enumerate() {
            let i = start + k;
            if sides.x() {
                gx[i * len..(i + 1) * len].copy_from_slice(&r.gx);
                dx.push(r.dx);
            }
            if sides.y() {
                gy.iter_mut().zip(&r.gy).for_each(|(a, b)| *a += b);
                add_vars(&mut dy, &r.dy);
            }
        }
    }

    let nl = plan.layers.len();
    let own = |img: &[f64], ext: &[Vec<f64>]| -> Result<Vec<f64>> {
        let mut g = vec![0.0; len];
        if ext.iter().all(|v| v.iter().all(|&d| d == 0.0)) {
            return Ok(g);
        }
        let mut tape = Tape::default();
        forward(plan, img, img, Diags::SelfPair, Some(&mut tape))?;
        let mut g2 = vec![0.0; len];
        backward(plan, img, img, &tape, 0.0, Variances::Own { ext }, &mut g, &mut g2);
        g.iter_mut().zip(&g2).for_each(|(a, b)| *a += b);
        Ok(g)
    };
    if sides.x() {
        let extra: Vec<Vec<f64>> = (0..n).into_par_iter().map(|i| own(x.image(i), &dx[i])).collect::<Result<_>>()?;
        for (i, e) in extra.iter().enumerate() {
            gx[i * len..(i + 1) * len].iter_mut().zip(e).for_each(|(a, b)| *a += b);
        }
    }
    if sides.y() {
        let extra: Vec<Vec<f64>> = (0..m)
            .into_par_iter()
            .map(|j| own(y.image(j), &dy[j * nl..(j + 1) * nl]))
            .collect::<Result<_>>()?;
        for (j, e) in extra.iter().enumerate() {
            gy[j * len..(j + 1) * len].iter_mut().zip(e).for_each(|(a, b)| *a += b);
        }
    }
    Ok((gx, gy))
}

/// Source of kernel blocks and their VJPs; the distributed assembler and the
/// in-process implementation are interchangeable here.
pub trait KernelBackend: Sync {
    fn kernel_matrix(&self, x: &ImageSet, y: &ImageSet, spec: &KernelSpec) -> Result<DMatrix<f64>>;

    fn vjp(
        &self,
        x: &ImageSet,
        y: &ImageSet,
        spec: &KernelSpec,
        cotangent: &DMatrix<f64>,
        sides: Sides,
    ) -> Result<(Vec<f64>, Vec<f64>)>;
}

/// Monolithic in-process evaluation.
#[derive(Clone, Copy, Debug, Default)]
pub struct Local;

impl KernelBackend for Local {
    fn kernel_matrix(&self, x: &ImageSet, y: &ImageSet, spec: &KernelSpec) -> Result<DMatrix<f64>> {
        kernel_matrix(x, y, spec)
    }

    fn vjp(
        &self,
        x: &ImageSet,
        y: &ImageSet,
        spec: &KernelSpec,
        cotangent: &DMatrix<f64>,
        sides: Sides,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        kernel_block_vjp_sides(x, y, spec, cotangent, sides)
    }
}

/// KRR loss together with its gradients.
#[derive(Clone, Debug)]
pub struct LossGradient {
    pub loss: f64,
    /// Flattened like the support images' pixels.
    pub images: Vec<f64>,
    pub labels: DMatrix<f64>,
}

/// Loss value and `(∂L/∂X_s, ∂L/∂y_s)` for one target batch, differentiating
/// through the adaptive ridge.
pub fn loss_input_gradient(
    support: &SupportSet,
    target: (&ImageSet, &LabelMatrix),
    spec: &KernelSpec,
    lambda0: f64,
) -> Result<LossGradient> {
    loss_gradient_with(
        &Local,
        &support.images,
        &support.labels,
        target.0,
        target.1,
        spec,
        lambda0,
        LambdaMode::Adaptive,
    )
}

/// Loss and gradients with an explicit backend and ridge mode.
#[allow(clippy::too_many_arguments)]
pub fn loss_gradient_with(
    backend: &dyn KernelBackend,
    xs: &ImageSet,
    ys: &LabelMatrix,
    xt: &ImageSet,
    yt: &LabelMatrix,
    spec: &KernelSpec,
    lambda0: f64,
    mode: LambdaMode,
) -> Result<LossGradient> {
    let n = xs.len();
    if n == 0 {
        return Err(Error::EmptyDataset("support set is empty".into()));
    }
    if ys.rows() != n || yt.rows() != xt.len() || ys.classes() != yt.classes() {
        return Err(Error::ShapeMismatch("labels do not match images".into()));
    }
    let kss = SymMatrix::new(backend.kernel_matrix(xs, xs, spec)?)?;
    let kst = backend.kernel_matrix(xs, xt, spec)?;
    let lambda = adaptive_lambda(&kss, lambda0);
    let alpha = solve_psd(&kss, ys.values(), lambda)?;
    let resid = yt.values() - kst.transpose() * &alpha;
    let loss = 0.5 * resid.norm_squared();
    if !loss.is_finite() {
        return Err(Error::DivergedLoss(loss));
    }
    // dL/dK_ts = −R αᵀ, stored transposed as a support × target cotangent
    let ct_st = -(&alpha * resid.transpose());
    let g = -(&kst * &resid);
    let beta = solve_psd(&kss, &g, lambda)?;
    let mut ct_ss = -(&beta * alpha.transpose());
    if mode == LambdaMode::Adaptive {
        let tr = ct_ss.trace();
        for i in 0..n {
            ct_ss[(i, i)] += lambda0 / n as f64 * tr;
        }
    }
    // K_ss is symmetrized before the solve
    let ct_ss = (&ct_ss + ct_ss.transpose()) * 0.5;
    let (g_st, _) = backend.vjp(xs, xt, spec, &ct_st, Sides::X)?;
    let (g1, g2) = backend.vjp(xs, xs, spec, &ct_ss, Sides::Both)?;
    let images: Vec<f64> = g_st.iter().zip(&g1).zip(&g2).map(|((a, b), c)| a + b + c).collect();
    if images.iter().any(|v| !v.is_finite()) || beta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient);
    }
    Ok(LossGradient { loss, images, labels: beta })
}
