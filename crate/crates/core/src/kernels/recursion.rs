//! Forward kernel recursion over banded covariance maps.

use super::layout::{box_filter, Layout};
use super::{kappa1, kappas, Family, KernelKind, KernelSpec, CORRELATION_SLACK, ZERO_VARIANCE};
use crate::error::{Error, Result};

/// Layer geometry for a fixed spec and input shape.
#[derive(Clone, Debug)]
pub(crate) struct Plan {
    pub spec: KernelSpec,
    pub channels: usize,
    pub filter: usize,
    pub pooled: bool,
    /// Pre-pool layout of each conv layer.
    pub layers: Vec<Layout>,
    pub masks: Vec<Vec<f64>>,
    /// Entries of each layer that reach the readout, with their destination
    /// in the next layer's map.
    pub routes: Vec<Vec<Route>>,
    pub readout: Layout,
}

/// One valid entry `(p, q)` of a layer map and the entry of the next map it
/// feeds (the pooled cell for pooled families, itself otherwise).
#[derive(Clone, Copy, Debug)]
pub(crate) struct Route {
    pub idx: u32,
    pub p: u32,
    pub q: u32,
    pub dest: u32,
}

fn routes_for(fine: &Layout, next: &Layout, pooled: bool) -> Vec<Route> {
    let mut out = Vec::new();
    fine.for_each_valid(|idx, p, q| {
        let dest = if pooled {
            let (pi, pj) = (p / fine.w / 2, p % fine.w / 2);
            let (qi, qj) = (q / fine.w / 2, q % fine.w / 2);
            if pi >= next.h || pj >= next.w || qi >= next.h || qj >= next.w {
                return;
            }
            let dy = qi as isize - pi as isize;
            let dx = qj as isize - pj as isize;
            if dy.unsigned_abs() > next.rh || dx.unsigned_abs() > next.rw {
                return;
            }
            next.index(pi, pj, dy, dx)
        } else {
            idx
        };
        out.push(Route {
            idx: idx as u32,
            p: p as u32,
            q: q as u32,
            dest: dest as u32,
        });
    });
    out
}

impl Plan {
    pub fn new(spec: &KernelSpec, shape: (usize, usize, usize)) -> Result<Self> {
        spec.validate()?;
        let (h, w, c) = match spec.family {
            Family::Fc => (1, 1, shape.0 * shape.1 * shape.2),
            _ => shape,
        };
        let filter = if spec.family == Family::Fc { 1 } else { spec.filter_size };
        let pooled = spec.pooled();
        let mut grids = vec![(h, w)];
        for _ in 1..spec.depth {
            let &(gh, gw) = grids.last().unwrap();
            grids.push(if pooled { (gh / 2, gw / 2) } else { (gh, gw) });
        }
        let &(lh, lw) = grids.last().unwrap();
        let readout_grid = if pooled { (lh / 2, lw / 2) } else { (lh, lw) };
        if grids.iter().chain(std::iter::once(&readout_grid)).any(|&(a, b)| a == 0 || b == 0) {
            return Err(Error::InvalidSpec(format!(
                "{h}x{w} input is too small for {} pooling stages",
                spec.depth
            )));
        }
        let readout = Layout::new(readout_grid.0, readout_grid.1, 0, 0);
        let mut layers = vec![readout; spec.depth];
        let (mut rh, mut rw) = (0usize, 0usize);
        for l in (0..spec.depth).rev() {
            if pooled {
                rh = 2 * rh + 1;
                rw = 2 * rw + 1;
            }
            layers[l] = Layout::new(grids[l].0, grids[l].1, rh, rw);
            rh = layers[l].rh;
            rw = layers[l].rw;
        }
        let masks = layers.iter().map(|l| l.mask()).collect();
        let routes = (0..layers.len())
            .map(|l| {
                let next = if l + 1 < layers.len() { layers[l + 1] } else { readout };
                routes_for(&layers[l], &next, pooled)
            })
            .collect();
        Ok(Plan {
            spec: *spec,
            channels: c,
            filter,
            pooled,
            layers,
            masks,
            routes,
            readout,
        })
    }

    pub fn image_len(&self) -> usize {
        self.layers[0].pixels() * self.channels
    }

    pub fn ntk(&self) -> bool {
        self.spec.kind == KernelKind::Ntk
    }

    /// Layout a layer's post-activation maps are carried into.
    pub fn next_layout(&self, l: usize) -> Layout {
        if l + 1 < self.layers.len() {
            self.layers[l + 1]
        } else {
            self.readout
        }
    }

    pub fn pool_scale(&self) -> f64 {
        if self.pooled {
            0.0625
        } else {
            1.0
        }
    }

    pub fn self_state(&self, x: &[f64]) -> Result<SelfState> {
        let out = forward(self, x, x, Diags::SelfPair, None)?;
        let diags = out.diags.expect("self pair records diagonals");
        let roots = diags.iter().map(|d| d.iter().map(|v| v.sqrt()).collect()).collect();
        Ok(SelfState {
            roots,
            nngp: out.nngp,
            ntk: out.ntk,
        })
    }
}

/// Per-layer pre-activation scales `√Σ_l[p, p]` of one image.
#[derive(Clone, Debug)]
pub(crate) struct SelfState {
    /// Square roots of the variances, one vector per layer.
    pub roots: Vec<Vec<f64>>,
    pub nngp: f64,
    pub ntk: f64,
}

pub(crate) enum Diags<'a> {
    /// Cross pair using the precomputed states of `x` and `y`.
    Cross(&'a SelfState, &'a SelfState),
    /// `x` paired with itself; diagonals are read off the pair's own maps.
    SelfPair,
}

/// Recorded pre-activation maps for the backward pass.
#[derive(Default, Debug)]
pub(crate) struct Tape {
    pub sigma: Vec<Vec<f64>>,
    pub theta: Vec<Vec<f64>>,
    pub diags: Vec<Vec<f64>>,
}

pub(crate) struct ForwardOut {
    pub nngp: f64,
    pub ntk: f64,
    pub diags: Option<Vec<Vec<f64>>>,
}

/// `G[p, δ] = C⁻¹ Σ_c x[p, c] y[p+δ, c]`.
pub(crate) fn input_gram(layout: &Layout, channels: usize, x: &[f64], y: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; layout.len()];
    let inv = 1.0 / channels as f64;
    layout.for_each_valid(|idx, p, q| {
        let xs = &x[p * channels..(p + 1) * channels];
        let ys = &y[q * channels..(q + 1) * channels];
        g[idx] = xs.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() * inv;
    });
    g
}

pub(crate) fn forward(plan: &Plan, x: &[f64], y: &[f64], diags: Diags<'_>, mut tape: Option<&mut Tape>) -> Result<ForwardOut> {
    let (sw, sb) = (plan.spec.weight_variance, plan.spec.bias_variance);
    let ntk = plan.ntk();
    if x.len() != plan.image_len() || y.len() != plan.image_len() {
        return Err(Error::ShapeMismatch(format!(
            "image length {} / {} does not match plan ({})",
            x.len(),
            y.len(),
            plan.image_len()
        )));
    }
    // identical images have correlation exactly one on the diagonal; computing
    // it would land a few ulps off, which arccos amplifies to ~1e-8
    let same = std::ptr::eq(x, y) || x == y;
    let mut post_k = input_gram(&plan.layers[0], plan.channels, x, y);
    let mut post_t: Vec<f64> = Vec::new();
    let mut own_diags = match diags {
        Diags::SelfPair => Some(Vec::with_capacity(plan.layers.len())),
        Diags::Cross(..) => None,
    };

    for (l, layout) in plan.layers.iter().enumerate() {
        let mask = &plan.masks[l];
        let mut sigma = vec![0.0; layout.len()];
        box_filter(layout, plan.filter, mask, &post_k, &mut sigma);
        for (s, &m) in sigma.iter_mut().zip(mask) {
            *s = sw * *s + sb * m;
        }
        let theta = if !ntk {
            Vec::new()
        } else if l == 0 {
            sigma.clone()
        } else {
            let mut t = vec![0.0; layout.len()];
            box_filter(layout, plan.filter, mask, &post_t, &mut t);
            t.iter_mut().zip(&sigma).for_each(|(t, &s)| *t = s + sw * *t);
            t
        };

        let own_roots;
        let (rx, ry): (&[f64], &[f64]) = match diags {
            Diags::Cross(a, b) => (&a.roots[l], &b.roots[l]),
            Diags::SelfPair => {
                let own: Vec<f64> = (0..layout.pixels()).map(|p| sigma[layout.diag_index(p)]).collect();
                if own.iter().all(|&v| v <= ZERO_VARIANCE) {
                    return Err(Error::ZeroNormInput { layer: l });
                }
                own_roots = own.iter().map(|v| v.sqrt()).collect::<Vec<f64>>();
                if let Some(d) = own_diags.as_mut() {
                    d.push(own);
                }
                (&own_roots, &own_roots)
            }
        };

        // ReLU, fused with the pooling (or identity) map into the next layer
        let next = plan.next_layout(l);
        let mut next_k = vec![0.0; next.len()];
        let mut next_t = if ntk { vec![0.0; next.len()] } else { Vec::new() };
        for r in &plan.routes[l] {
            let s = rx[r.p as usize] * ry[r.q as usize];
            if s <= ZERO_VARIANCE {
                continue;
            }
            let idx = r.idx as usize;
            let c = if same && r.p == r.q { 1.0 } else { sigma[idx] / s };
            if !(c.abs() <= 1.0 + CORRELATION_SLACK) {
                return Err(Error::DomainError(c));
            }
            let c = c.clamp(-1.0, 1.0);
            if ntk {
                let (k0, k1) = kappas(c);
                next_k[r.dest as usize] += s * k1;
                next_t[r.dest as usize] += k0 * theta[idx];
            } else {
                next_k[r.dest as usize] += s * kappa1(c);
            }
        }
        let scale = plan.pool_scale();
        if scale != 1.0 {
            next_k.iter_mut().for_each(|v| *v *= scale);
            next_t.iter_mut().for_each(|v| *v *= scale);
        }

        if let Some(tp) = tape.as_deref_mut() {
            tp.sigma.push(sigma);
            tp.theta.push(theta);
        }
        post_k = next_k;
        post_t = next_t;
    }

    let r = &plan.readout;
    let n = r.pixels() as f64;
    let mean_k = (0..r.pixels()).map(|p| post_k[r.diag_index(p)]).sum::<f64>() / n;
    let nngp = sw * mean_k + sb;
    let ntk_val = if ntk {
        let mean_t = (0..r.pixels()).map(|p| post_t[r.diag_index(p)]).sum::<f64>() / n;
        sw * (mean_k + mean_t) + sb
    } else {
        f64::NAN
    };
    if let Some(tp) = tape {
        tp.diags = own_diags.clone().unwrap_or_default();
    }
    Ok(ForwardOut {
        nngp,
        ntk: ntk_val,
        diags: own_diags,
    })
}
