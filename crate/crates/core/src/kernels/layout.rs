//! Pixel-pair covariance maps stored by displacement.
//!
//! A map holds `M[p, p+δ]` for every pixel `p` of an `h×w` grid and every
//! displacement `δ = (dy, dx)` with `|dy| ≤ rh`, `|dx| ≤ rw`. The
//! convolution operator only ever averages entries with the same
//! displacement, and the readout only needs `δ = 0`, so each layer keeps the
//! displacement window its successors can reach (a pooling stage doubles it
//! plus one). Entries whose partner pixel `p+δ` falls off the grid are
//! structurally zero.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Layout {
    pub h: usize,
    pub w: usize,
    pub rh: usize,
    pub rw: usize,
}

impl Layout {
    pub fn new(h: usize, w: usize, rh: usize, rw: usize) -> Self {
        Layout {
            h,
            w,
            rh: rh.min(h.saturating_sub(1)),
            rw: rw.min(w.saturating_sub(1)),
        }
    }

    #[inline]
    pub fn dh(&self) -> usize {
        2 * self.rh + 1
    }

    #[inline]
    pub fn dw(&self) -> usize {
        2 * self.rw + 1
    }

    /// Entries per pixel.
    #[inline]
    pub fn block(&self) -> usize {
        self.dh() * self.dw()
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.pixels() * self.block()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, dy: isize, dx: isize) -> usize {
        debug_assert!(dy.unsigned_abs() <= self.rh && dx.unsigned_abs() <= self.rw);
        ((i * self.w + j) * self.dh() + (dy + self.rh as isize) as usize) * self.dw()
            + (dx + self.rw as isize) as usize
    }

    /// Offset of the `δ = 0` entry inside a pixel block.
    #[inline]
    pub fn center(&self) -> usize {
        self.rh * self.dw() + self.rw
    }

    #[inline]
    pub fn diag_index(&self, p: usize) -> usize {
        p * self.block() + self.center()
    }

    /// Visits every structurally valid entry as `(flat index, p, q)` where
    /// `q = p + δ` is the partner pixel.
    #[inline]
    pub fn for_each_valid(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (h, w) = (self.h as isize, self.w as isize);
        let (rh, rw) = (self.rh as isize, self.rw as isize);
        let mut idx = 0;
        for i in 0..h {
            for j in 0..w {
                let p = (i * w + j) as usize;
                for dy in -rh..=rh {
                    let qi = i + dy;
                    if qi < 0 || qi >= h {
                        idx += self.dw();
                        continue;
                    }
                    for dx in -rw..=rw {
                        let qj = j + dx;
                        if qj >= 0 && qj < w {
                            f(idx, p, (qi * w + qj) as usize);
                        }
                        idx += 1;
                    }
                }
            }
        }
    }

    /// 1.0 on valid entries, 0.0 elsewhere.
    pub fn mask(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.len()];
        self.for_each_valid(|idx, _, _| m[idx] = 1.0);
        m
    }
}

/// Averaging over aligned filter offsets: `(AΣ)[p, δ] = f⁻² Σ_e Σ[p+e, δ]`,
/// zero padded. The operator is self-adjoint on masked maps, so the same
/// routine serves the backward pass.
pub(crate) fn box_filter(layout: &Layout, filter: usize, mask: &[f64], input: &[f64], out: &mut [f64]) {
    let r = (filter / 2) as isize;
    let blk = layout.block();
    let (h, w) = (layout.h as isize, layout.w as isize);
    let norm = 1.0 / (filter * filter) as f64;
    debug_assert_eq!(input.len(), layout.len());
    debug_assert_eq!(out.len(), layout.len());
    if filter == 1 {
        for ((o, &v), &m) in out.iter_mut().zip(input).zip(mask) {
            *o = v * m;
        }
        return;
    }
    // horizontal pass into a scratch buffer, then vertical pass into `out`
    let mut tmp = vec![0.0; input.len()];
    for i in 0..h {
        for j in 0..w {
            let dst = ((i * w + j) as usize) * blk;
            let lo = (j - r).max(0);
            let hi = (j + r).min(w - 1);
            for jj in lo..=hi {
                let src = ((i * w + jj) as usize) * blk;
                add_assign(&mut tmp[dst..dst + blk], &input[src..src + blk]);
            }
        }
    }
    for i in 0..h {
        for j in 0..w {
            let dst = ((i * w + j) as usize) * blk;
            let o = &mut out[dst..dst + blk];
            o.fill(0.0);
            let lo = (i - r).max(0);
            let hi = (i + r).min(h - 1);
            for ii in lo..=hi {
                let src = ((ii * w + j) as usize) * blk;
                add_assign(o, &tmp[src..src + blk]);
            }
            for (v, &m) in o.iter_mut().zip(&mask[dst..dst + blk]) {
                *v *= norm * m;
            }
        }
    }
}

#[inline]
fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[cfg(test)]
/// 2×2 average pooling with stride 2 applied to both pixel indices.
/// `coarse` must have grid `(fine.h/2, fine.w/2)`.
pub(crate) fn pool(fine: &Layout, coarse: &Layout, input: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; coarse.len()];
    let (rhf, rwf) = (fine.rh as isize, fine.rw as isize);
    coarse.for_each_valid(|idx, pc, qc| {
        let (pi, pj) = ((pc / coarse.w) as isize, (pc % coarse.w) as isize);
        let (qi, qj) = ((qc / coarse.w) as isize, (qc % coarse.w) as isize);
        let mut acc = 0.0;
        for a0 in 0..2 {
            for b0 in 0..2 {
                let (fi, fj) = (2 * pi + a0, 2 * pj + b0);
                for a1 in 0..2 {
                    let dy = 2 * qi + a1 - fi;
                    if dy.abs() > rhf {
                        continue;
                    }
                    for b1 in 0..2 {
                        let dx = 2 * qj + b1 - fj;
                        if dx.abs() > rwf {
                            continue;
                        }
                        acc += input[fine.index(fi as usize, fj as usize, dy, dx)];
                    }
                }
            }
        }
        out[idx] = acc * 0.0625;
    });
    out
}

/// Adjoint of [`pool`]: scatters coarse cotangents back onto the fine map.
#[cfg(test)]
pub(crate) fn pool_adjoint(fine: &Layout, coarse: &Layout, cot: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; fine.len()];
    let (rhf, rwf) = (fine.rh as isize, fine.rw as isize);
    coarse.for_each_valid(|idx, pc, qc| {
        let g = cot[idx] * 0.0625;
        if g == 0.0 {
            return;
        }
        let (pi, pj) = ((pc / coarse.w) as isize, (pc % coarse.w) as isize);
        let (qi, qj) = ((qc / coarse.w) as isize, (qc % coarse.w) as isize);
        for a0 in 0..2 {
            for b0 in 0..2 {
                let (fi, fj) = (2 * pi + a0, 2 * pj + b0);
                for a1 in 0..2 {
                    let dy = 2 * qi + a1 - fi;
                    if dy.abs() > rhf {
                        continue;
                    }
                    for b1 in 0..2 {
                        let dx = 2 * qj + b1 - fj;
                        if dx.abs() > rwf {
                            continue;
                        }
                        out[fine.index(fi as usize, fj as usize, dy, dx)] += g;
                    }
                }
            }
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Dense reference: full (hw)² covariance indexed by (p, q).
    fn dense_box(h: usize, w: usize, f: usize, m: &[f64]) -> Vec<f64> {
        let n = h * w;
        let r = (f / 2) as isize;
        let mut out = vec![0.0; n * n];
        for p in 0..n {
            for q in 0..n {
                let (pi, pj) = ((p / w) as isize, (p % w) as isize);
                let (qi, qj) = ((q / w) as isize, (q % w) as isize);
                let mut acc = 0.0;
                for a in -r..=r {
                    for b in -r..=r {
                        let (ui, uj, vi, vj) = (pi + a, pj + b, qi + a, qj + b);
                        let inb = |i: isize, j: isize| i >= 0 && j >= 0 && i < h as isize && j < w as isize;
                        if inb(ui, uj) && inb(vi, vj) {
                            acc += m[(ui as usize * w + uj as usize) * n + vi as usize * w + vj as usize];
                        }
                    }
                }
                out[p * n + q] = acc / (f * f) as f64;
            }
        }
        out
    }

    fn to_banded(layout: &Layout, dense: &[f64]) -> Vec<f64> {
        let n = layout.pixels();
        let mut out = vec![0.0; layout.len()];
        layout.for_each_valid(|idx, p, q| out[idx] = dense[p * n + q]);
        out
    }

    fn pseudo(n: usize) -> Vec<f64> {
        (0..n).map(|k| ((k * 7919) % 101) as f64 / 50.0 - 1.0).collect()
    }

    #[test]
    fn full_window_box_matches_dense() {
        let (h, w) = (4, 5);
        let layout = Layout::new(h, w, h - 1, w - 1);
        let dense = pseudo((h * w) * (h * w));
        let banded = to_banded(&layout, &dense);
        let mask = layout.mask();
        let mut out = vec![0.0; layout.len()];
        box_filter(&layout, 3, &mask, &banded, &mut out);
        let expect = to_banded(&layout, &dense_box(h, w, 3, &dense));
        for (a, b) in out.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn box_is_self_adjoint() {
        let layout = Layout::new(5, 4, 2, 1);
        let mask = layout.mask();
        let u: Vec<f64> = pseudo(layout.len()).iter().zip(&mask).map(|(a, m)| a * m).collect();
        let v: Vec<f64> = pseudo(layout.len() + 3)[3..].iter().zip(&mask).map(|(a, m)| a * m).collect();
        let mut au = vec![0.0; layout.len()];
        let mut av = vec![0.0; layout.len()];
        box_filter(&layout, 3, &mask, &u, &mut au);
        box_filter(&layout, 3, &mask, &v, &mut av);
        let lhs: f64 = au.iter().zip(&v).map(|(a, b)| a * b).sum();
        let rhs: f64 = u.iter().zip(&av).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn pool_matches_dense_and_adjoint() {
        let (h, w) = (6, 4);
        let fine = Layout::new(h, w, h - 1, w - 1);
        let coarse = Layout::new(h / 2, w / 2, h / 2 - 1, w / 2 - 1);
        let n = h * w;
        let dense = pseudo(n * n);
        let pooled = pool(&fine, &coarse, &to_banded(&fine, &dense));
        let nc = coarse.pixels();
        let mut expect = vec![0.0; nc * nc];
        for pc in 0..nc {
            for qc in 0..nc {
                let (pi, pj) = (pc / coarse.w, pc % coarse.w);
                let (qi, qj) = (qc / coarse.w, qc % coarse.w);
                let mut acc = 0.0;
                for a in 0..4 {
                    for b in 0..4 {
                        let p = (2 * pi + a / 2) * w + 2 * pj + a % 2;
                        let q = (2 * qi + b / 2) * w + 2 * qj + b % 2;
                        acc += dense[p * n + q];
                    }
                }
                expect[pc * nc + qc] = acc / 16.0;
            }
        }
        for (a, b) in pooled.iter().zip(&to_banded(&coarse, &expect)) {
            assert!((a - b).abs() < 1e-14);
        }
        let cot = pseudo(coarse.len() + 5)[5..].to_vec();
        let cot: Vec<f64> = cot.iter().zip(coarse.mask()).map(|(c, m)| c * m).collect();
        let fine_in = to_banded(&fine, &dense);
        let lhs: f64 = pooled.iter().zip(&cot).map(|(a, b)| a * b).sum();
        let back = pool_adjoint(&fine, &coarse, &cot);
        let rhs: f64 = back.iter().zip(&fine_in).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
