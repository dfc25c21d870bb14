//! Dimension estimates, NTK gradient geometry, spectral band evaluation and
//! subsampling robustness of support sets.

use std::ops::Range;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::distill::SupportSet;
use crate::error::{Error, Result};
use crate::images::{Dataset, ImageSet};
use crate::kernels::{kernel_matrix, KernelKind, KernelSpec};
use crate::krr::{accuracy, krr_predict, LabelMatrix};
use crate::linalg::{eigh, SymMatrix};

pub const DEFAULT_DISCARD_FRACTION: f64 = 0.1;
pub const DEFAULT_VARIANCE_THRESHOLD: f64 = 0.9;

/// Points closer than this share of the point cloud's diameter count as
/// duplicates.
pub const DUPLICATE_RTOL: f64 = 1e-9;

/// Eigenvalues below this share of the largest are floored in the
/// spectral analysis.
pub const SPECTRAL_FLOOR: f64 = 1e-12;

/// Images as the rows of an `N × (H·W·C)` matrix.
pub fn image_rows(x: &ImageSet) -> DMatrix<f64> {
    DMatrix::from_row_slice(x.len(), x.image_len(), x.pixels())
}

/// Euclidean distances between the rows of `points`.
pub fn pairwise_distances(points: &DMatrix<f64>) -> DMatrix<f64> {
    let n = points.nrows();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| {
                    let mut s = 0.0;
                    for k in 0..points.ncols() {
                        let d = points[(i, k)] - points[(j, k)];
                        s += d * d;
                    }
                    s.sqrt()
                })
                .collect()
        })
        .collect();
    DMatrix::from_fn(n, n, |i, j| rows[i][j])
}

/// TwoNN intrinsic dimension of the rows of `points`.
pub fn twonn_id(points: &DMatrix<f64>, discard_fraction: f64) -> Result<f64> {
    twonn_id_from_distances(&pairwise_distances(points), discard_fraction)
}

/// TwoNN on a precomputed distance matrix: with `μ = r₂/r₁` sorted and
/// `F_i = i/N`, the slope through the origin of `−log(1 − F_i)` against
/// `log μ_i` over the lowest `1 − discard_fraction` share of points.
pub fn twonn_id_from_distances(dist: &DMatrix<f64>, discard_fraction: f64) -> Result<f64> {
    if !dist.is_square() {
        return Err(Error::ShapeMismatch("distance matrix must be square".into()));
    }
    if !(0.0..1.0).contains(&discard_fraction) {
        return Err(Error::Config(format!("discard fraction {discard_fraction} outside [0, 1)")));
    }
    let n = dist.nrows();
    let diameter = dist.iter().fold(0.0f64, |m, &v| m.max(v));
    let tol = DUPLICATE_RTOL * diameter;
    let mut kept: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n {
        if kept.iter().all(|&j| dist[(i, j)] > tol) {
            kept.push(i);
        }
    }
    if kept.len() < n {
        log::warn!("twonn: dropped {} duplicate points", n - kept.len());
    }
    if kept.len() < 10 {
        return Err(Error::DegenerateDistances(format!("{} distinct points, need at least 10", kept.len())));
    }
    let mut mu = Vec::with_capacity(kept.len());
    for &i in &kept {
        let (mut r1, mut r2) = (f64::INFINITY, f64::INFINITY);
        for &j in &kept {
            if i == j {
                continue;
            }
            let d = dist[(i, j)];
            if d < r1 {
                r2 = r1;
                r1 = d;
            } else if d < r2 {
                r2 = d;
            }
        }
        if !(r1 > 0.0) || !r2.is_finite() {
            return Err(Error::DegenerateDistances(format!("point {i} has nearest distance {r1}")));
        }
        mu.push(r2 / r1);
    }
    mu.sort_by(f64::total_cmp);
    let total = mu.len();
    // F = 1 at the last point puts it at infinity, so it never joins the fit
    let used = (((1.0 - discard_fraction) * total as f64).floor() as usize).min(total - 1);
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, &m) in mu.iter().take(used).enumerate() {
        let x = m.ln();
        let y = -(1.0 - (i + 1) as f64 / total as f64).ln();
        sxy += x * y;
        sxx += x * x;
    }
    if !(sxx > 0.0) {
        return Err(Error::DegenerateDistances("all distance ratios equal one".into()));
    }
    Ok(sxy / sxx)
}

fn components_for(mut eigenvalues: Vec<f64>, threshold: f64) -> usize {
    eigenvalues.sort_by(|a, b| b.total_cmp(a));
    let top = eigenvalues.first().copied().unwrap_or(0.0).max(0.0);
    let n = eigenvalues.len() as f64;
    let vals: Vec<f64> = eigenvalues
        .iter()
        .map(|&v| if v > top * n * f64::EPSILON { v } else { 0.0 })
        .collect();
    let total: f64 = vals.iter().sum();
    if !(total > 0.0) {
        return 1;
    }
    let mut cum = 0.0;
    for (k, v) in vals.iter().enumerate() {
        cum += v;
        if cum >= threshold * total * (1.0 - 1e-12) {
            return k + 1;
        }
    }
    vals.len()
}

fn check_threshold(threshold: f64) -> Result<()> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Config(format!("variance threshold {threshold} outside (0, 1]")));
    }
    Ok(())
}

/// Fewest principal components of the rows of `points` explaining
/// `threshold` of the variance.
pub fn linear_dim(points: &DMatrix<f64>, threshold: f64) -> Result<usize> {
    check_threshold(threshold)?;
    let (n, d) = points.shape();
    if n < 2 {
        return Err(Error::EmptyDataset("linear dimension needs at least two points".into()));
    }
    let mean = points.row_mean();
    let mut centered = points.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    // the smaller of the covariance and the Gram matrix has the same spectrum
    let m = if d <= n {
        centered.transpose() * &centered
    } else {
        &centered * centered.transpose()
    };
    let (vals, _) = eigh(&SymMatrix::symmetrized(m))?;
    Ok(components_for(vals.iter().copied().collect(), threshold))
}

/// [`linear_dim`] of the feature vectors behind a Gram matrix, through the
/// spectrum of the doubly centered Gram.
pub fn linear_dim_from_gram(gram: &SymMatrix, threshold: f64) -> Result<usize> {
    check_threshold(threshold)?;
    let n = gram.order();
    if n < 2 {
        return Err(Error::EmptyDataset("linear dimension needs at least two points".into()));
    }
    let h = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 } - 1.0 / n as f64);
    let centered = &h * gram.matrix() * &h;
    let (vals, _) = eigh(&SymMatrix::symmetrized(centered))?;
    Ok(components_for(vals.iter().copied().collect(), threshold))
}

/// `dist(x_i, x_j) = √max(0, Θ_ii + Θ_jj − 2Θ_ij)` from an NTK Gram matrix.
pub fn distances_from_gram(gram: &SymMatrix) -> SymMatrix {
    let g = gram.matrix();
    let n = gram.order();
    SymMatrix::symmetrized(DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            (g[(i, i)] + g[(j, j)] - 2.0 * g[(i, j)]).max(0.0).sqrt()
        }
    }))
}

/// Distances between the NTK gradient features of the images.
pub fn gradient_distance_matrix(x: &ImageSet, spec: &KernelSpec) -> Result<SymMatrix> {
    if spec.kind != KernelKind::Ntk {
        return Err(Error::InvalidSpec("gradient distances need an NTK spec".into()));
    }
    let gram = SymMatrix::symmetrized(kernel_matrix(x, x, spec)?);
    Ok(distances_from_gram(&gram))
}

/// `count` contiguous bands of near-equal size over `n` eigenvalues,
/// largest eigenvalues first.
pub fn contiguous_bands(n: usize, count: usize) -> Vec<Range<usize>> {
    let count = count.max(1);
    (0..count).map(|b| b * n / count..(b + 1) * n / count).collect()
}

/// Eigenpairs of `K_ss` in descending order with small eigenvalues floored.
fn descending_spectrum(kss: &SymMatrix) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let (vals, vecs) = eigh(kss)?;
    let n = vals.len();
    let order: Vec<usize> = (0..n).rev().collect();
    let top = vals.max().max(0.0);
    let floor = SPECTRAL_FLOOR * top;
    let mut floored = 0;
    let lam: Vec<f64> = order
        .iter()
        .map(|&i| {
            if vals[i] < floor {
                floored += 1;
                floor
            } else {
                vals[i]
            }
        })
        .collect();
    if !(top > 0.0) || floored * 5 > n {
        return Err(Error::SingularKernel { floored, total: n });
    }
    if floored > 0 {
        log::warn!("spectral: floored {floored} of {n} eigenvalues at {floor:.3e}");
    }
    let q = DMatrix::from_fn(n, n, |r, c| vecs[(r, order[c])]);
    Ok((lam, q))
}

/// `P_b = Q_b Λ_b⁻¹ Q_bᵀ` for each band of the descending spectrum; the
/// pieces of a partition sum to `K_ss⁻¹`.
pub fn band_inverse_pieces(kss: &SymMatrix, bands: &[Range<usize>]) -> Result<Vec<DMatrix<f64>>> {
    let (lam, q) = descending_spectrum(kss)?;
    check_bands(bands, lam.len())?;
    Ok(bands.iter().map(|b| band_piece(&lam, &q, b)).collect())
}

fn band_piece(lam: &[f64], q: &DMatrix<f64>, band: &Range<usize>) -> DMatrix<f64> {
    let qb = q.columns(band.start, band.len()).into_owned();
    let mut scaled = qb.clone();
    for (k, mut col) in scaled.column_iter_mut().enumerate() {
        col /= lam[band.start + k];
    }
    scaled * qb.transpose()
}

fn check_bands(bands: &[Range<usize>], n: usize) -> Result<()> {
    if let Some(b) = bands.iter().find(|b| b.start > b.end || b.end > n) {
        return Err(Error::ShapeMismatch(format!("band {b:?} outside 0..{n}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BandAccuracy {
    pub band: Range<usize>,
    pub accuracy: f64,
    /// `(acc_band − acc_full) / acc_full`.
    pub relative_change: f64,
    pub predictions: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralReport {
    /// Ridgeless accuracy with the whole spectrum.
    pub full_accuracy: f64,
    pub bands: Vec<BandAccuracy>,
}

/// Ridgeless KRR restricted to eigenspaces of `K_ss`; band indices run over
/// the descending spectrum.
pub fn spectral_band_accuracy(
    kss: &SymMatrix,
    kts: &DMatrix<f64>,
    ys: &LabelMatrix,
    test_labels: &[usize],
    bands: &[Range<usize>],
) -> Result<SpectralReport> {
    let n = kss.order();
    if kts.ncols() != n || ys.rows() != n || kts.nrows() != test_labels.len() {
        return Err(Error::ShapeMismatch("kernel blocks do not match labels".into()));
    }
    let (lam, q) = descending_spectrum(kss)?;
    check_bands(bands, n)?;
    let predict = |band: &Range<usize>| -> Result<(DMatrix<f64>, f64)> {
        let p = kts * band_piece(&lam, &q, band) * ys.values();
        let acc = accuracy(&LabelMatrix::from_matrix(p.clone())?, test_labels);
        Ok((p, acc))
    };
    let (_, full_accuracy) = predict(&(0..n))?;
    let bands = bands
        .iter()
        .map(|b| {
            let (predictions, acc) = predict(b)?;
            Ok(BandAccuracy {
                band: b.clone(),
                accuracy: acc,
                relative_change: if full_accuracy > 0.0 {
                    (acc - full_accuracy) / full_accuracy
                } else {
                    0.0
                },
                predictions,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SpectralReport { full_accuracy, bands })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubsampleStat {
    pub keep_fraction: f64,
    pub mean_accuracy: f64,
    /// Sample standard deviation over trials.
    pub std_accuracy: f64,
    /// `(acc_full − mean) / acc_full`.
    pub relative_drop: f64,
    pub trials: Vec<f64>,
}

/// Rows kept from each class: `max(1, round(f·n_c))` drawn uniformly.
pub fn balanced_subset(classes: &[usize], num_classes: usize, keep_fraction: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut members = vec![Vec::new(); num_classes];
    for (i, &c) in classes.iter().enumerate() {
        members[c].push(i);
    }
    let mut out = Vec::new();
    for m in members.iter().filter(|m| !m.is_empty()) {
        let k = ((keep_fraction * m.len() as f64).round() as usize).clamp(1, m.len());
        let mut pick: Vec<usize> = sample(rng, m.len(), k).into_iter().map(|j| m[j]).collect();
        pick.sort_unstable();
        out.extend(pick);
    }
    out.sort_unstable();
    out
}

/// KRR accuracy of random class-balanced subsets of a support set, from
/// precomputed full-support kernels. Trial `t` of fraction `f` draws from
/// stream `(f, t)` of the seeded generator.
#[allow(clippy::too_many_arguments)]
pub fn subsample_eval_kernels(
    kss: &SymMatrix,
    kts: &DMatrix<f64>,
    ys: &LabelMatrix,
    test_labels: &[usize],
    keep_fractions: &[f64],
    trials: usize,
    lambda0: f64,
    seed: u64,
) -> Result<Vec<SubsampleStat>> {
    if let Some(f) = keep_fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(Error::Config(format!("keep fraction {f} outside (0, 1]")));
    }
    if trials == 0 {
        return Err(Error::Config("subsampling needs at least one trial".into()));
    }
    let classes = ys.argmax();
    let full = accuracy(&krr_predict(kts, kss, ys, lambda0)?, test_labels);
    keep_fractions
        .iter()
        .enumerate()
        .map(|(fi, &f)| {
            let accs = (0..trials)
                .into_par_iter()
                .map(|t| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream(((fi as u64) << 32) | t as u64);
                    let idx = balanced_subset(&classes, ys.classes(), f, &mut rng);
                    let sub_kss = SymMatrix::symmetrized(kss.matrix().select_rows(&idx).select_columns(&idx));
                    let sub_kts = kts.select_columns(&idx);
                    let pred = krr_predict(&sub_kts, &sub_kss, &ys.select(&idx), lambda0)?;
                    Ok(accuracy(&pred, test_labels))
                })
                .collect::<Result<Vec<f64>>>()?;
            let mean = accs.iter().sum::<f64>() / trials as f64;
            let std = if trials > 1 {
                (accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (trials - 1) as f64).sqrt()
            } else {
                0.0
            };
            Ok(SubsampleStat {
                keep_fraction: f,
                mean_accuracy: mean,
                std_accuracy: std,
                relative_drop: if full > 0.0 { (full - mean) / full } else { 0.0 },
                trials: accs,
            })
        })
        .collect()
}

pub fn subsample_eval(
    support: &SupportSet,
    keep_fractions: &[f64],
    trials: usize,
    eval: &Dataset,
    spec: &KernelSpec,
    lambda0: f64,
    seed: u64,
) -> Result<Vec<SubsampleStat>> {
    let xs = &support.images;
    let kss = SymMatrix::symmetrized(kernel_matrix(xs, xs, spec)?);
    let kts = kernel_matrix(&eval.images, xs, spec)?;
    subsample_eval_kernels(&kss, &kts, &support.labels, &eval.labels, keep_fractions, trials, lambda0, seed)
}
