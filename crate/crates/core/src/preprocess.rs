//! Per-channel standardization, regularized ZCA whitening and simple image
//! augmentations.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::images::{ImageSet, Preprocessing};
use crate::linalg::{eigh, SymMatrix};

/// Standard deviations are floored here before dividing.
pub const STD_FLOOR: f64 = 1e-8;

/// Normalizes `apply_to` with per-channel mean and standard deviation taken
/// over every pixel of `train`.
pub fn standard_normalize(train: &ImageSet, apply_to: &ImageSet) -> Result<ImageSet> {
    if train.is_empty() {
        return Err(Error::EmptyDataset("standard_normalize needs training images".into()));
    }
    if train.channels() != apply_to.channels() {
        return Err(Error::ShapeMismatch(format!(
            "{} training channels vs {}",
            train.channels(),
            apply_to.channels()
        )));
    }
    let c = train.channels();
    let mut sum = vec![0.0; c];
    let mut sq = vec![0.0; c];
    for px in train.pixels().chunks_exact(c) {
        for k in 0..c {
            sum[k] += px[k];
            sq[k] += px[k] * px[k];
        }
    }
    let count = (train.pixels().len() / c) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
    let std: Vec<f64> = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / count - m * m).max(0.0).sqrt().max(STD_FLOOR))
        .collect();
    let mut out = apply_to.clone().with_tag(Preprocessing::Standard);
    for px in out.pixels_mut().chunks_exact_mut(c) {
        for k in 0..c {
            px[k] = (px[k] - mean[k]) / std[k];
        }
    }
    Ok(out)
}

/// `(μ + shift)^{-1/2}`, with non-positive arguments mapped to zero so that a
/// rank-deficient covariance whitens only its range.
pub fn phi(mu: f64, shift: f64) -> f64 {
    let v = mu + shift;
    if v > 0.0 {
        1.0 / v.sqrt()
    } else {
        0.0
    }
}

/// A fitted whitening map `W = U φ_λ(Σ) Uᵀ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZcaTransform {
    pub lambda: f64,
    /// Per-feature training mean and standard deviation used to build `C`.
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    /// Eigenvalues of `C`, ascending.
    pub eigenvalues: Vec<f64>,
    pub whitening: DMatrix<f64>,
}

impl ZcaTransform {
    pub fn dim(&self) -> usize {
        self.feature_std.len()
    }

    /// Standardizes features with the training statistics and applies `W`;
    /// one row per image. On the fitting set with `λ = 0` the result has
    /// identity covariance.
    pub fn whiten_features(&self, x: &ImageSet) -> Result<DMatrix<f64>> {
        self.check_dim(x)?;
        let mut z = DMatrix::from_row_slice(x.len(), x.image_len(), x.pixels());
        for j in 0..self.dim() {
            let (m, s) = (self.feature_mean[j], self.feature_std[j]);
            z.column_mut(j).iter_mut().for_each(|v| *v = (*v - m) / s);
        }
        Ok(z * &self.whitening)
    }

    fn check_dim(&self, x: &ImageSet) -> Result<()> {
        if x.image_len() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "ZCA fitted on {} features, images have {}",
                self.dim(),
                x.image_len()
            )));
        }
        Ok(())
    }
}

/// Centers one flattened image and scales it to unit standard deviation.
fn layer_norm(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    let std = var.sqrt().max(STD_FLOOR);
    v.iter_mut().for_each(|x| *x = (*x - mean) / std);
}

/// Fits regularized ZCA with shrinkage `φ_λ(μ) = (μ + λ·tr(C)/len(C))^{-1/2}`,
/// where `C` is the covariance of the flattened training images after each
/// feature is standardized across the set.
pub fn zca_fit(train: &ImageSet, lambda: f64) -> Result<ZcaTransform> {
    if train.len() < 2 {
        return Err(Error::EmptyDataset("zca_fit needs at least two images".into()));
    }
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("ZCA regularization must be nonnegative, got {lambda}")));
    }
    let (n, d) = (train.len(), train.image_len());
    let mut feats = DMatrix::from_row_slice(n, d, train.pixels());
    let mut feature_mean = vec![0.0; d];
    let mut feature_std = vec![0.0; d];
    for j in 0..d {
        let mut col = feats.column_mut(j);
        let mean = col.mean();
        let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        let s = var.sqrt().max(STD_FLOOR);
        col.iter_mut().for_each(|x| *x = (*x - mean) / s);
        feature_mean[j] = mean;
        feature_std[j] = s;
    }
    let cov = feats.transpose() * &feats / n as f64;
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateCovariance);
    }
    let cov = SymMatrix::symmetrized(cov);
    let shift = lambda * cov.trace() / d as f64;
    let (vals, vecs) = eigh(&cov)?;
    // eigenvalues under the rounding floor count as zero
    let top = vals.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let floor = top * d as f64 * f64::EPSILON;
    let mut scaled = vecs.clone();
    for (k, mut col) in scaled.column_iter_mut().enumerate() {
        let mu = if vals[k] > floor { vals[k] } else { 0.0 };
        col *= phi(mu, shift);
    }
    let whitening = SymMatrix::symmetrized(scaled * vecs.transpose()).into_matrix();
    Ok(ZcaTransform {
        lambda,
        feature_mean,
        feature_std,
        eigenvalues: vals.iter().copied().collect(),
        whitening,
    })
}

/// Layer-normalizes each flattened image and multiplies it by `W`.
pub fn zca_apply(t: &ZcaTransform, x: &ImageSet) -> Result<ImageSet> {
    t.check_dim(x)?;
    let rows: Vec<Vec<f64>> = x
        .iter()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|img| {
            let mut v = img.to_vec();
            layer_norm(&mut v);
            (&t.whitening * DVector::from_vec(v)).as_slice().to_vec()
        })
        .collect();
    let (h, w, c) = x.shape();
    ImageSet::new(x.len(), h, w, c, rows.concat(), Preprocessing::Zca { lambda: t.lambda })
}

/// A single geometric transform.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Augmentation {
    FlipH,
    /// Translation by whole pixels; exposed pixels are zero.
    Shift { dy: i32, dx: i32 },
    /// Rotation about the image center, bilinear.
    Rotate { degrees: f64 },
}

fn transform_one(img: &[f64], (h, w, c): (usize, usize, usize), kind: Augmentation) -> Vec<f64> {
    let mut out = vec![0.0; img.len()];
    match kind {
        Augmentation::FlipH => {
            for i in 0..h {
                for j in 0..w {
                    let (s, t) = ((i * w + j) * c, (i * w + (w - 1 - j)) * c);
                    out[t..t + c].copy_from_slice(&img[s..s + c]);
                }
            }
        }
        Augmentation::Shift { dy, dx } => {
            for i in 0..h as i32 {
                for j in 0..w as i32 {
                    let (si, sj) = (i - dy, j - dx);
                    if si < 0 || sj < 0 || si >= h as i32 || sj >= w as i32 {
                        continue;
                    }
                    let s = (si as usize * w + sj as usize) * c;
                    let t = (i as usize * w + j as usize) * c;
                    out[t..t + c].copy_from_slice(&img[s..s + c]);
                }
            }
        }
        Augmentation::Rotate { degrees } => {
            let (sin, cos) = degrees.to_radians().sin_cos();
            let (ci, cj) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
            let at = |i: isize, j: isize, k: usize| -> f64 {
                if i < 0 || j < 0 || i >= h as isize || j >= w as isize {
                    0.0
                } else {
                    img[(i as usize * w + j as usize) * c + k]
                }
            };
            for i in 0..h {
                for j in 0..w {
                    // inverse map the output pixel into the source image
                    let (y, x) = (i as f64 - ci, j as f64 - cj);
                    let sy = cos * y + sin * x + ci;
                    let sx = -sin * y + cos * x + cj;
                    let (y0, x0) = (sy.floor(), sx.floor());
                    let (fy, fx) = (sy - y0, sx - x0);
                    let (y0, x0) = (y0 as isize, x0 as isize);
                    for k in 0..c {
                        let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0, k) + fx * at(y0, x0 + 1, k))
                            + fy * ((1.0 - fx) * at(y0 + 1, x0, k) + fx * at(y0 + 1, x0 + 1, k));
                        out[(i * w + j) * c + k] = v;
                    }
                }
            }
        }
    }
    out
}

/// Applies `kind` to every image.
pub fn augment(x: &ImageSet, kind: Augmentation) -> ImageSet {
    let mut out = x.clone();
    let shape = x.shape();
    for i in 0..x.len() {
        let v = transform_one(x.image(i), shape, kind);
        out.image_mut(i).copy_from_slice(&v);
    }
    out
}

/// Draws a random transform: small rotation plus shift for grayscale images,
/// a coin-flip horizontal mirror plus shift for color images.
pub fn random_augmentations<R: Rng + ?Sized>(rng: &mut R, channels: usize) -> Vec<Augmentation> {
    let mut kinds = Vec::with_capacity(2);
    if channels == 1 {
        kinds.push(Augmentation::Rotate {
            degrees: rng.random_range(-10.0..=10.0),
        });
    } else if rng.random_bool(0.5) {
        kinds.push(Augmentation::FlipH);
    }
    kinds.push(Augmentation::Shift {
        dy: rng.random_range(-2..=2),
        dx: rng.random_range(-2..=2),
    });
    kinds
}

/// Augments image `i` of `x` in place with independently drawn transforms.
pub fn augment_image_in_place<R: Rng + ?Sized>(x: &mut ImageSet, i: usize, rng: &mut R) {
    let shape = x.shape();
    for kind in random_augmentations(rng, shape.2) {
        let v = transform_one(x.image(i), shape, kind);
        x.image_mut(i).copy_from_slice(&v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(n: usize, h: usize, w: usize, c: usize, seed: u64) -> ImageSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = (0..n * h * w * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        ImageSet::new(n, h, w, c, px, Preprocessing::Raw).unwrap()
    }

    #[test]
    fn standard_constant_channel_maps_to_zero() {
        let mut x = random_set(4, 3, 3, 2, 1);
        for px in x.pixels_mut().chunks_exact_mut(2) {
            px[1] = 7.5;
        }
        let y = standard_normalize(&x, &x).unwrap();
        assert!(y.pixels().chunks_exact(2).all(|p| p[1] == 0.0));
        assert_eq!(y.tag(), Preprocessing::Standard);
    }

    #[test]
    fn standard_train_has_unit_moments() {
        let x = random_set(20, 4, 4, 3, 2);
        let y = standard_normalize(&x, &x).unwrap();
        for k in 0..3 {
            let vals: Vec<f64> = y.pixels().chunks_exact(3).map(|p| p[k]).collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-6 && (var.sqrt() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn standard_held_out_mean_recomputed() {
        let train = random_set(10, 3, 3, 1, 3);
        let mut held = random_set(10, 3, 3, 1, 4);
        held.pixels_mut().iter_mut().for_each(|v| *v += 0.5);
        let out = standard_normalize(&train, &held).unwrap();
        let n = train.pixels().len() as f64;
        let mu = train.pixels().iter().sum::<f64>() / n;
        let sd = (train.pixels().iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n).sqrt();
        for (o, h) in out.pixels().iter().zip(held.pixels()) {
            assert!((o - (h - mu) / sd).abs() < 1e-12);
        }
        let out_mean = out.pixels().iter().sum::<f64>() / n;
        assert!(out_mean.abs() > 0.1);
    }

    #[test]
    fn phi_values() {
        assert_eq!(phi(3.0, 1.0), 0.5);
        assert_eq!(phi(0.0, 0.0), 0.0);
        assert!((phi(1.0, 0.0) - 1.0).abs() < 1e-12);
    }

    fn covariance_of_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
        let n = m.nrows();
        let mean = m.row_mean();
        let mut c = m.clone();
        for mut row in c.row_iter_mut() {
            row -= &mean;
        }
        c.transpose() * &c / n as f64
    }

    #[test]
    fn zca_zero_lambda_whitens_train() {
        let x = random_set(200, 3, 3, 1, 5);
        let t = zca_fit(&x, 0.0).unwrap();
        let c = covariance_of_rows(&t.whiten_features(&x).unwrap());
        for i in 0..c.nrows() {
            for j in 0..c.ncols() {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((c[(i, j)] - expect).abs() < 1e-6, "{i},{j}: {}", c[(i, j)]);
            }
        }
    }

    #[test]
    fn zca_white_data_gives_identity() {
        // a two-level full factorial design has uncorrelated standardized columns
        let px: Vec<f64> = (0..8)
            .flat_map(|r: usize| (0..3).map(move |k| if (r >> k) & 1 == 1 { 1.0 } else { -1.0 }))
            .collect();
        let x = ImageSet::new(8, 1, 1, 3, px, Preprocessing::Raw).unwrap();
        let t = zca_fit(&x, 0.0).unwrap();
        assert!((&t.whitening - DMatrix::<f64>::identity(3, 3)).amax() < 1e-12);
    }

    #[test]
    fn zca_zero_image_and_constant_shift() {
        let x = random_set(30, 4, 4, 1, 6);
        let t = zca_fit(&x, 0.1).unwrap();
        let zero = ImageSet::new(1, 4, 4, 1, vec![0.0; 16], Preprocessing::Raw).unwrap();
        assert!(zca_apply(&t, &zero).unwrap().pixels().iter().all(|&v| v == 0.0));
        let a = x.select(&[0]);
        let mut b = a.clone();
        b.pixels_mut().iter_mut().for_each(|v| *v += 3.0);
        let (ya, yb) = (zca_apply(&t, &a).unwrap(), zca_apply(&t, &b).unwrap());
        for (u, v) in ya.pixels().iter().zip(yb.pixels()) {
            assert!((u - v).abs() < 1e-9);
        }
        assert_eq!(ya.tag(), Preprocessing::Zca { lambda: 0.1 });
        let wrong = ImageSet::new(1, 2, 2, 1, vec![1.0; 4], Preprocessing::Raw).unwrap();
        assert!(zca_apply(&t, &wrong).is_err());
    }

    #[test]
    fn whitening_is_symmetric_psd_and_spread_shrinks() {
        let x = random_set(40, 3, 3, 1, 7);
        let mut last_ratio = f64::INFINITY;
        for lambda in [0.01, 0.1, 1.0, 10.0] {
            let t = zca_fit(&x, lambda).unwrap();
            let w = &t.whitening;
            assert!((w - w.transpose()).amax() < 1e-12);
            let eig = eigh(&SymMatrix::symmetrized(w.clone())).unwrap().0;
            assert!(eig.iter().all(|&v| v > -1e-12));
            let shift = lambda * t.eigenvalues.iter().sum::<f64>() / t.dim() as f64;
            let scales: Vec<f64> = t.eigenvalues.iter().map(|&m| phi(m.max(0.0), shift)).collect();
            let ratio = scales.iter().cloned().fold(0.0, f64::max) / scales.iter().cloned().fold(f64::INFINITY, f64::min);
            assert!(ratio < last_ratio);
            last_ratio = ratio;
        }
    }

    #[test]
    fn identity_augmentations() {
        let x = random_set(3, 5, 6, 2, 8);
        assert_eq!(augment(&x, Augmentation::Shift { dy: 0, dx: 0 }), x);
        let r = augment(&x, Augmentation::Rotate { degrees: 0.0 });
        for (a, b) in r.pixels().iter().zip(x.pixels()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(augment(&augment(&x, Augmentation::FlipH), Augmentation::FlipH), x);
    }

    #[test]
    fn shift_moves_pixels_and_zero_fills() {
        let x = ImageSet::new(1, 2, 3, 1, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], Preprocessing::Raw).unwrap();
        let y = augment(&x, Augmentation::Shift { dy: 1, dx: -1 });
        assert_eq!(y.pixels(), &[0.0, 0.0, 0.0, 2.0, 3.0, 0.0]);
    }

    #[test]
    fn rotation_preserves_blob_mass() {
        let (h, w) = (28, 28);
        let mut px = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                let (y, x) = (i as f64 - 13.5, j as f64 - 11.0);
                px[i * w + j] = (-(y * y + x * x) / 8.0).exp();
            }
        }
        let x = ImageSet::new(1, h, w, 1, px, Preprocessing::Raw).unwrap();
        let mass: f64 = x.pixels().iter().sum();
        for deg in [-10.0, -3.0, 7.5, 10.0] {
            let r = augment(&x, Augmentation::Rotate { degrees: deg });
            let m: f64 = r.pixels().iter().sum();
            assert!((m / mass - 1.0).abs() < 0.02, "{deg}: {m} vs {mass}");
        }
    }

    proptest! {
        #[test]
        fn flip_is_involution(seed in 0u64..1000, h in 1usize..6, w in 1usize..6, c in 1usize..4) {
            let x = random_set(2, h, w, c, seed);
            prop_assert_eq!(augment(&augment(&x, Augmentation::FlipH), Augmentation::FlipH), x);
        }

        #[test]
        fn random_draws_stay_in_range(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for kind in random_augmentations(&mut rng, 1) {
                match kind {
                    Augmentation::Rotate { degrees } => prop_assert!(degrees.abs() <= 10.0),
                    Augmentation::Shift { dy, dx } => prop_assert!(dy.abs() <= 2 && dx.abs() <= 2),
                    Augmentation::FlipH => prop_assert!(false),
                }
            }
        }
    }
}
