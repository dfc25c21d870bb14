//! Kernel ridge regression with a trace-scaled ridge.
//!
//! Given support kernel `K_ss`, target-support kernel `K_ts` and support
//! labels `y_s`, predictions are `K_ts (K_ss + λI)⁻¹ y_s` with
//! `λ = λ0 · tr(K_ss) / n`, so the regularizer follows the kernel's scale.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{solve_psd, SymMatrix};

/// Default relative ridge.
pub const DEFAULT_LAMBDA0: f64 = 1e-6;

/// Per-example class scores, one row per example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelMatrix {
    values: DMatrix<f64>,
    centered_one_hot: bool,
}

impl LabelMatrix {
    /// Rows `e_c − 𝟙/K` for each class `c`.
    pub fn centered_one_hot(classes: &[usize], num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::ShapeMismatch("need at least one class".into()));
        }
        let off = -1.0 / num_classes as f64;
        let mut values = DMatrix::from_element(classes.len(), num_classes, off);
        for (i, &c) in classes.iter().enumerate() {
            if c >= num_classes {
                return Err(Error::ShapeMismatch(format!("class {c} outside 0..{num_classes}")));
            }
            values[(i, c)] += 1.0;
        }
        Ok(LabelMatrix {
            values,
            centered_one_hot: true,
        })
    }

    /// Arbitrary real-valued labels.
    pub fn from_matrix(values: DMatrix<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch("labels must be finite".into()));
        }
        Ok(LabelMatrix {
            values,
            centered_one_hot: false,
        })
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn classes(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_centered_one_hot(&self) -> bool {
        self.centered_one_hot
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    /// Mutable access drops the one-hot tag.
    pub fn values_mut(&mut self) -> &mut DMatrix<f64> {
        self.centered_one_hot = false;
        &mut self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        LabelMatrix {
            values: self.values.select_rows(rows),
            centered_one_hot: self.centered_one_hot,
        }
    }

    /// Row-wise argmax, ties going to the lowest class index.
    pub fn argmax(&self) -> Vec<usize> {
        self.values
            .row_iter()
            .map(|row| {
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                best
            })
            .collect()
    }
}

/// `λ0 · tr(K_ss) / n`.
pub fn adaptive_lambda(kss: &SymMatrix, lambda0: f64) -> f64 {
    let n = kss.order().max(1);
    lambda0 * kss.trace() / n as f64
}

fn check_shapes(kss: &SymMatrix, kts: &DMatrix<f64>, ys: &LabelMatrix) -> Result<()> {
    let n = kss.order();
    if n == 0 {
        return Err(Error::EmptyDataset("support set is empty".into()));
    }
    if kts.ncols() != n || ys.rows() != n {
        return Err(Error::ShapeMismatch(format!(
            "K_ss is {n}x{n}, K_ts has {} columns, y_s has {} rows",
            kts.ncols(),
            ys.rows()
        )));
    }
    Ok(())
}

/// `(K_ss + λI)⁻¹ y_s` and the `λ` used.
pub fn krr_coefficients(kss: &SymMatrix, ys: &DMatrix<f64>, lambda0: f64) -> Result<(DMatrix<f64>, f64)> {
    let lambda = adaptive_lambda(kss, lambda0);
    Ok((solve_psd(kss, ys, lambda)?, lambda))
}

/// `K_ts (K_ss + λI)⁻¹ y_s`.
pub fn krr_predict(kts: &DMatrix<f64>, kss: &SymMatrix, ys: &LabelMatrix, lambda0: f64) -> Result<LabelMatrix> {
    check_shapes(kss, kts, ys)?;
    let (alpha, _) = krr_coefficients(kss, ys.values(), lambda0)?;
    LabelMatrix::from_matrix(kts * alpha)
}

/// `½‖y_t − K_ts (K_ss + λI)⁻¹ y_s‖²`, summed over targets and classes.
pub fn krr_loss(kss: &SymMatrix, kts: &DMatrix<f64>, ys: &LabelMatrix, yt: &LabelMatrix, lambda0: f64) -> Result<f64> {
    let pred = krr_predict(kts, kss, ys, lambda0)?;
    if yt.rows() != kts.nrows() || yt.classes() != ys.classes() {
        return Err(Error::ShapeMismatch("target labels do not match K_ts".into()));
    }
    Ok(0.5 * (yt.values() - pred.values()).norm_squared())
}

/// Fraction of rows whose argmax equals the true class.
pub fn accuracy(pred: &LabelMatrix, truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = pred.argmax().iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len() as f64
}
