//! Kernel Inducing Points: gradient-based optimization of a small support
//! set against sampled batches of a target dataset, plus the closed-form
//! least-norm label solve.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::images::{Dataset, ImageSet};
use crate::kernel_grad::{loss_gradient_with, KernelBackend, LambdaMode, Local};
use crate::kernels::KernelSpec;
use crate::krr::{adaptive_lambda, LabelMatrix, DEFAULT_LAMBDA0};
use crate::linalg::{pinv, solve_psd, SymMatrix};
use crate::preprocess::augment_image_in_place;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moment buffers for the support images and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m_images: Vec<f64>,
    pub v_images: Vec<f64>,
    pub m_labels: DMatrix<f64>,
    pub v_labels: DMatrix<f64>,
}

impl AdamState {
    pub fn zeros(image_values: usize, rows: usize, classes: usize) -> Self {
        AdamState {
            step: 0,
            m_images: vec![0.0; image_values],
            v_images: vec![0.0; image_values],
            m_labels: DMatrix::zeros(rows, classes),
            v_labels: DMatrix::zeros(rows, classes),
        }
    }
}

fn adam_update(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], step: u64, lr: f64) {
    let c1 = 1.0 - ADAM_BETA1.powi(step as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
        if lr != 0.0 {
            param[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
        }
    }
}

/// The distilled dataset and its optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportSet {
    pub images: ImageSet,
    pub labels: LabelMatrix,
    pub train_labels: bool,
    pub optimizer: AdamState,
}

impl SupportSet {
    pub fn new(images: ImageSet, labels: LabelMatrix, train_labels: bool) -> Result<Self> {
        if images.len() != labels.rows() {
            return Err(Error::CountMismatch {
                images: images.len(),
                labels: labels.rows(),
            });
        }
        let optimizer = AdamState::zeros(images.pixels().len(), labels.rows(), labels.classes());
        Ok(SupportSet {
            images,
            labels,
            train_labels,
            optimizer,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub lambda0: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub target_batch_size: usize,
    pub augment: bool,
    pub augment_fraction: f64,
    pub train_labels: bool,
    pub kernel_pool: Vec<KernelSpec>,
    pub checkpoint_every: usize,
    pub seed: u64,
    /// Treat the ridge as a constant when differentiating.
    #[serde(default)]
    pub freeze_lambda: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            lambda0: DEFAULT_LAMBDA0,
            learning_rate: 0.01,
            steps: 500,
            target_batch_size: 256,
            augment: false,
            augment_fraction: 0.0,
            train_labels: false,
            kernel_pool: vec![KernelSpec::fc(3)],
            checkpoint_every: 50,
            seed: 0,
            freeze_lambda: false,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_batch_size == 0 {
            return Err(Error::Config("target batch size must be at least 1".into()));
        }
        if self.kernel_pool.is_empty() {
            return Err(Error::Config("kernel pool is empty".into()));
        }
        if !(0.0..=1.0).contains(&self.augment_fraction) {
            return Err(Error::Config(format!(
                "augment fraction {} outside [0, 1]",
                self.augment_fraction
            )));
        }
        if !(self.lambda0 > 0.0) || !(self.learning_rate >= 0.0) {
            return Err(Error::Config("lambda0 must be positive and the learning rate nonnegative".into()));
        }
        for spec in &self.kernel_pool {
            spec.validate()?;
        }
        Ok(())
    }

    fn lambda_mode(&self) -> LambdaMode {
        if self.freeze_lambda {
            LambdaMode::Frozen
        } else {
            LambdaMode::Adaptive
        }
    }
}

/// One Adam step on the KRR loss for `target`. Returns the updated support
/// and the loss before the update.
pub fn kip_step(
    support: &SupportSet,
    target: (&ImageSet, &LabelMatrix),
    spec: &KernelSpec,
    cfg: &DistillConfig,
) -> Result<(SupportSet, f64)> {
    kip_step_with(&Local, support, target, spec, cfg)
}

pub fn kip_step_with(
    backend: &dyn KernelBackend,
    support: &SupportSet,
    target: (&ImageSet, &LabelMatrix),
    spec: &KernelSpec,
    cfg: &DistillConfig,
) -> Result<(SupportSet, f64)> {
    let grad = loss_gradient_with(
        backend,
        &support.images,
        &support.labels,
        target.0,
        target.1,
        spec,
        cfg.lambda0,
        cfg.lambda_mode(),
    )
    .map_err(|e| match e {
        Error::NonFiniteGradient => Error::DivergedLoss(f64::NAN),
        other => other,
    })?;
    let mut next = support.clone();
    let opt = &mut next.optimizer;
    opt.step += 1;
    let step = opt.step;
    adam_update(
        next.images.pixels_mut(),
        &grad.images,
        &mut opt.m_images,
        &mut opt.v_images,
        step,
        cfg.learning_rate,
    );
    if support.train_labels {
        let mut labels = next.labels.values().clone();
        adam_update(
            labels.as_mut_slice(),
            grad.labels.as_slice(),
            opt.m_labels.as_mut_slice(),
            opt.v_labels.as_mut_slice(),
            step,
            cfg.learning_rate,
        );
        if cfg.learning_rate != 0.0 {
            next.labels = LabelMatrix::from_matrix(labels)?;
        }
    }
    Ok((next, grad.loss))
}

/// Support state at a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    /// Number of updates applied.
    pub step: usize,
    /// Mean train loss over the steps since the previous snapshot; NaN for
    /// the initial one.
    pub loss: f64,
    pub support: SupportSet,
}

/// Runs `cfg.steps` KIP steps, returning snapshots at step 0, every
/// `checkpoint_every` steps and at the end.
pub fn kip_train(support: &SupportSet, dataset: &Dataset, cfg: &DistillConfig) -> Result<Vec<Snapshot>> {
    kip_train_with(&Local, support, dataset, cfg, &mut |_| Ok(()))
}

/// [`kip_train`] with an explicit backend and a hook called on every
/// snapshot as it is taken.
pub fn kip_train_with(
    backend: &dyn KernelBackend,
    support: &SupportSet,
    dataset: &Dataset,
    cfg: &DistillConfig,
    on_snapshot: &mut dyn FnMut(&Snapshot) -> Result<()>,
) -> Result<Vec<Snapshot>> {
    cfg.validate()?;
    if dataset.len() <= support.len() {
        return Err(Error::EmptyDataset(format!(
            "target dataset has {} images for a support of {}",
            dataset.len(),
            support.len()
        )));
    }
    if !dataset.images.same_shape(&support.images) || dataset.classes != support.labels.classes() {
        return Err(Error::ShapeMismatch("dataset does not match the support set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let batch = cfg.target_batch_size.min(dataset.len());
    let mut current = support.clone();
    current.train_labels = cfg.train_labels;
    let mut out = Vec::new();
    let first = Snapshot {
        step: 0,
        loss: f64::NAN,
        support: current.clone(),
    };
    on_snapshot(&first)?;
    out.push(first);
    let every = cfg.checkpoint_every.max(1);
    let mut window = Vec::new();
    for step in 1..=cfg.steps {
        let idx = sample(&mut rng, dataset.len(), batch).into_vec();
        let mut xt = dataset.images.select(&idx);
        let classes: Vec<usize> = idx.iter().map(|&i| dataset.labels[i]).collect();
        let yt = LabelMatrix::centered_one_hot(&classes, dataset.classes)?;
        if cfg.augment && cfg.augment_fraction > 0.0 {
            let count = (cfg.augment_fraction * batch as f64).round() as usize;
            for i in sample(&mut rng, batch, count).into_vec() {
                augment_image_in_place(&mut xt, i, &mut rng);
            }
        }
        let spec = if cfg.kernel_pool.len() == 1 {
            cfg.kernel_pool[0]
        } else {
            cfg.kernel_pool[rng.random_range(0..cfg.kernel_pool.len())]
        };
        let (next, loss) = kip_step_with(backend, &current, (&xt, &yt), &spec, cfg)?;
        if !loss.is_finite() {
            return Err(Error::DivergedLoss(loss));
        }
        log::debug!("step {step}: loss {loss:.6e} ({spec})");
        window.push(loss);
        current = next;
        if step % every == 0 || step == cfg.steps {
            let snap = Snapshot {
                step,
                loss: window.iter().sum::<f64>() / window.len() as f64,
                support: current.clone(),
            };
            window.clear();
            on_snapshot(&snap)?;
            out.push(snap);
        }
    }
    Ok(out)
}

/// The snapshot with the lowest recorded train loss; the initial snapshot if
/// no steps were taken.
pub fn best_snapshot(trajectory: &[Snapshot]) -> Option<&Snapshot> {
    trajectory
        .iter()
        .filter(|s| s.loss.is_finite())
        .min_by(|a, b| a.loss.total_cmp(&b.loss))
        .or_else(|| trajectory.first())
}

/// Least-norm labels minimizing the KRR loss on the full target set:
/// `(K_ts (K_ss + λI)⁻¹)⁺ y_t`.
pub fn label_solve(
    kss: &SymMatrix,
    kts: &DMatrix<f64>,
    yt: &LabelMatrix,
    lambda0: f64,
    rcond: f64,
) -> Result<LabelMatrix> {
    if kts.ncols() != kss.order() || kts.nrows() != yt.rows() {
        return Err(Error::ShapeMismatch("kernel blocks do not match labels".into()));
    }
    let a = label_solve_operator(kss, kts, lambda0)?;
    LabelMatrix::from_matrix(pinv(&a, rcond) * yt.values())
}

/// `A = K_ts (K_ss + λI)⁻¹`, mapping support labels to target predictions.
pub fn label_solve_operator(kss: &SymMatrix, kts: &DMatrix<f64>, lambda0: f64) -> Result<DMatrix<f64>> {
    let lambda = adaptive_lambda(kss, lambda0);
    Ok(solve_psd(kss, &kts.transpose(), lambda)?.transpose())
}

/// Class-balanced random support with centered one-hot labels, grouped by
/// class.
pub fn init_support(dataset: &Dataset, imgs_per_class: usize, seed: u64) -> Result<SupportSet> {
    let chosen = support_indices(dataset, imgs_per_class, seed)?;
    let images = dataset.images.select(&chosen);
    let classes: Vec<usize> = chosen.iter().map(|&i| dataset.labels[i]).collect();
    let labels = LabelMatrix::centered_one_hot(&classes, dataset.classes)?;
    SupportSet::new(images, labels, false)
}

/// Indices chosen by [`init_support`] for the same arguments.
pub fn support_indices(dataset: &Dataset, imgs_per_class: usize, seed: u64) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::new();
    for (class, members) in dataset.class_indices().iter().enumerate() {
        if members.len() < imgs_per_class {
            return Err(Error::InsufficientClassExamples {
                class,
                available: members.len(),
                requested: imgs_per_class,
            });
        }
        chosen.extend(sample(&mut rng, members.len(), imgs_per_class).into_iter().map(|k| members[k]));
    }
    Ok(chosen)
}
