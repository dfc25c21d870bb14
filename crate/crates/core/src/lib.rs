//! Dataset distillation with Kernel Inducing Points (KIP) and Label Solve
//! over exact infinite-width neural network kernels.

pub mod distill;
pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datasets;
pub mod distrib;
pub mod error;
pub mod finite;
pub mod images;
pub mod kernel_grad;
pub mod kernels;
pub mod krr;
pub mod linalg;
pub mod preprocess;

pub use error::{Error, Result};
pub use images::{Dataset, ImageSet, Preprocessing};
pub use kernels::{Family, KernelKind, KernelSpec};
pub use krr::LabelMatrix;
