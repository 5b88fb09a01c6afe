//! Stacked Gaussian processes: networks of independently trained GP nodes
//! whose input uncertainty is propagated analytically or by sampling.

// `!(v > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiments;
pub mod gp;
pub mod ica;
pub mod io;
pub mod kernel;
pub mod moments;
pub mod network;
mod optim;
pub mod oracle;
pub mod rng;

pub use error::{Error, ErrorKind, Result};
pub use gp::{train, Affine, GPNode, GaussianBelief, TrainOptions, TrainingSet};
pub use kernel::{Kernel, KernelPart, PolynomialKernel, RbfKernel, SumKernel};
