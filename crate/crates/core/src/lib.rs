//! Region-based evidential deep learning for semantic segmentation.
//!
//! The crate is organised bottom-up:
//!
//! - [`special`]: digamma, trigamma and log-gamma evaluated in-repo.
//! - [`evidence`]: evidence fields, the `(e + 1)^2` Dirichlet mapping and label fields.
//! - [`losses`]: Bayes-risk losses (ML, CE, MSE, region Dice), the KL regulariser,
//!   annealing and analytic gradients with respect to evidence.
//! - [`net`]: a tiny two-layer convolutional network with a ReLU evidence head,
//!   manual backpropagation and Adam.
//! - [`synthdata`]: nested-ellipse synthetic images and the blur/noise/gamma perturbations.
//! - [`metrics`]: normalised predictive entropy, Dice, ECE, sUEO and BraS.
//! - [`oracles`]: Dirichlet sampling, Monte Carlo Bayes risk, finite differences and
//!   the theorem perturbation harness used as independent ground truth.
//! - [`io`] and [`cli`]: `.rbt` tensors, model files, PGM/CSV output and the command surface.

pub mod cli;
pub mod error;
pub mod evidence;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod oracles;
pub mod special;
pub mod synthdata;

pub use error::{EdlError, Result};
pub use evidence::{evidence_to_alpha, DirichletField, EvidenceField, LabelField};
pub use losses::{LossConfig, LossKind, LossValue};
pub use metrics::{MetricsReport, UncertaintyMap};
pub use net::{NetParams, TrainConfig};
