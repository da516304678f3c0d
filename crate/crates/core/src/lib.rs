//! Post-hoc confidence calibration for 3D semantic segmentation.
//!
//! The crate consumes exported per-point logits together with point
//! coordinates and ground-truth labels, and provides:
//!
//! - [`prob`]: softmax, argmax prediction, entropy and depth primitives.
//! - [`metrics`]: per-scan expected calibration error, reliability bins,
//!   depth-binned confidence/accuracy profiles and IoU/mIoU.
//! - [`calibrators`]: temperature, vector (logistic), Dirichlet, meta and
//!   depth-aware scaling applied to logits.
//! - [`optim`]: negative log-likelihood fitting of those calibrators with a
//!   hand-written AdamW.
//! - [`synth`]: perfectly calibrated synthetic scans and known distortions.
//! - [`io`]: the binary scan format, manifests, parameter files and reports.

pub mod calibrators;
pub mod error;
pub mod eval;
pub mod io;
pub mod metrics;
pub mod optim;
pub mod prob;
pub mod scan;
pub mod synth;

pub use calibrators::{CalibratorParams, Method};
pub use error::{Error, Result};
pub use metrics::{BinStats, DepthBinRow, EvalReport};
pub use optim::{fit, FitConfig, FitResult};
pub use prob::{EntropyKind, PointXYZ, Prediction, ProbVector};
pub use scan::{Dataset, ScanRecord, IGNORE_LABEL};
pub use synth::SynthConfig;
