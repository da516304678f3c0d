//! Post-hoc calibrators applied to a single point's logits.
//!
//! | method | transform of logits `z`                                   | keeps argmax |
//! |--------|-----------------------------------------------------------|--------------|
//! | TempS  | `z / T`                                                   | yes          |
//! | LogiS  | `w ⊙ z + b`                                               | no           |
//! | DiriS  | `w ⊙ ln softmax(z) + b`                                   | no           |
//! | MetaC  | uniform if entropy > η, else `z / T`                      | no           |
//! | DeptS  | `z / ((k1·d + k2) · T_branch)`, branch chosen by entropy  | yes          |

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prob::{
    argmax, softmax, softmax_into, EntropyKind, PointXYZ, Prediction, ProbVector, MIN_TEMPERATURE,
    PROB_FLOOR,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    TempS,
    LogiS,
    DiriS,
    MetaC,
    DeptS,
}

impl Method {
    pub const ALL: [Method; 5] =
        [Method::TempS, Method::LogiS, Method::DiriS, Method::MetaC, Method::DeptS];

    pub fn name(self) -> &'static str {
        match self {
            Method::TempS => "temps",
            Method::LogiS => "logis",
            Method::DiriS => "diris",
            Method::MetaC => "metac",
            Method::DeptS => "depts",
        }
    }

    /// Whether the calibrated prediction always equals the raw argmax.
    pub fn preserves_argmax(self) -> bool {
        matches!(self, Method::TempS | Method::DeptS)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown calibration method '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TempSParams {
    pub temperature: f64,
}

/// Diagonal weights and biases over classes, shared by LogiS and DiriS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorParams {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl VectorParams {
    pub fn identity(n_classes: usize) -> Self {
        Self { w: vec![1.0; n_classes], b: vec![0.0; n_classes] }
    }
}

pub type LogiSParams = VectorParams;
pub type DiriSParams = VectorParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaCParams {
    pub temperature: f64,
    pub eta: f64,
    pub entropy_kind: EntropyKind,
}

/// Depth-aware scaling. The effective temperature of a point at depth `d`
/// is `(k1·d + k2) · t1` when its entropy exceeds `eta`, else `(k1·d + k2) · t2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeptSParams {
    /// Temperature of the high-entropy branch.
    #[serde(rename = "t1")]
    pub t_high: f64,
    /// Temperature of the low-entropy branch.
    #[serde(rename = "t2")]
    pub t_low: f64,
    pub k1: f64,
    pub k2: f64,
    pub eta: f64,
    pub entropy_kind: EntropyKind,
}

impl DeptSParams {
    pub fn alpha(&self, depth: f64) -> f64 {
        self.k1 * depth + self.k2
    }

    fn branch_temperature(&self, entropy: f64) -> f64 {
        if entropy > self.eta {
            self.t_high
        } else {
            self.t_low
        }
    }
}

/// Fitted parameters of any calibrator.
#[derive(Debug, Clone, PartialEq)]
pub enum CalibratorParams {
    TempS(TempSParams),
    LogiS(LogiSParams),
    DiriS(DiriSParams),
    MetaC(MetaCParams),
    DeptS(DeptSParams),
}

impl CalibratorParams {
    pub fn method(&self) -> Method {
        match self {
            CalibratorParams::TempS(_) => Method::TempS,
            CalibratorParams::LogiS(_) => Method::LogiS,
            CalibratorParams::DiriS(_) => Method::DiriS,
            CalibratorParams::MetaC(_) => Method::MetaC,
            CalibratorParams::DeptS(_) => Method::DeptS,
        }
    }

    pub fn entropy_kind(&self) -> Option<EntropyKind> {
        match self {
            CalibratorParams::MetaC(p) => Some(p.entropy_kind),
            CalibratorParams::DeptS(p) => Some(p.entropy_kind),
            _ => None,
        }
    }

    /// Checks feasibility, and the class count for vector-valued methods.
    pub fn validate(&self, n_classes: usize) -> Result<()> {
        let temp = |name: &str, t: f64| {
            if t.is_finite() && t >= MIN_TEMPERATURE {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("{name} = {t} must be finite and >= 1e-4")))
            }
        };
        let finite = |name: &str, v: f64| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("{name} = {v} must be finite")))
            }
        };
        let eta = |e: f64| {
            if e >= 0.0 {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("eta = {e} must be >= 0")))
            }
        };
        match self {
            CalibratorParams::TempS(p) => temp("T", p.temperature),
            CalibratorParams::LogiS(p) | CalibratorParams::DiriS(p) => {
                for v in [&p.w, &p.b] {
                    if v.len() != n_classes {
                        return Err(Error::DimensionMismatch {
                            expected: n_classes,
                            actual: v.len(),
                        });
                    }
                }
                p.w.iter().chain(&p.b).try_for_each(|&v| finite("w/b", v))
            }
            CalibratorParams::MetaC(p) => {
                temp("T", p.temperature)?;
                eta(p.eta)
            }
            CalibratorParams::DeptS(p) => {
                temp("t1", p.t_high)?;
                temp("t2", p.t_low)?;
                temp("k1", p.k1)?;
                finite("k2", p.k2)?;
                eta(p.eta)
            }
        }
    }
}

fn check_finite(logits: &[f64]) -> Result<()> {
    match logits.iter().position(|z| !z.is_finite()) {
        Some(index) => Err(Error::NonFiniteLogit { index }),
        None => Ok(()),
    }
}

fn check_dims(params: &VectorParams, logits: &[f64]) -> Result<()> {
    for v in [&params.w, &params.b] {
        if v.len() != logits.len() {
            return Err(Error::DimensionMismatch { expected: logits.len(), actual: v.len() });
        }
    }
    Ok(())
}

/// Softmax of `z / scale`, reporting the raw argmax as the prediction.
fn scaled(logits: &[f64], scale: f64) -> (Prediction, ProbVector) {
    let mut probs = vec![0.0; logits.len()];
    softmax_into(logits, scale, &mut probs);
    let class_id = argmax(logits);
    let confidence = probs[class_id];
    (Prediction { class_id, confidence }, ProbVector::from_raw(probs))
}

fn free(probs: Vec<f64>) -> (Prediction, ProbVector) {
    let class_id = argmax(&probs);
    let confidence = probs[class_id];
    (Prediction { class_id, confidence }, ProbVector::from_raw(probs))
}

/// Uncalibrated softmax prediction.
pub fn apply_identity(logits: &[f64]) -> Result<(Prediction, ProbVector)> {
    check_finite(logits)?;
    Ok(scaled(logits, 1.0))
}

pub fn apply_temps(params: &TempSParams, logits: &[f64]) -> Result<(Prediction, ProbVector)> {
    check_finite(logits)?;
    Ok(scaled(logits, params.temperature))
}

pub fn apply_logis(params: &LogiSParams, logits: &[f64]) -> Result<(Prediction, ProbVector)> {
    check_dims(params, logits)?;
    check_finite(logits)?;
    let u: Vec<f64> = logits
        .iter()
        .zip(&params.w)
        .zip(&params.b)
        .map(|((z, w), b)| w * z + b)
        .collect();
    Ok(free(softmax(&u)?.into_inner()))
}

pub fn apply_diris(params: &DiriSParams, logits: &[f64]) -> Result<(Prediction, ProbVector)> {
    check_dims(params, logits)?;
    let base = softmax(logits)?;
    let u: Vec<f64> = base
        .as_slice()
        .iter()
        .zip(&params.w)
        .zip(&params.b)
        .map(|((p, w), b)| w * p.max(PROB_FLOOR).ln() + b)
        .collect();
    Ok(free(softmax(&u)?.into_inner()))
}

/// MetaC with the random class supplied by `draw_class(n_classes)`.
pub(crate) fn apply_metac_with(
    params: &MetaCParams,
    logits: &[f64],
    draw_class: impl FnOnce(usize) -> usize,
) -> Result<(Prediction, ProbVector)> {
    let base = softmax(logits)?;
    let n = logits.len();
    if params.entropy_kind.score(base.as_slice()) > params.eta {
        let class_id = draw_class(n);
        let probs = ProbVector::uniform(n);
        return Ok((Prediction { class_id, confidence: 1.0 / n as f64 }, probs));
    }
    Ok(scaled(logits, params.temperature))
}

pub fn apply_metac<R: Rng + ?Sized>(
    params: &MetaCParams,
    logits: &[f64],
    rng: &mut R,
) -> Result<(Prediction, ProbVector)> {
    apply_metac_with(params, logits, |n| rng.random_range(0..n))
}

pub fn apply_depts(
    params: &DeptSParams,
    logits: &[f64],
    point: &PointXYZ,
) -> Result<(Prediction, ProbVector)> {
    let base = softmax(logits)?;
    let alpha = params.alpha(point.depth());
    if alpha.is_nan() || alpha < MIN_TEMPERATURE {
        return Err(Error::NonPositiveAlpha { scan: 0, point: 0, alpha });
    }
    let t = params.branch_temperature(params.entropy_kind.score(base.as_slice()));
    Ok(scaled(logits, alpha * t))
}
