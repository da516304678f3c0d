//! Probability primitives shared by every other module.
//!
//! All logs are natural logs, so entropies and thresholds are in nats.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to probabilities before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Lower bound for every temperature-like parameter.
pub const MIN_TEMPERATURE: f64 = 1e-4;

/// Class probabilities produced by a softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Wraps a probability vector, checking range and normalization.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Domain(format!(
                "a probability vector needs at least 2 classes, got {}",
                values.len()
            )));
        }
        if values.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Domain("probability outside [0, 1]".into()));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("probabilities sum to {sum}, not 1")));
        }
        Ok(Self(values))
    }

    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn uniform(n_classes: usize) -> Self {
        Self(vec![1.0 / n_classes as f64; n_classes])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `ln(max(p, PROB_FLOOR))` for class `class`.
    pub fn ln_clamped(&self, class: usize) -> f64 {
        self.0[class].max(PROB_FLOOR).ln()
    }
}

/// Argmax class and its probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class_id: usize,
    pub confidence: f64,
}

/// Sensor-centred Cartesian coordinates in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PointXYZ {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl PointXYZ {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    /// Euclidean distance to the sensor origin.
    pub fn depth(&self) -> f64 {
        depth(self)
    }
}

/// Which uncertainty score drives the entropy-gated calibrators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum EntropyKind {
    /// Full Shannon entropy of the probability vector.
    #[default]
    #[serde(rename = "shannon")]
    Shannon,
    /// `-c ln c` on the top-class confidence only.
    #[serde(rename = "conf")]
    ConfEntropy,
}

impl EntropyKind {
    /// Scores a probability vector; uses the argmax probability for
    /// [`EntropyKind::ConfEntropy`].
    pub fn score(self, probs: &[f64]) -> f64 {
        match self {
            EntropyKind::Shannon => shannon_entropy(probs),
            EntropyKind::ConfEntropy => {
                let c = probs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if c > 0.0 {
                    -c * c.ln()
                } else {
                    0.0
                }
            }
        }
    }
}

impl std::str::FromStr for EntropyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shannon" => Ok(EntropyKind::Shannon),
            "conf" | "conf_entropy" => Ok(EntropyKind::ConfEntropy),
            other => Err(Error::InvalidConfig(format!("unknown entropy kind '{other}'"))),
        }
    }
}

/// Numerically stable softmax. Fails on any NaN or infinite logit.
pub fn softmax(logits: &[f64]) -> Result<ProbVector> {
    if let Some(index) = logits.iter().position(|z| !z.is_finite()) {
        return Err(Error::NonFiniteLogit { index });
    }
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, 1.0, &mut out);
    Ok(ProbVector(out))
}

/// Writes `softmax(logits / scale)` into `out`. Inputs must be finite and
/// `scale` positive; no checks are made.
pub fn softmax_into(logits: &[f64], scale: f64, out: &mut [f64]) {
    debug_assert_eq!(logits.len(), out.len());
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = ((z - max) / scale).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn predict(probs: &ProbVector) -> Prediction {
    let class_id = argmax(&probs.0);
    Prediction { class_id, confidence: probs.0[class_id] }
}

/// `-Σ p ln p` with `0 ln 0 = 0`.
pub fn shannon_entropy(probs: &[f64]) -> f64 {
    probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum()
}

/// `-c ln c` for a confidence in `(0, 1]`.
pub fn confidence_entropy(conf: f64) -> Result<f64> {
    if !(conf > 0.0 && conf <= 1.0) {
        return Err(Error::Domain(format!("confidence {conf} outside (0, 1]")));
    }
    Ok(-conf * conf.ln())
}

pub fn depth(p: &PointXYZ) -> f64 {
    (p.x * p.x + p.y * p.y + p.z * p.z).sqrt()
}
