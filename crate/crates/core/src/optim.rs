//! Negative log-likelihood fitting of calibrator parameters.
//!
//! Gradients are closed-form: for transformed logits `u` and
//! `p = softmax(u)`, `∂NLL/∂u = p - onehot(y)`, chained through each
//! calibrator's transform. Parameters are updated with AdamW and then
//! projected back onto their feasible sets.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibrators::{
    CalibratorParams, DeptSParams, MetaCParams, Method, TempSParams, VectorParams,
};
use crate::error::{Error, Result};
use crate::metrics::DEFAULT_BINS;
use crate::prob::{argmax, softmax_into, EntropyKind, ProbVector, MIN_TEMPERATURE, PROB_FLOOR};
use crate::scan::Dataset;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// How the entropy threshold is derived from the fit set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdEstimator {
    /// Midpoint of the mean entropies of correct and incorrect predictions.
    #[default]
    Midpoint,
    /// Crossing of the two class-conditional entropy histograms.
    Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Whole scans per optimizer step.
    pub batch_scans: usize,
    pub seed: u64,
    pub m_bins: usize,
    pub entropy_kind: EntropyKind,
    /// Fixed threshold for MetaC/DeptS; selected from the fit set when `None`.
    pub eta: Option<f64>,
    pub eta_estimator: ThresholdEstimator,
    /// Subsample each DeptS batch to all incorrect plus a slice of the
    /// correct points while fitting.
    pub balanced_sampling: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 1e-3,
            weight_decay: 1e-6,
            batch_scans: 8,
            seed: 0,
            m_bins: DEFAULT_BINS,
            entropy_kind: EntropyKind::Shannon,
            eta: None,
            eta_estimator: ThresholdEstimator::Midpoint,
            balanced_sampling: false,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig("learning rate must be > 0".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidConfig("weight decay must be >= 0".into()));
        }
        if self.batch_scans < 1 {
            return Err(Error::InvalidConfig("batch size must be >= 1 scan".into()));
        }
        if self.m_bins < 1 {
            return Err(Error::InvalidConfig("bin count must be >= 1".into()));
        }
        if let Some(eta) = self.eta {
            if eta.is_nan() || eta < 0.0 {
                return Err(Error::InvalidConfig(format!("eta = {eta} must be >= 0")));
            }
        }
        Ok(())
    }
}

/// First and second moment state of AdamW.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamW {
    pub fn new(n_params: usize) -> Self {
        Self {
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    /// One decoupled-weight-decay update followed by clamping every
    /// parameter to its lower bound.
    pub fn step(
        &mut self,
        params: &mut [f64],
        grads: &[f64],
        lower: &[f64],
        lr: f64,
        weight_decay: f64,
    ) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        assert_eq!(lower.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + weight_decay * params[i]);
            params[i] = params[i].max(lower[i]);
        }
    }
}

/// Flattened learnable parameters of a calibrator.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub method: Method,
    pub values: Vec<f64>,
    pub lower: Vec<f64>,
    /// Entropy threshold and kind (MetaC, DeptS); not learned.
    pub eta: f64,
    pub entropy_kind: EntropyKind,
}

impl ParamVector {
    pub fn from_params(params: &CalibratorParams) -> Self {
        let free = f64::NEG_INFINITY;
        let (values, lower, eta, entropy_kind) = match params {
            CalibratorParams::TempS(p) => {
                (vec![p.temperature], vec![MIN_TEMPERATURE], 0.0, EntropyKind::Shannon)
            }
            CalibratorParams::LogiS(p) | CalibratorParams::DiriS(p) => {
                let values = p.w.iter().chain(&p.b).copied().collect::<Vec<_>>();
                let lower = vec![free; values.len()];
                (values, lower, 0.0, EntropyKind::Shannon)
            }
            CalibratorParams::MetaC(p) => {
                (vec![p.temperature], vec![MIN_TEMPERATURE], p.eta, p.entropy_kind)
            }
            CalibratorParams::DeptS(p) => (
                vec![p.t_high, p.t_low, p.k1, p.k2],
                vec![MIN_TEMPERATURE, MIN_TEMPERATURE, MIN_TEMPERATURE, free],
                p.eta,
                p.entropy_kind,
            ),
        };
        Self { method: params.method(), values, lower, eta, entropy_kind }
    }

    pub fn to_params(&self) -> CalibratorParams {
        let v = &self.values;
        match self.method {
            Method::TempS => CalibratorParams::TempS(TempSParams { temperature: v[0] }),
            Method::LogiS | Method::DiriS => {
                let n = v.len() / 2;
                let p = VectorParams { w: v[..n].to_vec(), b: v[n..].to_vec() };
                if self.method == Method::LogiS {
                    CalibratorParams::LogiS(p)
                } else {
                    CalibratorParams::DiriS(p)
                }
            }
            Method::MetaC => CalibratorParams::MetaC(MetaCParams {
                temperature: v[0],
                eta: self.eta,
                entropy_kind: self.entropy_kind,
            }),
            Method::DeptS => CalibratorParams::DeptS(DeptSParams {
                t_high: v[0],
                t_low: v[1],
                k1: v[2],
                k2: v[3],
                eta: self.eta,
                entropy_kind: self.entropy_kind,
            }),
        }
    }
}

/// Initial parameters of each method before fitting.
pub fn initial_params(
    method: Method,
    n_classes: usize,
    eta: f64,
    entropy_kind: EntropyKind,
) -> CalibratorParams {
    match method {
        Method::TempS => CalibratorParams::TempS(TempSParams { temperature: 1.0 }),
        Method::LogiS => CalibratorParams::LogiS(VectorParams::identity(n_classes)),
        Method::DiriS => CalibratorParams::DiriS(VectorParams::identity(n_classes)),
        Method::MetaC => {
            CalibratorParams::MetaC(MetaCParams { temperature: 1.0, eta, entropy_kind })
        }
        // the high-entropy branch starts slightly sharper than the low one
        Method::DeptS => CalibratorParams::DeptS(DeptSParams {
            t_high: 0.9,
            t_low: 1.0,
            k1: 0.1,
            k2: 0.0,
            eta,
            entropy_kind,
        }),
    }
}

/// Valid points of a dataset laid out for loss and gradient evaluation.
#[derive(Debug, Clone)]
pub struct FitData {
    pub n_classes: usize,
    pub logits: Vec<f64>,
    /// `ln max(softmax(z), PROB_FLOOR)` per point, the DiriS input.
    pub log_probs: Vec<f64>,
    pub labels: Vec<usize>,
    pub depths: Vec<f64>,
    /// Entropy of the uncalibrated softmax under `entropy_kind`.
    pub entropy: Vec<f64>,
    /// Whether the uncalibrated argmax equals the label.
    pub correct: Vec<bool>,
    pub scan_ranges: Vec<Range<usize>>,
    pub entropy_kind: EntropyKind,
}

impl FitData {
    pub fn new(dataset: &Dataset, entropy_kind: EntropyKind) -> Self {
        let s = dataset.n_classes;
        let n_valid: usize = dataset.scans.iter().map(|sc| sc.n_valid()).sum();
        let mut data = FitData {
            n_classes: s,
            logits: Vec::with_capacity(n_valid * s),
            log_probs: Vec::with_capacity(n_valid * s),
            labels: Vec::with_capacity(n_valid),
            depths: Vec::with_capacity(n_valid),
            entropy: Vec::with_capacity(n_valid),
            correct: Vec::with_capacity(n_valid),
            scan_ranges: Vec::with_capacity(dataset.scans.len()),
            entropy_kind,
        };
        let mut probs = vec![0.0; s];
        for scan in &dataset.scans {
            let start = data.labels.len();
            for i in 0..scan.len() {
                let Some(label) = scan.label(i) else { continue };
                let z = scan.logits(i);
                softmax_into(z, 1.0, &mut probs);
                data.logits.extend_from_slice(z);
                data.log_probs.extend(probs.iter().map(|p| p.max(PROB_FLOOR).ln()));
                data.labels.push(label);
                data.depths.push(scan.points[i].depth());
                data.entropy.push(entropy_kind.score(&probs));
                data.correct.push(argmax(z) == label);
            }
            data.scan_ranges.push(start..data.labels.len());
        }
        data
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn logits(&self, i: usize) -> &[f64] {
        &self.logits[i * self.n_classes..(i + 1) * self.n_classes]
    }

    fn log_probs(&self, i: usize) -> &[f64] {
        &self.log_probs[i * self.n_classes..(i + 1) * self.n_classes]
    }
}

/// Mean NLL `-(1/N) Σ ln max(p_i[y_i], PROB_FLOOR)`.
pub fn nll_loss(probs: &[ProbVector], labels: &[usize]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if probs.len() != labels.len() {
        return Err(Error::DimensionMismatch { expected: probs.len(), actual: labels.len() });
    }
    let total: f64 = probs.iter().zip(labels).map(|(p, &y)| -p.ln_clamped(y)).sum();
    Ok(total / probs.len() as f64)
}

/// Loss and gradient accumulated over `indices`, both averaged.
fn loss_and_grad(
    theta: &ParamVector,
    data: &FitData,
    indices: impl Iterator<Item = usize>,
    want_grad: bool,
) -> (f64, Vec<f64>, usize) {
    let s = data.n_classes;
    let v = &theta.values;
    let mut grad = vec![0.0; v.len()];
    let mut loss = 0.0;
    let mut n = 0usize;
    let mut u = vec![0.0; s];
    let mut p = vec![0.0; s];

    for i in indices {
        n += 1;
        let z = data.logits(i);
        let y = data.labels[i];
        // u holds the transformed logits, divided by `scale` inside the softmax
        let scale = match theta.method {
            Method::TempS | Method::MetaC => {
                u.copy_from_slice(z);
                v[0]
            }
            Method::LogiS => {
                for c in 0..s {
                    u[c] = v[c] * z[c] + v[s + c];
                }
                1.0
            }
            Method::DiriS => {
                let l = data.log_probs(i);
                for c in 0..s {
                    u[c] = v[c] * l[c] + v[s + c];
                }
                1.0
            }
            Method::DeptS => {
                u.copy_from_slice(z);
                let alpha = (v[2] * data.depths[i] + v[3]).max(MIN_TEMPERATURE);
                let t = if data.entropy[i] > theta.eta { v[0] } else { v[1] };
                alpha * t
            }
        };
        softmax_into(&u, scale, &mut p);
        let py = p[y];
        if py < PROB_FLOOR {
            loss -= PROB_FLOOR.ln();
            continue;
        }
        loss -= py.ln();
        if !want_grad {
            continue;
        }
        // g = p - onehot(y)
        p[y] -= 1.0;
        match theta.method {
            Method::TempS | Method::MetaC => {
                let gz: f64 = p.iter().zip(z).map(|(g, z)| g * z).sum();
                grad[0] -= gz / (scale * scale);
            }
            Method::LogiS => {
                for c in 0..s {
                    grad[c] += p[c] * z[c];
                    grad[s + c] += p[c];
                }
            }
            Method::DiriS => {
                let l = data.log_probs(i);
                for c in 0..s {
                    grad[c] += p[c] * l[c];
                    grad[s + c] += p[c];
                }
            }
            Method::DeptS => {
                let gz: f64 = p.iter().zip(z).map(|(g, z)| g * z).sum();
                let d_scale = -gz / (scale * scale);
                let raw_alpha = v[2] * data.depths[i] + v[3];
                let high = data.entropy[i] > theta.eta;
                let t = if high { v[0] } else { v[1] };
                let alpha = raw_alpha.max(MIN_TEMPERATURE);
                grad[if high { 0 } else { 1 }] += d_scale * alpha;
                if raw_alpha >= MIN_TEMPERATURE {
                    grad[2] += d_scale * t * data.depths[i];
                    grad[3] += d_scale * t;
                }
            }
        }
    }
    if n > 0 {
        loss /= n as f64;
        for g in &mut grad {
            *g /= n as f64;
        }
    }
    (loss, grad, n)
}

/// Training objective over every point of `data`. MetaC's objective is the
/// temperature-scaled NLL; its uniform branch has nothing to learn.
pub fn nll(params: &CalibratorParams, data: &FitData) -> f64 {
    let theta = ParamVector::from_params(params);
    loss_and_grad(&theta, data, 0..data.len(), false).0
}

/// `∂NLL/∂θ` over every point of `data`, in [`ParamVector`] order.
pub fn nll_gradients(params: &CalibratorParams, data: &FitData) -> Vec<f64> {
    let theta = ParamVector::from_params(params);
    loss_and_grad(&theta, data, 0..data.len(), true).1
}

fn split_entropies(data: &FitData) -> (Vec<f64>, Vec<f64>) {
    let mut correct = vec![];
    let mut incorrect = vec![];
    for (h, &ok) in data.entropy.iter().zip(&data.correct) {
        if ok {
            correct.push(*h);
        } else {
            incorrect.push(*h);
        }
    }
    (correct, incorrect)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Midpoint between two class-conditional mean entropies.
pub fn midpoint_threshold(mean_correct: f64, mean_incorrect: f64) -> f64 {
    0.5 * (mean_correct + mean_incorrect)
}

fn histogram_threshold(correct: &[f64], incorrect: &[f64]) -> f64 {
    const BINS: usize = 50;
    let max = correct.iter().chain(incorrect).copied().fold(0.0, f64::max);
    if max <= 0.0 {
        return 0.0;
    }
    let width = max / BINS as f64;
    let density = |v: &[f64]| {
        let mut h = vec![0.0; BINS];
        for &x in v {
            h[((x / width) as usize).min(BINS - 1)] += 1.0;
        }
        let n = v.len() as f64;
        h.iter_mut().for_each(|c| *c /= n);
        h
    };
    let (dc, di) = (density(correct), density(incorrect));
    let (mc, mi) = (mean(correct), mean(incorrect));
    let (lo, hi) = (mc.min(mi), mc.max(mi));
    let center = |b: usize| (b as f64 + 0.5) * width;
    (0..BINS)
        .filter(|&b| center(b) >= lo && center(b) <= hi)
        .min_by(|&a, &b| {
            let da = (dc[a] - di[a]).abs();
            let db = (dc[b] - di[b]).abs();
            da.total_cmp(&db)
        })
        .map(center)
        .unwrap_or_else(|| midpoint_threshold(mc, mi))
}

pub fn threshold_from_data(data: &FitData, estimator: ThresholdEstimator) -> Result<f64> {
    let (correct, incorrect) = split_entropies(data);
    if correct.is_empty() || incorrect.is_empty() {
        return Err(Error::DegenerateSplit { correct: correct.len(), incorrect: incorrect.len() });
    }
    Ok(match estimator {
        ThresholdEstimator::Midpoint => midpoint_threshold(mean(&correct), mean(&incorrect)),
        ThresholdEstimator::Histogram => histogram_threshold(&correct, &incorrect),
    })
}

/// Entropy threshold separating correct from incorrect uncalibrated
/// predictions of the fit set.
pub fn select_entropy_threshold(
    dataset: &Dataset,
    entropy_kind: EntropyKind,
    estimator: ThresholdEstimator,
) -> Result<f64> {
    threshold_from_data(&FitData::new(dataset, entropy_kind), estimator)
}

/// Positions (into `correct`) of a balanced DeptS training subset: every
/// incorrect point, followed by the correct points `[s, s + n_pos/2)` of
/// the correct-only sequence, with `s` uniform on `[1, n_pos/3]`.
pub fn depts_batch_sampler<R: Rng + ?Sized>(correct: &[bool], rng: &mut R) -> Result<Vec<usize>> {
    let pos: Vec<usize> = (0..correct.len()).filter(|&i| correct[i]).collect();
    let n_pos = pos.len();
    if n_pos < 3 {
        return Err(Error::TooFewPositives { n_pos });
    }
    let start = rng.random_range(0..n_pos / 3) + 1;
    let mut out: Vec<usize> = (0..correct.len()).filter(|&i| !correct[i]).collect();
    out.extend_from_slice(&pos[start..start + n_pos / 2]);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMeta {
    pub epochs: usize,
    pub lr: f64,
    pub wd: f64,
    pub batch_scans: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    pub n_points: usize,
    pub initial_nll: f64,
    pub final_nll: f64,
    /// True when the optimized parameters did not improve on the
    /// initialization and were discarded.
    pub reverted: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eta_estimator: Option<String>,
    pub balanced_sampling: bool,
    /// Batches too small for balanced sampling, fitted on all their points.
    pub unbalanced_batches: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub params: CalibratorParams,
    pub meta: FitMeta,
}

/// Fits `method` on `dataset` by minibatch AdamW over whole scans.
pub fn fit(method: Method, dataset: &Dataset, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    let data = FitData::new(dataset, config.entropy_kind);
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let gated = matches!(method, Method::MetaC | Method::DeptS);
    let (eta, eta_estimator) = if gated {
        match config.eta {
            Some(eta) => (eta, Some("manual".to_string())),
            None => {
                let eta = threshold_from_data(&data, config.eta_estimator)?;
                let name = match config.eta_estimator {
                    ThresholdEstimator::Midpoint => "midpoint",
                    ThresholdEstimator::Histogram => "histogram",
                };
                (eta, Some(name.to_string()))
            }
        }
    } else {
        (0.0, None)
    };

    let init = initial_params(method, dataset.n_classes, eta, config.entropy_kind);
    let mut theta = ParamVector::from_params(&init);
    let initial_nll = loss_and_grad(&theta, &data, 0..data.len(), false).0;

    let mut adam = AdamW::new(theta.values.len());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.scan_ranges.len()).collect();
    let balanced = config.balanced_sampling && method == Method::DeptS;
    let mut unbalanced_batches = 0;
    let mut batch: Vec<usize> = Vec::new();

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_scans) {
            batch.clear();
            for &s in chunk {
                batch.extend(data.scan_ranges[s].clone());
            }
            if balanced {
                let flags: Vec<bool> = batch.iter().map(|&i| data.correct[i]).collect();
                match depts_batch_sampler(&flags, &mut rng) {
                    Ok(positions) => batch = positions.into_iter().map(|p| batch[p]).collect(),
                    Err(Error::TooFewPositives { .. }) => unbalanced_batches += 1,
                    Err(e) => return Err(e),
                }
            }
            if batch.is_empty() {
                continue;
            }
            let (_, grad, _) = loss_and_grad(&theta, &data, batch.iter().copied(), true);
            adam.step(&mut theta.values, &grad, &theta.lower, config.lr, config.weight_decay);
        }
    }

    let mut final_nll = loss_and_grad(&theta, &data, 0..data.len(), false).0;
    let reverted = final_nll.is_nan() || final_nll > initial_nll;
    if reverted {
        theta = ParamVector::from_params(&init);
        final_nll = initial_nll;
    }

    Ok(FitResult {
        params: theta.to_params(),
        meta: FitMeta {
            epochs: config.epochs,
            lr: config.lr,
            wd: config.weight_decay,
            batch_scans: config.batch_scans,
            seed: config.seed,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            steps: adam.step,
            n_points: data.len(),
            initial_nll,
            final_nll,
            reverted,
            eta: gated.then_some(eta),
            eta_estimator,
            balanced_sampling: balanced,
            unbalanced_batches,
        },
    })
}
