//! Synthetic scans with known calibration.
//!
//! [`gen_calibrated`] draws a class distribution `p` per point from a
//! symmetric Dirichlet, the label from `Categorical(p)`, and stores
//! `ln p` as the logits, so the softmax of the stored logits is exactly
//! the distribution the label was drawn from. The distortions then scale
//! logits by a known factor that a calibrator must undo.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prob::{PointXYZ, PROB_FLOOR};
use crate::scan::{Dataset, ScanRecord};

/// Half-height of the sampled scene slab in meters.
pub const SCENE_HALF_HEIGHT: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_scans: usize,
    pub points_per_scan: usize,
    pub n_classes: usize,
    pub scene_radius: f64,
    pub seed: u64,
    pub dirichlet_alpha: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_scans: 10,
            points_per_scan: 1024,
            n_classes: 8,
            scene_radius: 50.0,
            seed: 0,
            dirichlet_alpha: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_scans == 0 || self.points_per_scan == 0 {
            return Err(Error::InvalidConfig("scan and point counts must be positive".into()));
        }
        if self.n_classes < 2 || self.n_classes >= crate::scan::IGNORE_LABEL as usize {
            return Err(Error::InvalidConfig(format!(
                "class count {} must be in [2, 65535)",
                self.n_classes
            )));
        }
        if !(self.scene_radius > 0.0 && self.scene_radius.is_finite()) {
            return Err(Error::InvalidConfig("scene radius must be > 0".into()));
        }
        if !(self.dirichlet_alpha > 0.0 && self.dirichlet_alpha.is_finite()) {
            return Err(Error::InvalidConfig("Dirichlet concentration must be > 0".into()));
        }
        Ok(())
    }
}

/// Rounds to the nearest `f32` so the value survives the scan file format.
fn f32_exact(v: f64) -> f64 {
    v as f32 as f64
}

fn gen_scan(config: &SynthConfig, gamma: &Gamma<f64>, scan_index: usize) -> ScanRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(scan_index as u64);
    let s = config.n_classes;
    let n = config.points_per_scan;
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut logits = Vec::with_capacity(n * s);
    let mut p = vec![0.0; s];
    for _ in 0..n {
        // Dirichlet via normalized Gamma draws
        let mut sum = 0.0;
        for v in p.iter_mut() {
            *v = gamma.sample(&mut rng);
            sum += *v;
        }
        if sum > 0.0 {
            p.iter_mut().for_each(|v| *v /= sum);
        } else {
            // every draw underflowed (tiny concentration); pick one vertex
            p.iter_mut().for_each(|v| *v = 0.0);
            p[rng.random_range(0..s)] = 1.0;
        }

        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut label = s - 1;
        for (c, &pc) in p.iter().enumerate() {
            acc += pc;
            if u < acc {
                label = c;
                break;
            }
        }

        let r = config.scene_radius * rng.random::<f64>().sqrt();
        let theta = std::f64::consts::TAU * rng.random::<f64>();
        let h = rng.random_range(-SCENE_HALF_HEIGHT..=SCENE_HALF_HEIGHT);
        points.push(PointXYZ::new(
            f32_exact(r * theta.cos()),
            f32_exact(r * theta.sin()),
            f32_exact(h),
        ));
        labels.push(label as u16);
        logits.extend(p.iter().map(|&v| f32_exact(v.max(PROB_FLOOR).ln())));
    }
    ScanRecord { n_classes: s, points, labels, logits }
}

/// Perfectly calibrated scans; scan `i` depends only on `(seed, i)`.
pub fn gen_calibrated(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let gamma = Gamma::new(config.dirichlet_alpha, 1.0)
        .map_err(|e| Error::InvalidConfig(format!("Dirichlet concentration: {e}")))?;
    let scans = (0..config.n_scans)
        .into_par_iter()
        .map(|i| gen_scan(config, &gamma, i))
        .collect();
    Ok(Dataset { n_classes: config.n_classes, scans })
}

/// Scales every logit by `kappa1 · depth + kappa2`.
pub fn distort_depth(dataset: &Dataset, kappa1: f64, kappa2: f64) -> Result<Dataset> {
    if !(kappa1.is_finite() && kappa2.is_finite()) {
        return Err(Error::InvalidConfig("distortion coefficients must be finite".into()));
    }
    let scans = dataset
        .scans
        .iter()
        .enumerate()
        .map(|(si, scan)| {
            let mut out = scan.clone();
            for (i, pt) in scan.points.iter().enumerate() {
                let factor = kappa1 * pt.depth() + kappa2;
                if factor.is_nan() || factor <= 0.0 {
                    return Err(Error::NonPositiveScale { scan: si, point: i, factor });
                }
                let s = scan.n_classes;
                for z in &mut out.logits[i * s..(i + 1) * s] {
                    *z *= factor;
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { n_classes: dataset.n_classes, scans })
}

/// Scales every logit by `tau`, making the predictor over-confident for
/// `tau > 1`.
pub fn distort_temperature(dataset: &Dataset, tau: f64) -> Result<Dataset> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidConfig(format!("tau = {tau} must satisfy tau > 0")));
    }
    distort_depth(dataset, 0.0, tau)
}

/// Seeded 80/20 split of scan indices into (fit, eval), each sorted.
pub fn split_indices(n_scans: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n_scans).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n_fit = (n_scans * 4).div_ceil(5).min(n_scans);
    let (fit, eval) = idx.split_at(n_fit);
    let mut fit = fit.to_vec();
    let mut eval = eval.to_vec();
    fit.sort_unstable();
    eval.sort_unstable();
    (fit, eval)
}
