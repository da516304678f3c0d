//! Applying a calibrator to whole scans and datasets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::calibrators::{
    apply_depts, apply_diris, apply_identity, apply_logis, apply_metac_with, apply_temps,
    CalibratorParams,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport, PointOutcome};
use crate::prob::{Prediction, ProbVector};
use crate::scan::{Dataset, ScanRecord};

/// Random stream for MetaC's uniform branch, fixed by `(seed, scan, point)`.
pub fn metac_stream(seed: u64, scan: usize, point: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(scan as u64);
    rng.set_word_pos(16 * point as u128);
    rng
}

/// Calibrated prediction of one point. `None` params means uncalibrated.
pub fn calibrate_point(
    params: Option<&CalibratorParams>,
    scan: &ScanRecord,
    scan_index: usize,
    point: usize,
    seed: u64,
) -> Result<(Prediction, ProbVector)> {
    let z = scan.logits(point);
    let Some(params) = params else {
        return apply_identity(z);
    };
    match params {
        CalibratorParams::TempS(p) => apply_temps(p, z),
        CalibratorParams::LogiS(p) => apply_logis(p, z),
        CalibratorParams::DiriS(p) => apply_diris(p, z),
        CalibratorParams::MetaC(p) => apply_metac_with(p, z, |n| {
            metac_stream(seed, scan_index, point).random_range(0..n)
        }),
        CalibratorParams::DeptS(p) => {
            apply_depts(p, z, &scan.points[point]).map_err(|e| match e {
                Error::NonPositiveAlpha { alpha, .. } => {
                    Error::NonPositiveAlpha { scan: scan_index, point, alpha }
                }
                other => other,
            })
        }
    }
}

fn check_classes(params: Option<&CalibratorParams>, n_classes: usize) -> Result<()> {
    if let Some(p) = params {
        p.validate(n_classes)?;
    }
    Ok(())
}

/// Calibrated predictions for every point of a scan, ignored points included,
/// in input order.
pub fn scan_predictions(
    params: Option<&CalibratorParams>,
    scan: &ScanRecord,
    scan_index: usize,
    seed: u64,
) -> Result<Vec<Prediction>> {
    check_classes(params, scan.n_classes)?;
    (0..scan.len())
        .map(|i| calibrate_point(params, scan, scan_index, i, seed).map(|(p, _)| p))
        .collect()
}

/// Outcomes of the valid points of a scan, in input order.
pub fn scan_outcomes(
    params: Option<&CalibratorParams>,
    scan: &ScanRecord,
    scan_index: usize,
    seed: u64,
) -> Result<Vec<PointOutcome>> {
    check_classes(params, scan.n_classes)?;
    let mut out = Vec::with_capacity(scan.len());
    for i in 0..scan.len() {
        let Some(label) = scan.label(i) else { continue };
        let (pred, _) = calibrate_point(params, scan, scan_index, i, seed)?;
        out.push(PointOutcome {
            pred: pred.class_id,
            label,
            confidence: pred.confidence,
            depth: scan.points[i].depth(),
        });
    }
    Ok(out)
}

/// Per-scan outcomes, computed in parallel; the result does not depend on
/// the number of threads.
pub fn dataset_outcomes(
    params: Option<&CalibratorParams>,
    dataset: &Dataset,
    seed: u64,
) -> Result<Vec<Vec<PointOutcome>>> {
    check_classes(params, dataset.n_classes)?;
    dataset
        .scans
        .par_iter()
        .enumerate()
        .map(|(i, scan)| scan_outcomes(params, scan, i, seed))
        .collect()
}

/// Outcomes built from precomputed per-point predictions (e.g. sidecars).
pub fn outcomes_from_predictions(
    dataset: &Dataset,
    predictions: &[Vec<Prediction>],
) -> Result<Vec<Vec<PointOutcome>>> {
    if predictions.len() != dataset.scans.len() {
        return Err(Error::InvalidConfig(format!(
            "{} prediction files for {} scans",
            predictions.len(),
            dataset.scans.len()
        )));
    }
    dataset
        .scans
        .iter()
        .zip(predictions)
        .enumerate()
        .map(|(s, (scan, preds))| {
            if preds.len() != scan.len() {
                return Err(Error::InvalidConfig(format!(
                    "scan {s}: {} predictions for {} points",
                    preds.len(),
                    scan.len()
                )));
            }
            Ok((0..scan.len())
                .filter_map(|i| {
                    let label = scan.label(i)?;
                    Some(PointOutcome {
                        pred: preds[i].class_id,
                        label,
                        confidence: preds[i].confidence,
                        depth: scan.points[i].depth(),
                    })
                })
                .collect())
        })
        .collect()
}

/// Full evaluation report for a dataset under an optional calibrator.
pub fn evaluate_dataset(
    params: Option<&CalibratorParams>,
    dataset: &Dataset,
    m_bins: usize,
    seed: u64,
) -> Result<EvalReport> {
    let outcomes = dataset_outcomes(params, dataset, seed)?;
    let name = params.map_or("uncal", |p| p.method().name());
    evaluate(&outcomes, dataset.n_classes, m_bins, name)
}
