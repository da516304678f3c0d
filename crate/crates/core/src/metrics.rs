//! Calibration and segmentation metrics.
//!
//! Every metric works on [`PointOutcome`]s of valid (non-ignored) points.
//! ECE is computed per scan with equal-width confidence bins, where a
//! point with confidence `c` falls into bin `(l, u]` iff `l < c <= u`, and
//! then averaged over scans without weighting by scan size.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default number of confidence bins.
pub const DEFAULT_BINS: usize = 10;
/// Number of depth bins in [`depth_profile`].
pub const DEPTH_BINS: usize = 10;
/// Width of one depth bin in meters.
pub const DEPTH_BIN_WIDTH: f64 = 5.0;

/// What a (possibly calibrated) predictor said about one valid point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointOutcome {
    pub pred: usize,
    pub label: usize,
    pub confidence: f64,
    pub depth: f64,
}

impl PointOutcome {
    pub fn correct(&self) -> bool {
        self.pred == self.label
    }
}

/// Accumulators for one confidence bin `(lower, upper]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub lower: f64,
    pub upper: f64,
    pub count: u64,
    pub sum_conf: f64,
    pub sum_correct: u64,
}

impl BinStats {
    pub fn mean_conf(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum_conf / self.count as f64)
    }

    pub fn mean_acc(&self) -> Option<f64> {
        (self.count > 0).then(|| self.sum_correct as f64 / self.count as f64)
    }

    /// `|mean_acc - mean_conf|`, zero for an empty bin.
    pub fn gap(&self) -> f64 {
        match (self.mean_acc(), self.mean_conf()) {
            (Some(a), Some(c)) => (a - c).abs(),
            _ => 0.0,
        }
    }

    fn merge(&mut self, other: &BinStats) {
        self.count += other.count;
        self.sum_conf += other.sum_conf;
        self.sum_correct += other.sum_correct;
    }
}

/// Equal-width binning of `[0, 1]` into `m` bins.
#[derive(Debug, Clone)]
pub struct ConfidenceBins {
    bins: Vec<BinStats>,
}

impl ConfidenceBins {
    pub fn new(m_bins: usize) -> Result<Self> {
        if m_bins == 0 {
            return Err(Error::InvalidConfig("bin count must be at least 1".into()));
        }
        let edge = |i: usize| i as f64 / m_bins as f64;
        let bins = (0..m_bins)
            .map(|i| BinStats {
                lower: edge(i),
                upper: edge(i + 1),
                count: 0,
                sum_conf: 0.0,
                sum_correct: 0,
            })
            .collect();
        Ok(Self { bins })
    }

    /// Index of the bin `(lower, upper]` holding `conf`. Values at or below
    /// zero land in the first bin.
    pub fn index_of(&self, conf: f64) -> usize {
        let m = self.bins.len();
        let mut idx = ((conf * m as f64).ceil() as isize - 1).clamp(0, m as isize - 1) as usize;
        while idx > 0 && conf <= self.bins[idx].lower {
            idx -= 1;
        }
        while idx + 1 < m && conf > self.bins[idx].upper {
            idx += 1;
        }
        idx
    }

    pub fn add(&mut self, conf: f64, correct: bool) {
        let i = self.index_of(conf);
        let b = &mut self.bins[i];
        b.count += 1;
        b.sum_conf += conf;
        b.sum_correct += correct as u64;
    }

    pub fn merge(&mut self, other: &ConfidenceBins) {
        for (a, b) in self.bins.iter_mut().zip(&other.bins) {
            a.merge(b);
        }
    }

    pub fn total(&self) -> u64 {
        self.bins.iter().map(|b| b.count).sum()
    }

    /// `Σ_m (|B_m| / N) |acc(B_m) - conf(B_m)|`.
    pub fn ece(&self) -> f64 {
        let n = self.total() as f64;
        if n == 0.0 {
            return 0.0;
        }
        self.bins.iter().map(|b| b.count as f64 / n * b.gap()).sum()
    }

    pub fn bins(&self) -> &[BinStats] {
        &self.bins
    }

    pub fn into_bins(self) -> Vec<BinStats> {
        self.bins
    }
}

/// ECE of one scan.
pub fn ece_scan(confidences: &[f64], correct: &[bool], m_bins: usize) -> Result<f64> {
    if confidences.len() != correct.len() {
        return Err(Error::DimensionMismatch {
            expected: confidences.len(),
            actual: correct.len(),
        });
    }
    if confidences.is_empty() {
        return Err(Error::EmptyScan { scan: 0 });
    }
    let mut bins = ConfidenceBins::new(m_bins)?;
    for (&c, &ok) in confidences.iter().zip(correct) {
        bins.add(c, ok);
    }
    Ok(bins.ece())
}

fn scan_bins(scan: &[PointOutcome], m_bins: usize) -> Result<ConfidenceBins> {
    let mut bins = ConfidenceBins::new(m_bins)?;
    for p in scan {
        bins.add(p.confidence, p.correct());
    }
    Ok(bins)
}

/// Mean of per-scan ECE values, plus the per-scan list.
pub fn ece_dataset(scans: &[Vec<PointOutcome>], m_bins: usize) -> Result<(f64, Vec<f64>)> {
    if scans.is_empty() {
        return Err(Error::InvalidConfig("dataset has no scans".into()));
    }
    let per_scan = scans
        .par_iter()
        .enumerate()
        .map(|(i, scan)| {
            if scan.is_empty() {
                return Err(Error::EmptyScan { scan: i });
            }
            Ok(scan_bins(scan, m_bins)?.ece())
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = per_scan.iter().sum::<f64>() / per_scan.len() as f64;
    Ok((mean, per_scan))
}

/// One binning over all points of all scans.
pub fn reliability_bins(scans: &[Vec<PointOutcome>], m_bins: usize) -> Result<Vec<BinStats>> {
    let partial = scans
        .par_iter()
        .map(|scan| scan_bins(scan, m_bins))
        .collect::<Result<Vec<_>>>()?;
    let mut total = ConfidenceBins::new(m_bins)?;
    for p in &partial {
        total.merge(p);
    }
    Ok(total.into_bins())
}

/// ECE of the pooled reliability bins (a diagnostic, not the headline ECE).
pub fn pooled_ece(bins: &[BinStats]) -> f64 {
    let n: u64 = bins.iter().map(|b| b.count).sum();
    if n == 0 {
        return 0.0;
    }
    bins.iter().map(|b| b.count as f64 / n as f64 * b.gap()).sum()
}

/// Confidence and accuracy of points in one 5 m depth range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthBinRow {
    pub d_lower: f64,
    pub d_upper: f64,
    pub count: u64,
    pub mean_conf: Option<f64>,
    pub mean_acc: Option<f64>,
}

impl DepthBinRow {
    /// `mean_conf - mean_acc`; positive means over-confident.
    pub fn overconfidence(&self) -> Option<f64> {
        Some(self.mean_conf? - self.mean_acc?)
    }
}

/// Depth bin of a point; everything at or beyond 45 m lands in the last bin.
pub fn depth_bin(depth: f64) -> usize {
    ((depth / DEPTH_BIN_WIDTH).floor().max(0.0) as usize).min(DEPTH_BINS - 1)
}

pub fn depth_profile(scans: &[Vec<PointOutcome>]) -> Vec<DepthBinRow> {
    #[derive(Clone, Copy, Default)]
    struct Acc {
        count: u64,
        sum_conf: f64,
        sum_correct: u64,
    }
    let partial: Vec<[Acc; DEPTH_BINS]> = scans
        .par_iter()
        .map(|scan| {
            let mut acc = [Acc::default(); DEPTH_BINS];
            for p in scan {
                let a = &mut acc[depth_bin(p.depth)];
                a.count += 1;
                a.sum_conf += p.confidence;
                a.sum_correct += p.correct() as u64;
            }
            acc
        })
        .collect();
    let mut total = [Acc::default(); DEPTH_BINS];
    for acc in &partial {
        for (t, a) in total.iter_mut().zip(acc) {
            t.count += a.count;
            t.sum_conf += a.sum_conf;
            t.sum_correct += a.sum_correct;
        }
    }
    total
        .iter()
        .enumerate()
        .map(|(i, a)| DepthBinRow {
            d_lower: i as f64 * DEPTH_BIN_WIDTH,
            d_upper: (i + 1) as f64 * DEPTH_BIN_WIDTH,
            count: a.count,
            mean_conf: (a.count > 0).then(|| a.sum_conf / a.count as f64),
            mean_acc: (a.count > 0).then(|| a.sum_correct as f64 / a.count as f64),
        })
        .collect()
}

/// Per-class IoU pooled over scans; `None` for classes absent from both
/// predictions and labels. mIoU averages the present classes.
pub fn iou(scans: &[Vec<PointOutcome>], n_classes: usize) -> (Vec<Option<f64>>, f64) {
    // tp, fp, fn per class
    let partial: Vec<Vec<[u64; 3]>> = scans
        .par_iter()
        .map(|scan| {
            let mut c = vec![[0u64; 3]; n_classes];
            for p in scan {
                if p.correct() {
                    c[p.pred][0] += 1;
                } else {
                    c[p.pred][1] += 1;
                    c[p.label][2] += 1;
                }
            }
            c
        })
        .collect();
    let mut counts = vec![[0u64; 3]; n_classes];
    for c in &partial {
        for (t, x) in counts.iter_mut().zip(c) {
            for k in 0..3 {
                t[k] += x[k];
            }
        }
    }
    let per_class: Vec<Option<f64>> = counts
        .iter()
        .map(|&[tp, fp, fn_]| {
            let denom = tp + fp + fn_;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let miou = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    (per_class, miou)
}

/// Dataset-level calibration and segmentation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub m_bins: usize,
    pub n_scans: usize,
    pub n_points: u64,
    pub dataset_ece: f64,
    pub ece_pct: String,
    pub pooled_ece: f64,
    pub per_scan_ece: Vec<f64>,
    pub reliability: Vec<BinStats>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub depth_profile: Vec<DepthBinRow>,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
}

/// ECE as a percentage with two decimals, e.g. `0.0245 -> "2.45%"`.
pub fn format_pct(fraction: f64) -> String {
    format!("{:.2}%", fraction * 100.0)
}

pub fn evaluate(
    scans: &[Vec<PointOutcome>],
    n_classes: usize,
    m_bins: usize,
    method: &str,
) -> Result<EvalReport> {
    let (dataset_ece, per_scan_ece) = ece_dataset(scans, m_bins)?;
    let reliability = reliability_bins(scans, m_bins)?;
    let (per_class_iou, miou) = iou(scans, n_classes);
    Ok(EvalReport {
        method: method.to_string(),
        m_bins,
        n_scans: scans.len(),
        n_points: scans.iter().map(|s| s.len() as u64).sum(),
        dataset_ece,
        ece_pct: format_pct(dataset_ece),
        pooled_ece: pooled_ece(&reliability),
        per_scan_ece,
        reliability,
        depth_profile: depth_profile(scans),
        per_class_iou,
        miou,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn outcome(pred: usize, label: usize, confidence: f64, depth: f64) -> PointOutcome {
        PointOutcome { pred, label, confidence, depth }
    }

    #[test]
    fn ece_scan_examples() {
        let e = ece_scan(&[0.6, 0.9, 0.4, 0.8], &[true, true, false, true], 2).unwrap();
        assert!((e - 0.275).abs() < 1e-12, "{e}");
        for m in [1, 2, 5, 10, 15] {
            assert_eq!(ece_scan(&[1.0; 5], &[true; 5], m).unwrap(), 0.0);
        }
        assert_eq!(ece_scan(&[0.75], &[false], 1).unwrap(), 0.75);
        assert!(matches!(ece_scan(&[], &[], 10), Err(Error::EmptyScan { .. })));
        assert!(ece_scan(&[0.5], &[true], 0).is_err());
    }

    #[test]
    fn bin_edges_are_right_closed() {
        let bins = ConfidenceBins::new(10).unwrap();
        assert_eq!(bins.index_of(0.1), 0);
        assert_eq!(bins.index_of(0.1000001), 1);
        assert_eq!(bins.index_of(0.7), 6);
        assert_eq!(bins.index_of(1.0), 9);
        assert_eq!(bins.index_of(0.3), 2);
        assert_eq!(bins.index_of(1e-300), 0);
    }

    #[test]
    fn dataset_ece_is_unweighted_mean() {
        // scan a: one point conf 0.98 correct -> 0.02
        // scan b: 4 points conf 0.96 all correct -> 0.04
        let a = vec![outcome(0, 0, 0.98, 1.0)];
        let b = vec![outcome(1, 1, 0.96, 1.0); 4];
        let (mean, per) = ece_dataset(&[a.clone(), b], 10).unwrap();
        assert!((per[0] - 0.02).abs() < 1e-12 && (per[1] - 0.04).abs() < 1e-12);
        assert!((mean - 0.03).abs() < 1e-12);
        let (single, _) = ece_dataset(&[a], 10).unwrap();
        assert!((single - 0.02).abs() < 1e-12);
        assert!(matches!(
            ece_dataset(&[vec![outcome(0, 0, 0.5, 0.0)], vec![]], 10),
            Err(Error::EmptyScan { scan: 1 })
        ));
    }

    #[test]
    fn reliability_single_point() {
        let bins = reliability_bins(&[vec![outcome(2, 2, 0.7, 3.0)]], 10).unwrap();
        let b = bins[6];
        assert_eq!((b.count, b.sum_correct), (1, 1));
        assert!((b.lower - 0.6).abs() < 1e-15 && (b.upper - 0.7).abs() < 1e-15);
        assert_eq!(b.mean_conf(), Some(0.7));
        assert_eq!(b.mean_acc(), Some(1.0));
        assert_eq!(bins[0].count, 0);
        assert_eq!(bins[0].gap(), 0.0);
    }

    #[test]
    fn depth_bins() {
        assert_eq!(depth_bin(12.0), 2);
        assert_eq!(depth_bin(0.0), 0);
        assert_eq!(depth_bin(49.999), 9);
        assert_eq!(depth_bin(80.0), 9);
        assert_eq!(depth_bin(5.0), 1);

        let scan: Vec<_> = [0.0, 12.0, 49.999, 80.0, 12.5]
            .iter()
            .map(|&d| outcome(0, 0, 0.9, d))
            .collect();
        let rows = depth_profile(&[scan]);
        assert_eq!(rows.len(), 10);
        assert_eq!(rows.iter().map(|r| r.count).sum::<u64>(), 5);
        assert_eq!(rows[2].count, 2);
        assert_eq!(rows[9].count, 2);
        assert_eq!(rows[1].mean_conf, None);
        assert!(rows.iter().all(|r| r.d_upper - r.d_lower == 5.0));
    }

    #[test]
    fn iou_examples() {
        let scan: Vec<_> = [(0, 0), (0, 1), (1, 1), (1, 1)]
            .iter()
            .map(|&(p, l)| outcome(p, l, 0.9, 1.0))
            .collect();
        let (per, miou) = iou(&[scan], 3);
        assert!((per[0].unwrap() - 0.5).abs() < 1e-15);
        assert!((per[1].unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(per[2], None);
        assert!((miou - 7.0 / 12.0).abs() < 1e-15);

        let perfect: Vec<_> = (0..6).map(|i| outcome(i % 3, i % 3, 0.8, 0.0)).collect();
        let (per, miou) = iou(&[perfect], 4);
        assert_eq!(per, vec![Some(1.0), Some(1.0), Some(1.0), None]);
        assert_eq!(miou, 1.0);
    }

    #[test]
    fn percentage_format() {
        assert_eq!(format_pct(0.0245), "2.45%");
        assert_eq!(format_pct(0.0), "0.00%");
    }

    fn scan_strategy() -> impl Strategy<Value = Vec<(f64, bool)>> {
        prop::collection::vec((0.01f64..=1.0, any::<bool>()), 1..64)
    }

    proptest! {
        #[test]
        fn ece_in_unit_interval_and_order_free(points in scan_strategy(), m in 1usize..20, seed in any::<u64>()) {
            let confs: Vec<f64> = points.iter().map(|p| p.0).collect();
            let correct: Vec<bool> = points.iter().map(|p| p.1).collect();
            let e = ece_scan(&confs, &correct, m).unwrap();
            prop_assert!((0.0..=1.0).contains(&e));

            // deterministic shuffle
            let mut idx: Vec<usize> = (0..points.len()).collect();
            let mut s = seed;
            for i in (1..idx.len()).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                idx.swap(i, (s >> 33) as usize % (i + 1));
            }
            let c2: Vec<f64> = idx.iter().map(|&i| confs[i]).collect();
            let k2: Vec<bool> = idx.iter().map(|&i| correct[i]).collect();
            let e2 = ece_scan(&c2, &k2, m).unwrap();
            prop_assert!((e - e2).abs() < 1e-12);
        }

        #[test]
        fn bins_satisfy_invariants(points in scan_strategy(), m in 1usize..20) {
            let mut bins = ConfidenceBins::new(m).unwrap();
            for &(c, ok) in &points {
                bins.add(c, ok);
            }
            prop_assert_eq!(bins.total(), points.len() as u64);
            for b in bins.bins() {
                prop_assert!(b.lower < b.upper);
                prop_assert!(b.sum_correct <= b.count);
                if b.count == 0 {
                    prop_assert_eq!(b.sum_conf, 0.0);
                } else {
                    let n = b.count as f64;
                    prop_assert!(b.sum_conf <= n * b.upper + 1e-9);
                    prop_assert!(b.sum_conf >= n * b.lower - 1e-9);
                }
            }
        }

        #[test]
        fn perfectly_matched_bins_give_zero_ece(k in 1u64..50, m in 1usize..12) {
            // every bin holds points with confidence equal to the bin's accuracy
            let mut confs = vec![];
            let mut correct = vec![];
            for _ in 0..k {
                confs.extend([0.5, 0.5, 1.0]);
                correct.extend([true, false, true]);
            }
            let e = ece_scan(&confs, &correct, m).unwrap();
            prop_assert!(e.abs() < 1e-12);
        }
    }
}
