//! In-memory point clouds with logits and labels.

use crate::error::{Error, Result};
use crate::prob::PointXYZ;

/// Label value marking a point excluded from every metric and from fitting.
pub const IGNORE_LABEL: u16 = u16::MAX;

/// One point cloud: coordinates, labels and raw logits over `n_classes`.
///
/// Logits are stored row-major, `n_classes` values per point.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanRecord {
    pub n_classes: usize,
    pub points: Vec<PointXYZ>,
    pub labels: Vec<u16>,
    pub logits: Vec<f64>,
}

impl ScanRecord {
    /// Builds a scan and checks its structural invariants.
    pub fn new(
        n_classes: usize,
        points: Vec<PointXYZ>,
        labels: Vec<u16>,
        logits: Vec<f64>,
    ) -> Result<Self> {
        let scan = Self { n_classes, points, labels, logits };
        scan.validate()?;
        Ok(scan)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 || self.n_classes >= IGNORE_LABEL as usize {
            return Err(Error::InvalidConfig(format!(
                "class count {} outside [2, {})",
                self.n_classes, IGNORE_LABEL
            )));
        }
        let n = self.points.len();
        if self.labels.len() != n || self.logits.len() != n * self.n_classes {
            return Err(Error::InvalidConfig(format!(
                "scan arrays disagree: {} points, {} labels, {} logits for {} classes",
                n,
                self.labels.len(),
                self.logits.len(),
                self.n_classes
            )));
        }
        if let Some(i) = self
            .labels
            .iter()
            .position(|&l| l != IGNORE_LABEL && l as usize >= self.n_classes)
        {
            return Err(Error::InvalidConfig(format!(
                "point {i} has label {} but only {} classes",
                self.labels[i], self.n_classes
            )));
        }
        if let Some(i) = self.logits.iter().position(|z| !z.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "non-finite logit at point {}",
                i / self.n_classes
            )));
        }
        if let Some(i) = self
            .points
            .iter()
            .position(|p| !(p.x.is_finite() && p.y.is_finite() && p.z.is_finite()))
        {
            return Err(Error::InvalidConfig(format!("non-finite coordinate at point {i}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn logits(&self, point: usize) -> &[f64] {
        &self.logits[point * self.n_classes..(point + 1) * self.n_classes]
    }

    /// Ground-truth class, or `None` for ignored points.
    pub fn label(&self, point: usize) -> Option<usize> {
        match self.labels[point] {
            IGNORE_LABEL => None,
            l => Some(l as usize),
        }
    }

    pub fn n_valid(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE_LABEL).count()
    }

    /// Copy of the scan without its ignore-labelled points.
    pub fn without_ignored(&self) -> ScanRecord {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| self.label(i).is_some()).collect();
        ScanRecord {
            n_classes: self.n_classes,
            points: keep.iter().map(|&i| self.points[i]).collect(),
            labels: keep.iter().map(|&i| self.labels[i]).collect(),
            logits: keep.iter().flat_map(|&i| self.logits(i).iter().copied()).collect(),
        }
    }
}

/// A collection of scans sharing one class count.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n_classes: usize,
    pub scans: Vec<ScanRecord>,
}

impl Dataset {
    pub fn new(n_classes: usize, scans: Vec<ScanRecord>) -> Result<Self> {
        for scan in &scans {
            if scan.n_classes != n_classes {
                return Err(Error::DimensionMismatch { expected: n_classes, actual: scan.n_classes });
            }
        }
        Ok(Self { n_classes, scans })
    }

    pub fn n_points(&self) -> usize {
        self.scans.iter().map(ScanRecord::len).sum()
    }

    /// Scans at the given indices, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            n_classes: self.n_classes,
            scans: indices.iter().map(|&i| self.scans[i].clone()).collect(),
        }
    }
}
