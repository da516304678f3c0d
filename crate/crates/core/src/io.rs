//! File formats.
//!
//! Scan file, little-endian throughout:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "C3DS"
//! 4       2     version (u16) = 1
//! 6       4     n_points (u32)
//! 10      2     n_classes (u16)
//! 12      2     flags (u16), reserved, 0
//! 14      2     padding, 0
//! 16      ...   n_points records of
//!               x, y, z (f32), label (u16, 65535 = ignore),
//!               n_classes logits (f32)
//! ```
//!
//! A file is exactly `16 + n_points * (14 + 4 * n_classes)` bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibrators::{CalibratorParams, DeptSParams, MetaCParams, Method, TempSParams, VectorParams};
use crate::error::{Error, Result};
use crate::metrics::{BinStats, EvalReport};
use crate::optim::FitMeta;
use crate::prob::{EntropyKind, PointXYZ, Prediction};
use crate::scan::{Dataset, ScanRecord, IGNORE_LABEL};

pub const SCAN_MAGIC: &[u8; 4] = b"C3DS";
pub const SCAN_VERSION: u16 = 1;
pub const SCAN_HEADER_LEN: usize = 16;

pub const SIDECAR_MAGIC: &[u8; 4] = b"C3DC";
pub const SIDECAR_VERSION: u16 = 1;
pub const SIDECAR_HEADER_LEN: usize = 12;
const SIDECAR_RECORD_LEN: usize = 10;

/// Bytes per point record for `n_classes` logits.
pub fn record_len(n_classes: usize) -> usize {
    14 + 4 * n_classes
}

pub fn encode_scan(scan: &ScanRecord) -> Result<Vec<u8>> {
    scan.validate()?;
    let n = u32::try_from(scan.len())
        .map_err(|_| Error::InvalidConfig(format!("{} points exceed u32", scan.len())))?;
    let s = scan.n_classes;
    let mut buf = Vec::with_capacity(SCAN_HEADER_LEN + scan.len() * record_len(s));
    buf.extend_from_slice(SCAN_MAGIC);
    buf.extend_from_slice(&SCAN_VERSION.to_le_bytes());
    buf.extend_from_slice(&n.to_le_bytes());
    buf.extend_from_slice(&(s as u16).to_le_bytes());
    buf.extend_from_slice(&0u16.to_le_bytes());
    buf.extend_from_slice(&[0, 0]);
    for i in 0..scan.len() {
        let p = scan.points[i];
        for v in [p.x, p.y, p.z] {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        buf.extend_from_slice(&scan.labels[i].to_le_bytes());
        for (c, &z) in scan.logits(i).iter().enumerate() {
            let z32 = z as f32;
            if !z32.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "logit {z} of point {i}, class {c} overflows f32"
                )));
            }
            buf.extend_from_slice(&z32.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn write_scan(scan: &ScanRecord, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_scan(scan)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn u16_at(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

fn f32_at(b: &[u8], at: usize) -> f32 {
    f32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

/// Parses scan bytes; `path` is only used in error messages.
pub fn decode_scan(bytes: &[u8], path: &Path) -> Result<ScanRecord> {
    let format = |offset: u64, message: String| Error::Format { path: path.into(), offset, message };
    let invalid = |message: String| Error::Validation { path: path.into(), message };

    if bytes.len() < SCAN_HEADER_LEN {
        return Err(format(
            bytes.len() as u64,
            format!("file is {} bytes, shorter than the {SCAN_HEADER_LEN}-byte header", bytes.len()),
        ));
    }
    if &bytes[0..4] != SCAN_MAGIC {
        return Err(format(0, format!("bad magic {:?}, expected \"C3DS\"", &bytes[0..4])));
    }
    let version = u16_at(bytes, 4);
    if version != SCAN_VERSION {
        return Err(format(4, format!("unsupported version {version}")));
    }
    let n = u32_at(bytes, 6) as u64;
    let s = u16_at(bytes, 10) as usize;
    if s < 2 || s == IGNORE_LABEL as usize {
        return Err(format(10, format!("class count {s} must be in [2, 65535)")));
    }
    // checked against the real length before anything is allocated
    let expected = SCAN_HEADER_LEN as u64 + n * record_len(s) as u64;
    if bytes.len() as u64 != expected {
        return Err(format(
            bytes.len().min(expected as usize) as u64,
            format!("expected {expected} bytes for {n} points and {s} classes, found {}", bytes.len()),
        ));
    }
    let n = n as usize;
    let rec = record_len(s);
    let mut points = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut logits = Vec::with_capacity(n * s);
    for i in 0..n {
        let base = SCAN_HEADER_LEN + i * rec;
        let xyz = [f32_at(bytes, base), f32_at(bytes, base + 4), f32_at(bytes, base + 8)];
        if xyz.iter().any(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite coordinate at point {i}")));
        }
        points.push(PointXYZ::new(xyz[0] as f64, xyz[1] as f64, xyz[2] as f64));
        let label = u16_at(bytes, base + 12);
        if label != IGNORE_LABEL && label as usize >= s {
            return Err(invalid(format!("label {label} at point {i} but only {s} classes")));
        }
        labels.push(label);
        for c in 0..s {
            let z = f32_at(bytes, base + 14 + 4 * c);
            if !z.is_finite() {
                return Err(invalid(format!("non-finite logit at point {i}, class {c}")));
            }
            logits.push(z as f64);
        }
    }
    Ok(ScanRecord { n_classes: s, points, labels, logits })
}

pub fn read_scan(path: impl AsRef<Path>) -> Result<ScanRecord> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_scan(&bytes, path)
}

/// Reads only the header's class count.
pub fn peek_scan_classes(path: &Path) -> Result<usize> {
    use std::io::Read;
    let mut header = [0u8; SCAN_HEADER_LEN];
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    f.read_exact(&mut header).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format {
            path: path.into(),
            offset: 0,
            message: "file shorter than the scan header".into(),
        },
        _ => Error::io(path, e),
    })?;
    if &header[0..4] != SCAN_MAGIC {
        return Err(Error::Format { path: path.into(), offset: 0, message: "bad magic".into() });
    }
    Ok(u16_at(&header, 10) as usize)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SplitLists {
    #[serde(default)]
    pub fit: Vec<String>,
    #[serde(default)]
    pub eval: Vec<String>,
}

/// Dataset manifest. Scan paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub n_classes: usize,
    pub class_names: Vec<String>,
    pub ignore_label: u16,
    pub scans: Vec<String>,
    #[serde(default)]
    pub split: SplitLists,
}

/// Which part of a manifest to load.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Fit,
    Eval,
    All,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fit" => Ok(Split::Fit),
            "eval" => Ok(Split::Eval),
            "all" => Ok(Split::All),
            other => Err(Error::InvalidConfig(format!("unknown split '{other}'"))),
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json { path: path.into(), source })
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|source| Error::Json { path: path.into(), source })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

impl Manifest {
    pub fn new(n_classes: usize, scans: Vec<String>, split: SplitLists) -> Self {
        Self {
            n_classes,
            class_names: (0..n_classes).map(|c| format!("class_{c}")).collect(),
            ignore_label: IGNORE_LABEL,
            scans,
            split,
        }
    }

    /// Loads and structurally checks a manifest, and checks that every
    /// listed scan exists and agrees on the class count.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let manifest: Manifest = read_json(path)?;
        manifest.check(path)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        for rel in &manifest.scans {
            let classes = peek_scan_classes(&dir.join(rel))?;
            if classes != manifest.n_classes {
                return Err(Error::Validation {
                    path: path.into(),
                    message: format!(
                        "scan {rel} has {classes} classes, manifest says {}",
                        manifest.n_classes
                    ),
                });
            }
        }
        Ok(manifest)
    }

    fn check(&self, path: &Path) -> Result<()> {
        let invalid = |message: String| Error::Validation { path: path.into(), message };
        if self.ignore_label != IGNORE_LABEL {
            return Err(invalid(format!("ignore_label must be {IGNORE_LABEL}")));
        }
        if !self.class_names.is_empty() && self.class_names.len() != self.n_classes {
            return Err(invalid(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.n_classes
            )));
        }
        for name in self.split.fit.iter().chain(&self.split.eval) {
            if !self.scans.contains(name) {
                return Err(invalid(format!("split entry {name} is not a listed scan")));
            }
        }
        if let Some(dup) = self.split.fit.iter().find(|f| self.split.eval.contains(f)) {
            return Err(invalid(format!("scan {dup} is in both fit and eval splits")));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(self, path.as_ref())
    }

    /// Relative scan paths of a split; an empty split list falls back to
    /// every scan.
    pub fn split_paths(&self, split: Split) -> &[String] {
        let list = match split {
            Split::Fit => &self.split.fit,
            Split::Eval => &self.split.eval,
            Split::All => return &self.scans,
        };
        if list.is_empty() {
            &self.scans
        } else {
            list
        }
    }
}

/// Loads the scans of one split, in manifest order.
pub fn load_split(manifest_path: impl AsRef<Path>, split: Split) -> Result<(Manifest, Vec<String>, Dataset)> {
    let manifest_path = manifest_path.as_ref();
    let manifest = Manifest::load(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let names = manifest.split_paths(split).to_vec();
    if names.is_empty() {
        return Err(Error::Validation {
            path: manifest_path.into(),
            message: "selected split has no scans".into(),
        });
    }
    let scans = names
        .iter()
        .map(|rel| read_scan(dir.join(rel)))
        .collect::<Result<Vec<_>>>()?;
    let dataset = Dataset::new(manifest.n_classes, scans)?;
    Ok((manifest, names, dataset))
}

/// Writes scans as `scan_00000.c3ds`, ... plus `manifest.json` with the
/// given fit/eval scan indices.
pub fn write_dataset(
    dataset: &Dataset,
    dir: impl AsRef<Path>,
    fit: &[usize],
    eval: &[usize],
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let names: Vec<String> = (0..dataset.scans.len()).map(|i| format!("scan_{i:05}.c3ds")).collect();
    for (scan, name) in dataset.scans.iter().zip(&names) {
        write_scan(scan, dir.join(name))?;
    }
    let split = SplitLists {
        fit: fit.iter().map(|&i| names[i].clone()).collect(),
        eval: eval.iter().map(|&i| names[i].clone()).collect(),
    };
    let manifest = Manifest::new(dataset.n_classes, names, split);
    let path = dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}

/// On-disk calibrator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsFile {
    pub method: Method,
    pub params: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub entropy_kind: Option<EntropyKind>,
    pub s_classes: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fit_meta: Option<FitMeta>,
}

#[derive(Serialize, Deserialize)]
struct TempSDoc {
    t: f64,
}

#[derive(Serialize, Deserialize)]
struct MetaCDoc {
    t: f64,
    eta: f64,
}

#[derive(Serialize, Deserialize)]
struct DeptSDoc {
    t1: f64,
    t2: f64,
    k1: f64,
    k2: f64,
    eta: f64,
}

impl ParamsFile {
    pub fn new(params: &CalibratorParams, s_classes: usize, fit_meta: Option<FitMeta>) -> Self {
        let value = match params {
            CalibratorParams::TempS(p) => serde_json::to_value(TempSDoc { t: p.temperature }),
            CalibratorParams::LogiS(p) | CalibratorParams::DiriS(p) => serde_json::to_value(p),
            CalibratorParams::MetaC(p) => {
                serde_json::to_value(MetaCDoc { t: p.temperature, eta: p.eta })
            }
            CalibratorParams::DeptS(p) => serde_json::to_value(DeptSDoc {
                t1: p.t_high,
                t2: p.t_low,
                k1: p.k1,
                k2: p.k2,
                eta: p.eta,
            }),
        }
        .expect("parameter documents contain only finite numbers");
        Self {
            method: params.method(),
            params: value,
            entropy_kind: params.entropy_kind(),
            s_classes,
            fit_meta,
        }
    }

    pub fn calibrator(&self, path: &Path) -> Result<CalibratorParams> {
        let json = |e| Error::Json { path: path.into(), source: e };
        let v = self.params.clone();
        let kind = self.entropy_kind.unwrap_or_default();
        let params = match self.method {
            Method::TempS => {
                let d: TempSDoc = serde_json::from_value(v).map_err(json)?;
                CalibratorParams::TempS(TempSParams { temperature: d.t })
            }
            Method::LogiS => CalibratorParams::LogiS(serde_json::from_value::<VectorParams>(v).map_err(json)?),
            Method::DiriS => CalibratorParams::DiriS(serde_json::from_value::<VectorParams>(v).map_err(json)?),
            Method::MetaC => {
                let d: MetaCDoc = serde_json::from_value(v).map_err(json)?;
                CalibratorParams::MetaC(MetaCParams { temperature: d.t, eta: d.eta, entropy_kind: kind })
            }
            Method::DeptS => {
                let d: DeptSDoc = serde_json::from_value(v).map_err(json)?;
                CalibratorParams::DeptS(DeptSParams {
                    t_high: d.t1,
                    t_low: d.t2,
                    k1: d.k1,
                    k2: d.k2,
                    eta: d.eta,
                    entropy_kind: kind,
                })
            }
        };
        params
            .validate(self.s_classes)
            .map_err(|e| Error::Validation { path: path.into(), message: e.to_string() })?;
        Ok(params)
    }
}

pub fn write_params(file: &ParamsFile, path: impl AsRef<Path>) -> Result<()> {
    write_json(file, path.as_ref())
}

/// Reads a parameter file and returns it with the validated calibrator.
pub fn read_params(path: impl AsRef<Path>) -> Result<(ParamsFile, CalibratorParams)> {
    let path = path.as_ref();
    let file: ParamsFile = read_json(path)?;
    let params = file.calibrator(path)?;
    Ok((file, params))
}

pub fn write_report(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    write_json(report, path.as_ref())
}

pub fn read_report(path: impl AsRef<Path>) -> Result<EvalReport> {
    read_json(path.as_ref())
}

/// CSV with columns `bin_lower,bin_upper,count,mean_conf,mean_acc,gap`;
/// empty bins leave the mean columns empty.
pub fn reliability_csv(bins: &[BinStats]) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(vec![]);
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let result: std::result::Result<(), csv::Error> = (|| {
        w.write_record(["bin_lower", "bin_upper", "count", "mean_conf", "mean_acc", "gap"])?;
        for b in bins {
            w.write_record([
                b.lower.to_string(),
                b.upper.to_string(),
                b.count.to_string(),
                opt(b.mean_conf()),
                opt(b.mean_acc()),
                opt((b.count > 0).then(|| b.gap())),
            ])?;
        }
        Ok(())
    })();
    result.expect("writing CSV to memory cannot fail");
    w.into_inner().expect("in-memory writer")
}

pub fn write_reliability_csv(bins: &[BinStats], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, reliability_csv(bins)).map_err(|e| Error::io(path, e))
}

/// Self-contained SVG reliability diagram: per bin an accuracy bar, a
/// confidence bar, and the gap between accuracy and confidence shaded.
pub fn reliability_svg(bins: &[BinStats]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 480.0;
    const PAD: f64 = 48.0;
    let plot_w = W - 2.0 * PAD;
    let plot_h = H - 2.0 * PAD;
    let y = |v: f64| PAD + plot_h * (1.0 - v);
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    ));
    out.push_str(&format!("<rect x=\"0\" y=\"0\" width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"));
    out.push_str(&format!(
        "<line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{PAD}\" stroke=\"#888\" stroke-dasharray=\"4 4\"/>\n",
        y(0.0),
        PAD + plot_w
    ));
    for b in bins {
        let x0 = PAD + plot_w * b.lower;
        let bw = plot_w * (b.upper - b.lower);
        let (Some(acc), Some(conf)) = (b.mean_acc(), b.mean_conf()) else { continue };
        let half = bw / 2.0;
        out.push_str(&format!(
            "<rect class=\"acc\" x=\"{x0:.3}\" y=\"{:.3}\" width=\"{half:.3}\" height=\"{:.3}\" fill=\"#3b6fb6\"/>\n",
            y(acc),
            plot_h * acc
        ));
        out.push_str(&format!(
            "<rect class=\"conf\" x=\"{:.3}\" y=\"{:.3}\" width=\"{half:.3}\" height=\"{:.3}\" fill=\"#f0a030\"/>\n",
            x0 + half,
            y(conf),
            plot_h * conf
        ));
        let (lo, hi) = (acc.min(conf), acc.max(conf));
        out.push_str(&format!(
            "<rect class=\"gap\" x=\"{x0:.3}\" y=\"{:.3}\" width=\"{bw:.3}\" height=\"{:.3}\" fill=\"#d03030\" fill-opacity=\"0.3\"/>\n",
            y(hi),
            plot_h * (hi - lo)
        ));
    }
    out.push_str(&format!(
        "<rect x=\"{PAD}\" y=\"{PAD}\" width=\"{plot_w}\" height=\"{plot_h}\" fill=\"none\" stroke=\"black\"/>\n"
    ));
    out.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"14\">confidence</text>\n",
        W / 2.0,
        H - 12.0
    ));
    out.push_str(&format!(
        "<text x=\"14\" y=\"{}\" text-anchor=\"middle\" font-size=\"14\" transform=\"rotate(-90 14 {})\">accuracy</text>\n",
        H / 2.0,
        H / 2.0
    ));
    out.push_str("</svg>\n");
    out
}

pub fn write_reliability_svg(bins: &[BinStats], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, reliability_svg(bins)).map_err(|e| Error::io(path, e))
}

/// Per-point calibrated predictions of one scan.
pub fn encode_sidecar(preds: &[Prediction]) -> Result<Vec<u8>> {
    let n = u32::try_from(preds.len())
        .map_err(|_| Error::InvalidConfig("too many points for a sidecar".into()))?;
    let mut buf = Vec::with_capacity(SIDECAR_HEADER_LEN + preds.len() * SIDECAR_RECORD_LEN);
    buf.extend_from_slice(SIDECAR_MAGIC);
    buf.extend_from_slice(&SIDECAR_VERSION.to_le_bytes());
    buf.extend_from_slice(&n.to_le_bytes());
    buf.extend_from_slice(&0u16.to_le_bytes());
    for p in preds {
        buf.extend_from_slice(&(p.class_id as u16).to_le_bytes());
        buf.extend_from_slice(&p.confidence.to_le_bytes());
    }
    Ok(buf)
}

pub fn write_sidecar(preds: &[Prediction], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_sidecar(preds)?).map_err(|e| Error::io(path, e))
}

pub fn read_sidecar(path: impl AsRef<Path>) -> Result<Vec<Prediction>> {
    let path = path.as_ref();
    let b = fs::read(path).map_err(|e| Error::io(path, e))?;
    let format = |offset: u64, message: String| Error::Format { path: path.into(), offset, message };
    if b.len() < SIDECAR_HEADER_LEN || &b[0..4] != SIDECAR_MAGIC {
        return Err(format(0, "not a sidecar file".into()));
    }
    if u16_at(&b, 4) != SIDECAR_VERSION {
        return Err(format(4, format!("unsupported version {}", u16_at(&b, 4))));
    }
    let n = u32_at(&b, 6) as u64;
    let expected = SIDECAR_HEADER_LEN as u64 + n * SIDECAR_RECORD_LEN as u64;
    if b.len() as u64 != expected {
        return Err(format(
            b.len().min(expected as usize) as u64,
            format!("expected {expected} bytes, found {}", b.len()),
        ));
    }
    Ok((0..n as usize)
        .map(|i| {
            let at = SIDECAR_HEADER_LEN + i * SIDECAR_RECORD_LEN;
            let mut c = [0u8; 8];
            c.copy_from_slice(&b[at + 2..at + 10]);
            Prediction { class_id: u16_at(&b, at) as usize, confidence: f64::from_le_bytes(c) }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::evaluate;
    use crate::metrics::PointOutcome;
    use proptest::prelude::*;

    fn one_point() -> ScanRecord {
        ScanRecord::new(2, vec![PointXYZ::new(1.0, -2.0, 0.5)], vec![1], vec![0.25, -3.0]).unwrap()
    }

    #[test]
    fn layout_length() {
        let bytes = encode_scan(&one_point()).unwrap();
        assert_eq!(bytes.len(), 38);
        assert_eq!(&bytes[..4], b"C3DS");
        assert_eq!(u16_at(&bytes, 4), 1);
        assert_eq!(u32_at(&bytes, 6), 1);
        assert_eq!(u16_at(&bytes, 10), 2);
        assert_eq!(u16_at(&bytes, 12), 0);
        assert_eq!(f32_at(&bytes, 16), 1.0);
        assert_eq!(u16_at(&bytes, 28), 1);
        assert_eq!(f32_at(&bytes, 34), -3.0);
    }

    #[test]
    fn read_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.c3ds");
        let good = encode_scan(&one_point()).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        fs::write(&path, &bad).unwrap();
        match read_scan(&path) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("{other:?}"),
        }

        fs::write(&path, &good[..30]).unwrap();
        match read_scan(&path) {
            Err(Error::Format { message, .. }) => assert!(message.contains("expected 38"), "{message}"),
            other => panic!("{other:?}"),
        }

        let mut bad = good.clone();
        bad[30..34].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&path, &bad).unwrap();
        match read_scan(&path) {
            Err(Error::Validation { message, .. }) => assert!(message.contains("point 0")),
            other => panic!("{other:?}"),
        }

        let mut bad = good.clone();
        bad[28..30].copy_from_slice(&7u16.to_le_bytes());
        fs::write(&path, &bad).unwrap();
        assert!(matches!(read_scan(&path), Err(Error::Validation { .. })));

        // header claims 4 billion points on a tiny file
        let mut bad = good.clone();
        bad[6..10].copy_from_slice(&u32::MAX.to_le_bytes());
        fs::write(&path, &bad).unwrap();
        assert!(matches!(read_scan(&path), Err(Error::Format { .. })));

        assert!(read_scan(dir.path().join("missing")).unwrap_err().is_io());
    }

    #[test]
    fn ignore_label_survives() {
        let scan = ScanRecord::new(
            3,
            vec![PointXYZ::default(); 2],
            vec![IGNORE_LABEL, 2],
            vec![0.0, 1.0, 2.0, -1.0, -2.0, 0.5],
        )
        .unwrap();
        let back = decode_scan(&encode_scan(&scan).unwrap(), Path::new("mem")).unwrap();
        assert_eq!(back, scan);
        assert_eq!(back.label(0), None);
    }

    #[test]
    fn csv_and_svg() {
        let outcomes = vec![vec![
            PointOutcome { pred: 0, label: 0, confidence: 0.95, depth: 1.0 },
            PointOutcome { pred: 1, label: 0, confidence: 0.55, depth: 1.0 },
        ]];
        let report = evaluate(&outcomes, 2, 10, "uncal").unwrap();
        let csv = String::from_utf8(reliability_csv(&report.reliability)).unwrap();
        let lines: Vec<&str> = csv.split_terminator("\r\n").collect();
        assert_eq!(lines.len(), 11);
        assert_eq!(lines[0], "bin_lower,bin_upper,count,mean_conf,mean_acc,gap");
        assert_eq!(lines[1], "0,0.1,0,,,");
        assert!(lines[10].starts_with("0.9,1,1,0.95,1,"));

        let svg = reliability_svg(&report.reliability);
        assert!(svg.starts_with("<svg xmlns=\"http://www.w3.org/2000/svg\""));
        assert_eq!(svg.matches("class=\"acc\"").count(), 2);
        assert_eq!(svg.matches("class=\"gap\"").count(), 2);
    }

    #[test]
    fn params_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let all = [
            CalibratorParams::TempS(TempSParams { temperature: 2.5 }),
            CalibratorParams::LogiS(VectorParams { w: vec![1.0, 0.5], b: vec![0.0, -0.1] }),
            CalibratorParams::DiriS(VectorParams { w: vec![1.0, 0.5], b: vec![0.2, -0.1] }),
            CalibratorParams::MetaC(MetaCParams { temperature: 1.2, eta: 0.4, entropy_kind: EntropyKind::ConfEntropy }),
            CalibratorParams::DeptS(DeptSParams {
                t_high: 1.1,
                t_low: 0.9,
                k1: 0.05,
                k2: 1.0,
                eta: 0.7,
                entropy_kind: EntropyKind::Shannon,
            }),
        ];
        for p in all {
            write_params(&ParamsFile::new(&p, 2, None), &path).unwrap();
            let (file, back) = read_params(&path).unwrap();
            assert_eq!(back, p);
            assert_eq!(file.s_classes, 2);
        }
        let text = fs::read_to_string(&path).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["method"], "depts");
        assert_eq!(v["params"]["t1"], 1.1);
        assert_eq!(v["entropy_kind"], "shannon");

        fs::write(&path, r#"{"method":"temps","params":{"t":0.0},"s_classes":2}"#).unwrap();
        assert!(matches!(read_params(&path), Err(Error::Validation { .. })));
    }

    #[test]
    fn manifest_checks() {
        let dir = tempfile::tempdir().unwrap();
        let ds = Dataset::new(2, vec![one_point(), one_point(), one_point()]).unwrap();
        let path = write_dataset(&ds, dir.path(), &[0, 1], &[2]).unwrap();
        let m = Manifest::load(&path).unwrap();
        assert_eq!(m.split_paths(Split::Eval), &["scan_00002.c3ds".to_string()]);
        let (_, names, loaded) = load_split(&path, Split::Fit).unwrap();
        assert_eq!(names.len(), 2);
        assert_eq!(loaded.scans[0], one_point());

        let mut overlapping = m.clone();
        overlapping.split.eval.push("scan_00000.c3ds".into());
        overlapping.save(&path).unwrap();
        assert!(matches!(Manifest::load(&path), Err(Error::Validation { .. })));

        let mut wrong = m.clone();
        wrong.n_classes = 3;
        wrong.class_names.push("x".into());
        wrong.save(&path).unwrap();
        assert!(matches!(Manifest::load(&path), Err(Error::Validation { .. })));

        let mut missing = m;
        missing.scans.push("nope.c3ds".into());
        missing.save(&path).unwrap();
        assert!(Manifest::load(&path).unwrap_err().is_io());
        assert!(Manifest::load(dir.path().join("none.json")).unwrap_err().is_io());
    }

    #[test]
    fn report_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let outcomes = vec![vec![PointOutcome { pred: 0, label: 1, confidence: 0.6, depth: 12.0 }]];
        let report = evaluate(&outcomes, 3, 10, "uncal").unwrap();
        let path = dir.path().join("r.json");
        write_report(&report, &path).unwrap();
        assert_eq!(read_report(&path).unwrap(), report);
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(v["ece_pct"], "60.00%");
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.c3dc");
        let preds = vec![
            Prediction { class_id: 3, confidence: 0.4 },
            Prediction { class_id: 0, confidence: 1.0 / 3.0 },
        ];
        write_sidecar(&preds, &path).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 32);
        assert_eq!(read_sidecar(&path).unwrap(), preds);
    }

    fn f32_val() -> impl Strategy<Value = f64> {
        (-1e4f32..1e4).prop_map(|v| v as f64)
    }

    proptest! {
        #[test]
        fn scan_round_trip_is_bit_exact(
            s in 2usize..6,
            pts in prop::collection::vec((f32_val(), f32_val(), f32_val(), 0u16..8, any::<bool>()), 0..20),
            seed in any::<u32>(),
        ) {
            let n = pts.len();
            let points = pts.iter().map(|p| PointXYZ::new(p.0, p.1, p.2)).collect();
            let labels = pts.iter().map(|p| if p.4 { IGNORE_LABEL } else { p.3 % s as u16 }).collect();
            let logits = (0..n * s)
                .map(|i| f32::from_bits((seed as usize).wrapping_mul(2654435761).wrapping_add(i * 97) as u32 % 0x7f00_0000) as f64)
                .collect();
            let scan = ScanRecord::new(s, points, labels, logits).unwrap();
            let bytes = encode_scan(&scan).unwrap();
            prop_assert_eq!(bytes.len(), 16 + n * (14 + 4 * s));
            let back = decode_scan(&bytes, Path::new("mem")).unwrap();
            prop_assert_eq!(encode_scan(&back).unwrap(), bytes);
            for (a, b) in back.logits.iter().zip(&scan.logits) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            prop_assert_eq!(back, scan);
        }
    }
}
