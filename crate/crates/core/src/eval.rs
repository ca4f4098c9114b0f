//! Pixel-level confusion counts, derived metrics, aggregation, error maps,
//! and the tabular report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::AddAssign;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::{BinaryMask, LulcClass, MaskValue};
use crate::raster::{Dims, Plane, Rgb, RgbRaster};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("prediction is {pred} but ground truth is {gt}")]
    DimMismatch { pred: Dims, gt: Dims },
    #[error("nothing to compare: every ground-truth pixel is ignored")]
    EmptyComparison,
    #[error("aggregate needs all four classes; missing {0}")]
    MissingClass(LulcClass),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl AddAssign for ConfusionMatrix {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

impl std::iter::Sum for ConfusionMatrix {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), |mut a, b| {
            a += b;
            a
        })
    }
}

/// Counts outcomes over pixels whose ground truth is not Ignore. A
/// prediction of Ignore counts as a negative.
pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionMatrix, EvalError> {
    if pred.dims() != gt.dims() {
        return Err(EvalError::DimMismatch { pred: pred.dims(), gt: gt.dims() });
    }
    const CHUNK: usize = 1 << 16;
    Ok(pred
        .pixels()
        .par_chunks(CHUNK)
        .zip(gt.pixels().par_chunks(CHUNK))
        .map(|(p, g)| {
            let mut cm = ConfusionMatrix::default();
            for (&p, &g) in p.iter().zip(g) {
                let positive = p == MaskValue::Target;
                match (g, positive) {
                    (MaskValue::Ignore, _) => {}
                    (MaskValue::Target, true) => cm.tp += 1,
                    (MaskValue::Target, false) => cm.fn_ += 1,
                    (MaskValue::Other, true) => cm.fp += 1,
                    (MaskValue::Other, false) => cm.tn += 1,
                }
            }
            cm
        })
        .collect::<Vec<_>>()
        .into_iter()
        .sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub accuracy: f64,
    /// Target-class intersection over union.
    pub iou: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    /// Mean of target and other IoU.
    pub mean_iou: f64,
    /// Metrics whose denominator was zero somewhere and were defined as 0.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub undefined: Vec<String>,
}

impl MetricsRow {
    pub fn values(&self) -> [f64; 6] {
        [self.accuracy, self.iou, self.recall, self.precision, self.f1, self.mean_iou]
    }

    fn from_values(v: [f64; 6], undefined: Vec<String>) -> Self {
        Self { accuracy: v[0], iou: v[1], recall: v[2], precision: v[3], f1: v[4], mean_iou: v[5], undefined }
    }
}

pub const METRIC_NAMES: [&str; 6] = ["accuracy", "iou", "recall", "precision", "f1", "mean_iou"];

fn ratio(num: f64, den: f64, name: &str, undefined: &mut Vec<String>) -> f64 {
    if den == 0.0 {
        undefined.push(name.to_string());
        0.0
    } else {
        num / den
    }
}

pub fn metrics_from_confusion(cm: &ConfusionMatrix) -> Result<MetricsRow, EvalError> {
    let total = cm.total();
    if total == 0 {
        return Err(EvalError::EmptyComparison);
    }
    let (tp, fp, fn_, tn) = (cm.tp as f64, cm.fp as f64, cm.fn_ as f64, cm.tn as f64);
    let mut undefined = Vec::new();
    let accuracy = (tp + tn) / total as f64;
    let iou = ratio(tp, tp + fp + fn_, "iou", &mut undefined);
    let precision = ratio(tp, tp + fp, "precision", &mut undefined);
    let recall = ratio(tp, tp + fn_, "recall", &mut undefined);
    let f1 = ratio(2.0 * precision * recall, precision + recall, "f1", &mut undefined);
    let iou_other = ratio(tn, tn + fp + fn_, "iou_other", &mut undefined);
    Ok(MetricsRow { accuracy, iou, recall, precision, f1, mean_iou: (iou + iou_other) / 2.0, undefined })
}

/// Unweighted per-metric mean; flags are unioned.
pub fn mean_rows<'a>(rows: impl IntoIterator<Item = &'a MetricsRow>) -> Option<MetricsRow> {
    let mut sum = [0.0; 6];
    let mut n = 0usize;
    let mut flags: Vec<String> = Vec::new();
    for r in rows {
        for (s, v) in sum.iter_mut().zip(r.values()) {
            *s += v;
        }
        flags.extend(r.undefined.iter().cloned());
        n += 1;
    }
    if n == 0 {
        return None;
    }
    flags.sort();
    flags.dedup();
    Some(MetricsRow::from_values(sum.map(|s| s / n as f64), flags))
}

/// Average row across the four classes.
pub fn aggregate(rows: &BTreeMap<LulcClass, MetricsRow>) -> Result<MetricsRow, EvalError> {
    if let Some(&missing) = LulcClass::ALL.iter().find(|c| !rows.contains_key(c)) {
        return Err(EvalError::MissingClass(missing));
    }
    Ok(mean_rows(LulcClass::ALL.iter().map(|c| &rows[c])).expect("four rows"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorMapLegend {
    pub tp: Rgb,
    #[serde(rename = "fn")]
    pub fn_: Rgb,
    pub fp: Rgb,
    pub tn: Rgb,
}

impl Default for ErrorMapLegend {
    fn default() -> Self {
        Self { tp: [0, 255, 255], fn_: [0, 0, 255], fp: [255, 0, 0], tn: [128, 128, 128] }
    }
}

/// Colors each pixel by outcome; ignored ground truth renders as background
/// (the true-negative color).
pub fn error_map(pred: &BinaryMask, gt: &BinaryMask, legend: &ErrorMapLegend) -> Result<RgbRaster, EvalError> {
    if pred.dims() != gt.dims() {
        return Err(EvalError::DimMismatch { pred: pred.dims(), gt: gt.dims() });
    }
    let px = pred
        .pixels()
        .iter()
        .zip(gt.pixels())
        .map(|(&p, &g)| match (g, p == MaskValue::Target) {
            (MaskValue::Target, true) => legend.tp,
            (MaskValue::Target, false) => legend.fn_,
            (MaskValue::Other, true) => legend.fp,
            _ => legend.tn,
        })
        .collect();
    Ok(RgbRaster::from_pixels(pred.dims(), px))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEvaluation {
    pub name: String,
    pub confusion: ConfusionMatrix,
    /// Absent when every ground-truth pixel of the image is ignored.
    pub metrics: Option<MetricsRow>,
}

/// Metrics of one class model over its test images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEvaluation {
    pub class: LulcClass,
    pub mode: String,
    pub images: Vec<ImageEvaluation>,
    /// Unweighted mean of the per-image rows.
    pub row: MetricsRow,
    pub pooled_confusion: ConfusionMatrix,
    pub pooled: MetricsRow,
}

pub fn evaluate_class(
    class: LulcClass,
    mode: &str,
    pairs: &[(String, BinaryMask, BinaryMask)],
) -> Result<ClassEvaluation, EvalError> {
    let images = pairs
        .iter()
        .map(|(name, pred, gt)| {
            let cm = confusion(pred, gt)?;
            let metrics = metrics_from_confusion(&cm).ok();
            if metrics.is_none() {
                log::warn!("{name}: no comparable pixels, excluded from the class mean");
            }
            Ok(ImageEvaluation { name: name.clone(), confusion: cm, metrics })
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    let row = mean_rows(images.iter().filter_map(|i| i.metrics.as_ref())).ok_or(EvalError::EmptyComparison)?;
    let pooled_confusion: ConfusionMatrix = images.iter().map(|i| i.confusion).sum();
    let pooled = metrics_from_confusion(&pooled_confusion)?;
    Ok(ClassEvaluation { class, mode: mode.to_string(), images, row, pooled_confusion, pooled })
}

/// Five published metrics for one class (no mean-IoU column).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub accuracy: f64,
    pub iou: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
}

impl ReferenceRow {
    const fn new(accuracy: f64, iou: f64, recall: f64, precision: f64, f1: f64) -> Self {
        Self { accuracy, iou, recall, precision, f1 }
    }

    fn get(&self, metric: usize) -> Option<f64> {
        [self.accuracy, self.iou, self.recall, self.precision, self.f1].get(metric).copied()
    }
}

/// Fixed comparison numbers rendered beside computed metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reference {
    pub name: String,
    pub rows: BTreeMap<LulcClass, ReferenceRow>,
    pub average: ReferenceRow,
}

impl Reference {
    fn from_table(name: &str, rows: [ReferenceRow; 4], average: ReferenceRow) -> Self {
        Self { name: name.to_string(), rows: LulcClass::ALL.into_iter().zip(rows).collect(), average }
    }

    /// eCognition on the held-out test images.
    pub fn ecognition() -> Self {
        Self::from_table(
            "eCog",
            [
                ReferenceRow::new(0.80, 0.77, 0.63, 0.72, 0.65),
                ReferenceRow::new(0.63, 0.47, 0.23, 0.32, 0.32),
                ReferenceRow::new(0.73, 0.58, 0.30, 0.19, 0.21),
                ReferenceRow::new(0.73, 0.59, 0.69, 0.40, 0.48),
            ],
            ReferenceRow::new(0.74, 0.60, 0.46, 0.41, 0.42),
        )
    }

    /// Published FCN-8 numbers for downsampled (224×224) input.
    pub fn fcn8_downsampled() -> Self {
        Self::from_table(
            "FCN-8 down",
            [
                ReferenceRow::new(0.82, 0.73, 0.30, 0.81, 0.40),
                ReferenceRow::new(0.73, 0.60, 0.33, 0.59, 0.30),
                ReferenceRow::new(0.83, 0.71, 0.52, 0.51, 0.45),
                ReferenceRow::new(0.93, 0.86, 0.76, 0.78, 0.76),
            ],
            ReferenceRow::new(0.85, 0.76, 0.43, 0.75, 0.48),
        )
    }

    /// Published FCN-8 numbers for grid (tiled) input.
    pub fn fcn8_grid() -> Self {
        Self::from_table(
            "FCN-8 grid",
            [
                ReferenceRow::new(0.915, 0.847, 0.565, 0.901, 0.640),
                ReferenceRow::new(0.845, 0.735, 0.711, 0.699, 0.691),
                ReferenceRow::new(0.914, 0.846, 0.506, 0.850, 0.626),
                ReferenceRow::new(0.964, 0.932, 0.862, 0.905, 0.877),
            ],
            ReferenceRow::new(0.910, 0.840, 0.661, 0.839, 0.708),
        )
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "ecognition" | "ecog" => Some(Self::ecognition()),
            "fcn8-downsample" | "downsample" => Some(Self::fcn8_downsampled()),
            "fcn8-grid" | "grid" => Some(Self::fcn8_grid()),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub class: LulcClass,
    pub metrics: MetricsRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub title: String,
    pub rows: Vec<ReportRow>,
    /// Present when all four classes are reported.
    pub average: Option<MetricsRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<Reference>,
    /// Relative accuracy change against the reference, in percent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy_change_pct: Option<BTreeMap<String, f64>>,
    pub notes: Vec<String>,
}

pub const AGGREGATION_NOTE: &str = "per-image metrics use that image's pooled pixel counts; \
each class row is the unweighted mean over the class's test images; the Average row is the \
unweighted mean over classes";
pub const IOU_NOTE: &str = "IoU is target-class IoU; mIoU is the mean of target and other IoU";

pub fn report(
    title: &str,
    rows: &BTreeMap<LulcClass, MetricsRow>,
    reference: Option<Reference>,
    with_change: bool,
) -> Report {
    let average = aggregate(rows).ok();
    let accuracy_change_pct = match (&reference, with_change) {
        (Some(r), true) => {
            let mut m = BTreeMap::new();
            for (c, row) in rows {
                if let Some(rr) = r.rows.get(c) {
                    m.insert(c.name().to_string(), (row.accuracy - rr.accuracy) / rr.accuracy * 100.0);
                }
            }
            if let Some(avg) = &average {
                m.insert("average".into(), (avg.accuracy - r.average.accuracy) / r.average.accuracy * 100.0);
            }
            Some(m)
        }
        _ => None,
    };
    let mut notes = vec![AGGREGATION_NOTE.to_string(), IOU_NOTE.to_string()];
    let mut flagged: Vec<String> =
        rows.iter().flat_map(|(c, r)| r.undefined.iter().map(move |u| format!("{c}:{u}"))).collect();
    flagged.dedup();
    if !flagged.is_empty() {
        notes.push(format!("zero-denominator metrics reported as 0: {}", flagged.join(", ")));
    }
    Report {
        title: title.to_string(),
        rows: rows.iter().map(|(&class, m)| ReportRow { class, metrics: m.clone() }).collect(),
        average,
        reference,
        accuracy_change_pct,
        notes,
    }
}

const HEADERS: [&str; 6] = ["Accuracy", "IoU", "Recall", "Precision", "F-1", "mIoU"];

/// Three-decimal rendering used by the text table.
pub fn fmt_metric(v: f64) -> String {
    format!("{v:.3}")
}

impl Report {
    pub fn render_text(&self) -> String {
        let refcol = self.reference.as_ref();
        let cell = 11usize;
        let mut out = String::new();
        let _ = writeln!(out, "{}", self.title);
        let mut header = format!("{:<10}", "Class");
        for (i, h) in HEADERS.iter().enumerate() {
            if refcol.is_some() && i < 5 {
                header += &format!("{:>w$}", h, w = 2 * cell);
            } else {
                header += &format!("{:>w$}", h, w = cell);
            }
        }
        if self.accuracy_change_pct.is_some() {
            header += &format!("{:>w$}", "dAcc%", w = cell);
        }
        let _ = writeln!(out, "{header}");
        if let Some(r) = refcol {
            let mut sub = format!("{:<10}", "");
            for i in 0..HEADERS.len() {
                if i < 5 {
                    sub += &format!("{:>w$}{:>w$}", "ours", r.name, w = cell);
                } else {
                    sub += &format!("{:>w$}", "ours", w = cell);
                }
            }
            let _ = writeln!(out, "{sub}");
        }
        let mut line = |label: &str, m: &MetricsRow, rr: Option<ReferenceRow>, change: Option<f64>| {
            let mut s = format!("{label:<10}");
            for (i, v) in m.values().iter().enumerate() {
                s += &format!("{:>w$}", fmt_metric(*v), w = cell);
                if refcol.is_some() && i < 5 {
                    let r = rr.and_then(|r| r.get(i)).map(fmt_metric).unwrap_or_else(|| "-".into());
                    s += &format!("{r:>w$}", w = cell);
                }
            }
            if self.accuracy_change_pct.is_some() {
                let c = change.map(|c| format!("{c:+.2}")).unwrap_or_else(|| "-".into());
                s += &format!("{c:>w$}", w = cell);
            }
            let _ = writeln!(out, "{s}");
        };
        let change = |k: &str| self.accuracy_change_pct.as_ref().and_then(|m| m.get(k).copied());
        for row in &self.rows {
            let rr = refcol.and_then(|r| r.rows.get(&row.class).copied());
            line(row.class.name(), &row.metrics, rr, change(row.class.name()));
        }
        if let Some(avg) = &self.average {
            line("Average", avg, refcol.map(|r| r.average), change("average"));
        }
        for n in &self.notes {
            let _ = writeln!(out, "note: {n}");
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}
