//! Scoring detections against point annotations: disk matching, precision
//! and recall, precision-recall curves with trapezoidal AUC, and the Pearson
//! correlation of per-frame counts.

use std::fmt;
use std::io::Write;
use std::ops::{Add, AddAssign};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use thiserror::Error;

use crate::detection::threshold_and_group;
use crate::fsutil::write_atomic;
use crate::imaging::ImageGray;
use crate::points::{AnnotationSet, DetectionSet};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("{fields} response fields but {truths} annotation sets")]
    FrameCountMismatch { fields: usize, truths: usize },
    #[error("thresholds must be strictly increasing values in [0, 1]")]
    BadThresholds,
    #[error("matching radius must be positive, got {0}")]
    BadRadius(f64),
    #[error("correlation needs at least two paired values, got {0}")]
    TooFewSamples(usize),
    #[error("count lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("correlation is undefined for zero-variance input")]
    ZeroVariance,
    #[error("unknown matching mode {0:?} (expected any-within or one-to-one)")]
    UnknownMode(String),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// How detections are paired with annotation disks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MatchMode {
    /// A detection inside any disk is a true positive; an annotation with no
    /// detection inside its disk is a false negative. Several detections may
    /// count against one annotation.
    #[default]
    AnyWithin,
    /// Greedy nearest-pair matching, each point used at most once.
    OneToOne,
}

impl FromStr for MatchMode {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "any-within" => Ok(Self::AnyWithin),
            "one-to-one" => Ok(Self::OneToOne),
            _ => Err(EvalError::UnknownMode(s.to_string())),
        }
    }
}

impl fmt::Display for MatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::AnyWithin => "any-within",
            Self::OneToOne => "one-to-one",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Add for Confusion {
    type Output = Confusion;

    fn add(self, rhs: Confusion) -> Confusion {
        Confusion {
            tp: self.tp + rhs.tp,
            fp: self.fp + rhs.fp,
            fn_: self.fn_ + rhs.fn_,
        }
    }
}

impl AddAssign for Confusion {
    fn add_assign(&mut self, rhs: Confusion) {
        *self = *self + rhs;
    }
}

/// Counts true positives, false positives and false negatives for one
/// frame. A detection matches an annotation when their Euclidean distance
/// is at most `radius`.
pub fn match_detections(
    dets: &DetectionSet,
    truth: &AnnotationSet,
    radius: f64,
    mode: MatchMode,
) -> Confusion {
    let within = |d: usize, a: usize| dets.points[d].point().distance(&truth.points[a]) <= radius;
    match mode {
        MatchMode::AnyWithin => {
            let tp = (0..dets.len())
                .filter(|&d| (0..truth.points.len()).any(|a| within(d, a)))
                .count();
            let fn_ = (0..truth.points.len())
                .filter(|&a| !(0..dets.len()).any(|d| within(d, a)))
                .count();
            Confusion {
                tp,
                fp: dets.len() - tp,
                fn_,
            }
        }
        MatchMode::OneToOne => {
            let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
            for (d, det) in dets.points.iter().enumerate() {
                for (a, ann) in truth.points.iter().enumerate() {
                    let dist = det.point().distance(ann);
                    if dist <= radius {
                        pairs.push((dist, d, a));
                    }
                }
            }
            pairs.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
            let mut det_used = vec![false; dets.len()];
            let mut ann_used = vec![false; truth.points.len()];
            let mut tp = 0;
            for (_, d, a) in pairs {
                if !det_used[d] && !ann_used[a] {
                    det_used[d] = true;
                    ann_used[a] = true;
                    tp += 1;
                }
            }
            Confusion {
                tp,
                fp: dets.len() - tp,
                fn_: truth.points.len() - tp,
            }
        }
    }
}

/// `(TP / (TP + FP), TP / (TP + FN))`, with `0/0` read as 1 for both.
pub fn precision_recall(c: Confusion) -> (f64, f64) {
    let ratio = |num: usize, den: usize| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    (ratio(c.tp, c.tp + c.fp), ratio(c.tp, c.tp + c.fn_))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub confusion: Confusion,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    /// One point per threshold, thresholds increasing.
    pub points: Vec<PrPoint>,
    pub auc: f64,
}

/// `n` evenly spaced thresholds from 0 to 1 inclusive.
pub fn uniform_thresholds(n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.0],
        _ => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

fn check_thresholds(thresholds: &[f64]) -> Result<(), EvalError> {
    let in_range = thresholds.iter().all(|t| (0.0..=1.0).contains(t));
    let increasing = thresholds.windows(2).all(|w| w[0] < w[1]);
    if thresholds.is_empty() || !in_range || !increasing {
        return Err(EvalError::BadThresholds);
    }
    Ok(())
}

fn check_radius(radius: f64) -> Result<(), EvalError> {
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(EvalError::BadRadius(radius));
    }
    Ok(())
}

fn curve_from(thresholds: &[f64], confusion_at: impl Fn(f64) -> Confusion + Sync) -> PrCurve {
    let points: Vec<PrPoint> = thresholds
        .par_iter()
        .map(|&threshold| {
            let confusion = confusion_at(threshold);
            let (precision, recall) = precision_recall(confusion);
            PrPoint {
                threshold,
                confusion,
                precision,
                recall,
            }
        })
        .collect();
    let auc = area_under_curve(&points);
    PrCurve { points, auc }
}

/// Precision-recall curve over normalized response fields.
///
/// At each threshold every field is thresholded and grouped, and the
/// confusion counts are summed over all frames before computing one
/// (precision, recall) point.
pub fn pr_curve(
    fields: &[ImageGray],
    truths: &[AnnotationSet],
    radius: f64,
    thresholds: &[f64],
    mode: MatchMode,
) -> Result<PrCurve, EvalError> {
    if fields.len() != truths.len() {
        return Err(EvalError::FrameCountMismatch {
            fields: fields.len(),
            truths: truths.len(),
        });
    }
    check_thresholds(thresholds)?;
    check_radius(radius)?;
    Ok(curve_from(thresholds, |level| {
        fields
            .iter()
            .zip(truths)
            .map(|(field, truth)| {
                let dets = threshold_and_group(field, level, &truth.frame);
                match_detections(&dets, truth, radius, mode)
            })
            .fold(Confusion::default(), Add::add)
    }))
}

/// Precision-recall curve from scored detections: at each threshold only
/// detections whose score exceeds it are kept. Unlike [`pr_curve`] this
/// does not re-group pixels, so components that would split at a higher
/// threshold stay merged.
pub fn pr_curve_from_detections(
    dets: &[DetectionSet],
    truths: &[AnnotationSet],
    radius: f64,
    thresholds: &[f64],
    mode: MatchMode,
) -> Result<PrCurve, EvalError> {
    if dets.len() != truths.len() {
        return Err(EvalError::FrameCountMismatch {
            fields: dets.len(),
            truths: truths.len(),
        });
    }
    check_thresholds(thresholds)?;
    check_radius(radius)?;
    Ok(curve_from(thresholds, |level| {
        dets.iter()
            .zip(truths)
            .map(|(set, truth)| {
                let kept = DetectionSet {
                    frame: set.frame.clone(),
                    points: set.points.iter().copied().filter(|d| d.score > level).collect(),
                };
                match_detections(&kept, truth, radius, mode)
            })
            .fold(Confusion::default(), Add::add)
    }))
}

/// Trapezoidal area under precision as a function of recall, over the
/// observed recall range only.
///
/// Points are visited from the highest threshold down and then stably
/// sorted by recall, so ties in recall keep sweep order.
pub fn area_under_curve(points: &[PrPoint]) -> f64 {
    let mut ordered: Vec<&PrPoint> = points.iter().collect();
    ordered.sort_by(|a, b| b.threshold.total_cmp(&a.threshold));
    ordered.sort_by(|a, b| a.recall.total_cmp(&b.recall));
    ordered
        .windows(2)
        .map(|w| (w[1].recall - w[0].recall) * (w[0].precision + w[1].precision) / 2.0)
        .sum()
}

/// Writes `threshold,tp,fp,fn,precision,recall` rows and an `auc,<value>`
/// trailer.
pub fn write_pr_csv(path: impl AsRef<Path>, curve: &PrCurve) -> Result<(), EvalError> {
    let path = path.as_ref();
    write_atomic(path, |w| write_pr(w, curve)).map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_pr(w: &mut impl Write, curve: &PrCurve) -> std::io::Result<()> {
    writeln!(w, "threshold,tp,fp,fn,precision,recall")?;
    for p in &curve.points {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            p.threshold, p.confusion.tp, p.confusion.fp, p.confusion.fn_, p.precision, p.recall
        )?;
    }
    writeln!(w, "auc,{}", curve.auc)
}

/// Pearson product-moment correlation.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(EvalError::TooFewSamples(n));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(EvalError::ZeroVariance);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameCount {
    pub frame: String,
    pub truth: usize,
    pub algo: usize,
}

/// Writes `frame,count_truth,count_algo` rows and, when defined, a
/// `pearson,<value>` trailer.
pub fn write_counts_csv(
    path: impl AsRef<Path>,
    counts: &[FrameCount],
    correlation: Option<f64>,
) -> Result<(), EvalError> {
    let path = path.as_ref();
    write_atomic(path, |w| {
        writeln!(w, "frame,count_truth,count_algo")?;
        for c in counts {
            writeln!(w, "{},{},{}", c.frame, c.truth, c.algo)?;
        }
        if let Some(r) = correlation {
            writeln!(w, "pearson,{r}")?;
        }
        Ok(())
    })
    .map_err(|source| EvalError::Io {
        path: path.to_path_buf(),
        source,
    })
}
