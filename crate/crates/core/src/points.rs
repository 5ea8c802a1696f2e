//! Point sets exchanged between the detectors and the evaluator, and their
//! CSV forms.
//!
//! Coordinates are 0-based pixels with `x` = column and `y` = row.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil::write_atomic;

#[derive(Debug, Error)]
pub enum PointsError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: unexpected header {found:?}, expected {expected:?}")]
    Header {
        path: PathBuf,
        found: String,
        expected: &'static str,
    },
    #[error("{path}: row {row} has a non-finite coordinate")]
    NonFinite { path: PathBuf, row: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Ground-truth points for one frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnnotationSet {
    pub frame: String,
    pub points: Vec<Point>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub x: f64,
    pub y: f64,
    /// Peak normalized response inside the detected component.
    pub score: f64,
}

impl Detection {
    pub fn point(&self) -> Point {
        Point {
            x: self.x,
            y: self.y,
        }
    }
}

/// Detector output for one frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectionSet {
    pub frame: String,
    pub points: Vec<Detection>,
}

impl DetectionSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Serialize, Deserialize)]
struct TruthRow {
    frame: String,
    x: f64,
    y: f64,
}

#[derive(Serialize, Deserialize)]
struct DetectionRow {
    frame: String,
    x: f64,
    y: f64,
    score: f64,
}

const TRUTH_HEADER: &str = "frame,x,y";
const DETECTION_HEADER: &str = "frame,x,y,score";

fn check_header<R: std::io::Read>(
    rdr: &mut csv::Reader<R>,
    path: &Path,
    expected: &'static str,
) -> Result<(), PointsError> {
    let headers = rdr.headers().map_err(|source| PointsError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let found = headers.iter().collect::<Vec<_>>().join(",");
    if found != expected {
        return Err(PointsError::Header {
            path: path.to_path_buf(),
            found,
            expected,
        });
    }
    Ok(())
}

/// Reads a `frame,x,y` CSV, grouping points by frame in frame-id order.
pub fn read_annotations(path: impl AsRef<Path>) -> Result<Vec<AnnotationSet>, PointsError> {
    let path = path.as_ref();
    let read_err = |source| PointsError::Read {
        path: path.to_path_buf(),
        source,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(read_err)?;
    check_header(&mut rdr, path, TRUTH_HEADER)?;
    let mut frames: BTreeMap<String, Vec<Point>> = BTreeMap::new();
    for (row, rec) in rdr.deserialize::<TruthRow>().enumerate() {
        let rec = rec.map_err(read_err)?;
        if !rec.x.is_finite() || !rec.y.is_finite() {
            return Err(PointsError::NonFinite {
                path: path.to_path_buf(),
                row: row + 1,
            });
        }
        frames.entry(rec.frame).or_default().push(Point { x: rec.x, y: rec.y });
    }
    Ok(frames
        .into_iter()
        .map(|(frame, points)| AnnotationSet { frame, points })
        .collect())
}

pub fn write_annotations(path: impl AsRef<Path>, sets: &[AnnotationSet]) -> Result<(), PointsError> {
    let path = path.as_ref();
    write_atomic(path, |w| {
        let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        wtr.write_record(TRUTH_HEADER.split(','))?;
        for set in sets {
            for p in &set.points {
                wtr.serialize(TruthRow {
                    frame: set.frame.clone(),
                    x: p.x,
                    y: p.y,
                })?;
            }
        }
        wtr.flush()
    })
    .map_err(|source| PointsError::Write {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a `frame,x,y,score` CSV, grouping detections by frame.
pub fn read_detections(path: impl AsRef<Path>) -> Result<Vec<DetectionSet>, PointsError> {
    let path = path.as_ref();
    let read_err = |source| PointsError::Read {
        path: path.to_path_buf(),
        source,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(read_err)?;
    check_header(&mut rdr, path, DETECTION_HEADER)?;
    let mut frames: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    for (row, rec) in rdr.deserialize::<DetectionRow>().enumerate() {
        let rec = rec.map_err(read_err)?;
        if !(rec.x.is_finite() && rec.y.is_finite() && rec.score.is_finite()) {
            return Err(PointsError::NonFinite {
                path: path.to_path_buf(),
                row: row + 1,
            });
        }
        frames.entry(rec.frame).or_default().push(Detection {
            x: rec.x,
            y: rec.y,
            score: rec.score,
        });
    }
    Ok(frames
        .into_iter()
        .map(|(frame, points)| DetectionSet { frame, points })
        .collect())
}

/// Writes detections in the order given; an empty slice produces a
/// header-only file.
pub fn write_detections(path: impl AsRef<Path>, sets: &[DetectionSet]) -> Result<(), PointsError> {
    let path = path.as_ref();
    write_atomic(path, |w| {
        let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        wtr.write_record(DETECTION_HEADER.split(','))?;
        for set in sets {
            for d in &set.points {
                wtr.serialize(DetectionRow {
                    frame: set.frame.clone(),
                    x: d.x,
                    y: d.y,
                    score: d.score,
                })?;
            }
        }
        wtr.flush()
    })
    .map_err(|source| PointsError::Write {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn annotations_round_trip_grouped_by_frame() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("truth.csv");
        let sets = vec![
            AnnotationSet {
                frame: "a".into(),
                points: vec![Point { x: 1.5, y: 2.0 }, Point { x: 0.0, y: 0.0 }],
            },
            AnnotationSet {
                frame: "b".into(),
                points: vec![Point { x: 10.0, y: 3.25 }],
            },
        ];
        write_annotations(&path, &sets).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("frame,x,y\n"));
        assert_eq!(read_annotations(&path).unwrap(), sets);
    }

    #[test]
    fn empty_detection_file_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("det.csv");
        write_detections(&path, &[]).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "frame,x,y,score\n");
        assert!(read_detections(&path).unwrap().is_empty());
    }

    #[test]
    fn wrong_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        std::fs::write(&path, "frame,row,col\nf,1,2\n").unwrap();
        assert!(matches!(
            read_annotations(&path),
            Err(PointsError::Header { .. })
        ));
    }
}
