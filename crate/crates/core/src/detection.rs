//! From the estimated outlier matrix to point detections: overlap-averaged
//! outlier image, max normalization, thresholding, 8-connected grouping and
//! barycenters.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::dictionary::Dictionary;
use crate::imaging::{
    extract_patches, make_grid, reconstruct_from_patches, ImageGray, ImagingError, PatchGrid,
    PatchMatrix,
};
use crate::points::{Detection, DetectionSet};
use crate::robust_coding::{
    robust_sparse_code, AdmmOptions, CodingError, RobustCodingProblem, RobustCodingResult,
};

#[derive(Debug, Error)]
pub enum DetectError {
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Coding(#[from] CodingError),
    #[error("dictionary atoms have {p} pixels but patch size {patch_size} needs {}", patch_size * patch_size)]
    DictionaryMismatch { p: usize, patch_size: usize },
    #[error("invalid detection parameter: {0}")]
    InvalidParams(String),
}

/// Normalized outlier field plus the patch coverage of every pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct OutlierImage {
    pub image: ImageGray,
    pub coverage: Vec<u32>,
}

/// Clamps negative values to zero and divides by the maximum, leaving an
/// all-zero field unchanged.
pub fn normalize_response(field: &ImageGray) -> ImageGray {
    let clamped = field.map(|v| v.max(0.0));
    let max = clamped.max_value();
    if max > 0.0 {
        clamped.map(|v| v / max)
    } else {
        clamped
    }
}

/// Reassembles the outlier matrix into an image.
///
/// Only positive deviations are candidates, so entries are clamped at zero
/// before overlap averaging; the result is then divided by its maximum.
pub fn outlier_image(r_hat: &DMatrix<f64>, grid: &PatchGrid) -> Result<OutlierImage, ImagingError> {
    let clamped = PatchMatrix::new(r_hat.map(|v| v.max(0.0)), *grid)?;
    let rec = reconstruct_from_patches(&clamped);
    Ok(OutlierImage {
        image: normalize_response(&rec.image),
        coverage: rec.coverage,
    })
}

/// Thresholds `field` at `level` (strictly greater), groups 8-connected
/// pixels and reports one detection per group at the unweighted mean of
/// its pixel coordinates, scored by the group's maximum value.
///
/// Groups are reported in raster order of their first pixel.
pub fn threshold_and_group(field: &ImageGray, level: f64, frame: &str) -> DetectionSet {
    let (h, w) = (field.height(), field.width());
    let data = field.data();
    let mut visited = vec![false; h * w];
    let mut stack = Vec::new();
    let mut points = Vec::new();

    for start in 0..h * w {
        if visited[start] || !(data[start] > level) {
            continue;
        }
        visited[start] = true;
        stack.push(start);
        let (mut sum_r, mut sum_c, mut n, mut peak) = (0.0, 0.0, 0usize, f64::NEG_INFINITY);
        while let Some(idx) = stack.pop() {
            let (r, c) = (idx / w, idx % w);
            sum_r += r as f64;
            sum_c += c as f64;
            n += 1;
            peak = peak.max(data[idx]);
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (nr, nc) = (r as isize + dr, c as isize + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let nidx = nr as usize * w + nc as usize;
                    if !visited[nidx] && data[nidx] > level {
                        visited[nidx] = true;
                        stack.push(nidx);
                    }
                }
            }
        }
        points.push(Detection {
            x: sum_c / n as f64,
            y: sum_r / n as f64,
            score: peak,
        });
    }
    DetectionSet {
        frame: frame.to_string(),
        points,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectParams {
    pub alpha: f64,
    pub beta: f64,
    pub patch_size: usize,
    pub overlap: f64,
    /// Detection threshold `ℓ_d` on the normalized outlier image.
    pub level: f64,
    pub admm: AdmmOptions,
}

impl DetectParams {
    /// Defaults for everything except `beta`, which must always be chosen.
    pub fn with_beta(beta: f64) -> Self {
        Self {
            alpha: 1e-5,
            beta,
            patch_size: 27,
            overlap: 0.5,
            level: 0.07,
            admm: AdmmOptions::default(),
        }
    }

    pub fn validate(&self, dict: &Dictionary) -> Result<(), DetectError> {
        if !(0.0..=1.0).contains(&self.level) {
            return Err(DetectError::InvalidParams(format!(
                "level {} outside [0, 1]",
                self.level
            )));
        }
        if dict.p() != self.patch_size * self.patch_size {
            return Err(DetectError::DictionaryMismatch {
                p: dict.p(),
                patch_size: self.patch_size,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FrameDetection {
    pub detections: DetectionSet,
    pub outlier: OutlierImage,
    pub coding: RobustCodingResult,
}

/// Runs the full per-frame pipeline: patches, robust sparse coding,
/// outlier image, thresholding and grouping.
pub fn detect_frame(
    img: &ImageGray,
    dict: &Dictionary,
    params: &DetectParams,
    frame: &str,
) -> Result<FrameDetection, DetectError> {
    params.validate(dict)?;
    let grid = make_grid(img.height(), img.width(), params.patch_size, params.overlap)?;
    let patches = extract_patches(img, &grid)?;
    let prob = RobustCodingProblem::new(&patches.values, dict, params.alpha, params.beta)?;
    let coding = robust_sparse_code(&prob, &params.admm)?;
    if !coding.converged {
        log::warn!(
            "frame {frame}: ADMM stopped after {} iterations without converging (primal {:.3e}, dual {:.3e})",
            coding.iterations,
            coding.primal_residual,
            coding.dual_residual
        );
    }
    let outlier = outlier_image(&coding.r, &grid)?;
    let detections = threshold_and_group(&outlier.image, params.level, frame);
    Ok(FrameDetection {
        detections,
        outlier,
        coding,
    })
}
