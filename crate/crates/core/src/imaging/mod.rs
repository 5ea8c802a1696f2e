//! Grayscale images, PGM I/O and the overlapping-patch geometry that maps an
//! image onto the `P × L` data matrix and back.

mod patches;
mod pgm;

pub use patches::{
    exclude_annotated_patches, extract_patches, make_grid, reconstruct_from_patches, PatchGrid,
    PatchMatrix, Reconstruction, training_patches,
};
pub use pgm::{load_image, save_image, save_image_with_depth, write_pgm, write_pgm_with_depth, BitDepth};

use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported image format {magic:?} (expected P5 or P2)")]
    UnsupportedFormat { magic: String },
    #[error("malformed PGM header: bad {field} at byte {offset}")]
    MalformedHeader { field: &'static str, offset: usize },
    #[error("truncated PGM payload at byte {offset}: expected {expected} samples, found {found}")]
    Truncated {
        offset: usize,
        expected: usize,
        found: usize,
    },
    #[error("PGM sample {value} at byte {offset} exceeds maxval {maxval}")]
    SampleOutOfRange {
        offset: usize,
        value: u32,
        maxval: u32,
    },
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("patch size {patch_size} does not fit a {height}x{width} image")]
    PatchTooLarge {
        patch_size: usize,
        height: usize,
        width: usize,
    },
    #[error("invalid patch geometry: {0}")]
    InvalidGeometry(String),
    #[error("grid built for {grid_h}x{grid_w} but image is {img_h}x{img_w}")]
    DimensionMismatch {
        grid_h: usize,
        grid_w: usize,
        img_h: usize,
        img_w: usize,
    },
    #[error("annotation {index} at ({x}, {y}) lies outside the {height}x{width} image")]
    AnnotationOutOfBounds {
        index: usize,
        x: f64,
        y: f64,
        height: usize,
        width: usize,
    },
}

/// Row-major grayscale intensity field.
///
/// Loaded images are scaled into `[0, 1]`; intermediate fields (outlier maps,
/// filter responses) reuse the type and only need finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGray {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageGray {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self, ImagingError> {
        if height == 0 || width == 0 {
            return Err(ImagingError::InvalidImage(format!(
                "empty dimensions {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(ImagingError::InvalidImage(format!(
                "data length {} does not match {height}x{width}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(ImagingError::InvalidImage(format!(
                "non-finite intensity at index {i}"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0, "empty image");
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    /// Builds an image by evaluating `f(row, col)` at every pixel.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(height > 0 && width > 0, "empty image");
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}
