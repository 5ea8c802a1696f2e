use nalgebra::DMatrix;

use super::{ImageGray, ImagingError};
use crate::points::AnnotationSet;

/// Placement of square patches on an image.
///
/// Patch `(i, j)` has its top-left corner at `(i * stride, j * stride)`.
/// Only patches that fit entirely inside the image are generated, so the
/// right and bottom margins may be left uncovered.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub stride: usize,
    pub rows: usize,
    pub cols: usize,
    pub image_h: usize,
    pub image_w: usize,
}

impl PatchGrid {
    /// Pixels per patch, `P`.
    pub fn pixels_per_patch(&self) -> usize {
        self.patch_size * self.patch_size
    }

    /// Number of patches, `L`.
    pub fn patch_count(&self) -> usize {
        self.rows * self.cols
    }

    /// Column of the data matrix that holds patch `(i, j)`.
    #[inline]
    pub fn column_index(&self, i: usize, j: usize) -> usize {
        j * self.rows + i
    }

    /// Top-left pixel `(row, col)` of the patch stored in `column`.
    #[inline]
    pub fn offset_of_column(&self, column: usize) -> (usize, usize) {
        let i = column % self.rows;
        let j = column / self.rows;
        (i * self.stride, j * self.stride)
    }

    /// Row/column extent of the covered region (exclusive bounds).
    pub fn covered_extent(&self) -> (usize, usize) {
        (
            (self.rows - 1) * self.stride + self.patch_size,
            (self.cols - 1) * self.stride + self.patch_size,
        )
    }
}

/// Builds the patch grid for an `image_h × image_w` image.
///
/// `stride = round(patch_size * (1 - overlap))`, at least 1.
pub fn make_grid(
    image_h: usize,
    image_w: usize,
    patch_size: usize,
    overlap: f64,
) -> Result<PatchGrid, ImagingError> {
    if patch_size == 0 {
        return Err(ImagingError::InvalidGeometry("patch size must be positive".into()));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(ImagingError::InvalidGeometry(format!(
            "overlap {overlap} outside [0, 1)"
        )));
    }
    if patch_size > image_h.min(image_w) {
        return Err(ImagingError::PatchTooLarge {
            patch_size,
            height: image_h,
            width: image_w,
        });
    }
    let stride = ((patch_size as f64 * (1.0 - overlap)).round() as usize).max(1);
    Ok(PatchGrid {
        patch_size,
        stride,
        rows: (image_h - patch_size) / stride + 1,
        cols: (image_w - patch_size) / stride + 1,
        image_h,
        image_w,
    })
}

/// The `P × L` data matrix; column `j * rows + i` is patch `(i, j)`.
///
/// Inside a column the patch is vectorized column-major: entry
/// `c * patch_size + r` is patch pixel `(r, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMatrix {
    pub values: DMatrix<f64>,
    pub grid: PatchGrid,
}

impl PatchMatrix {
    pub fn new(values: DMatrix<f64>, grid: PatchGrid) -> Result<Self, ImagingError> {
        if values.nrows() != grid.pixels_per_patch() || values.ncols() != grid.patch_count() {
            return Err(ImagingError::InvalidGeometry(format!(
                "matrix is {}x{} but grid needs {}x{}",
                values.nrows(),
                values.ncols(),
                grid.pixels_per_patch(),
                grid.patch_count()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ImagingError::InvalidGeometry("non-finite patch value".into()));
        }
        Ok(Self { values, grid })
    }

    pub fn p(&self) -> usize {
        self.values.nrows()
    }

    pub fn l(&self) -> usize {
        self.values.ncols()
    }
}

pub fn extract_patches(img: &ImageGray, grid: &PatchGrid) -> Result<PatchMatrix, ImagingError> {
    if img.height() != grid.image_h || img.width() != grid.image_w {
        return Err(ImagingError::DimensionMismatch {
            grid_h: grid.image_h,
            grid_w: grid.image_w,
            img_h: img.height(),
            img_w: img.width(),
        });
    }
    let n = grid.patch_size;
    let mut values = DMatrix::zeros(grid.pixels_per_patch(), grid.patch_count());
    for (col, mut patch) in values.column_iter_mut().enumerate() {
        let (r0, c0) = grid.offset_of_column(col);
        for c in 0..n {
            for r in 0..n {
                patch[c * n + r] = img.get(r0 + r, c0 + c);
            }
        }
    }
    Ok(PatchMatrix {
        values,
        grid: *grid,
    })
}

/// Overlap-averaged image plus the number of patches covering each pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub image: ImageGray,
    pub coverage: Vec<u32>,
}

/// Reassembles patches by averaging every patch entry that maps onto a
/// pixel. Uncovered pixels are 0 with coverage 0.
pub fn reconstruct_from_patches(pm: &PatchMatrix) -> Reconstruction {
    let grid = &pm.grid;
    let n = grid.patch_size;
    let mut sum = vec![0.0; grid.image_h * grid.image_w];
    let mut coverage = vec![0u32; grid.image_h * grid.image_w];
    for (col, patch) in pm.values.column_iter().enumerate() {
        let (r0, c0) = grid.offset_of_column(col);
        for c in 0..n {
            for r in 0..n {
                let idx = (r0 + r) * grid.image_w + c0 + c;
                sum[idx] += patch[c * n + r];
                coverage[idx] += 1;
            }
        }
    }
    for (s, &k) in sum.iter_mut().zip(&coverage) {
        if k > 0 {
            *s /= f64::from(k);
        }
    }
    Reconstruction {
        image: ImageGray::new(grid.image_h, grid.image_w, sum)
            .expect("grid dimensions are non-empty"),
        coverage,
    }
}

/// Keep-mask over patch columns: `false` for every patch whose window
/// `[offset, offset + patch_size)` contains an annotated point.
///
/// Annotations use `x` = column, `y` = row, 0-based.
pub fn exclude_annotated_patches(
    grid: &PatchGrid,
    ann: &AnnotationSet,
) -> Result<Vec<bool>, ImagingError> {
    let mut keep = vec![true; grid.patch_count()];
    let size = grid.patch_size as f64;
    for (index, p) in ann.points.iter().enumerate() {
        let in_bounds = p.x >= 0.0
            && p.y >= 0.0
            && p.x < grid.image_w as f64
            && p.y < grid.image_h as f64;
        if !in_bounds {
            return Err(ImagingError::AnnotationOutOfBounds {
                index,
                x: p.x,
                y: p.y,
                height: grid.image_h,
                width: grid.image_w,
            });
        }
        for (col, k) in keep.iter_mut().enumerate() {
            let (r0, c0) = grid.offset_of_column(col);
            let (r0, c0) = (r0 as f64, c0 as f64);
            if p.y >= r0 && p.y < r0 + size && p.x >= c0 && p.x < c0 + size {
                *k = false;
            }
        }
    }
    Ok(keep)
}

/// Stacks the patches of several frames into one training matrix, leaving
/// out every patch that contains an annotation of its frame.
pub fn training_patches<'a>(
    frames: impl IntoIterator<Item = (&'a ImageGray, Option<&'a AnnotationSet>)>,
    patch_size: usize,
    overlap: f64,
) -> Result<DMatrix<f64>, ImagingError> {
    let mut columns = Vec::new();
    let mut p = patch_size * patch_size;
    for (img, ann) in frames {
        let grid = make_grid(img.height(), img.width(), patch_size, overlap)?;
        let pm = extract_patches(img, &grid)?;
        p = pm.p();
        let keep = match ann {
            Some(a) => exclude_annotated_patches(&grid, a)?,
            None => vec![true; grid.patch_count()],
        };
        columns.extend(
            keep.iter()
                .enumerate()
                .filter(|(_, &k)| k)
                .map(|(j, _)| pm.values.column(j).clone_owned()),
        );
    }
    if columns.is_empty() {
        return Ok(DMatrix::zeros(p, 0));
    }
    Ok(DMatrix::from_columns(&columns))
}
