//! Classical spot detectors used for comparison: Laplacian of Gaussian,
//! difference of Gaussians and grayscale-opening top-hat. All three feed
//! their normalized response into the same threshold/group/barycenter step
//! as the sparse-outlier detector.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::detection::{normalize_response, threshold_and_group};
use crate::imaging::ImageGray;
use crate::points::DetectionSet;

#[derive(Debug, Error, PartialEq)]
pub enum BaselineError {
    #[error("image {height}x{width} is smaller than the {needed}x{needed} kernel")]
    ImageTooSmall {
        height: usize,
        width: usize,
        needed: usize,
    },
    #[error("invalid kernel: {0}")]
    InvalidKernel(String),
    #[error("unknown baseline method {0:?} (expected log, dog or gsoth)")]
    UnknownMethod(String),
}

/// Square sampled kernel description. `sigma2` is only used by DoG.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub size: usize,
    pub sigma: f64,
    pub sigma2: Option<f64>,
}

impl KernelSpec {
    pub const fn gaussian(size: usize, sigma: f64) -> Self {
        Self {
            size,
            sigma,
            sigma2: None,
        }
    }

    pub const fn dog(size: usize, sigma: f64, sigma2: f64) -> Self {
        Self {
            size,
            sigma,
            sigma2: Some(sigma2),
        }
    }

    fn validate(&self) -> Result<(), BaselineError> {
        if self.size < 3 || self.size % 2 == 0 {
            return Err(BaselineError::InvalidKernel(format!(
                "size must be odd and at least 3, got {}",
                self.size
            )));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(BaselineError::InvalidKernel(format!("sigma must be positive, got {}", self.sigma)));
        }
        if let Some(s2) = self.sigma2 {
            if !(s2 > self.sigma && s2.is_finite()) {
                return Err(BaselineError::InvalidKernel(format!(
                    "DoG needs sigma < sigma2, got {} and {s2}",
                    self.sigma
                )));
            }
        }
        Ok(())
    }
}

pub const LOG_KERNEL: KernelSpec = KernelSpec::gaussian(5, 0.8);
pub const DOG_KERNEL: KernelSpec = KernelSpec::dog(5, 0.5, 0.8);
pub const GSOTH_SMOOTHING: KernelSpec = KernelSpec::gaussian(5, 0.8);

/// Row-major `size × size` kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub size: usize,
    pub weights: Vec<f64>,
}

fn sample(size: usize, f: impl Fn(f64) -> f64) -> Kernel {
    let half = (size / 2) as isize;
    let mut weights = Vec::with_capacity(size * size);
    for dy in -half..=half {
        for dx in -half..=half {
            weights.push(f((dx * dx + dy * dy) as f64));
        }
    }
    Kernel { size, weights }
}

/// Sampled Gaussian scaled to unit sum.
pub fn gaussian_kernel(spec: &KernelSpec) -> Result<Kernel, BaselineError> {
    spec.validate()?;
    Ok(unit_sum(sample(spec.size, |r2| {
        (-r2 / (2.0 * spec.sigma * spec.sigma)).exp()
    })))
}

/// Sampled negated Laplacian of Gaussian, shifted to zero sum, so bright
/// blobs give a positive response.
pub fn log_kernel(spec: &KernelSpec) -> Result<Kernel, BaselineError> {
    spec.validate()?;
    let s2 = spec.sigma * spec.sigma;
    let k = sample(spec.size, |r2| {
        let q = r2 / (2.0 * s2);
        (1.0 - q) * (-q).exp() / (std::f64::consts::PI * s2 * s2)
    });
    Ok(zero_sum(k))
}

/// `G(sigma) − G(sigma2)`, each Gaussian at unit sum before the difference.
pub fn dog_kernel(spec: &KernelSpec) -> Result<Kernel, BaselineError> {
    spec.validate()?;
    let sigma2 = spec.sigma2.ok_or_else(|| {
        BaselineError::InvalidKernel("DoG needs a second standard deviation".into())
    })?;
    let narrow = gaussian_kernel(&KernelSpec::gaussian(spec.size, spec.sigma))?;
    let wide = gaussian_kernel(&KernelSpec::gaussian(spec.size, sigma2))?;
    let weights = narrow
        .weights
        .iter()
        .zip(&wide.weights)
        .map(|(a, b)| a - b)
        .collect();
    Ok(zero_sum(Kernel {
        size: spec.size,
        weights,
    }))
}

fn unit_sum(mut k: Kernel) -> Kernel {
    let s: f64 = k.weights.iter().sum();
    k.weights.iter_mut().for_each(|w| *w /= s);
    k
}

fn zero_sum(mut k: Kernel) -> Kernel {
    let mean = k.weights.iter().sum::<f64>() / k.weights.len() as f64;
    k.weights.iter_mut().for_each(|w| *w -= mean);
    k
}

/// Mirror index into `[0, n)` with edge duplication (`… 1 0 | 0 1 …`).
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

fn check_size(img: &ImageGray, needed: usize) -> Result<(), BaselineError> {
    if img.height() < needed || img.width() < needed {
        return Err(BaselineError::ImageTooSmall {
            height: img.height(),
            width: img.width(),
            needed,
        });
    }
    Ok(())
}

/// Correlates `img` with a (symmetric) kernel using reflective padding.
pub fn convolve(img: &ImageGray, kernel: &Kernel) -> ImageGray {
    let (h, w) = (img.height(), img.width());
    let half = (kernel.size / 2) as isize;
    ImageGray::from_fn(h, w, |r, c| {
        let mut acc = 0.0;
        let mut k = 0;
        for dy in -half..=half {
            let rr = reflect(r as isize + dy, h);
            for dx in -half..=half {
                let cc = reflect(c as isize + dx, w);
                acc += kernel.weights[k] * img.get(rr, cc);
                k += 1;
            }
        }
        acc
    })
}

/// Flat structuring element for grayscale morphology.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum StructuringElement {
    /// Full 3×3 square (radius-1 disc in the chessboard metric).
    #[default]
    Square3,
    /// 4-neighbour cross (radius-1 disc in the city-block metric).
    Cross3,
}

impl StructuringElement {
    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Self::Square3 => &[
                (-1, -1),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 0),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1),
            ],
            Self::Cross3 => &[(-1, 0), (0, -1), (0, 0), (0, 1), (1, 0)],
        }
    }
}

fn morph(img: &ImageGray, se: StructuringElement, pick: fn(f64, f64) -> f64, init: f64) -> ImageGray {
    let (h, w) = (img.height(), img.width());
    ImageGray::from_fn(h, w, |r, c| {
        se.offsets().iter().fold(init, |acc, &(dy, dx)| {
            pick(
                acc,
                img.get(reflect(r as isize + dy, h), reflect(c as isize + dx, w)),
            )
        })
    })
}

pub fn erode(img: &ImageGray, se: StructuringElement) -> ImageGray {
    morph(img, se, f64::min, f64::INFINITY)
}

pub fn dilate(img: &ImageGray, se: StructuringElement) -> ImageGray {
    morph(img, se, f64::max, f64::NEG_INFINITY)
}

/// Erosion followed by dilation.
pub fn open(img: &ImageGray, se: StructuringElement) -> ImageGray {
    dilate(&erode(img, se), se)
}

/// Which image the opening is subtracted from in the top-hat.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TopHatBase {
    #[default]
    Smoothed,
    Original,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GsothOptions {
    /// Gaussian pre-smoothing; `None` opens the raw image.
    pub smoothing: Option<KernelSpec>,
    pub element: StructuringElement,
    pub base: TopHatBase,
}

impl Default for GsothOptions {
    fn default() -> Self {
        Self {
            smoothing: Some(GSOTH_SMOOTHING),
            element: StructuringElement::Square3,
            base: TopHatBase::Smoothed,
        }
    }
}

// Filter outputs below this magnitude are rounding residue of zero-sum
// kernels; they must not survive max normalization.
const RESIDUE: f64 = 1e-12;

fn flush_residue(img: ImageGray) -> ImageGray {
    img.map(|v| if v.abs() < RESIDUE { 0.0 } else { v })
}

/// Raw (unnormalized) LoG response.
pub fn log_filter(img: &ImageGray, spec: &KernelSpec) -> Result<ImageGray, BaselineError> {
    let kernel = log_kernel(spec)?;
    check_size(img, spec.size)?;
    Ok(flush_residue(convolve(img, &kernel)))
}

/// Raw (unnormalized) DoG response.
pub fn dog_filter(img: &ImageGray, spec: &KernelSpec) -> Result<ImageGray, BaselineError> {
    let kernel = dog_kernel(spec)?;
    check_size(img, spec.size)?;
    Ok(flush_residue(convolve(img, &kernel)))
}

/// Raw top-hat: base image minus the grayscale opening of the (smoothed)
/// image.
pub fn gsoth_filter(img: &ImageGray, opts: &GsothOptions) -> Result<ImageGray, BaselineError> {
    check_size(img, 3)?;
    let smoothed = match &opts.smoothing {
        Some(spec) => {
            let kernel = gaussian_kernel(spec)?;
            check_size(img, spec.size)?;
            convolve(img, &kernel)
        }
        None => img.clone(),
    };
    let opened = open(&smoothed, opts.element);
    let base = match opts.base {
        TopHatBase::Smoothed => &smoothed,
        TopHatBase::Original => img,
    };
    let data = base
        .data()
        .iter()
        .zip(opened.data())
        .map(|(b, o)| b - o)
        .collect();
    Ok(flush_residue(
        ImageGray::new(img.height(), img.width(), data).expect("same dimensions"),
    ))
}

/// Normalized LoG response (σ = 0.8, 5×5).
pub fn log_response(img: &ImageGray) -> Result<ImageGray, BaselineError> {
    Ok(normalize_response(&log_filter(img, &LOG_KERNEL)?))
}

/// Normalized DoG response (σ = 0.5 and 0.8, 5×5).
pub fn dog_response(img: &ImageGray) -> Result<ImageGray, BaselineError> {
    Ok(normalize_response(&dog_filter(img, &DOG_KERNEL)?))
}

/// Normalized top-hat response with default options.
pub fn gsoth_response(img: &ImageGray) -> Result<ImageGray, BaselineError> {
    gsoth_response_with(img, &GsothOptions::default())
}

pub fn gsoth_response_with(img: &ImageGray, opts: &GsothOptions) -> Result<ImageGray, BaselineError> {
    Ok(normalize_response(&gsoth_filter(img, opts)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMethod {
    Log,
    Dog,
    Gsoth,
}

impl BaselineMethod {
    pub const ALL: [BaselineMethod; 3] = [Self::Log, Self::Dog, Self::Gsoth];

    pub fn response(self, img: &ImageGray) -> Result<ImageGray, BaselineError> {
        match self {
            Self::Log => log_response(img),
            Self::Dog => dog_response(img),
            Self::Gsoth => gsoth_response(img),
        }
    }
}

impl FromStr for BaselineMethod {
    type Err = BaselineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "log" => Ok(Self::Log),
            "dog" => Ok(Self::Dog),
            "gsoth" => Ok(Self::Gsoth),
            _ => Err(BaselineError::UnknownMethod(s.to_string())),
        }
    }
}

impl fmt::Display for BaselineMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Log => "log",
            Self::Dog => "dog",
            Self::Gsoth => "gsoth",
        })
    }
}

pub fn baseline_detect(
    img: &ImageGray,
    method: BaselineMethod,
    level: f64,
    frame: &str,
) -> Result<DetectionSet, BaselineError> {
    Ok(threshold_and_group(&method.response(img)?, level, frame))
}
