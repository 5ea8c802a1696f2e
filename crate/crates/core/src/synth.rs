//! Seeded synthetic frames: smooth dictionary-generated backgrounds with
//! implanted Gaussian spots and additive noise, plus ground truth.
//!
//! Every frame draws from its own random streams keyed by
//! `(seed, frame_index, purpose)`, so frames can be generated in any order
//! or in parallel without changing a single byte of output.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use thiserror::Error;

use crate::dictionary::{normalize_atoms, Dictionary};
use crate::fsutil::write_atomic;
use crate::imaging::{make_grid, reconstruct_from_patches, save_image_with_depth, BitDepth, ImageGray, ImagingError, PatchMatrix};
use crate::points::{write_annotations, AnnotationSet, Point, PointsError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("frame {frame}: placed only {placed} of {wanted} spots after {attempts} attempts")]
    SpotPlacement {
        frame: usize,
        placed: usize,
        wanted: usize,
        attempts: usize,
    },
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error(transparent)]
    Points(#[from] PointsError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub frames: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub patch_size: usize,
    pub overlap: f64,
    /// Atoms in the planted background dictionary.
    pub atoms: usize,
    /// Atoms combined in every background patch.
    pub sparsity: usize,
    pub spots: usize,
    pub spot_amplitude: f64,
    pub spot_sigma: f64,
    pub noise_sigma: f64,
    /// Minimum distance between spot centers.
    pub min_separation: f64,
    /// Spot centers keep this distance from the edges of the patch-covered
    /// region.
    pub margin: usize,
    pub background_max: f64,
    /// Sample width of the written frames.
    pub bit_depth: BitDepth,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            frames: 10,
            image_h: 274,
            image_w: 384,
            patch_size: 27,
            overlap: 0.5,
            atoms: 20,
            sparsity: 3,
            spots: 10,
            spot_amplitude: 0.5,
            spot_sigma: 1.5,
            noise_sigma: 0.01,
            min_separation: 25.0,
            margin: 14,
            background_max: 0.6,
            bit_depth: BitDepth::Eight,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |msg: String| Err(SynthError::InvalidSpec(msg));
        if self.patch_size == 0 || self.image_h < self.patch_size || self.image_w < self.patch_size {
            return bad(format!(
                "{}×{} frames cannot hold a {}-pixel patch",
                self.image_h, self.image_w, self.patch_size
            ));
        }
        if self.atoms == 0 {
            return bad("planted dictionary needs at least one atom".into());
        }
        if self.sparsity > self.atoms {
            return bad(format!("sparsity {} exceeds {} atoms", self.sparsity, self.atoms));
        }
        if !(self.spot_sigma > 0.0 && self.spot_sigma.is_finite()) {
            return bad(format!("spot sigma must be positive, got {}", self.spot_sigma));
        }
        if !(self.spot_amplitude > 0.0 && self.spot_amplitude.is_finite()) {
            return bad(format!("spot amplitude must be positive, got {}", self.spot_amplitude));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise sigma must be non-negative, got {}", self.noise_sigma));
        }
        if !(self.background_max >= 0.0 && self.background_max <= 1.0) {
            return bad(format!("background max {} outside [0, 1]", self.background_max));
        }
        if !(self.min_separation >= 0.0 && self.min_separation.is_finite()) {
            return bad(format!("bad spot separation {}", self.min_separation));
        }
        let grid = make_grid(self.image_h, self.image_w, self.patch_size, self.overlap)?;
        let (ch, cw) = grid.covered_extent();
        if self.spots > 0 && (2 * self.margin >= ch || 2 * self.margin >= cw) {
            return bad(format!("margin {} leaves no room for spots", self.margin));
        }
        Ok(())
    }

    /// `key=value` lines recording every field.
    pub fn manifest(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "frames={}", self.frames);
        let _ = writeln!(s, "image_h={}", self.image_h);
        let _ = writeln!(s, "image_w={}", self.image_w);
        let _ = writeln!(s, "patch_size={}", self.patch_size);
        let _ = writeln!(s, "overlap={}", self.overlap);
        let _ = writeln!(s, "atoms={}", self.atoms);
        let _ = writeln!(s, "sparsity={}", self.sparsity);
        let _ = writeln!(s, "spots={}", self.spots);
        let _ = writeln!(s, "spot_amplitude={}", self.spot_amplitude);
        let _ = writeln!(s, "spot_sigma={}", self.spot_sigma);
        let _ = writeln!(s, "noise_sigma={}", self.noise_sigma);
        let _ = writeln!(s, "min_separation={}", self.min_separation);
        let _ = writeln!(s, "margin={}", self.margin);
        let _ = writeln!(s, "background_max={}", self.background_max);
        let _ = writeln!(s, "bit_depth={}", self.bit_depth.bits());
        let _ = writeln!(s, "seed={}", self.seed);
        s
    }
}

const DICTIONARY_STREAM: u64 = 0;
const BACKGROUND_STREAM: u64 = 1;
const SPOT_STREAM: u64 = 2;
const NOISE_STREAM: u64 = 3;

fn stream(seed: u64, frame_index: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((frame_index as u64 + 1) << 4) | purpose);
    rng
}

fn dct_basis(ps: usize, u: usize, v: usize) -> impl Fn(usize, usize) -> f64 {
    let n = ps as f64;
    move |r, c| {
        ((PI * u as f64 * (r as f64 + 0.5)) / n).cos() * ((PI * v as f64 * (c as f64 + 0.5)) / n).cos()
    }
}

/// Smooth background atoms: a constant atom followed by random mixtures of
/// low-frequency cosines, each normalized to unit length.
pub fn planted_dictionary(patch_size: usize, atoms: usize, seed: u64) -> Dictionary {
    let mut rng = {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        r.set_stream(DICTIONARY_STREAM);
        r
    };
    let p = patch_size * patch_size;
    let freqs: Vec<(usize, usize)> = (0..=5)
        .flat_map(|u| (0..=5).map(move |v| (u, v)))
        .filter(|&(u, v)| (1..=5).contains(&(u + v)))
        .collect();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut m = DMatrix::zeros(p, atoms);
    for k in 0..atoms {
        let weights: Vec<f64> = if k == 0 {
            Vec::new()
        } else {
            freqs.iter().map(|_| normal.sample(&mut rng)).collect()
        };
        for c in 0..patch_size {
            for r in 0..patch_size {
                m[(c * patch_size + r, k)] = if k == 0 {
                    1.0
                } else {
                    freqs
                        .iter()
                        .zip(&weights)
                        .map(|(&(u, v), w)| w * dct_basis(patch_size, u, v)(r, c))
                        .sum()
                };
            }
        }
    }
    normalize_atoms(m).expect("cosine mixtures are non-zero").0
}

/// Background for one frame.
///
/// Each frame picks `sparsity` planted atoms; every patch combines them with
/// non-negative weights that drift slowly across the patch grid, so
/// neighbouring patches agree and overlap averaging leaves no seams. The
/// result is rescaled to `[0, background_max]`. Pixels right of or below
/// the last patch copy the nearest covered pixel.
pub fn make_background(spec: &SynthSpec, frame_index: usize) -> Result<ImageGray, SynthError> {
    spec.validate()?;
    let grid = make_grid(spec.image_h, spec.image_w, spec.patch_size, spec.overlap)?;
    if spec.sparsity == 0 {
        return Ok(ImageGray::zeros(spec.image_h, spec.image_w));
    }
    let dict = planted_dictionary(spec.patch_size, spec.atoms, spec.seed);
    let mut rng = stream(spec.seed, frame_index, BACKGROUND_STREAM);
    let support = sample(&mut rng, spec.atoms, spec.sparsity).into_vec();
    // Per atom: base weight, and a slow plane wave modulating it.
    let fields: Vec<(f64, f64, f64, f64)> = support
        .iter()
        .map(|_| {
            (
                rng.random_range(0.2..1.0),
                rng.random_range(-1.0..1.0) * PI / grid.rows.max(2) as f64,
                rng.random_range(-1.0..1.0) * PI / grid.cols.max(2) as f64,
                rng.random_range(0.0..2.0 * PI),
            )
        })
        .collect();
    let mut values = DMatrix::zeros(grid.pixels_per_patch(), grid.patch_count());
    for j in 0..grid.cols {
        for i in 0..grid.rows {
            let col = grid.column_index(i, j);
            for (&k, &(base, wi, wj, phase)) in support.iter().zip(&fields) {
                let weight = base * (0.5 + 0.5 * (wi * i as f64 + wj * j as f64 + phase).cos());
                values.column_mut(col).axpy(weight, &dict.atoms().column(k), 1.0);
            }
        }
    }
    let rec = reconstruct_from_patches(&PatchMatrix::new(values, grid)?);
    let (ch, cw) = grid.covered_extent();
    let covered = |r: usize, c: usize| rec.image.get(r.min(ch - 1), c.min(cw - 1));
    let lo = (0..ch)
        .flat_map(|r| (0..cw).map(move |c| (r, c)))
        .map(|(r, c)| rec.image.get(r, c))
        .fold(f64::INFINITY, f64::min);
    let hi = (0..ch)
        .flat_map(|r| (0..cw).map(move |c| (r, c)))
        .map(|(r, c)| rec.image.get(r, c))
        .fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    Ok(ImageGray::from_fn(spec.image_h, spec.image_w, |r, c| {
        if span > 0.0 {
            (covered(r, c) - lo) / span * spec.background_max
        } else {
            0.0
        }
    }))
}

/// Adds `spec.spots` Gaussian bumps at integer centres at least
/// `min_separation` apart, clamping the result to `[0, 1]`.
pub fn implant_spots(
    img: &ImageGray,
    spec: &SynthSpec,
    frame_index: usize,
) -> Result<(ImageGray, AnnotationSet), SynthError> {
    spec.validate()?;
    let frame = frame_name(frame_index);
    let mut out = img.clone();
    if spec.spots == 0 {
        return Ok((out, AnnotationSet { frame, points: Vec::new() }));
    }
    let grid = make_grid(spec.image_h, spec.image_w, spec.patch_size, spec.overlap)?;
    let (ch, cw) = grid.covered_extent();
    let (rows, cols) = (spec.margin..ch - spec.margin, spec.margin..cw - spec.margin);
    let mut rng = stream(spec.seed, frame_index, SPOT_STREAM);
    let attempts = 10 * spec.spots;
    let mut centers: Vec<Point> = Vec::with_capacity(spec.spots);
    for _ in 0..attempts {
        if centers.len() == spec.spots {
            break;
        }
        let cand = Point {
            x: rng.random_range(cols.clone()) as f64,
            y: rng.random_range(rows.clone()) as f64,
        };
        if centers.iter().all(|p| p.distance(&cand) >= spec.min_separation) {
            centers.push(cand);
        }
    }
    if centers.len() < spec.spots {
        return Err(SynthError::SpotPlacement {
            frame: frame_index,
            placed: centers.len(),
            wanted: spec.spots,
            attempts,
        });
    }
    let reach = (4.0 * spec.spot_sigma).ceil() as isize;
    let two_s2 = 2.0 * spec.spot_sigma * spec.spot_sigma;
    for p in &centers {
        let (cr, cc) = (p.y as isize, p.x as isize);
        for r in (cr - reach).max(0)..=(cr + reach).min(spec.image_h as isize - 1) {
            for c in (cc - reach).max(0)..=(cc + reach).min(spec.image_w as isize - 1) {
                let d2 = ((r - cr) * (r - cr) + (c - cc) * (c - cc)) as f64;
                let (r, c) = (r as usize, c as usize);
                out.set(r, c, out.get(r, c) + spec.spot_amplitude * (-d2 / two_s2).exp());
            }
        }
    }
    let out = out.map(|v| v.clamp(0.0, 1.0));
    Ok((out, AnnotationSet { frame, points: centers }))
}

/// Adds i.i.d. zero-mean Gaussian noise and clamps to `[0, 1]`.
pub fn add_noise(img: &ImageGray, noise_sigma: f64, seed: u64) -> ImageGray {
    if noise_sigma == 0.0 {
        return img.clone();
    }
    let normal = Normal::new(0.0, noise_sigma).expect("noise sigma checked by caller");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
    }
    out
}

pub fn frame_name(frame_index: usize) -> String {
    format!("frame_{frame_index:03}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthFrame {
    /// Background plus spots, before noise.
    pub clean: ImageGray,
    pub image: ImageGray,
    pub truth: AnnotationSet,
}

pub fn render_frame(spec: &SynthSpec, frame_index: usize) -> Result<SynthFrame, SynthError> {
    let background = make_background(spec, frame_index)?;
    let (clean, truth) = implant_spots(&background, spec, frame_index)?;
    let noise_seed = stream(spec.seed, frame_index, NOISE_STREAM).next_u64();
    let image = add_noise(&clean, spec.noise_sigma, noise_seed);
    Ok(SynthFrame { clean, image, truth })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub frames: Vec<PathBuf>,
    pub truth: PathBuf,
    pub manifest: PathBuf,
}

/// Writes `frame_NNN.pgm` files, `truth.csv` and `manifest.txt` into
/// `out_dir`, creating it if needed.
pub fn generate_dataset(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<Manifest, SynthError> {
    spec.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|source| SynthError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let results: Vec<Result<(PathBuf, AnnotationSet), SynthError>> = (0..spec.frames)
        .into_par_iter()
        .map(|i| {
            let frame = render_frame(spec, i)?;
            let path = out_dir.join(format!("{}.pgm", frame_name(i)));
            save_image_with_depth(&frame.image, &path, spec.bit_depth)?;
            Ok((path, frame.truth))
        })
        .collect();
    let mut frames = Vec::with_capacity(spec.frames);
    let mut truths = Vec::with_capacity(spec.frames);
    for r in results {
        let (path, truth) = r?;
        frames.push(path);
        truths.push(truth);
    }
    let truth = out_dir.join("truth.csv");
    write_annotations(&truth, &truths)?;
    let manifest = out_dir.join("manifest.txt");
    let text = spec.manifest();
    write_atomic(&manifest, |w| w.write_all(text.as_bytes())).map_err(|source| SynthError::Io {
        path: manifest.clone(),
        source,
    })?;
    Ok(Manifest {
        frames,
        truth,
        manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(spots: usize) -> SynthSpec {
        SynthSpec {
            frames: 2,
            image_h: 96,
            image_w: 120,
            spots,
            seed: 11,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn planted_atoms_are_unit_and_smooth() {
        let d = planted_dictionary(27, 20, 3);
        assert_eq!((d.p(), d.k()), (729, 20));
        for k in 0..20 {
            let a = d.atoms().column(k);
            assert!((a.norm() - 1.0).abs() < 1e-12);
            // Neighbouring pixels differ by a small fraction of the atom scale.
            let step = (0..26).map(|r| (a[r + 1] - a[r]).abs()).fold(0.0, f64::max);
            assert!(step < 0.05, "atom {k} step {step}");
        }
        assert_eq!(planted_dictionary(27, 20, 3), d);
    }

    #[test]
    fn background_is_deterministic_and_bounded() {
        let spec = small(0);
        let a = make_background(&spec, 0).unwrap();
        assert_eq!(a, make_background(&spec, 0).unwrap());
        assert!(a.min_value() >= 0.0 && a.max_value() <= 0.6 + 1e-15);
        assert!((a.max_value() - 0.6).abs() < 1e-12);
        assert_ne!(a, make_background(&spec, 1).unwrap());
    }

    #[test]
    fn zero_sparsity_background_is_black() {
        let spec = SynthSpec {
            sparsity: 0,
            ..small(0)
        };
        assert!(make_background(&spec, 0).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn no_spots_leaves_image_alone() {
        let spec = small(0);
        let bg = make_background(&spec, 0).unwrap();
        let (img, truth) = implant_spots(&bg, &spec, 0).unwrap();
        assert_eq!(img, bg);
        assert!(truth.points.is_empty());
        assert_eq!(truth.frame, "frame_000");
    }

    #[test]
    fn single_spot_on_black_peaks_at_centre() {
        let spec = small(1);
        let (img, truth) = implant_spots(&ImageGray::zeros(96, 120), &spec, 0).unwrap();
        let p = truth.points[0];
        let peak = img.max_value();
        assert_eq!(img.get(p.y as usize, p.x as usize), peak);
        assert_eq!(peak, 0.5);
        assert_eq!(img.data().iter().filter(|&&v| v == peak).count(), 1);
    }

    #[test]
    fn spots_respect_separation() {
        let spec = SynthSpec {
            image_h: 274,
            image_w: 384,
            ..small(10)
        };
        let (_, truth) = implant_spots(&ImageGray::zeros(274, 384), &spec, 4).unwrap();
        assert_eq!(truth.points.len(), 10);
        for (i, a) in truth.points.iter().enumerate() {
            for b in &truth.points[i + 1..] {
                assert!(a.distance(b) >= 25.0);
            }
        }
    }

    #[test]
    fn overcrowded_frame_fails() {
        let spec = small(200);
        assert!(matches!(
            implant_spots(&ImageGray::zeros(96, 120), &spec, 0),
            Err(SynthError::SpotPlacement { wanted: 200, attempts: 2000, .. })
        ));
    }

    #[test]
    fn noise_statistics() {
        let img = ImageGray::filled(400, 400, 0.5);
        assert_eq!(add_noise(&img, 0.0, 5), img);
        let a = add_noise(&img, 0.01, 5);
        assert_eq!(a, add_noise(&img, 0.01, 5));
        let n = a.data().len() as f64;
        let mean = a.data().iter().sum::<f64>() / n;
        let var = a.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        assert!((mean - 0.5).abs() < 1e-3);
        assert!((var.sqrt() - 0.01).abs() < 1e-3);
    }

    #[test]
    fn annotations_sit_on_local_maxima() {
        let spec = SynthSpec {
            image_h: 274,
            image_w: 384,
            ..small(12)
        };
        for f in 0..3 {
            let frame = render_frame(&spec, f).unwrap();
            for p in &frame.truth.points {
                let (r0, c0) = (p.y as usize, p.x as usize);
                // The brightest pixel within 3 px lies within 1 px of the centre.
                let mut best = (0.0, r0, c0);
                for r in r0 - 3..=r0 + 3 {
                    for c in c0 - 3..=c0 + 3 {
                        if frame.clean.get(r, c) > best.0 {
                            best = (frame.clean.get(r, c), r, c);
                        }
                    }
                }
                assert!(best.1.abs_diff(r0) <= 1 && best.2.abs_diff(c0) <= 1);
            }
        }
    }

    #[test]
    fn invalid_specs() {
        for spec in [
            SynthSpec { spot_sigma: 0.0, ..small(1) },
            SynthSpec { spot_amplitude: -1.0, ..small(1) },
            SynthSpec { noise_sigma: -0.1, ..small(1) },
            SynthSpec { sparsity: 30, ..small(1) },
            SynthSpec { image_h: 20, ..small(1) },
        ] {
            assert!(matches!(spec.validate(), Err(SynthError::InvalidSpec(_))), "{spec:?}");
        }
    }

    #[test]
    fn dataset_layout_and_reproducibility() {
        let spec = SynthSpec { frames: 3, ..small(2) };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let ma = generate_dataset(&spec, a.path()).unwrap();
        generate_dataset(&spec, b.path()).unwrap();
        assert_eq!(ma.frames.len(), 3);
        let names = ["frame_000.pgm", "frame_001.pgm", "frame_002.pgm", "truth.csv", "manifest.txt"];
        for name in names {
            let x = std::fs::read(a.path().join(name)).unwrap();
            assert_eq!(x, std::fs::read(b.path().join(name)).unwrap(), "{name}");
        }
        let truth = std::fs::read_to_string(&ma.truth).unwrap();
        assert!(truth.starts_with("frame,x,y\n"));
        assert_eq!(truth.lines().count(), 1 + 3 * 2);
        let manifest = std::fs::read_to_string(&ma.manifest).unwrap();
        assert!(manifest.contains("seed=11\n") && manifest.contains("spots=2\n"));
    }
}
