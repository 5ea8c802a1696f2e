use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use spotlier::baselines::{
    gsoth_response_with, BaselineError, BaselineMethod, GsothOptions, StructuringElement, TopHatBase,
};
use spotlier::detection::{detect_frame, threshold_and_group, DetectError, DetectParams};
use spotlier::dictionary::{read_dictionary, train_mod, write_dictionary, DictionaryError, TrainOptions};
use spotlier::evaluation::{
    pearson, pr_curve, pr_curve_from_detections, uniform_thresholds, write_counts_csv, write_pr,
    EvalError, FrameCount, MatchMode, PrCurve,
};
use spotlier::imaging::{load_image, save_image, training_patches, BitDepth, ImageGray, ImagingError};
use spotlier::points::{read_annotations, read_detections, write_detections, AnnotationSet, DetectionSet};
use spotlier::robust_coding::AdmmOptions;
use spotlier::synth::{generate_dataset, SynthError, SynthSpec};

#[derive(Debug, Parser)]
#[command(name = "spotlier", version, about = "Sparse-outlier spot detection")]
pub struct Cli {
    /// Worker threads (SPOTLIER_JOBS overrides); 0 uses every core.
    #[arg(long, global = true, default_value_t = 0)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a seeded synthetic dataset.
    Synth(SynthArgs),
    /// Learn a background dictionary from frames.
    TrainDict(TrainArgs),
    /// Detect spots with robust sparse coding.
    Detect(DetectArgs),
    /// Detect spots with a classical filter.
    Baseline(BaselineArgs),
    /// Score detections against annotations.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    frames: usize,
    #[arg(long, default_value_t = 274)]
    height: usize,
    #[arg(long, default_value_t = 384)]
    width: usize,
    #[arg(long, default_value_t = 10)]
    spots: usize,
    #[arg(long, default_value_t = 0.5)]
    amplitude: f64,
    #[arg(long, default_value_t = 1.5)]
    spot_sigma: f64,
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    /// Atoms in the planted background dictionary.
    #[arg(long, default_value_t = 20)]
    atoms: usize,
    /// Planted atoms mixed into each background patch.
    #[arg(long, default_value_t = 3)]
    sparsity: usize,
    #[arg(long, default_value_t = 27)]
    patch_size: usize,
    #[arg(long, default_value_t = 0.5)]
    overlap: f64,
    #[arg(long, default_value_t = 25.0)]
    min_separation: f64,
    #[arg(long, default_value_t = 14)]
    margin: usize,
    /// Sample width of the written frames: 8 or 16.
    #[arg(long, default_value = "8")]
    bit_depth: BitDepth,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Directory of PGM frames.
    #[arg(long)]
    frames: PathBuf,
    /// Annotations whose patches are left out of training.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Per-iteration representation error; defaults to `<out>.errors.csv`.
    #[arg(long)]
    error_log: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    atoms: usize,
    #[arg(long, default_value_t = 5)]
    sparsity: usize,
    #[arg(long, default_value_t = 50)]
    iters: usize,
    #[arg(long, default_value_t = 27)]
    patch_size: usize,
    #[arg(long, default_value_t = 0.5)]
    overlap: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct DetectArgs {
    #[arg(long)]
    frames: PathBuf,
    #[arg(long)]
    dict: PathBuf,
    /// Outlier sparsity weight; no default on purpose.
    #[arg(long)]
    beta: f64,
    #[arg(long, default_value_t = 1e-5)]
    alpha: f64,
    #[arg(long, default_value_t = 0.07)]
    level: f64,
    #[arg(long, default_value_t = 27)]
    patch_size: usize,
    #[arg(long, default_value_t = 0.5)]
    overlap: f64,
    #[arg(long, default_value_t = 500)]
    max_iters: usize,
    #[arg(long, default_value_t = 1.0)]
    mu0: f64,
    #[arg(long)]
    out: PathBuf,
    /// Write each normalized outlier image here as `<frame>.pgm`.
    #[arg(long)]
    outlier_dir: Option<PathBuf>,
    /// Per-frame solver diagnostics CSV.
    #[arg(long)]
    diagnostics: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Element {
    Square,
    Cross,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TophatBase {
    Smoothed,
    Original,
}

#[derive(Debug, Args)]
struct BaselineArgs {
    #[arg(long)]
    frames: PathBuf,
    /// log, dog or gsoth.
    #[arg(long)]
    method: BaselineMethod,
    #[arg(long, default_value_t = 0.07)]
    level: f64,
    /// Structuring element for gsoth.
    #[arg(long, value_enum, default_value_t = Element::Square)]
    element: Element,
    /// Image the gsoth opening is subtracted from.
    #[arg(long, value_enum, default_value_t = TophatBase::Smoothed)]
    tophat_base: TophatBase,
    #[arg(long)]
    out: PathBuf,
    /// Write each normalized response here as `<frame>.pgm`.
    #[arg(long)]
    response_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    truth: PathBuf,
    /// Directory of normalized response images, swept over thresholds.
    #[arg(long, conflicts_with = "detections", required_unless_present = "detections")]
    outliers: Option<PathBuf>,
    /// Scored detections CSV; thresholds filter on score.
    #[arg(long)]
    detections: Option<PathBuf>,
    /// Directory whose PGM files name every frame, including frames
    /// without annotations or detections.
    #[arg(long)]
    frames: Option<PathBuf>,
    #[arg(long, default_value_t = 10.0)]
    radius: f64,
    #[arg(long, default_value = "any-within")]
    mode: MatchMode,
    #[arg(long, default_value_t = 101)]
    thresholds: usize,
    /// Per-frame counts and their correlation instead of a PR curve.
    #[arg(long)]
    counts: bool,
    /// Threshold applied to response images in counts mode.
    #[arg(long, default_value_t = 0.07)]
    level: f64,
    /// `frame,group` CSV; also report one AUC per group.
    #[arg(long)]
    groups: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Failure split by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad input or flags (exit 2).
    Usage(String),
    /// Anything else (exit 1).
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => m,
        }
    }
}

fn usage(msg: impl ToString) -> CliError {
    CliError::Usage(msg.to_string())
}

fn runtime(msg: impl ToString) -> CliError {
    CliError::Runtime(msg.to_string())
}

impl From<ImagingError> for CliError {
    fn from(e: ImagingError) -> Self {
        match e {
            ImagingError::PatchTooLarge { .. }
            | ImagingError::InvalidGeometry(..)
            | ImagingError::AnnotationOutOfBounds { .. } => usage(e),
            _ => runtime(e),
        }
    }
}

impl From<DictionaryError> for CliError {
    fn from(e: DictionaryError) -> Self {
        match e {
            DictionaryError::TooFewPatches { .. }
            | DictionaryError::NotEnoughDistinct { .. }
            | DictionaryError::InvalidParameter(_) => usage(e),
            _ => runtime(e),
        }
    }
}

impl From<DetectError> for CliError {
    fn from(e: DetectError) -> Self {
        match e {
            DetectError::DictionaryMismatch { .. } | DetectError::InvalidParams(_) => usage(e),
            DetectError::Imaging(inner) => inner.into(),
            DetectError::Coding(ref inner) => match inner {
                spotlier::robust_coding::CodingError::InvalidProblem(_)
                | spotlier::robust_coding::CodingError::InvalidOptions(_) => usage(e),
                _ => runtime(e),
            },
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::InvalidSpec(_) | SynthError::SpotPlacement { .. } => usage(e),
            SynthError::Imaging(inner) => inner.into(),
            _ => runtime(e),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Io { .. } => runtime(e),
            _ => usage(e),
        }
    }
}

impl From<BaselineError> for CliError {
    fn from(e: BaselineError) -> Self {
        usage(e)
    }
}

impl From<spotlier::points::PointsError> for CliError {
    fn from(e: spotlier::points::PointsError) -> Self {
        match e {
            spotlier::points::PointsError::Write { .. } => runtime(e),
            _ => usage(e),
        }
    }
}

fn jobs(flag: usize) -> Result<usize, CliError> {
    match std::env::var("SPOTLIER_JOBS") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| usage(format!("SPOTLIER_JOBS must be a non-negative integer, got {v:?}"))),
        Err(_) => Ok(flag),
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs(cli.jobs)?)
        .build()
        .map_err(runtime)?;
    pool.install(|| match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::TrainDict(a) => cmd_train(a),
        Command::Detect(a) => cmd_detect(a),
        Command::Baseline(a) => cmd_baseline(a),
        Command::Eval(a) => cmd_eval(a),
    })
}

/// `(frame id, path)` for every `.pgm` in `dir`, sorted by file name.
fn list_frames(dir: &Path) -> Result<Vec<(String, PathBuf)>, CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| usage(format!("cannot list {}: {e}", dir.display())))?;
    let mut frames = Vec::new();
    for entry in entries {
        let path = entry.map_err(runtime)?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("pgm") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                frames.push((stem.to_string(), path));
            }
        }
    }
    frames.sort();
    if frames.is_empty() {
        return Err(usage(format!("no .pgm frames in {}", dir.display())));
    }
    Ok(frames)
}

fn load_frames(dir: &Path) -> Result<Vec<(String, ImageGray)>, CliError> {
    list_frames(dir)?
        .into_par_iter()
        .map(|(id, path)| Ok((id, load_image(&path)?)))
        .collect()
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))
}

fn cmd_synth(a: SynthArgs) -> Result<(), CliError> {
    let spec = SynthSpec {
        frames: a.frames,
        image_h: a.height,
        image_w: a.width,
        patch_size: a.patch_size,
        overlap: a.overlap,
        atoms: a.atoms,
        sparsity: a.sparsity,
        spots: a.spots,
        spot_amplitude: a.amplitude,
        spot_sigma: a.spot_sigma,
        noise_sigma: a.noise,
        min_separation: a.min_separation,
        margin: a.margin,
        bit_depth: a.bit_depth,
        seed: a.seed,
        ..SynthSpec::default()
    };
    spec.validate()?;
    let manifest = generate_dataset(&spec, &a.out)?;
    log::info!("wrote {} frames to {}", manifest.frames.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let frames = load_frames(&a.frames)?;
    let truth: BTreeMap<String, AnnotationSet> = match &a.truth {
        Some(p) => read_annotations(p)?.into_iter().map(|s| (s.frame.clone(), s)).collect(),
        None => BTreeMap::new(),
    };
    let known: BTreeSet<&str> = frames.iter().map(|(id, _)| id.as_str()).collect();
    if let Some(stray) = truth.keys().find(|k| !known.contains(k.as_str())) {
        return Err(usage(format!("annotations name frame {stray:?}, which is not in {}", a.frames.display())));
    }
    let y = training_patches(
        frames.iter().map(|(id, img)| (img, truth.get(id))),
        a.patch_size,
        a.overlap,
    )?;
    log::info!("training on {} patches", y.ncols());
    let trained = train_mod(
        &y,
        &TrainOptions {
            atoms: a.atoms,
            sparsity: a.sparsity,
            iters: a.iters,
            seed: a.seed,
            ..TrainOptions::default()
        },
    )?;
    let log_path = a.error_log.unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".errors.csv");
        PathBuf::from(s)
    });
    write_dictionary(&a.out, &trained.dictionary)?;
    write_text(&log_path, |w| {
        writeln!(w, "iter,error")?;
        for (t, e) in trained.errors.iter().enumerate() {
            writeln!(w, "{t},{e:e}")?;
        }
        Ok(())
    })
}

fn write_text(
    path: &Path,
    fill: impl FnOnce(&mut Vec<u8>) -> std::io::Result<()>,
) -> Result<(), CliError> {
    let mut buf = Vec::new();
    fill(&mut buf).map_err(runtime)?;
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))?;
    tmp.write_all(&buf).map_err(runtime)?;
    tmp.persist(path)
        .map_err(|e| runtime(format!("cannot write {}: {}", path.display(), e.error)))?;
    Ok(())
}

fn cmd_detect(a: DetectArgs) -> Result<(), CliError> {
    let dict = read_dictionary(&a.dict)?;
    let params = DetectParams {
        alpha: a.alpha,
        level: a.level,
        patch_size: a.patch_size,
        overlap: a.overlap,
        admm: AdmmOptions {
            mu0: a.mu0,
            max_iters: a.max_iters,
            ..AdmmOptions::default()
        },
        ..DetectParams::with_beta(a.beta)
    };
    params.validate(&dict)?;
    if !(a.beta >= 0.0 && a.beta.is_finite()) {
        return Err(usage(format!("beta must be finite and non-negative, got {}", a.beta)));
    }
    let frames = load_frames(&a.frames)?;
    let results = frames
        .par_iter()
        .map(|(id, img)| detect_frame(img, &dict, &params, id))
        .collect::<Result<Vec<_>, _>>()?;

    if let Some(dir) = &a.outlier_dir {
        create_dir(dir)?;
        for ((id, _), r) in frames.iter().zip(&results) {
            save_image(&r.outlier.image, dir.join(format!("{id}.pgm")))?;
        }
    }
    if let Some(path) = &a.diagnostics {
        write_text(path, |w| {
            writeln!(w, "frame,iterations,converged,primal,dual,epsilon,objective,mu_min,mu_max")?;
            for ((id, _), r) in frames.iter().zip(&results) {
                let c = &r.coding;
                writeln!(
                    w,
                    "{id},{},{},{:e},{:e},{:e},{:e},{:e},{:e}",
                    c.iterations, c.converged, c.primal_residual, c.dual_residual, c.epsilon, c.objective,
                    c.mu_range.0, c.mu_range.1
                )?;
            }
            Ok(())
        })?;
    }
    let sets: Vec<DetectionSet> = results.into_iter().map(|r| r.detections).collect();
    write_detections(&a.out, &sets)?;
    Ok(())
}

fn cmd_baseline(a: BaselineArgs) -> Result<(), CliError> {
    if !(0.0..=1.0).contains(&a.level) {
        return Err(usage(format!("level {} outside [0, 1]", a.level)));
    }
    let frames = load_frames(&a.frames)?;
    let element = match a.element {
        Element::Square => StructuringElement::Square3,
        Element::Cross => StructuringElement::Cross3,
    };
    let base = match a.tophat_base {
        TophatBase::Smoothed => TopHatBase::Smoothed,
        TophatBase::Original => TopHatBase::Original,
    };
    let responses = frames
        .par_iter()
        .map(|(_, img)| match a.method {
            BaselineMethod::Gsoth => gsoth_response_with(
                img,
                &GsothOptions {
                    element,
                    base,
                    ..GsothOptions::default()
                },
            ),
            m => m.response(img),
        })
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(dir) = &a.response_dir {
        create_dir(dir)?;
        for ((id, _), r) in frames.iter().zip(&responses) {
            save_image(r, dir.join(format!("{id}.pgm")))?;
        }
    }
    let sets: Vec<DetectionSet> = frames
        .iter()
        .zip(&responses)
        .map(|((id, _), r)| threshold_and_group(r, a.level, id))
        .collect();
    write_detections(&a.out, &sets)?;
    Ok(())
}

/// Aligns truth with the evaluated frames. Every frame named by the truth
/// or the detector output must belong to the frame universe.
fn align_truth(
    universe: &[String],
    truth: Vec<AnnotationSet>,
    extra: &BTreeSet<String>,
) -> Result<Vec<AnnotationSet>, CliError> {
    let known: BTreeSet<&str> = universe.iter().map(String::as_str).collect();
    let mut by_frame: BTreeMap<String, AnnotationSet> = BTreeMap::new();
    for set in truth {
        if !known.contains(set.frame.as_str()) {
            return Err(usage(format!("annotated frame {:?} has no matching frame", set.frame)));
        }
        by_frame.insert(set.frame.clone(), set);
    }
    if let Some(stray) = extra.iter().find(|f| !known.contains(f.as_str())) {
        return Err(usage(format!("frame {stray:?} is not among the annotated frames")));
    }
    Ok(universe
        .iter()
        .map(|id| {
            by_frame.remove(id).unwrap_or_else(|| AnnotationSet {
                frame: id.clone(),
                points: Vec::new(),
            })
        })
        .collect())
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let truth_sets = read_annotations(&a.truth)?;
    let thresholds = uniform_thresholds(a.thresholds);
    let groups: Option<BTreeMap<String, String>> = a.groups.as_deref().map(read_groups).transpose()?;

    enum Source {
        Fields(Vec<ImageGray>),
        Detections(Vec<DetectionSet>),
    }

    let (truths, source) = if let Some(dir) = &a.outliers {
        let frames = load_frames(dir)?;
        let universe: Vec<String> = frames.iter().map(|(id, _)| id.clone()).collect();
        let truths = align_truth(&universe, truth_sets, &BTreeSet::new())?;
        (truths, Source::Fields(frames.into_iter().map(|(_, img)| img).collect()))
    } else {
        let path = a.detections.as_ref().expect("clap requires one source");
        let dets = read_detections(path)?;
        let det_frames: BTreeSet<String> = dets.iter().map(|d| d.frame.clone()).collect();
        let universe: Vec<String> = match &a.frames {
            Some(dir) => list_frames(dir)?.into_iter().map(|(id, _)| id).collect(),
            None => truth_sets.iter().map(|s| s.frame.clone()).collect(),
        };
        let truths = align_truth(&universe, truth_sets, &det_frames)?;
        let mut by_frame: BTreeMap<String, DetectionSet> =
            dets.into_iter().map(|d| (d.frame.clone(), d)).collect();
        let aligned = universe
            .iter()
            .map(|id| {
                by_frame.remove(id).unwrap_or_else(|| DetectionSet {
                    frame: id.clone(),
                    points: Vec::new(),
                })
            })
            .collect();
        (truths, Source::Detections(aligned))
    };

    if a.counts {
        let algo: Vec<usize> = match &source {
            Source::Fields(fields) => fields
                .iter()
                .zip(&truths)
                .map(|(f, t)| threshold_and_group(f, a.level, &t.frame).len())
                .collect(),
            Source::Detections(d) => d.iter().map(DetectionSet::len).collect(),
        };
        let counts: Vec<FrameCount> = truths
            .iter()
            .zip(&algo)
            .map(|(t, &n)| FrameCount {
                frame: t.frame.clone(),
                truth: t.points.len(),
                algo: n,
            })
            .collect();
        let xs: Vec<f64> = counts.iter().map(|c| c.truth as f64).collect();
        let ys: Vec<f64> = counts.iter().map(|c| c.algo as f64).collect();
        let r = match pearson(&xs, &ys) {
            Ok(r) => Some(r),
            Err(e) => {
                log::warn!("{e}");
                None
            }
        };
        write_counts_csv(&a.out, &counts, r)?;
        match r {
            Some(r) => println!("pearson {r}"),
            None => println!("pearson undefined"),
        }
        return Ok(());
    }

    let curve_for = |idx: &[usize]| -> Result<PrCurve, EvalError> {
        let t: Vec<AnnotationSet> = idx.iter().map(|&i| truths[i].clone()).collect();
        match &source {
            Source::Fields(f) => {
                let f: Vec<ImageGray> = idx.iter().map(|&i| f[i].clone()).collect();
                pr_curve(&f, &t, a.radius, &thresholds, a.mode)
            }
            Source::Detections(d) => {
                let d: Vec<DetectionSet> = idx.iter().map(|&i| d[i].clone()).collect();
                pr_curve_from_detections(&d, &t, a.radius, &thresholds, a.mode)
            }
        }
    };
    let all: Vec<usize> = (0..truths.len()).collect();
    let curve = curve_for(&all)?;
    write_text(&a.out, |w| write_pr(w, &curve))?;
    println!("auc {}", curve.auc);
    if let Some(groups) = groups {
        let mut members: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, t) in truths.iter().enumerate() {
            let g = groups
                .get(&t.frame)
                .ok_or_else(|| usage(format!("frame {:?} has no group", t.frame)))?;
            members.entry(g).or_default().push(i);
        }
        for (g, idx) in members {
            println!("group {g} auc {}", curve_for(&idx)?.auc);
        }
    }
    Ok(())
}

fn read_groups(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    let mut map = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| usage(format!("{}: {e}", path.display())))?;
        match (rec.get(0), rec.get(1)) {
            (Some(f), Some(g)) => {
                map.insert(f.to_string(), g.to_string());
            }
            _ => return Err(usage(format!("{}: expected frame,group rows", path.display()))),
        }
    }
    Ok(map)
}
