//! Background dictionaries: orthogonal matching pursuit for sparse codes and
//! the method of optimal directions (MOD) for learning atoms from
//! anomaly-free patches.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, DVectorView};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::fsutil::write_atomic;

const UNIT_NORM_TOL: f64 = 1e-9;
const MOD_RIDGE: f64 = 1e-10;
const DUPLICATE_COHERENCE: f64 = 0.99;

#[derive(Debug, Error)]
pub enum DictionaryError {
    #[error("atom {index} is all zeros")]
    ZeroAtom { index: usize },
    #[error("atom {index} has norm {norm}, expected 1")]
    NotUnitNorm { index: usize, norm: f64 },
    #[error("dictionary contains a non-finite entry")]
    NonFinite,
    #[error("code Gram matrix is singular even after regularization")]
    Singular,
    #[error("{patches} training patches cannot seed {atoms} atoms")]
    TooFewPatches { patches: usize, atoms: usize },
    #[error("only {found} distinct non-zero training columns for {atoms} atoms")]
    NotEnoughDistinct { found: usize, atoms: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("dictionary file line {line}: {message}")]
    Format { line: usize, message: String },
}

/// `P × K` matrix of unit-norm atoms (one atom per column).
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    atoms: DMatrix<f64>,
}

impl Dictionary {
    pub fn new(atoms: DMatrix<f64>) -> Result<Self, DictionaryError> {
        if atoms.nrows() == 0 || atoms.ncols() == 0 {
            return Err(DictionaryError::DimensionMismatch(
                "dictionary must have at least one row and one atom".into(),
            ));
        }
        if atoms.iter().any(|v| !v.is_finite()) {
            return Err(DictionaryError::NonFinite);
        }
        for (index, col) in atoms.column_iter().enumerate() {
            let norm = col.norm();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(DictionaryError::NotUnitNorm { index, norm });
            }
        }
        Ok(Self { atoms })
    }

    /// Patch dimension `P`.
    pub fn p(&self) -> usize {
        self.atoms.nrows()
    }

    /// Atom count `K`.
    pub fn k(&self) -> usize {
        self.atoms.ncols()
    }

    pub fn atoms(&self) -> &DMatrix<f64> {
        &self.atoms
    }

    pub fn into_atoms(self) -> DMatrix<f64> {
        self.atoms
    }

    pub fn gram(&self) -> DMatrix<f64> {
        self.atoms.tr_mul(&self.atoms)
    }
}

/// Scales every column to unit norm. Returns the dictionary together with
/// the original column norms, so codes paired with the input can be
/// rescaled (`psi_row *= norm`) without changing `D * psi`.
pub fn normalize_atoms(
    mut atoms: DMatrix<f64>,
) -> Result<(Dictionary, Vec<f64>), DictionaryError> {
    let mut scales = Vec::with_capacity(atoms.ncols());
    for (index, mut col) in atoms.column_iter_mut().enumerate() {
        let norm = col.norm();
        if !norm.is_finite() {
            return Err(DictionaryError::NonFinite);
        }
        if norm == 0.0 {
            return Err(DictionaryError::ZeroAtom { index });
        }
        col /= norm;
        scales.push(norm);
    }
    Ok((Dictionary::new(atoms)?, scales))
}

/// Sparse approximation of one signal.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCode {
    pub support: Vec<usize>,
    pub coeffs: Vec<f64>,
    pub residual_norm: f64,
}

impl SparseCode {
    pub fn to_dense(&self, k: usize) -> DVector<f64> {
        let mut v = DVector::zeros(k);
        for (&i, &c) in self.support.iter().zip(&self.coeffs) {
            v[i] = c;
        }
        v
    }
}

/// Orthogonal matching pursuit against a fixed dictionary, with the Gram
/// matrix cached so many signals can be coded cheaply.
pub struct Omp<'a> {
    dict: &'a Dictionary,
    gram: DMatrix<f64>,
}

impl<'a> Omp<'a> {
    pub fn new(dict: &'a Dictionary) -> Self {
        Self {
            gram: dict.gram(),
            dict,
        }
    }

    pub fn code(&self, y: DVectorView<'_, f64>, max_atoms: usize, residual_tol: f64) -> SparseCode {
        let dty = self.dict.atoms.tr_mul(&y);
        self.code_with_correlation(y, dty.as_view(), max_atoms, residual_tol)
    }

    /// Same as [`Omp::code`] with `Dᵀy` supplied by the caller.
    pub fn code_with_correlation(
        &self,
        y: DVectorView<'_, f64>,
        dty: DVectorView<'_, f64>,
        max_atoms: usize,
        residual_tol: f64,
    ) -> SparseCode {
        let d = &self.dict.atoms;
        let k = d.ncols();
        let max_atoms = max_atoms.min(k);
        let y_norm = y.norm();
        let mut support: Vec<usize> = Vec::with_capacity(max_atoms);
        let mut coeffs: Vec<f64> = Vec::new();
        let mut residual_norm = y_norm;
        let mut in_support = vec![false; k];

        while support.len() < max_atoms && residual_norm > residual_tol {
            // Correlation of every atom with the current residual, Dᵀ(y − D_S x).
            let mut best = None;
            let mut best_abs = 0.0;
            for atom in 0..k {
                if in_support[atom] {
                    continue;
                }
                let mut c = dty[atom];
                for (&s, &x) in support.iter().zip(&coeffs) {
                    c -= self.gram[(atom, s)] * x;
                }
                if c.abs() > best_abs {
                    best_abs = c.abs();
                    best = Some(atom);
                }
            }
            let Some(atom) = best else { break };
            if best_abs <= 1e-14 * y_norm.max(f64::MIN_POSITIVE) {
                break;
            }
            support.push(atom);
            let n = support.len();
            let sub_gram = DMatrix::from_fn(n, n, |i, j| self.gram[(support[i], support[j])]);
            let rhs = DVector::from_fn(n, |i, _| dty[support[i]]);
            let Some(chol) = sub_gram.cholesky() else {
                // Selected atom is linearly dependent on the support.
                support.pop();
                break;
            };
            let x = chol.solve(&rhs);
            in_support[atom] = true;
            coeffs = x.iter().copied().collect();
            residual_norm = residual_of(d, y, &support, &coeffs).norm();
        }
        SparseCode {
            support,
            coeffs,
            residual_norm,
        }
    }
}

fn residual_of(
    d: &DMatrix<f64>,
    y: DVectorView<'_, f64>,
    support: &[usize],
    coeffs: &[f64],
) -> DVector<f64> {
    let mut r = y.into_owned();
    for (&s, &x) in support.iter().zip(coeffs) {
        r.axpy(-x, &d.column(s), 1.0);
    }
    r
}

/// Greedy sparse coding of `y`: repeatedly picks the atom most correlated
/// with the residual (ties go to the lowest index) and refits all selected
/// coefficients by least squares. Stops at `max_atoms` atoms or once the
/// residual norm is at most `residual_tol`.
pub fn omp(d: &Dictionary, y: &[f64], max_atoms: usize, residual_tol: f64) -> SparseCode {
    assert_eq!(y.len(), d.p(), "signal length must equal the atom dimension");
    Omp::new(d).code(DVectorView::from_slice(y, y.len()), max_atoms, residual_tol)
}

/// Least-squares dictionary for fixed codes, `Y Ψᵀ (Ψ Ψᵀ + 1e-10 I)⁻¹`,
/// before normalization.
fn mod_solve(y: &DMatrix<f64>, psi: &DMatrix<f64>) -> Result<DMatrix<f64>, DictionaryError> {
    if psi.ncols() != y.ncols() {
        return Err(DictionaryError::DimensionMismatch(format!(
            "data has {} columns but codes have {}",
            y.ncols(),
            psi.ncols()
        )));
    }
    let k = psi.nrows();
    let mut gram = psi * psi.transpose();
    for i in 0..k {
        gram[(i, i)] += MOD_RIDGE;
    }
    let chol = gram.cholesky().ok_or(DictionaryError::Singular)?;
    // Solve (ΨΨᵀ + εI) Dᵀ = Ψ Yᵀ.
    let rhs = psi * y.transpose();
    let dt = chol.solve(&rhs);
    if dt.iter().any(|v| !v.is_finite()) {
        return Err(DictionaryError::Singular);
    }
    Ok(dt.transpose())
}

/// MOD dictionary update followed by atom normalization. The returned
/// scales rescale the rows of `psi` so that `D * psi` is unchanged.
pub fn mod_update(
    y_train: &DMatrix<f64>,
    psi: &DMatrix<f64>,
) -> Result<(Dictionary, Vec<f64>), DictionaryError> {
    normalize_atoms(mod_solve(y_train, psi)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    /// Atom count `K`.
    pub atoms: usize,
    /// OMP budget per training patch.
    pub sparsity: usize,
    pub iters: usize,
    pub residual_tol: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            atoms: 100,
            sparsity: 5,
            iters: 50,
            residual_tol: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedDictionary {
    pub dictionary: Dictionary,
    /// `‖Y − DΨ‖_F`; entry 0 is for the initial dictionary, entry `t` is
    /// after MOD iteration `t`.
    pub errors: Vec<f64>,
    /// Number of unused, duplicate or rarely used atoms re-seeded from badly
    /// represented patches.
    pub replaced_atoms: usize,
}

/// Learns a `K`-atom dictionary by alternating OMP coding and MOD updates.
///
/// The dictionary starts from `K` distinct (non-parallel) training columns
/// chosen by a seeded shuffle. A column keeps its previous code when the
/// new OMP code represents it worse, which makes the representation error
/// non-increasing across iterations.
pub fn train_mod(
    y_train: &DMatrix<f64>,
    opts: &TrainOptions,
) -> Result<TrainedDictionary, DictionaryError> {
    let k = opts.atoms;
    let l = y_train.ncols();
    if k == 0 || opts.sparsity == 0 || opts.iters == 0 {
        return Err(DictionaryError::InvalidParameter(
            "atoms, sparsity and iters must all be at least 1".into(),
        ));
    }
    if l < k {
        return Err(DictionaryError::TooFewPatches {
            patches: l,
            atoms: k,
        });
    }
    if y_train.iter().any(|v| !v.is_finite()) {
        return Err(DictionaryError::NonFinite);
    }

    let mut dict = initial_dictionary(y_train, k, opts.seed)?;
    let mut psi = code_all(&dict, y_train, opts, None);
    let mut errors = vec![representation_error(y_train, &dict, &psi)];
    let mut replaced_atoms = 0;

    for iter in 1..=opts.iters {
        if iter > 1 {
            psi = code_all(&dict, y_train, opts, Some(&psi));
        }
        let mut raw = mod_solve(y_train, &psi)?;
        replaced_atoms += reseed_unused_atoms(y_train, &mut raw, &psi, iter);
        let (next, scales) = normalize_atoms(raw)?;
        for (mut row, s) in psi.row_iter_mut().zip(scales) {
            row *= s;
        }
        dict = next;
        let mut err = representation_error(y_train, &dict, &psi);
        if let Some((cand, cand_psi, n)) = replace_weak_atoms(y_train, &dict, &psi, opts) {
            let cand_err = representation_error(y_train, &cand, &cand_psi);
            if cand_err < err {
                log::info!("MOD iteration {iter}: replaced {n} weak atom(s)");
                dict = cand;
                psi = cand_psi;
                err = cand_err;
                replaced_atoms += n;
            }
        }
        errors.push(err);
    }
    Ok(TrainedDictionary {
        dictionary: dict,
        errors,
        replaced_atoms,
    })
}

fn initial_dictionary(
    y: &DMatrix<f64>,
    k: usize,
    seed: u64,
) -> Result<Dictionary, DictionaryError> {
    let mut order: Vec<usize> = (0..y.ncols()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen: Vec<DVector<f64>> = Vec::with_capacity(k);
    for idx in order {
        let col = y.column(idx);
        let norm = col.norm();
        if norm <= 1e-12 {
            continue;
        }
        let unit = col / norm;
        if chosen.iter().any(|c| c.dot(&unit).abs() > 1.0 - 1e-9) {
            continue;
        }
        chosen.push(unit);
        if chosen.len() == k {
            break;
        }
    }
    if chosen.len() < k {
        return Err(DictionaryError::NotEnoughDistinct {
            found: chosen.len(),
            atoms: k,
        });
    }
    Dictionary::new(DMatrix::from_columns(&chosen))
}

fn code_all(
    dict: &Dictionary,
    y: &DMatrix<f64>,
    opts: &TrainOptions,
    previous: Option<&DMatrix<f64>>,
) -> DMatrix<f64> {
    let omp = Omp::new(dict);
    let dty = dict.atoms().tr_mul(y);
    let k = dict.k();
    let columns: Vec<DVector<f64>> = (0..y.ncols())
        .into_par_iter()
        .map(|j| {
            let code = omp.code_with_correlation(
                y.column(j),
                dty.column(j),
                opts.sparsity,
                opts.residual_tol,
            );
            let fresh = code.to_dense(k);
            match previous {
                Some(prev) => {
                    let old = prev.column(j);
                    let old_err = (y.column(j) - dict.atoms() * old).norm();
                    if code.residual_norm <= old_err {
                        fresh
                    } else {
                        old.into_owned()
                    }
                }
                None => fresh,
            }
        })
        .collect();
    DMatrix::from_columns(&columns)
}

/// Replaces atoms whose code row is entirely zero with the worst-represented
/// training columns. Such atoms do not contribute to `D * psi`, so the
/// replacement leaves the representation error unchanged.
/// Proposes a dictionary in which near-duplicate or rarely used atoms (or,
/// failing those, the weakest atom) are swapped for the worst-represented
/// patches, recoded and refitted once. The caller keeps it only when it
/// lowers the error.
fn replace_weak_atoms(
    y: &DMatrix<f64>,
    dict: &Dictionary,
    psi: &DMatrix<f64>,
    opts: &TrainOptions,
) -> Option<(Dictionary, DMatrix<f64>, usize)> {
    let atoms = dict.atoms();
    let k = dict.k();
    let gram = atoms.tr_mul(atoms);
    let min_use = (y.ncols() / (50 * k)).max(1);
    let mut weak: Vec<usize> = (0..k)
        .filter(|&i| {
            let used = psi.row(i).iter().filter(|v| **v != 0.0).count();
            used < min_use || (0..i).any(|j| gram[(i, j)].abs() > DUPLICATE_COHERENCE)
        })
        .collect();
    if weak.is_empty() {
        // Otherwise try the atom carrying the least coefficient energy.
        let energy = |i: usize| psi.row(i).norm_squared();
        weak.extend((0..k).min_by(|&a, &b| energy(a).total_cmp(&energy(b)).then(a.cmp(&b))));
    }
    if weak.is_empty() {
        return None;
    }
    let residual = y - atoms * psi;
    let mut by_error: Vec<(usize, f64)> = residual
        .column_iter()
        .enumerate()
        .map(|(j, c)| (j, c.norm()))
        .filter(|&(j, e)| e > 1e-12 && y.column(j).norm() > 1e-12)
        .collect();
    by_error.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut cand = atoms.clone();
    let mut n = 0;
    for (&atom, &(col, _)) in weak.iter().zip(&by_error) {
        let c = residual.column(col);
        cand.set_column(atom, &(c / c.norm()));
        n += 1;
    }
    if n == 0 {
        return None;
    }
    let cand = Dictionary::new(cand).ok()?;
    // Codes that dropped the replaced atoms compete with fresh OMP codes, and
    // the candidate gets one MOD refit before it is judged.
    let mut kept = psi.clone();
    for &atom in weak.iter().take(n) {
        kept.row_mut(atom).fill(0.0);
    }
    let mut cand_psi = code_all(&cand, y, opts, Some(&kept));
    let (cand, scales) = normalize_atoms(mod_solve(y, &cand_psi).ok()?).ok()?;
    for (mut row, s) in cand_psi.row_iter_mut().zip(scales) {
        row *= s;
    }
    Some((cand, cand_psi, n))
}

fn reseed_unused_atoms(
    y: &DMatrix<f64>,
    raw: &mut DMatrix<f64>,
    psi: &DMatrix<f64>,
    iter: usize,
) -> usize {
    let unused: Vec<usize> = (0..psi.nrows())
        .filter(|&i| psi.row(i).iter().all(|&v| v == 0.0))
        .collect();
    if unused.is_empty() {
        return 0;
    }
    let residual = y - &*raw * psi;
    let mut by_error: Vec<(usize, f64)> = residual
        .column_iter()
        .enumerate()
        .map(|(j, c)| (j, c.norm()))
        .filter(|&(j, _)| y.column(j).norm() > 1e-12)
        .collect();
    by_error.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut replaced = 0;
    for (atom, (col, _)) in unused.iter().zip(by_error) {
        let c = y.column(col);
        raw.set_column(*atom, &(c / c.norm()));
        replaced += 1;
    }
    log::info!("MOD iteration {iter}: re-seeded {replaced} unused atom(s)");
    replaced
}

/// `‖Y − DΨ‖_F`.
pub fn representation_error(y: &DMatrix<f64>, dict: &Dictionary, psi: &DMatrix<f64>) -> f64 {
    (y - dict.atoms() * psi).norm()
}

const FILE_MAGIC: &str = "SPOTDICT";
const FILE_VERSION: u32 = 1;

/// Writes `SPOTDICT 1 <P> <K>` followed by `P` rows of `K` values with 17
/// significant digits.
pub fn write_dictionary(path: impl AsRef<Path>, dict: &Dictionary) -> Result<(), DictionaryError> {
    let path = path.as_ref();
    write_atomic(path, |w| {
        writeln!(w, "{FILE_MAGIC} {FILE_VERSION} {} {}", dict.p(), dict.k())?;
        for row in dict.atoms.row_iter() {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    })
    .map_err(|source| DictionaryError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_dictionary(path: impl AsRef<Path>) -> Result<Dictionary, DictionaryError> {
    let path = path.as_ref();
    let io_err = |source| DictionaryError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::open(path).map_err(io_err)?;
    let mut lines = BufReader::new(file).lines();
    let fmt = |line: usize, message: String| DictionaryError::Format { line, message };

    let header = lines
        .next()
        .ok_or_else(|| fmt(1, "missing header".into()))?
        .map_err(io_err)?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 || fields[0] != FILE_MAGIC {
        return Err(fmt(1, format!("expected '{FILE_MAGIC} 1 <P> <K>', got {header:?}")));
    }
    if fields[1] != FILE_VERSION.to_string() {
        return Err(fmt(1, format!("unsupported version {}", fields[1])));
    }
    let p: usize = fields[2]
        .parse()
        .map_err(|_| fmt(1, format!("bad P {:?}", fields[2])))?;
    let k: usize = fields[3]
        .parse()
        .map_err(|_| fmt(1, format!("bad K {:?}", fields[3])))?;

    let mut atoms = DMatrix::zeros(p, k);
    for row in 0..p {
        let line_no = row + 2;
        let line = lines
            .next()
            .ok_or_else(|| fmt(line_no, format!("expected {p} data rows, found {row}")))?
            .map_err(io_err)?;
        let values: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| fmt(line_no, e.to_string()))?;
        if values.len() != k {
            return Err(fmt(line_no, format!("expected {k} values, found {}", values.len())));
        }
        for (col, v) in values.into_iter().enumerate() {
            atoms[(row, col)] = v;
        }
    }
    Dictionary::new(atoms)
}
