//! Joint estimation of sparse background codes `Ψ` and sparse outliers `R`
//! from `Y ≈ DΨ + R`, minimizing
//!
//! ```text
//! ½‖Y − DΨ − R‖²_F + α‖Ψ‖₁,₁ + β‖R‖₁,₁
//! ```
//!
//! with scaled-form ADMM on the split `Z = Ψ`. Each iteration performs
//!
//! ```text
//! Ψ ← (DᵀD + μI)⁻¹ (Dᵀ(Y − R) + μ(Z + M))
//! R ← soft(Y − DΨ, β)
//! Z ← soft(Ψ − M, α/μ)
//! M ← M + (Z − Ψ)
//! ```
//!
//! and rebalances `μ` whenever the primal and dual residuals drift more than
//! a factor of 10 apart. The multiplier update uses `+ (Z − Ψ)`, which is the
//! sign consistent with `F = Z + M` and `soft(Ψ − M)`; the opposite sign
//! makes the iteration diverge.

use std::path::Path;

use nalgebra::{Cholesky, DMatrix, Dyn};
use thiserror::Error;

use crate::dictionary::Dictionary;
use crate::fsutil::write_atomic;

#[derive(Debug, Error)]
pub enum CodingError {
    #[error("soft threshold must be non-negative, got {0}")]
    NegativeThreshold(f64),
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("invalid solver options: {0}")]
    InvalidOptions(String),
    #[error("non-finite iterate at iteration {iteration}")]
    NonFinite { iteration: usize },
    #[error("system matrix DᵀD + μI is not positive definite (μ = {mu})")]
    Factorization { mu: f64 },
    #[error("cannot write {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Soft thresholding, the proximal operator of `tau·|x|`.
pub fn soft(x: f64, tau: f64) -> Result<f64, CodingError> {
    if !(tau >= 0.0) {
        return Err(CodingError::NegativeThreshold(tau));
    }
    Ok(shrink(x, tau))
}

/// Elementwise [`soft`].
pub fn soft_matrix(x: &DMatrix<f64>, tau: f64) -> Result<DMatrix<f64>, CodingError> {
    if !(tau >= 0.0) {
        return Err(CodingError::NegativeThreshold(tau));
    }
    Ok(x.map(|v| shrink(v, tau)))
}

#[inline]
fn shrink(x: f64, tau: f64) -> f64 {
    if x > tau {
        x - tau
    } else if x < -tau {
        x + tau
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RobustCodingProblem<'a> {
    pub y: &'a DMatrix<f64>,
    pub d: &'a Dictionary,
    /// Weight on `‖Ψ‖₁,₁`.
    pub alpha: f64,
    /// Weight on `‖R‖₁,₁`.
    pub beta: f64,
}

impl<'a> RobustCodingProblem<'a> {
    pub fn new(
        y: &'a DMatrix<f64>,
        d: &'a Dictionary,
        alpha: f64,
        beta: f64,
    ) -> Result<Self, CodingError> {
        if !(alpha >= 0.0 && alpha.is_finite()) || !(beta >= 0.0 && beta.is_finite()) {
            return Err(CodingError::InvalidProblem(format!(
                "alpha and beta must be finite and non-negative (alpha = {alpha}, beta = {beta})"
            )));
        }
        if y.nrows() != d.p() {
            return Err(CodingError::InvalidProblem(format!(
                "data has {} rows but dictionary atoms have length {}",
                y.nrows(),
                d.p()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(CodingError::InvalidProblem("data contains non-finite values".into()));
        }
        Ok(Self { y, d, alpha, beta })
    }

    fn k(&self) -> usize {
        self.d.k()
    }

    fn l(&self) -> usize {
        self.y.ncols()
    }
}

/// ADMM iterate. `m` is the scaled multiplier of the constraint `Z = Ψ`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmmState {
    pub psi: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub z: DMatrix<f64>,
    pub m: DMatrix<f64>,
    pub mu: f64,
    pub iter: usize,
}

impl AdmmState {
    /// All-zero start.
    pub fn zeros(prob: &RobustCodingProblem<'_>, mu: f64) -> Self {
        let (k, l, p) = (prob.k(), prob.l(), prob.y.nrows());
        Self {
            psi: DMatrix::zeros(k, l),
            r: DMatrix::zeros(p, l),
            z: DMatrix::zeros(k, l),
            m: DMatrix::zeros(k, l),
            mu,
            iter: 0,
        }
    }
}

/// `½‖Y − DΨ − R‖²_F + α‖Ψ‖₁,₁ + β‖R‖₁,₁`.
pub fn objective(prob: &RobustCodingProblem<'_>, psi: &DMatrix<f64>, r: &DMatrix<f64>) -> f64 {
    let fit = prob.y - prob.d.atoms() * psi - r;
    0.5 * fit.norm_squared() + prob.alpha * l11(psi) + prob.beta * l11(r)
}

fn l11(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v.abs()).sum()
}

/// Cached pieces of the `Ψ` step: `DᵀY`, `DᵀD` and the Cholesky factor of
/// `DᵀD + μI` for the current `μ`.
struct PsiSolver {
    gram: DMatrix<f64>,
    dt: DMatrix<f64>,
    dty: DMatrix<f64>,
    mu: f64,
    chol: Cholesky<f64, Dyn>,
}

impl PsiSolver {
    fn new(prob: &RobustCodingProblem<'_>, mu: f64) -> Result<Self, CodingError> {
        let gram = prob.d.gram();
        let dt = prob.d.atoms().transpose();
        let dty = &dt * prob.y;
        let chol = factor(&gram, mu)?;
        Ok(Self { gram, dt, dty, mu, chol })
    }

    fn set_mu(&mut self, mu: f64) -> Result<(), CodingError> {
        if mu != self.mu {
            self.chol = factor(&self.gram, mu)?;
            self.mu = mu;
        }
        Ok(())
    }

    fn solve(&self, state: &AdmmState) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dty.nrows(), self.dty.ncols());
        self.solve_into(state, &mut out);
        out
    }

    /// Writes `Ψ⁺` into `out`, which must be K×L.
    fn solve_into(&self, state: &AdmmState, out: &mut DMatrix<f64>) {
        out.copy_from(&self.dty);
        out.gemm(-1.0, &self.dt, &state.r, 1.0);
        out.zip_zip_apply(&state.z, &state.m, |o, z, m| *o += self.mu * (z + m));
        self.chol.solve_mut(out);
    }
}

fn factor(gram: &DMatrix<f64>, mu: f64) -> Result<Cholesky<f64, Dyn>, CodingError> {
    let mut a = gram.clone();
    for i in 0..a.nrows() {
        a[(i, i)] += mu;
    }
    Cholesky::new(a).ok_or(CodingError::Factorization { mu })
}

/// `Ψ⁺ = (DᵀD + μI)⁻¹ (Dᵀ(Y − R) + μ(Z + M))`.
pub fn psi_update(
    state: &AdmmState,
    prob: &RobustCodingProblem<'_>,
) -> Result<DMatrix<f64>, CodingError> {
    if !(state.mu > 0.0) {
        return Err(CodingError::InvalidOptions(format!("mu must be positive, got {}", state.mu)));
    }
    for m in [&state.r, &state.z, &state.m] {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(CodingError::NonFinite {
                iteration: state.iter,
            });
        }
    }
    Ok(PsiSolver::new(prob, state.mu)?.solve(state))
}

/// `R⁺ = soft(Y − DΨ, β)` using `state.psi`.
pub fn r_update(state: &AdmmState, prob: &RobustCodingProblem<'_>) -> DMatrix<f64> {
    let beta = prob.beta;
    (prob.y - prob.d.atoms() * &state.psi).map(|v| shrink(v, beta))
}

/// `Z⁺ = soft(Ψ − M, α/μ)` using `state.psi`.
pub fn z_update(state: &AdmmState, prob: &RobustCodingProblem<'_>) -> DMatrix<f64> {
    let tau = prob.alpha / state.mu;
    (&state.psi - &state.m).map(|v| shrink(v, tau))
}

/// `M⁺ = M + (Z − Ψ)` using `state.z` and `state.psi`.
pub fn m_update(state: &AdmmState) -> DMatrix<f64> {
    &state.m + (&state.z - &state.psi)
}

/// Primal residual `‖Z⁺ − Ψ⁺‖_F` and dual residual `μ‖Z⁺ − Z‖_F`.
pub fn residuals(prev: &AdmmState, next: &AdmmState) -> (f64, f64) {
    let primal = (&next.z - &next.psi).norm();
    let dual = next.mu * (&next.z - &prev.z).norm();
    (primal, dual)
}

/// Keeps the residuals within a factor of 10: doubles `μ` (halving the
/// scaled multiplier) when the primal residual dominates, halves it
/// (doubling the multiplier) when the dual residual dominates.
pub fn adapt_mu(mu: f64, primal: f64, dual: f64, m: DMatrix<f64>) -> (f64, DMatrix<f64>) {
    if primal > 10.0 * dual {
        (mu * 2.0, m * 0.5)
    } else if dual > 10.0 * primal {
        (mu * 0.5, m * 2.0)
    } else {
        (mu, m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmmOptions {
    pub mu0: f64,
    pub max_iters: usize,
    /// Stopping tolerance on primal + dual; `None` means `√(P·L)·10⁻⁶`.
    pub epsilon: Option<f64>,
    /// Record objective and residuals at every iteration.
    pub trace: bool,
}

impl Default for AdmmOptions {
    fn default() -> Self {
        Self {
            mu0: 1.0,
            max_iters: 500,
            epsilon: None,
            trace: false,
        }
    }
}

impl AdmmOptions {
    pub fn epsilon_for(&self, p: usize, l: usize) -> f64 {
        self.epsilon
            .unwrap_or_else(|| ((p * l) as f64).sqrt() * 1e-6)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    pub objective: f64,
    pub primal: f64,
    pub dual: f64,
    pub mu: f64,
}

#[derive(Debug, Clone)]
pub struct RobustCodingResult {
    pub psi: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub epsilon: f64,
    pub objective: f64,
    pub converged: bool,
    /// Smallest and largest `μ` used during the run.
    pub mu_range: (f64, f64),
    pub trace: Vec<IterationRecord>,
}

pub fn robust_sparse_code(
    prob: &RobustCodingProblem<'_>,
    opts: &AdmmOptions,
) -> Result<RobustCodingResult, CodingError> {
    if !(opts.mu0 > 0.0 && opts.mu0.is_finite()) {
        return Err(CodingError::InvalidOptions(format!(
            "mu0 must be positive, got {}",
            opts.mu0
        )));
    }
    if opts.max_iters == 0 {
        return Err(CodingError::InvalidOptions("max_iters must be at least 1".into()));
    }
    let epsilon = opts.epsilon_for(prob.y.nrows(), prob.l());
    if !(epsilon >= 0.0) {
        return Err(CodingError::InvalidOptions(format!("epsilon must be non-negative, got {epsilon}")));
    }

    let mut state = AdmmState::zeros(prob, opts.mu0);
    let mut solver = PsiSolver::new(prob, state.mu)?;
    let mut fit = DMatrix::zeros(prob.y.nrows(), prob.l());
    let mut psi_next = DMatrix::zeros(prob.k(), prob.l());
    let mut trace = Vec::new();
    let mut mu_range = (state.mu, state.mu);
    let (mut primal, mut dual) = (f64::INFINITY, f64::INFINITY);
    let mut converged = false;

    while state.iter < opts.max_iters {
        state.iter += 1;
        solver.set_mu(state.mu)?;
        solver.solve_into(&state, &mut psi_next);
        std::mem::swap(&mut state.psi, &mut psi_next);
        // R step in place: fit ← Y − DΨ, R ← soft(fit, β).
        fit.copy_from(prob.y);
        fit.gemm(-1.0, prob.d.atoms(), &state.psi, 1.0);
        state.r.zip_apply(&fit, |r, f| *r = shrink(f, prob.beta));
        let z_next = z_update(&state, prob);
        let z_prev = std::mem::replace(&mut state.z, z_next);
        state.m = m_update(&state);

        primal = (&state.z - &state.psi).norm();
        dual = state.mu * (&state.z - &z_prev).norm();
        if !(primal.is_finite() && dual.is_finite())
            || state.r.iter().any(|v| !v.is_finite())
        {
            return Err(CodingError::NonFinite {
                iteration: state.iter,
            });
        }
        if opts.trace {
            trace.push(IterationRecord {
                iter: state.iter,
                objective: objective(prob, &state.psi, &state.r),
                primal,
                dual,
                mu: state.mu,
            });
        }
        if primal + dual <= epsilon {
            converged = true;
            break;
        }
        let m = std::mem::take(&mut state.m);
        let (mu, m) = adapt_mu(state.mu, primal, dual, m);
        state.mu = mu;
        state.m = m;
        mu_range = (mu_range.0.min(mu), mu_range.1.max(mu));
    }

    Ok(RobustCodingResult {
        objective: objective(prob, &state.psi, &state.r),
        psi: state.psi,
        r: state.r,
        iterations: state.iter,
        primal_residual: primal,
        dual_residual: dual,
        epsilon,
        converged,
        mu_range,
        trace,
    })
}

/// Writes `iter,objective,primal,dual,mu` rows.
pub fn write_trace(path: impl AsRef<Path>, trace: &[IterationRecord]) -> Result<(), CodingError> {
    use std::io::Write;
    let path = path.as_ref();
    write_atomic(path, |w| {
        writeln!(w, "iter,objective,primal,dual,mu")?;
        for t in trace {
            writeln!(w, "{},{:e},{:e},{:e},{:e}", t.iter, t.objective, t.primal, t.dual, t.mu)?;
        }
        Ok(())
    })
    .map_err(|source| CodingError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dictionary::normalize_atoms;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn scalar_dict() -> Dictionary {
        Dictionary::new(DMatrix::from_element(1, 1, 1.0)).unwrap()
    }

    fn random_dict(p: usize, k: usize, rng: &mut ChaCha8Rng) -> Dictionary {
        normalize_atoms(DMatrix::from_fn(p, k, |_, _| rng.sample(StandardNormal)))
            .unwrap()
            .0
    }

    #[test]
    fn soft_examples() {
        assert!((soft(0.5, 0.2).unwrap() - 0.3).abs() < 1e-15);
        assert_eq!(soft(-0.05, 0.1).unwrap(), 0.0);
        assert_eq!(soft(-1.25, 0.0).unwrap(), -1.25);
        assert!(matches!(soft(1.0, -0.1), Err(CodingError::NegativeThreshold(_))));
        assert!(soft_matrix(&DMatrix::zeros(2, 2), -1.0).is_err());
    }

    proptest! {
        #[test]
        fn soft_is_the_l1_prox(v in -5.0f64..5.0, tau in 0.0f64..2.0, seed in any::<u64>()) {
            let s = soft(v, tau).unwrap();
            let at = |u: f64| 0.5 * (v - u).powi(2) + tau * u.abs();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for _ in 0..100 {
                let u: f64 = rng.random_range(-8.0..8.0);
                prop_assert!(at(s) <= at(u) + 1e-12);
            }
        }
    }

    #[test]
    fn objective_examples() {
        let d = scalar_dict();
        let y = DMatrix::from_element(1, 1, 1.0);
        let prob = RobustCodingProblem::new(&y, &d, 0.1, 0.1).unwrap();
        let psi = DMatrix::from_element(1, 1, 0.5);
        let r = DMatrix::from_element(1, 1, 0.25);
        assert!((objective(&prob, &psi, &r) - 0.10625).abs() < 1e-15);
        let zero = DMatrix::zeros(1, 1);
        assert_eq!(objective(&prob, &zero, &zero), 0.5);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = random_dict(5, 3, &mut rng);
        let psi = DMatrix::from_fn(3, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let r = DMatrix::from_fn(5, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = d.atoms() * &psi + &r;
        let prob = RobustCodingProblem::new(&y, &d, 0.3, 0.7).unwrap();
        let expected = 0.3 * l11(&psi) + 0.7 * l11(&r);
        assert!((objective(&prob, &psi, &r) - expected).abs() < 1e-12);
    }

    #[test]
    fn problem_validation() {
        let d = scalar_dict();
        let y = DMatrix::zeros(2, 3);
        assert!(RobustCodingProblem::new(&y, &d, 0.0, 0.0).is_err());
        let y = DMatrix::zeros(1, 3);
        assert!(RobustCodingProblem::new(&y, &d, -1.0, 0.0).is_err());
        assert!(RobustCodingProblem::new(&y, &d, 0.0, f64::NAN).is_err());
    }

    fn state_with(prob: &RobustCodingProblem<'_>, mu: f64) -> AdmmState {
        AdmmState::zeros(prob, mu)
    }

    #[test]
    fn psi_update_scalar() {
        let d = scalar_dict();
        let y = DMatrix::from_element(1, 1, 2.0);
        let prob = RobustCodingProblem::new(&y, &d, 0.0, 0.0).unwrap();
        let s = state_with(&prob, 1.0);
        assert!((psi_update(&s, &prob).unwrap()[(0, 0)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn psi_update_orthonormal_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = DMatrix::from_fn(6, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let q = a.qr().q();
        let d = Dictionary::new(q.clone()).unwrap();
        let y = DMatrix::from_fn(6, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let prob = RobustCodingProblem::new(&y, &d, 0.0, 0.0).unwrap();
        let mut s = state_with(&prob, 1.0);
        s.r = DMatrix::from_fn(6, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        s.z = DMatrix::from_fn(3, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        s.m = DMatrix::from_fn(3, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let expected = (q.tr_mul(&(&y - &s.r)) + &s.z + &s.m) / 2.0;
        assert!((psi_update(&s, &prob).unwrap() - expected).amax() < 1e-12);
    }

    #[test]
    fn psi_update_matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = random_dict(6, 3, &mut rng);
        let y = DMatrix::from_fn(6, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let prob = RobustCodingProblem::new(&y, &d, 0.1, 0.1).unwrap();
        let mut s = state_with(&prob, 0.7);
        s.r = DMatrix::from_fn(6, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        s.z = DMatrix::from_fn(3, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        s.m = DMatrix::from_fn(3, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let psi = psi_update(&s, &prob).unwrap();

        let a = d.gram() + DMatrix::identity(3, 3) * 0.7;
        let rhs = d.atoms().tr_mul(&(&y - &s.r)) + (&s.z + &s.m) * 0.7;
        let oracle = a.clone().lu().solve(&rhs).unwrap();
        assert!((&psi - oracle).amax() < 1e-10);
        let resid = (&a * &psi - &rhs).norm();
        assert!(resid <= 1e-10 * (1.0 + rhs.norm()));
    }

    #[test]
    fn r_update_examples() {
        let d = scalar_dict();
        let y = DMatrix::from_element(1, 1, 0.5);
        let mut prob = RobustCodingProblem::new(&y, &d, 0.0, 0.2).unwrap();
        let s = state_with(&prob, 1.0);
        assert!((r_update(&s, &prob)[(0, 0)] - 0.3).abs() < 1e-15);
        prob.beta = 0.5;
        assert_eq!(r_update(&s, &prob)[(0, 0)], 0.0);
        prob.beta = 0.0;
        assert_eq!(r_update(&s, &prob)[(0, 0)], 0.5);
    }

    #[test]
    fn z_update_examples() {
        let d = scalar_dict();
        let y = DMatrix::zeros(1, 1);
        let mut prob = RobustCodingProblem::new(&y, &d, 0.1, 0.0).unwrap();
        let mut s = state_with(&prob, 1.0);
        s.psi[(0, 0)] = 0.05;
        s.m[(0, 0)] = 0.1;
        assert_eq!(z_update(&s, &prob)[(0, 0)], 0.0);
        prob.alpha = 0.0;
        assert!((z_update(&s, &prob)[(0, 0)] + 0.05).abs() < 1e-15);
        prob.alpha = 1e-5;
        s.psi[(0, 0)] = 1.0;
        s.m[(0, 0)] = 0.0;
        assert!((z_update(&s, &prob)[(0, 0)] - 0.99999).abs() < 1e-15);
    }

    #[test]
    fn m_update_examples() {
        let d = scalar_dict();
        let y = DMatrix::zeros(1, 2);
        let prob = RobustCodingProblem::new(&y, &d, 0.0, 0.0).unwrap();
        let mut s = state_with(&prob, 1.0);
        s.m = DMatrix::from_row_slice(1, 2, &[0.3, -0.2]);
        s.psi = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        s.z = s.psi.clone();
        assert_eq!(m_update(&s), s.m);
        s.m.fill(0.0);
        s.z = DMatrix::from_row_slice(1, 2, &[1.5, 1.0]);
        assert_eq!(m_update(&s), DMatrix::from_row_slice(1, 2, &[0.5, -1.0]));
    }

    #[test]
    fn scalar_trace_matches_hand_iteration() {
        // Independent scripted iteration of the scalar instance, including
        // the μ rebalancing rule.
        let (y, alpha, beta) = (1.0f64, 1e-5, 0.3);
        let (mut r, mut z, mut m, mut mu) = (0.0f64, 0.0f64, 0.0f64, 1.0f64);
        let sh = |x: f64, t: f64| x.signum() * (x.abs() - t).max(0.0);
        let mut expected = Vec::new();
        for _ in 0..3 {
            let psi = ((y - r) + mu * (z + m)) / (1.0 + mu);
            r = sh(y - psi, beta);
            let zn = sh(psi - m, alpha / mu);
            m += zn - psi;
            let (p, du) = ((zn - psi).abs(), mu * (zn - z).abs());
            z = zn;
            expected.push((psi, r, z, m));
            if p > 10.0 * du {
                mu *= 2.0;
                m /= 2.0;
            } else if du > 10.0 * p {
                mu /= 2.0;
                m *= 2.0;
            }
        }

        let d = scalar_dict();
        let ym = DMatrix::from_element(1, 1, y);
        let prob = RobustCodingProblem::new(&ym, &d, alpha, beta).unwrap();
        let mut s = AdmmState::zeros(&prob, 1.0);
        for (it, e) in expected.iter().enumerate() {
            let prev = s.clone();
            s.psi = psi_update(&s, &prob).unwrap();
            s.r = r_update(&s, &prob);
            s.z = z_update(&s, &prob);
            s.m = m_update(&s);
            s.iter = it + 1;
            let got = (s.psi[(0, 0)], s.r[(0, 0)], s.z[(0, 0)], s.m[(0, 0)]);
            assert!((got.0 - e.0).abs() < 1e-14, "iteration {it}: {got:?} vs {e:?}");
            assert!((got.1 - e.1).abs() < 1e-14);
            assert!((got.2 - e.2).abs() < 1e-14);
            assert!((got.3 - e.3).abs() < 1e-14);
            let (p, du) = residuals(&prev, &s);
            let (mu, m) = adapt_mu(s.mu, p, du, s.m.clone());
            s.mu = mu;
            s.m = m;
        }
    }

    #[test]
    fn residual_examples() {
        let d = scalar_dict();
        let y = DMatrix::zeros(1, 1);
        let prob = RobustCodingProblem::new(&y, &d, 0.0, 0.0).unwrap();
        let a = AdmmState::zeros(&prob, 0.5);
        assert_eq!(residuals(&a, &a), (0.0, 0.0));
        let mut b = a.clone();
        b.z[(0, 0)] = 2.0;
        b.psi[(0, 0)] = 2.0;
        assert_eq!(residuals(&a, &b), (0.0, 1.0));
    }

    #[test]
    fn adapt_mu_rule() {
        let m = DMatrix::from_element(1, 1, 4.0);
        assert_eq!(adapt_mu(1.0, 3.0, 3.0, m.clone()), (1.0, m.clone()));
        let (mu, m2) = adapt_mu(1.0, 100.0, 1.0, m.clone());
        assert_eq!((mu, m2[(0, 0)]), (2.0, 2.0));
        let (mu, m2) = adapt_mu(1.0, 1.0, 100.0, m);
        assert_eq!((mu, m2[(0, 0)]), (0.5, 8.0));
    }

    #[test]
    fn zero_data_converges_immediately() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = random_dict(5, 3, &mut rng);
        let y = DMatrix::zeros(5, 4);
        let prob = RobustCodingProblem::new(&y, &d, 1e-5, 0.1).unwrap();
        let res = robust_sparse_code(&prob, &AdmmOptions::default()).unwrap();
        assert!(res.converged);
        assert_eq!(res.iterations, 1);
        assert!(res.psi.iter().all(|&v| v == 0.0));
        assert!(res.r.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_instance_solution() {
        let d = scalar_dict();
        let y = DMatrix::from_element(1, 1, 1.0);
        let prob = RobustCodingProblem::new(&y, &d, 1e-5, 0.3).unwrap();
        let res = robust_sparse_code(&prob, &AdmmOptions::default()).unwrap();
        assert!(res.converged);
        assert!((res.psi[(0, 0)] - (1.0 - 1e-5)).abs() < 1e-5);
        assert!(res.r[(0, 0)].abs() < 1e-6);
        assert!((res.objective - 1e-5).abs() < 1e-6);
    }

    #[test]
    fn options_are_validated() {
        let d = scalar_dict();
        let y = DMatrix::zeros(1, 1);
        let prob = RobustCodingProblem::new(&y, &d, 0.0, 0.0).unwrap();
        let bad_mu = AdmmOptions {
            mu0: 0.0,
            ..AdmmOptions::default()
        };
        assert!(robust_sparse_code(&prob, &bad_mu).is_err());
        let bad_iters = AdmmOptions {
            max_iters: 0,
            ..AdmmOptions::default()
        };
        assert!(robust_sparse_code(&prob, &bad_iters).is_err());
    }

    #[test]
    fn runs_are_bitwise_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = random_dict(12, 4, &mut rng);
        let y = DMatrix::from_fn(12, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let prob = RobustCodingProblem::new(&y, &d, 0.05, 0.2).unwrap();
        let opts = AdmmOptions {
            trace: true,
            ..AdmmOptions::default()
        };
        let a = robust_sparse_code(&prob, &opts).unwrap();
        let b = robust_sparse_code(&prob, &opts).unwrap();
        assert_eq!(a.psi, b.psi);
        assert_eq!(a.r, b.r);
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.trace.len(), a.iterations);
    }
}
