//! Exact subspace power iteration on a finite joint, used as the convergence
//! oracle for the stochastic objectives.
//!
//! One step, with `G = diag(√p)·φ_t`:
//!
//! 1. `Λ_{t+1} = GᵀG = Σ_x p(x) φ_t(x) φ_t(x)ᵀ`
//! 2. `Ψ = M·G·Λ⁺` (eigen pseudo-inverse, cutoff `1e-10·λ_max`)
//! 3. `Q = orth(Ψ)` by Gram-Schmidt; dead columns are re-seeded
//! 4. each column is rescaled by `√(q_kᵀ M q_k)` and `φ_{t+1} = diag(1/√p)·Q·diag(√μ)`
//!
//! Step 4 fixes the scale that plain orthonormalization leaves free, so the
//! scaled eigenvectors `φ = diag(1/√p)·V·diag(√λ)` are an exact fixed point
//! with `Λ = diag(λ)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::{build_m_matrix, FeatureTable, JointDistribution};
use crate::encoder::EmbeddingModel;
use crate::error::{Error, Result};
use crate::linalg::{self, gram_schmidt, sym_eigen, sym_pinv, Matrix};

pub const PINV_CUTOFF: f64 = 1e-10;

/// Oracle iterate.
#[derive(Clone, Debug, PartialEq)]
pub struct PowerIterState {
    /// `φ_t(x_i)` in row `i`.
    pub phi_table: Matrix,
    /// Second moment of the previous iterate.
    pub lambda: Matrix,
    /// Orthonormal `Q` from the last orthogonalization.
    pub basis: Matrix,
    pub iteration: usize,
    /// Seed of the generator used for dead-column re-seeding.
    pub seed: u64,
    /// Columns re-seeded in the last step.
    pub reseeded: Vec<usize>,
}

impl PowerIterState {
    pub fn from_table(phi_table: Matrix, seed: u64) -> Self {
        let d = phi_table.cols();
        let n = phi_table.rows();
        Self {
            phi_table,
            lambda: Matrix::zeros(d, d),
            basis: Matrix::zeros(n, d),
            iteration: 0,
            seed,
            reseeded: Vec::new(),
        }
    }

    /// Standard normal `N × d` table.
    pub fn random(n: usize, d: usize, seed: u64) -> Result<Self> {
        if n == 0 || d == 0 || d > n {
            return Err(Error::pre(format!("need 1 <= d <= N, got d = {d}, N = {n}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
        Ok(Self::from_table(Matrix::new(n, d, data)?, seed))
    }

    pub fn dim(&self) -> usize {
        self.phi_table.cols()
    }
}

fn check_weights(m: &Matrix, p: &[f64], phi: &Matrix) -> Result<()> {
    if !m.is_square() || m.rows() != p.len() || phi.rows() != p.len() {
        return Err(Error::dim(format!(
            "operator {}x{}, {} weights, table with {} rows",
            m.rows(),
            m.cols(),
            p.len(),
            phi.rows()
        )));
    }
    if p.iter().any(|&v| v <= 0.0) {
        return Err(Error::pre("weights must be strictly positive"));
    }
    Ok(())
}

/// One step on an arbitrary symmetric operator `m` with weights `p`.
pub fn power_iteration_step_on(m: &Matrix, p: &[f64], state: &PowerIterState) -> Result<PowerIterState> {
    check_weights(m, p, &state.phi_table)?;
    let d = state.dim();
    if d == 0 || d > p.len() {
        return Err(Error::pre("embedding dimension must lie in 1..=N"));
    }
    let sqrt_p: Vec<f64> = p.iter().map(|v| v.sqrt()).collect();
    let g = state.phi_table.scale_rows(&sqrt_p);
    let lambda = symmetrize(&g.t_matmul(&g)?);
    let (lambda_inv, _) = sym_pinv(&lambda, PINV_CUTOFF)?;
    let psi = m.matmul(&g)?.matmul(&lambda_inv)?;

    let mut rng = ChaCha8Rng::seed_from_u64(state.seed.wrapping_add(state.iteration as u64));
    let mut ortho = gram_schmidt(&psi);
    let reseeded = ortho.dead.clone();
    let mut attempts = 0;
    while !ortho.dead.is_empty() {
        attempts += 1;
        if attempts > 16 {
            return Err(Error::pre("could not re-seed dead columns"));
        }
        let mut cols = ortho.q.clone();
        for &j in &ortho.dead {
            let fresh: Vec<f64> = (0..p.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
            cols.set_column(j, &fresh);
        }
        ortho = gram_schmidt(&cols);
    }
    let q = ortho.q;

    let mq = m.matmul(&q)?;
    let scales: Vec<f64> = (0..d)
        .map(|k| {
            let mu: f64 = (0..p.len()).map(|i| q[(i, k)] * mq[(i, k)]).sum();
            mu.max(0.0).sqrt()
        })
        .collect();
    let inv_sqrt_p: Vec<f64> = sqrt_p.iter().map(|v| 1.0 / v).collect();
    let phi_table = q.scale_cols(&scales).scale_rows(&inv_sqrt_p);
    Ok(PowerIterState {
        phi_table,
        lambda,
        basis: q,
        iteration: state.iteration + 1,
        seed: state.seed,
        reseeded,
    })
}

/// One oracle step on a symmetric joint.
pub fn exact_power_iteration_step(joint: &JointDistribution, state: &PowerIterState) -> Result<PowerIterState> {
    if !joint.is_symmetric() {
        return Err(Error::pre("power iteration needs a symmetric joint"));
    }
    power_iteration_step_on(&build_m_matrix(joint), joint.marginal_x(), state)
}

fn symmetrize(a: &Matrix) -> Matrix {
    let mut out = a.clone();
    for i in 0..a.rows() {
        for j in (i + 1)..a.cols() {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    out
}

/// Distances from the orthogonality and eigen-factorization conditions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FixedPointResiduals {
    /// `‖Σ p φφᵀ − diag(·)‖_F`
    pub orth: f64,
    /// `‖M·G − G·Λ̂‖_F` with `G = diag(√p)φ` and `Λ̂` the diagonal moment.
    pub eigen: f64,
}

impl FixedPointResiduals {
    pub fn max(&self) -> f64 {
        self.orth.max(self.eigen)
    }
}

/// Residuals of an explicit embedding table under operator `m` and weights `p`.
pub fn fixed_point_residuals_on(m: &Matrix, p: &[f64], phi_table: &Matrix) -> Result<FixedPointResiduals> {
    check_weights(m, p, phi_table)?;
    let sqrt_p: Vec<f64> = p.iter().map(|v| v.sqrt()).collect();
    let g = phi_table.scale_rows(&sqrt_p);
    let moment = g.t_matmul(&g)?;
    let diag = Matrix::from_diag(&moment.diagonal());
    let orth = moment.sub(&diag)?.frobenius_norm();
    let eigen = m.matmul(&g)?.sub(&g.matmul(&diag)?)?.frobenius_norm();
    Ok(FixedPointResiduals { orth, eigen })
}

/// Residuals of an embedding table over the `x` marginal of a joint.
pub fn fixed_point_residuals_table(joint: &JointDistribution, phi_table: &Matrix) -> Result<FixedPointResiduals> {
    fixed_point_residuals_on(&build_m_matrix(joint), joint.marginal_x(), phi_table)
}

/// Embeds every support point and evaluates the residuals.
pub fn fixed_point_residuals(
    joint: &JointDistribution,
    model: &EmbeddingModel,
    features: &FeatureTable,
) -> Result<FixedPointResiduals> {
    fixed_point_residuals_table(joint, &embedding_table(model, features, joint.support_size_x())?)
}

/// `φ(x_i)` in row `i` for the first `n` support points.
pub fn embedding_table(model: &EmbeddingModel, features: &FeatureTable, n: usize) -> Result<Matrix> {
    if n > features.len() {
        return Err(Error::dim(format!("{n} support points but {} feature rows", features.len())));
    }
    let mut out = Matrix::zeros(n, model.embedding_dim());
    for i in 0..n {
        out.row_mut(i).copy_from_slice(&model.embed(features.get(i))?);
    }
    Ok(out)
}

/// The exact fixed point `diag(1/√p)·V_d·diag(√λ_d)` and its eigenvalues.
pub fn scaled_eigen_table(joint: &JointDistribution, d: usize) -> Result<(Matrix, Vec<f64>)> {
    let e = sym_eigen(&build_m_matrix(joint))?;
    if d == 0 || d > e.eigenvalues.len() {
        return Err(Error::pre(format!("d = {d} outside 1..={}", e.eigenvalues.len())));
    }
    let lambdas = e.eigenvalues[..d].to_vec();
    let roots: Vec<f64> = lambdas.iter().map(|l| l.max(0.0).sqrt()).collect();
    let inv_sqrt_p: Vec<f64> = joint.marginal_x().iter().map(|p| 1.0 / p.sqrt()).collect();
    Ok((e.top(d).scale_cols(&roots).scale_rows(&inv_sqrt_p), lambdas))
}

/// Result of [`run_to_convergence`].
#[derive(Clone, Debug)]
pub struct OracleReport {
    pub state: PowerIterState,
    pub residuals: FixedPointResiduals,
    pub converged: bool,
}

/// Iterates until `max(orth, eigen) ≤ tol` or `max_iter` steps.
pub fn run_to_convergence(
    joint: &JointDistribution,
    init: PowerIterState,
    tol: f64,
    max_iter: usize,
) -> Result<OracleReport> {
    if !joint.is_symmetric() {
        return Err(Error::pre("power iteration needs a symmetric joint"));
    }
    let m = build_m_matrix(joint);
    let p = joint.marginal_x();
    let mut state = init;
    let mut residuals = fixed_point_residuals_on(&m, p, &state.phi_table)?;
    for _ in 0..max_iter {
        state = power_iteration_step_on(&m, p, &state)?;
        residuals = fixed_point_residuals_on(&m, p, &state.phi_table)?;
        if residuals.max() <= tol {
            return Ok(OracleReport { state, residuals, converged: true });
        }
    }
    Ok(OracleReport { state, residuals, converged: false })
}

/// Largest principal angle between `span(diag(√p)·φ)` and the top-`d_top`
/// eigenspace of `m`; `π/2` when the span has rank below `d_top`.
pub fn max_angle_to_top_space(m: &Matrix, p: &[f64], phi_table: &Matrix, d_top: usize) -> Result<f64> {
    check_weights(m, p, phi_table)?;
    let e = sym_eigen(m)?;
    if d_top == 0 || d_top > e.eigenvalues.len() {
        return Err(Error::pre(format!("d_top = {d_top} outside 1..={}", e.eigenvalues.len())));
    }
    let sqrt_p: Vec<f64> = p.iter().map(|v| v.sqrt()).collect();
    let ortho = gram_schmidt(&phi_table.scale_rows(&sqrt_p));
    let live: Vec<Vec<f64>> = (0..ortho.q.cols())
        .filter(|j| !ortho.dead.contains(j))
        .map(|j| ortho.q.column(j))
        .collect();
    if live.len() < d_top {
        return Ok(std::f64::consts::FRAC_PI_2);
    }
    let span = Matrix::from_columns(&live)?;
    let angles = linalg::principal_angles(&span, &e.top(d_top))?;
    Ok(angles.last().copied().unwrap_or(0.0))
}
