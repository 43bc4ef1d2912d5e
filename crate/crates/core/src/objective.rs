//! Loss values and parameter gradients.
//!
//! Everything here uses the minimization convention: each objective is the
//! negative of the quantity the corresponding mutual-information bound
//! maximizes.
//!
//! * Spectral contrastive: `−2·E_joint[φ(x)ᵀφ(x′)] + E_marg[(φ(x)ᵀφ(x′))²]`.
//! * MINC: `−E_joint[t_α(s·φ_tgt(x)ᵀφ(x′))] + ½·E[s²·φ(x′)ᵀ LT[Λ] φ(x′)]`
//!   with `Λ` an EMA of target second moments. The returned update is the
//!   Hebbian semi-gradient: the `x′` cotangent of the second term is
//!   `s²·LT[Λ]·φ(x′)`, which equals the true gradient whenever the matrix
//!   used is symmetric (full `Λ`, or diagonal `Λ` under the mask).
//! * `L₂` matching: `−2·E[φ_tgt(x)ᵀΛφ(x′)] + E[φ(x′)ᵀΛᵀΛφ(x′)]`.
//! * Linear predictor: `E‖A·φ(x′) − sg(φ_tgt(x))‖²`.
//!
//! Gradients never flow into the target branch, `Λ`, or the predictor input
//! side marked with a stop-gradient.

use serde::{Deserialize, Serialize};

use crate::dataset::{FeatureTable, JointDistribution};
use crate::divergence::AlphaDivergence;
use crate::encoder::{EmbeddingModel, GradientBuffer, Tape};
use crate::error::{Error, Result};
use crate::linalg::{self, lower_triangular, Matrix};

/// Minimum inner scale kept by the learnable-scale optimizer.
pub const MIN_INNER_SCALE: f64 = 1e-3;

/// Index batch over a shared support.
///
/// Every list carries weights that sum to one, so a uniform minibatch and an
/// exhaustive expectation over a finite joint use the same code path.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// Positive pairs `(x, x′, weight)` drawn from the joint.
    pub pairs: Vec<(usize, usize, f64)>,
    /// Pairs standing in for the product of marginals.
    pub negatives: Vec<(usize, usize, f64)>,
    /// `x` samples feeding the `Λ` update.
    pub anchors: Vec<(usize, f64)>,
    /// `x′` samples feeding the MINC quadratic term.
    pub views: Vec<(usize, f64)>,
}

impl Batch {
    /// Uniform minibatch. Negatives are all cross pairs `(x_i, x′_j)`, `i ≠ j`.
    pub fn from_pairs(pairs: &[(usize, usize)]) -> Result<Self> {
        let n = pairs.len();
        if n == 0 {
            return Err(Error::pre("empty batch"));
        }
        let w = 1.0 / n as f64;
        let mut negatives = Vec::with_capacity(n * n.saturating_sub(1));
        if n > 1 {
            let wn = 1.0 / (n * (n - 1)) as f64;
            for (i, &(x, _)) in pairs.iter().enumerate() {
                for (j, &(_, xp)) in pairs.iter().enumerate() {
                    if i != j {
                        negatives.push((x, xp, wn));
                    }
                }
            }
        }
        Ok(Self {
            pairs: pairs.iter().map(|&(x, xp)| (x, xp, w)).collect(),
            negatives,
            anchors: pairs.iter().map(|&(x, _)| (x, w)).collect(),
            views: pairs.iter().map(|&(_, xp)| (xp, w)).collect(),
        })
    }

    /// Exact expectations over a finite joint: every cell with positive mass,
    /// every marginal product cell, and both marginals.
    pub fn exhaustive(joint: &JointDistribution) -> Self {
        let t = joint.table();
        let (px, pxp) = (joint.marginal_x(), joint.marginal_xp());
        let mut pairs = Vec::new();
        let mut negatives = Vec::with_capacity(px.len() * pxp.len());
        for (i, &pi) in px.iter().enumerate() {
            for (j, &pj) in pxp.iter().enumerate() {
                if t[(i, j)] > 0.0 {
                    pairs.push((i, j, t[(i, j)]));
                }
                negatives.push((i, j, pi * pj));
            }
        }
        Self {
            pairs,
            negatives,
            anchors: px.iter().copied().enumerate().collect(),
            views: pxp.iter().copied().enumerate().collect(),
        }
    }

    fn check(&self) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::pre("batch has no positive pairs"));
        }
        Ok(())
    }

    fn max_index(&self) -> usize {
        let a = self.pairs.iter().chain(&self.negatives).map(|&(x, y, _)| x.max(y));
        let b = self.anchors.iter().chain(&self.views).map(|&(x, _)| x);
        a.chain(b).max().unwrap_or(0)
    }
}

/// Per-support-point forward results, computed once per batch.
struct Embeddings {
    rows: Vec<Option<(Vec<f64>, Tape)>>,
}

impl Embeddings {
    fn compute(model: &EmbeddingModel, features: &FeatureTable, needed: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut rows: Vec<Option<(Vec<f64>, Tape)>> = vec![None; features.len()];
        for i in needed {
            if i >= features.len() {
                return Err(Error::dim(format!("support index {i} beyond feature table of {}", features.len())));
            }
            if rows[i].is_none() {
                rows[i] = Some(model.forward(features.get(i))?);
            }
        }
        Ok(Self { rows })
    }

    fn get(&self, i: usize) -> &[f64] {
        &self.rows[i].as_ref().expect("embedding requested before compute").0
    }
}

/// Per-support-point cotangent accumulator; backward runs in index order.
struct Cotangents {
    rows: Vec<Option<Vec<f64>>>,
    dim: usize,
}

impl Cotangents {
    fn new(n: usize, dim: usize) -> Self {
        Self { rows: vec![None; n], dim }
    }

    fn add(&mut self, i: usize, alpha: f64, v: &[f64]) {
        let row = self.rows[i].get_or_insert_with(|| vec![0.0; self.dim]);
        linalg::axpy(alpha, v, row);
    }

    fn backprop(&self, model: &EmbeddingModel, emb: &Embeddings) -> Result<GradientBuffer> {
        let mut grad = model.zero_grad();
        for (i, cot) in self.rows.iter().enumerate() {
            if let Some(c) = cot {
                let tape = &emb.rows[i].as_ref().expect("cotangent without forward").1;
                model.backward_into(tape, c, &mut grad)?;
            }
        }
        Ok(grad)
    }
}

fn all_indices(batch: &Batch) -> impl Iterator<Item = usize> + '_ {
    batch
        .pairs
        .iter()
        .chain(&batch.negatives)
        .flat_map(|&(x, y, _)| [x, y])
        .chain(batch.anchors.iter().chain(&batch.views).map(|&(x, _)| x))
}

fn check_support(batch: &Batch, features: &FeatureTable) -> Result<()> {
    batch.check()?;
    if batch.max_index() >= features.len() {
        return Err(Error::dim("batch index outside the feature table"));
    }
    Ok(())
}

/// Weighted `(left, right, weight)` embedding pairs.
pub type EmbeddingPairs<'a> = [(&'a [f64], &'a [f64], f64)];

/// Spectral contrastive loss on precomputed embeddings. Each list is a
/// weighted expectation; weights are normalized by their sum.
pub fn spectral_contrastive_loss(joint_pairs: &EmbeddingPairs, marginal_pairs: &EmbeddingPairs) -> Result<f64> {
    if joint_pairs.is_empty() || marginal_pairs.is_empty() {
        return Err(Error::pre("spectral loss needs non-empty pair lists"));
    }
    let dim = joint_pairs[0].0.len();
    if joint_pairs.iter().chain(marginal_pairs).any(|(a, b, _)| a.len() != dim || b.len() != dim) {
        return Err(Error::dim("inconsistent embedding dimension"));
    }
    let wj: f64 = joint_pairs.iter().map(|p| p.2).sum();
    let wm: f64 = marginal_pairs.iter().map(|p| p.2).sum();
    let attract: f64 = joint_pairs.iter().map(|(a, b, w)| w * linalg::dot(a, b)).sum::<f64>() / wj;
    let repel: f64 = marginal_pairs.iter().map(|(a, b, w)| w * linalg::dot(a, b).powi(2)).sum::<f64>() / wm;
    Ok(-2.0 * attract + repel)
}

/// Gradient of the spectral loss split by which view it reaches.
#[derive(Clone, Debug)]
pub struct SpectralGradient {
    pub loss: f64,
    pub x_branch: GradientBuffer,
    pub xp_branch: GradientBuffer,
}

impl SpectralGradient {
    pub fn total(&self) -> GradientBuffer {
        let mut g = self.x_branch.clone();
        g.add_assign(&self.xp_branch);
        g
    }
}

/// Spectral contrastive loss and its analytic gradient through both views.
pub fn spectral_loss_and_grad(online: &EmbeddingModel, features: &FeatureTable, batch: &Batch) -> Result<SpectralGradient> {
    check_support(batch, features)?;
    if batch.negatives.is_empty() {
        return Err(Error::pre("spectral loss needs at least two pairs for negatives"));
    }
    let emb = Embeddings::compute(online, features, all_indices(batch))?;
    let d = online.embedding_dim();
    let mut cot_x = Cotangents::new(features.len(), d);
    let mut cot_xp = Cotangents::new(features.len(), d);
    let wj: f64 = batch.pairs.iter().map(|p| p.2).sum();
    let wm: f64 = batch.negatives.iter().map(|p| p.2).sum();
    let mut loss = 0.0;
    for &(x, xp, w) in &batch.pairs {
        let w = w / wj;
        let (a, b) = (emb.get(x), emb.get(xp));
        loss -= 2.0 * w * linalg::dot(a, b);
        cot_x.add(x, -2.0 * w, b);
        cot_xp.add(xp, -2.0 * w, a);
    }
    for &(x, xp, w) in &batch.negatives {
        let w = w / wm;
        let (a, b) = (emb.get(x), emb.get(xp));
        let u = linalg::dot(a, b);
        loss += w * u * u;
        cot_x.add(x, 2.0 * w * u, b);
        cot_xp.add(xp, 2.0 * w * u, a);
    }
    Ok(SpectralGradient {
        loss,
        x_branch: cot_x.backprop(online, &emb)?,
        xp_branch: cot_xp.backprop(online, &emb)?,
    })
}

/// Total spectral gradient.
pub fn spectral_gradient(online: &EmbeddingModel, features: &FeatureTable, batch: &Batch) -> Result<GradientBuffer> {
    Ok(spectral_loss_and_grad(online, features, batch)?.total())
}

/// Rows `√p(x_i)·φ(x_i)` for every support point.
pub fn scaled_embedding_table(model: &EmbeddingModel, features: &FeatureTable, marginal: &[f64]) -> Result<Matrix> {
    if marginal.len() > features.len() {
        return Err(Error::dim("marginal longer than feature table"));
    }
    let mut f = Matrix::zeros(marginal.len(), model.embedding_dim());
    for (i, &p) in marginal.iter().enumerate() {
        let e = model.embed(features.get(i))?;
        for (dst, v) in f.row_mut(i).iter_mut().zip(e) {
            *dst = p.sqrt() * v;
        }
    }
    Ok(f)
}

/// `‖M − F·F′ᵀ‖²_F` with `F` stacking `√p(x_i)·φ(x_i)` and `F′` the same for `x′`.
pub fn matrix_factorization_residual(
    joint: &JointDistribution,
    model: &EmbeddingModel,
    features: &FeatureTable,
) -> Result<f64> {
    let m = crate::dataset::build_m_matrix(joint);
    let f = scaled_embedding_table(model, features, joint.marginal_x())?;
    let fp = scaled_embedding_table(model, features, joint.marginal_xp())?;
    let approx = f.matmul(&fp.transpose())?;
    let r = m.sub(&approx)?.frobenius_norm();
    Ok(r * r)
}

/// The non-contrastive summary matrix `Λ` and its EMA rate `β`.
#[derive(Clone, Debug, PartialEq)]
pub struct AuxiliaryState {
    pub lambda: Matrix,
    pub beta: f64,
}

impl AuxiliaryState {
    /// `Λ₀ = 0`.
    pub fn new(dim: usize, beta: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&beta) {
            return Err(Error::Domain(format!("beta {beta} outside [0, 1)")));
        }
        Ok(Self { lambda: Matrix::zeros(dim, dim), beta })
    }

    pub fn dim(&self) -> usize {
        self.lambda.rows()
    }

    /// `Λ ← βΛ + (1 − β)·Σ w φφᵀ` with weights normalized to sum one.
    pub fn update_weighted(&mut self, embeddings: &[(&[f64], f64)]) -> Result<()> {
        if embeddings.is_empty() {
            return Err(Error::pre("Λ update needs a non-empty batch"));
        }
        let d = self.dim();
        if embeddings.iter().any(|(e, _)| e.len() != d) {
            return Err(Error::dim("embedding dimension differs from Λ"));
        }
        let total: f64 = embeddings.iter().map(|e| e.1).sum();
        let mut moment = Matrix::zeros(d, d);
        for (e, w) in embeddings {
            linalg::add_outer(&mut moment, w / total, e);
        }
        // keep Λ exactly symmetric
        for i in 0..d {
            for j in (i + 1)..d {
                moment[(j, i)] = moment[(i, j)];
            }
        }
        self.lambda = self.lambda.scale(self.beta).add(&moment.scale(1.0 - self.beta))?;
        Ok(())
    }

    /// Uniform-weight form of [`Self::update_weighted`].
    pub fn update(&mut self, embeddings: &[Vec<f64>]) -> Result<()> {
        let w: Vec<(&[f64], f64)> = embeddings.iter().map(|e| (e.as_slice(), 1.0)).collect();
        self.update_weighted(&w)
    }
}

/// Functional form of [`AuxiliaryState::update`].
pub fn update_lambda(state: &AuxiliaryState, embeddings: &[Vec<f64>]) -> Result<AuxiliaryState> {
    let mut next = state.clone();
    next.update(embeddings)?;
    Ok(next)
}

/// Updates `Λ` from the target (or online) embeddings of a batch's anchors.
pub fn update_lambda_from_batch(
    state: &mut AuxiliaryState,
    model: &EmbeddingModel,
    features: &FeatureTable,
    batch: &Batch,
) -> Result<()> {
    let embs: Vec<(Vec<f64>, f64)> = batch
        .anchors
        .iter()
        .map(|&(x, w)| Ok((model.embed(features.get(x))?, w)))
        .collect::<Result<_>>()?;
    let view: Vec<(&[f64], f64)> = embs.iter().map(|(e, w)| (e.as_slice(), *w)).collect();
    state.update_weighted(&view)
}

/// MINC hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MincConfig {
    pub alpha: AlphaDivergence,
    pub inner_scale: f64,
    /// Apply the lower-triangular (Hebbian) mask to `Λ`.
    pub use_lt: bool,
    pub use_target: bool,
    pub beta: f64,
    pub gamma: f64,
    /// Learn `s` with its own momentum SGD (learning rate 0.1, momentum 0.9).
    pub learn_scale: bool,
}

impl Default for MincConfig {
    fn default() -> Self {
        Self {
            alpha: AlphaDivergence::chi_squared(),
            inner_scale: 1.0,
            use_lt: true,
            use_target: true,
            beta: 0.8,
            gamma: 0.996,
            learn_scale: false,
        }
    }
}

impl MincConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.inner_scale > 0.0 && self.inner_scale.is_finite()) {
            return Err(Error::Domain(format!("inner scale must be > 0, got {}", self.inner_scale)));
        }
        for (name, v) in [("beta", self.beta), ("gamma", self.gamma)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Domain(format!("{name} = {v} outside [0, 1)")));
            }
        }
        Ok(())
    }

    /// `LT[Λ]` or `Λ` depending on [`Self::use_lt`].
    pub fn quadratic_matrix(&self, lambda: &Matrix) -> Result<Matrix> {
        if self.use_lt {
            lower_triangular(lambda)
        } else {
            Ok(lambda.clone())
        }
    }
}

/// Output of [`minc_loss_and_grad`].
#[derive(Clone, Debug)]
pub struct MincOutput {
    pub loss: f64,
    pub grads: GradientBuffer,
    /// `∂loss/∂s`, used only in learnable-scale mode.
    pub scale_grad: f64,
}

/// MINC loss and its parameter update direction for the online encoder.
///
/// When `cfg.use_target` is false the `x` branch reuses the online encoder,
/// still without gradient.
pub fn minc_loss_and_grad(
    cfg: &MincConfig,
    online: &EmbeddingModel,
    target: &EmbeddingModel,
    state: &AuxiliaryState,
    features: &FeatureTable,
    batch: &Batch,
) -> Result<MincOutput> {
    let (loss, scale_grad, cot, emb) = minc_pieces(cfg, online, target, state, features, batch)?;
    Ok(MincOutput { loss, grads: cot.backprop(online, &emb)?, scale_grad })
}

#[allow(clippy::type_complexity)]
fn minc_pieces(
    cfg: &MincConfig,
    online: &EmbeddingModel,
    target: &EmbeddingModel,
    state: &AuxiliaryState,
    features: &FeatureTable,
    batch: &Batch,
) -> Result<(f64, f64, Cotangents, Embeddings)> {
    check_support(batch, features)?;
    let d = online.embedding_dim();
    if state.dim() != d {
        return Err(Error::dim(format!("Λ is {}x{}, embeddings have dimension {d}", state.dim(), state.dim())));
    }
    let x_model = if cfg.use_target { target } else { online };
    if x_model.sizes() != online.sizes() {
        return Err(Error::dim("target architecture differs from online"));
    }
    let s = cfg.inner_scale;
    let quad = cfg.quadratic_matrix(&state.lambda)?;
    let xp_idx = batch.pairs.iter().map(|p| p.1).chain(batch.views.iter().map(|v| v.0));
    let emb = Embeddings::compute(online, features, xp_idx)?;
    let tgt = Embeddings::compute(x_model, features, batch.pairs.iter().map(|p| p.0))?;
    let mut cot = Cotangents::new(features.len(), d);

    let wj: f64 = batch.pairs.iter().map(|p| p.2).sum();
    let mut loss = 0.0;
    let mut scale_grad = 0.0;
    for &(x, xp, w) in &batch.pairs {
        let w = w / wj;
        let (a, b) = (tgt.get(x), emb.get(xp));
        let u = linalg::dot(a, b);
        loss -= w * cfg.alpha.t(s * u);
        let dt = cfg.alpha.t_prime(s * u);
        scale_grad -= w * dt * u;
        cot.add(xp, -w * dt * s, a);
    }
    let wv: f64 = batch.views.iter().map(|v| v.1).sum();
    if wv > 0.0 {
        for &(xp, w) in &batch.views {
            let w = w / wv;
            let b = emb.get(xp);
            let lb = quad.mat_vec(b)?;
            let q = linalg::dot(b, &lb);
            loss += 0.5 * w * s * s * q;
            scale_grad += w * s * q;
            cot.add(xp, w * s * s, &lb);
        }
    }
    Ok((loss, scale_grad, cot, emb))
}

/// Scalar whose true gradient in `online` (evaluated at `online == frozen`)
/// equals the MINC update direction:
/// `−E[t_α(s·φ_tgt(x)ᵀφ(x′))] + E[s²·φ(x′)ᵀ M sg(φ_frozen(x′))]`
/// with `M = LT[Λ]` or `Λ`. Used to finite-difference the Hebbian semi-gradient.
pub fn minc_semi_gradient_surrogate(
    cfg: &MincConfig,
    online: &EmbeddingModel,
    frozen: &EmbeddingModel,
    target: &EmbeddingModel,
    state: &AuxiliaryState,
    features: &FeatureTable,
    batch: &Batch,
) -> Result<f64> {
    check_support(batch, features)?;
    let x_model = if cfg.use_target { target } else { frozen };
    let s = cfg.inner_scale;
    let quad = cfg.quadratic_matrix(&state.lambda)?;
    let wj: f64 = batch.pairs.iter().map(|p| p.2).sum();
    let wv: f64 = batch.views.iter().map(|v| v.1).sum();
    let mut value = 0.0;
    for &(x, xp, w) in &batch.pairs {
        let a = x_model.embed(features.get(x))?;
        let b = online.embed(features.get(xp))?;
        value -= w / wj * cfg.alpha.t(s * linalg::dot(&a, &b));
    }
    for &(xp, w) in &batch.views {
        let b = online.embed(features.get(xp))?;
        let fixed = frozen.embed(features.get(xp))?;
        value += w / wv * s * s * linalg::dot(&b, &quad.mat_vec(&fixed)?);
    }
    Ok(value)
}

/// Momentum SGD on the inner scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleOptimizer {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: f64,
}

impl Default for ScaleOptimizer {
    fn default() -> Self {
        Self { learning_rate: 0.1, momentum: 0.9, velocity: 0.0 }
    }
}

impl ScaleOptimizer {
    pub fn step(&mut self, scale: f64, grad: f64) -> f64 {
        self.velocity = self.momentum * self.velocity + grad;
        (scale - self.learning_rate * self.velocity).max(MIN_INNER_SCALE)
    }
}

/// `L₂`-matching loss and its gradient through `φ(x′)`.
pub fn l2_metric_loss_and_grad(
    online: &EmbeddingModel,
    target: &EmbeddingModel,
    use_target: bool,
    state: &AuxiliaryState,
    features: &FeatureTable,
    batch: &Batch,
) -> Result<(f64, GradientBuffer)> {
    check_support(batch, features)?;
    let d = online.embedding_dim();
    if state.dim() != d {
        return Err(Error::dim("Λ dimension differs from embedding dimension"));
    }
    let x_model = if use_target { target } else { online };
    let lam = &state.lambda;
    let lam_t = lam.transpose();
    let ltl = lam.t_matmul(lam)?;
    let emb = Embeddings::compute(online, features, batch.pairs.iter().map(|p| p.1).chain(batch.views.iter().map(|v| v.0)))?;
    let tgt = Embeddings::compute(x_model, features, batch.pairs.iter().map(|p| p.0))?;
    let mut cot = Cotangents::new(features.len(), d);
    let wj: f64 = batch.pairs.iter().map(|p| p.2).sum();
    let wv: f64 = batch.views.iter().map(|v| v.1).sum();
    let mut loss = 0.0;
    for &(x, xp, w) in &batch.pairs {
        let w = w / wj;
        let lt_a = lam_t.mat_vec(tgt.get(x))?;
        loss -= 2.0 * w * linalg::dot(&lt_a, emb.get(xp));
        cot.add(xp, -2.0 * w, &lt_a);
    }
    for &(xp, w) in &batch.views {
        let w = w / wv;
        let b = emb.get(xp);
        let qb = ltl.mat_vec(b)?;
        loss += w * linalg::dot(b, &qb);
        cot.add(xp, 2.0 * w, &qb);
    }
    Ok((loss, cot.backprop(online, &emb)?))
}

/// Loss value of [`l2_metric_loss_and_grad`].
pub fn l2_metric_loss(
    online: &EmbeddingModel,
    target: &EmbeddingModel,
    state: &AuxiliaryState,
    features: &FeatureTable,
    batch: &Batch,
) -> Result<f64> {
    Ok(l2_metric_loss_and_grad(online, target, true, state, features, batch)?.0)
}

/// Embeddings of the predictor objective: target `x` rows and online `x′` rows.
struct PredictorPairs {
    targets: Vec<Vec<f64>>,
    inputs: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

fn predictor_pairs(
    online: &EmbeddingModel,
    target: &EmbeddingModel,
    features: &FeatureTable,
    batch: &Batch,
) -> Result<PredictorPairs> {
    check_support(batch, features)?;
    let total: f64 = batch.pairs.iter().map(|p| p.2).sum();
    let mut out = PredictorPairs { targets: Vec::new(), inputs: Vec::new(), weights: Vec::new() };
    for &(x, xp, w) in &batch.pairs {
        out.targets.push(target.embed(features.get(x))?);
        out.inputs.push(online.embed(features.get(xp))?);
        out.weights.push(w / total);
    }
    Ok(out)
}

fn check_predictor(a: &Matrix, d: usize) -> Result<()> {
    if a.shape() != (d, d) {
        return Err(Error::dim(format!("predictor is {}x{}, expected {d}x{d}", a.rows(), a.cols())));
    }
    Ok(())
}

/// `E‖A·φ(x′) − φ_tgt(x)‖²`.
pub fn linear_byol_loss(
    a: &Matrix,
    online: &EmbeddingModel,
    target: &EmbeddingModel,
    features: &FeatureTable,
    batch: &Batch,
) -> Result<f64> {
    check_predictor(a, online.embedding_dim())?;
    let p = predictor_pairs(online, target, features, batch)?;
    let mut loss = 0.0;
    for ((t, x), w) in p.targets.iter().zip(&p.inputs).zip(&p.weights) {
        let r: Vec<f64> = a.mat_vec(x)?.iter().zip(t).map(|(ax, ti)| ax - ti).collect();
        loss += w * linalg::dot(&r, &r);
    }
    Ok(loss)
}

/// `∂/∂A E‖A·φ(x′) − φ_tgt(x)‖² = 2·E[(Aφ(x′) − φ_tgt(x))·φ(x′)ᵀ]`.
pub fn linear_byol_predictor_grad(
    a: &Matrix,
    online: &EmbeddingModel,
    target: &EmbeddingModel,
    features: &FeatureTable,
    batch: &Batch,
) -> Result<Matrix> {
    let d = online.embedding_dim();
    check_predictor(a, d)?;
    let p = predictor_pairs(online, target, features, batch)?;
    let mut g = Matrix::zeros(d, d);
    for ((t, x), w) in p.targets.iter().zip(&p.inputs).zip(&p.weights) {
        let r: Vec<f64> = a.mat_vec(x)?.iter().zip(t).map(|(ax, ti)| ax - ti).collect();
        for i in 0..d {
            linalg::axpy(2.0 * w * r[i], x, g.row_mut(i));
        }
    }
    Ok(g)
}

/// One gradient step on the predictor.
pub fn linear_byol_predictor_step(
    a: &Matrix,
    online: &EmbeddingModel,
    target: &EmbeddingModel,
    features: &FeatureTable,
    batch: &Batch,
    step: f64,
) -> Result<Matrix> {
    let g = linear_byol_predictor_grad(a, online, target, features, batch)?;
    a.sub(&g.scale(step))
}

/// Encoder gradient of the predictor objective, through `φ(x′)` only.
pub fn linear_byol_encoder_grad(
    a: &Matrix,
    online: &EmbeddingModel,
    target: &EmbeddingModel,
    features: &FeatureTable,
    batch: &Batch,
) -> Result<(f64, GradientBuffer)> {
    let d = online.embedding_dim();
    check_predictor(a, d)?;
    let emb = Embeddings::compute(online, features, batch.pairs.iter().map(|p| p.1))?;
    let total: f64 = batch.pairs.iter().map(|p| p.2).sum();
    let mut cot = Cotangents::new(features.len(), d);
    let mut loss = 0.0;
    for &(x, xp, w) in &batch.pairs {
        let w = w / total;
        let t = target.embed(features.get(x))?;
        let r: Vec<f64> = a.mat_vec(emb.get(xp))?.iter().zip(&t).map(|(ax, ti)| ax - ti).collect();
        loss += w * linalg::dot(&r, &r);
        cot.add(xp, 2.0 * w, &a.t_mat_vec(&r)?);
    }
    Ok((loss, cot.backprop(online, &emb)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_block_graph, make_spectral_joint, BlockGraphParams};
    use crate::linalg::sym_eigen;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn block_data() -> (JointDistribution, FeatureTable) {
        make_block_graph(&BlockGraphParams {
            num_classes: 3,
            points_per_class: 3,
            intra_mass: 0.8,
            noise: 0.2,
            feature_dim: 5,
            seed: 3,
        })
        .unwrap()
    }

    fn random_state(d: usize, seed: u64) -> AuxiliaryState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vecs: Vec<Vec<f64>> = (0..2 * d).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let mut s = AuxiliaryState::new(d, 0.0).unwrap();
        s.update(&vecs).unwrap();
        s
    }

    fn fd_grad(model: &EmbeddingModel, f: impl Fn(&EmbeddingModel) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..model.num_params())
            .map(|k| {
                let mut p = model.clone();
                p.params_mut()[k] += h;
                let mut m = model.clone();
                m.params_mut()[k] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
        a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs() / scale))
    }

    #[test]
    fn spectral_loss_trivial_values() {
        let c = [0.6, 0.8];
        let pairs = [(&c[..], &c[..], 1.0), (&c[..], &c[..], 1.0)];
        assert!((spectral_contrastive_loss(&pairs, &pairs).unwrap() + 1.0).abs() < 1e-15);
        let z = [0.0, 0.0];
        let zp = [(&z[..], &z[..], 1.0)];
        assert_eq!(spectral_contrastive_loss(&zp, &zp).unwrap(), 0.0);
        assert!(spectral_contrastive_loss(&[], &zp).is_err());
    }

    #[test]
    fn minibatch_construction() {
        let b = Batch::from_pairs(&[(0, 1), (2, 3), (4, 5)]).unwrap();
        assert_eq!(b.negatives.len(), 6);
        assert!(b.negatives.iter().all(|&(x, y, _)| !(x == 0 && y == 1)));
        let s: f64 = b.negatives.iter().map(|n| n.2).sum();
        assert!((s - 1.0).abs() < 1e-15);
        assert!(Batch::from_pairs(&[]).is_err());
    }

    #[test]
    fn factorization_residual_of_zero_embedding_is_m_norm() {
        let (joint, features) = block_data();
        let zero = EmbeddingModel::from_params(&[5, 2], vec![0.0; 12], false).unwrap();
        let r = matrix_factorization_residual(&joint, &zero, &features).unwrap();
        let m = crate::dataset::build_m_matrix(&joint).frobenius_norm();
        assert!((r - m * m).abs() < 1e-12);
    }

    /// Features are one-hot support indicators, so a linear encoder can
    /// realize any embedding table exactly.
    fn tabular_model(table: &Matrix, normalize: bool) -> (EmbeddingModel, FeatureTable) {
        let n = table.rows();
        (EmbeddingModel::linear(&table.transpose(), normalize).unwrap(), FeatureTable::new(Matrix::identity(n)))
    }

    #[test]
    fn factorization_residual_at_eigen_factors() {
        let joint = make_spectral_joint(8, &[0.7, 0.5, 0.2, 0.1], 1).unwrap();
        let m = crate::dataset::build_m_matrix(&joint);
        let e = sym_eigen(&m).unwrap();
        let d = 3;
        // φ(x_i) = V_i·diag(√λ) / √p_i
        let inv_sqrt_p: Vec<f64> = joint.marginal_x().iter().map(|p| 1.0 / p.sqrt()).collect();
        let sqrt_l: Vec<f64> = e.eigenvalues[..d].iter().map(|l| l.sqrt()).collect();
        let table = e.top(d).scale_cols(&sqrt_l).scale_rows(&inv_sqrt_p);
        let (model, features) = tabular_model(&table, false);
        let r = matrix_factorization_residual(&joint, &model, &features).unwrap();
        let discarded: f64 = e.eigenvalues[d..].iter().map(|l| l * l).sum();
        assert!((r - discarded).abs() < 1e-10, "{r} vs {discarded}");
    }

    #[test]
    fn exhaustive_spectral_loss_matches_factorization_identity() {
        for seed in 0..3 {
            let joint = make_spectral_joint(9, &[0.8, 0.4, 0.3], seed).unwrap();
            let features = FeatureTable::new(Matrix::identity(9));
            let model = EmbeddingModel::new(&[9, 6, 4], true, seed).unwrap();
            let batch = Batch::exhaustive(&joint);
            let sc = spectral_loss_and_grad(&model, &features, &batch).unwrap().loss;
            let r = matrix_factorization_residual(&joint, &model, &features).unwrap();
            let m = crate::dataset::build_m_matrix(&joint).frobenius_norm();
            assert!((sc + m * m - r).abs() < 1e-8);
        }
    }

    #[test]
    fn spectral_gradient_matches_finite_differences() {
        let (joint, features) = block_data();
        let model = EmbeddingModel::new(&[5, 7, 3], true, 2).unwrap();
        for batch in [Batch::exhaustive(&joint), Batch::from_pairs(&crate::dataset::sample_pairs(&joint, 6, 1).unwrap()).unwrap()] {
            let g = spectral_gradient(&model, &features, &batch).unwrap();
            let fd = fd_grad(&model, |m| spectral_loss_and_grad(m, &features, &batch).unwrap().loss);
            assert!(rel_err(&g.0, &fd) <= 1e-4);
        }
    }

    #[test]
    fn spectral_gradient_at_zero_embeddings() {
        // zero weights, bias b: all embeddings equal b, tiny
        let (joint, features) = block_data();
        let model = EmbeddingModel::from_params(&[5, 2], vec![0.0; 12], false).unwrap();
        let sg = spectral_loss_and_grad(&model, &features, &Batch::exhaustive(&joint)).unwrap();
        assert_eq!(sg.loss, 0.0);
        // with φ ≡ 0 both terms have zero gradient; move slightly off zero
        let mut params = vec![0.0; 12];
        params[10] = 1e-3;
        let model = EmbeddingModel::from_params(&[5, 2], params, false).unwrap();
        let sg = spectral_loss_and_grad(&model, &features, &Batch::exhaustive(&joint)).unwrap();
        let g = sg.total();
        // d loss / d bias_0 = −4·b + O(b³): the attraction term dominates
        assert!(g.0[10] < 0.0 && (g.0[10] + 4e-3).abs() < 1e-8, "{}", g.0[10]);
    }

    #[test]
    fn lambda_update_cases() {
        let e = vec![vec![1.0, 2.0], vec![0.0, -1.0]];
        let s0 = AuxiliaryState::new(2, 0.0).unwrap();
        let s1 = update_lambda(&s0, &e).unwrap();
        let moment = Matrix::from_rows(&[[0.5, 1.0], [1.0, 2.5]]).unwrap();
        assert_eq!(s1.lambda, moment);
        let s = AuxiliaryState::new(2, 0.8).unwrap();
        let s2 = update_lambda(&s, &e).unwrap();
        assert!(s2.lambda.sub(&moment.scale(0.2)).unwrap().max_abs() < 1e-15);
        assert!(update_lambda(&s, &[]).is_err());
        assert!(update_lambda(&s, &[vec![1.0]]).is_err());
        assert!(AuxiliaryState::new(2, 1.0).is_err());
    }

    #[test]
    fn lambda_converges_geometrically() {
        let e = vec![vec![0.3, -0.4, 1.0], vec![1.0, 0.2, 0.0]];
        let beta = 0.7;
        let mut s = AuxiliaryState::new(3, beta).unwrap();
        let target = update_lambda(&AuxiliaryState::new(3, 0.0).unwrap(), &e).unwrap().lambda;
        for k in 1..=30 {
            s.update(&e).unwrap();
            // Λ_k = (1 − β^k)·S exactly
            let err = s.lambda.sub(&target).unwrap().frobenius_norm();
            let expect = beta.powi(k) * target.frobenius_norm();
            assert!((err - expect).abs() <= 1e-12 * (1.0 + expect));
        }
    }

    #[test]
    fn minc_lt_irrelevant_for_diagonal_lambda() {
        let (joint, features) = block_data();
        let online = EmbeddingModel::new(&[5, 6, 3], true, 1).unwrap();
        let target = EmbeddingModel::new(&[5, 6, 3], true, 2).unwrap();
        let state = AuxiliaryState { lambda: Matrix::from_diag(&[0.5, 0.2, 0.1]), beta: 0.8 };
        let batch = Batch::exhaustive(&joint);
        let on = MincConfig { use_lt: true, ..MincConfig::default() };
        let off = MincConfig { use_lt: false, ..MincConfig::default() };
        let a = minc_loss_and_grad(&on, &online, &target, &state, &features, &batch).unwrap();
        let b = minc_loss_and_grad(&off, &online, &target, &state, &features, &batch).unwrap();
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.grads, b.grads);
    }

    #[test]
    fn minc_chi_squared_is_half_spectral_plus_one_with_diagonal_moment() {
        // linear encoder on features whose p-weighted Gram is diagonal
        let joint = make_spectral_joint(6, &[0.6, 0.3], 4).unwrap();
        let e = sym_eigen(&crate::dataset::build_m_matrix(&joint)).unwrap();
        let inv_sqrt_p: Vec<f64> = joint.marginal_x().iter().map(|p| 1.0 / p.sqrt()).collect();
        let table = e.top(3).scale_cols(&[0.9, 0.5, 0.7]).scale_rows(&inv_sqrt_p);
        let (model, features) = tabular_model(&table, false);
        let batch = Batch::exhaustive(&joint);
        let mut state = AuxiliaryState::new(3, 0.0).unwrap();
        update_lambda_from_batch(&mut state, &model, &features, &batch).unwrap();
        let off = state.lambda.sub(&Matrix::from_diag(&state.lambda.diagonal())).unwrap().max_abs();
        assert!(off < 1e-12);
        let cfg = MincConfig { use_target: false, ..MincConfig::default() };
        let minc = minc_loss_and_grad(&cfg, &model, &model, &state, &features, &batch).unwrap().loss;
        let sc = spectral_loss_and_grad(&model, &features, &batch).unwrap().loss;
        assert!((minc - (0.5 * sc + 1.0)).abs() < 1e-10);
    }

    #[test]
    fn minc_gradient_matches_finite_differences() {
        let (joint, features) = block_data();
        let pairs = crate::dataset::sample_pairs(&joint, 8, 3).unwrap();
        let batch = Batch::from_pairs(&pairs).unwrap();
        for (k, alpha) in [1.5, 2.0, 2.5].into_iter().enumerate() {
            for use_lt in [false, true] {
                let online = EmbeddingModel::new(&[5, 6, 3], true, 10 + k as u64).unwrap();
                let target = EmbeddingModel::new(&[5, 6, 3], true, 20 + k as u64).unwrap();
                let state = random_state(3, k as u64);
                let cfg = MincConfig {
                    alpha: AlphaDivergence::new(alpha).unwrap(),
                    inner_scale: 2.0,
                    use_lt,
                    ..MincConfig::default()
                };
                let g = minc_loss_and_grad(&cfg, &online, &target, &state, &features, &batch).unwrap().grads;
                let fd = fd_grad(&online, |m| {
                    minc_semi_gradient_surrogate(&cfg, m, &online, &target, &state, &features, &batch).unwrap()
                });
                assert!(rel_err(&g.0, &fd) <= 1e-4, "alpha {alpha} lt {use_lt}");
                if !use_lt {
                    // the semi-gradient is the true gradient of the loss value
                    let fd_loss = fd_grad(&online, |m| {
                        minc_loss_and_grad(&cfg, m, &target, &state, &features, &batch).unwrap().loss
                    });
                    assert!(rel_err(&g.0, &fd_loss) <= 1e-4);
                }
            }
        }
    }

    #[test]
    fn minc_scale_gradient_matches_finite_differences() {
        let (joint, features) = block_data();
        let batch = Batch::exhaustive(&joint);
        let online = EmbeddingModel::new(&[5, 4, 3], true, 1).unwrap();
        let target = EmbeddingModel::new(&[5, 4, 3], true, 2).unwrap();
        let state = random_state(3, 9);
        let cfg = MincConfig { alpha: AlphaDivergence::new(1.5).unwrap(), inner_scale: 1.7, use_lt: false, ..Default::default() };
        let out = minc_loss_and_grad(&cfg, &online, &target, &state, &features, &batch).unwrap();
        let h = 1e-6;
        let at = |s: f64| {
            let c = MincConfig { inner_scale: s, ..cfg.clone() };
            minc_loss_and_grad(&c, &online, &target, &state, &features, &batch).unwrap().loss
        };
        let fd = (at(1.7 + h) - at(1.7 - h)) / (2.0 * h);
        assert!((fd - out.scale_grad).abs() < 1e-6 * (1.0 + fd.abs()));
    }

    #[test]
    fn minc_gradient_ignores_target_parameters() {
        let (joint, features) = block_data();
        let batch = Batch::exhaustive(&joint);
        let online = EmbeddingModel::new(&[5, 6, 3], true, 1).unwrap();
        let target = EmbeddingModel::new(&[5, 6, 3], true, 2).unwrap();
        let mut moved = target.clone();
        moved.params_mut()[3] += 0.5;
        let state = random_state(3, 1);
        let cfg = MincConfig::default();
        let a = minc_loss_and_grad(&cfg, &online, &target, &state, &features, &batch).unwrap();
        let b = minc_loss_and_grad(&cfg, &online, &moved, &state, &features, &batch).unwrap();
        assert_ne!(a.loss, b.loss);
        // only the pair-term cotangent depends on the target embeddings
        let fd = fd_grad(&moved, |t| minc_loss_and_grad(&cfg, &online, t, &state, &features, &batch).unwrap().loss);
        assert!(fd.iter().any(|v| v.abs() > 1e-6));
        let cfg_no_target = MincConfig { use_target: false, ..cfg };
        let c = minc_loss_and_grad(&cfg_no_target, &online, &target, &state, &features, &batch).unwrap();
        let d = minc_loss_and_grad(&cfg_no_target, &online, &moved, &state, &features, &batch).unwrap();
        assert_eq!(c.grads, d.grads);
        assert_eq!(c.loss, d.loss);
    }

    /// φ ≡ c on the unit sphere, Λ = ccᵀ: without the mask the update
    /// vanishes, with the mask it does not.
    #[test]
    fn collapsed_state_is_stationary_only_without_mask() {
        let (joint, features) = block_data();
        let c = [0.6, 0.0, 0.8];
        let mut params = vec![0.0; 5 * 3];
        params.extend_from_slice(&c);
        let model = EmbeddingModel::from_params(&[5, 3], params, true).unwrap();
        let mut state = AuxiliaryState::new(3, 0.0).unwrap();
        state.update(&[c.to_vec()]).unwrap();
        let batch = Batch::exhaustive(&joint);
        let with_lt = MincConfig { use_target: false, ..MincConfig::default() };
        let without = MincConfig { use_lt: false, ..with_lt.clone() };
        let g_on = minc_loss_and_grad(&with_lt, &model, &model, &state, &features, &batch).unwrap().grads;
        let g_off = minc_loss_and_grad(&without, &model, &model, &state, &features, &batch).unwrap().grads;
        assert!(g_on.norm() > 1e-6, "{}", g_on.norm());
        assert!(g_off.norm() < 1e-10, "{}", g_off.norm());
    }

    #[test]
    fn minc_rejects_mismatched_state() {
        let (joint, features) = block_data();
        let m = EmbeddingModel::new(&[5, 3], true, 0).unwrap();
        let s = AuxiliaryState::new(2, 0.5).unwrap();
        let batch = Batch::exhaustive(&joint);
        assert!(matches!(
            minc_loss_and_grad(&MincConfig::default(), &m, &m, &s, &features, &batch),
            Err(Error::Dimension(_))
        ));
        let empty = Batch { pairs: vec![], negatives: vec![], anchors: vec![], views: vec![] };
        let s3 = AuxiliaryState::new(3, 0.5).unwrap();
        assert!(minc_loss_and_grad(&MincConfig::default(), &m, &m, &s3, &features, &empty).is_err());
    }

    #[test]
    fn gradient_equivalence_with_spectral_on_diagonal_state() {
        let joint = make_spectral_joint(7, &[0.7, 0.4, 0.2], 2).unwrap();
        let e = sym_eigen(&crate::dataset::build_m_matrix(&joint)).unwrap();
        let inv_sqrt_p: Vec<f64> = joint.marginal_x().iter().map(|p| 1.0 / p.sqrt()).collect();
        let table = e.top(3).scale_cols(&[1.1, 0.6, 0.4]).scale_rows(&inv_sqrt_p);
        let (model, features) = tabular_model(&table, false);
        let batch = Batch::exhaustive(&joint);
        let mut state = AuxiliaryState::new(3, 0.0).unwrap();
        update_lambda_from_batch(&mut state, &model, &features, &batch).unwrap();
        let cfg = MincConfig { use_target: false, ..MincConfig::default() };
        let minc = minc_loss_and_grad(&cfg, &model, &model, &state, &features, &batch).unwrap().grads;
        let sc = spectral_loss_and_grad(&model, &features, &batch).unwrap();
        let half = sc.xp_branch.scaled(0.5);
        assert!(minc.max_abs_diff(&half) < 1e-8);
    }

    #[test]
    fn l2_metric_identity_reduces_to_mahalanobis_form() {
        let (joint, features) = block_data();
        let batch = Batch::exhaustive(&joint);
        let online = EmbeddingModel::new(&[5, 6, 3], true, 4).unwrap();
        let target = EmbeddingModel::new(&[5, 6, 3], true, 5).unwrap();
        let id = AuxiliaryState { lambda: Matrix::identity(3), beta: 0.0 };
        let l2 = l2_metric_loss(&online, &target, &id, &features, &batch).unwrap();
        // Mahalanobis form with Λ = I at α = 2, s = 1: −2E[φ_tᵀφ′] + E[φ′ᵀφ′]
        let cfg = MincConfig { use_lt: false, ..MincConfig::default() };
        let minc = minc_loss_and_grad(&cfg, &online, &target, &id, &features, &batch).unwrap().loss;
        // minc = −E[u − 1] + ½E[φ′ᵀφ′], so l2 = 2·(minc − 1)
        assert!((l2 - 2.0 * (minc - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn l2_metric_condition_number_is_squared() {
        let lam = Matrix::from_diag(&[2.0, 0.5, 1.0]);
        // Hessians in φ(x′): 2ΛᵀΛ for L₂, s²·Λ for the Mahalanobis form
        let h_l2 = sym_eigen(&lam.t_matmul(&lam).unwrap().scale(2.0)).unwrap().eigenvalues;
        let h_m = sym_eigen(&lam).unwrap().eigenvalues;
        let cond = |v: &[f64]| v[0] / v[v.len() - 1];
        assert!((cond(&h_l2) - 16.0).abs() < 1e-12);
        assert!((cond(&h_m) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn l2_metric_gradient_matches_finite_differences() {
        let (joint, features) = block_data();
        let batch = Batch::from_pairs(&crate::dataset::sample_pairs(&joint, 7, 2).unwrap()).unwrap();
        let online = EmbeddingModel::new(&[5, 6, 3], true, 4).unwrap();
        let target = EmbeddingModel::new(&[5, 6, 3], true, 5).unwrap();
        let mut state = random_state(3, 3);
        state.lambda[(0, 2)] += 0.3; // not symmetric on purpose
        let (_, g) = l2_metric_loss_and_grad(&online, &target, true, &state, &features, &batch).unwrap();
        let fd = fd_grad(&online, |m| l2_metric_loss_and_grad(m, &target, true, &state, &features, &batch).unwrap().0);
        assert!(rel_err(&g.0, &fd) <= 1e-4);
    }

    #[test]
    fn l2_metric_without_target_stops_gradient_through_anchor_branch() {
        let (joint, features) = block_data();
        let batch = Batch::from_pairs(&crate::dataset::sample_pairs(&joint, 6, 4).unwrap()).unwrap();
        let online = EmbeddingModel::new(&[5, 6, 3], false, 8).unwrap();
        let other = EmbeddingModel::new(&[5, 6, 3], false, 9).unwrap();
        let state = random_state(3, 5);
        let plain = l2_metric_loss_and_grad(&online, &other, false, &state, &features, &batch).unwrap();
        let frozen = l2_metric_loss_and_grad(&online, &online, true, &state, &features, &batch).unwrap();
        assert_eq!(plain.0, frozen.0);
        assert_eq!(plain.1, frozen.1);
    }

    #[test]
    fn byol_fixed_point_and_closed_form() {
        let (joint, features) = block_data();
        let batch = Batch::exhaustive(&joint);
        let online = EmbeddingModel::new(&[5, 6, 3], true, 4).unwrap();
        // φ(x′) = φ_tgt(x) on symmetric-identity pairs with A = I
        let diag = Batch { pairs: (0..9).map(|i| (i, i, 1.0 / 9.0)).collect(), negatives: vec![], anchors: vec![], views: vec![] };
        let g = linear_byol_predictor_grad(&Matrix::identity(3), &online, &online, &features, &diag).unwrap();
        assert_eq!(g.max_abs(), 0.0);

        let target = EmbeddingModel::new(&[5, 6, 3], true, 7).unwrap();
        // A* = E[φ_t φ′ᵀ]·E[φ′φ′ᵀ]⁻¹
        let mut cross = Matrix::zeros(3, 3);
        let mut second = Matrix::zeros(3, 3);
        for &(x, xp, w) in &batch.pairs {
            let t = target.embed(features.get(x)).unwrap();
            let b = online.embed(features.get(xp)).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    cross[(i, j)] += w * t[i] * b[j];
                    second[(i, j)] += w * b[i] * b[j];
                }
            }
        }
        let (inv, rank) = linalg::sym_pinv(&second, 1e-14).unwrap();
        assert_eq!(rank, 3);
        let a_star = cross.matmul(&inv).unwrap();
        let g = linear_byol_predictor_grad(&a_star, &online, &target, &features, &batch).unwrap();
        assert!(g.max_abs() < 1e-8, "{}", g.max_abs());
        let stepped = linear_byol_predictor_step(&a_star, &online, &target, &features, &batch, 0.5).unwrap();
        assert!(stepped.sub(&a_star).unwrap().max_abs() < 1e-8);
    }

    #[test]
    fn byol_gradients_match_finite_differences() {
        let (joint, features) = block_data();
        let batch = Batch::from_pairs(&crate::dataset::sample_pairs(&joint, 5, 8).unwrap()).unwrap();
        let online = EmbeddingModel::new(&[5, 6, 3], true, 4).unwrap();
        let target = EmbeddingModel::new(&[5, 6, 3], true, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Matrix::new(3, 3, (0..9).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let g = linear_byol_predictor_grad(&a, &online, &target, &features, &batch).unwrap();
        let h = 1e-6;
        for k in 0..9 {
            let mut ap = a.clone();
            ap.as_mut_slice()[k] += h;
            let mut am = a.clone();
            am.as_mut_slice()[k] -= h;
            let fd = (linear_byol_loss(&ap, &online, &target, &features, &batch).unwrap()
                - linear_byol_loss(&am, &online, &target, &features, &batch).unwrap())
                / (2.0 * h);
            assert!((fd - g.as_slice()[k]).abs() <= 1e-4 * (1.0 + fd.abs()));
        }
        let (_, ge) = linear_byol_encoder_grad(&a, &online, &target, &features, &batch).unwrap();
        let fd = fd_grad(&online, |m| linear_byol_loss(&a, m, &target, &features, &batch).unwrap());
        assert!(rel_err(&ge.0, &fd) <= 1e-4);
        assert!(linear_byol_predictor_grad(&Matrix::identity(2), &online, &target, &features, &batch).is_err());
    }

    #[test]
    fn scale_optimizer_stays_positive() {
        let mut opt = ScaleOptimizer::default();
        let mut s = 1.0;
        for _ in 0..100 {
            s = opt.step(s, 10.0);
        }
        assert_eq!(s, MIN_INNER_SCALE);
    }
}
