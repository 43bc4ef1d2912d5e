//! Representation diagnostics: linear probe, subspace alignment against the
//! eigen-oracle, collapse statistics and repulsive-term estimator variance.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{build_m_matrix, sample_pairs, FeatureTable, JointDistribution};
use crate::encoder::EmbeddingModel;
use crate::error::{Error, Result};
use crate::linalg::{self, sym_eigen, Matrix};
use crate::power::{embedding_table, max_angle_to_top_space};

pub const PROBE_GRAD_TOL: f64 = 1e-6;
pub const PROBE_MAX_ITERS: usize = 10_000;

/// Accuracy of a linear classifier on frozen embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub holdout_accuracy: f64,
    pub num_classes: usize,
    pub iterations: usize,
}

/// Probe on `φ(x_i)` for every support point.
pub fn linear_probe(model: &EmbeddingModel, features: &FeatureTable, labels: &[usize], split_seed: u64) -> Result<ProbeResult> {
    let table = embedding_table(model, features, labels.len())?;
    probe_embeddings(&table, labels, split_seed)
}

/// Unregularized multinomial logistic regression on whitened embeddings.
///
/// Each class is split 80/20 (at least one holdout point per class) after a
/// seeded shuffle. Embeddings are centered and whitened with the training
/// covariance (pseudo-inverse square root), which makes the result invariant
/// to invertible affine maps of the embeddings. Full-batch gradient descent
/// from zero runs with step `1/L`, `L = ½·λ_max(ZᵀZ/n)`, until the gradient
/// norm reaches [`PROBE_GRAD_TOL`] or [`PROBE_MAX_ITERS`] iterations.
pub fn probe_embeddings(embeddings: &Matrix, labels: &[usize], split_seed: u64) -> Result<ProbeResult> {
    if embeddings.rows() != labels.len() {
        return Err(Error::dim(format!("{} embeddings, {} labels", embeddings.rows(), labels.len())));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    if k < 2 || by_class.iter().any(|c| c.len() < 4) {
        return Err(Error::pre("probe needs at least 2 classes with at least 4 points each"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed);
    let (mut train, mut holdout) = (Vec::new(), Vec::new());
    for members in &mut by_class {
        members.shuffle(&mut rng);
        let h = ((members.len() as f64 * 0.2).round() as usize).max(1);
        holdout.extend_from_slice(&members[..h]);
        train.extend_from_slice(&members[h..]);
    }

    let whiten = Whitening::fit(embeddings, &train)?;
    let design = |idx: &[usize]| -> Result<Matrix> {
        let rows: Vec<Vec<f64>> = idx.iter().map(|&i| whiten.apply(embeddings.row(i))).collect::<Result<_>>()?;
        Matrix::from_rows(&rows)
    };
    let z_train = design(&train)?;
    let z_hold = design(&holdout)?;
    let y_train: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    let y_hold: Vec<usize> = holdout.iter().map(|&i| labels[i]).collect();

    let (weights, iterations) = fit_softmax(&z_train, &y_train, k)?;
    Ok(ProbeResult {
        train_accuracy: accuracy(&weights, &z_train, &y_train)?,
        holdout_accuracy: accuracy(&weights, &z_hold, &y_hold)?,
        num_classes: k,
        iterations,
    })
}

/// Centering plus `C^{-1/2}` on the training rows; a trailing bias feature is appended.
struct Whitening {
    mean: Vec<f64>,
    transform: Matrix,
}

impl Whitening {
    fn fit(x: &Matrix, rows: &[usize]) -> Result<Self> {
        let d = x.cols();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for &i in rows {
            linalg::axpy(1.0 / n, x.row(i), &mut mean);
        }
        let mut cov = Matrix::zeros(d, d);
        for &i in rows {
            let c: Vec<f64> = x.row(i).iter().zip(&mean).map(|(a, m)| a - m).collect();
            linalg::add_outer(&mut cov, 1.0 / n, &c);
        }
        for i in 0..d {
            for j in 0..i {
                cov[(i, j)] = cov[(j, i)];
            }
        }
        let e = sym_eigen(&cov)?;
        let top = e.eigenvalues.first().copied().unwrap_or(0.0);
        let inv_root: Vec<f64> = e
            .eigenvalues
            .iter()
            .map(|&l| if top > 0.0 && l > 1e-12 * top { 1.0 / l.sqrt() } else { 0.0 })
            .collect();
        let v = &e.eigenvectors;
        let transform = v.scale_cols(&inv_root).matmul(&v.transpose())?;
        Ok(Self { mean, transform })
    }

    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let centered: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        let mut z = self.transform.mat_vec(&centered)?;
        z.push(1.0);
        Ok(z)
    }
}

fn logits(w: &Matrix, z: &[f64]) -> Vec<f64> {
    (0..w.rows()).map(|c| linalg::dot(w.row(c), z)).collect()
}

fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn accuracy(w: &Matrix, z: &Matrix, y: &[usize]) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::pre("empty evaluation split"));
    }
    let hits = (0..z.rows()).filter(|&i| argmax_first(&logits(w, z.row(i))) == y[i]).count();
    Ok(hits as f64 / y.len() as f64)
}

fn fit_softmax(z: &Matrix, y: &[usize], k: usize) -> Result<(Matrix, usize)> {
    let (n, p) = z.shape();
    let gram = z.t_matmul(z)?.scale(1.0 / n as f64);
    let lmax = sym_eigen(&gram)?.eigenvalues[0];
    let step = 1.0 / (0.5 * lmax);
    let mut w = Matrix::zeros(k, p);
    for it in 0..PROBE_MAX_ITERS {
        let mut grad = Matrix::zeros(k, p);
        for i in 0..n {
            let zi = z.row(i);
            let mut s = logits(&w, zi);
            let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            s.iter_mut().for_each(|v| *v = (*v - mx).exp());
            let total: f64 = s.iter().sum();
            for (c, sc) in s.iter().enumerate() {
                let r = sc / total - if c == y[i] { 1.0 } else { 0.0 };
                linalg::axpy(r / n as f64, zi, grad.row_mut(c));
            }
        }
        if grad.frobenius_norm() <= PROBE_GRAD_TOL {
            return Ok((w, it));
        }
        w = w.sub(&grad.scale(step))?;
    }
    Ok((w, PROBE_MAX_ITERS))
}

/// Largest principal angle between `span(diag(√p)·Φ)` and the top-`d_top`
/// eigenspace of `M`; `π/2` when the embedding span is too small.
pub fn subspace_alignment(
    model: &EmbeddingModel,
    features: &FeatureTable,
    joint: &JointDistribution,
    d_top: usize,
) -> Result<f64> {
    if d_top == 0 || d_top > model.embedding_dim() {
        return Err(Error::pre(format!("d_top = {d_top} must lie in 1..={}", model.embedding_dim())));
    }
    let table = embedding_table(model, features, joint.support_size_x())?;
    max_angle_to_top_space(&build_m_matrix(joint), joint.marginal_x(), &table, d_top)
}

/// Collapse statistics of a batch of embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseMetrics {
    /// Top eigenvalue of the uncentered second moment over its trace.
    pub rank_ratio: f64,
    pub mean_pairwise_cos: f64,
}

pub fn collapse_metrics(embeddings: &Matrix) -> Result<CollapseMetrics> {
    let (n, d) = embeddings.shape();
    if n < 2 {
        return Err(Error::pre("collapse metrics need at least 2 embeddings"));
    }
    let mut moment = Matrix::zeros(d, d);
    for i in 0..n {
        linalg::add_outer(&mut moment, 1.0 / n as f64, embeddings.row(i));
    }
    for i in 0..d {
        for j in 0..i {
            moment[(i, j)] = moment[(j, i)];
        }
    }
    let trace = moment.trace();
    let rank_ratio = if trace > 0.0 { sym_eigen(&moment)?.eigenvalues[0] / trace } else { 1.0 };

    let norms: Vec<f64> = (0..n).map(|i| linalg::norm(embeddings.row(i))).collect();
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            total += match (norms[i] > 0.0, norms[j] > 0.0) {
                (true, true) => linalg::dot(embeddings.row(i), embeddings.row(j)) / (norms[i] * norms[j]),
                (false, false) => 1.0,
                _ => 0.0,
            };
        }
    }
    Ok(CollapseMetrics { rank_ratio, mean_pairwise_cos: total / (n * (n - 1) / 2) as f64 })
}

/// Minibatch estimators of the repulsive term `E_{x∼p, x′∼p′}[(φ(x)ᵀφ(x′))²]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RepulsiveEstimator {
    /// Mean of `(φ(x_i)ᵀφ(x′_j))²` over the batch's cross pairs `i ≠ j`.
    Contrastive,
    /// Mean of `φ(x′_j)ᵀ·Λ·φ(x′_j)` with `Λ` the exact moment `E_p[φφᵀ]`,
    /// optionally lower-triangular masked.
    Minc { use_lt: bool },
}

/// Sample statistics over independent trials.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorStats {
    pub mean: f64,
    /// Unbiased sample variance.
    pub variance: f64,
    pub trials: usize,
}

impl EstimatorStats {
    pub fn standard_error(&self) -> f64 {
        (self.variance / self.trials as f64).sqrt()
    }
}

/// Empirical mean and variance of one estimator over `trials` seeded batches.
/// Trials run in parallel; trial `k` always uses the same seed, so the result
/// is independent of scheduling.
pub fn estimator_variance(
    joint: &JointDistribution,
    model: &EmbeddingModel,
    features: &FeatureTable,
    batch_size: usize,
    trials: usize,
    estimator: RepulsiveEstimator,
    seed: u64,
) -> Result<EstimatorStats> {
    if trials < 2 {
        return Err(Error::pre("need at least 2 trials"));
    }
    if batch_size < 2 {
        return Err(Error::pre("need batch size >= 2 for cross pairs"));
    }
    let n = joint.support_size_x().max(joint.support_size_xp());
    let table = embedding_table(model, features, n)?;
    let mut lambda = Matrix::zeros(table.cols(), table.cols());
    for (i, &p) in joint.marginal_x().iter().enumerate() {
        linalg::add_outer(&mut lambda, p, table.row(i));
    }
    for i in 0..lambda.rows() {
        for j in 0..i {
            lambda[(i, j)] = lambda[(j, i)];
        }
    }
    if let RepulsiveEstimator::Minc { use_lt: true } = estimator {
        lambda = linalg::lower_triangular(&lambda)?;
    }
    let estimates: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|trial| {
            let pairs = sample_pairs(joint, batch_size, trial_seed(seed, trial))?;
            Ok(match estimator {
                RepulsiveEstimator::Contrastive => {
                    let mut s = 0.0;
                    for (i, &(x, _)) in pairs.iter().enumerate() {
                        for (j, &(_, xp)) in pairs.iter().enumerate() {
                            if i != j {
                                s += linalg::dot(table.row(x), table.row(xp)).powi(2);
                            }
                        }
                    }
                    s / (batch_size * (batch_size - 1)) as f64
                }
                RepulsiveEstimator::Minc { .. } => {
                    let mut s = 0.0;
                    for &(_, xp) in &pairs {
                        let b = table.row(xp);
                        s += linalg::dot(b, &lambda.mat_vec(b)?);
                    }
                    s / batch_size as f64
                }
            })
        })
        .collect::<Result<_>>()?;
    // shifted by the first estimate so constant sequences give exactly zero
    let shift = estimates[0];
    let n = trials as f64;
    let sum: f64 = estimates.iter().map(|e| e - shift).sum();
    let sum_sq: f64 = estimates.iter().map(|e| (e - shift).powi(2)).sum();
    let mean = shift + sum / n;
    let variance = ((sum_sq - sum * sum / n) / (n - 1.0)).max(0.0);
    Ok(EstimatorStats { mean, variance, trials })
}

fn trial_seed(seed: u64, trial: usize) -> u64 {
    seed ^ (trial as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// `tr(Λ_p·Λ_p′)`, the value both repulsive estimators target.
pub fn repulsive_term_exact(joint: &JointDistribution, model: &EmbeddingModel, features: &FeatureTable) -> Result<f64> {
    let n = joint.support_size_x().max(joint.support_size_xp());
    let table = embedding_table(model, features, n)?;
    let d = table.cols();
    let (mut a, mut b) = (Matrix::zeros(d, d), Matrix::zeros(d, d));
    for (i, &p) in joint.marginal_x().iter().enumerate() {
        linalg::add_outer(&mut a, p, table.row(i));
    }
    for (i, &p) in joint.marginal_xp().iter().enumerate() {
        linalg::add_outer(&mut b, p, table.row(i));
    }
    Ok(a.t_matmul(&b)?.trace())
}
