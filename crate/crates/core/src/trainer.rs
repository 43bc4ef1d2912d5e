//! Minibatch training loop and ablation grid.
//!
//! Each step samples a batch from the joint, refreshes `Λ` from target
//! embeddings of the anchors, takes one momentum-SGD step on the online
//! encoder, then moves the target toward the online weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{FeatureTable, JointDistribution, PairSampler};
use crate::divergence::AlphaDivergence;
use crate::encoder::{EmbeddingModel, GradientBuffer};
use crate::error::{Error, Result};
use crate::linalg::{format_f64, Matrix};
use crate::objective::{
    l2_metric_loss_and_grad, linear_byol_encoder_grad, linear_byol_predictor_grad, minc_loss_and_grad,
    spectral_loss_and_grad, update_lambda_from_batch, AuxiliaryState, Batch, MincConfig, ScaleOptimizer,
};
use crate::power::{embedding_table, fixed_point_residuals_table, max_angle_to_top_space};
use crate::probe::collapse_metrics;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Minc,
    Spectral,
    L2Variant,
    LinearByol,
}

impl LossKind {
    /// Whether the run maintains `Λ`.
    pub fn uses_lambda(self) -> bool {
        matches!(self, LossKind::Minc | LossKind::L2Variant)
    }

    /// Whether the run maintains an EMA target encoder (given `use_target`).
    pub fn uses_target(self) -> bool {
        self != LossKind::Spectral
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub minc: MincConfig,
    pub loss_kind: LossKind,
    pub batch_size: usize,
    /// Use exact expectations over the joint instead of sampled batches.
    pub full_batch: bool,
    pub steps: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    pub eval_every: usize,
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub normalize: bool,
    /// Size of the eigenspace used for the principal-angle metric.
    pub align_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            minc: MincConfig::default(),
            loss_kind: LossKind::Minc,
            batch_size: 32,
            full_batch: false,
            steps: 5000,
            learning_rate: 0.05,
            momentum: 0.9,
            lr_schedule: LrSchedule::Constant,
            seed: 0,
            eval_every: 100,
            hidden: vec![32],
            embedding_dim: 8,
            normalize: true,
            align_dim: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.minc.validate()?;
        if self.steps == 0 {
            return Err(Error::pre("steps must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::pre("eval_every must be at least 1"));
        }
        if !self.full_batch && self.batch_size < 2 {
            return Err(Error::pre("batch_size must be at least 2"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Domain(format!("learning rate {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Domain(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if self.embedding_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::pre("layer sizes must be positive"));
        }
        if self.align_dim == 0 || self.align_dim > self.embedding_dim {
            return Err(Error::pre(format!("align_dim must lie in 1..={}", self.embedding_dim)));
        }
        Ok(())
    }

    pub fn layer_sizes(&self, input_dim: usize) -> Vec<usize> {
        let mut sizes = vec![input_dim];
        sizes.extend(&self.hidden);
        sizes.push(self.embedding_dim);
        sizes
    }

    /// Learning rate used for the update that produces step `k + 1`.
    pub fn lr_at(&self, k: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Cosine => {
                let frac = k as f64 / self.steps as f64;
                self.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    /// Objective evaluated with exact expectations over the joint.
    pub loss: f64,
    pub orth_residual: f64,
    pub eigen_residual: f64,
    pub principal_angle_max: f64,
    pub embedding_rank_ratio: f64,
    pub lambda_trace: f64,
}

pub const METRICS_HEADER: &str =
    "step,loss,orth_residual,eigen_residual,principal_angle_max,embedding_rank_ratio,lambda_trace";

impl MetricsRecord {
    pub fn to_csv_row(&self) -> String {
        let vals = [
            self.loss,
            self.orth_residual,
            self.eigen_residual,
            self.principal_angle_max,
            self.embedding_rank_ratio,
            self.lambda_trace,
        ];
        let mut row = self.step.to_string();
        for v in vals {
            row.push(',');
            row.push_str(&format_f64(v));
        }
        row
    }

    fn is_finite(&self) -> bool {
        [
            self.loss,
            self.orth_residual,
            self.eigen_residual,
            self.principal_angle_max,
            self.embedding_rank_ratio,
            self.lambda_trace,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.to_csv_row());
        out.push('\n');
    }
    out
}

/// Final state of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRun {
    pub online: EmbeddingModel,
    pub target: EmbeddingModel,
    pub lambda: Matrix,
    pub predictor: Option<Matrix>,
    pub inner_scale: f64,
    pub records: Vec<MetricsRecord>,
    pub steps_completed: usize,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Core(#[from] Error),
    /// Training produced a non-finite loss or parameter; `last_good` holds
    /// the state before the failing step.
    #[error("non-finite value at step {step}")]
    NonFinite { step: usize, last_good: Box<TrainRun> },
}

/// Position of the `Λ` refresh relative to the encoder step.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpdateOrder {
    LambdaFirst,
    StepFirst,
}

pub fn train(cfg: &TrainConfig, joint: &JointDistribution, features: &FeatureTable) -> std::result::Result<TrainRun, TrainError> {
    train_with_order(cfg, joint, features, UpdateOrder::LambdaFirst)
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    joint: &'a JointDistribution,
    features: &'a FeatureTable,
    online: EmbeddingModel,
    target: EmbeddingModel,
    aux: AuxiliaryState,
    predictor: Option<Matrix>,
    velocity: Vec<f64>,
    scale: f64,
    scale_opt: ScaleOptimizer,
    exhaustive: Batch,
}

impl Trainer<'_> {
    fn minc_cfg(&self) -> MincConfig {
        MincConfig { inner_scale: self.scale, ..self.cfg.minc.clone() }
    }

    fn lambda_source(&self) -> &EmbeddingModel {
        if self.cfg.minc.use_target {
            &self.target
        } else {
            &self.online
        }
    }

    fn refresh_lambda(&mut self, batch: &Batch) -> Result<()> {
        if self.cfg.loss_kind.uses_lambda() {
            let src = self.lambda_source().clone();
            update_lambda_from_batch(&mut self.aux, &src, self.features, batch)?;
        }
        Ok(())
    }

    /// Loss and encoder gradient on a batch; also returns the scale gradient.
    fn loss_and_grad(&self, batch: &Batch) -> Result<(f64, GradientBuffer, f64)> {
        let f = self.features;
        Ok(match self.cfg.loss_kind {
            LossKind::Minc => {
                let out = minc_loss_and_grad(&self.minc_cfg(), &self.online, &self.target, &self.aux, f, batch)?;
                (out.loss, out.grads, out.scale_grad)
            }
            LossKind::Spectral => {
                let out = spectral_loss_and_grad(&self.online, f, batch)?;
                let g = out.total();
                (out.loss, g, 0.0)
            }
            LossKind::L2Variant => {
                let (l, g) = l2_metric_loss_and_grad(&self.online, &self.target, self.cfg.minc.use_target, &self.aux, f, batch)?;
                (l, g, 0.0)
            }
            LossKind::LinearByol => {
                let a = self.predictor.as_ref().expect("predictor present for linear_byol");
                let tgt = if self.cfg.minc.use_target { &self.target } else { &self.online };
                let (l, g) = linear_byol_encoder_grad(a, &self.online, tgt, f, batch)?;
                (l, g, 0.0)
            }
        })
    }

    fn encoder_step(&mut self, batch: &Batch, lr: f64) -> Result<f64> {
        let (loss, grad, scale_grad) = self.loss_and_grad(batch)?;
        if let Some(a) = &self.predictor {
            let tgt = if self.cfg.minc.use_target { &self.target } else { &self.online };
            let ga = linear_byol_predictor_grad(a, &self.online, tgt, self.features, batch)?;
            self.predictor = Some(a.sub(&ga.scale(lr))?);
        }
        let mu = self.cfg.momentum;
        for ((p, v), g) in self.online.params_mut().iter_mut().zip(&mut self.velocity).zip(&grad.0) {
            *v = mu * *v + g;
            *p -= lr * *v;
        }
        if self.cfg.loss_kind == LossKind::Minc && self.cfg.minc.learn_scale {
            self.scale = self.scale_opt.step(self.scale, scale_grad);
        }
        Ok(loss)
    }

    fn target_step(&mut self) -> Result<()> {
        if self.cfg.loss_kind.uses_target() && self.cfg.minc.use_target {
            self.target.ema_update(&self.online, self.cfg.minc.gamma)?;
        }
        Ok(())
    }

    fn record(&self, step: usize) -> Result<MetricsRecord> {
        let (loss, _, _) = self.loss_and_grad(&self.exhaustive)?;
        let table = embedding_table(&self.online, self.features, self.joint.support_size_x())?;
        let res = fixed_point_residuals_table(self.joint, &table)?;
        let m = crate::dataset::build_m_matrix(self.joint);
        let angle = max_angle_to_top_space(&m, self.joint.marginal_x(), &table, self.cfg.align_dim)?;
        Ok(MetricsRecord {
            step,
            loss,
            orth_residual: res.orth,
            eigen_residual: res.eigen,
            principal_angle_max: angle,
            embedding_rank_ratio: collapse_metrics(&table)?.rank_ratio,
            lambda_trace: self.aux.lambda.trace(),
        })
    }

    fn snapshot(&self, records: &[MetricsRecord], steps_completed: usize) -> TrainRun {
        TrainRun {
            online: self.online.clone(),
            target: self.target.clone(),
            lambda: self.aux.lambda.clone(),
            predictor: self.predictor.clone(),
            inner_scale: self.scale,
            records: records.to_vec(),
            steps_completed,
        }
    }

    fn finite(&self) -> bool {
        self.online.params().iter().all(|v| v.is_finite())
            && self.aux.lambda.as_slice().iter().all(|v| v.is_finite())
            && self.scale.is_finite()
            && self.predictor.as_ref().is_none_or(|a| a.as_slice().iter().all(|v| v.is_finite()))
    }
}

/// [`train`] with a selectable position of the `Λ` refresh.
#[doc(hidden)]
pub fn train_with_order(
    cfg: &TrainConfig,
    joint: &JointDistribution,
    features: &FeatureTable,
    order: UpdateOrder,
) -> std::result::Result<TrainRun, TrainError> {
    cfg.validate()?;
    let n = joint.support_size_x();
    if joint.support_size_xp() != n || features.len() != n {
        return Err(Error::dim(format!(
            "training needs a shared support: joint {}x{}, {} feature rows",
            n,
            joint.support_size_xp(),
            features.len()
        ))
        .into());
    }
    let online = EmbeddingModel::new(&cfg.layer_sizes(features.dim()), cfg.normalize, cfg.seed)?;
    let d = cfg.embedding_dim;
    let mut t = Trainer {
        cfg,
        joint,
        features,
        target: online.clone(),
        velocity: vec![0.0; online.num_params()],
        online,
        aux: AuxiliaryState::new(d, cfg.minc.beta)?,
        predictor: (cfg.loss_kind == LossKind::LinearByol).then(|| Matrix::identity(d)),
        scale: cfg.minc.inner_scale,
        scale_opt: ScaleOptimizer::default(),
        exhaustive: Batch::exhaustive(joint),
    };
    let sampler = PairSampler::new(joint);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5A5A_5A5A_5A5A_5A5A);

    let mut records = vec![t.record(0)?];
    for k in 0..cfg.steps {
        let step = k + 1;
        let last_good = t.snapshot(&records, k);
        let batch = if cfg.full_batch {
            t.exhaustive.clone()
        } else {
            Batch::from_pairs(&sampler.sample(&mut rng, cfg.batch_size))?
        };
        let lr = cfg.lr_at(k);
        let loss = match order {
            UpdateOrder::LambdaFirst => {
                t.refresh_lambda(&batch)?;
                t.encoder_step(&batch, lr)?
            }
            UpdateOrder::StepFirst => {
                let loss = t.encoder_step(&batch, lr)?;
                t.refresh_lambda(&batch)?;
                loss
            }
        };
        t.target_step()?;
        if !loss.is_finite() || !t.finite() {
            return Err(TrainError::NonFinite { step, last_good: Box::new(last_good) });
        }
        if step % cfg.eval_every == 0 || step == cfg.steps {
            let rec = t.record(step)?;
            if !rec.is_finite() {
                return Err(TrainError::NonFinite { step, last_good: Box::new(last_good) });
            }
            records.push(rec);
        }
    }
    Ok(t.snapshot(&records, cfg.steps))
}

pub const ABLATION_BETAS: [f64; 4] = [0.0, 0.5, 0.8, 0.95];
pub const ABLATION_ALPHAS: [f64; 3] = [1.5, 2.0, 2.5];

/// One cell of the ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub use_lt: bool,
    pub use_target: bool,
    pub beta: f64,
    pub alpha: f64,
    /// Last finite record of the run.
    pub last: Option<MetricsRecord>,
    pub diverged: bool,
}

pub const ABLATION_HEADER: &str = "use_lt,use_target,beta,alpha,diverged,step,loss,orth_residual,eigen_residual,principal_angle_max,embedding_rank_ratio,lambda_trace";

impl AblationRow {
    pub fn to_csv_row(&self) -> String {
        let last = self.last.map_or_else(|| "NA,NA,NA,NA,NA,NA,NA".to_string(), |r| r.to_csv_row());
        format!(
            "{},{},{},{},{},{last}",
            self.use_lt,
            self.use_target,
            format_f64(self.beta),
            format_f64(self.alpha),
            self.diverged
        )
    }
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(ABLATION_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv_row());
        out.push('\n');
    }
    out
}

/// MINC over {mask on/off} × {target on/off} × β × α, in grid order.
/// Runs execute in parallel; each is deterministic on its own.
pub fn ablation_suite(base: &TrainConfig, joint: &JointDistribution, features: &FeatureTable) -> Result<Vec<AblationRow>> {
    let mut grid = Vec::new();
    for use_lt in [true, false] {
        for use_target in [true, false] {
            for beta in ABLATION_BETAS {
                for alpha in ABLATION_ALPHAS {
                    grid.push((use_lt, use_target, beta, alpha));
                }
            }
        }
    }
    grid.par_iter()
        .map(|&(use_lt, use_target, beta, alpha)| {
            let cfg = TrainConfig {
                loss_kind: LossKind::Minc,
                minc: MincConfig { alpha: AlphaDivergence::new(alpha)?, use_lt, use_target, beta, ..base.minc.clone() },
                ..base.clone()
            };
            let (last, diverged) = match train(&cfg, joint, features) {
                Ok(run) => (run.records.last().copied(), false),
                Err(TrainError::NonFinite { last_good, .. }) => (last_good.records.last().copied(), true),
                Err(TrainError::Core(e)) => return Err(e),
            };
            Ok(AblationRow { use_lt, use_target, beta, alpha, last, diverged })
        })
        .collect()
}
