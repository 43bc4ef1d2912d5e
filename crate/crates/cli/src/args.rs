//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use minc_core::trainer::{LossKind, LrSchedule, TrainConfig};
use minc_core::{AlphaDivergence, BlockGraphParams};

#[derive(Debug, Parser)]
#[command(name = "minc", version, about = "Desk-scale non-contrastive representation learning lab")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a block-graph dataset and print the top eigenvalues of its affinity matrix.
    GenData(GenDataArgs),
    /// Train an encoder and write metrics, checkpoints and a manifest.
    Train(TrainArgs),
    /// Run exact power iteration to convergence and compare with a dense eigensolver.
    Oracle(OracleArgs),
    /// Evaluate a trained checkpoint: linear probe, alignment and collapse metrics.
    Eval(EvalArgs),
    /// Run the ablation grid and write one table row per cell.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 8)]
    pub per_class: usize,
    #[arg(long, default_value_t = 0.9)]
    pub intra_mass: f64,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 16)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Number of eigenvalues to print.
    #[arg(long, default_value_t = 8)]
    pub top: usize,
}

impl GenDataArgs {
    pub fn params(&self) -> BlockGraphParams {
        BlockGraphParams {
            num_classes: self.classes,
            points_per_class: self.per_class,
            intra_mass: self.intra_mass,
            noise: self.noise,
            feature_dim: self.feature_dim,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum LossArg {
    Minc,
    Spectral,
    L2Variant,
    LinearByol,
}

impl From<LossArg> for LossKind {
    fn from(v: LossArg) -> Self {
        match v {
            LossArg::Minc => LossKind::Minc,
            LossArg::Spectral => LossKind::Spectral,
            LossArg::L2Variant => LossKind::L2Variant,
            LossArg::LinearByol => LossKind::LinearByol,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ScheduleArg {
    Constant,
    Cosine,
}

impl From<ScheduleArg> for LrSchedule {
    fn from(v: ScheduleArg) -> Self {
        match v {
            ScheduleArg::Constant => LrSchedule::Constant,
            ScheduleArg::Cosine => LrSchedule::Cosine,
        }
    }
}

/// Training settings layered on top of the defaults or a config file.
#[derive(Debug, Default, Args)]
pub struct ConfigArgs {
    /// TOML file with `TrainConfig` fields; missing fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, visible_alias = "loss", value_enum)]
    pub loss_kind: Option<LossArg>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub full_batch: Option<bool>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long, value_enum)]
    pub lr_schedule: Option<ScheduleArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub embedding_dim: Option<usize>,
    #[arg(long)]
    pub normalize: Option<bool>,
    #[arg(long)]
    pub align_dim: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub inner_scale: Option<f64>,
    #[arg(long)]
    pub use_lt: Option<bool>,
    #[arg(long)]
    pub use_target: Option<bool>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub learn_scale: Option<bool>,
    /// Shorthand for `--use-lt false`.
    #[arg(long, conflicts_with = "use_lt")]
    pub no_gha: bool,
    /// Shorthand for `--use-target false`.
    #[arg(long, conflicts_with = "use_target")]
    pub no_target: bool,
}

impl ConfigArgs {
    /// Applies every explicitly given flag to `cfg`.
    pub fn apply(&self, cfg: &mut TrainConfig) -> anyhow::Result<()> {
        macro_rules! set {
            ($($flag:ident => $field:expr),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { $field = v.into(); })*
            };
        }
        set! {
            loss_kind => cfg.loss_kind,
            batch_size => cfg.batch_size,
            full_batch => cfg.full_batch,
            steps => cfg.steps,
            learning_rate => cfg.learning_rate,
            momentum => cfg.momentum,
            lr_schedule => cfg.lr_schedule,
            seed => cfg.seed,
            eval_every => cfg.eval_every,
            hidden => cfg.hidden,
            embedding_dim => cfg.embedding_dim,
            normalize => cfg.normalize,
            align_dim => cfg.align_dim,
            inner_scale => cfg.minc.inner_scale,
            use_lt => cfg.minc.use_lt,
            use_target => cfg.minc.use_target,
            beta => cfg.minc.beta,
            gamma => cfg.minc.gamma,
            learn_scale => cfg.minc.learn_scale,
        }
        if let Some(a) = self.alpha {
            cfg.minc.alpha = AlphaDivergence::new(a)?;
        }
        if self.no_gha {
            cfg.minc.use_lt = false;
        }
        if self.no_target {
            cfg.minc.use_target = false;
        }
        Ok(())
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Dataset file written by `gen-data`.
    #[arg(long, required_unless_present = "from_manifest")]
    pub data: Option<PathBuf>,
    /// Rerun the configuration and dataset recorded in a train manifest.
    #[arg(long, conflicts_with = "data")]
    pub from_manifest: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Number of eigenfunctions to iterate.
    #[arg(long, default_value_t = 4)]
    pub dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-9)]
    pub tol: f64,
    #[arg(long, default_value_t = 500)]
    pub max_iter: usize,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory produced by `train`.
    #[arg(long)]
    pub out: PathBuf,
    /// Encoder checkpoint; defaults to the run's online checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Dataset file; defaults to the one recorded in the run manifest.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    /// Eigenspace size for alignment; defaults to the run's `align_dim`.
    #[arg(long)]
    pub align_dim: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}
