//! Subcommand implementations.

use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use minc_core::dataset::build_m_matrix;
use minc_core::linalg::{format_f64, gram_schmidt, principal_angles, sym_eigen};
use minc_core::power::{embedding_table, run_to_convergence, PowerIterState};
use minc_core::probe::{collapse_metrics, linear_probe, subspace_alignment};
use minc_core::trainer::{self, ablation_csv, ablation_suite, metrics_csv, TrainConfig, TrainError, TrainRun};
use minc_core::{Dataset, EmbeddingModel, Matrix};
use serde::Serialize;

use crate::args::{AblateArgs, Command, ConfigArgs, EvalArgs, GenDataArgs, OracleArgs, TrainArgs};
use crate::manifest::{dataset_ref, OracleSettings, RunManifest};

pub const DATASET_FILE: &str = "dataset.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ONLINE_FILE: &str = "online.txt";
pub const TARGET_FILE: &str = "target.txt";
pub const LAMBDA_FILE: &str = "lambda.txt";
pub const PREDICTOR_FILE: &str = "predictor.txt";
pub const ORACLE_FILE: &str = "oracle.json";
pub const EVAL_FILE: &str = "eval.jsonl";
pub const ABLATION_FILE: &str = "ablation.csv";

/// Files owned by a run directory; a command that writes a fresh manifest
/// removes the ones it does not produce.
const RUN_FILES: [&str; 8] =
    [METRICS_FILE, ONLINE_FILE, TARGET_FILE, LAMBDA_FILE, PREDICTOR_FILE, ORACLE_FILE, EVAL_FILE, ABLATION_FILE];

/// Error carrying a specific process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

pub const EXIT_NUMERICAL: u8 = 2;
pub const EXIT_NOT_CONVERGED: u8 = 3;

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::Oracle(a) => oracle(&a),
        Command::Eval(a) => eval(&a),
        Command::Ablate(a) => ablate(&a),
    }
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).with_context(|| format!("reading dataset {}", path.display()))?;
    Dataset::from_text(&text).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
        None => Ok(TrainConfig::default()),
    }
}

fn resolve_config(base: TrainConfig, flags: &ConfigArgs) -> Result<TrainConfig> {
    let mut cfg = base;
    flags.apply(&mut cfg)?;
    cfg.validate().context("invalid training configuration")?;
    Ok(cfg)
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for name in RUN_FILES {
        let path = dir.join(name);
        if path.is_file() {
            fs::remove_file(&path).with_context(|| format!("removing stale {}", path.display()))?;
        }
    }
    Ok(())
}

fn write_artifact(dir: &Path, manifest: &mut RunManifest, key: &str, file: &str, contents: &str) -> Result<()> {
    let path = dir.join(file);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    manifest.artifacts.insert(key.to_string(), file.to_string());
    Ok(())
}

fn gen_data(args: &GenDataArgs) -> Result<()> {
    let params = args.params();
    let data = Dataset::generate(&params).context("invalid generator parameters")?;
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let path = args.out.join(DATASET_FILE);
    fs::write(&path, data.to_text()).with_context(|| format!("writing {}", path.display()))?;
    let mut manifest = RunManifest::new("gen-data", params.seed, dataset_ref(&path)?);
    manifest.artifacts.insert("dataset".into(), DATASET_FILE.into());
    manifest.generator = Some(params);
    manifest.write(&args.out)?;
    let eig = sym_eigen(&build_m_matrix(&data.joint))?;
    println!("wrote {} ({} support points)", path.display(), data.joint.support_size_x());
    println!("top eigenvalues of M:");
    for v in eig.eigenvalues.iter().take(args.top) {
        println!("  {}", format_f64(*v));
    }
    Ok(())
}

fn train(args: &TrainArgs) -> Result<()> {
    let (base, data_path) = match &args.from_manifest {
        Some(path) => {
            if args.config.config.is_some() {
                bail!("--config cannot be combined with --from-manifest");
            }
            let m = RunManifest::load(path)?;
            if m.command != "train" {
                bail!("{} records a `{}` run, not `train`", path.display(), m.command);
            }
            m.verify_dataset()?;
            (m.config.context("manifest has no training configuration")?, PathBuf::from(m.dataset.path))
        }
        None => {
            let data = args.data.clone().context("--data is required")?;
            (load_config(args.config.config.as_deref())?, data)
        }
    };
    let cfg = resolve_config(base, &args.config)?;
    let dataset = dataset_ref(&data_path)?;
    let data = load_dataset(&data_path)?;
    prepare_out(&args.out)?;

    let (run, failed_at) = match trainer::train(&cfg, &data.joint, &data.features) {
        Ok(run) => (run, None),
        Err(TrainError::NonFinite { step, last_good }) => (*last_good, Some(step)),
        Err(TrainError::Core(e)) => return Err(e).context("training failed"),
    };
    let mut manifest = RunManifest::new("train", cfg.seed, dataset);
    write_run(&args.out, &cfg, &run, &mut manifest)?;
    manifest.config = Some(cfg);
    if let Some(step) = failed_at {
        manifest.status = format!("aborted: non-finite value at step {step}");
        manifest.write(&args.out)?;
        return Err(Failure {
            code: EXIT_NUMERICAL,
            message: format!(
                "non-finite value at step {step}; kept checkpoint after step {} in {}",
                run.steps_completed,
                args.out.display()
            ),
        }
        .into());
    }
    manifest.write(&args.out)?;
    if let Some(last) = run.records.last() {
        println!(
            "step {} loss {} angle {} rank_ratio {}",
            last.step,
            format_f64(last.loss),
            format_f64(last.principal_angle_max),
            format_f64(last.embedding_rank_ratio)
        );
    }
    Ok(())
}

fn write_run(dir: &Path, cfg: &TrainConfig, run: &TrainRun, manifest: &mut RunManifest) -> Result<()> {
    write_artifact(dir, manifest, "metrics", METRICS_FILE, &metrics_csv(&run.records))?;
    write_artifact(dir, manifest, "online", ONLINE_FILE, &run.online.to_text())?;
    if cfg.loss_kind.uses_target() && cfg.minc.use_target {
        write_artifact(dir, manifest, "target", TARGET_FILE, &run.target.to_text())?;
    }
    if cfg.loss_kind.uses_lambda() {
        write_artifact(dir, manifest, "lambda", LAMBDA_FILE, &run.lambda.to_text())?;
    }
    if let Some(a) = &run.predictor {
        write_artifact(dir, manifest, "predictor", PREDICTOR_FILE, &a.to_text())?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct OracleOutput {
    dim: usize,
    iterations: usize,
    converged: bool,
    orth_residual: f64,
    eigen_residual: f64,
    oracle_eigenvalues: Vec<f64>,
    dense_eigenvalues: Vec<f64>,
    nontrivial: usize,
    principal_angles: Vec<f64>,
}

fn oracle(args: &OracleArgs) -> Result<()> {
    let dataset = dataset_ref(&args.data)?;
    let data = load_dataset(&args.data)?;
    let joint = &data.joint;
    let n = joint.support_size_x();
    if args.dim == 0 || args.dim > n {
        bail!("--dim must lie in 1..={n}");
    }
    let init = PowerIterState::random(n, args.dim, args.seed)?;
    let report = run_to_convergence(joint, init, args.tol, args.max_iter)?;

    let sqrt_p = joint.sqrt_marginal_x();
    let g = report.state.phi_table.scale_rows(&sqrt_p);
    let moment = g.t_matmul(&g)?;
    let oracle_eigenvalues = sym_eigen(&moment)?.eigenvalues;
    let dense = sym_eigen(&build_m_matrix(joint))?;
    let dense_eigenvalues = dense.eigenvalues[..args.dim].to_vec();
    let floor = 1e-9 * dense.eigenvalues[0].abs().max(f64::MIN_POSITIVE);
    let nontrivial = dense_eigenvalues.iter().filter(|v| **v > floor).count();
    let principal_angles = angles_to_top_space(&g, &dense.top(nontrivial))?;

    let out = OracleOutput {
        dim: args.dim,
        iterations: report.state.iteration,
        converged: report.converged,
        orth_residual: report.residuals.orth,
        eigen_residual: report.residuals.eigen,
        oracle_eigenvalues,
        dense_eigenvalues,
        nontrivial,
        principal_angles,
    };
    prepare_out(&args.out)?;
    let mut manifest = RunManifest::new("oracle", args.seed, dataset);
    manifest.oracle = Some(OracleSettings { dim: args.dim, tol: args.tol, max_iter: args.max_iter });
    write_artifact(&args.out, &mut manifest, "oracle", ORACLE_FILE, &serde_json::to_string_pretty(&out)?)?;

    println!("iterations {} converged {}", out.iterations, out.converged);
    println!("residuals orth {} eigen {}", format_f64(out.orth_residual), format_f64(out.eigen_residual));
    println!("{:>4}  {:>24}  {:>24}", "k", "power iteration", "dense solver");
    for (k, (a, b)) in out.oracle_eigenvalues.iter().zip(&out.dense_eigenvalues).enumerate() {
        println!("{k:>4}  {:>24}  {:>24}", format_f64(*a), format_f64(*b));
    }
    println!("non-trivial eigenvalues {}", out.nontrivial);
    let angles: Vec<String> = out.principal_angles.iter().map(|a| format_f64(*a)).collect();
    println!("principal angles [{}]", angles.join(", "));

    if !out.converged {
        manifest.status = "not converged".into();
        manifest.write(&args.out)?;
        return Err(Failure {
            code: EXIT_NOT_CONVERGED,
            message: format!(
                "power iteration did not converge in {} iterations (residual {})",
                args.max_iter,
                format_f64(report.residuals.max())
            ),
        }
        .into());
    }
    manifest.write(&args.out)?;
    Ok(())
}

/// Principal angles between the span of the live columns of `g` and `top`.
fn angles_to_top_space(g: &Matrix, top: &Matrix) -> Result<Vec<f64>> {
    if top.cols() == 0 {
        return Ok(Vec::new());
    }
    let ortho = gram_schmidt(g);
    let live: Vec<Vec<f64>> =
        (0..ortho.q.cols()).filter(|j| !ortho.dead.contains(j)).map(|j| ortho.q.column(j)).collect();
    if live.len() < top.cols() {
        return Ok(vec![std::f64::consts::FRAC_PI_2; top.cols()]);
    }
    Ok(principal_angles(&Matrix::from_columns(&live)?, top)?)
}

#[derive(Debug, Serialize)]
struct EvalRecord {
    checkpoint: String,
    split_seed: u64,
    align_dim: usize,
    train_accuracy: f64,
    holdout_accuracy: f64,
    num_classes: usize,
    probe_iterations: usize,
    alignment: f64,
    rank_ratio: f64,
    mean_pairwise_cos: f64,
}

fn eval(args: &EvalArgs) -> Result<()> {
    let manifest_path = RunManifest::path_in(&args.out);
    let mut manifest = RunManifest::load(&manifest_path)?;
    let data_path = match &args.data {
        Some(p) => p.clone(),
        None => {
            manifest.verify_dataset()?;
            PathBuf::from(&manifest.dataset.path)
        }
    };
    let data = load_dataset(&data_path)?;
    let checkpoint = match &args.checkpoint {
        Some(p) => p.clone(),
        None => args.out.join(manifest.artifacts.get("online").context("run directory has no online checkpoint")?),
    };
    let text = fs::read_to_string(&checkpoint).with_context(|| format!("reading checkpoint {}", checkpoint.display()))?;
    let model = EmbeddingModel::from_text(&text).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let align_dim = args.align_dim.or(manifest.config.as_ref().map(|c| c.align_dim)).unwrap_or(data.joint.num_classes());

    let probe = linear_probe(&model, &data.features, data.joint.labels(), args.split_seed)?;
    let alignment = subspace_alignment(&model, &data.features, &data.joint, align_dim)?;
    let table = embedding_table(&model, &data.features, data.joint.support_size_x())?;
    let collapse = collapse_metrics(&table)?;
    let record = EvalRecord {
        checkpoint: checkpoint.to_string_lossy().into_owned(),
        split_seed: args.split_seed,
        align_dim,
        train_accuracy: probe.train_accuracy,
        holdout_accuracy: probe.holdout_accuracy,
        num_classes: probe.num_classes,
        probe_iterations: probe.iterations,
        alignment,
        rank_ratio: collapse.rank_ratio,
        mean_pairwise_cos: collapse.mean_pairwise_cos,
    };
    let line = serde_json::to_string(&record)?;
    let path = args.out.join(EVAL_FILE);
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .with_context(|| format!("opening {}", path.display()))?;
    writeln!(file, "{line}").with_context(|| format!("appending to {}", path.display()))?;
    manifest.artifacts.insert("eval".into(), EVAL_FILE.into());
    manifest.write(&args.out)?;
    println!("{line}");
    Ok(())
}

fn ablate(args: &AblateArgs) -> Result<()> {
    let cfg = resolve_config(load_config(args.config.config.as_deref())?, &args.config)?;
    let dataset = dataset_ref(&args.data)?;
    let data = load_dataset(&args.data)?;
    let rows = ablation_suite(&cfg, &data.joint, &data.features).context("ablation failed")?;
    prepare_out(&args.out)?;
    let mut manifest = RunManifest::new("ablate", cfg.seed, dataset);
    write_artifact(&args.out, &mut manifest, "ablation", ABLATION_FILE, &ablation_csv(&rows))?;
    manifest.config = Some(cfg);
    manifest.write(&args.out)?;
    let diverged = rows.iter().filter(|r| r.diverged).count();
    println!("wrote {} rows ({diverged} diverged) to {}", rows.len(), args.out.join(ABLATION_FILE).display());
    Ok(())
}
