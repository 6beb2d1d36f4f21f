//! Command-line front end.
//!
//! Subcommands cover the whole pipeline: `simulate` draws a synthetic
//! network with its ground truth, `fit` runs the Gibbs sampler on an edge
//! list, `predict` exports held-out link probabilities from a finished
//! fit, `eval` scores them, `diagnose` runs the sampler's
//! joint-distribution check and exports fitted structure, and `stats`
//! prints headline dataset numbers.
//!
//! Every option can also come from a flat `key=value` configuration file
//! (`--config`); explicit flags win. Exit codes: 0 success, 1 usage or
//! configuration error, 2 data error, 3 numerical or internal error.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::diag::{
    export_membership_heatmap, export_propagation_summary, geweke_check, GewekeConfig,
};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate, write_predictions_csv};
use crate::graph::{
    dataset_stats, load_edge_list, split_holdout, DynamicNetwork, HoldoutMask,
};
use crate::infer::{fit, load_predictions, FitOptions, GibbsOptions};
use crate::model::{
    forward_simulate, load_checkpoint, save_checkpoint, Hyperparams, SimOptions, SupportRule,
};

#[derive(Parser)]
#[command(
    name = "dyncom",
    version,
    about = "Deep temporal community model: simulation, Gibbs inference, link prediction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a network from the generative model and save its ground truth
    Simulate(SimulateArgs),
    /// Fit the model to an edge list with Gibbs sampling
    Fit(FitArgs),
    /// Export held-out link probabilities from a finished fit
    Predict(PredictArgs),
    /// Score a finished fit's held-out predictions
    Eval(EvalArgs),
    /// Run the sampler joint-distribution check; export fitted structure
    Diagnose(DiagnoseArgs),
    /// Print headline statistics of a dataset
    Stats(StatsArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Output directory (network.txt plus a truth/ checkpoint)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of nodes
    #[arg(long)]
    nodes: Option<usize>,
    /// Number of time steps
    #[arg(long)]
    steps: Option<usize>,
    /// Number of communities
    #[arg(long = "K")]
    k: Option<usize>,
    /// Number of layers
    #[arg(long = "L")]
    l: Option<usize>,
    /// Symmetric Dirichlet base concentration
    #[arg(long)]
    alpha: Option<f64>,
    /// Generate directed links
    #[arg(long)]
    directed: bool,
    /// Fix the compatibility diagonal instead of drawing it
    #[arg(long = "lambda-diag")]
    lambda_diag: Option<f64>,
    /// Fix the compatibility off-diagonal instead of drawing it
    #[arg(long = "lambda-off")]
    lambda_off: Option<f64>,
    /// Fix the count scale instead of drawing it
    #[arg(long = "m-scale")]
    m_scale: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Flat key=value configuration file; flags win
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    /// Edge-list file
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output directory (checkpoint/, progress.csv, holdout.csv, predictions.csv)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of communities
    #[arg(long = "K")]
    k: Option<usize>,
    /// Number of layers
    #[arg(long = "L")]
    l: Option<usize>,
    /// Symmetric Dirichlet base concentration
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long = "burn-in")]
    burn_in: Option<u64>,
    /// Fraction of dyads held out for evaluation
    #[arg(long)]
    holdout: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0: all cores); results do not depend on it
    #[arg(long)]
    threads: Option<usize>,
    /// Checkpoint every this many iterations (0: only at the end)
    #[arg(long = "checkpoint-every")]
    checkpoint_every: Option<u64>,
    /// Continue from the checkpoint in the output directory
    #[arg(long)]
    resume: bool,
    /// Flat key=value configuration file; flags win
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    /// Edge-list file the fit ran on
    #[arg(long)]
    input: Option<PathBuf>,
    /// The fit's output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Flat key=value configuration file; flags win
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Edge-list file the fit ran on
    #[arg(long)]
    input: Option<PathBuf>,
    /// The fit's output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Flat key=value configuration file; flags win
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// Output directory for the reports
    #[arg(long)]
    out: Option<PathBuf>,
    /// Edge-list file of a finished fit; with it, the checkpoint in --out
    /// is loaded and its structure exported
    #[arg(long)]
    input: Option<PathBuf>,
    /// Joint-check instance: nodes
    #[arg(long)]
    nodes: Option<usize>,
    /// Joint-check instance: steps
    #[arg(long)]
    steps: Option<usize>,
    /// Joint-check instance: communities
    #[arg(long = "K")]
    k: Option<usize>,
    /// Joint-check instance: layers
    #[arg(long = "L")]
    l: Option<usize>,
    /// Joint-check rounds per arm
    #[arg(long)]
    iterations: Option<u64>,
    /// Joint-check instance is directed
    #[arg(long)]
    directed: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Flat key=value configuration file; flags win
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct StatsArgs {
    /// Edge-list file
    #[arg(long)]
    input: Option<PathBuf>,
    /// Flat key=value configuration file; flags win
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Parsed configuration file: key to (value, line number). Keys are
/// consumed as commands resolve their options; leftovers are rejected so a
/// typo cannot silently do nothing.
struct ConfigMap {
    entries: BTreeMap<String, (String, usize)>,
}

impl ConfigMap {
    fn empty() -> Self {
        ConfigMap { entries: BTreeMap::new() }
    }

    fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "config line {line_no}: expected key=value, got `{line}`"
                )));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(Error::Config(format!("config line {line_no}: empty key")));
            }
            if let Some((_, first)) = entries.insert(key.clone(), (value, line_no)) {
                return Err(Error::Config(format!(
                    "config line {line_no}: key `{key}` already set on line {first}"
                )));
            }
        }
        Ok(ConfigMap { entries })
    }

    /// Removes and parses a key, if present.
    fn take<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((value, line)) => value.parse().map(Some).map_err(|e| {
                Error::Config(format!("config line {line}: key `{key}`: {e}"))
            }),
        }
    }

    /// Errors on the first unconsumed key.
    fn finish(self) -> Result<()> {
        if let Some((key, (_, line))) = self.entries.into_iter().next() {
            return Err(Error::Config(format!("config line {line}: unknown key `{key}`")));
        }
        Ok(())
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<ConfigMap> {
    match path {
        None => Ok(ConfigMap::empty()),
        Some(p) => ConfigMap::load(p),
    }
}

/// An error tagged with the pipeline stage it came from.
struct Staged {
    stage: &'static str,
    err: Error,
}

type StagedResult<T> = std::result::Result<T, Staged>;

trait StageExt<T> {
    fn stage(self, name: &'static str) -> StagedResult<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, name: &'static str) -> StagedResult<T> {
        self.map_err(|err| Staged { stage: name, err })
    }
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 1,
        Error::Parameter(_)
        | Error::Parse { .. }
        | Error::Validation { .. }
        | Error::UndefinedMetric(_)
        | Error::Io(_) => 2,
        Error::Degenerate(_) | Error::Inconsistency(_) => 3,
    }
}

/// Parses arguments, runs the command, and returns the process exit code.
pub fn run_cli() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successful exits.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Fit(args) => cmd_fit(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Diagnose(args) => cmd_diagnose(args),
        Command::Stats(args) => cmd_stats(args),
    };
    match result {
        Ok(()) => 0,
        Err(Staged { stage, err }) => {
            eprintln!("error [{stage}]: {err}");
            exit_code(&err)
        }
    }
}

fn require<T>(value: Option<T>, flag: &str) -> Result<T> {
    value.ok_or_else(|| Error::Config(format!("missing required option --{flag}")))
}

/// The input file must exist before any compute starts.
fn check_input_exists(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(Error::Parameter(format!(
            "input path `{}` does not exist or is not a file",
            path.display()
        )));
    }
    Ok(())
}

fn build_hyperparams(k: usize, l: usize, n_nodes: usize, alpha: Option<f64>) -> Result<Hyperparams> {
    let mut hp = Hyperparams::new(k, l, n_nodes);
    if let Some(a) = alpha {
        hp.alpha = vec![a; k];
    }
    hp.validate()?;
    Ok(hp)
}

fn cmd_simulate(args: SimulateArgs) -> StagedResult<()> {
    let mut cfg = load_config(&args.config).stage("config")?;
    let out = args.out.or(cfg.take("out").stage("config")?);
    let nodes = args.nodes.or(cfg.take("nodes").stage("config")?);
    let steps = args.steps.or(cfg.take("steps").stage("config")?);
    let k = args.k.or(cfg.take("K").stage("config")?);
    let l = args.l.or(cfg.take("L").stage("config")?);
    let alpha = args.alpha.or(cfg.take("alpha").stage("config")?);
    let directed = args.directed || cfg.take("directed").stage("config")?.unwrap_or(false);
    let lambda_diag = args.lambda_diag.or(cfg.take("lambda-diag").stage("config")?);
    let lambda_off = args.lambda_off.or(cfg.take("lambda-off").stage("config")?);
    let m_scale = args.m_scale.or(cfg.take("m-scale").stage("config")?);
    let seed = args.seed.or(cfg.take("seed").stage("config")?).unwrap_or(0);
    cfg.finish().stage("config")?;

    let out = require(out, "out").stage("config")?;
    let nodes = require(nodes, "nodes").stage("config")?;
    let steps = require(steps, "steps").stage("config")?;
    let k = require(k, "K").stage("config")?;
    let l = require(l, "L").stage("config")?;

    let hp = build_hyperparams(k, l, nodes, alpha).stage("simulate")?;
    let compat = match (lambda_diag, lambda_off) {
        (None, None) => None,
        (d, o) => {
            let d = d.ok_or_else(|| {
                Error::Config("--lambda-off requires --lambda-diag".into())
            })
            .stage("config")?;
            let o = o.ok_or_else(|| {
                Error::Config("--lambda-diag requires --lambda-off".into())
            })
            .stage("config")?;
            let mut m = vec![o; k * k];
            for kk in 0..k {
                m[kk * k + kk] = d;
            }
            Some(m)
        }
    };
    let opts = SimOptions { compat, scale: m_scale };
    let (net, state) = forward_simulate(&hp, nodes, steps, directed, &opts, seed)
        .stage("simulate")?;

    fs::create_dir_all(&out).map_err(Error::from).stage("write-output")?;
    net.save(&out.join("network.txt")).stage("write-output")?;
    save_checkpoint(&out.join("truth"), &state, &hp, 0, SupportRule::Lagged)
        .stage("write-output")?;
    println!("{}", dataset_stats(&net));
    Ok(())
}

fn cmd_fit(args: FitArgs) -> StagedResult<()> {
    let mut cfg = load_config(&args.config).stage("config")?;
    let input = args.input.or(cfg.take("input").stage("config")?);
    let out = args.out.or(cfg.take("out").stage("config")?);
    let k = args.k.or(cfg.take("K").stage("config")?);
    let l = args.l.or(cfg.take("L").stage("config")?).unwrap_or(3);
    let alpha = args.alpha.or(cfg.take("alpha").stage("config")?);
    let iterations = args
        .iterations
        .or(cfg.take("iterations").stage("config")?)
        .unwrap_or(3000);
    let burn_in = args.burn_in.or(cfg.take("burn-in").stage("config")?).unwrap_or(1500);
    let holdout = args.holdout.or(cfg.take("holdout").stage("config")?).unwrap_or(0.1);
    let seed = args.seed.or(cfg.take("seed").stage("config")?).unwrap_or(0);
    let threads = args.threads.or(cfg.take("threads").stage("config")?).unwrap_or(0);
    let checkpoint_every = args
        .checkpoint_every
        .or(cfg.take("checkpoint-every").stage("config")?)
        .unwrap_or(0);
    let resume = args.resume || cfg.take("resume").stage("config")?.unwrap_or(false);
    cfg.finish().stage("config")?;

    let input = require(input, "input").stage("config")?;
    let out = require(out, "out").stage("config")?;
    let k = require(k, "K").stage("config")?;

    check_input_exists(&input).stage("load-input")?;
    let net = load_edge_list(&input).stage("load-input")?;
    let hp = build_hyperparams(k, l, net.n_nodes(), alpha).stage("fit")?;

    fs::create_dir_all(&out).map_err(Error::from).stage("write-output")?;
    let mask_path = out.join("holdout.csv");
    let mask = if resume {
        if !mask_path.is_file() {
            return Err(Staged {
                stage: "holdout",
                err: Error::Parameter(format!(
                    "resume needs the original run's holdout at `{}`",
                    mask_path.display()
                )),
            });
        }
        HoldoutMask::load_csv(&mask_path, &net).stage("holdout")?
    } else {
        let mask = split_holdout(&net, holdout, seed).stage("holdout")?;
        mask.save_csv(&mask_path).stage("write-output")?;
        mask
    };

    let gibbs = GibbsOptions { threads, ..Default::default() };
    let fit_opts = FitOptions {
        iterations,
        burn_in,
        checkpoint_every,
        out_dir: out.clone(),
        resume,
    };
    let outcome = fit(&net, &mask, &hp, &gibbs, &fit_opts, seed).stage("fit")?;

    if !mask.is_empty() && outcome.posterior_samples > 0 {
        write_predictions_csv(&mask, &outcome.predictions, &out.join("predictions.csv"))
            .stage("write-output")?;
    }
    println!(
        "fit complete: {iterations} iterations, {} retained samples, {} held-out dyads",
        outcome.posterior_samples,
        mask.len()
    );
    let s = outcome.stats;
    if s != Default::default() {
        println!(
            "numerical corners: {} floored rates, {} concentration fallbacks, \
             {} degenerate splits, {} degenerate allocations, {} pinned counts",
            s.rate_floor_hits,
            s.concentration_fallbacks,
            s.degenerate_splits,
            s.degenerate_allocations,
            s.pinned_counts
        );
    }
    Ok(())
}

/// Shared by predict and eval: load the network, the fit's holdout, and
/// the accumulated predictions.
fn load_fit_artifacts(
    input: &Path,
    out: &Path,
) -> StagedResult<(DynamicNetwork, HoldoutMask, Vec<f64>, u64)> {
    check_input_exists(input).stage("load-input")?;
    let net = load_edge_list(input).stage("load-input")?;
    let mask_path = out.join("holdout.csv");
    if !mask_path.is_file() {
        return Err(Staged {
            stage: "load-fit",
            err: Error::Parameter(format!(
                "no holdout found at `{}`; is `{}` a fit output directory?",
                mask_path.display(),
                out.display()
            )),
        });
    }
    let mask = HoldoutMask::load_csv(&mask_path, &net).stage("load-fit")?;
    let (probs, n_samples) = load_predictions(out, &mask).stage("load-fit")?;
    Ok((net, mask, probs, n_samples))
}

fn cmd_predict(args: PredictArgs) -> StagedResult<()> {
    let mut cfg = load_config(&args.config).stage("config")?;
    let input = args.input.or(cfg.take("input").stage("config")?);
    let out = args.out.or(cfg.take("out").stage("config")?);
    cfg.finish().stage("config")?;
    let input = require(input, "input").stage("config")?;
    let out = require(out, "out").stage("config")?;

    let (_, mask, probs, n_samples) = load_fit_artifacts(&input, &out)?;
    let path = out.join("predictions.csv");
    write_predictions_csv(&mask, &probs, &path).stage("write-output")?;
    println!(
        "wrote {} predictions from {n_samples} samples to {}",
        mask.len(),
        path.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> StagedResult<()> {
    let mut cfg = load_config(&args.config).stage("config")?;
    let input = args.input.or(cfg.take("input").stage("config")?);
    let out = args.out.or(cfg.take("out").stage("config")?);
    cfg.finish().stage("config")?;
    let input = require(input, "input").stage("config")?;
    let out = require(out, "out").stage("config")?;

    let (_, mask, probs, n_samples) = load_fit_artifacts(&input, &out)?;
    let report = evaluate(&mask, &probs, n_samples).stage("eval")?;
    report
        .save_predictions_csv(&out.join("predictions.csv"))
        .stage("write-output")?;
    report.save_summary_csv(&out.join("summary.csv")).stage("write-output")?;
    println!("auc,avg_precision,n_entries,n_samples");
    println!("{}", report.summary_line());
    Ok(())
}

fn cmd_diagnose(args: DiagnoseArgs) -> StagedResult<()> {
    let mut cfg = load_config(&args.config).stage("config")?;
    let out = args.out.or(cfg.take("out").stage("config")?);
    let input = args.input.or(cfg.take("input").stage("config")?);
    let nodes = args.nodes.or(cfg.take("nodes").stage("config")?).unwrap_or(5);
    let steps = args.steps.or(cfg.take("steps").stage("config")?).unwrap_or(2);
    let k = args.k.or(cfg.take("K").stage("config")?).unwrap_or(2);
    let l = args.l.or(cfg.take("L").stage("config")?).unwrap_or(2);
    let rounds = args
        .iterations
        .or(cfg.take("iterations").stage("config")?)
        .unwrap_or(5000);
    let directed = args.directed || cfg.take("directed").stage("config")?.unwrap_or(false);
    let seed = args.seed.or(cfg.take("seed").stage("config")?).unwrap_or(0);
    cfg.finish().stage("config")?;
    let out = require(out, "out").stage("config")?;
    fs::create_dir_all(&out).map_err(Error::from).stage("write-output")?;

    let hp = Hyperparams::new(k, l, nodes);
    let geweke_cfg = GewekeConfig { n_rounds: rounds, ..Default::default() };
    let report = geweke_check(
        &geweke_cfg,
        &hp,
        nodes,
        steps,
        directed,
        &GibbsOptions::default(),
        seed,
    )
    .stage("diagnose")?;
    report.save_csv(&out.join("geweke.csv")).stage("write-output")?;
    println!(
        "joint-distribution check over {rounds} rounds: max |z| = {:.3} ({})",
        report.max_abs_z(),
        if report.passed() { "pass" } else { "FAIL" }
    );
    for s in &report.stats {
        println!("  {:<14} z = {:+.3}", s.stat.name(), s.z);
    }

    if let Some(input) = input {
        check_input_exists(&input).stage("load-input")?;
        let net = load_edge_list(&input).stage("load-input")?;
        let mask_path = out.join("holdout.csv");
        let mask = if mask_path.is_file() {
            HoldoutMask::load_csv(&mask_path, &net).stage("load-fit")?
        } else {
            HoldoutMask::empty()
        };
        let (state, _) = load_checkpoint(&out.join("checkpoint"), &net, &mask)
            .stage("load-fit")?;
        for layer in 0..state.n_layers {
            export_membership_heatmap(
                &state,
                layer,
                0..state.n_nodes,
                &out.join(format!("heatmap_l{}.csv", layer + 1)),
            )
            .stage("write-output")?;
        }
        export_propagation_summary(&state, &out.join("propagation.csv"))
            .stage("write-output")?;
        println!(
            "exported fitted structure for {} layers to {}",
            state.n_layers,
            out.display()
        );
    }
    Ok(())
}

fn cmd_stats(args: StatsArgs) -> StagedResult<()> {
    let mut cfg = load_config(&args.config).stage("config")?;
    let input = args.input.or(cfg.take("input").stage("config")?);
    cfg.finish().stage("config")?;
    let input = require(input, "input").stage("config")?;
    check_input_exists(&input).stage("load-input")?;
    let net = load_edge_list(&input).stage("load-input")?;
    println!("{}", dataset_stats(&net));
    Ok(())
}
