//! Sampler-correctness checks and CSV exports of fitted structure.
//!
//! The joint-distribution check compares two ways of sampling the model on
//! a fixed complete support graph: independent forward simulations, and a
//! chain that alternates one Gibbs sweep with a fresh draw of the
//! observations given the latent state. Both target the same joint, so
//! every monitored statistic must agree across the two arms up to Monte
//! Carlo error; a bug in any conditional update shows up as a large
//! z-score.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write as _};
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::{DynamicNetwork, HoldoutMask, SupportSet, TrainingView};
use crate::infer::{GibbsOptions, PropagationWorkspace, Sampler};
use crate::model::{
    forward_simulate_on_supports, resimulate_step_observations, Hyperparams, LatentState,
    SimOptions,
};
use crate::rng::stream_key;

/// A scalar summary of the latent state monitored by the joint check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MonitoredStat {
    /// Mean of the first membership component over nodes and steps at the
    /// bottom layer.
    MeanMembershipFirst,
    /// Mean cross-layer coefficient.
    MeanCross,
    /// Mean temporal coefficient.
    MeanTemporal,
    /// First compatibility cell.
    CompatFirst,
    /// The count scale.
    Scale,
}

impl MonitoredStat {
    pub const ALL: [MonitoredStat; 5] = [
        MonitoredStat::MeanMembershipFirst,
        MonitoredStat::MeanCross,
        MonitoredStat::MeanTemporal,
        MonitoredStat::CompatFirst,
        MonitoredStat::Scale,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MonitoredStat::MeanMembershipFirst => "mean_pi_first",
            MonitoredStat::MeanCross => "mean_beta",
            MonitoredStat::MeanTemporal => "mean_gamma",
            MonitoredStat::CompatFirst => "lambda_11",
            MonitoredStat::Scale => "M",
        }
    }

    fn measure(self, state: &LatentState) -> f64 {
        match self {
            MonitoredStat::MeanMembershipFirst => {
                let k = state.n_communities;
                let mut sum = 0.0;
                let mut n = 0usize;
                for per_layer in &state.memberships {
                    for row in per_layer[0].chunks_exact(k) {
                        sum += row[0];
                        n += 1;
                    }
                }
                sum / n as f64
            }
            MonitoredStat::MeanCross => state.coefficient_means().0,
            MonitoredStat::MeanTemporal => state.coefficient_means().1,
            MonitoredStat::CompatFirst => state.compat[0],
            MonitoredStat::Scale => state.scale,
        }
    }
}

impl fmt::Display for MonitoredStat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Settings of the joint-distribution check.
#[derive(Debug, Clone)]
pub struct GewekeConfig {
    /// Rounds per arm; at least a few thousand for a reportable verdict.
    pub n_rounds: u64,
    pub monitored: Vec<MonitoredStat>,
    /// |z| above this fails the check.
    pub z_threshold: f64,
}

impl Default for GewekeConfig {
    fn default() -> Self {
        GewekeConfig {
            n_rounds: 5_000,
            monitored: MonitoredStat::ALL.to_vec(),
            z_threshold: 4.0,
        }
    }
}

/// One monitored statistic's comparison across the two arms.
#[derive(Debug, Clone)]
pub struct GewekeStat {
    pub stat: MonitoredStat,
    pub forward_mean: f64,
    pub successive_mean: f64,
    pub forward_se: f64,
    pub successive_se: f64,
    pub z: f64,
}

/// Full result of the joint-distribution check.
#[derive(Debug, Clone)]
pub struct GewekeReport {
    pub n_rounds: u64,
    pub stats: Vec<GewekeStat>,
    pub z_threshold: f64,
}

impl GewekeReport {
    /// Largest |z| over the monitored statistics, zero when none.
    pub fn max_abs_z(&self) -> f64 {
        self.stats.iter().map(|s| s.z.abs()).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.stats.iter().all(|s| s.z.abs() < self.z_threshold)
    }

    /// Writes the per-statistic table as CSV.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        writeln!(w, "statistic,forward_mean,successive_mean,forward_se,successive_se,z")?;
        for s in &self.stats {
            writeln!(
                w,
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
                s.stat, s.forward_mean, s.successive_mean, s.forward_se, s.successive_se, s.z
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Number of batches used for the autocorrelation-robust standard error of
/// the successive-conditional chain.
const GEWEKE_BATCHES: usize = 25;

// Markers separating the round-seed streams of the two arms.
const FORWARD_ARM: u64 = 0x46;
const RESIM_ARM: u64 = 0x52;

/// Runs the joint-distribution check on a small instance of the given
/// shape. `gibbs.corrupt_cross_shape` deliberately breaks one conditional
/// update so the check's sensitivity can itself be verified.
pub fn geweke_check(
    cfg: &GewekeConfig,
    hp: &Hyperparams,
    n_nodes: usize,
    n_steps: usize,
    directed: bool,
    gibbs: &GibbsOptions,
    seed: u64,
) -> Result<GewekeReport> {
    if cfg.n_rounds == 0 {
        return Err(Error::Parameter("the joint check needs at least one round".into()));
    }
    if cfg.monitored.is_empty() {
        return Ok(GewekeReport {
            n_rounds: cfg.n_rounds,
            stats: Vec::new(),
            z_threshold: cfg.z_threshold,
        });
    }
    hp.validate()?;
    let n_stats = cfg.monitored.len();
    let rounds = cfg.n_rounds as usize;

    // Both arms share one fixed complete support on every step, so the
    // coefficient structure does not depend on the sampled links and the
    // model is a proper directed acyclic graph.
    let complete = Arc::new(SupportSet::complete(n_nodes));
    let cross_support: Vec<Arc<SupportSet>> = vec![complete.clone(); n_steps];
    let temporal_support: Vec<Arc<SupportSet>> =
        vec![complete.clone(); n_steps.saturating_sub(1)];
    let sim_opts = SimOptions::default();

    // Forward arm: independent simulations.
    let mut forward = vec![Vec::with_capacity(rounds); n_stats];
    for round in 0..cfg.n_rounds {
        let round_seed = stream_key(&[seed, round, FORWARD_ARM]);
        let (_, state) = forward_simulate_on_supports(
            hp,
            n_nodes,
            n_steps,
            directed,
            &sim_opts,
            round_seed,
            &cross_support,
            &temporal_support,
        )?;
        for (series, stat) in forward.iter_mut().zip(&cfg.monitored) {
            series.push(stat.measure(&state));
        }
    }

    // Successive-conditional arm: one Gibbs sweep, then fresh observations
    // from the current latent state. The chain starts at stationarity
    // because its initial point is itself a forward draw.
    let succ_seed = stream_key(&[seed, 1, 0x53]);
    let (mut net, mut state) = forward_simulate_on_supports(
        hp,
        n_nodes,
        n_steps,
        directed,
        &sim_opts,
        stream_key(&[succ_seed, 0, FORWARD_ARM]),
        &cross_support,
        &temporal_support,
    )?;
    let empty = HoldoutMask::empty();
    let mut ws = PropagationWorkspace::for_state(&state);
    let mut successive = vec![Vec::with_capacity(rounds); n_stats];
    for round in 1..=cfg.n_rounds {
        let view = TrainingView::with_complete_support(&net, &empty)?;
        let mut sampler = Sampler::new(&view, hp.clone(), gibbs.clone(), succ_seed)?;
        sampler.gibbs_iteration(&mut state, &mut ws, round)?;
        drop(sampler);
        let mut edges = Vec::with_capacity(n_steps);
        for t in 0..n_steps {
            let resim_seed = stream_key(&[succ_seed, round, RESIM_ARM, t as u64]);
            edges.push(resimulate_step_observations(&mut state, t, resim_seed)?);
        }
        net = DynamicNetwork::new(n_nodes, n_steps, directed, edges)?;
        for (series, stat) in successive.iter_mut().zip(&cfg.monitored) {
            series.push(stat.measure(&state));
        }
    }

    let stats = cfg
        .monitored
        .iter()
        .enumerate()
        .map(|(s, &stat)| {
            let (fm, fse) = mean_and_iid_se(&forward[s]);
            let (sm, sse) = mean_and_batch_se(&successive[s], GEWEKE_BATCHES);
            let denom = (fse * fse + sse * sse).sqrt();
            let z = if denom > 0.0 { (fm - sm) / denom } else { 0.0 };
            GewekeStat {
                stat,
                forward_mean: fm,
                successive_mean: sm,
                forward_se: fse,
                successive_se: sse,
                z,
            }
        })
        .collect();
    Ok(GewekeReport { n_rounds: cfg.n_rounds, stats, z_threshold: cfg.z_threshold })
}

fn mean_and_iid_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Mean with a batch-means standard error, robust to the autocorrelation
/// of a Markov chain.
fn mean_and_batch_se(xs: &[f64], n_batches: usize) -> (f64, f64) {
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let b = n_batches.min(xs.len());
    if b < 2 {
        return (mean, 0.0);
    }
    let per = xs.len() / b;
    let used = per * b;
    let batch_means: Vec<f64> = xs[..used]
        .chunks_exact(per)
        .map(|c| c.iter().sum::<f64>() / per as f64)
        .collect();
    let bm = batch_means.iter().sum::<f64>() / b as f64;
    let var =
        batch_means.iter().map(|x| (x - bm) * (x - bm)).sum::<f64>() / (b as f64 - 1.0);
    (mean, (var / b as f64).sqrt())
}

/// Writes membership rows as CSV for external heatmap plotting: one row
/// per (node, step) over the requested node range at one layer, columns
/// are the community weights.
pub fn export_membership_heatmap(
    state: &LatentState,
    layer: usize,
    nodes: Range<usize>,
    path: &Path,
) -> Result<()> {
    if layer >= state.n_layers {
        return Err(Error::Parameter(format!(
            "layer {layer} out of range for {} layers",
            state.n_layers
        )));
    }
    if nodes.end > state.n_nodes || nodes.is_empty() {
        return Err(Error::Parameter(format!(
            "node range {nodes:?} invalid for {} nodes",
            state.n_nodes
        )));
    }
    let k = state.n_communities;
    let mut w = BufWriter::new(fs::File::create(path)?);
    write!(w, "node,time")?;
    for kk in 1..=k {
        write!(w, ",c{kk}")?;
    }
    writeln!(w)?;
    for i in nodes {
        for t in 0..state.n_steps {
            write!(w, "{i},{t}")?;
            for &v in state.membership(i, t, layer) {
                write!(w, ",{v:.16e}")?;
            }
            writeln!(w)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes per-(layer, step) mean propagation coefficients as CSV: the mean
/// cross-layer coefficient feeding the layer, the mean temporal
/// coefficient feeding the step, and their ratio. Cells whose coefficient
/// kind does not exist (the bottom layer has no layer below, the first
/// step no step before) are left empty. Layers and steps are 1-based in
/// the file.
pub fn export_propagation_summary(state: &LatentState, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "layer,time,beta_mean,gamma_mean,ratio")?;
    for l in 0..state.n_layers {
        for t in 0..state.n_steps {
            let beta = if l > 0 {
                let values = &state.cross[l - 1][t];
                if values.is_empty() {
                    None
                } else {
                    Some(values.iter().sum::<f64>() / values.len() as f64)
                }
            } else {
                None
            };
            let gamma = if t > 0 {
                let values = &state.temporal[l][t - 1];
                if values.is_empty() {
                    None
                } else {
                    Some(values.iter().sum::<f64>() / values.len() as f64)
                }
            } else {
                None
            };
            let fmt_opt =
                |v: Option<f64>| v.map(|x| format!("{x:.16e}")).unwrap_or_default();
            let ratio = match (beta, gamma) {
                (Some(b), Some(g)) if g > 0.0 => Some(b / g),
                _ => None,
            };
            writeln!(
                w,
                "{},{},{},{},{}",
                l + 1,
                t + 1,
                fmt_opt(beta),
                fmt_opt(gamma),
                fmt_opt(ratio)
            )?;
        }
    }
    w.flush()?;
    Ok(())
}
