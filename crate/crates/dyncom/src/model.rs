//! Model state and the generative process.
//!
//! Nodes carry per-layer, per-step membership distributions over K
//! communities. Memberships at (layer l, step t) are Dirichlet draws whose
//! concentration is assembled from the layer below at the same step through
//! cross-layer coefficients, and from the same layer at the previous step
//! through temporal coefficients. Off-diagonal coefficients exist only where
//! the data shows a positive link; each node always keeps a diagonal
//! (self-history) coefficient. Interactions are generated from integer count
//! vectors through a community compatibility matrix: a dyad carries a link
//! when its latent interaction count total is positive.
//!
//! Conventions used throughout the crate: steps and layers are 0-based;
//! quantities indexed "one before the start" (layer -1 or step -1) are zero,
//! so the base concentration `alpha` enters only at (t=0, l=0). Gamma
//! parameters are shape and scale; rate parameterizations are converted at
//! the call site.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dist::{sample_dirichlet, sample_gamma, sample_multinomial, sample_poisson};
use crate::error::{Error, Result};
use crate::graph::{DynamicNetwork, HoldoutMask, SupportSet, TrainingView};
use crate::rng::{Family, RngStream};

/// Model and prior configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Number of communities K.
    pub n_communities: usize,
    /// Number of membership layers L.
    pub n_layers: usize,
    /// Base Dirichlet concentration, applied at (t=0, l=0) only. Length K.
    pub alpha: Vec<f64>,
    /// Gamma shape for diagonal (self) coefficients, per receiving layer.
    pub c_diag: Vec<f64>,
    /// Gamma shape for off-diagonal (link) coefficients, per receiving layer.
    pub c_offdiag: Vec<f64>,
    /// Gamma rate shared by all coefficient priors.
    pub coeff_rate: f64,
    /// Gamma shape of the community compatibility prior.
    pub compat_shape: f64,
    /// Gamma rate of the community compatibility prior.
    pub compat_rate: f64,
    /// Gamma shape of the count-scale prior (rate 1); defaults to N.
    pub scale_shape: f64,
}

impl Hyperparams {
    /// Defaults: symmetric alpha 0.1, unit coefficient and compatibility
    /// priors, count-scale prior shape N.
    pub fn new(n_communities: usize, n_layers: usize, n_nodes: usize) -> Self {
        Hyperparams {
            n_communities,
            n_layers,
            alpha: vec![0.1; n_communities],
            c_diag: vec![1.0; n_layers],
            c_offdiag: vec![1.0; n_layers],
            coeff_rate: 1.0,
            compat_shape: 1.0,
            compat_rate: 1.0,
            scale_shape: n_nodes as f64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_communities == 0 {
            return Err(Error::Parameter("need at least one community".into()));
        }
        if self.n_layers == 0 {
            return Err(Error::Parameter("need at least one layer".into()));
        }
        if self.alpha.len() != self.n_communities {
            return Err(Error::Parameter(format!(
                "alpha has length {}, expected {}",
                self.alpha.len(),
                self.n_communities
            )));
        }
        if !self.alpha.iter().all(|&a| a > 0.0 && a.is_finite()) {
            return Err(Error::Parameter("alpha entries must be positive and finite".into()));
        }
        for (name, v) in [("c_diag", &self.c_diag), ("c_offdiag", &self.c_offdiag)] {
            if v.len() != self.n_layers {
                return Err(Error::Parameter(format!(
                    "{name} has length {}, expected {}",
                    v.len(),
                    self.n_layers
                )));
            }
            if !v.iter().all(|&c| c > 0.0 && c.is_finite()) {
                return Err(Error::Parameter(format!("{name} entries must be positive")));
            }
        }
        for (name, v) in [
            ("coeff_rate", self.coeff_rate),
            ("compat_shape", self.compat_shape),
            ("compat_rate", self.compat_rate),
            ("scale_shape", self.scale_shape),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// How coefficient supports are derived from the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SupportRule {
    /// Inference: off-diagonal entries follow the links observed at the
    /// receiving step (cross-layer) or the source step (temporal).
    Observed,
    /// Simulation: cross-layer support at step t follows the links already
    /// generated at step t-1, so generation never conditions on data that
    /// does not exist yet. Temporal support is unchanged.
    Lagged,
}

/// Every latent variable of the model, plus the supports its sparse
/// coefficients live on.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub n_nodes: usize,
    pub n_steps: usize,
    pub n_communities: usize,
    pub n_layers: usize,
    pub directed: bool,
    /// memberships[t][l] is a row-major N x K matrix; each row sums to 1.
    pub memberships: Vec<Vec<Vec<f64>>>,
    /// cross[s][t] holds cross-layer coefficients feeding layer s+1 at step
    /// t from layer s, parallel to cross_support[t]. s ranges over 0..L-1.
    pub cross: Vec<Vec<Vec<f64>>>,
    /// temporal[l][ts] holds temporal coefficients feeding (l, ts+1) from
    /// (l, ts), parallel to temporal_support[ts]. ts ranges over 0..T-1.
    pub temporal: Vec<Vec<Vec<f64>>>,
    pub cross_support: Vec<Arc<SupportSet>>,
    pub temporal_support: Vec<Arc<SupportSet>>,
    /// counts[t] is a row-major N x K matrix of latent interaction counts.
    pub counts: Vec<Vec<u32>>,
    /// link_counts[t][e] is the K x K count allocation of the e-th positive
    /// training link at step t (row-major).
    pub link_counts: Vec<Vec<Vec<u32>>>,
    /// Community compatibility rates, K x K row-major.
    pub compat: Vec<f64>,
    /// Expected interaction count per node and step.
    pub scale: f64,
}

impl LatentState {
    /// Membership row of node `i` at (step t, layer l).
    pub fn membership(&self, i: usize, t: usize, l: usize) -> &[f64] {
        let k = self.n_communities;
        &self.memberships[t][l][i * k..(i + 1) * k]
    }

    /// Count row of node `i` at step t.
    pub fn count_row(&self, i: usize, t: usize) -> &[u32] {
        let k = self.n_communities;
        &self.counts[t][i * k..(i + 1) * k]
    }

    /// The concentration contributed by a node's parents: cross-layer
    /// contributors at (t, l-1) plus temporal contributors at (t-1, l).
    /// Zero at (t=0, l=0).
    pub fn parent_concentration(&self, i: usize, t: usize, l: usize) -> Result<Vec<f64>> {
        if i >= self.n_nodes || t >= self.n_steps || l >= self.n_layers {
            return Err(Error::Parameter(format!(
                "site (i={i}, t={t}, l={l}) out of range"
            )));
        }
        let mut out = vec![0.0; self.n_communities];
        self.parent_concentration_into(i, t, l, &mut out);
        Ok(out)
    }

    /// As [`Self::parent_concentration`], writing into a caller buffer.
    /// Bounds must already hold.
    pub fn parent_concentration_into(&self, i: usize, t: usize, l: usize, out: &mut [f64]) {
        self.parent_concentration_filtered(i, t, l, true, out);
    }

    /// As [`Self::parent_concentration_into`], optionally dropping the
    /// temporal term. The sampler's single-step reduction mode uses this to
    /// erase time coupling structurally.
    pub fn parent_concentration_filtered(
        &self,
        i: usize,
        t: usize,
        l: usize,
        include_temporal: bool,
        out: &mut [f64],
    ) {
        let k = self.n_communities;
        out.fill(0.0);
        if l > 0 {
            let support = &self.cross_support[t];
            let range = support.entry_range(i);
            let values = &self.cross[l - 1][t][range];
            let below = &self.memberships[t][l - 1];
            for (&src, &w) in support.sources_of(i).iter().zip(values) {
                let row = &below[src as usize * k..(src as usize + 1) * k];
                for (o, &p) in out.iter_mut().zip(row) {
                    *o += w * p;
                }
            }
        }
        if t > 0 && include_temporal {
            let support = &self.temporal_support[t - 1];
            let range = support.entry_range(i);
            let values = &self.temporal[l][t - 1][range];
            let prev = &self.memberships[t - 1][l];
            for (&src, &w) in support.sources_of(i).iter().zip(values) {
                let row = &prev[src as usize * k..(src as usize + 1) * k];
                for (o, &p) in out.iter_mut().zip(row) {
                    *o += w * p;
                }
            }
        }
    }

    /// Directed interaction rate of the ordered dyad (i, j) at step t.
    pub fn link_rate(&self, i: usize, j: usize, t: usize) -> Result<f64> {
        if i == j {
            return Err(Error::Parameter("link rate requires i != j".into()));
        }
        if i >= self.n_nodes || j >= self.n_nodes || t >= self.n_steps {
            return Err(Error::Parameter(format!("dyad (i={i}, j={j}, t={t}) out of range")));
        }
        Ok(self.link_rate_unchecked(i, j, t))
    }

    fn link_rate_unchecked(&self, i: usize, j: usize, t: usize) -> f64 {
        let k = self.n_communities;
        let xi = self.count_row(i, t);
        let xj = self.count_row(j, t);
        let mut rate = 0.0;
        for (k1, &xik) in xi.iter().enumerate() {
            if xik == 0 {
                continue;
            }
            let lam_row = &self.compat[k1 * k..(k1 + 1) * k];
            let mut inner = 0.0;
            for (lam, &xjk) in lam_row.iter().zip(xj) {
                inner += lam * xjk as f64;
            }
            rate += xik as f64 * inner;
        }
        rate
    }

    /// The rate actually used per dyad: the directed rate for directed data,
    /// the symmetrized average of both orientations otherwise.
    pub fn dyad_rate(&self, i: usize, j: usize, t: usize) -> Result<f64> {
        let r = self.link_rate(i, j, t)?;
        if self.directed {
            Ok(r)
        } else {
            Ok(0.5 * (r + self.link_rate_unchecked(j, i, t)))
        }
    }

    /// Mean cross-layer and temporal coefficient values, NaN when a kind
    /// has no entries (single layer or single step).
    pub fn coefficient_means(&self) -> (f64, f64) {
        let mut cross_sum = 0.0;
        let mut cross_n = 0usize;
        for per_step in &self.cross {
            for values in per_step {
                cross_sum += values.iter().sum::<f64>();
                cross_n += values.len();
            }
        }
        let mut temporal_sum = 0.0;
        let mut temporal_n = 0usize;
        for per_step in &self.temporal {
            for values in per_step {
                temporal_sum += values.iter().sum::<f64>();
                temporal_n += values.len();
            }
        }
        (
            if cross_n > 0 { cross_sum / cross_n as f64 } else { f64::NAN },
            if temporal_n > 0 { temporal_sum / temporal_n as f64 } else { f64::NAN },
        )
    }
}

/// Assembles a full Dirichlet concentration: the parent contribution plus
/// the base `alpha` at (t=0, l=0). An identically zero result (a node with
/// no support anywhere, which the always-present diagonal normally prevents)
/// falls back to the symmetric vector 1/K; the flag reports that this
/// happened so callers can log the deviation.
pub fn dirichlet_concentration(
    parent: &[f64],
    alpha: &[f64],
    t: usize,
    l: usize,
) -> (Vec<f64>, bool) {
    let mut conc: Vec<f64> = if t == 0 && l == 0 {
        parent.iter().zip(alpha).map(|(p, a)| p + a).collect()
    } else {
        parent.to_vec()
    };
    if conc.iter().sum::<f64>() > 0.0 {
        (conc, false)
    } else {
        let k = conc.len();
        conc.fill(1.0 / k as f64);
        (conc, true)
    }
}

/// Probability that a dyad with the given interaction rate carries a link.
pub fn link_prob(rate: f64) -> Result<f64> {
    if !(rate >= 0.0) {
        return Err(Error::Parameter(format!("link probability requires rate >= 0, got {rate}")));
    }
    Ok(-(-rate).exp_m1())
}

/// Overrides for forward simulation; by default everything is drawn from
/// its prior.
#[derive(Debug, Clone, Default)]
pub struct SimOptions {
    /// Fixed K x K compatibility matrix (row-major) instead of a prior draw.
    pub compat: Option<Vec<f64>>,
    /// Fixed count scale instead of a prior draw.
    pub scale: Option<f64>,
}

/// Cross-layer and temporal supports under the lagged rule: cross support
/// at step t mirrors the links at step t-1 (diagonal only at t=0), temporal
/// support at source step ts mirrors the links at ts.
pub fn lagged_supports(
    net: &DynamicNetwork,
) -> (Vec<Arc<SupportSet>>, Vec<Arc<SupportSet>>) {
    let n = net.n_nodes();
    let per_step: Vec<Arc<SupportSet>> = (0..net.n_steps())
        .map(|t| Arc::new(SupportSet::from_links(n, net.edges(t), true)))
        .collect();
    let mut cross = Vec::with_capacity(net.n_steps());
    cross.push(Arc::new(SupportSet::diagonal(n)));
    for t in 1..net.n_steps() {
        cross.push(per_step[t - 1].clone());
    }
    let temporal = per_step[..net.n_steps() - 1].to_vec();
    (cross, temporal)
}

/// Where a simulation takes its coefficient supports from.
enum SupportChoice<'a> {
    /// Build them from the links generated one step earlier.
    Lagged,
    /// Use caller-provided supports (cross per step, temporal per source
    /// step), independent of the generated links.
    Fixed(&'a [Arc<SupportSet>], &'a [Arc<SupportSet>]),
}

/// Simulates a network and its generating state from the model.
///
/// Steps are generated in order; coefficient supports at each step follow
/// the links generated at the previous step (the lagged rule), so the
/// process is a well-defined forward pass. Compatibility and scale may be
/// pinned through `opts` to plant known structure.
pub fn forward_simulate(
    hp: &Hyperparams,
    n_nodes: usize,
    n_steps: usize,
    directed: bool,
    opts: &SimOptions,
    seed: u64,
) -> Result<(DynamicNetwork, LatentState)> {
    simulate_impl(hp, n_nodes, n_steps, directed, opts, seed, SupportChoice::Lagged)
}

/// As [`forward_simulate`], but on caller-fixed supports. Sampler
/// diagnostics use this to simulate from the model whose coefficient
/// structure does not depend on the generated links.
pub fn forward_simulate_on_supports(
    hp: &Hyperparams,
    n_nodes: usize,
    n_steps: usize,
    directed: bool,
    opts: &SimOptions,
    seed: u64,
    cross_support: &[Arc<SupportSet>],
    temporal_support: &[Arc<SupportSet>],
) -> Result<(DynamicNetwork, LatentState)> {
    if cross_support.len() != n_steps || temporal_support.len() != n_steps.saturating_sub(1) {
        return Err(Error::Parameter(format!(
            "expected {n_steps} cross supports and {} temporal supports, got {} and {}",
            n_steps.saturating_sub(1),
            cross_support.len(),
            temporal_support.len()
        )));
    }
    simulate_impl(
        hp,
        n_nodes,
        n_steps,
        directed,
        opts,
        seed,
        SupportChoice::Fixed(cross_support, temporal_support),
    )
}

fn simulate_impl(
    hp: &Hyperparams,
    n_nodes: usize,
    n_steps: usize,
    directed: bool,
    opts: &SimOptions,
    seed: u64,
    choice: SupportChoice<'_>,
) -> Result<(DynamicNetwork, LatentState)> {
    hp.validate()?;
    if n_nodes < 2 || n_steps == 0 {
        return Err(Error::Parameter(format!(
            "simulation requires at least two nodes and one step, got N={n_nodes}, T={n_steps}"
        )));
    }
    let k = hp.n_communities;
    let n_layers = hp.n_layers;

    let compat = match &opts.compat {
        Some(m) => {
            if m.len() != k * k || !m.iter().all(|&v| v > 0.0 && v.is_finite()) {
                return Err(Error::Parameter(
                    "fixed compatibility matrix must be K x K with positive entries".into(),
                ));
            }
            m.clone()
        }
        None => {
            let mut m = vec![0.0; k * k];
            for k1 in 0..k {
                for k2 in 0..k {
                    let mut r =
                        RngStream::for_site(seed, Family::SimLambda, [k1 as u64, k2 as u64, 0, 0]);
                    m[k1 * k + k2] =
                        sample_gamma(hp.compat_shape, 1.0 / hp.compat_rate, &mut r)?;
                }
            }
            m
        }
    };
    let scale = match opts.scale {
        Some(s) => {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Parameter(format!("fixed scale must be positive, got {s}")));
            }
            s
        }
        None => {
            let mut r = RngStream::for_site(seed, Family::SimScale, [0, 0, 0, 0]);
            sample_gamma(hp.scale_shape, 1.0, &mut r)?
        }
    };

    let mut state = LatentState {
        n_nodes,
        n_steps,
        n_communities: k,
        n_layers,
        directed,
        memberships: vec![vec![Vec::new(); n_layers]; n_steps],
        cross: vec![vec![Vec::new(); n_steps]; n_layers.saturating_sub(1)],
        temporal: vec![vec![Vec::new(); n_steps - 1]; n_layers],
        cross_support: Vec::with_capacity(n_steps),
        temporal_support: Vec::with_capacity(n_steps.saturating_sub(1)),
        counts: vec![Vec::new(); n_steps],
        link_counts: vec![Vec::new(); n_steps],
        compat,
        scale,
    };

    let mut links_by_step: Vec<Vec<(u32, u32)>> = Vec::with_capacity(n_steps);
    let mut fallback_hits = 0u64;

    for t in 0..n_steps {
        match &choice {
            SupportChoice::Lagged => {
                // Supports for this step derive from the previous step's
                // links; both coefficient kinds share them.
                let sup = if t == 0 {
                    Arc::new(SupportSet::diagonal(n_nodes))
                } else {
                    Arc::new(SupportSet::from_links(n_nodes, &links_by_step[t - 1], directed))
                };
                state.cross_support.push(sup.clone());
                if t > 0 {
                    state.temporal_support.push(sup);
                }
            }
            SupportChoice::Fixed(cross, temporal) => {
                state.cross_support.push(cross[t].clone());
                if t > 0 {
                    state.temporal_support.push(temporal[t - 1].clone());
                }
            }
        }

        // Coefficient values on those supports.
        for s in 0..n_layers.saturating_sub(1) {
            let sup = state.cross_support[t].clone();
            state.cross[s][t] = draw_coefficients(hp, &sup, s + 1, Family::SimBeta, t, s, seed)?;
        }
        if t > 0 {
            for l in 0..n_layers {
                let sup = state.temporal_support[t - 1].clone();
                state.temporal[l][t - 1] =
                    draw_coefficients(hp, &sup, l, Family::SimGamma, t - 1, l, seed)?;
            }
        }

        // Memberships, bottom layer up so parents exist when needed.
        for l in 0..n_layers {
            let mut mat = vec![0.0; n_nodes * k];
            let mut parent = vec![0.0; k];
            for i in 0..n_nodes {
                state.parent_concentration_into(i, t, l, &mut parent);
                let (conc, fb) = dirichlet_concentration(&parent, &hp.alpha, t, l);
                fallback_hits += u64::from(fb);
                let mut r =
                    RngStream::for_site(seed, Family::SimPi, [i as u64, t as u64, l as u64, 0]);
                let row = sample_dirichlet(&conc, &mut r)?;
                mat[i * k..(i + 1) * k].copy_from_slice(&row);
            }
            state.memberships[t][l] = mat;
        }

        // The observation arm: counts, dyad totals, links.
        let links = resimulate_step_observations(&mut state, t, seed)?;
        links_by_step.push(links);
    }

    if fallback_hits > 0 {
        // The diagonal rule should make this unreachable; a hit means the
        // state walked into a numerically degenerate corner.
        return Err(Error::Degenerate(format!(
            "simulation hit the uniform concentration fallback {fallback_hits} times"
        )));
    }

    let net = DynamicNetwork::new(n_nodes, n_steps, directed, links_by_step)?;
    Ok((net, state))
}

/// Redraws the observation arm at step t (node interaction counts, dyad
/// count totals and their cell allocations) from the current memberships,
/// compatibility, and scale. Writes `counts[t]` and `link_counts[t]` on the
/// state and returns the sorted positive links. Sampler diagnostics reuse
/// this to re-simulate data mid-chain; distinct rounds pass distinct seeds.
pub(crate) fn resimulate_step_observations(
    state: &mut LatentState,
    t: usize,
    seed: u64,
) -> Result<Vec<(u32, u32)>> {
    let k = state.n_communities;
    let n_nodes = state.n_nodes;
    let directed = state.directed;
    let top = state.n_layers - 1;

    let mut counts = vec![0u32; n_nodes * k];
    for i in 0..n_nodes {
        let mut r = RngStream::for_site(seed, Family::SimCount, [i as u64, t as u64, 0, 0]);
        let total = sample_poisson(state.scale, &mut r)?;
        let row = sample_multinomial(total, state.membership(i, t, top), &mut r)?;
        for (c, v) in counts[i * k..(i + 1) * k].iter_mut().zip(row) {
            *c = v as u32;
        }
    }
    state.counts[t] = counts;

    // Dyads: a link appears when the latent pairwise count is positive.
    let mut links: Vec<(u32, u32)> = Vec::new();
    let mut link_counts: Vec<Vec<u32>> = Vec::new();
    let mut cell_weights = vec![0.0; k * k];
    for i in 0..n_nodes {
        let j_start = if directed { 0 } else { i + 1 };
        for j in j_start..n_nodes {
            if i == j {
                continue;
            }
            let rate = pair_cell_weights(state, i, j, t, &mut cell_weights);
            if rate <= 0.0 {
                continue;
            }
            let mut r =
                RngStream::for_site(seed, Family::SimDyad, [i as u64, j as u64, t as u64, 0]);
            let total = sample_poisson(rate, &mut r)?;
            if total == 0 {
                continue;
            }
            let alloc = sample_multinomial(total, &cell_weights, &mut r)?;
            links.push((i as u32, j as u32));
            link_counts.push(alloc.iter().map(|&v| v as u32).collect());
        }
    }
    // Keep link-parallel arrays aligned with the sorted link order used
    // everywhere else.
    let mut order: Vec<usize> = (0..links.len()).collect();
    order.sort_unstable_by_key(|&e| links[e]);
    state.link_counts[t] = order.iter().map(|&e| std::mem::take(&mut link_counts[e])).collect();
    links.sort_unstable();
    Ok(links)
}

/// Per-cell dyad count rates; returns their sum. For undirected data the
/// cells are the symmetrized average of both orientations.
pub(crate) fn pair_cell_weights(
    state: &LatentState,
    i: usize,
    j: usize,
    t: usize,
    out: &mut [f64],
) -> f64 {
    let k = state.n_communities;
    let xi = &state.counts[t][i * k..(i + 1) * k];
    let xj = &state.counts[t][j * k..(j + 1) * k];
    let mut total = 0.0;
    for k1 in 0..k {
        for k2 in 0..k {
            let lam = state.compat[k1 * k + k2];
            let mut w = xi[k1] as f64 * lam * xj[k2] as f64;
            if !state.directed {
                w = 0.5 * (w + xj[k1] as f64 * lam * xi[k2] as f64);
            }
            out[k1 * k + k2] = w;
            total += w;
        }
    }
    total
}

fn draw_coefficients(
    hp: &Hyperparams,
    support: &SupportSet,
    receiving_layer: usize,
    family: Family,
    time_idx: usize,
    layer_idx: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let scale = 1.0 / hp.coeff_rate;
    let mut values = vec![0.0; support.len()];
    for (e, src, dst) in support.iter_entries() {
        let shape = if src == dst {
            hp.c_diag[receiving_layer]
        } else {
            hp.c_offdiag[receiving_layer]
        };
        let mut r = RngStream::for_site(
            seed,
            family,
            [src as u64, dst as u64, time_idx as u64, layer_idx as u64],
        );
        values[e] = sample_gamma(shape, scale, &mut r)?;
    }
    Ok(values)
}

// ---- checkpointing ----
//
// A checkpoint is a directory: `manifest.json` records dimensions,
// hyperparameters, scalars, and the support rule; one little-endian binary
// file per variable family holds the arrays. Reals are stored as raw f64
// bits, so a round trip is exact.

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub iteration: u64,
    pub n_nodes: usize,
    pub n_steps: usize,
    pub directed: bool,
    pub support_rule: SupportRule,
    pub scale: f64,
    pub hyperparams: Hyperparams,
}

pub fn save_checkpoint(
    dir: &Path,
    state: &LatentState,
    hp: &Hyperparams,
    iteration: u64,
    support_rule: SupportRule,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = CheckpointMeta {
        format_version: 1,
        iteration,
        n_nodes: state.n_nodes,
        n_steps: state.n_steps,
        directed: state.directed,
        support_rule,
        scale: state.scale,
        hyperparams: hp.clone(),
    };
    let json = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::Inconsistency(format!("manifest serialization failed: {e}")))?;
    fs::write(dir.join("manifest.json"), json)?;

    let mut w = section_writer(dir, "memberships.bin")?;
    for step in &state.memberships {
        for layer in step {
            write_f64s(&mut w, layer)?;
        }
    }
    w.flush()?;

    let mut w = section_writer(dir, "cross.bin")?;
    for per_step in &state.cross {
        for values in per_step {
            write_f64s(&mut w, values)?;
        }
    }
    w.flush()?;

    let mut w = section_writer(dir, "temporal.bin")?;
    for per_step in &state.temporal {
        for values in per_step {
            write_f64s(&mut w, values)?;
        }
    }
    w.flush()?;

    let mut w = section_writer(dir, "counts.bin")?;
    for step in &state.counts {
        write_u32s(&mut w, step)?;
    }
    w.flush()?;

    let mut w = section_writer(dir, "link_counts.bin")?;
    for step in &state.link_counts {
        write_u64(&mut w, step.len() as u64)?;
        for cells in step {
            write_u32s(&mut w, cells)?;
        }
    }
    w.flush()?;

    let mut w = section_writer(dir, "compat.bin")?;
    write_f64s(&mut w, &state.compat)?;
    w.flush()?;
    Ok(())
}

/// Restores a checkpoint against the data it was fitted to. Supports are
/// rebuilt from the network (and mask) according to the recorded rule, and
/// array lengths are validated against them.
pub fn load_checkpoint(
    dir: &Path,
    net: &DynamicNetwork,
    mask: &HoldoutMask,
) -> Result<(LatentState, CheckpointMeta)> {
    let json = fs::read_to_string(dir.join("manifest.json"))?;
    let meta: CheckpointMeta = serde_json::from_str(&json)
        .map_err(|e| Error::Validation { line: None, msg: format!("bad manifest: {e}") })?;
    if meta.format_version != 1 {
        return Err(Error::Validation {
            line: None,
            msg: format!("unsupported checkpoint format version {}", meta.format_version),
        });
    }
    if meta.n_nodes != net.n_nodes() || meta.n_steps != net.n_steps()
        || meta.directed != net.directed()
    {
        return Err(Error::Validation {
            line: None,
            msg: "checkpoint dimensions do not match the network".into(),
        });
    }
    meta.hyperparams.validate()?;
    let k = meta.hyperparams.n_communities;
    let n_layers = meta.hyperparams.n_layers;
    let (n_nodes, n_steps) = (meta.n_nodes, meta.n_steps);

    let (cross_support, temporal_support, links): (
        Vec<Arc<SupportSet>>,
        Vec<Arc<SupportSet>>,
        Vec<Vec<(u32, u32)>>,
    ) = match meta.support_rule {
        SupportRule::Observed => {
            let view = TrainingView::new(net, mask)?;
            let cross: Vec<_> = (0..n_steps).map(|t| view.support(t).clone()).collect();
            let temporal: Vec<_> =
                (0..n_steps.saturating_sub(1)).map(|t| view.support(t).clone()).collect();
            let links = (0..n_steps).map(|t| view.links(t).to_vec()).collect();
            (cross, temporal, links)
        }
        SupportRule::Lagged => {
            if !mask.is_empty() {
                return Err(Error::Validation {
                    line: None,
                    msg: "simulation checkpoints cannot carry a holdout mask".into(),
                });
            }
            let (cross, temporal) = lagged_supports(net);
            let links = (0..n_steps)
                .map(|t| {
                    net.edges(t)
                        .iter()
                        .copied()
                        .filter(|&(i, j)| net.directed() || i < j)
                        .collect()
                })
                .collect();
            (cross, temporal, links)
        }
    };

    let mut r = section_reader(dir, "memberships.bin")?;
    let mut memberships = vec![vec![Vec::new(); n_layers]; n_steps];
    for step in memberships.iter_mut() {
        for layer in step.iter_mut() {
            *layer = read_f64s(&mut r, n_nodes * k)?;
        }
    }

    let mut r = section_reader(dir, "cross.bin")?;
    let mut cross = vec![vec![Vec::new(); n_steps]; n_layers.saturating_sub(1)];
    for per_step in cross.iter_mut() {
        for (t, values) in per_step.iter_mut().enumerate() {
            *values = read_f64s(&mut r, cross_support[t].len())?;
        }
    }

    let mut r = section_reader(dir, "temporal.bin")?;
    let mut temporal = vec![vec![Vec::new(); n_steps - 1]; n_layers];
    for per_step in temporal.iter_mut() {
        for (ts, values) in per_step.iter_mut().enumerate() {
            *values = read_f64s(&mut r, temporal_support[ts].len())?;
        }
    }

    let mut r = section_reader(dir, "counts.bin")?;
    let mut counts = vec![Vec::new(); n_steps];
    for step in counts.iter_mut() {
        *step = read_u32s(&mut r, n_nodes * k)?;
    }

    let mut r = section_reader(dir, "link_counts.bin")?;
    let mut link_counts = vec![Vec::new(); n_steps];
    for (t, step) in link_counts.iter_mut().enumerate() {
        let len = read_u64(&mut r)? as usize;
        if len != links[t].len() {
            return Err(Error::Inconsistency(format!(
                "checkpoint has {len} link allocations at step {t}, expected {}",
                links[t].len()
            )));
        }
        for _ in 0..len {
            step.push(read_u32s(&mut r, k * k)?);
        }
    }

    let mut r = section_reader(dir, "compat.bin")?;
    let compat = read_f64s(&mut r, k * k)?;

    let state = LatentState {
        n_nodes,
        n_steps,
        n_communities: k,
        n_layers,
        directed: meta.directed,
        memberships,
        cross,
        temporal,
        cross_support,
        temporal_support,
        counts,
        link_counts,
        compat,
        scale: meta.scale,
    };
    Ok((state, meta))
}

fn section_writer(dir: &Path, name: &str) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(fs::File::create(dir.join(name))?))
}

fn section_reader(dir: &Path, name: &str) -> Result<BufReader<fs::File>> {
    Ok(BufReader::new(fs::File::open(dir.join(name))?))
}

pub(crate) fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub(crate) fn write_f64s<W: Write>(w: &mut W, values: &[f64]) -> Result<()> {
    write_u64(w, values.len() as u64)?;
    for v in values {
        w.write_all(&v.to_bits().to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, expected: usize) -> Result<Vec<f64>> {
    let len = read_u64(r)? as usize;
    if len != expected {
        return Err(Error::Inconsistency(format!(
            "checkpoint section has {len} reals, expected {expected}"
        )));
    }
    let mut out = Vec::with_capacity(len);
    let mut buf = [0u8; 8];
    for _ in 0..len {
        r.read_exact(&mut buf)?;
        out.push(f64::from_bits(u64::from_le_bytes(buf)));
    }
    Ok(out)
}

fn write_u32s<W: Write>(w: &mut W, values: &[u32]) -> Result<()> {
    write_u64(w, values.len() as u64)?;
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32s<R: Read>(r: &mut R, expected: usize) -> Result<Vec<u32>> {
    let len = read_u64(r)? as usize;
    if len != expected {
        return Err(Error::Inconsistency(format!(
            "checkpoint section has {len} counts, expected {expected}"
        )));
    }
    let mut out = Vec::with_capacity(len);
    let mut buf = [0u8; 4];
    for _ in 0..len {
        r.read_exact(&mut buf)?;
        out.push(u32::from_le_bytes(buf));
    }
    Ok(out)
}
