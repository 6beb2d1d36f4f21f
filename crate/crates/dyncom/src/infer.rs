//! Gibbs sampling over the full latent state.
//!
//! Each sweep runs in a fixed order: an upward-backward pass that converts
//! observed counts into per-site auxiliary counts (walking steps from last
//! to first and layers from top to bottom), then conditional redraws of
//! memberships, propagation coefficients, node interaction counts, per-link
//! count allocations, the compatibility matrix, and the count scale.
//!
//! Every random draw comes from a dedicated counter-based stream keyed by
//! (variable family, site indices, iteration), so results are independent
//! of thread count and a resumed run continues bit-for-bit where it left
//! off.

use std::fs;
use std::io::{BufReader, BufWriter, Write as _};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dist::{
    sample_beta, sample_categorical, sample_crt, sample_dirichlet, sample_gamma,
    sample_multinomial, sample_poisson, sample_ztp,
};
use crate::error::{Error, Result};
use crate::graph::{DynamicNetwork, HoldoutMask, TrainingView};
use crate::model::{
    dirichlet_concentration, load_checkpoint, pair_cell_weights, read_f64s, save_checkpoint,
    write_f64s, Hyperparams, LatentState, SupportRule,
};
use crate::rng::{stream_key, Family, RngStream};

/// Smallest rate a positive link is allowed to carry when its allocation is
/// redrawn; hits are counted in [`SamplerStats`].
pub const RATE_FLOOR: f64 = 1e-12;

/// Boundary mass above which the count update widens its enumeration
/// window.
const WINDOW_TAIL_MASS: f64 = 1e-6;

/// Hard cap on the count enumeration window.
const WINDOW_CAP: usize = 1 << 10;

/// Sampler behavior switches.
#[derive(Debug, Clone)]
pub struct GibbsOptions {
    /// Worker threads for the parallel sections; 0 uses the process-global
    /// pool. Results do not depend on this value.
    pub threads: usize,
    /// When false, all temporal code paths are skipped structurally. Only
    /// valid for single-step data; used to verify the single-step reduction.
    pub temporal_coupling: bool,
    /// Added to the posterior shape of every cross-layer coefficient. Zero
    /// in normal operation; diagnostics set it to plant a deliberate bug.
    pub corrupt_cross_shape: f64,
    /// Resample the shared coefficient prior rate each sweep from its
    /// conjugate posterior under a unit Gamma hyperprior.
    pub update_coeff_rate: bool,
}

impl Default for GibbsOptions {
    fn default() -> Self {
        GibbsOptions {
            threads: 0,
            temporal_coupling: true,
            corrupt_cross_shape: 0.0,
            update_coeff_rate: false,
        }
    }
}

/// Numerical-corner counters accumulated across sweeps. All of these are
/// measure-zero events under the model; persistent growth indicates a
/// misconfigured instance.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerStats {
    /// Positive links whose rate had to be floored at [`RATE_FLOOR`].
    pub rate_floor_hits: u64,
    /// Dirichlet concentrations that fell back to the uniform vector.
    pub concentration_fallbacks: u64,
    /// Auxiliary table counts whose split weights vanished (sent to the
    /// diagonal entry).
    pub degenerate_splits: u64,
    /// Link allocations whose cell weights vanished (spread uniformly).
    pub degenerate_allocations: u64,
    /// Count coordinates whose membership weight underflowed to zero while
    /// allocations still demanded them; pinned at the limiting value 1.
    pub pinned_counts: u64,
}

/// Auxiliary variables of one sweep, shaped like the state they were drawn
/// for.
#[derive(Debug, Clone)]
pub struct PropagationWorkspace {
    /// demand[t][l]: N x K counts each site must explain; the top layer
    /// starts from the node interaction counts, everything else accumulates
    /// allocations from children.
    pub demand: Vec<Vec<Vec<u32>>>,
    /// tables[t][l]: N x K table counts drawn per site component.
    pub tables: Vec<Vec<Vec<u32>>>,
    /// retain[t][l]: per-node Beta auxiliaries in (0, 1]; a coefficient's
    /// posterior exposure is -ln(retain) of its receiving site.
    pub retain: Vec<Vec<Vec<f64>>>,
    /// to_cross[s][t]: table counts allocated to cross-layer parents,
    /// parallel to the cross coefficients (entry-major, K per entry).
    pub to_cross: Vec<Vec<Vec<u32>>>,
    /// to_temporal[l][ts]: table counts allocated to temporal parents.
    pub to_temporal: Vec<Vec<Vec<u32>>>,
}

impl PropagationWorkspace {
    pub fn for_state(state: &LatentState) -> Self {
        let (n, k) = (state.n_nodes, state.n_communities);
        let (t_len, l_len) = (state.n_steps, state.n_layers);
        PropagationWorkspace {
            demand: vec![vec![vec![0; n * k]; l_len]; t_len],
            tables: vec![vec![vec![0; n * k]; l_len]; t_len],
            retain: vec![vec![vec![1.0; n]; l_len]; t_len],
            to_cross: (0..l_len.saturating_sub(1))
                .map(|_| (0..t_len).map(|t| vec![0; state.cross_support[t].len() * k]).collect())
                .collect(),
            to_temporal: (0..l_len)
                .map(|_| {
                    (0..t_len.saturating_sub(1))
                        .map(|ts| vec![0; state.temporal_support[ts].len() * k])
                        .collect()
                })
                .collect(),
        }
    }

    /// Zeroes everything and seeds the top layer's demand with the node
    /// interaction counts.
    fn reset(&mut self, state: &LatentState) {
        let top = state.n_layers - 1;
        for (t, per_layer) in self.demand.iter_mut().enumerate() {
            for (l, slab) in per_layer.iter_mut().enumerate() {
                if l == top {
                    slab.copy_from_slice(&state.counts[t]);
                } else {
                    slab.fill(0);
                }
            }
        }
        for per_layer in &mut self.tables {
            for slab in per_layer {
                slab.fill(0);
            }
        }
        for per_layer in &mut self.retain {
            for slab in per_layer {
                slab.fill(1.0);
            }
        }
        for per_step in &mut self.to_cross {
            for slab in per_step {
                slab.fill(0);
            }
        }
        for per_step in &mut self.to_temporal {
            for slab in per_step {
                slab.fill(0);
            }
        }
    }
}

/// Per-node result of the auxiliary draw at one site.
struct NodeAux {
    retain: f64,
    tables: Vec<u32>,
    cross_alloc: Vec<u32>,
    temporal_alloc: Vec<u32>,
    degenerate_splits: u64,
}

pub struct Sampler<'a> {
    view: &'a TrainingView,
    pub hp: Hyperparams,
    pub opts: GibbsOptions,
    pub seed: u64,
    pub stats: SamplerStats,
    pool: Option<rayon::ThreadPool>,
    ln_fact: Vec<f64>,
    ln_x: Vec<f64>,
    weight_buf: Vec<f64>,
}

impl<'a> Sampler<'a> {
    pub fn new(
        view: &'a TrainingView,
        hp: Hyperparams,
        opts: GibbsOptions,
        seed: u64,
    ) -> Result<Self> {
        hp.validate()?;
        if !opts.temporal_coupling && view.n_steps() > 1 {
            return Err(Error::Config(
                "disabling temporal coupling requires single-step data".into(),
            ));
        }
        if !(opts.corrupt_cross_shape >= 0.0 && opts.corrupt_cross_shape.is_finite()) {
            return Err(Error::Config("corrupt_cross_shape must be finite and >= 0".into()));
        }
        let pool = if opts.threads > 0 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(opts.threads)
                    .build()
                    .map_err(|e| Error::Config(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Sampler {
            view,
            hp,
            opts,
            seed,
            stats: SamplerStats::default(),
            pool,
            ln_fact: vec![0.0],
            ln_x: vec![0.0],
            weight_buf: Vec::new(),
        })
    }

    pub fn view(&self) -> &TrainingView {
        self.view
    }

    fn run<T: Send>(&self, f: impl FnOnce() -> T + Send) -> T {
        match &self.pool {
            Some(p) => p.install(f),
            None => f(),
        }
    }

    fn grow_tables(&mut self, upto: usize) {
        while self.ln_fact.len() <= upto {
            let x = self.ln_fact.len() as f64;
            self.ln_x.push(x.ln());
            self.ln_fact.push(self.ln_fact.last().unwrap() + x.ln());
        }
    }

    /// Draws an initial state from the priors on the training supports:
    /// compatibility and scale from their Gammas, coefficients from theirs,
    /// memberships forward through the network, counts from the membership
    /// rates (bumped so every linked node can explain at least one count),
    /// and link allocations from truncated totals.
    pub fn init_state(&mut self) -> Result<LatentState> {
        let n = self.view.n_nodes();
        let t_len = self.view.n_steps();
        let k = self.hp.n_communities;
        let l_len = self.hp.n_layers;
        let directed = self.view.directed();
        let seed = self.seed;

        let mut compat = vec![0.0; k * k];
        for k1 in 0..k {
            for k2 in 0..k {
                let mut r =
                    RngStream::for_site(seed, Family::InitLambda, [k1 as u64, k2 as u64, 0, 0]);
                compat[k1 * k + k2] =
                    sample_gamma(self.hp.compat_shape, 1.0 / self.hp.compat_rate, &mut r)?;
            }
        }
        let scale = {
            let mut r = RngStream::for_site(seed, Family::InitScale, [0, 0, 0, 0]);
            sample_gamma(self.hp.scale_shape, 1.0, &mut r)?
        };

        let mut state = LatentState {
            n_nodes: n,
            n_steps: t_len,
            n_communities: k,
            n_layers: l_len,
            directed,
            memberships: vec![vec![Vec::new(); l_len]; t_len],
            cross: vec![vec![Vec::new(); t_len]; l_len.saturating_sub(1)],
            temporal: vec![vec![Vec::new(); t_len.saturating_sub(1)]; l_len],
            cross_support: (0..t_len).map(|t| self.view.support(t).clone()).collect(),
            temporal_support: (0..t_len.saturating_sub(1))
                .map(|t| self.view.support(t).clone())
                .collect(),
            counts: vec![Vec::new(); t_len],
            link_counts: vec![Vec::new(); t_len],
            compat,
            scale,
        };

        let coeff_scale = 1.0 / self.hp.coeff_rate;
        for t in 0..t_len {
            for s in 0..l_len.saturating_sub(1) {
                let sup = state.cross_support[t].clone();
                let mut values = vec![0.0; sup.len()];
                for (e, src, dst) in sup.iter_entries() {
                    let shape = if src == dst {
                        self.hp.c_diag[s + 1]
                    } else {
                        self.hp.c_offdiag[s + 1]
                    };
                    let mut r = RngStream::for_site(
                        seed,
                        Family::InitBeta,
                        [src as u64, dst as u64, t as u64, s as u64],
                    );
                    values[e] = sample_gamma(shape, coeff_scale, &mut r)?;
                }
                state.cross[s][t] = values;
            }
            if t > 0 && self.opts.temporal_coupling {
                let ts = t - 1;
                for l in 0..l_len {
                    let sup = state.temporal_support[ts].clone();
                    let mut values = vec![0.0; sup.len()];
                    for (e, src, dst) in sup.iter_entries() {
                        let shape = if src == dst {
                            self.hp.c_diag[l]
                        } else {
                            self.hp.c_offdiag[l]
                        };
                        let mut r = RngStream::for_site(
                            seed,
                            Family::InitGamma,
                            [src as u64, dst as u64, ts as u64, l as u64],
                        );
                        values[e] = sample_gamma(shape, coeff_scale, &mut r)?;
                    }
                    state.temporal[l][ts] = values;
                }
            }

            for l in 0..l_len {
                let mut mat = vec![0.0; n * k];
                let mut parent = vec![0.0; k];
                for i in 0..n {
                    state.parent_concentration_filtered(
                        i,
                        t,
                        l,
                        self.opts.temporal_coupling,
                        &mut parent,
                    );
                    let (conc, fb) = dirichlet_concentration(&parent, &self.hp.alpha, t, l);
                    self.stats.concentration_fallbacks += u64::from(fb);
                    let mut r = RngStream::for_site(
                        seed,
                        Family::InitPi,
                        [i as u64, t as u64, l as u64, 0],
                    );
                    let row = sample_dirichlet(&conc, &mut r)?;
                    mat[i * k..(i + 1) * k].copy_from_slice(&row);
                }
                state.memberships[t][l] = mat;
            }

            let mut counts = vec![0u32; n * k];
            for i in 0..n {
                let mut r =
                    RngStream::for_site(seed, Family::InitX, [i as u64, t as u64, 0, 0]);
                let row = state.membership(i, t, l_len - 1);
                for kk in 0..k {
                    counts[i * k + kk] = sample_poisson(scale * row[kk], &mut r)? as u32;
                }
            }
            // Nodes with a positive training link must be able to explain at
            // least one interaction.
            let mut linked = vec![false; n];
            for &(i, j) in self.view.links(t) {
                linked[i as usize] = true;
                linked[j as usize] = true;
            }
            for i in 0..n {
                if linked[i] && counts[i * k..(i + 1) * k].iter().all(|&c| c == 0) {
                    let row = state.membership(i, t, l_len - 1);
                    let best = row
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .map(|(kk, _)| kk)
                        .unwrap_or(0);
                    counts[i * k + best] = 1;
                }
            }
            state.counts[t] = counts;

            let links = self.view.links(t);
            let mut allocations = Vec::with_capacity(links.len());
            let mut cells = vec![0.0; k * k];
            for &(i, j) in links {
                let raw = pair_cell_weights(&state, i as usize, j as usize, t, &mut cells);
                let (rate, floored) = if raw > 0.0 { (raw, false) } else { (RATE_FLOOR, true) };
                self.stats.rate_floor_hits += u64::from(floored);
                let mut r = RngStream::for_site(
                    seed,
                    Family::InitC,
                    [i as u64, j as u64, t as u64, 0],
                );
                let total = sample_ztp(rate, &mut r)?;
                let (alloc, degenerate) = allocate_cells(total, &cells, &mut r)?;
                self.stats.degenerate_allocations += u64::from(degenerate);
                allocations.push(alloc);
            }
            state.link_counts[t] = allocations;
        }
        Ok(state)
    }

    /// Walks sites from the last step to the first and the top layer to the
    /// bottom, drawing per-site auxiliaries (retain probability, table
    /// counts) and splitting the tables onto cross-layer and temporal
    /// parents, whose demand they become. The origin site (t=0, l=0) has no
    /// parents and draws nothing.
    pub fn upward_backward_pass(
        &mut self,
        state: &LatentState,
        ws: &mut PropagationWorkspace,
        iter: u64,
    ) -> Result<()> {
        ws.reset(state);
        let n = state.n_nodes;
        let k = state.n_communities;
        let seed = self.seed;
        let temporal_on = self.opts.temporal_coupling;

        for t in (0..state.n_steps).rev() {
            for l in (0..state.n_layers).rev() {
                if t == 0 && l == 0 {
                    continue;
                }
                let has_cross = l > 0;
                let has_temporal = t > 0 && temporal_on;
                let demand_slab: &[u32] = &ws.demand[t][l];

                let aux: Vec<NodeAux> = self.run(|| {
                    (0..n)
                        .into_par_iter()
                        .map(|i| -> Result<NodeAux> {
                            draw_node_aux(
                                state,
                                demand_slab,
                                i,
                                t,
                                l,
                                has_cross,
                                has_temporal,
                                seed,
                                iter,
                            )
                        })
                        .collect::<Result<Vec<_>>>()
                })?;

                for (i, a) in aux.iter().enumerate() {
                    ws.retain[t][l][i] = a.retain;
                    ws.tables[t][l][i * k..(i + 1) * k].copy_from_slice(&a.tables);
                    self.stats.degenerate_splits += a.degenerate_splits;
                }
                if has_cross {
                    let sup = state.cross_support[t].clone();
                    let slab = &mut ws.to_cross[l - 1][t];
                    let target = &mut ws.demand[t][l - 1];
                    for (i, a) in aux.iter().enumerate() {
                        if a.cross_alloc.is_empty() {
                            continue;
                        }
                        let range = sup.entry_range(i);
                        let sources = sup.sources_of(i);
                        for (e_local, e) in range.enumerate() {
                            let src = sources[e_local] as usize;
                            for kk in 0..k {
                                let v = a.cross_alloc[e_local * k + kk];
                                if v > 0 {
                                    slab[e * k + kk] = v;
                                    target[src * k + kk] += v;
                                }
                            }
                        }
                    }
                }
                if has_temporal {
                    let sup = state.temporal_support[t - 1].clone();
                    let slab = &mut ws.to_temporal[l][t - 1];
                    let target = &mut ws.demand[t - 1][l];
                    for (i, a) in aux.iter().enumerate() {
                        if a.temporal_alloc.is_empty() {
                            continue;
                        }
                        let range = sup.entry_range(i);
                        let sources = sup.sources_of(i);
                        for (e_local, e) in range.enumerate() {
                            let src = sources[e_local] as usize;
                            for kk in 0..k {
                                let v = a.temporal_alloc[e_local * k + kk];
                                if v > 0 {
                                    slab[e * k + kk] = v;
                                    target[src * k + kk] += v;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Redraws every membership row from its Dirichlet conditional, walking
    /// steps and layers forward so parents are already refreshed.
    pub fn sample_memberships(
        &mut self,
        state: &mut LatentState,
        ws: &PropagationWorkspace,
        iter: u64,
    ) -> Result<()> {
        let n = state.n_nodes;
        let k = state.n_communities;
        let mut conc_buf = vec![0.0; k];
        for t in 0..state.n_steps {
            for l in 0..state.n_layers {
                let mut mat = vec![0.0; n * k];
                for i in 0..n {
                    state.parent_concentration_filtered(
                        i,
                        t,
                        l,
                        self.opts.temporal_coupling,
                        &mut conc_buf,
                    );
                    let demand = &ws.demand[t][l][i * k..(i + 1) * k];
                    for (c, &d) in conc_buf.iter_mut().zip(demand) {
                        *c += d as f64;
                    }
                    let (conc, fb) = dirichlet_concentration(&conc_buf, &self.hp.alpha, t, l);
                    self.stats.concentration_fallbacks += u64::from(fb);
                    let mut r = RngStream::for_site(
                        self.seed,
                        Family::Pi,
                        [i as u64, t as u64, l as u64, iter],
                    );
                    let row = sample_dirichlet(&conc, &mut r)?;
                    mat[i * k..(i + 1) * k].copy_from_slice(&row);
                }
                state.memberships[t][l] = mat;
            }
        }
        Ok(())
    }

    /// Redraws every propagation coefficient from its Gamma conditional:
    /// shape is the prior shape plus the tables allocated to the entry,
    /// scale is 1 / (prior rate - ln(retain)) of the receiving site.
    pub fn sample_coefficients(
        &mut self,
        state: &mut LatentState,
        ws: &PropagationWorkspace,
        iter: u64,
    ) -> Result<()> {
        let k = state.n_communities;
        let l_len = state.n_layers;
        for t in 0..state.n_steps {
            for s in 0..l_len.saturating_sub(1) {
                let sup = state.cross_support[t].clone();
                let alloc = &ws.to_cross[s][t];
                let retain = &ws.retain[t][s + 1];
                let values = &mut state.cross[s][t];
                for (e, src, dst) in sup.iter_entries() {
                    let base = if src == dst {
                        self.hp.c_diag[s + 1]
                    } else {
                        self.hp.c_offdiag[s + 1]
                    };
                    let extra: u64 =
                        alloc[e * k..(e + 1) * k].iter().map(|&v| u64::from(v)).sum();
                    let shape = base + self.opts.corrupt_cross_shape + extra as f64;
                    let exposure = -retain[dst as usize].max(f64::MIN_POSITIVE).ln();
                    let scale = 1.0 / (self.hp.coeff_rate + exposure);
                    let mut r = RngStream::new(
                        self.seed,
                        stream_key(&[
                            Family::Beta as u64,
                            src as u64,
                            dst as u64,
                            t as u64,
                            s as u64,
                            iter,
                        ]),
                    );
                    values[e] = sample_gamma(shape, scale, &mut r)?;
                }
            }
            if t > 0 && self.opts.temporal_coupling {
                let ts = t - 1;
                for l in 0..l_len {
                    let sup = state.temporal_support[ts].clone();
                    let alloc = &ws.to_temporal[l][ts];
                    let retain = &ws.retain[t][l];
                    let values = &mut state.temporal[l][ts];
                    for (e, src, dst) in sup.iter_entries() {
                        let base = if src == dst {
                            self.hp.c_diag[l]
                        } else {
                            self.hp.c_offdiag[l]
                        };
                        let extra: u64 =
                            alloc[e * k..(e + 1) * k].iter().map(|&v| u64::from(v)).sum();
                        let shape = base + extra as f64;
                        let exposure = -retain[dst as usize].max(f64::MIN_POSITIVE).ln();
                        let scale = 1.0 / (self.hp.coeff_rate + exposure);
                        let mut r = RngStream::new(
                            self.seed,
                            stream_key(&[
                                Family::Gamma as u64,
                                src as u64,
                                dst as u64,
                                ts as u64,
                                l as u64,
                                iter,
                            ]),
                        );
                        values[e] = sample_gamma(shape, scale, &mut r)?;
                    }
                }
            }
        }
        Ok(())
    }

    /// Redraws every node interaction count coordinate by enumeration over
    /// a finite window, scanning nodes and components in order. The
    /// conditional mass at x is proportional to
    /// (prior rate)^x e^(-x exposure) x^(incident allocation) / x!.
    pub fn sample_counts(&mut self, state: &mut LatentState, iter: u64) -> Result<()> {
        let n = state.n_nodes;
        let k = state.n_communities;
        let top = state.n_layers - 1;
        let directed = state.directed;

        // Undirected exposure uses the symmetrized compatibility.
        let lam_sym: Vec<f64> = if directed {
            Vec::new()
        } else {
            let mut m = vec![0.0; k * k];
            for k1 in 0..k {
                for k2 in 0..k {
                    m[k1 * k + k2] = 0.5 * (state.compat[k1 * k + k2] + state.compat[k2 * k + k1]);
                }
            }
            m
        };

        let window_base = ((3.0 * state.scale / k as f64).ceil() as usize).clamp(30, WINDOW_CAP);
        self.grow_tables(window_base);

        for t in 0..state.n_steps {
            let memb_slab: &[f64] = &state.memberships[t][top];
            let counts = &mut state.counts[t];
            // Community column sums; integer-valued, exact in f64.
            let mut col = vec![0.0; k];
            for row in counts.chunks_exact(k) {
                for (c, &x) in col.iter_mut().zip(row) {
                    *c += x as f64;
                }
            }
            // Incident allocation mass per (node, component).
            let mut incident = vec![0u64; n * k];
            for (e, &(i, j)) in self.view.links(t).iter().enumerate() {
                let cells = &state.link_counts[t][e];
                for k1 in 0..k {
                    for k2 in 0..k {
                        let c = u64::from(cells[k1 * k + k2]);
                        if c > 0 {
                            incident[i as usize * k + k1] += c;
                            incident[j as usize * k + k2] += c;
                        }
                    }
                }
            }

            let mut partner_out = vec![0.0; k];
            let mut partner_in = vec![0.0; k];
            for i in 0..n {
                // Sum of partner count rows excluded from the likelihood:
                // held-out partners, plus the node itself. The remainder
                // (col - own - excluded) is invariant while this node's own
                // coordinates change, because col tracks them exactly.
                partner_out.fill(0.0);
                for &j in self.view.heldout_out(t, i) {
                    let row = &counts[j as usize * k..(j as usize + 1) * k];
                    for (p, &x) in partner_out.iter_mut().zip(row) {
                        *p += x as f64;
                    }
                }
                if directed {
                    partner_in.fill(0.0);
                    for &j in self.view.heldout_in(t, i) {
                        let row = &counts[j as usize * k..(j as usize + 1) * k];
                        for (p, &x) in partner_in.iter_mut().zip(row) {
                            *p += x as f64;
                        }
                    }
                }
                let own = &counts[i * k..(i + 1) * k];
                let base_out: Vec<f64> = (0..k)
                    .map(|kk| col[kk] - own[kk] as f64 - partner_out[kk])
                    .collect();
                let base_in: Vec<f64> = if directed {
                    (0..k).map(|kk| col[kk] - own[kk] as f64 - partner_in[kk]).collect()
                } else {
                    Vec::new()
                };

                let membership_row = &memb_slab[i * k..(i + 1) * k];
                for kk in 0..k {
                    let exposure = if directed {
                        let mut e = 0.0;
                        for k2 in 0..k {
                            e += state.compat[kk * k + k2] * base_out[k2];
                        }
                        for k1 in 0..k {
                            e += state.compat[k1 * k + kk] * base_in[k1];
                        }
                        e
                    } else {
                        let mut e = 0.0;
                        for k2 in 0..k {
                            e += lam_sym[kk * k + k2] * base_out[k2];
                        }
                        e
                    };
                    let prior_rate = state.scale * membership_row[kk];
                    let inc = incident[i * k + kk];
                    let mut r = RngStream::for_site(
                        self.seed,
                        Family::CountX,
                        [i as u64, t as u64, kk as u64, iter],
                    );
                    let new = self.draw_count(prior_rate, exposure, inc, window_base, &mut r)?;
                    let old = counts[i * k + kk];
                    if new != old {
                        col[kk] += new as f64 - old as f64;
                        counts[i * k + kk] = new;
                    }
                }
            }
        }
        Ok(())
    }

    /// One windowed categorical draw for a count coordinate. The window
    /// doubles (up to a hard cap) while the boundary carries visible mass.
    fn draw_count(
        &mut self,
        prior_rate: f64,
        exposure: f64,
        incident: u64,
        window_base: usize,
        rng: &mut RngStream,
    ) -> Result<u32> {
        if !(prior_rate > 0.0) {
            // The membership component underflowed to exactly zero. Without
            // incident allocations the conditional is a point mass at zero;
            // with them, its limit concentrates at the smallest feasible
            // count.
            if incident == 0 {
                return Ok(0);
            }
            self.stats.pinned_counts += 1;
            return Ok(1);
        }
        let per_unit = prior_rate.ln() - exposure;
        let inc = incident as f64;
        let mut window = window_base;
        loop {
            self.grow_tables(window);
            self.weight_buf.clear();
            let mut max_lw = if incident > 0 { f64::NEG_INFINITY } else { 0.0 };
            self.weight_buf.push(if incident > 0 { f64::NEG_INFINITY } else { 0.0 });
            for x in 1..=window {
                let lw = x as f64 * per_unit + inc * self.ln_x[x] - self.ln_fact[x];
                self.weight_buf.push(lw);
                if lw > max_lw {
                    max_lw = lw;
                }
            }
            let mut total = 0.0;
            for lw in self.weight_buf.iter_mut() {
                *lw = (*lw - max_lw).exp();
                total += *lw;
            }
            if self.weight_buf[window] / total > WINDOW_TAIL_MASS && window < WINDOW_CAP {
                window = (window * 2).min(WINDOW_CAP);
                continue;
            }
            let x = sample_categorical(&self.weight_buf, rng)?;
            return Ok(x as u32);
        }
    }

    /// Redraws the per-link count allocations: totals from a zero-truncated
    /// Poisson at the current link rate, cells from the conditional
    /// multinomial over community pairs.
    pub fn sample_link_allocations(&mut self, state: &mut LatentState, iter: u64) -> Result<()> {
        let k2 = state.n_communities * state.n_communities;
        let seed = self.seed;
        for t in 0..state.n_steps {
            let links = self.view.links(t);
            let state_ref: &LatentState = state;
            let results: Vec<(Vec<u32>, bool, bool)> = self.run(|| {
                links
                    .par_iter()
                    .map(|&(i, j)| -> Result<(Vec<u32>, bool, bool)> {
                        let mut cells = vec![0.0; k2];
                        let raw =
                            pair_cell_weights(state_ref, i as usize, j as usize, t, &mut cells);
                        let (rate, floored) =
                            if raw > 0.0 { (raw, false) } else { (RATE_FLOOR, true) };
                        let mut r = RngStream::for_site(
                            seed,
                            Family::CountC,
                            [i as u64, j as u64, t as u64, iter],
                        );
                        let total = sample_ztp(rate, &mut r)?;
                        let (alloc, degenerate) = allocate_cells(total, &cells, &mut r)?;
                        Ok((alloc, floored, degenerate))
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            let mut allocations = Vec::with_capacity(results.len());
            for (alloc, floored, degenerate) in results {
                self.stats.rate_floor_hits += u64::from(floored);
                self.stats.degenerate_allocations += u64::from(degenerate);
                allocations.push(alloc);
            }
            state.link_counts[t] = allocations;
        }
        Ok(())
    }

    /// Community-pair exposure totals over all training dyads: the
    /// coefficient of each compatibility cell in the summed dyad rate.
    /// Computed from column sums with the diagonal and held-out corrections
    /// removed; exact because all terms are integers below 2^53.
    pub fn exposure_cells(&self, state: &LatentState) -> Vec<f64> {
        let n = state.n_nodes;
        let k = state.n_communities;
        let directed = state.directed;
        let mut cells = vec![0.0; k * k];
        for t in 0..state.n_steps {
            let counts = &state.counts[t];
            let mut col = vec![0.0; k];
            for row in counts.chunks_exact(k) {
                for (c, &x) in col.iter_mut().zip(row) {
                    *c += x as f64;
                }
            }
            let mut step = vec![0.0; k * k];
            for k1 in 0..k {
                for k2 in 0..k {
                    step[k1 * k + k2] = col[k1] * col[k2];
                }
            }
            for i in 0..n {
                let row = &counts[i * k..(i + 1) * k];
                for k1 in 0..k {
                    if row[k1] == 0 {
                        continue;
                    }
                    let a = row[k1] as f64;
                    for k2 in 0..k {
                        step[k1 * k + k2] -= a * row[k2] as f64;
                    }
                }
            }
            for &(i, j) in self.view.heldout(t) {
                let ri = &counts[i as usize * k..(i as usize + 1) * k];
                let rj = &counts[j as usize * k..(j as usize + 1) * k];
                for k1 in 0..k {
                    for k2 in 0..k {
                        let w = if directed {
                            ri[k1] as f64 * rj[k2] as f64
                        } else {
                            ri[k1] as f64 * rj[k2] as f64 + rj[k1] as f64 * ri[k2] as f64
                        };
                        step[k1 * k + k2] -= w;
                    }
                }
            }
            let factor = if directed { 1.0 } else { 0.5 };
            for (c, s) in cells.iter_mut().zip(&step) {
                *c += factor * s;
            }
        }
        cells
    }

    /// Redraws the compatibility matrix cellwise from its Gamma conditional.
    pub fn sample_compatibility(&mut self, state: &mut LatentState, iter: u64) -> Result<()> {
        let k = state.n_communities;
        let mut cell_counts = vec![0u64; k * k];
        for t in 0..state.n_steps {
            for cells in &state.link_counts[t] {
                for (acc, &c) in cell_counts.iter_mut().zip(cells) {
                    *acc += u64::from(c);
                }
            }
        }
        let exposure = self.exposure_cells(state);
        for k1 in 0..k {
            for k2 in 0..k {
                let c = k1 * k + k2;
                let shape = self.hp.compat_shape + cell_counts[c] as f64;
                let rate = self.hp.compat_rate + exposure[c].max(0.0);
                let mut r = RngStream::for_site(
                    self.seed,
                    Family::Lambda,
                    [k1 as u64, k2 as u64, 0, iter],
                );
                state.compat[c] = sample_gamma(shape, 1.0 / rate, &mut r)?;
            }
        }
        Ok(())
    }

    /// Redraws the count scale from its Gamma conditional: shape gains the
    /// grand total of interaction counts, rate gains one unit per node-step.
    pub fn sample_scale(&mut self, state: &mut LatentState, iter: u64) -> Result<()> {
        let total: u64 = state
            .counts
            .iter()
            .flat_map(|step| step.iter().map(|&x| u64::from(x)))
            .sum();
        let shape = self.hp.scale_shape + total as f64;
        let rate = 1.0 + (state.n_nodes * state.n_steps) as f64;
        let mut r = RngStream::for_site(self.seed, Family::Scale, [0, 0, 0, iter]);
        state.scale = sample_gamma(shape, 1.0 / rate, &mut r)?;
        Ok(())
    }

    /// Optional conjugate redraw of the shared coefficient prior rate under
    /// a unit Gamma hyperprior: shape gains the summed prior shapes, rate
    /// gains the summed coefficient values.
    pub fn resample_coeff_rate(&mut self, state: &LatentState, iter: u64) -> Result<()> {
        let mut shape_sum = 0.0;
        let mut value_sum = 0.0;
        for t in 0..state.n_steps {
            for s in 0..state.n_layers.saturating_sub(1) {
                let sup = &state.cross_support[t];
                for (e, src, dst) in sup.iter_entries() {
                    shape_sum +=
                        if src == dst { self.hp.c_diag[s + 1] } else { self.hp.c_offdiag[s + 1] };
                    value_sum += state.cross[s][t][e];
                }
            }
            if t > 0 && self.opts.temporal_coupling {
                let ts = t - 1;
                for l in 0..state.n_layers {
                    let sup = &state.temporal_support[ts];
                    for (e, src, dst) in sup.iter_entries() {
                        shape_sum +=
                            if src == dst { self.hp.c_diag[l] } else { self.hp.c_offdiag[l] };
                        value_sum += state.temporal[l][ts][e];
                    }
                }
            }
        }
        let mut r = RngStream::for_site(self.seed, Family::RateDc, [0, 0, 0, iter]);
        self.hp.coeff_rate = sample_gamma(1.0 + shape_sum, 1.0 / (1.0 + value_sum), &mut r)?;
        Ok(())
    }

    /// Bernoulli-Poisson log likelihood of the training dyads: positive
    /// links contribute ln(1 - e^(-rate)), everything else -rate, with
    /// held-out dyads excluded. The non-link total comes from the exposure
    /// identity rather than a dyad loop.
    pub fn train_loglik(&self, state: &LatentState) -> Result<f64> {
        let k = state.n_communities;
        let k2 = k * k;
        let exposure = self.exposure_cells(state);
        let mut link_exposure = vec![0.0; k2];
        let mut ll = 0.0;
        for t in 0..state.n_steps {
            for &(i, j) in self.view.links(t) {
                let ri = &state.counts[t][i as usize * k..(i as usize + 1) * k];
                let rj = &state.counts[t][j as usize * k..(j as usize + 1) * k];
                let mut rate = 0.0;
                for k1 in 0..k {
                    for k2i in 0..k {
                        let w = if state.directed {
                            ri[k1] as f64 * rj[k2i] as f64
                        } else {
                            0.5 * (ri[k1] as f64 * rj[k2i] as f64 + rj[k1] as f64 * ri[k2i] as f64)
                        };
                        link_exposure[k1 * k + k2i] += w;
                        rate += state.compat[k1 * k + k2i] * w;
                    }
                }
                ll += (-(-rate.max(1e-300)).exp_m1()).ln();
            }
        }
        for c in 0..k2 {
            ll -= state.compat[c] * (exposure[c] - link_exposure[c]).max(0.0);
        }
        Ok(ll)
    }

    /// One full sweep in the pinned order.
    pub fn gibbs_iteration(
        &mut self,
        state: &mut LatentState,
        ws: &mut PropagationWorkspace,
        iter: u64,
    ) -> Result<()> {
        self.upward_backward_pass(state, ws, iter)?;
        self.sample_memberships(state, ws, iter)?;
        self.sample_coefficients(state, ws, iter)?;
        self.sample_counts(state, iter)?;
        self.sample_link_allocations(state, iter)?;
        self.sample_compatibility(state, iter)?;
        self.sample_scale(state, iter)?;
        if self.opts.update_coeff_rate {
            self.resample_coeff_rate(state, iter)?;
        }
        Ok(())
    }

}

/// Per-node auxiliary draw at one site; free function so the parallel
/// section borrows only immutable data.
#[allow(clippy::too_many_arguments)]
fn draw_node_aux(
    state: &LatentState,
    demand_slab: &[u32],
    i: usize,
    t: usize,
    l: usize,
    has_cross: bool,
    has_temporal: bool,
    seed: u64,
    iter: u64,
) -> Result<NodeAux> {
    let k = state.n_communities;
    let m_row = &demand_slab[i * k..(i + 1) * k];
    let sum_m: u64 = m_row.iter().map(|&v| u64::from(v)).sum();

    let cross_part = if has_cross {
        let sup = state.cross_support[t].as_ref();
        Some((sup, &state.cross[l - 1][t][sup.entry_range(i)], &state.memberships[t][l - 1]))
    } else {
        None
    };
    let temporal_part = if has_temporal {
        let sup = state.temporal_support[t - 1].as_ref();
        Some((sup, &state.temporal[l][t - 1][sup.entry_range(i)], &state.memberships[t - 1][l]))
    } else {
        None
    };

    let deg_c = cross_part.map_or(0, |(sup, ..)| sup.sources_of(i).len());
    let deg_t = temporal_part.map_or(0, |(sup, ..)| sup.sources_of(i).len());

    let mut aux = NodeAux {
        retain: 1.0,
        tables: vec![0; k],
        cross_alloc: Vec::new(),
        temporal_alloc: Vec::new(),
        degenerate_splits: 0,
    };
    if sum_m == 0 {
        return Ok(aux);
    }

    // Per-component parent concentration and the total parent weight (the
    // memberships in each parent row sum to one).
    let mut psi = vec![0.0; k];
    let mut sum_w = 0.0;
    if let Some((sup, values, pis)) = cross_part {
        for (&src, &w) in sup.sources_of(i).iter().zip(values) {
            sum_w += w;
            let row = &pis[src as usize * k..(src as usize + 1) * k];
            for (p, &pi) in psi.iter_mut().zip(row) {
                *p += w * pi;
            }
        }
    }
    if let Some((sup, values, pis)) = temporal_part {
        for (&src, &w) in sup.sources_of(i).iter().zip(values) {
            sum_w += w;
            let row = &pis[src as usize * k..(src as usize + 1) * k];
            for (p, &pi) in psi.iter_mut().zip(row) {
                *p += w * pi;
            }
        }
    }
    if !(sum_w > 0.0) {
        return Err(Error::Degenerate(format!(
            "site (i={i}, t={t}, l={l}) has counts to explain but zero parent weight"
        )));
    }

    let mut aux_rng = RngStream::for_site(seed, Family::Aux, [i as u64, t as u64, l as u64, iter]);
    aux.retain = sample_beta(sum_w, sum_m as f64, &mut aux_rng)?;
    let mut split_rng =
        RngStream::for_site(seed, Family::Split, [i as u64, t as u64, l as u64, iter]);

    aux.cross_alloc = vec![0; deg_c * k];
    aux.temporal_alloc = vec![0; deg_t * k];
    let mut weights = vec![0.0; deg_c + deg_t];
    for kk in 0..k {
        let m_k = u64::from(m_row[kk]);
        if m_k == 0 {
            continue;
        }
        // Table count: the exact Bernoulli-sum draw, degenerating to a
        // single table when the concentration underflows to zero.
        let y = if psi[kk] > 0.0 { sample_crt(m_k, psi[kk], &mut aux_rng)? } else { 1 };
        aux.tables[kk] = y as u32;
        if y == 0 {
            continue;
        }
        let mut total_w = 0.0;
        if let Some((sup, values, pis)) = cross_part {
            for (idx, (&src, &w)) in sup.sources_of(i).iter().zip(values).enumerate() {
                let v = w * pis[src as usize * k + kk];
                weights[idx] = v;
                total_w += v;
            }
        }
        if let Some((sup, values, pis)) = temporal_part {
            for (idx, (&src, &w)) in sup.sources_of(i).iter().zip(values).enumerate() {
                let v = w * pis[src as usize * k + kk];
                weights[deg_c + idx] = v;
                total_w += v;
            }
        }
        if total_w > 0.0 {
            let alloc = sample_multinomial(y, &weights, &mut split_rng)?;
            for (idx, &c) in alloc.iter().enumerate() {
                if c == 0 {
                    continue;
                }
                if idx < deg_c {
                    aux.cross_alloc[idx * k + kk] = c as u32;
                } else {
                    aux.temporal_alloc[(idx - deg_c) * k + kk] = c as u32;
                }
            }
        } else {
            // Every parent's membership underflowed at this component; send
            // the tables to the diagonal entry, which always exists.
            aux.degenerate_splits += 1;
            if let Some((sup, ..)) = cross_part {
                let pos = sup
                    .sources_of(i)
                    .binary_search(&(i as u32))
                    .map_err(|_| Error::Inconsistency("support lost its diagonal".into()))?;
                aux.cross_alloc[pos * k + kk] = y as u32;
            } else if let Some((sup, ..)) = temporal_part {
                let pos = sup
                    .sources_of(i)
                    .binary_search(&(i as u32))
                    .map_err(|_| Error::Inconsistency("support lost its diagonal".into()))?;
                aux.temporal_alloc[pos * k + kk] = y as u32;
            }
        }
    }
    Ok(aux)
}

/// Splits a link's count total over community-pair cells. Weights that sum
/// to zero (only reachable through floored rates) fall back to a uniform
/// split; the flag reports it. Small totals use repeated categorical draws,
/// large ones the conditional-binomial chain; both are exact.
fn allocate_cells(total: u64, weights: &[f64], rng: &mut RngStream) -> Result<(Vec<u32>, bool)> {
    let sum: f64 = weights.iter().sum();
    let uniform;
    let (w, degenerate): (&[f64], bool) = if sum > 0.0 {
        (weights, false)
    } else {
        uniform = vec![1.0; weights.len()];
        (&uniform, true)
    };
    let mut out = vec![0u32; weights.len()];
    if total <= 8 {
        for _ in 0..total {
            let c = sample_categorical(w, rng)?;
            out[c] += 1;
        }
    } else {
        for (slot, v) in out.iter_mut().zip(sample_multinomial(total, w, rng)?) {
            *slot = v as u32;
        }
    }
    Ok((out, degenerate))
}

// ---- the fit loop ----

/// Schedule and output locations for a fit.
#[derive(Debug, Clone)]
pub struct FitOptions {
    pub iterations: u64,
    pub burn_in: u64,
    /// Write a checkpoint every this many iterations (0: only at the end).
    pub checkpoint_every: u64,
    pub out_dir: PathBuf,
    /// Continue from the checkpoint in `out_dir` instead of initializing.
    pub resume: bool,
}

/// Everything a finished fit hands back.
#[derive(Debug)]
pub struct FitOutcome {
    pub state: LatentState,
    /// Post-burn-in sweeps that contributed to the predictions.
    pub posterior_samples: u64,
    /// Posterior link probability per held-out mask entry (mask order);
    /// empty when nothing was held out or no sample was taken.
    pub predictions: Vec<f64>,
    pub stats: SamplerStats,
}

/// Resumable fit bookkeeping stored next to the checkpoint.
#[derive(Debug, Serialize, Deserialize)]
struct FitProgress {
    completed_iterations: u64,
    posterior_samples: u64,
    coeff_rate_current: f64,
    stats: SamplerStats,
}

/// Runs the Gibbs sampler on a network with the given holdout, logging one
/// progress row per sweep and accumulating held-out survival terms after
/// burn-in. Checkpoints land in `<out>/checkpoint` and contain everything a
/// resumed run needs to continue bit-for-bit.
pub fn fit(
    net: &DynamicNetwork,
    mask: &HoldoutMask,
    hp: &Hyperparams,
    gibbs: &GibbsOptions,
    opts: &FitOptions,
    seed: u64,
) -> Result<FitOutcome> {
    if opts.iterations == 0 {
        return Err(Error::Parameter("fit requires at least one iteration".into()));
    }
    if opts.burn_in >= opts.iterations {
        return Err(Error::Parameter(format!(
            "burn-in {} must be below the iteration count {}",
            opts.burn_in, opts.iterations
        )));
    }
    let view = TrainingView::new(net, mask)?;
    let mut sampler = Sampler::new(&view, hp.clone(), gibbs.clone(), seed)?;
    let checkpoint_dir = opts.out_dir.join("checkpoint");
    let progress_path = opts.out_dir.join("progress.csv");
    fs::create_dir_all(&opts.out_dir)?;

    let mut survival = vec![0.0f64; mask.len()];
    let mut posterior_samples = 0u64;
    let mut start_iter = 0u64;

    let mut state = if opts.resume {
        let (state, meta) = load_checkpoint(&checkpoint_dir, net, mask)?;
        if meta.support_rule != SupportRule::Observed {
            return Err(Error::Validation {
                line: None,
                msg: "checkpoint was not produced by a fit".into(),
            });
        }
        if meta.hyperparams != *hp {
            return Err(Error::Validation {
                line: None,
                msg: "checkpoint hyperparameters disagree with the requested configuration"
                    .into(),
            });
        }
        let progress: FitProgress =
            serde_json::from_str(&fs::read_to_string(checkpoint_dir.join("fit_progress.json"))?)
                .map_err(|e| Error::Validation {
                    line: None,
                    msg: format!("bad fit progress record: {e}"),
                })?;
        if progress.completed_iterations != meta.iteration {
            return Err(Error::Inconsistency(
                "fit progress and checkpoint disagree on the iteration".into(),
            ));
        }
        if progress.completed_iterations >= opts.iterations {
            return Err(Error::Parameter(format!(
                "checkpoint already has {} iterations, nothing to resume for a target of {}",
                progress.completed_iterations, opts.iterations
            )));
        }
        let mut r = BufReader::new(fs::File::open(checkpoint_dir.join("survival.bin"))?);
        survival = read_f64s(&mut r, mask.len())?;
        posterior_samples = progress.posterior_samples;
        start_iter = progress.completed_iterations;
        sampler.stats = progress.stats;
        sampler.hp.coeff_rate = progress.coeff_rate_current;
        state
    } else {
        sampler.init_state()?
    };
    let mut ws = PropagationWorkspace::for_state(&state);

    let mut progress_file = if opts.resume && progress_path.exists() {
        let f = fs::OpenOptions::new().append(true).open(&progress_path)?;
        BufWriter::new(f)
    } else {
        let mut w = BufWriter::new(fs::File::create(&progress_path)?);
        writeln!(w, "iter,seconds,train_loglik,M,mean_beta,mean_gamma")?;
        w
    };

    for iter in start_iter + 1..=opts.iterations {
        let tic = Instant::now();
        sampler.gibbs_iteration(&mut state, &mut ws, iter)?;
        if iter > opts.burn_in {
            for (slot, e) in survival.iter_mut().zip(mask.entries()) {
                let rate = state.dyad_rate(e.i as usize, e.j as usize, e.t as usize)?;
                *slot += (-rate).exp();
            }
            posterior_samples += 1;
        }
        let ll = sampler.train_loglik(&state)?;
        let (mean_cross, mean_temporal) = state.coefficient_means();
        writeln!(
            progress_file,
            "{iter},{:.3},{ll:.6},{:.6},{mean_cross:.6},{mean_temporal:.6}",
            tic.elapsed().as_secs_f64(),
            state.scale,
        )?;
        progress_file.flush()?;

        let due = opts.checkpoint_every > 0 && iter % opts.checkpoint_every == 0;
        if due || iter == opts.iterations {
            save_checkpoint(&checkpoint_dir, &state, hp, iter, SupportRule::Observed)?;
            let progress = FitProgress {
                completed_iterations: iter,
                posterior_samples,
                coeff_rate_current: sampler.hp.coeff_rate,
                stats: sampler.stats,
            };
            fs::write(
                checkpoint_dir.join("fit_progress.json"),
                serde_json::to_string_pretty(&progress)
                    .map_err(|e| Error::Inconsistency(format!("progress serialization: {e}")))?,
            )?;
            let mut w = BufWriter::new(fs::File::create(checkpoint_dir.join("survival.bin"))?);
            write_f64s(&mut w, &survival)?;
            w.flush()?;
        }
    }

    let predictions = if posterior_samples > 0 {
        survival.iter().map(|s| 1.0 - s / posterior_samples as f64).collect()
    } else {
        Vec::new()
    };
    Ok(FitOutcome { state, posterior_samples, predictions, stats: sampler.stats })
}

/// Reads the held-out predictions of a finished or checkpointed fit:
/// survival sums divided by the sample count, turned into link
/// probabilities. Mask order.
pub fn load_predictions(out_dir: &Path, mask: &HoldoutMask) -> Result<(Vec<f64>, u64)> {
    let checkpoint_dir = out_dir.join("checkpoint");
    let progress: FitProgress =
        serde_json::from_str(&fs::read_to_string(checkpoint_dir.join("fit_progress.json"))?)
            .map_err(|e| Error::Validation {
                line: None,
                msg: format!("bad fit progress record: {e}"),
            })?;
    if progress.posterior_samples == 0 {
        return Err(Error::Parameter(
            "the fit has no post-burn-in samples, so there are no predictions".into(),
        ));
    }
    let mut r = BufReader::new(fs::File::open(checkpoint_dir.join("survival.bin"))?);
    let survival = read_f64s(&mut r, mask.len())?;
    let preds =
        survival.iter().map(|s| 1.0 - s / progress.posterior_samples as f64).collect();
    Ok((preds, progress.posterior_samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::split_holdout;
    use crate::model::{forward_simulate, SimOptions};

    fn small_instance(directed: bool, seed: u64) -> (DynamicNetwork, HoldoutMask) {
        let hp = Hyperparams::new(3, 2, 12);
        let opts = SimOptions { scale: Some(4.0), ..Default::default() };
        let (net, _) = forward_simulate(&hp, 12, 3, directed, &opts, seed).unwrap();
        let mask = split_holdout(&net, 0.1, seed ^ 0xabc).unwrap();
        (net, mask)
    }

    fn check_state_invariants(state: &LatentState, view: &TrainingView) {
        let k = state.n_communities;
        for t in 0..state.n_steps {
            for l in 0..state.n_layers {
                for i in 0..state.n_nodes {
                    let sum: f64 = state.membership(i, t, l).iter().sum();
                    assert!((sum - 1.0).abs() < 1e-9, "membership sum {sum}");
                }
            }
            assert_eq!(state.link_counts[t].len(), view.links(t).len());
            for (e, &(i, j)) in view.links(t).iter().enumerate() {
                let total: u64 =
                    state.link_counts[t][e].iter().map(|&c| u64::from(c)).sum();
                assert!(total >= 1, "link ({i},{j}) at {t} has empty allocation");
                // Allocated cells must be explainable by the endpoint
                // counts; undirected weights are symmetrized, so either
                // orientation suffices there.
                let xi = state.count_row(i as usize, t);
                let xj = state.count_row(j as usize, t);
                for k1 in 0..k {
                    for k2 in 0..k {
                        if state.link_counts[t][e][k1 * k + k2] > 0 {
                            let direct = xi[k1] > 0 && xj[k2] > 0;
                            let flipped = xj[k1] > 0 && xi[k2] > 0;
                            assert!(
                                if state.directed { direct } else { direct || flipped },
                                "cell ({k1},{k2}) of link ({i},{j}) at {t} unsupported"
                            );
                        }
                    }
                }
            }
            // Coefficients stay positive on their supports.
            for s in 0..state.n_layers - 1 {
                assert_eq!(state.cross[s][t].len(), view.support(t).len());
                assert!(state.cross[s][t].iter().all(|&v| v > 0.0));
            }
        }
    }

    #[test]
    fn init_state_satisfies_invariants() {
        for directed in [true, false] {
            let (net, mask) = small_instance(directed, 7);
            let view = TrainingView::new(&net, &mask).unwrap();
            let mut sampler =
                Sampler::new(&view, Hyperparams::new(3, 2, 12), GibbsOptions::default(), 5)
                    .unwrap();
            let state = sampler.init_state().unwrap();
            check_state_invariants(&state, &view);
        }
    }

    #[test]
    fn sweeps_preserve_invariants() {
        for directed in [true, false] {
            let (net, mask) = small_instance(directed, 11);
            let view = TrainingView::new(&net, &mask).unwrap();
            let mut sampler =
                Sampler::new(&view, Hyperparams::new(3, 2, 12), GibbsOptions::default(), 3)
                    .unwrap();
            let mut state = sampler.init_state().unwrap();
            let mut ws = PropagationWorkspace::for_state(&state);
            for iter in 1..=5 {
                sampler.gibbs_iteration(&mut state, &mut ws, iter).unwrap();
                check_state_invariants(&state, &view);
                assert!(state.scale > 0.0);
                assert!(state.compat.iter().all(|&v| v > 0.0));
                let ll = sampler.train_loglik(&state).unwrap();
                assert!(ll.is_finite());
            }
        }
    }

    #[test]
    fn demand_conservation_holds() {
        // Every drawn table lands somewhere: the demand accumulated at
        // parents equals the tables split at children, and top-layer demand
        // starts from the interaction counts.
        let (net, mask) = small_instance(true, 13);
        let view = TrainingView::new(&net, &mask).unwrap();
        let mut sampler =
            Sampler::new(&view, Hyperparams::new(3, 2, 12), GibbsOptions::default(), 9).unwrap();
        let mut state = sampler.init_state().unwrap();
        let mut ws = PropagationWorkspace::for_state(&state);
        sampler.upward_backward_pass(&state, &mut ws, 1).unwrap();
        let k = state.n_communities;
        let top = state.n_layers - 1;
        for t in 0..state.n_steps {
            // Top-layer demand = counts + incoming temporal allocations.
            for i in 0..state.n_nodes {
                for kk in 0..k {
                    let mut expect = u64::from(state.counts[t][i * k + kk]);
                    if t + 1 < state.n_steps {
                        let sup = &state.temporal_support[t];
                        for (e, src, _dst) in sup.iter_entries() {
                            if src as usize == i {
                                expect += u64::from(ws.to_temporal[top][t][e * k + kk]);
                            }
                        }
                    }
                    assert_eq!(u64::from(ws.demand[t][top][i * k + kk]), expect);
                }
            }
            // Split totals equal table totals at every site.
            for l in 0..state.n_layers {
                if t == 0 && l == 0 {
                    continue;
                }
                let mut split_total = 0u64;
                if l > 0 {
                    split_total +=
                        ws.to_cross[l - 1][t].iter().map(|&v| u64::from(v)).sum::<u64>();
                }
                if t > 0 {
                    split_total +=
                        ws.to_temporal[l][t - 1].iter().map(|&v| u64::from(v)).sum::<u64>();
                }
                let table_total: u64 =
                    ws.tables[t][l].iter().map(|&v| u64::from(v)).sum();
                assert_eq!(split_total, table_total, "at (t={t}, l={l})");
            }
        }
        // The origin draws nothing.
        assert!(ws.tables[0][0].iter().all(|&v| v == 0));
        assert!(ws.retain[0][0].iter().all(|&q| q == 1.0));
        // No mutation of the state during the pass.
        sampler.sample_memberships(&mut state, &ws, 1).unwrap();
    }

    #[test]
    fn chains_are_deterministic_and_thread_invariant() {
        let (net, mask) = small_instance(false, 17);
        let view = TrainingView::new(&net, &mask).unwrap();
        let hp = Hyperparams::new(3, 2, 12);

        let run = |threads: usize| {
            let opts = GibbsOptions { threads, ..Default::default() };
            let mut sampler = Sampler::new(&view, hp.clone(), opts, 41).unwrap();
            let mut state = sampler.init_state().unwrap();
            let mut ws = PropagationWorkspace::for_state(&state);
            for iter in 1..=3 {
                sampler.gibbs_iteration(&mut state, &mut ws, iter).unwrap();
            }
            state
        };
        let a = run(1);
        let b = run(1);
        assert_eq!(a, b);
        let c = run(4);
        assert_eq!(a, c);
    }

    #[test]
    fn single_step_reduction_matches_temporal_code_removal() {
        // On single-step data the sampler must behave identically whether
        // the temporal machinery exists or is structurally skipped.
        let hp = Hyperparams::new(3, 3, 10);
        let opts = SimOptions { scale: Some(5.0), ..Default::default() };
        let (net, _) = forward_simulate(&hp, 10, 1, true, &opts, 23).unwrap();
        let view = TrainingView::full(&net);

        let run = |temporal_coupling: bool| {
            let gopts = GibbsOptions { temporal_coupling, ..Default::default() };
            let mut sampler = Sampler::new(&view, hp.clone(), gopts, 77).unwrap();
            let mut state = sampler.init_state().unwrap();
            let mut ws = PropagationWorkspace::for_state(&state);
            for iter in 1..=50 {
                sampler.gibbs_iteration(&mut state, &mut ws, iter).unwrap();
            }
            state
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn reduction_mode_rejects_multi_step_data() {
        let (net, mask) = small_instance(true, 29);
        let view = TrainingView::new(&net, &mask).unwrap();
        let gopts = GibbsOptions { temporal_coupling: false, ..Default::default() };
        assert!(Sampler::new(&view, Hyperparams::new(3, 2, 12), gopts, 1).is_err());
    }

    #[test]
    fn exposure_matches_pairwise_sum() {
        for directed in [true, false] {
            let (net, mask) = small_instance(directed, 31);
            let view = TrainingView::new(&net, &mask).unwrap();
            let mut sampler =
                Sampler::new(&view, Hyperparams::new(3, 2, 12), GibbsOptions::default(), 51)
                    .unwrap();
            let state = sampler.init_state().unwrap();
            let k = state.n_communities;

            let fast = sampler.exposure_cells(&state);
            let mut slow = vec![0.0; k * k];
            let n = state.n_nodes as u32;
            for t in 0..state.n_steps {
                for i in 0..n {
                    let j0 = if directed { 0 } else { i + 1 };
                    for j in j0..n {
                        if i == j || view.is_heldout(t, i, j) {
                            continue;
                        }
                        let ri = state.count_row(i as usize, t);
                        let rj = state.count_row(j as usize, t);
                        for k1 in 0..k {
                            for k2 in 0..k {
                                let w = if directed {
                                    ri[k1] as f64 * rj[k2] as f64
                                } else {
                                    0.5 * (ri[k1] as f64 * rj[k2] as f64
                                        + rj[k1] as f64 * ri[k2] as f64)
                                };
                                slow[k1 * k + k2] += w;
                            }
                        }
                    }
                }
            }
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn train_loglik_matches_dyad_loop() {
        for directed in [true, false] {
            let (net, mask) = small_instance(directed, 37);
            let view = TrainingView::new(&net, &mask).unwrap();
            let mut sampler =
                Sampler::new(&view, Hyperparams::new(3, 2, 12), GibbsOptions::default(), 61)
                    .unwrap();
            let state = sampler.init_state().unwrap();

            let fast = sampler.train_loglik(&state).unwrap();
            let mut slow = 0.0;
            let n = state.n_nodes as u32;
            for t in 0..state.n_steps {
                for i in 0..n {
                    let j0 = if directed { 0 } else { i + 1 };
                    for j in j0..n {
                        if i == j || view.is_heldout(t, i, j) {
                            continue;
                        }
                        let rate = state.dyad_rate(i as usize, j as usize, t).unwrap();
                        if net.has_edge(t, i, j) {
                            slow += (-(-rate.max(1e-300)).exp_m1()).ln();
                        } else {
                            slow -= rate;
                        }
                    }
                }
            }
            assert!(
                (fast - slow).abs() <= 1e-9 * slow.abs().max(1.0),
                "{fast} vs {slow}"
            );
        }
    }

    #[test]
    fn fit_writes_progress_and_predictions() {
        let (net, mask) = small_instance(true, 43);
        let dir = tempfile::tempdir().unwrap();
        let hp = Hyperparams::new(3, 2, 12);
        let fopts = FitOptions {
            iterations: 6,
            burn_in: 2,
            checkpoint_every: 0,
            out_dir: dir.path().to_path_buf(),
            resume: false,
        };
        let outcome =
            fit(&net, &mask, &hp, &GibbsOptions::default(), &fopts, 71).unwrap();
        assert_eq!(outcome.posterior_samples, 4);
        assert_eq!(outcome.predictions.len(), mask.len());
        assert!(outcome.predictions.iter().all(|&p| (0.0..=1.0).contains(&p)));

        let progress = fs::read_to_string(dir.path().join("progress.csv")).unwrap();
        let lines: Vec<&str> = progress.lines().collect();
        assert_eq!(lines[0], "iter,seconds,train_loglik,M,mean_beta,mean_gamma");
        assert_eq!(lines.len(), 7);
        assert!(lines[1].starts_with("1,"));

        let (preds, samples) = load_predictions(dir.path(), &mask).unwrap();
        assert_eq!(samples, 4);
        assert_eq!(preds, outcome.predictions);
    }

    #[test]
    fn resume_continues_bit_for_bit() {
        let (net, mask) = small_instance(false, 47);
        let hp = Hyperparams::new(3, 2, 12);
        let straight_dir = tempfile::tempdir().unwrap();
        let split_dir = tempfile::tempdir().unwrap();

        let straight = fit(
            &net,
            &mask,
            &hp,
            &GibbsOptions::default(),
            &FitOptions {
                iterations: 8,
                burn_in: 3,
                checkpoint_every: 0,
                out_dir: straight_dir.path().to_path_buf(),
                resume: false,
            },
            97,
        )
        .unwrap();

        fit(
            &net,
            &mask,
            &hp,
            &GibbsOptions::default(),
            &FitOptions {
                iterations: 5,
                burn_in: 3,
                checkpoint_every: 0,
                out_dir: split_dir.path().to_path_buf(),
                resume: false,
            },
            97,
        )
        .unwrap();
        let resumed = fit(
            &net,
            &mask,
            &hp,
            &GibbsOptions::default(),
            &FitOptions {
                iterations: 8,
                burn_in: 3,
                checkpoint_every: 0,
                out_dir: split_dir.path().to_path_buf(),
                resume: true,
            },
            97,
        )
        .unwrap();

        assert_eq!(straight.state, resumed.state);
        assert_eq!(straight.posterior_samples, resumed.posterior_samples);
        assert_eq!(straight.predictions, resumed.predictions);
        for (a, b) in straight.predictions.iter().zip(&resumed.predictions) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // The split run's progress log covers all eight iterations.
        let progress = fs::read_to_string(split_dir.path().join("progress.csv")).unwrap();
        assert_eq!(progress.lines().count(), 9);
    }
}
