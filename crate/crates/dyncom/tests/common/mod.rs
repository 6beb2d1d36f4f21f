//! Shared oracles for the conditional-update tests: each builds a frozen
//! conditioning state, draws one coordinate repeatedly through the public
//! sampler API, and measures the discretized total variation distance
//! against the independently computed conditional law.

// Each integration test target compiles this module separately and uses a
// different subset of it.
#![allow(dead_code)]

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use dyncom::graph::{split_holdout, DynamicNetwork, TrainingView};
use dyncom::infer::{GibbsOptions, PropagationWorkspace, Sampler};
use dyncom::model::{forward_simulate, Hyperparams, LatentState, SimOptions};
use dyncom::rng::{Family, RngStream};
use rand::Rng;

use statrs::distribution::{Beta, ContinuousCDF, Gamma};

/// Total variation between an empirical sample and a continuous law,
/// discretized over `bins` equal-probability bins of the law.
pub fn tv_against_cdf<D: ContinuousCDF<f64, f64>>(draws: &[f64], law: &D, bins: usize) -> f64 {
    let edges: Vec<f64> =
        (1..bins).map(|b| law.inverse_cdf(b as f64 / bins as f64)).collect();
    let mut counts = vec![0u64; bins];
    for &x in draws {
        let bin = edges.partition_point(|&e| e < x);
        counts[bin] += 1;
    }
    let n = draws.len() as f64;
    let expected = 1.0 / bins as f64;
    0.5 * counts.iter().map(|&c| (c as f64 / n - expected).abs()).sum::<f64>()
}

/// Total variation between an empirical integer sample and an exact pmf
/// given on 0..pmf.len().
pub fn tv_against_pmf(draws: &[u32], pmf: &[f64]) -> f64 {
    let mut counts = vec![0u64; pmf.len()];
    let mut outside = 0u64;
    for &x in draws {
        match counts.get_mut(x as usize) {
            Some(c) => *c += 1,
            None => outside += 1,
        }
    }
    let n = draws.len() as f64;
    let mut tv = 0.0;
    for (c, p) in counts.iter().zip(pmf) {
        tv += (*c as f64 / n - p).abs();
    }
    0.5 * (tv + outside as f64 / n)
}

/// The frozen instance shared by the conjugacy oracles: a simulated
/// network, one warm-up sweep, and one auxiliary pass whose workspace
/// stays fixed while conditionals are redrawn.
pub struct FrozenInstance {
    pub net: DynamicNetwork,
    pub hp: Hyperparams,
    pub state: LatentState,
    pub ws: PropagationWorkspace,
    pub seed: u64,
}

pub fn frozen_instance() -> FrozenInstance {
    let hp = Hyperparams::new(3, 2, 12);
    let opts = SimOptions { scale: Some(4.0), ..Default::default() };
    let (net, _) = forward_simulate(&hp, 12, 3, true, &opts, 2024).unwrap();
    let mask = split_holdout(&net, 0.1, 7).unwrap();
    let view = TrainingView::new(&net, &mask).unwrap();
    let seed = 99;
    let mut sampler = Sampler::new(&view, hp.clone(), GibbsOptions::default(), seed).unwrap();
    let mut state = sampler.init_state().unwrap();
    let mut ws = PropagationWorkspace::for_state(&state);
    sampler.gibbs_iteration(&mut state, &mut ws, 1).unwrap();
    sampler.upward_backward_pass(&state, &mut ws, 2).unwrap();
    FrozenInstance { net, hp, state, ws, seed }
}

pub const CONJUGACY_DRAWS: usize = 100_000;
pub const CONJUGACY_BINS: usize = 20;
/// Discretized total variation allowed for the conjugacy oracles.
pub const CONJUGACY_TOL: f64 = 0.02;

/// Membership conditional at the origin site (first step, bottom layer),
/// where the concentration is the base alpha plus the propagated demand
/// and nothing else: the first component's marginal under
/// Dirichlet(c) is Beta(c_0, sum(c) - c_0).
pub fn membership_tv(fz: &FrozenInstance) -> f64 {
    let mask = split_holdout(&fz.net, 0.1, 7).unwrap();
    let view = TrainingView::new(&fz.net, &mask).unwrap();
    let mut sampler =
        Sampler::new(&view, fz.hp.clone(), GibbsOptions::default(), fz.seed).unwrap();
    let k = fz.state.n_communities;
    let node = 0usize;

    let demand = &fz.ws.demand[0][0][node * k..(node + 1) * k];
    let conc: Vec<f64> =
        fz.hp.alpha.iter().zip(demand).map(|(a, &d)| a + d as f64).collect();
    let total: f64 = conc.iter().sum();
    let law = Beta::new(conc[0], total - conc[0]).unwrap();

    let mut state = fz.state.clone();
    let mut draws = Vec::with_capacity(CONJUGACY_DRAWS);
    for rep in 0..CONJUGACY_DRAWS as u64 {
        sampler.sample_memberships(&mut state, &fz.ws, 10 + rep).unwrap();
        draws.push(state.membership(node, 0, 0)[0]);
    }
    tv_against_cdf(&draws, &law, CONJUGACY_BINS)
}

/// Cross-layer and temporal coefficient conditionals: Gamma with the prior
/// shape plus allocated tables, rate the prior rate plus the receiving
/// site's exposure.
pub fn coefficient_tvs(fz: &FrozenInstance) -> (f64, f64) {
    let mask = split_holdout(&fz.net, 0.1, 7).unwrap();
    let view = TrainingView::new(&fz.net, &mask).unwrap();
    let mut sampler =
        Sampler::new(&view, fz.hp.clone(), GibbsOptions::default(), fz.seed).unwrap();
    let k = fz.state.n_communities;

    // One diagonal cross entry at (t=0, feeding layer 1) and one temporal
    // entry at (source step 0, layer 0); their laws from the frozen pass.
    let cross_sup = fz.state.cross_support[0].clone();
    let (ce, csrc, cdst) = cross_sup.iter_entries().next().unwrap();
    let c_shape = if csrc == cdst { fz.hp.c_diag[1] } else { fz.hp.c_offdiag[1] }
        + fz.ws.to_cross[0][0][ce * k..(ce + 1) * k]
            .iter()
            .map(|&v| v as f64)
            .sum::<f64>();
    let c_rate = fz.hp.coeff_rate - fz.ws.retain[0][1][cdst as usize].ln();
    let cross_law = Gamma::new(c_shape, c_rate).unwrap();

    let temporal_sup = fz.state.temporal_support[0].clone();
    let (te, tsrc, tdst) = temporal_sup.iter_entries().nth(1).unwrap();
    let t_shape = if tsrc == tdst { fz.hp.c_diag[0] } else { fz.hp.c_offdiag[0] }
        + fz.ws.to_temporal[0][0][te * k..(te + 1) * k]
            .iter()
            .map(|&v| v as f64)
            .sum::<f64>();
    let t_rate = fz.hp.coeff_rate - fz.ws.retain[1][0][tdst as usize].ln();
    let temporal_law = Gamma::new(t_shape, t_rate).unwrap();

    let mut state = fz.state.clone();
    let mut cross_draws = Vec::with_capacity(CONJUGACY_DRAWS);
    let mut temporal_draws = Vec::with_capacity(CONJUGACY_DRAWS);
    for rep in 0..CONJUGACY_DRAWS as u64 {
        sampler.sample_coefficients(&mut state, &fz.ws, 10 + rep).unwrap();
        cross_draws.push(state.cross[0][0][ce]);
        temporal_draws.push(state.temporal[0][0][te]);
    }
    (
        tv_against_cdf(&cross_draws, &cross_law, CONJUGACY_BINS),
        tv_against_cdf(&temporal_draws, &temporal_law, CONJUGACY_BINS),
    )
}

/// Compatibility-cell conditional: Gamma with shape the prior shape plus
/// the cell's allocated link counts, rate the prior rate plus the cell's
/// exposure over training dyads, both recomputed here by brute force.
pub fn compat_tv(fz: &FrozenInstance) -> f64 {
    let mask = split_holdout(&fz.net, 0.1, 7).unwrap();
    let view = TrainingView::new(&fz.net, &mask).unwrap();
    let mut sampler =
        Sampler::new(&view, fz.hp.clone(), GibbsOptions::default(), fz.seed).unwrap();

    let mut cell_count = 0u64;
    for t in 0..fz.state.n_steps {
        for cells in &fz.state.link_counts[t] {
            cell_count += u64::from(cells[0]);
        }
    }
    let mut exposure = 0.0;
    let n = fz.state.n_nodes as u32;
    for t in 0..fz.state.n_steps {
        for i in 0..n {
            for j in 0..n {
                if i == j || view.is_heldout(t, i, j) {
                    continue;
                }
                exposure += fz.state.count_row(i as usize, t)[0] as f64
                    * fz.state.count_row(j as usize, t)[0] as f64;
            }
        }
    }
    let law = Gamma::new(fz.hp.compat_shape + cell_count as f64, fz.hp.compat_rate + exposure)
        .unwrap();

    let mut state = fz.state.clone();
    let mut draws = Vec::with_capacity(CONJUGACY_DRAWS);
    for rep in 0..CONJUGACY_DRAWS as u64 {
        sampler.sample_compatibility(&mut state, 10 + rep).unwrap();
        draws.push(state.compat[0]);
    }
    tv_against_cdf(&draws, &law, CONJUGACY_BINS)
}

/// Count-scale conditional: Gamma with shape the prior shape plus the
/// grand count total, rate one plus one unit per node and step.
pub fn scale_tv(fz: &FrozenInstance) -> f64 {
    let mask = split_holdout(&fz.net, 0.1, 7).unwrap();
    let view = TrainingView::new(&fz.net, &mask).unwrap();
    let mut sampler =
        Sampler::new(&view, fz.hp.clone(), GibbsOptions::default(), fz.seed).unwrap();

    let total: u64 = fz
        .state
        .counts
        .iter()
        .flat_map(|step| step.iter().map(|&x| u64::from(x)))
        .sum();
    let rate = 1.0 + (fz.state.n_nodes * fz.state.n_steps) as f64;
    let law = Gamma::new(fz.hp.scale_shape + total as f64, rate).unwrap();

    let mut state = fz.state.clone();
    let mut draws = Vec::with_capacity(CONJUGACY_DRAWS);
    for rep in 0..CONJUGACY_DRAWS as u64 {
        sampler.sample_scale(&mut state, 10 + rep).unwrap();
        draws.push(state.scale);
    }
    tv_against_cdf(&draws, &law, CONJUGACY_BINS)
}

pub const COUNT_ORACLE_DRAWS: usize = 400_000;
/// Total variation allowed for the count-update enumeration oracle.
pub const COUNT_ORACLE_TOL: f64 = 0.01;

/// Count update on a two-node, two-community, single-link instance: the
/// first redrawn coordinate against exhaustive enumeration of its
/// conditional mass, everything recomputed independently here.
pub fn count_update_tv() -> f64 {
    let net = DynamicNetwork::new(2, 1, true, vec![vec![(0, 1)]]).unwrap();
    let view = TrainingView::full(&net);
    let hp = Hyperparams::new(2, 1, 2);
    let mut sampler = Sampler::new(&view, hp, GibbsOptions::default(), 4).unwrap();
    let mut state = sampler.init_state().unwrap();

    // Freeze a hand-picked conditioning state.
    state.memberships[0][0] = vec![0.7, 0.3, 0.2, 0.8];
    state.counts[0] = vec![3, 1, 2, 2];
    state.link_counts[0] = vec![vec![2, 0, 1, 0]];
    state.compat = vec![1.2, 0.4, 0.6, 0.9];
    state.scale = 4.0;

    // The conditional of X[node 0, community 0], holding the rest fixed:
    // mass(x) proportional to (M pi_0)^x e^(-x E) x^(C incident) / x!,
    // where E sums compatibility against the partner's counts over both
    // link orientations of the one candidate dyad pair.
    let prior_rate = state.scale * state.memberships[0][0][0];
    let partner = [state.counts[0][2] as f64, state.counts[0][3] as f64];
    let exposure = state.compat[0] * partner[0]
        + state.compat[1] * partner[1]
        + state.compat[0] * partner[0]
        + state.compat[2] * partner[1];
    let incident = (state.link_counts[0][0][0] + state.link_counts[0][0][1]) as f64;
    let mut ln_mass = Vec::with_capacity(201);
    let mut ln_fact = 0.0;
    for x in 0..=200u32 {
        if x > 0 {
            ln_fact += (x as f64).ln();
        }
        let lm = if x == 0 {
            f64::NEG_INFINITY
        } else {
            x as f64 * (prior_rate.ln() - exposure) + incident * (x as f64).ln() - ln_fact
        };
        ln_mass.push(lm);
    }
    let max = ln_mass.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut pmf: Vec<f64> = ln_mass.iter().map(|&lm| (lm - max).exp()).collect();
    let total: f64 = pmf.iter().sum();
    for p in &mut pmf {
        *p /= total;
    }

    let mut draws = Vec::with_capacity(COUNT_ORACLE_DRAWS);
    for rep in 0..COUNT_ORACLE_DRAWS as u64 {
        let mut trial = state.clone();
        sampler.sample_counts(&mut trial, 10 + rep).unwrap();
        draws.push(trial.counts[0][0]);
    }
    tv_against_pmf(&draws, &pmf)
}

/// All files under a directory, keyed by their relative path.
pub fn collect_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// A progress log with its wall-clock column zeroed, so two runs of the
/// same chain compare equal.
pub fn normalize_progress(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 {
            out.push_str(line);
        } else {
            for (col, field) in line.split(',').enumerate() {
                if col > 0 {
                    out.push(',');
                }
                out.push_str(if col == 1 { "0" } else { field });
            }
        }
        out.push('\n');
    }
    out
}

/// Asserts two fit output directories are identical: every file byte for
/// byte, except the progress log which is compared with timings zeroed.
pub fn assert_fit_dirs_equal(a: &Path, b: &Path, context: &str) {
    let fa = collect_files(a);
    let fb = collect_files(b);
    let keys_a: Vec<&String> = fa.keys().collect();
    let keys_b: Vec<&String> = fb.keys().collect();
    assert_eq!(keys_a, keys_b, "{context}: file sets differ");
    for (rel, bytes_a) in &fa {
        let bytes_b = &fb[rel];
        if rel == "progress.csv" {
            let na = normalize_progress(std::str::from_utf8(bytes_a).unwrap());
            let nb = normalize_progress(std::str::from_utf8(bytes_b).unwrap());
            assert_eq!(na, nb, "{context}: progress.csv differs beyond timings");
        } else {
            assert_eq!(bytes_a, bytes_b, "{context}: {rel} differs");
        }
    }
}

/// Average wall-clock seconds per sweep on the full data, after one
/// warm-up sweep.
pub fn time_iteration(net: &DynamicNetwork, hp: &Hyperparams, timed: u64) -> f64 {
    let view = TrainingView::full(net);
    let mut sampler = Sampler::new(&view, hp.clone(), GibbsOptions::default(), 1).unwrap();
    let mut state = sampler.init_state().unwrap();
    let mut ws = PropagationWorkspace::for_state(&state);
    sampler.gibbs_iteration(&mut state, &mut ws, 1).unwrap();
    let start = std::time::Instant::now();
    for iter in 2..2 + timed {
        sampler.gibbs_iteration(&mut state, &mut ws, iter).unwrap();
    }
    start.elapsed().as_secs_f64() / timed as f64
}

/// A random directed network with a fixed number of distinct links per
/// step, for scale measurements.
pub fn random_network(n: usize, t_len: usize, edges_total: usize, seed: u64) -> DynamicNetwork {
    let per_step = edges_total / t_len;
    let mut steps = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut r = RngStream::for_site(seed, Family::Holdout, [t as u64, 0, 0, 0]);
        let mut set = HashSet::with_capacity(per_step);
        while set.len() < per_step {
            let i = r.random_range(0..n as u32);
            let j = r.random_range(0..n as u32);
            if i != j {
                set.insert((i, j));
            }
        }
        steps.push(set.into_iter().collect());
    }
    DynamicNetwork::new(n, t_len, true, steps).unwrap()
}
