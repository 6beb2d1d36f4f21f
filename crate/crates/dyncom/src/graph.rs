//! Dynamic relational data: loading, holdout splitting, and the training
//! view consumed by simulation and inference.
//!
//! Edge lists use a one-line header `N T directed|undirected` followed by
//! `t i j` rows (0-based indices). Undirected data is stored symmetrically;
//! all per-dyad work then happens once per unordered pair.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::{Family, RngStream};

/// A binary interaction network observed over discrete time steps.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicNetwork {
    n_nodes: usize,
    n_steps: usize,
    directed: bool,
    /// Sorted, deduplicated ordered pairs per step. For undirected data both
    /// orientations of every link are present.
    edges: Vec<Vec<(u32, u32)>>,
}

impl DynamicNetwork {
    /// Builds a network from per-step edge lists. Pairs may arrive in any
    /// order and either orientation (for undirected data); duplicates are
    /// removed. Self-pairs and out-of-range indices are rejected.
    pub fn new(
        n_nodes: usize,
        n_steps: usize,
        directed: bool,
        edges: Vec<Vec<(u32, u32)>>,
    ) -> Result<Self> {
        if n_nodes == 0 || n_steps == 0 {
            return Err(Error::Parameter(format!(
                "network requires at least one node and one step, got N={n_nodes}, T={n_steps}"
            )));
        }
        if edges.len() != n_steps {
            return Err(Error::Parameter(format!(
                "expected {n_steps} per-step edge lists, got {}",
                edges.len()
            )));
        }
        let mut stored = Vec::with_capacity(n_steps);
        for step in edges {
            let mut set = HashSet::with_capacity(step.len() * 2);
            for (i, j) in step {
                if i == j {
                    return Err(Error::Validation {
                        line: None,
                        msg: format!("self-pair ({i}, {j}) is not allowed"),
                    });
                }
                if i as usize >= n_nodes || j as usize >= n_nodes {
                    return Err(Error::Validation {
                        line: None,
                        msg: format!("pair ({i}, {j}) out of range for N={n_nodes}"),
                    });
                }
                set.insert((i, j));
                if !directed {
                    set.insert((j, i));
                }
            }
            let mut list: Vec<(u32, u32)> = set.into_iter().collect();
            list.sort_unstable();
            stored.push(list);
        }
        Ok(DynamicNetwork { n_nodes, n_steps, directed, edges: stored })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn directed(&self) -> bool {
        self.directed
    }

    /// Stored ordered pairs at step `t` (both orientations for undirected
    /// data), sorted.
    pub fn edges(&self, t: usize) -> &[(u32, u32)] {
        &self.edges[t]
    }

    pub fn has_edge(&self, t: usize, i: u32, j: u32) -> bool {
        self.edges[t].binary_search(&(i, j)).is_ok()
    }

    /// Total positive links; unordered pairs count once for undirected data.
    pub fn n_edges(&self) -> u64 {
        let stored: usize = self.edges.iter().map(|e| e.len()).sum();
        if self.directed {
            stored as u64
        } else {
            (stored / 2) as u64
        }
    }

    /// Number of distinct dyads per step: ordered pairs for directed data,
    /// unordered pairs otherwise.
    pub fn candidate_dyads_per_step(&self) -> u64 {
        let n = self.n_nodes as u64;
        if self.directed {
            n * (n - 1)
        } else {
            n * (n - 1) / 2
        }
    }

    /// Writes the edge-list format. Undirected links are written once with
    /// the smaller index first, so save followed by load is the identity.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        let kind = if self.directed { "directed" } else { "undirected" };
        writeln!(w, "{} {} {}", self.n_nodes, self.n_steps, kind)?;
        for (t, step) in self.edges.iter().enumerate() {
            for &(i, j) in step {
                if !self.directed && i > j {
                    continue;
                }
                writeln!(w, "{t} {i} {j}")?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Parses the edge-list format described at the top of this module.
pub fn load_edge_list(path: &Path) -> Result<DynamicNetwork> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Parse { line: 1, msg: "empty file".into() })?;
    let parts: Vec<&str> = header.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header `N T directed|undirected`, got `{header}`"),
        });
    }
    let n_nodes: usize = parts[0]
        .parse()
        .map_err(|_| Error::Parse { line: 1, msg: format!("invalid node count `{}`", parts[0]) })?;
    let n_steps: usize = parts[1]
        .parse()
        .map_err(|_| Error::Parse { line: 1, msg: format!("invalid step count `{}`", parts[1]) })?;
    let directed = match parts[2] {
        "directed" => true,
        "undirected" => false,
        other => {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected `directed` or `undirected`, got `{other}`"),
            })
        }
    };
    if n_nodes == 0 || n_steps == 0 {
        return Err(Error::Validation {
            line: Some(1),
            msg: format!("N and T must be positive, got N={n_nodes}, T={n_steps}"),
        });
    }

    let mut edges: Vec<Vec<(u32, u32)>> = vec![Vec::new(); n_steps];
    for (idx, raw) in lines {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let mut next_num = |name: &str| -> Result<u64> {
            let tok = fields
                .next()
                .ok_or_else(|| Error::Parse { line: line_no, msg: format!("missing {name}") })?;
            tok.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("invalid {name} `{tok}`"),
            })
        };
        let t = next_num("step")?;
        let i = next_num("source node")?;
        let j = next_num("target node")?;
        if fields.next().is_some() {
            return Err(Error::Parse {
                line: line_no,
                msg: "expected exactly three fields `t i j`".into(),
            });
        }
        if t >= n_steps as u64 {
            return Err(Error::at_line(line_no, format!("step {t} out of range for T={n_steps}")));
        }
        if i >= n_nodes as u64 || j >= n_nodes as u64 {
            return Err(Error::at_line(
                line_no,
                format!("node pair ({i}, {j}) out of range for N={n_nodes}"),
            ));
        }
        if i == j {
            return Err(Error::at_line(line_no, format!("self-pair ({i}, {j}) is not allowed")));
        }
        edges[t as usize].push((i as u32, j as u32));
    }
    DynamicNetwork::new(n_nodes, n_steps, directed, edges)
}

/// One held-out dyad: the step, the pair, and the true link indicator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaskEntry {
    pub t: u32,
    pub i: u32,
    pub j: u32,
    pub label: bool,
}

/// Dyads removed from training and scored at evaluation time.
///
/// Entries are sorted by (t, i, j) and unique. For undirected data pairs are
/// canonical (i < j).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HoldoutMask {
    entries: Vec<MaskEntry>,
}

impl HoldoutMask {
    pub fn empty() -> Self {
        HoldoutMask { entries: Vec::new() }
    }

    pub fn from_entries(mut entries: Vec<MaskEntry>) -> Result<Self> {
        entries.sort_unstable_by_key(|e| (e.t, e.i, e.j));
        for pair in entries.windows(2) {
            if (pair[0].t, pair[0].i, pair[0].j) == (pair[1].t, pair[1].i, pair[1].j) {
                return Err(Error::Validation {
                    line: None,
                    msg: format!(
                        "duplicate held-out dyad (t={}, i={}, j={})",
                        pair[0].t, pair[0].i, pair[0].j
                    ),
                });
            }
        }
        Ok(HoldoutMask { entries })
    }

    pub fn entries(&self) -> &[MaskEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        writeln!(w, "t,i,j,label")?;
        for e in &self.entries {
            writeln!(w, "{},{},{},{}", e.t, e.i, e.j, u8::from(e.label))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a mask written by [`HoldoutMask::save_csv`] and validates it
    /// against the network it will be applied to.
    pub fn load_csv(path: &Path, net: &DynamicNetwork) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut entries = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() || (line_no == 1 && line == "t,i,j,label") {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(Error::Parse {
                    line: line_no,
                    msg: "expected four fields `t,i,j,label`".into(),
                });
            }
            let parse = |tok: &str, name: &str| -> Result<u64> {
                tok.trim().parse().map_err(|_| Error::Parse {
                    line: line_no,
                    msg: format!("invalid {name} `{tok}`"),
                })
            };
            let t = parse(fields[0], "step")?;
            let mut i = parse(fields[1], "source node")?;
            let mut j = parse(fields[2], "target node")?;
            let label = match fields[3].trim() {
                "0" => false,
                "1" => true,
                other => {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: format!("invalid label `{other}`"),
                    })
                }
            };
            if t >= net.n_steps() as u64 {
                return Err(Error::at_line(line_no, format!("step {t} out of range")));
            }
            if i >= net.n_nodes() as u64 || j >= net.n_nodes() as u64 || i == j {
                return Err(Error::at_line(line_no, format!("invalid dyad ({i}, {j})")));
            }
            if !net.directed() && i > j {
                std::mem::swap(&mut i, &mut j);
            }
            let expect = net.has_edge(t as usize, i as u32, j as u32);
            if expect != label {
                return Err(Error::at_line(
                    line_no,
                    format!("label {} disagrees with the network", u8::from(label)),
                ));
            }
            entries.push(MaskEntry { t: t as u32, i: i as u32, j: j as u32, label });
        }
        HoldoutMask::from_entries(entries)
    }
}

/// Samples a holdout mask: independently at each step, round(fraction x
/// candidate dyads) distinct dyads drawn uniformly without replacement.
/// Labels record the true link indicators.
pub fn split_holdout(net: &DynamicNetwork, fraction: f64, seed: u64) -> Result<HoldoutMask> {
    if !(0.0..=1.0).contains(&fraction) || !fraction.is_finite() {
        return Err(Error::Parameter(format!(
            "holdout fraction must lie in [0, 1], got {fraction}"
        )));
    }
    let n = net.n_nodes() as u32;
    let per_step = (fraction * net.candidate_dyads_per_step() as f64).round() as usize;
    let mut entries = Vec::with_capacity(per_step * net.n_steps());
    for t in 0..net.n_steps() {
        let mut candidates: Vec<(u32, u32)> = Vec::with_capacity(net.candidate_dyads_per_step() as usize);
        for i in 0..n {
            let start = if net.directed() { 0 } else { i + 1 };
            for j in start..n {
                if i != j {
                    candidates.push((i, j));
                }
            }
        }
        let mut rng = RngStream::for_site(seed, Family::Holdout, [t as u64, 0, 0, 0]);
        partial_shuffle(&mut candidates, per_step, &mut rng);
        for &(i, j) in candidates.iter().take(per_step) {
            entries.push(MaskEntry { t: t as u32, i, j, label: net.has_edge(t, i, j) });
        }
    }
    HoldoutMask::from_entries(entries)
}

/// Fisher-Yates over the first `k` positions.
fn partial_shuffle<T>(items: &mut [T], k: usize, rng: &mut RngStream) {
    use rand::Rng;
    let n = items.len();
    for idx in 0..k.min(n.saturating_sub(1)) {
        let pick = rng.random_range(idx..n);
        items.swap(idx, pick);
    }
}

/// Headline dataset statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetStats {
    pub n_nodes: usize,
    pub n_steps: usize,
    pub n_edges: u64,
    /// Percentage of candidate dyads (across all steps) that carry a link.
    pub sparsity_pct: f64,
}

impl fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "N={} T={} N_E={} S={:.4}%",
            self.n_nodes, self.n_steps, self.n_edges, self.sparsity_pct
        )
    }
}

pub fn dataset_stats(net: &DynamicNetwork) -> DatasetStats {
    let n_edges = net.n_edges();
    let dyads = net.candidate_dyads_per_step() * net.n_steps() as u64;
    DatasetStats {
        n_nodes: net.n_nodes(),
        n_steps: net.n_steps(),
        n_edges,
        sparsity_pct: 100.0 * n_edges as f64 / dyads as f64,
    }
}

/// Per-destination contributor lists: for each node i, the sources i' whose
/// coefficients may be non-zero, in sorted order with i itself always
/// present. Coefficient values and count allocations are stored in arrays
/// parallel to `sources`, addressed by flat entry index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupportSet {
    offsets: Vec<usize>,
    sources: Vec<u32>,
}

impl SupportSet {
    /// Support induced by a set of positive links: the diagonal plus one
    /// entry per in-neighbor. `links` holds ordered pairs for directed data
    /// and canonical unordered pairs otherwise.
    pub fn from_links(n_nodes: usize, links: &[(u32, u32)], directed: bool) -> Self {
        let mut incoming: Vec<Vec<u32>> = vec![Vec::new(); n_nodes];
        for &(i, j) in links {
            incoming[j as usize].push(i);
            if !directed {
                incoming[i as usize].push(j);
            }
        }
        let mut offsets = Vec::with_capacity(n_nodes + 1);
        let mut sources = Vec::new();
        offsets.push(0);
        for (dst, mut list) in incoming.into_iter().enumerate() {
            list.push(dst as u32);
            list.sort_unstable();
            list.dedup();
            sources.extend_from_slice(&list);
            offsets.push(sources.len());
        }
        SupportSet { offsets, sources }
    }

    /// Diagonal-only support (every node contributes only to itself).
    pub fn diagonal(n_nodes: usize) -> Self {
        SupportSet {
            offsets: (0..=n_nodes).collect(),
            sources: (0..n_nodes as u32).collect(),
        }
    }

    /// Complete support: every node contributes to every node.
    pub fn complete(n_nodes: usize) -> Self {
        let mut offsets = Vec::with_capacity(n_nodes + 1);
        let mut sources = Vec::with_capacity(n_nodes * n_nodes);
        offsets.push(0);
        for _ in 0..n_nodes {
            sources.extend(0..n_nodes as u32);
            offsets.push(sources.len());
        }
        SupportSet { offsets, sources }
    }

    pub fn n_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    /// Total number of supported (source, destination) entries.
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    /// Contributors of `dst`, sorted ascending.
    pub fn sources_of(&self, dst: usize) -> &[u32] {
        &self.sources[self.offsets[dst]..self.offsets[dst + 1]]
    }

    /// Flat entry indices for `dst`, aligned with [`Self::sources_of`].
    pub fn entry_range(&self, dst: usize) -> std::ops::Range<usize> {
        self.offsets[dst]..self.offsets[dst + 1]
    }

    /// Flat iteration over (entry index, source, destination).
    pub fn iter_entries(&self) -> impl Iterator<Item = (usize, u32, u32)> + '_ {
        (0..self.n_nodes()).flat_map(move |dst| {
            self.entry_range(dst)
                .map(move |e| (e, self.sources[e], dst as u32))
        })
    }
}

/// The sampler's window onto the data: training links, coefficient supports,
/// and held-out dyad indexes, all per step.
#[derive(Debug, Clone)]
pub struct TrainingView {
    n_nodes: usize,
    n_steps: usize,
    directed: bool,
    /// Training positive links per step: ordered pairs for directed data,
    /// canonical (i < j) pairs for undirected data. Sorted.
    links: Vec<Vec<(u32, u32)>>,
    /// Coefficient support per step, induced by the training links.
    support: Vec<Arc<SupportSet>>,
    /// Held-out dyads per step, sorted, same pair convention as `links`.
    heldout: Vec<Vec<(u32, u32)>>,
    /// Held-out partners by source: heldout_out[t][i] lists j with (i, j)
    /// held out at t. For undirected data this holds all held-out partners.
    heldout_out: Vec<Vec<Vec<u32>>>,
    /// Held-out partners by target (directed data only).
    heldout_in: Vec<Vec<Vec<u32>>>,
}

impl TrainingView {
    pub fn new(net: &DynamicNetwork, mask: &HoldoutMask) -> Result<Self> {
        let n_nodes = net.n_nodes();
        let n_steps = net.n_steps();
        let directed = net.directed();
        let mut heldout: Vec<Vec<(u32, u32)>> = vec![Vec::new(); n_steps];
        for e in mask.entries() {
            if e.t as usize >= n_steps || e.i as usize >= n_nodes || e.j as usize >= n_nodes {
                return Err(Error::Validation {
                    line: None,
                    msg: format!("mask entry (t={}, i={}, j={}) out of range", e.t, e.i, e.j),
                });
            }
            if e.label != net.has_edge(e.t as usize, e.i, e.j) {
                return Err(Error::Validation {
                    line: None,
                    msg: format!(
                        "mask label at (t={}, i={}, j={}) disagrees with the network",
                        e.t, e.i, e.j
                    ),
                });
            }
            heldout[e.t as usize].push((e.i, e.j));
        }
        for list in &mut heldout {
            list.sort_unstable();
        }

        let mut links = Vec::with_capacity(n_steps);
        let mut support = Vec::with_capacity(n_steps);
        let mut heldout_out = Vec::with_capacity(n_steps);
        let mut heldout_in = Vec::with_capacity(n_steps);
        for t in 0..n_steps {
            let mut step_links: Vec<(u32, u32)> = net
                .edges(t)
                .iter()
                .copied()
                .filter(|&(i, j)| directed || i < j)
                .filter(|&(i, j)| heldout[t].binary_search(&(i, j)).is_err())
                .collect();
            step_links.sort_unstable();
            support.push(Arc::new(SupportSet::from_links(n_nodes, &step_links, directed)));

            let mut out: Vec<Vec<u32>> = vec![Vec::new(); n_nodes];
            let mut inc: Vec<Vec<u32>> = vec![Vec::new(); n_nodes];
            for &(i, j) in &heldout[t] {
                out[i as usize].push(j);
                if directed {
                    inc[j as usize].push(i);
                } else {
                    out[j as usize].push(i);
                }
            }
            links.push(step_links);
            heldout_out.push(out);
            heldout_in.push(inc);
        }
        Ok(TrainingView {
            n_nodes,
            n_steps,
            directed,
            links,
            support,
            heldout,
            heldout_out,
            heldout_in,
        })
    }

    /// View with nothing held out.
    pub fn full(net: &DynamicNetwork) -> Self {
        TrainingView::new(net, &HoldoutMask::empty()).expect("empty mask is always valid")
    }

    /// View whose coefficient supports cover every ordered pair no matter
    /// what the links are. Sampler diagnostics use this to hold the
    /// coefficient structure fixed while the data changes between rounds.
    pub fn with_complete_support(net: &DynamicNetwork, mask: &HoldoutMask) -> Result<Self> {
        let mut view = TrainingView::new(net, mask)?;
        let complete = Arc::new(SupportSet::complete(net.n_nodes()));
        for s in view.support.iter_mut() {
            *s = complete.clone();
        }
        Ok(view)
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn directed(&self) -> bool {
        self.directed
    }

    pub fn links(&self, t: usize) -> &[(u32, u32)] {
        &self.links[t]
    }

    pub fn support(&self, t: usize) -> &Arc<SupportSet> {
        &self.support[t]
    }

    pub fn is_heldout(&self, t: usize, i: u32, j: u32) -> bool {
        let key = if self.directed || i < j { (i, j) } else { (j, i) };
        self.heldout[t].binary_search(&key).is_ok()
    }

    pub fn heldout(&self, t: usize) -> &[(u32, u32)] {
        &self.heldout[t]
    }

    pub fn heldout_out(&self, t: usize, i: usize) -> &[u32] {
        &self.heldout_out[t][i]
    }

    pub fn heldout_in(&self, t: usize, i: usize) -> &[u32] {
        &self.heldout_in[t][i]
    }

    /// Training dyads at one step: candidates minus held-out dyads.
    pub fn n_training_dyads(&self, t: usize) -> u64 {
        let n = self.n_nodes as u64;
        let all = if self.directed { n * (n - 1) } else { n * (n - 1) / 2 };
        all - self.heldout[t].len() as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_and_round_trips_directed() {
        let f = write_temp("4 2 directed\n0 0 1\n0 1 0\n1 2 3\n0 0 1\n");
        let net = load_edge_list(f.path()).unwrap();
        assert_eq!(net.n_nodes(), 4);
        assert_eq!(net.n_steps(), 2);
        assert!(net.directed());
        assert_eq!(net.edges(0), &[(0, 1), (1, 0)]);
        assert_eq!(net.n_edges(), 3);

        let out = tempfile::NamedTempFile::new().unwrap();
        net.save(out.path()).unwrap();
        let again = load_edge_list(out.path()).unwrap();
        assert_eq!(net, again);
    }

    #[test]
    fn loads_and_round_trips_undirected() {
        let f = write_temp("3 1 undirected\n0 2 1\n0 0 2\n");
        let net = load_edge_list(f.path()).unwrap();
        assert!(net.has_edge(0, 1, 2));
        assert!(net.has_edge(0, 2, 1));
        assert!(net.has_edge(0, 2, 0));
        assert_eq!(net.n_edges(), 2);

        let out = tempfile::NamedTempFile::new().unwrap();
        net.save(out.path()).unwrap();
        assert_eq!(load_edge_list(out.path()).unwrap(), net);
    }

    #[test]
    fn parse_errors_name_the_line() {
        let cases = [
            ("2 1\n", 1, "header"),
            ("2 1 directed\n0 0\n", 2, "missing"),
            ("2 1 directed\n0 0 x\n", 2, "invalid"),
            ("2 1 directed\n0 0 1 9\n", 2, "three fields"),
        ];
        for (content, line, needle) in cases {
            let f = write_temp(content);
            match load_edge_list(f.path()) {
                Err(Error::Parse { line: l, msg }) => {
                    assert_eq!(l, line, "{content:?}");
                    assert!(msg.contains(needle) || needle == "header", "{msg}");
                }
                other => panic!("expected parse error for {content:?}, got {other:?}"),
            }
        }
    }

    #[test]
    fn validation_errors_name_the_line() {
        // Out-of-range node index on line 2 (declared range [0, 2)).
        let f = write_temp("2 1 directed\n0 2 2\n");
        match load_edge_list(f.path()) {
            Err(Error::Validation { line: Some(2), msg }) => {
                assert!(msg.contains("out of range"), "{msg}");
            }
            other => panic!("expected validation error, got {other:?}"),
        }
        // Self-pair.
        let f = write_temp("3 1 directed\n0 1 1\n");
        match load_edge_list(f.path()) {
            Err(Error::Validation { line: Some(2), msg }) => {
                assert!(msg.contains("self-pair"), "{msg}");
            }
            other => panic!("expected validation error, got {other:?}"),
        }
        // Step out of range.
        let f = write_temp("3 1 directed\n1 0 1\n");
        assert!(matches!(
            load_edge_list(f.path()),
            Err(Error::Validation { line: Some(2), .. })
        ));
    }

    fn chain_network(n: usize, t: usize) -> DynamicNetwork {
        // i -> i+1 at every step, a simple deterministic fixture.
        let step: Vec<(u32, u32)> = (0..n as u32 - 1).map(|i| (i, i + 1)).collect();
        DynamicNetwork::new(n, t, true, vec![step; t]).unwrap()
    }

    #[test]
    fn holdout_counts_match_the_rounding_rule() {
        // At N=73 and fraction 0.1, each step holds out round(0.1 * 73 * 72)
        // = 526 dyads.
        let net = chain_network(73, 2);
        let mask = split_holdout(&net, 0.1, 11).unwrap();
        assert_eq!(mask.len(), 2 * 526);
        let per_step_0 = mask.entries().iter().filter(|e| e.t == 0).count();
        assert_eq!(per_step_0, 526);
    }

    #[test]
    fn holdout_labels_match_and_dyads_are_unique() {
        let net = chain_network(10, 3);
        let mask = split_holdout(&net, 0.2, 5).unwrap();
        for e in mask.entries() {
            assert_ne!(e.i, e.j);
            assert_eq!(e.label, net.has_edge(e.t as usize, e.i, e.j));
        }
        let mut seen: Vec<_> = mask.entries().iter().map(|e| (e.t, e.i, e.j)).collect();
        seen.dedup();
        assert_eq!(seen.len(), mask.len());
    }

    #[test]
    fn holdout_is_deterministic_per_seed() {
        let net = chain_network(12, 2);
        let a = split_holdout(&net, 0.15, 42).unwrap();
        let b = split_holdout(&net, 0.15, 42).unwrap();
        let c = split_holdout(&net, 0.15, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn holdout_fraction_bounds() {
        let net = chain_network(5, 1);
        assert!(split_holdout(&net, -0.1, 0).is_err());
        assert!(split_holdout(&net, 1.5, 0).is_err());
        assert!(split_holdout(&net, 0.0, 0).unwrap().is_empty());
        // fraction 1 holds out every candidate dyad.
        let all = split_holdout(&net, 1.0, 0).unwrap();
        assert_eq!(all.len(), 20);
    }

    #[test]
    fn training_view_partitions_links() {
        let net = chain_network(10, 2);
        let mask = split_holdout(&net, 0.3, 7).unwrap();
        let view = TrainingView::new(&net, &mask).unwrap();
        for t in 0..2 {
            for &(i, j) in net.edges(t) {
                let in_training = view.links(t).binary_search(&(i, j)).is_ok();
                let in_heldout = view.is_heldout(t, i, j);
                assert!(in_training ^ in_heldout, "link ({i},{j}) at {t}");
            }
            for &(i, j) in view.links(t) {
                assert!(net.has_edge(t, i, j));
            }
        }
    }

    #[test]
    fn support_includes_diagonal_and_in_neighbors_only() {
        let net = chain_network(5, 1);
        let view = TrainingView::full(&net);
        let s = view.support(0);
        assert_eq!(s.sources_of(0), &[0]); // no in-neighbor
        assert_eq!(s.sources_of(1), &[0, 1]); // 0 -> 1 plus diagonal
        assert_eq!(s.sources_of(4), &[3, 4]);
        assert_eq!(s.len(), 5 + 4);
    }

    #[test]
    fn undirected_support_is_symmetric() {
        let net =
            DynamicNetwork::new(4, 1, false, vec![vec![(0, 1), (2, 1)]]).unwrap();
        let view = TrainingView::full(&net);
        let s = view.support(0);
        assert_eq!(s.sources_of(0), &[0, 1]);
        assert_eq!(s.sources_of(1), &[0, 1, 2]);
        assert_eq!(s.sources_of(2), &[1, 2]);
        assert_eq!(s.sources_of(3), &[3]);
    }

    #[test]
    fn heldout_partner_lists_cover_both_directions() {
        let net = chain_network(6, 1);
        let entries = vec![
            MaskEntry { t: 0, i: 0, j: 3, label: false },
            MaskEntry { t: 0, i: 2, j: 3, label: true },
        ];
        let mask = HoldoutMask::from_entries(entries).unwrap();
        let view = TrainingView::new(&net, &mask).unwrap();
        assert_eq!(view.heldout_out(0, 0), &[3]);
        assert_eq!(view.heldout_out(0, 2), &[3]);
        assert_eq!(view.heldout_in(0, 3), &[0, 2]);
        assert!(view.is_heldout(0, 2, 3));
        assert!(!view.is_heldout(0, 3, 2));
        // The held-out positive (2, 3) must not be a training link.
        assert!(view.links(0).binary_search(&(2, 3)).is_err());
        assert_eq!(view.n_training_dyads(0), 30 - 2);
    }

    #[test]
    fn mask_label_mismatch_is_rejected() {
        let net = chain_network(4, 1);
        let mask = HoldoutMask::from_entries(vec![MaskEntry {
            t: 0,
            i: 0,
            j: 1,
            label: false, // (0, 1) is actually a link
        }])
        .unwrap();
        assert!(TrainingView::new(&net, &mask).is_err());
    }

    #[test]
    fn mask_csv_round_trips() {
        let net = chain_network(8, 2);
        let mask = split_holdout(&net, 0.25, 3).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        mask.save_csv(f.path()).unwrap();
        let again = HoldoutMask::load_csv(f.path(), &net).unwrap();
        assert_eq!(mask, again);
    }

    #[test]
    fn stats_match_known_shape() {
        // A file with the same headline shape as the smallest reference
        // dataset: N=73, T=2, 506 directed links.
        let mut edges: Vec<Vec<(u32, u32)>> = vec![Vec::new(); 2];
        let mut count = 0;
        'outer: for t in 0..2 {
            for i in 0..73u32 {
                for j in 0..73u32 {
                    if i != j {
                        edges[t].push((i, j));
                        count += 1;
                        if count == 506 {
                            break 'outer;
                        }
                    }
                }
            }
        }
        let net = DynamicNetwork::new(73, 2, true, edges).unwrap();
        let stats = dataset_stats(&net);
        assert_eq!(stats.n_edges, 506);
        assert!((stats.sparsity_pct - 100.0 * 506.0 / (73.0 * 72.0 * 2.0)).abs() < 1e-12);
        assert!((stats.sparsity_pct - 4.8135).abs() < 5e-4);
        assert_eq!(format!("{stats}"), "N=73 T=2 N_E=506 S=4.8135%");
    }

    #[test]
    fn undirected_candidate_dyads() {
        let net = DynamicNetwork::new(5, 2, false, vec![vec![(0, 1)], vec![]]).unwrap();
        assert_eq!(net.candidate_dyads_per_step(), 10);
        let stats = dataset_stats(&net);
        assert_eq!(stats.n_edges, 1);
        assert!((stats.sparsity_pct - 5.0).abs() < 1e-12);
    }
}
