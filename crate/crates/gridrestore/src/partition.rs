//! Splits the network into subsystems of similar size while keeping the
//! number of cut lines small: heavy-edge matching coarsens the bus graph,
//! the coarse graph is split by greedy recursive bisection, and boundary
//! moves refine the projected assignment without ever increasing the cut.
//! Each subsystem's induced subgraph stays connected (connectivity wins
//! over balance when the two conflict).

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::netmodel::NetworkTopology;

#[derive(Debug, Error)]
pub enum PartitionError {
    #[error("subsystem count {n} out of range 1..={max}")]
    CountOutOfRange { n: usize, max: usize },
    #[error("subsystem {0} is empty")]
    EmptyPart(usize),
    #[error("subsystem {0} induces a disconnected subgraph")]
    DisconnectedPart(usize),
    #[error("assignment length {got} != bus count {want}")]
    BadAssignment { got: usize, want: usize },
}

/// A line crossing a subsystem boundary. The lower-indexed subsystem is the
/// exporting ("out") side; link flow is positive from out to in.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InterconnectLink {
    pub line: usize,
    pub out_part: usize,
    pub in_part: usize,
    pub out_bus: usize,
    pub in_bus: usize,
}

#[derive(Clone, Debug)]
pub struct Partition {
    pub n_parts: usize,
    pub assignment: Vec<usize>,
    pub subsystem_buses: Vec<Vec<usize>>,
    pub subsystem_lines: Vec<Vec<usize>>,
    pub links: Vec<InterconnectLink>,
}

impl Partition {
    /// Builds and validates a partition from an explicit bus assignment.
    pub fn from_assignment(
        topo: &NetworkTopology,
        assignment: Vec<usize>,
        n_parts: usize,
    ) -> Result<Self, PartitionError> {
        if assignment.len() != topo.buses.len() {
            return Err(PartitionError::BadAssignment {
                got: assignment.len(),
                want: topo.buses.len(),
            });
        }
        let mut subsystem_buses = vec![Vec::new(); n_parts];
        for (b, &p) in assignment.iter().enumerate() {
            if p >= n_parts {
                return Err(PartitionError::BadAssignment {
                    got: p,
                    want: n_parts,
                });
            }
            subsystem_buses[p].push(b);
        }
        for (p, buses) in subsystem_buses.iter().enumerate() {
            if buses.is_empty() {
                return Err(PartitionError::EmptyPart(p));
            }
            if !part_connected(topo, &assignment, p, buses) {
                return Err(PartitionError::DisconnectedPart(p));
            }
        }
        let mut subsystem_lines = vec![Vec::new(); n_parts];
        for (l, line) in topo.lines.iter().enumerate() {
            if assignment[line.from] == assignment[line.to] {
                subsystem_lines[assignment[line.from]].push(l);
            }
        }
        let links = interconnect_links(&assignment, topo);
        Ok(Partition {
            n_parts,
            assignment,
            subsystem_buses,
            subsystem_lines,
            links,
        })
    }

    pub fn cut_size(&self) -> usize {
        self.links.len()
    }
}

/// One entry per line whose endpoints sit in different subsystems, ordered
/// by line index.
pub fn interconnect_links(assignment: &[usize], topo: &NetworkTopology) -> Vec<InterconnectLink> {
    let mut links = Vec::new();
    for (l, line) in topo.lines.iter().enumerate() {
        let (pa, pb) = (assignment[line.from], assignment[line.to]);
        if pa != pb {
            let (out_part, out_bus, in_part, in_bus) = if pa < pb {
                (pa, line.from, pb, line.to)
            } else {
                (pb, line.to, pa, line.from)
            };
            links.push(InterconnectLink {
                line: l,
                out_part,
                in_part,
                out_bus,
                in_bus,
            });
        }
    }
    links
}

fn part_connected(
    topo: &NetworkTopology,
    assignment: &[usize],
    part: usize,
    buses: &[usize],
) -> bool {
    if buses.is_empty() {
        return true;
    }
    let mut adj: BTreeMap<usize, Vec<usize>> = buses.iter().map(|&b| (b, Vec::new())).collect();
    for line in &topo.lines {
        if assignment[line.from] == part && assignment[line.to] == part {
            adj.get_mut(&line.from).unwrap().push(line.to);
            adj.get_mut(&line.to).unwrap().push(line.from);
        }
    }
    let mut seen: BTreeMap<usize, bool> = buses.iter().map(|&b| (b, false)).collect();
    let mut stack = vec![buses[0]];
    *seen.get_mut(&buses[0]).unwrap() = true;
    let mut count = 0;
    while let Some(v) = stack.pop() {
        count += 1;
        for &u in &adj[&v] {
            if !seen[&u] {
                *seen.get_mut(&u).unwrap() = true;
                stack.push(u);
            }
        }
    }
    count == buses.len()
}

// ---------------------------------------------------------------------------
// heuristic partitioner
// ---------------------------------------------------------------------------

struct Graph {
    vweight: Vec<usize>,
    adj: Vec<BTreeMap<usize, usize>>,
}

impl Graph {
    fn from_topology(topo: &NetworkTopology) -> Self {
        let n = topo.buses.len();
        let mut adj = vec![BTreeMap::new(); n];
        for line in &topo.lines {
            if line.from != line.to {
                *adj[line.from].entry(line.to).or_insert(0) += 1;
                *adj[line.to].entry(line.from).or_insert(0) += 1;
            }
        }
        Graph {
            vweight: vec![1; n],
            adj,
        }
    }

    fn n(&self) -> usize {
        self.vweight.len()
    }
}

/// Heavy-edge matching: returns (coarse graph, fine -> coarse map).
fn coarsen(g: &Graph, rng: &mut ChaCha8Rng) -> (Graph, Vec<usize>) {
    let n = g.n();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut mate = vec![usize::MAX; n];
    for &v in &order {
        if mate[v] != usize::MAX {
            continue;
        }
        let mut best = None;
        let mut best_w = 0usize;
        for (&u, &w) in &g.adj[v] {
            if mate[u] == usize::MAX && (w > best_w || (w == best_w && best.is_none())) {
                best = Some(u);
                best_w = w;
            }
        }
        match best {
            Some(u) => {
                mate[v] = u;
                mate[u] = v;
            }
            None => mate[v] = v,
        }
    }
    let mut coarse_of = vec![usize::MAX; n];
    let mut next = 0usize;
    for v in 0..n {
        if coarse_of[v] == usize::MAX {
            coarse_of[v] = next;
            if mate[v] != v && mate[v] != usize::MAX {
                coarse_of[mate[v]] = next;
            }
            next += 1;
        }
    }
    let mut cg = Graph {
        vweight: vec![0; next],
        adj: vec![BTreeMap::new(); next],
    };
    for v in 0..n {
        cg.vweight[coarse_of[v]] += g.vweight[v];
        for (&u, &w) in &g.adj[v] {
            let (cv, cu) = (coarse_of[v], coarse_of[u]);
            if cv != cu {
                *cg.adj[cv].entry(cu).or_insert(0) += w;
            }
        }
    }
    // edge weights were double counted (once per endpoint)
    for a in cg.adj.iter_mut() {
        for w in a.values_mut() {
            *w /= 1; // each undirected edge contributed once from each side
        }
    }
    (cg, coarse_of)
}

fn pseudo_peripheral(g: &Graph, subset: &[usize], in_subset: &[bool]) -> usize {
    let bfs_far = |start: usize| -> usize {
        let mut dist: BTreeMap<usize, usize> = BTreeMap::new();
        dist.insert(start, 0);
        let mut queue = std::collections::VecDeque::from([start]);
        let mut last = start;
        while let Some(v) = queue.pop_front() {
            last = v;
            for &u in g.adj[v].keys() {
                if in_subset[u] && !dist.contains_key(&u) {
                    dist.insert(u, dist[&v] + 1);
                    queue.push_back(u);
                }
            }
        }
        last
    };
    let a = bfs_far(subset[0]);
    bfs_far(a)
}

/// Grows a region of roughly `target` weight from a peripheral vertex,
/// preferring the frontier vertex most attached to the region.
fn grow_region(g: &Graph, subset: &[usize], target: usize) -> Vec<bool> {
    let n = g.n();
    let mut in_subset = vec![false; n];
    for &v in subset {
        in_subset[v] = true;
    }
    let start = pseudo_peripheral(g, subset, &in_subset);
    let mut in_region = vec![false; n];
    let mut attach: BTreeMap<usize, usize> = BTreeMap::new();
    let mut weight = 0usize;
    let mut current = start;
    loop {
        in_region[current] = true;
        attach.remove(&current);
        weight += g.vweight[current];
        if weight >= target {
            break;
        }
        for (&u, &w) in &g.adj[current] {
            if in_subset[u] && !in_region[u] {
                *attach.entry(u).or_insert(0) += w;
            }
        }
        let mut best: Option<(usize, usize)> = None;
        for (&u, &w) in &attach {
            if best.map_or(true, |(_, bw)| w > bw) {
                best = Some((u, w));
            }
        }
        current = match best {
            Some((u, _)) => u,
            None => match subset.iter().find(|&&v| !in_region[v]) {
                Some(&v) => v,
                None => break,
            },
        };
    }
    in_region
}

fn bisect_recursive(
    g: &Graph,
    subset: Vec<usize>,
    k: usize,
    next_part: usize,
    assignment: &mut [usize],
) {
    if k == 1 {
        for &v in &subset {
            assignment[v] = next_part;
        }
        return;
    }
    let k1 = k / 2;
    let total: usize = subset.iter().map(|&v| g.vweight[v]).sum();
    let target = (total * k1 + k / 2) / k;
    let region = grow_region(g, &subset, target.max(1));
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for &v in &subset {
        if region[v] {
            a.push(v);
        } else {
            b.push(v);
        }
    }
    if b.is_empty() {
        b.push(a.pop().unwrap());
    }
    if a.is_empty() {
        a.push(b.pop().unwrap());
    }
    bisect_recursive(g, a, k1, next_part, assignment);
    bisect_recursive(g, b, k - k1, next_part + k1, assignment);
}

fn cut_weight(topo: &NetworkTopology, assignment: &[usize]) -> usize {
    topo.lines
        .iter()
        .filter(|l| assignment[l.from] != assignment[l.to])
        .count()
}

/// Moves fragments of disconnected parts to an adjacent part so every part
/// induces a connected subgraph.
fn repair_connectivity(topo: &NetworkTopology, assignment: &mut [usize], n_parts: usize) {
    loop {
        let mut changed = false;
        for p in 0..n_parts {
            let members: Vec<usize> = (0..topo.buses.len())
                .filter(|&b| assignment[b] == p)
                .collect();
            if members.is_empty() {
                continue;
            }
            // find components of part p
            let mut comp = vec![usize::MAX; topo.buses.len()];
            let mut comps: Vec<Vec<usize>> = Vec::new();
            for &s in &members {
                if comp[s] != usize::MAX {
                    continue;
                }
                let id = comps.len();
                let mut stack = vec![s];
                comp[s] = id;
                let mut verts = vec![s];
                while let Some(v) = stack.pop() {
                    for line in &topo.lines {
                        let other = if line.from == v {
                            line.to
                        } else if line.to == v {
                            line.from
                        } else {
                            continue;
                        };
                        if assignment[other] == p && comp[other] == usize::MAX {
                            comp[other] = id;
                            stack.push(other);
                            verts.push(other);
                        }
                    }
                }
                comps.push(verts);
            }
            if comps.len() <= 1 {
                continue;
            }
            // keep the heaviest component, hand fragments to their most
            // connected neighboring part
            let keep = comps
                .iter()
                .enumerate()
                .max_by_key(|(i, c)| (c.len(), usize::MAX - i))
                .map(|(i, _)| i)
                .unwrap();
            for (i, verts) in comps.iter().enumerate() {
                if i == keep {
                    continue;
                }
                let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
                for line in &topo.lines {
                    for (a, b) in [(line.from, line.to), (line.to, line.from)] {
                        if verts.contains(&a) && assignment[b] != p {
                            *counts.entry(assignment[b]).or_insert(0) += 1;
                        }
                    }
                }
                let dest = counts
                    .iter()
                    .max_by_key(|(_, &c)| c)
                    .map(|(&q, _)| q)
                    .unwrap_or((p + 1) % n_parts);
                for &v in verts {
                    assignment[v] = dest;
                }
                changed = true;
            }
        }
        if !changed {
            return;
        }
    }
}

/// Greedy boundary refinement: moves a vertex to a neighboring part only if
/// it strictly reduces the cut, keeps sizes within the balance band, and
/// leaves its old part connected.
fn refine(topo: &NetworkTopology, assignment: &mut [usize], n_parts: usize) {
    let n = topo.buses.len();
    let mean = n as f64 / n_parts as f64;
    let (lo, hi) = (
        (0.8 * mean).floor().max(1.0) as usize,
        (1.2 * mean).ceil() as usize,
    );
    let mut sizes = vec![0usize; n_parts];
    for &p in assignment.iter() {
        sizes[p] += 1;
    }
    for _ in 0..10 {
        let mut moved = false;
        for v in 0..n {
            let a = assignment[v];
            if sizes[a] <= lo.max(1) {
                continue;
            }
            let mut ext: BTreeMap<usize, usize> = BTreeMap::new();
            let mut internal = 0usize;
            for line in &topo.lines {
                let other = if line.from == v {
                    line.to
                } else if line.to == v {
                    line.from
                } else {
                    continue;
                };
                if assignment[other] == a {
                    internal += 1;
                } else {
                    *ext.entry(assignment[other]).or_insert(0) += 1;
                }
            }
            let mut best: Option<(usize, usize)> = None;
            for (&b, &w) in &ext {
                if w > internal && sizes[b] < hi && best.map_or(true, |(_, bw)| w > bw) {
                    best = Some((b, w));
                }
            }
            if let Some((b, _)) = best {
                // the move must not disconnect part a
                assignment[v] = b;
                let members: Vec<usize> =
                    (0..n).filter(|&u| assignment[u] == a).collect();
                if members.is_empty() || !part_connected(topo, assignment, a, &members) {
                    assignment[v] = a;
                } else {
                    sizes[a] -= 1;
                    sizes[b] += 1;
                    moved = true;
                }
            }
        }
        if !moved {
            break;
        }
    }
}

/// Partitions the bus graph into `n_parts` connected subsystems.
/// Deterministic for a given seed.
pub fn partition_network(
    topo: &NetworkTopology,
    n_parts: usize,
    seed: u64,
) -> Result<Partition, PartitionError> {
    let n = topo.buses.len();
    if n_parts == 0 || n_parts > n {
        return Err(PartitionError::CountOutOfRange { n: n_parts, max: n });
    }
    if n_parts == 1 {
        return Partition::from_assignment(topo, vec![0; n], 1);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fine = Graph::from_topology(topo);
    let mut levels: Vec<Vec<usize>> = Vec::new();
    let mut graphs = vec![fine];
    while graphs.last().unwrap().n() > (4 * n_parts).max(16) {
        let (cg, map) = coarsen(graphs.last().unwrap(), &mut rng);
        if cg.n() as f64 > 0.95 * graphs.last().unwrap().n() as f64 {
            break;
        }
        levels.push(map);
        graphs.push(cg);
    }
    let coarsest = graphs.last().unwrap();
    let mut coarse_assignment = vec![0usize; coarsest.n()];
    bisect_recursive(
        coarsest,
        (0..coarsest.n()).collect(),
        n_parts,
        0,
        &mut coarse_assignment,
    );
    // project back to the finest level
    let mut assignment = coarse_assignment;
    for map in levels.iter().rev() {
        assignment = map.iter().map(|&c| assignment[c]).collect();
    }
    // parts can come back empty after aggressive coarsening; reseed each
    // empty part with a boundary vertex of the largest part
    for p in 0..n_parts {
        if !assignment.iter().any(|&q| q == p) {
            let mut sizes = vec![0usize; n_parts];
            for &q in assignment.iter() {
                sizes[q] += 1;
            }
            let largest = (0..n_parts).max_by_key(|&q| sizes[q]).unwrap();
            if let Some(v) = (0..n).find(|&v| assignment[v] == largest) {
                assignment[v] = p;
            }
        }
    }
    repair_connectivity(topo, &mut assignment, n_parts);
    let before = cut_weight(topo, &assignment);
    refine(topo, &mut assignment, n_parts);
    repair_connectivity(topo, &mut assignment, n_parts);
    debug_assert!(cut_weight(topo, &assignment) <= before);
    Partition::from_assignment(topo, assignment, n_parts)
}
