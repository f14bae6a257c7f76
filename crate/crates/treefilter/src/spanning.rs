//! Spanning-tree construction and the rooted view consumed by the filter.
//!
//! Both constructors share one contraction skeleton: every surviving
//! super-vertex picks an incident edge, picked edges are added under a
//! union-find cycle guard, then the edge list is rebuilt with self-loops
//! removed and parallel edges flattened to the smallest-distance survivor.
//! The deterministic constructor picks each component's minimum edge
//! (ties broken by canonical edge index); the randomized one samples
//! proportionally to `exp(-w)`, so similar nodes attract each other the
//! way the minimum selection would, just stochastically.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::grid_graph::GridGraph;
use crate::rng::mix;

/// Union-find over a fixed vertex set, with path halving and union by rank.
#[derive(Debug, Clone)]
pub struct UnionFind {
    parent: Vec<u32>,
    rank: Vec<u8>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n as u32).collect(),
            rank: vec![0; n],
        }
    }

    pub fn find(&mut self, mut v: u32) -> u32 {
        while self.parent[v as usize] != v {
            let grandparent = self.parent[self.parent[v as usize] as usize];
            self.parent[v as usize] = grandparent;
            v = grandparent;
        }
        v
    }

    /// Merges the components of `a` and `b`; false if already joined.
    pub fn union(&mut self, a: u32, b: u32) -> bool {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        let (hi, lo) = if self.rank[ra as usize] >= self.rank[rb as usize] {
            (ra, rb)
        } else {
            (rb, ra)
        };
        self.parent[lo as usize] = hi;
        if self.rank[hi as usize] == self.rank[lo as usize] {
            self.rank[hi as usize] += 1;
        }
        true
    }
}

/// Sentinel for "no parent" / "no backing graph edge".
pub const NO_NODE: u32 = u32::MAX;

/// One tree edge, keeping the index of the graph edge it came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TreeEdge {
    pub a: u32,
    pub b: u32,
    pub graph_edge: u32,
}

/// A spanning tree plus its rooted view.
///
/// `parent`/`parent_edge` are node-indexed with [`NO_NODE`] at the root.
/// Internally nodes are also laid out in BFS order so that each depth
/// level is a contiguous range; the filter's level-synchronous sweeps
/// split buffers at level boundaries.
#[derive(Debug, Clone)]
pub struct SpanningTree {
    pub n_nodes: usize,
    pub tree_edges: Vec<TreeEdge>,
    pub root: u32,
    pub parent: Vec<u32>,
    pub parent_edge: Vec<u32>,
    depth: Vec<u32>,
    /// Nodes in BFS order, level by level.
    bfs_order: Vec<u32>,
    /// `bfs_order[level_offsets[d]..level_offsets[d+1]]` is depth d.
    level_offsets: Vec<usize>,
    /// Node -> position in `bfs_order`.
    bfs_pos: Vec<u32>,
    /// Parent's BFS position per BFS position (root slot unused).
    parent_pos: Vec<u32>,
    /// Children as BFS positions, CSR over BFS positions.
    child_offsets: Vec<u32>,
    child_positions: Vec<u32>,
    /// Edges examined while constructing the tree (0 for `root_tree`).
    pub build_edge_visits: u64,
}

impl SpanningTree {
    pub fn depth(&self, node: u32) -> u32 {
        self.depth[node as usize]
    }

    pub fn n_levels(&self) -> usize {
        self.level_offsets.len() - 1
    }

    /// Node indices of one depth level.
    pub fn level(&self, d: usize) -> &[u32] {
        &self.bfs_order[self.level_offsets[d]..self.level_offsets[d + 1]]
    }

    pub fn levels(&self) -> impl Iterator<Item = &[u32]> {
        (0..self.n_levels()).map(|d| self.level(d))
    }

    pub(crate) fn level_range(&self, d: usize) -> (usize, usize) {
        (self.level_offsets[d], self.level_offsets[d + 1])
    }

    pub(crate) fn bfs_order(&self) -> &[u32] {
        &self.bfs_order
    }

    pub(crate) fn bfs_pos(&self, node: u32) -> usize {
        self.bfs_pos[node as usize] as usize
    }

    pub(crate) fn node_at(&self, pos: usize) -> u32 {
        self.bfs_order[pos]
    }

    pub(crate) fn parent_pos(&self, pos: usize) -> usize {
        self.parent_pos[pos] as usize
    }

    /// Children (as BFS positions) of the node at BFS position `pos`.
    pub(crate) fn children_at(&self, pos: usize) -> &[u32] {
        &self.child_positions
            [self.child_offsets[pos] as usize..self.child_offsets[pos + 1] as usize]
    }

    /// Undirected adjacency `(neighbor, graph_edge)` built from the edges.
    pub fn adjacency(&self) -> Vec<Vec<(u32, u32)>> {
        let mut adj = vec![Vec::new(); self.n_nodes];
        for e in &self.tree_edges {
            adj[e.a as usize].push((e.b, e.graph_edge));
            adj[e.b as usize].push((e.a, e.graph_edge));
        }
        adj
    }
}

/// Builds the rooted view of a spanning-tree edge set by BFS from `root`.
pub fn root_tree(n_nodes: usize, edges: &[TreeEdge], root: u32) -> Result<SpanningTree> {
    if n_nodes == 0 {
        return Err(Error::InvalidArgument("empty tree".into()));
    }
    if root as usize >= n_nodes {
        return Err(Error::InvalidArgument(format!(
            "root {root} out of range for {n_nodes} nodes"
        )));
    }
    if edges.len() != n_nodes - 1 {
        return Err(Error::InvalidArgument(format!(
            "{} edges cannot span {n_nodes} nodes",
            edges.len()
        )));
    }
    let mut adj = vec![Vec::new(); n_nodes];
    for e in edges {
        if e.a as usize >= n_nodes || e.b as usize >= n_nodes || e.a == e.b {
            return Err(Error::InvalidArgument(format!(
                "edge ({}, {}) out of range",
                e.a, e.b
            )));
        }
        adj[e.a as usize].push((e.b, e.graph_edge));
        adj[e.b as usize].push((e.a, e.graph_edge));
    }

    let mut parent = vec![NO_NODE; n_nodes];
    let mut parent_edge = vec![NO_NODE; n_nodes];
    let mut depth = vec![0u32; n_nodes];
    let mut bfs_order = Vec::with_capacity(n_nodes);
    let mut level_offsets = vec![0usize];
    let mut visited = vec![false; n_nodes];

    visited[root as usize] = true;
    bfs_order.push(root);
    let mut level_start = 0;
    while level_start < bfs_order.len() {
        let level_end = bfs_order.len();
        level_offsets.push(level_end);
        for i in level_start..level_end {
            let v = bfs_order[i];
            for &(nbr, ge) in &adj[v as usize] {
                if !visited[nbr as usize] {
                    visited[nbr as usize] = true;
                    parent[nbr as usize] = v;
                    parent_edge[nbr as usize] = ge;
                    depth[nbr as usize] = depth[v as usize] + 1;
                    bfs_order.push(nbr);
                }
            }
        }
        level_start = level_end;
    }
    if bfs_order.len() != n_nodes {
        return Err(Error::InvalidArgument(
            "edge set is not a spanning tree (disconnected or cyclic)".into(),
        ));
    }

    let mut bfs_pos = vec![0u32; n_nodes];
    for (pos, &node) in bfs_order.iter().enumerate() {
        bfs_pos[node as usize] = pos as u32;
    }
    let mut parent_pos = vec![NO_NODE; n_nodes];
    let mut child_counts = vec![0u32; n_nodes];
    for pos in 1..n_nodes {
        let node = bfs_order[pos];
        let pp = bfs_pos[parent[node as usize] as usize];
        parent_pos[pos] = pp;
        child_counts[pp as usize] += 1;
    }
    let mut child_offsets = vec![0u32; n_nodes + 1];
    for pos in 0..n_nodes {
        child_offsets[pos + 1] = child_offsets[pos] + child_counts[pos];
    }
    let mut cursor = child_offsets.clone();
    let mut child_positions = vec![0u32; n_nodes.saturating_sub(1)];
    for (pos, &pp) in parent_pos.iter().enumerate().skip(1) {
        let pp = pp as usize;
        child_positions[cursor[pp] as usize] = pos as u32;
        cursor[pp] += 1;
    }

    Ok(SpanningTree {
        n_nodes,
        tree_edges: edges.to_vec(),
        root,
        parent,
        parent_edge,
        depth,
        bfs_order,
        level_offsets,
        bfs_pos,
        parent_pos,
        child_offsets,
        child_positions,
        build_edge_visits: 0,
    })
}

#[derive(Clone, Copy)]
enum Selection {
    Minimum,
    Sample { seed: u64 },
}

struct WorkEdge {
    a: u32,
    b: u32,
    w: f64,
    id: u32,
}

/// `(w, id)` lexicographic order; weights are finite so this is total.
#[inline]
fn better(w1: f64, id1: u32, w2: f64, id2: u32) -> bool {
    w1 < w2 || (w1 == w2 && id1 < id2)
}

fn contract(graph: &GridGraph, group: usize, sel: Selection) -> Result<(Vec<TreeEdge>, u64)> {
    let n = graph.n_nodes();
    if n == 0 {
        return Err(Error::InvalidArgument("empty graph".into()));
    }
    if group >= graph.groups() {
        return Err(Error::InvalidArgument(format!(
            "group {group} out of range for {} groups",
            graph.groups()
        )));
    }
    let mut uf = UnionFind::new(n);
    let mut tree: Vec<TreeEdge> = Vec::with_capacity(n - 1);
    let mut visits: u64 = 0;
    // endpoints always hold current component roots
    let mut work: Vec<WorkEdge> = graph
        .edges()
        .iter()
        .enumerate()
        .map(|(i, &(a, b))| WorkEdge {
            a,
            b,
            w: graph.weight(i, group),
            id: i as u32,
        })
        .collect();

    let mut round: u64 = 0;
    while !work.is_empty() {
        round += 1;
        let picks = match sel {
            Selection::Minimum => {
                // best incident edge per component
                let mut best: HashMap<u32, usize> = HashMap::new();
                for (pos, e) in work.iter().enumerate() {
                    visits += 1;
                    for r in [e.a, e.b] {
                        match best.entry(r) {
                            std::collections::hash_map::Entry::Occupied(mut slot) => {
                                let cur = &work[*slot.get()];
                                if better(e.w, e.id, cur.w, cur.id) {
                                    slot.insert(pos);
                                }
                            }
                            std::collections::hash_map::Entry::Vacant(slot) => {
                                slot.insert(pos);
                            }
                        }
                    }
                }
                let mut picks: Vec<usize> = Vec::new();
                for (pos, e) in work.iter().enumerate() {
                    if best[&e.a] == pos || best[&e.b] == pos {
                        picks.push(pos);
                    }
                }
                picks
            }
            Selection::Sample { seed } => {
                // incident edge lists per component, in first-seen order
                let mut incident: HashMap<u32, Vec<usize>> = HashMap::new();
                let mut order: Vec<u32> = Vec::new();
                for (pos, e) in work.iter().enumerate() {
                    visits += 1;
                    for r in [e.a, e.b] {
                        incident
                            .entry(r)
                            .or_insert_with(|| {
                                order.push(r);
                                Vec::new()
                            })
                            .push(pos);
                    }
                }
                let mut picks: Vec<usize> = Vec::new();
                for &r in &order {
                    let list = &incident[&r];
                    visits += list.len() as u64;
                    let total: f64 = list.iter().map(|&p| (-work[p].w).exp()).sum();
                    let pick = if total > 0.0 {
                        // stream keyed by (round, component): draw order never matters
                        let u = crate::rng::SplitMix64::new(mix(&[seed, round, r as u64]))
                            .next_f64()
                            * total;
                        let mut acc = 0.0;
                        let mut chosen = list[list.len() - 1];
                        for &p in list {
                            acc += (-work[p].w).exp();
                            if acc > u {
                                chosen = p;
                                break;
                            }
                        }
                        chosen
                    } else {
                        // all similarities underflowed; fall back to the minimum
                        let mut chosen = list[0];
                        for &p in &list[1..] {
                            let (c, e) = (&work[chosen], &work[p]);
                            if better(e.w, e.id, c.w, c.id) {
                                chosen = p;
                            }
                        }
                        chosen
                    };
                    picks.push(pick);
                }
                picks
            }
        };

        let before = tree.len();
        for pos in picks {
            let e = &work[pos];
            if uf.union(e.a, e.b) {
                let (oa, ob) = graph.edges()[e.id as usize];
                tree.push(TreeEdge {
                    a: oa,
                    b: ob,
                    graph_edge: e.id,
                });
            }
        }
        if tree.len() == before {
            return Err(Error::Internal("contraction round made no progress".into()));
        }

        // contract: relabel endpoints to roots, drop loops, flatten parallels
        let mut slot_of: HashMap<(u32, u32), usize> = HashMap::new();
        let mut next: Vec<WorkEdge> = Vec::new();
        for e in work.drain(..) {
            visits += 1;
            let (ra, rb) = (uf.find(e.a), uf.find(e.b));
            if ra == rb {
                continue;
            }
            let key = (ra.min(rb), ra.max(rb));
            match slot_of.entry(key) {
                std::collections::hash_map::Entry::Occupied(slot) => {
                    let cur = &mut next[*slot.get()];
                    if better(e.w, e.id, cur.w, cur.id) {
                        cur.w = e.w;
                        cur.id = e.id;
                    }
                }
                std::collections::hash_map::Entry::Vacant(slot) => {
                    slot.insert(next.len());
                    next.push(WorkEdge {
                        a: key.0,
                        b: key.1,
                        w: e.w,
                        id: e.id,
                    });
                }
            }
        }
        work = next;
    }

    if tree.len() != n - 1 {
        return Err(Error::Internal(format!(
            "graph is disconnected: {} of {} tree edges found",
            tree.len(),
            n - 1
        )));
    }
    // canonical edge order for deterministic downstream layout
    tree.sort_by_key(|e| e.graph_edge);
    Ok((tree, visits))
}

/// Minimum spanning tree for one weight group, rooted at node 0.
///
/// Ties are broken by canonical edge index, so equal-weight graphs still
/// produce one deterministic tree.
pub fn mst(graph: &GridGraph, group: usize) -> Result<SpanningTree> {
    let (edges, visits) = contract(graph, group, Selection::Minimum)?;
    let mut tree = root_tree(graph.n_nodes(), &edges, 0)?;
    tree.build_edge_visits = visits;
    Ok(tree)
}

/// Random spanning tree: per round each surviving super-vertex samples an
/// incident edge with probability proportional to `exp(-w)`. Deterministic
/// for a fixed `seed`.
pub fn sample_random_spanning_tree(
    graph: &GridGraph,
    group: usize,
    seed: u64,
) -> Result<SpanningTree> {
    let (edges, visits) = contract(graph, group, Selection::Sample { seed })?;
    let mut tree = root_tree(graph.n_nodes(), &edges, 0)?;
    tree.build_edge_visits = visits;
    Ok(tree)
}
