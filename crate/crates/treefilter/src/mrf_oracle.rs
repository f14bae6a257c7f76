//! Exact tree-MRF machinery on tiny instances.
//!
//! The filter's weight distribution is the marginal of a Markov random
//! field over latent source choices `h_i` on the spanning tree: delta
//! couplings force one common source per configuration, each edge whose
//! child side (seen from the query root) contains the source contributes
//! its similarity `exp(-w)`, and the unary table contributes the source's
//! confidence at the source node and the potential `exp(-beta)` at every
//! node strictly above it. Both the pairwise and the unary case split
//! condition on the root-directed descendant relation, so factor tables
//! are materialized per query root.
//!
//! Three routes to the same marginal live in this crate: literal factor
//! products ([`TreeMRF::enumerate_marginals`]), message passing
//! ([`TreeMRF::belief_propagation_marginals`]), and the filter's own
//! path-product weights (`tree_filter::affinity_map`). The lemma checks
//! pit them against each other.

use crate::error::{Error, Result};
use crate::grid_graph::GridGraph;
use crate::spanning::{root_tree, SpanningTree};
use crate::tree_filter::{affinity_map, AffinityMode};

/// Safety net for the exponential-looking enumeration; the delta structure
/// collapses it to one term per source, but tiny instances are the point.
pub const ENUMERATION_CAP: usize = 12;

/// A tree-structured MRF with per-node unary tables `(f_i, exp(-beta))`
/// and per-edge similarities `exp(-w_e)`.
#[derive(Debug, Clone)]
pub struct TreeMRF {
    tree: SpanningTree,
    /// `exp(-w)` per tree edge, aligned with `tree.tree_edges`.
    pair_sim: Vec<f64>,
    /// Confidence f(x_i) per node: the unary value at the source itself.
    unary_self: Vec<f64>,
    /// `exp(-beta)`: the unary value at nodes above the source.
    unary_other: f64,
    /// Unary value at nodes unrelated to the source (1 in the model;
    /// kept explicit so global unary rescalings stay expressible).
    unary_off: f64,
}

struct RootedView {
    /// parent node and index into `tree_edges`, per node.
    parent: Vec<Option<(u32, usize)>>,
    /// nodes in BFS order from the query root.
    order: Vec<u32>,
    /// children per node.
    children: Vec<Vec<u32>>,
}

impl TreeMRF {
    pub fn new(
        tree: SpanningTree,
        pair_sim: Vec<f64>,
        unary_self: Vec<f64>,
        unary_other: f64,
    ) -> Result<Self> {
        if pair_sim.len() != tree.tree_edges.len() || unary_self.len() != tree.n_nodes {
            return Err(Error::InvalidArgument(
                "factor table lengths do not match the tree".into(),
            ));
        }
        if pair_sim
            .iter()
            .chain(unary_self.iter())
            .chain(std::iter::once(&unary_other))
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(Error::InvalidArgument(
                "factor values must be finite and nonnegative".into(),
            ));
        }
        Ok(TreeMRF {
            tree,
            pair_sim,
            unary_self,
            unary_other,
            unary_off: 1.0,
        })
    }

    /// Pairwise-only model: unit unary table.
    pub fn v1(tree: &SpanningTree, graph: &GridGraph, group: usize) -> Result<Self> {
        let sim = edge_similarities(tree, graph, group)?;
        TreeMRF::new(tree.clone(), sim, vec![1.0; tree.n_nodes], 1.0)
    }

    /// Full model from per-node confidences and a group potential.
    pub fn v2(
        tree: &SpanningTree,
        graph: &GridGraph,
        group: usize,
        unary_self: &[f64],
        beta: f64,
    ) -> Result<Self> {
        if unary_self.len() != tree.n_nodes {
            return Err(Error::InvalidArgument(
                "unary length does not match the tree".into(),
            ));
        }
        let sim = edge_similarities(tree, graph, group)?;
        TreeMRF::new(tree.clone(), sim, unary_self.to_vec(), (-beta).exp())
    }

    /// Copy with every unary table entry multiplied by `c > 0`.
    pub fn with_rescaled_unaries(&self, c: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::InvalidArgument(format!("scale {c} must be positive")));
        }
        let mut scaled = self.clone();
        for f in &mut scaled.unary_self {
            *f *= c;
        }
        scaled.unary_other *= c;
        scaled.unary_off *= c;
        Ok(scaled)
    }

    pub fn n_nodes(&self) -> usize {
        self.tree.n_nodes
    }

    fn rooted_view(&self, root: u32) -> Result<RootedView> {
        let n = self.tree.n_nodes;
        if root as usize >= n {
            return Err(Error::InvalidArgument(format!("root {root} out of range")));
        }
        let mut adj = vec![Vec::new(); n];
        for (idx, e) in self.tree.tree_edges.iter().enumerate() {
            adj[e.a as usize].push((e.b, idx));
            adj[e.b as usize].push((e.a, idx));
        }
        let mut parent = vec![None; n];
        let mut children = vec![Vec::new(); n];
        let mut order = vec![root];
        let mut seen = vec![false; n];
        seen[root as usize] = true;
        let mut head = 0;
        while head < order.len() {
            let v = order[head];
            head += 1;
            for &(nbr, idx) in &adj[v as usize] {
                if !seen[nbr as usize] {
                    seen[nbr as usize] = true;
                    parent[nbr as usize] = Some((v, idx));
                    children[v as usize].push(nbr);
                    order.push(nbr);
                }
            }
        }
        Ok(RootedView {
            parent,
            order,
            children,
        })
    }

    /// Marks the nodes on the path from `u` up to the root, `u` included.
    fn path_mask(view: &RootedView, u: u32) -> Vec<bool> {
        let mut mask = vec![false; view.parent.len()];
        let mut v = u;
        mask[v as usize] = true;
        while let Some((p, _)) = view.parent[v as usize] {
            mask[p as usize] = true;
            v = p;
        }
        mask
    }

    /// Unary factor of node `j` for the configuration with source `u`.
    #[inline]
    fn phi(&self, j: u32, u: u32, on_path: &[bool]) -> f64 {
        if j == u {
            self.unary_self[u as usize]
        } else if on_path[j as usize] {
            self.unary_other
        } else {
            self.unary_off
        }
    }

    /// Pairwise factor of tree edge `idx` (child endpoint `child` in the
    /// rooted view) for the configuration with source `u`.
    #[inline]
    fn psi(&self, idx: usize, child: u32, on_path: &[bool]) -> f64 {
        if on_path[child as usize] {
            self.pair_sim[idx]
        } else {
            1.0
        }
    }

    /// Unnormalized configuration weights by literal factor products: for
    /// each source u, multiply every node's unary entry and every edge's
    /// pairwise entry.
    fn configuration_weights(&self, root: u32) -> Result<Vec<f64>> {
        let n = self.tree.n_nodes;
        if n > ENUMERATION_CAP {
            return Err(Error::CapExceeded {
                nodes: n,
                cap: ENUMERATION_CAP,
            });
        }
        let view = self.rooted_view(root)?;
        let mut weights = vec![0.0; n];
        for u in 0..n as u32 {
            let on_path = Self::path_mask(&view, u);
            let mut w = 1.0;
            for j in 0..n as u32 {
                w *= self.phi(j, u, &on_path);
            }
            for idx in 0..self.tree.tree_edges.len() {
                let child = self.child_endpoint(&view, idx);
                w *= self.psi(idx, child, &on_path);
            }
            weights[u as usize] = w;
        }
        Ok(weights)
    }

    fn child_endpoint(&self, view: &RootedView, idx: usize) -> u32 {
        let e = &self.tree.tree_edges[idx];
        match view.parent[e.a as usize] {
            Some((p, pe)) if p == e.b && pe == idx => e.a,
            _ => e.b,
        }
    }

    /// Partition function for one query root.
    pub fn partition(&self, root: u32) -> Result<f64> {
        Ok(self.configuration_weights(root)?.iter().sum())
    }

    /// P(h_root = j) for all j, by literal expansion of the joint over the
    /// delta-consistent configurations.
    pub fn enumerate_marginals(&self, root: u32) -> Result<Vec<f64>> {
        let weights = self.configuration_weights(root)?;
        let z: f64 = weights.iter().sum();
        if !z.is_finite() || z <= 0.0 {
            return Err(Error::Internal(format!("partition {z} at root {root}")));
        }
        Ok(weights.into_iter().map(|w| w / z).collect())
    }

    /// P(h_root = j) by leaf-to-root message passing.
    ///
    /// Each message is a vector over source values; the delta coupling
    /// collapses the sum so that `m_child(u)` is the product of the child's
    /// unary entry, its edge factor, and its children's messages at `u`.
    pub fn belief_propagation_marginals(&self, root: u32) -> Result<Vec<f64>> {
        let n = self.tree.n_nodes;
        let view = self.rooted_view(root)?;
        let masks: Vec<Vec<bool>> = (0..n as u32).map(|u| Self::path_mask(&view, u)).collect();

        // messages toward the root, children before parents
        let mut messages: Vec<Vec<f64>> = vec![Vec::new(); n];
        for &v in view.order.iter().rev() {
            if v == root {
                continue;
            }
            let (_, edge_idx) = view.parent[v as usize].unwrap();
            let mut m = vec![0.0; n];
            for u in 0..n as u32 {
                let mut val =
                    self.phi(v, u, &masks[u as usize]) * self.psi(edge_idx, v, &masks[u as usize]);
                for &k in &view.children[v as usize] {
                    val *= messages[k as usize][u as usize];
                }
                m[u as usize] = val;
            }
            messages[v as usize] = m;
        }

        let mut belief = vec![0.0; n];
        for u in 0..n as u32 {
            let mut val = self.phi(root, u, &masks[u as usize]);
            for &k in &view.children[root as usize] {
                val *= messages[k as usize][u as usize];
            }
            belief[u as usize] = val;
        }
        let z: f64 = belief.iter().sum();
        if !z.is_finite() || z <= 0.0 {
            return Err(Error::Internal(format!("bp normalizer {z} at root {root}")));
        }
        for b in &mut belief {
            *b /= z;
        }
        Ok(belief)
    }
}

fn edge_similarities(tree: &SpanningTree, graph: &GridGraph, group: usize) -> Result<Vec<f64>> {
    if group >= graph.groups() {
        return Err(Error::InvalidArgument(format!(
            "group {group} out of range for {} groups",
            graph.groups()
        )));
    }
    tree.tree_edges
        .iter()
        .map(|e| {
            if e.graph_edge as usize >= graph.n_edges() {
                return Err(Error::InvalidArgument(
                    "tree edge does not reference a graph edge".into(),
                ));
            }
            Ok((-graph.weight(e.graph_edge as usize, group)).exp())
        })
        .collect()
}

/// Outcome of one lemma verification.
#[derive(Debug, Clone)]
pub struct LemmaReport {
    pub pass: bool,
    /// Largest residual (lemma 1), largest ordering violation (lemma 2),
    /// or largest deviation from the expected witness values (lemma 3).
    pub worst: f64,
    pub checks: usize,
}

impl std::fmt::Display for LemmaReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} ({} checks, worst residual {:.3e})",
            if self.pass { "pass" } else { "FAIL" },
            self.checks,
            self.worst
        )
    }
}

/// Pairwise-only marginals equal the path-similarity filtering weights:
/// the MRF enumeration and the filter's affinity row must agree at every
/// (root, source) pair.
pub fn verify_lemma1(
    graph: &GridGraph,
    tree: &SpanningTree,
    group: usize,
    tolerance: f64,
) -> Result<LemmaReport> {
    let n = tree.n_nodes;
    let groups = graph.groups();
    let mrf = TreeMRF::v1(tree, graph, group)?;
    let flat_unary = vec![0.5; n * groups];
    let zero_beta = vec![0.0; groups];
    let mut worst = 0.0f64;
    let mut checks = 0;
    for root in 0..n as u32 {
        let marginal = mrf.enumerate_marginals(root)?;
        let weights = affinity_map(
            tree,
            graph,
            &flat_unary,
            &zero_beta,
            root,
            AffinityMode::PairwiseOnly,
        )?;
        for (j, &m) in marginal.iter().enumerate() {
            worst = worst.max((m - weights.value(j, group)).abs());
            checks += 1;
        }
    }
    Ok(LemmaReport {
        pass: worst <= tolerance,
        worst,
        checks,
    })
}

/// With a unit unary table the marginal can only shrink along any
/// root-to-leaf path: every node's probability is bounded by its parent's.
pub fn verify_lemma2(
    graph: &GridGraph,
    tree: &SpanningTree,
    group: usize,
    slack: f64,
) -> Result<LemmaReport> {
    let n = tree.n_nodes;
    let mrf = TreeMRF::v1(tree, graph, group)?;
    let mut worst = f64::MIN;
    let mut checks = 0;
    for root in 0..n as u32 {
        let marginal = mrf.enumerate_marginals(root)?;
        let rooted = root_tree(n, &tree.tree_edges, root)?;
        for node in 0..n as u32 {
            if node != root {
                let parent = rooted.parent[node as usize];
                worst = worst.max(marginal[node as usize] - marginal[parent as usize]);
                checks += 1;
            }
        }
    }
    if checks == 0 {
        worst = 0.0;
    }
    Ok(LemmaReport {
        pass: worst <= slack,
        worst,
        checks,
    })
}

/// The constructed witness where a strict descendant outweighs its
/// ancestor: path a-b-c with w = 0, beta = 0, f = (0.5, 0.1, 0.9) gives
/// P(h_a = c) = 3/5 > P(h_a = b) = 1/15.
pub fn verify_lemma3(tolerance: f64) -> Result<LemmaReport> {
    let mut graph = GridGraph::build(1, 3)?;
    graph.set_weights(1, vec![0.0, 0.0])?;
    let tree = crate::spanning::mst(&graph, 0)?;
    let f = [0.5, 0.1, 0.9];
    let mrf = TreeMRF::v2(&tree, &graph, 0, &f, 0.0)?;
    let marginal = mrf.enumerate_marginals(0)?;

    let expected = [1.0 / 3.0, 1.0 / 15.0, 3.0 / 5.0];
    let mut worst = 0.0f64;
    for (got, want) in marginal.iter().zip(expected) {
        worst = worst.max((got - want).abs());
    }
    // the general condition on the witness: f_v / f_u * prod exp(-w - beta) > 1
    let condition = f[2] / f[1] * (-0.0f64 - 0.0).exp();
    let ordering_holds = marginal[2] > marginal[1];

    // the same instance in the identity regime must restore the ordering
    let near_identity = TreeMRF::v2(&tree, &graph, 0, &f, 50.0)?;
    let identity_marginal = near_identity.enumerate_marginals(0)?;
    let identity_restores = identity_marginal[2] < identity_marginal[1];

    Ok(LemmaReport {
        pass: worst <= tolerance && ordering_holds && condition > 1.0 && identity_restores,
        worst,
        checks: marginal.len() + 2,
    })
}
