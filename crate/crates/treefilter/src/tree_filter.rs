//! The filtering operator: linear-time tree aggregation per group.
//!
//! Every output row is a convex combination of input rows, where source j
//! contributes with weight `f(x_j) * prod(t_e)` over the unique tree path
//! from j to the sink, normalized per sink. The per-edge transmission folds
//! the pairwise similarity and the path-length potential into one factor,
//! `t_e = exp(-(w_e + beta_g))`.
//!
//! The closed form is evaluated by two level-synchronous sweeps over the
//! rooted tree:
//!
//! * upward: `U(v) = f_v * x_v + sum_c t_c * U(c)` over children c
//!   (denominator with `x_v` replaced by 1),
//! * downward: `D(root) = U(root)`, and for a child c of v
//!   `D(c) = U(c) + t_c * (D(v) - t_c * U(c))`.
//!
//! `y_i = D_num(i) / D_den(i)`. Within a level all nodes are independent,
//! so the sweeps parallelize across groups and across nodes of one depth
//! with bit-identical results. A quadratic reference that multiplies path
//! transmissions explicitly ([`forward_bruteforce`]) is kept as the oracle
//! the DP is validated against.

use crate::error::{Error, Result};
use crate::exec::{for_each_group, level_sweep, Exec};
use crate::feature_map::FeatureMap;
use crate::grid_graph::GridGraph;
use crate::spanning::SpanningTree;

/// Node cap for the quadratic reference.
pub const BRUTEFORCE_CAP: usize = 4096;

/// Edge visits per DP direction, counted per accumulator array.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WorkCounters {
    pub up_edge_visits: u64,
    pub down_edge_visits: u64,
}

/// Per-group DP state in BFS-position order.
#[derive(Debug, Clone)]
pub(crate) struct GroupCache {
    /// Gathered input slice, `x[pos * cpg + c]`.
    pub x: Vec<f64>,
    /// Unary confidence per position.
    pub f: Vec<f64>,
    /// Transmission of the edge toward the parent (1.0 at the root slot).
    pub t: Vec<f64>,
    pub up_num: Vec<f64>,
    pub up_den: Vec<f64>,
    pub down_num: Vec<f64>,
    pub down_den: Vec<f64>,
}

/// Forward outputs plus the cached intermediates the backward pass replays.
#[derive(Debug, Clone)]
pub struct FilterState {
    pub output: FeatureMap,
    /// Normalizers z, node-major: `normalizer[node * groups + group]`.
    pub normalizer: Vec<f64>,
    pub work: WorkCounters,
    pub(crate) cache: Vec<GroupCache>,
}

impl FilterState {
    /// Transmission of the edge between `node` and its parent.
    pub fn transmission(&self, node: u32, group: usize, tree: &SpanningTree) -> f64 {
        self.cache[group].t[tree.bfs_pos(node)]
    }
}

fn check_shapes(
    x: &FeatureMap,
    tree: &SpanningTree,
    graph: &GridGraph,
    unary: &[f64],
    beta: &[f64],
) -> Result<()> {
    if graph.height() != x.height() || graph.width() != x.width() {
        return Err(Error::InvalidArgument(format!(
            "graph {}x{} does not match map {}x{}",
            graph.height(),
            graph.width(),
            x.height(),
            x.width()
        )));
    }
    if graph.groups() != x.groups() {
        return Err(Error::InvalidArgument(format!(
            "graph groups {} do not match map groups {}",
            graph.groups(),
            x.groups()
        )));
    }
    if tree.n_nodes != x.n_nodes() {
        return Err(Error::InvalidArgument(format!(
            "tree over {} nodes does not match map with {}",
            tree.n_nodes,
            x.n_nodes()
        )));
    }
    let groups = x.groups();
    if unary.len() != x.n_nodes() * groups {
        return Err(Error::InvalidArgument(format!(
            "unary length {} does not match {} nodes x {groups} groups",
            unary.len(),
            x.n_nodes()
        )));
    }
    if beta.len() != groups {
        return Err(Error::InvalidArgument(format!(
            "beta length {} does not match {groups} groups",
            beta.len()
        )));
    }
    if unary.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
        return Err(Error::InvalidArgument(
            "unary confidences must lie in (0, 1]".into(),
        ));
    }
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::NonFinite("beta".into()));
    }
    for &node in tree.bfs_order() {
        if node != tree.root && tree.parent_edge[node as usize] as usize >= graph.n_edges() {
            return Err(Error::InvalidArgument(
                "tree edge does not reference a graph edge".into(),
            ));
        }
    }
    Ok(())
}

fn run_group(
    g: usize,
    x: &FeatureMap,
    tree: &SpanningTree,
    graph: &GridGraph,
    unary: &[f64],
    beta: &[f64],
    exec: Exec,
) -> Result<(GroupCache, WorkCounters)> {
    let n = tree.n_nodes;
    let cpg = x.channels_per_group();
    let groups = x.groups();

    // gather into BFS order
    let mut xg = vec![0.0; n * cpg];
    let mut f = vec![0.0; n];
    let mut t = vec![1.0; n];
    for pos in 0..n {
        let node = tree.node_at(pos);
        xg[pos * cpg..(pos + 1) * cpg].copy_from_slice(x.group_slice(node as usize, g));
        f[pos] = unary[node as usize * groups + g];
        if node != tree.root {
            let w = graph.weight(tree.parent_edge[node as usize] as usize, g);
            t[pos] = (-(w + beta[g])).exp();
        }
    }

    let mut up_num = vec![0.0; n * cpg];
    let mut up_den = vec![0.0; n];
    let mut work = WorkCounters::default();

    // upward sweep, deepest level first
    for d in (0..tree.n_levels()).rev() {
        let (lo, hi) = tree.level_range(d);
        let (head_num, tail_num) = up_num.split_at_mut(hi * cpg);
        let (head_den, tail_den) = up_den.split_at_mut(hi);
        let tail_num = &tail_num[..];
        let tail_den = &tail_den[..];
        work.up_edge_visits += level_sweep(
            &mut head_num[lo * cpg..],
            &mut head_den[lo..],
            cpg,
            exec,
            |k, row, den| {
                let pos = lo + k;
                let fv = f[pos];
                for (c, slot) in row.iter_mut().enumerate() {
                    *slot = fv * xg[pos * cpg + c];
                }
                *den = fv;
                let mut visits = 0;
                for &cpos in tree.children_at(pos) {
                    let ci = cpos as usize - hi;
                    let tc = t[cpos as usize];
                    for (c, slot) in row.iter_mut().enumerate() {
                        *slot += tc * tail_num[ci * cpg + c];
                    }
                    *den += tc * tail_den[ci];
                    visits += 2;
                }
                visits
            },
        );
    }

    // downward sweep, root first
    let mut down_num = vec![0.0; n * cpg];
    let mut down_den = vec![0.0; n];
    down_num[..cpg].copy_from_slice(&up_num[..cpg]);
    down_den[0] = up_den[0];
    for d in 1..tree.n_levels() {
        let (lo, hi) = tree.level_range(d);
        let (head_num, tail_num) = down_num.split_at_mut(lo * cpg);
        let (head_den, tail_den) = down_den.split_at_mut(lo);
        let head_num = &head_num[..];
        let head_den = &head_den[..];
        work.down_edge_visits += level_sweep(
            &mut tail_num[..(hi - lo) * cpg],
            &mut tail_den[..hi - lo],
            cpg,
            exec,
            |k, row, den| {
                let pos = lo + k;
                let pp = tree.parent_pos(pos);
                let tc = t[pos];
                for (c, slot) in row.iter_mut().enumerate() {
                    let u = up_num[pos * cpg + c];
                    *slot = u + tc * (head_num[pp * cpg + c] - tc * u);
                }
                let ud = up_den[pos];
                *den = ud + tc * (head_den[pp] - tc * ud);
                2
            },
        );
    }

    Ok((
        GroupCache {
            x: xg,
            f,
            t,
            up_num,
            up_den,
            down_num,
            down_den,
        },
        work,
    ))
}

/// Full filter: unary confidences modulate sources, beta penalizes path
/// length. Equals [`forward_bruteforce`] on every input.
pub fn forward_v2(
    x: &FeatureMap,
    tree: &SpanningTree,
    graph: &GridGraph,
    unary: &[f64],
    beta: &[f64],
    exec: Exec,
) -> Result<FilterState> {
    check_shapes(x, tree, graph, unary, beta)?;
    let n = x.n_nodes();
    let groups = x.groups();
    let cpg = x.channels_per_group();

    let results = for_each_group(groups, exec, |g| {
        run_group(g, x, tree, graph, unary, beta, exec)
    })?;

    let mut work = WorkCounters::default();
    let mut out = vec![0.0; n * x.channels()];
    let mut normalizer = vec![0.0; n * groups];
    let mut cache = Vec::with_capacity(groups);
    for (g, (gc, gw)) in results.into_iter().enumerate() {
        work.up_edge_visits += gw.up_edge_visits;
        work.down_edge_visits += gw.down_edge_visits;
        for pos in 0..n {
            let node = tree.node_at(pos) as usize;
            let z = gc.down_den[pos];
            if !z.is_finite() || z <= 0.0 {
                return Err(Error::Internal(format!(
                    "normalizer {z} at node {node} group {g}"
                )));
            }
            normalizer[node * groups + g] = z;
            let base = node * x.channels() + g * cpg;
            for c in 0..cpg {
                out[base + c] = gc.down_num[pos * cpg + c] / z;
            }
        }
        cache.push(gc);
    }

    let output = FeatureMap::new(x.height(), x.width(), x.channels(), out)?
        .with_groups(groups)?;
    Ok(FilterState {
        output,
        normalizer,
        work,
        cache,
    })
}

/// Pairwise-only filter: the special case f = 1, beta = 0 on the shared DP.
pub fn forward_v1(
    x: &FeatureMap,
    tree: &SpanningTree,
    graph: &GridGraph,
    exec: Exec,
) -> Result<FilterState> {
    let unary = vec![1.0; x.n_nodes() * x.groups()];
    let beta = vec![0.0; x.groups()];
    forward_v2(x, tree, graph, &unary, &beta, exec)
}

/// Quadratic reference: per sink, walk the tree multiplying transmissions
/// edge by edge. Refuses maps above `cap` nodes.
pub fn forward_bruteforce_with_cap(
    x: &FeatureMap,
    tree: &SpanningTree,
    graph: &GridGraph,
    unary: &[f64],
    beta: &[f64],
    cap: usize,
) -> Result<FilterState> {
    check_shapes(x, tree, graph, unary, beta)?;
    let n = x.n_nodes();
    if n > cap {
        return Err(Error::CapExceeded { nodes: n, cap });
    }
    let groups = x.groups();
    let cpg = x.channels_per_group();
    let channels = x.channels();
    let adj = tree.adjacency();

    let mut out = vec![0.0; n * channels];
    let mut normalizer = vec![0.0; n * groups];
    let mut path_w = vec![0.0; n * groups];
    let mut order = Vec::with_capacity(n);
    for sink in 0..n {
        // BFS from the sink; each step multiplies the edge transmissions
        for g in 0..groups {
            path_w[sink * groups + g] = 1.0;
        }
        order.clear();
        order.push(sink as u32);
        let mut seen = vec![false; n];
        seen[sink] = true;
        let mut head = 0;
        while head < order.len() {
            let v = order[head] as usize;
            head += 1;
            for &(nbr, ge) in &adj[v] {
                if !seen[nbr as usize] {
                    seen[nbr as usize] = true;
                    for g in 0..groups {
                        let t = (-(graph.weight(ge as usize, g) + beta[g])).exp();
                        path_w[nbr as usize * groups + g] = path_w[v * groups + g] * t;
                    }
                    order.push(nbr);
                }
            }
        }
        for g in 0..groups {
            let mut den = 0.0;
            let mut num = vec![0.0; cpg];
            for &j in &order {
                let j = j as usize;
                let w = path_w[j * groups + g] * unary[j * groups + g];
                den += w;
                let row = x.group_slice(j, g);
                for c in 0..cpg {
                    num[c] += w * row[c];
                }
            }
            if !den.is_finite() || den <= 0.0 {
                return Err(Error::Internal(format!("normalizer {den} at sink {sink}")));
            }
            normalizer[sink * groups + g] = den;
            for c in 0..cpg {
                out[sink * channels + g * cpg + c] = num[c] / den;
            }
        }
    }

    let output = FeatureMap::new(x.height(), x.width(), channels, out)?.with_groups(groups)?;
    Ok(FilterState {
        output,
        normalizer,
        work: WorkCounters::default(),
        cache: Vec::new(),
    })
}

pub fn forward_bruteforce(
    x: &FeatureMap,
    tree: &SpanningTree,
    graph: &GridGraph,
    unary: &[f64],
    beta: &[f64],
) -> Result<FilterState> {
    forward_bruteforce_with_cap(x, tree, graph, unary, beta, BRUTEFORCE_CAP)
}

/// Which factors enter an affinity map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AffinityMode {
    /// Weights proportional to f(x_j) alone (t = 1): a pure confidence map.
    UnaryOnly,
    /// Weights proportional to the path similarity `exp(-sum w)` alone
    /// (f = 1, no beta): the geometric part.
    PairwiseOnly,
    /// Both factors, with transmissions `exp(-(w + beta))`.
    Full,
}

/// Filtering-weight distribution seen from one sink node.
///
/// Returns an H x W map with one channel per group; each channel sums to 1.
pub fn affinity_map(
    tree: &SpanningTree,
    graph: &GridGraph,
    unary: &[f64],
    beta: &[f64],
    node: u32,
    mode: AffinityMode,
) -> Result<FeatureMap> {
    let n = tree.n_nodes;
    let groups = graph.groups();
    if node as usize >= n {
        return Err(Error::InvalidArgument(format!(
            "node {node} out of range for {n} nodes"
        )));
    }
    if unary.len() != n * groups || beta.len() != groups {
        return Err(Error::InvalidArgument(
            "unary/beta length does not match graph".into(),
        ));
    }
    let adj = tree.adjacency();
    let mut weights = vec![0.0; n * groups];
    for g in 0..groups {
        weights[node as usize * groups + g] = 1.0;
    }
    let mut order = vec![node];
    let mut seen = vec![false; n];
    seen[node as usize] = true;
    let mut head = 0;
    while head < order.len() {
        let v = order[head] as usize;
        head += 1;
        for &(nbr, ge) in &adj[v] {
            if !seen[nbr as usize] {
                seen[nbr as usize] = true;
                for g in 0..groups {
                    let step = match mode {
                        AffinityMode::UnaryOnly => 1.0,
                        AffinityMode::PairwiseOnly => (-graph.weight(ge as usize, g)).exp(),
                        AffinityMode::Full => {
                            (-(graph.weight(ge as usize, g) + beta[g])).exp()
                        }
                    };
                    weights[nbr as usize * groups + g] = weights[v * groups + g] * step;
                }
                order.push(nbr);
            }
        }
    }
    if order.len() != n {
        return Err(Error::InvalidArgument("tree does not span the grid".into()));
    }
    // source confidences, then normalize each group to a distribution
    let mut data = vec![0.0; n * groups];
    for g in 0..groups {
        let mut total = 0.0;
        for j in 0..n {
            let f = match mode {
                AffinityMode::PairwiseOnly => 1.0,
                _ => unary[j * groups + g],
            };
            let w = weights[j * groups + g] * f;
            data[j * groups + g] = w;
            total += w;
        }
        for j in 0..n {
            data[j * groups + g] /= total;
        }
    }
    FeatureMap::new(graph.height(), graph.width(), groups, data)?.with_groups(groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid_graph::{unary_values, UnaryParams};
    use crate::rng::SplitMix64;
    use crate::spanning::{mst, root_tree, sample_random_spanning_tree, TreeEdge};

    fn path_graph(weights: Vec<f64>) -> (GridGraph, SpanningTree) {
        let n = weights.len() + 1;
        let mut g = GridGraph::build(1, n).unwrap();
        g.set_weights(1, weights).unwrap();
        let t = mst(&g, 0).unwrap();
        (g, t)
    }

    fn random_instance(
        seed: u64,
        max_side: usize,
        channels: usize,
        groups: usize,
    ) -> (FeatureMap, GridGraph, SpanningTree, Vec<f64>, Vec<f64>) {
        let mut rng = SplitMix64::new(seed);
        let h = 1 + rng.next_index(max_side);
        let w = 1 + rng.next_index(max_side);
        let map = FeatureMap::new(
            h,
            w,
            channels,
            (0..h * w * channels).map(|_| rng.next_in(-2.0, 2.0)).collect(),
        )
        .unwrap()
        .with_groups(groups)
        .unwrap();
        let mut graph = GridGraph::build(h, w).unwrap();
        let n_edges = graph.n_edges();
        graph
            .set_weights(groups, (0..n_edges * groups).map(|_| rng.next_in(0.0, 2.0)).collect())
            .unwrap();
        let tree = if seed.is_multiple_of(2) {
            mst(&graph, 0).unwrap()
        } else {
            sample_random_spanning_tree(&graph, 0, seed).unwrap()
        };
        let unary: Vec<f64> = (0..h * w * groups).map(|_| rng.next_in(0.05, 0.95)).collect();
        let beta: Vec<f64> = (0..groups).map(|_| rng.next_in(-1.0, 2.0)).collect();
        (map, graph, tree, unary, beta)
    }

    #[test]
    fn v2_with_unit_unary_equals_v1_bitwise() {
        for seed in 0..10u64 {
            let (map, graph, tree, _, _) = random_instance(seed, 5, 4, 2);
            let unary = vec![1.0; map.n_nodes() * 2];
            let beta = vec![0.0; 2];
            let a = forward_v2(&map, &tree, &graph, &unary, &beta, Exec::sequential()).unwrap();
            let b = forward_v1(&map, &tree, &graph, Exec::sequential()).unwrap();
            for (x, y) in a.output.data().iter().zip(b.output.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            for (x, y) in a.normalizer.iter().zip(&b.normalizer) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn two_node_tree_by_hand() {
        // t = 0.5 via beta = ln 2, f = 1, x = [0, 3]:
        // y_a = (0 + 0.5 * 3) / (1 + 0.5) = 1.0
        let map = FeatureMap::new(1, 2, 1, vec![0.0, 3.0]).unwrap();
        let (graph, tree) = {
            let mut g = GridGraph::build(1, 2).unwrap();
            g.set_weights(1, vec![0.0]).unwrap();
            let t = mst(&g, 0).unwrap();
            (g, t)
        };
        let unary = vec![1.0, 1.0];
        let beta = vec![2f64.ln()];
        let st = forward_v2(&map, &tree, &graph, &unary, &beta, Exec::sequential()).unwrap();
        assert!((st.output.value(0, 0) - 1.0).abs() < 1e-15);
        assert!((st.normalizer[0] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn large_beta_gives_identity() {
        let (map, graph, tree, unary, _) = random_instance(3, 4, 2, 1);
        let beta = vec![50.0];
        let st = forward_v2(&map, &tree, &graph, &unary, &beta, Exec::sequential()).unwrap();
        for (y, x) in st.output.data().iter().zip(map.data()) {
            assert!((y - x).abs() < 1e-15, "{y} vs {x}");
        }
    }

    #[test]
    fn lemma3_style_weights_favor_the_distant_confident_node() {
        // path a-b-c, w = 0, beta = 0, f = (0.5, 0.1, 0.9):
        // weights from a are (0.5, 0.1, 0.9) / 1.5
        let (graph, tree) = path_graph(vec![0.0, 0.0]);
        let unary = vec![0.5, 0.1, 0.9];
        let beta = vec![0.0];
        let aff = affinity_map(&tree, &graph, &unary, &beta, 0, AffinityMode::Full).unwrap();
        let expect = [0.5 / 1.5, 0.1 / 1.5, 0.9 / 1.5];
        for (got, want) in aff.data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-15);
        }
        assert!(aff.value(2, 0) > aff.value(1, 0), "descendant outweighs ancestor");
    }

    #[test]
    fn v1_zero_weights_average_everything() {
        let mut rng = SplitMix64::new(11);
        let map = FeatureMap::new(3, 3, 2, (0..18).map(|_| rng.next_in(0.0, 1.0)).collect()).unwrap();
        let mut graph = GridGraph::build(3, 3).unwrap();
        graph.set_weights(1, vec![0.0; 12]).unwrap();
        let tree = mst(&graph, 0).unwrap();
        let st = forward_v1(&map, &tree, &graph, Exec::sequential()).unwrap();
        for c in 0..2 {
            let mean: f64 = (0..9).map(|i| map.value(i, c)).sum::<f64>() / 9.0;
            for i in 0..9 {
                assert!((st.output.value(i, c) - mean).abs() < 1e-12);
            }
        }
        assert!(st.normalizer.iter().all(|&z| (z - 9.0).abs() < 1e-12));
    }

    #[test]
    fn v1_path_by_hand() {
        // path a-b-c with w = ln 2 on both edges, x = (2, 4, 6):
        // y_b = (1 + 4 + 3) / 2 = 4, y_a = 5.5 / 1.75 = 22/7
        let (graph, tree) = path_graph(vec![2f64.ln(), 2f64.ln()]);
        let map = FeatureMap::new(1, 3, 1, vec![2.0, 4.0, 6.0]).unwrap();
        let st = forward_v1(&map, &tree, &graph, Exec::sequential()).unwrap();
        assert!((st.output.value(1, 0) - 4.0).abs() < 1e-14);
        assert!((st.output.value(0, 0) - 22.0 / 7.0).abs() < 1e-14);
    }

    #[test]
    fn v1_huge_weights_give_identity() {
        let (map, graph0, tree0, ..) = random_instance(5, 4, 2, 1);
        let mut graph = graph0.clone();
        let n_edges = graph.n_edges();
        graph.set_weights(1, vec![1e9; n_edges]).unwrap();
        let tree = root_tree(tree0.n_nodes, &tree0.tree_edges, 0).unwrap();
        let st = forward_v1(&map, &tree, &graph, Exec::sequential()).unwrap();
        for (y, x) in st.output.data().iter().zip(map.data()) {
            assert!((y - x).abs() < 1e-15);
        }
    }

    #[test]
    fn dp_matches_bruteforce_on_random_instances() {
        for seed in 0..60u64 {
            let groups = [1usize, 2, 4][seed as usize % 3];
            let cpg = 1 + seed as usize % 2;
            let (map, graph, tree, unary, beta) = random_instance(seed, 8, groups * cpg, groups);
            let fast = forward_v2(&map, &tree, &graph, &unary, &beta, Exec::sequential()).unwrap();
            let slow = forward_bruteforce(&map, &tree, &graph, &unary, &beta).unwrap();
            for (a, b) in fast.output.data().iter().zip(slow.output.data()) {
                assert!((a - b).abs() < 1e-10, "seed {seed}: {a} vs {b}");
            }
            for (a, b) in fast.normalizer.iter().zip(&slow.normalizer) {
                assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()), "seed {seed}");
            }
        }
    }

    #[test]
    fn bruteforce_single_node() {
        let map = FeatureMap::new(1, 1, 2, vec![3.0, -1.0]).unwrap();
        let graph = GridGraph::build(1, 1).unwrap();
        let tree = root_tree(1, &[], 0).unwrap();
        let st = forward_bruteforce(&map, &tree, &graph, &[0.25], &[0.0]).unwrap();
        assert_eq!(st.output.data(), map.data());
        assert_eq!(st.normalizer, vec![0.25]);
    }

    #[test]
    fn bruteforce_star_closed_form() {
        // Star: center node 4 of a 3x3 grid with leaves 1, 3, 5 at t = 0.5
        // each; remaining nodes hang off edges with t = 0. Closed form:
        // y_center = (x_c + t * sum(x_l)) / (1 + t * 3).
        let mut graph = GridGraph::build(3, 3).unwrap();
        let star = [3u32, 5, 7]; // (1,4), (3,4), (4,5)
        let rest = [0u32, 2, 6, 9, 11]; // (0,1), (1,2), (3,6), (5,8), (7,8)
        let mut weights = vec![1e9; 12];
        for &e in &star {
            weights[e as usize] = 2f64.ln();
        }
        graph.set_weights(1, weights).unwrap();
        let edges: Vec<TreeEdge> = star
            .iter()
            .chain(&rest)
            .map(|&e| {
                let (a, b) = graph.edges()[e as usize];
                TreeEdge { a, b, graph_edge: e }
            })
            .collect();
        let tree = root_tree(9, &edges, 4).unwrap();
        let map = FeatureMap::new(3, 3, 1, (0..9).map(f64::from).collect()).unwrap();
        let st = forward_bruteforce(&map, &tree, &graph, &[1.0; 9], &[0.0]).unwrap();
        let t = 0.5;
        let expect = (4.0 + t * (1.0 + 3.0 + 5.0)) / (1.0 + t * 3.0);
        assert!((st.output.value(4, 0) - expect).abs() < 1e-12);
    }

    #[test]
    fn bruteforce_refuses_above_cap() {
        let map = FeatureMap::new(3, 3, 1, vec![0.0; 9]).unwrap();
        let graph = GridGraph::weighted_from(&map).unwrap();
        let tree = mst(&graph, 0).unwrap();
        let err = forward_bruteforce_with_cap(&map, &tree, &graph, &[1.0; 9], &[0.0], 4);
        assert!(matches!(err, Err(Error::CapExceeded { nodes: 9, cap: 4 })));
    }

    #[test]
    fn output_is_convex_combination_of_inputs() {
        for seed in 100..130u64 {
            let (map, graph, tree, unary, beta) = random_instance(seed, 5, 4, 2);
            let st = forward_v2(&map, &tree, &graph, &unary, &beta, Exec::sequential()).unwrap();
            for g in 0..2 {
                for c in 0..2 {
                    let ch = g * 2 + c;
                    let lo = (0..map.n_nodes()).map(|i| map.value(i, ch)).fold(f64::MAX, f64::min);
                    let hi = (0..map.n_nodes()).map(|i| map.value(i, ch)).fold(f64::MIN, f64::max);
                    for i in 0..map.n_nodes() {
                        let y = st.output.value(i, ch);
                        assert!(y >= lo - 1e-12 && y <= hi + 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn root_choice_does_not_change_output() {
        for seed in 0..10u64 {
            let (map, graph, tree, unary, beta) = random_instance(seed, 5, 2, 1);
            if tree.n_nodes < 2 {
                continue;
            }
            let rerooted = root_tree(tree.n_nodes, &tree.tree_edges, (tree.n_nodes - 1) as u32).unwrap();
            let a = forward_v2(&map, &tree, &graph, &unary, &beta, Exec::sequential()).unwrap();
            let b = forward_v2(&map, &rerooted, &graph, &unary, &beta, Exec::sequential()).unwrap();
            for (x, y) in a.output.data().iter().zip(b.output.data()) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn parallel_matches_sequential_bitwise() {
        for seed in 0..10u64 {
            let (map, graph, tree, unary, beta) = random_instance(seed, 8, 4, 2);
            let a = forward_v2(&map, &tree, &graph, &unary, &beta, Exec::sequential()).unwrap();
            let b = forward_v2(&map, &tree, &graph, &unary, &beta, Exec::parallel()).unwrap();
            for (x, y) in a.output.data().iter().zip(b.output.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
            assert_eq!(a.work, b.work);
        }
    }

    #[test]
    fn edge_visit_counters_are_exact() {
        let (map, graph, tree, unary, beta) = random_instance(8, 6, 4, 2);
        let n = map.n_nodes() as u64;
        let st = forward_v2(&map, &tree, &graph, &unary, &beta, Exec::sequential()).unwrap();
        assert_eq!(st.work.up_edge_visits, 2 * (n - 1) * 2);
        assert_eq!(st.work.down_edge_visits, 2 * (n - 1) * 2);
    }

    #[test]
    fn affinity_rows_sum_to_one() {
        for seed in 0..20u64 {
            let (map, graph, tree, unary, beta) = random_instance(seed, 5, 4, 2);
            let node = (seed as usize % map.n_nodes()) as u32;
            for mode in [AffinityMode::UnaryOnly, AffinityMode::PairwiseOnly, AffinityMode::Full] {
                let aff = affinity_map(&tree, &graph, &unary, &beta, node, mode).unwrap();
                for g in 0..2 {
                    let sum: f64 = (0..map.n_nodes()).map(|i| aff.value(i, g)).sum();
                    assert!((sum - 1.0).abs() < 1e-12, "{mode:?} sum {sum}");
                    assert!((0..map.n_nodes()).all(|i| aff.value(i, g) >= 0.0));
                }
            }
        }
    }

    #[test]
    fn unary_only_with_flat_confidence_is_uniform() {
        let (graph, tree) = path_graph(vec![1.0, 2.0]);
        let aff = affinity_map(&tree, &graph, &[0.5; 3], &[0.0], 1, AffinityMode::UnaryOnly).unwrap();
        for i in 0..3 {
            assert!((aff.value(i, 0) - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn full_mode_with_large_beta_is_an_indicator() {
        let (graph, tree) = path_graph(vec![0.5, 0.5]);
        let aff = affinity_map(&tree, &graph, &[0.5; 3], &[50.0], 1, AffinityMode::Full).unwrap();
        assert!((aff.value(1, 0) - 1.0).abs() < 1e-15);
        assert!(aff.value(0, 0) < 1e-20);
    }

    #[test]
    fn pairwise_only_path_weights_by_hand() {
        // from a over w = ln 2 edges: normalize (1, 1/2, 1/4) = (4/7, 2/7, 1/7)
        let (graph, tree) = path_graph(vec![2f64.ln(), 2f64.ln()]);
        let aff = affinity_map(&tree, &graph, &[0.5; 3], &[9.0], 0, AffinityMode::PairwiseOnly).unwrap();
        let expect = [4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0];
        for (got, want) in aff.data().iter().zip(expect) {
            assert!((got - want).abs() < 1e-14, "{got} vs {want}");
        }
    }

    #[test]
    fn pairwise_weights_never_increase_along_paths() {
        for seed in 0..30u64 {
            let (map, graph, tree, unary, beta) = random_instance(seed, 5, 2, 1);
            let sink = (seed as usize * 7) % map.n_nodes();
            let aff =
                affinity_map(&tree, &graph, &unary, &beta, sink as u32, AffinityMode::PairwiseOnly)
                    .unwrap();
            let rooted = root_tree(tree.n_nodes, &tree.tree_edges, sink as u32).unwrap();
            for node in 0..map.n_nodes() as u32 {
                if node != rooted.root {
                    let parent = rooted.parent[node as usize];
                    assert!(
                        aff.value(node as usize, 0) <= aff.value(parent as usize, 0) + 1e-15,
                        "seed {seed} node {node}"
                    );
                }
            }
        }
    }

    #[test]
    fn affinity_rejects_out_of_range_node() {
        let (graph, tree) = path_graph(vec![1.0]);
        assert!(matches!(
            affinity_map(&tree, &graph, &[0.5; 2], &[0.0], 9, AffinityMode::Full),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn unary_outside_unit_interval_is_rejected() {
        let (graph, tree) = path_graph(vec![1.0]);
        let map = FeatureMap::new(1, 2, 1, vec![1.0, 2.0]).unwrap();
        let err = forward_v2(&map, &tree, &graph, &[0.5, 1.5], &[0.0], Exec::sequential());
        assert!(matches!(err, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let map = FeatureMap::new(2, 2, 1, vec![0.0; 4]).unwrap();
        let graph = GridGraph::build(2, 3).unwrap();
        let tree = mst(&GridGraph::build(2, 2).unwrap(), 0).unwrap();
        assert!(matches!(
            forward_v1(&map, &tree, &graph, Exec::sequential()),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn unary_values_compose_with_filter() {
        let mut rng = SplitMix64::new(21);
        let map = FeatureMap::new(4, 4, 4, (0..64).map(|_| rng.next_in(0.0, 1.0)).collect())
            .unwrap()
            .with_groups(2)
            .unwrap();
        let graph = GridGraph::weighted_from(&map).unwrap();
        let tree = mst(&graph, 0).unwrap();
        let params = UnaryParams::new(
            2,
            2,
            (0..4).map(|_| rng.next_in(-1.0, 1.0)).collect(),
            vec![0.2, -0.1],
        )
        .unwrap();
        let unary = unary_values(&map, &params).unwrap();
        let st = forward_v2(&map, &tree, &graph, &unary, &params.beta, Exec::parallel()).unwrap();
        assert!(st.output.data().iter().all(|v| v.is_finite()));
    }
}
