//! Reverse-mode differentiation of the tree filter.
//!
//! The backward pass replays the two forward sweeps in reverse: adjoints of
//! the downward accumulators gather child-to-parent (an upward-shaped
//! sweep), adjoints of the upward accumulators then flow parent-to-child
//! (a downward-shaped sweep). Per-edge transmission adjoints fall out along
//! the way and chain into beta and the edge weights; per-node unary
//! adjoints chain through the sigmoid into pi and the input. Edge-weight
//! gradients finally chain into the input and guided maps through the
//! squared-distance derivative, the path that makes the guided features
//! trainable at all.
//!
//! Tree topology is a constant: no derivative flows through the discrete
//! sampling, but sampled edges' weights receive gradient and the same
//! weights parameterize the sampler.
//!
//! Everything here is validated against central finite differences before
//! being trusted; [`finite_difference_check`] is that harness.

use crate::error::{Error, Result};
use crate::exec::{for_each_group, level_sweep, Exec};
use crate::feature_map::FeatureMap;
use crate::grid_graph::{joint_affinity, unary_values, GridGraph, UnaryParams};
use crate::spanning::SpanningTree;
use crate::tree_filter::{forward_v2, FilterState};

/// Default central-difference step in double precision.
pub const DEFAULT_FD_STEP: f64 = 1e-5;
/// Floor in the relative-error denominator.
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Gradients with respect to every differentiable input of the pipeline.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    /// d loss / d input map, `n_nodes * channels`.
    pub d_input: Vec<f64>,
    /// d loss / d guided map, same shape.
    pub d_guided: Vec<f64>,
    /// d loss / d pi, `groups * cpg`.
    pub d_pi: Vec<f64>,
    /// d loss / d beta, one per group.
    pub d_beta: Vec<f64>,
    /// d loss / d joint edge weight, `n_edges * groups`; zero off-tree.
    pub d_edge_weights: Vec<f64>,
}

/// Raw filter-level adjoints before any chaining into parameters.
#[derive(Debug, Clone)]
pub struct FilterVjp {
    /// Adjoint of the input through the numerator path only.
    pub d_x_direct: Vec<f64>,
    /// Adjoint of the unary confidences, node-major `n * groups`.
    pub d_unary: Vec<f64>,
    /// Adjoint of the joint edge weights, `n_edges * groups`.
    pub d_edge_weights: Vec<f64>,
    pub d_beta: Vec<f64>,
}

/// Reverse pass of `forward_v2` proper: distributes the output cotangent
/// onto the input rows, the unary confidences, beta, and the tree edges'
/// weights. `state` must come from `forward_v2` on these exact arguments.
pub fn filter_vjp(
    state: &FilterState,
    tree: &SpanningTree,
    graph: &GridGraph,
    d_output: &[f64],
    exec: Exec,
) -> Result<FilterVjp> {
    let n = tree.n_nodes;
    let groups = graph.groups();
    let channels = state.output.channels();
    let cpg = channels / groups;
    if d_output.len() != n * channels {
        return Err(Error::InvalidArgument(format!(
            "cotangent length {} does not match {} nodes x {channels} channels",
            d_output.len(),
            n
        )));
    }
    if d_output.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("cotangent".into()));
    }
    if state.output.n_nodes() != n || state.normalizer.len() != n * groups {
        return Err(Error::InvalidArgument(
            "filter state does not match the tree".into(),
        ));
    }

    struct GroupGrads {
        d_x: Vec<f64>,
        d_f: Vec<f64>,
        d_t: Vec<f64>,
        d_beta: f64,
    }

    let per_group = for_each_group(groups, exec, |g| {
        let cache = &state.cache[g];
        let (up_num, up_den) = (&cache.up_num, &cache.up_den);
        let (down_num, down_den) = (&cache.down_num, &cache.down_den);
        let t = &cache.t;

        // gather the cotangent into BFS order
        let mut dy = vec![0.0; n * cpg];
        for pos in 0..n {
            let node = tree.node_at(pos) as usize;
            let base = node * channels + g * cpg;
            dy[pos * cpg..(pos + 1) * cpg].copy_from_slice(&d_output[base..base + cpg]);
        }

        // adjoints of the downward accumulators: base term from the output
        // division, plus each child's share, gathered deepest level first
        // (this sweep has the upward pass's shape).
        let mut a_dnum = vec![0.0; n * cpg];
        let mut a_dden = vec![0.0; n];
        for d in (0..tree.n_levels()).rev() {
            let (lo, hi) = tree.level_range(d);
            let (head_num, tail_num) = a_dnum.split_at_mut(hi * cpg);
            let (head_den, tail_den) = a_dden.split_at_mut(hi);
            let tail_num = &tail_num[..];
            let tail_den = &tail_den[..];
            level_sweep(
                &mut head_num[lo * cpg..],
                &mut head_den[lo..],
                cpg,
                exec,
                |k, row, den| {
                    let pos = lo + k;
                    let z = down_den[pos];
                    let mut dd = 0.0;
                    for (c, slot) in row.iter_mut().enumerate() {
                        let dyv = dy[pos * cpg + c];
                        *slot = dyv / z;
                        dd -= dyv * down_num[pos * cpg + c] / (z * z);
                    }
                    *den = dd;
                    for &cpos in tree.children_at(pos) {
                        let ci = cpos as usize - hi;
                        let tc = t[cpos as usize];
                        for (c, slot) in row.iter_mut().enumerate() {
                            *slot += tc * tail_num[ci * cpg + c];
                        }
                        *den += tc * tail_den[ci];
                    }
                    0
                },
            );
        }

        // adjoints of the upward accumulators flow root-to-leaf; transmission
        // adjoints complete at the same time since both usages of t (the
        // parent's upward gather and this node's downward combine) are
        // available once the parent's upward adjoint is final.
        let mut a_unum = vec![0.0; n * cpg];
        let mut a_uden = vec![0.0; n];
        let mut a_t = vec![0.0; n];
        a_unum[..cpg].copy_from_slice(&a_dnum[..cpg]);
        a_uden[0] = a_dden[0];
        for d in 1..tree.n_levels() {
            let (lo, hi) = tree.level_range(d);
            let (head_num, tail_num) = a_unum.split_at_mut(lo * cpg);
            let (head_den, tail_den) = a_uden.split_at_mut(lo);
            let head_num = &head_num[..];
            let head_den = &head_den[..];
            let a_t_level = &mut a_t[lo..hi];
            let tail_num_slice = &mut tail_num[..(hi - lo) * cpg];
            let tail_den_slice = &mut tail_den[..hi - lo];
            // one fused sweep: write a_unum/a_uden rows and this node's a_t
            {
                #[cfg(feature = "parallel")]
                use rayon::prelude::*;
                let body = |k: usize,
                            row: &mut [f64],
                            den: &mut f64,
                            at: &mut f64| {
                    let pos = lo + k;
                    let pp = tree.parent_pos(pos);
                    let tc = t[pos];
                    let mut acc_t = 0.0;
                    for (c, slot) in row.iter_mut().enumerate() {
                        let adn = a_dnum[pos * cpg + c];
                        let u = up_num[pos * cpg + c];
                        // U(c) enters D(c) with weight (1 - t^2) and the
                        // parent's U with weight t
                        *slot = (1.0 - tc * tc) * adn + tc * head_num[pp * cpg + c];
                        // t enters D(c) = U + t*(D(p) - t*U) and U(p) += t*U(c)
                        acc_t += adn * (down_num[pp * cpg + c] - 2.0 * tc * u);
                        acc_t += head_num[pp * cpg + c] * u;
                    }
                    let add = a_dden[pos];
                    let ud = up_den[pos];
                    *den = (1.0 - tc * tc) * add + tc * head_den[pp];
                    acc_t += add * (down_den[pp] - 2.0 * tc * ud);
                    acc_t += head_den[pp] * ud;
                    *at = acc_t;
                };
                #[cfg(feature = "parallel")]
                if exec.is_parallel() {
                    tail_num_slice
                        .par_chunks_mut(cpg)
                        .zip(tail_den_slice.par_iter_mut())
                        .zip(a_t_level.par_iter_mut())
                        .enumerate()
                        .for_each(|(k, ((row, den), at))| body(k, row, den, at));
                } else {
                    for (k, ((row, den), at)) in tail_num_slice
                        .chunks_mut(cpg)
                        .zip(tail_den_slice.iter_mut())
                        .zip(a_t_level.iter_mut())
                        .enumerate()
                    {
                        body(k, row, den, at);
                    }
                }
                #[cfg(not(feature = "parallel"))]
                for (k, ((row, den), at)) in tail_num_slice
                    .chunks_mut(cpg)
                    .zip(tail_den_slice.iter_mut())
                    .zip(a_t_level.iter_mut())
                    .enumerate()
                {
                    body(k, row, den, at);
                }
            }
        }

        // leaf terms: unary and direct input adjoints per node, then the
        // scalar reductions in fixed node order.
        let mut d_x = vec![0.0; n * cpg];
        let mut d_f = vec![0.0; n];
        for pos in 0..n {
            let fv = cache.f[pos];
            let mut af = a_uden[pos];
            for c in 0..cpg {
                let aun = a_unum[pos * cpg + c];
                af += aun * cache.x[pos * cpg + c];
                d_x[pos * cpg + c] = aun * fv;
            }
            d_f[pos] = af;
        }
        let mut d_t_edges = vec![0.0; n];
        let mut d_beta = 0.0;
        for pos in 1..n {
            let dt = -t[pos] * a_t[pos];
            d_t_edges[pos] = dt;
            d_beta += dt;
        }

        Ok(GroupGrads {
            d_x,
            d_f,
            d_t: d_t_edges,
            d_beta,
        })
    })?;

    // scatter back to node-major layouts
    let mut d_x_direct = vec![0.0; n * channels];
    let mut d_unary = vec![0.0; n * groups];
    let mut d_edge_weights = vec![0.0; graph.n_edges() * groups];
    let mut d_beta = vec![0.0; groups];
    for (g, gg) in per_group.iter().enumerate() {
        d_beta[g] = gg.d_beta;
        for pos in 0..n {
            let node = tree.node_at(pos) as usize;
            d_unary[node * groups + g] = gg.d_f[pos];
            let base = node * channels + g * cpg;
            d_x_direct[base..base + cpg].copy_from_slice(&gg.d_x[pos * cpg..(pos + 1) * cpg]);
            if pos > 0 {
                let node = tree.node_at(pos);
                let edge = tree.parent_edge[node as usize] as usize;
                d_edge_weights[edge * groups + g] = gg.d_t[pos];
            }
        }
    }

    Ok(FilterVjp {
        d_x_direct,
        d_unary,
        d_edge_weights,
        d_beta,
    })
}

/// Chains unary-confidence adjoints through the sigmoid projection.
///
/// Returns `(d_pi, d_x)`: `d_pi[g * cpg + k]` and the input-map share of
/// the unary path.
pub fn unary_backward(
    x: &FeatureMap,
    params: &UnaryParams,
    unary: &[f64],
    d_unary: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = x.n_nodes();
    let groups = x.groups();
    let cpg = x.channels_per_group();
    if unary.len() != n * groups || d_unary.len() != n * groups {
        return Err(Error::InvalidArgument("unary adjoint length mismatch".into()));
    }
    let mut d_pi = vec![0.0; groups * cpg];
    let mut d_x = vec![0.0; n * x.channels()];
    for node in 0..n {
        for g in 0..groups {
            let f = unary[node * groups + g];
            let scale = d_unary[node * groups + g] * f * (1.0 - f);
            let slice = x.group_slice(node, g);
            let pi = params.pi_group(g);
            let base = node * x.channels() + g * cpg;
            for k in 0..cpg {
                d_pi[g * cpg + k] += scale * slice[k];
                d_x[base + k] += scale * pi[k];
            }
        }
    }
    Ok((d_pi, d_x))
}

/// Chains edge-weight adjoints through the grouped squared-distance:
/// `d w(k,m,g) / d map[k][c] = 2 (map[k][c] - map[m][c]) / cpg`.
pub fn edge_weight_backward(
    map: &FeatureMap,
    graph: &GridGraph,
    d_edge_weights: &[f64],
) -> Result<Vec<f64>> {
    let groups = map.groups();
    let cpg = map.channels_per_group();
    if graph.height() != map.height()
        || graph.width() != map.width()
        || d_edge_weights.len() != graph.n_edges() * groups
    {
        return Err(Error::InvalidArgument(
            "edge-weight adjoint shape mismatch".into(),
        ));
    }
    let mut d_map = vec![0.0; map.n_nodes() * map.channels()];
    for (e, &(k, m)) in graph.edges().iter().enumerate() {
        for g in 0..groups {
            let dw = d_edge_weights[e * groups + g];
            if dw == 0.0 {
                continue;
            }
            let sk = map.group_slice(k as usize, g);
            let sm = map.group_slice(m as usize, g);
            let bk = k as usize * map.channels() + g * cpg;
            let bm = m as usize * map.channels() + g * cpg;
            for c in 0..cpg {
                let grad = dw * 2.0 * (sk[c] - sm[c]) / cpg as f64;
                d_map[bk + c] += grad;
                d_map[bm + c] -= grad;
            }
        }
    }
    Ok(d_map)
}

/// Full backward pass of the joint-affinity pipeline.
///
/// Assumes `graph` holds the joint weights `dist(x) + dist(g)` and `unary`
/// the sigmoid confidences of `x` under `params`, exactly as `state` was
/// produced. The input receives three shares (direct numerator, sigmoid,
/// its own pairwise distances); the guided map receives the pairwise share
/// only.
#[allow(clippy::too_many_arguments)]
pub fn backward(
    state: &FilterState,
    tree: &SpanningTree,
    graph: &GridGraph,
    unary: &[f64],
    params: &UnaryParams,
    x: &FeatureMap,
    g: &FeatureMap,
    d_output: &[f64],
    exec: Exec,
) -> Result<GradientBundle> {
    let vjp = filter_vjp(state, tree, graph, d_output, exec)?;
    let (d_pi, d_x_unary) = unary_backward(x, params, unary, &vjp.d_unary)?;
    let d_x_pairwise = edge_weight_backward(x, graph, &vjp.d_edge_weights)?;
    let d_guided = edge_weight_backward(g, graph, &vjp.d_edge_weights)?;
    let mut d_input = vjp.d_x_direct;
    for ((di, du), dp) in d_input.iter_mut().zip(&d_x_unary).zip(&d_x_pairwise) {
        *di += du + dp;
    }
    Ok(GradientBundle {
        d_input,
        d_guided,
        d_pi,
        d_beta: vjp.d_beta,
        d_edge_weights: vjp.d_edge_weights,
    })
}

/// A differentiable point: everything the pipeline loss depends on.
#[derive(Debug, Clone)]
pub struct FdPoint {
    pub x: FeatureMap,
    pub guided: FeatureMap,
    pub params: UnaryParams,
}

/// Loss functions the harness understands.
#[derive(Debug, Clone)]
pub enum LossKind {
    /// Sum of all output values.
    SumOutputs,
    /// Mean squared error against a fixed target map.
    MseTo(FeatureMap),
}

/// Forward pipeline with a fixed tree topology: joint weights from the
/// point's maps, sigmoid unaries, filter, loss.
pub fn pipeline_loss(point: &FdPoint, tree: &SpanningTree, loss: &LossKind, exec: Exec) -> Result<f64> {
    let (state, _) = pipeline_forward(point, tree, exec)?;
    loss_value(&state, loss)
}

fn loss_value(state: &FilterState, loss: &LossKind) -> Result<f64> {
    let y = state.output.data();
    let v = match loss {
        LossKind::SumOutputs => y.iter().sum(),
        LossKind::MseTo(target) => {
            if target.data().len() != y.len() {
                return Err(Error::InvalidArgument("target shape mismatch".into()));
            }
            y.iter()
                .zip(target.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / y.len() as f64
        }
    };
    if !v.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    Ok(v)
}

fn loss_cotangent(state: &FilterState, loss: &LossKind) -> Vec<f64> {
    let y = state.output.data();
    match loss {
        LossKind::SumOutputs => vec![1.0; y.len()],
        LossKind::MseTo(target) => y
            .iter()
            .zip(target.data())
            .map(|(a, b)| 2.0 * (a - b) / y.len() as f64)
            .collect(),
    }
}

fn pipeline_forward(
    point: &FdPoint,
    tree: &SpanningTree,
    exec: Exec,
) -> Result<(FilterState, (GridGraph, Vec<f64>))> {
    let wx = GridGraph::weighted_from(&point.x)?;
    let wg = GridGraph::weighted_from(&point.guided)?;
    let joint = joint_affinity(&wx, &wg)?;
    let unary = unary_values(&point.x, &point.params)?;
    let state = forward_v2(&point.x, tree, &joint, &unary, &point.params.beta, exec)?;
    Ok((state, (joint, unary)))
}

/// Analytic gradients of the same pipeline.
pub fn pipeline_grad(
    point: &FdPoint,
    tree: &SpanningTree,
    loss: &LossKind,
    exec: Exec,
) -> Result<GradientBundle> {
    let (state, (joint, unary)) = pipeline_forward(point, tree, exec)?;
    let dy = loss_cotangent(&state, loss);
    backward(
        &state,
        tree,
        &joint,
        &unary,
        &point.params,
        &point.x,
        &point.guided,
        &dy,
        exec,
    )
}

/// One parameter's comparison line.
#[derive(Debug, Clone)]
pub struct FdRow {
    /// Which leg the scalar belongs to: "x", "g", "pi", or "beta".
    pub leg: &'static str,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Central-difference comparison over every scalar parameter.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub rows: Vec<FdRow>,
}

impl FdReport {
    pub fn max_rel_err(&self) -> f64 {
        self.rows.iter().map(|r| r.rel_err).fold(0.0, f64::max)
    }

    /// Worst relative error per leg, in (leg, err) pairs.
    pub fn worst_by_leg(&self) -> Vec<(&'static str, f64)> {
        ["x", "g", "pi", "beta"]
            .into_iter()
            .map(|leg| {
                (
                    leg,
                    self.rows
                        .iter()
                        .filter(|r| r.leg == leg)
                        .map(|r| r.rel_err)
                        .fold(0.0, f64::max),
                )
            })
            .collect()
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Walks every scalar in `point`, probes `loss` at +/- h, and compares the
/// central difference against the matching entry of `analytic`.
pub fn finite_difference_check<F>(
    loss: F,
    point: &FdPoint,
    analytic: &GradientBundle,
    h: f64,
) -> Result<FdReport>
where
    F: Fn(&FdPoint) -> Result<f64>,
{
    if !h.is_finite() || h <= 0.0 {
        return Err(Error::InvalidArgument(format!("step {h} must be positive")));
    }
    let mut rows = Vec::new();
    let probe = |leg: &'static str,
                     index: usize,
                     analytic_value: f64,
                     set: &mut dyn FnMut(&mut FdPoint, f64)|
     -> Result<FdRow> {
        let mut plus = point.clone();
        set(&mut plus, h);
        let lp = loss(&plus)
            .map_err(|_| Error::NonFinite(format!("loss while probing {leg}[{index}]")))?;
        let mut minus = point.clone();
        set(&mut minus, -h);
        let lm = loss(&minus)
            .map_err(|_| Error::NonFinite(format!("loss while probing {leg}[{index}]")))?;
        let numeric = (lp - lm) / (2.0 * h);
        Ok(FdRow {
            leg,
            index,
            analytic: analytic_value,
            numeric,
            rel_err: rel_err(analytic_value, numeric),
        })
    };

    for i in 0..point.x.data().len() {
        rows.push(probe("x", i, analytic.d_input[i], &mut |p, d| {
            p.x.data_mut()[i] += d
        })?);
    }
    for i in 0..point.guided.data().len() {
        rows.push(probe("g", i, analytic.d_guided[i], &mut |p, d| {
            p.guided.data_mut()[i] += d
        })?);
    }
    for i in 0..point.params.pi.len() {
        rows.push(probe("pi", i, analytic.d_pi[i], &mut |p, d| {
            p.params.pi[i] += d
        })?);
    }
    for i in 0..point.params.beta.len() {
        rows.push(probe("beta", i, analytic.d_beta[i], &mut |p, d| {
            p.params.beta[i] += d
        })?);
    }
    Ok(FdReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::spanning::{mst, sample_random_spanning_tree};

    fn random_point(seed: u64, h: usize, w: usize, channels: usize, groups: usize) -> FdPoint {
        let mut rng = SplitMix64::new(seed);
        let x = FeatureMap::new(
            h,
            w,
            channels,
            (0..h * w * channels).map(|_| rng.next_in(-1.0, 1.0)).collect(),
        )
        .unwrap()
        .with_groups(groups)
        .unwrap();
        let guided = FeatureMap::new(
            h,
            w,
            channels,
            (0..h * w * channels).map(|_| rng.next_in(-1.0, 1.0)).collect(),
        )
        .unwrap()
        .with_groups(groups)
        .unwrap();
        let cpg = channels / groups;
        let params = UnaryParams::new(
            groups,
            cpg,
            (0..groups * cpg).map(|_| rng.next_in(-0.8, 0.8)).collect(),
            (0..groups).map(|_| rng.next_in(-0.5, 1.0)).collect(),
        )
        .unwrap();
        FdPoint { x, guided, params }
    }

    fn tree_for(point: &FdPoint, seed: u64) -> crate::spanning::SpanningTree {
        let wx = GridGraph::weighted_from(&point.x).unwrap();
        let wg = GridGraph::weighted_from(&point.guided).unwrap();
        let joint = joint_affinity(&wx, &wg).unwrap();
        if seed.is_multiple_of(2) {
            mst(&joint, 0).unwrap()
        } else {
            sample_random_spanning_tree(&joint, 0, seed).unwrap()
        }
    }

    #[test]
    fn quadratic_loss_on_a_linear_map_is_exact() {
        // loss(v) = sum v^2 has gradient 2v; central differences are exact
        // for quadratics up to roundoff.
        let point = random_point(1, 2, 2, 1, 1);
        let analytic = GradientBundle {
            d_input: point.x.data().iter().map(|v| 2.0 * v).collect(),
            d_guided: vec![0.0; point.guided.data().len()],
            d_pi: vec![0.0; 1],
            d_beta: vec![0.0; 1],
            d_edge_weights: vec![],
        };
        let report = finite_difference_check(
            |p| Ok(p.x.data().iter().map(|v| v * v).sum()),
            &point,
            &analytic,
            1e-5,
        )
        .unwrap();
        let worst_x = report
            .rows
            .iter()
            .filter(|r| r.leg == "x")
            .map(|r| r.rel_err)
            .fold(0.0, f64::max);
        assert!(worst_x < 1e-9, "{worst_x}");
    }

    #[test]
    fn sum_loss_gradients_match_finite_differences() {
        let point = random_point(7, 3, 3, 2, 1);
        let tree = tree_for(&point, 7);
        let analytic = pipeline_grad(&point, &tree, &LossKind::SumOutputs, Exec::sequential()).unwrap();
        let report = finite_difference_check(
            |p| pipeline_loss(p, &tree, &LossKind::SumOutputs, Exec::sequential()),
            &point,
            &analytic,
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-4, "{:?}", report.worst_by_leg());
    }

    #[test]
    fn mse_loss_reaches_the_guided_map() {
        let mut rng = SplitMix64::new(42);
        let point = random_point(13, 4, 4, 2, 2);
        let target = FeatureMap::new(4, 4, 2, (0..32).map(|_| rng.next_in(-1.0, 1.0)).collect())
            .unwrap()
            .with_groups(2)
            .unwrap();
        let tree = tree_for(&point, 13);
        let loss = LossKind::MseTo(target);
        let analytic = pipeline_grad(&point, &tree, &loss, Exec::sequential()).unwrap();
        // the tunnel is live: some guided gradient is nonzero
        assert!(analytic.d_guided.iter().any(|&v| v.abs() > 1e-12));
        let report = finite_difference_check(
            |p| pipeline_loss(p, &tree, &loss, Exec::sequential()),
            &point,
            &analytic,
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-4, "{:?}", report.worst_by_leg());
    }

    #[test]
    fn gradients_match_fd_across_many_configurations() {
        for seed in 0..24u64 {
            let groups = 1 + (seed as usize % 2);
            let cpg = 1 + (seed as usize / 2 % 2);
            let h = 2 + (seed as usize % 4);
            let w = 2 + (seed as usize / 3 % 3);
            let point = random_point(seed, h, w, groups * cpg, groups);
            let tree = tree_for(&point, seed);
            let loss = LossKind::SumOutputs;
            let analytic = pipeline_grad(&point, &tree, &loss, Exec::sequential()).unwrap();
            let report = finite_difference_check(
                |p| pipeline_loss(p, &tree, &loss, Exec::sequential()),
                &point,
                &analytic,
                DEFAULT_FD_STEP,
            )
            .unwrap();
            assert!(
                report.max_rel_err() < 1e-4,
                "seed {seed}: {:?}",
                report.worst_by_leg()
            );
        }
    }

    #[test]
    fn near_identity_filter_passes_the_cotangent_through() {
        let mut point = random_point(5, 3, 3, 2, 1);
        point.params.beta[0] = 50.0;
        let tree = tree_for(&point, 6);
        let (state, (joint, unary)) = pipeline_forward(&point, &tree, Exec::sequential()).unwrap();
        let mut rng = SplitMix64::new(55);
        let dy: Vec<f64> = (0..18).map(|_| rng.next_in(-1.0, 1.0)).collect();
        let bundle = backward(
            &state,
            &tree,
            &joint,
            &unary,
            &point.params,
            &point.x,
            &point.guided,
            &dy,
            Exec::sequential(),
        )
        .unwrap();
        for (di, dyv) in bundle.d_input.iter().zip(&dy) {
            assert!((di - dyv).abs() < 1e-6, "{di} vs {dyv}");
        }
    }

    #[test]
    fn single_node_backward_is_exact() {
        let x = FeatureMap::new(1, 1, 2, vec![0.7, -0.3]).unwrap();
        let guided = x.clone();
        let params = UnaryParams::zeros(1, 2).unwrap();
        let point = FdPoint { x, guided, params };
        let tree = crate::spanning::root_tree(1, &[], 0).unwrap();
        let (state, (joint, unary)) = pipeline_forward(&point, &tree, Exec::sequential()).unwrap();
        let dy = vec![1.25, -2.5];
        let bundle = backward(
            &state,
            &tree,
            &joint,
            &unary,
            &point.params,
            &point.x,
            &point.guided,
            &dy,
            Exec::sequential(),
        )
        .unwrap();
        assert_eq!(bundle.d_input, dy);
        assert_eq!(bundle.d_beta, vec![0.0]);
        assert!(bundle.d_guided.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_is_linear_in_the_cotangent() {
        let point = random_point(3, 3, 4, 2, 2);
        let tree = tree_for(&point, 3);
        let (state, (joint, unary)) = pipeline_forward(&point, &tree, Exec::sequential()).unwrap();
        let mut rng = SplitMix64::new(8);
        let n = state.output.data().len();
        let u: Vec<f64> = (0..n).map(|_| rng.next_in(-1.0, 1.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.next_in(-1.0, 1.0)).collect();
        let (a, b) = (0.7, -1.3);
        let combo: Vec<f64> = u.iter().zip(&v).map(|(x, y)| a * x + b * y).collect();
        let run = |dy: &[f64]| {
            backward(
                &state,
                &tree,
                &joint,
                &unary,
                &point.params,
                &point.x,
                &point.guided,
                dy,
                Exec::sequential(),
            )
            .unwrap()
        };
        let (gu, gv, gc) = (run(&u), run(&v), run(&combo));
        let check = |xu: &[f64], xv: &[f64], xc: &[f64]| {
            for ((u, v), c) in xu.iter().zip(xv).zip(xc) {
                assert!((a * u + b * v - c).abs() < 1e-10);
            }
        };
        check(&gu.d_input, &gv.d_input, &gc.d_input);
        check(&gu.d_guided, &gv.d_guided, &gc.d_guided);
        check(&gu.d_pi, &gv.d_pi, &gc.d_pi);
        check(&gu.d_beta, &gv.d_beta, &gc.d_beta);
    }

    #[test]
    fn zero_cotangent_gives_exactly_zero_gradients() {
        let point = random_point(9, 3, 3, 2, 1);
        let tree = tree_for(&point, 9);
        let (state, (joint, unary)) = pipeline_forward(&point, &tree, Exec::sequential()).unwrap();
        let dy = vec![0.0; state.output.data().len()];
        let bundle = backward(
            &state,
            &tree,
            &joint,
            &unary,
            &point.params,
            &point.x,
            &point.guided,
            &dy,
            Exec::sequential(),
        )
        .unwrap();
        assert!(bundle.d_input.iter().all(|&v| v == 0.0));
        assert!(bundle.d_guided.iter().all(|&v| v == 0.0));
        assert!(bundle.d_pi.iter().all(|&v| v == 0.0));
        assert!(bundle.d_beta.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn guided_gradient_ignores_constant_shifts() {
        // with the tree and weights held fixed, d_guided depends on
        // differences only, so shifting every channel of g is invisible
        let point = random_point(11, 3, 3, 2, 1);
        let tree = tree_for(&point, 11);
        let (state, (joint, unary)) = pipeline_forward(&point, &tree, Exec::sequential()).unwrap();
        let mut rng = SplitMix64::new(31);
        let dy: Vec<f64> = (0..18).map(|_| rng.next_in(-1.0, 1.0)).collect();
        let run = |g: &FeatureMap| {
            backward(
                &state,
                &tree,
                &joint,
                &unary,
                &point.params,
                &point.x,
                g,
                &dy,
                Exec::sequential(),
            )
            .unwrap()
            .d_guided
        };
        let base = run(&point.guided);
        let mut shifted = point.guided.clone();
        for v in shifted.data_mut() {
            *v += 1.7;
        }
        let moved = run(&shifted);
        for (a, b) in base.iter().zip(&moved) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn parallel_backward_matches_sequential_bitwise() {
        let point = random_point(17, 4, 5, 4, 2);
        let tree = tree_for(&point, 17);
        let (state, (joint, unary)) = pipeline_forward(&point, &tree, Exec::sequential()).unwrap();
        let mut rng = SplitMix64::new(71);
        let dy: Vec<f64> = (0..state.output.data().len())
            .map(|_| rng.next_in(-1.0, 1.0))
            .collect();
        let run = |exec: Exec| {
            backward(
                &state, &tree, &joint, &unary, &point.params, &point.x, &point.guided, &dy, exec,
            )
            .unwrap()
        };
        let (a, b) = (run(Exec::sequential()), run(Exec::parallel()));
        for (x, y) in a.d_input.iter().zip(&b.d_input) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        for (x, y) in a.d_pi.iter().zip(&b.d_pi) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn fd_rejects_nonpositive_step() {
        let point = random_point(1, 2, 2, 1, 1);
        let analytic = GradientBundle {
            d_input: vec![0.0; 4],
            d_guided: vec![0.0; 4],
            d_pi: vec![0.0],
            d_beta: vec![0.0],
            d_edge_weights: vec![],
        };
        assert!(matches!(
            finite_difference_check(|_| Ok(0.0), &point, &analytic, 0.0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn fd_reports_the_offending_parameter_on_nonfinite_loss() {
        let point = random_point(2, 2, 2, 1, 1);
        let analytic = GradientBundle {
            d_input: vec![0.0; 4],
            d_guided: vec![0.0; 4],
            d_pi: vec![0.0],
            d_beta: vec![0.0],
            d_edge_weights: vec![],
        };
        let err = finite_difference_check(
            |_| Err(Error::NonFinite("boom".into())),
            &point,
            &analytic,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite(ref m) if m.contains("x[0]")), "{err}");
    }
}
