//! 4-connected grid graph, per-group edge weights, and the unary term.
//!
//! Edge weights are mean squared per-channel differences over each group's
//! channel slice; joint affinities add the distances of two weight sets,
//! which multiplies the corresponding `exp(-w)` similarities. The unary
//! term is a per-group sigmoid projection of each node's feature slice.

use crate::error::{Error, Result};
use crate::feature_map::FeatureMap;

/// 4-connected planar graph over an H x W grid.
///
/// Edges are stored as `(a, b)` with `a < b`, sorted lexicographically;
/// this canonical order is the tie-breaker for deterministic spanning
/// trees. Weights are edge-major: `weights[edge * groups + group]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridGraph {
    height: usize,
    width: usize,
    groups: usize,
    edges: Vec<(u32, u32)>,
    weights: Vec<f64>,
}

impl GridGraph {
    /// Builds the grid with zero-initialized single-group weights.
    pub fn build(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "invalid grid dimensions: {height}x{width}"
            )));
        }
        let n_edges = height * (width - 1) + (height - 1) * width;
        let mut edges = Vec::with_capacity(n_edges);
        for y in 0..height {
            for x in 0..width {
                let node = (y * width + x) as u32;
                if x + 1 < width {
                    edges.push((node, node + 1));
                }
                if y + 1 < height {
                    edges.push((node, node + width as u32));
                }
            }
        }
        debug_assert_eq!(edges.len(), n_edges);
        Ok(GridGraph {
            height,
            width,
            groups: 1,
            weights: vec![0.0; edges.len()],
            edges,
        })
    }

    /// Builds the grid for `map`'s shape and fills weights from it.
    pub fn weighted_from(map: &FeatureMap) -> Result<Self> {
        let mut graph = GridGraph::build(map.height(), map.width())?;
        graph.fill_weights(map)?;
        Ok(graph)
    }

    /// Fills per-group weights: for edge (k, m) and group g the weight is
    /// the mean over the group's channel slice of (x_k[c] - x_m[c])^2.
    pub fn fill_weights(&mut self, map: &FeatureMap) -> Result<()> {
        if map.height() != self.height || map.width() != self.width {
            return Err(Error::InvalidArgument(format!(
                "map {}x{} does not match grid {}x{}",
                map.height(),
                map.width(),
                self.height,
                self.width
            )));
        }
        let groups = map.groups();
        let cpg = map.channels_per_group();
        self.groups = groups;
        self.weights = vec![0.0; self.edges.len() * groups];
        for (e, &(a, b)) in self.edges.iter().enumerate() {
            for g in 0..groups {
                let sa = map.group_slice(a as usize, g);
                let sb = map.group_slice(b as usize, g);
                let mut acc = 0.0;
                for c in 0..cpg {
                    let d = sa[c] - sb[c];
                    acc += d * d;
                }
                self.weights[e * groups + g] = acc / cpg as f64;
            }
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_nodes(&self) -> usize {
        self.height * self.width
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn edges(&self) -> &[(u32, u32)] {
        &self.edges
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    #[inline]
    pub fn weight(&self, edge: usize, group: usize) -> f64 {
        self.weights[edge * self.groups + group]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Overwrites all weights. Length must be `n_edges * groups`.
    pub fn set_weights(&mut self, groups: usize, weights: Vec<f64>) -> Result<()> {
        if groups == 0 || weights.len() != self.edges.len() * groups {
            return Err(Error::InvalidArgument(format!(
                "weight length {} does not match {} edges x {groups} groups",
                weights.len(),
                self.edges.len()
            )));
        }
        if let Some(pos) = weights.iter().position(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument(format!(
                "weight[{pos}] = {} is not a finite nonnegative value",
                weights[pos]
            )));
        }
        self.groups = groups;
        self.weights = weights;
        Ok(())
    }
}

/// Combines two weight sets into joint affinities.
///
/// Similarities multiply, `exp(-w_joint) = exp(-w_a) * exp(-w_b)`, so the
/// joint distance is the sum `w_a + w_b`. Both graphs must share shape and
/// group count.
pub fn joint_affinity(a: &GridGraph, b: &GridGraph) -> Result<GridGraph> {
    if a.height != b.height || a.width != b.width || a.groups != b.groups {
        return Err(Error::InvalidArgument(format!(
            "graph shapes differ: {}x{}x{} vs {}x{}x{}",
            a.height, a.width, a.groups, b.height, b.width, b.groups
        )));
    }
    let mut joint = a.clone();
    for (w, &wb) in joint.weights.iter_mut().zip(&b.weights) {
        *w += wb;
    }
    Ok(joint)
}

/// Per-group projection vector pi and scalar beta of the unary term.
#[derive(Debug, Clone, PartialEq)]
pub struct UnaryParams {
    /// `pi[group * cpg + k]`, the per-group projection.
    pub pi: Vec<f64>,
    /// One potential scalar per group.
    pub beta: Vec<f64>,
    groups: usize,
    cpg: usize,
}

impl UnaryParams {
    pub fn new(groups: usize, cpg: usize, pi: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        if groups == 0 || cpg == 0 {
            return Err(Error::InvalidArgument("empty unary parameter shape".into()));
        }
        if pi.len() != groups * cpg || beta.len() != groups {
            return Err(Error::InvalidArgument(format!(
                "parameter lengths {}x{} do not match {groups} groups x {cpg} channels",
                pi.len(),
                beta.len()
            )));
        }
        if pi.iter().chain(beta.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("unary parameters".into()));
        }
        Ok(UnaryParams {
            pi,
            beta,
            groups,
            cpg,
        })
    }

    /// pi = 0 (confidence 0.5 everywhere) and beta = 0.
    pub fn zeros(groups: usize, cpg: usize) -> Result<Self> {
        UnaryParams::new(groups, cpg, vec![0.0; groups * cpg], vec![0.0; groups])
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn channels_per_group(&self) -> usize {
        self.cpg
    }

    pub fn pi_group(&self, group: usize) -> &[f64] {
        &self.pi[group * self.cpg..(group + 1) * self.cpg]
    }
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Evaluates the unary confidence f(x_i) = sigmoid(pi_g . x_i) for every
/// node and group. Output is node-major: `out[node * groups + group]`.
pub fn unary_values(map: &FeatureMap, params: &UnaryParams) -> Result<Vec<f64>> {
    if params.groups != map.groups() || params.cpg != map.channels_per_group() {
        return Err(Error::InvalidArgument(format!(
            "unary parameters {}x{} do not match map groups {}x{}",
            params.groups,
            params.cpg,
            map.groups(),
            map.channels_per_group()
        )));
    }
    let n = map.n_nodes();
    let groups = params.groups;
    let mut out = vec![0.0; n * groups];
    for node in 0..n {
        for g in 0..groups {
            let slice = map.group_slice(node, g);
            let pi = params.pi_group(g);
            let dot: f64 = slice.iter().zip(pi).map(|(x, p)| x * p).sum();
            out[node * groups + g] = sigmoid(dot);
        }
    }
    Ok(out)
}
