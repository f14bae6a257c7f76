//! Runtime verification of the linear-complexity claim.
//!
//! Wall-clock medians are advisory (the log-log slope over a size sweep
//! should sit near 1); the deterministic edge-visit counters are the hard
//! assertion: each DP direction touches every tree edge exactly once per
//! accumulator array per group, so visits are `2 (N - 1)` per group per
//! direction no matter what the scheduler does.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::feature_map::FeatureMap;
use crate::grid_graph::GridGraph;
use crate::rng::SplitMix64;
use crate::spanning::mst;
use crate::tree_filter::forward_v2;

/// Points below this are considered timer noise and dropped.
const TIMER_FLOOR_NS: u128 = 100;

#[derive(Debug, Clone)]
pub struct BenchRow {
    pub n_nodes: usize,
    /// Median wall time of (MST construction + filter) over the repeats.
    pub median_ns: u128,
    /// Filter DP edge visits, both directions, all groups.
    pub edge_visits: u64,
    /// Edges examined while building the spanning tree.
    pub construct_edge_visits: u64,
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// Least-squares slope of log(time) against log(nodes).
    pub slope: f64,
    pub channels: usize,
    pub groups: usize,
    /// Sizes dropped because their median hit the timer floor.
    pub dropped: usize,
}

/// Least-squares slope of y against x.
pub fn fit_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::InvalidArgument(
            "slope fit needs at least two points".into(),
        ));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    if den == 0.0 {
        return Err(Error::InvalidArgument("degenerate abscissa".into()));
    }
    Ok(num / den)
}

fn synthetic_instance(h: usize, w: usize, channels: usize, groups: usize, seed: u64) -> Result<(FeatureMap, GridGraph)> {
    let mut rng = SplitMix64::new(seed);
    let map = FeatureMap::new(h, w, channels, (0..h * w * channels).map(|_| rng.next_f64()).collect())?
        .with_groups(groups)?;
    let graph = GridGraph::weighted_from(&map)?;
    Ok((map, graph))
}

/// Times (MST + filter) across grid sizes and fits the scaling exponent.
///
/// Needs at least 4 strictly growing sizes spanning a 16x node range and
/// at least 5 repeats; one warmup run per size is discarded.
pub fn run_scaling_bench(
    sizes: &[(usize, usize)],
    channels: usize,
    groups: usize,
    repeats: usize,
    exec: Exec,
) -> Result<BenchReport> {
    if sizes.len() < 4 {
        return Err(Error::InvalidArgument(format!(
            "{} sizes given, need at least 4",
            sizes.len()
        )));
    }
    if repeats < 5 {
        return Err(Error::InvalidArgument(format!(
            "{repeats} repeats given, need at least 5"
        )));
    }
    if channels == 0 || groups == 0 || !channels.is_multiple_of(groups) {
        return Err(Error::InvalidArgument(format!(
            "groups {groups} do not divide channels {channels}"
        )));
    }
    let counts: Vec<usize> = sizes.iter().map(|&(h, w)| h * w).collect();
    if counts.windows(2).any(|p| p[1] <= p[0]) {
        return Err(Error::InvalidArgument("sizes must strictly increase".into()));
    }
    if counts[counts.len() - 1] < 16 * counts[0] {
        return Err(Error::InvalidArgument(
            "sizes must span at least a 16x node range".into(),
        ));
    }

    let mut rows = Vec::with_capacity(sizes.len());
    let mut dropped = 0;
    for (i, &(h, w)) in sizes.iter().enumerate() {
        let (map, graph) = synthetic_instance(h, w, channels, groups, 0xBE17 ^ i as u64)?;
        let unary = vec![0.5; map.n_nodes() * groups];
        let beta = vec![0.0; groups];

        let run = || -> Result<(u128, u64, u64)> {
            let start = Instant::now();
            let tree = mst(&graph, 0)?;
            let state = forward_v2(&map, &tree, &graph, &unary, &beta, exec)?;
            let elapsed = start.elapsed().as_nanos();
            Ok((
                elapsed,
                state.work.up_edge_visits + state.work.down_edge_visits,
                tree.build_edge_visits,
            ))
        };
        run()?; // warmup
        let mut times = Vec::with_capacity(repeats);
        let mut edge_visits = 0;
        let mut construct_visits = 0;
        for _ in 0..repeats {
            let (t, ev, cv) = run()?;
            times.push(t);
            edge_visits = ev;
            construct_visits = cv;
        }
        times.sort();
        let median = times[times.len() / 2];
        if median < TIMER_FLOOR_NS {
            dropped += 1;
            continue;
        }
        rows.push(BenchRow {
            n_nodes: h * w,
            median_ns: median,
            edge_visits,
            construct_edge_visits: construct_visits,
        });
    }

    if rows.len() < 2 {
        return Err(Error::InvalidArgument(
            "too few usable sizes after dropping timer-floor points".into(),
        ));
    }
    let xs: Vec<f64> = rows.iter().map(|r| (r.n_nodes as f64).ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| (r.median_ns as f64).ln()).collect();
    let slope = fit_slope(&xs, &ys)?;
    Ok(BenchReport {
        rows,
        slope,
        channels,
        groups,
        dropped,
    })
}

/// Times the filter across channel counts at a fixed grid size.
///
/// Returns `(channels, median_ns)` rows and the log-log slope against the
/// channel count.
pub fn run_channel_bench(
    size: (usize, usize),
    channel_counts: &[usize],
    repeats: usize,
    exec: Exec,
) -> Result<(Vec<(usize, u128)>, f64)> {
    if channel_counts.len() < 2 || repeats < 5 {
        return Err(Error::InvalidArgument(
            "need at least 2 channel counts and 5 repeats".into(),
        ));
    }
    let (h, w) = size;
    let mut rows = Vec::new();
    for (i, &channels) in channel_counts.iter().enumerate() {
        let (map, graph) = synthetic_instance(h, w, channels, 1, 0xC8A ^ i as u64)?;
        let unary = vec![0.5; map.n_nodes()];
        let beta = vec![0.0];
        let tree = mst(&graph, 0)?;
        let run = || -> Result<u128> {
            let start = Instant::now();
            forward_v2(&map, &tree, &graph, &unary, &beta, exec)?;
            Ok(start.elapsed().as_nanos())
        };
        run()?;
        let mut times = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            times.push(run()?);
        }
        times.sort();
        rows.push((channels, times[times.len() / 2]));
    }
    let xs: Vec<f64> = rows.iter().map(|r| (r.0 as f64).ln()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| (r.1 as f64).ln()).collect();
    let slope = fit_slope(&xs, &ys)?;
    Ok((rows, slope))
}
