//! Desk-scale end-to-end learning on synthetic denoising tasks.
//!
//! The task: a piecewise-constant image (random axis-aligned rectangles)
//! plus Gaussian noise. The learner filters the noisy image guided by
//! itself and trains pi, beta, and a guided-feature scale by plain
//! gradient descent on the reconstruction error. Region boundaries are the
//! structures the filter should preserve while averaging the noise away.
//!
//! Training can keep the deterministic minimum spanning tree fixed or
//! resample the randomized tree every step; validation always runs under
//! the minimum spanning tree so that inference stays deterministic either
//! way.

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::feature_map::FeatureMap;
use crate::gradients::backward;
use crate::grid_graph::{joint_affinity, unary_values, GridGraph, UnaryParams};
use crate::rng::{mix, SplitMix64};
use crate::spanning::{mst, sample_random_spanning_tree, SpanningTree};
use crate::tree_filter::forward_v2;

/// Synthetic denoising task description.
#[derive(Debug, Clone)]
pub struct ToyTask {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Rectangles defining the piecewise-constant clean image; the first
    /// one is the full canvas, so 1 means a constant image.
    pub n_regions: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for ToyTask {
    fn default() -> Self {
        ToyTask {
            height: 16,
            width: 16,
            channels: 2,
            n_regions: 4,
            noise_sigma: 0.2,
            seed: 0,
        }
    }
}

/// Which spanning tree drives training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TreeMode {
    /// Deterministic minimum spanning tree, built once and kept.
    Mst,
    /// Randomized tree resampled from the current weights every step.
    LearnableRandom,
}

impl std::fmt::Display for TreeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TreeMode::Mst => "mst",
            TreeMode::LearnableRandom => "random",
        })
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub tree_mode: TreeMode,
    /// Seed stream for per-step tree sampling.
    pub sample_seed: u64,
    pub groups: usize,
    /// Initial beta for every group; large values start near identity.
    pub beta_init: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 160,
            learning_rate: 1.0,
            tree_mode: TreeMode::Mst,
            sample_seed: 0,
            groups: 1,
            beta_init: 0.0,
        }
    }
}

/// Training history and outcome.
#[derive(Debug, Clone)]
pub struct TrainTrace {
    /// Training loss per step, before each update.
    pub losses: Vec<f64>,
    pub final_params: UnaryParams,
    pub final_scale: f64,
    /// Loss of the initial parameters under MST inference.
    pub initial_validation_loss: f64,
    /// Loss of the trained parameters under MST inference.
    pub validation_loss: f64,
    /// Unfiltered reference: mse(noisy, clean).
    pub baseline_loss: f64,
}

/// Draws the clean/noisy pair. Deterministic in `task.seed`.
pub fn generate_task(task: &ToyTask) -> Result<(FeatureMap, FeatureMap)> {
    if task.height == 0 || task.width == 0 || task.channels == 0 || task.n_regions == 0 {
        return Err(Error::InvalidArgument("degenerate task size".into()));
    }
    if !(task.noise_sigma >= 0.0 && task.noise_sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "noise sigma {} must be finite and nonnegative",
            task.noise_sigma
        )));
    }
    let (h, w, c) = (task.height, task.width, task.channels);
    let mut rng = SplitMix64::stream(task.seed, &[0x7A5C]);
    let mut clean = vec![0.0; h * w * c];

    for region in 0..task.n_regions {
        let (y0, y1, x0, x1) = if region == 0 {
            (0, h, 0, w)
        } else {
            let ya = rng.next_index(h);
            let yb = rng.next_index(h);
            let xa = rng.next_index(w);
            let xb = rng.next_index(w);
            (ya.min(yb), ya.max(yb) + 1, xa.min(xb), xa.max(xb) + 1)
        };
        let color: Vec<f64> = (0..c).map(|_| rng.next_f64()).collect();
        for y in y0..y1 {
            for x in x0..x1 {
                let base = (y * w + x) * c;
                clean[base..base + c].copy_from_slice(&color);
            }
        }
    }

    let mut noise_rng = SplitMix64::stream(task.seed, &[0x901E]);
    let noisy: Vec<f64> = clean
        .iter()
        .map(|&v| v + task.noise_sigma * noise_rng.next_gaussian())
        .collect();

    Ok((
        FeatureMap::new(h, w, c, noisy)?,
        FeatureMap::new(h, w, c, clean)?,
    ))
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64
}

struct StepOutput {
    loss: f64,
    d_pi: Vec<f64>,
    d_beta: Vec<f64>,
    d_scale: f64,
}

/// Joint weights for the current guided scale: dist(x) + dist(scale * x).
fn joint_weights(noisy: &FeatureMap, scale: f64) -> Result<(GridGraph, FeatureMap)> {
    let guided = noisy.scaled(scale)?;
    let wx = GridGraph::weighted_from(noisy)?;
    let wg = GridGraph::weighted_from(&guided)?;
    Ok((joint_affinity(&wx, &wg)?, guided))
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    noisy: &FeatureMap,
    clean: &FeatureMap,
    params: &UnaryParams,
    tree: &SpanningTree,
    graph: &GridGraph,
    guided: &FeatureMap,
    exec: Exec,
    with_grads: bool,
) -> Result<StepOutput> {
    let unary = unary_values(noisy, params)?;
    let state = forward_v2(noisy, tree, graph, &unary, &params.beta, exec)?;
    let loss = mse(state.output.data(), clean.data());
    if !with_grads {
        return Ok(StepOutput {
            loss,
            d_pi: Vec::new(),
            d_beta: Vec::new(),
            d_scale: 0.0,
        });
    }
    let n_values = state.output.data().len() as f64;
    let dy: Vec<f64> = state
        .output
        .data()
        .iter()
        .zip(clean.data())
        .map(|(y, t)| 2.0 * (y - t) / n_values)
        .collect();
    let bundle = backward(
        &state, tree, graph, &unary, params, noisy, guided, &dy, exec,
    )?;
    // guided = scale * noisy, so the scale gradient contracts d_guided
    // against the noisy map
    let d_scale: f64 = bundle
        .d_guided
        .iter()
        .zip(noisy.data())
        .map(|(dg, x)| dg * x)
        .sum();
    Ok(StepOutput {
        loss,
        d_pi: bundle.d_pi,
        d_beta: bundle.d_beta,
        d_scale,
    })
}

/// MST inference loss for a fixed parameter set.
fn validate(
    noisy: &FeatureMap,
    clean: &FeatureMap,
    params: &UnaryParams,
    scale: f64,
    exec: Exec,
) -> Result<f64> {
    let (graph, guided) = joint_weights(noisy, scale)?;
    let tree = mst(&graph, 0)?;
    Ok(evaluate(noisy, clean, params, &tree, &graph, &guided, exec, false)?.loss)
}

/// Plain gradient descent on mse(filter(noisy | noisy), clean).
pub fn train(task: &ToyTask, config: &TrainConfig, exec: Exec) -> Result<TrainTrace> {
    if config.steps == 0 {
        return Err(Error::InvalidArgument("steps must be at least 1".into()));
    }
    if !(config.learning_rate >= 0.0 && config.learning_rate.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "learning rate {} must be finite and nonnegative",
            config.learning_rate
        )));
    }
    if config.groups == 0 || !task.channels.is_multiple_of(config.groups) {
        return Err(Error::InvalidArgument(format!(
            "groups {} do not divide channels {}",
            config.groups, task.channels
        )));
    }
    let (noisy, clean) = generate_task(task)?;
    let noisy = noisy.with_groups(config.groups)?;
    let clean = clean.with_groups(config.groups)?;
    let cpg = task.channels / config.groups;

    let mut params = UnaryParams::new(
        config.groups,
        cpg,
        vec![0.0; config.groups * cpg],
        vec![config.beta_init; config.groups],
    )?;
    let mut scale = 1.0f64;

    let baseline_loss = mse(noisy.data(), clean.data());
    let initial_validation_loss = validate(&noisy, &clean, &params, scale, exec)?;

    // the MST topology is frozen at the initial weights; the randomized
    // mode resamples from the current weights every step
    let fixed_tree = match config.tree_mode {
        TreeMode::Mst => {
            let (graph, _) = joint_weights(&noisy, scale)?;
            Some(mst(&graph, 0)?)
        }
        TreeMode::LearnableRandom => None,
    };

    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let (graph, guided) = joint_weights(&noisy, scale)?;
        let tree = match (&fixed_tree, config.tree_mode) {
            (Some(t), _) => t.clone(),
            (None, _) => sample_random_spanning_tree(
                &graph,
                0,
                mix(&[config.sample_seed, step as u64]),
            )?,
        };
        let out = evaluate(&noisy, &clean, &params, &tree, &graph, &guided, exec, true)?;
        if !out.loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        losses.push(out.loss);
        for (p, d) in params.pi.iter_mut().zip(&out.d_pi) {
            *p -= config.learning_rate * d;
        }
        for (b, d) in params.beta.iter_mut().zip(&out.d_beta) {
            *b -= config.learning_rate * d;
        }
        scale -= config.learning_rate * out.d_scale;
        if params.pi.iter().chain(params.beta.iter()).any(|v| !v.is_finite())
            || !scale.is_finite()
        {
            return Err(Error::Diverged { step });
        }
    }

    let validation_loss = validate(&noisy, &clean, &params, scale, exec)?;
    Ok(TrainTrace {
        losses,
        final_params: params,
        final_scale: scale,
        initial_validation_loss,
        validation_loss,
        baseline_loss,
    })
}

/// One seed's outcome under both tree modes.
#[derive(Debug, Clone)]
pub struct CompareRow {
    pub seed: u64,
    pub mst_final: f64,
    pub random_final: f64,
    pub initial: f64,
    pub baseline: f64,
}

#[derive(Debug, Clone)]
pub struct CompareSummary {
    pub rows: Vec<CompareRow>,
    pub mean_mst: f64,
    pub mean_random: f64,
    pub mean_initial: f64,
    pub mean_baseline: f64,
}

/// Runs [`train`] under both tree modes across `n_seeds` paired tasks.
pub fn compare_tree_modes(
    task: &ToyTask,
    config: &TrainConfig,
    n_seeds: usize,
    exec: Exec,
) -> Result<CompareSummary> {
    if n_seeds == 0 {
        return Err(Error::InvalidArgument("need at least one seed".into()));
    }
    let mut rows = Vec::with_capacity(n_seeds);
    for k in 0..n_seeds as u64 {
        let seeded_task = ToyTask {
            seed: task.seed.wrapping_add(k),
            ..task.clone()
        };
        let mst_cfg = TrainConfig {
            tree_mode: TreeMode::Mst,
            sample_seed: config.sample_seed.wrapping_add(k),
            ..config.clone()
        };
        let random_cfg = TrainConfig {
            tree_mode: TreeMode::LearnableRandom,
            ..mst_cfg.clone()
        };
        let mst_trace = train(&seeded_task, &mst_cfg, exec)?;
        let random_trace = train(&seeded_task, &random_cfg, exec)?;
        rows.push(CompareRow {
            seed: seeded_task.seed,
            mst_final: mst_trace.validation_loss,
            random_final: random_trace.validation_loss,
            initial: mst_trace.initial_validation_loss,
            baseline: mst_trace.baseline_loss,
        });
    }
    let mean = |f: fn(&CompareRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    Ok(CompareSummary {
        mean_mst: mean(|r| r.mst_final),
        mean_random: mean(|r| r.random_final),
        mean_initial: mean(|r| r.initial),
        mean_baseline: mean(|r| r.baseline),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_keeps_noisy_equal_to_clean() {
        let task = ToyTask {
            noise_sigma: 0.0,
            ..ToyTask::default()
        };
        let (noisy, clean) = generate_task(&task).unwrap();
        assert_eq!(noisy.data(), clean.data());
    }

    #[test]
    fn single_region_is_a_constant_image() {
        let task = ToyTask {
            n_regions: 1,
            noise_sigma: 0.0,
            ..ToyTask::default()
        };
        let (_, clean) = generate_task(&task).unwrap();
        let first = clean.node_row(0).to_vec();
        for node in 0..clean.n_nodes() {
            assert_eq!(clean.node_row(node), first.as_slice());
        }
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let task = ToyTask::default();
        let (n1, c1) = generate_task(&task).unwrap();
        let (n2, c2) = generate_task(&task).unwrap();
        assert_eq!(n1.data(), n2.data());
        assert_eq!(c1.data(), c2.data());
        let other = generate_task(&ToyTask { seed: 1, ..task }).unwrap();
        assert_ne!(n1.data(), other.0.data());
    }

    #[test]
    fn degenerate_task_is_rejected() {
        let task = ToyTask {
            height: 0,
            ..ToyTask::default()
        };
        assert!(matches!(generate_task(&task), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn zero_learning_rate_keeps_the_loss_trace_constant() {
        let task = ToyTask {
            height: 8,
            width: 8,
            ..ToyTask::default()
        };
        let config = TrainConfig {
            steps: 5,
            learning_rate: 0.0,
            tree_mode: TreeMode::Mst,
            ..TrainConfig::default()
        };
        let trace = train(&task, &config, Exec::sequential()).unwrap();
        for loss in &trace.losses {
            assert_eq!(loss.to_bits(), trace.losses[0].to_bits());
        }
    }

    #[test]
    fn huge_initial_beta_starts_at_the_unfiltered_loss() {
        let task = ToyTask {
            height: 8,
            width: 8,
            ..ToyTask::default()
        };
        let config = TrainConfig {
            steps: 1,
            learning_rate: 0.0,
            beta_init: 50.0,
            ..TrainConfig::default()
        };
        let trace = train(&task, &config, Exec::sequential()).unwrap();
        assert!(
            (trace.losses[0] - trace.baseline_loss).abs() < 1e-12,
            "{} vs {}",
            trace.losses[0],
            trace.baseline_loss
        );
    }

    #[test]
    fn training_reduces_the_loss_on_default_task() {
        let trace = train(&ToyTask::default(), &TrainConfig::default(), Exec::parallel()).unwrap();
        assert!(
            trace.validation_loss < 0.5 * trace.initial_validation_loss,
            "final {} initial {}",
            trace.validation_loss,
            trace.initial_validation_loss
        );
        assert!(trace.validation_loss < trace.baseline_loss);
    }

    #[test]
    fn training_is_reproducible() {
        let task = ToyTask {
            height: 10,
            width: 10,
            ..ToyTask::default()
        };
        let config = TrainConfig {
            steps: 20,
            tree_mode: TreeMode::LearnableRandom,
            ..TrainConfig::default()
        };
        let a = train(&task, &config, Exec::sequential()).unwrap();
        let b = train(&task, &config, Exec::sequential()).unwrap();
        assert_eq!(a.validation_loss.to_bits(), b.validation_loss.to_bits());
        for (x, y) in a.losses.iter().zip(&b.losses) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn validation_is_bitwise_deterministic() {
        let task = ToyTask {
            height: 8,
            width: 8,
            ..ToyTask::default()
        };
        let config = TrainConfig {
            steps: 10,
            ..TrainConfig::default()
        };
        let trace = train(&task, &config, Exec::sequential()).unwrap();
        let (noisy, clean) = generate_task(&task).unwrap();
        let noisy = noisy.with_groups(config.groups).unwrap();
        let clean = clean.with_groups(config.groups).unwrap();
        let v1 = validate(&noisy, &clean, &trace.final_params, trace.final_scale, Exec::sequential()).unwrap();
        let v2 = validate(&noisy, &clean, &trace.final_params, trace.final_scale, Exec::sequential()).unwrap();
        assert_eq!(v1.to_bits(), v2.to_bits());
        assert_eq!(v1.to_bits(), trace.validation_loss.to_bits());
    }

    #[test]
    fn zero_noise_task_reaches_near_zero_loss_in_both_modes() {
        // nothing to denoise: beta grows until the filter is near-identity
        let task = ToyTask {
            height: 8,
            width: 8,
            noise_sigma: 0.0,
            ..ToyTask::default()
        };
        let config = TrainConfig {
            steps: 100,
            learning_rate: 3.0,
            ..TrainConfig::default()
        };
        let summary = compare_tree_modes(&task, &config, 2, Exec::sequential()).unwrap();
        assert!(summary.mean_baseline == 0.0);
        assert!(summary.mean_mst < 0.1 * summary.mean_initial, "{}", summary.mean_mst);
        assert!(summary.mean_random < 0.1 * summary.mean_initial, "{}", summary.mean_random);
    }

    #[test]
    fn uniform_sampling_baseline_still_filters_noise() {
        // Uniform incident-edge sampling is the contraction skeleton run on
        // a zero-weight graph. It serves as the structure-blind baseline:
        // the filter weights still carry the real distances, so filtering
        // under either tree beats the unfiltered image.
        let mut weighted_total = 0.0;
        let mut uniform_total = 0.0;
        let mut baseline_total = 0.0;
        for seed in 0..20u64 {
            let task = ToyTask {
                height: 10,
                width: 10,
                seed,
                ..ToyTask::default()
            };
            let (noisy, clean) = generate_task(&task).unwrap();
            let (graph, guided) = joint_weights(&noisy, 1.0).unwrap();
            let params = UnaryParams::zeros(1, task.channels).unwrap();
            let mut flat = graph.clone();
            flat.set_weights(1, vec![0.0; graph.n_edges()]).unwrap();
            let weighted = sample_random_spanning_tree(&graph, 0, seed).unwrap();
            let uniform = sample_random_spanning_tree(&flat, 0, seed).unwrap();
            weighted_total +=
                evaluate(&noisy, &clean, &params, &weighted, &graph, &guided, Exec::sequential(), false)
                    .unwrap()
                    .loss;
            uniform_total +=
                evaluate(&noisy, &clean, &params, &uniform, &graph, &guided, Exec::sequential(), false)
                    .unwrap()
                    .loss;
            baseline_total += mse(noisy.data(), clean.data());
        }
        assert!(weighted_total < baseline_total, "{weighted_total} vs {baseline_total}");
        assert!(uniform_total < baseline_total, "{uniform_total} vs {baseline_total}");
    }

    #[test]
    fn comparison_is_reproducible() {
        let task = ToyTask {
            height: 8,
            width: 8,
            ..ToyTask::default()
        };
        let config = TrainConfig {
            steps: 8,
            ..TrainConfig::default()
        };
        let a = compare_tree_modes(&task, &config, 2, Exec::sequential()).unwrap();
        let b = compare_tree_modes(&task, &config, 2, Exec::sequential()).unwrap();
        assert_eq!(a.mean_mst.to_bits(), b.mean_mst.to_bits());
        assert_eq!(a.mean_random.to_bits(), b.mean_random.to_bits());
    }
}
