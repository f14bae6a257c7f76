//! Command-line front door.
//!
//! Exit codes are a stable contract: 0 on success, 1 when a verification
//! suite fails, 2 on usage or file errors. Every subcommand that takes a
//! seed is bit-reproducible across runs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::bench::run_scaling_bench;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::feature_map::{from_image, load_fmap, save_fmap, to_image, FeatureMap};
use crate::gradients::{
    finite_difference_check, pipeline_grad, pipeline_loss, FdPoint, LossKind, DEFAULT_FD_STEP,
};
use crate::grid_graph::{unary_values, GridGraph, UnaryParams};
use crate::mrf_oracle::{verify_lemma1, verify_lemma2, verify_lemma3, TreeMRF};
use crate::rng::SplitMix64;
use crate::spanning::{mst, sample_random_spanning_tree, SpanningTree};
use crate::toy_learner::{compare_tree_modes, train, ToyTask, TrainConfig, TreeMode};
use crate::tree_filter::{
    affinity_map, forward_bruteforce, forward_v1, forward_v2, AffinityMode,
};

#[derive(Parser)]
#[command(
    name = "treefilter",
    version,
    about = "Structure-preserving tree filtering on image grids"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Filter an image or feature map, self-guided.
    Filter(FilterArgs),
    /// Emit per-mode affinity heatmaps for a marked pixel.
    Affinity(AffinityArgs),
    /// Dump a spanning tree as a text edge list.
    Tree(TreeArgs),
    /// Measure runtime scaling across grid sizes.
    Bench(BenchArgs),
    /// Train the toy denoiser and emit the loss trace.
    TrainToy(TrainToyArgs),
    /// Compare spanning-tree modes across seeds.
    CompareTrees(CompareTreesArgs),
    /// Check analytic gradients against finite differences.
    CheckGradients(CheckGradientsArgs),
    /// Run the lemma, oracle, and gradient verification suites.
    VerifyLemmas(VerifyLemmasArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TreeKind {
    Mst,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FilterVersion {
    V1,
    V2,
}

#[derive(Args)]
struct FilterArgs {
    /// Input image (.pgm/.ppm) or feature map (.fmap).
    #[arg(long, short)]
    input: PathBuf,
    /// Output path; format chosen by extension.
    #[arg(long, short)]
    output: PathBuf,
    /// Path-length potential applied to every group.
    #[arg(long, default_value_t = 0.0)]
    beta: f64,
    /// Channel groups; clamped to the channel count when it does not divide.
    #[arg(long, default_value_t = 16)]
    groups: usize,
    #[arg(long, value_enum, default_value_t = TreeKind::Mst)]
    tree: TreeKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = FilterVersion::V2)]
    version: FilterVersion,
    /// Worker threads; 1 keeps everything on the calling thread.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args)]
struct AffinityArgs {
    #[arg(long, short)]
    input: PathBuf,
    /// Marked pixel as "x,y".
    #[arg(long, value_parser = parse_mark)]
    mark: (usize, usize),
    /// Prefix for the emitted heatmaps: <prefix>-unary.pgm etc.
    #[arg(long, short)]
    output_prefix: PathBuf,
    /// Also dump the raw probabilities as <prefix>-<mode>.fmap.
    #[arg(long, default_value_t = false)]
    raw: bool,
    #[arg(long, default_value_t = 0.0)]
    beta: f64,
    #[arg(long, default_value_t = 16)]
    groups: usize,
    #[arg(long, value_enum, default_value_t = TreeKind::Mst)]
    tree: TreeKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TreeArgs {
    #[arg(long, short)]
    input: PathBuf,
    /// Output edge-list file; "-" writes to stdout.
    #[arg(long, short)]
    output: PathBuf,
    #[arg(long, value_enum, default_value_t = TreeKind::Mst)]
    tree: TreeKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Weight group driving the construction.
    #[arg(long, default_value_t = 0)]
    group: usize,
    #[arg(long, default_value_t = 16)]
    groups: usize,
}

#[derive(Args)]
struct BenchArgs {
    /// Comma-separated square grid sides.
    #[arg(long, value_parser = parse_sides, default_value = "16,32,64,128,256")]
    sizes: std::vec::Vec<usize>,
    #[arg(long, default_value_t = 16)]
    channels: usize,
    #[arg(long, default_value_t = 16)]
    groups: usize,
    #[arg(long, default_value_t = 7)]
    repeats: usize,
    /// Enable the level-parallel mode instead of the sequential default.
    #[arg(long, default_value_t = false)]
    parallel: bool,
    /// CSV destination; "-" writes to stdout.
    #[arg(long, short, default_value = "-")]
    output: PathBuf,
}

#[derive(Args)]
struct TrainToyArgs {
    #[arg(long, default_value_t = 16)]
    height: usize,
    #[arg(long, default_value_t = 16)]
    width: usize,
    #[arg(long, default_value_t = 2)]
    channels: usize,
    #[arg(long, default_value_t = 4)]
    regions: usize,
    #[arg(long, default_value_t = 0.2)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 160)]
    steps: usize,
    #[arg(long, default_value_t = 1.0)]
    lr: f64,
    #[arg(long, value_enum, default_value_t = TreeKind::Mst)]
    tree_mode: TreeKind,
    #[arg(long, default_value_t = 1)]
    groups: usize,
    /// CSV destination for the step,loss trace; "-" writes to stdout.
    #[arg(long, short, default_value = "-")]
    output: PathBuf,
}

#[derive(Args)]
struct CompareTreesArgs {
    #[arg(long, default_value_t = 16)]
    height: usize,
    #[arg(long, default_value_t = 16)]
    width: usize,
    #[arg(long, default_value_t = 2)]
    channels: usize,
    #[arg(long, default_value_t = 4)]
    regions: usize,
    #[arg(long, default_value_t = 0.2)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 160)]
    steps: usize,
    #[arg(long, default_value_t = 1.0)]
    lr: f64,
    #[arg(long, default_value_t = 1)]
    groups: usize,
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    /// CSV destination for seed,mode,final_loss rows.
    #[arg(long, short, default_value = "-")]
    output: PathBuf,
}

#[derive(Args)]
struct CheckGradientsArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Random pipeline instances to probe.
    #[arg(long, default_value_t = 4)]
    instances: usize,
}

#[derive(Args)]
struct VerifyLemmasArgs {
    #[arg(long, default_value_t = 50)]
    instances: usize,
    #[arg(long, default_value_t = 1e-12)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Self-test: inject a weight perturbation that must make lemma 1 fail.
    #[arg(long, default_value_t = false)]
    perturb: bool,
}

fn parse_mark(text: &str) -> std::result::Result<(usize, usize), String> {
    let (x, y) = text
        .split_once(',')
        .ok_or_else(|| format!("mark {text:?} is not of the form x,y"))?;
    Ok((
        x.trim().parse().map_err(|e| format!("bad x: {e}"))?,
        y.trim().parse().map_err(|e| format!("bad y: {e}"))?,
    ))
}

fn parse_sides(text: &str) -> std::result::Result<Vec<usize>, String> {
    text.split(',')
        .map(|s| s.trim().parse().map_err(|e| format!("bad size {s:?}: {e}")))
        .collect()
}

fn is_fmap(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("fmap"))
}

fn load_input(path: &Path) -> Result<FeatureMap> {
    if is_fmap(path) {
        load_fmap(path)
    } else {
        from_image(path)
    }
}

fn write_output(map: &FeatureMap, path: &Path) -> Result<()> {
    if is_fmap(path) {
        save_fmap(map, path)
    } else {
        to_image(map, path)
    }
}

/// Clamps the group count to the channel count when it does not divide.
fn effective_groups(requested: usize, channels: usize) -> usize {
    if requested == 0 || !channels.is_multiple_of(requested) {
        eprintln!(
            "warning: groups {requested} does not divide channels {channels}; using {channels}"
        );
        channels
    } else {
        requested
    }
}

fn build_tree(graph: &GridGraph, kind: TreeKind, group: usize, seed: u64) -> Result<SpanningTree> {
    match kind {
        TreeKind::Mst => mst(graph, group),
        TreeKind::Random => sample_random_spanning_tree(graph, group, seed),
    }
}

fn exec_for(threads: usize) -> Exec {
    if threads <= 1 {
        return Exec::sequential();
    }
    #[cfg(feature = "parallel")]
    {
        // a process-global pool; repeated calls with the same size are fine
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
        Exec::parallel()
    }
    #[cfg(not(feature = "parallel"))]
    {
        eprintln!("warning: built without the parallel feature; --threads ignored");
        Exec::sequential()
    }
}

fn write_text(path: &Path, content: &str) -> Result<()> {
    if path == Path::new("-") {
        print!("{content}");
        Ok(())
    } else {
        std::fs::write(path, content).map_err(|e| Error::io(path, e))
    }
}

fn cmd_filter(args: &FilterArgs) -> Result<()> {
    let exec = exec_for(args.threads);
    let map = load_input(&args.input)?;
    let groups = effective_groups(args.groups, map.channels());
    let map = map.with_groups(groups)?;
    let graph = GridGraph::weighted_from(&map)?;
    let tree = build_tree(&graph, args.tree, 0, args.seed)?;
    let state = match args.version {
        FilterVersion::V1 => forward_v1(&map, &tree, &graph, exec)?,
        FilterVersion::V2 => {
            let params = UnaryParams::new(
                groups,
                map.channels_per_group(),
                vec![0.0; groups * map.channels_per_group()],
                vec![args.beta; groups],
            )?;
            let unary = unary_values(&map, &params)?;
            forward_v2(&map, &tree, &graph, &unary, &params.beta, exec)?
        }
    };
    write_output(&state.output, &args.output)
}

fn cmd_affinity(args: &AffinityArgs) -> Result<()> {
    let map = load_input(&args.input)?;
    let groups = effective_groups(args.groups, map.channels());
    let map = map.with_groups(groups)?;
    let (x, y) = args.mark;
    if x >= map.width() || y >= map.height() {
        return Err(Error::InvalidArgument(format!(
            "mark ({x}, {y}) outside {}x{} image",
            map.width(),
            map.height()
        )));
    }
    let node = (y * map.width() + x) as u32;
    let graph = GridGraph::weighted_from(&map)?;
    let tree = build_tree(&graph, args.tree, 0, args.seed)?;
    let params = UnaryParams::new(
        groups,
        map.channels_per_group(),
        vec![0.0; groups * map.channels_per_group()],
        vec![args.beta; groups],
    )?;
    let unary = unary_values(&map, &params)?;

    for (mode, tag) in [
        (AffinityMode::UnaryOnly, "unary"),
        (AffinityMode::PairwiseOnly, "pairwise"),
        (AffinityMode::Full, "full"),
    ] {
        let aff = affinity_map(&tree, &graph, &unary, &params.beta, node, mode)?;
        if args.raw {
            let raw_path = suffixed(&args.output_prefix, &format!("-{tag}.fmap"));
            save_fmap(&aff, &raw_path)?;
        }
        for g in 0..groups {
            // max-normalize each group plane for visibility
            let mut plane: Vec<f64> = (0..map.n_nodes()).map(|i| aff.value(i, g)).collect();
            let max = plane.iter().copied().fold(0.0, f64::max);
            for v in &mut plane {
                *v /= max;
            }
            let image = FeatureMap::new(map.height(), map.width(), 1, plane)?;
            let name = if groups == 1 {
                format!("-{tag}.pgm")
            } else {
                format!("-{tag}-g{g}.pgm")
            };
            to_image(&image, suffixed(&args.output_prefix, &name))?;
        }
    }
    Ok(())
}

fn suffixed(prefix: &Path, suffix: &str) -> PathBuf {
    let mut name = prefix.as_os_str().to_os_string();
    name.push(suffix);
    PathBuf::from(name)
}

fn cmd_tree(args: &TreeArgs) -> Result<()> {
    let map = load_input(&args.input)?;
    let groups = effective_groups(args.groups, map.channels());
    let map = map.with_groups(groups)?;
    if args.group >= groups {
        return Err(Error::InvalidArgument(format!(
            "group {} out of range for {groups} groups",
            args.group
        )));
    }
    let graph = GridGraph::weighted_from(&map)?;
    let tree = build_tree(&graph, args.tree, args.group, args.seed)?;
    let mut pairs: Vec<(u32, u32)> = tree
        .tree_edges
        .iter()
        .map(|e| (e.a.min(e.b), e.a.max(e.b)))
        .collect();
    pairs.sort();
    let mut out = String::new();
    for (a, b) in pairs {
        writeln!(out, "{a} {b}").unwrap();
    }
    write_text(&args.output, &out)
}

fn cmd_bench(args: &BenchArgs) -> Result<()> {
    let sizes: Vec<(usize, usize)> = args.sizes.iter().map(|&s| (s, s)).collect();
    let exec = if args.parallel {
        Exec::parallel()
    } else {
        Exec::sequential()
    };
    let report = run_scaling_bench(&sizes, args.channels, args.groups, args.repeats, exec)?;
    let mut out = String::from("n_nodes,median_ns,edge_visits\n");
    for row in &report.rows {
        writeln!(out, "{},{},{}", row.n_nodes, row.median_ns, row.edge_visits).unwrap();
    }
    write_text(&args.output, &out)?;
    eprintln!(
        "fitted log-log slope: {:.3} over {} sizes ({} dropped)",
        report.slope,
        report.rows.len(),
        report.dropped
    );
    Ok(())
}

fn cmd_train_toy(args: &TrainToyArgs) -> Result<()> {
    let task = ToyTask {
        height: args.height,
        width: args.width,
        channels: args.channels,
        n_regions: args.regions,
        noise_sigma: args.sigma,
        seed: args.seed,
    };
    let config = TrainConfig {
        steps: args.steps,
        learning_rate: args.lr,
        tree_mode: match args.tree_mode {
            TreeKind::Mst => TreeMode::Mst,
            TreeKind::Random => TreeMode::LearnableRandom,
        },
        sample_seed: args.seed,
        groups: args.groups,
        beta_init: 0.0,
    };
    let trace = train(&task, &config, Exec::sequential())?;
    let mut out = String::from("step,loss\n");
    for (step, loss) in trace.losses.iter().enumerate() {
        writeln!(out, "{step},{loss:.17e}").unwrap();
    }
    write_text(&args.output, &out)?;
    eprintln!(
        "baseline {:.6e} initial {:.6e} final validation {:.6e}",
        trace.baseline_loss, trace.initial_validation_loss, trace.validation_loss
    );
    Ok(())
}

fn cmd_compare_trees(args: &CompareTreesArgs) -> Result<()> {
    let task = ToyTask {
        height: args.height,
        width: args.width,
        channels: args.channels,
        n_regions: args.regions,
        noise_sigma: args.sigma,
        seed: args.seed,
    };
    let config = TrainConfig {
        steps: args.steps,
        learning_rate: args.lr,
        tree_mode: TreeMode::Mst,
        sample_seed: args.seed,
        groups: args.groups,
        beta_init: 0.0,
    };
    let summary = compare_tree_modes(&task, &config, args.seeds, Exec::sequential())?;
    let mut out = String::from("seed,mode,final_loss\n");
    for row in &summary.rows {
        writeln!(out, "{},mst,{:.17e}", row.seed, row.mst_final).unwrap();
        writeln!(out, "{},random,{:.17e}", row.seed, row.random_final).unwrap();
    }
    write_text(&args.output, &out)?;
    eprintln!(
        "mean mst {:.6e}, mean random {:.6e}, mean initial {:.6e}, mean baseline {:.6e}",
        summary.mean_mst, summary.mean_random, summary.mean_initial, summary.mean_baseline
    );
    Ok(())
}

fn random_fd_point(rng: &mut SplitMix64, h: usize, w: usize, groups: usize, cpg: usize) -> Result<FdPoint> {
    let channels = groups * cpg;
    let x = FeatureMap::new(
        h,
        w,
        channels,
        (0..h * w * channels).map(|_| rng.next_in(-1.0, 1.0)).collect(),
    )?
    .with_groups(groups)?;
    let guided = FeatureMap::new(
        h,
        w,
        channels,
        (0..h * w * channels).map(|_| rng.next_in(-1.0, 1.0)).collect(),
    )?
    .with_groups(groups)?;
    let params = UnaryParams::new(
        groups,
        cpg,
        (0..groups * cpg).map(|_| rng.next_in(-0.8, 0.8)).collect(),
        (0..groups).map(|_| rng.next_in(-0.5, 1.0)).collect(),
    )?;
    Ok(FdPoint { x, guided, params })
}

fn cmd_check_gradients(args: &CheckGradientsArgs) -> Result<i32> {
    let mut rng = SplitMix64::new(args.seed);
    let mut worst: Vec<(&str, f64)> = vec![("x", 0.0), ("g", 0.0), ("pi", 0.0), ("beta", 0.0)];
    for instance in 0..args.instances {
        let groups = 1 + instance % 2;
        let point = random_fd_point(&mut rng, 4, 4, groups, 2)?;
        let wx = GridGraph::weighted_from(&point.x)?;
        let wg = GridGraph::weighted_from(&point.guided)?;
        let joint = crate::grid_graph::joint_affinity(&wx, &wg)?;
        let tree = if instance % 2 == 0 {
            mst(&joint, 0)?
        } else {
            sample_random_spanning_tree(&joint, 0, args.seed ^ instance as u64)?
        };
        let loss = LossKind::SumOutputs;
        let analytic = pipeline_grad(&point, &tree, &loss, Exec::sequential())?;
        let report = finite_difference_check(
            |p| pipeline_loss(p, &tree, &loss, Exec::sequential()),
            &point,
            &analytic,
            DEFAULT_FD_STEP,
        )?;
        for (leg, err) in report.worst_by_leg() {
            for slot in &mut worst {
                if slot.0 == leg {
                    slot.1 = slot.1.max(err);
                }
            }
        }
    }
    println!("parameter  max_rel_error  tolerance");
    let mut failed = false;
    for (leg, err) in &worst {
        let ok = *err < args.tolerance;
        failed |= !ok;
        println!(
            "{leg:<9}  {err:<13.3e}  {:<9.1e} {}",
            args.tolerance,
            if ok { "ok" } else { "FAIL" }
        );
    }
    Ok(if failed { 1 } else { 0 })
}

/// Oracle-equivalence sweep: the DP against the quadratic reference.
fn oracle_equivalence(instances: usize, seed: u64, tolerance: f64) -> Result<(bool, f64)> {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let mut rng = SplitMix64::stream(seed, &[0x7AC1E, i as u64]);
        let h = 1 + rng.next_index(6);
        let w = 1 + rng.next_index(6);
        let groups = 1 + rng.next_index(2);
        let cpg = 1 + rng.next_index(2);
        let channels = groups * cpg;
        let map = FeatureMap::new(
            h,
            w,
            channels,
            (0..h * w * channels).map(|_| rng.next_in(-2.0, 2.0)).collect(),
        )?
        .with_groups(groups)?;
        let mut graph = GridGraph::build(h, w)?;
        let n_edges = graph.n_edges();
        graph.set_weights(
            groups,
            (0..n_edges * groups).map(|_| rng.next_in(0.0, 2.0)).collect(),
        )?;
        let tree = if i % 2 == 0 {
            mst(&graph, 0)?
        } else {
            sample_random_spanning_tree(&graph, 0, seed ^ i as u64)?
        };
        let unary: Vec<f64> = (0..h * w * groups).map(|_| rng.next_in(0.05, 0.95)).collect();
        let beta: Vec<f64> = (0..groups).map(|_| rng.next_in(-1.0, 2.0)).collect();
        let fast = forward_v2(&map, &tree, &graph, &unary, &beta, Exec::sequential())?;
        let slow = forward_bruteforce(&map, &tree, &graph, &unary, &beta)?;
        for (a, b) in fast.output.data().iter().zip(slow.output.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    Ok((worst <= tolerance, worst))
}

fn cmd_verify_lemmas(args: &VerifyLemmasArgs) -> Result<i32> {
    let mut all_pass = true;
    let mut print = |name: &str, pass: bool, worst: f64| {
        all_pass &= pass;
        println!(
            "{name:<22} {} (worst residual {worst:.3e})",
            if pass { "pass" } else { "FAIL" }
        );
    };

    let mut worst1 = 0.0f64;
    let mut worst2 = f64::MIN;
    let mut pass1 = true;
    let mut pass2 = true;
    for i in 0..args.instances {
        let mut rng = SplitMix64::stream(args.seed, &[0x1E44A, i as u64]);
        let (h, w) = [(2usize, 3usize), (2, 4), (3, 3), (2, 5), (1, 7)][rng.next_index(5)];
        let mut graph = GridGraph::build(h, w)?;
        let n_edges = graph.n_edges();
        graph.set_weights(1, (0..n_edges).map(|_| rng.next_in(0.0, 2.0)).collect())?;
        let tree = mst(&graph, 0)?;

        if args.perturb {
            // self-test: corrupt the filter side's weights; lemma 1 must fail
            let mut corrupted = graph.clone();
            let mut weights = corrupted.weights().to_vec();
            weights[0] += 0.35;
            corrupted.set_weights(1, weights)?;
            let mrf = TreeMRF::v1(&tree, &graph, 0)?;
            let marginal = mrf.enumerate_marginals(0)?;
            let aff = affinity_map(
                &tree,
                &corrupted,
                &vec![0.5; h * w],
                &[0.0],
                0,
                AffinityMode::PairwiseOnly,
            )?;
            for (j, &m) in marginal.iter().enumerate() {
                worst1 = worst1.max((m - aff.value(j, 0)).abs());
            }
            pass1 &= worst1 <= args.tolerance;
        } else {
            let r1 = verify_lemma1(&graph, &tree, 0, args.tolerance)?;
            pass1 &= r1.pass;
            worst1 = worst1.max(r1.worst);
        }
        let r2 = verify_lemma2(&graph, &tree, 0, 1e-15)?;
        pass2 &= r2.pass;
        worst2 = worst2.max(r2.worst);
    }
    print("lemma 1 (marginals)", pass1, worst1);
    print("lemma 2 (monotone)", pass2, worst2);

    let r3 = verify_lemma3(1e-15)?;
    print("lemma 3 (witness)", r3.pass, r3.worst);

    let (oracle_pass, oracle_worst) = oracle_equivalence(40, args.seed, 1e-10)?;
    print("oracle equivalence", oracle_pass, oracle_worst);

    let mut rng = SplitMix64::new(args.seed ^ 0x94AD);
    let point = random_fd_point(&mut rng, 3, 3, 1, 2)?;
    let wx = GridGraph::weighted_from(&point.x)?;
    let wg = GridGraph::weighted_from(&point.guided)?;
    let joint = crate::grid_graph::joint_affinity(&wx, &wg)?;
    let tree = mst(&joint, 0)?;
    let loss = LossKind::SumOutputs;
    let analytic = pipeline_grad(&point, &tree, &loss, Exec::sequential())?;
    let report = finite_difference_check(
        |p| pipeline_loss(p, &tree, &loss, Exec::sequential()),
        &point,
        &analytic,
        DEFAULT_FD_STEP,
    )?;
    print("gradient check", report.max_rel_err() < 1e-4, report.max_rel_err());

    Ok(if all_pass { 0 } else { 1 })
}

/// Parses the process arguments and runs the chosen command.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let outcome = match &cli.command {
        Command::Filter(a) => cmd_filter(a).map(|()| 0),
        Command::Affinity(a) => cmd_affinity(a).map(|()| 0),
        Command::Tree(a) => cmd_tree(a).map(|()| 0),
        Command::Bench(a) => cmd_bench(a).map(|()| 0),
        Command::TrainToy(a) => cmd_train_toy(a).map(|()| 0),
        Command::CompareTrees(a) => cmd_compare_trees(a).map(|()| 0),
        Command::CheckGradients(a) => cmd_check_gradients(a),
        Command::VerifyLemmas(a) => cmd_verify_lemmas(a),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}
