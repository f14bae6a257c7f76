//! Structure-preserving feature aggregation on spanning trees of image grids.
//!
//! The pipeline: build the 4-connected graph over a guidance map, weight its
//! edges by feature distance, extract a spanning tree (deterministic minimum
//! tree for inference, a randomized contraction variant for training), then
//! aggregate features along tree paths in linear time. A learnable unary
//! term lets distant but confident sources outweigh near ones, which the
//! plain pairwise filter cannot do.
//!
//! Everything the fast paths compute is cross-checked by slow references
//! that live next to them: a quadratic path-product filter, an exact
//! tree-MRF enumeration, and central finite differences for the gradients.
//!
//! ```
//! use treefilter::{Exec, FeatureMap, GridGraph};
//!
//! // a 2x3 map, filtered along its minimum spanning tree
//! let map = FeatureMap::new(2, 3, 1, vec![0.0, 0.1, 0.9, 0.05, 0.15, 1.0])?;
//! let graph = GridGraph::weighted_from(&map)?;
//! let tree = treefilter::mst(&graph, 0)?;
//! let state = treefilter::forward_v1(&map, &tree, &graph, Exec::sequential())?;
//! // outputs are convex combinations of the inputs
//! assert!(state.output.data().iter().all(|&y| (0.0..=1.0).contains(&y)));
//! # Ok::<(), treefilter::Error>(())
//! ```

pub mod bench;
pub mod cli;
pub mod error;
pub mod exec;
pub mod feature_map;
pub mod gradients;
pub mod grid_graph;
pub mod mrf_oracle;
pub mod rng;
pub mod spanning;
pub mod toy_learner;
pub mod tree_filter;

pub use error::{Error, Result};
pub use exec::Exec;
pub use feature_map::{from_image, load_fmap, save_fmap, to_image, FeatureMap};
pub use grid_graph::{joint_affinity, unary_values, GridGraph, UnaryParams};
pub use spanning::{mst, root_tree, sample_random_spanning_tree, SpanningTree, TreeEdge, UnionFind};
pub use tree_filter::{
    affinity_map, forward_bruteforce, forward_v1, forward_v2, AffinityMode, FilterState,
};
