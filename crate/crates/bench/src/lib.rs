//! Shared fixtures for the benchmarks.

use gpo_core::coarse::apply_global;
use gpo_core::primitives::{default_gcn_radius, init_gcn};
use gpo_core::synth::{make_pair, SynthConfig};
use gpo_core::{Image, NodeSet, RadiusConfig, SynthPair};

pub struct Fixture {
    pub pair: SynthPair,
    pub fixed: Image,
    pub moving_coarse: Image,
    pub nodes: NodeSet,
}

/// A default synthetic pair of side `size`, pre-warped by its true global
/// transform, with a `grid_n x grid_n` lattice of nodes.
pub fn fixture(size: usize, grid_n: usize) -> Fixture {
    let pair = make_pair(&SynthConfig { size, ..SynthConfig::default() }).expect("synthetic pair");
    let moving_coarse = apply_global(&pair.moving, &pair.gt_transform, size, size).expect("coarse warp");
    let cfg = RadiusConfig::default();
    let r = default_gcn_radius(size, grid_n).clamp(cfg.r_min + 0.2, cfg.r_max);
    let nodes = init_gcn(size, size, grid_n, &cfg, r).expect("grid nodes");
    Fixture {
        fixed: pair.fixed.clone(),
        pair,
        moving_coarse,
        nodes,
    }
}
