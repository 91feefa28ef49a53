//! Fixtures shared by the benchmarks.

use esnet_core::gradcheck::suite::{random_tensor, randomize_block, rng};
use esnet_core::{Block, BlockSpec, Network, Tensor4};

/// ESNet with widths 4/8/16 on 3×32×32 input.
pub fn desk_network(classes: usize) -> Network<f64> {
    let spec = esnet_core::build_esnet_scaled(classes, [4, 8, 16], [3, 32, 32])
        .expect("desk widths are valid");
    Network::init(spec, 0).expect("valid spec")
}

/// A block with random weights and non-trivial normalization state.
pub fn random_block(spec: BlockSpec, seed: u64) -> Block<f64> {
    let mut b = Block::init(spec, &mut rng(seed)).expect("valid spec");
    randomize_block(&mut b, seed + 1);
    b
}

pub fn input(shape: [usize; 4], seed: u64) -> Tensor4<f64> {
    random_tensor(shape, seed)
}
