#![allow(dead_code)]

use dualbranch::model::{init_params, ModelConfig};
use dualbranch::tensor::{ParamTree, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Initialized parameters with every entry nudged off its init value, so
/// zero biases and unit norms do not hide gradient errors.
pub fn jittered_params(cfg: &ModelConfig, seed: u64) -> ParamTree {
    let mut p = init_params(cfg, &mut rng(seed)).unwrap();
    let mut r = rng(seed ^ 0xabc);
    for (_, e) in p.iter_mut() {
        for x in e.tensor.data.iter_mut() {
            *x += 0.2 * (r.random::<f64>() - 0.5);
        }
    }
    p
}

pub fn random_image(res: usize, seed: u64) -> Tensor {
    Tensor::uniform(&[res, res, 1], 0.0, 1.0, &mut rng(seed))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
