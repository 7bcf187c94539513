//! wasm-bindgen bindings for the static page in `www/`.

use std::collections::BTreeSet;

use uniark::objectives::{max_entropy_trajectory, LossConfig};
use uniark::probing::{aggregate_augmented, AugmentationConfig};
use uniark::world::zipf_weights;
use wasm_bindgen::prelude::*;

fn js(e: uniark::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Combines raw, true-prefixed and false-prefixed distributions with the
/// given weights. The weights must sum to 1.
#[wasm_bindgen]
pub fn aggregate(
    raw: &[f64],
    with_true: &[f64],
    with_false: &[f64],
    w_raw: f64,
    w_true: f64,
    w_false: f64,
) -> Result<Vec<f64>, JsError> {
    let cfg = AugmentationConfig {
        w_raw,
        w_true,
        w_false,
        ..AugmentationConfig::default()
    };
    aggregate_augmented([raw, with_true, with_false], &cfg).map_err(js)
}

/// Entropy in bits of the retained top-k candidates after each step of
/// gradient ascent on the max-entropy term alone.
#[wasm_bindgen]
pub fn entropy_trajectory(
    logits: &[f64],
    top_k: usize,
    steps: usize,
    learning_rate: f64,
) -> Result<Vec<f64>, JsError> {
    let cfg = LossConfig {
        top_k,
        ..LossConfig::default()
    };
    max_entropy_trajectory(logits, &BTreeSet::new(), &cfg, steps, learning_rate).map_err(js)
}

/// Object marginal used by the world generator: rank-k weight `k^-s`.
#[wasm_bindgen]
pub fn zipf(n: usize, skew: f64) -> Vec<f64> {
    zipf_weights(n, skew)
}
