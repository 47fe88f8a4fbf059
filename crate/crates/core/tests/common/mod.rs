#![allow(dead_code)]

use psg_core::numeric::Array;
use psg_core::scene::{BinaryMask, Scene, SceneGraph, Triplet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform entries in [-2, 2].
pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Array<f64> {
    Array::from_fn(shape, |_| rng.gen_range(-2.0..2.0))
}

pub fn scene(features: Array<f64>, masks: Vec<BinaryMask>, labels: Vec<usize>, triplets: Vec<Triplet>) -> Scene {
    Scene {
        scene_id: "fixture".into(),
        features,
        masks,
        labels,
        graph: SceneGraph { triplets },
        hidden: Vec::new(),
    }
}

pub fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
    assert!((a - b).abs() <= tol, "{what}: {a} vs {b} (tol {tol})");
}

pub fn assert_all_close(a: &Array<f64>, b: &Array<f64>, tol: f64, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: shapes");
    for (k, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        assert!((x - y).abs() <= tol, "{what}[{k}]: {x} vs {y} (tol {tol})");
    }
}
