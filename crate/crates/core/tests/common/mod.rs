#![allow(dead_code)]

use looped_lm::data::Batch;
use looped_lm::{LoopedModel, ModelConfig, Scalar, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// The small configuration used by every finite-difference and isolation check.
pub fn tiny_config(variant: Variant) -> ModelConfig {
    ModelConfig {
        vocab_size: 17,
        context_length: 8,
        d_model: 16,
        n_heads: 2,
        d_ff: 40,
        blocks_per_loop: 2,
        max_loops: 3,
        variant,
        ..ModelConfig::desk()
    }
}

/// Replaces the zero-initialized modulation heads with random values so gates and scales
/// are active and every gradient path carries signal.
pub fn randomize_modulation<T: Scalar>(model: &mut LoopedModel<T>, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).unwrap();
    for p in model.params.iter_mut() {
        if p.name.contains("modulation") {
            for v in p.value.data_mut() {
                *v = T::of(normal.sample(&mut rng));
            }
        }
    }
}

/// Biases start at zero; this makes them nonzero too.
pub fn randomize_biases<T: Scalar>(model: &mut LoopedModel<T>, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).unwrap();
    for p in model.params.iter_mut() {
        if p.name.ends_with(".bias") && !p.name.contains("modulation") {
            for v in p.value.data_mut() {
                *v = T::of(normal.sample(&mut rng));
            }
        }
    }
}

pub fn random_batch(vocab: usize, batch: usize, seq_len: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens: Vec<usize> = (0..batch * (seq_len + 1)).map(|_| rng.random_range(0..vocab)).collect();
    let offsets: Vec<usize> = (0..batch).map(|b| b * (seq_len + 1)).collect();
    Batch::from_offsets(&tokens, &offsets, seq_len).unwrap()
}

/// Central-difference check of every parameter element against the tape gradient.
/// Returns the number of elements checked and a description of each failure.
pub fn finite_difference_check(
    model: &mut LoopedModel<f64>,
    loss: &dyn Fn(&LoopedModel<f64>) -> f64,
    analytic: &[looped_lm::Tensor<f64>],
    step: f64,
    rel_tol: f64,
    abs_tol: f64,
) -> (usize, Vec<String>) {
    let ids: Vec<_> = model.params.ids().collect();
    let mut checked = 0;
    let mut failures = Vec::new();
    for (slot, id) in ids.into_iter().enumerate() {
        for i in 0..model.params.value(id).numel() {
            let orig = model.params.value(id).data()[i];
            model.params.get_mut(id).value.data_mut()[i] = orig + step;
            let up = loss(model);
            model.params.get_mut(id).value.data_mut()[i] = orig - step;
            let down = loss(model);
            model.params.get_mut(id).value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            let exact = analytic[slot].data()[i];
            let err = (numeric - exact).abs();
            let scale = numeric.abs().max(exact.abs());
            if err > abs_tol && err > rel_tol * scale {
                failures.push(format!(
                    "{}[{i}]: tape {exact:.6e} vs numeric {numeric:.6e}",
                    model.params.get(id).name
                ));
            }
            checked += 1;
        }
    }
    (checked, failures)
}
