use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::Result;
use crate::models::Params;
use crate::tensor::{Graph, Mode, Tensor};

/// Adagrad denominator offset.
pub const ADAGRAD_EPS: f64 = 1e-7;

/// Gradients by parameter name.
pub type Grads = BTreeMap<String, Vec<f64>>;

/// Mean over rows of `Σ_c −[y ln p + (1−y) ln(1−p)]` with `p` clamped to
/// `[1e-7, 1 − 1e-7]`.
pub fn bce_loss(probs: &Tensor, labels: &Tensor) -> Result<f64> {
    let mut g = Graph::new(Mode::Eval);
    let p = g.constant(probs.clone());
    let y = g.constant(labels.clone());
    let l = g.bce(p, y)?;
    Ok(g.value(l).values()[0])
}

/// `base_lr · decay_factor^(examples_seen / decay_every)`, with a continuous
/// exponent.
pub fn lr_at(examples_seen: u64, base_lr: f64, decay_factor: f64, decay_every: u64) -> f64 {
    base_lr * decay_factor.powf(examples_seen as f64 / decay_every as f64)
}

impl TrainConfig {
    pub fn lr_at(&self, examples_seen: u64, dataset_size: usize) -> f64 {
        lr_at(
            examples_seen,
            self.base_lr,
            self.decay_factor,
            self.decay_every(dataset_size),
        )
    }
}

pub fn global_norm(grads: &Grads) -> f64 {
    grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescale all gradients together so their global l2 norm is at most
/// `clip_norm`. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut Grads, clip_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > clip_norm {
        let s = clip_norm / norm;
        grads.values_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Adagrad accumulators plus progress counters.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptState {
    pub accumulators: BTreeMap<String, Vec<f64>>,
    pub step: u64,
    pub examples_seen: u64,
}

/// `acc += g²; θ −= lr · g / (√acc + ε)` for every parameter in `grads`.
/// Accumulators of parameters seen for the first time start at zero.
pub fn adagrad_step(params: &mut Params, grads: &Grads, state: &mut OptState, lr: f64) {
    for (name, g) in grads {
        let Some(theta) = params.get_mut(name) else { continue };
        let acc = state
            .accumulators
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        for ((t, a), &gi) in theta.values_mut().iter_mut().zip(acc.iter_mut()).zip(g) {
            *a += gi * gi;
            *t -= lr * gi / (a.sqrt() + ADAGRAD_EPS);
        }
    }
    state.step += 1;
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_values() {
        let half = Tensor::filled(&[2, 3], 0.5);
        let y = Tensor::new(&[2, 3], vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((bce_loss(&half, &y).unwrap() - 3.0 * 2f64.ln()).abs() < 1e-12);
        let l = bce_loss(&y, &y).unwrap();
        assert!(l > 0.0 && l < 3.0 * 1.1e-7, "{l}");
    }

    #[test]
    fn schedule() {
        assert_eq!(lr_at(0, 0.0002, 0.8, 8_000_000), 0.0002);
        assert!((lr_at(8_000_000, 0.0002, 0.8, 8_000_000) - 0.00016).abs() < 1e-18);
        assert!((lr_at(16_000_000, 0.0002, 0.8, 8_000_000) - 0.000128).abs() < 1e-18);
    }

    #[test]
    fn clipping() {
        let mut g = Grads::from([("a".to_string(), vec![0.0, 0.4])]);
        assert_eq!(clip_gradients(&mut g, 0.8), 0.4);
        assert_eq!(g["a"], vec![0.0, 0.4]);
        let mut g = Grads::from([("a".to_string(), vec![0.0, 1.6])]);
        clip_gradients(&mut g, 0.8);
        assert_eq!(g["a"], vec![0.0, 0.8]);
        let mut g = Grads::from([("a".to_string(), vec![0.0; 3]), ("b".to_string(), vec![])]);
        clip_gradients(&mut g, 0.8);
        assert_eq!(g["a"], vec![0.0; 3]);
    }

    #[test]
    fn adagrad_recurrence() {
        let mut p = Params::new();
        p.insert("w", Tensor::vector(vec![0.0, 5.0]));
        let mut s = OptState::default();
        let g = Grads::from([("w".to_string(), vec![1.0, 0.0])]);
        adagrad_step(&mut p, &g, &mut s, 0.1);
        let w = p.get("w").unwrap().values().to_vec();
        assert_eq!(w[0], -0.1 / (1.0 + ADAGRAD_EPS));
        assert_eq!(w[1], 5.0);
        assert_eq!(s.accumulators["w"], vec![1.0, 0.0]);
        adagrad_step(&mut p, &g, &mut s, 0.1);
        let step2 = p.get("w").unwrap().values()[0] - w[0];
        assert!((step2 + 0.1 / 2f64.sqrt()).abs() < 1e-7);
        assert_eq!(s.step, 2);
    }
}
