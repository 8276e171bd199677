use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use super::model::{Input, Model};
use super::params::{glorot, Freeze};
use super::spec::ModelSpec;
use crate::error::Result;
use crate::rng::{child, DropoutStreams};
use crate::tensor::{grad_check, GradCheckReport, Graph, Mode, Probe, Tensor, Var};

/// Owned model input, for building check problems.
#[derive(Clone, Debug)]
pub enum Batch {
    Videos(Tensor),
    Frames(Vec<Tensor>),
}

impl Batch {
    pub fn as_input(&self) -> Input<'_> {
        match self {
            Batch::Videos(t) => Input::Videos(t),
            Batch::Frames(f) => Input::Frames(f),
        }
    }
}

/// Train-mode BCE loss of `model` on one batch; the batch-norm running
/// statistics of `model` are left untouched.
type Bound = Vec<(String, Var)>;

fn loss_probe(
    model: &Model,
    input: Input<'_>,
    labels: &Tensor,
    keep_prob: f64,
    seed: u64,
) -> Result<(Probe, Graph, Bound)> {
    let mut m = model.clone();
    let mut graph = Graph::new(Mode::Train);
    let mut dropout = DropoutStreams::new(seed, 0);
    let out = m.forward(&mut graph, input, &mut dropout, keep_prob, Freeze::Nothing)?;
    let y = graph.constant(labels.clone());
    let loss = graph.bce(out.probs, y)?;
    let probe = Probe {
        value: graph.value(loss).values()[0],
        signature: graph.branch_signature(),
    };
    graph.backward(loss)?;
    Ok((probe, graph, out.params.into_iter().collect()))
}

/// Finite-difference check of `∂ loss / ∂ θ` for every parameter of `model`,
/// with the loss the mean binary cross-entropy against `labels`. Dropout
/// masks are drawn from `seed` and are identical in every evaluation.
pub fn check_model_gradients(
    model: &Model,
    input: Input<'_>,
    labels: &Tensor,
    keep_prob: f64,
    seed: u64,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let (_, graph, bound) = loss_probe(model, input, labels, keep_prob, seed)?;
    let mut analytic = Vec::with_capacity(model.params.num_values());
    for (name, t) in model.params.iter() {
        match bound.iter().find(|(n, _)| n == name) {
            Some((_, v)) => analytic.extend_from_slice(graph.grad(*v).expect("parameters record gradients")),
            None => analytic.extend(std::iter::repeat_n(0.0, t.len())),
        }
    }
    let x = model.params.flatten();
    let mut probe_model = model.clone();
    grad_check(
        |theta| {
            probe_model.params.assign_flat(theta);
            Ok(loss_probe(&probe_model, input, labels, keep_prob, seed)?.0)
        },
        &x,
        &analytic,
        step,
        tolerance,
    )
}

/// A random model of `spec` (latent-concept head attached and randomized when
/// the spec has one), a random batch and random binary labels.
pub fn random_problem(spec: &ModelSpec, seed: u64, batch: usize) -> Result<(Model, Batch, Tensor)> {
    let mut model = Model::new(spec.clone(), seed)?;
    if spec.lc_head.is_some() {
        model.attach_lc()?;
    }
    let mut rng = child(seed, "check/problem", 0);
    let names: Vec<String> = model.params.names().cloned().collect();
    for name in names {
        let t = model.params.get_mut(&name).unwrap();
        if name.ends_with(".gamma") || name.ends_with(".beta") || name.ends_with(".b") {
            let base = if name.ends_with(".gamma") { 1.0 } else { 0.0 };
            t.values_mut()
                .iter_mut()
                .for_each(|v| *v = base + rng.random_range(-0.3..0.3));
        } else if name == "lc.out.w" || name == "lc.merge.w" {
            let (r, c) = t.dims2();
            *t = glorot(seed, &format!("check/{name}"), r, c);
        }
    }
    let d = spec.input_dim;
    let mut normal = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let data = if spec.pooling.is_frame_level() {
        let mut frames = Vec::with_capacity(batch);
        for i in 0..batch {
            let t = 2 + i % 4;
            frames.push(Tensor::new(&[t, d], normal(t * d))?);
        }
        Batch::Frames(frames)
    } else {
        Batch::Videos(Tensor::new(&[batch, d], normal(batch * d))?)
    };
    let c = spec.num_classes;
    let mut lrng = child(seed, "check/labels", 0);
    let labels = Tensor::new(
        &[batch, c],
        (0..batch * c)
            .map(|_| (lrng.random::<f64>() < 0.3) as u8 as f64)
            .collect(),
    )?;
    Ok((model, data, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::spec::{Aggregation, Assignment, LCSpec, Pooling, SkipMode};

    fn check(spec: ModelSpec, seed: u64) -> GradCheckReport {
        check_at(spec, seed, 1e-3)
    }

    fn check_at(spec: ModelSpec, seed: u64, step: f64) -> GradCheckReport {
        let (m, b, y) = random_problem(&spec, seed, 8).unwrap();
        let r = check_model_gradients(&m, b.as_input(), &y, 0.8, seed, step, 1e-3).unwrap();
        assert!(r.passed(), "{spec:?}: {r:?}");
        assert!(r.checked > r.total / 2, "{r:?}");
        r
    }

    #[test]
    fn video_level_models() {
        check(ModelSpec::moe(5, 4, 3), 1);
        check(ModelSpec::more(5, 4, 3, 7), 2);
        check(
            ModelSpec {
                skip: SkipMode::Projection,
                ..ModelSpec::more(5, 4, 2, 3)
            },
            3,
        );
        check(ModelSpec::mohce(5, 4, 2, vec![4, 3]), 4);
    }

    #[test]
    fn latent_concept_head() {
        for agg in [Aggregation::Add, Aggregation::Max, Aggregation::Append] {
            let lc = LCSpec {
                latent_dim: 6,
                aggregation: agg,
                ..LCSpec::default()
            };
            check(ModelSpec::more(5, 4, 2, 6).with_lc(lc), 5);
        }
    }

    #[test]
    fn frame_level_models() {
        check(
            ModelSpec::moe(4, 3, 2).with_pooling(Pooling::AttentiveDbof { code_dim: 5 }),
            6,
        );
        let vlad = |assignment| Pooling::NetVlad {
            clusters: 2,
            code_dim: 4,
            out_dim: 5,
            assignment,
        };
        check(ModelSpec::more(4, 3, 2, 6).with_pooling(vlad(Assignment::Softmax)), 7);
        // Dividing by a sum of signed scores is sharply curved; a step of 1e-3
        // measures that curvature rather than the gradient.
        check_at(
            ModelSpec::more(4, 3, 2, 6).with_pooling(vlad(Assignment::Linear)),
            7,
            1e-6,
        );
    }
}
