//! Per-class gated mixture of sigmoid experts.
//!
//! Gate and expert logits share the layout `[batch × (classes · experts)]`
//! with column `c · E + e`, so one reshape turns either into
//! `[(batch · classes) × experts]`.

use super::params::Ctx;
use crate::error::{Error, Result};
use crate::tensor::Var;

/// Mixture head.
///
/// `gate_input` is the original (or pooled) input `[B×d]`, `rep` the
/// representation the experts read `[B×r]`. For every class the E gate logits
/// go through a softmax (no null expert) and weight the E expert sigmoids:
/// `p(c) = Σ_e g_{c,e}(x) σ(l_{e,c})`.
pub fn mixture_of_experts(
    ctx: &mut Ctx<'_>,
    gate_input: Var,
    rep: Var,
    num_classes: usize,
    num_experts: usize,
) -> Result<Var> {
    let (b, _) = ctx.graph.value(gate_input).dims2();
    if ctx.graph.value(rep).dims2().0 != b {
        return Err(Error::shape(
            "mixture_of_experts",
            "gate input and representation batch sizes differ",
        ));
    }
    let g = &mut *ctx;
    let gate_logits = g.linear("gate", gate_input)?;
    let gate_logits = g.graph.reshape(gate_logits, &[b * num_classes, num_experts])?;
    let gates = g.graph.softmax(gate_logits, 1)?;

    let expert_logits = g.linear("experts", rep)?;
    let expert_logits = g.graph.reshape(expert_logits, &[b * num_classes, num_experts])?;
    let experts = g.graph.sigmoid(expert_logits);

    let weighted = g.graph.mul(gates, experts)?;
    let mixed = g.graph.sum_axis(weighted, 1)?;
    let mixed = g.graph.reshape(mixed, &[b, num_classes])?;
    Ok(g.graph.clamp_prob(mixed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::params::{init_linear, Buffers, Params};
    use crate::rng::{seeded, DropoutStreams};
    use crate::tensor::{Graph, Mode, Tensor};
    use rand::Rng as _;

    fn setup(d: usize, c: usize, e: usize, seed: u64) -> Params {
        let mut p = Params::new();
        init_linear(&mut p, seed, "gate", d, c * e);
        init_linear(&mut p, seed + 1, "experts", d, c * e);
        p
    }

    fn run(p: &Params, x: &Tensor, c: usize, e: usize) -> (Vec<f64>, Vec<f64>) {
        let mut g = Graph::new(Mode::Eval);
        let mut bufs = Buffers::new();
        let mut dr = DropoutStreams::new(0, 0);
        let mut ctx = Ctx::new(&mut g, p, &mut bufs, &mut dr, 1.0);
        let xv = ctx.graph.constant(x.clone());
        let out = mixture_of_experts(&mut ctx, xv, xv, c, e).unwrap();
        let el = ctx.linear("experts", xv).unwrap();
        (g.value(out).values().to_vec(), g.value(el).values().to_vec())
    }

    fn sig(v: f64) -> f64 {
        1.0 / (1.0 + (-v).exp())
    }

    #[test]
    fn single_expert_is_its_sigmoid() {
        let p = setup(3, 4, 1, 1);
        let x = Tensor::from_rows(&[vec![0.2, -0.5, 1.0]]).unwrap();
        let (out, logits) = run(&p, &x, 4, 1);
        for (o, l) in out.iter().zip(&logits) {
            assert!((o - sig(*l)).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_experts_ignore_the_gate() {
        let (d, c, e) = (3, 2, 4);
        let mut p = setup(d, c, e, 2);
        // Expert weight columns c*E+e identical across e.
        let w = p.get_mut("experts.w").unwrap();
        let cols = c * e;
        for row in 0..d {
            for cls in 0..c {
                let v = w.values()[row * cols + cls * e];
                for ex in 0..e {
                    w.values_mut()[row * cols + cls * e + ex] = v;
                }
            }
        }
        let x = Tensor::from_rows(&[vec![0.4, 0.1, -2.0]]).unwrap();
        let (out, logits) = run(&p, &x, c, e);
        for cls in 0..c {
            assert!((out[cls] - sig(logits[cls * e])).abs() < 1e-14);
        }
    }

    #[test]
    fn output_lies_in_expert_envelope() {
        let (d, c, e) = (4, 5, 3);
        let mut rng = seeded(9);
        for s in 0..20 {
            let p = setup(d, c, e, 100 + s);
            let x = Tensor::from_rows(&[(0..d).map(|_| rng.random_range(-2.0..2.0)).collect()]).unwrap();
            let (out, logits) = run(&p, &x, c, e);
            for cls in 0..c {
                let s: Vec<f64> = (0..e).map(|ex| sig(logits[cls * e + ex])).collect();
                let lo = s.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert!(out[cls] >= lo - 1e-15 && out[cls] <= hi + 1e-15);
                assert!(out[cls] > 0.0 && out[cls] < 1.0);
            }
        }
    }
}
