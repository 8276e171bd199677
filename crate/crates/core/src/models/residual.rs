use super::params::Ctx;
use super::spec::{Activation, SkipMode};
use crate::error::Result;
use crate::tensor::{Tensor, Var};

/// `x' = F(x) + skip(x)` with `F = dropout(act(batchnorm(linear(x))))`.
///
/// Parameters live under `prefix` (`.w`, `.b`, `.bn.*`, and `.proj` for a
/// projected skip).
pub fn residual_block(
    ctx: &mut Ctx<'_>,
    prefix: &str,
    x: Var,
    out_dim: usize,
    skip: SkipMode,
    activation: Activation,
) -> Result<Var> {
    let (_, d_in) = ctx.graph.value(x).dims2();
    let h = ctx.linear(prefix, x)?;
    let h = ctx.batch_norm(&format!("{prefix}.bn"), h)?;
    let h = match activation {
        Activation::Relu => ctx.graph.relu(h),
        Activation::Identity => h,
    };
    let keep = ctx.keep_prob;
    let f = ctx.dropout(prefix, h, keep)?;
    let s = match skip {
        SkipMode::None => return Ok(f),
        SkipMode::Pad if d_in == out_dim => x,
        SkipMode::Pad => {
            let sel = ctx.graph.constant(pad_matrix(d_in, out_dim));
            ctx.graph.matmul(x, sel)?
        }
        SkipMode::Projection => {
            let w = ctx.param(&format!("{prefix}.proj"))?;
            ctx.graph.matmul(x, w)?
        }
    };
    ctx.graph.add(f, s)
}

/// `[d_in × d_out]` 0/1 matrix copying the first `min(d_in, d_out)` coordinates.
fn pad_matrix(d_in: usize, d_out: usize) -> Tensor {
    let mut t = Tensor::zeros(&[d_in, d_out]);
    for i in 0..d_in.min(d_out) {
        t.values_mut()[i * d_out + i] = 1.0;
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::params::{init_batch_norm, init_linear, Buffers, Params};
    use crate::rng::DropoutStreams;
    use crate::tensor::{Graph, Mode};

    fn zero_block(d_in: usize, d_out: usize) -> (Params, Buffers) {
        let mut p = Params::new();
        let mut b = Buffers::new();
        p.insert("r.w", Tensor::zeros(&[d_in, d_out]));
        p.insert("r.b", Tensor::zeros(&[d_out]));
        init_batch_norm(&mut p, &mut b, "r.bn", d_out);
        (p, b)
    }

    fn eval(p: &Params, b: &mut Buffers, x: Vec<f64>, d_out: usize, skip: SkipMode) -> Vec<f64> {
        let mut g = Graph::new(Mode::Eval);
        let mut dr = DropoutStreams::new(0, 0);
        let mut ctx = Ctx::new(&mut g, p, b, &mut dr, 0.8);
        let xv = ctx.graph.constant(Tensor::from_rows(&[x]).unwrap());
        let y = residual_block(&mut ctx, "r", xv, d_out, skip, Activation::Relu).unwrap();
        g.value(y).values().to_vec()
    }

    #[test]
    fn zero_f_matching_dims_is_identity() {
        let (p, mut b) = zero_block(3, 3);
        let x = vec![0.5, -1.25, 3.0];
        assert_eq!(eval(&p, &mut b, x.clone(), 3, SkipMode::Pad), x);
    }

    #[test]
    fn zero_f_with_beta_shifts() {
        let (mut p, mut b) = zero_block(2, 2);
        p.get_mut("r.bn.beta")
            .unwrap()
            .values_mut()
            .copy_from_slice(&[0.5, 0.25]);
        let y = eval(&p, &mut b, vec![1.0, 2.0], 2, SkipMode::Pad);
        assert_eq!(y, vec![1.5, 2.25]);
    }

    #[test]
    fn padding_and_truncation() {
        let (p, mut b) = zero_block(2, 4);
        assert_eq!(
            eval(&p, &mut b, vec![0.7, -0.2], 4, SkipMode::Pad),
            vec![0.7, -0.2, 0.0, 0.0]
        );
        let (p, mut b) = zero_block(4, 2);
        assert_eq!(
            eval(&p, &mut b, vec![0.7, -0.2, 5.0, 6.0], 2, SkipMode::Pad),
            vec![0.7, -0.2]
        );
    }

    #[test]
    fn no_skip_drops_the_input() {
        let (p, mut b) = zero_block(2, 2);
        assert_eq!(eval(&p, &mut b, vec![0.7, -0.2], 2, SkipMode::None), vec![0.0, 0.0]);
    }

    #[test]
    fn projection_skip_uses_learned_matrix() {
        let (mut p, mut b) = zero_block(2, 3);
        init_linear(&mut p, 4, "unused", 1, 1);
        p.insert(
            "r.proj",
            Tensor::from_rows(&[vec![1.0, 2.0, 0.0], vec![0.0, 1.0, -1.0]]).unwrap(),
        );
        assert_eq!(
            eval(&p, &mut b, vec![1.0, 2.0], 3, SkipMode::Projection),
            vec![1.0, 4.0, -2.0]
        );
    }
}
