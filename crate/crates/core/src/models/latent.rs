use super::params::{glorot, init_batch_norm, Buffers, Ctx, Params};
use super::spec::{Aggregation, LCSpec};
use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// Insert the latent-concept head parameters.
///
/// The output projection `lc.out` starts at zero and an `Append` merge starts
/// as `[I; 0]`, so a freshly attached head leaves predictions unchanged.
pub fn init_latent_concepts(params: &mut Params, buffers: &mut Buffers, seed: u64, classes: usize, lc: &LCSpec) {
    params.insert("lc.in.w", glorot(seed, "lc.in.w", classes, lc.latent_dim));
    params.insert("lc.in.b", Tensor::zeros(&[lc.latent_dim]));
    init_batch_norm(params, buffers, "lc.bn", lc.latent_dim);
    params.insert("lc.out.w", Tensor::zeros(&[lc.latent_dim, classes]));
    params.insert("lc.out.b", Tensor::zeros(&[classes]));
    if lc.aggregation == Aggregation::Append {
        let mut merge = Tensor::zeros(&[2 * classes, classes]);
        for c in 0..classes {
            merge.values_mut()[c * classes + c] = 1.0;
        }
        params.insert("lc.merge.w", merge);
        params.insert("lc.merge.b", Tensor::zeros(&[classes]));
    }
}

/// Refine backbone confidences `probs[B×C]` with a residual correction
/// computed from their logits `L`:
/// `corr = lc.out(relu(bn(lc.in(dropout(L)))))`.
///
/// `Add` yields `σ(L + corr)`, `Max` yields `σ(max(L, corr))`, `Append`
/// yields `σ(lc.merge([L, corr]))`.
pub fn latent_concepts(ctx: &mut Ctx<'_>, probs: Var, lc: &LCSpec) -> Result<Var> {
    let (_, c) = ctx.graph.value(probs).dims2();
    let expected = ctx.param("lc.out.b")?;
    if ctx.graph.value(expected).len() != c {
        return Err(Error::shape(
            "latent_concepts",
            format!("{c} classes vs head width {}", ctx.graph.value(expected).len()),
        ));
    }
    let logits = ctx.graph.logit(probs);
    let h = ctx.dropout("lc.in", logits, lc.input_dropout_keep)?;
    let h = ctx.linear("lc.in", h)?;
    let h = ctx.batch_norm("lc.bn", h)?;
    let h = ctx.graph.relu(h);
    let corr = ctx.linear("lc.out", h)?;
    match lc.aggregation {
        Aggregation::Add => ctx.graph.sigmoid_shift(probs, corr),
        Aggregation::Max => {
            let m = ctx.graph.maximum(logits, corr)?;
            Ok(ctx.graph.sigmoid(m))
        }
        Aggregation::Append => {
            let cat = ctx.graph.concat(&[logits, corr], 1)?;
            let z = ctx.linear("lc.merge", cat)?;
            Ok(ctx.graph.sigmoid(z))
        }
    }
}
