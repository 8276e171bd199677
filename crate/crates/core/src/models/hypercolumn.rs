use super::params::Ctx;
use crate::error::{Error, Result};
use crate::tensor::Var;

/// Concatenate the activations of a stack of
/// `linear → batchnorm → ReLU → dropout` layers with widths `depths`.
///
/// Layer `i` has parameters `prefix{i}.w`, `.b`, `prefix{i}.bn.*`.
pub fn hypercolumn(ctx: &mut Ctx<'_>, prefix: &str, x: Var, depths: &[usize]) -> Result<Var> {
    if depths.is_empty() {
        return Err(Error::Config("hypercolumn needs at least one layer".into()));
    }
    let keep = ctx.keep_prob;
    let mut prev = x;
    let mut stages = Vec::with_capacity(depths.len());
    for i in 0..depths.len() {
        let name = format!("{prefix}{i}");
        let h = ctx.linear(&name, prev)?;
        let h = ctx.batch_norm(&format!("{name}.bn"), h)?;
        let h = ctx.graph.relu(h);
        let h = ctx.dropout(&name, h, keep)?;
        stages.push(h);
        prev = h;
    }
    if stages.len() == 1 {
        return Ok(stages[0]);
    }
    ctx.graph.concat(&stages, 1)
}
