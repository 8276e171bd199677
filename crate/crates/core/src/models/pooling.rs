//! Frame-level encoders that pool a `[T×d]` frame matrix into one vector.
//!
//! Both poolers first put the frames into a canonical (lexicographic) order.
//! The pooled value is a symmetric function of the frames anyway; fixing the
//! summation order makes it bit-for-bit invariant to frame permutations.

use std::cmp::Ordering;

use super::params::Ctx;
use super::spec::Assignment;
use crate::error::{Error, Result};
use crate::tensor::Var;

/// Magnitude floor of the linear-assignment denominator.
pub const ASSIGNMENT_FLOOR: f64 = 1e-8;
const NORM_EPS: f64 = 1e-12;

fn canonical_order(ctx: &mut Ctx<'_>, frames: Var) -> Result<Var> {
    let t = ctx.graph.value(frames);
    if t.shape().len() != 2 {
        return Err(Error::shape(
            "frame pooling",
            format!("expected [T x d] frames, got {:?}", t.shape()),
        ));
    }
    let rows = t.shape()[0];
    let mut idx: Vec<usize> = (0..rows).collect();
    idx.sort_by(|&a, &b| {
        t.row(a)
            .iter()
            .zip(t.row(b))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    });
    if idx.iter().enumerate().all(|(i, &j)| i == j) {
        return Ok(frames);
    }
    ctx.graph.gather_rows(frames, &idx)
}

fn encode(ctx: &mut Ctx<'_>, frames: Var) -> Result<Var> {
    let frames = canonical_order(ctx, frames)?;
    let e = ctx.linear("pool.enc", frames)?;
    Ok(ctx.graph.relu(e))
}

/// Attention-weighted bag of frames: `Σ_t α_t E(x_t)` with `α` a softmax over
/// frames of `E(x_t) · pool.attn.w`. Returns `[1 × code_dim]`.
pub fn attentive_dbof(ctx: &mut Ctx<'_>, frames: Var) -> Result<Var> {
    let e = encode(ctx, frames)?;
    let w = ctx.param("pool.attn.w")?;
    let scores = ctx.graph.matmul(e, w)?;
    let alpha = ctx.graph.softmax(scores, 0)?;
    let alpha_t = ctx.graph.transpose(alpha)?;
    ctx.graph.matmul(alpha_t, e)
}

/// Cluster-residual aggregate `V[k] = Σ_t α_{tk} (E(x_t) − c_k)`, `[K × D]`,
/// before any normalization.
pub fn netvlad_aggregate(ctx: &mut Ctx<'_>, frames: Var, assignment: Assignment) -> Result<Var> {
    let e = encode(ctx, frames)?;
    let w = ctx.param("pool.assign.w")?;
    let scores = ctx.graph.matmul(e, w)?;
    let alpha = match assignment {
        Assignment::Softmax => ctx.graph.softmax(scores, 1)?,
        Assignment::Linear => {
            let den = ctx.graph.sum_axis(scores, 1)?;
            let inv = ctx.graph.reciprocal(den, ASSIGNMENT_FLOOR);
            ctx.graph.scale_rows(scores, inv)?
        }
    };
    let alpha_t = ctx.graph.transpose(alpha)?;
    let weighted = ctx.graph.matmul(alpha_t, e)?;
    let mass = ctx.graph.sum_axis(alpha, 0)?;
    let centers = ctx.param("pool.centers")?;
    let shifted = ctx.graph.scale_rows(centers, mass)?;
    ctx.graph.sub(weighted, shifted)
}

/// NetVLAD: intra-normalized cluster residuals, flattened, l2-normalized and
/// reduced by the dense layer `pool.reduce`. Returns `[1 × out_dim]`.
pub fn netvlad(ctx: &mut Ctx<'_>, frames: Var, assignment: Assignment) -> Result<Var> {
    let v = netvlad_aggregate(ctx, frames, assignment)?;
    let (k, d) = ctx.graph.value(v).dims2();
    let v = ctx.graph.l2_normalize(v, NORM_EPS)?;
    let v = ctx.graph.reshape(v, &[1, k * d])?;
    let v = ctx.graph.l2_normalize(v, NORM_EPS)?;
    ctx.linear("pool.reduce", v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::params::{glorot, init_linear, Buffers, Params};
    use crate::rng::{seeded, DropoutStreams};
    use crate::tensor::{Graph, Mode, Tensor};
    use rand::seq::SliceRandom;
    use rand::Rng as _;

    fn params(d: usize, code: usize, k: usize) -> Params {
        let mut p = Params::new();
        init_linear(&mut p, 1, "pool.enc", d, code);
        p.insert("pool.attn.w", glorot(1, "pool.attn.w", code, 1));
        p.insert("pool.assign.w", glorot(1, "pool.assign.w", code, k));
        p.insert("pool.centers", glorot(1, "pool.centers", k, code));
        init_linear(&mut p, 1, "pool.reduce", k * code, 3);
        p
    }

    fn eye(n: usize) -> Tensor {
        let mut t = Tensor::zeros(&[n, n]);
        (0..n).for_each(|i| t.values_mut()[i * n + i] = 1.0);
        t
    }

    fn apply(p: &Params, frames: &Tensor, f: impl FnOnce(&mut Ctx<'_>, Var) -> Result<Var>) -> Tensor {
        let mut g = Graph::new(Mode::Eval);
        let mut b = Buffers::new();
        let mut dr = DropoutStreams::new(0, 0);
        let mut ctx = Ctx::new(&mut g, p, &mut b, &mut dr, 1.0);
        let x = ctx.graph.constant(frames.clone());
        let y = f(&mut ctx, x).unwrap();
        g.value(y).clone()
    }

    fn random_frames(rng: &mut crate::rng::Rng, t: usize, d: usize) -> Vec<Vec<f64>> {
        (0..t)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn dbof_single_and_identical_frames() {
        let p = params(4, 5, 2);
        let x = Tensor::from_rows(&[vec![0.3, -0.2, 0.9, 0.1]]).unwrap();
        let single = apply(&p, &x, attentive_dbof);
        let enc = apply(&p, &x, encode);
        assert_eq!(single.values(), enc.values());
        let rep = Tensor::from_rows(&vec![x.row(0).to_vec(); 6]).unwrap();
        let many = apply(&p, &rep, attentive_dbof);
        for (a, e) in many.values().iter().zip(enc.values()) {
            assert!((a - e).abs() < 1e-14);
        }
    }

    #[test]
    fn single_cluster_closed_form() {
        let (d, t) = (3, 4);
        let mut p = params(d, d, 1);
        p.insert("pool.enc.w", eye(d));
        let mut rng = seeded(5);
        let rows: Vec<Vec<f64>> = (0..t)
            .map(|_| (0..d).map(|_| rng.random_range(0.1..1.0)).collect())
            .collect();
        let x = Tensor::from_rows(&rows).unwrap();
        let agg = apply(&p, &x, |c, f| netvlad_aggregate(c, f, Assignment::Softmax));
        let c1 = p.get("pool.centers").unwrap().values().to_vec();
        for j in 0..d {
            let expect: f64 = rows.iter().map(|r| r[j]).sum::<f64>() - t as f64 * c1[j];
            assert!((agg.values()[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn two_clusters_match_direct_formula() {
        let (d, k) = (2, 2);
        let mut p = params(d, d, k);
        p.insert("pool.enc.w", eye(d));
        p.insert(
            "pool.assign.w",
            Tensor::from_rows(&[vec![1.0, -0.5], vec![0.25, 2.0]]).unwrap(),
        );
        p.insert(
            "pool.centers",
            Tensor::from_rows(&[vec![0.1, 0.2], vec![-0.3, 0.4]]).unwrap(),
        );
        let rows = vec![vec![0.5, 0.2], vec![0.9, 0.7], vec![0.1, 0.3]];
        let x = Tensor::from_rows(&rows).unwrap();
        let w = p.get("pool.assign.w").unwrap().clone();
        let c = p.get("pool.centers").unwrap().clone();
        for mode in [Assignment::Softmax, Assignment::Linear] {
            let agg = apply(&p, &x, |ctx, f| netvlad_aggregate(ctx, f, mode));
            for kk in 0..k {
                for j in 0..d {
                    let mut expect = 0.0;
                    for r in &rows {
                        let s: Vec<f64> = (0..k).map(|q| r[0] * w.at(0, q) + r[1] * w.at(1, q)).collect();
                        let a = match mode {
                            Assignment::Softmax => s[kk].exp() / s.iter().map(|v| v.exp()).sum::<f64>(),
                            Assignment::Linear => s[kk] / s.iter().sum::<f64>(),
                        };
                        expect += a * (r[j] - c.at(kk, j));
                    }
                    assert!((agg.at(kk, j) - expect).abs() < 1e-12, "{mode:?} {kk} {j}");
                }
            }
        }
    }

    #[test]
    fn linear_assignment_survives_zero_denominator() {
        let mut p = params(2, 2, 2);
        p.insert("pool.enc.w", eye(2));
        p.insert(
            "pool.assign.w",
            Tensor::from_rows(&[vec![1.0, -1.0], vec![1.0, -1.0]]).unwrap(),
        );
        let x = Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap();
        let y = apply(&p, &x, |c, f| netvlad(c, f, Assignment::Linear));
        assert!(y.is_finite());
    }

    #[test]
    fn permutation_invariance_is_exact() {
        let p = params(4, 6, 3);
        let mut rng = seeded(11);
        for _ in 0..20 {
            let mut rows = random_frames(&mut rng, 7, 4);
            let x = Tensor::from_rows(&rows).unwrap();
            let a = apply(&p, &x, attentive_dbof);
            let v = apply(&p, &x, |c, f| netvlad(c, f, Assignment::Softmax));
            rows.shuffle(&mut rng);
            let x2 = Tensor::from_rows(&rows).unwrap();
            assert_eq!(a, apply(&p, &x2, attentive_dbof));
            assert_eq!(v, apply(&p, &x2, |c, f| netvlad(c, f, Assignment::Softmax)));
        }
    }
}
