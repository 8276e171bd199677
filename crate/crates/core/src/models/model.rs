use std::collections::BTreeMap;

use rayon::prelude::*;

use super::hypercolumn::hypercolumn;
use super::latent::{init_latent_concepts, latent_concepts};
use super::mixture::mixture_of_experts;
use super::params::{glorot, init_batch_norm, init_linear, Buffers, Ctx, Freeze, Params};
use super::pooling::{attentive_dbof, netvlad};
use super::residual::residual_block;
use super::spec::{ModelKind, ModelSpec, Pooling, SkipMode};
use crate::error::{Error, Result};
use crate::rng::DropoutStreams;
use crate::tensor::{Graph, Mode, Tensor, Var};

/// Rows per forward pass in [`Model::predict`].
const PREDICT_CHUNK: usize = 256;

/// A batch of model inputs.
#[derive(Clone, Copy, Debug)]
pub enum Input<'a> {
    /// Video-level features, `[B × d]`.
    Videos(&'a Tensor),
    /// One `[T × d]` frame matrix per video.
    Frames(&'a [Tensor]),
}

impl Input<'_> {
    pub fn len(&self) -> usize {
        match self {
            Input::Videos(t) => t.dims2().0,
            Input::Frames(f) => f.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Output of [`Model::forward`]: confidences `[B × C]` plus the graph
/// handles of every parameter the pass read.
pub struct Forward {
    pub probs: Var,
    pub params: BTreeMap<String, Var>,
}

/// An architecture together with its weights and batch-norm statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: Params,
    pub buffers: Buffers,
    pub seed: u64,
}

impl Model {
    /// Fresh backbone weights. The latent-concept head, if the spec has one,
    /// is not created until [`Model::attach_lc`].
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = Params::new();
        let mut buffers = Buffers::new();
        let d = spec.input_dim;
        match spec.pooling {
            Pooling::None => {}
            Pooling::AttentiveDbof { code_dim } => {
                init_linear(&mut params, seed, "pool.enc", d, code_dim);
                params.insert("pool.attn.w", glorot(seed, "pool.attn.w", code_dim, 1));
            }
            Pooling::NetVlad {
                clusters,
                code_dim,
                out_dim,
                ..
            } => {
                init_linear(&mut params, seed, "pool.enc", d, code_dim);
                params.insert("pool.assign.w", glorot(seed, "pool.assign.w", code_dim, clusters));
                params.insert("pool.centers", glorot(seed, "pool.centers", clusters, code_dim));
                init_linear(&mut params, seed, "pool.reduce", clusters * code_dim, out_dim);
            }
        }
        let x_dim = spec.pooled_dim();
        match spec.kind {
            ModelKind::MoE => {}
            ModelKind::MoRE => {
                let h = spec.expert_hidden;
                init_linear(&mut params, seed, "residual", x_dim, h);
                init_batch_norm(&mut params, &mut buffers, "residual.bn", h);
                if spec.skip == SkipMode::Projection {
                    params.insert("residual.proj", glorot(seed, "residual.proj", x_dim, h));
                }
            }
            ModelKind::MoHCE => {
                let mut prev = x_dim;
                for (i, &w) in spec.hypercolumn_depths.iter().enumerate() {
                    init_linear(&mut params, seed, &format!("hc{i}"), prev, w);
                    init_batch_norm(&mut params, &mut buffers, &format!("hc{i}.bn"), w);
                    prev = w;
                }
            }
        }
        let ce = spec.num_classes * spec.num_experts;
        init_linear(&mut params, seed, "gate", x_dim, ce);
        init_linear(&mut params, seed, "experts", spec.expert_input_dim(), ce);
        Ok(Self {
            spec,
            params,
            buffers,
            seed,
        })
    }

    pub fn has_lc(&self) -> bool {
        self.params.contains("lc.out.w")
    }

    /// Create the latent-concept head. Its output projection is zero, so
    /// predictions do not change at the moment of attachment.
    pub fn attach_lc(&mut self) -> Result<()> {
        let lc = self
            .spec
            .lc_head
            .clone()
            .ok_or_else(|| Error::Config("model spec has no lc_head to attach".into()))?;
        if !self.has_lc() {
            init_latent_concepts(
                &mut self.params,
                &mut self.buffers,
                self.seed,
                self.spec.num_classes,
                &lc,
            );
        }
        Ok(())
    }

    fn check_input(&self, input: &Input<'_>) -> Result<()> {
        let d = self.spec.input_dim;
        match (input, self.spec.pooling.is_frame_level()) {
            (Input::Videos(t), false) => {
                if t.shape().len() != 2 || t.shape()[1] != d {
                    return Err(Error::shape(
                        "model input",
                        format!("expected [B, {d}], got {:?}", t.shape()),
                    ));
                }
            }
            (Input::Frames(fs), true) => {
                if let Some((i, f)) = fs
                    .iter()
                    .enumerate()
                    .find(|(_, f)| f.shape().len() != 2 || f.shape()[1] != d)
                {
                    return Err(Error::shape(
                        "model input",
                        format!("video {i}: expected [T, {d}] frames, got {:?}", f.shape()),
                    ));
                }
            }
            (Input::Videos(_), true) => {
                return Err(Error::Config("frame-level model given video-level features".into()))
            }
            (Input::Frames(_), false) => return Err(Error::Config("video-level model given frame sequences".into())),
        }
        if input.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        Ok(())
    }

    /// Record a forward pass on `graph`.
    ///
    /// Train mode uses batch statistics (and updates the running ones) and
    /// draws dropout masks from `dropout`.
    pub fn forward(
        &mut self,
        graph: &mut Graph,
        input: Input<'_>,
        dropout: &mut DropoutStreams,
        keep_prob: f64,
        freeze: Freeze,
    ) -> Result<Forward> {
        self.check_input(&input)?;
        let lc_active = self.has_lc();
        let Model {
            spec, params, buffers, ..
        } = self;
        let mut ctx = Ctx::new(graph, params, buffers, dropout, keep_prob).frozen(freeze);
        let x = match input {
            Input::Videos(t) => ctx.graph.constant(t.clone()),
            Input::Frames(videos) => {
                let mut pooled = Vec::with_capacity(videos.len());
                for f in videos {
                    let fv = ctx.graph.constant(f.clone());
                    pooled.push(match spec.pooling {
                        Pooling::AttentiveDbof { .. } => attentive_dbof(&mut ctx, fv)?,
                        Pooling::NetVlad { assignment, .. } => netvlad(&mut ctx, fv, assignment)?,
                        Pooling::None => unreachable!("checked by check_input"),
                    });
                }
                ctx.graph.concat(&pooled, 0)?
            }
        };
        let rep = match spec.kind {
            ModelKind::MoE => x,
            ModelKind::MoRE => residual_block(
                &mut ctx,
                "residual",
                x,
                spec.expert_hidden,
                spec.skip,
                spec.residual_activation,
            )?,
            ModelKind::MoHCE => hypercolumn(&mut ctx, "hc", x, &spec.hypercolumn_depths)?,
        };
        let mut probs = mixture_of_experts(&mut ctx, x, rep, spec.num_classes, spec.num_experts)?;
        if lc_active {
            let lc = spec.lc_head.as_ref().expect("lc params imply an lc spec");
            probs = latent_concepts(&mut ctx, probs, lc)?;
        }
        Ok(Forward {
            probs,
            params: ctx.into_bound(),
        })
    }

    /// Eval-mode confidences `[B × C]`, computed in parallel chunks.
    pub fn predict(&self, input: Input<'_>) -> Result<Tensor> {
        self.check_input(&input)?;
        let n = input.len();
        let c = self.spec.num_classes;
        let starts: Vec<usize> = (0..n).step_by(PREDICT_CHUNK).collect();
        let chunks: Vec<Vec<f64>> = starts
            .par_iter()
            .map(|&s| {
                let e = (s + PREDICT_CHUNK).min(n);
                let mut model = self.clone();
                let mut graph = Graph::new(Mode::Eval);
                let mut dropout = DropoutStreams::new(0, 0);
                let owned;
                let part = match input {
                    Input::Videos(t) => {
                        owned = Tensor::new(
                            &[e - s, t.dims2().1],
                            t.values()[s * t.dims2().1..e * t.dims2().1].to_vec(),
                        )?;
                        Input::Videos(&owned)
                    }
                    Input::Frames(f) => Input::Frames(&f[s..e]),
                };
                let out = model.forward(&mut graph, part, &mut dropout, 1.0, Freeze::Everything)?;
                Ok(graph.value(out.probs).values().to_vec())
            })
            .collect::<Result<_>>()?;
        Tensor::new(&[n, c], chunks.concat())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::spec::{Aggregation, LCSpec};
    use crate::rng::seeded;
    use rand::Rng as _;

    fn videos(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = seeded(seed);
        Tensor::new(&[n, d], (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn zero_residual_reduces_to_moe() {
        let (d, c, e) = (6, 4, 3);
        let mut more = Model::new(ModelSpec::more(d, c, e, d), 3).unwrap();
        more.params.get_mut("residual.w").unwrap().values_mut().fill(0.0);
        let mut moe = Model::new(ModelSpec::moe(d, c, e), 3).unwrap();
        for name in ["gate.w", "gate.b", "experts.w", "experts.b"] {
            moe.params.insert(name, more.params.get(name).unwrap().clone());
        }
        let x = videos(5, d, 1);
        assert_eq!(
            more.predict(Input::Videos(&x)).unwrap(),
            moe.predict(Input::Videos(&x)).unwrap()
        );
    }

    #[test]
    fn outputs_in_open_unit_interval() {
        let x = videos(300, 8, 2);
        for spec in [
            ModelSpec::moe(8, 5, 2),
            ModelSpec::more(8, 5, 2, 12),
            ModelSpec::mohce(8, 5, 2, vec![6, 4]),
        ] {
            let m = Model::new(spec, 9).unwrap();
            let p = m.predict(Input::Videos(&x)).unwrap();
            assert_eq!(p.shape(), &[300, 5]);
            assert!(p.values().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn attach_lc_is_transparent() {
        let spec = ModelSpec::more(6, 4, 2, 8).with_lc(LCSpec {
            latent_dim: 5,
            aggregation: Aggregation::Add,
            ..LCSpec::default()
        });
        let mut m = Model::new(spec, 4).unwrap();
        assert!(!m.has_lc());
        let x = videos(7, 6, 3);
        let before = m.predict(Input::Videos(&x)).unwrap();
        m.attach_lc().unwrap();
        assert!(m.has_lc());
        assert_eq!(before, m.predict(Input::Videos(&x)).unwrap());
    }

    #[test]
    fn input_kind_and_width_checked() {
        let m = Model::new(ModelSpec::moe(4, 3, 2), 1).unwrap();
        assert!(m.predict(Input::Videos(&videos(2, 5, 1))).is_err());
        let frames = vec![videos(3, 4, 1)];
        assert!(m.predict(Input::Frames(&frames)).is_err());
    }
}
