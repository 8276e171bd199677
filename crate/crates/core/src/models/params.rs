use std::collections::BTreeMap;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{child, DropoutStreams};
use crate::tensor::{BnStats, Graph, Tensor, Var};

/// Trainable tensors keyed by layer path, e.g. `residual.w`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    map: BTreeMap<String, Tensor>,
}

/// Non-trainable batch-norm running statistics keyed by layer path.
pub type Buffers = BTreeMap<String, BnStats>;

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    /// Concatenate every value in name order.
    pub fn flatten(&self) -> Vec<f64> {
        self.map.values().flat_map(|t| t.values().iter().copied()).collect()
    }

    /// Inverse of [`Params::flatten`].
    pub fn assign_flat(&mut self, flat: &[f64]) {
        let mut at = 0;
        for t in self.map.values_mut() {
            let n = t.len();
            t.values_mut().copy_from_slice(&flat[at..at + n]);
            at += n;
        }
    }

    /// Round every value through `f32`, as a checkpoint stores it.
    pub fn quantize_f32(&mut self) {
        for t in self.map.values_mut() {
            t.values_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

/// Glorot-uniform `[fan_in × fan_out]` matrix drawn from the `init/<name>` stream.
pub fn glorot(seed: u64, name: &str, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut rng = child(seed, &format!("init/{name}"), 0);
    let v = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(&[fan_in, fan_out], v).expect("glorot: positive fans")
}

/// Insert `prefix.w` (Glorot) and `prefix.b` (zero).
pub fn init_linear(params: &mut Params, seed: u64, prefix: &str, fan_in: usize, fan_out: usize) {
    params.insert(
        format!("{prefix}.w"),
        glorot(seed, &format!("{prefix}.w"), fan_in, fan_out),
    );
    params.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]));
}

/// Insert `prefix.gamma` (one), `prefix.beta` (zero) and fresh running stats.
pub fn init_batch_norm(params: &mut Params, buffers: &mut Buffers, prefix: &str, width: usize) {
    params.insert(format!("{prefix}.gamma"), Tensor::filled(&[width], 1.0));
    params.insert(format!("{prefix}.beta"), Tensor::zeros(&[width]));
    buffers.insert(prefix.to_string(), BnStats::new(width));
}

/// Which parameters a [`Ctx`] binds without gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Freeze {
    #[default]
    Nothing,
    Everything,
    /// Everything except the latent-concept head (`lc.*`).
    Backbone,
}

impl Freeze {
    pub fn covers(self, name: &str) -> bool {
        match self {
            Freeze::Nothing => false,
            Freeze::Everything => true,
            Freeze::Backbone => !name.starts_with("lc."),
        }
    }
}

/// Forward-pass context: binds parameters onto a graph on first use and
/// owns the per-site dropout streams and running statistics.
pub struct Ctx<'a> {
    pub graph: &'a mut Graph,
    params: &'a Params,
    buffers: &'a mut Buffers,
    dropout: &'a mut DropoutStreams,
    bound: BTreeMap<String, Var>,
    freeze: Freeze,
    /// Keep probability of the backbone dropout layers.
    pub keep_prob: f64,
}

impl<'a> Ctx<'a> {
    pub fn new(
        graph: &'a mut Graph,
        params: &'a Params,
        buffers: &'a mut Buffers,
        dropout: &'a mut DropoutStreams,
        keep_prob: f64,
    ) -> Self {
        Self {
            graph,
            params,
            buffers,
            dropout,
            bound: BTreeMap::new(),
            freeze: Freeze::Nothing,
            keep_prob,
        }
    }

    /// Bind the selected parameters as constants (no gradient bookkeeping).
    pub fn frozen(mut self, freeze: Freeze) -> Self {
        self.freeze = freeze;
        self
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?
            .clone();
        let v = if self.freeze.covers(name) {
            self.graph.constant(t)
        } else {
            self.graph.param(t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    pub fn into_bound(self) -> BTreeMap<String, Var> {
        self.bound
    }

    /// `x · prefix.w + prefix.b`.
    pub fn linear(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        let h = self.graph.matmul(x, w)?;
        self.graph.add_row(h, b)
    }

    pub fn batch_norm(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        let stats = self
            .buffers
            .get_mut(prefix)
            .ok_or_else(|| Error::Config(format!("missing batch-norm statistics `{prefix}`")))?;
        self.graph.batch_norm(x, gamma, beta, stats)
    }

    pub fn dropout(&mut self, site: &str, x: Var, keep_prob: f64) -> Result<Var> {
        let rng = self.dropout.stream(site);
        self.graph.dropout(x, keep_prob, rng)
    }
}
