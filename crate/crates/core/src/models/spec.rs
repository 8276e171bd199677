use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Experts read the input directly.
    #[serde(rename = "moe")]
    MoE,
    /// Experts read a residual refinement of the input.
    #[serde(rename = "more")]
    MoRE,
    /// Experts read a hypercolumn of stacked-layer activations.
    #[serde(rename = "mohce")]
    MoHCE,
}

/// How the residual block carries `x` when its width changes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipMode {
    /// Zero-pad (widening) or truncate (narrowing).
    #[default]
    Pad,
    /// Learned linear projection.
    Projection,
    /// No skip path: a plain deep MoE.
    None,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Add,
    Max,
    Append,
}

/// Cluster soft-assignment rule for NetVLAD.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assignment {
    /// Softmax over clusters of `w_kᵀE(x_t)`.
    #[default]
    Softmax,
    /// `w_kᵀE(x_t) / Σ_j w_jᵀE(x_t)`, denominator magnitude clamped at 1e-8.
    Linear,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Pooling {
    /// Video-level input: one pooled feature vector per video.
    #[default]
    None,
    AttentiveDbof {
        code_dim: usize,
    },
    #[serde(rename = "netvlad")]
    NetVlad {
        clusters: usize,
        code_dim: usize,
        out_dim: usize,
        #[serde(default)]
        assignment: Assignment,
    },
}

impl Pooling {
    pub fn is_frame_level(&self) -> bool {
        !matches!(self, Pooling::None)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LCSpec {
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    #[serde(default = "default_lc_keep")]
    pub input_dropout_keep: f64,
    #[serde(default)]
    pub aggregation: Aggregation,
    #[serde(default = "default_fire_after")]
    pub fire_after_epochs: usize,
}

fn default_latent_dim() -> usize {
    4096
}
fn default_lc_keep() -> f64 {
    0.8
}
fn default_fire_after() -> usize {
    10
}
fn default_hidden() -> usize {
    4096
}

impl Default for LCSpec {
    fn default() -> Self {
        Self {
            latent_dim: default_latent_dim(),
            input_dropout_keep: default_lc_keep(),
            aggregation: Aggregation::Add,
            fire_after_epochs: default_fire_after(),
        }
    }
}

/// Serializable architecture description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub num_experts: usize,
    /// Width of a video feature vector, or of one frame for frame-level models.
    pub input_dim: usize,
    pub num_classes: usize,
    #[serde(default = "default_hidden")]
    pub expert_hidden: usize,
    #[serde(default)]
    pub hypercolumn_depths: Vec<usize>,
    #[serde(default)]
    pub skip: SkipMode,
    #[serde(default)]
    pub residual_activation: Activation,
    #[serde(default)]
    pub lc_head: Option<LCSpec>,
    #[serde(default)]
    pub pooling: Pooling,
}

impl ModelSpec {
    pub fn moe(input_dim: usize, num_classes: usize, num_experts: usize) -> Self {
        Self {
            kind: ModelKind::MoE,
            num_experts,
            input_dim,
            num_classes,
            expert_hidden: input_dim,
            hypercolumn_depths: Vec::new(),
            skip: SkipMode::Pad,
            residual_activation: Activation::Relu,
            lc_head: None,
            pooling: Pooling::None,
        }
    }

    pub fn more(input_dim: usize, num_classes: usize, num_experts: usize, hidden: usize) -> Self {
        Self {
            kind: ModelKind::MoRE,
            expert_hidden: hidden,
            ..Self::moe(input_dim, num_classes, num_experts)
        }
    }

    pub fn mohce(input_dim: usize, num_classes: usize, num_experts: usize, depths: Vec<usize>) -> Self {
        Self {
            kind: ModelKind::MoHCE,
            hypercolumn_depths: depths,
            ..Self::moe(input_dim, num_classes, num_experts)
        }
    }

    pub fn with_lc(mut self, lc: LCSpec) -> Self {
        self.lc_head = Some(lc);
        self
    }

    pub fn with_pooling(mut self, pooling: Pooling) -> Self {
        self.pooling = pooling;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_experts == 0 {
            return bad("num_experts must be at least 1".into());
        }
        if self.input_dim == 0 || self.num_classes == 0 || self.expert_hidden == 0 {
            return bad("input_dim, num_classes and expert_hidden must be positive".into());
        }
        if self.kind == ModelKind::MoHCE && self.hypercolumn_depths.is_empty() {
            return bad("mohce needs at least one hypercolumn depth".into());
        }
        if self.hypercolumn_depths.contains(&0) {
            return bad("hypercolumn widths must be positive".into());
        }
        if let Some(lc) = &self.lc_head {
            if lc.latent_dim == 0 {
                return bad("lc_head.latent_dim must be positive".into());
            }
            if !(lc.input_dropout_keep > 0.0 && lc.input_dropout_keep <= 1.0) {
                return bad(format!(
                    "lc_head.input_dropout_keep {} outside (0, 1]",
                    lc.input_dropout_keep
                ));
            }
        }
        match self.pooling {
            Pooling::None => {}
            Pooling::AttentiveDbof { code_dim: 0 } => return bad("code_dim must be positive".into()),
            Pooling::NetVlad {
                clusters,
                code_dim,
                out_dim,
                ..
            } if clusters == 0 || code_dim == 0 || out_dim == 0 => {
                return bad("netvlad clusters, code_dim and out_dim must be positive".into())
            }
            _ => {}
        }
        Ok(())
    }

    /// Width of the vector the gate (and, for MoE, the experts) consume.
    pub fn pooled_dim(&self) -> usize {
        match self.pooling {
            Pooling::None => self.input_dim,
            Pooling::AttentiveDbof { code_dim } => code_dim,
            Pooling::NetVlad { out_dim, .. } => out_dim,
        }
    }

    /// Width of the representation the experts consume.
    pub fn expert_input_dim(&self) -> usize {
        match self.kind {
            ModelKind::MoE => self.pooled_dim(),
            ModelKind::MoRE => self.expert_hidden,
            ModelKind::MoHCE => self.hypercolumn_depths.iter().sum(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip_and_defaults() {
        let js = r#"{"kind":"more","num_experts":8,"input_dim":64,"num_classes":50,
                     "expert_hidden":128,"lc_head":{"latent_dim":32},
                     "pooling":{"type":"netvlad","clusters":2,"code_dim":16,"out_dim":24}}"#;
        let s: ModelSpec = serde_json::from_str(js).unwrap();
        assert_eq!(s.kind, ModelKind::MoRE);
        assert_eq!(s.skip, SkipMode::Pad);
        let lc = s.lc_head.as_ref().unwrap();
        assert_eq!(lc.aggregation, Aggregation::Add);
        assert_eq!(lc.fire_after_epochs, 10);
        assert_eq!(s.pooled_dim(), 24);
        let back: ModelSpec = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn unknown_keys_rejected() {
        let js = r#"{"kind":"moe","num_experts":2,"input_dim":4,"num_classes":3,"bogus":1}"#;
        assert!(serde_json::from_str::<ModelSpec>(js).is_err());
    }

    #[test]
    fn validation() {
        assert!(ModelSpec::moe(4, 3, 0).validate().is_err());
        assert!(ModelSpec::mohce(4, 3, 2, vec![]).validate().is_err());
        assert!(ModelSpec::mohce(4, 3, 2, vec![4, 3]).validate().is_ok());
        assert_eq!(ModelSpec::mohce(4, 3, 2, vec![4, 3]).expert_input_dim(), 7);
    }
}
