//! The model zoo: gated mixtures of experts over plain, residual-refined or
//! hypercolumn representations, an optional latent-concept head, and
//! frame-level attentive pooling encoders.

mod check;
pub mod checkpoint;
mod hypercolumn;
mod latent;
mod mixture;
mod model;
mod params;
mod pooling;
mod residual;
mod spec;

pub use check::{check_model_gradients, random_problem, Batch};
pub use hypercolumn::hypercolumn;
pub use latent::{init_latent_concepts, latent_concepts};
pub use mixture::mixture_of_experts;
pub use model::{Forward, Input, Model};
pub use params::{glorot, init_batch_norm, init_linear, Buffers, Ctx, Freeze, Params};
pub use pooling::{attentive_dbof, netvlad, netvlad_aggregate, ASSIGNMENT_FLOOR};
pub use residual::residual_block;
pub use spec::{Activation, Aggregation, Assignment, LCSpec, ModelKind, ModelSpec, Pooling, SkipMode};
