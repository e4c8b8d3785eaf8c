//! Pseudo-masked language model (PMLM) pre-training.
//!
//! One combined instance carries the conventional `[MASK]` slots used by the
//! autoencoding objective and appended `[P]` pseudo tokens used by the
//! partially autoregressive objective. Shared position ids plus a
//! leakage-safe attention mask let a single forward pass score both.
//!
//! ```text
//! corpus ─▶ masking ─▶ assembly ─▶ model ─▶ objectives ─▶ checkpoint
//!                          │                    │
//!                          └── audit            └── finetune (cls / seq2seq / beam)
//! ```

pub mod assembly;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod finetune;
pub mod masking;
pub mod model;
pub mod objectives;
pub mod seed;
pub mod verification;

pub use assembly::{
    audit_leakage, build_attention_mask, AttentionMask, LeakageReport, PmlmInstance, TokenCategory,
};
pub use corpus::{PackedInput, Tokenizer, TokenizerMode, Vocab};
pub use error::{Error, Result};
pub use masking::{BlockMaskingPolicy, CorruptionAction, CorruptionPlan, FactorizationOrder};
pub use model::{ModelConfig, ModelParameters, Scalar, Transformer};
pub use objectives::ObjectiveKind;
