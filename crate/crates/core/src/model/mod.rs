//! Transformer encoder with additive attention masks, summed
//! token/position/segment embeddings, optional relative position bias, a
//! classifier tied to the token embedding, and hand-written reverse mode.

pub mod linalg;
mod network;
mod params;
pub mod relpos;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::sync::atomic::{AtomicUsize, Ordering};

use num_traits::{Float, FromPrimitive, NumAssign};

pub use linalg::Mat;
pub use network::{ForwardOutput, ForwardTape, Mode};
pub use params::{LayerParams, ModelParameters};

use crate::error::{Error, Result};
use crate::seed::rng_for;

/// Floating-point type the model runs in. `f32` for training, `f64` for
/// gradient checks.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable")
    }

    fn to_f64c(self) -> f64 {
        self.to_f64().expect("finite cast")
    }
}

impl Scalar for f32 {}

impl Scalar for f64 {}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden_size: usize,
    pub heads: usize,
    pub ffn_size: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub relative_buckets: usize,
    pub max_relative_distance: usize,
    pub dropout: f64,
    pub use_relative_bias: bool,
}

impl ModelConfig {
    /// Desk-scale defaults: 4 layers, hidden 128, 4 heads.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            layers: 4,
            hidden_size: 128,
            heads: 4,
            ffn_size: 512,
            vocab_size,
            max_positions: 128,
            relative_buckets: 32,
            max_relative_distance: 128,
            dropout: 0.1,
            use_relative_bias: true,
        }
    }

    /// Base-size dimensions: 12 layers, hidden 768, 12 heads of 64, FFN 3072.
    pub fn paper_size(vocab_size: usize) -> Self {
        ModelConfig {
            layers: 12,
            hidden_size: 768,
            heads: 12,
            ffn_size: 3072,
            max_positions: 512,
            ..Self::desk(vocab_size)
        }
    }

    /// Small model for tests and gradient checks.
    pub fn tiny(vocab_size: usize) -> Self {
        ModelConfig {
            layers: 2,
            hidden_size: 8,
            heads: 2,
            ffn_size: 16,
            vocab_size,
            max_positions: 32,
            relative_buckets: 8,
            max_relative_distance: 16,
            dropout: 0.0,
            use_relative_bias: true,
        }
    }

    pub fn head_size(&self) -> usize {
        self.hidden_size / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_size", self.hidden_size),
            ("heads", self.heads),
            ("ffn_size", self.ffn_size),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
            ("relative_buckets", self.relative_buckets),
            ("max_relative_distance", self.max_relative_distance),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.hidden_size % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden_size {} is not divisible by heads {}",
                self.hidden_size, self.heads
            )));
        }
        if self.relative_buckets < 4 {
            return Err(Error::Config("relative_buckets must be at least 4".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Model configuration, parameters and a forward-pass counter.
pub struct Transformer<T: Scalar> {
    pub config: ModelConfig,
    pub params: ModelParameters<T>,
    passes: AtomicUsize,
}

impl<T: Scalar> Clone for Transformer<T> {
    fn clone(&self) -> Self {
        Transformer {
            config: self.config.clone(),
            params: self.params.clone(),
            passes: AtomicUsize::new(self.forward_passes()),
        }
    }
}

impl<T: Scalar> Debug for Transformer<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Transformer")
            .field("config", &self.config)
            .field("parameters", &self.params.count())
            .finish()
    }
}

impl<T: Scalar> Transformer<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = ModelParameters::init(&config, &mut rng_for(seed, &[0x1417]));
        Ok(Transformer {
            config,
            params,
            passes: AtomicUsize::new(0),
        })
    }

    pub fn from_parts(config: ModelConfig, params: ModelParameters<T>) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        Ok(Transformer {
            config,
            params,
            passes: AtomicUsize::new(0),
        })
    }

    pub fn forward_passes(&self) -> usize {
        self.passes.load(Ordering::Relaxed)
    }

    pub fn reset_forward_passes(&self) {
        self.passes.store(0, Ordering::Relaxed);
    }

    pub fn cast<U: Scalar>(&self) -> Transformer<U> {
        Transformer {
            config: self.config.clone(),
            params: self.params.cast(),
            passes: AtomicUsize::new(0),
        }
    }

    /// Forward pass without keeping intermediates for backward.
    pub fn eval(
        &self,
        inst: &crate::assembly::PmlmInstance,
        logit_rows: &[usize],
    ) -> Result<ForwardOutput<T>> {
        self.forward(inst, logit_rows, Mode::Eval).map(|(out, _)| out)
    }
}
