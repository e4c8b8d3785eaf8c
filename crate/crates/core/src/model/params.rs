use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::linalg::Mat;
use super::{ModelConfig, Scalar};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub query_w: Mat<T>,
    pub query_b: Mat<T>,
    pub key_w: Mat<T>,
    pub key_b: Mat<T>,
    pub value_w: Mat<T>,
    pub value_b: Mat<T>,
    pub out_w: Mat<T>,
    pub out_b: Mat<T>,
    pub ln1_gain: Mat<T>,
    pub ln1_bias: Mat<T>,
    pub ffn_in_w: Mat<T>,
    pub ffn_in_b: Mat<T>,
    pub ffn_out_w: Mat<T>,
    pub ffn_out_b: Mat<T>,
    pub ln2_gain: Mat<T>,
    pub ln2_bias: Mat<T>,
}

/// All trainable tensors. The output classifier is the token embedding
/// table itself; only its bias is separate.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters<T> {
    pub token_embedding: Mat<T>,
    pub position_embedding: Mat<T>,
    pub segment_embedding: Mat<T>,
    /// heads × buckets, shared by every layer.
    pub relative_bias: Mat<T>,
    pub output_bias: Mat<T>,
    pub layers: Vec<LayerParams<T>>,
}

macro_rules! layer_fields {
    ($m:ident) => {
        $m!(
            query_w => "attention.query.weight",
            query_b => "attention.query.bias",
            key_w => "attention.key.weight",
            key_b => "attention.key.bias",
            value_w => "attention.value.weight",
            value_b => "attention.value.bias",
            out_w => "attention.output.weight",
            out_b => "attention.output.bias",
            ln1_gain => "attention.norm.gain",
            ln1_bias => "attention.norm.bias",
            ffn_in_w => "ffn.input.weight",
            ffn_in_b => "ffn.input.bias",
            ffn_out_w => "ffn.output.weight",
            ffn_out_b => "ffn.output.bias",
            ln2_gain => "ffn.norm.gain",
            ln2_bias => "ffn.norm.bias"
        )
    };
}

impl<T: Scalar> LayerParams<T> {
    fn zeros(c: &ModelConfig) -> Self {
        let d = c.hidden_size;
        let f = c.ffn_size;
        LayerParams {
            query_w: Mat::zeros(d, d),
            query_b: Mat::zeros(1, d),
            key_w: Mat::zeros(d, d),
            key_b: Mat::zeros(1, d),
            value_w: Mat::zeros(d, d),
            value_b: Mat::zeros(1, d),
            out_w: Mat::zeros(d, d),
            out_b: Mat::zeros(1, d),
            ln1_gain: Mat::zeros(1, d),
            ln1_bias: Mat::zeros(1, d),
            ffn_in_w: Mat::zeros(d, f),
            ffn_in_b: Mat::zeros(1, f),
            ffn_out_w: Mat::zeros(f, d),
            ffn_out_b: Mat::zeros(1, d),
            ln2_gain: Mat::zeros(1, d),
            ln2_bias: Mat::zeros(1, d),
        }
    }

    fn named(&self, prefix: &str) -> Vec<(String, &Mat<T>)> {
        macro_rules! collect {
            ($($f:ident => $n:literal),*) => {
                vec![$((format!("{prefix}.{}", $n), &self.$f)),*]
            };
        }
        layer_fields!(collect)
    }

    fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Mat<T>)> {
        macro_rules! collect {
            ($($f:ident => $n:literal),*) => {
                vec![$((format!("{prefix}.{}", $n), &mut self.$f)),*]
            };
        }
        layer_fields!(collect)
    }
}

impl<T: Scalar> ModelParameters<T> {
    pub fn zeros(c: &ModelConfig) -> Self {
        ModelParameters {
            token_embedding: Mat::zeros(c.vocab_size, c.hidden_size),
            position_embedding: Mat::zeros(c.max_positions, c.hidden_size),
            segment_embedding: Mat::zeros(2, c.hidden_size),
            relative_bias: Mat::zeros(c.heads, c.relative_buckets),
            output_bias: Mat::zeros(1, c.vocab_size),
            layers: (0..c.layers).map(|_| LayerParams::zeros(c)).collect(),
        }
    }

    /// Weights and embeddings from N(0, 0.02²); biases and relative bias 0;
    /// normalization gains 1.
    pub fn init<R: Rng + ?Sized>(c: &ModelConfig, rng: &mut R) -> Self {
        let mut p = Self::zeros(c);
        let normal = Normal::new(0.0f64, 0.02).expect("valid std");
        for (name, t) in p.named_mut() {
            if name.ends_with(".gain") {
                t.data.iter_mut().for_each(|v| *v = T::one());
            } else if name.ends_with("weight") || name.starts_with("embeddings.") {
                t.data
                    .iter_mut()
                    .for_each(|v| *v = T::of(normal.sample(rng)));
            }
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.named_mut()
            .into_iter()
            .for_each(|(_, t)| t.data.iter_mut().for_each(|v| *v = T::zero()));
        z
    }

    /// Every tensor with a stable dotted name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Mat<T>)> {
        let mut out = vec![
            ("embeddings.token".to_string(), &self.token_embedding),
            ("embeddings.position".to_string(), &self.position_embedding),
            ("embeddings.segment".to_string(), &self.segment_embedding),
            ("attention.relative_bias".to_string(), &self.relative_bias),
            ("output.bias".to_string(), &self.output_bias),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.extend(l.named(&format!("layers.{i}")));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Mat<T>)> {
        let mut out = vec![
            ("embeddings.token".to_string(), &mut self.token_embedding),
            ("embeddings.position".to_string(), &mut self.position_embedding),
            ("embeddings.segment".to_string(), &mut self.segment_embedding),
            ("attention.relative_bias".to_string(), &mut self.relative_bias),
            ("output.bias".to_string(), &mut self.output_bias),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.extend(l.named_mut(&format!("layers.{i}")));
        }
        out
    }

    pub fn count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn add_assign(&mut self, other: &ModelParameters<T>) {
        for ((_, a), (_, b)) in self.named_mut().into_iter().zip(other.named()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: T) {
        self.named_mut().into_iter().for_each(|(_, t)| t.scale(s));
    }

    pub fn global_norm(&self) -> f64 {
        self.named()
            .iter()
            .flat_map(|(_, t)| t.data.iter())
            .map(|v| {
                let x = v.to_f64c();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<String> {
        self.named()
            .into_iter()
            .find(|(_, t)| !t.is_finite())
            .map(|(n, _)| n)
    }

    pub fn cast<U: Scalar>(&self) -> ModelParameters<U> {
        let cast_layer = |l: &LayerParams<T>| LayerParams {
            query_w: l.query_w.cast(),
            query_b: l.query_b.cast(),
            key_w: l.key_w.cast(),
            key_b: l.key_b.cast(),
            value_w: l.value_w.cast(),
            value_b: l.value_b.cast(),
            out_w: l.out_w.cast(),
            out_b: l.out_b.cast(),
            ln1_gain: l.ln1_gain.cast(),
            ln1_bias: l.ln1_bias.cast(),
            ffn_in_w: l.ffn_in_w.cast(),
            ffn_in_b: l.ffn_in_b.cast(),
            ffn_out_w: l.ffn_out_w.cast(),
            ffn_out_b: l.ffn_out_b.cast(),
            ln2_gain: l.ln2_gain.cast(),
            ln2_bias: l.ln2_bias.cast(),
        };
        ModelParameters {
            token_embedding: self.token_embedding.cast(),
            position_embedding: self.position_embedding.cast(),
            segment_embedding: self.segment_embedding.cast(),
            relative_bias: self.relative_bias.cast(),
            output_bias: self.output_bias.cast(),
            layers: self.layers.iter().map(cast_layer).collect(),
        }
    }

    /// Checks every tensor shape against `c`.
    pub fn check_shapes(&self, c: &ModelConfig) -> Result<()> {
        let expected = ModelParameters::<T>::zeros(c);
        if self.layers.len() != c.layers {
            return Err(Error::Config(format!(
                "parameters have {} layers, config says {}",
                self.layers.len(),
                c.layers
            )));
        }
        for ((name, a), (_, b)) in self.named().into_iter().zip(expected.named()) {
            if (a.rows, a.cols) != (b.rows, b.cols) {
                return Err(Error::Config(format!(
                    "{name} has shape {}x{}, expected {}x{}",
                    a.rows, a.cols, b.rows, b.cols
                )));
            }
        }
        Ok(())
    }
}
