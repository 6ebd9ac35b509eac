// SPDX-License-Identifier: MIT OR Apache-2.0

//! A tiny pre-norm causal transformer.
//!
//! Parameters live in a sorted name -> tensor table. The graph is rebuilt on
//! every forward pass; dropout can be switched on at the attention site
//! (attention probabilities and the input of the output projection) or the
//! MLP site (the feed-forward hidden activation), either by the config in
//! train mode or by an explicit [`DropoutOverride`] in any mode.
//!
//! Probe taps read the final-layer residual stream after the final layer
//! norm.

mod checkpoint;
mod forward;
pub(crate) mod train;

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng::seeded;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, TensorEntry, FORMAT_VERSION};
pub use forward::{
    answer_batch, answer_mcq, evaluate_accuracy, forward, AnswerOutcome, DropoutOverride, ForwardOutput, Mode, SeqMasks,
};
pub(crate) use forward::{build_batch, ParamVars};
pub use train::{corpus_from_examples, masked_ce, train_lm, LmHyper, LossPoint, TrainOutcome, TrainSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutSite {
    None,
    Attention,
    Mlp,
}

impl DropoutSite {
    pub fn as_str(self) -> &'static str {
        match self {
            DropoutSite::None => "none",
            DropoutSite::Attention => "attention",
            DropoutSite::Mlp => "mlp",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub dropout_site: DropoutSite,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// The desk-scale default for a given vocabulary size.
    pub fn toy(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_seq_len: 64,
            dropout_site: DropoutSite::None,
            dropout_rate: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.d_model < 2 || self.n_layers == 0 || self.d_ff == 0 {
            return bad(format!("degenerate dimensions in {self:?}"));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1]", self.dropout_rate));
        }
        Ok(())
    }

    /// Dropout rate actually applied in train mode.
    pub fn effective_dropout(&self) -> f64 {
        if self.dropout_site == DropoutSite::None {
            0.0
        } else {
            self.dropout_rate
        }
    }

    /// Every parameter name with its shape, in sorted order.
    pub fn param_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let (d, f) = (self.d_model, self.d_ff);
        let mut m = BTreeMap::new();
        for l in 0..self.n_layers {
            let p = |s: &str| format!("blocks.{l}.{s}");
            for w in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
                m.insert(p(w), vec![d, d]);
            }
            for n in ["ln1.gain", "ln1.bias", "ln2.gain", "ln2.bias"] {
                m.insert(p(n), vec![d]);
            }
            m.insert(p("mlp.w1"), vec![d, f]);
            m.insert(p("mlp.b1"), vec![f]);
            m.insert(p("mlp.w2"), vec![f, d]);
            m.insert(p("mlp.b2"), vec![d]);
        }
        m.insert("tok_emb".into(), vec![self.vocab_size, d]);
        m.insert("pos_emb".into(), vec![self.max_seq_len, d]);
        m.insert("ln_f.gain".into(), vec![d]);
        m.insert("ln_f.bias".into(), vec![d]);
        m.insert("head.w".into(), vec![d, self.vocab_size]);
        m
    }
}

/// Layer index a parameter belongs to, or `None` for embeddings, the final
/// norm and the head.
pub fn param_layer(name: &str) -> Option<usize> {
    name.strip_prefix("blocks.")?.split('.').next()?.parse().ok()
}

/// Full parameter set of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Index(format!("no parameter `{name}`")))
    }

    pub fn n_params(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Checks names and shapes against the config.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = self.config.param_shapes();
        if expected.len() != self.tensors.len() || expected.keys().zip(self.tensors.keys()).any(|(a, b)| a != b) {
            return Err(Error::Checkpoint("parameter names do not match config".into()));
        }
        for (name, shape) in &expected {
            if self.tensors[name].shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, config implies {shape:?}",
                    self.tensors[name].shape()
                )));
            }
        }
        Ok(())
    }

    /// Rounds every value through `f32`, the checkpoint storage precision.
    pub fn round_to_storage(&mut self) {
        for t in self.tensors.values_mut() {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

/// Scaled-normal weights (std `1/sqrt(fan_in)`), zero biases, unit gains.
pub fn init_model(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = seeded(seed);
    let mut tensors = BTreeMap::new();
    for (name, shape) in config.param_shapes() {
        let n: usize = shape.iter().product();
        let data = if name.ends_with(".gain") {
            vec![1.0; n]
        } else if name.contains(".b") {
            vec![0.0; n]
        } else {
            let fan_in = if name.ends_with("mlp.w2") {
                config.d_ff
            } else {
                config.d_model
            };
            let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).map_err(|e| Error::Config(e.to_string()))?;
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        };
        tensors.insert(name, Tensor::new(shape, data)?);
    }
    let mut params = ModelParams {
        config: config.clone(),
        tensors,
    };
    params.round_to_storage();
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig::toy(40)
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_model(&cfg(), 5).unwrap();
        let b = init_model(&cfg(), 5).unwrap();
        assert_eq!(a, b);
        let c = init_model(&cfg(), 6).unwrap();
        assert!(a.tensors.iter().any(|(k, t)| c.tensors[k] != *t));
    }

    #[test]
    fn init_weight_scale() {
        // sample std of a 64x64 matrix should sit near 1/sqrt(64) = 0.125
        let p = init_model(&cfg(), 1).unwrap();
        for name in ["blocks.0.attn.wq", "blocks.1.mlp.w1", "tok_emb"] {
            let d = p.tensors[name].data();
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            let sd = (d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d.len() as f64).sqrt();
            assert!((sd / 0.125 - 1.0).abs() < 0.2, "{name}: sd {sd}");
        }
        assert!(p.tensors["blocks.0.mlp.b1"].data().iter().all(|&v| v == 0.0));
        assert!(p.tensors["ln_f.gain"].data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn names_are_sorted_and_complete() {
        let p = init_model(&cfg(), 1).unwrap();
        p.validate().unwrap();
        let names: Vec<&String> = p.tensors.keys().collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
        assert_eq!(names.len(), 2 * 12 + 5);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = cfg();
        c.n_heads = 3;
        assert!(init_model(&c, 0).is_err());
        let mut c = cfg();
        c.dropout_rate = 1.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn layer_of_param() {
        assert_eq!(param_layer("blocks.1.attn.wq"), Some(1));
        assert_eq!(param_layer("tok_emb"), None);
    }

    #[test]
    fn site_none_forces_zero_rate() {
        let mut c = cfg();
        c.dropout_rate = 0.5;
        assert_eq!(c.effective_dropout(), 0.0);
        c.dropout_site = DropoutSite::Mlp;
        assert_eq!(c.effective_dropout(), 0.5);
    }
}
