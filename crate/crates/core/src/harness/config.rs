// SPDX-License-Identifier: MIT OR Apache-2.0

//! The single JSON document that drives a run.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::forge::{GradAscentCfg, NpoCfg, RmuCfg, StopPolicy, UncertaintyMethod};
use crate::metrics::EceSpec;
use crate::nanolm::{DropoutSite, LmHyper, ModelConfig};
use crate::probe::{Position, ProbeHyper};
use crate::rng::{derive, stream_id};
use crate::taskgen::{CorpusSpec, Split, SplitSizes, Vocab};

/// Which uncertainty methods a run builds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodGrid {
    /// Site swept by the variance selection.
    pub dropout_site: DropoutSite,
    pub dropout_rates: Vec<f64>,
    /// Second site run at the selected rate, for the site ablation.
    pub ablation_site: Option<DropoutSite>,
    pub dropout_seed: u64,
    pub grad_ascent: Option<GradAscentCfg>,
    pub npo: Option<NpoCfg>,
    pub rmu: Option<RmuCfg>,
    pub steering_seed: u64,
}

impl Default for MethodGrid {
    fn default() -> Self {
        MethodGrid {
            dropout_site: DropoutSite::Attention,
            dropout_rates: vec![0.02, 0.05, 0.08, 0.11, 0.14, 0.17, 0.20],
            ablation_site: Some(DropoutSite::Mlp),
            dropout_seed: 7,
            grad_ascent: Some(GradAscentCfg::default()),
            npo: Some(NpoCfg::default()),
            rmu: Some(RmuCfg::default()),
            steering_seed: 3,
        }
    }
}

impl MethodGrid {
    /// Unlearning methods in table order.
    pub fn unlearning(&self) -> Vec<UncertaintyMethod> {
        let mut out = Vec::new();
        if let Some(c) = &self.grad_ascent {
            out.push(UncertaintyMethod::GradAscent(c.clone()));
        }
        if let Some(c) = &self.npo {
            out.push(UncertaintyMethod::Npo(c.clone()));
        }
        if let Some(c) = &self.rmu {
            out.push(UncertaintyMethod::Rmu(c.clone()));
        }
        out
    }

    pub fn dropout_grid(&self) -> Vec<UncertaintyMethod> {
        self.dropout_rates
            .iter()
            .map(|&rate| UncertaintyMethod::Dropout {
                site: self.dropout_site,
                rate,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Recorded for provenance; [`ExperimentConfig::reseed`] derives every
    /// other seed from it.
    pub seed: u64,
    pub corpus: CorpusSpec,
    pub model: ModelConfig,
    pub lm: LmHyper,
    /// Answer tokens supervised during LM training (letter, then object).
    pub lm_last_k: usize,
    pub methods: MethodGrid,
    pub probe: ProbeHyper,
    pub positions: Vec<Position>,
    /// Position whose probes drive the variance selection.
    pub select_position: Position,
    /// Base-model records the selection variance is measured on.
    pub variance_split: Split,
    pub eval_splits: Vec<Split>,
    pub stop: StopPolicy,
    pub ece: EceSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let corpus = CorpusSpec::default();
        let mut model = ModelConfig::toy(Vocab::new(&corpus.symbols).len());
        model.seed = 1;
        ExperimentConfig {
            seed: 0,
            corpus,
            model,
            lm: LmHyper {
                lr: 3e-3,
                steps: 2000,
                batch: 32,
                seed: 1,
                warmup: 100,
            },
            lm_last_k: 2,
            methods: MethodGrid::default(),
            probe: ProbeHyper {
                lr: 5e-3,
                ..ProbeHyper::default()
            },
            positions: Position::ALL.to_vec(),
            select_position: Position::Pre,
            variance_split: Split::EasyVal,
            eval_splits: vec![Split::EasyVal, Split::HardTest],
            stop: StopPolicy::default(),
            ece: EceSpec::default(),
        }
    }
}

impl ExperimentConfig {
    /// A seconds-long configuration with the full pipeline shape: tiny
    /// corpus, tiny model, three dropout rates and short unlearning runs.
    /// The model does not saturate; it exercises plumbing, not findings.
    pub fn smoke() -> Self {
        let corpus = CorpusSpec {
            n_facts_train: 24,
            n_facts_hard: 24,
            n_facts_hard_val: 8,
            n_retain: 24,
            split_sizes: SplitSizes {
                lm_train_renders_per_fact: 4,
                lm_train_arith: 80,
                easy_cal_fact: 24,
                easy_cal_arith: 16,
                easy_val_fact: 16,
                easy_val_arith: 8,
                hard_val: 16,
                hard_test: 24,
            },
            ..CorpusSpec::default()
        };
        let model = ModelConfig {
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 16,
            ..ModelConfig::toy(Vocab::new(&corpus.symbols).len())
        };
        let short = 12;
        ExperimentConfig {
            corpus,
            model,
            lm: LmHyper {
                lr: 3e-3,
                steps: 40,
                batch: 16,
                seed: 1,
                warmup: 5,
            },
            methods: MethodGrid {
                dropout_rates: vec![0.05, 0.1, 0.2],
                grad_ascent: Some(GradAscentCfg {
                    max_steps: short,
                    batch: 8,
                    ..GradAscentCfg::default()
                }),
                npo: Some(NpoCfg {
                    max_rounds: short,
                    batch: 8,
                    ..NpoCfg::default()
                }),
                rmu: Some(RmuCfg {
                    max_steps: short,
                    batch: 8,
                    ..RmuCfg::default()
                }),
                ..MethodGrid::default()
            },
            stop: StopPolicy {
                retain_acc_floor: 0.0,
                forget_loss_ceiling: 1e6,
                eval_every: 4,
            },
            ..ExperimentConfig::default()
        }
    }

    /// Replaces every seed with one derived from `seed`.
    pub fn reseed(&mut self, seed: u64) {
        let d = |name: &str| derive(seed, stream_id(name), 0);
        self.seed = seed;
        self.corpus.seed = d("corpus");
        self.model.seed = d("init");
        self.lm.seed = d("lm");
        self.probe.seed = d("probe");
        self.methods.dropout_seed = d("dropout");
        self.methods.steering_seed = d("steering");
        if let Some(c) = &mut self.methods.grad_ascent {
            c.seed = d("grad-ascent");
        }
        if let Some(c) = &mut self.methods.npo {
            c.seed = d("npo");
        }
        if let Some(c) = &mut self.methods.rmu {
            c.seed = d("rmu");
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        let vocab = Vocab::new(&self.corpus.symbols).len();
        if self.model.vocab_size != vocab {
            return Err(Error::Config(format!(
                "model.vocab_size {} does not match the corpus vocabulary ({vocab})",
                self.model.vocab_size
            )));
        }
        if self.model.dropout_site != DropoutSite::None && self.model.dropout_rate > 0.0 {
            return Err(Error::Config("the base model trains without dropout".into()));
        }
        if !(1..=2).contains(&self.lm_last_k) {
            return Err(Error::Config("lm_last_k must be 1 or 2".into()));
        }
        self.probe.validate()?;
        self.stop.validate()?;
        if self.positions.is_empty() || !self.positions.contains(&self.select_position) {
            return Err(Error::Config(
                "positions must be nonempty and include select_position".into(),
            ));
        }
        if self.eval_splits.is_empty() {
            return Err(Error::Config("eval_splits is empty".into()));
        }
        for s in self.eval_splits.iter().chain([&self.variance_split]) {
            if matches!(s, Split::LmTrain | Split::Retain | Split::EasyCal) {
                return Err(Error::Config(format!("`{s}` cannot be an evaluation split")));
            }
        }
        let m = &self.methods;
        if m.dropout_site == DropoutSite::None || m.ablation_site == Some(DropoutSite::None) {
            return Err(Error::Config("dropout sites must be attention or mlp".into()));
        }
        for method in m.dropout_grid().iter().chain(&m.unlearning()) {
            method.validate(self.model.n_layers)?;
        }
        let mut tags: Vec<String> = m.dropout_grid().iter().map(UncertaintyMethod::tag).collect();
        tags.sort();
        tags.dedup();
        if tags.len() != m.dropout_rates.len() {
            return Err(Error::Config("dropout_rates contains duplicates".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(serde_json::to_vec(self)?)))
    }
}
