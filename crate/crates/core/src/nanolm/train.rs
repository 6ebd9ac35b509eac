// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::forward::{build_batch, ParamVars, SeqMasks};
use super::ModelParams;
use crate::autodiff::{adam_step, AdamConfig, AdamState, Graph};
use crate::error::{Error, Result};
use crate::rng::{derive, seeded, stream_id};
use crate::taskgen::{layout, McqExample, Vocab};

/// A token sequence with the positions that count as prediction targets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainSequence {
    pub tokens: Vec<usize>,
    /// `loss_mask[i]`: token `i` is predicted from position `i - 1`.
    pub loss_mask: Vec<bool>,
}

impl TrainSequence {
    /// Next-token targets per position.
    pub fn targets(&self) -> Vec<Option<usize>> {
        (0..self.tokens.len())
            .map(|i| {
                let j = i + 1;
                (j < self.tokens.len() && self.loss_mask[j]).then(|| self.tokens[j])
            })
            .collect()
    }
}

/// Prompt, gold letter and gold object; only the last `last_k` answer tokens
/// are targets.
pub fn corpus_from_examples(examples: &[McqExample], vocab: &Vocab, last_k: usize) -> Result<Vec<TrainSequence>> {
    let span = layout::FULL_LEN - layout::LETTER_POS;
    if last_k == 0 || last_k > span {
        return Err(Error::Config(format!("last_k must be in 1..={span}, got {last_k}")));
    }
    examples
        .iter()
        .map(|ex| {
            ex.validate()?;
            let mut tokens = vocab.encode(&ex.question_tokens)?;
            tokens.push(vocab.letter_ids()[ex.gold_index]);
            tokens.push(vocab.id(ex.gold_object())?);
            let loss_mask = (0..tokens.len()).map(|i| i >= layout::FULL_LEN - last_k).collect();
            Ok(TrainSequence { tokens, loss_mask })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmHyper {
    /// Peak learning rate.
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    /// Linear warmup length; afterwards the rate follows a cosine down to
    /// a tenth of the peak.
    #[serde(default)]
    pub warmup: usize,
}

impl LmHyper {
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.steps.saturating_sub(self.warmup).max(1) as f64;
        let frac = ((step - self.warmup) as f64 / span).min(1.0);
        self.lr * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * frac).cos()))
    }
}

impl Default for LmHyper {
    fn default() -> Self {
        LmHyper {
            lr: 3e-3,
            steps: 1500,
            batch: 32,
            seed: 0,
            warmup: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub optimizer: AdamState,
    pub trace: Vec<LossPoint>,
}

/// Stacked row indices that carry a target, with those targets.
pub(crate) fn target_rows<'a>(seqs: impl Iterator<Item = &'a TrainSequence>) -> (Vec<usize>, Vec<usize>) {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    let mut offset = 0;
    for s in seqs {
        for (i, t) in s.targets().into_iter().enumerate() {
            if let Some(t) = t {
                rows.push(offset + i);
                targets.push(t);
            }
        }
        offset += s.tokens.len();
    }
    (rows, targets)
}

fn check_corpus(corpus: &[TrainSequence]) -> Result<usize> {
    let t = corpus.first().map_or(0, |s| s.tokens.len());
    if corpus.is_empty() || t < 2 {
        return Err(Error::Config("empty training corpus".into()));
    }
    for s in corpus {
        if s.tokens.len() != t || s.loss_mask.len() != t {
            return Err(Error::Shape("training sequences must share one length".into()));
        }
    }
    Ok(t)
}

/// Mean masked cross-entropy of `corpus` without dropout.
pub fn masked_ce(params: &ModelParams, corpus: &[TrainSequence]) -> Result<f64> {
    check_corpus(corpus)?;
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in corpus.chunks(128) {
        let mut g = Graph::new();
        let pv = ParamVars::insert(&mut g, params, &|_| false);
        let refs: Vec<&[usize]> = chunk.iter().map(|s| s.tokens.as_slice()).collect();
        let (rows, targets) = target_rows(chunk.iter());
        let n = targets.len();
        if n == 0 {
            continue;
        }
        let out = build_batch(&mut g, &params.config, &pv, &refs, None, Some(&rows))?;
        let loss = g.cross_entropy_logits(out.logits, &targets)?;
        total += g.value(loss).item()? * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::Config("corpus has no target positions".into()));
    }
    Ok(total / count as f64)
}

/// Adam on masked next-token cross-entropy, with epoch-shuffled minibatches
/// and the config's train-mode dropout.
pub fn train_lm(params: &ModelParams, corpus: &[TrainSequence], hyper: &LmHyper) -> Result<TrainOutcome> {
    params.validate()?;
    let t = check_corpus(corpus)?;
    if hyper.batch == 0 || hyper.lr < 0.0 {
        return Err(Error::Config(format!("bad training hyperparameters {hyper:?}")));
    }
    let cfg = params.config.clone();
    let mut state = AdamState::new();
    let mut params = params.clone();
    let mut order_rng = seeded(derive(hyper.seed, stream_id("lm-order"), 0));
    let mut mask_rng = seeded(derive(hyper.seed, stream_id("lm-dropout"), 0));
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = order.len();
    let mut trace = Vec::with_capacity(hyper.steps);
    for step in 0..hyper.steps {
        let mut batch = Vec::with_capacity(hyper.batch);
        while batch.len() < hyper.batch.min(corpus.len()) {
            if cursor == order.len() {
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let masks: Option<Vec<SeqMasks>> = batch
            .iter()
            .map(|_| SeqMasks::sample(&cfg, t, cfg.dropout_site, cfg.effective_dropout(), &mut mask_rng))
            .collect();
        let mut g = Graph::new();
        let pv = ParamVars::insert(&mut g, &params, &|_| true);
        let refs: Vec<&[usize]> = batch.iter().map(|&i| corpus[i].tokens.as_slice()).collect();
        let (rows, targets) = target_rows(batch.iter().map(|&i| &corpus[i]));
        if targets.is_empty() {
            return Err(Error::Config("batch has no target positions".into()));
        }
        let out = build_batch(&mut g, &cfg, &pv, &refs, masks.as_deref(), Some(&rows))?;
        let loss = g.cross_entropy_logits(out.logits, &targets)?;
        let value = g.value(loss).item()?;
        g.backward(loss)?;
        let grads = pv.grads(&g);
        state.begin_step();
        let adam = AdamConfig {
            lr: hyper.lr_at(step),
            ..AdamConfig::default()
        };
        for (name, grad) in &grads {
            let tensor = params.tensors.get_mut(name).expect("grad for known parameter");
            adam_step(name, tensor.data_mut(), grad, &mut state, &adam)?;
        }
        trace.push(LossPoint { step, loss: value });
    }
    params.round_to_storage();
    Ok(TrainOutcome {
        params,
        optimizer: state,
        trace,
    })
}
