// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DropoutSite, ModelConfig, ModelParams};
use crate::autodiff::{Graph, Tensor, Var, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::rng::{derive, seeded, stream_id, SeededRng};
use crate::taskgen::{layout, McqExample, Vocab, N_OPTIONS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Forces dropout at one site with a given rate, in any mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropoutOverride {
    pub site: DropoutSite,
    pub rate: f64,
}

impl DropoutOverride {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1]", self.rate)));
        }
        Ok(())
    }
}

/// Inverted-dropout masks for one sequence, one entry per layer.
///
/// Attention site: `probs[l]` is `[heads, T, T]` over attention
/// probabilities and `act[l]` is `[T, d_model]` over the output-projection
/// input. MLP site: `probs` is empty and `act[l]` is `[T, d_ff]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqMasks {
    pub site: DropoutSite,
    pub probs: Vec<Vec<f64>>,
    pub act: Vec<Vec<f64>>,
}

impl SeqMasks {
    /// Samples masks, or `None` when the rate or site disables dropout.
    pub fn sample(
        cfg: &ModelConfig,
        seq_len: usize,
        site: DropoutSite,
        rate: f64,
        rng: &mut SeededRng,
    ) -> Option<SeqMasks> {
        if rate == 0.0 || site == DropoutSite::None {
            return None;
        }
        let keep = 1.0 - rate;
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    if keep > 0.0 && rng.random::<f64>() < keep {
                        1.0 / keep
                    } else {
                        0.0
                    }
                })
                .collect()
        };
        let (t, h) = (seq_len, cfg.n_heads);
        let mut probs = Vec::new();
        let mut act = Vec::new();
        for _ in 0..cfg.n_layers {
            match site {
                DropoutSite::Attention => {
                    probs.push(draw(h * t * t));
                    act.push(draw(t * cfg.d_model));
                }
                DropoutSite::Mlp => act.push(draw(t * cfg.d_ff)),
                DropoutSite::None => unreachable!(),
            }
        }
        Some(SeqMasks { site, probs, act })
    }
}

/// Graph handles of every parameter tensor.
pub(crate) struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    /// Inserts all parameters as leaves; `trainable` picks the ones that get
    /// gradients.
    pub(crate) fn insert(g: &mut Graph, params: &ModelParams, trainable: &dyn Fn(&str) -> bool) -> Self {
        let vars = params
            .tensors
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) {
                    g.leaf(t.clone().with_grad())
                } else {
                    g.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        ParamVars { vars }
    }

    pub(crate) fn get(&self, name: &str) -> Var {
        self.vars[name]
    }

    /// Gradients of every trainable tensor after `backward`.
    pub(crate) fn grads(&self, g: &Graph) -> BTreeMap<String, Vec<f64>> {
        self.vars
            .iter()
            .filter_map(|(name, &v)| g.grad(v).map(|gr| (name.clone(), gr.to_vec())))
            .collect()
    }
}

pub(crate) struct BatchOutputs {
    /// `[n_seq * T, vocab]`, or one row per requested logit row.
    pub logits: Var,
    /// Final-norm residual, `[n_seq * T, d_model]`.
    pub hidden: Var,
    /// Residual after each block, `[n_seq * T, d_model]`.
    pub residuals: Vec<Var>,
    pub seq_len: usize,
}

/// Builds the forward graph for equal-length sequences stacked row-wise.
pub(crate) fn build_batch(
    g: &mut Graph,
    cfg: &ModelConfig,
    pv: &ParamVars,
    seqs: &[&[usize]],
    masks: Option<&[SeqMasks]>,
    logit_rows: Option<&[usize]>,
) -> Result<BatchOutputs> {
    let t = seqs.first().map_or(0, |s| s.len());
    if t == 0 || seqs.iter().any(|s| s.len() != t) {
        return Err(Error::Shape("batch needs equal, non-empty sequence lengths".into()));
    }
    if t > cfg.max_seq_len {
        return Err(Error::Shape(format!(
            "sequence length {t} > max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    if let Some(&bad) = seqs.iter().flat_map(|s| s.iter()).find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::Index(format!("token id {bad} >= vocab {}", cfg.vocab_size)));
    }
    if let Some(m) = masks {
        if m.len() != seqs.len() {
            return Err(Error::Shape("one mask set per sequence required".into()));
        }
    }
    let concat = |pick: &dyn Fn(&SeqMasks) -> &Vec<f64>| -> Option<Vec<f64>> {
        masks.map(|ms| ms.iter().flat_map(|m| pick(m).iter().copied()).collect())
    };
    let site = masks.and_then(|m| m.first()).map_or(DropoutSite::None, |m| m.site);

    let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
    let pos: Vec<usize> = (0..seqs.len()).flat_map(|_| 0..t).collect();
    let tok = g.embedding(pv.get("tok_emb"), &ids)?;
    let pe = g.gather_rows(pv.get("pos_emb"), &pos)?;
    let mut x = g.add(tok, pe)?;
    let mut residuals = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let p = |s: &str| pv.get(&format!("blocks.{l}.{s}"));
        let h = g.layer_norm(x, p("ln1.gain"), p("ln1.bias"), LAYER_NORM_EPS)?;
        let q = g.matmul(h, p("attn.wq"))?;
        let k = g.matmul(h, p("attn.wk"))?;
        let v = g.matmul(h, p("attn.wv"))?;
        let attn_site = site == DropoutSite::Attention;
        let prob_mask = if attn_site { concat(&|m| &m.probs[l]) } else { None };
        let mut a = g.causal_attention(q, k, v, t, cfg.n_heads, prob_mask)?;
        if attn_site {
            a = g.mul_const(a, concat(&|m| &m.act[l]).unwrap_or_default())?;
        }
        let o = g.matmul(a, p("attn.wo"))?;
        x = g.add(x, o)?;

        let h2 = g.layer_norm(x, p("ln2.gain"), p("ln2.bias"), LAYER_NORM_EPS)?;
        let f = g.matmul(h2, p("mlp.w1"))?;
        let f = g.add_bias(f, p("mlp.b1"))?;
        let mut f = g.relu(f)?;
        if site == DropoutSite::Mlp {
            f = g.mul_const(f, concat(&|m| &m.act[l]).unwrap_or_default())?;
        }
        let f = g.matmul(f, p("mlp.w2"))?;
        let f = g.add_bias(f, p("mlp.b2"))?;
        x = g.add(x, f)?;
        residuals.push(x);
    }
    let hidden = g.layer_norm(x, pv.get("ln_f.gain"), pv.get("ln_f.bias"), LAYER_NORM_EPS)?;
    let head_in = match logit_rows {
        Some(rows) => g.gather_rows(hidden, rows)?,
        None => hidden,
    };
    let logits = g.matmul(head_in, pv.get("head.w"))?;
    Ok(BatchOutputs {
        logits,
        hidden,
        residuals,
        seq_len: t,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `[T, vocab]`
    pub logits: Tensor,
    /// Final-norm residual at each requested position.
    pub tapped_hidden: BTreeMap<usize, Vec<f64>>,
    pub mode: Mode,
}

/// Single-sequence forward pass. In train mode the config's dropout applies;
/// an override applies in either mode and replaces it. `rng` is only drawn
/// from when dropout is active.
pub fn forward(
    params: &ModelParams,
    tokens: &[usize],
    mode: Mode,
    dropout_override: Option<&DropoutOverride>,
    taps: &[usize],
    rng: &mut SeededRng,
) -> Result<ForwardOutput> {
    let cfg = &params.config;
    if let Some(&bad) = taps.iter().find(|&&i| i >= tokens.len()) {
        return Err(Error::Index(format!("tap {bad} outside sequence of {}", tokens.len())));
    }
    let (site, rate) = match (dropout_override, mode) {
        (Some(o), _) => {
            o.validate()?;
            (o.site, o.rate)
        }
        (None, Mode::Train) => (cfg.dropout_site, cfg.effective_dropout()),
        (None, Mode::Eval) => (DropoutSite::None, 0.0),
    };
    let masks = SeqMasks::sample(cfg, tokens.len(), site, rate, rng);
    let mut g = Graph::new();
    let pv = ParamVars::insert(&mut g, params, &|_| false);
    let out = build_batch(
        &mut g,
        cfg,
        &pv,
        &[tokens],
        masks.as_ref().map(std::slice::from_ref),
        None,
    )?;
    let hidden = g.value(out.hidden);
    let tapped_hidden = taps.iter().map(|&i| (i, hidden.row(i).to_vec())).collect();
    Ok(ForwardOutput {
        logits: g.value(out.logits).clone(),
        tapped_hidden,
        mode,
    })
}

/// Result of answering one question.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerOutcome {
    pub choice: usize,
    /// Softmax over the four letter logits at the answer position.
    pub letter_probs: [f64; N_OPTIONS],
    /// Residual at the end of the question.
    pub hidden_pre: Vec<f64>,
    /// Residual at the emitted letter.
    pub hidden_post: Vec<f64>,
}

const ANSWER_CHUNK: usize = 64;

/// Answers a chunk of questions. Each sequence is the prompt plus one letter
/// slot; the letter is chosen from the logits at `=` (which cannot see the
/// slot), then written into the slot and the pass repeated with the same
/// masks for sequences where the placeholder was wrong.
fn answer_chunk(
    params: &ModelParams,
    vocab: &Vocab,
    examples: &[&McqExample],
    masks: Option<Vec<SeqMasks>>,
) -> Result<Vec<AnswerOutcome>> {
    let letters = vocab.letter_ids();
    let t = layout::LETTER_POS + 1;
    let mut seqs = Vec::with_capacity(examples.len());
    for ex in examples {
        ex.validate()?;
        let mut ids = vocab.encode(&ex.question_tokens)?;
        ids.push(letters[0]);
        seqs.push(ids);
    }
    let run = |seqs: &[Vec<usize>], masks: Option<&[SeqMasks]>| -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let pv = ParamVars::insert(&mut g, params, &|_| false);
        let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
        let out = build_batch(&mut g, &params.config, &pv, &refs, masks, None)?;
        Ok((g.value(out.logits).clone(), g.value(out.hidden).clone()))
    };

    let (logits, mut hidden) = run(&seqs, masks.as_deref())?;
    let mut outcomes = Vec::with_capacity(examples.len());
    let mut redo = Vec::new();
    for s in 0..seqs.len() {
        let row = logits.row(s * t + layout::ANSWER_POS);
        let z: Vec<f64> = letters.iter().map(|&l| row[l]).collect();
        let mut choice = 0;
        for i in 1..N_OPTIONS {
            if z[i] > z[choice] {
                choice = i;
            }
        }
        let zmax = z[choice];
        let e: Vec<f64> = z.iter().map(|v| (v - zmax).exp()).collect();
        let total: f64 = e.iter().sum();
        let mut letter_probs = [0.0; N_OPTIONS];
        for i in 0..N_OPTIONS {
            letter_probs[i] = e[i] / total;
        }
        if choice != 0 {
            seqs[s][layout::LETTER_POS] = letters[choice];
            redo.push(s);
        }
        outcomes.push(AnswerOutcome {
            choice,
            letter_probs,
            hidden_pre: Vec::new(),
            hidden_post: Vec::new(),
        });
    }
    let mut slot_of = vec![None; seqs.len()];
    if !redo.is_empty() {
        let sub: Vec<Vec<usize>> = redo.iter().map(|&s| seqs[s].clone()).collect();
        let sub_masks: Option<Vec<SeqMasks>> = masks.as_ref().map(|m| redo.iter().map(|&s| m[s].clone()).collect());
        let (_, h) = run(&sub, sub_masks.as_deref())?;
        for (j, &s) in redo.iter().enumerate() {
            slot_of[s] = Some(j);
        }
        let first = hidden;
        hidden = h;
        for (s, o) in outcomes.iter_mut().enumerate() {
            let (src, r) = match slot_of[s] {
                Some(j) => (&hidden, j),
                None => (&first, s),
            };
            o.hidden_pre = src.row(r * t + layout::QUESTION_END).to_vec();
            o.hidden_post = src.row(r * t + layout::LETTER_POS).to_vec();
        }
        return Ok(outcomes);
    }
    for (s, o) in outcomes.iter_mut().enumerate() {
        o.hidden_pre = hidden.row(s * t + layout::QUESTION_END).to_vec();
        o.hidden_post = hidden.row(s * t + layout::LETTER_POS).to_vec();
    }
    Ok(outcomes)
}

fn sample_for(
    params: &ModelParams,
    variant: Option<&DropoutOverride>,
    rng: &mut SeededRng,
) -> Result<Option<SeqMasks>> {
    match variant {
        Some(o) => {
            o.validate()?;
            Ok(SeqMasks::sample(
                &params.config,
                layout::LETTER_POS + 1,
                o.site,
                o.rate,
                rng,
            ))
        }
        None => Ok(None),
    }
}

/// Answers one question, drawing any dropout masks from `rng`.
pub fn answer_mcq(
    params: &ModelParams,
    vocab: &Vocab,
    example: &McqExample,
    variant: Option<&DropoutOverride>,
    rng: &mut SeededRng,
) -> Result<AnswerOutcome> {
    let masks = sample_for(params, variant, rng)?.map(|m| vec![m]);
    Ok(answer_chunk(params, vocab, &[example], masks)?.remove(0))
}

/// Answers many questions. Masks for each example come from its own stream
/// keyed by `seed` and the example id, so results do not depend on batch
/// composition or order.
pub fn answer_batch(
    params: &ModelParams,
    vocab: &Vocab,
    examples: &[McqExample],
    variant: Option<&DropoutOverride>,
    seed: u64,
) -> Result<Vec<AnswerOutcome>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(ANSWER_CHUNK) {
        let refs: Vec<&McqExample> = chunk.iter().collect();
        let masks = match variant {
            Some(_) => {
                let mut ms = Vec::with_capacity(chunk.len());
                for ex in chunk {
                    let mut rng = seeded(derive(seed, stream_id("answer"), stream_id(&ex.id)));
                    match sample_for(params, variant, &mut rng)? {
                        Some(m) => ms.push(m),
                        None => break,
                    }
                }
                (ms.len() == chunk.len()).then_some(ms)
            }
            None => None,
        };
        out.extend(answer_chunk(params, vocab, &refs, masks)?);
    }
    Ok(out)
}

/// Exact-match accuracy without dropout.
pub fn evaluate_accuracy(params: &ModelParams, vocab: &Vocab, examples: &[McqExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of an empty set".into()));
    }
    let answers = answer_batch(params, vocab, examples, None, 0)?;
    let correct = answers
        .iter()
        .zip(examples)
        .filter(|(a, e)| a.choice == e.gold_index)
        .count();
    Ok(correct as f64 / examples.len() as f64)
}
