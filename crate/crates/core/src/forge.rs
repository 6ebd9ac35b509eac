// SPDX-License-Identifier: MIT OR Apache-2.0

//! Modified models with artificial uncertainty: dropout variants that leave
//! the weights alone, and three unlearning procedures (gradient ascent, NPO,
//! RMU) that produce new weights.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{adam_step, AdamConfig, AdamState, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::nanolm::{
    build_batch, corpus_from_examples, evaluate_accuracy, masked_ce, param_layer, train::target_rows, DropoutOverride,
    DropoutSite, ModelParams, ParamVars, TrainSequence,
};
use crate::probe::Source;
use crate::rng::{derive, seeded, stream_id, SeededRng};
use crate::taskgen::{layout, McqExample, Vocab};

/// A model as seen by record extraction: weights plus an optional
/// inference-time dropout override.
#[derive(Debug, Clone)]
pub struct ModelHandle<'a> {
    pub params: &'a ModelParams,
    pub source: Source,
    pub tag: String,
    pub dropout: Option<DropoutOverride>,
    /// Keys the per-example dropout mask streams.
    pub seed: u64,
}

impl<'a> ModelHandle<'a> {
    pub fn base(params: &'a ModelParams) -> Self {
        ModelHandle {
            params,
            source: Source::Base,
            tag: "base".into(),
            dropout: None,
            seed: 0,
        }
    }

    /// Unlearned weights.
    pub fn modified(params: &'a ModelParams, tag: &str) -> Self {
        ModelHandle {
            params,
            source: Source::Variant,
            tag: tag.into(),
            dropout: None,
            seed: 0,
        }
    }
}

/// The base weights routed through a dropout override.
pub fn dropout_variant<'a>(
    params: &'a ModelParams,
    site: DropoutSite,
    rate: f64,
    seed: u64,
) -> Result<ModelHandle<'a>> {
    let o = DropoutOverride { site, rate };
    o.validate()?;
    Ok(ModelHandle {
        params,
        source: Source::Variant,
        tag: dropout_tag(site, rate),
        dropout: Some(o),
        seed,
    })
}

pub fn dropout_tag(site: DropoutSite, rate: f64) -> String {
    let s = match site {
        DropoutSite::Attention => "attn",
        DropoutSite::Mlp => "mlp",
        DropoutSite::None => "none",
    };
    format!("dropout-{s}@{rate:.2}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradAscentCfg {
    pub lr_u: f64,
    pub l2_coeff: f64,
    /// Number of trailing answer tokens in the loss; `None` is the whole span.
    pub last_k: Option<usize>,
    pub max_steps: usize,
    pub batch: usize,
    pub seed: u64,
    /// Rescales each step's gradient to at most this global norm.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl Default for GradAscentCfg {
    fn default() -> Self {
        GradAscentCfg {
            lr_u: 0.02,
            l2_coeff: 0.1,
            last_k: None,
            max_steps: 600,
            batch: 16,
            seed: 0,
            clip_norm: Some(0.2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NpoCfg {
    pub beta: f64,
    pub lr_forget: f64,
    pub lr_retain: f64,
    /// Retain steps after each forget step.
    pub retain_ratio: usize,
    pub max_rounds: usize,
    pub batch: usize,
    pub seed: u64,
    /// Global-norm clip on the forget gradient.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl Default for NpoCfg {
    fn default() -> Self {
        NpoCfg {
            beta: 0.1,
            lr_forget: 0.02,
            lr_retain: 0.005,
            retain_ratio: 1,
            max_rounds: 600,
            batch: 16,
            seed: 0,
            clip_norm: Some(0.2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmuCfg {
    pub target_layer: usize,
    pub steering_coeff: f64,
    pub retain_weight: f64,
    pub lr: f64,
    pub trainable_layers: Vec<usize>,
    pub max_steps: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for RmuCfg {
    fn default() -> Self {
        RmuCfg {
            target_layer: 0,
            steering_coeff: 6.0,
            retain_weight: 1.0,
            lr: 1e-3,
            trainable_layers: vec![0],
            max_steps: 200,
            batch: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UncertaintyMethod {
    Dropout { site: DropoutSite, rate: f64 },
    GradAscent(GradAscentCfg),
    Npo(NpoCfg),
    Rmu(RmuCfg),
}

impl UncertaintyMethod {
    pub fn validate(&self, n_layers: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        match self {
            UncertaintyMethod::Dropout { site, rate } => {
                if *site == DropoutSite::None {
                    return bad("dropout method needs a site".into());
                }
                DropoutOverride {
                    site: *site,
                    rate: *rate,
                }
                .validate()
            }
            UncertaintyMethod::GradAscent(c) => {
                if c.lr_u < 0.0 || c.l2_coeff < 0.0 || c.batch == 0 || c.clip_norm.is_some_and(|n| !(n > 0.0)) {
                    return bad(format!("invalid gradient-ascent config {c:?}"));
                }
                Ok(())
            }
            UncertaintyMethod::Npo(c) => {
                if !(c.beta > 0.0)
                    || c.lr_forget < 0.0
                    || c.lr_retain < 0.0
                    || c.batch == 0
                    || c.clip_norm.is_some_and(|n| !(n > 0.0))
                {
                    return bad(format!("invalid NPO config {c:?}"));
                }
                Ok(())
            }
            UncertaintyMethod::Rmu(c) => {
                if c.target_layer >= n_layers {
                    return bad(format!("target_layer {} >= n_layers {n_layers}", c.target_layer));
                }
                if let Some(l) = c.trainable_layers.iter().find(|&&l| l >= n_layers) {
                    return bad(format!("trainable layer {l} >= n_layers {n_layers}"));
                }
                if c.lr < 0.0 || c.retain_weight < 0.0 || c.batch == 0 {
                    return bad(format!("invalid RMU config {c:?}"));
                }
                Ok(())
            }
        }
    }

    /// Magnitude used to break selection ties.
    pub fn magnitude(&self) -> f64 {
        match self {
            UncertaintyMethod::Dropout { rate, .. } => *rate,
            UncertaintyMethod::GradAscent(c) => c.lr_u,
            UncertaintyMethod::Npo(c) => c.lr_forget,
            UncertaintyMethod::Rmu(c) => c.steering_coeff,
        }
    }

    pub fn tag(&self) -> String {
        match self {
            UncertaintyMethod::Dropout { site, rate } => dropout_tag(*site, *rate),
            UncertaintyMethod::GradAscent(c) => format!("grad-ascent@{}", c.lr_u),
            UncertaintyMethod::Npo(c) => format!("npo@{}", c.lr_forget),
            UncertaintyMethod::Rmu(c) => format!("rmu@{}", c.steering_coeff),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopPolicy {
    pub retain_acc_floor: f64,
    pub forget_loss_ceiling: f64,
    pub eval_every: usize,
}

impl Default for StopPolicy {
    fn default() -> Self {
        StopPolicy {
            retain_acc_floor: 0.85,
            forget_loss_ceiling: 3.0,
            eval_every: 20,
        }
    }
}

impl StopPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.retain_acc_floor) || !(self.forget_loss_ceiling > 0.0) || self.eval_every == 0 {
            return Err(Error::Config(format!("invalid stop policy {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    RetainFloor,
    ForgetCeiling,
    MaxSteps,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::RetainFloor => "retain_floor",
            StopReason::ForgetCeiling => "forget_ceiling",
            StopReason::MaxSteps => "max_steps",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop(StopReason),
}

/// One evaluation during unlearning. Field order is the JSONL key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub step: usize,
    pub forget_loss: f64,
    pub retain_acc: f64,
    pub stopped: bool,
    pub reason: Option<StopReason>,
}

/// Decides from the latest trace point.
pub fn check_stop(trace: &[TracePoint], stop: &StopPolicy) -> Result<StopDecision> {
    let last = trace
        .last()
        .ok_or_else(|| Error::Contract("check_stop needs at least one eval point".into()))?;
    Ok(if last.retain_acc < stop.retain_acc_floor {
        StopDecision::Stop(StopReason::RetainFloor)
    } else if last.forget_loss > stop.forget_loss_ceiling {
        StopDecision::Stop(StopReason::ForgetCeiling)
    } else {
        StopDecision::Continue
    })
}

#[derive(Debug, Clone)]
pub struct Unlearned {
    pub params: ModelParams,
    pub trace: Vec<TracePoint>,
    pub stop_reason: StopReason,
    /// Step whose parameters were kept. A policy stop rolls back to the last
    /// evaluation that passed.
    pub kept_step: usize,
}

/// Unit-norm random direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteeringVector {
    pub u: Vec<f64>,
    pub seed: u64,
}

impl SteeringVector {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape("steering vector needs a positive dimension".into()));
        }
        let mut rng = seeded(seed);
        let mut u: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in &mut u {
            *v /= norm;
        }
        Ok(SteeringVector { u, seed })
    }
}

/// `theta <- theta + lr * (grad - l2 * (theta - anchor))` for every tensor in
/// `grads`. A zero rate leaves the parameters untouched.
pub fn ascent_update(
    tensors: &mut BTreeMap<String, Tensor>,
    anchor: &BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Vec<f64>>,
    lr: f64,
    l2: f64,
) -> Result<()> {
    if lr == 0.0 {
        return Ok(());
    }
    for (name, g) in grads {
        let t = tensors
            .get_mut(name)
            .ok_or_else(|| Error::Index(format!("no parameter `{name}`")))?;
        let a = anchor
            .get(name)
            .ok_or_else(|| Error::Index(format!("no anchor for `{name}`")))?;
        if g.len() != t.len() || a.len() != t.len() {
            return Err(Error::Shape(format!("ascent update size mismatch on `{name}`")));
        }
        for ((w, &gv), &av) in t.data_mut().iter_mut().zip(g).zip(a.data()) {
            *w += lr * (gv - l2 * (*w - av));
        }
    }
    Ok(())
}

/// Scales all gradients by `min(1, max_norm / ‖g‖)`.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let norm = grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        grads.values_mut().flatten().for_each(|g| *g *= k);
    }
    norm
}

/// Plain descent on the named tensors.
fn descent_update(tensors: &mut BTreeMap<String, Tensor>, grads: &BTreeMap<String, Vec<f64>>, lr: f64) -> Result<()> {
    if lr == 0.0 {
        return Ok(());
    }
    for (name, g) in grads {
        let t = tensors
            .get_mut(name)
            .ok_or_else(|| Error::Index(format!("no parameter `{name}`")))?;
        crate::autodiff::sgd_step(t.data_mut(), g, lr)?;
    }
    Ok(())
}

/// `(2 / beta) * mean(softplus(beta * delta))`.
pub fn npo_forget_loss(g: &mut Graph, delta: Var, beta: f64) -> Result<Var> {
    if !(beta > 0.0) {
        return Err(Error::Config(format!("NPO beta must be positive, got {beta}")));
    }
    let z = g.scale(delta, beta)?;
    let s = g.softplus(z)?;
    let m = g.mean(s)?;
    g.scale(m, 2.0 / beta)
}

/// `mean ||m_f - target||^2 + weight * mean ||m_r - m_r_ref||^2`, each mean
/// taken over rows.
pub fn rmu_loss(
    g: &mut Graph,
    m_forget: Var,
    target: Var,
    m_retain: Var,
    m_retain_ref: Var,
    weight: f64,
) -> Result<Var> {
    let rows = |g: &Graph, v: Var| g.value(v).rows().max(1) as f64;
    let df = g.sub(m_forget, target)?;
    let sf = g.sum_squares(df)?;
    let nf = rows(g, m_forget);
    let lf = g.scale(sf, 1.0 / nf)?;
    let dr = g.sub(m_retain, m_retain_ref)?;
    let sr = g.sum_squares(dr)?;
    let nr = rows(g, m_retain);
    let lr = g.scale(sr, weight / nr)?;
    g.add(lf, lr)
}

/// Cycles through a shuffled index order, reshuffling at each pass.
struct Batcher {
    order: Vec<usize>,
    cursor: usize,
    rng: SeededRng,
}

impl Batcher {
    fn new(n: usize, seed: u64, stream: &str) -> Self {
        Batcher {
            order: (0..n).collect(),
            cursor: n,
            rng: seeded(derive(seed, stream_id(stream), 0)),
        }
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(self.order.len()) {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Examples used for the forget-loss readings in the trace.
const FORGET_EVAL: usize = 256;

struct Monitor<'a> {
    vocab: &'a Vocab,
    forget_eval: Vec<TrainSequence>,
    retain: &'a [McqExample],
    stop: &'a StopPolicy,
    trace: Vec<TracePoint>,
    accepted: Option<(usize, ModelParams)>,
}

impl<'a> Monitor<'a> {
    fn new(vocab: &'a Vocab, forget: &[TrainSequence], retain: &'a [McqExample], stop: &'a StopPolicy) -> Result<Self> {
        stop.validate()?;
        if retain.is_empty() {
            return Err(Error::Config("retain set is empty".into()));
        }
        Ok(Monitor {
            vocab,
            forget_eval: forget.iter().take(FORGET_EVAL).cloned().collect(),
            retain,
            stop,
            trace: Vec::new(),
            accepted: None,
        })
    }

    /// Records a trace point and returns a stop reason if one fires.
    fn observe(&mut self, step: usize, params: &ModelParams, last: bool) -> Result<Option<StopReason>> {
        let forget_loss = masked_ce(params, &self.forget_eval)?;
        let retain_acc = evaluate_accuracy(params, self.vocab, self.retain)?;
        self.trace.push(TracePoint {
            step,
            forget_loss,
            retain_acc,
            stopped: false,
            reason: None,
        });
        let reason = match check_stop(&self.trace, self.stop)? {
            StopDecision::Stop(r) => Some(r),
            StopDecision::Continue if last => Some(StopReason::MaxSteps),
            StopDecision::Continue => None,
        };
        match reason {
            Some(r) => {
                let p = self.trace.last_mut().expect("just pushed");
                p.stopped = true;
                p.reason = Some(r);
            }
            None => self.accepted = Some((step, params.clone())),
        }
        Ok(reason)
    }

    fn finish(self, params: ModelParams, reason: StopReason) -> Unlearned {
        let step = self.trace.last().map_or(0, |p| p.step);
        let (kept_step, mut params) = match (reason, self.accepted) {
            (StopReason::MaxSteps, _) | (_, None) => (step, params),
            (_, Some(kept)) => kept,
        };
        params.round_to_storage();
        Unlearned {
            params,
            trace: self.trace,
            stop_reason: reason,
            kept_step,
        }
    }
}

fn diverged(method: &str, step: usize, loss: f64, trace: &[TracePoint]) -> Error {
    let tail = serde_json::to_string(&trace.last()).unwrap_or_default();
    Error::Diverged {
        method: method.into(),
        step,
        detail: format!("loss {loss}; last trace point {tail}"),
    }
}

fn forget_corpus(forget: &[McqExample], vocab: &Vocab, last_k: Option<usize>) -> Result<Vec<TrainSequence>> {
    if forget.is_empty() {
        return Err(Error::Config("forget set is empty".into()));
    }
    let span = layout::FULL_LEN - layout::LETTER_POS;
    corpus_from_examples(forget, vocab, last_k.unwrap_or(span))
}

/// Mean masked CE of a batch and its gradient for tensors passing `trainable`.
fn ce_and_grads(
    params: &ModelParams,
    seqs: &[&TrainSequence],
    trainable: &dyn Fn(&str) -> bool,
) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    let mut g = Graph::new();
    let pv = ParamVars::insert(&mut g, params, trainable);
    let refs: Vec<&[usize]> = seqs.iter().map(|s| s.tokens.as_slice()).collect();
    let (rows, targets) = target_rows(seqs.iter().copied());
    let out = build_batch(&mut g, &params.config, &pv, &refs, None, Some(&rows))?;
    let loss = g.cross_entropy_logits(out.logits, &targets)?;
    let value = g.value(loss).item()?;
    if !value.is_finite() {
        return Ok((value, BTreeMap::new()));
    }
    g.backward(loss)?;
    Ok((value, pv.grads(&g)))
}

/// Gradient ascent on the forget loss with an l2 pull toward the starting
/// weights.
pub fn unlearn_grad_ascent(
    params: &ModelParams,
    vocab: &Vocab,
    forget: &[McqExample],
    retain: &[McqExample],
    cfg: &GradAscentCfg,
    stop: &StopPolicy,
) -> Result<Unlearned> {
    UncertaintyMethod::GradAscent(cfg.clone()).validate(params.config.n_layers)?;
    let corpus = forget_corpus(forget, vocab, cfg.last_k)?;
    let mut mon = Monitor::new(vocab, &corpus, retain, stop)?;
    let mut theta = params.clone();
    let mut batcher = Batcher::new(corpus.len(), cfg.seed, "grad-ascent");
    if let Some(r) = mon.observe(0, &theta, cfg.max_steps == 0)? {
        return Ok(mon.finish(theta, r));
    }
    for step in 1..=cfg.max_steps {
        let batch: Vec<&TrainSequence> = batcher.next(cfg.batch).into_iter().map(|i| &corpus[i]).collect();
        let (loss, mut grads) = ce_and_grads(&theta, &batch, &|_| true)?;
        if !loss.is_finite() {
            return Err(diverged("grad_ascent", step, loss, &mon.trace));
        }
        if let Some(c) = cfg.clip_norm {
            clip_global_norm(&mut grads, c);
        }
        ascent_update(&mut theta.tensors, &params.tensors, &grads, cfg.lr_u, cfg.l2_coeff)?;
        if !theta.tensors.values().all(Tensor::is_finite) {
            return Err(diverged("grad_ascent", step, f64::NAN, &mon.trace));
        }
        if step % stop.eval_every == 0 || step == cfg.max_steps {
            if let Some(r) = mon.observe(step, &theta, step == cfg.max_steps)? {
                return Ok(mon.finish(theta, r));
            }
        }
    }
    unreachable!("the final step always records a stop reason")
}

/// Summed log-probability of each sequence's target tokens.
fn seq_log_probs(g: &mut Graph, pv: &ParamVars, params: &ModelParams, seqs: &[&TrainSequence]) -> Result<Var> {
    let refs: Vec<&[usize]> = seqs.iter().map(|s| s.tokens.as_slice()).collect();
    let (rows, targets) = target_rows(seqs.iter().copied());
    let out = build_batch(g, &params.config, pv, &refs, None, Some(&rows))?;
    let picks: Vec<(usize, usize)> = targets.iter().enumerate().map(|(i, &t)| (i, t)).collect();
    let lp = g.pick_log_prob(out.logits, &picks)?;
    let t = seqs[0].tokens.len();
    let segments: Vec<usize> = rows.iter().map(|r| r / t).collect();
    g.segment_sum(lp, &segments, seqs.len())
}

/// NPO: one descent step on the bounded forget objective relative to the
/// frozen reference, then `retain_ratio` descent steps on retain CE.
pub fn unlearn_npo(
    params: &ModelParams,
    reference: &ModelParams,
    vocab: &Vocab,
    forget: &[McqExample],
    retain: &[McqExample],
    cfg: &NpoCfg,
    stop: &StopPolicy,
) -> Result<Unlearned> {
    UncertaintyMethod::Npo(cfg.clone()).validate(params.config.n_layers)?;
    let corpus = forget_corpus(forget, vocab, None)?;
    let retain_corpus = forget_corpus(retain, vocab, None)?;
    let mut mon = Monitor::new(vocab, &corpus, retain, stop)?;
    let mut theta = params.clone();
    let mut fb = Batcher::new(corpus.len(), cfg.seed, "npo-forget");
    let mut rb = Batcher::new(retain_corpus.len(), cfg.seed, "npo-retain");
    if let Some(r) = mon.observe(0, &theta, cfg.max_rounds == 0)? {
        return Ok(mon.finish(theta, r));
    }
    for round in 1..=cfg.max_rounds {
        let batch: Vec<&TrainSequence> = fb.next(cfg.batch).into_iter().map(|i| &corpus[i]).collect();
        let reference_lp = {
            let mut g = Graph::new();
            let pv = ParamVars::insert(&mut g, reference, &|_| false);
            let v = seq_log_probs(&mut g, &pv, reference, &batch)?;
            g.value(v).data().to_vec()
        };
        let mut g = Graph::new();
        let pv = ParamVars::insert(&mut g, &theta, &|_| true);
        let lp = seq_log_probs(&mut g, &pv, &theta, &batch)?;
        let r = g.constant(Tensor::vector(reference_lp)?);
        let delta = g.sub(lp, r)?;
        let loss = npo_forget_loss(&mut g, delta, cfg.beta)?;
        let value = g.value(loss).item()?;
        if !value.is_finite() {
            return Err(diverged("npo", round, value, &mon.trace));
        }
        g.backward(loss)?;
        let mut grads = pv.grads(&g);
        if let Some(c) = cfg.clip_norm {
            clip_global_norm(&mut grads, c);
        }
        descent_update(&mut theta.tensors, &grads, cfg.lr_forget)?;
        for _ in 0..cfg.retain_ratio {
            let rbatch: Vec<&TrainSequence> = rb.next(cfg.batch).into_iter().map(|i| &retain_corpus[i]).collect();
            let (rl, grads) = ce_and_grads(&theta, &rbatch, &|_| true)?;
            if !rl.is_finite() {
                return Err(diverged("npo", round, rl, &mon.trace));
            }
            descent_update(&mut theta.tensors, &grads, cfg.lr_retain)?;
        }
        if round % stop.eval_every == 0 || round == cfg.max_rounds {
            if let Some(r) = mon.observe(round, &theta, round == cfg.max_rounds)? {
                return Ok(mon.finish(theta, r));
            }
        }
    }
    unreachable!("the final round always records a stop reason")
}

/// Residual after block `layer` at the answer position, one row per sequence.
fn answer_activations(
    g: &mut Graph,
    pv: &ParamVars,
    params: &ModelParams,
    seqs: &[&TrainSequence],
    layer: usize,
) -> Result<Var> {
    let refs: Vec<&[usize]> = seqs.iter().map(|s| s.tokens.as_slice()).collect();
    let out = build_batch(g, &params.config, pv, &refs, None, Some(&[0]))?;
    let t = out.seq_len;
    let rows: Vec<usize> = (0..seqs.len()).map(|s| s * t + layout::ANSWER_POS).collect();
    g.gather_rows(out.residuals[layer], &rows)
}

/// RMU: steer forget activations at one layer toward `c * u` while pinning
/// retain activations to the reference. Only `trainable_layers` move.
#[allow(clippy::too_many_arguments)]
pub fn unlearn_rmu(
    params: &ModelParams,
    reference: &ModelParams,
    vocab: &Vocab,
    forget: &[McqExample],
    retain: &[McqExample],
    cfg: &RmuCfg,
    u: &SteeringVector,
    stop: &StopPolicy,
) -> Result<Unlearned> {
    UncertaintyMethod::Rmu(cfg.clone()).validate(params.config.n_layers)?;
    if u.u.len() != params.config.d_model {
        return Err(Error::Shape("steering vector length must equal d_model".into()));
    }
    let corpus = forget_corpus(forget, vocab, None)?;
    let retain_corpus = forget_corpus(retain, vocab, None)?;
    let mut mon = Monitor::new(vocab, &corpus, retain, stop)?;
    let mut theta = params.clone();
    let mut fb = Batcher::new(corpus.len(), cfg.seed, "rmu-forget");
    let mut rb = Batcher::new(retain_corpus.len(), cfg.seed, "rmu-retain");
    let trainable = |name: &str| param_layer(name).is_some_and(|l| cfg.trainable_layers.contains(&l));
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new();
    if let Some(r) = mon.observe(0, &theta, cfg.max_steps == 0)? {
        return Ok(mon.finish(theta, r));
    }
    for step in 1..=cfg.max_steps {
        let fbatch: Vec<&TrainSequence> = fb.next(cfg.batch).into_iter().map(|i| &corpus[i]).collect();
        let rbatch: Vec<&TrainSequence> = rb.next(cfg.batch).into_iter().map(|i| &retain_corpus[i]).collect();
        let reference_acts = {
            let mut g = Graph::new();
            let pv = ParamVars::insert(&mut g, reference, &|_| false);
            let v = answer_activations(&mut g, &pv, reference, &rbatch, cfg.target_layer)?;
            g.value(v).clone()
        };
        let mut g = Graph::new();
        let pv = ParamVars::insert(&mut g, &theta, &trainable);
        let mf = answer_activations(&mut g, &pv, &theta, &fbatch, cfg.target_layer)?;
        let mr = answer_activations(&mut g, &pv, &theta, &rbatch, cfg.target_layer)?;
        let target: Vec<f64> = (0..fbatch.len())
            .flat_map(|_| u.u.iter().map(|v| cfg.steering_coeff * v))
            .collect();
        let target = g.constant(Tensor::new(vec![fbatch.len(), u.u.len()], target)?);
        let mref = g.constant(reference_acts);
        let loss = rmu_loss(&mut g, mf, target, mr, mref, cfg.retain_weight)?;
        let value = g.value(loss).item()?;
        if !value.is_finite() {
            return Err(diverged("rmu", step, value, &mon.trace));
        }
        g.backward(loss)?;
        state.begin_step();
        for (name, grad) in pv.grads(&g) {
            let t = theta.tensors.get_mut(&name).expect("grad for known parameter");
            adam_step(&name, t.data_mut(), &grad, &mut state, &adam)?;
        }
        if step % stop.eval_every == 0 || step == cfg.max_steps {
            if let Some(r) = mon.observe(step, &theta, step == cfg.max_steps)? {
                return Ok(mon.finish(theta, r));
            }
        }
    }
    unreachable!("the final step always records a stop reason")
}
