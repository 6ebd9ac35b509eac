// SPDX-License-Identifier: MIT OR Apache-2.0

//! Hidden-state records and the linear correctness probe read from them.

use std::fmt;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sgd_step, sigmoid, Graph, Tensor};
use crate::error::{Error, Result};
use crate::forge::ModelHandle;
use crate::nanolm::answer_batch;
use crate::rng::seeded;
use crate::taskgen::{McqExample, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Position {
    /// End of the question, before any answer token.
    Pre,
    /// The emitted answer letter.
    Post,
}

impl Position {
    pub const ALL: [Position; 2] = [Position::Pre, Position::Post];

    pub fn as_str(self) -> &'static str {
        match self {
            Position::Pre => "pre",
            Position::Post => "post",
        }
    }

    pub fn parse(s: &str) -> Result<Position> {
        match s {
            "pre" => Ok(Position::Pre),
            "post" => Ok(Position::Post),
            _ => Err(Error::Config(format!("unknown position `{s}` (expected pre|post)"))),
        }
    }
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Base,
    Variant,
}

/// One `(hidden state, correctness)` pair. Field order is the JSONL key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenRecord {
    pub example_id: String,
    pub position: Position,
    pub source: Source,
    pub variant_tag: String,
    pub label: u8,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeHyper {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeHyper {
    fn default() -> Self {
        ProbeHyper {
            epochs: 3,
            batch: 8,
            lr: 5e-4,
            seed: 0,
        }
    }
}

impl ProbeHyper {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch == 0 || !(self.lr > 0.0) {
            return Err(Error::Config(format!(
                "probe hyperparameters must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Tag of the model the training records came from.
    pub source: String,
    pub n_records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub train_meta: TrainMeta,
}

/// Records for both positions from one answering pass:
/// `[pre, post]`, each in dataset order.
pub fn extract_all(handle: &ModelHandle, vocab: &Vocab, dataset: &[McqExample]) -> Result<[Vec<HiddenRecord>; 2]> {
    let answers = answer_batch(handle.params, vocab, dataset, handle.dropout.as_ref(), handle.seed)?;
    let mut pre = Vec::with_capacity(dataset.len());
    let mut post = Vec::with_capacity(dataset.len());
    for (ex, a) in dataset.iter().zip(answers) {
        let label = crate::taskgen::exact_match(a.choice, ex.gold_index)?;
        let rec = |position, vector| HiddenRecord {
            example_id: ex.id.clone(),
            position,
            source: handle.source,
            variant_tag: handle.tag.clone(),
            label,
            vector,
        };
        pre.push(rec(Position::Pre, a.hidden_pre));
        post.push(rec(Position::Post, a.hidden_post));
    }
    Ok([pre, post])
}

/// One record per example at `position`, labelled by whether the handle's
/// model answered correctly.
pub fn extract_records(
    handle: &ModelHandle,
    vocab: &Vocab,
    dataset: &[McqExample],
    position: Position,
) -> Result<Vec<HiddenRecord>> {
    let [pre, post] = extract_all(handle, vocab, dataset)?;
    Ok(match position {
        Position::Pre => pre,
        Position::Post => post,
    })
}

fn dim_of(records: &[HiddenRecord]) -> Result<usize> {
    let d = records.first().map_or(0, |r| r.vector.len());
    if d == 0 {
        return Err(Error::Shape("probe records need non-empty vectors".into()));
    }
    if let Some(r) = records.iter().find(|r| r.vector.len() != d) {
        return Err(Error::Shape(format!(
            "record {} has dimension {} (expected {d})",
            r.example_id,
            r.vector.len()
        )));
    }
    Ok(d)
}

/// Logistic regression on raw vectors by minibatch SGD on mean BCE,
/// starting from zero weights.
pub fn train_probe(records: &[HiddenRecord], hyper: &ProbeHyper) -> Result<Probe> {
    hyper.validate()?;
    let d = dim_of(records)?;
    if records.iter().any(|r| r.label > 1) {
        return Err(Error::Contract("probe labels must be 0/1".into()));
    }
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut rng = seeded(hyper.seed);
    let mut order: Vec<usize> = (0..records.len()).collect();
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(hyper.batch) {
            let mut g = Graph::new();
            let x: Vec<f64> = chunk.iter().flat_map(|&i| records[i].vector.iter().copied()).collect();
            let x = g.constant(Tensor::new(vec![chunk.len(), d], x)?);
            let wv = g.leaf(Tensor::new(vec![d, 1], w.clone())?.with_grad());
            let bv = g.leaf(Tensor::new(vec![1], vec![b])?.with_grad());
            let z = g.matmul(x, wv)?;
            let z = g.add_bias(z, bv)?;
            let y: Vec<f64> = chunk.iter().map(|&i| records[i].label as f64).collect();
            let loss = g.bce_with_logits(z, &y)?;
            g.backward(loss)?;
            let gw = g.grad(wv).expect("weights require grad").to_vec();
            let gb = g.grad(bv).expect("bias requires grad")[0];
            sgd_step(&mut w, &gw, hyper.lr)?;
            b -= hyper.lr * gb;
        }
    }
    Ok(Probe {
        weights: w,
        bias: b,
        train_meta: TrainMeta {
            epochs: hyper.epochs,
            batch: hyper.batch,
            lr: hyper.lr,
            seed: hyper.seed,
            source: records[0].variant_tag.clone(),
            n_records: records.len(),
        },
    })
}

/// `sigmoid(w . h + b)`.
pub fn predict(probe: &Probe, vector: &[f64]) -> Result<f64> {
    if vector.len() != probe.weights.len() {
        return Err(Error::Shape(format!(
            "vector of length {} for a probe of dimension {}",
            vector.len(),
            probe.weights.len()
        )));
    }
    let z: f64 = probe.weights.iter().zip(vector).map(|(w, h)| w * h).sum::<f64>() + probe.bias;
    Ok(sigmoid(z))
}

/// Predictions and labels, in record order.
pub fn score_dataset(probe: &Probe, records: &[HiddenRecord]) -> Result<(Vec<f64>, Vec<u8>)> {
    let mut p = Vec::with_capacity(records.len());
    let mut y = Vec::with_capacity(records.len());
    for r in records {
        p.push(predict(probe, &r.vector)?);
        y.push(r.label);
    }
    Ok((p, y))
}

/// Mean BCE of a probe on records.
pub fn mean_bce(probe: &Probe, records: &[HiddenRecord]) -> Result<f64> {
    let (p, y) = score_dataset(probe, records)?;
    let eps = 1e-15;
    Ok(p.iter()
        .zip(&y)
        .map(|(&p, &y)| {
            let p = p.clamp(eps, 1.0 - eps);
            -(y as f64 * p.ln() + (1.0 - y as f64) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / p.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::auroc;
    use proptest::prelude::*;

    fn rec(i: usize, v: Vec<f64>, label: u8) -> HiddenRecord {
        HiddenRecord {
            example_id: format!("e{i}"),
            position: Position::Post,
            source: Source::Variant,
            variant_tag: "t".into(),
            label,
            vector: v,
        }
    }

    fn zero_probe(d: usize) -> Probe {
        Probe {
            weights: vec![0.0; d],
            bias: 0.0,
            train_meta: TrainMeta {
                epochs: 0,
                batch: 1,
                lr: 0.0,
                seed: 0,
                source: "none".into(),
                n_records: 0,
            },
        }
    }

    #[test]
    fn predict_examples() {
        let mut p = zero_probe(2);
        assert_eq!(predict(&p, &[3.0, -4.0]).unwrap(), 0.5);
        p.bias = 50.0;
        assert!(predict(&p, &[0.0, 0.0]).unwrap() > 1.0 - 1e-12);
        p.bias = 0.0;
        p.weights = vec![1.0, 0.0];
        assert!((predict(&p, &[3f64.ln(), 7.0]).unwrap() - 0.75).abs() < 1e-15);
        assert!(predict(&p, &[1.0]).is_err());
    }

    #[test]
    fn separable_clusters_rank_perfectly() {
        let mut rng = seeded(4);
        let recs: Vec<HiddenRecord> = (0..200)
            .map(|i| {
                let label = (i % 2) as u8;
                let c = if label == 1 { 2.0 } else { -2.0 };
                let v = (0..8)
                    .map(|_| c + rand::Rng::random_range(&mut rng, -0.5..0.5))
                    .collect();
                rec(i, v, label)
            })
            .collect();
        let probe = train_probe(&recs, &ProbeHyper::default()).unwrap();
        let (p, y) = score_dataset(&probe, &recs).unwrap();
        assert_eq!(auroc(&p, &y).unwrap(), 1.0);
    }

    #[test]
    fn single_class_saturates() {
        // Norm-8 vectors make the default schedule enough to push p past 0.9.
        let mut rng = seeded(5);
        let recs: Vec<HiddenRecord> = (0..1000)
            .map(|i| {
                let v = (0..64)
                    .map(|_| 1.0 + rand::Rng::random_range(&mut rng, -0.1..0.1))
                    .collect();
                rec(i, v, 1)
            })
            .collect();
        let probe = train_probe(&recs, &ProbeHyper::default()).unwrap();
        let (p, _) = score_dataset(&probe, &recs).unwrap();
        let mean = p.iter().sum::<f64>() / p.len() as f64;
        let var = p.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / p.len() as f64;
        assert!(mean > 0.9 && var < 1e-3, "mean {mean} var {var}");
    }

    #[test]
    fn errors() {
        assert!(train_probe(&[rec(0, vec![], 1)], &ProbeHyper::default()).is_err());
        assert!(train_probe(
            &[rec(0, vec![1.0], 1), rec(1, vec![1.0, 2.0], 0)],
            &ProbeHyper::default()
        )
        .is_err());
        let bad = ProbeHyper {
            epochs: 0,
            ..ProbeHyper::default()
        };
        assert!(train_probe(&[rec(0, vec![1.0], 1)], &bad).is_err());
    }

    #[test]
    fn score_preserves_order() {
        let p = Probe {
            weights: vec![1.0],
            ..zero_probe(1)
        };
        assert_eq!(score_dataset(&p, &[]).unwrap(), (vec![], vec![]));
        let recs: Vec<HiddenRecord> = (0..5).map(|i| rec(i, vec![i as f64], (i % 2) as u8)).collect();
        let (a, ya) = score_dataset(&p, &recs).unwrap();
        let mut rev = recs.clone();
        rev.reverse();
        let (mut b, mut yb) = score_dataset(&p, &rev).unwrap();
        b.reverse();
        yb.reverse();
        assert_eq!((a, ya), (b, yb));
    }

    proptest! {
        #[test]
        fn training_does_not_raise_bce(seed in 0u64..50, n in 4usize..40) {
            let mut rng = seeded(seed);
            let recs: Vec<HiddenRecord> = (0..n)
                .map(|i| {
                    let v = (0..4).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
                    rec(i, v, rand::Rng::random_range(&mut rng, 0..2u8))
                })
                .collect();
            let h = ProbeHyper { seed, ..ProbeHyper::default() };
            let trained = train_probe(&recs, &h).unwrap();
            let again = train_probe(&recs, &h).unwrap();
            prop_assert_eq!(&trained, &again);
            prop_assert!(mean_bce(&trained, &recs).unwrap() <= mean_bce(&zero_probe(4), &recs).unwrap() + 1e-12);
        }

        #[test]
        fn predict_is_monotone(a in -30.0..30.0f64, b in -30.0..30.0f64) {
            let p = Probe { weights: vec![1.0], ..zero_probe(1) };
            let (pa, pb) = (predict(&p, &[a]).unwrap(), predict(&p, &[b]).unwrap());
            let ordered = (a <= b && pa <= pb) || (a >= b && pa >= pb);
            prop_assert!(ordered);
        }
    }
}
