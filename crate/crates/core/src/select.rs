// SPDX-License-Identifier: MIT OR Apache-2.0

//! Unsupervised choice of the artificial-uncertainty setting: the candidate
//! whose probe spreads its easy-set predictions the most wins.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forge::UncertaintyMethod;
use crate::metrics::brier;
use crate::probe::{score_dataset, train_probe, HiddenRecord, Probe, ProbeHyper};

/// Population variance.
pub fn prediction_variance(p: &[f64]) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::UndefinedMetric("variance of an empty set".into()));
    }
    let n = p.len() as f64;
    let mean = p.iter().sum::<f64>() / n;
    Ok(p.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub method: UncertaintyMethod,
    pub tag: String,
    pub probe: Probe,
    pub easy_predictions: Vec<f64>,
    pub variance: f64,
    pub hard_val_brier: Option<f64>,
}

/// Index of the highest-variance candidate; ties go to the smaller
/// hyperparameter magnitude, then the lexically smaller tag.
pub fn select(candidates: &[Candidate]) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::Contract("select needs at least one candidate".into()));
    }
    let mut best = 0;
    for (i, c) in candidates.iter().enumerate().skip(1) {
        let b = &candidates[best];
        let better = c.variance > b.variance
            || (c.variance == b.variance
                && (c.method.magnitude() < b.method.magnitude()
                    || (c.method.magnitude() == b.method.magnitude() && c.tag < b.tag)));
        if better {
            best = i;
        }
    }
    Ok(best)
}

/// One candidate per grid point. `train_records` produces the probe-training
/// records of a grid point; variance is measured on `easy_records` and, when
/// given, Brier on `hard_val_records`.
pub fn sweep(
    grid: &[UncertaintyMethod],
    mut train_records: impl FnMut(&UncertaintyMethod) -> Result<Vec<HiddenRecord>>,
    easy_records: &[HiddenRecord],
    hard_val_records: Option<&[HiddenRecord]>,
    hyper: &ProbeHyper,
) -> Result<Vec<Candidate>> {
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    grid.iter()
        .map(|method| {
            let records = train_records(method)?;
            let probe = train_probe(&records, hyper)?;
            let (easy_predictions, _) = score_dataset(&probe, easy_records)?;
            let variance = prediction_variance(&easy_predictions)?;
            let hard_val_brier = match hard_val_records {
                Some(r) => {
                    let (p, y) = score_dataset(&probe, r)?;
                    Some(brier(&p, &y)?)
                }
                None => None,
            };
            Ok(Candidate {
                method: method.clone(),
                tag: method.tag(),
                probe,
                easy_predictions,
                variance,
                hard_val_brier,
            })
        })
        .collect()
}

/// `hyperparameter_tag,variance,std,hard_val_brier`, one row per candidate.
pub fn sweep_csv(candidates: &[Candidate]) -> String {
    let mut s = String::from("hyperparameter_tag,variance,std,hard_val_brier\n");
    for c in candidates {
        let hb = c.hard_val_brier.map(|b| b.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{},{}\n", c.tag, c.variance, c.variance.sqrt(), hb));
    }
    s
}
