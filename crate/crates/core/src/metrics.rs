// SPDX-License-Identifier: MIT OR Apache-2.0

//! Calibration and discrimination metrics over `(confidence, 0/1 label)`
//! pairs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check(p: &[f64], y: &[u8], what: &str) -> Result<()> {
    if p.len() != y.len() {
        return Err(Error::Shape(format!(
            "{what}: {} scores vs {} labels",
            p.len(),
            y.len()
        )));
    }
    if p.is_empty() {
        return Err(Error::UndefinedMetric(format!("{what} of an empty set")));
    }
    if let Some(bad) = y.iter().find(|&&l| l > 1) {
        return Err(Error::Contract(format!("{what}: label {bad} is not 0/1")));
    }
    if let Some(bad) = p.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{what}: score {bad}")));
    }
    Ok(())
}

fn check_unit(p: &[f64], what: &str) -> Result<()> {
    match p.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        Some(bad) => Err(Error::Contract(format!("{what}: probability {bad} outside [0, 1]"))),
        None => Ok(()),
    }
}

pub fn accuracy(y: &[u8]) -> Result<f64> {
    if y.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of an empty set".into()));
    }
    Ok(y.iter().map(|&l| l as f64).sum::<f64>() / y.len() as f64)
}

/// Mean squared error between confidence and correctness.
pub fn brier(p: &[f64], y: &[u8]) -> Result<f64> {
    check(p, y, "brier")?;
    check_unit(p, "brier")?;
    Ok(p.iter().zip(y).map(|(&p, &y)| (p - y as f64).powi(2)).sum::<f64>() / p.len() as f64)
}

/// Pairwise AUROC: the chance a random positive outscores a random
/// negative, ties counting one half.
pub fn auroc(scores: &[f64], y: &[u8]) -> Result<f64> {
    check(scores, y, "auroc")?;
    let pos: Vec<f64> = scores.iter().zip(y).filter(|(_, &l)| l == 1).map(|(&s, _)| s).collect();
    let neg: Vec<f64> = scores.iter().zip(y).filter(|(_, &l)| l == 0).map(|(&s, _)| s).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::UndefinedMetric("auroc needs both classes".into()));
    }
    // Twice the win count stays an exact integer.
    let mut twice = 0u64;
    for &a in &pos {
        for &b in &neg {
            twice += if a > b {
                2
            } else if a == b {
                1
            } else {
                0
            };
        }
    }
    Ok(twice as f64 / (2 * pos.len() * neg.len()) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinStrategy {
    Quantile,
    EqualWidth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub bin_index: usize,
    pub mean_confidence: f64,
    pub empirical_accuracy: f64,
    pub count: usize,
}

/// Bin index per example.
///
/// Quantile bins split the score-sorted order into `n_bins` near-equal runs;
/// a score equal to its predecessor stays in the predecessor's bin, so tied
/// scores never straddle a boundary. Equal-width bins are `((b-1)/n, b/n]`,
/// with 0 in the first bin.
fn assign_bins(p: &[f64], n_bins: usize, strategy: BinStrategy) -> Result<Vec<usize>> {
    if n_bins == 0 {
        return Err(Error::Config("n_bins must be positive".into()));
    }
    let n = p.len();
    let mut bins = vec![0; n];
    match strategy {
        BinStrategy::Quantile => {
            if n < n_bins {
                return Err(Error::Contract(format!(
                    "quantile binning needs n >= n_bins ({n} < {n_bins})"
                )));
            }
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| p[a].total_cmp(&p[b]).then(a.cmp(&b)));
            for (rank, &i) in order.iter().enumerate() {
                bins[i] = if rank > 0 && p[order[rank - 1]] == p[i] {
                    bins[order[rank - 1]]
                } else {
                    rank * n_bins / n
                };
            }
        }
        BinStrategy::EqualWidth => {
            for (b, &v) in bins.iter_mut().zip(p) {
                *b = ((v * n_bins as f64).ceil() as usize).clamp(1, n_bins) - 1;
            }
        }
    }
    Ok(bins)
}

/// Occupied bins in index order.
pub fn reliability_bins(p: &[f64], y: &[u8], n_bins: usize, strategy: BinStrategy) -> Result<Vec<ReliabilityBin>> {
    check(p, y, "reliability_bins")?;
    check_unit(p, "reliability_bins")?;
    let bins = assign_bins(p, n_bins, strategy)?;
    let mut acc: BTreeMap<usize, (f64, f64, usize)> = BTreeMap::new();
    for ((&b, &pv), &yv) in bins.iter().zip(p).zip(y) {
        let e = acc.entry(b).or_insert((0.0, 0.0, 0));
        e.0 += pv;
        e.1 += yv as f64;
        e.2 += 1;
    }
    Ok(acc
        .into_iter()
        .map(|(bin_index, (sp, sy, count))| ReliabilityBin {
            bin_index,
            mean_confidence: sp / count as f64,
            empirical_accuracy: sy / count as f64,
            count,
        })
        .collect())
}

/// Count-weighted mean gap between accuracy and confidence over bins.
pub fn ece_from_bins(bins: &[ReliabilityBin]) -> f64 {
    let n: usize = bins.iter().map(|b| b.count).sum();
    bins.iter()
        .map(|b| b.count as f64 / n as f64 * (b.empirical_accuracy - b.mean_confidence).abs())
        .sum()
}

pub fn ece(p: &[f64], y: &[u8], n_bins: usize, strategy: BinStrategy) -> Result<f64> {
    Ok(ece_from_bins(&reliability_bins(p, y, n_bins, strategy)?))
}

/// Indices where every model has the same correctness label.
pub fn agreement_filter(correctness: &BTreeMap<String, Vec<u8>>) -> Result<Vec<usize>> {
    let mut it = correctness.values();
    let Some(first) = it.next() else {
        return Ok(Vec::new());
    };
    if correctness.values().any(|v| v.len() != first.len()) {
        return Err(Error::Shape("agreement_filter: label vectors differ in length".into()));
    }
    Ok((0..first.len())
        .filter(|&i| correctness.values().all(|v| v[i] == first[i]))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EceSpec {
    pub strategy: BinStrategy,
    pub n_bins: usize,
}

impl Default for EceSpec {
    fn default() -> Self {
        EceSpec {
            strategy: BinStrategy::Quantile,
            n_bins: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub n: usize,
    pub accuracy: f64,
    pub brier: f64,
    pub ece: f64,
    pub ece_spec: EceSpec,
    /// `None` when only one class is present.
    pub auroc: Option<f64>,
    pub reliability_bins: Vec<ReliabilityBin>,
}

/// All metrics for one scored dataset. With fewer examples than bins the
/// quantile strategy falls back to one bin per example.
pub fn evaluate(dataset: &str, p: &[f64], y: &[u8], spec: &EceSpec) -> Result<EvalReport> {
    let n_bins = match spec.strategy {
        BinStrategy::Quantile => spec.n_bins.min(p.len()),
        BinStrategy::EqualWidth => spec.n_bins,
    };
    let bins = reliability_bins(p, y, n_bins, spec.strategy)?;
    let auroc = match auroc(p, y) {
        Ok(a) => Some(a),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(EvalReport {
        dataset: dataset.to_string(),
        n: p.len(),
        accuracy: accuracy(y)?,
        brier: brier(p, y)?,
        ece: ece_from_bins(&bins),
        ece_spec: spec.clone(),
        auroc,
        reliability_bins: bins,
    })
}

pub fn reliability_csv(bins: &[ReliabilityBin]) -> String {
    let mut s = String::from("bin_index,mean_confidence,empirical_accuracy,count\n");
    for b in bins {
        s.push_str(&format!(
            "{},{},{},{}\n",
            b.bin_index, b.mean_confidence, b.empirical_accuracy, b.count
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn brier_examples() {
        assert_eq!(brier(&[1.0, 0.0], &[1, 0]).unwrap(), 0.0);
        assert_eq!(brier(&[0.5; 3], &[1, 0, 1]).unwrap(), 0.25);
        // (0.01 + 0.04 + 0.09) / 3
        assert!((brier(&[0.9, 0.2, 0.7], &[1, 0, 1]).unwrap() - 0.14 / 3.0).abs() < 1e-15);
        assert!(brier(&[0.5], &[1, 0]).is_err());
        assert!(brier(&[], &[]).is_err());
        assert!(brier(&[1.5], &[1]).is_err());
    }

    #[test]
    fn auroc_examples() {
        let s = [0.9, 0.8, 0.2, 0.1];
        assert_eq!(auroc(&s, &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auroc(&s, &[0, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(auroc(&[0.7, 0.7], &[1, 0]).unwrap(), 0.5);
        assert!(matches!(auroc(&s, &[1, 1, 1, 1]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn ece_examples() {
        let p = [0.9; 4];
        let e = ece(&p, &[1, 0, 0, 0], 1, BinStrategy::Quantile).unwrap();
        assert!((e - 0.65).abs() < 1e-12);
        let y = [1, 1, 1, 1, 1, 1, 1, 0, 0, 0];
        let e = ece(&[0.7; 10], &y, 10, BinStrategy::Quantile).unwrap();
        assert!(e.abs() < 1e-12);
        assert_eq!(ece(&[1.0, 0.0], &[1, 0], 2, BinStrategy::EqualWidth).unwrap(), 0.0);
        assert!(ece(&[0.1, 0.2], &[1, 0], 3, BinStrategy::Quantile).is_err());
    }

    #[test]
    fn tied_scores_stay_in_lower_bin() {
        let p = [0.1, 0.2, 0.2, 0.2, 0.9];
        let b = assign_bins(&p, 5, BinStrategy::Quantile).unwrap();
        assert_eq!(b, vec![0, 1, 1, 1, 4]);
        let w = assign_bins(&[0.0, 0.1, 0.15, 1.0], 10, BinStrategy::EqualWidth).unwrap();
        assert_eq!(w, vec![0, 0, 1, 9]);
    }

    #[test]
    fn agreement_examples() {
        let mut m = BTreeMap::new();
        m.insert("a".to_string(), vec![1, 0]);
        m.insert("b".to_string(), vec![0, 0]);
        assert_eq!(agreement_filter(&m).unwrap(), vec![1]);
        m.insert("c".to_string(), vec![0]);
        assert!(agreement_filter(&m).is_err());
    }

    #[test]
    fn report_handles_single_class() {
        let r = evaluate("x", &[0.9, 0.8, 0.7], &[1, 1, 1], &EceSpec::default()).unwrap();
        assert_eq!(r.auroc, None);
        assert_eq!(r.reliability_bins.iter().map(|b| b.count).sum::<usize>(), 3);
        let csv = reliability_csv(&r.reliability_bins);
        assert_eq!(csv.lines().count(), 4);
    }

    fn scored(n: std::ops::Range<usize>) -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
        n.prop_flat_map(|n| {
            (
                prop::collection::vec(0.0..=1.0f64, n),
                prop::collection::vec(0u8..=1, n),
            )
        })
    }

    proptest! {
        #[test]
        fn auroc_complement((p, y) in scored(2..40)) {
            let distinct = {
                let mut s = p.clone();
                s.sort_by(f64::total_cmp);
                s.windows(2).all(|w| w[0] != w[1])
            };
            prop_assume!(distinct && y.contains(&0) && y.contains(&1));
            let flipped: Vec<u8> = y.iter().map(|l| 1 - l).collect();
            let sum = auroc(&p, &y).unwrap() + auroc(&p, &flipped).unwrap();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }

        #[test]
        fn auroc_monotone_invariant((p, y) in scored(2..40)) {
            prop_assume!(y.contains(&0) && y.contains(&1));
            let q: Vec<f64> = p.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
            prop_assert_eq!(auroc(&p, &y).unwrap(), auroc(&q, &y).unwrap());
        }

        #[test]
        fn brier_constant_decomposition(c in 0.0..=1.0f64, y in prop::collection::vec(0u8..=1, 1..50)) {
            let p = vec![c; y.len()];
            let acc = accuracy(&y).unwrap();
            let want = c * c + acc * (1.0 - 2.0 * c);
            prop_assert!((brier(&p, &y).unwrap() - want).abs() < 1e-12);
        }

        #[test]
        fn quantile_bins_balanced((p, y) in scored(10..80), n_bins in 1usize..10) {
            let mut s = p.clone();
            s.sort_by(f64::total_cmp);
            prop_assume!(s.windows(2).all(|w| w[0] != w[1]));
            let bins = reliability_bins(&p, &y, n_bins, BinStrategy::Quantile).unwrap();
            let n = p.len();
            prop_assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), n);
            for b in &bins {
                prop_assert!(b.count == n / n_bins || b.count == n.div_ceil(n_bins));
            }
        }

        #[test]
        fn metrics_permutation_invariant((p, y) in scored(10..40), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut idx: Vec<usize> = (0..p.len()).collect();
            idx.shuffle(&mut crate::rng::seeded(seed));
            let pp: Vec<f64> = idx.iter().map(|&i| p[i]).collect();
            let yy: Vec<u8> = idx.iter().map(|&i| y[i]).collect();
            prop_assert!((brier(&p, &y).unwrap() - brier(&pp, &yy).unwrap()).abs() < 1e-12);
            for s in [BinStrategy::Quantile, BinStrategy::EqualWidth] {
                let a = ece(&p, &y, 10, s).unwrap();
                let b = ece(&pp, &yy, 10, s).unwrap();
                prop_assert!((a - b).abs() < 1e-12);
            }
            if y.contains(&0) && y.contains(&1) {
                prop_assert_eq!(auroc(&p, &y).unwrap(), auroc(&pp, &yy).unwrap());
            }
        }

        #[test]
        fn bins_recompose_ece((p, y) in scored(10..60)) {
            for s in [BinStrategy::Quantile, BinStrategy::EqualWidth] {
                let bins = reliability_bins(&p, &y, 10, s).unwrap();
                let n = p.len() as f64;
                let manual: f64 = bins.iter()
                    .map(|b| b.count as f64 / n * (b.empirical_accuracy - b.mean_confidence).abs())
                    .sum();
                prop_assert!((manual - ece(&p, &y, 10, s).unwrap()).abs() < 1e-12);
            }
        }
    }
}
