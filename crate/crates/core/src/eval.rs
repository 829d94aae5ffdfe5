//! Full-catalog ranking metrics for a single held-out target.

use std::fmt::Write as _;

use crate::data::{batchify, Example, Width};
use crate::error::{Error, Result};
use crate::model::Model;

pub const DEFAULT_KS: [usize; 3] = [10, 20, 50];

/// 1-based rank of `target` among columns `1..` of `scores`. Every other
/// item scoring at least as high counts as ranked ahead.
pub fn rank_of_target(scores: &[f64], target: usize) -> Result<usize> {
    if target == 0 || target >= scores.len() {
        return Err(Error::Data(format!(
            "target {target} outside 1..{}",
            scores.len()
        )));
    }
    let s = scores[target];
    if s.is_nan() {
        return Err(Error::Numeric(format!("score of target {target} is NaN")));
    }
    let ahead = scores[1..]
        .iter()
        .enumerate()
        .filter(|&(i, &v)| i + 1 != target && v >= s)
        .count();
    Ok(ahead + 1)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub hr: f64,
    pub ndcg: f64,
    pub mrr: f64,
}

/// HR, NDCG and MRR at cutoff `k`, averaged over `ranks`.
pub fn metrics(ranks: &[usize], k: usize) -> Result<Metrics> {
    if ranks.is_empty() {
        return Err(Error::Data("no ranks to average".into()));
    }
    if ranks.contains(&0) {
        return Err(Error::Contract("ranks are 1-based".into()));
    }
    let (mut hr, mut ndcg, mut mrr) = (0.0, 0.0, 0.0);
    for &r in ranks.iter().filter(|&&r| r <= k) {
        hr += 1.0;
        ndcg += 1.0 / ((r + 1) as f64).log2();
        mrr += 1.0 / r as f64;
    }
    let n = ranks.len() as f64;
    Ok(Metrics {
        hr: hr / n,
        ndcg: ndcg / n,
        mrr: mrr / n,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankingReport {
    pub ks: Vec<usize>,
    pub metrics: Vec<Metrics>,
    pub count: usize,
}

impl RankingReport {
    pub fn from_ranks(ranks: &[usize], ks: &[usize]) -> Result<Self> {
        Ok(RankingReport {
            ks: ks.to_vec(),
            metrics: ks.iter().map(|&k| metrics(ranks, k)).collect::<Result<_>>()?,
            count: ranks.len(),
        })
    }

    pub fn at(&self, k: usize) -> Option<Metrics> {
        self.ks.iter().position(|&x| x == k).map(|i| self.metrics[i])
    }

    /// `metric,K,value` lines with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,K,value\n");
        for name in ["hr", "ndcg", "mrr"] {
            for (k, m) in self.ks.iter().zip(&self.metrics) {
                let v = match name {
                    "hr" => m.hr,
                    "ndcg" => m.ndcg,
                    _ => m.mrr,
                };
                writeln!(s, "{name},{k},{v}").unwrap();
            }
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<6}{:>10}{:>10}{:>10}\n", "K", "HR", "NDCG", "MRR");
        for (k, m) in self.ks.iter().zip(&self.metrics) {
            writeln!(s, "{:<6}{:>10.4}{:>10.4}{:>10.4}", k, m.hr, m.ndcg, m.mrr).unwrap();
        }
        write!(s, "users evaluated: {}", self.count).unwrap();
        s
    }
}

/// Ranks every example's target against the full catalog.
///
/// With `mask_seen`, items already in the example's history (other than the
/// target) are removed from the ranking.
pub fn rank_examples(model: &Model, examples: &[Example], batch_size: usize, mask_seen: bool) -> Result<Vec<usize>> {
    let mut ranks = Vec::with_capacity(examples.len());
    let batches = batchify(examples, model.config.max_len, batch_size, Width::Trimmed)?;
    let mut offset = 0;
    for batch in &batches {
        let logits = model.eval_logits(batch)?;
        for r in 0..batch.size() {
            let mut row = logits.row(r).to_vec();
            let target = batch.targets[r];
            if mask_seen {
                for &i in &examples[offset + r].items {
                    if i != target {
                        row[i] = f64::NEG_INFINITY;
                    }
                }
            }
            ranks.push(rank_of_target(&row, target)?);
        }
        offset += batch.size();
    }
    Ok(ranks)
}

pub fn evaluate(model: &Model, examples: &[Example], batch_size: usize, mask_seen: bool) -> Result<RankingReport> {
    RankingReport::from_ranks(&rank_examples(model, examples, batch_size, mask_seen)?, &DEFAULT_KS)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_examples_from_scores() {
        assert_eq!(rank_of_target(&[9.0, 0.1, 0.7, 0.2], 2).unwrap(), 1);
        assert_eq!(rank_of_target(&[0.0, 0.5, 0.5, 0.1], 1).unwrap(), 2);
        assert_eq!(rank_of_target(&[0.0, 0.5, 0.5, 0.1], 2).unwrap(), 2);
        assert!(rank_of_target(&[0.0, 1.0], 0).is_err());
    }

    #[test]
    fn closed_forms() {
        let m = metrics(&[1], 10).unwrap();
        assert_eq!((m.hr, m.ndcg, m.mrr), (1.0, 1.0, 1.0));
        let m = metrics(&[3], 10).unwrap();
        assert_eq!(m.ndcg, 0.5);
        assert_eq!(m.mrr, 1.0 / 3.0);
        let m = metrics(&[11], 10).unwrap();
        assert_eq!((m.hr, m.ndcg, m.mrr), (0.0, 0.0, 0.0));
        assert!(metrics(&[], 10).is_err());
    }

    #[test]
    fn csv_layout() {
        let r = RankingReport::from_ranks(&[1, 3], &[10]).unwrap();
        assert_eq!(r.to_csv(), "metric,K,value\nhr,10,1\nndcg,10,0.75\nmrr,10,0.6666666666666666\n");
    }
}
