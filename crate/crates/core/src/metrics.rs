//! Ranking metrics and their aggregation over repeated runs.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub auc_roc: f64,
    pub auc_pr: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub runs: usize,
    pub auc_roc: MeanStd,
    pub auc_pr: MeanStd,
}

fn check(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::shape(
            "metric inputs",
            (scores.len(), 1),
            (labels.len(), 1),
        ));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::invalid(format!("score {i} is not finite")));
    }
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid(format!(
            "ranking metrics need both classes (got {pos} positive, {neg} negative)"
        )));
    }
    Ok((pos, neg))
}

/// Indices sorted by descending score, grouped into blocks of equal score.
fn tied_blocks(scores: &[f64]) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    let mut blocks: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match blocks.last_mut() {
            Some(b) if scores[b[0]] == scores[i] => b.push(i),
            _ => blocks.push(vec![i]),
        }
    }
    blocks
}

/// Area under the ROC curve via the Mann–Whitney statistic. Ties receive
/// averaged ranks, so a tied positive/negative pair counts one half.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    let mut blocks = tied_blocks(scores);
    blocks.reverse();
    let mut rank_sum = 0.0;
    let mut next_rank = 1.0;
    for block in &blocks {
        let avg = next_rank + (block.len() as f64 - 1.0) / 2.0;
        rank_sum += avg * block.iter().filter(|&&i| labels[i]).count() as f64;
        next_rank += block.len() as f64;
    }
    let p = pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

/// Average precision `Σ (R_n − R_{n−1}) · P_n` over descending thresholds.
/// Tied scores form one threshold, so the result does not depend on the
/// order of tied samples.
pub fn auc_pr(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = check(scores, labels)?;
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for block in tied_blocks(scores) {
        tp += block.iter().filter(|&&i| labels[i]).count();
        seen += block.len();
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / seen as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

pub fn evaluate(scores: &[f64], labels: &[bool]) -> Result<EvalResult> {
    let (n_pos, n_neg) = check(scores, labels)?;
    Ok(EvalResult {
        auc_roc: auc_roc(scores, labels)?,
        auc_pr: auc_pr(scores, labels)?,
        n_pos,
        n_neg,
    })
}

/// Mean and sample standard deviation (`n − 1` denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> Result<MeanStd> {
    if values.is_empty() {
        return Err(Error::invalid("cannot aggregate zero runs"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(MeanStd { mean, std })
}

pub fn aggregate_runs(runs: &[EvalResult]) -> Result<Aggregate> {
    let roc: Vec<f64> = runs.iter().map(|r| r.auc_roc).collect();
    let pr: Vec<f64> = runs.iter().map(|r| r.auc_pr).collect();
    Ok(Aggregate {
        runs: runs.len(),
        auc_roc: mean_std(&roc)?,
        auc_pr: mean_std(&pr)?,
    })
}
