//! Ranking metrics and across-seed summaries.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

fn check(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(CoreError::InvalidInput(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(CoreError::InvalidInput(format!("score {s} cannot be ranked")));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    Ok((pos, labels.len() - pos))
}

/// Area under the ROC curve as the Mann-Whitney statistic with average
/// ranks, so tied positive/negative pairs count one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(CoreError::InvalidInput("AUC needs both positive and negative labels".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j share their mean
        let avg = (i + 1 + j) as f64 / 2.0;
        rank_sum += avg * order[i..j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Average precision `sum_n (R_n - R_{n-1}) P_n` over the descending
/// ranking; equal scores keep their input order.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, _) = check(scores, labels)?;
    if pos == 0 {
        return Err(CoreError::InvalidInput("AP needs at least one positive label".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (rank, &k) in order.iter().enumerate() {
        if labels[k] {
            hits += 1;
            ap += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(ap / pos as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinkMetrics {
    pub auc: f64,
    pub ap: f64,
}

/// Scores positives then negatives and computes both metrics.
pub fn link_metrics(pos_scores: &[f64], neg_scores: &[f64]) -> Result<LinkMetrics> {
    if pos_scores.is_empty() || neg_scores.is_empty() {
        return Err(CoreError::InvalidInput("evaluation needs positive and negative pairs".into()));
    }
    let scores: Vec<f64> = pos_scores.iter().chain(neg_scores).copied().collect();
    let labels: Vec<bool> = (0..scores.len()).map(|i| i < pos_scores.len()).collect();
    Ok(LinkMetrics {
        auc: auc(&scores, &labels)?,
        ap: average_precision(&scores, &labels)?,
    })
}

/// Mean and population standard deviation of per-seed values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub per_seed: Vec<f64>,
}

impl Summary {
    pub fn new(values: Vec<f64>) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            per_seed: values,
        }
    }

    /// `"95.80 ± 0.44"` in percent.
    pub fn percent(&self) -> String {
        format!("{:.2} ± {:.2}", 100.0 * self.mean, 100.0 * self.std)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub auc: Summary,
    pub ap: Summary,
}

impl MetricSummary {
    pub fn from_runs(runs: &[LinkMetrics]) -> Self {
        Self {
            auc: Summary::new(runs.iter().map(|m| m.auc).collect()),
            ap: Summary::new(runs.iter().map(|m| m.ap).collect()),
        }
    }
}
