//! Clustering and pairwise evaluation.
//!
//! Per-image clusterings are scored with the adjusted Rand index and
//! averaged over the split; pairwise decisions (similarity above a
//! threshold) are scored with precision/recall/F. Metrics are also broken
//! down over single-token and multi-token entities: a pair counts toward a
//! restricted breakdown only when both entities belong to it.

use serde::{Deserialize, Serialize};

use crate::cluster::Clustering;
use crate::corpus::GoldClustering;
use crate::error::{Error, Result};

/// Adjusted Rand index between two label vectors over the same entities.
///
/// Identical partitions score 1.0 (including the degenerate single-cluster
/// and n <= 1 cases); a zero denominator with non-identical partitions
/// scores 0.0.
pub fn adjusted_rand_index(pred: &[usize], gold: &[usize]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::invalid(format!(
            "partitions cover {} and {} entities",
            pred.len(),
            gold.len()
        )));
    }
    let n = pred.len();
    if partitions_identical(pred, gold) {
        return Ok(1.0);
    }

    // contingency table
    let k_pred = canonical(pred);
    let k_gold = canonical(gold);
    let np = k_pred.iter().max().map_or(0, |&m| m + 1);
    let ng = k_gold.iter().max().map_or(0, |&m| m + 1);
    let mut table = vec![0u64; np * ng];
    let mut rows = vec![0u64; np];
    let mut cols = vec![0u64; ng];
    for i in 0..n {
        table[k_pred[i] * ng + k_gold[i]] += 1;
        rows[k_pred[i]] += 1;
        cols[k_gold[i]] += 1;
    }
    let comb2 = |x: u64| -> f64 { (x * x.saturating_sub(1)) as f64 / 2.0 };
    let index: f64 = table.iter().map(|&c| comb2(c)).sum();
    let sum_rows: f64 = rows.iter().map(|&c| comb2(c)).sum();
    let sum_cols: f64 = cols.iter().map(|&c| comb2(c)).sum();
    let total = comb2(n as u64);
    let expected = sum_rows * sum_cols / total;
    let max_index = 0.5 * (sum_rows + sum_cols);
    if (max_index - expected).abs() < 1e-12 {
        return Ok(0.0);
    }
    Ok((index - expected) / (max_index - expected))
}

/// ARI between a predicted clustering and the gold clustering.
pub fn ari(pred: &Clustering, gold: &GoldClustering) -> Result<f64> {
    if pred.n_points() != gold.n_entities() {
        return Err(Error::invalid(format!(
            "predicted clustering covers {} entities, gold covers {}",
            pred.n_points(),
            gold.n_entities()
        )));
    }
    adjusted_rand_index(&pred.labels(), &gold.labels())
}

fn canonical(labels: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    let mut next = 0usize;
    labels
        .iter()
        .map(|&l| {
            *map.entry(l).or_insert_with(|| {
                let v = next;
                next += 1;
                v
            })
        })
        .collect()
}

fn partitions_identical(a: &[usize], b: &[usize]) -> bool {
    canonical(a) == canonical(b)
}

/// Pairwise precision, recall and F over (similarity, gold-positive)
/// pairs: predicted means similarity strictly above the threshold.
/// Precision of an empty prediction set is 1.0 by convention; F is 0 when
/// precision and recall are both 0. Errors when there is no gold-positive
/// pair.
pub fn pairwise_prf(pairs: &[(f64, bool)], threshold: f64) -> Result<(f64, f64, f64)> {
    let gold_pos = pairs.iter().filter(|(_, g)| *g).count();
    if gold_pos == 0 {
        return Err(Error::invalid("no gold-positive pairs"));
    }
    let mut predicted = 0usize;
    let mut tp = 0usize;
    for &(s, g) in pairs {
        if s > threshold {
            predicted += 1;
            if g {
                tp += 1;
            }
        }
    }
    Ok(prf_from_counts(tp, predicted, gold_pos))
}

/// (precision, recall, F) from raw counts.
pub fn prf_from_counts(tp: usize, predicted: usize, gold_pos: usize) -> (f64, f64, f64) {
    let precision = if predicted == 0 {
        1.0
    } else {
        tp as f64 / predicted as f64
    };
    let recall = if gold_pos == 0 {
        0.0
    } else {
        tp as f64 / gold_pos as f64
    };
    let f = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f)
}

/// Which entities a restricted breakdown keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Breakdown {
    All,
    /// Exactly one normalized token.
    Single,
    /// Two or more normalized tokens.
    Multi,
}

impl Breakdown {
    fn keeps(&self, token_count: usize) -> bool {
        match self {
            Breakdown::All => true,
            Breakdown::Single => token_count == 1,
            Breakdown::Multi => token_count >= 2,
        }
    }
}

/// One image's inputs to split evaluation.
#[derive(Debug, Clone)]
pub struct ImageEval {
    pub image_id: String,
    /// Normalized token count per entity.
    pub token_counts: Vec<usize>,
    pub gold: GoldClustering,
    pub pred: Clustering,
    /// Upper-triangle pair similarities: (i, j, similarity) with i < j.
    pub pair_sims: Vec<(usize, usize, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BreakdownMetrics {
    pub mean_ari: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f_score: Option<f64>,
    pub images: usize,
    pub entities: usize,
    pub pairs: usize,
    pub gold_positive_pairs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub all: BreakdownMetrics,
    pub single: BreakdownMetrics,
    pub multi: BreakdownMetrics,
    pub images: usize,
    pub entities: usize,
    pub pairs: usize,
}

impl EvalReport {
    pub fn mean_ari(&self) -> f64 {
        self.all.mean_ari.unwrap_or(0.0)
    }

    pub fn f_score(&self) -> f64 {
        self.all.f_score.unwrap_or(0.0)
    }
}

/// Evaluate a split.
///
/// Mean ARI is the unweighted mean of per-image ARIs. Pairwise metrics are
/// pooled over the split's pairs by default; `per_image_prf` averages the
/// per-image metrics instead (over images that have gold positives).
/// Restricted breakdowns induce sub-partitions on the kept entities for
/// ARI and keep only pairs whose two entities both qualify; mixed pairs
/// appear only under "all".
pub fn evaluate_split(
    images: &[ImageEval],
    threshold: f64,
    per_image_prf: bool,
) -> Result<EvalReport> {
    let mut report = EvalReport {
        all: evaluate_breakdown(images, threshold, per_image_prf, Breakdown::All)?,
        single: evaluate_breakdown(images, threshold, per_image_prf, Breakdown::Single)?,
        multi: evaluate_breakdown(images, threshold, per_image_prf, Breakdown::Multi)?,
        images: images.len(),
        entities: images.iter().map(|im| im.token_counts.len()).sum(),
        pairs: images.iter().map(|im| im.pair_sims.len()).sum(),
    };
    if report.all.gold_positive_pairs == 0 {
        return Err(Error::invalid("split has no gold-positive pairs"));
    }
    // the "all" breakdown is total, so expose its counts at the top level
    report.entities = report.all.entities;
    Ok(report)
}

fn evaluate_breakdown(
    images: &[ImageEval],
    threshold: f64,
    per_image_prf: bool,
    breakdown: Breakdown,
) -> Result<BreakdownMetrics> {
    let mut aris = Vec::new();
    let mut entities = 0usize;
    let mut pairs = 0usize;
    let mut gold_positive = 0usize;
    let mut pooled_tp = 0usize;
    let mut pooled_pred = 0usize;
    let mut per_image: Vec<(f64, f64, f64)> = Vec::new();

    for im in images {
        let keep: Vec<usize> = (0..im.token_counts.len())
            .filter(|&i| breakdown.keeps(im.token_counts[i]))
            .collect();
        entities += keep.len();
        if !keep.is_empty() {
            let index_of = |orig: usize| keep.iter().position(|&k| k == orig);
            let pred_labels: Vec<usize> = {
                let full = im.pred.labels();
                keep.iter().map(|&i| full[i]).collect()
            };
            let gold_labels: Vec<usize> = {
                let full = im.gold.labels();
                keep.iter().map(|&i| full[i]).collect()
            };
            aris.push(adjusted_rand_index(&pred_labels, &gold_labels)?);

            let gold_full = im.gold.labels();
            let mut im_tp = 0usize;
            let mut im_pred = 0usize;
            let mut im_gold = 0usize;
            for &(i, j, s) in &im.pair_sims {
                if index_of(i).is_none() || index_of(j).is_none() {
                    continue;
                }
                pairs += 1;
                let positive = gold_full[i] == gold_full[j];
                if positive {
                    gold_positive += 1;
                    im_gold += 1;
                }
                if s > threshold {
                    pooled_pred += 1;
                    im_pred += 1;
                    if positive {
                        pooled_tp += 1;
                        im_tp += 1;
                    }
                }
            }
            if im_gold > 0 {
                per_image.push(prf_from_counts(im_tp, im_pred, im_gold));
            }
        }
    }

    let mean_ari = if aris.is_empty() {
        None
    } else {
        Some(aris.iter().sum::<f64>() / aris.len() as f64)
    };
    let (precision, recall, f_score) = if gold_positive == 0 {
        (None, None, None)
    } else if per_image_prf {
        let n = per_image.len() as f64;
        let p = per_image.iter().map(|m| m.0).sum::<f64>() / n;
        let r = per_image.iter().map(|m| m.1).sum::<f64>() / n;
        let f = per_image.iter().map(|m| m.2).sum::<f64>() / n;
        (Some(p), Some(r), Some(f))
    } else {
        let (p, r, f) = prf_from_counts(pooled_tp, pooled_pred, gold_positive);
        (Some(p), Some(r), Some(f))
    };
    Ok(BreakdownMetrics {
        mean_ari,
        precision,
        recall,
        f_score,
        images: aris.len(),
        entities,
        pairs,
        gold_positive_pairs: gold_positive,
    })
}
