//! Top-K ranking evaluation: Recall@K and NDCG@K with full ranking over all
//! items, training items masked, ties broken by lower item index.

use crate::error::{DreamError, Result};
use crate::ingest::Interaction;
use crate::tensor::Tensor2D;
use serde::{Deserialize, Serialize};

/// Metrics for one split at several cutoffs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub split: String,
    pub epoch: Option<usize>,
    /// (K, Recall@K, NDCG@K), ascending K.
    pub metrics: Vec<KMetrics>,
    pub evaluated_users: usize,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct KMetrics {
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
}

impl EvalReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.metrics.iter().find(|m| m.k == k).map(|m| m.recall)
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.metrics.iter().find(|m| m.k == k).map(|m| m.ndcg)
    }
}

/// Relevant items per user for one split.
pub fn relevant_by_user(split: &[Interaction], num_users: usize) -> Vec<Vec<u32>> {
    let mut rel = vec![Vec::new(); num_users];
    for e in split {
        rel[e.user as usize].push(e.item);
    }
    for v in &mut rel {
        v.sort_unstable();
        v.dedup();
    }
    rel
}

/// Top-K indices of a score row, descending score, ties to the lower index.
fn top_k_indices(scores: &[f32], k: usize) -> Vec<u32> {
    let mut idx: Vec<u32> = (0..scores.len() as u32).collect();
    idx.sort_by(|&a, &b| {
        scores[b as usize]
            .partial_cmp(&scores[a as usize])
            .unwrap()
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Evaluate representations against one split. Scores are dot products of
/// the user and item rows; when `mask_train` is set, training items score
/// negative infinity. Users with no relevant items are excluded from the
/// means.
pub fn evaluate(
    user_reprs: &Tensor2D,
    item_reprs: &Tensor2D,
    relevant: &[Vec<u32>],
    train_items: &[Vec<u32>],
    k_list: &[usize],
    mask_train: bool,
    split_name: &str,
) -> Result<EvalReport> {
    if user_reprs.cols != item_reprs.cols {
        return Err(DreamError::Dimension {
            context: "evaluate representation dims".into(),
            expected: user_reprs.cols,
            found: item_reprs.cols,
        });
    }
    let start = std::time::Instant::now();
    let num_items = item_reprs.rows;
    let mut ks: Vec<usize> = k_list.to_vec();
    ks.sort_unstable();
    ks.dedup();
    let k_max = ks.iter().copied().max().unwrap_or(0);

    let mut recall_acc = vec![0.0f64; ks.len()];
    let mut ndcg_acc = vec![0.0f64; ks.len()];
    let mut evaluated = 0usize;

    let mut scores = vec![0.0f32; num_items];
    for u in 0..user_reprs.rows {
        let rel = &relevant[u];
        if rel.is_empty() {
            continue;
        }
        evaluated += 1;
        let urow = user_reprs.row(u);
        for (i, s) in scores.iter_mut().enumerate() {
            *s = crate::tensor::dot(urow, item_reprs.row(i));
        }
        if mask_train {
            for &it in &train_items[u] {
                scores[it as usize] = f32::NEG_INFINITY;
            }
        }
        let top = top_k_indices(&scores, k_max);
        for (ki, &k) in ks.iter().enumerate() {
            let mut hits = 0usize;
            let mut dcg = 0.0f64;
            for (rank0, &item) in top.iter().take(k).enumerate() {
                if rel.binary_search(&item).is_ok() {
                    hits += 1;
                    dcg += 1.0 / ((rank0 as f64 + 2.0).log2());
                }
            }
            let ideal = rel.len().min(k);
            let idcg: f64 = (0..ideal).map(|r| 1.0 / ((r as f64 + 2.0).log2())).sum();
            recall_acc[ki] += hits as f64 / rel.len() as f64;
            if idcg > 0.0 {
                ndcg_acc[ki] += dcg / idcg;
            }
        }
    }
    if evaluated == 0 {
        return Err(DreamError::EmptyDataset(format!(
            "split {split_name} has no users with relevant items"
        )));
    }
    let metrics = ks
        .iter()
        .enumerate()
        .map(|(ki, &k)| KMetrics {
            k,
            recall: recall_acc[ki] / evaluated as f64,
            ndcg: ndcg_acc[ki] / evaluated as f64,
        })
        .collect();
    Ok(EvalReport {
        split: split_name.to_string(),
        epoch: None,
        metrics,
        evaluated_users: evaluated,
        wall_ms: start.elapsed().as_millis() as u64,
    })
}
