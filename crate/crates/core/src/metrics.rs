//! Recall@K and NDCG@K with binary relevance, macro-averaged over users.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("ground truth is empty")]
    EmptyTruth,
    #[error("ranked list has {got} entries, expected K = {k}")]
    Length { got: usize, k: usize },
    #[error("no users to evaluate")]
    NoUsers,
    #[error("K = {k} exceeds the {vocab} candidates")]
    KTooLarge { k: usize, vocab: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Rec,
    Exp,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Rec => "rec",
            Task::Exp => "exp",
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub task: Task,
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
    pub user_count: usize,
}

impl EvalResult {
    pub const CSV_HEADER: &'static str = "dataset,task,K,recall,ndcg,users,config_hash";

    pub fn csv_row(&self, dataset: &str, config_hash: &str) -> String {
        format!(
            "{dataset},{},{},{:.6},{:.6},{},{config_hash}",
            self.task, self.k, self.recall, self.ndcg, self.user_count
        )
    }
}

fn check(topk: &[usize], truth: &HashSet<usize>, k: usize) -> Result<(), MetricError> {
    if truth.is_empty() {
        return Err(MetricError::EmptyTruth);
    }
    if topk.len() != k {
        return Err(MetricError::Length { got: topk.len(), k });
    }
    Ok(())
}

/// `|top-K ∩ G| / |G|`.
pub fn recall_at_k(topk: &[usize], truth: &HashSet<usize>, k: usize) -> Result<f64, MetricError> {
    check(topk, truth, k)?;
    let hits = topk.iter().filter(|i| truth.contains(i)).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// `DCG/IDCG` with `DCG = Σ_i r_i / log₂(i + 1)`, ranks from 1.
pub fn ndcg_at_k(topk: &[usize], truth: &HashSet<usize>, k: usize) -> Result<f64, MetricError> {
    check(topk, truth, k)?;
    let discount = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let dcg: f64 = topk
        .iter()
        .enumerate()
        .filter(|(_, i)| truth.contains(i))
        .map(|(pos, _)| discount(pos + 1))
        .sum();
    let idcg: f64 = (1..=k.min(truth.len())).map(discount).sum();
    Ok(dcg / idcg)
}

/// Indices of the `k` largest scores, descending, ties to the smaller index.
pub fn top_k(scores: &[f64], k: usize) -> Result<Vec<usize>, MetricError> {
    if k > scores.len() {
        return Err(MetricError::KTooLarge {
            k,
            vocab: scores.len(),
        });
    }
    let order = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k == 0 {
        return Ok(Vec::new());
    }
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, order);
        idx.truncate(k);
    }
    idx.sort_unstable_by(order);
    Ok(idx)
}

/// Running per-user totals for one task.
#[derive(Clone, Debug)]
pub struct Accumulator {
    task: Task,
    k: usize,
    recall: Vec<f64>,
    ndcg: Vec<f64>,
}

impl Accumulator {
    pub fn new(task: Task, k: usize) -> Self {
        Accumulator {
            task,
            k,
            recall: Vec::new(),
            ndcg: Vec::new(),
        }
    }

    pub fn push(&mut self, recall: f64, ndcg: f64) {
        self.recall.push(recall);
        self.ndcg.push(ndcg);
    }

    /// Scores one user whose single held-out target is `target`.
    pub fn push_scores(&mut self, scores: &[f64], target: usize) -> Result<(), MetricError> {
        let ranked = top_k(scores, self.k)?;
        let truth = HashSet::from([target]);
        self.recall.push(recall_at_k(&ranked, &truth, self.k)?);
        self.ndcg.push(ndcg_at_k(&ranked, &truth, self.k)?);
        Ok(())
    }

    pub fn per_user(&self) -> (&[f64], &[f64]) {
        (&self.recall, &self.ndcg)
    }

    pub fn finish(&self) -> Result<EvalResult, MetricError> {
        if self.recall.is_empty() {
            return Err(MetricError::NoUsers);
        }
        let n = self.recall.len() as f64;
        Ok(EvalResult {
            task: self.task,
            k: self.k,
            recall: self.recall.iter().sum::<f64>() / n,
            ndcg: self.ndcg.iter().sum::<f64>() / n,
            user_count: self.recall.len(),
        })
    }
}
