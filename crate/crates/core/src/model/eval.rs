use rayon::prelude::*;
use serde::Serialize;

use super::{Model, ModelError, ModelResult};
use crate::dataset::{InteractionSequence, SplitSequence};
use crate::metrics::{ndcg_at_k, recall_at_k, top_k, Accumulator, EvalResult, MetricError, Task};

/// Which held-out interaction to score.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalTarget {
    /// History = training prefix, target = second-to-last interaction.
    Valid,
    /// History = everything but the last interaction, target = last.
    Test,
}

fn history(split: &SplitSequence, target: EvalTarget, max_len: usize) -> (InteractionSequence, usize, usize) {
    match target {
        EvalTarget::Valid => (split.train.suffix(max_len), split.valid.item, split.valid.expl),
        EvalTarget::Test => (split.test_input().suffix(max_len), split.test.item, split.test.expl),
    }
}

fn hit(scores: &[f64], target: usize, k: usize) -> Result<(f64, f64), MetricError> {
    let ranked = top_k(scores, k)?;
    let truth = std::collections::HashSet::from([target]);
    Ok((recall_at_k(&ranked, &truth, k)?, ndcg_at_k(&ranked, &truth, k)?))
}

/// Recall@K and NDCG@K for both tasks, ranking against the full vocabularies and
/// averaging over users.
pub fn evaluate(model: &Model, splits: &[SplitSequence], target: EvalTarget, k: usize) -> ModelResult<(EvalResult, EvalResult)> {
    if splits.is_empty() {
        return Err(MetricError::NoUsers.into());
    }
    let max_len = model.config.max_len;
    let mask_seen = model.config.mask_seen;
    let per_user: Vec<ModelResult<[(f64, f64); 2]>> = splits
        .par_iter()
        .map(|split| {
            let (input, item, expl) = history(split, target, max_len);
            let (mut rec, exp) = model.last_logits(&input)?;
            if mask_seen {
                for &i in &input.items {
                    rec[i] = f64::NEG_INFINITY;
                }
            }
            Ok([hit(&rec, item, k)?, hit(&exp, expl, k)?])
        })
        .collect();
    let mut acc_rec = Accumulator::new(Task::Rec, k);
    let mut acc_exp = Accumulator::new(Task::Exp, k);
    for r in per_user {
        let [a, b] = r?;
        acc_rec.push(a.0, a.1);
        acc_exp.push(b.0, b.1);
    }
    Ok((acc_rec.finish()?, acc_exp.finish()?))
}

/// Learned gates and mean alignment weights of one user.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UserInspection {
    pub user_index: usize,
    /// Mean gap between consecutive interactions, seconds.
    pub mean_interval: f64,
    pub gamma_rec: Option<f64>,
    pub gamma_exp: Option<f64>,
    pub mu_rec: Option<f64>,
    pub mu_exp: Option<f64>,
}

/// Gates and weights over each user's history before the test interaction.
pub fn inspect_users(model: &Model, splits: &[SplitSequence]) -> ModelResult<Vec<UserInspection>> {
    splits
        .par_iter()
        .map(|split| {
            let input = split.test_input().suffix(model.config.max_len);
            let mut full = split.test_input();
            full.times.push(split.test.time);
            let insp = model.inspect(&input)?;
            let mean = |v: &Option<Vec<f64>>| v.as_ref().map(|v| v.iter().sum::<f64>() / v.len() as f64);
            Ok(UserInspection {
                user_index: split.train.user_index,
                mean_interval: (full.times[full.times.len() - 1] - full.times[0]) as f64 / (full.times.len() - 1) as f64,
                gamma_rec: insp.gamma_rec,
                gamma_exp: insp.gamma_exp,
                mu_rec: mean(&insp.mu_rec),
                mu_exp: mean(&insp.mu_exp),
            })
        })
        .collect::<Vec<ModelResult<UserInspection>>>()
        .into_iter()
        .collect::<Result<Vec<_>, ModelError>>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{split_leave_one_out, Step};
    use crate::model::ExperimentConfig;

    fn splits(n_users: usize, vocab: usize) -> Vec<SplitSequence> {
        (0..n_users)
            .map(|u| {
                let items: Vec<usize> = (0..5).map(|j| (u * 7 + j * 3) % vocab).collect();
                split_leave_one_out(&InteractionSequence {
                    user_index: u,
                    expls: items.iter().map(|i| i % 4).collect(),
                    items,
                    times: (0..5).map(|j| j * 60 * (u as i64 + 1)).collect(),
                })
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn oracle_and_adversarial_scores() {
        let s = splits(30, 20);
        let mut m = Model::new(
            ExperimentConfig {
                d: 4,
                ..Default::default()
            },
            20,
            20,
        )
        .unwrap();
        m.store.get_mut(m.layout.tables.items).data_mut().fill(0.0);
        m.store.get_mut(m.layout.tables.expls).data_mut().fill(0.0);
        let first = &s[..1];
        let Step { item, expl, .. } = first[0].test;
        m.store.get_mut(m.layout.b_rec).data_mut()[item] = 50.0;
        m.store.get_mut(m.layout.b_exp).data_mut()[expl] = 50.0;
        let (r, e) = evaluate(&m, first, EvalTarget::Test, 1).unwrap();
        assert_eq!((r.recall, r.ndcg, e.recall, e.ndcg), (1.0, 1.0, 1.0, 1.0));
        m.store.get_mut(m.layout.b_rec).data_mut()[item] = -50.0;
        m.store.get_mut(m.layout.b_exp).data_mut()[expl] = -50.0;
        let (r, e) = evaluate(&m, first, EvalTarget::Test, 3).unwrap();
        assert_eq!((r.recall, e.recall), (0.0, 0.0));
        let (r, _) = evaluate(&m, &s, EvalTarget::Valid, 20).unwrap();
        assert_eq!(r.recall, 1.0);
        assert_eq!(r.user_count, 30);
        assert!(evaluate(&m, &[], EvalTarget::Test, 1).is_err());
    }

    #[test]
    fn mask_seen_hides_history() {
        let s = splits(1, 20);
        let seen = s[0].test_input().items;
        let target = s[0].test.item;
        assert!(!seen.contains(&target));
        let run = |mask_seen: bool| {
            let mut m = Model::new(
                ExperimentConfig {
                    d: 4,
                    mask_seen,
                    ..Default::default()
                },
                20,
                4,
            )
            .unwrap();
            for &i in &seen {
                m.store.get_mut(m.layout.b_rec).data_mut()[i] = 100.0;
            }
            m.store.get_mut(m.layout.b_rec).data_mut()[target] = 50.0;
            evaluate(&m, &s, EvalTarget::Test, 1).unwrap().0.recall
        };
        assert_eq!(run(false), 0.0);
        assert_eq!(run(true), 1.0);
    }
}
