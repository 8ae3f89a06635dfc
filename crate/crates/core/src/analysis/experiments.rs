use serde::Serialize;

use super::stats::{fit_line, kmeans, min_max_normalize, ClusterResult, RegressionFit};
use super::AnalysisError;
use crate::alignment::MiMode;
use crate::dataset::Corpus;
use crate::lru::param_count;
use crate::metrics::EvalResult;
use crate::model::{evaluate, inspect_users, train, EvalTarget, ExperimentConfig, Model, UserInspection};
use crate::time_encoder::TimeStrategy;

/// Test-split metrics of one trained configuration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Cell {
    pub rec: EvalResult,
    pub exp: EvalResult,
    pub best_epoch: Option<usize>,
    pub seed: u64,
    pub config_hash: String,
}

impl Cell {
    const COLUMNS: &'static str = "rec_recall,rec_ndcg,exp_recall,exp_ndcg,best_epoch,seed,config_hash";

    fn csv(&self) -> String {
        format!(
            "{:.6},{:.6},{:.6},{:.6},{},{},{}",
            self.rec.recall,
            self.rec.ndcg,
            self.exp.recall,
            self.exp.ndcg,
            self.best_epoch.map_or(String::new(), |e| e.to_string()),
            self.seed,
            self.config_hash
        )
    }
}

/// Trains on the training prefixes and scores the held-out last interactions.
pub fn run_cell(corpus: &Corpus, config: &ExperimentConfig) -> Result<Cell, AnalysisError> {
    let (model, report) = train(corpus, config)?;
    let (rec, exp) = evaluate(&model, &corpus.splits(), EvalTarget::Test, config.eval_k)?;
    Ok(Cell {
        rec,
        exp,
        best_epoch: report.best_epoch,
        seed: config.seed,
        config_hash: config.hash(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub time_aware: bool,
    pub multi_interest: bool,
    pub explanation: bool,
    pub cell: Cell,
}

impl AblationRow {
    pub fn to_csv(rows: &[AblationRow]) -> String {
        let mut out = format!("time_aware,multi_interest,explanation,{}\n", Cell::COLUMNS);
        for r in rows {
            out.push_str(&format!("{},{},{},{}\n", r.time_aware, r.multi_interest, r.explanation, r.cell.csv()));
        }
        out
    }
}

/// All eight on/off combinations of the three strategies, backbone first and
/// full model last.
pub fn ablation_grid(corpus: &Corpus, base: &ExperimentConfig) -> Result<Vec<AblationRow>, AnalysisError> {
    let mut rows = Vec::with_capacity(8);
    for mask in 0..8u8 {
        let (time_aware, multi_interest, explanation) = (mask & 4 != 0, mask & 2 != 0, mask & 1 != 0);
        let config = ExperimentConfig {
            time_aware,
            multi_interest,
            explanation_personalization: explanation,
            ..base.clone()
        };
        rows.push(AblationRow {
            time_aware,
            multi_interest,
            explanation,
            cell: run_cell(corpus, &config)?,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StrategyRow {
    pub strategy: String,
    pub cell: Cell,
}

impl StrategyRow {
    pub fn to_csv(rows: &[StrategyRow]) -> String {
        let mut out = format!("strategy,{}\n", Cell::COLUMNS);
        for r in rows {
            out.push_str(&format!("{},{}\n", r.strategy, r.cell.csv()));
        }
        out
    }
}

/// `abs_only`, `adj_only`, `equal` and `gated` under one seed.
pub fn gating_strategy_sweep(corpus: &Corpus, base: &ExperimentConfig) -> Result<Vec<StrategyRow>, AnalysisError> {
    [TimeStrategy::AbsOnly, TimeStrategy::AdjOnly, TimeStrategy::Equal, TimeStrategy::Gated]
        .into_iter()
        .map(|s| {
            let config = ExperimentConfig {
                time_aware: true,
                time_strategy: s,
                ..base.clone()
            };
            Ok(StrategyRow {
                strategy: s.to_string(),
                cell: run_cell(corpus, &config)?,
            })
        })
        .collect()
}

/// `fixed`, `single_shared` and `dynamic_dual` under one seed.
pub fn mi_strategy_sweep(corpus: &Corpus, base: &ExperimentConfig) -> Result<Vec<StrategyRow>, AnalysisError> {
    [MiMode::Fixed, MiMode::SingleShared, MiMode::DynamicDual]
        .into_iter()
        .map(|m| {
            let config = ExperimentConfig {
                explanation_personalization: true,
                mi_mode: m,
                ..base.clone()
            };
            Ok(StrategyRow {
                strategy: m.to_string(),
                cell: run_cell(corpus, &config)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HeadSweepRow {
    pub d: usize,
    pub heads: usize,
    /// Recurrent-layer parameters over both branches.
    pub lru_params: usize,
    /// `d²/H` per branch.
    pub dominant_term: usize,
    pub model_params: usize,
    pub cell: Cell,
}

impl HeadSweepRow {
    pub fn to_csv(rows: &[HeadSweepRow]) -> String {
        let mut out = format!("d,H,lru_params,dominant_term,model_params,{}\n", Cell::COLUMNS);
        for r in rows {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.d,
                r.heads,
                r.lru_params,
                r.dominant_term,
                r.model_params,
                r.cell.csv()
            ));
        }
        out
    }
}

/// Divisors of `d`, ascending.
pub fn divisors(d: usize) -> Vec<usize> {
    (1..=d).filter(|h| d.is_multiple_of(*h)).collect()
}

/// Trains one model per `(d, H)` pair. Every `H` must divide its `d`.
pub fn head_sweep(
    corpus: &Corpus,
    base: &ExperimentConfig,
    grid: &[(usize, Vec<usize>)],
) -> Result<Vec<HeadSweepRow>, AnalysisError> {
    let mut rows = Vec::new();
    for (d, heads) in grid {
        for &h in heads {
            let count = param_count(*d, h, 2).map_err(|e| AnalysisError::Precondition(e.to_string()))?;
            let config = ExperimentConfig {
                d: *d,
                heads: h,
                multi_interest: true,
                ..base.clone()
            };
            let model_params = Model::new(config.clone(), corpus.items.len(), corpus.expls.len())?.param_count();
            rows.push(HeadSweepRow {
                d: *d,
                heads: h,
                lru_params: count.total,
                dominant_term: count.dominant_term,
                model_params,
                cell: run_cell(corpus, &config)?,
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, Serialize)]
pub struct GammaAnalysis {
    pub rec: RegressionFit,
    pub exp: RegressionFit,
    pub users: Vec<UserInspection>,
}

impl GammaAnalysis {
    pub fn scatter_csv(&self, corpus: &Corpus, config: &ExperimentConfig) -> String {
        let mut out = String::from("user_id,mean_interval,gamma_rec,gamma_exp,seed,config_hash\n");
        let hash = config.hash();
        for u in &self.users {
            out.push_str(&format!(
                "{},{},{:.10},{:.10},{},{}\n",
                corpus.users[u.user_index],
                u.mean_interval,
                u.gamma_rec.unwrap_or(f64::NAN),
                u.gamma_exp.unwrap_or(f64::NAN),
                config.seed,
                hash
            ));
        }
        out
    }

    pub fn fit_csv(&self, config: &ExperimentConfig) -> String {
        let mut out = String::from("task,slope,intercept,r,degenerate,users,seed,config_hash\n");
        for (task, f) in [("rec", &self.rec), ("exp", &self.exp)] {
            out.push_str(&format!(
                "{task},{:e},{:.10},{:.6},{},{},{},{}\n",
                f.slope,
                f.intercept,
                f.r,
                f.degenerate,
                f.n,
                config.seed,
                config.hash()
            ));
        }
        out
    }
}

/// Per-user `(mean interval, γ)` points for both branches with least-squares fits.
pub fn gamma_interval_analysis(model: &Model, corpus: &Corpus) -> Result<GammaAnalysis, AnalysisError> {
    if model.config.resolved().strategy != TimeStrategy::Gated {
        return Err(AnalysisError::Precondition("gate analysis needs the gated time strategy".into()));
    }
    if corpus.sequences.len() < 3 {
        return Err(AnalysisError::TooFewPoints {
            got: corpus.sequences.len(),
            needed: 3,
        });
    }
    let users = inspect_users(model, &corpus.splits())?;
    let points = |pick: fn(&UserInspection) -> Option<f64>| -> Vec<(f64, f64)> {
        users.iter().filter_map(|u| pick(u).map(|g| (u.mean_interval, g))).collect()
    };
    Ok(GammaAnalysis {
        rec: fit_line(&points(|u| u.gamma_rec))?,
        exp: fit_line(&points(|u| u.gamma_exp))?,
        users,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct MuAnalysis {
    /// Per-user `(μ̄_rec, μ̄_exp)`.
    pub raw: Vec<[f64; 2]>,
    pub normalized: Vec<[f64; 2]>,
    pub clusters: ClusterResult,
}

impl MuAnalysis {
    pub fn to_csv(&self, corpus: &Corpus, config: &ExperimentConfig) -> String {
        let mut out = String::from("user_id,mu_rec,mu_exp,mu_rec_norm,mu_exp_norm,cluster,seed,config_hash\n");
        let hash = config.hash();
        for (i, (r, n)) in self.raw.iter().zip(&self.normalized).enumerate() {
            out.push_str(&format!(
                "{},{:.10},{:.10},{:.10},{:.10},{},{},{}\n",
                corpus.users[i], r[0], r[1], n[0], n[1], self.clusters.assignments[i], config.seed, hash
            ));
        }
        out
    }
}

/// k-means on min-max normalized per-user mean alignment weights.
pub fn mu_clustering(model: &Model, corpus: &Corpus, k: usize, seed: u64) -> Result<MuAnalysis, AnalysisError> {
    if model.config.resolved().mi_mode != MiMode::DynamicDual {
        return Err(AnalysisError::Precondition("alignment-weight clustering needs the dynamic_dual MI mode".into()));
    }
    let users = inspect_users(model, &corpus.splits())?;
    let raw: Vec<[f64; 2]> = users
        .iter()
        .map(|u| match (u.mu_rec, u.mu_exp) {
            (Some(r), Some(e)) => Ok([r, e]),
            _ => Err(AnalysisError::Precondition("model produced no alignment weights".into())),
        })
        .collect::<Result<_, _>>()?;
    let normalized = min_max_normalize(&raw);
    let clusters = kmeans(&normalized, k, seed)?;
    Ok(MuAnalysis {
        raw,
        normalized,
        clusters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::synthetic::{generate_synthetic, SyntheticSpec};
    use crate::dataset::build_corpus;

    fn tiny() -> (Corpus, ExperimentConfig) {
        let spec = SyntheticSpec {
            user_count: 24,
            item_count: 30,
            expl_count: 12,
            min_len: 6,
            max_len: 8,
            ..Default::default()
        };
        let corpus = build_corpus(&generate_synthetic(&spec).unwrap().interactions).unwrap();
        let config = ExperimentConfig {
            d: 8,
            heads: 2,
            epochs: 2,
            batch_size: 8,
            ..Default::default()
        };
        (corpus, config)
    }

    #[test]
    fn ablation_has_eight_reproducible_rows() {
        let (corpus, config) = tiny();
        let rows = ablation_grid(&corpus, &config).unwrap();
        assert_eq!(rows.len(), 8);
        assert!(!rows[0].time_aware && !rows[0].multi_interest && !rows[0].explanation);
        assert!(rows[7].time_aware && rows[7].multi_interest && rows[7].explanation);
        let again = run_cell(
            &corpus,
            &ExperimentConfig {
                time_aware: false,
                multi_interest: false,
                explanation_personalization: false,
                ..config
            },
        )
        .unwrap();
        assert_eq!(again, rows[0].cell);
        let csv = AblationRow::to_csv(&rows);
        assert_eq!(csv.lines().count(), 9);
        assert!(csv.lines().skip(1).all(|l| l.rsplit(',').next().unwrap().len() == 64 && l.contains(",42,")));
    }

    #[test]
    fn strategy_rows_use_enum_names() {
        let (corpus, config) = tiny();
        let rows = gating_strategy_sweep(&corpus, &ExperimentConfig { epochs: 1, ..config.clone() }).unwrap();
        let names: Vec<&str> = rows.iter().map(|r| r.strategy.as_str()).collect();
        assert_eq!(names, ["abs_only", "adj_only", "equal", "gated"]);
        let rows = mi_strategy_sweep(&corpus, &ExperimentConfig { epochs: 1, ..config }).unwrap();
        let names: Vec<&str> = rows.iter().map(|r| r.strategy.as_str()).collect();
        assert_eq!(names, ["fixed", "single_shared", "dynamic_dual"]);
    }

    #[test]
    fn head_sweep_params_shrink_with_heads() {
        let (corpus, config) = tiny();
        assert_eq!(divisors(60), [1, 2, 3, 4, 5, 6, 10, 12, 15, 20, 30, 60]);
        let rows = head_sweep(&corpus, &ExperimentConfig { epochs: 1, ..config }, &[(12, vec![1, 2, 3, 4, 6])]).unwrap();
        assert!(rows.windows(2).all(|w| w[1].lru_params < w[0].lru_params && w[1].model_params < w[0].model_params));
        assert!(rows.iter().all(|r| r.dominant_term == 144 / r.heads));
        assert_eq!(HeadSweepRow::to_csv(&rows).lines().count(), 6);
    }

    #[test]
    fn analyses_check_preconditions() {
        let (corpus, config) = tiny();
        let m = Model::new(
            ExperimentConfig {
                time_strategy: TimeStrategy::Equal,
                mi_mode: MiMode::Fixed,
                ..config.clone()
            },
            corpus.items.len(),
            corpus.expls.len(),
        )
        .unwrap();
        assert!(matches!(gamma_interval_analysis(&m, &corpus), Err(AnalysisError::Precondition(_))));
        assert!(matches!(mu_clustering(&m, &corpus, 3, 0), Err(AnalysisError::Precondition(_))));

        let m = Model::new(config.clone(), corpus.items.len(), corpus.expls.len()).unwrap();
        let g = gamma_interval_analysis(&m, &corpus).unwrap();
        assert_eq!(g.users.len(), corpus.sequences.len());
        assert!(g.rec.r.abs() <= 1.0);
        assert_eq!(g.scatter_csv(&corpus, &config).lines().count(), corpus.sequences.len() + 1);
        let mu = mu_clustering(&m, &corpus, 3, 0).unwrap();
        assert!(mu.normalized.iter().flatten().all(|v| (0.0..=1.0).contains(v)));

        let mut small = corpus.clone();
        small.sequences.truncate(2);
        assert!(matches!(gamma_interval_analysis(&m, &small), Err(AnalysisError::TooFewPoints { .. })));
    }
}
