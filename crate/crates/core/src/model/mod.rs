//! The full recommender: time-aware embeddings, two multihead recurrent
//! branches, tied-weight prediction layers and the joint objective.

mod checkpoint;
mod config;
mod eval;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, SavedParam, CHECKPOINT_VERSION};
pub use config::{ExperimentConfig, Resolved, CONFIG_KEYS};
pub use eval::{evaluate, inspect_users, EvalTarget, UserInspection};
pub use train::{thread_pool, train, train_with, Adam, EpochReport, TrainOptions, TrainReport};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::alignment::{self, MiMode, MiParams, MiWeights};
use crate::autodiff::{Gradients, ParamId, ParamStore, Tape, Tensor, TensorError, TensorResult, Var};
use crate::dataset::{Batch, DataError, InteractionSequence};
use crate::lru::{self, Branch};
use crate::metrics::{top_k, MetricError, Task};
use crate::time_encoder::{self, EmbeddingTables, TimeEncoder, TimeError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Time(#[from] TimeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("training diverged: non-finite loss in epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
    #[error("sequence has {got} interactions, need at least {needed}")]
    TooShort { got: usize, needed: usize },
    #[error("batch has no sequence with a next-step target")]
    NoTargets,
}

impl ModelError {
    /// Failures caused by floating-point blow-up rather than bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            ModelError::Divergence { .. } | ModelError::Tensor(TensorError::NonFinite { .. })
        ) || matches!(self, ModelError::Time(TimeError::Tensor(TensorError::NonFinite { .. })))
    }
}

pub type ModelResult<T> = Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadIds {
    pub nu: ParamId,
    pub theta: ParamId,
    pub u: ParamId,
}

/// Where each component lives in the parameter store.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub tables: EmbeddingTables,
    pub time: TimeEncoder,
    pub heads_rec: Vec<HeadIds>,
    pub heads_exp: Vec<HeadIds>,
    pub mi: MiParams,
    pub b_rec: ParamId,
    pub b_exp: ParamId,
    pub n_items: usize,
    pub n_expls: usize,
    pub d: usize,
}

impl Layout {
    fn register(store: &mut ParamStore, rng: &mut ChaCha8Rng, n_items: usize, n_expls: usize, d: usize, heads: usize) -> Self {
        let tables = EmbeddingTables::register(store, rng, n_items, n_expls, d);
        let time = TimeEncoder::register(store, rng, d);
        let m = d / heads;
        let mut branch_heads = |store: &mut ParamStore, branch: Branch| -> Vec<HeadIds> {
            let tag = match branch {
                Branch::Rec => "rec",
                Branch::Exp => "exp",
            };
            (0..heads)
                .map(|i| {
                    let p = lru::init_head(rng, m, branch, i);
                    HeadIds {
                        nu: store.add(format!("lru.{tag}.{i}.nu"), Tensor::matrix(1, m, p.nu).expect("nu")),
                        theta: store.add(format!("lru.{tag}.{i}.theta"), Tensor::matrix(1, m, p.theta).expect("theta")),
                        u: store.add(format!("lru.{tag}.{i}.u"), p.u),
                    }
                })
                .collect()
        };
        let heads_rec = branch_heads(store, Branch::Rec);
        let heads_exp = branch_heads(store, Branch::Exp);
        let mi = MiParams::register(store, rng, d);
        Layout {
            tables,
            time,
            heads_rec,
            heads_exp,
            mi,
            b_rec: store.add("pred.b_rec", Tensor::zeros(&[1, n_items])),
            b_exp: store.add("pred.b_exp", Tensor::zeros(&[1, n_expls])),
            n_items,
            n_expls,
            d,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ExperimentConfig,
    pub store: ParamStore,
    pub layout: Layout,
}

/// Graph-building view over a model's layout and some parameter values.
#[derive(Clone, Copy)]
pub struct Net<'a> {
    pub config: &'a ExperimentConfig,
    pub layout: &'a Layout,
    pub store: &'a ParamStore,
}

struct Graph {
    z_rec: Var,
    z_exp: Var,
    logits_rec: Var,
    logits_exp: Var,
    weights: Option<MiWeights>,
    gamma_rec: Option<f64>,
    gamma_exp: Option<f64>,
}

/// Loss terms of one sequence, each on the tape.
#[derive(Clone, Copy, Debug)]
pub struct SequenceLoss {
    pub rec: Var,
    pub exp: Var,
    pub mi: Var,
    pub steps: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossParts {
    pub total: f64,
    pub rec: f64,
    pub exp: f64,
    pub mi: f64,
}

/// Values of `forward` over a padded batch. Padded cells of the logits are 0.
#[derive(Clone, Debug)]
pub struct BatchForward {
    /// `B × L × |V|`.
    pub logits_rec: Tensor,
    /// `B × L × |E|`.
    pub logits_exp: Tensor,
    pub mu_rec: Vec<Option<Vec<f64>>>,
    pub mu_exp: Vec<Option<Vec<f64>>>,
    pub gamma_rec: Vec<Option<f64>>,
    pub gamma_exp: Vec<Option<f64>>,
}

/// Gates and alignment weights of one sequence.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Inspection {
    pub gamma_rec: Option<f64>,
    pub gamma_exp: Option<f64>,
    pub mu_rec: Option<Vec<f64>>,
    pub mu_exp: Option<Vec<f64>>,
}

/// Independent random stream for row `row` of a batch drawn with `seed`.
pub fn row_rng(seed: u64, row: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(row as u64);
    rng
}

impl<'a> Net<'a> {
    fn encode(&self, tape: &mut Tape, x: Var, heads: &[HeadIds]) -> TensorResult<Var> {
        let h = heads.len();
        let m = self.layout.d / h;
        let mut outs = Vec::with_capacity(h);
        for (i, ids) in heads.iter().enumerate() {
            let xs = if h == 1 { x } else { tape.slice_cols(x, i * m, (i + 1) * m)? };
            let nu = tape.param(self.store, ids.nu)?;
            let theta = tape.param(self.store, ids.theta)?;
            let re = lru::recurrence(tape, xs, nu, theta, self.config.lru_normalize, self.config.lru_mode)?;
            let u = tape.param(self.store, ids.u)?;
            outs.push(tape.matmul(re, u)?);
        }
        if h == 1 {
            Ok(outs[0])
        } else {
            tape.concat_cols(&outs)
        }
    }

    fn dropout(&self, tape: &mut Tape, x: Var, rng: &mut ChaCha8Rng) -> TensorResult<Var> {
        let p = self.config.dropout;
        let shape = tape.value(x).shape().to_vec();
        let len = tape.value(x).len();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..len).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        let mask = tape.constant(Tensor::new(shape, mask)?)?;
        tape.mul(x, mask)
    }

    /// Builds the forward graph. `last_only` keeps only the final step's logits;
    /// `train_rng` enables dropout.
    fn graph(
        &self,
        tape: &mut Tape,
        seq: &InteractionSequence,
        last_only: bool,
        with_weights: bool,
        train_rng: Option<&mut ChaCha8Rng>,
    ) -> ModelResult<Graph> {
        let r = self.config.resolved();
        let (heads_rec, heads_exp) = (&self.layout.heads_rec, &self.layout.heads_exp);
        if heads_rec.len() != r.heads {
            return Err(ModelError::Config(format!(
                "model has {} heads per branch, config resolves to {}",
                heads_rec.len(),
                r.heads
            )));
        }
        let emb = time_encoder::time_aware_embed(
            tape,
            self.store,
            &self.layout.tables,
            &self.layout.time,
            seq,
            self.config.alpha,
            self.config.beta,
            r.strategy,
        )?;
        let (mut x_rec, mut x_exp) = (emb.e_rec_time, emb.e_exp_time);
        if let Some(rng) = train_rng {
            if self.config.dropout > 0.0 {
                x_rec = self.dropout(tape, x_rec, rng)?;
                x_exp = self.dropout(tape, x_exp, rng)?;
            }
        }
        let z_rec = self.encode(tape, x_rec, heads_rec)?;
        let z_exp = self.encode(tape, x_exp, heads_exp)?;
        let weights = if with_weights {
            alignment::weights_for_mode(tape, self.store, &self.layout.mi, r.mi_mode, z_rec, z_exp)?
        } else {
            None
        };
        let n = seq.len();
        let (zr, ze) = if last_only {
            (tape.slice_rows(z_rec, n - 1, n)?, tape.slice_rows(z_exp, n - 1, n)?)
        } else {
            (z_rec, z_exp)
        };
        let mv = tape.param(self.store, self.layout.tables.items)?;
        let me = tape.param(self.store, self.layout.tables.expls)?;
        let b_rec = tape.param(self.store, self.layout.b_rec)?;
        let b_exp = tape.param(self.store, self.layout.b_exp)?;
        let logits_rec = tape.matmul_t(zr, mv)?;
        let logits_rec = tape.add_bias_rows(logits_rec, b_rec)?;
        let logits_exp = tape.matmul_t(ze, me)?;
        let logits_exp = tape.add_bias_rows(logits_exp, b_exp)?;
        Ok(Graph {
            z_rec,
            z_exp,
            logits_rec,
            logits_exp,
            weights,
            gamma_rec: emb.gamma_rec,
            gamma_exp: emb.gamma_exp,
        })
    }

    /// Next-step losses of one training sequence: position `j` predicts step `j+1`.
    pub fn sequence_loss(&self, tape: &mut Tape, seq: &InteractionSequence, rng: &mut ChaCha8Rng) -> ModelResult<SequenceLoss> {
        let n = seq.len();
        if n < 2 {
            return Err(ModelError::TooShort { got: n, needed: 2 });
        }
        let input = seq.prefix(n - 1);
        let item_targets = &seq.items[1..];
        let expl_targets = &seq.expls[1..];
        let mask = vec![true; n - 1];
        let mode = self.config.resolved().mi_mode;
        let g = self.graph(tape, &input, false, true, Some(rng))?;
        let rec = tape.softmax_cross_entropy(g.logits_rec, item_targets, &mask)?;
        let exp = tape.softmax_cross_entropy(g.logits_exp, expl_targets, &mask)?;
        let mi = if mode == MiMode::Disabled {
            tape.constant(Tensor::scalar(0.0))?
        } else {
            let mv = tape.param(self.store, self.layout.tables.items)?;
            let me = tape.param(self.store, self.layout.tables.expls)?;
            let l_rec = tape.param(self.store, self.layout.mi.lambda_rec)?;
            let l_exp = tape.param(self.store, self.layout.mi.lambda_exp)?;
            let cands = self.config.mi_candidates;
            let j_rec = alignment::branch_info_nce_with(tape, rng, cands, g.z_exp, mv, l_rec, item_targets, &mask)?;
            let j_exp = alignment::branch_info_nce_with(tape, rng, cands, g.z_rec, me, l_exp, expl_targets, &mask)?;
            alignment::j_mi(tape, mode, g.weights.as_ref(), j_rec, j_exp, &mask)?
        };
        Ok(SequenceLoss {
            rec,
            exp,
            mi,
            steps: n - 1,
        })
    }

    /// Weights of each row of a batch in the objective: cross-entropy terms are
    /// averaged over all target steps, the alignment term over sequences.
    fn row_weights(batch: &Batch) -> ModelResult<(Vec<usize>, Vec<(f64, f64)>)> {
        let rows: Vec<usize> = (0..batch.size()).filter(|&b| batch.lengths[b] >= 2).collect();
        if rows.is_empty() {
            return Err(ModelError::NoTargets);
        }
        let steps: usize = rows.iter().map(|&b| batch.lengths[b] - 1).sum();
        let weights = rows
            .iter()
            .map(|&b| ((batch.lengths[b] - 1) as f64 / steps as f64, 1.0 / rows.len() as f64))
            .collect();
        Ok((rows, weights))
    }

    /// The whole batch objective on a single tape.
    pub fn batch_objective(&self, tape: &mut Tape, batch: &Batch, seed: u64) -> ModelResult<(Var, [Var; 3])> {
        let (rows, weights) = Self::row_weights(batch)?;
        let mut acc: Option<[Var; 3]> = None;
        for (&b, &(w_ce, w_mi)) in rows.iter().zip(&weights) {
            let mut rng = row_rng(seed, b);
            let l = self.sequence_loss(tape, &batch.sequence(b), &mut rng)?;
            let terms = [tape.scale(l.rec, w_ce)?, tape.scale(l.exp, w_ce)?, tape.scale(l.mi, w_mi)?];
            acc = Some(match acc {
                None => terms,
                Some(prev) => [
                    tape.add(prev[0], terms[0])?,
                    tape.add(prev[1], terms[1])?,
                    tape.add(prev[2], terms[2])?,
                ],
            });
        }
        let parts = acc.expect("at least one row");
        let s = tape.add(parts[0], parts[1])?;
        let total = tape.add(s, parts[2])?;
        Ok((total, parts))
    }

    /// Objective value and parameter gradients, one tape per sequence.
    ///
    /// Rows run in parallel; gradients are summed in row order so the result does
    /// not depend on scheduling.
    pub fn batch_gradients(&self, batch: &Batch, seed: u64) -> ModelResult<(LossParts, Gradients)> {
        let (rows, weights) = Self::row_weights(batch)?;
        let results: Vec<ModelResult<([f64; 3], Gradients)>> = rows
            .par_iter()
            .zip(weights.par_iter())
            .map(|(&b, &(w_ce, w_mi))| {
                let mut tape = Tape::new();
                let mut rng = row_rng(seed, b);
                let l = self.sequence_loss(&mut tape, &batch.sequence(b), &mut rng)?;
                let a = tape.scale(l.rec, w_ce)?;
                let c = tape.scale(l.exp, w_ce)?;
                let m = tape.scale(l.mi, w_mi)?;
                let s = tape.add(a, c)?;
                let total = tape.add(s, m)?;
                let values = [tape.value(a).item(), tape.value(c).item(), tape.value(m).item()];
                let grads = tape.backward(total)?;
                Ok((values, grads))
            })
            .collect();
        let mut parts = LossParts::default();
        let mut grads = Gradients::new();
        for r in results {
            let (v, g) = r?;
            parts.rec += v[0];
            parts.exp += v[1];
            parts.mi += v[2];
            grads.merge(&g);
        }
        parts.total = parts.rec + parts.exp + parts.mi;
        Ok((parts, grads))
    }

    /// Per-step logits, weights and gates over a padded batch (no targets needed).
    pub fn forward(&self, batch: &Batch) -> ModelResult<BatchForward> {
        let (bsz, width) = (batch.size(), batch.width());
        let (nv, ne) = (self.layout.n_items, self.layout.n_expls);
        let mut logits_rec = vec![0.0; bsz * width * nv];
        let mut logits_exp = vec![0.0; bsz * width * ne];
        let mut out = BatchForward {
            logits_rec: Tensor::zeros(&[0]),
            logits_exp: Tensor::zeros(&[0]),
            mu_rec: Vec::with_capacity(bsz),
            mu_exp: Vec::with_capacity(bsz),
            gamma_rec: Vec::with_capacity(bsz),
            gamma_exp: Vec::with_capacity(bsz),
        };
        for b in 0..bsz {
            let seq = batch.sequence(b);
            if seq.is_empty() {
                out.mu_rec.push(None);
                out.mu_exp.push(None);
                out.gamma_rec.push(None);
                out.gamma_exp.push(None);
                continue;
            }
            let mut tape = Tape::new();
            let g = self.graph(&mut tape, &seq, false, true, None)?;
            let n = seq.len();
            logits_rec[b * width * nv..(b * width + n) * nv].copy_from_slice(tape.value(g.logits_rec).data());
            logits_exp[b * width * ne..(b * width + n) * ne].copy_from_slice(tape.value(g.logits_exp).data());
            let col = |v: Var| tape.value(v).data().to_vec();
            out.mu_rec.push(g.weights.map(|w| col(w.mu_rec)));
            out.mu_exp.push(g.weights.map(|w| col(w.mu_exp)));
            out.gamma_rec.push(g.gamma_rec);
            out.gamma_exp.push(g.gamma_exp);
        }
        out.logits_rec = Tensor::new(vec![bsz, width, nv], logits_rec)?;
        out.logits_exp = Tensor::new(vec![bsz, width, ne], logits_exp)?;
        Ok(out)
    }

    /// Item and explanation scores after the last step of `seq`.
    pub fn last_logits(&self, seq: &InteractionSequence) -> ModelResult<(Vec<f64>, Vec<f64>)> {
        if seq.is_empty() {
            return Err(ModelError::TooShort { got: 0, needed: 1 });
        }
        let mut tape = Tape::new();
        let g = self.graph(&mut tape, seq, true, false, None)?;
        Ok((
            tape.value(g.logits_rec).data().to_vec(),
            tape.value(g.logits_exp).data().to_vec(),
        ))
    }

    pub fn inspect(&self, seq: &InteractionSequence) -> ModelResult<Inspection> {
        if seq.is_empty() {
            return Err(ModelError::TooShort { got: 0, needed: 1 });
        }
        let mut tape = Tape::new();
        let g = self.graph(&mut tape, seq, true, true, None)?;
        let col = |v: Var| tape.value(v).data().to_vec();
        Ok(Inspection {
            gamma_rec: g.gamma_rec,
            gamma_exp: g.gamma_exp,
            mu_rec: g.weights.map(|w| col(w.mu_rec)),
            mu_exp: g.weights.map(|w| col(w.mu_exp)),
        })
    }
}

impl Model {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: ExperimentConfig, n_items: usize, n_expls: usize) -> ModelResult<Model> {
        config.validate().map_err(ModelError::Config)?;
        if n_items == 0 || n_expls == 0 {
            return Err(ModelError::Config("vocabularies must be non-empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let layout = Layout::register(&mut store, &mut rng, n_items, n_expls, config.d, config.resolved().heads);
        Ok(Model { config, store, layout })
    }

    pub fn net(&self) -> Net<'_> {
        self.net_with(&self.store)
    }

    /// The same graph over other parameter values (e.g. perturbed copies).
    pub fn net_with<'a>(&'a self, store: &'a ParamStore) -> Net<'a> {
        Net {
            config: &self.config,
            layout: &self.layout,
            store,
        }
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    pub fn forward(&self, batch: &Batch) -> ModelResult<BatchForward> {
        self.net().forward(batch)
    }

    pub fn batch_gradients(&self, batch: &Batch, seed: u64) -> ModelResult<(LossParts, Gradients)> {
        self.net().batch_gradients(batch, seed)
    }

    pub fn last_logits(&self, seq: &InteractionSequence) -> ModelResult<(Vec<f64>, Vec<f64>)> {
        self.net().last_logits(seq)
    }

    pub fn inspect(&self, seq: &InteractionSequence) -> ModelResult<Inspection> {
        self.net().inspect(seq)
    }

    /// Top-`k` indices for the step after `prefix`, ties to the smaller index.
    pub fn predict_topk(&self, prefix: &InteractionSequence, k: usize, task: Task) -> ModelResult<Vec<usize>> {
        let (rec, exp) = self.last_logits(prefix)?;
        let scores = match task {
            Task::Rec => rec,
            Task::Exp => exp,
        };
        Ok(top_k(&scores, k)?)
    }
}
