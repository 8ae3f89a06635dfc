use std::time::Instant;

use serde::Serialize;

use super::eval::{evaluate, EvalTarget};
use super::{ExperimentConfig, LossParts, Model, ModelError, ModelResult};
use crate::autodiff::{Gradients, ParamStore};
use crate::dataset::{make_batches, Corpus, InteractionSequence};
use crate::metrics::EvalResult;

/// Adam with bias correction and optional coupled L2 decay.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: &ExperimentConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Adam {
            lr: config.learning_rate,
            beta1: config.adam_beta1,
            beta2: config.adam_beta2,
            eps: config.adam_eps,
            weight_decay: config.weight_decay,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update; parameters without a gradient entry see a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = store.ids().collect();
        for (slot, id) in ids.into_iter().enumerate() {
            let g = grads.get(id);
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                let mut gi = g.map_or(0.0, |g| g[i]);
                if self.weight_decay > 0.0 {
                    gi += self.weight_decay * p[i];
                }
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    /// Means over the epoch's batches.
    pub loss: f64,
    pub loss_rec: f64,
    pub loss_exp: f64,
    pub loss_mi: f64,
    pub valid_rec: Option<EvalResult>,
    pub valid_exp: Option<EvalResult>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct TrainReport {
    pub config_hash: String,
    pub epochs: Vec<EpochReport>,
    /// Epoch (1-based) whose parameters were kept.
    pub best_epoch: Option<usize>,
    pub best_valid_ndcg: Option<f64>,
    pub seconds: f64,
}

impl TrainReport {
    pub const CSV_HEADER: &'static str =
        "epoch,loss,loss_rec,loss_exp,loss_mi,valid_rec_recall,valid_rec_ndcg,valid_exp_recall,valid_exp_ndcg,seconds,config_hash";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        let metric = |r: &Option<EvalResult>| r.map_or((f64::NAN, f64::NAN), |r| (r.recall, r.ndcg));
        for e in &self.epochs {
            let (rr, rn) = metric(&e.valid_rec);
            let (er, en) = metric(&e.valid_exp);
            out.push_str(&format!(
                "{},{:.10},{:.10},{:.10},{:.10},{:.6},{:.6},{:.6},{:.6},{:.3},{}\n",
                e.epoch, e.loss, e.loss_rec, e.loss_exp, e.loss_mi, rr, rn, er, en, e.seconds, self.config_hash
            ));
        }
        out
    }
}

pub struct TrainOptions<'a> {
    /// Score the validation targets after every epoch and keep the best epoch.
    pub validate: bool,
    pub on_epoch: Option<&'a (dyn Fn(&EpochReport) + Sync)>,
}

impl Default for TrainOptions<'_> {
    fn default() -> Self {
        TrainOptions {
            validate: true,
            on_epoch: None,
        }
    }
}

/// Worker pool sized by `TMEPSR_THREADS` (all cores when unset or invalid).
pub fn thread_pool() -> rayon::ThreadPool {
    let threads = std::env::var("TMEPSR_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool")
}

fn mix(seed: u64, epoch: usize, batch: usize) -> u64 {
    let mut x = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (batch as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x ^= x >> 31;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^ (x >> 29)
}

pub fn train(corpus: &Corpus, config: &ExperimentConfig) -> ModelResult<(Model, TrainReport)> {
    train_with(corpus, config, &TrainOptions::default())
}

/// Adam over shuffled batches of the training prefixes.
///
/// Deterministic for a fixed seed. Keeps the parameters of the epoch with the
/// best validation NDCG@K on the recommendation task.
pub fn train_with(corpus: &Corpus, config: &ExperimentConfig, opts: &TrainOptions) -> ModelResult<(Model, TrainReport)> {
    let mut model = Model::new(config.clone(), corpus.items.len(), corpus.expls.len())?;
    let splits = corpus.splits();
    let train_seqs: Vec<InteractionSequence> = splits
        .iter()
        .map(|s| s.train.clone())
        .filter(|s| s.len() >= 2)
        .collect();
    if train_seqs.is_empty() {
        return Err(ModelError::NoTargets);
    }
    let pool = thread_pool();
    let mut adam = Adam::new(config, &model.store);
    let mut report = TrainReport {
        config_hash: config.hash(),
        ..Default::default()
    };
    let mut best: Option<(f64, ParamStore)> = None;
    let started = Instant::now();
    for epoch in 1..=config.epochs {
        let t0 = Instant::now();
        let batches = make_batches(&train_seqs, config.batch_size, config.max_len, mix(config.seed, epoch, usize::MAX));
        let mut sum = LossParts::default();
        for (bi, batch) in batches.iter().enumerate() {
            let outcome = pool.install(|| model.batch_gradients(batch, mix(config.seed, epoch, bi)));
            let (parts, grads) = match outcome {
                Ok(v) => v,
                Err(e) if e.is_numeric() => return Err(ModelError::Divergence { epoch, batch: bi }),
                Err(e) => return Err(e),
            };
            if !parts.total.is_finite() {
                return Err(ModelError::Divergence { epoch, batch: bi });
            }
            sum.rec += parts.rec;
            sum.exp += parts.exp;
            sum.mi += parts.mi;
            adam.step(&mut model.store, &grads);
            if !model.store.all_finite() {
                return Err(ModelError::Divergence { epoch, batch: bi });
            }
        }
        let nb = batches.len() as f64;
        let (loss_rec, loss_exp, loss_mi) = (sum.rec / nb, sum.exp / nb, sum.mi / nb);
        let (valid_rec, valid_exp) = if opts.validate {
            let (r, e) = pool.install(|| evaluate(&model, &splits, EvalTarget::Valid, config.eval_k))?;
            if best.as_ref().is_none_or(|(score, _)| r.ndcg > *score) {
                best = Some((r.ndcg, model.store.clone()));
                report.best_epoch = Some(epoch);
                report.best_valid_ndcg = Some(r.ndcg);
            }
            (Some(r), Some(e))
        } else {
            (None, None)
        };
        let rep = EpochReport {
            epoch,
            loss: loss_rec + loss_exp + loss_mi,
            loss_rec,
            loss_exp,
            loss_mi,
            valid_rec,
            valid_exp,
            seconds: t0.elapsed().as_secs_f64(),
        };
        if let Some(cb) = opts.on_epoch {
            cb(&rep);
        }
        report.epochs.push(rep);
    }
    if let Some((_, store)) = best {
        model.store = store;
    }
    report.seconds = started.elapsed().as_secs_f64();
    Ok((model, report))
}
