//! Wall-clock timings of incremental inference, full-sequence encoding and one
//! training step.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{content_hash, AnalysisError};
use crate::autodiff::{gemm_acc, Tensor};
use crate::dataset::{Batch, InteractionSequence};
use crate::lru::{head_forward_scan, head_forward_sequential, init_head, Branch, HeadParams, MultiheadState, ScanMode};
use crate::model::{thread_pool, ExperimentConfig, Model};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainBench {
    pub seq_len: usize,
    pub vocab: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSpec {
    pub d: usize,
    pub heads: Vec<usize>,
    /// History lengths at which a single incremental step is timed.
    pub lengths: Vec<usize>,
    pub batch_size: usize,
    pub warmup: usize,
    pub reps: usize,
    pub seed: u64,
    /// Also time a GRU cell and a single-head recurrence as reference encoders.
    pub baselines: bool,
    /// Time whole-sequence encoding in scan and sequential modes.
    pub full_forward: bool,
    pub training: Option<TrainBench>,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            d: 240,
            heads: vec![2, 4, 6, 8],
            lengths: vec![100, 1000, 5000],
            batch_size: 256,
            warmup: 3,
            reps: 11,
            seed: 0,
            baselines: true,
            full_forward: true,
            training: Some(TrainBench {
                seq_len: 50,
                vocab: 1000,
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchKind {
    Incremental,
    FullForward,
    TrainBatch,
}

impl BenchKind {
    fn name(self) -> &'static str {
        match self {
            BenchKind::Incremental => "incremental",
            BenchKind::FullForward => "full_forward",
            BenchKind::TrainBatch => "train_batch",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub kind: BenchKind,
    pub encoder: String,
    pub heads: usize,
    pub mode: String,
    pub n: usize,
    pub batch: usize,
    pub median_ms: f64,
    pub min_ms: f64,
}

impl BenchRow {
    pub fn to_csv(rows: &[BenchRow], spec: &BenchSpec) -> String {
        let hash = content_hash(spec);
        let mut out = String::from("kind,encoder,H,mode,n,batch,median_ms,min_ms,seed,config_hash\n");
        for r in rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{:.6},{:.6},{},{}\n",
                r.kind.name(),
                r.encoder,
                r.heads,
                r.mode,
                r.n,
                r.batch,
                r.median_ms,
                r.min_ms,
                spec.seed,
                hash
            ));
        }
        out
    }
}

/// Median and minimum wall-clock milliseconds of `reps` calls after `warmup`
/// untimed ones.
fn time_ms(warmup: usize, reps: usize, mut f: impl FnMut()) -> (f64, f64) {
    for _ in 0..warmup {
        f();
    }
    let mut samples: Vec<f64> = (0..reps.max(1))
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    samples.sort_by(f64::total_cmp);
    (samples[samples.len() / 2], samples[0])
}

fn random_rows(rng: &mut ChaCha8Rng, count: usize, len: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| (0..len).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

/// Reference encoder: GRU cell over `d`-dimensional inputs with hidden size `d`.
#[derive(Clone)]
struct GruStepper {
    d: usize,
    batch: usize,
    w: Vec<f64>,
    u: Vec<f64>,
    h: Vec<f64>,
    gx: Vec<f64>,
    gh: Vec<f64>,
}

impl GruStepper {
    fn new(rng: &mut ChaCha8Rng, d: usize, batch: usize) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        let mut mat = || (0..d * 3 * d).map(|_| rng.random_range(-bound..bound)).collect::<Vec<f64>>();
        GruStepper {
            d,
            batch,
            w: mat(),
            u: mat(),
            h: vec![0.0; batch * d],
            gx: vec![0.0; batch * 3 * d],
            gh: vec![0.0; batch * 3 * d],
        }
    }

    fn step(&mut self, x: &[f64]) {
        let (d, b) = (self.d, self.batch);
        self.gx.iter_mut().for_each(|v| *v = 0.0);
        self.gh.iter_mut().for_each(|v| *v = 0.0);
        gemm_acc(x, &self.w, b, d, 3 * d, &mut self.gx);
        gemm_acc(&self.h, &self.u, b, d, 3 * d, &mut self.gh);
        let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
        for r in 0..b {
            for j in 0..d {
                let g = |k: usize| r * 3 * d + k * d + j;
                let z = sigmoid(self.gx[g(0)] + self.gh[g(0)]);
                let rr = sigmoid(self.gx[g(1)] + self.gh[g(1)]);
                let cand = (self.gx[g(2)] + rr * self.gh[g(2)]).tanh();
                let h = &mut self.h[r * d + j];
                *h = z * *h + (1.0 - z) * cand;
            }
        }
    }
}

fn heads_for(rng: &mut ChaCha8Rng, d: usize, h: usize) -> Vec<HeadParams> {
    (0..h).map(|i| init_head(rng, d / h, Branch::Rec, i)).collect()
}

/// Like [`time_ms`] for several closures, sampled round-robin so slow
/// stretches of machine time hit every closure alike.
fn time_interleaved(warmup: usize, reps: usize, fs: &mut [Box<dyn FnMut() + '_>]) -> Vec<(f64, f64)> {
    for _ in 0..warmup {
        fs.iter_mut().for_each(|f| f());
    }
    let mut samples = vec![Vec::with_capacity(reps.max(1)); fs.len()];
    for _ in 0..reps.max(1) {
        for (f, s) in fs.iter_mut().zip(&mut samples) {
            let t = Instant::now();
            f();
            s.push(t.elapsed().as_secs_f64() * 1e3);
        }
    }
    samples
        .into_iter()
        .map(|mut s| {
            s.sort_by(f64::total_cmp);
            (s[s.len() / 2], s[0])
        })
        .collect()
}

/// Per-step latency of one incremental update after `n − 1` earlier inputs.
/// Each length keeps its own state built from the same parameters.
fn incremental(spec: &BenchSpec, rng: &mut ChaCha8Rng, encoder: &str, heads: usize, rows: &mut Vec<BenchRow>) {
    let (d, b) = (spec.d, spec.batch_size);
    let inputs = random_rows(rng, 16, b * d);
    let mut lengths = spec.lengths.clone();
    lengths.sort_unstable();
    let inputs = &inputs;
    let timings = if encoder == "gru" {
        let gru = GruStepper::new(rng, d, b);
        let mut steppers: Vec<GruStepper> = lengths
            .iter()
            .map(|&n| {
                let mut g = gru.clone();
                (0..n - 1).for_each(|i| g.step(&inputs[i % inputs.len()]));
                g
            })
            .collect();
        let mut fs: Vec<Box<dyn FnMut() + '_>> = steppers
            .iter_mut()
            .map(|g| {
                let mut k = 0;
                Box::new(move || {
                    g.step(&inputs[k % inputs.len()]);
                    k += 1;
                }) as Box<dyn FnMut()>
            })
            .collect();
        time_interleaved(spec.warmup, spec.reps, &mut fs)
    } else {
        let params = heads_for(rng, d, heads);
        let mut states: Vec<MultiheadState> = lengths
            .iter()
            .map(|&n| {
                let mut state = MultiheadState::new(&params, b, true);
                while state.steps() + 1 < n {
                    state.advance(&inputs[state.steps() % inputs.len()]);
                }
                state
            })
            .collect();
        let mut fs: Vec<Box<dyn FnMut() + '_>> = states
            .iter_mut()
            .map(|state| {
                let mut k = 0;
                Box::new(move || {
                    std::hint::black_box(state.step(&inputs[k % inputs.len()]));
                    k += 1;
                }) as Box<dyn FnMut()>
            })
            .collect();
        time_interleaved(spec.warmup, spec.reps, &mut fs)
    };
    for (&n, (median_ms, min_ms)) in lengths.iter().zip(timings) {
        rows.push(BenchRow {
            kind: BenchKind::Incremental,
            encoder: encoder.to_string(),
            heads,
            mode: "-".into(),
            n,
            batch: b,
            median_ms,
            min_ms,
        });
    }
}

/// Runs every timing in `spec`, one at a time.
pub fn efficiency_bench(spec: &BenchSpec) -> Result<Vec<BenchRow>, AnalysisError> {
    if spec.d == 0 || spec.batch_size == 0 || spec.lengths.is_empty() || spec.lengths.contains(&0) {
        return Err(AnalysisError::Precondition("bench needs d, batch size and lengths >= 1".into()));
    }
    if let Some(&h) = spec.heads.iter().find(|&&h| h == 0 || !spec.d.is_multiple_of(h)) {
        return Err(AnalysisError::Precondition(format!("H = {h} does not divide d = {}", spec.d)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut rows = Vec::new();
    for &h in &spec.heads {
        incremental(spec, &mut rng, "multihead_lru", h, &mut rows);
    }
    if spec.baselines {
        incremental(spec, &mut rng, "single_head_lru", 1, &mut rows);
        incremental(spec, &mut rng, "gru", 1, &mut rows);
    }

    if spec.full_forward {
        for &h in &spec.heads {
            let m = spec.d / h;
            let params = heads_for(&mut rng, spec.d, h);
            for &n in &spec.lengths {
                let xs: Vec<Tensor> = (0..h)
                    .map(|_| Tensor::matrix(n, m, random_rows(&mut rng, 1, n * m).remove(0)).expect("shape"))
                    .collect();
                for (mode, f) in [
                    ("scan", head_forward_scan as fn(&HeadParams, &Tensor, bool) -> Tensor),
                    ("sequential", head_forward_sequential),
                ] {
                    let (median_ms, min_ms) = time_ms(spec.warmup, spec.reps, || {
                        for (p, x) in params.iter().zip(&xs) {
                            std::hint::black_box(f(p, x, true));
                        }
                    });
                    rows.push(BenchRow {
                        kind: BenchKind::FullForward,
                        encoder: "multihead_lru".into(),
                        heads: h,
                        mode: mode.into(),
                        n,
                        batch: 1,
                        median_ms,
                        min_ms,
                    });
                }
            }
        }
    }

    if let Some(tb) = &spec.training {
        let pool = thread_pool();
        let seqs: Vec<InteractionSequence> = (0..spec.batch_size)
            .map(|u| InteractionSequence {
                user_index: u,
                items: (0..tb.seq_len).map(|_| rng.random_range(0..tb.vocab)).collect(),
                expls: (0..tb.seq_len).map(|_| rng.random_range(0..tb.vocab)).collect(),
                times: (0..tb.seq_len as i64).map(|i| i * 3600).collect(),
            })
            .collect();
        let batch = Batch::from_sequences(&seqs, tb.seq_len);
        for &h in &spec.heads {
            for mode in [ScanMode::Scan, ScanMode::Sequential] {
                let config = ExperimentConfig {
                    d: spec.d,
                    heads: h,
                    lru_mode: mode,
                    seed: spec.seed,
                    ..Default::default()
                };
                let model = Model::new(config, tb.vocab, tb.vocab)?;
                let mut failure = None;
                let (median_ms, min_ms) = time_ms(spec.warmup, spec.reps, || {
                    if let Err(e) = pool.install(|| model.batch_gradients(&batch, spec.seed)) {
                        failure = Some(e);
                    }
                });
                if let Some(e) = failure {
                    return Err(e.into());
                }
                rows.push(BenchRow {
                    kind: BenchKind::TrainBatch,
                    encoder: "multihead_lru".into(),
                    heads: h,
                    mode: mode.to_string(),
                    n: tb.seq_len,
                    batch: spec.batch_size,
                    median_ms,
                    min_ms,
                });
            }
        }
    }
    Ok(rows)
}
