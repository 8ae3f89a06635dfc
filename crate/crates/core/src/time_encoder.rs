//! Time-aware item and explanation embeddings.
//!
//! Log-scaled adjacent and absolute intervals are encoded by two GRUs shared by
//! every user and both branches, then fused per branch with a sequence-level gate
//! and added to the base embeddings.

use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{BackwardRule, ParamId, ParamStore, Tape, Tensor, TensorError, TensorResult, Var};
use crate::dataset::InteractionSequence;
use crate::mlp::{uniform, Mlp};

#[derive(Debug, Error)]
pub enum TimeError {
    #[error("timestamps decrease at position {index}")]
    Decreasing { index: usize },
    #[error("empty sequence")]
    Empty,
    #[error("alpha {0} outside [0, 1]")]
    Alpha(f64),
    #[error("unknown time strategy `{0}` (expected gated, abs_only, adj_only, equal or disabled)")]
    Strategy(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// How the adjacent/absolute features are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeStrategy {
    #[default]
    Gated,
    AbsOnly,
    AdjOnly,
    Equal,
    Disabled,
}

impl TimeStrategy {
    pub const ALL: [TimeStrategy; 5] = [
        TimeStrategy::Gated,
        TimeStrategy::AbsOnly,
        TimeStrategy::AdjOnly,
        TimeStrategy::Equal,
        TimeStrategy::Disabled,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TimeStrategy::Gated => "gated",
            TimeStrategy::AbsOnly => "abs_only",
            TimeStrategy::AdjOnly => "adj_only",
            TimeStrategy::Equal => "equal",
            TimeStrategy::Disabled => "disabled",
        }
    }

    /// The hard-set gate, if this strategy has one.
    pub fn fixed_gamma(self) -> Option<f64> {
        match self {
            TimeStrategy::AdjOnly => Some(1.0),
            TimeStrategy::AbsOnly => Some(0.0),
            TimeStrategy::Equal => Some(0.5),
            TimeStrategy::Gated | TimeStrategy::Disabled => None,
        }
    }
}

impl FromStr for TimeStrategy {
    type Err = TimeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TimeStrategy::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| TimeError::Strategy(s.to_string()))
    }
}

impl std::fmt::Display for TimeStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntervalVectors {
    pub adj: Vec<f64>,
    pub abs: Vec<f64>,
}

/// `adj[i] = ln(1 + t_i − t_{i−1})`, `abs[i] = ln(1 + t_i − t_0)`, both 0 at `i = 0`.
pub fn intervals(times: &[i64]) -> Result<IntervalVectors, TimeError> {
    let Some(&first) = times.first() else {
        return Err(TimeError::Empty);
    };
    let mut adj = Vec::with_capacity(times.len());
    let mut abs = Vec::with_capacity(times.len());
    for (i, &t) in times.iter().enumerate() {
        if i == 0 {
            adj.push(0.0);
            abs.push(0.0);
            continue;
        }
        let gap = t - times[i - 1];
        if gap < 0 {
            return Err(TimeError::Decreasing { index: i });
        }
        adj.push((gap as f64).ln_1p());
        abs.push(((t - first) as f64).ln_1p());
    }
    Ok(IntervalVectors { adj, abs })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EmbeddingTables {
    pub items: ParamId,
    pub expls: ParamId,
}

impl EmbeddingTables {
    /// Both tables drawn from `N(0, 0.01²)`.
    pub fn register(store: &mut ParamStore, rng: &mut impl Rng, n_items: usize, n_expls: usize, d: usize) -> Self {
        let normal = Normal::new(0.0, 0.01).expect("valid std");
        let mut table = |rows: usize| {
            Tensor::matrix(rows, d, (0..rows * d).map(|_| normal.sample(rng)).collect()).expect("table shape")
        };
        let items = table(n_items);
        let expls = table(n_expls);
        EmbeddingTables {
            items: store.add("emb.items", items),
            expls: store.add("emb.expls", expls),
        }
    }
}

/// `E_rec = α·E_V + (1−α)·E_E` and `E_exp = α·E_E + (1−α)·E_V`.
pub fn base_embeddings(
    tape: &mut Tape,
    store: &ParamStore,
    tables: &EmbeddingTables,
    items: &[usize],
    expls: &[usize],
    alpha: f64,
) -> Result<(Var, Var), TimeError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(TimeError::Alpha(alpha));
    }
    let mv = tape.param(store, tables.items)?;
    let me = tape.param(store, tables.expls)?;
    let ev = tape.gather_rows(mv, items)?;
    let ee = tape.gather_rows(me, expls)?;
    let mix = |tape: &mut Tape, main: Var, other: Var| -> TensorResult<Var> {
        let a = tape.scale(main, alpha)?;
        let b = tape.scale(other, 1.0 - alpha)?;
        tape.add(a, b)
    };
    let e_rec = mix(tape, ev, ee)?;
    let e_exp = mix(tape, ee, ev)?;
    Ok((e_rec, e_exp))
}

/// GRU with scalar input and hidden width `d`, in row-vector convention
/// (`h·U`). Gates: update `z`, reset `r`, candidate `h̃`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GruParams {
    pub w_z: ParamId,
    pub w_r: ParamId,
    pub w_h: ParamId,
    pub u_z: ParamId,
    pub u_r: ParamId,
    pub u_h: ParamId,
    pub b_z: ParamId,
    pub b_r: ParamId,
    pub b_h: ParamId,
}

impl GruParams {
    /// Weights uniform in `±1/√d`, biases zero.
    pub fn register(store: &mut ParamStore, rng: &mut impl Rng, name: &str, d: usize) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        let mut w = |store: &mut ParamStore, key: &str, rows: usize| {
            store.add(format!("{name}.{key}"), uniform(rng, rows, d, bound))
        };
        let w_z = w(store, "w_z", 1);
        let w_r = w(store, "w_r", 1);
        let w_h = w(store, "w_h", 1);
        let u_z = w(store, "u_z", d);
        let u_r = w(store, "u_r", d);
        let u_h = w(store, "u_h", d);
        GruParams {
            w_z,
            w_r,
            w_h,
            u_z,
            u_r,
            u_h,
            b_z: store.add(format!("{name}.b_z"), Tensor::zeros(&[1, d])),
            b_r: store.add(format!("{name}.b_r"), Tensor::zeros(&[1, d])),
            b_h: store.add(format!("{name}.b_h"), Tensor::zeros(&[1, d])),
        }
    }

    pub fn ids(&self) -> [ParamId; 9] {
        [
            self.w_z, self.w_r, self.w_h, self.u_z, self.u_r, self.u_h, self.b_z, self.b_r, self.b_h,
        ]
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct GruTrace {
    h: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    cand: Vec<f64>,
}

// w: [w_z, w_r, w_h, u_z, u_r, u_h, b_z, b_r, b_h]
fn gru_run(w: &[&Tensor], x: &[f64]) -> GruTrace {
    let d = w[0].cols();
    let n = x.len();
    let mut tr = GruTrace {
        h: vec![0.0; n * d],
        z: vec![0.0; n * d],
        r: vec![0.0; n * d],
        cand: vec![0.0; n * d],
    };
    let (uz, ur, uh) = (w[3].data(), w[4].data(), w[5].data());
    let mut prev = vec![0.0; d];
    let mut az = vec![0.0; d];
    let mut ar = vec![0.0; d];
    let mut ah = vec![0.0; d];
    let mut rh = vec![0.0; d];
    for t in 0..n {
        for j in 0..d {
            az[j] = x[t] * w[0].data()[j] + w[6].data()[j];
            ar[j] = x[t] * w[1].data()[j] + w[7].data()[j];
            ah[j] = x[t] * w[2].data()[j] + w[8].data()[j];
        }
        for (k, &hk) in prev.iter().enumerate() {
            if hk == 0.0 {
                continue;
            }
            let (rz, rr) = (&uz[k * d..(k + 1) * d], &ur[k * d..(k + 1) * d]);
            for j in 0..d {
                az[j] += hk * rz[j];
                ar[j] += hk * rr[j];
            }
        }
        let row = t * d..(t + 1) * d;
        for j in 0..d {
            tr.z[row.start + j] = sigmoid(az[j]);
            tr.r[row.start + j] = sigmoid(ar[j]);
            rh[j] = tr.r[row.start + j] * prev[j];
        }
        for (k, &v) in rh.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            let rk = &uh[k * d..(k + 1) * d];
            for j in 0..d {
                ah[j] += v * rk[j];
            }
        }
        for j in 0..d {
            let c = ah[j].tanh();
            let z = tr.z[row.start + j];
            tr.cand[row.start + j] = c;
            prev[j] = z * prev[j] + (1.0 - z) * c;
        }
        tr.h[row].copy_from_slice(&prev);
    }
    tr
}

struct GruRule {
    x: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    cand: Vec<f64>,
}

impl BackwardRule for GruRule {
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let d = inputs[0].cols();
        let n = self.x.len();
        let (uz, ur, uh) = (inputs[3].data(), inputs[4].data(), inputs[5].data());
        let mut g: Vec<Vec<f64>> = inputs.iter().map(|t| vec![0.0; t.len()]).collect();
        let h = output.data();
        let zero = vec![0.0; d];
        let mut carry = vec![0.0; d];
        let mut dh = vec![0.0; d];
        let mut daz = vec![0.0; d];
        let mut dar = vec![0.0; d];
        let mut dah = vec![0.0; d];
        let mut rh = vec![0.0; d];
        for t in (0..n).rev() {
            let prev = if t == 0 { &zero[..] } else { &h[(t - 1) * d..t * d] };
            let base = t * d;
            for j in 0..d {
                dh[j] = grad_out[base + j] + carry[j];
            }
            for j in 0..d {
                let (z, r, c) = (self.z[base + j], self.r[base + j], self.cand[base + j]);
                daz[j] = dh[j] * (prev[j] - c) * z * (1.0 - z);
                dah[j] = dh[j] * (1.0 - z) * (1.0 - c * c);
                carry[j] = dh[j] * z;
                rh[j] = r * prev[j];
            }
            // d(r⊙h_prev) = da_h · U_hᵀ
            for k in 0..d {
                let row = &uh[k * d..(k + 1) * d];
                let drh: f64 = row.iter().zip(&dah).map(|(u, a)| u * a).sum();
                let r = self.r[base + k];
                dar[k] = drh * prev[k] * r * (1.0 - r);
                carry[k] += drh * r;
            }
            for k in 0..d {
                let rz = &uz[k * d..(k + 1) * d];
                let rr = &ur[k * d..(k + 1) * d];
                let s: f64 = rz.iter().zip(&daz).map(|(u, a)| u * a).sum::<f64>()
                    + rr.iter().zip(&dar).map(|(u, a)| u * a).sum::<f64>();
                carry[k] += s;
            }
            let x = self.x[t];
            for j in 0..d {
                g[0][j] += x * daz[j];
                g[1][j] += x * dar[j];
                g[2][j] += x * dah[j];
                g[6][j] += daz[j];
                g[7][j] += dar[j];
                g[8][j] += dah[j];
            }
            for k in 0..d {
                let (p, q) = (prev[k], rh[k]);
                if p != 0.0 {
                    for j in 0..d {
                        g[3][k * d + j] += p * daz[j];
                        g[4][k * d + j] += p * dar[j];
                    }
                }
                if q != 0.0 {
                    for j in 0..d {
                        g[5][k * d + j] += q * dah[j];
                    }
                }
            }
        }
        g.into_iter().map(Some).collect()
    }
}

/// Runs the GRU from a zero state over the scalar sequence `x`; returns `n × d`.
pub fn gru_encode(tape: &mut Tape, store: &ParamStore, gru: &GruParams, x: &[f64]) -> TensorResult<Var> {
    if x.is_empty() {
        return Err(TensorError::EmptyInput { op: "gru_encode" });
    }
    let vars = gru
        .ids()
        .into_iter()
        .map(|id| tape.param(store, id))
        .collect::<TensorResult<Vec<Var>>>()?;
    let values: Vec<&Tensor> = vars.iter().map(|&v| tape.value(v)).collect();
    let d = values[0].cols();
    for (i, v) in values.iter().enumerate() {
        let rows = if (3..6).contains(&i) { d } else { 1 };
        if v.shape() != [rows, d] {
            return Err(TensorError::ShapeMismatch {
                op: "gru_encode",
                left: vec![rows, d],
                right: v.shape().to_vec(),
            });
        }
    }
    let trace = gru_run(&values, x);
    let out = Tensor::matrix(x.len(), d, trace.h)?;
    let rule = GruRule {
        x: x.to_vec(),
        z: trace.z,
        r: trace.r,
        cand: trace.cand,
    };
    tape.custom("gru", &vars, out, Box::new(rule))
}

/// `σ(MLP(mean over rows of base))`, a `1 × 1` value.
pub fn gate(tape: &mut Tape, store: &ParamStore, mlp: &Mlp, base: Var) -> TensorResult<Var> {
    let pooled = tape.mean_rows(base)?;
    let logit = mlp.forward(tape, store, pooled)?;
    tape.sigmoid(logit)
}

/// `γ·H_adj + (1−γ)·H_abs` for a `1 × 1` gate `γ`.
pub fn fuse(tape: &mut Tape, h_adj: Var, h_abs: Var, gamma: Var) -> TensorResult<Var> {
    let a = tape.mul(gamma, h_adj)?;
    let rest = tape.one_minus(gamma)?;
    let b = tape.mul(rest, h_abs)?;
    tape.add(a, b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimeEncoder {
    pub gru_adj: GruParams,
    pub gru_abs: GruParams,
    pub gate_rec: Mlp,
    pub gate_exp: Mlp,
}

impl TimeEncoder {
    pub fn register(store: &mut ParamStore, rng: &mut impl Rng, d: usize) -> Self {
        TimeEncoder {
            gru_adj: GruParams::register(store, rng, "gru_adj", d),
            gru_abs: GruParams::register(store, rng, "gru_abs", d),
            gate_rec: Mlp::register(store, rng, "gate_rec", d, d),
            gate_exp: Mlp::register(store, rng, "gate_exp", d, d),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TimeAwareEmbeddings {
    pub e_rec: Var,
    pub e_exp: Var,
    pub e_rec_time: Var,
    pub e_exp_time: Var,
    /// Gate values actually used (hard-set for the fixed strategies), `None` when disabled.
    pub gamma_rec: Option<f64>,
    pub gamma_exp: Option<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn time_aware_embed(
    tape: &mut Tape,
    store: &ParamStore,
    tables: &EmbeddingTables,
    encoder: &TimeEncoder,
    seq: &InteractionSequence,
    alpha: f64,
    beta: f64,
    strategy: TimeStrategy,
) -> Result<TimeAwareEmbeddings, TimeError> {
    if seq.is_empty() {
        return Err(TimeError::Empty);
    }
    let (e_rec, e_exp) = base_embeddings(tape, store, tables, &seq.items, &seq.expls, alpha)?;
    if strategy == TimeStrategy::Disabled {
        return Ok(TimeAwareEmbeddings {
            e_rec,
            e_exp,
            e_rec_time: e_rec,
            e_exp_time: e_exp,
            gamma_rec: None,
            gamma_exp: None,
        });
    }
    let iv = intervals(&seq.times)?;
    let h_adj = gru_encode(tape, store, &encoder.gru_adj, &iv.adj)?;
    let h_abs = gru_encode(tape, store, &encoder.gru_abs, &iv.abs)?;
    let (g_rec, g_exp) = match strategy.fixed_gamma() {
        Some(g) => {
            let c = tape.constant(Tensor::scalar(g))?;
            (c, c)
        }
        None => (
            gate(tape, store, &encoder.gate_rec, e_rec)?,
            gate(tape, store, &encoder.gate_exp, e_exp)?,
        ),
    };
    let mut shifted = |base: Var, gamma: Var| -> TensorResult<Var> {
        let fused = fuse(tape, h_adj, h_abs, gamma)?;
        let scaled = tape.scale(fused, beta)?;
        tape.add(base, scaled)
    };
    let e_rec_time = shifted(e_rec, g_rec)?;
    let e_exp_time = shifted(e_exp, g_exp)?;
    Ok(TimeAwareEmbeddings {
        e_rec,
        e_exp,
        e_rec_time,
        e_exp_time,
        gamma_rec: Some(tape.value(g_rec).item()),
        gamma_exp: Some(tape.value(g_exp).item()),
    })
}
