//! Cross-branch InfoNCE alignment with learned per-step weights.
//!
//! `J_rec` scores the next item against the explanation branch's states and
//! `J_exp` scores the next explanation against the recommendation branch's
//! states; `μ` weights decide how much each term contributes.

use std::collections::HashSet;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, TensorError, TensorResult, Var};
use crate::mlp::{uniform, Mlp};

pub const FIXED_WEIGHT: f64 = 0.001;

#[derive(Debug, Error)]
pub enum AlignError {
    #[error("unknown mi mode `{0}` (expected dynamic_dual, fixed, single_shared or disabled)")]
    Mode(String),
    #[error("mi candidates must be `full` or `sampled:K` with K ≥ 1, got `{0}`")]
    Candidates(String),
    #[error("no valid steps to average")]
    Empty,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiMode {
    #[default]
    DynamicDual,
    Fixed,
    SingleShared,
    Disabled,
}

impl MiMode {
    pub const ALL: [MiMode; 4] = [MiMode::DynamicDual, MiMode::Fixed, MiMode::SingleShared, MiMode::Disabled];

    pub fn name(self) -> &'static str {
        match self {
            MiMode::DynamicDual => "dynamic_dual",
            MiMode::Fixed => "fixed",
            MiMode::SingleShared => "single_shared",
            MiMode::Disabled => "disabled",
        }
    }
}

impl FromStr for MiMode {
    type Err = AlignError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MiMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| AlignError::Mode(s.to_string()))
    }
}

impl std::fmt::Display for MiMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Softmax denominator for the InfoNCE terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MiCandidates {
    #[default]
    Full,
    /// `K` uniform negatives plus the sequence's positives.
    Sampled(usize),
}

impl FromStr for MiCandidates {
    type Err = AlignError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "full" {
            return Ok(MiCandidates::Full);
        }
        s.strip_prefix("sampled:")
            .and_then(|k| k.parse::<usize>().ok())
            .filter(|&k| k >= 1)
            .map(MiCandidates::Sampled)
            .ok_or_else(|| AlignError::Candidates(s.to_string()))
    }
}

impl std::fmt::Display for MiCandidates {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MiCandidates::Full => f.write_str("full"),
            MiCandidates::Sampled(k) => write!(f, "sampled:{k}"),
        }
    }
}

impl Serialize for MiCandidates {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for MiCandidates {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MiParams {
    pub lambda_rec: ParamId,
    pub lambda_exp: ParamId,
    pub mlp_rec: Mlp,
    pub mlp_exp: Mlp,
    /// Weighting network over `[Z_rec, Z_exp]`, used only by `single_shared`.
    pub mlp_shared: Mlp,
}

impl MiParams {
    /// `Λ` uniform in `±1/√d`.
    pub fn register(store: &mut ParamStore, rng: &mut impl Rng, d: usize) -> Self {
        let bound = 1.0 / (d as f64).sqrt();
        let lambda_rec = store.add("mi.lambda_rec", uniform(rng, d, d, bound));
        let lambda_exp = store.add("mi.lambda_exp", uniform(rng, d, d, bound));
        MiParams {
            lambda_rec,
            lambda_exp,
            mlp_rec: Mlp::register(store, rng, "mi.mlp_rec", d, d),
            mlp_exp: Mlp::register(store, rng, "mi.mlp_exp", d, d),
            mlp_shared: Mlp::register(store, rng, "mi.mlp_shared", 2 * d, d),
        }
    }
}

/// Per-step weights, each `n × 1`. Both point at one node in `single_shared` mode.
#[derive(Clone, Copy, Debug)]
pub struct MiWeights {
    pub mu_rec: Var,
    pub mu_exp: Var,
}

/// `μ_rec = σ(MLP_rec(Z_rec))`, `μ_exp = σ(MLP_exp(Z_exp))`, row by row.
pub fn mi_weights(tape: &mut Tape, store: &ParamStore, params: &MiParams, z_rec: Var, z_exp: Var) -> TensorResult<MiWeights> {
    let a = params.mlp_rec.forward(tape, store, z_rec)?;
    let b = params.mlp_exp.forward(tape, store, z_exp)?;
    Ok(MiWeights {
        mu_rec: tape.sigmoid(a)?,
        mu_exp: tape.sigmoid(b)?,
    })
}

/// One weight per step from both branches' states.
pub fn shared_weights(tape: &mut Tape, store: &ParamStore, params: &MiParams, z_rec: Var, z_exp: Var) -> TensorResult<MiWeights> {
    let both = tape.concat_cols(&[z_rec, z_exp])?;
    let a = params.mlp_shared.forward(tape, store, both)?;
    let mu = tape.sigmoid(a)?;
    Ok(MiWeights { mu_rec: mu, mu_exp: mu })
}

/// Weights for `mode`; `None` for the modes without learned weights.
pub fn weights_for_mode(
    tape: &mut Tape,
    store: &ParamStore,
    params: &MiParams,
    mode: MiMode,
    z_rec: Var,
    z_exp: Var,
) -> TensorResult<Option<MiWeights>> {
    match mode {
        MiMode::DynamicDual => mi_weights(tape, store, params, z_rec, z_exp).map(Some),
        MiMode::SingleShared => shared_weights(tape, store, params, z_rec, z_exp).map(Some),
        MiMode::Fixed | MiMode::Disabled => Ok(None),
    }
}

/// Mean over the valid steps of `i ↦ −log softmax_c(table_c · Λ · Z_i)[positive_i]`.
pub fn branch_info_nce(
    tape: &mut Tape,
    z_other: Var,
    table: Var,
    lambda: Var,
    positives: &[usize],
    mask: &[bool],
) -> TensorResult<Var> {
    let projected = tape.matmul_t(z_other, lambda)?;
    let logits = tape.matmul_t(projected, table)?;
    tape.softmax_cross_entropy(logits, positives, mask)
}

/// Candidate rows for a sampled softmax: every distinct positive (in first-seen
/// order) followed by up to `k` distinct uniform negatives. Returns the rows and
/// the positives re-indexed into them.
pub fn sample_candidates(rng: &mut impl Rng, vocab: usize, positives: &[usize], k: usize) -> (Vec<usize>, Vec<usize>) {
    let mut rows: Vec<usize> = Vec::new();
    let mut seen = HashSet::new();
    for &p in positives {
        if seen.insert(p) {
            rows.push(p);
        }
    }
    let remaining = vocab.saturating_sub(rows.len());
    if k >= remaining {
        rows.extend((0..vocab).filter(|c| !seen.contains(c)));
    } else {
        let mut added = 0;
        while added < k {
            let c = rng.random_range(0..vocab);
            if seen.insert(c) {
                rows.push(c);
                added += 1;
            }
        }
    }
    let slot: std::collections::HashMap<usize, usize> = rows.iter().enumerate().map(|(i, &r)| (r, i)).collect();
    let remapped = positives.iter().map(|p| slot[p]).collect();
    (rows, remapped)
}

/// `InfoNCE` over either the full table or a sampled subset of its rows.
#[allow(clippy::too_many_arguments)]
pub fn branch_info_nce_with(
    tape: &mut Tape,
    rng: &mut impl Rng,
    candidates: MiCandidates,
    z_other: Var,
    table: Var,
    lambda: Var,
    positives: &[usize],
    mask: &[bool],
) -> TensorResult<Var> {
    match candidates {
        MiCandidates::Full => branch_info_nce(tape, z_other, table, lambda, positives, mask),
        MiCandidates::Sampled(k) => {
            let vocab = tape.value(table).rows();
            if let Some(&bad) = positives.iter().zip(mask).filter(|(_, &m)| m).map(|(p, _)| p).find(|&&p| p >= vocab) {
                return Err(TensorError::IndexOutOfRange {
                    op: "branch_info_nce",
                    index: bad,
                    bound: vocab,
                });
            }
            let (rows, remapped) = sample_candidates(rng, vocab, positives, k);
            let sub = tape.gather_rows(table, &rows)?;
            branch_info_nce(tape, z_other, sub, lambda, &remapped, mask)
        }
    }
}

fn masked_mean(tape: &mut Tape, column: Var, mask: &[bool]) -> TensorResult<Var> {
    let valid = mask.iter().filter(|&&m| m).count();
    if valid == 0 {
        return Err(TensorError::AllMasked { op: "j_mi" });
    }
    let w: Vec<f64> = mask.iter().map(|&m| if m { 1.0 / valid as f64 } else { 0.0 }).collect();
    let w = tape.constant(Tensor::matrix(1, mask.len(), w)?)?;
    tape.matmul(w, column)
}

/// The weighted alignment objective for one sequence.
///
/// `dynamic_dual`: `mean_i(μ_rec)·J_rec + mean_i(μ_exp)·J_exp`;
/// `single_shared`: `mean_i(μ)·(J_rec + J_exp)`; `fixed`: `0.001·(J_rec + J_exp)`;
/// `disabled`: 0.
pub fn j_mi(
    tape: &mut Tape,
    mode: MiMode,
    weights: Option<&MiWeights>,
    j_rec: Var,
    j_exp: Var,
    mask: &[bool],
) -> TensorResult<Var> {
    match (mode, weights) {
        (MiMode::Disabled, _) => tape.constant(Tensor::scalar(0.0)),
        (MiMode::Fixed, _) => {
            let s = tape.add(j_rec, j_exp)?;
            tape.scale(s, FIXED_WEIGHT)
        }
        (MiMode::DynamicDual, Some(w)) => {
            let a = masked_mean(tape, w.mu_rec, mask)?;
            let b = masked_mean(tape, w.mu_exp, mask)?;
            let a = tape.mul(a, j_rec)?;
            let b = tape.mul(b, j_exp)?;
            tape.add(a, b)
        }
        (MiMode::SingleShared, Some(w)) => {
            let m = masked_mean(tape, w.mu_rec, mask)?;
            let s = tape.add(j_rec, j_exp)?;
            tape.mul(m, s)
        }
        (_, None) => Err(TensorError::EmptyInput { op: "j_mi weights" }),
    }
}

/// Mean of a per-step weight column over valid steps.
pub fn mean_valid(values: &[f64], mask: &[bool]) -> Result<f64, AlignError> {
    let (sum, count) = values
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, c), (v, _)| (s + v, c + 1));
    if count == 0 {
        return Err(AlignError::Empty);
    }
    Ok(sum / count as f64)
}

/// Per-user averages `(μ̄_rec, μ̄_exp)`.
pub fn mu_summary(per_user: &[(Vec<f64>, Vec<f64>)]) -> Result<Vec<(f64, f64)>, AlignError> {
    per_user
        .iter()
        .map(|(rec, exp)| {
            let all = vec![true; rec.len().max(exp.len())];
            Ok((mean_valid(rec, &all)?, mean_valid(exp, &all)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn setup(d: usize, seed: u64) -> (ParamStore, MiParams, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let p = MiParams::register(&mut store, &mut rng, d);
        (store, p, rng)
    }

    fn zero_mlp(store: &mut ParamStore, m: Mlp) {
        for id in [m.w1, m.b1, m.w2, m.b2] {
            store.get_mut(id).data_mut().fill(0.0);
        }
    }

    #[test]
    fn zero_mlps_give_half() {
        let (mut store, p, mut rng) = setup(4, 1);
        zero_mlp(&mut store, p.mlp_rec);
        zero_mlp(&mut store, p.mlp_exp);
        let mut tape = Tape::new();
        let zr = tape.constant(random(&mut rng, 3, 4)).unwrap();
        let ze = tape.constant(random(&mut rng, 3, 4)).unwrap();
        let w = mi_weights(&mut tape, &store, &p, zr, ze).unwrap();
        assert!(tape.value(w.mu_rec).data().iter().all(|&m| m == 0.5));
        assert!(tape.value(w.mu_exp).data().iter().all(|&m| m == 0.5));
    }

    #[test]
    fn duplicate_rows_give_duplicate_weights() {
        let (store, p, _) = setup(3, 2);
        let z = Tensor::from_rows(&[vec![0.1, 0.2, -0.3], vec![0.5, 0.5, 0.5], vec![0.1, 0.2, -0.3]]).unwrap();
        let mut tape = Tape::new();
        let z = tape.constant(z).unwrap();
        let w = mi_weights(&mut tape, &store, &p, z, z).unwrap();
        let mu = tape.value(w.mu_rec).data();
        assert_eq!(mu[0], mu[2]);
    }

    #[test]
    fn weights_match_composition() {
        let (store, p, mut rng) = setup(3, 3);
        let z = random(&mut rng, 2, 3);
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone()).unwrap();
        let w = mi_weights(&mut tape, &store, &p, zv, zv).unwrap();
        let m = p.mlp_exp;
        for i in 0..2 {
            let mut logit = store.get(m.b2).item();
            for k in 0..3 {
                let a: f64 = store.get(m.b1).get(0, k) + (0..3).map(|j| z.get(i, j) * store.get(m.w1).get(j, k)).sum::<f64>();
                logit += a.tanh() * store.get(m.w2).get(k, 0);
            }
            let want = 1.0 / (1.0 + (-logit).exp());
            assert!((tape.value(w.mu_exp).data()[i] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_lambda_gives_log_c() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::new();
        let z = tape.constant(random(&mut rng, 4, 3)).unwrap();
        let table = tape.constant(random(&mut rng, 9, 3)).unwrap();
        let lam = tape.constant(Tensor::zeros(&[3, 3])).unwrap();
        let l = branch_info_nce(&mut tape, z, table, lam, &[0, 3, 8, 2], &[true; 4]).unwrap();
        assert!((tape.value(l).item() - 9f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn dominant_positive_saturates() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap()).unwrap();
        let table = tape
            .constant(Tensor::from_rows(&[vec![0.0, 1.0], vec![30.0, 0.0], vec![0.0, -1.0]]).unwrap())
            .unwrap();
        let lam = tape.constant(Tensor::identity(2)).unwrap();
        let l = branch_info_nce(&mut tape, z, table, lam, &[1], &[true]).unwrap();
        assert!(tape.value(l).item() < 1e-9);
    }

    #[test]
    fn info_nce_matches_softmax_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (z, table, lam) = (random(&mut rng, 3, 4), random(&mut rng, 5, 4), random(&mut rng, 4, 4));
        let pos = [4, 0, 2];
        let mask = [true, false, true];
        let mut tape = Tape::new();
        let (zv, tv, lv) = (
            tape.constant(z.clone()).unwrap(),
            tape.constant(table.clone()).unwrap(),
            tape.constant(lam.clone()).unwrap(),
        );
        let got = branch_info_nce(&mut tape, zv, tv, lv, &pos, &mask).unwrap();
        let mut total = 0.0;
        for i in [0, 2] {
            let logits: Vec<f64> = (0..5)
                .map(|c| {
                    let mut s = 0.0;
                    for a in 0..4 {
                        for b in 0..4 {
                            s += table.get(c, a) * lam.get(a, b) * z.get(i, b);
                        }
                    }
                    s
                })
                .collect();
            let denom: f64 = logits.iter().map(|l| l.exp()).sum();
            total += -(logits[pos[i]].exp() / denom).ln();
        }
        assert!((tape.value(got).item() - total / 2.0).abs() < 1e-12);
    }

    #[test]
    fn info_nce_errors() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(&[2, 2])).unwrap();
        let t = tape.constant(Tensor::zeros(&[3, 2])).unwrap();
        let l = tape.constant(Tensor::identity(2)).unwrap();
        assert!(branch_info_nce(&mut tape, z, t, l, &[0, 7], &[true, true]).is_err());
        assert!(branch_info_nce(&mut tape, z, t, l, &[0, 1], &[false, false]).is_err());
    }

    #[test]
    fn j_mi_modes() {
        let mut tape = Tape::new();
        let c = 7f64.ln();
        let half = tape.constant(Tensor::filled(&[4, 1], 0.5)).unwrap();
        let w = MiWeights { mu_rec: half, mu_exp: half };
        let jr = tape.constant(Tensor::scalar(c)).unwrap();
        let je = tape.constant(Tensor::scalar(c)).unwrap();
        let mask = [true; 4];
        let v = j_mi(&mut tape, MiMode::DynamicDual, Some(&w), jr, je, &mask).unwrap();
        assert!((tape.value(v).item() - c).abs() < 1e-15);
        let one = tape.constant(Tensor::scalar(1.0)).unwrap();
        let v = j_mi(&mut tape, MiMode::Fixed, None, one, one, &mask).unwrap();
        assert_eq!(tape.value(v).item(), 0.002);
        let v = j_mi(&mut tape, MiMode::Disabled, Some(&w), jr, je, &mask).unwrap();
        assert_eq!(tape.value(v).item(), 0.0);
        let v = j_mi(&mut tape, MiMode::SingleShared, Some(&w), jr, je, &mask).unwrap();
        assert!((tape.value(v).item() - c).abs() < 1e-15);
        assert!(j_mi(&mut tape, MiMode::DynamicDual, None, jr, je, &mask).is_err());
    }

    #[test]
    fn masked_steps_do_not_count() {
        let mut tape = Tape::new();
        let mu = tape.constant(Tensor::matrix(3, 1, vec![0.2, 0.9, 0.4]).unwrap()).unwrap();
        let w = MiWeights { mu_rec: mu, mu_exp: mu };
        let one = tape.constant(Tensor::scalar(1.0)).unwrap();
        let zero = tape.constant(Tensor::scalar(0.0)).unwrap();
        let v = j_mi(&mut tape, MiMode::DynamicDual, Some(&w), one, zero, &[true, false, true]).unwrap();
        assert!((tape.value(v).item() - 0.3).abs() < 1e-15);
    }

    fn pipeline(t: &mut Tape, s: &ParamStore, p: &MiParams, mode: MiMode, z: &[Tensor; 2], tables: &[Tensor; 2]) -> TensorResult<Var> {
        let zr = t.constant(z[0].clone())?;
        let ze = t.constant(z[1].clone())?;
        let mv = t.constant(tables[0].clone())?;
        let me = t.constant(tables[1].clone())?;
        let lr = t.param(s, p.lambda_rec)?;
        let le = t.param(s, p.lambda_exp)?;
        let mask = [true; 3];
        let jr = branch_info_nce(t, ze, mv, lr, &[1, 4, 0], &mask)?;
        let je = branch_info_nce(t, zr, me, le, &[2, 2, 3], &mask)?;
        let w = weights_for_mode(t, s, p, mode, zr, ze)?;
        j_mi(t, mode, w.as_ref(), jr, je, &mask)
    }

    #[test]
    fn objective_gradients() {
        for mode in [MiMode::DynamicDual, MiMode::SingleShared, MiMode::Fixed] {
            let (mut store, p, mut rng) = setup(3, 6);
            let z = [random(&mut rng, 3, 3), random(&mut rng, 3, 3)];
            let tables = [random(&mut rng, 5, 3), random(&mut rng, 4, 3)];
            let report = grad_check(&mut store, 1e-6, |t, s| pipeline(t, s, &p, mode, &z, &tables)).unwrap();
            assert!(report.max_rel_error < 1e-6, "{mode}: {report:?}");
        }
    }

    #[test]
    fn weight_gradients_vanish_only_in_fixed_mode() {
        let (store, p, mut rng) = setup(3, 7);
        let z = [random(&mut rng, 3, 3), random(&mut rng, 3, 3)];
        let tables = [random(&mut rng, 5, 3), random(&mut rng, 4, 3)];
        for (mode, expect_nonzero) in [(MiMode::DynamicDual, true), (MiMode::Fixed, false)] {
            let mut tape = Tape::new();
            let loss = pipeline(&mut tape, &store, &p, mode, &z, &tables).unwrap();
            let grads = tape.backward(loss).unwrap();
            let norm: f64 = [p.mlp_rec.w1, p.mlp_rec.w2, p.mlp_exp.w2]
                .iter()
                .filter_map(|id| grads.get(*id))
                .flat_map(|g| g.iter())
                .map(|v| v * v)
                .sum();
            assert_eq!(norm > 0.0, expect_nonzero, "{mode}");
        }
    }

    #[test]
    fn sampled_candidates_contain_positives() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (rows, remapped) = sample_candidates(&mut rng, 50, &[7, 3, 7], 5);
        assert_eq!(rows.len(), 7);
        assert_eq!(&rows[..2], &[7, 3]);
        assert_eq!(remapped, vec![0, 1, 0]);
        assert_eq!(rows.iter().collect::<HashSet<_>>().len(), 7);
        let (rows, _) = sample_candidates(&mut rng, 4, &[1], 100);
        assert_eq!(rows, vec![1, 0, 2, 3]);
    }

    #[test]
    fn candidate_strings() {
        assert_eq!("full".parse::<MiCandidates>().unwrap(), MiCandidates::Full);
        assert_eq!("sampled:64".parse::<MiCandidates>().unwrap(), MiCandidates::Sampled(64));
        assert!("sampled:0".parse::<MiCandidates>().is_err());
        assert!("some".parse::<MiCandidates>().is_err());
        assert_eq!(MiCandidates::Sampled(3).to_string(), "sampled:3");
        assert!("both".parse::<MiMode>().is_err());
    }

    #[test]
    fn mu_summary_examples() {
        let s = mu_summary(&[(vec![0.3; 5], vec![0.2, 0.4])]).unwrap();
        assert!((s[0].0 - 0.3).abs() < 1e-15);
        assert!((s[0].1 - 0.3).abs() < 1e-15);
        assert!(mu_summary(&[(vec![], vec![])]).is_err());
    }

    proptest! {
        #[test]
        fn mu_summary_matches_loop(values in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 1..20), 1..10)) {
            let input: Vec<(Vec<f64>, Vec<f64>)> = values.iter().map(|v| (v.clone(), v.iter().map(|x| 1.0 - x).collect())).collect();
            let got = mu_summary(&input).unwrap();
            for (v, (r, e)) in values.iter().zip(got) {
                let mut s = 0.0;
                for x in v {
                    s += x;
                }
                let m = s / v.len() as f64;
                prop_assert!((r - m).abs() < 1e-12);
                prop_assert!((e - (1.0 - m)).abs() < 1e-12);
            }
        }

        #[test]
        fn dynamic_objective_is_bounded(
            mu in prop::collection::vec(1e-6f64..(1.0 - 1e-6), 1..12),
            jr in 1e-3f64..20.0,
            je in 1e-3f64..20.0,
        ) {
            let n = mu.len();
            let mut tape = Tape::new();
            let m = tape.constant(Tensor::matrix(n, 1, mu.clone()).unwrap()).unwrap();
            let m2 = tape.constant(Tensor::matrix(n, 1, mu.iter().map(|x| 1.0 - x).collect()).unwrap()).unwrap();
            let w = MiWeights { mu_rec: m, mu_exp: m2 };
            let a = tape.constant(Tensor::scalar(jr)).unwrap();
            let b = tape.constant(Tensor::scalar(je)).unwrap();
            let v = j_mi(&mut tape, MiMode::DynamicDual, Some(&w), a, b, &vec![true; n]).unwrap();
            let v = tape.value(v).item();
            prop_assert!(v > 0.0 && v < jr.max(je));
        }

        #[test]
        fn info_nce_falls_as_positive_similarity_rises(seed in 0u64..300, bump in 0.01f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let z = random(&mut rng, 1, 3);
            let table = random(&mut rng, 6, 3);
            let at = |t: &Tensor| {
                let mut tape = Tape::new();
                let zv = tape.constant(z.clone()).unwrap();
                let tv = tape.constant(t.clone()).unwrap();
                let lv = tape.constant(Tensor::identity(3)).unwrap();
                let l = branch_info_nce(&mut tape, zv, tv, lv, &[2], &[true]).unwrap();
                tape.value(l).item()
            };
            // move the positive row along Z, raising only its logit
            let mut moved = table.clone();
            for j in 0..3 {
                let v = moved.get(2, j) + bump * z.get(0, j);
                moved.set(2, j, v);
            }
            prop_assert!(at(&moved) < at(&table));
        }
    }
}
