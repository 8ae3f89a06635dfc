//! Multihead linear recurrent encoder.
//!
//! The embedding width `d` is split into `H` slices of width `m = d/H`; each slice
//! runs its own diagonal complex recurrence and `m×m` output projection, and the
//! head outputs are concatenated back to width `d`.

mod head;
mod scan;

pub use head::{
    eigenvalues, head_forward, head_forward_scan, head_forward_sequential, head_step, input_gains,
    recurrence, states_scan, states_sequential, Branch, HeadParams, HeadState, MultiheadState,
    ScanMode,
};
pub use scan::{blelloch_inclusive_scan, Affine};

use rand::Rng;
use serde::Serialize;

use crate::autodiff::{Tensor, TensorError, TensorResult};

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSequence {
    pub z_rec: Tensor,
    pub z_exp: Tensor,
}

/// Runs one branch's heads over `x: n×d` without a tape.
pub fn encode_branch(
    x: &Tensor,
    heads: &[HeadParams],
    normalize: bool,
    mode: ScanMode,
) -> TensorResult<Tensor> {
    let d = x.cols();
    let h = heads.len();
    if h == 0 || !d.is_multiple_of(h) {
        return Err(TensorError::NotDivisible { width: d, parts: h });
    }
    let m = d / h;
    let outputs: Vec<Tensor> = heads
        .iter()
        .enumerate()
        .map(|(i, p)| head_forward(p, &x.slice_cols(i * m, (i + 1) * m), normalize, mode))
        .collect();
    let n = x.rows();
    let mut data = Vec::with_capacity(n * d);
    for r in 0..n {
        for o in &outputs {
            data.extend_from_slice(o.row(r));
        }
    }
    Tensor::matrix(n, d, data)
}

/// Both branches, value-only.
pub fn encode(
    e_rec_time: &Tensor,
    e_exp_time: &Tensor,
    heads_rec: &[HeadParams],
    heads_exp: &[HeadParams],
    normalize: bool,
    mode: ScanMode,
) -> TensorResult<EncodedSequence> {
    Ok(EncodedSequence {
        z_rec: encode_branch(e_rec_time, heads_rec, normalize, mode)?,
        z_exp: encode_branch(e_exp_time, heads_exp, normalize, mode)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    /// `H·(m² + 2m)`: dense projection plus the complex diagonal (ν, θ).
    pub per_branch: usize,
    pub total: usize,
    /// `d²/H` per branch.
    pub dominant_term: usize,
}

pub fn param_count(d: usize, heads: usize, branches: usize) -> TensorResult<ParamCount> {
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(TensorError::NotDivisible { width: d, parts: heads });
    }
    let m = d / heads;
    let per_branch = heads * (m * m + 2 * m);
    Ok(ParamCount {
        per_branch,
        total: per_branch * branches,
        dominant_term: d * d / heads,
    })
}

/// `ν` such that `|λ|` is uniform in `[0.7, 0.99]`, `θ` uniform in `[0, π/8]`,
/// `U` uniform in `±1/√m`.
pub fn init_head(rng: &mut impl Rng, width: usize, branch: Branch, head_index: usize) -> HeadParams {
    let nu = (0..width)
        .map(|_| {
            let magnitude: f64 = rng.random_range(0.7..0.99);
            (-magnitude.ln()).ln()
        })
        .collect();
    let theta = (0..width)
        .map(|_| rng.random_range(0.0..std::f64::consts::PI / 8.0))
        .collect();
    let bound = 1.0 / (width as f64).sqrt();
    let u = Tensor::matrix(
        width,
        width,
        (0..width * width).map(|_| rng.random_range(-bound..bound)).collect(),
    )
    .expect("square projection");
    HeadParams {
        nu,
        theta,
        u,
        branch,
        head_index,
    }
}
