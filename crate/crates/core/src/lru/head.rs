use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use super::scan::{blelloch_inclusive_scan, Affine};
use crate::autodiff::{gemm_acc, BackwardRule, Tape, Tensor, TensorError, TensorResult, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanMode {
    #[default]
    Scan,
    Sequential,
}

impl std::fmt::Display for ScanMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Scan => "scan",
            Self::Sequential => "sequential",
        })
    }
}

impl std::str::FromStr for ScanMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "scan" => Ok(Self::Scan),
            "sequential" => Ok(Self::Sequential),
            other => Err(format!("unknown lru mode `{other}` (expected scan|sequential)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Rec,
    Exp,
}

/// One head's diagonal recurrence `s_i = λ ⊙ s_{i−1} + g ⊙ x_i` and real output
/// projection `h_i = Re(s_i) · U`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub nu: Vec<f64>,
    pub theta: Vec<f64>,
    pub u: Tensor,
    pub branch: Branch,
    pub head_index: usize,
}

impl HeadParams {
    pub fn width(&self) -> usize {
        self.nu.len()
    }

    pub fn eigenvalues(&self) -> Vec<Complex64> {
        eigenvalues(&self.nu, &self.theta)
    }
}

/// `λ_j = exp(−exp(ν_j) + iθ_j)`; `|λ_j| < 1` for every finite `ν_j`.
pub fn eigenvalues(nu: &[f64], theta: &[f64]) -> Vec<Complex64> {
    nu.iter()
        .zip(theta)
        .map(|(&n, &t)| Complex64::new(-n.exp(), t).exp())
        .collect()
}

/// Input scaling `√(1 − |λ|²)` when `normalize`, else 1.
pub fn input_gains(nu: &[f64], normalize: bool) -> Vec<f64> {
    nu.iter()
        .map(|&n| {
            if normalize {
                (-(-2.0 * n.exp()).exp_m1()).sqrt()
            } else {
                1.0
            }
        })
        .collect()
}

fn gain_derivative(nu: f64, gain: f64) -> f64 {
    let e = nu.exp();
    (-2.0 * e).exp() * e / gain
}

/// Complex states for every step, row-major `n×m`, by a plain time loop.
pub fn states_sequential(lambda: &[Complex64], gain: &[f64], x: &[f64], n: usize) -> Vec<Complex64> {
    let m = lambda.len();
    let mut states = vec![Complex64::new(0.0, 0.0); n * m];
    let mut s = vec![Complex64::new(0.0, 0.0); m];
    for i in 0..n {
        for j in 0..m {
            s[j] = lambda[j] * s[j] + gain[j] * x[i * m + j];
            states[i * m + j] = s[j];
        }
    }
    states
}

/// Same states as [`states_sequential`], computed per channel by a prefix scan
/// over the affine maps `(λ_j, g_j x_ij)`.
pub fn states_scan(lambda: &[Complex64], gain: &[f64], x: &[f64], n: usize) -> Vec<Complex64> {
    let m = lambda.len();
    let mut states = vec![Complex64::new(0.0, 0.0); n * m];
    let mut buf = Vec::with_capacity(n);
    for j in 0..m {
        buf.clear();
        buf.extend((0..n).map(|i| Affine {
            a: lambda[j],
            b: Complex64::new(gain[j] * x[i * m + j], 0.0),
        }));
        blelloch_inclusive_scan(&mut buf, Affine::IDENTITY, Affine::then);
        for (i, f) in buf.iter().enumerate() {
            // zero initial state: applying the composed map to 0 leaves b
            states[i * m + j] = f.b;
        }
    }
    states
}

/// Adjoint recurrence `r_i = G_i + conj(λ) ⊙ r_{i+1}` run backwards in time.
fn adjoint(lambda: &[Complex64], grad_out: &[f64], n: usize, mode: ScanMode) -> Vec<Complex64> {
    let m = lambda.len();
    let conj: Vec<Complex64> = lambda.iter().map(|l| l.conj()).collect();
    let mut reversed = vec![0.0; n * m];
    for i in 0..n {
        reversed[i * m..(i + 1) * m].copy_from_slice(&grad_out[(n - 1 - i) * m..(n - i) * m]);
    }
    let ones = vec![1.0; m];
    let rev_states = match mode {
        ScanMode::Sequential => states_sequential(&conj, &ones, &reversed, n),
        ScanMode::Scan => states_scan(&conj, &ones, &reversed, n),
    };
    let mut out = vec![Complex64::new(0.0, 0.0); n * m];
    for i in 0..n {
        out[i * m..(i + 1) * m].copy_from_slice(&rev_states[(n - 1 - i) * m..(n - i) * m]);
    }
    out
}

struct RecurrenceRule {
    lambda: Vec<Complex64>,
    gain: Vec<f64>,
    normalize: bool,
    mode: ScanMode,
    states: Vec<Complex64>,
}

impl BackwardRule for RecurrenceRule {
    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad_out: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (x, nu) = (inputs[0], inputs[1]);
        let (n, m) = (x.rows(), x.cols());
        let r = adjoint(&self.lambda, grad_out, n, self.mode);

        let mut dx = vec![0.0; n * m];
        let mut dnu = vec![0.0; m];
        let mut dtheta = vec![0.0; m];
        for j in 0..m {
            let mut grad_lambda = Complex64::new(0.0, 0.0);
            let mut grad_gain = 0.0;
            for i in 0..n {
                let rij = r[i * m + j];
                dx[i * m + j] = self.gain[j] * rij.re;
                grad_gain += rij.re * x.data()[i * m + j];
                if i > 0 {
                    grad_lambda += self.states[(i - 1) * m + j].conj() * rij;
                }
            }
            let l = self.lambda[j];
            let e = nu.data()[j].exp();
            let dl_dnu = l * (-e);
            let dl_dtheta = l * Complex64::i();
            dnu[j] = (grad_lambda * dl_dnu.conj()).re;
            if self.normalize {
                dnu[j] += grad_gain * gain_derivative(nu.data()[j], self.gain[j]);
            }
            dtheta[j] = (grad_lambda * dl_dtheta.conj()).re;
        }
        vec![Some(dx), Some(dnu), Some(dtheta)]
    }
}

/// Records `Re(s)` for the diagonal recurrence driven by `x: n×m` with
/// eigenvalue parameters `nu, theta: 1×m`.
pub fn recurrence(
    tape: &mut Tape,
    x: Var,
    nu: Var,
    theta: Var,
    normalize: bool,
    mode: ScanMode,
) -> TensorResult<Var> {
    let (xv, nv, tv) = (tape.value(x), tape.value(nu), tape.value(theta));
    let (n, m) = xv.expect_matrix("recurrence")?;
    if nv.len() != m || tv.len() != m {
        return Err(TensorError::ShapeMismatch {
            op: "recurrence",
            left: xv.shape().to_vec(),
            right: nv.shape().to_vec(),
        });
    }
    let lambda = eigenvalues(nv.data(), tv.data());
    let gain = input_gains(nv.data(), normalize);
    let states = match mode {
        ScanMode::Sequential => states_sequential(&lambda, &gain, xv.data(), n),
        ScanMode::Scan => states_scan(&lambda, &gain, xv.data(), n),
    };
    let out = Tensor::matrix(n, m, states.iter().map(|s| s.re).collect())?;
    let rule = RecurrenceRule {
        lambda,
        gain,
        normalize,
        mode,
        states,
    };
    tape.custom("recurrence", &[x, nu, theta], out, Box::new(rule))
}

fn project(states: &[Complex64], u: &Tensor, n: usize) -> Tensor {
    let m = u.rows();
    let re: Vec<f64> = states.iter().map(|s| s.re).collect();
    let mut out = vec![0.0; n * u.cols()];
    gemm_acc(&re, u.data(), n, m, u.cols(), &mut out);
    Tensor::matrix(n, u.cols(), out).expect("projection shape")
}

/// Reference time loop over one head. Every other path is checked against this.
pub fn head_forward_sequential(params: &HeadParams, x: &Tensor, normalize: bool) -> Tensor {
    let n = x.rows();
    let gain = input_gains(&params.nu, normalize);
    let states = states_sequential(&params.eigenvalues(), &gain, x.data(), n);
    project(&states, &params.u, n)
}

/// Prefix-scan evaluation of one head; logarithmic depth in `n`.
pub fn head_forward_scan(params: &HeadParams, x: &Tensor, normalize: bool) -> Tensor {
    let n = x.rows();
    let gain = input_gains(&params.nu, normalize);
    let states = states_scan(&params.eigenvalues(), &gain, x.data(), n);
    project(&states, &params.u, n)
}

pub fn head_forward(params: &HeadParams, x: &Tensor, normalize: bool, mode: ScanMode) -> Tensor {
    match mode {
        ScanMode::Scan => head_forward_scan(params, x, normalize),
        ScanMode::Sequential => head_forward_sequential(params, x, normalize),
    }
}

/// Incremental state of one head over a batch of independent sequences.
///
/// A step costs `O(batch · m²)` for the projection and never looks at past inputs.
#[derive(Clone, Debug)]
pub struct HeadState {
    lambda: Vec<Complex64>,
    gain: Vec<f64>,
    u: Tensor,
    batch: usize,
    re: Vec<f64>,
    im: Vec<f64>,
    steps: usize,
}

impl HeadState {
    pub fn new(params: &HeadParams, batch: usize, normalize: bool) -> Self {
        let m = params.width();
        Self {
            lambda: params.eigenvalues(),
            gain: input_gains(&params.nu, normalize),
            u: params.u.clone(),
            batch,
            re: vec![0.0; batch * m],
            im: vec![0.0; batch * m],
            steps: 0,
        }
    }

    pub fn width(&self) -> usize {
        self.lambda.len()
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn state(&self) -> impl Iterator<Item = Complex64> + '_ {
        self.re.iter().zip(&self.im).map(|(&r, &i)| Complex64::new(r, i))
    }

    /// Updates the state without computing an output.
    pub fn advance(&mut self, x: &[f64]) {
        let m = self.width();
        for b in 0..self.batch {
            let base = b * m;
            for j in 0..m {
                let (lr, li) = (self.lambda[j].re, self.lambda[j].im);
                let (sr, si) = (self.re[base + j], self.im[base + j]);
                self.re[base + j] = lr * sr - li * si + self.gain[j] * x[base + j];
                self.im[base + j] = lr * si + li * sr;
            }
        }
        self.steps += 1;
    }

    /// Advances by one input row per sequence (`x` is `batch×m`, row-major) and
    /// writes `Re(s)·U` into `out`.
    pub fn step_into(&mut self, x: &[f64], out: &mut [f64]) {
        self.advance(x);
        out.iter_mut().for_each(|v| *v = 0.0);
        gemm_acc(&self.re, self.u.data(), self.batch, self.width(), self.u.cols(), out);
    }

    pub fn step(&mut self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.batch * self.u.cols()];
        self.step_into(x, &mut out);
        out
    }
}

/// One incremental inference step for a single head.
pub fn head_step(state: &mut HeadState, x: &[f64]) -> Vec<f64> {
    state.step(x)
}

/// Incremental state for all heads of one branch.
#[derive(Clone, Debug)]
pub struct MultiheadState {
    heads: Vec<HeadState>,
    batch: usize,
    x_buf: Vec<Vec<f64>>,
    out_buf: Vec<Vec<f64>>,
}

impl MultiheadState {
    pub fn new(heads: &[HeadParams], batch: usize, normalize: bool) -> Self {
        let heads: Vec<HeadState> = heads.iter().map(|h| HeadState::new(h, batch, normalize)).collect();
        let x_buf = heads.iter().map(|h| vec![0.0; batch * h.width()]).collect();
        let out_buf = heads.iter().map(|h| vec![0.0; batch * h.width()]).collect();
        Self {
            heads,
            batch,
            x_buf,
            out_buf,
        }
    }

    pub fn width(&self) -> usize {
        self.heads.iter().map(HeadState::width).sum()
    }

    pub fn steps(&self) -> usize {
        self.heads.first().map_or(0, HeadState::steps)
    }

    /// `x` is `batch×d` row-major; returns the concatenated head outputs `batch×d`.
    pub fn step(&mut self, x: &[f64]) -> Vec<f64> {
        let d = self.width();
        let mut out = vec![0.0; self.batch * d];
        let mut offset = 0;
        for (h, head) in self.heads.iter_mut().enumerate() {
            let m = head.width();
            let xb = &mut self.x_buf[h];
            for b in 0..self.batch {
                xb[b * m..(b + 1) * m].copy_from_slice(&x[b * d + offset..b * d + offset + m]);
            }
            head.step_into(xb, &mut self.out_buf[h]);
            for b in 0..self.batch {
                out[b * d + offset..b * d + offset + m]
                    .copy_from_slice(&self.out_buf[h][b * m..(b + 1) * m]);
            }
            offset += m;
        }
        out
    }
    /// Updates every head's state without computing outputs.
    pub fn advance(&mut self, x: &[f64]) {
        let d = self.width();
        let mut offset = 0;
        for (h, head) in self.heads.iter_mut().enumerate() {
            let m = head.width();
            let xb = &mut self.x_buf[h];
            for b in 0..self.batch {
                xb[b * m..(b + 1) * m].copy_from_slice(&x[b * d + offset..b * d + offset + m]);
            }
            head.advance(xb);
            offset += m;
        }
    }
}
