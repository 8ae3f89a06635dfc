//! Two-layer perceptron `in → hidden → 1` with a tanh hidden layer.

use rand::Rng;

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, TensorResult, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

pub(crate) fn uniform(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::matrix(rows, cols, data).expect("uniform init shape")
}

impl Mlp {
    /// Weights uniform in `±1/√fan_in`, biases zero.
    pub fn register(store: &mut ParamStore, rng: &mut impl Rng, name: &str, input: usize, hidden: usize) -> Mlp {
        let w1 = uniform(rng, input, hidden, 1.0 / (input as f64).sqrt());
        let w2 = uniform(rng, hidden, 1, 1.0 / (hidden as f64).sqrt());
        Mlp {
            w1: store.add(format!("{name}.w1"), w1),
            b1: store.add(format!("{name}.b1"), Tensor::zeros(&[1, hidden])),
            w2: store.add(format!("{name}.w2"), w2),
            b2: store.add(format!("{name}.b2"), Tensor::zeros(&[1, 1])),
        }
    }

    /// Pre-activation output, one value per input row (`rows × 1`).
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> TensorResult<Var> {
        let w1 = tape.param(store, self.w1)?;
        let b1 = tape.param(store, self.b1)?;
        let w2 = tape.param(store, self.w2)?;
        let b2 = tape.param(store, self.b2)?;
        let h = tape.matmul(x, w1)?;
        let h = tape.add_bias_rows(h, b1)?;
        let h = tape.tanh(h)?;
        let o = tape.matmul(h, w2)?;
        tape.add_bias_rows(o, b2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_hand_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let mlp = Mlp::register(&mut store, &mut rng, "m", 3, 4);
        store.get_mut(mlp.b2).data_mut()[0] = 0.25;
        let x = [0.3, -0.8, 1.1];
        let w1 = store.get(mlp.w1);
        let w2 = store.get(mlp.w2);
        let mut expect = 0.25;
        for j in 0..4 {
            let a: f64 = (0..3).map(|i| x[i] * w1.get(i, j)).sum();
            expect += a.tanh() * w2.get(j, 0);
        }
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::matrix(1, 3, x.to_vec()).unwrap()).unwrap();
        let out = mlp.forward(&mut tape, &store, xv).unwrap();
        assert!((tape.value(out).item() - expect).abs() < 1e-14);
    }
}
