use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::{TensorError, TensorResult};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter name, max relative error over its coordinates)`.
    pub per_param: Vec<(String, f64)>,
    /// Largest `|analytic - numeric|` over all coordinates.
    pub max_abs_error: f64,
    /// Every coordinate whose relative error exceeded `1e-4`.
    pub outliers: Vec<CoordinateError>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateError {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

const OUTLIER: f64 = 1e-4;

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Compares tape gradients against central finite differences for every
/// coordinate of every parameter in `store`.
///
/// `f` must rebuild the scalar objective on the given tape from the current
/// parameter values and be deterministic.
pub fn grad_check<F>(store: &mut ParamStore, eps: f64, f: F) -> TensorResult<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> TensorResult<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let analytic = tape.backward(loss)?;

    let eval = |store: &ParamStore| -> TensorResult<f64> {
        let mut tape = Tape::new();
        let v = f(&mut tape, store)?;
        let out = tape.value(v).item();
        if !out.is_finite() {
            return Err(TensorError::NonFinite { op: "grad_check" });
        }
        Ok(out)
    };

    let ids: Vec<ParamId> = store.ids().collect();
    let mut per_param = Vec::with_capacity(ids.len());
    let mut max_rel_error = 0.0f64;
    let mut max_abs_error = 0.0f64;
    let mut outliers = Vec::new();
    for id in ids {
        let len = store.get(id).len();
        let grad = analytic.get(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len]);
        let mut worst = 0.0f64;
        for i in 0..len {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + eps;
            let plus = eval(store);
            store.get_mut(id).data_mut()[i] = orig - eps;
            let minus = eval(store);
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * eps);
            max_abs_error = max_abs_error.max((grad[i] - numeric).abs());
            if rel_error(grad[i], numeric) > OUTLIER {
                outliers.push(CoordinateError {
                    param: store.name(id).to_string(),
                    index: i,
                    analytic: grad[i],
                    numeric,
                });
            }
            worst = worst.max(rel_error(grad[i], numeric));
        }
        max_rel_error = max_rel_error.max(worst);
        per_param.push((store.name(id).to_string(), worst));
    }
    Ok(GradCheckReport {
        max_rel_error,
        per_param,
        max_abs_error,
        outliers,
    })
}
