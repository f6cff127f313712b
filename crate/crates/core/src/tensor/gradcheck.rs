use super::{ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Outcome of a finite-difference comparison against tape gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over coordinates of |a - n| / max(1, |a|, |n|)
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    /// Per-parameter maximum relative error, in store order.
    pub per_param: Vec<(String, f64)>,
    pub coordinates: usize,
}

/// Central-difference check of every coordinate of every parameter in
/// `store`. `f` must build a scalar on the given tape.
pub fn grad_check<F>(store: &ParamStore<f64>, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore<f64>, &mut Tape<f64>) -> Result<Var>,
{
    if !(1e-7..=1e-4).contains(&eps) {
        return Err(Error::Config(format!("grad_check eps {eps:e} outside [1e-7, 1e-4]")));
    }
    let mut tape = Tape::new();
    let out = f(store, &mut tape)?;
    let grads = tape.backward(out)?;

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut t = Tape::inference();
        let o = f(s, &mut t)?;
        let v = t.value(o);
        if !v.is_scalar() {
            return Err(Error::Usage("grad_check function must return a scalar".into()));
        }
        Ok(v.data()[0])
    };

    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        per_param: Vec::with_capacity(store.len()),
        coordinates: 0,
    };
    for (id, p) in store.iter() {
        let analytic = grads.param(id);
        let mut worst = 0.0f64;
        for i in 0..p.value.len() {
            let orig = p.value.data()[i];
            work.get_mut(id).value.data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work.get_mut(id).value.data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work.get_mut(id).value.data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.map_or(0.0, |g| g.data()[i]);
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            if rel > worst {
                worst = rel;
            }
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_param = p.name.clone();
                report.worst_index = i;
            }
            report.coordinates += 1;
        }
        report.per_param.push((p.name.clone(), worst));
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_is_exact_to_roundoff() {
        let mut store = ParamStore::new();
        let id = store
            .add("x", Tensor::from_f64(&[3], &[0.5, -1.5, 2.0]).unwrap())
            .unwrap();
        let r = grad_check(&store, 1e-5, |s, t| {
            let x = t.param(s, id);
            let sq = t.mul(x, x)?;
            let c = t.scale(x, 3.0)?;
            let y = t.add(sq, c)?;
            t.sum_all(y)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.coordinates, 3);
    }

    #[test]
    fn sigmoid_chain() {
        let mut store = ParamStore::new();
        let id = store
            .add("x", Tensor::from_f64(&[4], &[0.3, -0.7, 1.1, 2.4]).unwrap())
            .unwrap();
        let r = grad_check(&store, 1e-6, |s, t| {
            let x = t.param(s, id);
            let a = t.sigmoid(x)?;
            let b = t.scale(a, 2.0)?;
            let c = t.sigmoid(b)?;
            let d = t.mul(c, x)?;
            t.sum_all(d)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn eps_outside_range_rejected() {
        let store = ParamStore::<f64>::new();
        let r = grad_check(&store, 1e-2, |_, t| Ok(t.constant(Tensor::scalar(0.0))));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn mismatched_gradient_is_detected() {
        // The analytic pass (grad-enabled tape) and the probing passes
        // (inference tapes) deliberately compute different functions.
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(1.0)).unwrap();
        let r = grad_check(&store, 1e-6, |s, t| {
            let x = t.param(s, id);
            let k = if t.grad_enabled() { 2.0 } else { 3.0 };
            t.scale(x, k)
        })
        .unwrap();
        assert!(r.max_rel_error > 0.1);
        assert_eq!(r.worst_param, "x");
    }
}
