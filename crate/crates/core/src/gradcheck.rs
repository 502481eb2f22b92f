//! Central-difference gradient checking.

use crate::autodiff::{Graph, ParamId, ParamSet, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coords_checked: usize,
    /// Parameter and flat index where the worst error occurred.
    pub worst: Option<(ParamId, usize)>,
}

/// Compare reverse-mode gradients of a scalar loss with central differences.
///
/// The relative error at a coordinate is
/// `|analytic − numeric| / (|analytic| + |numeric| + 1e-12)`.
/// With `sample = Some(k)`, at most `k` coordinates per parameter are drawn
/// uniformly from `rng`; otherwise every coordinate is checked.
pub fn grad_check<F>(
    f: F,
    params: &ParamSet<f64>,
    eps: f64,
    sample: Option<usize>,
    rng: &mut Rng,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Input(format!("eps {eps} outside [1e-6, 1e-3]")));
    }
    let eval = |ps: &ParamSet<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let out = f(&mut g, ps)?;
        let v = g.scalar_value(out);
        if !v.is_finite() {
            return Err(Error::NonFinite("loss during gradient check".into()));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let out = f(&mut g, params)?;
    let grads = g.backward(out)?;

    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coords_checked: 0,
        worst: None,
    };
    for id in params.ids() {
        let n = params.get(id).len();
        let coords: Vec<usize> = match sample {
            Some(k) if k < n => (0..k).map(|_| rng.below(n)).collect(),
            _ => (0..n).collect(),
        };
        let analytic = grads.get(id).map(|t| t.data().to_vec());
        for i in coords {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + eps;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - eps;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.as_ref().map_or(0.0, |d| d[i]);
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
            report.coords_checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((id, i));
            }
        }
    }
    Ok(report)
}
