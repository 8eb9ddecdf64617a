use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor of [`relative_error`]; below it the comparison is
/// effectively absolute.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-3;
/// Inputs larger than this are checked on a random coordinate subsample.
pub const FULL_CHECK_LIMIT: usize = 1000;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
}

impl GradReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

fn evaluate<F>(build: &F, inputs: &[Tensor], projection: Option<&Arc<Tensor>>) -> Result<(Graph, Var, Vec<Var>)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.input(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = build(&mut g, &vars)?;
    let out = match projection {
        Some(w) => g.dot(out, w.clone())?,
        None => out,
    };
    Ok((g, out, vars))
}

/// Compares reverse-mode gradients of `build` with central differences of
/// step `step` on every input coordinate (or a seeded subsample of
/// [`FULL_CHECK_LIMIT`] coordinates per larger input). Non-scalar outputs
/// are reduced with fixed random weights first.
pub fn finite_diff_check<F>(build: F, inputs: &[Tensor], step: f64, seed: u64) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (g, out, _) = evaluate(&build, inputs, None)?;
    let projection = if g.value(out).len() == 1 {
        None
    } else {
        let dims = g.value(out).dims();
        Some(Arc::new(Tensor::from_fn(dims, |_| rng.gen_range(-1.0..1.0))))
    };
    let (g, out, vars) = evaluate(&build, inputs, projection.as_ref())?;
    let grads = g.backward(out)?;

    let mut report = GradReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    let mut perturbed = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.dims()));
        let coords: Vec<usize> = if input.len() <= FULL_CHECK_LIMIT {
            (0..input.len()).collect()
        } else {
            rand::seq::index::sample(&mut rng, input.len(), FULL_CHECK_LIMIT).into_vec()
        };
        for i in coords {
            let orig = input.data()[i];
            perturbed[k].data_mut()[i] = orig + step;
            let (gp, op, _) = evaluate(&build, &perturbed, projection.as_ref())?;
            let fp = gp.value(op).data()[0];
            perturbed[k].data_mut()[i] = orig - step;
            let (gm, om, _) = evaluate(&build, &perturbed, projection.as_ref())?;
            let fm = gm.value(om).data()[0];
            perturbed[k].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let err = relative_error(analytic.data()[i], numeric);
            if !err.is_finite() {
                return Err(Error::NonFinite("finite difference check".into()));
            }
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((k, i));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert!(relative_error(2.0, 2.0 + 1e-9) < 1e-8);
        assert!(relative_error(2.0, 3.0) > 0.3);
        assert!(relative_error(0.0, 1e-9) < 1e-5);
    }

    #[test]
    fn quadratic_via_add_and_scale() {
        let x = Tensor::from_fn([1, 2, 2, 2], |i| 0.1 * i as f64 - 0.3);
        let report = finite_diff_check(
            |g, v| {
                let s = g.sigmoid(v[0])?;
                let a = g.add(s, v[0])?;
                g.scale(a, 1.5)
            },
            &[x],
            1e-5,
            1,
        )
        .unwrap();
        assert_eq!(report.checked, 8);
        assert!(report.passes(1e-6), "{report:?}");
    }
}
