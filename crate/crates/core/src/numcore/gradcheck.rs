//! Central finite-difference verification of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use super::{Result, Scalar};

/// Knobs for [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheckSettings {
    /// Central-difference step.
    pub eps: f64,
    /// Absolute floor in the relative-error denominator.
    pub eps_abs: f64,
    /// Check at most this many elements per parameter (deterministic seeded
    /// subset). `None` checks every element.
    pub max_checks_per_param: Option<usize>,
    pub sample_seed: u64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings { eps: 1e-3, eps_abs: 1e-4, max_checks_per_param: None, sample_seed: 0 }
    }
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct GradReport {
    /// Max relative error per parameter tensor, in input order.
    pub per_param: Vec<(String, f64)>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub pass: bool,
    /// Set when a loss evaluation went non-finite; names the location.
    pub failure: Option<String>,
}

impl GradReport {
    fn failed(tol: f64, message: String) -> Self {
        GradReport {
            per_param: Vec::new(),
            max_rel_err: f64::INFINITY,
            tolerance: tol,
            pass: false,
            failure: Some(message),
        }
    }
}

fn eval_loss<T: Scalar, F>(f: &F, params: &[(String, Tensor<T>)]) -> Result<T>
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.leaf(t.clone(), false)).collect();
    let loss = f(&mut tape, &vars)?;
    Ok(tape.value(loss).item())
}

/// Compare the tape's analytic gradient of a scalar function against central
/// finite differences. Relative error per element is
/// `|a - n| / max(|a|, |n|, eps_abs)`; the report passes iff the max over all
/// checked elements stays within `tol`.
pub fn grad_check<T: Scalar, F>(
    f: &F,
    params: &[(String, Tensor<T>)],
    tol: f64,
    settings: &GradCheckSettings,
) -> GradReport
where
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.leaf(t.clone(), true)).collect();
    let loss = match f(&mut tape, &vars) {
        Ok(v) => v,
        Err(e) => return GradReport::failed(tol, format!("forward failed: {e}")),
    };
    let base = tape.value(loss).item().to_f64_lossy();
    if !base.is_finite() {
        return GradReport::failed(tol, "non-finite loss at base point".to_string());
    }
    if let Err(e) = tape.backward(loss) {
        return GradReport::failed(tol, format!("backward failed: {e}"));
    }
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(v, (_, t))| match tape.grad(*v) {
            Some(g) => g.iter().map(|x| x.to_f64_lossy()).collect(),
            None => vec![0.0; t.dims().len()],
        })
        .collect();
    drop(tape);

    // Numeric pass on a working copy perturbed element by element.
    let mut work: Vec<(String, Tensor<T>)> = params.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(settings.sample_seed);
    let eps = settings.eps;
    let mut per_param = Vec::with_capacity(params.len());
    let mut max_rel = 0.0f64;

    for (pi, (name, tensor)) in params.iter().enumerate() {
        let len = tensor.dims().len();
        let indices: Vec<usize> = match settings.max_checks_per_param {
            Some(limit) if len > limit => {
                (0..limit).map(|_| rng.gen_range(0..len)).collect()
            }
            _ => (0..len).collect(),
        };
        let mut param_max = 0.0f64;
        for &j in &indices {
            let orig = work[pi].1.data()[j];
            work[pi].1.data_mut()[j] = orig + T::from_f64_lossy(eps);
            let plus = match eval_loss(f, &work) {
                Ok(v) => v.to_f64_lossy(),
                Err(e) => return GradReport::failed(tol, format!("{name}[{j}] +eps: {e}")),
            };
            work[pi].1.data_mut()[j] = orig - T::from_f64_lossy(eps);
            let minus = match eval_loss(f, &work) {
                Ok(v) => v.to_f64_lossy(),
                Err(e) => return GradReport::failed(tol, format!("{name}[{j}] -eps: {e}")),
            };
            work[pi].1.data_mut()[j] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return GradReport::failed(
                    tol,
                    format!("non-finite loss perturbing {name}[{j}] (+{plus}, -{minus})"),
                );
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi][j];
            if !a.is_finite() {
                return GradReport::failed(tol, format!("non-finite analytic gradient at {name}[{j}]"));
            }
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(settings.eps_abs);
            if rel > param_max {
                param_max = rel;
            }
        }
        if param_max > max_rel {
            max_rel = param_max;
        }
        per_param.push((name.clone(), param_max));
    }

    GradReport { per_param, max_rel_err: max_rel, tolerance: tol, pass: max_rel <= tol, failure: None }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Dims;

    #[test]
    fn sum_passes_exactly() {
        let t = Tensor::<f64>::from_fn(Dims::new(1, 2, 3, 3), |_, c, y, x| {
            0.3 * c as f64 - 0.1 * y as f64 + 0.05 * x as f64
        });
        let report = grad_check(
            &|tape: &mut Tape<f64>, vars: &[Var]| Ok(tape.sum(vars[0])),
            &[("x".to_string(), t)],
            1e-8,
            &GradCheckSettings::default(),
        );
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn half_norm_sq_gradient_is_input() {
        let t = Tensor::<f64>::from_fn(Dims::new(1, 1, 4, 4), |_, _, y, x| {
            (y as f64 - 1.7) * (x as f64 + 0.3) * 0.2
        });
        let report = grad_check(
            &|tape: &mut Tape<f64>, vars: &[Var]| {
                let s = tape.sum_sq(vars[0]);
                Ok(tape.scale(s, 0.5))
            },
            &[("x".to_string(), t)],
            1e-6,
            &GradCheckSettings::default(),
        );
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn reports_non_finite_loss() {
        let t = Tensor::<f64>::full(Dims::new(1, 1, 1, 1), 1.0e308);
        let report = grad_check(
            &|tape: &mut Tape<f64>, vars: &[Var]| Ok(tape.sum_sq(vars[0])),
            &[("x".to_string(), t)],
            1e-3,
            &GradCheckSettings::default(),
        );
        assert!(!report.pass);
        assert!(report.failure.is_some());
    }
}
