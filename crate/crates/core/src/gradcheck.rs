//! Central-difference gradient checking against analytic backward passes.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;

/// A scalar objective of the parameters.
///
/// When `with_grad` is set the objective must also accumulate its analytic
/// gradient into `params` (which arrive zeroed).
pub trait Objective {
    fn eval(&mut self, params: &mut ParamStore, with_grad: bool) -> Result<f64>;
}

impl<F> Objective for F
where
    F: FnMut(&mut ParamStore, bool) -> Result<f64>,
{
    fn eval(&mut self, params: &mut ParamStore, with_grad: bool) -> Result<f64> {
        self(params, with_grad)
    }
}

#[derive(Debug, Clone)]
pub struct CheckConfig {
    pub eps: f64,
    pub tol: f64,
    /// Tensors larger than this are checked on a seeded random subsample of
    /// this many coordinates.
    pub max_coords_per_tensor: usize,
    pub seed: u64,
    /// Lower bound on the relative-error denominator, so that gradients that
    /// are zero up to rounding compare in absolute terms.
    pub denom_floor: f64,
    /// Only check parameters whose name starts with one of these prefixes
    /// (all parameters when empty).
    pub include: Vec<String>,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            eps: 1e-5,
            tol: 1e-4,
            max_coords_per_tensor: 32,
            seed: 0,
            denom_floor: 1e-6,
            include: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CoordCheck {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CheckReport {
    pub max_rel_error: f64,
    pub worst: Option<CoordCheck>,
    pub per_param: Vec<ParamCheck>,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

/// Compares the analytic gradient of `objective` with central differences
/// `(f(p + eps) - f(p - eps)) / (2 eps)` coordinate by coordinate.
///
/// On return `params` holds its original values and the analytic gradient.
pub fn grad_check<O: Objective>(
    params: &mut ParamStore,
    objective: &mut O,
    cfg: &CheckConfig,
) -> Result<CheckReport> {
    if !(cfg.eps > 0.0) {
        return Err(Error::config("eps", "must be positive"));
    }
    if !params.is_finite() {
        return Err(Error::config("params", "all parameters must be finite"));
    }

    params.zero_grad();
    let base = objective.eval(params, true)?;
    if !base.is_finite() {
        return Err(Error::Evaluation {
            context: String::from("unperturbed parameters"),
        });
    }
    let analytic = params.clone();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ids: Vec<_> = params.ids().collect();
    let mut per_param = Vec::new();
    let mut worst: Option<CoordCheck> = None;
    let mut checked = 0;

    for id in ids {
        let name = String::from(params.name(id));
        if !cfg.include.is_empty() && !cfg.include.iter().any(|p| name.starts_with(p.as_str())) {
            continue;
        }
        let len = params.value(id).len();
        let coords: Vec<usize> = if len <= cfg.max_coords_per_tensor {
            (0..len).collect()
        } else {
            let mut v = sample(&mut rng, len, cfg.max_coords_per_tensor).into_vec();
            v.sort_unstable();
            v
        };

        let mut param_max = 0.0f64;
        for &i in &coords {
            let original = params.value(id).data()[i];
            let mut eval_at = |params: &mut ParamStore, v: f64, sign: &str| -> Result<f64> {
                params.value_mut(id).data_mut()[i] = v;
                let f = objective.eval(params, false)?;
                if f.is_finite() {
                    Ok(f)
                } else {
                    Err(Error::Evaluation {
                        context: format!("{name}[{i}] perturbed by {sign}eps"),
                    })
                }
            };
            let plus = eval_at(params, original + cfg.eps, "+");
            let minus = match plus {
                Ok(_) => eval_at(params, original - cfg.eps, "-"),
                Err(_) => Ok(0.0),
            };
            params.value_mut(id).data_mut()[i] = original;
            let (plus, minus) = (plus?, minus?);

            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = analytic.grad(id).data()[i];
            let rel = relative_error(a, numeric, cfg.denom_floor);
            param_max = param_max.max(rel);
            checked += 1;
            if worst.as_ref().is_none_or(|w| rel > w.rel_error) {
                worst = Some(CoordCheck {
                    name: name.clone(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
        per_param.push(ParamCheck {
            name,
            checked: coords.len(),
            max_rel_error: param_max,
        });
    }

    *params = analytic;
    let max_rel_error = worst.as_ref().map_or(0.0, |w| w.rel_error);
    Ok(CheckReport {
        max_rel_error,
        worst,
        per_param,
        checked,
        tol: cfg.tol,
        passed: max_rel_error <= cfg.tol,
    })
}

/// Central-difference gradient of `f` at `x`, independent of any backward pass.
pub fn numeric_gradient(x: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            work[i] = x[i] + eps;
            let p = f(&work);
            work[i] = x[i] - eps;
            let m = f(&work);
            work[i] = x[i];
            (p - m) / (2.0 * eps)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use alloc::vec;

    fn store(values: &[f64]) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("p", Tensor::new(vec![values.len()], values.to_vec()).unwrap());
        p
    }

    #[test]
    fn quadratic_is_exact() {
        let mut p = store(&[1.0, 2.0, 3.0]);
        let mut f = |p: &mut ParamStore, with_grad: bool| -> Result<f64> {
            let id = p.id("p")?;
            let v: Vec<f64> = p.value(id).data().to_vec();
            if with_grad {
                for (g, x) in p.grad_mut(id).data_mut().iter_mut().zip(&v) {
                    *g += 2.0 * x;
                }
            }
            Ok(v.iter().map(|x| x * x).sum())
        };
        let report = grad_check(&mut p, &mut f, &CheckConfig::default()).unwrap();
        assert!(report.passed);
        assert!(report.max_rel_error < 1e-9, "{}", report.max_rel_error);
        assert_eq!(p.grad(p.id("p").unwrap()).data(), &[2.0, 4.0, 6.0]);
        assert_eq!(p.value(p.id("p").unwrap()).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn constant_objective_has_zero_gradients() {
        let mut p = store(&[0.5, -0.5]);
        let mut f = |_: &mut ParamStore, _: bool| -> Result<f64> { Ok(7.0) };
        let report = grad_check(&mut p, &mut f, &CheckConfig::default()).unwrap();
        assert_eq!(report.max_rel_error, 0.0);
        let w = report.worst.unwrap();
        assert_eq!((w.analytic, w.numeric), (0.0, 0.0));
    }

    #[test]
    fn non_finite_objective_names_the_perturbation() {
        let mut p = store(&[0.0, 1.0]);
        let mut f = |p: &mut ParamStore, _: bool| -> Result<f64> {
            let v = p.value(p.id("p")?).data()[1];
            Ok(if v > 1.0 { f64::INFINITY } else { v })
        };
        match grad_check(&mut p, &mut f, &CheckConfig::default()) {
            Err(Error::Evaluation { context }) => assert!(context.contains("p[1]"), "{context}"),
            other => panic!("unexpected {other:?}"),
        }
        // values restored even on failure
        assert_eq!(p.value(p.id("p").unwrap()).data(), &[0.0, 1.0]);
    }

    #[test]
    fn wrong_gradient_fails() {
        let mut p = store(&[1.0]);
        let mut f = |p: &mut ParamStore, with_grad: bool| -> Result<f64> {
            let id = p.id("p")?;
            let x = p.value(id).data()[0];
            if with_grad {
                p.grad_mut(id).data_mut()[0] += 3.0 * x;
            }
            Ok(x * x)
        };
        let report = grad_check(&mut p, &mut f, &CheckConfig::default()).unwrap();
        assert!(!report.passed);
    }

    #[test]
    fn large_tensors_are_subsampled() {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::zeros(&[100]));
        let mut f = |_: &mut ParamStore, _: bool| -> Result<f64> { Ok(0.0) };
        let report = grad_check(&mut p, &mut f, &CheckConfig::default()).unwrap();
        assert_eq!(report.checked, 32);
    }
}
