//! Empirical capacity-fade models and least-squares initial fits.
//!
//! | model   | parameters        | curve                                   |
//! |---------|-------------------|-----------------------------------------|
//! | Linear1 | `c1`              | `100 + c1 t`                            |
//! | Linear2 | `B0, c2`          | `B0 + c2 t`                             |
//! | LinExp  | `c3, t_f, tau`    | `100 + c3 t - exp((t - t_f) / tau)`     |
//!
//! Capacities are in percent; Linear1 and LinExp expect traces normalized
//! to the initial capacity, Linear2 to the nominal capacity.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::dataset::{CapacityTrace, Normalization};
use crate::error::{Error, Result};

/// Exponents above this evaluate to `-inf` instead of overflowing.
pub const EXPONENT_GUARD: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelSpec {
    Linear1,
    Linear2,
    LinExp,
}

impl ModelSpec {
    pub const ALL: [ModelSpec; 3] = [ModelSpec::Linear1, ModelSpec::Linear2, ModelSpec::LinExp];

    pub fn param_count(self) -> usize {
        match self {
            ModelSpec::Linear1 => 1,
            ModelSpec::Linear2 => 2,
            ModelSpec::LinExp => 3,
        }
    }

    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            ModelSpec::Linear1 => &["c1"],
            ModelSpec::Linear2 => &["B0", "c2"],
            ModelSpec::LinExp => &["c3", "t_f", "tau"],
        }
    }

    pub fn required_normalization(self) -> Normalization {
        match self {
            ModelSpec::Linear1 | ModelSpec::LinExp => Normalization::InitialCapacity,
            ModelSpec::Linear2 => Normalization::NominalCapacity,
        }
    }

    /// Minimum trace length: parameters plus two degrees of freedom.
    pub fn min_points(self) -> usize {
        self.param_count() + 2
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelSpec::Linear1 => "linear1",
            ModelSpec::Linear2 => "linear2",
            ModelSpec::LinExp => "linexp",
        }
    }

    /// Whether `theta` lies in the model's parameter domain.
    pub fn is_valid(self, theta: &[f64]) -> bool {
        theta.len() == self.param_count()
            && theta.iter().all(|v| v.is_finite())
            && (self != ModelSpec::LinExp || theta[2] > 0.0)
    }

    /// Model value without domain checks. Callers ensure `is_valid`.
    #[inline]
    pub(crate) fn eval_unchecked(self, theta: &[f64], t: f64) -> f64 {
        match self {
            ModelSpec::Linear1 => 100.0 + theta[0] * t,
            ModelSpec::Linear2 => theta[0] + theta[1] * t,
            ModelSpec::LinExp => {
                let x = (t - theta[1]) / theta[2];
                if x > EXPONENT_GUARD {
                    f64::NEG_INFINITY
                } else {
                    100.0 + theta[0] * t - x.exp()
                }
            }
        }
    }

    /// Residual sum of squares of `values - f(theta, times)`; `+inf` outside
    /// the parameter domain.
    pub(crate) fn ssr(self, theta: &[f64], times: &[f64], values: &[f64]) -> f64 {
        if !self.is_valid(theta) {
            return f64::INFINITY;
        }
        let mut acc = 0.0;
        for (t, y) in times.iter().zip(values) {
            let r = y - self.eval_unchecked(theta, *t);
            acc += r * r;
        }
        if acc.is_nan() {
            f64::INFINITY
        } else {
            acc
        }
    }
}

impl std::fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ModelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "").as_str() {
            "linear1" => Ok(ModelSpec::Linear1),
            "linear2" => Ok(ModelSpec::Linear2),
            "linexp" => Ok(ModelSpec::LinExp),
            other => Err(Error::Config(format!(
                "unknown model `{other}` (expected linear1, linear2 or linexp)"
            ))),
        }
    }
}

/// Parameter values for one cell, ordered as [`ModelSpec::param_names`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(spec: ModelSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.param_count() {
            return Err(Error::Domain(format!(
                "{spec} takes {} parameters, got {}",
                spec.param_count(),
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("parameters must be finite".into()));
        }
        if spec == ModelSpec::LinExp && values[2] <= 0.0 {
            return Err(Error::Domain(format!("tau must be positive, got {}", values[2])));
        }
        Ok(ParamVector(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Evaluate a model at time `t`, in percent capacity.
pub fn evaluate(spec: ModelSpec, theta: &[f64], t: f64) -> Result<f64> {
    if theta.len() != spec.param_count() {
        return Err(Error::Domain(format!(
            "{spec} takes {} parameters, got {}",
            spec.param_count(),
            theta.len()
        )));
    }
    if spec == ModelSpec::LinExp && theta[2] <= 0.0 {
        return Err(Error::Domain(format!("tau must be positive, got {}", theta[2])));
    }
    Ok(spec.eval_unchecked(theta, t))
}

fn check_normalization(spec: ModelSpec, trace: &CapacityTrace) -> Result<()> {
    let expected = spec.required_normalization();
    if trace.normalization != Some(expected) {
        return Err(Error::NormalizationMismatch {
            expected,
            found: trace.normalization,
        });
    }
    Ok(())
}

/// `capacities_pct[i] - f(theta, times[i])` for every measurement.
pub fn residuals(spec: ModelSpec, theta: &[f64], trace: &CapacityTrace) -> Result<Vec<f64>> {
    check_normalization(spec, trace)?;
    trace
        .times
        .iter()
        .zip(&trace.capacities_pct)
        .map(|(t, y)| evaluate(spec, theta, *t).map(|f| y - f))
        .collect()
}

/// Outcome of [`least_squares_fit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LsqFit {
    pub params: ParamVector,
    pub ssr: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Approximate marginal standard deviations from `s^2 (J^T J)^-1`,
    /// absent when the normal matrix is singular.
    pub approx_std: Option<Vec<f64>>,
}

const LM_MAX_ITER: usize = 500;
const LM_GRAD_TOL: f64 = 1e-8;

/// Least-squares point estimate, used to start the samplers.
pub fn least_squares_fit(spec: ModelSpec, trace: &CapacityTrace) -> Result<LsqFit> {
    check_normalization(spec, trace)?;
    if trace.n_points() < spec.min_points() {
        return Err(Error::InsufficientData(format!(
            "cell `{}` has {} points; {spec} needs at least {}",
            trace.cell_id,
            trace.n_points(),
            spec.min_points()
        )));
    }
    let t = &trace.times;
    let y = &trace.capacities_pct;
    let n = t.len() as f64;
    match spec {
        ModelSpec::Linear1 => {
            let stt: f64 = t.iter().map(|t| t * t).sum();
            let sty: f64 = t.iter().zip(y).map(|(t, y)| t * (y - 100.0)).sum();
            let c = sty / stt;
            let ssr = spec.ssr(&[c], t, y);
            let s2 = ssr / (n - 1.0);
            Ok(LsqFit {
                params: ParamVector::new(spec, vec![c])?,
                ssr,
                converged: true,
                iterations: 0,
                approx_std: Some(vec![(s2 / stt).sqrt()]),
            })
        }
        ModelSpec::Linear2 => {
            let mt = t.iter().sum::<f64>() / n;
            let my = y.iter().sum::<f64>() / n;
            let sxx: f64 = t.iter().map(|t| (t - mt) * (t - mt)).sum();
            let sxy: f64 = t.iter().zip(y).map(|(t, y)| (t - mt) * (y - my)).sum();
            let slope = sxy / sxx;
            let intercept = my - slope * mt;
            let theta = vec![intercept, slope];
            let ssr = spec.ssr(&theta, t, y);
            let s2 = ssr / (n - 2.0);
            let st2: f64 = t.iter().map(|t| t * t).sum();
            Ok(LsqFit {
                params: ParamVector::new(spec, theta)?,
                ssr,
                converged: true,
                iterations: 0,
                approx_std: Some(vec![(s2 * st2 / (n * sxx)).sqrt(), (s2 / sxx).sqrt()]),
            })
        }
        ModelSpec::LinExp => Ok(fit_linexp(t, y)),
    }
}

/// Starting point for LinExp: slope of the first half of the record, onset
/// just past the data, time constant a tenth of the span.
fn linexp_start(t: &[f64], y: &[f64]) -> [f64; 3] {
    let half = (t.len() / 2).max(2);
    let (ts, ys) = (&t[..half], &y[..half]);
    let slope = crate::stats::linear_regression(ts, ys).map_or(0.0, |(a, _)| a);
    let span = t[t.len() - 1] - t[0];
    [slope, t[t.len() - 1] * 1.05, 0.1 * span]
}

/// Jacobian row of the LinExp curve with respect to (c3, t_f, tau).
fn linexp_jacobian_row(theta: &[f64; 3], t: f64) -> Vector3<f64> {
    let x = (t - theta[1]) / theta[2];
    let e = if x > EXPONENT_GUARD { f64::INFINITY } else { x.exp() };
    Vector3::new(t, e / theta[2], e * x / theta[2])
}

fn normal_equations(theta: &[f64; 3], t: &[f64], y: &[f64]) -> (Matrix3<f64>, Vector3<f64>) {
    let mut jtj = Matrix3::zeros();
    let mut jtr = Vector3::zeros();
    for (ti, yi) in t.iter().zip(y) {
        let j = linexp_jacobian_row(theta, *ti);
        let r = yi - ModelSpec::LinExp.eval_unchecked(theta, *ti);
        jtj += j * j.transpose();
        jtr += j * r;
    }
    (jtj, jtr)
}

fn fit_linexp(t: &[f64], y: &[f64]) -> LsqFit {
    let spec = ModelSpec::LinExp;
    let mut theta = linexp_start(t, y);
    let mut cost = spec.ssr(&theta, t, y);
    let mut lambda = 1e-3;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < LM_MAX_ITER {
        iterations += 1;
        let (jtj, jtr) = normal_equations(&theta, t, y);
        // gradient of the SSR is -2 J^T r
        let grad_norm = 2.0 * jtr.norm();
        if !grad_norm.is_finite() {
            break;
        }
        if grad_norm < LM_GRAD_TOL {
            converged = true;
            break;
        }
        let mut improved = false;
        while lambda < 1e20 {
            let mut damped = jtj;
            for i in 0..3 {
                damped[(i, i)] += lambda * jtj[(i, i)].max(1e-300);
            }
            let Some(step) = damped.lu().solve(&jtr) else {
                lambda *= 10.0;
                continue;
            };
            let cand = [theta[0] + step[0], theta[1] + step[1], theta[2] + step[2]];
            let cand_cost = spec.ssr(&cand, t, y);
            if cand_cost < cost {
                let rel = (cost - cand_cost) / cost.max(f64::MIN_POSITIVE);
                theta = cand;
                cost = cand_cost;
                lambda = (lambda / 10.0).max(1e-12);
                improved = true;
                if rel < 1e-15 {
                    // numerically stationary
                    lambda = 1e20;
                }
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            // no descent direction left at machine precision
            let (_, jtr) = normal_equations(&theta, t, y);
            let scaled: f64 = (0..3)
                .map(|i| (2.0 * jtr[i] * theta[i].abs().max(1.0)).powi(2))
                .sum::<f64>()
                .sqrt();
            converged = scaled < 1e-6 * cost.max(1e-12);
            break;
        }
    }

    let (jtj, _) = normal_equations(&theta, t, y);
    let s2 = cost / (t.len() as f64 - 3.0);
    let approx_std = jtj.try_inverse().and_then(|inv| {
        let v: Vec<f64> = (0..3).map(|i| (s2 * inv[(i, i)]).sqrt()).collect();
        v.iter().all(|x| x.is_finite() && *x > 0.0).then_some(v)
    });
    LsqFit {
        params: ParamVector(theta.to_vec()),
        ssr: cost,
        converged,
        iterations,
        approx_std,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(spec: ModelSpec, theta: &[f64], times: &[f64], noise: &[f64]) -> CapacityTrace {
        let vals = times
            .iter()
            .zip(noise.iter().chain(std::iter::repeat(&0.0)))
            .map(|(t, e)| evaluate(spec, theta, *t).unwrap() + e)
            .collect();
        CapacityTrace::from_percent("c", times.to_vec(), vals, spec.required_normalization()).unwrap()
    }

    fn grid(n: usize, t_max: f64) -> Vec<f64> {
        (0..n).map(|i| t_max * i as f64 / (n - 1) as f64).collect()
    }

    #[test]
    fn evaluate_examples() {
        assert_eq!(evaluate(ModelSpec::Linear1, &[0.0], 500.0).unwrap(), 100.0);
        let v = evaluate(ModelSpec::LinExp, &[-0.003, 700.0, 40.0], 700.0).unwrap();
        assert!((v - (100.0 - 0.003 * 700.0 - 1.0)).abs() < 1e-12);
        let v = evaluate(ModelSpec::Linear2, &[99.7, -0.005], 1000.0).unwrap();
        assert!((v - 94.7).abs() < 1e-12);
    }

    #[test]
    fn evaluate_domain_and_overflow() {
        assert!(matches!(
            evaluate(ModelSpec::LinExp, &[0.0, 10.0, 0.0], 1.0),
            Err(Error::Domain(_))
        ));
        let v = evaluate(ModelSpec::LinExp, &[0.0, 0.0, 1.0], 800.0).unwrap();
        assert_eq!(v, f64::NEG_INFINITY);
        assert!(evaluate(ModelSpec::Linear2, &[1.0], 0.0).is_err());
    }

    #[test]
    fn residuals_of_exact_and_perturbed_model() {
        let times = grid(20, 1000.0);
        let tr = trace(ModelSpec::Linear1, &[-0.01], &times, &[]);
        let r = residuals(ModelSpec::Linear1, &[-0.01], &tr).unwrap();
        assert!(r.iter().all(|x| x.abs() < 1e-12));
        let delta = 1e-4;
        let r = residuals(ModelSpec::Linear1, &[-0.01 + delta], &tr).unwrap();
        for (ri, t) in r.iter().zip(&times) {
            assert!((ri + delta * t).abs() < 1e-9);
        }
    }

    #[test]
    fn residuals_recover_added_noise() {
        let times = grid(30, 1000.0);
        let noise: Vec<f64> = (0..30).map(|i| 0.1 * ((i * 7919) % 13) as f64 / 13.0 - 0.05).collect();
        let theta = [-0.005, 800.0, 100.0];
        let tr = trace(ModelSpec::LinExp, &theta, &times, &noise);
        let r = residuals(ModelSpec::LinExp, &theta, &tr).unwrap();
        for (a, b) in r.iter().zip(&noise) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn residuals_reject_wrong_normalization() {
        let tr = trace(ModelSpec::Linear2, &[100.0, -0.01], &grid(5, 10.0), &[]);
        assert!(matches!(
            residuals(ModelSpec::Linear1, &[-0.01], &tr),
            Err(Error::NormalizationMismatch { .. })
        ));
    }

    #[test]
    fn ols_recovers_linear_models() {
        let times = grid(25, 1000.0);
        let tr = trace(ModelSpec::Linear1, &[-0.0123], &times, &[]);
        let fit = least_squares_fit(ModelSpec::Linear1, &tr).unwrap();
        assert!(((fit.params[0] + 0.0123) / 0.0123).abs() < 1e-10);

        let tr = trace(ModelSpec::Linear2, &[98.0, -0.02], &times, &[]);
        let fit = least_squares_fit(ModelSpec::Linear2, &tr).unwrap();
        assert!((fit.params[0] - 98.0).abs() < 1e-10 * 98.0);
        assert!(((fit.params[1] + 0.02) / 0.02).abs() < 1e-10);
    }

    #[test]
    fn lm_recovers_noiseless_linexp() {
        let times = grid(50, 1000.0);
        let truth = [-0.005, 800.0, 100.0];
        let tr = trace(ModelSpec::LinExp, &truth, &times, &[]);
        let fit = least_squares_fit(ModelSpec::LinExp, &tr).unwrap();
        assert!(fit.converged, "{fit:?}");
        for (a, b) in fit.params.iter().zip(&truth) {
            assert!(((a - b) / b).abs() < 1e-4, "{:?}", fit.params);
        }
    }

    #[test]
    fn too_short_trace_is_rejected() {
        let tr = trace(ModelSpec::LinExp, &[-0.005, 800.0, 100.0], &grid(4, 1000.0), &[]);
        assert!(matches!(
            least_squares_fit(ModelSpec::LinExp, &tr),
            Err(Error::InsufficientData(_))
        ));
    }
}
