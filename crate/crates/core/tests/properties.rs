use std::collections::HashMap;

use cellvar::cell::log_marginal_likelihood;
use cellvar::dataset::{self, ingest_reader, normalize, truncate_pre_knee};
use cellvar::models::{self, evaluate, least_squares_fit};
use cellvar::population::log_population_posterior;
use cellvar::study::fit_stability;
use cellvar::{CapacityTrace, Dataset, GaussianSummary, IngestConfig, KneeParams, ModelSpec, Normalization, PopulationPrior};
use proptest::prelude::*;

fn raw_trace(id: usize, times: &[f64], caps: &[f64]) -> CapacityTrace {
    CapacityTrace::from_raw(format!("cell{id}"), times.to_vec(), caps.to_vec()).unwrap()
}

/// Raw datasets of 1-5 cells with strictly increasing times.
fn raw_dataset() -> impl Strategy<Value = Dataset> {
    prop::collection::vec(
        prop::collection::vec((0.5f64..20.0, 0.5f64..2.0), 5..15),
        1..6,
    )
    .prop_map(|cells| {
        let traces = cells
            .iter()
            .enumerate()
            .map(|(i, pts)| {
                let mut t = 0.0;
                let mut times = Vec::new();
                let mut caps = Vec::new();
                for (dt, c) in pts {
                    times.push(t);
                    caps.push(*c);
                    t += dt;
                }
                raw_trace(i, &times, &caps)
            })
            .collect();
        Dataset {
            name: "dataset".into(),
            traces,
            nominal_capacity: Some(1.1),
            time_unit: "efc".into(),
        }
    })
}

fn noisy_values(spec: ModelSpec, theta: &[f64], times: &[f64], noise: &[f64]) -> Vec<f64> {
    times
        .iter()
        .zip(noise.iter().cycle())
        .map(|(t, e)| evaluate(spec, theta, *t).unwrap() + e)
        .collect()
}

fn grid(n: usize, t_max: f64) -> Vec<f64> {
    (0..n).map(|i| t_max * i as f64 / (n - 1) as f64).collect()
}

fn summaries(mus: &[f64], vars: &[f64]) -> Vec<GaussianSummary> {
    mus.iter()
        .zip(vars)
        .map(|(m, v)| GaussianSummary { mu: vec![*m], var: vec![*v] })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalize_is_idempotent(data in raw_dataset()) {
        for mode in [Normalization::InitialCapacity, Normalization::NominalCapacity] {
            let once = normalize(&data, mode).unwrap();
            let twice = normalize(&once, mode).unwrap();
            prop_assert_eq!(&once, &twice);
        }
    }

    #[test]
    fn initial_normalization_ignores_trace_scale(data in raw_dataset(), scale in 0.01f64..100.0) {
        let mut scaled = data.clone();
        for c in &mut scaled.traces[0].capacities_ah {
            *c *= scale;
        }
        let a = normalize(&data, Normalization::InitialCapacity).unwrap();
        let b = normalize(&scaled, Normalization::InitialCapacity).unwrap();
        for (x, y) in a.traces[0].capacities_pct.iter().zip(&b.traces[0].capacities_pct) {
            prop_assert!((x - y).abs() <= 1e-12 * x.abs());
        }
    }

    #[test]
    fn csv_round_trip_is_identity(data in raw_dataset()) {
        let cfg = IngestConfig { min_points: 2, nominal_capacity: Some(1.1), ..Default::default() };
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        let first = ingest_reader(buf.as_slice(), &cfg).unwrap();
        prop_assert_eq!(&first, &data);
        let mut again = Vec::new();
        first.write_csv(&mut again).unwrap();
        prop_assert_eq!(buf, again);
    }

    #[test]
    fn truncation_only_removes_trailing_points(
        data in raw_dataset(),
        t_f in 0.0f64..300.0,
        tau in 0.1f64..50.0,
    ) {
        let knees: HashMap<String, KneeParams> = data
            .cell_ids()
            .into_iter()
            .map(|id| (id, KneeParams { t_f, tau }))
            .collect();
        if let Ok(cut) = truncate_pre_knee(&data, &knees, 2) {
            for trace in &cut.dataset.traces {
                let original = data.trace(&trace.cell_id).unwrap();
                prop_assert!(trace.n_points() <= original.n_points());
                prop_assert_eq!(&trace.times[..], &original.times[..trace.n_points()]);
                prop_assert_eq!(&trace.capacities_ah[..], &original.capacities_ah[..trace.n_points()]);
                prop_assert!(trace.last_time() <= t_f - 2.0 * tau);
            }
            prop_assert_eq!(cut.dataset.k() + cut.dropped.len(), data.k());
        }
    }

    #[test]
    fn linear1_is_linear2_at_full_capacity(c in -1.0f64..1.0, t in 0.0f64..5000.0) {
        prop_assert_eq!(
            evaluate(ModelSpec::Linear2, &[100.0, c], t).unwrap(),
            evaluate(ModelSpec::Linear1, &[c], t).unwrap()
        );
    }

    #[test]
    fn linexp_approaches_linear1_for_late_knee(
        c in -0.05f64..0.0,
        tau in 1.0f64..200.0,
        gap in 0.0f64..2000.0,
        frac in 0.0f64..1.0,
    ) {
        let t_max = 1000.0;
        let t_f = t_max + gap;
        let t = frac * t_max;
        let diff = (evaluate(ModelSpec::LinExp, &[c, t_f, tau], t).unwrap()
            - evaluate(ModelSpec::Linear1, &[c], t).unwrap()).abs();
        prop_assert!(diff <= ((t_max - t_f) / tau).exp() * (1.0 + 1e-12));
    }

    #[test]
    fn models_decrease_with_negative_slope(
        c in -0.1f64..-1e-4,
        b0 in 80.0f64..110.0,
        t_f in 100.0f64..2000.0,
        tau in 5.0f64..300.0,
    ) {
        let times = grid(60, 1500.0);
        for (spec, theta) in [
            (ModelSpec::Linear1, vec![c]),
            (ModelSpec::Linear2, vec![b0, c]),
            (ModelSpec::LinExp, vec![c, t_f, tau]),
        ] {
            let ys: Vec<f64> = times.iter().map(|t| evaluate(spec, &theta, *t).unwrap()).collect();
            prop_assert!(ys.windows(2).all(|w| w[1] < w[0]), "{} {:?}", spec, theta);
        }
    }

    #[test]
    fn least_squares_is_a_local_minimum(
        noise in prop::collection::vec(-0.3f64..0.3, 50),
        c in -0.02f64..-0.002,
        b0 in 95.0f64..101.0,
    ) {
        let times = grid(50, 1000.0);
        for (spec, theta) in [
            (ModelSpec::Linear1, vec![c]),
            (ModelSpec::Linear2, vec![b0, c]),
            (ModelSpec::LinExp, vec![c / 2.0, 800.0, 100.0]),
        ] {
            let values = noisy_values(spec, &theta, &times, &noise);
            let trace = CapacityTrace::from_percent("c", times.clone(), values, spec.required_normalization()).unwrap();
            let fit = least_squares_fit(spec, &trace).unwrap();
            if !fit.converged {
                continue;
            }
            let objective = |p: &[f64]| -> f64 {
                models::residuals(spec, p, &trace).unwrap().iter().map(|r| r * r).sum()
            };
            let best = objective(&fit.params);
            for d in 0..spec.param_count() {
                for sign in [-1.0, 1.0] {
                    let mut p = fit.params.to_vec();
                    p[d] *= 1.0 + sign * 1e-4;
                    prop_assert!(objective(&p) >= best * (1.0 - 1e-12), "{} dim {}", spec, d);
                }
            }
        }
    }

    #[test]
    fn linear2_likelihood_is_location_invariant(
        noise in prop::collection::vec(-0.3f64..0.3, 30),
        b0 in 95.0f64..101.0,
        c in -0.02f64..0.0,
        delta in -20.0f64..20.0,
    ) {
        let times = grid(30, 1000.0);
        let values = noisy_values(ModelSpec::Linear2, &[99.0, -0.01], &times, &noise);
        let shifted: Vec<f64> = values.iter().map(|v| v + delta).collect();
        let a = CapacityTrace::from_percent("c", times.clone(), values, Normalization::NominalCapacity).unwrap();
        let b = CapacityTrace::from_percent("c", times, shifted, Normalization::NominalCapacity).unwrap();
        let la = log_marginal_likelihood(ModelSpec::Linear2, &[b0, c], &a).unwrap();
        let lb = log_marginal_likelihood(ModelSpec::Linear2, &[b0 + delta, c], &b).unwrap();
        prop_assert!((la - lb).abs() <= 1e-8 * la.abs().max(1.0), "{} vs {}", la, lb);
    }

    #[test]
    fn linear1_likelihood_is_time_scale_covariant(
        noise in prop::collection::vec(-0.3f64..0.3, 30),
        c in -0.02f64..0.0,
        lambda in 0.01f64..100.0,
    ) {
        let times = grid(30, 1000.0);
        let values = noisy_values(ModelSpec::Linear1, &[-0.01], &times, &noise);
        let scaled: Vec<f64> = times.iter().map(|t| t * lambda).collect();
        let a = CapacityTrace::from_percent("c", times, values.clone(), Normalization::InitialCapacity).unwrap();
        let b = CapacityTrace::from_percent("c", scaled, values, Normalization::InitialCapacity).unwrap();
        let la = log_marginal_likelihood(ModelSpec::Linear1, &[c], &a).unwrap();
        let lb = log_marginal_likelihood(ModelSpec::Linear1, &[c / lambda], &b).unwrap();
        prop_assert!((la - lb).abs() <= 1e-8 * la.abs().max(1.0), "{} vs {}", la, lb);
    }

    #[test]
    fn population_posterior_is_permutation_invariant(
        cells in prop::collection::vec((-1.0f64..1.0, 1e-4f64..0.5), 3..30),
        mu_g in -1.0f64..1.0,
        frac in 0.01f64..1.0,
        rotate in 0usize..30,
    ) {
        let (mus, vars): (Vec<f64>, Vec<f64>) = cells.into_iter().unzip();
        let s = summaries(&mus, &vars);
        let prior = PopulationPrior::from_summaries(&s).unwrap();
        let sigma_g = frac * prior.sigma_upper[0];
        let mut permuted = s.clone();
        permuted.reverse();
        let len = permuted.len();
        permuted.rotate_left(rotate % len);
        let p2 = PopulationPrior::from_summaries(&permuted).unwrap();
        prop_assert_eq!(&prior, &p2);
        prop_assert_eq!(
            log_population_posterior(&[mu_g], &[sigma_g], &s, &prior).unwrap(),
            log_population_posterior(&[mu_g], &[sigma_g], &permuted, &prior).unwrap()
        );
    }

    #[test]
    fn cell_and_population_variances_are_additive(
        cells in prop::collection::vec((-1.0f64..1.0, 1e-4f64..0.5), 3..20),
        mu_g in -1.0f64..1.0,
        frac in 0.05f64..1.0,
        share in 0.0f64..0.99,
    ) {
        let (mus, vars): (Vec<f64>, Vec<f64>) = cells.into_iter().unzip();
        let s = summaries(&mus, &vars);
        let prior = PopulationPrior::from_summaries(&s).unwrap();
        let sigma_g = frac * prior.sigma_upper[0];
        let v = share * sigma_g * sigma_g;
        let moved: Vec<f64> = vars.iter().map(|x| x + v).collect();
        let a = log_population_posterior(&[mu_g], &[sigma_g], &s, &prior).unwrap();
        let b = log_population_posterior(&[mu_g], &[(sigma_g * sigma_g - v).sqrt()], &summaries(&mus, &moved), &prior).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{} vs {}", a, b);
    }

    #[test]
    fn required_n_is_monotone_in_alpha(
        wiggle in prop::collection::vec(0.7f64..1.6, 20),
        a1 in 0.01f64..0.5,
        extra in 0.0f64..0.5,
    ) {
        let sizes: Vec<usize> = (3..23).collect();
        let stds: Vec<f64> = sizes.iter().zip(&wiggle).map(|(n, w)| w * (-0.1 * *n as f64).exp()).collect();
        let lo = fit_stability(&sizes, &stds, a1, 0.5).unwrap();
        let hi = fit_stability(&sizes, &stds, (a1 + extra).min(0.99), 0.5).unwrap();
        let rank = |r: Option<usize>| r.unwrap_or(usize::MAX);
        prop_assert!(rank(hi.required_n) <= rank(lo.required_n));
    }
}

#[test]
fn write_then_ingest_preserves_nominal_normalization() {
    let data = Dataset {
        name: "dataset".into(),
        traces: vec![raw_trace(0, &[0.0, 1.0, 2.0], &[1.1, 1.0, 0.9])],
        nominal_capacity: Some(1.1),
        time_unit: "efc".into(),
    };
    let mut buf = Vec::new();
    data.write_csv(&mut buf).unwrap();
    let cfg = IngestConfig { min_points: 2, nominal_capacity: Some(1.1), ..Default::default() };
    let back = dataset::ingest_reader(buf.as_slice(), &cfg).unwrap();
    let a = normalize(&data, Normalization::NominalCapacity).unwrap();
    let b = normalize(&back, Normalization::NominalCapacity).unwrap();
    assert_eq!(a, b);
}
