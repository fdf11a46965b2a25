//! Optimizer behaviour, standard errors and parameter recovery.

use std::collections::BTreeMap;

use cglmm::estimation::{glm_fit, numerical_gradient, profile_loglik, relative_gradient};
use cglmm::model::bind;
use cglmm::*;

fn poisson_plan(groups: usize, beta: (f64, f64), a: f64, seed: u64) -> SimulationPlan {
    SimulationPlan {
        spec: ModelSpec::builder(Family::Poisson).intercept(true).unit_covariates(["x"]).build().unwrap(),
        params: BTreeMap::from([("(Intercept)".into(), beta.0), ("x".into(), beta.1), ("A".into(), a)]),
        groups,
        units: GroupSizes::Constant(4),
        unit_generators: vec![CovariateGenerator::normal("x")],
        group_generators: vec![],
        seed,
    }
}

fn bound_from(plan: &SimulationPlan) -> BoundModel {
    bind(&plan.spec, &simulate(plan).unwrap().data).unwrap()
}

#[test]
fn gradient_schemes_agree() {
    for (k, (family, unit_level)) in
        [(Family::Poisson, true), (Family::Gamma, true), (Family::Gaussian, true), (Family::Binomial, false)]
            .into_iter()
            .enumerate()
    {
        for seed in 0..10 {
            let plan = random_plan(family, unit_level, 40 + seed + 100 * k as u64).unwrap();
            let bound = bound_from(&plan);
            let natural = bound.layout().natural_from_map(&plan.params).unwrap();
            let w = bound.layout().pack(&natural).unwrap();
            let f = |w: &[f64]| -bound.loglik_free(w).unwrap_or(f64::NAN);
            let fw = f(&w);
            let fine = numerical_gradient(&f, &w, fw, 6e-6);
            let coarse = numerical_gradient(&f, &w, fw, 1e-4);
            for (a, b) in fine.iter().zip(&coarse) {
                assert!((a - b).abs() <= 1e-4 * a.abs().max(1.0), "{family} seed {seed}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn refit_from_optimum_does_not_drift() {
    let bound = bound_from(&poisson_plan(60, (0.4, -0.2), 3.0, 1));
    let first = fit(&bound, None, &FitOptions::default()).unwrap();
    let second = fit(&bound, Some(&first.natural), &FitOptions::default()).unwrap();
    for (a, b) in first.natural.iter().zip(&second.natural) {
        assert!((a - b).abs() < 1e-8, "{a} vs {b}");
    }
}

#[test]
fn group_order_does_not_matter() {
    let plan = poisson_plan(30, (0.4, -0.2), 3.0, 2);
    let data = simulate(&plan).unwrap().data;
    let mut reversed = GroupedDataset::new(data.columns().to_vec());
    for g in data.groups().iter().rev() {
        for (j, &y) in g.y.iter().enumerate() {
            reversed.push(&g.id, y, None, &g.covariates[j..j + 1]).unwrap();
        }
    }
    let a = fit(&bind(&plan.spec, &data).unwrap(), None, &FitOptions::default()).unwrap();
    let b = fit(&bind(&plan.spec, &reversed).unwrap(), None, &FitOptions::default()).unwrap();
    for (x, y) in a.natural.iter().zip(&b.natural) {
        assert!((x - y).abs() <= 1e-10, "{x} vs {y}");
    }
}

#[test]
fn huge_shape_reproduces_the_pooled_poisson_glm() {
    let plan = poisson_plan(100, (0.3, 0.5), 1e4, 3);
    let data = simulate(&plan).unwrap().data;
    let spec = ModelSpec::builder(Family::Poisson)
        .intercept(true)
        .unit_covariates(["x"])
        .fix("A", 1e6)
        .build()
        .unwrap();
    let bound = bind(&spec, &data).unwrap();
    let mixed = fit(&bound, None, &FitOptions::default()).unwrap();

    let mut design = Vec::new();
    let mut y = Vec::new();
    for g in data.groups() {
        for (j, &v) in g.y.iter().enumerate() {
            design.extend([1.0, g.covariates[j]]);
            y.push(v);
        }
    }
    let glm = glm_fit(Family::Poisson, &design, 2, &y, None).unwrap();
    assert!((mixed.estimate("(Intercept)").unwrap() - glm.coefficients[0]).abs() < 1e-3);
    assert!((mixed.estimate("x").unwrap() - glm.coefficients[1]).abs() < 1e-3);
}

#[test]
fn duplicated_column_flags_singular_information() {
    let plan = poisson_plan(40, (0.2, 0.3), 2.0, 4);
    let data = simulate(&plan).unwrap().data;
    let mut dup = GroupedDataset::new(vec!["x".into(), "x2".into()]);
    for g in data.groups() {
        for (j, &y) in g.y.iter().enumerate() {
            dup.push(&g.id, y, None, &[g.covariates[j], g.covariates[j]]).unwrap();
        }
    }
    let spec = ModelSpec::builder(Family::Poisson).intercept(true).unit_covariates(["x", "x2"]).build().unwrap();
    let result = fit(&bind(&spec, &dup).unwrap(), None, &FitOptions::default()).unwrap();
    assert!(!result.converged);
    assert!(result.std_error("x").is_none());
    assert!(result.warnings.iter().any(|w| w.contains("not positive definite")));
}

#[test]
fn profile_at_the_mle_equals_the_maximum() {
    let bound = bound_from(&poisson_plan(50, (0.5, -0.3), 4.0, 5));
    let best = fit(&bound, None, &FitOptions::default()).unwrap();
    let x_hat = best.estimate("x").unwrap();
    let curve = profile_loglik(&bound, "x", &[x_hat], &FitOptions::default()).unwrap();
    assert!((curve[0].loglik - best.loglik).abs() < 1e-7);
}

#[test]
fn profile_decreases_away_from_the_peak() {
    let bound = bound_from(&poisson_plan(80, (0.5, -0.3), 4.0, 6));
    let best = fit(&bound, None, &FitOptions::default()).unwrap();
    let a_hat = best.estimate("A").unwrap();
    let grid: Vec<f64> = (-6..=6).map(|k| a_hat * (1.0 + 0.1 * k as f64)).collect();
    let curve = profile_loglik(&bound, "A", &grid, &FitOptions::default()).unwrap();
    for w in curve[..7].windows(2) {
        assert!(w[1].loglik > w[0].loglik);
    }
    for w in curve[6..].windows(2) {
        assert!(w[1].loglik < w[0].loglik);
    }
}

#[test]
fn fixed_parameters_cannot_be_profiled() {
    let spec = ModelSpec::builder(Family::Poisson).intercept(true).unit_covariates(["x"]).fix("A", 2.0).build().unwrap();
    let data = simulate(&poisson_plan(5, (0.0, 0.0), 2.0, 7)).unwrap().data;
    let bound = bind(&spec, &data).unwrap();
    assert!(profile_loglik(&bound, "A", &[1.0], &FitOptions::default()).is_err());
}

#[test]
fn poisson_gamma_recovery() {
    let truth = [("(Intercept)", 0.5), ("x", -0.3), ("A", 4.0)];
    let mut covered = [0usize; 3];
    let mut errors: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
    let replicates = 50;
    for rep in 0..replicates {
        let bound = bound_from(&poisson_plan(200, (0.5, -0.3), 4.0, 10_000 + rep));
        let result = fit(&bound, None, &FitOptions::default()).unwrap();
        for (k, (name, value)) in truth.iter().enumerate() {
            let est = result.estimate(name).unwrap();
            let se = result.std_error(name).unwrap();
            if (est - value).abs() <= 3.0 * se {
                covered[k] += 1;
            }
            if k < 2 {
                errors[k].push((est - value).abs());
            }
        }
    }
    for (k, (name, _)) in truth.iter().enumerate() {
        assert!(covered[k] as f64 >= 0.9 * replicates as f64, "{name}: covered {}/{replicates}", covered[k]);
    }
    for e in &mut errors {
        e.sort_by(f64::total_cmp);
        assert!(e[e.len() / 2] < 0.1);
    }
}

#[test]
fn restarts_are_deterministic_and_no_worse() {
    let bound = bound_from(&poisson_plan(40, (0.5, -0.3), 4.0, 8));
    let single = fit(&bound, None, &FitOptions::default()).unwrap();
    let opts = FitOptions { restarts: 3, seed: 9, ..Default::default() };
    let a = fit(&bound, None, &opts).unwrap();
    let b = fit(&bound, None, &opts).unwrap();
    assert_eq!(a.natural, b.natural);
    assert!(a.loglik >= single.loglik - 1e-8);
}

#[test]
fn gamma_and_binomial_models_fit() {
    for (family, unit_level, seed) in [(Family::Gamma, true, 1), (Family::Binomial, false, 2), (Family::Gaussian, true, 3)] {
        let mut plan = random_plan(family, unit_level, seed).unwrap();
        plan.groups = 80;
        plan.units = GroupSizes::Constant(5);
        let bound = bound_from(&plan);
        let result = fit(&bound, None, &FitOptions::default()).unwrap();
        assert!(result.converged, "{family}: {:?}", result.warnings);
        let f = |w: &[f64]| -bound.loglik_free(w).unwrap_or(f64::NAN);
        let g = numerical_gradient(&f, &result.optimum, -result.loglik, 6e-6);
        assert!(relative_gradient(&g, &result.optimum, result.loglik) < 1e-7);
    }
}
