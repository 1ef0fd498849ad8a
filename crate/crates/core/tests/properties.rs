use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use particle_bridge::config::{parse_config, print_config};
use particle_bridge::dynamics::{
    step_fbsde, step_meanfield, step_meanfield_euler, FrozenFields, NoiseMode, System, TimeGrid,
};
use particle_bridge::ensemble::{empirical_moments, init_ensemble, Ensemble};
use particle_bridge::oracle::bb_quantile_interpolation;
use particle_bridge::points::Points;
use particle_bridge::potential::{accumulate_terminal, fit_potential, BasisConfig, PotentialModel, RbfBlock};
use particle_bridge::problem::{sample_dist, validate_spec, DistributionSpec, Gaussian, ProblemSpec};
use particle_bridge::score::{beta_field, estimate_score, BetaField, GaugeMode, ScoreMethod};

fn spd2() -> impl Strategy<Value = DMatrix<f64>> {
    (0.3f64..2.0, 0.3f64..2.0, -0.9f64..0.9).prop_map(|(a, b, rho)| {
        let c = rho * (a * b).sqrt();
        DMatrix::from_row_slice(2, 2, &[a, c, c, b])
    })
}

fn gaussian2() -> impl Strategy<Value = Gaussian> {
    (-2.0f64..2.0, -2.0f64..2.0, spd2()).prop_map(|(m0, m1, c)| Gaussian::new(DVector::from_vec(vec![m0, m1]), c))
}

fn distribution2() -> impl Strategy<Value = DistributionSpec> {
    prop_oneof![
        gaussian2().prop_map(DistributionSpec::Gaussian),
        (gaussian2(), gaussian2(), 0.05f64..0.95)
            .prop_map(|(a, b, w)| DistributionSpec::Mixture(vec![(w, a), (1.0 - w, b)])),
    ]
}

fn rbf_model() -> impl Strategy<Value = PotentialModel> {
    (
        prop::collection::vec(-1.5f64..1.5, 2),
        spd2(),
        prop::collection::vec(-2.0f64..2.0, 6),
        prop::collection::vec(-1.0f64..1.0, 3),
        0.5f64..1.5,
    )
        .prop_map(|(l, q, c, w, h)| {
            let mut m = PotentialModel::quadratic(DVector::from_vec(l), q);
            m.rbf.push(RbfBlock {
                centers: Points::from_flat(2, c),
                weights: w,
                bandwidth: h,
            });
            m
        })
}

fn point2() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.5f64..2.5, 2)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn validate_is_idempotent(pi0 in distribution2(), pi_t in distribution2(), s in spd2()) {
        let spec = ProblemSpec::new(pi0, pi_t, s, 1.0);
        let once = validate_spec(spec.clone()).unwrap();
        prop_assert_eq!(&once, &spec);
        prop_assert_eq!(validate_spec(once.clone()).unwrap(), once);
    }

    #[test]
    fn score_matches_log_density_differences(dist in distribution2(), x in point2()) {
        let (_, s) = dist.log_density_score(&x).unwrap();
        let eps = 1e-5;
        for i in 0..2 {
            let mut a = x.clone();
            let mut b = x.clone();
            a[i] += eps;
            b[i] -= eps;
            let fd = (dist.log_density_score(&a).unwrap().0 - dist.log_density_score(&b).unwrap().0) / (2.0 * eps);
            prop_assert!((fd - s[i]).abs() <= 1e-6, "{} vs {}", fd, s[i]);
        }
    }

    #[test]
    fn potential_derivatives_match_differences(model in rbf_model(), x in point2(), s in spd2()) {
        let e = model.eval(&x, &s);
        let eps = 1e-4;
        for i in 0..2 {
            let mut a = x.clone();
            let mut b = x.clone();
            a[i] += eps;
            b[i] -= eps;
            let fd = (model.value(&a) - model.value(&b)) / (2.0 * eps);
            prop_assert!((fd - e.grad[i]).abs() <= 1e-6, "grad {}: {} vs {}", i, fd, e.grad[i]);
            let (ea, eb) = (model.eval(&a, &s), model.eval(&b, &s));
            for j in 0..2 {
                let fd2 = (ea.grad[j] - eb.grad[j]) / (2.0 * eps);
                prop_assert!((fd2 - e.hess[i * 2 + j]).abs() <= 1e-4);
            }
            let trace = |h: &[f64]| (0..2).flat_map(|p| (0..2).map(move |q| (p, q))).map(|(p, q)| s[(p, q)] * h[p * 2 + q]).sum::<f64>();
            let fd3 = (trace(&ea.hess) - trace(&eb.hess)) / (2.0 * eps);
            prop_assert!((fd3 - e.grad_trace[i]).abs() <= 1e-5, "grad_trace {}: {} vs {}", i, fd3, e.grad_trace[i]);
        }
    }

    #[test]
    fn quadratic_truth_is_recovered(a in spd2(), l in prop::collection::vec(-1.0f64..1.0, 2), seed in 0u64..1000) {
        let states = sample_dist(&DistributionSpec::gaussian(&[0.0, 0.0], &[vec![1.0, 0.0], vec![0.0, 1.0]]), 200, seed);
        let truth = PotentialModel::quadratic(DVector::from_vec(l), a.clone());
        let mut p = Points::zeros(200, 2);
        for i in 0..200 {
            p.row_mut(i).copy_from_slice(&truth.grad(states.row(i)));
        }
        let r = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.5]);
        let fit = fit_potential(&states, &p, &BasisConfig::quadratic()).unwrap();
        for x in [[0.3, -1.0], [2.0, 1.0], [-1.5, 0.2]] {
            let u = &r * DVector::from_vec(fit.grad(&x));
            let v = &r * DVector::from_vec(truth.grad(&x));
            prop_assert!((u - v).amax() <= 1e-9);
        }
    }

    #[test]
    fn fit_is_a_local_minimum(seed in 0u64..1000, ridge in prop_oneof![Just(0.0), Just(1e-3)]) {
        let states = sample_dist(&DistributionSpec::gaussian(&[0.0, 0.0], &[vec![1.0, 0.3], vec![0.3, 1.0]]), 120, seed);
        let noise = sample_dist(&DistributionSpec::gaussian(&[0.0, 0.0], &[vec![1.0, 0.0], vec![0.0, 1.0]]), 120, seed + 1);
        let mut p = Points::zeros(120, 2);
        for i in 0..120 {
            let x = states.row(i);
            p.row_mut(i).copy_from_slice(&[x[0].sin() + 0.1 * noise.row(i)[0], x[0] * x[1] + 0.1 * noise.row(i)[1]]);
        }
        let basis = BasisConfig::quadratic_rbf(6, None, ridge);
        let fit = fit_potential(&states, &p, &basis).unwrap();
        let objective = |m: &PotentialModel| {
            let mut misfit = 0.0;
            for i in 0..120 {
                let g = m.grad(states.row(i));
                misfit += (g[0] - p.row(i)[0]).powi(2) + (g[1] - p.row(i)[1]).powi(2);
            }
            let q = &m.quadratic;
            let penalty = q[(0, 0)].powi(2) + q[(0, 1)].powi(2) + q[(1, 1)].powi(2)
                + m.linear.norm_squared()
                + m.rbf.iter().flat_map(|b| &b.weights).map(|w| w * w).sum::<f64>();
            misfit / 120.0 + ridge * penalty
        };
        let base = objective(&fit);
        let perturbed = |f: &dyn Fn(&mut PotentialModel)| {
            let mut m = fit.clone();
            f(&mut m);
            objective(&m)
        };
        for h in [1e-3, -1e-3] {
            let mut all: Vec<f64> = vec![
                perturbed(&|m| m.quadratic[(0, 0)] += h),
                perturbed(&|m| m.quadratic[(1, 1)] += h),
                perturbed(&|m| { m.quadratic[(0, 1)] += h; m.quadratic[(1, 0)] += h; }),
                perturbed(&|m| m.linear[0] += h),
                perturbed(&|m| m.linear[1] += h),
            ];
            for j in 0..6 {
                all.push(perturbed(&|m| m.rbf[0].weights[j] += h));
            }
            for v in all {
                prop_assert!(v >= base - 1e-12 * base.abs().max(1.0), "{} < {}", v, base);
            }
        }
    }

    #[test]
    fn ipf_increments_telescope(seed in 0u64..1000, k in 2usize..5) {
        let target = DistributionSpec::scalar(1.0, 0.5);
        let basis = BasisConfig::quadratic();
        let mut acc = PotentialModel::zero(1);
        let mut sum = PotentialModel::zero(1);
        for j in 0..k {
            let states = sample_dist(&DistributionSpec::scalar(0.3 * j as f64, 1.0 + 0.2 * j as f64), 300, seed + j as u64);
            let score = estimate_score(&states, ScoreMethod::Gaussian).unwrap();
            let (next, inc) = accumulate_terminal(&acc, &target, &score, 1.0, &states, &basis).unwrap();
            sum = sum.add_scaled(&inc, 1.0);
            acc = next;
        }
        prop_assert_eq!(acc, sum);
    }

    #[test]
    fn gaussian_score_averages_to_zero(dist in distribution2(), seed in 0u64..1000) {
        let states = sample_dist(&dist, 500, seed);
        let s = estimate_score(&states, ScoreMethod::Gaussian).unwrap();
        let mut acc = [0.0; 2];
        for x in states.rows() {
            let v = s.eval(x);
            acc[0] += v[0];
            acc[1] += v[1];
        }
        prop_assert!(acc[0].abs() / 500.0 <= 1e-10 && acc[1].abs() / 500.0 <= 1e-10);
    }

    #[test]
    fn natural_beta_cancels_weighted_score(dist in distribution2(), seed in 0u64..1000, s in spd2(), x in point2()) {
        let states = sample_dist(&dist, 200, seed);
        let score = Arc::new(estimate_score(&states, ScoreMethod::Gaussian).unwrap());
        let beta = beta_field(score.clone(), &s, GaugeMode::Natural);
        let b = DVector::from_vec(beta.eval(&x));
        let sx = &s * DVector::from_vec(score.eval(&x));
        prop_assert!((b + sx).amax() <= 1e-12);
        prop_assert!(beta_field(score, &s, GaugeMode::Zero).is_zero());
    }

    #[test]
    fn quantile_map_is_monotone(m0 in -2.0f64..2.0, m1 in -2.0f64..2.0, w in 0.1f64..0.9, t in 0.0f64..1.0) {
        let pi0 = DistributionSpec::Mixture(vec![(w, Gaussian::scalar(m0, 0.5)), (1.0 - w, Gaussian::scalar(m0 + 2.0, 1.0))]);
        let pi_t = DistributionSpec::scalar(m1, 2.0);
        let q = bb_quantile_interpolation(&pi0, &pi_t, t, 1.0).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for i in 1..1000 {
            let v = q.at_level(i as f64 / 1000.0);
            prop_assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn labels_survive_dynamics(seed in 0u64..1000, sigma in 0.0f64..1.0, steps in 1usize..6) {
        let spec = ProblemSpec::scalar(0.0, 1.0, 1.0, 1.0, sigma, 1.0);
        let sys = System::new(&spec);
        let ens0 = init_ensemble(&spec, 64, seed).unwrap();
        let psi = PotentialModel::quadratic(DVector::from_element(1, 0.3), DMatrix::from_element(1, 1, -0.4));
        let states = ens0.states.clone();
        let beta = beta_field(Arc::new(estimate_score(&states, ScoreMethod::Gaussian).unwrap()), &spec.sigma, GaugeMode::Natural);
        let grid = TimeGrid::new(1.0, steps).unwrap();
        let mut ens = ens0.clone();
        for k in 0..steps {
            ens = step_meanfield(&sys, &ens, &FrozenFields { potential: &psi, beta: &beta }, &grid, k).unwrap();
            ens = step_fbsde(&sys, &ens, &psi, grid.dt(), seed, k as u64, NoiseMode::Stratonovich).unwrap();
        }
        prop_assert_eq!(ens.labels(), ens0.labels());
    }

    #[test]
    fn noise_free_fbsde_is_euler(seed in 0u64..1000, a in -1.0f64..1.0, ito in any::<bool>()) {
        let spec = ProblemSpec::scalar(0.0, 1.0, 1.0, 1.0, 0.0, 1.0);
        let sys = System::new(&spec);
        let ens = init_ensemble(&spec, 50, seed).unwrap();
        let psi = PotentialModel::quadratic(DVector::from_element(1, 0.2), DMatrix::from_element(1, 1, a));
        let mode = if ito { NoiseMode::Ito } else { NoiseMode::Stratonovich };
        let s = step_fbsde(&sys, &ens, &psi, 0.01, seed, 0, mode).unwrap();
        let e = step_meanfield_euler(&sys, &ens, &psi, &BetaField::Zero, 0.01).unwrap();
        prop_assert_eq!(s.states, e.states);
        prop_assert_eq!(s.costates, e.costates);
    }

    #[test]
    fn sampling_is_reproducible(dist in distribution2(), seed in any::<u64>()) {
        let a = sample_dist(&dist, 300, seed);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| sample_dist(&dist, 300, seed));
        prop_assert_eq!(a, b);
    }

    #[test]
    fn config_print_round_trips(
        n in 2usize..5000,
        steps in 1usize..400,
        seed in 0u64..(i64::MAX as u64),
        sigma in 0.0f64..3.0,
        damping in 0.01f64..1.0,
        tol in 1e-9f64..1e-1,
        m in -5.0f64..5.0,
        v in 0.01f64..10.0,
        zero_gauge in any::<bool>(),
        kde in any::<bool>(),
    ) {
        let text = format!(
            "[problem]\nhorizon = 0.75\nsigma = {sigma:?}\npi0 = {{ mean = [{m:?}], cov = [[{v:?}]] }}\n\
             pi_t = {{ mean = [0.0], cov = [[1.0]] }}\n[solver]\nn_particles = {n}\nsteps = {steps}\nseed = {seed}\n\
             gauge = \"{}\"\nscore = \"{}\"\n[solver.ipf]\ndamping = {damping:?}\ntol_terminal = {tol:?}\n",
            if zero_gauge { "zero" } else { "natural" },
            if kde { "kde" } else { "gaussian" },
        );
        let c = parse_config(&text).unwrap();
        prop_assert_eq!(parse_config(&print_config(&c)).unwrap(), c);
    }
}

#[test]
fn weak_initial_condition() {
    let spec = ProblemSpec::new(
        DistributionSpec::gaussian(&[1.0, -0.5], &[vec![1.0, 0.4], vec![0.4, 2.0]]),
        DistributionSpec::gaussian(&[0.0, 0.0], &[vec![1.0, 0.0], vec![0.0, 1.0]]),
        DMatrix::identity(2, 2),
        1.0,
    );
    let n = 20_000;
    let ens: Ensemble = init_ensemble(&spec, n, 17).unwrap();
    let (m, c) = empirical_moments(&ens.states);
    let truth_c = [[1.0, 0.4], [0.4, 2.0]];
    let truth_m = [1.0, -0.5];
    for i in 0..2 {
        let se = (truth_c[i][i] / n as f64).sqrt();
        assert!((m[i] - truth_m[i]).abs() <= 4.0 * se);
        for j in 0..2 {
            let se = ((truth_c[i][i] * truth_c[j][j] + truth_c[i][j].powi(2)) / n as f64).sqrt();
            assert!((c[(i, j)] - truth_c[i][j]).abs() <= 4.0 * se, "cov {i}{j}");
        }
    }
    assert!(ens.costates.as_flat().iter().all(|v| *v == 0.0));
}
