//! Acceptance gate: every shipping criterion exercised end to end, one
//! pass/fail line per clause.
//!
//! Run with `cargo test -p proximed --test acceptance -- --nocapture` to see
//! the per-clause report (add `--test-threads=1` for stable ordering and
//! accurate per-criterion timings).

use std::time::Instant;

use proximed::bridge::{eval_h0, eval_h1, eval_q0, eval_q1, grad_params, BridgeKind, BridgePoint};
use proximed::data::FeatureMap;
use proximed::discrete::{random_binary_law, solve_bridges_discrete};
use proximed::estimate::{
    delta_pdr_point, fit_eta0, fit_pdr, fit_rct_q1, mr_summand, psi_estimate, FittedBridges,
    Method, Propensity, RctInputs, RctVariant,
};
use proximed::inference::{bootstrap_se, sandwich_theta, BootstrapConfig};
use proximed::sim::{generate, run_experiment, DgpConfig, ExperimentSpec, MonteCarloReport};
use proximed::{BridgeSpec, MediationDataset, Result};

/// Collects clause outcomes for one criterion, printing a line per clause
/// and panicking at the end if anything failed.
struct Gate {
    name: &'static str,
    started: Instant,
    failures: Vec<String>,
}

impl Gate {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            started: Instant::now(),
            failures: Vec::new(),
        }
    }

    fn check(&mut self, clause: &str, ok: bool) {
        println!(
            "{}: {} ... {}",
            self.name,
            clause,
            if ok { "PASS" } else { "FAIL" }
        );
        if !ok {
            self.failures.push(clause.to_string());
        }
    }

    fn finish(self) {
        let elapsed = self.started.elapsed().as_secs_f64();
        if self.failures.is_empty() {
            println!("{}: PASS ({elapsed:.1} s)", self.name);
        } else {
            println!(
                "{}: FAIL ({} clause(s), {elapsed:.1} s)",
                self.name,
                self.failures.len()
            );
            panic!("{} failed clauses: {:?}", self.name, self.failures);
        }
    }
}

/// Criterion 1: on 200 random binary laws with strong proxies, the three
/// identification formulas reproduce the brute-force mediation functional
/// to 1e-10.
#[test]
fn criterion_1_discrete_oracle_identity() {
    let mut gate = Gate::new("criterion 1 (discrete oracle identity)");
    let mut worst = 0.0f64;
    let mut failed_laws = 0;
    for seed in 0..200u64 {
        let law = random_binary_law(seed);
        let result = solve_bridges_discrete(&law).expect("strong law must solve");
        let dev = [result.psi_h, result.psi_hybrid, result.psi_q]
            .iter()
            .map(|p| (p - result.psi_true).abs())
            .fold(0.0f64, f64::max);
        worst = worst.max(dev);
        if dev > 1e-10 {
            failed_laws += 1;
        }
    }
    gate.check(
        &format!("200 laws, three formulas within 1e-10 (worst {worst:.2e})"),
        failed_laws == 0,
    );
    gate.finish();
}

/// Criterion 2: converged bridge fits on twenty baseline replicates have
/// averaged-moment sup-norms at 1e-8 or below, and analytic bridge
/// gradients match central finite differences to 1e-5 relative.
#[test]
fn criterion_2_moment_residuals_and_gradients() {
    let mut gate = Gate::new("criterion 2 (moment residuals, gradients)");
    let spec = BridgeSpec::identity(2);
    let features = FeatureMap::identity(2);
    let mut worst_residual = 0.0f64;
    let mut converged_fits = 0usize;
    let mut rootless = 0usize;
    for seed in 100..120u64 {
        let (data, _) = generate(&DgpConfig::baseline(), 2000, seed).unwrap();
        let bridges = FittedBridges::fit_all(&data, &spec).unwrap();
        for report in [
            bridges.beta1.as_ref().unwrap(),
            bridges.beta0.as_ref().unwrap(),
            bridges.gamma0.as_ref().unwrap(),
            bridges.gamma1.as_ref().unwrap(),
        ] {
            assert!(report.converged);
            worst_residual = worst_residual.max(report.residual_norm);
            converged_fits += 1;
        }
        for arm in [0u8, 1] {
            // An exactly identified nonlinear system can lack a root for a
            // given draw; such fits surface as solver errors and are out of
            // scope for the residual bound, which quantifies converged fits.
            match fit_pdr(&data, arm, &features) {
                Ok(pdr) => {
                    worst_residual = worst_residual
                        .max(pdr.outcome.residual_norm)
                        .max(pdr.treatment.residual_norm);
                    converged_fits += 2;
                }
                Err(_) => rootless += 1,
            }
        }
    }
    gate.check(
        &format!(
            "moment sup-norm <= 1e-8 on {converged_fits} converged fits over 20 seeds \
             (worst {worst_residual:.2e}; {rootless} solves reported no root)"
        ),
        worst_residual <= 1e-8,
    );

    let mut rng_state = 0x9e37_79b9u64;
    let mut next = move || {
        rng_state = rng_state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        ((rng_state >> 11) as f64 / (1u64 << 53) as f64) * 3.0 - 1.5
    };
    let h = 1e-6;
    let mut worst_rel = 0.0f64;
    for _ in 0..100 {
        let w = [next()];
        let z = [next()];
        let x = [next(), next()];
        let m = next();
        let point = BridgePoint {
            w: &w,
            z: &z,
            m,
            x: &x,
        };
        let beta1: Vec<f64> = (0..5).map(|_| next()).collect();
        let beta0: Vec<f64> = (0..4).map(|_| next()).collect();
        let gamma0: Vec<f64> = (0..4).map(|_| next()).collect();
        let gamma1: Vec<f64> = (0..5).map(|_| next()).collect();
        type Eval<'a> = Box<dyn Fn(&[f64]) -> f64 + 'a>;
        let cases: [(BridgeKind, &[f64], Eval); 4] = [
            (
                BridgeKind::H1,
                &beta1,
                Box::new(move |p| eval_h1(p, &w, m, &x).unwrap()),
            ),
            (
                BridgeKind::H0,
                &beta0,
                Box::new(move |p| eval_h0(p, &w, &x).unwrap()),
            ),
            (
                BridgeKind::Q0,
                &gamma0,
                Box::new(move |p| eval_q0(p, &z, &x).unwrap()),
            ),
            (
                BridgeKind::Q1,
                &gamma1,
                Box::new({
                    let gamma0 = gamma0.clone();
                    move |p| eval_q1(p, &gamma0, &z, m, &x).unwrap()
                }),
            ),
        ];
        for (kind, params, f) in cases {
            let analytic = grad_params(kind, params, Some(&gamma0), &point).unwrap();
            for (k, a) in analytic.iter().enumerate() {
                let mut up = params.to_vec();
                let mut dn = params.to_vec();
                up[k] += h;
                dn[k] -= h;
                let fd = (f(&up) - f(&dn)) / (2.0 * h);
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
                worst_rel = worst_rel.max(rel);
            }
        }
    }
    gate.check(
        &format!("gradients match finite differences to 1e-5 relative (worst {worst_rel:.2e})"),
        worst_rel < 1e-5,
    );
    gate.finish();
}

/// Criterion 3: one large replicate; every estimator lands within 0.05 of
/// its counterfactual target.
#[test]
fn criterion_3_large_sample_consistency() {
    let mut gate = Gate::new("criterion 3 (large-n consistency)");
    let (data, _) = generate(&DgpConfig::baseline(), 100_000, 12345).unwrap();
    let spec = BridgeSpec::identity(2);
    let bridges = FittedBridges::fit_all(&data, &spec).unwrap();
    let features = FeatureMap::identity(2);
    let pdr0 = fit_pdr(&data, 0, &features).unwrap();
    let delta0 = delta_pdr_point(&data, &pdr0);

    let mut points = Vec::new();
    for method in [Method::POr, Method::PHybrid, Method::PIpw, Method::PMr] {
        let psi = psi_estimate(&data, &bridges, method).unwrap().point;
        gate.check(
            &format!("psi {} = {psi:.4} within 0.05 of 4.05", method.label()),
            (psi - 4.05).abs() < 0.05,
        );
        points.push(psi);
    }
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            assert!(
                (points[i] - points[j]).abs() < 0.05,
                "estimators disagree: {points:?}"
            );
        }
    }
    gate.check(
        &format!("delta(0) = {delta0:.4} within 0.05 of 2.05"),
        (delta0 - 2.05).abs() < 0.05,
    );
    for method in [Method::POr, Method::PHybrid, Method::PIpw, Method::PMr] {
        let nde = psi_estimate(&data, &bridges, method).unwrap().point - delta0;
        gate.check(
            &format!("nde {} = {nde:.4} within 0.05 of 2.0", method.label()),
            (nde - 2.0).abs() < 0.05,
        );
    }
    gate.finish();
}

fn bias(report: &MonteCarloReport, method: Method) -> f64 {
    report.row(method).unwrap().bias
}

fn coverage(report: &MonteCarloReport, method: Method) -> f64 {
    report.row(method).unwrap().coverage
}

const PROXIMAL: [Method; 4] = [Method::PIpw, Method::PHybrid, Method::POr, Method::PMr];

/// Criterion 4: the first four experiments at desk scale (n = 2000,
/// 500 replicates each) reproduce the headline bias/coverage pattern.
#[test]
fn criterion_4_table_one_reproduction() {
    let mut gate = Gate::new("criterion 4 (experiments 1-4)");
    let run = |id: u8| run_experiment(&ExperimentSpec::new(id, 2000, 500, 1).unwrap()).unwrap();

    let e1 = run(1);
    for m in PROXIMAL {
        gate.check(
            &format!("exp 1 {} |bias| <= 0.03 ({:+.3})", m.label(), bias(&e1, m)),
            bias(&e1, m).abs() <= 0.03,
        );
        let cov = coverage(&e1, m);
        gate.check(
            &format!("exp 1 {} coverage in [0.92, 0.97] ({cov:.3})", m.label()),
            (0.92..=0.97).contains(&cov),
        );
    }
    let mr_len = e1.row(Method::PMr).unwrap().mean_ci_length;
    gate.check(
        &format!("exp 1 P-MR mean CI length in [0.45, 0.55] ({mr_len:.3})"),
        (0.45..=0.55).contains(&mr_len),
    );
    let ols_bias = bias(&e1, Method::Ols);
    gate.check(
        &format!("OLS benchmark bias in [0.45, 0.55] ({ols_bias:+.3})"),
        (0.45..=0.55).contains(&ols_bias),
    );
    let ols_cov = coverage(&e1, Method::Ols);
    gate.check(
        &format!("OLS benchmark coverage <= 0.40 ({ols_cov:.3})"),
        ols_cov <= 0.40,
    );

    let e2 = run(2);
    let b = bias(&e2, Method::PIpw);
    gate.check(
        &format!("exp 2 P-IPW bias in [0.13, 0.25] ({b:+.3})"),
        (0.13..=0.25).contains(&b),
    );
    let c = coverage(&e2, Method::PIpw);
    gate.check(&format!("exp 2 P-IPW coverage <= 0.78 ({c:.3})"), c <= 0.78);
    gate.check(
        &format!("exp 2 P-MR |bias| <= 0.03 ({:+.3})", bias(&e2, Method::PMr)),
        bias(&e2, Method::PMr).abs() <= 0.03,
    );
    let c = coverage(&e2, Method::PMr);
    gate.check(
        &format!("exp 2 P-MR coverage in [0.92, 0.97] ({c:.3})"),
        (0.92..=0.97).contains(&c),
    );

    let e3 = run(3);
    let b = bias(&e3, Method::POr);
    gate.check(
        &format!("exp 3 P-OR bias in [-0.22, -0.09] ({b:+.3})"),
        (-0.22..=-0.09).contains(&b),
    );
    let c = coverage(&e3, Method::POr);
    gate.check(&format!("exp 3 P-OR coverage <= 0.88 ({c:.3})"), c <= 0.88);
    gate.check(
        &format!("exp 3 P-MR |bias| <= 0.03 ({:+.3})", bias(&e3, Method::PMr)),
        bias(&e3, Method::PMr).abs() <= 0.03,
    );

    let e4 = run(4);
    let b = bias(&e4, Method::PHybrid);
    gate.check(
        &format!("exp 4 P-hybrid bias in [0.13, 0.26] ({b:+.3})"),
        (0.13..=0.26).contains(&b),
    );
    gate.check(
        &format!("exp 4 P-MR |bias| <= 0.03 ({:+.3})", bias(&e4, Method::PMr)),
        bias(&e4, Method::PMr).abs() <= 0.03,
    );
    gate.finish();
}

/// Criterion 5: qualitative reproduction of the no-confounding, exclusion
/// violation, and weak-proxy experiments (n = 2000, 300 replicates).
///
/// Two clauses are structurally unattainable under this build's pinned
/// estimating equations and are expected to print FAIL: with identical
/// covariate features the exactly identified moment fits force
/// `psi_MR == psi_IPW` in sample, so the strict MSE ordering between P-MR
/// and P-IPW cannot hold, and the weak-proxy median bias inherits the
/// weighting estimator's shift. The exclusion-violation bias window also
/// sits 0.01-0.02 below the value the printed mechanism actually generates.
#[test]
fn criterion_5_table_two_qualitative() {
    let mut gate = Gate::new("criterion 5 (experiments 5, 6, 8, 9)");
    let run = |id: u8| run_experiment(&ExperimentSpec::new(id, 2000, 300, 1).unwrap()).unwrap();

    let e5 = run(5);
    for m in PROXIMAL {
        gate.check(
            &format!("exp 5 {} |bias| <= 0.03 ({:+.3})", m.label(), bias(&e5, m)),
            bias(&e5, m).abs() <= 0.03,
        );
    }
    let ols_bias = bias(&e5, Method::Ols);
    gate.check(
        &format!("exp 5 OLS |bias| <= 0.03 ({ols_bias:+.3})"),
        ols_bias.abs() <= 0.03,
    );
    let ols_len = e5.row(Method::Ols).unwrap().mean_ci_length;
    for m in PROXIMAL {
        let len = e5.row(m).unwrap().mean_ci_length;
        gate.check(
            &format!(
                "exp 5 {} mean CI length {len:.3} exceeds OLS's {ols_len:.3}",
                m.label()
            ),
            len > ols_len,
        );
    }

    let e6 = run(6);
    for m in PROXIMAL {
        let b = bias(&e6, m);
        gate.check(
            &format!("exp 6 {} bias in [0.35, 0.45] ({b:+.3})", m.label()),
            (0.35..=0.45).contains(&b),
        );
        let c = coverage(&e6, m);
        gate.check(
            &format!("exp 6 {} coverage <= 0.10 ({c:.3})", m.label()),
            c <= 0.10,
        );
    }

    for (id, report) in [(8u8, run(8)), (9u8, run(9))] {
        let mse = |m: Method| report.row(m).unwrap().mse;
        // With shared feature maps psi_MR == psi_IPW in sample, so these two
        // MSEs are equal up to the 1e-9 moment-solve tolerance; the strict
        // comparison below is decided by that noise floor. The printed
        // difference makes the degeneracy visible.
        gate.check(
            &format!(
                "exp {id} P-MR MSE {:.3} < P-IPW MSE {:.3} (difference {:+.2e}; \
                 identical estimators under shared features)",
                mse(Method::PMr),
                mse(Method::PIpw),
                mse(Method::PMr) - mse(Method::PIpw),
            ),
            mse(Method::PMr) < mse(Method::PIpw),
        );
        gate.check(
            &format!(
                "exp {id} P-MR MSE {:.3} < P-hybrid MSE {:.3}",
                mse(Method::PMr),
                mse(Method::PHybrid)
            ),
            mse(Method::PMr) < mse(Method::PHybrid),
        );
        let weak_frac = report.weak_proxy_reps as f64 / report.reps as f64;
        gate.check(
            &format!("exp {id} weak-proxy warnings on >= 50% of reps ({weak_frac:.2})"),
            weak_frac >= 0.5,
        );
        let med = report.row(Method::PMr).unwrap().median_bias;
        gate.check(
            &format!("exp {id} P-MR |median bias| <= 0.08 ({med:+.3})"),
            med.abs() <= 0.08,
        );
    }
    gate.finish();
}

/// Criterion 6: exact algebraic identities on fixture datasets.
#[test]
fn criterion_6_robustness_collapse_identities() {
    let mut gate = Gate::new("criterion 6 (collapse and telescoping identities)");
    for seed in [5u64, 6] {
        let (data, _) = generate(&DgpConfig::baseline(), 700, seed).unwrap();
        let spec = BridgeSpec::identity(2);
        let bridges = FittedBridges::fit_all(&data, &spec).unwrap();
        let eval_h1 = bridges.beta1.as_ref().unwrap();
        let eval_h0 = bridges.beta0.as_ref().unwrap();
        let designs_h1: Vec<f64> = (0..data.n())
            .map(|i| {
                proximed::bridge::eval_h1(
                    &eval_h1.params,
                    &data.w_row(i),
                    data.m()[i],
                    &data.x_row(i),
                )
                .unwrap()
            })
            .collect();
        let designs_h0: Vec<f64> = (0..data.n())
            .map(|i| {
                proximed::bridge::eval_h0(&eval_h0.params, &data.w_row(i), &data.x_row(i)).unwrap()
            })
            .collect();
        let or_point = psi_estimate(&data, &bridges, Method::POr).unwrap().point;
        let collapsed = (0..data.n())
            .map(|i| {
                mr_summand(
                    data.y()[i],
                    data.a()[i],
                    designs_h1[i],
                    designs_h0[i],
                    0.0,
                    0.0,
                )
            })
            .sum::<f64>()
            / data.n() as f64;
        gate.check(
            &format!("seed {seed}: zeroed q-factors collapse P-MR onto P-OR exactly"),
            collapsed == or_point,
        );

        let features = FeatureMap::identity(2);
        let pdr0 = fit_pdr(&data, 0, &features).unwrap();
        let pdr1 = fit_pdr(&data, 1, &features).unwrap();
        for method in PROXIMAL {
            let parts = proximed::estimate::effects(&data, &bridges, &pdr0, &pdr1, method).unwrap();
            let exact = parts[0].point + parts[1].point == parts[2].point;
            gate.check(
                &format!(
                    "seed {seed}: {} NDE(0) + NIE(1) == total exactly",
                    method.label()
                ),
                exact,
            );
        }
    }
    gate.finish();
}

/// Criterion 7: randomized-trial double robustness at n = 100k; the MR
/// variant stays within 0.05 of the truth when either nuisance is corrupted.
#[test]
fn criterion_7_rct_double_robustness() {
    let mut gate = Gate::new("criterion 7 (trial double robustness)");
    let (data, _) = generate(&DgpConfig::randomized_trial(), 100_000, 777).unwrap();
    let spec = BridgeSpec::identity(2);
    let bridges = FittedBridges::fit_for(&data, &spec, &[Method::POr]).unwrap();
    let eta0 = fit_eta0(&data, &bridges).unwrap();
    let q1 = fit_rct_q1(&data, &FeatureMap::identity(2)).unwrap();
    let propensity = Propensity::Known(0.5);

    let inputs = RctInputs {
        bridges: &bridges,
        eta0: &eta0,
        q1: Some(&q1),
        propensity,
    };
    for variant in [RctVariant::Or, RctVariant::Ipw, RctVariant::Mr] {
        let psi = proximed::estimate::psi_rct(&data, &inputs, variant)
            .unwrap()
            .point;
        gate.check(
            &format!("{variant:?} = {psi:.4} within 0.05 of 4.05"),
            (psi - 4.05).abs() < 0.05,
        );
    }

    let mut q1_bad = q1.clone();
    for p in q1_bad.params.iter_mut() {
        *p += 0.5;
    }
    let corrupted_q = RctInputs {
        bridges: &bridges,
        eta0: &eta0,
        q1: Some(&q1_bad),
        propensity,
    };
    let psi = proximed::estimate::psi_rct(&data, &corrupted_q, RctVariant::Mr)
        .unwrap()
        .point;
    gate.check(
        &format!("MR with corrupted q1, correct h1 = {psi:.4} within 0.05 of 4.05"),
        (psi - 4.05).abs() < 0.05,
    );

    let mut bridges_bad = bridges.clone();
    for p in bridges_bad.beta1.as_mut().unwrap().params.iter_mut() {
        *p += 0.5;
    }
    let mut eta0_bad = eta0.clone();
    for p in eta0_bad.params.iter_mut() {
        *p += 0.5;
    }
    let corrupted_h = RctInputs {
        bridges: &bridges_bad,
        eta0: &eta0_bad,
        q1: Some(&q1),
        propensity,
    };
    let psi = proximed::estimate::psi_rct(&data, &corrupted_h, RctVariant::Mr)
        .unwrap()
        .point;
    gate.check(
        &format!("MR with corrupted h1/eta0, correct q1 = {psi:.4} within 0.05 of 4.05"),
        (psi - 4.05).abs() < 0.05,
    );
    gate.finish();
}

/// Criterion 8: sandwich and bootstrap standard errors agree within 15%
/// relative on one baseline dataset, and the bootstrap is bit-deterministic
/// for any worker count.
#[test]
fn criterion_8_inference_agreement() {
    let mut gate = Gate::new("criterion 8 (inference agreement)");
    let (data, _) = generate(&DgpConfig::baseline(), 2000, 42).unwrap();
    let spec = BridgeSpec::identity(2);
    let bridges = FittedBridges::fit_all(&data, &spec).unwrap();
    let features = FeatureMap::identity(2);
    let pdr0 = fit_pdr(&data, 0, &features).unwrap();
    let sandwich = sandwich_theta(&data, &bridges, &pdr0, Method::PMr).unwrap();

    let pipeline = |d: &MediationDataset| -> Result<f64> {
        let b = FittedBridges::fit_all(d, &BridgeSpec::identity(2))?;
        let p = fit_pdr(d, 0, &FeatureMap::identity(2))?;
        Ok(psi_estimate(d, &b, Method::PMr)?.point - delta_pdr_point(d, &p))
    };
    let cfg = BootstrapConfig::new(200, 99);
    let boot = bootstrap_se(&data, sandwich.point, &cfg, pipeline).unwrap();
    let rel = (sandwich.se - boot.se).abs() / boot.se;
    gate.check(
        &format!(
            "sandwich {:.4} vs bootstrap {:.4} within 15% relative ({:.1}%)",
            sandwich.se,
            boot.se,
            100.0 * rel
        ),
        rel < 0.15,
    );

    let one = proximed::par::with_threads(Some(1), || {
        bootstrap_se(&data, sandwich.point, &cfg, pipeline).unwrap()
    });
    let two = proximed::par::with_threads(Some(2), || {
        bootstrap_se(&data, sandwich.point, &cfg, pipeline).unwrap()
    });
    gate.check(
        "bootstrap bit-identical across worker counts",
        one.se.to_bits() == two.se.to_bits() && one.ci == two.ci && one.se == boot.se,
    );
    gate.finish();
}
