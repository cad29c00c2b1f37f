//! End-to-end checks of the binary: command output shapes, determinism,
//! and exit codes.

use std::path::PathBuf;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_proximed"))
}

fn tmp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("proximed_cli_{tag}_{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn simulate_writes_expected_shape_and_is_deterministic() {
    let dir = tmp_dir("simulate");
    let a = dir.join("a.csv");
    let b = dir.join("b.csv");
    for path in [&a, &b] {
        let out = run(&[
            "simulate",
            "--n",
            "200",
            "--seed",
            "7",
            "--out",
            path.to_str().unwrap(),
        ]);
        assert!(
            out.status.success(),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let text_a = std::fs::read_to_string(&a).unwrap();
    let text_b = std::fs::read_to_string(&b).unwrap();
    assert_eq!(text_a, text_b, "same flags must give identical files");
    let mut lines = text_a.lines();
    assert_eq!(lines.next().unwrap(), "y,a,m,x1,x2,z1,w1");
    assert_eq!(lines.count(), 200);

    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("a.meta.json")).unwrap()).unwrap();
    let psi_cf = meta["oracle_closed_form"]["psi"].as_f64().unwrap();
    assert!((psi_cf - 4.05).abs() < 1e-9);
    let psi_mc = meta["oracle_monte_carlo"]["psi"].as_f64().unwrap();
    let se = meta["oracle_monte_carlo"]["mc_se"][0].as_f64().unwrap();
    assert!(
        (psi_mc - 4.05).abs() < 4.0 * se,
        "{psi_mc} vs 4.05 (se {se})"
    );
}

#[test]
fn estimate_emits_psi_and_theta_rows_with_finite_se() {
    let dir = tmp_dir("estimate");
    let data = dir.join("d.csv");
    let out_json = dir.join("results.json");
    assert!(run(&[
        "simulate",
        "--n",
        "2000",
        "--seed",
        "7",
        "--out",
        data.to_str().unwrap(),
    ])
    .status
    .success());
    let out = run(&[
        "estimate",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out_json.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let results: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out_json).unwrap()).unwrap();
    let rows = results.as_array().unwrap();
    assert_eq!(rows.len(), 8, "psi + nde rows for the four methods");
    let theta_rows: Vec<&serde_json::Value> =
        rows.iter().filter(|r| r["estimand"] == "nde_0").collect();
    assert_eq!(theta_rows.len(), 4);
    for row in &theta_rows {
        let se = row["se"].as_f64().unwrap();
        assert!(se.is_finite() && se > 0.0);
    }
    // The P-MR direct effect should be near the generating truth of 2.0.
    let mr = theta_rows.iter().find(|r| r["method"] == "P-MR").unwrap();
    let point = mr["point"].as_f64().unwrap();
    let se = mr["se"].as_f64().unwrap();
    assert!((point - 2.0).abs() < 3.0 * se, "point {point} se {se}");
}

#[test]
fn estimate_with_single_method_prunes_gamma_fits() {
    let dir = tmp_dir("prune");
    let data = dir.join("d.csv");
    let out_json = dir.join("r.json");
    assert!(run(&[
        "simulate",
        "--n",
        "600",
        "--seed",
        "3",
        "--out",
        data.to_str().unwrap(),
    ])
    .status
    .success());
    let out = run(&[
        "estimate",
        "--data",
        data.to_str().unwrap(),
        "--methods",
        "P-OR",
        "--out",
        out_json.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let results: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out_json).unwrap()).unwrap();
    let solves: Vec<String> = results[0]["solves"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["name"].as_str().unwrap().to_string())
        .collect();
    assert!(solves.contains(&"beta1".to_string()));
    assert!(solves.contains(&"beta0".to_string()));
    assert!(!solves.iter().any(|n| n.starts_with("gamma")));
}

#[test]
fn experiment_emits_five_estimator_rows() {
    let dir = tmp_dir("experiment");
    let prefix = dir.join("exp1");
    let out = run(&[
        "experiment",
        "--id",
        "1",
        "--reps",
        "20",
        "--n",
        "400",
        "--seed",
        "1",
        "--out",
        prefix.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = std::fs::read_to_string(dir.join("exp1.csv")).unwrap();
    assert_eq!(
        csv.lines().count(),
        6,
        "header plus five estimators:\n{csv}"
    );
    for tag in ["P-IPW", "P-hybrid", "P-OR", "P-MR", "OLS"] {
        assert!(csv.contains(tag));
    }
    // The JSON report renders back through the report command.
    let rep = run(&["report", "--input", dir.join("exp1.json").to_str().unwrap()]);
    assert!(rep.status.success());
    assert!(stdout(&rep).contains("estimator"));
}

#[test]
fn oracle_random_laws_pass() {
    let out = run(&["oracle", "--laws", "25", "--seed", "1"]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(stdout(&out).contains("25 passed"), "{}", stdout(&out));
}

#[test]
fn oracle_fixture_reports_expected_completeness_failure() {
    let dir = tmp_dir("oracle");
    let fixture = dir.join("zind.json");
    let law = proximed::discrete::z_independent_law(7);
    std::fs::write(&fixture, law.to_json()).unwrap();
    let out = run(&["oracle", "--fixture", fixture.to_str().unwrap()]);
    assert!(out.status.success(), "expected-failure fixtures exit 0");
    let text = stdout(&out);
    assert!(text.contains("expected-failure"), "{text}");

    // Degenerate confounder: the lenient solutions match the standard
    // mediation formula printed alongside.
    let fixture2 = dir.join("degen.json");
    let law2 = proximed::discrete::degenerate_u_law(9);
    std::fs::write(&fixture2, law2.to_json()).unwrap();
    let out2 = run(&["oracle", "--fixture", fixture2.to_str().unwrap()]);
    assert!(out2.status.success());
    let text2 = stdout(&out2);
    assert!(text2.contains("standard mediation formula"), "{text2}");
}

#[test]
fn validation_errors_exit_with_code_2() {
    let dir = tmp_dir("exit2");
    let bad = dir.join("bad.csv");
    std::fs::write(&bad, "y,a,m,x1,z1,w1\n1.0,2,0.1,0.2,0.3,0.4\n").unwrap();
    let out = run(&["estimate", "--data", bad.to_str().unwrap()]);
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn solver_failures_exit_with_code_3() {
    let dir = tmp_dir("exit3");
    let data = dir.join("degenerate.csv");
    // Constant proxies make every cross-moment matrix singular.
    let mut text = String::from("y,a,m,x1,z1,w1\n");
    for i in 0..60 {
        text.push_str(&format!("{}.0,{},0.5,0.25,1.0,1.0\n", i % 7, i % 2));
    }
    std::fs::write(&data, text).unwrap();
    let out = run(&["estimate", "--data", data.to_str().unwrap()]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn schema_sidecar_is_accepted() {
    let dir = tmp_dir("schema");
    let data = dir.join("renamed.csv");
    std::fs::write(
        &data,
        "outcome,treat,mediator,cov1,proxy_t,proxy_o\n\
         1.0,0,0.5,0.1,0.2,0.3\n2.0,1,0.6,0.2,0.3,0.4\n\
         3.0,0,0.7,0.3,0.4,0.5\n4.0,1,0.8,0.4,0.5,0.6\n",
    )
    .unwrap();
    let schema = dir.join("schema.json");
    std::fs::write(
        &schema,
        r#"{"outcome":"outcome","treat":"treatment","mediator":"mediator",
           "cov1":"covariate","proxy_t":"treatment_proxy","proxy_o":"outcome_proxy"}"#,
    )
    .unwrap();
    // Too small to pass validation, but the schema must parse and map: the
    // failure should be a validation error (2), not a schema error message.
    let out = run(&[
        "estimate",
        "--data",
        data.to_str().unwrap(),
        "--schema",
        schema.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("validation"), "{err}");
}

#[test]
fn fit_writes_bridge_coefficients_json() {
    let dir = tmp_dir("fit");
    let data = dir.join("d.csv");
    assert!(run(&[
        "simulate",
        "--n",
        "1500",
        "--seed",
        "9",
        "--out",
        data.to_str().unwrap()
    ])
    .status
    .success());
    let out_json = dir.join("bridges.json");
    let out = run(&[
        "fit",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out_json.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out_json).unwrap()).unwrap();
    assert_eq!(parsed["params"]["beta1"].as_array().unwrap().len(), 5);
    assert_eq!(parsed["params"]["beta0"].as_array().unwrap().len(), 4);
    assert_eq!(parsed["params"]["gamma0"].as_array().unwrap().len(), 4);
    assert_eq!(parsed["params"]["gamma1"].as_array().unwrap().len(), 5);
    let reports = parsed["reports"].as_array().unwrap();
    assert_eq!(reports.len(), 4);
    for r in reports {
        assert!(r["report"]["converged"].as_bool().unwrap());
    }
}

#[test]
fn rct_mode_emits_three_psi_rows() {
    let dir = tmp_dir("rct");
    let data = dir.join("trial.csv");
    assert!(run(&[
        "simulate",
        "--n",
        "2000",
        "--seed",
        "11",
        "--rct",
        "--out",
        data.to_str().unwrap(),
    ])
    .status
    .success());
    let out_json = dir.join("r.json");
    let out = run(&[
        "estimate",
        "--data",
        data.to_str().unwrap(),
        "--rct",
        "--propensity",
        "known:0.5",
        "--out",
        out_json.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let results: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out_json).unwrap()).unwrap();
    let rows = results.as_array().unwrap();
    assert_eq!(rows.len(), 3);
    for row in rows {
        assert_eq!(row["estimand"], "psi_10");
        let point = row["point"].as_f64().unwrap();
        assert!((point - 4.05).abs() < 0.5, "{point}");
    }
}
