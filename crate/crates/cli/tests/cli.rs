use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn srobust(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_srobust"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn rule_row(path: &Path) -> Vec<f64> {
    let text = fs::read_to_string(path).unwrap();
    let line = text.lines().nth(1).unwrap();
    line.split(',').skip(1).map(|v| v.parse().unwrap()).collect()
}

/// Small population from the bundled generator config.
fn population(dir: &Path) -> PathBuf {
    let out = dir.join("pop");
    let o = srobust(&[
        "--seed",
        "11",
        "generate",
        "--config",
        s(&scenario("generate_population.toml")),
        "--n-agents",
        "400",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

fn write_gamma_zero(src: &Path, dst: &Path) {
    let text = fs::read_to_string(src).unwrap();
    let mut lines = text.lines();
    let mut out = String::from(lines.next().unwrap());
    out.push('\n');
    for l in lines {
        let cut = l.rfind(',').unwrap();
        out += &format!("{},0\n", &l[..cut]);
    }
    fs::write(dst, out).unwrap();
}

#[test]
fn replay_reproduces_fit_and_sweep_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let pop = population(dir.path());
    let fit = dir.path().join("fit");
    let o = srobust(&[
        "--seed",
        "2",
        "fit",
        "--population",
        s(&pop.join("population.csv")),
        "--costs",
        s(&pop.join("costs.json")),
        "--estimator",
        "stable",
        "--out",
        s(&fit),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let again = dir.path().join("again");
    let o = srobust(&["replay", s(&fit.join("manifest.json")), "--out", s(&again)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["rule.csv", "fit_report.json", "manifest.json"] {
        assert_eq!(fs::read(fit.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }

    let sweep = dir.path().join("sweep");
    let o = srobust(&[
        "--seed",
        "4",
        "--threads",
        "2",
        "sweep",
        "--config",
        s(&scenario("figA1_alpha12.toml")),
        "--n-agents",
        "300",
        "--out",
        s(&sweep),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = srobust(&["--threads", "1", "replay", s(&sweep.join("manifest.json"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(sweep.join("sweep.csv")).unwrap();
    assert!(csv.starts_with("axis,value,estimator,coef_index,coef,loss_oos\n"));
}

#[test]
fn replay_flags_changed_inputs_and_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let pop = population(dir.path());
    let data = dir.path().join("data.csv");
    fs::copy(pop.join("population.csv"), &data).unwrap();
    let fit = dir.path().join("fit");
    let o = srobust(&[
        "--seed",
        "1",
        "fit",
        "--population",
        s(&data),
        "--costs",
        s(&pop.join("costs.json")),
        "--estimator",
        "ols",
        "--out",
        s(&fit),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let manifest = fit.join("manifest.json");
    let mut m = json(&manifest);
    m["outputs"][0]["sha256"] = Value::String("0".repeat(64));
    let tampered = dir.path().join("tampered.json");
    fs::write(&tampered, serde_json::to_string(&m).unwrap()).unwrap();
    let o = srobust(&["replay", s(&tampered)]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));

    fs::write(&data, fs::read_to_string(&data).unwrap() + "9999,1,0,0,0,1\n").unwrap();
    let o = srobust(&["replay", s(&manifest)]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("changed"), "{}", stderr(&o));
}

#[test]
fn missing_config_exits_2_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = srobust(&["--seed", "1", "simulate", "--config", "/nonexistent/table.toml", "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(!out.exists());
}

#[test]
fn missing_seed_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = srobust(&["simulate", "--config", s(&scenario("table1.toml")), "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--seed"));
    assert!(!out.exists());
}

#[test]
fn config_errors_name_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "title = \"x\"\nreplications = \"many\"\n").unwrap();
    let o = srobust(&["--seed", "1", "simulate", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn empty_sweep_grid_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(scenario("fig1_inverse_gaming.toml")).unwrap();
    let text: String = text
        .lines()
        .map(|l| if l.starts_with("grid") { "grid = []" } else { l })
        .collect::<Vec<_>>()
        .join("\n");
    let cfg = dir.path().join("empty.toml");
    fs::write(&cfg, text).unwrap();
    let out = dir.path().join("o");
    let o = srobust(&["--seed", "1", "sweep", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(!out.exists());
}

#[test]
fn simulate_single_seed_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = srobust(&[
            "--seed",
            "9",
            "simulate",
            "--config",
            s(&scenario("tableA2.toml")),
            "--seeds",
            "1",
            "--n-agents",
            "500",
            "--out",
            s(&out),
            "--format",
            "csv",
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert_eq!(o.stdout, fs::read(out.join("table.csv")).unwrap());
        out
    };
    let (a, b) = (run("a"), run("b"));
    for f in ["table.csv", "table.md", "table.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap());
    }
}

#[test]
fn stable_without_gaming_equals_ols() {
    let dir = tempfile::tempdir().unwrap();
    let pop = population(dir.path());
    let still = dir.path().join("still.csv");
    write_gamma_zero(&pop.join("population.csv"), &still);
    let fit = |est: &str| {
        let out = dir.path().join(est);
        let o = srobust(&[
            "--seed",
            "1",
            "fit",
            "--population",
            s(&still),
            "--costs",
            s(&pop.join("costs.json")),
            "--estimator",
            est,
            "--out",
            s(&out),
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        rule_row(&out.join("rule.csv"))
    };
    let (ols, stable) = (fit("ols"), fit("stable"));
    for (a, b) in ols.iter().zip(&stable) {
        assert!((a - b).abs() < 1e-6, "{ols:?} vs {stable:?}");
    }
}

#[test]
fn lasso_support_floor_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let pop = population(dir.path());
    let out = dir.path().join("lasso");
    let o = srobust(&[
        "--seed",
        "1",
        "fit",
        "--population",
        s(&pop.join("population.csv")),
        "--costs",
        s(&pop.join("costs.json")),
        "--estimator",
        "lasso",
        "--support",
        "2",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r = json(&out.join("fit_report.json"));
    let (l, cv, floor) = (
        r["lambda"].as_f64().unwrap(),
        r["lambda_cv"].as_f64().unwrap(),
        r["lambda_support"].as_f64().unwrap(),
    );
    assert_eq!(l, cv.max(floor));
    let nonzero = rule_row(&out.join("rule.csv"))[1..].iter().filter(|b| **b != 0.0).count();
    assert!(nonzero <= 2);
}

#[test]
fn rank_deficient_population_exits_3_naming_columns() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("pop.csv");
    let mut text = String::from("agent_id,y,x_1,dup,gamma\n");
    for i in 0..20 {
        let x = i as f64 * 0.1;
        text += &format!("{i},{},{x},{},1\n", 2.0 * x + 0.01 * (i % 3) as f64, 2.0 * x);
    }
    fs::write(&csv, text).unwrap();
    let costs = dir.path().join("costs.json");
    fs::write(&costs, r#"{"inv_cost": [[1.0, 0.0], [0.0, 1.0]]}"#).unwrap();
    let o = srobust(&[
        "--seed",
        "1",
        "fit",
        "--population",
        s(&csv),
        "--costs",
        s(&costs),
        "--estimator",
        "ols",
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("dup"), "{}", stderr(&o));
}

#[test]
fn constant_rule_scores_the_outcome_variance() {
    let dir = tempfile::tempdir().unwrap();
    let pop = population(dir.path());
    let text = fs::read_to_string(pop.join("population.csv")).unwrap();
    let y: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / y.len() as f64;
    let rule = dir.path().join("const.csv");
    fs::write(&rule, format!("name,beta0,beta_1,beta_2,beta_3\nconst,{mean:?},0,0,0\n")).unwrap();
    let out = dir.path().join("ev");
    let o = srobust(&[
        "evaluate",
        "--rule",
        s(&rule),
        "--population",
        s(&pop.join("population.csv")),
        "--costs",
        s(&pop.join("costs.json")),
        "--manipulated",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let loss = json(&out.join("metrics.json"))["rules"][0]["loss"].as_f64().unwrap();
    assert!((loss - var).abs() <= 1e-12 * var, "{loss} vs {var}");
}

#[test]
fn transparency_of_identical_rules_without_gaming_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let pop = population(dir.path());
    let still = dir.path().join("still.csv");
    write_gamma_zero(&pop.join("population.csv"), &still);
    let out = dir.path().join("ev");
    let rule = pop.join("true_rule.csv");
    let o = srobust(&[
        "evaluate",
        "--rule",
        s(&rule),
        "--population",
        s(&still),
        "--costs",
        s(&pop.join("costs.json")),
        "--transparency",
        s(&rule),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let t = &json(&out.join("metrics.json"))["transparency"];
    assert_eq!(t["predicted"].as_f64(), Some(0.0));
    assert_eq!(t["equilibrium"].as_f64(), Some(0.0));
}

#[test]
fn diagonal_restriction_and_default_phi_reach_the_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("panel.toml");
    fs::write(
        &cfg,
        "[panel]\nn_agents = 150\nn_weeks = 6\ninv_cost = [[0.5, 0.1], [0.1, 0.25]]\nomega = [0.3]\nnoise_sigma = 0.1\n",
    )
    .unwrap();
    let data = dir.path().join("data");
    let o = srobust(&["--seed", "3", "generate", "--config", s(&cfg), "--out", s(&data)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = dir.path().join("est");
    let o = srobust(&[
        "--seed",
        "3",
        "estimate-costs",
        "--panel",
        s(&data.join("panel.csv")),
        "--covariates",
        s(&data.join("covariates.csv")),
        "--lambda-offdiag",
        "inf",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let costs = json(&out.join("costs.json"));
    assert_eq!(costs["inv_cost"][0][1].as_f64(), Some(0.0));
    assert_eq!(costs["inv_cost"][1][0].as_f64(), Some(0.0));
    assert!(costs["inv_cost"][0][0].as_f64().unwrap() > 0.0);
    let m = json(&out.join("manifest.json"));
    assert_eq!(m["job"]["options"]["phi"].as_f64(), Some(0.005));
    assert_eq!(m["job"]["options"]["lambda_offdiag"].as_str(), Some("inf"));
    for f in ["bliss.csv", "week_effects.csv", "estimate.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
}
