use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hdekit::report::{Report, SweepReport};
use tempfile::TempDir;

fn hdekit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hdekit")).args(args).env_remove("HDEKIT_FD_STEP").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

/// Grouped 2x2 table: 100 per group, 25 successes at x2 = 0 and `r` at x2 = 1.
fn hd_csv(dir: &Path, r: u32) -> PathBuf {
    write(dir, &format!("hd{r}.csv"), &format!("x2,y,w\n0,0,75\n0,1,25\n1,0,{}\n1,1,{r}\n", 100 - r))
}

fn model_args<'a>(cmd: &'a str, input: &'a Path, format: &'a str) -> Vec<&'a str> {
    vec![
        cmd,
        "--input",
        input.to_str().unwrap(),
        "--family",
        "binomial",
        "--link",
        "logit",
        "--response",
        "y",
        "--covariates",
        "x2",
        "--weights",
        "w",
        "--format",
        format,
    ]
}

fn json_report(args: &[&str]) -> Report {
    let o = hdekit(args);
    assert!(o.status.success(), "{}", stderr(&o));
    serde_json::from_str(&stdout(&o)).unwrap()
}

#[test]
fn fit_reports_the_intercept() {
    let dir = TempDir::new().unwrap();
    let input = hd_csv(dir.path(), 92);
    let r = json_report(&model_args("fit", &input, "json"));
    assert_eq!(r.coefficients.len(), 2);
    assert!((r.coefficients[0].estimate + 1.099).abs() < 5e-4);
    assert_eq!(r.model.status, hdekit_core::vglm::FitStatus::Converged);
}

#[test]
fn json_round_trips() {
    let dir = TempDir::new().unwrap();
    let input = hd_csv(dir.path(), 97);
    let o = hdekit(&model_args("tests", &input, "json"));
    let text = stdout(&o);
    let r: Report = serde_json::from_str(&text).unwrap();
    assert_eq!(serde_json::to_string_pretty(&r).unwrap() + "\n", text);
    let again: Report = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
    assert_eq!(again, r);
}

#[test]
fn hde_severity_at_92() {
    let dir = TempDir::new().unwrap();
    let input = hd_csv(dir.path(), 92);
    let r = json_report(&model_args("hde", &input, "json"));
    let x2 = &r.hde[1];
    assert_eq!(x2.name, "x2");
    assert!(x2.hde);
    assert_eq!(x2.severity, hdekit_core::hde::Severity::Moderate);
}

#[test]
fn finite_differences_reproduce_analytic_flags() {
    let dir = TempDir::new().unwrap();
    for r in [5, 25, 60, 91, 92, 99] {
        let input = hd_csv(dir.path(), r);
        let an = json_report(&model_args("hde", &input, "json"));
        let mut args = model_args("hde", &input, "json");
        args.extend(["--method", "fd", "--fd-step", "0.005"]);
        let fd = json_report(&args);
        for (a, f) in an.hde.iter().zip(&fd.hde) {
            assert_eq!(a.hde, f.hde, "R = {r}, {}", a.name);
            assert_eq!(a.severity, f.severity, "R = {r}, {}", a.name);
        }
    }
}

#[test]
fn fd_step_from_environment() {
    let dir = TempDir::new().unwrap();
    let input = hd_csv(dir.path(), 50);
    let o = Command::new(env!("CARGO_BIN_EXE_hdekit"))
        .args(model_args("hde", &input, "json"))
        .env("HDEKIT_FD_STEP", "0.001")
        .output()
        .unwrap();
    let r: Report = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(r.model.fd_step, 0.001);
    assert_eq!(json_report(&model_args("hde", &input, "json")).model.fd_step, 0.005);
}

#[test]
fn tests_at_99_prefer_the_lrt() {
    let dir = TempDir::new().unwrap();
    let input = hd_csv(dir.path(), 99);
    let r = json_report(&model_args("tests", &input, "json"));
    let t = &r.tests[1];
    assert!(t.hde && t.lrt_tipping && t.score_tipping);
    assert!(t.wald_p > 1e6 * t.lrt_p.unwrap());
    assert!(t.recommendation.contains("LRT"));
    assert!(r.model.recommendation.as_deref().unwrap().contains("x2"));
    assert!(r.timing.is_none());
}

#[test]
fn tests_without_hde_trust_the_wald_table() {
    let dir = TempDir::new().unwrap();
    let input = hd_csv(dir.path(), 35);
    let r = json_report(&model_args("tests", &input, "json"));
    assert!(r.tests.iter().all(|t| !t.hde));
    assert_eq!(r.model.recommendation.as_deref(), Some("Wald table reliable"));
}

#[test]
fn timing_is_opt_in() {
    let dir = TempDir::new().unwrap();
    let input = hd_csv(dir.path(), 95);
    let mut args = model_args("tests", &input, "table");
    args.push("--timing");
    let o = hdekit(&args);
    assert!(o.status.success());
    assert!(stdout(&o).contains("timing (s): detection"));
    args[14] = "json";
    let r = json_report(&args);
    assert!(r.timing.unwrap().lrt > 0.0);
}

#[test]
fn csv_output_has_twelve_digits() {
    let dir = TempDir::new().unwrap();
    let input = hd_csv(dir.path(), 92);
    let o = hdekit(&model_args("fit", &input, "csv"));
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("name,estimate,se,wald,p_value"));
    let first = lines.next().unwrap();
    assert!(first.starts_with("(Intercept),-1.09861228867,"), "{first}");
    assert!(text.contains("\r\n"));
}

#[test]
fn normal_mean_coefficients_have_no_hde() {
    let dir = TempDir::new().unwrap();
    let mut body = "x2,y\n".to_string();
    for i in 0..40 {
        let x = f64::from(i) / 39.0;
        let noise = ((i * 37 % 11) as f64 - 5.0) / 5.0;
        body += &format!("{x},{}\n", 1.0 + 2.0 * x + noise);
    }
    let input = write(dir.path(), "normal.csv", &body);
    let r = json_report(&[
        "hde",
        "--input",
        input.to_str().unwrap(),
        "--family",
        "normal",
        "--link",
        "identity,log",
        "--response",
        "y",
        "--covariates",
        "x2",
        "--constraints",
        "x2:cols(1)",
        "--format",
        "json",
    ]);
    let means: Vec<_> = r.hde.iter().filter(|h| h.name.ends_with(":1") || h.name == "x2").collect();
    assert_eq!(means.len(), 2);
    for h in means {
        assert_eq!(h.severity, hdekit_core::hde::Severity::None, "{}", h.name);
    }
}

#[test]
fn parse_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let input = hd_csv(dir.path(), 50);
    let mut args = model_args("fit", &input, "table");
    args[10] = "x9";
    let o = hdekit(&args);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("'x9'"));

    let bad = write(dir.path(), "bad.csv", "x2,y,w\n0,0,75\n1,oops,3\n");
    let o = hdekit(&model_args("fit", &bad, "table"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));

    let mut args = model_args("fit", &input, "table");
    args[4] = "gamma";
    assert_eq!(hdekit(&args).status.code(), Some(2));

    let mut args = model_args("fit", &input, "table");
    args.extend(["--constraints", "x2:sideways"]);
    assert_eq!(hdekit(&args).status.code(), Some(2));

    assert_eq!(hdekit(&["sweep", "--scenario", "nope"]).status.code(), Some(2));
    assert_eq!(hdekit(&["fit"]).status.code(), Some(2));
}

#[test]
fn separation_warns_and_succeeds() {
    let dir = TempDir::new().unwrap();
    let input = write(dir.path(), "sep.csv", "x2,y,w\n0,0,10\n0,1,0\n1,0,0\n1,1,10\n");
    let r = json_report(&model_args("fit", &input, "json"));
    assert_eq!(r.model.status, hdekit_core::vglm::FitStatus::DivergedToBoundary);
    assert!(r.warnings.iter().any(|w| w.contains("boundary")));
}

#[test]
fn sweep_hd_partition() {
    let o = hdekit(&["sweep", "--scenario", "hd2x2", "--n", "100", "--r0", "25", "--format", "json"]);
    let r: SweepReport = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(r.rows.len(), 99);
    for (i, row) in r.rows.iter().enumerate() {
        assert_eq!(row.index, i);
        assert_eq!(row.grid, (i + 1) as f64);
    }
    let labels: Vec<String> = r.rows.iter().map(|x| x.severity.to_string()).collect();
    assert!(labels[25..40].iter().all(|l| l == "None"));
    assert!(labels[91..97].iter().all(|l| l == "Moderate"));
    assert_eq!(labels[97], "Strong");
    assert_eq!(labels[98], "Extreme");
}

#[test]
fn sweep_is_deterministic() {
    for sc in ["hd2x2", "qsep", "poisson2"] {
        let a = hdekit(&["sweep", "--scenario", sc, "--seed", "3"]);
        let b = hdekit(&["sweep", "--scenario", sc, "--seed", "3"]);
        assert!(a.status.success());
        assert_eq!(a.stdout, b.stdout, "{sc}");
    }
}

#[test]
fn sweep_qsep_and_poisson() {
    let o = hdekit(&["sweep", "--scenario", "qsep", "--n", "50", "--format", "json"]);
    let r: SweepReport = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(r.rows.len(), 24);
    assert!(r.rows.last().unwrap().hde);

    let o = hdekit(&["sweep", "--scenario", "poisson2", "--mu0", "20", "--n", "1", "--mu1-max", "20", "--format", "json"]);
    let r: SweepReport = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(r.rows.len(), 20);
    for row in &r.rows {
        let closed = hdekit_core::tables2x2::poisson_two_group(20.0, row.grid, 1.0).unwrap();
        assert_eq!(row.hde, closed.hde_flag, "mu1 = {}", row.grid);
    }
}
