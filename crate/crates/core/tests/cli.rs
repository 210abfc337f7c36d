use std::path::Path;
use std::process::{Command, Output};

use eotmix::eot::min_over_pi_semi_relaxed_with_budget;
use eotmix::io::{read_dataset, read_model, write_model};
use eotmix::mixture::cost_matrix;
use eotmix::types::{GmmParams, ProbabilityVector};

fn eotmix(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eotmix"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

const ONE: &str = "schema_version = \"1\"
weights = [1.0]
means = [[0.5, -1.0]]
covariance = [[2.0, 0.3], [0.3, 1.0]]
";

const TWO: &str = "schema_version = \"1\"
weights = [0.3, 0.7]
means = [[-1.0], [1.5]]
covariance = [[0.8]]
";

fn setup(model: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("m.toml"), model).unwrap();
    dir
}

fn metric(stdout: &[u8], key: &str) -> f64 {
    let text = String::from_utf8_lossy(stdout);
    let line = text
        .lines()
        .find(|l| l.starts_with(key))
        .unwrap_or_else(|| panic!("{key} missing in {text}"));
    line.split('=').nth(1).unwrap().trim().parse().unwrap()
}

#[test]
fn sample_single_component_labels() {
    let dir = setup(ONE);
    let out = eotmix(
        dir.path(),
        &[
            "sample", "--model", "m.toml", "--n", "5", "--seed", "1", "--out", "d.csv",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let data = read_dataset(&dir.path().join("d.csv")).unwrap();
    assert_eq!(data.len(), 5);
    assert_eq!(data.labels(), Some(&[1, 1, 1, 1, 1][..]));
}

#[test]
fn sample_is_reproducible() {
    let dir = setup(TWO);
    for name in ["a.csv", "b.csv"] {
        let out = eotmix(
            dir.path(),
            &[
                "sample", "--model", "m.toml", "--n", "50", "--seed", "8", "--out", name,
            ],
        );
        assert_eq!(code(&out), 0);
    }
    let a = std::fs::read(dir.path().join("a.csv")).unwrap();
    let b = std::fs::read(dir.path().join("b.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn usage_errors_exit_2() {
    let dir = setup(TWO);
    let cases: [&[&str]; 5] = [
        &[
            "sample", "--model", "m.toml", "--n", "0", "--seed", "1", "--out", "d.csv",
        ],
        &["sample", "--model", "m.toml"],
        &["verify", "--trials", "0", "--out", "v.toml"],
        &["frobnicate"],
        &["fit", "--data", "d.csv", "--k", "2"],
    ];
    for args in cases {
        assert_eq!(code(&eotmix(dir.path(), args)), 2, "{args:?}");
    }
    assert!(!dir.path().join("d.csv").exists());
    assert!(!dir.path().join("v.toml").exists());

    eotmix(
        dir.path(),
        &[
            "sample", "--model", "m.toml", "--n", "3", "--seed", "1", "--out", "d.csv",
        ],
    );
    let out = eotmix(
        dir.path(),
        &[
            "fit",
            "--data",
            "d.csv",
            "--k",
            "4",
            "--seed",
            "0",
            "--out-model",
            "f.toml",
            "--out-report",
            "r.toml",
        ],
    );
    assert_eq!(code(&out), 2);
    assert!(!dir.path().join("f.toml").exists());
}

#[test]
fn runtime_errors_exit_3() {
    let dir = setup(&TWO.replace("schema_version = \"1\"", "schema_version = \"9\""));
    let out = eotmix(
        dir.path(),
        &[
            "sample", "--model", "m.toml", "--n", "3", "--seed", "1", "--out", "d.csv",
        ],
    );
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("schema_version"));
    let out = eotmix(
        dir.path(),
        &["eval", "--data", "missing.csv", "--model", "m.toml"],
    );
    assert_eq!(code(&out), 3);
}

#[test]
fn fit_single_component_converges_fast() {
    let dir = setup(ONE);
    eotmix(
        dir.path(),
        &[
            "sample", "--model", "m.toml", "--n", "40", "--seed", "2", "--out", "d.csv",
        ],
    );
    let out = eotmix(
        dir.path(),
        &[
            "fit",
            "--data",
            "d.csv",
            "--k",
            "1",
            "--seed",
            "0",
            "--out-model",
            "f.toml",
            "--out-report",
            "r.toml",
        ],
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report: toml::Table =
        toml::from_str(&std::fs::read_to_string(dir.path().join("r.toml")).unwrap()).unwrap();
    assert!(report["sweeps_used"].as_integer().unwrap() <= 2);
    assert_eq!(report["converged"].as_bool(), Some(true));

    // K = 1: the bound is an equality
    let out = eotmix(
        dir.path(),
        &["eval", "--data", "d.csv", "--model", "f.toml"],
    );
    assert_eq!(code(&out), 0);
    assert!(metric(&out.stdout, "bound_gap").abs() <= 1e-9);
}

#[test]
fn fit_is_reproducible() {
    let dir = setup(TWO);
    eotmix(
        dir.path(),
        &[
            "sample", "--model", "m.toml", "--n", "120", "--seed", "4", "--out", "d.csv",
        ],
    );
    for tag in ["a", "b"] {
        let model = format!("{tag}.toml");
        let report = format!("{tag}_report.toml");
        let out = eotmix(
            dir.path(),
            &[
                "fit",
                "--data",
                "d.csv",
                "--k",
                "2",
                "--seed",
                "6",
                "--tol",
                "1e-8",
                "--out-model",
                &model,
                "--out-report",
                &report,
            ],
        );
        assert_eq!(code(&out), 0);
    }
    for (a, b) in [("a.toml", "b.toml"), ("a_report.toml", "b_report.toml")] {
        assert_eq!(
            std::fs::read(dir.path().join(a)).unwrap(),
            std::fs::read(dir.path().join(b)).unwrap()
        );
    }
}

#[test]
fn eval_reports_identity_and_bound() {
    let dir = setup(TWO);
    eotmix(
        dir.path(),
        &[
            "sample", "--model", "m.toml", "--n", "60", "--seed", "3", "--out", "d.csv",
        ],
    );
    let out = eotmix(
        dir.path(),
        &["eval", "--data", "d.csv", "--model", "m.toml"],
    );
    assert_eq!(code(&out), 0);
    let nll = metric(&out.stdout, "nll_per_point");
    let semi = metric(&out.stdout, "semi_relaxed_value");
    assert!((nll - semi).abs() <= 1e-8 * nll.abs().max(1.0));
    assert!(metric(&out.stdout, "bound_gap") >= -1e-9);

    // weights at the fixed point: the column marginal of their own plan
    let params = read_model(&dir.path().join("m.toml")).unwrap();
    let data = read_dataset(&dir.path().join("d.csv")).unwrap();
    let c = cost_matrix(&params, &data).unwrap();
    let best =
        min_over_pi_semi_relaxed_with_budget(&c, &ProbabilityVector::uniform(2), 200_000).unwrap();
    assert!(best.solution.converged());
    let updated = GmmParams::new(
        params.means().to_vec(),
        params.covariance().clone(),
        best.weights,
    )
    .unwrap();
    write_model(&updated, &dir.path().join("u.toml")).unwrap();
    let out = eotmix(
        dir.path(),
        &["eval", "--data", "d.csv", "--model", "u.toml"],
    );
    assert_eq!(code(&out), 0);
    assert!(metric(&out.stdout, "bound_gap").abs() <= 1e-7);
}

#[test]
fn verify_writes_report_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a.toml", "b.toml"] {
        let out = eotmix(
            dir.path(),
            &["verify", "--seed", "3", "--trials", "2", "--out", name],
        );
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stdout));
    }
    let a = std::fs::read_to_string(dir.path().join("a.toml")).unwrap();
    assert_eq!(
        a,
        std::fs::read_to_string(dir.path().join("b.toml")).unwrap()
    );
    let table: toml::Table = toml::from_str(&a).unwrap();
    assert_eq!(table["all_passed"].as_bool(), Some(true));
    assert_eq!(table["seed"].as_integer(), Some(3));
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&eotmix(dir.path(), &["--help"])), 0);
}
