use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use smnreg::io::write_matrix_csv;
use smnreg::{model, DMatrix, NIWPrior};

fn smnreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smnreg")).args(args).output().expect("binary runs")
}

fn run(sub: &str, config: &Path, extra: &[&str]) -> Output {
    let mut args = vec![sub, "--config", config.to_str().unwrap()];
    args.extend_from_slice(extra);
    smnreg(&args)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

const SIMULATE: &str = r#"
[mixing]
family = "student_t"
nu = 4.0

[simulate]
n = 50
intercept = true
beta = [[1.0, -1.0], [0.5, 0.0], [0.0, 2.0]]
sigma = [[1.0, 0.3], [0.3, 0.5]]

[output]
dir = "data"
"#;

fn simulated(dir: &Path) {
    let cfg = write(dir, "sim.toml", SIMULATE);
    let o = run("simulate", &cfg, &["--seed", "11"]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn simulate_then_fit_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    simulated(dir.path());
    for f in ["X.csv", "Y.csv", "truth.json"] {
        assert!(dir.path().join("data").join(f).is_file());
    }
    let cfg = write(
        dir.path(),
        "fit.toml",
        r#"
[data]
x = "data/X.csv"
y = "data/Y.csv"

[model]
kind = "proper"
prior = "default"

[mixing]
family = "student_t"
nu = 4.0

[sampler]
iters = 1500
burnin = 500
thin = 2
chains = 2
seed = 5

[output]
emit_u = true
"#,
    );
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = run("fit", &cfg, &["--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains("geometric ergodicity"));
    }
    let files = ["chain_0.csv", "chain_1.csv", "chain_0.meta.json", "chain_1.meta.json", "summary.json", "summary.txt", "check.json"];
    for f in files {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let header = std::fs::read_to_string(a.join("chain_0.csv")).unwrap();
    let header = header.lines().next().unwrap();
    assert!(header.starts_with("beta_1_1,beta_1_2,"));
    assert!(header.ends_with("u_50"));
    assert_eq!(std::fs::read_to_string(a.join("chain_0.csv")).unwrap().lines().count(), 1 + 500);

    let c = dir.path().join("c");
    let o = run("fit", &cfg, &["--out", c.to_str().unwrap(), "--seed", "6"]);
    assert!(o.status.success());
    assert_ne!(std::fs::read(a.join("chain_0.csv")).unwrap(), std::fs::read(c.join("chain_0.csv")).unwrap());
}

#[test]
fn point_mass_fit_matches_conjugate_posterior() {
    let dir = tempfile::tempdir().unwrap();
    simulated(dir.path());
    let cfg = write(
        dir.path(),
        "fit.toml",
        r#"
[data]
x = "data/X.csv"
y = "data/Y.csv"

[model]
kind = "proper"

[mixing]
family = "point_mass"
u0 = 1.0

[sampler]
iters = 10500
burnin = 500
chains = 1
seed = 9
"#,
    );
    let out = dir.path().join("out");
    let o = run("fit", &cfg, &["--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let data = smnreg::Dataset::from_csv(dir.path().join("data/X.csv"), dir.path().join("data/Y.csv")).unwrap();
    let prior = NIWPrior::weakly_informative(3, 2);
    // E[Σ⁻¹ | Y] = (n + ν) Ψ⁻¹ at u = 1
    let psi = model::compute_update(&smnreg::DVector::from_element(50, 1.0), &data, &prior).unwrap().psi;
    let target = psi.try_inverse().unwrap() * (50.0 + prior.nu());
    let rows = summary["rows"].as_array().unwrap();
    for (r, c) in [(0, 0), (0, 1), (1, 1)] {
        let name = format!("sigma_inv_{}_{}", r + 1, c + 1);
        let row = rows.iter().find(|x| x["name"] == name.as_str()).unwrap_or_else(|| panic!("{name} missing"));
        let (mean, mcse) = (row["mean"].as_f64().unwrap(), row["mcse"].as_f64().unwrap());
        assert!((mean - target[(r, c)]).abs() <= 4.0 * mcse, "{name}: {mean} vs {} (se {mcse})", target[(r, c)]);
    }
}

#[test]
fn improper_fit_refuses_too_few_observations() {
    let dir = tempfile::tempdir().unwrap();
    let x = DMatrix::from_row_slice(3, 2, &[1.0, 0.2, 1.0, -0.4, 1.0, 1.3]);
    let y = DMatrix::from_row_slice(3, 2, &[0.1, 1.0, 0.7, -0.2, 1.1, 0.3]);
    write_matrix_csv(dir.path().join("X.csv"), &x, None).unwrap();
    write_matrix_csv(dir.path().join("Y.csv"), &y, None).unwrap();
    let cfg = write(dir.path(), "fit.toml", "[data]\nx = \"X.csv\"\ny = \"Y.csv\"\n[model]\nkind = \"improper_t\"\nnu_t = 3.0\n");
    let o = run("fit", &cfg, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("n ≥ p + d"), "{}", stderr(&o));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn improper_model_rejects_prior_section() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", "[model]\nkind = \"improper_t\"\nnu_t = 3.0\nprior = \"default\"\n");
    let o = run("check", &cfg, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("remove `prior`"));
}

#[test]
fn check_two_cluster_example() {
    let dir = tempfile::tempdir().unwrap();
    let mut x = vec![1.0; 6];
    x.extend([0.0; 6]);
    let mut y = vec![0.0; 6];
    y.extend([1.0; 6]);
    write_matrix_csv(dir.path().join("X.csv"), &DMatrix::from_column_slice(12, 1, &x), None).unwrap();
    write_matrix_csv(dir.path().join("Y.csv"), &DMatrix::from_column_slice(12, 1, &y), None).unwrap();
    let cfg = write(dir.path(), "c.toml", "[data]\nx = \"X.csv\"\ny = \"Y.csv\"\n[model]\nkind = \"improper_t\"\nnu_t = 10.0\n");
    let o = run("check", &cfg, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("geometric ergodicity condition: holds"), "{text}");
    assert!(text.contains("largest feasible epsilon = 1.45454545"), "{text}");
    assert!(text.contains("legacy condition n < nu_t + p - 2 (12 < 9): fails"), "{text}");
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("out/check.json")).unwrap()).unwrap();
    assert_eq!(json["model"], "improper_t");
    assert_eq!(json["condition"]["legacy_condition_holds"], false);

    let cfg = write(dir.path(), "c2.toml", "[data]\nx = \"X.csv\"\ny = \"Y.csv\"\n[model]\nkind = \"improper_t\"\nnu_t = 2.0\n");
    let o = run("check", &cfg, &[]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn check_proper_reports_rank_deficient_design() {
    let dir = tempfile::tempdir().unwrap();
    let x = DMatrix::from_fn(10, 3, |i, j| if j == 2 { 2.0 * i as f64 } else if j == 1 { i as f64 } else { 1.0 });
    let y = DMatrix::from_fn(10, 2, |i, j| ((i * 7 + j * 3) % 5) as f64);
    write_matrix_csv(dir.path().join("X.csv"), &x, None).unwrap();
    write_matrix_csv(dir.path().join("Y.csv"), &y, None).unwrap();
    let cfg = write(
        dir.path(),
        "c.toml",
        "[data]\nx = \"X.csv\"\ny = \"Y.csv\"\n[model]\nkind = \"proper\"\n[mixing]\nfamily = \"gamma\"\nshape = 0.1\nrate = 0.1\n",
    );
    let o = run("check", &cfg, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("geometric ergodicity (moment of order 3 finite): holds"), "{text}");
    assert!(text.contains("uniform ergodicity (rank X = p and moment of order 1 finite): NOT verified"), "{text}");
    assert!(text.contains("rank X = 2 of p = 3; singular values ["), "{text}");
}

#[test]
fn verify_fast_passes_within_a_minute() {
    let dir = tempfile::tempdir().unwrap();
    simulated(dir.path());
    let cfg = write(
        dir.path(),
        "v.toml",
        "[data]\nx = \"data/X.csv\"\ny = \"data/Y.csv\"\n[model]\nkind = \"proper\"\n[mixing]\nfamily = \"gamma\"\nshape = 2.0\nrate = 2.0\n",
    );
    let t0 = Instant::now();
    let o = run("verify", &cfg, &["--level", "fast"]);
    assert!(t0.elapsed() < Duration::from_secs(60));
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("all checks passed"));
}

#[test]
fn geweke_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "g.toml",
        "[model]\nkind = \"proper\"\n[model.prior]\nb = [[0.0, 0.0], [0.0, 0.0]]\na = [[1.0, 0.0], [0.0, 1.0]]\nnu = 8.0\ntheta = [[1.0, 0.0], [0.0, 1.0]]\n\
         [mixing]\nfamily = \"gamma\"\nshape = 2.5\nrate = 2.5\n[geweke]\nn = 5\np = 2\nd = 2\niterations = 20000\n",
    );
    let o = run("geweke", &cfg, &["--seed", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    assert!(dir.path().join("out/geweke.json").is_file());
}

#[test]
fn missing_config_is_an_error() {
    let o = smnreg(&["fit", "--config", "/nonexistent/config.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("reading config"));
}
