use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn maxplus(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_maxplus"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = maxplus(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    maxplus(args).status.code().expect("exited normally")
}

fn path(dir: &TempDir, name: &str) -> String {
    dir.path().join(name).to_str().unwrap().to_string()
}

/// `(gamma, edges)` from the text format, parsed independently of the library.
fn parse_mdp(text: &str) -> (usize, f64, Vec<(usize, usize, f64)>) {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
    let head: Vec<&str> = lines.next().unwrap().split_whitespace().collect();
    assert_eq!((head[0], head[2]), ("states", "gamma"));
    let n = head[1].parse().unwrap();
    let gamma = head[3].parse().unwrap();
    let edges = lines
        .filter(|l| l.starts_with("edge"))
        .map(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            (f[1].parse().unwrap(), f[2].parse().unwrap(), f[3].parse().unwrap())
        })
        .collect();
    (n, gamma, edges)
}

fn value_iteration(n: usize, gamma: f64, edges: &[(usize, usize, f64)], tol: f64) -> Vec<f64> {
    let mut v = vec![0.0; n];
    loop {
        let mut next = vec![f64::NEG_INFINITY; n];
        for &(s, t, r) in edges {
            next[s] = next[s].max(r + gamma * v[t]);
        }
        let res = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        v = next;
        if res <= tol * (1.0 - gamma) {
            return v;
        }
    }
}

/// Named column of a values CSV.
fn column(file: &Path, name: &str) -> Vec<f64> {
    let text = fs::read_to_string(file).unwrap();
    let mut lines = text.lines();
    let idx = lines.next().unwrap().split(',').position(|h| h == name).expect("column present");
    lines.map(|l| l.split(',').nth(idx).unwrap().parse().unwrap()).collect()
}

fn json(file: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(file).unwrap()).unwrap()
}

fn sup(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn benchmark_build_writes_mdp_and_values() {
    let dir = TempDir::new().unwrap();
    let out = path(&dir, "b");
    let stdout = ok(&["benchmark", "build", "--problem", "v1d_bumps", "--nodes", "362", "--eta", "0.5", "--out", &out]);
    assert!(stdout.contains("gamma 0.998082"), "{stdout}");
    let (n, gamma, edges) = parse_mdp(&fs::read_to_string(dir.path().join("b/mdp.txt")).unwrap());
    assert_eq!(n, 362);
    assert!((gamma - 0.5f64.powf(1.0 / 361.0)).abs() < 1e-15);
    assert_eq!(edges.len(), 2 + 2 * 360);
    let vstar = column(&dir.path().join("b/vstar.csv"), "v_star");
    assert_eq!(vstar.len(), 362);
    assert_eq!(vstar[0], 1.0);
    assert!(dir.path().join("b/meta.json").is_file());
}

#[test]
fn solve_certificate_holds_against_independent_iteration() {
    let dir = TempDir::new().unwrap();
    ok(&["benchmark", "build", "--problem", "v1d_bumps", "--out", &path(&dir, "b")]);
    let mdp = path(&dir, "b/mdp.txt");
    let tol = 1e-6;
    let stdout = ok(&["solve", "--mdp", &mdp, "--tol", "1e-6", "--out", &path(&dir, "s")]);
    assert!(stdout.contains("certified gap"), "{stdout}");

    let (n, gamma, edges) = parse_mdp(&fs::read_to_string(&mdp).unwrap());
    let exact = value_iteration(n, gamma, &edges, 1e-12);
    let got = column(&dir.path().join("s/values.csv"), "value");
    let cert = json(&dir.path().join("s/certificate.json"));
    let bound = cert["bound"].as_f64().unwrap();
    assert!(bound <= tol / (1.0 - gamma));
    assert!(sup(&got, &exact) <= bound + 1e-9, "{} > {bound}", sup(&got, &exact));
}

#[test]
fn solve_builtin_reports_analytic_gap() {
    let dir = TempDir::new().unwrap();
    ok(&["solve", "--problem", "v1d_bumps", "--tol", "1e-6", "--out", &path(&dir, "s")]);
    let cert = json(&dir.path().join("s/certificate.json"));
    assert!(cert["analytic_gap_linf"].as_f64().unwrap().is_finite());
    let values = dir.path().join("s/values.csv");
    assert_eq!(column(&values, "x1").len(), 362);
    assert_eq!(column(&values, "v_star").len(), 362);
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = TempDir::new().unwrap();
    let out = path(&dir, "x");
    assert_eq!(code(&["solve", "--mdp", &path(&dir, "missing.txt"), "--out", &out]), 2);
    assert_eq!(code(&["solve", "--problem", "v1d_bumps", "--tol", "0", "--out", &out]), 2);
    assert_eq!(code(&["solve", "--problem", "v1d_bumps", "--tol=-1", "--out", &out]), 2);
    assert_eq!(code(&["solve", "--out", &out]), 2);
    assert_eq!(code(&["solve", "--problem", "v3d", "--out", &out]), 2);
    assert_eq!(code(&["sweep", "--problem", "v1d_bumps", "--rho", "4", "--n=", "--out", &out]), 2);
    assert_eq!(code(&["sweep", "--problem", "v1d_bumps", "--rho", "4", "--out", &out]), 2);
    assert_eq!(code(&["greedy", "--problem", "v1d_bumps", "--atoms", "bregman", "--out", &out]), 2);
    assert_eq!(code(&["approx", "--problem", "v1d_bumps", "--n", "400", "--out", &out]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = TempDir::new().unwrap();
    let mdp = dir.path().join("bad.txt");
    fs::write(&mdp, "states 2 gamma 0.9\nedge 0 1 1.0\n").unwrap();
    assert_eq!(code(&["solve", "--mdp", mdp.to_str().unwrap(), "--out", &path(&dir, "x")]), 1);
    let slow = ["solve", "--problem", "v1d_bumps", "--tol", "1e-9", "--max-iter", "3", "--out", &path(&dir, "y")];
    assert_eq!(code(&slow), 1);
}

#[test]
fn approx_with_singletons_recovers_the_optimum() {
    let dir = TempDir::new().unwrap();
    ok(&["approx", "--problem", "v1d_bumps", "--n", "362", "--rho", "4", "--out", &path(&dir, "a")]);
    let summary = json(&dir.path().join("a/summary.json"));
    assert!(summary["err_linf"].as_f64().unwrap() < 1e-6);
    let file = dir.path().join("a/approx.csv");
    assert!(sup(&column(&file, "value"), &column(&file, "reference")) < 1e-6);
}

#[test]
fn approx_runs_for_each_atom_kind() {
    let dir = TempDir::new().unwrap();
    for atoms in ["constant", "affine", "bregman"] {
        let out = path(&dir, atoms);
        ok(&["approx", "--problem", "v1d_convex", "--n", "16", "--rho", "8", "--atoms", atoms, "--out", &out]);
        let file = dir.path().join(atoms).join("approx.csv");
        let (v, r) = (column(&file, "value"), column(&file, "reference"));
        let top = r.iter().fold(0.0, |m: f64, x| m.max(x.abs()));
        assert!(sup(&v, &r) <= top, "{atoms}: error {} exceeds the scale of the optimum", sup(&v, &r));
        if atoms == "constant" {
            // indicator dictionaries with W = Z bound the optimum from above
            assert!(v.iter().zip(&r).all(|(a, b)| *a >= b - 1e-6));
        }
    }
}

#[test]
fn forms_cache_is_reused() {
    let dir = TempDir::new().unwrap();
    let cache = path(&dir, "cache");
    let run = |out: &str| ok(&["approx", "--problem", "v1d_bumps", "--n", "16", "--cache-dir", &cache, "--out", &path(&dir, out)]);
    run("a");
    let entries = fs::read_dir(&cache).unwrap().count();
    assert_eq!(entries, 1);
    run("b");
    assert_eq!(fs::read_dir(&cache).unwrap().count(), entries);
    assert_eq!(
        fs::read(dir.path().join("a/approx.csv")).unwrap(),
        fs::read(dir.path().join("b/approx.csv")).unwrap()
    );
}

#[test]
fn approx_on_a_file_without_grid() {
    let dir = TempDir::new().unwrap();
    let mdp = dir.path().join("ring.txt");
    let mut text = String::from("states 6 gamma 0.8\n");
    for s in 0..6 {
        text += &format!("edge {s} {} {}\n", (s + 1) % 6, s as f64 * 0.1);
        text += &format!("edge {s} {s} 0.2\n");
    }
    fs::write(&mdp, text).unwrap();
    let m = mdp.to_str().unwrap();
    ok(&["approx", "--mdp", m, "--n", "6", "--rho", "2", "--out", &path(&dir, "a")]);
    let file = dir.path().join("a/approx.csv");
    assert!(sup(&column(&file, "value"), &column(&file, "reference")) < 1e-6);
    ok(&["approx", "--mdp", m, "--n", "2", "--rho", "2", "--out", &path(&dir, "b")]);
    assert_eq!(code(&["approx", "--mdp", m, "--atoms", "affine", "--n", "2", "--out", &path(&dir, "c")]), 2);
}

#[test]
fn greedy_logs_split_dimensions() {
    let dir = TempDir::new().unwrap();
    let stdout = ok(&["greedy", "--problem", "v2d_sparse", "--n", "8", "--rho", "4", "--out", &path(&dir, "g")]);
    let line = stdout.lines().find(|l| l.starts_with("split dimensions:")).expect("split line");
    assert_eq!(line.split_whitespace().count() - 2, 7);
    let trace = fs::read_to_string(dir.path().join("g/trace.csv")).unwrap();
    assert_eq!(trace.lines().next().unwrap(), "n,err_l1,err_linf,atom_kind,atom_desc,rho,norm");
    assert_eq!(trace.lines().count(), 1 + 8);
    let summary = json(&dir.path().join("g/summary.json"));
    assert_eq!(summary["split_dims"].as_array().unwrap().len(), 7);
}

#[test]
fn sweep_is_reproducible_without_timings() {
    let dir = TempDir::new().unwrap();
    let run = |out: &str| {
        ok(&[
            "sweep", "--problem", "v1d_bumps", "--rho", "4,32", "--n", "16,32", "--no-timings", "--threads", "2",
            "--out", &path(&dir, out),
        ])
    };
    run("a");
    run("b");
    let a = fs::read_to_string(dir.path().join("a/sweep.csv")).unwrap();
    assert_eq!(a, fs::read_to_string(dir.path().join("b/sweep.csv")).unwrap());
    let mut lines = a.lines();
    assert_eq!(lines.next().unwrap(), "method,rho,n,err_l1,err_linf,wall_ms,compile_ms");
    assert_eq!(lines.count(), 4 * 2 * 2);
}

#[test]
fn sweep_method_subset() {
    let dir = TempDir::new().unwrap();
    ok(&[
        "sweep", "--problem", "v1d_bumps", "--rho", "4", "--n", "8", "--methods", "fixed-constant", "--out",
        &path(&dir, "s"),
    ]);
    let text = fs::read_to_string(dir.path().join("s/sweep.csv")).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.lines().nth(1).unwrap().starts_with("fixed-constant,4,8,"));
}

#[test]
fn meta_records_the_configuration() {
    let dir = TempDir::new().unwrap();
    ok(&["approx", "--problem", "v1d_bumps", "--n", "8", "--rho", "2", "--out", &path(&dir, "a")]);
    let meta = json(&dir.path().join("a/meta.json"));
    assert_eq!(meta["version"], env!("CARGO_PKG_VERSION"));
    let cfg = &meta["config"]["command"]["approx"];
    assert_eq!(cfg["n"], 8);
    assert_eq!(cfg["rho"], 2);
    assert_eq!(cfg["problem"]["problem"], "v1d_bumps");
    assert_eq!(cfg["atoms"], "constant");
}
