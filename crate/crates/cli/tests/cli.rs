//! End-to-end runs of the `sbglm` binary on the bundled small config.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

const SMALL: &str = include_str!("../configs/small.json");

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.json"), SMALL).unwrap();
    dir
}

fn sbglm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sbglm"))
        .current_dir(dir)
        .args(["--config", "small.json", "--log-level", "warn"])
        .args(args)
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{stdout}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    stdout
}

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn simulate_and_run(dir: &Path, extra: &[&str]) -> String {
    ok(sbglm(dir, &["simulate"]));
    ok(sbglm(dir, &[&["all"], extra].concat()))
}

#[test]
fn simulate_then_all_produces_the_report() {
    let w = workspace();
    let stdout = simulate_and_run(w.path(), &[]);
    for s in ["prep: done", "fit: done", "excur: done", "summarize: done", "lmm: done"] {
        assert!(stdout.contains(s), "{stdout}");
    }
    let out = w.path().join("out");
    let report = std::fs::read_to_string(out.join("report.csv")).unwrap();
    let mut lines = report.lines();
    assert_eq!(lines.next(), Some("check,value,status"));
    let rows: Vec<&str> = lines.collect();
    assert!(rows.len() >= 6, "{report}");
    assert!(rows.iter().all(|r| r.ends_with(",pass") || r.ends_with(",info")), "{report}");
    for f in [
        "config.resolved.json",
        "prep/manifest.json",
        "fit/A01/header.txt",
        "excur/A01_v1_g0.exc",
        "summarize/activation.csv",
        "summarize/comparison.csv",
        "summarize/reliability_subjects.csv",
        "lmm/models.csv",
        "lmm/lrt.csv",
        "lmm/progression.csv",
        "lmm/curves/bayes_g0_lh_total_total.csv",
    ] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    // every default is echoed
    let echoed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("config.resolved.json")).unwrap()).unwrap();
    assert_eq!(echoed["analysis"]["prep"]["scrub"]["multiplier"], 4.0);
    assert_eq!(echoed["lmm"]["curve_quantile"], 0.9);
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("fit/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seed"], 7);
    assert!(m["timings"]["total"].as_f64().unwrap() >= 0.0);
    assert!(m["timings"]["A01"].is_number());
}

#[test]
fn rerunning_all_recomputes_nothing() {
    let w = workspace();
    simulate_and_run(w.path(), &[]);
    let before = files_under(&w.path().join("out"));
    let stdout = ok(sbglm(w.path(), &["all"]));
    for s in ["prep", "fit", "excur", "summarize", "lmm"] {
        assert!(stdout.contains(&format!("{s}: up to date")), "{stdout}");
    }
    assert_eq!(files_under(&w.path().join("out")), before);
    assert!(ok(sbglm(w.path(), &["simulate"])).contains("simulate: up to date"));

    // a changed setting reruns only the stages it affects
    let cfg = SMALL.replace("\"curve_points\": 25", "\"curve_points\": 30");
    std::fs::write(w.path().join("small.json"), cfg).unwrap();
    let stdout = ok(sbglm(w.path(), &["all"]));
    assert!(stdout.contains("excur: up to date") && stdout.contains("lmm: done"), "{stdout}");
    // --force reruns regardless
    assert!(ok(sbglm(w.path(), &["prep", "--force"])).contains("prep: done"));
}

#[test]
fn corrupted_bold_makes_fit_fail_with_path_and_checksum() {
    let w = workspace();
    simulate_and_run(w.path(), &[]);
    let bold = w.path().join("data/bold/A02_v1.bold");
    let mut bytes = std::fs::read(&bold).unwrap();
    let n = bytes.len();
    bytes[n - 3] ^= 0x40;
    std::fs::write(&bold, &bytes).unwrap();
    let sum = hex::encode(Sha256::digest(&bytes));

    let out = sbglm(w.path(), &["fit"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(&bold.display().to_string()), "{err}");
    assert!(err.contains(&sum), "{err}");
}

#[test]
fn results_do_not_depend_on_worker_count() {
    let a = workspace();
    let b = workspace();
    simulate_and_run(a.path(), &["--workers", "1"]);
    simulate_and_run(b.path(), &["--workers", "3"]);
    let strip = |m: BTreeMap<PathBuf, Vec<u8>>| -> BTreeMap<PathBuf, Vec<u8>> {
        // manifests hold timings and absolute paths; the resolved config holds paths
        m.into_iter()
            .filter(|(p, _)| {
                let name = p.file_name().unwrap().to_string_lossy();
                name != "manifest.json" && name != "config.resolved.json"
            })
            .collect()
    };
    let fa = strip(files_under(&a.path().join("out")));
    let fb = strip(files_under(&b.path().join("out")));
    assert!(fa.len() > 50);
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (p, bytes) in &fa {
        assert!(bytes == &fb[p], "{} differs", p.display());
    }
}

#[test]
fn seed_override_reaches_the_excursion_sampler() {
    let w = workspace();
    simulate_and_run(w.path(), &["--seed", "123"]);
    let side = std::fs::read_to_string(w.path().join("out/excur/A01_v1_g0.txt")).unwrap();
    assert!(side.contains("seed = 123"), "{side}");
    let truth = std::fs::read_to_string(w.path().join("data/truth.txt")).unwrap();
    assert!(truth.contains("seed = 7"), "simulate ran before the override: {truth}");
}

#[test]
fn exit_codes_follow_the_failure_class() {
    let w = workspace();
    std::fs::write(w.path().join("bad.json"), r#"{"analysis": {"alpha": 2}}"#).unwrap();
    let run =
        |args: &[&str]| Command::new(env!("CARGO_BIN_EXE_sbglm")).current_dir(w.path()).args(args).output().unwrap();
    assert_eq!(run(&["--config", "bad.json", "prep"]).status.code(), Some(2));
    assert_eq!(run(&["--config", "missing.json", "prep"]).status.code(), Some(2));
    // no dataset yet
    let out = run(&["--config", "small.json", "prep"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sessions.csv"));
    // downstream stage before its inputs exist
    ok(run(&["--config", "small.json", "simulate"]));
    let out = run(&["--config", "small.json", "fit"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("prep has not completed"));
}
