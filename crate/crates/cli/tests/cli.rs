use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_splat-embed"));
    c.env_remove("SPLAT_EMBED_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn generate(dir: &Path, kind: &str, n: usize, seed: u64) -> std::path::PathBuf {
    let path = dir.join(format!("{kind}-{n}-{seed}.csv"));
    let out = run(&["generate", kind, "--n", &n.to_string(), "--seed", &seed.to_string(), "-o", s(&path)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    path
}

fn read_toml(path: &Path) -> toml::Table {
    toml::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn float(t: &toml::Table, path: &[&str]) -> f64 {
    let mut v = &t[path[0]];
    for key in &path[1..] {
        v = &v[*key];
    }
    v.as_float().unwrap()
}

#[test]
fn generate_is_deterministic_with_expected_arity() {
    let dir = tempfile::tempdir().unwrap();
    let a = generate(dir.path(), "swiss-roll", 50, 9);
    let b = dir.path().join("again.csv");
    assert!(run(&["generate", "swiss-roll", "--n", "50", "--seed", "9", "-o", s(&b)]).status.success());
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    assert!(header.split(',').any(|c| c == "energy"), "{header}");
    assert_eq!(lines.count(), 50);

    let t = dir.path().join("t.csv");
    assert!(run(&["generate", "trajectory", "--n", "40", "--dim", "7", "-o", s(&t)]).status.success());
    let text = std::fs::read_to_string(&t).unwrap();
    assert_eq!(text.lines().count(), 41);
    let numeric = text.lines().nth(1).unwrap().split(',').count();
    let names: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    assert_eq!(numeric, names.len());
    assert_eq!(names.iter().filter(|n| **n != "energy" && **n != "label").count(), 7);
}

#[test]
fn fit_writes_all_outputs_and_metrics_agree() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path(), "swiss-roll", 400, 1);
    let out = dir.path().join("run");
    let r = run(&["fit", "-i", s(&data), "-o", s(&out), "--k", "10", "--epochs", "60", "--freeze-epoch", "30"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    for f in ["embedding.ply", "report.toml", "train_log.jsonl", "manifest.toml"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let report = read_toml(&out.join("report.toml"));
    assert!(float(&report, &["metrics", "final", "trustworthiness"]) >= 0.99);
    assert_eq!(std::fs::read_to_string(out.join("train_log.jsonl")).unwrap().lines().count(), 60);

    let m = run(&["metrics", "-i", s(&data), "--low", s(&out.join("embedding.ply")), "--k", "10"]);
    assert!(m.status.success(), "{}", String::from_utf8_lossy(&m.stderr));
    let metrics: toml::Table = toml::from_str(&String::from_utf8(m.stdout).unwrap()).unwrap();
    for key in ["stress1", "trustworthiness", "continuity"] {
        assert_eq!(metrics[key].as_float(), report["metrics"]["final"][key].as_float(), "{key}");
    }

    // the manifest replays the run
    let replay = dir.path().join("replay");
    let r = run(&["fit", "-i", s(&data), "-o", s(&replay), "--config", s(&out.join("manifest.toml"))]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    assert_eq!(
        std::fs::read(out.join("embedding.ply")).unwrap(),
        std::fs::read(replay.join("embedding.ply")).unwrap()
    );
}

#[test]
fn trajectory_fit_respects_scale_clamp() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path(), "trajectory", 300, 2);
    let out = dir.path().join("run");
    let r = run(&["fit", "-i", s(&data), "-o", s(&out), "--regime", "trajectory", "--k", "10", "--epochs", "40"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let report = read_toml(&out.join("report.toml"));
    assert!(float(&report, &["history", "max_log_scale"]) <= 1.0);
}

#[test]
fn zero_epochs_exports_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path(), "swiss-roll", 100, 3);
    let out = dir.path().join("run");
    let r = run(&["fit", "-i", s(&data), "-o", s(&out), "--k", "8", "--epochs", "0"]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let report = read_toml(&out.join("report.toml"));
    assert_eq!(report["run"]["epochs_run"].as_integer(), Some(0));
    assert_eq!(
        report["metrics"]["init"]["trustworthiness"].as_float(),
        report["metrics"]["final"]["trustworthiness"].as_float()
    );
}

#[test]
fn metrics_of_data_against_itself_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("cube.csv");
    let rows: Vec<String> = (0..60)
        .map(|i| format!("{},{},{}", i % 4, (i / 4) % 5, (i * 7 % 13) as f64 * 0.3))
        .collect();
    std::fs::write(&data, rows.join("\n")).unwrap();
    let m = run(&["metrics", "-i", s(&data), "--low", s(&data), "--k", "5"]);
    assert!(m.status.success(), "{}", String::from_utf8_lossy(&m.stderr));
    let t: toml::Table = toml::from_str(&String::from_utf8(m.stdout).unwrap()).unwrap();
    assert_eq!(t["trustworthiness"].as_float(), Some(1.0));
    assert_eq!(t["continuity"].as_float(), Some(1.0));
    assert!(t["stress1"].as_float().unwrap() < 1e-12);
}

#[test]
fn mismatched_point_counts_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let a = generate(dir.path(), "swiss-roll", 60, 1);
    let b = dir.path().join("low.csv");
    let rows: Vec<String> = (0..59).map(|i| format!("{i},0,{}", i * i)).collect();
    std::fs::write(&b, rows.join("\n")).unwrap();
    let m = run(&["metrics", "-i", s(&a), "--low", s(&b), "--k", "5"]);
    assert_eq!(m.status.code(), Some(2));
    let err = String::from_utf8(m.stderr).unwrap();
    assert!(err.starts_with("error[data]:"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&["fit"]).status.code(), Some(1));
    assert_eq!(run(&["nonsense"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path(), "swiss-roll", 50, 1);
    let r = run(&["fit", "-i", s(&data), "-o", s(&dir.path().join("o")), "--checkpoint-every", "0"]);
    assert_eq!(r.status.code(), Some(1));
    let missing = run(&["fit", "-i", s(&dir.path().join("nope.csv")), "-o", s(&dir.path().join("o"))]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn ablate_full_variant_matches_fit() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path(), "swiss-roll", 200, 4);
    let common = ["--k", "8", "--epochs", "30", "--freeze-epoch", "20"];
    let fit_out = dir.path().join("fit");
    let abl_out = dir.path().join("abl");
    let mut fit_args = vec!["fit", "-i", s(&data), "-o", s(&fit_out)];
    fit_args.extend(common);
    let mut abl_args = vec!["ablate", "-i", s(&data), "-o", s(&abl_out)];
    abl_args.extend(common);
    assert!(run(&fit_args).status.success());
    let r = run(&abl_args);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    for f in ["full.ply", "no-covariance.ply", "no-orientation.ply", "ablation.toml", "manifest.toml"] {
        assert!(abl_out.join(f).is_file(), "missing {f}");
    }
    assert_eq!(
        std::fs::read(fit_out.join("embedding.ply")).unwrap(),
        std::fs::read(abl_out.join("full.ply")).unwrap()
    );
}

#[test]
fn thread_count_does_not_change_output() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate(dir.path(), "swiss-roll", 300, 6);
    let mut plys = Vec::new();
    for threads in ["1", "4"] {
        let out = dir.path().join(format!("t{threads}"));
        let r = run(&["--threads", threads, "fit", "-i", s(&data), "-o", s(&out), "--k", "8", "--epochs", "30", "--freeze-epoch", "20"]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
        plys.push(std::fs::read(out.join("embedding.ply")).unwrap());
    }
    assert_eq!(plys[0], plys[1]);
}
