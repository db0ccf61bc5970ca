use std::collections::BTreeMap;
use std::ffi::OsStr;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clap::CommandFactory;
use sympie_cli::Cli;

fn sympie<S: AsRef<OsStr>>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sympie")).args(args).output().expect("binary runs")
}

fn ok<S: AsRef<OsStr>>(args: &[S]) -> String {
    let out = sympie(args);
    assert!(
        out.status.success(),
        "{:?} failed: {}",
        args.iter().map(|a| a.as_ref()).collect::<Vec<_>>(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn last_error_line(out: &Output) -> serde_json::Value {
    let err = String::from_utf8_lossy(&out.stderr);
    let last = err.lines().last().unwrap_or("");
    serde_json::from_str(last).unwrap_or_else(|_| panic!("not a JSON error line: {err}"))
}

const TINY_TRAIN: &str = r#"
total_steps = 4
batch_size = 4
nem_input_size = 16
checkpoint_every = 2

[nem]
widths = [4, 6, 8, 8]
use_residual = true
kernel_size = 5
"#;

#[test]
fn every_flag_is_documented_with_a_default() {
    let cmd = Cli::command();
    for sub in cmd.get_subcommands() {
        let help = {
            let out = sympie(&[sub.get_name(), "--help"]);
            assert!(out.status.success());
            String::from_utf8(out.stdout).unwrap()
        };
        for arg in sub.get_arguments() {
            let id = arg.get_id().as_str();
            if id == "help" || id == "version" {
                continue;
            }
            let long = arg.get_long().unwrap_or_else(|| panic!("{id} has no long flag"));
            assert!(help.contains(&format!("--{long}")), "{} --help misses --{long}", sub.get_name());
            let text = arg.get_help().map(|h| h.to_string()).unwrap_or_default();
            assert!(!text.is_empty(), "{} --{long} undocumented", sub.get_name());
            let has_default = !arg.get_default_values().is_empty() || text.contains("[default:");
            assert!(
                arg.is_required_set() || has_default,
                "{} --{long} has no documented default",
                sub.get_name()
            );
        }
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = sympie(&["flops", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    let e = last_error_line(&out);
    assert_eq!(e["error"], "usage");
    assert_eq!(String::from_utf8_lossy(&out.stderr).lines().count(), 1);
}

#[test]
fn missing_input_and_bad_config_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = sympie(&["corrupt", "--in", s(&missing), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(last_error_line(&out)["error"], "missing_input");

    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "beta = \"high\"\n").unwrap();
    let out = sympie(&[
        "train",
        "--data",
        s(dir.path()),
        "--classifier",
        s(&missing),
        "--out-dir",
        s(&dir.path().join("run")),
        "--config",
        s(&cfg),
    ]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(last_error_line(&out)["error"], "config");

    let out = sympie(&["corrupt", "--in", s(dir.path()), "--out", "x", "--kinds", "fog"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn corrupt_twice_gives_identical_trees() {
    let dir = tempfile::tempdir().unwrap();
    let clean = dir.path().join("clean");
    ok(&["synth", "--out", s(&clean), "--per-class", "1", "--size", "16", "--seed", "3"]);
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&[
            "corrupt", "--in", s(&clean), "--out", s(&out), "--kinds", "darken,horizon", "--severities", "1..5", "--seed",
            "7",
        ]);
        tree(&out)
    };
    let (a, b) = (run("a"), run("b"));
    assert_eq!(a.len(), 2 * 5 * 10 + 1);
    assert_eq!(a, b);
}

#[test]
fn iterate_writes_numbered_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let clean = dir.path().join("clean");
    ok(&["synth", "--out", s(&clean), "--per-class", "1", "--size", "16"]);
    let src = clean.join("circle_red").join("00003.png");
    let x = dir.path().join("x.png");
    std::fs::copy(&src, &x).unwrap();
    let stdout = ok(&["iterate", "--n", "4", "--in", s(&x)]);
    for i in 1..=4 {
        let p = dir.path().join(format!("x_{i}.png"));
        assert!(p.is_file(), "{}", p.display());
        assert!(stdout.contains(s(&p)));
    }
    assert!(!dir.path().join("x_5.png").exists());
}

#[test]
fn flops_and_bench_report_json() {
    let r: serde_json::Value = serde_json::from_str(&ok(&["flops"])).unwrap();
    let total = r["total_flops"].as_f64().unwrap();
    assert!((1e9..=4e9).contains(&total), "{total}");
    let r: serde_json::Value =
        serde_json::from_str(&ok(&["bench", "--height", "48", "--width", "64", "--iterations", "10"])).unwrap();
    assert!(r["dwm_images_per_second"].as_f64().unwrap() > 0.0);
    assert_eq!(r["threads"], 1);
}

#[test]
fn pipeline_is_reproducible_and_eval_deltas_match() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    let args = |a: &[&str]| a.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    ok(&args(&["synth", "--out", &p("train"), "--per-class", "3", "--size", "16", "--seed", "1"]));
    ok(&args(&["synth", "--out", &p("test"), "--per-class", "1", "--size", "16", "--seed", "2"]));
    ok(&args(&[
        "corrupt", "--in", &p("test"), "--out", &p("test_c"), "--kinds", "darken,contrast", "--severities", "3,5",
    ]));
    for clf in ["clf_a.ckpt", "clf_b.ckpt"] {
        ok(&args(&["train-upstream", "--data", &p("train"), "--widths", "4,8", "--epochs", "2", "--out", &p(clf)]));
    }
    assert_eq!(std::fs::read(p("clf_a.ckpt")).unwrap(), std::fs::read(p("clf_b.ckpt")).unwrap());

    std::fs::write(p("cfg.toml"), TINY_TRAIN).unwrap();
    let train = |out: &str, extra: &[&str]| {
        let mut a = args(&[
            "train", "--data", &p("train"), "--classifier", &p("clf_a.ckpt"), "--config", &p("cfg.toml"), "--out-dir",
            &p(out),
        ]);
        a.extend(args(extra));
        ok(&a);
    };
    train("run_a", &[]);
    train("run_b", &["--stop-after", "2"]);
    train("run_b", &["--resume", &format!("{}/step_000002.ckpt", p("run_b"))]);
    for f in ["enhancer.ckpt", "step_000004.ckpt"] {
        let read = |run: &str| std::fs::read(Path::new(&p(run)).join(f)).unwrap();
        assert_eq!(read("run_a"), read("run_b"), "{f} differs after resume");
    }

    let enh = format!("{}/enhancer.ckpt", p("run_a"));
    ok(&args(&["enhance", "--enhancer", &enh, "--in", &p("test"), "--out", &p("enhanced")]));
    assert_eq!(tree(Path::new(&p("enhanced"))).len(), 10);

    let ev = |out: &str, with: bool| {
        let mut a = args(&["eval", "--classifier", &p("clf_a.ckpt"), "--data", &p("test_c"), "--out-dir", &p(out)]);
        if with {
            a.extend(args(&["--enhancer", &enh, "--mixed"]));
        }
        ok(&a);
        PathBuf::from(p(out))
    };
    let plain = ev("eval_plain", false);
    let with = ev("eval_with", true);
    assert!(plain.join("baseline.json").is_file() && !plain.join("enhanced.json").exists());
    let read = |p: PathBuf| -> serde_json::Value { serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap() };
    let base = read(with.join("baseline.json"));
    let ours = read(with.join("enhanced.json"));
    let summary = read(with.join("summary.json"));
    assert_eq!(read(plain.join("baseline.json")), base);
    let (b, o) = (
        base["corruption_average"].as_f64().unwrap() * 100.0,
        ours["corruption_average"].as_f64().unwrap() * 100.0,
    );
    let (d, pct) = sympie::evaluation::delta_points(b, o);
    assert!((summary["delta"].as_f64().unwrap() - d).abs() < 1e-9);
    assert!((summary["pct_delta"].as_f64().unwrap() - pct).abs() < 1e-9);
    assert_eq!(ours["comparison"]["baseline"], "baseline");
    assert!(summary["enhanced"]["mixed"].is_number());
    assert_eq!(base["cells"].as_array().unwrap().len(), 4);

    let again = ev("eval_again", true);
    assert_eq!(tree(&again), tree(&with));
}
