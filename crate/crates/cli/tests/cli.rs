use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use salientsleep::synthetic;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_salientsleep"))
        .args(args)
        .env_remove("SSN_CACHE_DIR")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = bin(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Three subjects with one night each, so a 3-fold split has one subject
/// per role.
fn recordings(dir: &Path) {
    for (i, (psg, hyp)) in [
        ("SC4001E0-PSG.edf", "SC4001EC-Hypnogram.edf"),
        ("SC4011E0-PSG.edf", "SC4011EH-Hypnogram.edf"),
        ("SC4021E0-PSG.edf", "SC4021EH-Hypnogram.edf"),
    ]
    .into_iter()
    .enumerate()
    {
        let labels = synthetic::hypnogram(24, i as u64 + 1);
        let (p, h) = synthetic::edf_pair(&labels, i as u64 + 1).unwrap();
        std::fs::write(dir.join(psg), p).unwrap();
        std::fs::write(dir.join(hyp), h).unwrap();
    }
}

fn prepared() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("edf");
    std::fs::create_dir(&data).unwrap();
    recordings(&data);
    let cache = dir.path().join("cache");
    ok(&["prepare", "--data-dir", s(&data), "--cache-dir", s(&cache), "--threads", "2"]);
    (dir, cache)
}

fn train(cache: &Path, out: &Path, extra: &[&str]) -> String {
    let mut args = vec![
        "train", "--cache-dir", s(cache), "--out", s(out), "--scale", "small", "--k", "3", "--fold", "1",
        "--epochs", "1", "--batch", "2", "--seed", "5",
    ];
    args.extend_from_slice(extra);
    ok(&args)
}

#[test]
fn prepare_writes_caches_and_a_summary() {
    let (_dir, cache) = prepared();
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(cache.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["nights"].as_array().unwrap().len(), 3);
    assert_eq!(summary["class_counts"].as_object().unwrap().len(), 5);
    let caches = std::fs::read_dir(&cache)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name() != "summary.json")
        .count();
    assert_eq!(caches, 3);
}

#[test]
fn a_missing_hypnogram_fails_and_names_the_night() {
    let dir = tempfile::tempdir().unwrap();
    recordings(dir.path());
    std::fs::remove_file(dir.path().join("SC4011EH-Hypnogram.edf")).unwrap();
    let cache = dir.path().join("cache");
    let out = bin(&["prepare", "--data-dir", s(dir.path()), "--cache-dir", s(&cache)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("SC4011"));
    assert!(!cache.join("summary.json").exists());
}

#[test]
fn train_is_reproducible_and_eval_matches() {
    let (dir, cache) = prepared();
    let a = dir.path().join("run_a");
    let b = dir.path().join("run_b");
    train(&cache, &a, &[]);
    train(&cache, &b, &[]);
    for f in ["manifest.json", "history.jsonl", "best.ssnc", "metrics.json"] {
        assert!(a.join(f).is_file(), "missing {f}");
    }
    let read = |p: PathBuf| std::fs::read(p).unwrap();
    assert_eq!(read(a.join("history.jsonl")), read(b.join("history.jsonl")));
    assert_eq!(read(a.join("best.ssnc")), read(b.join("best.ssnc")));
    assert_eq!(read(a.join("metrics.json")), read(b.join("metrics.json")));
    assert_eq!(std::fs::read_to_string(a.join("history.jsonl")).unwrap().lines().count(), 1);

    ok(&["eval", "--out", s(&a)]);
    let json = |p: PathBuf| serde_json::from_slice::<serde_json::Value>(&read(p)).unwrap();
    let trained = json(a.join("metrics.json"));
    let evaluated = json(a.join("eval.json"));
    assert_eq!(trained["val"], evaluated["val"]);
    assert_eq!(trained["test"], evaluated["test"]);

    let clash = bin(&["eval", "--out", s(&a), "--fold", "0"]);
    assert_eq!(clash.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&clash.stderr).contains("does not match"));
}

#[test]
fn saliency_writes_one_row_per_sample() {
    let (dir, cache) = prepared();
    let run = dir.path().join("run");
    train(&cache, &run, &[]);
    let out = dir.path().join("maps");
    // Six epochs with windows of four, so the second window is padded.
    ok(&[
        "saliency", "--checkpoint", s(&run.join("best.ssnc")), "--record", "SC4001", "--epoch-range", "2:8",
        "--out", s(&out),
    ]);
    for name in ["saliency_eeg.csv", "saliency_eog.csv"] {
        let text = std::fs::read_to_string(out.join(name)).unwrap();
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(header.first(), Some(&"sample"));
        assert_eq!(header.last(), Some(&"saliency"));
        let rows: Vec<&str> = lines.collect();
        assert_eq!(rows.len(), 6 * 3000);
        assert!(rows[0].starts_with("6000,"));
        assert!(rows.last().unwrap().starts_with("23999,"));
        let last: Vec<f64> = rows[17].split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(last.len(), header.len());
        let norm = last[2..last.len() - 1].iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - last[last.len() - 1]).abs() < 1e-5 * norm.max(1.0));
    }
}

#[test]
fn params_reports_the_full_model() {
    let text = ok(&["params"]);
    let total: u64 = text
        .lines()
        .find_map(|l| l.strip_prefix("total"))
        .unwrap()
        .trim()
        .parse()
        .unwrap();
    assert!((800_000..1_050_000).contains(&total), "{total}");
    let json: serde_json::Value = serde_json::from_str(&ok(&["params", "--json", "--variant", "u-basic"])).unwrap();
    assert!(json["total"].as_u64().unwrap() < total);
}

#[test]
fn bad_arguments_exit_with_one() {
    assert_eq!(bin(&["params", "--variant", "u3"]).status.code(), Some(1));
    let (dir, cache) = prepared();
    let out = bin(&[
        "train", "--cache-dir", s(&cache), "--out", s(&dir.path().join("r")), "--k", "3", "--fold", "3",
        "--scale", "small",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let toy = bin(&["train", "--cache-dir", s(&cache), "--out", s(&dir.path().join("t")), "--scale", "toy"]);
    assert_eq!(toy.status.code(), Some(1));
}
