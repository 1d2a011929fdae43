use ssmtad::eval::{read_features, write_features, AnnotationFile};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"{
  "synth": { "num_train": 4, "num_test": 2 },
  "train": { "epochs": 3, "batch_size": 2, "crop_len": 64, "checkpoint_every": 2 }
}"#;

fn ssmtad(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssmtad"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

struct Work {
    dir: tempfile::TempDir,
}

impl Work {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("small.json"), SMALL).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        ssmtad(args, self.dir.path())
    }

    fn synth(&self, out: &str) {
        let o = self.run(&["synth", "--config", "small.json", "--out", out]);
        assert!(o.status.success(), "{}", text(&o));
    }
}

fn read_tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn losses(csv: &Path) -> Vec<(usize, f64)> {
    let s = fs::read_to_string(csv).unwrap();
    let mut lines = s.lines();
    assert_eq!(lines.next(), Some("step,epoch,loss,cls,reg,lr,grad_norm,num_pos"));
    lines
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect()
}

#[test]
fn synth_is_byte_reproducible_under_a_seed() {
    let w = Work::new();
    for out in ["a", "b"] {
        let o = w.run(&["synth", "--config", "small.json", "--seed", "7", "--out", out]);
        assert!(o.status.success(), "{}", text(&o));
    }
    let (a, b) = (read_tree(&w.path("a")), read_tree(&w.path("b")));
    assert!(!a.is_empty());
    assert_eq!(a, b);
}

#[test]
fn synth_refuses_a_non_empty_directory_without_force() {
    let w = Work::new();
    w.synth("d");
    let o = w.run(&["synth", "--config", "small.json", "--out", "d"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("--force"), "{}", text(&o));
    let o = w.run(&["synth", "--config", "small.json", "--out", "d", "--force"]);
    assert!(o.status.success(), "{}", text(&o));
}

#[test]
fn malformed_config_names_the_offending_key() {
    let w = Work::new();
    fs::write(w.path("bad.json"), r#"{ "train": { "learning_rate": 0.1 } }"#).unwrap();
    let o = w.run(&["synth", "--config", "bad.json", "--out", "d"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("learning_rate"), "{}", text(&o));
    assert!(!w.path("d").exists());
}

#[test]
fn usage_errors_exit_with_one() {
    let w = Work::new();
    assert_eq!(w.run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(w.run(&["train", "--dtype", "f16"]).status.code(), Some(1));
    assert_eq!(w.run(&["oracle", "--break", "everything"]).status.code(), Some(1));
    assert_eq!(w.run(&["--help"]).status.code(), Some(0));
}

#[test]
fn train_without_dataset_fails_cleanly() {
    let w = Work::new();
    let o = w.run(&["train", "--config", "small.json", "--data", "missing", "--out", "r"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("synth"), "{}", text(&o));
}

#[test]
fn train_checkpoint_resume_and_eval() {
    let w = Work::new();
    w.synth("d");
    let base = ["--config", "small.json", "--data", "d"];
    let full = w.run(&[&["train", "--out", "full", "--steps", "4"], &base[..]].concat());
    assert!(full.status.success(), "{}", text(&full));
    let part = w.run(&[&["train", "--out", "part", "--steps", "2"], &base[..]].concat());
    assert!(part.status.success(), "{}", text(&part));
    assert!(w.path("part/checkpoint/manifest.json").is_file());
    assert!(w.path("full/checkpoints/step_000002/weights.bin").is_file());
    assert!(w.path("full/checkpoints/step_000004/weights.bin").is_file());

    let rest = w.run(&["train", "--data", "d", "--out", "part", "--resume", "part/checkpoint", "--steps", "4"]);
    assert!(rest.status.success(), "{}", text(&rest));
    let (a, b) = (losses(&w.path("full/train_log.csv")), losses(&w.path("part/train_log.csv")));
    assert_eq!(a.len(), 4);
    assert_eq!(a.iter().map(|r| r.0).collect::<Vec<_>>(), b.iter().map(|r| r.0).collect::<Vec<_>>());
    for ((s, x), (_, y)) in a.iter().zip(&b) {
        assert!((x - y).abs() <= 1e-4 * x.abs(), "step {s}: {x} vs {y}");
    }

    let o = w.run(&["eval", "--checkpoint", "full/checkpoint", "--data", "d", "--out", "ev"]);
    assert!(o.status.success(), "{}", text(&o));
    for f in ["results.json", "metrics.csv", "metrics.json", "bins.json"] {
        assert!(w.path("ev").join(f).is_file(), "{f}");
    }
    let csv = fs::read_to_string(w.path("ev/metrics.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("threshold,mAP"));
    assert_eq!(csv.lines().count(), 1 + 5);
}

#[test]
fn non_finite_training_exits_with_two_and_dumps() {
    let w = Work::new();
    w.synth("d");
    let ann = AnnotationFile::load(&w.path("d/annotations.json")).unwrap();
    for v in &ann.videos {
        let p = w.path("d/features").join(format!("{}.bin", v.id));
        let mut f = read_features(&p).unwrap();
        f.data_mut().iter_mut().step_by(97).for_each(|x| *x = f32::NAN);
        write_features(&p, &f).unwrap();
    }
    let o = w.run(&["train", "--config", "small.json", "--data", "d", "--out", "r"]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    assert!(w.path("r/nonfinite_dump.json").is_file());
}

#[test]
fn eval_of_ground_truth_and_of_nothing() {
    let w = Work::new();
    w.synth("d");
    let ann = AnnotationFile::load(&w.path("d/annotations.json")).unwrap();
    let mut gt = serde_json::Map::new();
    for v in ann.videos.iter().filter(|v| v.id.starts_with("test_")) {
        let dets: Vec<_> = v
            .annotations
            .iter()
            .map(|a| serde_json::json!({ "segment": [a.start_s, a.end_s], "label": a.label, "score": 1.0 }))
            .collect();
        gt.insert(v.id.clone(), dets.into());
    }
    fs::write(w.path("gt.json"), serde_json::json!({ "results": gt }).to_string()).unwrap();
    fs::write(w.path("empty.json"), r#"{ "results": {} }"#).unwrap();
    for (file, want) in [("gt.json", 1.0), ("empty.json", 0.0)] {
        let out = format!("ev_{want}");
        let o = w.run(&["eval", "--results", file, "--data", "d", "--out", &out]);
        assert!(o.status.success(), "{}", text(&o));
        let csv = fs::read_to_string(w.path(&out).join("metrics.csv")).unwrap();
        for line in csv.lines().skip(1) {
            let m: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
            assert_eq!(m, want, "{file}: {line}");
        }
    }
}

#[test]
fn oracle_passes_and_detects_the_broken_mask() {
    let w = Work::new();
    let o = w.run(&["oracle"]);
    assert_eq!(o.status.code(), Some(0), "{}", text(&o));
    let out = String::from_utf8_lossy(&o.stdout).to_string();
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS ")).count(), 7);
    assert!(out.lines().all(|l| !l.starts_with("PASS ") || l.contains("max_err=")));

    let o = w.run(&["oracle", "--break", "diag-mask"]);
    assert_eq!(o.status.code(), Some(3), "{}", text(&o));
    let out = String::from_utf8_lossy(&o.stdout).to_string();
    let failed: Vec<&str> = out.lines().filter(|l| l.starts_with("FAIL ")).collect();
    assert_eq!(failed.len(), 1, "{out}");
    assert!(failed[0].starts_with("FAIL mask "));
}

#[test]
fn bench_writes_the_timing_csv() {
    let w = Work::new();
    let o = w.run(&["bench", "--lengths", "32,64", "--reps", "1", "--out", "b.csv"]);
    assert!(o.status.success(), "{}", text(&o));
    let csv = fs::read_to_string(w.path("b.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("length,evaluator,ns,reps"));
    assert_eq!(lines.count(), 8);
    let o = w.run(&["bench", "--lengths", "32", "--out", "b.csv"]);
    assert_eq!(o.status.code(), Some(1));
}
