use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use storyplan::artifact::read_jsonl;
use storyplan::planner::{read_plans, PlanRecord};
use storyplan::realizer::read_stories;

fn toy() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/toy")
}

fn storyplan(out: &Path, extra: &[String], args: &[&str]) -> Output {
    let data = toy();
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_storyplan"));
    for (key, file) in [
        ("train", "train.jsonl"),
        ("test", "test.jsonl"),
        ("kb", "kb.tsv"),
        ("embeddings", "embeddings.txt"),
    ] {
        cmd.arg("--set").arg(format!("paths.{key}={}", data.join(file).display()));
    }
    cmd.arg("--set").arg(format!("paths.output={}", out.display()));
    for e in extra {
        cmd.arg("--set").arg(e);
    }
    cmd.args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn fast() -> Vec<String> {
    ["train.mcsm.epochs=2", "train.ssm.epochs=2", "train.i2c.epochs=2", "realizer.epochs=1"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

#[test]
fn usage_and_config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&storyplan(dir.path(), &[], &["frobnicate"])), 1);
    assert_eq!(code(&storyplan(dir.path(), &[], &["plan", "--method", "nope"])), 1);
    let o = storyplan(dir.path(), &["graph.bogus=1".into()], &["build-graph"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));
    let o = storyplan(dir.path(), &["train.ssm.lr=-1".into()], &["build-graph"]);
    assert_eq!(code(&o), 1);
    assert_eq!(code(&storyplan(dir.path(), &[], &["--help"])), 0);
}

#[test]
fn missing_artifacts_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = storyplan(dir.path(), &[], &["evaluate", "--methods", "mcsm"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("plans-mcsm.jsonl"));
    assert_eq!(code(&storyplan(dir.path(), &[], &["plan", "--method", "ssm"])), 2);
    let o = storyplan(dir.path(), &["paths.kb=/nonexistent/kb.tsv".into()], &["build-graph"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn malformed_input_names_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, "{\"artifact\":\"dataset\",\"version\":\"0\",\"seed\":0}\n{not json\n").unwrap();
    let o = storyplan(dir.path(), &[format!("paths.train={}", bad.display())], &["build-graph"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
}

#[test]
fn every_method_runs_and_artifacts_carry_headers() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let run = |args: &[&str]| {
        let o = storyplan(out, &fast(), args);
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o
    };
    run(&["build-graph"]);
    for m in ["ssm", "mcsm", "i2c"] {
        run(&["train-planner", "--method", m]);
    }
    for m in ["rand", "i2c", "ssm", "mcsm"] {
        run(&["plan", "--method", m]);
    }
    run(&["train-realizer"]);
    for s in ["greedy", "beam", "nucleus", "template"] {
        run(&["realize", "--method", "ssm", "--strategy", s]);
        let stories = read_stories(&out.join("stories-ssm.jsonl")).unwrap();
        assert_eq!(stories.len(), 8);
        assert!(stories.iter().all(|s| s.sentences.len() == 5), "{s}");
    }
    let o = run(&["evaluate", "--methods", "rand,i2c,ssm,mcsm"]);
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.starts_with("Method\tPrecision\tRecall\tF"));
    assert_eq!(table.lines().count(), 5);

    for name in ["graphs-train.jsonl", "plans-mcsm.jsonl", "stories-ssm.jsonl", "planner-ssm.jsonl", "report.json", "vocab.jsonl"] {
        let (h, _): (_, Vec<serde_json::Value>) = read_jsonl(&out.join(name)).unwrap();
        let h = h.unwrap_or_else(|| panic!("{name} has no header"));
        assert_eq!(h.seed, 0, "{name}");
    }
    let tsv = std::fs::read_to_string(out.join("report.tsv")).unwrap();
    assert!(tsv.starts_with("# storyplan "));
}

#[test]
fn same_seed_gives_identical_plans() {
    let plans = |seed: u64| -> Vec<PlanRecord> {
        let dir = tempfile::tempdir().unwrap();
        let mut extra = fast();
        extra.push(format!("seed={seed}"));
        for args in [&["build-graph"][..], &["train-planner", "--method", "mcsm"], &["plan", "--method", "mcsm"]] {
            assert_eq!(code(&storyplan(dir.path(), &extra, args)), 0);
        }
        read_plans(&dir.path().join("plans-mcsm.jsonl")).unwrap()
    };
    assert_eq!(plans(3), plans(3));
}

#[test]
fn synth_data_writes_a_usable_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("synth");
    let o = Command::new(env!("CARGO_BIN_EXE_storyplan"))
        .args(["synth-data", "--sequences", "20", "--seed", "4", "--out"])
        .arg(&data)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    for f in ["train.jsonl", "test.jsonl", "kb.tsv", "embeddings.txt", "manifest.jsonl"] {
        assert!(data.join(f).exists(), "{f}");
    }
    let train = storyplan::data::load_dataset(&data.join("train.jsonl"), storyplan::data::Split::Train).unwrap();
    assert_eq!(train.len(), 16);
}
