use std::path::Path;
use std::process::{Command, Output};

use hic::io::{read_anchors, read_checkpoint, RunConfig};
use hic::xfusion::XFusionParams;

const CONFIG: &str = "seed = 3\nclips = 4\nframes = 4\njoints = 5\nfamilies = 2\nk = 4\nhidden = 8\nlayers = 1\nsteps = 3\nbatch_size = 2\ndomains = \"PE,MP(P),MR\"\n";

fn hic(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hic")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = hic(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Workspace {
    _dir: tempfile::TempDir,
    config: std::path::PathBuf,
    dataset: std::path::PathBuf,
    anchors: std::path::PathBuf,
}

fn workspace(extra: &str) -> Workspace {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(&config, format!("{CONFIG}{extra}")).unwrap();
    let dataset = dir.path().join("data.hic");
    let anchors = dir.path().join("anchors.hic");
    ok(&["synth", "--config", p(&config), "--out", p(&dataset)]);
    ok(&["sample-anchors", "--config", p(&config), "--dataset", p(&dataset), "--out", p(&anchors)]);
    Workspace {
        _dir: dir,
        config,
        dataset,
        anchors,
    }
}

#[test]
fn exit_codes() {
    let w = workspace("");
    assert_eq!(hic(&["train", "--bogus"]).status.code(), Some(1));
    let r = hic(&["sample-anchors", "--domains", "XYZ", "--dataset", p(&w.dataset), "--out", p(&w.anchors)]);
    assert_eq!(r.status.code(), Some(1));
    let missing = w.dataset.with_file_name("missing.hic");
    let r = hic(&["sample-anchors", "--dataset", p(&missing), "--out", p(&w.anchors)]);
    assert_eq!(r.status.code(), Some(2));
    let r = hic(&["retrieve", "--anchors", p(&w.dataset), "--anchor-index", "0"]);
    assert_eq!(r.status.code(), Some(2));
    let bad = w.config.with_file_name("bad.toml");
    std::fs::write(&bad, "learning_rate = -1.0\n").unwrap();
    let out = w.anchors.with_file_name("ck.hic");
    let r = hic(&[
        "train", "--config", p(&bad), "--dataset", p(&w.dataset), "--anchors", p(&w.anchors), "--out", p(&out),
    ]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("learning_rate"));
}

#[test]
fn zero_learning_rate_checkpoint_equals_init() {
    let w = workspace("learning_rate = 0.0\n");
    let out = w.anchors.with_file_name("ck.hic");
    ok(&[
        "train", "--config", p(&w.config), "--dataset", p(&w.dataset), "--anchors", p(&w.anchors), "--out", p(&out),
    ]);
    let cfg = RunConfig::load(&w.config).unwrap();
    let ck = read_checkpoint(&out).unwrap();
    let init = XFusionParams::init(cfg.network(4, 5), cfg.seed).unwrap();
    assert_eq!(ck.params, init);
    assert_eq!(ck.soft, read_anchors(&w.anchors).unwrap().soft);
    let log = std::fs::read_to_string(out.with_file_name("ck.hic.log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
}

#[test]
fn train_then_eval_is_repeatable() {
    let w = workspace("");
    let out = w.anchors.with_file_name("ck.hic");
    ok(&[
        "train", "--config", p(&w.config), "--dataset", p(&w.dataset), "--anchors", p(&w.anchors), "--out", p(&out),
    ]);
    let args = [
        "eval", "--config", p(&w.config), "--dataset", p(&w.dataset), "--anchors", p(&w.anchors), "--checkpoint",
        p(&out),
    ];
    let a = ok(&args);
    assert_eq!(a, ok(&args));
    let rows: Vec<serde_json::Value> = a.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[2]["metric"], "param_l2");
}

#[test]
fn retrieve_and_derive_report_json() {
    let w = workspace("");
    let r: serde_json::Value = serde_json::from_str(&ok(&[
        "retrieve", "--anchors", p(&w.anchors), "--anchor-index", "2",
    ]))
    .unwrap();
    assert_eq!(r["index"], 2);
    assert_eq!(r["similarity"], 0.0);
    let r: serde_json::Value = serde_json::from_str(&ok(&[
        "retrieve", "--config", p(&w.config), "--anchors", p(&w.anchors), "--dataset", p(&w.dataset), "--clip", "1",
        "--domain", "MP(P)",
    ]))
    .unwrap();
    assert!(r["similarity"].as_f64().unwrap() <= 0.0);
    let d: serde_json::Value = serde_json::from_str(
        ok(&["derive", "--dataset", p(&w.dataset), "--clip", "0", "--domain", "JC(M)"]).trim(),
    )
    .unwrap();
    assert_eq!(d["shape"], serde_json::json!([4, 5, 3]));
    assert!(d["joint_mask"].is_array());
}

#[test]
fn k_one_writes_only_the_rest_pose() {
    let w = workspace("");
    let one = w.anchors.with_file_name("one.hic");
    ok(&[
        "sample-anchors", "--config", p(&w.config), "--dataset", p(&w.dataset), "--k", "1", "--out", p(&one),
    ]);
    let set = read_anchors(&one).unwrap();
    assert_eq!(set.source_indices(), vec![None]);
}

#[test]
fn gradcheck_passes() {
    let out = ok(&["gradcheck"]);
    assert!(out.contains("PASS"), "{out}");
}
