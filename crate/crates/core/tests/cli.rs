use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use camixer::io::{read_grid, read_mask, read_pgm};
use camixer::preclassify::SampleSet;

const SMALL: &str =
    "scene.height = 40\nscene.width = 40\ntrain.epochs = 2\nmodel.blocks = 1\nmodel.channels = 5\n";

fn camixer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_camixer")).args(args).env("RAYON_NUM_THREADS", "1").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = camixer(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn generate_is_reproducible_with_default_extent() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["--seed", "5", "generate", "--out", s(&a)]);
    ok(&["--seed", "5", "generate", "--out", s(&b)]);
    for name in ["t1.camf", "t2.camf", "t1.pgm", "t2.pgm", "truth.pgm", "config.txt"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let t1 = read_grid(&a.join("t1.camf")).unwrap();
    assert_eq!(t1.dims(), (128, 128));
    let truth = read_mask(&a.join("truth.pgm")).unwrap();
    let frac = truth.count_ones() as f64 / truth.len() as f64;
    assert!((0.08..=0.15).contains(&frac), "changed fraction {frac}");
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "generate");
    assert!(manifest["rerun"].as_str().unwrap().contains("config.txt"));
}

#[test]
fn identical_dates_have_no_changed_samples() {
    let tmp = tempfile::tempdir().unwrap();
    let gen = tmp.path().join("gen");
    ok(&["--set", "scene.height=40", "--set", "scene.width=40", "generate", "--out", s(&gen)]);
    let t1 = gen.join("t1.camf");
    let out = camixer(&["train", "--t1", s(&t1), "--t2", s(&t1), "--out", s(&tmp.path().join("t"))]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no changed samples"));
}

#[test]
fn preclassify_writes_three_level_labels_and_loadable_samples() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("small.cfg");
    fs::write(&cfg, SMALL).unwrap();
    let (gen, out) = (tmp.path().join("gen"), tmp.path().join("pre"));
    ok(&["--config", s(&cfg), "generate", "--out", s(&gen)]);
    let (t1, t2) = (gen.join("t1.camf"), gen.join("t2.camf"));
    ok(&["--config", s(&cfg), "preclassify", "--t1", s(&t1), "--t2", s(&t2), "--out", s(&out)]);
    let labels = read_pgm(&out.join("labels.pgm")).unwrap();
    let mut levels: Vec<u16> = labels.samples.clone();
    levels.sort_unstable();
    levels.dedup();
    assert!(levels.iter().all(|l| [0, 32768, 65535].contains(l)), "{levels:?}");
    assert_eq!(levels.len(), 3);
    let bytes = fs::read(out.join("samples.cams")).unwrap();
    let samples = SampleSet::decode(&bytes).unwrap();
    assert_eq!(samples.encode(), bytes);
    assert_eq!(samples.count_label(0), samples.count_label(1));
    assert!(!samples.is_empty());
}

#[test]
fn evaluate_on_a_perfect_map_prints_full_scores() {
    let tmp = tempfile::tempdir().unwrap();
    let gen = tmp.path().join("gen");
    ok(&["--set", "scene.height=40", "--set", "scene.width=40", "generate", "--out", s(&gen)]);
    let truth = gen.join("truth.pgm");
    let stdout =
        ok(&["evaluate", "--changemap", s(&truth), "--truth", s(&truth), "--out", s(&tmp.path().join("e"))]);
    let mut lines = stdout.lines().skip_while(|l| !l.contains("PCC"));
    lines.next().expect("header");
    let values: Vec<&str> = lines.next().unwrap().split_whitespace().collect();
    assert_eq!(values, ["0", "0", "0", "100.00", "100.00"], "{stdout}");
    let csv = fs::read_to_string(tmp.path().join("e/metrics.csv")).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("0,0,0,1.000000,1.000000,"), "{csv}");
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(camixer(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(camixer(&["--set", "nope=1", "generate", "--out", s(tmp.path())]).status.code(), Some(2));
    assert_eq!(
        camixer(&["--set", "train.epochs=x", "generate", "--out", s(tmp.path())]).status.code(),
        Some(2)
    );
    let missing = tmp.path().join("missing.camf");
    let out = camixer(&[
        "preclassify",
        "--t1",
        s(&missing),
        "--t2",
        s(&missing),
        "--out",
        s(&tmp.path().join("p")),
    ]);
    assert_eq!(out.status.code(), Some(3));
    let junk = tmp.path().join("junk.camx");
    fs::write(&junk, b"not a model").unwrap();
    let out = camixer(&["predict", "--model", s(&junk), "--out", s(&tmp.path().join("q"))]);
    assert_eq!(out.status.code(), Some(3));
}
