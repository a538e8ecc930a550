use std::fs;
use std::path::Path;

use homoscale::evaluation::Category;
use homoscale::manifest::{parse_manifest, write_manifest, DatasetRecord};
use homoscale::synthesis::labelled_points;
use homoscale::Homography;
use homoscale_cli::{main_with_args, EstimateRecord};

const SMALL: [&str; 6] = ["--seed", "3", "--crop", "240x160", "--resize", "128"];

fn run(args: &[&str]) -> i32 {
    main_with_args(std::iter::once("homoscale").chain(args.iter().copied()).chain(SMALL))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen(dir: &Path, count: &str) -> std::path::PathBuf {
    let out = dir.join("gen");
    assert_eq!(run(&["gen", "--count", count, "--out", p(&out)]), 0);
    out.join("manifest.json")
}

#[test]
fn ground_truth_scores_zero() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen(dir.path(), "2");
    let records = parse_manifest(&manifest).unwrap();
    assert_eq!(records.len(), 2);
    assert!(records.iter().all(|r| r.chain.is_some() && r.points.len() >= 6));

    let out = dir.path().join("eval");
    assert_eq!(run(&["eval", "--manifest", p(&manifest), "--out", p(&out)]), 0);
    let csv = fs::read_to_string(out.join("records.csv")).unwrap();
    for line in csv.lines().skip(1) {
        assert_eq!(line.rsplit(',').next().unwrap(), "0", "{line}");
    }
    for f in ["report.csv", "report.txt", "curve.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }

    let svg = dir.path().join("plot.svg");
    assert_eq!(run(&["plot", "--input", p(&out.join("curve.csv")), "--out", p(&svg)]), 0);
    assert!(fs::read_to_string(svg).unwrap().starts_with("<svg"));
}

#[test]
fn self_pair_estimates_the_identity() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen(dir.path(), "1");
    let first = &parse_manifest(&manifest).unwrap()[0];
    let pts = labelled_points(&Homography::identity(), 240, 160).unwrap();
    let self_manifest = dir.path().join("gen/self.json");
    write_manifest(
        &self_manifest,
        &[DatasetRecord {
            id: Some("self".into()),
            source: first.source.clone(),
            target: first.source.clone(),
            points: pts.to_tuples(),
            category: Category::Regular,
            homography: None,
            chain: None,
        }],
    )
    .unwrap();
    let out = dir.path().join("est");
    assert_eq!(run(&["estimate", "--manifest", p(&self_manifest), "--out", p(&out)]), 0);
    let rec: EstimateRecord = serde_json::from_str(&fs::read_to_string(out.join("estimates/self.json")).unwrap()).unwrap();
    assert!(rec.error.is_none());
    assert!(rec.pme.unwrap() < 0.1, "{:?}", rec.pme);
}

#[test]
fn progressive_estimation_writes_every_pair() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen(dir.path(), "2");
    let out = dir.path().join("prog");
    assert_eq!(run(&["estimate", "--manifest", p(&manifest), "--progressive", "--out", p(&out)]), 0);
    let csv = fs::read_to_string(out.join("estimates.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let eval = dir.path().join("eval");
    assert_eq!(run(&["eval", "--manifest", p(&manifest), "--estimates", p(&out), "--out", p(&eval)]), 0);
}

#[test]
fn invalid_inputs_fail_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    assert_eq!(run(&["estimate", "--manifest", p(&dir.path().join("none.json")), "--out", p(&out)]), 1);

    let bad = dir.path().join("bad.json");
    fs::write(
        &bad,
        r#"[{"source":"a.png","target":"b.png","points":[[0,0,1,1],[1,0,2,1],[0,1,1,2]],"category":"RE-L"}]"#,
    )
    .unwrap();
    assert_eq!(run(&["estimate", "--manifest", p(&bad), "--out", p(&out)]), 1);
    fs::write(&bad, "[{").unwrap();
    assert_eq!(run(&["eval", "--manifest", p(&bad), "--out", p(&out)]), 1);
    assert_eq!(run(&["gen", "--ratio", "2", "--out", p(&out)]), 1);
    assert!(!out.exists());
}

#[test]
fn config_file_sets_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"seed": 99, "chain": {"crop_width": 240, "crop_height": 160}}"#).unwrap();
    let out = dir.path().join("gen");
    let status = main_with_args(["homoscale", "gen", "--count", "1", "--config", p(&cfg), "--out", p(&out)]);
    assert_eq!(status, 0);
    let written: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(written["seed"], 99);
    assert_eq!(written["chain"]["crop_width"], 240);
}
