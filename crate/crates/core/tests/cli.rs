mod common;

use std::path::Path;
use std::process::{Command, Output};

fn cirkit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cirkit"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = cirkit(args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).display().to_string()
}

fn fixture() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    common::synthetic().write_to(dir.path());
    dir
}

#[test]
fn build_index_reports_and_rejects() {
    let dir = fixture();
    let d = dir.path();
    std::fs::write(
        d.join("gallery.sqemb.manifest.json"),
        r#"{"checkpoint":"ViT-B-32","dim":16,"count":50,"created_at":"2024-01-01T00:00:00Z"}"#,
    )
    .unwrap();
    let summary: serde_json::Value = serde_json::from_str(&ok(&["build-index", &p(d, "gallery.sqemb")])).unwrap();
    assert_eq!(summary["dim"], 16);
    assert_eq!(summary["count"], 50);
    assert_eq!(summary["checkpoint"], "ViT-B-32");
    assert!(!cirkit(&["build-index", &p(d, "gallery.sqemb"), "--dim", "512"]).status.success());

    let bytes = std::fs::read(d.join("gallery.sqemb")).unwrap();
    std::fs::write(d.join("cut.sqemb"), &bytes[..bytes.len() - 3]).unwrap();
    let out = cirkit(&["build-index", &p(d, "cut.sqemb")]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).to_lowercase().contains("truncated"));
}

fn retrieve(d: &Path, out: &str, extra: &[&str]) -> String {
    let mut args: Vec<String> = vec!["retrieve".into()];
    for (flag, name) in [
        ("--annotations", "queries.json"),
        ("--gallery", "gallery.sqemb"),
        ("--texts", "texts.sqemb"),
        ("--captions", "captions.sqemb"),
        ("--images", "images"),
        ("--out", out),
    ] {
        args.push(flag.into());
        args.push(p(d, name));
    }
    for a in ["--caption-endpoint", "mock:echo", "--rerank-endpoint", "mock:reverse", "--m", "2"]
        .iter()
        .chain(extra)
    {
        args.push(a.to_string());
    }
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

#[test]
fn retrieve_then_evaluate_and_rerank() {
    let dir = fixture();
    let d = dir.path();
    let table = retrieve(d, "run", &["--metrics", "R@1,R@5,Rs@1"]);
    assert!(table.contains("R@1") && table.contains("All (10 queries)") && table.contains("even"));
    for f in ["rankings.jsonl", "rankings_sqaf.jsonl", "rankings_subset.jsonl", "rerank_audit.jsonl", "captions.jsonl", "manifest.json", "metrics.json"] {
        assert!(d.join("run").join(f).is_file(), "{f} missing");
    }
    let ranking = std::fs::read_to_string(d.join("run/rankings.jsonl")).unwrap();
    assert_eq!(ranking.lines().count(), 10);
    let first: serde_json::Value = serde_json::from_str(ranking.lines().next().unwrap()).unwrap();
    // 50 images minus the excluded reference
    assert_eq!(first["candidates"].as_array().unwrap().len(), 49);
    assert!(ranking.contains("\"score\":0."));
    let audit = std::fs::read_to_string(d.join("run/rerank_audit.jsonl")).unwrap();
    assert!(audit.lines().all(|l| l.contains("\"status\":\"full\"") && l.contains("\"pi_final\":[3,2,1,0]")));
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("run/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["prompt_versions"]["rerank"], "rerank-v1");
    assert_eq!(manifest["config"]["k"], 4);
    assert_eq!(manifest["config_hash"].as_str().unwrap().len(), 64);

    // the standalone evaluate agrees with the run's own report
    let eval: serde_json::Value = serde_json::from_str(&ok(&[
        "evaluate",
        "--annotations",
        &p(d, "queries.json"),
        "--rankings",
        &p(d, "run/rankings.jsonl"),
        "--subset-rankings",
        &p(d, "run/rankings_subset.jsonl"),
        "--metrics",
        "R@1,R@5,Rs@1",
        "--json",
    ]))
    .unwrap();
    let run_report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("run/metrics.json")).unwrap()).unwrap();
    assert_eq!(eval["per_metric"], run_report["per_metric"]);

    // the standalone rerank over the fused dump reproduces the full run
    ok(&[
        "rerank",
        "--annotations",
        &p(d, "queries.json"),
        "--rankings",
        &p(d, "run/rankings_sqaf.jsonl"),
        "--images",
        &p(d, "images"),
        "--rerank-endpoint",
        "mock:reverse",
        "--m",
        "2",
        "--out",
        &p(d, "rr"),
    ]);
    assert_eq!(
        std::fs::read(d.join("rr/rerank_audit.jsonl")).unwrap(),
        std::fs::read(d.join("run/rerank_audit.jsonl")).unwrap()
    );
}

#[test]
fn no_ebr_equals_fused_dump() {
    let dir = fixture();
    let d = dir.path();
    retrieve(d, "plain", &["--no-ebr"]);
    retrieve(d, "full", &[]);
    assert_eq!(
        std::fs::read(d.join("plain/rankings.jsonl")).unwrap(),
        std::fs::read(d.join("full/rankings_sqaf.jsonl")).unwrap()
    );
    assert!(!d.join("plain/rerank_audit.jsonl").exists());
}

#[test]
fn config_file_and_overrides() {
    let dir = fixture();
    let d = dir.path();
    std::fs::write(
        d.join("run.toml"),
        "depth = 10\nebr = false\nmetrics = [\"R@1\", \"mAP@5\"]\n[fusion]\nalpha = 0.5\nbeta = 0.0\n[mllm_caption]\nendpoint_url = \"mock:fixed:never used\"\n",
    )
    .unwrap();
    let table = retrieve(d, "cfg", &["--config", &p(d, "run.toml"), "--alpha", "0.6"]);
    assert!(table.contains("mAP@5"));
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("cfg/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["fusion"]["alpha"], 0.6);
    assert_eq!(manifest["config"]["fusion"]["beta"], 0.0);
    let first = std::fs::read_to_string(d.join("cfg/rankings.jsonl")).unwrap();
    let v: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    assert_eq!(v["candidates"].as_array().unwrap().len(), 10);
    // β = 0 never asks for captions
    assert!(!d.join("cfg/captions.jsonl").exists());

    std::fs::write(d.join("bad.toml"), "k = 5\n").unwrap();
    let out = cirkit(&["evaluate", "--annotations", &p(d, "queries.json"), "--rankings", &p(d, "none.jsonl")]);
    assert!(!out.status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_cirkit"))
        .args(["caption", "--config", &p(d, "bad.toml"), "--annotations", &p(d, "queries.json")])
        .args(["--images", &p(d, "images"), "--out", &p(d, "x")])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("k = 5"));
}

#[test]
fn caption_command_writes_sidecar_input() {
    let dir = fixture();
    let d = dir.path();
    ok(&[
        "caption",
        "--annotations",
        &p(d, "queries.json"),
        "--images",
        &p(d, "images"),
        "--caption-endpoint",
        "mock:echo",
        "--out",
        &p(d, "caps"),
    ]);
    let text = std::fs::read_to_string(d.join("caps/captions.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert_eq!(first, serde_json::json!({"id": "q0", "text": "TARGET: turn g00 into g02"}));
    assert_eq!(text.lines().count(), 10);
}

#[test]
fn grid_command_renders_png() {
    let dir = fixture();
    let d = dir.path();
    retrieve(d, "run", &["--no-ebr"]);
    ok(&[
        "grid",
        "--rankings",
        &p(d, "run/rankings.jsonl"),
        "--query",
        "q3",
        "--images",
        &p(d, "images"),
        "--m",
        "3",
        "--out",
        &p(d, "q3.png"),
    ]);
    let img = image::open(d.join("q3.png")).unwrap().to_rgb8();
    assert_eq!(img.dimensions(), (768, 768));
    let ranking = std::fs::read_to_string(d.join("run/rankings.jsonl")).unwrap();
    let line: serde_json::Value = serde_json::from_str(ranking.lines().nth(3).unwrap()).unwrap();
    let first_id = line["candidates"][0]["id"].as_str().unwrap();
    let idx: usize = first_id[1..].parse().unwrap();
    assert_eq!(*img.get_pixel(128, 128), common::color(idx));
}

#[test]
fn grid_size_sweep() {
    let dir = fixture();
    let d = dir.path();
    let csv = ok(&[
        "sweep",
        "grid",
        "--annotations",
        &p(d, "queries.json"),
        "--gallery",
        &p(d, "gallery.sqemb"),
        "--texts",
        &p(d, "texts.sqemb"),
        "--captions",
        &p(d, "captions.sqemb"),
        "--images",
        &p(d, "images"),
        "--caption-endpoint",
        "mock:echo",
        "--rerank-endpoint",
        "mock:identity",
        "--ms",
        "2,3",
        "--metrics",
        "R@1,R@10",
        "--out",
        &p(d, "grid.csv"),
    ]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "m,k,R@1,R@10");
    assert!(lines[1].starts_with("2,4,") && lines[2].starts_with("3,9,"));
    // identity reranks leave every grid size at the fused scores
    assert_eq!(lines[1][4..], lines[2][4..]);
}

#[test]
fn shipped_config_matches_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
    let cfg = cirkit::pipeline::RunConfig::load(path).unwrap();
    cfg.validate().unwrap();
    assert_eq!(cfg.hash(), cirkit::pipeline::RunConfig::default().hash());
}
