use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use copyforge::decision::validate_config;
use copyforge::ImageBuffer;
use tempfile::TempDir;

const SMALL: &str = "[backend]\ndim = 32\n[fusion]\ninput_dim = 32\nd_model = 32\n";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_copyforge"));
    c.env_remove("COPYFORGE_CACHE_DIR");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn pattern(seed: usize) -> ImageBuffer {
    ImageBuffer::from_fn(24, 24, |y, x, c| {
        (((y / 3 + seed) * (x / 2 + 1) + c * seed) % 7) as f64 / 6.0
    })
    .unwrap()
}

fn workspace() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("small.toml"), SMALL).unwrap();
    fs::create_dir(p.join("gallery")).unwrap();
    for i in 0..3 {
        pattern(i + 1)
            .save_png(&p.join(format!("gallery/ref{i}.png")))
            .unwrap();
    }
    pattern(1).save_png(&p.join("g.png")).unwrap();
    pattern(5).save_png(&p.join("other.png")).unwrap();
    dir
}

fn read(p: PathBuf) -> String {
    fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn detect_identical_pair_is_retrieve_with_defaults() {
    let w = workspace();
    ok(
        w.path(),
        &[
            "detect",
            "--generated",
            "g.png",
            "--reference",
            "gallery/ref0.png",
        ],
    );
    let line = read(w.path().join("out/verdicts.jsonl"));
    assert_eq!(line.lines().count(), 1);
    assert!(line.contains("\"copy_type\":\"retrieve\""), "{line}");
    assert!(read(w.path().join("out/effective_config.toml")).contains("tau1 = 0.938"));
}

#[test]
fn detect_missing_file_names_path() {
    let w = workspace();
    let out = run(
        w.path(),
        &[
            "detect",
            "--generated",
            "missing.png",
            "--reference",
            "g.png",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.png"));
}

#[test]
fn detect_manifest_writes_one_line_per_pair() {
    let w = workspace();
    fs::write(
        w.path().join("pairs.jsonl"),
        concat!(
            "{\"query\":\"g.png\",\"reference\":\"gallery/ref0.png\",\"label\":\"retrieve\"}\n",
            "{\"query\":\"g.png\",\"reference\":\"other.png\",\"label\":\"noncopy\"}\n",
            "{\"query\":\"other.png\",\"reference\":\"gallery/ref2.png\",\"label\":\"noncopy\"}\n",
        ),
    )
    .unwrap();
    let summary = ok(
        w.path(),
        &[
            "--config",
            "small.toml",
            "detect",
            "--manifest",
            "pairs.jsonl",
        ],
    );
    assert!(summary.contains("\"pairs\": 3"));
    assert!(summary.contains("\"evaluation\""));
    assert_eq!(read(w.path().join("out/verdicts.jsonl")).lines().count(), 3);
}

#[test]
fn usage_and_config_errors_exit_one() {
    let w = workspace();
    assert_eq!(run(w.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(w.path(), &["detect"]).status.code(), Some(1));
    fs::write(w.path().join("bad.toml"), "[decision]\nbogus = 1\n").unwrap();
    let out = run(
        w.path(),
        &["--config", "bad.toml", "perturb", "--image", "g.png"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
    assert_eq!(run(w.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn flags_override_config_file() {
    let w = workspace();
    fs::write(
        w.path().join("seeded.toml"),
        format!("seed = 5\nworkers = 2\n{SMALL}"),
    )
    .unwrap();
    ok(
        w.path(),
        &[
            "--config",
            "seeded.toml",
            "--seed",
            "7",
            "perturb",
            "--image",
            "g.png",
            "--attack",
            "flip_h",
        ],
    );
    let eff = read(w.path().join("out/effective_config.toml"));
    assert!(eff.contains("seed = 7"), "{eff}");
    assert!(eff.contains("workers = 2"), "{eff}");
    assert!(eff.contains("dim = 32"), "{eff}");
}

#[test]
fn index_and_retrieve() {
    let w = workspace();
    let p = w.path();
    ok(
        p,
        &[
            "--config",
            "small.toml",
            "index",
            "--gallery",
            "gallery",
            "--index",
            "idx",
        ],
    );
    let table = ok(
        p,
        &[
            "--config",
            "small.toml",
            "retrieve",
            "--query",
            "g.png",
            "--index",
            "idx",
            "-k",
            "5",
        ],
    );
    let rows: Vec<&str> = table.lines().collect();
    assert_eq!(rows.len(), 4, "{table}");
    assert!(
        rows[1].starts_with("1,ref0,1") || rows[1].starts_with("1,ref0,0.99999999"),
        "{table}"
    );

    // a different fusion seed makes the stored index stale
    fs::write(p.join("reseeded.toml"), format!("{SMALL}seed = 9\n")).unwrap();
    let out = run(
        p,
        &[
            "--config",
            "reseeded.toml",
            "retrieve",
            "--query",
            "g.png",
            "--index",
            "idx",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("rebuild"));

    let rate = ok(
        p,
        &[
            "--config",
            "small.toml",
            "retrieve",
            "--query",
            "gallery",
            "--index",
            "idx",
        ],
    );
    assert!(rate.contains("\"rate\": 1.0"), "{rate}");
}

#[test]
fn robustness_has_clean_plus_ten_rows() {
    let w = workspace();
    for side in ["generated", "reference"] {
        let csv = ok(
            w.path(),
            &[
                "--config",
                "small.toml",
                "robustness",
                "--generated",
                "g.png",
                "--reference",
                "gallery/ref0.png",
                "--side",
                side,
            ],
        );
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 12);
        assert!(lines[1].starts_with("clean,"));
        assert!(lines[11].starts_with("rotate,"));
    }
}

#[test]
fn augment_stub_and_bad_templates() {
    let w = workspace();
    let p = w.path();
    let sampled = ok(
        p,
        &[
            "--config",
            "small.toml",
            "augment",
            "--image",
            "g.png",
            "--prompt",
            "a park scene",
        ],
    );
    assert_eq!(sampled.trim(), "a park scene");
    let trace = read(p.join("out/augment_trace.jsonl"));
    assert_eq!(trace.lines().count(), 1);
    assert!(trace.contains("\"sampled\":\"a park scene\""));

    fs::write(
        p.join("t.txt"),
        "<p>, with a <c> in the <pos>\n<p> and <colour>\n",
    )
    .unwrap();
    let out = run(
        p,
        &[
            "augment",
            "--image",
            "g.png",
            "--prompt",
            "x",
            "--templates",
            "t.txt",
        ],
    );
    assert_ne!(out.status.code(), Some(0));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2") && err.contains("colour"), "{err}");

    fs::write(
        p.join("boxes.json"),
        r#"[{"box":{"x1":8,"y1":8,"x2":16,"y2":16},"class_label":"dog","confidence":0.9}]"#,
    )
    .unwrap();
    ok(
        p,
        &[
            "--config",
            "small.toml",
            "augment",
            "--image",
            "g.png",
            "--prompt",
            "a park",
            "--detections",
            "boxes.json",
        ],
    );
    assert!(read(p.join("out/augment_trace.jsonl")).contains("a park, with a dog in the center"));
}

#[test]
fn calibrate_planted_scores() {
    let w = workspace();
    let p = w.path();
    let mut lines = String::new();
    for i in 0..20 {
        let copy = 0.95 + i as f64 * 0.002;
        let non = 0.40 + i as f64 * 0.02;
        lines.push_str(&format!(
            "{{\"s_fus\":{copy},\"s_vis\":{copy},\"s_clip\":{copy},\"s_tex\":{copy},\"label\":\"copy\"}}\n"
        ));
        lines.push_str(&format!(
            "{{\"s_fus\":{non},\"s_vis\":{non},\"s_clip\":{non},\"s_tex\":{non},\"label\":\"noncopy\"}}\n"
        ));
    }
    fs::write(p.join("scores.jsonl"), lines).unwrap();
    let summary = ok(p, &["calibrate", "--scores", "scores.jsonl"]);
    assert!(summary.contains("\"tau1_accuracy\": 1.0"), "{summary}");
    assert!(read(p.join("out/sweep.csv")).starts_with("tau,accuracy,f1\n"));
    assert!(read(p.join("out/weights.csv")).starts_with("w_vis,w_clip,accuracy\n"));
    let fragment: copyforge::cli::RunConfig =
        toml::from_str(&read(p.join("out/calibrated.toml"))).unwrap();
    assert!(validate_config(&fragment.decision).is_empty());
    let tau = fragment.decision.tau1;
    assert!((0.78..0.95).contains(&tau), "{tau}");

    fs::write(
        p.join("one.jsonl"),
        "{\"s_fus\":0.9,\"s_vis\":0.9,\"s_clip\":0.9,\"s_tex\":0.9,\"label\":\"copy\"}\n",
    )
    .unwrap();
    let out = run(p, &["calibrate", "--scores", "one.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr)
        .to_lowercase()
        .contains("degenerate"));
}

#[test]
fn embedding_cache_directory_is_used() {
    let w = workspace();
    let cache = w.path().join("cache");
    let out = bin()
        .current_dir(w.path())
        .env("COPYFORGE_CACHE_DIR", &cache)
        .args([
            "--config",
            "small.toml",
            "detect",
            "--generated",
            "g.png",
            "--reference",
            "other.png",
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    let first = read(w.path().join("out/verdicts.jsonl"));
    let entries = fs::read_dir(&cache).unwrap().count();
    assert_eq!(entries, 1);
    let again = bin()
        .current_dir(w.path())
        .env("COPYFORGE_CACHE_DIR", &cache)
        .args([
            "--config",
            "small.toml",
            "detect",
            "--generated",
            "g.png",
            "--reference",
            "other.png",
        ])
        .output()
        .unwrap();
    assert!(again.status.success());
    assert_eq!(read(w.path().join("out/verdicts.jsonl")), first);
}

#[test]
fn example_config_is_the_default() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../copyforge.example.toml");
    let cfg = copyforge::cli::RunConfig::load(&path).unwrap();
    assert_eq!(cfg, copyforge::cli::RunConfig::default());
}
