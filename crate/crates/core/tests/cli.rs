use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn morphbench(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_morphbench"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env("MORPHBENCH_WORKERS", "1")
        .output()
        .expect("run morphbench")
}

fn ok(out: &Path, args: &[&str]) -> String {
    let o = morphbench(out, args);
    assert!(
        o.status.success(),
        "{args:?} failed with {:?}: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn error_of(o: &Output) -> Value {
    let line = String::from_utf8_lossy(&o.stderr);
    serde_json::from_str(line.trim()).unwrap_or_else(|e| panic!("stderr {line:?} is not JSON: {e}"))
}

/// Overrides that keep a whole pipeline to a few seconds.
const SMALL: &[&str] = &[
    "--set",
    "embedder_training.steps=15",
    "--set",
    "encoder_training.steps=15",
    "--set",
    "population.n_ids=6",
    "--set",
    "population.imgs_per_id=2",
    "--set",
    "inversion.steps=6",
    "--set",
    "bio_morph.steps=6",
    "--set",
    "campaign.n_friends=3",
];

fn small_pipeline(out: &Path, extra: &[&str]) {
    for cmd in [&["init"][..], &["train-embedder"], &["train-encoder"], &["gen-population"], &["campaign"]] {
        let mut args: Vec<&str> = SMALL.to_vec();
        args.extend_from_slice(extra);
        args.extend_from_slice(cmd);
        ok(out, &args);
    }
}

fn tree_files(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn selftest_passes() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(dir.path(), &["selftest"]);
    assert!(stdout.lines().filter(|l| l.starts_with("PASS ")).count() >= 35);
    assert!(!stdout.contains("FAIL "));
}

#[test]
fn pipeline_is_deterministic_and_config_round_trips() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    small_pipeline(a.path(), &[]);
    small_pipeline(b.path(), &[]);

    // Everything except the resolved config (which echoes the output path)
    // and the wall-clock timings must match byte for byte.
    let strip = |v: Vec<(String, Vec<u8>)>| -> Vec<(String, Vec<u8>)> {
        v.into_iter()
            .filter(|(p, _)| p != "config.resolved.json" && !p.ends_with("timings.json"))
            .collect()
    };
    let (fa, fb) = (strip(tree_files(a.path())), strip(tree_files(b.path())));
    assert_eq!(fa.iter().map(|f| &f.0).collect::<Vec<_>>(), fb.iter().map(|f| &f.0).collect::<Vec<_>>());
    for ((p, x), (_, y)) in fa.iter().zip(&fb) {
        assert!(x == y, "{p} differs between identical runs");
    }
    for f in ["report.json", "midpoint/scores.csv", "bio/roc.csv", "bio/histogram.csv", "accomplices.csv"] {
        assert!(a.path().join("campaign").join(f).exists(), "{f}");
    }
    let scores = std::fs::read_to_string(a.path().join("campaign/midpoint/scores.csv")).unwrap();
    assert!(scores.starts_with("kind,subject_a,subject_b,score\n"));
    for kind in ["genuine,", "imposter,", "mmmss,"] {
        assert!(scores.lines().any(|l| l.starts_with(kind)));
    }

    // Feeding the resolved config back in reproduces the run.
    let resolved = a.path().join("config.resolved.json");
    let cfg: Value = serde_json::from_str(&std::fs::read_to_string(&resolved).unwrap()).unwrap();
    assert_eq!(cfg["inversion"]["lambda_m"], 200.0);
    assert_eq!(cfg["population"]["n_ids"], 6);
    let rc = resolved.to_str().unwrap();
    for cmd in ["init", "train-embedder", "train-encoder", "gen-population", "campaign"] {
        ok(c.path(), &["--config", rc, cmd]);
    }
    assert_eq!(
        std::fs::read(a.path().join("campaign/report.json")).unwrap(),
        std::fs::read(c.path().join("campaign/report.json")).unwrap()
    );

    let report = ok(a.path(), &["report"]);
    assert!(report.contains("Fixed FAR") && report.contains("Fixed FRR"));
    assert!(report.contains("midpoint") && report.contains("bio"));
}

#[test]
fn different_seed_changes_outputs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    ok(a.path(), &["--seed", "1", "init"]);
    ok(b.path(), &["--seed", "2", "init"]);
    let differ = tree_files(&a.path().join("generator"))
        .iter()
        .zip(tree_files(&b.path().join("generator")))
        .any(|(x, y)| x.1 != y.1);
    assert!(differ);
}

#[test]
fn invert_and_morph_commands() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_pipeline(d, &[]);
    let img = d.join("population/images/id_0000/00.mten");
    let img2 = d.join("population/images/id_0001/00.mten");
    let (i1, i2) = (img.to_str().unwrap(), img2.to_str().unwrap());

    ok(d, &["invert", i1, "--steps", "5", "--name", "one"]);
    let inv = d.join("invert/one");
    for f in ["latent.mten", "reconstruction.png", "reconstruction.mten", "manifest.json"] {
        assert!(inv.join(f).exists(), "{f}");
    }
    let m: Value = serde_json::from_str(&std::fs::read_to_string(inv.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["trace"].as_array().unwrap().len(), 5);
    assert_eq!(m["config"]["lambda_r"], 1.5);
    assert_eq!(m["init"], "encoder");

    // Morphing a latent with itself reproduces its reconstruction exactly.
    let lat = inv.join("latent.mten");
    let l = lat.to_str().unwrap();
    ok(d, &["morph", "--method", "midpoint", i1, i1, "--latent-a", l, "--latent-b", l, "--name", "same"]);
    assert_eq!(
        std::fs::read(d.join("morph/midpoint/same/morph.mten")).unwrap(),
        std::fs::read(inv.join("reconstruction.mten")).unwrap()
    );

    ok(d, &["morph", "--method", "midpoint", i1, i2, "--steps", "4", "--name", "ab"]);
    ok(d, &["morph", "--method", "midpoint", i2, i1, "--steps", "4", "--name", "ba"]);
    assert_eq!(
        std::fs::read(d.join("morph/midpoint/ab/morph.mten")).unwrap(),
        std::fs::read(d.join("morph/midpoint/ba/morph.mten")).unwrap()
    );
    let mm: Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("morph/midpoint/ab/manifest.json")).unwrap()).unwrap();
    assert_eq!(mm["mmmss"].as_f64(), Some(mm["score_a"].as_f64().unwrap().min(mm["score_b"].as_f64().unwrap())));

    // Background mask: left half of the first source.
    let mask = morphbench::Tensor::from_fn(&[32, 32, 3], |i| if (i / 3) % 32 < 16 { 1.0 } else { 0.0 });
    let mask_path = d.join("mask.png");
    morphbench::imageio::write_png(&mask_path, &mask).unwrap();
    ok(d, &["morph", "--method", "bio", i1, i2, "--steps", "4", "--mask", mask_path.to_str().unwrap()]);
    let bm: Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("morph/bio/00-00/manifest.json")).unwrap()).unwrap();
    assert_eq!(bm["masked"], true);
    assert!(bm["background_mse"].as_f64().is_some());
    assert_eq!(bm["config"]["lambda_w"], 3.0);

    let re = Command::new(env!("CARGO_BIN_EXE_morphbench"))
        .args(["--out", d.to_str().unwrap(), "gen-population", "--images"])
        .arg(d.join("population/images"))
        .output()
        .unwrap();
    assert!(re.status.success(), "{}", String::from_utf8_lossy(&re.stderr));
}

#[test]
fn exit_codes_are_distinct() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();

    let usage = morphbench(d, &["no-such-command"]);
    assert_eq!(usage.status.code(), Some(2));

    let bad_key = morphbench(d, &["--set", "inversion.lamda_r=1", "init"]);
    assert_eq!(bad_key.status.code(), Some(3));
    assert_eq!(error_of(&bad_key)["error"], "config");

    let cfg = d.join("bad.json");
    std::fs::write(&cfg, "{ not json").unwrap();
    let malformed = morphbench(d, &["--config", cfg.to_str().unwrap(), "init"]);
    assert_eq!(malformed.status.code(), Some(3));

    let missing = morphbench(d, &["invert", "/nonexistent/image.png"]);
    assert_eq!(missing.status.code(), Some(4));
    assert_eq!(error_of(&missing)["error"], "missing_input");

    ok(d, &["init"]);
    let dims = morphbench(
        d,
        &[
            "--set",
            "generator.style_dim=32",
            "--set",
            "encoder.style_dim=32",
            "--set",
            "population.n_ids=2",
            "gen-population",
        ],
    );
    assert_eq!(dims.status.code(), Some(5), "{}", String::from_utf8_lossy(&dims.stderr));
    assert_eq!(error_of(&dims)["error"], "dimensions");

    let img = d.join("img.png");
    morphbench::imageio::write_png(&img, &morphbench::Tensor::full(&[32, 32, 3], 0.5)).unwrap();
    let numeric = morphbench(
        d,
        &["--set", "inversion.adam.lr=1e38", "invert", img.to_str().unwrap(), "--init", "mean-latent", "--steps", "20"],
    );
    assert_eq!(numeric.status.code(), Some(6), "{}", String::from_utf8_lossy(&numeric.stderr));
    assert_eq!(error_of(&numeric)["error"], "numeric");

    let no_report = morphbench(d, &["report"]);
    assert_eq!(no_report.status.code(), Some(4));
}

#[test]
fn every_run_writes_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["--seed", "7", "--set", "stats_samples=1000", "init"]);
    let v: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("config.resolved.json")).unwrap()).unwrap();
    assert_eq!(v["seed"], 7);
    assert_eq!(v["stats_samples"], 1000);
    assert_eq!(v["campaign"]["n_friends"], 50);
    assert!(v["campaign"]["seed"].is_u64());
    assert_eq!(v["campaign"]["far_targets"], serde_json::json!([1e-2, 1e-5]));
}
