//! Acceptance criteria 1-7, run in order in one process so that the runtime
//! limits are measured without other tests competing for the CPU.
//!
//! Prints one `ACCEPTANCE <n> PASS|FAIL` line per criterion and exits
//! non-zero if any criterion fails.

use std::path::Path;
use std::time::Instant;

use morphbench::cli;
use morphbench::morpher::{
    bio_morph, bio_objective, inversion_loss, invert, midpoint_morph, BioMorphConfig, BioNets, InitKind,
    InversionConfig, InversionMode, InversionNets, InversionResult,
};
use morphbench::nets::{Biometric, Encoder, Perceptual};
use morphbench::rng;
use morphbench::selftest;
use morphbench::stylegen::{Generator, LatentStack, LatentStats, Mapping};
use morphbench::vulneval::Population;
use serde_json::Value;

/// Step budgets of the campaign runs. The full defaults (500 / 300) would put
/// two 200-identity campaigns well past the runtime budget on one core.
const CAMPAIGN_INVERSION_STEPS: usize = 80;
const CAMPAIGN_BIO_STEPS: usize = 80;
/// Inversion budget for the midpoint latents compared against bio morphs.
const CONTRAST_INVERSION_STEPS: usize = 200;

struct Outcome {
    passed: bool,
    detail: String,
}

fn report(n: u32, title: &str, start: Instant, o: Outcome) -> bool {
    println!(
        "ACCEPTANCE {n} {} {title}: {} ({:.1}s)",
        if o.passed { "PASS" } else { "FAIL" },
        o.detail,
        start.elapsed().as_secs_f64()
    );
    o.passed
}

fn cli_ok(out: &Path, args: &[&str]) -> Result<(), String> {
    let mut argv = vec!["morphbench", "--out", out.to_str().expect("utf-8 temp path"), "--workers", "1"];
    argv.extend_from_slice(args);
    match cli::run(argv.clone()) {
        0 => Ok(()),
        code => Err(format!("{argv:?} exited with {code}")),
    }
}

/// init, train-embedder, train-encoder, gen-population, campaign. Returns the
/// campaign wall time in seconds.
fn pipeline(out: &Path) -> Result<f64, String> {
    cli_ok(out, &["--seed", "42", "init"])?;
    cli_ok(out, &["--seed", "42", "train-embedder"])?;
    cli_ok(out, &["--seed", "42", "train-encoder"])?;
    cli_ok(out, &["--seed", "42", "gen-population"])?;
    let inv = format!("inversion.steps={CAMPAIGN_INVERSION_STEPS}");
    let bio = format!("bio_morph.steps={CAMPAIGN_BIO_STEPS}");
    let start = Instant::now();
    cli_ok(out, &["--seed", "42", "--set", &inv, "--set", &bio, "campaign", "--method", "both"])?;
    Ok(start.elapsed().as_secs_f64())
}

struct Artifacts {
    gen: Generator,
    mapping: Mapping,
    stats: LatentStats,
    perceptual: Perceptual,
    biometric: Biometric,
    encoder: Encoder,
    population: Population,
}

impl Artifacts {
    fn load(dir: &Path) -> morphbench::Result<Self> {
        Ok(Artifacts {
            gen: Generator::load(dir.join("generator"))?,
            mapping: Mapping::load(dir.join("mapping"))?,
            stats: LatentStats::load(dir.join("latent_stats"))?,
            perceptual: Perceptual::load(dir.join("perceptual"))?,
            biometric: Biometric::load(dir.join("biometric"))?,
            encoder: Encoder::load(dir.join("encoder"))?,
            population: Population::load(dir.join("population"))?,
        })
    }

    fn inversion_nets(&self, with_encoder: bool) -> InversionNets<'_> {
        InversionNets {
            gen: &self.gen,
            perceptual: &self.perceptual,
            stats: &self.stats,
            encoder: with_encoder.then_some(&self.encoder),
        }
    }

    /// Held-out in-distribution image `k` of a named probe set.
    fn probe_image(&self, set: &str, k: usize) -> morphbench::Result<morphbench::Tensor<f32>> {
        let w = self.mapping.sample_identity(rng::derive(9, &format!("{set}-{k}")))?;
        self.gen.synthesize(&w)
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let checks = selftest::gradient_suite(10);
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<String> = checks.iter().filter(|c| !c.passed).map(|c| c.to_string()).collect();
    let worst = checks
        .iter()
        .filter_map(|c| c.detail.split("max rel err ").nth(1)?.split(',').next()?.parse::<f64>().ok())
        .fold(0.0, f64::max);
    Outcome {
        passed: failed.is_empty() && secs < 60.0,
        detail: if failed.is_empty() {
            format!("{} ops and nets x 10 seeds, max rel err {worst:.2e} <= 1e-4, {secs:.1}s < 60s", checks.len())
        } else {
            format!("failing: {}", failed.join("; "))
        },
    }
}

fn criterion_2() -> Outcome {
    let o = selftest::metric_suite(100);
    Outcome {
        passed: o.passed && o.seconds < 30.0,
        detail: format!("{}, {:.2}s < 30s", o.detail, o.seconds),
    }
}

/// Full-mode and tied-latent inversions of the 20 criterion-3 images.
struct InversionRuns {
    full: Vec<InversionResult>,
    tied: Vec<InversionResult>,
    full_seconds: f64,
}

fn inversion_runs(a: &Artifacts) -> morphbench::Result<InversionRuns> {
    let nets = a.inversion_nets(false);
    let full_cfg = InversionConfig {
        init: InitKind::MeanLatent,
        ..Default::default()
    };
    let tied_cfg = InversionConfig {
        mode: InversionMode::TiedLatent,
        ..full_cfg.clone()
    };
    let (mut full, mut tied, mut full_seconds) = (Vec::new(), Vec::new(), 0.0);
    for k in 0..20 {
        let x = a.probe_image("c3", k)?;
        let t = Instant::now();
        full.push(invert(&x, &nets, &full_cfg, None)?);
        full_seconds += t.elapsed().as_secs_f64();
        tied.push(invert(&x, &nets, &tied_cfg, None)?);
    }
    Ok(InversionRuns {
        full,
        tied,
        full_seconds,
    })
}

fn criterion_3(a: &Artifacts, runs: &InversionRuns) -> morphbench::Result<Outcome> {
    let mut worst_ratio = f32::INFINITY;
    let mut worst_mse: f64 = 0.0;
    for (k, r) in runs.full.iter().enumerate() {
        worst_ratio = worst_ratio.min(r.initial().total / r.best().total);
        worst_mse = worst_mse.max(r.reconstruction.mse(&a.probe_image("c3", k)?)?);
    }
    Ok(Outcome {
        passed: worst_mse <= 1e-2 && worst_ratio >= 100.0 && runs.full_seconds < 300.0,
        detail: format!(
            "20 images, 500 steps from mean latent: worst pixel MSE {worst_mse:.2e} <= 1e-2, \
             worst loss reduction {worst_ratio:.0}x >= 100x, {:.1}s < 300s",
            runs.full_seconds
        ),
    })
}

fn parse_records(path: &Path) -> Result<Vec<[f64; 3]>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    text.lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let p = |i: usize| f[i].parse::<f64>().map_err(|e| format!("{l}: {e}"));
            Ok([p(2)?, p(3)?, p(4)?])
        })
        .collect()
}

fn criterion_4(a: &Artifacts, runs: &InversionRuns, campaign_dir: &Path) -> morphbench::Result<Outcome> {
    let mut identical = 0;
    let mut symmetric = 0;
    let n = runs.full.len();
    for (k, r) in runs.full.iter().enumerate() {
        if midpoint_morph(&a.gen, &r.latent, &r.latent)? == r.reconstruction {
            identical += 1;
        }
        let other = &runs.full[(k + 1) % n].latent;
        if midpoint_morph(&a.gen, &r.latent, other)? == midpoint_morph(&a.gen, other, &r.latent)? {
            symmetric += 1;
        }
    }
    let mut records = 0;
    let mut exact_min = 0;
    for method in ["midpoint", "bio"] {
        let rows = parse_records(&campaign_dir.join(method).join("records.csv")).map_err(morphbench::Error::Invalid)?;
        records += rows.len();
        exact_min += rows.iter().filter(|[sa, sb, m]| *m == sa.min(*sb)).count();
    }
    Ok(Outcome {
        passed: identical == n && symmetric == n && records > 0 && exact_min == records,
        detail: format!(
            "identical-latent morph == reconstruction {identical}/{n}, symmetric {symmetric}/{n}, \
             mmmss == min(scores) on {exact_min}/{records} campaign records"
        ),
    })
}

fn criterion_5(a: &Artifacts, runs: &InversionRuns) -> morphbench::Result<Outcome> {
    let inets = a.inversion_nets(true);
    let bnets = BioNets {
        gen: &a.gen,
        biometric: &a.biometric,
        stats: &a.stats,
        encoder: Some(&a.encoder),
    };
    let icfg = InversionConfig {
        steps: CONTRAST_INVERSION_STEPS,
        ..Default::default()
    };
    let bcfg = BioMorphConfig::default();
    let ids = &a.population.identities;
    let pairs = 50.min(ids.len() / 2);
    let mut bio_wins = 0;
    let mut start_wins = 0;
    for k in 0..pairs {
        let x1 = ids[2 * k].representative_image();
        let x2 = ids[2 * k + 1].representative_image();
        let w1 = invert(x1, &inets, &icfg, None)?.latent;
        let w2 = invert(x2, &inets, &icfg, None)?.latent;
        let at_mid = bio_objective(x1, x2, &bnets, &bcfg, None, &LatentStack::midpoint(&w1, &w2)?)?;
        let r = bio_morph(x1, x2, &bnets, &bcfg)?;
        if r.best().total <= at_mid.total {
            bio_wins += 1;
        }
        if r.initial().total <= at_mid.total {
            start_wins += 1;
        }
    }
    let n = runs.full.len();
    let tied_better = runs
        .full
        .iter()
        .zip(&runs.tied)
        .filter(|(f, t)| t.best().total < f.best().total)
        .count();
    Ok(Outcome {
        passed: pairs == 50 && bio_wins * 10 >= pairs * 9 && tied_better * 10 <= n,
        detail: format!(
            "bio objective <= objective at midpoint latent on {bio_wins}/{pairs} pairs (>= 90%; \
             bio start point alone: {start_wins}/{pairs}); tied beats untied on {tied_better}/{n} (<= 10%)"
        ),
    })
}

fn report_json(dir: &Path) -> Result<(Vec<u8>, Value), String> {
    let path = dir.join("campaign").join("report.json");
    let bytes = std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let v = serde_json::from_slice(&bytes).map_err(|e| e.to_string())?;
    Ok((bytes, v))
}

fn criterion_6(dir_a: &Path, dir_b: &Path, secs_a: f64) -> Outcome {
    let res = (|| -> Result<Outcome, String> {
        let secs_b = pipeline(dir_b)?;
        let (bytes_a, rep) = report_json(dir_a)?;
        let (bytes_b, _) = report_json(dir_b)?;
        let methods = rep["methods"].as_array().ok_or("report has no methods")?;
        let mut shaped = methods.len() == 2;
        let mut separation = f64::INFINITY;
        let mut mmpmr = Vec::new();
        for m in methods {
            shaped &= m["fixed_far"].as_array().is_some_and(|v| !v.is_empty())
                && m["fixed_frr"].as_array().is_some_and(|v| !v.is_empty());
            separation = separation.min(m["summary"]["separation"].as_f64().unwrap_or(f64::NEG_INFINITY));
            mmpmr.push(format!(
                "{} MMPMR@FAR={} {}",
                m["method"].as_str().unwrap_or("?"),
                m["fixed_far"][0]["target"],
                m["fixed_far"][0]["mmpmr"]
            ));
        }
        let n_ids = rep["config"]["population"]["n_ids"].as_u64().unwrap_or(0);
        let identical = bytes_a == bytes_b;
        Ok(Outcome {
            passed: n_ids == 200 && shaped && separation >= 0.2 && identical && secs_a < 600.0 && secs_b < 600.0,
            detail: format!(
                "{n_ids} identities, both methods with fixed-FAR and fixed-FRR tables: {shaped}; \
                 separation {separation:.3} >= 0.2; report.json byte-identical across runs: {identical}; \
                 campaign {secs_a:.0}s / {secs_b:.0}s < 600s; {}",
                mmpmr.join(", ")
            ),
        })
    })();
    res.unwrap_or_else(|e| Outcome {
        passed: false,
        detail: e,
    })
}

fn criterion_7(a: &Artifacts) -> morphbench::Result<Outcome> {
    let nets = a.inversion_nets(true);
    let cfg = InversionConfig::default();
    let mean = a.stats.mean_stack(a.gen.config.layers)?;
    let mut wins = 0;
    for k in 0..50 {
        let x = a.probe_image("c7", k)?;
        let enc = inversion_loss(&x, &nets, &cfg, &a.encoder.encode(&x)?)?;
        let bar = inversion_loss(&x, &nets, &cfg, &mean)?;
        if enc.total < bar.total {
            wins += 1;
        }
    }
    Ok(Outcome {
        passed: wins >= 40,
        detail: format!("encoder init has lower step-0 loss on {wins}/50 images (>= 40)"),
    })
}

fn lib_outcome(r: morphbench::Result<Outcome>) -> Outcome {
    r.unwrap_or_else(|e| Outcome {
        passed: false,
        detail: format!("error: {e}"),
    })
}

fn main() {
    let total = Instant::now();
    let mut all = true;

    let t = Instant::now();
    all &= report(1, "gradient suite", t, criterion_1());
    let t = Instant::now();
    all &= report(2, "metric oracle suite", t, criterion_2());

    let tmp_a = tempfile::tempdir().expect("temp dir");
    let tmp_b = tempfile::tempdir().expect("temp dir");
    let t = Instant::now();
    let first = pipeline(tmp_a.path());
    println!(
        "pipeline run 1: {} ({:.1}s)",
        match &first {
            Ok(s) => format!("campaign {s:.1}s"),
            Err(e) => e.clone(),
        },
        t.elapsed().as_secs_f64()
    );
    let artifacts = first
        .as_ref()
        .map_err(|e| morphbench::Error::Invalid(e.clone()))
        .and_then(|_| Artifacts::load(tmp_a.path()));

    match &artifacts {
        Ok(a) => {
            let t = Instant::now();
            match inversion_runs(a) {
                Ok(runs) => {
                    all &= report(3, "inversion convergence", t, lib_outcome(criterion_3(a, &runs)));
                    let t = Instant::now();
                    all &= report(
                        4,
                        "morph structure",
                        t,
                        lib_outcome(criterion_4(a, &runs, &tmp_a.path().join("campaign"))),
                    );
                    let t = Instant::now();
                    all &= report(5, "method contrast", t, lib_outcome(criterion_5(a, &runs)));
                }
                Err(e) => {
                    for (n, title) in [(3, "inversion convergence"), (4, "morph structure"), (5, "method contrast")] {
                        all &= report(n, title, t, lib_outcome(Err(morphbench::Error::Invalid(format!("inversions: {e}")))));
                    }
                }
            }
        }
        Err(e) => {
            for (n, title) in [(3, "inversion convergence"), (4, "morph structure"), (5, "method contrast")] {
                all &= report(n, title, Instant::now(), lib_outcome(Err(morphbench::Error::Invalid(e.to_string()))));
            }
        }
    }

    let t = Instant::now();
    let c6 = match &first {
        Ok(secs) => criterion_6(tmp_a.path(), tmp_b.path(), *secs),
        Err(e) => Outcome {
            passed: false,
            detail: e.clone(),
        },
    };
    all &= report(6, "campaign end-to-end", t, c6);

    let t = Instant::now();
    let c7 = match &artifacts {
        Ok(a) => lib_outcome(criterion_7(a)),
        Err(e) => Outcome {
            passed: false,
            detail: e.to_string(),
        },
    };
    all &= report(7, "encoder value", t, c7);

    println!(
        "acceptance: {} ({:.1}s total)",
        if all { "all criteria pass" } else { "FAILED" },
        total.elapsed().as_secs_f64()
    );
    if !all {
        std::process::exit(1);
    }
}
