//! The `morphbench` command-line tool. [`run`] parses arguments, executes one
//! command and returns the process exit code.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::config::{parse_override, RunConfig};
use crate::error::{exit, Error, Result};
use crate::imageio::{read_image, write_png};
use crate::morpher::{
    bio_morph_from, embedding_midpoint_deviation, invert, midpoint_morph, BackgroundMask, BioNets,
    InitKind, InversionMode, InversionNets, InversionResult, MorphMethod,
};
use crate::mten;
use crate::nets::{match_score, Biometric, Encoder, Perceptual};
use crate::rng;
use crate::selftest;
use crate::stylegen::{Generator, LatentStack, LatentStats, Mapping};
use crate::tensor::Tensor;
use crate::vulneval::{
    build_population, run_attack_campaign, select_accomplices, CampaignNets, MethodReport, Population,
};

#[derive(Parser, Debug)]
#[command(name = "morphbench", version, about = "Face-morphing attacks against a toy style-based generator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Top-level seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides the config file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for per-pair jobs.
    #[arg(long, global = true, env = "MORPHBENCH_WORKERS")]
    workers: Option<usize>,
    /// Override a config key, e.g. `--set inversion.steps=200`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum MethodArg {
    Midpoint,
    Bio,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum CampaignArg {
    Midpoint,
    Bio,
    Both,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ModeArg {
    Full,
    PixelOnly,
    TiedLatent,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum InitArg {
    Encoder,
    MeanLatent,
    Given,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Create the generator, mapping network, latent statistics and fixed nets.
    Init,
    /// Train the biometric embedder on synthetic identities.
    TrainEmbedder {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train the one-shot latent encoder.
    TrainEncoder {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Build and store the evaluation population.
    GenPopulation {
        #[arg(long)]
        n_ids: Option<usize>,
        /// Directory with one subdirectory of images per identity.
        #[arg(long)]
        images: Option<PathBuf>,
    },
    /// Invert one image into the latent space.
    Invert {
        image: PathBuf,
        #[arg(long)]
        name: Option<String>,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long, value_enum)]
        init: Option<InitArg>,
        /// Start latent (MTEN) for `--init given`.
        #[arg(long)]
        init_latent: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Morph two images.
    Morph {
        #[arg(long, value_enum)]
        method: MethodArg,
        a: PathBuf,
        b: PathBuf,
        /// Background mask image for the first source (bio method only).
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Skip inverting `a` and use this latent (midpoint method).
        #[arg(long)]
        latent_a: Option<PathBuf>,
        #[arg(long)]
        latent_b: Option<PathBuf>,
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Run the attack campaign on the stored population.
    Campaign {
        #[arg(long, value_enum, default_value = "both")]
        method: CampaignArg,
    },
    /// Print the campaign tables.
    Report,
    /// Gradient checks and metric oracles.
    Selftest,
}

/// Paths of all artifacts under an output directory.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }
    pub fn generator(&self) -> PathBuf {
        self.root.join("generator")
    }
    pub fn mapping(&self) -> PathBuf {
        self.root.join("mapping")
    }
    pub fn stats(&self) -> PathBuf {
        self.root.join("latent_stats")
    }
    pub fn perceptual(&self) -> PathBuf {
        self.root.join("perceptual")
    }
    pub fn biometric(&self) -> PathBuf {
        self.root.join("biometric")
    }
    pub fn encoder(&self) -> PathBuf {
        self.root.join("encoder")
    }
    pub fn population(&self) -> PathBuf {
        self.root.join("population")
    }
    pub fn campaign(&self) -> PathBuf {
        self.root.join("campaign")
    }
    pub fn logs(&self) -> PathBuf {
        self.root.join("logs")
    }
}

/// Component seeds derived from the top-level seed.
pub fn component_seed(cfg: &RunConfig, component: &str) -> u64 {
    rng::derive(cfg.seed, component)
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(v)? + "\n")?;
    Ok(())
}

fn write_trace_csv(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p)?;
    }
    let mut s = String::from(header);
    s.push('\n');
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

fn write_image(dir: &Path, stem: &str, img: &Tensor<f32>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_png(dir.join(format!("{stem}.png")), img)?;
    mten::write(dir.join(format!("{stem}.mten")), img)
}

fn stem_of(p: &Path) -> String {
    p.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("image")
        .to_string()
}

struct Ctx {
    cfg: RunConfig,
    layout: Layout,
    workers: usize,
}

impl Ctx {
    fn generator(&self) -> Result<Generator> {
        let g = Generator::load(self.layout.generator())?;
        if g.config != self.cfg.generator {
            return Err(Error::Dims(format!(
                "stored generator {:?} differs from configured {:?}",
                g.config, self.cfg.generator
            )));
        }
        Ok(g)
    }
    fn mapping(&self) -> Result<Mapping> {
        Mapping::load(self.layout.mapping())
    }
    fn stats(&self) -> Result<LatentStats> {
        LatentStats::load(self.layout.stats())
    }
    fn perceptual(&self) -> Result<Perceptual> {
        Perceptual::load(self.layout.perceptual())
    }
    fn biometric(&self) -> Result<Biometric> {
        Biometric::load(self.layout.biometric())
    }
    fn encoder(&self) -> Result<Option<Encoder>> {
        if self.layout.encoder().join("manifest.json").exists() {
            Encoder::load(self.layout.encoder()).map(Some)
        } else {
            Ok(None)
        }
    }
}

fn cmd_init(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let l = &ctx.layout;
    let gen = Generator::init(component_seed(cfg, "generator"), cfg.generator)?;
    let mapping = Mapping::init(component_seed(cfg, "mapping"), cfg.generator)?;
    let stats = mapping.map_and_average(cfg.stats_samples, component_seed(cfg, "latent-stats"))?;
    let perceptual = Perceptual::init(component_seed(cfg, "perceptual"), cfg.perceptual.clone())?;
    let bio = Biometric::init(component_seed(cfg, "biometric"), cfg.biometric.clone())?;
    gen.save(l.generator())?;
    mapping.save(l.mapping())?;
    stats.save(l.stats())?;
    perceptual.save(l.perceptual())?;
    bio.save(l.biometric())?;
    println!(
        "initialized generator ({} params), mapping, latent stats (n = {}), perceptual net (N_v = {}), biometric net under {}",
        gen.params().count(),
        stats.n,
        perceptual.feature_len(),
        l.root.display()
    );
    Ok(())
}

fn cmd_train_embedder(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let (gen, mapping, stats) = (ctx.generator()?, ctx.mapping()?, ctx.stats()?);
    let start = Instant::now();
    let initial = Biometric::init(component_seed(cfg, "biometric"), cfg.biometric.clone())?;
    let (bio, log) = initial.train(&gen, &mapping, &stats, &cfg.embedder_training)?;
    bio.save(ctx.layout.biometric())?;
    write_trace_csv(
        &ctx.layout.logs().join("embedder_loss.csv"),
        "step,loss",
        log.loss.iter().enumerate().map(|(i, l)| format!("{i},{l}")),
    )?;
    println!(
        "trained embedder: {} steps, loss {} -> {} ({:.1}s)",
        log.loss.len(),
        log.loss.first().copied().unwrap_or(f32::NAN),
        log.loss.last().copied().unwrap_or(f32::NAN),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn cmd_train_encoder(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let (gen, mapping, stats) = (ctx.generator()?, ctx.mapping()?, ctx.stats()?);
    let start = Instant::now();
    let initial = Encoder::init(component_seed(cfg, "encoder"), cfg.encoder.clone(), &stats)?;
    let (enc, trace) = initial.train(&gen, &mapping, &cfg.encoder_training)?;
    enc.save(ctx.layout.encoder())?;
    write_trace_csv(
        &ctx.layout.logs().join("encoder_loss.csv"),
        "step,loss",
        trace.iter().enumerate().map(|(i, l)| format!("{i},{l}")),
    )?;
    println!(
        "trained encoder: {} steps, loss {} -> {} ({:.1}s)",
        trace.len(),
        trace.first().copied().unwrap_or(f32::NAN),
        trace.last().copied().unwrap_or(f32::NAN),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

fn cmd_gen_population(ctx: &Ctx, images: Option<&Path>) -> Result<()> {
    let bio = ctx.biometric()?;
    let pop = match images {
        Some(dir) => Population::from_image_dir(dir, &bio)?,
        None => {
            let (gen, mapping, stats) = (ctx.generator()?, ctx.mapping()?, ctx.stats()?);
            build_population(&gen, &mapping, &bio, &stats, &ctx.cfg.population)?
        }
    };
    pop.save(ctx.layout.population())?;
    // Per-image files in the directory layout `gen-population --images` reads.
    let img_root = ctx.layout.population().join("images");
    for (i, id) in pop.identities.iter().enumerate() {
        let d = img_root.join(format!("id_{i:04}"));
        std::fs::create_dir_all(&d)?;
        for (k, x) in id.images.iter().enumerate() {
            mten::write(d.join(format!("{k:02}.mten")), x)?;
        }
    }
    let g: Vec<f64> = pop.genuine_pairs().iter().map(|p| p.score).collect();
    let i: Vec<f64> = pop.imposter_pairs().iter().map(|p| p.score).collect();
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let summary = json!({
        "n_ids": pop.len(),
        "imgs_per_id": pop.config.imgs_per_id,
        "n_genuine": g.len(),
        "n_imposter": i.len(),
        "genuine_mean": mean(&g),
        "imposter_mean": mean(&i),
    });
    write_json(&ctx.layout.population().join("summary.json"), &summary)?;
    println!("population: {}", serde_json::to_string(&summary)?);
    Ok(())
}

fn inversion_manifest(r: &InversionResult, cfg: &RunConfig, source: &Path, secs: f64) -> Value {
    json!({
        "source": source.display().to_string(),
        "config": cfg.inversion,
        "seed": cfg.seed,
        "init": r.init,
        "best_step": r.best_step,
        "initial": r.initial(),
        "best": r.best(),
        "trace": r.trace,
        "timings": { "seconds": secs },
    })
}

fn run_inversion(ctx: &Ctx, image: &Path, given: Option<&LatentStack>) -> Result<(InversionResult, f64)> {
    let (gen, perceptual, stats, encoder) = (ctx.generator()?, ctx.perceptual()?, ctx.stats()?, ctx.encoder()?);
    let x = read_image(image)?;
    let nets = InversionNets {
        gen: &gen,
        perceptual: &perceptual,
        stats: &stats,
        encoder: encoder.as_ref(),
    };
    let start = Instant::now();
    let r = invert(&x, &nets, &ctx.cfg.inversion, given)?;
    Ok((r, start.elapsed().as_secs_f64()))
}

fn read_latent(path: &Path) -> Result<LatentStack> {
    LatentStack::new(mten::read(path)?)
}

fn cmd_invert(ctx: &Ctx, image: &Path, name: Option<&str>, init_latent: Option<&Path>) -> Result<()> {
    let given = init_latent.map(read_latent).transpose()?;
    if ctx.cfg.inversion.init == InitKind::Given && given.is_none() {
        return Err(Error::Config("--init given needs --init-latent".into()));
    }
    let (r, secs) = run_inversion(ctx, image, given.as_ref())?;
    let dir = ctx.layout.root.join("invert").join(name.map(str::to_string).unwrap_or_else(|| stem_of(image)));
    std::fs::create_dir_all(&dir)?;
    mten::write(dir.join("latent.mten"), r.latent.tensor())?;
    write_image(&dir, "reconstruction", &r.reconstruction)?;
    write_json(&dir.join("manifest.json"), &inversion_manifest(&r, &ctx.cfg, image, secs))?;
    let b = r.best();
    println!(
        "inverted {}: loss {} -> {} (best step {}), pixel term {}, {:.1}s; outputs in {}",
        image.display(),
        r.initial().total,
        b.total,
        r.best_step,
        b.pixel,
        secs,
        dir.display()
    );
    Ok(())
}

fn load_mask(path: &Path, reference: &Tensor<f32>) -> Result<BackgroundMask> {
    let m = read_image(path)?;
    let (h, w) = (m.shape()[0], m.shape()[1]);
    let mask = Tensor::from_fn(&[h, w], |i| if m.data()[i * 3] >= 0.5 { 1.0 } else { 0.0 });
    BackgroundMask::new(mask, reference.clone())
}

#[allow(clippy::too_many_arguments)]
fn cmd_morph(
    ctx: &Ctx,
    method: MethodArg,
    a: &Path,
    b: &Path,
    mask: Option<&Path>,
    latent_a: Option<&Path>,
    latent_b: Option<&Path>,
    name: Option<&str>,
) -> Result<()> {
    let gen = ctx.generator()?;
    let (xa, xb) = (read_image(a)?, read_image(b)?);
    let bio = ctx.biometric().ok();
    let start = Instant::now();
    let name = name
        .map(str::to_string)
        .unwrap_or_else(|| format!("{}-{}", stem_of(a), stem_of(b)));
    let (method, dir) = match method {
        MethodArg::Midpoint => (MorphMethod::Midpoint, ctx.layout.root.join("morph").join("midpoint").join(&name)),
        MethodArg::Bio => (MorphMethod::Bio, ctx.layout.root.join("morph").join("bio").join(&name)),
    };
    std::fs::create_dir_all(&dir)?;
    let mut manifest = json!({
        "method": method,
        "sources": [a.display().to_string(), b.display().to_string()],
        "seed": ctx.cfg.seed,
    });
    let (img, latent) = match method {
        MorphMethod::Midpoint => {
            if mask.is_some() {
                return Err(Error::Config("--mask applies to the bio method only".into()));
            }
            let mut invert_or_read = |p: &Path, l: Option<&Path>, key: &str| -> Result<LatentStack> {
                match l {
                    Some(l) => read_latent(l),
                    None => {
                        let (r, secs) = run_inversion(ctx, p, None)?;
                        manifest[key] = inversion_manifest(&r, &ctx.cfg, p, secs);
                        Ok(r.latent)
                    }
                }
            };
            let wa = invert_or_read(a, latent_a, "inversion_a")?;
            let wb = invert_or_read(b, latent_b, "inversion_b")?;
            let m = LatentStack::midpoint(&wa, &wb)?;
            (midpoint_morph(&gen, &wa, &wb)?, m)
        }
        MorphMethod::Bio => {
            let bio = bio
                .as_ref()
                .ok_or_else(|| Error::Missing {
                    path: ctx.layout.biometric(),
                    detail: "bio morph needs a biometric net; run init / train-embedder".into(),
                })?;
            let (stats, encoder) = (ctx.stats()?, ctx.encoder()?);
            let nets = BioNets {
                gen: &gen,
                biometric: bio,
                stats: &stats,
                encoder: encoder.as_ref(),
            };
            let mask = mask.map(|m| load_mask(m, &xa)).transpose()?;
            let r = bio_morph_from(&xa, &xb, &nets, &ctx.cfg.bio_morph, mask.as_ref(), None)?;
            manifest["config"] = serde_json::to_value(&ctx.cfg.bio_morph)?;
            manifest["masked"] = json!(mask.is_some());
            manifest["init"] = serde_json::to_value(r.init)?;
            manifest["best_step"] = json!(r.best_step);
            manifest["initial"] = serde_json::to_value(r.initial())?;
            manifest["best"] = serde_json::to_value(r.best())?;
            manifest["trace"] = serde_json::to_value(&r.trace)?;
            if let Some(m) = &mask {
                manifest["background_mse"] = json!(m.masked_mse(&r.image)?);
            }
            (r.image, r.latent)
        }
    };
    write_image(&dir, "morph", &img)?;
    mten::write(dir.join("latent.mten"), latent.tensor())?;
    if let Some(bio) = &bio {
        let e = bio.embed(&img)?;
        let sa = match_score(&e, &bio.embed(&xa)?);
        let sb = match_score(&e, &bio.embed(&xb)?);
        manifest["score_a"] = json!(sa);
        manifest["score_b"] = json!(sb);
        manifest["mmmss"] = json!(sa.min(sb));
        manifest["embedding_midpoint_deviation"] = json!(embedding_midpoint_deviation(bio, &img, &xa, &xb)?);
    }
    manifest["timings"] = json!({ "seconds": start.elapsed().as_secs_f64() });
    write_json(&dir.join("manifest.json"), &manifest)?;
    println!(
        "{method} morph written to {} (mmmss {})",
        dir.display(),
        manifest.get("mmmss").map(|v| v.to_string()).unwrap_or_else(|| "n/a".into())
    );
    Ok(())
}

/// Run the campaign for `methods` and write `report.json`, `timings.json`
/// and per-method tables under `<out>/campaign`.
pub fn campaign(cfg: &RunConfig, out: &Path, methods: &[MorphMethod], workers: usize) -> Result<Value> {
    let ctx = Ctx {
        cfg: cfg.clone(),
        layout: Layout::new(out),
        workers,
    };
    let pop = Population::load(ctx.layout.population())?;
    let (gen, perceptual, bio, stats, encoder) = (
        ctx.generator()?,
        ctx.perceptual()?,
        ctx.biometric()?,
        ctx.stats()?,
        ctx.encoder()?,
    );
    let nets = CampaignNets {
        gen: &gen,
        perceptual: &perceptual,
        biometric: &bio,
        encoder: encoder.as_ref(),
        stats: &stats,
    };
    let pairs = select_accomplices(&pop, cfg.campaign.n_friends.min(pop.len().saturating_sub(1)), cfg.campaign.seed)?;
    let dir = ctx.layout.campaign();
    std::fs::create_dir_all(&dir)?;
    let mut acc = String::from("subject,accomplice,score\n");
    for p in &pairs {
        acc.push_str(&format!("{},{},{}\n", p.subject, p.accomplice, p.score));
    }
    std::fs::write(dir.join("accomplices.csv"), acc)?;
    let mut reports: Vec<MethodReport> = Vec::new();
    let mut timings = serde_json::Map::new();
    for &m in methods {
        let start = Instant::now();
        let outcome = run_attack_campaign(
            &pop,
            &pairs,
            m,
            &nets,
            &cfg.inversion,
            &cfg.bio_morph,
            &cfg.campaign,
            ctx.workers,
        )?;
        outcome.write_tables(dir.join(m.to_string()))?;
        timings.insert(m.to_string(), json!(start.elapsed().as_secs_f64()));
        reports.push(outcome.report());
    }
    let report = json!({
        "seed": cfg.seed,
        "config": {
            "population": pop.config,
            "campaign": cfg.campaign,
            "inversion": cfg.inversion,
            "bio_morph": cfg.bio_morph,
        },
        "accomplice_pairs": pairs.len(),
        "methods": reports,
    });
    write_json(&dir.join("report.json"), &report)?;
    write_json(&dir.join("timings.json"), &Value::Object(timings))?;
    Ok(report)
}

fn fmt_rate(v: &Value) -> String {
    match v.as_f64() {
        Some(x) => format!("{:.2}%", 100.0 * x),
        None => "n/a".into(),
    }
}

/// Render the fixed-FAR and fixed-FRR tables of a campaign report.
pub fn render_tables(report: &Value) -> String {
    let mut s = String::new();
    let methods = report["methods"].as_array().cloned().unwrap_or_default();
    for (title, key) in [("Fixed FAR", "fixed_far"), ("Fixed FRR", "fixed_frr")] {
        s.push_str(&format!("{title}\n"));
        s.push_str("method    target     threshold  FAR       FRR       MMPMR     RMMR\n");
        for m in &methods {
            for r in m[key].as_array().cloned().unwrap_or_default() {
                if r["refused"].as_bool() == Some(true) {
                    s.push_str(&format!(
                        "{:<9} {:<10} refused: target below 1/N_imposter\n",
                        m["method"].as_str().unwrap_or("?"),
                        r["target"].to_string()
                    ));
                    continue;
                }
                s.push_str(&format!(
                    "{:<9} {:<10} {:<10} {:<9} {:<9} {:<9} {}\n",
                    m["method"].as_str().unwrap_or("?"),
                    r["target"].to_string(),
                    r["threshold"].as_f64().map(|t| format!("{t:.4}")).unwrap_or_else(|| "n/a".into()),
                    fmt_rate(&r["far"]),
                    fmt_rate(&r["frr"]),
                    if r["mmpmr_undefined"].as_bool() == Some(true) {
                        "undefined".into()
                    } else {
                        fmt_rate(&r["mmpmr"])
                    },
                    fmt_rate(&r["rmmr"]),
                ));
            }
        }
        s.push('\n');
    }
    for m in &methods {
        let sm = &m["summary"];
        s.push_str(&format!(
            "{}: {} morphs, {} failures, genuine mean {}, imposter mean {}, mmmss mean {}, deviation mean {}\n",
            m["method"].as_str().unwrap_or("?"),
            sm["n_morphs"],
            m["failures"].as_array().map_or(0, |f| f.len()),
            sm["genuine_mean"],
            sm["imposter_mean"],
            sm["mmmss_mean"],
            m["deviation_mean"],
        ));
    }
    s
}

fn cmd_report(ctx: &Ctx) -> Result<()> {
    let path = ctx.layout.campaign().join("report.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Missing {
        path: path.clone(),
        detail: e.to_string(),
    })?;
    let report: Value = serde_json::from_str(&text)?;
    let tables = render_tables(&report);
    std::fs::write(ctx.layout.campaign().join("tables.txt"), &tables)?;
    print!("{tables}");
    Ok(())
}

fn cmd_selftest() -> Result<bool> {
    let outcomes = selftest::run_all();
    for o in &outcomes {
        println!("{o}");
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!("selftest: {} checks, {failed} failed", outcomes.len());
    Ok(failed == 0)
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut overrides = Vec::new();
    for s in &cli.set {
        overrides.push(parse_override(s)?);
    }
    if let Some(s) = cli.seed {
        overrides.push(("seed".into(), json!(s)));
    }
    if let Some(o) = &cli.out {
        overrides.push(("out".into(), json!(o.display().to_string())));
    }
    let mut push = |k: &str, v: Value| overrides.push((k.to_string(), v));
    match &cli.command {
        Command::TrainEmbedder { steps: Some(s) } => push("embedder_training.steps", json!(s)),
        Command::TrainEncoder { steps: Some(s) } => push("encoder_training.steps", json!(s)),
        Command::GenPopulation { n_ids: Some(n), .. } => push("population.n_ids", json!(n)),
        Command::Invert { mode, init, steps, .. } => {
            if let Some(m) = mode {
                push(
                    "inversion.mode",
                    serde_json::to_value(match m {
                        ModeArg::Full => InversionMode::Full,
                        ModeArg::PixelOnly => InversionMode::PixelOnly,
                        ModeArg::TiedLatent => InversionMode::TiedLatent,
                    })?,
                );
            }
            if let Some(i) = init {
                push(
                    "inversion.init",
                    serde_json::to_value(match i {
                        InitArg::Encoder => InitKind::Encoder,
                        InitArg::MeanLatent => InitKind::MeanLatent,
                        InitArg::Given => InitKind::Given,
                    })?,
                );
            }
            if let Some(s) = steps {
                push("inversion.steps", json!(s));
            }
        }
        Command::Morph { method, steps: Some(s), .. } => match method {
            MethodArg::Midpoint => push("inversion.steps", json!(s)),
            MethodArg::Bio => push("bio_morph.steps", json!(s)),
        },
        _ => {}
    }
    let doc = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Missing {
                path: p.clone(),
                detail: e.to_string(),
            })?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => Value::Null,
    };
    RunConfig::resolve(doc, &overrides)
}

fn execute(cli: Cli) -> Result<bool> {
    if let Command::Selftest = cli.command {
        return cmd_selftest();
    }
    let cfg = resolve(&cli)?;
    let workers = cli
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);
    let ctx = Ctx {
        layout: Layout::new(cfg.out.clone()),
        cfg,
        workers,
    };
    std::fs::create_dir_all(&ctx.layout.root)?;
    if !matches!(cli.command, Command::Report) {
        ctx.cfg.write_resolved(&ctx.layout.root)?;
    }
    match &cli.command {
        Command::Init => cmd_init(&ctx)?,
        Command::TrainEmbedder { .. } => cmd_train_embedder(&ctx)?,
        Command::TrainEncoder { .. } => cmd_train_encoder(&ctx)?,
        Command::GenPopulation { images, .. } => cmd_gen_population(&ctx, images.as_deref())?,
        Command::Invert {
            image,
            name,
            init_latent,
            ..
        } => cmd_invert(&ctx, image, name.as_deref(), init_latent.as_deref())?,
        Command::Morph {
            method,
            a,
            b,
            mask,
            latent_a,
            latent_b,
            name,
            ..
        } => cmd_morph(
            &ctx,
            *method,
            a,
            b,
            mask.as_deref(),
            latent_a.as_deref(),
            latent_b.as_deref(),
            name.as_deref(),
        )?,
        Command::Campaign { method } => {
            let methods: &[MorphMethod] = match method {
                CampaignArg::Midpoint => &[MorphMethod::Midpoint],
                CampaignArg::Bio => &[MorphMethod::Bio],
                CampaignArg::Both => &[MorphMethod::Midpoint, MorphMethod::Bio],
            };
            let report = campaign(&ctx.cfg, &ctx.layout.root, methods, ctx.workers)?;
            print!("{}", render_tables(&report));
        }
        Command::Report => cmd_report(&ctx)?,
        Command::Selftest => unreachable!("handled above"),
    }
    Ok(true)
}

fn error_kind(code: i32) -> &'static str {
    match code {
        exit::CONFIG => "config",
        exit::MISSING_INPUT => "missing_input",
        exit::DIMS => "dimensions",
        exit::NUMERIC => "numeric",
        _ => "other",
    }
}

/// Parse `args` (including the program name), run the command and return the
/// exit code. Errors are printed to stderr as one JSON object.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { exit::USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(true) => 0,
        Ok(false) => exit::NUMERIC,
        Err(e) => {
            let code = e.exit_code();
            eprintln!(
                "{}",
                json!({ "error": error_kind(code), "exit_code": code, "message": e.to_string() })
            );
            code
        }
    }
}
