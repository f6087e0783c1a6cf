//! Built-in verification suites: finite-difference gradient checks for every
//! differentiable op and network, and brute-force oracles for every rate and
//! threshold selector. Used by `morphbench selftest` and the test suite.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::gradcheck::check_gradients;
use crate::graph::{Graph, Var};
use crate::msssim::{ms_ssim, ms_ssim_graph, MsSsimConfig};
use crate::nets::{Biometric, BiometricConfig, Encoder, EncoderConfig, Perceptual, PerceptualConfig};
use crate::stylegen::{Generator, GeneratorConfig, LatentStats, Mapping};
use crate::tensor::Tensor;
use crate::vulneval::{
    far_at, frr_at, mmpmr_at, rates_at, roc_mmpmr_frr, threshold_at_far, threshold_at_frr, ScoreSet,
};

pub const GRAD_STEP: f64 = 1e-4;
pub const GRAD_TOL: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {} ({:.2}s) {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.seconds,
            self.detail
        )
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values with magnitude in `[0.05, 1]` and random sign, so kinks at
/// zero are at least `0.05` away.
fn away_from_zero(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = r.gen_range(0.05..1.0);
        if r.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn uniform(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| r.gen_range(lo..hi))
}

/// Reduce any node to a scalar by a fixed random weighting.
fn weighted(g: &mut Graph<f64>, x: Var, weights: &Tensor<f64>) -> Result<Var> {
    let w = g.constant(weights.clone());
    let m = g.mul(x, w)?;
    g.sum(m)
}

type Builder = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Vec<Tensor<f64>>,
    build: Builder,
    max_coords: usize,
}

fn elementwise(
    r: &mut ChaCha8Rng,
    shape: &[usize],
    input: Tensor<f64>,
    f: impl Fn(&mut Graph<f64>, Var) -> Result<Var> + 'static,
) -> Case {
    let out_w = uniform(r, shape, -1.0, 1.0);
    Case {
        inputs: vec![input],
        build: Box::new(move |g, v| {
            let y = f(g, v[0])?;
            weighted(g, y, &out_w)
        }),
        max_coords: 64,
    }
}

fn op_case(name: &str, seed: u64) -> Case {
    let mut r = rng(seed);
    let r = &mut r;
    match name {
        "conv2d" => {
            let inputs = vec![
                away_from_zero(r, &[2, 5, 5]),
                away_from_zero(r, &[3, 2, 3, 3]),
                away_from_zero(r, &[3]),
            ];
            let ow = uniform(r, &[3, 5, 5], -1.0, 1.0);
            Case {
                inputs,
                build: Box::new(move |g, v| {
                    let y = g.conv2d(v[0], v[1], v[2])?;
                    weighted(g, y, &ow)
                }),
                max_coords: 64,
            }
        }
        "linear" => {
            let inputs = vec![
                away_from_zero(r, &[4]),
                away_from_zero(r, &[3, 4]),
                away_from_zero(r, &[3]),
            ];
            let ow = uniform(r, &[3], -1.0, 1.0);
            Case {
                inputs,
                build: Box::new(move |g, v| {
                    let y = g.linear(v[0], v[1], v[2])?;
                    weighted(g, y, &ow)
                }),
                max_coords: 64,
            }
        }
        "upsample2x" => {
            let x = away_from_zero(r, &[2, 3, 3]);
            elementwise(r, &[2, 6, 6], x, |g, x| g.upsample2x(x))
        }
        "avg_downsample2x" => {
            let x = away_from_zero(r, &[2, 4, 4]);
            elementwise(r, &[2, 2, 2], x, |g, x| g.avg_downsample2x(x))
        }
        "leaky_relu" => {
            let x = away_from_zero(r, &[2, 3, 3]);
            elementwise(r, &[2, 3, 3], x, |g, x| g.leaky_relu(x, 0.2))
        }
        "relu" => {
            let x = away_from_zero(r, &[8]);
            elementwise(r, &[8], x, |g, x| g.relu(x))
        }
        "sigmoid" => {
            let x = uniform(r, &[8], -3.0, 3.0);
            elementwise(r, &[8], x, |g, x| g.sigmoid(x))
        }
        "instance_norm" => {
            let x = uniform(r, &[2, 4, 4], -1.0, 1.0);
            elementwise(r, &[2, 4, 4], x, |g, x| g.instance_norm(x))
        }
        "modulate" => {
            let inputs = vec![
                uniform(r, &[2, 3, 3], -1.0, 1.0),
                uniform(r, &[2], -1.0, 1.0),
                uniform(r, &[2], -1.0, 1.0),
            ];
            let ow = uniform(r, &[2, 3, 3], -1.0, 1.0);
            Case {
                inputs,
                build: Box::new(move |g, v| {
                    let y = g.modulate(v[0], v[1], v[2])?;
                    weighted(g, y, &ow)
                }),
                max_coords: 64,
            }
        }
        "add" | "sub" | "mul" | "div" => {
            let a = uniform(r, &[6], -1.0, 1.0);
            let b = if name == "div" {
                Tensor::from_fn(&[6], |_| {
                    let m = r.gen_range(0.5..2.0);
                    if r.gen_bool(0.5) {
                        m
                    } else {
                        -m
                    }
                })
            } else {
                uniform(r, &[6], -1.0, 1.0)
            };
            let ow = uniform(r, &[6], -1.0, 1.0);
            let op = name.to_string();
            Case {
                inputs: vec![a, b],
                build: Box::new(move |g, v| {
                    let y = match op.as_str() {
                        "add" => g.add(v[0], v[1])?,
                        "sub" => g.sub(v[0], v[1])?,
                        "mul" => g.mul(v[0], v[1])?,
                        _ => g.div(v[0], v[1])?,
                    };
                    weighted(g, y, &ow)
                }),
                max_coords: 64,
            }
        }
        "add_scalar" => {
            let x = uniform(r, &[6], -1.0, 1.0);
            let c = r.gen_range(-2.0..2.0);
            elementwise(r, &[6], x, move |g, x| g.add_scalar(x, c))
        }
        "scale" => {
            let x = uniform(r, &[6], -1.0, 1.0);
            let c = r.gen_range(-2.0..2.0);
            elementwise(r, &[6], x, move |g, x| g.scale(x, c))
        }
        "pow" => {
            let x = uniform(r, &[6], 0.2, 2.0);
            let p = r.gen_range(0.1..2.5);
            elementwise(r, &[6], x, move |g, x| g.pow(x, p))
        }
        "sum" | "mean" => {
            let x = uniform(r, &[2, 3], -1.0, 1.0);
            let c = r.gen_range(-2.0..2.0);
            let mean = name == "mean";
            Case {
                inputs: vec![x],
                build: Box::new(move |g, v| {
                    let s = if mean { g.mean(v[0])? } else { g.sum(v[0])? };
                    g.scale(s, c)
                }),
                max_coords: 64,
            }
        }
        "channel_mean" => {
            let x = uniform(r, &[3, 2, 2], -1.0, 1.0);
            elementwise(r, &[3], x, |g, x| g.channel_mean(x))
        }
        "mse" | "sq_dist" => {
            let inputs = vec![uniform(r, &[7], -1.0, 1.0), uniform(r, &[7], -1.0, 1.0)];
            let sq = name == "sq_dist";
            Case {
                inputs,
                build: Box::new(move |g, v| if sq { g.sq_dist(v[0], v[1]) } else { g.mse(v[0], v[1]) }),
                max_coords: 64,
            }
        }
        "l1_to_constant" => {
            let x = uniform(r, &[7], -1.0, 1.0);
            let offset = away_from_zero(r, &[7]);
            let target = x.zip_map(&offset, |a, b| a + b).expect("same shape");
            Case {
                inputs: vec![x],
                build: Box::new(move |g, v| g.l1_to_constant(v[0], &target)),
                max_coords: 64,
            }
        }
        "gaussian_blur" => {
            let x = uniform(r, &[2, 7, 6], -1.0, 1.0);
            let kernel = MsSsimConfig {
                window: 3,
                sigma: 0.8,
                max_val: 1.0,
            }
            .kernel::<f64>();
            elementwise(r, &[2, 5, 4], x, move |g, x| g.gaussian_blur(x, &kernel))
        }
        "reshape" => {
            let x = uniform(r, &[2, 3], -1.0, 1.0);
            elementwise(r, &[3, 2], x, |g, x| g.reshape(x, &[3, 2]))
        }
        "hwc_to_chw" => {
            let x = uniform(r, &[3, 4, 2], -1.0, 1.0);
            elementwise(r, &[2, 3, 4], x, |g, x| g.hwc_to_chw(x))
        }
        "chw_to_hwc" => {
            let x = uniform(r, &[2, 3, 4], -1.0, 1.0);
            elementwise(r, &[3, 4, 2], x, |g, x| g.chw_to_hwc(x))
        }
        "broadcast_rows" => {
            let x = uniform(r, &[4], -1.0, 1.0);
            elementwise(r, &[3, 4], x, |g, x| g.broadcast_rows(x, 3))
        }
        "row" => {
            let x = uniform(r, &[3, 4], -1.0, 1.0);
            elementwise(r, &[4], x, |g, x| g.row(x, 1))
        }
        "normalize" => {
            let x = uniform(r, &[5], -1.0, 1.0);
            elementwise(r, &[5], x, |g, x| g.normalize(x))
        }
        "dot" => {
            let inputs = vec![uniform(r, &[5], -1.0, 1.0), uniform(r, &[5], -1.0, 1.0)];
            Case {
                inputs,
                build: Box::new(|g, v| g.dot(v[0], v[1])),
                max_coords: 64,
            }
        }
        "ms_ssim" => {
            let a = uniform(r, &[32, 32, 3], 0.1, 0.9);
            let noise = uniform(r, &[32, 32, 3], -0.1, 0.1);
            let b = a.zip_map(&noise, |x, n| x + n).expect("same shape");
            let cfg = MsSsimConfig::default();
            Case {
                inputs: vec![a, b],
                build: Box::new(move |g, v| ms_ssim_graph(g, v[0], v[1], &cfg)),
                max_coords: 24,
            }
        }
        other => panic!("no gradient case for {other}"),
    }
}

/// Every op with a registered adjoint.
pub const GRAPH_OPS: &[&str] = &[
    "conv2d",
    "linear",
    "upsample2x",
    "avg_downsample2x",
    "leaky_relu",
    "relu",
    "sigmoid",
    "instance_norm",
    "modulate",
    "add",
    "sub",
    "mul",
    "div",
    "add_scalar",
    "scale",
    "pow",
    "sum",
    "mean",
    "channel_mean",
    "mse",
    "sq_dist",
    "l1_to_constant",
    "gaussian_blur",
    "reshape",
    "hwc_to_chw",
    "chw_to_hwc",
    "broadcast_rows",
    "row",
    "normalize",
    "dot",
    "ms_ssim",
];

pub const NETWORKS: &[&str] = &["generator", "perceptual", "biometric", "encoder"];

fn network_case(name: &str, seed: u64) -> Result<Case> {
    let mut r = rng(seed ^ 0x5eed);
    let gc = GeneratorConfig::default();
    Ok(match name {
        "generator" => {
            let gen = Generator::init(seed, gc)?;
            // probed in units of the latent spread: w = latent_scale * u
            let u = uniform(&mut r, &[gc.layers, gc.style_dim], -1.0, 1.0);
            let ow = uniform(&mut r, &gc.image_shape(), -1.0, 1.0);
            Case {
                inputs: vec![u],
                build: Box::new(move |g, v| {
                    let p = gen.params().bind(g, false);
                    let w = g.scale(v[0], gen.config.latent_scale)?;
                    let img = gen.forward(g, &p, w)?;
                    weighted(g, img, &ow)
                }),
                max_coords: 24,
            }
        }
        "perceptual" | "biometric" | "encoder" => {
            let x = uniform(&mut r, &gc.image_shape(), 0.0, 1.0);
            let build: Builder = match name {
                "perceptual" => {
                    let net = Perceptual::init(seed, PerceptualConfig::default())?;
                    let ow = uniform(&mut r, &[net.feature_len()], -1.0, 1.0);
                    Box::new(move |g, v| {
                        let p = net.params().bind(g, false);
                        let f = net.forward(g, &p, v[0])?;
                        weighted(g, f, &ow)
                    })
                }
                "biometric" => {
                    let net = Biometric::init(seed, BiometricConfig::default())?;
                    let ow = uniform(&mut r, &[net.config.embed_dim], -1.0, 1.0);
                    Box::new(move |g, v| {
                        let p = net.params().bind(g, false);
                        let e = net.forward(g, &p, v[0])?;
                        weighted(g, e, &ow)
                    })
                }
                _ => {
                    let stats = LatentStats {
                        mean: Tensor::full(&[gc.style_dim], 0.001),
                        std: Tensor::full(&[gc.style_dim], 0.01),
                        n: 1,
                    };
                    let net = Encoder::init(seed, EncoderConfig::default(), &stats)?;
                    let ow = uniform(&mut r, &[gc.style_dim], -100.0, 100.0);
                    Box::new(move |g, v| {
                        let p = net.params().bind(g, false);
                        let w = net.forward(g, &p, v[0])?;
                        weighted(g, w, &ow)
                    })
                }
            };
            Case {
                inputs: vec![x],
                build,
                max_coords: 24,
            }
        }
        other => panic!("no network case for {other}"),
    })
}

fn run_case(name: &str, cases: impl Iterator<Item = Result<Case>>) -> CheckOutcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut detail = String::new();
    let mut n = 0;
    let mut kinks = 0;
    for (seed, case) in cases.enumerate() {
        let res = case.and_then(|c| check_gradients(&c.inputs, GRAD_STEP, c.max_coords, &c.build));
        match res {
            Ok(rep) => {
                n += 1;
                kinks += rep.kink_reprobes;
                if rep.max_rel_err > worst {
                    worst = rep.max_rel_err;
                    detail = format!(
                        "seed {seed}: input {} coord {} analytic {:.6e} numeric {:.6e}",
                        rep.worst.0, rep.worst.1, rep.analytic, rep.numeric
                    );
                }
            }
            Err(e) => {
                return CheckOutcome {
                    name: format!("gradient {name}"),
                    passed: false,
                    detail: format!("seed {seed}: {e}"),
                    seconds: start.elapsed().as_secs_f64(),
                }
            }
        }
    }
    CheckOutcome {
        name: format!("gradient {name}"),
        passed: worst <= GRAD_TOL,
        detail: format!("{n} seeds, max rel err {worst:.2e}, {kinks} kink re-probes; worst {detail}"),
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Finite-difference checks of every graph op and network over `seeds` seeds.
pub fn gradient_suite(seeds: u64) -> Vec<CheckOutcome> {
    let mut out: Vec<CheckOutcome> = GRAPH_OPS
        .iter()
        .map(|&op| run_case(op, (0..seeds).map(|s| Ok(op_case(op, 1000 + s)))))
        .collect();
    out.extend(
        NETWORKS
            .iter()
            .map(|&net| run_case(net, (0..seeds).map(|s| network_case(net, 2000 + s)))),
    );
    out
}

/// Independent counting oracles.
mod brute {
    pub fn count_ge(v: &[f64], t: f64) -> usize {
        let mut c = 0;
        for &s in v {
            if s >= t {
                c += 1;
            }
        }
        c
    }

    pub fn far_threshold(imp: &[f64], target: f64) -> f64 {
        let n = imp.len() as f64;
        let mut best: Option<f64> = None;
        for &t in imp {
            if count_ge(imp, t) as f64 / n <= target && best.is_none_or(|b| t < b) {
                best = Some(t);
            }
        }
        best.unwrap_or_else(|| imp.iter().cloned().fold(f64::MIN, f64::max) + 1.0)
    }

    pub fn frr_threshold(gen: &[f64], target: f64) -> f64 {
        let n = gen.len() as f64;
        let mut best = f64::NEG_INFINITY;
        for &t in gen {
            let rejected = gen.len() - count_ge(gen, t);
            if rejected as f64 / n <= target && t > best {
                best = t;
            }
        }
        best
    }
}

fn random_scores(r: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64, quantize: bool) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let s: f64 = r.gen_range(lo..hi);
            if quantize {
                (s * 20.0).round() / 20.0
            } else {
                s
            }
        })
        .collect()
}

/// Random score set; list sizes drawn from `1..=max_len`, quantized on
/// alternate seeds so that ties occur.
pub fn random_score_set(seed: u64, max_len: usize) -> ScoreSet {
    let mut r = rng(seed);
    let q = seed.is_multiple_of(2);
    let ng = r.gen_range(1..=max_len);
    let ni = r.gen_range(1..=max_len);
    let nm = r.gen_range(1..=max_len);
    ScoreSet {
        genuine: random_scores(&mut r, ng, -0.2, 1.0, q),
        imposter: random_scores(&mut r, ni, -1.0, 0.6, q),
        mmmss: random_scores(&mut r, nm, -0.6, 1.0, q),
    }
}

/// Compare every rate and threshold selector against independent counting on
/// one score set. Returns a description of the first disagreement.
pub fn check_score_set(s: &ScoreSet, seed: u64) -> std::result::Result<(), String> {
    let mut r = rng(seed ^ 0xface);
    let e = |x: crate::Error| x.to_string();
    let n = |v: &[f64]| v.len() as f64;
    let mut probes: Vec<f64> = s.genuine.iter().chain(&s.imposter).chain(&s.mmmss).copied().collect();
    probes.extend([-2.0, 2.0, 0.0]);
    probes.extend((0..20).map(|_| r.gen_range(-1.5..1.5)));
    for &t in &probes {
        let rates = rates_at(s, t).map_err(e)?;
        let far = brute::count_ge(&s.imposter, t) as f64 / n(&s.imposter);
        let frr = (s.genuine.len() - brute::count_ge(&s.genuine, t)) as f64 / n(&s.genuine);
        let mmpmr = brute::count_ge(&s.mmmss, t) as f64 / n(&s.mmmss);
        if rates.far != far || rates.frr != frr || rates.mmpmr != mmpmr {
            return Err(format!("rates at {t}: {rates:?} vs brute ({far}, {frr}, {mmpmr})"));
        }
        if rates.rmmr != rates.mmpmr + rates.frr {
            return Err(format!("RMMR identity fails at {t}"));
        }
    }
    let mut targets: Vec<f64> = (0..10).map(|_| r.gen_range(0.0..1.0)).collect();
    targets.extend([1.0, 1e-5, 0.5 / n(&s.imposter)]);
    for &target in &targets {
        if target > 0.0 {
            let t = threshold_at_far(&s.imposter, target).map_err(e)?;
            let want = brute::far_threshold(&s.imposter, target);
            if t != want {
                return Err(format!("threshold_at_far({target}) = {t}, brute {want}"));
            }
            if far_at(&s.imposter, t).map_err(e)? > target {
                return Err(format!("FAR bound violated at target {target}"));
            }
        }
        let t = threshold_at_frr(&s.genuine, target).map_err(e)?;
        let want = brute::frr_threshold(&s.genuine, target);
        if t != want {
            return Err(format!("threshold_at_frr({target}) = {t}, brute {want}"));
        }
        if frr_at(&s.genuine, t).map_err(e)? > target {
            return Err(format!("FRR bound violated at target {target}"));
        }
    }
    let roc = roc_mmpmr_frr(s).map_err(e)?;
    for (i, p) in roc.iter().enumerate() {
        let frr = (s.genuine.len() - brute::count_ge(&s.genuine, p.threshold)) as f64 / n(&s.genuine);
        let mmpmr = brute::count_ge(&s.mmmss, p.threshold) as f64 / n(&s.mmmss);
        if p.frr != frr || p.mmpmr != mmpmr {
            return Err(format!("roc point {i} at {}: disagrees with brute force", p.threshold));
        }
        if mmpmr_at(&s.mmmss, p.threshold).map_err(e)? + p.frr != rates_at(s, p.threshold).map_err(e)?.rmmr {
            return Err(format!("RMMR identity fails on roc point {i}"));
        }
        if i > 0 {
            let q = &roc[i - 1];
            if !(q.threshold < p.threshold && q.frr <= p.frr && q.mmpmr >= p.mmpmr) {
                return Err(format!("roc not monotone between points {} and {i}", i - 1));
            }
        }
    }
    Ok(())
}

/// Oracle agreement over `n_sets` random score sets with list sizes up to 1000.
pub fn metric_suite(n_sets: u64) -> CheckOutcome {
    let start = Instant::now();
    let mut failure = None;
    for seed in 0..n_sets {
        let s = random_score_set(seed, 1000);
        if let Err(msg) = check_score_set(&s, seed) {
            failure = Some(format!("seed {seed}: {msg}"));
            break;
        }
    }
    CheckOutcome {
        name: "metric oracles".into(),
        passed: failure.is_none(),
        detail: failure.unwrap_or_else(|| format!("{n_sets} random score sets agree")),
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn msssim_identity() -> CheckOutcome {
    let start = Instant::now();
    let mut r = rng(7);
    let a = uniform(&mut r, &[32, 32, 3], 0.0, 1.0).cast::<f32>();
    let b = uniform(&mut r, &[32, 32, 3], 0.0, 1.0).cast::<f32>();
    let cfg = MsSsimConfig::default();
    let res = (|| -> Result<(f32, f32, f32)> {
        Ok((ms_ssim(&a, &a, &cfg)?, ms_ssim(&a, &b, &cfg)?, ms_ssim(&b, &a, &cfg)?))
    })();
    let (passed, detail) = match res {
        Ok((same, ab, ba)) => (
            (same - 1.0).abs() <= 1e-6 && ab == ba && (0.0..1.0).contains(&ab),
            format!("ms_ssim(a,a) = {same}, ms_ssim(a,b) = {ab}, ms_ssim(b,a) = {ba}"),
        ),
        Err(e) => (false, e.to_string()),
    };
    CheckOutcome {
        name: "ms-ssim identity and symmetry".into(),
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn mapping_determinism() -> CheckOutcome {
    let start = Instant::now();
    let res = (|| -> Result<bool> {
        let gc = GeneratorConfig::default();
        let m = Mapping::init(3, gc)?;
        let g = Generator::init(3, gc)?;
        let w = m.sample_identity(5)?;
        Ok(g.synthesize(&w)? == g.synthesize(&m.sample_identity(5)?)?)
    })();
    CheckOutcome {
        name: "synthesis determinism".into(),
        passed: matches!(res, Ok(true)),
        detail: match res {
            Ok(b) => format!("bit-identical: {b}"),
            Err(e) => e.to_string(),
        },
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Everything `morphbench selftest` runs.
pub fn run_all() -> Vec<CheckOutcome> {
    let mut out = gradient_suite(10);
    out.push(metric_suite(100));
    out.push(msssim_identity());
    out.push(mapping_determinism());
    out
}
