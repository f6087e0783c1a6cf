//! Latent inversion, midpoint morphing and dual-biometric morphing.

use serde::{Deserialize, Serialize};

use crate::adam::{AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::msssim::{ms_ssim_graph, MsSsimConfig};
use crate::nets::{Biometric, Encoder, Perceptual};
use crate::stylegen::{Generator, LatentStack, LatentStats};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InversionMode {
    /// Independent per-layer rows, all loss terms.
    Full,
    /// Pixel reconstruction term only.
    PixelOnly,
    /// A single style vector broadcast to every layer.
    TiedLatent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    /// Encoder output when an encoder is supplied, otherwise the mean latent.
    Encoder,
    MeanLatent,
    /// Caller-supplied latent stack.
    Given,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionConfig {
    pub lambda_r: f64,
    pub lambda_w: f64,
    pub lambda_v: f64,
    pub lambda_m: f64,
    pub steps: usize,
    pub adam: AdamConfig,
    pub mode: InversionMode,
    pub init: InitKind,
    pub msssim: MsSsimConfig,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig {
            lambda_r: 1.5,
            lambda_w: 0.5,
            lambda_v: 0.4,
            lambda_m: 200.0,
            steps: 500,
            adam: AdamConfig::with_lr(2e-4),
            mode: InversionMode::Full,
            init: InitKind::Encoder,
            msssim: MsSsimConfig::default(),
        }
    }
}

fn check_lambdas(pairs: &[(&str, f64)]) -> Result<()> {
    for &(name, v) in pairs {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::Config(format!("{name} must be a finite non-negative number, got {v}")));
        }
    }
    Ok(())
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        check_lambdas(&[
            ("lambda_r", self.lambda_r),
            ("lambda_w", self.lambda_w),
            ("lambda_v", self.lambda_v),
            ("lambda_m", self.lambda_m),
        ])?;
        if self.steps == 0 {
            return Err(Error::Config("inversion needs steps >= 1".into()));
        }
        self.adam.validate()
    }
}

/// Per-term values of the inversion loss at one iterate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InversionTerms {
    pub total: f32,
    /// `lambda_v / N_v * ||F(G(w)) - F(x)||^2`
    pub perceptual: f32,
    /// `lambda_m * (1 - MS-SSIM(G(w), x))`
    pub msssim: f32,
    /// `lambda_r / N_x * ||G(w) - x||^2`
    pub pixel: f32,
    /// `lambda_w * ||w - mean||_1`
    pub latent: f32,
}

impl InversionTerms {
    /// The terms summed in the order the loss graph adds them.
    pub fn sum_of_terms(&self) -> f32 {
        ((self.perceptual + self.msssim) + self.pixel) + self.latent
    }
}

#[derive(Clone, Debug)]
pub struct InversionResult {
    /// Best iterate seen.
    pub latent: LatentStack,
    /// One entry per evaluated iterate; entry 0 is the initialization.
    pub trace: Vec<InversionTerms>,
    pub best_step: usize,
    pub reconstruction: Tensor<f32>,
    /// Initialization actually used.
    pub init: InitKind,
}

impl InversionResult {
    pub fn initial(&self) -> InversionTerms {
        self.trace[0]
    }

    pub fn best(&self) -> InversionTerms {
        self.trace[self.best_step]
    }
}

/// Fixed networks needed to evaluate the inversion loss.
#[derive(Clone, Copy)]
pub struct InversionNets<'a> {
    pub gen: &'a Generator,
    pub perceptual: &'a Perceptual,
    pub stats: &'a LatentStats,
    pub encoder: Option<&'a Encoder>,
}

fn check_source(gen: &Generator, x: &Tensor<f32>, what: &str) -> Result<()> {
    let want = gen.config.image_shape();
    if x.shape() != want {
        return Err(Error::Dims(format!(
            "{what} is {:?}, generator produces {want:?}",
            x.shape()
        )));
    }
    if !x.is_finite() || x.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Invalid(format!("{what} must have values in [0, 1]")));
    }
    Ok(())
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { node } => Error::Diverged {
            step,
            detail: format!("non-finite value at {node}"),
        },
        other => other,
    }
}

fn row_mean(w: &LatentStack) -> Tensor<f32> {
    let (l, d) = (w.layers(), w.dim());
    Tensor::from_fn(&[d], |k| {
        (0..l).map(|i| w.row(i)[k] as f64).sum::<f64>() as f32 / l as f32
    })
}

/// Precomputed per-target constants of the inversion loss.
struct InversionTarget {
    x: Tensor<f32>,
    features: Tensor<f32>,
    mean: Tensor<f32>,
}

impl InversionTarget {
    fn new(nets: &InversionNets, x: &Tensor<f32>) -> Result<Self> {
        let l = nets.gen.config.layers;
        Ok(InversionTarget {
            x: x.clone(),
            features: nets.perceptual.features(x)?,
            mean: nets.stats.mean_stack(l)?.into_tensor(),
        })
    }

    /// Loss graph at `var`; returns the total node and the term values.
    fn build(
        &self,
        g: &mut Graph<f32>,
        nets: &InversionNets,
        cfg: &InversionConfig,
        var: Var,
    ) -> Result<(Var, [Var; 4])> {
        let l = nets.gen.config.layers;
        let w = if cfg.mode == InversionMode::TiedLatent {
            g.broadcast_rows(var, l)?
        } else {
            var
        };
        let gp = nets.gen.params().bind(g, false);
        let img = nets.gen.forward(g, &gp, w)?;
        let x = g.constant(self.x.clone());
        let zero = || Tensor::scalar(0f32);
        let (perc, ms, lat) = if cfg.mode == InversionMode::PixelOnly {
            (g.constant(zero()), g.constant(zero()), g.constant(zero()))
        } else {
            let pp = nets.perceptual.params().bind(g, false);
            let f = nets.perceptual.forward(g, &pp, img)?;
            let ft = g.constant(self.features.clone());
            let fd = g.mse(f, ft)?;
            let perc = g.scale(fd, cfg.lambda_v)?;
            let s = ms_ssim_graph(g, img, x, &cfg.msssim)?;
            let one_minus = {
                let neg = g.scale(s, -1.0)?;
                g.add_scalar(neg, 1.0)?
            };
            let ms = g.scale(one_minus, cfg.lambda_m)?;
            let l1 = g.l1_to_constant(w, &self.mean)?;
            let lat = g.scale(l1, cfg.lambda_w)?;
            (perc, ms, lat)
        };
        let pd = g.mse(img, x)?;
        let pix = g.scale(pd, cfg.lambda_r)?;
        let t = g.add(perc, ms)?;
        let t = g.add(t, pix)?;
        let total = g.add(t, lat)?;
        Ok((total, [perc, ms, pix, lat]))
    }
}

fn terms_of(g: &Graph<f32>, total: Var, parts: [Var; 4]) -> InversionTerms {
    InversionTerms {
        total: g.scalar(total),
        perceptual: g.scalar(parts[0]),
        msssim: g.scalar(parts[1]),
        pixel: g.scalar(parts[2]),
        latent: g.scalar(parts[3]),
    }
}

/// Loss terms of `w` as an inversion of `x`, without optimizing.
pub fn inversion_loss(
    x: &Tensor<f32>,
    nets: &InversionNets,
    cfg: &InversionConfig,
    w: &LatentStack,
) -> Result<InversionTerms> {
    check_source(nets.gen, x, "target image")?;
    let target = InversionTarget::new(nets, x)?;
    let mut g = Graph::<f32>::new();
    let v = if cfg.mode == InversionMode::TiedLatent {
        g.constant(row_mean(w))
    } else {
        g.constant(w.tensor().clone())
    };
    let (total, parts) = target.build(&mut g, nets, cfg, v)?;
    Ok(terms_of(&g, total, parts))
}

/// Initial latent stack for inverting `x`, and the initialization used.
pub fn initial_latent(
    x: &Tensor<f32>,
    nets: &InversionNets,
    init: InitKind,
    given: Option<&LatentStack>,
) -> Result<(LatentStack, InitKind)> {
    let l = nets.gen.config.layers;
    match (init, nets.encoder) {
        (InitKind::Given, _) => {
            let w = given.ok_or_else(|| Error::Config("init \"given\" needs a latent".into()))?;
            Ok((w.clone(), InitKind::Given))
        }
        (InitKind::Encoder, Some(e)) => Ok((e.encode(x)?, InitKind::Encoder)),
        _ => Ok((nets.stats.mean_stack(l)?, InitKind::MeanLatent)),
    }
}

/// Find a latent stack whose image reproduces `x`.
///
/// Minimizes perceptual feature distance, MS-SSIM dissimilarity, pixel MSE
/// and the L1 pull toward the mean latent with Adam, and returns the best
/// iterate. `given` is used when `cfg.init` is [`InitKind::Given`].
pub fn invert(
    x: &Tensor<f32>,
    nets: &InversionNets,
    cfg: &InversionConfig,
    given: Option<&LatentStack>,
) -> Result<InversionResult> {
    cfg.validate()?;
    check_source(nets.gen, x, "target image")?;
    nets.stats.require_for_inversion()?;
    let gc = nets.gen.config;
    let (w0, init) = initial_latent(x, nets, cfg.init, given)?;
    if w0.layers() != gc.layers || w0.dim() != gc.style_dim {
        return Err(Error::Dims(format!(
            "initial latent is {}x{}, generator expects {}x{}",
            w0.layers(),
            w0.dim(),
            gc.layers,
            gc.style_dim
        )));
    }
    let target = InversionTarget::new(nets, x)?;
    let mut vars = vec![if cfg.mode == InversionMode::TiedLatent {
        row_mean(&w0)
    } else {
        w0.into_tensor()
    }];
    let mut adam = AdamState::new(cfg.adam, &vars);
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut best = (f32::INFINITY, 0, vars[0].clone());
    for step in 0..cfg.steps {
        let mut g = Graph::<f32>::new();
        let v = g.variable(vars[0].clone());
        let (total, parts) = target.build(&mut g, nets, cfg, v).map_err(|e| diverged(step, e))?;
        let terms = terms_of(&g, total, parts);
        if !terms.total.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("inversion loss {}", terms.total),
            });
        }
        trace.push(terms);
        if terms.total < best.0 {
            best = (terms.total, step, vars[0].clone());
        }
        if step + 1 == cfg.steps {
            break;
        }
        let mut grads = g.backward(total).map_err(|e| diverged(step, e))?;
        let gw = grads.take(v, vars[0].shape());
        adam.step(&mut vars, &[gw]).map_err(|e| Error::Diverged {
            step,
            detail: e.to_string(),
        })?;
    }
    let (_, best_step, w) = best;
    let latent = if cfg.mode == InversionMode::TiedLatent {
        LatentStack::tied(&w, gc.layers)?
    } else {
        LatentStack::new(w)?
    };
    let reconstruction = nets.gen.synthesize(&latent)?;
    Ok(InversionResult {
        latent,
        trace,
        best_step,
        reconstruction,
        init,
    })
}

/// Image of the elementwise mean of two latent stacks.
pub fn midpoint_morph(gen: &Generator, w1: &LatentStack, w2: &LatentStack) -> Result<Tensor<f32>> {
    gen.synthesize(&LatentStack::midpoint(w1, w2)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BioMorphConfig {
    pub lambda_w: f64,
    /// Weight on the two embedding-distance terms.
    pub lambda_bio: f64,
    /// Weight of the background reconstruction term of masked morphs.
    pub lambda_bg: f64,
    pub steps: usize,
    pub adam: AdamConfig,
    /// Start from the mean of the two encoder outputs when an encoder is given.
    pub use_encoder: bool,
}

impl Default for BioMorphConfig {
    fn default() -> Self {
        BioMorphConfig {
            lambda_w: 3.0,
            lambda_bio: 1.0,
            lambda_bg: 1.5,
            steps: 300,
            adam: AdamConfig::with_lr(2e-4),
            use_encoder: true,
        }
    }
}

impl BioMorphConfig {
    pub fn validate(&self) -> Result<()> {
        check_lambdas(&[
            ("lambda_w", self.lambda_w),
            ("lambda_bio", self.lambda_bio),
            ("lambda_bg", self.lambda_bg),
        ])?;
        if self.steps == 0 {
            return Err(Error::Config("bio morph needs steps >= 1".into()));
        }
        self.adam.validate()
    }
}

/// Per-term values of the dual-biometric objective at one iterate.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BioTerms {
    pub total: f32,
    /// `lambda_bio * ||B(G(w)) - B(x1)||^2`
    pub bio_a: f32,
    /// `lambda_bio * ||B(G(w)) - B(x2)||^2`
    pub bio_b: f32,
    /// `lambda_w * ||w - mean||_1`
    pub latent: f32,
    /// `lambda_bg / N_bg * ||mask * (G(w) - x_ref)||^2`, zero without a mask.
    pub background: f32,
}

impl BioTerms {
    pub fn sum_of_terms(&self) -> f32 {
        ((self.bio_a + self.bio_b) + self.latent) + self.background
    }

    /// Objective without the background term.
    pub fn dual_objective(&self) -> f32 {
        (self.bio_a + self.bio_b) + self.latent
    }
}

#[derive(Clone, Debug)]
pub struct BioMorphResult {
    pub image: Tensor<f32>,
    pub latent: LatentStack,
    pub trace: Vec<BioTerms>,
    pub best_step: usize,
    pub init: InitKind,
}

impl BioMorphResult {
    pub fn initial(&self) -> BioTerms {
        self.trace[0]
    }

    pub fn best(&self) -> BioTerms {
        self.trace[self.best_step]
    }
}

/// Background constraint for masked morphs: `mask` is `[R, R]` with 1 on
/// background pixels of `reference`.
#[derive(Clone, Debug)]
pub struct BackgroundMask {
    pub mask: Tensor<f32>,
    pub reference: Tensor<f32>,
}

impl BackgroundMask {
    pub fn new(mask: Tensor<f32>, reference: Tensor<f32>) -> Result<Self> {
        let shape = reference.shape();
        if shape.len() != 3 || mask.shape() != &shape[..2] {
            return Err(Error::Dims(format!(
                "mask is {:?}, reference image is {:?}",
                mask.shape(),
                shape
            )));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Invalid("mask must be binary (0 or 1)".into()));
        }
        Ok(BackgroundMask { mask, reference })
    }

    /// Masked value count `N_bg` over all three channels.
    pub fn count(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v == 1.0).count() * 3
    }

    /// Mean squared error of `img` against the reference on masked pixels.
    pub fn masked_mse(&self, img: &Tensor<f32>) -> Result<f64> {
        if img.shape() != self.reference.shape() {
            return Err(Error::Dims(format!(
                "image {:?} vs mask reference {:?}",
                img.shape(),
                self.reference.shape()
            )));
        }
        let n = self.count();
        if n == 0 {
            return Ok(0.0);
        }
        let s: f64 = img
            .data()
            .iter()
            .zip(self.reference.data())
            .enumerate()
            .filter(|(i, _)| self.mask.data()[i / 3] == 1.0)
            .map(|(_, (&a, &b))| (a as f64 - b as f64).powi(2))
            .sum();
        Ok(s / n as f64)
    }

    fn expanded(&self) -> Tensor<f32> {
        Tensor::from_fn(self.reference.shape(), |i| self.mask.data()[i / 3])
    }
}

struct BioTarget {
    e1: Tensor<f32>,
    e2: Tensor<f32>,
    mean: Tensor<f32>,
    mask: Option<(Tensor<f32>, Tensor<f32>, usize)>,
}

impl BioTarget {
    fn new(
        gen: &Generator,
        bio: &Biometric,
        stats: &LatentStats,
        x1: &Tensor<f32>,
        x2: &Tensor<f32>,
        mask: Option<&BackgroundMask>,
    ) -> Result<Self> {
        check_source(gen, x1, "first source image")?;
        check_source(gen, x2, "second source image")?;
        let mask = match mask {
            Some(m) => {
                check_source(gen, &m.reference, "mask reference image")?;
                let n = m.count();
                let m3 = m.expanded();
                let target = m3.zip_map(&m.reference, |a, b| a * b)?;
                (n > 0).then_some((m3, target, n))
            }
            None => None,
        };
        Ok(BioTarget {
            e1: bio.embed(x1)?,
            e2: bio.embed(x2)?,
            mean: stats.mean_stack(gen.config.layers)?.into_tensor(),
            mask,
        })
    }

    fn build(
        &self,
        g: &mut Graph<f32>,
        gen: &Generator,
        bio: &Biometric,
        cfg: &BioMorphConfig,
        w: Var,
    ) -> Result<(Var, [Var; 4])> {
        let gp = gen.params().bind(g, false);
        let img = gen.forward(g, &gp, w)?;
        let bp = bio.params().bind(g, false);
        let e = bio.forward(g, &bp, img)?;
        let t1 = g.constant(self.e1.clone());
        let t2 = g.constant(self.e2.clone());
        let d1 = g.sq_dist(e, t1)?;
        let d2 = g.sq_dist(e, t2)?;
        let a = g.scale(d1, cfg.lambda_bio)?;
        let b = g.scale(d2, cfg.lambda_bio)?;
        let l1 = g.l1_to_constant(w, &self.mean)?;
        let lat = g.scale(l1, cfg.lambda_w)?;
        let bg = match &self.mask {
            Some((m3, target, n)) => {
                let m = g.constant(m3.clone());
                let masked = g.mul(img, m)?;
                let t = g.constant(target.clone());
                let d = g.sq_dist(masked, t)?;
                g.scale(d, cfg.lambda_bg / *n as f64)?
            }
            None => g.constant(Tensor::scalar(0.0)),
        };
        let s = g.add(a, b)?;
        let s = g.add(s, lat)?;
        let total = g.add(s, bg)?;
        Ok((total, [a, b, lat, bg]))
    }
}

fn bio_terms_of(g: &Graph<f32>, total: Var, parts: [Var; 4]) -> BioTerms {
    BioTerms {
        total: g.scalar(total),
        bio_a: g.scalar(parts[0]),
        bio_b: g.scalar(parts[1]),
        latent: g.scalar(parts[2]),
        background: g.scalar(parts[3]),
    }
}

/// Fixed networks needed by the dual-biometric morph.
#[derive(Clone, Copy)]
pub struct BioNets<'a> {
    pub gen: &'a Generator,
    pub biometric: &'a Biometric,
    pub stats: &'a LatentStats,
    pub encoder: Option<&'a Encoder>,
}

/// Dual-biometric objective of the latent `w` for the pair `(x1, x2)`.
pub fn bio_objective(
    x1: &Tensor<f32>,
    x2: &Tensor<f32>,
    nets: &BioNets,
    cfg: &BioMorphConfig,
    mask: Option<&BackgroundMask>,
    w: &LatentStack,
) -> Result<BioTerms> {
    let target = BioTarget::new(nets.gen, nets.biometric, nets.stats, x1, x2, mask)?;
    let mut g = Graph::<f32>::new();
    let v = g.constant(w.tensor().clone());
    let (total, parts) = target.build(&mut g, nets.gen, nets.biometric, cfg, v)?;
    Ok(bio_terms_of(&g, total, parts))
}

/// Initial latent for a bio morph: the mean of both encoder outputs, or the
/// mean latent without an encoder.
pub fn bio_initial_latent(
    x1: &Tensor<f32>,
    x2: &Tensor<f32>,
    nets: &BioNets,
    cfg: &BioMorphConfig,
) -> Result<(LatentStack, InitKind)> {
    match nets.encoder {
        Some(e) if cfg.use_encoder => Ok((
            LatentStack::midpoint(&e.encode(x1)?, &e.encode(x2)?)?,
            InitKind::Encoder,
        )),
        _ => Ok((nets.stats.mean_stack(nets.gen.config.layers)?, InitKind::MeanLatent)),
    }
}

/// Morph by directly pulling the morph's embedding toward both sources.
pub fn bio_morph(
    x1: &Tensor<f32>,
    x2: &Tensor<f32>,
    nets: &BioNets,
    cfg: &BioMorphConfig,
) -> Result<BioMorphResult> {
    bio_morph_from(x1, x2, nets, cfg, None, None)
}

/// [`bio_morph`] plus a reconstruction penalty on masked background pixels.
pub fn bio_morph_masked(
    x1: &Tensor<f32>,
    x2: &Tensor<f32>,
    mask: &BackgroundMask,
    nets: &BioNets,
    cfg: &BioMorphConfig,
) -> Result<BioMorphResult> {
    bio_morph_from(x1, x2, nets, cfg, Some(mask), None)
}

/// General bio morph with optional mask and optional explicit start latent.
pub fn bio_morph_from(
    x1: &Tensor<f32>,
    x2: &Tensor<f32>,
    nets: &BioNets,
    cfg: &BioMorphConfig,
    mask: Option<&BackgroundMask>,
    start: Option<&LatentStack>,
) -> Result<BioMorphResult> {
    cfg.validate()?;
    nets.stats.require_for_inversion()?;
    let target = BioTarget::new(nets.gen, nets.biometric, nets.stats, x1, x2, mask)?;
    let (w0, init) = match start {
        Some(w) => (w.clone(), InitKind::Given),
        None => bio_initial_latent(x1, x2, nets, cfg)?,
    };
    let gc = nets.gen.config;
    if w0.layers() != gc.layers || w0.dim() != gc.style_dim {
        return Err(Error::Dims("start latent does not match the generator".into()));
    }
    let mut vars = vec![w0.into_tensor()];
    let mut adam = AdamState::new(cfg.adam, &vars);
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut best = (f32::INFINITY, 0, vars[0].clone());
    for step in 0..cfg.steps {
        let mut g = Graph::<f32>::new();
        let v = g.variable(vars[0].clone());
        let (total, parts) = target
            .build(&mut g, nets.gen, nets.biometric, cfg, v)
            .map_err(|e| diverged(step, e))?;
        let terms = bio_terms_of(&g, total, parts);
        if !terms.total.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("bio morph loss {}", terms.total),
            });
        }
        trace.push(terms);
        if terms.total < best.0 {
            best = (terms.total, step, vars[0].clone());
        }
        if step + 1 == cfg.steps {
            break;
        }
        let mut grads = g.backward(total).map_err(|e| diverged(step, e))?;
        let gw = grads.take(v, vars[0].shape());
        adam.step(&mut vars, &[gw]).map_err(|e| Error::Diverged {
            step,
            detail: e.to_string(),
        })?;
    }
    let (_, best_step, w) = best;
    let latent = LatentStack::new(w)?;
    Ok(BioMorphResult {
        image: nets.gen.synthesize(&latent)?,
        latent,
        trace,
        best_step,
        init,
    })
}

/// Distance between the morph's embedding and the midpoint of the source
/// embeddings.
pub fn embedding_midpoint_deviation(
    bio: &Biometric,
    morph: &Tensor<f32>,
    x1: &Tensor<f32>,
    x2: &Tensor<f32>,
) -> Result<f64> {
    let em = bio.embed(morph)?;
    let (e1, e2) = (bio.embed(x1)?, bio.embed(x2)?);
    Ok(em
        .data()
        .iter()
        .zip(e1.data().iter().zip(e2.data()))
        .map(|(&m, (&a, &b))| {
            let d = m as f64 - (a as f64 + b as f64) / 2.0;
            d * d
        })
        .sum::<f64>()
        .sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MorphMethod {
    Midpoint,
    Bio,
}

impl std::fmt::Display for MorphMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MorphMethod::Midpoint => "midpoint",
            MorphMethod::Bio => "bio",
        })
    }
}

/// One attack instance: the morph and its scores against both sources.
#[derive(Clone, Debug)]
pub struct MorphRecord {
    pub method: MorphMethod,
    pub accomplice: usize,
    pub imposter: usize,
    pub morph: Tensor<f32>,
    pub score_accomplice: f64,
    pub score_imposter: f64,
    pub mmmss: f64,
}

impl MorphRecord {
    pub fn new(
        method: MorphMethod,
        accomplice: usize,
        imposter: usize,
        morph: Tensor<f32>,
        score_accomplice: f64,
        score_imposter: f64,
    ) -> Self {
        MorphRecord {
            method,
            accomplice,
            imposter,
            morph,
            score_accomplice,
            score_imposter,
            mmmss: score_accomplice.min(score_imposter),
        }
    }
}
