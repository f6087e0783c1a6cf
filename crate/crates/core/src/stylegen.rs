//! Toy style-based generator operating in the per-layer (w+) latent space.
//!
//! A learned 4x4 constant is grown by nearest-neighbour upsampling through
//! `log2(R) - 1` stages of two styled layers each. Every styled layer is
//! conv3x3 -> leaky-relu -> instance norm -> per-channel scale/shift, where the
//! scale and shift are affine functions of that layer's row of the latent
//! stack. A 1x1 conv and a sigmoid produce the `[R, R, 3]` image in `[0, 1]`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{load_bundle, save_bundle, Bound, ParamStore};
use crate::rng;
use crate::tensor::{Real, Tensor};

pub const LRELU_SLOPE: f64 = 0.2;

const GENERATOR_KIND: &str = "generator";
const MAPPING_KIND: &str = "mapping";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Output side length R (power of two, at least 8).
    pub resolution: usize,
    /// Styled layers L; must equal `2 * (log2(R) - 1)`.
    pub layers: usize,
    /// Style dimension d.
    pub style_dim: usize,
    pub channels: usize,
    /// Per-coordinate spread of mapped latents. The mapping network's output
    /// is scaled by it and the style affines divide it back out.
    pub latent_scale: f64,
    /// Hidden layers in the mapping MLP.
    pub mapping_layers: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            resolution: 32,
            layers: 8,
            style_dim: 64,
            channels: 16,
            latent_scale: 0.01,
            mapping_layers: 3,
        }
    }
}

impl GeneratorConfig {
    pub fn stages(&self) -> usize {
        self.resolution.trailing_zeros() as usize - 1
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.resolution;
        if r < 8 || !r.is_power_of_two() {
            return Err(Error::Config(format!(
                "resolution must be a power of two >= 8, got {r}"
            )));
        }
        if self.layers != 2 * self.stages() {
            return Err(Error::Config(format!(
                "resolution {r} has {} stages and needs {} styled layers, got {}",
                self.stages(),
                2 * self.stages(),
                self.layers
            )));
        }
        if self.style_dim == 0 || self.channels == 0 || self.mapping_layers == 0 {
            return Err(Error::Config("style_dim, channels and mapping_layers must be positive".into()));
        }
        if !(self.latent_scale > 0.0 && self.latent_scale.is_finite()) {
            return Err(Error::Config("latent_scale must be positive".into()));
        }
        Ok(())
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.resolution, self.resolution, 3]
    }
}

/// `L x d` matrix of per-layer style vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentStack(Tensor<f32>);

impl LatentStack {
    pub fn new(t: Tensor<f32>) -> Result<Self> {
        if t.rank() != 2 {
            return Err(Error::Dims(format!("latent stack must be [L, d], got {:?}", t.shape())));
        }
        if !t.is_finite() {
            return Err(Error::Invalid("latent stack has non-finite entries".into()));
        }
        Ok(LatentStack(t))
    }

    /// Every row equal to `w`.
    pub fn tied(w: &Tensor<f32>, layers: usize) -> Result<Self> {
        if w.rank() != 1 {
            return Err(Error::Dims(format!("style vector must be [d], got {:?}", w.shape())));
        }
        let data = w.data().iter().copied().cycle().take(layers * w.len()).collect();
        Self::new(Tensor::new(vec![layers, w.len()], data)?)
    }

    pub fn layers(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor<f32> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<f32> {
        self.0
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.dim();
        &self.0.data()[i * d..(i + 1) * d]
    }

    /// Elementwise `(a + b) / 2`.
    pub fn midpoint(a: &LatentStack, b: &LatentStack) -> Result<Self> {
        if a.0.shape() != b.0.shape() {
            return Err(Error::Dims(format!(
                "latent stacks {:?} and {:?}",
                a.0.shape(),
                b.0.shape()
            )));
        }
        Self::new(a.0.zip_map(&b.0, |x, y| (x + y) * 0.5)?)
    }

    fn check_for(&self, cfg: &GeneratorConfig) -> Result<()> {
        if self.layers() != cfg.layers || self.dim() != cfg.style_dim {
            return Err(Error::Dims(format!(
                "latent stack is {}x{}, generator expects {}x{}",
                self.layers(),
                self.dim(),
                cfg.layers,
                cfg.style_dim
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetMeta<C> {
    seed: u64,
    config: C,
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub seed: u64,
    params: ParamStore,
}

impl Generator {
    pub fn init(seed: u64, config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let mut r = rng::rng(seed, "generator");
        let (c, d) = (config.channels, config.style_dim);
        let style_std = 1.0 / ((d as f64).sqrt() * config.latent_scale);
        let mut p = ParamStore::new();
        p.push("const", rng::normal(&mut r, &[c, 4, 4], 1.0));
        for i in 0..config.layers {
            p.push(
                format!("conv{i}.w"),
                rng::normal(&mut r, &[c, c, 3, 3], (1.0 / (9.0 * c as f64).sqrt()) as f32),
            );
            p.push(format!("conv{i}.b"), Tensor::zeros(&[c]));
            p.push(format!("style{i}.scale_w"), rng::normal(&mut r, &[c, d], style_std as f32));
            p.push(format!("style{i}.scale_b"), Tensor::full(&[c], 1.0));
            p.push(format!("style{i}.shift_w"), rng::normal(&mut r, &[c, d], style_std as f32));
            p.push(format!("style{i}.shift_b"), Tensor::zeros(&[c]));
        }
        p.push(
            "to_rgb.w",
            rng::normal(&mut r, &[3, c, 1, 1], (1.0 / (c as f64).sqrt()) as f32),
        );
        p.push("to_rgb.b", Tensor::zeros(&[3]));
        Ok(Generator {
            config,
            seed,
            params: p,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Append the generator to `g`; `w` is an `[L, d]` node. Returns the `[R, R, 3]` image node.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, w: Var) -> Result<Var> {
        let cfg = &self.config;
        if g.shape(w) != [cfg.layers, cfg.style_dim] {
            return Err(Error::Dims(format!(
                "latent node is {:?}, generator expects [{}, {}]",
                g.shape(w),
                cfg.layers,
                cfg.style_dim
            )));
        }
        let mut x = p.get("const")?;
        for i in 0..cfg.layers {
            if i > 0 && i % 2 == 0 {
                x = g.upsample2x(x)?;
            }
            x = g.conv2d(x, p.get(&format!("conv{i}.w"))?, p.get(&format!("conv{i}.b"))?)?;
            x = g.leaky_relu(x, LRELU_SLOPE)?;
            x = g.instance_norm(x)?;
            let wi = g.row(w, i)?;
            let scale = g.linear(
                wi,
                p.get(&format!("style{i}.scale_w"))?,
                p.get(&format!("style{i}.scale_b"))?,
            )?;
            let shift = g.linear(
                wi,
                p.get(&format!("style{i}.shift_w"))?,
                p.get(&format!("style{i}.shift_b"))?,
            )?;
            x = g.modulate(x, scale, shift)?;
        }
        let rgb = g.conv2d(x, p.get("to_rgb.w")?, p.get("to_rgb.b")?)?;
        let rgb = g.sigmoid(rgb)?;
        g.chw_to_hwc(rgb)
    }

    pub fn synthesize(&self, w: &LatentStack) -> Result<Tensor<f32>> {
        w.check_for(&self.config)?;
        let mut g = Graph::<f32>::new();
        let p = self.params.bind(&mut g, false);
        let wv = g.constant(w.tensor().clone());
        let img = self.forward(&mut g, &p, wv)?;
        Ok(g.value(img).clone())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let meta = serde_json::to_value(NetMeta {
            seed: self.seed,
            config: self.config,
        })?;
        save_bundle(dir, GENERATOR_KIND, meta, &self.params)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let (meta, params) = load_bundle(dir, GENERATOR_KIND)?;
        let meta: NetMeta<GeneratorConfig> = serde_json::from_value(meta)?;
        let mut g = Generator::init(meta.seed, meta.config)?;
        params.check_layout(&g.params)?;
        g.params = params;
        Ok(g)
    }
}

/// MLP `z -> w` used to sample in-distribution latents.
#[derive(Clone, Debug)]
pub struct Mapping {
    pub config: GeneratorConfig,
    pub seed: u64,
    params: ParamStore,
}

impl Mapping {
    pub fn init(seed: u64, config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        let d = config.style_dim;
        let mut r = rng::rng(seed, "mapping");
        let mut p = ParamStore::new();
        let std = (1.0 / (d as f64).sqrt()) as f32;
        for i in 0..config.mapping_layers {
            p.push(format!("fc{i}.w"), rng::normal(&mut r, &[d, d], std));
            p.push(format!("fc{i}.b"), Tensor::zeros(&[d]));
        }
        p.push("out.w", rng::normal(&mut r, &[d, d], std * config.latent_scale as f32));
        p.push("out.b", Tensor::zeros(&[d]));
        Ok(Mapping {
            config,
            seed,
            params: p,
        })
    }

    /// Map one `[d]` noise vector to a style vector.
    pub fn map(&self, z: &Tensor<f32>) -> Result<Tensor<f32>> {
        let d = self.config.style_dim;
        if z.shape() != [d] {
            return Err(Error::Dims(format!("noise must be [{d}], got {:?}", z.shape())));
        }
        // pixel norm
        let rms = (z.data().iter().map(|v| v * v).sum::<f32>() / d as f32).sqrt().max(1e-8);
        let z = z.map(|v| v / rms);
        let mut g = Graph::<f32>::new();
        let p = self.params.bind(&mut g, false);
        let mut x = g.constant(z);
        for i in 0..self.config.mapping_layers {
            x = g.linear(x, p.get(&format!("fc{i}.w"))?, p.get(&format!("fc{i}.b"))?)?;
            x = g.leaky_relu(x, LRELU_SLOPE)?;
        }
        x = g.linear(x, p.get("out.w")?, p.get("out.b")?)?;
        Ok(g.value(x).clone())
    }

    fn sample(&self, r: &mut rand_chacha::ChaCha8Rng) -> Result<Tensor<f32>> {
        let z = rng::normal(r, &[self.config.style_dim], 1.0);
        self.map(&z)
    }

    /// Mean and per-coordinate spread of `n` mapped samples.
    pub fn map_and_average(&self, n: usize, seed: u64) -> Result<LatentStats> {
        if n == 0 {
            return Err(Error::Config("latent statistics need n >= 1".into()));
        }
        let d = self.config.style_dim;
        let mut r = rng::rng(seed, "latent-stats");
        let mut sum = vec![0f64; d];
        let mut sq = vec![0f64; d];
        for _ in 0..n {
            let w = self.sample(&mut r)?;
            for ((s, q), &v) in sum.iter_mut().zip(sq.iter_mut()).zip(w.data()) {
                *s += v as f64;
                *q += (v as f64) * (v as f64);
            }
        }
        let mean: Vec<f32> = sum.iter().map(|s| (s / n as f64) as f32).collect();
        let std: Vec<f32> = sum
            .iter()
            .zip(&sq)
            .map(|(s, q)| {
                let m = s / n as f64;
                (q / n as f64 - m * m).max(0.0).sqrt() as f32
            })
            .collect();
        Ok(LatentStats {
            mean: Tensor::new(vec![d], mean)?,
            std: Tensor::new(vec![d], std)?,
            n,
        })
    }

    /// Tied latent stack for the synthetic identity `seed`.
    pub fn sample_identity(&self, seed: u64) -> Result<LatentStack> {
        let mut r = rng::rng(seed, "identity");
        let w = self.sample(&mut r)?;
        LatentStack::tied(&w, self.config.layers)
    }

    /// Mapped style vector drawn from an arbitrary stream.
    pub fn sample_style(&self, seed: u64, stream: &str, index: u64) -> Result<Tensor<f32>> {
        let mut r = rng::rng_indexed(seed, stream, index);
        self.sample(&mut r)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let meta = serde_json::to_value(NetMeta {
            seed: self.seed,
            config: self.config,
        })?;
        save_bundle(dir, MAPPING_KIND, meta, &self.params)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let (meta, params) = load_bundle(dir, MAPPING_KIND)?;
        let meta: NetMeta<GeneratorConfig> = serde_json::from_value(meta)?;
        let mut m = Mapping::init(meta.seed, meta.config)?;
        params.check_layout(&m.params)?;
        m.params = params;
        Ok(m)
    }
}

/// Mean latent and per-coordinate spread estimated from mapped samples.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentStats {
    pub mean: Tensor<f32>,
    pub std: Tensor<f32>,
    pub n: usize,
}

/// Sample count below which a mean latent is not trusted for inversion.
pub const MIN_STATS_SAMPLES: usize = 1000;

impl LatentStats {
    pub fn mean_stack(&self, layers: usize) -> Result<LatentStack> {
        LatentStack::tied(&self.mean, layers)
    }

    pub fn require_for_inversion(&self) -> Result<()> {
        if self.n < MIN_STATS_SAMPLES {
            return Err(Error::Config(format!(
                "mean latent from {} samples; inversion needs at least {MIN_STATS_SAMPLES}",
                self.n
            )));
        }
        Ok(())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        crate::mten::write(dir.join("mean.mten"), &self.mean)?;
        crate::mten::write(dir.join("std.mten"), &self.std)?;
        std::fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&serde_json::json!({ "kind": "latent_stats", "n": self.n }))? + "\n",
        )?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path).map_err(|e| Error::Missing {
            path: path.clone(),
            detail: e.to_string(),
        })?;
        let v: serde_json::Value = serde_json::from_str(&text)?;
        let n = v["n"]
            .as_u64()
            .ok_or_else(|| Error::Config(format!("{}: missing n", path.display())))? as usize;
        let mean = crate::mten::read(dir.join("mean.mten"))?;
        let std = crate::mten::read(dir.join("std.mten"))?;
        if mean.shape() != std.shape() || mean.rank() != 1 {
            return Err(Error::Dims("latent stats mean/std shapes differ".into()));
        }
        Ok(LatentStats { mean, std, n })
    }
}
