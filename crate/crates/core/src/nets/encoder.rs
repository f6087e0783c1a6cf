use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{conv_stack, pooled, push_conv_stack, NetMeta};
use crate::adam::{AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::imageio::check_image;
use crate::params::{load_bundle, save_bundle, Bound, ParamStore};
use crate::rng;
use crate::stylegen::{Generator, LatentStack, LatentStats, Mapping};
use crate::tensor::{Real, Tensor};

const KIND: &str = "encoder";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub resolution: usize,
    pub layers: usize,
    pub style_dim: usize,
    pub widths: [usize; 3],
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            resolution: 32,
            layers: 8,
            style_dim: 64,
            widths: [8, 16, 16],
        }
    }
}

/// Image -> tied latent stack regressor.
///
/// The head predicts standardized coordinates `u`; the output style vector is
/// `mean + std ⊙ u` using the latent statistics frozen at init.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub seed: u64,
    pub training: Option<serde_json::Value>,
    params: ParamStore,
}

impl Encoder {
    pub fn init(seed: u64, config: EncoderConfig, stats: &LatentStats) -> Result<Self> {
        if config.resolution < 8 || !config.resolution.is_power_of_two() {
            return Err(Error::Config(format!("invalid encoder config {config:?}")));
        }
        if stats.mean.shape() != [config.style_dim] {
            return Err(Error::Dims(format!(
                "latent stats are {:?}, encoder style_dim {}",
                stats.mean.shape(),
                config.style_dim
            )));
        }
        let mut r = rng::rng(seed, "encoder");
        let mut p = ParamStore::new();
        push_conv_stack(&mut p, &mut r, 3, &config.widths);
        let side = pooled(config.resolution, 3);
        let flat = config.widths[2] * side * side;
        p.push(
            "head.w",
            rng::normal(&mut r, &[config.style_dim, flat], (1.0 / flat as f64).sqrt() as f32),
        );
        p.push("head.b", Tensor::zeros(&[config.style_dim]));
        p.push("out.std", stats.std.clone());
        p.push("out.mean", stats.mean.clone());
        Ok(Encoder {
            config,
            seed,
            training: None,
            params: p,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// `[R, R, 3]` image node -> `[d]` style vector node.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, img: Var) -> Result<Var> {
        let r = self.config.resolution;
        if g.shape(img) != [r, r, 3] {
            return Err(Error::Dims(format!(
                "encoder expects [{r}, {r}, 3], got {:?}",
                g.shape(img)
            )));
        }
        let x = g.hwc_to_chw(img)?;
        let x = conv_stack(g, p, x, 3, |_| true)?;
        let n = g.value(x).len();
        let x = g.reshape(x, &[n])?;
        let u = g.linear(x, p.get("head.w")?, p.get("head.b")?)?;
        let spread = g.mul(u, p.get("out.std")?)?;
        g.add(spread, p.get("out.mean")?)
    }

    pub fn encode(&self, img: &Tensor<f32>) -> Result<LatentStack> {
        check_image(img)?;
        let mut g = Graph::<f32>::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(img.clone());
        let w = self.forward(&mut g, &p, x)?;
        LatentStack::tied(g.value(w), self.config.layers)
    }

    /// Regress tied latents from their synthetic images.
    ///
    /// `pairs` latents `M(z)` and their images are drawn once; each step takes a
    /// minibatch of `batch` of them and minimizes the mean squared latent error.
    pub fn train(
        &self,
        gen: &Generator,
        mapping: &Mapping,
        cfg: &EncoderTrainConfig,
    ) -> Result<(Encoder, Vec<f32>)> {
        cfg.adam.validate()?;
        if cfg.pairs == 0 || cfg.batch == 0 {
            return Err(Error::Config("encoder training needs pairs >= 1 and batch >= 1".into()));
        }
        if gen.config.layers != self.config.layers || gen.config.style_dim != self.config.style_dim {
            return Err(Error::Dims("encoder and generator latent dims differ".into()));
        }
        let mut out = self.clone();
        out.training = Some(serde_json::to_value(cfg)?);
        let mut trace = Vec::with_capacity(cfg.steps);
        if cfg.steps == 0 {
            return Ok((out, trace));
        }
        let pool: Vec<(Tensor<f32>, Tensor<f32>)> = (0..cfg.pairs)
            .map(|i| {
                let w = mapping.sample_style(cfg.seed, "encoder-pairs", i as u64)?;
                let img = gen.synthesize(&LatentStack::tied(&w, gen.config.layers)?)?;
                Ok((w, img))
            })
            .collect::<Result<_>>()?;
        // frozen output affine: only conv and head weights move
        let trainable = out.params.len() - 2;
        let mut adam = AdamState::new(cfg.adam, &out.params.tensors()[..trainable]);
        let mut order: Vec<usize> = (0..cfg.pairs).collect();
        let mut r = rng::rng(cfg.seed, "encoder-batches");
        let mut cursor = cfg.pairs;
        for step in 0..cfg.steps {
            let mut batch = Vec::with_capacity(cfg.batch);
            while batch.len() < cfg.batch.min(cfg.pairs) {
                if cursor == cfg.pairs {
                    order.shuffle(&mut r);
                    cursor = 0;
                }
                batch.push(order[cursor]);
                cursor += 1;
            }
            let mut g = Graph::<f32>::new();
            let p = out.params.bind(&mut g, true);
            let mut total: Option<Var> = None;
            for &i in &batch {
                let x = g.constant(pool[i].1.clone());
                let target = g.constant(pool[i].0.clone());
                let pred = out.forward(&mut g, &p, x)?;
                let l = g.mse(pred, target)?;
                total = Some(match total {
                    None => l,
                    Some(t) => g.add(t, l)?,
                });
            }
            let loss = g.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64)?;
            let lv = g.scalar(loss);
            if !lv.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("encoder loss {lv}"),
                });
            }
            trace.push(lv);
            let mut grads = g.backward(loss)?;
            let gs: Vec<Tensor<f32>> = p.vars()[..trainable]
                .iter()
                .zip(out.params.tensors())
                .map(|(&v, t)| grads.take(v, t.shape()))
                .collect();
            adam.step(&mut out.params.tensors_mut()[..trainable], &gs)
                .map_err(|e| Error::Diverged {
                    step,
                    detail: e.to_string(),
                })?;
        }
        Ok((out, trace))
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let meta = serde_json::to_value(NetMeta {
            seed: self.seed,
            config: self.config.clone(),
            training: self.training.clone(),
        })?;
        save_bundle(dir, KIND, meta, &self.params)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let (meta, params) = load_bundle(dir, KIND)?;
        let meta: NetMeta<EncoderConfig> = serde_json::from_value(meta)?;
        let d = meta.config.style_dim;
        let placeholder = LatentStats {
            mean: Tensor::zeros(&[d]),
            std: Tensor::zeros(&[d]),
            n: 1,
        };
        let mut net = Encoder::init(meta.seed, meta.config, &placeholder)?;
        params.check_layout(&net.params)?;
        net.params = params;
        net.training = meta.training;
        Ok(net)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderTrainConfig {
    pub pairs: usize,
    pub steps: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        EncoderTrainConfig {
            pairs: 512,
            steps: 600,
            batch: 16,
            adam: AdamConfig::with_lr(2e-3),
            seed: 11,
        }
    }
}
