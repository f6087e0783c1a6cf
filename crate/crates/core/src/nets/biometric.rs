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

const KIND: &str = "biometric";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BiometricConfig {
    pub resolution: usize,
    pub widths: [usize; 3],
    pub embed_dim: usize,
}

impl Default for BiometricConfig {
    fn default() -> Self {
        BiometricConfig {
            resolution: 32,
            widths: [16, 32, 32],
            embed_dim: 32,
        }
    }
}

/// Convnet producing unit-length identity embeddings.
#[derive(Clone, Debug)]
pub struct Biometric {
    pub config: BiometricConfig,
    pub seed: u64,
    pub training: Option<serde_json::Value>,
    params: ParamStore,
}

/// Cosine similarity of two unit embeddings, clamped to `[-1, 1]`.
pub fn match_score(u: &Tensor<f32>, v: &Tensor<f32>) -> f64 {
    let s: f64 = u
        .data()
        .iter()
        .zip(v.data())
        .map(|(&a, &b)| a as f64 * b as f64)
        .sum();
    s.clamp(-1.0, 1.0)
}

impl Biometric {
    pub fn init(seed: u64, config: BiometricConfig) -> Result<Self> {
        if config.resolution < 8 || !config.resolution.is_power_of_two() || config.embed_dim == 0 {
            return Err(Error::Config(format!("invalid biometric config {config:?}")));
        }
        let mut r = rng::rng(seed, "biometric");
        let mut p = ParamStore::new();
        push_conv_stack(&mut p, &mut r, 3, &config.widths);
        let side = pooled(config.resolution, 3);
        let flat = config.widths[2] * side * side;
        p.push(
            "embed.w",
            rng::normal(&mut r, &[config.embed_dim, flat], (1.0 / flat as f64).sqrt() as f32),
        );
        p.push("embed.b", Tensor::zeros(&[config.embed_dim]));
        Ok(Biometric {
            config,
            seed,
            training: None,
            params: p,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Unit embedding node of an `[R, R, 3]` image node.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, img: Var) -> Result<Var> {
        let r = self.config.resolution;
        if g.shape(img) != [r, r, 3] {
            return Err(Error::Dims(format!(
                "biometric net expects [{r}, {r}, 3], got {:?}",
                g.shape(img)
            )));
        }
        let x = g.hwc_to_chw(img)?;
        let x = conv_stack(g, p, x, 3, |_| true)?;
        let n = g.value(x).len();
        let x = g.reshape(x, &[n])?;
        let e = g.linear(x, p.get("embed.w")?, p.get("embed.b")?)?;
        g.normalize(e)
    }

    pub fn embed(&self, img: &Tensor<f32>) -> Result<Tensor<f32>> {
        check_image(img)?;
        let mut g = Graph::<f32>::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(img.clone());
        let e = self.forward(&mut g, &p, x)?;
        Ok(g.value(e).clone())
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
        let meta: NetMeta<BiometricConfig> = serde_json::from_value(meta)?;
        let mut net = Biometric::init(meta.seed, meta.config)?;
        params.check_layout(&net.params)?;
        net.params = params;
        net.training = meta.training;
        Ok(net)
    }

    /// Contrastive training on synthetic identities drawn from the generator.
    ///
    /// Each step samples `batch_ids` identities and two variants of each; the
    /// loss is `mean(1 - s)` over same-identity pairs plus
    /// `mean(relu(s - margin))` over different-identity pairs.
    pub fn train(
        &self,
        gen: &Generator,
        mapping: &Mapping,
        stats: &LatentStats,
        cfg: &EmbedderTrainConfig,
    ) -> Result<(Biometric, EmbedderTrainLog)> {
        cfg.validate()?;
        let mut out = self.clone();
        out.training = Some(serde_json::to_value(cfg)?);
        let mut log = EmbedderTrainLog::default();
        if cfg.steps == 0 {
            return Ok((out, log));
        }
        let images = identity_images(gen, mapping, stats, cfg.n_ids, cfg.imgs_per_id, cfg.sigma_id, cfg.seed, "embedder-train")?;
        let mut adam = AdamState::new(cfg.adam, out.params.tensors());
        let mut r = rng::rng(cfg.seed, "embedder-batches");
        let mut ids: Vec<usize> = (0..cfg.n_ids).collect();
        let mut variants: Vec<usize> = (0..cfg.imgs_per_id).collect();
        for step in 0..cfg.steps {
            ids.shuffle(&mut r);
            let batch: Vec<(usize, usize, usize)> = ids[..cfg.batch_ids.min(cfg.n_ids)]
                .iter()
                .map(|&id| {
                    variants.shuffle(&mut r);
                    (id, variants[0], variants[1])
                })
                .collect();
            let mut g = Graph::<f32>::new();
            let p = out.params.bind(&mut g, true);
            let mut embs = Vec::with_capacity(2 * batch.len());
            for &(id, a, b) in &batch {
                for v in [a, b] {
                    let x = g.constant(images[id][v].clone());
                    embs.push((id, out.forward(&mut g, &p, x)?));
                }
            }
            let (mut pos, mut neg) = (Vec::new(), Vec::new());
            for i in 0..embs.len() {
                for j in i + 1..embs.len() {
                    let s = g.dot(embs[i].1, embs[j].1)?;
                    if embs[i].0 == embs[j].0 {
                        pos.push(s);
                    } else {
                        neg.push(s);
                    }
                }
            }
            let pos_term = {
                let s = sum_all(&mut g, &pos)?;
                let m = g.scale(s, -1.0 / pos.len() as f64)?;
                g.add_scalar(m, 1.0)?
            };
            let neg_term = {
                let mut hinges = Vec::with_capacity(neg.len());
                for &s in &neg {
                    let shifted = g.add_scalar(s, -cfg.margin)?;
                    hinges.push(g.relu(shifted)?);
                }
                let s = sum_all(&mut g, &hinges)?;
                g.scale(s, 1.0 / neg.len().max(1) as f64)?
            };
            let loss = g.add(pos_term, neg_term)?;
            let lv = g.scalar(loss);
            if !lv.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("embedder loss {lv}; recent {:?}", log.tail()),
                });
            }
            log.loss.push(lv);
            let mut grads = g.backward(loss)?;
            let gs: Vec<Tensor<f32>> = p
                .vars()
                .iter()
                .zip(out.params.tensors())
                .map(|(&v, t)| grads.take(v, t.shape()))
                .collect();
            adam.step(out.params.tensors_mut(), &gs).map_err(|e| Error::Diverged {
                step,
                detail: format!("{e}; recent {:?}", log.tail()),
            })?;
        }
        Ok((out, log))
    }
}

fn sum_all<T: Real>(g: &mut Graph<T>, xs: &[Var]) -> Result<Var> {
    let mut acc = match xs.first() {
        Some(&x) => x,
        None => return Ok(g.constant(Tensor::scalar(T::zero()))),
    };
    for &x in &xs[1..] {
        acc = g.add(acc, x)?;
    }
    Ok(acc)
}

/// Images of `n_ids` synthetic identities with `per_id` perturbed variants each.
///
/// Identity `i` has base style `M(z_i)`; each variant adds
/// `sigma_id * std ⊙ N(0, I)` before broadcasting to a tied stack.
#[allow(clippy::too_many_arguments)]
pub(crate) fn identity_images(
    gen: &Generator,
    mapping: &Mapping,
    stats: &LatentStats,
    n_ids: usize,
    per_id: usize,
    sigma_id: f64,
    seed: u64,
    stream: &str,
) -> Result<Vec<Vec<Tensor<f32>>>> {
    (0..n_ids)
        .map(|id| {
            let base = mapping.sample_style(seed, stream, id as u64)?;
            let mut r = rng::rng_indexed(seed, &format!("{stream}-variants"), id as u64);
            (0..per_id)
                .map(|_| {
                    let noise = rng::normal(&mut r, &[base.len()], 1.0);
                    let w = Tensor::from_fn(&[base.len()], |k| {
                        base.data()[k] + sigma_id as f32 * stats.std.data()[k] * noise.data()[k]
                    });
                    gen.synthesize(&LatentStack::tied(&w, gen.config.layers)?)
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderTrainConfig {
    pub n_ids: usize,
    pub imgs_per_id: usize,
    /// Variant perturbation, as a fraction of the per-coordinate latent spread.
    pub sigma_id: f64,
    /// Cosine margin below which different-identity pairs are not penalized.
    pub margin: f64,
    pub steps: usize,
    pub batch_ids: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for EmbedderTrainConfig {
    fn default() -> Self {
        EmbedderTrainConfig {
            n_ids: 64,
            imgs_per_id: 4,
            sigma_id: 0.15,
            margin: 0.5,
            steps: 300,
            batch_ids: 8,
            adam: AdamConfig::with_lr(2e-3),
            seed: 7,
        }
    }
}

impl EmbedderTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_ids < 2 || self.imgs_per_id < 2 || self.batch_ids < 2 {
            return Err(Error::Config(
                "embedder training needs >= 2 identities per batch and >= 2 images per identity".into(),
            ));
        }
        if self.sigma_id <= 0.0 {
            return Err(Error::Config("sigma_id must be positive".into()));
        }
        self.adam.validate()
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct EmbedderTrainLog {
    pub loss: Vec<f32>,
}

impl EmbedderTrainLog {
    fn tail(&self) -> &[f32] {
        &self.loss[self.loss.len().saturating_sub(5)..]
    }
}
