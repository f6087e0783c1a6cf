use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{conv_stack, pooled, push_conv_stack, NetMeta};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::imageio::check_image;
use crate::params::{load_bundle, save_bundle, Bound, ParamStore};
use crate::rng;
use crate::tensor::{Real, Tensor};

const KIND: &str = "perceptual";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerceptualConfig {
    pub resolution: usize,
    /// Output channels of the four conv layers.
    pub widths: [usize; 4],
    /// 1-based conv layer whose activations are the features.
    pub feature_layer: usize,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        PerceptualConfig {
            resolution: 32,
            widths: [8, 16, 8, 8],
            feature_layer: 3,
        }
    }
}

/// Fixed random convnet. Layers 1 and 2 are followed by 2x pooling, so for
/// `R = 32` the default features are `8 x 8 x 8 = 512` values.
#[derive(Clone, Debug)]
pub struct Perceptual {
    pub config: PerceptualConfig,
    pub seed: u64,
    params: ParamStore,
}

impl Perceptual {
    pub fn init(seed: u64, config: PerceptualConfig) -> Result<Self> {
        if !(1..=4).contains(&config.feature_layer) {
            return Err(Error::Config(format!(
                "feature_layer must be in 1..=4, got {}",
                config.feature_layer
            )));
        }
        if config.resolution < 8 || !config.resolution.is_power_of_two() {
            return Err(Error::Config("perceptual resolution must be a power of two >= 8".into()));
        }
        let mut r = rng::rng(seed, "perceptual");
        let mut p = ParamStore::new();
        push_conv_stack(&mut p, &mut r, 3, &config.widths);
        Ok(Perceptual {
            config,
            seed,
            params: p,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn pools_before(layer: usize) -> usize {
        layer.min(3) - 1
    }

    /// Feature count N_v.
    pub fn feature_len(&self) -> usize {
        let l = self.config.feature_layer;
        let side = pooled(self.config.resolution, Self::pools_before(l));
        self.config.widths[l - 1] * side * side
    }

    /// Flat feature vector of an `[R, R, 3]` image node.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, img: Var) -> Result<Var> {
        let r = self.config.resolution;
        if g.shape(img) != [r, r, 3] {
            return Err(Error::Dims(format!(
                "perceptual net expects [{r}, {r}, 3], got {:?}",
                g.shape(img)
            )));
        }
        let x = g.hwc_to_chw(img)?;
        let x = conv_stack(g, p, x, self.config.feature_layer, |i| {
            i + 1 < self.config.feature_layer && i < 2
        })?;
        let n = g.value(x).len();
        g.reshape(x, &[n])
    }

    pub fn features(&self, img: &Tensor<f32>) -> Result<Tensor<f32>> {
        check_image(img)?;
        let mut g = Graph::<f32>::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(img.clone());
        let f = self.forward(&mut g, &p, x)?;
        Ok(g.value(f).clone())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let meta = serde_json::to_value(NetMeta {
            seed: self.seed,
            config: self.config.clone(),
            training: None,
        })?;
        save_bundle(dir, KIND, meta, &self.params)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let (meta, params) = load_bundle(dir, KIND)?;
        let meta: NetMeta<PerceptualConfig> = serde_json::from_value(meta)?;
        let mut net = Perceptual::init(meta.seed, meta.config)?;
        params.check_layout(&net.params)?;
        net.params = params;
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(seed: u64) -> Tensor<f32> {
        let mut r = rng::rng(seed, "test-image");
        rng::normal(&mut r, &[32, 32, 3], 0.2).map(|v| (v + 0.5).clamp(0.0, 1.0))
    }

    #[test]
    fn default_feature_length_is_512() {
        let p = Perceptual::init(0, PerceptualConfig::default()).unwrap();
        assert_eq!(p.feature_len(), 512);
        assert_eq!(p.features(&img(1)).unwrap().len(), 512);
    }

    #[test]
    fn deterministic_and_discriminative() {
        let p = Perceptual::init(0, PerceptualConfig::default()).unwrap();
        let a = p.features(&img(1)).unwrap();
        assert_eq!(a, p.features(&img(1)).unwrap());
        assert!(a.mse(&p.features(&img(2)).unwrap()).unwrap() > 0.0);
    }

    #[test]
    fn wrong_shape_rejected() {
        let p = Perceptual::init(0, PerceptualConfig::default()).unwrap();
        assert!(p.features(&Tensor::zeros(&[16, 16, 3])).is_err());
    }
}
