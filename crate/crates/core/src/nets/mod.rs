//! Fixed and trained convnets operating on `[R, R, 3]` images: the perceptual
//! feature extractor, the biometric embedder and the one-shot latent encoder.

mod biometric;
mod encoder;
mod perceptual;

pub use biometric::{match_score, Biometric, BiometricConfig, EmbedderTrainConfig, EmbedderTrainLog};
pub use encoder::{Encoder, EncoderConfig, EncoderTrainConfig};
pub use perceptual::{Perceptual, PerceptualConfig};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{Bound, ParamStore};
use crate::rng;
use crate::stylegen::LRELU_SLOPE;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct NetMeta<C> {
    pub seed: u64,
    pub config: C,
    #[serde(default)]
    pub training: Option<serde_json::Value>,
}

/// Push `conv{i}.w/b` for a 3x3 conv stack with the given channel widths.
pub(crate) fn push_conv_stack(
    p: &mut ParamStore,
    r: &mut rand_chacha::ChaCha8Rng,
    in_ch: usize,
    widths: &[usize],
) {
    let mut c_in = in_ch;
    for (i, &c_out) in widths.iter().enumerate() {
        let std = (2.0 / (9.0 * c_in as f64)).sqrt() as f32;
        p.push(format!("conv{i}.w"), rng::normal(r, &[c_out, c_in, 3, 3], std));
        p.push(format!("conv{i}.b"), Tensor::zeros(&[c_out]));
        c_in = c_out;
    }
}

/// conv -> leaky-relu for `layers` layers, with 2x average pooling after each
/// layer in `pool_after`.
pub(crate) fn conv_stack<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    mut x: Var,
    layers: usize,
    pool_after: impl Fn(usize) -> bool,
) -> Result<Var> {
    for i in 0..layers {
        x = g.conv2d(x, p.get(&format!("conv{i}.w"))?, p.get(&format!("conv{i}.b"))?)?;
        x = g.leaky_relu(x, LRELU_SLOPE)?;
        if pool_after(i) {
            x = g.avg_downsample2x(x)?;
        }
    }
    Ok(x)
}

/// Spatial extent after `pools` halvings.
pub(crate) fn pooled(resolution: usize, pools: usize) -> usize {
    resolution >> pools
}
