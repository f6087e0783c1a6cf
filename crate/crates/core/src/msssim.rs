//! Multi-scale structural similarity, built from differentiable graph ops.
//!
//! Follows the common TensorFlow formulation: Gaussian window with "valid"
//! padding, contrast-structure terms at every scale but the last, full SSIM at
//! the last, each per-channel value clipped at zero and raised to its scale
//! weight, product over scales, mean over channels. Scales that would shrink
//! the image below the window are dropped and the remaining weights
//! renormalized to sum to one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{Real, Tensor};

pub const SCALE_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

const K1: f64 = 0.01;
const K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MsSsimConfig {
    pub window: usize,
    pub sigma: f64,
    /// Dynamic range of pixel values.
    pub max_val: f64,
}

impl Default for MsSsimConfig {
    fn default() -> Self {
        MsSsimConfig {
            window: 11,
            sigma: 1.5,
            max_val: 1.0,
        }
    }
}

impl MsSsimConfig {
    /// Largest scale count M (up to 5) with `min_dim / 2^(M-1) >= window`.
    /// Halving stops early at an odd extent.
    pub fn scale_count(&self, h: usize, w: usize) -> Result<usize> {
        let min_dim = h.min(w);
        if self.window.is_multiple_of(2) || self.window == 0 {
            return Err(Error::Config(format!(
                "ms-ssim window must be odd, got {}",
                self.window
            )));
        }
        if self.sigma <= 0.0 {
            return Err(Error::Config("ms-ssim sigma must be positive".into()));
        }
        if min_dim < self.window {
            return Err(Error::Invalid(format!(
                "ms-ssim window {} larger than image extent {min_dim}",
                self.window
            )));
        }
        let (mut h, mut w, mut m) = (h, w, 1);
        while m < SCALE_WEIGHTS.len() && h % 2 == 0 && w % 2 == 0 && h.min(w) / 2 >= self.window {
            h /= 2;
            w /= 2;
            m += 1;
        }
        Ok(m)
    }

    /// First `m` standard weights scaled to sum to one.
    pub fn weights(&self, m: usize) -> Vec<f64> {
        let total: f64 = SCALE_WEIGHTS[..m].iter().sum();
        SCALE_WEIGHTS[..m].iter().map(|w| w / total).collect()
    }

    pub fn kernel<T: Real>(&self) -> Vec<T> {
        let half = (self.window / 2) as f64;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - half;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let s: f64 = raw.iter().sum();
        raw.iter().map(|v| T::lit(v / s)).collect()
    }
}

/// MS-SSIM between two `[H, W, C]` images already on the graph.
pub fn ms_ssim_graph<T: Real>(g: &mut Graph<T>, a: Var, b: Var, cfg: &MsSsimConfig) -> Result<Var> {
    let shape = g.shape(a).to_vec();
    if shape != g.shape(b) || shape.len() != 3 {
        return Err(Error::shape(
            "ms_ssim",
            format!("{:?} vs {:?}", shape, g.shape(b)),
        ));
    }
    let scales = cfg.scale_count(shape[0], shape[1])?;
    let weights = cfg.weights(scales);
    let kernel = cfg.kernel::<T>();
    let c1 = (K1 * cfg.max_val).powi(2);
    let c2 = (K2 * cfg.max_val).powi(2);

    let mut x = g.hwc_to_chw(a)?;
    let mut y = g.hwc_to_chw(b)?;
    let mut product: Option<Var> = None;
    for (s, &w) in weights.iter().enumerate() {
        let last = s + 1 == scales;
        let mu_x = g.gaussian_blur(x, &kernel)?;
        let mu_y = g.gaussian_blur(y, &kernel)?;
        let xx = g.mul(x, x)?;
        let yy = g.mul(y, y)?;
        let xy = g.mul(x, y)?;
        let e_xx = g.gaussian_blur(xx, &kernel)?;
        let e_yy = g.gaussian_blur(yy, &kernel)?;
        let e_xy = g.gaussian_blur(xy, &kernel)?;
        let mu_xx = g.mul(mu_x, mu_x)?;
        let mu_yy = g.mul(mu_y, mu_y)?;
        let mu_xy = g.mul(mu_x, mu_y)?;
        let var_x = g.sub(e_xx, mu_xx)?;
        let var_y = g.sub(e_yy, mu_yy)?;
        let cov = g.sub(e_xy, mu_xy)?;

        let cov2 = g.add(cov, cov)?;
        let cs_num = g.add_scalar(cov2, c2)?;
        let var_sum = g.add(var_x, var_y)?;
        let cs_den = g.add_scalar(var_sum, c2)?;
        let cs_map = g.div(cs_num, cs_den)?;

        let term_map = if last {
            let mxy2 = g.add(mu_xy, mu_xy)?;
            let l_num = g.add_scalar(mxy2, c1)?;
            let m_sum = g.add(mu_xx, mu_yy)?;
            let l_den = g.add_scalar(m_sum, c1)?;
            let lum = g.div(l_num, l_den)?;
            g.mul(lum, cs_map)?
        } else {
            cs_map
        };
        let per_channel = g.channel_mean(term_map)?;
        let clipped = g.relu(per_channel)?;
        let powered = g.pow(clipped, w)?;
        product = Some(match product {
            None => powered,
            Some(p) => g.mul(p, powered)?,
        });
        if !last {
            x = g.avg_downsample2x(x)?;
            y = g.avg_downsample2x(y)?;
        }
    }
    let product = product.expect("at least one scale");
    g.mean(product)
}

/// Forward-only MS-SSIM of two `[H, W, C]` images.
pub fn ms_ssim<T: Real>(a: &Tensor<T>, b: &Tensor<T>, cfg: &MsSsimConfig) -> Result<T> {
    if a.shape() != b.shape() || a.rank() != 3 {
        return Err(Error::Invalid(format!(
            "ms_ssim needs equal [H,W,C] shapes, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    cfg.scale_count(a.shape()[0], a.shape()[1])?;
    let mut g = Graph::new();
    let av = g.constant(a.clone());
    let bv = g.constant(b.clone());
    let out = ms_ssim_graph(&mut g, av, bv, cfg)?;
    Ok(g.scalar(out))
}
