//! Define-by-run reverse-mode differentiation over a fixed operation set.
//!
//! Every op is evaluated eagerly when it is appended, so a [`Graph`] is
//! at all times a topologically ordered tape. [`Graph::backward`] walks the
//! tape in reverse and applies each op's adjoint rule.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Conv2d { x: usize, w: usize, b: usize },
    Linear { x: usize, w: usize, b: usize },
    Upsample2x(usize),
    AvgPool2x(usize),
    LeakyRelu { x: usize, alpha: T },
    Relu(usize),
    Sigmoid(usize),
    InstanceNorm { x: usize, inv_std: Vec<T> },
    Modulate { x: usize, scale: usize, shift: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    AddScalar(usize),
    Scale(usize, T),
    Pow(usize, T),
    Sum(usize),
    Mean(usize),
    ChannelMean(usize),
    Mse(usize, usize),
    SqDist(usize, usize),
    L1ToConst { a: usize, target: Tensor<T> },
    Blur { x: usize, kernel: Vec<T> },
    Reshape(usize),
    HwcToChw(usize),
    ChwToHwc(usize),
    BroadcastRows(usize),
    Row { a: usize, row: usize },
    Normalize { a: usize, norm: T },
    Dot(usize, usize),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Linear { .. } => "linear",
            Op::Upsample2x(_) => "upsample2x",
            Op::AvgPool2x(_) => "avg_downsample2x",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::InstanceNorm { .. } => "instance_norm",
            Op::Modulate { .. } => "modulate",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddScalar(_) => "add_scalar",
            Op::Scale(..) => "scale",
            Op::Pow(..) => "pow",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::ChannelMean(_) => "channel_mean",
            Op::Mse(..) => "mse",
            Op::SqDist(..) => "sq_dist",
            Op::L1ToConst { .. } => "l1_to_constant",
            Op::Blur { .. } => "gaussian_blur",
            Op::Reshape(_) => "reshape",
            Op::HwcToChw(_) => "hwc_to_chw",
            Op::ChwToHwc(_) => "chw_to_hwc",
            Op::BroadcastRows(_) => "broadcast_rows",
            Op::Row { .. } => "row",
            Op::Normalize { .. } => "normalize",
            Op::Dot(..) => "dot",
        }
    }
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    needs_grad: bool,
}

/// A tape of evaluated nodes.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints returned by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not influence the loss.
    pub fn take(&mut self, v: Var, like: &[usize]) -> Tensor<T> {
        self.grads
            .get_mut(v.0)
            .and_then(|g| g.take())
            .unwrap_or_else(|| Tensor::zeros(like))
    }
}

fn label<T>(idx: usize, op: &Op<T>) -> String {
    format!("node {idx} ({})", op.name())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    /// Leaf whose gradient is requested.
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true)
    }

    fn leaf(&mut self, t: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: t,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, inputs: &[usize]) -> Result<Var> {
        let idx = self.nodes.len();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                node: label(idx, &op),
            });
        }
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Ok(Var(idx))
    }

    fn next_label(&self, name: &str) -> String {
        format!("node {} ({name})", self.nodes.len())
    }

    fn same_shape(&self, name: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                self.next_label(name),
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn expect_rank(&self, name: &str, v: Var, rank: usize) -> Result<()> {
        if self.shape(v).len() != rank {
            return Err(Error::shape(
                self.next_label(name),
                format!("expected rank {rank}, got {:?}", self.shape(v)),
            ));
        }
        Ok(())
    }

    /// Fingerprint of which side of its kink every piecewise op sits on.
    ///
    /// Two evaluations of the same construction with equal fingerprints ran
    /// through the same smooth branch of every leaky-relu, relu and L1 node.
    pub fn branch_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |bit: bool| {
            h = (h ^ bit as u64).wrapping_mul(0x0000_0100_0000_01b3);
        };
        for node in &self.nodes {
            match &node.op {
                Op::LeakyRelu { x, .. } | Op::Relu(x) => {
                    for &v in self.nodes[*x].value.data() {
                        mix(v > T::zero());
                    }
                }
                Op::L1ToConst { a, target } => {
                    for (&v, &t) in self.nodes[*a].value.data().iter().zip(target.data()) {
                        mix(v > t);
                        mix(v < t);
                    }
                }
                _ => {}
            }
        }
        h
    }

    /// Stride-1 "same" convolution. `x: [Ci,H,W]`, `w: [Co,Ci,k,k]` with odd k, `b: [Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.expect_rank("conv2d", x, 3)?;
        self.expect_rank("conv2d", w, 4)?;
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (co, ci, k) = (ws[0], ws[1], ws[2]);
        if ws[3] != k || k % 2 == 0 || ci != xs[0] || self.shape(b) != [co] {
            return Err(Error::shape(
                self.next_label("conv2d"),
                format!("input {xs:?}, weight {ws:?}, bias {:?}", self.shape(b)),
            ));
        }
        let out = conv2d_forward(
            self.value(x).data(),
            &xs,
            self.value(w).data(),
            &ws,
            self.value(b).data(),
        );
        let value = Tensor::new(vec![co, xs[1], xs[2]], out)?;
        self.push(
            Op::Conv2d {
                x: x.0,
                w: w.0,
                b: b.0,
            },
            value,
            &[x.0, w.0, b.0],
        )
    }

    /// `y = W x + b` with `x: [n]`, `W: [m,n]`, `b: [m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.expect_rank("linear", x, 1)?;
        let n = self.shape(x)[0];
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || ws[1] != n || self.shape(b) != [ws[0]] {
            return Err(Error::shape(
                self.next_label("linear"),
                format!("input [{n}], weight {ws:?}, bias {:?}", self.shape(b)),
            ));
        }
        let m = ws[0];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let out: Vec<T> = (0..m)
            .map(|r| {
                let row = &wv[r * n..(r + 1) * n];
                row.iter().zip(xv).fold(bv[r], |acc, (&a, &b)| acc + a * b)
            })
            .collect();
        let value = Tensor::new(vec![m], out)?;
        self.push(
            Op::Linear {
                x: x.0,
                w: w.0,
                b: b.0,
            },
            value,
            &[x.0, w.0, b.0],
        )
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        self.expect_rank("upsample2x", x, 3)?;
        let s = self.shape(x).to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); c * 4 * h * w];
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(ch * 2 * h + y) * 2 * w + xx] = src[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::new(vec![c, 2 * h, 2 * w], out)?;
        self.push(Op::Upsample2x(x.0), value, &[x.0])
    }

    /// 2x2 average pooling with stride 2; spatial extents must be even.
    pub fn avg_downsample2x(&mut self, x: Var) -> Result<Var> {
        self.expect_rank("avg_downsample2x", x, 3)?;
        let s = self.shape(x).to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(
                self.next_label("avg_downsample2x"),
                format!("odd spatial extent {s:?}"),
            ));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let quarter = T::lit(0.25);
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let i = (ch * h + 2 * y) * w + 2 * xx;
                    out[(ch * oh + y) * ow + xx] =
                        (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
                }
            }
        }
        let value = Tensor::new(vec![c, oh, ow], out)?;
        self.push(Op::AvgPool2x(x.0), value, &[x.0])
    }

    pub fn leaky_relu(&mut self, x: Var, alpha: f64) -> Result<Var> {
        let alpha = T::lit(alpha);
        let value = self
            .value(x)
            .map(|v| if v > T::zero() { v } else { v * alpha });
        self.push(Op::LeakyRelu { x: x.0, alpha }, value, &[x.0])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(T::zero()));
        self.push(Op::Relu(x.0), value, &[x.0])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push(Op::Sigmoid(x.0), value, &[x.0])
    }

    /// Per-channel normalization to zero mean, unit variance over the spatial extent.
    pub fn instance_norm(&mut self, x: Var) -> Result<Var> {
        self.expect_rank("instance_norm", x, 3)?;
        let s = self.shape(x).to_vec();
        let (c, hw) = (s[0], s[1] * s[2]);
        let src = self.value(x).data();
        let eps = T::lit(1e-5);
        let n = T::from_usize(hw).unwrap();
        let mut out = vec![T::zero(); c * hw];
        let mut inv_std = Vec::with_capacity(c);
        for ch in 0..c {
            let xs = &src[ch * hw..(ch + 1) * hw];
            let mean = xs.iter().copied().sum::<T>() / n;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            for (o, &v) in out[ch * hw..(ch + 1) * hw].iter_mut().zip(xs) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let value = Tensor::new(s, out)?;
        self.push(Op::InstanceNorm { x: x.0, inv_std }, value, &[x.0])
    }

    /// `y[c,..] = x[c,..] * scale[c] + shift[c]`.
    pub fn modulate(&mut self, x: Var, scale: Var, shift: Var) -> Result<Var> {
        self.expect_rank("modulate", x, 3)?;
        let c = self.shape(x)[0];
        if self.shape(scale) != [c] || self.shape(shift) != [c] {
            return Err(Error::shape(
                self.next_label("modulate"),
                format!(
                    "input {:?}, scale {:?}, shift {:?}",
                    self.shape(x),
                    self.shape(scale),
                    self.shape(shift)
                ),
            ));
        }
        let hw = self.value(x).len() / c;
        let src = self.value(x).data();
        let sc = self.value(scale).data();
        let sh = self.value(shift).data();
        let mut out = vec![T::zero(); c * hw];
        for ch in 0..c {
            for (o, &v) in out[ch * hw..(ch + 1) * hw]
                .iter_mut()
                .zip(&src[ch * hw..(ch + 1) * hw])
            {
                *o = v * sc[ch] + sh[ch];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(
            Op::Modulate {
                x: x.0,
                scale: scale.0,
                shift: shift.0,
            },
            value,
            &[x.0, scale.0, shift.0],
        )
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let value = self.value(a).zip_map(self.value(b), f)?;
        self.push(op, value, &[a.0, b.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a.0, b.0), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a.0, b.0), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a.0, b.0), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a.0, b.0), |x, y| x / y)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::lit(c);
        let value = self.value(a).map(|v| v + c);
        self.push(Op::AddScalar(a.0), value, &[a.0])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::lit(c);
        let value = self.value(a).map(|v| v * c);
        self.push(Op::Scale(a.0, c), value, &[a.0])
    }

    /// Elementwise `x^p` for `x >= 0`; the derivative is taken as 0 at `x == 0`.
    pub fn pow(&mut self, a: Var, p: f64) -> Result<Var> {
        let p = T::lit(p);
        let value = self.value(a).map(|v| v.powf(p));
        self.push(Op::Pow(a.0, p), value, &[a.0])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a.0), value, &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).mean());
        self.push(Op::Mean(a.0), value, &[a.0])
    }

    /// `[C, ...] -> [C]` mean over all trailing axes.
    pub fn channel_mean(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() < 2 {
            return Err(Error::shape(
                self.next_label("channel_mean"),
                format!("need rank >= 2, got {:?}", self.shape(a)),
            ));
        }
        let c = self.shape(a)[0];
        let per = self.value(a).len() / c;
        let n = T::from_usize(per).unwrap();
        let d = self.value(a).data();
        let out = (0..c)
            .map(|ch| d[ch * per..(ch + 1) * per].iter().copied().sum::<T>() / n)
            .collect();
        let value = Tensor::new(vec![c], out)?;
        self.push(Op::ChannelMean(a.0), value, &[a.0])
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let s = sq_dist(self.value(a).data(), self.value(b).data());
        let value = Tensor::scalar(s / T::from_usize(self.value(a).len()).unwrap());
        self.push(Op::Mse(a.0, b.0), value, &[a.0, b.0])
    }

    /// Sum of squared differences.
    pub fn sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sq_dist", a, b)?;
        let value = Tensor::scalar(sq_dist(self.value(a).data(), self.value(b).data()));
        self.push(Op::SqDist(a.0, b.0), value, &[a.0, b.0])
    }

    /// `sum |a - target|`; the subgradient at ties is 0.
    pub fn l1_to_constant(&mut self, a: Var, target: &Tensor<T>) -> Result<Var> {
        if self.shape(a) != target.shape() {
            return Err(Error::shape(
                self.next_label("l1_to_constant"),
                format!("{:?} vs {:?}", self.shape(a), target.shape()),
            ));
        }
        let s: T = self
            .value(a)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &t)| (x - t).abs())
            .sum();
        self.push(
            Op::L1ToConst {
                a: a.0,
                target: target.clone(),
            },
            Tensor::scalar(s),
            &[a.0],
        )
    }

    /// Separable filter with "valid" padding: `[C,H,W] -> [C,H-n+1,W-n+1]`.
    pub fn gaussian_blur(&mut self, x: Var, kernel: &[T]) -> Result<Var> {
        self.expect_rank("gaussian_blur", x, 3)?;
        let s = self.shape(x).to_vec();
        let n = kernel.len();
        if n == 0 || n > s[1] || n > s[2] {
            return Err(Error::shape(
                self.next_label("gaussian_blur"),
                format!("window {n} larger than image {s:?}"),
            ));
        }
        let out = blur_forward(self.value(x).data(), &s, kernel);
        let value = Tensor::new(vec![s[0], s[1] - n + 1, s[2] - n + 1], out)?;
        self.push(
            Op::Blur {
                x: x.0,
                kernel: kernel.to_vec(),
            },
            value,
            &[x.0],
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self
            .value(a)
            .clone()
            .reshape(shape)
            .map_err(|e| Error::shape(self.next_label("reshape"), e.to_string()))?;
        self.push(Op::Reshape(a.0), value, &[a.0])
    }

    pub fn hwc_to_chw(&mut self, a: Var) -> Result<Var> {
        self.expect_rank("hwc_to_chw", a, 3)?;
        let s = self.shape(a).to_vec();
        let value = Tensor::new(
            vec![s[2], s[0], s[1]],
            permute_hwc_chw(self.value(a).data(), s[0], s[1], s[2]),
        )?;
        self.push(Op::HwcToChw(a.0), value, &[a.0])
    }

    pub fn chw_to_hwc(&mut self, a: Var) -> Result<Var> {
        self.expect_rank("chw_to_hwc", a, 3)?;
        let s = self.shape(a).to_vec();
        let value = Tensor::new(
            vec![s[1], s[2], s[0]],
            permute_chw_hwc(self.value(a).data(), s[0], s[1], s[2]),
        )?;
        self.push(Op::ChwToHwc(a.0), value, &[a.0])
    }

    /// `[d] -> [rows, d]`.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        self.expect_rank("broadcast_rows", a, 1)?;
        if rows == 0 {
            return Err(Error::shape(self.next_label("broadcast_rows"), "zero rows"));
        }
        let d = self.value(a).data();
        let out = d.iter().copied().cycle().take(rows * d.len()).collect();
        let value = Tensor::new(vec![rows, d.len()], out)?;
        self.push(Op::BroadcastRows(a.0), value, &[a.0])
    }

    /// Row `row` of a `[L, d]` matrix.
    pub fn row(&mut self, a: Var, row: usize) -> Result<Var> {
        self.expect_rank("row", a, 2)?;
        let s = self.shape(a).to_vec();
        if row >= s[0] {
            return Err(Error::shape(
                self.next_label("row"),
                format!("row {row} out of range for {s:?}"),
            ));
        }
        let d = s[1];
        let value = Tensor::new(vec![d], self.value(a).data()[row * d..(row + 1) * d].to_vec())?;
        self.push(Op::Row { a: a.0, row }, value, &[a.0])
    }

    /// Scale to unit L2 norm; a zero vector is an error.
    pub fn normalize(&mut self, a: Var) -> Result<Var> {
        let norm = self.value(a).l2_norm();
        if norm <= T::lit(1e-12) {
            return Err(Error::Invalid(format!(
                "{}: zero-norm activation cannot be normalized",
                self.next_label("normalize")
            )));
        }
        let value = self.value(a).map(|v| v / norm);
        self.push(Op::Normalize { a: a.0, norm }, value, &[a.0])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("dot", a, b)?;
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .fold(T::zero(), |acc, (&x, &y)| acc + x * y);
        self.push(Op::Dot(a.0, b.0), Tensor::scalar(s), &[a.0, b.0])
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                label(loss.0, &self.nodes[loss.0].op),
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.adjoint(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn adjoint(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let val = |i: usize| &self.nodes[i].value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, .. } => {
                let xs = val(*x).shape().to_vec();
                let ws = val(*w).shape().to_vec();
                if self.wants(*x) {
                    let dx = conv2d_backward_input(gd, &xs, val(*w).data(), &ws);
                    accumulate(grads, *x, &xs, dx);
                }
                if self.wants(*w) {
                    let dw = conv2d_backward_weight(gd, val(*x).data(), &xs, &ws);
                    accumulate(grads, *w, &ws, dw);
                }
                if self.wants(*b) {
                    let hw = xs[1] * xs[2];
                    let db = (0..ws[0])
                        .map(|c| gd[c * hw..(c + 1) * hw].iter().copied().sum())
                        .collect();
                    accumulate(grads, *b, &[ws[0]], db);
                }
            }
            Op::Linear { x, w, b } => {
                let n = val(*x).len();
                let m = gd.len();
                let wv = val(*w).data();
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); n];
                    for (r, &gr) in gd.iter().enumerate() {
                        for (d, &wrc) in dx.iter_mut().zip(&wv[r * n..(r + 1) * n]) {
                            *d = *d + gr * wrc;
                        }
                    }
                    accumulate(grads, *x, &[n], dx);
                }
                if self.wants(*w) {
                    let xv = val(*x).data();
                    let mut dw = vec![T::zero(); m * n];
                    for (r, &gr) in gd.iter().enumerate() {
                        for (d, &xc) in dw[r * n..(r + 1) * n].iter_mut().zip(xv) {
                            *d = gr * xc;
                        }
                    }
                    accumulate(grads, *w, &[m, n], dw);
                }
                if self.wants(*b) {
                    accumulate(grads, *b, &[m], gd.to_vec());
                }
            }
            Op::Upsample2x(x) => {
                let s = val(*x).shape().to_vec();
                let (c, h, w) = (s[0], s[1], s[2]);
                let mut dx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            let d = &mut dx[(ch * h + y / 2) * w + xx / 2];
                            *d = *d + gd[(ch * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                accumulate(grads, *x, &s, dx);
            }
            Op::AvgPool2x(x) => {
                let s = val(*x).shape().to_vec();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (h / 2, w / 2);
                let quarter = T::lit(0.25);
                let mut dx = vec![T::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let gq = gd[(ch * oh + y) * ow + xx] * quarter;
                            let i = (ch * h + 2 * y) * w + 2 * xx;
                            dx[i] = gq;
                            dx[i + 1] = gq;
                            dx[i + w] = gq;
                            dx[i + w + 1] = gq;
                        }
                    }
                }
                accumulate(grads, *x, &s, dx);
            }
            Op::LeakyRelu { x, alpha } => {
                let dx = val(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { gv * *alpha })
                    .collect();
                accumulate(grads, *x, val(*x).shape(), dx);
            }
            Op::Relu(x) => {
                let dx = val(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                accumulate(grads, *x, val(*x).shape(), dx);
            }
            Op::Sigmoid(x) => {
                let dx = node
                    .value
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&y, &gv)| gv * y * (T::one() - y))
                    .collect();
                accumulate(grads, *x, val(*x).shape(), dx);
            }
            Op::InstanceNorm { x, inv_std } => {
                let s = val(*x).shape().to_vec();
                let (c, hw) = (s[0], s[1] * s[2]);
                let n = T::from_usize(hw).unwrap();
                let y = node.value.data();
                let mut dx = vec![T::zero(); c * hw];
                for ch in 0..c {
                    let r = ch * hw..(ch + 1) * hw;
                    let gs = &gd[r.clone()];
                    let ys = &y[r.clone()];
                    let mg = gs.iter().copied().sum::<T>() / n;
                    let mgy = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum::<T>() / n;
                    for ((d, &gv), &yv) in dx[r].iter_mut().zip(gs).zip(ys) {
                        *d = inv_std[ch] * (gv - mg - yv * mgy);
                    }
                }
                accumulate(grads, *x, &s, dx);
            }
            Op::Modulate { x, scale, shift } => {
                let c = val(*scale).len();
                let hw = gd.len() / c;
                let sc = val(*scale).data();
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); c * hw];
                    for ch in 0..c {
                        for (d, &gv) in dx[ch * hw..(ch + 1) * hw]
                            .iter_mut()
                            .zip(&gd[ch * hw..(ch + 1) * hw])
                        {
                            *d = gv * sc[ch];
                        }
                    }
                    accumulate(grads, *x, val(*x).shape(), dx);
                }
                if self.wants(*scale) {
                    let xv = val(*x).data();
                    let ds = (0..c)
                        .map(|ch| {
                            let r = ch * hw..(ch + 1) * hw;
                            gd[r.clone()].iter().zip(&xv[r]).map(|(&a, &b)| a * b).sum()
                        })
                        .collect();
                    accumulate(grads, *scale, &[c], ds);
                }
                if self.wants(*shift) {
                    let dsh = (0..c)
                        .map(|ch| gd[ch * hw..(ch + 1) * hw].iter().copied().sum())
                        .collect();
                    accumulate(grads, *shift, &[c], dsh);
                }
            }
            Op::Add(a, b) => {
                self.pass(grads, *a, gd.to_vec());
                self.pass(grads, *b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.pass(grads, *a, gd.to_vec());
                self.pass(grads, *b, gd.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let d = gd.iter().zip(val(*b).data()).map(|(&g, &y)| g * y).collect();
                    self.pass(grads, *a, d);
                }
                if self.wants(*b) {
                    let d = gd.iter().zip(val(*a).data()).map(|(&g, &x)| g * x).collect();
                    self.pass(grads, *b, d);
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b).data();
                if self.wants(*a) {
                    let d = gd.iter().zip(bv).map(|(&g, &y)| g / y).collect();
                    self.pass(grads, *a, d);
                }
                if self.wants(*b) {
                    let d = gd
                        .iter()
                        .zip(node.value.data())
                        .zip(bv)
                        .map(|((&g, &q), &y)| -g * q / y)
                        .collect();
                    self.pass(grads, *b, d);
                }
            }
            Op::AddScalar(a) => self.pass(grads, *a, gd.to_vec()),
            Op::Scale(a, c) => self.pass(grads, *a, gd.iter().map(|&v| v * *c).collect()),
            Op::Pow(a, p) => {
                let d = val(*a)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&x, &g)| {
                        if x == T::zero() {
                            T::zero()
                        } else {
                            g * *p * x.powf(*p - T::one())
                        }
                    })
                    .collect();
                self.pass(grads, *a, d);
            }
            Op::Sum(a) => {
                let n = val(*a).len();
                self.pass(grads, *a, vec![gd[0]; n]);
            }
            Op::Mean(a) => {
                let n = val(*a).len();
                let v = gd[0] / T::from_usize(n).unwrap();
                self.pass(grads, *a, vec![v; n]);
            }
            Op::ChannelMean(a) => {
                let c = gd.len();
                let per = val(*a).len() / c;
                let n = T::from_usize(per).unwrap();
                let d = (0..c * per).map(|i| gd[i / per] / n).collect();
                self.pass(grads, *a, d);
            }
            Op::Mse(a, b) | Op::SqDist(a, b) => {
                let mut k = T::lit(2.0) * gd[0];
                if matches!(node.op, Op::Mse(..)) {
                    k = k / T::from_usize(val(*a).len()).unwrap();
                }
                let diff: Vec<T> = val(*a)
                    .data()
                    .iter()
                    .zip(val(*b).data())
                    .map(|(&x, &y)| k * (x - y))
                    .collect();
                if self.wants(*b) {
                    self.pass(grads, *b, diff.iter().map(|&v| -v).collect());
                }
                self.pass(grads, *a, diff);
            }
            Op::L1ToConst { a, target } => {
                let d = val(*a)
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&x, &t)| {
                        if x > t {
                            gd[0]
                        } else if x < t {
                            -gd[0]
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.pass(grads, *a, d);
            }
            Op::Blur { x, kernel } => {
                let s = val(*x).shape().to_vec();
                let dx = blur_backward(gd, &s, kernel);
                accumulate(grads, *x, &s, dx);
            }
            Op::Reshape(a) => self.pass(grads, *a, gd.to_vec()),
            Op::HwcToChw(a) => {
                let s = val(*a).shape();
                self.pass(grads, *a, permute_chw_hwc(gd, s[2], s[0], s[1]));
            }
            Op::ChwToHwc(a) => {
                let s = val(*a).shape();
                self.pass(grads, *a, permute_hwc_chw(gd, s[1], s[2], s[0]));
            }
            Op::BroadcastRows(a) => {
                let d = val(*a).len();
                let mut da = vec![T::zero(); d];
                for chunk in gd.chunks_exact(d) {
                    for (o, &v) in da.iter_mut().zip(chunk) {
                        *o = *o + v;
                    }
                }
                self.pass(grads, *a, da);
            }
            Op::Row { a, row } => {
                let s = val(*a).shape();
                let d = s[1];
                let mut da = vec![T::zero(); s[0] * d];
                da[row * d..(row + 1) * d].copy_from_slice(gd);
                self.pass(grads, *a, da);
            }
            Op::Normalize { a, norm } => {
                let y = node.value.data();
                let yg: T = y.iter().zip(gd).map(|(&p, &q)| p * q).sum();
                let da = y
                    .iter()
                    .zip(gd)
                    .map(|(&yv, &gv)| (gv - yv * yg) / *norm)
                    .collect();
                self.pass(grads, *a, da);
            }
            Op::Dot(a, b) => {
                if self.wants(*a) {
                    let d = val(*b).data().iter().map(|&v| v * gd[0]).collect();
                    self.pass(grads, *a, d);
                }
                if self.wants(*b) {
                    let d = val(*a).data().iter().map(|&v| v * gd[0]).collect();
                    self.pass(grads, *b, d);
                }
            }
        }
        Ok(())
    }

    fn pass(&self, grads: &mut [Option<Tensor<T>>], i: usize, d: Vec<T>) {
        if self.wants(i) {
            let shape = self.nodes[i].value.shape().to_vec();
            accumulate(grads, i, &shape, d);
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], i: usize, shape: &[usize], d: Vec<T>) {
    match &mut grads[i] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(d) {
                *e = *e + v;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), d).expect("adjoint shape"));
        }
    }
}

fn sq_dist<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (&x, &y)| acc + (x - y) * (x - y))
}

fn permute_hwc_chw<T: Real>(src: &[T], h: usize, w: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                out[(ch * h + y) * w + x] = src[(y * w + x) * c + ch];
            }
        }
    }
    out
}

fn permute_chw_hwc<T: Real>(src: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(y * w + x) * c + ch] = src[(ch * h + y) * w + x];
            }
        }
    }
    out
}

/// Row range `[lo, hi)` of output positions that read input `pos + off`.
fn valid_range(len: usize, off: isize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (len as isize - off).min(len as isize).max(0) as usize;
    (lo, hi.max(lo))
}

fn conv2d_forward<T: Real>(x: &[T], xs: &[usize], w: &[T], ws: &[usize], b: &[T]) -> Vec<T> {
    let (ci_n, h, wd) = (xs[0], xs[1], xs[2]);
    let (co_n, k) = (ws[0], ws[2]);
    let pad = (k / 2) as isize;
    let hw = h * wd;
    let mut out = vec![T::zero(); co_n * hw];
    for co in 0..co_n {
        let out_c = &mut out[co * hw..(co + 1) * hw];
        out_c.iter_mut().for_each(|o| *o = b[co]);
        for ci in 0..ci_n {
            let in_c = &x[ci * hw..(ci + 1) * hw];
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = valid_range(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let (x0, x1) = valid_range(wd, dx);
                    let wv = w[((co * ci_n + ci) * k + ky) * k + kx];
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let orow = &mut out_c[y * wd + x0..y * wd + x1];
                        let ix0 = (x0 as isize + dx) as usize;
                        let irow = &in_c[iy * wd + ix0..iy * wd + ix0 + (x1 - x0)];
                        for (o, &i) in orow.iter_mut().zip(irow) {
                            *o = *o + wv * i;
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv2d_backward_input<T: Real>(g: &[T], xs: &[usize], w: &[T], ws: &[usize]) -> Vec<T> {
    let (ci_n, h, wd) = (xs[0], xs[1], xs[2]);
    let (co_n, k) = (ws[0], ws[2]);
    let pad = (k / 2) as isize;
    let hw = h * wd;
    let mut dx = vec![T::zero(); ci_n * hw];
    for co in 0..co_n {
        let g_c = &g[co * hw..(co + 1) * hw];
        for ci in 0..ci_n {
            let dx_c = &mut dx[ci * hw..(ci + 1) * hw];
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = valid_range(h, dy);
                for kx in 0..k {
                    let dxo = kx as isize - pad;
                    let (x0, x1) = valid_range(wd, dxo);
                    let wv = w[((co * ci_n + ci) * k + ky) * k + kx];
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let grow = &g_c[y * wd + x0..y * wd + x1];
                        let ix0 = (x0 as isize + dxo) as usize;
                        let drow = &mut dx_c[iy * wd + ix0..iy * wd + ix0 + (x1 - x0)];
                        for (d, &gv) in drow.iter_mut().zip(grow) {
                            *d = *d + wv * gv;
                        }
                    }
                }
            }
        }
    }
    dx
}

fn conv2d_backward_weight<T: Real>(g: &[T], x: &[T], xs: &[usize], ws: &[usize]) -> Vec<T> {
    let (ci_n, h, wd) = (xs[0], xs[1], xs[2]);
    let (co_n, k) = (ws[0], ws[2]);
    let pad = (k / 2) as isize;
    let hw = h * wd;
    let mut dw = vec![T::zero(); co_n * ci_n * k * k];
    for co in 0..co_n {
        let g_c = &g[co * hw..(co + 1) * hw];
        for ci in 0..ci_n {
            let in_c = &x[ci * hw..(ci + 1) * hw];
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = valid_range(h, dy);
                for kx in 0..k {
                    let dxo = kx as isize - pad;
                    let (x0, x1) = valid_range(wd, dxo);
                    let mut acc = T::zero();
                    for y in y0..y1 {
                        let iy = (y as isize + dy) as usize;
                        let grow = &g_c[y * wd + x0..y * wd + x1];
                        let ix0 = (x0 as isize + dxo) as usize;
                        let irow = &in_c[iy * wd + ix0..iy * wd + ix0 + (x1 - x0)];
                        acc = grow.iter().zip(irow).fold(acc, |a, (&p, &q)| a + p * q);
                    }
                    dw[((co * ci_n + ci) * k + ky) * k + kx] = acc;
                }
            }
        }
    }
    dw
}

fn blur_forward<T: Real>(x: &[T], s: &[usize], k: &[T]) -> Vec<T> {
    let (c, h, w) = (s[0], s[1], s[2]);
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut tmp = vec![T::zero(); c * h * ow];
    for ch in 0..c {
        for y in 0..h {
            let row = &x[(ch * h + y) * w..(ch * h + y + 1) * w];
            let trow = &mut tmp[(ch * h + y) * ow..(ch * h + y + 1) * ow];
            for (xo, t) in trow.iter_mut().enumerate() {
                *t = k.iter().zip(&row[xo..xo + n]).fold(T::zero(), |a, (&kv, &v)| a + kv * v);
            }
        }
    }
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        for yo in 0..oh {
            let orow = &mut out[(ch * oh + yo) * ow..(ch * oh + yo + 1) * ow];
            for (i, &kv) in k.iter().enumerate() {
                let trow = &tmp[(ch * h + yo + i) * ow..(ch * h + yo + i + 1) * ow];
                for (o, &t) in orow.iter_mut().zip(trow) {
                    *o = *o + kv * t;
                }
            }
        }
    }
    out
}

fn blur_backward<T: Real>(g: &[T], s: &[usize], k: &[T]) -> Vec<T> {
    let (c, h, w) = (s[0], s[1], s[2]);
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut dtmp = vec![T::zero(); c * h * ow];
    for ch in 0..c {
        for yo in 0..oh {
            let grow = &g[(ch * oh + yo) * ow..(ch * oh + yo + 1) * ow];
            for (i, &kv) in k.iter().enumerate() {
                let trow = &mut dtmp[(ch * h + yo + i) * ow..(ch * h + yo + i + 1) * ow];
                for (t, &gv) in trow.iter_mut().zip(grow) {
                    *t = *t + kv * gv;
                }
            }
        }
    }
    let mut dx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let trow = &dtmp[(ch * h + y) * ow..(ch * h + y + 1) * ow];
            let drow = &mut dx[(ch * h + y) * w..(ch * h + y + 1) * w];
            for (xo, &t) in trow.iter().enumerate() {
                for (d, &kv) in drow[xo..xo + n].iter_mut().zip(k) {
                    *d = *d + kv * t;
                }
            }
        }
    }
    dx
}

/// Evaluate `build` on fresh variable leaves for `inputs`, then differentiate.
///
/// Returns the scalar loss and one gradient per input, in input order.
pub fn evaluate_and_backprop<T, F>(inputs: &[Tensor<T>], build: F) -> Result<(T, Vec<Tensor<T>>)>
where
    T: Real,
    F: FnOnce(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let mut grads = g.backward(loss)?;
    let out = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.take(v, t.shape()))
        .collect();
    Ok((g.scalar(loss), out))
}
