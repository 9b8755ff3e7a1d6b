//! Multi-head fusion of horizontal and vertical RoI features.
//!
//! Each feature block `C x H x W` becomes `W` position vectors of length `C*H`.
//! Horizontal then vertical vectors form one sequence that passes through
//! stacked self-attention layers. The fused map is the head-averaged attention
//! of the last layer restricted to vertical queries and horizontal keys, a
//! `W_ver x W_hor` block.
//!
//! The forward pass is generic over [`Scalar`] so that [`Dual`] numbers can
//! carry exact directional derivatives through it.

use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::ProbMask;
use crate::radar::Orientation;

pub const DEFAULT_LAYERS: usize = 4;
pub const DEFAULT_HEADS: usize = 4;

/// Real scalar the attention forward pass can run on.
pub trait Scalar:
    Copy
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
{
    fn from_f64(v: f64) -> Self;
    fn value(self) -> f64;
    fn exp(self) -> Self;
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn value(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
}

/// Forward-mode dual number `value + deriv * eps`, `eps^2 = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dual {
    pub value: f64,
    pub deriv: f64,
}

impl Dual {
    pub fn constant(value: f64) -> Self {
        Self { value, deriv: 0.0 }
    }

    pub fn variable(value: f64) -> Self {
        Self { value, deriv: 1.0 }
    }
}

impl Add for Dual {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            value: self.value + o.value,
            deriv: self.deriv + o.deriv,
        }
    }
}

impl Sub for Dual {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self {
            value: self.value - o.value,
            deriv: self.deriv - o.deriv,
        }
    }
}

impl Mul for Dual {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        Self {
            value: self.value * o.value,
            deriv: self.deriv * o.value + self.value * o.deriv,
        }
    }
}

impl Div for Dual {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        Self {
            value: self.value / o.value,
            deriv: (self.deriv * o.value - self.value * o.deriv) / (o.value * o.value),
        }
    }
}

impl Neg for Dual {
    type Output = Self;
    fn neg(self) -> Self {
        Self {
            value: -self.value,
            deriv: -self.deriv,
        }
    }
}

impl AddAssign for Dual {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl Scalar for Dual {
    fn from_f64(v: f64) -> Self {
        Self::constant(v)
    }
    fn value(self) -> f64 {
        self.value
    }
    fn exp(self) -> Self {
        let e = self.value.exp();
        Self {
            value: e,
            deriv: self.deriv * e,
        }
    }
}

/// Feature map `C x H x W`, stored `(c * H + h) * W + w`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureBlock {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub origin: Orientation,
}

impl FeatureBlock {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        values: Vec<f64>,
        origin: Orientation,
    ) -> Result<Self> {
        let block = Self {
            channels,
            height,
            width,
            values,
            origin,
        };
        block.validate()?;
        Ok(block)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Empty("feature block"));
        }
        if self.values.len() != self.channels * self.height * self.width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {}x{}x{} feature block",
                self.values.len(),
                self.channels,
                self.height,
                self.width
            )));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("feature values must be finite".into()));
        }
        Ok(())
    }

    /// Position vector of column `w`, channel-major then height.
    fn column<T: Scalar>(&self, values: &[T], w: usize) -> Vec<T> {
        let mut v = Vec::with_capacity(self.channels * self.height);
        for c in 0..self.channels {
            for h in 0..self.height {
                v.push(values[(c * self.height + h) * self.width + w]);
            }
        }
        v
    }
}

/// Projections of one attention layer. Matrices are `D x D`, row-major, and
/// applied as `y = x W + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionLayer {
    pub wq: Vec<f64>,
    pub bq: Vec<f64>,
    pub wk: Vec<f64>,
    pub bk: Vec<f64>,
    pub wv: Vec<f64>,
    pub bv: Vec<f64>,
    pub wo: Vec<f64>,
    pub bo: Vec<f64>,
}

impl AttentionLayer {
    pub fn zeros(d: usize) -> Self {
        Self {
            wq: vec![0.0; d * d],
            bq: vec![0.0; d],
            wk: vec![0.0; d * d],
            bk: vec![0.0; d],
            wv: vec![0.0; d * d],
            bv: vec![0.0; d],
            wo: vec![0.0; d * d],
            bo: vec![0.0; d],
        }
    }

    /// Parameter tensors in serialization order.
    pub fn tensors(&self) -> [&Vec<f64>; 8] {
        [
            &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo, &self.bo,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 8] {
        [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
        ]
    }

    fn validate(&self, d: usize) -> Result<()> {
        for (i, t) in self.tensors().iter().enumerate() {
            let expected = if i % 2 == 0 { d * d } else { d };
            if t.len() != expected {
                return Err(Error::ShapeMismatch(format!(
                    "attention tensor {i} has {} values, expected {expected}",
                    t.len()
                )));
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidConfig(
                    "attention weights must be finite".into(),
                ));
            }
        }
        Ok(())
    }
}

pub const TENSOR_ORDER: [&str; 8] = ["wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"];

/// Stacked attention layers sharing model width and head count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights {
    pub d_model: usize,
    pub heads: usize,
    pub layers: Vec<AttentionLayer>,
}

impl AttentionWeights {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.layers.is_empty() {
            return Err(Error::InvalidConfig(
                "attention needs d_model, heads and layers >= 1".into(),
            ));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::ShapeMismatch(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        self.layers
            .iter()
            .try_for_each(|l| l.validate(self.d_model))
    }

    /// Uniform weights in `+-1/sqrt(D)` from a seeded ChaCha stream, biases
    /// included, drawn layer by layer in tensor order.
    pub fn seeded(layers: usize, heads: usize, d_model: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (d_model as f64).sqrt();
        let layers = (0..layers)
            .map(|_| {
                let mut layer = AttentionLayer::zeros(d_model);
                for t in layer.tensors_mut() {
                    for v in t.iter_mut() {
                        *v = rng.random_range(-bound..bound);
                    }
                }
                layer
            })
            .collect();
        let w = Self {
            d_model,
            heads,
            layers,
        };
        w.validate()?;
        Ok(w)
    }

    /// Query/key projections `gain * I`, value/output projections zero, so
    /// every layer passes its input through the residual unchanged and the
    /// attention scores are scaled dot products of the raw position vectors.
    pub fn correlation(layers: usize, heads: usize, d_model: usize, gain: f64) -> Result<Self> {
        let mut layer = AttentionLayer::zeros(d_model);
        for i in 0..d_model {
            layer.wq[i * d_model + i] = gain;
            layer.wk[i * d_model + i] = gain;
        }
        let w = Self {
            d_model,
            heads,
            layers: vec![layer; layers],
        };
        w.validate()?;
        Ok(w)
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Output of one attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput<T = f64> {
    pub outputs: Vec<Vec<T>>,
    /// Per head, an `N x N` row-stochastic matrix (row = query).
    pub attention: Vec<Vec<T>>,
}

impl AttentionOutput<f64> {
    /// Head-averaged `N x N` attention.
    pub fn mean_attention(&self) -> Vec<f64> {
        let h = self.attention.len() as f64;
        let n = self.attention[0].len();
        (0..n)
            .map(|i| self.attention.iter().map(|a| a[i]).sum::<f64>() / h)
            .collect()
    }
}

/// Flattens columns of both blocks into one sequence: `W_hor` horizontal
/// vectors, then `W_ver` vertical ones, each of length `C*H`.
pub fn reshape_concat(hor: &FeatureBlock, ver: &FeatureBlock) -> Result<Vec<Vec<f64>>> {
    reshape_concat_values(hor, &hor.values, ver, &ver.values)
}

fn reshape_concat_values<T: Scalar>(
    hor: &FeatureBlock,
    hor_values: &[T],
    ver: &FeatureBlock,
    ver_values: &[T],
) -> Result<Vec<Vec<T>>> {
    hor.validate()?;
    ver.validate()?;
    if hor.channels != ver.channels || hor.height != ver.height {
        return Err(Error::ShapeMismatch(format!(
            "horizontal {}x{} vs vertical {}x{} (C x H)",
            hor.channels, hor.height, ver.channels, ver.height
        )));
    }
    let mut seq = Vec::with_capacity(hor.width + ver.width);
    seq.extend((0..hor.width).map(|w| hor.column(hor_values, w)));
    seq.extend((0..ver.width).map(|w| ver.column(ver_values, w)));
    Ok(seq)
}

fn affine<T: Scalar>(x: &[T], w: &[f64], b: &[f64]) -> Vec<T> {
    let d = b.len();
    let mut y: Vec<T> = b.iter().map(|&v| T::from_f64(v)).collect();
    for (i, xi) in x.iter().enumerate() {
        let row = &w[i * d..(i + 1) * d];
        for (yj, &wij) in y.iter_mut().zip(row) {
            *yj += *xi * T::from_f64(wij);
        }
    }
    y
}

/// Scaled dot-product self-attention with `heads` heads, output projection and
/// residual connection.
pub fn multi_head_attention(
    seq: &[Vec<f64>],
    layer: &AttentionLayer,
    heads: usize,
) -> Result<AttentionOutput> {
    multi_head_attention_generic(seq, layer, heads)
}

pub fn multi_head_attention_generic<T: Scalar>(
    seq: &[Vec<T>],
    layer: &AttentionLayer,
    heads: usize,
) -> Result<AttentionOutput<T>> {
    if seq.is_empty() {
        return Err(Error::Empty("attention input sequence"));
    }
    let d = seq[0].len();
    if d == 0 || heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::ShapeMismatch(format!(
            "model width {d} not divisible by {heads} heads"
        )));
    }
    if seq.iter().any(|v| v.len() != d) {
        return Err(Error::ShapeMismatch("ragged attention input".into()));
    }
    layer.validate(d)?;
    let n = seq.len();
    let dh = d / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());

    let q: Vec<Vec<T>> = seq
        .iter()
        .map(|x| affine(x, &layer.wq, &layer.bq))
        .collect();
    let k: Vec<Vec<T>> = seq
        .iter()
        .map(|x| affine(x, &layer.wk, &layer.bk))
        .collect();
    let v: Vec<Vec<T>> = seq
        .iter()
        .map(|x| affine(x, &layer.wv, &layer.bv))
        .collect();

    let mut attention = Vec::with_capacity(heads);
    let mut concat = vec![vec![T::from_f64(0.0); d]; n];
    for head in 0..heads {
        let cols = head * dh..(head + 1) * dh;
        let mut probs = Vec::with_capacity(n * n);
        for i in 0..n {
            let scores: Vec<T> = (0..n)
                .map(|j| {
                    let mut s = T::from_f64(0.0);
                    for c in cols.clone() {
                        s += q[i][c] * k[j][c];
                    }
                    s * scale
                })
                .collect();
            let max =
                scores
                    .iter()
                    .copied()
                    .fold(scores[0], |m, s| if s.value() > m.value() { s } else { m });
            let exps: Vec<T> = scores.iter().map(|&s| (s - max).exp()).collect();
            let mut total = T::from_f64(0.0);
            for &e in &exps {
                total += e;
            }
            let row: Vec<T> = exps.iter().map(|&e| e / total).collect();
            for c in cols.clone() {
                let mut acc = T::from_f64(0.0);
                for (j, &p) in row.iter().enumerate() {
                    acc += p * v[j][c];
                }
                concat[i][c] = acc;
            }
            probs.extend(row);
        }
        attention.push(probs);
    }

    let outputs = seq
        .iter()
        .zip(&concat)
        .map(|(x, z)| {
            affine(z, &layer.wo, &layer.bo)
                .into_iter()
                .zip(x)
                .map(|(o, &r)| o + r)
                .collect()
        })
        .collect();
    Ok(AttentionOutput { outputs, attention })
}

/// Result of [`fuse`].
#[derive(Debug, Clone, PartialEq)]
pub struct FusionOutput {
    /// `rows x cols` = `W_ver x W_hor`, row-major.
    pub block: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
    /// Head-averaged `N x N` attention of every layer.
    pub layer_attention: Vec<Vec<f64>>,
}

/// Runs all attention layers over the concatenated sequence and crops the
/// vertical-query / horizontal-key block of the final head-averaged attention.
pub fn fuse(
    hor: &FeatureBlock,
    ver: &FeatureBlock,
    weights: &AttentionWeights,
) -> Result<FusionOutput> {
    weights.validate()?;
    let mut seq = reshape_concat(hor, ver)?;
    check_width(&seq, weights)?;
    let n = seq.len();
    let mut layer_attention = Vec::with_capacity(weights.layers.len());
    for layer in &weights.layers {
        let out = multi_head_attention(&seq, layer, weights.heads)?;
        layer_attention.push(out.mean_attention());
        seq = out.outputs;
    }
    let last = layer_attention.last().expect("at least one layer");
    let block = crop_lower_left(last, n, hor.width);
    Ok(FusionOutput {
        block,
        rows: ver.width,
        cols: hor.width,
        layer_attention,
    })
}

fn check_width<T>(seq: &[Vec<T>], weights: &AttentionWeights) -> Result<()> {
    if seq[0].len() != weights.d_model {
        return Err(Error::ShapeMismatch(format!(
            "features have C*H = {} but weights expect d_model = {}",
            seq[0].len(),
            weights.d_model
        )));
    }
    Ok(())
}

fn crop_lower_left<T: Copy>(attn: &[T], n: usize, w_hor: usize) -> Vec<T> {
    (w_hor..n)
        .flat_map(|i| (0..w_hor).map(move |j| attn[i * n + j]))
        .collect()
}

/// Sum of the fused block and its gradient with respect to every horizontal
/// and vertical feature value, by forward-mode differentiation.
pub fn fused_sum_gradient(
    hor: &FeatureBlock,
    ver: &FeatureBlock,
    weights: &AttentionWeights,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    weights.validate()?;
    let total = hor.values.len() + ver.values.len();
    let mut grad = Vec::with_capacity(total);
    let mut value = 0.0;
    for seed in 0..total {
        let lift = |values: &[f64], offset: usize| -> Vec<Dual> {
            values
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    if i + offset == seed {
                        Dual::variable(v)
                    } else {
                        Dual::constant(v)
                    }
                })
                .collect()
        };
        let hv = lift(&hor.values, 0);
        let vv = lift(&ver.values, hor.values.len());
        let mut seq = reshape_concat_values(hor, &hv, ver, &vv)?;
        check_width(&seq, weights)?;
        let n = seq.len();
        let mut last = Vec::new();
        for layer in &weights.layers {
            let out = multi_head_attention_generic(&seq, layer, weights.heads)?;
            let h = Dual::constant(weights.heads as f64);
            last = (0..n * n)
                .map(|i| {
                    let mut s = Dual::constant(0.0);
                    for a in &out.attention {
                        s += a[i];
                    }
                    s / h
                })
                .collect();
            seq = out.outputs;
        }
        let sum = crop_lower_left(&last, n, hor.width)
            .into_iter()
            .fold(Dual::constant(0.0), |a, b| a + b);
        value = sum.value;
        grad.push(sum.deriv);
    }
    let ver_grad = grad.split_off(hor.values.len());
    Ok((value, grad, ver_grad))
}

/// Bilinear resize of a `rows x cols` grid to `size x size`, pixel centers
/// aligned, edges clamped.
pub fn upsample_bilinear(block: &[f64], rows: usize, cols: usize, size: usize) -> Result<Vec<f64>> {
    if rows == 0 || cols == 0 || size == 0 || block.len() != rows * cols {
        return Err(Error::ShapeMismatch(format!(
            "cannot upsample {} values as {rows}x{cols} to {size}x{size}",
            block.len()
        )));
    }
    let src = ProbMaskView { block, rows, cols };
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let sy = (y as f64 + 0.5) * rows as f64 / size as f64 - 0.5;
        for x in 0..size {
            let sx = (x as f64 + 0.5) * cols as f64 / size as f64 - 0.5;
            out.push(src.sample(sx, sy));
        }
    }
    Ok(out)
}

struct ProbMaskView<'a> {
    block: &'a [f64],
    rows: usize,
    cols: usize,
}

impl ProbMaskView<'_> {
    fn sample(&self, x: f64, y: f64) -> f64 {
        let x = x.clamp(0.0, (self.cols - 1) as f64);
        let y = y.clamp(0.0, (self.rows - 1) as f64);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.cols - 1), (y0 + 1).min(self.rows - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let at = |c: usize, r: usize| self.block[r * self.cols + c];
        let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
        let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }
}

/// Stand-in silhouette decoder: upsample the fused block to `size x size` and
/// min-max normalize into `[0, 1]`. A flat block maps to all zeros.
pub fn decode_mask(fused: &FusionOutput, size: usize) -> Result<ProbMask> {
    let up = upsample_bilinear(&fused.block, fused.rows, fused.cols, size)?;
    let (lo, hi) = up
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let span = hi - lo;
    let values = if span > 1e-12 * hi.abs().max(1.0) {
        up.iter()
            .map(|v| ((v - lo) / span).clamp(0.0, 1.0))
            .collect()
    } else {
        vec![0.0; up.len()]
    };
    ProbMask::new(size, size, values)
}
