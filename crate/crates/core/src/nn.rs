//! Small differentiable toolkit: dense matrices, linear and attention
//! layers, rotary position embedding, the training losses, Adam, and a
//! central-difference gradient checker.
//!
//! There is no autodiff graph. Each op exposes a forward function and a
//! backward function that takes the upstream gradient; composite models
//! chain them by hand and are certified with [`grad_check`].

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::spectral::{StftConfig, StftPlan};

/// Row-major matrix of finite `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("matrix entry {bad}")));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn row_vector(v: &[f64]) -> Self {
        Matrix {
            rows: 1,
            cols: v.len(),
            data: v.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * other^T`.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} times ({}x{})^T",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Matrix::from_fn(self.rows, other.rows, |i, j| dot(self.row(i), other.row(j))))
    }

    /// `self^T * other`.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::ShapeMismatch(format!(
                "({}x{})^T times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let arow = self.row(r);
            let brow = other.row(r);
            for (i, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{:?} += {:?}",
                self.shape(),
                other.shape()
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn norm(&self) -> f64 {
        dot(&self.data, &self.data).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

// ---------------------------------------------------------------------------
// Linear layer

#[derive(Debug, Clone)]
pub struct LinearGrads {
    pub dx: Matrix,
    pub dw: Matrix,
    pub db: Vec<f64>,
}

/// `y = x W + b`, with `b` broadcast over rows.
pub fn linear(x: &Matrix, w: &Matrix, b: &[f64]) -> Result<Matrix> {
    if b.len() != w.cols {
        return Err(Error::ShapeMismatch(format!(
            "bias of length {} for {} outputs",
            b.len(),
            w.cols
        )));
    }
    let mut y = x.matmul(w)?;
    for r in 0..y.rows {
        for (v, bias) in y.row_mut(r).iter_mut().zip(b) {
            *v += bias;
        }
    }
    Ok(y)
}

pub fn linear_backward(x: &Matrix, w: &Matrix, dy: &Matrix) -> Result<LinearGrads> {
    let dx = dy.matmul_t(w)?;
    let dw = x.t_matmul(dy)?;
    let mut db = vec![0.0; dy.cols];
    for r in 0..dy.rows {
        for (acc, g) in db.iter_mut().zip(dy.row(r)) {
            *acc += g;
        }
    }
    Ok(LinearGrads { dx, dw, db })
}

// ---------------------------------------------------------------------------
// Cross-attention

/// Softmax weights kept from the forward pass.
#[derive(Debug, Clone)]
pub struct AttentionCache {
    pub weights: Matrix,
}

#[derive(Debug, Clone)]
pub struct AttentionGrads {
    pub dq: Matrix,
    pub dk: Matrix,
    pub dv: Matrix,
}

fn softmax_rows(scores: &mut Matrix) {
    for r in 0..scores.rows {
        let row = scores.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
}

/// `softmax(Q K^T / sqrt(d)) V`.
pub fn cross_attention(q: &Matrix, k: &Matrix, v: &Matrix) -> Result<(Matrix, AttentionCache)> {
    if q.cols != k.cols {
        return Err(Error::ShapeMismatch(format!(
            "query width {} != key width {}",
            q.cols, k.cols
        )));
    }
    if k.rows != v.rows {
        return Err(Error::ShapeMismatch(format!(
            "{} keys but {} values",
            k.rows, v.rows
        )));
    }
    if k.rows == 0 {
        return Err(Error::ShapeMismatch("attention over zero keys".into()));
    }
    let mut scores = q.matmul_t(k)?;
    scores.scale(1.0 / (q.cols as f64).sqrt());
    softmax_rows(&mut scores);
    let out = scores.matmul(v)?;
    Ok((out, AttentionCache { weights: scores }))
}

pub fn cross_attention_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    cache: &AttentionCache,
    d_out: &Matrix,
) -> Result<AttentionGrads> {
    let a = &cache.weights;
    let dv = a.t_matmul(d_out)?;
    let da = d_out.matmul_t(v)?;
    let mut ds = Matrix::zeros(a.rows, a.cols);
    for r in 0..a.rows {
        let inner = dot(da.row(r), a.row(r));
        for c in 0..a.cols {
            ds.set(r, c, a.get(r, c) * (da.get(r, c) - inner));
        }
    }
    let scale = 1.0 / (q.cols as f64).sqrt();
    ds.scale(scale);
    let dq = ds.matmul(k)?;
    let dk = ds.t_matmul(q)?;
    Ok(AttentionGrads { dq, dk, dv })
}

// ---------------------------------------------------------------------------
// Rotary position embedding

pub const ROPE_BASE: f64 = 10_000.0;

fn rope_apply(x: &Matrix, positions: &[i64], sign: f64) -> Result<Matrix> {
    if x.cols % 2 != 0 {
        return Err(Error::InvalidInput(format!(
            "rotary embedding needs an even width, got {}",
            x.cols
        )));
    }
    if positions.len() != x.rows {
        return Err(Error::ShapeMismatch(format!(
            "{} positions for {} rows",
            positions.len(),
            x.rows
        )));
    }
    let d = x.cols;
    let mut out = x.clone();
    for (r, &pos) in positions.iter().enumerate() {
        let row = out.row_mut(r);
        for i in 0..d / 2 {
            let theta = ROPE_BASE.powf(-2.0 * i as f64 / d as f64);
            let (s, c) = (sign * pos as f64 * theta).sin_cos();
            let (a, b) = (row[2 * i], row[2 * i + 1]);
            row[2 * i] = a * c - b * s;
            row[2 * i + 1] = a * s + b * c;
        }
    }
    Ok(out)
}

/// Rotates each pair `(x[2i], x[2i+1])` of row `r` by
/// `positions[r] * 10000^(-2i/d)`.
pub fn rope_rotate(x: &Matrix, positions: &[i64]) -> Result<Matrix> {
    rope_apply(x, positions, 1.0)
}

/// Gradient through [`rope_rotate`]: the inverse rotation.
pub fn rope_rotate_backward(dy: &Matrix, positions: &[i64]) -> Result<Matrix> {
    rope_apply(dy, positions, -1.0)
}

// ---------------------------------------------------------------------------
// Losses

#[derive(Debug, Clone, PartialEq)]
pub struct TripletOutput {
    pub loss: f64,
    pub grad_anchor: Vec<f64>,
    pub grad_positive: Vec<f64>,
    pub grad_negative: Vec<f64>,
}

/// `max(0, |a-p|^2 - |a-n|^2 + margin)`; the subgradient at the hinge is 0.
pub fn triplet_loss(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> Result<TripletOutput> {
    if anchor.len() != positive.len() || anchor.len() != negative.len() {
        return Err(Error::ShapeMismatch("triplet members differ in dimension".into()));
    }
    if !(margin >= 0.0) {
        return Err(Error::InvalidInput("margin must be non-negative".into()));
    }
    let d = anchor.len();
    let raw = squared_distance(anchor, positive) - squared_distance(anchor, negative) + margin;
    if raw <= 0.0 {
        return Ok(TripletOutput {
            loss: 0.0,
            grad_anchor: vec![0.0; d],
            grad_positive: vec![0.0; d],
            grad_negative: vec![0.0; d],
        });
    }
    let grad_anchor = (0..d).map(|i| 2.0 * (negative[i] - positive[i])).collect();
    let grad_positive = (0..d).map(|i| -2.0 * (anchor[i] - positive[i])).collect();
    let grad_negative = (0..d).map(|i| 2.0 * (anchor[i] - negative[i])).collect();
    Ok(TripletOutput {
        loss: raw,
        grad_anchor,
        grad_positive,
        grad_negative,
    })
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean absolute error and its gradient with respect to `est`.
pub fn time_mae_slices(est: &[f64], reference: &[f64]) -> Result<(f64, Vec<f64>)> {
    if est.len() != reference.len() || est.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "estimate of {} samples vs reference of {}",
            est.len(),
            reference.len()
        )));
    }
    let n = est.len() as f64;
    let loss = est.iter().zip(reference).map(|(e, r)| (e - r).abs()).sum::<f64>() / n;
    let grad = est.iter().zip(reference).map(|(e, r)| sign(e - r) / n).collect();
    Ok((loss, grad))
}

/// [`time_mae_slices`] over every channel of two equally shaped clips.
pub fn time_mae(
    est: &crate::audio::AudioClip,
    reference: &crate::audio::AudioClip,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if !est.same_shape(reference) {
        return Err(Error::ShapeMismatch("time MAE on differently shaped clips".into()));
    }
    let flat_e: Vec<f64> = est.channels().concat();
    let flat_r: Vec<f64> = reference.channels().concat();
    let (loss, grad) = time_mae_slices(&flat_e, &flat_r)?;
    Ok((loss, grad.chunks(est.len()).map(|c| c.to_vec()).collect()))
}

/// Multi-resolution complex spectrogram MAE: the mean over resolutions of
/// `mean(|Re(S_est - S_ref)| + |Im(S_est - S_ref)|)`.
#[derive(Debug, Clone)]
pub struct MultiResSpecLoss {
    plans: Vec<StftPlan>,
}

impl MultiResSpecLoss {
    pub fn new(configs: &[StftConfig]) -> Result<Self> {
        if configs.is_empty() {
            return Err(Error::InvalidInput("need at least one STFT configuration".into()));
        }
        Ok(MultiResSpecLoss {
            plans: configs.iter().map(|&c| StftPlan::new(c)).collect::<Result<_>>()?,
        })
    }

    pub fn configs(&self) -> Vec<StftConfig> {
        self.plans.iter().map(|p| p.config()).collect()
    }

    /// Loss and gradient with respect to `est`.
    ///
    /// The STFT is linear, so both are computed on `est - ref`; the
    /// gradient is the adjoint STFT applied to the element-wise signs.
    pub fn loss_and_grad(&self, est: &[f64], reference: &[f64]) -> Result<(f64, Vec<f64>)> {
        if est.len() != reference.len() {
            return Err(Error::ShapeMismatch(format!(
                "estimate of {} samples vs reference of {}",
                est.len(),
                reference.len()
            )));
        }
        let diff: Vec<f64> = est.iter().zip(reference).map(|(e, r)| e - r).collect();
        let n_res = self.plans.len() as f64;
        let mut loss = 0.0;
        let mut grad = vec![0.0; diff.len()];
        let mut buf = Vec::new();
        for plan in &self.plans {
            let cfg = plan.config();
            let spec = plan.forward(&diff, 0)?;
            let cells = (spec.frames() * spec.bins()) as f64;
            loss += spec
                .values
                .data
                .iter()
                .map(|c| c.re.abs() + c.im.abs())
                .sum::<f64>()
                / (cells * n_res);

            let n = cfg.window_size;
            let pad = if cfg.centered { n / 2 } else { 0 };
            let weight = 1.0 / (cells * n_res);
            let window = plan.window();
            for t in 0..spec.frames() {
                buf.clear();
                buf.extend(spec.values.row(t).iter().map(|c| Complex64::new(sign(c.re), sign(c.im))));
                buf.resize(n, Complex64::new(0.0, 0.0));
                plan.ifft_in_place(&mut buf);
                let start = (t * cfg.hop) as isize - pad as isize;
                for (j, b) in buf.iter().enumerate() {
                    let idx = start + j as isize;
                    if idx >= 0 && (idx as usize) < grad.len() {
                        grad[idx as usize] += weight * window[j] * b.re;
                    }
                }
            }
        }
        Ok((loss, grad))
    }
}

impl MultiResSpecLoss {
    /// Smallest `|Re|` or `|Im|` over all cells of `STFT(est - ref)`,
    /// skipping the imaginary parts of the DC and Nyquist bins (always
    /// zero). The loss is linear within this distance of `est`, which is
    /// what a finite-difference check needs.
    pub fn kink_margin(&self, est: &[f64], reference: &[f64]) -> Result<f64> {
        let diff: Vec<f64> = est.iter().zip(reference).map(|(e, r)| e - r).collect();
        let mut margin = f64::INFINITY;
        for plan in &self.plans {
            let n = plan.config().window_size;
            let spec = plan.forward(&diff, 0)?;
            for t in 0..spec.frames() {
                for (k, c) in spec.values.row(t).iter().enumerate() {
                    margin = margin.min(c.re.abs());
                    if k != 0 && !(n % 2 == 0 && k == n / 2) {
                        margin = margin.min(c.im.abs());
                    }
                }
            }
        }
        Ok(margin)
    }
}

/// Convenience form of [`MultiResSpecLoss`] over mono clips.
pub fn multires_spec_mae(
    est: &crate::audio::AudioClip,
    reference: &crate::audio::AudioClip,
    configs: &[StftConfig],
) -> Result<(f64, Vec<f64>)> {
    if !est.same_shape(reference) || est.num_channels() != 1 {
        return Err(Error::ShapeMismatch(
            "spectral MAE needs two mono clips of equal shape".into(),
        ));
    }
    MultiResSpecLoss::new(configs)?.loss_and_grad(est.channel(0), reference.channel(0))
}

// ---------------------------------------------------------------------------
// Parameters and optimisation

#[derive(Debug, Clone, PartialEq)]
struct Param {
    value: Matrix,
    grad: Matrix,
    m: Matrix,
    v: Matrix,
}

/// Named parameters with gradient accumulators and Adam moments.
///
/// Iteration is ordered by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

const STORE_MAGIC: &[u8; 4] = b"OSTR";
const STORE_VERSION: u32 = 1;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        let (r, c) = value.shape();
        self.params.insert(
            name.into(),
            Param {
                value,
                grad: Matrix::zeros(r, c),
                m: Matrix::zeros(r, c),
                v: Matrix::zeros(r, c),
            },
        );
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.params
            .get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::ModelFormat(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Matrix> {
        self.params
            .get_mut(name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::ModelFormat(format!("missing parameter {name}")))
    }

    pub fn grad(&self, name: &str) -> Result<&Matrix> {
        self.params
            .get(name)
            .map(|p| &p.grad)
            .ok_or_else(|| Error::ModelFormat(format!("missing parameter {name}")))
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data.fill(0.0);
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, g: &Matrix) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::ModelFormat(format!("missing parameter {name}")))?;
        p.grad.add_assign(g)
    }

    /// Adds every gradient in `grads` to the matching accumulator.
    pub fn accumulate_all(&mut self, grads: &BTreeMap<String, Matrix>) -> Result<()> {
        for (name, g) in grads {
            self.accumulate_grad(name, g)?;
        }
        Ok(())
    }

    pub fn scale_grads(&mut self, s: f64) {
        for p in self.params.values_mut() {
            p.grad.scale(s);
        }
    }

    /// Optimiser steps taken so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update using the accumulated gradients.
    pub fn adam_step(&mut self, lr: f64, cfg: AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for p in self.params.values_mut() {
            for i in 0..p.value.data.len() {
                let g = p.grad.data[i];
                let m = cfg.beta1 * p.m.data[i] + (1.0 - cfg.beta1) * g;
                let v = cfg.beta2 * p.v.data[i] + (1.0 - cfg.beta2) * g * g;
                p.m.data[i] = m;
                p.v.data[i] = v;
                p.value.data[i] -= lr * (m / c1) / ((v / c2).sqrt() + cfg.eps);
            }
        }
    }

    /// Serialises parameter values: `"OSTR"`, version `u32`, then for each
    /// parameter (name length `u32`, UTF-8 name, rows `u32`, cols `u32`,
    /// row-major `f64` values). Little-endian throughout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(STORE_MAGIC);
        out.extend_from_slice(&STORE_VERSION.to_le_bytes());
        for (name, p) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(p.value.rows as u32).to_le_bytes());
            out.extend_from_slice(&(p.value.cols as u32).to_le_bytes());
            for v in &p.value.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..4] != STORE_MAGIC {
            return Err(Error::ModelFormat("missing OSTR magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != STORE_VERSION {
            return Err(Error::ModelFormat(format!("unsupported version {version}")));
        }
        let mut store = ParamStore::new();
        let mut pos = 8;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::ModelFormat("unexpected end of file".into()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        while pos < bytes.len() {
            let name_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(&mut pos, name_len)?)
                .map_err(|_| Error::ModelFormat("parameter name is not UTF-8".into()))?
                .to_string();
            let rows = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let cols = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
            let raw = take(&mut pos, rows * cols * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let m = Matrix::new(rows, cols, data)
                .map_err(|e| Error::ModelFormat(format!("parameter {name}: {e}")))?;
            if store.contains(&name) {
                return Err(Error::ModelFormat(format!("duplicate parameter {name}")));
            }
            store.insert(name, m);
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

// ---------------------------------------------------------------------------
// Gradient checking

/// Analytic gradients keyed by parameter name.
pub type Gradients = BTreeMap<String, Matrix>;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub step: f64,
    /// Max of `|a - n| / max(|a|, |n|, 1e-8)` over the checked entries.
    pub max_rel_error: BTreeMap<String, f64>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.max_rel_error.values().cloned().fold(0.0, f64::max)
    }

    pub fn is_empty(&self) -> bool {
        self.max_rel_error.is_empty()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares analytic gradients against central differences for every entry.
pub fn grad_check<F>(params: &ParamStore, step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(f64, Gradients)>,
{
    grad_check_sampled(params, step, usize::MAX, f)
}

/// As [`grad_check`], but checks at most `max_entries` evenly strided
/// entries of each parameter.
pub fn grad_check_sampled<F>(params: &ParamStore, step: f64, max_entries: usize, f: F) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore) -> Result<(f64, Gradients)>,
{
    let (loss, analytic) = f(params)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss {loss}")));
    }
    let mut report = GradCheckReport {
        step,
        max_rel_error: BTreeMap::new(),
    };
    let mut probe = params.clone();
    for name in params.names() {
        let value = params.get(name)?;
        let n = value.as_slice().len();
        let zeros = Matrix::zeros(value.rows(), value.cols());
        let grad = analytic.get(name).unwrap_or(&zeros);
        if grad.shape() != value.shape() {
            return Err(Error::ShapeMismatch(format!("gradient for {name}")));
        }
        let stride = n.div_ceil(max_entries.max(1)).max(1);
        let mut worst: f64 = 0.0;
        for i in (0..n).step_by(stride) {
            let orig = value.as_slice()[i];
            probe.get_mut(name)?.as_mut_slice()[i] = orig + step;
            let (up, _) = f(&probe)?;
            probe.get_mut(name)?.as_mut_slice()[i] = orig - step;
            let (down, _) = f(&probe)?;
            probe.get_mut(name)?.as_mut_slice()[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite(format!("loss while probing {name}[{i}]")));
            }
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(grad.as_slice()[i], numeric));
        }
        report.max_rel_error.insert(name.to_string(), worst);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::AudioClip;
    use crate::spectral::stft;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn matrix_rejects_non_finite() {
        assert!(Matrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Matrix::new(1, 1, vec![f64::INFINITY]).is_err());
        assert!(Matrix::new(2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn linear_identity_and_bias_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(4, 3, &mut rng);
        assert_eq!(linear(&x, &Matrix::identity(3), &[0.0; 3]).unwrap(), x);
        let y = linear(&x, &Matrix::zeros(3, 2), &[0.5, -2.0]).unwrap();
        for r in 0..4 {
            assert_eq!(y.row(r), &[0.5, -2.0]);
        }
        assert!(linear(&x, &Matrix::zeros(2, 2), &[0.0; 2]).is_err());
    }

    #[test]
    fn linear_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut params = ParamStore::new();
        params.insert("x", random(4, 3, &mut rng));
        params.insert("w", random(3, 2, &mut rng));
        params.insert("b", random(1, 2, &mut rng));
        let target = random(4, 2, &mut rng);
        let report = grad_check(&params, 1e-5, |p| {
            let y = linear(p.get("x")?, p.get("w")?, p.get("b")?.as_slice())?;
            let mut dy = y.clone();
            let mut loss = 0.0;
            for (d, t) in dy.as_mut_slice().iter_mut().zip(target.as_slice()) {
                loss += 0.5 * (*d - t) * (*d - t);
                *d -= t;
            }
            let g = linear_backward(p.get("x")?, p.get("w")?, &dy)?;
            let mut grads = Gradients::new();
            grads.insert("x".into(), g.dx);
            grads.insert("w".into(), g.dw);
            grads.insert("b".into(), Matrix::row_vector(&g.db));
            Ok((loss, grads))
        })
        .unwrap();
        assert!(report.max_error() < 1e-6, "{report:?}");
    }

    #[test]
    fn attention_special_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random(3, 4, &mut rng);
        let k = random(1, 4, &mut rng);
        let v = random(1, 5, &mut rng);
        let (out, _) = cross_attention(&q, &k, &v).unwrap();
        for r in 0..3 {
            assert_eq!(out.row(r), v.row(0));
        }

        let krow = random(1, 4, &mut rng);
        let k = Matrix::from_fn(4, 4, |_, c| krow.get(0, c));
        let v = random(4, 2, &mut rng);
        let (out, cache) = cross_attention(&q, &k, &v).unwrap();
        for r in 0..3 {
            for c in 0..2 {
                let mean = (0..4).map(|i| v.get(i, c)).sum::<f64>() / 4.0;
                assert!((out.get(r, c) - mean).abs() < 1e-12);
            }
            assert!((cache.weights.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        assert!(cross_attention(&q, &random(2, 3, &mut rng), &random(2, 2, &mut rng)).is_err());
        assert!(cross_attention(&q, &random(2, 4, &mut rng), &random(3, 2, &mut rng)).is_err());
    }

    fn attention_check(seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        params.insert("q", random(3, 4, &mut rng));
        params.insert("k", random(5, 4, &mut rng));
        params.insert("v", random(5, 4, &mut rng));
        let proj = random(3, 4, &mut rng);
        grad_check(&params, 1e-5, |p| {
            let (q, k, v) = (p.get("q")?, p.get("k")?, p.get("v")?);
            let (out, cache) = cross_attention(q, k, v)?;
            let loss = dot(out.as_slice(), proj.as_slice());
            let g = cross_attention_backward(q, k, v, &cache, &proj)?;
            let mut grads = Gradients::new();
            grads.insert("q".into(), g.dq);
            grads.insert("k".into(), g.dk);
            grads.insert("v".into(), g.dv);
            Ok((loss, grads))
        })
        .unwrap()
        .max_error()
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        assert!(attention_check(4) < 1e-5);
    }

    #[test]
    fn rope_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(3, 8, &mut rng);
        assert_eq!(rope_rotate(&x, &[0, 0, 0]).unwrap(), x);
        let r = rope_rotate(&x, &[5, 17, 1000]).unwrap();
        for i in 0..3 {
            let (a, b) = (dot(x.row(i), x.row(i)).sqrt(), dot(r.row(i), r.row(i)).sqrt());
            assert!((a - b).abs() < 1e-12);
        }
        let back = rope_rotate_backward(&r, &[5, 17, 1000]).unwrap();
        for (a, b) in back.as_slice().iter().zip(x.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(rope_rotate(&random(1, 5, &mut rng), &[1]).is_err());
    }

    #[test]
    fn triplet_cases() {
        let a = [0.1, 0.2, 0.3];
        let far = [2.0, -1.0, 0.5];
        assert_eq!(triplet_loss(&a, &a, &far, 0.2).unwrap().loss, 0.0);
        assert_eq!(triplet_loss(&a, &a, &a, 0.2).unwrap().loss, 0.2);
        assert!(triplet_loss(&a, &a, &a, -0.1).is_err());
        assert!(triplet_loss(&a, &a[..2], &a, 0.1).is_err());
    }

    #[test]
    fn time_mae_cases() {
        let r = AudioClip::mono(vec![0.1, -0.4, 0.9, 0.0], 8000).unwrap();
        assert_eq!(time_mae(&r, &r).unwrap().0, 0.0);
        let shifted = r.map(|x| x + 0.1);
        let (loss, grad) = time_mae(&shifted, &r).unwrap();
        assert!((loss - 0.1).abs() < 1e-12);
        assert!(grad[0].iter().all(|&g| g == 0.25));
        let other = AudioClip::mono(vec![0.0; 3], 8000).unwrap();
        assert!(time_mae(&r, &other).is_err());
    }

    #[test]
    fn multires_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x: Vec<f64> = (0..4096).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let clip = AudioClip::mono(x, 16_000).unwrap();
        let cfgs = [StftConfig::new(512, 128, false), StftConfig::new(1024, 256, false)];
        assert_eq!(multires_spec_mae(&clip, &clip, &cfgs).unwrap().0, 0.0);

        // est = -ref: the difference is -2 ref, so the loss is twice the
        // per-resolution mean |Re|+|Im| of STFT(ref).
        let neg = clip.scaled(-1.0);
        let (loss, _) = multires_spec_mae(&neg, &clip, &cfgs).unwrap();
        let direct: f64 = cfgs
            .iter()
            .map(|&c| {
                let s = stft(&clip, c).unwrap();
                s.values.data.iter().map(|z| z.re.abs() + z.im.abs()).sum::<f64>()
                    / s.values.data.len() as f64
            })
            .sum::<f64>()
            / cfgs.len() as f64;
        assert!((loss - 2.0 * direct).abs() < 1e-9 * direct);
        assert!(multires_spec_mae(&clip, &clip, &[]).is_err());
    }

    #[test]
    fn adam_behaviour() {
        let mut store = ParamStore::new();
        store.insert("w", Matrix::row_vector(&[1.0, -2.0]));
        store.adam_step(0.1, AdamConfig::default());
        assert_eq!(store.get("w").unwrap().as_slice(), &[1.0, -2.0]);

        for _ in 0..50 {
            store.zero_grads();
            store.accumulate_grad("w", &Matrix::row_vector(&[0.3, -0.3])).unwrap();
            store.adam_step(0.01, AdamConfig::default());
        }
        let w = store.get("w").unwrap();
        assert!(w.get(0, 0) < 1.0 && w.get(0, 1) > -2.0);
    }

    #[test]
    fn adam_descends_quadratic_bowl() {
        let mut store = ParamStore::new();
        store.insert("w", Matrix::row_vector(&[3.0, -4.0, 1.5]));
        let start = store.get("w").unwrap().norm();
        for _ in 0..200 {
            store.zero_grads();
            let mut g = store.get("w").unwrap().clone();
            g.scale(2.0);
            store.accumulate_grad("w", &g).unwrap();
            store.adam_step(0.05, AdamConfig::default());
        }
        assert!(store.get("w").unwrap().norm() * 10.0 <= start);
    }

    #[test]
    fn grad_check_flags_wrong_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xs = random(6, 3, &mut rng);
        let ys = random(6, 1, &mut rng);
        let mut params = ParamStore::new();
        params.insert("w", random(3, 1, &mut rng));
        let model = |p: &ParamStore, wrong: f64| -> Result<(f64, Gradients)> {
            let pred = xs.matmul(p.get("w")?)?;
            let mut resid = pred.clone();
            for (r, y) in resid.as_mut_slice().iter_mut().zip(ys.as_slice()) {
                *r -= y;
            }
            let loss = 0.5 * dot(resid.as_slice(), resid.as_slice());
            let mut g = xs.t_matmul(&resid)?;
            g.scale(wrong);
            Ok((loss, [("w".to_string(), g)].into()))
        };
        let good = grad_check(&params, 1e-5, |p| model(p, 1.0)).unwrap();
        assert!(good.max_error() < 1e-6);
        let bad = grad_check(&params, 1e-5, |p| model(p, 2.0)).unwrap();
        assert!(bad.max_error() > 0.1);
        assert!((bad.max_error() - 0.5).abs() < 1e-4);

        let empty = grad_check(&ParamStore::new(), 1e-5, |_| Ok((0.0, Gradients::new()))).unwrap();
        assert!(empty.is_empty());

        assert!(grad_check(&params, 1e-5, |_| Ok((f64::NAN, Gradients::new()))).is_err());
    }

    #[test]
    fn store_round_trip_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        store.insert("b.bias", random(1, 3, &mut rng));
        store.insert("a.weight", random(2, 3, &mut rng));
        let bytes = store.to_bytes();
        assert_eq!(&bytes[..4], b"OSTR");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        // Sorted by name: "a.weight" comes first.
        assert_eq!(&bytes[8..12], &8u32.to_le_bytes());
        assert_eq!(&bytes[12..20], b"a.weight");
        let back = ParamStore::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);

        assert!(ParamStore::from_bytes(b"NOPE\x01\0\0\0").is_err());
        assert!(ParamStore::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn triplet_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut params = ParamStore::new();
        params.insert("a", random(1, 6, &mut rng));
        params.insert("p", random(1, 6, &mut rng));
        params.insert("n", random(1, 6, &mut rng));
        // Move the negative onto the anchor so the hinge is active.
        let a = params.get("a").unwrap().clone();
        let n = params.get_mut("n").unwrap();
        for (x, y) in n.as_mut_slice().iter_mut().zip(a.as_slice()) {
            *x = 0.9 * y + 0.1 * *x;
        }
        let report = grad_check(&params, 1e-5, |p| {
            let out = triplet_loss(p.get("a")?.as_slice(), p.get("p")?.as_slice(), p.get("n")?.as_slice(), 0.2)?;
            assert!(out.loss > 0.0);
            let mut g = Gradients::new();
            g.insert("a".into(), Matrix::row_vector(&out.grad_anchor));
            g.insert("p".into(), Matrix::row_vector(&out.grad_positive));
            g.insert("n".into(), Matrix::row_vector(&out.grad_negative));
            Ok((out.loss, g))
        })
        .unwrap();
        assert!(report.max_error() < 1e-6, "{report:?}");
    }

    #[test]
    fn time_mae_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let reference: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut params = ParamStore::new();
        params.insert("est", random(1, 64, &mut rng));
        let report = grad_check(&params, 1e-6, |p| {
            let (l, g) = time_mae_slices(p.get("est")?.as_slice(), &reference)?;
            Ok((l, [("est".to_string(), Matrix::row_vector(&g))].into()))
        })
        .unwrap();
        assert!(report.max_error() < 1e-4, "{report:?}");
    }

    #[test]
    fn multires_gradient_matches_finite_differences() {
        let step = 1e-4;
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let loss = MultiResSpecLoss::new(&[StftConfig::new(256, 48, true)]).unwrap();
        let reference: Vec<f64> = (0..800).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // Redraw until no cell sits within a few steps of a kink.
        let est = loop {
            let e: Vec<f64> = (0..800).map(|_| rng.gen_range(-1.0..1.0)).collect();
            if loss.kink_margin(&e, &reference).unwrap() > 4.0 * step {
                break e;
            }
        };
        let mut params = ParamStore::new();
        params.insert("est", Matrix::row_vector(&est));
        let report = grad_check(&params, step, |p| {
            let (l, g) = loss.loss_and_grad(p.get("est")?.as_slice(), &reference)?;
            Ok((l, [("est".to_string(), Matrix::row_vector(&g))].into()))
        })
        .unwrap();
        assert!(report.max_error() < 1e-4, "{report:?}");
    }

    #[test]
    fn rope_inner_products_depend_on_offset_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..100 {
            let q = random(1, 16, &mut rng);
            let k = random(1, 16, &mut rng);
            let (m, n, s) = (rng.gen_range(-500..500), rng.gen_range(-500..500), rng.gen_range(-500..500));
            let lhs = dot(rope_rotate(&q, &[m]).unwrap().as_slice(), rope_rotate(&k, &[n]).unwrap().as_slice());
            let rhs = dot(
                rope_rotate(&q, &[m + s]).unwrap().as_slice(),
                rope_rotate(&k, &[n + s]).unwrap().as_slice(),
            );
            assert!((lhs - rhs).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn rope_norm_preserved(vals in proptest::collection::vec(-10.0f64..10.0, 16), pos in -100_000i64..100_000) {
            let x = Matrix::new(2, 8, vals).unwrap();
            let r = rope_rotate(&x, &[pos, pos / 3]).unwrap();
            for i in 0..2 {
                let a = dot(x.row(i), x.row(i)).sqrt();
                let b = dot(r.row(i), r.row(i)).sqrt();
                prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0));
            }
        }

        #[test]
        fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-30.0f64..30.0, 24)) {
            let q = Matrix::new(2, 4, vals[..8].to_vec()).unwrap();
            let k = Matrix::new(4, 4, vals[8..].to_vec()).unwrap();
            let (_, cache) = cross_attention(&q, &k, &k).unwrap();
            for r in 0..2 {
                prop_assert!((cache.weights.row(r).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }
}
