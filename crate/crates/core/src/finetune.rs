//! Quantization-aware fine-tuning with a straight-through estimator.
//!
//! Factorized layers keep full-precision accumulators `X~`, `Y~` and a scale
//! vector `D~`. Forward and backward passes use `q_lambda(X~)`, `q_lambda(Y~)`;
//! the gradient with respect to a quantized weight is applied to its
//! accumulator unchanged (zeroed outside `[-1.5 lambda, 1.5 lambda]`) and the
//! accumulator is clipped back into that interval after every step.
//!
//! Everything here runs in `f64` with a fixed summation order, so a run is
//! reproducible bit for bit from its seed.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Dataset, Sample};
use crate::error::{FfnError, Result};
use crate::layers::{col2im_add, im2col, output_shape, Activation, FeatureShape, GroupFactors, Model, ModelLayer};
use crate::recovery::{quantize_scaled_value, quantize_value, CLIP};
use crate::tensor::{DenseMatrix, DiagonalScale, LayerDescriptor, TernaryMatrix};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub lr: f64,
    pub momentum: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Train `D~` alongside the accumulators.
    pub train_scale: bool,
    pub train_bias: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { lr: 0.05, momentum: 0.9, batch: 16, epochs: 10, seed: 0, train_scale: true, train_bias: true }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(FfnError::config(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(FfnError::config(format!("momentum {} must lie in [0, 1)", self.momentum)));
        }
        if self.batch == 0 {
            return Err(FfnError::config("batch size must be >= 1"));
        }
        Ok(())
    }
}

/// One group of a factorized layer, row-major `m x k`, `k`, `n x k`.
#[derive(Clone, Debug, PartialEq)]
pub struct FfnParams {
    pub m: usize,
    pub n: usize,
    pub k: usize,
    pub x: Vec<f64>,
    pub d: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum WeightParams {
    /// Row-major `rows x cols` matrix per group.
    Dense(Vec<Vec<f64>>),
    Ffn(Vec<FfnParams>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub weights: WeightParams,
    pub bias: Vec<f64>,
}

/// Parameters of a whole network, or gradients shaped like them.
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub layers: Vec<LayerParams>,
}

impl Params {
    pub fn zeros_like(other: &Params) -> Params {
        let zero = |v: &Vec<f64>| vec![0.0; v.len()];
        Params {
            layers: other
                .layers
                .iter()
                .map(|l| LayerParams {
                    weights: match &l.weights {
                        WeightParams::Dense(w) => WeightParams::Dense(w.iter().map(zero).collect()),
                        WeightParams::Ffn(g) => WeightParams::Ffn(
                            g.iter()
                                .map(|f| FfnParams { x: zero(&f.x), d: zero(&f.d), y: zero(&f.y), ..*f })
                                .collect(),
                        ),
                    },
                    bias: zero(&l.bias),
                })
                .collect(),
        }
    }

    /// Every value, in a fixed order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            match &l.weights {
                WeightParams::Dense(w) => w.iter().for_each(|v| out.extend_from_slice(v)),
                WeightParams::Ffn(g) => g.iter().for_each(|f| {
                    out.extend_from_slice(&f.x);
                    out.extend_from_slice(&f.d);
                    out.extend_from_slice(&f.y);
                }),
            }
            out.extend_from_slice(&l.bias);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLayer {
    pub descriptor: LayerDescriptor,
    pub activation: Activation,
    /// Full-precision parameters; accumulators for factorized layers.
    pub params: LayerParams,
    /// `(lambda_x, lambda_y)` per group; empty for dense layers.
    pub lambdas: Vec<(f64, f64)>,
}

/// Where factorized layers take their initial accumulators from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AccumulatorInit {
    /// Stored accumulators when present (recovered weights), else the pattern.
    Stored,
    /// `lambda * X` and `lambda * Y`: the fixed-point factors as floats.
    Pattern,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub input: FeatureShape,
    pub layers: Vec<TrainLayer>,
    pub options: TrainOptions,
}

fn to_f64(m: &DenseMatrix) -> Vec<f64> {
    m.to_f64()
}

fn ternary_f64(t: &TernaryMatrix, lambda: f64) -> Vec<f64> {
    t.values().iter().map(|&v| lambda * f64::from(v)).collect()
}

impl TrainState {
    pub fn from_model(model: &Model, init: AccumulatorInit, options: TrainOptions) -> Result<Self> {
        options.validate()?;
        let input = model.input.ok_or_else(|| FfnError::config("model has no input shape"))?;
        model.validate_chain()?;
        let mut layers = Vec::with_capacity(model.layers.len());
        for l in &model.layers {
            let desc = l.descriptor.clone();
            let bias = match &l.bias {
                Some(b) => b.iter().map(|&v| f64::from(v)).collect(),
                None => vec![0.0; desc.out_channels],
            };
            let (weights, lambdas) = match &l.factors {
                Some(groups) => {
                    let mut params = Vec::with_capacity(groups.len());
                    let mut lambdas = Vec::with_capacity(groups.len());
                    for g in groups {
                        let (lx, ly) = (g.lambda_x, g.lambda_y);
                        let (x, y) = match (init, &g.accumulators) {
                            (AccumulatorInit::Stored, Some((xa, ya))) => (to_f64(xa), to_f64(ya)),
                            _ => (ternary_f64(&g.x, lx), ternary_f64(&g.y, ly)),
                        };
                        let clip = |v: Vec<f64>, l: f64| v.into_iter().map(|a| a.clamp(-CLIP * l, CLIP * l)).collect();
                        params.push(FfnParams {
                            m: g.x.rows(),
                            n: g.y.rows(),
                            k: g.k(),
                            x: clip(x, lx),
                            d: g.d.values().iter().map(|&v| f64::from(v)).collect(),
                            y: clip(y, ly),
                        });
                        lambdas.push((lx, ly));
                    }
                    (WeightParams::Ffn(params), lambdas)
                }
                None => (WeightParams::Dense(l.dense_weights()?.iter().map(to_f64).collect()), Vec::new()),
            };
            layers.push(TrainLayer {
                descriptor: desc,
                activation: l.activation,
                params: LayerParams { weights, bias },
                lambdas,
            });
        }
        Ok(TrainState { input, layers, options })
    }

    /// Parameters as seen by the forward pass: accumulators quantized.
    pub fn effective_params(&self) -> Params {
        Params {
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    weights: match &l.params.weights {
                        WeightParams::Dense(w) => WeightParams::Dense(w.clone()),
                        WeightParams::Ffn(groups) => WeightParams::Ffn(
                            groups
                                .iter()
                                .zip(&l.lambdas)
                                .map(|(f, &(lx, ly))| FfnParams {
                                    x: f.x.iter().map(|&v| quantize_scaled_value(v, lx)).collect(),
                                    y: f.y.iter().map(|&v| quantize_scaled_value(v, ly)).collect(),
                                    d: f.d.clone(),
                                    ..*f
                                })
                                .collect(),
                        ),
                    },
                    bias: l.params.bias.clone(),
                })
                .collect(),
        }
    }

    /// Ternary patterns of every accumulator, concatenated.
    pub fn patterns(&self) -> Vec<i8> {
        let mut out = Vec::new();
        for l in &self.layers {
            if let WeightParams::Ffn(groups) = &l.params.weights {
                for (f, &(lx, ly)) in groups.iter().zip(&l.lambdas) {
                    out.extend(f.x.iter().map(|&v| quantize_value(v / lx)));
                    out.extend(f.y.iter().map(|&v| quantize_value(v / ly)));
                }
            }
        }
        out
    }

    pub fn to_model(&self) -> Result<Model> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let desc = l.descriptor.clone();
            let bias = desc.has_bias.then(|| l.params.bias.iter().map(|&v| v as f32).collect());
            let f32s = |v: &[f64]| v.iter().map(|&a| a as f32).collect::<Vec<f32>>();
            match &l.params.weights {
                WeightParams::Dense(w) => {
                    let mats = w
                        .iter()
                        .map(|g| DenseMatrix::new(desc.group_rows(), desc.group_cols(), f32s(g)))
                        .collect::<Result<_>>()?;
                    layers.push(ModelLayer::dense(desc, mats, bias, l.activation)?);
                }
                WeightParams::Ffn(groups) => {
                    let mut out = Vec::with_capacity(groups.len());
                    for (f, &(lx, ly)) in groups.iter().zip(&l.lambdas) {
                        let pattern = |v: &[f64], lambda: f64, rows: usize| {
                            let q: Vec<i8> = v.iter().map(|&a| quantize_value(a / lambda)).collect();
                            TernaryMatrix::from_values(rows, f.k, &q)
                        };
                        let mut g = GroupFactors::new(
                            pattern(&f.x, lx, f.m)?,
                            DiagonalScale::new(f32s(&f.d))?,
                            pattern(&f.y, ly, f.n)?,
                        )?;
                        g.lambda_x = lx;
                        g.lambda_y = ly;
                        g.accumulators = Some((
                            DenseMatrix::new(f.m, f.k, f32s(&f.x))?,
                            DenseMatrix::new(f.n, f.k, f32s(&f.y))?,
                        ));
                        out.push(g);
                    }
                    layers.push(ModelLayer {
                        descriptor: LayerDescriptor { has_bias: bias.is_some(), ..desc },
                        activation: l.activation,
                        bias,
                        weights: None,
                        factors: Some(out),
                    });
                }
            }
        }
        Ok(Model { input: Some(self.input), layers })
    }

    pub fn output_len(&self) -> usize {
        self.layers.last().map_or(self.input.len(), |l| {
            let d = &l.descriptor;
            d.out_positions() * d.out_channels
        })
    }

    fn check_batch(&self, batch: &[Sample]) -> Result<()> {
        let classes = self.output_len();
        for s in batch {
            if s.features.len() != self.input.len() {
                return Err(FfnError::data(format!(
                    "sample has {} features, model expects {}",
                    s.features.len(),
                    self.input.len()
                )));
            }
            if s.label >= classes {
                return Err(FfnError::data(format!("label {} outside {classes} classes", s.label)));
            }
        }
        Ok(())
    }
}

struct LayerCache {
    shape: FeatureShape,
    patches: Vec<Vec<f64>>,
    /// Ternary-conv outputs `u` per group (factorized layers only).
    u: Vec<Vec<f64>>,
    z: Vec<f64>,
}

/// Everything the backward pass needs from a forward pass.
pub struct Cache {
    params: Params,
    samples: Vec<Vec<LayerCache>>,
    deltas: Vec<Vec<f64>>,
}

impl Cache {
    /// Parameters the forward pass ran with.
    pub fn params(&self) -> &Params {
        &self.params
    }
}

pub struct Gradients {
    /// Gradient of the mean batch loss, shaped like [`Params`].
    pub params: Params,
    /// Gradient with respect to each input sample.
    pub inputs: Vec<Vec<f64>>,
}

fn forward_sample(state: &TrainState, params: &Params, input: &[f64]) -> Result<(Vec<f64>, Vec<LayerCache>)> {
    let mut shape = state.input;
    let mut a = input.to_vec();
    let mut caches = Vec::with_capacity(state.layers.len());
    for (layer, p) in state.layers.iter().zip(&params.layers) {
        let desc = &layer.descriptor;
        let out_shape = output_shape(desc, shape)?;
        let (rows, ng, n, pos) = (desc.group_rows(), desc.group_cols(), desc.out_channels, desc.out_positions());
        let mut z = vec![0.0; out_shape.len()];
        let mut patches_all = Vec::with_capacity(desc.groups);
        let mut us = Vec::new();
        for g in 0..desc.groups {
            let patches = im2col(&a, shape, desc, g);
            match &p.weights {
                WeightParams::Dense(w) => {
                    let w = &w[g];
                    for p_ in 0..pos {
                        let patch = &patches[p_ * rows..][..rows];
                        let out = &mut z[p_ * n + g * ng..][..ng];
                        for (r, &ar) in patch.iter().enumerate() {
                            for (o, &wv) in out.iter_mut().zip(&w[r * ng..][..ng]) {
                                *o += ar * wv;
                            }
                        }
                    }
                }
                WeightParams::Ffn(groups) => {
                    let f = &groups[g];
                    let k = f.k;
                    let mut u = vec![0.0; pos * k];
                    for p_ in 0..pos {
                        let patch = &patches[p_ * rows..][..rows];
                        let urow = &mut u[p_ * k..][..k];
                        for (r, &ar) in patch.iter().enumerate() {
                            for (ut, &xv) in urow.iter_mut().zip(&f.x[r * k..][..k]) {
                                *ut += ar * xv;
                            }
                        }
                        let out = &mut z[p_ * n + g * ng..][..ng];
                        for (j, o) in out.iter_mut().enumerate() {
                            let yrow = &f.y[j * k..][..k];
                            *o = (0..k).map(|t| urow[t] * f.d[t] * yrow[t]).sum();
                        }
                    }
                    us.push(u);
                }
            }
            patches_all.push(patches);
        }
        for chunk in z.chunks_exact_mut(n) {
            for (v, b) in chunk.iter_mut().zip(&p.bias) {
                *v += b;
            }
        }
        let out: Vec<f64> = z.iter().map(|&v| layer.activation.apply(v)).collect();
        caches.push(LayerCache { shape, patches: patches_all, u: us, z });
        a = out;
        shape = out_shape;
    }
    Ok((a, caches))
}

fn softmax_xent(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (logits[label] - max);
    let probs = exps.iter().map(|e| e / sum).collect();
    (loss, probs)
}

/// Mean softmax cross-entropy of `batch` under explicit parameters.
pub fn forward_with(state: &TrainState, params: &Params, batch: &[Sample]) -> Result<(f64, Cache)> {
    state.check_batch(batch)?;
    let scale = 1.0 / batch.len().max(1) as f64;
    let mut total = 0.0;
    let mut samples = Vec::with_capacity(batch.len());
    let mut deltas = Vec::with_capacity(batch.len());
    for s in batch {
        let (logits, cache) = forward_sample(state, params, &s.features)?;
        let (loss, mut probs) = softmax_xent(&logits, s.label);
        total += loss;
        probs[s.label] -= 1.0;
        deltas.push(probs.into_iter().map(|v| v * scale).collect());
        samples.push(cache);
    }
    let loss = total * scale;
    if !loss.is_finite() {
        return Err(FfnError::Divergence { epoch: 0, step: 0, loss });
    }
    Ok((loss, Cache { params: params.clone(), samples, deltas }))
}

/// Forward pass with quantized accumulators.
pub fn ste_forward(state: &TrainState, batch: &[Sample]) -> Result<(f64, Cache)> {
    forward_with(state, &state.effective_params(), batch)
}

fn backward_sample(state: &TrainState, params: &Params, caches: &[LayerCache], delta: &[f64], grads: &mut Params) -> Vec<f64> {
    let mut delta = delta.to_vec();
    for li in (0..state.layers.len()).rev() {
        let layer = &state.layers[li];
        let desc = &layer.descriptor;
        let c = &caches[li];
        let p = &params.layers[li];
        let gl = &mut grads.layers[li];
        let (rows, ng, n, pos) = (desc.group_rows(), desc.group_cols(), desc.out_channels, desc.out_positions());
        let mut dz = delta;
        if layer.activation == Activation::Relu {
            for (d, &z) in dz.iter_mut().zip(&c.z) {
                if z <= 0.0 {
                    *d = 0.0;
                }
            }
        }
        for chunk in dz.chunks_exact(n) {
            for (b, &d) in gl.bias.iter_mut().zip(chunk) {
                *b += d;
            }
        }
        let mut dinput = vec![0.0; c.shape.len()];
        for g in 0..desc.groups {
            let patches = &c.patches[g];
            let mut dpatch = vec![0.0; pos * rows];
            match (&p.weights, &mut gl.weights) {
                (WeightParams::Dense(w), WeightParams::Dense(gw)) => {
                    let (w, gw) = (&w[g], &mut gw[g]);
                    for p_ in 0..pos {
                        let dzg = &dz[p_ * n + g * ng..][..ng];
                        let patch = &patches[p_ * rows..][..rows];
                        let dp = &mut dpatch[p_ * rows..][..rows];
                        for r in 0..rows {
                            let wr = &w[r * ng..][..ng];
                            let gr = &mut gw[r * ng..][..ng];
                            let mut acc = 0.0;
                            for j in 0..ng {
                                gr[j] += patch[r] * dzg[j];
                                acc += wr[j] * dzg[j];
                            }
                            dp[r] = acc;
                        }
                    }
                }
                (WeightParams::Ffn(fs), WeightParams::Ffn(gs)) => {
                    let (f, gf) = (&fs[g], &mut gs[g]);
                    let k = f.k;
                    let u = &c.u[g];
                    let mut dv = vec![0.0; k];
                    let mut du = vec![0.0; k];
                    for p_ in 0..pos {
                        let dzg = &dz[p_ * n + g * ng..][..ng];
                        let urow = &u[p_ * k..][..k];
                        dv.iter_mut().for_each(|v| *v = 0.0);
                        for (j, &dj) in dzg.iter().enumerate() {
                            let yrow = &f.y[j * k..][..k];
                            let gyrow = &mut gf.y[j * k..][..k];
                            for t in 0..k {
                                dv[t] += yrow[t] * dj;
                                gyrow[t] += dj * urow[t] * f.d[t];
                            }
                        }
                        for t in 0..k {
                            gf.d[t] += dv[t] * urow[t];
                            du[t] = dv[t] * f.d[t];
                        }
                        let patch = &patches[p_ * rows..][..rows];
                        let dp = &mut dpatch[p_ * rows..][..rows];
                        for r in 0..rows {
                            let xr = &f.x[r * k..][..k];
                            let gxr = &mut gf.x[r * k..][..k];
                            let mut acc = 0.0;
                            for t in 0..k {
                                gxr[t] += patch[r] * du[t];
                                acc += xr[t] * du[t];
                            }
                            dp[r] = acc;
                        }
                    }
                }
                _ => unreachable!("gradient buffers mirror the parameters"),
            }
            col2im_add(&dpatch, c.shape, desc, g, &mut dinput);
        }
        delta = dinput;
    }
    delta
}

/// Backward pass for a cache from [`forward_with`], without the STE mask.
pub fn backward_with(state: &TrainState, cache: &Cache) -> Gradients {
    let mut grads = Params::zeros_like(&cache.params);
    let inputs = cache
        .samples
        .iter()
        .zip(&cache.deltas)
        .map(|(c, d)| backward_sample(state, &cache.params, c, d, &mut grads))
        .collect();
    Gradients { params: grads, inputs }
}

/// Gradients with respect to the accumulators: the quantized-weight gradient
/// passed straight through, zeroed where the accumulator is outside the clip range.
pub fn ste_backward(state: &TrainState, cache: &Cache) -> Gradients {
    let mut g = backward_with(state, cache);
    for (gl, l) in g.params.layers.iter_mut().zip(&state.layers) {
        if let (WeightParams::Ffn(gs), WeightParams::Ffn(fs)) = (&mut gl.weights, &l.params.weights) {
            for ((gf, f), &(lx, ly)) in gs.iter_mut().zip(fs).zip(&l.lambdas) {
                mask_outside(&mut gf.x, &f.x, CLIP * lx);
                mask_outside(&mut gf.y, &f.y, CLIP * ly);
            }
        }
    }
    g
}

fn mask_outside(grad: &mut [f64], acc: &[f64], bound: f64) {
    for (g, &a) in grad.iter_mut().zip(acc) {
        if a.abs() > bound {
            *g = 0.0;
        }
    }
}

fn momentum_step(theta: &mut [f64], vel: &mut [f64], grad: &[f64], lr: f64, mu: f64) {
    for ((t, v), &g) in theta.iter_mut().zip(vel.iter_mut()).zip(grad) {
        *v = mu * *v + g;
        *t -= lr * *v;
    }
}

fn apply_update(state: &mut TrainState, grads: &Params, velocity: &mut Params) {
    let (lr, mu) = (state.options.lr, state.options.momentum);
    let (train_scale, train_bias) = (state.options.train_scale, state.options.train_bias);
    for ((l, gl), vl) in state.layers.iter_mut().zip(&grads.layers).zip(velocity.layers.iter_mut()) {
        match (&mut l.params.weights, &gl.weights, &mut vl.weights) {
            (WeightParams::Dense(w), WeightParams::Dense(g), WeightParams::Dense(v)) => {
                for ((w, g), v) in w.iter_mut().zip(g).zip(v.iter_mut()) {
                    momentum_step(w, v, g, lr, mu);
                }
            }
            (WeightParams::Ffn(fs), WeightParams::Ffn(gs), WeightParams::Ffn(vs)) => {
                for (((f, g), v), &(lx, ly)) in fs.iter_mut().zip(gs).zip(vs.iter_mut()).zip(&l.lambdas) {
                    momentum_step(&mut f.x, &mut v.x, &g.x, lr, mu);
                    momentum_step(&mut f.y, &mut v.y, &g.y, lr, mu);
                    f.x.iter_mut().for_each(|a| *a = a.clamp(-CLIP * lx, CLIP * lx));
                    f.y.iter_mut().for_each(|a| *a = a.clamp(-CLIP * ly, CLIP * ly));
                    if train_scale {
                        momentum_step(&mut f.d, &mut v.d, &g.d, lr, mu);
                        f.d.iter_mut().for_each(|a| *a = a.max(0.0));
                    }
                }
            }
            _ => unreachable!("gradient buffers mirror the parameters"),
        }
        if train_bias && l.descriptor.has_bias {
            momentum_step(&mut l.params.bias, &mut vl.bias, &gl.bias, lr, mu);
        }
    }
}

/// Loss and accuracy over a whole dataset, using quantized weights.
pub fn evaluate(state: &TrainState, data: &Dataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(FfnError::data("cannot evaluate on an empty dataset"));
    }
    state.check_batch(&data.samples)?;
    let params = state.effective_params();
    let (mut loss, mut correct) = (0.0, 0usize);
    for s in &data.samples {
        let (logits, _) = forward_sample(state, &params, &s.features)?;
        loss += softmax_xent(&logits, s.label).0;
        let best = logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
            .0;
        correct += usize::from(best == s.label);
    }
    let n = data.len() as f64;
    let loss = loss / n;
    if !loss.is_finite() {
        return Err(FfnError::Divergence { epoch: 0, step: 0, loss });
    }
    Ok((loss, correct as f64 / n))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean minibatch loss seen during the epoch.
    pub loss: f64,
    pub eval_loss: f64,
    pub accuracy: f64,
    /// Ternary entries of `X`, `Y` whose value changed during the epoch.
    pub pattern_flips: usize,
}

pub fn metrics_csv(metrics: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,loss,eval_loss,accuracy,pattern_flips\n");
    for m in metrics {
        let _ = writeln!(out, "{},{:?},{:?},{:?},{}", m.epoch, m.loss, m.eval_loss, m.accuracy, m.pattern_flips);
    }
    out
}

/// SGD with momentum for `state.options.epochs` epochs.
///
/// On divergence the state is left as it was before the offending step.
pub fn train(state: &mut TrainState, data: &Dataset, eval: Option<&Dataset>) -> Result<Vec<EpochMetrics>> {
    state.options.validate()?;
    if data.is_empty() {
        return Err(FfnError::data("training set is empty"));
    }
    state.check_batch(&data.samples)?;
    let mut rng = ChaCha8Rng::seed_from_u64(state.options.seed);
    let mut velocity = Params::zeros_like(&state.effective_params());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut metrics = Vec::with_capacity(state.options.epochs);
    for epoch in 1..=state.options.epochs {
        let before = state.patterns();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        let mut previous: Option<Vec<TrainLayer>> = None;
        for (step, idx) in order.chunks(state.options.batch).enumerate() {
            let batch: Vec<Sample> = idx.iter().map(|&i| data.samples[i].clone()).collect();
            let (loss, cache) = match ste_forward(state, &batch) {
                Ok(v) => v,
                Err(FfnError::Divergence { loss, .. }) => {
                    if let Some(prev) = previous {
                        state.layers = prev;
                    }
                    return Err(FfnError::Divergence { epoch, step, loss });
                }
                Err(e) => return Err(e),
            };
            let grads = ste_backward(state, &cache);
            previous = Some(state.layers.clone());
            apply_update(state, &grads.params, &mut velocity);
            total += loss;
            steps += 1;
        }
        let (eval_loss, accuracy) = evaluate(state, eval.unwrap_or(data)).map_err(|e| match e {
            FfnError::Divergence { loss, .. } => FfnError::Divergence { epoch, step: steps, loss },
            other => other,
        })?;
        let after = state.patterns();
        let pattern_flips = before.iter().zip(&after).filter(|(a, b)| a != b).count();
        metrics.push(EpochMetrics { epoch, loss: total / steps as f64, eval_loss, accuracy, pattern_flips });
    }
    Ok(metrics)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    /// `counts.len() + 1` increasing edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(values: &[f64], bins: usize) -> Self {
        let bins = bins.max(1);
        let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if values.is_empty() {
            return Histogram { edges: vec![0.0, 0.0], counts: vec![0] };
        }
        if lo == hi {
            return Histogram { edges: vec![lo, hi], counts: vec![values.len()] };
        }
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|i| if i == bins { hi } else { lo + width * i as f64 }).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let b = (((v - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        Histogram { edges, counts }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SublayerGradients {
    pub name: String,
    pub count: usize,
    pub min: f64,
    pub max: f64,
    pub stddev: f64,
    pub histogram: Histogram,
}

impl SublayerGradients {
    fn new(name: String, values: &[f64], bins: usize) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        SublayerGradients {
            name,
            count: values.len(),
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            stddev: var.sqrt(),
            histogram: Histogram::new(values, bins),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradientStats {
    pub sublayers: Vec<SublayerGradients>,
}

impl GradientStats {
    /// Largest over smallest nonzero per-sublayer standard deviation.
    pub fn stddev_ratio(&self) -> f64 {
        let sds: Vec<f64> = self.sublayers.iter().map(|s| s.stddev).filter(|&s| s > 0.0).collect();
        let max = sds.iter().copied().fold(0.0, f64::max);
        let min = sds.iter().copied().fold(f64::INFINITY, f64::min);
        if sds.is_empty() { 1.0 } else { max / min }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("sublayer,bin_left,bin_right,count\n");
        for s in &self.sublayers {
            for (i, c) in s.histogram.counts.iter().enumerate() {
                let _ = writeln!(out, "{},{:?},{:?},{}", s.name, s.histogram.edges[i], s.histogram.edges[i + 1], c);
            }
        }
        out
    }
}

/// Raw weight-gradient distributions per sublayer on one batch. Factorized
/// layers contribute `.x`, `.d` and `.y` entries, dense layers `.w`.
pub fn gradient_stats(state: &TrainState, batch: &[Sample], bins: usize) -> Result<GradientStats> {
    let (_, cache) = ste_forward(state, batch)?;
    let grads = ste_backward(state, &cache);
    let mut sublayers = Vec::new();
    for (l, g) in state.layers.iter().zip(&grads.params.layers) {
        let name = l.descriptor.label();
        match &g.weights {
            WeightParams::Dense(w) => {
                let all: Vec<f64> = w.concat();
                sublayers.push(SublayerGradients::new(format!("{name}.w"), &all, bins));
            }
            WeightParams::Ffn(gs) => {
                let pick = |f: fn(&FfnParams) -> &Vec<f64>| gs.iter().flat_map(|p| f(p).iter().copied()).collect::<Vec<f64>>();
                sublayers.push(SublayerGradients::new(format!("{name}.x"), &pick(|p| &p.x), bins));
                sublayers.push(SublayerGradients::new(format!("{name}.d"), &pick(|p| &p.d), bins));
                sublayers.push(SublayerGradients::new(format!("{name}.y"), &pick(|p| &p.y), bins));
            }
        }
    }
    Ok(GradientStats { sublayers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::gaussian_blobs;
    use crate::layers::{forward_ffn, FactorizedLayer};
    use rand::Rng;

    fn rand_f32(rng: &mut ChaCha8Rng, n: usize, s: f32) -> Vec<f32> {
        (0..n).map(|_| rng.random_range(-s..s)).collect()
    }

    fn ternary(rng: &mut ChaCha8Rng, r: usize, c: usize) -> TernaryMatrix {
        let v: Vec<i8> = (0..r * c).map(|_| rng.random_range(-1i8..=1)).collect();
        TernaryMatrix::from_values(r, c, &v).unwrap()
    }

    /// conv (factorized, 2 groups) -> relu -> fc (dense): input 4x4x2, 3 classes.
    fn toy_model(seed: u64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let conv = LayerDescriptor::conv(3, 3, 2, 4, 2, 2, 2).named("conv").with_bias(true);
        let groups = (0..2)
            .map(|_| {
                let mut g = GroupFactors::new(
                    ternary(&mut rng, 9, 3),
                    DiagonalScale::new(rand_f32(&mut rng, 3, 1.0).iter().map(|v| v.abs() + 0.2).collect()).unwrap(),
                    ternary(&mut rng, 2, 3),
                )
                .unwrap();
                g.lambda_x = 0.6;
                g.lambda_y = 0.9;
                g
            })
            .collect();
        let bias = Some(rand_f32(&mut rng, 4, 0.1));
        let conv = ModelLayer::from_factorized(FactorizedLayer { descriptor: conv, groups, bias }, Activation::Relu);
        let fc = ModelLayer::dense(
            LayerDescriptor::fc(16, 3).named("fc"),
            vec![DenseMatrix::new(16, 3, rand_f32(&mut rng, 48, 0.5)).unwrap()],
            Some(vec![0.0; 3]),
            Activation::None,
        )
        .unwrap();
        Model { input: Some(FeatureShape::new(4, 4, 2)), layers: vec![conv, fc] }
    }

    fn batch(seed: u64, n: usize) -> Vec<Sample> {
        gaussian_blobs(n.div_ceil(3), 3, 32, 0.3, seed).unwrap().samples.into_iter().take(n).collect()
    }

    fn state(seed: u64) -> TrainState {
        TrainState::from_model(&toy_model(seed), AccumulatorInit::Stored, TrainOptions::default()).unwrap()
    }

    #[test]
    fn quantized_accumulators_match_inference() {
        let model = toy_model(1);
        let st = state(1);
        let b = batch(2, 6);
        let (loss, _) = ste_forward(&st, &b).unwrap();
        let mut expect = 0.0;
        for s in &b {
            let logits = forward_ffn(&model, &s.features).unwrap();
            expect += softmax_xent(&logits, s.label).0;
        }
        assert!((loss - expect / 6.0).abs() < 1e-6);
    }

    #[test]
    fn zero_network_loss_is_log_classes() {
        let desc = LayerDescriptor::fc(4, 5);
        let model = Model {
            input: Some(FeatureShape::flat(4)),
            layers: vec![ModelLayer::dense(desc, vec![DenseMatrix::zeros(4, 5)], None, Activation::None).unwrap()],
        };
        let st = TrainState::from_model(&model, AccumulatorInit::Stored, TrainOptions::default()).unwrap();
        let b: Vec<Sample> = (0..5).map(|i| Sample { features: vec![1.0, -2.0, 0.5, 3.0], label: i }).collect();
        assert!((ste_forward(&st, &b).unwrap().0 - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_cross_entropy() {
        // logits for x = (1, 2): W^T x = (1*1 + 2*0, 1*-1 + 2*0.5) = (1, 0)
        let w = DenseMatrix::new(2, 2, vec![1.0, -1.0, 0.0, 0.5]).unwrap();
        let model = Model {
            input: Some(FeatureShape::flat(2)),
            layers: vec![ModelLayer::dense(LayerDescriptor::fc(2, 2), vec![w], None, Activation::None).unwrap()],
        };
        let st = TrainState::from_model(&model, AccumulatorInit::Stored, TrainOptions::default()).unwrap();
        let b = vec![Sample { features: vec![1.0, 2.0], label: 0 }, Sample { features: vec![1.0, 2.0], label: 1 }];
        let l0 = (1.0f64.exp() + 1.0).ln() - 1.0;
        let l1 = (1.0f64.exp() + 1.0).ln();
        assert!((ste_forward(&st, &b).unwrap().0 - (l0 + l1) / 2.0).abs() < 1e-12);
    }

    fn finite_difference(st: &TrainState, params: &Params, b: &[Sample], get: impl Fn(&mut Params) -> &mut f64, h: f64) -> f64 {
        let mut p = params.clone();
        *get(&mut p) += h;
        let up = forward_with(st, &p, b).unwrap().0;
        *get(&mut p) -= 2.0 * h;
        let down = forward_with(st, &p, b).unwrap().0;
        (up - down) / (2.0 * h)
    }

    fn ffn_group(p: &mut Params, layer: usize, g: usize) -> &mut FfnParams {
        match &mut p.layers[layer].weights {
            WeightParams::Ffn(gs) => &mut gs[g],
            WeightParams::Dense(_) => panic!("dense"),
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let st = state(4);
        let b = batch(5, 4);
        let params = st.effective_params();
        let (_, cache) = forward_with(&st, &params, &b).unwrap();
        let g = backward_with(&st, &cache);
        let mut gp = g.params.clone();
        let h = 1e-6;
        let check = |analytic: f64, numeric: f64| {
            assert!((analytic - numeric).abs() <= 1e-3 * analytic.abs().max(1e-3), "{analytic} vs {numeric}");
        };
        for (gi, t) in [(0, 0), (1, 2), (0, 1)] {
            for r in [0, 4, 8] {
                let numeric = finite_difference(&st, &params, &b, |p| &mut ffn_group(p, 0, gi).x[r * 3 + t], h);
                check(ffn_group(&mut gp, 0, gi).x[r * 3 + t], numeric);
            }
            let numeric = finite_difference(&st, &params, &b, |p| &mut ffn_group(p, 0, gi).d[t], h);
            check(ffn_group(&mut gp, 0, gi).d[t], numeric);
            let numeric = finite_difference(&st, &params, &b, |p| &mut ffn_group(p, 0, gi).y[t], h);
            check(ffn_group(&mut gp, 0, gi).y[t], numeric);
        }
        for i in [0, 7, 20, 47] {
            let numeric = finite_difference(&st, &params, &b, |p| match &mut p.layers[1].weights {
                WeightParams::Dense(w) => &mut w[0][i],
                _ => unreachable!(),
            }, h);
            let WeightParams::Dense(w) = &g.params.layers[1].weights else { unreachable!() };
            check(w[0][i], numeric);
        }
        let numeric = finite_difference(&st, &params, &b, |p| &mut p.layers[0].bias[1], h);
        check(g.params.layers[0].bias[1], numeric);
        // input coordinates
        for i in [0, 13, 31] {
            let mut up = b.clone();
            up[0].features[i] += 1e-3;
            let mut down = b.clone();
            down[0].features[i] -= 1e-3;
            let num = (forward_with(&st, &params, &up).unwrap().0 - forward_with(&st, &params, &down).unwrap().0) / 2e-3;
            assert!((num - g.inputs[0][i]).abs() < 1e-4 + 1e-3 * num.abs());
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let st = state(3);
        let (_, mut cache) = ste_forward(&st, &batch(1, 3)).unwrap();
        for d in &mut cache.deltas {
            d.iter_mut().for_each(|v| *v = 0.0);
        }
        let g = ste_backward(&st, &cache);
        assert!(g.params.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_inputs_give_zero_weight_gradients() {
        let mut st = state(3);
        st.layers[0].params.bias.iter_mut().for_each(|b| *b = 0.0);
        let b: Vec<Sample> = (0..3).map(|i| Sample { features: vec![0.0; 32], label: i }).collect();
        let (_, cache) = ste_forward(&st, &b).unwrap();
        let g = ste_backward(&st, &cache);
        let WeightParams::Ffn(gs) = &g.params.layers[0].weights else { unreachable!() };
        assert!(gs.iter().all(|f| f.x.iter().chain(&f.d).chain(&f.y).all(|&v| v == 0.0)));
    }

    #[test]
    fn ste_mask_zeroes_outside_clip() {
        let mut st = state(6);
        let WeightParams::Ffn(fs) = &mut st.layers[0].params.weights else { unreachable!() };
        fs[0].x[0] = 2.0;
        let (_, cache) = ste_forward(&st, &batch(2, 3)).unwrap();
        let raw = backward_with(&st, &cache);
        let masked = ste_backward(&st, &cache);
        let pick = |g: &Gradients| match &g.params.layers[0].weights {
            WeightParams::Ffn(gs) => (gs[0].x[0], gs[0].x[1]),
            _ => unreachable!(),
        };
        assert_ne!(pick(&raw).0, 0.0);
        assert_eq!(pick(&masked).0, 0.0);
        assert_eq!(pick(&masked).1, pick(&raw).1);
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut st = state(7);
        st.options = TrainOptions { lr: 0.0, epochs: 2, batch: 4, ..TrainOptions::default() };
        let before = st.clone();
        let data = Dataset::new(batch(3, 12)).unwrap();
        let m = train(&mut st, &data, None).unwrap();
        assert_eq!(st, before);
        assert!(m.iter().all(|e| e.pattern_flips == 0));
    }

    #[test]
    fn clip_invariant_after_training() {
        let mut st = state(8);
        st.options = TrainOptions { lr: 0.5, epochs: 3, batch: 2, ..TrainOptions::default() };
        let data = Dataset::new(batch(3, 12)).unwrap();
        train(&mut st, &data, None).unwrap();
        for l in &st.layers {
            if let WeightParams::Ffn(fs) = &l.params.weights {
                for (f, &(lx, ly)) in fs.iter().zip(&l.lambdas) {
                    assert!(f.x.iter().all(|v| v.abs() <= CLIP * lx));
                    assert!(f.y.iter().all(|v| v.abs() <= CLIP * ly));
                    assert!(f.d.iter().all(|&v| v >= 0.0));
                }
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_round_trips() {
        let data = Dataset::new(batch(3, 24)).unwrap();
        let run = || {
            let mut st = state(9);
            st.options = TrainOptions { epochs: 3, batch: 5, seed: 42, ..TrainOptions::default() };
            let m = train(&mut st, &data, None).unwrap();
            (st, m)
        };
        let (a, ma) = run();
        let (b, mb) = run();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        assert_eq!(metrics_csv(&ma).lines().count(), 4);
        let model = a.to_model().unwrap();
        let back = TrainState::from_model(&model, AccumulatorInit::Stored, a.options.clone()).unwrap();
        assert_eq!(back.patterns(), a.patterns());
    }

    #[test]
    fn divergence_is_reported() {
        let mut st = state(10);
        st.options = TrainOptions { lr: 1e300, momentum: 0.0, epochs: 3, batch: 4, ..TrainOptions::default() };
        let data = Dataset::new(batch(3, 12)).unwrap();
        let err = train(&mut st, &data, None).unwrap_err();
        assert!(err.is_numerical(), "{err}");
        assert!(st.effective_params().flatten().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn gradient_histograms_cover_every_parameter() {
        let st = state(11);
        let stats = gradient_stats(&st, &batch(4, 6), 10).unwrap();
        let names: Vec<&str> = stats.sublayers.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, ["conv.x", "conv.d", "conv.y", "fc.w"]);
        let expect = [2 * 27, 2 * 3, 2 * 6, 48];
        for (s, &n) in stats.sublayers.iter().zip(&expect) {
            assert_eq!(s.count, n);
            assert_eq!(s.histogram.counts.iter().sum::<usize>(), n);
            assert!(s.min <= s.max);
        }
        assert!(stats.stddev_ratio() >= 1.0);
        assert_eq!(stats.to_csv().lines().count(), 1 + 4 * 10);
    }

    #[test]
    fn bad_batches_are_data_errors() {
        let st = state(1);
        let b = vec![Sample { features: vec![0.0; 3], label: 0 }];
        assert!(matches!(ste_forward(&st, &b), Err(FfnError::Data(_))));
        let b = vec![Sample { features: vec![0.0; 32], label: 3 }];
        assert!(matches!(ste_forward(&st, &b), Err(FfnError::Data(_))));
    }
}
