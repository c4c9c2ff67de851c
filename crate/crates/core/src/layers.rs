//! Factorized layers, model manifests and reference inference.
//!
//! A factorized layer replaces one conv or fc layer by three sublayers per
//! group: a ternary conv with `k` filters of shape `kh x kw x c/g`, a
//! channel-wise scale, and a ternary `1 x 1 x k` conv with `n/g` filters.
//! The scale applied at inference is `lambda_x * lambda_y * D`, so the stored
//! ternary tensors stay in {-1, 0, +1}.
//!
//! Feature maps are `f64` in height-width-channel order. An fc layer reads its
//! input flattened in that order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::balancing::BalancedFactors;
use crate::error::{FfnError, Result};
use crate::io;
use crate::recovery::quantize_value;
use crate::tensor::{
    flat_index, outer_sum, DenseMatrix, DiagonalScale, LayerDescriptor, LayerKind, TernaryMatrix,
    TernarySupport,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    None,
    Relu,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::None => v,
            Activation::Relu => v.max(0.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl FeatureShape {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        FeatureShape { height, width, channels }
    }

    pub fn flat(len: usize) -> Self {
        FeatureShape::new(1, 1, len)
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Output shape of `desc` applied to `input`, checking that they agree.
pub fn output_shape(desc: &LayerDescriptor, input: FeatureShape) -> Result<FeatureShape> {
    desc.validate()?;
    match desc.kind {
        LayerKind::Fc => {
            if desc.in_channels != input.len() {
                return Err(FfnError::size(format!(
                    "layer {}: expects {} inputs, got {:?}",
                    desc.label(),
                    desc.in_channels,
                    input
                )));
            }
            Ok(FeatureShape::flat(desc.out_channels))
        }
        LayerKind::Conv => {
            if desc.in_channels != input.channels {
                return Err(FfnError::size(format!(
                    "layer {}: expects {} channels, got {}",
                    desc.label(),
                    desc.in_channels,
                    input.channels
                )));
            }
            let span = |size: usize, kernel: usize| -> Option<usize> {
                (size + 2 * desc.pad).checked_sub(kernel).map(|s| s / desc.stride + 1)
            };
            let oh = span(input.height, desc.kernel_h);
            let ow = span(input.width, desc.kernel_w);
            if oh != Some(desc.out_h) || ow != Some(desc.out_w) {
                return Err(FfnError::size(format!(
                    "layer {}: input {}x{} gives output {:?}x{:?}, descriptor says {}x{}",
                    desc.label(),
                    input.height,
                    input.width,
                    oh,
                    ow,
                    desc.out_h,
                    desc.out_w
                )));
            }
            Ok(FeatureShape::new(desc.out_h, desc.out_w, desc.out_channels))
        }
    }
}

/// Factors of one group: `W_g ~ lambda_x lambda_y X diag(D) Y^T`.
///
/// `accumulators` optionally holds the full-precision `(X~, Y~)` that a later
/// fine-tuning run starts from.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupFactors {
    pub x: TernaryMatrix,
    pub d: DiagonalScale,
    pub y: TernaryMatrix,
    pub lambda_x: f64,
    pub lambda_y: f64,
    pub accumulators: Option<(DenseMatrix, DenseMatrix)>,
}

impl GroupFactors {
    pub fn new(x: TernaryMatrix, d: DiagonalScale, y: TernaryMatrix) -> Result<Self> {
        if x.cols() != d.len() || y.cols() != d.len() {
            return Err(FfnError::size(format!(
                "factor shapes disagree: X {:?}, D {}, Y {:?}",
                x.shape(),
                d.len(),
                y.shape()
            )));
        }
        Ok(GroupFactors { x, d, y, lambda_x: 1.0, lambda_y: 1.0, accumulators: None })
    }

    /// Ternary patterns are read back from the balanced accumulators.
    pub fn from_balanced(b: &BalancedFactors) -> Result<Self> {
        let pattern = |m: &DenseMatrix, lambda: f64| -> Result<TernaryMatrix> {
            let values: Vec<i8> = m.data().iter().map(|&v| quantize_value(f64::from(v) / lambda)).collect();
            TernaryMatrix::from_values(m.rows(), m.cols(), &values)
        };
        let mut g = GroupFactors::new(
            pattern(&b.x, b.lambda_x)?,
            b.d.clone(),
            pattern(&b.y, b.lambda_y)?,
        )?;
        g.lambda_x = b.lambda_x;
        g.lambda_y = b.lambda_y;
        g.accumulators = Some((b.x.clone(), b.y.clone()));
        Ok(g)
    }

    pub fn k(&self) -> usize {
        self.d.len()
    }

    /// Per-channel scale used at inference, `lambda_x lambda_y D`.
    pub fn folded_scale(&self) -> Vec<f64> {
        let l = self.lambda_x * self.lambda_y;
        self.d.values().iter().map(|&v| l * f64::from(v)).collect()
    }

    pub fn effective_product(&self) -> Vec<f64> {
        outer_sum(self.x.rows(), self.y.rows(), &self.x.values(), &self.folded_scale(), &self.y.values())
    }

    pub fn effective_weight(&self) -> Result<DenseMatrix> {
        DenseMatrix::from_f64(self.x.rows(), self.y.rows(), &self.effective_product())
    }

    /// `||W - W_eff||^2 / ||W||^2`, or 0 when both vanish.
    pub fn approx_error(&self, w: &DenseMatrix) -> Result<f64> {
        if w.shape() != (self.x.rows(), self.y.rows()) {
            return Err(FfnError::size(format!(
                "W is {:?} but factors give {}x{}",
                w.shape(),
                self.x.rows(),
                self.y.rows()
            )));
        }
        let eff = self.effective_product();
        let err: f64 = w.data().iter().zip(&eff).map(|(&a, b)| (f64::from(a) - b).powi(2)).sum();
        let denom = w.frobenius_sq();
        Ok(if denom > 0.0 { err / denom } else if err == 0.0 { 0.0 } else { f64::INFINITY })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedLayer {
    pub descriptor: LayerDescriptor,
    pub groups: Vec<GroupFactors>,
    pub bias: Option<Vec<f32>>,
}

impl FactorizedLayer {
    pub fn k(&self) -> usize {
        self.groups.first().map_or(0, GroupFactors::k)
    }

    pub fn effective_weights(&self) -> Result<Vec<DenseMatrix>> {
        self.groups.iter().map(GroupFactors::effective_weight).collect()
    }

    pub fn approx_errors(&self, weights: &[DenseMatrix]) -> Result<Vec<f64>> {
        if weights.len() != self.groups.len() {
            return Err(FfnError::size("one weight matrix per group required"));
        }
        self.groups.iter().zip(weights).map(|(g, w)| g.approx_error(w)).collect()
    }
}

fn check_weights(desc: &LayerDescriptor, weights: &[DenseMatrix]) -> Result<()> {
    if weights.len() != desc.groups {
        return Err(FfnError::size(format!(
            "layer {}: {} groups but {} weight matrices",
            desc.label(),
            desc.groups,
            weights.len()
        )));
    }
    let want = (desc.group_rows(), desc.group_cols());
    if let Some(w) = weights.iter().find(|w| w.shape() != want) {
        return Err(FfnError::size(format!(
            "layer {}: weight is {:?}, expected {want:?}",
            desc.label(),
            w.shape()
        )));
    }
    Ok(())
}

fn check_bias(desc: &LayerDescriptor, bias: Option<&[f32]>) -> Result<()> {
    match bias {
        Some(b) if b.len() != desc.out_channels => Err(FfnError::size(format!(
            "layer {}: bias has {} entries, expected {}",
            desc.label(),
            b.len(),
            desc.out_channels
        ))),
        _ => Ok(()),
    }
}

fn check_factors(desc: &LayerDescriptor, groups: &[GroupFactors]) -> Result<()> {
    if groups.len() != desc.groups {
        return Err(FfnError::size(format!(
            "layer {}: {} groups but {} factor sets",
            desc.label(),
            desc.groups,
            groups.len()
        )));
    }
    for g in groups {
        if g.x.rows() != desc.group_rows() || g.y.rows() != desc.group_cols() {
            return Err(FfnError::size(format!(
                "layer {}: factors give {}x{}, expected {}x{}",
                desc.label(),
                g.x.rows(),
                g.y.rows(),
                desc.group_rows(),
                desc.group_cols()
            )));
        }
    }
    Ok(())
}

/// Replaces a layer by its three sublayers. The bias follows the last one.
pub fn expand_layer(
    descriptor: &LayerDescriptor,
    weights: &[DenseMatrix],
    bias: Option<&[f32]>,
    groups: Vec<GroupFactors>,
) -> Result<FactorizedLayer> {
    descriptor.validate()?;
    check_weights(descriptor, weights)?;
    check_bias(descriptor, bias)?;
    check_factors(descriptor, &groups)?;
    Ok(FactorizedLayer {
        descriptor: descriptor.clone(),
        groups,
        bias: bias.map(<[f32]>::to_vec),
    })
}

/// One layer of a model. Either or both weight forms may be present.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelLayer {
    pub descriptor: LayerDescriptor,
    pub activation: Activation,
    pub bias: Option<Vec<f32>>,
    pub weights: Option<Vec<DenseMatrix>>,
    pub factors: Option<Vec<GroupFactors>>,
}

impl ModelLayer {
    pub fn dense(
        descriptor: LayerDescriptor,
        weights: Vec<DenseMatrix>,
        bias: Option<Vec<f32>>,
        activation: Activation,
    ) -> Result<Self> {
        descriptor.validate()?;
        check_weights(&descriptor, &weights)?;
        check_bias(&descriptor, bias.as_deref())?;
        let descriptor = LayerDescriptor { has_bias: bias.is_some(), ..descriptor };
        Ok(ModelLayer { descriptor, activation, bias, weights: Some(weights), factors: None })
    }

    pub fn from_factorized(layer: FactorizedLayer, activation: Activation) -> Self {
        ModelLayer {
            descriptor: LayerDescriptor { has_bias: layer.bias.is_some(), ..layer.descriptor },
            activation,
            bias: layer.bias,
            weights: None,
            factors: Some(layer.groups),
        }
    }

    pub fn factorized(&self) -> Option<FactorizedLayer> {
        self.factors.as_ref().map(|groups| FactorizedLayer {
            descriptor: self.descriptor.clone(),
            groups: groups.clone(),
            bias: self.bias.clone(),
        })
    }

    pub fn set_factors(&mut self, groups: Vec<GroupFactors>) -> Result<()> {
        check_factors(&self.descriptor, &groups)?;
        self.factors = Some(groups);
        Ok(())
    }

    /// Dense weights, reconstructing them from the factors when needed.
    pub fn dense_weights(&self) -> Result<Vec<DenseMatrix>> {
        match (&self.weights, &self.factors) {
            (Some(w), _) => Ok(w.clone()),
            (None, Some(f)) => f.iter().map(GroupFactors::effective_weight).collect(),
            (None, None) => Err(self.missing()),
        }
    }

    fn missing(&self) -> FfnError {
        FfnError::config(format!("layer {} has neither weights nor factors", self.descriptor.label()))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Model {
    pub input: Option<FeatureShape>,
    pub layers: Vec<ModelLayer>,
}

impl Model {
    pub fn descriptors(&self) -> Vec<LayerDescriptor> {
        self.layers.iter().map(|l| l.descriptor.clone()).collect()
    }

    /// Checks adjacent shapes and returns the output shape.
    pub fn validate_chain(&self) -> Result<FeatureShape> {
        let mut shape = self
            .input
            .ok_or_else(|| FfnError::config("model has no input shape"))?;
        for layer in &self.layers {
            shape = output_shape(&layer.descriptor, shape)?;
        }
        Ok(shape)
    }

    /// Same model with every factorized layer replaced by its effective dense weight.
    pub fn effective(&self) -> Result<Model> {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let weights = match &l.factors {
                    Some(f) => f.iter().map(GroupFactors::effective_weight).collect::<Result<_>>()?,
                    None => l.dense_weights()?,
                };
                Ok(ModelLayer { weights: Some(weights), factors: None, ..l.clone() })
            })
            .collect::<Result<_>>()?;
        Ok(Model { input: self.input, layers })
    }

    pub fn load(path: &Path) -> Result<Model> {
        let manifest = ModelManifest::read(path)?;
        manifest.load_tensors(path.parent().unwrap_or(Path::new(".")))
    }

    /// Writes every tensor plus `manifest_name` into `dir`.
    pub fn save(&self, dir: &Path, manifest_name: &str) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let stem = format!("l{i}_{}", sanitize(&layer.descriptor.label()));
            let mut entry = LayerEntry {
                descriptor: layer.descriptor.clone(),
                activation: layer.activation,
                weight: None,
                bias: None,
                factors: Vec::new(),
            };
            if let Some(w) = &layer.weights {
                let name = format!("{stem}.w.fft1");
                write_group_weights(&dir.join(&name), w)?;
                entry.weight = Some(name);
            }
            if let Some(b) = &layer.bias {
                let name = format!("{stem}.b.fft1");
                io::write_vector(&dir.join(&name), b)?;
                entry.bias = Some(name);
            }
            for (g, f) in layer.factors.iter().flatten().enumerate() {
                let base = format!("{stem}.g{g}");
                let fe = FactorEntry {
                    x: format!("{base}.x.fft1"),
                    d: format!("{base}.d.fft1"),
                    y: format!("{base}.y.fft1"),
                    lambda_x: f.lambda_x,
                    lambda_y: f.lambda_y,
                    x_acc: f.accumulators.as_ref().map(|_| format!("{base}.xacc.fft1")),
                    y_acc: f.accumulators.as_ref().map(|_| format!("{base}.yacc.fft1")),
                };
                io::write_ternary(&dir.join(&fe.x), &f.x)?;
                io::write_vector(&dir.join(&fe.d), f.d.values())?;
                io::write_ternary(&dir.join(&fe.y), &f.y)?;
                if let (Some((xa, ya)), Some(xn), Some(yn)) = (&f.accumulators, &fe.x_acc, &fe.y_acc) {
                    io::write_dense_matrix(&dir.join(xn), xa)?;
                    io::write_dense_matrix(&dir.join(yn), ya)?;
                }
                entry.factors.push(fe);
            }
            entries.push(entry);
        }
        let manifest = ModelManifest { input: self.input, layers: entries };
        let path = dir.join(manifest_name);
        fs::write(&path, manifest.to_toml()?)?;
        Ok(path)
    }
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn write_group_weights(path: &Path, weights: &[DenseMatrix]) -> Result<()> {
    let (rows, cols) = weights.first().map_or((0, 0), DenseMatrix::shape);
    let data: Vec<f32> = weights.iter().flat_map(|w| w.data().iter().copied()).collect();
    let dims = if weights.len() == 1 { vec![rows, cols] } else { vec![weights.len(), rows, cols] };
    fs::write(path, io::encode_dense(&dims, &data)?)?;
    Ok(())
}

fn read_group_weights(path: &Path, desc: &LayerDescriptor) -> Result<Vec<DenseMatrix>> {
    let (rows, cols, groups) = (desc.group_rows(), desc.group_cols(), desc.groups);
    let (dims, data) = match io::read_tensor(path)? {
        io::Tensor::Dense { dims, data } => (dims, data),
        io::Tensor::Ternary { .. } => return Err(FfnError::data(format!("{}: weights must be dense", path.display()))),
    };
    let ok = dims == [groups, rows, cols] || (groups == 1 && dims == [rows, cols]);
    if !ok {
        return Err(FfnError::data(format!(
            "{}: dims {dims:?} do not match layer {} ({groups} x {rows} x {cols})",
            path.display(),
            desc.label()
        )));
    }
    data.chunks_exact(rows * cols)
        .map(|c| DenseMatrix::new(rows, cols, c.to_vec()))
        .collect()
}

/// On-disk model description (TOML). Tensor paths are relative to the manifest.
///
/// ```toml
/// [input]
/// height = 6
/// width = 6
/// channels = 3
///
/// [[layers]]
/// name = "conv1"
/// kind = "conv"
/// kernel_h = 3
/// kernel_w = 3
/// in_channels = 3
/// out_channels = 8
/// out_h = 4
/// out_w = 4
/// activation = "relu"
/// weight = "conv1.w.fft1"
/// ```
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input: Option<FeatureShape>,
    #[serde(default)]
    pub layers: Vec<LayerEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    #[serde(flatten)]
    pub descriptor: LayerDescriptor,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub factors: Vec<FactorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorEntry {
    pub x: String,
    pub d: String,
    pub y: String,
    #[serde(default = "unit")]
    pub lambda_x: f64,
    #[serde(default = "unit")]
    pub lambda_y: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_acc: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y_acc: Option<String>,
}

fn unit() -> f64 {
    1.0
}

impl ModelManifest {
    pub fn parse(text: &str) -> Result<Self> {
        let m: ModelManifest = toml::from_str(text).map_err(|e| FfnError::config(format!("manifest: {e}")))?;
        for l in &m.layers {
            l.descriptor.validate()?;
        }
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| FfnError::data(format!("cannot read manifest {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            FfnError::Config(msg) => FfnError::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| FfnError::config(format!("cannot serialize manifest: {e}")))
    }

    pub fn descriptors(&self) -> Vec<LayerDescriptor> {
        self.layers.iter().map(|l| l.descriptor.clone()).collect()
    }

    pub fn load_tensors(&self, base: &Path) -> Result<Model> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for entry in &self.layers {
            let desc = &entry.descriptor;
            let weights = entry
                .weight
                .as_ref()
                .map(|p| read_group_weights(&base.join(p), desc))
                .transpose()?;
            let bias = entry.bias.as_ref().map(|p| io::read_vector(&base.join(p))).transpose()?;
            check_bias(desc, bias.as_deref()).map_err(|e| FfnError::data(e.to_string()))?;
            let factors = if entry.factors.is_empty() {
                None
            } else {
                let groups = entry
                    .factors
                    .iter()
                    .map(|f| load_factors(base, f))
                    .collect::<Result<Vec<_>>>()?;
                check_factors(desc, &groups).map_err(|e| FfnError::data(e.to_string()))?;
                Some(groups)
            };
            if weights.is_none() && factors.is_none() {
                return Err(FfnError::config(format!("layer {} has neither weights nor factors", desc.label())));
            }
            layers.push(ModelLayer {
                descriptor: LayerDescriptor { has_bias: bias.is_some(), ..desc.clone() },
                activation: entry.activation,
                bias,
                weights,
                factors,
            });
        }
        Ok(Model { input: self.input, layers })
    }
}

fn load_factors(base: &Path, f: &FactorEntry) -> Result<GroupFactors> {
    let mut g = GroupFactors::new(
        io::read_ternary(&base.join(&f.x))?,
        io::read_scale(&base.join(&f.d))?,
        io::read_ternary(&base.join(&f.y))?,
    )
    .map_err(|e| FfnError::data(e.to_string()))?;
    if !(f.lambda_x > 0.0 && f.lambda_y > 0.0 && f.lambda_x.is_finite() && f.lambda_y.is_finite()) {
        return Err(FfnError::data(format!("factor {}: lambdas must be positive", f.x)));
    }
    g.lambda_x = f.lambda_x;
    g.lambda_y = f.lambda_y;
    if let (Some(xa), Some(ya)) = (&f.x_acc, &f.y_acc) {
        let xa = io::read_dense_matrix(&base.join(xa))?;
        let ya = io::read_dense_matrix(&base.join(ya))?;
        if xa.shape() != g.x.shape() || ya.shape() != g.y.shape() {
            return Err(FfnError::data(format!("factor {}: accumulator shapes disagree", f.x)));
        }
        g.accumulators = Some((xa, ya));
    }
    Ok(g)
}

/// Which weight form a forward pass uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Route {
    Dense,
    Ffn,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCount {
    pub mul: u64,
    pub add: u64,
}

/// Patch matrix of group `g`: one row of `desc.group_rows()` values per output position.
pub fn im2col(input: &[f64], shape: FeatureShape, desc: &LayerDescriptor, g: usize) -> Vec<f64> {
    if desc.kind == LayerKind::Fc {
        return input.to_vec();
    }
    let cg = desc.in_channels / desc.groups;
    let rows = desc.group_rows();
    let mut out = vec![0.0; desc.out_positions() * rows];
    for oh in 0..desc.out_h {
        for ow in 0..desc.out_w {
            let patch = &mut out[(oh * desc.out_w + ow) * rows..][..rows];
            for ih in 0..desc.kernel_h {
                let Some(y) = (oh * desc.stride + ih).checked_sub(desc.pad).filter(|&y| y < shape.height) else {
                    continue;
                };
                for iw in 0..desc.kernel_w {
                    let Some(x) = (ow * desc.stride + iw).checked_sub(desc.pad).filter(|&x| x < shape.width) else {
                        continue;
                    };
                    let src = &input[(y * shape.width + x) * shape.channels + g * cg..][..cg];
                    for (ic, &v) in src.iter().enumerate() {
                        patch[flat_index(ih, iw, ic, desc.kernel_w, cg)] = v;
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: accumulates patch gradients into `grad_input`.
pub fn col2im_add(patches: &[f64], shape: FeatureShape, desc: &LayerDescriptor, g: usize, grad_input: &mut [f64]) {
    if desc.kind == LayerKind::Fc {
        for (a, b) in grad_input.iter_mut().zip(patches) {
            *a += b;
        }
        return;
    }
    let cg = desc.in_channels / desc.groups;
    let rows = desc.group_rows();
    for oh in 0..desc.out_h {
        for ow in 0..desc.out_w {
            let patch = &patches[(oh * desc.out_w + ow) * rows..][..rows];
            for ih in 0..desc.kernel_h {
                let Some(y) = (oh * desc.stride + ih).checked_sub(desc.pad).filter(|&y| y < shape.height) else {
                    continue;
                };
                for iw in 0..desc.kernel_w {
                    let Some(x) = (ow * desc.stride + iw).checked_sub(desc.pad).filter(|&x| x < shape.width) else {
                        continue;
                    };
                    let dst = &mut grad_input[(y * shape.width + x) * shape.channels + g * cg..][..cg];
                    for (ic, d) in dst.iter_mut().enumerate() {
                        *d += patch[flat_index(ih, iw, ic, desc.kernel_w, cg)];
                    }
                }
            }
        }
    }
}

fn dense_group(patches: &[f64], rows: usize, w: &DenseMatrix, out: &mut [f64], stride: usize, offset: usize, ops: &mut OpCount) {
    let cols = w.cols();
    let wd: Vec<f64> = w.to_f64();
    for (p, patch) in patches.chunks_exact(rows).enumerate() {
        let mut acc = vec![0.0f64; cols];
        for (r, &a) in patch.iter().enumerate() {
            for (z, &wv) in acc.iter_mut().zip(&wd[r * cols..(r + 1) * cols]) {
                *z += a * wv;
            }
        }
        out[p * stride + offset..][..cols].copy_from_slice(&acc);
    }
    let n = (patches.len() / rows.max(1) * rows * cols) as u64;
    ops.mul += n;
    ops.add += n;
}

fn ffn_group(patches: &[f64], rows: usize, f: &GroupFactors, out: &mut [f64], stride: usize, offset: usize, ops: &mut OpCount) {
    let xs: Vec<TernarySupport> = f.x.column_supports();
    let ys: Vec<TernarySupport> = f.y.row_supports();
    let scale = f.folded_scale();
    let x_nnz: usize = xs.iter().map(TernarySupport::nnz).sum();
    let y_nnz: usize = ys.iter().map(TernarySupport::nnz).sum();
    let mut v = vec![0.0f64; f.k()];
    let mut positions = 0u64;
    for (p, patch) in patches.chunks_exact(rows).enumerate() {
        for ((vt, sx), &s) in v.iter_mut().zip(&xs).zip(&scale) {
            *vt = sx.accumulate(patch) * s;
        }
        for (j, sy) in ys.iter().enumerate() {
            out[p * stride + offset + j] = sy.accumulate(&v);
        }
        positions += 1;
    }
    ops.mul += positions * f.k() as u64;
    ops.add += positions * (x_nnz + y_nnz) as u64;
}

/// Runs one layer; returns the activated output and its shape.
pub fn forward_layer(
    layer: &ModelLayer,
    shape: FeatureShape,
    input: &[f64],
    route: Route,
    ops: &mut OpCount,
) -> Result<(Vec<f64>, FeatureShape)> {
    let desc = &layer.descriptor;
    let out_shape = output_shape(desc, shape)?;
    if input.len() != shape.len() {
        return Err(FfnError::size(format!(
            "layer {}: input has {} values, shape {:?} needs {}",
            desc.label(),
            input.len(),
            shape,
            shape.len()
        )));
    }
    let n = desc.out_channels;
    let ng = desc.group_cols();
    let rows = desc.group_rows();
    let mut out = vec![0.0f64; out_shape.len()];
    let use_ffn = route == Route::Ffn && layer.factors.is_some();
    let dense = if use_ffn { None } else { Some(layer.dense_weights()?) };
    for g in 0..desc.groups {
        let patches = im2col(input, shape, desc, g);
        match (&dense, &layer.factors) {
            (Some(w), _) => dense_group(&patches, rows, &w[g], &mut out, n, g * ng, ops),
            (None, Some(f)) => ffn_group(&patches, rows, &f[g], &mut out, n, g * ng, ops),
            (None, None) => return Err(layer.missing()),
        }
    }
    for chunk in out.chunks_exact_mut(n) {
        if let Some(b) = &layer.bias {
            for (z, &bv) in chunk.iter_mut().zip(b) {
                *z += f64::from(bv);
            }
        }
        for z in chunk.iter_mut() {
            *z = layer.activation.apply(*z);
        }
    }
    Ok((out, out_shape))
}

pub fn forward(model: &Model, input: &[f64], route: Route, ops: &mut OpCount) -> Result<Vec<f64>> {
    let mut shape = model
        .input
        .ok_or_else(|| FfnError::config("model has no input shape"))?;
    let mut act = input.to_vec();
    for layer in &model.layers {
        let (next, s) = forward_layer(layer, shape, &act, route, ops)?;
        act = next;
        shape = s;
    }
    Ok(act)
}

/// Reference pass through dense weights (reconstructed for factor-only layers).
pub fn forward_dense(model: &Model, input: &[f64]) -> Result<Vec<f64>> {
    forward(model, input, Route::Dense, &mut OpCount::default())
}

/// Pass through the ternary sublayers wherever factors exist.
pub fn forward_ffn(model: &Model, input: &[f64]) -> Result<Vec<f64>> {
    forward(model, input, Route::Ffn, &mut OpCount::default())
}
