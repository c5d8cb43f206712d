//! Fully connected feature extractor `h: R^V → R^D` with a rectifier after
//! every layer (so features are non-negative), a linear classifier
//! `f: R^D → R^M`, exact backpropagation of the local objective, momentum SGD,
//! and sample-weighted parameter averaging.

use serde::{Deserialize, Serialize};

use crate::datagen::Sample;
use crate::error::{Error, Result};
use crate::losses::{alpha_terms, cross_entropy_grad, cross_entropy_slice, prototype_term_applies, LossHyper, PreparedPrototypes};
use crate::numerics::{check_dims, DenseMatrix, DenseVector, RngStream};
use crate::prototypes::GlobalPrototypeSet;

/// Layer sizes of the network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelShape {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        ModelShape {
            input_dim: 16,
            hidden: vec![32],
            feature_dim: 16,
            num_classes: 5,
        }
    }
}

impl ModelShape {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("model.input_dim", "must be >= 1"));
        }
        if self.feature_dim == 0 {
            return Err(Error::config("model.feature_dim", "must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("model.num_classes", "must be >= 2"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::config("model.hidden", "layer widths must be >= 1"));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every extractor layer.
    fn extractor_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden);
        widths.push(self.feature_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// One affine map `x ↦ Wx + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: DenseMatrix,
    pub bias: DenseVector,
}

impl Layer {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Layer {
            weights: DenseMatrix::zeros(fan_out, fan_in),
            bias: DenseVector::zeros(fan_out),
        }
    }

    fn glorot(fan_in: usize, fan_out: usize, rng: &mut RngStream) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut layer = Self::zeros(fan_in, fan_out);
        for w in layer.weights.as_mut_slice() {
            *w = rng.uniform_range(-a, a);
        }
        layer
    }

    fn affine(&self, x: &[f64]) -> Vec<f64> {
        let w = &self.weights;
        (0..w.rows())
            .map(|r| crate::numerics::dot(w.row(r), x) + self.bias[r])
            .collect()
    }
}

/// Extractor and classifier weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub extractor: Vec<Layer>,
    pub classifier: Layer,
}

impl ModelParams {
    pub fn zeros(shape: &ModelShape) -> Self {
        ModelParams {
            extractor: shape
                .extractor_dims()
                .into_iter()
                .map(|(i, o)| Layer::zeros(i, o))
                .collect(),
            classifier: Layer::zeros(shape.feature_dim, shape.num_classes),
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(shape: &ModelShape, rng: &mut RngStream) -> Self {
        ModelParams {
            extractor: shape
                .extractor_dims()
                .into_iter()
                .map(|(i, o)| Layer::glorot(i, o, rng))
                .collect(),
            classifier: Layer::glorot(shape.feature_dim, shape.num_classes, rng),
        }
    }

    /// Build from explicit layers, checking that shapes chain.
    pub fn from_layers(extractor: Vec<Layer>, classifier: Layer) -> Result<Self> {
        if extractor.is_empty() {
            return Err(Error::EmptyInput("extractor layers"));
        }
        let mut prev = extractor[0].weights.cols();
        for (i, layer) in extractor.iter().chain(std::iter::once(&classifier)).enumerate() {
            if layer.weights.cols() != prev || layer.bias.dim() != layer.weights.rows() {
                return Err(Error::ShapeMismatch(format!("layer {i} does not chain")));
            }
            prev = layer.weights.rows();
        }
        Ok(ModelParams {
            extractor,
            classifier,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.extractor[0].weights.cols()
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier.weights.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.weights.rows()
    }

    fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.extractor.iter().chain(std::iter::once(&self.classifier))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer> {
        self.extractor.iter_mut().chain(std::iter::once(&mut self.classifier))
    }

    /// Every parameter tensor as a flat slice, in a fixed order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers_mut()
            .flat_map(|l| {
                let Layer { weights, bias } = l;
                [weights.as_mut_slice(), bias.as_mut_slice()]
            })
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.extractor.len() == other.extractor.len()
            && self.layers().zip(other.layers()).all(|(a, b)| {
                a.weights.rows() == b.weights.rows() && a.weights.cols() == b.weights.cols()
            })
    }

    fn check_shape(&self, other: &ModelParams) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch("parameter sets differ in shape".into()))
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    /// Overwrite all values from a flat vector in [`tensors`](Self::tensors) order.
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        check_dims(self.num_scalars(), flat.len())?;
        let mut offset = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Gradients shaped like [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet(ModelParams);

impl GradientSet {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let mut g = params.clone();
        g.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
        GradientSet(g)
    }

    pub fn as_params(&self) -> &ModelParams {
        &self.0
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.0.flatten()
    }
}

/// Momentum SGD with weight decay folded into the gradient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.01,
            momentum: 0.5,
            weight_decay: 1e-5,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("optimizer.learning_rate", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("optimizer.momentum", "must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("optimizer.weight_decay", "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    velocity: ModelParams,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &ModelParams) -> Self {
        OptimizerState {
            config,
            velocity: GradientSet::zeros_like(params).0,
        }
    }

    pub fn velocity(&self) -> &ModelParams {
        &self.velocity
    }
}

/// `v ← μv + g + wd·θ`, `θ ← θ − lr·v`.
pub fn sgd_step(params: &ModelParams, opt: &mut OptimizerState, grads: &GradientSet) -> Result<ModelParams> {
    params.check_shape(&opt.velocity)?;
    params.check_shape(&grads.0)?;
    let OptimizerConfig {
        learning_rate,
        momentum,
        weight_decay,
    } = opt.config;
    let mut next = params.clone();
    for ((theta, v), g) in next
        .tensors_mut()
        .into_iter()
        .zip(opt.velocity.tensors_mut())
        .zip(grads.0.tensors())
    {
        for i in 0..theta.len() {
            v[i] = momentum * v[i] + g[i] + weight_decay * theta[i];
            theta[i] -= learning_rate * v[i];
        }
    }
    Ok(next)
}

/// Weighted mean `Σ (N_k / N) w_k`.
pub fn aggregate_params(uploads: &[(&ModelParams, usize)]) -> Result<ModelParams> {
    let (first, _) = uploads.first().ok_or(Error::EmptyInput("uploads"))?;
    let total: usize = uploads.iter().map(|(_, n)| n).sum();
    if uploads.iter().any(|&(_, n)| n == 0) {
        return Err(Error::InvalidArgument("sample counts must be positive".into()));
    }
    let mut out = GradientSet::zeros_like(first).0;
    for (params, n) in uploads {
        out.check_shape(params)?;
        let weight = *n as f64 / total as f64;
        for (acc, src) in out.tensors_mut().into_iter().zip(params.tensors()) {
            for (a, s) in acc.iter_mut().zip(src) {
                *a += weight * s;
            }
        }
    }
    Ok(out)
}

pub fn forward_features(params: &ModelParams, x: &DenseVector) -> Result<DenseVector> {
    Ok(DenseVector::from_vec_unchecked(forward_features_slice(params, x.as_slice())?))
}

pub fn forward_logits(params: &ModelParams, z: &DenseVector) -> Result<DenseVector> {
    Ok(DenseVector::from_vec_unchecked(forward_logits_slice(params, z.as_slice())?))
}

pub(crate) fn forward_features_slice(params: &ModelParams, x: &[f64]) -> Result<Vec<f64>> {
    check_dims(params.input_dim(), x.len())?;
    let mut a = x.to_vec();
    for layer in &params.extractor {
        a = layer.affine(&a);
        a.iter_mut().for_each(|v| *v = v.max(0.0));
    }
    Ok(a)
}

pub(crate) fn forward_logits_slice(params: &ModelParams, z: &[f64]) -> Result<Vec<f64>> {
    check_dims(params.feature_dim(), z.len())?;
    Ok(params.classifier.affine(z))
}

/// Index of the largest logit (lowest index on ties).
pub fn predict(params: &ModelParams, x: &DenseVector) -> Result<usize> {
    let z = forward_features_slice(params, x.as_slice())?;
    let logits = forward_logits_slice(params, &z)?;
    Ok(argmax(&logits))
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Batch-mean loss of `λ·L_α + L_CE` and its exact gradient.
///
/// Prototypes are constants. Samples whose class has no global prototype
/// (including every sample when the set is empty) get no prototype term.
pub fn backward(
    params: &ModelParams,
    batch: &[Sample],
    global: &GlobalPrototypeSet,
    hyper: &LossHyper,
) -> Result<(f64, GradientSet)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("batch"));
    }
    let protos = PreparedPrototypes::new(global);
    if let Some(d) = global.dim() {
        check_dims(params.feature_dim(), d)?;
    }
    let mut grads = GradientSet::zeros_like(params);
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let depth = params.extractor.len();

    for sample in batch {
        check_dims(params.input_dim(), sample.x.dim())?;
        // inputs[l] feeds extractor layer l; inputs[depth] is z
        let mut inputs: Vec<Vec<f64>> = Vec::with_capacity(depth + 1);
        inputs.push(sample.x.as_slice().to_vec());
        let mut pre: Vec<Vec<f64>> = Vec::with_capacity(depth);
        for layer in &params.extractor {
            let u = layer.affine(inputs.last().unwrap());
            inputs.push(u.iter().map(|v| v.max(0.0)).collect());
            pre.push(u);
        }
        let z = &inputs[depth];
        let logits = params.classifier.affine(z);
        let mut loss = cross_entropy_slice(&logits, sample.y)?;
        let d_logits = cross_entropy_grad(&logits, sample.y);

        let mut dz = params.classifier.weights.matvec_transposed(&d_logits)?;
        if prototype_term_applies(&protos, sample.y, hyper) {
            let terms = alpha_terms(z, sample.y, &protos, hyper, true)?;
            loss += hyper.lambda * (terms.contrast + terms.correction);
            for (d, g) in dz.iter_mut().zip(terms.grad.unwrap_or_default()) {
                *d += g;
            }
        }
        total += loss;

        accumulate_outer(&mut grads.0.classifier, &d_logits, z, scale);

        let mut delta = dz;
        for l in (0..depth).rev() {
            for (d, u) in delta.iter_mut().zip(&pre[l]) {
                if *u <= 0.0 {
                    *d = 0.0;
                }
            }
            accumulate_outer(&mut grads.0.extractor[l], &delta, &inputs[l], scale);
            if l > 0 {
                delta = params.extractor[l].weights.matvec_transposed(&delta)?;
            }
        }
    }
    Ok((total * scale, grads))
}

fn accumulate_outer(layer: &mut Layer, delta: &[f64], input: &[f64], scale: f64) {
    let cols = input.len();
    let w = layer.weights.as_mut_slice();
    for (r, &d) in delta.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        let ds = d * scale;
        for (wv, &x) in w[r * cols..(r + 1) * cols].iter_mut().zip(input) {
            *wv += ds * x;
        }
        layer.bias.as_mut_slice()[r] += ds;
    }
}
