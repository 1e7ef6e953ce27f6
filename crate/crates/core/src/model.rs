//! The learner: MLP feature extractor `F`, growing linear classifier `G` and
//! linear projection head `P` whose output is L2-normalised.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::numkit::{
    bias_add, l2_normalize_backward, l2_normalize_rows, matmul, matmul_nt, matmul_tn, relu,
    relu_backward, Matrix, Normalized, NORM_EPS,
};
use crate::rng::{gaussian, rng_for};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `fan_in x fan_out`
    pub weights: Matrix,
    /// `1 x fan_out`
    pub bias: Matrix,
}

impl Linear {
    fn gaussian<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let scale = 1.0 / libm::sqrt(fan_in.max(1) as f64);
        Self {
            weights: Matrix::from_fn(fan_in, fan_out, |_, _| scale * gaussian(rng)),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weights.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.cols()
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        bias_add(&matmul(x, &self.weights)?, &self.bias)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Widths of the ReLU layers of `F`; the last one is the feature width.
    pub hidden: Vec<usize>,
    /// Output width of `P`; must equal the ETF dimension.
    pub proj_dim: usize,
    pub projector_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { input_dim: 20, hidden: vec![64, 64], proj_dim: 32, projector_bias: true }
    }
}

impl ModelConfig {
    pub fn feat_dim(&self) -> usize {
        self.hidden.last().copied().unwrap_or(self.input_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.proj_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("model widths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    config: ModelConfig,
    extractor: Vec<Linear>,
    classifier: Linear,
    projector: Linear,
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct Forward {
    input: Matrix,
    pre_activations: Vec<Matrix>,
    activations: Vec<Matrix>,
    pub logits: Matrix,
    raw_projection: Matrix,
    pub projection: Normalized,
}

impl Forward {
    /// `F(x)`
    pub fn features(&self) -> &Matrix {
        self.activations.last().unwrap_or(&self.input)
    }

    /// Unit-norm projection features `f`.
    pub fn f(&self) -> &Matrix {
        &self.projection.out
    }

    /// Sign pattern of every hidden pre-activation; gradient checks use it
    /// to avoid stepping across a ReLU kink.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.pre_activations.iter().flat_map(|m| m.data().iter().map(|&v| v > 0.0)).collect()
    }
}

/// Gradients aligned with [`ModelState::parameters`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    tensors: Vec<Matrix>,
}

impl Gradients {
    pub fn zeros_like(model: &ModelState) -> Self {
        Self {
            tensors: model.parameters().iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect(),
        }
    }

    pub fn tensors(&self) -> &[Matrix] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix] {
        &mut self.tensors
    }

    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        self.add_scaled(1.0, other)
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &Gradients) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::Contract("gradient sets of different models".into()));
        }
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.axpy(alpha, b)?;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Gradients) -> Result<f64> {
        let mut m = 0.0f64;
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            m = m.max(a.max_abs_diff(b)?);
        }
        Ok(m)
    }
}

impl ModelState {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(seed, "model-init", 0);
        let mut extractor = Vec::with_capacity(config.hidden.len());
        let mut fan_in = config.input_dim;
        for &w in &config.hidden {
            extractor.push(Linear::gaussian(fan_in, w, &mut rng));
            fan_in = w;
        }
        let classifier = Linear { weights: Matrix::zeros(fan_in, 0), bias: Matrix::zeros(1, 0) };
        let mut projector = Linear::gaussian(fan_in, config.proj_dim, &mut rng);
        if !config.projector_bias {
            projector.bias = Matrix::zeros(1, config.proj_dim);
        }
        Ok(Self { config, extractor, classifier, projector })
    }

    /// Reassembles a model from stored parts, checking every shape.
    pub fn from_parts(
        config: ModelConfig,
        extractor: Vec<Linear>,
        classifier: Linear,
        projector: Linear,
    ) -> Result<Self> {
        config.validate()?;
        if extractor.len() != config.hidden.len() {
            return Err(Error::Contract("extractor depth does not match config".into()));
        }
        let mut fan_in = config.input_dim;
        for (layer, &w) in extractor.iter().zip(&config.hidden) {
            check_linear(layer, fan_in, Some(w), "extractor")?;
            fan_in = w;
        }
        check_linear(&classifier, fan_in, None, "classifier")?;
        check_linear(&projector, fan_in, Some(config.proj_dim), "projector")?;
        Ok(Self { config, extractor, classifier, projector })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn feat_dim(&self) -> usize {
        self.config.feat_dim()
    }

    pub fn proj_dim(&self) -> usize {
        self.config.proj_dim
    }

    pub fn observed_classes(&self) -> usize {
        self.classifier.fan_out()
    }

    pub fn extractor(&self) -> &[Linear] {
        &self.extractor
    }

    pub fn classifier(&self) -> &Linear {
        &self.classifier
    }

    pub fn projector(&self) -> &Linear {
        &self.projector
    }

    /// Mutable access for tests and checkpoint tooling; training goes
    /// through [`crate::trainer::sgd_step`].
    pub fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::with_capacity(2 * self.extractor.len() + 4);
        for l in &mut self.extractor {
            out.push(&mut l.weights);
            out.push(&mut l.bias);
        }
        out.push(&mut self.classifier.weights);
        out.push(&mut self.classifier.bias);
        out.push(&mut self.projector.weights);
        out.push(&mut self.projector.bias);
        out
    }

    pub fn parameters(&self) -> Vec<&Matrix> {
        let mut out = Vec::with_capacity(2 * self.extractor.len() + 4);
        for l in &self.extractor {
            out.push(&l.weights);
            out.push(&l.bias);
        }
        out.push(&self.classifier.weights);
        out.push(&self.classifier.bias);
        out.push(&self.projector.weights);
        out.push(&self.projector.bias);
        out
    }

    /// Stable names matching the order of [`parameters`](Self::parameters).
    pub fn parameter_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.extractor.len() {
            out.push(format!("extractor.{i}.weight"));
            out.push(format!("extractor.{i}.bias"));
        }
        for n in ["classifier.weight", "classifier.bias", "projector.weight", "projector.bias"] {
            out.push(n.into());
        }
        out
    }

    /// Position of the classifier weight in [`parameters`](Self::parameters).
    pub fn classifier_weight_index(&self) -> usize {
        2 * self.extractor.len()
    }

    pub fn projector_bias_index(&self) -> usize {
        2 * self.extractor.len() + 3
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.config.input_dim {
            return Err(Error::Dimension {
                op: "model forward",
                expected: (x.rows(), self.config.input_dim),
                found: x.shape(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &Matrix) -> Result<Forward> {
        self.check_input(x)?;
        let mut pre_activations = Vec::with_capacity(self.extractor.len());
        let mut activations = Vec::with_capacity(self.extractor.len());
        let mut h = x.clone();
        for layer in &self.extractor {
            let z = layer.apply(&h)?;
            h = relu(&z);
            pre_activations.push(z);
            activations.push(h.clone());
        }
        let logits = self.classifier.apply(&h)?;
        let raw_projection = self.projector.apply(&h)?;
        let projection = l2_normalize_rows(&raw_projection, NORM_EPS);
        Ok(Forward { input: x.clone(), pre_activations, activations, logits, raw_projection, projection })
    }

    /// `G(F(x))`, one row of logits per input row.
    pub fn forward_logits(&self, x: &Matrix) -> Result<Matrix> {
        let h = self.features(x)?;
        self.classifier.apply(&h)
    }

    /// `P(F(x)) / |P(F(x))|`, with degenerate rows flagged.
    pub fn forward_projection(&self, x: &Matrix) -> Result<Normalized> {
        let h = self.features(x)?;
        Ok(l2_normalize_rows(&self.projector.apply(&h)?, NORM_EPS))
    }

    /// Raw extractor output `F(x)`.
    pub fn features(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.extractor {
            h = relu(&layer.apply(&h)?);
        }
        Ok(h)
    }

    /// Backpropagates upstream gradients on the logits and/or the normalised
    /// projection of `fwd` into parameter gradients.
    pub fn backward(
        &self,
        fwd: &Forward,
        d_logits: Option<&Matrix>,
        d_projection: Option<&Matrix>,
    ) -> Result<Gradients> {
        let mut grads = Gradients::zeros_like(self);
        let feats = fwd.features();
        let mut d_feat = Matrix::zeros(feats.rows(), feats.cols());
        let nx = self.extractor.len();
        if let Some(dl) = d_logits {
            fwd.logits.check_same_shape(dl, "backward logits")?;
            grads.tensors[2 * nx] = matmul_tn(feats, dl)?;
            grads.tensors[2 * nx + 1] = dl.col_sums();
            d_feat.axpy(1.0, &matmul_nt(dl, &self.classifier.weights)?)?;
        }
        if let Some(dp) = d_projection {
            let d_raw = l2_normalize_backward(&fwd.projection, dp)?;
            debug_assert_eq!(d_raw.shape(), fwd.raw_projection.shape());
            grads.tensors[2 * nx + 2] = matmul_tn(feats, &d_raw)?;
            if self.config.projector_bias {
                grads.tensors[2 * nx + 3] = d_raw.col_sums();
            }
            d_feat.axpy(1.0, &matmul_nt(&d_raw, &self.projector.weights)?)?;
        }
        let mut upstream = d_feat;
        for l in (0..nx).rev() {
            let dz = relu_backward(&fwd.pre_activations[l], &upstream)?;
            let below = if l == 0 { &fwd.input } else { &fwd.activations[l - 1] };
            grads.tensors[2 * l] = matmul_tn(below, &dz)?;
            grads.tensors[2 * l + 1] = dz.col_sums();
            if l > 0 {
                upstream = matmul_nt(&dz, &self.extractor[l].weights)?;
            }
        }
        Ok(grads)
    }

    /// Widens the classifier by `new_classes` columns drawn from
    /// `N(0, 1/feat_dim)`; existing columns are kept bit-for-bit.
    pub fn expand_classifier<R: Rng + ?Sized>(&mut self, new_classes: usize, rng: &mut R) -> Result<()> {
        if new_classes == 0 {
            return Err(param("new_classes", "must be at least 1"));
        }
        let fd = self.feat_dim();
        let scale = 1.0 / libm::sqrt(fd as f64);
        let fresh = Matrix::from_fn(fd, new_classes, |_, _| scale * gaussian(rng));
        self.classifier.weights = self.classifier.weights.hstack(&fresh)?;
        self.classifier.bias = self.classifier.bias.hstack(&Matrix::zeros(1, new_classes))?;
        Ok(())
    }

    pub fn snapshot(&self, task_id: usize) -> TeacherSnapshot {
        TeacherSnapshot { model: self.clone(), task_id }
    }
}

fn check_linear(l: &Linear, fan_in: usize, fan_out: Option<usize>, what: &str) -> Result<()> {
    let out = fan_out.unwrap_or(l.weights.cols());
    if l.weights.shape() != (fan_in, out) || l.bias.shape() != (1, out) {
        return Err(Error::Contract(format!(
            "{what} has weights {:?} / bias {:?}, expected ({fan_in}, {out}) / (1, {out})",
            l.weights.shape(),
            l.bias.shape()
        )));
    }
    Ok(())
}

/// Frozen copy of the model at the end of a task.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherSnapshot {
    model: ModelState,
    task_id: usize,
}

impl TeacherSnapshot {
    pub fn task_id(&self) -> usize {
        self.task_id
    }

    pub fn model(&self) -> &ModelState {
        &self.model
    }

    pub fn observed_classes(&self) -> usize {
        self.model.observed_classes()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Forward> {
        self.model.forward(x)
    }

    pub fn forward_logits(&self, x: &Matrix) -> Result<Matrix> {
        self.model.forward_logits(x)
    }

    pub fn forward_projection(&self, x: &Matrix) -> Result<Normalized> {
        self.model.forward_projection(x)
    }

    pub fn snapshot(&self) -> TeacherSnapshot {
        self.clone()
    }
}
