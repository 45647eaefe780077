//! Desk-scale reconstruction networks and their training.
//!
//! Two families are provided: an AUTOMAP-style sensor-to-image network
//! (two dense layers followed by a small convolutional stack, optionally with
//! dropout after the first convolution) and a residual three-level UNET used
//! for image-domain denoising and sparse-view CT cleanup.

mod layers;
mod network;
mod optim;
mod train;

use ndarray::Array2;
use rand::Rng;

use crate::numerics::Image;
use crate::parallel::prelude::*;
use crate::{seed, Error, Result};

pub use optim::{rmsprop_step, RmsPropState};
pub use train::{train, train_with, EpochStats};

/// Pointwise nonlinearity applied after a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "identity" | "linear" | "none" => Some(Activation::Identity),
            "tanh" => Some(Activation::Tanh),
            "relu" => Some(Activation::Relu),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchKind {
    Automap,
    AutomapDropout,
    UnetResidual,
}

impl ArchKind {
    pub fn name(self) -> &'static str {
        match self {
            ArchKind::Automap => "automap",
            ArchKind::AutomapDropout => "automap-dropout",
            ArchKind::UnetResidual => "unet-residual",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "automap" => Some(ArchKind::Automap),
            "automap-dropout" => Some(ArchKind::AutomapDropout),
            "unet-residual" => Some(ArchKind::UnetResidual),
            _ => None,
        }
    }

    fn layer_count(self) -> usize {
        match self {
            ArchKind::Automap | ArchKind::AutomapDropout => 5,
            ArchKind::UnetResidual => 7,
        }
    }
}

/// Architecture descriptor.
///
/// `activations` has one entry per weighted layer in declaration order:
/// `fc1, fc2, conv1, conv2, convt` for AUTOMAP and
/// `enc1a, enc1b, enc2, bottleneck, dec2, dec1, out` for the UNET.
/// `input_scale` is a fixed (untrained) factor applied to the network input.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    pub kind: ArchKind,
    pub n: usize,
    pub fc1_width: usize,
    pub conv_filters: usize,
    pub conv_kernel: usize,
    pub out_kernel: usize,
    pub dropout_p: f64,
    pub input_scale: f64,
    pub activations: Vec<Activation>,
}

impl ArchSpec {
    /// FC1 width keeps the 25000:16384 ratio of the full-size network.
    pub fn default_fc1_width(n: usize) -> usize {
        (1.526 * (n * n) as f64).round() as usize
    }

    pub fn automap(n: usize) -> Self {
        use Activation::*;
        Self {
            kind: ArchKind::Automap,
            n,
            fc1_width: Self::default_fc1_width(n),
            conv_filters: 16,
            conv_kernel: 5,
            out_kernel: 7,
            dropout_p: 0.0,
            input_scale: 1.0 / n as f64,
            activations: vec![Tanh, Identity, Tanh, Relu, Identity],
        }
    }

    pub fn automap_dropout(n: usize, p: f64) -> Self {
        Self {
            kind: ArchKind::AutomapDropout,
            dropout_p: p,
            ..Self::automap(n)
        }
    }

    pub fn unet(n: usize) -> Self {
        use Activation::*;
        Self {
            kind: ArchKind::UnetResidual,
            n,
            fc1_width: 0,
            conv_filters: 16,
            conv_kernel: 5,
            out_kernel: 5,
            dropout_p: 0.0,
            input_scale: 1.0,
            activations: vec![Relu, Relu, Relu, Relu, Relu, Relu, Identity],
        }
    }

    pub fn is_automap(&self) -> bool {
        matches!(self.kind, ArchKind::Automap | ArchKind::AutomapDropout)
    }

    pub fn input_width(&self) -> usize {
        if self.is_automap() {
            2 * self.n * self.n
        } else {
            self.n * self.n
        }
    }

    pub fn output_width(&self) -> usize {
        self.n * self.n
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if !Image::valid_side(self.n) {
            return bad(format!("n = {} must be a power of two >= 4", self.n));
        }
        if self.conv_filters == 0 {
            return bad("conv_filters must be positive".into());
        }
        for (name, k) in [("conv_kernel", self.conv_kernel), ("out_kernel", self.out_kernel)] {
            if k == 0 || k % 2 == 0 {
                return bad(format!("{name} = {k} must be odd and positive"));
            }
        }
        if self.is_automap() && self.fc1_width == 0 {
            return bad("fc1_width must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p = {} outside [0, 1)", self.dropout_p));
        }
        if self.dropout_p > 0.0 && self.kind != ArchKind::AutomapDropout {
            return bad(format!("dropout_p > 0 requires automap-dropout, got {}", self.kind.name()));
        }
        if !(self.input_scale.is_finite() && self.input_scale > 0.0) {
            return bad(format!("input_scale = {} must be finite and positive", self.input_scale));
        }
        if self.activations.len() != self.kind.layer_count() {
            return bad(format!(
                "{} needs {} activations, got {}",
                self.kind.name(),
                self.kind.layer_count(),
                self.activations.len()
            ));
        }
        Ok(())
    }

    /// Parameter names and shapes in declaration order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (n, c, k) = (self.n, self.conv_filters, self.conv_kernel);
        let mut out = Vec::new();
        let mut push = |name: &str, w: Vec<usize>, b: usize| {
            out.push((format!("{name}.weight"), w));
            out.push((format!("{name}.bias"), vec![b]));
        };
        if self.is_automap() {
            push("fc1", vec![2 * n * n, self.fc1_width], self.fc1_width);
            push("fc2", vec![self.fc1_width, n * n], n * n);
            push("conv1", vec![c, 1, k, k], c);
            push("conv2", vec![c, c, k, k], c);
            // transposed convolution, stored [in, out, k, k]
            push("convt", vec![c, 1, self.out_kernel, self.out_kernel], 1);
        } else {
            push("enc1a", vec![c, 1, k, k], c);
            push("enc1b", vec![c, c, k, k], c);
            push("enc2", vec![c, c, k, k], c);
            push("bottleneck", vec![c, c, k, k], c);
            push("dec2", vec![c, 2 * c, k, k], c);
            push("dec1", vec![c, 2 * c, k, k], c);
            push("out", vec![1, c, self.out_kernel, self.out_kernel], 1);
        }
        out
    }
}

/// Named dense tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn is_bias(&self) -> bool {
        self.name.ends_with(".bias")
    }

    /// `(fan_in, fan_out)` for a weight tensor.
    fn fans(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [i, o] => (*i, *o),
            [a, b, k1, k2] => (b * k1 * k2, a * k1 * k2),
            _ => (1, 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout disabled.
    Deterministic,
    /// Dropout active with a mask drawn from this seed.
    Stochastic(u64),
}

/// Parameterized reconstruction network.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconModel {
    spec: ArchSpec,
    params: Vec<Tensor>,
    seed: u64,
}

/// Rows processed together inside one parallel task.
const CHUNK: usize = 64;

impl ReconModel {
    /// Glorot-uniform weights, zero biases.
    pub fn init(spec: ArchSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = seed::rng(seed);
        let params = spec
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let mut t = Tensor::zeros(name, shape);
                if !t.is_bias() {
                    let (fi, fo) = t.fans();
                    let bound = (6.0 / (fi + fo) as f64).sqrt();
                    t.data.iter_mut().for_each(|w| *w = rng.random_range(-bound..bound));
                }
                t
            })
            .collect();
        Ok(Self { spec, params, seed })
    }

    /// Rebuilds a model from stored tensors, checking names and shapes against `spec`.
    pub fn from_parts(spec: ArchSpec, params: Vec<Tensor>, seed: u64) -> Result<Self> {
        spec.validate()?;
        let expected = spec.param_shapes();
        if expected.len() != params.len() {
            return Err(Error::ModelMismatch(format!(
                "expected {} tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for ((name, shape), t) in expected.iter().zip(&params) {
            if name != &t.name || shape != &t.shape || t.data.len() != shape.iter().product::<usize>() {
                return Err(Error::ModelMismatch(format!(
                    "tensor `{}` {:?} does not match expected `{name}` {shape:?}",
                    t.name, t.shape
                )));
            }
            if !layers::all_finite(t.data.iter()) {
                return Err(Error::NonFinite { layer: t.name.clone() });
            }
        }
        Ok(Self { spec, params, seed })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Overrides the dropout probability (used to probe degenerate dropout).
    pub fn set_dropout(&mut self, p: f64) -> Result<()> {
        let mut spec = self.spec.clone();
        spec.dropout_p = p;
        spec.validate()?;
        self.spec = spec;
        Ok(())
    }

    fn check_width(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.spec.input_width() {
            return Err(Error::Shape(format!(
                "{} expects input width {}, got {}",
                self.spec.kind.name(),
                self.spec.input_width(),
                x.len()
            )));
        }
        Ok(())
    }

    fn stack(&self, xs: &[&[f64]]) -> Array2<f64> {
        let w = self.spec.input_width();
        let mut m = Array2::zeros((xs.len(), w));
        for (mut row, x) in m.rows_mut().into_iter().zip(xs) {
            row.as_slice_mut().expect("row-major").copy_from_slice(x);
        }
        m
    }

    fn mask_for(&self, mode: Mode) -> Option<Vec<f64>> {
        match mode {
            Mode::Stochastic(s) if self.spec.kind == ArchKind::AutomapDropout => Some(
                layers::dropout_mask(self.spec.conv_filters * self.spec.n * self.spec.n, self.spec.dropout_p, s),
            ),
            _ => None,
        }
    }

    pub fn forward(&self, x: &[f64], mode: Mode) -> Result<Image> {
        let out = self.forward_batch(&[x], &[mode])?.pop().expect("one output");
        Image::from_vec(self.spec.n, out)
    }

    /// Runs every input through the network; `modes` pairs with `xs`.
    pub fn forward_batch(&self, xs: &[&[f64]], modes: &[Mode]) -> Result<Vec<Vec<f64>>> {
        if xs.len() != modes.len() {
            return Err(Error::Shape(format!("{} inputs but {} modes", xs.len(), modes.len())));
        }
        for x in xs {
            self.check_width(x)?;
        }
        let idx: Vec<usize> = (0..xs.len()).collect();
        let chunks: Vec<Result<Vec<Vec<f64>>>> = idx
            .par_chunks(CHUNK)
            .map(|chunk| {
                let rows: Vec<&[f64]> = chunk.iter().map(|&i| xs[i]).collect();
                let masks: Option<Vec<Vec<f64>>> = chunk.iter().map(|&i| self.mask_for(modes[i])).collect();
                let out = network::forward(&self.spec, &self.params, &self.stack(&rows), masks.as_deref())?;
                Ok(out.out.rows().into_iter().map(|r| r.to_vec()).collect())
            })
            .collect();
        let mut outs = Vec::with_capacity(xs.len());
        for c in chunks {
            outs.extend(c?);
        }
        Ok(outs)
    }

    /// One stochastic forward of `x` per seed. For the dropout network the
    /// deterministic layers before the dropout site are evaluated once.
    pub fn forward_repeated(&self, x: &[f64], seeds: &[u64]) -> Result<Vec<Vec<f64>>> {
        self.check_width(x)?;
        if self.spec.kind != ArchKind::AutomapDropout {
            let out = self.forward(x, Mode::Deterministic)?.into_vec();
            return Ok(vec![out; seeds.len()]);
        }
        let prefix = network::automap_prefix(&self.spec, &self.params, &self.stack(&[x]))?;
        let chunks: Vec<Result<Vec<Vec<f64>>>> = seeds
            .par_chunks(CHUNK)
            .map(|chunk| {
                let masks: Vec<Vec<f64>> = chunk
                    .iter()
                    .map(|&s| self.mask_for(Mode::Stochastic(s)).expect("dropout network"))
                    .collect();
                let out = network::automap_suffix(&self.spec, &self.params, &prefix, &masks)?;
                Ok(out.rows().into_iter().map(|r| r.to_vec()).collect())
            })
            .collect();
        let mut outs = Vec::with_capacity(seeds.len());
        for c in chunks {
            outs.extend(c?);
        }
        Ok(outs)
    }

    /// Loss and reverse-mode gradient over a minibatch of `(input, target)` rows.
    ///
    /// With `dropout_seed`, sample `i` of the batch uses the mask seeded by
    /// `seed::derive(dropout_seed, i)`; otherwise dropout is off. The batch is
    /// split into fixed chunks whose gradients are summed in chunk order, so the
    /// result does not depend on thread scheduling.
    pub fn loss_and_grad(
        &self,
        batch: &[(&[f64], &[f64])],
        cfg: &TrainConfig,
        dropout_seed: Option<u64>,
    ) -> Result<(LossReport, Vec<Vec<f64>>)> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty minibatch".into()));
        }
        for (x, y) in batch {
            self.check_width(x)?;
            if y.len() != self.spec.output_width() {
                return Err(Error::Shape(format!(
                    "target width {} != {}",
                    y.len(),
                    self.spec.output_width()
                )));
            }
        }
        let idx: Vec<usize> = (0..batch.len()).collect();
        let parts: Vec<Result<network::Partial>> = idx
            .par_chunks(CHUNK)
            .map(|chunk| {
                let xs: Vec<&[f64]> = chunk.iter().map(|&i| batch[i].0).collect();
                let ys: Vec<&[f64]> = chunk.iter().map(|&i| batch[i].1).collect();
                let masks: Option<Vec<Vec<f64>>> = chunk
                    .iter()
                    .map(|&i| self.mask_for(dropout_seed.map_or(Mode::Deterministic, |s| Mode::Stochastic(seed::derive(s, i as u64)))))
                    .collect();
                network::loss_and_grad(&self.spec, &self.params, &self.stack(&xs), &ys, masks.as_deref(), cfg.l1_gamma)
            })
            .collect();

        let mut parts = parts.into_iter();
        let first = parts.next().expect("non-empty batch")?;
        let (mut data_loss, mut l1_penalty) = (first.data_loss, first.l1_penalty);
        let mut grads = first.grads;
        for p in parts {
            let p = p?;
            data_loss += p.data_loss;
            l1_penalty += p.l1_penalty;
            for (g, pg) in grads.iter_mut().zip(&p.grads) {
                g.iter_mut().zip(pg).for_each(|(a, b)| *a += b);
            }
        }

        let mut l2_penalty = 0.0;
        for (t, g) in self.params.iter().zip(grads.iter_mut()) {
            if t.is_bias() {
                continue;
            }
            l2_penalty += cfg.l2_lambda * t.data.iter().map(|w| w * w).sum::<f64>();
            g.iter_mut()
                .zip(&t.data)
                .for_each(|(g, w)| *g += 2.0 * cfg.l2_lambda * w);
        }

        let report = LossReport {
            data_loss,
            l2_penalty,
            l1_penalty,
            total: data_loss + l2_penalty + l1_penalty,
        };
        if !report.total.is_finite() {
            return Err(Error::NonFinite { layer: "loss".into() });
        }
        Ok((report, grads))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub rms_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub l2_lambda: f64,
    pub l1_gamma: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// RMSProp lr 2e-5, decay 0.9, no momentum, batches of 50.
    pub fn automap() -> Self {
        Self {
            learning_rate: 2e-5,
            rms_decay: 0.9,
            momentum: 0.0,
            batch_size: 50,
            epochs: 100,
            l2_lambda: 1e-3,
            l1_gamma: 1e-4,
            epsilon: 1e-8,
            seed: 0,
        }
    }

    /// RMSProp lr 2e-4, decay 0.9, no momentum, batches of 100.
    pub fn unet() -> Self {
        Self {
            learning_rate: 2e-4,
            batch_size: 100,
            ..Self::automap()
        }
    }

    pub fn for_arch(kind: ArchKind) -> Self {
        match kind {
            ArchKind::UnetResidual => Self::unet(),
            _ => Self::automap(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.rms_decay > 0.0
            && self.rms_decay < 1.0
            && self.momentum >= 0.0
            && self.batch_size > 0
            && self.l2_lambda >= 0.0
            && self.l1_gamma >= 0.0
            && self.epsilon > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!("invalid training config {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossReport {
    /// Sum of squared output errors over the batch.
    pub data_loss: f64,
    pub l2_penalty: f64,
    pub l1_penalty: f64,
    pub total: f64,
}
