//! A sequential layer stack with hand-written backward passes.
//!
//! Skip connections (used by the U-net) are expressed with two marker
//! layers: `SkipPush` saves the current activation on a stack and
//! `SkipConcat` pops it and concatenates it after the current channels.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::labels::ClassLabel;
use crate::layers::{
    activation, activation_backward, batch_norm_backward, batch_norm_infer, batch_norm_train, concat_channels, conv2d,
    conv2d_backward, crop, crop_backward, dense, dense_backward, dropout, dropout_backward, edge_pad, edge_pad_backward,
    global_avg_pool, global_avg_pool_backward, global_max_pool, global_max_pool_backward, mean_pool2x2,
    mean_pool2x2_backward, split_channels, upsample2x, upsample2x_backward, ActivationFn, BnCache, BnHyper, Mode,
    Padding, RunningStats,
};
use crate::seed::mix_seed;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv3x3,
    Conv1x1,
    BatchNorm,
    Activation,
    GlobalAvgPool,
    GlobalMaxPool,
    Dense,
    Dropout,
    MeanPool2x2,
    Upsample2x,
    SkipPush,
    SkipConcat,
    EdgePad,
    Crop,
}

impl LayerKind {
    pub const ALL: [LayerKind; 14] = [
        LayerKind::Conv3x3,
        LayerKind::Conv1x1,
        LayerKind::BatchNorm,
        LayerKind::Activation,
        LayerKind::GlobalAvgPool,
        LayerKind::GlobalMaxPool,
        LayerKind::Dense,
        LayerKind::Dropout,
        LayerKind::MeanPool2x2,
        LayerKind::Upsample2x,
        LayerKind::SkipPush,
        LayerKind::SkipConcat,
        LayerKind::EdgePad,
        LayerKind::Crop,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv3x3 => "conv3x3",
            LayerKind::Conv1x1 => "conv1x1",
            LayerKind::BatchNorm => "batch_norm",
            LayerKind::Activation => "activation",
            LayerKind::GlobalAvgPool => "global_avg_pool",
            LayerKind::GlobalMaxPool => "global_max_pool",
            LayerKind::Dense => "dense",
            LayerKind::Dropout => "dropout",
            LayerKind::MeanPool2x2 => "mean_pool2x2",
            LayerKind::Upsample2x => "upsample2x",
            LayerKind::SkipPush => "skip_push",
            LayerKind::SkipConcat => "skip_concat",
            LayerKind::EdgePad => "edge_pad",
            LayerKind::Crop => "crop",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// Layers that shrink the spatial plane between convolutions.
    pub fn is_spatial_pooling(self) -> bool {
        matches!(self, LayerKind::MeanPool2x2 | LayerKind::GlobalAvgPool | LayerKind::GlobalMaxPool)
    }
}

/// Output head of a classification stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    /// One sigmoid unit: probability of disease.
    Binary,
    /// `k` softmax units over [`Head::classes`].
    Multiclass(usize),
}

impl Head {
    pub fn outputs(self) -> usize {
        match self {
            Head::Binary => 1,
            Head::Multiclass(k) => k,
        }
    }

    /// Classes of the softmax columns: the four diseases for `k = 4`, all
    /// five classes for `k = 5`, otherwise the first `k` class codes.
    pub fn classes(self) -> Vec<ClassLabel> {
        match self {
            Head::Binary => vec![ClassLabel::Healthy, ClassLabel::Bronchiectasis],
            Head::Multiclass(4) => ClassLabel::DISEASES.to_vec(),
            Head::Multiclass(k) => ClassLabel::ALL[..k.min(5)].to_vec(),
        }
    }

    /// Training target row for `label`.
    pub fn target(self, label: ClassLabel) -> Result<Vec<f64>> {
        match self {
            Head::Binary => Ok(vec![if label.is_disease() { 1.0 } else { 0.0 }]),
            Head::Multiclass(_) => {
                let classes = self.classes();
                let j = classes
                    .iter()
                    .position(|&c| c == label)
                    .ok_or_else(|| Error::LabelOutOfHead {
                        label: label.name().to_string(),
                        head: self.to_string(),
                    })?;
                Ok((0..classes.len()).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
            }
        }
    }
}

impl std::fmt::Display for Head {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Head::Binary => write!(f, "binary"),
            Head::Multiclass(k) => write!(f, "multiclass:{k}"),
        }
    }
}

impl std::str::FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "binary" => Ok(Head::Binary),
            other => other
                .strip_prefix("multiclass:")
                .and_then(|k| k.parse().ok())
                .filter(|&k| (2..=5).contains(&k))
                .map(Head::Multiclass)
                .ok_or_else(|| Error::invalid(format!("unknown head {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerDescriptor<T: Scalar = f32> {
    pub kind: LayerKind,
    /// Weights then bias (conv, dense) or scale then shift (batch norm).
    pub params: Vec<Tensor<T>>,
    /// Batch norm: running mean, running variance, update count `[1]`.
    pub state: Vec<Tensor<T>>,
    pub hyper: BTreeMap<String, f64>,
}

impl<T: Scalar> LayerDescriptor<T> {
    pub fn new(kind: LayerKind) -> Self {
        Self {
            kind,
            params: Vec::new(),
            state: Vec::new(),
            hyper: BTreeMap::new(),
        }
    }

    pub fn with_hyper(mut self, key: &str, value: f64) -> Self {
        self.hyper.insert(key.to_string(), value);
        self
    }

    fn hyper(&self, key: &str) -> Result<f64> {
        self.hyper
            .get(key)
            .copied()
            .ok_or_else(|| Error::invalid(format!("{} layer is missing hyper-parameter {key}", self.kind.name())))
    }

    pub fn activation_fn(&self) -> Result<ActivationFn> {
        match self.hyper("fn")? as u8 {
            0 => Ok(ActivationFn::LeakyRelu {
                slope: self.hyper("slope")?,
            }),
            1 => Ok(ActivationFn::Sigmoid),
            2 => Ok(ActivationFn::Softmax),
            c => Err(Error::invalid(format!("unknown activation code {c}"))),
        }
    }

    fn padding(&self) -> Result<Padding> {
        Ok(Padding {
            top: self.hyper("top")? as usize,
            bottom: self.hyper("bottom")? as usize,
            left: self.hyper("left")? as usize,
            right: self.hyper("right")? as usize,
        })
    }

    fn bn_hyper(&self) -> Result<BnHyper> {
        Ok(BnHyper {
            epsilon: self.hyper("epsilon")?,
            momentum: self.hyper("momentum")?,
        })
    }

    fn running_stats(&self) -> Result<RunningStats<T>> {
        match self.state.as_slice() {
            [mean, var, updates] => Ok(RunningStats {
                mean: mean.data().to_vec(),
                var: var.data().to_vec(),
                updates: updates.data()[0].as_f64() as u64,
            }),
            _ => Err(Error::invalid("batch_norm layer needs mean, variance and update-count state")),
        }
    }

    fn store_stats(&mut self, stats: RunningStats<T>) {
        let c = stats.mean.len();
        self.state = vec![
            Tensor::new(vec![c], stats.mean).expect("channels"),
            Tensor::new(vec![c], stats.var).expect("channels"),
            Tensor::new(vec![1], vec![T::of(stats.updates as f64)]).expect("scalar"),
        ];
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> LayerDescriptor<U> {
        LayerDescriptor {
            kind: self.kind,
            params: self.params.iter().map(Tensor::cast).collect(),
            state: self.state.iter().map(Tensor::cast).collect(),
            hyper: self.hyper.clone(),
        }
    }
}

pub fn activation_layer<T: Scalar>(f: ActivationFn) -> LayerDescriptor<T> {
    match f {
        ActivationFn::LeakyRelu { slope } => LayerDescriptor::new(LayerKind::Activation)
            .with_hyper("fn", 0.0)
            .with_hyper("slope", slope),
        ActivationFn::Sigmoid => LayerDescriptor::new(LayerKind::Activation).with_hyper("fn", 1.0),
        ActivationFn::Softmax => LayerDescriptor::new(LayerKind::Activation).with_hyper("fn", 2.0),
    }
}

pub fn padding_layer<T: Scalar>(kind: LayerKind, p: Padding) -> LayerDescriptor<T> {
    LayerDescriptor::new(kind)
        .with_hyper("top", p.top as f64)
        .with_hyper("bottom", p.bottom as f64)
        .with_hyper("left", p.left as f64)
        .with_hyper("right", p.right as f64)
}

enum Cache<T: Scalar> {
    None,
    Input(Tensor<T>),
    Shape(Vec<usize>),
    Bn(BnCache<T>),
    Act { input: Tensor<T>, output: Tensor<T> },
    MaxPool { shape: Vec<usize>, argmax: Vec<usize> },
    Mask(Option<Vec<T>>),
    Concat(usize),
}

/// Per-layer intermediate values of a training forward pass.
pub struct Trace<T: Scalar> {
    caches: Vec<Cache<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerStack<T: Scalar = f32> {
    pub layers: Vec<LayerDescriptor<T>>,
    pub head: Head,
    /// `[C, H, W]` of one input sample.
    pub input_shape: Vec<usize>,
    /// Index of the layer whose output is the pixel-wise logit map, if any.
    pub heatmap_tap: Option<usize>,
}

impl<T: Scalar> LayerStack<T> {
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerDescriptor::param_count).sum()
    }

    pub fn kinds(&self) -> Vec<LayerKind> {
        self.layers.iter().map(|l| l.kind).collect()
    }

    pub fn cast<U: Scalar>(&self) -> LayerStack<U> {
        LayerStack {
            layers: self.layers.iter().map(LayerDescriptor::cast).collect(),
            head: self.head,
            input_shape: self.input_shape.clone(),
            heatmap_tap: self.heatmap_tap,
        }
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        if input.rank() != self.input_shape.len() + 1 || input.shape()[1..] != self.input_shape[..] {
            return Err(Error::shape(format!(
                "network input {:?} does not match [N, {}]",
                input.shape(),
                self.input_shape.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
            )));
        }
        Ok(())
    }

    /// Inference forward pass (batch norm uses running statistics, dropout
    /// is the identity). Also returns the output of layer `tap` if asked.
    pub fn forward_infer(&self, input: &Tensor<T>, tap: Option<usize>) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        self.check_input(input)?;
        let mut x = input.clone();
        let mut skips = Vec::new();
        let mut tapped = None;
        for (i, layer) in self.layers.iter().enumerate() {
            x = match layer.kind {
                LayerKind::BatchNorm => batch_norm_infer(
                    &x,
                    &layer.params[0],
                    &layer.params[1],
                    &layer.running_stats()?,
                    layer.bn_hyper()?,
                )?,
                LayerKind::Dropout => x,
                _ => step_stateless(layer, x, &mut skips, None, Mode::Infer, 0)?,
            };
            if tap == Some(i) {
                tapped = Some(x.clone());
            }
        }
        Ok((x, tapped))
    }

    /// Training forward pass: batch statistics (running statistics are
    /// updated) and dropout masks drawn from `seed`.
    pub fn forward_train(&mut self, input: &Tensor<T>, seed: u64) -> Result<(Tensor<T>, Trace<T>)> {
        self.check_input(input)?;
        let mut x = input.clone();
        let mut skips = Vec::new();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter_mut().enumerate() {
            if layer.kind == LayerKind::BatchNorm {
                let mut stats = layer.running_stats()?;
                let (y, cache) = batch_norm_train(&x, &layer.params[0], &layer.params[1], &mut stats, layer.bn_hyper()?)?;
                layer.store_stats(stats);
                caches.push(Cache::Bn(cache));
                x = y;
            } else {
                let mut cache = Cache::None;
                x = step_stateless(layer, x, &mut skips, Some(&mut cache), Mode::Train, mix_seed(seed, i as u64))?;
                caches.push(cache);
            }
        }
        Ok((x, Trace { caches }))
    }

    /// Gradients of every layer's parameters (same layout as `params`) and
    /// of the input, given dL/d(output).
    pub fn backward(&self, trace: &Trace<T>, grad_out: &Tensor<T>) -> Result<(Vec<Vec<Tensor<T>>>, Tensor<T>)> {
        let mut g = grad_out.clone();
        let mut grads: Vec<Vec<Tensor<T>>> = vec![Vec::new(); self.layers.len()];
        let mut skip_grads: Vec<Tensor<T>> = Vec::new();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            g = match (&trace.caches[i], layer.kind) {
                (Cache::Input(x), LayerKind::Conv3x3 | LayerKind::Conv1x1) => {
                    let r = conv2d_backward(x, &layer.params[0], &g)?;
                    grads[i] = vec![r.weights, r.bias];
                    r.input
                }
                (Cache::Input(x), LayerKind::Dense) => {
                    let r = dense_backward(x, &layer.params[0], &g)?;
                    grads[i] = vec![r.weights, r.bias];
                    r.input
                }
                (Cache::Bn(cache), LayerKind::BatchNorm) => {
                    let r = batch_norm_backward(cache, &layer.params[0], &g)?;
                    grads[i] = vec![r.gamma, r.beta];
                    r.input
                }
                (Cache::Act { input, output }, LayerKind::Activation) => {
                    activation_backward(input, output, &g, layer.activation_fn()?)?
                }
                (Cache::Shape(s), LayerKind::GlobalAvgPool) => global_avg_pool_backward(s, &g)?,
                (Cache::MaxPool { shape, argmax }, LayerKind::GlobalMaxPool) => global_max_pool_backward(shape, argmax, &g)?,
                (Cache::Mask(mask), LayerKind::Dropout) => dropout_backward(mask.as_deref(), &g),
                (Cache::Shape(s), LayerKind::MeanPool2x2) => mean_pool2x2_backward(s, &g)?,
                (Cache::Shape(s), LayerKind::Upsample2x) => upsample2x_backward(s, &g)?,
                (Cache::Shape(s), LayerKind::EdgePad) => edge_pad_backward(s, layer.padding()?, &g)?,
                (Cache::Shape(s), LayerKind::Crop) => crop_backward(s, layer.padding()?, &g)?,
                (Cache::Concat(first), LayerKind::SkipConcat) => {
                    let (a, skip) = split_channels(&g, *first)?;
                    skip_grads.push(skip);
                    a
                }
                (Cache::None, LayerKind::SkipPush) => {
                    let skip = skip_grads
                        .pop()
                        .ok_or_else(|| Error::invalid("skip_push without a matching skip_concat"))?;
                    let mut g = g;
                    g.data_mut().iter_mut().zip(skip.data()).for_each(|(a, &b)| *a = *a + b);
                    g
                }
                _ => return Err(Error::invalid(format!("trace does not match layer {i} ({})", layer.kind.name()))),
            };
        }
        Ok((grads, g))
    }
}

/// Forward through a layer whose behaviour does not depend on running
/// state. Records what the backward pass needs when `cache` is given.
fn step_stateless<T: Scalar>(
    layer: &LayerDescriptor<T>,
    x: Tensor<T>,
    skips: &mut Vec<Tensor<T>>,
    cache: Option<&mut Cache<T>>,
    mode: Mode,
    seed: u64,
) -> Result<Tensor<T>> {
    let record = cache.is_some();
    let (y, c) = match layer.kind {
        LayerKind::Conv3x3 | LayerKind::Conv1x1 => {
            let y = conv2d(&x, &layer.params[0], &layer.params[1])?;
            (y, if record { Cache::Input(x) } else { Cache::None })
        }
        LayerKind::Dense => {
            let y = dense(&x, &layer.params[0], &layer.params[1])?;
            (y, if record { Cache::Input(x) } else { Cache::None })
        }
        LayerKind::Activation => {
            let y = activation(&x, layer.activation_fn()?)?;
            let c = if record {
                Cache::Act {
                    input: x,
                    output: y.clone(),
                }
            } else {
                Cache::None
            };
            (y, c)
        }
        LayerKind::GlobalAvgPool => (global_avg_pool(&x)?, Cache::Shape(x.shape().to_vec())),
        LayerKind::GlobalMaxPool => {
            let (y, argmax) = global_max_pool(&x)?;
            (
                y,
                Cache::MaxPool {
                    shape: x.shape().to_vec(),
                    argmax,
                },
            )
        }
        LayerKind::Dropout => {
            let (y, mask) = dropout(&x, layer.hyper("rate")?, mode, seed)?;
            (y, Cache::Mask(mask))
        }
        LayerKind::MeanPool2x2 => (mean_pool2x2(&x)?, Cache::Shape(x.shape().to_vec())),
        LayerKind::Upsample2x => (upsample2x(&x)?, Cache::Shape(x.shape().to_vec())),
        LayerKind::EdgePad => (edge_pad(&x, layer.padding()?)?, Cache::Shape(x.shape().to_vec())),
        LayerKind::Crop => (crop(&x, layer.padding()?)?, Cache::Shape(x.shape().to_vec())),
        LayerKind::SkipPush => {
            skips.push(x.clone());
            (x, Cache::None)
        }
        LayerKind::SkipConcat => {
            let skip = skips
                .pop()
                .ok_or_else(|| Error::invalid("skip_concat without a pending skip_push"))?;
            let first = x.shape().get(1).copied().unwrap_or(0);
            (concat_channels(&x, &skip)?, Cache::Concat(first))
        }
        LayerKind::BatchNorm => unreachable!("batch norm is handled by the caller"),
    };
    if let Some(slot) = cache {
        *slot = c;
    }
    Ok(y)
}
