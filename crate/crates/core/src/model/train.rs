use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::stack::{Head, LayerStack};
use crate::data::{augment, PatchSample};
use crate::error::{Error, Result};
use crate::kv::KvDoc;
use crate::labels::{ClassLabel, ClassWeights};
use crate::losses::{dice_loss, weighted_cross_entropy};
use crate::optim::{sgd_step, SgdConfig};
use crate::seed::{mix_seed, rng_for};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    /// Dice loss on the sigmoid output (binary heads).
    Dice,
    /// Class-weighted cross-entropy on the softmax output.
    WeightedCrossEntropy,
}

impl Objective {
    pub fn for_head(head: Head) -> Self {
        match head {
            Head::Binary => Objective::Dice,
            Head::Multiclass(_) => Objective::WeightedCrossEntropy,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainRunConfig {
    pub epochs: usize,
    pub seed: u64,
    pub sgd: SgdConfig,
    pub class_weights: ClassWeights,
    pub augmentation: bool,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            seed: 0,
            sgd: SgdConfig::default(),
            class_weights: ClassWeights::uniform(),
            augmentation: true,
        }
    }
}

impl TrainRunConfig {
    pub fn write_kv(&self, doc: &mut KvDoc) {
        doc.set("epochs", self.epochs);
        doc.set("seed", self.seed);
        doc.set("learning_rate", self.sgd.learning_rate);
        doc.set("momentum", self.sgd.momentum);
        doc.set("batch_size", self.sgd.batch_size);
        doc.set("augmentation", self.augmentation);
        for (c, w) in self.class_weights.iter() {
            doc.set(format!("weight.{}", c.short()), w);
        }
    }

    pub fn from_kv(doc: &KvDoc, base: Self) -> Result<Self> {
        let mut weights = base.class_weights;
        for key in doc.keys() {
            if let Some(class) = key.strip_prefix("weight.") {
                weights.set(class.parse::<ClassLabel>()?, doc.parse_required(key)?)?;
            }
        }
        Ok(Self {
            epochs: doc.get_or("epochs", base.epochs)?,
            seed: doc.get_or("seed", base.seed)?,
            sgd: SgdConfig {
                learning_rate: doc.get_or("learning_rate", base.sgd.learning_rate)?,
                momentum: doc.get_or("momentum", base.sgd.momentum)?,
                batch_size: doc.get_or("batch_size", base.sgd.batch_size)?,
            },
            class_weights: weights,
            augmentation: doc.get_or("augmentation", base.augmentation)?,
        })
    }
}

/// Stacks patch pixels into a `[N, 1, H, W]` batch.
pub fn batch_tensor<T: Scalar>(patches: &[&Tensor<f32>]) -> Result<Tensor<T>> {
    let first = patches.first().ok_or_else(|| Error::invalid("empty batch"))?;
    let mut shape = vec![patches.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(patches.len() * first.len());
    for p in patches {
        if p.shape() != first.shape() {
            return Err(Error::shape(format!("batch mixes patch shapes {:?} and {:?}", first.shape(), p.shape())));
        }
        data.extend(p.data().iter().map(|&v| T::of(v as f64)));
    }
    Tensor::new(shape, data)
}

/// Loss and dL/d(output) of one batch.
fn objective_loss<T: Scalar>(
    objective: Objective,
    head: Head,
    out: &Tensor<T>,
    labels: &[ClassLabel],
    weights: &[f64],
) -> Result<(f64, Tensor<T>)> {
    let mut truth = Vec::with_capacity(out.len());
    for &l in labels {
        truth.extend(head.target(l)?.into_iter().map(T::of));
    }
    let truth = Tensor::new(out.shape().to_vec(), truth)?;
    match objective {
        Objective::Dice => dice_loss(out, &truth),
        Objective::WeightedCrossEntropy => weighted_cross_entropy(out, &truth, weights),
    }
}

/// Trains `net` in place with SGD + momentum and returns the mean loss of
/// each epoch. Deterministic given `run.seed`.
pub fn train_classifier<T: Scalar>(
    net: &mut LayerStack<T>,
    data: &[PatchSample],
    run: &TrainRunConfig,
    objective: Objective,
) -> Result<Vec<f64>> {
    run.sgd.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    match (objective, net.head) {
        (Objective::Dice, Head::Binary) | (Objective::WeightedCrossEntropy, Head::Multiclass(_)) => {}
        (o, h) => return Err(Error::invalid(format!("objective {o:?} does not fit a {h} head"))),
    }
    for s in data {
        net.head.target(s.label)?;
    }
    let weights = match net.head {
        Head::Binary => vec![1.0],
        Head::Multiclass(_) => run.class_weights.resolve(&net.head.classes())?,
    };
    let mut velocity: Vec<Vec<Tensor<T>>> = net
        .layers
        .iter()
        .map(|l| l.params.iter().map(|p| Tensor::zeros(p.shape())).collect())
        .collect();
    let mut history = Vec::with_capacity(run.epochs);
    let mut step = 0u64;
    for epoch in 0..run.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng_for(run.seed, mix_seed(0xe90c, epoch as u64)));
        let mut total = 0.0;
        for chunk in order.chunks(run.sgd.batch_size) {
            let step_seed = mix_seed(run.seed, mix_seed(0x57e9, step));
            let augmented: Vec<PatchSample>;
            let pixels: Vec<&Tensor<f32>> = if run.augmentation {
                augmented = chunk
                    .iter()
                    .enumerate()
                    .map(|(k, &i)| augment(&data[i], mix_seed(step_seed, k as u64)))
                    .collect();
                augmented.iter().map(|p| &p.pixels).collect()
            } else {
                chunk.iter().map(|&i| &data[i].pixels).collect()
            };
            let labels: Vec<ClassLabel> = chunk.iter().map(|&i| data[i].label).collect();
            let input = batch_tensor(&pixels)?;
            let (out, trace) = net.forward_train(&input, step_seed)?;
            let (loss, grad) = objective_loss(objective, net.head, &out, &labels, &weights)?;
            let (grads, _) = net.backward(&trace, &grad)?;
            for ((layer, g), v) in net.layers.iter_mut().zip(&grads).zip(velocity.iter_mut()) {
                if !layer.params.is_empty() {
                    sgd_step(&mut layer.params, g, v, &run.sgd)?;
                }
            }
            total += loss * chunk.len() as f64;
            step += 1;
        }
        history.push(total / data.len() as f64);
    }
    Ok(history)
}

const PREDICT_CHUNK: usize = 64;

/// Infer-mode outputs for each patch, one row per patch.
pub fn predict_batch(net: &LayerStack<f32>, patches: &[&Tensor<f32>]) -> Result<Vec<Vec<f32>>> {
    let rows: Vec<Vec<Vec<f32>>> = patches
        .par_chunks(PREDICT_CHUNK)
        .map(|chunk| {
            let (out, _) = net.forward_infer(&batch_tensor(chunk)?, None)?;
            let k = out.shape()[1];
            Ok(out.data().chunks(k).map(<[f32]>::to_vec).collect())
        })
        .collect::<Result<_>>()?;
    Ok(rows.into_iter().flatten().collect())
}

pub fn predict_samples(net: &LayerStack<f32>, samples: &[PatchSample]) -> Result<Vec<Vec<f32>>> {
    predict_batch(net, &samples.iter().map(|s| &s.pixels).collect::<Vec<_>>())
}

/// Score vector of one `[1, 60, 60]` patch.
pub fn predict_patch(net: &LayerStack<f32>, patch: &Tensor<f32>) -> Result<Vec<f32>> {
    Ok(predict_batch(net, &[patch])?.remove(0))
}

/// Pixel-wise heatmaps (sigmoid of the tapped logit map), `[H, W]` each.
pub fn predict_heatmaps(net: &LayerStack<f32>, patches: &[&Tensor<f32>]) -> Result<Vec<Tensor<f32>>> {
    let tap = net
        .heatmap_tap
        .ok_or_else(|| Error::invalid("network has no heatmap output"))?;
    let maps: Vec<Vec<Tensor<f32>>> = patches
        .par_chunks(PREDICT_CHUNK)
        .map(|chunk| {
            let (_, map) = net.forward_infer(&batch_tensor(chunk)?, Some(tap))?;
            let map = map.expect("tap index is within the stack");
            let (h, w) = (map.shape()[2], map.shape()[3]);
            map.data()
                .chunks(h * w)
                .map(|m| Tensor::new(vec![h, w], m.iter().map(|&v| sigmoid(v)).collect()))
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(maps.into_iter().flatten().collect())
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}
