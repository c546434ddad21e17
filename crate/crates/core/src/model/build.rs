use rand::Rng;

use super::stack::{activation_layer, padding_layer, Head, LayerDescriptor, LayerKind, LayerStack};
use crate::data::PATCH_PX;
use crate::error::{Error, Result};
use crate::kv::{join_list, KvDoc};
use crate::layers::{ActivationFn, BnHyper, Padding, DEFAULT_LEAKY_SLOPE};
use crate::seed::rng_for;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TextureNetConfig {
    pub conv_channels: Vec<usize>,
    pub dense_sizes: Vec<usize>,
    pub head: Head,
    pub dropout_rate: f64,
    pub leaky_slope: f64,
}

impl Default for TextureNetConfig {
    fn default() -> Self {
        Self {
            conv_channels: vec![32, 32, 64, 64, 128],
            dense_sizes: vec![512, 512],
            head: Head::Binary,
            dropout_rate: 0.5,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        }
    }
}

impl TextureNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return Err(Error::invalid("conv_channels must be a non-empty list of positive counts"));
        }
        if self.dense_sizes.contains(&0) {
            return Err(Error::invalid("dense sizes must be positive"));
        }
        if let Head::Multiclass(k) = self.head {
            if !(2..=5).contains(&k) {
                return Err(Error::invalid(format!("multiclass head needs 2..=5 classes, got {k}")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(format!("dropout rate {} is outside [0, 1)", self.dropout_rate)));
        }
        if !(self.leaky_slope >= 0.0) {
            return Err(Error::invalid(format!("leaky slope {} is negative", self.leaky_slope)));
        }
        Ok(())
    }

    pub fn write_kv(&self, doc: &mut KvDoc) {
        doc.set("conv_channels", join_list(&self.conv_channels));
        doc.set("dense_sizes", join_list(&self.dense_sizes));
        doc.set("head", self.head);
        doc.set("dropout_rate", self.dropout_rate);
        doc.set("leaky_slope", self.leaky_slope);
    }

    /// Reads the keys present in `doc` over `base`.
    pub fn from_kv(doc: &KvDoc, base: Self) -> Result<Self> {
        let cfg = Self {
            conv_channels: doc.get_list("conv_channels")?.unwrap_or(base.conv_channels),
            dense_sizes: doc.get_list("dense_sizes")?.unwrap_or(base.dense_sizes),
            head: doc.get_or("head", base.head)?,
            dropout_rate: doc.get_or("dropout_rate", base.dropout_rate)?,
            leaky_slope: doc.get_or("leaky_slope", base.leaky_slope)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GlobalPooling {
    Avg,
    Max,
}

impl std::str::FromStr for GlobalPooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "avg" => Ok(GlobalPooling::Avg),
            "max" => Ok(GlobalPooling::Max),
            other => Err(Error::invalid(format!("unknown pooling {other:?}; expected avg or max"))),
        }
    }
}

impl std::fmt::Display for GlobalPooling {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GlobalPooling::Avg => "avg",
            GlobalPooling::Max => "max",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapNetConfig {
    pub encoder_channels: Vec<usize>,
    pub pooling: GlobalPooling,
    pub leaky_slope: f64,
    /// Edge-replicate the input up to this side before the U-net and crop
    /// the map back afterwards; `None` feeds the input unpadded.
    pub pad_to: Option<usize>,
    pub input_px: usize,
}

impl Default for HeatmapNetConfig {
    fn default() -> Self {
        Self {
            encoder_channels: vec![16, 32],
            pooling: GlobalPooling::Avg,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            pad_to: Some(64),
            input_px: PATCH_PX,
        }
    }
}

impl HeatmapNetConfig {
    pub fn write_kv(&self, doc: &mut KvDoc) {
        doc.set("encoder_channels", join_list(&self.encoder_channels));
        doc.set("pooling", self.pooling);
        doc.set("leaky_slope", self.leaky_slope);
        doc.set("pad_to", self.pad_to.map_or("none".to_string(), |p| p.to_string()));
    }

    pub fn from_kv(doc: &KvDoc, base: Self) -> Result<Self> {
        let pad_to = match doc.raw("pad_to") {
            None => base.pad_to,
            Some("none") => None,
            Some(_) => Some(doc.parse_required("pad_to")?),
        };
        Ok(Self {
            encoder_channels: doc.get_list("encoder_channels")?.unwrap_or(base.encoder_channels),
            pooling: doc.get_or("pooling", base.pooling)?,
            leaky_slope: doc.get_or("leaky_slope", base.leaky_slope)?,
            pad_to,
            input_px: base.input_px,
        })
    }
}

/// He-uniform weights (`limit = sqrt(6 / fan_in)`) and a zero bias.
fn weighted<T: Scalar>(kind: LayerKind, shape: &[usize], outputs: usize, fan_in: usize, seed: u64, index: usize) -> LayerDescriptor<T> {
    let mut rng = rng_for(seed, index as u64);
    let limit = (6.0 / fan_in as f64).sqrt();
    let w = Tensor::from_fn(shape, |_| T::of(rng.random_range(-limit..limit)));
    let mut layer = LayerDescriptor::new(kind);
    layer.params = vec![w, Tensor::zeros(&[outputs])];
    layer
}

fn conv<T: Scalar>(k: usize, cin: usize, cout: usize, seed: u64, index: usize) -> LayerDescriptor<T> {
    let kind = if k == 1 { LayerKind::Conv1x1 } else { LayerKind::Conv3x3 };
    weighted(kind, &[cout, cin, k, k], cout, cin * k * k, seed, index)
}

fn dense_layer<T: Scalar>(din: usize, dout: usize, seed: u64, index: usize) -> LayerDescriptor<T> {
    weighted(LayerKind::Dense, &[din, dout], dout, din, seed, index)
}

fn batch_norm<T: Scalar>(c: usize) -> LayerDescriptor<T> {
    let h = BnHyper::default();
    let mut layer = LayerDescriptor::new(LayerKind::BatchNorm)
        .with_hyper("epsilon", h.epsilon)
        .with_hyper("momentum", h.momentum);
    layer.params = vec![Tensor::full(&[c], T::one()), Tensor::zeros(&[c])];
    layer.state = vec![Tensor::zeros(&[c]), Tensor::full(&[c], T::one()), Tensor::zeros(&[1])];
    layer
}

struct Builder<T: Scalar> {
    layers: Vec<LayerDescriptor<T>>,
    seed: u64,
}

impl<T: Scalar> Builder<T> {
    fn push(&mut self, layer: LayerDescriptor<T>) {
        self.layers.push(layer);
    }

    fn conv_block(&mut self, k: usize, cin: usize, cout: usize, slope: f64) {
        let i = self.layers.len();
        self.push(conv(k, cin, cout, self.seed, i));
        self.push(batch_norm(cout));
        self.push(activation_layer(ActivationFn::LeakyRelu { slope }));
    }
}

/// `[conv3x3 -> batch norm -> leaky ReLU]` per conv entry, global average
/// pooling, `[dropout -> dense -> leaky ReLU]` per dense entry, and a final
/// dense layer with a sigmoid (binary) or softmax (multiclass) head.
pub fn build_texture_net<T: Scalar>(cfg: &TextureNetConfig, seed: u64) -> Result<LayerStack<T>> {
    cfg.validate()?;
    let mut b = Builder { layers: Vec::new(), seed };
    let mut c = 1;
    for &k in &cfg.conv_channels {
        b.conv_block(3, c, k, cfg.leaky_slope);
        c = k;
    }
    b.push(LayerDescriptor::new(LayerKind::GlobalAvgPool));
    for &d in &cfg.dense_sizes {
        b.push(LayerDescriptor::new(LayerKind::Dropout).with_hyper("rate", cfg.dropout_rate));
        let i = b.layers.len();
        b.push(dense_layer(c, d, seed, i));
        b.push(activation_layer(ActivationFn::LeakyRelu { slope: cfg.leaky_slope }));
        c = d;
    }
    let i = b.layers.len();
    b.push(dense_layer(c, cfg.head.outputs(), seed, i));
    b.push(activation_layer(match cfg.head {
        Head::Binary => ActivationFn::Sigmoid,
        Head::Multiclass(_) => ActivationFn::Softmax,
    }));
    Ok(LayerStack {
        layers: b.layers,
        head: cfg.head,
        input_shape: vec![1, PATCH_PX, PATCH_PX],
        heatmap_tap: None,
    })
}

/// U-net with a global pooling + sigmoid head. The pixel-wise map is the
/// output of the final 1x1 convolution (after cropping, when padded).
pub fn build_heatmap_net<T: Scalar>(cfg: &HeatmapNetConfig, seed: u64) -> Result<LayerStack<T>> {
    if cfg.encoder_channels.is_empty() || cfg.encoder_channels.contains(&0) {
        return Err(Error::invalid("encoder_channels must be a non-empty list of positive counts"));
    }
    let levels = cfg.encoder_channels.len() as u32;
    let side = cfg.pad_to.unwrap_or(cfg.input_px);
    if side < cfg.input_px {
        return Err(Error::invalid(format!("pad_to {side} is smaller than the input {}", cfg.input_px)));
    }
    if side % 2usize.pow(levels) != 0 {
        return Err(Error::invalid(format!(
            "spatial size {side} is not divisible by 2^{levels} for {levels} encoder levels"
        )));
    }
    let extra = side - cfg.input_px;
    let pad = Padding {
        top: extra / 2,
        bottom: extra - extra / 2,
        left: extra / 2,
        right: extra - extra / 2,
    };
    let slope = cfg.leaky_slope;
    let mut b = Builder { layers: Vec::new(), seed };
    if extra > 0 {
        b.push(padding_layer(LayerKind::EdgePad, pad));
    }
    let mut c = 1;
    for &k in &cfg.encoder_channels {
        b.conv_block(3, c, k, slope);
        b.conv_block(3, k, k, slope);
        b.push(LayerDescriptor::new(LayerKind::SkipPush));
        b.push(LayerDescriptor::new(LayerKind::MeanPool2x2));
        c = k;
    }
    let bottom = 2 * c;
    b.conv_block(3, c, bottom, slope);
    b.conv_block(3, bottom, bottom, slope);
    c = bottom;
    for &k in cfg.encoder_channels.iter().rev() {
        b.push(LayerDescriptor::new(LayerKind::Upsample2x));
        b.push(LayerDescriptor::new(LayerKind::SkipConcat));
        b.conv_block(3, c + k, k, slope);
        b.conv_block(3, k, k, slope);
        c = k;
    }
    let i = b.layers.len();
    b.push(conv(1, c, 1, seed, i));
    if extra > 0 {
        b.push(padding_layer(LayerKind::Crop, pad));
    }
    let tap = b.layers.len() - 1;
    b.push(LayerDescriptor::new(match cfg.pooling {
        GlobalPooling::Avg => LayerKind::GlobalAvgPool,
        GlobalPooling::Max => LayerKind::GlobalMaxPool,
    }));
    b.push(activation_layer(ActivationFn::Sigmoid));
    Ok(LayerStack {
        layers: b.layers,
        head: Head::Binary,
        input_shape: vec![1, cfg.input_px, cfg.input_px],
        heatmap_tap: Some(tap),
    })
}
