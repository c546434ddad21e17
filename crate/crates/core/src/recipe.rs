//! Config-file driven training: which patches each model sees, with which
//! objective, and how config keys map onto the builders.

use std::path::Path;

use crate::data::{oversample_minority, BlobPatch, PatchSample};
use crate::error::{Error, Result};
use crate::eval::heatmap::mean_inside_outside;
use crate::features::{features_for_samples, rf_train, FeatureConfig, Forest, ForestConfig};
use crate::kv::KvDoc;
use crate::labels::{ClassLabel, ClassWeights};
use crate::model::{
    build_heatmap_net, build_texture_net, predict_heatmaps, train_classifier, Head, HeatmapNetConfig, LayerStack,
    Objective, TextureNetConfig, TrainRunConfig,
};

/// Diseased-patch replication factor of the detector and direct streams.
pub const DEFAULT_REPLICATION: usize = 16;

const RUN_KEYS: [&str; 6] = ["epochs", "seed", "learning_rate", "momentum", "batch_size", "augmentation"];
const TEXTURE_KEYS: [&str; 5] = ["conv_channels", "dense_sizes", "head", "dropout_rate", "leaky_slope"];
const HEATMAP_KEYS: [&str; 4] = ["encoder_channels", "pooling", "leaky_slope", "pad_to"];
const FOREST_KEYS: [&str; 5] = ["tree_count", "max_depth", "min_leaf", "features_per_split", "seed"];

fn check_keys(doc: &KvDoc, groups: &[&[&str]]) -> Result<()> {
    for key in doc.keys() {
        let known = key.starts_with("weight.") || groups.iter().any(|g| g.contains(&key));
        if !known {
            return Err(Error::format(doc.origin(), format!("unknown config key {key:?}")));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Detector,
    Scorer,
    Direct,
}

impl Role {
    pub fn head(self) -> Head {
        match self {
            Role::Detector => Head::Binary,
            Role::Scorer => Head::Multiclass(4),
            Role::Direct => Head::Multiclass(5),
        }
    }

    pub fn default_weights(self) -> ClassWeights {
        match self {
            Role::Detector => ClassWeights::uniform(),
            Role::Scorer => ClassWeights::scorer_default(),
            Role::Direct => ClassWeights::direct_default(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Role::Detector => "detector",
            Role::Scorer => "scorer",
            Role::Direct => "direct",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextureRecipe {
    pub role: Role,
    pub net: TextureNetConfig,
    pub run: TrainRunConfig,
    /// Copies of each diseased patch in the training stream (1 = none).
    pub replication: usize,
}

impl TextureRecipe {
    pub fn new(role: Role) -> Self {
        Self {
            role,
            net: TextureNetConfig {
                head: role.head(),
                ..Default::default()
            },
            run: TrainRunConfig {
                class_weights: role.default_weights(),
                ..Default::default()
            },
            replication: match role {
                Role::Scorer => 1,
                _ => DEFAULT_REPLICATION,
            },
        }
    }

    pub fn from_kv(role: Role, doc: &KvDoc) -> Result<Self> {
        check_keys(doc, &[&RUN_KEYS, &TEXTURE_KEYS, &["replication"]])?;
        let base = Self::new(role);
        let net = TextureNetConfig::from_kv(doc, base.net)?;
        if net.head != role.head() {
            return Err(Error::invalid(format!("the {} needs head {}, config says {}", role.name(), role.head(), net.head)));
        }
        let recipe = Self {
            role,
            net,
            run: TrainRunConfig::from_kv(doc, base.run)?,
            replication: doc.get_or("replication", base.replication)?,
        };
        if recipe.replication == 0 {
            return Err(Error::invalid("replication must be at least 1"));
        }
        Ok(recipe)
    }

    pub fn load(role: Role, path: &Path) -> Result<Self> {
        Self::from_kv(role, &KvDoc::load(path)?)
    }

    pub fn write_kv(&self, doc: &mut KvDoc) {
        self.net.write_kv(doc);
        self.run.write_kv(doc);
        doc.set("replication", self.replication);
    }

    /// The scorer sees diseased patches only; the other roles see every
    /// patch with diseased ones replicated.
    pub fn training_set(&self, patches: &[PatchSample]) -> Result<Vec<PatchSample>> {
        let set: Vec<PatchSample> = match self.role {
            Role::Scorer => patches.iter().filter(|p| p.label.is_disease()).cloned().collect(),
            _ => oversample_minority(patches, self.replication, self.run.seed),
        };
        if set.is_empty() {
            return Err(Error::invalid(format!("no training patches for the {}", self.role.name())));
        }
        Ok(set)
    }

    /// Builds and trains the network; returns it with the per-epoch losses.
    pub fn train(&self, patches: &[PatchSample]) -> Result<(LayerStack<f32>, Vec<f64>)> {
        let set = self.training_set(patches)?;
        let mut net = build_texture_net::<f32>(&self.net, self.run.seed)?;
        let history = train_classifier(&mut net, &set, &self.run, Objective::for_head(self.net.head))?;
        Ok((net, history))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapRecipe {
    pub net: HeatmapNetConfig,
    pub run: TrainRunConfig,
    pub replication: usize,
}

impl Default for HeatmapRecipe {
    fn default() -> Self {
        Self {
            net: HeatmapNetConfig::default(),
            run: TrainRunConfig::default(),
            replication: 1,
        }
    }
}

impl HeatmapRecipe {
    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        check_keys(doc, &[&RUN_KEYS, &HEATMAP_KEYS, &["replication"]])?;
        let base = Self::default();
        let recipe = Self {
            net: HeatmapNetConfig::from_kv(doc, base.net)?,
            run: TrainRunConfig::from_kv(doc, base.run)?,
            replication: doc.get_or("replication", base.replication)?,
        };
        if recipe.replication == 0 {
            return Err(Error::invalid("replication must be at least 1"));
        }
        Ok(recipe)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&KvDoc::load(path)?)
    }

    pub fn write_kv(&self, doc: &mut KvDoc) {
        self.net.write_kv(doc);
        self.run.write_kv(doc);
        doc.set("replication", self.replication);
    }

    /// Trains on patch-level present/absent labels only.
    pub fn train(&self, patches: &[PatchSample]) -> Result<(LayerStack<f32>, Vec<f64>)> {
        let set = oversample_minority(patches, self.replication, self.run.seed);
        let mut net = build_heatmap_net::<f32>(&self.net, self.run.seed)?;
        let history = train_classifier(&mut net, &set, &self.run, Objective::Dice)?;
        Ok((net, history))
    }
}

pub fn forest_config_from_kv(doc: &KvDoc) -> Result<ForestConfig> {
    check_keys(doc, &[&FOREST_KEYS])?;
    ForestConfig::from_kv(doc, ForestConfig::default())
}

/// Features with the default bank, then the forest.
pub fn train_forest(patches: &[PatchSample], cfg: &ForestConfig) -> Result<Forest> {
    let features = features_for_samples(patches, &FeatureConfig::default())?;
    let labels: Vec<ClassLabel> = patches.iter().map(|p| p.label).collect();
    rf_train(&features, &labels, cfg)
}

/// The weak-label localization task.
#[derive(Clone, Debug, PartialEq)]
pub struct BlobTask {
    pub train_patches: usize,
    pub test_patches: usize,
    pub noise: f64,
    pub train_seed: u64,
    pub test_seed: u64,
}

impl Default for BlobTask {
    fn default() -> Self {
        Self {
            train_patches: 200,
            test_patches: 100,
            noise: 0.5,
            train_seed: 11,
            test_seed: 12,
        }
    }
}

impl BlobTask {
    pub fn from_kv(doc: &KvDoc) -> Result<Self> {
        check_keys(doc, &[&["train_patches", "test_patches", "noise", "train_seed", "test_seed"]])?;
        let d = Self::default();
        Ok(Self {
            train_patches: doc.get_or("train_patches", d.train_patches)?,
            test_patches: doc.get_or("test_patches", d.test_patches)?,
            noise: doc.get_or("noise", d.noise)?,
            train_seed: doc.get_or("train_seed", d.train_seed)?,
            test_seed: doc.get_or("test_seed", d.test_seed)?,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_kv(&KvDoc::load(path)?)
    }
}

/// `(hits, positives)`: positive patches whose mean heatmap value inside the
/// blob exceeds the mean outside.
pub fn localization_hits(net: &LayerStack<f32>, test: &[BlobPatch]) -> Result<(usize, usize)> {
    let positives: Vec<&BlobPatch> = test.iter().filter(|b| b.present).collect();
    let maps = predict_heatmaps(net, &positives.iter().map(|b| &b.sample.pixels).collect::<Vec<_>>())?;
    let mut hits = 0;
    for (b, map) in positives.iter().zip(&maps) {
        let (inside, outside) = mean_inside_outside(map, &b.blob_mask)?;
        hits += (inside > outside) as usize;
    }
    Ok((hits, positives.len()))
}
