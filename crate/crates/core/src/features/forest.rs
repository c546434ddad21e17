//! Random forest over feature vectors: bagging, class-weighted Gini splits
//! over a random feature subset, and averaged leaf distributions.

use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kv::KvDoc;
use crate::labels::{ClassLabel, ClassWeights};
use crate::seed::{mix_seed, rng_for};
use crate::tensor::Tensor;

pub const FOREST_MANIFEST: &str = "forest.manifest";
pub const FOREST_FORMAT_VERSION: u32 = 1;

const CLASSES: usize = ClassLabel::ALL.len();
const LEAF: i64 = -1;

#[derive(Clone, Debug, PartialEq)]
pub struct ForestConfig {
    pub tree_count: usize,
    /// 0 = unlimited.
    pub max_depth: usize,
    pub min_leaf: usize,
    /// 0 = `round(sqrt(D))`.
    pub features_per_split: usize,
    pub seed: u64,
    pub class_weights: ClassWeights,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            tree_count: 100,
            max_depth: 0,
            min_leaf: 1,
            features_per_split: 0,
            seed: 0,
            class_weights: ClassWeights::direct_default(),
        }
    }
}

impl ForestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tree_count == 0 {
            return Err(Error::invalid("tree_count must be at least 1"));
        }
        if self.min_leaf == 0 {
            return Err(Error::invalid("min_leaf must be at least 1"));
        }
        Ok(())
    }

    pub fn resolved_features(&self, dim: usize) -> usize {
        match self.features_per_split {
            0 => ((dim as f64).sqrt().round() as usize).clamp(1, dim),
            k => k.min(dim),
        }
    }

    pub fn write_kv(&self, doc: &mut KvDoc) {
        doc.set("tree_count", self.tree_count);
        doc.set("max_depth", self.max_depth);
        doc.set("min_leaf", self.min_leaf);
        doc.set("features_per_split", self.features_per_split);
        doc.set("seed", self.seed);
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
        let cfg = Self {
            tree_count: doc.get_or("tree_count", base.tree_count)?,
            max_depth: doc.get_or("max_depth", base.max_depth)?,
            min_leaf: doc.get_or("min_leaf", base.min_leaf)?,
            features_per_split: doc.get_or("features_per_split", base.features_per_split)?,
            seed: doc.get_or("seed", base.seed)?,
            class_weights: weights,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Flat node arrays. Internal nodes send `x[feature] <= threshold` left;
/// leaves carry a class distribution over `ClassLabel::ALL`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tree {
    pub feature: Vec<i64>,
    pub threshold: Vec<f32>,
    pub left: Vec<usize>,
    pub right: Vec<usize>,
    pub distribution: Vec<[f32; CLASSES]>,
}

impl Tree {
    fn leaf(&self, x: &[f32]) -> &[f32; CLASSES] {
        let mut n = 0;
        while self.feature[n] != LEAF {
            n = if x[self.feature[n] as usize] <= self.threshold[n] {
                self.left[n]
            } else {
                self.right[n]
            };
        }
        &self.distribution[n]
    }

    pub fn node_count(&self) -> usize {
        self.feature.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Forest {
    pub config: ForestConfig,
    pub feature_len: usize,
    pub trees: Vec<Tree>,
    /// Out-of-bag accuracy measured during training, if any sample was out of bag.
    pub oob_accuracy: Option<f64>,
}

struct TreeBuilder<'a, X> {
    xs: &'a [X],
    ys: &'a [usize],
    weights: [f64; CLASSES],
    cfg: &'a ForestConfig,
    mtry: usize,
    tree: Tree,
}

fn gini(mass: &[f64; CLASSES]) -> (f64, f64) {
    let total: f64 = mass.iter().sum();
    if total <= 0.0 {
        return (0.0, 0.0);
    }
    let sq: f64 = mass.iter().map(|m| (m / total).powi(2)).sum();
    (total, 1.0 - sq)
}

impl<X: AsRef<[f32]>> TreeBuilder<'_, X> {
    fn mass(&self, idx: &[usize]) -> [f64; CLASSES] {
        let mut m = [0.0; CLASSES];
        for &i in idx {
            m[self.ys[i]] += self.weights[self.ys[i]];
        }
        m
    }

    fn push_leaf(&mut self, mass: &[f64; CLASSES]) -> usize {
        let total: f64 = mass.iter().sum();
        let mut dist = [0f32; CLASSES];
        for (d, m) in dist.iter_mut().zip(mass) {
            *d = (m / total) as f32;
        }
        self.push(LEAF, 0.0, dist)
    }

    fn push(&mut self, feature: i64, threshold: f32, dist: [f32; CLASSES]) -> usize {
        let t = &mut self.tree;
        t.feature.push(feature);
        t.threshold.push(threshold);
        t.left.push(0);
        t.right.push(0);
        t.distribution.push(dist);
        t.feature.len() - 1
    }

    /// Best `(decrease, feature, threshold)` over a random feature subset.
    fn best_split(&self, idx: &[usize], parent: &[f64; CLASSES], rng: &mut impl Rng) -> Option<(f64, usize, f32)> {
        let dim = self.xs[0].as_ref().len();
        let (total, parent_gini) = gini(parent);
        let mut best: Option<(f64, usize, f32)> = None;
        let mut order: Vec<(f32, usize)> = Vec::with_capacity(idx.len());
        for f in sample(rng, dim, self.mtry).into_iter() {
            order.clear();
            order.extend(idx.iter().map(|&i| (self.xs[i].as_ref()[f], self.ys[i])));
            order.sort_by(|a, b| a.0.total_cmp(&b.0));
            let mut left = [0.0; CLASSES];
            for k in 0..order.len() - 1 {
                left[order[k].1] += self.weights[order[k].1];
                let (a, b) = (order[k].0, order[k + 1].0);
                let n_left = k + 1;
                if a == b || n_left < self.cfg.min_leaf || order.len() - n_left < self.cfg.min_leaf {
                    continue;
                }
                let mut right = *parent;
                for c in 0..CLASSES {
                    right[c] -= left[c];
                }
                let (wl, gl) = gini(&left);
                let (wr, gr) = gini(&right);
                let decrease = total * parent_gini - wl * gl - wr * gr;
                if best.is_none_or(|(d, _, _)| decrease > d) {
                    let mut t = a + (b - a) * 0.5;
                    if t >= b {
                        t = a;
                    }
                    best = Some((decrease, f, t));
                }
            }
        }
        best.filter(|(d, _, _)| *d > 1e-12 * total.max(1e-300))
    }

    fn grow(&mut self, idx: Vec<usize>, depth: usize, rng: &mut impl Rng) -> usize {
        let mass = self.mass(&idx);
        let pure = mass.iter().filter(|&&m| m > 0.0).count() <= 1;
        let depth_capped = self.cfg.max_depth > 0 && depth >= self.cfg.max_depth;
        if pure || depth_capped || idx.len() < 2 * self.cfg.min_leaf {
            return self.push_leaf(&mass);
        }
        let Some((_, f, t)) = self.best_split(&idx, &mass, rng) else {
            return self.push_leaf(&mass);
        };
        let node = self.push(f as i64, t, [0.0; CLASSES]);
        let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| self.xs[i].as_ref()[f] <= t);
        let li = self.grow(l, depth + 1, rng);
        let ri = self.grow(r, depth + 1, rng);
        self.tree.left[node] = li;
        self.tree.right[node] = ri;
        node
    }
}

fn class_index(c: ClassLabel) -> usize {
    ClassLabel::ALL.iter().position(|&k| k == c).expect("label is in ALL")
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Trains the forest; trees are grown in parallel from per-tree seeds, so
/// the result does not depend on the thread count.
pub fn rf_train<X: AsRef<[f32]> + Sync>(xs: &[X], labels: &[ClassLabel], cfg: &ForestConfig) -> Result<Forest> {
    cfg.validate()?;
    if xs.len() != labels.len() {
        return Err(Error::invalid(format!("{} feature vectors but {} labels", xs.len(), labels.len())));
    }
    let dim = xs.first().map(|x| x.as_ref().len()).unwrap_or(0);
    if dim == 0 {
        return Err(Error::invalid("training set is empty"));
    }
    if let Some(x) = xs.iter().find(|x| x.as_ref().len() != dim) {
        return Err(Error::shape(format!("feature length {} differs from {dim}", x.as_ref().len())));
    }
    if xs.iter().any(|x| x.as_ref().iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("rf_train input"));
    }
    let ys: Vec<usize> = labels.iter().map(|&c| class_index(c)).collect();
    let mut present = [false; CLASSES];
    ys.iter().for_each(|&y| present[y] = true);
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::invalid("random forest needs at least two classes in the training data"));
    }
    let mut weights = [0.0; CLASSES];
    for (c, w) in ClassLabel::ALL.iter().zip(weights.iter_mut()) {
        *w = match cfg.class_weights.get(*c) {
            Some(v) => v,
            None if present[class_index(*c)] => {
                return Err(Error::invalid(format!("no class weight for {c}")));
            }
            None => 0.0,
        };
    }
    let n = xs.len();
    let mtry = cfg.resolved_features(dim);
    let grown: Vec<(Tree, Vec<bool>)> = (0..cfg.tree_count)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng_for(cfg.seed, mix_seed(0x7ee5, t as u64));
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            let mut in_bag = vec![false; n];
            idx.iter().for_each(|&i| in_bag[i] = true);
            let mut b = TreeBuilder {
                xs,
                ys: &ys,
                weights,
                cfg,
                mtry,
                tree: Tree {
                    feature: vec![],
                    threshold: vec![],
                    left: vec![],
                    right: vec![],
                    distribution: vec![],
                },
            };
            b.grow(idx, 0, &mut rng);
            (b.tree, in_bag)
        })
        .collect();

    let mut votes = vec![[0.0f64; CLASSES]; n];
    let mut seen = vec![false; n];
    for (tree, in_bag) in &grown {
        for i in (0..n).filter(|&i| !in_bag[i]) {
            for (v, &p) in votes[i].iter_mut().zip(tree.leaf(xs[i].as_ref())) {
                *v += p as f64;
            }
            seen[i] = true;
        }
    }
    let scored = seen.iter().filter(|&&s| s).count();
    let correct = (0..n).filter(|&i| seen[i] && argmax(&votes[i]) == ys[i]).count();
    Ok(Forest {
        config: cfg.clone(),
        feature_len: dim,
        trees: grown.into_iter().map(|(t, _)| t).collect(),
        oob_accuracy: (scored > 0).then(|| correct as f64 / scored as f64),
    })
}

/// Mean of the trees' leaf distributions, indexed like `ClassLabel::ALL`.
pub fn rf_predict(forest: &Forest, x: &[f32]) -> Result<Vec<f64>> {
    if x.len() != forest.feature_len {
        return Err(Error::shape(format!(
            "feature length {} differs from the training length {}",
            x.len(),
            forest.feature_len
        )));
    }
    let mut p = vec![0.0; CLASSES];
    for tree in &forest.trees {
        for (acc, &v) in p.iter_mut().zip(tree.leaf(x)) {
            *acc += v as f64;
        }
    }
    let k = forest.trees.len() as f64;
    p.iter_mut().for_each(|v| *v /= k);
    Ok(p)
}

pub fn rf_predict_label(forest: &Forest, x: &[f32]) -> Result<ClassLabel> {
    Ok(ClassLabel::ALL[argmax(&rf_predict(forest, x)?)])
}

fn tree_file(t: usize, part: &str) -> String {
    format!("tree_{t:03}.{part}.ctxt")
}

/// Header `forest.manifest` plus per tree a `[nodes, 4]` tensor of
/// (feature, threshold, left, right) and a `[nodes, 5]` distribution tensor.
pub fn save_forest(forest: &Forest, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut doc = KvDoc::new();
    doc.set("format_version", FOREST_FORMAT_VERSION);
    doc.set("feature_len", forest.feature_len);
    doc.set("trees", forest.trees.len());
    doc.set("oob_accuracy", forest.oob_accuracy.map_or("none".to_string(), |a| a.to_string()));
    let mut cfg = KvDoc::new();
    forest.config.write_kv(&mut cfg);
    for key in cfg.keys() {
        doc.set(format!("config.{key}"), cfg.raw(key).expect("listed key"));
    }
    for (t, tree) in forest.trees.iter().enumerate() {
        let n = tree.node_count();
        if n >= 1 << 24 || forest.feature_len >= 1 << 24 {
            return Err(Error::invalid("tree too large for the node tensor format"));
        }
        let mut nodes = Vec::with_capacity(4 * n);
        for i in 0..n {
            nodes.extend([tree.feature[i] as f32, tree.threshold[i], tree.left[i] as f32, tree.right[i] as f32]);
        }
        Tensor::new(vec![n, 4], nodes)?.save(dir.join(tree_file(t, "nodes")))?;
        let dist = tree.distribution.iter().flatten().copied().collect();
        Tensor::new(vec![n, CLASSES], dist)?.save(dir.join(tree_file(t, "leaves")))?;
    }
    doc.save(dir.join(FOREST_MANIFEST))
}

pub fn load_forest(dir: &Path) -> Result<Forest> {
    let path = dir.join(FOREST_MANIFEST);
    let doc = KvDoc::load(&path)?;
    let version: u32 = doc.parse_required("format_version")?;
    if version != FOREST_FORMAT_VERSION {
        return Err(Error::Version {
            path,
            found: version,
            expected: FOREST_FORMAT_VERSION,
        });
    }
    let mut cfg_doc = KvDoc::new();
    for key in doc.keys() {
        if let Some(k) = key.strip_prefix("config.") {
            cfg_doc.set(k, doc.raw(key).expect("listed key"));
        }
    }
    let config = ForestConfig::from_kv(
        &cfg_doc,
        ForestConfig {
            class_weights: ClassWeights::new([])?,
            ..Default::default()
        },
    )?;
    let feature_len: usize = doc.parse_required("feature_len")?;
    let count: usize = doc.parse_required("trees")?;
    let oob_accuracy = match doc.require("oob_accuracy")? {
        "none" => None,
        _ => Some(doc.parse_required("oob_accuracy")?),
    };
    let mut trees = Vec::with_capacity(count);
    for t in 0..count {
        let nodes_path = dir.join(tree_file(t, "nodes"));
        let nodes = Tensor::load(&nodes_path)?;
        let leaves = Tensor::load(dir.join(tree_file(t, "leaves")))?;
        let n = match nodes.shape() {
            &[n, 4] if leaves.shape() == [n, CLASSES] && n > 0 => n,
            s => return Err(Error::format(&nodes_path, format!("bad node tensor shape {s:?}"))),
        };
        let mut tree = Tree {
            feature: vec![],
            threshold: vec![],
            left: vec![],
            right: vec![],
            distribution: vec![],
        };
        for (row, dist) in nodes.data().chunks(4).zip(leaves.data().chunks(CLASSES)) {
            let feature = row[0] as i64;
            let child_ok = |c: f32| c >= 0.0 && (c as usize) < n;
            if feature != LEAF && !(feature >= 0 && (feature as usize) < feature_len && child_ok(row[2]) && child_ok(row[3])) {
                return Err(Error::format(&nodes_path, "node references an invalid feature or child"));
            }
            tree.feature.push(feature);
            tree.threshold.push(row[1]);
            tree.left.push(row[2] as usize);
            tree.right.push(row[3] as usize);
            tree.distribution.push(dist.try_into().expect("chunk of CLASSES"));
        }
        trees.push(tree);
    }
    Ok(Forest {
        config,
        feature_len,
        trees,
        oob_accuracy,
    })
}
