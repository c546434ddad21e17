//! Model directories: `model.manifest` (key/value) plus one tensor file per
//! parameter and state tensor.

use std::path::Path;

use super::stack::{Head, LayerDescriptor, LayerKind, LayerStack};
use crate::error::{Error, Result};
use crate::kv::{join_list, KvDoc};
use crate::tensor::Tensor;

pub const MODEL_MANIFEST: &str = "model.manifest";
pub const MODEL_FORMAT_VERSION: u32 = 1;

fn tensor_file(layer: usize, group: &str, k: usize) -> String {
    format!("layer_{layer:03}_{group}_{k}.ctxt")
}

/// Writes the network; `extra` keys (config, provenance) are stored in the
/// manifest under `meta.`.
pub fn save_model(net: &LayerStack<f32>, dir: &Path, extra: &KvDoc) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut doc = KvDoc::new();
    doc.set("format_version", MODEL_FORMAT_VERSION);
    doc.set("head", net.head);
    doc.set("input_shape", join_list(&net.input_shape));
    doc.set("heatmap_tap", net.heatmap_tap.map_or("none".to_string(), |t| t.to_string()));
    doc.set("layers", net.layers.len());
    doc.set("param_count", net.param_count());
    for (i, layer) in net.layers.iter().enumerate() {
        let p = format!("layer.{i}");
        doc.set(format!("{p}.kind"), layer.kind.name());
        for (k, v) in &layer.hyper {
            doc.set(format!("{p}.hyper.{k}"), v);
        }
        for (group, tensors) in [("param", &layer.params), ("state", &layer.state)] {
            doc.set(format!("{p}.{group}s"), tensors.len());
            for (k, t) in tensors.iter().enumerate() {
                let file = tensor_file(i, group, k);
                doc.set(format!("{p}.{group}.{k}.shape"), join_list(t.shape()));
                doc.set(format!("{p}.{group}.{k}.file"), &file);
                t.save(dir.join(&file))?;
            }
        }
    }
    for key in extra.keys() {
        doc.set(format!("meta.{key}"), extra.raw(key).expect("listed key"));
    }
    doc.save(dir.join(MODEL_MANIFEST))
}

pub fn load_model(dir: &Path) -> Result<(LayerStack<f32>, KvDoc)> {
    let path = dir.join(MODEL_MANIFEST);
    let doc = KvDoc::load(&path)?;
    let version: u32 = doc.parse_required("format_version")?;
    if version != MODEL_FORMAT_VERSION {
        return Err(Error::Version {
            path,
            found: version,
            expected: MODEL_FORMAT_VERSION,
        });
    }
    let head: Head = doc
        .require("head")?
        .parse()
        .map_err(|e: Error| Error::format(&path, e.to_string()))?;
    let input_shape: Vec<usize> = doc.get_list("input_shape")?.unwrap_or_default();
    let heatmap_tap = match doc.require("heatmap_tap")? {
        "none" => None,
        _ => Some(doc.parse_required("heatmap_tap")?),
    };
    let n: usize = doc.parse_required("layers")?;
    let mut layers = Vec::with_capacity(n);
    for i in 0..n {
        let p = format!("layer.{i}");
        let kind_name = doc.require(&format!("{p}.kind"))?;
        let kind = LayerKind::from_name(kind_name)
            .ok_or_else(|| Error::format(&path, format!("unknown layer kind {kind_name:?}")))?;
        let mut layer = LayerDescriptor::new(kind);
        let hyper_prefix = format!("{p}.hyper.");
        for key in doc.keys() {
            if let Some(h) = key.strip_prefix(&hyper_prefix) {
                layer.hyper.insert(h.to_string(), doc.parse_required(key)?);
            }
        }
        for group in ["param", "state"] {
            let count: usize = doc.parse_required(&format!("{p}.{group}s"))?;
            let mut tensors = Vec::with_capacity(count);
            for k in 0..count {
                let shape: Vec<usize> = doc.get_list(&format!("{p}.{group}.{k}.shape"))?.unwrap_or_default();
                let file = dir.join(doc.require(&format!("{p}.{group}.{k}.file"))?);
                let t = Tensor::load(&file)?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::format(&file, format!("shape {:?} differs from manifest {shape:?}", t.shape())));
                }
                tensors.push(t);
            }
            if group == "param" {
                layer.params = tensors;
            } else {
                layer.state = tensors;
            }
        }
        layers.push(layer);
    }
    let mut meta = KvDoc::new();
    for key in doc.keys() {
        if let Some(m) = key.strip_prefix("meta.") {
            meta.set(m, doc.raw(key).expect("listed key"));
        }
    }
    let net = LayerStack {
        layers,
        head,
        input_shape,
        heatmap_tap,
    };
    if net.param_count() != doc.parse_required::<usize>("param_count")? {
        return Err(Error::format(&path, "parameter count differs from the stored tensors"));
    }
    Ok((net, meta))
}
