use std::path::{Path, PathBuf};

use lungtex::kv::{join_list, KvDoc};

pub const RUN_MANIFEST: &str = "run.manifest";

/// Provenance of one command. The timestamp comes from `SOURCE_DATE_EPOCH`
/// (0 when unset) so repeated runs write identical bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub seed: Option<u64>,
    pub config: Option<PathBuf>,
    pub inputs: Vec<PathBuf>,
    /// Written files, relative to the output location.
    pub outputs: Vec<String>,
    pub timestamp: u64,
    pub version: String,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            seed: None,
            config: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            timestamp: std::env::var("SOURCE_DATE_EPOCH")
                .ok()
                .and_then(|v| v.trim().parse().ok())
                .unwrap_or(0),
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        doc.set("command", &self.command);
        doc.set("seed", self.seed.map_or("none".to_string(), |s| s.to_string()));
        doc.set("config", self.config.as_ref().map_or("none".to_string(), |c| c.display().to_string()));
        let inputs: Vec<String> = self.inputs.iter().map(|p| p.display().to_string()).collect();
        doc.set("inputs", join_list(&inputs));
        doc.set("outputs", join_list(&self.outputs));
        doc.set("timestamp", self.timestamp);
        doc.set("version", &self.version);
        doc
    }

    pub fn save(&self, path: &Path) -> lungtex::Result<()> {
        self.to_kv().save(path)
    }
}
