//! Named output sets over one shared node table, saved as a single file
//! together with the weights of every attached model.

use std::collections::BTreeSet;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::graph::serial::{decode_nodes, decode_ports, encode_nodes, encode_ports, FileNode, Port};
use crate::graph::{trace, Connection, Creator, Graph, NodeTable};
use crate::model::{model_hash, Model, ModelRegistry};
use crate::transformers::Kind;

pub const BUNDLE_FORMAT: &str = "voxflow-bundle";
pub const BUNDLE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Blob {
    model_kind: String,
    sha256: String,
    data: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedSet {
    name: String,
    outputs: Vec<Port>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleFile {
    format: String,
    version: u32,
    seed: u64,
    nodes: Vec<FileNode>,
    sets: Vec<NamedSet>,
    models: Vec<Blob>,
}

/// Several named groups of requested connections, e.g. `"train"` and
/// `"full_val"`, that share nodes.
#[derive(Clone, Debug)]
pub struct PipelineBundle {
    table: NodeTable,
    sets: IndexMap<String, Vec<Connection>>,
    seed: u64,
}

impl PipelineBundle {
    /// Traces the union of all sets once. Keys must be unique and every set
    /// non-empty.
    pub fn new<S: AsRef<str>>(graph: &Graph, sets: &[(S, Vec<Connection>)], seed: u64) -> Result<Self> {
        if sets.is_empty() {
            bail!(Argument, "a bundle needs at least one output set");
        }
        let mut all = Vec::new();
        let mut lens = Vec::new();
        for (key, conns) in sets {
            if conns.is_empty() {
                bail!(Argument, "output set {:?} is empty", key.as_ref());
            }
            all.extend_from_slice(conns);
            lens.push(conns.len());
        }
        let (table, remapped) = trace(&graph.nodes, &all)?;
        let mut named = IndexMap::new();
        let mut rest = remapped.as_slice();
        for ((key, _), len) in sets.iter().zip(lens) {
            let (head, tail) = rest.split_at(len);
            rest = tail;
            if named.insert(key.as_ref().to_owned(), head.to_vec()).is_some() {
                bail!(Argument, "duplicate output set {:?}", key.as_ref());
            }
        }
        Ok(PipelineBundle { table, sets: named, seed })
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.sets.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }

    /// Number of nodes in the shared table.
    pub fn num_nodes(&self) -> usize {
        self.table.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Number of requested connections in set `key`.
    pub fn set_len(&self, key: &str) -> Result<usize> {
        self.set(key).map(<[_]>::len)
    }

    fn set(&self, key: &str) -> Result<&[Connection]> {
        match self.sets.get(key) {
            Some(c) => Ok(c),
            None => bail!(
                Lookup,
                "no output set {key:?} (available: {})",
                self.sets.keys().cloned().collect::<Vec<_>>().join(", ")
            ),
        }
    }

    /// A creator over set `key`, traced from the shared table. Attached
    /// models are shared with the bundle.
    pub fn creator(&self, key: &str) -> Result<Creator> {
        let defs: Vec<_> = self.table.iter().map(|n| n.def.clone()).collect();
        let (table, outputs) = trace(&defs, self.set(key)?)?;
        Ok(Creator::from_table(table, outputs, self.seed))
    }

    /// Attaches `model` to every model node with its hash.
    pub fn attach_model(&mut self, model: std::sync::Arc<dyn Model>) -> Result<usize> {
        let hash = model_hash(model.as_ref());
        let mut attached = 0;
        for node in &mut self.table {
            if let Kind::Model(slot) = &mut node.def.kind {
                if slot.sha256 == hash {
                    slot.instance = Some(model.clone());
                    attached += 1;
                }
            }
        }
        if attached == 0 {
            bail!(Lookup, "no model node expects a model with hash {hash}");
        }
        Ok(attached)
    }

    /// Names of model nodes that have no instance attached.
    pub fn detached_models(&self) -> Vec<&str> {
        self.table
            .iter()
            .filter(|n| matches!(&n.def.kind, Kind::Model(s) if s.instance.is_none()))
            .map(|n| n.name.as_str())
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut seen = BTreeSet::new();
        let models = self
            .table
            .iter()
            .filter_map(|n| match &n.def.kind {
                Kind::Model(slot) => slot.instance.as_ref().map(|m| (slot, m)),
                _ => None,
            })
            .filter(|(slot, _)| seen.insert(slot.sha256.clone()))
            .map(|(slot, m)| Blob {
                model_kind: slot.model_kind.clone(),
                sha256: slot.sha256.clone(),
                data: STANDARD.encode(m.to_bytes()),
            })
            .collect();
        let file = BundleFile {
            format: BUNDLE_FORMAT.to_owned(),
            version: BUNDLE_FORMAT_VERSION,
            seed: self.seed,
            nodes: encode_nodes(&self.table),
            sets: self
                .sets
                .iter()
                .map(|(k, c)| NamedSet {
                    name: k.clone(),
                    outputs: encode_ports(&self.table, c),
                })
                .collect(),
            models,
        };
        let mut bytes = serde_json::to_vec_pretty(&file).expect("bundle file serializes");
        bytes.push(b'\n');
        bytes
    }

    /// Decodes a bundle and attaches every stored model through `registry`.
    pub fn from_bytes(bytes: &[u8], registry: &ModelRegistry) -> Result<Self> {
        let file: BundleFile =
            serde_json::from_slice(bytes).map_err(|e| Error::Format(format!("bundle: {e}")))?;
        if file.format != BUNDLE_FORMAT {
            bail!(Format, "not a bundle file (format {:?})", file.format);
        }
        if file.version != BUNDLE_FORMAT_VERSION {
            bail!(
                Format,
                "unsupported bundle version {} (expected {BUNDLE_FORMAT_VERSION})",
                file.version
            );
        }
        let (table, index) = decode_nodes(file.nodes)?;
        if file.sets.is_empty() {
            bail!(Format, "bundle holds no output sets");
        }
        let mut sets = IndexMap::new();
        for set in file.sets {
            let conns = decode_ports(&table, &index, &set.outputs)?;
            if conns.is_empty() {
                bail!(Format, "output set {:?} is empty", set.name);
            }
            if sets.insert(set.name.clone(), conns).is_some() {
                bail!(Format, "duplicate output set {:?}", set.name);
            }
        }
        let mut bundle = PipelineBundle {
            table,
            sets,
            seed: file.seed,
        };
        for blob in file.models {
            let data = STANDARD
                .decode(&blob.data)
                .map_err(|e| Error::Format(format!("model {}: {e}", blob.sha256)))?;
            let model = registry.decode(&blob.model_kind, &data)?;
            let got = model_hash(model.as_ref());
            if got != blob.sha256 {
                bail!(Format, "stored model hashes to {got}, expected {}", blob.sha256);
            }
            bundle
                .attach_model(model)
                .map_err(|_| Error::Format(format!("stored model {got} is used by no node")))?;
        }
        Ok(bundle)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, registry: &ModelRegistry) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        PipelineBundle::from_bytes(&bytes, registry)
    }
}
