//! JSON encoding of traced node tables.
//!
//! Model nodes store a reference (kind, content hash, weight file name), never
//! the weights. Encoding is deterministic, so load followed by save
//! reproduces the original bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::creator::{NodeTable, TableNode};
use super::{Connection, Creator, DeclaredShape, NodeDef};
use crate::error::{bail, Error, Result};
use crate::model::ModelRegistry;
use crate::transformers::{
    AffineDeformation, Buffer, Crop, Flip, GridCrop, Kind, ModelSlot, Multiplicity, Put,
    RandomCrop, Threshold,
};

pub const CREATOR_FORMAT: &str = "voxflow-creator";
pub const CREATOR_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct Port {
    pub node: String,
    pub slot: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct ModelRef {
    pub model_kind: String,
    pub sha256: String,
    pub num_outputs: usize,
    pub file: String,
}

impl ModelRef {
    pub fn file_name(kind: &str, sha256: &str) -> String {
        format!("{kind}-{}.model", &sha256[..sha256.len().min(16)])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "params", rename_all = "snake_case")]
pub(crate) enum KindRepr {
    CatalogInput { modalities: Vec<String> },
    DirectInput,
    Split { indices: Vec<usize> },
    Group,
    AffineDeformation(AffineDeformation),
    Flip(Flip),
    Threshold(Threshold),
    RandomCrop(RandomCrop),
    GridCrop(GridCrop),
    Crop(Crop),
    Buffer(Buffer),
    Put(Put),
    Model(ModelRef),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct FileNode {
    pub name: String,
    pub kind: KindRepr,
    /// `null` means one emission per grid tile.
    pub n: Option<usize>,
    pub inputs: Vec<Port>,
    pub references: Vec<Port>,
    pub declared_shapes: Vec<DeclaredShape>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreatorFile {
    format: String,
    version: u32,
    seed: u64,
    nodes: Vec<FileNode>,
    outputs: Vec<Port>,
}

fn to_repr(kind: &Kind) -> KindRepr {
    match kind.clone() {
        Kind::CatalogInput { modalities } => KindRepr::CatalogInput { modalities },
        Kind::DirectInput => KindRepr::DirectInput,
        Kind::Split { indices } => KindRepr::Split { indices },
        Kind::Group => KindRepr::Group,
        Kind::AffineDeformation(p) => KindRepr::AffineDeformation(p),
        Kind::Flip(p) => KindRepr::Flip(p),
        Kind::Threshold(p) => KindRepr::Threshold(p),
        Kind::RandomCrop(p) => KindRepr::RandomCrop(p),
        Kind::GridCrop(p) => KindRepr::GridCrop(p),
        Kind::Crop(p) => KindRepr::Crop(p),
        Kind::Buffer(p) => KindRepr::Buffer(p),
        Kind::Put(p) => KindRepr::Put(p),
        Kind::Model(slot) => KindRepr::Model(ModelRef {
            file: ModelRef::file_name(&slot.model_kind, &slot.sha256),
            model_kind: slot.model_kind,
            sha256: slot.sha256,
            num_outputs: slot.num_outputs,
        }),
    }
}

pub(crate) fn from_repr(repr: KindRepr) -> Result<Kind> {
    Ok(match repr {
        KindRepr::CatalogInput { modalities } => Kind::CatalogInput { modalities },
        KindRepr::DirectInput => Kind::DirectInput,
        KindRepr::Split { indices } => Kind::Split { indices },
        KindRepr::Group => Kind::Group,
        KindRepr::AffineDeformation(p) => Kind::AffineDeformation(p),
        KindRepr::Flip(p) => Kind::Flip(p),
        KindRepr::Threshold(p) => Kind::Threshold(p),
        KindRepr::RandomCrop(p) => Kind::RandomCrop(p),
        KindRepr::GridCrop(p) => Kind::GridCrop(p),
        KindRepr::Crop(p) => Kind::Crop(p),
        KindRepr::Buffer(p) => Kind::Buffer(p),
        KindRepr::Put(p) => Kind::Put(p),
        KindRepr::Model(r) => {
            if r.num_outputs == 0 {
                bail!(Format, "model reference with no outputs");
            }
            if r.sha256.len() != 64 || !r.sha256.bytes().all(|b| b.is_ascii_hexdigit()) {
                bail!(Format, "model hash {:?} is not a sha256 digest", r.sha256);
            }
            if r.file != ModelRef::file_name(&r.model_kind, &r.sha256) {
                bail!(Format, "model file name {:?} does not match its hash", r.file);
            }
            Kind::Model(ModelSlot {
                model_kind: r.model_kind,
                sha256: r.sha256,
                num_outputs: r.num_outputs,
                instance: None,
            })
        }
    })
}

pub(crate) fn encode_nodes(table: &NodeTable) -> Vec<FileNode> {
    let port = |c: &Connection| Port {
        node: table[c.node].name.clone(),
        slot: c.slot,
    };
    table
        .iter()
        .map(|n| FileNode {
            name: n.name.clone(),
            kind: to_repr(&n.def.kind),
            n: n.def.n.as_option(),
            inputs: n.def.inputs.iter().map(port).collect(),
            references: n.def.references.iter().map(port).collect(),
            declared_shapes: n.def.declared_shapes.clone(),
        })
        .collect()
}

pub(crate) fn encode_ports(table: &NodeTable, ports: &[Connection]) -> Vec<Port> {
    ports
        .iter()
        .map(|c| Port {
            node: table[c.node].name.clone(),
            slot: c.slot,
        })
        .collect()
}

/// Rebuilds a table; every connection must point at an earlier node, which
/// also rules out cycles.
pub(crate) fn decode_nodes(nodes: Vec<FileNode>) -> Result<(NodeTable, BTreeMap<String, usize>)> {
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    let mut table: NodeTable = Vec::with_capacity(nodes.len());
    for node in nodes {
        let resolve = |p: &Port, table: &NodeTable| -> Result<Connection> {
            let Some(&i) = index.get(&p.node) else {
                bail!(Format, "{} refers to unknown or later node {:?}", node.name, p.node);
            };
            if p.slot >= table[i].def.arity() {
                bail!(Format, "{} refers to missing slot {}:{}", node.name, p.node, p.slot);
            }
            Ok(Connection { node: i, slot: p.slot })
        };
        let inputs = node.inputs.iter().map(|p| resolve(p, &table)).collect::<Result<Vec<_>>>()?;
        let references = node
            .references
            .iter()
            .map(|p| resolve(p, &table))
            .collect::<Result<Vec<_>>>()?;
        let kind = from_repr(node.kind)?;
        let n = Multiplicity::from_option(node.n);
        kind.validate(n, references.len())
            .map_err(|e| Error::Format(format!("{}: {e}", node.name)))?;
        if kind.is_input() != inputs.is_empty() {
            bail!(Format, "{} has an invalid number of inputs", node.name);
        }
        if index.insert(node.name.clone(), table.len()).is_some() {
            bail!(Format, "duplicate node name {:?}", node.name);
        }
        table.push(TableNode {
            name: node.name,
            def: NodeDef {
                kind,
                n,
                inputs,
                references,
                declared_shapes: node.declared_shapes,
            },
        });
    }
    Ok((table, index))
}

pub(crate) fn decode_ports(
    table: &NodeTable,
    index: &BTreeMap<String, usize>,
    ports: &[Port],
) -> Result<Vec<Connection>> {
    ports
        .iter()
        .map(|p| match index.get(&p.node) {
            Some(&i) if p.slot < table[i].def.arity() => Ok(Connection { node: i, slot: p.slot }),
            _ => bail!(Format, "output {}:{} does not exist", p.node, p.slot),
        })
        .collect()
}

impl Creator {
    /// Serialized creator; model weights are not included.
    pub fn to_bytes(&self) -> Vec<u8> {
        let file = CreatorFile {
            format: CREATOR_FORMAT.to_owned(),
            version: CREATOR_FORMAT_VERSION,
            seed: self.seed(),
            nodes: encode_nodes(&self.table),
            outputs: encode_ports(&self.table, &self.outputs),
        };
        let mut bytes = serde_json::to_vec_pretty(&file).expect("creator file serializes");
        bytes.push(b'\n');
        bytes
    }

    /// Decodes a creator; model nodes come back detached.
    pub fn from_bytes(bytes: &[u8]) -> Result<Creator> {
        let file: CreatorFile =
            serde_json::from_slice(bytes).map_err(|e| Error::Format(format!("creator: {e}")))?;
        if file.format != CREATOR_FORMAT {
            bail!(Format, "not a creator file (format {:?})", file.format);
        }
        if file.version != CREATOR_FORMAT_VERSION {
            bail!(
                Format,
                "unsupported creator version {} (expected {CREATOR_FORMAT_VERSION})",
                file.version
            );
        }
        let (table, index) = decode_nodes(file.nodes)?;
        let outputs = decode_ports(&table, &index, &file.outputs)?;
        if outputs.is_empty() {
            bail!(Format, "creator requests no outputs");
        }
        Ok(Creator::from_table(table, outputs, file.seed))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    /// Writes the weights of every attached model into `dir`, under the file
    /// names recorded in the creator.
    pub fn save_models(&self, dir: impl AsRef<Path>) -> Result<()> {
        for model in self.models() {
            let hash = crate::model::model_hash(model.as_ref());
            let path = dir.as_ref().join(ModelRef::file_name(model.kind(), &hash));
            std::fs::write(&path, model.to_bytes()).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    /// Reads a creator and attaches every model whose weight file sits next
    /// to it with a matching hash. Other model nodes stay detached.
    pub fn load(path: impl AsRef<Path>, registry: &ModelRegistry) -> Result<Creator> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut creator = Creator::from_bytes(&bytes)?;
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        creator.attach_models_from(dir, registry)?;
        Ok(creator)
    }

    /// Attaches detached models from weight files in `dir`; missing files
    /// are skipped, files with the wrong hash are an error.
    pub fn attach_models_from(&mut self, dir: impl AsRef<Path>, registry: &ModelRegistry) -> Result<usize> {
        let wanted: Vec<(String, String)> = self
            .table
            .iter()
            .filter_map(|n| match &n.def.kind {
                Kind::Model(slot) if slot.instance.is_none() => {
                    Some((slot.model_kind.clone(), slot.sha256.clone()))
                }
                _ => None,
            })
            .collect();
        let mut attached = 0;
        for (kind, hash) in wanted {
            if !self.detached_models().iter().any(|(_, h)| *h == hash) {
                continue;
            }
            let path = dir.as_ref().join(ModelRef::file_name(&kind, &hash));
            let bytes = match std::fs::read(&path) {
                Ok(b) => b,
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => continue,
                Err(e) => return Err(Error::io(&path, e)),
            };
            let model = registry.decode(&kind, &bytes)?;
            let got = crate::model::model_hash(model.as_ref());
            if got != hash {
                bail!(
                    Format,
                    "{} holds a model with hash {got}, expected {hash}",
                    path.display()
                );
            }
            attached += self.attach_model(model)?;
        }
        Ok(attached)
    }
}
