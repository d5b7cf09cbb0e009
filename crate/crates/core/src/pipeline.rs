//! Pipeline files: TOML documents that declare a graph node by node and name
//! the output sets to serve.
//!
//! ```toml
//! version = 1
//! seed = 7
//!
//! [[nodes]]
//! name = "x_y"
//! kind = "catalog_input"
//! params = { modalities = ["flair", "gt"] }
//!
//! [[nodes]]
//! name = "flip"
//! kind = "flip"
//! n = 2
//! inputs = ["x_y"]
//! params = { flip_probabilities = [0.5, 0.0, 0.0] }
//!
//! [[nodes]]
//! name = "crop"
//! kind = "random_crop"
//! n = 4
//! inputs = ["flip"]
//! params = { sizes = [[16, 16, 16]] }
//!
//! [[nodes]]
//! name = "pred"
//! kind = "model"
//! inputs = ["crop:0"]
//! model = { model_kind = "box_mean", params = { kernel = 3 } }
//!
//! [sets]
//! train = ["pred", "crop"]
//! ```
//!
//! Connections are written `node` (slot 0) or `node:slot` and may only point
//! at nodes declared earlier. `n` is a positive count or `"all"`; it defaults
//! to one emission per input, or one per tile for grid crops. A model is
//! given inline by kind and parameters, or by reference:
//! `{ model_kind, sha256, num_outputs, file }`. A referenced model whose file
//! does not exist stays detached.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use indexmap::IndexMap;
use serde::Deserialize;

use crate::batching::PipelineBundle;
use crate::catalog::{load_catalog, resolve};
use crate::error::{bail, Error, Result};
use crate::graph::serial::{from_repr, KindRepr};
use crate::graph::{Connection, Graph, NodeId};
use crate::model::{model_hash, ModelRegistry};
use crate::nifti_io::write_sample;
use crate::sampling::Identifier;
use crate::transformers::{Kind, ModelSlot, Multiplicity};

pub const PIPELINE_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum Count {
    Count(usize),
    Word(String),
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum ModelSpec {
    Reference {
        model_kind: String,
        sha256: String,
        num_outputs: usize,
        file: String,
    },
    Inline {
        model_kind: String,
        #[serde(default)]
        params: Option<toml::Value>,
        /// Defaults to 1; checked against the decoded model.
        #[serde(default)]
        num_outputs: Option<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub name: String,
    pub kind: String,
    #[serde(default)]
    pub n: Option<Count>,
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(default)]
    pub references: Vec<String>,
    #[serde(default)]
    pub params: Option<toml::Value>,
    #[serde(default)]
    pub model: Option<ModelSpec>,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSpec {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    pub nodes: Vec<NodeSpec>,
    pub sets: IndexMap<String, Vec<String>>,
}

/// A built pipeline: the graph plus its named output sets.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub graph: Graph,
    pub sets: IndexMap<String, Vec<Connection>>,
    pub seed: u64,
}

impl Pipeline {
    pub fn bundle(&self) -> Result<PipelineBundle> {
        let sets: Vec<(&str, Vec<Connection>)> =
            self.sets.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
        PipelineBundle::new(&self.graph, &sets, self.seed)
    }
}

fn split_port(port: &str) -> Result<(&str, usize)> {
    match port.rsplit_once(':') {
        None => Ok((port, 0)),
        Some((name, slot)) => match slot.parse() {
            Ok(s) => Ok((name, s)),
            Err(_) => bail!(Format, "bad connection {port:?}: slot must be a number"),
        },
    }
}

fn multiplicity(kind: &Kind, n: &Option<Count>) -> Result<Multiplicity> {
    Ok(match n {
        None => kind.default_multiplicity(),
        Some(Count::Count(c)) => Multiplicity::Count(*c),
        Some(Count::Word(w)) if w == "all" => Multiplicity::AllTiles,
        Some(Count::Word(w)) => bail!(Format, "n must be a count or \"all\", got {w:?}"),
    })
}

impl PipelineSpec {
    /// Parses and checks the document structure. Node kinds and parameters
    /// are checked here too; models are only decoded by [`Self::build`].
    pub fn parse(text: &str) -> Result<Self> {
        let spec: PipelineSpec =
            toml::from_str(text).map_err(|e| Error::Format(format!("pipeline: {e}")))?;
        if spec.version != PIPELINE_FORMAT_VERSION {
            bail!(
                Format,
                "unsupported pipeline version {} (expected {PIPELINE_FORMAT_VERSION})",
                spec.version
            );
        }
        spec.build_with(|_| Ok(None))?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        PipelineSpec::parse(&text)
    }

    /// Builds the graph, decoding inline models and referenced model files
    /// (relative to `base`) through `registry`.
    pub fn build(&self, base: &Path, registry: &ModelRegistry) -> Result<Pipeline> {
        self.build_with(|spec| {
            let slot = match spec {
                ModelSpec::Inline { model_kind, params, num_outputs } => {
                    let bytes = serde_json::to_vec(&params.clone().unwrap_or(toml::Value::Table(Default::default())))
                        .map_err(|e| Error::Format(e.to_string()))?;
                    let slot = ModelSlot::new(registry.decode(model_kind, &bytes)?);
                    if slot.num_outputs != num_outputs.unwrap_or(1) {
                        bail!(
                            Format,
                            "model {model_kind:?} has {} outputs, the pipeline declares {}",
                            slot.num_outputs,
                            num_outputs.unwrap_or(1)
                        );
                    }
                    slot
                }
                ModelSpec::Reference { model_kind, sha256, num_outputs, file } => {
                    let path = resolve(base, file);
                    let instance = match std::fs::read(&path) {
                        Ok(bytes) => {
                            let model = registry.decode(model_kind, &bytes)?;
                            let got = model_hash(model.as_ref());
                            if got != *sha256 {
                                bail!(Format, "{} hashes to {got}, expected {sha256}", path.display());
                            }
                            Some(model)
                        }
                        Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
                        Err(e) => return Err(Error::io(&path, e)),
                    };
                    if instance.as_ref().is_some_and(|m| m.num_outputs() != *num_outputs) {
                        bail!(Format, "{} does not have {num_outputs} outputs", path.display());
                    }
                    ModelSlot {
                        instance,
                        ..detached(model_kind, sha256.clone(), *num_outputs)?
                    }
                }
            };
            Ok(Some(slot))
        })
    }

    fn build_with(&self, mut model: impl FnMut(&ModelSpec) -> Result<Option<ModelSlot>>) -> Result<Pipeline> {
        let mut graph = Graph::new();
        let mut names: IndexMap<&str, NodeId> = IndexMap::new();
        let resolve_port = |graph: &Graph, names: &IndexMap<&str, NodeId>, port: &str| -> Result<Connection> {
            let (name, slot) = split_port(port)?;
            let Some(id) = names.get(name) else {
                bail!(Format, "connection {port:?} names an unknown or later node");
            };
            match graph.outputs(*id).get(slot) {
                Some(c) => Ok(*c),
                None => bail!(Format, "connection {port:?} names a missing slot"),
            }
        };
        for node in &self.nodes {
            let ctx = |e: Error| match e {
                Error::Argument(m) | Error::Format(m) => Error::Format(format!("node {:?}: {m}", node.name)),
                other => other,
            };
            let kind = if node.kind == "model" {
                if node.params.is_some() {
                    bail!(Format, "node {:?}: model parameters go in `model`", node.name);
                }
                let Some(spec) = &node.model else {
                    bail!(Format, "node {:?}: model nodes need a `model` entry", node.name);
                };
                match model(spec).map_err(ctx)? {
                    Some(slot) => Kind::Model(slot),
                    None => Kind::Model(placeholder(spec)?),
                }
            } else {
                if node.model.is_some() {
                    bail!(Format, "node {:?}: only model nodes take `model`", node.name);
                }
                let tagged = |params: Option<serde_json::Value>| {
                    let mut map = serde_json::Map::new();
                    map.insert("type".into(), node.kind.clone().into());
                    if let Some(p) = params {
                        map.insert("params".into(), p);
                    }
                    serde_json::from_value::<KindRepr>(map.into())
                };
                let repr = match &node.params {
                    Some(p) => {
                        tagged(Some(serde_json::to_value(p).map_err(|e| Error::Format(e.to_string()))?))
                    }
                    // Kinds whose parameters all have defaults may omit them.
                    None => tagged(None).or_else(|_| tagged(Some(serde_json::json!({})))),
                }
                .map_err(|e| Error::Format(format!("node {:?}: {e}", node.name)))?;
                from_repr(repr).map_err(ctx)?
            };
            let n = multiplicity(&kind, &node.n).map_err(ctx)?;
            let references = node
                .references
                .iter()
                .map(|p| resolve_port(&graph, &names, p))
                .collect::<Result<Vec<_>>>()
                .map_err(ctx)?;
            let inputs = node
                .inputs
                .iter()
                .map(|p| resolve_port(&graph, &names, p))
                .collect::<Result<Vec<_>>>()
                .map_err(ctx)?;
            let is_input = kind.is_input();
            let id = graph.add_node(kind, n, &references).map_err(ctx)?;
            if is_input != inputs.is_empty() {
                bail!(
                    Format,
                    "node {:?}: {}",
                    node.name,
                    if is_input { "input nodes take no inputs" } else { "no inputs given" }
                );
            }
            if !is_input {
                graph.apply(id, &inputs).map_err(ctx)?;
            }
            if names.insert(node.name.as_str(), id).is_some() {
                bail!(Format, "duplicate node name {:?}", node.name);
            }
        }
        if self.sets.is_empty() {
            bail!(Format, "pipeline declares no output sets");
        }
        let mut sets = IndexMap::new();
        for (key, ports) in &self.sets {
            if ports.is_empty() {
                bail!(Format, "output set {key:?} is empty");
            }
            let conns = ports
                .iter()
                .map(|p| resolve_port(&graph, &names, p))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| Error::Format(format!("set {key:?}: {e}")))?;
            sets.insert(key.clone(), conns);
        }
        Ok(Pipeline { graph, sets, seed: self.seed })
    }
}

/// Evaluates output set `set` of the pipeline file for one record of the
/// catalog file (`dataset/case/record`) and writes every sample to `out` as
/// `<set>_<step>_<slot>.nii.gz`, indices zero-padded to four digits. Lists
/// with several samples add `_i<index>`, batched samples `_b<element>`.
/// Returns the number of steps.
pub fn run_to_directory(
    pipeline: &Path,
    catalog: &Path,
    identifier: &str,
    set: &str,
    out: &Path,
    seed: Option<u64>,
) -> Result<usize> {
    let spec = PipelineSpec::load(pipeline)?;
    let base = pipeline.parent().unwrap_or_else(|| Path::new("."));
    let mut built = spec.build(base, &ModelRegistry::with_builtins())?;
    if let Some(seed) = seed {
        built.seed = seed;
    }
    let mut creator = built.bundle()?.creator(set)?;
    let parts: Vec<&str> = identifier.split('/').collect();
    let [dataset, case, record] = parts[..] else {
        bail!(Argument, "identifier {identifier:?} is not dataset/case/record");
    };
    let id = Identifier::catalog(Arc::new(load_catalog(catalog)?), dataset, case, record)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut steps = 0;
    for (step, values) in creator.eval(&id)?.enumerate() {
        steps += 1;
        for (slot, samples) in values?.iter().enumerate() {
            for (k, sample) in samples.iter().enumerate() {
                let batch = sample.unbatch();
                for (b, element) in batch.iter().enumerate() {
                    let mut name = format!("{set}_{step:04}_{slot:04}");
                    if samples.len() > 1 {
                        let _ = write!(name, "_i{k:04}");
                    }
                    if batch.len() > 1 {
                        let _ = write!(name, "_b{b:04}");
                    }
                    write_sample(out.join(format!("{name}.nii.gz")), element)?;
                }
            }
        }
    }
    Ok(steps)
}

/// Detached slot used while only checking structure.
fn placeholder(spec: &ModelSpec) -> Result<ModelSlot> {
    Ok(match spec {
        ModelSpec::Inline { model_kind, num_outputs, .. } => {
            detached(model_kind, String::new(), num_outputs.unwrap_or(1))?
        }
        ModelSpec::Reference { model_kind, sha256, num_outputs, .. } => {
            detached(model_kind, sha256.clone(), *num_outputs)?
        }
    })
}

fn detached(model_kind: &str, sha256: String, num_outputs: usize) -> Result<ModelSlot> {
    if num_outputs == 0 {
        bail!(Format, "model with no outputs");
    }
    if !sha256.is_empty() && (sha256.len() != 64 || !sha256.bytes().all(|b| b.is_ascii_hexdigit())) {
        bail!(Format, "model hash {sha256:?} is not a sha256 digest");
    }
    Ok(ModelSlot {
        model_kind: model_kind.to_owned(),
        sha256,
        num_outputs,
        instance: None,
    })
}
