use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::sync::Arc;

use ndarray::ArrayView5;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{Connection, DeclaredShape, Graph, NodeDef};
use crate::error::{bail, Error, Result};
use crate::model::{shape5, Model};
use crate::sample::Sample;
use crate::sampling::Identifier;
use crate::transformers::{emit, prepare, Kind, Multiplicity, Prepared};

/// A node of a traced table: connections index earlier nodes.
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct TableNode {
    pub name: String,
    pub def: NodeDef,
}

pub(crate) type NodeTable = Vec<TableNode>;

/// Keeps the ancestors of `requested`, sorts them topologically (smallest
/// original index first among ready nodes) and names them
/// `<Kind>_<ordinal>`. Returns the table and the remapped requests.
pub(crate) fn trace(nodes: &[NodeDef], requested: &[Connection]) -> Result<(NodeTable, Vec<Connection>)> {
    if requested.is_empty() {
        bail!(Argument, "no output connection requested");
    }
    for c in requested {
        match nodes.get(c.node) {
            Some(def) if c.slot < def.arity() => {}
            _ => bail!(Argument, "requested connection {}:{} does not exist", c.node, c.slot),
        }
    }
    let mut keep = BTreeSet::new();
    let mut stack: Vec<usize> = requested.iter().map(|c| c.node).collect();
    while let Some(i) = stack.pop() {
        if keep.insert(i) {
            let def = &nodes[i];
            stack.extend(def.inputs.iter().chain(&def.references).map(|c| c.node));
        }
    }

    let mut indegree: BTreeMap<usize, usize> = keep.iter().map(|&i| (i, 0)).collect();
    let mut consumers: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in &keep {
        let deps: BTreeSet<usize> = nodes[i]
            .inputs
            .iter()
            .chain(&nodes[i].references)
            .map(|c| c.node)
            .collect();
        *indegree.get_mut(&i).expect("kept") = deps.len();
        for d in deps {
            consumers.entry(d).or_default().push(i);
        }
    }
    let mut ready: BTreeSet<usize> = indegree.iter().filter(|(_, d)| **d == 0).map(|(i, _)| *i).collect();
    let mut order = Vec::with_capacity(keep.len());
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &c in consumers.get(&i).into_iter().flatten() {
            let d = indegree.get_mut(&c).expect("kept");
            *d -= 1;
            if *d == 0 {
                ready.insert(c);
            }
        }
    }
    if order.len() != keep.len() {
        bail!(Argument, "the requested outputs depend on a cycle");
    }

    let position: BTreeMap<usize, usize> = order.iter().enumerate().map(|(p, &i)| (i, p)).collect();
    let remap = |c: &Connection| Connection {
        node: position[&c.node],
        slot: c.slot,
    };
    let mut ordinals: BTreeMap<&'static str, usize> = BTreeMap::new();
    let table = order
        .iter()
        .map(|&i| {
            let def = &nodes[i];
            let ordinal = ordinals.entry(def.kind.name()).or_insert(0);
            let name = format!("{}_{}", def.kind.name(), ordinal);
            *ordinal += 1;
            TableNode {
                name,
                def: NodeDef {
                    kind: def.kind.clone(),
                    n: def.n,
                    inputs: def.inputs.iter().map(remap).collect(),
                    references: def.references.iter().map(remap).collect(),
                    declared_shapes: def.declared_shapes.clone(),
                },
            }
        })
        .collect();
    Ok((table, requested.iter().map(remap).collect()))
}

pub(crate) fn node_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Whether a node last advanced at `at` already holds the value for
/// request `r`. Tokens are step paths; a buffer drains its upstream with
/// sub-steps `r.1, r.2, ...`, and the first sub-step shares its parent's
/// value.
fn fresh(at: &[u32], r: &[u32]) -> bool {
    if at.starts_with(r) {
        return true;
    }
    match r.split_last() {
        Some((1, parent)) if !parent.is_empty() => fresh(at, parent),
        _ => false,
    }
}

#[derive(Clone, Debug)]
struct NodeState {
    rng: ChaCha8Rng,
    inputs: Vec<Vec<Sample>>,
    refs: Vec<Vec<Sample>>,
    prepared: Prepared,
    produced: usize,
    capacity: usize,
    value: Option<Vec<Vec<Sample>>>,
    at: Vec<u32>,
    loaded: Option<Vec<Sample>>,
    emissions: usize,
}

impl NodeState {
    fn new(rng: ChaCha8Rng) -> Self {
        NodeState {
            rng,
            inputs: Vec::new(),
            refs: Vec::new(),
            prepared: Prepared::Nothing,
            produced: 0,
            capacity: 0,
            value: None,
            at: Vec::new(),
            loaded: None,
            emissions: 0,
        }
    }

    fn reset(&mut self) {
        let rng = self.rng.clone();
        let emissions = self.emissions;
        *self = NodeState::new(rng);
        self.emissions = emissions;
    }
}

/// Outcome of one evaluation step.
#[derive(Clone, Debug, PartialEq)]
pub enum Step {
    /// One sample list per requested connection.
    Values(Vec<Vec<Sample>>),
    /// An input node ran out; the generation is over.
    Depleted,
}

/// The traced subgraph of some requested connections plus its evaluation
/// state.
///
/// Each node draws randomness from its own stream derived from the creator
/// seed and its name; streams continue across [`Creator::eval`] calls.
#[derive(Clone, Debug)]
pub struct Creator {
    pub(crate) table: NodeTable,
    pub(crate) outputs: Vec<Connection>,
    seed: u64,
    states: Vec<NodeState>,
    loaded: bool,
    step: u32,
    finished: bool,
}

impl Creator {
    pub fn new(graph: &Graph, requested: &[Connection], seed: u64) -> Result<Self> {
        let (table, outputs) = trace(&graph.nodes, requested)?;
        Ok(Creator::from_table(table, outputs, seed))
    }

    pub(crate) fn from_table(table: NodeTable, outputs: Vec<Connection>, seed: u64) -> Self {
        let states = table.iter().map(|n| NodeState::new(node_rng(seed, &n.name))).collect();
        Creator {
            table,
            outputs,
            seed,
            states,
            loaded: false,
            step: 0,
            finished: false,
        }
    }

    /// Number of traced nodes.
    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_outputs(&self) -> usize {
        self.outputs.len()
    }

    pub fn node_names(&self) -> Vec<&str> {
        self.table.iter().map(|n| n.name.as_str()).collect()
    }

    pub fn node_kind(&self, name: &str) -> Option<&Kind> {
        self.table.iter().find(|n| n.name == name).map(|n| &n.def.kind)
    }

    /// Emissions per node since construction.
    pub fn emission_counts(&self) -> Vec<(&str, usize)> {
        self.table
            .iter()
            .zip(&self.states)
            .map(|(n, s)| (n.name.as_str(), s.emissions))
            .collect()
    }

    /// Restarts every node's random stream from a new master seed.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        for (n, s) in self.table.iter().zip(&mut self.states) {
            s.rng = node_rng(seed, &n.name);
        }
    }

    /// Resets every node and loads `id` into the input nodes.
    pub fn load_identifier(&mut self, id: &Identifier) -> Result<()> {
        self.loaded = false;
        self.finished = false;
        self.step = 0;
        for s in &mut self.states {
            s.reset();
        }
        for (node, state) in self.table.iter().zip(&mut self.states) {
            let samples = match (&node.def.kind, id) {
                (Kind::CatalogInput { modalities }, Identifier::Catalog(c)) => {
                    let record = c.record();
                    modalities
                        .iter()
                        .map(|m| match record.get(m) {
                            Some(modality) => modality.load(),
                            None => Err(Error::Lookup(format!(
                                "record {} has no modality {m:?} needed by {}",
                                c.key(),
                                node.name
                            ))),
                        })
                        .collect::<Result<Vec<_>>>()?
                }
                (Kind::DirectInput, Identifier::Direct(samples)) => samples.clone(),
                (Kind::CatalogInput { .. } | Kind::DirectInput, other) => bail!(
                    Contract,
                    "{} cannot load identifier {}",
                    node.name,
                    other.describe()
                ),
                _ => continue,
            };
            state.loaded = Some(samples);
            state.capacity = match node.def.n {
                Multiplicity::Count(k) => k,
                Multiplicity::AllTiles => bail!(State, "input node {} has n = all", node.name),
            };
        }
        self.loaded = true;
        Ok(())
    }

    /// Loads `id` and returns the stream of steps until depletion.
    pub fn eval(&mut self, id: &Identifier) -> Result<Generation<'_>> {
        self.load_identifier(id)?;
        Ok(Generation { creator: self })
    }

    /// Runs a full generation and collects every step.
    pub fn run(&mut self, id: &Identifier) -> Result<Vec<Vec<Vec<Sample>>>> {
        self.eval(id)?.collect()
    }

    /// Advances every requested connection by one value.
    pub fn evaluate_step(&mut self) -> Result<Step> {
        if !self.loaded {
            bail!(State, "no identifier loaded; call eval or load_identifier first");
        }
        if self.finished {
            return Ok(Step::Depleted);
        }
        self.step += 1;
        let token = vec![self.step];
        let outputs = self.outputs.clone();
        for c in &outputs {
            if !self.advance(c.node, &token)? {
                self.finished = true;
                return Ok(Step::Depleted);
            }
        }
        Ok(Step::Values(
            outputs.iter().map(|c| self.slot_value(c)).collect(),
        ))
    }

    fn slot_value(&self, c: &Connection) -> Vec<Sample> {
        self.states[c.node].value.as_ref().expect("advanced")[c.slot].clone()
    }

    /// Pulls one value from every input and reference connection.
    fn pull_once(&mut self, i: usize, token: &[u32]) -> Result<Option<(Vec<Vec<Sample>>, Vec<Vec<Sample>>)>> {
        let inputs = self.table[i].def.inputs.clone();
        let references = self.table[i].def.references.clone();
        for c in inputs.iter().chain(&references) {
            if !self.advance(c.node, token)? {
                return Ok(None);
            }
        }
        Ok(Some((
            inputs.iter().map(|c| self.slot_value(c)).collect(),
            references.iter().map(|c| self.slot_value(c)).collect(),
        )))
    }

    fn drain(&mut self, i: usize, limit: Option<usize>, token: &[u32]) -> Result<Option<Vec<Vec<Sample>>>> {
        let mut items: Vec<Vec<Vec<Sample>>> = Vec::new();
        let mut sub = 0u32;
        while limit.is_none_or(|l| items.len() < l) {
            sub += 1;
            let mut t = token.to_vec();
            t.push(sub);
            match self.pull_once(i, &t)? {
                Some((inputs, _)) => items.push(inputs),
                None => break,
            }
        }
        if items.is_empty() {
            return Ok(None);
        }
        let connections = items[0].len();
        let mut out = Vec::with_capacity(connections);
        for k in 0..connections {
            let width = items[0][k].len();
            let mut list = Vec::with_capacity(width);
            for p in 0..width {
                let parts: Vec<Sample> = items
                    .iter()
                    .map(|item| match item[k].get(p) {
                        Some(s) if item[k].len() == width => Ok(s.clone()),
                        _ => Err(Error::Shape(format!(
                            "{} received lists of different lengths",
                            self.table[i].name
                        ))),
                    })
                    .collect::<Result<_>>()?;
                list.push(Sample::concat_batch(&parts)?);
            }
            out.push(list);
        }
        Ok(Some(out))
    }

    /// Makes node `i` hold a value for `token`. `false` means depletion.
    fn advance(&mut self, i: usize, token: &[u32]) -> Result<bool> {
        {
            let st = &self.states[i];
            if st.value.is_some() && fresh(&st.at, token) {
                return Ok(true);
            }
        }
        if self.table[i].def.kind.is_input() {
            let st = &mut self.states[i];
            let Some(loaded) = &st.loaded else {
                bail!(State, "input node {} has nothing loaded", self.table[i].name);
            };
            if st.produced >= st.capacity {
                return Ok(false);
            }
            st.value = Some(vec![loaded.clone()]);
            st.produced += 1;
            st.emissions += 1;
            st.at = token.to_vec();
            return Ok(true);
        }

        if self.states[i].produced >= self.states[i].capacity {
            let pulled = match &self.table[i].def.kind {
                Kind::Buffer(b) => self.drain(i, b.buffer_size, token)?.map(|ins| (ins, Vec::new())),
                _ => self.pull_once(i, token)?,
            };
            let Some((inputs, refs)) = pulled else {
                return Ok(false);
            };
            let def = &self.table[i].def;
            let (capacity, prepared) = match &def.kind {
                Kind::Buffer(_) | Kind::Model(_) => match def.n {
                    Multiplicity::Count(k) => (k, Prepared::Nothing),
                    Multiplicity::AllTiles => bail!(State, "{} has n = all", self.table[i].name),
                },
                kind => prepare(kind, def.n, &inputs, &refs)?,
            };
            if capacity == 0 {
                bail!(State, "{} has nothing to emit", self.table[i].name);
            }
            let st = &mut self.states[i];
            st.inputs = inputs;
            st.refs = refs;
            st.prepared = prepared;
            st.capacity = capacity;
            st.produced = 0;
        }

        let node = &self.table[i];
        let st = &mut self.states[i];
        let value = match &node.def.kind {
            Kind::Buffer(_) => st.inputs.clone(),
            Kind::Model(slot) => match &slot.instance {
                Some(model) => run_model(&node.name, model, &st.inputs)?,
                None => {
                    return Err(Error::MissingModel {
                        node: node.name.clone(),
                        reason: format!(
                            "model {} ({}) is not attached",
                            slot.model_kind, slot.sha256
                        ),
                    })
                }
            },
            kind => emit(kind, &st.prepared, st.produced, &mut st.rng, &st.inputs, &st.refs)?,
        };
        st.value = Some(value);
        st.produced += 1;
        st.emissions += 1;
        st.at = token.to_vec();
        Ok(true)
    }

    /// One line per node in evaluation order: name, kind, n, declared
    /// shapes and input names.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let port = |c: &Connection| format!("{}:{}", self.table[c.node].name, c.slot);
        for node in &self.table {
            let shapes = if node.def.declared_shapes.is_empty() {
                "?".to_owned()
            } else {
                node.def
                    .declared_shapes
                    .iter()
                    .map(render_shape)
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            let inputs: Vec<String> = node.def.inputs.iter().map(port).collect();
            let refs: Vec<String> = node.def.references.iter().map(port).collect();
            let _ = write!(
                out,
                "{:<24} {:<18} n={:<4} shapes={} inputs=[{}]",
                node.name,
                node.def.kind.name(),
                node.def.n.to_string(),
                shapes,
                inputs.join(", ")
            );
            if !refs.is_empty() {
                let _ = write!(out, " references=[{}]", refs.join(", "));
            }
            out.push('\n');
        }
        out
    }

    /// Model nodes without an attached instance.
    pub fn detached_models(&self) -> Vec<(&str, &str)> {
        self.table
            .iter()
            .filter_map(|n| match &n.def.kind {
                Kind::Model(slot) if slot.instance.is_none() => {
                    Some((n.name.as_str(), slot.sha256.as_str()))
                }
                _ => None,
            })
            .collect()
    }

    /// Attaches `model` to every model node whose recorded hash matches.
    /// Returns the number of nodes attached.
    pub fn attach_model(&mut self, model: Arc<dyn Model>) -> Result<usize> {
        let hash = crate::model::model_hash(model.as_ref());
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

    pub(crate) fn models(&self) -> Vec<Arc<dyn Model>> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for node in &self.table {
            if let Kind::Model(slot) = &node.def.kind {
                if let Some(m) = &slot.instance {
                    if seen.insert(slot.sha256.clone()) {
                        out.push(m.clone());
                    }
                }
            }
        }
        out
    }
}

fn render_shape(shape: &DeclaredShape) -> String {
    let axes: Vec<String> = shape
        .iter()
        .map(|a| a.map_or_else(|| "?".to_owned(), |v| v.to_string()))
        .collect();
    format!("({})", axes.join(","))
}

fn run_model(name: &str, model: &Arc<dyn Model>, inputs: &[Vec<Sample>]) -> Result<Vec<Vec<Sample>>> {
    let samples: Vec<&Sample> = inputs.iter().flatten().collect();
    let Some(first) = samples.first() else {
        bail!(Contract, "{name} received no samples");
    };
    let views: Vec<ArrayView5<'_, f64>> = samples.iter().map(|s| s.data().view()).collect();
    let shapes: Vec<[usize; 5]> = views.iter().map(shape5).collect();
    let declared = model.output_shapes(&shapes)?;
    let produced = model.predict(&views)?;
    if produced.len() != model.num_outputs() || declared.len() != produced.len() {
        bail!(
            Contract,
            "{name}: model declared {} outputs and produced {}",
            declared.len(),
            produced.len()
        );
    }
    let in_spatial = first.spatial_shape();
    produced
        .into_iter()
        .zip(declared)
        .enumerate()
        .map(|(o, (data, want))| {
            let got = shape5(&data.view());
            if got != want {
                bail!(
                    Contract,
                    "{name}: output {o} has shape {got:?}, the model declared {want:?}"
                );
            }
            if got[0] != first.batch() {
                bail!(
                    Contract,
                    "{name}: output {o} has batch {} for input batch {}",
                    got[0],
                    first.batch()
                );
            }
            let map = model.output_to_input(o, in_spatial, [got[1], got[2], got[3]]);
            let affines = first.affines().iter().map(|a| a * map).collect();
            Ok(vec![Sample::with_parts(data, affines)?])
        })
        .collect()
}

/// The steps of one generation; ends at depletion.
pub struct Generation<'a> {
    creator: &'a mut Creator,
}

impl Iterator for Generation<'_> {
    type Item = Result<Vec<Vec<Sample>>>;

    fn next(&mut self) -> Option<Self::Item> {
        match self.creator.evaluate_step() {
            Ok(Step::Values(v)) => Some(Ok(v)),
            Ok(Step::Depleted) => None,
            Err(e) => {
                self.creator.finished = true;
                Some(Err(e))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn freshness_rules() {
        assert!(fresh(&[3], &[3]));
        assert!(!fresh(&[3], &[4]));
        assert!(fresh(&[3, 2], &[3]));
        assert!(fresh(&[3], &[3, 1]));
        assert!(!fresh(&[3], &[3, 2]));
        assert!(fresh(&[3, 1], &[3, 1, 1]));
        assert!(!fresh(&[2, 5], &[3, 1]));
    }
}
