//! The pull-based transformer network.
//!
//! A [`Graph`] is a table of nodes wired by [`Connection`]s. Nothing runs
//! until a [`Creator`] is built over some requested connections: it keeps only
//! their ancestors, names them, and evaluates them one step at a time.

mod creator;
pub(crate) mod serial;

use std::sync::Arc;

use crate::error::{bail, Result};
use crate::model::Model;
use crate::transformers::{Kind, Multiplicity};

pub use creator::{Creator, Generation, Step};
pub use serial::{CREATOR_FORMAT, CREATOR_FORMAT_VERSION};
pub(crate) use creator::{trace, NodeTable};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

/// One output slot of one node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Connection {
    pub(crate) node: usize,
    pub(crate) slot: usize,
}

impl Connection {
    pub fn node(&self) -> NodeId {
        NodeId(self.node)
    }

    pub fn slot(&self) -> usize {
        self.slot
    }
}

/// Declared sample shape; `None` marks an axis unknown until run time.
pub type DeclaredShape = [Option<usize>; 5];

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct NodeDef {
    pub kind: Kind,
    pub n: Multiplicity,
    pub inputs: Vec<Connection>,
    pub references: Vec<Connection>,
    pub declared_shapes: Vec<DeclaredShape>,
}

impl NodeDef {
    pub fn arity(&self) -> usize {
        self.kind.arity(self.inputs.len())
    }
}

/// A mutable node table. Nodes may be applied to inputs several times; each
/// application adds input connections and, for per-input kinds, outputs.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    pub(crate) nodes: Vec<NodeDef>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, conn: &Connection) -> Result<()> {
        match self.nodes.get(conn.node) {
            None => bail!(Argument, "connection to unknown node {}", conn.node),
            Some(def) if conn.slot >= def.arity() => bail!(
                Argument,
                "slot {} out of range for a {} node with {} outputs",
                conn.slot,
                def.kind.name(),
                def.arity()
            ),
            Some(_) => Ok(()),
        }
    }

    /// Adds an unapplied node. `references` are side inputs such as masks.
    pub fn add_node(&mut self, kind: Kind, n: Multiplicity, references: &[Connection]) -> Result<NodeId> {
        kind.validate(n, references.len())?;
        for r in references {
            self.check(r)?;
        }
        self.nodes.push(NodeDef {
            kind,
            n,
            inputs: Vec::new(),
            references: references.to_vec(),
            declared_shapes: Vec::new(),
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Connects `inputs` to `node` and returns the outputs this application
    /// created: one per input for per-input kinds, the single output for
    /// grouping, and every model output for model nodes.
    pub fn apply(&mut self, node: NodeId, inputs: &[Connection]) -> Result<Vec<Connection>> {
        let Some(def) = self.nodes.get(node.0) else {
            bail!(Argument, "unknown node {}", node.0);
        };
        if def.kind.is_input() {
            bail!(Argument, "input nodes take no input connections");
        }
        if inputs.is_empty() {
            bail!(Argument, "{} applied to no inputs", def.kind.name());
        }
        for c in inputs {
            self.check(c)?;
        }
        let def = &mut self.nodes[node.0];
        let before = def.inputs.len();
        def.inputs.extend_from_slice(inputs);
        let outputs = match def.kind {
            Kind::Group | Kind::Model(_) => (0..def.arity()).collect::<Vec<_>>(),
            _ => (before..def.inputs.len()).collect(),
        };
        Ok(outputs
            .into_iter()
            .map(|slot| Connection { node: node.0, slot })
            .collect())
    }

    /// [`Graph::add_node`] followed by [`Graph::apply`].
    pub fn add(
        &mut self,
        kind: Kind,
        n: Multiplicity,
        references: &[Connection],
        inputs: &[Connection],
    ) -> Result<Vec<Connection>> {
        let node = self.add_node(kind, n, references)?;
        self.apply(node, inputs)
    }

    /// Like [`Graph::add`] for nodes with exactly one output.
    pub fn add_one(
        &mut self,
        kind: Kind,
        n: Multiplicity,
        references: &[Connection],
        input: Connection,
    ) -> Result<Connection> {
        let mut out = self.add(kind, n, references, &[input])?;
        match out.len() {
            1 => Ok(out.remove(0)),
            k => bail!(Argument, "node has {k} outputs, expected one"),
        }
    }

    pub fn catalog_input<S: AsRef<str>>(&mut self, modalities: &[S], n: usize) -> Result<Connection> {
        let node = self.add_node(Kind::catalog_input(modalities), Multiplicity::Count(n), &[])?;
        Ok(Connection { node: node.0, slot: 0 })
    }

    pub fn direct_input(&mut self, n: usize) -> Result<Connection> {
        let node = self.add_node(Kind::DirectInput, Multiplicity::Count(n), &[])?;
        Ok(Connection { node: node.0, slot: 0 })
    }

    pub fn model(&mut self, model: Arc<dyn Model>, inputs: &[Connection]) -> Result<Vec<Connection>> {
        self.add(Kind::model(model), Multiplicity::Count(1), &[], inputs)
    }

    /// Shapes shown by the creator summary.
    pub fn declare_shapes(&mut self, node: NodeId, shapes: Vec<DeclaredShape>) -> Result<()> {
        match self.nodes.get_mut(node.0) {
            Some(def) => {
                def.declared_shapes = shapes;
                Ok(())
            }
            None => bail!(Argument, "unknown node {}", node.0),
        }
    }

    pub fn kind(&self, node: NodeId) -> Option<&Kind> {
        self.nodes.get(node.0).map(|d| &d.kind)
    }

    pub fn outputs(&self, node: NodeId) -> Vec<Connection> {
        let arity = self.nodes.get(node.0).map_or(0, NodeDef::arity);
        (0..arity)
            .map(|slot| Connection { node: node.0, slot })
            .collect()
    }
}
