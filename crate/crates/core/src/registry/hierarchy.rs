//! The sensor hierarchy: aggregated sensors are inner nodes, machine
//! sensors are leaves.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::records::SensorId;

pub const DEFAULT_ROOT_ID: &str = "root";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SensorKind {
    /// A physical sensor delivering measurements.
    Machine,
    /// A virtual sensor summing up the leaves below it.
    Aggregated,
}

#[derive(Debug, Clone)]
pub struct SensorNode {
    pub identifier: SensorId,
    pub name: String,
    pub kind: SensorKind,
    parent: Option<usize>,
    children: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum HierarchyError {
    #[error("unknown sensor {0:?}")]
    UnknownSensor(String),
    #[error("sensor {0:?} is a machine sensor, not a group")]
    NotAggregated(String),
}

/// A rule a submitted hierarchy breaks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "violation", rename_all = "kebab-case")]
pub enum Violation {
    InvalidIdentifier { identifier: String, reason: String },
    DuplicateIdentifier { identifier: String },
    NoRoot,
    MultipleRoots { identifiers: Vec<String> },
    UnknownParent { identifier: String, parent: String },
    Cycle { identifiers: Vec<String> },
    MachineSensorWithChildren { identifier: String },
    RootIsMachineSensor { identifier: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::InvalidIdentifier { identifier, reason } => {
                write!(f, "invalid identifier {identifier:?}: {reason}")
            }
            Violation::DuplicateIdentifier { identifier } => write!(f, "duplicate identifier {identifier:?}"),
            Violation::NoRoot => f.write_str("hierarchy has no root"),
            Violation::MultipleRoots { identifiers } => write!(f, "multiple roots: {identifiers:?}"),
            Violation::UnknownParent { identifier, parent } => {
                write!(f, "{identifier:?} refers to unknown parent {parent:?}")
            }
            Violation::Cycle { identifiers } => write!(f, "cycle through {identifiers:?}"),
            Violation::MachineSensorWithChildren { identifier } => {
                write!(f, "machine sensor {identifier:?} has children")
            }
            Violation::RootIsMachineSensor { identifier } => {
                write!(f, "root {identifier:?} must be an aggregated sensor")
            }
        }
    }
}

/// Nested wire form of a node. A node with a `children` array is an
/// aggregated sensor (possibly empty); without one it is a machine sensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NestedNode {
    pub identifier: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub children: Option<Vec<NestedNode>>,
}

impl NestedNode {
    pub fn machine(id: impl Into<String>) -> Self {
        Self {
            identifier: id.into(),
            name: None,
            children: None,
        }
    }

    pub fn group(id: impl Into<String>, children: Vec<NestedNode>) -> Self {
        Self {
            identifier: id.into(),
            name: None,
            children: Some(children),
        }
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }
}

/// Flat wire form of a node: a parent pointer instead of nesting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatNode {
    pub identifier: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default)]
    pub parent: Option<String>,
    /// Inferred when absent: a node is aggregated if it is the root or
    /// some node names it as parent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<SensorKind>,
}

/// A hierarchy as submitted for an update (no version).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum HierarchySpec {
    Nested { root: NestedNode },
    Flat { nodes: Vec<FlatNode> },
}

impl HierarchySpec {
    pub fn nested(root: NestedNode) -> Self {
        HierarchySpec::Nested { root }
    }

    fn into_flat(self) -> Vec<FlatNode> {
        match self {
            HierarchySpec::Flat { nodes } => nodes,
            HierarchySpec::Nested { root } => {
                let mut out = Vec::new();
                let mut stack = vec![(root, None::<String>)];
                while let Some((node, parent)) = stack.pop() {
                    let kind = if node.children.is_some() {
                        SensorKind::Aggregated
                    } else {
                        SensorKind::Machine
                    };
                    for child in node.children.into_iter().flatten().rev() {
                        stack.push((child, Some(node.identifier.clone())));
                    }
                    out.push(FlatNode {
                        identifier: node.identifier,
                        name: node.name,
                        parent,
                        kind: Some(kind),
                    });
                }
                out
            }
        }
    }
}

/// A validated, versioned sensor tree.
#[derive(Debug, Clone)]
pub struct SensorHierarchy {
    version: u64,
    nodes: Vec<SensorNode>,
    index: HashMap<SensorId, usize>,
}

impl PartialEq for SensorHierarchy {
    fn eq(&self, other: &Self) -> bool {
        self.version == other.version && self.same_tree(other)
    }
}

impl SensorHierarchy {
    /// The initial hierarchy: a lone root group.
    pub fn initial() -> Self {
        Self::build(1, HierarchySpec::nested(NestedNode::group(DEFAULT_ROOT_ID, vec![]).named(DEFAULT_ROOT_ID)))
            .expect("initial hierarchy is valid")
    }

    /// Validates `spec` and assigns it `version`.
    pub fn build(version: u64, spec: HierarchySpec) -> Result<Self, Vec<Violation>> {
        let flat = spec.into_flat();
        let mut violations = Vec::new();

        let mut seen = HashSet::new();
        let mut ids = Vec::with_capacity(flat.len());
        for n in &flat {
            match SensorId::new(n.identifier.clone()) {
                Ok(id) => ids.push(Some(id)),
                Err(e) => {
                    violations.push(Violation::InvalidIdentifier {
                        identifier: n.identifier.clone(),
                        reason: e.to_string(),
                    });
                    ids.push(None);
                }
            }
            if !seen.insert(n.identifier.as_str()) {
                violations.push(Violation::DuplicateIdentifier {
                    identifier: n.identifier.clone(),
                });
            }
        }

        let position: HashMap<&str, usize> = flat
            .iter()
            .enumerate()
            .map(|(i, n)| (n.identifier.as_str(), i))
            .collect();
        let mut parent_of: Vec<Option<usize>> = vec![None; flat.len()];
        let mut roots = Vec::new();
        for (i, n) in flat.iter().enumerate() {
            match &n.parent {
                None => roots.push(i),
                Some(p) => match position.get(p.as_str()) {
                    Some(&pi) => parent_of[i] = Some(pi),
                    None => violations.push(Violation::UnknownParent {
                        identifier: n.identifier.clone(),
                        parent: p.clone(),
                    }),
                },
            }
        }
        match roots.len() {
            0 => violations.push(Violation::NoRoot),
            1 => {}
            _ => violations.push(Violation::MultipleRoots {
                identifiers: roots.iter().map(|&i| flat[i].identifier.clone()).collect(),
            }),
        }

        // Cycle detection by walking parent pointers with colouring.
        let mut state = vec![0u8; flat.len()]; // 0 new, 1 on path, 2 done
        let mut reported: HashSet<usize> = HashSet::new();
        for start in 0..flat.len() {
            let mut path = Vec::new();
            let mut cur = Some(start);
            while let Some(i) = cur {
                match state[i] {
                    2 => break,
                    1 => {
                        let from = path.iter().position(|&p| p == i).unwrap();
                        let cycle: Vec<usize> = path[from..].to_vec();
                        if cycle.iter().all(|c| reported.insert(*c)) {
                            violations.push(Violation::Cycle {
                                identifiers: cycle.iter().map(|&c| flat[c].identifier.clone()).collect(),
                            });
                        }
                        break;
                    }
                    _ => {
                        state[i] = 1;
                        path.push(i);
                        cur = parent_of[i];
                    }
                }
            }
            for p in path {
                state[p] = 2;
            }
        }

        let mut has_children = vec![false; flat.len()];
        for p in parent_of.iter().flatten() {
            has_children[*p] = true;
        }
        let kinds: Vec<SensorKind> = flat
            .iter()
            .enumerate()
            .map(|(i, n)| {
                n.kind.unwrap_or(if has_children[i] || n.parent.is_none() {
                    SensorKind::Aggregated
                } else {
                    SensorKind::Machine
                })
            })
            .collect();
        for (i, n) in flat.iter().enumerate() {
            if kinds[i] == SensorKind::Machine && has_children[i] {
                violations.push(Violation::MachineSensorWithChildren {
                    identifier: n.identifier.clone(),
                });
            }
        }
        if let [root] = roots[..] {
            if kinds[root] == SensorKind::Machine {
                violations.push(Violation::RootIsMachineSensor {
                    identifier: flat[root].identifier.clone(),
                });
            }
        }

        if !violations.is_empty() {
            return Err(violations);
        }

        // Re-index so the root is node 0 and children keep submission order.
        let root = roots[0];
        let mut children_of: Vec<Vec<usize>> = vec![Vec::new(); flat.len()];
        for (i, p) in parent_of.iter().enumerate() {
            if let Some(p) = p {
                children_of[*p].push(i);
            }
        }
        let mut order = Vec::with_capacity(flat.len());
        let mut stack = vec![root];
        while let Some(i) = stack.pop() {
            order.push(i);
            stack.extend(children_of[i].iter().rev());
        }
        let mut new_index = vec![0usize; flat.len()];
        for (new, &old) in order.iter().enumerate() {
            new_index[old] = new;
        }
        let mut flat = flat;
        let mut nodes = Vec::with_capacity(order.len());
        for &old in &order {
            let identifier = ids[old].take().expect("validated identifier");
            let name = flat[old].name.take().unwrap_or_else(|| identifier.to_string());
            nodes.push(SensorNode {
                identifier,
                name,
                kind: kinds[old],
                parent: parent_of[old].map(|p| new_index[p]),
                children: children_of[old].iter().map(|&c| new_index[c]).collect(),
            });
        }
        let index = nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.identifier.clone(), i))
            .collect();
        Ok(Self { version, nodes, index })
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn with_version(mut self, version: u64) -> Self {
        self.version = version;
        self
    }

    pub fn root(&self) -> &SensorNode {
        &self.nodes[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: &str) -> Option<&SensorNode> {
        self.index.get(id).map(|&i| &self.nodes[i])
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    pub fn kind(&self, id: &str) -> Option<SensorKind> {
        self.node(id).map(|n| n.kind)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &SensorNode> {
        self.nodes.iter()
    }

    pub fn parent(&self, id: &str) -> Option<&SensorId> {
        let i = *self.index.get(id)?;
        self.nodes[i].parent.map(|p| &self.nodes[p].identifier)
    }

    pub fn children(&self, id: &str) -> Result<Vec<&SensorNode>, HierarchyError> {
        let i = self.lookup(id)?;
        Ok(self.nodes[i].children.iter().map(|&c| &self.nodes[c]).collect())
    }

    fn lookup(&self, id: &str) -> Result<usize, HierarchyError> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| HierarchyError::UnknownSensor(id.to_string()))
    }

    /// Groups containing `id`, from its parent up to and including the root.
    pub fn ancestors(&self, id: &str) -> Result<Vec<SensorId>, HierarchyError> {
        Ok(self.ancestors_iter(id)?.cloned().collect())
    }

    pub fn ancestors_iter(&self, id: &str) -> Result<impl Iterator<Item = &SensorId> + '_, HierarchyError> {
        let start = self.lookup(id)?;
        let mut cur = self.nodes[start].parent;
        Ok(std::iter::from_fn(move || {
            let i = cur?;
            cur = self.nodes[i].parent;
            Some(&self.nodes[i].identifier)
        }))
    }

    /// Machine sensors in the subtree below the group `id`.
    pub fn leaf_descendants(&self, id: &str) -> Result<BTreeSet<SensorId>, HierarchyError> {
        let start = self.lookup(id)?;
        if self.nodes[start].kind != SensorKind::Aggregated {
            return Err(HierarchyError::NotAggregated(id.to_string()));
        }
        let mut out = BTreeSet::new();
        let mut stack = self.nodes[start].children.clone();
        while let Some(i) = stack.pop() {
            let n = &self.nodes[i];
            match n.kind {
                SensorKind::Machine => {
                    out.insert(n.identifier.clone());
                }
                SensorKind::Aggregated => stack.extend(&n.children),
            }
        }
        Ok(out)
    }

    /// Whether machine sensor `leaf` lies below group `group`.
    pub fn is_leaf_descendant(&self, leaf: &str, group: &str) -> bool {
        match (self.index.get(leaf), self.index.get(group)) {
            (Some(&l), Some(&g)) if self.nodes[l].kind == SensorKind::Machine => {
                let mut cur = self.nodes[l].parent;
                while let Some(i) = cur {
                    if i == g {
                        return true;
                    }
                    cur = self.nodes[i].parent;
                }
                false
            }
            _ => false,
        }
    }

    pub fn machine_sensors(&self) -> impl Iterator<Item = &SensorId> {
        self.nodes
            .iter()
            .filter(|n| n.kind == SensorKind::Machine)
            .map(|n| &n.identifier)
    }

    pub fn aggregated_sensors(&self) -> impl Iterator<Item = &SensorId> {
        self.nodes
            .iter()
            .filter(|n| n.kind == SensorKind::Aggregated)
            .map(|n| &n.identifier)
    }

    /// Structural equality ignoring the version.
    pub fn same_tree(&self, other: &Self) -> bool {
        self.to_nested() == other.to_nested()
    }

    pub fn to_nested(&self) -> NestedNode {
        self.nested_at(0)
    }

    fn nested_at(&self, i: usize) -> NestedNode {
        let n = &self.nodes[i];
        NestedNode {
            identifier: n.identifier.to_string(),
            name: Some(n.name.clone()),
            children: match n.kind {
                SensorKind::Machine => None,
                SensorKind::Aggregated => Some(n.children.iter().map(|&c| self.nested_at(c)).collect()),
            },
        }
    }

    pub fn to_spec(&self) -> HierarchySpec {
        HierarchySpec::nested(self.to_nested())
    }
}

#[derive(Serialize, Deserialize)]
struct HierarchyWire {
    version: u64,
    root: NestedNode,
}

impl Serialize for SensorHierarchy {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        HierarchyWire {
            version: self.version,
            root: self.to_nested(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for SensorHierarchy {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let wire = HierarchyWire::deserialize(deserializer)?;
        SensorHierarchy::build(wire.version, HierarchySpec::nested(wire.root)).map_err(|v| {
            let msgs: Vec<String> = v.iter().map(ToString::to_string).collect();
            serde::de::Error::custom(msgs.join("; "))
        })
    }
}
