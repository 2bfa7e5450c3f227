//! The hierarchical assessment blueprint: data model, file format,
//! validation, and queries.
//!
//! A blueprint is a tree of named categories. Nodes may carry a free-text
//! definition (rendered into prompts) and exemplars (used by few-shot
//! classification). Sibling names must be unique case-insensitively —
//! classifier replies are matched case-insensitively, so case-colliding
//! siblings would be ambiguous.
//!
//! Two document shapes are accepted, in JSON or YAML:
//!
//! * the structured form
//!   `{"title": …, "levels": …, "roots": [{"name": …, "definition": …,
//!   "exemplars": [{"text": …}], "children": […]}, …]}` where `levels` is
//!   an optional declared depth bound and everything but `name` is
//!   optional;
//! * a plain mapping of `name -> children` mappings (leaves map to `{}` or
//!   nothing), which is desugared into nodes without definitions.
//!
//! Depth is 1-based: roots sit at level 1. Branches may end early; a
//! ragged tree is valid.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classify::{CandidateLabel, Exemplar};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BlueprintError {
    #[error("malformed blueprint document: {0}")]
    Malformed(String),
    #[error("blueprint has no root categories")]
    NoRoots,
    #[error("empty category name under {parent}")]
    EmptyName { parent: String },
    #[error("category name {name:?} under {parent} contains a line break")]
    NameContainsNewline { name: String, parent: String },
    #[error("duplicate sibling {name:?} under {parent}")]
    DuplicateSibling { name: String, parent: String },
    #[error("exemplar on {node:?} is labeled {label:?}")]
    ExemplarLabelMismatch { node: String, label: String },
    #[error("empty exemplar text on {node:?}")]
    EmptyExemplarText { node: String },
    #[error("declared levels must be at least 1")]
    InvalidDeclaredLevels,
    #[error("{node:?} sits at depth {depth}, beyond the declared {declared} levels")]
    DeeperThanDeclared { node: String, depth: usize, declared: usize },
    #[error("level {level} is out of range (blueprint depth is {depth})")]
    LevelOutOfRange { level: usize, depth: usize },
    #[error("path step {label:?} not found under {parent}")]
    PathNotFound { label: String, parent: String },
}

const ROOT_PARENT: &str = "(root)";

pub(crate) fn ci_eq(a: &str, b: &str) -> bool {
    a.to_lowercase() == b.to_lowercase()
}

/// One category in the blueprint tree. An empty `children` list marks a
/// leaf.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BlueprintNode {
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub definition: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub exemplars: Vec<Exemplar>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<BlueprintNode>,
}

impl BlueprintNode {
    pub fn leaf(name: impl Into<String>) -> Self {
        Self { name: name.into(), definition: None, exemplars: Vec::new(), children: Vec::new() }
    }

    pub fn with_children(name: impl Into<String>, children: Vec<BlueprintNode>) -> Self {
        Self { name: name.into(), definition: None, exemplars: Vec::new(), children }
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    fn depth(&self) -> usize {
        1 + self.children.iter().map(BlueprintNode::depth).max().unwrap_or(0)
    }
}

/// An ordered chain of category names from a root toward a descendant.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CategoryPath(Vec<String>);

impl CategoryPath {
    pub fn new(labels: Vec<String>) -> Self {
        Self(labels)
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn labels(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn push(&mut self, label: impl Into<String>) {
        self.0.push(label.into());
    }

    /// The label at a 1-based level, if the path reaches that deep.
    pub fn label_at_level(&self, level: usize) -> Option<&str> {
        if level == 0 {
            return None;
        }
        self.0.get(level - 1).map(String::as_str)
    }
}

impl<S: Into<String>, const N: usize> From<[S; N]> for CategoryPath {
    fn from(labels: [S; N]) -> Self {
        Self(labels.into_iter().map(Into::into).collect())
    }
}

impl std::fmt::Display for CategoryPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let mut first = true;
        for label in &self.0 {
            if !first {
                f.write_str(" > ")?;
            }
            f.write_str(label)?;
            first = false;
        }
        Ok(())
    }
}

/// The validated taxonomy: a titled ordered forest with an optional
/// declared depth bound. Values are immutable after construction and safe
/// to share across worker threads.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Blueprint {
    pub title: String,
    #[serde(rename = "levels", skip_serializing_if = "Option::is_none")]
    pub declared_levels: Option<usize>,
    pub roots: Vec<BlueprintNode>,
}

impl Blueprint {
    /// Validates and wraps a category forest. Fails on empty or
    /// line-broken names, case-insensitive sibling collisions, exemplar
    /// labels that do not match their node, and nodes deeper than the
    /// declared level bound.
    pub fn new(
        title: impl Into<String>,
        roots: Vec<BlueprintNode>,
        declared_levels: Option<usize>,
    ) -> Result<Self, BlueprintError> {
        if roots.is_empty() {
            return Err(BlueprintError::NoRoots);
        }
        if declared_levels == Some(0) {
            return Err(BlueprintError::InvalidDeclaredLevels);
        }
        validate_siblings(&roots, ROOT_PARENT, 1, declared_levels)?;
        Ok(Self { title: title.into(), declared_levels, roots })
    }

    pub fn roots(&self) -> &[BlueprintNode] {
        &self.roots
    }

    /// Length of the longest root-to-leaf path.
    pub fn depth(&self) -> usize {
        self.roots.iter().map(BlueprintNode::depth).max().unwrap_or(0)
    }

    /// All category names at a 1-based level, in document order, flattened
    /// across parents.
    pub fn labels_at_level(&self, level: usize) -> Result<Vec<String>, BlueprintError> {
        let depth = self.depth();
        if level == 0 || level > depth {
            return Err(BlueprintError::LevelOutOfRange { level, depth });
        }
        let mut labels = Vec::new();
        collect_at_level(&self.roots, 1, level, &mut labels);
        Ok(labels)
    }

    /// Candidates for the next decision after `path`: one per child of the
    /// addressed node, carrying name, definition, and exemplars. The empty
    /// path addresses the root level; a leaf yields an empty list. Path
    /// steps resolve case-insensitively.
    pub fn children_of(&self, path: &CategoryPath) -> Result<Vec<CandidateLabel>, BlueprintError> {
        let nodes = self.nodes_under(path)?;
        Ok(nodes
            .iter()
            .map(|node| CandidateLabel {
                name: node.name.clone(),
                definition: node.definition.clone(),
                exemplars: node.exemplars.clone(),
            })
            .collect())
    }

    /// The node addressed by a non-empty path.
    pub fn resolve(&self, path: &CategoryPath) -> Result<&BlueprintNode, BlueprintError> {
        let mut nodes: &[BlueprintNode] = &self.roots;
        let mut parent = ROOT_PARENT.to_string();
        let mut found = None;
        for label in path.labels() {
            let node = nodes.iter().find(|n| ci_eq(&n.name, label)).ok_or_else(|| {
                BlueprintError::PathNotFound { label: label.clone(), parent: parent.clone() }
            })?;
            parent = if parent == ROOT_PARENT {
                node.name.clone()
            } else {
                format!("{parent} > {}", node.name)
            };
            nodes = &node.children;
            found = Some(node);
        }
        found.ok_or_else(|| BlueprintError::PathNotFound {
            label: String::new(),
            parent: ROOT_PARENT.to_string(),
        })
    }

    pub fn is_valid_path(&self, path: &CategoryPath) -> bool {
        path.is_empty() || self.resolve(path).is_ok()
    }

    /// True when the path resolves and ends on a leaf.
    pub fn is_leaf_path(&self, path: &CategoryPath) -> bool {
        self.resolve(path).map(BlueprintNode::is_leaf).unwrap_or(false)
    }

    fn nodes_under(&self, path: &CategoryPath) -> Result<&[BlueprintNode], BlueprintError> {
        if path.is_empty() {
            return Ok(&self.roots);
        }
        Ok(&self.resolve(path)?.children)
    }

    pub(crate) fn visit_nodes_mut(&mut self, visit: &mut dyn FnMut(&mut BlueprintNode)) {
        fn walk(nodes: &mut [BlueprintNode], visit: &mut dyn FnMut(&mut BlueprintNode)) {
            for node in nodes {
                visit(node);
                walk(&mut node.children, visit);
            }
        }
        walk(&mut self.roots, visit);
    }

    /// Re-checks every invariant; used after programmatic edits.
    pub(crate) fn revalidate(&self) -> Result<(), BlueprintError> {
        if self.roots.is_empty() {
            return Err(BlueprintError::NoRoots);
        }
        if self.declared_levels == Some(0) {
            return Err(BlueprintError::InvalidDeclaredLevels);
        }
        validate_siblings(&self.roots, ROOT_PARENT, 1, self.declared_levels)
    }

    /// The structured-form JSON document for this blueprint.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("blueprint serializes")
    }
}

fn collect_at_level(nodes: &[BlueprintNode], depth: usize, level: usize, out: &mut Vec<String>) {
    for node in nodes {
        if depth == level {
            out.push(node.name.clone());
        } else {
            collect_at_level(&node.children, depth + 1, level, out);
        }
    }
}

fn validate_siblings(
    nodes: &[BlueprintNode],
    parent: &str,
    depth: usize,
    declared: Option<usize>,
) -> Result<(), BlueprintError> {
    let mut seen = HashSet::new();
    for node in nodes {
        if node.name.trim().is_empty() {
            return Err(BlueprintError::EmptyName { parent: parent.to_string() });
        }
        if node.name != node.name.trim() {
            return Err(BlueprintError::Malformed(format!(
                "category name {:?} under {parent} has surrounding whitespace",
                node.name
            )));
        }
        if node.name.contains('\n') || node.name.contains('\r') {
            return Err(BlueprintError::NameContainsNewline {
                name: node.name.clone(),
                parent: parent.to_string(),
            });
        }
        if !seen.insert(node.name.to_lowercase()) {
            return Err(BlueprintError::DuplicateSibling {
                name: node.name.clone(),
                parent: parent.to_string(),
            });
        }
        if let Some(limit) = declared {
            if depth > limit {
                return Err(BlueprintError::DeeperThanDeclared {
                    node: node.name.clone(),
                    depth,
                    declared: limit,
                });
            }
        }
        for exemplar in &node.exemplars {
            if exemplar.text.trim().is_empty() {
                return Err(BlueprintError::EmptyExemplarText { node: node.name.clone() });
            }
            if exemplar.label != node.name {
                return Err(BlueprintError::ExemplarLabelMismatch {
                    node: node.name.clone(),
                    label: exemplar.label.clone(),
                });
            }
        }
        let here = if parent == ROOT_PARENT {
            node.name.clone()
        } else {
            format!("{parent} > {}", node.name)
        };
        validate_siblings(&node.children, &here, depth + 1, declared)?;
    }
    Ok(())
}

// --- parsing -----------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBlueprint {
    #[serde(default)]
    title: String,
    #[serde(default)]
    levels: Option<usize>,
    roots: Vec<RawNode>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    name: String,
    #[serde(default)]
    definition: Option<String>,
    #[serde(default)]
    exemplars: Vec<RawExemplar>,
    #[serde(default)]
    children: Vec<RawNode>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawExemplar {
    text: String,
    #[serde(default)]
    label: Option<String>,
}

impl RawNode {
    fn build(self, parent: &str) -> Result<BlueprintNode, BlueprintError> {
        let name = self.name.trim().to_string();
        if name.is_empty() {
            return Err(BlueprintError::EmptyName { parent: parent.to_string() });
        }
        if name.contains('\n') || name.contains('\r') {
            return Err(BlueprintError::NameContainsNewline {
                name,
                parent: parent.to_string(),
            });
        }
        let mut exemplars = Vec::with_capacity(self.exemplars.len());
        for raw in self.exemplars {
            if raw.text.trim().is_empty() {
                return Err(BlueprintError::EmptyExemplarText { node: name.clone() });
            }
            // A file-side label is optional and, when present, must name
            // this node; it is stored in the node's canonical casing.
            match raw.label {
                Some(label) if !ci_eq(&label, &name) => {
                    return Err(BlueprintError::ExemplarLabelMismatch { node: name, label });
                }
                _ => exemplars.push(Exemplar::new(raw.text, name.clone())),
            }
        }
        let here = if parent == ROOT_PARENT { name.clone() } else { format!("{parent} > {name}") };
        let children = self
            .children
            .into_iter()
            .map(|child| child.build(&here))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(BlueprintNode { name, definition: self.definition, exemplars, children })
    }
}

/// Parses a blueprint document (JSON or YAML, structured or plain-mapping
/// form) and validates every invariant. Node order in the document is
/// preserved.
pub fn parse_blueprint(source: &str) -> Result<Blueprint, BlueprintError> {
    let value: serde_yaml::Value =
        serde_yaml::from_str(source).map_err(|e| BlueprintError::Malformed(e.to_string()))?;
    let structured = value
        .as_mapping()
        .map(|m| matches!(m.get("roots"), Some(serde_yaml::Value::Sequence(_))))
        .unwrap_or(false);
    let raw = if structured {
        serde_yaml::from_value::<RawBlueprint>(value)
            .map_err(|e| BlueprintError::Malformed(e.to_string()))?
    } else {
        desugar_mapping(value)?
    };
    let roots = raw
        .roots
        .into_iter()
        .map(|node| node.build(ROOT_PARENT))
        .collect::<Result<Vec<_>, _>>()?;
    Blueprint::new(raw.title, roots, raw.levels)
}

/// Interprets a plain `name -> children` mapping document.
fn desugar_mapping(value: serde_yaml::Value) -> Result<RawBlueprint, BlueprintError> {
    let mapping = match value {
        serde_yaml::Value::Mapping(m) => m,
        other => {
            return Err(BlueprintError::Malformed(format!(
                "expected a mapping of category names, found {}",
                value_kind(&other)
            )))
        }
    };
    Ok(RawBlueprint { title: String::new(), levels: None, roots: desugar_children(mapping)? })
}

fn desugar_children(mapping: serde_yaml::Mapping) -> Result<Vec<RawNode>, BlueprintError> {
    let mut nodes = Vec::with_capacity(mapping.len());
    for (key, value) in mapping {
        let name = scalar_name(&key)?;
        let children = match value {
            serde_yaml::Value::Mapping(children) => desugar_children(children)?,
            serde_yaml::Value::Null => Vec::new(),
            other => {
                return Err(BlueprintError::Malformed(format!(
                    "category {name:?} must map to child categories or nothing, found {}",
                    value_kind(&other)
                )))
            }
        };
        nodes.push(RawNode { name, definition: None, exemplars: Vec::new(), children });
    }
    Ok(nodes)
}

fn scalar_name(key: &serde_yaml::Value) -> Result<String, BlueprintError> {
    match key {
        serde_yaml::Value::String(s) => Ok(s.clone()),
        serde_yaml::Value::Number(n) => Ok(n.to_string()),
        serde_yaml::Value::Bool(b) => Ok(b.to_string()),
        other => Err(BlueprintError::Malformed(format!(
            "category name must be a scalar, found {}",
            value_kind(other)
        ))),
    }
}

fn value_kind(value: &serde_yaml::Value) -> &'static str {
    match value {
        serde_yaml::Value::Null => "null",
        serde_yaml::Value::Bool(_) => "a boolean",
        serde_yaml::Value::Number(_) => "a number",
        serde_yaml::Value::String(_) => "a string",
        serde_yaml::Value::Sequence(_) => "a sequence",
        serde_yaml::Value::Mapping(_) => "a mapping",
        serde_yaml::Value::Tagged(_) => "a tagged value",
    }
}
