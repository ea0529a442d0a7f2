//! Scene graphs: objects with categories, attributes and optional boxes,
//! connected by labelled relationship edges.
//!
//! File format (UTF-8 JSON, unknown keys rejected):
//!
//! ```json
//! {"nodes": [{"id": "a", "category": "circle", "attributes": ["red"],
//!             "bbox": [0.0, 0.0, 0.5, 0.5]}],
//!  "edges": [{"subject": "a", "predicate": "left of", "object": "b"}]}
//! ```

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

/// Maximum number of objects per scene.
pub const N_MAX: usize = 8;

const BOX_EPS: f64 = 1e-9;

/// Normalized box: top-left corner `(x, y)` and size `(w, h)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl From<[f64; 4]> for BoundingBox {
    fn from(v: [f64; 4]) -> Self {
        Self {
            x: v[0],
            y: v[1],
            w: v[2],
            h: v[3],
        }
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { x, y, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite())
            && self.x >= 0.0
            && self.y >= 0.0
            && self.w > 0.0
            && self.h > 0.0
            && self.x + self.w <= 1.0 + BOX_EPS
            && self.y + self.h <= 1.0 + BOX_EPS;
        if ok {
            Ok(())
        } else {
            Err(Error::Constraint(format!("invalid bounding box {:?}", self.to_array())))
        }
    }

    pub fn to_array(self) -> [f64; 4] {
        self.into()
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    /// Half-open containment test `[x, x+w) x [y, y+h)`.
    pub fn contains_point(&self, px: f64, py: f64) -> bool {
        px >= self.x && px < self.x + self.w && py >= self.y && py < self.y + self.h
    }

    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let ix = (self.x + self.w).min(other.x + other.w) - self.x.max(other.x);
        let iy = (self.y + self.h).min(other.y + other.h) - self.y.max(other.y);
        if ix <= 0.0 || iy <= 0.0 {
            return 0.0;
        }
        let inter = ix * iy;
        inter / (self.area() + other.area() - inter)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Node {
    pub id: String,
    pub category: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attributes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox: Option<BoundingBox>,
}

impl Node {
    pub fn new(id: impl Into<String>, category: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            category: category.into(),
            attributes: Vec::new(),
            bbox: None,
        }
    }

    pub fn with_attributes(mut self, attrs: &[&str]) -> Self {
        self.attributes = attrs.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn with_bbox(mut self, b: BoundingBox) -> Self {
        self.bbox = Some(b);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Edge {
    pub subject: String,
    pub predicate: String,
    pub object: String,
}

impl Edge {
    pub fn new(subject: &str, predicate: &str, object: &str) -> Self {
        Self {
            subject: subject.into(),
            predicate: predicate.into(),
            object: object.into(),
        }
    }
}

/// `(subject node index, edge index, object node index)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triple {
    pub subject: usize,
    pub edge: usize,
    pub object: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneGraph {
    pub nodes: Vec<Node>,
    #[serde(default)]
    pub edges: Vec<Edge>,
}

impl SceneGraph {
    /// Parses and validates a scene graph. Node order is preserved.
    pub fn parse(text: &[u8], vocab: &Vocabulary) -> Result<Self> {
        let g: SceneGraph = serde_json::from_slice(text).map_err(|e| Error::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        g.validate(vocab)?;
        Ok(g)
    }

    /// Canonical pretty-printed JSON.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene graphs always serialize")
    }

    /// Hex SHA-256 of the canonical serialization.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        if self.nodes.is_empty() || self.nodes.len() > N_MAX {
            return Err(Error::Constraint(format!(
                "scene must have between 1 and {N_MAX} nodes, got {}",
                self.nodes.len()
            )));
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if self.nodes[..i].iter().any(|m| m.id == n.id) {
                return Err(Error::Constraint(format!("duplicate node id {:?}", n.id)));
            }
            vocab.category(&n.category)?;
            for a in &n.attributes {
                vocab.attribute(a)?;
            }
            if let Some(b) = &n.bbox {
                b.validate()?;
            }
        }
        for (k, e) in self.edges.iter().enumerate() {
            vocab.predicate(&e.predicate)?;
            for id in [&e.subject, &e.object] {
                if self.node_index(id).is_none() {
                    return Err(Error::Reference {
                        edge: k,
                        id: id.clone(),
                    });
                }
            }
            if e.subject == e.object {
                return Err(Error::Constraint(format!(
                    "edge {k} is a self-loop on {:?}",
                    e.subject
                )));
            }
        }
        Ok(())
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// One triple per edge, in edge order. Assumes a validated graph.
    pub fn triples(&self) -> Vec<Triple> {
        self.edges
            .iter()
            .enumerate()
            .map(|(k, e)| Triple {
                subject: self.node_index(&e.subject).expect("validated edge"),
                edge: k,
                object: self.node_index(&e.object).expect("validated edge"),
            })
            .collect()
    }

    /// Boxes of every node, or the id of the first node without one.
    pub fn boxes(&self) -> Result<Vec<BoundingBox>> {
        self.nodes
            .iter()
            .map(|n| n.bbox.ok_or_else(|| Error::MissingBox(n.id.clone())))
            .collect()
    }

    pub fn has_all_boxes(&self) -> bool {
        self.nodes.iter().all(|n| n.bbox.is_some())
    }

    /// Returns an edited copy; `self` is untouched.
    pub fn apply_edit(&self, edit: &Edit, vocab: &Vocabulary) -> Result<SceneGraph> {
        let mut g = self.clone();
        match edit {
            Edit::AddNode {
                category,
                attributes,
                relations,
            } => {
                if g.nodes.len() >= N_MAX {
                    return Err(Error::Constraint(format!(
                        "cannot add a node: scene already has {N_MAX} nodes"
                    )));
                }
                let id = g.fresh_id();
                g.nodes.push(Node {
                    id: id.clone(),
                    category: category.clone(),
                    attributes: attributes.clone(),
                    bbox: None,
                });
                for r in relations {
                    let (s, o) = if r.new_is_subject {
                        (id.clone(), r.other.clone())
                    } else {
                        (r.other.clone(), id.clone())
                    };
                    g.edges.push(Edge {
                        subject: s,
                        predicate: r.predicate.clone(),
                        object: o,
                    });
                }
            }
            Edit::SetAttribute { id, attribute } => {
                let i = g.require_node(id)?;
                g.nodes[i].attributes = vec![attribute.clone()];
            }
            Edit::RemoveAttribute { id, attribute } => {
                let i = g.require_node(id)?;
                g.nodes[i].attributes.retain(|a| a != attribute);
            }
        }
        g.validate(vocab)?;
        Ok(g)
    }

    fn require_node(&self, id: &str) -> Result<usize> {
        self.node_index(id)
            .ok_or_else(|| Error::Constraint(format!("no node with id {id:?}")))
    }

    fn fresh_id(&self) -> String {
        (self.nodes.len()..)
            .map(|k| format!("n{k}"))
            .find(|c| self.node_index(c).is_none())
            .expect("unbounded search")
    }
}

/// Relation attached to a node created by [`Edit::AddNode`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NewRelation {
    pub predicate: String,
    pub other: String,
    /// `true`: new node is the subject (`new predicate other`).
    pub new_is_subject: bool,
}

/// Graph manipulations supported by the layered sampler.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Edit {
    AddNode {
        category: String,
        attributes: Vec<String>,
        relations: Vec<NewRelation>,
    },
    /// Replaces the node's attribute list with the single given attribute.
    SetAttribute { id: String, attribute: String },
    RemoveAttribute { id: String, attribute: String },
}

impl Edit {
    /// Parses the command-line edit syntax:
    /// `set-attr ID ATTR`, `remove-attr ID ATTR`, or `add-node CAT REL... ID`
    /// (multi-word predicates allowed, the new node is the subject).
    pub fn parse(text: &str) -> Result<Edit> {
        let words: Vec<&str> = text.split_whitespace().collect();
        let bad = || Error::Constraint(format!("cannot parse edit {text:?}"));
        match words.as_slice() {
            ["set-attr", id, attr] => Ok(Edit::SetAttribute {
                id: id.to_string(),
                attribute: attr.to_string(),
            }),
            ["remove-attr", id, attr] => Ok(Edit::RemoveAttribute {
                id: id.to_string(),
                attribute: attr.to_string(),
            }),
            ["add-node", category] => Ok(Edit::AddNode {
                category: category.to_string(),
                attributes: vec![],
                relations: vec![],
            }),
            ["add-node", category, rest @ ..] if rest.len() >= 2 => {
                let (pred, other) = rest.split_at(rest.len() - 1);
                Ok(Edit::AddNode {
                    category: category.to_string(),
                    attributes: vec![],
                    relations: vec![NewRelation {
                        predicate: pred.join(" "),
                        other: other[0].to_string(),
                        new_is_subject: true,
                    }],
                })
            }
            _ => Err(bad()),
        }
    }
}
