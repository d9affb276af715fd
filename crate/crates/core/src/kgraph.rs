//! The directed disease → entity graph and its JSON, DOT and CSV forms.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extraction::Relation;
use crate::postprocess::Lexicon;
use crate::prompting::EntityCategory;

pub const KG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Disease,
    Entity,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Node {
    pub kind: NodeKind,
    pub label: String,
}

/// `from` names a disease node and `to` an entity node, by label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: String,
    pub to: String,
    pub category: EntityCategory,
    pub avg_score: f64,
    pub count: usize,
}

/// Nodes are sorted by (kind, label) and edges by (from, category, to).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeGraph {
    pub schema_version: u32,
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
}

impl Default for KnowledgeGraph {
    fn default() -> Self {
        Self {
            schema_version: KG_SCHEMA_VERSION,
            nodes: Vec::new(),
            edges: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Json,
    Dot,
    Csv,
}

impl FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(Self::Json),
            "dot" | "gv" => Ok(Self::Dot),
            "csv" => Ok(Self::Csv),
            _ => Err(Error::UnknownFormat(s.to_string())),
        }
    }
}

/// Node identity: the normalized label, falling back to the lowercased
/// label when normalization removes everything.
fn node_key(lexicon: &Lexicon, label: &str) -> String {
    lexicon
        .normalize(label)
        .unwrap_or_else(|| label.trim().to_lowercase())
}

/// Build the graph: one node per disease, one per distinct normalized
/// entity, one edge per relation. Exact duplicate relations collapse; two
/// relations for one (disease, entity) that disagree are an error. An entity
/// shared by several diseases is displayed under the label of its
/// highest-scoring relation.
pub fn build_graph(relations: &[Relation]) -> Result<KnowledgeGraph> {
    build_graph_with(relations, &Lexicon::default())
}

pub fn build_graph_with(relations: &[Relation], lexicon: &Lexicon) -> Result<KnowledgeGraph> {
    let mut diseases: BTreeMap<String, String> = BTreeMap::new();
    let mut entities: BTreeMap<String, (f64, String)> = BTreeMap::new();
    let mut edges: BTreeMap<(String, String), &Relation> = BTreeMap::new();

    for r in relations {
        if r.disease.trim().is_empty() || r.label.trim().is_empty() {
            return Err(Error::Graph(format!("relation with empty endpoint: {r:?}")));
        }
        let dkey = node_key(lexicon, &r.disease);
        let ekey = node_key(lexicon, &r.label);
        diseases.entry(dkey.clone()).or_insert_with(|| r.disease.clone());
        let slot = entities.entry(ekey.clone()).or_insert((r.avg_score, r.label.clone()));
        if r.avg_score > slot.0 || (r.avg_score == slot.0 && r.label < slot.1) {
            *slot = (r.avg_score, r.label.clone());
        }
        match edges.get(&(dkey.clone(), ekey.clone())) {
            Some(prev) if prev.category != r.category || prev.avg_score != r.avg_score || prev.count != r.count => {
                return Err(Error::Graph(format!(
                    "conflicting relations for ({}, {}): {} vs {}",
                    r.disease, r.label, prev.category, r.category
                )));
            }
            Some(_) => {}
            None => {
                edges.insert((dkey, ekey), r);
            }
        }
    }

    let mut nodes: Vec<Node> = diseases
        .values()
        .map(|label| Node {
            label: label.clone(),
            kind: NodeKind::Disease,
        })
        .chain(entities.values().map(|(_, label)| Node {
            label: label.clone(),
            kind: NodeKind::Entity,
        }))
        .collect();
    nodes.sort();
    let mut edges: Vec<Edge> = edges
        .into_iter()
        .map(|((dkey, ekey), r)| Edge {
            from: diseases[&dkey].clone(),
            to: entities[&ekey].1.clone(),
            category: r.category,
            avg_score: r.avg_score,
            count: r.count,
        })
        .collect();
    sort_edges(&mut edges);
    Ok(KnowledgeGraph {
        schema_version: KG_SCHEMA_VERSION,
        nodes,
        edges,
    })
}

fn sort_edges(edges: &mut [Edge]) {
    edges.sort_by(|a, b| {
        (&a.from, a.category, &a.to).cmp(&(&b.from, b.category, &b.to))
    });
}

impl KnowledgeGraph {
    pub fn node(&self, label: &str, kind: NodeKind) -> Option<&Node> {
        self.nodes.iter().find(|n| n.kind == kind && n.label == label)
    }

    /// Check the structural invariants: known schema version, endpoints
    /// present with the right kinds, no duplicate nodes, at most one edge
    /// per (disease, entity), finite statistics.
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != KG_SCHEMA_VERSION {
            return Err(Error::Graph(format!("unsupported schema_version {}", self.schema_version)));
        }
        let mut seen = std::collections::BTreeSet::new();
        for n in &self.nodes {
            if !seen.insert((n.kind, n.label.as_str())) {
                return Err(Error::Graph(format!("duplicate {:?} node `{}`", n.kind, n.label)));
            }
        }
        let mut pairs = std::collections::BTreeSet::new();
        for e in &self.edges {
            if !seen.contains(&(NodeKind::Disease, e.from.as_str())) {
                return Err(Error::Graph(format!("edge from unknown disease `{}`", e.from)));
            }
            if !seen.contains(&(NodeKind::Entity, e.to.as_str())) {
                return Err(Error::Graph(format!("edge to unknown entity `{}`", e.to)));
            }
            if !pairs.insert((e.from.as_str(), e.to.as_str())) {
                return Err(Error::Graph(format!("several edges {} -> {}", e.from, e.to)));
            }
            if !e.avg_score.is_finite() || !(0.0..=1.0).contains(&e.avg_score) {
                return Err(Error::Graph(format!("edge {} -> {} has avg_score {}", e.from, e.to, e.avg_score)));
            }
        }
        Ok(())
    }

    pub fn export(&self, format: ExportFormat) -> Result<String> {
        match format {
            ExportFormat::Json => self.to_json(),
            ExportFormat::Dot => Ok(self.to_dot()),
            ExportFormat::Csv => self.to_csv(),
        }
    }

    /// Canonical JSON: sorted keys, sorted arrays, two-space indent,
    /// trailing newline.
    pub fn to_json(&self) -> Result<String> {
        let mut g = self.clone();
        g.nodes.sort();
        sort_edges(&mut g.edges);
        // Round-tripping through Value sorts object keys.
        let value = serde_json::to_value(&g)?;
        let mut out = serde_json::to_string_pretty(&value)?;
        out.push('\n');
        Ok(out)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let g: KnowledgeGraph = serde_json::from_str(json)?;
        g.validate()?;
        Ok(g)
    }

    pub fn to_dot(&self) -> String {
        let id = |kind: NodeKind, label: &str| {
            let prefix = match kind {
                NodeKind::Disease => "disease",
                NodeKind::Entity => "entity",
            };
            dot_quote(&format!("{prefix}:{label}"))
        };
        let mut out = String::from("digraph kg {\n  rankdir=LR;\n");
        for n in &self.nodes {
            let shape = match n.kind {
                NodeKind::Disease => "box",
                NodeKind::Entity => "ellipse",
            };
            let _ = writeln!(out, "  {} [label={}, shape={shape}];", id(n.kind, &n.label), dot_quote(&n.label));
        }
        for e in &self.edges {
            let _ = writeln!(
                out,
                "  {} -> {} [label={}, avg_score={}, count={}];",
                id(NodeKind::Disease, &e.from),
                id(NodeKind::Entity, &e.to),
                dot_quote(&e.category.to_string()),
                dot_quote(&e.avg_score.to_string()),
                e.count
            );
        }
        out.push_str("}\n");
        out
    }

    /// Rows `disease,category,entity,avg_score,count`, sorted.
    pub fn to_csv(&self) -> Result<String> {
        let mut rows: Vec<&Edge> = self.edges.iter().collect();
        rows.sort_by(|a, b| (&a.from, a.category, &a.to).cmp(&(&b.from, b.category, &b.to)));
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Graph(format!("csv export: {e}"));
        w.write_record(["disease", "category", "entity", "avg_score", "count"])
            .map_err(csv_err)?;
        for e in rows {
            w.write_record([
                e.from.as_str(),
                &e.category.to_string(),
                e.to.as_str(),
                &e.avg_score.to_string(),
                &e.count.to_string(),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Graph(format!("csv export: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Graph(e.to_string()))
    }
}

fn dot_quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}
