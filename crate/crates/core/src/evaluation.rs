//! Precision/recall of a graph against gold annotations, and safety
//! counters over query records.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gateway::{Parsed, QueryRecord};
use crate::kgraph::KnowledgeGraph;
use crate::postprocess::Lexicon;
use crate::prompting::EntityCategory;
use crate::scalar::Scalar;
use crate::similarity::{cosine, SimilarityProvider};

pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.8;
pub const MAX_EXAMPLES: usize = 10;

/// Gold values for one (disease, category).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldAnnotation {
    pub disease: String,
    pub category: EntityCategory,
    pub values: Vec<String>,
}

/// Parse and check a gold file: a JSON list of annotations, each with at
/// least one value that survives normalization.
pub fn parse_gold(json: &str, lexicon: &Lexicon) -> Result<Vec<GoldAnnotation>> {
    let gold: Vec<GoldAnnotation> = serde_json::from_str(json)?;
    for g in &gold {
        if g.disease.trim().is_empty() {
            return Err(Error::Invalid("gold annotation with empty disease".into()));
        }
        if !g.values.iter().any(|v| lexicon.normalize(v).is_some()) {
            return Err(Error::Invalid(format!(
                "gold annotation ({}, {}) has no usable values",
                g.disease, g.category
            )));
        }
    }
    Ok(gold)
}

pub fn load_gold(path: &Path, lexicon: &Lexicon) -> Result<Vec<GoldAnnotation>> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_gold(&raw, lexicon)
}

/// One-to-one matching of normalized values. Equal strings pair first;
/// the rest pair greedily by decreasing similarity, counting only pairs
/// whose similarity exceeds `threshold`. Returned as (pred, gold) sorted by
/// pred.
pub fn match_entities<T, P>(
    predicted: &BTreeSet<String>,
    gold: &BTreeSet<String>,
    sim: &P,
    threshold: f64,
) -> Result<Vec<(String, String)>>
where
    T: Scalar,
    P: SimilarityProvider<T> + ?Sized,
{
    let mut pairs: Vec<(String, String)> = predicted.intersection(gold).map(|v| (v.clone(), v.clone())).collect();
    let preds: Vec<&String> = predicted.difference(gold).collect();
    let golds: Vec<&String> = gold.difference(predicted).collect();
    if !preds.is_empty() && !golds.is_empty() {
        let pe = preds.iter().map(|p| sim.embed(p)).collect::<Result<Vec<_>>>()?;
        let ge = golds.iter().map(|g| sim.embed(g)).collect::<Result<Vec<_>>>()?;
        let mut scored = Vec::new();
        for (i, a) in pe.iter().enumerate() {
            for (j, b) in ge.iter().enumerate() {
                let s = cosine(a, b)?.to_f64_lossy();
                if s > threshold {
                    scored.push((s, i, j));
                }
            }
        }
        // Best first; index order (sorted strings) breaks ties.
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
        let mut used_p = vec![false; preds.len()];
        let mut used_g = vec![false; golds.len()];
        for (_, i, j) in scored {
            if !used_p[i] && !used_g[j] {
                used_p[i] = true;
                used_g[j] = true;
                pairs.push((preds[i].clone(), golds[j].clone()));
            }
        }
    }
    pairs.sort();
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryMetrics {
    pub disease: String,
    pub category: EntityCategory,
    pub predicted: usize,
    pub gold: usize,
    pub matched: usize,
    pub precision: f64,
    pub recall: f64,
    /// Nothing was predicted; precision is a convention, not a ratio.
    pub empty_prediction: bool,
    /// Nothing is annotated; recall is a convention, not a ratio.
    pub empty_gold: bool,
    pub matches: Vec<(String, String)>,
    pub unmatched_predicted: Vec<String>,
    pub unmatched_gold: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub match_threshold: f64,
    pub categories: Vec<CategoryMetrics>,
    /// Diseases in the graph with no gold annotation at all.
    pub uncovered_diseases: Vec<String>,
}

fn ratio(num: usize, den: usize) -> f64 {
    num as f64 / den as f64
}

fn disease_key(d: &str) -> String {
    d.trim().to_lowercase()
}

/// Score every (disease, category) that has gold annotations, or has
/// predictions for a disease that has gold annotations.
///
/// precision = matched / predicted and recall = matched / gold. With no
/// predictions, precision is 0 (1 if gold is also empty) and flagged; with
/// no gold, recall is 1 and flagged.
pub fn precision_recall<T, P>(
    kg: &KnowledgeGraph,
    gold: &[GoldAnnotation],
    lexicon: &Lexicon,
    sim: &P,
    match_threshold: f64,
) -> Result<MetricsReport>
where
    T: Scalar,
    P: SimilarityProvider<T> + ?Sized,
{
    if !(0.0..=1.0).contains(&match_threshold) {
        return Err(Error::Invalid(format!("match_threshold must be in [0,1], got {match_threshold}")));
    }
    type Key = (String, EntityCategory);
    let mut gold_sets: BTreeMap<Key, BTreeSet<String>> = BTreeMap::new();
    let mut names: BTreeMap<String, String> = BTreeMap::new();
    for g in gold {
        let d = disease_key(&g.disease);
        names.entry(d.clone()).or_insert_with(|| g.disease.clone());
        gold_sets
            .entry((d, g.category))
            .or_default()
            .extend(g.values.iter().filter_map(|v| lexicon.normalize(v)));
    }
    let mut pred_sets: BTreeMap<Key, BTreeSet<String>> = BTreeMap::new();
    let mut uncovered = BTreeSet::new();
    for e in &kg.edges {
        let d = disease_key(&e.from);
        if !names.contains_key(&d) {
            uncovered.insert(e.from.clone());
            continue;
        }
        if let Some(v) = lexicon.normalize(&e.to) {
            pred_sets.entry((d, e.category)).or_default().insert(v);
        }
    }

    let keys: BTreeSet<&Key> = gold_sets.keys().chain(pred_sets.keys()).collect();
    let empty = BTreeSet::new();
    let mut categories = Vec::with_capacity(keys.len());
    for key in keys {
        let p = pred_sets.get(key).unwrap_or(&empty);
        let g = gold_sets.get(key).unwrap_or(&empty);
        let matches = match_entities(p, g, sim, match_threshold)?;
        let m = matches.len();
        let (precision, empty_prediction) = match (p.is_empty(), g.is_empty()) {
            (true, true) => (1.0, true),
            (true, false) => (0.0, true),
            _ => (ratio(m, p.len()), false),
        };
        let (recall, empty_gold) = if g.is_empty() { (1.0, true) } else { (ratio(m, g.len()), false) };
        let matched_p: BTreeSet<&String> = matches.iter().map(|(a, _)| a).collect();
        let matched_g: BTreeSet<&String> = matches.iter().map(|(_, b)| b).collect();
        categories.push(CategoryMetrics {
            disease: names[&key.0].clone(),
            category: key.1,
            predicted: p.len(),
            gold: g.len(),
            matched: m,
            precision,
            recall,
            empty_prediction,
            empty_gold,
            unmatched_predicted: p.iter().filter(|v| !matched_p.contains(v)).cloned().collect(),
            unmatched_gold: g.iter().filter(|v| !matched_g.contains(v)).cloned().collect(),
            matches,
        });
    }
    Ok(MetricsReport {
        match_threshold,
        categories,
        uncovered_diseases: uncovered.into_iter().collect(),
    })
}

impl MetricsReport {
    pub fn get(&self, disease: &str, category: EntityCategory) -> Option<&CategoryMetrics> {
        let d = disease_key(disease);
        self.categories
            .iter()
            .find(|c| c.category == category && disease_key(&c.disease) == d)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// One row per disease with precision/recall column pairs for
    /// Treatment, Factor and Coexists_with; `-` where nothing was scored.
    pub fn to_markdown(&self, model: &str) -> String {
        let mut out = String::from(
            "| Disease | Model | Treatment P | Treatment R | Factor P | Factor R | Coexists_with P | Coexists_with R |\n\
             |---|---|---|---|---|---|---|---|\n",
        );
        let mut diseases: Vec<&str> = self.categories.iter().map(|c| c.disease.as_str()).collect();
        diseases.dedup();
        for d in diseases {
            let _ = write!(out, "| {d} | {model} |");
            for cat in EntityCategory::ALL {
                match self.get(d, cat) {
                    Some(m) => {
                        let _ = write!(out, " {} | {} |", fmt_metric(m.precision), fmt_metric(m.recall));
                    }
                    None => out.push_str(" - | - |"),
                }
            }
            out.push('\n');
        }
        out
    }
}

fn fmt_metric(x: f64) -> String {
    let s = format!("{x:.2}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    s.to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub record_id: String,
    pub raw_response: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendSafety {
    pub backend: String,
    pub total_queries: usize,
    pub answers: usize,
    pub dont_know: usize,
    pub unstructured: usize,
    pub unstructured_rate: f64,
    pub dontknow_rate: f64,
    /// At most [`MAX_EXAMPLES`] raw responses per failure class, in record
    /// id order.
    pub examples: BTreeMap<String, Vec<Example>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyReport {
    pub backends: Vec<BackendSafety>,
}

impl SafetyReport {
    pub fn backend(&self, name: &str) -> Option<&BackendSafety> {
        self.backends.iter().find(|b| b.backend == name)
    }
}

/// Per-backend rates of unstructured and refusal responses.
pub fn safety_metrics(records: &[QueryRecord]) -> Result<SafetyReport> {
    if records.is_empty() {
        return Err(Error::Invalid("no query records to report on".into()));
    }
    let mut by_backend: BTreeMap<&str, Vec<&QueryRecord>> = BTreeMap::new();
    for r in records {
        by_backend.entry(r.backend.as_str()).or_default().push(r);
    }
    let backends = by_backend
        .into_iter()
        .map(|(backend, mut recs)| {
            recs.sort_by(|a, b| a.id.cmp(&b.id));
            let mut examples: BTreeMap<String, Vec<Example>> = BTreeMap::new();
            let (mut answers, mut dont_know, mut unstructured) = (0, 0, 0);
            for r in &recs {
                match r.parsed {
                    Parsed::Answers { .. } => {
                        answers += 1;
                        continue;
                    }
                    Parsed::DontKnow => dont_know += 1,
                    Parsed::Unstructured => unstructured += 1,
                }
                let list = examples.entry(r.parsed.class().to_string()).or_default();
                if list.len() < MAX_EXAMPLES {
                    list.push(Example {
                        record_id: r.id.clone(),
                        raw_response: r.raw_response.clone(),
                    });
                }
            }
            let total = recs.len();
            BackendSafety {
                backend: backend.to_string(),
                total_queries: total,
                answers,
                dont_know,
                unstructured,
                unstructured_rate: ratio(unstructured, total),
                dontknow_rate: ratio(dont_know, total),
                examples,
            }
        })
        .collect();
    Ok(SafetyReport { backends })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extraction::Relation;
    use crate::kgraph::build_graph;
    use crate::similarity::TrigramEmbedder;

    fn set(xs: &[&str]) -> BTreeSet<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn trigram() -> TrigramEmbedder<f64> {
        TrigramEmbedder::default()
    }

    #[test]
    fn matching_examples() {
        let p = trigram();
        assert_eq!(
            match_entities(&set(&["areds vitamins"]), &set(&["areds vitamins"]), &p, 0.8).unwrap().len(),
            1
        );
        assert!(match_entities(&set(&["fish"]), &set(&["spinach"]), &p, 0.8).unwrap().is_empty());
        assert!(match_entities(&set(&["a"]), &set(&[]), &p, 0.8).unwrap().is_empty());
        // sim = 0.8686 per oracle: matched at 0.8, not at 0.9.
        let fuzzy = match_entities(&set(&["areds vitamins"]), &set(&["areds-2 vitamins"]), &p, 0.8).unwrap();
        assert_eq!(fuzzy, [("areds vitamins".to_string(), "areds-2 vitamins".to_string())]);
        assert!(match_entities(&set(&["areds vitamins"]), &set(&["areds-2 vitamins"]), &p, 0.9)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn matching_is_one_to_one() {
        let p = trigram();
        let m = match_entities(
            &set(&["areds vitamins", "areds vitamin"]),
            &set(&["areds-2 vitamins"]),
            &p,
            0.5,
        )
        .unwrap();
        assert_eq!(m.len(), 1);
    }

    fn graph(values: &[(EntityCategory, &str)]) -> KnowledgeGraph {
        let rels: Vec<Relation> = values
            .iter()
            .map(|(c, v)| Relation {
                disease: "amd".into(),
                category: *c,
                entity: v.to_string(),
                label: v.to_string(),
                avg_score: 0.5,
                count: 10,
            })
            .collect();
        build_graph(&rels).unwrap()
    }

    fn gold(cat: EntityCategory, values: &[&str]) -> GoldAnnotation {
        GoldAnnotation {
            disease: "AMD".into(),
            category: cat,
            values: values.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn precision_recall_arithmetic() {
        use EntityCategory::*;
        let kg = graph(&[(Treatment, "avastin"), (Treatment, "lucentis"), (Treatment, "eylea")]);
        let g = [gold(Treatment, &["avastin", "lucentis", "spinach"]), gold(Factor, &["smoking"])];
        let r = precision_recall(&kg, &g, &Lexicon::default(), &trigram(), 0.8).unwrap();
        let t = r.get("amd", Treatment).unwrap();
        assert_eq!((t.precision, t.recall), (2.0 / 3.0, 2.0 / 3.0));
        let f = r.get("amd", Factor).unwrap();
        assert_eq!((f.precision, f.recall, f.empty_prediction), (0.0, 0.0, true));
        assert!(r.uncovered_diseases.is_empty());
        assert!(r.to_markdown("m").contains("| AMD | m | 0.67 | 0.67 | 0 | 0 | - | - |"));
    }

    #[test]
    fn uncovered_and_empty_gold() {
        use EntityCategory::*;
        let kg = graph(&[(Treatment, "avastin"), (Factor, "smoking")]);
        let r = precision_recall(&kg, &[gold(Treatment, &["avastin"])], &Lexicon::default(), &trigram(), 0.8).unwrap();
        let f = r.get("amd", Factor).unwrap();
        assert_eq!((f.precision, f.recall, f.empty_gold), (0.0, 1.0, true));
        let none = precision_recall(&kg, &[], &Lexicon::default(), &trigram(), 0.8).unwrap();
        assert!(none.categories.is_empty());
        assert_eq!(none.uncovered_diseases, ["amd"]);
    }

    #[test]
    fn gold_validation() {
        let lex = Lexicon::default();
        assert!(parse_gold(r#"[{"disease":"amd","category":"factor","values":["smoking"]}]"#, &lex).is_ok());
        assert!(parse_gold(r#"[{"disease":"amd","category":"factor","values":[]}]"#, &lex).is_err());
        assert!(parse_gold(r#"[{"disease":"amd","category":"effect","values":["x"]}]"#, &lex).is_err());
    }

    #[test]
    fn empty_records_rejected() {
        assert!(safety_metrics(&[]).is_err());
    }
}
