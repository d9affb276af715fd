//! Cleanup of model predictions: score filtering, refusal removal, text
//! normalization, similarity grouping and span splitting.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::similarity::{cosine, EmbeddingVector, SimilarityProvider};
use crate::text;

pub const DEFAULT_MIN_SCORE: f64 = 0.08;
pub const DEFAULT_GROUPING_SIMILARITY: f64 = 0.8;

const STOPWORDS: &str = include_str!("../assets/stopwords.txt");
const REFUSALS: &str = include_str!("../assets/refusals.txt");

/// Stop-word and refusal-variation lists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Lexicon {
    stopwords: HashSet<String>,
    refusals: HashSet<String>,
}

fn parse_list(raw: &str) -> impl Iterator<Item = String> + '_ {
    raw.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(text::fold)
        .filter(|l| !l.is_empty())
}

impl Default for Lexicon {
    fn default() -> Self {
        Self::from_lists(STOPWORDS, REFUSALS)
    }
}

impl Lexicon {
    /// Build from plain-text lists: one entry per line, `#` comments.
    pub fn from_lists(stopwords: &str, refusals: &str) -> Self {
        Self {
            stopwords: parse_list(stopwords).collect(),
            refusals: parse_list(refusals).collect(),
        }
    }

    /// Shipped lists, with either one replaced by a file when a path is given.
    pub fn load(stopwords: Option<&Path>, refusals: Option<&Path>) -> Result<Self> {
        let read = |p: &Path| fs::read_to_string(p).map_err(|e| Error::io(p, e));
        let s = match stopwords {
            Some(p) => read(p)?,
            None => STOPWORDS.to_string(),
        };
        let r = match refusals {
            Some(p) => read(p)?,
            None => REFUSALS.to_string(),
        };
        Ok(Self::from_lists(&s, &r))
    }

    pub fn shared() -> &'static Lexicon {
        static SHARED: OnceLock<Lexicon> = OnceLock::new();
        SHARED.get_or_init(Lexicon::default)
    }

    /// Lowercase, strip punctuation, drop stop words, collapse whitespace.
    /// `None` when nothing is left.
    pub fn normalize(&self, text: &str) -> Option<String> {
        let out = text::fold(text)
            .split(' ')
            .filter(|w| !w.is_empty() && !self.stopwords.contains(*w))
            .collect::<Vec<_>>()
            .join(" ");
        (!out.is_empty()).then_some(out)
    }

    /// Whole-text match against the refusal variations.
    pub fn is_refusal(&self, text: &str) -> bool {
        self.refusals.contains(&text::fold(text))
    }
}

/// [`Lexicon::normalize`] with the shipped lists.
pub fn normalize(text: &str) -> Option<String> {
    Lexicon::shared().normalize(text)
}

/// [`Lexicon::is_refusal`] with the shipped lists.
pub fn is_refusal(text: &str) -> bool {
    Lexicon::shared().is_refusal(text)
}

/// A predicted value: the model's surface text, its normalized form (empty
/// until normalized) and the model score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub text: String,
    #[serde(default)]
    pub normalized: String,
    pub score: f64,
}

impl Prediction {
    pub fn new(text: impl Into<String>, score: f64) -> Self {
        Self {
            text: text.into(),
            normalized: String::new(),
            score,
        }
    }

    fn key(&self) -> &str {
        if self.normalized.is_empty() {
            &self.text
        } else {
            &self.normalized
        }
    }
}

/// Keep predictions scoring at least `min_score`.
pub fn filter_low_score(preds: Vec<Prediction>, min_score: f64) -> Vec<Prediction> {
    preds.into_iter().filter(|p| p.score >= min_score).collect()
}

pub fn drop_refusals(preds: Vec<Prediction>, lexicon: &Lexicon) -> Vec<Prediction> {
    preds.into_iter().filter(|p| !lexicon.is_refusal(&p.text)).collect()
}

/// Fill in `normalized`; predictions that normalize to nothing are dropped.
pub fn normalize_all(preds: Vec<Prediction>, lexicon: &Lexicon) -> Vec<Prediction> {
    preds
        .into_iter()
        .filter_map(|mut p| {
            p.normalized = lexicon.normalize(&p.text)?;
            Some(p)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Linkage {
    /// Connected components of the "more similar than threshold" graph.
    #[default]
    Single,
    /// A prediction joins a group only when similar to every member.
    Complete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionGroup {
    pub members: Vec<Prediction>,
    pub representative: Prediction,
}

/// Representative order: higher score, then longer text, then smaller text.
fn rank(a: &Prediction, b: &Prediction) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| b.text.len().cmp(&a.text.len()))
        .then_with(|| a.text.cmp(&b.text))
}

struct DisjointSet(Vec<usize>);

impl DisjointSet {
    fn find(&mut self, x: usize) -> usize {
        let mut r = x;
        while self.0[r] != r {
            r = self.0[r];
        }
        let mut c = x;
        while self.0[c] != r {
            let next = self.0[c];
            self.0[c] = r;
            c = next;
        }
        r
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Group predictions whose similarity exceeds `threshold`. Similarity is
/// computed on the normalized text when present, else on the surface text.
///
/// Each group's representative is its best-ranked member (highest score,
/// then longest text, then lexicographically smallest). Groups are returned
/// in representative rank order and members in rank order, so the result
/// does not depend on input order.
pub fn group_similar<T, P>(
    preds: &[Prediction],
    sim: &P,
    threshold: f64,
    linkage: Linkage,
) -> Result<Vec<PredictionGroup>>
where
    T: Scalar,
    P: SimilarityProvider<T> + ?Sized,
{
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Invalid(format!(
            "grouping threshold must be in [0,1], got {threshold}"
        )));
    }
    let mut items: Vec<&Prediction> = preds.iter().collect();
    items.sort_by(|a, b| rank(a, b));

    // One embedding per distinct key.
    let mut cache: BTreeMap<&str, EmbeddingVector<T>> = BTreeMap::new();
    for p in &items {
        if !cache.contains_key(p.key()) {
            cache.insert(p.key(), sim.embed(p.key())?);
        }
    }
    let similar = |a: &Prediction, b: &Prediction| -> Result<bool> {
        if a.key() == b.key() {
            return Ok(true);
        }
        Ok(cosine(&cache[a.key()], &cache[b.key()])?.to_f64_lossy() > threshold)
    };

    let n = items.len();
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    match linkage {
        Linkage::Single => {
            let mut ds = DisjointSet((0..n).collect());
            for i in 0..n {
                for j in i + 1..n {
                    if similar(items[i], items[j])? {
                        ds.union(i, j);
                    }
                }
            }
            let mut by_root: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for i in 0..n {
                by_root.entry(ds.find(i)).or_default().push(i);
            }
            clusters.extend(by_root.into_values());
        }
        Linkage::Complete => {
            for i in 0..n {
                let mut home = None;
                for (g, members) in clusters.iter().enumerate() {
                    let mut all = true;
                    for &m in members {
                        if !similar(items[i], items[m])? {
                            all = false;
                            break;
                        }
                    }
                    if all {
                        home = Some(g);
                        break;
                    }
                }
                match home {
                    Some(g) => clusters[g].push(i),
                    None => clusters.push(vec![i]),
                }
            }
        }
    }

    // Items are in rank order, so the smallest index is the representative.
    clusters.sort_by_key(|c| c[0]);
    Ok(clusters
        .into_iter()
        .map(|c| PredictionGroup {
            representative: items[c[0]].clone(),
            members: c.into_iter().map(|i| items[i].clone()).collect(),
        })
        .collect())
}

/// Split a representative's surface text into values on commas and on the
/// standalone conjunction "and". Values are trimmed of whitespace and edge
/// punctuation; each inherits the representative's score.
pub fn split_spans(representative: &Prediction) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for piece in representative.text.split([',', ';', '\n']) {
        let mut current: Vec<&str> = Vec::new();
        for word in piece.split_whitespace() {
            if word.trim_matches(|c: char| c.is_ascii_punctuation()).eq_ignore_ascii_case("and") {
                push_span(&mut out, &current, representative.score);
                current.clear();
            } else {
                current.push(word);
            }
        }
        push_span(&mut out, &current, representative.score);
    }
    out
}

fn push_span(out: &mut Vec<(String, f64)>, words: &[&str], score: f64) {
    let joined = words.join(" ");
    let value = joined.trim_matches(|c: char| c.is_whitespace() || ".:!?\"'()[]".contains(c));
    if !value.is_empty() {
        out.push((value.to_string(), score));
    }
}

/// The whole cleanup for one (disease, category) prediction list:
/// score filter, refusal removal, normalization, grouping, then splitting of
/// each group's representative. Returned values are normalized; a value
/// produced twice keeps its highest score. Sorted by value.
pub fn run_chain<T, P>(
    preds: Vec<Prediction>,
    lexicon: &Lexicon,
    sim: &P,
    min_score: f64,
    grouping_similarity: f64,
    linkage: Linkage,
) -> Result<Vec<(String, f64)>>
where
    T: Scalar,
    P: SimilarityProvider<T> + ?Sized,
{
    let preds = filter_low_score(preds, min_score);
    let preds = drop_refusals(preds, lexicon);
    let preds = normalize_all(preds, lexicon);
    let groups = group_similar(&preds, sim, grouping_similarity, linkage)?;
    let mut best: BTreeMap<String, f64> = BTreeMap::new();
    for g in &groups {
        for (value, score) in split_spans(&g.representative) {
            if let Some(v) = lexicon.normalize(&value) {
                let slot = best.entry(v).or_insert(score);
                *slot = slot.max(score);
            }
        }
    }
    Ok(best.into_iter().collect())
}
