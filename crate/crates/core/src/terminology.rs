//! Disease alias expansion and disease-specific note identification.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{ClinicalNote, Corpus};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::similarity::{similarity, SimilarityProvider};

/// A disease and the surface forms it goes by. `canonical` is always one of
/// the aliases; aliases are stored lowercased.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiseaseConcept {
    pub canonical: String,
    pub aliases: BTreeSet<String>,
    /// Set when the alias source had no entry for the disease.
    #[serde(default)]
    pub unknown: bool,
}

impl DiseaseConcept {
    pub fn new<I, S>(canonical: &str, aliases: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut set: BTreeSet<String> = aliases
            .into_iter()
            .map(|a| a.as_ref().trim().to_lowercase())
            .filter(|a| !a.is_empty())
            .collect();
        set.insert(canonical.trim().to_lowercase());
        Self {
            canonical: canonical.to_string(),
            aliases: set,
            unknown: false,
        }
    }
}

/// A mention found by an NER model, as byte offsets into the note text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NerSpan {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

impl NerSpan {
    pub fn validate(&self, note: &str) -> Result<()> {
        let ok = self.start < self.end
            && self.end <= note.len()
            && note.get(self.start..self.end) == Some(self.text.as_str());
        if ok {
            Ok(())
        } else {
            Err(Error::Invalid(format!(
                "span {:?} [{}, {}) does not match the note text",
                self.text, self.start, self.end
            )))
        }
    }
}

pub trait AliasProvider: Send + Sync {
    fn name(&self) -> &str;

    /// `Ok(None)` when the disease is not known to the provider.
    fn expand(&self, canonical: &str) -> Result<Option<Vec<String>>>;
}

pub trait NerProvider: Send + Sync {
    fn name(&self) -> &str;

    fn extract(&self, text: &str) -> Result<Vec<NerSpan>>;
}

/// Alias table loaded from JSON: `{"amd": ["armd", "age-related macular degeneration"]}`.
/// Keys match case-insensitively.
#[derive(Debug, Clone, Default)]
pub struct AliasTable {
    entries: BTreeMap<String, Vec<String>>,
}

impl AliasTable {
    pub fn new(entries: BTreeMap<String, Vec<String>>) -> Self {
        Self {
            entries: entries
                .into_iter()
                .map(|(k, v)| (k.trim().to_lowercase(), v))
                .collect(),
        }
    }

    pub fn from_json(json: &str) -> Result<Self> {
        Ok(Self::new(serde_json::from_str(json)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&raw)
    }
}

impl AliasProvider for AliasTable {
    fn name(&self) -> &str {
        "alias-table"
    }

    fn expand(&self, canonical: &str) -> Result<Option<Vec<String>>> {
        Ok(self.entries.get(&canonical.trim().to_lowercase()).cloned())
    }
}

/// NER stand-in that never finds anything.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoNer;

impl NerProvider for NoNer {
    fn name(&self) -> &str {
        "none"
    }

    fn extract(&self, _text: &str) -> Result<Vec<NerSpan>> {
        Ok(Vec::new())
    }
}

/// File-backed NER: a fixed list of mention strings; every occurrence of
/// each one in a note is reported as a span.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LexiconNer {
    pub mentions: Vec<String>,
}

impl LexiconNer {
    pub fn new<I: IntoIterator<Item = S>, S: Into<String>>(mentions: I) -> Self {
        Self {
            mentions: mentions.into_iter().map(Into::into).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&raw)?)
    }
}

impl NerProvider for LexiconNer {
    fn name(&self) -> &str {
        "lexicon"
    }

    fn extract(&self, text: &str) -> Result<Vec<NerSpan>> {
        let mut spans: Vec<NerSpan> = self
            .mentions
            .iter()
            .filter(|m| !m.is_empty())
            .flat_map(|m| {
                text.match_indices(m.as_str()).map(|(start, s)| NerSpan {
                    text: s.to_string(),
                    start,
                    end: start + s.len(),
                })
            })
            .collect();
        spans.sort_by_key(|s| (s.start, s.end));
        Ok(spans)
    }
}

/// Look a disease up in the alias source. An unknown disease yields a
/// concept containing only itself, flagged `unknown`.
pub fn expand_aliases(disease: &str, provider: &dyn AliasProvider) -> Result<DiseaseConcept> {
    if disease.trim().is_empty() {
        return Err(Error::Invalid("disease name is empty".into()));
    }
    match provider
        .expand(disease)
        .map_err(|e| Error::provider(provider.name(), e))?
    {
        Some(aliases) => Ok(DiseaseConcept::new(disease, aliases)),
        None => {
            log::warn!("no aliases for `{disease}` in `{}`", provider.name());
            let mut concept = DiseaseConcept::new(disease, std::iter::empty::<&str>());
            concept.unknown = true;
            Ok(concept)
        }
    }
}

/// Case-insensitive search for `needle` in `haystack` where the match is not
/// flanked by alphanumeric characters.
pub fn contains_on_token_boundary(haystack: &str, needle: &str) -> bool {
    let hay = haystack.to_lowercase();
    let needle = needle.trim().to_lowercase();
    if needle.is_empty() {
        return false;
    }
    hay.match_indices(&needle).any(|(i, m)| {
        let before = hay[..i].chars().next_back();
        let after = hay[i + m.len()..].chars().next();
        !before.is_some_and(char::is_alphanumeric) && !after.is_some_and(char::is_alphanumeric)
    })
}

/// Notes that mention the disease, in corpus order.
///
/// A note is taken when any alias occurs in it on token boundaries. Only on
/// a miss is the NER provider consulted; the note is then taken when some
/// extracted mention is more similar to the canonical name than `threshold`.
pub fn identify_disease_notes<T, P>(
    corpus: &Corpus,
    concept: &DiseaseConcept,
    ner: &dyn NerProvider,
    sim: &P,
    threshold: f64,
) -> Result<Vec<ClinicalNote>>
where
    T: Scalar,
    P: SimilarityProvider<T> + ?Sized,
{
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Invalid(format!(
            "threshold_notes_identification must be in [0,1], got {threshold}"
        )));
    }
    let mut out = Vec::new();
    for note in corpus {
        if note_matches(note, concept, ner, sim, threshold)
            .map_err(|e| Error::in_note(&note.id, e))?
        {
            out.push(note.clone());
        }
    }
    Ok(out)
}

fn note_matches<T, P>(
    note: &ClinicalNote,
    concept: &DiseaseConcept,
    ner: &dyn NerProvider,
    sim: &P,
    threshold: f64,
) -> Result<bool>
where
    T: Scalar,
    P: SimilarityProvider<T> + ?Sized,
{
    if concept
        .aliases
        .iter()
        .any(|a| contains_on_token_boundary(&note.text, a))
    {
        return Ok(true);
    }
    let spans = ner
        .extract(&note.text)
        .map_err(|e| Error::provider(ner.name(), e))?;
    for span in &spans {
        span.validate(&note.text)?;
        if span.text.trim().is_empty() {
            continue;
        }
        let s: T = similarity(sim, &span.text, &concept.canonical)?;
        if s.to_f64_lossy() > threshold {
            return Ok(true);
        }
    }
    Ok(false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::similarity::TrigramEmbedder;

    fn amd_table() -> AliasTable {
        AliasTable::from_json(r#"{"AMD": ["ARMD", "age-related macular degeneration"]}"#).unwrap()
    }

    #[test]
    fn expands_from_table() {
        let t = amd_table();
        let c = expand_aliases("amd", &t).unwrap();
        assert_eq!(c.aliases.len(), 3);
        assert!(c.aliases.contains("amd") && c.aliases.contains("armd"));
        assert!(!c.unknown);
        assert_eq!(expand_aliases("amd", &t).unwrap(), c);
    }

    #[test]
    fn unknown_disease_falls_back_to_itself() {
        let c = expand_aliases("glaucoma", &amd_table()).unwrap();
        assert!(c.unknown);
        assert_eq!(c.aliases.iter().collect::<Vec<_>>(), ["glaucoma"]);
        assert!(expand_aliases("  ", &amd_table()).is_err());
    }

    #[test]
    fn token_boundary_matching() {
        assert!(contains_on_token_boundary("Dry ARMD OU - Explained", "armd"));
        assert!(contains_on_token_boundary("(AMD)", "amd"));
        assert!(!contains_on_token_boundary("amduscia noted", "amd"));
        assert!(!contains_on_token_boundary("nothing", ""));
    }

    fn corpus(notes: &[(&str, &str)]) -> Corpus {
        Corpus::new(notes.iter().map(|(i, t)| ClinicalNote::new(*i, *t)).collect()).unwrap()
    }

    #[test]
    fn identifies_by_alias_and_by_similarity() {
        let c = corpus(&[
            ("n1", "Dry ARMD OU - Explained that there is no specific treatment"),
            ("n2", "Patient reports floaters, no flashes."),
            ("n3", "Early macular degenration OU, recommend AREDS vitamins"),
        ]);
        let concept = DiseaseConcept::new("macular degeneration", ["armd"]);
        let ner = LexiconNer::new(["macular degenration"]);
        let p = TrigramEmbedder::<f64>::default();
        let ids: Vec<_> = identify_disease_notes(&c, &concept, &ner, &p, 0.8)
            .unwrap()
            .into_iter()
            .map(|n| n.id)
            .collect();
        // sim("macular degenration", "macular degeneration") = 0.872 per oracle.
        assert_eq!(ids, ["n1", "n3"]);

        let none = identify_disease_notes(&c, &concept, &NoNer, &p, 0.8).unwrap();
        assert_eq!(none.len(), 1);
        let strict = identify_disease_notes(&c, &concept, &ner, &p, 0.9).unwrap();
        assert_eq!(strict.len(), 1);
    }

    struct BadNer;
    impl NerProvider for BadNer {
        fn name(&self) -> &str {
            "bad"
        }
        fn extract(&self, _: &str) -> Result<Vec<NerSpan>> {
            Ok(vec![NerSpan {
                text: "zzz".into(),
                start: 0,
                end: 3,
            }])
        }
    }

    #[test]
    fn invalid_span_reports_note() {
        let c = corpus(&[("n9", "abc def")]);
        let concept = DiseaseConcept::new("amd", std::iter::empty::<&str>());
        let err = identify_disease_notes(&c, &concept, &BadNer, &TrigramEmbedder::<f64>::default(), 0.8)
            .unwrap_err();
        assert!(matches!(err, Error::InNote { ref note_id, .. } if note_id == "n9"));
    }

    #[test]
    fn lexicon_spans_are_valid() {
        let text = "ARMD here and ARMD there";
        let spans = LexiconNer::new(["ARMD"]).extract(text).unwrap();
        assert_eq!(spans.len(), 2);
        for s in spans {
            s.validate(text).unwrap();
        }
    }
}
