//! Note ingestion and corpus preprocessing (short-note exclusion and
//! near-duplicate removal).

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::similarity::{cosine, SimilarityProvider};
use crate::text;

/// Corpora above this size still get the exact pairwise scan, with a warning.
pub const LARGE_CORPUS_WARNING: usize = 10_000;

pub const DEFAULT_MIN_WORDS: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClinicalNote {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date: Option<String>,
}

impl ClinicalNote {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            date: None,
        }
    }

    pub fn word_count(&self) -> usize {
        text::word_count(&self.text)
    }
}

/// Notes in ingestion order with unique ids.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    notes: Vec<ClinicalNote>,
}

impl Corpus {
    pub fn new(notes: Vec<ClinicalNote>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(notes.len());
        for n in &notes {
            if !seen.insert(n.id.as_str()) {
                return Err(Error::DuplicateId(n.id.clone()));
            }
        }
        Ok(Self { notes })
    }

    pub fn notes(&self) -> &[ClinicalNote] {
        &self.notes
    }

    pub fn len(&self) -> usize {
        self.notes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.notes.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ClinicalNote> {
        self.notes.iter().find(|n| n.id == id)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ClinicalNote> {
        self.notes.iter()
    }

    pub fn into_notes(self) -> Vec<ClinicalNote> {
        self.notes
    }

    /// One JSON object per line, same shape as the JSONL input.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for n in &self.notes {
            out.push_str(&serde_json::to_string(n)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(self.to_jsonl()?.as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }
}

impl<'a> IntoIterator for &'a Corpus {
    type Item = &'a ClinicalNote;
    type IntoIter = std::slice::Iter<'a, ClinicalNote>;

    fn into_iter(self) -> Self::IntoIter {
        self.notes.iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoteFormat {
    Jsonl,
    Csv,
}

impl NoteFormat {
    /// Guess from the file extension; anything but `.csv` is JSONL.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => NoteFormat::Csv,
            _ => NoteFormat::Jsonl,
        }
    }
}

#[derive(Deserialize)]
struct RawRecord {
    id: Option<String>,
    text: Option<String>,
    #[serde(default)]
    date: Option<String>,
}

fn record_to_note(line: usize, rec: RawRecord) -> Result<ClinicalNote> {
    let id = rec.id.filter(|s| !s.trim().is_empty()).ok_or(Error::MalformedRecord {
        line,
        reason: "missing or empty `id`".into(),
    })?;
    let text = rec.text.filter(|s| !s.trim().is_empty()).ok_or(Error::MalformedRecord {
        line,
        reason: "missing or empty `text`".into(),
    })?;
    Ok(ClinicalNote {
        id,
        text,
        date: rec.date,
    })
}

pub fn ingest_notes(path: &Path, format: NoteFormat) -> Result<Corpus> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    match format {
        NoteFormat::Jsonl => read_jsonl(BufReader::new(file), path),
        NoteFormat::Csv => read_csv(file),
    }
}

/// Parse JSONL from any reader. Blank lines are skipped; line numbers are 1-based.
pub fn read_jsonl<R: BufRead>(reader: R, origin: &Path) -> Result<Corpus> {
    let mut notes = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(origin, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawRecord = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            line: line_no,
            reason: e.to_string(),
        })?;
        notes.push(record_to_note(line_no, rec)?);
    }
    Corpus::new(notes)
}

/// CSV with header `id,text` (an optional `date` column is accepted).
/// Line numbers count the header as line 1.
pub fn read_csv<R: std::io::Read>(reader: R) -> Result<Corpus> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let mut notes = Vec::new();
    for (i, rec) in rdr.deserialize::<RawRecord>().enumerate() {
        let fallback_line = i + 2;
        let rec = rec.map_err(|e| Error::MalformedRecord {
            line: e
                .position()
                .map(|p| p.line() as usize)
                .unwrap_or(fallback_line),
            reason: e.to_string(),
        })?;
        notes.push(record_to_note(fallback_line, rec)?);
    }
    Corpus::new(notes)
}

/// Remove notes shorter than `min_words`, then greedily drop near-duplicates.
///
/// Notes are visited in corpus order. Each visited note is compared with
/// every note kept so far; a pair conflicts when its similarity exceeds
/// `threshold`. The visited note is kept (and its conflicting partners
/// dropped) only if it beats all of them: higher word count wins, equal
/// counts go to the lexicographically smaller id. A dropped note is never
/// compared again. The result keeps corpus order.
///
/// Embeddings are computed once per note, in parallel.
pub fn preprocess<T, P>(corpus: &Corpus, sim: &P, threshold: f64, min_words: usize) -> Result<Corpus>
where
    T: Scalar,
    P: SimilarityProvider<T> + ?Sized,
{
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Invalid(format!(
            "threshold_preprocessing must be in [0,1], got {threshold}"
        )));
    }
    if min_words == 0 {
        return Err(Error::Invalid("min_words must be at least 1".into()));
    }

    let candidates: Vec<(usize, &ClinicalNote)> = corpus
        .iter()
        .map(|n| (n.word_count(), n))
        .filter(|(wc, _)| *wc >= min_words)
        .collect();
    if candidates.len() > LARGE_CORPUS_WARNING {
        log::warn!(
            "pairwise deduplication over {} notes is O(n^2); expect a long run",
            candidates.len()
        );
    }

    let embeddings = candidates
        .par_iter()
        .map(|(_, n)| sim.embed(&n.text).map_err(|e| Error::in_note(&n.id, e)))
        .collect::<Result<Vec<_>>>()?;

    let beats = |a: usize, b: usize| {
        let (wa, na) = candidates[a];
        let (wb, nb) = candidates[b];
        wa > wb || (wa == wb && na.id < nb.id)
    };

    let mut kept: Vec<usize> = Vec::new();
    for i in 0..candidates.len() {
        let mut conflicts = Vec::new();
        for (slot, &k) in kept.iter().enumerate() {
            let s = cosine(&embeddings[i], &embeddings[k])
                .map_err(|e| Error::in_note(&candidates[i].1.id, e))?
                .to_f64_lossy();
            if s > threshold {
                conflicts.push(slot);
            }
        }
        if conflicts.iter().all(|&slot| beats(i, kept[slot])) {
            for slot in conflicts.into_iter().rev() {
                kept.remove(slot);
            }
            kept.push(i);
        }
    }
    kept.sort_unstable();
    Corpus::new(kept.into_iter().map(|i| candidates[i].1.clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::similarity::{similarity, TrigramEmbedder};
    use std::io::Cursor;

    fn jsonl(s: &str) -> Result<Corpus> {
        read_jsonl(Cursor::new(s), Path::new("<mem>"))
    }

    #[test]
    fn ingest_jsonl_cases() {
        assert!(jsonl("").unwrap().is_empty());
        let c = jsonl(r#"{"id":"n1","text":"a b c"}"#).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.notes()[0].word_count(), 3);
        let dup = jsonl("{\"id\":\"n1\",\"text\":\"a\"}\n{\"id\":\"n1\",\"text\":\"b\"}\n");
        assert!(matches!(dup, Err(Error::DuplicateId(id)) if id == "n1"));
        let bad = jsonl("{\"id\":\"n1\",\"text\":\"a\"}\n{\"id\":\"n2\"}\n");
        assert!(matches!(bad, Err(Error::MalformedRecord { line: 2, .. })));
        let garbage = jsonl("{\"id\":\"n1\",\"text\":\"a\"}\n\nnot json\n");
        assert!(matches!(garbage, Err(Error::MalformedRecord { line: 3, .. })));
    }

    #[test]
    fn text_preserved_and_reserialized() {
        let src = "{\"id\":\"n1\",\"text\":\"Dry ARMD  OU -\\tExplained\",\"date\":\"2020-01-01\"}\n";
        let c = jsonl(src).unwrap();
        assert_eq!(c.notes()[0].text, "Dry ARMD  OU -\tExplained");
        assert_eq!(jsonl(&c.to_jsonl().unwrap()).unwrap(), c);
    }

    #[test]
    fn ingest_csv() {
        let c = read_csv(Cursor::new("id,text\nn1,\"a, b c\"\nn2,x y\n")).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.notes()[0].text, "a, b c");
        let err = read_csv(Cursor::new("id,text\nn1,\n")).unwrap_err();
        assert!(matches!(err, Error::MalformedRecord { line: 2, .. }));
    }

    fn corpus(notes: &[(&str, &str)]) -> Corpus {
        Corpus::new(notes.iter().map(|(i, t)| ClinicalNote::new(*i, *t)).collect()).unwrap()
    }

    #[test]
    fn short_notes_removed() {
        let c = corpus(&[("a", "RTO"), ("b", "one two three four five")]);
        let out = preprocess(&c, &TrigramEmbedder::<f64>::default(), 0.8, 5).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out.notes()[0].id, "b");
    }

    #[test]
    fn identical_notes_collapse_to_smaller_id() {
        let t = "Dry ARMD OU explained the nature of the disease";
        let c = corpus(&[("n2", t), ("n1", t)]);
        let out = preprocess(&c, &TrigramEmbedder::<f64>::default(), 0.8, 5).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out.notes()[0].id, "n1");
    }

    // Frozen from tests/oracle/dedup_oracle.py: sim(n1,n2) = 0.941..., wc 12 vs 30.
    const N1: &str = "ARMD OU explained that there is no specific treatment at this time";
    const N2: &str = "ARMD OU explained that there is no specific treatment at this time \
        ARMD OU explained that there is no specific treatment at this time \
        monitor closely with amsler grid daily";
    const N3: &str = "Patient reports floaters in the right eye since last week no flashes";

    #[test]
    fn longer_note_survives_duplicate_pair() {
        let c = corpus(&[("n1", N1), ("n2", N2), ("n3", N3)]);
        assert_eq!(c.notes()[0].word_count(), 12);
        assert_eq!(c.notes()[1].word_count(), 30);
        let p = TrigramEmbedder::<f64>::default();
        let s12: f64 = similarity(&p, N1, N2).unwrap();
        assert!((s12 - 0.941_042_592_102_677_38).abs() < 1e-12, "{s12}");

        let out = preprocess(&c, &p, 0.8, 5).unwrap();
        let ids: Vec<_> = out.iter().map(|n| n.id.as_str()).collect();
        assert_eq!(ids, ["n2", "n3"]);
        // Above the pair's similarity nothing is merged.
        assert_eq!(preprocess(&c, &p, 0.95, 5).unwrap().len(), 3);
    }

    #[test]
    fn rejects_bad_parameters() {
        let c = corpus(&[]);
        let p = TrigramEmbedder::<f64>::default();
        assert!(preprocess(&c, &p, 1.5, 5).is_err());
        assert!(preprocess(&c, &p, 0.8, 0).is_err());
    }
}
