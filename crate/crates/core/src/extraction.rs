//! The query loop and the aggregation of answers into relations.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use crate::corpus::ClinicalNote;
use crate::error::{Error, Result};
use crate::gateway::{Gateway, Parsed, QueryFailure, QueryRecord};
use crate::postprocess::{group_similar, split_spans, Lexicon, Linkage, Prediction};
use crate::prompting::{build_prompt, instantiate_questions, EntityCategory, Prompt, PromptStyle, TemplateSet};
use crate::scalar::Scalar;
use crate::similarity::SimilarityProvider;

pub const DEFAULT_RELATION_OCCURRENCE_NUMBER: usize = 10;
pub const DEFAULT_RELATION_PROBABILITY: f64 = 0.1;

pub const RECORDS_ARTIFACT: &str = "query-records";
pub const PREDICTIONS_ARTIFACT: &str = "raw-predictions";
pub const RELATIONS_ARTIFACT: &str = "relations";

/// One answer to one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawPrediction {
    /// Normalized entity text; the aggregation key.
    pub entity_text: String,
    /// The answer as the model wrote it.
    pub surface: String,
    pub score: f64,
    pub disease: String,
    pub category: EntityCategory,
    pub note_id: String,
    pub question_id: String,
}

/// Statistics of one (entity, disease, category) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationCandidate {
    pub entity: String,
    pub disease: String,
    pub category: EntityCategory,
    pub avg_score: f64,
    pub count: usize,
}

/// A typed disease → entity edge with the statistics that selected it.
/// `label` is the highest-scoring surface form of the entity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Relation {
    pub disease: String,
    pub category: EntityCategory,
    pub entity: String,
    pub label: String,
    pub avg_score: f64,
    pub count: usize,
}

/// Every prompt the loop issues for one disease: for each note, each
/// category, each of that category's templates.
pub fn build_prompts(
    disease: &str,
    notes: &[ClinicalNote],
    templates: &TemplateSet,
    style: &PromptStyle,
) -> Result<Vec<Prompt>> {
    let questions: Vec<(EntityCategory, Vec<(String, String)>)> = EntityCategory::ALL
        .into_iter()
        .map(|c| Ok((c, instantiate_questions(templates, disease, c)?)))
        .collect::<Result<_>>()?;
    let mut prompts = Vec::with_capacity(notes.len() * 15);
    for note in notes {
        for (category, qs) in &questions {
            for (qid, question) in qs {
                let mut p = build_prompt(style, question, &note.text, *category)
                    .map_err(|e| Error::in_note(&note.id, e))?;
                p.question_id = qid.clone();
                p.disease = disease.to_string();
                p.note_id = note.id.clone();
                prompts.push(p);
            }
        }
    }
    Ok(prompts)
}

/// Outcome of a query run: records in prompt order, plus the prompts whose
/// retries were exhausted.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct QueryRun {
    pub records: Vec<QueryRecord>,
    pub failures: Vec<QueryFailure>,
    /// Prompts not sent because a record for them already existed.
    pub skipped: usize,
}

/// Issue every prompt not listed in `done`. `on_record` sees each record as
/// it completes (for checkpointing).
pub fn run_queries<F>(gateway: &Gateway, prompts: &[Prompt], done: &HashSet<String>, on_record: F) -> QueryRun
where
    F: Fn(&QueryRecord) + Sync,
{
    let todo: Vec<Prompt> = prompts
        .iter()
        .filter(|p| !done.contains(&p.id()))
        .cloned()
        .collect();
    let skipped = prompts.len() - todo.len();
    let mut run = QueryRun {
        skipped,
        ..QueryRun::default()
    };
    for outcome in gateway.query_all(&todo, on_record) {
        match outcome {
            Ok(r) => run.records.push(r),
            Err(f) => run.failures.push(f),
        }
    }
    run
}

/// Counters kept while expanding records.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpansionStats {
    pub records: usize,
    pub answers: usize,
    pub dont_know: usize,
    pub unstructured: usize,
    pub below_min_score: usize,
    pub refusals: usize,
    pub empty_after_normalization: usize,
}

/// One prediction per answer of every `Answers` record, after the per-answer
/// cleanup: answers scoring below `min_score`, refusals, and answers that
/// normalize to nothing are dropped.
pub fn expand_results(records: &[QueryRecord], lexicon: &Lexicon, min_score: f64) -> (Vec<RawPrediction>, ExpansionStats) {
    let mut stats = ExpansionStats::default();
    let mut out = Vec::new();
    for r in records {
        stats.records += 1;
        let answers = match &r.parsed {
            Parsed::Answers { answers } => answers,
            Parsed::DontKnow => {
                stats.dont_know += 1;
                continue;
            }
            Parsed::Unstructured => {
                stats.unstructured += 1;
                continue;
            }
        };
        for a in answers {
            stats.answers += 1;
            if a.score < min_score {
                stats.below_min_score += 1;
                continue;
            }
            if lexicon.is_refusal(&a.text) {
                stats.refusals += 1;
                continue;
            }
            let Some(entity_text) = lexicon.normalize(&a.text) else {
                stats.empty_after_normalization += 1;
                continue;
            };
            out.push(RawPrediction {
                entity_text,
                surface: a.text.trim().to_string(),
                score: a.score,
                disease: r.disease.clone(),
                category: r.category,
                note_id: r.note_id.clone(),
                question_id: r.question_id.clone(),
            });
        }
    }
    (out, stats)
}

fn exact(x: f64) -> BigRational {
    BigRational::from_float(x).unwrap_or_else(BigRational::zero)
}

struct Group {
    sum: BigRational,
    count: usize,
    label: String,
    label_score: f64,
}

impl Group {
    fn avg(&self) -> BigRational {
        &self.sum / BigInt::from(self.count)
    }
}

fn better_label(score: f64, text: &str, than_score: f64, than_text: &str) -> bool {
    match score.total_cmp(&than_score) {
        Ordering::Greater => true,
        Ordering::Less => false,
        Ordering::Equal => text < than_text,
    }
}

/// Group by (entity, disease, category); keep groups with at least
/// `occurrence_number` members whose mean score is at least `probability`;
/// then per (disease, entity) keep the surviving category with the highest
/// mean (ties: more occurrences, then Treatment < Factor < CoexistsWith).
///
/// Means are compared exactly, so a group of ten scores of 0.1 has mean 0.1
/// and passes a 0.1 threshold. Output is sorted by (disease, entity).
pub fn aggregate_relations(preds: &[RawPrediction], occurrence_number: usize, probability: f64) -> Vec<Relation> {
    let mut groups: BTreeMap<(&str, &str, EntityCategory), Group> = BTreeMap::new();
    for p in preds {
        let g = groups
            .entry((p.disease.as_str(), p.entity_text.as_str(), p.category))
            .or_insert_with(|| Group {
                sum: BigRational::zero(),
                count: 0,
                label: p.surface.clone(),
                label_score: p.score,
            });
        g.sum += exact(p.score);
        g.count += 1;
        if better_label(p.score, &p.surface, g.label_score, &g.label) {
            g.label = p.surface.clone();
            g.label_score = p.score;
        }
    }

    let threshold = exact(probability);
    let mut best: BTreeMap<(&str, &str), (EntityCategory, &Group, BigRational)> = BTreeMap::new();
    for ((disease, entity, category), g) in &groups {
        if g.count < occurrence_number || g.count == 0 || g.sum < &threshold * BigInt::from(g.count) {
            continue;
        }
        let avg = g.avg();
        let replace = match best.get(&(*disease, *entity)) {
            None => true,
            Some((c, other, other_avg)) => avg
                .cmp(other_avg)
                .then(g.count.cmp(&other.count))
                .then(c.cmp(category))
                .is_gt(),
        };
        if replace {
            best.insert((*disease, *entity), (*category, g, avg));
        }
    }

    best.into_iter()
        .map(|((disease, entity), (category, g, avg))| Relation {
            disease: disease.to_string(),
            category,
            entity: entity.to_string(),
            label: g.label.clone(),
            avg_score: avg.to_f64().unwrap_or(0.0),
            count: g.count,
        })
        .collect()
}

/// Statistics of every (entity, disease, category) group, unfiltered.
pub fn relation_candidates(preds: &[RawPrediction]) -> Vec<RelationCandidate> {
    aggregate_all(preds)
}

fn aggregate_all(preds: &[RawPrediction]) -> Vec<RelationCandidate> {
    let mut groups: BTreeMap<(&str, &str, EntityCategory), (BigRational, usize)> = BTreeMap::new();
    for p in preds {
        let g = groups
            .entry((p.disease.as_str(), p.entity_text.as_str(), p.category))
            .or_insert_with(|| (BigRational::zero(), 0));
        g.0 += exact(p.score);
        g.1 += 1;
    }
    groups
        .into_iter()
        .map(|((disease, entity, category), (sum, count))| RelationCandidate {
            entity: entity.to_string(),
            disease: disease.to_string(),
            category,
            avg_score: (sum / BigInt::from(count)).to_f64().unwrap_or(0.0),
            count,
        })
        .collect()
}

fn relation_rank(a: &Relation, b: &Relation) -> Ordering {
    b.avg_score
        .total_cmp(&a.avg_score)
        .then(b.count.cmp(&a.count))
        .then(a.category.cmp(&b.category))
        .then_with(|| a.label.cmp(&b.label))
}

/// Final cleanup of aggregated relations, per (disease, category): merge
/// similar entities into their best-ranked member, split that member's
/// surface text into values, and normalize each value. Values inherit the
/// representative's statistics. When a value ends up under several
/// categories (or twice in one), the best-ranked relation is kept, using
/// the same order as aggregation.
pub fn refine_relations<T, P>(
    relations: &[Relation],
    lexicon: &Lexicon,
    sim: &P,
    grouping_similarity: f64,
    linkage: Linkage,
) -> Result<Vec<Relation>>
where
    T: Scalar,
    P: SimilarityProvider<T> + ?Sized,
{
    let mut parts: BTreeMap<(&str, EntityCategory), Vec<&Relation>> = BTreeMap::new();
    for r in relations {
        parts.entry((r.disease.as_str(), r.category)).or_default().push(r);
    }
    let mut best: BTreeMap<(String, String), Relation> = BTreeMap::new();
    for ((disease, category), rels) in parts {
        let preds: Vec<Prediction> = rels
            .iter()
            .map(|r| Prediction {
                text: r.label.clone(),
                normalized: r.entity.clone(),
                score: r.avg_score,
            })
            .collect();
        for group in group_similar(&preds, sim, grouping_similarity, linkage)? {
            let rep = &group.representative;
            let source = rels
                .iter()
                .filter(|r| r.entity == rep.normalized && r.label == rep.text)
                .min_by(|a, b| relation_rank(a, b))
                .expect("representative comes from the partition");
            for (value, _) in split_spans(rep) {
                let Some(entity) = lexicon.normalize(&value) else {
                    continue;
                };
                let candidate = Relation {
                    disease: disease.to_string(),
                    category,
                    entity: entity.clone(),
                    label: value,
                    avg_score: source.avg_score,
                    count: source.count,
                };
                let key = (disease.to_string(), entity);
                match best.get(&key) {
                    Some(cur) if relation_rank(cur, &candidate).is_le() => {}
                    _ => {
                        best.insert(key, candidate);
                    }
                }
            }
        }
    }
    Ok(best.into_values().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ClinicalNote;
    use crate::gateway::{Answer, FixtureBackend, RetryPolicy};
    use crate::similarity::TrigramEmbedder;
    use std::sync::Arc;

    fn pred(entity: &str, cat: EntityCategory, score: f64) -> RawPrediction {
        RawPrediction {
            entity_text: entity.into(),
            surface: entity.into(),
            score,
            disease: "amd".into(),
            category: cat,
            note_id: "n".into(),
            question_id: "q".into(),
        }
    }

    fn repeat(entity: &str, cat: EntityCategory, score: f64, n: usize) -> Vec<RawPrediction> {
        (0..n).map(|_| pred(entity, cat, score)).collect()
    }

    #[test]
    fn count_threshold() {
        let preds = repeat("e", EntityCategory::Treatment, 0.9, 9);
        assert!(aggregate_relations(&preds, 10, 0.1).is_empty());
    }

    #[test]
    fn boundary_mean_is_inclusive() {
        let preds = repeat("e", EntityCategory::Treatment, 0.1, 10);
        // A float running sum of ten 0.1s falls just short of 1.0.
        assert!(preds.iter().map(|p| p.score).sum::<f64>() / 10.0 < 0.1);
        let rel = aggregate_relations(&preds, 10, 0.1);
        assert_eq!(rel.len(), 1);
        assert_eq!(rel[0].count, 10);
        assert_eq!(rel[0].avg_score, 0.1);
    }

    #[test]
    fn argmax_category() {
        let mut preds = repeat("e", EntityCategory::Treatment, 0.3, 12);
        preds.extend(repeat("e", EntityCategory::Factor, 0.5, 11));
        let rel = aggregate_relations(&preds, 10, 0.1);
        assert_eq!(rel.len(), 1);
        assert_eq!(rel[0].category, EntityCategory::Factor);
        assert_eq!(rel[0].count, 11);
    }

    #[test]
    fn ties_prefer_count_then_category_order() {
        let mut preds = repeat("e", EntityCategory::CoexistsWith, 0.5, 11);
        preds.extend(repeat("e", EntityCategory::Factor, 0.5, 12));
        assert_eq!(aggregate_relations(&preds, 10, 0.1)[0].category, EntityCategory::Factor);
        let mut preds = repeat("e", EntityCategory::CoexistsWith, 0.5, 11);
        preds.extend(repeat("e", EntityCategory::Factor, 0.5, 11));
        assert_eq!(aggregate_relations(&preds, 10, 0.1)[0].category, EntityCategory::Factor);
    }

    #[test]
    fn label_is_best_surface() {
        let mut preds = repeat("areds vitamins", EntityCategory::Treatment, 0.2, 9);
        let mut top = pred("areds vitamins", EntityCategory::Treatment, 0.9);
        top.surface = "AREDS vitamins".into();
        preds.push(top);
        let rel = aggregate_relations(&preds, 10, 0.1);
        assert_eq!(rel[0].label, "AREDS vitamins");
        assert!((rel[0].avg_score - 0.27).abs() < 1e-12);
    }

    #[test]
    fn candidates_report_every_group() {
        let mut preds = repeat("a", EntityCategory::Treatment, 0.5, 2);
        preds.push(pred("a", EntityCategory::Factor, 0.2));
        let c = relation_candidates(&preds);
        assert_eq!(c.len(), 2);
        assert_eq!((c[0].category, c[0].count), (EntityCategory::Treatment, 2));
    }

    fn record(parsed: Parsed) -> QueryRecord {
        let mut prompt = build_prompt(&PromptStyle::Guided, "q?", "ctx", EntityCategory::Treatment).unwrap();
        prompt.disease = "amd".into();
        prompt.note_id = "n1".into();
        prompt.question_id = "T1".into();
        QueryRecord {
            id: prompt.id(),
            backend: "b".into(),
            disease: "amd".into(),
            category: EntityCategory::Treatment,
            note_id: "n1".into(),
            question_id: "T1".into(),
            prompt,
            raw_response: String::new(),
            parsed,
            latency_ms: 0.0,
            attempts: 1,
        }
    }

    #[test]
    fn expansion() {
        let ans = |t: &str, s: f64| Answer { text: t.into(), score: s };
        let records = vec![
            record(Parsed::Answers {
                answers: vec![ans("Avastin", 0.5), ans("PDT", 0.5), ans("I do not know", 0.9), ans("low", 0.01), ans("the", 0.9)],
            }),
            record(Parsed::DontKnow),
            record(Parsed::Unstructured),
        ];
        let (preds, stats) = expand_results(&records, &Lexicon::default(), 0.08);
        let ents: Vec<_> = preds.iter().map(|p| p.entity_text.as_str()).collect();
        assert_eq!(ents, ["avastin", "pdt"]);
        assert_eq!(preds[0].surface, "Avastin");
        assert_eq!(
            stats,
            ExpansionStats {
                records: 3,
                answers: 5,
                dont_know: 1,
                unstructured: 1,
                below_min_score: 1,
                refusals: 1,
                empty_after_normalization: 1,
            }
        );
    }

    #[test]
    fn prompts_per_note_category_template() {
        let notes: Vec<ClinicalNote> = (0..3).map(|i| ClinicalNote::new(format!("n{i}"), "ARMD noted")).collect();
        let prompts = build_prompts("armd", &notes, &TemplateSet::default(), &PromptStyle::Guided).unwrap();
        assert_eq!(prompts.len(), 45);
        let ids: HashSet<_> = prompts.iter().map(Prompt::id).collect();
        assert_eq!(ids.len(), 45);
        assert!(build_prompts("armd", &[], &TemplateSet::default(), &PromptStyle::Guided)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn run_skips_done_and_accounts_failures() {
        let notes = vec![ClinicalNote::new("n1", "ARMD noted"), ClinicalNote::new("n2", "ARMD again")];
        let prompts = build_prompts("armd", &notes, &TemplateSet::default(), &PromptStyle::Guided).unwrap();
        let victim = prompts[7].text_hash();
        let script = serde_json::json!({
            "by_hash": { victim: {"error": "timeout"} },
            "default": {"text": "treat: x"}
        });
        let gw = Gateway::new(Arc::new(FixtureBackend::from_json(&script.to_string()).unwrap()))
            .with_retry(RetryPolicy { max_retries: 3, base_delay_ms: 0, max_delay_ms: 0 })
            .with_concurrency(3);
        let run = run_queries(&gw, &prompts, &HashSet::new(), |_| {});
        assert_eq!(run.records.len(), 29);
        assert_eq!(run.failures.len(), 1);
        assert_eq!(run.failures[0].prompt_id, prompts[7].id());

        let done: HashSet<String> = run.records.iter().map(|r| r.id.clone()).collect();
        let rerun = run_queries(&gw, &prompts, &done, |_| {});
        assert_eq!(rerun.skipped, 29);
        assert_eq!(rerun.records.len() + rerun.failures.len(), 1);
    }

    #[test]
    fn refine_splits_and_dedupes() {
        let rel = |cat, entity: &str, label: &str, avg, count| Relation {
            disease: "amd".into(),
            category: cat,
            entity: entity.into(),
            label: label.into(),
            avg_score: avg,
            count,
        };
        let rels = vec![
            rel(EntityCategory::Treatment, "areds vitamins fish spinach", "AREDS vitamins, fish, spinach", 0.67, 12),
            rel(EntityCategory::Treatment, "healthy diet", "healthy diet", 0.48, 10),
            rel(EntityCategory::Factor, "fish", "fish", 0.3, 10),
        ];
        let out = refine_relations(&rels, &Lexicon::default(), &TrigramEmbedder::<f64>::default(), 0.8, Linkage::Single)
            .unwrap();
        let got: Vec<_> = out.iter().map(|r| (r.entity.as_str(), r.category, r.label.as_str())).collect();
        assert_eq!(
            got,
            [
                ("areds vitamins", EntityCategory::Treatment, "AREDS vitamins"),
                ("fish", EntityCategory::Treatment, "fish"),
                ("healthy diet", EntityCategory::Treatment, "healthy diet"),
                ("spinach", EntityCategory::Treatment, "spinach"),
            ]
        );
        assert!(out.iter().filter(|r| r.entity != "healthy diet").all(|r| r.avg_score == 0.67 && r.count == 12));
    }
}
