//! Stage drivers shared by the CLI subcommands and the one-shot pipeline.
//!
//! Every stage reads the previous stage's artifact and writes its own, so
//! running the stages one by one produces the same files as `run_pipeline`.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::artifact::{read_jsonl, write_jsonl, JsonlAppender, SCHEMA_VERSION};
use crate::config::{BackendSource, NerSource, PipelineConfig, SimilaritySource};
use crate::corpus::{ingest_notes, preprocess, ClinicalNote, Corpus, NoteFormat};
use crate::error::{Error, Result};
use crate::evaluation::{load_gold, precision_recall, safety_metrics, MetricsReport, SafetyReport};
use crate::extraction::{
    aggregate_relations, build_prompts, expand_results, refine_relations, run_queries, Relation,
    PREDICTIONS_ARTIFACT, RECORDS_ARTIFACT, RELATIONS_ARTIFACT,
};
use crate::gateway::{BackendKind, FixtureBackend, Gateway, ModelBackend, QueryFailure, QueryRecord};
use crate::kgraph::{build_graph_with, ExportFormat, KnowledgeGraph};
use crate::postprocess::Lexicon;
use crate::prompting::TemplateSet;
use crate::remote::{Endpoint, HttpExtractiveQa, HttpGenerative, RemoteEmbedder, RemoteNer, DEFAULT_TIMEOUT};
use crate::similarity::{SimilarityProvider, TrigramEmbedder};
use crate::terminology::{expand_aliases, identify_disease_notes, AliasProvider, AliasTable, DiseaseConcept, LexiconNer, NerProvider, NoNer};

/// Everything the stages consult besides the model backend.
pub struct Providers {
    pub similarity: Box<dyn SimilarityProvider<f64>>,
    pub ner: Box<dyn NerProvider>,
    pub aliases: Box<dyn AliasProvider>,
    pub lexicon: Lexicon,
    pub templates: TemplateSet,
}

fn token(env: &Option<String>) -> Option<String> {
    env.as_ref().and_then(|name| std::env::var(name).ok())
}

impl Providers {
    pub fn from_config(cfg: &PipelineConfig) -> Result<Self> {
        let similarity: Box<dyn SimilarityProvider<f64>> = match &cfg.similarity {
            SimilaritySource::Trigram => Box::new(TrigramEmbedder::<f64>::default()),
            SimilaritySource::Http { url, token_env } => {
                Box::new(RemoteEmbedder::<f64>::new(Endpoint::new(url, token(token_env), DEFAULT_TIMEOUT)?))
            }
        };
        let ner: Box<dyn NerProvider> = match &cfg.ner {
            NerSource::None => Box::new(NoNer),
            NerSource::Lexicon { path } => Box::new(LexiconNer::load(path)?),
            NerSource::Http { url, token_env } => {
                Box::new(RemoteNer::new(Endpoint::new(url, token(token_env), DEFAULT_TIMEOUT)?))
            }
        };
        let aliases = match &cfg.aliases {
            Some(p) => AliasTable::load(p)?,
            None => AliasTable::default(),
        };
        let templates = match &cfg.templates {
            Some(p) => TemplateSet::load_overrides(p)?,
            None => TemplateSet::default(),
        };
        Ok(Self {
            similarity,
            ner,
            aliases: Box::new(aliases),
            lexicon: Lexicon::load(cfg.stopwords.as_deref(), cfg.refusals.as_deref())?,
            templates,
        })
    }
}

/// Instantiate the named (or default) backend.
pub fn build_backend(cfg: &PipelineConfig, name: Option<&str>) -> Result<Arc<dyn ModelBackend>> {
    let b = cfg.backend(name)?;
    Ok(match &b.source {
        BackendSource::Fixture { script } => Arc::new(FixtureBackend::load(script)?.named(&b.name)),
        BackendSource::Http {
            url,
            kind,
            token_env,
            max_tokens,
            temperature,
            timeout_secs,
        } => {
            let endpoint = Endpoint::new(url, token(token_env), Duration::from_secs(*timeout_secs))?;
            match kind {
                BackendKind::Generative => {
                    let mut g = HttpGenerative::new(&b.name, endpoint);
                    g.max_tokens = *max_tokens;
                    g.temperature = *temperature;
                    Arc::new(g)
                }
                BackendKind::ExtractiveQa => Arc::new(HttpExtractiveQa::new(&b.name, endpoint, cfg.top_k)),
            }
        }
    })
}

pub fn build_gateway(cfg: &PipelineConfig, name: Option<&str>) -> Result<Gateway> {
    let mut gw = Gateway::new(build_backend(cfg, name)?)
        .with_retry(cfg.retry)
        .with_concurrency(cfg.concurrency);
    gw.default_score = cfg.default_generative_score;
    Ok(gw)
}

/// Notes selected for each disease.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoteIndex {
    pub schema_version: u32,
    pub diseases: Vec<DiseaseNotes>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiseaseNotes {
    pub concept: DiseaseConcept,
    pub notes: Vec<ClinicalNote>,
}

impl NoteIndex {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let idx: NoteIndex = serde_json::from_str(&raw)?;
        if idx.schema_version != SCHEMA_VERSION {
            return Err(Error::Invalid(format!(
                "{}: unsupported schema_version {}",
                path.display(),
                idx.schema_version
            )));
        }
        Ok(idx)
    }
}

/// Counts recorded for one stage in the run manifest.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageCounts {
    pub stage: String,
    pub counts: BTreeMap<String, usize>,
}

impl StageCounts {
    fn new(stage: &str, counts: &[(&str, usize)]) -> Self {
        Self {
            stage: stage.to_string(),
            counts: counts.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub config_sha256: String,
    pub backends: Vec<String>,
    pub stages: Vec<StageCounts>,
    /// Prompts whose retries were exhausted.
    pub failures: usize,
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(cfg: &PipelineConfig) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            config_sha256: cfg.fingerprint(),
            backends: Vec::new(),
            stages: Vec::new(),
            failures: 0,
            artifacts: BTreeMap::new(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_text(path, &s)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn ingest(input: &Path) -> Result<(Corpus, StageCounts)> {
    let corpus = ingest_notes(input, NoteFormat::from_path(input))?;
    let counts = StageCounts::new("ingest", &[("notes", corpus.len())]);
    Ok((corpus, counts))
}

pub fn preprocess_stage(cfg: &PipelineConfig, p: &Providers, corpus: &Corpus) -> Result<(Corpus, StageCounts)> {
    let kept = preprocess(corpus, &p.similarity, cfg.threshold_preprocessing, cfg.min_words)?;
    let counts = StageCounts::new(
        "preprocess",
        &[("input", corpus.len()), ("kept", kept.len()), ("dropped", corpus.len() - kept.len())],
    );
    Ok((kept, counts))
}

pub fn identify_stage(
    cfg: &PipelineConfig,
    p: &Providers,
    corpus: &Corpus,
    diseases: &[String],
) -> Result<(NoteIndex, StageCounts)> {
    if diseases.is_empty() {
        return Err(Error::Config {
            field: "diseases".into(),
            reason: "no disease given".into(),
        });
    }
    let mut entries = Vec::new();
    let mut counts = StageCounts::new("identify", &[]);
    for d in diseases {
        let concept = expand_aliases(d, p.aliases.as_ref())?;
        let notes = identify_disease_notes(corpus, &concept, p.ner.as_ref(), &p.similarity, cfg.threshold_notes_identification)?;
        counts.counts.insert(format!("notes:{d}"), notes.len());
        entries.push(DiseaseNotes { concept, notes });
    }
    Ok((
        NoteIndex {
            schema_version: SCHEMA_VERSION,
            diseases: entries,
        },
        counts,
    ))
}

/// Result of the extraction stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractOutcome {
    pub records: Vec<QueryRecord>,
    pub failures: Vec<QueryFailure>,
    pub counts: StageCounts,
}

pub fn failures_path(records: &Path) -> PathBuf {
    let mut name = records.file_stem().unwrap_or_default().to_os_string();
    name.push(".failures.json");
    records.with_file_name(name)
}

/// Query the backend for every (note, category, template) of the index,
/// checkpointing each record to `records_path` as it arrives.
///
/// With `resume`, records already in the file (for the same backend) are
/// kept and their prompts skipped. The file is finally rewritten in prompt
/// order, and exhausted prompts are listed next to it in
/// `<stem>.failures.json`.
pub fn extract_stage(
    cfg: &PipelineConfig,
    p: &Providers,
    gateway: &Gateway,
    index: &NoteIndex,
    records_path: &Path,
    resume: bool,
) -> Result<ExtractOutcome> {
    let style = cfg.prompt_style();
    let mut prompts = Vec::new();
    for entry in &index.diseases {
        prompts.extend(build_prompts(&entry.concept.canonical, &entry.notes, &p.templates, &style)?);
    }
    let wanted: HashSet<String> = prompts.iter().map(|p| p.id()).collect();

    let mut previous: Vec<QueryRecord> = Vec::new();
    if resume && records_path.exists() {
        previous = read_jsonl::<QueryRecord>(records_path, RECORDS_ARTIFACT, true)?
            .into_iter()
            .filter(|r| r.backend == gateway.backend_name() && wanted.contains(&r.id))
            .collect();
        log::info!("resuming with {} completed queries", previous.len());
    }
    // Start from a clean file holding only the reusable records.
    write_jsonl(records_path, RECORDS_ARTIFACT, &previous)?;
    let done: HashSet<String> = previous.iter().map(|r| r.id.clone()).collect();

    let log = JsonlAppender::open(records_path, RECORDS_ARTIFACT)?;
    let append_errors = std::sync::Mutex::new(Vec::new());
    let run = run_queries(gateway, &prompts, &done, |r| {
        if let Err(e) = log.append(r) {
            append_errors.lock().unwrap().push(e);
        }
    });
    drop(log);
    if let Some(e) = append_errors.into_inner().unwrap().into_iter().next() {
        return Err(e);
    }

    let mut by_id: BTreeMap<String, QueryRecord> = previous.into_iter().map(|r| (r.id.clone(), r)).collect();
    for r in run.records {
        by_id.insert(r.id.clone(), r);
    }
    let records: Vec<QueryRecord> = prompts.iter().filter_map(|p| by_id.remove(&p.id())).collect();
    write_jsonl(records_path, RECORDS_ARTIFACT, &records)?;
    write_json(&failures_path(records_path), &run.failures)?;

    let counts = StageCounts::new(
        "extract",
        &[
            ("prompts", prompts.len()),
            ("records", records.len()),
            ("resumed", run.skipped),
            ("failures", run.failures.len()),
        ],
    );
    Ok(ExtractOutcome {
        records,
        failures: run.failures,
        counts,
    })
}

/// Expand, aggregate and refine query records into final relations. The
/// raw predictions are written to `predictions_path` when given.
pub fn postprocess_stage(
    cfg: &PipelineConfig,
    p: &Providers,
    records: &[QueryRecord],
    predictions_path: Option<&Path>,
) -> Result<(Vec<Relation>, StageCounts)> {
    let (preds, stats) = expand_results(records, &p.lexicon, cfg.postprocess_min_score);
    if let Some(path) = predictions_path {
        write_jsonl(path, PREDICTIONS_ARTIFACT, &preds)?;
    }
    let aggregated = aggregate_relations(&preds, cfg.relation_occurrence_number, cfg.relation_probability);
    let relations = refine_relations(
        &aggregated,
        &p.lexicon,
        &p.similarity,
        cfg.grouping_similarity,
        cfg.grouping_linkage,
    )?;
    let counts = StageCounts::new(
        "postprocess",
        &[
            ("records", stats.records),
            ("answers", stats.answers),
            ("dont_know", stats.dont_know),
            ("unstructured", stats.unstructured),
            ("below_min_score", stats.below_min_score),
            ("refusals", stats.refusals),
            ("empty_after_normalization", stats.empty_after_normalization),
            ("predictions", preds.len()),
            ("aggregated", aggregated.len()),
            ("relations", relations.len()),
        ],
    );
    Ok((relations, counts))
}

pub fn build_kg_stage(p: &Providers, relations: &[Relation]) -> Result<(KnowledgeGraph, StageCounts)> {
    let kg = build_graph_with(relations, &p.lexicon)?;
    let counts = StageCounts::new("build-kg", &[("nodes", kg.nodes.len()), ("edges", kg.edges.len())]);
    Ok((kg, counts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metrics: MetricsReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub safety: Option<SafetyReport>,
}

pub fn eval_stage(
    cfg: &PipelineConfig,
    p: &Providers,
    kg: &KnowledgeGraph,
    gold_path: &Path,
    records: Option<&[QueryRecord]>,
) -> Result<EvalReport> {
    let gold = load_gold(gold_path, &p.lexicon)?;
    let metrics = precision_recall(kg, &gold, &p.lexicon, &p.similarity, cfg.match_threshold)?;
    let safety = match records {
        Some(r) if !r.is_empty() => Some(safety_metrics(r)?),
        _ => None,
    };
    Ok(EvalReport { metrics, safety })
}

/// Write an evaluation report as `<path>` (JSON) and `<path>.md`.
pub fn write_eval(path: &Path, report: &EvalReport, model: &str) -> Result<()> {
    write_json(path, report)?;
    write_text(&path.with_extension("md"), &report.metrics.to_markdown(model))
}

pub fn read_records(path: &Path) -> Result<Vec<QueryRecord>> {
    read_jsonl(path, RECORDS_ARTIFACT, false)
}

pub fn read_relations(path: &Path) -> Result<Vec<Relation>> {
    read_jsonl(path, RELATIONS_ARTIFACT, false)
}

pub fn write_relations(path: &Path, relations: &[Relation]) -> Result<()> {
    write_jsonl(path, RELATIONS_ARTIFACT, relations)
}

/// Write the graph in the format named by the file extension (JSON when
/// there is none).
pub fn write_kg(path: &Path, kg: &KnowledgeGraph) -> Result<()> {
    let format = match path.extension().and_then(|e| e.to_str()) {
        Some(ext) => ext.parse()?,
        None => ExportFormat::Json,
    };
    write_text(path, &kg.export(format)?)
}

pub fn read_kg(path: &Path) -> Result<KnowledgeGraph> {
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    KnowledgeGraph::from_json(&raw)
}

/// File names the pipeline writes inside its output directory.
pub mod files {
    pub const CORPUS: &str = "corpus.jsonl";
    pub const PREPROCESSED: &str = "preprocessed.jsonl";
    pub const NOTE_INDEX: &str = "notes.json";
    pub const RECORDS: &str = "records.jsonl";
    pub const PREDICTIONS: &str = "predictions.jsonl";
    pub const RELATIONS: &str = "relations.jsonl";
    pub const KG_JSON: &str = "kg.json";
    pub const KG_DOT: &str = "kg.dot";
    pub const KG_CSV: &str = "kg.csv";
    pub const EVAL: &str = "eval.json";
    pub const MANIFEST: &str = "manifest.json";
}

/// Options of a full pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineRun<'a> {
    pub input: &'a Path,
    pub out_dir: &'a Path,
    pub diseases: &'a [String],
    pub backend: Option<&'a str>,
    pub resume: bool,
    pub gold: Option<&'a Path>,
}

/// Run every stage, writing all artifacts and `manifest.json` into
/// `out_dir`. Exhausted queries do not stop the run; they are counted in
/// the manifest and listed in `records.failures.json`.
pub fn run_pipeline(cfg: &PipelineConfig, p: &Providers, run: &PipelineRun<'_>) -> Result<RunManifest> {
    use files::*;
    let out = |name: &str| run.out_dir.join(name);
    let mut manifest = RunManifest::new(cfg);
    let result = run_stages(cfg, p, run, &mut manifest, &out);
    manifest.write(&out(MANIFEST))?;
    result.map(|_| manifest)
}

fn run_stages(
    cfg: &PipelineConfig,
    p: &Providers,
    run: &PipelineRun<'_>,
    manifest: &mut RunManifest,
    out: &dyn Fn(&str) -> PathBuf,
) -> Result<()> {
    use files::*;
    let artifact = |m: &mut RunManifest, name: &str| {
        m.artifacts.insert(name.to_string(), name.to_string());
    };

    let (corpus, c) = ingest(run.input)?;
    corpus.write_jsonl(&out(CORPUS))?;
    manifest.stages.push(c);
    artifact(manifest, CORPUS);

    let (kept, c) = preprocess_stage(cfg, p, &corpus)?;
    kept.write_jsonl(&out(PREPROCESSED))?;
    manifest.stages.push(c);
    artifact(manifest, PREPROCESSED);

    let diseases = if run.diseases.is_empty() { &cfg.diseases[..] } else { run.diseases };
    let (index, c) = identify_stage(cfg, p, &kept, diseases)?;
    write_json(&out(NOTE_INDEX), &index)?;
    manifest.stages.push(c);
    artifact(manifest, NOTE_INDEX);

    let gateway = build_gateway(cfg, run.backend)?;
    manifest.backends.push(gateway.backend_name().to_string());
    let ex = extract_stage(cfg, p, &gateway, &index, &out(RECORDS), run.resume)?;
    manifest.failures = ex.failures.len();
    manifest.stages.push(ex.counts);
    artifact(manifest, RECORDS);

    let (relations, c) = postprocess_stage(cfg, p, &ex.records, Some(&out(PREDICTIONS)))?;
    write_relations(&out(RELATIONS), &relations)?;
    manifest.stages.push(c);
    artifact(manifest, PREDICTIONS);
    artifact(manifest, RELATIONS);

    let (kg, c) = build_kg_stage(p, &relations)?;
    for name in [KG_JSON, KG_DOT, KG_CSV] {
        write_kg(&out(name), &kg)?;
        artifact(manifest, name);
    }
    manifest.stages.push(c);

    if let Some(gold) = run.gold {
        let report = eval_stage(cfg, p, &kg, gold, Some(&ex.records))?;
        write_eval(&out(EVAL), &report, gateway.backend_name())?;
        manifest.stages.push(StageCounts::new("eval", &[("categories", report.metrics.categories.len())]));
        artifact(manifest, EVAL);
    }
    Ok(())
}
