use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use emrkg::corpus::{ingest_notes, NoteFormat};
use emrkg::pipeline::{self, NoteIndex, PipelineRun, Providers, RunManifest, StageCounts};
use emrkg::prompting::StyleKind;
use emrkg::{Error, PipelineConfig};

const EXIT_VALIDATION: u8 = 2;
const EXIT_STAGE: u8 = 3;
const EXIT_BACKEND: u8 = 4;

#[derive(Parser)]
#[command(name = "emrkg", version, about = "Clinical notes to knowledge graph")]
struct Cli {
    /// Pipeline configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Io {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Querying {
    /// Prompt style; overrides the config.
    #[arg(long)]
    style: Option<StyleKind>,
    /// Backend name from the config.
    #[arg(long)]
    backend: Option<String>,
    /// Keep completed queries from an earlier, interrupted run.
    #[arg(long)]
    resume: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Read notes (JSONL or CSV) into a corpus file.
    Ingest(Io),
    /// Drop short notes and near-duplicates.
    Preprocess(Io),
    /// Select the notes that concern each disease.
    Identify {
        #[command(flatten)]
        io: Io,
        #[arg(long = "disease")]
        diseases: Vec<String>,
    },
    /// Query the backend for every selected note and template.
    Extract {
        #[command(flatten)]
        io: Io,
        #[command(flatten)]
        q: Querying,
    },
    /// Turn query records into relations.
    Postprocess {
        #[command(flatten)]
        io: Io,
        /// Also write the raw predictions here.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Build the graph; the output extension picks json, dot or csv.
    BuildKg(Io),
    /// Score a graph against gold annotations.
    Eval {
        #[command(flatten)]
        io: Io,
        #[arg(long)]
        gold: PathBuf,
        /// Query records for the safety report.
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Run every stage into an output directory.
    Pipeline {
        #[command(flatten)]
        io: Io,
        #[arg(long = "disease")]
        diseases: Vec<String>,
        #[command(flatten)]
        q: Querying,
        #[arg(long)]
        gold: Option<PathBuf>,
    },
}

enum Failure {
    Validation(Error),
    Stage(Error),
    Backend(usize),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => Failure::Validation(e),
            e => Failure::Stage(e),
        }
    }
}

fn load_config(path: Option<&Path>, style: Option<StyleKind>) -> Result<PipelineConfig, Failure> {
    let mut cfg = match path {
        Some(p) => PipelineConfig::load(p).map_err(Failure::Validation)?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = style {
        cfg.style = s;
    }
    cfg.validate().map_err(Failure::Validation)?;
    Ok(cfg)
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_stem().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn stage_manifest(cfg: &PipelineConfig, out: &Path, counts: StageCounts, backend: Option<&str>, failures: usize) -> Result<(), Error> {
    let mut m = RunManifest::new(cfg);
    m.stages.push(counts);
    m.backends.extend(backend.map(str::to_string));
    m.failures = failures;
    m.artifacts.insert(
        "output".into(),
        out.file_name().unwrap_or_default().to_string_lossy().into_owned(),
    );
    m.write(&manifest_path(out))
}

fn run(cli: Cli) -> Result<(), Failure> {
    let style = match &cli.command {
        Command::Extract { q, .. } | Command::Pipeline { q, .. } => q.style,
        _ => None,
    };
    let cfg = load_config(cli.config.as_deref(), style)?;
    let providers = Providers::from_config(&cfg).map_err(Failure::Validation)?;

    match cli.command {
        Command::Ingest(io) => {
            let (corpus, counts) = pipeline::ingest(&io.input)?;
            corpus.write_jsonl(&io.out)?;
            stage_manifest(&cfg, &io.out, counts, None, 0)?;
        }
        Command::Preprocess(io) => {
            let corpus = ingest_notes(&io.input, NoteFormat::from_path(&io.input))?;
            let (kept, counts) = pipeline::preprocess_stage(&cfg, &providers, &corpus)?;
            kept.write_jsonl(&io.out)?;
            stage_manifest(&cfg, &io.out, counts, None, 0)?;
        }
        Command::Identify { io, diseases } => {
            let corpus = ingest_notes(&io.input, NoteFormat::from_path(&io.input))?;
            let diseases = if diseases.is_empty() { cfg.diseases.clone() } else { diseases };
            let (index, counts) = pipeline::identify_stage(&cfg, &providers, &corpus, &diseases)?;
            pipeline::write_json(&io.out, &index)?;
            stage_manifest(&cfg, &io.out, counts, None, 0)?;
        }
        Command::Extract { io, q } => {
            let index = NoteIndex::load(&io.input)?;
            let gateway = pipeline::build_gateway(&cfg, q.backend.as_deref()).map_err(Failure::Validation)?;
            let outcome = pipeline::extract_stage(&cfg, &providers, &gateway, &index, &io.out, q.resume)?;
            let failures = outcome.failures.len();
            stage_manifest(&cfg, &io.out, outcome.counts, Some(gateway.backend_name()), failures)?;
            if failures > 0 {
                return Err(Failure::Backend(failures));
            }
        }
        Command::Postprocess { io, predictions } => {
            let records = pipeline::read_records(&io.input)?;
            let (relations, counts) =
                pipeline::postprocess_stage(&cfg, &providers, &records, predictions.as_deref())?;
            pipeline::write_relations(&io.out, &relations)?;
            stage_manifest(&cfg, &io.out, counts, None, 0)?;
        }
        Command::BuildKg(io) => {
            let relations = pipeline::read_relations(&io.input)?;
            let (kg, counts) = pipeline::build_kg_stage(&providers, &relations)?;
            pipeline::write_kg(&io.out, &kg)?;
            stage_manifest(&cfg, &io.out, counts, None, 0)?;
        }
        Command::Eval { io, gold, records } => {
            let kg = pipeline::read_kg(&io.input)?;
            let records = records.as_deref().map(pipeline::read_records).transpose()?;
            let report = pipeline::eval_stage(&cfg, &providers, &kg, &gold, records.as_deref())?;
            let model = records
                .as_ref()
                .and_then(|r| r.first())
                .map(|r| r.backend.clone())
                .unwrap_or_else(|| "-".into());
            pipeline::write_eval(&io.out, &report, &model)?;
            print!("{}", report.metrics.to_markdown(&model));
        }
        Command::Pipeline { io, diseases, q, gold } => {
            let run = PipelineRun {
                input: &io.input,
                out_dir: &io.out,
                diseases: &diseases,
                backend: q.backend.as_deref(),
                resume: q.resume,
                gold: gold.as_deref(),
            };
            let manifest = pipeline::run_pipeline(&cfg, &providers, &run)?;
            if manifest.failures > 0 {
                return Err(Failure::Backend(manifest.failures));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_VALIDATION)
        }
        Err(Failure::Stage(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_STAGE)
        }
        Err(Failure::Backend(n)) => {
            eprintln!("error: {n} queries failed after retries; see the failures file");
            ExitCode::from(EXIT_BACKEND)
        }
    }
}
