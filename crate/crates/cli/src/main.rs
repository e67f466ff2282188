use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use malefic::pipeline::{
    classify_index, records_jsonl, run_pipeline, Layout, Overrides, Pipeline, PipelineConfig, RunMode, Stage,
    PIPELINE_PRESETS,
};
use malefic::ModalityId;

/// Exit code for failures caught before any side effect.
const EXIT_VALIDATION: u8 = 2;
const EXIT_FAILURE: u8 = 1;

#[derive(Parser)]
#[command(name = "malefic", version, about = "Interpretable multimodal fusion for change-talk classification")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// TOML config file; its values override the flags below.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Comma-separated modality subset, e.g. `text,audio,face`.
    #[arg(long, global = true, value_parser = parse_modalities)]
    modalities: Option<ModalityList>,
    #[arg(long, global = true, value_parser = clap::builder::PossibleValuesParser::new(PIPELINE_PRESETS))]
    preset: Option<String>,
    /// Print errors to stderr as JSON.
    #[arg(long, global = true)]
    json: bool,
    /// Artifacts directory.
    #[arg(long, global = true, default_value = "artifacts")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus into `data/`.
    GenCorpus,
    /// Reorganize transcripts into labeled sentences.
    Preprocess,
    /// Extract face and body features and build the dataset index.
    Features,
    /// Train the fusion classifier.
    Train,
    /// Evaluate the checkpoint on the validation sessions.
    Eval,
    /// Contribution analysis and embedding export.
    Interpret,
    /// Classify every sentence of a dataset index.
    Classify {
        /// Defaults to the checkpoint in the artifacts directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to the index in the artifacts directory.
        #[arg(long)]
        index: Option<PathBuf>,
        /// JSON-lines output file; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run every stage in order.
    Run {
        #[arg(long, conflicts_with = "overwrite")]
        resume: bool,
        #[arg(long)]
        overwrite: bool,
    },
}

/// Wrapper so clap treats the whole comma-separated list as one value.
#[derive(Clone)]
struct ModalityList(Vec<ModalityId>);

fn parse_modalities(list: &str) -> std::result::Result<ModalityList, String> {
    ModalityId::parse_list(list).map(ModalityList).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) if err.use_stderr() && std::env::args().any(|a| a == "--json") => {
            let report = serde_json::json!({
                "error": "usage",
                "message": err.to_string().trim_end(),
                "exit_code": EXIT_VALIDATION,
            });
            eprintln!("{report}");
            return ExitCode::from(EXIT_VALIDATION);
        }
        Err(err) => err.exit(),
    };
    let json = cli.global.json;
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let lib = err.downcast_ref::<malefic::Error>();
            let code = if lib.is_some_and(malefic::Error::is_validation) {
                EXIT_VALIDATION
            } else {
                EXIT_FAILURE
            };
            if json {
                let report = serde_json::json!({
                    "error": lib.map_or("other", malefic::Error::kind),
                    "message": format!("{err:#}"),
                    "exit_code": code,
                });
                eprintln!("{report}");
            } else {
                eprintln!("error: {err:#}");
            }
            ExitCode::from(code)
        }
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(value) = std::env::var("MALEFIC_THREADS") {
        let n: usize = value
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| malefic::Error::Config(format!("MALEFIC_THREADS must be a positive integer, got `{value}`")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn resolve(global: &GlobalArgs, base: Option<&PipelineConfig>) -> Result<PipelineConfig> {
    let file = global
        .config
        .as_ref()
        .map(|p| fs::read_to_string(p).with_context(|| format!("reading config {}", p.display())))
        .transpose()?;
    let overrides = Overrides {
        preset: global.preset.clone(),
        seed: global.seed,
        modalities: global.modalities.as_ref().map(|m| m.0.clone()),
    };
    Ok(PipelineConfig::resolve(base, &overrides, file.as_deref())?)
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_stdout(&text)
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
fn write_stdout(text: &str) -> Result<()> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn execute(cli: Cli) -> Result<()> {
    configure_threads()?;
    let global = &cli.global;
    let layout = Layout::new(&global.out);
    let stage = match &cli.command {
        Command::GenCorpus => Stage::GenCorpus,
        Command::Preprocess => Stage::Preprocess,
        Command::Features => Stage::Features,
        Command::Train => Stage::Train,
        Command::Eval => Stage::Eval,
        Command::Interpret => Stage::Interpret,
        Command::Classify {
            checkpoint,
            index,
            output,
        } => {
            let checkpoint = checkpoint.clone().unwrap_or_else(|| layout.checkpoint());
            let index = index.clone().unwrap_or_else(|| layout.index());
            let requested = global.modalities.as_ref().map(|m| m.0.as_slice());
            return classify(&checkpoint, &index, requested, output.as_deref());
        }
        Command::Run { resume, overwrite } => {
            let mode = match (resume, overwrite) {
                (true, _) => RunMode::Resume,
                (_, true) => RunMode::Overwrite,
                _ => RunMode::Fresh,
            };
            let base = if mode == RunMode::Resume { layout.recorded_config()? } else { None };
            let config = resolve(global, base.as_ref())?;
            return print_json(&run_pipeline(config, &global.out, mode)?);
        }
    };
    let config = resolve(global, layout.recorded_config()?.as_ref())?;
    let pipeline = Pipeline::new(config, &global.out)?;
    print_json(&pipeline.run_stage(stage)?)
}

fn classify(checkpoint: &Path, index: &Path, requested: Option<&[ModalityId]>, output: Option<&Path>) -> Result<()> {
    let records = classify_index(checkpoint, index, requested)?;
    let text = records_jsonl(&records)?;
    match output {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
        None => write_stdout(&text)?,
    }
    Ok(())
}
