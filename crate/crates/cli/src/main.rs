use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use lfp_core::backends::{BackendKind, BackendSet};
use lfp_core::corpus::{from_jsonl, load_manifest, to_jsonl, ArtifactStore, RunManifest};
use lfp_core::curation::{
    abstracts_to_tts_manifest, balance_unanswerable, build_augmentation_prompt, filter_top_k, make_ape_triplets,
    score_pairs, AugmentationKind, QaExample, ScoredPair,
};
use lfp_core::metrics::{emit_score_table, TableFormat};
use lfp_core::pipeline::{
    evaluate_run, grid_search_chunks, load_references, run_if, run_offline, scores_table, EvalMetric, IfTask,
    OfflineStop, PipelineConfig, RunOptions, RunReport, RunStats,
};

#[derive(Parser)]
#[command(name = "lfp", version, about = "Long-form speech translation cascade")]
struct Cli {
    /// Pipeline config (TOML); `LFP_*` environment variables override fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Talk manifest (JSONL).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Output directory holding the artifact store and run reports.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Continue a run that already has stored artifacts.
    #[arg(long, global = true)]
    resume: bool,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Voice activity detection and chunking.
    Segment,
    /// Segment and transcribe with every configured ASR system.
    Transcribe,
    /// Transcribe and fuse hypotheses into a document.
    Fuse,
    /// Fuse, split into sentences and machine-translate.
    Translate,
    /// Translate and post-edit; same as `run-offline`.
    Postedit,
    /// Full offline cascade.
    RunOffline,
    /// Instruction-following track.
    RunIf {
        #[arg(long, value_enum)]
        task: TaskArg,
        /// Question for `--task sqa`.
        #[arg(long)]
        question: Option<String>,
    },
    /// Scores ASR output over a grid of chunk sizes.
    GridChunks {
        /// References (JSONL with talk_id and text).
        #[arg(long)]
        refs: PathBuf,
        /// Comma-separated chunk sizes in seconds; defaults to the config grid.
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<f64>,
        #[arg(long, value_enum, default_value = "wer")]
        metric: MetricArg,
        #[arg(long, value_enum, default_value = "tsv")]
        format: FormatArg,
    },
    /// Scores a run's outputs against references.
    Evaluate {
        /// Run report written by a pipeline command.
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        refs: PathBuf,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "wer,chrf2")]
        metrics: Vec<MetricArg>,
        #[arg(long, value_enum, default_value = "tsv")]
        format: FormatArg,
    },
    /// Training-data curation.
    Curate {
        #[command(subcommand)]
        task: CurateCommand,
    },
}

#[derive(Subcommand)]
enum CurateCommand {
    /// Keeps the k pairs with the highest quality estimate.
    TopK {
        #[command(flatten)]
        io: Io,
        /// Defaults to the configured top_k.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Samples pairs and machine-translates their sources.
    ApeTriplets {
        #[command(flatten)]
        io: Io,
        /// Defaults to the configured ape_sample_n.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value = "en")]
        src: String,
        #[arg(long)]
        tgt: String,
    },
    /// Downsamples unanswerable questions to a target share.
    BalanceQa {
        #[command(flatten)]
        io: Io,
        /// Defaults to the configured unanswerable_fraction.
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// One synthesis job per abstract sentence.
    TtsManifest {
        #[command(flatten)]
        io: Io,
    },
    /// Renders a data-augmentation prompt.
    Prompt {
        #[arg(long, value_enum)]
        kind: PromptKind,
        /// Placeholder values as key=value (transcript, abstract, text, lang).
        #[arg(long = "arg", value_parser = parse_key_value)]
        args: Vec<(String, String)>,
    },
}

#[derive(Args)]
struct Io {
    /// Input JSONL.
    #[arg(long)]
    input: PathBuf,
    /// Output JSONL; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Asr,
    St,
    Sqa,
    Ssum,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Wer,
    Chrf2,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Tsv,
    Markdown,
}

#[derive(Clone, Copy, ValueEnum)]
enum PromptKind {
    Sqa,
    Ssum,
    St,
}

impl From<MetricArg> for EvalMetric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Wer => EvalMetric::Wer,
            MetricArg::Chrf2 => EvalMetric::Chrf2,
        }
    }
}

impl From<FormatArg> for TableFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Tsv => TableFormat::Tsv,
            FormatArg::Markdown => TableFormat::Markdown,
        }
    }
}

fn parse_key_value(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .ok_or_else(|| format!("expected key=value, got `{s}`"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

struct Session {
    config: PipelineConfig,
    manifest: RunManifest,
    backends: BackendSet,
    store: ArtifactStore,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let path = cli.config.as_ref().ok_or_else(|| anyhow!("--config is required"))?;
    let mut config = PipelineConfig::load(path, std::env::vars())?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn open_store(cli: &Cli) -> Result<ArtifactStore> {
    Ok(ArtifactStore::open(cli.out.join("artifacts"))?)
}

fn pipeline_context(cli: &Cli) -> Result<Session> {
    let config = load_config(cli)?;
    let path = cli.manifest.as_ref().ok_or_else(|| anyhow!("--manifest is required"))?;
    let manifest = load_manifest(path)?;
    let backends = BackendSet::from_specs(&config.backends)?;
    let store = open_store(cli)?;
    Ok(Session {
        config,
        manifest,
        backends,
        store,
    })
}

fn run(cli: &Cli) -> Result<u8> {
    let options = RunOptions { resume: cli.resume };
    let stop = match &cli.command {
        Command::Segment => Some(OfflineStop::Segment),
        Command::Transcribe => Some(OfflineStop::Transcribe),
        Command::Fuse => Some(OfflineStop::Fuse),
        Command::Translate => Some(OfflineStop::Translate),
        Command::Postedit | Command::RunOffline => Some(OfflineStop::Postedit),
        _ => None,
    };
    if let Some(stop) = stop {
        let cx = pipeline_context(cli)?;
        let result = run_offline(&cx.manifest, &cx.config, &cx.backends, &cx.store, stop, options)?;
        return write_report(cli, result);
    }
    match &cli.command {
        Command::RunIf { task, question } => {
            let cx = pipeline_context(cli)?;
            let task = match task {
                TaskArg::Asr => IfTask::Asr,
                TaskArg::St => IfTask::St,
                TaskArg::Sqa => IfTask::Sqa,
                TaskArg::Ssum => IfTask::Ssum,
            };
            let result = run_if(&cx.manifest, &cx.config, &cx.backends, &cx.store, task, question.as_deref(), options)?;
            write_report(cli, result)
        }
        Command::GridChunks {
            refs,
            sizes,
            metric,
            format,
        } => {
            let cx = pipeline_context(cli)?;
            let refs = load_references(refs)?;
            let sizes = if sizes.is_empty() { cx.config.grid_sizes.clone() } else { sizes.clone() };
            let grid = grid_search_chunks(
                &cx.manifest,
                &cx.config,
                &cx.backends,
                &cx.store,
                &refs,
                &sizes,
                (*metric).into(),
                options,
            )?;
            print!("{}", emit_score_table(&grid.table, (*format).into())?);
            Ok(0)
        }
        Command::Evaluate {
            report,
            refs,
            metrics,
            format,
        } => {
            let text = fs::read_to_string(report).with_context(|| format!("reading {}", report.display()))?;
            let report: RunReport = serde_json::from_str(&text).context("run report")?;
            let refs = load_references(refs)?;
            let metrics: Vec<EvalMetric> = metrics.iter().map(|&m| m.into()).collect();
            let store = open_store(cli)?;
            let scores = evaluate_run(&report, &store, &refs, &metrics)?;
            let dir = cli.out.join(&report.run_id);
            fs::create_dir_all(&dir)?;
            fs::write(dir.join("scores.json"), serde_json::to_string_pretty(&scores)?)?;
            print!("{}", emit_score_table(&scores_table(&scores, &metrics), (*format).into())?);
            Ok(0)
        }
        Command::Curate { task } => curate(cli, task),
        _ => unreachable!("offline commands handled above"),
    }
}

/// Writes `report.json` and `stats.json` under `<out>/<run_id>/` and returns
/// the exit code.
fn write_report(cli: &Cli, (report, stats): (RunReport, RunStats)) -> Result<u8> {
    let dir = cli.out.join(&report.run_id);
    fs::create_dir_all(&dir)?;
    let path = dir.join("report.json");
    fs::write(&path, report.to_json())?;
    fs::write(dir.join("stats.json"), serde_json::to_string_pretty(&stats)?)?;
    let s = report.summary;
    println!(
        "run {}: {} ok, {} fallback, {} failed; {} backend calls, {} cached stages",
        report.run_id, s.ok, s.fallback, s.failed, stats.backend_calls, stats.cache_hits
    );
    println!("report: {}", path.display());
    Ok(report.exit_code() as u8)
}

#[derive(Deserialize)]
struct PairLine {
    source: String,
    target: String,
    #[serde(default)]
    origin: String,
    #[serde(default)]
    qe_score: Option<f64>,
}

#[derive(Deserialize)]
struct AbstractLine {
    abstract_id: String,
    text: String,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    from_jsonl(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn emit(output: &Option<PathBuf>, bytes: &[u8]) -> Result<()> {
    match output {
        Some(path) => fs::write(path, bytes).with_context(|| format!("writing {}", path.display())),
        None => Ok(std::io::stdout().write_all(bytes)?),
    }
}

/// Config for curation; a missing `--config` falls back to defaults.
fn curation_config(cli: &Cli) -> Result<PipelineConfig> {
    if cli.config.is_some() {
        return load_config(cli);
    }
    let mut config = PipelineConfig::default();
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn curate(cli: &Cli, task: &CurateCommand) -> Result<u8> {
    match task {
        CurateCommand::TopK { io, k } => {
            let config = curation_config(cli)?;
            let lines: Vec<PairLine> = read_jsonl(&io.input)?;
            let pairs = if lines.iter().all(|l| l.qe_score.is_some()) {
                lines
                    .into_iter()
                    .map(|l| ScoredPair {
                        qe_score: l.qe_score.expect("checked"),
                        source: l.source,
                        target: l.target,
                        origin: l.origin,
                    })
                    .collect()
            } else {
                let backends = BackendSet::from_specs(&config.backends)?;
                let qe = backends
                    .first_of(BackendKind::Qe)
                    .ok_or_else(|| anyhow!("unscored pairs need a qe backend in the config"))?;
                let raw: Vec<(String, String, String)> =
                    lines.into_iter().map(|l| (l.source, l.target, l.origin)).collect();
                score_pairs(&raw, qe)
            };
            let kept = filter_top_k(pairs, k.unwrap_or(config.top_k))?;
            emit(&io.output, &to_jsonl(&kept))?;
            Ok(0)
        }
        CurateCommand::ApeTriplets { io, n, src, tgt } => {
            let config = load_config(cli)?;
            let backends = BackendSet::from_specs(&config.backends)?;
            let mt = match &config.mt_backend {
                Some(id) => backends.get(id),
                None => backends.first_of(BackendKind::Mt),
            }
            .ok_or_else(|| anyhow!("no mt backend configured"))?;
            let pairs: Vec<ScoredPair> = read_jsonl(&io.input)?;
            let sample = make_ape_triplets(
                &pairs,
                n.unwrap_or(config.ape_sample_n),
                mt.as_ref(),
                src,
                tgt,
                config.seed,
            )?;
            if sample.shortfall > 0 {
                log::warn!("{} sampled pairs could not be translated", sample.shortfall);
            }
            emit(&io.output, &to_jsonl(&sample.triplets))?;
            Ok(0)
        }
        CurateCommand::BalanceQa { io, fraction } => {
            let config = curation_config(cli)?;
            let examples: Vec<QaExample> = read_jsonl(&io.input)?;
            let kept = balance_unanswerable(&examples, fraction.unwrap_or(config.unanswerable_fraction), config.seed)?;
            emit(&io.output, &to_jsonl(&kept))?;
            Ok(0)
        }
        CurateCommand::TtsManifest { io } => {
            let lines: Vec<AbstractLine> = read_jsonl(&io.input)?;
            let abstracts: Vec<(String, String)> = lines.into_iter().map(|l| (l.abstract_id, l.text)).collect();
            emit(&io.output, &to_jsonl(&abstracts_to_tts_manifest(&abstracts)))?;
            Ok(0)
        }
        CurateCommand::Prompt { kind, args } => {
            let kind = match kind {
                PromptKind::Sqa => AugmentationKind::Sqa,
                PromptKind::Ssum => AugmentationKind::SsumTranslate,
                PromptKind::St => AugmentationKind::StTranslate,
            };
            let args: BTreeMap<String, String> = args.iter().cloned().collect();
            let (system, user) = build_augmentation_prompt(kind, &args)?;
            println!("{}", serde_json::json!({ "system": system, "user": user }));
            Ok(0)
        }
    }
}
