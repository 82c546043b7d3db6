use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use ranstruct_core::bench::{improvement_percent, EvalMode, ScoreTable};
use ranstruct_core::config::PipelineConfig;
use ranstruct_core::energy::{constant_sampler, phase_overhead, simulate_phase, EnergyReport, Phase};
use ranstruct_core::exec::Exec;
use ranstruct_core::pipeline::{self, artifacts, Pipeline, PipelineError};
use serde::Serialize;

/// Corpus-to-instruction-dataset pipeline, benchmark harness and numeric
/// kernels.
#[derive(Parser, Debug)]
#[command(name = "ranstruct", version, about)]
struct Cli {
    /// Pipeline configuration (TOML). Defaults are used when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Overrides `run_dir` from the config (relative to the current directory).
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,
    /// Run data-parallel kernels on the calling thread only.
    #[arg(long, global = true)]
    sequential: bool,
    /// Sample host power while the command runs and write an energy report.
    #[arg(long, global = true)]
    track_energy: bool,
    /// Log filter (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Read the configured corpora into documents.jsonl.
    Ingest,
    /// Split documents into RAG and LTG chunk manifests.
    Split,
    /// Build or inspect the retrieval index.
    #[command(subcommand)]
    Index(IndexCmd),
    /// Generate, de-duplicate and filter questions from LTG chunks.
    Genq,
    /// Answer valid questions over retrieved context and write the dataset.
    Gena,
    /// Dataset inspection.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Multiple-choice benchmark evaluation and scoring.
    #[command(subcommand)]
    Bench(BenchCmd),
    /// Quantized low-rank adaptation numerics.
    #[command(subcommand)]
    Qlora(QloraCmd),
    /// Energy accounting.
    #[command(subcommand)]
    Energy(EnergyCmd),
    /// Chain several stages.
    #[command(subcommand)]
    Pipeline(PipelineCmd),
}

#[derive(Subcommand, Debug)]
enum IndexCmd {
    Build,
    Stats,
}

#[derive(Subcommand, Debug)]
enum DatasetCmd {
    /// Recompute dataset metrics from a dataset file.
    Stats {
        /// Dataset file; defaults to the run directory's dataset.
        #[arg(long)]
        file: Option<PathBuf>,
    },
}

#[derive(Subcommand, Debug)]
enum BenchCmd {
    Run(BenchRunArgs),
    /// Score run records, or raw per-category accuracies.
    Score(BenchScoreArgs),
}

#[derive(Args, Debug)]
struct BenchRunArgs {
    #[arg(long)]
    file: Option<PathBuf>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<EvalMode>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    per_category: Option<usize>,
}

#[derive(Args, Debug)]
struct BenchScoreArgs {
    /// Run record files written by `bench run`.
    #[arg(long = "run", conflicts_with = "accuracies")]
    runs: Vec<PathBuf>,
    /// Comma-separated easy,medium,difficult,code accuracies.
    #[arg(long, value_delimiter = ',')]
    accuracies: Option<Vec<f64>>,
    /// Also report the relative gain of this table's cumulative score over a baseline.
    #[arg(long)]
    baseline: Option<f64>,
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand, Debug)]
enum QloraCmd {
    /// Quantize a random matrix and check both forward formulations agree.
    Demo {
        #[arg(long)]
        rows: Option<usize>,
        #[arg(long)]
        cols: Option<usize>,
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Subcommand, Debug)]
enum EnergyCmd {
    /// Build a report from a recorded trace or a constant synthetic load.
    Report(EnergyReportArgs),
}

#[derive(Args, Debug)]
struct EnergyReportArgs {
    /// Line-delimited power samples.
    #[arg(long, conflicts_with = "constant", required_unless_present = "constant")]
    trace: Option<PathBuf>,
    /// Constant cpu,gpu,ram watts on a virtual clock.
    #[arg(long, value_delimiter = ',')]
    constant: Option<Vec<f64>>,
    #[arg(long, default_value_t = 36.0)]
    duration_s: f64,
    #[arg(long, default_value_t = 1.0)]
    interval_s: f64,
    #[arg(long, default_value = "custom")]
    phase: String,
    /// Baseline trace; reports the overhead of this phase relative to it.
    #[arg(long)]
    baseline: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum PipelineCmd {
    /// ingest, split, index build, genq and gena in order.
    All,
}

fn parse_mode(s: &str) -> Result<EvalMode, String> {
    s.parse()
}

fn init_logging(level: &str) {
    let env = env_logger::Env::default().default_filter_or(level);
    let _ = env_logger::Builder::from_env(env)
        .format(|buf, record| {
            let line = serde_json::json!({
                "level": record.level().as_str(),
                "target": record.target(),
                "msg": record.args().to_string(),
            });
            writeln!(buf, "{line}")
        })
        .target(env_logger::Target::Stderr)
        .try_init();
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value).context("serializing output")?);
    Ok(())
}

enum Failure {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        if e.is_validation() {
            Failure::Validation(e.into())
        } else {
            Failure::Runtime(e.into())
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p).map_err(|e| Failure::Validation(e.into()))?,
        None => PipelineConfig { base_dir: std::env::current_dir().unwrap_or_default(), ..Default::default() },
    };
    if let Some(r) = &cli.run_dir {
        cfg.run_dir = std::env::current_dir().unwrap_or_default().join(r);
    }
    if cli.track_energy {
        cfg.energy.track = true;
    }
    match &cli.command {
        Command::Bench(BenchCmd::Run(a)) => {
            if let Some(f) = &a.file {
                cfg.bench.file = Some(std::env::current_dir().unwrap_or_default().join(f));
            }
            if let Some(m) = a.mode {
                cfg.bench.mode = m;
            }
            if let Some(k) = a.k {
                cfg.bench.k = k;
            }
            if let Some(s) = a.seed {
                cfg.bench.seed = s;
            }
            if let Some(n) = a.per_category {
                cfg.bench.per_category = n;
            }
        }
        Command::Qlora(QloraCmd::Demo { rows, cols, rank, seed }) => {
            let q = &mut cfg.qlora;
            q.rows = rows.unwrap_or(q.rows);
            q.cols = cols.unwrap_or(q.cols);
            q.rank = rank.unwrap_or(q.rank);
            q.seed = seed.unwrap_or(q.seed);
        }
        _ => {}
    }
    Ok(cfg)
}

fn print_scores(t: &ScoreTable, baseline: Option<f64>, json: bool) -> Result<(), Failure> {
    let gain = baseline
        .map(|b| improvement_percent(t.cumulative_score, b))
        .transpose()
        .map_err(|e| Failure::Validation(e.into()))?;
    if json {
        print_json(&serde_json::json!({ "scores": t, "improvement_percent": gain }))?;
        return Ok(());
    }
    println!("Easy        {:.3}", t.easy);
    println!("Medium      {:.3}", t.medium);
    println!("Difficult   {:.3}", t.difficult);
    println!("Average     {:.3}", t.oranbench_average);
    println!("Code        {:.3}", t.code);
    println!("Cumulative  {:.3}", t.cumulative_score);
    println!("Unparsed    {}", t.unparsed_count);
    if let Some(g) = gain {
        println!("Improvement {g:.2}%");
    }
    Ok(())
}

/// A malformed trace is bad input rather than a failed computation.
fn trace_failure(e: PipelineError) -> Failure {
    match e {
        PipelineError::Energy(_) => Failure::Validation(e.into()),
        other => other.into(),
    }
}

fn energy_report(a: &EnergyReportArgs) -> Result<(), Failure> {
    let phase: Phase = a.phase.parse().map_err(|e: String| Failure::Validation(anyhow::anyhow!(e)))?;
    let report: EnergyReport = match (&a.trace, &a.constant) {
        (Some(t), _) => pipeline::energy_report_from_trace(phase, t).map_err(trace_failure)?,
        (None, Some(w)) => {
            if w.len() != 3 || w.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(Failure::Validation(anyhow::anyhow!(
                    "--constant takes three finite, non-negative watt values"
                )));
            }
            let mut s = constant_sampler(w[0], w[1], w[2]);
            simulate_phase(phase, &mut s, a.interval_s, a.duration_s)
                .map_err(|e| Failure::Validation(PipelineError::from(e).into()))?
                .0
        }
        (None, None) => unreachable!("clap requires one of --trace/--constant"),
    };
    let overhead = match &a.baseline {
        Some(b) => {
            let base =
                pipeline::energy_report_from_trace(Phase::Custom("baseline".into()), b).map_err(trace_failure)?;
            Some(phase_overhead(base.total_wh, report.total_wh).map_err(|e| Failure::Validation(e.into()))?)
        }
        None => None,
    };
    print_json(&serde_json::json!({ "report": report, "overhead_percent": overhead }))?;
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let cfg = load_config(cli)?;
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    let p = Pipeline::new(cfg, exec)?;
    let stage = match &cli.command {
        Command::Ingest => "ingest",
        Command::Split => "split",
        Command::Index(_) => "index",
        Command::Genq => "genq",
        Command::Gena => "gena",
        Command::Dataset(_) => "dataset",
        Command::Bench(_) => "bench",
        Command::Qlora(_) => "qlora",
        Command::Energy(_) => "energy",
        Command::Pipeline(_) => "pipeline",
    };
    let tracked = cli.track_energy;
    match &cli.command {
        Command::Ingest => print_json(&p.with_energy(stage, tracked, || p.ingest())?)?,
        Command::Split => print_json(&p.with_energy(stage, tracked, || p.split())?)?,
        Command::Index(IndexCmd::Build) => print_json(&p.with_energy(stage, tracked, || p.index_build())?)?,
        Command::Index(IndexCmd::Stats) => print_json(&p.index_stats()?)?,
        Command::Genq => print_json(&p.with_energy(stage, tracked, || p.genq())?)?,
        Command::Gena => print_json(&p.with_energy(stage, tracked, || p.gena())?)?,
        Command::Dataset(DatasetCmd::Stats { file }) => print_json(&p.dataset_stats(file.as_deref())?)?,
        Command::Bench(BenchCmd::Run(_)) => {
            let out = p.with_energy(stage, tracked, || p.bench_run())?;
            print_json(&serde_json::json!({
                "items": out.run.items.len(),
                "accuracy": out.accuracy,
                "unparsed": out.unparsed,
                "errored": out.errored,
                "scores": out.scores,
                "run_file": p.artifact(&artifacts::bench_run(p.config().bench.mode)),
            }))?;
        }
        Command::Bench(BenchCmd::Score(a)) => {
            let table = match &a.accuracies {
                Some(v) => {
                    if v.len() != 4 {
                        return Err(Failure::Validation(anyhow::anyhow!("--accuracies takes exactly four values")));
                    }
                    if v.iter().any(|x| !(0.0..=1.0).contains(x)) {
                        return Err(Failure::Validation(anyhow::anyhow!("accuracies must lie in [0, 1]")));
                    }
                    ScoreTable::from_accuracies(v[0], v[1], v[2], v[3])
                }
                None if !a.runs.is_empty() => pipeline::score_run_files(&a.runs)?,
                None => {
                    let default = p.artifact(&artifacts::bench_run(p.config().bench.mode));
                    if !default.is_file() {
                        return Err(PipelineError::MissingArtifact {
                            path: default.display().to_string(),
                            stage: "bench run",
                        }
                        .into());
                    }
                    pipeline::score_run_files(&[default])?
                }
            };
            print_scores(&table, a.baseline, a.json)?;
        }
        Command::Qlora(QloraCmd::Demo { .. }) => print_json(&p.with_energy(stage, tracked, || p.qlora_demo())?)?,
        Command::Energy(EnergyCmd::Report(a)) => energy_report(a)?,
        Command::Pipeline(PipelineCmd::All) => print_json(&p.with_energy("pipeline all", tracked, || p.all())?)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    init_logging(&cli.log_level);
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
