use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nextplace::ingest::{load_stays, load_track_points, prepare_dataset, sequences_from_tracks, write_stays_jsonl, DatasetStats, StayFormat};
use nextplace::runner::{
    ablate, casestudy, evaluate, render_report, run_experiment, ConfigError, ExperimentConfig, Predictor, RunnerError,
    SetError,
};
use nextplace::synthetic::{generate, to_stay_csv, SyntheticSpec};

#[derive(Parser)]
#[command(name = "nextplace", version, about = "Next-location prediction experiments")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Flat `key = value` experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// llm, mock, 1mmc or topfreq.
    #[arg(long, global = true)]
    predictor: Option<Predictor>,
    #[arg(long, global = true)]
    k: Option<usize>,
    /// Template id.
    #[arg(long, global = true)]
    template: Option<String>,
    /// Evaluate a seeded random subset of this many samples.
    #[arg(long, global = true)]
    limit: Option<usize>,
    /// Override any config key, e.g. `--set temperature=0.5`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Load stays or raw tracks and print dataset statistics.
    Ingest {
        /// Write the stay sequences as JSONL.
        #[arg(long)]
        write_stays: Option<PathBuf>,
        /// Write a synthetic stay CSV here instead of reading input.
        #[arg(long)]
        synthetic: Option<PathBuf>,
        #[arg(long, default_value_t = SyntheticSpec::default().users)]
        synthetic_users: usize,
        #[arg(long, default_value_t = SyntheticSpec::default().days)]
        synthetic_days: usize,
    },
    /// Predict every test sample and append records to the results file.
    Run,
    /// Score one or more results files.
    Evaluate {
        #[arg(required = true)]
        results: Vec<PathBuf>,
    },
    /// Run Full and the five single-flag prompt variants.
    Ablate,
    /// Comparison table over results files.
    Report {
        #[arg(required = true)]
        results: Vec<PathBuf>,
        /// Write the CSV table here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Show one sample's prompt, response and parsed prediction.
    Casestudy {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        sample: String,
    },
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<RunnerError> for Failure {
    fn from(e: RunnerError) -> Self {
        match e {
            RunnerError::Config(e) => Failure::Usage(e.to_string()),
            e => Failure::Runtime(e.to_string()),
        }
    }
}

fn build_config(g: &Global) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &g.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    for item in &g.overrides {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {item:?}")))?;
        cfg.set(key.trim(), value.trim())
            .map_err(|e| match e {
                SetError::Unknown => Failure::Usage(format!("--set {item}: unknown key")),
                SetError::Invalid(detail) => Failure::Usage(format!("--set {item}: {detail}")),
            })?;
    }
    if let Some(dir) = &g.output_dir {
        cfg.output_dir = dir.clone();
    }
    if let Some(p) = g.predictor {
        cfg.predictor = p;
    }
    if let Some(k) = g.k {
        cfg.prompt.k = k;
    }
    if let Some(t) = &g.template {
        cfg.prompt.template_id = t.clone();
    }
    if let Some(n) = g.limit {
        cfg.sample_limit = Some(n);
    }
    Ok(cfg)
}

fn write_file(path: &Path, body: &str) -> Result<(), Failure> {
    fs::write(path, body).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn cmd_ingest(cfg: &ExperimentConfig, write_stays: Option<&Path>) -> Result<(), Failure> {
    let offset = cfg.ingest.offset().map_err(|e| Failure::Usage(e.to_string()))?;
    let map = |e: nextplace::ingest::IngestError| Failure::Runtime(e.to_string());
    let sequences = if let Some(path) = &cfg.stays_path {
        let format = cfg.stays_format.or_else(|| StayFormat::from_path(path)).unwrap_or(StayFormat::Csv);
        let loaded = load_stays(path, format, offset).map_err(map)?;
        for m in &loaded.malformed {
            eprintln!("skipped row {}: {}", m.row, m.reason);
        }
        loaded.sequences
    } else if let Some(path) = &cfg.tracks_path {
        let tracks = load_track_points(path, offset).map_err(map)?;
        for m in &tracks.malformed {
            eprintln!("skipped row {}: {}", m.row, m.reason);
        }
        sequences_from_tracks(&tracks, &cfg.ingest).map_err(map)?
    } else {
        return Err(Failure::Usage("set stays_path or tracks_path".into()));
    };
    if let Some(out) = write_stays {
        write_stays_jsonl(out, &sequences, offset).map_err(map)?;
    }
    let prepared = prepare_dataset(sequences, &cfg.ingest, cfg.window);
    print!("{}", DatasetStats::of(&prepared).render());
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = build_config(&cli.global)?;
    match cli.command {
        Command::Ingest {
            write_stays,
            synthetic,
            synthetic_users,
            synthetic_days,
        } => {
            if let Some(out) = synthetic {
                let spec = SyntheticSpec {
                    users: synthetic_users,
                    days: synthetic_days,
                    seed: cfg.seed,
                    ..SyntheticSpec::default()
                };
                write_file(&out, &to_stay_csv(&generate(&spec)))?;
                println!("wrote {}", out.display());
                return Ok(());
            }
            cfg.ingest.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            cmd_ingest(&cfg, write_stays.as_deref())
        }
        Command::Run => {
            let summary = run_experiment(&cfg)?;
            for note in &summary.notes {
                eprintln!("{note}");
            }
            println!("{}", summary.line());
            Ok(())
        }
        Command::Evaluate { results } => {
            let mut rows = Vec::new();
            for path in &results {
                let eval = evaluate(path)?;
                if !eval.corrupt_lines.is_empty() {
                    eprintln!(
                        "{}: skipped {} corrupt line(s): {:?}",
                        path.display(),
                        eval.corrupt_lines.len(),
                        eval.corrupt_lines
                    );
                }
                if eval.duplicates > 0 {
                    eprintln!("{}: ignored {} duplicate record(s)", path.display(), eval.duplicates);
                }
                rows.push((path.display().to_string(), eval.report));
            }
            if let [(_, report)] = rows.as_slice() {
                for (k, v) in report.to_key_values() {
                    println!("{k}={v}");
                }
            } else {
                print!("{}", render_report(&rows).text);
            }
            Ok(())
        }
        Command::Ablate => {
            let outcome = ablate(&cfg)?;
            let mut failed = false;
            for v in &outcome.variants {
                if let Err(e) = &v.result {
                    failed = true;
                    eprintln!("{}: {e}", v.variant);
                }
            }
            print!("{}", outcome.table.text);
            if failed {
                return Err(Failure::Runtime("some variants failed".into()));
            }
            Ok(())
        }
        Command::Report { results, csv } => {
            let mut rows = Vec::new();
            for path in &results {
                let name = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
                rows.push((name, evaluate(path)?.report));
            }
            let tables = render_report(&rows);
            if let Some(out) = csv {
                write_file(&out, &tables.csv)?;
            }
            print!("{}", tables.text);
            Ok(())
        }
        Command::Casestudy { results, sample } => {
            print!("{}", casestudy(&cfg, &results, &sample)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
