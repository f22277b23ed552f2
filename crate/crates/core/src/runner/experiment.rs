use std::collections::{HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Predictor};
use super::RunnerError;
use crate::baselines::MarkovModel;
use crate::gateway::{CompletionBackend, GatewayError, GatewayStats, HttpBackend, MockBackend, RawResponse};
use crate::ingest::{load_stays, load_track_points, prepare_dataset, sequences_from_tracks, PreparedDataset, StayFormat};
use crate::parse::{parse_text, repair_prompt, ParseDiagnostics, RankedPrediction};
use crate::prompt::{render_with, PromptConfig, Template, TemplateStore};
use crate::PredictionSample;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordDiagnostics {
    pub had_duplicates: bool,
    pub was_truncated: bool,
    pub repair_used: bool,
    /// A corrective follow-up prompt was sent.
    pub repair_round: bool,
}

impl RecordDiagnostics {
    fn from_parse(d: ParseDiagnostics, repair_round: bool) -> Self {
        Self {
            had_duplicates: d.had_duplicates,
            was_truncated: d.was_truncated,
            repair_used: d.repair_used,
            repair_round,
        }
    }
}

/// Wall-clock fields; excluded from determinism comparisons.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timing {
    pub latency_ms: u64,
    pub from_cache: bool,
}

/// One line of a results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: String,
    pub user_id: String,
    pub predictor: String,
    pub k: usize,
    #[serde(default)]
    pub prompt_hash: Option<String>,
    /// Model output, or `baseline:<name>` for baselines.
    pub raw_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repair_raw_text: Option<String>,
    pub places: Vec<u64>,
    #[serde(default)]
    pub reason: String,
    pub ground_truth: u64,
    pub hit_rank: Option<usize>,
    pub parse_failed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Backend calls spent on this sample, repair included.
    pub calls: u32,
    #[serde(default)]
    pub diagnostics: RecordDiagnostics,
    #[serde(default)]
    pub timing: Timing,
}

impl SampleRecord {
    fn new(sample: &PredictionSample, predictor: Predictor, k: usize) -> Self {
        Self {
            sample_id: sample.sample_id.clone(),
            user_id: sample.user_id.clone(),
            predictor: predictor.name().to_string(),
            k,
            prompt_hash: None,
            raw_text: String::new(),
            repair_raw_text: None,
            places: Vec::new(),
            reason: String::new(),
            ground_truth: sample.ground_truth.0,
            hit_rank: None,
            parse_failed: false,
            error: None,
            calls: 0,
            diagnostics: RecordDiagnostics::default(),
            timing: Timing::default(),
        }
    }

    fn set_places(&mut self, places: &[crate::PlaceId]) {
        self.places = places.iter().map(|p| p.0).collect();
        self.hit_rank = self.places.iter().position(|&p| p == self.ground_truth).map(|i| i + 1);
    }

    fn accept(&mut self, pred: RankedPrediction, repair_round: bool) {
        self.set_places(&pred.places);
        self.reason = pred.reason;
        self.diagnostics = RecordDiagnostics::from_parse(pred.diagnostics, repair_round);
    }

    fn fail(&mut self, error: String, repair_round: bool) {
        self.parse_failed = true;
        self.error = Some(error);
        self.diagnostics.repair_round = repair_round;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub results_path: PathBuf,
    pub predictor: String,
    pub total_samples: usize,
    pub already_done: usize,
    pub processed: usize,
    pub failures: usize,
    pub interrupted: bool,
    pub gateway: GatewayStats,
    pub elapsed_ms: u64,
    pub notes: Vec<String>,
}

impl RunSummary {
    pub fn line(&self) -> String {
        format!(
            "{}: {} samples ({} resumed, {} new, {} failed), {} requests, {} cache hits, {} ms{}",
            self.results_path.display(),
            self.total_samples,
            self.already_done,
            self.processed,
            self.failures,
            self.gateway.requests,
            self.gateway.cache_hits,
            self.elapsed_ms,
            if self.interrupted { " [interrupted]" } else { "" }
        )
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Stop after this many new records without finalizing the file, as if
    /// the process had been killed.
    pub stop_after: Option<usize>,
}

/// Loads the configured input and builds the test samples.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<PreparedDataset, RunnerError> {
    let offset = cfg.ingest.offset()?;
    let sequences = if let Some(path) = &cfg.stays_path {
        let format = cfg
            .stays_format
            .or_else(|| StayFormat::from_path(path))
            .unwrap_or(StayFormat::Csv);
        load_stays(path, format, offset)?.sequences
    } else if let Some(path) = &cfg.tracks_path {
        sequences_from_tracks(&load_track_points(path, offset)?, &cfg.ingest)?
    } else {
        return Err(RunnerError::Config(super::ConfigError::Invalid(
            "set stays_path or tracks_path".into(),
        )));
    };
    Ok(prepare_dataset(sequences, &cfg.ingest, cfg.window))
}

/// All samples, or a seeded subset of `limit` kept in sample-id order.
pub fn select_samples(samples: &[PredictionSample], limit: Option<usize>, seed: u64) -> Vec<PredictionSample> {
    match limit {
        Some(n) if n < samples.len() => {
            let mut idx: Vec<usize> = (0..samples.len()).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            idx.truncate(n);
            idx.sort_unstable();
            idx.into_iter().map(|i| samples[i].clone()).collect()
        }
        _ => samples.to_vec(),
    }
}

pub fn no_network() -> bool {
    std::env::var("NO_NETWORK").is_ok_and(|v| v == "1")
}

/// The predictor actually used: `NO_NETWORK=1` turns the live model into the mock.
pub fn effective_config(cfg: &ExperimentConfig) -> (ExperimentConfig, Option<String>) {
    let mut cfg = cfg.clone();
    if cfg.predictor == Predictor::Llm && no_network() {
        cfg.predictor = Predictor::Mock;
        return (cfg, Some("NO_NETWORK=1: using the mock backend instead of the live model".into()));
    }
    (cfg, None)
}

pub fn make_backend(cfg: &ExperimentConfig) -> Result<Option<Box<dyn CompletionBackend>>, RunnerError> {
    Ok(match cfg.predictor {
        Predictor::Llm => Some(Box::new(HttpBackend::new(cfg.backend.clone())?)),
        Predictor::Mock => Some(Box::new(MockBackend)),
        Predictor::Markov | Predictor::TopFreq => None,
    })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary, RunnerError> {
    cfg.validate()?;
    let (cfg, note) = effective_config(cfg);
    let dataset = load_dataset(&cfg)?;
    let backend = make_backend(&cfg)?;
    let mut summary = run_prepared(&cfg, &dataset, backend.as_deref(), RunOptions::default())?;
    summary.notes.extend(note);
    Ok(summary)
}

struct Existing {
    done: HashSet<String>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunnerError + '_ {
    move |source| RunnerError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Reads records already present, dropping a partial trailing line left by
/// an interrupted writer.
fn load_existing(path: &Path, predictor: Predictor, k: usize) -> Result<Existing, RunnerError> {
    let mut done = HashSet::new();
    if !path.exists() {
        return Ok(Existing { done });
    }
    let bytes = fs::read(path).map_err(io_err(path))?;
    let complete_len = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
    if complete_len < bytes.len() {
        let f = OpenOptions::new().write(true).open(path).map_err(io_err(path))?;
        f.set_len(complete_len as u64).map_err(io_err(path))?;
    }
    for line in String::from_utf8_lossy(&bytes[..complete_len]).lines() {
        let Ok(rec) = serde_json::from_str::<SampleRecord>(line) else {
            continue;
        };
        if rec.predictor != predictor.name() || rec.k != k {
            return Err(RunnerError::ResultsMismatch(format!(
                "{} holds {} k={} records, this run is {} k={}",
                path.display(),
                rec.predictor,
                rec.k,
                predictor,
                k
            )));
        }
        done.insert(rec.sample_id);
    }
    Ok(Existing { done })
}

/// Rewrites the results file with one record per sample, sorted by id.
fn finalize(path: &Path) -> Result<(), RunnerError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut records: Vec<(String, &str)> = Vec::new();
    let mut seen = HashSet::new();
    for line in text.lines() {
        if let Ok(rec) = serde_json::from_str::<SampleRecord>(line) {
            if seen.insert(rec.sample_id.clone()) {
                records.push((rec.sample_id, line));
            }
        }
    }
    records.sort_by(|a, b| a.0.cmp(&b.0));
    let tmp = path.with_extension("jsonl.tmp");
    {
        let mut out = BufWriter::new(File::create(&tmp).map_err(io_err(&tmp))?);
        for (_, line) in records {
            writeln!(out, "{line}").map_err(io_err(&tmp))?;
        }
        out.flush().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

enum Job<'a> {
    Prompted {
        backend: &'a dyn CompletionBackend,
        template: Template,
        prompt: PromptConfig,
    },
    Baseline {
        models: HashMap<String, MarkovModel>,
    },
}

fn predict_prompted(
    sample: &PredictionSample,
    predictor: Predictor,
    backend: &dyn CompletionBackend,
    template: &Template,
    cfg: &PromptConfig,
) -> Result<SampleRecord, RunnerError> {
    let started = Instant::now();
    let mut rec = SampleRecord::new(sample, predictor, cfg.k);
    let prompt = render_with(sample, cfg, template)?;
    rec.prompt_hash = Some(prompt.prompt_hash.clone());

    let first = backend.complete(&prompt);
    rec.calls = 1;
    let bad_output = match first {
        Ok(raw) => {
            rec.timing.from_cache = raw.from_cache;
            rec.raw_text = raw.text.clone();
            match parse_text(&raw.text, cfg.k) {
                Ok(pred) => {
                    rec.accept(pred, false);
                    rec.timing.latency_ms = started.elapsed().as_millis() as u64;
                    return Ok(rec);
                }
                Err(_) => raw.text,
            }
        }
        Err(GatewayError::ContentRefusal(detail)) => detail,
        Err(e) if e.is_fatal() => return Err(e.into()),
        Err(e) => {
            rec.fail(e.to_string(), false);
            rec.timing.latency_ms = started.elapsed().as_millis() as u64;
            return Ok(rec);
        }
    };

    let repaired = repair_prompt(&prompt, &bad_output);
    rec.calls += 1;
    match backend.complete(&repaired) {
        Ok(RawResponse { text, .. }) => {
            match parse_text(&text, cfg.k) {
                Ok(pred) => rec.accept(pred, true),
                Err(e) => rec.fail(e.to_string(), true),
            }
            rec.repair_raw_text = Some(text);
        }
        Err(e) if e.is_fatal() => return Err(e.into()),
        Err(e) => rec.fail(e.to_string(), true),
    }
    rec.timing.latency_ms = started.elapsed().as_millis() as u64;
    Ok(rec)
}

fn predict_baseline(
    sample: &PredictionSample,
    predictor: Predictor,
    models: &HashMap<String, MarkovModel>,
    k: usize,
) -> SampleRecord {
    let mut rec = SampleRecord::new(sample, predictor, k);
    rec.raw_text = format!("baseline:{predictor}");
    let empty = MarkovModel::default();
    let model = models.get(&sample.user_id).unwrap_or(&empty);
    let places = match predictor {
        Predictor::TopFreq => model.predict_topfreq(k),
        _ => match sample.context.last() {
            Some(current) => model.predict(current.place_id(), k),
            None => model.predict_topfreq(k),
        },
    };
    rec.set_places(&places);
    rec
}

/// Runs every sample not yet present in the results file and appends its
/// record. Completed files are rewritten in sample-id order.
pub fn run_prepared(
    cfg: &ExperimentConfig,
    dataset: &PreparedDataset,
    backend: Option<&dyn CompletionBackend>,
    options: RunOptions,
) -> Result<RunSummary, RunnerError> {
    let started = Instant::now();
    let predictor = cfg.predictor;
    let k = cfg.prompt.k;
    let samples = select_samples(&dataset.samples, cfg.sample_limit, cfg.seed);

    let mock = MockBackend;
    let job = if predictor.uses_prompts() {
        let store = cfg
            .template_dir
            .as_ref()
            .map_or_else(TemplateStore::builtin, TemplateStore::with_dir);
        let backend: &dyn CompletionBackend = match (backend, predictor) {
            (Some(b), _) => b,
            (None, Predictor::Mock) => &mock,
            (None, _) => return Err(RunnerError::MissingBackend),
        };
        cfg.prompt.validate()?;
        Job::Prompted {
            backend,
            template: store.load(&cfg.prompt.template_id)?,
            prompt: cfg.prompt.clone(),
        }
    } else {
        let models = dataset
            .users
            .iter()
            .map(|u| (u.sequence.user_id().to_string(), MarkovModel::fit(u.split.train(&u.sequence))))
            .collect();
        Job::Baseline { models }
    };

    fs::create_dir_all(&cfg.output_dir).map_err(io_err(&cfg.output_dir))?;
    let path = cfg.results_path();
    let existing = load_existing(&path, predictor, k)?;
    let pending: Vec<&PredictionSample> = samples.iter().filter(|s| !existing.done.contains(&s.sample_id)).collect();
    let already_done = samples.len() - pending.len();

    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(io_err(&path))?;
    let mut out = BufWriter::new(file);

    let workers = cfg.backend.max_in_flight.max(1).min(pending.len().max(1));
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let mut processed = 0;
    let mut failures = 0;
    let mut fatal: Option<RunnerError> = None;
    let mut interrupted = false;

    std::thread::scope(|scope| -> Result<(), RunnerError> {
        let (tx, rx) = mpsc::channel::<Result<SampleRecord, RunnerError>>();
        for _ in 0..workers {
            let tx = tx.clone();
            let (job, pending, next, stop) = (&job, &pending, &next, &stop);
            scope.spawn(move || loop {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(sample) = pending.get(i) else { break };
                let result = match job {
                    Job::Prompted {
                        backend,
                        template,
                        prompt,
                    } => predict_prompted(sample, predictor, *backend, template, prompt),
                    Job::Baseline { models } => Ok(predict_baseline(sample, predictor, models, k)),
                };
                if result.is_err() {
                    stop.store(true, Ordering::SeqCst);
                }
                if tx.send(result).is_err() {
                    break;
                }
            });
        }
        drop(tx);
        // Single writer: this thread owns the results file.
        for result in rx {
            match result {
                Ok(rec) => {
                    if interrupted {
                        continue;
                    }
                    let line = serde_json::to_string(&rec).expect("record serializes");
                    writeln!(out, "{line}").map_err(io_err(&path))?;
                    out.flush().map_err(io_err(&path))?;
                    processed += 1;
                    failures += usize::from(rec.parse_failed);
                    if options.stop_after.is_some_and(|n| processed >= n) {
                        interrupted = true;
                        stop.store(true, Ordering::SeqCst);
                    }
                }
                Err(e) => {
                    stop.store(true, Ordering::SeqCst);
                    fatal.get_or_insert(e);
                }
            }
        }
        Ok(())
    })?;
    drop(out);

    if let Some(e) = fatal {
        return Err(e);
    }
    if !interrupted {
        finalize(&path)?;
    }
    let gateway = match &job {
        Job::Prompted { backend, .. } => backend.stats(),
        Job::Baseline { .. } => GatewayStats::default(),
    };
    Ok(RunSummary {
        results_path: path,
        predictor: predictor.name().to_string(),
        total_samples: samples.len(),
        already_done,
        processed,
        failures,
        interrupted,
        gateway,
        elapsed_ms: started.elapsed().as_millis() as u64,
        notes: Vec::new(),
    })
}
