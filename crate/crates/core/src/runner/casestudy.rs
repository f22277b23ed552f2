use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::config::ExperimentConfig;
use super::experiment::{load_dataset, SampleRecord};
use super::RunnerError;
use crate::ingest::PreparedDataset;
use crate::prompt::{format_target, render_with, TemplateStore};

pub fn casestudy(cfg: &ExperimentConfig, results: &Path, sample_id: &str) -> Result<String, RunnerError> {
    let dataset = load_dataset(cfg)?;
    casestudy_with(cfg, &dataset, results, sample_id)
}

/// The prompt re-rendered from `cfg` next to the stored record for one
/// sample. A hash mismatch means the record came from a different prompt
/// configuration.
pub fn casestudy_with(
    cfg: &ExperimentConfig,
    dataset: &PreparedDataset,
    results: &Path,
    sample_id: &str,
) -> Result<String, RunnerError> {
    let sample = dataset
        .samples
        .iter()
        .find(|s| s.sample_id == sample_id)
        .ok_or_else(|| RunnerError::NotFound(format!("sample {sample_id} is not in the dataset")))?;
    let text = fs::read_to_string(results).map_err(|source| RunnerError::Io {
        path: results.display().to_string(),
        source,
    })?;
    let record = text
        .lines()
        .filter_map(|l| serde_json::from_str::<SampleRecord>(l).ok())
        .find(|r| r.sample_id == sample_id)
        .ok_or_else(|| RunnerError::NotFound(format!("sample {sample_id} is not in {}", results.display())))?;

    let mut out = String::new();
    let _ = writeln!(out, "sample:       {}", sample.sample_id);
    let _ = writeln!(out, "user:         {}", sample.user_id);
    let _ = writeln!(out, "target:       {}", format_target(&sample.target));
    let _ = writeln!(out, "ground truth: {}", sample.ground_truth);
    let _ = writeln!(out, "predictor:    {} (k={})", record.predictor, record.k);

    if let Some(stored_hash) = &record.prompt_hash {
        let store = cfg
            .template_dir
            .as_ref()
            .map_or_else(TemplateStore::builtin, TemplateStore::with_dir);
        let mut prompt_cfg = cfg.prompt.clone();
        prompt_cfg.k = record.k;
        let template = store.load(&prompt_cfg.template_id)?;
        let prompt = render_with(sample, &prompt_cfg, &template)?;
        if &prompt.prompt_hash != stored_hash {
            let _ = writeln!(out, "note:         prompt hash differs from the record; the run used another prompt configuration");
        }
        let _ = writeln!(out, "\n--- prompt ---\n{}", prompt.text);
    }
    let _ = writeln!(out, "\n--- response ---\n{}", record.raw_text);
    if let Some(repair) = &record.repair_raw_text {
        let _ = writeln!(out, "\n--- repair response ---\n{repair}");
    }
    let places: Vec<String> = record.places.iter().map(u64::to_string).collect();
    let _ = writeln!(out, "\n--- parsed ---");
    let _ = writeln!(out, "prediction:   [{}]", places.join(", "));
    if !record.reason.is_empty() {
        let _ = writeln!(out, "reason:       {}", record.reason);
    }
    let _ = writeln!(
        out,
        "hit rank:     {}",
        record.hit_rank.map_or_else(|| "miss".to_string(), |r| r.to_string())
    );
    if let Some(err) = &record.error {
        let _ = writeln!(out, "error:        {err}");
    }
    Ok(out)
}
