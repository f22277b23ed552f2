use std::fs;
use std::path::PathBuf;

use super::config::{ConfigError, ExperimentConfig};
use super::evaluate::evaluate;
use super::experiment::{effective_config, load_dataset, make_backend, run_prepared, RunOptions};
use super::report::{render_report, ReportTables};
use super::RunnerError;
use crate::gateway::CompletionBackend;
use crate::ingest::PreparedDataset;
use crate::metrics::MetricsReport;
use crate::prompt::{ablation_variants, Variant};

#[derive(Debug)]
pub struct VariantOutcome {
    pub variant: Variant,
    pub results_path: PathBuf,
    pub result: Result<MetricsReport, RunnerError>,
}

#[derive(Debug)]
pub struct AblationOutcome {
    pub variants: Vec<VariantOutcome>,
    /// Rows for the variants that completed.
    pub table: ReportTables,
}

pub fn ablate(base: &ExperimentConfig) -> Result<AblationOutcome, RunnerError> {
    base.validate()?;
    let (base, _) = effective_config(base);
    let dataset = load_dataset(&base)?;
    let backend = make_backend(&base)?;
    ablate_with(&base, &dataset, backend.as_deref())
}

/// Runs Full and the five single-flag variants over the same samples. Each
/// variant writes `ablate_<Variant>.jsonl` and `ablate_<Variant>.report.txt`;
/// a failing variant is reported and the rest still run.
pub fn ablate_with(
    base: &ExperimentConfig,
    dataset: &PreparedDataset,
    backend: Option<&dyn CompletionBackend>,
) -> Result<AblationOutcome, RunnerError> {
    if !base.predictor.uses_prompts() {
        return Err(ConfigError::Invalid(format!("ablation needs a prompt-based predictor, not {}", base.predictor)).into());
    }
    fs::create_dir_all(&base.output_dir).map_err(|source| RunnerError::Io {
        path: base.output_dir.display().to_string(),
        source,
    })?;
    let mut variants = Vec::new();
    let mut rows = Vec::new();
    for (variant, prompt) in ablation_variants(&base.prompt) {
        let mut cfg = base.clone();
        cfg.prompt = prompt;
        cfg.results_name = Some(format!("ablate_{variant}.jsonl"));
        let results_path = cfg.results_path();
        let result = run_prepared(&cfg, dataset, backend, RunOptions::default())
            .and_then(|_| evaluate(&results_path))
            .and_then(|eval| {
                let report_path = base.output_dir.join(format!("ablate_{variant}.report.txt"));
                let body: String = eval
                    .report
                    .to_key_values()
                    .iter()
                    .map(|(k, v)| format!("{k}={v}\n"))
                    .collect();
                fs::write(&report_path, body).map_err(|source| RunnerError::Io {
                    path: report_path.display().to_string(),
                    source,
                })?;
                Ok(eval.report)
            });
        if let Ok(report) = &result {
            rows.push((variant.to_string(), report.clone()));
        }
        variants.push(VariantOutcome {
            variant,
            results_path,
            result,
        });
    }
    let table = render_report(&rows);
    for (name, body) in [("ablate_comparison.csv", &table.csv), ("ablate_comparison.txt", &table.text)] {
        let path = base.output_dir.join(name);
        fs::write(&path, body).map_err(|source| RunnerError::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    Ok(AblationOutcome { variants, table })
}
