use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::Deserialize;

use super::RunnerError;
use crate::metrics::{MetricsReport, ScoredSample};
use crate::PlaceId;

/// Fields evaluation needs; anything else in a record is ignored.
#[derive(Deserialize)]
struct ScoredRecord {
    sample_id: String,
    k: usize,
    places: Vec<u64>,
    ground_truth: u64,
    #[serde(default)]
    parse_failed: bool,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub k: usize,
    /// 1-based line numbers that were skipped.
    pub corrupt_lines: Vec<usize>,
    /// Later records for an already seen sample id; the first one counts.
    pub duplicates: usize,
    pub samples: Vec<ScoredSample>,
}

/// Scores a results file. Hit ranks are recomputed from `places` and
/// `ground_truth`; stored ranks are not trusted.
pub fn evaluate(path: &Path) -> Result<Evaluation, RunnerError> {
    let text = fs::read_to_string(path).map_err(|source| RunnerError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut corrupt_lines = Vec::new();
    let mut duplicates = 0;
    let mut seen = HashSet::new();
    let mut samples = Vec::new();
    let mut k: Option<usize> = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let Ok(rec) = serde_json::from_str::<ScoredRecord>(line) else {
            corrupt_lines.push(i + 1);
            continue;
        };
        match k {
            None => k = Some(rec.k),
            Some(prev) if prev != rec.k => {
                return Err(RunnerError::ResultsMismatch(format!(
                    "{}: line {} has k={} but earlier records have k={prev}",
                    path.display(),
                    i + 1,
                    rec.k
                )))
            }
            _ => {}
        }
        if !seen.insert(rec.sample_id.clone()) {
            duplicates += 1;
            continue;
        }
        let truth = PlaceId(rec.ground_truth);
        samples.push(if rec.parse_failed {
            ScoredSample::failed(rec.sample_id, truth)
        } else {
            ScoredSample::new(rec.sample_id, rec.places.into_iter().map(PlaceId).collect(), truth)
        });
    }
    let k = k.unwrap_or(1);
    let report = MetricsReport::compute(&samples, k)?;
    Ok(Evaluation {
        report,
        k,
        corrupt_lines,
        duplicates,
        samples,
    })
}
