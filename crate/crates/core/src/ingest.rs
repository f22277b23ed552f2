//! Loading stay tables and raw track points, stay-point detection, place-id
//! assignment and the chronological train/test split.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, FixedOffset, NaiveDateTime, TimeZone};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::mobility::{build_samples, local_time, PlaceId, PredictionSample, UserSequence, WindowConfig};

const EARTH_RADIUS_M: f64 = 6_371_000.0;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column {0:?} in header")]
    MissingColumn(&'static str),
    #[error("dataset contains no usable rows")]
    EmptyDataset,
    #[error("user {user_id} has {stays} stays, fewer than the required {required}")]
    TooFewStays {
        user_id: String,
        stays: usize,
        required: usize,
    },
    #[error("invalid ingest configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown stay format {0:?} (expected csv or jsonl)")]
    UnknownFormat(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IngestConfig {
    pub stay_radius_m: f64,
    pub stay_min_duration_min: f64,
    pub place_cluster_radius_m: f64,
    pub test_fraction: f64,
    pub min_stays_per_user: usize,
    /// Fixed offset from UTC used to derive clock time and weekday.
    pub utc_offset_minutes: i32,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            stay_radius_m: 200.0,
            stay_min_duration_min: 30.0,
            place_cluster_radius_m: 200.0,
            test_fraction: 0.2,
            min_stays_per_user: 10,
            utc_offset_minutes: 0,
        }
    }
}

impl IngestConfig {
    pub fn validate(&self) -> Result<(), IngestError> {
        let positive = [
            ("stay_radius_m", self.stay_radius_m),
            ("stay_min_duration_min", self.stay_min_duration_min),
            ("place_cluster_radius_m", self.place_cluster_radius_m),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(IngestError::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(IngestError::InvalidConfig(format!(
                "test_fraction must lie strictly between 0 and 1, got {}",
                self.test_fraction
            )));
        }
        if self.min_stays_per_user == 0 {
            return Err(IngestError::InvalidConfig("min_stays_per_user must be positive".into()));
        }
        self.offset()?;
        Ok(())
    }

    pub fn offset(&self) -> Result<FixedOffset, IngestError> {
        FixedOffset::east_opt(self.utc_offset_minutes * 60).ok_or_else(|| {
            IngestError::InvalidConfig(format!("utc offset {} minutes out of range", self.utc_offset_minutes))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StayFormat {
    Csv,
    Jsonl,
}

impl FromStr for StayFormat {
    type Err = IngestError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "csv" => Ok(StayFormat::Csv),
            "jsonl" | "json" => Ok(StayFormat::Jsonl),
            other => Err(IngestError::UnknownFormat(other.to_string())),
        }
    }
}

impl StayFormat {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "csv" => Some(StayFormat::Csv),
            "jsonl" | "json" => Some(StayFormat::Jsonl),
            _ => None,
        }
    }
}

/// A data row that could not be used. `row` is 1-based, excluding the header.
#[derive(Debug, Clone, PartialEq)]
pub struct MalformedRow {
    pub row: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct LoadedStays {
    pub sequences: Vec<UserSequence>,
    pub malformed: Vec<MalformedRow>,
}

/// Parses an ISO-8601 instant, or integer epoch seconds. Timestamps without an
/// explicit offset are read as local time in `offset`.
pub fn parse_timestamp(s: &str, offset: FixedOffset) -> Option<i64> {
    let s = s.trim();
    if let Ok(epoch) = s.parse::<i64>() {
        return Some(epoch);
    }
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f%:z", "%Y-%m-%dT%H:%M%:z", "%Y-%m-%d %H:%M:%S%:z"] {
        if let Ok(dt) = DateTime::parse_from_str(s, fmt) {
            return Some(dt.timestamp());
        }
    }
    for fmt in [
        "%Y-%m-%dT%H:%M:%S%.f",
        "%Y-%m-%dT%H:%M",
        "%Y-%m-%d %H:%M:%S%.f",
        "%Y-%m-%d %H:%M",
    ] {
        if let Ok(naive) = NaiveDateTime::parse_from_str(s, fmt) {
            return offset.from_local_datetime(&naive).single().map(|dt| dt.timestamp());
        }
    }
    None
}

/// Formats an epoch instant as ISO-8601 with the dataset offset.
pub fn format_timestamp(epoch_seconds: i64, offset: FixedOffset) -> String {
    local_time(epoch_seconds, offset).format("%Y-%m-%dT%H:%M:%S%:z").to_string()
}

type StayRow = (String, i64, u32, PlaceId);

fn parse_stay_fields(
    user: &str,
    ts: &str,
    duration: &str,
    place: &str,
    offset: FixedOffset,
) -> Result<StayRow, String> {
    let user = user.trim();
    if user.is_empty() {
        return Err("empty user_id".into());
    }
    let ts = parse_timestamp(ts, offset).ok_or_else(|| format!("bad start_ts {ts:?}"))?;
    let duration: u32 = duration
        .trim()
        .parse()
        .map_err(|_| format!("bad duration_min {duration:?}"))?;
    let place: u64 = place.trim().parse().map_err(|_| format!("bad place_id {place:?}"))?;
    Ok((user.to_string(), ts, duration, PlaceId(place)))
}

fn json_field_text(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

/// Loads a stay table into one time-ordered sequence per user (users sorted
/// by id). Unusable rows are skipped and reported.
pub fn load_stays(path: &Path, format: StayFormat, offset: FixedOffset) -> Result<LoadedStays, IngestError> {
    let mut rows: Vec<StayRow> = Vec::new();
    let mut malformed = Vec::new();
    match format {
        StayFormat::Csv => {
            let mut reader = csv::ReaderBuilder::new()
                .trim(csv::Trim::All)
                .flexible(true)
                .from_path(path)?;
            let headers = reader.headers()?.clone();
            let col = |name: &'static str| {
                headers
                    .iter()
                    .position(|h| h == name)
                    .ok_or(IngestError::MissingColumn(name))
            };
            let (cu, ct, cd, cp) = (col("user_id")?, col("start_ts")?, col("duration_min")?, col("place_id")?);
            for (i, rec) in reader.records().enumerate() {
                let row = i + 1;
                let parsed = rec.map_err(|e| e.to_string()).and_then(|rec| {
                    let get = |c: usize| rec.get(c).unwrap_or("").to_string();
                    parse_stay_fields(&get(cu), &get(ct), &get(cd), &get(cp), offset)
                });
                match parsed {
                    Ok(r) => rows.push(r),
                    Err(reason) => malformed.push(MalformedRow { row, reason }),
                }
            }
        }
        StayFormat::Jsonl => {
            let file = File::open(path).map_err(io_err(path))?;
            let mut row = 0;
            for line in BufReader::new(file).lines() {
                let line = line.map_err(io_err(path))?;
                if line.trim().is_empty() {
                    continue;
                }
                row += 1;
                let parsed = serde_json::from_str::<Value>(&line)
                    .map_err(|e| e.to_string())
                    .and_then(|v| {
                        let get = |k: &str| v.get(k).and_then(json_field_text).unwrap_or_default();
                        parse_stay_fields(&get("user_id"), &get("start_ts"), &get("duration_min"), &get("place_id"), offset)
                    });
                match parsed {
                    Ok(r) => rows.push(r),
                    Err(reason) => malformed.push(MalformedRow { row, reason }),
                }
            }
        }
    }
    if rows.is_empty() {
        return Err(IngestError::EmptyDataset);
    }
    let mut by_user: BTreeMap<String, Vec<(i64, u32, PlaceId)>> = BTreeMap::new();
    for (user, ts, dur, pid) in rows {
        by_user.entry(user).or_default().push((ts, dur, pid));
    }
    let sequences = by_user
        .into_iter()
        .map(|(user, rows)| UserSequence::from_rows(user, rows, offset))
        .collect();
    Ok(LoadedStays { sequences, malformed })
}

#[derive(Serialize)]
struct StayLine<'a> {
    user_id: &'a str,
    start_ts: String,
    duration_min: u32,
    place_id: u64,
}

/// Writes sequences as a JSONL stay table readable by [`load_stays`].
pub fn write_stays_jsonl(path: &Path, sequences: &[UserSequence], offset: FixedOffset) -> Result<(), IngestError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    for seq in sequences {
        for (stay, &ts) in seq.stays().iter().zip(seq.absolute_times()) {
            let line = StayLine {
                user_id: seq.user_id(),
                start_ts: format_timestamp(ts, offset),
                duration_min: stay.duration(),
                place_id: stay.place_id().0,
            };
            let json = serde_json::to_string(&line).expect("stay line serializes");
            writeln!(out, "{json}").map_err(io_err(path))?;
        }
    }
    out.flush().map_err(io_err(path))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

/// Great-circle distance in meters.
pub fn haversine_m(a: GeoPoint, b: GeoPoint) -> f64 {
    let (la1, la2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = la2 - la1;
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + la1.cos() * la2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub user_id: String,
    pub lat: f64,
    pub lon: f64,
    pub timestamp: i64,
}

impl TrackPoint {
    pub fn position(&self) -> GeoPoint {
        GeoPoint {
            lat: self.lat,
            lon: self.lon,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadedTracks {
    /// Points grouped per user (sorted by id), each group sorted by time.
    pub users: BTreeMap<String, Vec<TrackPoint>>,
    pub malformed: Vec<MalformedRow>,
}

/// Loads a `user_id,lat,lon,ts` track-point CSV.
pub fn load_track_points(path: &Path, offset: FixedOffset) -> Result<LoadedTracks, IngestError> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &'static str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or(IngestError::MissingColumn(name))
    };
    let (cu, cla, clo, ct) = (col("user_id")?, col("lat")?, col("lon")?, col("ts")?);
    let mut loaded = LoadedTracks::default();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let parsed = rec.map_err(|e| e.to_string()).and_then(|rec| {
            let get = |c: usize| rec.get(c).unwrap_or("").trim().to_string();
            let user = get(cu);
            if user.is_empty() {
                return Err("empty user_id".to_string());
            }
            let lat: f64 = get(cla).parse().map_err(|_| format!("bad lat {:?}", get(cla)))?;
            let lon: f64 = get(clo).parse().map_err(|_| format!("bad lon {:?}", get(clo)))?;
            if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
                return Err(format!("coordinates out of range ({lat}, {lon})"));
            }
            let ts = parse_timestamp(&get(ct), offset).ok_or_else(|| format!("bad ts {:?}", get(ct)))?;
            Ok(TrackPoint {
                user_id: user,
                lat,
                lon,
                timestamp: ts,
            })
        });
        match parsed {
            Ok(p) => loaded.users.entry(p.user_id.clone()).or_default().push(p),
            Err(reason) => loaded.malformed.push(MalformedRow { row, reason }),
        }
    }
    if loaded.users.is_empty() {
        return Err(IngestError::EmptyDataset);
    }
    for points in loaded.users.values_mut() {
        points.sort_by_key(|p| p.timestamp);
    }
    Ok(loaded)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectedStay {
    pub centroid: GeoPoint,
    pub start: i64,
    pub duration_min: u32,
}

/// Anchor-based stay-point detection over one user's time-sorted points.
///
/// From each anchor the run is extended while points stay within
/// `stay_radius_m` of the anchor; runs lasting at least
/// `stay_min_duration_min` become a stay at the run centroid and scanning
/// resumes after the run, otherwise the anchor advances by one point.
pub fn detect_stays(points: &[TrackPoint], cfg: &IngestConfig) -> Vec<DetectedStay> {
    let min_span = cfg.stay_min_duration_min * 60.0;
    let mut stays = Vec::new();
    let mut i = 0;
    while i < points.len() {
        let anchor = points[i].position();
        let mut j = i + 1;
        while j < points.len() && haversine_m(anchor, points[j].position()) <= cfg.stay_radius_m {
            j += 1;
        }
        let span = (points[j - 1].timestamp - points[i].timestamp) as f64;
        if span >= min_span {
            let run = &points[i..j];
            let n = run.len() as f64;
            let centroid = GeoPoint {
                lat: run.iter().map(|p| p.lat).sum::<f64>() / n,
                lon: run.iter().map(|p| p.lon).sum::<f64>() / n,
            };
            stays.push(DetectedStay {
                centroid,
                start: points[i].timestamp,
                duration_min: (span / 60.0).floor() as u32,
            });
            i = j;
        } else {
            i += 1;
        }
    }
    stays
}

/// Greedy leader clustering: each centroid joins the first place whose
/// founding point lies within `radius_m`, otherwise it founds a new place.
#[derive(Debug, Clone, Default)]
pub struct PlaceAssigner {
    radius_m: f64,
    leaders: Vec<GeoPoint>,
}

impl PlaceAssigner {
    pub fn new(radius_m: f64) -> Self {
        Self {
            radius_m,
            leaders: Vec::new(),
        }
    }

    pub fn assign(&mut self, centroid: GeoPoint) -> PlaceId {
        if let Some(idx) = self
            .leaders
            .iter()
            .position(|&leader| haversine_m(leader, centroid) <= self.radius_m)
        {
            return PlaceId(idx as u64);
        }
        self.leaders.push(centroid);
        PlaceId(self.leaders.len() as u64 - 1)
    }

    pub fn place_count(&self) -> usize {
        self.leaders.len()
    }
}

pub fn assign_place_ids(centroids: &[GeoPoint], radius_m: f64) -> Vec<PlaceId> {
    let mut assigner = PlaceAssigner::new(radius_m);
    centroids.iter().map(|&c| assigner.assign(c)).collect()
}

/// Track points to stay sequences: per-user detection, then one
/// deterministic place-assignment pass over users in id order.
pub fn sequences_from_tracks(tracks: &LoadedTracks, cfg: &IngestConfig) -> Result<Vec<UserSequence>, IngestError> {
    let offset = cfg.offset()?;
    let mut assigner = PlaceAssigner::new(cfg.place_cluster_radius_m);
    let mut sequences = Vec::new();
    for (user, points) in &tracks.users {
        let detected = detect_stays(points, cfg);
        if detected.is_empty() {
            continue;
        }
        let rows = detected
            .iter()
            .map(|d| (d.start, d.duration_min, assigner.assign(d.centroid)))
            .collect();
        sequences.push(UserSequence::from_rows(user.clone(), rows, offset));
    }
    if sequences.is_empty() {
        return Err(IngestError::EmptyDataset);
    }
    Ok(sequences)
}

/// Chronological split: the last `ceil(test_fraction * n)` positions are
/// test targets, everything before them is the training prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainTestSplit {
    pub train_len: usize,
    pub test_indices: BTreeSet<usize>,
}

impl TrainTestSplit {
    pub fn train<'a>(&self, seq: &'a UserSequence) -> &'a [crate::mobility::Stay] {
        &seq.stays()[..self.train_len]
    }
}

pub fn test_count(n: usize, test_fraction: f64) -> usize {
    // Tolerance keeps e.g. 0.2 * 100 from rounding up to 21.
    let raw = test_fraction * n as f64;
    ((raw - 1e-9).ceil().max(0.0) as usize).min(n)
}

pub fn split_train_test(
    seq: &UserSequence,
    test_fraction: f64,
    min_stays_per_user: usize,
) -> Result<TrainTestSplit, IngestError> {
    let n = seq.len();
    if n < min_stays_per_user {
        return Err(IngestError::TooFewStays {
            user_id: seq.user_id().to_string(),
            stays: n,
            required: min_stays_per_user,
        });
    }
    let train_len = n - test_count(n, test_fraction);
    Ok(TrainTestSplit {
        train_len,
        test_indices: (train_len..n).collect(),
    })
}

#[derive(Debug, Clone)]
pub struct PreparedUser {
    pub sequence: UserSequence,
    pub split: TrainTestSplit,
}

/// Users that survived filtering, their splits and all test samples in
/// sample-id order.
#[derive(Debug, Clone, Default)]
pub struct PreparedDataset {
    pub users: Vec<PreparedUser>,
    pub dropped_users: Vec<String>,
    pub samples: Vec<PredictionSample>,
    pub skipped_targets: usize,
}

pub fn prepare_dataset(sequences: Vec<UserSequence>, cfg: &IngestConfig, window: WindowConfig) -> PreparedDataset {
    let mut prepared = PreparedDataset::default();
    for seq in sequences {
        match split_train_test(&seq, cfg.test_fraction, cfg.min_stays_per_user) {
            Ok(split) => {
                let batch = build_samples(&seq, window, &split.test_indices);
                prepared.skipped_targets += batch.empty_context.len() + batch.out_of_range.len();
                prepared.samples.extend(batch.samples);
                prepared.users.push(PreparedUser { sequence: seq, split });
            }
            Err(_) => prepared.dropped_users.push(seq.user_id().to_string()),
        }
    }
    prepared.samples.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    prepared
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and sample standard deviation (n - 1 denominator; 0 for n < 2).
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: 0.0, std: 0.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

/// Dataset summary in the layout of the usual benchmark statistics table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub dropped_users: usize,
    pub days_tracked: MeanStd,
    pub stays_per_user: MeanStd,
    pub unique_places_per_user: MeanStd,
    pub test_samples: usize,
}

impl DatasetStats {
    pub fn of(prepared: &PreparedDataset) -> Self {
        let users = &prepared.users;
        let days: Vec<f64> = users
            .iter()
            .map(|u| {
                let seq = &u.sequence;
                let times = seq.absolute_times();
                let first = times.first().copied().unwrap_or(0);
                let last_end = times
                    .iter()
                    .zip(seq.stays())
                    .map(|(&t, s)| t + i64::from(s.duration()) * 60)
                    .max()
                    .unwrap_or(first);
                (last_end - first) as f64 / 86_400.0
            })
            .collect();
        let stays: Vec<f64> = users.iter().map(|u| u.sequence.len() as f64).collect();
        let places: Vec<f64> = users
            .iter()
            .map(|u| {
                u.sequence
                    .stays()
                    .iter()
                    .map(|s| s.place_id())
                    .collect::<HashSet<_>>()
                    .len() as f64
            })
            .collect();
        Self {
            users: users.len(),
            dropped_users: prepared.dropped_users.len(),
            days_tracked: MeanStd::of(&days),
            stays_per_user: MeanStd::of(&stays),
            unique_places_per_user: MeanStd::of(&places),
            test_samples: prepared.samples.len(),
        }
    }

    pub fn render(&self) -> String {
        let ms = |m: MeanStd| format!("{:.2} ± {:.2}", m.mean, m.std);
        let rows = [
            ("# Users", self.users.to_string()),
            ("# Users dropped", self.dropped_users.to_string()),
            ("# Days tracked", ms(self.days_tracked)),
            ("# Stays per user", ms(self.stays_per_user)),
            ("# Unique places per user", ms(self.unique_places_per_user)),
            ("# Test samples", self.test_samples.to_string()),
        ];
        rows.iter().map(|(k, v)| format!("{k:<26}{v}\n")).collect()
    }
}
