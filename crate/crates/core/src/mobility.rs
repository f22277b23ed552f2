//! Stays, user sequences and the history/context/target windowing used to
//! build prediction samples.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Datelike, FixedOffset, Timelike};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MINUTES_PER_DAY: u16 = 1440;

/// Dataset-global place identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PlaceId(pub u64);

impl fmt::Display for PlaceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum DayOfWeek {
    Monday,
    Tuesday,
    Wednesday,
    Thursday,
    Friday,
    Saturday,
    Sunday,
}

impl DayOfWeek {
    pub const ALL: [DayOfWeek; 7] = [
        DayOfWeek::Monday,
        DayOfWeek::Tuesday,
        DayOfWeek::Wednesday,
        DayOfWeek::Thursday,
        DayOfWeek::Friday,
        DayOfWeek::Saturday,
        DayOfWeek::Sunday,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DayOfWeek::Monday => "Monday",
            DayOfWeek::Tuesday => "Tuesday",
            DayOfWeek::Wednesday => "Wednesday",
            DayOfWeek::Thursday => "Thursday",
            DayOfWeek::Friday => "Friday",
            DayOfWeek::Saturday => "Saturday",
            DayOfWeek::Sunday => "Sunday",
        }
    }

    /// 0 for Monday through 6 for Sunday.
    pub fn index(self) -> usize {
        self as usize
    }
}

impl From<chrono::Weekday> for DayOfWeek {
    fn from(day: chrono::Weekday) -> Self {
        DayOfWeek::ALL[day.num_days_from_monday() as usize]
    }
}

impl fmt::Display for DayOfWeek {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DayOfWeek {
    type Err = MobilityError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DayOfWeek::ALL
            .iter()
            .copied()
            .find(|d| d.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| MobilityError::InvalidDay(s.to_string()))
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MobilityError {
    #[error("start time {0} is outside 0..=1439 minutes")]
    StartTimeOutOfRange(u16),
    #[error("unknown day of week {0:?}")]
    InvalidDay(String),
    #[error("invalid clock time {0:?}")]
    InvalidClock(String),
    #[error("stays and absolute times differ in length ({stays} vs {times})")]
    LengthMismatch { stays: usize, times: usize },
    #[error("stay {index} is earlier than its predecessor")]
    OutOfOrder { index: usize },
    #[error("window lengths must be positive (history {history}, context {context})")]
    InvalidWindow { history: usize, context: usize },
}

/// Renders minutes-since-midnight as `HH:MM`.
pub fn format_clock(minutes: u16) -> String {
    format!("{:02}:{:02}", minutes / 60, minutes % 60)
}

pub fn parse_clock(s: &str) -> Result<u16, MobilityError> {
    let bad = || MobilityError::InvalidClock(s.to_string());
    let (h, m) = s.trim().split_once(':').ok_or_else(bad)?;
    let h: u16 = h.parse().map_err(|_| bad())?;
    let m: u16 = m.parse().map_err(|_| bad())?;
    if h > 23 || m > 59 {
        return Err(bad());
    }
    Ok(h * 60 + m)
}

/// One stationary episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Stay {
    start_time: u16,
    day_of_week: DayOfWeek,
    duration: u32,
    place_id: PlaceId,
}

impl Stay {
    pub fn new(
        start_time: u16,
        day_of_week: DayOfWeek,
        duration: u32,
        place_id: PlaceId,
    ) -> Result<Self, MobilityError> {
        if start_time >= MINUTES_PER_DAY {
            return Err(MobilityError::StartTimeOutOfRange(start_time));
        }
        Ok(Self {
            start_time,
            day_of_week,
            duration,
            place_id,
        })
    }

    /// Derives start time and weekday from an absolute instant seen in `offset`.
    pub fn at(epoch_seconds: i64, offset: FixedOffset, duration: u32, place_id: PlaceId) -> Self {
        let local = local_time(epoch_seconds, offset);
        Self {
            start_time: (local.hour() * 60 + local.minute()) as u16,
            day_of_week: local.weekday().into(),
            duration,
            place_id,
        }
    }

    pub fn start_time(&self) -> u16 {
        self.start_time
    }

    pub fn day_of_week(&self) -> DayOfWeek {
        self.day_of_week
    }

    pub fn duration(&self) -> u32 {
        self.duration
    }

    pub fn place_id(&self) -> PlaceId {
        self.place_id
    }

    pub fn slot(&self) -> TargetSlot {
        TargetSlot {
            start_time: self.start_time,
            day_of_week: self.day_of_week,
        }
    }
}

pub(crate) fn local_time(epoch_seconds: i64, offset: FixedOffset) -> DateTime<FixedOffset> {
    DateTime::from_timestamp(epoch_seconds, 0)
        .unwrap_or_default()
        .with_timezone(&offset)
}

/// The (start time, weekday) of the stay being predicted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TargetSlot {
    start_time: u16,
    day_of_week: DayOfWeek,
}

impl TargetSlot {
    pub fn new(start_time: u16, day_of_week: DayOfWeek) -> Result<Self, MobilityError> {
        if start_time >= MINUTES_PER_DAY {
            return Err(MobilityError::StartTimeOutOfRange(start_time));
        }
        Ok(Self {
            start_time,
            day_of_week,
        })
    }

    pub fn start_time(&self) -> u16 {
        self.start_time
    }

    pub fn day_of_week(&self) -> DayOfWeek {
        self.day_of_week
    }
}

/// All stays of one user in time order, with the absolute instants they were
/// derived from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSequence {
    user_id: String,
    stays: Vec<Stay>,
    absolute_times: Vec<i64>,
}

impl UserSequence {
    pub fn new(
        user_id: impl Into<String>,
        stays: Vec<Stay>,
        absolute_times: Vec<i64>,
    ) -> Result<Self, MobilityError> {
        if stays.len() != absolute_times.len() {
            return Err(MobilityError::LengthMismatch {
                stays: stays.len(),
                times: absolute_times.len(),
            });
        }
        if let Some(i) = absolute_times.windows(2).position(|w| w[1] < w[0]) {
            return Err(MobilityError::OutOfOrder { index: i + 1 });
        }
        Ok(Self {
            user_id: user_id.into(),
            stays,
            absolute_times,
        })
    }

    /// Builds a sequence from `(epoch seconds, duration, place)` rows, sorting
    /// them by time (stable) and deriving local clock fields in `offset`.
    pub fn from_rows(
        user_id: impl Into<String>,
        mut rows: Vec<(i64, u32, PlaceId)>,
        offset: FixedOffset,
    ) -> Self {
        rows.sort_by_key(|r| r.0);
        let stays = rows
            .iter()
            .map(|&(ts, dur, pid)| Stay::at(ts, offset, dur, pid))
            .collect();
        Self {
            user_id: user_id.into(),
            stays,
            absolute_times: rows.into_iter().map(|r| r.0).collect(),
        }
    }

    /// A sequence without real timestamps; positions stand in for time.
    pub fn from_stays(user_id: impl Into<String>, stays: Vec<Stay>) -> Self {
        let absolute_times = (0..stays.len() as i64).collect();
        Self {
            user_id: user_id.into(),
            stays,
            absolute_times,
        }
    }

    pub fn user_id(&self) -> &str {
        &self.user_id
    }

    pub fn stays(&self) -> &[Stay] {
        &self.stays
    }

    pub fn absolute_times(&self) -> &[i64] {
        &self.absolute_times
    }

    pub fn len(&self) -> usize {
        self.stays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stays.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowConfig {
    pub history_len: usize,
    pub context_len: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            history_len: 40,
            context_len: 5,
        }
    }
}

impl WindowConfig {
    pub fn new(history_len: usize, context_len: usize) -> Result<Self, MobilityError> {
        let cfg = Self {
            history_len,
            context_len,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), MobilityError> {
        if self.history_len == 0 || self.context_len == 0 {
            return Err(MobilityError::InvalidWindow {
                history: self.history_len,
                context: self.context_len,
            });
        }
        Ok(())
    }

    /// Total lookback.
    pub fn lookback(&self) -> usize {
        self.history_len + self.context_len
    }
}

/// One test instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSample {
    pub sample_id: String,
    pub user_id: String,
    pub target_index: usize,
    pub history: Vec<Stay>,
    pub context: Vec<Stay>,
    pub target: TargetSlot,
    pub ground_truth: PlaceId,
}

pub fn sample_id(user_id: &str, target_index: usize) -> String {
    format!("{user_id}#{target_index:06}")
}

/// Samples built for one user plus the targets that could not be used.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleBatch {
    pub samples: Vec<PredictionSample>,
    /// Target indices skipped because no stay precedes them.
    pub empty_context: Vec<usize>,
    /// Target indices past the end of the sequence.
    pub out_of_range: Vec<usize>,
}

/// Cuts history/context windows in front of every requested target index.
///
/// For target `t` the context is `stays[t-N..t]` and the history the `M`
/// stays before that, both truncated at the start of the sequence.
pub fn build_samples(
    seq: &UserSequence,
    cfg: WindowConfig,
    test_indices: &BTreeSet<usize>,
) -> SampleBatch {
    let mut batch = SampleBatch::default();
    for &t in test_indices {
        if t >= seq.len() {
            batch.out_of_range.push(t);
            continue;
        }
        if t == 0 {
            batch.empty_context.push(t);
            continue;
        }
        let context_start = t.saturating_sub(cfg.context_len);
        let history_start = context_start.saturating_sub(cfg.history_len);
        let target = seq.stays[t];
        batch.samples.push(PredictionSample {
            sample_id: sample_id(&seq.user_id, t),
            user_id: seq.user_id.clone(),
            target_index: t,
            history: seq.stays[history_start..context_start].to_vec(),
            context: seq.stays[context_start..t].to_vec(),
            target: target.slot(),
            ground_truth: target.place_id,
        });
    }
    batch
}
