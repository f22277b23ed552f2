//! Reference predictors: first-order mobility Markov chain and top frequency.

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mobility::{PlaceId, Stay};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {detail}")]
    Corrupt { line: usize, detail: String },
}

/// Successor counts per origin place plus visit counts, for one user.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkovModel {
    successors: BTreeMap<PlaceId, BTreeMap<PlaceId, u64>>,
    frequency: BTreeMap<PlaceId, u64>,
}

impl MarkovModel {
    /// Counts transitions between consecutive stays of a time-ordered prefix.
    pub fn fit(train: &[Stay]) -> Self {
        let mut model = Self::default();
        for stay in train {
            *model.frequency.entry(stay.place_id()).or_default() += 1;
        }
        for pair in train.windows(2) {
            *model
                .successors
                .entry(pair[0].place_id())
                .or_default()
                .entry(pair[1].place_id())
                .or_default() += 1;
        }
        model
    }

    pub fn is_empty(&self) -> bool {
        self.frequency.is_empty()
    }

    pub fn frequency(&self, place: PlaceId) -> u64 {
        self.frequency.get(&place).copied().unwrap_or(0)
    }

    /// Successors of `origin` with probabilities, ordered by probability,
    /// then visit count (descending), then ascending id.
    pub fn candidates(&self, origin: PlaceId) -> Vec<(PlaceId, f64)> {
        let Some(counts) = self.successors.get(&origin) else {
            return Vec::new();
        };
        let total: u64 = counts.values().sum();
        let mut ranked: Vec<(PlaceId, u64)> = counts.iter().map(|(&p, &c)| (p, c)).collect();
        ranked.sort_by(|a, b| {
            b.1.cmp(&a.1)
                .then(self.frequency(b.0).cmp(&self.frequency(a.0)))
                .then(a.0.cmp(&b.0))
        });
        ranked
            .into_iter()
            .map(|(p, c)| (p, c as f64 / total as f64))
            .collect()
    }

    /// All visited places by visit count, ties by ascending id.
    pub fn by_frequency(&self) -> Vec<PlaceId> {
        let mut ranked: Vec<(PlaceId, u64)> = self.frequency.iter().map(|(&p, &c)| (p, c)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.into_iter().map(|(p, _)| p).collect()
    }

    /// Up to `k` successors of `current`, topped up from the frequency
    /// ranking without repeats.
    pub fn predict(&self, current: PlaceId, k: usize) -> Vec<PlaceId> {
        let mut out: Vec<PlaceId> = self.candidates(current).into_iter().map(|(p, _)| p).take(k).collect();
        let mut seen: HashSet<PlaceId> = out.iter().copied().collect();
        for p in self.by_frequency() {
            if out.len() >= k {
                break;
            }
            if seen.insert(p) {
                out.push(p);
            }
        }
        out
    }

    pub fn predict_topfreq(&self, k: usize) -> Vec<PlaceId> {
        self.by_frequency().into_iter().take(k).collect()
    }
}

pub fn fit_1mmc(train: &[Stay]) -> MarkovModel {
    MarkovModel::fit(train)
}

pub fn predict_1mmc(model: &MarkovModel, current_place: PlaceId, k: usize) -> Vec<PlaceId> {
    model.predict(current_place, k)
}

pub fn predict_topfreq(model: &MarkovModel, k: usize) -> Vec<PlaceId> {
    model.predict_topfreq(k)
}

#[derive(Serialize, Deserialize)]
struct ModelLine {
    user_id: String,
    /// `[origin, successor, count]`
    transitions: Vec<(u64, u64, u64)>,
    /// `[place, visits]`
    frequency: Vec<(u64, u64)>,
}

/// Per-user models, fitted on each user's training prefix.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TransitionModel {
    pub users: BTreeMap<String, MarkovModel>,
}

impl TransitionModel {
    pub fn insert(&mut self, user_id: impl Into<String>, model: MarkovModel) {
        self.users.insert(user_id.into(), model);
    }

    pub fn get(&self, user_id: &str) -> Option<&MarkovModel> {
        self.users.get(user_id)
    }

    /// One JSON object per user.
    pub fn dump_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        for (user_id, m) in &self.users {
            let line = ModelLine {
                user_id: user_id.clone(),
                transitions: m
                    .successors
                    .iter()
                    .flat_map(|(o, succ)| succ.iter().map(move |(s, c)| (o.0, s.0, *c)))
                    .collect(),
                frequency: m.frequency.iter().map(|(p, c)| (p.0, *c)).collect(),
            };
            writeln!(out, "{}", serde_json::to_string(&line).expect("model line serializes"))?;
        }
        Ok(())
    }

    pub fn load_jsonl(input: impl BufRead) -> Result<Self, BaselineError> {
        let mut model = Self::default();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: ModelLine = serde_json::from_str(&line).map_err(|e| BaselineError::Corrupt {
                line: i + 1,
                detail: e.to_string(),
            })?;
            let mut m = MarkovModel::default();
            for (o, s, c) in parsed.transitions {
                m.successors.entry(PlaceId(o)).or_default().insert(PlaceId(s), c);
            }
            m.frequency = parsed.frequency.into_iter().map(|(p, c)| (PlaceId(p), c)).collect();
            model.users.insert(parsed.user_id, m);
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mobility::DayOfWeek;
    use proptest::prelude::*;

    fn stays(places: &[u64]) -> Vec<Stay> {
        places
            .iter()
            .map(|&p| Stay::new(0, DayOfWeek::Monday, 10, PlaceId(p)).unwrap())
            .collect()
    }

    fn ids(v: &[PlaceId]) -> Vec<u64> {
        v.iter().map(|p| p.0).collect()
    }

    #[test]
    fn alternation() {
        let m = fit_1mmc(&stays(&[1, 2, 1, 2, 1]));
        assert_eq!(m.candidates(PlaceId(1)), vec![(PlaceId(2), 1.0)]);
        assert_eq!(m.candidates(PlaceId(2)), vec![(PlaceId(1), 1.0)]);
        assert_eq!(ids(&predict_1mmc(&m, PlaceId(1), 1)), vec![2]);
    }

    #[test]
    fn split_successors_and_tie_break() {
        let m = fit_1mmc(&stays(&[1, 2, 1, 3]));
        assert_eq!(m.candidates(PlaceId(1)), vec![(PlaceId(2), 0.5), (PlaceId(3), 0.5)]);
        assert_eq!(m.candidates(PlaceId(2)), vec![(PlaceId(1), 1.0)]);
        assert_eq!(ids(&predict_1mmc(&m, PlaceId(1), 2)), vec![2, 3]);
        // Top-up from frequency: 1 is the most visited place.
        assert_eq!(ids(&predict_1mmc(&m, PlaceId(1), 5)), vec![2, 3, 1]);
    }

    #[test]
    fn frequency_breaks_probability_ties() {
        // From 1: 1->5 once, 1->4 once; place 5 is visited more overall.
        let m = fit_1mmc(&stays(&[5, 5, 1, 5, 1, 4]));
        assert_eq!(ids(&predict_1mmc(&m, PlaceId(1), 2)), vec![5, 4]);
    }

    #[test]
    fn single_stay_and_empty_training() {
        let m = fit_1mmc(&stays(&[3]));
        assert!(m.candidates(PlaceId(3)).is_empty());
        assert_eq!(m.frequency(PlaceId(3)), 1);
        assert_eq!(ids(&predict_1mmc(&m, PlaceId(3), 3)), vec![3]);
        let empty = fit_1mmc(&[]);
        assert!(empty.is_empty());
        assert!(predict_1mmc(&empty, PlaceId(0), 10).is_empty());
    }

    #[test]
    fn unknown_origin_falls_back() {
        let m = fit_1mmc(&stays(&[5, 5, 7, 5]));
        assert_eq!(ids(&predict_1mmc(&m, PlaceId(99), 2)), vec![5, 7]);
    }

    #[test]
    fn topfreq_examples() {
        let m = fit_1mmc(&stays(&[4, 4, 4, 4, 4, 2, 2, 2, 2, 2, 9]));
        assert_eq!(ids(&predict_topfreq(&m, 2)), vec![2, 4]);
        assert_eq!(ids(&predict_topfreq(&m, 10)), vec![2, 4, 9]);
        assert!(predict_topfreq(&fit_1mmc(&[]), 3).is_empty());
    }

    #[test]
    fn jsonl_dump_restores() {
        let mut model = TransitionModel::default();
        model.insert("a", fit_1mmc(&stays(&[1, 2, 1, 3])));
        model.insert("b", fit_1mmc(&stays(&[7])));
        let mut buf = Vec::new();
        model.dump_jsonl(&mut buf).unwrap();
        assert_eq!(String::from_utf8_lossy(&buf).lines().count(), 2);
        assert_eq!(TransitionModel::load_jsonl(&buf[..]).unwrap(), model);
        assert!(TransitionModel::load_jsonl(&b"{bad"[..]).is_err());
    }

    proptest! {
        #[test]
        fn rows_are_distributions(places in proptest::collection::vec(0u64..6, 0..80), k in 1usize..8) {
            let m = fit_1mmc(&stays(&places));
            for origin in 0..6 {
                let row = m.candidates(PlaceId(origin));
                if !row.is_empty() {
                    let total: f64 = row.iter().map(|(_, p)| p).sum();
                    prop_assert!((total - 1.0).abs() < 1e-9);
                    prop_assert!(row.windows(2).all(|w| w[0].1 >= w[1].1));
                }
                let pred = predict_1mmc(&m, PlaceId(origin), k);
                let distinct: HashSet<_> = pred.iter().collect();
                prop_assert_eq!(distinct.len(), pred.len());
                prop_assert!(pred.len() <= k);
                prop_assert_eq!(pred.clone(), predict_1mmc(&m, PlaceId(origin), k));
            }
        }
    }
}
