//! Open-vocabulary label-set scoring.
//!
//! Labels are normalized (lowercased, trimmed, de-duplicated) and compared by
//! exact match: `accuracy_s` is the overlap over the prediction size (0 for
//! an empty prediction), `recall_s` the overlap over the truth size, and
//! `avg` their arithmetic mean. The formulas are this repo's set-overlap
//! reading of the metric names; the model-assisted synonym grouping of the
//! original evaluation protocol is out of scope, but a static synonym table
//! can canonicalize labels before scoring.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

/// Normalized set of emotion labels.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    labels: BTreeSet<String>,
}

impl LabelSet {
    /// Normalize: lowercase, trim, drop empties, de-duplicate.
    pub fn new<I, S>(labels: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        LabelSet {
            labels: labels
                .into_iter()
                .map(|s| s.as_ref().trim().to_lowercase())
                .filter(|s| !s.is_empty())
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn contains(&self, label: &str) -> bool {
        self.labels.contains(label)
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.labels.iter().map(String::as_str)
    }

    fn intersection_size(&self, other: &LabelSet) -> usize {
        self.labels.intersection(&other.labels).count()
    }
}

/// Optional static synonym table mapping label variants to a canonical form.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SynonymTable {
    pub canonical: BTreeMap<String, String>,
}

impl SynonymTable {
    pub fn canonicalize(&self, set: &LabelSet) -> LabelSet {
        LabelSet::new(set.iter().map(|l| {
            self.canonical
                .get(l)
                .map(String::as_str)
                .unwrap_or(l)
                .to_string()
        }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub accuracy_s: f64,
    pub recall_s: f64,
    pub avg: f64,
}

impl ScoreReport {
    fn new(accuracy_s: f64, recall_s: f64) -> Self {
        ScoreReport {
            accuracy_s,
            recall_s,
            avg: (accuracy_s + recall_s) / 2.0,
        }
    }
}

/// Score one prediction against a non-empty truth set.
pub fn score(pred: &LabelSet, truth: &LabelSet) -> Result<ScoreReport> {
    if truth.is_empty() {
        return Err(Error::Input("truth label set is empty".into()));
    }
    let overlap = pred.intersection_size(truth) as f64;
    let accuracy_s = if pred.is_empty() {
        0.0
    } else {
        overlap / pred.len() as f64
    };
    let recall_s = overlap / truth.len() as f64;
    Ok(ScoreReport::new(accuracy_s, recall_s))
}

/// Unweighted mean of per-pair reports.
pub fn score_corpus(pairs: &[(LabelSet, LabelSet)]) -> Result<ScoreReport> {
    if pairs.is_empty() {
        return Err(Error::Input("empty corpus".into()));
    }
    let mut acc = 0.0;
    let mut rec = 0.0;
    for (pred, truth) in pairs {
        let r = score(pred, truth)?;
        acc += r.accuracy_s;
        rec += r.recall_s;
    }
    let n = pairs.len() as f64;
    Ok(ScoreReport::new(acc / n, rec / n))
}
