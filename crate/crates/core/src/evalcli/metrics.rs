//! Confusion counts and the rates derived from them. Success (`y = 1`) is
//! the positive class.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn n(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn add(&mut self, pred: u8, label: u8) {
        match (pred, label) {
            (1, 1) => self.tp += 1,
            (1, _) => self.fp += 1,
            (_, 1) => self.fn_ += 1,
            _ => self.tn += 1,
        }
    }
}

pub fn confusion(preds: &[u8], labels: &[u8]) -> Result<ConfusionCounts> {
    if preds.len() != labels.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &y) in preds.iter().zip(labels) {
        if p > 1 || y > 1 {
            return Err(Error::Config("predictions and labels must be 0 or 1".into()));
        }
        c.add(p, y);
    }
    Ok(c)
}

/// A rate that is either defined or null with the reason it is not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl Rate {
    fn of(value: f64) -> Self {
        Rate {
            value: Some(value),
            reason: None,
        }
    }

    fn null(reason: &str) -> Self {
        Rate {
            value: None,
            reason: Some(reason.to_string()),
        }
    }

    fn ratio(num: u64, den: u64, reason: &str) -> Self {
        if den == 0 {
            Rate::null(reason)
        } else {
            Rate::of(num as f64 / den as f64)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: Rate,
    pub precision: Rate,
    pub recall: Rate,
    pub f1: Rate,
    pub detection_rate: Rate,
}

/// `2PR / (P + R)`.
pub fn f1_from(precision: f64, recall: f64) -> Option<f64> {
    let s = precision + recall;
    (s > 0.0).then(|| 2.0 * precision * recall / s)
}

/// All rates of a confusion table. On an all-negative set only the
/// detection rate (accuracy on failures) is reported.
pub fn metrics(c: &ConfusionCounts) -> Metrics {
    let n = c.n();
    if n == 0 {
        let r = Rate::null("empty set");
        return Metrics {
            accuracy: r.clone(),
            precision: r.clone(),
            recall: r.clone(),
            f1: r.clone(),
            detection_rate: r,
        };
    }
    if c.positives() == 0 {
        let r = Rate::null("all-negative set: see detection_rate");
        return Metrics {
            accuracy: r.clone(),
            precision: r.clone(),
            recall: r.clone(),
            f1: r,
            detection_rate: Rate::of(c.tn as f64 / n as f64),
        };
    }
    let precision = Rate::ratio(c.tp, c.tp + c.fp, "no predicted positives");
    let recall = Rate::ratio(c.tp, c.tp + c.fn_, "no actual positives");
    // 2PR/(P+R) reduces to 2TP/(2TP+FP+FN), a single rounding.
    let f1 = match (precision.value, recall.value) {
        (Some(p), Some(r)) if p + r > 0.0 => Rate::of((2 * c.tp) as f64 / (2 * c.tp + c.fp + c.fn_) as f64),
        (Some(_), Some(_)) => Rate::null("precision and recall are both zero"),
        _ => Rate::null("precision or recall undefined"),
    };
    Metrics {
        accuracy: Rate::of((c.tp + c.tn) as f64 / n as f64),
        precision,
        recall,
        f1,
        detection_rate: Rate::null("set contains positives"),
    }
}
