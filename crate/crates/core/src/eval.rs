//! Online accuracy: predictions are counted as they are emitted, batch by
//! batch, never recomputed after the stream ends.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OnlineAccuracy {
    pub correct: u64,
    pub total: u64,
    /// `(step, running accuracy)` after each recorded batch.
    pub trace: Vec<(usize, f64)>,
}

impl OnlineAccuracy {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, predictions: &[usize], labels: &[usize]) -> Result<()> {
        if predictions.len() != labels.len() {
            return invalid(format!(
                "{} predictions for {} labels",
                predictions.len(),
                labels.len()
            ));
        }
        self.correct += predictions.iter().zip(labels).filter(|(p, l)| p == l).count() as u64;
        self.total += labels.len() as u64;
        let step = self.trace.len();
        self.trace.push((step, self.accuracy()));
        Ok(())
    }

    /// `correct / total`, or 0 before anything was recorded.
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// One line of a JSON Lines trace file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub run: u64,
    pub step: usize,
    pub seen: u64,
    pub correct: u64,
    pub acc: f64,
    pub selected: usize,
    pub loss: f64,
}

pub fn write_trace<W: Write>(mut w: W, records: &[TraceRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trace<R: BufRead>(r: R) -> Result<Vec<TraceRecord>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Final accuracies of repeated runs, summarized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunAggregate {
    pub runs: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
}

pub fn aggregate(runs: &[f64]) -> Result<RunAggregate> {
    if runs.is_empty() {
        return invalid("cannot aggregate zero runs");
    }
    let n = runs.len() as f64;
    let mean = runs.iter().sum::<f64>() / n;
    let std = if runs.len() < 2 {
        0.0
    } else {
        (runs.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    // Rounding can push the mean of identical values a hair outside the range.
    let lo = runs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = runs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(RunAggregate {
        runs: runs.to_vec(),
        mean: mean.clamp(lo, hi),
        std,
    })
}
