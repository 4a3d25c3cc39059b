use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::stats::mean_std;

use super::{DetectorId, DetectorVote};

const DEGENERATE_STD: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ZScoreParams {
    pub window: usize,
    pub k: f64,
}

impl Default for ZScoreParams {
    fn default() -> Self {
        ZScoreParams { window: 60, k: 3.0 }
    }
}

/// Scores `new_value` against a full trailing window.
pub fn detect_zscore(series: &[f64], new_value: f64, k: f64) -> DetectorVote {
    let (mean, std) = mean_std(series).unwrap_or((new_value, 0.0));
    let dev = (new_value - mean).abs();
    let (anomalous, score) = if std < DEGENERATE_STD {
        let hit = dev > DEGENERATE_STD;
        (hit, if hit { dev / DEGENERATE_STD } else { 0.0 })
    } else {
        let z = dev / std;
        (z > k, z)
    };
    DetectorVote { detector_id: DetectorId::Zscore, anomalous, score }
}

/// Rolling z-score over the last `window` values of one stream.
#[derive(Debug, Clone)]
pub struct ZScoreDetector {
    params: ZScoreParams,
    history: VecDeque<f64>,
}

impl ZScoreDetector {
    pub fn new(params: ZScoreParams) -> Self {
        ZScoreDetector { params, history: VecDeque::with_capacity(params.window + 1) }
    }

    /// Votes on `value`, then adds it to the history. `None` while warming up.
    pub fn observe(&mut self, value: f64) -> Option<DetectorVote> {
        let vote = (self.history.len() == self.params.window).then(|| detect_zscore(self.history.make_contiguous(), value, self.params.k));
        self.history.push_back(value);
        if self.history.len() > self.params.window {
            self.history.pop_front();
        }
        vote
    }
}
