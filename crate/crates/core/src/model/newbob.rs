//! Plateau-halving learning-rate schedule.

use serde::{Deserialize, Serialize};

/// Schedule parameters; defaults halve on < 0.5% relative improvement.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NewbobParams {
    pub threshold: f64,
    pub factor: f64,
}

impl Default for NewbobParams {
    fn default() -> Self {
        NewbobParams {
            threshold: 0.005,
            factor: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NewbobDecision {
    pub lr: f64,
    pub stop: bool,
}

/// Replays the schedule over a validation-loss history.
///
/// Each step with relative improvement `(prev - cur) / |prev|` below the
/// threshold multiplies the rate by `factor`. The first such step starts the
/// halving phase; two consecutive low-improvement steps after that stop training.
pub fn newbob_schedule(history: &[f64], lr: f64) -> NewbobDecision {
    newbob_with(history, lr, NewbobParams::default())
}

pub fn newbob_with(history: &[f64], lr: f64, params: NewbobParams) -> NewbobDecision {
    let mut state = Newbob::new(lr, params);
    let mut decision = NewbobDecision { lr, stop: false };
    for pair in history.windows(2) {
        decision = state.step(pair[0], pair[1]);
    }
    decision
}

/// Incremental form of [`newbob_schedule`].
#[derive(Clone, Debug)]
pub struct Newbob {
    params: NewbobParams,
    lr: f64,
    halving: bool,
    low_streak: usize,
}

impl Newbob {
    pub fn new(lr: f64, params: NewbobParams) -> Self {
        Newbob {
            params,
            lr,
            halving: false,
            low_streak: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn step(&mut self, prev: f64, cur: f64) -> NewbobDecision {
        let improvement = if prev == 0.0 { 0.0 } else { (prev - cur) / prev.abs() };
        let low = !(improvement >= self.params.threshold);
        let mut stop = false;
        if low {
            self.lr *= self.params.factor;
            if self.halving {
                self.low_streak += 1;
                stop = self.low_streak >= 2;
            } else {
                self.halving = true;
            }
        } else {
            self.low_streak = 0;
        }
        NewbobDecision { lr: self.lr, stop }
    }
}
