//! Run supervision as a pure function of the event stream.

use serde::{Deserialize, Serialize};

use super::RunStatus;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RunEvent {
    /// A progress line: loss at `step`, observed `elapsed` seconds into the run.
    Step { step: u64, loss: f64, elapsed: f64 },
    /// Clock reading with no new progress.
    Tick { elapsed: f64 },
}

impl RunEvent {
    pub fn elapsed(&self) -> f64 {
        match *self {
            RunEvent::Step { elapsed, .. } | RunEvent::Tick { elapsed } => elapsed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Kill {
    pub status: RunStatus,
    pub reason: String,
    pub elapsed: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    Continue,
    Kill(Kill),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MonitorConfig {
    /// Kill once elapsed time exceeds this many seconds.
    pub time_limit: Option<f64>,
    /// Reference curve for the anomaly check, ascending steps.
    pub baseline_curve: Vec<(u64, f64)>,
    /// Kill when loss is more than this fraction below the reference.
    pub anomaly_threshold: f64,
}

/// Median of `history` scaled by `factor`; `None` without history.
pub fn time_limit(history: &[f64], factor: f64) -> Option<f64> {
    if history.is_empty() {
        return None;
    }
    let mut v = history.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    let median = if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    };
    Some(median * factor)
}

fn reference_at(curve: &[(u64, f64)], step: u64) -> Option<f64> {
    let idx = curve.partition_point(|&(s, _)| s <= step);
    idx.checked_sub(1).map(|i| curve[i].1)
}

/// Stateful wrapper that latches the first kill.
#[derive(Debug, Clone)]
pub struct Monitor {
    config: MonitorConfig,
    kill: Option<Kill>,
    steps: Vec<(u64, f64)>,
}

impl Monitor {
    pub fn new(config: MonitorConfig) -> Self {
        Self {
            config,
            kill: None,
            steps: Vec::new(),
        }
    }

    /// A monitor that never kills.
    pub fn passive() -> Self {
        Self::new(MonitorConfig {
            anomaly_threshold: f64::INFINITY,
            ..MonitorConfig::default()
        })
    }

    pub fn config(&self) -> &MonitorConfig {
        &self.config
    }

    pub fn observe(&mut self, event: &RunEvent) -> Verdict {
        if let Some(k) = &self.kill {
            return Verdict::Kill(k.clone());
        }
        if let RunEvent::Step { step, loss, .. } = *event {
            self.steps.push((step, loss));
        }
        match decide(&self.config, event) {
            Some(k) => {
                self.kill = Some(k.clone());
                Verdict::Kill(k)
            }
            None => Verdict::Continue,
        }
    }

    pub fn kill(&self) -> Option<&Kill> {
        self.kill.as_ref()
    }

    /// Every progress point observed so far.
    pub fn steps(&self) -> &[(u64, f64)] {
        &self.steps
    }
}

fn decide(config: &MonitorConfig, event: &RunEvent) -> Option<Kill> {
    let elapsed = event.elapsed();
    if let Some(limit) = config.time_limit {
        if elapsed > limit {
            return Some(Kill {
                status: RunStatus::KilledTimeout,
                reason: format!("elapsed {elapsed:.1}s exceeds limit {limit:.1}s"),
                elapsed,
            });
        }
    }
    if let RunEvent::Step { step, loss, .. } = *event {
        if let Some(reference) = reference_at(&config.baseline_curve, step) {
            let drop = (reference - loss) / reference;
            if drop > config.anomaly_threshold {
                return Some(Kill {
                    status: RunStatus::KilledAnomaly,
                    reason: format!(
                        "loss {loss} at step {step} is {:.1}% below reference {reference}",
                        drop * 100.0
                    ),
                    elapsed,
                });
            }
        }
    }
    None
}

/// Replay a whole event stream; the first kill, if any.
pub fn replay(config: &MonitorConfig, events: &[RunEvent]) -> Option<Kill> {
    events.iter().find_map(|e| decide(config, e))
}
