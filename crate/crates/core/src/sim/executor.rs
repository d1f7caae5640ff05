use std::collections::{BTreeMap, VecDeque};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{quality, MARK_BUG, MARK_LEAK, MARK_SLOW};
use crate::engineer::{ExecutorReport, Executor, Monitor, RunEvent, RunJob, RunStatus, Verdict};
use crate::reference;
use crate::store::{MetricsReport, Stage};

/// Synthetic trainer driven by the candidate code.
///
/// Runs stream every curve point except the last one to the monitor; the
/// final loss only appears in the returned metrics.
#[derive(Debug, Clone)]
pub struct SimulatedExecutor {
    baseline: MetricsReport,
    /// Seconds a baseline-speed run takes in each stage.
    exploration_seconds: f64,
    verification_seconds: f64,
}

impl Default for SimulatedExecutor {
    fn default() -> Self {
        Self::new(reference::delta_net())
    }
}

impl SimulatedExecutor {
    pub fn new(baseline: MetricsReport) -> Self {
        Self {
            baseline,
            exploration_seconds: 36_000.0,
            verification_seconds: 180_000.0,
        }
    }

    pub fn with_durations(mut self, exploration: f64, verification: f64) -> Self {
        self.exploration_seconds = exploration;
        self.verification_seconds = verification;
        self
    }

    fn rng(job: &RunJob<'_>) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(job.stage.stage.to_string().as_bytes());
        h.update([0]);
        h.update(job.code.as_bytes());
        h.update([0]);
        h.update(job.motivation.as_bytes());
        ChaCha8Rng::from_seed(h.finalize().into())
    }

    fn scores(&self, rng: &mut ChaCha8Rng, q: f64, noisy: bool, task_set: &[String]) -> BTreeMap<String, f64> {
        let shared = if noisy { rng.gen_range(-0.012..0.012) } else { 0.0 };
        task_set
            .iter()
            .map(|t| {
                let base = self.baseline.benchmark_scores.get(t).copied().unwrap_or(0.25);
                let own = if noisy { rng.gen_range(-0.02..0.02) } else { 0.0 };
                let v = base * (1.0 + 0.9 * q + shared + own);
                (t.clone(), v.clamp(0.0, 1.0))
            })
            .collect()
    }
}

/// Feed `points` and clock ticks to the monitor, with elapsed time
/// proportional to the step and `wall` reached at `final_step`.
fn stream(monitor: &mut Monitor, points: &[(u64, f64)], final_step: u64, wall: f64) -> Result<(), ExecutorReport> {
    let last = final_step.max(1) as f64;
    for &(step, loss) in points {
        let elapsed = wall * step as f64 / last;
        for ev in [RunEvent::Tick { elapsed }, RunEvent::Step { step, loss, elapsed }] {
            if let Verdict::Kill(k) = monitor.observe(&ev) {
                return Err(ExecutorReport::from_kill(&k, "", monitor.steps().to_vec()));
            }
        }
    }
    if let Verdict::Kill(k) = monitor.observe(&RunEvent::Tick { elapsed: wall }) {
        return Err(ExecutorReport::from_kill(&k, "", monitor.steps().to_vec()));
    }
    Ok(())
}

impl Executor for SimulatedExecutor {
    fn run(&self, job: &RunJob<'_>, monitor: &mut Monitor) -> ExecutorReport {
        let mut rng = Self::rng(job);
        let q = quality(job.code);
        let noisy = job.code.contains("# mutation ");
        let base_wall = match job.stage.stage {
            Stage::Exploration => self.exploration_seconds,
            Stage::Verification => self.verification_seconds,
        };
        let mut wall = base_wall * if noisy { rng.gen_range(0.9..1.1) } else { 1.0 };
        if job.code.contains(MARK_SLOW) {
            wall *= 4.0;
        }
        let last = self.baseline.loss_curve.last().map_or(1, |&(s, _)| s.max(1)) as f64;
        let mut curve: Vec<(u64, f64)> = self
            .baseline
            .loss_curve
            .iter()
            .map(|&(step, b)| {
                let frac = step as f64 / last;
                let jitter = if noisy { rng.gen_range(-0.002..0.002) } else { 0.0 };
                (step, b * (1.0 - 0.6 * q * frac) * (1.0 + jitter))
            })
            .collect();

        if job.code.contains(MARK_BUG) {
            let partial = &curve[..curve.len().min(4)];
            let final_step = partial.last().map_or(1, |p| p.0);
            let wall = wall * partial.len() as f64 / curve.len() as f64;
            if let Err(killed) = stream(monitor, partial, final_step, wall) {
                return killed;
            }
            return ExecutorReport::failed(
                RunStatus::Error,
                format!(
                    "Traceback (most recent call last):\n  File \"candidate_source.txt\", line 42, in forward\nRuntimeError: shape mismatch in state update ({MARK_BUG})"
                ),
                wall,
                monitor.steps().to_vec(),
            );
        }
        if job.code.contains(MARK_LEAK) {
            if let (Some(last), Some(&(_, b))) = (curve.last_mut(), self.baseline.loss_curve.last()) {
                last.1 = b * 0.88;
            }
        }
        let final_step = curve.last().map_or(1, |p| p.0);
        if let Err(killed) = stream(monitor, &curve[..curve.len() - 1], final_step, wall) {
            return killed;
        }
        let scores = self.scores(&mut rng, q, noisy, job.task_set);
        match MetricsReport::new(curve, scores) {
            Ok(m) => ExecutorReport::ok(m, wall, monitor.steps().to_vec()),
            Err(e) => ExecutorReport::failed(RunStatus::Error, e.to_string(), wall, monitor.steps().to_vec()),
        }
    }
}

/// Replays a fixed list of reports, one per run, through the monitor.
#[derive(Debug, Default)]
pub struct ScriptedExecutor {
    queue: Mutex<VecDeque<ExecutorReport>>,
    calls: AtomicUsize,
}

impl ScriptedExecutor {
    pub fn new(reports: impl IntoIterator<Item = ExecutorReport>) -> Self {
        Self {
            queue: Mutex::new(reports.into_iter().collect()),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Executor for ScriptedExecutor {
    fn run(&self, _job: &RunJob<'_>, monitor: &mut Monitor) -> ExecutorReport {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let Some(report) = self.queue.lock().expect("script lock").pop_front() else {
            return ExecutorReport::failed(RunStatus::Error, "script exhausted", 0.0, vec![]);
        };
        let (points, final_step) = match &report.metrics {
            Some(m) => {
                let c = &m.loss_curve;
                (c[..c.len() - 1].to_vec(), c.last().map_or(1, |p| p.0))
            }
            None => (
                report.step_stream.clone(),
                report.step_stream.last().map_or(1, |p| p.0),
            ),
        };
        if let Err(killed) = stream(monitor, &points, final_step, report.wall_seconds) {
            return killed;
        }
        report
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engineer::{monitor_config, StageConfig};

    fn job<'a>(code: &'a str, stage: &'a StageConfig, tasks: &'a [String]) -> RunJob<'a> {
        RunJob {
            name: "delta_net_t",
            motivation: "m",
            code,
            stage,
            task_set: tasks,
            seed: 0,
            attempt: 0,
        }
    }

    #[test]
    fn baseline_code_reproduces_reference() {
        let stage = StageConfig::exploration();
        let tasks = reference::task_set();
        let r = SimulatedExecutor::default().run(&job("plain", &stage, &tasks), &mut Monitor::passive());
        assert_eq!(r.metrics.unwrap(), reference::delta_net());
        assert_eq!(r.step_stream.len(), reference::CURVE_STEPS.len() - 1);
    }

    #[test]
    fn healthy_run_passes_supervision() {
        let stage = StageConfig::exploration();
        let tasks = reference::task_set();
        let base = reference::delta_net();
        let cfg = monitor_config(&stage, &[36_000.0; 20], &base.loss_curve);
        let code = "x\n# mutation +0.010000\n";
        let r = SimulatedExecutor::default().run(&job(code, &stage, &tasks), &mut Monitor::new(cfg));
        assert_eq!(r.status, RunStatus::Ok);
        assert!(r.metrics.unwrap().final_loss < base.final_loss);
    }

    #[test]
    fn markers_drive_failures() {
        let stage = StageConfig::exploration();
        let tasks = reference::task_set();
        let base = reference::delta_net();
        let exec = SimulatedExecutor::default();
        let cfg = monitor_config(&stage, &[36_000.0; 20], &base.loss_curve);
        let bug = exec.run(&job("# SIM_BUG\n", &stage, &tasks), &mut Monitor::new(cfg.clone()));
        assert_eq!(bug.status, RunStatus::Error);
        let slow = exec.run(&job("# SIM_SLOW\n", &stage, &tasks), &mut Monitor::new(cfg.clone()));
        assert_eq!(slow.status, RunStatus::KilledTimeout);
        let leak = exec.run(&job("# SIM_LEAK\n", &stage, &tasks), &mut Monitor::new(cfg));
        assert_eq!(leak.status, RunStatus::Ok);
        let m = leak.metrics.unwrap();
        assert!((m.final_loss - base.final_loss * 0.88).abs() < 1e-12);
    }
}
