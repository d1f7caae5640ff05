//! Executor that launches an external trainer process per run.

use std::fs::{self, File};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use super::wire::{self, ProgressTail, RunConfig, WireStatus};
use super::{tail, ExecutorReport, Executor, Monitor, RunEvent, RunJob, RunStatus, Verdict, WorkspaceAllocator, ERROR_LOG_TAIL};

/// Combined stdout and stderr of the trainer, inside the workspace.
pub const OUTPUT_LOG: &str = "executor.log";

/// Runs `program args... <workspace>` with the workspace as working directory.
#[derive(Debug)]
pub struct SubprocessExecutor {
    program: String,
    args: Vec<String>,
    workspaces: WorkspaceAllocator,
    poll: Duration,
}

impl SubprocessExecutor {
    pub fn new(program: impl Into<String>, args: Vec<String>, workspaces: WorkspaceAllocator) -> Self {
        Self {
            program: program.into(),
            args,
            workspaces,
            poll: Duration::from_millis(50),
        }
    }

    pub fn with_poll_interval(mut self, poll: Duration) -> Self {
        self.poll = poll;
        self
    }

    fn spawn(&self, dir: &Path) -> std::io::Result<Child> {
        let out = File::create(dir.join(OUTPUT_LOG))?;
        let err = out.try_clone()?;
        Command::new(&self.program)
            .args(&self.args)
            .arg(dir)
            .current_dir(dir)
            .stdin(Stdio::null())
            .stdout(out)
            .stderr(err)
            .spawn()
    }
}

fn output_tail(dir: &Path) -> String {
    let text = fs::read(dir.join(OUTPUT_LOG))
        .map(|b| String::from_utf8_lossy(&b).into_owned())
        .unwrap_or_default();
    tail(&text, ERROR_LOG_TAIL).to_string()
}

fn feed(monitor: &mut Monitor, points: Vec<(u64, f64)>, elapsed: f64) -> Option<super::Kill> {
    for (step, loss) in points {
        if let Verdict::Kill(k) = monitor.observe(&RunEvent::Step { step, loss, elapsed }) {
            return Some(k);
        }
    }
    match monitor.observe(&RunEvent::Tick { elapsed }) {
        Verdict::Kill(k) => Some(k),
        Verdict::Continue => None,
    }
}

impl Executor for SubprocessExecutor {
    fn run(&self, job: &RunJob<'_>, monitor: &mut Monitor) -> ExecutorReport {
        let dir = match self.workspaces.allocate(job.name) {
            Ok(d) => d,
            Err(e) => return ExecutorReport::failed(RunStatus::Error, e.to_string(), 0.0, vec![]),
        };
        let config = RunConfig {
            name: job.name.to_string(),
            stage: job.stage.stage,
            token_budget: job.stage.token_budget,
            eval_sample_cap: job.stage.eval_sample_cap,
            model_scale: job.stage.model_scale.clone(),
            seed: job.seed,
            task_set: job.task_set.to_vec(),
        };
        if let Err(e) = wire::prepare_workspace(&dir, job.code, &config) {
            return ExecutorReport::failed(RunStatus::Error, e.to_string(), 0.0, vec![]);
        }
        let started = Instant::now();
        let mut child = match self.spawn(&dir) {
            Ok(c) => c,
            Err(e) => {
                return ExecutorReport::failed(
                    RunStatus::Error,
                    format!("failed to launch {}: {e}", self.program),
                    0.0,
                    vec![],
                )
            }
        };
        let progress = dir.join(wire::PROGRESS_FILE);
        let mut tailer = ProgressTail::default();
        let exit = loop {
            let elapsed = started.elapsed().as_secs_f64();
            if let Some(kill) = feed(monitor, tailer.poll(&progress), elapsed) {
                let _ = child.kill();
                let _ = child.wait();
                return ExecutorReport::from_kill(&kill, &output_tail(&dir), monitor.steps().to_vec());
            }
            match child.try_wait() {
                Ok(Some(status)) => break status,
                Ok(None) => thread::sleep(self.poll),
                Err(e) => {
                    let _ = child.kill();
                    return ExecutorReport::failed(
                        RunStatus::Error,
                        format!("lost track of trainer process: {e}"),
                        started.elapsed().as_secs_f64(),
                        monitor.steps().to_vec(),
                    );
                }
            }
        };
        let elapsed = started.elapsed().as_secs_f64();
        if let Some(kill) = feed(monitor, tailer.poll(&progress), elapsed) {
            return ExecutorReport::from_kill(&kill, &output_tail(&dir), monitor.steps().to_vec());
        }
        let steps = monitor.steps().to_vec();
        let metrics = match wire::read_metrics(&dir, job.task_set) {
            Ok(m) => m,
            Err(e) => {
                let log = format!("{}\nexit status {exit}; {e}", output_tail(&dir));
                return ExecutorReport::failed(RunStatus::Error, log, elapsed, steps);
            }
        };
        let wall = metrics.wall_seconds;
        match (exit.success(), metrics.status) {
            (true, WireStatus::Ok) => match metrics.report(job.task_set) {
                Ok(report) => ExecutorReport::ok(report, wall, steps),
                Err(e) => ExecutorReport::failed(RunStatus::Error, e.to_string(), wall, steps),
            },
            (false, WireStatus::Error) => {
                let log = format!("{}\n{}", metrics.error_log, output_tail(&dir));
                ExecutorReport::failed(RunStatus::Error, log.trim(), wall, steps)
            }
            (ok, status) => ExecutorReport::failed(
                RunStatus::Error,
                format!(
                    "exit status {exit} (success={ok}) disagrees with metrics status {status:?}\n{}",
                    output_tail(&dir)
                ),
                wall,
                steps,
            ),
        }
    }
}

#[cfg(all(test, unix))]
mod tests {
    use super::*;
    use crate::engineer::{MonitorConfig, StageConfig};

    const HEALTHY: &str = r#"
echo "STEP 1 LOSS 9.0" >> progress.log
echo "STEP 2 LOSS 8.0" >> progress.log
cat > metrics.json <<'JSON'
{"status":"ok","loss_curve":[[1,9.0],[2,8.0]],"benchmarks":{"copy":0.5},"wall_seconds":0.2,"error_log":""}
JSON
"#;

    const BUGGY: &str = r#"
echo "Traceback: NameError: name 'undefined_thing' is not defined" >&2
cat > metrics.json <<'JSON'
{"status":"error","loss_curve":[],"benchmarks":{},"wall_seconds":0.1,"error_log":"NameError: name 'undefined_thing' is not defined"}
JSON
exit 1
"#;

    const SLOW: &str = "echo 'STEP 1 LOSS 9.0' >> progress.log\nsleep 5\n";

    fn run_script(script: &str, cfg: MonitorConfig) -> (ExecutorReport, tempfile::TempDir) {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().to_path_buf();
        let exec = SubprocessExecutor::new(
            "sh",
            vec!["-c".into(), script.into(), "trainer".into()],
            WorkspaceAllocator::new(dir.join("ws")),
        )
        .with_poll_interval(Duration::from_millis(10));
        let stage = StageConfig::exploration();
        let tasks = vec!["copy".to_string()];
        let job = RunJob {
            name: "delta_net_t",
            motivation: "m",
            code: "class DeltaNet: pass",
            stage: &stage,
            task_set: &tasks,
            seed: 0,
            attempt: 0,
        };
        let mut m = Monitor::new(cfg);
        (exec.run(&job, &mut m), tmp)
    }

    #[test]
    fn healthy_script_is_ok() {
        let (r, dir) = run_script(HEALTHY, MonitorConfig::default());
        assert_eq!(r.status, RunStatus::Ok, "{}", r.error_log);
        assert_eq!(r.metrics.unwrap().final_loss, 8.0);
        assert_eq!(r.step_stream, vec![(1, 9.0), (2, 8.0)]);
        let ws = fs::read_dir(dir.path().join("ws")).unwrap().next().unwrap().unwrap().path();
        assert_eq!(
            fs::read_to_string(ws.join(wire::SOURCE_FILE)).unwrap(),
            "class DeltaNet: pass"
        );
    }

    #[test]
    fn buggy_script_reports_error_with_log() {
        let (r, _) = run_script(BUGGY, MonitorConfig::default());
        assert_eq!(r.status, RunStatus::Error);
        assert!(r.error_log.contains("undefined_thing"));
    }

    #[test]
    fn slow_script_is_killed() {
        let started = Instant::now();
        let (r, _) = run_script(
            SLOW,
            MonitorConfig {
                time_limit: Some(0.3),
                ..Default::default()
            },
        );
        assert_eq!(r.status, RunStatus::KilledTimeout);
        assert!(started.elapsed() < Duration::from_secs(4));
    }

    #[test]
    fn anomalous_progress_is_killed() {
        let (r, _) = run_script(
            "echo 'STEP 300 LOSS 6.5' >> progress.log\nsleep 5\n",
            MonitorConfig {
                time_limit: None,
                baseline_curve: vec![(300, 7.6759)],
                anomaly_threshold: 0.10,
            },
        );
        assert_eq!(r.status, RunStatus::KilledAnomaly);
    }

    #[test]
    fn missing_metrics_is_an_error() {
        let (r, _) = run_script("echo hello", MonitorConfig::default());
        assert_eq!(r.status, RunStatus::Error);
        assert!(r.error_log.contains("metrics.json"));
    }
}
