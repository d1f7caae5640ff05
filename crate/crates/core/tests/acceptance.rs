//! One PASS/FAIL line per acceptance criterion, hermetic executor only.

mod common;

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use common::fixtures::{classify, components, linear_fixture, provenance_fixture};
use common::{embedder, memory_store, metrics, DIM};
use evoarch_core::analytics::{export_tree, provenance_table, report_scaling, Provenance, TreeFormat};
use evoarch_core::cognition::CognitionBase;
use evoarch_core::config::CampaignConfig;
use evoarch_core::engineer::{
    debug_loop, execute, replay, ExecutorReport, MonitorConfig, RunEvent, RunJob, RunStatus, StageConfig,
};
use evoarch_core::fitness::{composite_fitness, leakage_check, quantitative_component};
use evoarch_core::gateway::{LlmGateway, ScriptedResponder, Task};
use evoarch_core::orchestrator::{Engine, POOL_DIR, REBUILD_LOG};
use evoarch_core::pool::{sample_seed, CandidatePoolSnapshot, PoolPolicy};
use evoarch_core::prompts::PromptSet;
use evoarch_core::reference;
use evoarch_core::sim::ScriptedExecutor;
use evoarch_core::store::{MetricsReport, RecordDraft, Stage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Outcome = Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn fitness_suite() -> Outcome {
    let q = |d: f64| quantitative_component(d).map_err(|e| e.to_string());
    ensure!(q(0.0)? == 0.5, "sigma(0) = {}", q(0.0)?);
    ensure!((q(0.1)? - 0.9).abs() <= 1e-15, "sigma(+0.1) = {}", q(0.1)?);
    ensure!((q(-0.1)? - 0.1).abs() <= 1e-15, "sigma(-0.1) = {}", q(-0.1)?);
    for i in 0..1000 {
        let d = -0.2 + 0.4 * i as f64 / 999.0;
        let gap = (q(-d)? - (1.0 - q(d)?)).abs();
        ensure!(gap <= 1e-12, "asymmetry {gap} at {d}");
    }
    let c = composite_fitness(0.5, 0.5, 5.0).map_err(|e| e.to_string())?.composite;
    ensure!(c == 0.5, "composite {c}");
    Ok(())
}

fn leakage_rule() -> Outcome {
    let base = reference::delta_net();
    ensure!(base.final_loss == 4.5749, "baseline final loss {}", base.final_loss);
    let with_final = |loss: f64| {
        let mut curve = base.loss_curve.clone();
        curve.last_mut().unwrap().1 = loss;
        MetricsReport::new(curve, base.benchmark_scores.clone()).unwrap()
    };
    let leaked = leakage_check(&with_final(4.0), &base).map_err(|e| e.to_string())?;
    ensure!(leaked.leakage, "4.0 not flagged (r_loss {})", leaked.r_loss);
    let edge = leakage_check(&with_final(0.90 * 4.5749), &base).map_err(|e| e.to_string())?;
    ensure!(!edge.leakage, "boundary flagged (r_loss {:e})", edge.r_loss);
    Ok(())
}

fn pool_policy() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = CampaignConfig::default();
    cfg.workers = 4;
    cfg.sync_writes = false;
    cfg.stop.max_cycles = None;
    cfg.stop.max_accepted = Some(300);
    let engine = Engine::open_or_create(cfg, dir.path()).map_err(|e| e.to_string())?;
    let s = engine.run_campaign().map_err(|e| e.to_string())?;
    let at: Vec<usize> = s.rebuilds.iter().map(|r| r.built_at_count).collect();
    ensure!(at == [200, 250, 300], "rebuilds at {at:?}");
    let mins: Vec<f64> = s.rebuilds.iter().map(|r| r.min_fitness.unwrap_or(f64::NAN)).collect();
    ensure!(mins.windows(2).all(|w| w[1] >= w[0]), "min fitness {mins:?}");

    let dump: Vec<serde_json::Value> = engine
        .store()
        .dump_jsonl()
        .map_err(|e| e.to_string())?
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let log = std::fs::read_to_string(dir.path().join(POOL_DIR).join(REBUILD_LOG)).map_err(|e| e.to_string())?;
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let after = v["after_record"].as_u64().unwrap();
        let mut oracle: Vec<(u64, f64)> = dump
            .iter()
            .filter(|r| {
                r["record_id"].as_u64().unwrap() <= after && r["status"] == "accepted" && r["stage"] == "exploration"
            })
            .map(|r| (r["record_id"].as_u64().unwrap(), r["fitness"]["composite"].as_f64().unwrap()))
            .collect();
        oracle.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let want: Vec<u64> = oracle.iter().take(50).map(|h| h.0).collect();
        let got: Vec<u64> = v["snapshot"]["entries"]
            .as_array()
            .unwrap()
            .iter()
            .map(|e| e["record_id"].as_u64().unwrap())
            .collect();
        ensure!(got == want, "snapshot after record {after} differs from the top-50 oracle");
    }
    ensure!(log.lines().count() == 3, "{} rebuild log lines", log.lines().count());
    Ok(())
}

fn sampling_statistics() -> Outcome {
    let store = memory_store();
    for i in 0..50 {
        store
            .append_record(common::accepted(&format!("r{i}"), &format!("idea {i}"), 0.9 - i as f64 * 0.005))
            .map_err(|e| e.to_string())?;
    }
    let pool = CandidatePoolSnapshot::build(&store.snapshot(), 50, 1);
    ensure!(pool.len() == 50, "pool of {}", pool.len());
    let rank: std::collections::BTreeMap<u64, usize> =
        pool.entries.iter().enumerate().map(|(i, e)| (e.record_id, i + 1)).collect();
    let policy = PoolPolicy::default();
    let mut counts = [0usize; 10];
    for i in 0..10_000u64 {
        let seed = sample_seed(&policy, &pool, i.wrapping_mul(0x9e37_79b9_7f4a_7c15)).ok_or("empty pool")?;
        let r = rank[&seed.parent];
        ensure!((1..=10).contains(&r), "parent at rank {r}");
        counts[r - 1] += 1;
        let refs: BTreeSet<usize> = seed.references.iter().map(|id| rank[id]).collect();
        ensure!(seed.references.len() == 4 && refs.len() == 4, "references {:?}", seed.references);
        ensure!(refs.iter().all(|r| (11..=50).contains(r)), "reference ranks {refs:?}");
    }
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - 1000.0).powi(2) / 1000.0).sum();
    let critical = ChiSquared::new(9.0).unwrap().inverse_cdf(0.99);
    ensure!(chi2 < critical, "chi2 {chi2:.3} >= {critical:.3}");
    Ok(())
}

fn closed_loop() -> Outcome {
    let run = || -> Result<(String, bool, u64), String> {
        let mut cfg = CampaignConfig::default();
        cfg.workers = 4;
        cfg.stop.max_accepted = None;
        cfg.stop.max_cycles = Some(260);
        let engine = Engine::hermetic(cfg.clone(), CognitionBase::new(cfg.embedding_dim)).map_err(|e| e.to_string())?;
        let s = engine.run_campaign().map_err(|e| e.to_string())?;
        let per_status: usize = s.status_counts.values().sum();
        let conserved = s.conserved && per_status as u64 == s.cycles && s.records_total as u64 == s.cycles + 1;
        Ok((engine.store().dump_jsonl().map_err(|e| e.to_string())?, conserved, s.cycles))
    };
    let (a, conserved, cycles) = run()?;
    ensure!(cycles == 260, "{cycles} cycles");
    ensure!(conserved, "status counts do not add up to the cycle count");
    let (b, _, _) = run()?;
    ensure!(a == b, "dumps differ between runs");
    Ok(())
}

fn supervisor() -> Outcome {
    let stage = StageConfig::exploration();
    let tasks = reference::task_set();
    let base = reference::delta_net();
    let history: Vec<f64> = (0..20).map(|i| 90.0 + i as f64).collect();
    let limit = 2.5 * 99.5;
    let job = RunJob {
        name: "delta_net_s",
        motivation: "m",
        code: "class DeltaNet: pass",
        stage: &stage,
        task_set: &tasks,
        seed: 1,
        attempt: 0,
    };
    let exec = ScriptedExecutor::new([
        ExecutorReport::ok(metrics(1.0), limit + 0.5, vec![]),
        ExecutorReport::ok(metrics(1.0), limit - 0.5, vec![]),
    ]);
    let slow = execute(&exec, &job, &history, &base.loss_curve).status;
    let fast = execute(&exec, &job, &history, &base.loss_curve).status;
    ensure!(slow == RunStatus::KilledTimeout && fast == RunStatus::Ok, "timeouts {slow:?} / {fast:?}");

    let at_300 = base.loss_at_or_before(300).ok_or("no step 300")?;
    ensure!(at_300 == 7.6759, "baseline step-300 loss {at_300}");
    let cfg = MonitorConfig {
        time_limit: None,
        baseline_curve: base.loss_curve.clone(),
        anomaly_threshold: 0.10,
    };
    let loss = at_300 * (1.0 - 0.153);
    let kill = replay(&cfg, &[RunEvent::Step { step: 300, loss, elapsed: 1.0 }]);
    ensure!(kill.map(|k| k.status) == Some(RunStatus::KilledAnomaly), "no anomaly kill at 15.3% under");

    let script = std::sync::Arc::new(ScriptedResponder::new());
    for _ in 0..3 {
        script.push_ok(Task::Debug, "[[CODE]]\nclass DeltaNet:\n    fixed = True\n[[/CODE]]");
    }
    let gateway = LlmGateway::mock(script, DIM);
    let mut runs = vec![
        ExecutorReport::failed(RunStatus::Error, "second failure", 1.0, vec![]),
        ExecutorReport::ok(metrics(1.0), 1.0, vec![]),
    ]
    .into_iter();
    let first = ExecutorReport::failed(RunStatus::Error, "first failure", 1.0, vec![]);
    let out = debug_loop(&gateway, &PromptSet::builtin(), "m", "x", first, 3, |_, _| runs.next().unwrap())
        .map_err(|e| e.to_string())?;
    ensure!(out.report.is_ok(), "debug loop did not recover");
    ensure!(out.revisions.len() == 2, "{} revisions", out.revisions.len());
    Ok(())
}

fn analytics() -> Outcome {
    let labels = classify(&provenance_fixture([224, 243, 33], [158, 274, 68]));
    let t = provenance_table(&labels);
    for (row, want) in [(&t.gallery, [44.8, 48.6, 6.6]), (&t.all, [38.2, 51.7, 10.1])] {
        let got = [Provenance::Cognition, Provenance::Analysis, Provenance::Original].map(|p| row.percent(p));
        for (g, w) in got.iter().zip(want) {
            ensure!((g - w).abs() <= 0.1, "{} row {got:?}, want {want:?}", row.group);
        }
    }
    let slope = report_scaling(&linear_fixture(), Stage::Exploration).slope.ok_or("slope undefined")?;
    ensure!((slope - 0.0053).abs() <= 1e-9, "slope {slope}");

    let store = memory_store();
    let mut rng = ChaCha8Rng::seed_from_u64(1773);
    for i in 1..=1773u64 {
        let mut d = RecordDraft::new(format!("n{i}"), format!("node {i}"), "");
        d.parent_id = (i > 1 && rng.gen_bool(0.98)).then(|| rng.gen_range(1..i));
        store.append_record(d).map_err(|e| e.to_string())?;
    }
    let tree = store.read(|a| export_tree(a, TreeFormat::Json)).map_err(|e| e.to_string())?;
    ensure!(tree.nodes == 1773, "{} nodes", tree.nodes);
    ensure!(tree.edges == tree.nodes - tree.roots, "{} edges for {} roots", tree.edges, tree.roots);
    ensure!(components(&tree.text) == tree.roots, "component count differs from roots");
    Ok(())
}

fn cognition_retrieval() -> Outcome {
    let emb = embedder();
    let words = [
        "loss", "recall", "long", "context", "gradient", "state", "saturates", "benchmark", "variance", "memory",
        "decays", "chunk", "boundary", "local", "norm", "retrieval", "copying", "noise", "plateau", "drift",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let phrase = |rng: &mut ChaCha8Rng| {
        let n = rng.gen_range(3..10);
        (0..n).map(|_| *words.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
    };
    let mut base = CognitionBase::new(DIM);
    let mut vectors = Vec::new();
    for i in 0..300 {
        let scenario = format!("{} case {i}", phrase(&mut rng));
        let doc = format!(
            "<COGNITION>\n<DESIGN_INSIGHT>\n### DESIGN_INSIGHT_HIGH: idea {i}\n</DESIGN_INSIGHT>\n\
             <EXPERIMENTAL_TRIGGER_PATTERNS>\n{scenario}\n</EXPERIMENTAL_TRIGGER_PATTERNS>\n\
             <ALGORITHMIC_INNOVATION>\nstep {i}\n</ALGORITHMIC_INNOVATION>\n</COGNITION>\n"
        );
        base.ingest(&format!("d{i}"), &doc, emb.as_ref()).map_err(|e| e.to_string())?;
        vectors.push(emb.embed(&scenario).map_err(|e| e.to_string())?.as_slice().to_vec());
    }
    ensure!(base.len() == 300, "{} entries", base.len());
    for _ in 0..100 {
        let query = emb.embed(&phrase(&mut rng)).map_err(|e| e.to_string())?;
        let q = query.as_slice();
        let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut oracle: Vec<(u64, f64)> = vectors
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                (i as u64 + 1, v.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() / (vn * qn))
            })
            .collect();
        oracle.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let got: Vec<(u64, f64)> = base
            .retrieve(&query, 10)
            .map_err(|e| e.to_string())?
            .iter()
            .map(|(e, s)| (e.cognition_id, *s))
            .collect();
        for (g, w) in got.iter().zip(&oracle) {
            ensure!(g.0 == w.0 || (g.1 - w.1).abs() < 1e-12, "ranking {got:?} vs oracle {:?}", &oracle[..10]);
        }
        ensure!(got.len() == 10, "{} hits", got.len());
    }
    Ok(())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome, Option<Duration>); 8] = [
        ("fitness unit suite", fitness_suite, Some(Duration::from_secs(1))),
        ("leakage rule", leakage_rule, None),
        ("pool policy simulation", pool_policy, Some(Duration::from_secs(30))),
        ("sampling statistics", sampling_statistics, Some(Duration::from_secs(10))),
        ("closed-loop hermetic run", closed_loop, Some(Duration::from_secs(300))),
        ("supervisor fixtures", supervisor, None),
        ("analytics fixtures", analytics, None),
        ("cognition retrieval", cognition_retrieval, None),
    ];
    let mut failed = 0;
    for (name, check, budget) in criteria {
        let start = Instant::now();
        let mut outcome = check();
        let took = start.elapsed();
        if let (Ok(()), Some(b)) = (&outcome, budget) {
            if took > b {
                outcome = Err(format!("took {took:.2?}, budget {b:?}"));
            }
        }
        match outcome {
            Ok(()) => println!("PASS {name} ({took:.2?})"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
