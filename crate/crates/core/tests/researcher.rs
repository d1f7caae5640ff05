mod common;

use std::sync::Arc;

use common::{accepted, memory_store, DIM};
use evoarch_core::gateway::{LlmGateway, Message, ScriptedResponder, Task};
use evoarch_core::prompts::{tags, PromptSet};
use evoarch_core::researcher::{
    novelty_gate, parse_proposal, propose, propose_validated, EvolutionContext, GateVerdict, Proposal,
    ResearchError, Validated, NOVELTY_NEIGHBORS,
};
use evoarch_core::store::{RecordStatus, RecordStore};
use proptest::prelude::*;

fn reply(n: u32) -> String {
    format!(
        "[[NAME]]\ndelta_net_idea{n}\n[[/NAME]]\n[[MOTIVATION]]\nidea {n}: route tokens between two memories\n[[/MOTIVATION]]\n[[CODE]]\nclass DeltaNet:\n    pass\n[[/CODE]]"
    )
}

const DUP: &str = "[[VERDICT]]\nduplicate\n[[/VERDICT]]\n[[EXPLANATION]]\nrepeats record 1\n[[/EXPLANATION]]";
const NOVEL: &str = "[[VERDICT]]\nnovel\n[[/VERDICT]]";
const PASS: &str = "[[VERDICT]]\npass\n[[/VERDICT]]";
const FAIL: &str = "[[VERDICT]]\nfail\n[[/VERDICT]]\n[[FEEDBACK]]\nreads future positions\n[[/FEEDBACK]]";

struct Fixture {
    script: Arc<ScriptedResponder>,
    gateway: LlmGateway,
    store: RecordStore,
    prompts: PromptSet,
}

fn fixture() -> Fixture {
    let script = Arc::new(ScriptedResponder::new());
    let gateway = LlmGateway::mock(script.clone(), DIM);
    let store = memory_store();
    store.append_record(accepted("delta_net", "reference delta rule layer", 0.5)).unwrap();
    Fixture {
        script,
        gateway,
        store,
        prompts: PromptSet::builtin(),
    }
}

fn context(store: &RecordStore) -> EvolutionContext {
    EvolutionContext {
        parent: store.get(1).unwrap(),
        reference_summaries: vec![],
        cognitions: vec![],
        baseline_digest: "delta_net: final_loss 4.5749".into(),
    }
}

fn user_text(m: &[Message]) -> String {
    m.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n")
}

#[test]
fn duplicates_are_rewritten_until_novel() {
    let f = fixture();
    for n in 1..=3 {
        f.script.push_ok(Task::Propose, reply(n));
    }
    f.script.push_ok(Task::NoveltyJudge, DUP).push_ok(Task::NoveltyJudge, DUP).push_ok(Task::NoveltyJudge, NOVEL);
    f.script.push_ok(Task::SanityCheck, PASS);
    let archive = f.store.snapshot();
    let out = propose_validated(&f.gateway, &f.prompts, &archive, &f.gateway, &context(&f.store), 3).unwrap();
    let Validated::Passed(p) = out else {
        panic!("expected a pass, got {out:?}");
    };
    assert_eq!(p.attempt, 3);
    assert_eq!(p.name, "delta_net_idea3");
    assert_eq!(p.feedback_history, vec!["repeats record 1", "repeats record 1"]);
    let third = &f.script.prompts(Task::Propose)[2];
    assert_eq!(user_text(third).matches(&format!("[[{}]]", tags::FEEDBACK_ITEM)).count(), 2);
}

#[test]
fn novelty_budget_exhaustion_is_reported() {
    let f = fixture();
    for n in 1..=2 {
        f.script.push_ok(Task::Propose, reply(n));
        f.script.push_ok(Task::NoveltyJudge, DUP);
    }
    let archive = f.store.snapshot();
    let out = propose_validated(&f.gateway, &f.prompts, &archive, &f.gateway, &context(&f.store), 2).unwrap();
    match out {
        Validated::Exhausted {
            status,
            feedback_history,
            last,
        } => {
            assert_eq!(status, RecordStatus::RejectedNovelty);
            assert_eq!(feedback_history.len(), 2);
            assert_eq!(last.attempt, 2);
        }
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(f.script.call_count(Task::SanityCheck), 0);
}

#[test]
fn checker_rejecting_every_attempt_exhausts_as_sanity() {
    let f = fixture();
    for n in 1..=3 {
        f.script.push_ok(Task::Propose, reply(n));
        f.script.push_ok(Task::NoveltyJudge, NOVEL);
        f.script.push_ok(Task::SanityCheck, FAIL);
    }
    let archive = f.store.snapshot();
    let out = propose_validated(&f.gateway, &f.prompts, &archive, &f.gateway, &context(&f.store), 3).unwrap();
    assert!(matches!(
        out,
        Validated::Exhausted {
            status: RecordStatus::RejectedSanity,
            ..
        }
    ));
    assert_eq!(f.script.call_count(Task::SanityCheck), 3);
}

#[test]
fn unreadable_checker_reply_rejects_and_unreadable_judge_passes() {
    let f = fixture();
    f.script.push_ok(Task::Propose, reply(1));
    f.script.push_ok(Task::NoveltyJudge, "no idea");
    f.script.push_ok(Task::SanityCheck, "looks fine to me");
    let archive = f.store.snapshot();
    let out = propose_validated(&f.gateway, &f.prompts, &archive, &f.gateway, &context(&f.store), 1).unwrap();
    match out {
        Validated::Exhausted { status, last, .. } => {
            assert_eq!(status, RecordStatus::RejectedSanity);
            assert!(last.warnings.iter().any(|w| w.contains("novelty verdict unreadable")));
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn novelty_consults_exactly_five_neighbors_in_a_large_archive() {
    let f = fixture();
    for i in 0..10_000 {
        f.store
            .append_record(accepted(&format!("r{i}"), &format!("variant {i} of a decay gate"), 0.5))
            .unwrap();
    }
    f.script.push_ok(Task::NoveltyJudge, NOVEL);
    let proposal = Proposal {
        name: "delta_net_x".into(),
        motivation: "variant 17 of a decay gate".into(),
        code: "class DeltaNet: pass".into(),
        attempt: 1,
        feedback_history: vec![],
        warnings: vec![],
    };
    let archive = f.store.snapshot();
    let out = novelty_gate(&f.gateway, &f.prompts, &archive, &f.gateway, &proposal).unwrap();
    assert!(out.verdict.passed());
    assert_eq!(out.neighbors.len(), NOVELTY_NEIGHBORS);
    assert!((out.neighbors[0].1 - 1.0).abs() < 1e-12);
    let prompt = user_text(&f.script.prompts(Task::NoveltyJudge)[0]);
    assert_eq!(prompt.matches(&format!("[[{}]]", tags::NEIGHBOR)).count(), NOVELTY_NEIGHBORS);
}

#[test]
fn empty_index_passes_without_a_call() {
    let script = Arc::new(ScriptedResponder::new());
    let gateway = LlmGateway::mock(script.clone(), DIM);
    let store = memory_store();
    let proposal = Proposal {
        name: "delta_net_x".into(),
        motivation: "anything".into(),
        code: "class DeltaNet: pass".into(),
        attempt: 1,
        feedback_history: vec![],
        warnings: vec![],
    };
    let out = novelty_gate(&gateway, &PromptSet::builtin(), &store.snapshot(), &gateway, &proposal).unwrap();
    assert_eq!(out.verdict, GateVerdict::Pass { warnings: vec![] });
    assert_eq!(script.call_count(Task::NoveltyJudge), 0);
}

#[test]
fn malformed_reply_is_asked_again_once() {
    let f = fixture();
    f.script.push_ok(Task::Propose, "just some prose").push_ok(Task::Propose, reply(1));
    let p = propose(&f.gateway, &f.prompts, &context(&f.store), &[], 1).unwrap();
    assert_eq!(p.name, "delta_net_idea1");
    assert_eq!(p.warnings.len(), 1);

    f.script.push_ok(Task::Propose, "[[NAME]]\nx\n[[/NAME]]").push_ok(Task::Propose, "still nothing");
    let err = propose(&f.gateway, &f.prompts, &context(&f.store), &[], 1).unwrap_err();
    assert!(matches!(err, ResearchError::Unparseable { asks: 2, .. }));
}

proptest! {
    #[test]
    fn proposal_parser_never_panics(text in "(\\[\\[/?(NAME|MOTIVATION|CODE)\\]\\]\n|[a-z ]{0,12}\n){0,12}") {
        if let Ok(p) = parse_proposal(&text) {
            prop_assert!(!p.name.is_empty() && !p.motivation.is_empty() && !p.code.is_empty());
        }
    }
}
