use rand::Rng;

pub(super) const MECHANISMS: &[&str] = &[
    "adaptive decay gate on the state update",
    "multi scale convolution before the key projection",
    "hierarchical routing between local and global memory",
    "per head temperature on the delta rule",
    "low rank correction of the recurrent state",
    "token dependent forget gate",
    "dual memory with fast and slow write rates",
    "content aware chunk boundaries",
    "residual short convolution on values",
    "entropy regularised head mixing",
    "normalised key similarity with learnable scale",
    "gated output fusion of parallel paths",
    "position aware beta modulation",
    "sparse top k state readout",
    "momentum accumulation of state corrections",
];

pub(super) const PROBLEMS: &[&str] = &[
    "long range recall degrades as the state saturates",
    "local detail is lost when every token writes to one state",
    "training loss plateaus after the warmup phase",
    "heads collapse onto similar update patterns",
    "early tokens are overwritten before they are retrieved",
    "commonsense tasks lag while loss keeps improving",
    "reading comprehension scores stay near zero",
    "the write strength ignores token importance",
];

pub(super) const EFFECTS: &[&str] = &[
    "smoother loss decrease and better recall tasks",
    "higher reading comprehension with stable commonsense scores",
    "lower final loss at equal compute",
    "gains on pronoun resolution and narrative prediction",
    "better extraction from structured inputs",
];

pub(super) const WEAKNESSES: &[&str] = &[
    "state saturation still limits long range recall",
    "local patterns are blurred by the global update",
    "head outputs remain highly correlated",
    "the forget rate is not adapted to content",
    "structured extraction tasks stay weak",
    "gains on loss do not carry over to reasoning benchmarks",
    "early training is unstable with large updates",
    "the gate saturates and stops learning",
];

pub(super) fn pick<'a>(rng: &mut impl Rng, items: &[&'a str]) -> &'a str {
    items[rng.gen_range(0..items.len())]
}

pub(super) fn motivation(rng: &mut impl Rng, mechanism: &str, tag: &str) -> String {
    let problem = pick(rng, PROBLEMS);
    let effect = pick(rng, EFFECTS);
    format!(
        "Observed that {problem}. Introduce {mechanism} so the layer can control what it writes and reads. Expect {effect}. Variant {tag}."
    )
}
