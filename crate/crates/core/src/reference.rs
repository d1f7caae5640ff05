//! Published reference results for the two human-designed baselines.

use std::collections::BTreeMap;

use crate::store::MetricsReport;

/// Default benchmark task set, in reporting order.
pub const TASKS: [&str; 12] = [
    "arc_challenge",
    "arc_easy",
    "boolq",
    "fda",
    "hellaswag",
    "lambada_openai",
    "openbookqa",
    "piqa",
    "social_iqa",
    "squad_completion",
    "swde",
    "winogrande",
];

/// Steps at which the reference loss curves are tabulated.
pub const CURVE_STEPS: [u64; 21] = [
    1, 100, 200, 300, 400, 500, 600, 700, 800, 900, 1000, 1100, 1200, 1300, 1400, 1500, 1600,
    1700, 1800, 1900, 2000,
];

pub const DELTA_NET_LOSS: [f64; 21] = [
    10.8767, 10.2672, 8.9668, 7.6759, 6.9723, 6.5817, 6.2187, 6.0636, 5.8536, 5.7077, 5.5162,
    5.3605, 5.2252, 5.159, 4.9888, 4.9192, 4.9029, 4.722, 4.6739, 4.6373, 4.5749,
];

pub const GATED_DELTA_NET_LOSS: [f64; 21] = [
    10.8751, 10.2436, 8.9512, 7.6597, 6.9481, 6.5618, 6.2079, 6.0560, 5.8354, 5.6818, 5.5056,
    5.3516, 5.2254, 5.1678, 4.9810, 4.9192, 4.8983, 4.7166, 4.6656, 4.6264, 4.5678,
];

/// Scores in [`TASKS`] order.
pub const DELTA_NET_SCORES: [f64; 12] = [
    0.168, 0.324, 0.364, 0.0, 0.296, 0.002, 0.136, 0.526, 0.354, 0.002, 0.008, 0.504,
];

pub const GATED_DELTA_NET_SCORES: [f64; 12] = [
    0.168, 0.374, 0.37, 0.0, 0.282, 0.002, 0.144, 0.562, 0.35, 0.004, 0.002, 0.456,
];

pub fn task_set() -> Vec<String> {
    TASKS.iter().map(|t| t.to_string()).collect()
}

fn report(losses: &[f64; 21], scores: &[f64; 12]) -> MetricsReport {
    let curve = CURVE_STEPS.iter().copied().zip(losses.iter().copied()).collect();
    let scores: BTreeMap<String, f64> = TASKS
        .iter()
        .map(|t| t.to_string())
        .zip(scores.iter().copied())
        .collect();
    MetricsReport::new(curve, scores).expect("reference table is well formed")
}

pub fn delta_net() -> MetricsReport {
    report(&DELTA_NET_LOSS, &DELTA_NET_SCORES)
}

pub fn gated_delta_net() -> MetricsReport {
    report(&GATED_DELTA_NET_LOSS, &GATED_DELTA_NET_SCORES)
}

/// Source of the baseline architecture every campaign starts from.
pub const BASELINE_SOURCE: &str = include_str!("../assets/delta_net_reference.py");
