//! Composite fitness: mean of two sigmoid-squashed relative deltas and a
//! normalised judge score, plus the information-leakage rejection rule.
//!
//! Relative deltas are clipped to the ±10% window before the sigmoid. The gain
//! is chosen so that the window edges land exactly on 0.9 and 0.1.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::MetricsReport;

/// Half-width of the relative-delta window that the sigmoid resolves.
pub const DELTA_WINDOW: f64 = 0.10;

/// Loss improvements strictly beyond this fraction of baseline are treated as leakage.
pub const LEAKAGE_THRESHOLD: f64 = 0.10;

pub const JUDGE_MIN: f64 = 1.0;
pub const JUDGE_MAX: f64 = 10.0;

/// Sigmoid gain `ln(9) / 0.10`: σ(gain · 0.10) = 0.9.
pub fn sigmoid_gain() -> f64 {
    9f64.ln() / DELTA_WINDOW
}

#[derive(Debug, Error, PartialEq)]
pub enum FitnessError {
    #[error("relative delta must be finite, got {0}")]
    NonFinite(f64),
    #[error("baseline and candidate benchmark task sets differ: {0}")]
    TaskSetMismatch(String),
    #[error("baseline benchmark mean is zero")]
    ZeroBaselineMean,
    #[error("baseline final loss must be positive, got {0}")]
    NonPositiveBaselineLoss(f64),
    #[error("judge score {0} outside [1, 10]")]
    JudgeOutOfRange(f64),
    #[error("quantitative component {0} outside (0, 1)")]
    ComponentOutOfRange(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitnessBreakdown {
    pub r_loss: f64,
    pub r_bench: f64,
    pub sig_loss: f64,
    pub sig_bench: f64,
    pub judge10: f64,
    pub judge_norm: f64,
    pub composite: f64,
    pub leakage: bool,
}

impl FitnessBreakdown {
    /// Score a candidate from its deltas and judge score.
    pub fn score(r_loss: f64, r_bench: f64, judge10: f64) -> Result<Self, FitnessError> {
        let sig_loss = quantitative_component(r_loss)?;
        let sig_bench = quantitative_component(r_bench)?;
        let mut out = composite_fitness(sig_loss, sig_bench, judge10)?;
        out.r_loss = r_loss;
        out.r_bench = r_bench;
        Ok(out)
    }

    /// Breakdown for a candidate discarded by the leakage rule. The judge is not
    /// consulted; the judge fields carry the scale floor.
    pub fn leaked(r_loss: f64, r_bench: f64) -> Result<Self, FitnessError> {
        let mut out = Self::score(r_loss, r_bench, JUDGE_MIN)?;
        out.leakage = true;
        Ok(out)
    }

    /// Beats the stage baseline on both axes.
    pub fn beats_baseline_on_both(&self) -> bool {
        self.r_loss > 0.0 && self.r_bench > 0.0
    }
}

/// σ(k · clip(delta, −0.10, +0.10)), bounded in [0.1, 0.9].
pub fn quantitative_component(relative_delta: f64) -> Result<f64, FitnessError> {
    if !relative_delta.is_finite() {
        return Err(FitnessError::NonFinite(relative_delta));
    }
    let t = relative_delta.clamp(-DELTA_WINDOW, DELTA_WINDOW) / DELTA_WINDOW;
    Ok(nine_logistic(t))
}

// σ(ln(9)·t) written as 9^t / (9^t + 1). With t = ±1 this yields 9/10 and 1/10,
// both correctly rounded, so the window edges are exact.
fn nine_logistic(t: f64) -> f64 {
    if t >= 0.0 {
        let p = 9f64.powf(t);
        p / (p + 1.0)
    } else {
        1.0 / (9f64.powf(-t) + 1.0)
    }
}

/// Relative improvements of `candidate` over `baseline`; positive means better.
pub fn deltas(
    candidate: &MetricsReport,
    baseline: &MetricsReport,
) -> Result<(f64, f64), FitnessError> {
    let cand_tasks: Vec<&String> = candidate.benchmark_scores.keys().collect();
    let base_tasks: Vec<&String> = baseline.benchmark_scores.keys().collect();
    if cand_tasks != base_tasks {
        return Err(FitnessError::TaskSetMismatch(format!(
            "candidate {cand_tasks:?} vs baseline {base_tasks:?}"
        )));
    }
    if baseline.final_loss <= 0.0 || !baseline.final_loss.is_finite() {
        return Err(FitnessError::NonPositiveBaselineLoss(baseline.final_loss));
    }
    if baseline.benchmark_mean == 0.0 {
        return Err(FitnessError::ZeroBaselineMean);
    }
    let r_loss = (baseline.final_loss - candidate.final_loss) / baseline.final_loss;
    let r_bench = (candidate.benchmark_mean - baseline.benchmark_mean) / baseline.benchmark_mean;
    Ok((r_loss, r_bench))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LeakageVerdict {
    pub r_loss: f64,
    pub r_bench: f64,
    pub leakage: bool,
}

/// Leakage iff the loss improvement is strictly greater than 10%.
pub fn leakage_check(
    candidate: &MetricsReport,
    baseline: &MetricsReport,
) -> Result<LeakageVerdict, FitnessError> {
    let (r_loss, r_bench) = deltas(candidate, baseline)?;
    Ok(LeakageVerdict {
        r_loss,
        r_bench,
        leakage: r_loss > LEAKAGE_THRESHOLD,
    })
}

/// Mean of the three components. Deltas are left at zero; see [`FitnessBreakdown::score`].
pub fn composite_fitness(
    sig_loss: f64,
    sig_bench: f64,
    judge10: f64,
) -> Result<FitnessBreakdown, FitnessError> {
    for c in [sig_loss, sig_bench] {
        if !(c > 0.0 && c < 1.0) {
            return Err(FitnessError::ComponentOutOfRange(c));
        }
    }
    if !(JUDGE_MIN..=JUDGE_MAX).contains(&judge10) {
        return Err(FitnessError::JudgeOutOfRange(judge10));
    }
    let judge_norm = judge10 / 10.0;
    Ok(FitnessBreakdown {
        r_loss: 0.0,
        r_bench: 0.0,
        sig_loss,
        sig_bench,
        judge10,
        judge_norm,
        composite: (sig_loss + sig_bench + judge_norm) / 3.0,
        leakage: false,
    })
}

/// Clamp a provider-supplied judge score into [1, 10], logging when it had to move.
pub fn clamp_judge(raw: f64) -> f64 {
    let clamped = raw.clamp(JUDGE_MIN, JUDGE_MAX);
    if clamped != raw {
        tracing::warn!(raw, clamped, "judge score outside [1, 10]; clamped");
    }
    clamped
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::MetricsReport;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn report(final_loss: f64, scores: &[(&str, f64)]) -> MetricsReport {
        let scores: BTreeMap<String, f64> =
            scores.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        MetricsReport::new(vec![(1, 10.0), (2000, final_loss)], scores).unwrap()
    }

    const DELTA_NET_SCORES: [(&str, f64); 12] = [
        ("arc_challenge", 0.168),
        ("arc_easy", 0.324),
        ("boolq", 0.364),
        ("fda", 0.0),
        ("hellaswag", 0.296),
        ("lambada_openai", 0.002),
        ("openbookqa", 0.136),
        ("piqa", 0.526),
        ("social_iqa", 0.354),
        ("squad_completion", 0.002),
        ("swde", 0.008),
        ("winogrande", 0.504),
    ];
    const GATED_DELTA_NET_SCORES: [(&str, f64); 12] = [
        ("arc_challenge", 0.168),
        ("arc_easy", 0.374),
        ("boolq", 0.37),
        ("fda", 0.0),
        ("hellaswag", 0.282),
        ("lambada_openai", 0.002),
        ("openbookqa", 0.144),
        ("piqa", 0.562),
        ("social_iqa", 0.35),
        ("squad_completion", 0.004),
        ("swde", 0.002),
        ("winogrande", 0.456),
    ];

    #[test]
    fn component_anchor_values() {
        assert_eq!(quantitative_component(0.0).unwrap(), 0.5);
        assert_eq!(quantitative_component(0.10).unwrap(), 0.9);
        assert_eq!(quantitative_component(-0.10).unwrap(), 0.1);
        assert_eq!(
            quantitative_component(0.15).unwrap(),
            quantitative_component(0.10).unwrap()
        );
    }

    #[test]
    fn component_interior_value() {
        // mpmath, 40 digits: 1/(1+exp(-ln(9)/0.1*0.0601)) = 0.78927019901488970280...
        let got = quantitative_component(0.0601).unwrap();
        assert!((got - 0.789_270_199_014_889_7).abs() < 1e-12, "{got}");
        assert!((got - 0.7893).abs() < 5e-5);
    }

    #[test]
    fn non_finite_delta_rejected() {
        assert!(matches!(
            quantitative_component(f64::NAN),
            Err(FitnessError::NonFinite(_))
        ));
        assert!(quantitative_component(f64::INFINITY).is_err());
    }

    #[test]
    fn deltas_identity_and_baseline_table_values() {
        let base = report(4.5749, &DELTA_NET_SCORES);
        assert_eq!(deltas(&base, &base).unwrap(), (0.0, 0.0));

        let cand = report(4.3, &DELTA_NET_SCORES);
        let (r_loss, _) = deltas(&cand, &base).unwrap();
        // (4.5749 - 4.3) / 4.5749 = 0.0600887451...
        assert!((r_loss - 0.060_088_745_109_182_71).abs() < 1e-12);

        let gated = report(4.5678, &GATED_DELTA_NET_SCORES);
        assert!((base.benchmark_mean - 0.223_666_666_666_666_67).abs() < 1e-12);
        assert!((gated.benchmark_mean - 0.226_166_666_666_666_67).abs() < 1e-12);
        let (_, r_bench) = deltas(&gated, &base).unwrap();
        // mpmath: (0.2261666.. - 0.2236666..) / 0.2236666.. = 0.0111773472429210134...
        assert!((r_bench - 0.011_177_347_242_921_013).abs() < 1e-12);
        assert!((r_bench - 0.01118).abs() < 5e-6);
    }

    #[test]
    fn deltas_reject_bad_baselines() {
        let base = report(4.5749, &DELTA_NET_SCORES);
        let other = report(4.5, &[("piqa", 0.5)]);
        assert!(matches!(
            deltas(&other, &base),
            Err(FitnessError::TaskSetMismatch(_))
        ));
        let zero = report(4.5, &[("piqa", 0.0)]);
        let cand = report(4.4, &[("piqa", 0.1)]);
        assert_eq!(deltas(&cand, &zero), Err(FitnessError::ZeroBaselineMean));
    }

    #[test]
    fn leakage_rule_is_strict() {
        let base = report(4.5749, &DELTA_NET_SCORES);
        let leaky = report(4.0, &DELTA_NET_SCORES);
        let v = leakage_check(&leaky, &base).unwrap();
        assert!((v.r_loss - 0.125_663_948_938_774_6).abs() < 1e-12);
        assert!(v.leakage);

        assert!(!leakage_check(&base, &base).unwrap().leakage);

        // Baseline chosen so that 0.9x is exact in binary and the ratio is exactly 0.10.
        let b = report(10.0, &[("piqa", 0.5)]);
        let c = report(9.0, &[("piqa", 0.5)]);
        let v = leakage_check(&c, &b).unwrap();
        assert_eq!(v.r_loss, 0.1);
        assert!(!v.leakage);
    }

    #[test]
    fn composite_examples() {
        assert_eq!(composite_fitness(0.5, 0.5, 5.0).unwrap().composite, 0.5);
        let top = composite_fitness(0.9, 0.9, 10.0).unwrap().composite;
        assert!((top - 2.8 / 3.0).abs() < 1e-15);
        // (0.7893 + 0.5611 + 0.7) / 3 = 0.683466...
        let mid = composite_fitness(0.7893, 0.5611, 7.0).unwrap().composite;
        assert!((mid - 0.683_466_666_666_666_7).abs() < 1e-12);
        assert!((mid - 0.6835).abs() < 5e-5);
    }

    #[test]
    fn composite_rejects_bad_judge() {
        assert_eq!(
            composite_fitness(0.5, 0.5, 0.5),
            Err(FitnessError::JudgeOutOfRange(0.5))
        );
        assert!(composite_fitness(0.5, 0.5, 11.0).is_err());
        assert!(composite_fitness(1.0, 0.5, 5.0).is_err());
    }

    #[test]
    fn clamp_judge_bounds() {
        assert_eq!(clamp_judge(12.0), 10.0);
        assert_eq!(clamp_judge(0.0), 1.0);
        assert_eq!(clamp_judge(7.0), 7.0);
    }

    #[test]
    fn leaked_breakdown_is_flagged() {
        let b = FitnessBreakdown::leaked(0.12, 0.01).unwrap();
        assert!(b.leakage);
        assert_eq!(b.sig_loss, quantitative_component(0.10).unwrap());
    }

    proptest! {
        #[test]
        fn symmetric_inside_window(d in -0.10f64..=0.10) {
            let lhs = quantitative_component(-d).unwrap();
            let rhs = 1.0 - quantitative_component(d).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12);
        }

        #[test]
        fn clipped_outside_window(d in 0.10f64..1e6) {
            prop_assert_eq!(quantitative_component(d).unwrap(), quantitative_component(0.10).unwrap());
            prop_assert_eq!(quantitative_component(-d).unwrap(), quantitative_component(-0.10).unwrap());
        }

        #[test]
        fn strictly_increasing_inside_window(a in -0.0999f64..0.0999, step in 1e-6f64..1e-3) {
            let b = (a + step).min(0.10);
            prop_assert!(quantitative_component(b).unwrap() > quantitative_component(a).unwrap());
        }

        #[test]
        fn composite_range_and_monotonicity(
            l in -0.2f64..0.2, b in -0.2f64..0.2, j in 1.0f64..9.5, bump in 0.01f64..0.5,
        ) {
            let sl = quantitative_component(l).unwrap();
            let sb = quantitative_component(b).unwrap();
            let base = composite_fitness(sl, sb, j).unwrap().composite;
            prop_assert!(base >= 0.1 - 1e-15 && base <= 2.8 / 3.0 + 1e-15);
            prop_assert!(composite_fitness(sl, sb, j + bump).unwrap().composite > base);
            let sl2 = (sl + bump / 10.0).min(0.9);
            if sl2 > sl {
                prop_assert!(composite_fitness(sl2, sb, j).unwrap().composite > base);
            }
        }
    }
}
