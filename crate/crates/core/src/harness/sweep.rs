//! Parameter sweeps producing accuracy-vs-compression curves as CSV.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::harness::eval::{evaluate, EvalResult};
use crate::harness::tasks::{Task, TaskKind};
use crate::model::Weights;
use crate::numerics::Scalar;
use crate::policies::Policy;
use crate::surrogate::Surrogate;

pub const CSV_HEADER: &str = "task_kind,policy,param_name,param_value,seed,accuracy,removed_fraction,compression_factor,live_bytes,resident_bytes";

/// One grid point: the swept parameter's name/value plus the concrete policy.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub param_name: String,
    pub param_value: f64,
    pub policy: Policy,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub point: SweepPoint,
    pub result: EvalResult,
}

/// Evaluate every grid point on the same task list; outcomes are sorted by
/// mean removed fraction so the CSV reads as a curve.
pub fn sweep<F: Scalar>(
    weights: &Weights<F>,
    surrogate: Option<&Surrogate>,
    points: &[SweepPoint],
    tasks: &[Task],
) -> Result<Vec<SweepOutcome>> {
    if points.is_empty() {
        return Err(Error::Config("empty sweep grid".into()));
    }
    let mut outcomes = Vec::with_capacity(points.len());
    for point in points {
        let result = evaluate(weights, &point.policy, surrogate, tasks)?;
        outcomes.push(SweepOutcome {
            point: point.clone(),
            result,
        });
    }
    outcomes.sort_by(|a, b| {
        a.result
            .removed_fraction_mean
            .partial_cmp(&b.result.removed_fraction_mean)
            .expect("finite fractions")
    });
    Ok(outcomes)
}

fn kind_label(kind: TaskKind) -> &'static str {
    match kind {
        TaskKind::Copy => "copy",
        TaskKind::KvLookup => "kv_lookup",
    }
}

/// One CSV row per task per grid point, fixed column order.
pub fn sweep_csv(outcomes: &[SweepOutcome]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for o in outcomes {
        for r in &o.result.per_task {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                kind_label(r.kind),
                o.result.policy,
                o.point.param_name,
                o.point.param_value,
                r.seed,
                r.accuracy,
                r.removed_fraction,
                r.compression_factor,
                r.live_bytes,
                r.resident_bytes
            )
            .expect("string write");
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::tasks::gen_copy_task;
    use crate::model::{init_weights, ModelConfig};
    use crate::rng::SplitMix64;
    use crate::surrogate::{LayerParams, SurrogateKind};
    use crate::numerics::Tensor;

    fn random_surrogate(cfg: &ModelConfig, seed: u64) -> Surrogate {
        let mut rng = SplitMix64::new(seed);
        Surrogate {
            kind: SurrogateKind::Linear,
            hidden_dim: cfg.hidden_dim,
            kv_heads: cfg.kv_heads,
            layers: (0..cfg.layers)
                .map(|_| LayerParams::Linear {
                    w: Tensor::fill_with(vec![cfg.hidden_dim, cfg.kv_heads], || rng.next_normal()),
                    b: (0..cfg.kv_heads).map(|_| rng.next_normal()).collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn singleton_grid_equals_plain_evaluate() {
        let cfg = ModelConfig::tiny(3);
        let w = init_weights::<f64>(&cfg).unwrap();
        let tasks: Vec<Task> = (0..5).map(|s| gen_copy_task(&cfg, s, 5).unwrap()).collect();
        let policy = Policy::WindowOnly { window: 2 };
        let points = [SweepPoint {
            param_name: "window".into(),
            param_value: 2.0,
            policy: policy.clone(),
        }];
        let outcomes = sweep(&w, None, &points, &tasks).unwrap();
        let direct = evaluate(&w, &policy, None, &tasks).unwrap();
        assert_eq!(outcomes.len(), 1);
        assert_eq!(outcomes[0].result.accuracy, direct.accuracy);
        assert_eq!(
            outcomes[0].result.removed_fraction_mean,
            direct.removed_fraction_mean
        );
    }

    #[test]
    fn tau_grid_gives_monotone_fractions() {
        let cfg = ModelConfig::tiny(5);
        let w = init_weights::<f64>(&cfg).unwrap();
        let surr = random_surrogate(&cfg, 6);
        let tasks: Vec<Task> = (0..4).map(|s| gen_copy_task(&cfg, s, 6).unwrap()).collect();
        let points: Vec<SweepPoint> = [-4.0, -2.0, 0.0, 2.0, 4.0]
            .iter()
            .map(|&tau| SweepPoint {
                param_name: "tau".into(),
                param_value: tau,
                policy: Policy::Kvzap { tau, window: 2 },
            })
            .collect();
        let outcomes = sweep(&w, Some(&surr), &points, &tasks).unwrap();
        // sorted output: fractions non-decreasing, and the sort agrees with
        // tau order because eviction is monotone in tau
        for pair in outcomes.windows(2) {
            assert!(
                pair[1].result.removed_fraction_mean >= pair[0].result.removed_fraction_mean
            );
            assert!(pair[1].point.param_value >= pair[0].point.param_value);
        }
    }

    #[test]
    fn empty_grid_rejected() {
        let cfg = ModelConfig::tiny(3);
        let w = init_weights::<f64>(&cfg).unwrap();
        assert!(matches!(
            sweep(&w, None, &[], &[]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn csv_has_fixed_header_and_row_count() {
        let cfg = ModelConfig::tiny(3);
        let w = init_weights::<f64>(&cfg).unwrap();
        let tasks: Vec<Task> = (0..3).map(|s| gen_copy_task(&cfg, s, 5).unwrap()).collect();
        let points = [
            SweepPoint {
                param_name: "window".into(),
                param_value: 1.0,
                policy: Policy::WindowOnly { window: 1 },
            },
            SweepPoint {
                param_name: "window".into(),
                param_value: 3.0,
                policy: Policy::WindowOnly { window: 3 },
            },
        ];
        let outcomes = sweep(&w, None, &points, &tasks).unwrap();
        let csv = sweep_csv(&outcomes);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        assert_eq!(csv.lines().count(), 1 + 2 * 3);
        assert!(csv.contains("copy,window_only,window,"));
    }
}
