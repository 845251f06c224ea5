//! Fixed-set iteration and its stability diagnostics.
//!
//! One iteration applies a full unify / trigger / decouple round to a
//! constant set of deltas. Under two measurable assumptions (the relative
//! order of the rescalers stays fixed between steps, and every pair of
//! masks overlaps) the set converges to a unique fixed point and the mean
//! L1 step difference goes to zero. The assumptions are computed per run
//! and recorded in the trace rather than taken on faith; stability
//! assertions downstream are conditional on them, while sign and norm
//! preservation hold unconditionally.

use std::fmt::Write as _;

use crate::fusion_core::{compute_trigger, decouple, unify, DeltaModel, FusionError};
use crate::triggers::PackedMask;

/// Per-step trace record.
#[derive(Debug, Clone)]
pub struct StepRecord {
    /// 1-based iteration index.
    pub step: usize,
    /// Rescaler per task, computed against this step's unified delta.
    pub lambdas: Vec<f64>,
    /// Set bits per task mask.
    pub popcounts: Vec<usize>,
    /// Mean L1 difference from the previous set, `(1/n) sum ||d_i' - d_i||_1`.
    pub mean_l1_diff: f64,
    /// True when the rescaler ordering matches the previous step's
    /// (trivially true at step 1).
    pub lambda_order_stable: bool,
    /// True when every pair of masks shares at least one set bit.
    pub masks_overlap: bool,
}

/// Full history of an [`iterate_until`] run.
#[derive(Debug, Clone)]
pub struct IterationTrace {
    /// The input set, before any iteration.
    pub initial: Vec<Vec<f64>>,
    /// Value snapshots after each step; `snapshots[j][i]` is task `i`
    /// after step `j + 1`.
    pub snapshots: Vec<Vec<Vec<f64>>>,
    /// Masks used at each step.
    pub masks: Vec<Vec<PackedMask>>,
    pub steps: Vec<StepRecord>,
}

impl IterationTrace {
    pub fn task_count(&self) -> usize {
        self.initial.len()
    }

    /// True when both assumption flags held at every recorded step.
    pub fn assumptions_held(&self) -> bool {
        self.steps
            .iter()
            .all(|s| s.lambda_order_stable && s.masks_overlap)
    }

    pub fn final_mean_l1_diff(&self) -> f64 {
        self.steps.last().map(|s| s.mean_l1_diff).unwrap_or(0.0)
    }

    /// CSV export: one row per step with per-task rescalers and popcounts.
    pub fn to_csv(&self) -> String {
        let n = self.task_count();
        let mut out = String::from("step,mean_l1_diff");
        for i in 0..n {
            write!(out, ",lambda_{i}").unwrap();
        }
        for i in 0..n {
            write!(out, ",popcount_{i}").unwrap();
        }
        out.push_str(",lambda_order_stable,masks_overlap\n");
        for s in &self.steps {
            write!(out, "{},{}", s.step, s.mean_l1_diff).unwrap();
            for l in &s.lambdas {
                write!(out, ",{l}").unwrap();
            }
            for p in &s.popcounts {
                write!(out, ",{p}").unwrap();
            }
            writeln!(out, ",{},{}", s.lambda_order_stable, s.masks_overlap).unwrap();
        }
        out
    }

    /// Line-oriented text report.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "fixed-set iteration: {} tasks, {} steps, assumptions {}\n",
            self.task_count(),
            self.steps.len(),
            if self.assumptions_held() {
                "held"
            } else {
                "violated"
            }
        );
        for s in &self.steps {
            writeln!(
                out,
                "step {:>4}  mean_l1_diff {:>12.6e}  lambdas [{}]  popcounts [{}]{}",
                s.step,
                s.mean_l1_diff,
                s.lambdas
                    .iter()
                    .map(|l| format!("{l:.6}"))
                    .collect::<Vec<_>>()
                    .join(", "),
                s.popcounts
                    .iter()
                    .map(|p| p.to_string())
                    .collect::<Vec<_>>()
                    .join(", "),
                if s.lambda_order_stable && s.masks_overlap {
                    ""
                } else {
                    "  [flag]"
                }
            )
            .unwrap();
        }
        out
    }
}

/// One unify / trigger / decouple round over the whole set. Task order is
/// preserved.
pub fn iterate_once(deltas: &[DeltaModel]) -> Result<Vec<DeltaModel>, FusionError> {
    Ok(iterate_once_traced(deltas)?.0)
}

type TracedStep = (Vec<DeltaModel>, Vec<f64>, Vec<PackedMask>);

/// As [`iterate_once`], also returning the rescalers and masks used.
fn iterate_once_traced(deltas: &[DeltaModel]) -> Result<TracedStep, FusionError> {
    let unified = unify(deltas)?;
    let mut out = Vec::with_capacity(deltas.len());
    let mut lambdas = Vec::with_capacity(deltas.len());
    let mut masks = Vec::with_capacity(deltas.len());
    for d in deltas {
        let trigger = compute_trigger(d, &unified)?;
        out.push(decouple(&unified, &trigger)?);
        lambdas.push(trigger.lambda);
        masks.push(trigger.mask);
    }
    Ok((out, lambdas, masks))
}

/// Stable task ordering by rescaler value, ties by task position.
fn lambda_order(lambdas: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..lambdas.len()).collect();
    order.sort_by(|&a, &b| {
        lambdas[a]
            .partial_cmp(&lambdas[b])
            .expect("rescalers are finite")
            .then(a.cmp(&b))
    });
    order
}

fn pairwise_masks_overlap(masks: &[PackedMask]) -> bool {
    for i in 0..masks.len() {
        for j in i + 1..masks.len() {
            if !masks[i].intersects(&masks[j]) {
                return false;
            }
        }
    }
    true
}

fn mean_l1_diff(prev: &[DeltaModel], next: &[DeltaModel]) -> f64 {
    let total: f64 = prev
        .iter()
        .zip(next)
        .map(|(p, n)| {
            p.vec
                .values()
                .iter()
                .zip(n.vec.values())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
        })
        .sum();
    total / prev.len() as f64
}

/// Iterates until the mean L1 step difference drops below `eps` or
/// `max_steps` is reached, recording a full trace.
pub fn iterate_until(
    deltas: &[DeltaModel],
    eps: f64,
    max_steps: usize,
) -> Result<(Vec<DeltaModel>, IterationTrace), FusionError> {
    if deltas.is_empty() {
        return Err(FusionError::EmptyInput);
    }
    let mut trace = IterationTrace {
        initial: deltas.iter().map(|d| d.vec.values().to_vec()).collect(),
        snapshots: Vec::new(),
        masks: Vec::new(),
        steps: Vec::new(),
    };
    let mut current: Vec<DeltaModel> = deltas.to_vec();
    let mut prev_order: Option<Vec<usize>> = None;
    for step in 1..=max_steps.max(1) {
        let (next, lambdas, masks) = iterate_once_traced(&current)?;
        let diff = mean_l1_diff(&current, &next);
        let order = lambda_order(&lambdas);
        let lambda_order_stable = prev_order.as_ref().map(|p| *p == order).unwrap_or(true);
        let masks_overlap = pairwise_masks_overlap(&masks);
        trace.steps.push(StepRecord {
            step,
            lambdas,
            popcounts: masks.iter().map(|m| m.popcount()).collect(),
            mean_l1_diff: diff,
            lambda_order_stable,
            masks_overlap,
        });
        trace
            .snapshots
            .push(next.iter().map(|d| d.vec.values().to_vec()).collect());
        trace.masks.push(masks);
        prev_order = Some(order);
        current = next;
        if diff < eps {
            break;
        }
    }
    Ok((current, trace))
}

/// Where a stability violation was first observed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SignViolation {
    /// Mask bit differs from the step-1 mask.
    MaskChanged {
        step: usize,
        task: usize,
        element: usize,
    },
    /// An element changed sign between consecutive snapshots.
    SignFlip {
        step: usize,
        task: usize,
        element: usize,
    },
    /// A zero element became nonzero.
    ZeroResurrection {
        step: usize,
        task: usize,
        element: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignStabilityReport {
    pub pass: bool,
    pub violation: Option<SignViolation>,
}

/// Verifies, over a recorded trace, that every mask equals its step-1
/// value, no element ever changes sign, and zeros stay zero.
pub fn sign_stability_check(trace: &IterationTrace) -> SignStabilityReport {
    for (step_idx, masks) in trace.masks.iter().enumerate() {
        for (task, mask) in masks.iter().enumerate() {
            let first = &trace.masks[0][task];
            if mask != first {
                let element = (0..mask.bit_len())
                    .find(|&j| mask.get(j) != first.get(j))
                    .unwrap_or(0);
                return SignStabilityReport {
                    pass: false,
                    violation: Some(SignViolation::MaskChanged {
                        step: step_idx + 1,
                        task,
                        element,
                    }),
                };
            }
        }
    }
    let mut prev: &Vec<Vec<f64>> = &trace.initial;
    for (step_idx, snap) in trace.snapshots.iter().enumerate() {
        for (task, values) in snap.iter().enumerate() {
            for (element, (&before, &after)) in prev[task].iter().zip(values).enumerate() {
                if before == 0.0 && after != 0.0 {
                    return SignStabilityReport {
                        pass: false,
                        violation: Some(SignViolation::ZeroResurrection {
                            step: step_idx + 1,
                            task,
                            element,
                        }),
                    };
                }
                if before * after < 0.0 {
                    return SignStabilityReport {
                        pass: false,
                        violation: Some(SignViolation::SignFlip {
                            step: step_idx + 1,
                            task,
                            element,
                        }),
                    };
                }
            }
        }
        prev = snap;
    }
    SignStabilityReport {
        pass: true,
        violation: None,
    }
}

/// One record per added delta in a growing-set study.
#[derive(Debug, Clone)]
pub struct PerturbationRecord {
    /// Set size after the addition.
    pub task_count: usize,
    /// Mean L1 movement of the whole set over this round's iterations;
    /// the newly added delta is measured against its raw value.
    pub mean_l1_diff: f64,
    /// Mask bits that changed among the previously existing tasks
    /// (zero for the first round, where no earlier masks exist).
    pub mask_bits_changed: usize,
}

#[derive(Debug, Clone)]
pub struct PerturbationReport {
    pub records: Vec<PerturbationRecord>,
}

impl PerturbationReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task_count,mean_l1_diff,mask_bits_changed\n");
        for r in &self.records {
            writeln!(
                out,
                "{},{},{}",
                r.task_count, r.mean_l1_diff, r.mask_bits_changed
            )
            .unwrap();
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("growing-set perturbation study\n");
        for r in &self.records {
            writeln!(
                out,
                "n {:>3}  mean_l1_diff {:>12.6e}  mask bits changed {}",
                r.task_count, r.mean_l1_diff, r.mask_bits_changed
            )
            .unwrap();
        }
        out
    }
}

/// Grows the set one delta at a time, running `steps_per_add` iterations
/// after each addition, and records how much the existing tasks move.
/// The trend is reported for inspection, not asserted against a rate.
pub fn incremental_perturbation_study(
    initial: &[DeltaModel],
    additions: &[DeltaModel],
    steps_per_add: usize,
) -> Result<PerturbationReport, FusionError> {
    if additions.is_empty() {
        return Err(FusionError::EmptyInput);
    }
    let steps_per_add = steps_per_add.max(1);
    let mut current: Vec<DeltaModel> = initial.to_vec();
    let mut prev_masks: Option<Vec<PackedMask>> = None;
    let mut records = Vec::with_capacity(additions.len());
    for new_delta in additions {
        current.push(new_delta.clone());
        let before: Vec<Vec<f64>> = current.iter().map(|d| d.vec.values().to_vec()).collect();
        let mut masks = Vec::new();
        for _ in 0..steps_per_add {
            let (next, _, step_masks) = iterate_once_traced(&current)?;
            current = next;
            masks = step_masks;
        }
        let total: f64 = current
            .iter()
            .zip(&before)
            .map(|(d, b)| {
                d.vec
                    .values()
                    .iter()
                    .zip(b)
                    .map(|(a, x)| (a - x).abs())
                    .sum::<f64>()
            })
            .sum();
        let mask_bits_changed = match &prev_masks {
            None => 0,
            Some(prev) => prev
                .iter()
                .zip(&masks)
                .map(|(old, new)| {
                    (0..old.bit_len())
                        .filter(|&j| old.get(j) != new.get(j))
                        .count()
                })
                .sum(),
        };
        records.push(PerturbationRecord {
            task_count: current.len(),
            mean_l1_diff: total / current.len() as f64,
            mask_bits_changed,
        });
        prev_masks = Some(masks);
    }
    Ok(PerturbationReport { records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive_seed, GaussianRng};
    use crate::tensor_store::{Dtype, FlatVector, TensorLayout};
    use std::sync::Arc;

    fn delta(values: &[f64], task_id: u32) -> DeltaModel {
        let layout = Arc::new(TensorLayout::vector("p", values.len() as u32));
        DeltaModel {
            vec: FlatVector::new(layout, values.to_vec(), Dtype::R64).unwrap(),
            task_id,
        }
    }

    fn random_set(seed: u64, n: usize, d: usize) -> Vec<DeltaModel> {
        let mut rng = GaussianRng::new(seed);
        (0..n)
            .map(|i| delta(&rng.normal_vec(d), i as u32))
            .collect()
    }

    #[test]
    fn two_vector_example_iterates_to_known_values() {
        let set = vec![delta(&[1.0, -2.0], 0), delta(&[3.0, -1.0], 1)];
        let out = iterate_once(&set).unwrap();
        let expect = [[1.8, -1.2], [2.4, -1.6]];
        for (d, e) in out.iter().zip(expect) {
            for (a, b) in d.vec.values().iter().zip(e) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }

        // A second application reproduces the set: fixed point in one step.
        let again = iterate_once(&out).unwrap();
        for (d, e) in again.iter().zip(&out) {
            for (a, b) in d.vec.values().iter().zip(e.vec.values()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_delta_set_is_identity() {
        let set = vec![delta(&[0.5, -0.25, 0.0], 0)];
        let out = iterate_once(&set).unwrap();
        assert_eq!(out[0].vec.values(), set[0].vec.values());
    }

    #[test]
    fn iterate_until_reaches_fixed_point_at_step_two() {
        let set = vec![delta(&[1.0, -2.0], 0), delta(&[3.0, -1.0], 1)];
        let (_, trace) = iterate_until(&set, 1e-12, 50).unwrap();
        assert_eq!(trace.steps.len(), 2);
        assert!(trace.steps[1].mean_l1_diff <= 1e-12);
        assert!(trace.assumptions_held());
    }

    #[test]
    fn duplicated_deltas_fix_immediately() {
        let set = vec![delta(&[1.0, -2.0], 0), delta(&[1.0, -2.0], 1)];
        let (out, trace) = iterate_until(&set, 1e-12, 50).unwrap();
        assert_eq!(trace.steps.len(), 1);
        assert_eq!(trace.steps[0].mean_l1_diff, 0.0);
        for d in &out {
            assert_eq!(d.vec.values(), set[0].vec.values());
        }
        for s in &trace.steps {
            assert!(s.lambdas.iter().all(|&l| l == 1.0));
        }
    }

    #[test]
    fn popcounts_never_increase() {
        for seed in 0..10 {
            let set = random_set(seed, 4, 200);
            let (_, trace) = iterate_until(&set, 0.0, 30).unwrap();
            for task in 0..4 {
                let mut prev = usize::MAX;
                for s in &trace.steps {
                    assert!(s.popcounts[task] <= prev);
                    prev = s.popcounts[task];
                }
            }
        }
    }

    #[test]
    fn mean_l1_diff_is_non_increasing_when_flags_hold() {
        let mut held = 0;
        for seed in 0..30u64 {
            let set = random_set(derive_seed(31, seed), 2 + (seed % 5) as usize, 500);
            let (_, trace) = iterate_until(&set, 1e-10, 80).unwrap();
            if !trace.assumptions_held() {
                continue;
            }
            held += 1;
            for w in trace.steps.windows(2).skip(1) {
                assert!(
                    w[1].mean_l1_diff <= w[0].mean_l1_diff,
                    "seed {seed}: step {} rose from {} to {}",
                    w[1].step,
                    w[0].mean_l1_diff,
                    w[1].mean_l1_diff
                );
            }
        }
        assert!(held > 0, "no flag-holding instances sampled");
    }

    #[test]
    fn sign_stability_passes_on_real_trace() {
        let set = vec![delta(&[1.0, -2.0], 0), delta(&[3.0, -1.0], 1)];
        let (_, trace) = iterate_until(&set, 1e-12, 50).unwrap();
        assert!(sign_stability_check(&trace).pass);

        for seed in 100..110 {
            let set = random_set(seed, 5, 300);
            let (_, trace) = iterate_until(&set, 1e-10, 60).unwrap();
            if trace.assumptions_held() {
                let report = sign_stability_check(&trace);
                assert!(report.pass, "seed {seed}: {:?}", report.violation);
            }
        }
    }

    #[test]
    fn sign_stability_flags_edited_trace() {
        let set = vec![delta(&[1.0, -2.0], 0), delta(&[3.0, -1.0], 1)];
        let (_, mut trace) = iterate_until(&set, 1e-12, 50).unwrap();
        let last = trace.masks.len() - 1;
        let bit = trace.masks[last][1].get(0);
        trace.masks[last][1].set(0, !bit);
        let report = sign_stability_check(&trace);
        assert!(!report.pass);
        assert_eq!(
            report.violation,
            Some(SignViolation::MaskChanged {
                step: last + 1,
                task: 1,
                element: 0
            })
        );
    }

    #[test]
    fn l1_norms_preserved_through_iterations() {
        for seed in 0..20 {
            let set = random_set(seed + 500, 5, 400);
            let norms: Vec<f64> = set.iter().map(|d| d.vec.l1_norm()).collect();
            let mut current = set;
            for _ in 0..20 {
                current = iterate_once(&current).unwrap();
                for (d, &n0) in current.iter().zip(&norms) {
                    let rel = (d.vec.l1_norm() - n0).abs() / n0;
                    assert!(rel < 1e-9, "seed {seed} rel {rel}");
                }
            }
        }
    }

    #[test]
    fn adding_zero_delta_changes_nothing() {
        let initial = random_set(3, 3, 100);
        let zero = delta(&vec![0.0; 100], 3);
        let mut with_zero = initial.clone();
        with_zero.push(zero.clone());

        // Existing tasks iterate bit-identically with or without the
        // zero delta, and the zero delta stays zero.
        let plain = iterate_once(&initial).unwrap();
        let padded = iterate_once(&with_zero).unwrap();
        for (a, b) in plain.iter().zip(&padded) {
            for (x, y) in a.vec.values().iter().zip(b.vec.values()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert!(padded[3].vec.values().iter().all(|&x| x == 0.0));

        // So the zero task contributes nothing to the recorded mean.
        let report = incremental_perturbation_study(&initial, &[zero], 1).unwrap();
        let moved: f64 = plain
            .iter()
            .zip(&initial)
            .map(|(a, b)| {
                a.vec
                    .values()
                    .iter()
                    .zip(b.vec.values())
                    .map(|(x, y)| (x - y).abs())
                    .sum::<f64>()
            })
            .sum();
        assert!((report.records[0].mean_l1_diff - moved / 4.0).abs() < 1e-12);
    }

    #[test]
    fn duplicate_addition_keeps_survivor_mask_bits() {
        let initial = random_set(8, 3, 120);
        let (settled, trace) = iterate_until(&initial, 1e-12, 100).unwrap();
        let dup_source = 1usize;
        let raw = &initial[dup_source];
        let survivors: Vec<usize> = (0..120)
            .filter(|&j| settled[dup_source].vec.values()[j] != 0.0)
            .collect();
        assert!(!survivors.is_empty());
        let _ = trace;

        let mut grown = settled.clone();
        grown.push(DeltaModel {
            vec: raw.vec.clone(),
            task_id: 3,
        });
        let unified = unify(&grown).unwrap();
        let trig = compute_trigger(&grown[dup_source], &unified).unwrap();
        for &j in &survivors {
            assert!(
                trig.mask.get(j),
                "survivor bit {j} lost after duplicate add"
            );
        }
    }

    #[test]
    fn perturbation_study_reports_growing_sets() {
        let mut rng = GaussianRng::new(77);
        let d = 200;
        let initial = vec![delta(&rng.normal_vec(d), 0)];
        let additions: Vec<DeltaModel> = (1..8)
            .map(|i| delta(&rng.normal_vec(d), i as u32))
            .collect();
        let report = incremental_perturbation_study(&initial, &additions, 1).unwrap();
        assert_eq!(report.records.len(), 7);
        for (idx, r) in report.records.iter().enumerate() {
            assert_eq!(r.task_count, idx + 2);
            assert!(r.mean_l1_diff >= 0.0);
        }
        let csv = report.to_csv();
        assert!(csv.lines().count() == 8);
    }

    #[test]
    fn trace_exports_are_well_formed() {
        let set = vec![delta(&[1.0, -2.0], 0), delta(&[3.0, -1.0], 1)];
        let (_, trace) = iterate_until(&set, 1e-12, 50).unwrap();
        let csv = trace.to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "step,mean_l1_diff,lambda_0,lambda_1,popcount_0,popcount_1,lambda_order_stable,masks_overlap"
        );
        assert_eq!(csv.lines().count(), trace.steps.len() + 1);
        assert!(trace.to_text().contains("fixed-set iteration"));
    }
}
