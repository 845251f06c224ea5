//! Delta construction, sign-election unification, trigger computation,
//! decoupling, and the per-session continual update.
//!
//! Unification elects, per element, the extreme value whose sign agrees
//! with the elementwise sum of all deltas; it never invents a magnitude.
//! A task's trigger records where the task agreed with the election (the
//! mask) and one scalar that restores the task's L1 norm (the rescaler).
//! Decoupling applies the trigger back to the unified vector.
//!
//! All reductions run sequentially in index order in 64-bit floats, so
//! identical inputs give bit-identical outputs across runs and thread
//! counts.

use thiserror::Error;

use crate::routing::PrototypeSet;
use crate::tensor_store::{Dtype, FlatVector};
use crate::triggers::{mask_apply, PackedMask, TaskTrigger};

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("delta list is empty")]
    EmptyInput,
    #[error("operands have different tensor layouts")]
    LayoutMismatch,
    #[error("mask covers {mask_bits} elements but the vector has {vector_len}")]
    LengthMismatch { mask_bits: usize, vector_len: usize },
}

impl FusionError {
    pub fn name(&self) -> &'static str {
        match self {
            FusionError::EmptyInput => "EmptyInput",
            FusionError::LayoutMismatch => "LayoutMismatch",
            FusionError::LengthMismatch { .. } => "LengthMismatch",
        }
    }
}

/// Parameter offset of one fine-tuned model relative to the base model.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaModel {
    pub vec: FlatVector,
    pub task_id: u32,
}

/// Election result over one or more deltas. Every element equals some
/// contributing delta's element at that position, or zero.
#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedDelta {
    pub vec: FlatVector,
    pub task_count: usize,
}

/// The entire memory of the continual learner: one unified delta, one
/// trigger per seen task, and the per-task prototype sets.
///
/// `prototypes` is either empty (fusion-only state, as produced by the
/// CLI from bare delta files) or has exactly one set per task.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionState {
    pub base_hash: [u8; 32],
    pub unified: UnifiedDelta,
    pub triggers: Vec<TaskTrigger>,
    pub prototypes: Vec<PrototypeSet>,
}

impl SessionState {
    pub fn task_count(&self) -> usize {
        self.unified.task_count
    }

    /// Checks the structural invariants; used after deserialization.
    pub fn validate(&self) -> Result<(), FusionError> {
        if self.triggers.len() != self.unified.task_count {
            return Err(FusionError::LengthMismatch {
                mask_bits: self.triggers.len(),
                vector_len: self.unified.task_count,
            });
        }
        if !self.prototypes.is_empty() && self.prototypes.len() != self.unified.task_count {
            return Err(FusionError::LengthMismatch {
                mask_bits: self.prototypes.len(),
                vector_len: self.unified.task_count,
            });
        }
        for t in &self.triggers {
            if t.mask.bit_len() != self.unified.vec.len() {
                return Err(FusionError::LengthMismatch {
                    mask_bits: t.mask.bit_len(),
                    vector_len: self.unified.vec.len(),
                });
            }
        }
        Ok(())
    }
}

/// Elementwise offset `theta - theta0`.
pub fn delta_from(
    theta: &FlatVector,
    theta0: &FlatVector,
    task_id: u32,
) -> Result<DeltaModel, FusionError> {
    if !theta.same_layout(theta0) {
        return Err(FusionError::LayoutMismatch);
    }
    let values = theta
        .values()
        .iter()
        .zip(theta0.values())
        .map(|(a, b)| a - b)
        .collect();
    Ok(DeltaModel {
        vec: FlatVector::from_raw(theta.layout_arc(), values, Dtype::R64),
        task_id,
    })
}

/// Sign-election unification.
///
/// Per element: let `S` be the sum over all deltas. `S > 0` elects the
/// maximum, `S < 0` elects the minimum, and an exactly cancelled sum
/// elects zero. The sum runs left to right in list order.
pub fn unify(deltas: &[DeltaModel]) -> Result<UnifiedDelta, FusionError> {
    let first = deltas.first().ok_or(FusionError::EmptyInput)?;
    for d in &deltas[1..] {
        if !d.vec.same_layout(&first.vec) {
            return Err(FusionError::LayoutMismatch);
        }
    }
    let len = first.vec.len();
    let mut values = vec![0.0f64; len];
    for (j, slot) in values.iter_mut().enumerate() {
        let mut sum = 0.0f64;
        let mut max = f64::NEG_INFINITY;
        let mut min = f64::INFINITY;
        for d in deltas {
            let x = d.vec.values()[j];
            sum += x;
            if x > max {
                max = x;
            }
            if x < min {
                min = x;
            }
        }
        *slot = if sum > 0.0 {
            max
        } else if sum < 0.0 {
            min
        } else {
            0.0
        };
    }
    Ok(UnifiedDelta {
        vec: FlatVector::from_raw(first.vec.layout_arc(), values, Dtype::R64),
        task_count: deltas.len(),
    })
}

/// Mask and rescaler for one task against a unified delta.
///
/// Mask bit `j` is set iff `delta[j] * unified[j] > 0`. The rescaler is
/// `sum |delta| / sum |mask * unified|`, or zero when the denominator is
/// zero (a fully disagreeing task reconstructs to the zero delta).
pub fn compute_trigger(
    delta: &DeltaModel,
    unified: &UnifiedDelta,
) -> Result<TaskTrigger, FusionError> {
    if !delta.vec.same_layout(&unified.vec) {
        return Err(FusionError::LayoutMismatch);
    }
    let mut bits = vec![false; delta.vec.len()];
    let mut numerator = 0.0f64;
    let mut denominator = 0.0f64;
    for (j, bit) in bits.iter_mut().enumerate() {
        let d = delta.vec.values()[j];
        let u = unified.vec.values()[j];
        numerator += d.abs();
        if d * u > 0.0 {
            *bit = true;
            denominator += u.abs();
        }
    }
    let lambda = if denominator > 0.0 {
        numerator / denominator
    } else {
        0.0
    };
    Ok(TaskTrigger::new(
        PackedMask::pack(&bits),
        lambda,
        delta.task_id,
    ))
}

/// Reconstructs a task delta: `lambda * mask * unified`.
pub fn decouple(unified: &UnifiedDelta, trigger: &TaskTrigger) -> Result<DeltaModel, FusionError> {
    let gated =
        mask_apply(&trigger.mask, &unified.vec).map_err(|_| FusionError::LengthMismatch {
            mask_bits: trigger.mask.bit_len(),
            vector_len: unified.vec.len(),
        })?;
    let values = gated.values().iter().map(|x| trigger.lambda * x).collect();
    Ok(DeltaModel {
        vec: FlatVector::from_raw(unified.vec.layout_arc(), values, Dtype::R64),
        task_id: trigger.task_id,
    })
}

/// Task-specific model: `theta0 + lambda * mask * unified`.
pub fn reconstruct_model(
    theta0: &FlatVector,
    unified: &UnifiedDelta,
    trigger: &TaskTrigger,
) -> Result<FlatVector, FusionError> {
    if !theta0.same_layout(&unified.vec) {
        return Err(FusionError::LayoutMismatch);
    }
    let delta = decouple(unified, trigger)?;
    let values = theta0
        .values()
        .iter()
        .zip(delta.vec.values())
        .map(|(a, b)| a + b)
        .collect();
    Ok(FlatVector::from_raw(
        theta0.layout_arc(),
        values,
        theta0.dtype(),
    ))
}

/// One continual-learning session.
///
/// With no prior state the new delta becomes the unified delta and gets a
/// self-trigger. Otherwise all previous task deltas are reconstructed
/// from the old state, unified together with the new delta, and every
/// trigger is recomputed against the new unified delta; the old triggers
/// are discarded. Prototype sets are carried over and the new one is
/// appended (or all are dropped if either side has none).
pub fn run_session(
    state: Option<&SessionState>,
    new_delta: &DeltaModel,
    new_prototypes: Option<PrototypeSet>,
    base_hash: [u8; 32],
) -> Result<SessionState, FusionError> {
    match state {
        None => {
            let unified = unify(std::slice::from_ref(new_delta))?;
            let trigger = compute_trigger(new_delta, &unified)?;
            Ok(SessionState {
                base_hash,
                unified,
                triggers: vec![trigger],
                prototypes: new_prototypes.into_iter().collect(),
            })
        }
        Some(prev) => {
            if !new_delta.vec.same_layout(&prev.unified.vec) {
                return Err(FusionError::LayoutMismatch);
            }
            let mut deltas = Vec::with_capacity(prev.task_count() + 1);
            for trigger in &prev.triggers {
                deltas.push(decouple(&prev.unified, trigger)?);
            }
            deltas.push(new_delta.clone());
            let unified = unify(&deltas)?;
            let triggers = deltas
                .iter()
                .map(|d| compute_trigger(d, &unified))
                .collect::<Result<Vec<_>, _>>()?;
            let prototypes = match (prev.prototypes.is_empty(), new_prototypes) {
                (false, Some(p)) => {
                    let mut all = prev.prototypes.clone();
                    all.push(p);
                    all
                }
                // A fusion-only state stays fusion-only.
                _ => Vec::new(),
            };
            Ok(SessionState {
                base_hash: prev.base_hash,
                unified,
                triggers,
                prototypes,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::GaussianRng;
    use crate::tensor_store::TensorLayout;
    use std::sync::Arc;

    fn delta(values: &[f64], task_id: u32) -> DeltaModel {
        let layout = Arc::new(TensorLayout::vector("p", values.len() as u32));
        DeltaModel {
            vec: FlatVector::new(layout, values.to_vec(), Dtype::R64).unwrap(),
            task_id,
        }
    }

    #[test]
    fn delta_from_subtracts_elementwise() {
        let layout = Arc::new(TensorLayout::vector("p", 2));
        let theta = FlatVector::new(Arc::clone(&layout), vec![2.0, 1.0], Dtype::R64).unwrap();
        let theta0 = FlatVector::new(layout, vec![1.0, 1.0], Dtype::R64).unwrap();
        let d = delta_from(&theta, &theta0, 0).unwrap();
        assert_eq!(d.vec.values(), &[1.0, 0.0]);

        let zero = delta_from(&theta0, &theta0, 0).unwrap();
        assert!(zero.vec.values().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn delta_from_matches_subtraction_oracle() {
        let mut rng = GaussianRng::new(11);
        let n = 256;
        let a = rng.normal_vec(n);
        let b = rng.normal_vec(n);
        let layout = Arc::new(TensorLayout::vector("p", n as u32));
        let theta = FlatVector::new(Arc::clone(&layout), a.clone(), Dtype::R64).unwrap();
        let theta0 = FlatVector::new(layout, b.clone(), Dtype::R64).unwrap();
        let d = delta_from(&theta, &theta0, 3).unwrap();
        for j in 0..n {
            assert_eq!(d.vec.values()[j], a[j] - b[j]);
        }
    }

    #[test]
    fn delta_from_rejects_layout_mismatch() {
        let a = FlatVector::new(
            Arc::new(TensorLayout::vector("p", 2)),
            vec![1.0, 2.0],
            Dtype::R64,
        )
        .unwrap();
        let b = FlatVector::new(
            Arc::new(TensorLayout::vector("q", 2)),
            vec![1.0, 2.0],
            Dtype::R64,
        )
        .unwrap();
        assert_eq!(delta_from(&a, &b, 0).unwrap_err().name(), "LayoutMismatch");
    }

    #[test]
    fn unify_single_model_is_identity() {
        let u = unify(&[delta(&[1.0, -2.0], 0)]).unwrap();
        assert_eq!(u.vec.values(), &[1.0, -2.0]);
        assert_eq!(u.task_count, 1);
    }

    #[test]
    fn unify_elects_extremes_by_sum_sign() {
        let u = unify(&[delta(&[1.0, -2.0], 0), delta(&[3.0, -1.0], 1)]).unwrap();
        assert_eq!(u.vec.values(), &[3.0, -2.0]);

        let u = unify(&[delta(&[2.0], 0), delta(&[-1.0], 1)]).unwrap();
        assert_eq!(u.vec.values(), &[2.0]);
    }

    #[test]
    fn unify_cancelled_sum_elects_zero() {
        let u = unify(&[delta(&[1.0], 0), delta(&[-1.0], 1)]).unwrap();
        assert_eq!(u.vec.values(), &[0.0]);
    }

    #[test]
    fn unify_empty_input() {
        assert_eq!(unify(&[]).unwrap_err().name(), "EmptyInput");
    }

    /// Independent election oracle working on unpacked scalars.
    fn elect_oracle(columns: &[Vec<f64>]) -> Vec<f64> {
        let len = columns[0].len();
        (0..len)
            .map(|j| {
                let vals: Vec<f64> = columns.iter().map(|c| c[j]).collect();
                let s: f64 = vals.iter().sum();
                if s > 0.0 {
                    vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                } else if s < 0.0 {
                    vals.iter().cloned().fold(f64::INFINITY, f64::min)
                } else {
                    0.0
                }
            })
            .collect()
    }

    #[test]
    fn unify_matches_election_oracle_on_random_sets() {
        let mut rng = GaussianRng::new(23);
        for _ in 0..20 {
            let n = 2 + (rng.below(5) as usize);
            let d = 64;
            let columns: Vec<Vec<f64>> = (0..n).map(|_| rng.normal_vec(d)).collect();
            let deltas: Vec<DeltaModel> = columns
                .iter()
                .enumerate()
                .map(|(i, c)| delta(c, i as u32))
                .collect();
            let u = unify(&deltas).unwrap();
            assert_eq!(u.vec.values(), elect_oracle(&columns).as_slice());
        }
    }

    #[test]
    fn trigger_mask_and_lambda() {
        let d = delta(&[1.0, -2.0], 0);
        let u = unify(&[delta(&[1.0, -2.0], 0), delta(&[3.0, -1.0], 1)]).unwrap();
        let t = compute_trigger(&d, &u).unwrap();
        assert_eq!(t.mask.unpack(), vec![true, true]);
        assert!((t.lambda - 0.6).abs() < 1e-15);
    }

    #[test]
    fn self_trigger_is_identity() {
        let d = delta(&[3.0, -2.0], 0);
        let u = unify(std::slice::from_ref(&d)).unwrap();
        let t = compute_trigger(&d, &u).unwrap();
        assert_eq!(t.mask.unpack(), vec![true, true]);
        assert_eq!(t.lambda, 1.0);
    }

    #[test]
    fn trigger_zero_denominator_gives_zero_lambda() {
        let d = delta(&[-1.0], 0);
        let u = UnifiedDelta {
            vec: delta(&[2.0], 0).vec,
            task_count: 1,
        };
        let t = compute_trigger(&d, &u).unwrap();
        assert_eq!(t.mask.unpack(), vec![false]);
        assert_eq!(t.lambda, 0.0);
    }

    #[test]
    fn decouple_rescales_and_preserves_l1() {
        let d = delta(&[1.0, -2.0], 0);
        let u = unify(&[delta(&[1.0, -2.0], 0), delta(&[3.0, -1.0], 1)]).unwrap();
        let t = compute_trigger(&d, &u).unwrap();
        let back = decouple(&u, &t).unwrap();
        assert!((back.vec.values()[0] - 1.8).abs() < 1e-12);
        assert!((back.vec.values()[1] + 1.2).abs() < 1e-12);
        assert!((back.vec.l1_norm() - d.vec.l1_norm()).abs() < 1e-12);
    }

    #[test]
    fn decouple_identity_and_annihilating_triggers() {
        let u = unify(&[delta(&[3.0, -2.0], 0)]).unwrap();
        let identity = TaskTrigger::new(PackedMask::pack(&[true, true]), 1.0, 0);
        assert_eq!(
            decouple(&u, &identity).unwrap().vec.values(),
            u.vec.values()
        );

        let annihilate = TaskTrigger::new(PackedMask::pack(&[false, false]), 0.0, 0);
        assert_eq!(decouple(&u, &annihilate).unwrap().vec.values(), &[0.0, 0.0]);
    }

    #[test]
    fn reconstruct_adds_base() {
        let layout = Arc::new(TensorLayout::vector("p", 2));
        let theta0 = FlatVector::zeros(Arc::clone(&layout), Dtype::R64);
        let u = unify(&[delta(&[1.0, -2.0], 0), delta(&[3.0, -1.0], 1)]).unwrap();
        let t = compute_trigger(&delta(&[1.0, -2.0], 0), &u).unwrap();
        let model = reconstruct_model(&theta0, &u, &t).unwrap();
        assert!((model.values()[0] - 1.8).abs() < 1e-12);
        assert!((model.values()[1] + 1.2).abs() < 1e-12);

        let zero_unified = unify(&[delta(&[0.0, 0.0], 0)]).unwrap();
        let t0 = compute_trigger(&delta(&[0.0, 0.0], 0), &zero_unified).unwrap();
        let same = reconstruct_model(&theta0, &zero_unified, &t0).unwrap();
        assert_eq!(same.values(), theta0.values());
    }

    #[test]
    fn single_task_reconstruction_is_exact() {
        let mut rng = GaussianRng::new(5);
        let values = rng.normal_vec(128);
        let d = delta(&values, 0);
        let u = unify(std::slice::from_ref(&d)).unwrap();
        let t = compute_trigger(&d, &u).unwrap();
        let back = decouple(&u, &t).unwrap();
        for (a, b) in back.vec.values().iter().zip(&values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn session_one_is_identity() {
        let d1 = delta(&[1.0, -2.0], 0);
        let state = run_session(None, &d1, None, [0u8; 32]).unwrap();
        assert_eq!(state.unified.vec.values(), &[1.0, -2.0]);
        assert_eq!(state.triggers.len(), 1);
        assert_eq!(state.triggers[0].mask.unpack(), vec![true, true]);
        assert_eq!(state.triggers[0].lambda, 1.0);
        state.validate().unwrap();
    }

    #[test]
    fn session_two_recomputes_all_triggers() {
        let d1 = delta(&[1.0, -2.0], 0);
        let d2 = delta(&[3.0, -1.0], 1);
        let s1 = run_session(None, &d1, None, [0u8; 32]).unwrap();
        let s2 = run_session(Some(&s1), &d2, None, [0u8; 32]).unwrap();
        assert_eq!(s2.unified.vec.values(), &[3.0, -2.0]);
        assert_eq!(s2.task_count(), 2);
        assert!((s2.triggers[0].lambda - 0.6).abs() < 1e-15);
        assert!((s2.triggers[1].lambda - 0.8).abs() < 1e-15);
        assert_eq!(s2.triggers[0].mask.unpack(), vec![true, true]);
        assert_eq!(s2.triggers[1].mask.unpack(), vec![true, true]);
    }

    #[test]
    fn session_three_with_zero_delta_preserves_norms() {
        let d1 = delta(&[1.0, -2.0], 0);
        let d2 = delta(&[3.0, -1.0], 1);
        let d3 = delta(&[0.0, 0.0], 2);
        let s1 = run_session(None, &d1, None, [0u8; 32]).unwrap();
        let s2 = run_session(Some(&s1), &d2, None, [0u8; 32]).unwrap();
        let before: Vec<f64> = s2
            .triggers
            .iter()
            .map(|t| decouple(&s2.unified, t).unwrap().vec.l1_norm())
            .collect();
        let s3 = run_session(Some(&s2), &d3, None, [0u8; 32]).unwrap();

        let zero_back = decouple(&s3.unified, &s3.triggers[2]).unwrap();
        assert!(zero_back.vec.values().iter().all(|&x| x == 0.0));
        for (i, norm) in before.iter().enumerate() {
            let after = decouple(&s3.unified, &s3.triggers[i])
                .unwrap()
                .vec
                .l1_norm();
            assert!((after - norm).abs() <= 1e-9 * norm.max(1.0));
        }
    }

    #[test]
    fn election_soundness_holds_on_random_sets() {
        let mut rng = GaussianRng::new(41);
        for _ in 0..20 {
            let n = 2 + (rng.below(6) as usize);
            let columns: Vec<Vec<f64>> = (0..n).map(|_| rng.normal_vec(50)).collect();
            let deltas: Vec<DeltaModel> = columns
                .iter()
                .enumerate()
                .map(|(i, c)| delta(c, i as u32))
                .collect();
            let u = unify(&deltas).unwrap();
            for j in 0..50 {
                let out = u.vec.values()[j];
                let sum: f64 = columns.iter().map(|c| c[j]).sum();
                if out != 0.0 {
                    assert!(columns.iter().any(|c| c[j] == out));
                    assert_eq!(out.signum(), sum.signum());
                }
            }
        }
    }

    #[test]
    fn reconstruct_single_task_is_base_plus_delta_bitwise() {
        let mut rng = GaussianRng::new(61);
        let layout = Arc::new(TensorLayout::vector("p", 64));
        let theta0 = FlatVector::new(Arc::clone(&layout), rng.normal_vec(64), Dtype::R64).unwrap();
        let d = DeltaModel {
            vec: FlatVector::new(layout, rng.normal_vec(64), Dtype::R64).unwrap(),
            task_id: 0,
        };
        let u = unify(std::slice::from_ref(&d)).unwrap();
        let t = compute_trigger(&d, &u).unwrap();
        let rebuilt = reconstruct_model(&theta0, &u, &t).unwrap();
        for ((r, b), x) in rebuilt
            .values()
            .iter()
            .zip(theta0.values())
            .zip(d.vec.values())
        {
            assert_eq!(r.to_bits(), (b + x).to_bits());
        }
    }

    proptest::proptest! {
        /// Election output at every position is a contributed value (or
        /// zero) with the sign of the columnwise sum.
        #[test]
        fn election_never_invents_magnitudes(
            columns in proptest::collection::vec(
                proptest::collection::vec(-100.0f64..100.0, 16),
                1..6,
            )
        ) {
            let deltas: Vec<DeltaModel> = columns
                .iter()
                .enumerate()
                .map(|(i, c)| delta(c, i as u32))
                .collect();
            let u = unify(&deltas).unwrap();
            for j in 0..16 {
                let out = u.vec.values()[j];
                let sum: f64 = columns.iter().map(|c| c[j]).sum();
                if out == 0.0 {
                    proptest::prop_assert_eq!(sum, 0.0);
                } else {
                    proptest::prop_assert!(columns.iter().any(|c| c[j] == out));
                    proptest::prop_assert_eq!(out.signum(), sum.signum());
                }
            }
        }

        /// One unify/trigger/decouple round preserves every task's L1
        /// norm whenever the rescaler denominator is nonzero.
        #[test]
        fn decoupling_preserves_l1_norm(
            columns in proptest::collection::vec(
                proptest::collection::vec(-10.0f64..10.0, 32),
                2..6,
            )
        ) {
            let deltas: Vec<DeltaModel> = columns
                .iter()
                .enumerate()
                .map(|(i, c)| delta(c, i as u32))
                .collect();
            let u = unify(&deltas).unwrap();
            for d in &deltas {
                let t = compute_trigger(d, &u).unwrap();
                let back = decouple(&u, &t).unwrap();
                if t.lambda > 0.0 {
                    let n0 = d.vec.l1_norm();
                    proptest::prop_assert!((back.vec.l1_norm() - n0).abs() <= 1e-9 * n0.max(1.0));
                } else {
                    proptest::prop_assert!(back.vec.values().iter().all(|&x| x == 0.0));
                }
            }
        }

        /// Decoupled elements never oppose the original delta's sign.
        #[test]
        fn decoupling_preserves_signs(
            columns in proptest::collection::vec(
                proptest::collection::vec(-10.0f64..10.0, 32),
                2..6,
            )
        ) {
            let deltas: Vec<DeltaModel> = columns
                .iter()
                .enumerate()
                .map(|(i, c)| delta(c, i as u32))
                .collect();
            let u = unify(&deltas).unwrap();
            for d in &deltas {
                let t = compute_trigger(d, &u).unwrap();
                let back = decouple(&u, &t).unwrap();
                for (before, after) in d.vec.values().iter().zip(back.vec.values()) {
                    proptest::prop_assert!(before * after >= 0.0);
                    if *before == 0.0 {
                        proptest::prop_assert_eq!(*after, 0.0);
                    }
                }
            }
        }
    }
}
