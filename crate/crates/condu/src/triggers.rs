//! Bit-packed masks, per-task triggers, and the storage accountant.
//!
//! A trigger is everything needed to recover one task's delta from the
//! unified delta: a binary sign-agreement mask (one bit per parameter,
//! LSB-first within each byte) and a single rescaling scalar. Masks cost
//! 1/32 of an `R32` checkpoint per task, which is where the storage win
//! over keeping one dense model per task comes from.

use std::fmt;

use thiserror::Error;

use crate::tensor_store::{Dtype, FlatVector};

#[derive(Debug, Error)]
pub enum TriggerError {
    #[error("mask covers {mask_bits} elements but the vector has {vector_len}")]
    LengthMismatch { mask_bits: usize, vector_len: usize },
}

impl TriggerError {
    pub fn name(&self) -> &'static str {
        match self {
            TriggerError::LengthMismatch { .. } => "LengthMismatch",
        }
    }
}

/// Bit vector packed LSB-first: element index `8k + b` lives in byte `k`
/// at bit `b`. Unused high bits of the last byte are zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedMask {
    bits: Vec<u8>,
    bit_len: usize,
}

impl PackedMask {
    /// Packs a slice of bits.
    pub fn pack(mask_bits: &[bool]) -> Self {
        let mut bits = vec![0u8; mask_bits.len().div_ceil(8)];
        for (i, &b) in mask_bits.iter().enumerate() {
            if b {
                bits[i / 8] |= 1 << (i % 8);
            }
        }
        PackedMask {
            bits,
            bit_len: mask_bits.len(),
        }
    }

    /// Unpacks to one bool per element. Inverse of [`PackedMask::pack`].
    pub fn unpack(&self) -> Vec<bool> {
        (0..self.bit_len).map(|i| self.get(i)).collect()
    }

    pub fn zeros(bit_len: usize) -> Self {
        PackedMask {
            bits: vec![0u8; bit_len.div_ceil(8)],
            bit_len,
        }
    }

    /// Rebuilds from raw packed bytes; `None` when the byte count is wrong
    /// or a padding bit past `bit_len` is set.
    pub fn from_raw(bits: Vec<u8>, bit_len: usize) -> Option<Self> {
        if bits.len() != bit_len.div_ceil(8) {
            return None;
        }
        if !bit_len.is_multiple_of(8) {
            let last = bits[bits.len() - 1];
            if last >> (bit_len % 8) != 0 {
                return None;
            }
        }
        Some(PackedMask { bits, bit_len })
    }

    pub fn get(&self, index: usize) -> bool {
        debug_assert!(index < self.bit_len);
        self.bits[index / 8] & (1 << (index % 8)) != 0
    }

    pub fn set(&mut self, index: usize, value: bool) {
        debug_assert!(index < self.bit_len);
        if value {
            self.bits[index / 8] |= 1 << (index % 8);
        } else {
            self.bits[index / 8] &= !(1 << (index % 8));
        }
    }

    pub fn bit_len(&self) -> usize {
        self.bit_len
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.bits
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().map(|b| b.count_ones() as usize).sum()
    }

    /// True when the two masks share at least one set bit.
    pub fn intersects(&self, other: &PackedMask) -> bool {
        self.bits.iter().zip(&other.bits).any(|(a, b)| a & b != 0)
    }
}

/// Per-task reconstruction key: sign-agreement mask plus rescaler.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskTrigger {
    pub mask: PackedMask,
    pub lambda: f64,
    pub task_id: u32,
}

impl TaskTrigger {
    pub fn new(mask: PackedMask, lambda: f64, task_id: u32) -> Self {
        debug_assert!(lambda.is_finite() && lambda >= 0.0);
        TaskTrigger {
            mask,
            lambda,
            task_id,
        }
    }
}

/// Elementwise gate: keeps `v[j]` where bit `j` is set, zero elsewhere.
pub fn mask_apply(mask: &PackedMask, v: &FlatVector) -> Result<FlatVector, TriggerError> {
    if mask.bit_len() != v.len() {
        return Err(TriggerError::LengthMismatch {
            mask_bits: mask.bit_len(),
            vector_len: v.len(),
        });
    }
    let gated = v
        .values()
        .iter()
        .enumerate()
        .map(|(j, &x)| if mask.get(j) { x } else { 0.0 })
        .collect();
    Ok(FlatVector::from_raw(v.layout_arc(), gated, v.dtype()))
}

const MIB: f64 = 1024.0 * 1024.0;
/// One 64-bit rescaler per task regardless of the model storage dtype.
pub const RESCALER_BYTES: u64 = 8;

/// Byte accounting for dense per-task storage versus one unified delta
/// plus per-task triggers.
#[derive(Debug, Clone, PartialEq)]
pub struct StorageReport {
    pub param_count: u64,
    pub dtype: Dtype,
    pub task_count: u64,
    /// One dense checkpoint at the given dtype.
    pub dense_task_bytes: u64,
    /// `task_count` dense checkpoints.
    pub dense_total_bytes: u64,
    /// The single unified delta kept instead.
    pub unified_bytes: u64,
    /// One bitmap per task, `ceil(param_count / 8)` bytes each.
    pub mask_task_bytes: u64,
    pub masks_total_bytes: u64,
    /// 8 bytes of rescaler per task.
    pub rescalers_total_bytes: u64,
    pub fused_total_bytes: u64,
    /// dense_total / fused_total.
    pub savings_ratio: f64,
    /// dense_total - fused_total; negative for a single task, where the
    /// triggers are pure overhead.
    pub bytes_saved: i64,
}

/// Computes the storage comparison for `task_count` tasks of
/// `param_count` parameters stored at `dtype`.
pub fn storage_report(param_count: u64, dtype: Dtype, task_count: u64) -> StorageReport {
    debug_assert!(param_count > 0 && task_count >= 1);
    let dense_task_bytes = param_count * dtype.size_bytes();
    let dense_total_bytes = task_count * dense_task_bytes;
    let unified_bytes = dense_task_bytes;
    let mask_task_bytes = param_count.div_ceil(8);
    let masks_total_bytes = task_count * mask_task_bytes;
    let rescalers_total_bytes = task_count * RESCALER_BYTES;
    let fused_total_bytes = unified_bytes + masks_total_bytes + rescalers_total_bytes;
    StorageReport {
        param_count,
        dtype,
        task_count,
        dense_task_bytes,
        dense_total_bytes,
        unified_bytes,
        mask_task_bytes,
        masks_total_bytes,
        rescalers_total_bytes,
        fused_total_bytes,
        savings_ratio: dense_total_bytes as f64 / fused_total_bytes as f64,
        bytes_saved: dense_total_bytes as i64 - fused_total_bytes as i64,
    }
}

impl StorageReport {
    pub fn masks_total_mb(&self) -> f64 {
        self.masks_total_bytes as f64 / MIB
    }

    pub fn dense_total_mb(&self) -> f64 {
        self.dense_total_bytes as f64 / MIB
    }

    pub fn fused_total_mb(&self) -> f64 {
        self.fused_total_bytes as f64 / MIB
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("item,bytes,mb\n");
        let rows: [(&str, u64); 5] = [
            ("dense_per_task", self.dense_task_bytes),
            ("dense_total", self.dense_total_bytes),
            ("unified_delta", self.unified_bytes),
            ("masks_total", self.masks_total_bytes),
            ("rescalers_total", self.rescalers_total_bytes),
        ];
        for (item, bytes) in rows {
            s.push_str(&format!("{item},{bytes},{:.2}\n", bytes as f64 / MIB));
        }
        s.push_str(&format!(
            "fused_total,{},{:.2}\n",
            self.fused_total_bytes,
            self.fused_total_mb()
        ));
        s.push_str(&format!("savings_ratio,,{:.4}\n", self.savings_ratio));
        s
    }
}

impl fmt::Display for StorageReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dtype = match self.dtype {
            Dtype::R32 => "r32",
            Dtype::R64 => "r64",
        };
        writeln!(
            f,
            "storage for {} params ({dtype}), {} tasks",
            self.param_count, self.task_count
        )?;
        writeln!(
            f,
            "  dense per task:    {:>14} B  ({:.2} MB)",
            self.dense_task_bytes,
            self.dense_task_bytes as f64 / MIB
        )?;
        writeln!(
            f,
            "  dense total:       {:>14} B  ({:.2} MB)",
            self.dense_total_bytes,
            self.dense_total_mb()
        )?;
        writeln!(
            f,
            "  unified delta:     {:>14} B  ({:.2} MB)",
            self.unified_bytes,
            self.unified_bytes as f64 / MIB
        )?;
        writeln!(
            f,
            "  masks total:       {:>14} B  ({:.2} MB)",
            self.masks_total_bytes,
            self.masks_total_mb()
        )?;
        writeln!(
            f,
            "  rescalers total:   {:>14} B  ({} B per task)",
            self.rescalers_total_bytes, RESCALER_BYTES
        )?;
        writeln!(
            f,
            "  fused total:       {:>14} B  ({:.2} MB)",
            self.fused_total_bytes,
            self.fused_total_mb()
        )?;
        writeln!(
            f,
            "  saved vs dense:    {:>14} B  (ratio {:.3}x)",
            self.bytes_saved, self.savings_ratio
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_store::{flatten, NamedTensor, TensorLayout};
    use proptest::prelude::*;
    use std::sync::Arc;

    #[test]
    fn pack_bit_layout() {
        let m = PackedMask::pack(&[true, false, true, true]);
        assert_eq!(m.as_bytes(), &[0b0000_1101]);
        assert_eq!(m.bit_len(), 4);
        assert_eq!(m.popcount(), 3);
    }

    #[test]
    fn pack_all_zeros_length_nine() {
        let m = PackedMask::pack(&[false; 9]);
        assert_eq!(m.as_bytes(), &[0x00, 0x00]);
        assert_eq!(m.popcount(), 0);
    }

    #[test]
    fn from_raw_rejects_dirty_padding() {
        assert!(PackedMask::from_raw(vec![0b0001_0000], 4).is_none());
        assert!(PackedMask::from_raw(vec![0b0000_1111], 4).is_some());
        assert!(PackedMask::from_raw(vec![0xff, 0xff], 4).is_none());
    }

    #[test]
    fn mask_apply_gates_elements() {
        let v = flatten(&[NamedTensor::new("p", vec![2], vec![3.0, -2.0])]).unwrap();
        let out = mask_apply(&PackedMask::pack(&[true, false]), &v).unwrap();
        assert_eq!(out.values(), &[3.0, 0.0]);
    }

    #[test]
    fn mask_apply_identity_under_all_ones() {
        let v = flatten(&[NamedTensor::new("p", vec![3], vec![1.0, -1.0, 0.5])]).unwrap();
        let out = mask_apply(&PackedMask::pack(&[true; 3]), &v).unwrap();
        assert_eq!(out.values(), v.values());
    }

    #[test]
    fn mask_apply_length_mismatch() {
        let v = flatten(&[NamedTensor::new("p", vec![2], vec![1.0, 2.0])]).unwrap();
        let err = mask_apply(&PackedMask::pack(&[true]), &v).unwrap_err();
        assert_eq!(err.name(), "LengthMismatch");
    }

    #[test]
    fn storage_masks_match_reported_figure() {
        // Dense R32 model of 570.86 MB across 11 tasks: the bitmap total
        // lands within 0.05% of 196.20 MB.
        let params = (570.86 * MIB / 4.0).round() as u64;
        let report = storage_report(params, Dtype::R32, 11);
        let rel = (report.masks_total_mb() - 196.20).abs() / 196.20;
        assert!(
            rel < 0.0005,
            "masks {:.4} MB, rel {rel}",
            report.masks_total_mb()
        );
    }

    #[test]
    fn mask_dense_ratio_is_one_thirty_second() {
        let report = storage_report(1 << 20, Dtype::R32, 1);
        let ratio = report.mask_task_bytes as f64 / report.dense_task_bytes as f64;
        assert_eq!(ratio, 1.0 / 32.0);
    }

    #[test]
    fn single_task_is_dense_plus_mask_overhead() {
        let params = 1 << 23;
        let report = storage_report(params, Dtype::R32, 1);
        let expected = params * 4 + params / 8 + RESCALER_BYTES;
        assert_eq!(report.fused_total_bytes, expected);
        assert!(report.bytes_saved < 0);
    }

    proptest! {
        #[test]
        fn pack_unpack_round_trip(bits in proptest::collection::vec(any::<bool>(), 0..10_000)) {
            let m = PackedMask::pack(&bits);
            prop_assert_eq!(m.unpack(), bits);
            prop_assert_eq!(m.as_bytes().len(), m.bit_len().div_ceil(8));
        }

        #[test]
        fn mask_apply_matches_unpacked_loop(
            pairs in proptest::collection::vec((any::<bool>(), -1e6f64..1e6), 1..512)
        ) {
            let bits: Vec<bool> = pairs.iter().map(|p| p.0).collect();
            let values: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            let layout = Arc::new(TensorLayout::vector("p", values.len() as u32));
            let v = FlatVector::new(layout, values.clone(), Dtype::R64).unwrap();
            let out = mask_apply(&PackedMask::pack(&bits), &v).unwrap();
            for j in 0..bits.len() {
                let expect = if bits[j] { values[j] } else { 0.0 };
                prop_assert_eq!(out.values()[j], expect);
            }
        }
    }
}
