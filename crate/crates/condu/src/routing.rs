//! Prototype computation, cosine routing, and logit aggregation.
//!
//! Each task keeps one prototype per category: the category's text-side
//! feature vector plus the mean of its image-side feature vectors, stored
//! raw (unnormalized). A task-agnostic query is scored against every
//! prototype by cosine similarity; the K tasks holding the most similar
//! prototypes get weight 1 and their raw logits are summed.

use thiserror::Error;

use crate::fusion_core::{reconstruct_model, SessionState};
use crate::tensor_store::FlatVector;

#[derive(Debug, Error)]
pub enum RoutingError {
    #[error("category '{0}' has no image features")]
    EmptyCategory(String),
    #[error("feature dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("zero vector: {0}")]
    ZeroVector(String),
    #[error("logit array length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("task {0} is not a seen task")]
    UnknownTask(u32),
    #[error("routing decision selects no tasks")]
    EmptySelection,
    #[error("{0}")]
    BadConfig(String),
}

impl RoutingError {
    pub fn name(&self) -> &'static str {
        match self {
            RoutingError::EmptyCategory(_) => "EmptyCategory",
            RoutingError::DimMismatch { .. } => "DimMismatch",
            RoutingError::ZeroVector(_) => "ZeroVector",
            RoutingError::LengthMismatch { .. } => "LengthMismatch",
            RoutingError::UnknownTask(_) => "UnknownTask",
            RoutingError::EmptySelection => "EmptySelection",
            RoutingError::BadConfig(_) => "BadConfig",
        }
    }
}

/// One category's prototype vector. Values are stored in the container's
/// 32-bit precision so serialization is bit-exact.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototype {
    pub label: String,
    pub vector: Vec<f32>,
}

/// Per-task prototype collection used for cosine routing.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    pub task_id: u32,
    pub prototypes: Vec<Prototype>,
}

impl PrototypeSet {
    /// Validates dimensions, finiteness, and that no prototype is the
    /// zero vector.
    pub fn new(task_id: u32, prototypes: Vec<Prototype>) -> Result<Self, RoutingError> {
        if prototypes.is_empty() {
            return Err(RoutingError::EmptyCategory("<no categories>".to_string()));
        }
        let dim = prototypes[0].vector.len();
        for p in &prototypes {
            if p.vector.len() != dim {
                return Err(RoutingError::DimMismatch {
                    expected: dim,
                    got: p.vector.len(),
                });
            }
            if p.vector.iter().any(|v| !v.is_finite()) {
                return Err(RoutingError::BadConfig(format!(
                    "prototype '{}' has a non-finite element",
                    p.label
                )));
            }
            if p.vector.iter().all(|&v| v == 0.0) {
                return Err(RoutingError::ZeroVector(format!("prototype '{}'", p.label)));
            }
        }
        Ok(PrototypeSet {
            task_id,
            prototypes,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.prototypes[0].vector.len()
    }
}

/// Raw feature inputs for one category of one task.
#[derive(Debug, Clone)]
pub struct CategoryFeatures {
    pub label: String,
    pub image_features: Vec<Vec<f64>>,
    pub text_feature: Vec<f64>,
}

/// Builds a task's prototype set: per category, the text feature plus the
/// arithmetic mean of the image features, stored unnormalized.
pub fn compute_prototypes(
    task_id: u32,
    categories: &[CategoryFeatures],
) -> Result<PrototypeSet, RoutingError> {
    if categories.is_empty() {
        return Err(RoutingError::EmptyCategory("<no categories>".to_string()));
    }
    let dim = categories[0].text_feature.len();
    let mut prototypes = Vec::with_capacity(categories.len());
    for cat in categories {
        if cat.image_features.is_empty() {
            return Err(RoutingError::EmptyCategory(cat.label.clone()));
        }
        if cat.text_feature.len() != dim {
            return Err(RoutingError::DimMismatch {
                expected: dim,
                got: cat.text_feature.len(),
            });
        }
        let mut mean = vec![0.0f64; dim];
        for img in &cat.image_features {
            if img.len() != dim {
                return Err(RoutingError::DimMismatch {
                    expected: dim,
                    got: img.len(),
                });
            }
            for (m, x) in mean.iter_mut().zip(img) {
                *m += x;
            }
        }
        let count = cat.image_features.len() as f64;
        let vector: Vec<f32> = mean
            .iter()
            .zip(&cat.text_feature)
            .map(|(m, t)| (m / count + t) as f32)
            .collect();
        prototypes.push(Prototype {
            label: cat.label.clone(),
            vector,
        });
    }
    PrototypeSet::new(task_id, prototypes)
}

/// Which tasks a query is routed to.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    /// Best cosine similarity per task, in task order.
    pub per_task_best_sim: Vec<f64>,
    /// Selected task indices, ascending; exactly `min(K, task_count)`.
    pub selected_tasks: Vec<usize>,
    /// `weights[i]` is true iff task `i` is selected.
    pub weights: Vec<bool>,
}

fn cosine(sample: &[f64], proto: &[f32], sample_norm: f64) -> f64 {
    let mut dot = 0.0f64;
    let mut norm_sq = 0.0f64;
    for (s, p) in sample.iter().zip(proto) {
        let p = *p as f64;
        dot += s * p;
        norm_sq += p * p;
    }
    dot / (sample_norm * norm_sq.sqrt())
}

/// Scores the sample against every task's prototypes and selects the K
/// most similar tasks (ties broken by lowest task index).
pub fn route(
    sample_feature: &[f64],
    all_prototypes: &[PrototypeSet],
    k: usize,
) -> Result<RoutingDecision, RoutingError> {
    if k == 0 {
        return Err(RoutingError::BadConfig("K must be at least 1".to_string()));
    }
    if all_prototypes.is_empty() {
        return Err(RoutingError::BadConfig(
            "no prototype sets to route over".to_string(),
        ));
    }
    let sample_norm_sq: f64 = sample_feature.iter().map(|x| x * x).sum();
    if sample_norm_sq == 0.0 {
        return Err(RoutingError::ZeroVector("sample feature".to_string()));
    }
    let sample_norm = sample_norm_sq.sqrt();

    let mut per_task_best_sim = Vec::with_capacity(all_prototypes.len());
    for set in all_prototypes {
        if set.feature_dim() != sample_feature.len() {
            return Err(RoutingError::DimMismatch {
                expected: set.feature_dim(),
                got: sample_feature.len(),
            });
        }
        let best = set
            .prototypes
            .iter()
            .map(|p| cosine(sample_feature, &p.vector, sample_norm))
            .fold(f64::NEG_INFINITY, f64::max);
        per_task_best_sim.push(best);
    }

    let mut order: Vec<usize> = (0..per_task_best_sim.len()).collect();
    order.sort_by(|&a, &b| {
        per_task_best_sim[b]
            .partial_cmp(&per_task_best_sim[a])
            .expect("similarities are finite")
            .then(a.cmp(&b))
    });
    let take = k.min(order.len());
    let mut selected_tasks: Vec<usize> = order[..take].to_vec();
    selected_tasks.sort_unstable();

    let mut weights = vec![false; per_task_best_sim.len()];
    for &t in &selected_tasks {
        weights[t] = true;
    }
    Ok(RoutingDecision {
        per_task_best_sim,
        selected_tasks,
        weights,
    })
}

/// Sums the selected tasks' raw logits in task order and returns the
/// argmax label (ties broken by lowest index) with the fused logits.
pub fn aggregate_logits(
    per_task_logits: &[Vec<f64>],
    decision: &RoutingDecision,
) -> Result<(usize, Vec<f64>), RoutingError> {
    if per_task_logits.len() != decision.weights.len() {
        return Err(RoutingError::LengthMismatch {
            expected: decision.weights.len(),
            got: per_task_logits.len(),
        });
    }
    if decision.selected_tasks.is_empty() {
        return Err(RoutingError::EmptySelection);
    }
    let label_count = per_task_logits[0].len();
    if label_count == 0 {
        return Err(RoutingError::LengthMismatch {
            expected: 1,
            got: 0,
        });
    }
    let mut fused = vec![0.0f64; label_count];
    for (logits, &selected) in per_task_logits.iter().zip(&decision.weights) {
        if logits.len() != label_count {
            return Err(RoutingError::LengthMismatch {
                expected: label_count,
                got: logits.len(),
            });
        }
        if selected {
            for (f, l) in fused.iter_mut().zip(logits) {
                *f += l;
            }
        }
    }
    Ok((argmax(&fused), fused))
}

/// Lowest-index argmax.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Task-aware prediction: reconstructs the task's model from the session
/// state and applies the given logit head to the sample. Task ids are
/// zero-based here; the CLI converts from its one-based numbering.
pub fn predict_task_aware<F>(
    head: F,
    sample: &[f64],
    task_id: u32,
    state: &SessionState,
    base: &FlatVector,
) -> Result<usize, RoutingError>
where
    F: Fn(&FlatVector, &[f64]) -> Vec<f64>,
{
    let idx = task_id as usize;
    if idx >= state.task_count() {
        return Err(RoutingError::UnknownTask(task_id));
    }
    let params = reconstruct_model(base, &state.unified, &state.triggers[idx])
        .map_err(|e| RoutingError::BadConfig(e.to_string()))?;
    let logits = head(&params, sample);
    if logits.is_empty() {
        return Err(RoutingError::LengthMismatch {
            expected: 1,
            got: 0,
        });
    }
    Ok(argmax(&logits))
}
