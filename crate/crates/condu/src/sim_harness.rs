//! Desk-scale continual-learning testbed.
//!
//! Tasks are Gaussian blob classification problems in a shared label
//! space. All tasks of one experiment draw their class means around a
//! common set of class anchors, and the base model is briefly pre-trained
//! on wide blobs centered on those anchors. That gives the zero-shot /
//! fine-tuned accuracy gap the benchmark metrics measure: the base model
//! is above chance on every task but clearly below a model fine-tuned on
//! the task's own drifted means.
//!
//! The model is a linear softmax classifier. Its input space doubles as
//! the feature space for routing: a sample's feature is the sample
//! itself, and the text-side feature of a category is the base model's
//! weight row for that class.

use std::fmt::Write as _;

use thiserror::Error;

use crate::fusion_core::{
    delta_from, reconstruct_model, run_session, DeltaModel, FusionError, SessionState,
};
use crate::rng::{derive_seed, GaussianRng};
use crate::routing::{
    aggregate_logits, argmax, compute_prototypes, route, CategoryFeatures, PrototypeSet,
    RoutingError,
};
use crate::tensor_store::{Dtype, FlatVector, StoreError, TensorLayout};

/// Per-coordinate scale of the shared class anchors.
const ANCHOR_SCALE: f64 = 0.15;
/// Per-coordinate scale of each task's class-mean drift away from the
/// anchors. Larger drift separates tasks more and costs the base model
/// more zero-shot accuracy.
const DRIFT_SCALE: f64 = 0.5;
/// Pre-training samples per class for the base model.
const PRETRAIN_PER_CLASS: usize = 50;

// Seed stream tags.
const STREAM_ANCHORS: u64 = 1;
const STREAM_TASK_DRIFT: u64 = 1000;
const STREAM_TASK_SAMPLES: u64 = 2000;
const STREAM_PRETRAIN: u64 = 2;
const STREAM_LORA_INIT: u64 = 3;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{0}")]
    BadConfig(String),
    #[error("training loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Routing(#[from] RoutingError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl HarnessError {
    pub fn name(&self) -> &'static str {
        match self {
            HarnessError::BadConfig(_) => "BadConfig",
            HarnessError::NonFiniteLoss { .. } => "NonFiniteLoss",
            HarnessError::Fusion(e) => e.name(),
            HarnessError::Routing(e) => e.name(),
            HarnessError::Store(e) => e.name(),
        }
    }
}

/// Full fine-tuning or a rank-limited update that is multiplied out to a
/// dense delta before fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Full,
    LowRank(usize),
}

impl TrainMode {
    /// Parses `full` or `lora:<r>`.
    pub fn parse(s: &str) -> Result<Self, HarnessError> {
        if s == "full" {
            return Ok(TrainMode::Full);
        }
        if let Some(r) = s.strip_prefix("lora:") {
            let r: usize = r
                .parse()
                .map_err(|_| HarnessError::BadConfig(format!("bad rank in mode '{s}'")))?;
            return Ok(TrainMode::LowRank(r));
        }
        Err(HarnessError::BadConfig(format!(
            "unknown mode '{s}' (expected full or lora:<r>)"
        )))
    }
}

impl std::fmt::Display for TrainMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainMode::Full => write!(f, "full"),
            TrainMode::LowRank(r) => write!(f, "lora:{r}"),
        }
    }
}

/// One labelled sample.
#[derive(Debug, Clone)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

/// Gaussian blob classification task, fully reproducible from its seed.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub task_id: u32,
    pub feature_dim: usize,
    pub class_count: usize,
    pub class_means: Vec<Vec<f64>>,
    pub spread: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl SyntheticTask {
    fn draw(&self, seed: u64, per_class: usize) -> Vec<Sample> {
        let mut rng = GaussianRng::new(seed);
        let mut samples = Vec::with_capacity(per_class * self.class_count);
        for (label, mean) in self.class_means.iter().enumerate() {
            for _ in 0..per_class {
                let features = mean
                    .iter()
                    .map(|m| m + self.spread * rng.normal())
                    .collect();
                samples.push(Sample { features, label });
            }
        }
        samples
    }

    /// Deterministic training stream, grouped by class in label order.
    pub fn train_set(&self) -> Vec<Sample> {
        self.draw(derive_seed(self.seed, 0), self.train_per_class)
    }

    pub fn test_set(&self) -> Vec<Sample> {
        self.draw(derive_seed(self.seed, 1), self.test_per_class)
    }
}

/// Shared class anchors for one experiment seed.
fn class_anchors(seed: u64, feature_dim: usize, class_count: usize) -> Vec<Vec<f64>> {
    let mut rng = GaussianRng::new(derive_seed(seed, STREAM_ANCHORS));
    (0..class_count)
        .map(|_| {
            rng.normal_vec(feature_dim)
                .into_iter()
                .map(|x| ANCHOR_SCALE * x)
                .collect()
        })
        .collect()
}

/// Generates `task_count` tasks around the experiment's class anchors.
pub fn gen_tasks(
    seed: u64,
    task_count: usize,
    feature_dim: usize,
    class_count: usize,
    spread: f64,
) -> Result<Vec<SyntheticTask>, HarnessError> {
    if task_count == 0 || feature_dim == 0 || class_count == 0 {
        return Err(HarnessError::BadConfig(
            "task count, feature dim, and class count must be positive".to_string(),
        ));
    }
    if !spread.is_finite() || spread < 0.0 {
        return Err(HarnessError::BadConfig(format!(
            "spread must be a finite non-negative value, got {spread}"
        )));
    }
    let anchors = class_anchors(seed, feature_dim, class_count);
    let mut tasks = Vec::with_capacity(task_count);
    for t in 0..task_count {
        let mut drift_rng = GaussianRng::new(derive_seed(seed, STREAM_TASK_DRIFT + t as u64));
        let class_means: Vec<Vec<f64>> = anchors
            .iter()
            .map(|a| {
                a.iter()
                    .map(|&x| x + DRIFT_SCALE * drift_rng.normal())
                    .collect()
            })
            .collect();
        for i in 0..class_means.len() {
            for j in i + 1..class_means.len() {
                if class_means[i] == class_means[j] {
                    return Err(HarnessError::BadConfig(format!(
                        "degenerate draw: classes {i} and {j} of task {t} share a mean"
                    )));
                }
            }
        }
        tasks.push(SyntheticTask {
            task_id: t as u32,
            feature_dim,
            class_count,
            class_means,
            spread,
            train_per_class: 50,
            test_per_class: 50,
            seed: derive_seed(seed, STREAM_TASK_SAMPLES + t as u64),
        });
    }
    Ok(tasks)
}

/// Linear softmax classifier stored as a flat vector with the fixed
/// layout `[("W", [C, D]), ("b", [C])]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub class_count: usize,
    pub feature_dim: usize,
    params: FlatVector,
}

impl ToyModel {
    pub fn layout(class_count: usize, feature_dim: usize) -> TensorLayout {
        TensorLayout::new(&[
            ("W", vec![class_count as u32, feature_dim as u32]),
            ("b", vec![class_count as u32]),
        ])
        .expect("fixed two-entry layout is valid")
    }

    pub fn zeros(class_count: usize, feature_dim: usize) -> Self {
        ToyModel {
            class_count,
            feature_dim,
            params: FlatVector::zeros(
                std::sync::Arc::new(Self::layout(class_count, feature_dim)),
                Dtype::R64,
            ),
        }
    }

    /// Wraps a flat vector that must carry the toy layout.
    pub fn from_params(params: FlatVector) -> Result<Self, HarnessError> {
        let entries = params.layout().entries();
        let [w, b] = entries else {
            return Err(HarnessError::BadConfig(
                "expected a two-tensor layout [W, b]".to_string(),
            ));
        };
        if w.name != "W" || b.name != "b" || w.dims.len() != 2 || b.dims.len() != 1 {
            return Err(HarnessError::BadConfig(
                "layout does not match [(\"W\", [C, D]), (\"b\", [C])]".to_string(),
            ));
        }
        if w.dims[0] != b.dims[0] {
            return Err(HarnessError::BadConfig(
                "weight rows and bias length disagree".to_string(),
            ));
        }
        Ok(ToyModel {
            class_count: w.dims[0] as usize,
            feature_dim: w.dims[1] as usize,
            params,
        })
    }

    pub fn params(&self) -> &FlatVector {
        &self.params
    }

    pub fn weight_row(&self, class: usize) -> &[f64] {
        let d = self.feature_dim;
        &self.params.values()[class * d..(class + 1) * d]
    }

    fn bias(&self) -> &[f64] {
        let start = self.class_count * self.feature_dim;
        &self.params.values()[start..start + self.class_count]
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.feature_dim);
        let bias = self.bias();
        (0..self.class_count)
            .map(|c| {
                let row = self.weight_row(c);
                let mut z = bias[c];
                for (w, xi) in row.iter().zip(x) {
                    z += w * xi;
                }
                z
            })
            .collect()
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        argmax(&self.logits(x))
    }

    pub fn accuracy(&self, samples: &[Sample]) -> f64 {
        if samples.is_empty() {
            return 0.0;
        }
        let correct = samples
            .iter()
            .filter(|s| self.predict(&s.features) == s.label)
            .count();
        correct as f64 / samples.len() as f64
    }
}

/// Logit head for [`crate::routing::predict_task_aware`]: interprets the
/// flat vector through the toy layout.
pub fn linear_head(params: &FlatVector, x: &[f64]) -> Vec<f64> {
    let model = ToyModel::from_params(params.clone()).expect("toy layout");
    model.logits(x)
}

/// Mean cross-entropy loss and its gradient in (W, b) space.
fn loss_and_grad(
    weights: &[f64],
    bias: &[f64],
    class_count: usize,
    feature_dim: usize,
    samples: &[Sample],
) -> (f64, Vec<f64>, Vec<f64>) {
    let mut grad_w = vec![0.0f64; class_count * feature_dim];
    let mut grad_b = vec![0.0f64; class_count];
    let mut loss = 0.0f64;
    let inv = 1.0 / samples.len() as f64;
    let mut probs = vec![0.0f64; class_count];
    for s in samples {
        let mut max_z = f64::NEG_INFINITY;
        for c in 0..class_count {
            let row = &weights[c * feature_dim..(c + 1) * feature_dim];
            let mut z = bias[c];
            for (w, xi) in row.iter().zip(&s.features) {
                z += w * xi;
            }
            probs[c] = z;
            if z > max_z {
                max_z = z;
            }
        }
        let mut denom = 0.0f64;
        for p in probs.iter_mut() {
            *p = (*p - max_z).exp();
            denom += *p;
        }
        loss -= (probs[s.label] / denom).ln() * inv;
        for c in 0..class_count {
            let g = (probs[c] / denom - if c == s.label { 1.0 } else { 0.0 }) * inv;
            grad_b[c] += g;
            let row = &mut grad_w[c * feature_dim..(c + 1) * feature_dim];
            for (gw, xi) in row.iter_mut().zip(&s.features) {
                *gw += g * xi;
            }
        }
    }
    (loss, grad_w, grad_b)
}

/// Gradient-descent fine-tuning of the base classifier on one task.
///
/// In low-rank mode only a rank-`r` factorization of the weight update is
/// trainable and the bias is frozen, so the returned delta, reshaped to
/// `C x D`, has rank at most `r`. `lr = 0` is allowed and produces the
/// zero delta.
pub fn train_task(
    task: &SyntheticTask,
    base: &ToyModel,
    mode: TrainMode,
    steps: usize,
    lr: f64,
) -> Result<(ToyModel, DeltaModel), HarnessError> {
    if steps == 0 {
        return Err(HarnessError::BadConfig(
            "steps must be at least 1".to_string(),
        ));
    }
    if !lr.is_finite() || lr < 0.0 {
        return Err(HarnessError::BadConfig(format!(
            "learning rate must be finite and non-negative, got {lr}"
        )));
    }
    if task.feature_dim != base.feature_dim || task.class_count != base.class_count {
        return Err(HarnessError::BadConfig(
            "task dimensions do not match the base model".to_string(),
        ));
    }
    let c = base.class_count;
    let d = base.feature_dim;
    let samples = task.train_set();
    if samples.is_empty() {
        return Err(HarnessError::BadConfig(
            "task has no training samples".to_string(),
        ));
    }

    let base_w = &base.params.values()[..c * d];
    let base_b = base.bias();

    let (weights, bias) = match mode {
        TrainMode::Full => {
            let mut weights = base_w.to_vec();
            let mut bias = base_b.to_vec();
            for step in 0..steps {
                let (loss, grad_w, grad_b) = loss_and_grad(&weights, &bias, c, d, &samples);
                if !loss.is_finite() {
                    return Err(HarnessError::NonFiniteLoss { step });
                }
                for (w, g) in weights.iter_mut().zip(&grad_w) {
                    *w -= lr * g;
                }
                for (b, g) in bias.iter_mut().zip(&grad_b) {
                    *b -= lr * g;
                }
            }
            (weights, bias)
        }
        TrainMode::LowRank(r) => {
            if r == 0 || r > c.min(d) {
                return Err(HarnessError::BadConfig(format!(
                    "rank {r} outside 1..=min(C, D) = {}",
                    c.min(d)
                )));
            }
            // Standard low-rank init: one factor random, the other zero,
            // so the update starts at exactly zero.
            let mut rng = GaussianRng::new(derive_seed(task.seed, STREAM_LORA_INIT));
            let scale = 1.0 / (d as f64).sqrt();
            let mut down: Vec<f64> = (0..r * d).map(|_| scale * rng.normal()).collect();
            let mut up = vec![0.0f64; c * r];
            let mut weights = base_w.to_vec();
            for step in 0..steps {
                let (loss, grad_w, _) = loss_and_grad(&weights, base_b, c, d, &samples);
                if !loss.is_finite() {
                    return Err(HarnessError::NonFiniteLoss { step });
                }
                // grad_up = grad_w * down^T, grad_down = up^T * grad_w
                let mut grad_up = vec![0.0f64; c * r];
                for ci in 0..c {
                    for ri in 0..r {
                        let mut acc = 0.0;
                        for di in 0..d {
                            acc += grad_w[ci * d + di] * down[ri * d + di];
                        }
                        grad_up[ci * r + ri] = acc;
                    }
                }
                let mut grad_down = vec![0.0f64; r * d];
                for ri in 0..r {
                    for di in 0..d {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            acc += up[ci * r + ri] * grad_w[ci * d + di];
                        }
                        grad_down[ri * d + di] = acc;
                    }
                }
                for (u, g) in up.iter_mut().zip(&grad_up) {
                    *u -= lr * g;
                }
                for (dn, g) in down.iter_mut().zip(&grad_down) {
                    *dn -= lr * g;
                }
                // W = W0 + up * down
                for ci in 0..c {
                    for di in 0..d {
                        let mut acc = base_w[ci * d + di];
                        for ri in 0..r {
                            acc += up[ci * r + ri] * down[ri * d + di];
                        }
                        weights[ci * d + di] = acc;
                    }
                }
            }
            (weights, base_b.to_vec())
        }
    };

    let mut values = weights;
    values.extend_from_slice(&bias);
    let params = FlatVector::new(base.params.layout_arc(), values, Dtype::R64)
        .map_err(HarnessError::Store)?;
    let model = ToyModel {
        class_count: c,
        feature_dim: d,
        params,
    };
    let delta = delta_from(model.params(), base.params(), task.task_id)?;
    Ok((model, delta))
}

/// Briefly pre-trains the base classifier on wide blobs centered on the
/// experiment's class anchors, starting from zero weights.
pub fn make_base_model(
    seed: u64,
    feature_dim: usize,
    class_count: usize,
    spread: f64,
    pretrain_steps: usize,
    lr: f64,
) -> Result<ToyModel, HarnessError> {
    let anchors = class_anchors(seed, feature_dim, class_count);
    let pretrain_task = SyntheticTask {
        task_id: u32::MAX,
        feature_dim,
        class_count,
        class_means: anchors,
        // Wide enough to cover the per-task drift of later tasks.
        spread: (spread * spread + DRIFT_SCALE * DRIFT_SCALE).sqrt(),
        train_per_class: PRETRAIN_PER_CLASS,
        test_per_class: 0,
        seed: derive_seed(seed, STREAM_PRETRAIN),
    };
    let zero = ToyModel::zeros(class_count, feature_dim);
    let (model, _) = train_task(&pretrain_task, &zero, TrainMode::Full, pretrain_steps, lr)?;
    Ok(model)
}

/// Builds a task's prototype set from its training data: per category,
/// the base model's class weight row (text-side analog) plus the mean of
/// the raw sample features (image-side analog).
pub fn task_prototypes(
    task: &SyntheticTask,
    base: &ToyModel,
) -> Result<PrototypeSet, HarnessError> {
    let samples = task.train_set();
    let categories: Vec<CategoryFeatures> = (0..task.class_count)
        .map(|c| CategoryFeatures {
            label: format!("class{c}"),
            image_features: samples
                .iter()
                .filter(|s| s.label == c)
                .map(|s| s.features.clone())
                .collect(),
            text_feature: base.weight_row(c).to_vec(),
        })
        .collect();
    Ok(compute_prototypes(task.task_id, &categories)?)
}

/// Benchmark configuration; serializable as a flat key=value text file.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkConfig {
    pub seed: u64,
    pub task_count: usize,
    pub feature_dim: usize,
    pub class_count: usize,
    pub spread: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub mode: TrainMode,
    pub k: usize,
    pub steps: usize,
    pub lr: f64,
    pub pretrain_steps: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            seed: 1,
            task_count: 5,
            feature_dim: 64,
            class_count: 4,
            spread: 0.5,
            train_per_class: 50,
            test_per_class: 50,
            mode: TrainMode::Full,
            k: 4,
            steps: 200,
            lr: 0.1,
            pretrain_steps: 200,
        }
    }
}

impl BenchmarkConfig {
    /// Parses the flat key=value format. Blank lines and `#` comments are
    /// skipped; unknown keys are rejected.
    pub fn from_key_values(text: &str) -> Result<Self, HarnessError> {
        let mut config = BenchmarkConfig::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(HarnessError::BadConfig(format!(
                    "line {}: expected key=value, got '{line}'",
                    lineno + 1
                )));
            };
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| {
                HarnessError::BadConfig(format!("line {}: bad {what} '{value}'", lineno + 1))
            };
            match key {
                "seed" => config.seed = value.parse().map_err(|_| bad("seed"))?,
                "tasks" => config.task_count = value.parse().map_err(|_| bad("tasks"))?,
                "dim" => config.feature_dim = value.parse().map_err(|_| bad("dim"))?,
                "classes" => config.class_count = value.parse().map_err(|_| bad("classes"))?,
                "spread" => config.spread = value.parse().map_err(|_| bad("spread"))?,
                "train_per_class" => {
                    config.train_per_class = value.parse().map_err(|_| bad("train_per_class"))?
                }
                "test_per_class" => {
                    config.test_per_class = value.parse().map_err(|_| bad("test_per_class"))?
                }
                "mode" => config.mode = TrainMode::parse(value)?,
                "k" => config.k = value.parse().map_err(|_| bad("k"))?,
                "steps" => config.steps = value.parse().map_err(|_| bad("steps"))?,
                "lr" => config.lr = value.parse().map_err(|_| bad("lr"))?,
                "pretrain_steps" => {
                    config.pretrain_steps = value.parse().map_err(|_| bad("pretrain_steps"))?
                }
                other => {
                    return Err(HarnessError::BadConfig(format!(
                        "line {}: unknown key '{other}'",
                        lineno + 1
                    )))
                }
            }
        }
        Ok(config)
    }

    pub fn to_key_values(&self) -> String {
        format!(
            "seed={}\ntasks={}\ndim={}\nclasses={}\nspread={}\ntrain_per_class={}\ntest_per_class={}\nmode={}\nk={}\nsteps={}\nlr={}\npretrain_steps={}\n",
            self.seed,
            self.task_count,
            self.feature_dim,
            self.class_count,
            self.spread,
            self.train_per_class,
            self.test_per_class,
            self.mode,
            self.k,
            self.steps,
            self.lr,
            self.pretrain_steps
        )
    }

    pub fn gen_tasks(&self) -> Result<Vec<SyntheticTask>, HarnessError> {
        let mut tasks = gen_tasks(
            self.seed,
            self.task_count,
            self.feature_dim,
            self.class_count,
            self.spread,
        )?;
        for t in &mut tasks {
            t.train_per_class = self.train_per_class;
            t.test_per_class = self.test_per_class;
        }
        Ok(tasks)
    }
}

/// Accuracy grid: `rows[s-1][t-1]` is accuracy on task `t`'s test set
/// after session `s`; `zero_shot[t-1]` is the base model's row.
///
/// Cells with `t <= s` come from the reconstructed task model; cells with
/// `t > s` come from the task-agnostic routing path over the tasks seen
/// so far.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyMatrix {
    pub zero_shot: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn task_count(&self) -> usize {
        self.zero_shot.len()
    }

    pub fn session_count(&self) -> usize {
        self.rows.len()
    }

    /// Mean over tasks `t >= 2` of the mean pre-learning accuracy
    /// `A[s][t]` for sessions `s < t`. `None` for a single task.
    pub fn transfer(&self) -> Option<f64> {
        let t_count = self.task_count();
        if t_count < 2 {
            return None;
        }
        let mut per_task = Vec::with_capacity(t_count - 1);
        for t in 2..=t_count {
            let cells: Vec<f64> = (1..t).map(|s| self.rows[s - 1][t - 1]).collect();
            per_task.push(cells.iter().sum::<f64>() / cells.len() as f64);
        }
        Some(per_task.iter().sum::<f64>() / per_task.len() as f64)
    }

    /// Column-mean convention: mean of each task's full column over all
    /// sessions, then the mean over tasks.
    pub fn average(&self) -> f64 {
        let t_count = self.task_count();
        let s_count = self.session_count();
        let mut total = 0.0;
        for t in 0..t_count {
            let col: f64 = self.rows.iter().map(|r| r[t]).sum();
            total += col / s_count as f64;
        }
        total / t_count as f64
    }

    /// Mean accuracy over all tasks at the final session.
    pub fn last(&self) -> f64 {
        let row = self.rows.last().expect("at least one session");
        row.iter().sum::<f64>() / row.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("session");
        for t in 1..=self.task_count() {
            write!(out, ",task{t}").unwrap();
        }
        out.push('\n');
        out.push('0');
        for v in &self.zero_shot {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
        for (s, row) in self.rows.iter().enumerate() {
            write!(out, "{}", s + 1).unwrap();
            for v in row {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Benchmark summary metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub transfer: Option<f64>,
    pub average: f64,
    pub last: f64,
    /// Mean routed (task-agnostic) accuracy against the final state.
    pub task_agnostic: f64,
    /// Mean base-model accuracy over all tasks.
    pub zero_shot: f64,
}

impl Metrics {
    pub fn to_text(&self) -> String {
        let transfer = self
            .transfer
            .map(|t| format!("{t:.4}"))
            .unwrap_or_else(|| "n/a".to_string());
        format!(
            "transfer      {transfer}\naverage       {:.4}\nlast          {:.4}\ntask_agnostic {:.4}\nzero_shot     {:.4}\n",
            self.average, self.last, self.task_agnostic, self.zero_shot
        )
    }
}

/// Everything a benchmark run produces.
#[derive(Debug, Clone)]
pub struct BenchmarkResult {
    pub matrix: AccuracyMatrix,
    pub state: SessionState,
    pub metrics: Metrics,
    /// Accuracy of each individually fine-tuned model on its own task.
    pub individual_accuracy: Vec<f64>,
    /// Routed accuracy per task against the final state.
    pub task_agnostic_accuracy: Vec<f64>,
    pub base: ToyModel,
}

fn reconstructed_models(
    state: &SessionState,
    base: &ToyModel,
) -> Result<Vec<ToyModel>, HarnessError> {
    (0..state.task_count())
        .map(|i| {
            let params = reconstruct_model(base.params(), &state.unified, &state.triggers[i])?;
            ToyModel::from_params(params)
        })
        .collect()
}

/// Accuracy of the routed top-K aggregation over one test set.
fn routed_accuracy(
    models: &[ToyModel],
    prototypes: &[PrototypeSet],
    k: usize,
    samples: &[Sample],
) -> Result<f64, HarnessError> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for s in samples {
        let decision = route(&s.features, prototypes, k)?;
        let per_task_logits: Vec<Vec<f64>> = models.iter().map(|m| m.logits(&s.features)).collect();
        let (label, _) = aggregate_logits(&per_task_logits, &decision)?;
        if label == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Runs the full continual-learning loop over the given tasks: train,
/// fuse, recompute triggers, append prototypes, and evaluate every cell
/// of the accuracy matrix.
pub fn run_benchmark(
    tasks: &[SyntheticTask],
    config: &BenchmarkConfig,
) -> Result<BenchmarkResult, HarnessError> {
    if tasks.is_empty() {
        return Err(HarnessError::BadConfig("no tasks to run".to_string()));
    }
    let base = make_base_model(
        config.seed,
        tasks[0].feature_dim,
        tasks[0].class_count,
        config.spread,
        config.pretrain_steps,
        config.lr,
    )?;
    let base_hash = base.params().content_hash();
    let test_sets: Vec<Vec<Sample>> = tasks.iter().map(|t| t.test_set()).collect();
    let zero_shot: Vec<f64> = test_sets.iter().map(|s| base.accuracy(s)).collect();

    let mut state: Option<SessionState> = None;
    let mut individual_accuracy = Vec::with_capacity(tasks.len());
    let mut rows = Vec::with_capacity(tasks.len());
    for (s_idx, task) in tasks.iter().enumerate() {
        let (model, delta) = train_task(task, &base, config.mode, config.steps, config.lr)?;
        individual_accuracy.push(model.accuracy(&test_sets[s_idx]));
        let prototypes = task_prototypes(task, &base)?;
        let next = run_session(state.as_ref(), &delta, Some(prototypes), base_hash)?;

        let models = reconstructed_models(&next, &base)?;
        let mut row = Vec::with_capacity(tasks.len());
        for (t_idx, test) in test_sets.iter().enumerate() {
            if t_idx <= s_idx {
                row.push(models[t_idx].accuracy(test));
            } else {
                row.push(routed_accuracy(&models, &next.prototypes, config.k, test)?);
            }
        }
        rows.push(row);
        state = Some(next);
    }
    let state = state.expect("at least one session ran");

    let final_models = reconstructed_models(&state, &base)?;
    let task_agnostic_accuracy: Vec<f64> = test_sets
        .iter()
        .map(|test| routed_accuracy(&final_models, &state.prototypes, config.k, test))
        .collect::<Result<_, _>>()?;

    let matrix = AccuracyMatrix { zero_shot, rows };
    let metrics = Metrics {
        transfer: matrix.transfer(),
        average: matrix.average(),
        last: matrix.last(),
        task_agnostic: task_agnostic_accuracy.iter().sum::<f64>()
            / task_agnostic_accuracy.len() as f64,
        zero_shot: matrix.zero_shot.iter().sum::<f64>() / matrix.zero_shot.len() as f64,
    };
    Ok(BenchmarkResult {
        matrix,
        state,
        metrics,
        individual_accuracy,
        task_agnostic_accuracy,
        base,
    })
}

/// One row of a K sweep.
#[derive(Debug, Clone)]
pub struct KSweepRow {
    pub k: usize,
    pub per_task: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone)]
pub struct KSweepTable {
    pub rows: Vec<KSweepRow>,
}

impl KSweepTable {
    /// Difference between the best and worst mean across K values.
    pub fn spread(&self) -> f64 {
        let means: Vec<f64> = self.rows.iter().map(|r| r.mean).collect();
        let max = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = means.iter().cloned().fold(f64::INFINITY, f64::min);
        max - min
    }

    pub fn to_csv(&self) -> String {
        let tasks = self.rows.first().map(|r| r.per_task.len()).unwrap_or(0);
        let mut out = String::from("k");
        for t in 1..=tasks {
            write!(out, ",task{t}").unwrap();
        }
        out.push_str(",mean\n");
        for row in &self.rows {
            write!(out, "{}", row.k).unwrap();
            for v in &row.per_task {
                write!(out, ",{v}").unwrap();
            }
            writeln!(out, ",{}", row.mean).unwrap();
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("routed accuracy per K (final state)\n");
        for row in &self.rows {
            writeln!(
                out,
                "K {:>3}  mean {:.4}  per task [{}]",
                row.k,
                row.mean,
                row.per_task
                    .iter()
                    .map(|v| format!("{v:.4}"))
                    .collect::<Vec<_>>()
                    .join(", ")
            )
            .unwrap();
        }
        writeln!(out, "spread (max - min) {:.4}", self.spread()).unwrap();
        out
    }
}

/// Runs the benchmark once, then re-evaluates only the routing phase for
/// each K against the stored final session state. Duplicate K values are
/// collapsed.
pub fn sweep_k(
    tasks: &[SyntheticTask],
    config: &BenchmarkConfig,
    k_values: &[usize],
) -> Result<(KSweepTable, BenchmarkResult), HarnessError> {
    if k_values.is_empty() {
        return Err(HarnessError::BadConfig("no K values to sweep".to_string()));
    }
    if k_values.contains(&0) {
        return Err(HarnessError::BadConfig("K must be at least 1".to_string()));
    }
    let result = run_benchmark(tasks, config)?;
    let models = reconstructed_models(&result.state, &result.base)?;
    let test_sets: Vec<Vec<Sample>> = tasks.iter().map(|t| t.test_set()).collect();

    let mut ks: Vec<usize> = k_values.to_vec();
    ks.sort_unstable();
    ks.dedup();

    let mut rows = Vec::with_capacity(ks.len());
    for k in ks {
        let per_task: Vec<f64> = test_sets
            .iter()
            .map(|test| routed_accuracy(&models, &result.state.prototypes, k, test))
            .collect::<Result<_, _>>()?;
        let mean = per_task.iter().sum::<f64>() / per_task.len() as f64;
        rows.push(KSweepRow { k, per_task, mean });
    }
    Ok((KSweepTable { rows }, result))
}

/// Singular values (descending) of a small dense matrix given as rows.
///
/// One-sided Jacobi: rows are rotated in pairs until mutually orthogonal,
/// after which the row norms are the singular values. Working on the
/// matrix directly (not its Gram matrix) keeps full relative accuracy for
/// tiny singular values, which the rank checks depend on.
pub fn singular_values(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len();
    if n == 0 {
        return Vec::new();
    }
    let mut m: Vec<Vec<f64>> = rows.to_vec();
    for _ in 0..60 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let mut app = 0.0f64;
                let mut aqq = 0.0f64;
                let mut apq = 0.0f64;
                for (x, y) in m[p].iter().zip(&m[q]) {
                    app += x * x;
                    aqq += y * y;
                    apq += x * y;
                }
                if apq.abs() <= 1e-15 * (app * aqq).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (aqq - app) / (2.0 * apq);
                let t = zeta.signum() / (zeta.abs() + (zeta * zeta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = c * t;
                for k in 0..m[p].len() {
                    let xp = m[p][k];
                    let xq = m[q][k];
                    m[p][k] = c * xp - s * xq;
                    m[q][k] = s * xp + c * xq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = m
        .iter()
        .map(|row| row.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|a, b| b.partial_cmp(a).expect("finite singular values"));
    sv
}
