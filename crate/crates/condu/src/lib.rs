//! Continual model fusion with a single unified delta model.
//!
//! The crate keeps one dense delta vector for any number of fine-tuned
//! tasks. Each task additionally stores a *trigger*: a bit-packed
//! sign-agreement mask plus one rescaling scalar, enough to reconstruct an
//! approximate task-specific delta from the unified vector on demand.
//! Task-agnostic queries are routed to the most relevant tasks by cosine
//! similarity against per-category prototype vectors.
//!
//! Modules:
//! - [`tensor_store`]: flat parameter space, named-tensor layout, and the
//!   `CONDUF01` binary container that every artifact serializes to.
//! - [`fusion_core`]: delta construction, sign-election unification,
//!   trigger computation, decoupling, and the per-session update loop.
//! - [`triggers`]: bit-packed masks, trigger values, and the storage
//!   accountant comparing unified-plus-triggers storage to per-task dense
//!   checkpoints.
//! - [`convergence_lab`]: the fixed-set iteration (repeated
//!   unify/trigger/decouple rounds), its trace, and stability checks.
//! - [`routing`]: prototype computation, cosine routing, top-K logit
//!   aggregation, and task-aware prediction.
//! - [`sim_harness`]: synthetic-task testbed with toy trainers and the
//!   Transfer/Average/Last accuracy metrics.

pub mod convergence_lab;
pub mod fusion_core;
pub mod rng;
pub mod routing;
pub mod sim_harness;
pub mod tensor_store;
pub mod triggers;

pub use fusion_core::{DeltaModel, SessionState, UnifiedDelta};
pub use routing::{PrototypeSet, RoutingDecision};
pub use tensor_store::{Container, Dtype, FlatVector, NamedTensor, TensorLayout};
pub use triggers::{PackedMask, StorageReport, TaskTrigger};
