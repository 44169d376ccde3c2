//! Knowledge-graph representation learning with contextual pretraining.
//!
//! The toolkit covers the full pipeline:
//!
//! * [`kg`] — triple storage, TSV ingest, context lookup, negative sampling,
//!   and task-dataset splits.
//! * [`context`] — assembly of fixed-length context-slot sequences for any
//!   triple to be scored.
//! * [`tensor`], [`optim`], [`gradcheck`] — a small dense-tensor autodiff
//!   engine with Adam, warmup, and finite-difference verification.
//! * [`model`] — the contextual triple classifier: a per-triple feed-forward
//!   context encoder feeding a bidirectional transformer aggregator with
//!   pretraining and finetuning heads.
//! * [`baselines`] — TransE, ComplEx, and RotatE under the same training and
//!   evaluation harness.
//! * [`train`], [`eval`] — training loops, ranking metrics, and the
//!   threshold-robustness sweep.
//! * [`checkpoint`] — deterministic binary serialization of parameters.
//! * [`synth`] — deterministic corpus generators for tests and demos.

pub mod baselines;
pub mod checkpoint;
pub mod context;
pub mod eval;
pub mod gradcheck;
pub mod kg;
pub mod model;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod train;
