//! Multi-instance learning toolkit.
//!
//! Bags of symptom tokens are embedded, contextualized with masked multi-head
//! self-attention, pooled into bag representations by self-adaptive and
//! gated-attention multi-instance pooling, and scored with a sigmoid head
//! trained under focal loss. The crate also ships the classic deep MIL
//! baselines, a synthetic witness-bag generator, stratified cross-validation,
//! and the sweep protocols exposed by the `milnet` binary.

pub mod autograd;
pub mod bagdata;
pub mod evalx;
pub mod model;
pub mod trainer;
pub mod cli;

pub(crate) mod util;
