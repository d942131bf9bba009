//! Triadic similarity judgments for humans and steered model agents.
//!
//! The pipeline runs in five stages:
//!
//! 1. [`concepts`] loads a concept inventory and generates triplets whose
//!    kind-correct and size-correct answers always disagree.
//! 2. [`judgments`] and [`steering`] produce choices on those triplets, from
//!    reference agents, from a residual-stream agent under one of several
//!    steering methods, or (through [`service`]) from human participants.
//! 3. [`embedding`] fits a low-dimensional configuration to the choices by
//!    minimizing the crowd-kernel triplet loss.
//! 4. [`alignment`] compares two configurations with squared Procrustes
//!    correlation and a permutation test.
//! 5. [`report`] renders accuracy tables, alignment grids and scatter plots.

// `!(x > 0.0)` is the NaN-rejecting form used by every parameter check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alignment;
pub mod concepts;
pub mod config;
pub mod embedding;
pub mod judgments;
pub mod report;
pub mod rng;
pub mod service;
pub mod steering;

pub use alignment::{AlignmentResult, ProcrustesFit};
pub use concepts::{Concept, ConceptSet, Dimension, TaskDimension, Triplet, TripletSet};
pub use config::Config;
pub use embedding::{Embedding, FitConfig};
pub use judgments::{AccuracyReport, Judgment, JudgmentSet};
pub use steering::{ActivationTrace, Agent, PromptSpec, SteeringVector, ToyAgent, ToyParams};
