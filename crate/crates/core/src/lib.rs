//! Orchestration of expert models by an LLM controller.
//!
//! A request flows through four stages: the controller plans a task graph,
//! picks a model for every task from the registry, the executor runs the
//! graph stage by stage on local or remote endpoints, and the controller
//! writes the final answer from the collected results.

pub mod controller;
pub mod evaluation;
pub mod executor;
pub mod jsonscan;
pub mod registry;
pub mod service;
pub mod taskgraph;
