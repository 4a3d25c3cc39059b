//! A self-managing control plane for a simulated microservice mesh.
//!
//! The loop runs Monitor, Analyze, Plan and Execute over a shared,
//! append-only Knowledge journal. [`controller::Controller`] drives the loop
//! against [`simenv::SimEnv`]; [`gateway`] exposes it over HTTP.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod controller;
pub mod detectors;
pub mod executor;
pub mod gateway;
pub mod knowledge;
pub mod planner;
pub mod simenv;
pub(crate) mod stats;
pub mod telemetry;
pub mod types;
