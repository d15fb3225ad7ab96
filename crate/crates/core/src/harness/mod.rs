// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic data, the planted model, run configuration and the end-to-end
//! pipeline.

pub mod dataset;
pub mod plant;

pub use dataset::{gen_dataset, Dataset, DatasetRecord, DatasetSpec, Split};
pub use plant::{build_planted_model, measure_gates, wire_plant, GateReport, PlantGains, PlantSpec};
pub mod pipeline;

pub use pipeline::{Evaluation, Run, RunConfig, RunSummary};
