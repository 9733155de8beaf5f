// Copyright 2026 The vmstream Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

//! Deterministic discrete-event simulation of a small cloud: scenario
//! files in, metrics and a summary out.

mod compare;
mod engine;
mod metrics;
mod scenario;

pub use compare::{compare, ComparisonReport};
pub use engine::{run, run_live, EventQueue, SimClock};
pub use metrics::{read_summary, Metrics, Record, Summary, TemplateInfo, VmSummary};
pub use scenario::{Command, HostConfig, Scenario, Template, FORMAT_VERSION};
