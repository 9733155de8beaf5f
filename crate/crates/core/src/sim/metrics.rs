// Copyright 2026 The vmstream Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::scenario::FORMAT_VERSION;
use crate::error::{Error, Result};
use crate::migration::MigrationReport;

/// One measurement line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub time_us: u64,
    pub kind: String,
    pub subject: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemplateInfo {
    pub name: String,
    pub memory_mib: u64,
    pub disk_mib: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VmSummary {
    pub kind: String,
    pub template: String,
    /// Last host, `None` once the VM is gone.
    pub host: Option<String>,
    pub requested_at_us: u64,
    pub ready_at_us: Option<u64>,
    pub startup_latency_us: Option<u64>,
    pub wire_bytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub format_version: u32,
    pub scenario: String,
    pub seed: u64,
    pub end_time_us: u64,
    pub templates: Vec<TemplateInfo>,
    pub vms: BTreeMap<String, VmSummary>,
    pub mean_boot_startup_us: Option<f64>,
    pub mean_clone_startup_us: Option<f64>,
    pub max_concurrent_booted: u64,
    pub max_concurrent_clones: u64,
    pub admission_rejections: u64,
    /// Mean wire bytes charged to each ready booted VM.
    pub boot_wire_per_vm: Option<f64>,
    /// Mean wire bytes charged to each ready clone.
    pub clone_wire_per_vm: Option<f64>,
    pub wire_by_purpose: BTreeMap<String, u64>,
    pub content_by_purpose: BTreeMap<String, u64>,
    pub wire_total: u64,
    pub migrations: Vec<MigrationReport>,
    pub errors: Vec<String>,
}

/// Output of one simulation run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Metrics {
    pub records: Vec<Record>,
    pub summary: Summary,
}

#[derive(Serialize)]
struct Header {
    format_version: u32,
}

impl Metrics {
    pub fn push(&mut self, time_us: u64, kind: &str, subject: impl Into<String>, value: f64) {
        self.records.push(Record {
            time_us,
            kind: kind.to_string(),
            subject: subject.into(),
            value,
        });
    }

    pub fn of_kind<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = &'a Record> + 'a {
        self.records.iter().filter(move |r| r.kind == kind)
    }

    /// `metrics.jsonl`: a version header line, then one record per line.
    pub fn jsonl(&self) -> String {
        let mut s = serde_json::to_string(&Header {
            format_version: FORMAT_VERSION,
        })
        .expect("header serializes");
        s.push('\n');
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("record serializes"));
            s.push('\n');
        }
        s
    }

    pub fn summary_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.summary).expect("summary serializes");
        s.push('\n');
        s
    }

    /// Writes `metrics.jsonl` and `summary.json` into `dir`, creating it.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (name, body) in [("metrics.jsonl", self.jsonl()), ("summary.json", self.summary_json())] {
            let mut f = tempfile::NamedTempFile::new_in(dir)?;
            f.write_all(body.as_bytes())?;
            f.persist(dir.join(name)).map_err(|e| Error::Io(e.error))?;
        }
        Ok(())
    }
}

/// Reads `summary.json` from a report directory.
pub fn read_summary(dir: &Path) -> Result<Summary> {
    let path = dir.join("summary.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::InvalidConfig(format!("cannot read {}: {e}", path.display())))?;
    let s: Summary = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    if s.format_version != FORMAT_VERSION {
        return Err(Error::InvalidConfig(format!(
            "{}: unsupported format_version {}",
            path.display(),
            s.format_version
        )));
    }
    Ok(s)
}
