// Copyright 2026 The vmstream Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

//! Scenario files (TOML).
//!
//! ```toml
//! format_version = 1
//! boot_duration_s = 96.9
//!
//! [[hosts]]
//! host_id = "h0"
//!
//! [[templates]]
//! name = "web"
//! memory_mib = 1024
//! disk_mib = 20480
//! workload = { kind = "uniform", write_fraction = 0.1, ops_per_second = 1000.0 }
//!
//! [[script]]
//! action = "boot_vm"
//! at_s = 0.0
//! vm = "parent"
//! template = "web"
//! host = "h0"
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cluster::{HostSpec, GIB};
use crate::error::{Error, Result};
use crate::footprint::EvictionPolicy;
use crate::guest::WorkloadSpec;
use crate::ids::HostId;
use crate::migration::MigrationMode;
use crate::page_store::PAGE_BYTES;

pub const FORMAT_VERSION: u32 = 1;
const MIB: u64 = 1 << 20;

fn d_boot() -> f64 {
    96.9
}
fn d_latency() -> u64 {
    500
}
fn d_store_bw() -> f64 {
    10.0
}
fn d_ready() -> u64 {
    100
}
fn d_setup() -> u64 {
    20_000
}
fn d_window() -> u64 {
    crate::stream::DEFAULT_PREFETCH_WINDOW
}
fn d_one() -> f64 {
    1.0
}
fn d_quarter() -> f64 {
    0.25
}
fn d_hosts() -> Vec<HostConfig> {
    (0..4).map(|i| HostConfig::new(format!("h{i}"))).collect()
}
fn d_ram() -> f64 {
    16.0
}
fn d_nic() -> f64 {
    10.0
}
fn d_cache() -> f64 {
    0.10
}
fn d_cores() -> u32 {
    8
}
fn d_vcpu() -> usize {
    crate::guest::DEFAULT_VCPU_BYTES
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HostConfig {
    pub host_id: String,
    #[serde(default = "d_ram")]
    pub ram_gib: f64,
    #[serde(default = "d_nic")]
    pub nic_gbit: f64,
    #[serde(default = "d_cache")]
    pub cache_fraction: f64,
    #[serde(default = "d_cores")]
    pub cores: u32,
}

impl HostConfig {
    pub fn new(host_id: impl Into<String>) -> Self {
        HostConfig {
            host_id: host_id.into(),
            ram_gib: d_ram(),
            nic_gbit: d_nic(),
            cache_fraction: d_cache(),
            cores: d_cores(),
        }
    }

    pub fn spec(&self) -> HostSpec {
        HostSpec {
            host_id: HostId::new(&self.host_id),
            ram_capacity_bytes: (self.ram_gib * GIB as f64) as u64,
            nic_bandwidth_bits_per_s: (self.nic_gbit * 1e9) as u64,
            cache_fraction: self.cache_fraction,
            cores: self.cores,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Template {
    pub name: String,
    pub memory_mib: u64,
    pub disk_mib: u64,
    /// Leading share of memory a freshly booted guest has populated.
    #[serde(default = "d_quarter")]
    pub boot_resident_fraction: f64,
    #[serde(default = "d_vcpu")]
    pub vcpu_bytes: usize,
    pub workload: WorkloadSpec,
}

impl Template {
    pub fn page_count(&self) -> u64 {
        self.memory_mib * MIB / PAGE_BYTES
    }

    pub fn memory_bytes(&self) -> u64 {
        self.memory_mib * MIB
    }

    pub fn disk_bytes(&self) -> u64 {
        self.disk_mib * MIB
    }

    pub fn disk_pages(&self) -> u64 {
        self.disk_bytes() / PAGE_BYTES
    }

    pub fn boot_resident_pages(&self) -> u64 {
        (self.page_count() as f64 * self.boot_resident_fraction).round() as u64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum Command {
    BootVm {
        at_s: f64,
        vm: String,
        template: String,
        host: String,
    },
    CreateImage {
        at_s: f64,
        vm: String,
        image: String,
        /// Remove the parent VM once the image exists.
        #[serde(default)]
        retire_parent: bool,
    },
    CloneVm {
        at_s: f64,
        image: String,
        count: u64,
        /// Host for every clone; round-robin over all hosts when absent.
        #[serde(default)]
        host: Option<String>,
        /// Clone ids are `<prefix><n>`; defaults to `<image>-`.
        #[serde(default)]
        prefix: Option<String>,
    },
    Migrate {
        at_s: f64,
        vm: String,
        to: String,
        mode: MigrationMode,
        #[serde(default)]
        max_rounds: Option<u32>,
        #[serde(default)]
        stop_threshold_pages: Option<u64>,
    },
    RunFor {
        at_s: f64,
        duration_s: f64,
    },
}

impl Command {
    pub fn at_s(&self) -> f64 {
        match self {
            Command::BootVm { at_s, .. }
            | Command::CreateImage { at_s, .. }
            | Command::CloneVm { at_s, .. }
            | Command::Migrate { at_s, .. }
            | Command::RunFor { at_s, .. } => *at_s,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub format_version: u32,
    #[serde(default)]
    pub name: String,
    #[serde(default = "d_boot")]
    pub boot_duration_s: f64,
    #[serde(default = "d_latency")]
    pub link_latency_us: u64,
    #[serde(default = "d_store_bw")]
    pub store_gbit: f64,
    /// Ops a VM must complete after going live to count as ready.
    #[serde(default = "d_ready")]
    pub ready_ops: u64,
    #[serde(default = "d_setup")]
    pub clone_setup_us: u64,
    #[serde(default = "d_window")]
    pub prefetch_window: u64,
    /// Per-clone background streaming rate in bytes per second; 0 is off.
    #[serde(default)]
    pub background_bps: u64,
    #[serde(default = "d_one")]
    pub enforce_interval_s: f64,
    #[serde(default = "d_one")]
    pub boot_touch_fraction: f64,
    #[serde(default = "d_quarter")]
    pub clone_touch_fraction: f64,
    #[serde(default)]
    pub eviction: EvictionPolicy,
    #[serde(default = "d_hosts")]
    pub hosts: Vec<HostConfig>,
    #[serde(default)]
    pub templates: Vec<Template>,
    #[serde(default)]
    pub script: Vec<Command>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

fn fraction(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(bad(format!("{name} must be within [0, 1], got {v}")));
    }
    Ok(())
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Scenario = toml::from_str(text).map_err(|e| bad(format!("scenario: {e}")))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| bad(format!("cannot read scenario {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn template(&self, name: &str) -> Result<&Template> {
        self.templates
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| bad(format!("unknown template {name:?}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(bad(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        if !(self.boot_duration_s >= 0.0 && self.boot_duration_s.is_finite()) {
            return Err(bad("boot_duration_s must be a finite non-negative number"));
        }
        if !(self.store_gbit > 0.0) {
            return Err(bad("store_gbit must be positive"));
        }
        if self.ready_ops == 0 {
            return Err(bad("ready_ops must be at least 1"));
        }
        if !(self.enforce_interval_s > 0.0) {
            return Err(bad("enforce_interval_s must be positive"));
        }
        fraction("boot_touch_fraction", self.boot_touch_fraction)?;
        fraction("clone_touch_fraction", self.clone_touch_fraction)?;
        self.eviction.validate()?;
        if self.hosts.is_empty() {
            return Err(bad("at least one host is required"));
        }
        let mut hosts = BTreeSet::new();
        for h in &self.hosts {
            if !hosts.insert(h.host_id.as_str()) {
                return Err(bad(format!("duplicate host {:?}", h.host_id)));
            }
            if !(h.ram_gib > 0.0 && h.nic_gbit > 0.0) {
                return Err(bad(format!("host {:?} needs positive RAM and NIC bandwidth", h.host_id)));
            }
            fraction("cache_fraction", h.cache_fraction)?;
        }
        let mut names = BTreeSet::new();
        for t in &self.templates {
            if !names.insert(t.name.as_str()) {
                return Err(bad(format!("duplicate template {:?}", t.name)));
            }
            if t.page_count() == 0 {
                return Err(bad(format!("template {:?} has no memory", t.name)));
            }
            fraction("boot_resident_fraction", t.boot_resident_fraction)?;
            t.workload
                .validate(t.page_count())
                .map_err(|e| bad(format!("template {:?}: {e}", t.name)))?;
        }
        let host = |h: &str| -> Result<()> {
            if hosts.contains(h) {
                Ok(())
            } else {
                Err(bad(format!("unknown host {h:?}")))
            }
        };
        let mut prev = 0.0;
        let mut vms: BTreeSet<String> = BTreeSet::new();
        let mut images: BTreeMap<String, ()> = BTreeMap::new();
        for (i, c) in self.script.iter().enumerate() {
            let at = c.at_s();
            if !(at.is_finite() && at >= prev) {
                return Err(bad(format!(
                    "script entry {i}: at_s {at} must be finite and not before {prev}"
                )));
            }
            prev = at;
            match c {
                Command::BootVm { vm, template, host: h, .. } => {
                    self.template(template)?;
                    host(h)?;
                    if !vms.insert(vm.clone()) {
                        return Err(bad(format!("script entry {i}: vm {vm:?} already exists")));
                    }
                }
                Command::CreateImage { vm, image, .. } => {
                    if !vms.contains(vm) {
                        return Err(bad(format!("script entry {i}: unknown vm {vm:?}")));
                    }
                    if images.insert(image.clone(), ()).is_some() {
                        return Err(bad(format!("script entry {i}: image {image:?} already exists")));
                    }
                }
                Command::CloneVm { image, host: h, count, prefix, .. } => {
                    if !images.contains_key(image) {
                        return Err(bad(format!("script entry {i}: unknown image {image:?}")));
                    }
                    if let Some(h) = h {
                        host(h)?;
                    }
                    let prefix = prefix.clone().unwrap_or_else(|| format!("{image}-"));
                    for n in 0..*count {
                        let id = format!("{prefix}{n}");
                        if !vms.insert(id.clone()) {
                            return Err(bad(format!("script entry {i}: vm {id:?} already exists")));
                        }
                    }
                }
                Command::Migrate { vm, to, max_rounds, .. } => {
                    if !vms.contains(vm) {
                        return Err(bad(format!("script entry {i}: unknown vm {vm:?}")));
                    }
                    host(to)?;
                    if *max_rounds == Some(0) {
                        return Err(bad(format!("script entry {i}: max_rounds must be at least 1")));
                    }
                }
                Command::RunFor { duration_s, .. } => {
                    if !(duration_s.is_finite() && *duration_s >= 0.0) {
                        return Err(bad(format!("script entry {i}: bad duration {duration_s}")));
                    }
                }
            }
        }
        Ok(())
    }
}
