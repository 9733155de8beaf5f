// Copyright 2026 The vmstream Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

//! Control-plane state kept in the store directory.
//!
//! Guest memory is not persisted: it is rebuilt deterministically from the
//! recorded VM descriptors (template, seed, source image) each time a
//! command needs it.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use vms_core::cluster::{Datacenter, HostedVm, StreamConfig, VmKind};
use vms_core::footprint::{admit, Admission};
use vms_core::guest::{create_vm_sized, OsImage, WorkloadKind, WorkloadRunner, WorkloadSpec};
use vms_core::page_store::{read_image, read_manifest, seed_from_str};
use vms_core::sim::{HostConfig, Template};
use vms_core::{Error, HostId, IdentityOverrides, IdentityRecord, ImageId, Result, VmId};

const STATE_FILE: &str = "state.json";
const STATE_VERSION: u32 = 1;
/// Virtual time every rebuilt VM has run for before a command acts on it.
pub const WARMUP_US: u64 = 1_000_000;
const LATENCY_US: u64 = 500;
const STORE_BPS: u64 = 10_000_000_000;
const CLONE_TOUCH: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Booted,
    Clone,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VmEntry {
    pub kind: Kind,
    pub host: String,
    pub template: String,
    /// Absolute path of the live image a clone was started from.
    #[serde(default)]
    pub image: Option<PathBuf>,
    pub hostname: String,
    pub net_id: String,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub format_version: u32,
    pub hosts: Vec<HostConfig>,
    pub templates: Vec<Template>,
    pub vms: BTreeMap<String, VmEntry>,
}

fn phased(pages: u64) -> WorkloadSpec {
    WorkloadSpec::new(
        WorkloadKind::Phased {
            phases: vec![vms_core::guest::Phase {
                start: 0,
                end: pages / 4,
                duration_s: 3600.0,
            }],
        },
        0.1,
        1000.0,
        0,
    )
}

impl Default for State {
    fn default() -> Self {
        let demo = Template {
            name: "demo".into(),
            memory_mib: 64,
            disk_mib: 256,
            boot_resident_fraction: 0.25,
            vcpu_bytes: vms_core::guest::DEFAULT_VCPU_BYTES,
            workload: phased(16384),
        };
        let ubuntu = Template {
            name: "ubuntu".into(),
            memory_mib: 1024,
            disk_mib: 20480,
            boot_resident_fraction: 0.25,
            vcpu_bytes: vms_core::guest::DEFAULT_VCPU_BYTES,
            workload: phased(262144),
        };
        let mut vms = BTreeMap::new();
        vms.insert(
            "demo".to_string(),
            VmEntry {
                kind: Kind::Booted,
                host: "h0".into(),
                template: "demo".into(),
                image: None,
                hostname: "demo".into(),
                net_id: "net-demo".into(),
                seed: 0,
            },
        );
        State {
            format_version: STATE_VERSION,
            hosts: (0..4).map(|i| HostConfig::new(format!("h{i}"))).collect(),
            templates: vec![demo, ubuntu],
            vms,
        }
    }
}

impl State {
    /// Loads the store's state, or the preseeded default for a new store.
    pub fn load(store: &Path) -> Result<Self> {
        let path = store.join(STATE_FILE);
        if !path.exists() {
            return Ok(State::default());
        }
        let text = std::fs::read_to_string(&path)?;
        let s: State = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        if s.format_version != STATE_VERSION {
            return Err(Error::InvalidConfig(format!(
                "{}: unsupported format_version {}",
                path.display(),
                s.format_version
            )));
        }
        Ok(s)
    }

    pub fn save(&self, store: &Path) -> Result<()> {
        std::fs::create_dir_all(store)?;
        let mut f = tempfile::NamedTempFile::new_in(store)?;
        let mut body = serde_json::to_string_pretty(self).expect("state serializes");
        body.push('\n');
        f.write_all(body.as_bytes())?;
        f.persist(store.join(STATE_FILE)).map_err(|e| Error::Io(e.error))?;
        Ok(())
    }

    pub fn template(&self, name: &str) -> Result<&Template> {
        self.templates
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown template {name:?}")))
    }

    pub fn check_host(&self, host: &str) -> Result<()> {
        if self.hosts.iter().any(|h| h.host_id == host) {
            Ok(())
        } else {
            Err(Error::UnknownHost(host.to_string()))
        }
    }

    fn workload(&self, t: &Template, id: &str, seed: u64) -> WorkloadSpec {
        let mut w = t.workload.clone();
        w.seed ^= seed ^ seed_from_str(id);
        w
    }

    /// Rebuilds every VM on simulated hosts and runs each for
    /// [`WARMUP_US`] of virtual time.
    pub fn materialize(&self) -> Result<Datacenter> {
        let mut dc = Datacenter::new(
            self.hosts.iter().map(|h| h.spec()).collect(),
            LATENCY_US,
            STORE_BPS,
            StreamConfig::default(),
        );
        let mut os: BTreeMap<String, OsImage> = BTreeMap::new();
        for (id, e) in &self.vms {
            let t = self.template(&e.template)?;
            let host = HostId::new(&e.host);
            let vm_id = VmId::new(id);
            match e.kind {
                Kind::Booted => {
                    let mut vm = create_vm_sized(
                        id.as_str(),
                        t.page_count(),
                        t.vcpu_bytes,
                        self.workload(t, id, e.seed),
                        IdentityRecord::new(&e.hostname, &e.net_id),
                    )?
                    .with_disk(t.disk_pages(), seed_from_str(&t.name));
                    let image = os
                        .entry(t.name.clone())
                        .or_insert_with(|| OsImage::generate(&t.name, t.boot_resident_pages()));
                    vm.fill_boot_resident(image)?;
                    let runner = WorkloadRunner::new(&vm.workload, vm.page_count(), 0)?;
                    dc.place(
                        &host,
                        HostedVm {
                            vm,
                            kind: VmKind::Booted,
                            reservation_bytes: t.memory_bytes(),
                            runner: Some(runner),
                            background_bps: 0,
                            background_cursor: 0,
                            template: Some(t.name.clone()),
                        },
                    )?;
                }
                Kind::Clone => {
                    let path = e
                        .image
                        .as_ref()
                        .ok_or_else(|| Error::InvalidConfig(format!("clone {id} has no image")))?;
                    let image_id = load_image(&mut dc, path)?;
                    let over = IdentityOverrides {
                        hostname: Some(e.hostname.clone()),
                        net_id: Some(e.net_id.clone()),
                    };
                    let reservation = (t.memory_bytes() as f64 * CLONE_TOUCH) as u64;
                    dc.live_image_start(
                        &image_id,
                        &host,
                        vm_id.clone(),
                        &over,
                        self.workload(t, id, e.seed),
                        reservation,
                        0,
                    )?;
                }
            }
            dc.run_vm(&vm_id, WARMUP_US, None)?;
        }
        Ok(dc)
    }
}

/// Registers the image at `path` with the datacenter's image server once.
pub fn load_image(dc: &mut Datacenter, path: &Path) -> Result<ImageId> {
    let probe = read_manifest(path)?;
    let mut server = dc.images.write().expect("image table poisoned");
    if server.manifest(&probe.image_id).is_ok() {
        return Ok(probe.image_id);
    }
    let m = read_image(path, &mut server.store)?;
    let id = m.image_id.clone();
    server.register(Arc::new(m))?;
    Ok(id)
}

/// Admission check for a new VM of `logical_bytes` on `host`.
pub fn check_admission(dc: &Datacenter, host: &str, logical_bytes: u64, touch: f64) -> Result<u64> {
    match admit(dc.host(&HostId::new(host))?, logical_bytes, touch) {
        Admission::Admit { reservation_bytes } => Ok(reservation_bytes),
        Admission::Reject { projected_bytes, capacity_bytes } => Err(Error::PlacementError(format!(
            "{host}: {projected_bytes} projected private bytes exceed {capacity_bytes}"
        ))),
    }
}

pub const CLONE_TOUCH_FRACTION: f64 = CLONE_TOUCH;
