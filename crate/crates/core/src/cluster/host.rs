// Copyright 2026 The vmstream Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::guest::{GuestVm, PageState, WorkloadRunner};
use crate::ids::{HostId, VmId};
use crate::page_store::{ContentHash, PageContent, PageStore};
use crate::stream::HostCache;

pub const GIB: u64 = 1 << 30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HostSpec {
    pub host_id: HostId,
    pub ram_capacity_bytes: u64,
    pub nic_bandwidth_bits_per_s: u64,
    /// Fraction of RAM reserved for the streamed-page read cache.
    pub cache_fraction: f64,
    /// Informational; CPU is not modeled.
    pub cores: u32,
}

impl HostSpec {
    /// Eight cores, 16 GiB of RAM, a 10 Gbit/s NIC and a 10% read cache.
    pub fn new(host_id: impl Into<HostId>) -> Self {
        HostSpec {
            host_id: host_id.into(),
            ram_capacity_bytes: 16 * GIB,
            nic_bandwidth_bits_per_s: 10_000_000_000,
            cache_fraction: 0.10,
            cores: 8,
        }
    }

    pub fn cache_bytes(&self) -> u64 {
        (self.ram_capacity_bytes as f64 * self.cache_fraction) as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VmKind {
    Booted,
    Clone,
}

/// A guest placed on a host.
pub struct HostedVm {
    pub vm: GuestVm,
    pub kind: VmKind,
    /// Private bytes the admission decision set aside for this VM.
    pub reservation_bytes: u64,
    /// Present once the VM is live and executing its workload.
    pub runner: Option<WorkloadRunner>,
    /// Bytes per second of background streaming; 0 disables it.
    pub background_bps: u64,
    /// Lowest page background streaming has not yet passed.
    pub background_cursor: u64,
    pub template: Option<String>,
}

/// Host memory outside the guests' private pages.
///
/// `resident` holds one reference per `Shared` page of every guest on the
/// host plus one per cache entry, so its unique content is exactly the
/// host's shared physical footprint.
pub struct HostMem {
    pub resident: PageStore,
    pub cache: HostCache,
    lru: HashMap<ContentHash, u64>,
    tick: u64,
    /// Earliest virtual time each streamed hash is usable on this host.
    avail: HashMap<ContentHash, u64>,
}

impl HostMem {
    pub fn new(host_id: HostId, cache_bytes: u64) -> Self {
        HostMem {
            resident: PageStore::new(),
            cache: HostCache::new(host_id, cache_bytes),
            lru: HashMap::new(),
            tick: 0,
            avail: HashMap::new(),
        }
    }

    pub fn touch(&mut self, h: &ContentHash) {
        self.tick += 1;
        self.lru.insert(*h, self.tick);
    }

    pub fn lru_tick(&self, h: &ContentHash) -> u64 {
        self.lru.get(h).copied().unwrap_or(0)
    }

    /// Adds `content` to the read cache; the cache's store reference is taken
    /// here and released for whatever the cache evicts.
    pub fn cache_insert(&mut self, content: &PageContent) -> Result<()> {
        if let Some(evicted) = self.cache.insert(content.clone()) {
            self.resident.put_page(content);
            for h in evicted {
                self.resident.release_page(&h)?;
                self.forget_if_gone(&h);
            }
        }
        Ok(())
    }

    /// Drops a hash from the cache, releasing its reference.
    pub fn cache_remove(&mut self, h: &ContentHash) -> Result<bool> {
        if self.cache.remove(h) {
            self.resident.release_page(h)?;
            self.forget_if_gone(h);
            return Ok(true);
        }
        Ok(false)
    }

    pub fn release_shared(&mut self, h: &ContentHash) -> Result<()> {
        self.resident.release_page(h)?;
        self.forget_if_gone(h);
        Ok(())
    }

    fn forget_if_gone(&mut self, h: &ContentHash) {
        if !self.resident.contains(h) {
            self.lru.remove(h);
            self.avail.remove(h);
        }
    }

    pub(crate) fn available_at(&self, h: &ContentHash) -> u64 {
        self.avail.get(h).copied().unwrap_or(0)
    }

    pub(crate) fn set_available(&mut self, h: ContentHash, t: u64) {
        let e = self.avail.entry(h).or_insert(t);
        *e = (*e).min(t);
    }

    /// Resident hashes ordered least recently used first.
    pub fn lru_hashes(&self) -> Vec<ContentHash> {
        let mut v: Vec<(u64, ContentHash)> = self
            .resident
            .hashes()
            .map(|h| (self.lru_tick(h), *h))
            .collect();
        v.sort_unstable();
        v.into_iter().map(|(_, h)| h).collect()
    }
}

pub struct Host {
    pub spec: HostSpec,
    pub mem: HostMem,
    pub vms: BTreeMap<VmId, HostedVm>,
    /// Set after an overcommit failure; the host admits nothing further.
    pub refused: bool,
}

impl Host {
    pub fn new(spec: HostSpec) -> Self {
        let mem = HostMem::new(spec.host_id.clone(), spec.cache_bytes());
        Host {
            spec,
            mem,
            vms: BTreeMap::new(),
            refused: false,
        }
    }

    pub fn id(&self) -> &HostId {
        &self.spec.host_id
    }

    pub fn private_bytes(&self) -> u64 {
        self.vms.values().map(|v| v.vm.space.private_bytes()).sum()
    }

    /// Physical bytes charged: private pages plus unique resident content.
    pub fn physical_bytes(&self) -> u64 {
        self.private_bytes() + self.mem.resident.stored_bytes()
    }

    /// Removes a VM, releasing the resident references of its shared pages.
    pub fn evict_vm(&mut self, id: &VmId) -> Option<HostedVm> {
        let hv = self.vms.remove(id)?;
        for (_, s) in hv.vm.space.overrides() {
            if let PageState::Shared(h) = s {
                self.mem
                    .release_shared(h)
                    .expect("shared page holds a resident reference");
            }
        }
        Some(hv)
    }
}
