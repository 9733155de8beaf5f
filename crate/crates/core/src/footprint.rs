// Copyright 2026 The vmstream Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

//! Host memory accounting, watermark eviction and admission control.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::cluster::Host;
use crate::error::{Error, Result};
use crate::guest::PageState;
use crate::ids::VmId;
use crate::page_store::{ContentHash, PAGE_BYTES};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct VmFootprint {
    pub logical_bytes: u64,
    pub private_bytes: u64,
    pub shared_bytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FootprintReport {
    pub per_vm: BTreeMap<VmId, VmFootprint>,
    pub private_bytes: u64,
    /// Unique content behind the guests' `Shared` pages, charged once.
    pub unique_shared_bytes: u64,
    /// Read-cache content no guest page currently maps.
    pub cache_only_bytes: u64,
    pub host_physical_bytes: u64,
    /// Resident guest bytes (private + shared, per VM) minus what they
    /// physically occupy.
    pub savings_bytes: u64,
    pub oversubscription_ratio: f64,
}

/// Exact host accounting.
pub fn account(host: &Host) -> FootprintReport {
    let mut r = FootprintReport::default();
    let mut shared: HashSet<ContentHash> = HashSet::new();
    let mut logical = 0u64;
    let mut resident_sum = 0u64;
    for (id, hv) in &host.vms {
        let s = &hv.vm.space;
        let f = VmFootprint {
            logical_bytes: s.logical_bytes(),
            private_bytes: s.private_bytes(),
            shared_bytes: s.shared_pages() * PAGE_BYTES,
        };
        for (_, st) in s.overrides() {
            if let PageState::Shared(h) = st {
                shared.insert(*h);
            }
        }
        logical += f.logical_bytes;
        resident_sum += f.private_bytes + f.shared_bytes;
        r.private_bytes += f.private_bytes;
        r.per_vm.insert(id.clone(), f);
    }
    r.unique_shared_bytes = shared.len() as u64 * PAGE_BYTES;
    let stored = host.mem.resident.stored_bytes();
    r.cache_only_bytes = stored - r.unique_shared_bytes;
    r.host_physical_bytes = r.private_bytes + stored;
    r.savings_bytes = resident_sum - (r.private_bytes + r.unique_shared_bytes);
    r.oversubscription_ratio = logical as f64 / host.spec.ram_capacity_bytes as f64;
    r
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvictionPolicy {
    pub high_watermark: f64,
    pub low_watermark: f64,
}

impl Default for EvictionPolicy {
    fn default() -> Self {
        EvictionPolicy {
            high_watermark: 0.90,
            low_watermark: 0.80,
        }
    }
}

impl EvictionPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.low_watermark >= 0.0
            && self.low_watermark < self.high_watermark
            && self.high_watermark <= 1.0)
        {
            return Err(Error::InvalidConfig(format!(
                "watermarks need 0 <= low < high <= 1, got {} / {}",
                self.low_watermark, self.high_watermark
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct EvictionReport {
    /// Unique content pages dropped from host memory.
    pub evicted_pages: u64,
    pub freed_bytes: u64,
    /// Guest pages returned to `Remote`.
    pub reverted_pages: u64,
}

/// Brings host memory under the low watermark once it crosses the high one,
/// dropping clean shared content least recently used first. Guests whose
/// pages lose their content see them `Remote` again and refetch on access.
pub fn enforce(host: &mut Host, policy: &EvictionPolicy) -> Result<EvictionReport> {
    policy.validate()?;
    let cap = host.spec.ram_capacity_bytes;
    let private = host.private_bytes();
    if private > cap {
        host.refused = true;
        return Err(Error::OvercommitFailure {
            host: host.id().to_string(),
            private_bytes: private,
            capacity_bytes: cap,
        });
    }
    let mut rep = EvictionReport::default();
    let high = (policy.high_watermark * cap as f64) as u64;
    let low = (policy.low_watermark * cap as f64) as u64;
    if host.physical_bytes() <= high {
        return Ok(rep);
    }
    // hash -> guest pages mapping it. A `Shared` page whose hash is not its
    // image's hash could not be refetched, so its content is pinned.
    let mut users: HashMap<ContentHash, Vec<(VmId, u64)>> = HashMap::new();
    let mut pinned: HashSet<ContentHash> = HashSet::new();
    for (id, hv) in &host.vms {
        let s = &hv.vm.space;
        for (p, st) in s.overrides() {
            if let PageState::Shared(h) = st {
                if s.source_hash(p) == *h {
                    users.entry(*h).or_default().push((id.clone(), p));
                } else {
                    pinned.insert(*h);
                }
            }
        }
    }
    let mut physical = host.physical_bytes();
    for h in host.mem.lru_hashes() {
        if physical <= low {
            break;
        }
        if pinned.contains(&h) {
            continue;
        }
        for (vm, p) in users.remove(&h).unwrap_or_default() {
            let hv = host.vms.get_mut(&vm).expect("indexed above");
            hv.vm.space.revert_to_default(p);
            host.mem.release_shared(&h)?;
            rep.reverted_pages += 1;
        }
        host.mem.cache_remove(&h)?;
        if host.mem.resident.contains(&h) {
            // Held by something outside this index (an in-progress
            // migration buffer); leave it.
            continue;
        }
        rep.evicted_pages += 1;
        rep.freed_bytes += PAGE_BYTES;
        physical -= PAGE_BYTES;
    }
    Ok(rep)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Admission {
    /// Admitted; the private bytes set aside for the VM.
    Admit { reservation_bytes: u64 },
    Reject { projected_bytes: u64, capacity_bytes: u64 },
}

impl Admission {
    pub fn is_admit(&self) -> bool {
        matches!(self, Admission::Admit { .. })
    }
}

/// Private bytes expected of a VM of `logical_bytes` that touches
/// `touch_fraction` of its memory.
pub fn estimate_private(logical_bytes: u64, touch_fraction: f64) -> u64 {
    (logical_bytes as f64 * touch_fraction.clamp(0.0, 1.0)).ceil() as u64
}

/// Admission control on projected private memory: each placed VM counts
/// the larger of its actual private bytes and its reservation.
pub fn admit(host: &Host, logical_bytes: u64, touch_fraction: f64) -> Admission {
    let cap = host.spec.ram_capacity_bytes;
    let committed: u64 = host
        .vms
        .values()
        .map(|v| v.vm.space.private_bytes().max(v.reservation_bytes))
        .sum();
    let want = estimate_private(logical_bytes, touch_fraction);
    let projected = committed + want;
    if host.refused || projected > cap {
        Admission::Reject {
            projected_bytes: projected,
            capacity_bytes: cap,
        }
    } else {
        Admission::Admit {
            reservation_bytes: want,
        }
    }
}
