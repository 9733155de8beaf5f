// Copyright 2026 The vmstream Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

//! Live migration between simulated hosts: iterative pre-copy, post-copy
//! with demand faults and a background drain, and stop-and-copy.
//!
//! A migration is computed in one call. Virtual time advances inside it
//! (the workload keeps running on whichever side is live) and the returned
//! report carries the pause, resume and completion instants.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::cluster::{drive, Datacenter, HostMem, Node, Purpose, Streamer};
use crate::error::{Error, Result};
use crate::footprint::{admit, Admission};
use crate::guest::{AddressSpace, FaultHandler, PageState};
use crate::ids::{HostId, ImageId, VmId};
use crate::page_store::{ContentHash, PageContent, PageStore};
use crate::stream::{Bitset, PageRange, ReplyEntry, WireMessage};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MigrationMode {
    #[serde(alias = "pre_copy")]
    PreCopy,
    #[serde(alias = "post_copy")]
    PostCopy,
    #[serde(alias = "stop_copy")]
    StopCopy,
}

impl std::str::FromStr for MigrationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "precopy" | "pre_copy" => Ok(MigrationMode::PreCopy),
            "postcopy" | "post_copy" => Ok(MigrationMode::PostCopy),
            "stopcopy" | "stop_copy" => Ok(MigrationMode::StopCopy),
            _ => Err(Error::InvalidConfig(format!(
                "unknown migration mode {s:?} (precopy, postcopy, stopcopy)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MigrationParams {
    pub mode: MigrationMode,
    pub max_rounds: u32,
    pub stop_threshold_pages: u64,
    /// Pages per transfer message.
    pub batch_pages: usize,
    /// Virtual time at which the source host dies, if it does.
    pub src_failure_at_us: Option<u64>,
}

impl MigrationParams {
    pub fn new(mode: MigrationMode) -> Self {
        MigrationParams {
            mode,
            max_rounds: 8,
            stop_threshold_pages: 64,
            batch_pages: 256,
            src_failure_at_us: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_rounds == 0 {
            return Err(Error::InvalidConfig("max_rounds must be at least 1".into()));
        }
        if self.batch_pages == 0 {
            return Err(Error::InvalidConfig("batch_pages must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MigrationReport {
    pub vm_id: VmId,
    pub mode: MigrationMode,
    /// Transfer rounds completed while the VM was still running.
    pub rounds: u32,
    pub bytes_transferred: u64,
    pub content_bytes: u64,
    pub pages_sent: u64,
    pub downtime_us: u64,
    pub total_us: u64,
    pub pause_at: u64,
    pub resume_at: u64,
    pub completed_at: u64,
    /// Workload ops executed while the migration was in progress.
    pub ops_during: u64,
}

type PageCopy = (ContentHash, PageContent);

fn page_copy(space: &AddressSpace, resident: &PageStore, page: u64) -> Result<Option<PageCopy>> {
    Ok(match space.state(page) {
        PageState::Private(c) => Some((c.hash(), c)),
        PageState::Shared(h) => Some((h, resident.get_page(&h)?)),
        _ => None,
    })
}

fn resident_pages(space: &AddressSpace) -> BTreeSet<u64> {
    space
        .overrides()
        .filter(|(_, s)| s.is_resident())
        .map(|(p, _)| p)
        .collect()
}

/// Installs migrated content: image-identical pages become shared host
/// content, everything else private.
fn install(space: &mut AddressSpace, mem: &mut HostMem, page: u64, (h, c): &PageCopy) -> Result<()> {
    if !h.is_zero() && space.source_hash(page) == *h {
        if mem.resident.contains(h) {
            mem.resident.retain(h)?;
        } else {
            mem.resident.put_page(c);
        }
        space.set_state(page, PageState::Shared(*h))?;
        mem.touch(h);
    } else {
        space.set_state(page, PageState::Private(c.clone()))?;
    }
    Ok(())
}

/// Frames `items` as `PageReply` batches queued on `src -> dst` at `now`;
/// content the destination already holds goes as a hash. Returns the last
/// arrival.
fn send_pages(
    dc: &mut Datacenter,
    vm: &VmId,
    (src, dst): (&HostId, &HostId),
    items: &[(u64, PageCopy)],
    batch: usize,
    now: u64,
) -> Result<u64> {
    let mut last = now;
    let Datacenter { hosts, net, wire, .. } = dc;
    let held = &hosts[dst].mem.resident;
    for chunk in items.chunks(batch) {
        let entries = chunk
            .iter()
            .map(|(p, (h, c))| ReplyEntry {
                page: *p,
                hash: *h,
                content: (!h.is_zero() && !held.contains(h)).then(|| c.clone()),
            })
            .collect();
        let msg = WireMessage::PageReply {
            image_id: ImageId::new(vm.as_str()),
            entries,
        };
        let n = wire.record(Purpose::Migration, Some(vm), &msg);
        last = net.transfer(&Node::Host(src.clone()), &Node::Host(dst.clone()), n, now)?;
    }
    Ok(last)
}

fn send_one(dc: &mut Datacenter, vm: &VmId, from: &HostId, to: &HostId, msg: &WireMessage, now: u64) -> Result<u64> {
    let n = dc.wire.record(Purpose::Migration, Some(vm), msg);
    dc.net
        .transfer(&Node::Host(from.clone()), &Node::Host(to.clone()), n, now)
}

fn lost(dc: &mut Datacenter, vm: &VmId, why: String) -> Error {
    let _ = dc.remove_vm(vm);
    Error::MigrationAborted(format!("{vm}: {why}"))
}

/// Moves `vm` to `dst` starting at virtual time `now`.
pub fn migrate(
    dc: &mut Datacenter,
    vm: &VmId,
    dst: &HostId,
    params: &MigrationParams,
    now: u64,
) -> Result<MigrationReport> {
    params.validate()?;
    let src = dc.locate(vm)?;
    dc.host(dst)?;
    if src == *dst {
        return Err(Error::InvalidConfig(format!("{vm} is already on {dst}")));
    }
    let need = {
        let hv = dc.vm(vm)?;
        let s = &hv.vm.space;
        (s.private_bytes() + s.shared_pages() * crate::page_store::PAGE_BYTES).max(hv.reservation_bytes)
    };
    if let Admission::Reject { projected_bytes, capacity_bytes } = admit(dc.host(dst)?, need, 1.0) {
        return Err(Error::PlacementError(format!(
            "{dst} cannot take {vm}: {projected_bytes} projected bytes > {capacity_bytes}"
        )));
    }
    if dc.net.is_down(&Node::Host(src.clone()), &Node::Host(dst.clone()), now) {
        return Err(Error::StreamUnavailable(format!("link {src} -> {dst} is down")));
    }
    let (bytes0, content0) = (dc.wire.purpose(Purpose::Migration), dc.wire.content(Purpose::Migration));
    let mut rep = match params.mode {
        MigrationMode::PostCopy => postcopy(dc, vm, &src, dst, params, now)?,
        _ => precopy(dc, vm, &src, dst, params, now)?,
    };
    rep.bytes_transferred = dc.wire.purpose(Purpose::Migration) - bytes0;
    rep.content_bytes = dc.wire.content(Purpose::Migration) - content0;
    Ok(rep)
}

fn snapshot(dc: &Datacenter, src: &HostId, vm: &VmId, pages: &BTreeSet<u64>) -> Result<Vec<(u64, PageCopy)>> {
    let host = &dc.hosts[src];
    let space = &host.vms[vm].vm.space;
    let mut out = Vec::with_capacity(pages.len());
    for &p in pages {
        if let Some(c) = page_copy(space, &host.mem.resident, p)? {
            out.push((p, c));
        }
    }
    Ok(out)
}

/// Drops earlier copies of pages about to be resent; a page that is no
/// longer resident must not come back from a stale round.
fn forget(sent: &mut BTreeMap<u64, PageCopy>, pages: &BTreeSet<u64>) {
    for p in pages {
        sent.remove(p);
    }
}

fn precopy(
    dc: &mut Datacenter,
    vm: &VmId,
    src: &HostId,
    dst: &HostId,
    params: &MigrationParams,
    now: u64,
) -> Result<MigrationReport> {
    let (max_rounds, threshold) = match params.mode {
        MigrationMode::StopCopy => (0, u64::MAX),
        _ => (params.max_rounds, params.stop_threshold_pages),
    };
    let running = dc.vm(vm)?.runner.is_some();
    let mut to_send = resident_pages(&dc.vm(vm)?.vm.space);
    let mut sent: BTreeMap<u64, PageCopy> = BTreeMap::new();
    let (mut t, mut rounds, mut ops, mut pages_sent) = (now, 0u32, 0u64, 0u64);
    while rounds < max_rounds && to_send.len() as u64 > threshold {
        let items = snapshot(dc, src, vm, &to_send)?;
        let end = send_pages(dc, vm, (src, dst), &items, params.batch_pages, t)?;
        pages_sent += items.len() as u64;
        forget(&mut sent, &to_send);
        sent.extend(items);
        let mut dirty = BTreeSet::new();
        if running {
            ops += dc.run_vm_tracked(vm, end, None, Some(&mut dirty))?.ops;
        }
        if let Some(f) = params.src_failure_at_us.filter(|&f| f < end) {
            return Err(lost(dc, vm, format!("source {src} failed at {f} us during round {}", rounds + 1)));
        }
        to_send = dirty;
        t = end;
        rounds += 1;
    }
    let pause_at = t;
    let items = snapshot(dc, src, vm, &to_send)?;
    let mut resume_at = send_pages(dc, vm, (src, dst), &items, params.batch_pages, t)?;
    pages_sent += items.len() as u64;
    forget(&mut sent, &to_send);
    sent.extend(items);
    let vcpu = WireMessage::VcpuTransfer {
        vm_id: vm.clone(),
        vcpu_state: dc.vm(vm)?.vm.vcpu_state.clone(),
    };
    resume_at = resume_at.max(send_one(dc, vm, src, dst, &vcpu, pause_at)?);
    if let Some(f) = params.src_failure_at_us.filter(|&f| f < resume_at) {
        return Err(lost(dc, vm, format!("source {src} failed at {f} us before resume")));
    }
    let commit = WireMessage::MigrateCommit { vm_id: vm.clone() };
    let completed_at = send_one(dc, vm, dst, src, &commit, resume_at)?;

    let mut hv = dc.host_mut(src)?.evict_vm(vm).expect("located");
    let mut space = match hv.vm.space.source() {
        Some(m) => AddressSpace::from_image(m.clone()),
        None => AddressSpace::new(hv.vm.space.page_count()),
    };
    let mem = &mut dc.host_mut(dst)?.mem;
    for (p, copy) in &sent {
        install(&mut space, mem, *p, copy)?;
    }
    hv.vm.space = space;
    if let Some(r) = hv.runner.as_mut() {
        r.hold_until(resume_at);
    }
    dc.place(dst, hv)?;
    Ok(MigrationReport {
        vm_id: vm.clone(),
        mode: params.mode,
        rounds,
        bytes_transferred: 0,
        content_bytes: 0,
        pages_sent,
        downtime_us: resume_at - pause_at,
        total_us: completed_at - now,
        pause_at,
        resume_at,
        completed_at,
        ops_during: ops,
    })
}

/// Destination-side fault handling while post-copy drains: pages still on
/// the source are requested from it, pages already on the way wait for
/// their batch, everything else goes to the image store.
struct PostcopyFaults<'a, 'b> {
    inner: Streamer<'a>,
    src: Node,
    vm: &'b VmId,
    pending: &'b mut BTreeMap<u64, PageCopy>,
    inflight: &'b mut BTreeMap<u64, (u64, PageCopy)>,
    failure_at: Option<u64>,
    pages_sent: u64,
}

impl FaultHandler for PostcopyFaults<'_, '_> {
    fn fault(&mut self, space: &mut AddressSpace, page: u64, now: u64) -> Result<u64> {
        if let Some((arrival, copy)) = self.inflight.remove(&page) {
            install(space, self.inner.mem, page, &copy)?;
            return Ok(now.max(arrival));
        }
        let Some(copy) = self.pending.remove(&page) else {
            return self.inner.fault(space, page, now);
        };
        if let Some(f) = self.failure_at.filter(|&f| f <= now) {
            return Err(Error::MigrationAborted(format!("source failed at {f} us with page {page} outstanding")));
        }
        let me = self.inner.host.clone();
        let image_id = ImageId::new(self.vm.as_str());
        let req = WireMessage::PageRequest {
            image_id: image_id.clone(),
            ranges: vec![PageRange::new(page, page + 1)],
        };
        let n = self.inner.wire.record(Purpose::Migration, Some(self.vm), &req);
        let at_src = self.inner.net.transfer(&me, &self.src, n, now)?;
        let reply = WireMessage::PageReply {
            image_id,
            entries: vec![ReplyEntry {
                page,
                hash: copy.0,
                content: (!self.inner.mem.resident.contains(&copy.0)).then(|| copy.1.clone()),
            }],
        };
        let n = self.inner.wire.record(Purpose::Migration, Some(self.vm), &reply);
        let arrival = self.inner.net.transfer(&self.src, &me, n, at_src)?;
        install(space, self.inner.mem, page, &copy)?;
        self.pages_sent += 1;
        Ok(arrival)
    }

    fn release_shared(&mut self, hash: &ContentHash) -> Result<()> {
        self.inner.release_shared(hash)
    }

    fn touch(&mut self, hash: &ContentHash, now: u64) {
        self.inner.touch(hash, now);
    }
}

fn postcopy(
    dc: &mut Datacenter,
    vm: &VmId,
    src: &HostId,
    dst: &HostId,
    params: &MigrationParams,
    now: u64,
) -> Result<MigrationReport> {
    let pause_at = now;
    let resident = resident_pages(&dc.vm(vm)?.vm.space);
    let mut pending: BTreeMap<u64, PageCopy> = snapshot(dc, src, vm, &resident)?.into_iter().collect();
    let vcpu = WireMessage::VcpuTransfer {
        vm_id: vm.clone(),
        vcpu_state: dc.vm(vm)?.vm.vcpu_state.clone(),
    };
    let resume_at = send_one(dc, vm, src, dst, &vcpu, pause_at)?;
    if let Some(f) = params.src_failure_at_us.filter(|&f| f < resume_at) {
        return Err(lost(dc, vm, format!("source {src} failed at {f} us before resume")));
    }

    let mut hv = dc.host_mut(src)?.evict_vm(vm).expect("located");
    let page_count = hv.vm.space.page_count();
    let mut space = match hv.vm.space.source() {
        Some(m) => AddressSpace::from_image(m.clone()),
        None => AddressSpace::new(page_count),
    };
    for &p in pending.keys() {
        space.set_state(p, PageState::Remote)?;
    }
    hv.vm.space = space;
    if let Some(r) = hv.runner.as_mut() {
        r.hold_until(resume_at);
    }
    dc.place(dst, hv)?;
    // Page-state metadata follows the resume so downtime stays independent
    // of memory size.
    let bitmap = WireMessage::DirtyBitmap {
        vm_id: vm.clone(),
        pages: Bitset::from_pages(page_count, pending.keys().copied()),
    };
    let mut drained_at = match send_one(dc, vm, src, dst, &bitmap, resume_at) {
        Ok(t) => t,
        Err(e) => return Err(lost(dc, vm, e.to_string())),
    };

    match drain(dc, vm, src, dst, params, resume_at, &mut pending) {
        Ok((t, ops, pages)) => {
            drained_at = drained_at.max(t);
            let commit = WireMessage::MigrateCommit { vm_id: vm.clone() };
            let completed_at = match send_one(dc, vm, dst, src, &commit, drained_at) {
                Ok(t) => t,
                Err(e) => return Err(lost(dc, vm, e.to_string())),
            };
            Ok(MigrationReport {
                vm_id: vm.clone(),
                mode: MigrationMode::PostCopy,
                rounds: 1,
                bytes_transferred: 0,
                content_bytes: 0,
                pages_sent: pages,
                downtime_us: resume_at - pause_at,
                total_us: completed_at - now,
                pause_at,
                resume_at,
                completed_at,
                ops_during: ops,
            })
        }
        Err(e) => Err(lost(dc, vm, e.to_string())),
    }
}

/// Streams `pending` from `src` lowest page first, one batch queued at a
/// time so demand faults wait behind at most one batch, while the guest
/// runs on `dst`. Returns (drain end, ops run, pages sent).
fn drain(
    dc: &mut Datacenter,
    vm: &VmId,
    src: &HostId,
    dst: &HostId,
    params: &MigrationParams,
    start: u64,
    pending: &mut BTreeMap<u64, PageCopy>,
) -> Result<(u64, u64, u64)> {
    let (src_n, dst_n) = (Node::Host(src.clone()), Node::Host(dst.clone()));
    let mut inflight: BTreeMap<u64, (u64, PageCopy)> = BTreeMap::new();
    let (mut t, mut end, mut ops, mut pages) = (start, start, 0u64, 0u64);
    while !pending.is_empty() {
        if let Some(f) = params.src_failure_at_us.filter(|&f| f <= t) {
            return Err(Error::MigrationAborted(format!(
                "source failed at {f} us with {} pages outstanding",
                pending.len()
            )));
        }
        let batch: Vec<(u64, PageCopy)> = {
            let keys: Vec<u64> = pending.keys().take(params.batch_pages).copied().collect();
            keys.into_iter()
                .map(|k| (k, pending.remove(&k).expect("listed")))
                .collect()
        };
        let arrival = send_pages(dc, vm, (src, dst), &batch, params.batch_pages, t)?;
        end = end.max(arrival);
        pages += batch.len() as u64;
        for (p, c) in batch {
            inflight.insert(p, (arrival, c));
        }
        let next = dc.net.free_at(&src_n, &dst_n).max(t + 1);

        let Datacenter { images, hosts, net, wire, cfg, .. } = &mut *dc;
        let images = images.read().expect("image table poisoned");
        let host = hosts.get_mut(dst).expect("placed");
        let hv = host.vms.get_mut(vm).expect("placed");
        let mut h = PostcopyFaults {
            inner: Streamer {
                host: dst_n.clone(),
                mem: &mut host.mem,
                images: &images,
                net,
                wire,
                cfg,
                vm_id: vm,
                live: None,
                purpose: Purpose::DemandStream,
            },
            src: src_n.clone(),
            vm,
            pending,
            inflight: &mut inflight,
            failure_at: params.src_failure_at_us,
            pages_sent: 0,
        };
        if let Some(r) = hv.runner.as_mut() {
            ops += drive(r, &mut hv.vm.space, &mut h, next, None, None)?.ops;
        }
        pages += h.pages_sent;
        let landed: Vec<u64> = inflight
            .iter()
            .filter(|(_, (a, _))| *a <= next)
            .map(|(p, _)| *p)
            .collect();
        for p in landed {
            let (_, copy) = inflight.remove(&p).expect("listed");
            install(&mut hv.vm.space, &mut host.mem, p, &copy)?;
        }
        t = next;
    }
    if let Some(f) = params.src_failure_at_us.filter(|&f| f < end) {
        return Err(Error::MigrationAborted(format!("source failed at {f} us before the last batch landed")));
    }
    let host = dc.host_mut(dst)?;
    let hv = host.vms.get_mut(vm).expect("placed");
    for (p, (a, copy)) in std::mem::take(&mut inflight) {
        install(&mut hv.vm.space, &mut host.mem, p, &copy)?;
        end = end.max(a);
    }
    Ok((end, ops, pages))
}
