// Copyright 2026 The vmstream Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use super::host::{Host, HostMem, HostSpec, HostedVm, VmKind};
use super::net::{Network, Node, Purpose, WireLedger};
use crate::error::{Error, Result};
use crate::guest::{apply_op, AddressSpace, FaultHandler, GuestVm, PageState, WorkloadRunner, WorkloadSpec};
use crate::ids::{HostId, IdentityOverrides, ImageId, VmId};
use crate::page_store::{ContentHash, LiveImageManifest};
use crate::stream::live::LiveClient;
use crate::stream::{plan_fetch, ranges_of, ImageServer, WireMessage, DEFAULT_PREFETCH_WINDOW};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub prefetch_window: u64,
    pub clone_setup_us: u64,
    pub fault_retries: u32,
    pub retry_backoff_us: u64,
    /// Pages per background streaming request.
    pub background_chunk_pages: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            prefetch_window: DEFAULT_PREFETCH_WINDOW,
            clone_setup_us: 20_000,
            fault_retries: 3,
            retry_backoff_us: 10_000,
            background_chunk_pages: 16,
        }
    }
}

/// Result of `live_image_start`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CloneStart {
    pub vm_id: VmId,
    /// When the clone's vCPUs are live and it can run its workload.
    pub live_at: u64,
    pub launch_wire_bytes: u64,
}

/// Progress of one batch of workload execution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct RunOutcome {
    pub ops: u64,
    pub faults: u64,
    /// Completion time of the op that brought the VM to its ready count.
    pub ready_at: Option<u64>,
    pub next_op_at: u64,
}

/// Hosts, links, the shared image store and the byte ledger.
pub struct Datacenter {
    pub images: Arc<RwLock<ImageServer>>,
    pub hosts: BTreeMap<HostId, Host>,
    pub net: Network,
    pub wire: WireLedger,
    pub cfg: StreamConfig,
    live: Option<LiveClient>,
}

impl Datacenter {
    pub fn new(hosts: Vec<HostSpec>, latency_us: u64, store_bits_per_s: u64, cfg: StreamConfig) -> Self {
        let mut net = Network::new(latency_us);
        net.add_node(Node::Store, store_bits_per_s);
        let mut map = BTreeMap::new();
        for spec in hosts {
            net.add_node(Node::Host(spec.host_id.clone()), spec.nic_bandwidth_bits_per_s);
            map.insert(spec.host_id.clone(), Host::new(spec));
        }
        Datacenter {
            images: Arc::new(RwLock::new(ImageServer::new())),
            hosts: map,
            net,
            wire: WireLedger::default(),
            cfg,
            live: None,
        }
    }

    /// Routes page requests through a live page server instead of calling
    /// the image server in-process. Accounting and timing are unchanged.
    pub fn attach_live(&mut self, client: LiveClient) {
        self.live = Some(client);
    }

    pub fn host(&self, id: &HostId) -> Result<&Host> {
        self.hosts
            .get(id)
            .ok_or_else(|| Error::UnknownHost(id.to_string()))
    }

    pub fn host_mut(&mut self, id: &HostId) -> Result<&mut Host> {
        self.hosts
            .get_mut(id)
            .ok_or_else(|| Error::UnknownHost(id.to_string()))
    }

    pub fn locate(&self, vm: &VmId) -> Result<HostId> {
        self.hosts
            .values()
            .find(|h| h.vms.contains_key(vm))
            .map(|h| h.id().clone())
            .ok_or_else(|| Error::UnknownVm(vm.to_string()))
    }

    pub fn vm(&self, id: &VmId) -> Result<&HostedVm> {
        let h = self.locate(id)?;
        Ok(&self.hosts[&h].vms[id])
    }

    pub fn vm_mut(&mut self, id: &VmId) -> Result<&mut HostedVm> {
        let h = self.locate(id)?;
        Ok(self.hosts.get_mut(&h).expect("located").vms.get_mut(id).expect("located"))
    }

    pub fn manifest(&self, id: &ImageId) -> Result<Arc<LiveImageManifest>> {
        self.images.read().expect("image table poisoned").manifest(id)
    }

    pub fn place(&mut self, host: &HostId, hv: HostedVm) -> Result<()> {
        if self.locate(&hv.vm.vm_id).is_ok() {
            return Err(Error::InvalidConfig(format!("vm {} already placed", hv.vm.vm_id)));
        }
        self.host_mut(host)?.vms.insert(hv.vm.vm_id.clone(), hv);
        Ok(())
    }

    pub fn remove_vm(&mut self, id: &VmId) -> Result<HostedVm> {
        let h = self.locate(id)?;
        Ok(self.host_mut(&h)?.evict_vm(id).expect("located"))
    }

    /// Starts a thin clone of `image` on `host`: only the vCPU state crosses
    /// the network; every non-zero page starts `Remote`.
    #[allow(clippy::too_many_arguments)]
    pub fn live_image_start(
        &mut self,
        image: &ImageId,
        host: &HostId,
        vm_id: VmId,
        overrides: &IdentityOverrides,
        workload: WorkloadSpec,
        reservation_bytes: u64,
        now: u64,
    ) -> Result<CloneStart> {
        self.host(host)?;
        let manifest = self.manifest(image)?;
        let mut identity = overrides.apply(&manifest.identity);
        if overrides.hostname.is_none() {
            identity.hostname = vm_id.to_string();
        }
        let vm = GuestVm {
            vm_id: vm_id.clone(),
            vcpu_state: manifest.vcpu_state.clone(),
            space: AddressSpace::from_image(manifest.clone()),
            workload,
            identity,
            booted_at: now,
            disk_page_count: manifest.disk_page_count,
            disk_seed: 0,
        };
        let msg = WireMessage::VcpuTransfer {
            vm_id: vm_id.clone(),
            vcpu_state: vm.vcpu_state.clone(),
        };
        let bytes = self.wire.record(Purpose::CloneLaunch, Some(&vm_id), &msg);
        let arrival = self.net.transfer(&Node::Store, &Node::Host(host.clone()), bytes, now)?;
        let live_at = arrival + self.cfg.clone_setup_us;
        let runner = WorkloadRunner::new(&vm.workload, vm.page_count(), live_at)?;
        self.place(
            host,
            HostedVm {
                vm,
                kind: VmKind::Clone,
                reservation_bytes,
                runner: Some(runner),
                background_bps: 0,
                background_cursor: 0,
                template: None,
            },
        )?;
        Ok(CloneStart {
            vm_id,
            live_at,
            launch_wire_bytes: bytes,
        })
    }

    /// Executes the VM's workload for every op issued at or before `until`.
    /// `ready_ops` is the op count that marks the VM ready to serve; the run
    /// stops right after that op so the caller can record it.
    pub fn run_vm(&mut self, id: &VmId, until: u64, ready_ops: Option<u64>) -> Result<RunOutcome> {
        self.run_vm_tracked(id, until, ready_ops, None)
    }

    pub(crate) fn run_vm_tracked(
        &mut self,
        id: &VmId,
        until: u64,
        ready_ops: Option<u64>,
        dirty: Option<&mut BTreeSet<u64>>,
    ) -> Result<RunOutcome> {
        let host_id = self.locate(id)?;
        let Datacenter { images, hosts, net, wire, cfg, live, .. } = self;
        let images = images.read().expect("image table poisoned");
        let host = hosts.get_mut(&host_id).expect("located");
        let Host { mem, vms, .. } = host;
        let hv = vms.get_mut(id).expect("located");
        let runner = hv
            .runner
            .as_mut()
            .ok_or_else(|| Error::InvalidConfig(format!("vm {id} is not running")))?;
        let mut s = Streamer {
            host: Node::Host(host_id.clone()),
            mem,
            images: &images,
            net,
            wire,
            cfg,
            vm_id: id,
            live: live.as_mut(),
            purpose: Purpose::DemandStream,
        };
        drive(runner, &mut hv.vm.space, &mut s, until, ready_ops, dirty)
    }

    /// Reads one page through the fault path, as a guest access would.
    pub fn touch_page(&mut self, id: &VmId, page: u64, now: u64) -> Result<u64> {
        let host_id = self.locate(id)?;
        let Datacenter { images, hosts, net, wire, cfg, live, .. } = self;
        let images = images.read().expect("image table poisoned");
        let Host { mem, vms, .. } = hosts.get_mut(&host_id).expect("located");
        let hv = vms.get_mut(id).expect("located");
        let mut s = Streamer {
            host: Node::Host(host_id.clone()),
            mem,
            images: &images,
            net,
            wire,
            cfg,
            vm_id: id,
            live: live.as_mut(),
            purpose: Purpose::DemandStream,
        };
        Ok(apply_op(&mut hv.vm.space, page, &crate::guest::Access::Read, &mut s, now)?.done_at)
    }

    /// One background streaming request: the lowest `Remote` pages, sent
    /// no faster than `budget_bps`. Returns when the next request may go,
    /// or `None` once nothing is left to stream.
    pub fn background_step(&mut self, id: &VmId, now: u64, budget_bps: u64) -> Result<Option<u64>> {
        if budget_bps == 0 {
            return Ok(None);
        }
        let host_id = self.locate(id)?;
        let Datacenter { images, hosts, net, wire, cfg, live, .. } = self;
        let images = images.read().expect("image table poisoned");
        let Host { mem, vms, .. } = hosts.get_mut(&host_id).expect("located");
        let hv = vms.get_mut(id).expect("located");
        let space = &mut hv.vm.space;
        let mut pages = Vec::new();
        let mut from = hv.background_cursor;
        while (pages.len() as u64) < cfg.background_chunk_pages {
            match space.next_remote(from) {
                Some(p) => {
                    pages.push(p);
                    from = p + 1;
                }
                None => break,
            }
        }
        hv.background_cursor = from;
        if pages.is_empty() {
            return Ok(None);
        }
        let mut s = Streamer {
            host: Node::Host(host_id.clone()),
            mem,
            images: &images,
            net,
            wire,
            cfg,
            vm_id: id,
            live: live.as_mut(),
            purpose: Purpose::BackgroundStream,
        };
        let (arrival, bytes) = s.fetch(space, &pages, now)?;
        let paced = now + super::net::serialization_us(bytes, budget_bps);
        if space.next_remote(from).is_none() {
            return Ok(None);
        }
        Ok(Some(arrival.max(paced)))
    }
}

/// Runs ops issued at or before `until`, stopping early once `ready_ops`
/// ops are done. Pages written or faulted in are added to `dirty` when given.
pub(crate) fn drive(
    runner: &mut WorkloadRunner,
    space: &mut AddressSpace,
    handler: &mut dyn FaultHandler,
    until: u64,
    ready_ops: Option<u64>,
    mut dirty: Option<&mut BTreeSet<u64>>,
) -> Result<RunOutcome> {
    let mut out = RunOutcome::default();
    while runner.next_time() <= until {
        let op = runner.draw();
        let r = apply_op(space, op.page, &op.access, handler, op.t)?;
        runner.complete(op.t, r.done_at);
        out.ops += 1;
        out.faults += r.faulted as u64;
        if let Some(d) = dirty.as_deref_mut() {
            if r.faulted || op.access.is_write() {
                d.insert(op.page);
            }
        }
        if ready_ops == Some(runner.ops_done()) {
            out.ready_at = Some(r.done_at);
            break;
        }
    }
    out.next_op_at = runner.next_time();
    Ok(out)
}

/// Fault handler for a guest on a simulated host: fetches from the image
/// server over the network with prefetch and hash-first replies, maps
/// content already on the host without a request, and retries on link
/// failure.
pub(crate) struct Streamer<'a> {
    pub host: Node,
    pub mem: &'a mut HostMem,
    pub images: &'a ImageServer,
    pub net: &'a mut Network,
    pub wire: &'a mut WireLedger,
    pub cfg: &'a StreamConfig,
    pub vm_id: &'a VmId,
    pub live: Option<&'a mut LiveClient>,
    pub purpose: Purpose,
}

impl Streamer<'_> {
    fn send(&mut self, from: &Node, to: &Node, msg: &WireMessage, now: u64) -> Result<(u64, u64)> {
        let mut t = now;
        let mut attempt = 0;
        loop {
            if !self.net.is_down(from, to, t) {
                let bytes = self.wire.record(self.purpose, Some(self.vm_id), msg);
                return Ok((self.net.transfer(from, to, bytes, t)?, bytes));
            }
            if attempt == self.cfg.fault_retries {
                return Err(Error::StreamUnavailable(format!(
                    "{from} -> {to} unreachable after {} retries",
                    self.cfg.fault_retries
                )));
            }
            attempt += 1;
            t += self.cfg.retry_backoff_us;
        }
    }

    /// Requests `pages` (ascending, all `Remote`) and installs the reply.
    /// Returns the reply arrival and its size.
    pub fn fetch(&mut self, space: &mut AddressSpace, pages: &[u64], now: u64) -> Result<(u64, u64)> {
        let image = space
            .source()
            .ok_or_else(|| Error::StreamUnavailable("address space has no image source".into()))?
            .image_id
            .clone();
        let req = WireMessage::PageRequest {
            image_id: image.clone(),
            ranges: ranges_of(pages),
        };
        let (at_store, _) = self.send(&self.host.clone(), &Node::Store, &req, now)?;
        let reply = match self.live.as_deref_mut() {
            Some(client) => {
                let held: HashSet<ContentHash> = pages
                    .iter()
                    .map(|&p| space.source_hash(p))
                    .filter(|h| self.mem.resident.contains(h))
                    .collect();
                client.request(&req, held)?
            }
            None => self.images.serve(&req, &self.mem.resident)?,
        };
        let (arrival, bytes) = self.send(&Node::Store, &self.host.clone(), &reply, at_store)?;
        let WireMessage::PageReply { entries, .. } = reply else {
            return Err(Error::ProtocolError("expected a page reply".into()));
        };
        for e in entries {
            if !space.is_remote(e.page) || e.hash.is_zero() {
                continue;
            }
            if e.hash != space.source_hash(e.page) {
                return Err(Error::ProtocolError(format!("reply hash mismatch at page {}", e.page)));
            }
            if self.mem.resident.contains(&e.hash) {
                self.mem.resident.retain(&e.hash)?;
            } else if let Some(c) = &e.content {
                if c.hash() != e.hash {
                    return Err(Error::ProtocolError(format!("content for page {} fails verification", e.page)));
                }
                self.mem.resident.put_page(c);
            } else {
                // Hash-only reply for content this host dropped meanwhile;
                // the page stays remote and the next access refetches.
                continue;
            }
            space.set_state(e.page, PageState::Shared(e.hash))?;
            self.mem.touch(&e.hash);
            if let Some(c) = &e.content {
                self.mem.set_available(e.hash, arrival);
                self.mem.cache_insert(c)?;
            }
        }
        Ok((arrival, bytes))
    }
}

impl FaultHandler for Streamer<'_> {
    fn fault(&mut self, space: &mut AddressSpace, page: u64, now: u64) -> Result<u64> {
        let h = space.source_hash(page);
        // Content already on this host (another guest's page, the read
        // cache, or a fetch still in flight) is mapped without a request.
        if !h.is_zero() && self.mem.resident.contains(&h) {
            self.mem.resident.retain(&h)?;
            space.set_state(page, PageState::Shared(h))?;
            self.mem.touch(&h);
            return Ok(now.max(self.mem.available_at(&h)));
        }
        let plan = plan_fetch(space, page, self.cfg.prefetch_window);
        let (arrival, _) = self.fetch(space, &plan.pages(), now)?;
        let ready = if space.is_remote(page) {
            arrival
        } else {
            arrival.max(self.mem.available_at(&h))
        };
        Ok(ready)
    }

    fn release_shared(&mut self, hash: &ContentHash) -> Result<()> {
        self.mem.release_shared(hash)
    }

    fn touch(&mut self, hash: &ContentHash, _now: u64) {
        self.mem.touch(hash);
    }
}
