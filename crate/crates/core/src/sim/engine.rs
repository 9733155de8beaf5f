// Copyright 2026 The vmstream Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

use std::cmp::{Ordering, Reverse};
use std::collections::{BTreeMap, BinaryHeap};
use std::path::Path;

use super::metrics::{Metrics, Summary, TemplateInfo, VmSummary};
use super::scenario::{Command, Scenario, Template, FORMAT_VERSION};
use crate::cluster::{Datacenter, HostedVm, Node, Purpose, StreamConfig, VmKind};
use crate::error::{Error, Result};
use crate::footprint::{account, admit, enforce, Admission};
use crate::guest::{create_vm_sized, OsImage, WorkloadRunner, WorkloadSpec};
use crate::ids::{HostId, IdentityOverrides, IdentityRecord, ImageId, VmId};
use crate::migration::{migrate, MigrationParams};
use crate::page_store::{seed_from_str, splitmix64};
use crate::snapshot::live_image_create_split;
use crate::stream::live::LivePageServer;

/// Virtual time in microseconds; never moves backwards.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SimClock {
    now: u64,
}

impl SimClock {
    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn advance(&mut self, t: u64) {
        assert!(t >= self.now, "clock moved back from {} to {t}", self.now);
        self.now = t;
    }
}

struct Entry<A> {
    time: u64,
    seq: u64,
    action: A,
}

impl<A> PartialEq for Entry<A> {
    fn eq(&self, o: &Self) -> bool {
        (self.time, self.seq) == (o.time, o.seq)
    }
}
impl<A> Eq for Entry<A> {}
impl<A> PartialOrd for Entry<A> {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl<A> Ord for Entry<A> {
    fn cmp(&self, o: &Self) -> Ordering {
        (self.time, self.seq).cmp(&(o.time, o.seq))
    }
}

/// Events ordered by time, ties broken by insertion order.
pub struct EventQueue<A> {
    heap: BinaryHeap<Reverse<Entry<A>>>,
    seq: u64,
}

impl<A> Default for EventQueue<A> {
    fn default() -> Self {
        EventQueue {
            heap: BinaryHeap::new(),
            seq: 0,
        }
    }
}

impl<A> EventQueue<A> {
    pub fn push(&mut self, time: u64, action: A) {
        self.heap.push(Reverse(Entry {
            time,
            seq: self.seq,
            action,
        }));
        self.seq += 1;
    }

    pub fn pop(&mut self) -> Option<(u64, A)> {
        self.heap.pop().map(|Reverse(e)| (e.time, e.action))
    }

    pub fn peek_time(&self) -> Option<u64> {
        self.heap.peek().map(|Reverse(e)| e.time)
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

#[derive(Clone, Debug)]
enum Action {
    Script(usize),
    BootDone(VmId),
    Step(VmId),
    Background(VmId),
    Enforce,
}

struct VmRec {
    kind: VmKind,
    template: String,
    requested_at: u64,
    ready_at: Option<u64>,
    alive: bool,
}

fn us(s: f64) -> u64 {
    (s * 1e6).round() as u64
}

struct Engine<'a> {
    sc: &'a Scenario,
    seed: u64,
    dc: Datacenter,
    q: EventQueue<Action>,
    clock: SimClock,
    m: Metrics,
    vms: BTreeMap<VmId, VmRec>,
    /// Image -> (template, time its content is in the store).
    images: BTreeMap<ImageId, (String, u64)>,
    os: BTreeMap<String, OsImage>,
    horizon: Option<u64>,
    /// Queued events other than periodic enforcement.
    work: usize,
    rr: usize,
    live_now: [u64; 2],
    live_max: [u64; 2],
    rejections: u64,
    errors: Vec<String>,
}

fn slot(k: VmKind) -> usize {
    match k {
        VmKind::Booted => 0,
        VmKind::Clone => 1,
    }
}

/// Runs a scenario to completion.
pub fn run(sc: &Scenario, seed: u64) -> Result<Metrics> {
    sc.validate()?;
    Engine::new(sc, seed).run()
}

/// Like [`run`], with every page request answered by a page server on a
/// local socket at `socket`.
pub fn run_live(sc: &Scenario, seed: u64, socket: &Path) -> Result<Metrics> {
    sc.validate()?;
    let mut e = Engine::new(sc, seed);
    let server = LivePageServer::spawn(e.dc.images.clone(), socket)?;
    e.dc.attach_live(server.connect()?);
    let out = e.run();
    drop(server);
    out
}

impl<'a> Engine<'a> {
    fn new(sc: &'a Scenario, seed: u64) -> Self {
        let cfg = StreamConfig {
            prefetch_window: sc.prefetch_window,
            clone_setup_us: sc.clone_setup_us,
            ..StreamConfig::default()
        };
        let dc = Datacenter::new(
            sc.hosts.iter().map(|h| h.spec()).collect(),
            sc.link_latency_us,
            (sc.store_gbit * 1e9) as u64,
            cfg,
        );
        let horizon = sc
            .script
            .iter()
            .filter_map(|c| match c {
                Command::RunFor { at_s, duration_s } => Some(us(at_s + duration_s)),
                _ => None,
            })
            .max();
        Engine {
            sc,
            seed,
            dc,
            q: EventQueue::default(),
            clock: SimClock::default(),
            m: Metrics::default(),
            vms: BTreeMap::new(),
            images: BTreeMap::new(),
            os: BTreeMap::new(),
            horizon,
            work: 0,
            rr: 0,
            live_now: [0; 2],
            live_max: [0; 2],
            rejections: 0,
            errors: Vec::new(),
        }
    }

    fn push(&mut self, t: u64, a: Action) {
        if !matches!(a, Action::Enforce) {
            self.work += 1;
        }
        self.q.push(t, a);
    }

    fn within(&self, t: u64) -> bool {
        self.horizon.is_none_or(|h| t <= h)
    }

    fn error(&mut self, t: u64, subject: &str, e: &Error) {
        self.m.push(t, "error", subject, 1.0);
        self.errors.push(format!("{t} {subject}: {}: {e}", e.code()));
    }

    fn placed(&mut self, k: VmKind) {
        let i = slot(k);
        self.live_now[i] += 1;
        self.live_max[i] = self.live_max[i].max(self.live_now[i]);
    }

    fn gone(&mut self, id: &VmId) {
        if let Some(r) = self.vms.get_mut(id) {
            if r.alive {
                r.alive = false;
                self.live_now[slot(r.kind)] -= 1;
            }
        }
    }

    fn workload_for(&self, t: &Template, vm: &VmId) -> WorkloadSpec {
        let mut w = t.workload.clone();
        let mut s = self.seed ^ seed_from_str(vm.as_str());
        w.seed ^= splitmix64(&mut s);
        w
    }

    fn run(mut self) -> Result<Metrics> {
        for (i, c) in self.sc.script.iter().enumerate() {
            self.push(us(c.at_s()), Action::Script(i));
        }
        let interval = us(self.sc.enforce_interval_s).max(1);
        self.push(interval, Action::Enforce);
        while let Some((t, a)) = self.q.pop() {
            if !matches!(a, Action::Enforce) {
                self.work -= 1;
            }
            if !self.within(t) {
                continue;
            }
            self.clock.advance(t);
            match a {
                Action::Script(i) => self.script(i, t)?,
                Action::BootDone(vm) => self.boot_done(&vm, t)?,
                Action::Step(vm) => self.step(&vm, t),
                Action::Background(vm) => self.background(&vm, t),
                Action::Enforce => {
                    self.enforce_all(t);
                    if self.work > 0 && self.within(t + interval) {
                        self.push(t + interval, Action::Enforce);
                    }
                }
            }
        }
        Ok(self.finish())
    }

    fn script(&mut self, i: usize, t: u64) -> Result<()> {
        let sc = self.sc;
        match &sc.script[i] {
            Command::BootVm { vm, template, host, .. } => self.boot(VmId::new(vm), template, &HostId::new(host), t),
            Command::CreateImage { vm, image, retire_parent, .. } => {
                self.create_image(&VmId::new(vm), &ImageId::new(image), *retire_parent, t)
            }
            Command::CloneVm { image, count, host, prefix, .. } => {
                let image = ImageId::new(image);
                let Some((_, ready)) = self.images.get(&image).cloned() else {
                    self.error(t, image.as_str(), &Error::CorruptImage(format!("unknown image {image}")));
                    return Ok(());
                };
                if ready > t {
                    // Clones launch once the image content is in the store.
                    self.push(ready, Action::Script(i));
                    return Ok(());
                }
                let prefix = prefix.clone().unwrap_or_else(|| format!("{image}-"));
                for n in 0..*count {
                    let h = match host {
                        Some(h) => HostId::new(h),
                        None => {
                            let h = HostId::new(&sc.hosts[self.rr % sc.hosts.len()].host_id);
                            self.rr += 1;
                            h
                        }
                    };
                    self.clone_vm(&image, VmId::new(format!("{prefix}{n}")), &h, t)?;
                }
                Ok(())
            }
            Command::Migrate { vm, to, mode, max_rounds, stop_threshold_pages, .. } => {
                let mut p = MigrationParams::new(*mode);
                if let Some(r) = max_rounds {
                    p.max_rounds = *r;
                }
                if let Some(s) = stop_threshold_pages {
                    p.stop_threshold_pages = *s;
                }
                self.migrate(&VmId::new(vm), &HostId::new(to), &p, t);
                Ok(())
            }
            Command::RunFor { .. } => Ok(()),
        }
    }

    fn boot(&mut self, id: VmId, template: &str, host: &HostId, t: u64) -> Result<()> {
        let tpl = self.sc.template(template)?;
        let adm = admit(self.dc.host(host)?, tpl.memory_bytes(), self.sc.boot_touch_fraction);
        let Admission::Admit { reservation_bytes } = adm else {
            self.rejections += 1;
            self.m.push(t, "admission_rejected", id.as_str(), tpl.memory_bytes() as f64);
            return Ok(());
        };
        let vm = create_vm_sized(
            id.clone(),
            tpl.page_count(),
            tpl.vcpu_bytes,
            self.workload_for(tpl, &id),
            IdentityRecord::new(id.as_str(), format!("net-{id}")),
        )?
        .with_disk(tpl.disk_pages(), seed_from_str(&tpl.name));
        self.dc.place(
            host,
            HostedVm {
                vm,
                kind: VmKind::Booted,
                reservation_bytes,
                runner: None,
                background_bps: 0,
                background_cursor: 0,
                template: Some(tpl.name.clone()),
            },
        )?;
        self.vms.insert(
            id.clone(),
            VmRec {
                kind: VmKind::Booted,
                template: tpl.name.clone(),
                requested_at: t,
                ready_at: None,
                alive: true,
            },
        );
        self.placed(VmKind::Booted);
        let bytes = tpl.disk_bytes();
        self.dc.wire.record_raw(Purpose::BootTransfer, Some(&id), bytes);
        let arrival = self.dc.net.transfer(&Node::Store, &Node::Host(host.clone()), bytes, t)?;
        self.push(arrival + us(self.sc.boot_duration_s), Action::BootDone(id));
        Ok(())
    }

    fn boot_done(&mut self, id: &VmId, t: u64) -> Result<()> {
        if !self.vms.get(id).is_some_and(|r| r.alive) {
            return Ok(());
        }
        let tpl = self.sc.template(&self.vms[id].template)?;
        let os = self
            .os
            .entry(tpl.name.clone())
            .or_insert_with(|| OsImage::generate(&tpl.name, tpl.boot_resident_pages()))
            .clone();
        let hv = self.dc.vm_mut(id)?;
        hv.vm.fill_boot_resident(&os)?;
        hv.vm.booted_at = t;
        hv.runner = Some(WorkloadRunner::new(&hv.vm.workload, hv.vm.page_count(), t)?);
        self.m.push(t, "boot_done", id.as_str(), 1.0);
        self.push(t, Action::Step(id.clone()));
        Ok(())
    }

    fn create_image(&mut self, vm: &VmId, image: &ImageId, retire: bool, t: u64) -> Result<()> {
        let host = match self.dc.locate(vm) {
            Ok(h) => h,
            Err(e) => {
                self.error(t, vm.as_str(), &e);
                return Ok(());
            }
        };
        let Some(rec) = self.vms.get(vm) else { return Ok(()) };
        let template = rec.template.clone();
        let Datacenter { images, hosts, .. } = &mut self.dc;
        let mut server = images.write().expect("image table poisoned");
        let before = server.store.stored_bytes();
        let h = hosts.get_mut(&host).expect("located");
        let hv = h.vms.get_mut(vm).expect("located");
        if hv.runner.is_none() {
            drop(server);
            let e = Error::InvalidConfig(format!("{vm} has not finished booting"));
            self.error(t, vm.as_str(), &e);
            return Ok(());
        }
        let (manifest, rep) = live_image_create_split(&mut hv.vm, image.clone(), &mut server.store, &mut h.mem.resident, t)?;
        if let Some(r) = hv.runner.as_mut() {
            r.hold_until(t + rep.paused_virtual_us);
        }
        let upload = server.store.stored_bytes() - before;
        server.register(manifest)?;
        drop(server);
        self.dc.wire.record_raw(Purpose::ImageCapture, None, upload);
        let ready = self.dc.net.transfer(&Node::Host(host.clone()), &Node::Store, upload, t)?;
        self.images.insert(image.clone(), (template, ready));
        self.m.push(t, "snapshot_pause_us", vm.as_str(), rep.paused_virtual_us as f64);
        self.m.push(ready, "image_ready", image.as_str(), upload as f64);
        if retire {
            self.dc.remove_vm(vm)?;
            self.gone(vm);
        }
        Ok(())
    }

    fn clone_vm(&mut self, image: &ImageId, id: VmId, host: &HostId, t: u64) -> Result<()> {
        let tpl = self.sc.template(&self.images[image].0)?;
        let adm = admit(self.dc.host(host)?, tpl.memory_bytes(), self.sc.clone_touch_fraction);
        let Admission::Admit { reservation_bytes } = adm else {
            self.rejections += 1;
            self.m.push(t, "admission_rejected", id.as_str(), tpl.memory_bytes() as f64);
            return Ok(());
        };
        let w = self.workload_for(tpl, &id);
        let over = IdentityOverrides::hostname(id.as_str());
        let start = match self.dc.live_image_start(image, host, id.clone(), &over, w, reservation_bytes, t) {
            Ok(s) => s,
            Err(e) => {
                self.error(t, id.as_str(), &e);
                return Ok(());
            }
        };
        let hv = self.dc.vm_mut(&id)?;
        hv.template = Some(tpl.name.clone());
        hv.background_bps = self.sc.background_bps;
        self.vms.insert(
            id.clone(),
            VmRec {
                kind: VmKind::Clone,
                template: tpl.name.clone(),
                requested_at: t,
                ready_at: None,
                alive: true,
            },
        );
        self.placed(VmKind::Clone);
        self.push(start.live_at, Action::Step(id.clone()));
        if self.sc.background_bps > 0 {
            self.push(start.live_at, Action::Background(id));
        }
        Ok(())
    }

    fn migrate(&mut self, vm: &VmId, to: &HostId, p: &MigrationParams, t: u64) {
        match migrate(&mut self.dc, vm, to, p, t) {
            Ok(r) => {
                self.m.push(t, "migration_downtime_us", vm.as_str(), r.downtime_us as f64);
                self.m.push(t, "migration_total_us", vm.as_str(), r.total_us as f64);
                self.m.push(t, "migration_bytes", vm.as_str(), r.bytes_transferred as f64);
                self.m.push(t, "migration_rounds", vm.as_str(), r.rounds as f64);
                self.m.summary.migrations.push(r);
            }
            Err(e) => {
                if matches!(e, Error::MigrationAborted(_)) {
                    self.gone(vm);
                }
                self.error(t, vm.as_str(), &e);
            }
        }
    }

    fn step(&mut self, id: &VmId, t: u64) {
        if !self.vms.get(id).is_some_and(|r| r.alive) {
            return;
        }
        let mut until = self.q.peek_time().unwrap_or(u64::MAX).max(t);
        if let Some(h) = self.horizon {
            until = until.min(h);
        }
        let ready_ops = self.vms[id].ready_at.is_none().then_some(self.sc.ready_ops);
        match self.dc.run_vm(id, until, ready_ops) {
            Ok(out) => {
                if let Some(r) = out.ready_at {
                    let rec = self.vms.get_mut(id).expect("checked");
                    rec.ready_at = Some(r);
                    let lat = r - rec.requested_at;
                    self.m.push(r, "startup_latency_us", id.as_str(), lat as f64);
                }
                let ready = self.vms[id].ready_at.is_some();
                if ready && self.horizon.is_none() {
                    return;
                }
                let next = out.next_op_at.max(t);
                if self.within(next) {
                    self.push(next, Action::Step(id.clone()));
                }
            }
            Err(e) => self.error(t, id.as_str(), &e),
        }
    }

    fn background(&mut self, id: &VmId, t: u64) {
        if !self.vms.get(id).is_some_and(|r| r.alive) {
            return;
        }
        let Ok(bps) = self.dc.vm(id).map(|v| v.background_bps) else { return };
        match self.dc.background_step(id, t, bps) {
            Ok(Some(next)) if self.within(next) => self.push(next.max(t + 1), Action::Background(id.clone())),
            Ok(_) => {}
            Err(e) => self.error(t, id.as_str(), &e),
        }
    }

    fn enforce_all(&mut self, t: u64) {
        let policy = self.sc.eviction;
        let ids: Vec<HostId> = self.dc.hosts.keys().cloned().collect();
        for h in ids {
            let host = self.dc.hosts.get_mut(&h).expect("listed");
            if host.vms.is_empty() && host.mem.resident.is_empty() {
                continue;
            }
            match enforce(host, &policy) {
                Ok(r) if r.evicted_pages > 0 => self.m.push(t, "evicted_pages", h.as_str(), r.evicted_pages as f64),
                Ok(_) => {}
                Err(e) => {
                    self.m.push(t, "overcommit_failure", h.as_str(), 1.0);
                    self.errors.push(format!("{t} {h}: {}: {e}", e.code()));
                }
            }
            let host = &self.dc.hosts[&h];
            let f = account(host);
            self.m.push(t, "host_physical_bytes", h.as_str(), f.host_physical_bytes as f64);
            self.m.push(t, "host_private_bytes", h.as_str(), f.private_bytes as f64);
            self.m.push(t, "savings_bytes", h.as_str(), f.savings_bytes as f64);
            self.m.push(t, "oversubscription_ratio", h.as_str(), f.oversubscription_ratio);
            self.m.push(t, "vm_count", h.as_str(), host.vms.len() as f64);
        }
    }

    fn finish(mut self) -> Metrics {
        let end = self.clock.now();
        let wire = &self.dc.wire;
        for p in Purpose::ALL {
            self.m.push(end, "wire_bytes", p.as_str(), wire.purpose(p) as f64);
        }
        let mut vms = BTreeMap::new();
        let (mut boot_lat, mut clone_lat) = (Vec::new(), Vec::new());
        let (mut boot_wire, mut clone_wire) = (Vec::new(), Vec::new());
        for (id, r) in &self.vms {
            let lat = r.ready_at.map(|x| x - r.requested_at);
            let bytes = wire.vm(id);
            let (lats, wires) = match r.kind {
                VmKind::Booted => (&mut boot_lat, &mut boot_wire),
                VmKind::Clone => (&mut clone_lat, &mut clone_wire),
            };
            lats.extend(lat);
            wires.push(bytes);
            vms.insert(
                id.to_string(),
                VmSummary {
                    kind: match r.kind {
                        VmKind::Booted => "booted".into(),
                        VmKind::Clone => "clone".into(),
                    },
                    template: r.template.clone(),
                    host: self.dc.locate(id).ok().map(|h| h.to_string()),
                    requested_at_us: r.requested_at,
                    ready_at_us: r.ready_at,
                    startup_latency_us: lat,
                    wire_bytes: bytes,
                },
            );
        }
        let mean = |v: &[u64]| (!v.is_empty()).then(|| v.iter().sum::<u64>() as f64 / v.len() as f64);
        let migrations = std::mem::take(&mut self.m.summary.migrations);
        self.m.summary = Summary {
            format_version: FORMAT_VERSION,
            scenario: self.sc.name.clone(),
            seed: self.seed,
            end_time_us: end,
            templates: self
                .sc
                .templates
                .iter()
                .map(|t| TemplateInfo {
                    name: t.name.clone(),
                    memory_mib: t.memory_mib,
                    disk_mib: t.disk_mib,
                })
                .collect(),
            vms,
            mean_boot_startup_us: mean(&boot_lat),
            mean_clone_startup_us: mean(&clone_lat),
            max_concurrent_booted: self.live_max[0],
            max_concurrent_clones: self.live_max[1],
            admission_rejections: self.rejections,
            boot_wire_per_vm: mean(&boot_wire),
            clone_wire_per_vm: mean(&clone_wire),
            wire_by_purpose: Purpose::ALL
                .iter()
                .map(|p| (p.as_str().to_string(), wire.purpose(*p)))
                .collect(),
            content_by_purpose: Purpose::ALL
                .iter()
                .map(|p| (p.as_str().to_string(), wire.content(*p)))
                .collect(),
            wire_total: wire.total(),
            migrations,
            errors: self.errors,
        };
        self.m
    }
}
