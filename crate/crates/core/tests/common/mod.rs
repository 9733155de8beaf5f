// Copyright 2026 The vmstream Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

#![allow(dead_code)]

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vms_core::cluster::{Datacenter, HostSpec, HostedVm, StreamConfig, VmKind};
use vms_core::footprint::{account, enforce, EvictionPolicy};
use vms_core::guest::{
    create_vm, generate_trace, Access, GuestVm, PageState, TraceOp, WorkloadKind, WorkloadRunner, WorkloadSpec,
};
use vms_core::migration::{migrate, MigrationMode, MigrationParams};
use vms_core::snapshot::{live_image_create, live_image_create_split, materialize_image};
use vms_core::{
    ContentHash, IdentityOverrides, IdentityRecord, ImageId, LiveImageManifest, PageContent, VmId, PAGE_SIZE,
};

pub const STORE_BPS: u64 = 10_000_000_000;
pub const LATENCY_US: u64 = 500;

pub fn datacenter(hosts: &[&str]) -> Datacenter {
    datacenter_with(hosts, StreamConfig::default())
}

pub fn datacenter_with(hosts: &[&str], cfg: StreamConfig) -> Datacenter {
    Datacenter::new(hosts.iter().map(|h| HostSpec::new(*h)).collect(), LATENCY_US, STORE_BPS, cfg)
}

pub fn idle() -> WorkloadSpec {
    WorkloadSpec::new(WorkloadKind::Uniform, 0.0, 1.0, 0)
}

pub fn uniform(write_fraction: f64, ops: f64, seed: u64) -> WorkloadSpec {
    WorkloadSpec::new(WorkloadKind::Uniform, write_fraction, ops, seed)
}

/// A guest with a random mix of zero, unique and repeated pages.
pub fn guest(id: &str, pages: u64, seed: u64, workload: WorkloadSpec) -> GuestVm {
    let mut vm = create_vm(id, pages, workload, IdentityRecord::new(id, format!("net-{id}"))).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in 0..pages {
        let roll: f64 = rng.random();
        let content = if roll < 0.2 {
            continue;
        } else if roll < 0.4 {
            PageContent::synthetic(seed, rng.random_range(0..4))
        } else {
            PageContent::synthetic(seed, 1000 + p)
        };
        vm.space.set_state(p, PageState::Private(content)).unwrap();
    }
    vm
}

/// Captures `vm` into the datacenter's image store and registers it.
/// Returns the manifest and its flat memory.
pub fn publish(dc: &mut Datacenter, vm: &mut GuestVm, id: &str) -> (Arc<LiveImageManifest>, Vec<u8>) {
    let mut server = dc.images.write().unwrap();
    let (m, _) = live_image_create(vm, ImageId::new(id), &mut server.store, 0).unwrap();
    let flat = materialize_image(&m, &server.store).unwrap();
    server.register(m.clone()).unwrap();
    (m, flat)
}

/// Places a running guest whose shared pages (if any) already live in the
/// host's resident store.
pub fn place_running(dc: &mut Datacenter, host: &str, vm: GuestVm, start_us: u64) {
    let runner = WorkloadRunner::new(&vm.workload, vm.page_count(), start_us).unwrap();
    let reservation = vm.space.private_bytes();
    dc.place(
        &host.into(),
        HostedVm {
            vm,
            kind: VmKind::Booted,
            reservation_bytes: reservation,
            runner: Some(runner),
            background_bps: 0,
            background_cursor: 0,
            template: None,
        },
    )
    .unwrap();
}

/// Applies the writes of `trace` to a flat memory copy.
pub fn apply_flat(mem: &mut [u8], trace: &[TraceOp]) {
    for op in trace {
        if let Access::Write(c) = &op.access {
            let at = op.page as usize * PAGE_SIZE;
            mem[at..at + PAGE_SIZE].copy_from_slice(c.as_bytes());
        }
    }
}

/// Reads every page of a VM through the fault path, then returns its flat
/// memory.
pub fn read_all(dc: &mut Datacenter, vm: &vms_core::VmId, mut t: u64) -> Vec<u8> {
    let pages = dc.vm(vm).unwrap().vm.page_count();
    for p in 0..pages {
        t = dc.touch_page(vm, p, t).unwrap();
    }
    let host = dc.locate(vm).unwrap();
    let h = dc.host(&host).unwrap();
    h.vms[vm].vm.space.materialize(&h.mem.resident).unwrap()
}

pub fn first_diff(a: &[u8], b: &[u8]) -> Option<usize> {
    if a.len() != b.len() {
        return Some(usize::MAX);
    }
    a.chunks(PAGE_SIZE).zip(b.chunks(PAGE_SIZE)).position(|(x, y)| x != y)
}

pub const P: u64 = PAGE_SIZE as u64;

macro_rules! ensure {
    ($c:expr, $($fmt:tt)+) => {
        if !$c {
            return Err(format!($($fmt)+).into());
        }
    };
}
#[allow(unused_imports)]
pub(crate) use ensure;

pub fn no_prefetch() -> StreamConfig {
    StreamConfig {
        prefetch_window: 0,
        ..StreamConfig::default()
    }
}

pub fn small_host(pages: u64) -> HostSpec {
    HostSpec {
        ram_capacity_bytes: pages * P,
        ..HostSpec::new("h0")
    }
}

/// A datacenter whose store holds image "img" captured from a random guest.
pub fn with_image(specs: Vec<HostSpec>, pages: u64, seed: u64, cfg: StreamConfig) -> Datacenter {
    let mut dc = Datacenter::new(specs, LATENCY_US, STORE_BPS, cfg);
    let mut parent = guest("parent", pages, seed, idle());
    publish(&mut dc, &mut parent, "img");
    dc
}

/// Starts an idle clone of "img"; returns when it is live.
pub fn start_clone(dc: &mut Datacenter, host: &str, id: &str) -> u64 {
    dc.live_image_start(&"img".into(), &host.into(), id.into(), &IdentityOverrides::default(), idle(), 0, 0)
        .unwrap()
        .live_at
}

pub fn remote_pages(dc: &Datacenter, id: &str) -> Vec<u64> {
    dc.vm(&id.into()).unwrap().vm.space.remote_pages()
}

/// Independent accounting: every page of every VM on h0.
pub struct Walk {
    pub private: u64,
    pub shared: HashSet<ContentHash>,
    pub refs: BTreeMap<ContentHash, u64>,
}

pub fn walk(dc: &Datacenter) -> Walk {
    let host = dc.host(&"h0".into()).unwrap();
    let mut w = Walk {
        private: 0,
        shared: HashSet::new(),
        refs: BTreeMap::new(),
    };
    for hv in host.vms.values() {
        let s = &hv.vm.space;
        for p in 0..s.page_count() {
            match s.state(p) {
                PageState::Private(_) => w.private += P,
                PageState::Shared(h) => {
                    w.shared.insert(h);
                    *w.refs.entry(h).or_default() += 1;
                }
                _ => {}
            }
        }
    }
    for h in host.mem.resident.hashes() {
        if host.mem.cache.contains(h) {
            *w.refs.entry(*h).or_default() += 1;
        }
    }
    w
}

/// A random h0: a few clones and a booted guest, random reads, writes and
/// evictions.
pub fn random_host(seed: u64) -> Datacenter {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pages = rng.random_range(16..160);
    let cap = rng.random_range(24..200);
    let cfg = StreamConfig {
        prefetch_window: rng.random_range(0..6),
        ..StreamConfig::default()
    };
    let mut spec = small_host(cap);
    spec.cache_fraction = rng.random_range(0.0..0.3);
    let mut dc = with_image(vec![spec], pages, seed, cfg);
    place_running(&mut dc, "h0", guest("booted", 24, seed ^ 7, idle()), 0);
    let clones = rng.random_range(1..5);
    let mut t = 0;
    for k in 0..clones {
        t = t.max(start_clone(&mut dc, "h0", &format!("c{k}")));
    }
    for _ in 0..rng.random_range(0..300) {
        let id = VmId::new(format!("c{}", rng.random_range(0..clones)));
        let p = rng.random_range(0..pages);
        if rng.random_bool(0.25) {
            let host = dc.host_mut(&"h0".into()).unwrap();
            let hv = host.vms.get_mut(&id).unwrap();
            if hv.vm.space.is_remote(p) {
                continue;
            }
            if let PageState::Shared(h) = hv.vm.space.state(p) {
                host.mem.release_shared(&h).unwrap();
            }
            let c = PageContent::synthetic(seed ^ 99, rng.random_range(0..8));
            hv.vm.space.set_state(p, PageState::Private(c)).unwrap();
        } else {
            t = dc.touch_page(&id, p, t).unwrap();
        }
        if rng.random_bool(0.05) {
            let _ = enforce(dc.host_mut(&"h0".into()).unwrap(), &EvictionPolicy::default());
        }
    }
    dc
}

/// Checks `account` on a random host against [`walk`], and the resident
/// store's refcounts against one reference per shared mapping plus one per
/// cache entry.
pub fn accounting_audit(seed: u64) -> Result<(), String> {
    let dc = random_host(seed);
    let host = dc.host(&"h0".into()).unwrap();
    let r = account(host);
    let w = walk(&dc);
    let unique = w.shared.len() as u64 * P;
    ensure!(r.private_bytes == w.private, "seed {seed}: private {} != {}", r.private_bytes, w.private);
    ensure!(r.unique_shared_bytes == unique, "seed {seed}: shared {} != {unique}", r.unique_shared_bytes);
    let cache_only = host.mem.resident.hashes().filter(|h| !w.shared.contains(h)).count() as u64 * P;
    ensure!(r.cache_only_bytes == cache_only, "seed {seed}: cache-only {} != {cache_only}", r.cache_only_bytes);
    let physical = w.private + unique + cache_only;
    ensure!(r.host_physical_bytes == physical, "seed {seed}: physical {} != {physical}", r.host_physical_bytes);
    let logical: u64 = r.per_vm.values().map(|f| f.private_bytes + f.shared_bytes).sum();
    let saved = logical - w.private - unique;
    ensure!(r.savings_bytes == saved, "seed {seed}: savings {} != {saved}", r.savings_bytes);
    let audit: BTreeMap<ContentHash, u64> = host.mem.resident.refcounts().into_iter().collect();
    ensure!(audit == w.refs, "seed {seed}: refcounts do not balance");
    Ok(())
}

/// What each guest on h0 would read at every page, resolving `Remote`
/// pages against the image store without fetching them.
pub fn observable(dc: &Datacenter) -> BTreeMap<VmId, Vec<u8>> {
    let host = dc.host(&"h0".into()).unwrap();
    let images = dc.images.read().unwrap();
    host.vms
        .iter()
        .map(|(id, hv)| {
            let s = &hv.vm.space;
            let mut out = Vec::with_capacity(s.page_count() as usize * PAGE_SIZE);
            for p in 0..s.page_count() {
                let c = match s.state(p) {
                    PageState::Remote => images.store.get_page(&s.source_hash(p)).unwrap(),
                    _ => s.read_resident(p, &host.mem.resident).unwrap(),
                };
                out.extend_from_slice(c.as_bytes());
            }
            (id.clone(), out)
        })
        .collect()
}

/// Enforces the watermarks on a random host, then refetches everything:
/// every guest must read what it read before.
pub fn eviction_fidelity(seed: u64) -> Result<(), String> {
    let mut dc = random_host(seed);
    let before = observable(&dc);
    let _ = enforce(dc.host_mut(&"h0".into()).unwrap(), &EvictionPolicy::default());
    ensure!(observable(&dc) == before, "seed {seed}: eviction changed guest memory");
    for (id, mem) in &before {
        let got = read_all(&mut dc, id, 10_000_000);
        ensure!(first_diff(&got, mem).is_none(), "seed {seed}: {id} differs after refetch");
    }
    Ok(())
}

pub fn two_hosts(nic_bps: u64) -> Datacenter {
    let specs = ["h0", "h1"]
        .iter()
        .map(|h| HostSpec {
            nic_bandwidth_bits_per_s: nic_bps,
            ..HostSpec::new(*h)
        })
        .collect();
    Datacenter::new(specs, LATENCY_US, STORE_BPS, StreamConfig::default())
}

pub const T0: u64 = 1_000_000;

/// Guest "v" on h0 of a two-host datacenter: either booted (all private)
/// or a clone of a random image. Returns the flat memory the workload
/// starts from.
pub fn running_guest(seed: u64, pages: u64, as_clone: bool, w: WorkloadSpec) -> (Datacenter, Vec<u8>) {
    let mut dc = two_hosts(1_000_000_000);
    if as_clone {
        let mut parent = guest("parent", pages, seed, idle());
        let (_, image) = publish(&mut dc, &mut parent, "img");
        dc.live_image_start(&"img".into(), &"h0".into(), "v".into(), &IdentityOverrides::default(), w, 0, 0)
            .unwrap();
        (dc, image)
    } else {
        let vm = guest("v", pages, seed, w);
        let start = vm.space.materialize(&vms_core::PageStore::new()).unwrap();
        place_running(&mut dc, "h0", vm, 0);
        (dc, start)
    }
}

/// Flat memory `w` leaves behind after the runner's ops so far, replayed
/// from the seed on top of `start`.
pub fn replayed(dc: &Datacenter, id: &VmId, w: &WorkloadSpec, start: &[u8]) -> Vec<u8> {
    let hv = dc.vm(id).unwrap();
    let done = hv.runner.as_ref().unwrap().ops_done();
    let trace = generate_trace(w, hv.vm.page_count(), done as f64 / w.ops_per_second).unwrap();
    assert_eq!(trace.len() as u64, done);
    let mut want = start.to_vec();
    apply_flat(&mut want, &trace);
    want
}

/// Migrates a running guest from h0 to h1, keeps it running, and compares
/// its memory with the replayed workload.
pub fn migration_fidelity(seed: u64, as_clone: bool, mode: MigrationMode) -> Result<(), String> {
    let w = uniform(0.4, 2000.0, seed ^ 0x5a);
    let (mut dc, start) = running_guest(seed, 64 + seed % 200, as_clone, w.clone());
    let id: VmId = "v".into();
    dc.run_vm(&id, T0, None).unwrap();
    let r = migrate(&mut dc, &id, &"h1".into(), &MigrationParams::new(mode), T0).map_err(|e| e.to_string())?;
    ensure!(r.downtime_us <= r.total_us, "downtime {} > total {}", r.downtime_us, r.total_us);
    let after = r.completed_at + 200_000;
    dc.run_vm(&id, after, None).unwrap();
    let want = replayed(&dc, &id, &w, &start);
    let got = read_all(&mut dc, &id, after + 1);
    ensure!(first_diff(&got, &want).is_none(), "seed {seed} {mode:?}: page {:?} differs", first_diff(&got, &want));
    ensure!(dc.host(&"h0".into()).unwrap().vms.is_empty(), "source still holds the guest");
    Ok(())
}

/// Runs a booted guest, captures it, and checks the image against the
/// replayed workload; then a clone of it, running its own workload, must
/// read image plus its own writes on every page.
pub fn snapshot_and_clone_fidelity(seed: u64, pages: u64) -> Result<(), String> {
    let w = uniform(0.3, 3000.0, seed ^ 0x17);
    let (mut dc, start) = running_guest(seed, pages, false, w.clone());
    let id: VmId = "v".into();
    dc.run_vm(&id, T0, None).unwrap();
    let want = replayed(&dc, &id, &w, &start);
    let image = {
        let Datacenter { images, hosts, .. } = &mut dc;
        let mut server = images.write().unwrap();
        let host = hosts.get_mut(&"h0".into()).unwrap();
        let hv = host.vms.get_mut(&id).unwrap();
        let (m, _) = live_image_create_split(&mut hv.vm, ImageId::new("img"), &mut server.store, &mut host.mem.resident, T0)
            .map_err(|e| e.to_string())?;
        let flat = materialize_image(&m, &server.store).unwrap();
        server.register(m).unwrap();
        flat
    };
    ensure!(first_diff(&image, &want).is_none(), "seed {seed}: image page {:?} differs", first_diff(&image, &want));
    // Capture leaves the parent's memory as it was.
    let parent = read_all(&mut dc, &id, T0);
    ensure!(first_diff(&parent, &want).is_none(), "seed {seed}: parent changed by capture");
    let cw = uniform(0.3, 3000.0, seed ^ 0x99);
    dc.live_image_start(&"img".into(), &"h1".into(), "c".into(), &IdentityOverrides::default(), cw.clone(), 0, T0)
        .map_err(|e| e.to_string())?;
    let c: VmId = "c".into();
    dc.run_vm(&c, 2 * T0, None).unwrap();
    let want = replayed(&dc, &c, &cw, &image);
    let got = read_all(&mut dc, &c, 2 * T0 + 1);
    ensure!(first_diff(&got, &want).is_none(), "seed {seed}: clone page {:?} differs", first_diff(&got, &want));
    Ok(())
}
