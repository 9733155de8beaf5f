// Copyright 2026 The vmstream Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

//! `vmsctl`: operator CLI over a store directory and the simulator.

mod args;
mod state;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use vms_core::cluster::Datacenter;
use vms_core::footprint::account;
use vms_core::migration::{migrate, MigrationMode, MigrationParams};
use vms_core::page_store::{read_manifest, write_image};
use vms_core::sim::{compare, read_summary, run, run_live, Scenario};
use vms_core::snapshot::live_image_create_split;
use vms_core::{Error, HostId, ImageId, Result, VmId};

use args::{Cli, Cmd, ImageCmd, ReportCmd, SimCmd};
use state::{check_admission, Kind, State, VmEntry, CLONE_TOUCH_FRACTION, WARMUP_US};

const MIB: f64 = 1024.0 * 1024.0;

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {}", e.code(), detail(&e));
            ExitCode::from(1)
        }
    }
}

/// Message part of the error line, kept to a single line.
fn detail(e: &Error) -> String {
    let s = match e {
        Error::InvalidConfig(m)
        | Error::StreamUnavailable(m)
        | Error::StoreError(m)
        | Error::UnknownHost(m)
        | Error::UnknownVm(m)
        | Error::ProtocolError(m)
        | Error::PlacementError(m)
        | Error::MigrationAborted(m)
        | Error::CorruptImage(m)
        | Error::MissingPage(m) => m.clone(),
        other => other.to_string(),
    };
    s.replace('\n', " ")
}

fn dispatch(cli: &Cli) -> Result<()> {
    let store = cli.store.as_path();
    match &cli.cmd {
        Cmd::Image(ImageCmd::Create { vm, out }) => image_create(store, vm, out),
        Cmd::Image(ImageCmd::Start {
            path,
            host,
            hostname,
            net_id,
        }) => image_start(store, cli.seed, path, host, hostname.as_deref(), net_id.as_deref()),
        Cmd::Image(ImageCmd::List { dir }) => image_list(dir),
        Cmd::Boot { template, host, vm } => boot(store, cli.seed, template, host, vm.as_deref()),
        Cmd::Migrate { vm, to, mode } => migrate_vm(store, vm, to, mode),
        Cmd::List => list(store),
        Cmd::Sim(SimCmd::Run { scenario, out, live }) => sim_run(scenario, cli.seed, out, *live),
        Cmd::Report(ReportCmd::Compare { baseline, vms }) => report_compare(baseline, vms),
    }
}

fn known_vm(st: &State, vm: &str) -> Result<()> {
    if st.vms.contains_key(vm) {
        Ok(())
    } else {
        Err(Error::UnknownVm(vm.to_string()))
    }
}

fn image_create(store: &Path, vm: &str, out: &Path) -> Result<()> {
    let st = State::load(store)?;
    known_vm(&st, vm)?;
    let image_id = out
        .file_stem()
        .and_then(|s| s.to_str())
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::InvalidConfig(format!("cannot name an image after {}", out.display())))?;
    let mut dc = st.materialize()?;
    let vm_id = VmId::new(vm);
    let host = dc.locate(&vm_id)?;
    let Datacenter { images, hosts, .. } = &mut dc;
    let mut server = images.write().expect("image table poisoned");
    let h = hosts.get_mut(&host).expect("located");
    let hv = h.vms.get_mut(&vm_id).expect("located");
    let (m, rep) = live_image_create_split(
        &mut hv.vm,
        ImageId::new(image_id),
        &mut server.store,
        &mut h.mem.resident,
        WARMUP_US,
    )?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    write_image(&server.store, &m, out)?;
    println!(
        "image {} from {vm}: {} memory pages, {} disk pages, paused {} us -> {}",
        m.image_id,
        m.memory_page_count,
        m.disk_page_count,
        rep.paused_virtual_us,
        out.display()
    );
    Ok(())
}

fn fresh_id(st: &State, prefix: &str) -> String {
    (0u64..)
        .map(|i| format!("{prefix}-{i}"))
        .find(|id| !st.vms.contains_key(id))
        .expect("unbounded")
}

fn image_start(
    store: &Path,
    seed: u64,
    path: &Path,
    host: &str,
    hostname: Option<&str>,
    net_id: Option<&str>,
) -> Result<()> {
    let mut st = State::load(store)?;
    st.check_host(host)?;
    let m = read_manifest(path)?;
    let template = st
        .templates
        .iter()
        .find(|t| t.page_count() == m.memory_page_count)
        .ok_or_else(|| {
            Error::InvalidConfig(format!(
                "no template has {} memory pages like {}",
                m.memory_page_count, m.image_id
            ))
        })?
        .clone();
    let id = match hostname {
        Some(h) => h.to_string(),
        None => fresh_id(&st, "clone"),
    };
    if st.vms.contains_key(&id) {
        return Err(Error::InvalidConfig(format!("vm {id} already exists")));
    }
    let dc = st.materialize()?;
    check_admission(&dc, host, template.memory_bytes(), CLONE_TOUCH_FRACTION)?;
    drop(dc);
    let abs = std::path::absolute(path)?;
    st.vms.insert(
        id.clone(),
        VmEntry {
            kind: Kind::Clone,
            host: host.to_string(),
            template: template.name.clone(),
            image: Some(abs),
            hostname: id.clone(),
            net_id: net_id.map_or_else(|| format!("net-{id}"), str::to_string),
            seed,
        },
    );
    // Launch it once so a broken image never reaches the state file.
    let dc = st.materialize()?;
    let hv = dc.vm(&VmId::new(&id))?;
    st.save(store)?;
    println!(
        "started {id} on {host} from {} ({} of {} pages resident)",
        m.image_id,
        hv.vm.space.private_pages() + hv.vm.space.shared_pages(),
        hv.vm.page_count()
    );
    Ok(())
}

fn image_list(dir: &Path) -> Result<()> {
    let mut rows = Vec::new();
    for ent in std::fs::read_dir(dir)? {
        let path = ent?.path();
        if !path.is_file() {
            continue;
        }
        // Anything that does not parse as an image is not listed.
        if let Ok(m) = read_manifest(&path) {
            rows.push((path, m));
        }
    }
    rows.sort_by(|a, b| a.0.cmp(&b.0));
    println!("{:<24} {:<20} {:>10} {:>10} {:<16}", "FILE", "IMAGE", "MEM_PAGES", "DISK_PAGES", "HOSTNAME");
    for (path, m) in rows {
        let name = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        println!(
            "{:<24} {:<20} {:>10} {:>10} {:<16}",
            name,
            m.image_id.as_str(),
            m.memory_page_count, m.disk_page_count, m.identity.hostname
        );
    }
    Ok(())
}

fn boot(store: &Path, seed: u64, template: &str, host: &str, vm: Option<&str>) -> Result<()> {
    let mut st = State::load(store)?;
    st.check_host(host)?;
    let t = st.template(template)?.clone();
    let id = match vm {
        Some(v) => v.to_string(),
        None => fresh_id(&st, template),
    };
    if st.vms.contains_key(&id) {
        return Err(Error::InvalidConfig(format!("vm {id} already exists")));
    }
    let dc = st.materialize()?;
    check_admission(&dc, host, t.memory_bytes(), 1.0)?;
    drop(dc);
    st.vms.insert(
        id.clone(),
        VmEntry {
            kind: Kind::Booted,
            host: host.to_string(),
            template: t.name.clone(),
            image: None,
            hostname: id.clone(),
            net_id: format!("net-{id}"),
            seed,
        },
    );
    st.save(store)?;
    println!("booted {id} on {host} from template {}", t.name);
    Ok(())
}

fn migrate_vm(store: &Path, vm: &str, to: &str, mode: &str) -> Result<()> {
    let mut st = State::load(store)?;
    known_vm(&st, vm)?;
    st.check_host(to)?;
    let parsed: MigrationMode = mode.parse()?;
    let mut dc = st.materialize()?;
    let rep = migrate(&mut dc, &VmId::new(vm), &HostId::new(to), &MigrationParams::new(parsed), WARMUP_US)?;
    st.vms.get_mut(vm).expect("checked").host = to.to_string();
    st.save(store)?;
    println!(
        "migrated {vm} to {to} ({mode}): {} rounds, {} pages, {} wire bytes, downtime {} us, total {} us",
        rep.rounds, rep.pages_sent, rep.bytes_transferred, rep.downtime_us, rep.total_us
    );
    Ok(())
}

fn list(store: &Path) -> Result<()> {
    let st = State::load(store)?;
    let dc = st.materialize()?;
    println!("{:<8} {:>4} {:>12} {:>12} {:>12}", "HOST", "VMS", "PRIVATE_MIB", "PHYSICAL_MIB", "SAVED_MIB");
    for (id, host) in &dc.hosts {
        let r = account(host);
        println!(
            "{:<8} {:>4} {:>12.1} {:>12.1} {:>12.1}",
            id.as_str(),
            host.vms.len(),
            r.private_bytes as f64 / MIB,
            r.host_physical_bytes as f64 / MIB,
            r.savings_bytes as f64 / MIB
        );
    }
    println!();
    println!("{:<16} {:<7} {:<6} {:<10} {:<16} {:<8}", "VM", "KIND", "HOST", "TEMPLATE", "HOSTNAME", "STATE");
    for (id, e) in &st.vms {
        let kind = match e.kind {
            Kind::Booted => "booted",
            Kind::Clone => "clone",
        };
        let state = if dc.vm(&VmId::new(id)).is_ok() { "running" } else { "lost" };
        println!(
            "{:<16} {:<7} {:<6} {:<10} {:<16} {:<8}",
            id, kind, e.host, e.template, e.hostname, state
        );
    }
    Ok(())
}

fn sim_run(scenario: &Path, seed: u64, out: &PathBuf, live: bool) -> Result<()> {
    let sc = Scenario::load(scenario)?;
    let metrics = if live {
        let dir = tempfile::tempdir()?;
        run_live(&sc, seed, &dir.path().join("pages.sock"))?
    } else {
        run(&sc, seed)?
    };
    metrics.write_dir(out)?;
    let s = &metrics.summary;
    println!(
        "{}: {} vms, end {} us, {} wire bytes, {} errors -> {}",
        s.scenario,
        s.vms.len(),
        s.end_time_us,
        s.wire_total,
        s.errors.len(),
        out.display()
    );
    Ok(())
}

fn report_compare(baseline: &Path, vms: &Path) -> Result<()> {
    let b = read_summary(baseline)?;
    let v = read_summary(vms)?;
    let r = compare(&b, &v)?;
    println!("speedup {:.3}", r.speedup);
    println!("density_ratio {:.3}", r.density_ratio);
    println!("io_ratio {:.3}", r.io_ratio);
    Ok(())
}
