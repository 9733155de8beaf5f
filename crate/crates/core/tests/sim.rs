// Copyright 2026 The vmstream Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;

use vms_core::sim::{compare, read_summary, run, run_live, Scenario};
use vms_core::Error;

fn scenario_file(name: &str) -> Scenario {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name);
    Scenario::load(&p).unwrap()
}

const UBUNTU: &str = r#"
[[templates]]
name = "ubuntu"
memory_mib = 1024
disk_mib = 20480
workload = { kind = "phased", phases = [{ start = 0, end = 65536, duration_s = 3600.0 }], write_fraction = 0.1, ops_per_second = 1000.0 }
"#;

fn single_boot() -> Scenario {
    let text = format!(
        r#"
format_version = 1
name = "one"
[[hosts]]
host_id = "h0"
{UBUNTU}
[[script]]
action = "boot_vm"
at_s = 0.0
vm = "b0"
template = "ubuntu"
host = "h0"
"#
    );
    Scenario::from_toml(&text).unwrap()
}

#[test]
fn single_boot_is_disk_transfer_plus_boot_time() {
    let m = run(&single_boot(), 1).unwrap();
    let lat = m.summary.vms["b0"].startup_latency_us.unwrap() as f64 / 1e6;
    // 20 GiB over 10 Gbit/s, then 96.9 s of boot, then 100 ops with the
    // first at boot completion.
    let transfer = (20u64 << 30) as f64 * 8.0 / 10e9;
    let floor = transfer + 96.9 + 0.099;
    assert!(lat >= floor && lat < floor + 0.5, "{lat} vs {floor}");
    assert_eq!(m.summary.wire_by_purpose["boot_transfer"], 20 << 30);
}

#[test]
fn reference_clones_are_ready_within_ten_seconds() {
    let m = run(&scenario_file("reference_clone.toml"), 7).unwrap();
    let clones: Vec<_> = m.summary.vms.values().filter(|v| v.kind == "clone").collect();
    assert_eq!(clones.len(), 10);
    for c in clones {
        let lat = c.startup_latency_us.expect("clone became ready");
        assert!(lat <= 10_000_000, "{lat}");
    }
    assert!(m.summary.errors.is_empty(), "{:?}", m.summary.errors);
}

#[test]
fn same_seed_gives_identical_output() {
    let sc = scenario_file("reference_clone.toml");
    let a = run(&sc, 11).unwrap();
    let b = run(&sc, 11).unwrap();
    assert_eq!(a.jsonl(), b.jsonl());
    assert_eq!(a.summary_json(), b.summary_json());
}

#[test]
fn wire_purposes_add_up() {
    let m = run(&scenario_file("reference_clone.toml"), 3).unwrap();
    let s = &m.summary;
    assert_eq!(s.wire_by_purpose.values().sum::<u64>(), s.wire_total);
    let per_vm: u64 = s.vms.values().map(|v| v.wire_bytes).sum();
    assert!(per_vm <= s.wire_total);
    for (p, c) in &s.content_by_purpose {
        assert!(*c <= s.wire_by_purpose[p], "{p}");
    }
}

#[test]
fn summary_round_trips_through_a_directory() {
    let m = run(&scenario_file("reference_clone.toml"), 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    m.write_dir(dir.path()).unwrap();
    let back = read_summary(dir.path()).unwrap();
    assert_eq!(back, m.summary);
    // The clone run also holds its booted parent, so it can stand in as
    // its own baseline.
    let r = compare(&back, &back).unwrap();
    let want = back.mean_boot_startup_us.unwrap() / back.mean_clone_startup_us.unwrap();
    assert_eq!(r.speedup, want);
    assert_eq!(r.density_ratio, 10.0);
}

#[test]
fn live_socket_run_matches_in_process_run() {
    let sc = scenario_file("reference_clone.toml");
    let dir = tempfile::tempdir().unwrap();
    let live = run_live(&sc, 9, &dir.path().join("s.sock")).unwrap();
    let local = run(&sc, 9).unwrap();
    assert_eq!(live.summary.wire_total, local.summary.wire_total);
    assert_eq!(live.summary.vms, local.summary.vms);
}

#[test]
fn invalid_scenarios_are_rejected() {
    let base = single_boot().to_toml();
    for (from, to) in [
        ("format_version = 1", "format_version = 2"),
        ("template = \"ubuntu\"", "template = \"debian\""),
        ("host = \"h0\"", "host = \"h7\""),
        ("write_fraction = 0.1", "write_fraction = 1.5"),
    ] {
        assert!(base.contains(from), "{from}");
        let text = base.replacen(from, to, 1);
        let err = Scenario::from_toml(&text).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)), "{from}: {err}");
    }
    assert!(matches!(Scenario::from_toml("format_version = 1\nbogus = 3\n"), Err(Error::InvalidConfig(_))));
}

#[test]
fn overcommit_is_reported_not_fatal() {
    // Ten clones admitted on a light touch estimate, then each rewrites
    // all of its memory.
    let text = r#"
format_version = 1
name = "overcommit"
boot_duration_s = 1.0
clone_touch_fraction = 0.05
[[hosts]]
host_id = "h0"
ram_gib = 0.5
[[templates]]
name = "small"
memory_mib = 128
disk_mib = 64
workload = { kind = "uniform", write_fraction = 1.0, ops_per_second = 20000.0, content_pool = 16 }
[[script]]
action = "boot_vm"
at_s = 0.0
vm = "p"
template = "small"
host = "h0"
[[script]]
action = "create_image"
at_s = 5.0
vm = "p"
image = "img"
retire_parent = true
[[script]]
action = "clone_vm"
at_s = 6.0
image = "img"
count = 10
host = "h0"
[[script]]
action = "run_for"
at_s = 6.0
duration_s = 8.0
"#;
    let m = run(&Scenario::from_toml(text).unwrap(), 2).unwrap();
    assert!(m.of_kind("overcommit_failure").count() > 0);
    assert!(m.summary.errors.iter().any(|e| e.contains("OvercommitFailure")), "{:?}", m.summary.errors);
}
