// Copyright 2026 The vmstream Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn vmsctl(store: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vmsctl"))
        .env("VMSCTL_STORE", store)
        .args(args)
        .output()
        .expect("spawn vmsctl")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "stdout: {}\nstderr: {}", stdout(&o), stderr(&o));
    stdout(&o)
}

fn scenario(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

#[test]
fn help_names_every_top_level_verb() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(vmsctl(dir.path(), &["--help"]));
    for verb in ["image", "boot", "migrate", "list", "sim", "report"] {
        assert!(out.contains(verb), "{verb}");
    }
    let out = ok(vmsctl(dir.path(), &["image", "--help"]));
    for verb in ["create", "start", "list"] {
        assert!(out.contains(verb), "{verb}");
    }
}

#[test]
fn unknown_vm_is_a_domain_error() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("x.img");
    let o = vmsctl(dir.path(), &["image", "create", "--vm", "v1", "--out", img.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(stderr(&o).trim(), "error: UnknownVm: v1");
    let o = vmsctl(dir.path(), &["migrate", "--vm", "demo", "--to", "h9", "--mode", "precopy"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: UnknownHost: "), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["frobnicate"][..],
        &["boot", "--host", "h0"],
        &["migrate", "--vm", "demo", "--to", "h1", "--mode", "teleport"],
    ] {
        let o = vmsctl(dir.path(), args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
    }
}

#[test]
fn capture_start_and_list_a_clone() {
    let dir = tempfile::tempdir().unwrap();
    let store = dir.path().join("store");
    let images = dir.path().join("images");
    std::fs::create_dir_all(&images).unwrap();
    let img = images.join("demo-live.img");
    let img_s = img.to_str().unwrap();

    ok(vmsctl(&store, &["image", "create", "--vm", "demo", "--out", img_s]));
    assert!(img.is_file());
    let listed = ok(vmsctl(&store, &["image", "list", images.to_str().unwrap()]));
    assert!(listed.contains("demo-live.img"), "{listed}");
    assert!(listed.contains("demo-live"), "{listed}");

    ok(vmsctl(&store, &["image", "start", img_s, "--host", "h0", "--hostname", "c1"]));
    let table = ok(vmsctl(&store, &["list"]));
    let row = table
        .lines()
        .find(|l| l.starts_with("c1 "))
        .unwrap_or_else(|| panic!("no c1 row in\n{table}"));
    let cols: Vec<&str> = row.split_whitespace().collect();
    assert_eq!(cols, ["c1", "clone", "h0", "demo", "c1", "running"]);

    // Starting the same hostname twice is refused.
    let o = vmsctl(&store, &["image", "start", img_s, "--host", "h0", "--hostname", "c1"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn boot_and_migrate_update_the_store() {
    let dir = tempfile::tempdir().unwrap();
    ok(vmsctl(dir.path(), &["boot", "--template", "demo", "--host", "h1", "--vm", "b"]));
    let out = ok(vmsctl(dir.path(), &["migrate", "--vm", "b", "--to", "h2", "--mode", "postcopy"]));
    assert!(out.contains("migrated b to h2"), "{out}");
    let table = ok(vmsctl(dir.path(), &["list"]));
    let row = table.lines().find(|l| l.starts_with("b ")).unwrap();
    assert!(row.split_whitespace().any(|c| c == "h2"), "{row}");
}

#[test]
fn sim_run_is_deterministic_and_comparable() {
    let dir = tempfile::tempdir().unwrap();
    let runs: Vec<PathBuf> = ["a", "b"].iter().map(|n| dir.path().join(n)).collect();
    for out in &runs {
        ok(vmsctl(
            dir.path(),
            &[
                "--seed",
                "7",
                "sim",
                "run",
                scenario("reference_clone.toml").to_str().unwrap(),
                "--out",
                out.to_str().unwrap(),
            ],
        ));
    }
    for f in ["metrics.jsonl", "summary.json"] {
        let a = std::fs::read(runs[0].join(f)).unwrap();
        let b = std::fs::read(runs[1].join(f)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{f}");
    }
    let base = dir.path().join("boot");
    ok(vmsctl(
        dir.path(),
        &[
            "--seed",
            "7",
            "sim",
            "run",
            scenario("reference_boot.toml").to_str().unwrap(),
            "--out",
            base.to_str().unwrap(),
        ],
    ));
    let rep = ok(vmsctl(dir.path(), &["report", "compare", base.to_str().unwrap(), runs[0].to_str().unwrap()]));
    let keys: Vec<&str> = rep.lines().filter_map(|l| l.split_whitespace().next()).collect();
    assert_eq!(keys, ["speedup", "density_ratio", "io_ratio"]);
    for l in rep.lines() {
        let v: f64 = l.split_whitespace().nth(1).unwrap().parse().unwrap();
        assert!(v > 0.0, "{l}");
    }
}

#[test]
fn bad_scenario_is_invalid_config() {
    let dir = tempfile::tempdir().unwrap();
    let sc = dir.path().join("bad.toml");
    std::fs::write(&sc, "format_version = 9\n").unwrap();
    let o = vmsctl(
        dir.path(),
        &["sim", "run", sc.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error: InvalidConfig: "), "{}", stderr(&o));
}
