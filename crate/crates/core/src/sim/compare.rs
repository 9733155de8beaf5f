// Copyright 2026 The vmstream Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

use serde::Serialize;

use super::metrics::Summary;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ComparisonReport {
    /// Mean boot startup over mean clone startup.
    pub speedup: f64,
    /// Peak concurrent clones over peak concurrent booted VMs.
    pub density_ratio: f64,
    /// Wire bytes per booted VM over wire bytes per clone.
    pub io_ratio: f64,
}

fn need(v: Option<f64>, what: &str) -> Result<f64> {
    v.filter(|x| *x > 0.0)
        .ok_or_else(|| Error::InvalidConfig(format!("report has no {what}")))
}

/// Compares a cold-boot baseline run against a cloning run of the same
/// templates.
pub fn compare(baseline: &Summary, vms: &Summary) -> Result<ComparisonReport> {
    let mut a = baseline.templates.clone();
    let mut b = vms.templates.clone();
    a.sort_by(|x, y| x.name.cmp(&y.name));
    b.sort_by(|x, y| x.name.cmp(&y.name));
    if a != b {
        return Err(Error::InvalidConfig(
            "baseline and clone runs use different templates".into(),
        ));
    }
    if baseline.max_concurrent_booted == 0 {
        return Err(Error::InvalidConfig("baseline report admitted no booted VM".into()));
    }
    Ok(ComparisonReport {
        speedup: need(baseline.mean_boot_startup_us, "booted VM startup")?
            / need(vms.mean_clone_startup_us, "clone startup")?,
        density_ratio: vms.max_concurrent_clones as f64 / baseline.max_concurrent_booted as f64,
        io_ratio: need(baseline.boot_wire_per_vm, "booted VM wire bytes")?
            / need(vms.clone_wire_per_vm, "clone wire bytes")?,
    })
}
