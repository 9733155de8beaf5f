// Copyright 2026 The vmstream Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

//! Synthetic memory-access programs.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::page_store::PageContent;

/// One working-set phase of a [`WorkloadKind::Phased`] program.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    /// First page of the working set.
    pub start: u64,
    /// One past the last page.
    pub end: u64,
    pub duration_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WorkloadKind {
    Sequential,
    Uniform,
    Hotspot { zipf_s: f64 },
    Phased { phases: Vec<Phase> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSpec {
    #[serde(flatten)]
    pub kind: WorkloadKind,
    pub write_fraction: f64,
    pub ops_per_second: f64,
    #[serde(default)]
    pub seed: u64,
    /// Number of distinct page contents writes draw from. `0` gives every
    /// write fresh content; a small pool makes write-heavy runs cheap to hold
    /// in memory.
    #[serde(default)]
    pub content_pool: u64,
}

impl WorkloadSpec {
    pub fn new(kind: WorkloadKind, write_fraction: f64, ops_per_second: f64, seed: u64) -> Self {
        WorkloadSpec {
            kind,
            write_fraction,
            ops_per_second,
            seed,
            content_pool: 0,
        }
    }

    pub fn validate(&self, page_count: u64) -> Result<()> {
        if !(0.0..=1.0).contains(&self.write_fraction) {
            return Err(Error::InvalidConfig(format!(
                "write_fraction {} outside [0, 1]",
                self.write_fraction
            )));
        }
        if !(self.ops_per_second > 0.0 && self.ops_per_second.is_finite()) {
            return Err(Error::InvalidConfig("ops_per_second must be positive".into()));
        }
        match &self.kind {
            WorkloadKind::Hotspot { zipf_s } if !(*zipf_s > 0.0) => {
                return Err(Error::InvalidConfig("zipf_s must be positive".into()));
            }
            WorkloadKind::Phased { phases } => {
                if phases.is_empty() {
                    return Err(Error::InvalidConfig("phased workload has no phases".into()));
                }
                for ph in phases {
                    if ph.start >= ph.end || ph.end > page_count {
                        return Err(Error::InvalidConfig(format!(
                            "phase [{}, {}) outside address space of {page_count} pages",
                            ph.start, ph.end
                        )));
                    }
                    if !(ph.duration_s > 0.0) {
                        return Err(Error::InvalidConfig("phase duration must be positive".into()));
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Inter-op spacing in microseconds for op index `i`, measured from the
    /// start of a run.
    pub fn op_offset_us(&self, i: u64) -> u64 {
        (i as f64 * 1e6 / self.ops_per_second).floor() as u64
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Access {
    Read,
    Write(PageContent),
}

impl Access {
    pub fn is_write(&self) -> bool {
        matches!(self, Access::Write(_))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceOp {
    /// Virtual microseconds from the start of the trace.
    pub t: u64,
    pub page: u64,
    pub access: Access,
}

pub type AccessTrace = Vec<TraceOp>;

/// Stateful generator behind both traces and live workload runs.
pub struct WorkloadCursor {
    spec: WorkloadSpec,
    page_count: u64,
    rng: ChaCha8Rng,
    zipf: Option<Zipf<f64>>,
    issued: u64,
    writes: u64,
    pool: HashMap<u64, PageContent>,
}

impl WorkloadCursor {
    pub fn new(spec: &WorkloadSpec, page_count: u64) -> Result<Self> {
        if page_count == 0 {
            return Err(Error::InvalidConfig("workload over an empty address space".into()));
        }
        spec.validate(page_count)?;
        let zipf = match spec.kind {
            WorkloadKind::Hotspot { zipf_s } => Some(
                Zipf::new(page_count as f64, zipf_s)
                    .map_err(|e| Error::InvalidConfig(format!("zipf: {e}")))?,
            ),
            _ => None,
        };
        Ok(WorkloadCursor {
            spec: spec.clone(),
            page_count,
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            zipf,
            issued: 0,
            writes: 0,
            pool: HashMap::new(),
        })
    }

    pub fn spec(&self) -> &WorkloadSpec {
        &self.spec
    }

    pub fn issued(&self) -> u64 {
        self.issued
    }

    /// Next access. `elapsed_us` is the program-relative time of the op and
    /// only matters for phased programs.
    pub fn next_access(&mut self, elapsed_us: u64) -> (u64, Access) {
        let page = match &self.spec.kind {
            WorkloadKind::Sequential => self.issued % self.page_count,
            WorkloadKind::Uniform => self.rng.random_range(0..self.page_count),
            WorkloadKind::Hotspot { .. } => {
                let rank = self.zipf.as_ref().expect("zipf built").sample(&mut self.rng) as u64;
                rank.clamp(1, self.page_count) - 1
            }
            WorkloadKind::Phased { phases } => {
                let ph = active_phase(phases, elapsed_us);
                self.rng.random_range(ph.start..ph.end)
            }
        };
        self.issued += 1;
        let write = self.spec.write_fraction > 0.0 && self.rng.random::<f64>() < self.spec.write_fraction;
        if !write {
            return (page, Access::Read);
        }
        let content = if self.spec.content_pool == 0 {
            self.writes += 1;
            PageContent::synthetic(self.spec.seed, self.writes)
        } else {
            let k = self.rng.random_range(0..self.spec.content_pool);
            let seed = self.spec.seed;
            self.pool
                .entry(k)
                .or_insert_with(|| PageContent::synthetic(seed ^ 0x5EED_0F_C0DE, k))
                .clone()
        };
        (page, Access::Write(content))
    }
}

fn active_phase(phases: &[Phase], elapsed_us: u64) -> &Phase {
    let cycle: f64 = phases.iter().map(|p| p.duration_s).sum();
    let mut t = (elapsed_us as f64 / 1e6) % cycle;
    for ph in phases {
        if t < ph.duration_s {
            return ph;
        }
        t -= ph.duration_s;
    }
    phases.last().expect("non-empty")
}

/// Pure trace generation: `round(duration_s × ops_per_second)` ops, op `i`
/// at `floor(i × 10⁶ / ops_per_second)` µs.
pub fn generate_trace(spec: &WorkloadSpec, page_count: u64, duration_s: f64) -> Result<AccessTrace> {
    if !(duration_s >= 0.0) {
        return Err(Error::InvalidConfig(format!("negative duration {duration_s}")));
    }
    let mut cur = WorkloadCursor::new(spec, page_count)?;
    let n = (duration_s * spec.ops_per_second).round() as u64;
    let mut out = Vec::with_capacity(n as usize);
    for i in 0..n {
        let t = spec.op_offset_us(i);
        let (page, access) = cur.next_access(t);
        out.push(TraceOp { t, page, access });
    }
    Ok(out)
}

/// Closed-loop timing for a workload executing against a live address space.
///
/// Ops are issued on the workload's cadence from an epoch. A stall (a fault
/// waiting on the network, or a pause) moves the epoch to the moment the VM
/// can continue, so a slow fault delays later ops instead of bunching them.
pub struct WorkloadRunner {
    pub cursor: WorkloadCursor,
    epoch_t: u64,
    epoch_i: u64,
    program_t0: u64,
    ops_done: u64,
}

impl WorkloadRunner {
    pub fn new(spec: &WorkloadSpec, page_count: u64, start_us: u64) -> Result<Self> {
        Ok(WorkloadRunner {
            cursor: WorkloadCursor::new(spec, page_count)?,
            epoch_t: start_us,
            epoch_i: 0,
            program_t0: start_us,
            ops_done: 0,
        })
    }

    /// Issue time of the next op.
    pub fn next_time(&self) -> u64 {
        self.epoch_t + self.cursor.spec().op_offset_us(self.epoch_i)
    }

    pub fn ops_done(&self) -> u64 {
        self.ops_done
    }

    /// Draws the next op; its issue time is [`next_time`](Self::next_time).
    pub fn draw(&mut self) -> TraceOp {
        let t = self.next_time();
        let (page, access) = self.cursor.next_access(t.saturating_sub(self.program_t0));
        TraceOp { t, page, access }
    }

    /// Records completion of the op drawn last.
    pub fn complete(&mut self, issued_at: u64, finished_at: u64) {
        self.ops_done += 1;
        if finished_at > issued_at {
            self.epoch_t = finished_at;
            self.epoch_i = 1;
        } else {
            self.epoch_i += 1;
        }
    }

    /// Holds the workload until `t` (the VM is paused or not yet live).
    pub fn hold_until(&mut self, t: u64) {
        if self.next_time() < t {
            self.epoch_t = t;
            self.epoch_i = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: WorkloadKind, wf: f64) -> WorkloadSpec {
        WorkloadSpec::new(kind, wf, 1000.0, 17)
    }

    #[test]
    fn sequential_reads_in_order() {
        let tr = generate_trace(&spec(WorkloadKind::Sequential, 0.0), 10, 0.01).unwrap();
        let pages: Vec<u64> = tr.iter().map(|o| o.page).collect();
        assert_eq!(pages, (0..10).collect::<Vec<_>>());
        assert!(tr.iter().all(|o| o.access == Access::Read));
    }

    #[test]
    fn length_and_times() {
        let s = WorkloadSpec::new(WorkloadKind::Uniform, 0.5, 333.0, 1);
        let tr = generate_trace(&s, 64, 2.5).unwrap();
        assert_eq!(tr.len(), (2.5f64 * 333.0).round() as usize);
        for (i, op) in tr.iter().enumerate() {
            assert_eq!(op.t, (i as f64 * 1e6 / 333.0).floor() as u64);
        }
        assert!(tr.windows(2).all(|w| w[0].t <= w[1].t));
    }

    #[test]
    fn no_writes_when_fraction_zero() {
        for kind in [
            WorkloadKind::Sequential,
            WorkloadKind::Uniform,
            WorkloadKind::Hotspot { zipf_s: 1.2 },
            WorkloadKind::Phased {
                phases: vec![Phase { start: 3, end: 9, duration_s: 0.1 }],
            },
        ] {
            let tr = generate_trace(&spec(kind, 0.0), 16, 1.0).unwrap();
            assert!(tr.iter().all(|o| !o.access.is_write()));
        }
    }

    #[test]
    fn deterministic() {
        let s = spec(WorkloadKind::Hotspot { zipf_s: 0.9 }, 0.3);
        assert_eq!(generate_trace(&s, 500, 3.0).unwrap(), generate_trace(&s, 500, 3.0).unwrap());
    }

    #[test]
    fn negative_duration_rejected() {
        let s = spec(WorkloadKind::Uniform, 0.0);
        assert!(matches!(generate_trace(&s, 4, -1.0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn phased_confined_to_active_window() {
        let phases = vec![
            Phase { start: 0, end: 10, duration_s: 1.0 },
            Phase { start: 100, end: 120, duration_s: 0.5 },
        ];
        let tr = generate_trace(&spec(WorkloadKind::Phased { phases }, 0.2), 200, 4.0).unwrap();
        for op in &tr {
            let in_cycle = (op.t as f64 / 1e6) % 1.5;
            if in_cycle < 1.0 {
                assert!(op.page < 10);
            } else {
                assert!((100..120).contains(&op.page));
            }
        }
    }

    fn zipf_hist(seed: u64, n: u64, hist: &mut [u64]) {
        let s = WorkloadSpec::new(WorkloadKind::Hotspot { zipf_s: 1.0 }, 0.0, 1e5, seed);
        let tr = generate_trace(&s, n, 1.0).unwrap();
        assert_eq!(tr.len(), 100_000);
        for op in &tr {
            hist[op.page as usize] += 1;
        }
    }

    #[test]
    fn zipf_rank_frequency_matches_closed_form() {
        // Ranks 8-10 of a single 10^5 trace sit within two standard
        // deviations of the 5% band, so the full top-10 check pools ten
        // independent traces; the head is also checked on one trace.
        let n = 1024u64;
        let h: f64 = (1..=n).map(|k| 1.0 / k as f64).sum();
        let weight = |rank: u64| 1.0 / (rank as f64 * h);

        let mut one = vec![0u64; n as usize];
        zipf_hist(99, n, &mut one);
        for rank in 1..=3u64 {
            let expect = 1e5 * weight(rank);
            let got = one[(rank - 1) as usize] as f64;
            assert!((got - expect).abs() <= 0.05 * expect, "rank {rank}: {got} vs {expect:.1}");
        }

        let mut pooled = vec![0u64; n as usize];
        for seed in 0..10 {
            zipf_hist(seed, n, &mut pooled);
        }
        for rank in 1..=10u64 {
            let expect = 1e6 * weight(rank);
            let got = pooled[(rank - 1) as usize] as f64;
            assert!((got - expect).abs() <= 0.05 * expect, "rank {rank}: {got} vs {expect:.1}");
        }
    }

    #[test]
    fn invalid_specs() {
        let bad = WorkloadSpec::new(WorkloadKind::Phased { phases: vec![] }, 0.0, 10.0, 0);
        assert!(bad.validate(10).is_err());
        let out = WorkloadSpec::new(
            WorkloadKind::Phased {
                phases: vec![Phase { start: 0, end: 11, duration_s: 1.0 }],
            },
            0.0,
            10.0,
            0,
        );
        assert!(out.validate(10).is_err());
        assert!(spec(WorkloadKind::Uniform, 1.5).validate(10).is_err());
        assert!(spec(WorkloadKind::Hotspot { zipf_s: 0.0 }, 0.0).validate(10).is_err());
    }

    #[test]
    fn runner_matches_trace_without_stalls() {
        let s = spec(WorkloadKind::Uniform, 0.4);
        let tr = generate_trace(&s, 32, 0.2).unwrap();
        let mut r = WorkloadRunner::new(&s, 32, 0).unwrap();
        for expect in &tr {
            let op = r.draw();
            assert_eq!(&op, expect);
            r.complete(op.t, op.t);
        }
    }

    #[test]
    fn runner_stall_shifts_epoch() {
        let s = spec(WorkloadKind::Sequential, 0.0);
        let mut r = WorkloadRunner::new(&s, 8, 100).unwrap();
        let op = r.draw();
        assert_eq!(op.t, 100);
        r.complete(op.t, 5_000);
        assert_eq!(r.next_time(), 6_000);
        r.hold_until(50_000);
        assert_eq!(r.next_time(), 50_000);
    }
}
