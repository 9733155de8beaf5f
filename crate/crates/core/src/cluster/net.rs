// Copyright 2026 The vmstream Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::ids::{HostId, VmId};
use crate::stream::WireMessage;

/// Network endpoint: the shared image store or a compute host.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Node {
    Store,
    Host(HostId),
}

impl std::fmt::Display for Node {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Node::Store => f.write_str("store"),
            Node::Host(h) => write!(f, "{h}"),
        }
    }
}

/// A link that carries nothing during `[start_us, end_us)`, both directions.
#[derive(Clone, Debug)]
pub struct Outage {
    pub a: Node,
    pub b: Node,
    pub start_us: u64,
    pub end_us: u64,
}

/// Point-to-point links with fixed latency and FIFO serialization per
/// ordered `(src, dst)` pair. A transfer of `b` bytes starting at `t` on an
/// idle link arrives at `t + latency + b / bandwidth`.
#[derive(Clone, Debug)]
pub struct Network {
    latency_us: u64,
    nic_bps: BTreeMap<Node, u64>,
    busy_until: BTreeMap<(Node, Node), u64>,
    outages: Vec<Outage>,
}

pub fn serialization_us(bytes: u64, bits_per_s: u64) -> u64 {
    (bytes as u128 * 8 * 1_000_000).div_ceil(bits_per_s as u128) as u64
}

impl Network {
    pub fn new(latency_us: u64) -> Self {
        Network {
            latency_us,
            nic_bps: BTreeMap::new(),
            busy_until: BTreeMap::new(),
            outages: Vec::new(),
        }
    }

    pub fn latency_us(&self) -> u64 {
        self.latency_us
    }

    pub fn add_node(&mut self, node: Node, bits_per_s: u64) {
        self.nic_bps.insert(node, bits_per_s);
    }

    pub fn set_bandwidth(&mut self, node: &Node, bits_per_s: u64) {
        self.nic_bps.insert(node.clone(), bits_per_s);
    }

    pub fn add_outage(&mut self, o: Outage) {
        self.outages.push(o);
    }

    /// Link bandwidth: the slower of the two NICs.
    pub fn bandwidth(&self, a: &Node, b: &Node) -> u64 {
        let x = self.nic_bps.get(a).copied().unwrap_or(u64::MAX);
        let y = self.nic_bps.get(b).copied().unwrap_or(u64::MAX);
        x.min(y)
    }

    pub fn is_down(&self, a: &Node, b: &Node, t: u64) -> bool {
        self.outages.iter().any(|o| {
            ((&o.a == a && &o.b == b) || (&o.a == b && &o.b == a)) && o.start_us <= t && t < o.end_us
        })
    }

    /// When the `(from, to)` link next becomes idle.
    pub fn free_at(&self, from: &Node, to: &Node) -> u64 {
        self.busy_until
            .get(&(from.clone(), to.clone()))
            .copied()
            .unwrap_or(0)
    }

    /// Queues `bytes` on the link at `now`; returns the arrival time.
    pub fn transfer(&mut self, from: &Node, to: &Node, bytes: u64, now: u64) -> Result<u64> {
        if self.is_down(from, to, now) {
            return Err(Error::StreamUnavailable(format!("link {from} -> {to} is down")));
        }
        let bw = self.bandwidth(from, to);
        let busy = self.busy_until.entry((from.clone(), to.clone())).or_insert(0);
        let start = (*busy).max(now);
        *busy = start + serialization_us(bytes, bw);
        Ok(*busy + self.latency_us)
    }
}

/// Why bytes crossed the network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    BootTransfer,
    CloneLaunch,
    DemandStream,
    BackgroundStream,
    Migration,
    /// Upload of newly captured live-image content to the image store.
    ImageCapture,
}

impl Purpose {
    pub const ALL: [Purpose; 6] = [
        Purpose::BootTransfer,
        Purpose::CloneLaunch,
        Purpose::DemandStream,
        Purpose::BackgroundStream,
        Purpose::Migration,
        Purpose::ImageCapture,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Purpose::BootTransfer => "boot_transfer",
            Purpose::CloneLaunch => "clone_launch",
            Purpose::DemandStream => "demand_stream",
            Purpose::BackgroundStream => "background_stream",
            Purpose::Migration => "migration",
            Purpose::ImageCapture => "image_capture",
        }
    }
}

/// Byte accounting for everything sent over the network.
///
/// Framed messages are charged their `encoded_len`. Boot-time disk image
/// transfers are bulk copies outside the streaming protocol and are charged
/// their raw size.
#[derive(Clone, Debug, Default)]
pub struct WireLedger {
    by_purpose: BTreeMap<Purpose, u64>,
    content_by_purpose: BTreeMap<Purpose, u64>,
    per_vm: BTreeMap<VmId, u64>,
    total: u64,
    framed: u64,
    messages: u64,
    /// When set, every message is also serialized and its real length summed
    /// into `audited_bytes`.
    pub audit: bool,
    pub audited_bytes: u64,
}

impl WireLedger {
    pub fn record(&mut self, purpose: Purpose, vm: Option<&VmId>, msg: &WireMessage) -> u64 {
        let n = msg.encoded_len();
        if self.audit {
            self.audited_bytes += msg.encode().len() as u64;
        }
        *self.content_by_purpose.entry(purpose).or_default() += msg.content_bytes();
        self.framed += n;
        self.messages += 1;
        self.charge(purpose, vm, n);
        n
    }

    pub fn record_raw(&mut self, purpose: Purpose, vm: Option<&VmId>, bytes: u64) {
        self.charge(purpose, vm, bytes);
    }

    fn charge(&mut self, purpose: Purpose, vm: Option<&VmId>, n: u64) {
        *self.by_purpose.entry(purpose).or_default() += n;
        if let Some(v) = vm {
            *self.per_vm.entry(v.clone()).or_default() += n;
        }
        self.total += n;
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// Bytes of framed protocol messages only.
    pub fn framed(&self) -> u64 {
        self.framed
    }

    pub fn messages(&self) -> u64 {
        self.messages
    }

    pub fn purpose(&self, p: Purpose) -> u64 {
        self.by_purpose.get(&p).copied().unwrap_or(0)
    }

    pub fn content(&self, p: Purpose) -> u64 {
        self.content_by_purpose.get(&p).copied().unwrap_or(0)
    }

    pub fn content_total(&self) -> u64 {
        self.content_by_purpose.values().sum()
    }

    pub fn vm(&self, v: &VmId) -> u64 {
        self.per_vm.get(v).copied().unwrap_or(0)
    }
}
