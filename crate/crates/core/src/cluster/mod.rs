// Copyright 2026 The vmstream Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

//! Simulated hosts, links and the datacenter that ties them to the image
//! store.

mod dc;
mod host;
mod net;

pub use dc::{CloneStart, Datacenter, RunOutcome, StreamConfig};
pub(crate) use dc::{drive, Streamer};
pub use host::{Host, HostMem, HostSpec, HostedVm, VmKind, GIB};
pub use net::{serialization_us, Network, Node, Outage, Purpose, WireLedger};
