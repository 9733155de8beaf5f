// Copyright 2026 The vmstream Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

//! Wire protocol, image serving, host read caches, and fetch planning.

mod cache;
mod fetch;
pub mod live;
mod server;
mod wire;

pub use cache::HostCache;
pub use fetch::{plan_fetch, FetchPlan, DEFAULT_PREFETCH_WINDOW};
pub use server::{CacheView, ImageServer, NoCache};
pub use wire::{
    ranges_of, Bitset, PageRange, ReplyEntry, WireMessage, ENTRY_HEADER, FRAME_OVERHEAD,
    MSG_DIRTY_BITMAP, MSG_MIGRATE_COMMIT, MSG_PAGE_REPLY, MSG_PAGE_REQUEST, MSG_VCPU_TRANSFER,
};
