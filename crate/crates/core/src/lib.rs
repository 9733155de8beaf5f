// Copyright 2026 The vmstream Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

//! Virtual memory streaming: deduplicated live images, copy-on-write clones
//! that page their memory in on demand, host footprint management, live
//! migration, and a deterministic cluster simulator.

mod codec;
pub mod cluster;
pub mod error;
pub mod footprint;
pub mod guest;
pub mod ids;
pub mod migration;
pub mod page_store;
pub mod sim;
pub mod snapshot;
pub mod stream;

pub use error::{Error, Result};
pub use ids::{HostId, IdentityOverrides, IdentityRecord, ImageId, VmId};
pub use page_store::{ContentHash, LiveImageManifest, PageContent, PageStore, PAGE_SIZE};
