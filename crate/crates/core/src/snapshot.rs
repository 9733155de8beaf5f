// Copyright 2026 The vmstream Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

//! Live-image creation: capture a running guest without stopping it for
//! longer than it takes to copy its vCPU state and mark pages copy-on-write.

use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::guest::{GuestVm, PageState};
use crate::ids::ImageId;
use crate::page_store::{LiveImageManifest, PageMap, PageStore, PAGE_SIZE};

pub const PAUSE_FIXED_US: u64 = 1000;
pub const PAUSE_PER_PAGE_US: f64 = 0.01;
/// Background serialization throughput, bytes per second.
pub const SERIALIZE_BYTES_PER_S: f64 = 1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct SuspensionReport {
    pub paused_virtual_us: u64,
    pub pages_marked: u64,
    pub serialize_background_us: u64,
}

pub fn pause_cost_us(page_count: u64) -> u64 {
    PAUSE_FIXED_US + (PAUSE_PER_PAGE_US * page_count as f64).round() as u64
}

/// Snapshots `vm` into `store`, which also backs the parent's shared pages.
pub fn live_image_create(
    vm: &mut GuestVm,
    image_id: impl Into<ImageId>,
    store: &mut PageStore,
    now: u64,
) -> Result<(Arc<LiveImageManifest>, SuspensionReport)> {
    capture(vm, image_id.into(), store, None, now)
}

/// Snapshots `vm` into an image store, leaving the parent's shared pages
/// referenced from the host-local `resident` store.
pub fn live_image_create_split(
    vm: &mut GuestVm,
    image_id: impl Into<ImageId>,
    image_store: &mut PageStore,
    resident: &mut PageStore,
    now: u64,
) -> Result<(Arc<LiveImageManifest>, SuspensionReport)> {
    capture(vm, image_id.into(), image_store, Some(resident), now)
}

fn capture(
    vm: &mut GuestVm,
    image_id: ImageId,
    images: &mut PageStore,
    mut resident: Option<&mut PageStore>,
    now: u64,
) -> Result<(Arc<LiveImageManifest>, SuspensionReport)> {
    let n = vm.page_count();
    let mut memory_map = PageMap::new(n);
    let mut marked = 0u64;
    let mut nonzero = 0u64;
    let mut to_share = Vec::new();

    // Pages at their default (Zero, or Remote toward the old image) carry
    // the old image hash; only overrides need content.
    let mut next = 0u64;
    let overrides: Vec<(u64, PageState)> = vm.space.overrides().map(|(p, s)| (p, s.clone())).collect();
    for (p, state) in overrides {
        for q in next..p {
            let h = vm.space.source_hash(q);
            images.retain(&h).map_err(store_err)?;
            memory_map.set(q, h);
        }
        next = p + 1;
        let h = match state {
            PageState::Zero => {
                images.retain(&crate::page_store::ContentHash::ZERO).map_err(store_err)?;
                crate::page_store::ContentHash::ZERO
            }
            PageState::Remote => {
                let h = vm.space.source_hash(p);
                images.retain(&h).map_err(store_err)?;
                h
            }
            PageState::Shared(h) => {
                if images.contains(&h) {
                    images.retain(&h).map_err(store_err)?;
                } else {
                    let store = resident.as_deref().ok_or_else(|| {
                        Error::StoreError(format!("shared page {h} has no resident copy"))
                    })?;
                    let c = store.get_page(&h)?;
                    images.put_page(&c);
                }
                h
            }
            PageState::Private(c) => {
                let h = images.put_page(&c);
                if !h.is_zero() {
                    to_share.push((p, c));
                }
                h
            }
        };
        marked += 1;
        memory_map.set(p, h);
    }
    for q in next..n {
        let h = vm.space.source_hash(q);
        images.retain(&h).map_err(store_err)?;
        memory_map.set(q, h);
    }
    nonzero += memory_map.nonzero_count();

    let mut disk_map = PageMap::new(vm.disk_page_count);
    for d in 0..vm.disk_page_count {
        match vm.disk_page(d) {
            Some(c) => {
                disk_map.set(d, images.put_page(&c));
                nonzero += 1;
            }
            None => images.retain(&crate::page_store::ContentHash::ZERO).map_err(store_err)?,
        }
    }

    let manifest = Arc::new(LiveImageManifest {
        image_id,
        vcpu_state: vm.vcpu_state.clone(),
        memory_map,
        disk_map,
        identity: vm.identity.clone(),
        memory_page_count: n,
        disk_page_count: vm.disk_page_count,
        created_at: now,
    });

    // Parent switches to copy-on-write sharing of the captured content.
    let old_source = vm.space.source().cloned();
    vm.space.set_source(Some(manifest.clone()));
    for (p, c) in to_share {
        let h = match resident.as_deref_mut() {
            Some(r) => r.put_page(&c),
            None => images.put_page(&c),
        };
        vm.space.set_state(p, PageState::Shared(h))?;
    }
    // Private zero pages and explicit Zero overrides become the default.
    let zeros: Vec<u64> = vm
        .space
        .overrides()
        .filter(|(_, s)| match s {
            PageState::Zero => true,
            PageState::Private(c) => c.is_zero(),
            _ => false,
        })
        .map(|(p, _)| p)
        .collect();
    for p in zeros {
        vm.space.set_state(p, PageState::Zero)?;
    }
    drop(old_source);

    let report = SuspensionReport {
        paused_virtual_us: pause_cost_us(n),
        pages_marked: marked,
        serialize_background_us: (nonzero as f64 * PAGE_SIZE as f64 / SERIALIZE_BYTES_PER_S * 1e6)
            .round() as u64,
    };
    Ok((manifest, report))
}

fn store_err(e: Error) -> Error {
    match e {
        Error::MissingPage(h) => Error::StoreError(format!("image store lacks {h}")),
        other => other,
    }
}

/// Flat memory of an image, page after page.
pub fn materialize_image(manifest: &LiveImageManifest, store: &PageStore) -> Result<Vec<u8>> {
    let mut out = vec![0u8; manifest.memory_page_count as usize * PAGE_SIZE];
    for (p, h) in manifest.memory_map.nonzero() {
        let at = p as usize * PAGE_SIZE;
        out[at..at + PAGE_SIZE].copy_from_slice(store.get_page(&h)?.as_bytes());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guest::{create_vm, Access, ImageFaultHandler, WorkloadKind, WorkloadSpec, apply_op};
    use crate::ids::IdentityRecord;
    use crate::page_store::PageContent;

    fn vm(pages: u64) -> GuestVm {
        create_vm(
            "parent",
            pages,
            WorkloadSpec::new(WorkloadKind::Uniform, 0.5, 100.0, 3),
            IdentityRecord::new("golden", "net"),
        )
        .unwrap()
    }

    #[test]
    fn fresh_vm_snapshot_is_all_zero() {
        let mut v = vm(64);
        let mut s = PageStore::new();
        let (m, rep) = live_image_create(&mut v, "i", &mut s, 0).unwrap();
        assert_eq!(m.memory_map.nonzero_count(), 0);
        assert_eq!(s.unique_pages(), 0);
        assert_eq!(rep.pages_marked, 0);
        assert_eq!(materialize_image(&m, &s).unwrap(), vec![0u8; 64 * PAGE_SIZE]);
    }

    #[test]
    fn parent_write_after_snapshot_is_copy_on_write() {
        let mut v = vm(16);
        let mut s = PageStore::new();
        let orig = PageContent::synthetic(1, 5);
        v.space.set_state(5, PageState::Private(orig.clone())).unwrap();
        let (m, _) = live_image_create(&mut v, "i", &mut s, 0).unwrap();
        assert_eq!(v.space.state(5), PageState::Shared(orig.hash()));
        let mut h = ImageFaultHandler::new(&mut s);
        apply_op(&mut v.space, 5, &Access::Write(PageContent::synthetic(2, 2)), &mut h, 1).unwrap();
        assert!(matches!(v.space.state(5), PageState::Private(_)));
        assert_eq!(s.get_page(&m.memory_map.get(5)).unwrap(), orig);
    }

    #[test]
    fn pause_independent_of_content() {
        // Same page count, very different resident bytes.
        let mut empty = vm(4096);
        let mut full = vm(4096);
        for p in 0..4096 {
            full.space
                .set_state(p, PageState::Private(PageContent::synthetic(4, p)))
                .unwrap();
        }
        let mut s = PageStore::new();
        let (_, a) = live_image_create(&mut empty, "a", &mut s, 0).unwrap();
        let (_, b) = live_image_create(&mut full, "b", &mut s, 0).unwrap();
        assert_eq!(a.paused_virtual_us, b.paused_virtual_us);
        assert!(b.serialize_background_us > a.serialize_background_us);
        // 16x the pages costs only the per-page marking constant more.
        let big = pause_cost_us(16 * 4096);
        assert_eq!(big - a.paused_virtual_us, ((16.0 * 4096.0 * PAUSE_PER_PAGE_US) as u64) - 41);
    }

    #[test]
    fn manifest_holds_one_ref_per_entry() {
        let mut v = vm(8).with_disk(2048, 77);
        let mut s = PageStore::new();
        v.space.set_state(1, PageState::Private(PageContent::synthetic(1, 1))).unwrap();
        let (m, _) = live_image_create(&mut v, "i", &mut s, 0).unwrap();
        // manifest refs + the parent's shared page
        assert_eq!(s.logical_pages(), m.reference_count() + 1);
        assert_eq!(m.disk_map.nonzero_count(), 2);
        m.release_from(&mut s).unwrap();
        assert_eq!(s.logical_pages(), 1);
    }
}
