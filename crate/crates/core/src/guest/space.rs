// Copyright 2026 The vmstream Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use super::workload::{Access, TraceOp};
use crate::error::{Error, Result};
use crate::page_store::{ContentHash, LiveImageManifest, PageContent, PageStore, PAGE_BYTES, PAGE_SIZE};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum PageState {
    Zero,
    /// Not yet streamed from the backing image.
    Remote,
    /// Clean copy of image content, held in the host's resident store.
    Shared(ContentHash),
    Private(PageContent),
}

impl PageState {
    pub fn is_resident(&self) -> bool {
        matches!(self, PageState::Shared(_) | PageState::Private(_))
    }
}

/// Per-VM page table.
///
/// Only pages that differ from the default are stored. The default state of
/// a page is `Remote` when the backing image maps it to non-zero content and
/// `Zero` otherwise, so a fresh 1 GiB clone costs a pointer and an empty map.
///
/// A `Shared(h)` page always satisfies `source.memory_map[p] == h`; that is
/// what makes a shared page safe to drop and refetch.
#[derive(Clone, Debug)]
pub struct AddressSpace {
    page_count: u64,
    source: Option<Arc<LiveImageManifest>>,
    overrides: BTreeMap<u64, PageState>,
    private: u64,
    shared: u64,
    /// `Remote` pages held as overrides (image-backed defaults excluded).
    explicit_remote: BTreeSet<u64>,
}

impl AddressSpace {
    pub fn new(page_count: u64) -> Self {
        AddressSpace {
            page_count,
            source: None,
            overrides: BTreeMap::new(),
            private: 0,
            shared: 0,
            explicit_remote: BTreeSet::new(),
        }
    }

    /// A thin clone space: every non-zero image page starts `Remote`.
    pub fn from_image(manifest: Arc<LiveImageManifest>) -> Self {
        AddressSpace {
            page_count: manifest.memory_page_count,
            source: Some(manifest),
            overrides: BTreeMap::new(),
            private: 0,
            shared: 0,
            explicit_remote: BTreeSet::new(),
        }
    }

    pub fn page_count(&self) -> u64 {
        self.page_count
    }

    pub fn source(&self) -> Option<&Arc<LiveImageManifest>> {
        self.source.as_ref()
    }

    pub(crate) fn set_source(&mut self, m: Option<Arc<LiveImageManifest>>) {
        self.source = m;
    }

    /// Hash the backing image holds for `page`, `ZERO` when there is none.
    pub fn source_hash(&self, page: u64) -> ContentHash {
        self.source
            .as_ref()
            .map_or(ContentHash::ZERO, |m| m.memory_map.get(page))
    }

    fn default_state(&self, page: u64) -> PageState {
        if self.source_hash(page).is_zero() {
            PageState::Zero
        } else {
            PageState::Remote
        }
    }

    fn check(&self, page: u64) -> Result<()> {
        if page >= self.page_count {
            return Err(Error::InvalidConfig(format!(
                "page {page} outside address space of {} pages",
                self.page_count
            )));
        }
        Ok(())
    }

    pub fn state(&self, page: u64) -> PageState {
        match self.overrides.get(&page) {
            Some(s) => s.clone(),
            None => self.default_state(page),
        }
    }

    pub fn is_remote(&self, page: u64) -> bool {
        match self.overrides.get(&page) {
            Some(s) => matches!(s, PageState::Remote),
            None => !self.source_hash(page).is_zero(),
        }
    }

    /// Sets a page state. Callers own the store references that go with it.
    pub fn set_state(&mut self, page: u64, state: PageState) -> Result<()> {
        self.check(page)?;
        let old = if state == self.default_state(page) {
            self.overrides.remove(&page)
        } else {
            self.count(page, &state, 1);
            self.overrides.insert(page, state)
        };
        if let Some(old) = old {
            self.count(page, &old, -1);
        }
        Ok(())
    }

    fn count(&mut self, page: u64, s: &PageState, d: i64) {
        match s {
            PageState::Private(_) => self.private = self.private.wrapping_add_signed(d),
            PageState::Shared(_) => self.shared = self.shared.wrapping_add_signed(d),
            PageState::Remote if d > 0 => {
                self.explicit_remote.insert(page);
            }
            PageState::Remote => {
                self.explicit_remote.remove(&page);
            }
            PageState::Zero => {}
        }
    }

    /// Drops a shared page back to its image-backed default.
    pub(crate) fn revert_to_default(&mut self, page: u64) {
        if let Some(old) = self.overrides.remove(&page) {
            self.count(page, &old, -1);
        }
    }

    /// Pages whose state is not the default, in page order.
    pub fn overrides(&self) -> impl Iterator<Item = (u64, &PageState)> {
        self.overrides.iter().map(|(p, s)| (*p, s))
    }

    /// Every `Remote` page, in page order.
    pub fn remote_pages(&self) -> Vec<u64> {
        let mut out = Vec::new();
        if let Some(m) = &self.source {
            for (p, _) in m.memory_map.nonzero() {
                if !self.overrides.contains_key(&p) {
                    out.push(p);
                }
            }
        }
        out.extend(self.explicit_remote.iter().copied());
        out.sort_unstable();
        out
    }

    /// Lowest `Remote` page at or above `from`.
    pub fn next_remote(&self, from: u64) -> Option<u64> {
        let image = self.source.as_ref().and_then(|m| {
            m.memory_map
                .nonzero_from(from)
                .map(|(p, _)| p)
                .find(|p| !self.overrides.contains_key(p))
        });
        let explicit = self.explicit_remote.range(from..).next().copied();
        match (image, explicit) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        }
    }

    pub fn remote_count(&self) -> u64 {
        let image_remote = self.source.as_ref().map_or(0, |m| {
            m.memory_map.nonzero_count()
                - m.memory_map
                    .nonzero()
                    .filter(|(p, _)| self.overrides.contains_key(p))
                    .count() as u64
        });
        image_remote + self.explicit_remote.len() as u64
    }

    pub fn private_pages(&self) -> u64 {
        self.private
    }

    pub fn shared_pages(&self) -> u64 {
        self.shared
    }

    pub fn private_bytes(&self) -> u64 {
        self.private_pages() * PAGE_BYTES
    }

    pub fn logical_bytes(&self) -> u64 {
        self.page_count * PAGE_BYTES
    }

    /// Reads a resident or zero page. `resident` resolves `Shared` hashes.
    pub fn read_resident(&self, page: u64, resident: &PageStore) -> Result<PageContent> {
        self.check(page)?;
        match self.state(page) {
            PageState::Zero => Ok(PageContent::zeroed()),
            PageState::Shared(h) => resident.get_page(&h),
            PageState::Private(c) => Ok(c),
            PageState::Remote => Err(Error::StreamUnavailable(format!("page {page} is not resident"))),
        }
    }

    /// Flat copy of the whole space. Fails if any page is still `Remote`.
    pub fn materialize(&self, resident: &PageStore) -> Result<Vec<u8>> {
        let mut out = vec![0u8; (self.page_count as usize) * PAGE_SIZE];
        if let Some(m) = &self.source {
            for (p, _) in m.memory_map.nonzero() {
                if !self.overrides.contains_key(&p) {
                    return Err(Error::StreamUnavailable(format!("page {p} is not resident")));
                }
            }
        }
        for (p, s) in &self.overrides {
            let at = (*p as usize) * PAGE_SIZE;
            match s {
                PageState::Zero => {}
                PageState::Shared(h) => {
                    out[at..at + PAGE_SIZE].copy_from_slice(resident.get_page(h)?.as_bytes())
                }
                PageState::Private(c) => out[at..at + PAGE_SIZE].copy_from_slice(c.as_bytes()),
                PageState::Remote => {
                    return Err(Error::StreamUnavailable(format!("page {p} is not resident")))
                }
            }
        }
        Ok(out)
    }
}

/// Resolves `Remote` pages for an address space.
pub trait FaultHandler {
    /// Makes `page` resident (`Shared` or `Private`) and returns the virtual
    /// time at which the content is usable. `now` is when the fault was taken.
    fn fault(&mut self, space: &mut AddressSpace, page: u64, now: u64) -> Result<u64>;

    /// Drops the resident reference of a shared page being overwritten.
    fn release_shared(&mut self, hash: &ContentHash) -> Result<()>;

    /// Notes an access to a shared page (LRU bookkeeping).
    fn touch(&mut self, _hash: &ContentHash, _now: u64) {}
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ApplyReport {
    pub reads: u64,
    pub writes: u64,
    pub faults: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OpOutcome {
    pub faulted: bool,
    /// Time the op completed; later than the issue time only after a fault.
    pub done_at: u64,
}

const FAULT_ATTEMPTS: usize = 4;

/// Executes one access at virtual time `now`.
pub fn apply_op(
    space: &mut AddressSpace,
    page: u64,
    access: &Access,
    handler: &mut dyn FaultHandler,
    now: u64,
) -> Result<OpOutcome> {
    space.check(page)?;
    let mut done_at = now;
    let mut faulted = false;
    let mut attempts = 0;
    while space.is_remote(page) {
        if attempts == FAULT_ATTEMPTS {
            return Err(Error::StreamUnavailable(format!(
                "page {page} still remote after {FAULT_ATTEMPTS} fetches"
            )));
        }
        attempts += 1;
        faulted = true;
        done_at = handler.fault(space, page, done_at).map_err(|e| match e {
            Error::StreamUnavailable(_) | Error::MigrationAborted(_) => e,
            other => Error::StreamUnavailable(other.to_string()),
        })?;
    }
    match access {
        Access::Read => {
            if let PageState::Shared(h) = space.state(page) {
                handler.touch(&h, done_at);
            }
        }
        Access::Write(content) => {
            if let PageState::Shared(h) = space.state(page) {
                handler.release_shared(&h)?;
            }
            space.set_state(page, PageState::Private(content.clone()))?;
        }
    }
    Ok(OpOutcome { faulted, done_at })
}

/// Replays a trace, ignoring its timing beyond passing op times to the handler.
pub fn apply_trace(
    space: &mut AddressSpace,
    trace: &[TraceOp],
    handler: &mut dyn FaultHandler,
) -> Result<ApplyReport> {
    let mut rep = ApplyReport::default();
    for op in trace {
        let out = apply_op(space, op.page, &op.access, handler, op.t)?;
        if out.faulted {
            rep.faults += 1;
        }
        if op.access.is_write() {
            rep.writes += 1;
        } else {
            rep.reads += 1;
        }
    }
    Ok(rep)
}

/// Single-store fault handler: streams pages straight from an image store
/// into the same store, with no timing. Useful wherever the network is not
/// the subject (unit tests, tooling).
pub struct ImageFaultHandler<'a> {
    pub store: &'a mut PageStore,
    pub faults: u64,
}

impl<'a> ImageFaultHandler<'a> {
    pub fn new(store: &'a mut PageStore) -> Self {
        ImageFaultHandler { store, faults: 0 }
    }
}

impl FaultHandler for ImageFaultHandler<'_> {
    fn fault(&mut self, space: &mut AddressSpace, page: u64, now: u64) -> Result<u64> {
        let h = space.source_hash(page);
        if h.is_zero() {
            return Err(Error::StreamUnavailable(format!("page {page} has no image source")));
        }
        self.store.retain(&h)?;
        space.set_state(page, PageState::Shared(h))?;
        self.faults += 1;
        Ok(now)
    }

    fn release_shared(&mut self, hash: &ContentHash) -> Result<()> {
        self.store.release_page(hash)
    }
}
