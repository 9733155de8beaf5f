// Copyright 2026 The vmstream Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

use std::collections::HashMap;

use serde::Serialize;

use super::page::{ContentHash, PageContent, PAGE_BYTES};
use crate::error::{Error, Result};

struct Entry {
    content: PageContent,
    refcount: u64,
}

/// Content-addressed, reference-counted page repository.
///
/// Every `put_page` is one logical reference; identical content is stored
/// once. The zero page is never stored: it is counted in `logical_pages` but
/// occupies no entry.
#[derive(Default)]
pub struct PageStore {
    entries: HashMap<ContentHash, Entry>,
    logical_pages: u64,
    zero_refs: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DedupStats {
    pub logical_pages: u64,
    pub unique_pages: u64,
    pub dedup_ratio: f64,
}

impl PageStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put_page(&mut self, content: &PageContent) -> ContentHash {
        let hash = content.hash();
        self.logical_pages += 1;
        if hash.is_zero() {
            self.zero_refs += 1;
            return hash;
        }
        self.entries
            .entry(hash)
            .and_modify(|e| e.refcount += 1)
            .or_insert_with(|| Entry {
                content: content.clone(),
                refcount: 1,
            });
        hash
    }

    /// Validating variant of [`put_page`](Self::put_page) for raw buffers.
    pub fn put_bytes(&mut self, bytes: &[u8]) -> Result<ContentHash> {
        let content = PageContent::new(bytes)?;
        Ok(self.put_page(&content))
    }

    /// Adds a reference to content already held by the store.
    pub fn retain(&mut self, hash: &ContentHash) -> Result<()> {
        if hash.is_zero() {
            self.logical_pages += 1;
            self.zero_refs += 1;
            return Ok(());
        }
        let entry = self
            .entries
            .get_mut(hash)
            .ok_or_else(|| Error::MissingPage(hash.to_hex()))?;
        entry.refcount += 1;
        self.logical_pages += 1;
        Ok(())
    }

    pub fn get_page(&self, hash: &ContentHash) -> Result<PageContent> {
        if hash.is_zero() {
            return Ok(PageContent::zeroed());
        }
        self.entries
            .get(hash)
            .map(|e| e.content.clone())
            .ok_or_else(|| Error::MissingPage(hash.to_hex()))
    }

    pub fn release_page(&mut self, hash: &ContentHash) -> Result<()> {
        if hash.is_zero() {
            if self.zero_refs > 0 {
                self.zero_refs -= 1;
                self.logical_pages -= 1;
            }
            return Ok(());
        }
        let entry = self
            .entries
            .get_mut(hash)
            .ok_or_else(|| Error::MissingPage(hash.to_hex()))?;
        entry.refcount -= 1;
        if entry.refcount == 0 {
            self.entries.remove(hash);
        }
        self.logical_pages -= 1;
        Ok(())
    }

    pub fn contains(&self, hash: &ContentHash) -> bool {
        hash.is_zero() || self.entries.contains_key(hash)
    }

    pub fn refcount(&self, hash: &ContentHash) -> u64 {
        if hash.is_zero() {
            return self.zero_refs;
        }
        self.entries.get(hash).map_or(0, |e| e.refcount)
    }

    pub fn unique_pages(&self) -> u64 {
        self.entries.len() as u64
    }

    pub fn logical_pages(&self) -> u64 {
        self.logical_pages
    }

    pub fn stored_bytes(&self) -> u64 {
        self.unique_pages() * PAGE_BYTES
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty() && self.logical_pages == 0
    }

    pub fn dedup_stats(&self) -> DedupStats {
        let unique = self.unique_pages();
        let ratio = if self.logical_pages == 0 {
            0.0
        } else {
            self.logical_pages as f64 / unique.max(1) as f64
        };
        DedupStats {
            logical_pages: self.logical_pages,
            unique_pages: unique,
            dedup_ratio: ratio,
        }
    }

    /// Hashes currently stored, in unspecified order.
    pub fn hashes(&self) -> impl Iterator<Item = &ContentHash> {
        self.entries.keys()
    }

    /// `(hash, refcount)` for every stored entry, sorted by hash.
    pub fn refcounts(&self) -> Vec<(ContentHash, u64)> {
        let mut v: Vec<_> = self.entries.iter().map(|(h, e)| (*h, e.refcount)).collect();
        v.sort_unstable_by(|a, b| a.0.cmp(&b.0));
        v
    }

    pub fn zero_refs(&self) -> u64 {
        self.zero_refs
    }
}
