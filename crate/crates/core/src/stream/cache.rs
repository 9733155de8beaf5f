// Copyright 2026 The vmstream Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

use std::collections::{BTreeMap, HashMap};

use crate::ids::HostId;
use crate::page_store::{ContentHash, PageContent, PAGE_BYTES};

/// Host-local read cache of streamed page content, LRU-bounded.
#[derive(Debug)]
pub struct HostCache {
    pub host_id: HostId,
    capacity_bytes: u64,
    entries: HashMap<ContentHash, (PageContent, u64)>,
    order: BTreeMap<u64, ContentHash>,
    tick: u64,
}

impl HostCache {
    pub fn new(host_id: HostId, capacity_bytes: u64) -> Self {
        HostCache {
            host_id,
            capacity_bytes,
            entries: HashMap::new(),
            order: BTreeMap::new(),
            tick: 0,
        }
    }

    pub fn capacity_bytes(&self) -> u64 {
        self.capacity_bytes
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn bytes(&self) -> u64 {
        self.entries.len() as u64 * PAGE_BYTES
    }

    pub fn contains(&self, h: &ContentHash) -> bool {
        self.entries.contains_key(h)
    }

    fn bump(&mut self, h: &ContentHash) {
        self.tick += 1;
        if let Some((_, t)) = self.entries.get_mut(h) {
            self.order.remove(t);
            *t = self.tick;
            self.order.insert(self.tick, *h);
        }
    }

    pub fn get(&mut self, h: &ContentHash) -> Option<PageContent> {
        let c = self.entries.get(h).map(|(c, _)| c.clone())?;
        self.bump(h);
        Some(c)
    }

    /// Inserts `content`, returning the hashes evicted to stay within
    /// capacity, oldest first. Returns `None` when the content was not
    /// inserted (already present, or zero capacity).
    pub fn insert(&mut self, content: PageContent) -> Option<Vec<ContentHash>> {
        let h = content.hash();
        if h.is_zero() || self.capacity_bytes < PAGE_BYTES {
            return None;
        }
        if self.entries.contains_key(&h) {
            self.bump(&h);
            return None;
        }
        let mut evicted = Vec::new();
        while self.bytes() + PAGE_BYTES > self.capacity_bytes {
            match self.pop_lru() {
                Some(v) => evicted.push(v),
                None => break,
            }
        }
        self.tick += 1;
        self.entries.insert(h, (content, self.tick));
        self.order.insert(self.tick, h);
        Some(evicted)
    }

    pub fn pop_lru(&mut self) -> Option<ContentHash> {
        let (_, h) = self.order.pop_first()?;
        self.entries.remove(&h);
        Some(h)
    }

    pub fn remove(&mut self, h: &ContentHash) -> bool {
        match self.entries.remove(h) {
            Some((_, t)) => {
                self.order.remove(&t);
                true
            }
            None => false,
        }
    }

    /// Hashes from least to most recently used.
    pub fn lru_order(&self) -> impl Iterator<Item = &ContentHash> {
        self.order.values()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ContentHash, &PageContent)> {
        self.entries.iter().map(|(h, (c, _))| (h, c))
    }
}
