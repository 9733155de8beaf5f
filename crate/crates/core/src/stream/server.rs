// Copyright 2026 The vmstream Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;

use super::cache::HostCache;
use super::wire::{ReplyEntry, WireMessage};
use crate::error::{Error, Result};
use crate::ids::ImageId;
use crate::page_store::{ContentHash, LiveImageManifest, PageStore};

/// What the requesting host already holds, for hash-first replies.
pub trait CacheView {
    fn holds(&self, h: &ContentHash) -> bool;
}

impl CacheView for PageStore {
    fn holds(&self, h: &ContentHash) -> bool {
        self.contains(h)
    }
}

impl CacheView for HostCache {
    fn holds(&self, h: &ContentHash) -> bool {
        self.contains(h)
    }
}

impl CacheView for HashSet<ContentHash> {
    fn holds(&self, h: &ContentHash) -> bool {
        self.contains(h)
    }
}

/// A requester with nothing cached.
pub struct NoCache;

impl CacheView for NoCache {
    fn holds(&self, _h: &ContentHash) -> bool {
        false
    }
}

/// The shared image store and the manifests it serves.
#[derive(Default)]
pub struct ImageServer {
    pub store: PageStore,
    images: BTreeMap<ImageId, Arc<LiveImageManifest>>,
}

impl ImageServer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a manifest whose references are already held by `store`.
    pub fn register(&mut self, manifest: Arc<LiveImageManifest>) -> Result<()> {
        if self.images.contains_key(&manifest.image_id) {
            return Err(Error::InvalidConfig(format!(
                "image {} already exists",
                manifest.image_id
            )));
        }
        self.images.insert(manifest.image_id.clone(), manifest);
        Ok(())
    }

    pub fn manifest(&self, id: &ImageId) -> Result<Arc<LiveImageManifest>> {
        self.images
            .get(id)
            .cloned()
            .ok_or_else(|| Error::CorruptImage(format!("unknown image {id}")))
    }

    pub fn images(&self) -> impl Iterator<Item = &Arc<LiveImageManifest>> {
        self.images.values()
    }

    /// Answers a `PageRequest`: one entry per requested page, content
    /// included only for non-zero hashes the requester does not hold, and
    /// only once per reply.
    pub fn serve(&self, request: &WireMessage, view: &dyn CacheView) -> Result<WireMessage> {
        let WireMessage::PageRequest { image_id, ranges } = request else {
            return Err(Error::ProtocolError("expected a page request".into()));
        };
        let m = self.manifest(image_id)?;
        let mut entries = Vec::new();
        let mut sent = std::collections::HashSet::new();
        for r in ranges {
            if r.end < r.start {
                return Err(Error::ProtocolError(format!(
                    "range end {} before start {}",
                    r.end, r.start
                )));
            }
            if r.end > m.memory_page_count {
                return Err(Error::ProtocolError(format!(
                    "range [{}, {}) beyond {} pages",
                    r.start, r.end, m.memory_page_count
                )));
            }
            for page in r.pages() {
                let hash = m.memory_map.get(page);
                let content = if hash.is_zero() || view.holds(&hash) || !sent.insert(hash) {
                    None
                } else {
                    Some(self.store.get_page(&hash)?)
                };
                entries.push(ReplyEntry { page, hash, content });
            }
        }
        Ok(WireMessage::PageReply {
            image_id: image_id.clone(),
            entries,
        })
    }
}
