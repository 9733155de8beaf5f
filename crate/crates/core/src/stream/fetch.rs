// Copyright 2026 The vmstream Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

use super::wire::{ranges_of, WireMessage};
use crate::guest::AddressSpace;
use crate::ids::ImageId;

pub const DEFAULT_PREFETCH_WINDOW: u64 = 8;

/// Pages to request for one fault.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FetchPlan {
    pub demand: u64,
    pub prefetch: Vec<u64>,
}

/// Demand page plus the `Remote` pages among the `window − 1` that follow it.
/// A window of 0 or 1 fetches the demand page alone.
pub fn plan_fetch(space: &AddressSpace, demand: u64, window: u64) -> FetchPlan {
    let end = demand.saturating_add(window.max(1)).min(space.page_count());
    let prefetch = (demand + 1..end).filter(|&p| space.is_remote(p)).collect();
    FetchPlan { demand, prefetch }
}

impl FetchPlan {
    /// All planned pages, ascending.
    pub fn pages(&self) -> Vec<u64> {
        let mut v = Vec::with_capacity(1 + self.prefetch.len());
        v.push(self.demand);
        v.extend_from_slice(&self.prefetch);
        v
    }

    pub fn request(&self, image_id: &ImageId) -> WireMessage {
        WireMessage::PageRequest {
            image_id: image_id.clone(),
            ranges: ranges_of(&self.pages()),
        }
    }
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;
    use std::sync::Arc;

    use super::*;
    use crate::guest::PageState;
    use crate::ids::IdentityRecord;
    use crate::page_store::{LiveImageManifest, PageContent, PageMap};

    fn space(nonzero: &[u64], n: u64) -> AddressSpace {
        let mut map = PageMap::new(n);
        for &p in nonzero {
            map.set(p, PageContent::synthetic(1, p).hash());
        }
        AddressSpace::from_image(Arc::new(LiveImageManifest {
            image_id: "i".into(),
            vcpu_state: vec![],
            memory_page_count: n,
            memory_map: map,
            disk_map: PageMap::new(0),
            identity: IdentityRecord::new("h", "n"),
            disk_page_count: 0,
            created_at: 0,
        }))
    }

    #[test]
    fn window_eight_from_page_seven() {
        let all: Vec<u64> = (0..64).collect();
        let mut s = space(&all, 64);
        s.set_state(10, PageState::Private(PageContent::synthetic(5, 5))).unwrap();
        let plan = plan_fetch(&s, 7, 8);
        // oracle: {7..=14} ∩ Remote
        let oracle: BTreeSet<u64> = (7..=14).filter(|&p| p != 10).collect();
        assert_eq!(plan.pages().into_iter().collect::<BTreeSet<_>>(), oracle);
        assert!(plan.prefetch.len() as u64 <= 8);
    }

    #[test]
    fn disabled_window_and_edges() {
        let all: Vec<u64> = (0..16).collect();
        let s = space(&all, 16);
        assert!(plan_fetch(&s, 3, 0).prefetch.is_empty());
        assert!(plan_fetch(&s, 3, 1).prefetch.is_empty());
        assert_eq!(plan_fetch(&s, 14, 8).prefetch, vec![15]);
        // zero pages in the image are not remote
        let sparse = space(&[0, 2], 16);
        assert_eq!(plan_fetch(&sparse, 0, 8).prefetch, vec![2]);
    }
}
