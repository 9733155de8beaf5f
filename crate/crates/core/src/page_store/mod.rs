// Copyright 2026 The vmstream Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

//! Content-addressed page storage and the live-image file format.

mod image;
mod page;
mod store;

pub use image::{
    decode_image, decode_manifest, encode_image, encode_manifest, read_image, read_manifest,
    write_image, LiveImageManifest, PageMap, IMAGE_MAGIC,
};
pub use page::{hash_page, seed_from_str, ContentHash, PageContent, PAGE_BYTES, PAGE_SIZE};
pub(crate) use page::splitmix64;
pub use store::{DedupStats, PageStore};
