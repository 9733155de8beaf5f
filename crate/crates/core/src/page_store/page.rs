// Copyright 2026 The vmstream Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

use std::fmt;
use std::sync::{Arc, OnceLock};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Size of a guest page in bytes.
pub const PAGE_SIZE: usize = 4096;

/// Page size as a `u64`, for byte accounting.
pub const PAGE_BYTES: u64 = PAGE_SIZE as u64;

/// 256-bit content digest of a page.
///
/// The all-zero page is not hashed; it maps to the [`ContentHash::ZERO`]
/// sentinel so that zero pages never need storage or transfer.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ContentHash(pub [u8; 32]);

impl ContentHash {
    pub const ZERO: ContentHash = ContentHash([0u8; 32]);

    pub fn is_zero(&self) -> bool {
        *self == Self::ZERO
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Debug for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_zero() {
            write!(f, "ContentHash(ZERO)")
        } else {
            write!(f, "ContentHash({})", &self.to_hex()[..16])
        }
    }
}

impl fmt::Display for ContentHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Hash a raw page.
pub fn hash_page(bytes: &[u8]) -> Result<ContentHash> {
    if bytes.len() != PAGE_SIZE {
        return Err(Error::InvalidPage(bytes.len()));
    }
    Ok(digest_page(bytes))
}

fn digest_page(bytes: &[u8]) -> ContentHash {
    if bytes.iter().all(|&b| b == 0) {
        return ContentHash::ZERO;
    }
    let out: [u8; 32] = Sha256::digest(bytes).into();
    ContentHash(out)
}

struct PageBuf {
    bytes: [u8; PAGE_SIZE],
    digest: OnceLock<ContentHash>,
}

/// Immutable 4 KiB page.
///
/// Cloning is cheap: the bytes live behind an `Arc`, so many address spaces,
/// caches and stores can hold the same content without copying it. The
/// digest is computed at most once per allocation.
#[derive(Clone)]
pub struct PageContent(Arc<PageBuf>);

impl PageContent {
    pub fn new(bytes: &[u8]) -> Result<Self> {
        let arr: [u8; PAGE_SIZE] = bytes
            .try_into()
            .map_err(|_| Error::InvalidPage(bytes.len()))?;
        Ok(Self::from_array(arr))
    }

    pub fn from_array(bytes: [u8; PAGE_SIZE]) -> Self {
        PageContent(Arc::new(PageBuf {
            bytes,
            digest: OnceLock::new(),
        }))
    }

    pub fn zeroed() -> Self {
        Self::from_array([0u8; PAGE_SIZE])
    }

    /// Deterministic pseudo-random page derived from `(seed, salt)`.
    ///
    /// Used for synthetic guest content. The first word mixes in a non-zero
    /// constant so the result is never the zero page.
    pub fn synthetic(seed: u64, salt: u64) -> Self {
        let mut bytes = [0u8; PAGE_SIZE];
        let mut state = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0xD6E8_FEB8_6659_FD93;
        for chunk in bytes.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
        }
        bytes[0] |= 1;
        Self::from_array(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; PAGE_SIZE] {
        &self.0.bytes
    }

    pub fn hash(&self) -> ContentHash {
        *self.0.digest.get_or_init(|| digest_page(&self.0.bytes))
    }

    pub fn is_zero(&self) -> bool {
        self.hash().is_zero()
    }

    pub fn ptr_eq(&self, other: &PageContent) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
    }
}

impl PartialEq for PageContent {
    fn eq(&self, other: &Self) -> bool {
        self.ptr_eq(other) || self.0.bytes[..] == other.0.bytes[..]
    }
}

impl Eq for PageContent {}

impl fmt::Debug for PageContent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PageContent({:?})", self.hash())
    }
}

pub(crate) fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit digest of a string, for deriving per-entity seeds.
pub fn seed_from_str(s: &str) -> u64 {
    let d = Sha256::digest(s.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}
