// Copyright 2026 The vmstream Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

//! Page-streaming wire messages.
//!
//! ```text
//! [u32 LE frame length][u8 type][body]
//! ```
//!
//! The frame length counts the type byte and the body. Body integers are
//! `u64` LE; strings and blobs are `u64`-length-prefixed; page ranges are
//! half-open `(start, end)` pairs; a reply entry is `page, digest, flag`
//! followed by 4096 content bytes when `flag == 1`; a bitset is its bit
//! length followed by `ceil(bits / 8)` bytes, LSB first.

use crate::codec::{Dec, Enc, Short};
use crate::error::{Error, Result};
use crate::ids::{ImageId, VmId};
use crate::page_store::{ContentHash, PageContent, PAGE_SIZE};

pub const MSG_PAGE_REQUEST: u8 = 1;
pub const MSG_PAGE_REPLY: u8 = 2;
pub const MSG_VCPU_TRANSFER: u8 = 3;
pub const MSG_DIRTY_BITMAP: u8 = 4;
pub const MSG_MIGRATE_COMMIT: u8 = 5;

/// Frame header: length plus type byte.
pub const FRAME_OVERHEAD: u64 = 5;
/// Reply entry without content.
pub const ENTRY_HEADER: u64 = 8 + 32 + 1;

/// Half-open page range `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PageRange {
    pub start: u64,
    pub end: u64,
}

impl PageRange {
    pub fn new(start: u64, end: u64) -> Self {
        PageRange { start, end }
    }

    pub fn len(&self) -> u64 {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pages(&self) -> std::ops::Range<u64> {
        self.start..self.end
    }
}

/// Collapses sorted page numbers into maximal runs.
pub fn ranges_of(pages: &[u64]) -> Vec<PageRange> {
    let mut out: Vec<PageRange> = Vec::new();
    for &p in pages {
        match out.last_mut() {
            Some(r) if r.end == p => r.end += 1,
            _ => out.push(PageRange::new(p, p + 1)),
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReplyEntry {
    pub page: u64,
    pub hash: ContentHash,
    pub content: Option<PageContent>,
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Bitset {
    bits: u64,
    bytes: Vec<u8>,
}

impl Bitset {
    pub fn new(bits: u64) -> Self {
        Bitset {
            bits,
            bytes: vec![0; bits.div_ceil(8) as usize],
        }
    }

    pub fn from_pages(bits: u64, pages: impl IntoIterator<Item = u64>) -> Self {
        let mut b = Self::new(bits);
        for p in pages {
            b.set(p);
        }
        b
    }

    pub fn bit_len(&self) -> u64 {
        self.bits
    }

    pub fn set(&mut self, i: u64) {
        assert!(i < self.bits, "bit {i} out of range");
        self.bytes[(i / 8) as usize] |= 1 << (i % 8);
    }

    pub fn get(&self, i: u64) -> bool {
        i < self.bits && self.bytes[(i / 8) as usize] & (1 << (i % 8)) != 0
    }

    pub fn ones(&self) -> impl Iterator<Item = u64> + '_ {
        (0..self.bits).filter(|&i| self.get(i))
    }

    pub fn count_ones(&self) -> u64 {
        self.bytes.iter().map(|b| b.count_ones() as u64).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum WireMessage {
    PageRequest { image_id: ImageId, ranges: Vec<PageRange> },
    PageReply { image_id: ImageId, entries: Vec<ReplyEntry> },
    VcpuTransfer { vm_id: VmId, vcpu_state: Vec<u8> },
    DirtyBitmap { vm_id: VmId, pages: Bitset },
    MigrateCommit { vm_id: VmId },
}

fn str_len(s: &str) -> u64 {
    8 + s.len() as u64
}

impl WireMessage {
    pub fn type_byte(&self) -> u8 {
        match self {
            WireMessage::PageRequest { .. } => MSG_PAGE_REQUEST,
            WireMessage::PageReply { .. } => MSG_PAGE_REPLY,
            WireMessage::VcpuTransfer { .. } => MSG_VCPU_TRANSFER,
            WireMessage::DirtyBitmap { .. } => MSG_DIRTY_BITMAP,
            WireMessage::MigrateCommit { .. } => MSG_MIGRATE_COMMIT,
        }
    }

    /// Serialized size including framing, computed without serializing.
    pub fn encoded_len(&self) -> u64 {
        FRAME_OVERHEAD
            + match self {
                WireMessage::PageRequest { image_id, ranges } => {
                    str_len(image_id.as_str()) + 8 + 16 * ranges.len() as u64
                }
                WireMessage::PageReply { image_id, entries } => {
                    str_len(image_id.as_str())
                        + 8
                        + entries
                            .iter()
                            .map(|e| ENTRY_HEADER + if e.content.is_some() { PAGE_SIZE as u64 } else { 0 })
                            .sum::<u64>()
                }
                WireMessage::VcpuTransfer { vm_id, vcpu_state } => {
                    str_len(vm_id.as_str()) + 8 + vcpu_state.len() as u64
                }
                WireMessage::DirtyBitmap { vm_id, pages } => {
                    str_len(vm_id.as_str()) + 8 + pages.bytes.len() as u64
                }
                WireMessage::MigrateCommit { vm_id } => str_len(vm_id.as_str()),
            }
    }

    /// Page content bytes carried (4096 per entry with content).
    pub fn content_bytes(&self) -> u64 {
        match self {
            WireMessage::PageReply { entries, .. } => {
                entries.iter().filter(|e| e.content.is_some()).count() as u64 * PAGE_SIZE as u64
            }
            _ => 0,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut e = Enc::with_capacity(self.encoded_len() as usize);
        e.u32(0);
        e.u8(self.type_byte());
        match self {
            WireMessage::PageRequest { image_id, ranges } => {
                e.str(image_id.as_str());
                e.u64(ranges.len() as u64);
                for r in ranges {
                    e.u64(r.start);
                    e.u64(r.end);
                }
            }
            WireMessage::PageReply { image_id, entries } => {
                e.str(image_id.as_str());
                e.u64(entries.len() as u64);
                for en in entries {
                    e.u64(en.page);
                    e.raw(en.hash.as_bytes());
                    match &en.content {
                        Some(c) => {
                            e.u8(1);
                            e.raw(c.as_bytes());
                        }
                        None => e.u8(0),
                    }
                }
            }
            WireMessage::VcpuTransfer { vm_id, vcpu_state } => {
                e.str(vm_id.as_str());
                e.bytes(vcpu_state);
            }
            WireMessage::DirtyBitmap { vm_id, pages } => {
                e.str(vm_id.as_str());
                e.u64(pages.bits);
                e.raw(&pages.bytes);
            }
            WireMessage::MigrateCommit { vm_id } => e.str(vm_id.as_str()),
        }
        let mut buf = e.buf;
        let frame = (buf.len() - 4) as u32;
        buf[..4].copy_from_slice(&frame.to_le_bytes());
        buf
    }

    /// Decodes exactly one frame.
    pub fn decode(buf: &[u8]) -> Result<WireMessage> {
        let mut d = Dec::new(buf);
        let frame = d.u32("frame length").map_err(proto)? as usize;
        if frame != d.remaining() {
            return Err(Error::ProtocolError(format!(
                "frame length {frame} but {} bytes follow",
                d.remaining()
            )));
        }
        let ty = d.u8("message type").map_err(proto)?;
        let msg = match ty {
            MSG_PAGE_REQUEST => {
                let image_id = ImageId::new(d.string("image id").map_err(proto)?);
                let n = d.u64("range count").map_err(proto)?;
                check_count(&d, n, 16)?;
                let mut ranges = Vec::with_capacity(n as usize);
                for _ in 0..n {
                    let start = d.u64("range").map_err(proto)?;
                    let end = d.u64("range").map_err(proto)?;
                    if end < start {
                        return Err(Error::ProtocolError(format!("range end {end} before start {start}")));
                    }
                    ranges.push(PageRange { start, end });
                }
                WireMessage::PageRequest { image_id, ranges }
            }
            MSG_PAGE_REPLY => {
                let image_id = ImageId::new(d.string("image id").map_err(proto)?);
                let n = d.u64("entry count").map_err(proto)?;
                check_count(&d, n, ENTRY_HEADER)?;
                let mut entries = Vec::with_capacity(n as usize);
                for _ in 0..n {
                    let page = d.u64("entry").map_err(proto)?;
                    let hash = ContentHash(d.array32("entry").map_err(proto)?);
                    let content = match d.u8("entry flag").map_err(proto)? {
                        0 => None,
                        1 => {
                            let c = PageContent::new(d.take(PAGE_SIZE, "entry content").map_err(proto)?)?;
                            if c.hash() != hash {
                                return Err(Error::ProtocolError(format!(
                                    "content for page {page} does not match {hash}"
                                )));
                            }
                            Some(c)
                        }
                        f => return Err(Error::ProtocolError(format!("bad entry flag {f}"))),
                    };
                    entries.push(ReplyEntry { page, hash, content });
                }
                WireMessage::PageReply { image_id, entries }
            }
            MSG_VCPU_TRANSFER => WireMessage::VcpuTransfer {
                vm_id: VmId::new(d.string("vm id").map_err(proto)?),
                vcpu_state: d.bytes("vcpu state").map_err(proto)?.to_vec(),
            },
            MSG_DIRTY_BITMAP => {
                let vm_id = VmId::new(d.string("vm id").map_err(proto)?);
                let bits = d.u64("bitset length").map_err(proto)?;
                let nbytes = bits.div_ceil(8);
                if nbytes > d.remaining() as u64 {
                    return Err(Error::ProtocolError("truncated bitset".into()));
                }
                let bytes = d.take(nbytes as usize, "bitset").map_err(proto)?.to_vec();
                WireMessage::DirtyBitmap {
                    vm_id,
                    pages: Bitset { bits, bytes },
                }
            }
            MSG_MIGRATE_COMMIT => WireMessage::MigrateCommit {
                vm_id: VmId::new(d.string("vm id").map_err(proto)?),
            },
            t => return Err(Error::ProtocolError(format!("unknown message type {t}"))),
        };
        if !d.is_empty() {
            return Err(Error::ProtocolError("trailing bytes in frame".into()));
        }
        Ok(msg)
    }
}

fn proto(s: Short) -> Error {
    Error::ProtocolError(format!("truncated {}", s.0))
}

fn check_count(d: &Dec<'_>, n: u64, min_each: u64) -> Result<()> {
    if n.saturating_mul(min_each) > d.remaining() as u64 {
        return Err(Error::ProtocolError(format!("count {n} exceeds frame")));
    }
    Ok(())
}
