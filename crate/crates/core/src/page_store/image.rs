// Copyright 2026 The vmstream Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

//! Live-image manifests and the on-disk image format.
//!
//! ```text
//! "VMSIMG01"
//! u64 manifest_len | manifest (fields in declaration order)
//! { [32-byte digest][u32 len == 4096][content] }*   sorted by digest
//! ```
//!
//! Integers are little-endian `u64`, strings and byte blobs are
//! `u64`-length-prefixed, and page maps are `u64` count followed by
//! `(u64 page, 32-byte digest)` entries in page order. Zero pages appear only
//! as map entries.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::page::{ContentHash, PageContent, PAGE_SIZE};
use super::store::PageStore;
use crate::codec::{Dec, Enc, Short};
use crate::error::{Error, Result};
use crate::ids::{IdentityRecord, ImageId};

pub const IMAGE_MAGIC: &[u8; 8] = b"VMSIMG01";

/// Page-number to content-hash map over `[0, len)`.
///
/// Pages absent from the sparse representation are the zero page, so a
/// freshly provisioned 20 GiB disk costs nothing until content is assigned.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PageMap {
    len: u64,
    nonzero: BTreeMap<u64, ContentHash>,
}

impl PageMap {
    pub fn new(len: u64) -> Self {
        PageMap {
            len,
            nonzero: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, page: u64) -> ContentHash {
        self.nonzero.get(&page).copied().unwrap_or(ContentHash::ZERO)
    }

    pub fn set(&mut self, page: u64, hash: ContentHash) {
        assert!(page < self.len, "page {page} outside map of {} pages", self.len);
        if hash.is_zero() {
            self.nonzero.remove(&page);
        } else {
            self.nonzero.insert(page, hash);
        }
    }

    /// Every entry in page order, zero pages included.
    pub fn iter(&self) -> impl Iterator<Item = (u64, ContentHash)> + '_ {
        (0..self.len).map(move |p| (p, self.get(p)))
    }

    /// Non-zero entries in page order.
    pub fn nonzero(&self) -> impl DoubleEndedIterator<Item = (u64, ContentHash)> + '_ {
        self.nonzero.iter().map(|(p, h)| (*p, *h))
    }

    pub fn nonzero_from(&self, start: u64) -> impl Iterator<Item = (u64, ContentHash)> + '_ {
        self.nonzero.range(start..).map(|(p, h)| (*p, *h))
    }

    pub fn nonzero_count(&self) -> u64 {
        self.nonzero.len() as u64
    }
}

/// An immutable snapshot of a running guest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LiveImageManifest {
    pub image_id: ImageId,
    pub vcpu_state: Vec<u8>,
    pub memory_map: PageMap,
    pub disk_map: PageMap,
    pub identity: IdentityRecord,
    pub memory_page_count: u64,
    pub disk_page_count: u64,
    /// Virtual microseconds.
    pub created_at: u64,
}

impl LiveImageManifest {
    /// Every non-zero digest referenced by either map, deduplicated and sorted.
    pub fn referenced_hashes(&self) -> BTreeSet<ContentHash> {
        self.memory_map
            .nonzero()
            .chain(self.disk_map.nonzero())
            .map(|(_, h)| h)
            .collect()
    }

    /// Number of store references the manifest holds: one per map entry.
    pub fn reference_count(&self) -> u64 {
        self.memory_map.len() + self.disk_map.len()
    }

    /// Drops the references taken when the manifest was created or loaded.
    pub fn release_from(&self, store: &mut PageStore) -> Result<()> {
        for (_, h) in self.memory_map.iter().chain(self.disk_map.iter()) {
            store.release_page(&h)?;
        }
        Ok(())
    }
}

fn corrupt(s: Short) -> Error {
    Error::CorruptImage(format!("truncated or malformed {}", s.0))
}

fn encode_map(e: &mut Enc, m: &PageMap) {
    e.u64(m.len());
    for (p, h) in m.iter() {
        e.u64(p);
        e.raw(h.as_bytes());
    }
}

fn decode_map(d: &mut Dec<'_>) -> std::result::Result<PageMap, Error> {
    let n = d.u64("page map").map_err(corrupt)?;
    if (d.remaining() as u64) < n.saturating_mul(40) {
        return Err(Error::CorruptImage("page map truncated".into()));
    }
    let mut map = PageMap::new(n);
    for expect in 0..n {
        let p = d.u64("page map entry").map_err(corrupt)?;
        if p != expect {
            return Err(Error::CorruptImage(format!(
                "page map out of order: expected page {expect}, found {p}"
            )));
        }
        let h = ContentHash(d.array32("page map entry").map_err(corrupt)?);
        map.set(p, h);
    }
    Ok(map)
}

/// Canonical serialization of the manifest fields (without the length prefix).
pub fn encode_manifest(m: &LiveImageManifest) -> Vec<u8> {
    let mut e = Enc::with_capacity(64 + m.vcpu_state.len() + 40 * (m.reference_count() as usize));
    e.str(m.image_id.as_str());
    e.bytes(&m.vcpu_state);
    encode_map(&mut e, &m.memory_map);
    encode_map(&mut e, &m.disk_map);
    e.str(&m.identity.hostname);
    e.str(&m.identity.net_id);
    e.u64(m.memory_page_count);
    e.u64(m.disk_page_count);
    e.u64(m.created_at);
    e.buf
}

pub fn decode_manifest(body: &[u8]) -> Result<LiveImageManifest> {
    let mut d = Dec::new(body);
    let image_id = ImageId::new(d.string("image id").map_err(corrupt)?);
    let vcpu_state = d.bytes("vcpu state").map_err(corrupt)?.to_vec();
    let memory_map = decode_map(&mut d)?;
    let disk_map = decode_map(&mut d)?;
    let hostname = d.string("hostname").map_err(corrupt)?;
    let net_id = d.string("net id").map_err(corrupt)?;
    let memory_page_count = d.u64("memory page count").map_err(corrupt)?;
    let disk_page_count = d.u64("disk page count").map_err(corrupt)?;
    let created_at = d.u64("created_at").map_err(corrupt)?;
    if !d.is_empty() {
        return Err(Error::CorruptImage("trailing bytes in manifest".into()));
    }
    if memory_map.len() != memory_page_count || disk_map.len() != disk_page_count {
        return Err(Error::CorruptImage("page counts disagree with maps".into()));
    }
    Ok(LiveImageManifest {
        image_id,
        vcpu_state,
        memory_map,
        disk_map,
        identity: IdentityRecord { hostname, net_id },
        memory_page_count,
        disk_page_count,
        created_at,
    })
}

/// Serializes a manifest and its referenced pages into one buffer.
pub fn encode_image(store: &PageStore, m: &LiveImageManifest) -> Result<Vec<u8>> {
    let hashes = m.referenced_hashes();
    let body = encode_manifest(m);
    let mut out = Vec::with_capacity(16 + body.len() + hashes.len() * (36 + PAGE_SIZE));
    out.extend_from_slice(IMAGE_MAGIC);
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(&body);
    for h in &hashes {
        let content = store.get_page(h)?;
        out.extend_from_slice(h.as_bytes());
        out.extend_from_slice(&(PAGE_SIZE as u32).to_le_bytes());
        out.extend_from_slice(content.as_bytes());
    }
    Ok(out)
}

/// Writes the image atomically: a temporary file in the target directory is
/// renamed over `path` only after every byte is on disk.
pub fn write_image(store: &PageStore, m: &LiveImageManifest, path: &Path) -> Result<()> {
    let bytes = encode_image(store, m)?;
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::StoreError(e.to_string()))?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        w.write_all(&bytes).map_err(|e| Error::StoreError(e.to_string()))?;
        w.flush().map_err(|e| Error::StoreError(e.to_string()))?;
    }
    tmp.as_file()
        .sync_all()
        .map_err(|e| Error::StoreError(e.to_string()))?;
    tmp.persist(path)
        .map_err(|e| Error::StoreError(e.error.to_string()))?;
    Ok(())
}

/// Parses an image buffer, loading referenced pages into `store`.
///
/// The store gains one reference per map entry, mirroring what the manifest
/// held when it was written.
pub fn decode_image(bytes: &[u8], store: &mut PageStore) -> Result<LiveImageManifest> {
    let mut d = Dec::new(bytes);
    let magic = d.take(8, "magic").map_err(corrupt)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::CorruptImage("bad magic".into()));
    }
    let body = d.bytes("manifest section").map_err(corrupt)?;
    let manifest = decode_manifest(body)?;

    let mut pack: BTreeMap<ContentHash, PageContent> = BTreeMap::new();
    let mut last: Option<ContentHash> = None;
    while !d.is_empty() {
        let h = ContentHash(d.array32("pack digest").map_err(corrupt)?);
        let len = d.u32("pack length").map_err(corrupt)?;
        if len as usize != PAGE_SIZE {
            return Err(Error::CorruptImage(format!("pack record length {len}")));
        }
        let content = PageContent::new(d.take(PAGE_SIZE, "pack content").map_err(corrupt)?)?;
        if content.hash() != h {
            return Err(Error::CorruptImage(format!("pack record {h} fails verification")));
        }
        if last.is_some_and(|prev| prev >= h) {
            return Err(Error::CorruptImage("pack records not sorted and unique".into()));
        }
        last = Some(h);
        pack.insert(h, content);
    }

    let referenced = manifest.referenced_hashes();
    if let Some(missing) = referenced.iter().find(|h| !pack.contains_key(h)) {
        return Err(Error::CorruptImage(format!("no pack record for {missing}")));
    }
    if pack.len() != referenced.len() {
        return Err(Error::CorruptImage("unreferenced pack records".into()));
    }
    for (_, h) in manifest.memory_map.iter().chain(manifest.disk_map.iter()) {
        if h.is_zero() {
            store.retain(&h)?;
        } else {
            store.put_page(&pack[&h]);
        }
    }
    Ok(manifest)
}

pub fn read_image(path: &Path, store: &mut PageStore) -> Result<LiveImageManifest> {
    let bytes = fs::read(path)?;
    decode_image(&bytes, store)
}

/// Reads only the manifest section, without loading pages.
pub fn read_manifest(path: &Path) -> Result<LiveImageManifest> {
    let bytes = fs::read(path)?;
    let mut d = Dec::new(&bytes);
    if d.take(8, "magic").map_err(corrupt)? != IMAGE_MAGIC {
        return Err(Error::CorruptImage("bad magic".into()));
    }
    decode_manifest(d.bytes("manifest section").map_err(corrupt)?)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn manifest_from(
        store: &mut PageStore,
        mem: &[Option<PageContent>],
        disk: &[Option<PageContent>],
    ) -> LiveImageManifest {
        let mut mm = PageMap::new(mem.len() as u64);
        for (p, c) in mem.iter().enumerate() {
            let c = c.clone().unwrap_or_else(PageContent::zeroed);
            mm.set(p as u64, store.put_page(&c));
        }
        let mut dm = PageMap::new(disk.len() as u64);
        for (p, c) in disk.iter().enumerate() {
            let c = c.clone().unwrap_or_else(PageContent::zeroed);
            dm.set(p as u64, store.put_page(&c));
        }
        LiveImageManifest {
            image_id: ImageId::new("img-test"),
            vcpu_state: vec![7; 64],
            memory_page_count: mm.len(),
            disk_page_count: dm.len(),
            memory_map: mm,
            disk_map: dm,
            identity: IdentityRecord::new("golden", "net-0"),
            created_at: 12,
        }
    }

    fn pack_records(bytes: &[u8]) -> usize {
        let body_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let pack = bytes.len() - 16 - body_len;
        assert_eq!(pack % (36 + PAGE_SIZE), 0);
        pack / (36 + PAGE_SIZE)
    }

    #[test]
    fn empty_manifest_has_no_pack_section() {
        let mut s = PageStore::new();
        let m = manifest_from(&mut s, &[], &[]);
        let bytes = encode_image(&s, &m).unwrap();
        let body = encode_manifest(&m);
        assert_eq!(bytes.len(), 8 + 8 + body.len());
        assert_eq!(&bytes[..8], IMAGE_MAGIC);
        assert_eq!(pack_records(&bytes), 0);
    }

    #[test]
    fn zero_pages_are_map_entries_only() {
        let mut s = PageStore::new();
        let mem: Vec<_> = (0..1024u64)
            .map(|p| (p % 2 == 1).then(|| PageContent::synthetic(5, p)))
            .collect();
        let m = manifest_from(&mut s, &mem, &[]);
        let bytes = encode_image(&s, &m).unwrap();
        assert!(pack_records(&bytes) <= 512);
        assert_eq!(pack_records(&bytes), 512);
    }

    #[test]
    fn stored_bytes_independent_of_zero_pages() {
        let mut s = PageStore::new();
        let content: Vec<_> = (0..8u64).map(|p| Some(PageContent::synthetic(1, p))).collect();
        let mut with_zeros = content.clone();
        with_zeros.extend(std::iter::repeat(None).take(100));
        let ma = manifest_from(&mut s, &content, &[]);
        let mb = manifest_from(&mut s, &with_zeros, &[]);
        let a = encode_image(&s, &ma).unwrap();
        let b = encode_image(&s, &mb).unwrap();
        assert_eq!(pack_records(&a), pack_records(&b));
        // only the 100 extra map entries differ
        assert_eq!(b.len() - a.len(), 100 * 40);
    }

    #[test]
    fn bad_magic_and_truncation() {
        let mut s = PageStore::new();
        let m = manifest_from(&mut s, &[Some(PageContent::synthetic(2, 2))], &[]);
        let mut bytes = encode_image(&s, &m).unwrap();
        let mut fresh = PageStore::new();
        assert!(decode_image(&bytes, &mut fresh).is_ok());
        for cut in [3, 12, 40, bytes.len() - 1] {
            let mut fresh = PageStore::new();
            assert!(matches!(
                decode_image(&bytes[..cut], &mut fresh),
                Err(Error::CorruptImage(_))
            ));
        }
        bytes[0] = b'X';
        assert!(matches!(
            decode_image(&bytes, &mut PageStore::new()),
            Err(Error::CorruptImage(_))
        ));
    }

    #[test]
    fn tampered_pack_content_fails_verification() {
        let mut s = PageStore::new();
        let m = manifest_from(&mut s, &[Some(PageContent::synthetic(2, 2))], &[]);
        let mut bytes = encode_image(&s, &m).unwrap();
        let n = bytes.len();
        bytes[n - 10] ^= 0xFF;
        assert!(matches!(
            decode_image(&bytes, &mut PageStore::new()),
            Err(Error::CorruptImage(_))
        ));
    }

    #[test]
    fn unresolvable_hash_on_write() {
        let mut s = PageStore::new();
        let m = manifest_from(&mut s, &[Some(PageContent::synthetic(3, 3))], &[]);
        let empty = PageStore::new();
        assert!(matches!(encode_image(&empty, &m), Err(Error::MissingPage(_))));
    }

    #[test]
    fn write_is_atomic_and_readable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.vms");
        let mut s = PageStore::new();
        let m = manifest_from(
            &mut s,
            &[Some(PageContent::synthetic(4, 0)), None],
            &[Some(PageContent::synthetic(4, 1))],
        );
        write_image(&s, &m, &path).unwrap();
        let entries: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(entries.len(), 1, "no temporary file left behind");
        let mut s2 = PageStore::new();
        let back = read_image(&path, &mut s2).unwrap();
        assert_eq!(back, m);
        assert_eq!(read_manifest(&path).unwrap(), m);
        // one reference per map entry, as in the writer's store
        assert_eq!(s2.logical_pages(), m.reference_count());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn arbitrary_manifest_round_trip(
            mem in proptest::collection::vec(proptest::option::of(0u64..6), 0..64),
            disk in proptest::collection::vec(proptest::option::of(0u64..6), 0..16),
            vcpu in proptest::collection::vec(any::<u8>(), 0..256),
            host in "[a-z]{1,12}",
            created in any::<u64>(),
        ) {
            let mut s = PageStore::new();
            let to_pages = |v: &[Option<u64>]| -> Vec<Option<PageContent>> {
                v.iter().map(|o| o.map(|k| PageContent::synthetic(11, k))).collect()
            };
            let mut m = manifest_from(&mut s, &to_pages(&mem), &to_pages(&disk));
            m.vcpu_state = vcpu;
            m.identity.hostname = host;
            m.created_at = created;
            let bytes = encode_image(&s, &m).unwrap();
            let mut s2 = PageStore::new();
            let back = decode_image(&bytes, &mut s2).unwrap();
            prop_assert_eq!(&back, &m);
            for (_, h) in m.memory_map.iter().chain(m.disk_map.iter()) {
                prop_assert_eq!(s2.get_page(&h).unwrap(), s.get_page(&h).unwrap());
            }
        }
    }
}
