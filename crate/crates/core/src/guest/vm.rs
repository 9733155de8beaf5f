// Copyright 2026 The vmstream Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

use std::sync::Arc;

use super::space::{AddressSpace, PageState};
use super::workload::WorkloadSpec;
use crate::error::{Error, Result};
use crate::ids::{IdentityRecord, VmId};
use crate::page_store::{seed_from_str, splitmix64, PageContent};

/// 1 GiB of 4 KiB pages.
pub const DEFAULT_PAGE_COUNT: u64 = 262_144;
pub const DEFAULT_VCPU_BYTES: usize = 16 * 1024;

/// Synthetic disks hold content on one page in this many; the rest are zero.
pub const DISK_CONTENT_STRIDE: u64 = 1024;

#[derive(Clone, Debug)]
pub struct GuestVm {
    pub vm_id: VmId,
    pub vcpu_state: Vec<u8>,
    pub space: AddressSpace,
    pub workload: WorkloadSpec,
    pub identity: IdentityRecord,
    /// Virtual microseconds.
    pub booted_at: u64,
    pub disk_page_count: u64,
    pub disk_seed: u64,
}

pub fn create_vm(
    vm_id: impl Into<VmId>,
    page_count: u64,
    workload: WorkloadSpec,
    identity: IdentityRecord,
) -> Result<GuestVm> {
    create_vm_sized(vm_id, page_count, DEFAULT_VCPU_BYTES, workload, identity)
}

pub fn create_vm_sized(
    vm_id: impl Into<VmId>,
    page_count: u64,
    vcpu_bytes: usize,
    workload: WorkloadSpec,
    identity: IdentityRecord,
) -> Result<GuestVm> {
    let vm_id = vm_id.into();
    if page_count == 0 {
        return Err(Error::InvalidConfig("page_count must be positive".into()));
    }
    if identity.hostname.is_empty() {
        return Err(Error::InvalidConfig("hostname must be non-empty".into()));
    }
    workload.validate(page_count)?;
    Ok(GuestVm {
        vcpu_state: vcpu_blob(seed_from_str(vm_id.as_str()), vcpu_bytes),
        vm_id,
        space: AddressSpace::new(page_count),
        workload,
        identity,
        booted_at: 0,
        disk_page_count: 0,
        disk_seed: 0,
    })
}

fn vcpu_blob(seed: u64, len: usize) -> Vec<u8> {
    let mut state = seed;
    let mut out = Vec::with_capacity(len + 8);
    while out.len() < len {
        out.extend_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    out.truncate(len);
    out
}

impl GuestVm {
    pub fn page_count(&self) -> u64 {
        self.space.page_count()
    }

    pub fn with_disk(mut self, disk_page_count: u64, disk_seed: u64) -> Self {
        self.disk_page_count = disk_page_count;
        self.disk_seed = disk_seed;
        self
    }

    /// Content of disk page `d`, or `None` for a zero page.
    pub fn disk_page(&self, d: u64) -> Option<PageContent> {
        (d % DISK_CONTENT_STRIDE == 0).then(|| PageContent::synthetic(self.disk_seed, d))
    }

    /// Marks the leading pages private with the given OS image content, as
    /// a freshly booted guest would have them.
    pub fn fill_boot_resident(&mut self, os: &OsImage) -> Result<()> {
        let n = os.pages.len() as u64;
        if n > self.page_count() {
            return Err(Error::InvalidConfig(format!(
                "OS image of {n} pages exceeds {} page address space",
                self.page_count()
            )));
        }
        for (p, c) in os.pages.iter().enumerate() {
            self.space.set_state(p as u64, PageState::Private(c.clone()))?;
        }
        Ok(())
    }
}

/// Resident content a booted guest of one template starts with.
///
/// Guests of the same template share it, so identical OS pages across
/// booted VMs are identical content (and identical allocations).
#[derive(Clone, Debug)]
pub struct OsImage {
    pub pages: Arc<Vec<PageContent>>,
}

impl OsImage {
    pub fn generate(template: &str, page_count: u64) -> Self {
        let seed = seed_from_str(template);
        OsImage {
            pages: Arc::new((0..page_count).map(|p| PageContent::synthetic(seed, p)).collect()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::guest::WorkloadKind;

    fn w() -> WorkloadSpec {
        WorkloadSpec::new(WorkloadKind::Uniform, 0.1, 100.0, 1)
    }

    #[test]
    fn default_vm_is_all_zero() {
        let vm = create_vm("v", DEFAULT_PAGE_COUNT, w(), IdentityRecord::new("h1", "n1")).unwrap();
        assert_eq!(vm.space.logical_bytes(), 1 << 30);
        assert_eq!(vm.space.private_bytes(), 0);
        assert_eq!(vm.space.overrides().count(), 0);
        assert_eq!(vm.vcpu_state.len(), DEFAULT_VCPU_BYTES);
    }

    #[test]
    fn vcpu_state_is_deterministic() {
        let a = create_vm("same", 8, w(), IdentityRecord::new("h", "n")).unwrap();
        let b = create_vm("same", 8, w(), IdentityRecord::new("h", "n")).unwrap();
        let c = create_vm("other", 8, w(), IdentityRecord::new("h", "n")).unwrap();
        assert_eq!(a.vcpu_state, b.vcpu_state);
        assert_ne!(a.vcpu_state, c.vcpu_state);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(
            create_vm("v", 0, w(), IdentityRecord::new("h", "n")),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            create_vm("v", 4, w(), IdentityRecord::new("", "n")),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn boot_fill_shares_os_content() {
        let os = OsImage::generate("ubuntu", 4);
        let mut a = create_vm("a", 16, w(), IdentityRecord::new("a", "n")).unwrap();
        let mut b = create_vm("b", 16, w(), IdentityRecord::new("b", "n")).unwrap();
        a.fill_boot_resident(&os).unwrap();
        b.fill_boot_resident(&os).unwrap();
        assert_eq!(a.space.private_pages(), 4);
        assert_eq!(a.space.state(3), b.space.state(3));
        assert_eq!(a.space.state(4), PageState::Zero);
    }
}
