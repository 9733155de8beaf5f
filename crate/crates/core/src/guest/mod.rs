// Copyright 2026 The vmstream Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

//! Synthetic guests: address spaces driven by deterministic access programs.

mod space;
mod vm;
mod workload;

pub use space::{
    apply_op, apply_trace, AddressSpace, ApplyReport, FaultHandler, ImageFaultHandler, OpOutcome,
    PageState,
};
pub use vm::{
    create_vm, create_vm_sized, GuestVm, OsImage, DEFAULT_PAGE_COUNT, DEFAULT_VCPU_BYTES,
    DISK_CONTENT_STRIDE,
};
pub use workload::{
    generate_trace, Access, AccessTrace, Phase, TraceOp, WorkloadCursor, WorkloadKind,
    WorkloadRunner, WorkloadSpec,
};
