// Copyright 2026 The vmstream Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

//! Benchmark support crate; the benchmarks live in `benches/`.
