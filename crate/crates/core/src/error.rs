// Copyright 2026 The vmstream Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("page must be exactly 4096 bytes, got {0}")]
    InvalidPage(usize),
    #[error("no page stored under {0}")]
    MissingPage(String),
    #[error("corrupt live image: {0}")]
    CorruptImage(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("page stream unavailable: {0}")]
    StreamUnavailable(String),
    #[error("store write failed: {0}")]
    StoreError(String),
    #[error("{0}")]
    UnknownHost(String),
    #[error("{0}")]
    UnknownVm(String),
    #[error("protocol error: {0}")]
    ProtocolError(String),
    #[error("private memory exceeds capacity on host {host}: {private_bytes} > {capacity_bytes}")]
    OvercommitFailure {
        host: String,
        private_bytes: u64,
        capacity_bytes: u64,
    },
    #[error("placement refused: {0}")]
    PlacementError(String),
    #[error("migration aborted, vm lost: {0}")]
    MigrationAborted(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// Stable machine-readable code, used by the CLI error line.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidPage(_) => "InvalidPage",
            Error::MissingPage(_) => "MissingPage",
            Error::CorruptImage(_) => "CorruptImage",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::StreamUnavailable(_) => "StreamUnavailable",
            Error::StoreError(_) => "StoreError",
            Error::UnknownHost(_) => "UnknownHost",
            Error::UnknownVm(_) => "UnknownVm",
            Error::ProtocolError(_) => "ProtocolError",
            Error::OvercommitFailure { .. } => "OvercommitFailure",
            Error::PlacementError(_) => "PlacementError",
            Error::MigrationAborted(_) => "MigrationAborted",
            Error::Io(_) => "Io",
        }
    }
}
