// Copyright 2026 The vmstream Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

use std::fmt;

use serde::{Deserialize, Serialize};

macro_rules! string_id {
    ($(#[$m:meta])* $name:ident) => {
        $(#[$m])*
        #[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(s: impl Into<String>) -> Self {
                $name(s.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                $name(s.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                $name(s)
            }
        }
    };
}

string_id!(
    /// Guest identifier, unique within a cluster.
    VmId
);
string_id!(
    /// Compute host identifier.
    HostId
);
string_id!(
    /// Live image identifier.
    ImageId
);

/// Runtime identity carried by a guest and rewritten on clone launch.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct IdentityRecord {
    pub hostname: String,
    pub net_id: String,
}

impl IdentityRecord {
    pub fn new(hostname: impl Into<String>, net_id: impl Into<String>) -> Self {
        IdentityRecord {
            hostname: hostname.into(),
            net_id: net_id.into(),
        }
    }
}

/// Partial identity applied to a clone at launch.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct IdentityOverrides {
    pub hostname: Option<String>,
    pub net_id: Option<String>,
}

impl IdentityOverrides {
    pub fn hostname(name: impl Into<String>) -> Self {
        IdentityOverrides {
            hostname: Some(name.into()),
            net_id: None,
        }
    }

    pub fn apply(&self, base: &IdentityRecord) -> IdentityRecord {
        IdentityRecord {
            hostname: self.hostname.clone().unwrap_or_else(|| base.hostname.clone()),
            net_id: self.net_id.clone().unwrap_or_else(|| base.net_id.clone()),
        }
    }
}
