// Copyright 2026 The vmstream Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

use std::path::PathBuf;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "vmsctl", version, about = "Live images, thin clones, migration and cluster simulation")]
pub struct Cli {
    /// Shared store directory (control-plane state and images).
    #[arg(long, global = true, env = "VMSCTL_STORE", default_value = "vms-store")]
    pub store: PathBuf,
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Capture, start and list live images.
    #[command(subcommand)]
    Image(ImageCmd),
    /// Cold-boot a VM from a template.
    Boot {
        #[arg(long)]
        template: String,
        #[arg(long)]
        host: String,
        /// VM id; derived from the template when absent.
        #[arg(long)]
        vm: Option<String>,
    },
    /// Live-migrate a VM to another host.
    Migrate {
        #[arg(long)]
        vm: String,
        #[arg(long)]
        to: String,
        #[arg(long, value_parser = ["precopy", "postcopy", "stopcopy"])]
        mode: String,
    },
    /// List hosts and VMs in the store.
    List,
    /// Run scenario files.
    #[command(subcommand)]
    Sim(SimCmd),
    /// Compare simulation reports.
    #[command(subcommand)]
    Report(ReportCmd),
}

#[derive(Debug, Subcommand)]
pub enum ImageCmd {
    /// Snapshot a running VM into a live-image file.
    Create {
        #[arg(long)]
        vm: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Launch a clone from a live-image file.
    Start {
        path: PathBuf,
        #[arg(long)]
        host: String,
        #[arg(long)]
        hostname: Option<String>,
        #[arg(long)]
        net_id: Option<String>,
    },
    /// List the live-image files in a directory.
    List { dir: PathBuf },
}

#[derive(Debug, Subcommand)]
pub enum SimCmd {
    /// Simulate a scenario and write metrics.jsonl and summary.json.
    Run {
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Serve pages through a local socket page server.
        #[arg(long)]
        live: bool,
    },
}

#[derive(Debug, Subcommand)]
pub enum ReportCmd {
    /// Speedup, density and I/O ratios of a clone run against a boot run.
    Compare { baseline: PathBuf, vms: PathBuf },
}

/// Every verb path the dispatcher implements.
#[cfg(test)]
const VERBS: &[&str] = &[
    "image create",
    "image start",
    "image list",
    "boot",
    "migrate",
    "list",
    "sim run",
    "report compare",
];

#[cfg(test)]
mod tests {
    use clap::CommandFactory;

    use super::*;

    fn leaves(cmd: &clap::Command, prefix: &str, out: &mut Vec<String>) {
        let subs: Vec<_> = cmd.get_subcommands().filter(|c| c.get_name() != "help").collect();
        if subs.is_empty() {
            out.push(prefix.trim().to_string());
        }
        for c in subs {
            leaves(c, &format!("{prefix} {}", c.get_name()), out);
        }
    }

    #[test]
    fn help_lists_every_verb() {
        let cmd = Cli::command();
        cmd.clone().debug_assert();
        let mut found = Vec::new();
        leaves(&cmd, "", &mut found);
        found.sort();
        let mut want: Vec<String> = VERBS.iter().map(|s| s.to_string()).collect();
        want.sort();
        assert_eq!(found, want);
        let help = cmd.clone().render_long_help().to_string();
        for top in ["image", "boot", "migrate", "list", "sim", "report"] {
            assert!(help.contains(top), "{top} missing from help");
        }
    }
}
