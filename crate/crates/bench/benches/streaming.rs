// Copyright 2026 The vmstream Authors. All Rights Reserved.
// SPDX-License-Identifier: Apache-2.0

use std::path::Path;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use vms_core::cluster::{Datacenter, HostSpec, StreamConfig};
use vms_core::guest::{create_vm, PageState, WorkloadKind, WorkloadSpec};
use vms_core::sim::{run, Scenario};
use vms_core::snapshot::live_image_create;
use vms_core::stream::{ReplyEntry, WireMessage};
use vms_core::{IdentityOverrides, IdentityRecord, ImageId, PageContent};

fn idle() -> WorkloadSpec {
    WorkloadSpec::new(WorkloadKind::Uniform, 0.0, 1.0, 0)
}

fn wire(c: &mut Criterion) {
    let entries = (0..64)
        .map(|p| {
            let content = PageContent::synthetic(4, p);
            ReplyEntry {
                page: p,
                hash: content.hash(),
                content: Some(content),
            }
        })
        .collect();
    let msg = WireMessage::PageReply {
        image_id: ImageId::new("img"),
        entries,
    };
    let bytes = msg.encode();
    let mut g = c.benchmark_group("wire");
    g.throughput(Throughput::Bytes(bytes.len() as u64));
    g.bench_function("encode_reply_64", |b| b.iter(|| msg.encode()));
    g.bench_function("decode_reply_64", |b| b.iter(|| WireMessage::decode(&bytes).unwrap()));
    g.finish();
}

/// A datacenter with a 4096-page image of distinct content in its store.
fn datacenter() -> Datacenter {
    let dc = Datacenter::new(vec![HostSpec::new("h0")], 500, 10_000_000_000, StreamConfig::default());
    let mut vm = create_vm("parent", 4096, idle(), IdentityRecord::new("parent", "n")).unwrap();
    for p in 0..4096 {
        vm.space
            .set_state(p, PageState::Private(PageContent::synthetic(8, p)))
            .unwrap();
    }
    let mut server = dc.images.write().unwrap();
    let (m, _) = live_image_create(&mut vm, ImageId::new("img"), &mut server.store, 0).unwrap();
    server.register(m).unwrap();
    drop(server);
    dc
}

fn fault_path(c: &mut Criterion) {
    let mut g = c.benchmark_group("fault");
    g.throughput(Throughput::Elements(4096));
    g.sample_size(20);
    g.bench_function("clone_read_4096", |b| {
        b.iter_batched(
            || {
                let mut dc = datacenter();
                let live = dc
                    .live_image_start(&"img".into(), &"h0".into(), "c".into(), &IdentityOverrides::default(), idle(), 0, 0)
                    .unwrap()
                    .live_at;
                (dc, live)
            },
            |(mut dc, mut t)| {
                for p in 0..4096 {
                    t = dc.touch_page(&"c".into(), p, t).unwrap();
                }
                dc
            },
            BatchSize::LargeInput,
        )
    });
    g.finish();
}

fn scenario(c: &mut Criterion) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios/scale_out.toml");
    let sc = Scenario::load(&path).unwrap();
    let mut g = c.benchmark_group("sim");
    g.sample_size(10);
    g.bench_function("scale_out_200", |b| b.iter(|| run(&sc, 7).unwrap()));
    g.finish();
}

criterion_group!(benches, wire, fault_path, scenario);
criterion_main!(benches);
