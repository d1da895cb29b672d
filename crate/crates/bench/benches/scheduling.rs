use std::hint::black_box;
use std::path::PathBuf;

use criterion::{criterion_group, criterion_main, Criterion};
use moesched_core::config::{parse_batch, parse_model, parse_system};
use moesched_core::eas::{cluster, generate_synthetic_trace, StratificationConfig, SyntheticTraceConfig};
use moesched_core::sim::compare_to_model;
use moesched_core::{plan, AllocationStrategy, Device, Phase, PlanRequest};

fn request(batch: &str) -> PlanRequest {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let read = |rel: &str| std::fs::read_to_string(dir.join(rel)).unwrap();
    PlanRequest::new(
        parse_system(&read("systems/rtx6000ada.toml"), &[]).unwrap(),
        parse_model(&read("models/qwen3-30b-a3b.toml"), &[]).unwrap(),
        parse_batch(&read(batch), &[]).unwrap(),
    )
}

fn planner(c: &mut Criterion) {
    let req = request("batches/throughput.toml");
    c.bench_function("plan/qwen3-rtx6000ada", |b| b.iter(|| plan(black_box(&req)).unwrap()));
    let mut fixed = req.clone();
    fixed.constraints.fixed_resident = Some(64);
    c.bench_function("plan/qwen3-fixed-resident", |b| b.iter(|| plan(black_box(&fixed)).unwrap()));
}

fn cost_model(c: &mut Criterion) {
    let req = request("batches/throughput.toml");
    let cm = req.cost_model();
    let phase = Phase::prefill(req.batch.input_len);
    let a = cm.activated(&phase);
    let s = AllocationStrategy::new([Device::Gpu, Device::Cpu, Device::Gpu], 64, 64, 8, a - 72);
    c.bench_function("layer_latency", |b| b.iter(|| cm.layer_latency(black_box(&s), &phase).unwrap()));
    c.bench_function("simulate_layer", |b| b.iter(|| compare_to_model(&cm, black_box(&s), &phase).unwrap()));
}

fn clustering(c: &mut Criterion) {
    let trace = generate_synthetic_trace(&SyntheticTraceConfig::default()).unwrap();
    let cfg = StratificationConfig::default();
    c.bench_function("cluster/10k-samples", |b| b.iter(|| cluster(black_box(&trace), &cfg).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = planner, cost_model, clustering
}
criterion_main!(benches);
