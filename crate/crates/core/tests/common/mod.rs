#![allow(dead_code)]

use moesched_core::{BatchConfig, DeviceSpec, LinkSpec, ModelConfig, SystemSpec};
use proptest::prelude::*;

pub fn system(gpu_bw: f64, gpu_tf: f64, cpu_bw: f64, cpu_tf: f64, vram: f64, link: f64) -> SystemSpec {
    SystemSpec::new(
        DeviceSpec::new("gpu", gpu_bw, gpu_tf * 1e12, vram).unwrap(),
        DeviceSpec::new("cpu", cpu_bw, cpu_tf * 1e12, 1e13).unwrap(),
        LinkSpec::new(link, true).unwrap(),
    )
    .unwrap()
}

pub fn arb_system() -> impl Strategy<Value = SystemSpec> {
    (1e11..3e12f64, 10.0..800.0f64, 5e10..5e11f64, 1.0..200.0f64, 1e9..1e11f64, 8e9..64e9f64)
        .prop_map(|(gb, gt, cb, ct, v, l)| system(gb, gt, cb, ct, v, l))
}

pub fn arb_model() -> impl Strategy<Value = ModelConfig> {
    (1usize..5, 64usize..1024, 64usize..2048, 1usize..9).prop_flat_map(|(n, dh, de, e)| {
        (1..=e).prop_map(move |k| ModelConfig {
            num_layers: n,
            hidden_dim: dh,
            expert_dim: de,
            experts_per_layer: e,
            top_k: k,
            dtype_bytes: 2,
        })
    })
}

pub fn arb_batch() -> impl Strategy<Value = BatchConfig> {
    (1usize..65, 1usize..257, 0usize..9).prop_map(|(b, l, o)| BatchConfig {
        batch_size: b,
        input_len: l,
        output_len: o,
    })
}
