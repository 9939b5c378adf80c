use criterion::{criterion_group, criterion_main, Criterion};
use infocom::codec::{decode_message, encode_message, entropy_bound, MessageUnit};
use infocom::smg::{quantize, topk_filter, DenseMask};
use infocom_bench::uniform;
use std::hint::black_box;

/// A message at the benchmark scale: 200×704 grid, D = 256, α = 0.1, b = 4.
fn table_scale() -> (DenseMask, MessageUnit) {
    let m = uniform(&[1, 200, 704], 7).map(|v| 0.5 * (v + 1.0));
    let dense = DenseMask::from_tensor(&m).unwrap();
    let mask = quantize(&topk_filter(&dense, 0.1).unwrap(), 4).unwrap();
    let unit = MessageUnit {
        agent_id: 1,
        frame_id: 0,
        channels: 64,
        latent: uniform(&[256], 8).data().iter().map(|&v| v as f32).collect(),
        mask,
    };
    (dense, unit)
}

fn codec(c: &mut Criterion) {
    let (dense, unit) = table_scale();
    let bytes = encode_message(&unit).unwrap();
    c.bench_function("topk_quantize_200x704", |b| {
        b.iter(|| quantize(&topk_filter(black_box(&dense), 0.1).unwrap(), 4).unwrap())
    });
    c.bench_function("encode_200x704", |b| b.iter(|| encode_message(black_box(&unit)).unwrap()));
    c.bench_function("decode_200x704", |b| b.iter(|| decode_message(black_box(&bytes)).unwrap()));
    c.bench_function("entropy_bound_200x704", |b| b.iter(|| entropy_bound(200, 704, black_box(14080), 4).unwrap()));
}

criterion_group!(benches, codec);
criterion_main!(benches);
