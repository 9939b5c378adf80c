use criterion::{criterion_group, criterion_main, Criterion};
use infocom::tensor::apply_primitive;
use infocom::{Graph, Primitive};
use infocom_bench::uniform;
use std::hint::black_box;

fn conv(c: &mut Criterion) {
    let x = uniform(&[16, 64, 64], 1);
    let w = uniform(&[16, 16, 3, 3], 2);
    let b = uniform(&[16], 3);
    let p = Primitive::Conv2d { stride: 1, padding: 1 };
    c.bench_function("conv2d_16x64x64_3x3", |bench| {
        bench.iter(|| apply_primitive(&p, &[black_box(&x), &w, &b]).unwrap())
    });
    c.bench_function("conv2d_16x64x64_3x3_backward", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let (xi, wi, bi) = (g.input(x.clone()), g.input(w.clone()), g.input(b.clone()));
            let y = g.apply(p.clone(), &[xi, wi, bi]).unwrap();
            let s = g.apply(Primitive::Sum, &[y]).unwrap();
            g.backward(s).unwrap()
        })
    });
    let wt = uniform(&[16, 16, 2, 2], 4);
    let up = Primitive::ConvTranspose2d { stride: 2, padding: 0 };
    let small = uniform(&[16, 32, 32], 5);
    c.bench_function("conv_transpose2d_16x32x32_2x2", |bench| {
        bench.iter(|| apply_primitive(&up, &[black_box(&small), &wt]).unwrap())
    });
}

criterion_group!(benches, conv);
criterion_main!(benches);
