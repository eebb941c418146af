use criterion::{criterion_group, criterion_main, Criterion};
use sldg_bench::{bench_batch, bench_domains, bench_model};
use sldg_core::attention::{attention_backward, attention_forward};
use sldg_core::datagen::StructuralSpec;
use sldg_core::losses::{loss_bf, loss_cl};
use sldg_core::numerics::{Matrix, Rng};
use sldg_core::pseudolabel::assign_pseudo_labels;
use sldg_core::theory::two_stage_estimate;
use std::hint::black_box;

fn onehot(labels: &[usize], classes: usize) -> Matrix {
    let mut y = Matrix::zeros(labels.len(), classes);
    for (i, &r) in labels.iter().enumerate() {
        y.set(i, r, 1.0);
    }
    y
}

fn bench_matmul(c: &mut Criterion) {
    let a = bench_batch(64, 64, 3);
    let b = bench_batch(64, 64, 4);
    c.bench_function("matmul_64x64", |bench| {
        bench.iter(|| black_box(a.matmul(black_box(&b))))
    });
}

fn bench_loss_cl(c: &mut Criterion) {
    let model = bench_model(2);
    let x = bench_batch(64, 2, 5);
    let labels: Vec<usize> = (0..64).map(|i| i % 4).collect();
    let y = onehot(&labels, 4);
    c.bench_function("loss_cl_batch64", |bench| {
        bench.iter(|| black_box(loss_cl(&model, black_box(&x), &y).value))
    });
}

fn bench_attention(c: &mut Criterion) {
    let model = bench_model(3);
    let projections: Vec<Matrix> = (0..3).map(|j| bench_batch(64, 32, 10 + j)).collect();
    let probes: Vec<Matrix> = (0..3).map(|j| bench_batch(64, 32, 20 + j)).collect();
    c.bench_function("attention_forward_backward_3dom", |bench| {
        bench.iter(|| {
            let (q, cache) = attention_forward(&model, black_box(&projections), 0.3);
            let grads = attention_backward(&model, &cache, &probes);
            black_box((q, grads.d_alpha))
        })
    });
}

fn bench_loss_bf(c: &mut Criterion) {
    let model = bench_model(2);
    let proj_inputs: Vec<Matrix> = (0..2).map(|j| bench_batch(64, 64, 30 + j)).collect();
    let labels: Vec<usize> = (0..64).map(|i| i % 4).collect();
    let y = onehot(&labels, 4);
    let matches = vec![vec![true; 64], vec![true; 64]];
    c.bench_function("loss_bf_2dom_batch64", |bench| {
        bench.iter(|| black_box(loss_bf(&model, black_box(&proj_inputs), &y, &matches, 0.3).value))
    });
}

fn bench_pseudo_labels(c: &mut Criterion) {
    let model = bench_model(1);
    let domains = bench_domains();
    c.bench_function("assign_pseudo_labels_n400", |bench| {
        bench.iter(|| black_box(assign_pseudo_labels(&model, 0, &domains[1].x, 1).unwrap()))
    });
}

fn bench_two_stage(c: &mut Criterion) {
    let spec = StructuralSpec::preset(2, 2, 0.8, 0.8, 3200);
    let domains = sldg_core::datagen::gen_structural(&spec, &Rng::from_seed(7)).unwrap();
    c.bench_function("two_stage_estimate_n3200", |bench| {
        bench.iter(|| {
            black_box(
                two_stage_estimate(
                    black_box(&domains[1].features),
                    &domains[0].features,
                    &domains[0].labels,
                )
                .unwrap()
                .correlation,
            )
        })
    });
}

criterion_group!(
    benches,
    bench_matmul,
    bench_loss_cl,
    bench_attention,
    bench_loss_bf,
    bench_pseudo_labels,
    bench_two_stage
);
criterion_main!(benches);
