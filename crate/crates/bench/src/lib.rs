//! Shared fixtures for the kernel benchmarks.

use sldg_core::datagen::{gen_toy_domains, ToyDomainSpec};
use sldg_core::dataset::DomainDataset;
use sldg_core::networks::{ModelBundle, ModelDims};
use sldg_core::numerics::{Matrix, Rng};

pub fn bench_model(domains: usize) -> ModelBundle {
    let dims = ModelDims {
        input_dim: 2,
        hidden_dim: 64,
        feat_dim: 64,
        bottleneck_dim: 32,
        classes: 4,
        unlabeled_domains: domains,
    };
    ModelBundle::new(dims, &mut Rng::from_seed(1))
}

pub fn bench_batch(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = Rng::from_seed(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.normal())
}

pub fn bench_domains() -> Vec<DomainDataset> {
    let spec = ToyDomainSpec::rotated_blobs(4, 3, 70.0, 400);
    gen_toy_domains(&spec, &Rng::from_seed(2)).unwrap()
}
