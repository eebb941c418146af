//! Inter-domain attention over projected semantic features.
//!
//! Each unlabeled domain's projection batch (B x D) is embedded into
//! query/key/value form by its own three dense maps. For a domain `m`,
//! position-wise similarity maps against every domain's query are
//! softmax-normalized across domains, averaged into an aggregate map
//! `z_m`, and used to reweight the value embedding:
//! `q_m = alpha * (o_value_m * z_m) + o_value_m`. The gate `alpha` starts
//! at zero, so the module begins as an exact pass-through and learns how
//! much cross-domain structure to mix in.

use crate::networks::{GradBundle, LayerGrad, ModelBundle};
use crate::numerics::Matrix;

/// Query/key/value embeddings for every unlabeled domain.
pub struct Embeddings {
    pub query: Vec<Matrix>,
    pub key: Vec<Matrix>,
    pub value: Vec<Matrix>,
    /// Pre-activations cached for the backward pass, per domain.
    pre_query: Vec<Matrix>,
    pre_key: Vec<Matrix>,
    pre_value: Vec<Matrix>,
}

/// Embed the per-domain projections with the per-domain q/k/v networks.
pub fn embed(model: &ModelBundle, projections: &[Matrix]) -> Embeddings {
    assert_eq!(projections.len(), model.attn_query.len());
    let mut e = Embeddings {
        query: Vec::new(),
        key: Vec::new(),
        value: Vec::new(),
        pre_query: Vec::new(),
        pre_key: Vec::new(),
        pre_value: Vec::new(),
    };
    for (j, proj) in projections.iter().enumerate() {
        let (q, pq) = model.attn_query[j].forward_cached(proj);
        let (k, pk) = model.attn_key[j].forward_cached(proj);
        let (v, pv) = model.attn_value[j].forward_cached(proj);
        e.query.push(q);
        e.key.push(k);
        e.value.push(v);
        e.pre_query.push(pq);
        e.pre_key.push(pk);
        e.pre_value.push(pv);
    }
    e
}

/// Normalized similarity maps of domain `m` against every domain's query:
/// `raw_j = o_key_m^T * o_query_j` (D x D), softmax over the domain index
/// per matrix position, with max-subtraction.
pub fn similarity(o_key_m: &Matrix, o_query: &[Matrix]) -> Vec<Matrix> {
    let raws: Vec<Matrix> = o_query.iter().map(|q| o_key_m.matmul_at(q)).collect();
    softmax_over_domains(&raws)
}

fn softmax_over_domains(raws: &[Matrix]) -> Vec<Matrix> {
    let d = raws[0].rows();
    let c = raws[0].cols();
    let mut out: Vec<Matrix> = raws.to_vec();
    for a in 0..d {
        for b in 0..c {
            let max = raws
                .iter()
                .map(|r| r.get(a, b))
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for r in out.iter_mut() {
                let e = (r.get(a, b) - max).exp();
                r.set(a, b, e);
                sum += e;
            }
            for r in out.iter_mut() {
                r.set(a, b, r.get(a, b) / sum);
            }
        }
    }
    out
}

/// Average the similarity maps of one domain across domains.
pub fn aggregate(p_m: &[Matrix]) -> Matrix {
    let mut z = Matrix::zeros(p_m[0].rows(), p_m[0].cols());
    for p in p_m {
        z.add_scaled(p, 1.0);
    }
    z.scale(1.0 / p_m.len() as f64);
    z
}

/// `q_m = alpha * (o_value_m * z_m) + o_value_m`. At `alpha == 0` this is
/// the exact pass-through of the value embedding, bit for bit.
pub fn reweight(o_value_m: &Matrix, z_m: &Matrix, alpha: f64) -> Matrix {
    if alpha == 0.0 {
        return o_value_m.clone();
    }
    let mut q = o_value_m.matmul(z_m);
    q.scale(alpha);
    q.add_scaled(o_value_m, 1.0);
    q
}

/// Everything the backward pass needs from one attention forward.
pub struct AttentionCache {
    pub embeddings: Embeddings,
    /// `p[m][j]`: similarity of domain m against domain j.
    pub p: Vec<Vec<Matrix>>,
    pub z: Vec<Matrix>,
    /// Effective gate used in this forward (the trained value plus any
    /// training-time perturbation).
    pub alpha_eff: f64,
    /// Projection inputs, cached for the embedding backward.
    projections: Vec<Matrix>,
}

/// Full forward: embed, similarity for every domain, aggregate, reweight.
/// `alpha_eff` is the gate value to apply; callers pass the clean
/// parameter at evaluation time and the perturbed one during training.
pub fn attention_forward(
    model: &ModelBundle,
    projections: &[Matrix],
    alpha_eff: f64,
) -> (Vec<Matrix>, AttentionCache) {
    let embeddings = embed(model, projections);
    let domains = projections.len();
    let mut p = Vec::with_capacity(domains);
    let mut z = Vec::with_capacity(domains);
    let mut q = Vec::with_capacity(domains);
    for m in 0..domains {
        let p_m = similarity(&embeddings.key[m], &embeddings.query);
        let z_m = aggregate(&p_m);
        q.push(reweight(&embeddings.value[m], &z_m, alpha_eff));
        p.push(p_m);
        z.push(z_m);
    }
    (
        q,
        AttentionCache {
            embeddings,
            p,
            z,
            alpha_eff,
            projections: projections.to_vec(),
        },
    )
}

/// Gradients produced by the attention backward pass.
pub struct AttentionGrads {
    pub d_projections: Vec<Matrix>,
    pub attn_query: Vec<LayerGrad>,
    pub attn_key: Vec<LayerGrad>,
    pub attn_value: Vec<LayerGrad>,
    pub d_alpha: f64,
}

/// Backward through the whole module given `d_q[m] = dL/dq_m`.
pub fn attention_backward(
    model: &ModelBundle,
    cache: &AttentionCache,
    d_q: &[Matrix],
) -> AttentionGrads {
    let domains = d_q.len();
    let alpha = cache.alpha_eff;
    let e = &cache.embeddings;

    let mut d_alpha = 0.0;
    let mut d_value: Vec<Matrix> = d_q.to_vec();
    let mut d_query: Vec<Matrix> =
        (0..domains).map(|_| Matrix::zeros(d_q[0].rows(), d_q[0].cols())).collect();
    let mut d_key: Vec<Matrix> =
        (0..domains).map(|_| Matrix::zeros(d_q[0].rows(), d_q[0].cols())).collect();

    for m in 0..domains {
        let vz = e.value[m].matmul(&cache.z[m]);
        d_alpha += d_q[m].dot(&vz);
        // d(o_value): identity branch already seeded; add alpha * dq * z^T.
        if alpha != 0.0 {
            let extra = d_q[m].matmul_bt(&cache.z[m]);
            d_value[m].add_scaled(&extra, alpha);
        }
        // dL/dz_m = alpha * o_value_m^T * dq_m.
        let mut d_z = e.value[m].matmul_at(&d_q[m]);
        d_z.scale(alpha);

        // Each p[m][j] receives d_z / (K-1); softmax backward over the
        // domain axis per position.
        let scale = 1.0 / domains as f64;
        let rows = d_z.rows();
        let cols = d_z.cols();
        let mut d_raw: Vec<Matrix> = (0..domains).map(|_| Matrix::zeros(rows, cols)).collect();
        for a in 0..rows {
            for b in 0..cols {
                let upstream = d_z.get(a, b) * scale;
                let mut weighted = 0.0;
                for j in 0..domains {
                    weighted += upstream * cache.p[m][j].get(a, b);
                }
                for j in 0..domains {
                    let pj = cache.p[m][j].get(a, b);
                    d_raw[j].set(a, b, pj * (upstream - weighted));
                }
            }
        }
        // raw_j = key_m^T * query_j.
        for (j, d_raw_j) in d_raw.iter().enumerate() {
            d_key[m].add_scaled(&e.query[j].matmul_bt(d_raw_j), 1.0);
            d_query[j].add_scaled(&e.key[m].matmul(d_raw_j), 1.0);
        }
    }

    let mut grads = AttentionGrads {
        d_projections: Vec::with_capacity(domains),
        attn_query: Vec::with_capacity(domains),
        attn_key: Vec::with_capacity(domains),
        attn_value: Vec::with_capacity(domains),
        d_alpha,
    };
    for j in 0..domains {
        let proj = &cache.projections[j];
        let (gq, dq_in) = model.attn_query[j].backward(proj, &e.pre_query[j], &d_query[j]);
        let (gk, dk_in) = model.attn_key[j].backward(proj, &e.pre_key[j], &d_key[j]);
        let (gv, dv_in) = model.attn_value[j].backward(proj, &e.pre_value[j], &d_value[j]);
        let mut d_proj = dq_in;
        d_proj.add_scaled(&dk_in, 1.0);
        d_proj.add_scaled(&dv_in, 1.0);
        grads.d_projections.push(d_proj);
        grads.attn_query.push(gq);
        grads.attn_key.push(gk);
        grads.attn_value.push(gv);
    }
    grads
}

/// Fold attention gradients into a model-wide bundle.
pub fn accumulate_into(bundle: &mut GradBundle, grads: &AttentionGrads) {
    for (d, g) in bundle.attn_query.iter_mut().zip(&grads.attn_query) {
        d.add_scaled(g, 1.0);
    }
    for (d, g) in bundle.attn_key.iter_mut().zip(&grads.attn_key) {
        d.add_scaled(g, 1.0);
    }
    for (d, g) in bundle.attn_value.iter_mut().zip(&grads.attn_value) {
        d.add_scaled(g, 1.0);
    }
    bundle.alpha += grads.d_alpha;
    bundle.active.attention = true;
    bundle.active.alpha = true;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{DenseLayer, ModelBundle, ModelDims};
    use crate::numerics::Rng;

    fn model_with_domains(domains: usize, d: usize, seed: u64) -> ModelBundle {
        let dims = ModelDims {
            input_dim: 3,
            hidden_dim: 4,
            feat_dim: 4,
            bottleneck_dim: d,
            classes: 3,
            unlabeled_domains: domains,
        };
        ModelBundle::new(dims, &mut Rng::from_seed(seed))
    }

    fn random_projections(rng: &mut Rng, domains: usize, b: usize, d: usize) -> Vec<Matrix> {
        (0..domains)
            .map(|_| Matrix::from_fn(b, d, |_, _| rng.normal()))
            .collect()
    }

    #[test]
    fn identity_embeddings_pass_through() {
        let mut model = model_with_domains(2, 3, 1);
        for j in 0..2 {
            model.attn_query[j] = DenseLayer::identity_map(3);
            model.attn_key[j] = DenseLayer::identity_map(3);
            model.attn_value[j] = DenseLayer::identity_map(3);
        }
        let mut rng = Rng::from_seed(2);
        let projections = random_projections(&mut rng, 2, 4, 3);
        let e = embed(&model, &projections);
        assert_eq!(e.query[0], projections[0]);
        assert_eq!(e.key[1], projections[1]);
        assert_eq!(e.value[0], projections[0]);
    }

    #[test]
    fn zero_embeddings_give_zero() {
        let mut model = model_with_domains(1, 3, 1);
        model.attn_query[0].weight.scale(0.0);
        let mut rng = Rng::from_seed(2);
        let projections = random_projections(&mut rng, 1, 4, 3);
        let e = embed(&model, &projections);
        assert!(e.query[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_domain_similarity_is_all_ones() {
        let mut rng = Rng::from_seed(3);
        let key = Matrix::from_fn(5, 3, |_, _| rng.normal());
        let query = vec![Matrix::from_fn(5, 3, |_, _| rng.normal())];
        let p = similarity(&key, &query);
        assert_eq!(p.len(), 1);
        assert!(p[0].data().iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn identical_scores_split_evenly() {
        let mut rng = Rng::from_seed(4);
        let key = Matrix::from_fn(4, 2, |_, _| rng.normal());
        let q = Matrix::from_fn(4, 2, |_, _| rng.normal());
        let p = similarity(&key, &[q.clone(), q]);
        for m in &p {
            assert!(m.data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
        }
    }

    #[test]
    fn similarity_matches_loop_oracle() {
        let mut rng = Rng::from_seed(5);
        let b = 4;
        let d = 3;
        let key = Matrix::from_fn(b, d, |_, _| rng.normal());
        let queries = random_projections(&mut rng, 3, b, d);
        let p = similarity(&key, &queries);
        for a in 0..d {
            for c in 0..d {
                // Straight-line recomputation of one softmax position.
                let mut raws = Vec::new();
                for q in &queries {
                    let mut acc = 0.0;
                    for r in 0..b {
                        acc += key.get(r, a) * q.get(r, c);
                    }
                    raws.push(acc);
                }
                let sum: f64 = raws.iter().map(|v| v.exp()).sum();
                for (j, raw) in raws.iter().enumerate() {
                    assert!((p[j].get(a, c) - raw.exp() / sum).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn similarity_sums_to_one_over_domains() {
        let mut rng = Rng::from_seed(6);
        for trial in 0..100 {
            let domains = 1 + (trial % 4);
            let key = Matrix::from_fn(3, 4, |_, _| rng.normal() * 3.0);
            let queries = random_projections(&mut rng, domains, 3, 4);
            let p = similarity(&key, &queries);
            for a in 0..4 {
                for b in 0..4 {
                    let sum: f64 = p.iter().map(|m| m.get(a, b)).sum();
                    assert!((sum - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn aggregate_averages() {
        let p1 = Matrix::from_rows(&[vec![0.2, 0.8], vec![0.6, 0.4]]);
        let p2 = Matrix::from_rows(&[vec![0.4, 0.2], vec![0.0, 1.0]]);
        let z = aggregate(&[p1.clone(), p2]);
        assert!((z.get(0, 0) - 0.3).abs() < 1e-15);
        let z_single = aggregate(std::slice::from_ref(&p1));
        assert_eq!(z_single, p1);
    }

    #[test]
    fn reweight_identity_cases() {
        let mut rng = Rng::from_seed(7);
        let v = Matrix::from_fn(4, 3, |_, _| rng.normal());
        let z = Matrix::from_fn(3, 3, |_, _| rng.uniform());
        let q = reweight(&v, &z, 0.0);
        assert_eq!(q, v);
        let q2 = reweight(&v, &Matrix::identity(3), 1.0);
        for (a, b) in q2.data().iter().zip(v.data()) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_alpha_zero_is_bitwise_value_passthrough() {
        let model = model_with_domains(3, 4, 8);
        let mut rng = Rng::from_seed(9);
        let projections = random_projections(&mut rng, 3, 5, 4);
        let (q, cache) = attention_forward(&model, &projections, 0.0);
        for (qm, vm) in q.iter().zip(&cache.embeddings.value) {
            for (a, b) in qm.data().iter().zip(vm.data()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn alpha_gradient_at_zero_is_value_times_aggregate() {
        let model = model_with_domains(2, 3, 10);
        let mut rng = Rng::from_seed(11);
        let projections = random_projections(&mut rng, 2, 4, 3);
        let (q, cache) = attention_forward(&model, &projections, 0.0);
        // Linear probe: L = sum_m <W_m, q_m>.
        let probes: Vec<Matrix> = q
            .iter()
            .map(|qm| Matrix::from_fn(qm.rows(), qm.cols(), |_, _| rng.normal()))
            .collect();
        let grads = attention_backward(&model, &cache, &probes);
        let mut expected = 0.0;
        for m in 0..2 {
            expected += probes[m].dot(&cache.embeddings.value[m].matmul(&cache.z[m]));
        }
        assert!((grads.d_alpha - expected).abs() < 1e-12);

        // Finite-difference confirmation on alpha.
        let h = 1e-6;
        let eval = |alpha: f64| {
            let (q, _) = attention_forward(&model, &projections, alpha);
            q.iter().zip(&probes).map(|(qm, w)| qm.dot(w)).sum::<f64>()
        };
        let numeric = (eval(h) - eval(-h)) / (2.0 * h);
        assert!((grads.d_alpha - numeric).abs() < 1e-6);
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        use crate::networks::{finite_diff_check, ActiveBlocks, GradBundle};
        let model = model_with_domains(3, 3, 12);
        let mut rng = Rng::from_seed(13);
        let projections = random_projections(&mut rng, 3, 4, 3);
        let probes: Vec<Matrix> = (0..3)
            .map(|_| Matrix::from_fn(4, 3, |_, _| rng.normal()))
            .collect();

        let (_, cache) = attention_forward(&model, &projections, 0.37);
        let attn_grads = attention_backward(&model, &cache, &probes);
        let mut bundle = GradBundle::zeros_like(&model);
        accumulate_into(&mut bundle, &attn_grads);
        bundle.active = ActiveBlocks {
            attention: true,
            alpha: true,
            ..Default::default()
        };

        let loss = |m: &ModelBundle| {
            let (q, _) = attention_forward(m, &projections, m.alpha + 0.37);
            q.iter().zip(&probes).map(|(qm, w)| qm.dot(w)).sum::<f64>()
        };
        // The closure applies the same fixed offset the forward used, so
        // the base point evaluates the identical scalar.
        let mut check_rng = Rng::from_seed(14);
        let err = finite_diff_check(&model, &bundle, loss, 1e-5, &mut check_rng, 300);
        assert!(err <= 1e-6, "relative error {err}");
    }
}
