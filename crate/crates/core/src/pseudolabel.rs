//! Pseudo-label assignment for unlabeled domains.
//!
//! Labels come from prediction-weighted class centroids refined by
//! cosine-nearest reassignment: soft centroids weighted by the current
//! classifier's scores, an initial nearest-centroid assignment, then a
//! configurable number of hard-mean refinement rounds. Round count 0
//! bypasses clustering entirely and uses the raw argmax predictions.

use crate::error::{Error, Result};
use crate::networks::ModelBundle;
use crate::numerics::{cosine_distance, softmax_rows, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CentroidStage {
    /// Prediction-weighted soft assignment.
    Soft,
    /// Hard per-class means.
    Hard,
}

/// One centroid per class (C x D), with a flag per class that had no
/// supporting samples and fell back to a previous centroid or the global
/// feature mean.
#[derive(Debug, Clone)]
pub struct CentroidSet {
    pub domain: usize,
    pub stage: CentroidStage,
    pub centroids: Matrix,
    pub empty_classes: Vec<bool>,
}

/// Initial and refined label vectors for one domain, plus the one-hot
/// encoding of the final labels.
#[derive(Debug, Clone)]
pub struct PseudoLabels {
    pub domain: usize,
    pub initial: Vec<usize>,
    pub final_labels: Vec<usize>,
    pub one_hot: Matrix,
    /// Cosine distance to the chosen centroid at the final assignment;
    /// empty when `rounds == 0` skipped clustering.
    pub min_distance: Vec<f64>,
}

impl PseudoLabels {
    fn from_final(domain: usize, initial: Vec<usize>, final_labels: Vec<usize>, classes: usize, min_distance: Vec<f64>) -> Self {
        let mut one_hot = Matrix::zeros(final_labels.len(), classes);
        for (i, &r) in final_labels.iter().enumerate() {
            one_hot.set(i, r, 1.0);
        }
        PseudoLabels {
            domain,
            initial,
            final_labels,
            one_hot,
            min_distance,
        }
    }
}

fn global_mean(features: &Matrix) -> Vec<f64> {
    let mut mean = features.col_sums();
    for v in &mut mean {
        *v /= features.rows() as f64;
    }
    mean
}

/// Prediction-weighted centroids: `centroid_r = sum_i probs[i,r] * f_i /
/// sum_i probs[i,r]`. A class whose probability mass is below 1e-12 falls
/// back to the global feature mean so every class keeps a live centroid.
pub fn soft_centroids(features: &Matrix, probs: &Matrix) -> Result<CentroidSet> {
    if features.rows() != probs.rows() {
        return Err(Error::dim(
            "soft_centroids",
            format!("{} feature rows vs {} prob rows", features.rows(), probs.rows()),
        ));
    }
    for i in 0..probs.rows() {
        let sum: f64 = probs.row(i).iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::dim(
                "soft_centroids",
                format!("probability row {i} sums to {sum}"),
            ));
        }
    }
    let classes = probs.cols();
    let dim = features.cols();
    let fallback = global_mean(features);
    let mut centroids = Matrix::zeros(classes, dim);
    let mut empty = vec![false; classes];
    for r in 0..classes {
        let mut mass = 0.0;
        let mut acc = vec![0.0; dim];
        for i in 0..features.rows() {
            let w = probs.get(i, r);
            mass += w;
            for (a, f) in acc.iter_mut().zip(features.row(i)) {
                *a += w * f;
            }
        }
        if mass < 1e-12 {
            empty[r] = true;
            centroids.row_mut(r).copy_from_slice(&fallback);
        } else {
            for a in &mut acc {
                *a /= mass;
            }
            centroids.row_mut(r).copy_from_slice(&acc);
        }
    }
    Ok(CentroidSet {
        domain: 0,
        stage: CentroidStage::Soft,
        centroids,
        empty_classes: empty,
    })
}

/// Nearest centroid per sample under cosine distance; ties go to the
/// lowest class index.
pub fn assign_nearest(features: &Matrix, cents: &CentroidSet) -> Vec<usize> {
    assign_nearest_with_distance(features, cents).0
}

pub fn assign_nearest_with_distance(features: &Matrix, cents: &CentroidSet) -> (Vec<usize>, Vec<f64>) {
    assert_eq!(
        features.cols(),
        cents.centroids.cols(),
        "feature dim does not match centroid dim"
    );
    let mut labels = Vec::with_capacity(features.rows());
    let mut dists = Vec::with_capacity(features.rows());
    for i in 0..features.rows() {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for r in 0..cents.centroids.rows() {
            let d = cosine_distance(features.row(i), cents.centroids.row(r));
            if d < best_d {
                best_d = d;
                best = r;
            }
        }
        labels.push(best);
        dists.push(best_d);
    }
    (labels, dists)
}

/// One hard refinement round: per-class means of the current assignment,
/// then reassignment on the new centroids. Classes that lost all their
/// samples keep their previous centroid.
pub fn refine(features: &Matrix, labels: &[usize], prev: &CentroidSet) -> (CentroidSet, Vec<usize>) {
    let classes = prev.centroids.rows();
    let dim = features.cols();
    let mut counts = vec![0usize; classes];
    let mut sums = Matrix::zeros(classes, dim);
    for (i, &r) in labels.iter().enumerate() {
        counts[r] += 1;
        for (a, f) in sums.row_mut(r).iter_mut().zip(features.row(i)) {
            *a += f;
        }
    }
    let mut centroids = Matrix::zeros(classes, dim);
    let mut empty = vec![false; classes];
    for r in 0..classes {
        if counts[r] == 0 {
            empty[r] = true;
            centroids
                .row_mut(r)
                .copy_from_slice(prev.centroids.row(r));
        } else {
            let inv = 1.0 / counts[r] as f64;
            for (c, s) in centroids.row_mut(r).iter_mut().zip(sums.row(r)) {
                *c = s * inv;
            }
        }
    }
    let set = CentroidSet {
        domain: prev.domain,
        stage: CentroidStage::Hard,
        centroids,
        empty_classes: empty,
    };
    let labels = assign_nearest(features, &set);
    (set, labels)
}

/// Assign pseudo labels to one unlabeled domain.
///
/// `rounds == 0` uses the classifier's argmax directly; `rounds >= 1`
/// builds soft centroids from the classifier scores, assigns by cosine
/// distance, then applies `rounds` hard refinement rounds. Clustering
/// runs on the bottleneck features `b(g(x))`, left unnormalized since
/// cosine distance is already scale-invariant.
pub fn assign_pseudo_labels(
    model: &ModelBundle,
    domain: usize,
    x: &Matrix,
    rounds: usize,
) -> Result<PseudoLabels> {
    let classes = model.dims.classes;
    let features = model.features(x);
    let probs = softmax_rows(&model.classifier.forward(&features))?;
    if rounds == 0 {
        let final_labels: Vec<usize> = (0..probs.rows()).map(|i| probs.argmax_row(i)).collect();
        let initial = final_labels.clone();
        return Ok(PseudoLabels::from_final(domain, initial, final_labels, classes, Vec::new()));
    }
    let mut cents = soft_centroids(&features, &probs)?;
    cents.domain = domain;
    let initial = assign_nearest(&features, &cents);
    let mut labels = initial.clone();
    for _ in 0..rounds {
        let (next, next_labels) = refine(&features, &labels, &cents);
        cents = next;
        labels = next_labels;
    }
    let (_, dists) = assign_nearest_with_distance(&features, &cents);
    Ok(PseudoLabels::from_final(domain, initial, labels, classes, dists))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn soft_centroids_symmetric_example() {
        let features = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let probs = Matrix::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        let cents = soft_centroids(&features, &probs).unwrap();
        for r in 0..2 {
            assert!((cents.centroids.get(r, 0) - 0.5).abs() < 1e-15);
            assert!((cents.centroids.get(r, 1) - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn soft_centroids_one_hot_probs_are_class_means() {
        let features = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![3.0, 0.0],
            vec![0.0, 2.0],
        ]);
        let probs = Matrix::from_rows(&[
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
        ]);
        let cents = soft_centroids(&features, &probs).unwrap();
        assert!((cents.centroids.get(0, 0) - 2.0).abs() < 1e-15);
        assert!((cents.centroids.get(1, 1) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn soft_centroids_match_loop_oracle() {
        let mut rng = Rng::from_seed(5);
        let features = Matrix::from_fn(6, 3, |_, _| rng.normal());
        let raw = Matrix::from_fn(6, 4, |_, _| rng.normal());
        let probs = softmax_rows(&raw).unwrap();
        let cents = soft_centroids(&features, &probs).unwrap();
        for r in 0..4 {
            let mut num = [0.0; 3];
            let mut den = 0.0;
            for i in 0..6 {
                den += probs.get(i, r);
                for (d, n) in num.iter_mut().enumerate() {
                    *n += probs.get(i, r) * features.get(i, d);
                }
            }
            for d in 0..3 {
                assert!((cents.centroids.get(r, d) - num[d] / den).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn soft_centroids_empty_class_falls_back_to_global_mean() {
        let features = Matrix::from_rows(&[vec![1.0, 0.0], vec![3.0, 4.0]]);
        let probs = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        let cents = soft_centroids(&features, &probs).unwrap();
        assert!(cents.empty_classes[1]);
        assert!(!cents.empty_classes[0]);
        assert!((cents.centroids.get(1, 0) - 2.0).abs() < 1e-15);
        assert!((cents.centroids.get(1, 1) - 2.0).abs() < 1e-15);
        assert!(cents.centroids.is_finite());
    }

    #[test]
    fn assign_nearest_basic_and_tie_break() {
        let cents = CentroidSet {
            domain: 0,
            stage: CentroidStage::Hard,
            centroids: Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]),
            empty_classes: vec![false, false],
        };
        let f = Matrix::from_rows(&[vec![0.9, 0.1]]);
        assert_eq!(assign_nearest(&f, &cents), vec![0]);
        // Equidistant from both centroids: lowest class index wins.
        let tie = Matrix::from_rows(&[vec![1.0, 1.0]]);
        assert_eq!(assign_nearest(&tie, &cents), vec![0]);
    }

    #[test]
    fn assign_nearest_matches_exhaustive_oracle() {
        let mut rng = Rng::from_seed(11);
        let features = Matrix::from_fn(20, 4, |_, _| rng.normal());
        let cents = CentroidSet {
            domain: 0,
            stage: CentroidStage::Hard,
            centroids: Matrix::from_fn(4, 4, |_, _| rng.normal()),
            empty_classes: vec![false; 4],
        };
        let got = assign_nearest(&features, &cents);
        for i in 0..20 {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for r in 0..4 {
                let mut dot = 0.0;
                let mut nu = 0.0;
                let mut nv = 0.0;
                for d in 0..4 {
                    dot += features.get(i, d) * cents.centroids.get(r, d);
                    nu += features.get(i, d) * features.get(i, d);
                    nv += cents.centroids.get(r, d) * cents.centroids.get(r, d);
                }
                let dist = 1.0 - dot / (nu.sqrt() * nv.sqrt());
                if dist < best_d {
                    best_d = dist;
                    best = r;
                }
            }
            assert_eq!(got[i], best, "sample {i}");
        }
    }

    #[test]
    fn refine_is_fixed_point_on_separated_blobs() {
        let mut rng = Rng::from_seed(3);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..20 {
            let (cx, cy, label) = if i % 2 == 0 { (5.0, 0.0, 0) } else { (0.0, 5.0, 1) };
            rows.push(vec![cx + 0.1 * rng.normal(), cy + 0.1 * rng.normal()]);
            labels.push(label);
        }
        let features = Matrix::from_rows(&rows);
        let prev = CentroidSet {
            domain: 0,
            stage: CentroidStage::Soft,
            centroids: Matrix::from_rows(&[vec![5.0, 0.0], vec![0.0, 5.0]]),
            empty_classes: vec![false, false],
        };
        let (cents, new_labels) = refine(&features, &labels, &prev);
        assert_eq!(new_labels, labels);
        // Centroids are the blob means.
        for r in 0..2 {
            let members: Vec<usize> = (0..20).filter(|i| labels[*i] == r).collect();
            for d in 0..2 {
                let mean: f64 =
                    members.iter().map(|&i| features.get(i, d)).sum::<f64>() / members.len() as f64;
                assert!((cents.centroids.get(r, d) - mean).abs() < 1e-12);
            }
        }
        // Idempotence at the fixed point.
        let (cents2, labels2) = refine(&features, &new_labels, &cents);
        assert_eq!(labels2, new_labels);
        assert_eq!(cents2.centroids, cents.centroids);
    }

    #[test]
    fn refine_single_class_is_global_mean() {
        let features = Matrix::from_rows(&[vec![1.0, 1.0], vec![3.0, 5.0]]);
        let labels = vec![1, 1];
        let prev = CentroidSet {
            domain: 0,
            stage: CentroidStage::Soft,
            centroids: Matrix::from_rows(&[vec![-10.0, -10.0], vec![1.0, 1.0]]),
            empty_classes: vec![false, false],
        };
        let (cents, new_labels) = refine(&features, &labels, &prev);
        assert!((cents.centroids.get(1, 0) - 2.0).abs() < 1e-15);
        assert!((cents.centroids.get(1, 1) - 3.0).abs() < 1e-15);
        // Empty class 0 keeps its previous centroid.
        assert!(cents.empty_classes[0]);
        assert_eq!(cents.centroids.row(0), &[-10.0, -10.0]);
        // All samples stay in the populated class: the mean centroid is
        // closer in cosine distance than the far-away leftover.
        assert_eq!(new_labels, vec![1, 1]);
    }

    #[test]
    fn refine_matches_kmeans_step_oracle() {
        let mut rng = Rng::from_seed(9);
        let features = Matrix::from_fn(15, 3, |_, _| rng.normal());
        let labels: Vec<usize> = (0..15).map(|_| rng.below(3)).collect();
        let prev = CentroidSet {
            domain: 0,
            stage: CentroidStage::Soft,
            centroids: Matrix::from_fn(3, 3, |_, _| rng.normal()),
            empty_classes: vec![false; 3],
        };
        let (cents, got_labels) = refine(&features, &labels, &prev);

        // Straight-line k-means step.
        let mut means = vec![vec![0.0; 3]; 3];
        let mut counts = [0usize; 3];
        for (i, &r) in labels.iter().enumerate() {
            counts[r] += 1;
            for d in 0..3 {
                means[r][d] += features.get(i, d);
            }
        }
        for r in 0..3 {
            if counts[r] > 0 {
                for d in 0..3 {
                    means[r][d] /= counts[r] as f64;
                }
            } else {
                for d in 0..3 {
                    means[r][d] = prev.centroids.get(r, d);
                }
            }
        }
        for r in 0..3 {
            for d in 0..3 {
                assert!((cents.centroids.get(r, d) - means[r][d]).abs() < 1e-12);
            }
        }
        for i in 0..15 {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for r in 0..3 {
                let d = cosine_distance(features.row(i), &means[r]);
                if d < best_d {
                    best_d = d;
                    best = r;
                }
            }
            assert_eq!(got_labels[i], best);
        }
    }

    #[test]
    fn rounds_zero_with_correct_classifier_is_perfect() {
        use crate::networks::{Activation, DenseLayer, ModelBundle, ModelDims};
        // Hand-built model whose logits are the inputs themselves: with
        // exactly one-hot data, argmax predictions equal the labels.
        let dims = ModelDims {
            input_dim: 2,
            hidden_dim: 2,
            feat_dim: 2,
            bottleneck_dim: 2,
            classes: 2,
            unlabeled_domains: 1,
        };
        let mut model = ModelBundle::new(dims, &mut Rng::from_seed(0));
        model.backbone = vec![DenseLayer::identity_map(2), DenseLayer::identity_map(2)];
        model.bottleneck = vec![DenseLayer::identity_map(2)];
        model.classifier = DenseLayer {
            weight: Matrix::identity(2),
            bias: vec![0.0; 2],
            activation: Activation::Identity,
        };
        let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]);
        let pl = assign_pseudo_labels(&model, 0, &x, 0).unwrap();
        assert_eq!(pl.final_labels, vec![0, 1, 0]);
        assert_eq!(pl.one_hot.get(2, 0), 1.0);
    }

    #[test]
    fn rounds_one_is_soft_assign_refine_composition() {
        use crate::networks::{ModelBundle, ModelDims};
        let dims = ModelDims {
            input_dim: 3,
            hidden_dim: 5,
            feat_dim: 4,
            bottleneck_dim: 3,
            classes: 3,
            unlabeled_domains: 1,
        };
        let model = ModelBundle::new(dims, &mut Rng::from_seed(4));
        let mut rng = Rng::from_seed(5);
        let x = Matrix::from_fn(12, 3, |_, _| rng.normal());
        let got = assign_pseudo_labels(&model, 0, &x, 1).unwrap();

        let features = model.features(&x);
        let probs = softmax_rows(&model.classifier.forward(&features)).unwrap();
        let cents = soft_centroids(&features, &probs).unwrap();
        let initial = assign_nearest(&features, &cents);
        let (_, want) = refine(&features, &initial, &cents);
        assert_eq!(got.initial, initial);
        assert_eq!(got.final_labels, want);
    }

    #[test]
    fn scale_invariance_of_assignment() {
        let mut rng = Rng::from_seed(21);
        let features = Matrix::from_fn(12, 3, |_, _| rng.normal());
        let cents = CentroidSet {
            domain: 0,
            stage: CentroidStage::Hard,
            centroids: Matrix::from_fn(3, 3, |_, _| rng.normal()),
            empty_classes: vec![false; 3],
        };
        let base = assign_nearest(&features, &cents);
        let scaled = features.scaled(37.5);
        assert_eq!(assign_nearest(&scaled, &cents), base);
    }
}
