//! Synthetic data generation.
//!
//! Two families: exact instances of the linear structural model used by
//! the invariance estimator (features are a domain-invariant factor plus
//! a domain-specific factor, labels carry an invariant correlation plus a
//! domain-specific bias), and nonlinear multi-domain Gaussian-blob
//! classification tasks whose per-domain transforms stand in for
//! real-world domain shift.

use crate::dataset::DomainDataset;
use crate::error::{Error, Result};
use crate::fmt::fmt_g6;
use crate::numerics::{sym_eig_min, Matrix, Rng};
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::Path;

/// Zero-mean, unit-variance noise families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Normal,
    Uniform,
    Laplace,
}

impl NoiseKind {
    pub fn sample(&self, rng: &mut Rng) -> f64 {
        match self {
            NoiseKind::Normal => rng.normal(),
            // Uniform on [-sqrt(3), sqrt(3)] has unit variance.
            NoiseKind::Uniform => rng.range(-(3.0f64.sqrt()), 3.0f64.sqrt()),
            // Inverse-CDF Laplace with b = 1/sqrt(2), unit variance.
            NoiseKind::Laplace => {
                let u = rng.uniform() - 0.5;
                let b = 1.0 / 2.0f64.sqrt();
                -b * u.signum() * (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE).ln()
            }
        }
    }
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(NoiseKind::Normal),
            "uniform" => Ok(NoiseKind::Uniform),
            "laplace" => Ok(NoiseKind::Laplace),
            other => Err(Error::Config(format!("unknown noise kind `{other}`"))),
        }
    }
}

/// The linear structural world: per-domain features
/// `h = coeff_invariant^T u + coeff_specific^T l` and labels
/// `y = correlation . h + label_bias . l`, with `u` invariant across
/// domains in distribution and `l` freshly drawn per domain.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StructuralSpec {
    pub feature_dim: usize,
    pub domains: usize,
    /// Per-domain map of the invariant factor into features.
    pub coeff_invariant: Vec<Matrix>,
    /// Per-domain map of the domain-specific factor into features.
    pub coeff_specific: Vec<Matrix>,
    /// Invariant feature-to-label correlation, shared by every domain.
    pub correlation: Vec<f64>,
    /// Per-domain label-side bias coefficients.
    pub label_bias: Vec<Vec<f64>>,
    pub invariant_noise: NoiseKind,
    pub specific_noise: NoiseKind,
    pub samples_per_domain: usize,
}

impl StructuralSpec {
    /// Deterministic preset: orthogonal-rotation coefficient matrices and
    /// fixed coefficient patterns, scaled by `eta_scale` (domain-specific
    /// feature mixing) and `psi_scale` (label-side bias). With both
    /// scales nonzero the labeled domain's labels are genuinely biased.
    pub fn preset(
        feature_dim: usize,
        domains: usize,
        eta_scale: f64,
        psi_scale: f64,
        samples_per_domain: usize,
    ) -> Self {
        let rotation = |deg: f64| -> Matrix {
            // Product of Givens rotations over consecutive coordinate
            // pairs; orthogonal for every dimension.
            let mut m = Matrix::identity(feature_dim);
            let theta = deg.to_radians();
            for p in 0..feature_dim.saturating_sub(1) {
                let mut g = Matrix::identity(feature_dim);
                g.set(p, p, theta.cos());
                g.set(p, p + 1, -theta.sin());
                g.set(p + 1, p, theta.sin());
                g.set(p + 1, p + 1, theta.cos());
                m = m.matmul(&g);
            }
            m
        };
        let base_bias: Vec<f64> = (0..feature_dim).map(|d| 0.9 - 0.2 * d as f64).collect();
        let mut coeff_invariant = Vec::new();
        let mut coeff_specific = Vec::new();
        let mut label_bias = Vec::new();
        for j in 0..domains {
            coeff_invariant.push(rotation(10.0 + 25.0 * j as f64));
            coeff_specific.push(rotation(35.0 + 40.0 * j as f64).scaled(eta_scale));
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            label_bias.push(
                (0..feature_dim)
                    .map(|d| sign * psi_scale * base_bias[(d + j) % feature_dim])
                    .collect(),
            );
        }
        StructuralSpec {
            feature_dim,
            domains,
            coeff_invariant,
            coeff_specific,
            correlation: (0..feature_dim).map(|d| (-0.5f64).powi(d as i32)).collect(),
            label_bias,
            invariant_noise: NoiseKind::Normal,
            specific_noise: NoiseKind::Normal,
            samples_per_domain,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.feature_dim;
        if self.domains < 2 {
            return Err(Error::Config("structural spec needs at least 2 domains".into()));
        }
        if self.coeff_invariant.len() != self.domains
            || self.coeff_specific.len() != self.domains
            || self.label_bias.len() != self.domains
        {
            return Err(Error::Config("per-domain coefficient counts do not match domain count".into()));
        }
        if self.correlation.len() != d {
            return Err(Error::Config("correlation length does not match feature_dim".into()));
        }
        for (j, (phi, eta)) in self
            .coeff_invariant
            .iter()
            .zip(&self.coeff_specific)
            .enumerate()
        {
            if phi.rows() != d || phi.cols() != d || eta.rows() != d || eta.cols() != d {
                return Err(Error::Config(format!("domain {j}: coefficient matrices must be {d}x{d}")));
            }
            if self.label_bias[j].len() != d {
                return Err(Error::Config(format!("domain {j}: label_bias length must be {d}")));
            }
            // The invariant second-moment image must stay full rank for
            // the first-stage regression to identify the projection.
            let min_eig = sym_eig_min(&phi.gram());
            if min_eig <= 1e-9 {
                return Err(Error::Config(format!(
                    "domain {j}: invariant coefficient matrix is rank deficient (min eigenvalue {min_eig:.3e})"
                )));
            }
        }
        Ok(())
    }
}

/// One generated structural domain: features with real-valued labels.
#[derive(Debug, Clone)]
pub struct StructuralDomain {
    pub features: Matrix,
    pub labels: Vec<f64>,
}

/// Latent factor draws, exposed for independence diagnostics.
pub struct StructuralLatents {
    pub invariant: Matrix,
    pub specific: Matrix,
}

pub fn gen_structural(spec: &StructuralSpec, rng: &Rng) -> Result<Vec<StructuralDomain>> {
    gen_structural_with_latents(spec, rng).map(|(d, _)| d)
}

/// Generate every domain, also returning the latent draws.
///
/// Sample `i` draws one invariant factor realization that every domain
/// observes through its own coefficient matrices; the domain-specific
/// factors come from per-domain derived generators, so they are pairwise
/// independent and independent of the invariant stream. Cross-domain
/// sample pairing by row index is what makes the first-stage regression
/// informative.
pub fn gen_structural_with_latents(
    spec: &StructuralSpec,
    rng: &Rng,
) -> Result<(Vec<StructuralDomain>, Vec<StructuralLatents>)> {
    spec.validate()?;
    let d = spec.feature_dim;
    let n = spec.samples_per_domain;
    let mut u_rng = rng.derive(0x1_0000);
    let u_all = Matrix::from_fn(n, d, |_, _| spec.invariant_noise.sample(&mut u_rng));
    let mut domains = Vec::with_capacity(spec.domains);
    let mut latents = Vec::with_capacity(spec.domains);
    for j in 0..spec.domains {
        let mut rng_j = rng.derive(0x5d0_0000 + j as u64);
        let phi = &spec.coeff_invariant[j];
        let eta = &spec.coeff_specific[j];
        let psi = &spec.label_bias[j];
        let mut features = Matrix::zeros(n, d);
        let mut labels = Vec::with_capacity(n);
        let mut l_all = Matrix::zeros(n, d);
        for i in 0..n {
            let u = u_all.row(i);
            let l: Vec<f64> = (0..d).map(|_| spec.specific_noise.sample(&mut rng_j)).collect();
            let mut y = 0.0;
            for a in 0..d {
                // h_a = sum_b phi[b][a] u_b + eta[b][a] l_b.
                let mut h = 0.0;
                for b in 0..d {
                    h += phi.get(b, a) * u[b] + eta.get(b, a) * l[b];
                }
                features.set(i, a, h);
                y += spec.correlation[a] * h;
            }
            for (p, lv) in psi.iter().zip(&l) {
                y += p * lv;
            }
            labels.push(y);
            l_all.row_mut(i).copy_from_slice(&l);
        }
        domains.push(StructuralDomain { features, labels });
        latents.push(StructuralLatents {
            invariant: u_all.clone(),
            specific: l_all,
        });
    }
    Ok((domains, latents))
}

/// Write a structural domain to CSV (`domain_id,y,h_0,...`); these files
/// document a generated instance and are not trainer inputs.
pub fn write_structural_csv(domain_id: usize, data: &StructuralDomain, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("domain_id,y");
    for a in 0..data.features.cols() {
        out.push_str(&format!(",h_{a}"));
    }
    out.push('\n');
    for i in 0..data.features.rows() {
        out.push_str(&format!("{domain_id},{}", fmt_g6(data.labels[i])));
        for v in data.features.row(i) {
            out.push(',');
            out.push_str(&fmt_g6(*v));
        }
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(out.as_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Affine per-domain transform: scale, then rotate, then translate.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DomainTransform {
    pub rotation_deg: f64,
    pub scale: [f64; 2],
    pub translation: [f64; 2],
}

impl DomainTransform {
    pub fn identity() -> Self {
        DomainTransform {
            rotation_deg: 0.0,
            scale: [1.0, 1.0],
            translation: [0.0, 0.0],
        }
    }

    fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let sx = p[0] * self.scale[0];
        let sy = p[1] * self.scale[1];
        let t = self.rotation_deg.to_radians();
        [
            t.cos() * sx - t.sin() * sy + self.translation[0],
            t.sin() * sx + t.cos() * sy + self.translation[1],
        ]
    }
}

/// Two-dimensional Gaussian class blobs on a circle, one transform per
/// domain. Every generated domain carries labels; the trainer decides
/// which domains get to see them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyDomainSpec {
    pub classes: usize,
    pub cluster_radius: f64,
    pub cluster_std: f64,
    pub label_noise: f64,
    pub samples_per_domain: usize,
    pub transforms: Vec<DomainTransform>,
}

impl ToyDomainSpec {
    /// The standard benchmark task: class means on a circle, domains
    /// rotated on an even grid from 0 to `max_rotation_deg` (the last
    /// domain gets the full rotation and plays the unseen target).
    pub fn rotated_blobs(
        classes: usize,
        domains: usize,
        max_rotation_deg: f64,
        samples_per_domain: usize,
    ) -> Self {
        let transforms = (0..domains)
            .map(|j| DomainTransform {
                rotation_deg: if domains > 1 {
                    max_rotation_deg * j as f64 / (domains - 1) as f64
                } else {
                    0.0
                },
                scale: [1.0, 1.0],
                translation: [0.0, 0.0],
            })
            .collect();
        ToyDomainSpec {
            classes,
            cluster_radius: 3.0,
            cluster_std: 0.6,
            label_noise: 0.0,
            samples_per_domain,
            transforms,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config("toy spec needs at least 2 classes".into()));
        }
        if self.transforms.is_empty() {
            return Err(Error::Config("toy spec needs at least 1 domain transform".into()));
        }
        if self.samples_per_domain < self.classes {
            return Err(Error::Config("samples_per_domain must cover every class".into()));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::Config("label_noise must be in [0, 1]".into()));
        }
        Ok(())
    }
}

pub fn gen_toy_domains(spec: &ToyDomainSpec, rng: &Rng) -> Result<Vec<DomainDataset>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.transforms.len());
    for (j, transform) in spec.transforms.iter().enumerate() {
        let mut rng_j = rng.derive(0x70d_0000 + j as u64);
        let n = spec.samples_per_domain;
        let mut x = Matrix::zeros(n, 2);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = i % spec.classes;
            let theta = 2.0 * std::f64::consts::PI * class as f64 / spec.classes as f64;
            let p = [
                spec.cluster_radius * theta.cos() + spec.cluster_std * rng_j.normal(),
                spec.cluster_radius * theta.sin() + spec.cluster_std * rng_j.normal(),
            ];
            let p = transform.apply(p);
            x.set(i, 0, p[0]);
            x.set(i, 1, p[1]);
            let label = if spec.label_noise > 0.0 && rng_j.uniform() < spec.label_noise {
                rng_j.below(spec.classes)
            } else {
                class
            };
            labels.push(label);
        }
        out.push(DomainDataset {
            domain_id: j,
            name: format!("domain_{j}"),
            x,
            labels: Some(labels),
        });
    }
    Ok(out)
}
