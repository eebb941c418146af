//! The run-spec file: one flat TOML document that covers data
//! generation, training, and the rate sweep. Unknown keys are rejected;
//! relative paths resolve against the spec file's directory; the raw
//! text is echoed verbatim into the run summary.

use serde::Deserialize;
use sldg_core::datagen::{DomainTransform, NoiseKind, StructuralSpec, ToyDomainSpec};
use sldg_core::networks::SgdConfig;
use sldg_core::theory::SweepConfig;
use sldg_core::trainer::{Mode, TrainConfig};
use sldg_core::{Error, Result};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunSpecFile {
    // Shared.
    pub seed: Option<u64>,

    // Generation: which family of dataset to write.
    pub kind: Option<String>,
    pub classes: Option<usize>,
    pub samples_per_domain: Option<usize>,

    // Toy task geometry.
    pub domains: Option<usize>,
    pub max_rotation_deg: Option<f64>,
    /// Explicit per-domain rotations, e.g. "0,35,70"; overrides the grid.
    pub rotations: Option<String>,
    /// Per-domain anisotropic scales, e.g. "1:1,1:1.4,0.8:1".
    pub scales: Option<String>,
    /// Per-domain translations, e.g. "0:0,1:-0.5,0:0".
    pub translations: Option<String>,
    pub cluster_radius: Option<f64>,
    pub cluster_std: Option<f64>,
    pub label_noise: Option<f64>,

    // Structural model.
    pub feature_dim: Option<usize>,
    pub eta_scale: Option<f64>,
    pub psi_scale: Option<f64>,
    pub invariant_noise: Option<String>,
    pub specific_noise: Option<String>,

    // Training.
    pub data_files: Option<String>,
    pub labeled_domain: Option<usize>,
    pub target_domain: Option<usize>,
    pub mode: Option<String>,
    pub m_iters: Option<usize>,
    pub n_iters: Option<usize>,
    pub lambda: Option<f64>,
    pub gamma: Option<f64>,
    pub learning_rate: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_classes: Option<usize>,
    pub per_class: Option<usize>,
    pub cluster_rounds: Option<usize>,
    pub add_cl_to_stage2: Option<bool>,
    pub alpha_perturb_eps: Option<f64>,
    pub hidden_dim: Option<usize>,
    pub feat_dim: Option<usize>,
    pub bottleneck_dim: Option<usize>,
    pub dump_pseudo_labels: Option<bool>,

    // Rate sweep.
    pub n_grid: Option<String>,
    pub reps: Option<usize>,
    pub pool_unlabeled: Option<bool>,
}

/// A parsed spec plus its raw text and base directory.
pub struct LoadedSpec {
    pub spec: RunSpecFile,
    pub raw: String,
    pub base_dir: PathBuf,
}

pub fn load_spec(path: &Path) -> Result<LoadedSpec> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let spec: RunSpecFile = toml::from_str(&raw).map_err(|e| {
        Error::Config(format!("{}: {}", path.display(), e.message()))
    })?;
    let base_dir = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    Ok(LoadedSpec { spec, raw, base_dir })
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<T>()
                .map_err(|_| Error::Config(format!("bad {what} entry `{tok}`")))
        })
        .collect()
}

fn parse_pairs(s: &str, what: &str) -> Result<Vec<[f64; 2]>> {
    s.split(',')
        .map(|tok| {
            let mut it = tok.trim().split(':');
            let a = it.next().unwrap_or("");
            let b = it.next().unwrap_or("");
            if it.next().is_some() {
                return Err(Error::Config(format!("bad {what} entry `{tok}`")));
            }
            let a = a
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad {what} entry `{tok}`")))?;
            let b = b
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad {what} entry `{tok}`")))?;
            Ok([a, b])
        })
        .collect()
}

impl RunSpecFile {
    pub fn seed(&self, override_seed: Option<u64>) -> u64 {
        override_seed.or(self.seed).unwrap_or(0)
    }

    pub fn toy_spec(&self) -> Result<ToyDomainSpec> {
        let classes = self.classes.unwrap_or(4);
        let samples = self.samples_per_domain.unwrap_or(400);
        let domains = self.domains.unwrap_or(3);
        let mut spec = ToyDomainSpec::rotated_blobs(
            classes,
            domains,
            self.max_rotation_deg.unwrap_or(70.0),
            samples,
        );
        if let Some(rot) = &self.rotations {
            let rotations: Vec<f64> = parse_list(rot, "rotations")?;
            spec.transforms = rotations
                .iter()
                .map(|&deg| DomainTransform {
                    rotation_deg: deg,
                    scale: [1.0, 1.0],
                    translation: [0.0, 0.0],
                })
                .collect();
        }
        if let Some(scales) = &self.scales {
            let pairs = parse_pairs(scales, "scales")?;
            if pairs.len() != spec.transforms.len() {
                return Err(Error::Config("scales count does not match domain count".into()));
            }
            for (t, s) in spec.transforms.iter_mut().zip(pairs) {
                t.scale = s;
            }
        }
        if let Some(tr) = &self.translations {
            let pairs = parse_pairs(tr, "translations")?;
            if pairs.len() != spec.transforms.len() {
                return Err(Error::Config("translations count does not match domain count".into()));
            }
            for (t, s) in spec.transforms.iter_mut().zip(pairs) {
                t.translation = s;
            }
        }
        if let Some(r) = self.cluster_radius {
            spec.cluster_radius = r;
        }
        if let Some(s) = self.cluster_std {
            spec.cluster_std = s;
        }
        if let Some(n) = self.label_noise {
            spec.label_noise = n;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn structural_spec(&self) -> Result<StructuralSpec> {
        let mut spec = StructuralSpec::preset(
            self.feature_dim.unwrap_or(2),
            self.domains.unwrap_or(2),
            self.eta_scale.unwrap_or(0.8),
            self.psi_scale.unwrap_or(0.8),
            self.samples_per_domain.unwrap_or(1000),
        );
        if let Some(s) = &self.invariant_noise {
            spec.invariant_noise = s.parse::<NoiseKind>()?;
        }
        if let Some(s) = &self.specific_noise {
            spec.specific_noise = s.parse::<NoiseKind>()?;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn train_config(&self, override_seed: Option<u64>) -> Result<TrainConfig> {
        let defaults = TrainConfig::default();
        let mode = match &self.mode {
            Some(s) => s.parse::<Mode>()?,
            None => Mode::Sldg,
        };
        let cfg = TrainConfig {
            m_iters: self.m_iters.unwrap_or(defaults.m_iters),
            n_iters: self.n_iters.unwrap_or(defaults.n_iters),
            lambda: self.lambda.unwrap_or(defaults.lambda),
            gamma: self.gamma.unwrap_or(defaults.gamma),
            sgd: SgdConfig {
                learning_rate: self.learning_rate.unwrap_or(defaults.sgd.learning_rate),
                momentum: self.momentum.unwrap_or(defaults.sgd.momentum),
                weight_decay: self.weight_decay.unwrap_or(defaults.sgd.weight_decay),
            },
            batch_classes: self.batch_classes.unwrap_or(defaults.batch_classes),
            per_class: self.per_class.unwrap_or(defaults.per_class),
            cluster_rounds: self.cluster_rounds.unwrap_or(defaults.cluster_rounds),
            seed: self.seed(override_seed),
            mode,
            add_cl_to_stage2: self.add_cl_to_stage2.unwrap_or(false),
            alpha_perturb_eps: self.alpha_perturb_eps.unwrap_or(defaults.alpha_perturb_eps),
            classes: self.classes.unwrap_or(defaults.classes),
            hidden_dim: self.hidden_dim.unwrap_or(defaults.hidden_dim),
            feat_dim: self.feat_dim.unwrap_or(defaults.feat_dim),
            bottleneck_dim: self.bottleneck_dim.unwrap_or(defaults.bottleneck_dim),
            dump_pseudo_labels: self.dump_pseudo_labels.unwrap_or(false),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn sweep_config(&self) -> Result<SweepConfig> {
        let defaults = SweepConfig::default();
        let n_grid = match &self.n_grid {
            Some(s) => parse_list(s, "n_grid")?,
            None => defaults.n_grid,
        };
        Ok(SweepConfig {
            n_grid,
            reps: self.reps.unwrap_or(defaults.reps),
            pool_unlabeled: self.pool_unlabeled.unwrap_or(false),
        })
    }

    /// Data file paths resolved relative to the spec file.
    pub fn data_paths(&self, base_dir: &Path) -> Result<Vec<PathBuf>> {
        let files = self
            .data_files
            .as_ref()
            .ok_or_else(|| Error::Config("train specs need `data_files`".into()))?;
        Ok(files
            .split(',')
            .map(|f| base_dir.join(f.trim()))
            .collect())
    }
}
