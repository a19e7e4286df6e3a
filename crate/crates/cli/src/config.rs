//! Experiment configuration: a strict TOML schema with unknown-key
//! rejection, validated before any compute starts.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vflsim::attack::{AttackMode, ClusteringMode};
use vflsim::{Result, VflError};

/// Where the feature matrix comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    /// IDX image/label file pairs (the MNIST distribution format).
    Idx {
        name: String,
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    /// Synthetic separable Gaussian blobs; train and test are two seeded
    /// draws from the same distribution.
    Blobs {
        num_classes: usize,
        dim: usize,
        per_class: usize,
        spacing: f64,
        spread: f64,
    },
}

impl DatasetConfig {
    pub fn name(&self) -> String {
        match self {
            DatasetConfig::Idx { name, .. } => name.clone(),
            DatasetConfig::Blobs { num_classes, dim, .. } => {
                format!("blobs-{num_classes}c{dim}d")
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartiesConfig {
    pub count: usize,
    /// Index of the attacking party; omit for a fully benign run.
    pub attacker: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate for every benign passive party.
    pub learning_rate: f64,
    /// Attacker override; defaults to `learning_rate`.
    pub attacker_learning_rate: Option<f64>,
    /// Active-party (top model) override; defaults to `learning_rate`.
    pub active_learning_rate: Option<f64>,
    /// Per-party embedding dimension (single fully connected bottom layer).
    pub embedding_dim: usize,
    /// Hidden layer widths of the top model; empty means a single dense
    /// layer straight to the logits.
    #[serde(default)]
    pub top_hidden: Vec<usize>,
}

/// Either a literal amplification factor or "auto" (resolved through the
/// benign-to-attacker ratio rule at run time).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EtaSetting {
    Auto,
    Fixed(f64),
}

impl EtaSetting {
    pub fn resolve(&self, num_parties: usize) -> f64 {
        match self {
            EtaSetting::Auto => vflsim::attack::default_eta(num_parties, 1),
            EtaSetting::Fixed(v) => *v,
        }
    }
}

impl Serialize for EtaSetting {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            EtaSetting::Auto => s.serialize_str("auto"),
            EtaSetting::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for EtaSetting {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl serde::de::Visitor<'_> for V {
            type Value = EtaSetting;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a positive number or the string \"auto\"")
            }
            fn visit_str<E: serde::de::Error>(self, v: &str) -> std::result::Result<EtaSetting, E> {
                if v == "auto" {
                    Ok(EtaSetting::Auto)
                } else {
                    Err(E::custom(format!("eta must be a number or \"auto\", got {v:?}")))
                }
            }
            fn visit_f64<E: serde::de::Error>(self, v: f64) -> std::result::Result<EtaSetting, E> {
                Ok(EtaSetting::Fixed(v))
            }
            fn visit_i64<E: serde::de::Error>(self, v: i64) -> std::result::Result<EtaSetting, E> {
                Ok(EtaSetting::Fixed(v as f64))
            }
        }
        d.deserialize_any(V)
    }
}

fn default_sigma_scale() -> f64 {
    0.5
}

fn default_aux_sets() -> usize {
    1
}

fn default_clustering() -> String {
    "kmeans".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// "dirty" or "clean".
    pub mode: String,
    pub source_label: Option<usize>,
    pub target_label: usize,
    pub eta: EtaSetting,
    #[serde(default)]
    pub mu_scale: f64,
    #[serde(default = "default_sigma_scale")]
    pub sigma_scale: f64,
    #[serde(default = "default_aux_sets")]
    pub aux_sets: usize,
    /// "kmeans" or "nearest".
    #[serde(default = "default_clustering")]
    pub clustering: String,
    /// Epoch whose embeddings the attacker records; defaults to the final
    /// epoch.
    pub record_epoch: Option<usize>,
    /// Poison set size; defaults to the test-set size.
    pub poison_count: Option<usize>,
}

impl AttackConfig {
    pub fn attack_mode(&self) -> Result<AttackMode> {
        match self.mode.as_str() {
            "dirty" => Ok(AttackMode::DirtyLabel),
            "clean" => Ok(AttackMode::CleanLabel),
            other => Err(VflError::Config(format!(
                "attack mode must be \"dirty\" or \"clean\", got {other:?}"
            ))),
        }
    }

    pub fn clustering_mode(&self) -> Result<ClusteringMode> {
        match self.clustering.as_str() {
            "kmeans" => Ok(ClusteringMode::KMeans),
            "nearest" => Ok(ClusteringMode::NearestCenter),
            other => Err(VflError::Config(format!(
                "clustering must be \"kmeans\" or \"nearest\", got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DefenseConfig {
    Clipping { rate: f64 },
    Compression { rate: f64 },
    Dp { epsilon: f64, delta: f64, clip_norm: f64 },
    /// Inference-phase norm monitor; "training_mean" or "zero".
    NormMonitor { policy: String },
}

impl DefenseConfig {
    pub fn label(&self) -> String {
        match self {
            DefenseConfig::Clipping { rate } => format!("clipping({rate})"),
            DefenseConfig::Compression { rate } => format!("compression({rate})"),
            DefenseConfig::Dp { epsilon, .. } => format!("dp(eps={epsilon})"),
            DefenseConfig::NormMonitor { policy } => format!("norm_monitor({policy})"),
        }
    }
}

fn default_repeats() -> usize {
    5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub parties: PartiesConfig,
    pub training: TrainingConfig,
    pub attack: Option<AttackConfig>,
    #[serde(default)]
    pub defense: Vec<DefenseConfig>,
    pub run: RunConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| VflError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.parties.count == 0 {
            return Err(VflError::Config("parties.count must be >= 1".into()));
        }
        if let Some(a) = self.parties.attacker {
            if a >= self.parties.count {
                return Err(VflError::Config(format!(
                    "parties.attacker {a} out of range for {} parties",
                    self.parties.count
                )));
            }
        }
        if self.training.batch_size == 0 {
            return Err(VflError::Config("training.batch_size must be >= 1".into()));
        }
        if self.training.embedding_dim == 0 {
            return Err(VflError::Config("training.embedding_dim must be >= 1".into()));
        }
        for lr in [
            Some(self.training.learning_rate),
            self.training.attacker_learning_rate,
            self.training.active_learning_rate,
        ]
        .into_iter()
        .flatten()
        {
            if !lr.is_finite() || lr < 0.0 {
                return Err(VflError::Config("learning rates must be finite and >= 0".into()));
            }
        }
        if self.run.repeats == 0 {
            return Err(VflError::Config("run.repeats must be >= 1".into()));
        }
        if let Some(attack) = &self.attack {
            attack.attack_mode()?;
            attack.clustering_mode()?;
            if self.parties.attacker.is_none() {
                return Err(VflError::Config(
                    "an attack section requires parties.attacker".into(),
                ));
            }
            if attack.aux_sets == 0 {
                return Err(VflError::Config("attack.aux_sets must be >= 1".into()));
            }
            if attack.attack_mode()? == AttackMode::CleanLabel {
                match attack.source_label {
                    None => {
                        return Err(VflError::Config(
                            "clean-label attack requires attack.source_label".into(),
                        ))
                    }
                    Some(s) if s == attack.target_label => {
                        return Err(VflError::Config(
                            "attack.source_label must differ from attack.target_label".into(),
                        ))
                    }
                    _ => {}
                }
            }
            if attack.sigma_scale < 0.0 {
                return Err(VflError::Config("attack.sigma_scale must be >= 0".into()));
            }
        }
        for defense in &self.defense {
            match defense {
                DefenseConfig::Clipping { rate } | DefenseConfig::Compression { rate } => {
                    if !(0.0..1.0).contains(rate) {
                        return Err(VflError::Config(
                            "defense rate must lie in [0, 1)".into(),
                        ));
                    }
                }
                DefenseConfig::Dp { epsilon, delta, clip_norm } => {
                    if *epsilon <= 0.0 || !(0.0..1.0).contains(delta) || *delta == 0.0 || *clip_norm <= 0.0 {
                        return Err(VflError::Config(
                            "dp defense requires epsilon > 0, delta in (0, 1), clip_norm > 0".into(),
                        ));
                    }
                }
                DefenseConfig::NormMonitor { policy } => {
                    if policy != "training_mean" && policy != "zero" {
                        return Err(VflError::Config(format!(
                            "norm_monitor policy must be \"training_mean\" or \"zero\", got {policy:?}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn attacker_lr(&self) -> f64 {
        self.training
            .attacker_learning_rate
            .unwrap_or(self.training.learning_rate)
    }

    pub fn active_lr(&self) -> f64 {
        self.training
            .active_learning_rate
            .unwrap_or(self.training.learning_rate)
    }

    pub fn defense_label(&self) -> String {
        if self.defense.is_empty() {
            "none".into()
        } else {
            self.defense
                .iter()
                .map(DefenseConfig::label)
                .collect::<Vec<_>>()
                .join("+")
        }
    }
}

/// Parses a `--defense` flag value such as `clipping=0.4`, `compression=0.6`,
/// `dp=1.0,1e-5,3.0`, or `norm_monitor=training_mean`.
pub fn parse_defense_flag(value: &str) -> Result<DefenseConfig> {
    let (kind, rest) = value.split_once('=').unwrap_or((value, ""));
    let bad = |msg: &str| VflError::Config(format!("--defense {value:?}: {msg}"));
    match kind {
        "clipping" => Ok(DefenseConfig::Clipping {
            rate: rest.parse().map_err(|_| bad("expected clipping=RATE"))?,
        }),
        "compression" => Ok(DefenseConfig::Compression {
            rate: rest.parse().map_err(|_| bad("expected compression=RATE"))?,
        }),
        "dp" => {
            let parts: Vec<&str> = rest.split(',').collect();
            if parts.len() != 3 {
                return Err(bad("expected dp=EPSILON,DELTA,CLIP_NORM"));
            }
            Ok(DefenseConfig::Dp {
                epsilon: parts[0].parse().map_err(|_| bad("bad epsilon"))?,
                delta: parts[1].parse().map_err(|_| bad("bad delta"))?,
                clip_norm: parts[2].parse().map_err(|_| bad("bad clip_norm"))?,
            })
        }
        "norm_monitor" => Ok(DefenseConfig::NormMonitor {
            policy: if rest.is_empty() { "training_mean".into() } else { rest.into() },
        }),
        other => Err(bad(&format!("unknown defense kind {other:?}"))),
    }
}
