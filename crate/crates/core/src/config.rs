//! Experiment configuration, loaded from TOML.
//!
//! ```toml
//! seed = 7
//!
//! [federation]
//! rounds = 30
//! clients = 5
//! mode = "cl_ff_nm"
//! ```
//!
//! `seed` and `federation.{rounds, clients, mode}` are required; every other
//! key has a default. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::PartitionMode;
use crate::objective::{ContrastConfig, NeighborConfig, TrainingMode};
use crate::privacy::{EncryptionSpec, SignMaskMode};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    Iid,
    Noniid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub num_classes: usize,
    pub per_class_n: usize,
    pub dim: usize,
    pub separation: f64,
    pub noise_sigma: f64,
    pub aug_sigma: f64,
    pub drop_prob: f64,
    pub partition: PartitionKind,
    pub classes_per_client: usize,
    pub cover_all: bool,
    /// Load this FCLD file instead of generating data.
    pub dataset_path: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            num_classes: 10,
            per_class_n: 200,
            dim: 32,
            separation: 4.0,
            noise_sigma: 1.0,
            aug_sigma: 0.5,
            drop_prob: 0.1,
            partition: PartitionKind::Noniid,
            classes_per_client: 2,
            cover_all: true,
            dataset_path: None,
        }
    }
}

impl DataConfig {
    pub fn partition_mode(&self) -> PartitionMode {
        match self.partition {
            PartitionKind::Iid => PartitionMode::Iid,
            PartitionKind::Noniid => PartitionMode::NonIid {
                classes_per_client: self.classes_per_client,
                cover_all: self.cover_all,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    pub rounds: u32,
    pub clients: u32,
    pub mode: TrainingMode,
    #[serde(default = "defaults::beta")]
    pub beta: f64,
    #[serde(default = "defaults::local_epochs")]
    pub local_epochs: u32,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: usize,
    #[serde(default = "defaults::lr")]
    pub lr: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "defaults::momentum")]
    pub momentum: f64,
    /// Whether clients upload encrypted features at all.
    #[serde(default = "defaults::yes")]
    pub upload_features: bool,
}

mod defaults {
    pub fn beta() -> f64 {
        1.0
    }
    pub fn local_epochs() -> u32 {
        1
    }
    pub fn batch_size() -> usize {
        32
    }
    pub fn lr() -> f64 {
        0.05
    }
    pub fn momentum() -> f64 {
        0.99
    }
    pub fn yes() -> bool {
        true
    }
}

impl FederationConfig {
    pub fn new(rounds: u32, clients: u32, mode: TrainingMode) -> Self {
        FederationConfig {
            rounds,
            clients,
            mode,
            beta: defaults::beta(),
            local_epochs: defaults::local_epochs(),
            batch_size: defaults::batch_size(),
            lr: defaults::lr(),
            weight_decay: 0.0,
            momentum: defaults::momentum(),
            upload_features: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![64, 64],
            feature_dim: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BankConfig {
    /// Local bank capacity K.
    pub capacity: usize,
    /// Encrypted features uploaded per round, K_up. Matches `capacity` so
    /// every source in the fused bank has the same size.
    pub upload_size: usize,
}

impl Default for BankConfig {
    fn default() -> Self {
        BankConfig {
            capacity: 256,
            upload_size: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub tau: f64,
    pub exclude_local: bool,
    pub tau_nm: f64,
    pub lambda: f64,
    pub neighbors: usize,
    pub candidate_count: usize,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        let c = ContrastConfig::default();
        let n = NeighborConfig::default();
        ObjectiveConfig {
            tau: c.tau,
            exclude_local: c.exclude_local,
            tau_nm: n.tau_nm,
            lambda: n.lambda,
            neighbors: n.neighbors,
            candidate_count: n.candidate_count,
        }
    }
}

impl ObjectiveConfig {
    pub fn contrast(&self) -> ContrastConfig {
        ContrastConfig {
            tau: self.tau,
            exclude_local: self.exclude_local,
        }
    }

    pub fn neighbor(&self) -> NeighborConfig {
        NeighborConfig {
            neighbors: self.neighbors,
            tau_nm: self.tau_nm,
            candidate_count: self.candidate_count,
            lambda: self.lambda,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrivacyConfig {
    pub k_mix: usize,
    pub lambda_floor: f64,
    pub sign_mask: SignMaskMode,
}

impl Default for PrivacyConfig {
    fn default() -> Self {
        let s = EncryptionSpec::default();
        PrivacyConfig {
            k_mix: s.k_mix,
            lambda_floor: s.lambda_floor,
            sign_mask: s.sign_mask,
        }
    }
}

impl PrivacyConfig {
    pub fn spec(&self) -> EncryptionSpec {
        EncryptionSpec {
            k_mix: self.k_mix,
            lambda_floor: self.lambda_floor,
            sign_mask: self.sign_mask,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub knn_k: usize,
    pub linear_epochs: usize,
    pub linear_lr: f64,
    /// Held-out test samples per class for the probes.
    pub holdout_per_class: usize,
    /// Queries sampled per client per round for empirical FN ratios.
    pub fn_queries: usize,
    /// Run the linear probe every round (the kNN probe always runs).
    pub linear_every_round: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            knn_k: 10,
            linear_epochs: 30,
            linear_lr: 0.5,
            holdout_per_class: 50,
            fn_queries: 100,
            linear_every_round: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub federation: FederationConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub bank: BankConfig,
    #[serde(default)]
    pub objective: ObjectiveConfig,
    #[serde(default)]
    pub privacy: PrivacyConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ExperimentConfig {
    /// Defaults throughout, with the given round budget, client count and mode.
    pub fn new(seed: u64, rounds: u32, clients: u32, mode: TrainingMode) -> Self {
        ExperimentConfig {
            seed,
            federation: FederationConfig::new(rounds, clients, mode),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            bank: BankConfig::default(),
            objective: ObjectiveConfig::default(),
            privacy: PrivacyConfig::default(),
            probe: ProbeConfig::default(),
            output: OutputConfig::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::at_path(path))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Layer widths `[p, hidden…, d]`.
    pub fn encoder_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.data.dim];
        dims.extend(&self.model.hidden);
        dims.push(self.model.feature_dim);
        dims
    }

    /// Fingerprint of every knob that affects training; output locations
    /// are excluded.
    pub fn digest(&self) -> u64 {
        let mut c = self.clone();
        c.output = OutputConfig::default();
        c.data.dataset_path = None;
        crate::rng::fnv1a64(c.to_toml_string().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        let f = &self.federation;
        if f.clients == 0 {
            return bad("federation.clients must be >= 1".into());
        }
        if !(f.beta > 0.0 && f.beta <= 1.0) {
            return bad(format!("federation.beta = {} must be in (0, 1]", f.beta));
        }
        if f.local_epochs == 0 {
            return bad("federation.local_epochs must be >= 1".into());
        }
        if f.batch_size == 0 {
            return bad("federation.batch_size must be >= 1".into());
        }
        if !(f.lr >= 0.0 && f.lr.is_finite()) {
            return bad(format!("federation.lr = {} must be >= 0", f.lr));
        }
        if !(f.weight_decay >= 0.0 && f.weight_decay.is_finite()) {
            return bad(format!("federation.weight_decay = {} must be >= 0", f.weight_decay));
        }
        if !(0.0..=1.0).contains(&f.momentum) {
            return bad(format!("federation.momentum = {} must be in [0, 1]", f.momentum));
        }
        let d = &self.data;
        if d.dataset_path.is_none() {
            if d.num_classes < 2 {
                return bad("data.num_classes must be >= 2".into());
            }
            if d.per_class_n == 0 || d.dim == 0 {
                return bad("data.per_class_n and data.dim must be positive".into());
            }
            if d.separation.is_nan() || d.separation <= 0.0 || d.noise_sigma.is_nan() || d.noise_sigma < 0.0 {
                return bad("data.separation must be > 0 and data.noise_sigma >= 0".into());
            }
            if d.partition == PartitionKind::Noniid
                && (d.classes_per_client == 0 || d.classes_per_client > d.num_classes)
            {
                return bad(format!(
                    "data.classes_per_client = {} must be in 1..={}",
                    d.classes_per_client, d.num_classes
                ));
            }
        }
        if d.aug_sigma.is_nan() || d.aug_sigma < 0.0 || !(0.0..1.0).contains(&d.drop_prob) {
            return bad("data.aug_sigma must be >= 0 and data.drop_prob in [0, 1)".into());
        }
        if self.model.feature_dim == 0 || self.model.hidden.contains(&0) {
            return bad("model widths must be positive".into());
        }
        if self.bank.capacity == 0 || self.bank.upload_size == 0 {
            return bad("bank.capacity and bank.upload_size must be positive".into());
        }
        self.objective
            .contrast()
            .validate()
            .map_err(|e| Error::Config(format!("objective: {e}")))?;
        self.objective
            .neighbor()
            .validate()
            .map_err(|e| Error::Config(format!("objective: {e}")))?;
        self.privacy
            .spec()
            .validate()
            .map_err(|e| Error::Config(format!("privacy: {e}")))?;
        let p = &self.probe;
        if p.knn_k == 0 || p.holdout_per_class == 0 || p.fn_queries == 0 {
            return bad("probe.knn_k, probe.holdout_per_class and probe.fn_queries must be positive".into());
        }
        if p.linear_lr.is_nan() || p.linear_lr <= 0.0 {
            return bad("probe.linear_lr must be > 0".into());
        }
        Ok(())
    }
}
