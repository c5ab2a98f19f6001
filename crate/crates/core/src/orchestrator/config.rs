//! Run configuration: a flat TOML document plus ablation switches.

use crate::imaging::QualityTier;
use crate::nn::ModelSpec;
use crate::partition::PlanConfig;
use crate::privacy::{Composer, PrivacyConfig};
use crate::server::{DistillConfig, INITIAL_WEIGHTS};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("cannot parse config {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("unknown ablation '{0}'")]
    UnknownAblation(String),
}

/// Components that can be switched off, one per ablation row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Images degraded by a random tier instead of their client's tier.
    QualityPartition,
    /// Every tier runs the medium architecture.
    HierarchicalArch,
    /// No feature noise, no clipping, no secure aggregation.
    Privacy,
    /// Quality weights pinned at 1.
    WeightedAggregation,
    /// Proximal coefficient forced to 0.
    Fedprox,
    /// Server parameter momentum forced to 0.
    Momentum,
    /// Server trained on cross-entropy alone.
    Distillation,
    /// Plain averaging instead of masked sums.
    SecureAgg,
    /// One noise level and one budget cap for all tiers.
    QualityCalibratedPrivacy,
}

impl Ablation {
    pub const ALL: [Ablation; 9] = [
        Ablation::QualityPartition,
        Ablation::HierarchicalArch,
        Ablation::Privacy,
        Ablation::WeightedAggregation,
        Ablation::Fedprox,
        Ablation::Momentum,
        Ablation::Distillation,
        Ablation::SecureAgg,
        Ablation::QualityCalibratedPrivacy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::QualityPartition => "quality_partition",
            Ablation::HierarchicalArch => "hierarchical_arch",
            Ablation::Privacy => "privacy",
            Ablation::WeightedAggregation => "weighted_aggregation",
            Ablation::Fedprox => "fedprox",
            Ablation::Momentum => "momentum",
            Ablation::Distillation => "distillation",
            Ablation::SecureAgg => "secure_agg",
            Ablation::QualityCalibratedPrivacy => "quality_calibrated_privacy",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s.trim())
            .ok_or_else(|| ConfigError::UnknownAblation(s.to_string()))
    }
}

/// A named ablation experiment: which mode it runs in and what it disables.
#[derive(Clone, Copy, Debug)]
pub struct AblationRow {
    pub table: &'static str,
    pub row: &'static str,
    pub privacy_mode: bool,
    pub ablations: &'static [Ablation],
}

/// Component-study rows (standard mode) and privacy-study rows (privacy mode).
pub const ABLATION_ROWS: [AblationRow; 14] = [
    AblationRow { table: "components", row: "Full", privacy_mode: false, ablations: &[] },
    AblationRow { table: "components", row: "w/o quality-aware data partition", privacy_mode: false, ablations: &[Ablation::QualityPartition] },
    AblationRow { table: "components", row: "w/o hierarchical model architecture", privacy_mode: false, ablations: &[Ablation::HierarchicalArch] },
    AblationRow { table: "components", row: "w/o privacy protection", privacy_mode: false, ablations: &[Ablation::Privacy] },
    AblationRow { table: "components", row: "w/o quality-weighted aggregation", privacy_mode: false, ablations: &[Ablation::WeightedAggregation] },
    AblationRow { table: "components", row: "w/o FedProx regularization", privacy_mode: false, ablations: &[Ablation::Fedprox] },
    AblationRow { table: "components", row: "w/o server momentum", privacy_mode: false, ablations: &[Ablation::Momentum] },
    AblationRow { table: "components", row: "w/o knowledge distillation", privacy_mode: false, ablations: &[Ablation::Distillation] },
    AblationRow { table: "privacy", row: "Full (privacy mode)", privacy_mode: true, ablations: &[] },
    AblationRow { table: "privacy", row: "w/o quality-calibrated privacy", privacy_mode: true, ablations: &[Ablation::QualityCalibratedPrivacy] },
    AblationRow { table: "privacy", row: "w/o secure aggregation", privacy_mode: true, ablations: &[Ablation::SecureAgg] },
    AblationRow { table: "privacy", row: "w/o private feature extraction", privacy_mode: true, ablations: &[Ablation::Privacy] },
    AblationRow { table: "privacy", row: "w/o server distillation", privacy_mode: true, ablations: &[Ablation::Distillation] },
    AblationRow { table: "privacy", row: "w/o privacy-aware quality weights", privacy_mode: true, ablations: &[Ablation::WeightedAggregation] },
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Idx,
    Synthetic,
}

/// Everything a run depends on. Serialized flat so it doubles as the config
/// file format and as the echo in `run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data_source: DataSource,
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    pub train_limit: usize,
    pub test_limit: usize,
    pub synthetic_train: usize,
    pub synthetic_test: usize,

    pub n_clients: usize,
    pub tier_fractions: [f64; 3],
    pub primary_share: f64,
    pub rounds: usize,
    pub selection_fraction: f64,

    pub privacy: bool,
    pub delta: f64,
    pub sigma_by_tier: [f64; 3],
    pub max_eps_by_tier: [f64; 3],
    pub clip_norm_by_tier: [f64; 3],
    pub initial_budget: f64,
    pub composer: Composer,
    /// Noise level and cap used when calibration per tier is ablated.
    pub uniform_sigma: f64,
    pub uniform_max_eps: f64,

    pub initial_weights: [f64; 3],
    pub alpha: f64,
    pub kd_alpha: f64,
    pub temperature: f64,
    pub beta: f64,
    pub mu_by_tier: [f64; 3],
    pub server_epochs: usize,
    pub server_batch: usize,
    pub server_lr: f64,

    /// Standard-mode compression target per round; the last entry repeats.
    pub compression_schedule: Vec<f64>,
    /// Privacy-mode compression target per tier.
    pub private_compression: [f64; 3],

    pub eval_extractors: bool,
    /// Clients of a tier restart each round from that tier's mean backbone.
    pub sync_tiers: bool,
    pub secure_agg: bool,
    pub secure_tolerance: f64,
    /// Chance that a selected client drops before upload.
    pub dropout_rate: f64,

    pub ablations: Vec<Ablation>,
    pub master_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let privacy = PrivacyConfig::default();
        Self {
            data_source: DataSource::Idx,
            train_images: "data/train-images-idx3-ubyte.gz".into(),
            train_labels: "data/train-labels-idx1-ubyte.gz".into(),
            test_images: "data/test-images-idx3-ubyte.gz".into(),
            test_labels: "data/test-labels-idx1-ubyte.gz".into(),
            train_limit: 5000,
            test_limit: 10000,
            synthetic_train: 1000,
            synthetic_test: 500,
            n_clients: 20,
            tier_fractions: [0.3, 0.4, 0.3],
            primary_share: 0.8,
            rounds: 3,
            selection_fraction: 0.8,
            privacy: false,
            delta: privacy.delta,
            sigma_by_tier: privacy.sigma_by_tier,
            max_eps_by_tier: privacy.max_eps_by_tier,
            clip_norm_by_tier: privacy.clip_norm_by_tier,
            initial_budget: privacy.initial_budget,
            composer: privacy.composer,
            uniform_sigma: 1.3,
            uniform_max_eps: 2.0,
            initial_weights: INITIAL_WEIGHTS,
            alpha: 0.3,
            kd_alpha: 0.5,
            temperature: 2.0,
            beta: 0.9,
            mu_by_tier: crate::client::DEFAULT_MU,
            server_epochs: 5,
            server_batch: 64,
            server_lr: 0.01,
            compression_schedule: vec![1.0, 0.25, 0.15],
            private_compression: [0.05, 0.10, 0.20],
            eval_extractors: true,
            sync_tiers: true,
            secure_agg: true,
            secure_tolerance: 0.3,
            dropout_rate: 0.0,
            ablations: Vec::new(),
            master_seed: 42,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        toml::from_str(&text).map_err(|source| ConfigError::Parse { path: path.into(), source })
    }

    /// Resolves relative data paths against `base`.
    pub fn rebase(mut self, base: &Path) -> Self {
        for p in [&mut self.train_images, &mut self.train_labels, &mut self.test_images, &mut self.test_labels] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        self
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn ablated(&self, a: Ablation) -> bool {
        self.ablations.contains(&a)
    }

    pub fn with_ablations(mut self, ablations: &[Ablation]) -> Self {
        for a in ablations {
            if !self.ablations.contains(a) {
                self.ablations.push(*a);
            }
        }
        self.ablations.sort();
        self
    }

    pub fn ablation_tag(&self) -> String {
        if self.ablations.is_empty() {
            "none".into()
        } else {
            self.ablations.iter().map(|a| a.name()).collect::<Vec<_>>().join("+")
        }
    }

    /// Privacy settings after the mode and ablations are applied.
    pub fn privacy_config(&self) -> PrivacyConfig {
        let cfg = PrivacyConfig {
            enabled: self.privacy && !self.ablated(Ablation::Privacy),
            delta: self.delta,
            sigma_by_tier: self.sigma_by_tier,
            max_eps_by_tier: self.max_eps_by_tier,
            clip_norm_by_tier: self.clip_norm_by_tier,
            initial_budget: self.initial_budget,
            composer: self.composer,
        };
        if self.ablated(Ablation::QualityCalibratedPrivacy) {
            cfg.uniform(self.uniform_sigma, self.uniform_max_eps)
        } else {
            cfg
        }
    }

    pub fn plan_config(&self) -> PlanConfig {
        PlanConfig {
            n_clients: self.n_clients,
            tier_fractions: self.tier_fractions,
            primary_share: self.primary_share,
            quality_partition: !self.ablated(Ablation::QualityPartition),
            ..PlanConfig::default()
        }
    }

    pub fn model_spec(&self, tier: QualityTier) -> ModelSpec {
        if self.ablated(Ablation::HierarchicalArch) {
            ModelSpec { tier: Some(tier), ..ModelSpec::medium() }
        } else {
            ModelSpec::for_tier(tier)
        }
    }

    pub fn mu(&self) -> [f64; 3] {
        if self.ablated(Ablation::Fedprox) {
            [0.0; 3]
        } else {
            self.mu_by_tier
        }
    }

    pub fn server_beta(&self) -> f64 {
        if self.ablated(Ablation::Momentum) {
            0.0
        } else {
            self.beta
        }
    }

    pub fn distill(&self) -> DistillConfig {
        DistillConfig {
            alpha: if self.ablated(Ablation::Distillation) { 0.0 } else { self.kd_alpha },
            temperature: self.temperature,
            epochs: self.server_epochs,
            batch: self.server_batch,
            lr: self.server_lr,
            ..DistillConfig::default()
        }
    }

    pub fn weighted(&self) -> bool {
        !self.ablated(Ablation::WeightedAggregation)
    }

    pub fn use_secure_agg(&self) -> bool {
        self.secure_agg && !self.ablated(Ablation::SecureAgg) && !self.ablated(Ablation::Privacy)
    }

    /// Compression target for a tier in a given round (1-based).
    pub fn compression_target(&self, tier: QualityTier, round: usize) -> f64 {
        if self.privacy {
            return self.private_compression[tier.index()];
        }
        let s = &self.compression_schedule;
        s[(round.max(1) - 1).min(s.len() - 1)]
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.n_clients == 0 {
            return bad("n_clients must be positive".into());
        }
        if !(self.selection_fraction > 0.0 && self.selection_fraction <= 1.0) {
            return bad(format!("selection_fraction {} outside (0, 1]", self.selection_fraction));
        }
        if self.tier_fractions.iter().any(|f| *f < 0.0) || (self.tier_fractions.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return bad(format!("tier_fractions {:?} must be non-negative and sum to 1", self.tier_fractions));
        }
        if self.compression_schedule.is_empty() {
            return bad("compression_schedule needs at least one entry".into());
        }
        let targets = self.compression_schedule.iter().chain(&self.private_compression);
        if targets.clone().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return bad("compression targets must lie in (0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.kd_alpha) {
            return bad("alpha and kd_alpha must lie in [0, 1]".into());
        }
        if self.temperature <= 0.0 || self.beta < 0.0 || self.server_lr <= 0.0 || self.server_batch == 0 {
            return bad("temperature, server_lr and server_batch must be positive and beta non-negative".into());
        }
        if self.initial_weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return bad("initial_weights must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.dropout_rate) || !(0.0..=1.0).contains(&self.secure_tolerance) {
            return bad("dropout_rate and secure_tolerance must lie in [0, 1]".into());
        }
        if self.mu_by_tier.iter().any(|m| *m < 0.0) {
            return bad("mu_by_tier must be non-negative".into());
        }
        if self.data_source == DataSource::Synthetic && (self.synthetic_train == 0 || self.synthetic_test == 0) {
            return bad("synthetic_train and synthetic_test must be positive".into());
        }
        PrivacyConfig { enabled: true, ..self.privacy_config() }.validate().map_err(ConfigError::Invalid)
    }
}

/// Parses a comma-separated ablation list.
pub fn parse_ablations(list: &str) -> Result<Vec<Ablation>, ConfigError> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg: RunConfig = toml::from_str("rounds = 5\nprivacy = true\nablations = [\"fedprox\"]\n").unwrap();
        assert_eq!(cfg.rounds, 5);
        assert!(cfg.privacy_config().enabled);
        assert_eq!(cfg.mu(), [0.0; 3]);
        assert_eq!(cfg.n_clients, 20);
        assert!(toml::from_str::<RunConfig>("roundz = 5").is_err());
    }

    #[test]
    fn ablation_names_parse() {
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        }
        assert_eq!(
            parse_ablations("fedprox, momentum").unwrap(),
            vec![Ablation::Fedprox, Ablation::Momentum]
        );
        assert!(matches!(parse_ablations("fedprox,warp"), Err(ConfigError::UnknownAblation(_))));
    }

    #[test]
    fn every_row_has_a_unique_switch_combination() {
        let rows = ABLATION_ROWS;
        assert_eq!(rows.len(), 14);
        let combos: BTreeSet<(bool, Vec<Ablation>)> = rows.iter().map(|r| (r.privacy_mode, r.ablations.to_vec())).collect();
        assert_eq!(combos.len(), rows.len());
        for a in Ablation::ALL {
            assert!(rows.iter().any(|r| r.ablations == [a]), "{a} maps to no row");
        }
    }

    #[test]
    fn each_switch_changes_its_setting() {
        let base = RunConfig { privacy: true, ..RunConfig::default() };
        let with = |a: Ablation| base.clone().with_ablations(&[a]);
        assert!(!with(Ablation::QualityPartition).plan_config().quality_partition);
        assert_eq!(with(Ablation::HierarchicalArch).model_spec(QualityTier::Low).layers, ModelSpec::medium().layers);
        assert!(!with(Ablation::Privacy).privacy_config().enabled);
        assert!(!with(Ablation::Privacy).use_secure_agg());
        assert!(!with(Ablation::WeightedAggregation).weighted());
        assert_eq!(with(Ablation::Fedprox).mu(), [0.0; 3]);
        assert_eq!(with(Ablation::Momentum).server_beta(), 0.0);
        assert_eq!(with(Ablation::Distillation).distill().alpha, 0.0);
        assert!(!with(Ablation::SecureAgg).use_secure_agg());
        let uniform = with(Ablation::QualityCalibratedPrivacy).privacy_config();
        assert_eq!(uniform.sigma_by_tier, [1.3; 3]);
        assert_eq!(uniform.max_eps_by_tier, [2.0; 3]);
        assert!(base.use_secure_agg() && base.weighted());
    }

    #[test]
    fn compression_schedule_repeats_last_entry() {
        let cfg = RunConfig::default();
        let t: Vec<f64> = (1..=5).map(|r| cfg.compression_target(QualityTier::High, r)).collect();
        assert_eq!(t, vec![1.0, 0.25, 0.15, 0.15, 0.15]);
        let private = RunConfig { privacy: true, ..cfg };
        assert_eq!(private.compression_target(QualityTier::Low, 1), 0.05);
    }

    #[test]
    fn invalid_values_rejected() {
        let bad = RunConfig { selection_fraction: 0.0, ..RunConfig::default() };
        assert!(bad.validate().is_err());
        let bad = RunConfig { sigma_by_tier: [1.0, 0.0, 1.0], ..RunConfig::default() };
        assert!(bad.validate().is_err());
        let bad = RunConfig { tier_fractions: [0.5, 0.5, 0.5], ..RunConfig::default() };
        assert!(bad.validate().is_err());
    }
}
