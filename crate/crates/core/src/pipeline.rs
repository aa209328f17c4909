//! Experiment configuration and the end-to-end per-seed pipeline.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adaptation::{
    adapt, evaluate_pool, featurize, pretrain_base, train_dense_head, FeatureSample, HeadTrainConfig,
    HeadTrainReport, PhaseSchedule, PretrainConfig, RoundConfig, RoundReport,
};
use crate::backbone::ExtractorSpec;
use crate::error::{Error, Result};
use crate::io::HistoryRecord;
use crate::metrics::MetricReport;
use crate::model::{DenseTrfModel, ModelConfig};
use crate::params::ParameterSet;
use crate::synthdata::{make_shift_benchmark, BenchmarkBundle, BenchmarkSizes, DomainSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Full,
    NoSa,
    SaNoAdapt,
    NoConcat,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [Self::Full, Self::NoSa, Self::SaNoAdapt, Self::NoConcat];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoSa => "no_sa",
            Self::SaNoAdapt => "sa_no_adapt",
            Self::NoConcat => "no_concat",
        }
    }

    pub fn uses_pretraining(&self) -> bool {
        !matches!(self, Self::NoSa)
    }

    pub fn uses_adaptation(&self) -> bool {
        matches!(self, Self::Full | Self::NoConcat)
    }

    pub fn uses_recon_loss(&self) -> bool {
        !matches!(self, Self::NoSa)
    }

    /// Model configuration for this variant.
    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        cfg.head.concat = !matches!(self, Self::NoConcat);
        cfg
    }
}

impl std::str::FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

/// Where samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
#[allow(clippy::large_enum_variant)]
pub enum DataConfig {
    /// Generated in memory from domain specs.
    Synthetic {
        #[serde(default = "DomainSpec::default_source")]
        source: DomainSpec,
        #[serde(default = "DomainSpec::default_target")]
        target: DomainSpec,
        #[serde(default)]
        sizes: BenchmarkSizes,
    },
    /// A dataset directory written by `generate`.
    Directory { path: PathBuf },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic {
            source: DomainSpec::default_source(),
            target: DomainSpec::default_target(),
            sizes: BenchmarkSizes::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub extractor: ExtractorSpec,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub round: RoundConfig,
    pub schedule: PhaseSchedule,
    pub head_train: HeadTrainConfig,
    pub data: DataConfig,
    pub seeds: Vec<u64>,
    pub variant: AblationVariant,
    pub output_dir: PathBuf,
    /// Held-out labeled source samples used for validation during head
    /// training, taken from the end of the labeled pool.
    pub validation_samples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            extractor: ExtractorSpec::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            round: RoundConfig::default(),
            schedule: PhaseSchedule::default(),
            head_train: HeadTrainConfig::default(),
            data: DataConfig::default(),
            seeds: vec![0, 1, 2, 3, 4],
            variant: AblationVariant::Full,
            output_dir: PathBuf::from("runs"),
            validation_samples: 4,
        }
    }
}

impl ExperimentConfig {
    /// Reduced-cost settings used by the test suite: a narrower model and
    /// shorter schedules, same structure.
    pub fn quick() -> Self {
        let mut cfg = Self::default();
        cfg.model.slots.num_slots = 4;
        cfg.model.slots.slot_dim = 32;
        cfg.model.slots.adapted_dim = 32;
        cfg.model.slots.mlp_hidden = 64;
        cfg.model.head.adapter_hidden = 64;
        cfg.model.head.classifier_hidden = 64;
        cfg.pretrain.steps = 400;
        cfg.round.steps_per_round = 20;
        cfg.round.total_rounds = 10;
        cfg.round.batch_size = 2;
        cfg.pretrain.batch_size = 2;
        cfg.schedule = PhaseSchedule {
            phase1_iters: 200,
            phase2_iters: 600,
            phase3_iters: 200,
        };
        cfg.head_train.batch_size = 2;
        cfg.head_train.eval_every = 200;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be non-empty".into()));
        }
        self.extractor.validate()?;
        self.model.slots.validate()?;
        self.round.validate()?;
        if self.model.feature_channels != self.extractor.out_channels {
            return Err(Error::Config(format!(
                "model.feature_channels ({}) must equal extractor.out_channels ({})",
                self.model.feature_channels, self.extractor.out_channels
            )));
        }
        if self.model.head.num_classes == 0 {
            return Err(Error::Config("num_classes must be at least 1".into()));
        }
        if let DataConfig::Directory { path } = &self.data {
            if !path.exists() {
                return Err(Error::MissingPrerequisite(path.clone()));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Hex SHA-256 of the resolved configuration.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn load_data(&self) -> Result<BenchmarkBundle> {
        match &self.data {
            DataConfig::Synthetic { source, target, sizes } => make_shift_benchmark(source, target, *sizes),
            DataConfig::Directory { path } => BenchmarkBundle::read(path),
        }
    }
}

/// Features of every pool, computed once.
#[derive(Debug, Clone)]
pub struct FeaturePools {
    pub source_labeled: Vec<FeatureSample>,
    pub validation: Vec<FeatureSample>,
    pub source_unlabeled: Vec<FeatureSample>,
    pub target_unlabeled: Vec<FeatureSample>,
    pub target_test: Vec<FeatureSample>,
    pub source_test: Vec<FeatureSample>,
}

pub const SOURCE_DOMAIN: usize = 0;
pub const TARGET_DOMAIN: usize = 1;

impl FeaturePools {
    pub fn new(bundle: &BenchmarkBundle, extractor: &ExtractorSpec, validation_samples: usize) -> Result<Self> {
        let mut labeled = featurize(&bundle.source_labeled, extractor, SOURCE_DOMAIN)?;
        let keep = labeled.len().saturating_sub(validation_samples).max(1);
        let validation = labeled.split_off(keep.min(labeled.len()));
        Ok(Self {
            source_labeled: labeled,
            validation,
            source_unlabeled: featurize(&bundle.source_unlabeled, extractor, SOURCE_DOMAIN)?,
            target_unlabeled: featurize(&bundle.target_unlabeled, extractor, TARGET_DOMAIN)?,
            target_test: featurize(&bundle.target_test, extractor, TARGET_DOMAIN)?,
            source_test: featurize(&bundle.source_test, extractor, SOURCE_DOMAIN)?,
        })
    }

    /// Multi-domain pool for the base branch: source and target unlabeled.
    pub fn base_pool(&self) -> Vec<FeatureSample> {
        self.source_unlabeled
            .iter()
            .chain(&self.target_unlabeled)
            .cloned()
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct VariantRun {
    pub variant: AblationVariant,
    pub seed: u64,
    pub theta: ParameterSet,
    pub head: ParameterSet,
    pub history: Vec<HistoryRecord>,
    pub rounds: Vec<RoundReport>,
    pub head_report: HeadTrainReport,
    pub target_test: MetricReport,
    pub source_test: MetricReport,
}

/// Base-pretrained parameters for one seed; shared by the variants that use
/// them.
pub fn pretrained_theta(
    cfg: &ExperimentConfig,
    model: &DenseTrfModel,
    pools: &FeaturePools,
    seed: u64,
    history: &mut Vec<HistoryRecord>,
) -> Result<ParameterSet> {
    let theta = model.init_theta(seed);
    pretrain_base(model, theta, &pools.source_unlabeled, &cfg.pretrain, seed, history)
}

/// Supervised stage of one variant: a fresh head trained on the labeled
/// source pool while `theta` is fine-tuned in place.
pub fn train_variant_head(
    cfg: &ExperimentConfig,
    pools: &FeaturePools,
    variant: AblationVariant,
    seed: u64,
    theta: &mut ParameterSet,
    history: &mut Vec<HistoryRecord>,
) -> Result<(ParameterSet, HeadTrainReport)> {
    let model = DenseTrfModel::new(variant.model_config(&cfg.model));
    model.check_theta(theta)?;
    let mut head = model.init_head(seed.wrapping_add(0x1000));
    let mut head_cfg = cfg.head_train.clone();
    if !variant.uses_recon_loss() {
        head_cfg.lambda = 0.0;
    }
    let report = train_dense_head(
        &model,
        theta,
        &mut head,
        &pools.source_labeled,
        Some(&pools.validation),
        &cfg.schedule,
        &head_cfg,
        seed,
        history,
        variant.uses_recon_loss(),
    )?;
    Ok((head, report))
}

/// Runs one variant for one seed. `pretrained` is reused when given
/// (its history is not repeated).
pub fn run_variant(
    cfg: &ExperimentConfig,
    pools: &FeaturePools,
    variant: AblationVariant,
    seed: u64,
    pretrained: Option<&ParameterSet>,
) -> Result<VariantRun> {
    let model = DenseTrfModel::new(variant.model_config(&cfg.model));
    let mut history = Vec::new();
    let mut theta = if variant.uses_pretraining() {
        match pretrained {
            Some(t) => {
                model.check_theta(t)?;
                t.clone()
            }
            None => pretrained_theta(cfg, &model, pools, seed, &mut history)?,
        }
    } else {
        model.init_theta(seed)
    };
    let mut rounds = Vec::new();
    if variant.uses_adaptation() {
        let base_pool = pools.base_pool();
        let (merged, reports) = adapt(
            &model,
            &theta,
            &base_pool,
            &pools.target_unlabeled,
            &cfg.round,
            seed,
            &mut history,
        )?;
        theta = merged;
        rounds = reports;
    }
    let (head, head_report) = train_variant_head(cfg, pools, variant, seed, &mut theta, &mut history)?;
    let target_test = evaluate_pool(&model, &theta, &head, &pools.target_test, seed)?;
    let source_test = evaluate_pool(&model, &theta, &head, &pools.source_test, seed)?;
    Ok(VariantRun {
        variant,
        seed,
        theta,
        head,
        history,
        rounds,
        head_report,
        target_test,
        source_test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = ExperimentConfig::quick();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn omitted_fields_take_defaults() {
        let cfg = ExperimentConfig::from_toml("seeds = [7]\n[round]\ntotal_rounds = 3\n").unwrap();
        assert_eq!(cfg.seeds, vec![7]);
        assert_eq!(cfg.round.total_rounds, 3);
        assert_eq!(cfg.round.base_lr, 4e-4);
        assert_eq!(cfg.schedule, PhaseSchedule::default());
    }

    #[test]
    fn hash_changes_with_config() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.seeds = vec![9];
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), a.clone().hash());
    }

    #[test]
    fn empty_seeds_are_rejected() {
        let cfg = ExperimentConfig {
            seeds: vec![],
            ..ExperimentConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn variant_names_round_trip() {
        for v in AblationVariant::ALL {
            assert_eq!(v.as_str().parse::<AblationVariant>().unwrap(), v);
        }
    }
}
