//! Run configuration read from a TOML file.
//!
//! ```toml
//! seed = 7
//! out = "runs/baseline"
//!
//! [synth]                 # or [data]; never both
//! class_count = 4
//! samples_per_class = 150
//! omics_dims = [60, 24, 12]
//!
//! [data]
//! matrices = ["expr.tsv", "meth.tsv", "mirna.tsv"]
//! kinds = ["gene_expression", "dna_methylation", "mirna_expression"]
//! labels = "labels.tsv"
//! block_map = "meth_blocks.tsv"   # optional, applies to `block_map_omics`
//! block_map_omics = 1
//!
//! [preprocess]
//! impute = "mean"         # mean | zero | drop_features
//! normalize = true
//!
//! [split]
//! val = 0.1
//! test = 0.1
//!
//! [model]
//! subset_count = 4
//! use_subset_identity = true
//! reduction = "8_4_2"
//! latent_dim = 128
//!
//! [schedule]
//! phase1_epochs = 50
//! phase2_epochs = 50
//! phase3_epochs = 100
//! batch_size = 32
//! learning_rate = 1e-3
//!
//! [eval]
//! strategy = "random_with_identity"
//! latent_aggregation = "mean"
//! ```
//!
//! Relative paths in `[data]` resolve against the config file's directory.
//! When neither `[data]` nor `[synth]` is given the default synthetic
//! dataset is used.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{ImputeStrategy, OmicsKind, SplitFractions, SynthConfig};
use crate::error::{Error, Result};
use crate::eval::{Aggregation, Strategy};
use crate::losses::ReconKind;
use crate::model::{ModelConfig, ReconTarget, Reduction};
use crate::trainer::PhaseSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub data: Option<DataSection>,
    pub synth: Option<SynthSection>,
    pub preprocess: PreprocessSection,
    pub split: SplitSection,
    pub model: ModelSection,
    pub schedule: ScheduleSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("out"),
            data: None,
            synth: None,
            preprocess: PreprocessSection::default(),
            split: SplitSection::default(),
            model: ModelSection::default(),
            schedule: ScheduleSection::default(),
            eval: EvalSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub matrices: Vec<PathBuf>,
    #[serde(default)]
    pub kinds: Vec<OmicsKind>,
    pub labels: PathBuf,
    #[serde(default)]
    pub block_map: Option<PathBuf>,
    #[serde(default)]
    pub block_map_omics: usize,
}

/// Synthetic generator settings; unset fields take the generator defaults,
/// and an unset seed falls back to the run seed.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub class_count: Option<usize>,
    pub samples_per_class: Option<usize>,
    pub omics_dims: Option<Vec<usize>>,
    pub informative_fraction: Option<Vec<f64>>,
    pub noise_sigma: Option<f64>,
    pub seed: Option<u64>,
}

impl SynthSection {
    pub fn resolve(&self, run_seed: u64) -> SynthConfig {
        let d = SynthConfig::default();
        let omics_dims = self.omics_dims.clone().unwrap_or(d.omics_dims);
        let informative_fraction = self
            .informative_fraction
            .clone()
            .unwrap_or_else(|| vec![0.5; omics_dims.len()]);
        SynthConfig {
            class_count: self.class_count.unwrap_or(d.class_count),
            samples_per_class: self.samples_per_class.unwrap_or(d.samples_per_class),
            omics_dims,
            informative_fraction,
            noise_sigma: self.noise_sigma.unwrap_or(d.noise_sigma),
            seed: self.seed.unwrap_or(run_seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSection {
    pub impute: ImputeStrategy,
    pub normalize: bool,
}

impl Default for PreprocessSection {
    fn default() -> Self {
        Self {
            impute: ImputeStrategy::Mean,
            normalize: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self { val: 0.1, test: 0.1 }
    }
}

impl SplitSection {
    pub fn fractions(&self) -> SplitFractions {
        SplitFractions {
            train: 1.0 - self.val - self.test,
            val: self.val,
            test: self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Expected per-omics widths; checked against the data when set.
    pub omics_dims: Option<Vec<usize>>,
    pub subset_count: usize,
    pub shuffle_features: bool,
    pub latent_dim: usize,
    pub branch_hidden: usize,
    pub trunk_hidden: usize,
    pub downstream_hidden: usize,
    pub reduction: String,
    pub recon_loss: ReconKind,
    pub recon_target: ReconTarget,
    pub use_subset_identity: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::new(vec![1], 2);
        Self {
            omics_dims: None,
            subset_count: m.subset_count,
            shuffle_features: m.shuffle_features,
            latent_dim: m.latent_dim,
            branch_hidden: m.branch_hidden,
            trunk_hidden: m.trunk_hidden,
            downstream_hidden: m.downstream_hidden,
            reduction: m.reduction.to_string(),
            recon_loss: m.recon_loss,
            recon_target: m.recon_target,
            use_subset_identity: m.use_subset_identity,
        }
    }
}

impl ModelSection {
    /// Model configuration for data with the given widths and class count.
    pub fn model_config(&self, omics_dims: Vec<usize>, class_count: usize) -> Result<ModelConfig> {
        if let Some(expected) = &self.omics_dims {
            if *expected != omics_dims {
                return Err(Error::Config(format!(
                    "model.omics_dims {expected:?} does not match the data {omics_dims:?}"
                )));
            }
        }
        let mut c = ModelConfig::new(omics_dims, class_count);
        c.subset_count = self.subset_count;
        c.shuffle_features = self.shuffle_features;
        c.latent_dim = self.latent_dim;
        c.branch_hidden = self.branch_hidden;
        c.trunk_hidden = self.trunk_hidden;
        c.downstream_hidden = self.downstream_hidden;
        c.reduction = self.reduction.parse()?;
        c.recon_loss = self.recon_loss;
        c.recon_target = self.recon_target;
        c.use_subset_identity = self.use_subset_identity;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub phase3_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        let s = PhaseSchedule::default();
        Self {
            phase1_epochs: s.phase1_epochs,
            phase2_epochs: s.phase2_epochs,
            phase3_epochs: s.phase3_epochs,
            batch_size: s.batch_size,
            learning_rate: s.learning_rate,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Prediction strategy; the model's default when unset.
    pub strategy: Option<String>,
    /// Seed for random-subset draws; the run seed when unset.
    pub seed: Option<u64>,
    pub latent_aggregation: Option<Aggregation>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads and validates a config file, resolving data paths against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let Some(d) = cfg.data.as_mut() {
            let resolve = |p: &mut PathBuf| {
                if p.is_relative() {
                    let joined = base.join(&*p);
                    *p = std::path::absolute(&joined).unwrap_or(joined);
                }
            };
            d.matrices.iter_mut().for_each(resolve);
            resolve(&mut d.labels);
            if let Some(b) = d.block_map.as_mut() {
                resolve(b);
            }
        }
        Ok(cfg)
    }

    pub fn schedule(&self) -> PhaseSchedule {
        PhaseSchedule {
            phase1_epochs: self.schedule.phase1_epochs,
            phase2_epochs: self.schedule.phase2_epochs,
            phase3_epochs: self.schedule.phase3_epochs,
            batch_size: self.schedule.batch_size,
            learning_rate: self.schedule.learning_rate,
            seed: self.seed,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        self.synth.clone().unwrap_or_default().resolve(self.seed)
    }

    pub fn strategy(&self) -> Result<Option<Strategy>> {
        self.eval.strategy.as_deref().map(str::parse).transpose()
    }

    pub fn eval_seed(&self) -> u64 {
        self.eval.seed.unwrap_or(self.seed)
    }

    pub fn latent_aggregation(&self) -> Aggregation {
        self.eval.latent_aggregation.unwrap_or(Aggregation::Mean)
    }

    /// Checks everything that can be checked without reading data.
    pub fn validate(&self) -> Result<()> {
        match (&self.data, &self.synth) {
            (Some(_), Some(_)) => return Err(Error::Config("set either [data] or [synth], not both".into())),
            (Some(d), None) => {
                if d.matrices.is_empty() {
                    return Err(Error::Config("data.matrices is empty".into()));
                }
                if !d.kinds.is_empty() && d.kinds.len() != d.matrices.len() {
                    return Err(Error::Config(format!(
                        "data.kinds has {} entries for {} matrices",
                        d.kinds.len(),
                        d.matrices.len()
                    )));
                }
                let mut paths: Vec<&PathBuf> = d.matrices.iter().chain([&d.labels]).collect();
                paths.extend(d.block_map.iter());
                if let Some(missing) = paths.into_iter().find(|p| !p.exists()) {
                    return Err(Error::Config(format!("data file {} does not exist", missing.display())));
                }
                if d.block_map.is_some() && d.block_map_omics >= d.matrices.len() {
                    return Err(Error::Config(format!(
                        "block_map_omics {} out of range for {} matrices",
                        d.block_map_omics,
                        d.matrices.len()
                    )));
                }
            }
            (None, _) => self.synth_config().validate()?,
        }
        let f = self.split.fractions();
        if !(f.val > 0.0 && f.test > 0.0 && f.train > 0.0) {
            return Err(Error::Config(format!(
                "split fractions val={} test={} must be positive and sum below 1",
                f.val, f.test
            )));
        }
        self.schedule().validate()?;
        self.model.reduction.parse::<Reduction>()?;
        let strategy = self.strategy()?;
        if strategy == Some(Strategy::RandomWithIdentity) && !self.model.use_subset_identity {
            return Err(Error::Config("random_with_identity needs model.use_subset_identity".into()));
        }
        // Width and count checks that do not depend on the data.
        let dims = self.model.omics_dims.clone().unwrap_or_else(|| vec![self.model.subset_count.max(1)]);
        self.model.model_config(dims, 2)?.validate()?;
        Ok(())
    }

    pub fn kinds(&self) -> Vec<OmicsKind> {
        match &self.data {
            Some(d) if !d.kinds.is_empty() => d.kinds.clone(),
            Some(d) if d.matrices.len() == 3 => {
                vec![OmicsKind::GeneExpression, OmicsKind::DnaMethylation, OmicsKind::MirnaExpression]
            }
            Some(d) => vec![OmicsKind::Generic; d.matrices.len()],
            None => Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_uses_defaults() {
        let c = RunConfig::from_toml("").unwrap();
        assert_eq!(c, RunConfig::default());
        c.validate().unwrap();
        assert_eq!(c.schedule(), PhaseSchedule::default());
        assert_eq!(c.synth_config().omics_dims, vec![60, 24, 12]);
    }

    #[test]
    fn sections_parse() {
        let c = RunConfig::from_toml(
            r#"
            seed = 3
            [synth]
            class_count = 5
            [model]
            subset_count = 4
            use_subset_identity = true
            reduction = "8_4_2"
            recon_loss = "bce"
            [schedule]
            phase1_epochs = 1
            [eval]
            strategy = "sum"
            "#,
        )
        .unwrap();
        c.validate().unwrap();
        assert_eq!(c.synth_config().class_count, 5);
        assert_eq!(c.synth_config().seed, 3);
        let m = c.model.model_config(vec![60, 24, 12], 5).unwrap();
        assert_eq!(m.reduction, Reduction { encoder: 8, decoder: 4, downstream: 2 });
        assert_eq!(m.recon_loss, ReconKind::Bce);
        assert_eq!(c.strategy().unwrap(), Some(Strategy::Aggregate(Aggregation::Sum)));
        assert_eq!(c.schedule().phase1_epochs, 1);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for text in [
            "bogus = 1",
            "[synth]\nclass_count = 0",
            "[schedule]\nlearning_rate = 0.0",
            "[model]\nreduction = \"8_4\"",
            "[model]\nuse_subset_identity = true",
            "[eval]\nstrategy = \"random_with_identity\"",
            "[split]\nval = 0.6\ntest = 0.5",
            "[data]\nmatrices = [\"/nonexistent.tsv\"]\nlabels = \"/nonexistent_labels.tsv\"",
        ] {
            let parsed = RunConfig::from_toml(text);
            assert!(parsed.and_then(|c| c.validate()).is_err(), "{text}");
        }
    }

    #[test]
    fn data_dims_must_match_model_section() {
        let mut s = ModelSection::default();
        s.omics_dims = Some(vec![10, 5]);
        assert!(s.model_config(vec![10, 6], 3).is_err());
        assert!(s.model_config(vec![10, 5], 3).is_ok());
    }
}
