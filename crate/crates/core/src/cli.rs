//! The command implementations behind the `omics-vae` binary.
//!
//! Each command validates its configuration before writing anything and
//! returns what it wrote, so the binary only parses flags and prints.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::data::{
    align_with_labels, impute_with_summary, load_block_map, load_labels, load_matrix, split, synth_generate_raw,
    unit_norm, write_labels, write_matrix, DataSplit, ImputeStrategy, MultiOmicsDataset, OmicsMatrix,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, export_latents, MetricsReport, Strategy, METRIC_COLUMNS};
use crate::model::{BlockSeparation, ModelConfig, Reduction, VaeModel};
use crate::trainer::{EpochRecord, TrainHistory, Trainer};

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const HISTORY_FILE: &str = "history.tsv";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const EVALUATION_FILE: &str = "evaluation.tsv";
pub const LATENTS_FILE: &str = "latents.tsv";
pub const PROVENANCE_FILE: &str = "provenance.json";
pub const SWEEP_FILE: &str = "sweep.tsv";

/// What preprocessing did to one omics matrix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OmicsProvenance {
    pub kind: String,
    pub features_in: usize,
    pub features_out: usize,
    pub missing_cells: usize,
    pub dropped_features: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Provenance {
    pub impute: ImputeStrategy,
    pub normalize: bool,
    pub samples: usize,
    pub omics: Vec<OmicsProvenance>,
}

/// A dataset ready for modelling, plus how it was produced.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub dataset: MultiOmicsDataset,
    pub block_separation: Option<BlockSeparation>,
    pub provenance: Provenance,
}

fn preprocess_matrices(cfg: &RunConfig, raw: Vec<OmicsMatrix>) -> Result<(Vec<OmicsMatrix>, Vec<OmicsProvenance>)> {
    let mut out = Vec::with_capacity(raw.len());
    let mut prov = Vec::with_capacity(raw.len());
    for m in raw {
        let (clean, summary) = impute_with_summary(&m, cfg.preprocess.impute)?;
        prov.push(OmicsProvenance {
            kind: m.kind.as_str().to_string(),
            features_in: m.feature_count(),
            features_out: clean.feature_count(),
            missing_cells: summary.missing_cells,
            dropped_features: summary.dropped_features,
        });
        out.push(clean);
    }
    Ok((out, prov))
}

/// Loads (or generates) the configured dataset and applies imputation and
/// normalization.
pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    cfg.validate()?;
    let (dataset, omics, block_separation) = match &cfg.data {
        Some(d) => {
            let raw = d
                .matrices
                .iter()
                .zip(cfg.kinds())
                .map(|(p, kind)| load_matrix(p, kind))
                .collect::<Result<Vec<_>>>()?;
            let (clean, omics) = preprocess_matrices(cfg, raw)?;
            let block_separation = match &d.block_map {
                Some(path) => Some(BlockSeparation {
                    omics: d.block_map_omics,
                    map: load_block_map(path, clean[d.block_map_omics].feature_ids())?,
                }),
                None => None,
            };
            let labels = load_labels(&d.labels)?;
            (align_with_labels(clean, &labels)?, omics, block_separation)
        }
        None => {
            let raw = synth_generate_raw(&cfg.synth_config())?;
            let (clean, omics) = preprocess_matrices(cfg, raw.omics().to_vec())?;
            (raw.with_omics(clean)?, omics, None)
        }
    };
    let dataset = if cfg.preprocess.normalize { unit_norm(&dataset) } else { dataset };
    let provenance = Provenance {
        impute: cfg.preprocess.impute,
        normalize: cfg.preprocess.normalize,
        samples: dataset.len(),
        omics,
    };
    Ok(PreparedData {
        dataset,
        block_separation,
        provenance,
    })
}

pub fn split_data(cfg: &RunConfig, dataset: &MultiOmicsDataset) -> Result<DataSplit> {
    split(dataset, cfg.split.fractions(), cfg.seed)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn matrix_file_name(k: usize, m: &OmicsMatrix) -> String {
    format!("omics{k}_{}.tsv", m.kind.as_str())
}

fn write_dataset(dir: &Path, dataset: &MultiOmicsDataset) -> Result<Vec<PathBuf>> {
    ensure_dir(dir)?;
    let mut written = Vec::new();
    for (k, m) in dataset.omics().iter().enumerate() {
        let p = dir.join(matrix_file_name(k, m));
        write_matrix(&p, m)?;
        written.push(p);
    }
    let p = dir.join("labels.tsv");
    write_labels(&p, dataset)?;
    written.push(p);
    Ok(written)
}

/// Writes the synthetic matrices and labels without preprocessing.
pub fn cmd_synth(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let synth = cfg.synth_config();
    synth.validate()?;
    let dataset = synth_generate_raw(&synth)?;
    write_dataset(&cfg.out, &dataset)
}

/// Writes imputed, normalized matrices, labels and a provenance summary.
pub fn cmd_preprocess(cfg: &RunConfig) -> Result<Provenance> {
    let prepared = prepare_data(cfg)?;
    write_dataset(&cfg.out, &prepared.dataset)?;
    let json = serde_json::to_string_pretty(&prepared.provenance)
        .map_err(|e| Error::Validation(format!("encoding provenance: {e}")))?;
    write_text(&cfg.out.join(PROVENANCE_FILE), &json)?;
    Ok(prepared.provenance)
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from `final.ckpt` in the output directory.
    pub resume: bool,
    /// Print one line per epoch.
    pub verbose: bool,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: TrainHistory,
    pub best_epoch: usize,
    pub strategy: Strategy,
    /// Test-split metrics of the best-validation model.
    pub test_metrics: MetricsReport,
}

fn model_config_for(cfg: &RunConfig, prepared: &PreparedData) -> Result<ModelConfig> {
    let d = &prepared.dataset;
    let mut mc = cfg.model.model_config(d.omics_dims(), d.class_count())?;
    mc.block_separation = prepared.block_separation.clone();
    mc.validate()?;
    Ok(mc)
}

fn check_resumed(model: &VaeModel, expected: &ModelConfig) -> Result<()> {
    let got = model.config();
    if got.omics_dims != expected.omics_dims || got.class_count != expected.class_count {
        return Err(Error::Config(format!(
            "checkpoint expects omics dims {:?} and {} classes, data has {:?} and {}",
            got.omics_dims, got.class_count, expected.omics_dims, expected.class_count
        )));
    }
    Ok(())
}

fn resolve_strategy(cfg: &RunConfig, model: &VaeModel) -> Result<Strategy> {
    Ok(cfg.strategy()?.unwrap_or_else(|| Strategy::default_for(model)))
}

/// Trains end to end, writing final and best checkpoints, the epoch
/// history and the best model's test metrics.
pub fn cmd_train(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainReport> {
    let prepared = prepare_data(cfg)?;
    let mc = model_config_for(cfg, &prepared)?;
    let parts = split_data(cfg, &prepared.dataset)?;
    let final_path = cfg.out.join(FINAL_CHECKPOINT);
    let best_path = cfg.out.join(BEST_CHECKPOINT);

    let (model, history, initial_best) = if opts.resume {
        let (model, history) = load_checkpoint(&final_path)?;
        check_resumed(&model, &mc)?;
        let best = match load_checkpoint(&best_path) {
            Ok((b, h)) => h.records.last().map(|r| (r.epoch, r.val_accuracy, b)),
            Err(_) => None,
        };
        (model, history, best)
    } else {
        (VaeModel::build(mc, cfg.seed)?, TrainHistory::default(), None)
    };
    let strategy = resolve_strategy(cfg, &model)?;
    ensure_dir(&cfg.out)?;

    let mut trainer = Trainer::new(cfg.schedule());
    trainer.strategy = Some(strategy);
    trainer.initial_best = initial_best;
    if opts.verbose {
        trainer.on_epoch = Some(Box::new(|r: &EpochRecord, _: &VaeModel| eprintln!("{}", r.tsv_row())));
    }
    let outcome = trainer.run(model, &parts.train, &parts.val, history)?;
    let (best_epoch, best) = outcome.best;
    let best_history = TrainHistory {
        records: outcome.history.records[..best_epoch.min(outcome.history.len())].to_vec(),
    };
    save_checkpoint(&outcome.model, &outcome.history, &final_path)?;
    save_checkpoint(&best, &best_history, &best_path)?;
    write_text(&cfg.out.join(HISTORY_FILE), &outcome.history.to_tsv())?;

    let test_metrics = evaluate(&best, &parts.test, strategy, cfg.eval_seed())?;
    write_text(
        &cfg.out.join(METRICS_FILE),
        &format!("{}\n{}\n", METRIC_COLUMNS.join("\t"), test_metrics.tsv_fields()),
    )?;
    Ok(TrainReport {
        history: outcome.history,
        best_epoch,
        strategy,
        test_metrics,
    })
}

/// Which part of the data a command runs on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SplitChoice {
    Train,
    Val,
    #[default]
    Test,
    All,
}

impl std::str::FromStr for SplitChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitChoice::Train),
            "val" => Ok(SplitChoice::Val),
            "test" => Ok(SplitChoice::Test),
            "all" => Ok(SplitChoice::All),
            other => Err(Error::Validation(format!("unknown split `{other}` (train, val, test, all)"))),
        }
    }
}

fn select_split(cfg: &RunConfig, dataset: MultiOmicsDataset, choice: SplitChoice) -> Result<MultiOmicsDataset> {
    if choice == SplitChoice::All {
        return Ok(dataset);
    }
    let parts = split_data(cfg, &dataset)?;
    Ok(match choice {
        SplitChoice::Train => parts.train,
        SplitChoice::Val => parts.val,
        _ => parts.test,
    })
}

fn load_for(cfg: &RunConfig, checkpoint: &Path, choice: SplitChoice) -> Result<(VaeModel, MultiOmicsDataset)> {
    let prepared = prepare_data(cfg)?;
    if !checkpoint.exists() {
        return Err(Error::Checkpoint(format!("checkpoint {} not found", checkpoint.display())));
    }
    let (model, _) = load_checkpoint(checkpoint)?;
    let d = &prepared.dataset;
    if model.config().omics_dims != d.omics_dims() || d.class_count() > model.config().class_count {
        return Err(Error::Config(format!(
            "checkpoint expects omics dims {:?} with {} classes, data has {:?} with {}",
            model.config().omics_dims,
            model.config().class_count,
            d.omics_dims(),
            d.class_count()
        )));
    }
    let data = select_split(cfg, prepared.dataset, choice)?;
    Ok((model, data))
}

/// Evaluates a checkpoint with the configured strategy, or with every
/// strategy of the aggregation sweep, and writes `evaluation.tsv`.
pub fn cmd_evaluate(
    cfg: &RunConfig,
    checkpoint: &Path,
    sweep: bool,
    choice: SplitChoice,
) -> Result<Vec<(Strategy, MetricsReport)>> {
    let (model, data) = load_for(cfg, checkpoint, choice)?;
    let strategies: Vec<Strategy> = if sweep {
        Strategy::sweep()
            .into_iter()
            .filter(|s| *s != Strategy::RandomWithIdentity || model.config().use_subset_identity)
            .collect()
    } else {
        vec![resolve_strategy(cfg, &model)?]
    };
    let reports = strategies
        .into_iter()
        .map(|s| Ok((s, evaluate(&model, &data, s, cfg.eval_seed())?)))
        .collect::<Result<Vec<_>>>()?;
    ensure_dir(&cfg.out)?;
    write_text(&cfg.out.join(EVALUATION_FILE), &reports_tsv(&reports))?;
    Ok(reports)
}

/// `strategy` column followed by the metric columns.
pub fn reports_tsv(reports: &[(Strategy, MetricsReport)]) -> String {
    let mut out = format!("strategy\t{}\n", METRIC_COLUMNS.join("\t"));
    for (s, r) in reports {
        writeln!(out, "{s}\t{}", r.tsv_fields()).expect("write to String");
    }
    out
}

/// Writes the latent means of every sample in the chosen split.
pub fn cmd_embed(cfg: &RunConfig, checkpoint: &Path, choice: SplitChoice) -> Result<PathBuf> {
    let (model, data) = load_for(cfg, checkpoint, choice)?;
    let path = cfg.out.join(LATENTS_FILE);
    export_latents(&model, &data, &path, cfg.latent_aggregation())?;
    Ok(path)
}

/// One configuration of a reduction-factor or subset-count sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub reduction: Reduction,
    pub subset_count: usize,
}

impl SweepPoint {
    pub fn tag(&self) -> String {
        format!("r{}_m{}", self.reduction, self.subset_count)
    }

    /// The run configuration for this point, writing under `base/<tag>`.
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        c.model.reduction = self.reduction.to_string();
        c.model.subset_count = self.subset_count;
        if self.subset_count < 2 {
            c.model.use_subset_identity = false;
            if c.eval.strategy.as_deref() == Some("random_with_identity") {
                c.eval.strategy = None;
            }
        }
        c.out = base.out.join(self.tag());
        c
    }
}

/// Cartesian product of the requested factors, defaulting each axis to the
/// base configuration's value.
pub fn sweep_points(base: &RunConfig, reductions: &[Reduction], subsets: &[usize]) -> Result<Vec<SweepPoint>> {
    let base_r: Reduction = base.model.reduction.parse()?;
    let rs = if reductions.is_empty() { vec![base_r] } else { reductions.to_vec() };
    let ms = if subsets.is_empty() { vec![base.model.subset_count] } else { subsets.to_vec() };
    Ok(rs
        .iter()
        .flat_map(|&reduction| ms.iter().map(move |&subset_count| SweepPoint { reduction, subset_count }))
        .collect())
}

pub const SWEEP_HEADER: &str = "reduction\tsubset_count\tstrategy";

/// Reads a finished run's `metrics.tsv` back as a sweep table row.
pub fn sweep_row(point: &SweepPoint, strategy: &str, run_dir: &Path) -> Result<String> {
    let path = run_dir.join(METRICS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let values = text
        .lines()
        .nth(1)
        .ok_or_else(|| Error::Validation(format!("{} has no metrics row", path.display())))?;
    Ok(format!("{}\t{}\t{strategy}\t{values}", point.reduction, point.subset_count))
}

pub fn write_sweep_table(out: &Path, rows: &[String]) -> Result<PathBuf> {
    ensure_dir(out)?;
    let mut text = format!("{SWEEP_HEADER}\t{}\n", METRIC_COLUMNS.join("\t"));
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    let path = out.join(SWEEP_FILE);
    write_text(&path, &text)?;
    Ok(path)
}

/// Trains every sweep point in turn and writes the combined table.
pub fn cmd_sweep(base: &RunConfig, points: &[SweepPoint], opts: &TrainOptions) -> Result<PathBuf> {
    let configs: Vec<RunConfig> = points.iter().map(|p| p.apply(base)).collect();
    for c in &configs {
        c.validate()?;
    }
    let mut rows = Vec::with_capacity(points.len());
    for (p, c) in points.iter().zip(&configs) {
        let report = cmd_train(c, opts)?;
        rows.push(sweep_row(p, &report.strategy.to_string(), &c.out)?);
    }
    write_sweep_table(&base.out, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_points_cover_product() {
        let base = RunConfig::default();
        let r: Vec<Reduction> = vec!["1_1_1".parse().unwrap(), "8_4_2".parse().unwrap()];
        let pts = sweep_points(&base, &r, &[1, 4]).unwrap();
        assert_eq!(pts.len(), 4);
        assert_eq!(pts[3].tag(), "r8_4_2_m4");
        assert_eq!(sweep_points(&base, &[], &[]).unwrap().len(), 1);
    }

    #[test]
    fn single_subset_point_drops_identity() {
        let mut base = RunConfig::default();
        base.model.subset_count = 4;
        base.model.use_subset_identity = true;
        base.eval.strategy = Some("random_with_identity".into());
        let p = SweepPoint {
            reduction: Reduction::default(),
            subset_count: 1,
        };
        let c = p.apply(&base);
        assert!(!c.model.use_subset_identity);
        assert_eq!(c.eval.strategy, None);
        c.validate().unwrap();
    }

    #[test]
    fn split_choice_parses() {
        assert_eq!("all".parse::<SplitChoice>().unwrap(), SplitChoice::All);
        assert!("everything".parse::<SplitChoice>().is_err());
    }
}
