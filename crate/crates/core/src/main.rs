use std::path::PathBuf;
use std::process::{Command, ExitCode};

use clap::{Args, Parser, Subcommand};

use omics_vae::cli::{
    cmd_embed, cmd_evaluate, cmd_preprocess, cmd_sweep, cmd_synth, cmd_train, reports_tsv, sweep_points, sweep_row,
    write_sweep_table, SplitChoice, TrainOptions, BEST_CHECKPOINT, HISTORY_FILE,
};
use omics_vae::config::RunConfig;
use omics_vae::eval::{Aggregation, Strategy};
use omics_vae::model::Reduction;
use omics_vae::{Error, Result};

#[derive(Parser)]
#[command(name = "omics-vae", version, about = "Multi-omics VAE embedding and tumour-type classification")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic dataset (matrices and labels).
    Synth,
    /// Impute and normalize the configured data, with a provenance summary.
    Preprocess,
    /// Run the three training phases.
    Train(TrainArgs),
    /// Score a checkpoint.
    Evaluate(EvalArgs),
    /// Export latent means for every sample.
    Embed(EmbedArgs),
}

#[derive(Args)]
struct ModelOverrides {
    /// Reduction factors as E_D_S, e.g. 8_4_2.
    #[arg(long)]
    reduction: Option<Reduction>,
    /// Number of feature subsets.
    #[arg(long)]
    subsets: Option<usize>,
    /// Append the subset one-hot to the latent.
    #[arg(long)]
    identity: Option<bool>,
    /// Epochs per phase as P1,P2,P3.
    #[arg(long, value_delimiter = ',')]
    epochs: Option<Vec<usize>>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelOverrides,
    /// Continue from the final checkpoint in the output directory.
    #[arg(long)]
    resume: bool,
    /// Train once per reduction setting (comma-separated E_D_S values).
    #[arg(long, value_delimiter = ',')]
    sweep_reduction: Vec<Reduction>,
    /// Train once per subset count (comma-separated).
    #[arg(long, value_delimiter = ',')]
    sweep_subsets: Vec<usize>,
    /// Run sweep points as concurrent child processes.
    #[arg(long)]
    parallel: bool,
    /// Print each epoch's history row to stderr.
    #[arg(short, long)]
    verbose: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to score; defaults to the best-validation checkpoint.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Prediction strategy, e.g. mean, sum, random_subset, subset:2.
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Score every aggregation strategy.
    #[arg(long)]
    sweep: bool,
    /// train, val, test or all.
    #[arg(long, default_value = "test")]
    split: SplitChoice,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "all")]
    split: SplitChoice,
    /// How subset latents are combined: mean, max, min or sum.
    #[arg(long)]
    aggregation: Option<String>,
}

fn parse_aggregation(s: &str) -> Result<Aggregation> {
    match s {
        "mean" => Ok(Aggregation::Mean),
        "max" => Ok(Aggregation::Max),
        "min" => Ok(Aggregation::Min),
        "sum" => Ok(Aggregation::Sum),
        other => Err(Error::Validation(format!("unknown aggregation `{other}`"))),
    }
}

fn apply_model_overrides(cfg: &mut RunConfig, o: &ModelOverrides) -> Result<()> {
    if let Some(r) = o.reduction {
        cfg.model.reduction = r.to_string();
    }
    if let Some(m) = o.subsets {
        cfg.model.subset_count = m;
    }
    if let Some(i) = o.identity {
        cfg.model.use_subset_identity = i;
    }
    if let Some(e) = &o.epochs {
        let [p1, p2, p3] = e[..] else {
            return Err(Error::Validation(format!("--epochs needs three values P1,P2,P3, got {}", e.len())));
        };
        cfg.schedule.phase1_epochs = p1;
        cfg.schedule.phase2_epochs = p2;
        cfg.schedule.phase3_epochs = p3;
    }
    Ok(())
}

fn base_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

/// Runs each sweep point as a child `train` process with its own resolved
/// config and output directory, then collects the table.
fn parallel_sweep(base: &RunConfig, args: &TrainArgs) -> Result<PathBuf> {
    let exe = std::env::current_exe().map_err(|e| Error::io("current executable", e))?;
    let points = sweep_points(base, &args.sweep_reduction, &args.sweep_subsets)?;
    let mut children = Vec::new();
    for p in &points {
        let mut c = p.apply(base);
        c.out = std::path::absolute(&c.out).map_err(|e| Error::io(&c.out, e))?;
        c.validate()?;
        std::fs::create_dir_all(&c.out).map_err(|e| Error::io(&c.out, e))?;
        let cfg_path = c.out.join("run.toml");
        let text = toml::to_string(&c).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(&cfg_path, text).map_err(|e| Error::io(&cfg_path, e))?;
        let child = Command::new(&exe)
            .arg("--config")
            .arg(&cfg_path)
            .arg("train")
            .args(args.resume.then_some("--resume"))
            .spawn()
            .map_err(|e| Error::io(&exe, e))?;
        children.push((p, c, child));
    }
    let mut rows = Vec::new();
    for (p, c, mut child) in children {
        let status = child.wait().map_err(|e| Error::io(&exe, e))?;
        if !status.success() {
            return Err(Error::Validation(format!("sweep run {} failed ({status})", p.tag())));
        }
        let strategy = match c.strategy()? {
            Some(s) => s.to_string(),
            None => {
                let (m, _) = omics_vae::checkpoint::load_checkpoint(&c.out.join(BEST_CHECKPOINT))?;
                Strategy::default_for(&m).to_string()
            }
        };
        rows.push(sweep_row(p, &strategy, &c.out)?);
    }
    write_sweep_table(&base.out, &rows)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = base_config(&cli)?;
    match &cli.command {
        Cmd::Synth => {
            for p in cmd_synth(&cfg)? {
                println!("{}", p.display());
            }
        }
        Cmd::Preprocess => {
            let prov = cmd_preprocess(&cfg)?;
            for o in &prov.omics {
                println!(
                    "{}\tfeatures {} -> {}\tmissing cells {}\tdropped features {}",
                    o.kind, o.features_in, o.features_out, o.missing_cells, o.dropped_features
                );
            }
        }
        Cmd::Train(args) => {
            apply_model_overrides(&mut cfg, &args.model)?;
            let opts = TrainOptions {
                resume: args.resume,
                verbose: args.verbose,
            };
            if !args.sweep_reduction.is_empty() || !args.sweep_subsets.is_empty() {
                let path = if args.parallel {
                    parallel_sweep(&cfg, args)?
                } else {
                    let points = sweep_points(&cfg, &args.sweep_reduction, &args.sweep_subsets)?;
                    cmd_sweep(&cfg, &points, &opts)?
                };
                print!("{}", std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?);
            } else {
                let report = cmd_train(&cfg, &opts)?;
                println!(
                    "trained {} epochs; best validation epoch {}; history in {}",
                    report.history.len(),
                    report.best_epoch,
                    cfg.out.join(HISTORY_FILE).display()
                );
                print!("{}", reports_tsv(&[(report.strategy, report.test_metrics)]));
            }
        }
        Cmd::Evaluate(args) => {
            if let Some(s) = args.strategy {
                cfg.eval.strategy = Some(s.to_string());
            }
            let ckpt = args.checkpoint.clone().unwrap_or_else(|| cfg.out.join(BEST_CHECKPOINT));
            let reports = cmd_evaluate(&cfg, &ckpt, args.sweep, args.split)?;
            print!("{}", reports_tsv(&reports));
        }
        Cmd::Embed(args) => {
            if let Some(a) = &args.aggregation {
                cfg.eval.latent_aggregation = Some(parse_aggregation(a)?);
            }
            let ckpt = args.checkpoint.clone().unwrap_or_else(|| cfg.out.join(BEST_CHECKPOINT));
            println!("{}", cmd_embed(&cfg, &ckpt, args.split)?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
