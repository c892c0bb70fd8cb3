//! Command-line entry points.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};

use clap::{Parser, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::analysis::{dataset_masks, detect_dead_blocks, export_inference_model, prune_dead_blocks, spearman, FlopsReport};
use crate::checkpoint::{self, Checkpoint};
use crate::config::ExperimentConfig;
use crate::data::{data_root, load_cifar, synth_dataset, DataSource, Dataset, Split, SynthSpec};
use crate::error::{Result, SgadError};
use crate::metrics::{self, MetricsRecord, MetricsWriter};
use crate::model::{MaskMode, SgadModel};
use crate::sgnet::MappingMode;
use crate::trainer::{self, evaluate, guideline_variances, EpochSummary, StepMetrics, TrainObserver, TrainState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Train,
    Eval,
    Analyze,
    Prune,
    Export,
    Report,
}

#[derive(Debug, Parser)]
#[command(name = "sgad", about = "Train and analyze adaptively-dropped residual networks")]
pub struct Cli {
    /// key = value configuration file; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub command: Command,
    /// Overrides train.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides mapping.s_max.
    #[arg(long)]
    pub smax: Option<f64>,
    #[arg(long, value_parser = parse_mapping_mode)]
    pub mapping_mode: Option<MappingMode>,
    #[arg(long)]
    pub include_bmnet_flops: Option<bool>,
    /// Training checkpoint to resume from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Overrides the checkpoint key (input of eval, analyze, prune, export).
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Overrides output_dir.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

fn parse_mapping_mode(s: &str) -> std::result::Result<MappingMode, String> {
    s.parse().map_err(|e: SgadError| e.to_string())
}

impl Cli {
    pub fn experiment_config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(s) = self.smax {
            cfg.mapping.s_max = s;
        }
        if let Some(m) = self.mapping_mode {
            cfg.mapping.mode = m;
        }
        if let Some(b) = self.include_bmnet_flops {
            cfg.include_bmnet_flops = b;
        }
        if let Some(p) = &self.checkpoint {
            cfg.checkpoint = Some(p.clone());
        }
        if let Some(p) = &self.output_dir {
            cfg.output_dir = p.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Exclusive claim on an output directory, released on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".sgad.lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(SgadError::Usage(format!(
                "{} is locked by another invocation (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Train and test splits described by the config.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let d = &cfg.data;
    let n = &cfg.network;
    let (mut train, mut test) = match d.source {
        DataSource::Synthetic => {
            let spec = SynthSpec {
                channels: n.in_channels,
                size: n.image_size,
                num_classes: n.num_classes,
                difficulty_mix: d.difficulty_mix,
                noise: d.noise,
            };
            (synth_dataset(d.seed, 0, d.train_size, &spec)?, synth_dataset(d.seed, 1, d.test_size, &spec)?)
        }
        _ => {
            let root = data_root(d)?;
            let train = load_cifar(d, &root, Split::Train, n.num_classes)?;
            let test = load_cifar(d, &root, Split::Test, n.num_classes)?;
            return check_shapes(cfg, train, test);
        }
    };
    train.normalize(&d.mean, &d.std)?;
    test.normalize(&d.mean, &d.std)?;
    check_shapes(cfg, train, test)
}

fn check_shapes(cfg: &ExperimentConfig, train: Dataset, test: Dataset) -> Result<(Dataset, Dataset)> {
    let n = &cfg.network;
    for ds in [&train, &test] {
        if ds.channels != n.in_channels || ds.height != n.image_size || ds.width != n.image_size {
            return Err(SgadError::Config(format!(
                "dataset is {}x{}x{}, network expects {}x{}x{}",
                ds.channels, ds.height, ds.width, n.in_channels, n.image_size, n.image_size
            )));
        }
    }
    Ok((train, test))
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";

struct RunObserver<'a> {
    writer: MetricsWriter,
    cfg: &'a ExperimentConfig,
    checkpoint_dir: PathBuf,
}

impl TrainObserver for RunObserver<'_> {
    fn on_step(&mut self, m: &StepMetrics) -> Result<()> {
        self.writer.write(&MetricsRecord::Step(m.clone()))
    }

    fn on_epoch(&mut self, s: &EpochSummary, state: &TrainState) -> Result<()> {
        self.writer.write(&MetricsRecord::Epoch(s.clone()))?;
        self.writer.flush()?;
        checkpoint::save_state(&self.checkpoint_dir, self.cfg, state)
    }
}

/// Trains according to `cfg`, writing `metrics.jsonl` and an end-of-epoch
/// checkpoint into `cfg.output_dir`. `resume` continues a saved run; otherwise
/// `cfg.checkpoint`, when set, provides warm-start weights.
pub fn run_training(cfg: &ExperimentConfig, resume: Option<&Path>) -> Result<TrainState> {
    cfg.validate()?;
    let _lock = DirLock::acquire(&cfg.output_dir)?;
    let (train_set, test_set) = load_datasets(cfg)?;
    let plan = cfg.plan()?;
    let metrics_path = cfg.output_dir.join(METRICS_FILE);
    let (mut state, writer) = match resume {
        Some(dir) => {
            let ck = checkpoint::load(dir)?;
            if ck.manifest.config.network != cfg.network {
                return Err(SgadError::Config("resumed checkpoint has a different network".into()));
            }
            let state = ck.into_state()?;
            metrics::truncate_to_epoch(&metrics_path, state.epoch)?;
            (state, MetricsWriter::append(&metrics_path)?)
        }
        None => {
            let model = match &cfg.checkpoint {
                Some(dir) => warm_start(cfg, dir)?,
                None => SgadModel::build(&cfg.network)?,
            };
            (TrainState::new(model), MetricsWriter::create(&metrics_path, cfg)?)
        }
    };
    let mut observer = RunObserver {
        writer,
        cfg,
        checkpoint_dir: cfg.output_dir.join(CHECKPOINT_DIR),
    };
    trainer::train(&mut state, &plan, &train_set, &test_set, cfg.include_bmnet_flops, &mut observer)?;
    observer.writer.flush()?;
    Ok(state)
}

fn warm_start(cfg: &ExperimentConfig, dir: &Path) -> Result<SgadModel> {
    let ck = checkpoint::load(dir)?;
    if ck.manifest.config.network != cfg.network || ck.model.num_blocks() != cfg.network.num_blocks() {
        return Err(SgadError::Config("warm-start checkpoint has a different architecture".into()));
    }
    let mut model = ck.model;
    if model.sgnet.is_none() {
        model.sgnet = SgadModel::build(&cfg.network)?.sgnet;
    }
    Ok(model)
}

fn input_checkpoint(cfg: &ExperimentConfig) -> Result<Checkpoint> {
    let dir = cfg
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.output_dir.join(CHECKPOINT_DIR));
    checkpoint::load(&dir)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub accuracy: f64,
    pub mask_mode: MaskMode,
    pub mean_executed_blocks: f64,
    pub flops: FlopsReport,
}

pub fn run_eval(cfg: &ExperimentConfig) -> Result<EvalOutput> {
    let ck = input_checkpoint(cfg)?;
    let (_, test) = load_datasets(cfg)?;
    let report = evaluate(&ck.model, cfg.mask_mode, &test, cfg.include_bmnet_flops)?;
    let mut flops = report.flops;
    flops.dead_blocks = detect_dead_blocks(&ck.model, cfg.mask_mode, &test)?;
    let out = EvalOutput {
        accuracy: report.accuracy,
        mask_mode: cfg.mask_mode,
        mean_executed_blocks: report.executed_blocks.iter().sum::<usize>() as f64 / report.executed_blocks.len() as f64,
        flops,
    };
    let _lock = DirLock::acquire(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("eval.json"), serde_json::to_vec_pretty(&out)?)?;
    Ok(out)
}

/// Per-block table and per-sample difficulty/execution table.
#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisOutput {
    pub blocks_csv: String,
    pub samples_csv: String,
    /// Rank correlation between SGNet variance and executed-block count.
    pub variance_execution_rho: Option<f64>,
}

pub fn run_analyze(cfg: &ExperimentConfig) -> Result<AnalysisOutput> {
    let ck = input_checkpoint(cfg)?;
    let (_, test) = load_datasets(cfg)?;
    let model = &ck.model;
    let masks = dataset_masks(model, cfg.mask_mode, &test)?;
    let keep = masks.keep_ratios();
    let grad = ck.manifest.grad_log.means();
    let forced = model.backbone.forced();
    let mut blocks_csv = String::from("block,original_index,grad_l1_mean,keep_ratio,forced\n");
    for (i, b) in model.backbone.blocks.iter().enumerate() {
        let g = grad.get(b.config.index).copied().unwrap_or(0.0);
        blocks_csv.push_str(&format!("{i},{},{g},{},{}\n", b.config.index, keep[i], forced[i]));
    }
    let executed = masks.executed_counts();
    let mut samples_csv = String::from("sample,label,hard,sgnet_variance,executed_blocks\n");
    let mut rho = None;
    if model.sgnet.is_some() {
        let var = guideline_variances(model, &test)?;
        for i in 0..test.len() {
            let hard = test.hard.get(i).copied().unwrap_or(false);
            samples_csv.push_str(&format!("{i},{},{hard},{},{}\n", test.labels[i], var[i], executed[i]));
        }
        let exec: Vec<f64> = executed.iter().map(|&e| e as f64).collect();
        rho = spearman(&var, &exec);
    }
    let _lock = DirLock::acquire(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("blocks.csv"), &blocks_csv)?;
    fs::write(cfg.output_dir.join("samples.csv"), &samples_csv)?;
    Ok(AnalysisOutput {
        blocks_csv,
        samples_csv,
        variance_execution_rho: rho,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneOutput {
    pub dead_blocks: Vec<usize>,
    pub parameters_before: usize,
    pub parameters_after: usize,
}

pub fn run_prune(cfg: &ExperimentConfig) -> Result<PruneOutput> {
    use crate::nn::Parameters;
    let ck = input_checkpoint(cfg)?;
    let (_, test) = load_datasets(cfg)?;
    let dead = detect_dead_blocks(&ck.model, MaskMode::Adaptive, &test)?;
    let pruned = prune_dead_blocks(&ck.model, &dead, &test)?;
    let out = PruneOutput {
        dead_blocks: dead.iter().map(|&i| ck.model.backbone.blocks[i].config.index).collect(),
        parameters_before: ck.model.num_parameters(),
        parameters_after: pruned.num_parameters(),
    };
    let _lock = DirLock::acquire(&cfg.output_dir)?;
    checkpoint::save(
        &cfg.output_dir.join("pruned"),
        &ck.manifest.config,
        &export_inference_model(&pruned),
        None,
        ck.manifest.epoch,
        ck.manifest.step,
        &ck.manifest.grad_log,
    )?;
    fs::write(cfg.output_dir.join("prune.json"), serde_json::to_vec_pretty(&out)?)?;
    Ok(out)
}

pub fn run_export(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let ck = input_checkpoint(cfg)?;
    let _lock = DirLock::acquire(&cfg.output_dir)?;
    let dir = cfg.output_dir.join("export");
    checkpoint::save(
        &dir,
        &ck.manifest.config,
        &export_inference_model(&ck.model),
        None,
        ck.manifest.epoch,
        ck.manifest.step,
        &ck.manifest.grad_log,
    )?;
    Ok(dir)
}

/// Writes `epochs.csv` and `steps.csv` next to the metrics stream.
pub fn run_report(cfg: &ExperimentConfig) -> Result<()> {
    let records = metrics::read_metrics(&cfg.output_dir.join(METRICS_FILE))?;
    let _lock = DirLock::acquire(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("epochs.csv"), metrics::epochs_csv(&records))?;
    fs::write(cfg.output_dir.join("steps.csv"), metrics::steps_csv(&records))?;
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    let cfg = cli.experiment_config()?;
    match cli.command {
        Command::Train => {
            let state = run_training(&cfg, cli.resume.as_deref())?;
            println!("trained to epoch {} ({} steps)", state.epoch, state.step);
        }
        Command::Eval => {
            let out = run_eval(&cfg)?;
            println!("accuracy {:.4}  n-FLOPs {:.4}", out.accuracy, out.flops.n_flops);
        }
        Command::Analyze => {
            let out = run_analyze(&cfg)?;
            if let Some(rho) = out.variance_execution_rho {
                println!("variance/executed-blocks rank correlation {rho:.4}");
            }
        }
        Command::Prune => {
            let out = run_prune(&cfg)?;
            println!(
                "pruned blocks {:?}: {} -> {} parameters",
                out.dead_blocks, out.parameters_before, out.parameters_after
            );
        }
        Command::Export => {
            let dir = run_export(&cfg)?;
            println!("exported to {}", dir.display());
        }
        Command::Report => run_report(&cfg)?,
    }
    Ok(())
}

/// Process exit status for an error: 2 for usage and configuration errors.
pub fn exit_code(err: &SgadError) -> i32 {
    match err {
        SgadError::Usage(_) | SgadError::Config(_) => 2,
        _ => 1,
    }
}
