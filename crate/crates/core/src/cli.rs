//! The `cadg` command line.
//!
//! Settings resolve in three layers: built-in defaults, then the TOML file
//! given by `--config`, then individual flags. The resolved config is written
//! next to every run's artifacts.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::data::{generate_synthetic, load_dataset, save_dataset, DomainDataset};
use crate::error::{CadgError, Result};
use crate::gradcheck::tiny_model_report;
use crate::model::{CadgWeights, InferMode, LossWeights};
use crate::tensor::Tensor;
use crate::train::{accuracy_with_mode, leave_one_out_suite, train_with, EvalEvent, Method, Observer, ValAccuracy};

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Passing threshold for `gradcheck`.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

pub const CONFIG_FILE: &str = "config.toml";
pub const RECORD_FILE: &str = "run_record.json";
pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const DATASET_FILE: &str = "dataset.cadgds";

#[derive(Debug, Parser)]
#[command(name = "cadg", version, about = "Cross-domain attention training on synthetic domains")]
pub struct Cli {
    /// Directory for artifacts.
    #[arg(long, global = true, env = "CADG_OUTPUT_DIR", default_value = "runs")]
    pub output_dir: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset and write it to a file.
    GenData {
        #[command(flatten)]
        settings: Settings,
        /// Output file; defaults to `<output-dir>/dataset.cadgds`.
        #[arg(long)]
        file: Option<PathBuf>,
    },
    /// Train the four-branch model.
    Train(TrainArgs),
    /// Train the single-stream baseline under the same budget.
    TrainErm(TrainArgs),
    /// Score a trained run on one domain.
    Eval {
        #[command(flatten)]
        source: RunSource,
        /// Domain to score; defaults to the run's held-out domain.
        #[arg(long)]
        domain: Option<usize>,
        #[arg(long, value_enum, default_value_t = ModeArg::SelfStream)]
        mode: ModeArg,
    },
    /// Leave-one-domain-out suite.
    Suite {
        #[command(flatten)]
        settings: Settings,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, value_enum, default_value_t = MethodArg::Both)]
        method: MethodArg,
    },
    /// Export cross-attention maps for one same-class pair.
    Align {
        #[command(flatten)]
        source: AlignSource,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, default_value_t = 0)]
        class: usize,
        /// Domain of the first image.
        #[arg(long, default_value_t = 0)]
        domain_a: usize,
        /// Domain of the second image.
        #[arg(long, default_value_t = 1)]
        domain_b: usize,
        /// Position of each image within its (domain, class) cell.
        #[arg(long, default_value_t = 0)]
        index: usize,
    },
    /// Finite-difference check of every parameter gradient of a tiny model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub settings: Settings,
    /// Dataset file from `gen-data`; generated from `[data]` when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Suppress the per-round progress lines on stderr.
    #[arg(long)]
    pub quiet: bool,
}

/// A finished `train` or `train-erm` output directory.
#[derive(Debug, Args)]
pub struct RunSource {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AlignSource {
    /// Trained run directory; without it the maps come from a fresh
    /// initialization of the resolved config.
    #[arg(long)]
    pub run: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[command(flatten)]
    pub settings: Settings,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    #[value(name = "self")]
    SelfStream,
    SelfPair,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Cadg,
    Erm,
    Both,
}

/// `--config` plus one override flag per config field.
#[derive(Debug, Default, Args)]
pub struct Settings {
    #[arg(long)]
    pub config: Option<PathBuf>,

    #[arg(long, help_heading = "Data")]
    pub classes: Option<usize>,
    #[arg(long, help_heading = "Data")]
    pub domains: Option<usize>,
    #[arg(long, help_heading = "Data")]
    pub per_cell: Option<usize>,
    #[arg(long, help_heading = "Data")]
    pub image_size: Option<usize>,
    #[arg(long, help_heading = "Data")]
    pub channels: Option<usize>,
    #[arg(long, help_heading = "Data")]
    pub seed: Option<u64>,

    #[arg(long, help_heading = "Model")]
    pub layers: Option<usize>,
    #[arg(long, help_heading = "Model")]
    pub dim: Option<usize>,
    #[arg(long, help_heading = "Model")]
    pub heads: Option<usize>,
    #[arg(long, help_heading = "Model")]
    pub patch: Option<usize>,
    #[arg(long, help_heading = "Model")]
    pub mlp_hidden: Option<usize>,
    #[arg(long, help_heading = "Model")]
    pub ln_eps: Option<f64>,

    #[arg(long, help_heading = "Training")]
    pub steps: Option<usize>,
    #[arg(long, help_heading = "Training")]
    pub batch: Option<usize>,
    #[arg(long, help_heading = "Training")]
    pub lr: Option<f64>,
    #[arg(long, help_heading = "Training")]
    pub momentum: Option<f64>,
    #[arg(long, help_heading = "Training")]
    pub weight_decay: Option<f64>,
    /// Four comma-separated loss weights for s1, s2, c1, c2.
    #[arg(long, help_heading = "Training", value_parser = parse_lambda)]
    pub lambda: Option<LossWeights>,
    #[arg(long, help_heading = "Training")]
    pub eval_every: Option<usize>,
    #[arg(long, help_heading = "Training")]
    pub patience: Option<usize>,
    #[arg(long, help_heading = "Training")]
    pub val_fraction: Option<f64>,
    #[arg(long, help_heading = "Training")]
    pub init_seed: Option<u64>,
    #[arg(long, help_heading = "Training")]
    pub sampler_seed: Option<u64>,
    #[arg(long, help_heading = "Training")]
    pub split_seed: Option<u64>,
    #[arg(long, help_heading = "Training")]
    pub held_out: Option<usize>,
    #[arg(long, help_heading = "Training")]
    pub eval_batch: Option<usize>,
}

fn parse_lambda(s: &str) -> std::result::Result<LossWeights, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    let arr: [f64; 4] = parts
        .try_into()
        .map_err(|v: Vec<f64>| format!("expected 4 weights, got {}", v.len()))?;
    Ok(LossWeights(arr))
}

impl Settings {
    /// Defaults, then the config file, then flags. Not yet validated.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let d = &mut cfg.data;
        set(&mut d.classes, self.classes);
        set(&mut d.domains, self.domains);
        set(&mut d.per_cell, self.per_cell);
        set(&mut d.image_size, self.image_size);
        set(&mut d.channels, self.channels);
        set(&mut d.seed, self.seed);
        let m = &mut cfg.model;
        set(&mut m.layers, self.layers);
        set(&mut m.dim, self.dim);
        set(&mut m.heads, self.heads);
        set(&mut m.patch, self.patch);
        set(&mut m.mlp_hidden, self.mlp_hidden);
        set(&mut m.ln_eps, self.ln_eps);
        let t = &mut cfg.train;
        set(&mut t.steps, self.steps);
        set(&mut t.batch, self.batch);
        set(&mut t.lr, self.lr);
        set(&mut t.momentum, self.momentum);
        set(&mut t.weight_decay, self.weight_decay);
        set(&mut t.lambda, self.lambda);
        set(&mut t.eval_every, self.eval_every);
        set(&mut t.patience, self.patience);
        set(&mut t.val_fraction, self.val_fraction);
        set(&mut t.init_seed, self.init_seed);
        set(&mut t.sampler_seed, self.sampler_seed);
        set(&mut t.split_seed, self.split_seed);
        set(&mut t.held_out_domain, self.held_out);
        set(&mut t.eval_batch, self.eval_batch);
        Ok(cfg)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            let (kind, code) = match e {
                CadgError::Config(_) => ("usage", EXIT_USAGE),
                _ => ("error", EXIT_RUNTIME),
            };
            eprintln!("cadg: {kind}: {e}");
            code
        }
    }
}

fn execute(cli: &Cli) -> Result<i32> {
    let out = &cli.output_dir;
    match &cli.command {
        Command::GenData { settings, file } => {
            let cfg = settings.resolve()?;
            cfg.data.validate()?;
            let ds = generate_synthetic(&cfg.data)?;
            fs::create_dir_all(out)?;
            let path = file.clone().unwrap_or_else(|| out.join(DATASET_FILE));
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            save_dataset(&ds, &path)?;
            fs::write(out.join(CONFIG_FILE), cfg.to_toml_string())?;
            println!(
                "wrote {} samples ({} classes x {} domains) to {}",
                ds.len(),
                ds.classes,
                ds.domains,
                path.display()
            );
        }
        Command::Train(args) => train_command(out, args, Method::Cadg)?,
        Command::TrainErm(args) => train_command(out, args, Method::Erm)?,
        Command::Eval { source, domain, mode } => {
            let (cfg, weights) = load_run(&source.run)?;
            let ds = dataset_for(cfg, source.data.as_deref())?.1;
            let domain = domain.unwrap_or(cfg.train.held_out_domain);
            if domain >= ds.domains {
                return Err(CadgError::Config(format!("domain {domain} of {}", ds.domains)));
            }
            let mode = match mode {
                ModeArg::SelfStream => InferMode::SelfStream,
                ModeArg::SelfPair => InferMode::SelfPair,
            };
            let accuracy = accuracy_with_mode(&weights, &ds, &ds.domain_ids(domain), cfg.train.eval_batch, mode)?;
            fs::create_dir_all(out)?;
            let report = EvalReport {
                run: source.run.display().to_string(),
                domain,
                mode,
                accuracy,
            };
            fs::write(out.join("eval.json"), to_json(&report)?)?;
            println!("domain={domain} accuracy={accuracy:.4}");
        }
        Command::Suite {
            settings,
            data,
            repeats,
            method,
        } => {
            let (cfg, ds) = dataset_for(settings.resolve()?, data.as_deref())?;
            cfg.validate()?;
            let methods: &[Method] = match method {
                MethodArg::Cadg => &[Method::Cadg],
                MethodArg::Erm => &[Method::Erm],
                MethodArg::Both => &[Method::Cadg, Method::Erm],
            };
            fs::create_dir_all(out)?;
            fs::write(out.join(CONFIG_FILE), cfg.to_toml_string())?;
            let mut summaries = Vec::new();
            let mut csv = String::new();
            for &m in methods {
                let summary = leave_one_out_suite(&cfg, &ds, *repeats, m, &mut Progress)?;
                let body = summary.to_csv();
                if csv.is_empty() {
                    csv.push_str(&body);
                } else {
                    csv.extend(body.lines().skip(1).map(|l| format!("{l}\n")));
                }
                summaries.push(summary);
            }
            fs::write(out.join(SUMMARY_FILE), csv)?;
            fs::write(out.join("suite.json"), to_json(&summaries)?)?;
            let line: Vec<String> = summaries
                .iter()
                .map(|s| format!("{}={:.4}", s.method, s.grand_mean))
                .collect();
            println!("grand average {}", line.join(" "));
        }
        Command::Align {
            source,
            layer,
            class,
            domain_a,
            domain_b,
            index,
        } => {
            let (cfg, weights) = match &source.run {
                Some(run) => load_run(run)?,
                None => {
                    let cfg = source.settings.resolve()?;
                    cfg.validate()?;
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.init_seed);
                    (cfg, CadgWeights::init(cfg.model_config(), cfg.train.lambda, &mut rng)?)
                }
            };
            let ds = dataset_for(cfg, source.data.as_deref())?.1;
            let pick = |domain: usize| -> Result<Tensor> {
                if domain >= ds.domains || *class >= ds.classes {
                    return Err(CadgError::Config(format!("no cell (domain {domain}, class {class})")));
                }
                let cell = ds.cell(domain, *class);
                let id = *cell
                    .get(*index)
                    .ok_or_else(|| CadgError::Config(format!("index {index} beyond cell of {}", cell.len())))?;
                Ok(ds.batch(&[id])?.0)
            };
            let map = weights.alignment_map(&pick(*domain_a)?, &pick(*domain_b)?, *layer)?;
            fs::create_dir_all(out)?;
            for branch in [1, 2] {
                let path = out.join(format!("cross{branch}.csv"));
                let mut file = std::io::BufWriter::new(fs::File::create(&path)?);
                map.write_csv(branch, 0, &mut file)?;
                file.flush()?;
            }
            println!(
                "wrote cross1.csv and cross2.csv for layer {layer} to {}",
                out.display()
            );
        }
        Command::Gradcheck { seed } => {
            let report = tiny_model_report(*seed)?;
            println!(
                "max_rel_err={:.3e} max_abs_err={:.3e} checked={}",
                report.max_rel_err, report.max_abs_err, report.checked
            );
            if !report.passes(GRADCHECK_TOLERANCE) {
                eprintln!("cadg: gradient check failed (tolerance {GRADCHECK_TOLERANCE:e})");
                return Ok(EXIT_RUNTIME);
            }
        }
    }
    Ok(0)
}

#[derive(Serialize)]
struct EvalReport {
    run: String,
    domain: usize,
    mode: InferMode,
    accuracy: f64,
}

struct Progress;

impl Observer for Progress {
    fn on_eval(&mut self, event: &EvalEvent) {
        eprintln!("{}", event.progress_line());
    }

    fn on_run_end(&mut self, r: &crate::train::RunRecord) {
        eprintln!(
            "run method={} held_out={} seed={} best_val={:.4} target_acc={:.4}",
            r.method, r.config.train.held_out_domain, r.config.train.init_seed, r.best_val_acc, r.target_acc
        );
    }
}

struct Quiet;

impl Observer for Quiet {}

fn train_command(out: &Path, args: &TrainArgs, method: Method) -> Result<()> {
    let (cfg, ds) = dataset_for(args.settings.resolve()?, args.data.as_deref())?;
    cfg.validate()?;
    let mut progress = Progress;
    let mut quiet = Quiet;
    let observer: &mut dyn Observer = if args.quiet { &mut quiet } else { &mut progress };
    let outcome = train_with(
        &cfg,
        &ds,
        method,
        &mut ValAccuracy { eval_batch: cfg.train.eval_batch },
        observer,
    )?;

    fs::create_dir_all(out)?;
    let ckpt = out.join(CHECKPOINT_FILE);
    save_checkpoint(outcome.weights.params(), &ckpt)?;
    let mut record = outcome.record;
    record.best_checkpoint = Some(ckpt.display().to_string());
    fs::write(out.join(CONFIG_FILE), cfg.to_toml_string())?;
    fs::write(out.join(RECORD_FILE), to_json(&record)?)?;
    fs::write(
        out.join(SUMMARY_FILE),
        format!(
            "method,held_out,seed,best_val,target_acc,steps_run\n{},{},{},{},{},{}\n",
            method,
            cfg.train.held_out_domain,
            cfg.train.init_seed,
            record.best_val_acc,
            record.target_acc,
            record.steps_run
        ),
    )?;
    println!(
        "{method} held_out={} best_val={:.4}@{} target_acc={:.4} steps={} -> {}",
        cfg.train.held_out_domain,
        record.best_val_acc,
        record.best_val_step,
        record.target_acc,
        record.steps_run,
        out.display()
    );
    Ok(())
}

/// Loads `dir/config.toml` and the weights in `dir/best.ckpt`.
fn load_run(dir: &Path) -> Result<(RunConfig, CadgWeights)> {
    let cfg = RunConfig::load(dir.join(CONFIG_FILE))?;
    cfg.validate()?;
    let mut weights = CadgWeights::init(cfg.model_config(), cfg.train.lambda, &mut ChaCha8Rng::seed_from_u64(0))?;
    weights.params_mut().load_values(&load_checkpoint(dir.join(CHECKPOINT_FILE))?)?;
    Ok((cfg, weights))
}

/// The dataset for a run: loaded from `file` when given, with the `[data]`
/// section rewritten to describe it, otherwise generated from `[data]`.
fn dataset_for(mut cfg: RunConfig, file: Option<&Path>) -> Result<(RunConfig, DomainDataset)> {
    match file {
        None => {
            cfg.data.validate()?;
            let ds = generate_synthetic(&cfg.data)?;
            Ok((cfg, ds))
        }
        Some(path) => {
            let ds = load_dataset(path)?;
            if ds.height != ds.width {
                return Err(CadgError::Config(format!(
                    "{}: images are {}x{}, only square images are supported",
                    path.display(),
                    ds.height,
                    ds.width
                )));
            }
            cfg.data.classes = ds.classes;
            cfg.data.domains = ds.domains;
            cfg.data.image_size = ds.height;
            cfg.data.channels = ds.channels;
            cfg.data.seed = ds.seed;
            cfg.data.per_cell = ds.cell(0, 0).len();
            Ok((cfg, ds))
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value).map_err(|e| CadgError::Format(e.to_string()))
}
