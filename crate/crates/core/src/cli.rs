//! Command-line front end: dataset generation, training, evaluation, and
//! figure artifacts behind one binary.
//!
//! Every subcommand reads an optional TOML config plus `--key value` flag
//! overrides (flags win), resolves a run directory, echoes the resolved
//! config there, and then writes its outputs. Config loading and
//! validation happen before the run directory is created, so a bad
//! invocation leaves nothing behind.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::artifacts::{export_pair_embeddings, traverse, PairMode, TraversalSpec};
use crate::data::archive::{load_archive, write_archive};
use crate::data::toy::{make_toy_grid, ToyConfig};
use crate::data::GroundTruthDataset;
use crate::error::{Error, Result};
use crate::metrics::{evaluate, DciConfig, DciPredictor, EvalConfig, FactorVaeConfig, MigConfig, MetricReport};
use crate::trainer::{train, Precision, TrainConfig};

const USAGE: &str = "usage: protovae <gen-data|train|eval|traverse|embed-export> \
[--config FILE] [--out DIR] [--name NAME] [--KEY VALUE]...
  gen-data      render a sprite-grid dataset archive (keys: side, shapes, scales, pos_x, pos_y, seed, smooth)
  train         fit a model (keys: training config fields; loss weights also as weights.alpha etc.)
  eval          score checkpoints with the metric suite (keys: dataset, checkpoint, seed, factorvae.*, mig.*, dci.*)
  traverse      render a latent traversal grid (keys: dataset, checkpoint, seed_images, lo, hi, steps, dims)
  embed-export  export pair embeddings as CSV (keys: dataset, checkpoint, mode, n, seed)
run directory: --out wins, then $PROTOVAE_RUN_DIR/<name>, then runs/<name>; <name> defaults to the subcommand.";

/// Entry point for the `protovae` binary.
pub fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if let Err(e) = run(&args) {
        // Single-line diagnostics, even for multi-line parser errors.
        let msg: String = e.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
        eprintln!("protovae: {msg}");
        std::process::exit(1);
    }
}

/// Execute one invocation; the testable core of `main`.
pub fn run(args: &[String]) -> Result<()> {
    let Some(subcommand) = args.first() else {
        println!("{USAGE}");
        return Ok(());
    };
    if matches!(subcommand.as_str(), "help" | "--help" | "-h") {
        println!("{USAGE}");
        return Ok(());
    }
    let inv = Invocation::parse(subcommand, &args[1..])?;
    match subcommand.as_str() {
        "gen-data" => cmd_gen_data(&inv),
        "train" => cmd_train(&inv),
        "eval" => cmd_eval(&inv),
        "traverse" => cmd_traverse(&inv),
        "embed-export" => cmd_embed_export(&inv),
        other => Err(Error::config(format!(
            "unknown subcommand {other:?}; expected gen-data, train, eval, traverse or embed-export"
        ))),
    }
}

/// Parsed command line: reserved flags plus raw config-key overrides.
struct Invocation {
    name: String,
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    overrides: Vec<(String, String)>,
}

impl Invocation {
    fn parse(subcommand: &str, rest: &[String]) -> Result<Self> {
        let mut inv = Invocation {
            name: subcommand.to_string(),
            config: None,
            out: None,
            overrides: Vec::new(),
        };
        let mut i = 0;
        while i < rest.len() {
            let token = &rest[i];
            let Some(flag) = token.strip_prefix("--") else {
                return Err(Error::config(format!(
                    "unexpected argument {token:?}; flags look like --key value"
                )));
            };
            let (key, value) = match flag.split_once('=') {
                Some((k, v)) => (k.to_string(), v.to_string()),
                None => {
                    i += 1;
                    let Some(value) = rest.get(i) else {
                        return Err(Error::config(format!("flag --{flag} is missing its value")));
                    };
                    (flag.to_string(), value.clone())
                }
            };
            match key.as_str() {
                "config" => inv.config = Some(PathBuf::from(value)),
                "out" => inv.out = Some(PathBuf::from(value)),
                "name" => inv.name = value,
                _ => inv.overrides.push((key, value)),
            }
            i += 1;
        }
        Ok(inv)
    }

    /// Load the config file (strict keys) or fall back to defaults, then
    /// apply flag overrides through `set`.
    fn resolve_config<T, F>(&self, set: F) -> Result<T>
    where
        T: Default + DeserializeOwned,
        F: Fn(&mut T, &str, &str) -> Result<()>,
    {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| {
                    Error::config(format!("cannot read config {}: {e}", path.display()))
                })?;
                toml::from_str(&text)
                    .map_err(|e| Error::config(format!("{}: {e}", path.display())))?
            }
            None => T::default(),
        };
        for (key, value) in &self.overrides {
            set(&mut cfg, key, value)?;
        }
        Ok(cfg)
    }

    /// Create and return the run directory. Called only after the config
    /// resolved cleanly.
    fn run_dir(&self) -> Result<PathBuf> {
        let dir = match &self.out {
            Some(path) => path.clone(),
            None => {
                let root = std::env::var_os("PROTOVAE_RUN_DIR")
                    .map(PathBuf::from)
                    .unwrap_or_else(|| PathBuf::from("runs"));
                root.join(&self.name)
            }
        };
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }
}

fn echo_config<T: Serialize>(run_dir: &Path, cfg: &T) -> Result<()> {
    let text = toml::to_string(cfg).map_err(|e| Error::config(format!("config echo: {e}")))?;
    fs::write(run_dir.join("config.toml"), text)?;
    Ok(())
}

fn unknown_key(key: &str, valid: &[&str]) -> Error {
    Error::config(format!(
        "unknown config key {key:?}; valid keys: {}",
        valid.join(", ")
    ))
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(format!(
            "bad value {value:?} for {key}; expected true or false"
        ))),
    }
}

/// `none` or a count, for the optional factor cardinalities.
fn parse_opt_count(key: &str, value: &str) -> Result<Option<usize>> {
    if value == "none" {
        Ok(None)
    } else {
        parse_num(key, value).map(Some)
    }
}

/// Comma-separated indices, e.g. `0,3,17`.
fn parse_index_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|part| parse_num(key, part.trim()))
        .collect()
}

// ---------------------------------------------------------------------------
// Dataset resolution
// ---------------------------------------------------------------------------

/// The built-in desk-scale grid: every factor live, anti-aliased.
pub fn standard_toy_config() -> ToyConfig {
    ToyConfig {
        side: 32,
        shapes: Some(3),
        scales: Some(3),
        pos_x: Some(4),
        pos_y: Some(4),
        seed: 0,
        smooth: true,
    }
}

/// Interpret a dataset spec: `toy` (built-in grid), a `.toml` sprite-grid
/// config, or a path to a generated archive.
pub fn resolve_dataset(spec: &str) -> Result<GroundTruthDataset> {
    if spec == "toy" {
        return make_toy_grid(&standard_toy_config());
    }
    if spec.ends_with(".toml") {
        let text = fs::read_to_string(spec)
            .map_err(|e| Error::config(format!("cannot read dataset config {spec}: {e}")))?;
        return make_toy_grid(&ToyConfig::from_toml(&text)?);
    }
    load_archive(Path::new(spec))
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

const TOY_KEYS: &[&str] = &["side", "shapes", "scales", "pos_x", "pos_y", "seed", "smooth"];

fn set_toy_key(cfg: &mut ToyConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "side" => cfg.side = parse_num(key, value)?,
        "shapes" => cfg.shapes = parse_opt_count(key, value)?,
        "scales" => cfg.scales = parse_opt_count(key, value)?,
        "pos_x" => cfg.pos_x = parse_opt_count(key, value)?,
        "pos_y" => cfg.pos_y = parse_opt_count(key, value)?,
        "seed" => cfg.seed = parse_num(key, value)?,
        "smooth" => cfg.smooth = parse_bool(key, value)?,
        _ => return Err(unknown_key(key, TOY_KEYS)),
    }
    Ok(())
}

fn cmd_gen_data(inv: &Invocation) -> Result<()> {
    let cfg: ToyConfig = inv.resolve_config(set_toy_key)?;
    let dataset = make_toy_grid(&cfg)?;
    let run_dir = inv.run_dir()?;
    echo_config(&run_dir, &cfg)?;
    let out = run_dir.join("dataset.npz");
    write_archive(&out, &dataset)?;
    println!("wrote {} ({} images)", out.display(), dataset.len());
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

const TRAIN_KEYS: &[&str] = &[
    "dataset",
    "latent_dim",
    "metric_dim",
    "base_channels",
    "dense_width",
    "disc_width",
    "alpha",
    "lambda",
    "kappa",
    "weights.alpha",
    "weights.lambda",
    "weights.kappa",
    "batch_size",
    "steps",
    "lr_main",
    "lr_disc",
    "seed",
    "precision",
    "kl_weight_gradient",
    "squared_distance",
    "log_every",
    "checkpoint_every",
];

fn set_train_key(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "dataset" => cfg.dataset = value.to_string(),
        "latent_dim" => cfg.latent_dim = parse_num(key, value)?,
        "metric_dim" => cfg.metric_dim = parse_num(key, value)?,
        "base_channels" => cfg.base_channels = parse_num(key, value)?,
        "dense_width" => cfg.dense_width = parse_num(key, value)?,
        "disc_width" => cfg.disc_width = parse_num(key, value)?,
        // The loss weights form a logical group, so both spellings work.
        "alpha" | "weights.alpha" => cfg.alpha = parse_num(key, value)?,
        "lambda" | "weights.lambda" => cfg.lambda = parse_num(key, value)?,
        "kappa" | "weights.kappa" => cfg.kappa = parse_num(key, value)?,
        "batch_size" => cfg.batch_size = parse_num(key, value)?,
        "steps" => cfg.steps = parse_num(key, value)?,
        "lr_main" => cfg.lr_main = parse_num(key, value)?,
        "lr_disc" => cfg.lr_disc = parse_num(key, value)?,
        "seed" => cfg.seed = parse_num(key, value)?,
        "precision" => {
            cfg.precision = match value {
                "f32" => Precision::F32,
                "f64" => Precision::F64,
                _ => {
                    return Err(Error::config(format!(
                        "bad value {value:?} for precision; expected f32 or f64"
                    )))
                }
            }
        }
        "kl_weight_gradient" => cfg.kl_weight_gradient = parse_bool(key, value)?,
        "squared_distance" => cfg.squared_distance = parse_bool(key, value)?,
        "log_every" => cfg.log_every = parse_num(key, value)?,
        "checkpoint_every" => cfg.checkpoint_every = parse_num(key, value)?,
        _ => return Err(unknown_key(key, TRAIN_KEYS)),
    }
    Ok(())
}

fn cmd_train(inv: &Invocation) -> Result<()> {
    let cfg: TrainConfig = inv.resolve_config(set_train_key)?;
    cfg.validate()?;
    let dataset = resolve_dataset(&cfg.dataset)?;
    let run_dir = inv.run_dir()?;
    echo_config(&run_dir, &cfg)?;
    let checkpoint = train(&cfg, &dataset, &run_dir)?;
    println!("wrote {}", checkpoint.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

/// Evaluation run settings: which checkpoints, which dataset, and the
/// metric sampling budgets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalCliConfig {
    pub dataset: String,
    /// A checkpoint file, or a directory whose `*.ckpt` files are all
    /// scored (one report per seed).
    pub checkpoint: String,
    pub seed: u64,
    pub factorvae: FactorVaeConfig,
    pub mig: MigConfig,
    pub dci: DciConfig,
}

impl Default for EvalCliConfig {
    fn default() -> Self {
        EvalCliConfig {
            dataset: "toy".to_string(),
            checkpoint: String::new(),
            seed: 0,
            factorvae: FactorVaeConfig::default(),
            mig: MigConfig::default(),
            dci: DciConfig::default(),
        }
    }
}

const EVAL_KEYS: &[&str] = &[
    "dataset",
    "checkpoint",
    "seed",
    "factorvae.variance_samples",
    "factorvae.train_votes",
    "factorvae.eval_votes",
    "factorvae.batch_per_vote",
    "factorvae.prune_ratio",
    "factorvae.chunk",
    "mig.samples",
    "mig.bins",
    "mig.chunk",
    "dci.train_samples",
    "dci.test_samples",
    "dci.predictor",
    "dci.chunk",
];

fn set_eval_key(cfg: &mut EvalCliConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "dataset" => cfg.dataset = value.to_string(),
        "checkpoint" => cfg.checkpoint = value.to_string(),
        "seed" => cfg.seed = parse_num(key, value)?,
        "factorvae.variance_samples" => cfg.factorvae.variance_samples = parse_num(key, value)?,
        "factorvae.train_votes" => cfg.factorvae.train_votes = parse_num(key, value)?,
        "factorvae.eval_votes" => cfg.factorvae.eval_votes = parse_num(key, value)?,
        "factorvae.batch_per_vote" => cfg.factorvae.batch_per_vote = parse_num(key, value)?,
        "factorvae.prune_ratio" => cfg.factorvae.prune_ratio = parse_num(key, value)?,
        "factorvae.chunk" => cfg.factorvae.chunk = parse_num(key, value)?,
        "mig.samples" => cfg.mig.samples = parse_num(key, value)?,
        "mig.bins" => cfg.mig.bins = parse_num(key, value)?,
        "mig.chunk" => cfg.mig.chunk = parse_num(key, value)?,
        "dci.train_samples" => cfg.dci.train_samples = parse_num(key, value)?,
        "dci.test_samples" => cfg.dci.test_samples = parse_num(key, value)?,
        "dci.predictor" => {
            cfg.dci.predictor = match value {
                "boosted_trees" => DciPredictor::BoostedTrees,
                "logistic" => DciPredictor::Logistic,
                _ => {
                    return Err(Error::config(format!(
                        "bad value {value:?} for dci.predictor; expected boosted_trees or logistic"
                    )))
                }
            }
        }
        "dci.chunk" => cfg.dci.chunk = parse_num(key, value)?,
        _ => return Err(unknown_key(key, EVAL_KEYS)),
    }
    Ok(())
}

/// `mean ± std` (sample std; 0 for a single run) per metric, Table-style.
pub fn summarize_reports(reports: &[MetricReport]) -> String {
    let mut text = String::new();
    writeln!(text, "checkpoints: {}", reports.len()).unwrap();
    if reports.is_empty() {
        return text;
    }
    for (slot, (key, _)) in reports[0].scores().iter().enumerate() {
        let values: Vec<f64> = reports.iter().map(|r| r.scores()[slot].1).collect();
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let std = if values.len() < 2 {
            0.0
        } else {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
                / (values.len() - 1) as f64;
            var.sqrt()
        };
        writeln!(text, "{key}: {mean:.4} ± {std:.4}").unwrap();
    }
    text
}

fn cmd_eval(inv: &Invocation) -> Result<()> {
    let cfg: EvalCliConfig = inv.resolve_config(set_eval_key)?;
    if cfg.checkpoint.is_empty() {
        return Err(Error::config("eval needs a checkpoint file or directory"));
    }
    let target = PathBuf::from(&cfg.checkpoint);
    let mut checkpoints = Vec::new();
    if target.is_dir() {
        for entry in fs::read_dir(&target)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "ckpt") {
                checkpoints.push(path);
            }
        }
        checkpoints.sort();
        if checkpoints.is_empty() {
            return Err(Error::config(format!(
                "no .ckpt files under {}",
                target.display()
            )));
        }
    } else if target.is_file() {
        checkpoints.push(target);
    } else {
        return Err(Error::config(format!(
            "checkpoint {} does not exist",
            target.display()
        )));
    }

    let dataset = resolve_dataset(&cfg.dataset)?;
    let eval_cfg = EvalConfig {
        seed: cfg.seed,
        factorvae: cfg.factorvae,
        mig: cfg.mig,
        dci: cfg.dci,
    };
    eval_cfg.validate()?;
    let run_dir = inv.run_dir()?;
    echo_config(&run_dir, &cfg)?;

    let mut reports = Vec::with_capacity(checkpoints.len());
    for path in &checkpoints {
        let report = evaluate(path, &dataset, &eval_cfg)?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "checkpoint".to_string());
        let out = run_dir.join(format!("report-{stem}.txt"));
        fs::write(&out, report.to_text())?;
        println!("wrote {}", out.display());
        reports.push(report);
    }
    let summary = run_dir.join("summary.txt");
    fs::write(&summary, summarize_reports(&reports))?;
    println!("wrote {}", summary.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// traverse
// ---------------------------------------------------------------------------

/// Traversal run settings: the sweep itself plus which dataset supplies
/// the seed images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TraverseCliConfig {
    pub dataset: String,
    pub checkpoint: String,
    pub seed_images: Vec<usize>,
    pub lo: f64,
    pub hi: f64,
    pub steps: usize,
    /// Absent means all dimensions.
    pub dims: Option<Vec<usize>>,
}

impl Default for TraverseCliConfig {
    fn default() -> Self {
        TraverseCliConfig {
            dataset: "toy".to_string(),
            checkpoint: String::new(),
            seed_images: vec![0],
            lo: -2.0,
            hi: 2.0,
            steps: 7,
            dims: None,
        }
    }
}

const TRAVERSE_KEYS: &[&str] = &[
    "dataset",
    "checkpoint",
    "seed_images",
    "lo",
    "hi",
    "steps",
    "dims",
];

fn set_traverse_key(cfg: &mut TraverseCliConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "dataset" => cfg.dataset = value.to_string(),
        "checkpoint" => cfg.checkpoint = value.to_string(),
        "seed_images" => cfg.seed_images = parse_index_list(key, value)?,
        "lo" => cfg.lo = parse_num(key, value)?,
        "hi" => cfg.hi = parse_num(key, value)?,
        "steps" => cfg.steps = parse_num(key, value)?,
        "dims" => {
            cfg.dims = if value == "all" {
                None
            } else {
                Some(parse_index_list(key, value)?)
            }
        }
        _ => return Err(unknown_key(key, TRAVERSE_KEYS)),
    }
    Ok(())
}

fn cmd_traverse(inv: &Invocation) -> Result<()> {
    let cfg: TraverseCliConfig = inv.resolve_config(set_traverse_key)?;
    if cfg.checkpoint.is_empty() {
        return Err(Error::config("traverse needs a checkpoint"));
    }
    let spec = TraversalSpec {
        checkpoint: PathBuf::from(&cfg.checkpoint),
        seed_images: cfg.seed_images.clone(),
        lo: cfg.lo,
        hi: cfg.hi,
        steps: cfg.steps,
        dims: cfg.dims.clone(),
    };
    spec.validate()?;
    let dataset = resolve_dataset(&cfg.dataset)?;
    let run_dir = inv.run_dir()?;
    echo_config(&run_dir, &cfg)?;
    let meta = traverse(&spec, &dataset, &run_dir.join("traversal.png"))?;
    println!("wrote {} ({} rows)", meta.image.display(), meta.grid.rows);
    Ok(())
}

// ---------------------------------------------------------------------------
// embed-export
// ---------------------------------------------------------------------------

/// Pair-export settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedCliConfig {
    pub dataset: String,
    pub checkpoint: String,
    pub mode: PairMode,
    pub n: usize,
    pub seed: u64,
}

impl Default for EmbedCliConfig {
    fn default() -> Self {
        EmbedCliConfig {
            dataset: "toy".to_string(),
            checkpoint: String::new(),
            mode: PairMode::GroundTruthPairs,
            n: 256,
            seed: 0,
        }
    }
}

const EMBED_KEYS: &[&str] = &["dataset", "checkpoint", "mode", "n", "seed"];

fn set_embed_key(cfg: &mut EmbedCliConfig, key: &str, value: &str) -> Result<()> {
    match key {
        "dataset" => cfg.dataset = value.to_string(),
        "checkpoint" => cfg.checkpoint = value.to_string(),
        "mode" => cfg.mode = value.parse()?,
        "n" => cfg.n = parse_num(key, value)?,
        "seed" => cfg.seed = parse_num(key, value)?,
        _ => return Err(unknown_key(key, EMBED_KEYS)),
    }
    Ok(())
}

fn cmd_embed_export(inv: &Invocation) -> Result<()> {
    let cfg: EmbedCliConfig = inv.resolve_config(set_embed_key)?;
    if cfg.checkpoint.is_empty() {
        return Err(Error::config("embed-export needs a checkpoint"));
    }
    let dataset = resolve_dataset(&cfg.dataset)?;
    let run_dir = inv.run_dir()?;
    echo_config(&run_dir, &cfg)?;
    let export = export_pair_embeddings(
        Path::new(&cfg.checkpoint),
        &dataset,
        cfg.mode,
        cfg.n,
        cfg.seed,
        &run_dir.join("pairs.csv"),
    )?;
    println!(
        "wrote {} ({} rows, m={})",
        export.meta.csv.display(),
        export.rows.len(),
        export.meta.metric_dim
    );
    Ok(())
}
