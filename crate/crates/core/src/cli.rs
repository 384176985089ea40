//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 for usage errors (bad flags, bad config,
//! violated preconditions), 2 for runtime errors (I/O, format, numerics).

use std::collections::HashMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::io::{load_dataset, write_synthetic, Checkpoint, Dataset, Split};
use crate::model::{Model, ViewFeatureSet};
use crate::retrieval::{
    aggregate, build_l1, rerank_l2, score_query, write_rank_lists, GroundTruth,
};
use crate::synthetic::{generate_synthetic, SyntheticConfig};
use crate::training::{evaluate, train_with, EVAL_STREAM_OFFSET};

/// Offset from the run seed for model initialization.
pub const INIT_STREAM_OFFSET: u64 = 0;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "viewformer",
    version,
    about = "View-set attention for multi-view shapes"
)]
pub struct Cli {
    /// Log progress to standard error
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train a model; writes best.ckpt, final.ckpt and train.log to --out.
    Train(TrainArgs),
    /// Print instance and class accuracy of a checkpoint on one split.
    Eval(EvalArgs),
    /// Two-step retrieval over one split; writes rank lists, prints metrics.
    Retrieve(RetrieveArgs),
    /// Write the per-block attention maps of one shape.
    ExportAttention(ExportArgs),
    /// Write a synthetic dataset as a feature file plus manifest.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
pub struct DataArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// key = value config file
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    /// Views sampled per shape
    #[arg(long)]
    pub views: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub freeze_adapter: bool,
    #[arg(long)]
    pub pos_enc: bool,
    #[arg(long)]
    pub cls_token: bool,
    /// Split to select the best epoch on (falls back to training data when empty)
    #[arg(long, default_value = "test")]
    pub eval_split: Split,
    /// Extra key=value overrides, applied after the config file
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Evaluate on a fixed subset of this many views per shape
    #[arg(long)]
    pub views: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub class_checkpoint: PathBuf,
    #[arg(long)]
    pub subclass_checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Rank-list output file
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub shape_id: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 50)]
    pub shapes_per_class: usize,
    #[arg(long, default_value_t = 8)]
    pub views: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Maps an error to its exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

/// Parses `args` (program name first), runs the command and returns the exit
/// code. Diagnostics go to standard error as a single line.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments");
            eprintln!("{first}");
            return EXIT_USAGE;
        }
    };
    let level = if cli.verbose {
        log::LevelFilter::Info
    } else {
        log::LevelFilter::Warn
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    let mut stdout = std::io::stdout().lock();
    match run(&cli.command, &mut stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            exit_code(&e)
        }
    }
}

/// Runs one command, writing its report to `out`.
pub fn run(command: &Command, out: &mut dyn std::io::Write) -> Result<()> {
    match command {
        Command::Train(a) => cmd_train(a, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Retrieve(a) => cmd_retrieve(a, out),
        Command::ExportAttention(a) => cmd_export_attention(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn emit(out: &mut dyn std::io::Write, text: &str) -> Result<()> {
    out.write_all(text.as_bytes())
        .and_then(|()| out.flush())
        .map_err(|e| Error::io("<stdout>", e))
}

/// Effective run configuration: defaults, then the file, then flags.
pub fn resolve_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for o in &a.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(m) = a.views {
        cfg.set("views", &m.to_string())?;
    }
    if let Some(s) = a.seed {
        cfg.set("seed", &s.to_string())?;
    }
    if a.freeze_adapter {
        cfg.set("freeze_adapter", "true")?;
    }
    if a.pos_enc {
        cfg.set("use_position_encoding", "true")?;
    }
    if a.cls_token {
        cfg.set("use_class_token", "true")?;
    }
    Ok(cfg)
}

/// Fills data-derived settings and checks the run against the dataset.
fn fit_to_data(cfg: &mut RunConfig, ds: &Dataset) -> Result<()> {
    if cfg.is_explicit("dim_in") && cfg.model.dim_in != ds.dim {
        return Err(Error::Config(format!(
            "dim_in = {} conflicts with feature width {}",
            cfg.model.dim_in, ds.dim
        )));
    }
    cfg.model.dim_in = ds.dim;
    if cfg.is_explicit("num_classes") {
        if cfg.model.num_classes < ds.num_classes {
            return Err(Error::Config(format!(
                "num_classes = {} but the manifest has {} classes",
                cfg.model.num_classes, ds.num_classes
            )));
        }
    } else {
        cfg.model.num_classes = ds.num_classes;
    }
    let all = ds.splits.values().flatten();
    let (fewest, most) = all.fold((usize::MAX, 0), |(lo, hi), s| {
        (lo.min(s.num_views()), hi.max(s.num_views()))
    });
    if let Some(m) = cfg.train.views_per_shape {
        if m > fewest {
            return Err(Error::Config(format!(
                "views = {m} exceeds the smallest shape's {fewest} stored views"
            )));
        }
        if !cfg.is_explicit("max_views") {
            cfg.model.max_views = cfg.model.max_views.max(m);
        }
    } else if !cfg.is_explicit("max_views") {
        cfg.model.max_views = cfg.model.max_views.max(most);
    }
    cfg.model.validate()?;
    cfg.train.validate()
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let mut cfg = resolve_config(a)?;
    cfg.train.validate()?;
    let ds = load_dataset(&a.data.features, &a.data.manifest)?;
    fit_to_data(&mut cfg, &ds)?;
    let train_set = ds.split(Split::Train);
    if train_set.is_empty() {
        return Err(Error::InvalidArgument(
            "the manifest has no train split".into(),
        ));
    }
    let eval_set = Some(ds.split(a.eval_split)).filter(|s| !s.is_empty());
    if eval_set.is_none() {
        warn!(
            "split {} is empty; selecting the best epoch on training data",
            a.eval_split
        );
    }
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;

    let log_path = a.out.join("train.log");
    let mut log = String::new();
    for line in cfg.to_text().lines() {
        writeln!(log, "# {line}").unwrap();
    }
    writeln!(
        log,
        "# epoch\tlr\ttrain_loss\tinstance_accuracy\tclass_accuracy"
    )
    .unwrap();

    let mut model = Model::new(
        cfg.model.clone(),
        cfg.train.seed.wrapping_add(INIT_STREAM_OFFSET),
    )?;
    info!(
        "training {} parameters on {} shapes",
        model.param_count().total(),
        train_set.len()
    );
    let outcome = train_with(&mut model, train_set, eval_set, &cfg.train, |r| {
        let line = r.log_line();
        info!("{line}");
        log.push_str(&line);
        log.push('\n');
    })?;
    fs::write(&log_path, &log).map_err(|e| Error::io(&log_path, e))?;

    let meta = |epoch: usize, inst: f64, class: f64| {
        vec![
            ("dataset".to_string(), ds.name.clone()),
            ("epoch".to_string(), epoch.to_string()),
            ("instance_accuracy".to_string(), format!("{inst:.6}")),
            ("class_accuracy".to_string(), format!("{class:.6}")),
        ]
    };
    Checkpoint::from_model(
        &outcome.best_model,
        meta(
            outcome.best_epoch,
            outcome.best_instance_accuracy,
            outcome.best_class_accuracy,
        ),
    )
    .write(a.out.join("best.ckpt"))?;
    let last = outcome.log.last();
    Checkpoint::from_model(
        &model,
        meta(
            last.map_or(0, |r| r.epoch),
            last.map_or(0.0, |r| r.eval.instance_accuracy),
            last.map_or(0.0, |r| r.eval.class_accuracy),
        ),
    )
    .write(a.out.join("final.ckpt"))?;
    emit(
        out,
        &format!(
            "best_epoch\t{}\nbest_instance_accuracy\t{:.4}\nbest_class_accuracy\t{:.4}\n",
            outcome.best_epoch, outcome.best_instance_accuracy, outcome.best_class_accuracy
        ),
    )
}

/// Loads a checkpoint and checks it against the dataset's feature width.
fn load_model(path: &Path, ds: &Dataset) -> Result<Model> {
    let model = Checkpoint::read(path)?.into_model()?;
    if model.config().dim_in != ds.dim {
        return Err(Error::Shape(format!(
            "{} expects {}-dim features but the dataset has {}",
            path.display(),
            model.config().dim_in,
            ds.dim
        )));
    }
    Ok(model)
}

fn nonempty_split(ds: &Dataset, split: Split) -> Result<&[ViewFeatureSet]> {
    let shapes = ds.split(split);
    if shapes.is_empty() {
        return Err(Error::InvalidArgument(format!("split {split} is empty")));
    }
    Ok(shapes)
}

pub fn cmd_eval(a: &EvalArgs, out: &mut dyn std::io::Write) -> Result<()> {
    if a.views == Some(0) {
        return Err(Error::InvalidArgument("--views must be at least 1".into()));
    }
    let ds = load_dataset(&a.data.features, &a.data.manifest)?;
    let model = load_model(&a.checkpoint, &ds)?;
    let shapes = nonempty_split(&ds, a.split)?;
    let report = evaluate(
        shapes,
        &model,
        a.views,
        a.seed.wrapping_add(EVAL_STREAM_OFFSET),
    )?;
    emit(out, &format!("{report}\n"))
}

pub fn cmd_retrieve(a: &RetrieveArgs, out: &mut dyn std::io::Write) -> Result<()> {
    let ds = load_dataset(&a.data.features, &a.data.manifest)?;
    let class_model = load_model(&a.class_checkpoint, &ds)?;
    let shapes = nonempty_split(&ds, a.split)?;
    let sub_model = match (&a.subclass_checkpoint, ds.has_subcategories) {
        (Some(p), true) => Some(load_model(p, &ds)?),
        (Some(_), false) => {
            warn!("manifest has no subcategories; falling back to L1 ranking");
            None
        }
        (None, _) => {
            warn!("no subclass checkpoint; falling back to L1 ranking");
            None
        }
    };

    let corpus = shapes
        .iter()
        .map(|s| Ok((s.shape_id.clone(), class_model.forward(s)?)))
        .collect::<Result<Vec<_>>>()?;
    let sub_predictions = match &sub_model {
        Some(m) => shapes
            .iter()
            .map(|s| Ok((s.shape_id.clone(), m.forward(s)?.class())))
            .collect::<Result<HashMap<_, _>>>()?,
        None => HashMap::new(),
    };
    let mut gt = GroundTruth::new();
    for s in shapes {
        gt.insert(s.shape_id.clone(), s.label, s.sublabel);
    }

    let mut lists = Vec::with_capacity(shapes.len());
    let mut scores = Vec::with_capacity(shapes.len());
    for (s, (id, pred)) in shapes.iter().zip(&corpus) {
        let l1 = build_l1(id, pred, &corpus);
        let list = match sub_predictions.get(id) {
            Some(&sub) => rerank_l2(&l1, sub, &sub_predictions),
            None => l1,
        };
        scores.push((s.label, score_query(&list, &gt)?));
        lists.push(list);
    }
    write_rank_lists(&a.out, &lists)?;
    let report = aggregate(&scores)?;
    emit(out, &format!("{report}{}", report.key_values()))
}

/// Renders attention maps as `# block l` headers followed by rows.
pub fn format_attention(maps: &[crate::model::AttentionMap]) -> String {
    let mut s = String::new();
    for (l, m) in maps.iter().enumerate() {
        writeln!(s, "# block {l}").unwrap();
        for r in 0..m.rows() {
            let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:.6}")).collect();
            writeln!(s, "{}", row.join(" ")).unwrap();
        }
    }
    s
}

pub fn cmd_export_attention(a: &ExportArgs) -> Result<()> {
    let ds = load_dataset(&a.data.features, &a.data.manifest)?;
    let model = load_model(&a.checkpoint, &ds)?;
    let shape = ds
        .find(&a.shape_id)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown shape id {:?}", a.shape_id)))?;
    let maps = model.export_attention(shape)?;
    let mut f = fs::File::create(&a.out).map_err(|e| Error::io(&a.out, e))?;
    f.write_all(format_attention(&maps).as_bytes())
        .map_err(|e| Error::io(&a.out, e))
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        num_classes: a.classes,
        shapes_per_class: a.shapes_per_class,
        views: a.views,
        dim: a.dim,
        noise: a.noise,
        seed: a.seed,
        ..SyntheticConfig::default()
    };
    let ds = generate_synthetic(&cfg)?;
    write_synthetic(&ds, &a.features, &a.manifest)
}
