//! Command-line entry point: train, eval, analyze, correlate, generate.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use rayon::prelude::*;

use crate::analysis::{self, HeadPair};
use crate::config::RunConfig;
use crate::data::{evaluate_ap, generate_dataset, load_dataset, save_dataset, ApTable, ImageFormat, ImageSample};
use crate::detector::infer::{infer_image, DetectionRecord};
use crate::detector::train::train;
use crate::detector::{checkpoint, Detector, HeadKind};
use crate::error::{Error, Result};
use crate::geometry::Detection;
use crate::objectives::LossBreakdown;
use crate::plots;

#[derive(Debug, Parser)]
#[command(name = "doublehead", version, about = "Desk-scale detector lab with fc and conv detection heads")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for parallel sections (0 = all cores).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.iterations=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Annotation file to use instead of the configured data.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a detector; writes a checkpoint, the loss log and the resolved config.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Run inference and write detections plus the AP table.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Sliding-window head comparison; one checkpoint holding both heads, or
    /// an fc-head checkpoint followed by a conv-head checkpoint.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long, num_args = 1..=2, required = true)]
        checkpoint: Vec<PathBuf>,
        /// Group classes by the AP of the first checkpoint.
        #[arg(long)]
        difficulty: bool,
        #[arg(long)]
        plots: bool,
    },
    /// Spatial-correlation grids of one checkpoint.
    Correlate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        plots: bool,
    },
    /// Write the configured synthetic dataset to disk.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "png")]
        format: FormatArg,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum FormatArg {
    Png,
    Raw,
}

/// Process exit status of an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Schema { .. } | Error::Io { .. } | Error::Json(_) | Error::Png(_) => 2,
        Error::Divergence { .. } => 3,
        Error::Contract(_) | Error::Degenerate { .. } | Error::Unavailable(_) | Error::UndefinedCorrelation(_) => 4,
    }
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut overrides = common.overrides.clone();
    if let Some(s) = common.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(w) = common.workers {
        overrides.push(format!("workers={w}"));
    }
    let mut cfg = RunConfig::load(common.config.as_deref(), &overrides)?;
    if let Some(o) = &common.out {
        cfg.out = o.clone();
    }
    if let Some(d) = &common.data {
        cfg.data.annotations = Some(d.clone());
    }
    if cfg.workers > 0 {
        // Only the first call in a process can size the global pool.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build_global();
    }
    Ok(cfg)
}

/// Images and class names named by the config.
pub fn load_data(cfg: &RunConfig) -> Result<(Vec<ImageSample>, Vec<String>)> {
    match &cfg.data.annotations {
        Some(path) => {
            if !path.exists() {
                return Err(Error::Config(format!("[data] annotations: {} does not exist", path.display())));
            }
            let (file, samples) = load_dataset(path)?;
            Ok((samples, file.class_names()))
        }
        None => Ok((generate_dataset(&cfg.data.synthetic)?, cfg.data.synthetic.class_names.clone())),
    }
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_config(cfg: &RunConfig) -> Result<()> {
    write(&cfg.out.join("config.toml"), cfg.to_toml()?)
}

pub fn cmd_train(cfg: &RunConfig) -> Result<Vec<LossBreakdown>> {
    let (data, names) = load_data(cfg)?;
    if names.len() != cfg.model.num_classes {
        return Err(Error::Config(format!(
            "[model] num_classes is {} but the data has {} classes",
            cfg.model.num_classes,
            names.len()
        )));
    }
    write_config(cfg)?;
    let mut det: Detector<f32> = Detector::new(cfg.model.clone(), cfg.seed)?;
    let log_path = cfg.out.join("loss.csv");
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    writeln!(log, "{}", LossBreakdown::CSV_HEADER).map_err(|e| Error::io(&log_path, e))?;
    let every = (cfg.train.iterations / 20).max(1);
    let losses = train(&mut det, &data, &cfg.train, |step, l| {
        writeln!(log, "{}", l.csv_row(step)).map_err(|e| Error::io(&log_path, e))?;
        if step % every == 0 {
            info!("step {step}: loss {:.4}", l.total);
        }
        Ok(())
    })?;
    checkpoint::save(&det, cfg.seed, &cfg.out.join("checkpoint"))?;
    info!("wrote {}", cfg.out.display());
    Ok(losses)
}

/// Detections for every image, in dataset order.
pub fn detect_all(det: &Detector<f32>, data: &[ImageSample], cfg: &RunConfig) -> Result<Vec<(u64, Detection)>> {
    let per: Vec<Vec<(u64, Detection)>> = data
        .par_iter()
        .map(|s| Ok(infer_image(det, s, &cfg.infer)?.into_iter().map(|d| (s.id, d)).collect()))
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

fn evaluate(det: &Detector<f32>, data: &[ImageSample], cfg: &RunConfig) -> Result<(Vec<(u64, Detection)>, ApTable)> {
    if data.is_empty() {
        return Err(Error::Config("[data] the dataset has no images".into()));
    }
    let dets = detect_all(det, data, cfg)?;
    let gt = data.iter().map(|s| (s.id, s.annotations.clone())).collect();
    let table = evaluate_ap(&dets, &gt, det.spec.num_classes, &cfg.eval)?;
    Ok((dets, table))
}

pub fn cmd_eval(cfg: &RunConfig, checkpoint_dir: &Path) -> Result<ApTable> {
    let det: Detector<f32> = checkpoint::load(checkpoint_dir)?;
    let (data, names) = load_data(cfg)?;
    let (dets, table) = evaluate(&det, &data, cfg)?;
    write_config(cfg)?;
    let mut lines = String::new();
    for (id, d) in &dets {
        lines += &serde_json::to_string(&DetectionRecord::new(*id, d))?;
        lines.push('\n');
    }
    write(&cfg.out.join("detections.jsonl"), lines)?;
    write(&cfg.out.join("ap.csv"), table.to_csv(&names, &cfg.eval))?;
    info!("AP {:.4} AP50 {:?} AP75 {:?}", table.ap, table.ap50, table.ap75);
    Ok(table)
}

pub fn cmd_analyze(cfg: &RunConfig, checkpoints: &[PathBuf], difficulty: bool, plot: bool) -> Result<analysis::AnalysisBundle> {
    let dets: Vec<Detector<f32>> = checkpoints.iter().map(|c| checkpoint::load(c)).collect::<Result<_>>()?;
    let pair = match dets.as_slice() {
        [one] => HeadPair::from_double(one),
        [fc, conv] => HeadPair::from_pair(fc, conv),
        _ => return Err(Error::Config("analyze takes one or two checkpoints".into())),
    };
    for (src, kind) in [(&pair.fc, HeadKind::Fc), (&pair.conv, HeadKind::Conv)] {
        if src.cls.is_none() && src.reg.is_none() {
            return Err(Error::Unavailable(format!("no {}-head outputs in the given checkpoints", kind.name())));
        }
    }
    let (data, _) = load_data(cfg)?;
    let class_ap = if difficulty {
        let (_, table) = evaluate(&dets[0], &data, cfg)?;
        Some(table.per_class.iter().map(|c| (c.class_id, c.ap)).collect::<BTreeMap<_, _>>())
    } else {
        None
    };
    let bundle = analysis::run_head_comparison(&pair, &data, class_ap.as_ref(), &cfg.analysis)?;
    write_config(cfg)?;
    bundle.write(&cfg.out)?;
    if plot {
        render_plots(&cfg.out)?;
    }
    info!("{}", serde_json::to_string(&bundle.summary)?);
    Ok(bundle)
}

/// Renders every figure from the files in `dir`.
pub fn render_plots(dir: &Path) -> Result<()> {
    let plot_dir = dir.join("plots");
    let bins = dir.join("bins.csv");
    if bins.exists() {
        let text = fs::read_to_string(&bins).map_err(|e| Error::io(&bins, e))?;
        for (name, svg) in plots::bin_plots(&text)? {
            write(&plot_dir.join(name), svg)?;
        }
    }
    let corr = dir.join("correlation.json");
    if corr.exists() {
        let text = fs::read_to_string(&corr).map_err(|e| Error::io(&corr, e))?;
        let set: analysis::CorrelationSet = serde_json::from_str(&text)?;
        fs::create_dir_all(&plot_dir).map_err(|e| Error::io(&plot_dir, e))?;
        for (name, g) in [("conv", &set.conv), ("fc", &set.fc), ("fc_weight", &set.fc_weight)] {
            if let Some(g) = g {
                plots::heatmap_png(g, 4, &plot_dir.join(format!("correlation_{name}.png")))?;
            }
        }
    }
    Ok(())
}

pub fn cmd_correlate(cfg: &RunConfig, checkpoint_dir: &Path, plot: bool) -> Result<analysis::CorrelationSet> {
    let det: Detector<f32> = checkpoint::load(checkpoint_dir)?;
    let (data, _) = load_data(cfg)?;
    let set = analysis::correlate(&det, &data, cfg.analysis.max_objects)?;
    write_config(cfg)?;
    write(&cfg.out.join("correlation.json"), serde_json::to_string(&set)?)?;
    write(&cfg.out.join("correlation_summary.json"), serde_json::to_string_pretty(&set.mean_off_cell())?)?;
    if plot {
        render_plots(&cfg.out)?;
    }
    Ok(set)
}

pub fn cmd_generate(cfg: &RunConfig, format: FormatArg) -> Result<PathBuf> {
    let data = generate_dataset(&cfg.data.synthetic)?;
    let format = match format {
        FormatArg::Png => ImageFormat::Png,
        FormatArg::Raw => ImageFormat::Raw,
    };
    save_dataset(&cfg.out, &data, &cfg.data.synthetic.class_names, format)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { common } => cmd_train(&resolve(&common)?).map(drop),
        Command::Eval { common, checkpoint } => cmd_eval(&resolve(&common)?, &checkpoint).map(drop),
        Command::Analyze {
            common,
            checkpoint,
            difficulty,
            plots,
        } => cmd_analyze(&resolve(&common)?, &checkpoint, difficulty, plots).map(drop),
        Command::Correlate {
            common,
            checkpoint,
            plots,
        } => cmd_correlate(&resolve(&common)?, &checkpoint, plots).map(drop),
        Command::Generate { common, format } => cmd_generate(&resolve(&common)?, format).map(drop),
    }
}
