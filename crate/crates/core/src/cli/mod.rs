//! Command-line front end.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

pub mod config;
pub mod plot;

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneSpec};
use crate::curriculum::{read_history, Curriculum, HistoryFile, Phase, RunOptions, RunStore};
use crate::error::{CksError, Result};
use crate::evaluation::{evaluate_named, EvalReport};
use crate::predictor::{predict, Prediction};
use crate::synthdata_io::{generate_to, load_dataset, pgm, read_manifest, GenConfig};
use crate::types::{Image, Mask};
use config::RunConfigFile;
use plot::{Chart, Series};

/// Name of the resolved configuration copied into every run directory.
pub const RUN_CONFIG: &str = "config.toml";

#[derive(Debug, Parser)]
#[command(
    name = "cks",
    version,
    about = "Curriculum knowledge switching for small-object segmentation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen(GenArgs),
    /// Run the training schedule.
    Train(TrainArgs),
    /// Predict masks with a trained run.
    Predict(PredictArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// Render training curves of a run as SVG.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    /// Image size as HEIGHTxWIDTH.
    #[arg(long, default_value = "64x64", value_parser = parse_size)]
    pub size: (usize, usize),
    #[arg(long, default_value_t = 0.01)]
    pub fg_lo: f64,
    #[arg(long, default_value_t = 0.04)]
    pub fg_hi: f64,
    #[arg(long, default_value_t = 0.1)]
    pub empty_frac: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Run configuration (TOML); defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Detection phases to leave out, e.g. `1,2`.
    #[arg(long, value_parser = parse_phases)]
    pub ablate_phases: Option<BTreeSet<Phase>>,
    /// Suppress progress output on stderr.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Dataset directory (with a manifest) or a directory of PGM images.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Enables iterative refinement with this agreement threshold.
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of predicted `<id>.pgm` masks.
    #[arg(long)]
    pub pred: PathBuf,
    /// Dataset directory holding the ground truth.
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub plots: PathBuf,
}

fn parse_size(s: &str) -> std::result::Result<(usize, usize), String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HEIGHTxWIDTH, got `{s}`"))?;
    let h = h.trim().parse().map_err(|_| format!("bad height in `{s}`"))?;
    let w = w.trim().parse().map_err(|_| format!("bad width in `{s}`"))?;
    Ok((h, w))
}

fn parse_phases(s: &str) -> std::result::Result<BTreeSet<Phase>, String> {
    s.split(',')
        .map(|part| {
            part.trim()
                .parse::<u64>()
                .ok()
                .and_then(Phase::detection)
                .ok_or_else(|| format!("`{part}` is not a detection phase (1, 2 or 3)"))
        })
        .collect()
}

/// Parses `args` (program name first) and runs the command.
pub fn run_from<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(1)
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Report(a) => cmd_report(&a),
    }
}

pub fn cmd_gen(a: &GenArgs) -> Result<()> {
    let cfg = GenConfig {
        count: a.count,
        height: a.size.0,
        width: a.size.1,
        fg_ratio_range: (a.fg_lo, a.fg_hi),
        empty_slice_fraction: a.empty_frac,
        seed: a.seed,
        ..GenConfig::default()
    };
    let ds = generate_to(&a.out, &cfg)?;
    eprintln!("wrote {} items to {}", ds.len(), a.out.display());
    Ok(())
}

fn load_config(path: Option<&Path>) -> Result<RunConfigFile> {
    path.map_or_else(|| Ok(RunConfigFile::default()), RunConfigFile::load)
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let train = load_dataset(&a.data)?;
    let val = load_dataset(&a.val)?;
    let spec = BackboneSpec::new(cfg.backbone.depth, cfg.backbone.base_channels)?;
    fs::create_dir_all(&a.out).map_err(|e| CksError::io(&a.out, e))?;
    let config_path = a.out.join(RUN_CONFIG);
    let resolved = cfg.to_toml()?;
    match fs::read_to_string(&config_path) {
        Ok(existing) if existing != resolved => {
            return Err(CksError::Config(format!(
                "{} holds a different configuration; use a fresh run directory",
                config_path.display()
            )))
        }
        Ok(_) => {}
        Err(_) => fs::write(&config_path, &resolved).map_err(|e| CksError::io(&config_path, e))?,
    }
    let opts = RunOptions {
        run_dir: Some(a.out.clone()),
        ablate: a.ablate_phases.clone().unwrap_or_default(),
        predict: cfg.predict.clone(),
    };
    let quiet = a.quiet;
    let mut curriculum = Curriculum::new(&spec, cfg.phases.clone(), cfg.loss.build()?)?.with_logger(|line| {
        if !quiet {
            eprintln!("{line}");
        }
    });
    let state = curriculum.run_full(&train, &val, &opts)?;
    let last = |phase: Phase| {
        state
            .history
            .iter()
            .rev()
            .find(|e| e.phase == phase)
            .and_then(|e| e.val_dsc)
    };
    for phase in Phase::ALL {
        if let Some(d) = last(phase).filter(|_| !quiet) {
            eprintln!("phase {phase}: final validation DSC {d:.4}");
        }
    }
    Ok(())
}

/// The caches a finished run predicts with: the detection cache of its last
/// detection phase and the segmentation cache.
pub struct TrainedRun {
    pub spec: BackboneSpec,
    pub config: RunConfigFile,
    pub detection: crate::ema::CacheModel,
    pub segmentation: crate::ema::CacheModel,
}

impl TrainedRun {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let config = RunConfigFile::load(&run_dir.join(RUN_CONFIG))?;
        let spec = BackboneSpec::new(config.backbone.depth, config.backbone.base_channels)?;
        let history = read_history(run_dir)?;
        let last_detection = history
            .completed
            .iter()
            .copied()
            .filter(|&p| p != Phase::Segmentation)
            .max()
            .ok_or_else(|| CksError::Config(format!("{} has no finished detection phase", run_dir.display())))?;
        if !history.completed.contains(&Phase::Segmentation) {
            return Err(CksError::Config(format!(
                "{} has not finished the segmentation stage",
                run_dir.display()
            )));
        }
        let store = RunStore::new(run_dir);
        let detection = store.load_cache(last_detection)?;
        let segmentation = store.load_cache(Phase::Segmentation)?;
        for cache in [&detection, &segmentation] {
            cache.theta_mu().check_layout(&spec.layout_id())?;
        }
        Ok(TrainedRun {
            spec,
            config,
            detection,
            segmentation,
        })
    }
}

/// Per-image trace document written next to each predicted mask.
#[derive(Debug, Serialize, Deserialize)]
pub struct TraceFile {
    pub schema_version: u32,
    pub id: String,
    pub iterations: usize,
    pub trace: crate::predictor::PredictTrace,
}

/// Images to predict on, with ids: a dataset directory if it has a
/// manifest, otherwise every `*.pgm` file in the directory (id = file stem).
fn input_images(dir: &Path) -> Result<Vec<(String, Image)>> {
    if dir.join(crate::synthdata_io::dataset::MANIFEST).exists() {
        let manifest = read_manifest(dir)?;
        return manifest
            .items
            .iter()
            .map(|it| Ok((it.id.clone(), pgm::read_image(&dir.join(&it.image))?)))
            .collect();
    }
    let mut out = Vec::new();
    for path in pgm_files(dir)? {
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        out.push((id, pgm::read_image(&path)?));
    }
    Ok(out)
}

fn pgm_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CksError::MissingFile(dir.to_path_buf()),
        _ => CksError::io(dir, e),
    })?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CksError::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == "pgm") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

pub fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let run = TrainedRun::load(&a.run)?;
    let mut pcfg = run.config.predict.clone();
    if a.dt.is_some() {
        pcfg.d_t = a.dt;
    }
    if let Some(k) = a.max_iters {
        pcfg.max_iters = k;
    }
    pcfg.validate()?;
    let det = run.detection.view(&run.spec)?;
    let seg = run.segmentation.view(&run.spec)?;
    fs::create_dir_all(&a.out).map_err(|e| CksError::io(&a.out, e))?;
    let images = input_images(&a.input)?;
    for (id, image) in &images {
        let Prediction { mask, trace, .. } = predict(image, &det, &seg, &pcfg)?;
        pgm::write_mask(&a.out.join(format!("{id}.pgm")), &mask)?;
        let doc = TraceFile {
            schema_version: 1,
            id: id.clone(),
            iterations: trace.iterations.len(),
            trace,
        };
        let path = a.out.join(format!("{id}.trace.json"));
        fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n").map_err(|e| CksError::io(&path, e))?;
    }
    eprintln!("predicted {} masks into {}", images.len(), a.out.display());
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let manifest = read_manifest(&a.truth)?;
    let preds = pgm_files(&a.pred)?;
    if preds.len() != manifest.items.len() {
        return Err(CksError::LengthMismatch {
            predictions: preds.len(),
            truths: manifest.items.len(),
        });
    }
    let mut ids = Vec::with_capacity(preds.len());
    let mut pred_masks: Vec<Mask> = Vec::with_capacity(preds.len());
    let mut truth_masks = Vec::with_capacity(preds.len());
    for item in &manifest.items {
        let path = a.pred.join(format!("{}.pgm", item.id));
        if !path.exists() {
            return Err(CksError::MissingFile(path));
        }
        pred_masks.push(pgm::read_mask(&path)?);
        truth_masks.push(pgm::read_mask(&a.truth.join(&item.mask))?);
        ids.push(item.id.clone());
    }
    let report: EvalReport = evaluate_named(&ids, &pred_masks, &truth_masks, "eval")?;
    if let Some(dir) = a.report.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CksError::io(dir, e))?;
    }
    fs::write(&a.report, serde_json::to_string_pretty(&report)? + "\n").map_err(|e| CksError::io(&a.report, e))?;
    let g = report.aggregate;
    eprintln!(
        "DSC mean {:.4} std {:.4} max {:.4} min {:.4} over {} items",
        g.mean,
        g.std,
        g.max,
        g.min,
        report.per_item.len()
    );
    Ok(())
}

/// SVG files for a run's history: `<phase>.svg` per phase (training loss by
/// epoch and validation DSC by epoch) and `dsc_progression.svg` (validation
/// DSC over run-wide steps, one line per phase).
pub fn render_report(history: &HistoryFile) -> Vec<(String, String)> {
    let mut files = Vec::new();
    for phase in Phase::ALL {
        let entries: Vec<_> = history.entries.iter().filter(|e| e.phase == phase).collect();
        if entries.is_empty() {
            continue;
        }
        let curve = |name: &str, f: &dyn Fn(&crate::curriculum::HistoryEntry) -> Option<f64>| Series {
            name: name.into(),
            points: entries
                .iter()
                .filter_map(|e| f(e).map(|y| (e.epoch as f64, y)))
                .collect(),
        };
        let loss = Chart {
            title: format!("phase {phase}: training loss"),
            x_label: "epoch".into(),
            y_label: "mean batch loss".into(),
            series: vec![
                curve("total", &|e| Some(e.loss.l_total)),
                curve("bce", &|e| Some(e.loss.l_bce)),
            ],
            y_range: None,
        };
        let dsc = Chart {
            title: format!("phase {phase}: validation DSC"),
            x_label: "epoch".into(),
            y_label: "DSC".into(),
            series: vec![
                curve("iou loss", &|e| Some(e.loss.l_iou)),
                curve("smoothed loss", &|e| Some(e.loss.l_s)),
                curve("val DSC", &|e| e.val_dsc),
            ],
            y_range: Some((0.0, 1.0)),
        };
        let name = match phase {
            Phase::Segmentation => "segmentation".to_string(),
            p => format!("phase{}", p.number()),
        };
        files.push((format!("{name}.svg"), stack(&loss.render(), &dsc.render())));
    }
    let progression = Chart {
        title: "validation DSC across phases".into(),
        x_label: "optimizer steps".into(),
        y_label: "DSC".into(),
        series: Phase::ALL
            .iter()
            .map(|&phase| Series {
                name: format!("phase {phase}"),
                points: history
                    .entries
                    .iter()
                    .filter(|e| e.phase == phase)
                    .filter_map(|e| e.val_dsc.map(|d| (e.steps as f64, d)))
                    .collect(),
            })
            .filter(|s| !s.points.is_empty())
            .collect(),
        y_range: Some((0.0, 1.0)),
    };
    files.push(("dsc_progression.svg".into(), progression.render()));
    files
}

/// Places two rendered charts one above the other in a single document.
fn stack(top: &str, bottom: &str) -> String {
    let inner = |svg: &str| {
        let start = svg.find('>').map_or(0, |i| i + 1);
        let end = svg.rfind("</svg>").unwrap_or(svg.len());
        svg[start..end].to_string()
    };
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"800\" viewBox=\"0 0 640 800\">\n<g>{}</g>\n<g transform=\"translate(0 400)\">{}</g>\n</svg>\n",
        inner(top),
        inner(bottom)
    )
}

pub fn cmd_report(a: &ReportArgs) -> Result<()> {
    let history = read_history(&a.run)?;
    fs::create_dir_all(&a.plots).map_err(|e| CksError::io(&a.plots, e))?;
    for (name, svg) in render_report(&history) {
        let path = a.plots.join(&name);
        fs::write(&path, svg).map_err(|e| CksError::io(&path, e))?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}
