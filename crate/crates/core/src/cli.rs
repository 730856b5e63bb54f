//! Command-line entry point: one pipeline stage per invocation.
//!
//! Every verb writes `run_manifest.json` into its output directory. Exit
//! codes: 0 success, 1 user error (bad flags, inputs or config), 2 internal
//! failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use candle_core::DType;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::aggregator::{aggregate_threshold, Aggregator, Verdict, WSI_ROOT};
use crate::attention::grad_cam;
use crate::config::RunConfig;
use crate::dataset::{load_dataset, load_slide, write_dataset};
use crate::detector::{train_detector, write_detect_log};
use crate::error::{param_err, Error, Result};
use crate::metrics::{evaluate, make_folds, MetricsReport};
use crate::model::TileModel;
use crate::params::Checkpoint;
use crate::synth::{gen_dataset, Slide, SynthConfig};
use crate::tiling::save_overlay;
use crate::train::{ablation_csv, ablation_grid, run_ablation, score_slides, train_tile_classifier, train_wsi, write_csv_rows};
use crate::types::{Label, TileImage, CANDIDA_INDEX};

pub const VERSION: &str = env!("WSI_SCREEN_VERSION");
pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Parser)]
#[command(name = "wsi-screen", version = VERSION, about = "Attention-guided whole-slide candida screening")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Pre-train the detector and export its encoder.
    PretrainDetect(DataArgs),
    /// Train the tile classifier.
    TrainTile(TrainTileArgs),
    /// Train the slide aggregator on top of a frozen tile classifier.
    TrainWsi(DataArgs),
    /// Slide verdicts from a trained checkpoint.
    Infer(InferArgs),
    /// Grad-CAM overlays for tiles.
    Cam(CamArgs),
    /// Metrics of predictions against ground truth.
    Eval(EvalArgs),
    /// Train and test all PT/SSA/CL combinations over k folds.
    Ablate(AblateArgs),
}

/// Flags shared by every verb. Explicit flags override `--config`.
#[derive(Debug, Clone, Args)]
pub struct Common {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Tiles kept per slide [default: 10]
    #[arg(long)]
    pub k: Option<usize>,
    /// Weight of the contrastive terms [default: 0.1]
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, overrides_with = "no_pt")]
    pub pt: bool,
    #[arg(long, overrides_with = "pt")]
    pub no_pt: bool,
    #[arg(long, overrides_with = "no_ssa")]
    pub ssa: bool,
    #[arg(long, overrides_with = "ssa")]
    pub no_ssa: bool,
    #[arg(long, overrides_with = "no_cl")]
    pub cl: bool,
    #[arg(long, overrides_with = "cl")]
    pub no_cl: bool,
}

fn switch(on: bool, off: bool) -> Option<bool> {
    match (on, off) {
        (true, _) => Some(true),
        (_, true) => Some(false),
        _ => None,
    }
}

impl Common {
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(k) = self.k {
            cfg.k = k;
        }
        if let Some(a) = self.alpha {
            cfg.alpha = a;
        }
        if let Some(v) = switch(self.pt, self.no_pt) {
            cfg.pt = v;
        }
        if let Some(v) = switch(self.ssa, self.no_ssa) {
            cfg.ssa = v;
        }
        if let Some(v) = switch(self.cl, self.no_cl) {
            cfg.cl = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn data(&self) -> Result<&Path> {
        self.data.as_deref().ok_or_else(|| param_err!("--data is required"))
    }

    fn ckpt(&self) -> Result<Checkpoint> {
        Checkpoint::load(self.ckpt.as_deref().ok_or_else(|| param_err!("--ckpt is required"))?)
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 100)]
    pub tiles: usize,
    #[arg(long, default_value_t = 0)]
    pub slides: usize,
    #[arg(long, default_value_t = 12)]
    pub tiles_per_slide: usize,
    #[arg(long, default_value_t = 128)]
    pub tile_size: usize,
    #[arg(long, default_value_t = 0.5)]
    pub positive_ratio: f64,
    #[arg(long, default_value_t = 0.5)]
    pub slide_positive_ratio: f64,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct TrainTileArgs {
    #[command(flatten)]
    pub common: Common,
    /// Validation dataset; without it the first fold's split of `--data` is used.
    #[arg(long)]
    pub val: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[command(flatten)]
    pub common: Common,
    /// Slide manifests to score; defaults to every slide under `--data`.
    #[arg(long)]
    pub slide: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CamArgs {
    #[command(flatten)]
    pub common: Common,
    /// Tile ids to visualise; defaults to every stand-alone tile.
    #[arg(long)]
    pub tile: Vec<String>,
    #[arg(long)]
    pub limit: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long)]
    pub truth: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Comma-separated PT/SSA/CL bit strings, e.g. `000,111`; defaults to all eight.
    #[arg(long)]
    pub grid: Option<String>,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::PretrainDetect(_) => "pretrain-detect",
            Command::TrainTile(_) => "train-tile",
            Command::TrainWsi(_) => "train-wsi",
            Command::Infer(_) => "infer",
            Command::Cam(_) => "cam",
            Command::Eval(_) => "eval",
            Command::Ablate(_) => "ablate",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Synth(a) => &a.common,
            Command::PretrainDetect(a) | Command::TrainWsi(a) => &a.common,
            Command::TrainTile(a) => &a.common,
            Command::Infer(a) => &a.common,
            Command::Cam(a) => &a.common,
            Command::Eval(a) => &a.common,
            Command::Ablate(a) => &a.common,
        }
    }
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    verb: &'a str,
    version: &'a str,
    args: Vec<String>,
    config: &'a RunConfig,
    started_at: f64,
    finished_at: f64,
    outputs: Vec<String>,
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

/// One row of `verdicts.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRow {
    pub slide_id: String,
    pub score: f32,
    pub pred: u8,
    pub label: Option<u8>,
}

/// One row of `labels.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub slide_id: String,
    pub label: u8,
}

fn synth(args: &SynthArgs, cfg: &RunConfig) -> Result<Vec<String>> {
    let sc = SynthConfig {
        tiles: args.tiles,
        positive_ratio: args.positive_ratio,
        slides: args.slides,
        tiles_per_slide: args.tiles_per_slide,
        slide_positive_ratio: args.slide_positive_ratio,
        tile_size: args.tile_size,
        seed: cfg.seed,
    };
    let ds = gen_dataset(&sc)?;
    let out = &args.common.out;
    write_dataset(&ds, out)?;
    let mut outputs = vec!["annotations.csv".to_string(), "tiles/".into()];
    if !ds.slides.is_empty() {
        let rows: Vec<TruthRow> = ds
            .slides
            .iter()
            .map(|s| TruthRow {
                slide_id: s.manifest.slide_id.clone(),
                label: s.manifest.slide_label.index() as u8,
            })
            .collect();
        write_csv_rows(&rows, &out.join("labels.csv"))?;
        outputs.extend(["slides/".to_string(), "labels.csv".into()]);
    }
    Ok(outputs)
}

fn pretrain_detect(args: &DataArgs, cfg: &RunConfig) -> Result<Vec<String>> {
    let ds = load_dataset(args.common.data()?)?;
    let run = train_detector(&ds.tiles, &cfg.detector()?, &cfg.detect_train())?;
    let out = &args.common.out;
    run.encoder_ckpt.save(&out.join("detector.ckpt"))?;
    run.head_ckpt.save(&out.join("detector_head.ckpt"))?;
    write_detect_log(&run.log, &out.join("detect_log.csv"))?;
    Ok(vec!["detector.ckpt".into(), "detector_head.ckpt".into(), "detect_log.csv".into()])
}

fn select(tiles: &[TileImage], ids: &[String]) -> Vec<TileImage> {
    let wanted: std::collections::HashSet<&str> = ids.iter().map(String::as_str).collect();
    tiles.iter().filter(|t| wanted.contains(t.tile_id.as_str())).cloned().collect()
}

fn train_tile(args: &TrainTileArgs, cfg: &RunConfig) -> Result<Vec<String>> {
    let ds = load_dataset(args.common.data()?)?;
    let (train, val) = match &args.val {
        Some(v) => (ds.tiles, load_dataset(v)?.tiles),
        None => {
            let items: Vec<(String, Label)> = ds.tiles.iter().map(|t| (t.tile_id.clone(), t.label)).collect();
            let fold = &make_folds(&items, cfg.n_folds, cfg.seed)?[0];
            let mut train_ids = fold.train.clone();
            train_ids.extend(fold.test.iter().cloned());
            (select(&ds.tiles, &train_ids), select(&ds.tiles, &fold.val))
        }
    };
    let pretrained = if cfg.pt { Some(args.common.ckpt()?) } else { None };
    let run = train_tile_classifier(&train, &val, cfg, pretrained.as_ref())?;
    let out = &args.common.out;
    run.checkpoint.save(&out.join("tile.ckpt"))?;
    write_csv_rows(&run.log, &out.join("train_log.csv"))?;
    write_csv_rows(&run.epochs, &out.join("epoch_log.csv"))?;
    let mut outputs = vec!["tile.ckpt".to_string(), "train_log.csv".into(), "epoch_log.csv".into()];
    if !val.is_empty() {
        let m = crate::train::evaluate_tiles(&run.model, &val)?;
        write_json(&out.join("metrics.json"), &MetricsReport::from_folds(vec![m])?)?;
        outputs.push("metrics.json".into());
    }
    Ok(outputs)
}

fn train_wsi_verb(args: &DataArgs, cfg: &RunConfig) -> Result<Vec<String>> {
    let tile_ckpt = args.common.ckpt()?;
    let model = TileModel::from_checkpoint(&tile_ckpt, DType::F32)?;
    let ds = load_dataset(args.common.data()?)?;
    let run = train_wsi(&model, &ds.slides, cfg)?;
    let mut ckpt = tile_ckpt.clone();
    ckpt.merge(&run.checkpoint);
    let out = &args.common.out;
    ckpt.save(&out.join("wsi.ckpt"))?;
    write_csv_rows(&run.log, &out.join("wsi_log.csv"))?;
    Ok(vec!["wsi.ckpt".into(), "wsi_log.csv".into()])
}

fn has_aggregator(ckpt: &Checkpoint) -> bool {
    let prefix = format!("{WSI_ROOT}.");
    ckpt.arrays.keys().any(|k| k.starts_with(&prefix))
}

fn infer(args: &InferArgs, cfg: &RunConfig) -> Result<Vec<String>> {
    let ckpt = args.common.ckpt()?;
    let model = TileModel::from_checkpoint(&ckpt, DType::F32)?;
    let slides: Vec<Slide> = if args.slide.is_empty() {
        load_dataset(args.common.data()?)?.slides
    } else {
        args.slide
            .iter()
            .map(|p| load_slide(p, args.common.data.as_deref()))
            .collect::<Result<_>>()?
    };
    if slides.is_empty() {
        return Err(Error::Dataset("no slides to score".into()));
    }
    let inputs = score_slides(&model, &slides)?;
    let tau = cfg.tau as f32;
    let verdicts: Vec<Verdict> = if has_aggregator(&ckpt) {
        let agg = Aggregator::from_checkpoint(&ckpt, DType::F32)?;
        inputs.iter().map(|s| agg.decide(&s.results, tau)).collect::<Result<_>>()?
    } else {
        inputs
            .iter()
            .map(|s| aggregate_threshold(&s.results, cfg.k, tau))
            .collect::<Result<_>>()?
    };
    let rows: Vec<VerdictRow> = inputs
        .iter()
        .zip(&verdicts)
        .map(|(s, v)| VerdictRow {
            slide_id: s.slide_id.clone(),
            score: v.score,
            pred: v.positive as u8,
            label: Some(s.label.index() as u8),
        })
        .collect();
    write_csv_rows(&rows, &args.common.out.join("verdicts.csv"))?;
    Ok(vec!["verdicts.csv".into()])
}

fn cam(args: &CamArgs, _cfg: &RunConfig) -> Result<Vec<String>> {
    let model = TileModel::from_checkpoint(&args.common.ckpt()?, DType::F32)?;
    let ds = load_dataset(args.common.data()?)?;
    let mut tiles: Vec<TileImage> = if args.tile.is_empty() {
        ds.tiles
    } else {
        let all: Vec<TileImage> = ds.tiles.into_iter().chain(ds.slides.into_iter().flat_map(|s| s.tiles)).collect();
        let picked = select(&all, &args.tile);
        if picked.len() != args.tile.len() {
            return Err(Error::Dataset("some requested tiles are not in the dataset".into()));
        }
        picked
    };
    if let Some(n) = args.limit {
        tiles.truncate(n);
    }
    let dir = args.common.out.join("cam");
    create_dir(&dir)?;
    for tile in &tiles {
        let heat = grad_cam(&model, tile, CANDIDA_INDEX)?;
        save_overlay(&tile.pixels, &heat.data, &dir.join(format!("{}.png", tile.tile_id)))?;
    }
    Ok(vec!["cam/".into()])
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

fn eval(args: &EvalArgs, _cfg: &RunConfig) -> Result<Vec<String>> {
    let preds: Vec<VerdictRow> = read_rows(&args.pred)?;
    let truth: Vec<TruthRow> = read_rows(&args.truth)?;
    let by_id: std::collections::HashMap<&str, u8> = truth.iter().map(|t| (t.slide_id.as_str(), t.label)).collect();
    let mut scores = Vec::with_capacity(preds.len());
    let mut positive = Vec::with_capacity(preds.len());
    for p in &preds {
        let label = by_id
            .get(p.slide_id.as_str())
            .ok_or_else(|| Error::Dataset(format!("no ground truth for '{}'", p.slide_id)))?;
        scores.push(p.score as f64);
        positive.push(Label::from_index(*label as usize)?.is_positive());
    }
    let report = MetricsReport::from_folds(vec![evaluate(&scores, &positive)?])?;
    write_json(&args.common.out.join("metrics.json"), &report)?;
    Ok(vec!["metrics.json".into()])
}

/// Parses `000,111`-style grids (PT, SSA, CL bits).
pub fn parse_grid(s: &str) -> Result<Vec<[bool; 3]>> {
    s.split(',')
        .map(|item| {
            let bits: Vec<char> = item.trim().chars().collect();
            if bits.len() != 3 || bits.iter().any(|c| *c != '0' && *c != '1') {
                return Err(param_err!("grid entry '{item}' is not three 0/1 flags"));
            }
            Ok([bits[0] == '1', bits[1] == '1', bits[2] == '1'])
        })
        .collect()
}

fn ablate(args: &AblateArgs, cfg: &RunConfig) -> Result<Vec<String>> {
    let ds = load_dataset(args.common.data()?)?;
    let grid = match &args.grid {
        Some(g) => parse_grid(g)?,
        None => ablation_grid(),
    };
    let items: Vec<(String, Label)> = ds.tiles.iter().map(|t| (t.tile_id.clone(), t.label)).collect();
    let folds = make_folds(&items, cfg.n_folds, cfg.seed)?;
    let pretrained = match &args.common.ckpt {
        Some(p) => Some(Checkpoint::load(p)?),
        None => None,
    };
    let rows = run_ablation(&ds.tiles, &folds, &grid, cfg, pretrained.as_ref())?;
    let out = &args.common.out;
    write_text(&out.join("ablation.csv"), &ablation_csv(&rows)?)?;
    write_json(&out.join("metrics.json"), &rows)?;
    Ok(vec!["ablation.csv".into(), "metrics.json".into()])
}

fn dispatch(cmd: &Command, cfg: &RunConfig) -> Result<Vec<String>> {
    create_dir(&cmd.common().out)?;
    match cmd {
        Command::Synth(a) => synth(a, cfg),
        Command::PretrainDetect(a) => pretrain_detect(a, cfg),
        Command::TrainTile(a) => train_tile(a, cfg),
        Command::TrainWsi(a) => train_wsi_verb(a, cfg),
        Command::Infer(a) => infer(a, cfg),
        Command::Cam(a) => cam(a, cfg),
        Command::Eval(a) => eval(a, cfg),
        Command::Ablate(a) => ablate(a, cfg),
    }
}

fn exit_code(e: &Error) -> i32 {
    if e.is_user_error() {
        1
    } else {
        2
    }
}

/// Parses `argv` (including the program name), runs the verb and returns
/// the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let started_at = unix_now();
    let cfg = match cli.command.common().run_config() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    let result = dispatch(&cli.command, &cfg).and_then(|outputs| {
        let manifest = RunManifest {
            verb: cli.command.name(),
            version: VERSION,
            args: argv.iter().map(|a| a.to_string_lossy().into_owned()).collect(),
            config: &cfg,
            started_at,
            finished_at: unix_now(),
            outputs,
        };
        write_json(&cli.command.common().out.join(MANIFEST_FILE), &manifest)
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn common(args: &[&str]) -> Common {
        let mut argv = vec!["wsi-screen", "eval", "--pred", "p", "--truth", "t"];
        argv.extend_from_slice(args);
        match Cli::try_parse_from(argv).unwrap().command {
            Command::Eval(a) => a.common,
            _ => unreachable!(),
        }
    }

    #[test]
    fn flags_override_defaults() {
        let cfg = common(&["--seed", "5", "--k", "3", "--alpha", "0.2", "--no-pt", "--no-cl"])
            .run_config()
            .unwrap();
        assert_eq!((cfg.seed, cfg.k, cfg.alpha), (5, 3, 0.2));
        assert!(!cfg.pt && cfg.ssa && !cfg.cl);
        let d = common(&[]).run_config().unwrap();
        assert_eq!((d.k, d.alpha), (10, 0.1));
    }

    #[test]
    fn last_switch_wins() {
        assert!(common(&["--no-ssa", "--ssa"]).run_config().unwrap().ssa);
        assert!(!common(&["--ssa", "--no-ssa"]).run_config().unwrap().ssa);
    }

    #[test]
    fn config_file_is_overridden_by_flags() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        fs::write(&p, "seed = 9\nepochs = 2\ncl = false\n").unwrap();
        let cfg = common(&["--config", p.to_str().unwrap(), "--cl"]).run_config().unwrap();
        assert_eq!((cfg.seed, cfg.epochs), (9, 2));
        assert!(cfg.cl);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(run(["wsi-screen", "frobnicate"]), 1);
        assert_eq!(run(["wsi-screen", "eval"]), 1);
        assert_eq!(run(["wsi-screen", "--help"]), 0);
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        assert_eq!(run(["wsi-screen", "train-tile", "--out", out]), 1);
    }

    #[test]
    fn grid_parsing() {
        assert_eq!(parse_grid("000,111").unwrap(), vec![[false; 3], [true; 3]]);
        assert_eq!(parse_grid("101").unwrap(), vec![[true, false, true]]);
        assert!(parse_grid("10").is_err());
        assert!(parse_grid("102").is_err());
    }
}
