//! Subcommand arguments and pipelines.
//!
//! Every argument struct doubles as the schema of the `--config` file: keys
//! are long flag names. Defaults are applied after merging so that a config
//! value is never shadowed by a flag default.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use groundcheck::alignhead::{
    predict_record, task_gold_map, train_head as fit_head, HeadConfig, HeadWeights, LossWeights, StageConfig,
    TrainHyper,
};
use groundcheck::datasets::{crop_set, load_examples, sample_fraction, Example, ExampleSet, Split, DEFAULT_CROP_WINDOW};
use groundcheck::geometry::{gold_map_from_region, Dims, Region, SegMap, DEFAULT_GAUSSIAN_SIGMA};
use groundcheck::metrics::{
    calibrate_threshold, calibration_grid, load_predictions, report, save_predictions, Aggregation,
    MetricReport, PhrasePrediction, PredictionRecord, ReportConfig, ScoringOptions, RECALL_IOU,
    REPORT_CSV_HEADER, SDR_SLACK,
};
use groundcheck::par::{self, Jobs};
use groundcheck::probe::{
    build_items, evaluate_probe, probe_report_row, separable_items, train_probe as fit_probe,
    FeatureCache, ProbeHyper, ProbeItem, DEFAULT_PROBE_LR,
};
use groundcheck::refgames::{augment_game, build_game, GameFlavor, GameRequest, SimilarityMatrix, AUGMENT_TOP_M};
use groundcheck::sweep::{sweep as run_sweep, sweep_csv, SweepConfig};
use groundcheck::synthworld::{fidelity_csv, fidelity_sweep, gen_world, simulate as sim, SimPredictor, Variant, World, WorldConfig};
use groundcheck::tensor::Tensor;

use crate::plot::{chart_from_csv, render_svg};
use crate::Failure;

/// Settings shared by every subcommand.
#[derive(Debug, Clone, Copy)]
pub struct Ctx {
    pub seed: Option<u64>,
    pub jobs: Jobs,
}

type Run = Result<(), Failure>;

fn need<T: Clone>(v: &Option<T>, flag: &str) -> Result<T, Failure> {
    v.clone()
        .ok_or_else(|| Failure::usage(format!("missing required --{flag} (flag or config key `{flag}`)")))
}

fn write_file(path: &Path, contents: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| groundcheck::Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| groundcheck::Error::io(path, e).into())
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| groundcheck::Error::io(dir, e).into())
}

/// Writes `header` + `row`, or appends `row` to an existing file with the
/// same header.
fn emit_row(path: &Path, header: &str, row: &str, append: bool) -> Run {
    if append && path.exists() {
        let existing = std::fs::read_to_string(path).map_err(|e| groundcheck::Error::io(path, e))?;
        if !existing.is_empty() {
            if existing.lines().next() != Some(header) {
                return Err(Failure::new(
                    "report",
                    format!("{}: header differs from the metric report header", path.display()),
                ));
            }
            let sep = if existing.ends_with('\n') { "" } else { "\n" };
            return write_file(path, &format!("{existing}{sep}{row}\n"));
        }
    }
    write_file(path, &format!("{header}\n{row}\n"))
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse().map_err(|e: groundcheck::Error| e.to_string())
}

/// Examples from a JSONL file, or from every split of a world directory.
fn load_any(path: &Path) -> Result<Vec<Example>, Failure> {
    if !path.is_dir() {
        return Ok(load_examples(path)?.examples);
    }
    let mut out = Vec::new();
    for s in [Split::Train, Split::Dev, Split::Test, Split::Validation] {
        let p = path.join(format!("{s}.jsonl"));
        if p.exists() {
            out.extend(load_examples(&p)?.examples);
        }
    }
    if out.is_empty() {
        return Err(Failure::new("io", format!("{}: no <split>.jsonl files", path.display())));
    }
    Ok(out)
}

fn only_split(examples: Vec<Example>, split: Option<Split>) -> Vec<Example> {
    match split {
        Some(s) => examples.into_iter().filter(|e| e.split == s).collect(),
        None => examples,
    }
}

/// Examples and the predictions that belong to them.
fn examples_and_predictions(
    examples: &Option<PathBuf>,
    predictions: &Option<PathBuf>,
    split: Option<Split>,
) -> Result<(Vec<Example>, Vec<PredictionRecord>), Failure> {
    let examples = only_split(load_any(&need(examples, "examples")?)?, split);
    let mut preds = load_predictions(need(predictions, "predictions")?)?;
    if split.is_some() {
        let ids: BTreeSet<&str> = examples.iter().map(|e| e.id.as_str()).collect();
        preds.retain(|p| ids.contains(p.id.as_str()));
    }
    Ok((examples, preds))
}

// ---------------------------------------------------------------- gold-maps

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DTypeArg {
    F32,
    F64,
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct GoldMapsArgs {
    /// Examples: a JSONL file or a world directory (required)
    #[arg(long, value_name = "PATH")]
    examples: Option<PathBuf>,
    /// Output directory for `<id>.task.gtf`, `<id>.phrase-<k>.gtf` and index.csv (required)
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Standard deviation in pixels of the Gaussian around point targets [default: 40]
    #[arg(long, value_name = "PX")]
    sigma: Option<f64>,
    /// Element type of the written maps [default: f64]
    #[arg(long, value_enum)]
    dtype: Option<DTypeArg>,
}

fn map_tensor(map: &SegMap, dtype: DTypeArg) -> Result<Tensor, Failure> {
    let d = map.dims();
    Ok(match dtype {
        DTypeArg::F64 => Tensor::from_f64(vec![d.h, d.w], map.values().to_vec())?,
        DTypeArg::F32 => Tensor::from_f32(vec![d.h, d.w], map.values().iter().map(|&v| v as f32).collect())?,
    })
}

pub fn gold_maps(a: &GoldMapsArgs, ctx: &Ctx) -> Run {
    let examples = load_any(&need(&a.examples, "examples")?)?;
    let out = need(&a.out, "out")?;
    let sigma = a.sigma.unwrap_or(DEFAULT_GAUSSIAN_SIGMA);
    let dtype = a.dtype.unwrap_or(DTypeArg::F64);
    let maps = par::try_map(&examples, ctx.jobs, |ex| {
        let span = ex.task_query_span();
        let mut v = vec![(format!("{}.task.gtf", ex.id), format!("task,{},{}", span.start, span.end), task_gold_map(ex, sigma)?)];
        for (k, p) in ex.phrases.iter().enumerate() {
            if let Some(r) = &p.gold_region {
                let kind = format!("phrase,{},{}", p.span.start, p.span.end);
                v.push((format!("{}.phrase-{k}.gtf", ex.id), kind, gold_map_from_region(r)?));
            }
        }
        Ok::<_, groundcheck::Error>(v)
    })?;
    create_dir(&out)?;
    let mut index = String::from("id,kind,span_start,span_end,file,sum\n");
    for (ex, ms) in examples.iter().zip(&maps) {
        for (file, kind, m) in ms {
            map_tensor(m, dtype)?.save(out.join(file))?;
            let _ = writeln!(index, "{},{kind},{file},{:.12}", ex.id, m.sum());
        }
    }
    write_file(&out.join("index.csv"), &index)?;
    log::info!("wrote {} maps for {} examples", maps.iter().map(Vec::len).sum::<usize>(), examples.len());
    Ok(())
}

// -------------------------------------------------------------- build-games

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlavorArg {
    /// 10 candidates per game (target + 9 distractors), 200 px cells
    KilogramRg,
    /// 5 distractors per game, 384 px cells
    FlickrRg,
}

impl From<FlavorArg> for GameFlavor {
    fn from(f: FlavorArg) -> Self {
        match f {
            FlavorArg::KilogramRg => GameFlavor::KilogramRg,
            FlavorArg::FlickrRg => GameFlavor::FlickrRg,
        }
    }
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct BuildGamesArgs {
    /// Similarity CSV with rows `caption_id,image_id,score` (required)
    #[arg(long, value_name = "CSV")]
    similarity: Option<PathBuf>,
    /// Caption CSV with rows `caption_id,target_image[,group]`; images of the target's group are
    /// never distractors (required)
    #[arg(long, value_name = "CSV")]
    captions: Option<PathBuf>,
    /// Game protocol (required)
    #[arg(long, value_enum)]
    flavor: Option<FlavorArg>,
    /// Output JSONL, one game per caption (required)
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Sample distractors from the top-M most similar images (training augmentation)
    #[arg(long)]
    augment: bool,
    /// Pool size for --augment [default: 20]
    #[arg(long, value_name = "M")]
    top_m: Option<usize>,
}

struct CaptionRow {
    caption: String,
    target: String,
    group: Option<String>,
}

fn read_captions(path: &Path) -> Result<Vec<CaptionRow>, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| groundcheck::Error::io(path, e))?;
    let mut rows = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (k == 0 && line.starts_with("caption_id")) {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        let (caption, target, group) = match cols[..] {
            [c, t] => (c, t, None),
            [c, t, g] => (c, t, Some(g.to_string())),
            _ => {
                return Err(groundcheck::Error::Parse {
                    path: path.to_path_buf(),
                    line: k + 1,
                    msg: format!("expected 2 or 3 columns, got {}", cols.len()),
                }
                .into())
            }
        };
        rows.push(CaptionRow {
            caption: caption.into(),
            target: target.into(),
            group,
        });
    }
    Ok(rows)
}

pub fn build_games(a: &BuildGamesArgs, ctx: &Ctx) -> Run {
    let sim = SimilarityMatrix::load_csv(need(&a.similarity, "similarity")?)?;
    let captions = read_captions(&need(&a.captions, "captions")?)?;
    let flavor: GameFlavor = need(&a.flavor, "flavor")?.into();
    let out = need(&a.out, "out")?;
    let seed = ctx.seed.unwrap_or(0);
    let pool = sim.images();
    let groups: HashMap<String, String> = captions
        .iter()
        .filter_map(|c| c.group.clone().map(|g| (c.target.clone(), g)))
        .collect();
    let mut text = String::new();
    for (k, c) in captions.iter().enumerate() {
        let scores = sim.row(&c.caption).ok_or_else(|| {
            Failure::new("construction", format!("caption {} has no similarity scores", c.caption))
        })?;
        let req = GameRequest {
            caption_id: &c.caption,
            target_id: &c.target,
            scores,
            pool: &pool,
            groups: (!groups.is_empty()).then_some(&groups),
            layout_cell: (flavor.cell(), flavor.cell()),
            seed: seed.wrapping_add(k as u64),
        };
        let game = if a.augment {
            augment_game(&req, a.top_m.unwrap_or(AUGMENT_TOP_M), flavor.n_distractors())?
        } else {
            build_game(&req, flavor.n_distractors())?
        };
        text.push_str(&serde_json::to_string(&game).expect("games serialize"));
        text.push('\n');
    }
    write_file(&out, &text)?;
    log::info!("wrote {} games", captions.len());
    Ok(())
}

// --------------------------------------------------------------------- crop

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct CropArgs {
    /// Input examples JSONL (required)
    #[arg(long, value_name = "FILE")]
    examples: Option<PathBuf>,
    /// Output examples JSONL (required)
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Kept rows as TOP,BOTTOM (half-open) [default: 760,1560]
    #[arg(long, value_name = "TOP,BOTTOM", value_delimiter = ',')]
    window: Option<Vec<usize>>,
}

pub fn crop(a: &CropArgs, _ctx: &Ctx) -> Run {
    let set = load_examples(need(&a.examples, "examples")?)?;
    let out = need(&a.out, "out")?;
    let window = match a.window.as_deref() {
        None => DEFAULT_CROP_WINDOW,
        Some(&[top, bottom]) => (top, bottom),
        Some(w) => return Err(Failure::usage(format!("--window needs TOP,BOTTOM, got {} values", w.len()))),
    };
    let cropped = crop_set(&set, window)?;
    log::info!("kept {} of {} examples", cropped.len(), set.len());
    write_file(&out, &cropped.to_jsonl())
}

// -------------------------------------------------------------------- synth

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantArg {
    /// Point at the first mentioned object
    Sdr,
    /// Choose the described image among stacked candidates
    Game,
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct SynthArgs {
    /// Output world directory (required)
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Full world configuration (JSON); the flags below override it
    #[arg(long, value_name = "FILE")]
    world_config: Option<PathBuf>,
    /// Number of examples
    #[arg(long, value_name = "N")]
    n_examples: Option<usize>,
    /// Task variant
    #[arg(long, value_enum)]
    variant: Option<VariantArg>,
    /// Candidates per game for --variant game [default: 10]
    #[arg(long, value_name = "N")]
    n_images: Option<usize>,
    /// Feature noise standard deviation
    #[arg(long, value_name = "SIGMA")]
    sigma_f: Option<f64>,
    /// Per-example noise spread (0 = every example equally noisy)
    #[arg(long, value_name = "S")]
    noise_spread: Option<f64>,
    /// Task-noise probability used by simulated predictors
    #[arg(long, value_name = "ETA")]
    eta: Option<f64>,
    /// Fraction of examples in the dev split
    #[arg(long, value_name = "F")]
    dev_fraction: Option<f64>,
    /// Fraction of examples in the test split
    #[arg(long, value_name = "F")]
    test_fraction: Option<f64>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| groundcheck::Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Failure::new("config", format!("{}: {e}", path.display())))
}

pub fn synth(a: &SynthArgs, ctx: &Ctx) -> Run {
    let out = need(&a.out, "out")?;
    let mut cfg: WorldConfig = match &a.world_config {
        Some(p) => read_json(p)?,
        None => WorldConfig::default(),
    };
    if let Some(v) = a.n_examples {
        cfg.n_examples = v;
    }
    match (a.variant, a.n_images) {
        (Some(VariantArg::Sdr), _) => cfg.variant = Variant::Sdr,
        (Some(VariantArg::Game), n) => cfg.variant = Variant::Game { n_images: n.unwrap_or(10) },
        (None, Some(n)) => match cfg.variant {
            Variant::Game { .. } => cfg.variant = Variant::Game { n_images: n },
            Variant::Sdr => return Err(Failure::usage("--n-images needs --variant game".into())),
        },
        (None, None) => {}
    }
    let set = |dst: &mut f64, v: Option<f64>| {
        if let Some(v) = v {
            *dst = v;
        }
    };
    set(&mut cfg.sigma_f, a.sigma_f);
    set(&mut cfg.noise_spread, a.noise_spread);
    set(&mut cfg.eta, a.eta);
    set(&mut cfg.dev_fraction, a.dev_fraction);
    set(&mut cfg.test_fraction, a.test_fraction);
    if let Some(s) = ctx.seed {
        cfg.seed = s;
    }
    let world = gen_world(&cfg, ctx.jobs)?;
    world.save(&out)?;
    log::info!("wrote {} examples to {}", cfg.n_examples, out.display());
    Ok(())
}

// ----------------------------------------------------------------- simulate

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct SimulateArgs {
    /// World directory written by `synth` (required)
    #[arg(long, value_name = "DIR")]
    world: Option<PathBuf>,
    /// Grounding fidelity: write predictions JSONL to --out
    #[arg(long, value_name = "RHO", conflicts_with = "rhos")]
    rho: Option<f64>,
    /// Fidelity list: write one fidelity-sweep CSV row per value to --out
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    rhos: Option<Vec<f64>>,
    /// Task noise overriding the world's eta
    #[arg(long, value_name = "ETA")]
    eta: Option<f64>,
    /// Output file (required)
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

pub fn simulate(a: &SimulateArgs, ctx: &Ctx) -> Run {
    let dir = need(&a.world, "world")?;
    let out = need(&a.out, "out")?;
    let mut cfg: WorldConfig = read_json(&dir.join("world.json"))?;
    if let Some(eta) = a.eta {
        cfg.eta = eta;
    }
    let seed = ctx.seed.unwrap_or(0);
    match (a.rho, &a.rhos) {
        (Some(rho), None) => {
            let examples = load_any(&dir)?;
            let preds = sim(&examples, &cfg, &SimPredictor::new(rho, seed)?, ctx.jobs)?;
            if let Some(d) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(d)?;
            }
            save_predictions(&preds, &out, "maps")?;
        }
        (None, Some(rhos)) => {
            let rows = fidelity_sweep(&cfg, rhos, cfg.eta, seed, ctx.jobs)?;
            write_file(&out, &fidelity_csv(&rows))?;
        }
        _ => return Err(Failure::usage("give exactly one of --rho and --rhos".into())),
    }
    Ok(())
}

// --------------------------------------------------------------------- eval

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationArg {
    /// Mean of per-example mean-IoU
    Macro,
    /// Mean over all annotated phrases
    Micro,
}

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct EvalArgs {
    /// Examples: a JSONL file or a world directory (required)
    #[arg(long, value_name = "PATH")]
    examples: Option<PathBuf>,
    /// Predictions JSONL (required)
    #[arg(long, value_name = "FILE")]
    predictions: Option<PathBuf>,
    /// Score only this split (train, dev, test, validation)
    #[arg(long, value_name = "SPLIT", value_parser = parse_split)]
    split: Option<Split>,
    /// Threshold on max-normalized predicted maps [default: 0.5]
    #[arg(long, value_name = "T")]
    threshold: Option<f64>,
    /// Slack radius in pixels for pointing accuracy [default: 40]
    #[arg(long, value_name = "PX")]
    slack: Option<f64>,
    /// Mean-IoU aggregation [default: macro]
    #[arg(long, value_enum)]
    aggregation: Option<AggregationArg>,
    /// Row tag in the report [default: eval]
    #[arg(long)]
    tag: Option<String>,
    /// Report CSV (stdout when absent)
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Append a row to an existing report instead of overwriting it
    #[arg(long)]
    append: bool,
}

fn scoring(threshold: Option<f64>, slack: Option<f64>) -> ScoringOptions {
    ScoringOptions {
        slack: slack.unwrap_or(SDR_SLACK),
        threshold: threshold.unwrap_or(0.5),
        recall_iou: RECALL_IOU,
    }
}

fn score(
    examples: &[Example],
    preds: &[PredictionRecord],
    threshold: Option<f64>,
    slack: Option<f64>,
    aggregation: Option<AggregationArg>,
    jobs: Jobs,
) -> Result<MetricReport, Failure> {
    let rc = ReportConfig {
        scoring: scoring(threshold, slack),
        aggregation: match aggregation.unwrap_or(AggregationArg::Macro) {
            AggregationArg::Macro => Aggregation::Macro,
            AggregationArg::Micro => Aggregation::Micro,
        },
        jobs,
    };
    Ok(report(examples, preds, &rc)?)
}

pub fn eval(a: &EvalArgs, ctx: &Ctx) -> Run {
    let (examples, preds) = examples_and_predictions(&a.examples, &a.predictions, a.split)?;
    let mut r = score(&examples, &preds, a.threshold, a.slack, a.aggregation, ctx.jobs)?;
    r.tag = a.tag.clone().unwrap_or_else(|| "eval".into());
    log::info!("{}", r.to_text().trim_end());
    match &a.out {
        Some(p) => emit_row(p, REPORT_CSV_HEADER, &r.csv_row(), a.append),
        None => {
            print!("{}", r.to_csv());
            Ok(())
        }
    }
}

// ---------------------------------------------------------------- correlate

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct CorrelateArgs {
    /// Examples: a JSONL file or a world directory (required)
    #[arg(long, value_name = "PATH")]
    examples: Option<PathBuf>,
    /// Predictions JSONL (required)
    #[arg(long, value_name = "FILE")]
    predictions: Option<PathBuf>,
    /// Use only this split (train, dev, test, validation)
    #[arg(long, value_name = "SPLIT", value_parser = parse_split)]
    split: Option<Split>,
    /// Threshold on max-normalized predicted maps [default: 0.5]
    #[arg(long, value_name = "T")]
    threshold: Option<f64>,
    /// Slack radius in pixels for pointing accuracy [default: 40]
    #[arg(long, value_name = "PX")]
    slack: Option<f64>,
    /// Output CSV (stdout when absent)
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

pub const CORRELATION_CSV_HEADER: &str = "n_examples,n_grounded,correlation,correlation_variant";

pub fn correlate(a: &CorrelateArgs, ctx: &Ctx) -> Run {
    let (examples, preds) = examples_and_predictions(&a.examples, &a.predictions, a.split)?;
    let r = score(&examples, &preds, a.threshold, a.slack, None, ctx.jobs)?;
    if let Some(e) = &r.correlation_error {
        log::warn!("correlation undefined: {e}");
    }
    let csv = format!(
        "{CORRELATION_CSV_HEADER}\n{},{},{},{}\n",
        r.n_examples,
        r.n_grounded,
        r.correlation.map_or("n/a".to_string(), |c| format!("{:.6}", c.r)),
        r.correlation.map_or("n/a".to_string(), |c| c.variant.to_string()),
    );
    match &a.out {
        Some(p) => write_file(p, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

// ---------------------------------------------------------------- calibrate

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct CalibrateArgs {
    /// Examples: a JSONL file or a world directory (required)
    #[arg(long, value_name = "PATH")]
    examples: Option<PathBuf>,
    /// Predictions JSONL with map predictions (required)
    #[arg(long, value_name = "FILE")]
    predictions: Option<PathBuf>,
    /// Calibrate on this split only (usually dev)
    #[arg(long, value_name = "SPLIT", value_parser = parse_split)]
    split: Option<Split>,
    /// Output CSV `threshold,mean_iou,selected` (stdout when absent)
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

pub fn calibrate(a: &CalibrateArgs, ctx: &Ctx) -> Run {
    let (examples, preds) = examples_and_predictions(&a.examples, &a.predictions, a.split)?;
    let by_id: HashMap<&str, &PredictionRecord> = preds.iter().map(|p| (p.id.as_str(), p)).collect();
    let mut pairs: Vec<(SegMap, Region)> = Vec::new();
    for ex in &examples {
        let Some(p) = by_id.get(ex.id.as_str()) else {
            continue;
        };
        for ph in ex.annotated_phrases() {
            if let Some(PhrasePrediction::Map(m)) = p.phrase(ph.span) {
                pairs.push((m.clone(), ph.gold_region.clone().expect("annotated")));
            }
        }
    }
    if pairs.is_empty() {
        return Err(Failure::new("calibrate", "no annotated phrase has a map prediction".into()));
    }
    let (best, profile) = calibrate_threshold(&pairs, &calibration_grid(), ctx.jobs)?;
    let mut csv = String::from("threshold,mean_iou,selected\n");
    for (t, v) in profile {
        let _ = writeln!(csv, "{t:.2},{v:.6},{}", u8::from(t == best));
    }
    log::info!("selected threshold {best:.2} over {} phrases", pairs.len());
    match &a.out {
        Some(p) => write_file(p, &csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

// --------------------------------------------------------------- train-head

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct TrainHeadArgs {
    /// World directory written by `synth` (required)
    #[arg(long, value_name = "DIR")]
    world: Option<PathBuf>,
    /// Output directory: head.json, weights.gtf, losses.csv, evals.csv and validation
    /// predictions.jsonl (required)
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Output channels of the doubling stages [default: 256,128,64]
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    channels: Option<Vec<usize>>,
    /// Learning rate [default: 1e-4]
    #[arg(long)]
    lr: Option<f64>,
    /// Optimizer steps [default: 1000]
    #[arg(long)]
    steps: Option<usize>,
    /// Examples per step [default: 8]
    #[arg(long)]
    batch: Option<usize>,
    /// Decoupled weight decay [default: 0.01]
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Keep an exponential moving average of the weights with this decay (e.g. 0.9998)
    #[arg(long)]
    ema_decay: Option<f64>,
    /// Validate every N steps (0 = after the last step only) [default: 0]
    #[arg(long, value_name = "N")]
    eval_every: Option<usize>,
    /// Gaussian spread in pixels of point-target gold maps [default: 40]
    #[arg(long, value_name = "PX")]
    gaussian_sigma: Option<f64>,
    /// Fixed validation map threshold (calibrated when absent)
    #[arg(long, value_name = "T")]
    threshold: Option<f64>,
    /// Task-loss weight [default: 0.5]
    #[arg(long)]
    task_weight: Option<f64>,
    /// Grounding-loss weight [default: 0.5]
    #[arg(long)]
    grounding_weight: Option<f64>,
    /// Percentage of training phrase annotations kept [default: 100]
    #[arg(long, value_name = "PCT")]
    fraction: Option<f64>,
    /// Training split [default: train]
    #[arg(long, value_name = "SPLIT", value_parser = parse_split)]
    train_split: Option<Split>,
    /// Validation split [default: dev when present]
    #[arg(long, value_name = "SPLIT", value_parser = parse_split)]
    val_split: Option<Split>,
}

fn split_or_empty(world: &World, s: Split) -> Vec<Example> {
    world.split(s).to_vec()
}

fn write_losses(path: &Path, losses: &[f64]) -> Run {
    let mut s = String::from("step,loss\n");
    for (k, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{},{l:.12e}", k + 1);
    }
    write_file(path, &s)
}

pub fn train_head(a: &TrainHeadArgs, ctx: &Ctx) -> Run {
    let world = World::load(need(&a.world, "world")?)?;
    let out = need(&a.out, "out")?;
    let d = TrainHyper::default();
    let hyper = TrainHyper {
        lr: a.lr.unwrap_or(d.lr),
        steps: a.steps.unwrap_or(d.steps),
        batch: a.batch.unwrap_or(d.batch),
        seed: ctx.seed.unwrap_or(0),
        weight_decay: a.weight_decay.unwrap_or(d.weight_decay),
        ema_decay: a.ema_decay,
        eval_every: a.eval_every.unwrap_or(0),
        loss_weights: LossWeights::new(
            a.task_weight.unwrap_or(d.loss_weights.task),
            a.grounding_weight.unwrap_or(d.loss_weights.grounding),
        )?,
        gaussian_sigma: a.gaussian_sigma.unwrap_or(d.gaussian_sigma),
        threshold: a.threshold,
        jobs: ctx.jobs,
    };
    let cfg = &world.config;
    let channels = a.channels.clone().unwrap_or_else(|| groundcheck::alignhead::DEFAULT_STAGE_CHANNELS.to_vec());
    let head = HeadConfig {
        in_channels: cfg.d_p + cfg.d_q,
        stages: channels.iter().map(|&c| StageConfig::doubling(c)).collect(),
        target: cfg.example_dims(),
    };
    let train = split_or_empty(&world, a.train_split.unwrap_or(Split::Train));
    if train.is_empty() {
        return Err(Failure::new("parameter", "training split is empty".into()));
    }
    let train = match a.fraction {
        Some(f) => sample_fraction(&ExampleSet::new(train)?, f, hyper.seed)?.examples,
        None => train,
    };
    let val = match a.val_split {
        Some(s) => Some(split_or_empty(&world, s)),
        None => Some(split_or_empty(&world, Split::Dev)).filter(|v| !v.is_empty()),
    };
    let outcome = fit_head(&world.bundles, &train, val.as_deref(), &head, &hyper)?;
    create_dir(&out)?;
    outcome.weights.save(&out)?;
    write_losses(&out.join("losses.csv"), &outcome.losses)?;
    let mut evals = String::from("step,mean_iou,threshold\n");
    for e in &outcome.evals {
        let _ = writeln!(evals, "{},{:.6},{:.2}", e.step, e.mean_iou, e.threshold);
    }
    write_file(&out.join("evals.csv"), &evals)?;
    let mut hyper_json = serde_json::to_string_pretty(&hyper).expect("hyper serializes");
    hyper_json.push('\n');
    write_file(&out.join("hyper.json"), &hyper_json)?;
    if let Some(val) = &val {
        let preds = par::try_map(val, ctx.jobs, |ex: &Example| {
            predict_record(&outcome.weights, ex, &world.bundles[&ex.id])
        })?;
        save_predictions(&preds, out.join("predictions.jsonl"), "maps")?;
    }
    if let Some(b) = outcome.best_eval() {
        log::info!("best validation mean-IoU {:.4} at step {}", b.mean_iou, b.step);
    }
    Ok(())
}

// -------------------------------------------------------------- train-probe

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct TrainProbeArgs {
    /// World directory written by `synth` (required)
    #[arg(long, value_name = "DIR")]
    world: Option<PathBuf>,
    /// Trained head directory (required unless --separable)
    #[arg(long, value_name = "DIR")]
    head: Option<PathBuf>,
    /// Output directory: probe.json, losses.csv, evals.csv (required)
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Probe synthetic linearly separable features (gold-cell indicator plus noise) instead of a head
    #[arg(long)]
    separable: bool,
    /// Feature grid of --separable as ROWS,COLS [default: twice the patch grid]
    #[arg(long, value_name = "ROWS,COLS", value_delimiter = ',')]
    separable_grid: Option<Vec<usize>>,
    /// Noise channels of --separable [default: 4]
    #[arg(long, value_name = "N")]
    noise_channels: Option<usize>,
    /// Learning rate [default: 1e-2]
    #[arg(long)]
    lr: Option<f64>,
    /// Optimizer steps [default: 1000]
    #[arg(long)]
    steps: Option<usize>,
    /// Phrases per step [default: 16]
    #[arg(long)]
    batch: Option<usize>,
    /// Validate every N steps (0 = after the last step only) [default: 0]
    #[arg(long, value_name = "N")]
    eval_every: Option<usize>,
    /// Fixed map threshold (calibrated when absent)
    #[arg(long, value_name = "T")]
    threshold: Option<f64>,
    /// Stage-map cache directory keyed by head checksum
    #[arg(long, value_name = "DIR")]
    cache: Option<PathBuf>,
    /// Metric report CSV the `probe` row is appended to [default: <out>/report.csv]
    #[arg(long, value_name = "FILE")]
    report: Option<PathBuf>,
    /// Training split [default: train]
    #[arg(long, value_name = "SPLIT", value_parser = parse_split)]
    train_split: Option<Split>,
    /// Validation split [default: dev when present, else the training split]
    #[arg(long, value_name = "SPLIT", value_parser = parse_split)]
    val_split: Option<Split>,
}

pub fn train_probe(a: &TrainProbeArgs, ctx: &Ctx) -> Run {
    let world = World::load(need(&a.world, "world")?)?;
    let out = need(&a.out, "out")?;
    let seed = ctx.seed.unwrap_or(0);
    let train_split = a.train_split.unwrap_or(Split::Train);
    let val_split = a
        .val_split
        .unwrap_or(if world.split(Split::Dev).is_empty() { train_split } else { Split::Dev });
    let train = split_or_empty(&world, train_split);
    let val = split_or_empty(&world, val_split);
    if train.is_empty() || val.is_empty() {
        return Err(Failure::new("parameter", "training or validation split is empty".into()));
    }
    let items = |examples: &[Example]| -> Result<Vec<ProbeItem>, Failure> {
        if a.separable {
            let dims = world.config.example_dims();
            let patch = world.config.patch;
            let grid = match a.separable_grid.as_deref() {
                Some(&[r, c]) => Dims::new(r, c),
                Some(g) => return Err(Failure::usage(format!("--separable-grid needs ROWS,COLS, got {} values", g.len()))),
                None if patch % 2 == 0 => Dims::new(2 * dims.h / patch, 2 * dims.w / patch),
                None => Dims::new(dims.h / patch, dims.w / patch),
            };
            Ok(separable_items(examples, grid, a.noise_channels.unwrap_or(4), seed)?)
        } else {
            let head = HeadWeights::load(need(&a.head, "head")?)?;
            let cache = a.cache.as_ref().map(FeatureCache::new);
            Ok(build_items(&head, examples, &world.bundles, cache.as_ref(), ctx.jobs)?)
        }
    };
    let train_items = items(&train)?;
    let val_items = if val_split == train_split { train_items.clone() } else { items(&val)? };
    let d = ProbeHyper::default();
    let hyper = ProbeHyper {
        lr: a.lr.unwrap_or(DEFAULT_PROBE_LR),
        steps: a.steps.unwrap_or(d.steps),
        batch: a.batch.unwrap_or(d.batch),
        seed,
        eval_every: a.eval_every.unwrap_or(0),
        threshold: a.threshold,
        jobs: ctx.jobs,
    };
    let outcome = fit_probe(&train_items, Some(&val_items), &hyper)?;
    create_dir(&out)?;
    outcome.weights.save(out.join("probe.json"))?;
    write_losses(&out.join("losses.csv"), &outcome.losses)?;
    let mut evals = String::from("step,mean_iou,threshold\n");
    for (step, m, t) in &outcome.evals {
        let _ = writeln!(evals, "{step},{m:.6},{t:.2}");
    }
    write_file(&out.join("evals.csv"), &evals)?;
    let (miou, t) = evaluate_probe(&outcome.weights, &val_items, a.threshold, ctx.jobs)?;
    let n_examples = val_items.iter().map(|i| i.example_id.as_str()).collect::<BTreeSet<_>>().len();
    let row = probe_report_row(n_examples, val_items.len(), miou, t);
    let report_path = a.report.clone().unwrap_or_else(|| out.join("report.csv"));
    emit_row(&report_path, REPORT_CSV_HEADER, &row, true)?;
    log::info!("probe mean-IoU {miou:.4} at threshold {t:.2}");
    Ok(())
}

// -------------------------------------------------------------------- sweep

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct SweepArgs {
    /// Sweep experiment (JSON: world, stages, hyper, fractions, sample_seed) [default: built-in
    /// pointing world]
    #[arg(long, value_name = "FILE")]
    experiment: Option<PathBuf>,
    /// Annotation percentages [default: 0,5,10,20,50,70,100]
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    fractions: Option<Vec<f64>>,
    /// Optimizer steps per fraction
    #[arg(long)]
    steps: Option<usize>,
    /// Output CSV `fraction,accuracy,mean_iou,correlation` (required)
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

pub fn sweep(a: &SweepArgs, ctx: &Ctx) -> Run {
    let out = need(&a.out, "out")?;
    let mut cfg: SweepConfig = match &a.experiment {
        Some(p) => read_json(p)?,
        None => SweepConfig::default(),
    };
    if let Some(f) = &a.fractions {
        cfg.fractions = f.clone();
    }
    if let Some(s) = a.steps {
        cfg.hyper.steps = s;
    }
    if let Some(s) = ctx.seed {
        cfg.world.seed = s;
        cfg.hyper.seed = s;
        cfg.sample_seed = s;
    }
    let rows = run_sweep(&cfg, ctx.jobs)?;
    write_file(&out, &sweep_csv(&rows))
}

// --------------------------------------------------------------------- plot

#[derive(Debug, Default, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct PlotArgs {
    /// Metric CSV with a header row; `n/a` cells are skipped (required)
    #[arg(long, value_name = "CSV")]
    input: Option<PathBuf>,
    /// Output SVG (required)
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
    /// Abscissa column [default: first column]
    #[arg(long, value_name = "NAME")]
    x: Option<String>,
    /// Plotted columns [default: every other column]
    #[arg(long, value_name = "LIST", value_delimiter = ',')]
    columns: Option<Vec<String>>,
    /// Chart title [default: input file name]
    #[arg(long)]
    title: Option<String>,
}

pub fn plot(a: &PlotArgs, _ctx: &Ctx) -> Run {
    let input = need(&a.input, "input")?;
    let out = need(&a.out, "out")?;
    let text = std::fs::read_to_string(&input).map_err(|e| groundcheck::Error::io(&input, e))?;
    let chart = chart_from_csv(&text, a.x.as_deref(), a.columns.as_deref())?;
    let title = a.title.clone().unwrap_or_else(|| {
        input
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    write_file(&out, &render_svg(&chart, &title))
}
