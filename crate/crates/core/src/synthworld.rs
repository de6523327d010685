//! Synthetic oracle world.
//!
//! Objects are signature vectors rather than rendered pixels: every object
//! type owns a unit patch signature (and a text signature, identical to it
//! when `d_p == d_q`). An image plants distinct types at distinct patch
//! cells over Gaussian background noise; the text names each object with a
//! two-token phrase `the objN` whose token vectors average to that type's
//! text signature plus noise. Gold regions are the objects' cell boxes.
//!
//! Two variants exist: `sdr` (the task target is the centre of object 0's
//! cell, pooled from object 0's phrase) and `game` (the text describes one
//! of `n_images` vertically stacked images and the task is to pick it).
//!
//! All randomness derives from the world seed through fixed ChaCha streams:
//! stream `2i` drives example `i`'s layout, `2i + 1` its features, so
//! example structure can be generated without paying for features.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::alignhead::FeatureBundle;
use crate::datasets::{load_examples, Example, ExampleSet, Phrase, Span, Split, Task};
use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, Dims, Point, Region};
use crate::metrics::{
    report, CorrelationVariant, MetricReport, PhrasePrediction, PredictionRecord, ReportConfig,
    ScoredBox,
};
use crate::par::{self, Jobs};
use crate::refgames::Layout;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", deny_unknown_fields)]
pub enum Variant {
    Sdr,
    Game { n_images: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub n_examples: usize,
    /// Size of one image (one candidate cell for games).
    pub image: Dims,
    pub patch: usize,
    pub n_objects: usize,
    /// Number of object types.
    pub vocab: usize,
    pub d_p: usize,
    pub d_q: usize,
    /// Feature noise: background cells and token vectors.
    pub sigma_f: f64,
    /// Per-example difficulty: example `i` uses noise `sigma_f · (1 + noise_spread · u_i)`
    /// with `u_i` uniform in `[0, 1)`. Zero gives every example the same noise.
    pub noise_spread: f64,
    /// Probability that a simulated task answer fails despite correct
    /// grounding.
    pub eta: f64,
    pub seed: u64,
    pub variant: Variant,
    pub dev_fraction: f64,
    pub test_fraction: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_examples: 100,
            image: Dims::new(64, 64),
            patch: 8,
            n_objects: 3,
            vocab: 8,
            d_p: 8,
            d_q: 8,
            sigma_f: 0.1,
            noise_spread: 0.0,
            eta: 0.0,
            seed: 0,
            variant: Variant::Sdr,
            dev_fraction: 0.0,
            test_fraction: 0.0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if self.n_examples == 0 || self.patch == 0 || self.d_p == 0 || self.d_q == 0 {
            return bad("examples, patch size and feature widths must be positive".into());
        }
        if self.image.is_empty() || !self.image.h.is_multiple_of(self.patch) || !self.image.w.is_multiple_of(self.patch) {
            return bad(format!(
                "{}x{} image is not divisible by patch size {}",
                self.image.h, self.image.w, self.patch
            ));
        }
        if self.n_objects == 0 {
            return bad("need at least one object per image".into());
        }
        let cells = self.cells_per_image();
        if self.n_objects > cells {
            return bad(format!("{} objects do not fit in {cells} grid cells", self.n_objects));
        }
        if self.n_objects > self.vocab {
            return bad(format!("{} objects need at least as many types, vocab is {}", self.n_objects, self.vocab));
        }
        let finite_non_neg = |v: f64| v >= 0.0 && v.is_finite();
        if !finite_non_neg(self.sigma_f) || !finite_non_neg(self.noise_spread) || !(0.0..=1.0).contains(&self.eta) {
            return bad("sigma_f and noise_spread must be >= 0 and eta in [0, 1]".into());
        }
        if let Variant::Game { n_images } = self.variant {
            if n_images < 2 {
                return bad("a game needs at least two images".into());
            }
        }
        let (d, t) = (self.dev_fraction, self.test_fraction);
        if !(d >= 0.0 && t >= 0.0 && d + t <= 1.0) {
            return bad("split fractions must be non-negative and sum to at most 1".into());
        }
        Ok(())
    }

    pub fn cells_per_image(&self) -> usize {
        (self.image.h / self.patch) * (self.image.w / self.patch)
    }

    fn n_images(&self) -> usize {
        match self.variant {
            Variant::Sdr => 1,
            Variant::Game { n_images } => n_images,
        }
    }

    /// Dimensions of an example's full (possibly stacked) image.
    pub fn example_dims(&self) -> Dims {
        Dims::new(self.image.h * self.n_images(), self.image.w)
    }

    /// Patch cells in the full image.
    pub fn total_cells(&self) -> usize {
        self.cells_per_image() * self.n_images()
    }

    fn split_of(&self, i: usize) -> Split {
        let n = self.n_examples as f64;
        let n_test = (self.test_fraction * n).round() as usize;
        let n_dev = (self.dev_fraction * n).round() as usize;
        let n_train = self.n_examples.saturating_sub(n_test + n_dev);
        if i < n_train {
            Split::Train
        } else if i < n_train + n_dev {
            Split::Dev
        } else {
            Split::Test
        }
    }
}

/// Generated examples (grouped by split) and their feature bundles.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub config: WorldConfig,
    pub sets: BTreeMap<Split, ExampleSet>,
    pub bundles: BTreeMap<String, FeatureBundle>,
}

impl World {
    pub fn examples(&self) -> impl Iterator<Item = &Example> {
        self.sets.values().flat_map(|s| s.examples.iter())
    }

    pub fn split(&self, s: Split) -> &[Example] {
        self.sets.get(&s).map_or(&[], |set| &set.examples)
    }

    /// Writes `world.json`, one `<split>.jsonl` per split and
    /// `features/<id>.{patches,tokens}.gtf`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg_path = dir.join("world.json");
        let mut text = serde_json::to_string_pretty(&self.config)?;
        text.push('\n');
        std::fs::write(&cfg_path, text).map_err(|e| Error::io(&cfg_path, e))?;
        for (split, set) in &self.sets {
            set.save(dir.join(format!("{split}.jsonl")))?;
        }
        let fdir = dir.join("features");
        for b in self.bundles.values() {
            b.save(&fdir)?;
        }
        Ok(())
    }

    /// Loads a directory written by [`World::save`] (or any directory with
    /// the same layout).
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let cfg_path = dir.join("world.json");
        let text = std::fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
        let config: WorldConfig = serde_json::from_str(&text)?;
        let mut sets = BTreeMap::new();
        for s in [Split::Train, Split::Dev, Split::Test] {
            let p = dir.join(format!("{s}.jsonl"));
            if p.exists() {
                sets.insert(s, load_examples(&p)?);
            }
        }
        let bundles = load_bundles(dir.join("features"), sets.values().flat_map(|s| s.examples.iter()))?;
        Ok(World { config, sets, bundles })
    }
}

/// Loads the feature bundle of every example from `dir`.
pub fn load_bundles<'a>(
    dir: impl AsRef<Path>,
    examples: impl IntoIterator<Item = &'a Example>,
) -> Result<BTreeMap<String, FeatureBundle>> {
    let dir = dir.as_ref();
    examples
        .into_iter()
        .map(|e| Ok((e.id.clone(), FeatureBundle::load(dir, &e.id, e.image_dims)?)))
        .collect()
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn unit_vector(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// `(patch signatures, text signatures)` of every object type.
fn signatures(cfg: &WorldConfig) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut rng = stream_rng(cfg.seed, u64::MAX);
    let patch: Vec<Vec<f64>> = (0..cfg.vocab).map(|_| unit_vector(&mut rng, cfg.d_p)).collect();
    let text = if cfg.d_q == cfg.d_p {
        patch.clone()
    } else {
        (0..cfg.vocab).map(|_| unit_vector(&mut rng, cfg.d_q)).collect()
    };
    (patch, text)
}

/// Objects of one image: `(cell index within the image, type)`.
type Scene = Vec<(usize, usize)>;

struct Layout1 {
    scenes: Vec<Scene>,
    target_image: usize,
}

fn draw_layout(cfg: &WorldConfig, i: usize) -> Layout1 {
    let mut rng = stream_rng(cfg.seed, 2 * i as u64);
    let cells = cfg.cells_per_image();
    let scenes = (0..cfg.n_images())
        .map(|_| {
            let cs = sample(&mut rng, cells, cfg.n_objects);
            let ts = sample(&mut rng, cfg.vocab, cfg.n_objects);
            cs.iter().zip(ts.iter()).collect()
        })
        .collect();
    let target_image = rng.random_range(0..cfg.n_images());
    Layout1 { scenes, target_image }
}

fn cell_box(cfg: &WorldConfig, image: usize, cell: usize) -> BoundingBox {
    let gw = cfg.image.w / cfg.patch;
    let (r, c) = (cell / gw, cell % gw);
    let y0 = image * cfg.image.h + r * cfg.patch;
    BoundingBox {
        x_min: c * cfg.patch,
        y_min: y0,
        x_max: (c + 1) * cfg.patch,
        y_max: y0 + cfg.patch,
    }
}

fn box_center(b: BoundingBox) -> Point {
    Point::new(
        (b.x_min + b.x_max - 1) as f64 / 2.0,
        (b.y_min + b.y_max - 1) as f64 / 2.0,
    )
}

fn example_id(i: usize) -> String {
    format!("synth-{i:05}")
}

fn build_example(cfg: &WorldConfig, i: usize, lay: &Layout1) -> Result<Example> {
    let dims = cfg.example_dims();
    let scene = &lay.scenes[lay.target_image];
    let mut text = String::from("find");
    let mut phrases = Vec::with_capacity(scene.len());
    for (k, &(cell, ty)) in scene.iter().enumerate() {
        text.push_str(if k == 0 { " the " } else { " and the " });
        text.push_str(&format!("obj{ty}"));
        // Tokens: find the objA and the objB ... → phrase k starts at 1 + 3k.
        let start = 1 + 3 * k;
        phrases.push(Phrase {
            span: Span::new(start, start + 1),
            surface: format!("the obj{ty}"),
            gold_region: Some(Region::single(cell_box(cfg, lay.target_image, cell), dims)?),
        });
    }
    let tokens = crate::datasets::tokenize(&text);
    let (task, task_span) = match cfg.variant {
        Variant::Sdr => (
            Task::Point(box_center(cell_box(cfg, 0, scene[0].0))),
            Some(phrases[0].span),
        ),
        Variant::Game { n_images } => (
            Task::Choice {
                index: lay.target_image,
                n_candidates: n_images,
            },
            None,
        ),
    };
    let id = example_id(i);
    Ok(Example {
        image_ref: format!("synth/{id}"),
        text_id: id.clone(),
        id,
        split: cfg.split_of(i),
        image_dims: dims,
        text,
        tokens,
        task,
        task_span,
        phrases,
    })
}

/// Noise level of example `i`, drawn from its own stream so that a zero
/// spread leaves every other draw untouched.
pub fn example_sigma(cfg: &WorldConfig, i: usize) -> f64 {
    if cfg.noise_spread == 0.0 {
        return cfg.sigma_f;
    }
    let u: f64 = stream_rng(cfg.seed ^ DIFFICULTY_SALT, i as u64).random();
    cfg.sigma_f * (1.0 + cfg.noise_spread * u)
}

const DIFFICULTY_SALT: u64 = 0xd1ff_1c01_7e5a_17ed;

fn build_bundle(
    cfg: &WorldConfig,
    i: usize,
    lay: &Layout1,
    ex: &Example,
    sigs: &(Vec<Vec<f64>>, Vec<Vec<f64>>),
) -> Result<FeatureBundle> {
    let mut rng = stream_rng(cfg.seed, 2 * i as u64 + 1);
    let noise = Normal::new(0.0, example_sigma(cfg, i)).map_err(|e| Error::Parameter(e.to_string()))?;
    let gw = cfg.image.w / cfg.patch;
    let gh_img = cfg.image.h / cfg.patch;
    let grid = Dims::new(gh_img * cfg.n_images(), gw);
    let mut patches: Vec<f64> = (0..grid.len() * cfg.d_p).map(|_| noise.sample(&mut rng)).collect();
    for (img, scene) in lay.scenes.iter().enumerate() {
        for &(cell, ty) in scene {
            let row = img * gh_img + cell / gw;
            let o = (row * gw + cell % gw) * cfg.d_p;
            patches[o..o + cfg.d_p].copy_from_slice(&sigs.0[ty]);
        }
    }
    let mut tokens: Vec<f64> = (0..ex.tokens.len() * cfg.d_q).map(|_| noise.sample(&mut rng)).collect();
    let target = &lay.scenes[lay.target_image];
    for (p, &(_, ty)) in ex.phrases.iter().zip(target) {
        for t in p.span.start..=p.span.end {
            for (k, v) in tokens[t * cfg.d_q..(t + 1) * cfg.d_q].iter_mut().enumerate() {
                *v += sigs.1[ty][k];
            }
        }
        // Centre the span's noise so the pooled query is signature + noise
        // with the configured spread (and exactly the signature at σ = 0).
        let n = p.span.len() as f64;
        let mean_noise: Vec<f64> = (0..cfg.d_q)
            .map(|k| {
                (p.span.start..=p.span.end)
                    .map(|t| tokens[t * cfg.d_q + k] - sigs.1[ty][k])
                    .sum::<f64>()
                    / n
            })
            .collect();
        let fresh: Vec<f64> = (0..cfg.d_q).map(|_| noise.sample(&mut rng)).collect();
        for t in p.span.start..=p.span.end {
            for k in 0..cfg.d_q {
                tokens[t * cfg.d_q + k] += fresh[k] - mean_noise[k];
            }
        }
    }
    FeatureBundle::new(ex.id.clone(), ex.image_dims, grid, cfg.d_p, patches, cfg.d_q, tokens)
}

fn group(cfg: &WorldConfig, examples: Vec<Example>) -> Result<BTreeMap<Split, ExampleSet>> {
    let mut by: BTreeMap<Split, Vec<Example>> = BTreeMap::new();
    for e in examples {
        by.entry(e.split).or_default().push(e);
    }
    by.into_iter()
        .map(|(s, v)| {
            let mut set = ExampleSet::new(v)?;
            set.provenance.insert("source".into(), "synthworld".into());
            set.provenance.insert("seed".into(), cfg.seed.to_string());
            Ok((s, set))
        })
        .collect()
}

/// Examples only (no features); identical to the examples of [`gen_world`].
pub fn gen_examples(cfg: &WorldConfig, jobs: Jobs) -> Result<BTreeMap<Split, ExampleSet>> {
    cfg.validate()?;
    let examples = par::map_range(cfg.n_examples, jobs, |i| build_example(cfg, i, &draw_layout(cfg, i)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    group(cfg, examples)
}

pub fn gen_world(cfg: &WorldConfig, jobs: Jobs) -> Result<World> {
    cfg.validate()?;
    let sigs = signatures(cfg);
    let pairs = par::map_range(cfg.n_examples, jobs, |i| {
        let lay = draw_layout(cfg, i);
        let ex = build_example(cfg, i, &lay)?;
        let b = build_bundle(cfg, i, &lay, &ex, &sigs)?;
        Ok((ex, b))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let mut bundles = BTreeMap::new();
    let mut examples = Vec::with_capacity(pairs.len());
    for (e, b) in pairs {
        bundles.insert(e.id.clone(), b);
        examples.push(e);
    }
    Ok(World {
        config: cfg.clone(),
        sets: group(cfg, examples)?,
        bundles,
    })
}

/// Simulated model with grounding fidelity `rho`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimPredictor {
    pub rho: f64,
    pub seed: u64,
}

impl SimPredictor {
    pub fn new(rho: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::Parameter(format!("fidelity {rho} outside [0, 1]")));
        }
        Ok(SimPredictor { rho, seed })
    }
}

fn example_index(id: &str) -> u64 {
    id.strip_prefix("synth-")
        .and_then(|s| s.parse().ok())
        .unwrap_or_else(|| {
            // Foreign ids still get a fixed stream.
            id.bytes().fold(0xcbf29ce484222325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100000001b3))
        })
}

/// Per phrase: the gold box with probability `rho`, else a uniformly random
/// cell box. Per task: the right answer iff every phrase was grounded
/// correctly and a `1 - eta` coin passes; otherwise a uniform guess (a
/// random candidate, or a random cell centre for pointing).
///
/// Every random draw is made regardless of outcome, so predictors that
/// differ only in `rho` share their randomness.
pub fn simulate_example(ex: &Example, cfg: &WorldConfig, p: &SimPredictor) -> Result<PredictionRecord> {
    let mut rng = stream_rng(p.seed, example_index(&ex.id));
    let n_cells = cfg.total_cells();
    let cells_per_image = cfg.cells_per_image();
    let mut chain_ok = true;
    let mut phrases = Vec::with_capacity(ex.phrases.len());
    for ph in &ex.phrases {
        let u: f64 = rng.random();
        let random_cell = rng.random_range(0..n_cells);
        let random_box = cell_box(cfg, random_cell / cells_per_image, random_cell % cells_per_image);
        let bbox = match (&ph.gold_region, u < p.rho) {
            (Some(g), true) => g.boxes()[0],
            _ => {
                if let Some(g) = &ph.gold_region {
                    chain_ok &= g.boxes()[0] == random_box;
                }
                random_box
            }
        };
        phrases.push((ph.span, PhrasePrediction::Boxes(vec![ScoredBox { bbox, conf: 1.0 }])));
    }
    let coin: f64 = rng.random();
    let success = chain_ok && coin >= cfg.eta;
    let (task_point, task_choice) = match ex.task {
        Task::Point(gold) => {
            let guess = rng.random_range(0..cells_per_image);
            let point = if success { gold } else { box_center(cell_box(cfg, 0, guess)) };
            (point, None)
        }
        Task::Choice { index, n_candidates } => {
            let guess = rng.random_range(0..n_candidates);
            let choice = if success { index } else { guess };
            let layout = Layout::new(n_candidates, ex.image_dims.h / n_candidates, ex.image_dims.w)?;
            (layout.cell_center(choice), Some(choice))
        }
    };
    Ok(PredictionRecord {
        id: ex.id.clone(),
        task_point: Some(task_point),
        task_choice,
        phrases,
    })
}

pub fn simulate(
    examples: &[Example],
    cfg: &WorldConfig,
    p: &SimPredictor,
    jobs: Jobs,
) -> Result<Vec<PredictionRecord>> {
    par::try_map(examples, jobs, |e| simulate_example(e, cfg, p))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FidelityRow {
    pub rho: f64,
    pub eta: f64,
    pub report: MetricReport,
}

pub const FIDELITY_CSV_HEADER: &str = "rho,eta,n_examples,accuracy,mean_iou,correlation,correlation_variant";

impl FidelityRow {
    pub fn csv_row(&self) -> String {
        let r = &self.report;
        format!(
            "{:.4},{:.4},{},{:.6},{},{},{}",
            self.rho,
            self.eta,
            r.n_examples,
            r.accuracy,
            crate::metrics::fmt_opt(r.mean_iou),
            crate::metrics::fmt_opt(r.correlation.map(|c| c.r)),
            r.correlation
                .map_or(expected_variant(&r.tag), |c| c.variant)
        )
    }
}

fn expected_variant(tag: &str) -> CorrelationVariant {
    if tag == "sdr" {
        CorrelationVariant::PearsonNegDistance
    } else {
        CorrelationVariant::PointBiserial
    }
}

/// Simulates and scores every `rho` on one world with task noise `eta`
/// (overriding `cfg.eta`). The predictor seed is shared across rows.
pub fn fidelity_sweep(
    cfg: &WorldConfig,
    rhos: &[f64],
    eta: f64,
    predictor_seed: u64,
    jobs: Jobs,
) -> Result<Vec<FidelityRow>> {
    let cfg = WorldConfig { eta, ..cfg.clone() };
    let sets = gen_examples(&cfg, jobs)?;
    let examples: Vec<Example> = sets.into_values().flat_map(|s| s.examples).collect();
    let tag = match cfg.variant {
        Variant::Sdr => "sdr",
        Variant::Game { .. } => "game",
    };
    let rc = ReportConfig {
        jobs,
        ..ReportConfig::default()
    };
    rhos.iter()
        .map(|&rho| {
            let p = SimPredictor::new(rho, predictor_seed)?;
            let preds = simulate(&examples, &cfg, &p, jobs)?;
            let mut report = report(&examples, &preds, &rc)?;
            report.tag = tag.into();
            Ok(FidelityRow { rho, eta, report })
        })
        .collect()
}

pub fn fidelity_csv(rows: &[FidelityRow]) -> String {
    let mut s = format!("{FIDELITY_CSV_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}
