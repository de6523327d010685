use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::head::{backward_from_logits, head_forward, HeadConfig, HeadWeights};
use super::layers::{kl_from_logits, Volume};
use super::loss::LossWeights;
use super::{combined_input, FeatureBundle};
use crate::datasets::{Example, Span, Task};
use crate::error::{Error, Result};
use crate::geometry::{
    argmax_point, gold_map_from_region, gold_map_gaussian, iou, normalize_threshold, rasterize,
    Region, SegMap, DEFAULT_GAUSSIAN_SIGMA,
};
use crate::metrics::{calibrate_threshold, calibration_grid, PhrasePrediction, PredictionRecord};
use crate::par::{self, Jobs};
use crate::refgames::{point_to_choice, Layout};

/// Feature bundles keyed by example id.
pub type BundleMap = BTreeMap<String, FeatureBundle>;

pub const DEFAULT_LR: f64 = 1e-4;
pub const DEFAULT_WEIGHT_DECAY: f64 = 0.01;
pub const DEFAULT_EMA_DECAY: f64 = 0.9998;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainHyper {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    /// Decoupled: every step multiplies weights by `1 - lr · weight_decay`.
    pub weight_decay: f64,
    pub ema_decay: Option<f64>,
    /// Validation cadence in steps; 0 evaluates only after the last step.
    pub eval_every: usize,
    pub loss_weights: LossWeights,
    /// Spread of the Gaussian gold map around point targets.
    pub gaussian_sigma: f64,
    /// Fixed map threshold for validation; calibrated when absent.
    pub threshold: Option<f64>,
    #[serde(skip)]
    pub jobs: Jobs,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            lr: DEFAULT_LR,
            steps: 1000,
            batch: 8,
            seed: 0,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            ema_decay: None,
            eval_every: 0,
            loss_weights: LossWeights::default(),
            gaussian_sigma: DEFAULT_GAUSSIAN_SIGMA,
            threshold: None,
            jobs: Jobs::SEQUENTIAL,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Parameter(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Parameter("batch size must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Parameter("weight decay must be non-negative".into()));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::Parameter(format!("EMA decay {d} outside [0, 1)")));
            }
        }
        if !(self.gaussian_sigma > 0.0) {
            return Err(Error::Parameter("gaussian sigma must be positive".into()));
        }
        self.loss_weights.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub mean_iou: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    /// EMA weights when averaging is on, otherwise the final iterate.
    pub weights: HeadWeights,
    /// Mean batch loss of every step.
    pub losses: Vec<f64>,
    pub evals: Vec<EvalPoint>,
}

impl TrainOutcome {
    pub fn best_eval(&self) -> Option<EvalPoint> {
        self.evals
            .iter()
            .copied()
            .fold(None, |b: Option<EvalPoint>, e| match b {
                Some(b) if b.mean_iou >= e.mean_iou => Some(b),
                _ => Some(e),
            })
    }
}

fn bundle_for<'a>(bundles: &'a BTreeMap<String, FeatureBundle>, ex: &Example) -> Result<&'a FeatureBundle> {
    bundles.get(&ex.id).ok_or_else(|| Error::Validation {
        record: ex.id.clone(),
        field: "features".into(),
        msg: "no feature bundle".into(),
    })
}

/// Gold map of the task target: a Gaussian around points, uniform over the
/// target cell for reference games.
pub fn task_gold_map(ex: &Example, sigma: f64) -> Result<SegMap> {
    match ex.task {
        Task::Point(p) => gold_map_gaussian(p, sigma, ex.image_dims),
        Task::Choice { index, n_candidates } => {
            let layout = game_layout(ex, n_candidates)?;
            gold_map_from_region(&Region::single(layout.cell_box(index), ex.image_dims)?)
        }
    }
}

fn game_layout(ex: &Example, n: usize) -> Result<Layout> {
    Layout::new(n, ex.image_dims.h / n, ex.image_dims.w)
}

/// Weighted (input, gold) terms making up one example's loss.
struct Unit {
    terms: Vec<(Volume, SegMap, f64)>,
}

fn build_unit(ex: &Example, bundle: &FeatureBundle, hyper: &TrainHyper) -> Result<Unit> {
    let mut terms = Vec::new();
    let lw = hyper.loss_weights;
    if lw.task > 0.0 {
        terms.push((
            combined_input(bundle, ex.task_query_span())?,
            task_gold_map(ex, hyper.gaussian_sigma)?,
            lw.task,
        ));
    }
    let annotated: Vec<_> = ex.annotated_phrases().collect();
    if lw.grounding > 0.0 {
        let w = lw.grounding / annotated.len().max(1) as f64;
        for p in annotated {
            let gold = gold_map_from_region(p.gold_region.as_ref().expect("annotated"))?;
            terms.push((combined_input(bundle, p.span)?, gold, w));
        }
    }
    Ok(Unit { terms })
}

fn unit_loss_grad(unit: &Unit, w: &HeadWeights) -> Result<(f64, Vec<f64>)> {
    let mut loss = 0.0;
    let mut grad = vec![0.0; w.params.len()];
    for (x, gold, weight) in &unit.terms {
        let trace = head_forward(x, w)?;
        loss += weight * kl_from_logits(gold.values(), &trace.logits);
        let dz: Vec<f64> = trace
            .map
            .values()
            .iter()
            .zip(gold.values())
            .map(|(p, s)| weight * (p - s))
            .collect();
        let g = backward_from_logits(&trace, w, &dz, false);
        for (a, b) in grad.iter_mut().zip(&g.params) {
            *a += b;
        }
    }
    Ok((loss, grad))
}

/// Mini-batch SGD on the fine-tuning loss from a seeded initialization.
///
/// Batches are drawn from a per-epoch seeded permutation; per-example
/// gradients are reduced in batch order, so results depend only on the seed
/// and not on `hyper.jobs`.
pub fn train_head(
    bundles: &BTreeMap<String, FeatureBundle>,
    train: &[Example],
    val: Option<&[Example]>,
    config: &HeadConfig,
    hyper: &TrainHyper,
) -> Result<TrainOutcome> {
    hyper.validate()?;
    let init = HeadWeights::init(config.clone(), hyper.seed)?;
    train_head_from(init, bundles, train, val, hyper)
}

/// [`train_head`] from explicit starting weights.
pub fn train_head_from(
    init: HeadWeights,
    bundles: &BTreeMap<String, FeatureBundle>,
    train: &[Example],
    val: Option<&[Example]>,
    hyper: &TrainHyper,
) -> Result<TrainOutcome> {
    let units: Vec<Unit> = train
        .iter()
        .map(|ex| build_unit(ex, bundle_for(bundles, ex)?, hyper))
        .collect::<Result<_>>()?;
    let units: Vec<Unit> = units.into_iter().filter(|u| !u.terms.is_empty()).collect();
    let mut w = init;
    let mut ema = hyper.ema_decay.map(|_| w.clone());
    let mut losses = Vec::with_capacity(hyper.steps);
    let mut evals = Vec::new();
    if hyper.steps == 0 || units.is_empty() {
        if hyper.steps > 0 {
            log::warn!("no training signal: every example lacks both task and grounding terms");
        }
        return Ok(TrainOutcome {
            weights: w,
            losses,
            evals,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x5ee_d0fb_a7c4);
    let mut order: Vec<usize> = (0..units.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let batch = hyper.batch.min(units.len());
    let decay = 1.0 - hyper.lr * hyper.weight_decay;
    for step in 0..hyper.steps {
        let mut idx = Vec::with_capacity(batch);
        while idx.len() < batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let results = par::try_map(&idx, hyper.jobs, |&i| unit_loss_grad(&units[i], &w))?;
        let mut loss = 0.0;
        let mut grad = vec![0.0; w.params.len()];
        for (l, g) in &results {
            loss += l;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        let scale = 1.0 / batch as f64;
        loss *= scale;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                step,
                msg: format!("loss {loss} with lr {}", hyper.lr),
            });
        }
        for (p, g) in w.params.iter_mut().zip(&grad) {
            *p = *p * decay - hyper.lr * g * scale;
        }
        if let (Some(e), Some(d)) = (ema.as_mut(), hyper.ema_decay) {
            for (a, p) in e.params.iter_mut().zip(&w.params) {
                *a = d * *a + (1.0 - d) * p;
            }
        }
        losses.push(loss);
        let last = step + 1 == hyper.steps;
        let due = hyper.eval_every > 0 && (step + 1) % hyper.eval_every == 0;
        if let Some(val) = val {
            if due || last {
                let current = ema.as_ref().unwrap_or(&w);
                let (mean_iou, threshold) =
                    evaluate_grounding(current, val, bundles, hyper.threshold, hyper.jobs)?;
                log::info!("step {}: loss {loss:.6}, val mean-IoU {mean_iou:.4}", step + 1);
                evals.push(EvalPoint {
                    step: step + 1,
                    mean_iou,
                    threshold,
                });
            }
        }
    }
    Ok(TrainOutcome {
        weights: ema.unwrap_or(w),
        losses,
        evals,
    })
}

pub fn predict_map(w: &HeadWeights, bundle: &FeatureBundle, span: Span) -> Result<SegMap> {
    Ok(head_forward(&combined_input(bundle, span)?, w)?.map)
}

/// Task prediction (argmax of the task map) plus a map for every phrase.
pub fn predict_record(w: &HeadWeights, ex: &Example, bundle: &FeatureBundle) -> Result<PredictionRecord> {
    let task_map = predict_map(w, bundle, ex.task_query_span())?;
    let point = argmax_point(&task_map);
    let choice = match ex.task {
        Task::Choice { n_candidates, .. } => Some(point_to_choice(point, &game_layout(ex, n_candidates)?)?),
        Task::Point(_) => None,
    };
    let phrases = ex
        .phrases
        .iter()
        .map(|p| Ok((p.span, PhrasePrediction::Map(predict_map(w, bundle, p.span)?))))
        .collect::<Result<_>>()?;
    Ok(PredictionRecord {
        id: ex.id.clone(),
        task_point: Some(point),
        task_choice: choice,
        phrases,
    })
}

/// Macro mean-IoU over the annotated phrases of `examples`, thresholding
/// maps at `threshold` or, when absent, at the calibrated best threshold.
/// Returns `(mean-IoU, threshold used)`.
pub fn evaluate_grounding(
    w: &HeadWeights,
    examples: &[Example],
    bundles: &BTreeMap<String, FeatureBundle>,
    threshold: Option<f64>,
    jobs: Jobs,
) -> Result<(f64, f64)> {
    let per_example: Vec<Vec<(SegMap, Region)>> = par::try_map(examples, jobs, |ex| {
        let b = bundle_for(bundles, ex)?;
        ex.annotated_phrases()
            .map(|p| Ok((predict_map(w, b, p.span)?, p.gold_region.clone().expect("annotated"))))
            .collect::<Result<Vec<_>>>()
    })?;
    let pairs: Vec<(SegMap, Region)> = per_example.iter().flatten().cloned().collect();
    if pairs.is_empty() {
        return Err(Error::Parameter("no annotated phrases to evaluate".into()));
    }
    let t = match threshold {
        Some(t) => t,
        None => calibrate_threshold(&pairs, &calibration_grid(), jobs)?.0,
    };
    let mut total = 0.0;
    let mut n = 0;
    for ex_pairs in per_example.iter().filter(|v| !v.is_empty()) {
        let mut s = 0.0;
        for (m, g) in ex_pairs {
            s += iou(&normalize_threshold(m, t)?, &rasterize(g)?)?;
        }
        total += s / ex_pairs.len() as f64;
        n += 1;
    }
    Ok((total / n as f64, t))
}
