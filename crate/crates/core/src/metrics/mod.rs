//! Task metrics, grounding metrics, task–grounding correlation and report
//! aggregation.

mod correlation;
pub mod predictions;

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::datasets::{Example, Task};
use crate::error::{Error, Result};
use crate::geometry::{iou, normalize_threshold, rasterize, Point, Region, SegMap};
use crate::par::{self, Jobs};
use crate::refgames::{point_to_choice, Layout};

pub use correlation::{pearson, point_biserial};
pub use predictions::{
    load_predictions, parse_predictions, save_predictions, PhrasePrediction, PredictionRecord,
    ScoredBox,
};

/// Slack radius, in pixels, within which a predicted point counts as correct.
pub const SDR_SLACK: f64 = 40.0;
/// Overlap needed for a ranked box to count as a recall hit.
pub const RECALL_IOU: f64 = 0.5;
pub const RECALL_KS: [usize; 3] = [1, 5, 10];

pub fn sdr_accuracy(pred: Point, gold: Point, slack: f64) -> bool {
    pred.distance(&gold) <= slack
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "variant", content = "value")]
pub enum TaskOutcome {
    /// Pixel distance between predicted and gold point.
    Continuous(f64),
    /// Whether the chosen candidate was the target.
    Binary(bool),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskScore {
    pub id: String,
    pub text_id: String,
    pub outcome: TaskOutcome,
    /// Success under the task's own accuracy rule (slack radius for points).
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundingScore {
    pub id: String,
    pub phrase_ious: Vec<f64>,
    /// Mean over annotated phrases; `None` when the example has none.
    pub mean_iou: Option<f64>,
    /// Annotated phrases without any prediction (scored 0).
    pub n_missing: usize,
    /// Per annotated phrase: recall@k hits for each k in [`RECALL_KS`], when
    /// the phrase was predicted as ranked boxes.
    pub recall_hits: Vec<Option<[bool; 3]>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoringOptions {
    pub slack: f64,
    /// Threshold applied to max-normalized predicted maps.
    pub threshold: f64,
    pub recall_iou: f64,
}

impl Default for ScoringOptions {
    fn default() -> Self {
        ScoringOptions {
            slack: SDR_SLACK,
            threshold: 0.5,
            recall_iou: RECALL_IOU,
        }
    }
}

pub fn score_task(ex: &Example, pred: &PredictionRecord, slack: f64) -> Result<TaskScore> {
    let missing = || Error::Validation {
        record: ex.id.clone(),
        field: "task_point".into(),
        msg: "prediction carries no task output".into(),
    };
    let outcome = match ex.task {
        Task::Point(gold) => {
            let p = pred.task_point.ok_or_else(missing)?;
            TaskOutcome::Continuous(p.distance(&gold))
        }
        Task::Choice {
            index,
            n_candidates,
        } => {
            let choice = match (pred.task_choice, pred.task_point) {
                (Some(c), _) => c,
                (None, Some(p)) => {
                    let layout = Layout::new(
                        n_candidates,
                        ex.image_dims.h / n_candidates,
                        ex.image_dims.w,
                    )?;
                    point_to_choice(p, &layout)?
                }
                (None, None) => return Err(missing()),
            };
            TaskOutcome::Binary(choice == index)
        }
    };
    let correct = match outcome {
        TaskOutcome::Continuous(d) => d <= slack,
        TaskOutcome::Binary(b) => b,
    };
    Ok(TaskScore {
        id: ex.id.clone(),
        text_id: ex.text_id.clone(),
        outcome,
        correct,
    })
}

fn prediction_mask(
    p: &PhrasePrediction,
    gold: &Region,
    threshold: f64,
) -> Result<Option<crate::geometry::BinaryMask>> {
    match p {
        PhrasePrediction::Map(m) => {
            if m.dims() != gold.dims() {
                return Err(Error::DimMismatch("predicted map vs gold region".into()));
            }
            Ok(Some(normalize_threshold(m, threshold)?))
        }
        PhrasePrediction::Boxes(b) => match b.first() {
            Some(top) => Ok(Some(rasterize(&Region::single(top.bbox, gold.dims())?)?)),
            None => Ok(None),
        },
    }
}

/// True iff any of the first `k` boxes overlaps `gold` by at least
/// `iou_threshold`. `ranked` must be sorted by descending confidence.
pub fn recall_at_k(ranked: &[ScoredBox], gold: &Region, k: usize, iou_threshold: f64) -> Result<bool> {
    debug_assert!(ranked.windows(2).all(|w| w[0].conf >= w[1].conf));
    let g = rasterize(gold)?;
    for b in ranked.iter().take(k) {
        let m = rasterize(&Region::single(b.bbox, gold.dims())?)?;
        if iou(&m, &g)? >= iou_threshold {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Per-phrase IoU against gold for every annotated phrase of `ex`.
pub fn grounding_scores(
    ex: &Example,
    pred: &PredictionRecord,
    opts: &ScoringOptions,
) -> Result<GroundingScore> {
    let mut ious = Vec::new();
    let mut hits = Vec::new();
    let mut n_missing = 0;
    for phrase in ex.annotated_phrases() {
        let gold = phrase.gold_region.as_ref().expect("annotated");
        let Some(p) = pred.phrase(phrase.span) else {
            log::warn!("{}: no prediction for phrase {}", ex.id, phrase.span);
            n_missing += 1;
            ious.push(0.0);
            hits.push(None);
            continue;
        };
        let value = match prediction_mask(p, gold, opts.threshold)? {
            Some(m) => iou(&m, &rasterize(gold)?)?,
            None => 0.0,
        };
        ious.push(value);
        hits.push(match p {
            PhrasePrediction::Boxes(b) => {
                let mut h = [false; 3];
                for (slot, &k) in h.iter_mut().zip(&RECALL_KS) {
                    *slot = recall_at_k(b, gold, k, opts.recall_iou)?;
                }
                Some(h)
            }
            PhrasePrediction::Map(_) => None,
        });
    }
    let mean_iou = (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64);
    Ok(GroundingScore {
        id: ex.id.clone(),
        phrase_ious: ious,
        mean_iou,
        n_missing,
        recall_hits: hits,
    })
}

/// Fraction of distinct texts whose every example is correct.
pub fn consistency(scores: &[TaskScore]) -> f64 {
    let mut by_text: BTreeMap<&str, bool> = BTreeMap::new();
    for s in scores {
        let e = by_text.entry(s.text_id.as_str()).or_insert(true);
        *e &= s.correct;
    }
    if by_text.is_empty() {
        return 0.0;
    }
    by_text.values().filter(|&&ok| ok).count() as f64 / by_text.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorrelationVariant {
    /// Point-biserial between task success and example mean-IoU.
    PointBiserial,
    /// Pearson between negated pixel distance and example mean-IoU.
    PearsonNegDistance,
}

impl fmt::Display for CorrelationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CorrelationVariant::PointBiserial => "point-biserial",
            CorrelationVariant::PearsonNegDistance => "pearson-neg-distance",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correlation {
    pub r: f64,
    pub variant: CorrelationVariant,
    pub n: usize,
}

/// Dataset-level correlation between task outcome and example mean-IoU,
/// joined on example id. Examples without annotated phrases are skipped.
pub fn correlate(task: &[TaskScore], grounding: &[GroundingScore]) -> Result<Correlation> {
    let by_id: HashMap<&str, &GroundingScore> =
        grounding.iter().map(|g| (g.id.as_str(), g)).collect();
    let mut bins = Vec::new();
    let mut dists = Vec::new();
    let mut ys = Vec::new();
    for t in task {
        let Some(m) = by_id.get(t.id.as_str()).and_then(|g| g.mean_iou) else {
            continue;
        };
        match t.outcome {
            TaskOutcome::Binary(b) => bins.push(b),
            TaskOutcome::Continuous(d) => dists.push(-d),
        }
        ys.push(m);
    }
    if !bins.is_empty() && !dists.is_empty() {
        return Err(Error::Parameter("mixed binary and continuous task scores".into()));
    }
    if ys.len() < 2 {
        return Err(Error::UndefinedCorrelation(format!(
            "{} usable pairs",
            ys.len()
        )));
    }
    if !bins.is_empty() {
        Ok(Correlation {
            r: point_biserial(&bins, &ys)?,
            variant: CorrelationVariant::PointBiserial,
            n: ys.len(),
        })
    } else {
        Ok(Correlation {
            r: pearson(&dists, &ys)?,
            variant: CorrelationVariant::PearsonNegDistance,
            n: ys.len(),
        })
    }
}

/// `{0.05, 0.10, …, 0.95}`.
pub fn calibration_grid() -> Vec<f64> {
    (1..=19).map(|k| k as f64 * 5.0 / 100.0).collect()
}

/// Grid member with the highest score; ties go to the smallest threshold.
pub fn best_threshold(profile: &[(f64, f64)]) -> Option<f64> {
    let mut sorted = profile.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut best: Option<(f64, f64)> = None;
    for (t, v) in sorted {
        if best.is_none_or(|(_, bv)| v > bv) {
            best = Some((t, v));
        }
    }
    best.map(|(t, _)| t)
}

/// Threshold maximizing mean IoU over validation (map, gold) pairs.
/// Returns the chosen threshold and the full profile.
pub fn calibrate_threshold(
    pairs: &[(SegMap, Region)],
    grid: &[f64],
    jobs: Jobs,
) -> Result<(f64, Vec<(f64, f64)>)> {
    if pairs.is_empty() || grid.is_empty() {
        return Err(Error::Parameter("calibration needs pairs and a grid".into()));
    }
    let golds: Vec<_> = pairs
        .iter()
        .map(|(_, g)| rasterize(g))
        .collect::<Result<_>>()?;
    let per_pair: Vec<Vec<f64>> = par::try_map(&(0..pairs.len()).collect::<Vec<_>>(), jobs, |&i| {
        grid.iter()
            .map(|&t| iou(&normalize_threshold(&pairs[i].0, t)?, &golds[i]))
            .collect::<Result<Vec<f64>>>()
    })?;
    let profile: Vec<(f64, f64)> = grid
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let s: f64 = per_pair.iter().map(|v| v[k]).sum();
            (t, s / pairs.len() as f64)
        })
        .collect();
    Ok((best_threshold(&profile).expect("non-empty grid"), profile))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Mean of per-example means.
    #[default]
    Macro,
    /// Mean over all annotated phrases.
    Micro,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportConfig {
    pub scoring: ScoringOptions,
    pub aggregation: Aggregation,
    pub jobs: Jobs,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            scoring: ScoringOptions::default(),
            aggregation: Aggregation::Macro,
            jobs: Jobs::SEQUENTIAL,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub tag: String,
    pub n_examples: usize,
    /// Slack accuracy for pointing tasks, game accuracy for choices.
    pub accuracy: f64,
    pub consistency: f64,
    pub mean_distance: Option<f64>,
    pub mean_iou: Option<f64>,
    pub recall: [Option<f64>; 3],
    pub correlation: Option<Correlation>,
    pub correlation_error: Option<String>,
    pub n_grounded: usize,
    pub n_missing: usize,
    pub threshold: f64,
}

pub const REPORT_CSV_HEADER: &str = "tag,n_examples,accuracy,consistency,mean_distance,mean_iou,recall_at_1,recall_at_5,recall_at_10,correlation,correlation_variant,n_grounded,n_missing,threshold";

/// Formats an optional metric the way every CSV in the toolkit does.
pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.6}"))
}

impl MetricReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{},{},{},{},{},{},{},{},{},{:.2}",
            self.tag,
            self.n_examples,
            self.accuracy,
            self.consistency,
            fmt_opt(self.mean_distance),
            fmt_opt(self.mean_iou),
            fmt_opt(self.recall[0]),
            fmt_opt(self.recall[1]),
            fmt_opt(self.recall[2]),
            fmt_opt(self.correlation.map(|c| c.r)),
            self.correlation.map_or("n/a".to_string(), |c| c.variant.to_string()),
            self.n_grounded,
            self.n_missing,
            self.threshold,
        )
    }

    pub fn to_csv(&self) -> String {
        format!("{REPORT_CSV_HEADER}\n{}\n", self.csv_row())
    }

    pub fn to_text(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{:.2}", 100.0 * x));
        let mut s = String::new();
        s.push_str(&format!("report [{}]: {} examples\n", self.tag, self.n_examples));
        s.push_str(&format!("  task accuracy     {}\n", pct(Some(self.accuracy))));
        s.push_str(&format!("  consistency       {}\n", pct(Some(self.consistency))));
        if let Some(d) = self.mean_distance {
            s.push_str(&format!("  mean distance     {d:.2} px\n"));
        }
        s.push_str(&format!("  mean-IoU          {}\n", pct(self.mean_iou)));
        for (k, r) in RECALL_KS.iter().zip(self.recall) {
            s.push_str(&format!("  recall@{k:<2}         {}\n", pct(r)));
        }
        match (&self.correlation, &self.correlation_error) {
            (Some(c), _) => s.push_str(&format!(
                "  correlation       {:.4} ({}, n={})\n",
                c.r, c.variant, c.n
            )),
            (None, Some(e)) => s.push_str(&format!("  correlation       n/a ({e})\n")),
            _ => s.push_str("  correlation       n/a\n"),
        }
        if self.n_missing > 0 {
            s.push_str(&format!(
                "  WARNING: {} annotated phrases had no prediction (scored 0)\n",
                self.n_missing
            ));
        }
        s
    }
}

/// Scores every example and aggregates in ascending id order.
pub fn report(
    examples: &[Example],
    predictions: &[PredictionRecord],
    cfg: &ReportConfig,
) -> Result<MetricReport> {
    if predictions.is_empty() {
        return Err(Error::IdMismatch("empty prediction set".into()));
    }
    let preds: HashMap<&str, &PredictionRecord> =
        predictions.iter().map(|p| (p.id.as_str(), p)).collect();
    let ex_ids: HashMap<&str, &Example> = examples.iter().map(|e| (e.id.as_str(), e)).collect();
    let mut orphans: Vec<String> = examples
        .iter()
        .filter(|e| !preds.contains_key(e.id.as_str()))
        .map(|e| format!("example:{}", e.id))
        .chain(
            predictions
                .iter()
                .filter(|p| !ex_ids.contains_key(p.id.as_str()))
                .map(|p| format!("prediction:{}", p.id)),
        )
        .collect();
    if !orphans.is_empty() {
        orphans.sort();
        return Err(Error::IdMismatch(format!("orphans: {}", orphans.join(" "))));
    }

    let mut ordered: Vec<&Example> = examples.iter().collect();
    ordered.sort_by(|a, b| a.id.cmp(&b.id));
    let scored: Vec<(TaskScore, GroundingScore)> = par::try_map(&ordered, cfg.jobs, |e| {
        let p = preds[e.id.as_str()];
        Ok::<_, Error>((
            score_task(e, p, cfg.scoring.slack)?,
            grounding_scores(e, p, &cfg.scoring)?,
        ))
    })?;
    let (tasks, grounds): (Vec<_>, Vec<_>) = scored.into_iter().unzip();

    let n = tasks.len();
    let accuracy = tasks.iter().filter(|t| t.correct).count() as f64 / n as f64;
    let dists: Vec<f64> = tasks
        .iter()
        .filter_map(|t| match t.outcome {
            TaskOutcome::Continuous(d) => Some(d),
            _ => None,
        })
        .collect();
    let mean_distance = (!dists.is_empty()).then(|| dists.iter().sum::<f64>() / dists.len() as f64);

    let grounded: Vec<&GroundingScore> = grounds.iter().filter(|g| g.mean_iou.is_some()).collect();
    let mean_iou = match cfg.aggregation {
        Aggregation::Macro => (!grounded.is_empty()).then(|| {
            grounded.iter().map(|g| g.mean_iou.unwrap()).sum::<f64>() / grounded.len() as f64
        }),
        Aggregation::Micro => {
            let all: Vec<f64> = grounds.iter().flat_map(|g| g.phrase_ious.iter().copied()).collect();
            (!all.is_empty()).then(|| all.iter().sum::<f64>() / all.len() as f64)
        }
    };
    let hits: Vec<[bool; 3]> = grounds
        .iter()
        .flat_map(|g| g.recall_hits.iter().flatten().copied())
        .collect();
    let mut recall = [None; 3];
    if !hits.is_empty() {
        for (k, slot) in recall.iter_mut().enumerate() {
            *slot = Some(hits.iter().filter(|h| h[k]).count() as f64 / hits.len() as f64);
        }
    }
    let (correlation, correlation_error) = match correlate(&tasks, &grounds) {
        Ok(c) => (Some(c), None),
        Err(e @ Error::UndefinedCorrelation(_)) => (None, Some(e.to_string())),
        Err(e) => return Err(e),
    };
    Ok(MetricReport {
        tag: "eval".into(),
        n_examples: n,
        accuracy,
        consistency: consistency(&tasks),
        mean_distance,
        mean_iou,
        recall,
        correlation,
        correlation_error,
        n_grounded: grounded.len(),
        n_missing: grounds.iter().map(|g| g.n_missing).sum(),
        threshold: cfg.scoring.threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{tokenize, Phrase, Span, Split};
    use crate::geometry::{gold_map_from_region, BoundingBox, Dims};
    use proptest::prelude::*;

    fn bx(x0: usize, y0: usize, x1: usize, y1: usize) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    fn sb(b: BoundingBox, conf: f64) -> ScoredBox {
        ScoredBox { bbox: b, conf }
    }

    fn ts(id: &str, text: &str, correct: bool) -> TaskScore {
        TaskScore {
            id: id.into(),
            text_id: text.into(),
            outcome: TaskOutcome::Binary(correct),
            correct,
        }
    }

    #[test]
    fn sdr_accuracy_examples() {
        let g = Point::new(100.0, 100.0);
        assert!(sdr_accuracy(g, g, SDR_SLACK));
        assert!(sdr_accuracy(Point::new(100.0, 140.0), g, SDR_SLACK));
        assert!(!sdr_accuracy(Point::new(100.0, 141.0), g, SDR_SLACK));
        assert!(sdr_accuracy(Point::new(1e9, 0.0), g, f64::INFINITY));
        assert!(!sdr_accuracy(Point::new(100.0, 100.5), g, 0.0));
        assert_eq!(SDR_SLACK, 40.0);
    }

    #[test]
    fn consistency_examples() {
        let all = [ts("a", "t", true), ts("b", "t", true), ts("c", "t", true)];
        assert_eq!(consistency(&all), 1.0);
        let two = [ts("a", "t", true), ts("b", "t", false), ts("c", "t", true)];
        assert_eq!(consistency(&two), 0.0);
        let mixed = [ts("a", "t1", true), ts("b", "t2", false), ts("c", "t2", true)];
        assert_eq!(consistency(&mixed), 0.5);
    }

    #[test]
    fn recall_examples() {
        let d = Dims::new(20, 20);
        let gold = Region::single(bx(0, 0, 10, 10), d).unwrap();
        let exact = [sb(bx(0, 0, 10, 10), 0.9)];
        assert!(recall_at_k(&exact, &gold, 1, RECALL_IOU).unwrap());
        // IoU of [0,10)x[0,6) with gold = 60/100 = 0.6.
        let third = [
            sb(bx(15, 15, 20, 20), 0.9),
            sb(bx(12, 0, 20, 5), 0.8),
            sb(bx(0, 0, 10, 6), 0.7),
        ];
        assert!(!recall_at_k(&third, &gold, 1, RECALL_IOU).unwrap());
        assert!(recall_at_k(&third, &gold, 5, RECALL_IOU).unwrap());
        let miss = [sb(bx(0, 0, 10, 4), 0.9), sb(bx(10, 10, 20, 20), 0.5)];
        for k in [1, 5, 10] {
            assert!(!recall_at_k(&miss, &gold, k, RECALL_IOU).unwrap());
        }
        assert!(!recall_at_k(&[], &gold, 5, RECALL_IOU).unwrap());
    }

    #[test]
    fn threshold_selection() {
        assert_eq!(best_threshold(&[(0.25, 0.3), (0.5, 0.5), (0.75, 0.4)]), Some(0.5));
        assert_eq!(best_threshold(&[(0.75, 0.2), (0.25, 0.2), (0.5, 0.2)]), Some(0.25));
        assert_eq!(best_threshold(&[(0.3, 0.0)]), Some(0.3));
        let g = calibration_grid();
        assert_eq!(g.len(), 19);
        assert_eq!(g[0], 0.05);
        assert_eq!(g[18], 0.95);
    }

    #[test]
    fn calibration_prefers_separating_threshold() {
        let d = Dims::new(1, 4);
        let gold = Region::single(bx(0, 0, 2, 1), d).unwrap();
        let m = SegMap::new(d, vec![0.4, 0.3, 0.2, 0.1]).unwrap();
        let (t, profile) = calibrate_threshold(&[(m, gold)], &calibration_grid(), Jobs::SEQUENTIAL).unwrap();
        // Normalized values 1, .75, .5, .25: thresholds in (0.5, 0.75] give IoU 1.
        assert_eq!(t, 0.55);
        assert_eq!(profile.len(), 19);
        let (t1, _) = calibrate_threshold(
            &[(SegMap::uniform(d), Region::single(bx(0, 0, 1, 1), d).unwrap())],
            &[0.4],
            Jobs::SEQUENTIAL,
        )
        .unwrap();
        assert_eq!(t1, 0.4);
    }

    fn example(id: &str, text_id: &str, task: Task, regions: Vec<Option<Region>>) -> Example {
        let text = "the red door near a bike".to_string();
        let spans = [(Span::new(0, 2), "the red door"), (Span::new(4, 5), "a bike")];
        Example {
            id: id.into(),
            split: Split::Test,
            image_ref: String::new(),
            image_dims: Dims::new(40, 40),
            tokens: tokenize(&text),
            text,
            text_id: text_id.into(),
            task,
            task_span: None,
            phrases: spans
                .iter()
                .zip(regions)
                .map(|((s, surf), r)| Phrase {
                    span: *s,
                    surface: surf.to_string(),
                    gold_region: r,
                })
                .collect(),
        }
    }

    fn region(b: BoundingBox) -> Region {
        Region::single(b, Dims::new(40, 40)).unwrap()
    }

    #[test]
    fn grounding_examples() {
        let r1 = region(bx(0, 0, 10, 10));
        let r2 = region(bx(20, 20, 30, 30));
        let ex = example("a", "t", Task::Point(Point::new(5.0, 5.0)), vec![Some(r1.clone()), Some(r2.clone())]);
        let perfect = PredictionRecord {
            id: "a".into(),
            task_point: Some(Point::new(5.0, 5.0)),
            task_choice: None,
            phrases: vec![
                (Span::new(0, 2), PhrasePrediction::Map(gold_map_from_region(&r1).unwrap())),
                (Span::new(4, 5), PhrasePrediction::Boxes(vec![sb(bx(20, 20, 30, 30), 1.0)])),
            ],
        };
        let g = grounding_scores(&ex, &perfect, &ScoringOptions::default()).unwrap();
        assert_eq!(g.mean_iou, Some(1.0));
        // IoU 0.2: 20/100 inside a 100 px gold with 0 extra → box [0,10)x[0,2).
        // IoU 0.6: [20,30)x[20,26).
        let partial = PredictionRecord {
            phrases: vec![
                (Span::new(0, 2), PhrasePrediction::Boxes(vec![sb(bx(0, 0, 10, 2), 1.0)])),
                (Span::new(4, 5), PhrasePrediction::Boxes(vec![sb(bx(20, 20, 30, 26), 1.0)])),
            ],
            ..perfect.clone()
        };
        let g = grounding_scores(&ex, &partial, &ScoringOptions::default()).unwrap();
        assert!((g.phrase_ious[0] - 0.2).abs() < 1e-15);
        assert!((g.mean_iou.unwrap() - 0.4).abs() < 1e-15);
        let bare = example("b", "t", Task::Point(Point::new(5.0, 5.0)), vec![None, None]);
        assert_eq!(grounding_scores(&bare, &perfect, &ScoringOptions::default()).unwrap().mean_iou, None);
        let missing = PredictionRecord { phrases: vec![], ..perfect };
        let g = grounding_scores(&ex, &missing, &ScoringOptions::default()).unwrap();
        assert_eq!(g.n_missing, 2);
        assert_eq!(g.mean_iou, Some(0.0));
    }

    #[test]
    fn correlate_variants() {
        let g = |id: &str, m: f64| GroundingScore {
            id: id.into(),
            phrase_ious: vec![m],
            mean_iou: Some(m),
            n_missing: 0,
            recall_hits: vec![None],
        };
        let tasks = [ts("a", "1", true), ts("b", "2", false), ts("c", "3", true)];
        let flat = [g("a", 0.5), g("b", 0.5), g("c", 0.5)];
        assert!(matches!(correlate(&tasks, &flat), Err(Error::UndefinedCorrelation(_))));
        let c = correlate(&tasks, &[g("a", 0.9), g("b", 0.1), g("c", 0.8)]).unwrap();
        assert_eq!(c.variant, CorrelationVariant::PointBiserial);
        assert!(c.r > 0.9);
        let cont = |id: &str, d: f64| TaskScore {
            id: id.into(),
            text_id: id.into(),
            outcome: TaskOutcome::Continuous(d),
            correct: d <= 40.0,
        };
        let c = correlate(
            &[cont("a", 10.0), cont("b", 100.0), cont("c", 20.0)],
            &[g("a", 0.9), g("b", 0.1), g("c", 0.8)],
        )
        .unwrap();
        assert_eq!(c.variant, CorrelationVariant::PearsonNegDistance);
        assert!(c.r > 0.9, "small distance with high IoU is a positive correlation");
    }

    /// Four hand-built examples; expected values computed by hand.
    #[test]
    fn report_fixture() {
        let r = |x0, y0, x1, y1| region(bx(x0, y0, x1, y1));
        let examples = vec![
            example("e1", "t1", Task::Point(Point::new(10.0, 10.0)), vec![Some(r(0, 0, 10, 10)), Some(r(20, 20, 30, 30))]),
            example("e2", "t1", Task::Point(Point::new(10.0, 10.0)), vec![Some(r(0, 0, 10, 10)), None]),
            example("e3", "t2", Task::Point(Point::new(30.0, 30.0)), vec![Some(r(0, 0, 20, 20)), None]),
            example("e4", "t3", Task::Point(Point::new(0.0, 0.0)), vec![None, None]),
        ];
        let boxes = |v: Vec<BoundingBox>| PhrasePrediction::Boxes(v.into_iter().map(|b| sb(b, 1.0)).collect());
        let preds = vec![
            // distance 0, IoUs 1 and 0.5 ([20,30)x[20,25)).
            PredictionRecord { id: "e1".into(), task_point: Some(Point::new(10.0, 10.0)), task_choice: None,
                phrases: vec![(Span::new(0, 2), boxes(vec![bx(0, 0, 10, 10)])), (Span::new(4, 5), boxes(vec![bx(20, 20, 30, 25)]))] },
            // distance 50 (30-40-50 triangle), IoU 0.
            PredictionRecord { id: "e2".into(), task_point: Some(Point::new(40.0, 50.0)), task_choice: None,
                phrases: vec![(Span::new(0, 2), boxes(vec![bx(30, 30, 40, 40)]))] },
            // distance 20, IoU 0.25 ([0,10)x[0,10) vs [0,20)^2).
            PredictionRecord { id: "e3".into(), task_point: Some(Point::new(30.0, 10.0)), task_choice: None,
                phrases: vec![(Span::new(0, 2), boxes(vec![bx(0, 0, 10, 10)]))] },
            PredictionRecord { id: "e4".into(), task_point: Some(Point::new(0.0, 0.0)), task_choice: None, phrases: vec![] },
        ];
        let rep = report(&examples, &preds, &ReportConfig::default()).unwrap();
        assert_eq!(rep.n_examples, 4);
        assert_eq!(rep.accuracy, 0.75);
        // t1 has a miss (e2); t2 and t3 are fine.
        assert!((rep.consistency - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(rep.mean_distance, Some(70.0 / 4.0));
        // Example means: 0.75, 0, 0.25 → 1/3.
        assert!((rep.mean_iou.unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(rep.n_grounded, 3);
        // Phrase-level recall@1 with IoU >= .5: hits are 1.0 and 0.5 of 4.
        assert_eq!(rep.recall, [Some(0.5), Some(0.5), Some(0.5)]);
        // Pearson(-[0, 50, 20], [0.75, 0, 0.25]).
        let oracle = pearson(&[0.0, -50.0, -20.0], &[0.75, 0.0, 0.25]).unwrap();
        assert!((rep.correlation.unwrap().r - oracle).abs() < 1e-15);
        let micro = report(&examples, &preds, &ReportConfig { aggregation: Aggregation::Micro, ..Default::default() }).unwrap();
        assert!((micro.mean_iou.unwrap() - 1.75 / 4.0).abs() < 1e-15);
        assert!(report(&examples, &[], &ReportConfig::default()).is_err());
        match report(&examples[..2], &preds, &ReportConfig::default()) {
            Err(Error::IdMismatch(m)) => assert!(m.contains("prediction:e3") && m.contains("prediction:e4")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn report_all_perfect() {
        let r = region(bx(0, 0, 10, 10));
        let examples: Vec<_> = (0..3)
            .map(|i| example(&format!("e{i}"), "t", Task::Choice { index: 1, n_candidates: 2 }, vec![Some(r.clone()), None]))
            .collect();
        let preds: Vec<_> = (0..3)
            .map(|i| PredictionRecord {
                id: format!("e{i}"),
                task_point: Some(Point::new(3.0, 25.0)),
                task_choice: None,
                phrases: vec![(Span::new(0, 2), PhrasePrediction::Boxes(vec![sb(bx(0, 0, 10, 10), 1.0)]))],
            })
            .collect();
        let rep = report(&examples, &preds, &ReportConfig::default()).unwrap();
        assert_eq!((rep.accuracy, rep.mean_iou, rep.consistency), (1.0, Some(1.0), 1.0));
        assert!(rep.correlation.is_none());
        assert!(rep.to_csv().contains(",n/a,n/a,"));
    }

    proptest! {
        #[test]
        fn point_biserial_matches_pearson(
            data in prop::collection::vec((any::<bool>(), -5.0f64..5.0), 3..60)
        ) {
            let bins: Vec<bool> = data.iter().map(|d| d.0).collect();
            let ys: Vec<f64> = data.iter().map(|d| d.1).collect();
            let xs: Vec<f64> = bins.iter().map(|&b| b as u8 as f64).collect();
            match (point_biserial(&bins, &ys), pearson(&xs, &ys)) {
                (Ok(a), Ok(b)) => prop_assert!((a - b).abs() < 1e-12),
                (Err(_), Err(_)) => {}
                (a, b) => prop_assert!(false, "{:?} vs {:?}", a, b),
            }
        }

        #[test]
        fn recall_monotone(
            raw in prop::collection::vec((0usize..15, 0usize..15, 1usize..10, 1usize..10), 1..12),
            t1 in 0.05f64..1.0, t2 in 0.05f64..1.0,
        ) {
            let d = Dims::new(20, 20);
            let gold = Region::single(bx(3, 3, 12, 12), d).unwrap();
            let n = raw.len();
            let ranked: Vec<ScoredBox> = raw.iter().enumerate()
                .map(|(i, &(x, y, w, h))| sb(bx(x, y, (x + w).min(20), (y + h).min(20)), (n - i) as f64))
                .collect();
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let mut prev = false;
            for k in 1..=n + 1 {
                let cur = recall_at_k(&ranked, &gold, k, lo).unwrap();
                prop_assert!(cur || !prev);
                prev = cur;
                prop_assert!(cur || !recall_at_k(&ranked, &gold, k, hi).unwrap());
            }
        }
    }
}
