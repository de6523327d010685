//! Data-efficiency sweep: fine-tune the head on a synthetic world with a
//! growing fraction of the phrase annotations and score every run on the
//! held-out split.

use serde::{Deserialize, Serialize};

use crate::alignhead::{
    evaluate_grounding, predict_record, train_head_from, HeadConfig, HeadWeights, StageConfig,
    TrainHyper,
};
use crate::datasets::{sample_fraction, Example, ExampleSet, Split, FRACTION_LADDER};
use crate::error::{Error, Result};
use crate::geometry::Dims;
use crate::metrics::{fmt_opt, report, MetricReport, ReportConfig, ScoringOptions};
use crate::par::{self, Jobs};
use crate::synthworld::{gen_world, World, WorldConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    /// Must have non-empty dev and test splits.
    pub world: WorldConfig,
    /// Head stages; input width and output size follow from the world.
    pub stages: Vec<StageConfig>,
    pub hyper: TrainHyper,
    /// Annotation percentages, each in `[0, 100]`.
    pub fractions: Vec<f64>,
    /// Seed of the annotation subsampling permutation.
    pub sample_seed: u64,
}

/// The default is a pointing world in which examples differ in feature
/// noise, so that grounding quality and task success share a cause.
impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            world: WorldConfig {
                n_examples: 1000,
                image: Dims::new(128, 128),
                patch: 16,
                n_objects: 3,
                vocab: 8,
                d_p: 8,
                d_q: 8,
                sigma_f: 0.1,
                noise_spread: 4.0,
                seed: 3,
                dev_fraction: 0.1,
                test_fraction: 0.75,
                ..WorldConfig::default()
            },
            stages: vec![StageConfig::doubling(32)],
            hyper: TrainHyper {
                lr: 1.0,
                steps: 800,
                batch: 8,
                seed: 1,
                gaussian_sigma: 16.0,
                ..TrainHyper::default()
            },
            fractions: FRACTION_LADDER.to_vec(),
            sample_seed: 2,
        }
    }
}

impl SweepConfig {
    pub fn head_config(&self) -> HeadConfig {
        HeadConfig {
            in_channels: self.world.d_p + self.world.d_q,
            stages: self.stages.clone(),
            target: self.world.example_dims(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.head_config().validate()?;
        self.hyper.validate()?;
        if self.fractions.is_empty() {
            return Err(Error::Parameter("sweep needs at least one fraction".into()));
        }
        if let Some(f) = self.fractions.iter().find(|f| !(0.0..=100.0).contains(*f)) {
            return Err(Error::Parameter(format!("fraction {f} outside [0, 100]")));
        }
        if self.world.dev_fraction <= 0.0 || self.world.test_fraction <= 0.0 {
            return Err(Error::Parameter("sweep needs dev and test splits".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub fraction: f64,
    /// Phrase annotations kept in the training split.
    pub n_annotations: usize,
    pub report: MetricReport,
}

/// Task metric, grounding and their correlation per fraction; undefined
/// values are written as `n/a`.
pub const SWEEP_CSV_HEADER: &str = "fraction,accuracy,mean_iou,correlation";

impl SweepRow {
    pub fn csv_row(&self) -> String {
        let r = &self.report;
        format!(
            "{},{:.6},{},{}",
            self.fraction,
            r.accuracy,
            fmt_opt(r.mean_iou),
            fmt_opt(r.correlation.map(|c| c.r)),
        )
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_CSV_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Trains on a fraction of the training annotations, calibrates the map
/// threshold on dev and reports on test.
pub fn sweep_point(
    world: &World,
    init: &HeadWeights,
    cfg: &SweepConfig,
    fraction: f64,
    jobs: Jobs,
) -> Result<SweepRow> {
    let train = ExampleSet::new(world.split(Split::Train).to_vec())?;
    let sampled = sample_fraction(&train, fraction, cfg.sample_seed)?;
    let hyper = TrainHyper {
        jobs,
        ..cfg.hyper.clone()
    };
    let dev = world.split(Split::Dev);
    let test = world.split(Split::Test);
    let out = train_head_from(init.clone(), &world.bundles, &sampled.examples, None, &hyper)?;
    let (_, threshold) = evaluate_grounding(&out.weights, dev, &world.bundles, cfg.hyper.threshold, jobs)?;
    let preds = par::try_map(test, jobs, |ex: &Example| {
        predict_record(&out.weights, ex, &world.bundles[&ex.id])
    })?;
    let rc = ReportConfig {
        scoring: ScoringOptions {
            threshold,
            ..ScoringOptions::default()
        },
        jobs,
        ..ReportConfig::default()
    };
    let mut report = report(test, &preds, &rc)?;
    report.tag = format!("sweep-{fraction}");
    Ok(SweepRow {
        fraction,
        n_annotations: sampled.n_annotations(),
        report,
    })
}

/// One row per fraction, each run starting from the same seeded
/// initialization.
pub fn sweep(cfg: &SweepConfig, jobs: Jobs) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let world = gen_world(&cfg.world, jobs)?;
    let init = HeadWeights::init(cfg.head_config(), cfg.hyper.seed)?;
    cfg.fractions
        .iter()
        .map(|&f| {
            let row = sweep_point(&world, &init, cfg, f, jobs)?;
            log::info!(
                "fraction {f}: {} annotations, threshold {:.2}: {}",
                row.n_annotations,
                row.report.threshold,
                row.csv_row()
            );
            Ok(row)
        })
        .collect()
}
