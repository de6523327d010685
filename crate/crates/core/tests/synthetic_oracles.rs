//! End-to-end oracles on synthetic worlds whose ground truth is known by
//! construction.

use groundcheck::datasets::Example;
use groundcheck::geometry::Dims;
use groundcheck::metrics::{report, ReportConfig};
use groundcheck::par::Jobs;
use groundcheck::synthworld::{fidelity_sweep, gen_world, simulate, SimPredictor, Variant, World, WorldConfig};

fn world(cfg: &WorldConfig) -> (World, Vec<Example>) {
    let w = gen_world(cfg, Jobs::SEQUENTIAL).unwrap();
    let ex = w.examples().cloned().collect();
    (w, ex)
}

fn game(n: usize, eta: f64) -> WorldConfig {
    WorldConfig {
        n_examples: n,
        image: Dims::new(32, 32),
        eta,
        seed: 21,
        variant: Variant::Game { n_images: 4 },
        ..WorldConfig::default()
    }
}

#[test]
fn perfect_predictor_attains_every_ideal() {
    for cfg in [WorldConfig { n_examples: 50, seed: 3, ..WorldConfig::default() }, game(50, 0.0)] {
        let (w, ex) = world(&cfg);
        let preds = simulate(&ex, &w.config, &SimPredictor::new(1.0, 9).unwrap(), Jobs::SEQUENTIAL).unwrap();
        let r = report(&ex, &preds, &ReportConfig::default()).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.mean_iou, Some(1.0));
        assert_eq!(r.consistency, 1.0);
        assert_eq!(r.recall[0], Some(1.0));
    }
}

/// A zero-fidelity predictor hits the gold cell with probability 1/#cells,
/// which is its expected mean-IoU with single-cell gold regions.
#[test]
fn zero_fidelity_grounding_is_at_chance() {
    let cfg = game(1000, 0.0);
    let (w, ex) = world(&cfg);
    let preds = simulate(&ex, &w.config, &SimPredictor::new(0.0, 4).unwrap(), Jobs::SEQUENTIAL).unwrap();
    let r = report(&ex, &preds, &ReportConfig::default()).unwrap();
    let p = 1.0 / cfg.total_cells() as f64;
    // Per-example mean-IoU averages `n_objects` independent hits.
    let se = (p * (1.0 - p) / (cfg.n_examples * cfg.n_objects) as f64).sqrt();
    let m = r.mean_iou.unwrap();
    assert!((m - p).abs() < 3.0 * se, "mean-IoU {m} vs chance {p} (se {se})");
}

#[test]
fn pure_task_noise_decorrelates() {
    let rows = fidelity_sweep(&game(1000, 0.0), &[0.0, 0.5], 1.0, 2, Jobs::SEQUENTIAL).unwrap();
    for row in rows {
        let r = row.report.correlation.expect("defined").r;
        assert!(r.abs() < 0.1, "rho {}: r {r}", row.rho);
    }
}

/// Failed chains answer by guessing uniformly among the candidates.
#[test]
fn full_fidelity_accuracy_follows_the_noise_coin() {
    let cfg = game(1000, 0.3);
    let rows = fidelity_sweep(&cfg, &[1.0], 0.3, 5, Jobs::SEQUENTIAL).unwrap();
    assert_eq!(rows.len(), 1);
    let expected: f64 = 0.7 + 0.3 / 4.0;
    let se = (expected * (1.0 - expected) / 1000.0).sqrt();
    let acc = rows[0].report.accuracy;
    assert!((acc - expected).abs() < 3.0 * se, "accuracy {acc} vs {expected}");
}

#[test]
fn reports_do_not_depend_on_worker_count() {
    let (w, ex) = world(&game(120, 0.2));
    let preds = simulate(&ex, &w.config, &SimPredictor::new(0.5, 1).unwrap(), Jobs::new(3)).unwrap();
    assert_eq!(preds, simulate(&ex, &w.config, &SimPredictor::new(0.5, 1).unwrap(), Jobs::SEQUENTIAL).unwrap());
    let a = report(&ex, &preds, &ReportConfig::default()).unwrap();
    let b = report(&ex, &preds, &ReportConfig { jobs: Jobs::new(3), ..ReportConfig::default() }).unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
}

#[test]
fn worlds_round_trip_through_disk() {
    let cfg = WorldConfig { n_examples: 8, dev_fraction: 0.25, seed: 6, ..WorldConfig::default() };
    let w = gen_world(&cfg, Jobs::SEQUENTIAL).unwrap();
    let dir = tempfile::tempdir().unwrap();
    w.save(dir.path()).unwrap();
    let back = World::load(dir.path()).unwrap();
    assert_eq!(back.config, w.config);
    assert_eq!(back.bundles, w.bundles);
    assert_eq!(
        back.examples().map(|e| &e.id).collect::<Vec<_>>(),
        w.examples().map(|e| &e.id).collect::<Vec<_>>()
    );
}
