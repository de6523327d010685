use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datasets::ExampleSet;
use crate::error::{Error, Result};

/// Annotation percentages of the data-efficiency sweep.
pub const FRACTION_LADDER: [f64; 7] = [0.0, 5.0, 10.0, 20.0, 50.0, 70.0, 100.0];

/// Keeps `floor(fraction/100 * N)` of the set's `N` phrase annotations.
///
/// Every fraction draws from one seeded permutation of the annotations, so
/// for a fixed seed a smaller fraction always keeps a subset of what a
/// larger one keeps. Task annotations are never touched.
pub fn sample_fraction(set: &ExampleSet, fraction: f64, seed: u64) -> Result<ExampleSet> {
    if !(0.0..=100.0).contains(&fraction) {
        return Err(Error::Parameter(format!(
            "fraction {fraction} outside [0, 100]"
        )));
    }
    let slots: Vec<(usize, usize)> = set
        .examples
        .iter()
        .enumerate()
        .flat_map(|(i, e)| {
            e.phrases
                .iter()
                .enumerate()
                .filter(|(_, p)| p.gold_region.is_some())
                .map(move |(j, _)| (i, j))
        })
        .collect();
    let keep = ((fraction * slots.len() as f64) / 100.0).floor() as usize;
    let mut order: Vec<usize> = (0..slots.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut out = set.clone();
    for &k in &order[keep..] {
        let (i, j) = slots[k];
        out.examples[i].phrases[j].gold_region = None;
    }
    out.provenance
        .insert("annotation_fraction".into(), format!("{fraction}"));
    Ok(out)
}
