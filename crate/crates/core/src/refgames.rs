//! Reference games built from caption–image similarity scores, and the
//! stacked-image pointing layout used to answer them.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, Dims, Point, Region};
use crate::tensor::Tensor;

/// Candidates per game in tangram-style benchmarks (target + 9 distractors).
pub const KILOGRAM_CANDIDATES: usize = 10;
/// Distractors per game in caption-retrieval-style benchmarks.
pub const FLICKR_DISTRACTORS: usize = 5;
/// Pool of top-scoring images distractors are resampled from when
/// augmenting training games.
pub const AUGMENT_TOP_M: usize = 20;

pub const KILOGRAM_CELL: usize = 200;
pub const FLICKR_CELL: usize = 384;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GameFlavor {
    KilogramRg,
    FlickrRg,
}

impl GameFlavor {
    pub fn n_distractors(self) -> usize {
        match self {
            GameFlavor::KilogramRg => KILOGRAM_CANDIDATES - 1,
            GameFlavor::FlickrRg => FLICKR_DISTRACTORS,
        }
    }

    pub fn n_candidates(self) -> usize {
        self.n_distractors() + 1
    }

    pub fn cell(self) -> usize {
        match self {
            GameFlavor::KilogramRg => KILOGRAM_CELL,
            GameFlavor::FlickrRg => FLICKR_CELL,
        }
    }
}

/// Candidate images stacked vertically: cell `k` covers rows
/// `[k * cell_h, (k + 1) * cell_h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub n_cells: usize,
    pub cell_h: usize,
    pub cell_w: usize,
}

impl Layout {
    pub fn new(n_cells: usize, cell_h: usize, cell_w: usize) -> Result<Self> {
        if n_cells == 0 || cell_h == 0 || cell_w == 0 {
            return Err(Error::Parameter(format!(
                "degenerate layout {n_cells} x {cell_h}x{cell_w}"
            )));
        }
        Ok(Layout {
            n_cells,
            cell_h,
            cell_w,
        })
    }

    pub fn dims(&self) -> Dims {
        Dims::new(self.n_cells * self.cell_h, self.cell_w)
    }

    pub fn cell_box(&self, k: usize) -> BoundingBox {
        BoundingBox {
            x_min: 0,
            y_min: k * self.cell_h,
            x_max: self.cell_w,
            y_max: (k + 1) * self.cell_h,
        }
    }

    pub fn cell_center(&self, k: usize) -> Point {
        let b = self.cell_box(k);
        Point::new(
            (b.x_min + b.x_max - 1) as f64 / 2.0,
            (b.y_min + b.y_max - 1) as f64 / 2.0,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceGame {
    pub caption_id: String,
    pub candidates: Vec<String>,
    pub target_index: usize,
    pub layout: Layout,
    pub seed: u64,
}

impl ReferenceGame {
    pub fn target(&self) -> &str {
        &self.candidates[self.target_index]
    }
}

/// Everything needed to pick distractors for one caption.
#[derive(Debug, Clone, Copy)]
pub struct GameRequest<'a> {
    pub caption_id: &'a str,
    pub target_id: &'a str,
    pub scores: &'a HashMap<String, f64>,
    pub pool: &'a [String],
    /// Image → caption group; images sharing the target's group are never
    /// used as distractors.
    pub groups: Option<&'a HashMap<String, String>>,
    pub layout_cell: (usize, usize),
    pub seed: u64,
}

impl GameRequest<'_> {
    /// Eligible distractors ranked by descending score, ties by ascending id.
    fn ranked(&self) -> Result<Vec<&str>> {
        if !self.pool.iter().any(|p| p == self.target_id) {
            return Err(Error::Construction(format!(
                "target {} not in pool",
                self.target_id
            )));
        }
        let target_group = self.groups.and_then(|g| g.get(self.target_id));
        let mut seen = std::collections::HashSet::new();
        let mut ranked: Vec<(&str, f64)> = self
            .pool
            .iter()
            .filter(|id| seen.insert(id.as_str()))
            .filter(|id| *id != self.target_id)
            .filter(|id| match (target_group, self.groups) {
                (Some(tg), Some(g)) => g.get(*id) != Some(tg),
                _ => true,
            })
            .filter_map(|id| self.scores.get(id).map(|&s| (id.as_str(), s)))
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Ok(ranked.into_iter().map(|(id, _)| id).collect())
    }

    fn assemble(&self, distractors: Vec<&str>) -> Result<ReferenceGame> {
        // Position has its own stream so it does not depend on how
        // distractors were drawn.
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(0);
        let pos = rng.random_range(0..=distractors.len());
        let mut candidates: Vec<String> = distractors.into_iter().map(String::from).collect();
        candidates.insert(pos, self.target_id.to_string());
        let (h, w) = self.layout_cell;
        Ok(ReferenceGame {
            caption_id: self.caption_id.to_string(),
            layout: Layout::new(candidates.len(), h, w)?,
            candidates,
            target_index: pos,
            seed: self.seed,
        })
    }
}

/// Uses the `n_distractors` most similar eligible images.
pub fn build_game(req: &GameRequest<'_>, n_distractors: usize) -> Result<ReferenceGame> {
    let ranked = req.ranked()?;
    if ranked.len() < n_distractors {
        return Err(Error::Construction(format!(
            "caption {}: {} eligible distractors, need {n_distractors}",
            req.caption_id,
            ranked.len()
        )));
    }
    req.assemble(ranked[..n_distractors].to_vec())
}

/// Samples `n_distractors` uniformly from the `top_m` most similar eligible
/// images (training-time augmentation).
pub fn augment_game(
    req: &GameRequest<'_>,
    top_m: usize,
    n_distractors: usize,
) -> Result<ReferenceGame> {
    if top_m < n_distractors {
        return Err(Error::Parameter(format!(
            "top_m {top_m} smaller than n_distractors {n_distractors}"
        )));
    }
    let ranked = req.ranked()?;
    let m = if top_m > ranked.len() {
        log::warn!(
            "caption {}: top_m {top_m} clipped to {} eligible images",
            req.caption_id,
            ranked.len()
        );
        ranked.len()
    } else {
        top_m
    };
    if m < n_distractors {
        return Err(Error::Construction(format!(
            "caption {}: {m} eligible distractors, need {n_distractors}",
            req.caption_id
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(req.seed);
    rng.set_stream(1);
    let mut picked = sample(&mut rng, m, n_distractors).into_vec();
    picked.sort_unstable();
    req.assemble(picked.into_iter().map(|i| ranked[i]).collect())
}

/// Index of the stacked cell containing `p`.
pub fn point_to_choice(p: Point, layout: &Layout) -> Result<usize> {
    if !p.in_bounds(layout.dims()) {
        return Err(Error::Parameter(format!(
            "point ({}, {}) outside {}x{} stack",
            p.x,
            p.y,
            layout.dims().h,
            layout.dims().w
        )));
    }
    Ok((p.y / layout.cell_h as f64).floor() as usize)
}

/// The target cell as a region of the stacked image.
pub fn game_gold_region(game: &ReferenceGame) -> Region {
    Region::single(game.layout.cell_box(game.target_index), game.layout.dims())
        .expect("cell box lies inside its own layout")
}

/// Caption × image similarity scores.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimilarityMatrix {
    rows: BTreeMap<String, HashMap<String, f64>>,
}

impl SimilarityMatrix {
    pub fn row(&self, caption_id: &str) -> Option<&HashMap<String, f64>> {
        self.rows.get(caption_id)
    }

    pub fn captions(&self) -> impl Iterator<Item = &str> {
        self.rows.keys().map(String::as_str)
    }

    /// All image ids, sorted.
    pub fn images(&self) -> Vec<String> {
        let mut v: Vec<String> = self
            .rows
            .values()
            .flat_map(|r| r.keys().cloned())
            .collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn insert(&mut self, caption_id: &str, image_id: &str, score: f64) {
        self.rows
            .entry(caption_id.to_string())
            .or_default()
            .insert(image_id.to_string(), score);
    }

    /// `caption_id,image_id,score` rows; a header line is optional.
    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut m = SimilarityMatrix::default();
        for (k, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (k == 0 && line.starts_with("caption_id")) {
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            let parse_err = |msg: String| Error::Parse {
                path: "similarity.csv".into(),
                line: k + 1,
                msg,
            };
            let [c, i, s] = cols[..] else {
                return Err(parse_err(format!("expected 3 columns, got {}", cols.len())));
            };
            let score: f64 = s
                .parse()
                .map_err(|_| parse_err(format!("bad score `{s}`")))?;
            m.insert(c, i, score);
        }
        Ok(m)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_str(&text).map_err(|e| match e {
            Error::Parse { line, msg, .. } => Error::Parse {
                path: path.to_path_buf(),
                line,
                msg,
            },
            e => e,
        })
    }

    /// Rank-2 tensor with rows = captions, columns = images.
    pub fn from_tensor(t: &Tensor, captions: &[String], images: &[String]) -> Result<Self> {
        if t.shape() != [captions.len(), images.len()] {
            return Err(Error::Shape(format!(
                "similarity tensor {:?} vs {} captions x {} images",
                t.shape(),
                captions.len(),
                images.len()
            )));
        }
        let v = t.to_f64();
        let mut m = SimilarityMatrix::default();
        for (r, c) in captions.iter().enumerate() {
            for (k, i) in images.iter().enumerate() {
                m.insert(c, i, v[r * images.len() + k]);
            }
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{argmax_point, gold_map_from_region};
    use proptest::prelude::*;

    fn ids(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    fn scores(xs: &[(&str, f64)]) -> HashMap<String, f64> {
        xs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn req<'a>(
        scores: &'a HashMap<String, f64>,
        pool: &'a [String],
        seed: u64,
    ) -> GameRequest<'a> {
        GameRequest {
            caption_id: "c",
            target_id: "T",
            scores,
            pool,
            groups: None,
            layout_cell: (200, 200),
            seed,
        }
    }

    #[test]
    fn picks_highest_scores() {
        let s = scores(&[("A", 0.9), ("B", 0.8), ("C", 0.7), ("D", 0.1), ("T", 0.95)]);
        let pool = ids(&["A", "B", "C", "D", "T"]);
        let g = build_game(&req(&s, &pool, 4), 2).unwrap();
        let mut d: Vec<_> = g.candidates.iter().filter(|c| *c != "T").cloned().collect();
        d.sort();
        assert_eq!(d, ids(&["A", "B"]));
        assert_eq!(g.target(), "T");
        assert_eq!(g.layout.n_cells, 3);
    }

    #[test]
    fn no_distractors_and_ties() {
        let s = scores(&[("C", 0.8), ("B", 0.8), ("A", 0.1)]);
        let pool = ids(&["A", "B", "C", "T"]);
        let g = build_game(&req(&s, &pool, 0), 0).unwrap();
        assert_eq!(g.candidates, ids(&["T"]));
        assert_eq!(g.target_index, 0);
        let g = build_game(&req(&s, &pool, 0), 1).unwrap();
        assert!(g.candidates.contains(&"B".to_string()));
        assert!(!g.candidates.contains(&"C".to_string()));
    }

    #[test]
    fn excludes_caption_group_and_errors() {
        let s = scores(&[("A", 0.9), ("B", 0.8), ("C", 0.7)]);
        let pool = ids(&["A", "B", "C", "T"]);
        let groups: HashMap<String, String> =
            [("A", "g1"), ("T", "g1"), ("B", "g2")].iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
        let mut r = req(&s, &pool, 0);
        r.groups = Some(&groups);
        let g = build_game(&r, 2).unwrap();
        assert!(!g.candidates.contains(&"A".to_string()));
        assert!(matches!(build_game(&r, 3), Err(Error::Construction(_))));
        let no_target = ids(&["A", "B"]);
        assert!(build_game(&req(&s, &no_target, 0), 1).is_err());
    }

    #[test]
    fn augment_degenerates_to_build() {
        let s: HashMap<String, f64> = (0..30).map(|i| (format!("i{i:02}"), i as f64 / 30.0)).collect();
        let mut pool: Vec<String> = s.keys().cloned().collect();
        pool.push("T".into());
        pool.sort();
        for seed in 0..10 {
            let r = req(&s, &pool, seed);
            assert_eq!(augment_game(&r, 5, 5).unwrap(), build_game(&r, 5).unwrap());
            assert_eq!(augment_game(&r, 20, 5).unwrap(), augment_game(&r, 20, 5).unwrap());
        }
        assert!(augment_game(&req(&s, &pool, 0), 4, 5).is_err());
        // Clipped, not an error.
        assert_eq!(augment_game(&req(&s, &pool, 0), 100, 5).unwrap().candidates.len(), 6);
    }

    #[test]
    fn augment_membership_over_many_seeds() {
        let s: HashMap<String, f64> = (0..40).map(|i| (format!("i{i:02}"), i as f64)).collect();
        let mut pool: Vec<String> = s.keys().cloned().collect();
        pool.push("T".into());
        // Oracle: the top 20 by score are i20..i39.
        let top: std::collections::HashSet<String> = (20..40).map(|i| format!("i{i:02}")).collect();
        let mut seen = std::collections::HashSet::new();
        for seed in 0..1000 {
            let g = augment_game(&req(&s, &pool, seed), AUGMENT_TOP_M, FLICKR_DISTRACTORS).unwrap();
            for c in g.candidates.iter().filter(|c| *c != "T") {
                assert!(top.contains(c), "{c} outside top-20");
                seen.insert(c.clone());
            }
        }
        assert_eq!(seen, top);
    }

    #[test]
    fn pointing_examples() {
        let l = Layout::new(10, 200, 200).unwrap();
        assert_eq!(point_to_choice(Point::new(10.0, 450.0), &l).unwrap(), 2);
        assert_eq!(point_to_choice(Point::new(10.0, 0.0), &l).unwrap(), 0);
        assert_eq!(point_to_choice(Point::new(10.0, 1999.0), &l).unwrap(), 9);
        assert!(point_to_choice(Point::new(10.0, 2000.0), &l).is_err());
    }

    #[test]
    fn gold_region_examples() {
        let game = |idx: usize| ReferenceGame {
            caption_id: "c".into(),
            candidates: (0..10).map(|i| format!("i{i}")).collect(),
            target_index: idx,
            layout: Layout::new(10, 200, 200).unwrap(),
            seed: 0,
        };
        assert_eq!(game_gold_region(&game(0)).boxes(), &[BoundingBox::new(0, 0, 200, 200).unwrap()]);
        assert_eq!(game_gold_region(&game(9)).boxes()[0].y_min, 1800);
        assert_eq!(game_gold_region(&game(9)).boxes()[0].y_max, 2000);
        for k in 0..10 {
            let g = game(k);
            let p = argmax_point(&gold_map_from_region(&game_gold_region(&g)).unwrap());
            assert_eq!(point_to_choice(p, &g.layout).unwrap(), k);
        }
    }

    #[test]
    fn flavor_constants() {
        assert_eq!(GameFlavor::KilogramRg.n_candidates(), 10);
        assert_eq!(GameFlavor::FlickrRg.n_distractors(), 5);
        assert_eq!(GameFlavor::FlickrRg.n_candidates(), 6);
    }

    #[test]
    fn similarity_csv() {
        let m = SimilarityMatrix::from_csv_str("caption_id,image_id,score\nc1,a,0.5\nc1,b,0.25\n").unwrap();
        assert_eq!(m.row("c1").unwrap()["b"], 0.25);
        assert_eq!(m.images(), ids(&["a", "b"]));
        assert!(SimilarityMatrix::from_csv_str("c1,a\n").is_err());
        let t = Tensor::from_f64(vec![1, 2], vec![0.5, 0.25]).unwrap();
        assert_eq!(SimilarityMatrix::from_tensor(&t, &ids(&["c1"]), &ids(&["a", "b"])).unwrap(), m);
    }

    proptest! {
        #[test]
        fn build_never_duplicates(
            raw in prop::collection::vec(0u8..5, 2..30),
            n in 0usize..8,
            seed in any::<u64>(),
        ) {
            let s: HashMap<String, f64> = raw.iter().enumerate()
                .map(|(i, v)| (format!("i{i}"), *v as f64)).collect();
            let mut pool: Vec<String> = s.keys().cloned().collect();
            pool.push("T".into());
            pool.sort();
            let r = req(&s, &pool, seed);
            match build_game(&r, n) {
                Ok(g) => {
                    let set: std::collections::HashSet<_> = g.candidates.iter().collect();
                    prop_assert_eq!(set.len(), g.candidates.len());
                    prop_assert_eq!(g.candidates.iter().filter(|c| *c == "T").count(), 1);
                    prop_assert_eq!(g.target(), "T");
                    let c = g.layout.cell_center(g.target_index);
                    prop_assert_eq!(point_to_choice(c, &g.layout).unwrap(), g.target_index);
                }
                Err(_) => prop_assert!(raw.len() < n),
            }
        }
    }
}
