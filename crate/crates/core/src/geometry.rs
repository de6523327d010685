//! Pixel-exact geometry: boxes, regions, masks and probability maps.
//!
//! Coordinates live on the integer pixel grid with the origin at the top-left
//! corner, x growing rightward and y downward. Boxes are half-open:
//! pixel `(col, row)` is inside `[x_min, x_max) × [y_min, y_max)` iff
//! `x_min <= col < x_max` and `y_min <= row < y_max`. A [`Point`] is
//! expressed in the same units with pixel `(col, row)` centred at
//! `(col, row)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default standard deviation, in pixels, of Gaussian gold maps.
pub const DEFAULT_GAUSSIAN_SIGMA: f64 = 40.0;

/// Floor applied to predicted probabilities before taking a logarithm.
pub const KL_EPSILON: f64 = 1e-12;

/// Tolerance on `|sum - 1|` accepted for maps that claim to be normalized.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn new(h: usize, w: usize) -> Self {
        Dims { h, w }
    }

    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check_same(self, other: Dims) -> Result<()> {
        if self != other {
            return Err(Error::DimMismatch(format!(
                "{}x{} vs {}x{}",
                self.h, self.w, other.h, other.w
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn in_bounds(&self, dims: Dims) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.x < dims.w as f64 && self.y < dims.h as f64
    }
}

/// Axis-aligned half-open pixel box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BoundingBox {
    pub fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Result<Self> {
        let b = BoundingBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        b.check_shape()?;
        Ok(b)
    }

    fn check_shape(&self) -> Result<()> {
        if self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(Error::InvalidGeometry(format!(
                "empty or inverted box [{},{})x[{},{})",
                self.x_min, self.x_max, self.y_min, self.y_max
            )));
        }
        Ok(())
    }

    pub fn validate(&self, dims: Dims) -> Result<()> {
        self.check_shape()?;
        if self.x_max > dims.w || self.y_max > dims.h {
            return Err(Error::InvalidGeometry(format!(
                "box [{},{})x[{},{}) outside {}x{} image",
                self.x_min, self.x_max, self.y_min, self.y_max, dims.h, dims.w
            )));
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains_pixel(&self, col: usize, row: usize) -> bool {
        col >= self.x_min && col < self.x_max && row >= self.y_min && row < self.y_max
    }

    /// Intersection with another box, `None` when they do not overlap.
    pub fn intersect(&self, other: &BoundingBox) -> Option<BoundingBox> {
        let b = BoundingBox {
            x_min: self.x_min.max(other.x_min),
            y_min: self.y_min.max(other.y_min),
            x_max: self.x_max.min(other.x_max),
            y_max: self.y_max.min(other.y_max),
        };
        (b.x_min < b.x_max && b.y_min < b.y_max).then_some(b)
    }
}

/// Union of boxes on an image of known size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RegionRepr", into = "RegionRepr")]
pub struct Region {
    boxes: Vec<BoundingBox>,
    dims: Dims,
}

#[derive(Serialize, Deserialize)]
struct RegionRepr {
    boxes: Vec<BoundingBox>,
    h: usize,
    w: usize,
}

impl TryFrom<RegionRepr> for Region {
    type Error = Error;

    fn try_from(r: RegionRepr) -> Result<Self> {
        Region::new(r.boxes, Dims::new(r.h, r.w))
    }
}

impl From<Region> for RegionRepr {
    fn from(r: Region) -> Self {
        RegionRepr {
            boxes: r.boxes,
            h: r.dims.h,
            w: r.dims.w,
        }
    }
}

impl Region {
    pub fn new(boxes: Vec<BoundingBox>, dims: Dims) -> Result<Self> {
        if boxes.is_empty() {
            return Err(Error::InvalidGeometry("region has no boxes".into()));
        }
        for b in &boxes {
            b.validate(dims)?;
        }
        Ok(Region { boxes, dims })
    }

    pub fn single(b: BoundingBox, dims: Dims) -> Result<Self> {
        Region::new(vec![b], dims)
    }

    pub fn boxes(&self) -> &[BoundingBox] {
        &self.boxes
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    dims: Dims,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn empty(dims: Dims) -> Self {
        BinaryMask {
            dims,
            bits: vec![false; dims.len()],
        }
    }

    pub fn from_bits(dims: Dims, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != dims.len() {
            return Err(Error::DimMismatch(format!(
                "{} bits for {}x{} mask",
                bits.len(),
                dims.h,
                dims.w
            )));
        }
        Ok(BinaryMask { dims, bits })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn get(&self, col: usize, row: usize) -> bool {
        self.bits[row * self.dims.w + col]
    }

    pub fn set(&mut self, col: usize, row: usize, v: bool) {
        self.bits[row * self.dims.w + col] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// `true` iff every set pixel of `other` is also set here.
    pub fn contains(&self, other: &BinaryMask) -> bool {
        self.dims == other.dims && self.bits.iter().zip(&other.bits).all(|(&a, &b)| a || !b)
    }
}

/// Non-negative per-pixel map, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SegMap {
    dims: Dims,
    values: Vec<f64>,
}

impl SegMap {
    pub fn new(dims: Dims, values: Vec<f64>) -> Result<Self> {
        if values.len() != dims.len() {
            return Err(Error::DimMismatch(format!(
                "{} values for {}x{} map",
                values.len(),
                dims.h,
                dims.w
            )));
        }
        if dims.is_empty() {
            return Err(Error::DegenerateMap("map has no pixels".into()));
        }
        if let Some(v) = values.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
            return Err(Error::DegenerateMap(format!("invalid pixel value {v}")));
        }
        Ok(SegMap { dims, values })
    }

    pub fn uniform(dims: Dims) -> Self {
        let v = 1.0 / dims.len() as f64;
        SegMap {
            dims,
            values: vec![v; dims.len()],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.values[row * self.dims.w + col]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn is_normalized(&self, tol: f64) -> bool {
        (self.sum() - 1.0).abs() <= tol
    }

    /// Rescales to unit total mass.
    pub fn normalized(mut self) -> Result<Self> {
        let s = self.sum();
        if s <= 0.0 {
            return Err(Error::DegenerateMap("cannot normalize all-zero map".into()));
        }
        self.values.iter_mut().for_each(|v| *v /= s);
        Ok(self)
    }

    pub fn scaled(&self, k: f64) -> Result<Self> {
        SegMap::new(self.dims, self.values.iter().map(|v| v * k).collect())
    }
}

/// Rasterizes the union of a region's boxes.
pub fn rasterize(region: &Region) -> Result<BinaryMask> {
    let dims = region.dims();
    let mut mask = BinaryMask::empty(dims);
    for b in region.boxes() {
        b.validate(dims)?;
        for row in b.y_min..b.y_max {
            let start = row * dims.w;
            mask.bits[start + b.x_min..start + b.x_max].fill(true);
        }
    }
    Ok(mask)
}

/// Intersection over union of two masks; two empty masks score 0.
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.dims.check_same(b.dims)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.bits.iter().zip(&b.bits) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Uniform probability over the rasterized region, zero elsewhere.
pub fn gold_map_from_region(region: &Region) -> Result<SegMap> {
    let mask = rasterize(region)?;
    let n = mask.count();
    let v = 1.0 / n as f64;
    let values = mask.bits.iter().map(|&b| if b { v } else { 0.0 }).collect();
    SegMap::new(mask.dims, values)
}

/// Isotropic Gaussian around `center`, evaluated at pixel centres and
/// renormalized over the finite grid.
pub fn gold_map_gaussian(center: Point, sigma: f64, dims: Dims) -> Result<SegMap> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Parameter(format!("sigma must be positive, got {sigma}")));
    }
    if dims.is_empty() {
        return Err(Error::Parameter("empty grid".into()));
    }
    if !center.x.is_finite() || !center.y.is_finite() {
        return Err(Error::Parameter("non-finite center".into()));
    }
    let inv = 1.0 / (2.0 * sigma * sigma);
    // Work in log space relative to the closest pixel so tiny sigmas do not
    // underflow the whole grid.
    let log_at = |col: usize, row: usize| {
        let dx = col as f64 - center.x;
        let dy = row as f64 - center.y;
        -(dx * dx + dy * dy) * inv
    };
    let mut values = Vec::with_capacity(dims.len());
    for row in 0..dims.h {
        for col in 0..dims.w {
            values.push(log_at(col, row));
        }
    }
    let peak = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values.iter_mut().for_each(|v| *v = (*v - peak).exp());
    SegMap::new(dims, values)?.normalized()
}

/// Divides by the map maximum and keeps pixels at or above `t`.
pub fn normalize_threshold(map: &SegMap, t: f64) -> Result<BinaryMask> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Parameter(format!("threshold {t} outside (0, 1]")));
    }
    let max = map.max();
    if !(max > 0.0) {
        return Err(Error::DegenerateMap("all-zero map cannot be thresholded".into()));
    }
    let bits = map.values.iter().map(|&v| v / max >= t).collect();
    Ok(BinaryMask {
        dims: map.dims,
        bits,
    })
}

/// Pixel-centre coordinates of the maximum; ties go to the first pixel in
/// row-major order.
pub fn argmax_point(map: &SegMap) -> Point {
    let mut best = 0;
    for (i, &v) in map.values.iter().enumerate() {
        if v > map.values[best] {
            best = i;
        }
    }
    Point::new((best % map.dims.w) as f64, (best / map.dims.w) as f64)
}

/// `KL(gold || pred)` with the prediction floored at [`KL_EPSILON`].
pub fn kl_divergence(gold: &SegMap, pred: &SegMap) -> Result<f64> {
    gold.dims.check_same(pred.dims)?;
    for m in [gold, pred] {
        if !m.is_normalized(NORMALIZATION_TOLERANCE) {
            return Err(Error::Unnormalized(m.sum()));
        }
    }
    let mut kl = 0.0;
    for (&s, &p) in gold.values.iter().zip(&pred.values) {
        if s > 0.0 {
            kl += s * (s / p.max(KL_EPSILON)).ln();
        }
    }
    Ok(kl.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x0: usize, y0: usize, x1: usize, y1: usize) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    fn d(h: usize, w: usize) -> Dims {
        Dims::new(h, w)
    }

    #[test]
    fn rasterize_single_box() {
        let m = rasterize(&Region::single(bx(0, 0, 2, 2), d(4, 4)).unwrap()).unwrap();
        assert_eq!(m.count(), 4);
        for (c, r) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            assert!(m.get(c, r));
        }
    }

    #[test]
    fn rasterize_overlap_counts_once() {
        let r = Region::new(vec![bx(0, 0, 2, 2), bx(1, 1, 3, 3)], d(4, 4)).unwrap();
        assert_eq!(rasterize(&r).unwrap().count(), 7);
        let full = Region::single(bx(0, 0, 4, 4), d(4, 4)).unwrap();
        assert_eq!(rasterize(&full).unwrap().count(), 16);
    }

    #[test]
    fn region_rejects_out_of_bounds_box() {
        let err = Region::single(bx(0, 0, 5, 2), d(4, 4)).unwrap_err();
        assert!(matches!(err, Error::InvalidGeometry(_)));
        assert!(BoundingBox::new(3, 0, 1, 2).is_err());
        assert!(Region::new(vec![], d(4, 4)).is_err());
    }

    #[test]
    fn region_json_schema() {
        let r: Region = serde_json::from_str(
            r#"{"boxes":[{"x_min":0,"y_min":1,"x_max":2,"y_max":3}],"h":4,"w":5}"#,
        )
        .unwrap();
        assert_eq!(r.dims(), d(4, 5));
        let s = serde_json::to_string(&r).unwrap();
        assert_eq!(s, r#"{"boxes":[{"x_min":0,"y_min":1,"x_max":2,"y_max":3}],"h":4,"w":5}"#);
        let bad = r#"{"boxes":[{"x_min":3,"y_min":1,"x_max":2,"y_max":3}],"h":4,"w":5}"#;
        assert!(serde_json::from_str::<Region>(bad).is_err());
    }

    #[test]
    fn iou_examples() {
        let a = rasterize(&Region::single(bx(0, 0, 2, 2), d(4, 4)).unwrap()).unwrap();
        let b = rasterize(&Region::single(bx(1, 1, 3, 3), d(4, 4)).unwrap()).unwrap();
        let c = rasterize(&Region::single(bx(2, 2, 4, 4), d(4, 4)).unwrap()).unwrap();
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&a, &c).unwrap(), 0.0);
        assert!((iou(&a, &b).unwrap() - 1.0 / 7.0).abs() < 1e-15);
        let e = BinaryMask::empty(d(4, 4));
        assert_eq!(iou(&e, &e).unwrap(), 0.0);
        assert!(iou(&a, &BinaryMask::empty(d(3, 4))).is_err());
    }

    #[test]
    fn gold_map_region_examples() {
        let m = gold_map_from_region(&Region::single(bx(0, 0, 2, 2), d(4, 4)).unwrap()).unwrap();
        assert_eq!(m.values().iter().filter(|&&v| v == 0.25).count(), 4);
        let r = Region::new(vec![bx(0, 0, 2, 2), bx(1, 1, 3, 3)], d(4, 4)).unwrap();
        let m = gold_map_from_region(&r).unwrap();
        assert_eq!(m.values().iter().filter(|&&v| v == 1.0 / 7.0).count(), 7);
        let m = gold_map_from_region(&Region::single(bx(0, 0, 2, 2), d(2, 2)).unwrap()).unwrap();
        assert!(m.values().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn gaussian_examples() {
        let m = gold_map_gaussian(Point::new(1.0, 1.0), 1.0, d(3, 3)).unwrap();
        let expected = 1.0 / (1.0 + 4.0 * (-0.5f64).exp() + 4.0 * (-1.0f64).exp());
        assert!((m.get(1, 1) - expected).abs() < 1e-15);
        assert!((m.get(1, 1) - 0.2042).abs() < 1e-4);
        let m = gold_map_gaussian(Point::new(2.2, 3.9), 1e-3, d(5, 5)).unwrap();
        assert!((m.get(2, 4) - 1.0).abs() < 1e-12);
        assert!(gold_map_gaussian(Point::new(0.0, 0.0), 0.0, d(2, 2)).is_err());
        assert!(gold_map_gaussian(Point::new(0.0, 0.0), -1.0, d(2, 2)).is_err());
    }

    #[test]
    fn threshold_examples() {
        let m = SegMap::new(d(1, 3), vec![0.5, 0.35, 0.2]).unwrap();
        let t = normalize_threshold(&m, 0.6).unwrap();
        assert_eq!(t.bits(), &[true, true, false]);
        let m = SegMap::new(d(1, 4), vec![0.3, 0.1, 0.3, 0.3]).unwrap();
        assert_eq!(normalize_threshold(&m, 1.0).unwrap().bits(), &[true, false, true, true]);
        let u = SegMap::uniform(d(3, 3));
        assert_eq!(normalize_threshold(&u, 0.9).unwrap().count(), 9);
        let z = SegMap::new(d(1, 2), vec![0.0, 0.0]).unwrap();
        assert!(matches!(normalize_threshold(&z, 0.5), Err(Error::DegenerateMap(_))));
        assert!(normalize_threshold(&u, 0.0).is_err());
    }

    #[test]
    fn argmax_examples() {
        let mut v = vec![0.0; 100];
        v[7 * 10 + 3] = 1.0;
        assert_eq!(argmax_point(&SegMap::new(d(10, 10), v).unwrap()), Point::new(3.0, 7.0));
        let mut v = vec![0.0; 12];
        v[5] = 0.5;
        v[9] = 0.5;
        assert_eq!(argmax_point(&SegMap::new(d(3, 4), v).unwrap()), Point::new(1.0, 1.0));
        assert_eq!(argmax_point(&SegMap::uniform(d(4, 4))), Point::new(0.0, 0.0));
    }

    #[test]
    fn kl_examples() {
        let g = SegMap::new(d(1, 2), vec![0.5, 0.5]).unwrap();
        assert_eq!(kl_divergence(&g, &g).unwrap(), 0.0);
        let onehot = SegMap::new(d(1, 2), vec![1.0, 0.0]).unwrap();
        assert!((kl_divergence(&onehot, &g).unwrap() - 2f64.ln()).abs() < 1e-15);
        let p = SegMap::new(d(1, 2), vec![0.25, 0.75]).unwrap();
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kl_divergence(&g, &p).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.1438).abs() < 1e-4);
        let un = SegMap::new(d(1, 2), vec![0.5, 0.6]).unwrap();
        assert!(matches!(kl_divergence(&un, &g), Err(Error::Unnormalized(_))));
        assert!(kl_divergence(&g, &SegMap::uniform(d(2, 1))).is_err());
    }

    fn arb_box(h: usize, w: usize) -> impl Strategy<Value = BoundingBox> {
        (0..w, 0..h).prop_flat_map(move |(x0, y0)| {
            ((x0 + 1)..=w, (y0 + 1)..=h).prop_map(move |(x1, y1)| BoundingBox {
                x_min: x0,
                y_min: y0,
                x_max: x1,
                y_max: y1,
            })
        })
    }

    fn arb_map() -> impl Strategy<Value = SegMap> {
        (1usize..6, 1usize..6).prop_flat_map(|(h, w)| {
            prop::collection::vec(0.0f64..1.0, h * w).prop_filter_map("zero map", move |v| {
                SegMap::new(d(h, w), v).ok()?.normalized().ok()
            })
        })
    }

    proptest! {
        #[test]
        fn iou_symmetric(a in arb_box(12, 9), b in arb_box(12, 9)) {
            let ma = rasterize(&Region::single(a, d(12, 9)).unwrap()).unwrap();
            let mb = rasterize(&Region::single(b, d(12, 9)).unwrap()).unwrap();
            prop_assert_eq!(iou(&ma, &mb).unwrap(), iou(&mb, &ma).unwrap());
            prop_assert_eq!(iou(&ma, &mb).unwrap() == 1.0, a == b);
        }

        #[test]
        fn threshold_monotone(m in arb_map(), t1 in 0.01f64..1.0, t2 in 0.01f64..1.0) {
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            let big = normalize_threshold(&m, lo).unwrap();
            let small = normalize_threshold(&m, hi).unwrap();
            prop_assert!(big.contains(&small));
        }

        #[test]
        fn argmax_scale_invariant(m in arb_map(), k in 1e-3f64..1e3) {
            prop_assert_eq!(argmax_point(&m), argmax_point(&m.scaled(k).unwrap()));
        }

        #[test]
        fn kl_nonnegative(a in arb_map()) {
            let b = SegMap::uniform(a.dims());
            prop_assert!(kl_divergence(&a, &b).unwrap() >= 0.0);
            prop_assert!(kl_divergence(&a, &a).unwrap().abs() < 1e-12);
        }

        #[test]
        fn gaussian_sums_to_one(h in 1usize..20, w in 1usize..20, fx in 0.0f64..1.0, fy in 0.0f64..1.0, sigma in 0.1f64..50.0) {
            let c = Point::new(fx * (w - 1) as f64, fy * (h - 1) as f64);
            let m = gold_map_gaussian(c, sigma, d(h, w)).unwrap();
            prop_assert!((m.sum() - 1.0).abs() < 1e-9);
        }
    }
}
