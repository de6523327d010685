//! Tangram text synthesis and part-box derivation.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use crate::datasets::tokenize::tokenize_with_offsets;
use crate::datasets::Span;
use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, Dims, Region};

/// Non-canonical default; the original template was never published.
pub const DEFAULT_TEMPLATE: &str = "{whole} with {parts}";

const WHOLE: &str = "{whole}";
const PARTS: &str = "{parts}";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Synthesized {
    pub text: String,
    pub whole_span: Span,
    pub part_spans: Vec<Span>,
}

/// `a`, `a and b`, `a, b, and c`.
pub fn render_parts(parts: &[String]) -> String {
    match parts {
        [] => String::new(),
        [one] => one.clone(),
        [a, b] => format!("{a} and {b}"),
        [init @ .., last] => format!("{}, and {last}", init.join(", ")),
    }
}

/// Byte ranges of each part inside the rendered list.
fn part_ranges(parts: &[String]) -> Vec<Range<usize>> {
    let mut at = 0;
    let n = parts.len();
    let mut out = Vec::with_capacity(n);
    for (k, p) in parts.iter().enumerate() {
        out.push(at..at + p.len());
        at += p.len();
        at += match (n, k) {
            (2, 0) => " and ".len(),
            (_, k) if k + 2 == n => ", and ".len(),
            _ => ", ".len(),
        };
    }
    out
}

fn span_for(tokens: &[crate::datasets::tokenize::Token], range: &Range<usize>, what: &str) -> Result<Span> {
    let inside: Vec<usize> = tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| t.range.start < range.end && t.range.end > range.start)
        .map(|(i, _)| i)
        .collect();
    let (Some(&first), Some(&last)) = (inside.first(), inside.last()) else {
        return Err(Error::Template(format!("{what} renders to no tokens")));
    };
    if tokens[first].range.start != range.start || tokens[last].range.end != range.end {
        return Err(Error::Template(format!(
            "{what} does not align with token boundaries"
        )));
    }
    Ok(Span::new(first, last))
}

/// Renders `template` with the whole-shape description and its part list,
/// returning token spans of every inserted phrase.
pub fn kilogram_synthesize(whole: &str, parts: &[String], template: &str) -> Result<Synthesized> {
    let wpos = template
        .find(WHOLE)
        .ok_or_else(|| Error::Template(format!("template lacks {WHOLE}")))?;
    let ppos = template
        .find(PARTS)
        .ok_or_else(|| Error::Template(format!("template lacks {PARTS}")))?;
    if whole.trim().is_empty() {
        return Err(Error::Template("empty whole-shape description".into()));
    }

    let (text, whole_range, parts_start) = if parts.is_empty() {
        (whole.to_string(), 0..whole.len(), 0)
    } else {
        let list = render_parts(parts);
        let mut text = String::new();
        let (whole_range, parts_start);
        if wpos < ppos {
            text.push_str(&template[..wpos]);
            whole_range = text.len()..text.len() + whole.len();
            text.push_str(whole);
            text.push_str(&template[wpos + WHOLE.len()..ppos]);
            parts_start = text.len();
            text.push_str(&list);
            text.push_str(&template[ppos + PARTS.len()..]);
        } else {
            text.push_str(&template[..ppos]);
            parts_start = text.len();
            text.push_str(&list);
            text.push_str(&template[ppos + PARTS.len()..wpos]);
            whole_range = text.len()..text.len() + whole.len();
            text.push_str(whole);
            text.push_str(&template[wpos + WHOLE.len()..]);
        }
        (text, whole_range, parts_start)
    };

    let tokens = tokenize_with_offsets(&text);
    let whole_span = span_for(&tokens, &whole_range, "whole")?;
    let part_spans = part_ranges(parts)
        .into_iter()
        .enumerate()
        .map(|(k, r)| {
            span_for(
                &tokens,
                &(r.start + parts_start..r.end + parts_start),
                &format!("part {k}"),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Synthesized {
        text,
        whole_span,
        part_spans,
    })
}

pub type Rgb = [u8; 3];

/// Indexed-colour segmentation image (one colour per tangram part).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexedMask {
    dims: Dims,
    pixels: Vec<Rgb>,
}

impl IndexedMask {
    pub fn new(dims: Dims, pixels: Vec<Rgb>) -> Result<Self> {
        if pixels.len() != dims.len() {
            return Err(Error::DimMismatch(format!(
                "{} pixels for {}x{} mask",
                pixels.len(),
                dims.h,
                dims.w
            )));
        }
        Ok(IndexedMask { dims, pixels })
    }

    /// Reads a PPM/PGM/PNM file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::ImageReader::open(path)
            .map_err(|e| Error::io(path, e))?
            .with_guessed_format()
            .map_err(|e| Error::io(path, e))?
            .decode()?
            .to_rgb8();
        let dims = Dims::new(img.height() as usize, img.width() as usize);
        let pixels = img.pixels().map(|p| p.0).collect();
        IndexedMask::new(dims, pixels)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn get(&self, col: usize, row: usize) -> Rgb {
        self.pixels[row * self.dims.w + col]
    }
}

/// Tight box around every pixel of each part's colour.
pub fn kilogram_part_boxes(
    mask: &IndexedMask,
    part_to_color: &BTreeMap<String, Rgb>,
) -> Result<BTreeMap<String, Region>> {
    let mut out = BTreeMap::new();
    for (part, &color) in part_to_color {
        let mut extent: Option<BoundingBox> = None;
        for row in 0..mask.dims.h {
            for col in 0..mask.dims.w {
                if mask.get(col, row) != color {
                    continue;
                }
                let b = extent.get_or_insert(BoundingBox {
                    x_min: col,
                    y_min: row,
                    x_max: col + 1,
                    y_max: row + 1,
                });
                b.x_min = b.x_min.min(col);
                b.y_min = b.y_min.min(row);
                b.x_max = b.x_max.max(col + 1);
                b.y_max = b.y_max.max(row + 1);
            }
        }
        let b = extent.ok_or_else(|| Error::MissingPart(part.clone()))?;
        out.insert(part.clone(), Region::single(b, mask.dims)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::tokenize::{detokenize, tokenize};
    use proptest::prelude::*;

    fn parts(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn one_part() {
        let s = kilogram_synthesize("a dog", &parts(&["a head"]), DEFAULT_TEMPLATE).unwrap();
        assert_eq!(s.text, "a dog with a head");
        assert_eq!(s.whole_span, Span::new(0, 1));
        assert_eq!(s.part_spans, vec![Span::new(3, 4)]);
    }

    #[test]
    fn zero_parts() {
        let s = kilogram_synthesize("a dog", &[], DEFAULT_TEMPLATE).unwrap();
        assert_eq!(s.text, "a dog");
        assert_eq!(s.whole_span, Span::new(0, 1));
        assert!(s.part_spans.is_empty());
    }

    #[test]
    fn three_parts_oracle() {
        let ps = parts(&["a head", "two wings", "a tail"]);
        let s = kilogram_synthesize("a bird", &ps, DEFAULT_TEMPLATE).unwrap();
        assert_eq!(s.text, "a bird with a head, two wings, and a tail");
        // Independent check: re-tokenize and search for each phrase's tokens.
        let toks = tokenize(&s.text);
        assert_eq!(s.part_spans, vec![Span::new(3, 4), Span::new(6, 7), Span::new(10, 11)]);
        for (p, sp) in ps.iter().zip(&s.part_spans) {
            assert_eq!(detokenize(&toks[sp.start..=sp.end]), *p);
        }
    }

    #[test]
    fn parts_before_whole_and_errors() {
        let s = kilogram_synthesize("a dog", &parts(&["a head", "a tail"]), "{parts} make {whole}.")
            .unwrap();
        assert_eq!(s.text, "a head and a tail make a dog.");
        assert_eq!(s.part_spans, vec![Span::new(0, 1), Span::new(3, 4)]);
        assert_eq!(s.whole_span, Span::new(6, 7));
        assert!(matches!(
            kilogram_synthesize("a dog", &[], "{whole} only"),
            Err(Error::Template(_))
        ));
        assert!(kilogram_synthesize("a dog", &parts(&["x"]), "{parts}").is_err());
        // Glued to a word: span boundaries would not align.
        assert!(kilogram_synthesize("dog", &parts(&["x"]), "big{whole} {parts}").is_err());
    }

    fn mask_with(dims: Dims, painted: &[((usize, usize), Rgb)]) -> IndexedMask {
        let mut px = vec![[0, 0, 0]; dims.len()];
        for &((c, r), col) in painted {
            px[r * dims.w + c] = col;
        }
        IndexedMask::new(dims, px).unwrap()
    }

    #[test]
    fn part_box_examples() {
        let red = [255, 0, 0];
        let blue = [0, 0, 255];
        let m = mask_with(Dims::new(5, 5), &[((1, 1), red), ((3, 2), red), ((2, 4), blue)]);
        let map: BTreeMap<_, _> = [("head".to_string(), red), ("tail".to_string(), blue)].into();
        let boxes = kilogram_part_boxes(&m, &map).unwrap();
        assert_eq!(boxes["head"].boxes(), &[BoundingBox::new(1, 1, 4, 3).unwrap()]);
        assert_eq!(boxes["tail"].boxes(), &[BoundingBox::new(2, 4, 3, 5).unwrap()]);
        let m = mask_with(Dims::new(5, 5), &[((2, 2), red)]);
        let one: BTreeMap<_, _> = [("head".to_string(), red)].into();
        assert_eq!(
            kilogram_part_boxes(&m, &one).unwrap()["head"].boxes(),
            &[BoundingBox::new(2, 2, 3, 3).unwrap()]
        );
        match kilogram_part_boxes(&m, &map) {
            Err(Error::MissingPart(p)) => assert_eq!(p, "tail"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn loads_ppm() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ppm");
        std::fs::write(&path, b"P3\n3 2\n255\n0 0 0  9 9 9  0 0 0\n0 0 0  0 0 0  9 9 9\n").unwrap();
        let m = IndexedMask::load(&path).unwrap();
        assert_eq!(m.dims(), Dims::new(2, 3));
        let map: BTreeMap<_, _> = [("p".to_string(), [9, 9, 9])].into();
        assert_eq!(
            kilogram_part_boxes(&m, &map).unwrap()["p"].boxes(),
            &[BoundingBox::new(1, 0, 3, 2).unwrap()]
        );
    }

    proptest! {
        #[test]
        fn part_box_is_tight(pts in prop::collection::vec((0usize..9, 0usize..7), 1..12)) {
            let c = [7, 7, 7];
            let dims = Dims::new(7, 9);
            let painted: Vec<_> = pts.iter().map(|&p| (p, c)).collect();
            let m = mask_with(dims, &painted);
            let map: BTreeMap<_, _> = [("p".to_string(), c)].into();
            let b = kilogram_part_boxes(&m, &map).unwrap()["p"].boxes()[0];
            for &(x, y) in &pts {
                prop_assert!(b.contains_pixel(x, y));
            }
            // Shrinking any side by one loses a painted pixel.
            let shrunk = [
                (b.x_min + 1, b.y_min, b.x_max, b.y_max),
                (b.x_min, b.y_min + 1, b.x_max, b.y_max),
                (b.x_min, b.y_min, b.x_max - 1, b.y_max),
                (b.x_min, b.y_min, b.x_max, b.y_max - 1),
            ];
            for (x0, y0, x1, y1) in shrunk {
                let lost = pts.iter().any(|&(x, y)| !(x >= x0 && x < x1 && y >= y0 && y < y1));
                prop_assert!(lost);
            }
        }
    }
}
