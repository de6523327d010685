//! Benchmark examples: JSONL schema, validation, and the construction
//! procedures used to derive benchmark variants.
//!
//! One JSON object per line:
//!
//! ```json
//! {"id":"td-17","split":"dev","image":"pano/17.jpg","h":800,"w":3712,
//!  "text":"the red door left of the bike","text_id":"t-9",
//!  "task":{"point":[1203.0,410.5]},
//!  "task_span":[0,2],
//!  "phrases":[{"span":[0,2],"surface":"the red door",
//!              "region":{"boxes":[{"x_min":10,"y_min":20,"x_max":40,"y_max":90}],"h":800,"w":3712}}]}
//! ```
//!
//! `task` is either `{"point":[x,y]}` (pointing) or `{"choice":[index,n]}`
//! (reference game). `task_span` is optional and names the tokens pooled
//! into the task query; it defaults to the whole text. `region` may be
//! `null` or absent for phrases without a gold annotation.

mod kilogram;
mod sampling;
pub mod tokenize;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, Dims, Point, Region};

pub use kilogram::{
    kilogram_part_boxes, kilogram_synthesize, render_parts, IndexedMask, Rgb, Synthesized,
    DEFAULT_TEMPLATE,
};
pub use sampling::{sample_fraction, FRACTION_LADDER};
pub use tokenize::{detokenize, tokenize};

pub const SCHEMA_VERSION: u32 = 1;

/// Rows kept by default when cropping street-view panoramas (1600 → 800).
pub const DEFAULT_CROP_WINDOW: (usize, usize) = (760, 1560);

/// Inclusive token span `[start, end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn is_valid_for(&self, n_tokens: usize) -> bool {
        self.start <= self.end && self.end < n_tokens
    }
}

impl From<[usize; 2]> for Span {
    fn from(a: [usize; 2]) -> Self {
        Span::new(a[0], a[1])
    }
}

impl From<Span> for [usize; 2] {
    fn from(s: Span) -> Self {
        [s.start, s.end]
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{}]", self.start, self.end)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phrase {
    pub span: Span,
    pub surface: String,
    pub gold_region: Option<Region>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Task {
    /// Spatial description resolution target.
    Point(Point),
    /// Reference-game target among `n_candidates` stacked images.
    Choice { index: usize, n_candidates: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
    Validation,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
            Split::Validation => "validation",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            "validation" | "val" => Ok(Split::Validation),
            _ => Err(Error::Parameter(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub split: Split,
    pub image_ref: String,
    pub image_dims: Dims,
    pub text: String,
    pub tokens: Vec<String>,
    pub text_id: String,
    pub task: Task,
    pub task_span: Option<Span>,
    pub phrases: Vec<Phrase>,
}

impl Example {
    /// Span pooled into the task query (whole text unless overridden).
    pub fn task_query_span(&self) -> Span {
        self.task_span
            .unwrap_or_else(|| Span::new(0, self.tokens.len().saturating_sub(1)))
    }

    pub fn annotated_phrases(&self) -> impl Iterator<Item = &Phrase> {
        self.phrases.iter().filter(|p| p.gold_region.is_some())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: String| Error::Validation {
            record: self.id.clone(),
            field: field.to_string(),
            msg,
        };
        if self.id.is_empty() {
            return Err(fail("id", "empty id".into()));
        }
        if self.image_dims.is_empty() {
            return Err(fail("h/w", "image has no pixels".into()));
        }
        if self.tokens != tokenize(&self.text) {
            return Err(fail("text", "tokens do not match the text".into()));
        }
        match self.task {
            Task::Point(p) => {
                if !p.in_bounds(self.image_dims) {
                    return Err(fail("task", format!("point ({}, {}) outside image", p.x, p.y)));
                }
            }
            Task::Choice {
                index,
                n_candidates,
            } => {
                if n_candidates == 0 || index >= n_candidates {
                    return Err(fail("task", format!("choice {index} of {n_candidates}")));
                }
                if !self.image_dims.h.is_multiple_of(n_candidates) {
                    return Err(fail(
                        "h",
                        format!("height {} not divisible into {n_candidates} cells", self.image_dims.h),
                    ));
                }
            }
        }
        if let Some(s) = self.task_span {
            if !s.is_valid_for(self.tokens.len()) {
                return Err(fail("task_span", format!("{s} outside {} tokens", self.tokens.len())));
            }
        }
        for p in &self.phrases {
            if !p.span.is_valid_for(self.tokens.len()) {
                return Err(fail(
                    "phrases.span",
                    format!("{} outside {} tokens", p.span, self.tokens.len()),
                ));
            }
            let surface = detokenize(&self.tokens[p.span.start..=p.span.end]);
            if surface != p.surface {
                return Err(fail(
                    "phrases.surface",
                    format!("`{}` does not match span text `{surface}`", p.surface),
                ));
            }
            if let Some(r) = &p.gold_region {
                if r.dims() != self.image_dims {
                    return Err(fail("phrases.region", "region dims differ from image".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExampleSet {
    pub split: Option<Split>,
    pub examples: Vec<Example>,
    pub provenance: BTreeMap<String, String>,
}

impl ExampleSet {
    pub fn new(examples: Vec<Example>) -> Result<Self> {
        let set = ExampleSet {
            split: examples.first().map(|e| e.split),
            examples,
            provenance: BTreeMap::new(),
        };
        set.validate()?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Example> {
        self.examples.iter().find(|e| e.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.examples {
            e.validate()?;
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Validation {
                    record: e.id.clone(),
                    field: "id".into(),
                    msg: "duplicate id".into(),
                });
            }
            if Some(e.split) != self.split {
                return Err(Error::Validation {
                    record: e.id.clone(),
                    field: "split".into(),
                    msg: format!("split {} differs from set split", e.split),
                });
            }
        }
        Ok(())
    }

    pub fn n_annotations(&self) -> usize {
        self.examples
            .iter()
            .map(|e| e.annotated_phrases().count())
            .sum()
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.examples {
            out.push_str(&serde_json::to_string(&ExampleRecord::from(e)).expect("serializable"));
            out.push('\n');
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PhraseRecord {
    span: Span,
    surface: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    region: Option<Region>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
enum TaskRecord {
    Point([f64; 2]),
    Choice([usize; 2]),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExampleRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    schema: Option<u32>,
    id: String,
    split: Split,
    image: String,
    h: usize,
    w: usize,
    text: String,
    text_id: String,
    task: TaskRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    task_span: Option<Span>,
    #[serde(default)]
    phrases: Vec<PhraseRecord>,
}

impl From<&Example> for ExampleRecord {
    fn from(e: &Example) -> Self {
        ExampleRecord {
            schema: None,
            id: e.id.clone(),
            split: e.split,
            image: e.image_ref.clone(),
            h: e.image_dims.h,
            w: e.image_dims.w,
            text: e.text.clone(),
            text_id: e.text_id.clone(),
            task: match e.task {
                Task::Point(p) => TaskRecord::Point([p.x, p.y]),
                Task::Choice {
                    index,
                    n_candidates,
                } => TaskRecord::Choice([index, n_candidates]),
            },
            task_span: e.task_span,
            phrases: e
                .phrases
                .iter()
                .map(|p| PhraseRecord {
                    span: p.span,
                    surface: p.surface.clone(),
                    region: p.gold_region.clone(),
                })
                .collect(),
        }
    }
}

impl ExampleRecord {
    fn into_example(self) -> Result<Example> {
        if let Some(v) = self.schema {
            if v != SCHEMA_VERSION {
                return Err(Error::Validation {
                    record: self.id,
                    field: "schema".into(),
                    msg: format!("unsupported schema version {v}"),
                });
            }
        }
        let e = Example {
            tokens: tokenize(&self.text),
            id: self.id,
            split: self.split,
            image_ref: self.image,
            image_dims: Dims::new(self.h, self.w),
            text: self.text,
            text_id: self.text_id,
            task: match self.task {
                TaskRecord::Point([x, y]) => Task::Point(Point::new(x, y)),
                TaskRecord::Choice([index, n_candidates]) => Task::Choice {
                    index,
                    n_candidates,
                },
            },
            task_span: self.task_span,
            phrases: self
                .phrases
                .into_iter()
                .map(|p| Phrase {
                    span: p.span,
                    surface: p.surface,
                    gold_region: p.region,
                })
                .collect(),
        };
        e.validate()?;
        Ok(e)
    }
}

/// Parses JSONL text; `origin` labels error messages.
pub fn parse_examples(text: &str, origin: &Path) -> Result<ExampleSet> {
    let mut examples = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: ExampleRecord = serde_json::from_str(line).map_err(|e| {
            // Geometry violations surface through serde as custom errors.
            let msg = e.to_string();
            if msg.contains("invalid geometry") {
                Error::Validation {
                    record: format!("line {}", k + 1),
                    field: "region".into(),
                    msg,
                }
            } else {
                Error::Parse {
                    path: origin.to_path_buf(),
                    line: k + 1,
                    msg,
                }
            }
        })?;
        examples.push(rec.into_example()?);
    }
    let mut set = ExampleSet::new(examples)?;
    set.provenance
        .insert("source".into(), origin.display().to_string());
    set.provenance
        .insert("schema".into(), SCHEMA_VERSION.to_string());
    Ok(set)
}

pub fn load_examples(path: impl AsRef<Path>) -> Result<ExampleSet> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_examples(&text, path)
}

/// Crops image rows to `[top, bottom)` and shifts every y coordinate.
///
/// Returns `Ok(None)` when the task point falls outside the window. Boxes are
/// clipped to the window; phrases whose region disappears lose it.
pub fn crop_and_remap(ex: &Example, window: (usize, usize)) -> Result<Option<Example>> {
    let (top, bottom) = window;
    if top >= bottom || bottom > ex.image_dims.h {
        return Err(Error::Parameter(format!(
            "crop window ({top}, {bottom}) invalid for height {}",
            ex.image_dims.h
        )));
    }
    let Task::Point(target) = ex.task else {
        return Err(Error::Parameter(format!(
            "example {} has no point target to crop",
            ex.id
        )));
    };
    let dims = Dims::new(bottom - top, ex.image_dims.w);
    let moved = Point::new(target.x, target.y - top as f64);
    if !moved.in_bounds(dims) {
        return Ok(None);
    }
    let window_box = BoundingBox {
        x_min: 0,
        y_min: top,
        x_max: ex.image_dims.w,
        y_max: bottom,
    };
    let mut out = ex.clone();
    out.image_dims = dims;
    out.task = Task::Point(moved);
    for p in &mut out.phrases {
        let Some(region) = p.gold_region.take() else {
            continue;
        };
        let boxes: Vec<BoundingBox> = region
            .boxes()
            .iter()
            .filter_map(|b| b.intersect(&window_box))
            .map(|b| BoundingBox {
                y_min: b.y_min - top,
                y_max: b.y_max - top,
                ..b
            })
            .collect();
        if !boxes.is_empty() {
            p.gold_region = Some(Region::new(boxes, dims)?);
        }
    }
    Ok(Some(out))
}

/// Applies [`crop_and_remap`] to a whole set, dropping out-of-window examples.
pub fn crop_set(set: &ExampleSet, window: (usize, usize)) -> Result<ExampleSet> {
    let mut examples = Vec::new();
    for e in &set.examples {
        if let Some(c) = crop_and_remap(e, window)? {
            examples.push(c);
        }
    }
    Ok(ExampleSet {
        split: set.split,
        examples,
        provenance: set.provenance.clone(),
    })
}
