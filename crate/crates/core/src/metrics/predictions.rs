//! Model prediction records (JSONL).
//!
//! ```json
//! {"id":"td-17","task_point":[1200.0,400.0],
//!  "phrases":[{"span":[0,2],"mask_ref":"maps/td-17.0.gtf"},
//!             {"span":[4,5],"boxes":[{"x_min":1,"y_min":2,"x_max":9,"y_max":9,"conf":0.8}]}]}
//! ```
//!
//! `mask_ref` paths are resolved relative to the predictions file and must
//! hold a rank-2 `H × W` GTF map. `task_choice` may replace or accompany
//! `task_point` for reference games.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datasets::Span;
use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, Dims, Point, SegMap};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    #[serde(flatten)]
    pub bbox: BoundingBox,
    pub conf: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PhrasePrediction {
    /// Probability map, thresholded at scoring time.
    Map(SegMap),
    /// Confidence-ranked boxes (highest first).
    Boxes(Vec<ScoredBox>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord {
    pub id: String,
    pub task_point: Option<Point>,
    pub task_choice: Option<usize>,
    pub phrases: Vec<(Span, PhrasePrediction)>,
}

impl PredictionRecord {
    pub fn phrase(&self, span: Span) -> Option<&PhrasePrediction> {
        self.phrases.iter().find(|(s, _)| *s == span).map(|(_, p)| p)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PhraseRec {
    span: Span,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mask_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    boxes: Option<Vec<ScoredBox>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PredRec {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    task_point: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    task_choice: Option<usize>,
    #[serde(default)]
    phrases: Vec<PhraseRec>,
}

pub fn map_to_tensor(map: &SegMap) -> Tensor {
    let d = map.dims();
    Tensor::from_f64(vec![d.h, d.w], map.values().to_vec()).expect("shape matches")
}

pub fn map_from_tensor(t: &Tensor) -> Result<SegMap> {
    let [h, w] = t.shape()[..] else {
        return Err(Error::Shape(format!("map tensor must be rank 2, got {:?}", t.shape())));
    };
    SegMap::new(Dims::new(h, w), t.to_f64())
}

/// Parses prediction JSONL; relative `mask_ref`s resolve against `base`.
pub fn parse_predictions(text: &str, base: &Path) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: base.to_path_buf(),
            line: k + 1,
            msg,
        };
        let rec: PredRec = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        let mut phrases = Vec::with_capacity(rec.phrases.len());
        for p in rec.phrases {
            let pred = match (p.mask_ref, p.boxes) {
                (Some(r), None) => {
                    let path = base.join(&r);
                    PhrasePrediction::Map(map_from_tensor(&Tensor::load(&path)?)?)
                }
                (None, Some(b)) => PhrasePrediction::Boxes(b),
                _ => {
                    return Err(parse_err(format!(
                        "phrase {} needs exactly one of mask_ref / boxes",
                        p.span
                    )))
                }
            };
            phrases.push((p.span, pred));
        }
        out.push(PredictionRecord {
            id: rec.id,
            task_point: rec.task_point.map(|[x, y]| Point::new(x, y)),
            task_choice: rec.task_choice,
            phrases,
        });
    }
    Ok(out)
}

pub fn load_predictions(path: impl AsRef<Path>) -> Result<Vec<PredictionRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    parse_predictions(&text, &base).map_err(|e| match e {
        Error::Parse { line, msg, .. } => Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        },
        e => e,
    })
}

/// Writes predictions as JSONL; maps are stored as f32 GTF files under
/// `maps_dir` (relative to the JSONL file) named `<id>.<k>.gtf`.
pub fn save_predictions(
    preds: &[PredictionRecord],
    path: impl AsRef<Path>,
    maps_dir: &str,
) -> Result<()> {
    let path = path.as_ref();
    let base: PathBuf = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut text = String::new();
    let mut made_dir = false;
    for r in preds {
        let mut phrases = Vec::new();
        for (k, (span, p)) in r.phrases.iter().enumerate() {
            match p {
                PhrasePrediction::Boxes(b) => phrases.push(PhraseRec {
                    span: *span,
                    mask_ref: None,
                    boxes: Some(b.clone()),
                }),
                PhrasePrediction::Map(m) => {
                    if !made_dir {
                        let d = base.join(maps_dir);
                        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
                        made_dir = true;
                    }
                    let rel = format!("{maps_dir}/{}.{k}.gtf", r.id);
                    let dims = m.dims();
                    let v32: Vec<f32> = m.values().iter().map(|&v| v as f32).collect();
                    Tensor::from_f32(vec![dims.h, dims.w], v32)?.save(base.join(&rel))?;
                    phrases.push(PhraseRec {
                        span: *span,
                        mask_ref: Some(rel),
                        boxes: None,
                    });
                }
            }
        }
        let rec = PredRec {
            id: r.id.clone(),
            task_point: r.task_point.map(|p| [p.x, p.y]),
            task_choice: r.task_choice,
            phrases,
        };
        text.push_str(&serde_json::to_string(&rec)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
