//! Query-conditioned upsampling head on frozen features.
//!
//! A phrase query (mean of its token vectors) is tiled over the patch grid
//! and concatenated channel-wise with the patch features; a stack of
//! transposed convolutions with ReLU upsamples the result, a 1×1 projection
//! reduces it to one channel, a bilinear resize brings it to image size and a
//! global softmax turns it into a probability map.
//!
//! Feature bundles live on disk as two GTF files per example:
//! `<id>.patches.gtf` (`gh × gw × d_p`) and `<id>.tokens.gtf` (`T × d_q`).

mod head;
pub mod layers;
mod loss;
mod train;

use std::path::Path;

pub use head::{
    backward_from_logits, head_backward, head_forward, HeadConfig, HeadGrads, HeadTrace,
    HeadWeights, StageConfig, DEFAULT_STAGE_CHANNELS,
};
pub use layers::Volume;
pub use train::BundleMap;
pub use loss::{
    finetune_loss, l1_point_loss, losses, LossKind, LossTarget, LossWeights,
};
pub use train::{
    evaluate_grounding, predict_map, predict_record, task_gold_map, train_head, train_head_from, EvalPoint,
    TrainHyper, TrainOutcome, DEFAULT_EMA_DECAY, DEFAULT_LR, DEFAULT_WEIGHT_DECAY,
};

use crate::datasets::Span;
use crate::error::{Error, Result};
use crate::geometry::Dims;
use crate::tensor::Tensor;

/// Frozen encoder outputs for one example.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub id: String,
    pub image_dims: Dims,
    /// Patch grid, `grid.h × grid.w × d_p`, row-major.
    grid: Dims,
    d_p: usize,
    patches: Vec<f64>,
    /// Token representations, `n_tokens × d_q`.
    n_tokens: usize,
    d_q: usize,
    tokens: Vec<f64>,
}

impl FeatureBundle {
    pub fn new(
        id: impl Into<String>,
        image_dims: Dims,
        grid: Dims,
        d_p: usize,
        patches: Vec<f64>,
        d_q: usize,
        tokens: Vec<f64>,
    ) -> Result<Self> {
        let id = id.into();
        if d_p == 0 || d_q == 0 {
            return Err(Error::Shape(format!("{id}: feature widths must be positive")));
        }
        if grid.is_empty()
            || !image_dims.h.is_multiple_of(grid.h)
            || !image_dims.w.is_multiple_of(grid.w)
            || image_dims.h / grid.h != image_dims.w / grid.w
        {
            return Err(Error::Shape(format!(
                "{id}: {}x{} patch grid does not tile the {}x{} image with square patches",
                grid.h, grid.w, image_dims.h, image_dims.w
            )));
        }
        if patches.len() != grid.len() * d_p {
            return Err(Error::Shape(format!("{id}: patch tensor has {} values", patches.len())));
        }
        if !tokens.len().is_multiple_of(d_q) || tokens.is_empty() {
            return Err(Error::Shape(format!("{id}: token tensor has {} values", tokens.len())));
        }
        if patches.iter().chain(&tokens).any(|v| !v.is_finite()) {
            return Err(Error::Shape(format!("{id}: non-finite feature value")));
        }
        Ok(FeatureBundle {
            id,
            image_dims,
            grid,
            d_p,
            patches,
            n_tokens: tokens.len() / d_q,
            d_q,
            tokens,
        })
    }

    pub fn grid(&self) -> Dims {
        self.grid
    }

    pub fn patch_size(&self) -> usize {
        self.image_dims.h / self.grid.h
    }

    pub fn d_p(&self) -> usize {
        self.d_p
    }

    pub fn d_q(&self) -> usize {
        self.d_q
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn patch(&self, row: usize, col: usize) -> &[f64] {
        let o = (row * self.grid.w + col) * self.d_p;
        &self.patches[o..o + self.d_p]
    }

    pub fn token(&self, t: usize) -> &[f64] {
        &self.tokens[t * self.d_q..(t + 1) * self.d_q]
    }

    pub fn patches_path(dir: &Path, id: &str) -> std::path::PathBuf {
        dir.join(format!("{id}.patches.gtf"))
    }

    pub fn tokens_path(dir: &Path, id: &str) -> std::path::PathBuf {
        dir.join(format!("{id}.tokens.gtf"))
    }

    /// Writes both tensors as f64 GTF into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Tensor::from_f64(vec![self.grid.h, self.grid.w, self.d_p], self.patches.clone())?
            .save(Self::patches_path(dir, &self.id))?;
        Tensor::from_f64(vec![self.n_tokens, self.d_q], self.tokens.clone())?
            .save(Self::tokens_path(dir, &self.id))
    }

    pub fn load(dir: impl AsRef<Path>, id: &str, image_dims: Dims) -> Result<Self> {
        let dir = dir.as_ref();
        let p = Tensor::load(Self::patches_path(dir, id))?;
        let t = Tensor::load(Self::tokens_path(dir, id))?;
        let [gh, gw, d_p] = p.shape()[..] else {
            return Err(Error::Shape(format!("{id}: patch tensor must be rank 3, got {:?}", p.shape())));
        };
        let [_, d_q] = t.shape()[..] else {
            return Err(Error::Shape(format!("{id}: token tensor must be rank 2, got {:?}", t.shape())));
        };
        FeatureBundle::new(id, image_dims, Dims::new(gh, gw), d_p, p.into_f64(), d_q, t.into_f64())
    }
}

/// Pooled phrase representation.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryVector(pub Vec<f64>);

/// Arithmetic mean of the token vectors inside the inclusive `span`.
pub fn pool_query(bundle: &FeatureBundle, span: Span) -> Result<QueryVector> {
    if !span.is_valid_for(bundle.n_tokens) {
        return Err(Error::Parameter(format!(
            "{}: span {span} outside {} tokens",
            bundle.id, bundle.n_tokens
        )));
    }
    let mut q = vec![0.0; bundle.d_q];
    for t in span.start..=span.end {
        for (a, b) in q.iter_mut().zip(bundle.token(t)) {
            *a += b;
        }
    }
    let n = span.len() as f64;
    q.iter_mut().for_each(|v| *v /= n);
    Ok(QueryVector(q))
}

/// Patch features followed by the query in every cell, as a channel-major
/// `(d_p + d_q) × gh × gw` volume.
pub fn tile_concat(bundle: &FeatureBundle, q: &QueryVector) -> Result<Volume> {
    if q.0.len() != bundle.d_q {
        return Err(Error::Shape(format!(
            "query has {} channels, bundle expects {}",
            q.0.len(),
            bundle.d_q
        )));
    }
    let (gh, gw) = (bundle.grid.h, bundle.grid.w);
    let mut v = Volume::zeros(bundle.d_p + bundle.d_q, gh, gw);
    for r in 0..gh {
        for c in 0..gw {
            for (k, &x) in bundle.patch(r, c).iter().enumerate() {
                v.data[(k * gh + r) * gw + c] = x;
            }
        }
    }
    for (k, &x) in q.0.iter().enumerate() {
        v.channel_mut(bundle.d_p + k).fill(x);
    }
    Ok(v)
}

/// Convenience: pooled, tiled input for one span.
pub fn combined_input(bundle: &FeatureBundle, span: Span) -> Result<Volume> {
    tile_concat(bundle, &pool_query(bundle, span)?)
}
