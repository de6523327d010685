//! Linear probing of a frozen head's intermediate stage maps.
//!
//! Every stage map is bilinearly resized to the last stage's resolution and
//! concatenated on channels; a per-pixel linear functional with bias (a 1×1
//! convolution) gives one logit channel, which is resized to image size and
//! softmaxed globally. Training minimizes KL(gold ‖ probe output).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignhead::layers::{kl_from_logits, softmax, Bilinear, Volume};
use crate::alignhead::{combined_input, head_forward, FeatureBundle, HeadWeights};
use crate::datasets::{Example, Span};
use crate::error::{Error, Result};
use crate::geometry::{gold_map_from_region, iou, normalize_threshold, rasterize, Dims, Region, SegMap};
use crate::metrics::{calibrate_threshold, calibration_grid};
use crate::par::{self, Jobs};
use crate::tensor::Tensor;

pub const DEFAULT_PROBE_LR: f64 = 1e-2;

/// Stage maps resized to a common resolution and stacked on channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeFeatures(pub Volume);

impl ProbeFeatures {
    pub fn channels(&self) -> usize {
        self.0.c
    }
}

/// Bilinearly resizes every map to the last map's size and concatenates
/// them in order.
pub fn tap_concat(stage_maps: &[Volume]) -> Result<ProbeFeatures> {
    let last = stage_maps
        .last()
        .ok_or_else(|| Error::Parameter("probe needs at least one stage map".into()))?;
    let (h, w) = (last.h, last.w);
    let mut data = Vec::with_capacity(stage_maps.iter().map(|m| m.c).sum::<usize>() * h * w);
    for m in stage_maps {
        if (m.h, m.w) == (h, w) {
            data.extend_from_slice(&m.data);
        } else {
            data.extend(Bilinear::new(m.h, m.w, h, w).apply_volume(m).data);
        }
    }
    let c = data.len() / (h * w);
    Ok(ProbeFeatures(Volume::new(c, h, w, data)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeWeights {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl ProbeWeights {
    pub fn zeros(channels: usize) -> Self {
        ProbeWeights {
            weights: vec![0.0; channels],
            bias: 0.0,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let w: ProbeWeights = serde_json::from_str(&text)?;
        if w.weights.iter().chain([&w.bias]).any(|v| !v.is_finite()) {
            return Err(Error::Parameter("non-finite probe weight".into()));
        }
        Ok(w)
    }
}

fn probe_logits(f: &ProbeFeatures, w: &ProbeWeights, target: Dims) -> Result<(Vec<f64>, Bilinear)> {
    let v = &f.0;
    if w.weights.len() != v.c {
        return Err(Error::Shape(format!(
            "probe has {} weights for {} feature channels",
            w.weights.len(),
            v.c
        )));
    }
    let mut low = vec![w.bias; v.h * v.w];
    for (c, &k) in w.weights.iter().enumerate() {
        for (o, &x) in low.iter_mut().zip(v.channel(c)) {
            *o += k * x;
        }
    }
    let r = Bilinear::new(v.h, v.w, target.h, target.w);
    Ok((r.apply(&low), r))
}

pub fn probe_forward(f: &ProbeFeatures, w: &ProbeWeights, target: Dims) -> Result<SegMap> {
    let (z, _) = probe_logits(f, w, target)?;
    SegMap::new(target, softmax(&z))
}

/// KL(gold ‖ probe output) and its gradient.
pub fn probe_loss_grad(f: &ProbeFeatures, w: &ProbeWeights, gold: &SegMap) -> Result<(f64, ProbeWeights)> {
    let (z, r) = probe_logits(f, w, gold.dims())?;
    let p = softmax(&z);
    let dz: Vec<f64> = p.iter().zip(gold.values()).map(|(a, b)| a - b).collect();
    let d_low = r.adjoint(&dz);
    let grads = (0..f.0.c)
        .map(|c| f.0.channel(c).iter().zip(&d_low).map(|(x, d)| x * d).sum())
        .collect();
    Ok((
        kl_from_logits(gold.values(), &z),
        ProbeWeights {
            weights: grads,
            bias: d_low.iter().sum(),
        },
    ))
}

/// One annotated phrase ready for probing.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeItem {
    pub example_id: String,
    pub features: ProbeFeatures,
    pub region: Region,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeHyper {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    /// Validation cadence; 0 evaluates only after the last step.
    pub eval_every: usize,
    pub threshold: Option<f64>,
    #[serde(skip)]
    pub jobs: Jobs,
}

impl Default for ProbeHyper {
    fn default() -> Self {
        ProbeHyper {
            lr: DEFAULT_PROBE_LR,
            steps: 1000,
            batch: 16,
            seed: 0,
            eval_every: 0,
            threshold: None,
            jobs: Jobs::SEQUENTIAL,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeOutcome {
    pub weights: ProbeWeights,
    pub losses: Vec<f64>,
    /// `(step, mean-IoU, threshold)`.
    pub evals: Vec<(usize, f64, f64)>,
}

/// Mini-batch gradient descent from zero weights.
pub fn train_probe(items: &[ProbeItem], val: Option<&[ProbeItem]>, hyper: &ProbeHyper) -> Result<ProbeOutcome> {
    if !(hyper.lr > 0.0 && hyper.lr.is_finite()) || hyper.batch == 0 {
        return Err(Error::Parameter("probe lr and batch must be positive".into()));
    }
    let channels = items
        .first()
        .map(|i| i.features.channels())
        .ok_or_else(|| Error::Parameter("no probe training items".into()))?;
    let golds: Vec<SegMap> = items
        .iter()
        .map(|i| gold_map_from_region(&i.region))
        .collect::<Result<_>>()?;
    let mut w = ProbeWeights::zeros(channels);
    let mut losses = Vec::with_capacity(hyper.steps);
    let mut evals = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0;
    let batch = hyper.batch.min(items.len());
    for step in 0..hyper.steps {
        let mut idx = Vec::with_capacity(batch);
        while idx.len() < batch {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let res = par::try_map(&idx, hyper.jobs, |&i| probe_loss_grad(&items[i].features, &w, &golds[i]))?;
        let scale = 1.0 / batch as f64;
        let mut loss = 0.0;
        let mut g = ProbeWeights::zeros(channels);
        for (l, gi) in &res {
            loss += l * scale;
            for (a, b) in g.weights.iter_mut().zip(&gi.weights) {
                *a += b * scale;
            }
            g.bias += gi.bias * scale;
        }
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                msg: format!("probe loss {loss} with lr {}", hyper.lr),
            });
        }
        for (a, b) in w.weights.iter_mut().zip(&g.weights) {
            *a -= hyper.lr * b;
        }
        w.bias -= hyper.lr * g.bias;
        losses.push(loss);
        let last = step + 1 == hyper.steps;
        if let Some(val) = val {
            if last || (hyper.eval_every > 0 && (step + 1) % hyper.eval_every == 0) {
                let (m, t) = evaluate_probe(&w, val, hyper.threshold, hyper.jobs)?;
                evals.push((step + 1, m, t));
            }
        }
    }
    Ok(ProbeOutcome {
        weights: w,
        losses,
        evals,
    })
}

/// Macro mean-IoU (per example, then across examples) of probe maps.
pub fn evaluate_probe(w: &ProbeWeights, items: &[ProbeItem], threshold: Option<f64>, jobs: Jobs) -> Result<(f64, f64)> {
    if items.is_empty() {
        return Err(Error::Parameter("no probe items to evaluate".into()));
    }
    let pairs: Vec<(SegMap, Region)> = par::try_map(items, jobs, |i| {
        Ok::<_, Error>((probe_forward(&i.features, w, i.region.dims())?, i.region.clone()))
    })?;
    let t = match threshold {
        Some(t) => t,
        None => calibrate_threshold(&pairs, &calibration_grid(), jobs)?.0,
    };
    let mut per_ex: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for (item, (m, g)) in items.iter().zip(&pairs) {
        let v = iou(&normalize_threshold(m, t)?, &rasterize(g)?)?;
        let e = per_ex.entry(item.example_id.as_str()).or_default();
        e.0 += v;
        e.1 += 1;
    }
    let mean = per_ex.values().map(|(s, n)| s / *n as f64).sum::<f64>() / per_ex.len() as f64;
    Ok((mean, t))
}

/// A row in the layout of [`crate::metrics::REPORT_CSV_HEADER`] tagged
/// `probe`; task columns are `n/a` since a probe makes no task prediction.
pub fn probe_report_row(n_examples: usize, n_grounded: usize, mean_iou: f64, threshold: f64) -> String {
    format!("probe,{n_examples},n/a,n/a,n/a,{mean_iou:.6},n/a,n/a,n/a,n/a,n/a,{n_grounded},0,{threshold:.2}")
}

/// Probe features of every annotated phrase of `ex` under a frozen head.
pub fn phrase_features(head: &HeadWeights, ex: &Example, bundle: &FeatureBundle) -> Result<Vec<(Span, ProbeFeatures)>> {
    ex.annotated_phrases()
        .map(|p| {
            let trace = head_forward(&combined_input(bundle, p.span)?, head)?;
            Ok((p.span, tap_concat(&trace.stages)?))
        })
        .collect()
}

/// On-disk cache of probe features keyed by head checksum and example id:
/// `<root>/<checksum>/<id>.gtf`, a rank-4 `n_phrases × C × h × w` tensor.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    root: PathBuf,
}

impl FeatureCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        FeatureCache { root: root.into() }
    }

    pub fn path(&self, checksum: &str, id: &str) -> PathBuf {
        self.root.join(checksum).join(format!("{id}.gtf"))
    }

    fn read(&self, checksum: &str, ex: &Example) -> Result<Option<Vec<(Span, ProbeFeatures)>>> {
        let p = self.path(checksum, &ex.id);
        if !p.exists() {
            return Ok(None);
        }
        let t = Tensor::load(&p)?;
        let spans: Vec<Span> = ex.annotated_phrases().map(|p| p.span).collect();
        let [n, c, h, w] = t.shape()[..] else {
            return Err(Error::Format(format!("{}: cache entry must be rank 4", p.display())));
        };
        if n != spans.len() {
            return Err(Error::Format(format!("{}: {n} cached phrases, expected {}", p.display(), spans.len())));
        }
        let data = t.into_f64();
        let per = c * h * w;
        spans
            .into_iter()
            .enumerate()
            .map(|(k, s)| Ok((s, ProbeFeatures(Volume::new(c, h, w, data[k * per..(k + 1) * per].to_vec())?))))
            .collect::<Result<_>>()
            .map(Some)
    }

    fn write(&self, checksum: &str, id: &str, feats: &[(Span, ProbeFeatures)]) -> Result<()> {
        let Some((_, first)) = feats.first() else {
            return Ok(());
        };
        let v = &first.0;
        let mut data = Vec::with_capacity(feats.len() * v.data.len());
        for (_, f) in feats {
            data.extend_from_slice(&f.0.data);
        }
        let p = self.path(checksum, id);
        let dir = p.parent().expect("cache path has a parent");
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Tensor::from_f64(vec![feats.len(), v.c, v.h, v.w], data)?.save(p)
    }
}

/// Probe items for every annotated phrase, optionally through a cache.
/// The head is checked to be unchanged by the pass.
pub fn build_items(
    head: &HeadWeights,
    examples: &[Example],
    bundles: &BTreeMap<String, FeatureBundle>,
    cache: Option<&FeatureCache>,
    jobs: Jobs,
) -> Result<Vec<ProbeItem>> {
    let before = head.checksum();
    let per_ex = par::try_map(examples, jobs, |ex| {
        let cached = match cache {
            Some(c) => c.read(&before, ex)?,
            None => None,
        };
        let feats = match cached {
            Some(f) => f,
            None => {
                let b = bundles.get(&ex.id).ok_or_else(|| Error::Validation {
                    record: ex.id.clone(),
                    field: "features".into(),
                    msg: "no feature bundle".into(),
                })?;
                let f = phrase_features(head, ex, b)?;
                if let Some(c) = cache {
                    c.write(&before, &ex.id, &f)?;
                }
                f
            }
        };
        Ok::<_, Error>(feats)
    })?;
    let after = head.checksum();
    assert_eq!(before, after, "probing modified the frozen head");
    let mut items = Vec::new();
    for (ex, feats) in examples.iter().zip(per_ex) {
        for (span, f) in feats {
            let region = ex
                .phrases
                .iter()
                .find(|p| p.span == span)
                .and_then(|p| p.gold_region.clone())
                .expect("feature spans come from annotated phrases");
            items.push(ProbeItem {
                example_id: ex.id.clone(),
                features: f,
                region,
            });
        }
    }
    Ok(items)
}

/// Linearly separable fixture: for every annotated phrase, an indicator
/// channel marking the gold region's cells on a `grid` plus `n_noise`
/// Gaussian channels.
pub fn separable_items(examples: &[Example], grid: Dims, n_noise: usize, seed: u64) -> Result<Vec<ProbeItem>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::new();
    for ex in examples {
        let (ch, cw) = (ex.image_dims.h / grid.h, ex.image_dims.w / grid.w);
        if ch == 0 || cw == 0 || ex.image_dims.h % grid.h != 0 || ex.image_dims.w % grid.w != 0 {
            return Err(Error::Shape(format!("{}: grid does not tile the image", ex.id)));
        }
        for p in ex.annotated_phrases() {
            let region = p.gold_region.clone().expect("annotated");
            let mask = rasterize(&region)?;
            let mut v = Volume::zeros(1 + n_noise, grid.h, grid.w);
            for r in 0..grid.h {
                for c in 0..grid.w {
                    // Cell marked when its centre pixel is inside the region.
                    if mask.get(c * cw + cw / 2, r * ch + ch / 2) {
                        v.data[r * grid.w + c] = 1.0;
                    }
                }
            }
            for x in &mut v.data[grid.len()..] {
                *x = rng.random_range(-1.0..1.0);
            }
            items.push(ProbeItem {
                example_id: ex.id.clone(),
                features: ProbeFeatures(v),
                region,
            });
        }
    }
    Ok(items)
}
