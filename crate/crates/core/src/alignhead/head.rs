use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::{
    deconv_backward, deconv_forward, deconv_out_len, kl_from_logits, relu_inplace, softmax,
    Bilinear, Volume,
};
use crate::error::{Error, Result};
use crate::geometry::{Dims, SegMap};
use crate::tensor::{DType, Tensor};

/// Channel schedule of the default three-stage head.
pub const DEFAULT_STAGE_CHANNELS: [usize; 3] = [256, 128, 64];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl StageConfig {
    /// Doubling stage: kernel 4, stride 2, padding 1.
    pub fn doubling(out_channels: usize) -> Self {
        StageConfig {
            out_channels,
            kernel: 4,
            stride: 2,
            padding: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    /// `d_p + d_q`.
    pub in_channels: usize,
    pub stages: Vec<StageConfig>,
    /// Output map size `(H, W)`.
    pub target: Dims,
}

impl HeadConfig {
    /// Three doubling stages with [`DEFAULT_STAGE_CHANNELS`].
    pub fn default_schedule(in_channels: usize, target: Dims) -> Self {
        Self::with_channels(in_channels, &DEFAULT_STAGE_CHANNELS, target)
    }

    pub fn with_channels(in_channels: usize, channels: &[usize], target: Dims) -> Self {
        HeadConfig {
            in_channels,
            stages: channels.iter().map(|&c| StageConfig::doubling(c)).collect(),
            target,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Parameter("head needs at least one stage".into()));
        }
        if self.in_channels == 0 || self.target.is_empty() {
            return Err(Error::Parameter("head input channels and target must be positive".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.out_channels == 0 || s.kernel == 0 || s.stride == 0 {
                return Err(Error::Parameter(format!("stage {i} has a zero size")));
            }
        }
        Ok(())
    }

    /// Spatial size after every stage for an input grid, checking that the
    /// last one fits inside the target.
    pub fn stage_sizes(&self, grid: Dims) -> Result<Vec<Dims>> {
        let mut cur = grid;
        let mut out = Vec::with_capacity(self.stages.len());
        for (i, s) in self.stages.iter().enumerate() {
            let h = deconv_out_len(cur.h, s.kernel, s.stride, s.padding);
            let w = deconv_out_len(cur.w, s.kernel, s.stride, s.padding);
            let (Some(h), Some(w)) = (h, w) else {
                return Err(Error::Shape(format!("stage {i} collapses a {}x{} input", cur.h, cur.w)));
            };
            cur = Dims::new(h, w);
            out.push(cur);
        }
        if cur.h > self.target.h || cur.w > self.target.w {
            return Err(Error::Shape(format!(
                "last stage is {}x{}, larger than the {}x{} target",
                cur.h, cur.w, self.target.h, self.target.w
            )));
        }
        Ok(out)
    }

    fn stage_in(&self, i: usize) -> usize {
        if i == 0 {
            self.in_channels
        } else {
            self.stages[i - 1].out_channels
        }
    }

    fn last_channels(&self) -> usize {
        self.stages.last().map_or(self.in_channels, |s| s.out_channels)
    }

    /// `(kernel offset, bias offset)` of every stage, then of the projection.
    fn offsets(&self) -> (Vec<(usize, usize)>, (usize, usize), usize) {
        let mut o = 0;
        let mut stages = Vec::with_capacity(self.stages.len());
        for (i, s) in self.stages.iter().enumerate() {
            let k = o;
            o += self.stage_in(i) * s.out_channels * s.kernel * s.kernel;
            stages.push((k, o));
            o += s.out_channels;
        }
        let proj = (o, o + self.last_channels());
        (stages, proj, proj.1 + 1)
    }

    pub fn n_params(&self) -> usize {
        self.offsets().2
    }
}

/// Learnable parameters of a head, stored flat: per stage the kernel
/// (`[c_in, c_out, k, k]`) then the bias, followed by the projection kernel
/// and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub config: HeadConfig,
    pub params: Vec<f64>,
    /// Precision used when saving.
    pub dtype: DType,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadMeta {
    config: HeadConfig,
    dtype: DType,
    n_params: usize,
    checksum: String,
}

pub const WEIGHTS_FILE: &str = "weights.gtf";
pub const META_FILE: &str = "head.json";

impl HeadWeights {
    pub fn zeros(config: HeadConfig) -> Result<Self> {
        config.validate()?;
        let n = config.n_params();
        Ok(HeadWeights {
            config,
            params: vec![0.0; n],
            dtype: DType::F64,
        })
    }

    /// Uniform in `±sqrt(1 / fan_in)` with `fan_in = c_in · k²` for stages
    /// and `c_last` for the projection.
    pub fn init(config: HeadConfig, seed: u64) -> Result<Self> {
        let mut w = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (stages, proj, end) = w.config.offsets();
        let mut bound_at = Vec::with_capacity(stages.len() + 1);
        for (i, s) in w.config.stages.iter().enumerate() {
            let fan_in = w.config.stage_in(i) * s.kernel * s.kernel;
            bound_at.push((stages[i].0, (1.0 / fan_in as f64).sqrt()));
        }
        bound_at.push((proj.0, (1.0 / w.config.last_channels() as f64).sqrt()));
        bound_at.push((end, 0.0));
        for win in bound_at.windows(2) {
            let (start, b) = win[0];
            for p in &mut w.params[start..win[1].0] {
                *p = rng.random_range(-b..=b);
            }
        }
        Ok(w)
    }

    pub fn from_params(config: HeadConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if params.len() != config.n_params() {
            return Err(Error::Shape(format!(
                "{} parameters for a head that needs {}",
                params.len(),
                config.n_params()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("non-finite head parameter".into()));
        }
        Ok(HeadWeights {
            config,
            params,
            dtype: DType::F64,
        })
    }

    pub fn stage_kernel(&self, i: usize) -> &[f64] {
        let (st, _, _) = self.config.offsets();
        &self.params[st[i].0..st[i].1]
    }

    pub fn stage_bias(&self, i: usize) -> &[f64] {
        let (st, _, _) = self.config.offsets();
        &self.params[st[i].1..st[i].1 + self.config.stages[i].out_channels]
    }

    pub fn projection(&self) -> (&[f64], f64) {
        let (_, (k, b), _) = self.config.offsets();
        (&self.params[k..b], self.params[b])
    }

    /// Hex SHA-256 over the config and the exact parameter bits.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for p in &self.params {
            h.update(p.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Parameters as they will read back after a save at `self.dtype`.
    pub fn stored_params(&self) -> Vec<f64> {
        match self.dtype {
            DType::F64 => self.params.clone(),
            DType::F32 => self.params.iter().map(|&v| v as f32 as f64).collect(),
        }
    }

    /// Writes `weights.gtf` and `head.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let n = self.params.len();
        let t = match self.dtype {
            DType::F64 => Tensor::from_f64(vec![n], self.params.clone())?,
            DType::F32 => Tensor::from_f32(vec![n], self.params.iter().map(|&v| v as f32).collect())?,
        };
        t.save(dir.join(WEIGHTS_FILE))?;
        let stored = HeadWeights {
            params: self.stored_params(),
            ..self.clone()
        };
        let meta = HeadMeta {
            config: self.config.clone(),
            dtype: self.dtype,
            n_params: n,
            checksum: stored.checksum(),
        };
        let path = dir.join(META_FILE);
        let mut text = serde_json::to_string_pretty(&meta)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(META_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: HeadMeta = serde_json::from_str(&text)?;
        let t = Tensor::load(dir.join(WEIGHTS_FILE))?;
        if t.dtype() != meta.dtype || t.shape() != [meta.n_params] {
            return Err(Error::Format(format!(
                "{}: tensor {:?} {:?} disagrees with {META_FILE}",
                dir.display(),
                t.dtype(),
                t.shape()
            )));
        }
        let mut w = HeadWeights::from_params(meta.config, t.into_f64())?;
        w.dtype = meta.dtype;
        if w.checksum() != meta.checksum {
            return Err(Error::Format(format!("{}: checksum mismatch", dir.display())));
        }
        Ok(w)
    }
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct HeadTrace {
    pub input: Volume,
    /// Post-ReLU output of every stage (the probe taps these).
    pub stages: Vec<Volume>,
    /// Projection output at the last stage's resolution.
    pub low_logits: Vec<f64>,
    /// Pre-softmax logits at target resolution.
    pub logits: Vec<f64>,
    pub map: SegMap,
}

pub fn head_forward(combined: &Volume, w: &HeadWeights) -> Result<HeadTrace> {
    let cfg = &w.config;
    if combined.c != cfg.in_channels {
        return Err(Error::Shape(format!(
            "input has {} channels, head expects {}",
            combined.c, cfg.in_channels
        )));
    }
    cfg.stage_sizes(Dims::new(combined.h, combined.w))?;
    let mut stages = Vec::with_capacity(cfg.stages.len());
    for (i, s) in cfg.stages.iter().enumerate() {
        let x = stages.last().unwrap_or(combined);
        let mut y = deconv_forward(
            x,
            w.stage_kernel(i),
            w.stage_bias(i),
            s.out_channels,
            s.kernel,
            s.stride,
            s.padding,
        )?;
        relu_inplace(&mut y);
        stages.push(y);
    }
    let last = stages.last().expect("at least one stage");
    let (pk, pb) = w.projection();
    let mut low = vec![pb; last.h * last.w];
    for (c, &k) in pk.iter().enumerate() {
        for (o, &v) in low.iter_mut().zip(last.channel(c)) {
            *o += k * v;
        }
    }
    let resize = Bilinear::new(last.h, last.w, cfg.target.h, cfg.target.w);
    let logits = resize.apply(&low);
    let map = SegMap::new(cfg.target, softmax(&logits))?;
    Ok(HeadTrace {
        input: combined.clone(),
        stages,
        low_logits: low,
        logits,
        map,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    /// Same layout as [`HeadWeights::params`].
    pub params: Vec<f64>,
    pub input: Option<Volume>,
}

/// Back-propagates a gradient on the target-resolution logits.
pub fn backward_from_logits(
    trace: &HeadTrace,
    w: &HeadWeights,
    d_logits: &[f64],
    want_input: bool,
) -> HeadGrads {
    let cfg = &w.config;
    let (st_off, (pk_off, pb_off), n) = cfg.offsets();
    let mut g = vec![0.0; n];
    let last = trace.stages.last().expect("at least one stage");
    let resize = Bilinear::new(last.h, last.w, cfg.target.h, cfg.target.w);
    let d_low = resize.adjoint(d_logits);

    g[pb_off] = d_low.iter().sum();
    let (pk, _) = w.projection();
    let mut d_act = Volume::zeros(last.c, last.h, last.w);
    for c in 0..last.c {
        let act = last.channel(c);
        g[pk_off + c] = act.iter().zip(&d_low).map(|(a, d)| a * d).sum();
        for ((o, &d), &a) in d_act.channel_mut(c).iter_mut().zip(&d_low).zip(act) {
            *o = if a > 0.0 { pk[c] * d } else { 0.0 };
        }
    }
    let mut input_grad = None;
    for i in (0..cfg.stages.len()).rev() {
        let s = cfg.stages[i];
        let x = if i == 0 { &trace.input } else { &trace.stages[i - 1] };
        let (k_off, b_off) = st_off[i];
        let (gk, rest) = g[k_off..].split_at_mut(b_off - k_off);
        let gb = &mut rest[..s.out_channels];
        let need = i > 0 || want_input;
        let mut dx = deconv_backward(
            x,
            w.stage_kernel(i),
            &d_act,
            s.kernel,
            s.stride,
            s.padding,
            gk,
            gb,
            need,
        );
        if i > 0 {
            for (d, &a) in dx.data.iter_mut().zip(&x.data) {
                if a <= 0.0 {
                    *d = 0.0;
                }
            }
            d_act = dx;
        } else if want_input {
            input_grad = Some(dx);
        }
    }
    HeadGrads {
        params: g,
        input: input_grad,
    }
}

/// KL(gold ‖ head output) and its gradient with respect to every weight
/// and the input volume.
pub fn head_backward(combined: &Volume, w: &HeadWeights, gold: &SegMap) -> Result<(f64, HeadGrads)> {
    if gold.dims() != w.config.target {
        return Err(Error::DimMismatch(format!(
            "gold map {}x{} vs head target {}x{}",
            gold.dims().h,
            gold.dims().w,
            w.config.target.h,
            w.config.target.w
        )));
    }
    let trace = head_forward(combined, w)?;
    let loss = kl_from_logits(gold.values(), &trace.logits);
    let dz: Vec<f64> = trace
        .map
        .values()
        .iter()
        .zip(gold.values())
        .map(|(p, s)| p - s)
        .collect();
    Ok((loss, backward_from_logits(&trace, w, &dz, true)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_volume(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Volume {
        Volume::new(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_gold(rng: &mut ChaCha8Rng, dims: Dims) -> SegMap {
        let v: Vec<f64> = (0..dims.len()).map(|_| rng.random_range(0.0..1.0f64).powi(3)).collect();
        SegMap::new(dims, v).unwrap().normalized().unwrap()
    }

    fn loss_at(combined: &Volume, w: &HeadWeights, gold: &SegMap) -> f64 {
        kl_from_logits(gold.values(), &head_forward(combined, w).unwrap().logits)
    }

    #[test]
    fn stage_size_formula() {
        let cfg = HeadConfig::with_channels(3, &[4], Dims::new(14, 14));
        assert_eq!(cfg.stage_sizes(Dims::new(7, 7)).unwrap(), vec![Dims::new(14, 14)]);
        let cfg = HeadConfig::default_schedule(3, Dims::new(64, 64));
        assert_eq!(
            cfg.stage_sizes(Dims::new(4, 4)).unwrap(),
            vec![Dims::new(8, 8), Dims::new(16, 16), Dims::new(32, 32)]
        );
        let small = HeadConfig::with_channels(3, &[4], Dims::new(10, 10));
        assert!(small.stage_sizes(Dims::new(7, 7)).is_err());
        assert!(HeadConfig::with_channels(3, &[], Dims::new(4, 4)).validate().is_err());
    }

    #[test]
    fn zero_weights_give_uniform_map() {
        let cfg = HeadConfig::with_channels(5, &[3, 2], Dims::new(12, 10));
        let w = HeadWeights::zeros(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = head_forward(&random_volume(&mut rng, 5, 2, 2), &w).unwrap();
        assert_eq!(t.map.dims(), Dims::new(12, 10));
        assert!(t.map.values().iter().all(|v| (v - 1.0 / 120.0).abs() < 1e-15));
        assert_eq!(t.stages.len(), 2);
    }

    #[test]
    fn output_is_normalized() {
        let cfg = HeadConfig::with_channels(4, &[6, 3], Dims::new(16, 16));
        let w = HeadWeights::init(cfg, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = head_forward(&random_volume(&mut rng, 4, 3, 3), &w).unwrap();
        assert!((t.map.sum() - 1.0).abs() < 1e-12);
        let wrong = random_volume(&mut rng, 3, 3, 3);
        assert!(matches!(head_forward(&wrong, &w), Err(Error::Shape(_))));
    }

    #[test]
    fn gradient_vanishes_at_gold() {
        let cfg = HeadConfig::with_channels(3, &[4], Dims::new(8, 8));
        let w = HeadWeights::init(cfg, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_volume(&mut rng, 3, 2, 2);
        let gold = head_forward(&x, &w).unwrap().map;
        let (loss, g) = head_backward(&x, &w, &gold).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(g.params.iter().all(|v| v.abs() < 1e-10));
        assert!(g.input.unwrap().data.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn pre_softmax_gradient_is_prediction_minus_gold() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let z: Vec<f64> = (0..20).map(|_| rng.random_range(-3.0..3.0)).collect();
            let gold = random_gold(&mut rng, Dims::new(4, 5));
            let p = softmax(&z);
            for i in 0..z.len() {
                let h = 1e-6;
                let (mut zp, mut zm) = (z.clone(), z.clone());
                zp[i] += h;
                zm[i] -= h;
                let fd = (kl_from_logits(gold.values(), &zp) - kl_from_logits(gold.values(), &zm)) / (2.0 * h);
                assert!((fd - (p[i] - gold.values()[i])).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn mixing_gold_toward_uniform_changes_gradient() {
        let cfg = HeadConfig::with_channels(3, &[4], Dims::new(8, 8));
        let w = HeadWeights::init(cfg, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_volume(&mut rng, 3, 2, 2);
        let gold = random_gold(&mut rng, Dims::new(8, 8));
        let u = 1.0 / 64.0;
        let mixed = SegMap::new(gold.dims(), gold.values().iter().map(|v| 0.5 * v + 0.5 * u).collect()).unwrap();
        let (_, a) = head_backward(&x, &w, &gold).unwrap();
        let (_, b) = head_backward(&x, &w, &mixed).unwrap();
        assert!(a.params.iter().zip(&b.params).any(|(p, q)| (p - q).abs() > 1e-9));
        // At the uniform prediction the uniform gold is stationary.
        let zero = HeadWeights::zeros(w.config.clone()).unwrap();
        let (_, g) = head_backward(&x, &zero, &SegMap::uniform(Dims::new(8, 8))).unwrap();
        assert!(g.params.iter().all(|v| v.abs() < 1e-12));
    }

    /// Central differences on every parameter and input element.
    pub(crate) fn check_head_gradients(seed: u64) -> Option<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_stages = rng.random_range(1..=2);
        let c_in = rng.random_range(1..=3);
        let channels: Vec<usize> = (0..n_stages).map(|_| rng.random_range(1..=3)).collect();
        let stages: Vec<StageConfig> = channels
            .iter()
            .map(|&c| {
                let kernel = rng.random_range(1..=4);
                let stride = rng.random_range(1..=2);
                let padding = rng.random_range(0..=(kernel - 1) / 2);
                StageConfig {
                    out_channels: c,
                    kernel,
                    stride,
                    padding,
                }
            })
            .collect();
        let grid = Dims::new(rng.random_range(1..=3), rng.random_range(1..=3));
        let mut cfg = HeadConfig {
            in_channels: c_in,
            stages,
            target: Dims::new(16, 16),
        };
        let sizes = cfg.stage_sizes(grid).ok()?;
        let last = *sizes.last().unwrap();
        cfg.target = Dims::new(rng.random_range(last.h..=16), rng.random_range(last.w..=16));
        let w = HeadWeights::init(cfg.clone(), seed).unwrap();
        let x = random_volume(&mut rng, c_in, grid.h, grid.w);
        let gold = random_gold(&mut rng, cfg.target);
        let (_, g) = head_backward(&x, &w, &gold).unwrap();
        let mut worst: f64 = 0.0;
        let h = 1e-5;
        // Absolute floor: central differences carry ~1e-10 round-off, which
        // would dominate the ratio for gradients that are exactly zero.
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-5);
        for i in 0..w.params.len() {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp.params[i] += h;
            wm.params[i] -= h;
            let fd = (loss_at(&x, &wp, &gold) - loss_at(&x, &wm, &gold)) / (2.0 * h);
            worst = worst.max(rel(g.params[i], fd));
        }
        let gi = g.input.unwrap();
        for i in 0..x.data.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data[i] += h;
            xm.data[i] -= h;
            let fd = (loss_at(&xp, &w, &gold) - loss_at(&xm, &w, &gold)) / (2.0 * h);
            worst = worst.max(rel(gi.data[i], fd));
        }
        Some(worst)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut checked = 0;
        for seed in 0..40 {
            if let Some(err) = check_head_gradients(seed) {
                assert!(err <= 1e-4, "seed {seed}: relative error {err}");
                checked += 1;
            }
        }
        assert!(checked >= 20);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let cfg = HeadConfig::with_channels(4, &[8], Dims::new(8, 8));
        let a = HeadWeights::init(cfg.clone(), 1).unwrap();
        assert_eq!(a, HeadWeights::init(cfg.clone(), 1).unwrap());
        assert_ne!(a, HeadWeights::init(cfg, 2).unwrap());
        let b = (1.0f64 / 64.0).sqrt();
        assert!(a.stage_kernel(0).iter().all(|v| v.abs() <= b));
    }

    #[test]
    fn weights_round_trip() {
        let cfg = HeadConfig::with_channels(4, &[3, 2], Dims::new(8, 8));
        let mut w = HeadWeights::init(cfg, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        w.save(dir.path()).unwrap();
        assert_eq!(HeadWeights::load(dir.path()).unwrap(), w);
        w.dtype = DType::F32;
        w.save(dir.path()).unwrap();
        let back = HeadWeights::load(dir.path()).unwrap();
        assert_eq!(back.params, w.stored_params());
        assert_eq!(back.dtype, DType::F32);
    }
}
