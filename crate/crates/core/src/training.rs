//! Training loop: a fresh synthetic stream every epoch, optional real-image
//! mixing, pixel-space color jitter, per-component loss tracking, and
//! validation-based model selection.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::body_model::{BodyModel, ModelAssets, N_LANDMARKS, N_SHAPE};
use crate::camera::{project_t, DEFAULT_FOCAL, DEFAULT_RESOLUTION};
use crate::evaluation::KeypointEval;
use crate::losses::{
    dfl_loss_t, gt_loss_t, keypoint_loss_t, prior_loss_t, silhouette_loss_t, LossTerms,
    LossWeights, ParamPrior, ParamPriorT, N_THETA,
};
use crate::network::{DessieNet, NetConfig, Variant};
use crate::renderer::{soft_silhouette_t, ImageF, RasterConfig};
use crate::synthpipe::{index_rng, AssetSets, GenConfig, StreamItem, SyntheticSample, VariedFactor};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// How real images enter the batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RealMix {
    #[default]
    None,
    /// Every batch holds synthetic and real images in equal proportion.
    Equal,
}

impl fmt::Display for RealMix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RealMix::None => "NONE",
            RealMix::Equal => "EQUAL",
        })
    }
}

impl FromStr for RealMix {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "NONE" => Ok(RealMix::None),
            "EQUAL" => Ok(RealMix::Equal),
            other => Err(Error::Config(format!("unknown real_mix {other:?}"))),
        }
    }
}

/// Half-widths of the uniform color jitter draws. Hue is a fraction of the
/// full hue circle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterRanges {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl Default for JitterRanges {
    fn default() -> Self {
        JitterRanges { brightness: 0.2, contrast: 0.2, saturation: 0.2, hue: 0.05 }
    }
}

impl JitterRanges {
    pub fn zero() -> Self {
        JitterRanges { brightness: 0.0, contrast: 0.0, saturation: 0.0, hue: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("jitter {name} = {v} outside [0, 1]")));
            }
        }
        if !(0.0..=0.5).contains(&self.hue) {
            return Err(Error::Config(format!("jitter hue = {} outside [0, 0.5]", self.hue)));
        }
        Ok(())
    }
}

/// Training controls. The text form is flat `key=value` lines; unknown keys
/// are rejected, missing keys keep their defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Fraction of rendered images that belong to controlled-variation pairs.
    pub pair_fraction: f64,
    pub real_mix: RealMix,
    /// Whether real images with masks also contribute the silhouette loss;
    /// they contribute the keypoint loss always and never the pair or
    /// ground-truth terms.
    pub real_silhouette: bool,
    pub enable_gt_loss: bool,
    pub enable_dfl: bool,
    pub jitter: JitterRanges,
    pub seed: u64,
    pub samples_per_epoch: usize,
    pub val_samples: usize,
    /// Render and input resolution in pixels.
    pub resolution: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Dessie,
            epochs: 20,
            learning_rate: 5e-5,
            batch_size: 16,
            pair_fraction: 0.5,
            real_mix: RealMix::None,
            real_silhouette: false,
            enable_gt_loss: true,
            enable_dfl: true,
            jitter: JitterRanges::default(),
            seed: 0,
            samples_per_epoch: 512,
            val_samples: 64,
            resolution: 128,
        }
    }
}

pub const MAX_EPOCHS: usize = 800;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.epochs > MAX_EPOCHS {
            return Err(Error::Config(format!(
                "epochs = {} outside 1..={MAX_EPOCHS}",
                self.epochs
            )));
        }
        // Zero is allowed so a run can be checked to be a true no-op.
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!(
                "learning_rate = {} must be finite and nonnegative",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.pair_fraction) {
            return Err(Error::Config(format!(
                "pair_fraction = {} outside [0, 1]",
                self.pair_fraction
            )));
        }
        if self.pair_fraction > 0.0 && self.batch_size % 2 != 0 {
            return Err(Error::Config(
                "batch_size must be even when pair_fraction > 0".into(),
            ));
        }
        if self.real_mix == RealMix::Equal && self.batch_size % 2 != 0 {
            return Err(Error::Config(
                "batch_size must be even for EQUAL real mixing".into(),
            ));
        }
        if self.enable_dfl && self.variant != Variant::Dessie {
            return Err(Error::Config(
                "the pair disentanglement loss needs the three-stream variant".into(),
            ));
        }
        if self.samples_per_epoch == 0 || self.val_samples == 0 {
            return Err(Error::Config("sample counts must be positive".into()));
        }
        if self.resolution < 16 {
            return Err(Error::Config(format!("resolution {} too small", self.resolution)));
        }
        self.jitter.validate()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("variant={}\n", self.variant));
        s.push_str(&format!("epochs={}\n", self.epochs));
        s.push_str(&format!("learning_rate={}\n", self.learning_rate));
        s.push_str(&format!("batch_size={}\n", self.batch_size));
        s.push_str(&format!("pair_fraction={}\n", self.pair_fraction));
        s.push_str(&format!("real_mix={}\n", self.real_mix));
        s.push_str(&format!("real_silhouette={}\n", self.real_silhouette));
        s.push_str(&format!("enable_gt_loss={}\n", self.enable_gt_loss));
        s.push_str(&format!("enable_dfl={}\n", self.enable_dfl));
        s.push_str(&format!("jitter_brightness={}\n", self.jitter.brightness));
        s.push_str(&format!("jitter_contrast={}\n", self.jitter.contrast));
        s.push_str(&format!("jitter_saturation={}\n", self.jitter.saturation));
        s.push_str(&format!("jitter_hue={}\n", self.jitter.hue));
        s.push_str(&format!("seed={}\n", self.seed));
        s.push_str(&format!("samples_per_epoch={}\n", self.samples_per_epoch));
        s.push_str(&format!("val_samples={}\n", self.val_samples));
        s.push_str(&format!("resolution={}\n", self.resolution));
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let bad = |key: &str, val: &str| {
            Error::Config(format!("train config: bad value {val:?} for {key}"))
        };
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, val) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("train config: missing '=' in {line:?}")))?;
            let (key, val) = (key.trim(), val.trim());
            match key {
                "variant" => cfg.variant = val.parse()?,
                "epochs" => cfg.epochs = val.parse().map_err(|_| bad(key, val))?,
                "learning_rate" => cfg.learning_rate = val.parse().map_err(|_| bad(key, val))?,
                "batch_size" => cfg.batch_size = val.parse().map_err(|_| bad(key, val))?,
                "pair_fraction" => cfg.pair_fraction = val.parse().map_err(|_| bad(key, val))?,
                "real_mix" => cfg.real_mix = val.parse()?,
                "real_silhouette" => {
                    cfg.real_silhouette = val.parse().map_err(|_| bad(key, val))?
                }
                "enable_gt_loss" => cfg.enable_gt_loss = val.parse().map_err(|_| bad(key, val))?,
                "enable_dfl" => cfg.enable_dfl = val.parse().map_err(|_| bad(key, val))?,
                "jitter_brightness" => {
                    cfg.jitter.brightness = val.parse().map_err(|_| bad(key, val))?
                }
                "jitter_contrast" => cfg.jitter.contrast = val.parse().map_err(|_| bad(key, val))?,
                "jitter_saturation" => {
                    cfg.jitter.saturation = val.parse().map_err(|_| bad(key, val))?
                }
                "jitter_hue" => cfg.jitter.hue = val.parse().map_err(|_| bad(key, val))?,
                "seed" => cfg.seed = val.parse().map_err(|_| bad(key, val))?,
                "samples_per_epoch" => {
                    cfg.samples_per_epoch = val.parse().map_err(|_| bad(key, val))?
                }
                "val_samples" => cfg.val_samples = val.parse().map_err(|_| bad(key, val))?,
                "resolution" => cfg.resolution = val.parse().map_err(|_| bad(key, val))?,
                other => {
                    return Err(Error::Config(format!("train config: unknown key {other:?}")))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

// ---------------------------------------------------------------------------
// Color jitter
// ---------------------------------------------------------------------------

fn luma(px: &[f64; 3]) -> f64 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

fn rgb_to_hsv(px: &[f64; 3]) -> (f64, f64, f64) {
    let max = px[0].max(px[1]).max(px[2]);
    let min = px[0].min(px[1]).min(px[2]);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == px[0] {
        60.0 * (((px[1] - px[2]) / d).rem_euclid(6.0))
    } else if max == px[1] {
        60.0 * ((px[2] - px[0]) / d + 2.0)
    } else {
        60.0 * ((px[0] - px[1]) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h.rem_euclid(360.0)) / 60.0;
    let x = c * (1.0 - (hp.rem_euclid(2.0) - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Pixel-space photometric augmentation: brightness, contrast, saturation,
/// then hue, each drawn uniformly from its range. Geometry and annotations
/// are untouched; the output is clipped to [0, 1]. All-zero ranges return
/// the input unchanged.
pub fn color_jitter(image: &ImageF, rng: &mut ChaCha8Rng, ranges: &JitterRanges) -> ImageF {
    let b = 1.0 + rng.gen_range(-ranges.brightness..=ranges.brightness);
    let c = 1.0 + rng.gen_range(-ranges.contrast..=ranges.contrast);
    let s = 1.0 + rng.gen_range(-ranges.saturation..=ranges.saturation);
    let h = rng.gen_range(-ranges.hue..=ranges.hue);
    let mut out = image.clone();
    if b != 1.0 {
        for px in &mut out.data {
            for v in px.iter_mut() {
                *v *= b;
            }
        }
    }
    if c != 1.0 {
        let n = out.data.len().max(1) as f64;
        let mean: f64 = out.data.iter().map(luma).sum::<f64>() / n;
        for px in &mut out.data {
            for v in px.iter_mut() {
                *v = mean + (*v - mean) * c;
            }
        }
    }
    if s != 1.0 {
        for px in &mut out.data {
            let g = luma(px);
            for v in px.iter_mut() {
                *v = g + (*v - g) * s;
            }
        }
    }
    if h != 0.0 {
        for px in &mut out.data {
            let (hh, ss, vv) = rgb_to_hsv(&[
                px[0].clamp(0.0, 1.0),
                px[1].clamp(0.0, 1.0),
                px[2].clamp(0.0, 1.0),
            ]);
            *px = hsv_to_rgb(hh + h * 360.0, ss, vv);
        }
    }
    for px in &mut out.data {
        for v in px.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Real images
// ---------------------------------------------------------------------------

/// A real annotated image: keypoints in full-frame pixels and, optionally, a
/// silhouette at the training resolution.
#[derive(Debug, Clone)]
pub struct RealSample {
    pub image: ImageF,
    pub keypoints: Vec<[f64; 2]>,
    pub visibility: Vec<f64>,
    pub mask: Option<Vec<bool>>,
}

impl RealSample {
    fn validate(&self, resolution: u32) -> Result<()> {
        let r = resolution as usize;
        if self.image.w != r || self.image.h != r {
            return Err(Error::ShapeMismatch(format!(
                "real image {}x{}, expected {r}x{r}",
                self.image.w, self.image.h
            )));
        }
        if self.keypoints.len() != N_LANDMARKS || self.visibility.len() != N_LANDMARKS {
            return Err(Error::ShapeMismatch(format!(
                "real sample carries {} keypoints, model binds {N_LANDMARKS}",
                self.keypoints.len()
            )));
        }
        if let Some(m) = &self.mask {
            if m.len() != r * r {
                return Err(Error::ShapeMismatch(format!(
                    "real mask holds {} pixels, expected {}",
                    m.len(),
                    r * r
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Batches
// ---------------------------------------------------------------------------

struct BatchRow {
    image: ImageF,
    keypoints: Vec<[f64; 2]>,
    visibility: Vec<f64>,
    /// Silhouette target; absent for real images without one (or when real
    /// silhouette supervision is off).
    mask: Option<Vec<bool>>,
    /// Stored parameters, synthetic rows only: shape, then global-first pose.
    gt: Option<([f64; N_SHAPE], [f64; N_THETA])>,
}

struct Batch {
    rows: Vec<BatchRow>,
    /// Row-index pairs with their stored varied factor.
    pairs: Vec<(usize, usize, VariedFactor)>,
}

fn synth_row(s: &SyntheticSample) -> BatchRow {
    let mut theta = [0.0; N_THETA];
    theta[..3].copy_from_slice(&s.ann.theta_g);
    for (k, v) in s.ann.theta_j.iter().flatten().enumerate() {
        theta[3 + k] = *v;
    }
    BatchRow {
        image: s.image.clone(),
        keypoints: s.ann.keypoints.to_vec(),
        visibility: s.ann.visibility.to_vec(),
        mask: Some(s.silhouette.clone()),
        gt: Some((s.ann.beta, theta)),
    }
}

/// Groups a stream into batches of `images` rendered images. A pair always
/// lands in one batch with its elements adjacent; a batch closes early when
/// the next item would overflow it.
fn make_synth_batches(
    items: impl Iterator<Item = Result<StreamItem>>,
    images: usize,
) -> Result<Vec<Batch>> {
    let mut out = Vec::new();
    let mut cur = Batch { rows: Vec::new(), pairs: Vec::new() };
    for item in items {
        let item = item?;
        if cur.rows.len() + item.image_count() > images && !cur.rows.is_empty() {
            out.push(cur);
            cur = Batch { rows: Vec::new(), pairs: Vec::new() };
        }
        match item {
            StreamItem::Single(s) => cur.rows.push(synth_row(&s)),
            StreamItem::Pair(p) => {
                let i = cur.rows.len();
                cur.rows.push(synth_row(&p.first));
                cur.rows.push(synth_row(&p.second));
                cur.pairs.push((i, i + 1, p.varied_factor));
            }
        }
        if cur.rows.len() >= images {
            out.push(cur);
            cur = Batch { rows: Vec::new(), pairs: Vec::new() };
        }
    }
    if !cur.rows.is_empty() {
        out.push(cur);
    }
    Ok(out)
}

fn batch_image_tensor(rows: &[BatchRow], resolution: u32, device: &Device) -> Result<Tensor> {
    let r = resolution as usize;
    let b = rows.len();
    let mut data = Vec::with_capacity(b * 3 * r * r);
    for row in rows {
        for ch in 0..3 {
            for px in &row.image.data {
                data.push(px[ch]);
            }
        }
    }
    Ok(Tensor::from_vec(data, (b, 3, r, r), device)?)
}

// ---------------------------------------------------------------------------
// The step objective
// ---------------------------------------------------------------------------

struct StepContext<'a> {
    net: &'a DessieNet,
    model: &'a BodyModel,
    faces: Arc<Vec<[u32; 3]>>,
    prior: &'a ParamPriorT,
    weights: &'a LossWeights,
    raster: RasterConfig,
    enable_gt: bool,
    enable_dfl: bool,
}

/// Forward pass plus every loss component for one batch. Returns the
/// differentiable total and the per-component values.
fn step_loss(
    ctx: &StepContext,
    batch: &Batch,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<(Tensor, LossTerms, Tensor)> {
    let device = &ctx.net.device;
    let b = batch.rows.len();
    let images = batch_image_tensor(&batch.rows, ctx.raster.resolution, device)?;
    let pred = ctx.net.forward(&images, dropout)?;
    let theta_full = pred.theta_full()?;
    let zero_xi = Tensor::zeros((b, 3), DType::F64, device)?;
    let posed = ctx.model.pose(&pred.beta, &theta_full, &zero_xi)?;

    // Keypoints, in full-frame pixels.
    let lm = ctx.model.landmarks(&posed.vertices)?;
    let kp_pred = project_t(&lm, &pred.cam, DEFAULT_FOCAL, DEFAULT_RESOLUTION)?;
    let kp_gt = Tensor::from_vec(
        batch.rows.iter().flat_map(|r| r.keypoints.iter().flatten().copied()).collect::<Vec<f64>>(),
        (b, N_LANDMARKS, 2),
        device,
    )?;
    let vis = Tensor::from_vec(
        batch.rows.iter().flat_map(|r| r.visibility.iter().copied()).collect::<Vec<f64>>(),
        (b, N_LANDMARKS),
        device,
    )?;
    let l_kp = keypoint_loss_t(&kp_pred, &kp_gt, &vis, ctx.weights)?;

    // Silhouettes for the rows that carry a target.
    let scale = ctx.raster.resolution as f64 / DEFAULT_RESOLUTION as f64;
    let verts2d = project_t(&posed.vertices, &pred.cam, DEFAULT_FOCAL, DEFAULT_RESOLUTION)?;
    let verts2d = if scale != 1.0 { verts2d.affine(scale, 0.0)? } else { verts2d };
    let mut sil_preds = Vec::new();
    let mut sil_gts = Vec::new();
    for (i, row) in batch.rows.iter().enumerate() {
        if let Some(mask) = &row.mask {
            let v2 = verts2d.get(i)?;
            sil_preds.push(soft_silhouette_t(&v2, ctx.faces.clone(), &ctx.raster)?);
            sil_gts.push(mask.iter().map(|&m| m as u8 as f64).collect::<Vec<f64>>());
        }
    }
    let l_sil = if sil_preds.is_empty() {
        Tensor::zeros((), DType::F64, device)?
    } else {
        let r = ctx.raster.resolution as usize;
        let pred_stack = Tensor::stack(&sil_preds, 0)?;
        let gt_stack = Tensor::from_vec(
            sil_gts.concat(),
            (sil_preds.len(), r, r),
            device,
        )?;
        silhouette_loss_t(&pred_stack, &gt_stack, ctx.weights)?
    };

    let l_prior = prior_loss_t(&pred.beta, &pred.theta_j, ctx.prior, ctx.weights)?;

    // Stored-parameter supervision over synthetic rows.
    let gt_rows: Vec<usize> =
        (0..b).filter(|&i| batch.rows[i].gt.is_some()).collect();
    let l_gt = if ctx.enable_gt && !gt_rows.is_empty() {
        let idx = Tensor::from_vec(
            gt_rows.iter().map(|&i| i as u32).collect::<Vec<u32>>(),
            gt_rows.len(),
            device,
        )?;
        let beta_pred = pred.beta.index_select(&idx, 0)?;
        let theta_pred = theta_full.index_select(&idx, 0)?;
        let beta_gt = Tensor::from_vec(
            gt_rows.iter().flat_map(|&i| batch.rows[i].gt.unwrap().0).collect::<Vec<f64>>(),
            (gt_rows.len(), N_SHAPE),
            device,
        )?;
        let theta_gt = Tensor::from_vec(
            gt_rows.iter().flat_map(|&i| batch.rows[i].gt.unwrap().1).collect::<Vec<f64>>(),
            (gt_rows.len(), N_THETA),
            device,
        )?;
        gt_loss_t(&beta_pred, &theta_pred, &beta_gt, &theta_gt)?
    } else {
        Tensor::zeros((), DType::F64, device)?
    };

    // Pair term: each pair compares exactly what its stored factor held
    // fixed. Rotation-varied pairs never touch theta_G.
    let l_dfl = match (&pred.features, ctx.enable_dfl, batch.pairs.is_empty()) {
        (Some(feat), true, false) => {
            let mut acc = Tensor::zeros((), DType::F64, device)?;
            for &(i, j, factor) in &batch.pairs {
                let term = dfl_loss_t(
                    &feat.gamma_a.narrow(0, i, 1)?,
                    &feat.gamma_p.narrow(0, i, 1)?,
                    &pred.theta_g.narrow(0, i, 1)?,
                    &feat.gamma_a.narrow(0, j, 1)?,
                    &feat.gamma_p.narrow(0, j, 1)?,
                    &pred.theta_g.narrow(0, j, 1)?,
                    factor,
                    ctx.weights,
                )?;
                acc = acc.add(&term)?;
            }
            acc.affine(1.0 / batch.pairs.len() as f64, 0.0)?
        }
        _ => Tensor::zeros((), DType::F64, device)?,
    };

    let total = l_kp.add(&l_sil)?.add(&l_prior)?.add(&l_gt)?.add(&l_dfl)?;
    let terms = LossTerms {
        keypoint: l_kp.to_scalar::<f64>()?,
        silhouette: l_sil.to_scalar::<f64>()?,
        prior: l_prior.to_scalar::<f64>()?,
        dfl: l_dfl.to_scalar::<f64>()?,
        gt: l_gt.to_scalar::<f64>()?,
    };
    Ok((total, terms, kp_pred))
}

/// Mean per-sample keypoint accuracy of a batch prediction at threshold 0.1
/// of the visible ground-truth bounding box. Rows without a usable norm are
/// skipped; returns (sum, count).
fn batch_pck(kp_pred: &Tensor, rows: &[BatchRow]) -> Result<(f64, usize)> {
    let mut sum = 0.0;
    let mut count = 0;
    for (i, row) in rows.iter().enumerate() {
        let pred: Vec<f64> = kp_pred.get(i)?.flatten_all()?.to_vec1()?;
        let pred: Vec<[f64; 2]> = pred.chunks(2).map(|c| [c[0], c[1]]).collect();
        match KeypointEval::with_bbox_norm(pred, row.keypoints.clone(), row.visibility.clone())
            .and_then(|e| crate::evaluation::pck(&e, 0.1))
        {
            Ok(p) => {
                sum += p;
                count += 1;
            }
            Err(_) => continue,
        }
    }
    Ok((sum, count))
}

// ---------------------------------------------------------------------------
// The training loop
// ---------------------------------------------------------------------------

/// One epoch's mean losses and validation metrics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossTerms,
    pub val: LossTerms,
    /// Mean per-sample validation keypoint accuracy at threshold 0.1.
    pub val_pck: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose weights the returned network carries.
    pub best_epoch: usize,
    pub best_val_total: f64,
}

pub struct TrainOutput {
    /// The network, restored to the best-validation weights.
    pub net: DessieNet,
    pub report: TrainReport,
}

const VAL_STREAM_TAG: u64 = u64::MAX;
const JITTER_TAG: u64 = u64::MAX - 1;
const DROPOUT_TAG: u64 = u64::MAX - 2;
const REAL_TAG: u64 = u64::MAX - 3;

fn derived_seed(seed: u64, tag: u64) -> u64 {
    index_rng(seed, tag).gen()
}

fn snapshot_vars(net: &DessieNet) -> Result<Vec<(String, Tensor)>> {
    let data = net.varmap.data().lock().unwrap();
    let mut out: Vec<(String, Tensor)> = Vec::with_capacity(data.len());
    for (name, var) in data.iter() {
        out.push((name.clone(), var.as_tensor().copy()?));
    }
    drop(data);
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

fn restore_vars(net: &DessieNet, snap: &[(String, Tensor)]) -> Result<()> {
    let data = net.varmap.data().lock().unwrap();
    for (name, t) in snap {
        let var = data
            .get(name)
            .ok_or_else(|| Error::Config(format!("snapshot names unknown var {name}")))?;
        var.set(t)?;
    }
    Ok(())
}

/// Trains a fresh network on per-epoch synthetic streams, mixing in real
/// images when configured, and returns it restored to the epoch with the
/// lowest validation loss. `sink` receives one `key=value` record per step
/// and per epoch.
pub fn train(
    cfg: &TrainConfig,
    sets: &AssetSets,
    assets: &ModelAssets,
    real: Option<&[RealSample]>,
    sink: &mut dyn FnMut(&str),
) -> Result<TrainOutput> {
    run_epochs(cfg, sets, assets, real, None, sink)
}

/// Continues a run from checkpointed weights. The epoch counter picks up
/// after the last recorded epoch and best-checkpoint tracking keeps the
/// stored record, so an unimproved resume returns the starting weights.
/// Optimizer moments are not persisted; they restart fresh.
pub fn resume(
    cfg: &TrainConfig,
    sets: &AssetSets,
    assets: &ModelAssets,
    real: Option<&[RealSample]>,
    net: DessieNet,
    prior_report: TrainReport,
    sink: &mut dyn FnMut(&str),
) -> Result<TrainOutput> {
    run_epochs(cfg, sets, assets, real, Some((net, prior_report)), sink)
}

fn run_epochs(
    cfg: &TrainConfig,
    sets: &AssetSets,
    assets: &ModelAssets,
    real: Option<&[RealSample]>,
    start: Option<(DessieNet, TrainReport)>,
    sink: &mut dyn FnMut(&str),
) -> Result<TrainOutput> {
    cfg.validate()?;
    sets.validate()?;
    let real = match (cfg.real_mix, real) {
        (RealMix::None, _) => &[][..],
        (RealMix::Equal, Some(r)) if !r.is_empty() => {
            for s in r {
                s.validate(cfg.resolution)?;
            }
            r
        }
        (RealMix::Equal, _) => {
            return Err(Error::Config("EQUAL real mixing needs a nonempty real dataset".into()))
        }
    };

    let device = Device::Cpu;
    let (net, mut report, start_epoch, mut best_weights) = match start {
        Some((net, prior)) => {
            let completed = prior.epochs.last().map(|e| e.epoch).unwrap_or(0);
            if completed >= cfg.epochs {
                return Err(Error::Config(format!(
                    "checkpoint already covers epoch {completed}; raise epochs past it to resume"
                )));
            }
            // The starting weights are the fallback best, so an unimproved
            // resume hands them back unchanged.
            let snap = snapshot_vars(&net)?;
            (net, prior, completed + 1, Some(snap))
        }
        None => (
            DessieNet::new(NetConfig::desk(cfg.variant, cfg.seed), &device)?,
            TrainReport { epochs: Vec::new(), best_epoch: 0, best_val_total: f64::INFINITY },
            1,
            None,
        ),
    };
    let model = BodyModel::from_assets(assets, &device, DType::F64)?;
    let prior = ParamPrior::fit(&sets.shape_sampler, &sets.poses);
    let prior_t = ParamPriorT::new(&prior, &device)?;
    let weights = LossWeights::default();
    let raster = RasterConfig::default().at_resolution(cfg.resolution);
    let gen = GenConfig { raster: raster.clone(), ..GenConfig::default() };
    let ctx = StepContext {
        net: &net,
        model: &model,
        faces: Arc::new(assets.faces.clone()),
        prior: &prior_t,
        weights: &weights,
        raster,
        enable_gt: cfg.enable_gt_loss,
        enable_dfl: cfg.enable_dfl,
    };

    let mut opt = AdamW::new(
        net.trainable_vars(),
        ParamsAdamW { lr: cfg.learning_rate, weight_decay: 0.0, ..Default::default() },
    )?;
    let mut jitter_rng = ChaCha8Rng::seed_from_u64(derived_seed(cfg.seed, JITTER_TAG));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derived_seed(cfg.seed, DROPOUT_TAG));
    let mut real_rng = ChaCha8Rng::seed_from_u64(derived_seed(cfg.seed, REAL_TAG));

    // The validation stream is fixed across epochs so its losses compare.
    let val_batches = make_synth_batches(
        crate::synthpipe::epoch_stream(
            derived_seed(cfg.seed, VAL_STREAM_TAG),
            cfg.val_samples,
            cfg.pair_fraction,
            sets,
            assets,
            &gen,
        )?,
        cfg.batch_size,
    )?;

    let synth_per_batch = match cfg.real_mix {
        RealMix::None => cfg.batch_size,
        RealMix::Equal => cfg.batch_size / 2,
    };

    let mut real_order: Vec<usize> = (0..real.len()).collect();
    let mut real_cursor = real.len(); // forces a reshuffle on first use

    for epoch in start_epoch..=cfg.epochs {
        let stream = crate::synthpipe::epoch_stream(
            derived_seed(cfg.seed, epoch as u64),
            cfg.samples_per_epoch,
            cfg.pair_fraction,
            sets,
            assets,
            &gen,
        )?;
        let mut batches = make_synth_batches(stream, synth_per_batch)?;
        for batch in &mut batches {
            if cfg.real_mix == RealMix::Equal {
                for _ in 0..batch.rows.len().min(cfg.batch_size - batch.rows.len()) {
                    if real_cursor >= real_order.len() {
                        real_order.shuffle(&mut real_rng);
                        real_cursor = 0;
                    }
                    let s = &real[real_order[real_cursor]];
                    real_cursor += 1;
                    batch.rows.push(BatchRow {
                        image: s.image.clone(),
                        keypoints: s.keypoints.clone(),
                        visibility: s.visibility.clone(),
                        mask: if cfg.real_silhouette { s.mask.clone() } else { None },
                        gt: None,
                    });
                }
            }
            for row in &mut batch.rows {
                row.image = color_jitter(&row.image, &mut jitter_rng, &cfg.jitter);
            }
        }

        let mut train_sum = LossTerms::default();
        for (step, batch) in batches.iter().enumerate() {
            let (total, terms, _) = step_loss(&ctx, batch, Some(&mut dropout_rng))?;
            let value = total.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::Diverged(format!("epoch {epoch} step {step}")));
            }
            opt.backward_step(&total)?;
            train_sum.keypoint += terms.keypoint;
            train_sum.silhouette += terms.silhouette;
            train_sum.prior += terms.prior;
            train_sum.dfl += terms.dfl;
            train_sum.gt += terms.gt;
            sink(&format!(
                "epoch={epoch} step={step} keypoint={:.6e} silhouette={:.6e} prior={:.6e} \
                 dfl={:.6e} gt={:.6e} total={:.6e}",
                terms.keypoint, terms.silhouette, terms.prior, terms.dfl, terms.gt, value
            ));
        }
        let nb = batches.len().max(1) as f64;
        let train_mean = LossTerms {
            keypoint: train_sum.keypoint / nb,
            silhouette: train_sum.silhouette / nb,
            prior: train_sum.prior / nb,
            dfl: train_sum.dfl / nb,
            gt: train_sum.gt / nb,
        };

        // Validation: no jitter, no dropout.
        let mut val_sum = LossTerms::default();
        let mut pck_sum = 0.0;
        let mut pck_count = 0usize;
        for batch in &val_batches {
            let (total, terms, kp_pred) = step_loss(&ctx, batch, None)?;
            let value = total.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::Diverged(format!("epoch {epoch} validation")));
            }
            val_sum.keypoint += terms.keypoint;
            val_sum.silhouette += terms.silhouette;
            val_sum.prior += terms.prior;
            val_sum.dfl += terms.dfl;
            val_sum.gt += terms.gt;
            let (s, c) = batch_pck(&kp_pred, &batch.rows)?;
            pck_sum += s;
            pck_count += c;
        }
        let nv = val_batches.len().max(1) as f64;
        let val_mean = LossTerms {
            keypoint: val_sum.keypoint / nv,
            silhouette: val_sum.silhouette / nv,
            prior: val_sum.prior / nv,
            dfl: val_sum.dfl / nv,
            gt: val_sum.gt / nv,
        };
        let val_pck = if pck_count > 0 { pck_sum / pck_count as f64 } else { f64::NAN };
        let val_total = val_mean.total();

        let improved = val_total < report.best_val_total;
        if improved {
            report.best_val_total = val_total;
            report.best_epoch = epoch;
            best_weights = Some(snapshot_vars(&net)?);
        }
        sink(&format!(
            "epoch={epoch} val_keypoint={:.6e} val_silhouette={:.6e} val_prior={:.6e} \
             val_dfl={:.6e} val_gt={:.6e} val_total={:.6e} val_pck={:.2} best={improved}",
            val_mean.keypoint, val_mean.silhouette, val_mean.prior, val_mean.dfl, val_mean.gt,
            val_total, val_pck
        ));
        report.epochs.push(EpochRecord { epoch, train: train_mean, val: val_mean, val_pck });
    }

    if let Some(snap) = &best_weights {
        restore_vars(&net, snap)?;
    }
    Ok(TrainOutput { net, report })
}

/// Checkpoint metadata the trainer attaches when the caller saves.
pub fn checkpoint_meta(cfg: &TrainConfig, report: &TrainReport) -> BTreeMap<String, String> {
    let mut meta = BTreeMap::new();
    meta.insert("train_config".into(), cfg.to_text());
    meta.insert("best_epoch".into(), report.best_epoch.to_string());
    meta.insert("best_val_total".into(), format!("{:.12e}", report.best_val_total));
    if let Some(last) = report.epochs.last() {
        meta.insert("last_val_pck".into(), format!("{:.4}", last.val_pck));
    }
    meta
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::body_model::make_stand_in_assets;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            samples_per_epoch: 8,
            val_samples: 4,
            resolution: 32,
            ..TrainConfig::default()
        }
    }

    fn tiny_world() -> (AssetSets, ModelAssets) {
        (AssetSets::stand_in().reduced(4, 3), make_stand_in_assets(4))
    }

    fn test_image(seed: u64) -> ImageF {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..16 * 16).map(|_| std::array::from_fn(|_| rng.gen_range(0.0..1.0))).collect();
        ImageF { w: 16, h: 16, data }
    }

    #[test]
    fn jitter_zero_ranges_is_identity() {
        let img = test_image(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = color_jitter(&img, &mut rng, &JitterRanges::zero());
        assert_eq!(out, img);
    }

    #[test]
    fn jitter_brightness_only_scales() {
        let img = test_image(3);
        let ranges = JitterRanges { brightness: 0.3, ..JitterRanges::zero() };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let out = color_jitter(&img, &mut rng, &ranges);
        // Recompute the factor with an identical draw sequence.
        let mut rng2 = ChaCha8Rng::seed_from_u64(4);
        let b = 1.0 + rng2.gen_range(-0.3..=0.3);
        for (o, i) in out.data.iter().zip(&img.data) {
            for ch in 0..3 {
                assert_eq!(o[ch], (i[ch] * b).clamp(0.0, 1.0));
            }
        }
    }

    #[test]
    fn jitter_is_deterministic_and_clipped() {
        let img = test_image(5);
        let ranges = JitterRanges::default();
        let a = color_jitter(&img, &mut ChaCha8Rng::seed_from_u64(6), &ranges);
        let b = color_jitter(&img, &mut ChaCha8Rng::seed_from_u64(6), &ranges);
        assert_eq!(a, b);
        assert!(a.data.iter().flatten().all(|&v| (0.0..=1.0).contains(&v)));
        let c = color_jitter(&img, &mut ChaCha8Rng::seed_from_u64(7), &ranges);
        assert_ne!(a, c);
    }

    #[test]
    fn hsv_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..500 {
            let px = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
            let (h, s, v) = rgb_to_hsv(&px);
            let back = hsv_to_rgb(h, s, v);
            for ch in 0..3 {
                assert!((back[ch] - px[ch]).abs() < 1e-9, "{px:?} -> {back:?}");
            }
        }
    }

    #[test]
    fn config_text_round_trips_and_rejects_unknown_keys() {
        let cfg = TrainConfig {
            variant: Variant::DinoHmr,
            enable_dfl: false,
            epochs: 7,
            learning_rate: 1e-4,
            pair_fraction: 0.25,
            real_mix: RealMix::Equal,
            jitter: JitterRanges { hue: 0.1, ..JitterRanges::default() },
            seed: 99,
            ..TrainConfig::default()
        };
        let text = cfg.to_text();
        assert_eq!(TrainConfig::from_text(&text).unwrap(), cfg);
        assert!(TrainConfig::from_text("nonsense=1").is_err());
        assert!(TrainConfig::from_text("epochs").is_err());
        // Partial configs keep defaults for unlisted keys.
        let partial = TrainConfig::from_text("epochs=3\n\n# comment\nseed=5\n").unwrap();
        assert_eq!(partial.epochs, 3);
        assert_eq!(partial.seed, 5);
        assert_eq!(partial.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn config_invariants_reject_bad_combinations() {
        let base = TrainConfig::default();
        assert!(TrainConfig { epochs: 0, ..base.clone() }.validate().is_err());
        assert!(TrainConfig { epochs: MAX_EPOCHS + 1, ..base.clone() }.validate().is_err());
        assert!(TrainConfig { learning_rate: -1.0, ..base.clone() }.validate().is_err());
        assert!(TrainConfig { batch_size: 3, pair_fraction: 0.5, ..base.clone() }
            .validate()
            .is_err());
        assert!(TrainConfig { batch_size: 3, pair_fraction: 0.0, real_mix: RealMix::Equal, ..base.clone() }
            .validate()
            .is_err());
        assert!(TrainConfig { variant: Variant::DinoHmr, enable_dfl: true, ..base.clone() }
            .validate()
            .is_err());
        assert!(TrainConfig { pair_fraction: 1.5, ..base.clone() }.validate().is_err());
        assert!(TrainConfig { jitter: JitterRanges { hue: 0.6, ..JitterRanges::zero() }, ..base }
            .validate()
            .is_err());
    }

    #[test]
    fn batches_keep_pairs_adjacent_and_whole() {
        let (sets, assets) = tiny_world();
        let gen = GenConfig {
            raster: RasterConfig::default().at_resolution(32),
            rgb: false,
            ..GenConfig::default()
        };
        let stream = crate::synthpipe::epoch_stream(11, 21, 1.0, &sets, &assets, &gen).unwrap();
        let batches = make_synth_batches(stream, 4).unwrap();
        let total: usize = batches.iter().map(|b| b.rows.len()).sum();
        assert!(total >= 21);
        for batch in &batches {
            assert!(batch.rows.len() <= 4);
            for &(i, j, _) in &batch.pairs {
                assert_eq!(j, i + 1);
                assert!(j < batch.rows.len());
            }
        }
        // Full pair fraction: every row belongs to a pair.
        let paired: usize = batches.iter().map(|b| 2 * b.pairs.len()).sum();
        assert_eq!(paired, total);
    }

    #[test]
    fn smoke_train_returns_finite_report_and_min_selection() {
        let (sets, assets) = tiny_world();
        let cfg = tiny_cfg();
        let mut lines = Vec::new();
        let out = train(&cfg, &sets, &assets, None, &mut |l| lines.push(l.to_string())).unwrap();
        assert_eq!(out.report.epochs.len(), 2);
        for rec in &out.report.epochs {
            assert!(rec.val.total().is_finite());
            assert!(rec.train.total().is_finite());
        }
        let min = out
            .report
            .epochs
            .iter()
            .map(|r| r.val.total())
            .fold(f64::INFINITY, f64::min);
        assert_eq!(out.report.best_val_total, min);
        assert_eq!(
            out.report.best_val_total,
            out.report.epochs[out.report.best_epoch - 1].val.total()
        );
        assert!(lines.iter().any(|l| l.contains("epoch=1 step=0 ")));
        assert!(lines.iter().any(|l| l.contains("val_total=")));
        // Pairs flowed through: the disentanglement term is live.
        assert!(out.report.epochs[0].val.dfl > 0.0);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let (sets, assets) = tiny_world();
        let cfg = TrainConfig { learning_rate: 0.0, epochs: 1, ..tiny_cfg() };
        let out = train(&cfg, &sets, &assets, None, &mut |_| {}).unwrap();
        let fresh = DessieNet::new(NetConfig::desk(cfg.variant, cfg.seed), &Device::Cpu).unwrap();
        let got = snapshot_vars(&out.net).unwrap();
        let want = snapshot_vars(&fresh).unwrap();
        assert_eq!(got.len(), want.len());
        for ((n1, t1), (n2, t2)) in got.iter().zip(&want) {
            assert_eq!(n1, n2);
            let a: Vec<f64> = t1.flatten_all().unwrap().to_vec1().unwrap();
            let b: Vec<f64> = t2.flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(a, b, "var {n1} moved under zero learning rate");
        }
    }

    #[test]
    fn fixed_seed_reproduces_loss_curves() {
        let (sets, assets) = tiny_world();
        let cfg = tiny_cfg();
        let a = train(&cfg, &sets, &assets, None, &mut |_| {}).unwrap();
        let b = train(&cfg, &sets, &assets, None, &mut |_| {}).unwrap();
        assert_eq!(a.report.epochs.len(), b.report.epochs.len());
        for (ra, rb) in a.report.epochs.iter().zip(&b.report.epochs) {
            assert_eq!(ra, rb);
        }
    }

    #[test]
    fn real_mixing_trains_and_requires_data() {
        let (sets, assets) = tiny_world();
        let cfg = TrainConfig { real_mix: RealMix::Equal, ..tiny_cfg() };
        assert!(train(&cfg, &sets, &assets, None, &mut |_| {}).is_err());

        // Build "real" images from rendered synthetics: keypoints only.
        let gen = GenConfig {
            raster: RasterConfig::default().at_resolution(cfg.resolution),
            ..GenConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let real: Vec<RealSample> = (0..3)
            .map(|_| {
                let s = crate::synthpipe::sample_single(&mut rng, &sets, &assets, &gen).unwrap();
                RealSample {
                    image: s.image,
                    keypoints: s.ann.keypoints.to_vec(),
                    visibility: s.ann.visibility.to_vec(),
                    mask: None,
                }
            })
            .collect();
        let out = train(&cfg, &sets, &assets, Some(&real), &mut |_| {}).unwrap();
        assert!(out.report.epochs.iter().all(|r| r.val.total().is_finite()));
    }
}
