//! The regression network: a pluggable backbone producing a patch feature
//! grid, convolutional extractor heads, and iterative residual decoders that
//! refine shape, pose, and camera parameters from a fixed starting point.
//!
//! Two variants share the machinery. The three-stream variant extracts
//! separate appearance, pose, and global features and routes each to its own
//! decoder, so shape gradients can never touch pose-stream weights. The
//! single-stream variant extracts one feature vector and decodes all
//! parameters from it.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use candle_nn::ops::softmax;
use candle_nn::{Conv2d, Conv2dConfig, Linear, Module, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::archive::Archive;
use crate::body_model::{N_SHAPE, N_JOINTS};
use crate::camera::{derive_translation_t, DEFAULT_FOCAL, DEFAULT_RESOLUTION};
use crate::losses::N_THETA;
use crate::{Error, Result};

pub const FEATURE_DIM: usize = 640;
pub const N_THETA_J: usize = (N_JOINTS - 1) * 3;
pub const N_CAM: usize = 3;
/// beta + theta_G + theta_J + camera.
pub const N_ALL_PARAMS: usize = N_SHAPE + N_THETA + N_CAM;

/// Checkpoint archive format tag.
pub const CKPT_FORMAT: &str = "dessie-ckpt/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Dessie,
    DinoHmr,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Dessie => "DESSIE",
            Variant::DinoHmr => "DINOHMR",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "DESSIE" => Ok(Variant::Dessie),
            "DINOHMR" => Ok(Variant::DinoHmr),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

// ---------------------------------------------------------------------------
// Seeded initialization
//
// Weight draws use an explicit stream so two builds from the same seed are
// identical; device-global randomness never enters the picture.
// ---------------------------------------------------------------------------

pub(crate) struct VarFactory<'a> {
    varmap: &'a VarMap,
    device: Device,
    rng: ChaCha8Rng,
}

impl<'a> VarFactory<'a> {
    fn new(varmap: &'a VarMap, device: &Device, seed: u64) -> Self {
        VarFactory {
            varmap,
            device: device.clone(),
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x11e7),
        }
    }

    fn tensor(&mut self, name: &str, dims: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let var = self.varmap.get(dims, name, candle_nn::init::ZERO, DType::F64, &self.device)?;
        let t = Tensor::from_vec(data, dims, &self.device)?;
        {
            let data = self.varmap.data().lock().unwrap();
            data.get(name).expect("var just created").set(&t)?;
        }
        Ok(var)
    }

    /// Uniform(-bound, bound) weights, zero bias, like torch's default
    /// linear/conv initialization.
    fn uniform(&mut self, name: &str, dims: &[usize], fan_in: usize) -> Result<Tensor> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = dims.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
        self.tensor(name, dims, data)
    }

    fn zeros(&mut self, name: &str, dims: &[usize]) -> Result<Tensor> {
        let n: usize = dims.iter().product();
        self.tensor(name, dims, vec![0.0; n])
    }

    fn ones(&mut self, name: &str, dims: &[usize]) -> Result<Tensor> {
        let n: usize = dims.iter().product();
        self.tensor(name, dims, vec![1.0; n])
    }

    fn gauss(&mut self, name: &str, dims: &[usize], std: f64) -> Result<Tensor> {
        use rand_distr::{Distribution, Normal};
        let n: usize = dims.iter().product();
        let normal = Normal::new(0.0, std).expect("finite std");
        let data: Vec<f64> = (0..n).map(|_| normal.sample(&mut self.rng)).collect();
        self.tensor(name, dims, data)
    }

    fn linear(&mut self, name: &str, inp: usize, out: usize) -> Result<Linear> {
        let w = self.uniform(&format!("{name}.weight"), &[out, inp], inp)?;
        let b = self.zeros(&format!("{name}.bias"), &[out])?;
        Ok(Linear::new(w, Some(b)))
    }

    /// Final residual layer: tiny or exactly zero.
    fn residual_linear(&mut self, name: &str, inp: usize, out: usize, zero: bool) -> Result<Linear> {
        let w = if zero {
            self.zeros(&format!("{name}.weight"), &[out, inp])?
        } else {
            self.gauss(&format!("{name}.weight"), &[out, inp], 1e-3)?
        };
        let b = self.zeros(&format!("{name}.bias"), &[out])?;
        Ok(Linear::new(w, Some(b)))
    }

    fn conv(
        &mut self,
        name: &str,
        inp: usize,
        out: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Conv2d> {
        let w = self.uniform(&format!("{name}.weight"), &[out, inp, k, k], inp * k * k)?;
        let b = self.zeros(&format!("{name}.bias"), &[out])?;
        let cfg = Conv2dConfig { padding, stride, ..Default::default() };
        Ok(Conv2d::new(w, Some(b), cfg))
    }
}

/// Deterministic inverted dropout driven by an explicit stream.
#[derive(Debug, Clone, Copy)]
pub struct SeededDropout {
    pub p: f64,
}

impl SeededDropout {
    fn apply(&self, x: &Tensor, rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let rng = match rng {
            Some(r) if self.p > 0.0 => r,
            _ => return Ok(x.clone()),
        };
        let n = x.elem_count();
        let keep = 1.0 - self.p;
        let mask: Vec<f64> =
            (0..n).map(|_| if rng.gen_bool(keep) { 1.0 / keep } else { 0.0 }).collect();
        let mask = Tensor::from_vec(mask, x.shape(), x.device())?;
        Ok(x.mul(&mask)?)
    }
}

// ---------------------------------------------------------------------------
// Backbones
// ---------------------------------------------------------------------------

/// Patch feature extractor. `features` maps a normalized `[B,3,R,R]` image
/// to a `[B,C,R/stride,R/stride]` grid.
pub trait Backbone {
    fn patch_stride(&self) -> usize;
    fn channels(&self) -> usize;
    /// Map raw `[0,1]` pixels to the backbone's expected input statistics.
    fn normalize(&self, image: &Tensor) -> Result<Tensor>;
    fn features(&self, image: &Tensor) -> Result<Tensor>;
    /// Weights the optimizer may update.
    fn trainable_names(&self) -> Vec<String>;
}

fn check_input(image: &Tensor, stride: usize) -> Result<(usize, usize)> {
    let (_b, c, h, w) = image.dims4()?;
    if c != 3 {
        return Err(Error::ShapeMismatch(format!("expected 3 channels, got {c}")));
    }
    if h != w || h % stride != 0 {
        return Err(Error::ShapeMismatch(format!(
            "image {h}x{w} must be square with side divisible by {stride}"
        )));
    }
    Ok((h, w))
}

/// Small trainable convolutional backbone, stride 8. The output grid carries
/// `channels + 2` planes: learned features plus two fixed coordinate ramps.
pub struct ConvBackbone {
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
    channels: usize,
    names: Vec<String>,
}

impl ConvBackbone {
    pub(crate) fn new(f: &mut VarFactory, channels: usize) -> Result<Self> {
        let mid = (channels / 2).max(8);
        Ok(ConvBackbone {
            conv1: f.conv("backbone.conv1", 3, mid, 3, 2, 1)?,
            conv2: f.conv("backbone.conv2", mid, channels, 3, 2, 1)?,
            conv3: f.conv("backbone.conv3", channels, channels, 3, 2, 1)?,
            channels,
            names: ["conv1", "conv2", "conv3"]
                .iter()
                .flat_map(|l| {
                    [format!("backbone.{l}.weight"), format!("backbone.{l}.bias")]
                })
                .collect(),
        })
    }
}

impl Backbone for ConvBackbone {
    fn patch_stride(&self) -> usize {
        8
    }

    fn channels(&self) -> usize {
        self.channels + 2
    }

    fn normalize(&self, image: &Tensor) -> Result<Tensor> {
        Ok(image.affine(2.0, -1.0)?)
    }

    fn features(&self, image: &Tensor) -> Result<Tensor> {
        check_input(image, self.patch_stride())?;
        let x = self.conv1.forward(image)?.relu()?;
        let x = self.conv2.forward(&x)?.relu()?;
        let x = self.conv3.forward(&x)?.relu()?;
        // Two fixed coordinate planes take the place of the transformer
        // backbone's positional embedding; without them the pooled head
        // features lose where the subject sits in the frame.
        let (b, _, gh, gw) = x.dims4()?;
        let mut coords = Vec::with_capacity(2 * gh * gw);
        for _ in 0..gh {
            coords.extend((0..gw).map(|c| (2 * c + 1) as f64 / gw as f64 - 1.0));
        }
        for r in 0..gh {
            let v = (2 * r + 1) as f64 / gh as f64 - 1.0;
            coords.extend(std::iter::repeat(v).take(gw));
        }
        let coords = Tensor::from_vec(coords, (1, 2, gh, gw), x.device())?
            .to_dtype(x.dtype())?
            .broadcast_as((b, 2, gh, gw))?;
        Ok(Tensor::cat(&[&x, &coords], 1)?.contiguous()?)
    }

    fn trainable_names(&self) -> Vec<String> {
        self.names.clone()
    }
}

/// Vision-transformer adapter configuration. The standard small/8 settings
/// are `dim=384, depth=12, heads=6, patch=8`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VitConfig {
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch: usize,
    pub resolution: usize,
    /// Trailing blocks whose weights stay trainable.
    pub unfrozen: usize,
}

impl VitConfig {
    pub fn small_8(resolution: usize) -> Self {
        VitConfig { dim: 384, depth: 12, heads: 6, patch: 8, resolution, unfrozen: 3 }
    }
}

/// Layer norm over the last axis, composed from basic ops so it runs on
/// any dtype the rest of the graph uses.
struct Norm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl Norm {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let d = x.dim(candle_core::D::Minus1)? as f64;
        let mean = x.sum_keepdim(candle_core::D::Minus1)?.affine(1.0 / d, 0.0)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.sum_keepdim(candle_core::D::Minus1)?.affine(1.0 / d, 0.0)?;
        let normed = centered.broadcast_div(&var.affine(1.0, self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

struct VitBlock {
    ln1: Norm,
    qkv: Linear,
    proj: Linear,
    ln2: Norm,
    fc1: Linear,
    fc2: Linear,
}

impl VitBlock {
    fn attention(&self, x: &Tensor, heads: usize) -> Result<(Tensor, Tensor)> {
        let (b, n, d) = x.dims3()?;
        let hd = d / heads;
        let qkv = self.qkv.forward(&self.ln1.forward(x)?)?; // [B,N,3D]
        let qkv = qkv.reshape((b, n, 3, heads, hd))?.permute((2, 0, 3, 1, 4))?; // [3,B,H,N,hd]
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let att = q.matmul(&k.transpose(2, 3)?)?.affine(1.0 / (hd as f64).sqrt(), 0.0)?;
        let att = softmax(&att, 3)?;
        let out = att.matmul(&v)?; // [B,H,N,hd]
        let out = out.permute((0, 2, 1, 3))?.reshape((b, n, d))?;
        // Keys reassembled to [B,N,D] for feature extraction.
        let keys = k.permute((0, 2, 1, 3))?.reshape((b, n, d))?;
        Ok((self.proj.forward(&out)?, keys))
    }

    fn forward(&self, x: &Tensor, heads: usize) -> Result<Tensor> {
        let (att, _) = self.attention(x, heads)?;
        let x = x.add(&att)?;
        let h = self.ln2.forward(&x)?;
        let h = self.fc2.forward(&self.fc1.forward(&h)?.gelu_erf()?)?;
        Ok(x.add(&h)?)
    }
}

/// Transformer backbone exposing the final block's key projections as the
/// feature grid, class token excluded.
pub struct VitBackbone {
    cfg: VitConfig,
    patch_embed: Conv2d,
    cls: Tensor,
    pos: Tensor,
    blocks: Vec<VitBlock>,
}

impl VitBackbone {
    pub(crate) fn new(f: &mut VarFactory, cfg: VitConfig) -> Result<Self> {
        if cfg.resolution % cfg.patch != 0 {
            return Err(Error::Config(format!(
                "resolution {} not divisible by patch {}",
                cfg.resolution, cfg.patch
            )));
        }
        if cfg.dim % cfg.heads != 0 {
            return Err(Error::Config("dim must divide evenly into heads".into()));
        }
        let tokens = (cfg.resolution / cfg.patch).pow(2) + 1;
        let patch_embed = f.conv("backbone.patch_embed", 3, cfg.dim, cfg.patch, cfg.patch, 0)?;
        let cls = f.zeros("backbone.cls", &[1, 1, cfg.dim])?;
        let pos = f.gauss("backbone.pos", &[1, tokens, cfg.dim], 0.02)?;
        let mut blocks = Vec::new();
        for i in 0..cfg.depth {
            let p = format!("backbone.block{i}");
            blocks.push(VitBlock {
                ln1: Norm {
                    weight: f.ones(&format!("{p}.ln1.weight"), &[cfg.dim])?,
                    bias: f.zeros(&format!("{p}.ln1.bias"), &[cfg.dim])?,
                    eps: 1e-6,
                },
                qkv: f.linear(&format!("{p}.qkv"), cfg.dim, 3 * cfg.dim)?,
                proj: f.linear(&format!("{p}.proj"), cfg.dim, cfg.dim)?,
                ln2: Norm {
                    weight: f.ones(&format!("{p}.ln2.weight"), &[cfg.dim])?,
                    bias: f.zeros(&format!("{p}.ln2.bias"), &[cfg.dim])?,
                    eps: 1e-6,
                },
                fc1: f.linear(&format!("{p}.fc1"), cfg.dim, 4 * cfg.dim)?,
                fc2: f.linear(&format!("{p}.fc2"), 4 * cfg.dim, cfg.dim)?,
            });
        }
        Ok(VitBackbone { cfg, patch_embed, cls, pos, blocks })
    }
}

impl Backbone for VitBackbone {
    fn patch_stride(&self) -> usize {
        self.cfg.patch
    }

    fn channels(&self) -> usize {
        self.cfg.dim
    }

    fn normalize(&self, image: &Tensor) -> Result<Tensor> {
        // Channel statistics of the pretraining corpus.
        let mean = Tensor::from_vec(vec![0.485, 0.456, 0.406], (1, 3, 1, 1), image.device())?;
        let std = Tensor::from_vec(vec![0.229, 0.224, 0.225], (1, 3, 1, 1), image.device())?;
        Ok(image.broadcast_sub(&mean)?.broadcast_div(&std)?)
    }

    fn features(&self, image: &Tensor) -> Result<Tensor> {
        let (h, _) = check_input(image, self.cfg.patch)?;
        if h != self.cfg.resolution {
            return Err(Error::ShapeMismatch(format!(
                "backbone built for {}, got {h}",
                self.cfg.resolution
            )));
        }
        let (b, _, _, _) = image.dims4()?;
        let g = h / self.cfg.patch;
        let x = self.patch_embed.forward(image)?; // [B,D,g,g]
        let x = x.flatten_from(2)?.transpose(1, 2)?; // [B,g*g,D]
        let cls = self.cls.broadcast_as((b, 1, self.cfg.dim))?;
        let x = Tensor::cat(&[&cls, &x], 1)?.broadcast_add(&self.pos)?;
        let mut x = x;
        for block in &self.blocks[..self.cfg.depth - 1] {
            x = block.forward(&x, self.cfg.heads)?;
        }
        let (_, keys) = self.blocks[self.cfg.depth - 1].attention(&x, self.cfg.heads)?;
        let keys = keys.narrow(1, 1, g * g)?; // drop the class token
        Ok(keys.transpose(1, 2)?.reshape((b, self.cfg.dim, g, g))?.contiguous()?)
    }

    fn trainable_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in self.cfg.depth.saturating_sub(self.cfg.unfrozen)..self.cfg.depth {
            let p = format!("backbone.block{i}");
            for suffix in
                ["ln1.weight", "ln1.bias", "qkv.weight", "qkv.bias", "proj.weight", "proj.bias", "ln2.weight", "ln2.bias", "fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"]
            {
                names.push(format!("{p}.{suffix}"));
            }
        }
        names
    }
}

// ---------------------------------------------------------------------------
// Extractor heads and decoders
// ---------------------------------------------------------------------------

/// Two stride-2 convolutions, global average pool, linear map to the
/// feature dimension.
pub struct ExtractorHead {
    conv1: Conv2d,
    conv2: Conv2d,
    fc: Linear,
}

impl ExtractorHead {
    fn new(f: &mut VarFactory, name: &str, in_channels: usize) -> Result<Self> {
        let c1 = (in_channels * 3 / 2).max(16);
        let c2 = c1 * 2;
        Ok(ExtractorHead {
            conv1: f.conv(&format!("{name}.conv1"), in_channels, c1, 3, 2, 1)?,
            conv2: f.conv(&format!("{name}.conv2"), c1, c2, 3, 2, 1)?,
            fc: f.linear(&format!("{name}.fc"), c2, FEATURE_DIM)?,
        })
    }

    pub fn forward(&self, grid: &Tensor) -> Result<Tensor> {
        let x = self.conv1.forward(grid)?.relu()?;
        let x = self.conv2.forward(&x)?.relu()?;
        let x = x.mean(3)?.mean(2)?; // global average pool -> [B,C]
        Ok(self.fc.forward(&x)?)
    }
}

/// Appearance, pose, and global feature vectors, `[B,640]` each.
pub struct FeatureTriple {
    pub gamma_a: Tensor,
    pub gamma_p: Tensor,
    pub gamma_g: Tensor,
}

/// Residual parameter decoder: two hidden layers with dropout between, then
/// a linear residual head.
pub struct Decoder {
    fc1: Linear,
    fc2: Linear,
    out: Linear,
    dropout: SeededDropout,
}

impl Decoder {
    fn new(
        f: &mut VarFactory,
        name: &str,
        feat_dim: usize,
        param_dim: usize,
        hidden: usize,
        dropout: f64,
        zero_init: bool,
    ) -> Result<Self> {
        Ok(Decoder {
            fc1: f.linear(&format!("{name}.fc1"), feat_dim + param_dim, hidden)?,
            fc2: f.linear(&format!("{name}.fc2"), hidden, hidden)?,
            out: f.residual_linear(&format!("{name}.out"), hidden, param_dim, zero_init)?,
            dropout: SeededDropout { p: dropout },
        })
    }

    /// One residual step from `(feature, params)`.
    pub fn step(
        &self,
        feature: &Tensor,
        params: &Tensor,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Tensor> {
        let x = Tensor::cat(&[feature, params], 1)?;
        let h = self.fc1.forward(&x)?.relu()?;
        let h = self.dropout.apply(&h, rng.as_deref_mut())?;
        let h = self.fc2.forward(&h)?.relu()?;
        Ok(params.add(&self.out.forward(&h)?)?)
    }
}

// ---------------------------------------------------------------------------
// The full network
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub enum BackboneKind {
    Conv { channels: usize },
    Vit(VitConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub variant: Variant,
    pub backbone: BackboneKind,
    pub hidden: usize,
    pub dropout: f64,
    pub iterations: usize,
    pub zero_init_residual: bool,
    pub seed: u64,
}

impl NetConfig {
    pub fn desk(variant: Variant, seed: u64) -> Self {
        NetConfig {
            variant,
            backbone: BackboneKind::Conv { channels: 32 },
            hidden: 1024,
            dropout: 0.5,
            iterations: 3,
            zero_init_residual: false,
            seed,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("variant={}\n", self.variant));
        match &self.backbone {
            BackboneKind::Conv { channels } => {
                s.push_str("backbone=conv\n");
                s.push_str(&format!("channels={channels}\n"));
            }
            BackboneKind::Vit(v) => {
                s.push_str("backbone=vit\n");
                s.push_str(&format!(
                    "vit={},{},{},{},{},{}\n",
                    v.dim, v.depth, v.heads, v.patch, v.resolution, v.unfrozen
                ));
            }
        }
        s.push_str(&format!("hidden={}\n", self.hidden));
        s.push_str(&format!("dropout={}\n", self.dropout));
        s.push_str(&format!("iterations={}\n", self.iterations));
        s.push_str(&format!("zero_init_residual={}\n", self.zero_init_residual));
        s.push_str(&format!("seed={}\n", self.seed));
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Config(format!("net config: {m}"));
        let mut map = BTreeMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| bad(format!("bad line {line:?}")))?;
            map.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| map.get(k).cloned().ok_or_else(|| bad(format!("missing {k}")));
        let backbone = match get("backbone")?.as_str() {
            "conv" => BackboneKind::Conv {
                channels: get("channels")?.parse().map_err(|_| bad("bad channels".into()))?,
            },
            "vit" => {
                let raw = get("vit")?;
                let parts: Vec<usize> = raw
                    .split(',')
                    .map(|p| p.trim().parse().map_err(|_| bad(format!("bad vit field {p:?}"))))
                    .collect::<Result<_>>()?;
                if parts.len() != 6 {
                    return Err(bad("vit needs 6 fields".into()));
                }
                BackboneKind::Vit(VitConfig {
                    dim: parts[0],
                    depth: parts[1],
                    heads: parts[2],
                    patch: parts[3],
                    resolution: parts[4],
                    unfrozen: parts[5],
                })
            }
            other => return Err(bad(format!("unknown backbone {other:?}"))),
        };
        Ok(NetConfig {
            variant: get("variant")?.parse()?,
            backbone,
            hidden: get("hidden")?.parse().map_err(|_| bad("bad hidden".into()))?,
            dropout: get("dropout")?.parse().map_err(|_| bad("bad dropout".into()))?,
            iterations: get("iterations")?.parse().map_err(|_| bad("bad iterations".into()))?,
            zero_init_residual: get("zero_init_residual")?
                .parse()
                .map_err(|_| bad("bad zero_init_residual".into()))?,
            seed: get("seed")?.parse().map_err(|_| bad("bad seed".into()))?,
        })
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.to_text().as_bytes());
        let out = h.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Network output for a batch. `xi` always equals the translation derived
/// from `cam`.
pub struct Prediction {
    /// `[B, 9]`
    pub beta: Tensor,
    /// `[B, 105]`
    pub theta_j: Tensor,
    /// `[B, 3]`
    pub theta_g: Tensor,
    /// `[B, 3]`: scale, tx, ty.
    pub cam: Tensor,
    /// `[B, 3]` derived translation.
    pub xi: Tensor,
    /// Present only for the three-stream variant.
    pub features: Option<FeatureTriple>,
}

impl Prediction {
    /// Global rotation followed by joint rotations, `[B, 108]`.
    pub fn theta_full(&self) -> Result<Tensor> {
        Ok(Tensor::cat(&[&self.theta_g, &self.theta_j], 1)?)
    }

    /// Extract one batch row as host-side values.
    pub fn row(&self, b: usize) -> Result<HostPrediction> {
        let beta: Vec<f64> = self.beta.get(b)?.to_vec1()?;
        let tj: Vec<f64> = self.theta_j.get(b)?.to_vec1()?;
        let tg: Vec<f64> = self.theta_g.get(b)?.to_vec1()?;
        let cam: Vec<f64> = self.cam.get(b)?.to_vec1()?;
        let xi: Vec<f64> = self.xi.get(b)?.to_vec1()?;
        let mut theta_j = [[0.0; 3]; N_JOINTS - 1];
        for (k, v) in tj.iter().enumerate() {
            theta_j[k / 3][k % 3] = *v;
        }
        Ok(HostPrediction {
            beta: beta.try_into().map_err(|_| Error::ShapeMismatch("beta len".into()))?,
            theta_j,
            theta_g: [tg[0], tg[1], tg[2]],
            cam: crate::camera::CameraParams::new(cam[0], cam[1], cam[2])?,
            xi: [xi[0], xi[1], xi[2]],
        })
    }
}

#[derive(Debug, Clone)]
pub struct HostPrediction {
    pub beta: [f64; N_SHAPE],
    pub theta_j: [[f64; 3]; N_JOINTS - 1],
    pub theta_g: [f64; 3],
    pub cam: crate::camera::CameraParams,
    pub xi: [f64; 3],
}

pub struct DessieNet {
    pub config: NetConfig,
    pub varmap: VarMap,
    pub device: Device,
    backbone: Box<dyn Backbone>,
    heads: Vec<ExtractorHead>,
    decoders: Vec<Decoder>,
}

impl DessieNet {
    pub fn new(config: NetConfig, device: &Device) -> Result<Self> {
        if config.iterations == 0 {
            return Err(Error::Config("iterations must be positive".into()));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::Config("dropout must lie in [0,1)".into()));
        }
        let varmap = VarMap::new();
        let mut f = VarFactory::new(&varmap, device, config.seed);
        let backbone: Box<dyn Backbone> = match &config.backbone {
            BackboneKind::Conv { channels } => Box::new(ConvBackbone::new(&mut f, *channels)?),
            BackboneKind::Vit(v) => Box::new(VitBackbone::new(&mut f, v.clone())?),
        };
        let c = backbone.channels();
        let (heads, decoders) = match config.variant {
            Variant::Dessie => {
                let heads = vec![
                    ExtractorHead::new(&mut f, "head.appearance", c)?,
                    ExtractorHead::new(&mut f, "head.pose", c)?,
                    ExtractorHead::new(&mut f, "head.global", c)?,
                ];
                let decoders = vec![
                    Decoder::new(&mut f, "decoder.shape", FEATURE_DIM, N_SHAPE, config.hidden, config.dropout, config.zero_init_residual)?,
                    Decoder::new(&mut f, "decoder.pose", FEATURE_DIM, N_THETA_J, config.hidden, config.dropout, config.zero_init_residual)?,
                    Decoder::new(&mut f, "decoder.global", FEATURE_DIM, 3 + N_CAM, config.hidden, config.dropout, config.zero_init_residual)?,
                ];
                (heads, decoders)
            }
            Variant::DinoHmr => {
                let heads = vec![ExtractorHead::new(&mut f, "head.single", c)?];
                let decoders = vec![Decoder::new(
                    &mut f,
                    "decoder.all",
                    FEATURE_DIM,
                    N_ALL_PARAMS,
                    config.hidden,
                    config.dropout,
                    config.zero_init_residual,
                )?];
                (heads, decoders)
            }
        };
        Ok(DessieNet { config, varmap, device: device.clone(), backbone, heads, decoders })
    }

    pub fn backbone(&self) -> &dyn Backbone {
        self.backbone.as_ref()
    }

    /// Iteration-0 parameters: mean shape, rest pose, a mid-range camera.
    pub fn init_params(&self, batch: usize) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
        let beta = Tensor::zeros((batch, N_SHAPE), DType::F64, &self.device)?;
        let theta_j = Tensor::zeros((batch, N_THETA_J), DType::F64, &self.device)?;
        let theta_g = Tensor::zeros((batch, 3), DType::F64, &self.device)?;
        let cam = Tensor::from_vec(vec![0.8, 0.0, 0.0], (1, 3), &self.device)?
            .broadcast_as((batch, 3))?
            .contiguous()?;
        Ok((beta, theta_j, theta_g, cam))
    }

    /// Full forward pass. `rng` enables dropout; pass `None` for evaluation.
    pub fn forward(&self, image: &Tensor, mut rng: Option<&mut ChaCha8Rng>) -> Result<Prediction> {
        let (b, _, _, _) = image.dims4()?;
        let grid = self.backbone.features(&self.backbone.normalize(image)?)?;
        let (mut beta, mut theta_j, mut theta_g, mut cam) = self.init_params(b)?;
        let features = match self.config.variant {
            Variant::Dessie => {
                let gamma_a = self.heads[0].forward(&grid)?;
                let gamma_p = self.heads[1].forward(&grid)?;
                let gamma_g = self.heads[2].forward(&grid)?;
                for _ in 0..self.config.iterations {
                    beta = self.decoders[0].step(&gamma_a, &beta, rng.as_deref_mut())?;
                    theta_j = self.decoders[1].step(&gamma_p, &theta_j, rng.as_deref_mut())?;
                    let gc = Tensor::cat(&[&theta_g, &cam], 1)?;
                    let gc = self.decoders[2].step(&gamma_g, &gc, rng.as_deref_mut())?;
                    theta_g = gc.narrow(1, 0, 3)?;
                    cam = gc.narrow(1, 3, N_CAM)?;
                }
                Some(FeatureTriple { gamma_a, gamma_p, gamma_g })
            }
            Variant::DinoHmr => {
                let gamma = self.heads[0].forward(&grid)?;
                let mut params =
                    Tensor::cat(&[&beta, &theta_g, &theta_j, &cam], 1)?;
                for _ in 0..self.config.iterations {
                    params = self.decoders[0].step(&gamma, &params, rng.as_deref_mut())?;
                }
                beta = params.narrow(1, 0, N_SHAPE)?;
                theta_g = params.narrow(1, N_SHAPE, 3)?;
                theta_j = params.narrow(1, N_SHAPE + 3, N_THETA_J)?;
                cam = params.narrow(1, N_SHAPE + 3 + N_THETA_J, N_CAM)?;
                None
            }
        };
        let xi = derive_translation_t(&cam, DEFAULT_FOCAL, DEFAULT_RESOLUTION)?;
        Ok(Prediction { beta, theta_j, theta_g, cam, xi, features })
    }

    /// Vars the optimizer updates: extractor heads, decoders, and the
    /// backbone's trainable subset.
    pub fn trainable_vars(&self) -> Vec<Var> {
        let allowed = self.backbone.trainable_names();
        let data = self.varmap.data().lock().unwrap();
        let mut out: Vec<(String, Var)> = data
            .iter()
            .filter(|(name, _)| {
                !name.starts_with("backbone.") || allowed.iter().any(|a| a == *name)
            })
            .map(|(n, v)| (n.clone(), v.clone()))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out.into_iter().map(|(_, v)| v).collect()
    }

    /// Vars by name prefix, for targeted probes.
    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<(String, Var)> {
        let data = self.varmap.data().lock().unwrap();
        let mut out: Vec<(String, Var)> = data
            .iter()
            .filter(|(name, _)| name.starts_with(prefix))
            .map(|(n, v)| (n.clone(), v.clone()))
            .collect();
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn save(&self, path: &Path, extra_meta: &BTreeMap<String, String>) -> Result<()> {
        let mut arc = Archive::new(CKPT_FORMAT);
        {
            let data = self.varmap.data().lock().unwrap();
            for (name, var) in data.iter() {
                let t = var.as_tensor();
                let flat: Vec<f64> = t.flatten_all()?.to_vec1()?;
                arc.insert_f64(name, t.dims().to_vec(), flat);
            }
        }
        arc.meta.insert("variant".into(), self.config.variant.to_string());
        arc.meta.insert("config".into(), self.config.to_text());
        arc.meta.insert("config_hash".into(), self.config.hash());
        for (k, v) in extra_meta {
            arc.meta.insert(k.clone(), v.clone());
        }
        arc.write(path)
    }

    /// Rebuild a network from a checkpoint, restoring weights exactly.
    pub fn load(path: &Path, device: &Device) -> Result<(Self, BTreeMap<String, String>)> {
        let arc = Archive::read(path)?;
        arc.expect_format(CKPT_FORMAT)?;
        let config_text = arc
            .meta
            .get("config")
            .ok_or_else(|| Error::Config("checkpoint missing config".into()))?;
        let config = NetConfig::from_text(config_text)?;
        if let Some(v) = arc.meta.get("variant") {
            if *v != config.variant.to_string() {
                return Err(Error::Config(format!(
                    "variant tag {v} does not match config {}",
                    config.variant
                )));
            }
        }
        let net = DessieNet::new(config, device)?;
        {
            let data = net.varmap.data().lock().unwrap();
            for (name, var) in data.iter() {
                let (shape, vals) = arc.f64_array(name, var.dims().len())?;
                if shape != var.dims() {
                    return Err(Error::BadArray {
                        name: name.clone(),
                        reason: format!("shape {shape:?} vs expected {:?}", var.dims()),
                    });
                }
                let t = Tensor::from_vec(vals.to_vec(), shape, device)?;
                var.set(&t)?;
            }
        }
        Ok((net, arc.meta.clone()))
    }
}
