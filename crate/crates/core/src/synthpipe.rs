//! Synthetic data generation: textures, a pose library, shape sampling,
//! camera and yaw randomization, annotated single images, and one-factor
//! controlled-variation pairs, streamed deterministically per epoch.
//!
//! Every stream item is a pure function of `(seed, index)`: worker count and
//! consumption order cannot change the output. Annotation records round-trip
//! through text exactly (floats printed in shortest form that reparses to the
//! same bits), so regenerating a render from a stored record is bit-identical.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{Rotation3, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::archive::Archive;
use crate::body_model::{
    landmarks_3d, pose_mesh, ModelAssets, PoseShapeState, N_LANDMARKS, N_SHAPE,
};
use crate::camera::CameraParams;
use crate::renderer::{hard_mask, render_rgb, visible_landmarks, ImageF, RasterConfig};
use crate::{Error, Result};

/// Archive format tag for pose libraries.
pub const POSE_FORMAT: &str = "dessie-poses/1";

pub const N_POSE_JOINTS: usize = 35;

pub const POSE_CLASS_NAMES: [&str; 8] = [
    "standing",
    "walking",
    "trotting",
    "cantering",
    "eating",
    "bending_neck",
    "sitting",
    "rearing",
];

pub const TEXTURE_PATTERN_NAMES: [&str; 8] = [
    "bay",
    "chestnut",
    "black",
    "gray",
    "palomino",
    "dappled",
    "pinto",
    "striped",
];

// ---------------------------------------------------------------------------
// Asset sets
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TextureEntry {
    /// Coat pattern family, 0..=7.
    pub species_id: u8,
    pub image: ImageF,
}

#[derive(Debug, Clone)]
pub struct PoseEntry {
    pub pose_id: i64,
    /// Index into [`POSE_CLASS_NAMES`].
    pub class_id: u8,
    pub theta_g: [f64; 3],
    pub theta_j: [[f64; 3]; N_POSE_JOINTS],
}

impl PoseEntry {
    pub fn class_name(&self) -> &'static str {
        POSE_CLASS_NAMES[self.class_id as usize]
    }
}

/// Zero-mean clipped Gaussian over shape coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeSampler {
    pub std: [f64; N_SHAPE],
    pub clip: f64,
}

impl Default for ShapeSampler {
    fn default() -> Self {
        ShapeSampler { std: [0.5; N_SHAPE], clip: 2.0 }
    }
}

/// The finite sets a sample draws from. An empty background list falls back
/// to solid random colors.
#[derive(Debug, Clone)]
pub struct AssetSets {
    pub textures: Vec<TextureEntry>,
    pub poses: Vec<PoseEntry>,
    pub backgrounds: Vec<PathBuf>,
    pub shape_sampler: ShapeSampler,
}

impl AssetSets {
    /// Full procedural set: 80 textures, 40 poses, solid-color backgrounds.
    pub fn stand_in() -> Self {
        AssetSets {
            textures: make_stand_in_textures(),
            poses: make_stand_in_poses(),
            backgrounds: Vec::new(),
            shape_sampler: ShapeSampler::default(),
        }
    }

    /// Evenly spaced subsets, for small training runs.
    pub fn reduced(&self, n_textures: usize, n_poses: usize) -> Self {
        let pick = |len: usize, n: usize| -> Vec<usize> {
            let n = n.clamp(1, len);
            (0..n).map(|i| i * len / n).collect()
        };
        let mut out = self.clone();
        out.textures =
            pick(self.textures.len(), n_textures).into_iter().map(|i| self.textures[i].clone()).collect();
        out.poses = pick(self.poses.len(), n_poses)
            .into_iter()
            .enumerate()
            .map(|(new_id, i)| {
                let mut p = self.poses[i].clone();
                p.pose_id = new_id as i64;
                p
            })
            .collect();
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.textures.len() < 2 {
            return Err(Error::Config("need at least 2 textures".into()));
        }
        if self.poses.len() < 2 {
            return Err(Error::Config("need at least 2 poses".into()));
        }
        for t in &self.textures {
            if t.species_id > 7 {
                return Err(Error::Config(format!("species_id {} out of range", t.species_id)));
            }
            if t.image.data.is_empty() {
                return Err(Error::Config("empty texture image".into()));
            }
        }
        for (i, p) in self.poses.iter().enumerate() {
            if p.pose_id != i as i64 {
                return Err(Error::Config(format!("pose {i} has id {}", p.pose_id)));
            }
            if p.class_id as usize >= POSE_CLASS_NAMES.len() {
                return Err(Error::Config(format!("pose {i} class out of range")));
            }
            let finite = p.theta_g.iter().all(|v| v.is_finite())
                && p.theta_j.iter().flatten().all(|v| v.is_finite());
            if !finite {
                return Err(Error::Config(format!("pose {i} contains non-finite values")));
            }
        }
        if !self.shape_sampler.clip.is_finite() || self.shape_sampler.clip <= 0.0 {
            return Err(Error::Config("shape clip must be positive".into()));
        }
        if self.shape_sampler.std.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::Config("shape std must be finite and nonnegative".into()));
        }
        Ok(())
    }

    /// All image files (png/jpg/jpeg, sorted by name) under `dir`.
    pub fn backgrounds_from_dir(&mut self, dir: &Path) -> Result<usize> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
                    Some(ref e) if e == "png" || e == "jpg" || e == "jpeg"
                )
            })
            .collect();
        files.sort();
        let n = files.len();
        self.backgrounds = files;
        Ok(n)
    }
}

// ---------------------------------------------------------------------------
// Procedural textures
// ---------------------------------------------------------------------------

const TEXTURE_SIZE: usize = 128;

/// 8 coat patterns x 10 variants, deterministic.
pub fn make_stand_in_textures() -> Vec<TextureEntry> {
    let mut out = Vec::with_capacity(80);
    for pattern in 0..8 {
        for variant in 0..10 {
            out.push(TextureEntry {
                species_id: pattern as u8,
                image: stand_in_texture(pattern, variant),
            });
        }
    }
    out
}

fn stand_in_texture(pattern: usize, variant: usize) -> ImageF {
    let mut rng = ChaCha8Rng::seed_from_u64(0x7e87 ^ ((pattern as u64) << 8 | variant as u64));
    let n = TEXTURE_SIZE;
    let base: [f64; 3] = match pattern {
        0 => [0.45, 0.29, 0.16], // bay
        1 => [0.58, 0.33, 0.18], // chestnut
        2 => [0.10, 0.09, 0.09], // black
        3 => [0.58, 0.58, 0.61], // gray
        4 => [0.80, 0.66, 0.42], // palomino
        5 => [0.55, 0.53, 0.55], // dappled base
        6 => [0.93, 0.91, 0.88], // pinto base
        _ => [0.82, 0.78, 0.70], // striped base
    };
    let tone: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.06..0.06));
    let mut img = ImageF::solid([0.0; 3], n, n);

    // Pattern-specific parameters drawn up front so pixels are independent.
    let spots: Vec<(f64, f64, f64, f64)> = (0..40)
        .map(|_| {
            (
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.03..0.07),
                rng.gen_range(0.10..0.22),
            )
        })
        .collect();
    let blob_freq: [(f64, f64, f64); 3] =
        std::array::from_fn(|_| (rng.gen_range(2.0..5.0), rng.gen_range(2.0..5.0), rng.gen_range(0.0..6.28)));
    let blob_thresh = rng.gen_range(0.15..0.55);
    let stripe_k = 5.0 + (variant % 5) as f64 + rng.gen_range(0.0..0.9);
    let stripe_phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let dark: [f64; 3] = match pattern {
        6 => [0.38, 0.24, 0.14],
        _ => [0.13, 0.11, 0.10],
    };

    for y in 0..n {
        for x in 0..n {
            let u = (x as f64 + 0.5) / n as f64;
            let v = (y as f64 + 0.5) / n as f64;
            // Subtle vertical shading keeps even solid coats non-constant.
            let shade = 1.0 - 0.12 * v;
            let mut px: [f64; 3] = std::array::from_fn(|c| (base[c] + tone[c]) * shade);
            match pattern {
                5 => {
                    for &(cx, cy, r, gain) in &spots {
                        let d2 = (u - cx).powi(2) + (v - cy).powi(2);
                        if d2 < r * r {
                            let fall = 1.0 - (d2 / (r * r));
                            for p in px.iter_mut() {
                                *p += gain * fall;
                            }
                        }
                    }
                }
                6 => {
                    let mut field = 0.0;
                    for &(fu, fv, ph) in &blob_freq {
                        field += (std::f64::consts::TAU * (fu * u + fv * v) + ph).sin();
                    }
                    if field / 3.0 > blob_thresh {
                        px = std::array::from_fn(|c| dark[c] * shade);
                    }
                }
                7 => {
                    if (std::f64::consts::TAU * stripe_k * u + stripe_phase).sin() > 0.25 {
                        px = std::array::from_fn(|c| dark[c] * shade);
                    }
                }
                _ => {}
            }
            *img.pixel_mut(x, y) = px.map(|c| c.clamp(0.0, 1.0));
        }
    }
    img
}

// ---------------------------------------------------------------------------
// Procedural pose library
// ---------------------------------------------------------------------------

// Joint indices in the skeleton (see body_model::JOINT_NAMES).
const J_SPINE1: usize = 1;
const J_SPINE2: usize = 2;
const J_NECK1: usize = 5;
const J_NECK2: usize = 6;
const J_HEAD: usize = 7;
const J_SHOULDER_FL: usize = 13;
const J_ELBOW_FL: usize = 14;
const J_KNEE_FL: usize = 15;
const J_SHOULDER_FR: usize = 17;
const J_ELBOW_FR: usize = 18;
const J_KNEE_FR: usize = 19;
const J_HIP_BL: usize = 21;
const J_STIFLE_BL: usize = 22;
const J_HOCK_BL: usize = 23;
const J_HIP_BR: usize = 25;
const J_STIFLE_BR: usize = 26;
const J_HOCK_BR: usize = 27;
const J_TAIL1: usize = 29;

/// 8 classes x 5 variants of hand-built keyframes with small deterministic
/// jitter. Rotation axes: x runs tail to nose, y points down, z is lateral;
/// sagittal limb swing is rotation about z, neck yaw about y.
pub fn make_stand_in_poses() -> Vec<PoseEntry> {
    let mut out = Vec::with_capacity(40);
    for class in 0..8usize {
        for variant in 0..5usize {
            let (theta_g, theta_j) = class_pose(class, variant);
            out.push(PoseEntry {
                pose_id: (class * 5 + variant) as i64,
                class_id: class as u8,
                theta_g,
                theta_j,
            });
        }
    }
    out
}

fn class_pose(class: usize, variant: usize) -> ([f64; 3], [[f64; 3]; N_POSE_JOINTS]) {
    let mut rng = ChaCha8Rng::seed_from_u64(0x905e ^ ((class as u64) << 8 | variant as u64));
    let mut theta = [[0.0; 3]; N_POSE_JOINTS];
    let mut theta_g = [0.0; 3];
    // theta row r drives joint r+1.
    let set = |theta: &mut [[f64; 3]; N_POSE_JOINTS], joint: usize, axis: usize, v: f64| {
        theta[joint - 1][axis] += v;
    };
    let phase = variant as f64 * std::f64::consts::TAU / 5.0;
    match class {
        0 => {} // standing: jitter only
        1 => {
            // walking: diagonal limb swing
            let a = 0.25 * phase.sin().max(0.35);
            set(&mut theta, J_SHOULDER_FL, 2, a);
            set(&mut theta, J_SHOULDER_FR, 2, -a);
            set(&mut theta, J_HIP_BL, 2, -a);
            set(&mut theta, J_HIP_BR, 2, a);
            set(&mut theta, J_KNEE_FL, 2, 0.30 * phase.cos().abs());
            set(&mut theta, J_KNEE_FR, 2, 0.30 * phase.sin().abs());
            set(&mut theta, J_NECK1, 2, 0.08 * phase.sin());
        }
        2 => {
            // trotting: larger diagonal swing, flexed carpi
            let a = 0.42 + 0.06 * phase.sin();
            set(&mut theta, J_SHOULDER_FL, 2, a);
            set(&mut theta, J_SHOULDER_FR, 2, -a);
            set(&mut theta, J_HIP_BL, 2, -a);
            set(&mut theta, J_HIP_BR, 2, a);
            set(&mut theta, J_ELBOW_FL, 2, 0.25);
            set(&mut theta, J_KNEE_FL, 2, 0.55);
            set(&mut theta, J_KNEE_FR, 2, 0.20);
            set(&mut theta, J_HOCK_BL, 2, 0.35);
            set(&mut theta, J_HOCK_BR, 2, 0.15);
        }
        3 => {
            // cantering: front pair near-phase, spine engaged
            set(&mut theta, J_SHOULDER_FL, 2, 0.40 * phase.sin() + 0.2);
            set(&mut theta, J_SHOULDER_FR, 2, 0.40 * (phase + 0.5).sin());
            set(&mut theta, J_HIP_BL, 2, -0.35 * phase.sin() - 0.15);
            set(&mut theta, J_HIP_BR, 2, -0.35 * (phase + 0.4).sin());
            set(&mut theta, J_SPINE1, 2, 0.10 * phase.sin());
            set(&mut theta, J_SPINE2, 2, 0.10 * (phase + 0.3).sin());
            set(&mut theta, J_KNEE_FL, 2, 0.45);
            set(&mut theta, J_STIFLE_BL, 2, 0.30);
        }
        4 => {
            // eating: neck and head pitched toward the ground
            set(&mut theta, J_NECK1, 2, 0.55 + 0.05 * phase.sin());
            set(&mut theta, J_NECK2, 2, 0.50);
            set(&mut theta, J_HEAD, 2, 0.30);
            set(&mut theta, J_SHOULDER_FL, 2, -0.08);
            set(&mut theta, J_SHOULDER_FR, 2, 0.08);
        }
        5 => {
            // bending neck: lateral yaw, side alternating per variant
            let side = if variant % 2 == 0 { 1.0 } else { -1.0 };
            set(&mut theta, J_NECK1, 1, side * (0.50 + 0.05 * phase.cos()));
            set(&mut theta, J_NECK2, 1, side * 0.35);
            set(&mut theta, J_HEAD, 1, side * 0.20);
            set(&mut theta, J_TAIL1, 1, -side * 0.15);
        }
        6 => {
            // sitting: hind legs folded, torso pitched up
            theta_g = [0.0, 0.0, -0.30];
            for (hip, stifle, hock) in [(J_HIP_BL, J_STIFLE_BL, J_HOCK_BL), (J_HIP_BR, J_STIFLE_BR, J_HOCK_BR)] {
                set(&mut theta, hip, 2, -0.85);
                set(&mut theta, stifle, 2, 1.05);
                set(&mut theta, hock, 2, -1.05);
            }
            set(&mut theta, J_SPINE1, 2, -0.15);
            set(&mut theta, J_NECK1, 2, -0.10);
        }
        _ => {
            // rearing: body pitched up, forelegs tucked
            theta_g = [0.0, 0.0, -(0.75 + 0.05 * phase.sin())];
            for (sh, el, kn) in [(J_SHOULDER_FL, J_ELBOW_FL, J_KNEE_FL), (J_SHOULDER_FR, J_ELBOW_FR, J_KNEE_FR)] {
                set(&mut theta, sh, 2, -0.70);
                set(&mut theta, el, 2, 0.90);
                set(&mut theta, kn, 2, 0.60);
            }
            set(&mut theta, J_NECK1, 2, 0.20);
            set(&mut theta, J_TAIL1, 2, 0.30);
        }
    }
    for row in theta.iter_mut() {
        for v in row.iter_mut() {
            *v += rng.gen_range(-0.03..0.03);
        }
    }
    (theta_g, theta)
}

/// Write a pose library archive.
pub fn save_pose_library(path: &Path, poses: &[PoseEntry]) -> Result<()> {
    let n = poses.len();
    let mut arc = Archive::new(POSE_FORMAT);
    arc.insert_f64(
        "theta_G",
        vec![n, 3],
        poses.iter().flat_map(|p| p.theta_g).collect(),
    );
    arc.insert_f64(
        "theta_J",
        vec![n, N_POSE_JOINTS, 3],
        poses.iter().flat_map(|p| p.theta_j.into_iter().flatten()).collect(),
    );
    arc.insert_i64("pose_class", vec![n], poses.iter().map(|p| p.class_id as i64).collect());
    arc.meta.insert("class_names".into(), POSE_CLASS_NAMES.join(","));
    arc.write(path)
}

pub fn load_pose_library(path: &Path) -> Result<Vec<PoseEntry>> {
    let arc = Archive::read(path)?;
    arc.expect_format(POSE_FORMAT)?;
    let (gs, g) = arc.f64_array("theta_G", 2)?;
    let (js, j) = arc.f64_array("theta_J", 3)?;
    let (cs, c) = arc.i64_array("pose_class", 1)?;
    let n = gs[0];
    if gs != [n, 3] || js != [n, N_POSE_JOINTS, 3] || cs != [n] {
        return Err(Error::BadArray {
            name: "theta_J".into(),
            reason: "inconsistent pose library shapes".into(),
        });
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut theta_j = [[0.0; 3]; N_POSE_JOINTS];
        for (r, row) in theta_j.iter_mut().enumerate() {
            let o = (i * N_POSE_JOINTS + r) * 3;
            *row = [j[o], j[o + 1], j[o + 2]];
        }
        if c[i] < 0 || c[i] >= POSE_CLASS_NAMES.len() as i64 {
            return Err(Error::BadArray {
                name: "pose_class".into(),
                reason: format!("class {} out of range", c[i]),
            });
        }
        out.push(PoseEntry {
            pose_id: i as i64,
            class_id: c[i] as u8,
            theta_g: [g[i * 3], g[i * 3 + 1], g[i * 3 + 2]],
            theta_j,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Samples and annotations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VariedFactor {
    Appearance,
    Pose,
    GlobalRotation,
}

impl VariedFactor {
    pub const ALL: [VariedFactor; 3] =
        [VariedFactor::Appearance, VariedFactor::Pose, VariedFactor::GlobalRotation];
}

impl fmt::Display for VariedFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VariedFactor::Appearance => "APPEARANCE",
            VariedFactor::Pose => "POSE",
            VariedFactor::GlobalRotation => "GLOBAL_ROTATION",
        })
    }
}

impl FromStr for VariedFactor {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "APPEARANCE" => Ok(VariedFactor::Appearance),
            "POSE" => Ok(VariedFactor::Pose),
            "GLOBAL_ROTATION" => Ok(VariedFactor::GlobalRotation),
            other => Err(Error::Config(format!("unknown factor {other:?}"))),
        }
    }
}

/// Which discrete choices produced a sample. `rotation_tag` is the bit
/// pattern of the yaw draw, so equality is exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FactorIds {
    pub texture_id: i64,
    pub pose_id: i64,
    pub background_id: i64,
    pub rotation_tag: u64,
}

/// Background pixels source: an index into the background list, or a solid
/// fallback color.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BackgroundSpec {
    File(i64),
    Solid([f64; 3]),
}

impl BackgroundSpec {
    pub fn id(&self) -> i64 {
        match self {
            BackgroundSpec::File(i) => *i,
            BackgroundSpec::Solid(c) => {
                let mut h = 0xcbf29ce484222325u64;
                for v in c {
                    h ^= v.to_bits();
                    h = h.wrapping_mul(0x100000001b3);
                }
                (h >> 1) as i64
            }
        }
    }
}

/// Everything about a sample except pixels. Round-trips through text exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Annotation {
    pub beta: [f64; N_SHAPE],
    pub theta_g: [f64; 3],
    pub theta_j: [[f64; 3]; N_POSE_JOINTS],
    pub xi: [f64; 3],
    pub keypoints: [[f64; 2]; N_LANDMARKS],
    pub visibility: [f64; N_LANDMARKS],
    pub factors: FactorIds,
    pub background: BackgroundSpec,
}

impl Annotation {
    /// Posing state in the model frame. The stored translation belongs to
    /// the camera ([`Annotation::camera`]); applying it here as well would
    /// shift the mesh twice.
    pub fn state(&self) -> Result<PoseShapeState> {
        PoseShapeState::new(self.beta, self.theta_g, self.theta_j, [0.0; 3])
    }

    /// Camera whose derived translation equals `xi`.
    pub fn camera(&self) -> Result<CameraParams> {
        camera_from_xi(self.xi)
    }

    pub fn to_text(&self) -> String {
        let join = |vals: &[f64]| {
            vals.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
        };
        let mut s = String::new();
        s.push_str(&format!("beta={}\n", join(&self.beta)));
        s.push_str(&format!("theta_g={}\n", join(&self.theta_g)));
        let tj: Vec<f64> = self.theta_j.iter().flatten().copied().collect();
        s.push_str(&format!("theta_j={}\n", join(&tj)));
        s.push_str(&format!("xi={}\n", join(&self.xi)));
        let kp: Vec<f64> = self.keypoints.iter().flatten().copied().collect();
        s.push_str(&format!("keypoints={}\n", join(&kp)));
        s.push_str(&format!("visibility={}\n", join(&self.visibility)));
        s.push_str(&format!("texture_id={}\n", self.factors.texture_id));
        s.push_str(&format!("pose_id={}\n", self.factors.pose_id));
        match self.background {
            BackgroundSpec::File(i) => s.push_str(&format!("background=file {i}\n")),
            BackgroundSpec::Solid(c) => {
                s.push_str(&format!("background=solid {}\n", join(&c)))
            }
        }
        s.push_str(&format!("rotation_tag={}\n", self.factors.rotation_tag));
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Config(format!("annotation: {msg}"));
        let mut beta = None;
        let mut theta_g = None;
        let mut theta_j = None;
        let mut xi = None;
        let mut keypoints = None;
        let mut visibility = None;
        let mut texture_id = None;
        let mut pose_id = None;
        let mut background = None;
        let mut rotation_tag = None;

        fn floats<const N: usize>(v: &str) -> Result<[f64; N]> {
            let vals: Vec<f64> = v
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| Error::Config(format!("bad float {t:?}"))))
                .collect::<Result<_>>()?;
            vals.try_into().map_err(|_| Error::Config("wrong vector length".into()))
        }

        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, val) = line.split_once('=').ok_or_else(|| bad("missing '='"))?;
            match key {
                "beta" => beta = Some(floats::<N_SHAPE>(val)?),
                "theta_g" => theta_g = Some(floats::<3>(val)?),
                "theta_j" => {
                    let flat = floats::<105>(val)?;
                    let mut rows = [[0.0; 3]; N_POSE_JOINTS];
                    for (r, row) in rows.iter_mut().enumerate() {
                        *row = [flat[r * 3], flat[r * 3 + 1], flat[r * 3 + 2]];
                    }
                    theta_j = Some(rows);
                }
                "xi" => xi = Some(floats::<3>(val)?),
                "keypoints" => {
                    let flat = floats::<34>(val)?;
                    let mut rows = [[0.0; 2]; N_LANDMARKS];
                    for (r, row) in rows.iter_mut().enumerate() {
                        *row = [flat[r * 2], flat[r * 2 + 1]];
                    }
                    keypoints = Some(rows);
                }
                "visibility" => visibility = Some(floats::<N_LANDMARKS>(val)?),
                "texture_id" => {
                    texture_id = Some(val.parse::<i64>().map_err(|_| bad("bad texture_id"))?)
                }
                "pose_id" => pose_id = Some(val.parse::<i64>().map_err(|_| bad("bad pose_id"))?),
                "background" => {
                    background = Some(match val.split_once(' ') {
                        Some(("file", i)) => {
                            BackgroundSpec::File(i.trim().parse().map_err(|_| bad("bad background index"))?)
                        }
                        Some(("solid", c)) => BackgroundSpec::Solid(floats::<3>(c)?),
                        _ => return Err(bad("background must be 'file I' or 'solid R G B'")),
                    })
                }
                "rotation_tag" => {
                    rotation_tag = Some(val.parse::<u64>().map_err(|_| bad("bad rotation_tag"))?)
                }
                other => return Err(bad(&format!("unknown key {other:?}"))),
            }
        }
        let background = background.ok_or_else(|| bad("missing background"))?;
        let factors = FactorIds {
            texture_id: texture_id.ok_or_else(|| bad("missing texture_id"))?,
            pose_id: pose_id.ok_or_else(|| bad("missing pose_id"))?,
            background_id: background.id(),
            rotation_tag: rotation_tag.ok_or_else(|| bad("missing rotation_tag"))?,
        };
        Ok(Annotation {
            beta: beta.ok_or_else(|| bad("missing beta"))?,
            theta_g: theta_g.ok_or_else(|| bad("missing theta_g"))?,
            theta_j: theta_j.ok_or_else(|| bad("missing theta_j"))?,
            xi: xi.ok_or_else(|| bad("missing xi"))?,
            keypoints: keypoints.ok_or_else(|| bad("missing keypoints"))?,
            visibility: visibility.ok_or_else(|| bad("missing visibility"))?,
            factors,
            background,
        })
    }
}

/// Recover weak-perspective parameters from a derived translation.
pub fn camera_from_xi(xi: [f64; 3]) -> Result<CameraParams> {
    let f = crate::camera::DEFAULT_FOCAL;
    let r = crate::camera::DEFAULT_RESOLUTION;
    if !(xi[2].is_finite() && xi[2] > 0.0) {
        return Err(Error::InvalidCamera(format!("xi_z {} not positive", xi[2])));
    }
    CameraParams::new(2.0 * f / (r as f64 * xi[2]), xi[0], xi[1])
}

/// One rendered, annotated image.
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub image: ImageF,
    /// Hard silhouette at the render resolution.
    pub silhouette: Vec<bool>,
    pub silhouette_resolution: usize,
    pub ann: Annotation,
}

#[derive(Debug, Clone)]
pub struct PairSample {
    pub first: SyntheticSample,
    pub second: SyntheticSample,
    pub varied_factor: VariedFactor,
}

/// One stream element: a lone sample or a controlled-variation pair.
#[derive(Debug, Clone)]
pub enum StreamItem {
    Single(SyntheticSample),
    Pair(PairSample),
}

impl StreamItem {
    pub fn image_count(&self) -> usize {
        match self {
            StreamItem::Single(_) => 1,
            StreamItem::Pair(_) => 2,
        }
    }
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

/// APPEARANCE pairs vary texture and shape jointly by default; the split
/// sub-modes vary only one of the two.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AppearanceMode {
    #[default]
    Joint,
    TextureOnly,
    ShapeOnly,
}

/// Randomization ranges and render settings for sample generation.
#[derive(Debug, Clone)]
pub struct GenConfig {
    pub raster: RasterConfig,
    pub scale_range: (f64, f64),
    pub trans_range: f64,
    pub appearance_mode: AppearanceMode,
    /// Skip the color pass (silhouette and keypoints only); the stored image
    /// is the background. Annotation-only consumers run much faster.
    pub rgb: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            raster: RasterConfig::default(),
            scale_range: (0.6, 1.2),
            trans_range: 0.2,
            appearance_mode: AppearanceMode::Joint,
            rgb: true,
        }
    }
}

/// Clipped zero-mean Gaussian shape draw.
pub fn sample_shape(rng: &mut impl Rng, sampler: &ShapeSampler) -> [f64; N_SHAPE] {
    std::array::from_fn(|k| {
        let s = sampler.std[k];
        if s <= 0.0 {
            return 0.0;
        }
        let n = Normal::new(0.0, s).expect("finite std");
        n.sample(rng).clamp(-sampler.clip, sampler.clip)
    })
}

/// Raw random choices before rendering.
#[derive(Debug, Clone)]
struct SampleDraw {
    texture_id: usize,
    pose_id: usize,
    background: BackgroundSpec,
    beta: [f64; N_SHAPE],
    cam: CameraParams,
    yaw: f64,
    /// For POSE pairs: the composed global rotation copied from the first
    /// element, so only theta_J varies.
    theta_g_override: Option<[f64; 3]>,
}

fn draw_fields(rng: &mut ChaCha8Rng, sets: &AssetSets, gen: &GenConfig) -> Result<SampleDraw> {
    let texture_id = rng.gen_range(0..sets.textures.len());
    let pose_id = rng.gen_range(0..sets.poses.len());
    let background = if sets.backgrounds.is_empty() {
        BackgroundSpec::Solid(std::array::from_fn(|_| rng.gen_range(0.0..1.0)))
    } else {
        BackgroundSpec::File(rng.gen_range(0..sets.backgrounds.len()) as i64)
    };
    let beta = sample_shape(rng, &sets.shape_sampler);
    let s = rng.gen_range(gen.scale_range.0..=gen.scale_range.1);
    let tx = rng.gen_range(-gen.trans_range..=gen.trans_range);
    let ty = rng.gen_range(-gen.trans_range..=gen.trans_range);
    let yaw = rng.gen_range(0.0..std::f64::consts::TAU);
    Ok(SampleDraw {
        texture_id,
        pose_id,
        background,
        beta,
        cam: CameraParams::new(s, tx, ty)?,
        yaw,
        theta_g_override: None,
    })
}

/// Compose an upright-axis yaw with a stored global rotation.
pub fn compose_yaw(theta_g: [f64; 3], yaw: f64) -> [f64; 3] {
    let r = Rotation3::from_axis_angle(&Vector3::y_axis(), yaw)
        * Rotation3::from_scaled_axis(Vector3::from(theta_g));
    let v = r.scaled_axis();
    [v[0], v[1], v[2]]
}

fn load_background(spec: &BackgroundSpec, sets: &AssetSets, resolution: usize) -> Result<ImageF> {
    match spec {
        BackgroundSpec::Solid(c) => Ok(ImageF::solid(*c, resolution, resolution)),
        BackgroundSpec::File(i) => {
            let path = sets
                .backgrounds
                .get(*i as usize)
                .ok_or_else(|| Error::Config(format!("background index {i} out of range")))?;
            Ok(ImageF::load(path)?.resized(resolution, resolution))
        }
    }
}

fn realize(draw: &SampleDraw, sets: &AssetSets, assets: &ModelAssets, gen: &GenConfig) -> Result<SyntheticSample> {
    let pose = &sets.poses[draw.pose_id];
    let theta_g = draw.theta_g_override.unwrap_or_else(|| compose_yaw(pose.theta_g, draw.yaw));
    let xi = draw.cam.derive_translation()?;
    // Vertices stay in the model frame; projection applies the camera
    // translation, so posing with `xi` here would translate twice.
    let state = PoseShapeState::new(draw.beta, theta_g, pose.theta_j, [0.0; 3])?;
    let verts = pose_mesh(assets, &state);

    let r = gen.raster.resolution as usize;
    let background = load_background(&draw.background, sets, r)?;
    let (silhouette_soft, image) = if gen.rgb {
        let out = render_rgb(
            &verts,
            &assets.faces,
            &assets.uv_coords,
            &sets.textures[draw.texture_id].image,
            &background,
            &draw.cam,
            &gen.raster,
        )?;
        let rgb = out.rgb.expect("rgb pass requested");
        (out.silhouette, ImageF { w: r, h: r, data: rgb })
    } else {
        let sil = crate::renderer::render_silhouette(&verts, &assets.faces, &draw.cam, &gen.raster)?;
        (sil, background)
    };
    let silhouette = hard_mask(&silhouette_soft);
    if !silhouette.iter().any(|&b| b) {
        return Err(Error::Degenerate("empty silhouette".into()));
    }

    let (keypoints, mut visibility) = visible_landmarks(
        &verts,
        &assets.faces,
        &assets.landmark_vertex_ids,
        &draw.cam,
        &gen.raster,
    )?;
    // Keep the sample contract: a visible keypoint lies inside the frame.
    let frame = draw.cam.r as f64;
    for (v, p) in visibility.iter_mut().zip(&keypoints) {
        if !(p[0] >= 0.0 && p[0] < frame && p[1] >= 0.0 && p[1] < frame) {
            *v = 0.0;
        }
    }
    debug_assert_eq!(keypoints, {
        let lm = landmarks_3d(assets, &verts);
        crate::camera::project(&lm, &draw.cam)?
    });

    let ann = Annotation {
        beta: draw.beta,
        theta_g,
        theta_j: pose.theta_j,
        xi,
        keypoints: keypoints.try_into().expect("17 landmarks"),
        visibility: visibility.try_into().expect("17 landmarks"),
        factors: FactorIds {
            texture_id: draw.texture_id as i64,
            pose_id: draw.pose_id as i64,
            background_id: draw.background.id(),
            rotation_tag: draw.yaw.to_bits(),
        },
        background: draw.background,
    };
    Ok(SyntheticSample { image, silhouette, silhouette_resolution: r, ann })
}

const MAX_RESAMPLES: usize = 10;

fn is_degenerate(e: &Error) -> bool {
    matches!(e, Error::Degenerate(_))
}

fn draw_single(
    rng: &mut ChaCha8Rng,
    sets: &AssetSets,
    assets: &ModelAssets,
    gen: &GenConfig,
) -> Result<(SampleDraw, SyntheticSample)> {
    let mut last = None;
    for _ in 0..=MAX_RESAMPLES {
        let draw = draw_fields(rng, sets, gen)?;
        match realize(&draw, sets, assets, gen) {
            Ok(s) => return Ok((draw, s)),
            Err(e) if is_degenerate(&e) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::Degenerate("no sample drawn".into())))
}

/// Render one annotated sample from fresh draws.
pub fn sample_single(
    rng: &mut ChaCha8Rng,
    sets: &AssetSets,
    assets: &ModelAssets,
    gen: &GenConfig,
) -> Result<SyntheticSample> {
    sets.validate()?;
    draw_single(rng, sets, assets, gen).map(|(_, s)| s)
}

/// Render a pair differing in exactly the requested factor. The base sample's
/// remaining choices (including the background and camera) are copied
/// field-for-field into the second element.
pub fn sample_pair(
    rng: &mut ChaCha8Rng,
    sets: &AssetSets,
    assets: &ModelAssets,
    gen: &GenConfig,
    factor: VariedFactor,
) -> Result<PairSample> {
    sets.validate()?;
    let (base_draw, first) = draw_single(rng, sets, assets, gen)?;

    let mut last = None;
    for _ in 0..=MAX_RESAMPLES {
        let mut draw = base_draw.clone();
        match factor {
            VariedFactor::Appearance => {
                if gen.appearance_mode != AppearanceMode::ShapeOnly {
                    loop {
                        draw.texture_id = rng.gen_range(0..sets.textures.len());
                        if draw.texture_id != base_draw.texture_id {
                            break;
                        }
                    }
                }
                if gen.appearance_mode != AppearanceMode::TextureOnly {
                    draw.beta = sample_shape(rng, &sets.shape_sampler);
                }
            }
            VariedFactor::Pose => {
                loop {
                    draw.pose_id = rng.gen_range(0..sets.poses.len());
                    if draw.pose_id != base_draw.pose_id {
                        break;
                    }
                }
                draw.theta_g_override = Some(first.ann.theta_g);
            }
            VariedFactor::GlobalRotation => loop {
                draw.yaw = rng.gen_range(0.0..std::f64::consts::TAU);
                if draw.yaw.to_bits() != base_draw.yaw.to_bits() {
                    break;
                }
            },
        }
        match realize(&draw, sets, assets, gen) {
            Ok(second) => {
                return Ok(PairSample { first, second, varied_factor: factor });
            }
            Err(e) if is_degenerate(&e) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.unwrap_or_else(|| Error::Degenerate("no pair drawn".into())))
}

// ---------------------------------------------------------------------------
// Deterministic epoch streams
// ---------------------------------------------------------------------------

fn mix64(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Independent random stream for item `index`.
pub fn index_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix64(seed, index))
}

/// Index-addressable plan for one epoch: which items are pairs, which factor
/// each pair varies, and the item count. `pair_fraction` is the fraction of
/// rendered images that belong to pairs, held exactly in integer arithmetic.
#[derive(Debug, Clone)]
pub struct EpochPlan {
    pub seed: u64,
    pub n_items: usize,
    q_num: u128,
    q_den: u128,
}

const FRACTION_DENOM: u128 = 1_000_000_000;

impl EpochPlan {
    pub fn new(seed: u64, n_items: usize, pair_fraction: f64) -> Result<Self> {
        if n_items == 0 {
            return Err(Error::Config("n_samples must be positive".into()));
        }
        if !(0.0..=1.0).contains(&pair_fraction) {
            return Err(Error::Config(format!("pair_fraction {pair_fraction} outside [0,1]")));
        }
        // Image fraction p maps to item fraction q = p / (2 - p).
        let p = (pair_fraction * FRACTION_DENOM as f64).round() as u128;
        Ok(EpochPlan { seed, n_items, q_num: p, q_den: 2 * FRACTION_DENOM - p })
    }

    pub fn len(&self) -> usize {
        self.n_items
    }

    pub fn is_empty(&self) -> bool {
        self.n_items == 0
    }

    fn pairs_before(&self, i: usize) -> u128 {
        (i as u128 * self.q_num) / self.q_den
    }

    pub fn is_pair(&self, i: usize) -> bool {
        self.pairs_before(i + 1) > self.pairs_before(i)
    }

    /// Pairs cycle APPEARANCE, POSE, GLOBAL_ROTATION.
    pub fn factor_for(&self, i: usize) -> VariedFactor {
        VariedFactor::ALL[(self.pairs_before(i) % 3) as usize]
    }

    /// Images produced by items before `i`.
    pub fn images_before(&self, i: usize) -> usize {
        i + self.pairs_before(i) as usize
    }

    /// Generate item `i`; depends only on `(seed, i)` and the assets.
    pub fn item(
        &self,
        i: usize,
        sets: &AssetSets,
        assets: &ModelAssets,
        gen: &GenConfig,
    ) -> Result<StreamItem> {
        let mut rng = index_rng(self.seed, i as u64);
        if self.is_pair(i) {
            Ok(StreamItem::Pair(sample_pair(&mut rng, sets, assets, gen, self.factor_for(i))?))
        } else {
            Ok(StreamItem::Single(sample_single(&mut rng, sets, assets, gen)?))
        }
    }
}

/// Ordered stream of `n_samples` items for one epoch.
pub fn epoch_stream<'a>(
    seed: u64,
    n_samples: usize,
    pair_fraction: f64,
    sets: &'a AssetSets,
    assets: &'a ModelAssets,
    gen: &'a GenConfig,
) -> Result<impl Iterator<Item = Result<StreamItem>> + 'a> {
    sets.validate()?;
    let plan = EpochPlan::new(seed, n_samples, pair_fraction)?;
    Ok((0..n_samples).map(move |i| plan.item(i, sets, assets, gen)))
}

// ---------------------------------------------------------------------------
// Dataset directories
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetReport {
    pub images: usize,
    pub singles: usize,
    pub pairs: usize,
    /// Pair counts per factor, ordered as [`VariedFactor::ALL`].
    pub factor_histogram: [usize; 3],
}

fn write_sample(dir: &Path, id: usize, s: &SyntheticSample) -> Result<()> {
    let name = format!("{id:06}");
    s.image.save(&dir.join("images").join(format!("{name}.png")))?;
    let r = s.silhouette_resolution;
    let gray: Vec<u8> = s.silhouette.iter().map(|&b| if b { 255 } else { 0 }).collect();
    let mask = image::GrayImage::from_raw(r as u32, r as u32, gray)
        .expect("mask buffer matches resolution");
    mask.save(dir.join("masks").join(format!("{name}.png")))?;
    std::fs::write(dir.join("annotations").join(name), s.ann.to_text())?;
    Ok(())
}

/// Write `n_images` rendered images plus masks, annotations, and a pair
/// index under `dir`. A pair occupies two consecutive ids; if the image
/// budget ends mid-plan on a pair, its base sample is written alone.
pub fn write_dataset(
    dir: &Path,
    seed: u64,
    n_images: usize,
    pair_fraction: f64,
    sets: &AssetSets,
    assets: &ModelAssets,
    gen: &GenConfig,
) -> Result<DatasetReport> {
    if n_images == 0 {
        return Err(Error::Config("n_images must be positive".into()));
    }
    sets.validate()?;
    for sub in ["images", "masks", "annotations"] {
        std::fs::create_dir_all(dir.join(sub))?;
    }
    let plan = EpochPlan::new(seed, n_images, pair_fraction)?;
    let mut report = DatasetReport { images: 0, singles: 0, pairs: 0, factor_histogram: [0; 3] };
    let mut pair_lines = String::new();
    let mut i = 0usize;
    while report.images < n_images {
        let mut rng = index_rng(seed, i as u64);
        if plan.is_pair(i) && report.images + 2 <= n_images {
            let factor = plan.factor_for(i);
            let pair = sample_pair(&mut rng, sets, assets, gen, factor)?;
            let first_id = report.images;
            write_sample(dir, first_id, &pair.first)?;
            write_sample(dir, first_id + 1, &pair.second)?;
            pair_lines.push_str(&format!("{:06},{:06},{}\n", first_id, first_id + 1, factor));
            report.images += 2;
            report.pairs += 1;
            let fi = VariedFactor::ALL.iter().position(|f| *f == factor).unwrap();
            report.factor_histogram[fi] += 1;
        } else {
            let s = sample_single(&mut rng, sets, assets, gen)?;
            write_sample(dir, report.images, &s)?;
            report.images += 1;
            report.singles += 1;
        }
        i += 1;
    }
    std::fs::write(dir.join("pairs.index"), pair_lines)?;
    Ok(report)
}

/// Re-render the silhouette and keypoints stored in an annotation.
pub fn render_from_annotation(
    ann: &Annotation,
    assets: &ModelAssets,
    raster: &RasterConfig,
) -> Result<(Vec<bool>, Vec<[f64; 2]>, Vec<f64>)> {
    let state = ann.state()?;
    let cam = ann.camera()?;
    let verts = pose_mesh(assets, &state);
    let sil = crate::renderer::render_silhouette(&verts, &assets.faces, &cam, raster)?;
    let (kps, vis) =
        visible_landmarks(&verts, &assets.faces, &assets.landmark_vertex_ids, &cam, raster)?;
    Ok((hard_mask(&sil), kps, vis))
}
