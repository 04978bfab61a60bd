//! Parametric articulated quadruped: blendshapes, kinematic tree, linear
//! blend skinning, landmark extraction, asset IO, and a procedural stand-in.
//!
//! Two evaluation paths share one asset set: plain `f64` functions
//! ([`pose_mesh`], [`forward_kinematics`]) for generation and oracles, and a
//! tensor path ([`BodyModel`]) used wherever gradients are needed. Both follow
//! the same convention: joints are regressed from the shaped (unposed) mesh,
//! each joint rotates about its shaped-space location, and the global
//! translation is added last.
//!
//! Coordinates: x points from tail to nose, y points down (matching image
//! rows), z completes the right-handed frame. The camera looks along +z.

use candle_core::{DType as CDType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

use crate::archive::{Archive, ArrayData};
use crate::error::{Error, Result};

pub const N_JOINTS: usize = 36;
pub const N_SHAPE: usize = 9;
pub const N_LANDMARKS: usize = 17;
/// Flat parameter count: beta 9 + theta_G 3 + theta_J 105 + xi 3.
pub const N_PARAMS: usize = 120;

pub const ASSET_FORMAT: &str = "dessie-assets/1";

/// Joint names in tree order (parent index always less than child index).
pub const JOINT_NAMES: [&str; N_JOINTS] = [
    "pelvis", "spine1", "spine2", "spine3", "withers", "neck1", "neck2", "head", "head_top",
    "nose", "jaw", "ear_l", "ear_r", "shoulder_l", "elbow_l", "knee_fl", "hoof_fl", "shoulder_r",
    "elbow_r", "knee_fr", "hoof_fr", "hip_l", "stifle_l", "hock_l", "hoof_bl", "hip_r",
    "stifle_r", "hock_r", "hoof_br", "tail1", "tail2", "tail3", "tail4", "tail5", "tail6",
    "tail7",
];

pub const PARENT: [i64; N_JOINTS] = [
    -1, 0, 1, 2, 3, 4, 5, 6, 7, 7, 7, 8, 8, 4, 13, 14, 15, 4, 17, 18, 19, 0, 21, 22, 23, 0, 25,
    26, 27, 0, 29, 30, 31, 32, 33, 34,
];

/// Landmark names in annotation order.
pub const LANDMARK_NAMES: [&str; N_LANDMARKS] = [
    "nose", "ear_l", "ear_r", "withers", "tail_base", "shoulder_l", "shoulder_r", "hip_l",
    "hip_r", "knee_fl", "knee_fr", "knee_bl", "knee_br", "hoof_fl", "hoof_fr", "hoof_bl",
    "hoof_br",
];

/// Joint each landmark is anchored to.
const LANDMARK_JOINTS: [usize; N_LANDMARKS] = [9, 11, 12, 4, 29, 13, 17, 21, 25, 15, 19, 23, 27, 16, 20, 24, 28];

/// Template mesh plus everything needed to shape, pose, and annotate it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelAssets {
    /// `[Nv][3]` rest vertices.
    pub template_vertices: Vec<[f64; 3]>,
    /// `[Nf][3]` vertex indices.
    pub faces: Vec<[u32; 3]>,
    /// `[9 * Nv * 3]` row-major blendshape displacements.
    pub shape_basis: Vec<f64>,
    /// `[36 * Nv]` row-stochastic regressor from shaped vertices to joints.
    pub joint_regressor: Vec<f64>,
    /// `[Nv * 36]` row-stochastic skinning weights.
    pub skin_weights: Vec<f64>,
    /// `parent[0] = -1`; `parent[j] < j` otherwise.
    pub parent: [i64; N_JOINTS],
    pub landmark_vertex_ids: [usize; N_LANDMARKS],
    /// `[Nv][2]` in `[0,1]`.
    pub uv_coords: Vec<[f64; 2]>,
}

impl ModelAssets {
    pub fn nv(&self) -> usize {
        self.template_vertices.len()
    }

    pub fn nf(&self) -> usize {
        self.faces.len()
    }

    pub fn validate(&self) -> Result<()> {
        let nv = self.nv();
        let bad = |field: &'static str, reason: String| Err(Error::InvalidAssets { field, reason });
        if nv == 0 {
            return bad("template_vertices", "empty".into());
        }
        if self.template_vertices.iter().flatten().any(|x| !x.is_finite()) {
            return bad("template_vertices", "non-finite entry".into());
        }
        for (i, f) in self.faces.iter().enumerate() {
            if f.iter().any(|&v| v as usize >= nv) {
                return bad("faces", format!("face {i} references vertex out of range"));
            }
        }
        if self.shape_basis.len() != N_SHAPE * nv * 3 {
            return bad(
                "shape_basis",
                format!("expected {} entries, found {}", N_SHAPE * nv * 3, self.shape_basis.len()),
            );
        }
        if self.shape_basis.iter().any(|x| !x.is_finite()) {
            return bad("shape_basis", "non-finite entry".into());
        }
        if self.joint_regressor.len() != N_JOINTS * nv {
            return bad(
                "joint_regressor",
                format!("expected {} entries, found {}", N_JOINTS * nv, self.joint_regressor.len()),
            );
        }
        for j in 0..N_JOINTS {
            let row = &self.joint_regressor[j * nv..(j + 1) * nv];
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return bad("joint_regressor", format!("row {j} sums to {s}, expected 1"));
            }
        }
        if self.skin_weights.len() != nv * N_JOINTS {
            return bad(
                "skin_weights",
                format!("expected {} entries, found {}", nv * N_JOINTS, self.skin_weights.len()),
            );
        }
        for v in 0..nv {
            let row = &self.skin_weights[v * N_JOINTS..(v + 1) * N_JOINTS];
            if row.iter().any(|&w| w < 0.0) {
                return bad("skin_weights", format!("row {v} has a negative weight"));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return bad("skin_weights", format!("row {v} sums to {s}, expected 1"));
            }
        }
        if self.parent[0] != -1 {
            return bad("parent", format!("parent[0] = {}, expected -1", self.parent[0]));
        }
        for j in 1..N_JOINTS {
            if self.parent[j] < 0 || self.parent[j] as usize >= j {
                return bad("parent", format!("parent[{j}] = {} breaks topological order", self.parent[j]));
            }
        }
        for (i, &id) in self.landmark_vertex_ids.iter().enumerate() {
            if id >= nv {
                return bad("landmark_vertex_ids", format!("landmark {i} index {id} out of range"));
            }
        }
        let mut sorted = self.landmark_vertex_ids;
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return bad("landmark_vertex_ids", "landmark vertex ids are not distinct".into());
        }
        if self.uv_coords.len() != nv {
            return bad("uv_coords", format!("expected {nv} rows, found {}", self.uv_coords.len()));
        }
        if self.uv_coords.iter().flatten().any(|&x| !(0.0..=1.0).contains(&x)) {
            return bad("uv_coords", "entry outside [0,1]".into());
        }
        Ok(())
    }

    /// Blendshape slice for mode `k`, as `[Nv][3]` displacements.
    pub fn basis_mode(&self, k: usize) -> &[f64] {
        let nv3 = self.nv() * 3;
        &self.shape_basis[k * nv3..(k + 1) * nv3]
    }

    pub fn to_archive(&self) -> Archive {
        let nv = self.nv();
        let mut arc = Archive::new(ASSET_FORMAT);
        arc.meta.insert("joint_names".into(), JOINT_NAMES.join(","));
        arc.meta.insert("landmark_names".into(), LANDMARK_NAMES.join(","));
        arc.insert_f64(
            "template_vertices",
            vec![nv, 3],
            self.template_vertices.iter().flatten().copied().collect(),
        );
        arc.insert_u32(
            "faces",
            vec![self.nf(), 3],
            self.faces.iter().flatten().copied().collect(),
        );
        arc.insert_f64("shape_basis", vec![N_SHAPE, nv, 3], self.shape_basis.clone());
        arc.insert_f64("joint_regressor", vec![N_JOINTS, nv], self.joint_regressor.clone());
        arc.insert_f64("skin_weights", vec![nv, N_JOINTS], self.skin_weights.clone());
        arc.insert_i64("parent", vec![N_JOINTS], self.parent.to_vec());
        arc.insert_i64(
            "landmark_vertex_ids",
            vec![N_LANDMARKS],
            self.landmark_vertex_ids.iter().map(|&i| i as i64).collect(),
        );
        arc.insert_f64(
            "uv_coords",
            vec![nv, 2],
            self.uv_coords.iter().flatten().copied().collect(),
        );
        arc
    }

    pub fn from_archive(arc: &Archive) -> Result<Self> {
        arc.expect_format(ASSET_FORMAT)?;
        let (vshape, vdata) = arc.f64_array("template_vertices", 2)?;
        let nv = vshape[0];
        if vshape[1] != 3 {
            return Err(Error::BadArray {
                name: "template_vertices".into(),
                reason: format!("expected [Nv,3], found {vshape:?}"),
            });
        }
        let template_vertices: Vec<[f64; 3]> =
            vdata.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();

        let faces_arr = arc.get("faces")?;
        if faces_arr.shape.len() != 2 || faces_arr.shape[1] != 3 {
            return Err(Error::BadArray {
                name: "faces".into(),
                reason: format!("expected [Nf,3], found {:?}", faces_arr.shape),
            });
        }
        let faces: Vec<[u32; 3]> = match &faces_arr.data {
            ArrayData::U32(v) => v.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
            ArrayData::I64(v) => v
                .chunks_exact(3)
                .map(|c| [c[0] as u32, c[1] as u32, c[2] as u32])
                .collect(),
            other => {
                return Err(Error::BadArray {
                    name: "faces".into(),
                    reason: format!("expected integer dtype, found {other:?}"),
                })
            }
        };

        let (bshape, bdata) = arc.f64_array("shape_basis", 3)?;
        if bshape != [N_SHAPE, nv, 3] {
            return Err(Error::BadArray {
                name: "shape_basis".into(),
                reason: format!("expected [{N_SHAPE},{nv},3], found {bshape:?}"),
            });
        }
        let (rshape, rdata) = arc.f64_array("joint_regressor", 2)?;
        if rshape != [N_JOINTS, nv] {
            return Err(Error::BadArray {
                name: "joint_regressor".into(),
                reason: format!("expected [{N_JOINTS},{nv}], found {rshape:?}"),
            });
        }
        let (wshape, wdata) = arc.f64_array("skin_weights", 2)?;
        if wshape != [nv, N_JOINTS] {
            return Err(Error::BadArray {
                name: "skin_weights".into(),
                reason: format!("expected [{nv},{N_JOINTS}], found {wshape:?}"),
            });
        }
        let (_, pdata) = arc.i64_array("parent", 1)?;
        if pdata.len() != N_JOINTS {
            return Err(Error::BadArray {
                name: "parent".into(),
                reason: format!("expected {N_JOINTS} entries, found {}", pdata.len()),
            });
        }
        let mut parent = [0i64; N_JOINTS];
        parent.copy_from_slice(pdata);
        let (_, ldata) = arc.i64_array("landmark_vertex_ids", 1)?;
        if ldata.len() != N_LANDMARKS {
            return Err(Error::BadArray {
                name: "landmark_vertex_ids".into(),
                reason: format!("expected {N_LANDMARKS} entries, found {}", ldata.len()),
            });
        }
        let mut landmark_vertex_ids = [0usize; N_LANDMARKS];
        for (dst, &src) in landmark_vertex_ids.iter_mut().zip(ldata) {
            if src < 0 {
                return Err(Error::BadArray {
                    name: "landmark_vertex_ids".into(),
                    reason: "negative vertex index".into(),
                });
            }
            *dst = src as usize;
        }
        let (ushape, udata) = arc.f64_array("uv_coords", 2)?;
        if ushape != [nv, 2] {
            return Err(Error::BadArray {
                name: "uv_coords".into(),
                reason: format!("expected [{nv},2], found {ushape:?}"),
            });
        }
        let assets = ModelAssets {
            template_vertices,
            faces,
            shape_basis: bdata.to_vec(),
            joint_regressor: rdata.to_vec(),
            skin_weights: wdata.to_vec(),
            parent,
            landmark_vertex_ids,
            uv_coords: udata.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
        };
        assets.validate()?;
        Ok(assets)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(&Archive::read(path)?)
    }
}

/// Model parameters: shape coefficients, global and per-joint rotations
/// (axis-angle), and global translation.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseShapeState {
    pub beta: [f64; N_SHAPE],
    pub theta_g: [f64; 3],
    pub theta_j: [[f64; 3]; N_JOINTS - 1],
    pub xi: [f64; 3],
}

impl PoseShapeState {
    pub fn new(
        beta: [f64; N_SHAPE],
        theta_g: [f64; 3],
        theta_j: [[f64; 3]; N_JOINTS - 1],
        xi: [f64; 3],
    ) -> Result<Self> {
        let state = PoseShapeState { beta, theta_g, theta_j, xi };
        state.check()?;
        Ok(state)
    }

    pub fn rest() -> Self {
        PoseShapeState {
            beta: [0.0; N_SHAPE],
            theta_g: [0.0; 3],
            theta_j: [[0.0; 3]; N_JOINTS - 1],
            xi: [0.0; 3],
        }
    }

    pub fn check(&self) -> Result<()> {
        let all = self
            .beta
            .iter()
            .chain(self.theta_g.iter())
            .chain(self.theta_j.iter().flatten())
            .chain(self.xi.iter());
        for x in all {
            if !x.is_finite() {
                return Err(Error::InvalidState("non-finite parameter".into()));
            }
        }
        let two_pi = 2.0 * std::f64::consts::PI;
        for (j, row) in std::iter::once(&self.theta_g).chain(self.theta_j.iter()).enumerate() {
            let mag = (row[0] * row[0] + row[1] * row[1] + row[2] * row[2]).sqrt();
            if mag >= two_pi {
                return Err(Error::InvalidState(format!(
                    "axis-angle magnitude {mag} for joint {j} is not below 2*pi",
                )));
            }
        }
        Ok(())
    }

    /// All 36 axis-angle rows, global rotation first.
    pub fn theta_rows(&self) -> [[f64; 3]; N_JOINTS] {
        let mut rows = [[0.0; 3]; N_JOINTS];
        rows[0] = self.theta_g;
        rows[1..].copy_from_slice(&self.theta_j);
        rows
    }

    /// Flat 120-entry layout: beta, theta_G, theta_J, xi.
    pub fn to_flat(&self) -> [f64; N_PARAMS] {
        let mut out = [0.0; N_PARAMS];
        out[..9].copy_from_slice(&self.beta);
        out[9..12].copy_from_slice(&self.theta_g);
        for (j, row) in self.theta_j.iter().enumerate() {
            out[12 + 3 * j..15 + 3 * j].copy_from_slice(row);
        }
        out[117..].copy_from_slice(&self.xi);
        out
    }

    pub fn from_flat(flat: &[f64; N_PARAMS]) -> Self {
        let mut state = PoseShapeState::rest();
        state.beta.copy_from_slice(&flat[..9]);
        state.theta_g.copy_from_slice(&flat[9..12]);
        for (j, row) in state.theta_j.iter_mut().enumerate() {
            row.copy_from_slice(&flat[12 + 3 * j..15 + 3 * j]);
        }
        state.xi.copy_from_slice(&flat[117..]);
        state
    }
}

/// Rotation matrix of an (unnormalized) axis-angle vector.
///
/// Uses the sinc form `I + sin(t)/t K + (1-cos t)/t^2 K^2` with
/// `t = sqrt(|aa|^2 + 1e-32)`, exact at zero and smooth everywhere, so
/// finite-difference probes across the origin stay well behaved.
pub fn rodrigues(aa: [f64; 3]) -> [[f64; 3]; 3] {
    let t2 = aa[0] * aa[0] + aa[1] * aa[1] + aa[2] * aa[2] + 1e-32;
    let t = t2.sqrt();
    let c1 = t.sin() / t;
    let c2 = (1.0 - t.cos()) / t2;
    let (x, y, z) = (aa[0], aa[1], aa[2]);
    let k = [[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]];
    let mut k2 = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            k2[i][j] = (0..3).map(|m| k[i][m] * k[m][j]).sum();
        }
    }
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = (i == j) as u8 as f64 + c1 * k[i][j] + c2 * k2[i][j];
        }
    }
    r
}

fn mat4_mul(a: &[[f64; 4]; 4], b: &[[f64; 4]; 4]) -> [[f64; 4]; 4] {
    let mut out = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            out[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn mat4_rt(r: &[[f64; 3]; 3], t: [f64; 3]) -> [[f64; 4]; 4] {
    [
        [r[0][0], r[0][1], r[0][2], t[0]],
        [r[1][0], r[1][1], r[1][2], t[1]],
        [r[2][0], r[2][1], r[2][2], t[2]],
        [0.0, 0.0, 0.0, 1.0],
    ]
}

/// Joints regressed from shaped vertices.
pub fn regress_joints(assets: &ModelAssets, shaped: &[[f64; 3]]) -> [[f64; 3]; N_JOINTS] {
    let nv = assets.nv();
    let mut joints = [[0.0; 3]; N_JOINTS];
    for j in 0..N_JOINTS {
        let row = &assets.joint_regressor[j * nv..(j + 1) * nv];
        for (w, v) in row.iter().zip(shaped) {
            joints[j][0] += w * v[0];
            joints[j][1] += w * v[1];
            joints[j][2] += w * v[2];
        }
    }
    joints
}

/// Template plus the blendshape combination selected by `beta`.
pub fn apply_shape(assets: &ModelAssets, beta: &[f64; N_SHAPE]) -> Vec<[f64; 3]> {
    let nv = assets.nv();
    let mut out = assets.template_vertices.clone();
    for (k, &b) in beta.iter().enumerate() {
        if b == 0.0 {
            continue;
        }
        let mode = assets.basis_mode(k);
        for (v, d) in out.iter_mut().zip(mode.chunks_exact(3)) {
            v[0] += b * d[0];
            v[1] += b * d[1];
            v[2] += b * d[2];
        }
    }
    debug_assert_eq!(out.len(), nv);
    out
}

/// World transform per joint (kinematic chain only; no global translation)
/// plus final joint positions with the translation applied.
pub fn forward_kinematics(
    assets: &ModelAssets,
    state: &PoseShapeState,
) -> ([[f64; 3]; N_JOINTS], [[[f64; 4]; 4]; N_JOINTS]) {
    let shaped = apply_shape(assets, &state.beta);
    let rest_joints = regress_joints(assets, &shaped);
    let theta = state.theta_rows();

    let mut world = [[[0.0; 4]; 4]; N_JOINTS];
    world[0] = mat4_rt(&rodrigues(theta[0]), rest_joints[0]);
    for j in 1..N_JOINTS {
        let p = assets.parent[j] as usize;
        let t = [
            rest_joints[j][0] - rest_joints[p][0],
            rest_joints[j][1] - rest_joints[p][1],
            rest_joints[j][2] - rest_joints[p][2],
        ];
        let local = mat4_rt(&rodrigues(theta[j]), t);
        world[j] = mat4_mul(&world[p], &local);
    }
    let mut joints = [[0.0; 3]; N_JOINTS];
    for j in 0..N_JOINTS {
        joints[j] = [
            world[j][0][3] + state.xi[0],
            world[j][1][3] + state.xi[1],
            world[j][2][3] + state.xi[2],
        ];
    }
    (joints, world)
}

/// Linear-blend-skinned vertices for the given parameters.
pub fn pose_mesh(assets: &ModelAssets, state: &PoseShapeState) -> Vec<[f64; 3]> {
    let shaped = apply_shape(assets, &state.beta);
    let rest_joints = regress_joints(assets, &shaped);
    let (_, world) = forward_kinematics(assets, state);

    // Skinning transform: world transform re-anchored so the rest pose maps
    // to itself (rotation about the shaped-space joint location).
    let mut skin = [[[0.0; 4]; 4]; N_JOINTS];
    for j in 0..N_JOINTS {
        let mut m = world[j];
        for i in 0..3 {
            m[i][3] -= m[i][0] * rest_joints[j][0]
                + m[i][1] * rest_joints[j][1]
                + m[i][2] * rest_joints[j][2];
        }
        skin[j] = m;
    }

    let mut out = Vec::with_capacity(shaped.len());
    for (vi, v) in shaped.iter().enumerate() {
        let weights = &assets.skin_weights[vi * N_JOINTS..(vi + 1) * N_JOINTS];
        let mut acc = [0.0; 3];
        for (j, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let m = &skin[j];
            for i in 0..3 {
                acc[i] += w * (m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2] + m[i][3]);
            }
        }
        out.push([acc[0] + state.xi[0], acc[1] + state.xi[1], acc[2] + state.xi[2]]);
    }
    out
}

/// Rows of `vertices` selected by the landmark bindings.
pub fn landmarks_3d(assets: &ModelAssets, vertices: &[[f64; 3]]) -> [[f64; 3]; N_LANDMARKS] {
    let mut out = [[0.0; 3]; N_LANDMARKS];
    for (row, &id) in out.iter_mut().zip(&assets.landmark_vertex_ids) {
        *row = vertices[id];
    }
    out
}

// ---------------------------------------------------------------------------
// Tensor path
// ---------------------------------------------------------------------------

/// Asset tensors on a device, with batched differentiable shaping and posing.
pub struct BodyModel {
    pub template: Tensor,        // [Nv,3]
    pub shape_basis: Tensor,     // [9, Nv*3]
    pub joint_regressor: Tensor, // [36, Nv]
    pub skin_weights: Tensor,    // [Nv, 36]
    pub landmark_ids: Tensor,    // [17] u32
    pub parent: [i64; N_JOINTS],
    pub faces: Vec<[u32; 3]>,
    pub device: Device,
    pub dtype: CDType,
    nv: usize,
}

/// Batched posing output.
pub struct PosedMesh {
    /// `[B, Nv, 3]`
    pub vertices: Tensor,
    /// `[B, 36, 3]` posed joint positions (translation included).
    pub joints: Tensor,
}

impl BodyModel {
    pub fn from_assets(assets: &ModelAssets, device: &Device, dtype: CDType) -> Result<Self> {
        assets.validate()?;
        let nv = assets.nv();
        let flat: Vec<f64> = assets.template_vertices.iter().flatten().copied().collect();
        let template = Tensor::from_vec(flat, (nv, 3), device)?.to_dtype(dtype)?;
        let shape_basis = Tensor::from_vec(assets.shape_basis.clone(), (N_SHAPE, nv * 3), device)?
            .to_dtype(dtype)?;
        let joint_regressor =
            Tensor::from_vec(assets.joint_regressor.clone(), (N_JOINTS, nv), device)?
                .to_dtype(dtype)?;
        let skin_weights = Tensor::from_vec(assets.skin_weights.clone(), (nv, N_JOINTS), device)?
            .to_dtype(dtype)?;
        let ids: Vec<u32> = assets.landmark_vertex_ids.iter().map(|&i| i as u32).collect();
        let landmark_ids = Tensor::from_vec(ids, N_LANDMARKS, device)?;
        Ok(BodyModel {
            template,
            shape_basis,
            joint_regressor,
            skin_weights,
            landmark_ids,
            parent: assets.parent,
            faces: assets.faces.clone(),
            device: device.clone(),
            dtype,
            nv,
        })
    }

    pub fn nv(&self) -> usize {
        self.nv
    }

    /// `beta [B,9]` to shaped vertices `[B,Nv,3]`.
    pub fn shape(&self, beta: &Tensor) -> Result<Tensor> {
        let b = beta.dim(0)?;
        let offsets = beta.matmul(&self.shape_basis)?.reshape((b, self.nv, 3))?;
        Ok(self.template.unsqueeze(0)?.broadcast_add(&offsets)?)
    }

    /// Joints `[B,36,3]` regressed from shaped vertices `[B,Nv,3]`.
    pub fn joints(&self, shaped: &Tensor) -> Result<Tensor> {
        Ok(self.joint_regressor.unsqueeze(0)?.broadcast_matmul(shaped)?)
    }

    /// Full model: `beta [B,9]`, `theta [B,108]` (global row first),
    /// `xi [B,3]` to posed vertices and joints.
    pub fn pose(&self, beta: &Tensor, theta: &Tensor, xi: &Tensor) -> Result<PosedMesh> {
        let b = beta.dim(0)?;
        let shaped = self.shape(beta)?;
        let rest_joints = self.joints(&shaped)?; // [B,36,3]
        let rots = rodrigues_batch(&theta.reshape((b, N_JOINTS, 3))?)?; // [B,36,3,3]

        let bottom = Tensor::from_slice(&[0.0f64, 0.0, 0.0, 1.0], (1, 1, 4), &self.device)?
            .to_dtype(self.dtype)?
            .broadcast_as((b, 1, 4))?;

        let mut world: Vec<Tensor> = Vec::with_capacity(N_JOINTS);
        for j in 0..N_JOINTS {
            let r = rots.narrow(1, j, 1)?.squeeze(1)?; // [B,3,3]
            let jpos = rest_joints.narrow(1, j, 1)?.squeeze(1)?; // [B,3]
            let t = if j == 0 {
                jpos
            } else {
                let p = self.parent[j] as usize;
                let ppos = rest_joints.narrow(1, p, 1)?.squeeze(1)?;
                (jpos - ppos)?
            };
            let local = Tensor::cat(&[&r, &t.unsqueeze(2)?], 2)?; // [B,3,4]
            let local = Tensor::cat(&[&local, &bottom], 1)?; // [B,4,4]
            let g = if j == 0 {
                local
            } else {
                world[self.parent[j] as usize].matmul(&local)?
            };
            world.push(g);
        }
        // candle stacks along dim 1 by transposing; the batched matmuls below
        // reject those permuted strides once B > 1.
        let world = Tensor::stack(&world, 1)?.contiguous()?; // [B,36,4,4]

        // Re-anchor: subtract R_world * rest_joint from the translation column.
        let rot_w = world.narrow(2, 0, 3)?.narrow(3, 0, 3)?; // [B,36,3,3]
        let anchored = rot_w.matmul(&rest_joints.unsqueeze(3)?)?; // [B,36,3,1]
        let zeros_col = anchored.zeros_like()?.narrow(2, 0, 1)?; // [B,36,1,1]
        let adj_col = Tensor::cat(&[&anchored, &zeros_col], 2)?; // [B,36,4,1]
        let zeros_rest = world.zeros_like()?.narrow(3, 0, 3)?; // [B,36,4,3]
        let adj = Tensor::cat(&[&zeros_rest, &adj_col], 3)?; // [B,36,4,4]
        let skin_tf = (world.clone() - adj)?;

        // Per-vertex transform, then apply to homogeneous shaped vertices.
        let flat_tf = skin_tf.reshape((b, N_JOINTS, 16))?;
        let per_vertex = self
            .skin_weights
            .unsqueeze(0)?
            .broadcast_matmul(&flat_tf)?
            .reshape((b, self.nv, 4, 4))?;
        let ones = shaped.ones_like()?.narrow(2, 0, 1)?; // [B,Nv,1]
        let hom = Tensor::cat(&[&shaped, &ones], 2)?.unsqueeze(3)?.contiguous()?; // [B,Nv,4,1]
        let posed = per_vertex.matmul(&hom)?.squeeze(3)?.narrow(2, 0, 3)?; // [B,Nv,3]
        let vertices = posed.broadcast_add(&xi.unsqueeze(1)?)?;

        let jt = world.narrow(2, 0, 3)?.narrow(3, 3, 1)?.squeeze(3)?; // [B,36,3]
        let joints = jt.broadcast_add(&xi.unsqueeze(1)?)?;
        Ok(PosedMesh { vertices, joints })
    }

    /// Landmark rows `[B,17,3]` gathered from posed vertices.
    pub fn landmarks(&self, vertices: &Tensor) -> Result<Tensor> {
        Ok(vertices.index_select(&self.landmark_ids, 1)?)
    }
}

/// Batched axis-angle to rotation matrices: `[..,3]` to `[..,3,3]`.
///
/// Same sinc form as [`rodrigues`]; gradients flow through `sin`, `cos`, and
/// the matrix products.
pub fn rodrigues_batch(aa: &Tensor) -> Result<Tensor> {
    let dims = aa.dims().to_vec();
    let n: usize = dims[..dims.len() - 1].iter().product();
    let a = aa.reshape((n, 3))?;
    let ax = a.narrow(1, 0, 1)?;
    let ay = a.narrow(1, 1, 1)?;
    let az = a.narrow(1, 2, 1)?;
    let t2 = a.sqr()?.sum_keepdim(1)?.affine(1.0, 1e-32)?; // [n,1]
    let t = t2.sqrt()?;
    let c1 = t.sin()?.broadcast_div(&t)?.reshape((n, 1, 1))?;
    let c2 = t.cos()?.affine(-1.0, 1.0)?.broadcast_div(&t2)?.reshape((n, 1, 1))?;
    let zero = ax.zeros_like()?;
    let k = Tensor::cat(
        &[&zero, &az.neg()?, &ay, &az, &zero, &ax.neg()?, &ay.neg()?, &ax, &zero],
        1,
    )?
    .reshape((n, 3, 3))?;
    let k2 = k.matmul(&k)?;
    let eye = Tensor::from_slice(
        &[1.0f64, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        (1, 3, 3),
        a.device(),
    )?
    .to_dtype(a.dtype())?;
    let r = eye
        .broadcast_add(&k.broadcast_mul(&c1)?)?
        .broadcast_add(&k2.broadcast_mul(&c2)?)?;
    let mut out_dims = dims;
    let last = out_dims.len() - 1;
    out_dims[last] = 3;
    out_dims.push(3);
    Ok(r.reshape(out_dims)?)
}

// ---------------------------------------------------------------------------
// Stand-in asset generation
// ---------------------------------------------------------------------------

const RING_VERTS: usize = 6;

/// Rest positions of the 36 joints (tail-to-nose along +x, y down).
fn base_joint_positions() -> [[f64; 3]; N_JOINTS] {
    [
        [-0.45, -0.18, 0.0],  // pelvis
        [-0.25, -0.21, 0.0],  // spine1
        [-0.05, -0.23, 0.0],  // spine2
        [0.15, -0.23, 0.0],   // spine3
        [0.35, -0.22, 0.0],   // withers
        [0.48, -0.30, 0.0],   // neck1
        [0.58, -0.40, 0.0],   // neck2
        [0.66, -0.48, 0.0],   // head
        [0.70, -0.56, 0.0],   // head_top
        [0.84, -0.44, 0.0],   // nose
        [0.76, -0.40, 0.0],   // jaw
        [0.68, -0.62, 0.05],  // ear_l
        [0.68, -0.62, -0.05], // ear_r
        [0.32, -0.12, 0.10],  // shoulder_l
        [0.33, 0.12, 0.11],   // elbow_l
        [0.34, 0.38, 0.11],   // knee_fl
        [0.34, 0.62, 0.11],   // hoof_fl
        [0.32, -0.12, -0.10], // shoulder_r
        [0.33, 0.12, -0.11],  // elbow_r
        [0.34, 0.38, -0.11],  // knee_fr
        [0.34, 0.62, -0.11],  // hoof_fr
        [-0.42, -0.10, 0.09], // hip_l
        [-0.46, 0.14, 0.10],  // stifle_l
        [-0.43, 0.38, 0.10],  // hock_l
        [-0.44, 0.62, 0.10],  // hoof_bl
        [-0.42, -0.10, -0.09],
        [-0.46, 0.14, -0.10],
        [-0.43, 0.38, -0.10],
        [-0.44, 0.62, -0.10],
        [-0.55, -0.20, 0.0], // tail1
        [-0.64, -0.12, 0.0],
        [-0.71, -0.02, 0.0],
        [-0.77, 0.09, 0.0],
        [-0.81, 0.20, 0.0],
        [-0.84, 0.31, 0.0],
        [-0.86, 0.42, 0.0],
    ]
}

/// Tube radius of the bone ending at each joint.
fn bone_radius(child: usize) -> f64 {
    match child {
        1 => 0.17,
        2 | 3 => 0.19,
        4 => 0.17,
        5 => 0.11,
        6 => 0.095,
        7 => 0.085,
        8 => 0.055,
        9 => 0.045,
        10 => 0.035,
        11 | 12 => 0.02,
        13 | 17 => 0.075,
        14 | 18 => 0.05,
        15 | 19 => 0.042,
        16 | 20 => 0.034,
        21 | 25 => 0.085,
        22 | 26 => 0.06,
        23 | 27 => 0.048,
        24 | 28 => 0.036,
        29 => 0.04,
        30 => 0.034,
        31 => 0.029,
        32 => 0.025,
        33 => 0.021,
        34 => 0.018,
        35 => 0.015,
        _ => unreachable!("joint 0 has no incoming bone"),
    }
}

fn normalize3(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// Deterministic low-poly quadruped with all asset pieces derived from the
/// same skeleton: one six-vertex ring at each end of every bone, uniform
/// joint regressors over the rings around each joint, and 0.7/0.3 skinning
/// between a ring's joint and its parent.
pub fn make_stand_in_assets(seed: u64) -> ModelAssets {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ba5e);
    let mut joints = base_joint_positions();
    for pos in joints.iter_mut() {
        for c in pos.iter_mut() {
            *c += rng.gen_range(-0.008..0.008);
        }
    }

    let bones: Vec<(usize, usize)> = (1..N_JOINTS).map(|j| (PARENT[j] as usize, j)).collect();
    let radii: Vec<f64> = bones
        .iter()
        .map(|&(_, c)| (bone_radius(c) * (1.0 + rng.gen_range(-0.06..0.06))).max(0.008))
        .collect();

    let mut vertices: Vec<[f64; 3]> = Vec::new();
    let mut faces: Vec<[u32; 3]> = Vec::new();
    // ring_joint[v] = joint whose position the vertex's ring is centered on.
    let mut ring_joint: Vec<usize> = Vec::new();
    // First vertex of the ring at the child end of each bone, for landmarks.
    let mut child_ring_start: Vec<usize> = Vec::new();

    for (bi, &(p, c)) in bones.iter().enumerate() {
        let axis = normalize3([
            joints[c][0] - joints[p][0],
            joints[c][1] - joints[p][1],
            joints[c][2] - joints[p][2],
        ]);
        let pick = if axis[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
        let u = normalize3(cross3(axis, pick));
        let w = cross3(axis, u);
        let r = radii[bi];

        let base = vertices.len();
        for (end, (center, joint, rr)) in
            [(joints[p], p, r), (joints[c], c, r * 0.92)].into_iter().enumerate()
        {
            let _ = end;
            for i in 0..RING_VERTS {
                let phi = 2.0 * std::f64::consts::PI * i as f64 / RING_VERTS as f64;
                let (sp, cp) = phi.sin_cos();
                vertices.push([
                    center[0] + rr * (cp * u[0] + sp * w[0]),
                    center[1] + rr * (cp * u[1] + sp * w[1]),
                    center[2] + rr * (cp * u[2] + sp * w[2]),
                ]);
                ring_joint.push(joint);
            }
        }
        child_ring_start.push(base + RING_VERTS);

        let a = base as u32;
        let b = (base + RING_VERTS) as u32;
        for i in 0..RING_VERTS as u32 {
            let i2 = (i + 1) % RING_VERTS as u32;
            faces.push([a + i, a + i2, b + i2]);
            faces.push([a + i, b + i2, b + i]);
        }
        // Flat caps close each tube so unions of bones stay hole-free.
        for i in 1..(RING_VERTS as u32 - 1) {
            faces.push([a, a + i + 1, a + i]);
            faces.push([b, b + i, b + i + 1]);
        }
    }
    let nv = vertices.len();

    let mut skin_weights = vec![0.0; nv * N_JOINTS];
    for (v, &j) in ring_joint.iter().enumerate() {
        if j == 0 {
            skin_weights[v * N_JOINTS] = 1.0;
        } else {
            skin_weights[v * N_JOINTS + j] = 0.7;
            skin_weights[v * N_JOINTS + PARENT[j] as usize] = 0.3;
        }
    }

    let mut joint_regressor = vec![0.0; N_JOINTS * nv];
    for j in 0..N_JOINTS {
        let members: Vec<usize> =
            (0..nv).filter(|&v| ring_joint[v] == j).collect();
        assert!(!members.is_empty(), "joint {j} has no ring vertices");
        let w = 1.0 / members.len() as f64;
        for v in members {
            joint_regressor[j * nv + v] = w;
        }
    }

    let landmark_vertex_ids: [usize; N_LANDMARKS] = std::array::from_fn(|i| {
        let joint = LANDMARK_JOINTS[i];
        let bone_index = joint - 1; // bones are ordered by child joint
        child_ring_start[bone_index]
    });

    let shape_basis = build_shape_basis(&vertices, &ring_joint, &joints);
    let uv_coords = cylindrical_uv(&vertices);

    let assets = ModelAssets {
        template_vertices: vertices,
        faces,
        shape_basis,
        joint_regressor,
        skin_weights,
        parent: PARENT,
        landmark_vertex_ids,
        uv_coords,
    };
    assets.validate().expect("stand-in assets must satisfy their invariants");
    assets
}

/// Nine semantic displacement fields, Gram-Schmidt orthogonalized as
/// flattened vectors (magnitudes kept, directions made mutually orthogonal).
fn build_shape_basis(
    vertices: &[[f64; 3]],
    ring_joint: &[usize],
    joints: &[[f64; 3]; N_JOINTS],
) -> Vec<f64> {
    let nv = vertices.len();
    let centroid = {
        let mut c = [0.0; 3];
        for v in vertices {
            c[0] += v[0];
            c[1] += v[1];
            c[2] += v[2];
        }
        [c[0] / nv as f64, c[1] / nv as f64, c[2] / nv as f64]
    };
    let trunk = |j: usize| j <= 4;
    let neck_head = |j: usize| (5..=12).contains(&j);
    let head_parts = |j: usize| (8..=12).contains(&j);
    let legs = |j: usize| (13..=28).contains(&j);
    let tail = |j: usize| j >= 29;
    let ears = |j: usize| j == 11 || j == 12;

    let mut fields = vec![vec![0.0f64; nv * 3]; N_SHAPE];
    for (v, (pos, &j)) in vertices.iter().zip(ring_joint).enumerate() {
        let d = |f: &mut Vec<f64>, dx: [f64; 3]| {
            f[v * 3] += dx[0];
            f[v * 3 + 1] += dx[1];
            f[v * 3 + 2] += dx[2];
        };
        // 0: overall size
        d(&mut fields[0], [
            0.07 * (pos[0] - centroid[0]),
            0.07 * (pos[1] - centroid[1]),
            0.07 * (pos[2] - centroid[2]),
        ]);
        // 1: body length
        d(&mut fields[1], [0.10 * (pos[0] - centroid[0]), 0.0, 0.0]);
        // 2: leg length (scales distance below the spine line)
        if legs(j) {
            d(&mut fields[2], [0.0, 0.10 * (pos[1] + 0.12).max(0.0), 0.0]);
        }
        // 3: trunk thickness (radial from the spine axis)
        if trunk(j) {
            d(&mut fields[3], [0.0, 0.10 * (pos[1] + 0.20), 0.10 * pos[2]]);
        }
        // 4: neck length
        if neck_head(j) {
            d(&mut fields[4], [0.05, -0.06, 0.0]);
        }
        // 5: head size (radial from the head joint)
        if head_parts(j) || j == 7 {
            d(&mut fields[5], [
                0.08 * (pos[0] - joints[7][0]),
                0.08 * (pos[1] - joints[7][1]),
                0.08 * (pos[2] - joints[7][2]),
            ]);
        }
        // 6: tail length
        if tail(j) {
            d(&mut fields[6], [
                0.06 * (pos[0] - joints[29][0]),
                0.06 * (pos[1] - joints[29][1]),
                0.06 * (pos[2] - joints[29][2]),
            ]);
        }
        // 7: ear size
        if ears(j) {
            d(&mut fields[7], [
                0.12 * (pos[0] - joints[8][0]),
                0.12 * (pos[1] - joints[8][1]),
                0.12 * (pos[2] - joints[8][2]),
            ]);
        }
        // 8: belly depth (bulges the lower trunk downward)
        if trunk(j) && pos[1] > -0.20 {
            d(&mut fields[8], [0.0, 0.08 * (pos[1] + 0.20), 0.0]);
        }
    }

    // Gram-Schmidt without normalization: subtract projections onto earlier
    // fields so flattened columns end up mutually orthogonal.
    for k in 0..N_SHAPE {
        for m in 0..k {
            let dot: f64 = fields[k].iter().zip(&fields[m]).map(|(a, b)| a * b).sum();
            let nrm: f64 = fields[m].iter().map(|x| x * x).sum();
            assert!(nrm > 1e-12, "shape field {m} vanished during orthogonalization");
            let coef = dot / nrm;
            let prev = fields[m].clone();
            for (a, b) in fields[k].iter_mut().zip(&prev) {
                *a -= coef * b;
            }
        }
    }
    fields.into_iter().flatten().collect()
}

fn cylindrical_uv(vertices: &[[f64; 3]]) -> Vec<[f64; 2]> {
    let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in vertices {
        min_x = min_x.min(v[0]);
        max_x = max_x.max(v[0]);
    }
    let span = (max_x - min_x).max(1e-9);
    vertices
        .iter()
        .map(|v| {
            let ang = v[2].atan2(v[1] + 0.20); // around the trunk axis
            let u = (ang / (2.0 * std::f64::consts::PI) + 0.5).clamp(0.0, 1.0);
            let w = ((v[0] - min_x) / span).clamp(0.0, 1.0);
            [u, w]
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Truncated-series matrix exponential of the skew matrix of `aa`.
    /// Converges to machine precision for |aa| < 2 pi.
    fn matrix_exp_oracle(aa: [f64; 3]) -> [[f64; 3]; 3] {
        let k = [
            [0.0, -aa[2], aa[1]],
            [aa[2], 0.0, -aa[0]],
            [-aa[1], aa[0], 0.0],
        ];
        let mut result = [[0.0; 3]; 3];
        for (i, row) in result.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        let mut term = [[0.0; 3]; 3];
        for (i, row) in term.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        for n in 1..60 {
            let mut next = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    next[i][j] = (0..3).map(|m| term[i][m] * k[m][j]).sum::<f64>() / n as f64;
                }
            }
            term = next;
            for i in 0..3 {
                for j in 0..3 {
                    result[i][j] += term[i][j];
                }
            }
        }
        result
    }

    fn rand_unit_state(rng: &mut ChaCha8Rng) -> PoseShapeState {
        let mut s = PoseShapeState::rest();
        for b in s.beta.iter_mut() {
            *b = rng.gen_range(-1.0..1.0);
        }
        for c in s.theta_g.iter_mut() {
            *c = rng.gen_range(-1.0..1.0);
        }
        for row in s.theta_j.iter_mut() {
            for c in row.iter_mut() {
                *c = rng.gen_range(-0.5..0.5);
            }
        }
        for c in s.xi.iter_mut() {
            *c = rng.gen_range(-1.0..1.0);
        }
        s
    }

    #[test]
    fn rodrigues_identity_and_quarter_turn() {
        let r = rodrigues([0.0, 0.0, 0.0]);
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(r[i][j], (i == j) as u8 as f64, epsilon = 1e-15);
            }
        }
        let r = rodrigues([0.0, 0.0, std::f64::consts::FRAC_PI_2]);
        let expect = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert_abs_diff_eq!(r[i][j], expect[i][j], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn rodrigues_matches_matrix_exponential() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let aa = [
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            ];
            let r = rodrigues(aa);
            let o = matrix_exp_oracle(aa);
            for i in 0..3 {
                for j in 0..3 {
                    assert_abs_diff_eq!(r[i][j], o[i][j], epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn rodrigues_orthonormal_unit_determinant() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..1000 {
            let aa = [
                rng.gen_range(-6.0..6.0),
                rng.gen_range(-6.0..6.0),
                rng.gen_range(-6.0..6.0),
            ];
            let r = rodrigues(aa);
            for i in 0..3 {
                for j in 0..3 {
                    let dot: f64 = (0..3).map(|m| r[m][i] * r[m][j]).sum();
                    assert_abs_diff_eq!(dot, (i == j) as u8 as f64, epsilon = 1e-9);
                }
            }
            let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
                - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
                + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
            assert_abs_diff_eq!(det, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn stand_in_is_deterministic_and_valid() {
        let a = make_stand_in_assets(7);
        let b = make_stand_in_assets(7);
        assert_eq!(a, b);
        assert!(a.validate().is_ok());
        assert!((300..=1000).contains(&a.nv()), "Nv = {}", a.nv());
    }

    #[test]
    fn stand_in_shape_basis_is_orthogonal() {
        for seed in [0, 7, 123] {
            let assets = make_stand_in_assets(seed);
            let nv3 = assets.nv() * 3;
            for i in 0..N_SHAPE {
                let bi = &assets.shape_basis[i * nv3..(i + 1) * nv3];
                let ni: f64 = bi.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!(ni > 1e-6, "mode {i} vanished");
                for j in 0..i {
                    let bj = &assets.shape_basis[j * nv3..(j + 1) * nv3];
                    let nj: f64 = bj.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let dot: f64 = bi.iter().zip(bj).map(|(a, b)| a * b).sum();
                    assert!(
                        (dot / (ni * nj)).abs() < 1e-6,
                        "modes {i},{j} not orthogonal: {}",
                        dot / (ni * nj)
                    );
                }
            }
        }
    }

    #[test]
    fn asset_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("standin.dsar");
        let assets = make_stand_in_assets(7);
        assets.save(&path).unwrap();
        let back = ModelAssets::load(&path).unwrap();
        assert_eq!(assets, back);
    }

    #[test]
    fn loader_names_offending_field() {
        let dir = tempfile::tempdir().unwrap();
        let assets = make_stand_in_assets(3);

        // Skin-weight row summing to 0.9.
        let mut broken = assets.clone();
        broken.skin_weights[0] = 0.9 * broken.skin_weights[0];
        let sum: f64 = broken.skin_weights[..N_JOINTS].iter().sum();
        assert!((sum - 1.0).abs() > 1e-3);
        let path = dir.path().join("bad_weights.dsar");
        broken.to_archive().write(&path).unwrap();
        match ModelAssets::load(&path) {
            Err(Error::InvalidAssets { field, .. }) => assert_eq!(field, "skin_weights"),
            other => panic!("expected skin_weights violation, got {other:?}"),
        }

        // Archive missing faces.
        let mut arc = assets.to_archive();
        let mut trimmed = Archive::new(ASSET_FORMAT);
        trimmed.meta = arc.meta.clone();
        for name in ["template_vertices", "shape_basis", "joint_regressor", "skin_weights", "parent", "landmark_vertex_ids", "uv_coords"] {
            let arr = arc.get(name).unwrap().clone();
            trimmed.insert(name, arr.shape.clone(), arr.data.clone());
        }
        let path2 = dir.path().join("no_faces.dsar");
        trimmed.write(&path2).unwrap();
        match ModelAssets::load(&path2) {
            Err(Error::MissingArray(name)) => assert_eq!(name, "faces"),
            other => panic!("expected missing faces, got {other:?}"),
        }
        arc.meta.clear();
    }

    #[test]
    fn rest_pose_is_identity() {
        let assets = make_stand_in_assets(7);
        let rest = PoseShapeState::rest();
        let posed = pose_mesh(&assets, &rest);
        for (a, b) in posed.iter().zip(&assets.template_vertices) {
            for k in 0..3 {
                assert_abs_diff_eq!(a[k], b[k], epsilon = 1e-9);
            }
        }
        let (joints, world) = forward_kinematics(&assets, &rest);
        let rest_joints = regress_joints(&assets, &assets.template_vertices);
        for j in 0..N_JOINTS {
            for k in 0..3 {
                assert_abs_diff_eq!(joints[j][k], rest_joints[j][k], epsilon = 1e-9);
                for m in 0..3 {
                    assert_abs_diff_eq!(
                        world[j][k][m],
                        (k == m) as u8 as f64,
                        epsilon = 1e-9
                    );
                }
            }
        }
    }

    #[test]
    fn shape_is_linear() {
        let assets = make_stand_in_assets(7);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut s1 = PoseShapeState::rest();
        let mut s2 = PoseShapeState::rest();
        for k in 0..N_SHAPE {
            s1.beta[k] = rng.gen_range(-1.0..1.0);
            s2.beta[k] = rng.gen_range(-1.0..1.0);
        }
        let mut sum = PoseShapeState::rest();
        for k in 0..N_SHAPE {
            sum.beta[k] = s1.beta[k] + s2.beta[k];
        }
        let v1 = pose_mesh(&assets, &s1);
        let v2 = pose_mesh(&assets, &s2);
        let vs = pose_mesh(&assets, &sum);
        for i in 0..assets.nv() {
            for k in 0..3 {
                let expect = v1[i][k] + v2[i][k] - assets.template_vertices[i][k];
                assert_abs_diff_eq!(vs[i][k], expect, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn pure_translation_shifts_everything() {
        let assets = make_stand_in_assets(7);
        let mut s = PoseShapeState::rest();
        s.xi = [1.0, 2.0, 3.0];
        let v = pose_mesh(&assets, &s);
        for (a, b) in v.iter().zip(&assets.template_vertices) {
            for k in 0..3 {
                assert_abs_diff_eq!(a[k], b[k] + s.xi[k], epsilon = 1e-9);
            }
        }
        let (joints, _) = forward_kinematics(&assets, &s);
        let rest_joints = regress_joints(&assets, &assets.template_vertices);
        for j in 0..N_JOINTS {
            for k in 0..3 {
                assert_abs_diff_eq!(joints[j][k], rest_joints[j][k] + s.xi[k], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn global_rotation_is_rigid_about_root() {
        let assets = make_stand_in_assets(7);
        for aa in [[0.0, 0.0, std::f64::consts::PI], [std::f64::consts::FRAC_PI_2, 0.0, 0.0], [0.3, -0.2, 0.9]] {
            let mut s = PoseShapeState::rest();
            s.theta_g = aa;
            let posed = pose_mesh(&assets, &s);
            let r = rodrigues(aa);
            let rest_joints = regress_joints(&assets, &assets.template_vertices);
            let j0 = rest_joints[0];
            for (got, v) in posed.iter().zip(&assets.template_vertices) {
                let d = [v[0] - j0[0], v[1] - j0[1], v[2] - j0[2]];
                for k in 0..3 {
                    let expect = j0[k] + r[k][0] * d[0] + r[k][1] * d[1] + r[k][2] * d[2];
                    assert_abs_diff_eq!(got[k], expect, epsilon = 1e-9);
                }
            }
            let (joints, _) = forward_kinematics(&assets, &s);
            for (got, v) in joints.iter().zip(&rest_joints) {
                let d = [v[0] - j0[0], v[1] - j0[1], v[2] - j0[2]];
                for k in 0..3 {
                    let expect = j0[k] + r[k][0] * d[0] + r[k][1] * d[1] + r[k][2] * d[2];
                    assert_abs_diff_eq!(got[k], expect, epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn landmarks_are_a_gather() {
        let assets = make_stand_in_assets(7);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let state = rand_unit_state(&mut rng);
        let posed = pose_mesh(&assets, &state);
        let lm = landmarks_3d(&assets, &posed);
        for (i, &id) in assets.landmark_vertex_ids.iter().enumerate() {
            assert_eq!(lm[i], posed[id]);
        }
        // Translation equivariance.
        let shifted: Vec<[f64; 3]> =
            posed.iter().map(|v| [v[0] + 0.5, v[1] - 0.25, v[2] + 1.0]).collect();
        let lm2 = landmarks_3d(&assets, &shifted);
        for i in 0..N_LANDMARKS {
            assert_abs_diff_eq!(lm2[i][0], lm[i][0] + 0.5, epsilon = 1e-15);
            assert_abs_diff_eq!(lm2[i][1], lm[i][1] - 0.25, epsilon = 1e-15);
            assert_abs_diff_eq!(lm2[i][2], lm[i][2] + 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn state_validation_rejects_bad_rows() {
        assert!(PoseShapeState::new([0.0; 9], [7.0, 0.0, 0.0], [[0.0; 3]; 35], [0.0; 3]).is_err());
        assert!(PoseShapeState::new([0.0; 9], [0.0; 3], [[0.0; 3]; 35], [f64::NAN, 0.0, 0.0]).is_err());
        assert!(PoseShapeState::new([0.0; 9], [0.0, 0.0, 3.0], [[0.0; 3]; 35], [0.0; 3]).is_ok());
    }

    #[test]
    fn tensor_path_matches_plain_path() {
        let assets = make_stand_in_assets(7);
        let device = Device::Cpu;
        let model = BodyModel::from_assets(&assets, &device, CDType::F64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..4 {
            let state = rand_unit_state(&mut rng);
            let plain = pose_mesh(&assets, &state);
            let beta = Tensor::from_slice(&state.beta, (1, 9), &device).unwrap();
            let theta_flat: Vec<f64> = state.theta_rows().iter().flatten().copied().collect();
            let theta = Tensor::from_vec(theta_flat, (1, N_JOINTS * 3), &device).unwrap();
            let xi = Tensor::from_slice(&state.xi, (1, 3), &device).unwrap();
            let posed = model.pose(&beta, &theta, &xi).unwrap();
            let got = posed.vertices.reshape((assets.nv(), 3)).unwrap().to_vec2::<f64>().unwrap();
            for (a, b) in got.iter().zip(&plain) {
                for k in 0..3 {
                    assert_abs_diff_eq!(a[k], b[k], epsilon = 1e-9);
                }
            }
            let (joints_plain, _) = forward_kinematics(&assets, &state);
            let got_j = posed.joints.reshape((N_JOINTS, 3)).unwrap().to_vec2::<f64>().unwrap();
            for (a, b) in got_j.iter().zip(&joints_plain) {
                for k in 0..3 {
                    assert_abs_diff_eq!(a[k], b[k], epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn tensor_landmarks_match_plain() {
        let assets = make_stand_in_assets(7);
        let device = Device::Cpu;
        let model = BodyModel::from_assets(&assets, &device, CDType::F64).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let state = rand_unit_state(&mut rng);
        let beta = Tensor::from_slice(&state.beta, (1, 9), &device).unwrap();
        let theta_flat: Vec<f64> = state.theta_rows().iter().flatten().copied().collect();
        let theta = Tensor::from_vec(theta_flat, (1, N_JOINTS * 3), &device).unwrap();
        let xi = Tensor::from_slice(&state.xi, (1, 3), &device).unwrap();
        let posed = model.pose(&beta, &theta, &xi).unwrap();
        let lm_t = model.landmarks(&posed.vertices).unwrap();
        let lm_plain = landmarks_3d(&assets, &pose_mesh(&assets, &state));
        let got = lm_t.reshape((N_LANDMARKS, 3)).unwrap().to_vec2::<f64>().unwrap();
        for (a, b) in got.iter().zip(&lm_plain) {
            for k in 0..3 {
                assert_abs_diff_eq!(a[k], b[k], epsilon = 1e-9);
            }
        }
    }
}
