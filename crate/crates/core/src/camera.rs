//! Weak-perspective camera: scale/translation parameters, the derived global
//! translation, and perspective projection to pixel coordinates.
//!
//! The scale-and-shift parameterization (s, tx, ty) is realized as a full
//! perspective camera at depth `2f/(r*s)`: the mesh is pushed away from the
//! camera instead of scaling the image. Principal point is the image center;
//! pixel origin is top-left with y downward, matching the mesh convention of
//! y pointing down.

use candle_core::Tensor;

use crate::error::{Error, Result};

pub const DEFAULT_FOCAL: f64 = 5000.0;
pub const DEFAULT_RESOLUTION: u32 = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraParams {
    /// Weak-perspective scale, > 0.
    pub s: f64,
    /// Image-plane translation (dimensionless, model units at unit depth).
    pub tx: f64,
    pub ty: f64,
    /// Focal length in pixels.
    pub f: f64,
    /// Square image resolution in pixels.
    pub r: u32,
}

impl CameraParams {
    pub fn new(s: f64, tx: f64, ty: f64) -> Result<Self> {
        Self::with_intrinsics(s, tx, ty, DEFAULT_FOCAL, DEFAULT_RESOLUTION)
    }

    pub fn with_intrinsics(s: f64, tx: f64, ty: f64, f: f64, r: u32) -> Result<Self> {
        let cam = CameraParams { s, tx, ty, f, r };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s.is_finite() && self.s > 0.0) {
            return Err(Error::InvalidCamera(format!("scale s = {} must be positive", self.s)));
        }
        if !(self.f.is_finite() && self.f > 0.0) {
            return Err(Error::InvalidCamera(format!("focal length f = {} must be positive", self.f)));
        }
        if self.r == 0 {
            return Err(Error::InvalidCamera("resolution r must be positive".into()));
        }
        if !self.tx.is_finite() || !self.ty.is_finite() {
            return Err(Error::InvalidCamera("non-finite translation".into()));
        }
        Ok(())
    }

    /// Global translation `[tx, ty, 2f/(r*s)]` placing the mesh at the depth
    /// where weak-perspective scale s is realized.
    pub fn derive_translation(&self) -> Result<[f64; 3]> {
        self.validate()?;
        Ok([self.tx, self.ty, 2.0 * self.f / (self.r as f64 * self.s)])
    }
}

/// Perspective projection of camera-frame points (translation already added
/// per [`CameraParams::derive_translation`]) to pixels.
pub fn project(points: &[[f64; 3]], cam: &CameraParams) -> Result<Vec<[f64; 2]>> {
    let xi = cam.derive_translation()?;
    let half = cam.r as f64 / 2.0;
    let mut out = Vec::with_capacity(points.len());
    for p in points {
        let z = p[2] + xi[2];
        if z <= 0.0 {
            return Err(Error::BehindCamera(z));
        }
        out.push([
            cam.f * (p[0] + xi[0]) / z + half,
            cam.f * (p[1] + xi[1]) / z + half,
        ]);
    }
    Ok(out)
}

/// Translation tensor `[B,3]` derived from camera tensors `[B,3]` holding
/// (s, tx, ty) rows. Differentiable in the camera.
pub fn derive_translation_t(cam: &Tensor, f: f64, r: u32) -> Result<Tensor> {
    let s = cam.narrow(1, 0, 1)?;
    let txy = cam.narrow(1, 1, 2)?;
    let depth = s.recip()?.affine(2.0 * f / r as f64, 0.0)?;
    Ok(Tensor::cat(&[&txy, &depth], 1)?)
}

/// Batched projection: `points [B,N,3]` (model frame), `cam [B,3]` rows of
/// (s, tx, ty). Returns pixels `[B,N,2]`; differentiable in both inputs.
pub fn project_t(points: &Tensor, cam: &Tensor, f: f64, r: u32) -> Result<Tensor> {
    let xi = derive_translation_t(cam, f, r)?; // [B,3]
    let shifted = points.broadcast_add(&xi.unsqueeze(1)?)?; // [B,N,3]
    let z = shifted.narrow(2, 2, 1)?;
    let z_min = z
        .min(2)?
        .min(1)?
        .min(0)?
        .to_dtype(candle_core::DType::F64)?
        .to_scalar::<f64>()?;
    if z_min <= 0.0 {
        return Err(Error::BehindCamera(z_min));
    }
    let xy = shifted.narrow(2, 0, 2)?;
    Ok(xy.broadcast_div(&z)?.affine(f, r as f64 / 2.0)?)
}
