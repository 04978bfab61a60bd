//! Training losses: robust keypoint reprojection, silhouette, shape and pose
//! priors, the pair disentanglement term, and the synthetic ground-truth
//! term. Each loss has a plain f64 form and a batched tensor form; the two
//! agree to float accuracy and the tensor form is differentiable.

use candle_core::Tensor;

use crate::synthpipe::{PoseEntry, ShapeSampler, VariedFactor, N_POSE_JOINTS};
use crate::{Error, Result};

pub const N_THETA: usize = 108;

/// Loss mixing weights. `gm_sigma` is the robustifier scale in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub w_keypoint: f64,
    pub w_silhouette: f64,
    pub w_prior_beta: f64,
    pub w_prior_theta: f64,
    pub w_dfl: f64,
    pub gm_sigma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_keypoint: 0.001,
            w_silhouette: 0.0001,
            w_prior_beta: 0.01,
            w_prior_theta: 0.01,
            w_dfl: 0.02,
            gm_sigma: 100.0,
        }
    }
}

/// Geman-McClure penalty: quadratic near zero, saturating at `sigma^2`.
pub fn gm_robustifier(e: f64, sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    s2 * e * e / (s2 + e * e)
}

// ---------------------------------------------------------------------------
// Plain forms
// ---------------------------------------------------------------------------

/// Visibility-squared-weighted robust mean of keypoint reprojection errors.
/// Returns 0 when nothing is visible.
pub fn keypoint_loss(
    pred: &[[f64; 2]],
    gt: &[[f64; 2]],
    vis: &[f64],
    w: &LossWeights,
) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for ((p, g), &v) in pred.iter().zip(gt).zip(vis) {
        let lam2 = v * v;
        if lam2 == 0.0 {
            continue;
        }
        let e = ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt();
        num += lam2 * gm_robustifier(e, w.gm_sigma);
        den += lam2;
    }
    if den == 0.0 {
        return 0.0;
    }
    w.w_keypoint * num / den
}

fn smooth_l1(x: f64) -> f64 {
    let a = x.abs();
    if a < 1.0 {
        0.5 * x * x
    } else {
        a - 0.5
    }
}

/// Mean SmoothL1 between a soft silhouette and a binary target.
pub fn silhouette_loss(pred: &[f64], gt: &[bool], w: &LossWeights) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "silhouette {} vs target {}",
            pred.len(),
            gt.len()
        )));
    }
    let sum: f64 = pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| smooth_l1(p - if g { 1.0 } else { 0.0 }))
        .sum();
    Ok(w.w_silhouette * sum / pred.len() as f64)
}

/// Diagonal Gaussian priors over shape and pose, fitted once per run: the
/// shape prior comes from the shape sampler's stated spread, the pose prior
/// from the moments of the pose library.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamPrior {
    pub beta_var: [f64; crate::body_model::N_SHAPE],
    pub theta_mean: Vec<f64>,
    pub theta_var: Vec<f64>,
}

pub const VAR_FLOOR: f64 = 1e-4;

impl ParamPrior {
    pub fn fit(sampler: &ShapeSampler, poses: &[PoseEntry]) -> Self {
        let beta_var = sampler.std.map(|s| (s * s).max(VAR_FLOOR));
        let d = N_POSE_JOINTS * 3;
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        let n = poses.len().max(1) as f64;
        for p in poses {
            for (k, v) in p.theta_j.iter().flatten().enumerate() {
                mean[k] += v / n;
            }
        }
        for p in poses {
            for (k, v) in p.theta_j.iter().flatten().enumerate() {
                var[k] += (v - mean[k]).powi(2) / n;
            }
        }
        for v in var.iter_mut() {
            *v = v.max(VAR_FLOOR);
        }
        ParamPrior { beta_var, theta_mean: mean, theta_var: var }
    }
}

/// Weighted squared Mahalanobis distances of shape and pose from their
/// priors.
pub fn prior_loss(
    beta: &[f64],
    theta_j: &[[f64; 3]; N_POSE_JOINTS],
    prior: &ParamPrior,
    w: &LossWeights,
) -> f64 {
    let zb: f64 = beta.iter().zip(&prior.beta_var).map(|(b, v)| b * b / v).sum();
    let zt: f64 = theta_j
        .iter()
        .flatten()
        .zip(prior.theta_mean.iter().zip(&prior.theta_var))
        .map(|(t, (m, v))| (t - m).powi(2) / v)
        .sum();
    w.w_prior_beta * zb + w.w_prior_theta * zt
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// Pair disentanglement term: penalize differences in whatever the pair kept
/// fixed. An appearance pair must agree in pose features and global
/// rotation; a pose pair in appearance features and global rotation; a
/// rotation pair in both feature streams.
pub fn dfl_loss(
    gamma_a1: &[f64],
    gamma_p1: &[f64],
    theta_g1: &[f64; 3],
    gamma_a2: &[f64],
    gamma_p2: &[f64],
    theta_g2: &[f64; 3],
    factor: VariedFactor,
    w: &LossWeights,
) -> f64 {
    let term = match factor {
        VariedFactor::Appearance => mse(gamma_p1, gamma_p2) + mse(theta_g1, theta_g2),
        VariedFactor::Pose => mse(gamma_a1, gamma_a2) + mse(theta_g1, theta_g2),
        VariedFactor::GlobalRotation => mse(gamma_a1, gamma_a2) + mse(gamma_p1, gamma_p2),
    };
    w.w_dfl * term
}

/// Synthetic-supervision term: parameter MSE against stored ground truth.
/// `theta` concatenates the global rotation and the 35 joint rotations.
pub fn gt_loss(
    beta_pred: &[f64],
    theta_pred: &[f64],
    beta_gt: &[f64],
    theta_gt: &[f64],
) -> f64 {
    debug_assert_eq!(theta_pred.len(), N_THETA);
    mse(beta_pred, beta_gt) + mse(theta_pred, theta_gt)
}

/// Per-component values for one step; the training objective is their sum.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossTerms {
    pub keypoint: f64,
    pub silhouette: f64,
    pub prior: f64,
    pub dfl: f64,
    pub gt: f64,
}

impl LossTerms {
    pub fn total(&self) -> f64 {
        self.keypoint + self.silhouette + self.prior + self.dfl + self.gt
    }
}

// ---------------------------------------------------------------------------
// Tensor forms (batched, differentiable)
// ---------------------------------------------------------------------------

/// `pred`, `gt`: `[B, J, 2]`; `vis`: `[B, J]` of 0/1 (not differentiated).
/// Per-sample normalization matches the plain form; all-invisible samples
/// contribute 0.
pub fn keypoint_loss_t(pred: &Tensor, gt: &Tensor, vis: &Tensor, w: &LossWeights) -> Result<Tensor> {
    let (b, _j, _) = pred.dims3()?;
    let s2 = w.gm_sigma * w.gm_sigma;
    let d = pred.sub(gt)?.sqr()?.sum(2)?; // [B, J] squared error norms
    let rho = d.affine(s2, 0.0)?.div(&d.affine(1.0, s2)?)?;
    let lam2 = vis.sqr()?;
    let num = rho.mul(&lam2)?.sum(1)?; // [B]
    let den = lam2.sum(1)?; // [B]
    // vis carries no gradient: normalize on the host, masking empty samples.
    let den_host = den.to_vec1::<f64>()?;
    let inv: Vec<f64> =
        den_host.iter().map(|&d| if d > 0.0 { 1.0 / d } else { 0.0 }).collect();
    let inv = Tensor::from_vec(inv, b, pred.device())?;
    let per_sample = num.mul(&inv)?;
    Ok(per_sample.mean_all()?.affine(w.w_keypoint, 0.0)?)
}

/// `pred`, `gt`: same shape, any rank. Mean SmoothL1 scaled by the
/// silhouette weight.
pub fn silhouette_loss_t(pred: &Tensor, gt: &Tensor, w: &LossWeights) -> Result<Tensor> {
    if pred.dims() != gt.dims() {
        return Err(Error::ShapeMismatch(format!(
            "silhouette {:?} vs target {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let x = pred.sub(gt)?;
    let a = x.abs()?;
    let quad = x.sqr()?.affine(0.5, 0.0)?;
    let lin = a.affine(1.0, -0.5)?;
    let sm = a.lt(1.0)?.where_cond(&quad, &lin)?;
    Ok(sm.mean_all()?.affine(w.w_silhouette, 0.0)?)
}

/// Prior moments staged on a device for the tensor path.
#[derive(Debug, Clone)]
pub struct ParamPriorT {
    pub beta_inv_var: Tensor,
    pub theta_mean: Tensor,
    pub theta_inv_var: Tensor,
}

impl ParamPriorT {
    pub fn new(prior: &ParamPrior, device: &candle_core::Device) -> Result<Self> {
        let nb = prior.beta_var.len();
        let nt = prior.theta_var.len();
        Ok(ParamPriorT {
            beta_inv_var: Tensor::from_vec(
                prior.beta_var.iter().map(|v| 1.0 / v).collect(),
                nb,
                device,
            )?,
            theta_mean: Tensor::from_vec(prior.theta_mean.clone(), nt, device)?,
            theta_inv_var: Tensor::from_vec(
                prior.theta_var.iter().map(|v| 1.0 / v).collect(),
                nt,
                device,
            )?,
        })
    }
}

/// `beta`: `[B, 9]`; `theta_j`: `[B, 105]`. Batch mean of the weighted
/// quadratic forms.
pub fn prior_loss_t(
    beta: &Tensor,
    theta_j: &Tensor,
    prior: &ParamPriorT,
    w: &LossWeights,
) -> Result<Tensor> {
    let zb = beta.sqr()?.broadcast_mul(&prior.beta_inv_var)?.sum(1)?;
    let zt = theta_j
        .broadcast_sub(&prior.theta_mean)?
        .sqr()?
        .broadcast_mul(&prior.theta_inv_var)?
        .sum(1)?;
    let z = zb.affine(w.w_prior_beta, 0.0)?.add(&zt.affine(w.w_prior_theta, 0.0)?)?;
    Ok(z.mean_all()?)
}

fn mse_t(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok(a.sub(b)?.sqr()?.mean_all()?)
}

/// Tensor form of [`dfl_loss`]; all arguments batched `[P, .]`.
#[allow(clippy::too_many_arguments)]
pub fn dfl_loss_t(
    gamma_a1: &Tensor,
    gamma_p1: &Tensor,
    theta_g1: &Tensor,
    gamma_a2: &Tensor,
    gamma_p2: &Tensor,
    theta_g2: &Tensor,
    factor: VariedFactor,
    w: &LossWeights,
) -> Result<Tensor> {
    let term = match factor {
        VariedFactor::Appearance => mse_t(gamma_p1, gamma_p2)?.add(&mse_t(theta_g1, theta_g2)?)?,
        VariedFactor::Pose => mse_t(gamma_a1, gamma_a2)?.add(&mse_t(theta_g1, theta_g2)?)?,
        VariedFactor::GlobalRotation => {
            mse_t(gamma_a1, gamma_a2)?.add(&mse_t(gamma_p1, gamma_p2)?)?
        }
    };
    Ok(term.affine(w.w_dfl, 0.0)?)
}

/// Tensor form of [`gt_loss`]; `beta*`: `[B, 9]`, `theta*`: `[B, 108]`.
pub fn gt_loss_t(
    beta_pred: &Tensor,
    theta_pred: &Tensor,
    beta_gt: &Tensor,
    theta_gt: &Tensor,
) -> Result<Tensor> {
    Ok(mse_t(beta_pred, beta_gt)?.add(&mse_t(theta_pred, theta_gt)?)?)
}
