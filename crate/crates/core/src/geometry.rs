//! Geometry-constrained tensor loss with analytic gradients.
//!
//! Per voxel `v` with prediction `P` and reference `T`:
//!
//! ```text
//! ℓ_DTI = mean_k |t_k - p_k|
//! ℓ_Δ2  = |Δ2(T) - Δ2(P)|
//! ℓ_FA  = |FA(T) - FA(P)|
//! ρ     = det T / det P,   ξ = max(ρ, 1/ρ)
//! L_v   = ξ (α ℓ_DTI + β ℓ_Δ2) + γ ℓ_FA
//! ```
//!
//! and the total is the mean of `L_v` over masked voxels. Voxels where
//! either determinant is below [`DEGENERATE_DET`] in magnitude, or where the
//! ratio is not positive, drop the ξ-weighted part and keep only `γ ℓ_FA`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eigen::eigensystem;
use crate::error::{Error, Result};
use crate::reduce::{mean, pairwise_sum};
use crate::tensor::{matrix_grad_to_coeffs, DiffusionTensor, Mask, TensorVolume};

/// Determinant magnitude (mm⁶/s³) below which a voxel is treated as degenerate.
pub const DEGENERATE_DET: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 1e6, beta: 1e6, gamma: 10.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Sum of the three 2×2 principal minors.
pub fn delta2(t: &DiffusionTensor) -> f64 {
    let [xx, xy, xz, yy, yz, zz] = t.0;
    (xx * yy - xy * xy) + (xx * zz - xz * xz) + (yy * zz - yz * yz)
}

/// Determinant of the full tensor.
pub fn delta3(t: &DiffusionTensor) -> f64 {
    let [xx, xy, xz, yy, yz, zz] = t.0;
    xx * (yy * zz - yz * yz) - xy * (xy * zz - yz * xz) + xz * (xy * yz - yy * xz)
}

/// `∂Δ2/∂d` over the six stored coefficients.
fn delta2_grad(t: &DiffusionTensor) -> [f64; 6] {
    let [xx, xy, xz, yy, yz, zz] = t.0;
    [yy + zz, -2.0 * xy, -2.0 * xz, xx + zz, -2.0 * yz, xx + yy]
}

/// `∂det/∂d`: the cofactor matrix, off-diagonals counted twice.
fn delta3_grad(t: &DiffusionTensor) -> [f64; 6] {
    let [xx, xy, xz, yy, yz, zz] = t.0;
    [
        yy * zz - yz * yz,
        2.0 * (xz * yz - xy * zz),
        2.0 * (xy * yz - yy * xz),
        xx * zz - xz * xz,
        2.0 * (xy * xz - xx * yz),
        xx * yy - xy * xy,
    ]
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Volume penalty: `ρ` when `ρ ≥ 1`, `1/ρ` otherwise.
pub fn xi(rho: f64) -> Result<f64> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::NonFinite(format!("volume ratio {rho}")));
    }
    Ok(if rho >= 1.0 { rho } else { 1.0 / rho })
}

/// The same penalty written with rectifiers,
/// `ReLU(1-ρ)/ρ + ReLU(ρ-1) + 1`, summed as `ReLU(ρ-1) + (ReLU(1-ρ) + ρ)/ρ`
/// so that it rounds identically to [`xi`].
pub fn xi_relu(rho: f64) -> f64 {
    relu(rho - 1.0) + (relu(1.0 - rho) + rho) / rho
}

fn dxi_drho(rho: f64) -> f64 {
    if rho >= 1.0 {
        1.0
    } else {
        -1.0 / (rho * rho)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// FA and its gradient over the stored coefficients, via `∂λᵢ/∂D = vᵢvᵢᵀ`.
/// The gradient is zero where FA is zero (the cone tip) or undefined.
pub fn fa_with_grad(t: &DiffusionTensor) -> (f64, [f64; 6]) {
    let e = eigensystem(t);
    let [l1, l2, l3] = e.values;
    let sum_sq = l1 * l1 + l2 * l2 + l3 * l3;
    let disp = (l1 - l2).powi(2) + (l1 - l3).powi(2) + (l2 - l3).powi(2);
    if sum_sq == 0.0 {
        return (0.0, [0.0; 6]);
    }
    let fa = (disp / (2.0 * sum_sq)).sqrt();
    if fa == 0.0 {
        return (0.0, [0.0; 6]);
    }
    let tr = l1 + l2 + l3;
    let mut g = [[0.0; 3]; 3];
    for (l, v) in e.values.iter().zip(e.vectors.iter()) {
        let dfa = (2.0 * (3.0 * l - tr) * sum_sq - disp * 2.0 * l) / (4.0 * sum_sq * sum_sq * fa);
        for i in 0..3 {
            for j in 0..3 {
                g[i][j] += dfa * v[i] * v[j];
            }
        }
    }
    (fa, matrix_grad_to_coeffs(&g))
}

/// Loss terms and gradient of a single voxel pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelLoss {
    pub l_dti: f64,
    pub l_delta2: f64,
    pub l_fa: f64,
    /// `None` when the voxel is degenerate.
    pub xi: Option<f64>,
    pub value: f64,
    /// `∂value/∂pred`.
    pub grad: [f64; 6],
}

pub fn voxel_loss(pred: &DiffusionTensor, gt: &DiffusionTensor, w: &LossWeights) -> VoxelLoss {
    let mut grad = [0.0; 6];

    let mut l_dti = 0.0;
    let mut g_dti = [0.0; 6];
    for k in 0..6 {
        let r = gt.0[k] - pred.0[k];
        l_dti += r.abs();
        g_dti[k] = -sign(r) / 6.0;
    }
    l_dti /= 6.0;

    let r2 = delta2(gt) - delta2(pred);
    let l_delta2 = r2.abs();
    let d2g = delta2_grad(pred);
    let g_delta2 = d2g.map(|g| -sign(r2) * g);

    let (fa_gt, _) = fa_with_grad(gt);
    let (fa_pred, fa_g) = fa_with_grad(pred);
    let rf = fa_gt - fa_pred;
    let l_fa = rf.abs();
    for k in 0..6 {
        grad[k] += w.gamma * (-sign(rf) * fa_g[k]);
    }

    let det_gt = delta3(gt);
    let det_pred = delta3(pred);
    let rho = det_gt / det_pred;
    let degenerate = det_gt.abs() < DEGENERATE_DET || det_pred.abs() < DEGENERATE_DET;
    let xi_val = if degenerate { None } else { xi(rho).ok() };

    let mut value = w.gamma * l_fa;
    if let Some(x) = xi_val {
        let base = w.alpha * l_dti + w.beta * l_delta2;
        value += x * base;
        // ρ = det T / det P  ⇒  ∂ρ/∂p = -ρ/det P · ∂det P/∂p
        let drho = dxi_drho(rho) * (-rho / det_pred);
        let ddet = delta3_grad(pred);
        for k in 0..6 {
            grad[k] += drho * ddet[k] * base + x * (w.alpha * g_dti[k] + w.beta * g_delta2[k]);
        }
    }

    VoxelLoss { l_dti, l_delta2, l_fa, xi: xi_val, value, grad }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossReport {
    pub l_dti: f64,
    pub l_delta2: f64,
    pub l_fa: f64,
    pub xi_mean: f64,
    pub l_geo: f64,
    pub degenerate_voxels: usize,
    pub weights: LossWeights,
    /// `∂L_Geo/∂pred` per voxel (zero outside the mask).
    #[serde(skip)]
    pub grad: Vec<[f64; 6]>,
}

impl LossReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report fields are plain numbers")
    }
}

/// Mean geometry-constrained loss over the mask, with its gradient.
pub fn geo_loss(pred: &TensorVolume, gt: &TensorVolume, mask: &Mask, w: &LossWeights) -> Result<LossReport> {
    pred.check_same_grid(gt)?;
    mask.check_dims(pred.dims)?;
    w.validate()?;
    let idx = mask.indices();
    if idx.is_empty() {
        return Err(Error::EmptyMask);
    }
    let per_voxel: Vec<VoxelLoss> = idx.par_iter().map(|&v| voxel_loss(&pred.data[v], &gt.data[v], w)).collect();

    let xis: Vec<f64> = per_voxel.iter().filter_map(|l| l.xi).collect();
    if xis.is_empty() {
        return Err(Error::AllDegenerate);
    }
    let m = idx.len() as f64;
    let collect = |f: fn(&VoxelLoss) -> f64| per_voxel.iter().map(f).collect::<Vec<f64>>();

    let mut grad = vec![[0.0; 6]; pred.len()];
    for (&v, l) in idx.iter().zip(&per_voxel) {
        grad[v] = l.grad.map(|g| g / m);
    }
    Ok(LossReport {
        l_dti: mean(&collect(|l| l.l_dti)),
        l_delta2: mean(&collect(|l| l.l_delta2)),
        l_fa: mean(&collect(|l| l.l_fa)),
        xi_mean: mean(&xis),
        l_geo: pairwise_sum(&collect(|l| l.value)) / m,
        degenerate_voxels: idx.len() - xis.len(),
        weights: *w,
        grad,
    })
}

/// Relative disagreement `|a - b| / max(|a|, |b|)`, zero when both vanish.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Worst relative error between the analytic gradient and five-point central
/// differences of the total loss with the given coefficient step.
///
/// Only meaningful where every voxel is away from the kinks of the L1 terms;
/// at `pred == gt` the two-sided slope and the subgradient differ by design.
pub fn gradient_check(pred: &TensorVolume, gt: &TensorVolume, mask: &Mask, w: &LossWeights, step: f64) -> Result<f64> {
    let report = geo_loss(pred, gt, mask, w)?;
    let mut worst: f64 = 0.0;
    let mut probe = pred.clone();
    for v in mask.indices() {
        for k in 0..6 {
            let orig = probe.data[v].0[k];
            let mut at = |h: f64| -> Result<f64> {
                probe.data[v].0[k] = orig + h;
                geo_loss(&probe, gt, mask, w).map(|r| r.l_geo)
            };
            let (p1, m1, p2, m2) = (at(step)?, at(-step)?, at(2.0 * step)?, at(-2.0 * step)?);
            probe.data[v].0[k] = orig;
            let fd = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * step);
            worst = worst.max(relative_error(report.grad[v][k], fd));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorfit::eigensystem_metrics;

    #[test]
    fn minors_and_determinant() {
        let id = DiffusionTensor::diag(1.0, 1.0, 1.0);
        assert_eq!(delta2(&id), 3.0);
        assert_eq!(delta3(&id), 1.0);
        assert_eq!(delta2(&DiffusionTensor::ZERO), 0.0);
        let d = DiffusionTensor::diag(3e-3, 2e-3, 1e-3);
        // ab + ac + bc
        assert!((delta2(&d) - (6e-6 + 3e-6 + 2e-6)).abs() < 1e-21);
        assert!((delta3(&d) - 6e-9).abs() < 1e-24);
    }

    #[test]
    fn xi_values() {
        assert_eq!(xi(1.0).unwrap(), 1.0);
        assert_eq!(xi(2.0).unwrap(), 2.0);
        assert_eq!(xi(0.25).unwrap(), 4.0);
        assert!(xi(0.0).is_err());
        assert!(xi(-1.0).is_err());
        assert!(xi(f64::NAN).is_err());
        for rho in [1e-6, 0.1, 0.3, 0.7, 1.0, 1.5, 7.0, 1e6] {
            assert_eq!(xi(rho).unwrap(), xi_relu(rho));
        }
    }

    #[test]
    fn identical_fields_are_stationary() {
        let t = DiffusionTensor([1.2e-3, 1e-4, -2e-4, 0.8e-3, 5e-5, 0.5e-3]);
        let l = voxel_loss(&t, &t, &LossWeights::default());
        assert_eq!((l.l_dti, l.l_delta2, l.l_fa, l.value), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(l.xi, Some(1.0));
        assert_eq!(l.grad, [0.0; 6]);
    }

    #[test]
    fn hand_evaluated_voxel() {
        let gt = DiffusionTensor::diag(2e-3, 1e-3, 1e-3);
        let pred = DiffusionTensor::diag(1e-3, 1e-3, 1e-3);
        let w = LossWeights::default();
        let l = voxel_loss(&pred, &gt, &w);
        assert!((l.l_dti - 1e-3 / 6.0).abs() < 1e-18);
        assert!((l.l_delta2 - 2e-6).abs() < 1e-20);
        assert!((l.xi.unwrap() - 2.0).abs() < 1e-12);
        assert!((l.l_fa - (1.0f64 / 6.0).sqrt()).abs() < 1e-14);
        let want = 2.0 * (1e6 * 1e-3 / 6.0 + 1e6 * 2e-6) + 10.0 * (1.0f64 / 6.0).sqrt();
        assert!((l.value - want).abs() < 1e-9);
    }

    #[test]
    fn fa_gradient_matches_invariant_form() {
        // FA² = 3/2 - tr(D)² / (2‖D‖²) gives an eigen-free gradient.
        let t = DiffusionTensor([1.5e-3, 2e-4, -1e-4, 9e-4, 3e-4, 6e-4]);
        let (fa, g) = fa_with_grad(&t);
        assert!((fa - eigensystem_metrics(&t).fa).abs() < 1e-15);
        let d = t.0;
        let tr = t.trace();
        let fro = d[0] * d[0] + d[3] * d[3] + d[5] * d[5] + 2.0 * (d[1] * d[1] + d[2] * d[2] + d[4] * d[4]);
        let weights = [1.0, 2.0, 2.0, 1.0, 2.0, 1.0];
        let diag = [1.0, 0.0, 0.0, 1.0, 0.0, 1.0];
        for k in 0..6 {
            // ∂(FA²)/∂d_k = -(tr·diag_k)/‖D‖² + tr²·(w_k d_k)/‖D‖⁴
            let dfa2 = -tr * diag[k] / fro + tr * tr * weights[k] * d[k] / (fro * fro);
            let want = dfa2 / (2.0 * fa);
            assert!(relative_error(g[k], want) < 1e-9, "{k}: {} vs {want}", g[k]);
        }
    }

    #[test]
    fn degenerate_voxels_excluded() {
        let gt = DiffusionTensor::diag(1e-3, 1e-3, 0.0);
        let pred = DiffusionTensor::diag(1e-3, 1e-3, 1e-3);
        let l = voxel_loss(&pred, &gt, &LossWeights::default());
        assert_eq!(l.xi, None);
        assert_eq!(l.value, 10.0 * l.l_fa);

        let dims = [1, 1, 1];
        let a = TensorVolume::new(dims, vec![gt]).unwrap();
        let b = TensorVolume::new(dims, vec![pred]).unwrap();
        assert!(matches!(geo_loss(&b, &a, &Mask::full(dims), &LossWeights::default()), Err(Error::AllDegenerate)));
        assert!(matches!(geo_loss(&b, &a, &Mask::empty(dims), &LossWeights::default()), Err(Error::EmptyMask)));
    }

    #[test]
    fn report_json_keys() {
        let t = DiffusionTensor::diag(1e-3, 1e-3, 1e-3);
        let v = TensorVolume::new([1, 1, 1], vec![t]).unwrap();
        let r = geo_loss(&v, &v, &Mask::full([1, 1, 1]), &LossWeights::default()).unwrap();
        let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        for key in ["l_dti", "l_delta2", "l_fa", "xi_mean", "l_geo", "degenerate_voxels", "weights"] {
            assert!(json.get(key).is_some(), "{key}");
        }
        assert!(json.get("grad").is_none());
        assert_eq!(json["weights"]["alpha"], 1e6);
    }
}
