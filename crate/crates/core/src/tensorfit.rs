//! Log-linear tensor fitting and eigenvalue-derived scalar metrics.

use nalgebra::{Cholesky, Matrix6, SymmetricEigen, Vector6, U6};
use rayon::prelude::*;
use serde::Serialize;

use crate::eigen::{eigensystem, EigenSystem};
use crate::error::{Error, Result};
use crate::gradscheme::{GradientScheme, UNIT_TOLERANCE};
use crate::tensor::{DiffusionTensor, Mask, TensorVolume};
use crate::volumeio::Volume;

/// Smallest accepted ratio between the extreme eigenvalues of the normal matrix.
const MIN_NORMAL_CONDITION: f64 = 1e-12;

/// Row of the linearized signal equation for direction `g`:
/// `[gx², 2gxgy, 2gxgz, gy², 2gygz, gz²]`.
pub fn design_row(g: [f64; 3]) -> Result<[f64; 6]> {
    let n = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
    if (n - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::NonUnitVector { norm: n });
    }
    Ok(design_row_unchecked(g))
}

fn design_row_unchecked(g: [f64; 3]) -> [f64; 6] {
    let [x, y, z] = g;
    [x * x, 2.0 * x * y, 2.0 * x * z, y * y, 2.0 * y * z, z * z]
}

/// Noiseless signals `S0·exp(-b gᵀDg)` for every entry of the scheme.
pub fn simulate_signals(t: &DiffusionTensor, scheme: &GradientScheme, s0: f64) -> Vec<f64> {
    scheme
        .entries()
        .iter()
        .map(|e| if e.is_b0() { s0 } else { s0 * (-e.bval * t.quadratic_form(e.bvec)).exp() })
        .collect()
}

/// Precomputed least-squares solver for one gradient scheme.
#[derive(Debug, Clone)]
pub struct TensorFitter {
    b0: Vec<usize>,
    dwi: Vec<(usize, f64, [f64; 6])>,
    normal: Cholesky<f64, U6>,
}

impl TensorFitter {
    pub fn new(scheme: &GradientScheme) -> Result<Self> {
        let b0 = scheme.b0_indices();
        if b0.is_empty() {
            return Err(Error::InvalidScheme("fitting requires at least one b0 entry".into()));
        }
        let dwi: Vec<(usize, f64, [f64; 6])> = scheme
            .entries()
            .iter()
            .enumerate()
            .filter(|(_, e)| !e.is_b0())
            .map(|(i, e)| (i, e.bval, design_row_unchecked(e.bvec)))
            .collect();
        if dwi.len() < 6 {
            return Err(Error::RankDeficient(format!("{} diffusion-weighted entries, need 6", dwi.len())));
        }
        let mut gtg = Matrix6::<f64>::zeros();
        for (_, _, row) in &dwi {
            let r = Vector6::from_row_slice(row);
            gtg += r * r.transpose();
        }
        let eig = SymmetricEigen::new(gtg);
        let max = eig.eigenvalues.max();
        let min = eig.eigenvalues.min();
        if !(min > MIN_NORMAL_CONDITION * max) {
            return Err(Error::RankDeficient(format!("normal matrix eigenvalues span [{min:e}, {max:e}]")));
        }
        let normal =
            Cholesky::new(gtg).ok_or_else(|| Error::RankDeficient("normal matrix is not positive definite".into()))?;
        Ok(TensorFitter { b0, dwi, normal })
    }

    pub fn n_entries(&self) -> usize {
        self.b0.len() + self.dwi.len()
    }

    /// Fits one voxel. `signals` is indexed like the scheme.
    pub fn fit(&self, signals: &[f64]) -> Result<DiffusionTensor> {
        if signals.len() != self.n_entries() {
            return Err(Error::DimensionMismatch(format!(
                "{} signals for a {}-entry scheme",
                signals.len(),
                self.n_entries()
            )));
        }
        for (index, &s) in signals.iter().enumerate() {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::NonpositiveSignal { index });
            }
        }
        let s0 = self.b0.iter().map(|&i| signals[i]).sum::<f64>() / self.b0.len() as f64;
        let ln_s0 = s0.ln();
        let mut rhs = Vector6::<f64>::zeros();
        for &(i, bval, row) in &self.dwi {
            let y = (ln_s0 - signals[i].ln()) / bval;
            for k in 0..6 {
                rhs[k] += row[k] * y;
            }
        }
        let d = self.normal.solve(&rhs);
        Ok(DiffusionTensor([d[0], d[1], d[2], d[3], d[4], d[5]]))
    }
}

/// Fits a single voxel: `S0` is the mean of the b0 signals and the six
/// coefficients solve the normal equations of the log-linearized system.
pub fn fit_voxel(signals: &[f64], scheme: &GradientScheme) -> Result<DiffusionTensor> {
    TensorFitter::new(scheme)?.fit(signals)
}

/// Fits every masked voxel of a 4D DWI volume. Voxels with nonpositive
/// signals are left at zero and counted in `invalid_voxels`.
pub fn fit_volume(dwi: &Volume, scheme: &GradientScheme, mask: &Mask) -> Result<TensorVolume> {
    if dwi.dims.len() != 4 || dwi.n_volumes() != scheme.len() {
        return Err(Error::DimensionMismatch(format!(
            "DWI extents {:?} do not match a {}-entry scheme",
            dwi.dims,
            scheme.len()
        )));
    }
    let dims = dwi.spatial_dims();
    mask.check_dims(dims)?;
    let fitter = TensorFitter::new(scheme)?;
    let nt = scheme.len();

    let results: Vec<Option<DiffusionTensor>> = (0..dwi.n_voxels())
        .into_par_iter()
        .map(|v| {
            if !mask.data[v] {
                return Some(DiffusionTensor::ZERO);
            }
            let signals: Vec<f64> = (0..nt).map(|t| dwi.at(v, t)).collect();
            fitter.fit(&signals).ok()
        })
        .collect();

    let invalid_voxels = results.iter().filter(|r| r.is_none()).count();
    let data = results.into_iter().map(|r| r.unwrap_or(DiffusionTensor::ZERO)).collect();
    let mut out = TensorVolume::new(dims, data)?;
    out.spacing = [dwi.spacing[0], dwi.spacing[1], dwi.spacing[2]];
    out.affine = dwi.affine;
    out.invalid_voxels = invalid_voxels;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalarMetrics {
    pub fa: f64,
    pub md: f64,
    pub ad: f64,
    pub rd: f64,
}

/// AD = λ1, MD = mean eigenvalue, RD = (λ2+λ3)/2, and FA as the
/// normalized eigenvalue dispersion. FA is 0 for the zero tensor.
///
/// Eigenvalues are used as given; an indefinite tensor can have FA up to √1.5.
pub fn scalar_metrics(e: &EigenSystem) -> ScalarMetrics {
    let [l1, l2, l3] = e.values;
    let num = (l1 - l2).powi(2) + (l1 - l3).powi(2) + (l2 - l3).powi(2);
    let den = 2.0 * (l1 * l1 + l2 * l2 + l3 * l3);
    let fa = if den == 0.0 { 0.0 } else { (num / den).sqrt() };
    ScalarMetrics { fa, md: (l1 + l2 + l3) / 3.0, ad: l1, rd: (l2 + l3) / 2.0 }
}

pub fn eigensystem_metrics(t: &DiffusionTensor) -> ScalarMetrics {
    scalar_metrics(&eigensystem(t))
}

/// FA / MD / AD / RD images of a tensor field.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarMaps {
    pub dims: [usize; 3],
    pub fa: Vec<f64>,
    pub md: Vec<f64>,
    pub ad: Vec<f64>,
    pub rd: Vec<f64>,
}

impl ScalarMaps {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        match name {
            "fa" => Some(&self.fa),
            "md" => Some(&self.md),
            "ad" => Some(&self.ad),
            "rd" => Some(&self.rd),
            _ => None,
        }
    }
}

pub fn scalar_maps(t: &TensorVolume) -> ScalarMaps {
    let metrics: Vec<ScalarMetrics> = t.data.par_iter().map(eigensystem_metrics).collect();
    ScalarMaps {
        dims: t.dims,
        fa: metrics.iter().map(|m| m.fa).collect(),
        md: metrics.iter().map(|m| m.md).collect(),
        ad: metrics.iter().map(|m| m.ad).collect(),
        rd: metrics.iter().map(|m| m.rd).collect(),
    }
}
