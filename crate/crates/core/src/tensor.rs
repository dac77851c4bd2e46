//! Diffusion tensors, tensor volumes and voxel masks.

use crate::error::{Error, Result};

pub type Mat3 = [[f64; 3]; 3];

/// Symmetric diffusion tensor stored as its six unique coefficients
/// `[Dxx, Dxy, Dxz, Dyy, Dyz, Dzz]` (mm²/s).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DiffusionTensor(pub [f64; 6]);

/// Coefficient index of each matrix element.
pub const COEFF_INDEX: [[usize; 3]; 3] = [[0, 1, 2], [1, 3, 4], [2, 4, 5]];

impl DiffusionTensor {
    pub const ZERO: DiffusionTensor = DiffusionTensor([0.0; 6]);

    pub fn diag(a: f64, b: f64, c: f64) -> Self {
        DiffusionTensor([a, 0.0, 0.0, b, 0.0, c])
    }

    pub fn coeffs(&self) -> &[f64; 6] {
        &self.0
    }

    pub fn matrix(&self) -> Mat3 {
        let d = &self.0;
        [[d[0], d[1], d[2]], [d[1], d[3], d[4]], [d[2], d[4], d[5]]]
    }

    /// Takes the upper triangle of `m`; callers pass symmetric matrices.
    pub fn from_matrix(m: &Mat3) -> Self {
        DiffusionTensor([m[0][0], m[0][1], m[0][2], m[1][1], m[1][2], m[2][2]])
    }

    /// Builds `V diag(λ) Vᵀ` from eigenvalues and unit eigenvectors.
    pub fn from_eigen(values: [f64; 3], vectors: [[f64; 3]; 3]) -> Self {
        let mut m = [[0.0; 3]; 3];
        for (l, v) in values.iter().zip(vectors.iter()) {
            for i in 0..3 {
                for j in 0..3 {
                    m[i][j] += l * v[i] * v[j];
                }
            }
        }
        Self::from_matrix(&m)
    }

    /// `R D Rᵀ`.
    pub fn rotated(&self, r: &Mat3) -> Self {
        let d = self.matrix();
        let rd = matmul(r, &d);
        Self::from_matrix(&matmul(&rd, &transpose(r)))
    }

    pub fn trace(&self) -> f64 {
        self.0[0] + self.0[3] + self.0[5]
    }

    /// Apparent diffusivity `gᵀ D g` along a direction.
    pub fn quadratic_form(&self, g: [f64; 3]) -> f64 {
        let d = &self.0;
        d[0] * g[0] * g[0]
            + d[3] * g[1] * g[1]
            + d[5] * g[2] * g[2]
            + 2.0 * (d[1] * g[0] * g[1] + d[2] * g[0] * g[2] + d[4] * g[1] * g[2])
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

pub fn matmul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    out
}

pub fn transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

/// Converts a symmetric matrix gradient `∂f/∂D` into the gradient with
/// respect to the six stored coefficients (off-diagonals appear twice).
pub fn matrix_grad_to_coeffs(g: &Mat3) -> [f64; 6] {
    [g[0][0], g[0][1] + g[1][0], g[0][2] + g[2][0], g[1][1], g[1][2] + g[2][1], g[2][2]]
}

/// Binary voxel mask over a 3D grid, x fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub dims: [usize; 3],
    pub data: Vec<bool>,
}

impl Mask {
    pub fn full(dims: [usize; 3]) -> Self {
        Mask { dims, data: vec![true; dims.iter().product()] }
    }

    pub fn empty(dims: [usize; 3]) -> Self {
        Mask { dims, data: vec![false; dims.iter().product()] }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..self.data.len()).filter(|&i| self.data[i]).collect()
    }

    pub fn check_dims(&self, dims: [usize; 3]) -> Result<()> {
        if self.dims != dims {
            return Err(Error::DimensionMismatch(format!("mask is {:?} but data is {:?}", self.dims, dims)));
        }
        Ok(())
    }
}

/// Linear index with x varying fastest.
pub fn voxel_index(dims: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    x + dims[0] * (y + dims[1] * z)
}

/// A 3D grid of tensors with geometry metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorVolume {
    pub dims: [usize; 3],
    /// Voxel size in mm.
    pub spacing: [f64; 3],
    /// Voxel-to-world transform, row-major.
    pub affine: [[f64; 4]; 4],
    pub data: Vec<DiffusionTensor>,
    /// Voxels whose fit failed (nonpositive signal); they hold the zero tensor.
    pub invalid_voxels: usize,
}

pub const IDENTITY_AFFINE: [[f64; 4]; 4] =
    [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]];

impl TensorVolume {
    pub fn new(dims: [usize; 3], data: Vec<DiffusionTensor>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::DimensionMismatch(format!("{} tensors for grid {:?}", data.len(), dims)));
        }
        Ok(TensorVolume { dims, spacing: [1.0; 3], affine: IDENTITY_AFFINE, data, invalid_voxels: 0 })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Self::new(dims, vec![DiffusionTensor::ZERO; dims.iter().product()]).unwrap()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn check_same_grid(&self, other: &TensorVolume) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::DimensionMismatch(format!("tensor volumes {:?} and {:?}", self.dims, other.dims)));
        }
        Ok(())
    }

    /// One scalar volume per coefficient, in storage order.
    pub fn component(&self, k: usize) -> Vec<f64> {
        self.data.iter().map(|t| t.0[k]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_round_trip_and_quadratic_form() {
        let t = DiffusionTensor([1.0, 0.2, 0.3, 2.0, 0.4, 3.0]);
        assert_eq!(DiffusionTensor::from_matrix(&t.matrix()), t);
        let g = [0.6, 0.0, 0.8];
        let m = t.matrix();
        let mut direct = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                direct += g[i] * m[i][j] * g[j];
            }
        }
        assert!((t.quadratic_form(g) - direct).abs() < 1e-15);
    }

    #[test]
    fn rotation_by_quarter_turn_swaps_axes() {
        let r = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        let t = DiffusionTensor::diag(3.0, 2.0, 1.0).rotated(&r);
        assert_eq!(t, DiffusionTensor::diag(2.0, 3.0, 1.0));
    }

    #[test]
    fn grid_size_checked() {
        assert!(TensorVolume::new([2, 2, 2], vec![DiffusionTensor::ZERO; 7]).is_err());
    }
}
