//! Volume containers and file formats.

mod nifti;
mod phantom;

pub use nifti::{read_nifti, read_nifti_bytes, write_nifti, write_nifti_bytes};
pub use phantom::{synth_phantom, write_phantom_dir, Phantom, PhantomKind, PHANTOM_B0_SIGNAL};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DiffusionTensor, Mask, TensorVolume, IDENTITY_AFFINE};

/// On-disk element type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DataType {
    Uint8,
    Int16,
    Float32,
    Float64,
}

impl DataType {
    pub fn name(self) -> &'static str {
        match self {
            DataType::Uint8 => "uint8",
            DataType::Int16 => "int16",
            DataType::Float32 => "float32",
            DataType::Float64 => "float64",
        }
    }
}

/// A 3D or 4D image. Samples are held as f64 with x varying fastest
/// (the NIfTI on-disk order), then y, z and the volume index.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: Vec<usize>,
    /// mm per axis, one entry per dimension.
    pub spacing: Vec<f64>,
    /// Voxel-to-world transform, row-major.
    pub affine: [[f64; 4]; 4],
    pub dtype: DataType,
    pub data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.len() > 4 || dims.contains(&0) {
            return Err(Error::DimensionMismatch(format!("unsupported extents {dims:?}")));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::DimensionMismatch(format!("{} samples for extents {dims:?}", data.len())));
        }
        let spacing = vec![1.0; dims.len()];
        Ok(Volume { dims, spacing, affine: IDENTITY_AFFINE, dtype: DataType::Float64, data })
    }

    pub fn scalar(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        Self::new(dims.to_vec(), data)
    }

    /// Overrides spacing (leading axes) and the affine.
    pub fn with_geometry_of(mut self, spacing: &[f64], affine: [[f64; 4]; 4]) -> Self {
        for (i, s) in self.spacing.iter_mut().enumerate() {
            if let Some(v) = spacing.get(i) {
                *s = *v;
            }
        }
        self.affine = affine;
        self
    }

    pub fn spatial_dims(&self) -> [usize; 3] {
        [self.dims[0], self.dims.get(1).copied().unwrap_or(1), self.dims.get(2).copied().unwrap_or(1)]
    }

    pub fn n_voxels(&self) -> usize {
        self.spatial_dims().iter().product()
    }

    /// Length of the fourth axis (1 for 3D images).
    pub fn n_volumes(&self) -> usize {
        self.dims.get(3).copied().unwrap_or(1)
    }

    /// Sample of volume `t` at linear voxel index `v`.
    pub fn at(&self, v: usize, t: usize) -> f64 {
        self.data[v + self.n_voxels() * t]
    }

    /// Nonzero voxels of the first volume.
    pub fn to_mask(&self) -> Mask {
        let n = self.n_voxels();
        Mask { dims: self.spatial_dims(), data: self.data[..n].iter().map(|&v| v != 0.0).collect() }
    }

    pub fn from_mask(mask: &Mask) -> Self {
        let data = mask.data.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect();
        let mut v = Self::scalar(mask.dims, data).unwrap();
        v.dtype = DataType::Uint8;
        v
    }

    /// Packs a tensor field as a 4D image with six components in
    /// `[Dxx, Dxy, Dxz, Dyy, Dyz, Dzz]` order.
    pub fn from_tensor_volume(t: &TensorVolume) -> Self {
        let n = t.len();
        let mut data = vec![0.0; n * 6];
        for (v, d) in t.data.iter().enumerate() {
            for k in 0..6 {
                data[v + n * k] = d.0[k];
            }
        }
        let mut dims = t.dims.to_vec();
        dims.push(6);
        let mut vol = Self::new(dims, data).unwrap();
        vol.spacing[..3].copy_from_slice(&t.spacing);
        vol.affine = t.affine;
        vol
    }

    pub fn to_tensor_volume(&self) -> Result<TensorVolume> {
        if self.dims.len() != 4 || self.dims[3] != 6 {
            return Err(Error::DimensionMismatch(format!(
                "tensor volumes need 6 components on the fourth axis, got extents {:?}",
                self.dims
            )));
        }
        let n = self.n_voxels();
        let data = (0..n)
            .map(|v| {
                let mut d = [0.0; 6];
                for (k, c) in d.iter_mut().enumerate() {
                    *c = self.data[v + n * k];
                }
                DiffusionTensor(d)
            })
            .collect();
        let mut t = TensorVolume::new(self.spatial_dims(), data)?;
        t.spacing.copy_from_slice(&self.spacing_3());
        t.affine = self.affine;
        Ok(t)
    }

    fn spacing_3(&self) -> [f64; 3] {
        [self.spacing[0], self.spacing.get(1).copied().unwrap_or(1.0), self.spacing.get(2).copied().unwrap_or(1.0)]
    }

    /// The listed volumes of a 4D image, in the given order.
    pub fn select_volumes(&self, which: &[usize]) -> Result<Volume> {
        let nt = self.n_volumes();
        if which.is_empty() {
            return Err(Error::InvalidArgument("no volumes selected".into()));
        }
        if let Some(&bad) = which.iter().find(|&&t| t >= nt) {
            return Err(Error::InvalidArgument(format!("volume {bad} out of range for {nt} volumes")));
        }
        let n = self.n_voxels();
        let mut data = Vec::with_capacity(n * which.len());
        for &t in which {
            data.extend_from_slice(&self.data[n * t..n * (t + 1)]);
        }
        let mut dims = self.spatial_dims().to_vec();
        dims.push(which.len());
        let mut out = Volume::new(dims, data)?;
        out.spacing[..3].copy_from_slice(&self.spacing_3());
        out.affine = self.affine;
        out.dtype = self.dtype;
        Ok(out)
    }

    pub fn check_spatial(&self, dims: [usize; 3], what: &str) -> Result<()> {
        if self.spatial_dims() != dims {
            return Err(Error::DimensionMismatch(format!(
                "{what} is {:?} but expected {:?}",
                self.spatial_dims(),
                dims
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_packing_round_trip() {
        let data: Vec<DiffusionTensor> = (0..8).map(|i| DiffusionTensor([i as f64, 1.0, 2.0, 3.0, 4.0, 5.0])).collect();
        let t = TensorVolume::new([2, 2, 2], data).unwrap();
        let v = Volume::from_tensor_volume(&t);
        assert_eq!(v.dims, vec![2, 2, 2, 6]);
        assert_eq!(v.at(3, 0), 3.0);
        assert_eq!(v.at(3, 4), 4.0);
        assert_eq!(v.to_tensor_volume().unwrap(), t);
    }

    #[test]
    fn wrong_component_count_rejected() {
        let v = Volume::new(vec![2, 2, 2, 7], vec![0.0; 56]).unwrap();
        assert!(matches!(v.to_tensor_volume(), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn bad_extents_rejected() {
        assert!(Volume::new(vec![2, 0, 2], vec![]).is_err());
        assert!(Volume::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn select_volumes_reorders() {
        let v = Volume::new(vec![2, 1, 1, 3], vec![0.0, 1.0, 10.0, 11.0, 20.0, 21.0]).unwrap();
        let s = v.select_volumes(&[2, 0]).unwrap();
        assert_eq!(s.dims, vec![2, 1, 1, 2]);
        assert_eq!(s.data, vec![20.0, 21.0, 0.0, 1.0]);
        assert!(v.select_volumes(&[3]).is_err());
    }
}
