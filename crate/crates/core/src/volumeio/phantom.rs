//! Synthetic DWI phantoms with known tensors.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use super::{write_nifti, DataType, Volume};
use crate::error::{Error, Result};
use crate::gradscheme::GradientScheme;
use crate::tensor::{DiffusionTensor, Mask, Mat3, TensorVolume};
use crate::tensorfit::simulate_signals;

/// Unweighted signal level of every phantom voxel.
pub const PHANTOM_B0_SIGNAL: f64 = 1000.0;
const PHANTOM_BVAL: f64 = 1000.0;
const PHANTOM_DIRECTIONS: usize = 90;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhantomKind {
    /// `md·I` with a per-voxel random mean diffusivity.
    Isotropic,
    /// Two perpendicular prolate populations with an oblate crossing core.
    Crossing,
    /// Prolate tensors of random orientation whose FA rises along x.
    GradientFa,
}

impl FromStr for PhantomKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "isotropic" => Ok(PhantomKind::Isotropic),
            "crossing" => Ok(PhantomKind::Crossing),
            "gradient-fa" => Ok(PhantomKind::GradientFa),
            other => Err(Error::InvalidArgument(format!("unknown phantom kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub dwi: Volume,
    pub scheme: GradientScheme,
    pub gt_tensor: TensorVolume,
    pub mask: Volume,
}

fn random_rotation(rng: &mut impl Rng) -> Mat3 {
    let mut q = [0.0f64; 4];
    loop {
        for v in q.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-6 {
            for v in q.iter_mut() {
                *v /= n;
            }
            break;
        }
    }
    let [a, b, c, d] = q;
    [
        [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
        [2.0 * (b * c + a * d), a * a - b * b + c * c - d * d, 2.0 * (c * d - a * b)],
        [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a - b * b - c * c + d * d],
    ]
}

/// Prolate eigenvalues `(a, b, b)` with mean `md` and the requested FA.
fn prolate_for_fa(md: f64, fa: f64) -> (f64, f64) {
    let k = fa * (3.0 / (9.0 - 6.0 * fa * fa)).sqrt();
    (md * (1.0 + 2.0 * k), md * (1.0 - k))
}

fn tensors_for(kind: PhantomKind, dims: [usize; 3], rng: &mut ChaCha8Rng) -> Vec<DiffusionTensor> {
    let mut out = Vec::with_capacity(dims.iter().product());
    let fibre_x = DiffusionTensor::diag(1.7e-3, 0.3e-3, 0.3e-3);
    let fibre_y = DiffusionTensor::diag(0.3e-3, 1.7e-3, 0.3e-3);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let t = match kind {
                    PhantomKind::Isotropic => {
                        let md = 0.7e-3 + 0.3e-3 * rng.random::<f64>();
                        DiffusionTensor::diag(md, md, md)
                    }
                    PhantomKind::GradientFa => {
                        let fa = 0.1 + 0.8 * x as f64 / (dims[0] - 1) as f64;
                        let (a, b) = prolate_for_fa(0.8e-3, fa);
                        DiffusionTensor::diag(a, b, b).rotated(&random_rotation(rng))
                    }
                    PhantomKind::Crossing => {
                        let cx = x as f64 - (dims[0] as f64 - 1.0) / 2.0;
                        let cy = y as f64 - (dims[1] as f64 - 1.0) / 2.0;
                        let core = cx.abs() < dims[0] as f64 / 4.0 && cy.abs() < dims[1] as f64 / 4.0;
                        if core {
                            let mut d = [0.0; 6];
                            for k in 0..6 {
                                d[k] = 0.5 * (fibre_x.0[k] + fibre_y.0[k]);
                            }
                            DiffusionTensor(d)
                        } else if z < dims[2] / 2 {
                            fibre_x
                        } else {
                            fibre_y
                        }
                    }
                };
                out.push(t);
            }
        }
    }
    out
}

/// Generates a phantom on a `1 b0 + 90` direction, b = 1000 s/mm² scheme.
/// `snr = None` gives noiseless signals; otherwise Rician noise with
/// `σ = S0 / snr` is added to every volume.
pub fn synth_phantom(dims: [usize; 3], kind: PhantomKind, seed: u64, snr: Option<f64>) -> Result<Phantom> {
    if dims.iter().any(|&d| d < 4) {
        return Err(Error::InvalidArgument(format!("phantom extents must be at least 4, got {dims:?}")));
    }
    if let Some(s) = snr {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::InvalidArgument(format!("snr must be positive, got {s}")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scheme = GradientScheme::electrostatic(PHANTOM_DIRECTIONS, PHANTOM_BVAL);
    let tensors = tensors_for(kind, dims, &mut rng);
    let n = tensors.len();
    let nt = scheme.len();
    let mut data = vec![0.0; n * nt];
    let noise = snr.map(|s| Normal::new(0.0, PHANTOM_B0_SIGNAL / s).unwrap());
    for (v, t) in tensors.iter().enumerate() {
        let signals = simulate_signals(t, &scheme, PHANTOM_B0_SIGNAL);
        for (k, s) in signals.into_iter().enumerate() {
            data[v + n * k] = match &noise {
                Some(dist) => {
                    let re = s + dist.sample(&mut rng);
                    let im = dist.sample(&mut rng);
                    re.hypot(im)
                }
                None => s,
            };
        }
    }
    let mut dwi_dims = dims.to_vec();
    dwi_dims.push(nt);
    let dwi = Volume::new(dwi_dims, data)?;
    let gt_tensor = TensorVolume::new(dims, tensors)?;
    let mask = Volume::from_mask(&Mask::full(dims));
    Ok(Phantom { dwi, scheme, gt_tensor, mask })
}

/// Writes `dwi.nii.gz`, `bvecs`, `bvals`, `tensor.nii.gz` and `mask.nii.gz`.
pub fn write_phantom_dir(p: &Phantom, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    write_nifti(&p.dwi, dir.join("dwi.nii.gz"), DataType::Float64)?;
    let (bvecs, bvals) = p.scheme.to_fsl();
    fs::write(dir.join("bvecs"), bvecs)?;
    fs::write(dir.join("bvals"), bvals)?;
    write_nifti(&Volume::from_tensor_volume(&p.gt_tensor), dir.join("tensor.nii.gz"), DataType::Float64)?;
    write_nifti(&p.mask, dir.join("mask.nii.gz"), DataType::Uint8)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorfit::{eigensystem_metrics, fit_volume};

    #[test]
    fn isotropic_fa_is_zero() {
        let p = synth_phantom([4, 4, 4], PhantomKind::Isotropic, 1, None).unwrap();
        for t in &p.gt_tensor.data {
            assert_eq!(eigensystem_metrics(t).fa, 0.0);
        }
    }

    #[test]
    fn gradient_fa_increases_along_x() {
        let p = synth_phantom([6, 4, 4], PhantomKind::GradientFa, 3, None).unwrap();
        let dims = p.gt_tensor.dims;
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                let fa: Vec<f64> = (0..dims[0])
                    .map(|x| eigensystem_metrics(&p.gt_tensor.data[x + dims[0] * (y + dims[1] * z)]).fa)
                    .collect();
                assert!(fa.windows(2).all(|w| w[1] > w[0]), "{fa:?}");
                assert!((fa[0] - 0.1).abs() < 1e-12);
                assert!((fa[dims[0] - 1] - 0.9).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synth_phantom([4, 5, 4], PhantomKind::Crossing, 9, Some(20.0)).unwrap();
        let b = synth_phantom([4, 5, 4], PhantomKind::Crossing, 9, Some(20.0)).unwrap();
        assert_eq!(a.dwi, b.dwi);
        assert_eq!(a.gt_tensor, b.gt_tensor);
        let c = synth_phantom([4, 5, 4], PhantomKind::Crossing, 10, Some(20.0)).unwrap();
        assert_ne!(a.dwi, c.dwi);
    }

    #[test]
    fn noiseless_refit_reproduces_truth() {
        for kind in [PhantomKind::Isotropic, PhantomKind::Crossing, PhantomKind::GradientFa] {
            let p = synth_phantom([4, 4, 4], kind, 5, None).unwrap();
            let fit = fit_volume(&p.dwi, &p.scheme, &p.mask.to_mask()).unwrap();
            assert_eq!(fit.invalid_voxels, 0);
            for (a, b) in fit.data.iter().zip(&p.gt_tensor.data) {
                for k in 0..6 {
                    assert!((a.0[k] - b.0[k]).abs() < 1e-10 * b.max_abs().max(1e-3));
                }
            }
        }
    }

    #[test]
    fn rejects_small_shapes_and_unknown_kind() {
        assert!(synth_phantom([3, 4, 4], PhantomKind::Isotropic, 0, None).is_err());
        assert!("spiral".parse::<PhantomKind>().is_err());
    }
}
