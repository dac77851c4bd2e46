//! Masked error metrics, volumetric SSIM and per-tract FA summaries.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::reduce::{mean, mean_std};
use crate::tensor::{Mask, TensorVolume};
use crate::tensorfit::scalar_maps;
use crate::volumeio::Volume;

/// Edge length of the uniform SSIM window.
pub const SSIM_WINDOW: usize = 7;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Mean and population SD of `|a - b|` over masked voxels, where each
/// voxel's error is first averaged over its `n_comp` components
/// (component-major layout, as in a 4D image).
pub fn masked_mae_slices(a: &[f64], b: &[f64], n_comp: usize, mask: &Mask) -> Result<(f64, f64)> {
    let n = mask.data.len();
    if a.len() != b.len() || a.len() != n * n_comp {
        return Err(Error::DimensionMismatch(format!(
            "{} and {} samples for {} voxels x {} components",
            a.len(),
            b.len(),
            n,
            n_comp
        )));
    }
    let idx = mask.indices();
    if idx.is_empty() {
        return Err(Error::EmptyMask);
    }
    let errs: Vec<f64> = idx
        .iter()
        .map(|&v| (0..n_comp).map(|k| (a[v + n * k] - b[v + n * k]).abs()).sum::<f64>() / n_comp as f64)
        .collect();
    Ok(mean_std(&errs))
}

/// [`masked_mae_slices`] for two images with the same extents.
pub fn masked_mae(a: &Volume, b: &Volume, mask: &Mask) -> Result<(f64, f64)> {
    if a.dims != b.dims {
        return Err(Error::DimensionMismatch(format!("{:?} vs {:?}", a.dims, b.dims)));
    }
    mask.check_dims(a.spatial_dims())?;
    masked_mae_slices(&a.data, &b.data, a.n_volumes(), mask)
}

/// Inclusive prefix sums over a 3D grid with a zero guard plane on each axis.
struct SummedVolume {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl SummedVolume {
    fn new(values: impl Fn(usize) -> f64, dims: [usize; 3]) -> Self {
        let [nx, ny, nz] = dims;
        let (sx, sy) = (nx + 1, ny + 1);
        let mut data = vec![0.0; sx * sy * (nz + 1)];
        let at = |x: usize, y: usize, z: usize| x + sx * (y + sy * z);
        for z in 0..nz {
            for y in 0..ny {
                let mut row = 0.0;
                for x in 0..nx {
                    row += values(x + nx * (y + ny * z));
                    data[at(x + 1, y + 1, z + 1)] =
                        row + data[at(x + 1, y, z + 1)] + data[at(x + 1, y + 1, z)] - data[at(x + 1, y, z)];
                }
            }
        }
        SummedVolume { dims, data }
    }

    /// Sum over the half-open box `[lo, hi)`.
    fn box_sum(&self, lo: [usize; 3], hi: [usize; 3]) -> f64 {
        let (sx, sy) = (self.dims[0] + 1, self.dims[1] + 1);
        let s = |x: usize, y: usize, z: usize| self.data[x + sx * (y + sy * z)];
        s(hi[0], hi[1], hi[2]) - s(lo[0], hi[1], hi[2]) - s(hi[0], lo[1], hi[2]) - s(hi[0], hi[1], lo[2])
            + s(lo[0], lo[1], hi[2])
            + s(lo[0], hi[1], lo[2])
            + s(hi[0], lo[1], lo[2])
            - s(lo[0], lo[1], lo[2])
    }
}

fn dynamic_range(a: &[f64], b: &[f64], idx: &[usize]) -> f64 {
    let range = |x: &[f64]| {
        let (lo, hi) = idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(x[v]), hi.max(x[v])));
        hi - lo
    };
    range(a).max(range(b))
}

/// Stabilizing constants `(C1, C2)` for a dynamic range.
pub fn ssim_constants(range: f64) -> (f64, f64) {
    ((SSIM_K1 * range).powi(2), (SSIM_K2 * range).powi(2))
}

/// Local SSIM for every voxel of two 3D images. Windows are 7³ and
/// truncated at the borders (statistics use the in-bounds voxels only).
/// `range` sets the stabilizing constants.
pub fn ssim3d_map(a: &[f64], b: &[f64], dims: [usize; 3], range: f64) -> Vec<f64> {
    let n: usize = dims.iter().product();
    // Shift both images by a common offset to keep the prefix sums small.
    let shift = if n > 0 { (a.iter().sum::<f64>() + b.iter().sum::<f64>()) / (2 * n) as f64 } else { 0.0 };
    let sa = SummedVolume::new(|i| a[i] - shift, dims);
    let sb = SummedVolume::new(|i| b[i] - shift, dims);
    let saa = SummedVolume::new(|i| (a[i] - shift).powi(2), dims);
    let sbb = SummedVolume::new(|i| (b[i] - shift).powi(2), dims);
    let sab = SummedVolume::new(|i| (a[i] - shift) * (b[i] - shift), dims);
    let (c1, c2) = ssim_constants(range);
    let r = SSIM_WINDOW / 2;

    (0..n)
        .into_par_iter()
        .map(|i| {
            let p = [i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1])];
            let lo = [0, 1, 2].map(|k| p[k].saturating_sub(r));
            let hi = [0, 1, 2].map(|k| (p[k] + r + 1).min(dims[k]));
            let count = ((hi[0] - lo[0]) * (hi[1] - lo[1]) * (hi[2] - lo[2])) as f64;
            let ma = sa.box_sum(lo, hi) / count;
            let mb = sb.box_sum(lo, hi) / count;
            let va = saa.box_sum(lo, hi) / count - ma * ma;
            let vb = sbb.box_sum(lo, hi) / count - mb * mb;
            let cov = sab.box_sum(lo, hi) / count - ma * mb;
            let (mua, mub) = (ma + shift, mb + shift);
            ((2.0 * mua * mub + c1) * (2.0 * cov + c2)) / ((mua * mua + mub * mub + c1) * (va + vb + c2))
        })
        .collect()
}

/// Mean local SSIM over the mask. The dynamic range is the larger of the
/// two images' value ranges inside the mask.
pub fn ssim3d_slices(a: &[f64], b: &[f64], dims: [usize; 3], mask: &Mask) -> Result<f64> {
    let n: usize = dims.iter().product();
    if a.len() != n || b.len() != n {
        return Err(Error::DimensionMismatch(format!("{} / {} samples for grid {dims:?}", a.len(), b.len())));
    }
    mask.check_dims(dims)?;
    let idx = mask.indices();
    if idx.is_empty() {
        return Err(Error::EmptyMask);
    }
    let range = dynamic_range(a, b, &idx);
    if range == 0.0 {
        return if idx.iter().all(|&v| a[v] == b[v]) { Ok(1.0) } else { Err(Error::ZeroDynamicRange) };
    }
    let map = ssim3d_map(a, b, dims, range);
    let vals: Vec<f64> = idx.iter().map(|&v| map[v]).collect();
    Ok(mean(&vals))
}

pub fn ssim3d(a: &Volume, b: &Volume, mask: &Mask) -> Result<f64> {
    if a.dims != b.dims || a.dims.len() > 3 {
        return Err(Error::DimensionMismatch(format!("{:?} vs {:?} (3D images required)", a.dims, b.dims)));
    }
    ssim3d_slices(&a.data, &b.data, a.spatial_dims(), mask)
}

/// FA MAE within each named tract. Empty tract masks map to `None`.
pub fn tract_fa_report(
    pred_fa: &[f64],
    gt_fa: &[f64],
    tracts: &[(String, Mask)],
) -> Result<BTreeMap<String, Option<f64>>> {
    let mut out = BTreeMap::new();
    for (name, mask) in tracts {
        let value = match masked_mae_slices(pred_fa, gt_fa, 1, mask) {
            Ok((m, _)) => Some(m),
            Err(Error::EmptyMask) => None,
            Err(e) => return Err(e),
        };
        out.insert(name.clone(), value);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PerMetric<T> {
    pub dti: T,
    pub fa: T,
    pub md: T,
    pub ad: T,
    pub rd: T,
}

impl<T: Copy> PerMetric<T> {
    pub fn entries(&self) -> [(&'static str, T); 5] {
        [("dti", self.dti), ("fa", self.fa), ("md", self.md), ("ad", self.ad), ("rd", self.rd)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub mae: PerMetric<MeanStd>,
    pub ssim: PerMetric<f64>,
    /// Tract name → FA MAE; `null` for tracts whose mask is empty.
    pub tracts: BTreeMap<String, Option<f64>>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report fields are plain numbers")
    }

    /// Flat `section,name,value,std` table.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("section,name,value,std\n");
        for (name, m) in self.mae.entries() {
            let _ = writeln!(out, "mae,{name},{:e},{:e}", m.mean, m.std);
        }
        for (name, s) in self.ssim.entries() {
            let _ = writeln!(out, "ssim,{name},{s},");
        }
        for (name, v) in &self.tracts {
            match v {
                Some(v) => {
                    let _ = writeln!(out, "tract,{name},{v},");
                }
                None => {
                    let _ = writeln!(out, "tract,{name},,");
                }
            }
        }
        out
    }

    /// `name,value` rows for plotting tract bars; absent tracts are skipped.
    pub fn tract_bars(&self) -> String {
        let mut out = String::from("name,value\n");
        for (name, v) in &self.tracts {
            if let Some(v) = v {
                let _ = writeln!(out, "{name},{v}");
            }
        }
        out
    }
}

/// Full comparison of a predicted tensor field against a reference.
pub fn evaluate_tensors(
    pred: &TensorVolume,
    gt: &TensorVolume,
    mask: &Mask,
    tracts: &[(String, Mask)],
) -> Result<EvalReport> {
    pred.check_same_grid(gt)?;
    mask.check_dims(pred.dims)?;
    for (name, m) in tracts {
        m.check_dims(pred.dims).map_err(|_| {
            Error::DimensionMismatch(format!("tract mask {name} is {:?}, expected {:?}", m.dims, pred.dims))
        })?;
    }
    let dims = pred.dims;
    let pv = Volume::from_tensor_volume(pred);
    let gv = Volume::from_tensor_volume(gt);
    let (dm, ds) = masked_mae_slices(&pv.data, &gv.data, 6, mask)?;

    let pm = scalar_maps(pred);
    let gm = scalar_maps(gt);
    let mae_of = |name: &str| -> Result<MeanStd> {
        let (m, s) = masked_mae_slices(pm.get(name).unwrap(), gm.get(name).unwrap(), 1, mask)?;
        Ok(MeanStd { mean: m, std: s })
    };
    let ssim_of = |name: &str| ssim3d_slices(pm.get(name).unwrap(), gm.get(name).unwrap(), dims, mask);

    let mut ssim_dti = Vec::with_capacity(6);
    for k in 0..6 {
        ssim_dti.push(ssim3d_slices(&pred.component(k), &gt.component(k), dims, mask)?);
    }

    Ok(EvalReport {
        mae: PerMetric {
            dti: MeanStd { mean: dm, std: ds },
            fa: mae_of("fa")?,
            md: mae_of("md")?,
            ad: mae_of("ad")?,
            rd: mae_of("rd")?,
        },
        ssim: PerMetric {
            dti: mean(&ssim_dti),
            fa: ssim_of("fa")?,
            md: ssim_of("md")?,
            ad: ssim_of("ad")?,
            rd: ssim_of("rd")?,
        },
        tracts: tract_fa_report(&pm.fa, &gm.fa, tracts)?,
    })
}
