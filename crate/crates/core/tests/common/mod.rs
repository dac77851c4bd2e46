//! Random tensors, rotations and fields shared by the integration tests.
#![allow(dead_code)]

use dtikit::tensor::Mat3;
use dtikit::{DiffusionTensor, TensorVolume};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Uniformly distributed rotation from a normalised Gaussian quaternion.
pub fn random_rotation(rng: &mut impl Rng) -> Mat3 {
    let mut q = [0.0f64; 4];
    loop {
        for v in q.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-3 {
            q.iter_mut().for_each(|v| *v /= n);
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

pub fn random_unit(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [StandardNormal.sample(rng), StandardNormal.sample(rng), StandardNormal.sample(rng)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-6 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// `R diag(λ) Rᵀ` written out element by element.
pub fn compose(lambda: [f64; 3], r: &Mat3) -> DiffusionTensor {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = (0..3).map(|k| r[i][k] * lambda[k] * r[j][k]).sum();
        }
    }
    DiffusionTensor::from_matrix(&m)
}

/// Eigenvalues drawn from `[lo, hi]`, descending.
pub fn random_eigenvalues(rng: &mut impl Rng, lo: f64, hi: f64) -> [f64; 3] {
    let mut l = [rng.random_range(lo..hi), rng.random_range(lo..hi), rng.random_range(lo..hi)];
    l.sort_by(|a, b| b.total_cmp(a));
    l
}

/// SPD tensor with eigenvalues in `[0.2e-3, 2.2e-3]`.
pub fn random_spd(rng: &mut impl Rng) -> DiffusionTensor {
    let l = random_eigenvalues(rng, 0.2e-3, 2.2e-3);
    compose(l, &random_rotation(rng))
}

/// SPD tensor whose eigenvalues are pairwise at least `gap` apart.
pub fn random_spd_with_gap(rng: &mut impl Rng, gap: f64) -> DiffusionTensor {
    loop {
        let l = random_eigenvalues(rng, 0.2e-3, 2.2e-3);
        if l[0] - l[1] >= gap && l[1] - l[2] >= gap {
            return compose(l, &random_rotation(rng));
        }
    }
}

pub fn random_field(rng: &mut impl Rng, dims: [usize; 3]) -> TensorVolume {
    let data = (0..dims.iter().product::<usize>()).map(|_| random_spd(rng)).collect();
    TensorVolume::new(dims, data).unwrap()
}

pub fn rotate_field(f: &TensorVolume, r: &Mat3) -> TensorVolume {
    let mut out = f.clone();
    for t in out.data.iter_mut() {
        *t = t.rotated(r);
    }
    out
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let s = a.abs().max(b.abs());
    if s == 0.0 {
        0.0
    } else {
        (a - b).abs() / s
    }
}

pub fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}
