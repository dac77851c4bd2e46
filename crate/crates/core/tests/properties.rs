mod common;

use common::*;
use dtikit::dge::{dge_forward, embed_bvecs, DgeParams, FeatureMap};
use dtikit::evaluate::{masked_mae_slices, ssim3d_slices};
use dtikit::gradscheme::spread_of;
use dtikit::tensor::Mat3;
use dtikit::tensorfit::{eigensystem_metrics, simulate_signals};
use dtikit::volumeio::{read_nifti_bytes, write_nifti_bytes};
use dtikit::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Draws one voxel value representable in a given data type.
type Draw = Box<dyn Fn(&mut ChaCha8Rng) -> f64>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn unit() -> impl Strategy<Value = [f64; 3]> {
    (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0)
        .prop_filter("nonzero", |(x, y, z)| x * x + y * y + z * z > 1e-4)
        .prop_map(|(x, y, z)| {
            let n = (x * x + y * y + z * z).sqrt();
            [x / n, y / n, z / n]
        })
}

fn neg(g: [f64; 3]) -> [f64; 3] {
    [-g[0], -g[1], -g[2]]
}

fn transpose(r: &Mat3) -> Mat3 {
    std::array::from_fn(|i| std::array::from_fn(|j| r[j][i]))
}

fn rel_close(a: &DiffusionTensor, b: &DiffusionTensor, tol: f64) -> bool {
    let scale = a.max_abs().max(b.max_abs());
    (0..6).all(|k| (a.0[k] - b.0[k]).abs() <= tol * scale)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn angular_distance_symmetric_and_antipodal(a in unit(), b in unit()) {
        let d = angular_distance(a, b).unwrap();
        prop_assert_eq!(d, angular_distance(b, a).unwrap());
        prop_assert_eq!(d, angular_distance(a, neg(b)).unwrap());
        prop_assert_eq!(angular_distance(a, a).unwrap(), 0.0);
        prop_assert!((0.0..=std::f64::consts::FRAC_PI_2).contains(&d));
    }

    #[test]
    fn selection_spread_is_rotation_invariant(seed in any::<u64>(), n in 8usize..40, k in 2usize..8) {
        let scheme = GradientScheme::electrostatic(n, 1000.0);
        let rotated = scheme.rotated(&random_rotation(&mut rng(seed)));
        let a = kennard_stone_select(&scheme, k).unwrap();
        let b = kennard_stone_select(&rotated, k).unwrap();
        prop_assert!((a.spread - b.spread).abs() <= 1e-9, "{} vs {}", a.spread, b.spread);
    }

    #[test]
    fn selection_is_deterministic_and_complete(seed in any::<u64>(), n in 3usize..25) {
        let mut r = rng(seed);
        let mut entries = vec![GradientEntry { bval: 0.0, bvec: [0.0; 3] }];
        entries.extend((0..n).map(|_| GradientEntry { bval: 1000.0, bvec: random_unit(&mut r) }));
        let scheme = GradientScheme::new(entries).unwrap();
        let a = kennard_stone_select(&scheme, n).unwrap();
        let b = kennard_stone_select(&scheme, n).unwrap();
        prop_assert_eq!(a.spread.to_bits(), b.spread.to_bits());
        prop_assert_eq!(&a.indices, &b.indices);
        let mut all = a.indices.clone();
        all.sort_unstable();
        prop_assert_eq!(all, scheme.dwi_indices());
        prop_assert_eq!(a.spread, spread_of(&scheme, &a.indices));
    }

    #[test]
    fn fsl_text_round_trip(seed in any::<u64>(), n in 1usize..20) {
        let mut r = rng(seed);
        let mut entries = vec![GradientEntry { bval: 0.0, bvec: [0.0; 3] }];
        entries.extend((0..n).map(|_| GradientEntry { bval: r.random_range(500.0..3000.0), bvec: random_unit(&mut r) }));
        let scheme = GradientScheme::new(entries).unwrap();
        let (bvecs, bvals) = scheme.to_fsl();
        prop_assert_eq!(GradientScheme::parse_fsl(&bvecs, &bvals).unwrap(), scheme);
    }

    #[test]
    fn noiseless_fit_round_trip(seed in any::<u64>(), n in 6usize..40) {
        let mut r = rng(seed);
        let scheme = GradientScheme::electrostatic(n, 1000.0).rotated(&random_rotation(&mut r));
        let t = random_spd(&mut r);
        let fitted = fit_voxel(&simulate_signals(&t, &scheme, 800.0), &scheme).unwrap();
        prop_assert!(rel_close(&fitted, &t, 1e-10), "{:?} vs {:?}", fitted, t);
    }

    #[test]
    fn fit_is_rotation_equivariant(seed in any::<u64>()) {
        let mut r = rng(seed);
        let scheme = GradientScheme::electrostatic(12, 1000.0);
        let d = random_spd(&mut r);
        let rot = random_rotation(&mut r);
        let lhs = fit_voxel(&simulate_signals(&d.rotated(&rot), &scheme, 1000.0), &scheme).unwrap();
        let back = scheme.rotated(&transpose(&rot));
        let inner = fit_voxel(&simulate_signals(&d, &back, 1000.0), &back).unwrap();
        prop_assert!(rel_close(&lhs, &inner.rotated(&rot), 1e-9));
    }

    #[test]
    fn metrics_are_rotation_invariant(seed in any::<u64>()) {
        let mut r = rng(seed);
        let t = random_spd(&mut r);
        let base = eigensystem_metrics(&t);
        for _ in 0..100 {
            let m = eigensystem_metrics(&t.rotated(&random_rotation(&mut r)));
            prop_assert!((m.fa - base.fa).abs() <= 1e-10);
            for (a, b) in [(m.md, base.md), (m.ad, base.ad), (m.rd, base.rd)] {
                prop_assert!(rel_err(a, b) <= 1e-10);
            }
        }
    }

    #[test]
    fn fa_bounds(seed in any::<u64>()) {
        let mut r = rng(seed);
        let psd = compose(random_eigenvalues(&mut r, 0.0, 3e-3), &random_rotation(&mut r));
        let fa = eigensystem_metrics(&psd).fa;
        prop_assert!((0.0..=1.0 + 1e-12).contains(&fa), "PSD FA {}", fa);
        let sym = DiffusionTensor(std::array::from_fn(|_| r.random_range(-1e-3..1e-3)));
        let fa = eigensystem_metrics(&sym).fa;
        prop_assert!((0.0..=1.5f64.sqrt() + 1e-12).contains(&fa), "symmetric FA {}", fa);
    }

    #[test]
    fn determinant_is_eigenvalue_product(seed in any::<u64>()) {
        let mut r = rng(seed);
        let t = random_spd(&mut r);
        let l = eigensystem(&t).values;
        prop_assert!(rel_err(delta3(&t), l[0] * l[1] * l[2]) <= 1e-12);
    }

    #[test]
    fn xi_laws(exp in -6.0f64..6.0) {
        let rho = 10f64.powf(exp);
        let x = xi(rho).unwrap();
        prop_assert_eq!(x.to_bits(), xi_relu(rho).to_bits());
        prop_assert!(x >= 1.0);
        prop_assert!(rel_err(x, xi(1.0 / rho).unwrap()) <= 2.0 * f64::EPSILON);
    }

    #[test]
    fn loss_identity_swap_and_invariant_terms(seed in any::<u64>()) {
        let mut r = rng(seed);
        let dims = [3, 3, 3];
        let mask = Mask::full(dims);
        let w = LossWeights::default();
        let a = random_field(&mut r, dims);
        let b = random_field(&mut r, dims);
        prop_assert_eq!(geo_loss(&a, &a, &mask, &w).unwrap().l_geo, 0.0);
        let ab = geo_loss(&a, &b, &mask, &w).unwrap();
        let ba = geo_loss(&b, &a, &mask, &w).unwrap();
        prop_assert!(ab.l_geo >= 0.0);
        for (x, y) in [(ab.l_dti, ba.l_dti), (ab.l_delta2, ba.l_delta2), (ab.l_fa, ba.l_fa), (ab.xi_mean, ba.xi_mean), (ab.l_geo, ba.l_geo)] {
            prop_assert!(rel_err(x, y) <= 1e-12);
        }
        let rot = random_rotation(&mut r);
        let rr = geo_loss(&rotate_field(&a, &rot), &rotate_field(&b, &rot), &mask, &w).unwrap();
        for (x, y) in [(ab.l_delta2, rr.l_delta2), (ab.l_fa, rr.l_fa), (ab.xi_mean, rr.xi_mean)] {
            prop_assert!(rel_err(x, y) <= 1e-9);
        }
    }

    #[test]
    fn mae_symmetry_and_union_weighting(seed in any::<u64>(), split in 1usize..63) {
        let mut r = rng(seed);
        let dims = [4, 4, 4];
        let a: Vec<f64> = (0..64).map(|_| normal(&mut r)).collect();
        let b: Vec<f64> = (0..64).map(|_| normal(&mut r)).collect();
        let full = Mask::full(dims);
        prop_assert_eq!(masked_mae_slices(&a, &b, 1, &full).unwrap(), masked_mae_slices(&b, &a, 1, &full).unwrap());
        let mut left = Mask::empty(dims);
        let mut right = Mask::empty(dims);
        for v in 0..64 {
            if v < split { left.data[v] = true } else { right.data[v] = true }
        }
        let (ml, _) = masked_mae_slices(&a, &b, 1, &left).unwrap();
        let (mr, _) = masked_mae_slices(&a, &b, 1, &right).unwrap();
        let (mu, _) = masked_mae_slices(&a, &b, 1, &full).unwrap();
        let weighted = (ml * split as f64 + mr * (64 - split) as f64) / 64.0;
        prop_assert!((mu - weighted).abs() <= 1e-12);
    }

    #[test]
    fn ssim_symmetric_bounded_and_reflexive(seed in any::<u64>()) {
        let mut r = rng(seed);
        let dims = [6, 5, 7];
        let n = 6 * 5 * 7;
        let a: Vec<f64> = (0..n).map(|_| normal(&mut r)).collect();
        let b: Vec<f64> = (0..n).map(|i| 0.5 * a[i] + normal(&mut r)).collect();
        let mask = Mask::full(dims);
        let ab = ssim3d_slices(&a, &b, dims, &mask).unwrap();
        prop_assert_eq!(ab, ssim3d_slices(&b, &a, dims, &mask).unwrap());
        prop_assert!((-1.0..=1.0).contains(&ab));
        prop_assert_eq!(ssim3d_slices(&a, &a, dims, &mask).unwrap(), 1.0);
    }

    #[test]
    fn dge_shapes_preserved(seed in any::<u64>(), c in 1usize..5, w in 3usize..6, h in 3usize..6, d in 3usize..6, n in 1usize..3) {
        let mut r = rng(seed);
        let p = DgeParams::seeded(c, seed).unwrap();
        let shape = [n, c, w, h, d];
        let x = FeatureMap::new(shape, (0..n * c * w * h * d).map(|_| normal(&mut r)).collect()).unwrap();
        let e = dtikit::dge::GradientEmbedding::new(n, c, (0..n * c).map(|_| normal(&mut r)).collect()).unwrap();
        let (xo, eo) = dge_forward(&x, &e, &p).unwrap();
        prop_assert_eq!(xo.shape, shape);
        prop_assert_eq!((eo.batch, eo.channels), (n, c));
    }

    #[test]
    fn nifti_round_trip_every_dtype(seed in any::<u64>()) {
        let mut r = rng(seed);
        let cases: [(DataType, Draw); 4] = [
            (DataType::Uint8, Box::new(|r| r.random_range(0..=255u8) as f64)),
            (DataType::Int16, Box::new(|r| r.random_range(i16::MIN..=i16::MAX) as f64)),
            (DataType::Float32, Box::new(|r| normal(r) as f32 as f64)),
            (DataType::Float64, Box::new(normal)),
        ];
        for (dtype, draw) in cases {
            let data: Vec<f64> = (0..60).map(|_| draw(&mut r)).collect();
            let v = Volume::new(vec![3, 4, 5], data).unwrap();
            let back = read_nifti_bytes(&write_nifti_bytes(&v, dtype).unwrap()).unwrap();
            prop_assert_eq!(&back.dims, &v.dims);
            prop_assert_eq!(back.dtype, dtype);
            prop_assert!(back.data.iter().zip(&v.data).all(|(a, b)| a.to_bits() == b.to_bits()), "{:?}", dtype);
        }
    }
}

#[test]
fn seeded_blocks_are_bit_identical() {
    let a = DgeParams::seeded(3, 77).unwrap();
    let b = DgeParams::seeded(3, 77).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, DgeParams::seeded(3, 78).unwrap());
    let mut r = rng(1);
    let x = FeatureMap::new([1, 3, 4, 4, 4], (0..192).map(|_| normal(&mut r)).collect()).unwrap();
    let e = embed_bvecs(&[GradientScheme::canonical_six(1000.0)], &a).unwrap();
    assert_eq!(dge_forward(&x, &e, &a).unwrap(), dge_forward(&x, &e, &b).unwrap());
}

#[test]
fn reports_stable_across_thread_counts() {
    let ph = synth_phantom([6, 6, 6], PhantomKind::GradientFa, 4, Some(25.0)).unwrap();
    let mask = ph.mask.to_mask();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let fit = fit_volume(&ph.dwi, &ph.scheme, &mask).unwrap();
            let eval = evaluate_tensors(&fit, &ph.gt_tensor, &mask, &[]).unwrap();
            let loss = geo_loss(&fit, &ph.gt_tensor, &mask, &LossWeights::default()).unwrap();
            (fit, eval.to_json(), loss.to_json(), loss.grad)
        })
    };
    assert_eq!(run(1), run(4));
}
