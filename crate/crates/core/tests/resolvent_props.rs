use ikno_core::kernels::{cross_kernel, AxisKernelParams};
use ikno_core::linalg::{dense_inverse, kron_apply, kron_materialize, sym_eig};
use ikno_core::resolvent::{apply_naive_inverse, build_vanilla, GridOperator, DEFAULT_NAIVE_CAP};
use ikno_core::rng::Rng64;
use ikno_core::{DenseMatrix, LatentTensor, PointCloud, Variant};
use proptest::prelude::*;

fn random_spd(n: usize, rng: &mut Rng64) -> DenseMatrix {
    let b = DenseMatrix::from_fn(n, n, |_, _| rng.uniform(-1.0, 1.0));
    let mut a = b.matmul_nt(&b).unwrap().scaled(1.0 / n as f64);
    for i in 0..n {
        a.add_at(i, i, 0.1);
    }
    a
}

fn random_tensor(sizes: &[usize], channels: usize, rng: &mut Rng64) -> LatentTensor {
    let m: usize = sizes.iter().product();
    LatentTensor::new(sizes.to_vec(), channels, (0..m * channels).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

fn dense_apply(a: &DenseMatrix, t: &LatentTensor) -> LatentTensor {
    LatentTensor::from_matrix(t.axis_sizes().to_vec(), a.matmul(&t.clone().into_matrix()).unwrap()).unwrap()
}

fn sizes_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..=8, 1..=3).prop_filter("keep M small", |s| s.iter().product::<usize>() <= 512)
}

/// α drawn from `[-2, 0)` or `(0, 0.9 / ρ(K)]`.
fn pick_alpha(grams: &[DenseMatrix], u: f64, positive: bool) -> f64 {
    if positive {
        let rho: f64 = grams.iter().map(|g| sym_eig(g).unwrap().max_abs_eigenvalue()).product();
        (0.9 / rho) * (1.0 - u).max(1e-3)
    } else {
        -2.0 * u.max(1e-3)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn kron_apply_matches_materialized(sizes in sizes_strategy(), channels in 1usize..3, seed in any::<u64>()) {
        let mut rng = Rng64::new(seed);
        let mats: Vec<DenseMatrix> =
            sizes.iter().map(|&n| DenseMatrix::from_fn(n, n, |_, _| rng.uniform(-1.0, 1.0))).collect();
        let t = random_tensor(&sizes, channels, &mut rng);
        let fast = kron_apply(&mats, &t).unwrap();
        let slow = dense_apply(&kron_materialize(&mats).unwrap(), &t);
        prop_assert!(fast.max_abs_diff(&slow).unwrap() <= 1e-12 * (1.0 + slow.max_abs()));
    }

    #[test]
    fn vanilla_matches_dense_inverse(sizes in sizes_strategy(), u in 0.0f64..1.0, positive in any::<bool>(), seed in any::<u64>()) {
        let mut rng = Rng64::new(seed);
        let grams: Vec<DenseMatrix> = sizes.iter().map(|&n| random_spd(n, &mut rng)).collect();
        let alpha = pick_alpha(&grams, u, positive);
        let t = random_tensor(&sizes, 2, &mut rng);
        let fast = GridOperator::build(Variant::Vanilla, &grams, alpha).unwrap().apply(&t).unwrap();
        let naive = apply_naive_inverse(&grams, alpha, &t, DEFAULT_NAIVE_CAP).unwrap();
        prop_assert!(fast.max_abs_diff(&naive).unwrap() <= 1e-8);
    }

    #[test]
    fn negative_alpha_weights_in_unit_interval(sizes in sizes_strategy(), u in 0.0f64..1.0, seed in any::<u64>()) {
        let mut rng = Rng64::new(seed);
        let grams: Vec<DenseMatrix> = sizes.iter().map(|&n| random_spd(n, &mut rng)).collect();
        let r = build_vanilla(&grams, pick_alpha(&grams, u, false)).unwrap();
        prop_assert!(r.diag_weights().iter().all(|&w| w > 0.0 && w <= 1.0));
    }

    #[test]
    fn operators_are_linear(sizes in sizes_strategy(), which in 0usize..3, a in -2.0f64..2.0, b in -2.0f64..2.0, seed in any::<u64>()) {
        let mut rng = Rng64::new(seed);
        let grams: Vec<DenseMatrix> = sizes.iter().map(|&n| random_spd(n, &mut rng)).collect();
        let variant = [Variant::Vanilla, Variant::Tp, Variant::Truncated(2)][which];
        let op = GridOperator::build(variant, &grams, -0.5).unwrap();
        let x = random_tensor(&sizes, 1, &mut rng);
        let y = random_tensor(&sizes, 1, &mut rng);
        let mut combo = x.clone();
        combo.scale(a);
        combo.add_scaled(b, &y).unwrap();
        let lhs = op.apply(&combo).unwrap();
        let mut rhs = op.apply(&x).unwrap();
        rhs.scale(a);
        rhs.add_scaled(b, &op.apply(&y).unwrap()).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() <= 1e-11 * (1.0 + rhs.max_abs()));
    }

    #[test]
    fn tp_equals_vanilla_in_one_dimension(n in 1usize..=8, u in 0.0f64..1.0, positive in any::<bool>(), seed in any::<u64>()) {
        let mut rng = Rng64::new(seed);
        let grams = vec![random_spd(n, &mut rng)];
        let alpha = pick_alpha(&grams, u, positive);
        let t = random_tensor(&[n], 2, &mut rng);
        let v = GridOperator::build(Variant::Vanilla, &grams, alpha).unwrap().apply(&t).unwrap();
        let p = GridOperator::build(Variant::Tp, &grams, alpha).unwrap().apply(&t).unwrap();
        prop_assert!(v.max_abs_diff(&p).unwrap() <= 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn product_gram_is_positive_semidefinite(
        d in 1usize..=3,
        n in 1usize..=16,
        raw in prop::collection::vec((0.05f64..5.0, 0.05f64..10.0, 0.05f64..10.0), 3),
        seed in any::<u64>(),
    ) {
        let mut rng = Rng64::new(seed);
        let axes: Vec<AxisKernelParams> = raw[..d].iter().map(|&(c, b, g)| AxisKernelParams::new(c, b, g).unwrap()).collect();
        let coords: Vec<f64> = (0..n * d).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let cloud = PointCloud::from_coords(d, coords).unwrap();
        let k = cross_kernel(&axes, &cloud, &cloud).unwrap();
        let trace: f64 = (0..n).map(|i| k.get(i, i)).sum();
        let lambda_min = sym_eig(&k).unwrap().eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assert!(lambda_min > -1e-10 * trace, "lambda_min {lambda_min:e}, trace {trace}");
    }
}

#[test]
fn d2_witness_separates_tp_from_vanilla() {
    let k = DenseMatrix::from_rows(&[vec![1.0, 0.5], vec![0.5, 1.0]]);
    let grams = vec![k.clone(), k];
    let t = LatentTensor::new(vec![2, 2], 1, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    let v = GridOperator::build(Variant::Vanilla, &grams, -1.0).unwrap().apply(&t).unwrap();
    let p = GridOperator::build(Variant::Tp, &grams, -1.0).unwrap().apply(&t).unwrap();
    assert!(v.max_abs_diff(&p).unwrap() > 1e-3);
}

#[test]
fn tp_factor_matches_inverse_of_shifted_gram() {
    let k = DenseMatrix::from_rows(&[vec![1.0, 0.5], vec![0.5, 1.0]]);
    let shifted = DenseMatrix::from_rows(&[vec![2.0, 0.5], vec![0.5, 2.0]]);
    let inv = dense_inverse(&shifted).unwrap();
    let t = LatentTensor::new(vec![2], 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let y = GridOperator::build(Variant::Tp, &[k], -1.0).unwrap().apply(&t).unwrap();
    assert!(y.into_matrix().max_abs_diff(&inv).unwrap() < 1e-14);
}
