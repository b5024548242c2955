use ikno_core::kernels::cross_kernel;
use ikno_core::mlp::{linear, Mlp};
use ikno_core::model::{positional_encode, IknoModel, KernelFamily, ModelConfig, ProcessorKind};
use ikno_core::resolvent::{naive_resolvent_matrix, DEFAULT_NAIVE_CAP};
use ikno_core::rng::Rng64;
use ikno_core::train::{batch_loss_sum, Example};
use ikno_core::{DenseMatrix, PointCloud, Variant};

fn toy(variant: Variant, processor: ProcessorKind) -> ModelConfig {
    ModelConfig {
        dim: 2,
        grid_l: 4,
        hidden: 8,
        branches: 2,
        processor,
        variant,
        head_depth: 2,
        init_scales: vec![1.0, 2.0],
        ..ModelConfig::default()
    }
}

fn cloud(dim: usize, n: usize, channels: usize, seed: u64) -> PointCloud {
    let mut rng = Rng64::new(seed);
    let coords: Vec<f64> = (0..n * dim).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let vals: Vec<f64> = (0..n * channels).map(|_| rng.uniform(-1.0, 1.0)).collect();
    PointCloud::new(dim, coords, channels, vals).unwrap()
}

fn queries(dim: usize, n: usize, seed: u64) -> PointCloud {
    let mut rng = Rng64::new(seed);
    PointCloud::from_coords(dim, (0..n * dim).map(|_| rng.uniform(-1.0, 1.0)).collect()).unwrap()
}

fn concat(parts: &[DenseMatrix]) -> DenseMatrix {
    let rows = parts[0].rows();
    let cols: usize = parts.iter().map(DenseMatrix::cols).sum();
    DenseMatrix::from_fn(rows, cols, |r, c| {
        let mut c = c;
        for p in parts {
            if c < p.cols() {
                return p.get(r, c);
            }
            c -= p.cols();
        }
        unreachable!()
    })
}

#[test]
fn positional_layout() {
    assert_eq!(positional_encode(&[0.0], 1).unwrap(), vec![0.0, 1.0, 0.0]);
    let pe = positional_encode(&[std::f64::consts::FRAC_PI_2], 1).unwrap();
    assert!((pe[1]).abs() < 1e-12 && (pe[2] - 1.0).abs() < 1e-12);
    let pe = positional_encode(&[0.0, std::f64::consts::PI], 1).unwrap();
    let want = [0.0, std::f64::consts::PI, 1.0, -1.0, 0.0, 0.0];
    for (a, b) in pe.iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(positional_encode(&[0.0], 2).is_err());
}

#[test]
fn forward_matches_componentwise_oracle() {
    let model = IknoModel::new(toy(Variant::Vanilla, ProcessorKind::Identity)).unwrap();
    let params = model.init_params(17);
    let input = cloud(2, 16, 1, 1);
    let q = queries(2, 5, 2);
    let seg = |name: &str| params.values[params.segment_range(name).unwrap()].to_vec();
    let h = 8;

    let feats = DenseMatrix::from_fn(16, 7, |i, c| {
        let mut row = positional_encode(input.coord(i), 1).unwrap();
        row.push(input.channel_row(i)[0]);
        row[c]
    });
    let vp = Mlp::new(vec![7, h, h]).forward(&seg("tokenizer"), &feats);
    let kernels = model.kernel_params(&params).unwrap().unwrap();
    let grid = model.grid();
    let mut enc_parts = Vec::new();
    let mut resolvents = Vec::new();
    for b in &kernels.branches {
        let grams: Vec<DenseMatrix> = (0..2)
            .map(|j| {
                let a = grid.axis(j);
                DenseMatrix::from_fn(a.len(), a.len(), |p, r| b.axes[j].eval(a[p], a[r]))
            })
            .collect();
        let r = naive_resolvent_matrix(&grams, b.alpha, DEFAULT_NAIVE_CAP).unwrap();
        let kgp = cross_kernel(&b.axes, grid, &input).unwrap();
        enc_parts.push(r.matmul(&kgp.matmul(&vp).unwrap()).unwrap());
        resolvents.push(r);
    }
    let vg = linear(&seg("encoder_fusion"), 2 * h, h, &concat(&enc_parts));
    let mut dec_parts = Vec::new();
    for (b, r) in kernels.branches.iter().zip(&resolvents) {
        let kqg = cross_kernel(&b.axes, &q, grid).unwrap();
        dec_parts.push(kqg.matmul(&r.matmul(&vg).unwrap()).unwrap());
    }
    let z = linear(&seg("decoder_fusion"), 2 * h, h, &concat(&dec_parts));
    let oracle = Mlp::new(vec![h, h, 1]).forward(&seg("head"), &z);

    let pred = model.forward(&params, &input, &q).unwrap();
    assert!(pred.max_abs_diff(&oracle).unwrap() < 1e-9 * (1.0 + oracle.max_abs()));

    let prep = model.prepare(&params).unwrap();
    let vp2 = model.tokenize(&params, &input).unwrap();
    let vg2 = model.encode(&params, &prep, &input, &vp2).unwrap();
    let staged = model.decode(&params, &prep, &model.process(&params, &vg2).unwrap(), &q).unwrap();
    assert_eq!(staged, pred);
}

#[test]
fn permutation_equivariance_and_subsets() {
    for variant in [Variant::Vanilla, Variant::Tp, Variant::Truncated(2)] {
        let model = IknoModel::new(toy(variant, ProcessorKind::TinyAttention { heads: 2 })).unwrap();
        let params = model.init_params(3);
        let input = cloud(2, 12, 1, 4);
        let q = queries(2, 7, 5);
        let base = model.forward(&params, &input, &q).unwrap();

        let perm: Vec<usize> = vec![3, 0, 11, 5, 1, 9, 2, 8, 10, 4, 7, 6];
        let shuffled = model.forward(&params, &input.permuted(&perm), &q).unwrap();
        assert!(shuffled.max_abs_diff(&base).unwrap() < 1e-10 * (1.0 + base.max_abs()));

        let qperm = vec![6, 2, 0, 5, 1, 4, 3];
        let out = model.forward(&params, &input, &q.permuted(&qperm)).unwrap();
        for (r, &src) in qperm.iter().enumerate() {
            assert!((out.get(r, 0) - base.get(src, 0)).abs() < 1e-12 * (1.0 + base.max_abs()));
        }

        let sub = model.forward(&params, &input, &q.select(&[1, 4])).unwrap();
        assert!((sub.get(0, 0) - base.get(1, 0)).abs() < 1e-12 * (1.0 + base.max_abs()));
        assert!((sub.get(1, 0) - base.get(4, 0)).abs() < 1e-12 * (1.0 + base.max_abs()));
    }
}

#[test]
fn tokens_are_per_point() {
    let model = IknoModel::new(toy(Variant::Tp, ProcessorKind::Identity)).unwrap();
    let params = model.init_params(8);
    let input = cloud(2, 5, 1, 8);
    let t = model.tokenize(&params, &input).unwrap();
    let tp = model.tokenize(&params, &input.permuted(&[4, 3, 2, 1, 0])).unwrap();
    for r in 0..5 {
        assert_eq!(tp.row(r), t.row(4 - r));
    }
    let mut zero = params.clone();
    let r = zero.segment_range("tokenizer").unwrap();
    zero.values[r].iter_mut().for_each(|v| *v = 0.0);
    assert!(model.tokenize(&zero, &input).unwrap().values().iter().all(|&v| v == 0.0));
}

#[test]
fn vanilla_and_tp_agree_in_one_dimension() {
    for processor in [ProcessorKind::Identity, ProcessorKind::Mlp { depth: 2, width: 8 }] {
        let mk = |variant| ModelConfig { dim: 1, grid_l: 8, hidden: 8, branches: 3, processor, variant, ..ModelConfig::default() };
        let van = IknoModel::new(mk(Variant::Vanilla)).unwrap();
        let tp = IknoModel::new(mk(Variant::Tp)).unwrap();
        let params = van.init_params(21);
        let input = cloud(1, 10, 1, 6);
        let q = queries(1, 9, 7);
        let a = van.forward(&params, &input, &q).unwrap();
        let b = tp.forward(&params, &input, &q).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() <= 1e-9);
    }
}

#[test]
fn truncated_zero_single_branch_is_first_order_aggregation() {
    let cfg = ModelConfig { branches: 1, init_scales: vec![1.0], ..toy(Variant::Truncated(0), ProcessorKind::Identity) };
    let model = IknoModel::new(cfg).unwrap();
    let params = model.init_params(4);
    let input = cloud(2, 9, 1, 12);
    let prep = model.prepare(&params).unwrap();
    let vp = model.tokenize(&params, &input).unwrap();
    let vg = model.encode(&params, &prep, &input, &vp).unwrap();
    let b = &model.kernel_params(&params).unwrap().unwrap().branches[0];
    let oracle = cross_kernel(&b.axes, model.grid(), &input).unwrap().matmul(&vp).unwrap();
    assert!(vg.max_abs_diff(&oracle).unwrap() < 1e-12 * (1.0 + oracle.max_abs()));
}

#[test]
fn zero_weight_identities() {
    let model = IknoModel::new(toy(Variant::Tp, ProcessorKind::Mlp { depth: 2, width: 8 })).unwrap();
    let mut params = model.init_params(5);
    let input = cloud(2, 8, 1, 9);
    let q = queries(2, 4, 10);

    let vg = DenseMatrix::from_fn(16, 8, |i, j| (i as f64 * 0.3 - j as f64).sin());
    let r = params.segment_range("processor").unwrap();
    params.values[r].iter_mut().for_each(|v| *v = 0.0);
    assert_eq!(model.process(&params, &vg).unwrap(), vg);

    let prep = model.prepare(&params).unwrap();
    let head = params.segment_range("head").unwrap();
    let z = model.decode(&params, &prep, &DenseMatrix::zeros(16, 8), &q).unwrap();
    let mlp = Mlp::new(vec![8, 8, 1]);
    let zero_in = linear(params.segment("decoder_fusion"), 16, 8, &DenseMatrix::zeros(1, 16));
    let c = mlp.forward(&params.values[head.clone()], &zero_in).get(0, 0);
    assert!(z.values().iter().all(|&v| (v - c).abs() < 1e-15));

    params.values[head].iter_mut().for_each(|v| *v = 0.0);
    assert!(model.forward(&params, &input, &q).unwrap().values().iter().all(|&v| v == 0.0));
}

#[test]
fn init_defaults() {
    let model = IknoModel::new(ModelConfig::default()).unwrap();
    let p = model.init_params(1);
    assert_eq!(p, model.init_params(1));
    let k = model.kernel_params(&p).unwrap().unwrap();
    assert_eq!(k.branches.iter().map(|b| b.alpha).collect::<Vec<_>>(), vec![-1.0, -1.0, -1.0]);
    for (q, base) in [1.0, 2.0, 4.0].into_iter().enumerate() {
        for a in &k.branches[q].axes {
            assert_eq!((a.c, a.beta, a.gamma), (1.0, base, base));
        }
    }
}

#[test]
fn linear_window_models_run_for_every_variant() {
    let input = cloud(2, 20, 1, 30);
    let q = queries(2, 6, 31);
    for variant in [Variant::Truncated(0), Variant::Truncated(3), Variant::Vanilla, Variant::Tp] {
        let cfg = ModelConfig {
            grid_l: 6,
            hidden: 8,
            branches: 1,
            variant,
            init_scales: vec![1.0],
            kernel: KernelFamily::LinearWindow { radius: 0.2, scale: 1.0, alpha: -0.15 },
            processor: ProcessorKind::Mlp { depth: 2, width: 8 },
            ..ModelConfig::default()
        };
        let model = IknoModel::new(cfg).unwrap();
        let params = model.init_params(2);
        assert!(params.segment("kernel").is_empty());
        let out = model.forward(&params, &input, &q).unwrap();
        assert!(out.values().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn every_parameter_is_reachable() {
    let model = IknoModel::new(toy(Variant::Vanilla, ProcessorKind::Mlp { depth: 2, width: 8 })).unwrap();
    let params = model.init_params(13);
    let batch: Vec<Example> = (0..2)
        .map(|s| {
            let input = cloud(2, 10, 1, 40 + s);
            let q = queries(2, 6, 50 + s);
            let target = DenseMatrix::from_fn(6, 1, |r, _| q.coord(r)[0] - 0.5 * q.coord(r)[1] + 0.2);
            Example { input, queries: q, target }
        })
        .collect();
    let mut p = params.clone();
    for k in 0..params.len() {
        let h = 1e-5 * (1.0 + params.values[k].abs());
        p.values[k] = params.values[k] + h;
        let up = batch_loss_sum(&model, &p, &batch).unwrap();
        p.values[k] = params.values[k] - h;
        let down = batch_loss_sum(&model, &p, &batch).unwrap();
        p.values[k] = params.values[k];
        assert!(up != down, "parameter {k} ({:?}) has no effect", params.segment_of(k));
    }
}
