//! The encoder-processor-decoder operator network.
//!
//! ```text
//! V_P   = MLP_tok([x, cos x, sin x, a])                 (Ñ x h)
//! E_q   = Op_q(K_GP^q V_P)                              (M x h per branch)
//! V_G   = fuse_enc([E_1 .. E_Q])                        (M x h)
//! V'_G  = process(V_G)
//! Z_q   = K_QG^q Op_q(V'_G)                             (N_q x h per branch)
//! û     = MLP_head(fuse_dec([Z_1 .. Z_Q]))
//! ```
//!
//! `Op_q` is the branch's latent propagator (vanilla resolvent, tensor-product
//! resolvent or truncated series). Encoder and decoder share each branch's
//! kernel parameters. All learnables sit in one flat [`ParamVector`].

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernels::{
    axis_cross, axis_gram, axis_gram_vjp, cross_kernel_window, grid_linspace, AxisKernelParams, KernelBranch,
    KernelError, LatentGrid, LinearWindowKernel, MultiScaleKernelParams, PointCloud, PointSet,
};
use crate::linalg::{DenseMatrix, LatentTensor, LinalgError};
use crate::mlp::{linear, linear_backward, Mlp, MlpTrace};
use crate::resolvent::{GridOperator, ResolventError, Variant};
use crate::rng::Rng64;
use crate::store::{StoreError, TensorStore};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Resolvent(#[from] ResolventError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("expected {expected} condition channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("expected {expected}-dimensional points, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("only one positional-encoding level is supported, got {0}")]
    UnsupportedLevels(usize),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
    #[error("parameter vector has {got} entries, layout needs {expected}")]
    ParamLength { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ProcessorKind {
    Identity,
    /// Per-grid-point residual MLP with `depth` layers of the given width.
    Mlp { depth: usize, width: usize },
    /// One residual softmax-attention block over the grid tokens.
    TinyAttention { heads: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum KernelFamily {
    /// Learnable Gaussian + Laplace product kernels, one set per branch.
    Learnable,
    /// Fixed, non-learnable linear-window kernel with fixed α.
    LinearWindow { radius: f64, scale: f64, alpha: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub grid_l: usize,
    pub hidden: usize,
    pub branches: usize,
    pub nerf_levels: usize,
    pub processor: ProcessorKind,
    pub variant: Variant,
    /// Number of layers in the output head.
    pub head_depth: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: KernelFamily,
    /// Initial β and γ of branch `q`.
    pub init_scales: Vec<f64>,
    pub init_alpha: f64,
    pub grid_min: f64,
    pub grid_max: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 2,
            grid_l: 16,
            hidden: 16,
            branches: 3,
            nerf_levels: 1,
            processor: ProcessorKind::Mlp { depth: 2, width: 16 },
            variant: Variant::Tp,
            head_depth: 2,
            in_channels: 1,
            out_channels: 1,
            kernel: KernelFamily::Learnable,
            init_scales: vec![1.0, 2.0, 4.0],
            init_alpha: -1.0,
            grid_min: -1.0,
            grid_max: 1.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.dim == 0 {
            return bad("dim must be at least 1");
        }
        if self.grid_l < 2 {
            return bad("grid_l must be at least 2");
        }
        if self.hidden == 0 || self.branches == 0 || self.out_channels == 0 {
            return bad("hidden, branches and out_channels must be positive");
        }
        if self.nerf_levels != 1 {
            return Err(ModelError::UnsupportedLevels(self.nerf_levels));
        }
        if self.head_depth == 0 {
            return bad("head_depth must be at least 1");
        }
        if self.init_scales.len() < self.branches {
            return bad("init_scales needs one entry per branch");
        }
        match self.processor {
            ProcessorKind::Mlp { depth, width } if depth == 0 || width == 0 => return bad("mlp processor needs depth, width > 0"),
            ProcessorKind::TinyAttention { heads } if heads == 0 || self.hidden % heads != 0 => {
                return bad("attention heads must divide hidden")
            }
            _ => {}
        }
        if let KernelFamily::LinearWindow { radius, scale, alpha } = self.kernel {
            LinearWindowKernel::new(radius, scale, alpha)?;
            if self.branches != 1 {
                return bad("the fixed linear-window kernel uses a single branch");
            }
        }
        Ok(())
    }

    pub fn num_grid_points(&self) -> usize {
        self.grid_l.pow(self.dim as u32)
    }

    fn kernel_stride(&self) -> usize {
        3 * self.dim + 1
    }

    fn learnable_kernel(&self) -> bool {
        matches!(self.kernel, KernelFamily::Learnable)
    }
}

/// One named slice of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Flat parameter vector with named segments.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    segments: Vec<Segment>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, segments: Vec<Segment>) -> Result<Self> {
        let mut off = 0;
        for s in &segments {
            if s.offset != off {
                return Err(ModelError::InvalidConfig(format!("segment {} does not start at {off}", s.name)));
            }
            off += s.len;
        }
        if off != values.len() {
            return Err(ModelError::ParamLength { expected: off, got: values.len() });
        }
        Ok(Self { values, segments })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment_range(&self, name: &str) -> Option<std::ops::Range<usize>> {
        self.segments.iter().find(|s| s.name == name).map(|s| s.offset..s.offset + s.len)
    }

    pub fn segment(&self, name: &str) -> &[f64] {
        self.segment_range(name).map_or(&[], |r| &self.values[r])
    }

    /// Name of the segment holding entry `k`.
    pub fn segment_of(&self, k: usize) -> Option<&str> {
        self.segments.iter().find(|s| (s.offset..s.offset + s.len).contains(&k)).map(|s| s.name.as_str())
    }

    pub fn to_store(&self) -> Result<TensorStore> {
        let mut s = TensorStore::new("params");
        s.meta = serde_json::json!({ "segments": self.segments });
        for seg in &self.segments {
            s.put(&seg.name, vec![seg.len], self.values[seg.offset..seg.offset + seg.len].to_vec())?;
        }
        Ok(s)
    }

    pub fn from_store(s: &TensorStore) -> Result<Self> {
        s.expect_kind("params")?;
        let segments: Vec<Segment> = serde_json::from_value(s.meta["segments"].clone())
            .map_err(|e| StoreError::Manifest(format!("bad segment table: {e}")))?;
        let mut values = Vec::new();
        for seg in &segments {
            values.extend_from_slice(s.get_shaped(&seg.name, &[seg.len])?);
        }
        Self::new(values, segments)
    }
}

/// `(x, cos x, sin x)` laid out as all coordinates, all cosines, all sines.
pub fn positional_encode(x: &[f64], levels: usize) -> Result<Vec<f64>> {
    if levels != 1 {
        return Err(ModelError::UnsupportedLevels(levels));
    }
    let mut out = Vec::with_capacity(3 * x.len());
    out.extend_from_slice(x);
    out.extend(x.iter().map(|v| v.cos()));
    out.extend(x.iter().map(|v| v.sin()));
    Ok(out)
}

/// Dense `M x n` kernel matrix from per-axis factors `A_j` (`N_j x n`):
/// entry `(m, i)` is `∏_j A_j[m_j, i]` with grid index `m` lexicographic.
pub fn cross_from_axes(axes: &[DenseMatrix]) -> DenseMatrix {
    let n = axes[0].cols();
    let mut acc = axes[0].clone();
    for a in &axes[1..] {
        let mut next = DenseMatrix::zeros(acc.rows() * a.rows(), n);
        for r in 0..acc.rows() {
            for s in 0..a.rows() {
                let dst = next.row_mut(r * a.rows() + s);
                for ((d, x), y) in dst.iter_mut().zip(acc.row(r)).zip(a.row(s)) {
                    *d = x * y;
                }
            }
        }
        acc = next;
    }
    acc
}

/// Gradient of [`cross_from_axes`] with respect to every axis factor.
pub fn cross_from_axes_vjp(axes: &[DenseMatrix], k_bar: &DenseMatrix) -> Vec<DenseMatrix> {
    let d = axes.len();
    let sizes: Vec<usize> = axes.iter().map(DenseMatrix::rows).collect();
    let n = axes[0].cols();
    let mut out: Vec<DenseMatrix> = axes.iter().map(|a| DenseMatrix::zeros(a.rows(), n)).collect();
    let mut idx = vec![0usize; d];
    let mut others = vec![0.0; n];
    for m in 0..k_bar.rows() {
        let mut rem = m;
        for j in (0..d).rev() {
            idx[j] = rem % sizes[j];
            rem /= sizes[j];
        }
        let kb = k_bar.row(m);
        for j in 0..d {
            others.iter_mut().zip(kb).for_each(|(o, k)| *o = *k);
            for l in 0..d {
                if l != j {
                    others.iter_mut().zip(axes[l].row(idx[l])).for_each(|(o, a)| *o *= a);
                }
            }
            out[j].row_mut(idx[j]).iter_mut().zip(&others).for_each(|(o, v)| *o += v);
        }
    }
    out
}

fn concat_cols(parts: &[DenseMatrix]) -> DenseMatrix {
    let rows = parts[0].rows();
    let cols: usize = parts.iter().map(DenseMatrix::cols).sum();
    let mut out = DenseMatrix::zeros(rows, cols);
    for r in 0..rows {
        let mut c = 0;
        let dst = out.row_mut(r);
        for p in parts {
            dst[c..c + p.cols()].copy_from_slice(p.row(r));
            c += p.cols();
        }
    }
    out
}

fn split_cols(m: &DenseMatrix, width: usize) -> Vec<DenseMatrix> {
    let q = m.cols() / width;
    (0..q)
        .map(|b| DenseMatrix::from_fn(m.rows(), width, |r, c| m.get(r, b * width + c)))
        .collect()
}

fn add_into(a: &mut DenseMatrix, b: &DenseMatrix) {
    a.values_mut().iter_mut().zip(b.values()).for_each(|(x, y)| *x += y);
}

/// Operators and kernel matrices that depend only on the parameters.
#[derive(Debug, Clone)]
pub struct Prepared {
    kernels: Option<MultiScaleKernelParams>,
    /// Per-branch grid Grams `K_j` (learnable kernel only).
    grams: Vec<Vec<DenseMatrix>>,
    ops: Vec<GridOperator>,
}

impl Prepared {
    pub fn kernels(&self) -> Option<&MultiScaleKernelParams> {
        self.kernels.as_ref()
    }

    pub fn operators(&self) -> &[GridOperator] {
        &self.ops
    }
}

#[derive(Debug, Clone)]
enum ProcTrace {
    Identity,
    Mlp(MlpTrace),
    Attention { x: DenseMatrix, q: DenseMatrix, k: DenseMatrix, v: DenseMatrix, probs: Vec<DenseMatrix>, o: DenseMatrix },
}

/// Intermediate values of one forward pass, consumed by the reverse sweep.
#[derive(Debug, Clone)]
pub struct SampleTrace {
    tok: MlpTrace,
    vp: DenseMatrix,
    cloud_axes: Vec<Vec<f64>>,
    query_axes: Vec<Vec<f64>>,
    enc_factors: Vec<Vec<DenseMatrix>>,
    kgp: Vec<DenseMatrix>,
    enc_in: Vec<LatentTensor>,
    enc_out: Vec<LatentTensor>,
    enc_cat: DenseMatrix,
    proc: ProcTrace,
    vprime: LatentTensor,
    dec_factors: Vec<Vec<DenseMatrix>>,
    kgq: Vec<DenseMatrix>,
    dec_d: Vec<LatentTensor>,
    dec_cat: DenseMatrix,
    head: MlpTrace,
}

#[derive(Debug, Clone)]
pub struct IknoModel {
    config: ModelConfig,
    grid: LatentGrid,
    tokenizer: Mlp,
    head: Mlp,
    proc_mlp: Option<Mlp>,
    segments: Vec<Segment>,
    fixed: Option<(DenseMatrix, Vec<GridOperator>)>,
}

impl IknoModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let (d, h) = (config.dim, config.hidden);
        let grid = grid_linspace(d, config.grid_l, config.grid_min, config.grid_max)?;
        let tokenizer = Mlp::new(vec![3 * d + config.in_channels, h, h]);
        let mut head_w = vec![h; config.head_depth];
        head_w.push(config.out_channels);
        let head = Mlp::new(head_w);
        let proc_mlp = match config.processor {
            ProcessorKind::Mlp { depth, width } => {
                let mut w = vec![h];
                w.extend(std::iter::repeat(width).take(depth - 1));
                w.push(h);
                Some(Mlp::new(w))
            }
            _ => None,
        };
        let proc_len = match config.processor {
            ProcessorKind::Identity => 0,
            ProcessorKind::Mlp { .. } => proc_mlp.as_ref().unwrap().num_params(),
            ProcessorKind::TinyAttention { .. } => 4 * h * h,
        };
        let fusion_len = h * config.branches * h + h;
        let kernel_len = if config.learnable_kernel() { config.branches * config.kernel_stride() } else { 0 };
        let mut segments = Vec::new();
        let mut off = 0;
        for (name, len) in [
            ("tokenizer", tokenizer.num_params()),
            ("kernel", kernel_len),
            ("encoder_fusion", fusion_len),
            ("processor", proc_len),
            ("decoder_fusion", fusion_len),
            ("head", head.num_params()),
        ] {
            segments.push(Segment { name: name.into(), offset: off, len });
            off += len;
        }
        let fixed = match config.kernel {
            KernelFamily::LinearWindow { radius, scale, alpha } => {
                let win = LinearWindowKernel::new(radius, scale, alpha)?;
                let k_full = cross_kernel_window(&win, &grid, &grid)?;
                let op = match config.variant {
                    Variant::Tp => {
                        let axis_grams: Vec<DenseMatrix> = grid
                            .axes()
                            .iter()
                            .map(|a| DenseMatrix::from_fn(a.len(), a.len(), |p, q| win.eval_distance((a[p] - a[q]).abs())))
                            .collect();
                        GridOperator::build(Variant::Tp, &axis_grams, alpha)?
                    }
                    v => GridOperator::build_dense(v, &k_full, alpha, grid.axis_sizes())?,
                };
                Some((k_full, vec![op]))
            }
            KernelFamily::Learnable => None,
        };
        Ok(Self { config, grid, tokenizer, head, proc_mlp, segments, fixed })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn grid(&self) -> &LatentGrid {
        &self.grid
    }

    pub fn num_params(&self) -> usize {
        self.segments.iter().map(|s| s.len).sum()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    fn range(&self, name: &str) -> std::ops::Range<usize> {
        let s = self.segments.iter().find(|s| s.name == name).expect("known segment");
        s.offset..s.offset + s.len
    }

    /// Offset of `(log c, β, γ)` entry `k` for branch `q`, axis `j`.
    pub fn kernel_index(&self, q: usize, j: usize, k: usize) -> usize {
        self.range("kernel").start + q * self.config.kernel_stride() + 3 * j + k
    }

    pub fn alpha_index(&self, q: usize) -> usize {
        self.range("kernel").start + q * self.config.kernel_stride() + 3 * self.config.dim
    }

    pub fn init_params(&self, seed: u64) -> ParamVector {
        let cfg = &self.config;
        let h = cfg.hidden;
        let mut v = vec![0.0; self.num_params()];
        let mut rng = Rng64::new(seed);
        self.tokenizer.init(&mut rng, &mut v[self.range("tokenizer")]);
        if cfg.learnable_kernel() {
            for q in 0..cfg.branches {
                for j in 0..cfg.dim {
                    v[self.kernel_index(q, j, 0)] = 0.0;
                    v[self.kernel_index(q, j, 1)] = cfg.init_scales[q];
                    v[self.kernel_index(q, j, 2)] = cfg.init_scales[q];
                }
                v[self.alpha_index(q)] = cfg.init_alpha;
            }
        }
        for name in ["encoder_fusion", "decoder_fusion"] {
            let r = self.range(name);
            let w = &mut v[r];
            let fan_in = cfg.branches * h;
            for o in 0..h {
                for q in 0..cfg.branches {
                    w[o * fan_in + q * h + o] = 1.0 / cfg.branches as f64;
                }
            }
        }
        match cfg.processor {
            ProcessorKind::Identity => {}
            ProcessorKind::Mlp { .. } => self.proc_mlp.as_ref().unwrap().init(&mut rng, &mut v[self.range("processor")]),
            ProcessorKind::TinyAttention { .. } => {
                let bound = 1.0 / (h as f64).sqrt();
                v[self.range("processor")].iter_mut().for_each(|x| *x = rng.uniform(-bound, bound));
            }
        }
        self.head.init(&mut rng, &mut v[self.range("head")]);
        ParamVector { values: v, segments: self.segments.clone() }
    }

    fn check_params(&self, params: &ParamVector) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(ModelError::ParamLength { expected: self.num_params(), got: params.len() });
        }
        Ok(())
    }

    /// Decodes the kernel segment; `None` for the fixed kernel family.
    pub fn kernel_params(&self, params: &ParamVector) -> Result<Option<MultiScaleKernelParams>> {
        if !self.config.learnable_kernel() {
            return Ok(None);
        }
        let v = &params.values;
        let branches = (0..self.config.branches)
            .map(|q| {
                let axes = (0..self.config.dim)
                    .map(|j| {
                        AxisKernelParams::new(
                            v[self.kernel_index(q, j, 0)].exp(),
                            v[self.kernel_index(q, j, 1)],
                            v[self.kernel_index(q, j, 2)],
                        )
                    })
                    .collect::<std::result::Result<Vec<_>, _>>()?;
                Ok(KernelBranch { axes, alpha: v[self.alpha_index(q)] })
            })
            .collect::<Result<Vec<_>>>()?;
        let k = MultiScaleKernelParams { branches };
        k.validate()?;
        Ok(Some(k))
    }

    /// Builds every branch operator for the current parameters.
    pub fn prepare(&self, params: &ParamVector) -> Result<Prepared> {
        self.check_params(params)?;
        let Some(kernels) = self.kernel_params(params)? else {
            return Ok(Prepared { kernels: None, grams: Vec::new(), ops: Vec::new() });
        };
        let mut grams = Vec::with_capacity(kernels.branches.len());
        let mut ops = Vec::with_capacity(kernels.branches.len());
        for b in &kernels.branches {
            let g: Vec<DenseMatrix> = b.axes.iter().zip(self.grid.axes()).map(|(p, a)| axis_gram(p, a).0).collect();
            ops.push(GridOperator::build(self.config.variant, &g, b.alpha)?);
            grams.push(g);
        }
        Ok(Prepared { kernels: Some(kernels), grams, ops })
    }

    fn ops<'a>(&'a self, prep: &'a Prepared) -> &'a [GridOperator] {
        match &self.fixed {
            Some((_, ops)) => ops,
            None => &prep.ops,
        }
    }

    fn check_cloud(&self, cloud: &PointCloud, channels: Option<usize>) -> Result<()> {
        if cloud.dim() != self.config.dim {
            return Err(ModelError::DimMismatch { expected: self.config.dim, got: cloud.dim() });
        }
        if let Some(c) = channels {
            if cloud.channels() != c {
                return Err(ModelError::ChannelMismatch { expected: c, got: cloud.channels() });
            }
        }
        Ok(())
    }

    /// Tokenizer input rows `[x, cos x, sin x, a]`.
    pub fn features(&self, cloud: &PointCloud) -> Result<DenseMatrix> {
        self.check_cloud(cloud, Some(self.config.in_channels))?;
        let width = 3 * self.config.dim + self.config.in_channels;
        let mut out = DenseMatrix::zeros(cloud.len(), width);
        for i in 0..cloud.len() {
            let mut row = positional_encode(cloud.coord(i), self.config.nerf_levels)?;
            row.extend_from_slice(cloud.channel_row(i));
            out.row_mut(i).copy_from_slice(&row);
        }
        Ok(out)
    }

    /// Kernel matrices between the grid and `points` (`M x n`), one per
    /// branch, plus the per-axis factors they were built from.
    fn grid_cross(&self, prep: &Prepared, points: &PointCloud) -> Result<(Vec<Vec<DenseMatrix>>, Vec<DenseMatrix>)> {
        match (&self.fixed, &prep.kernels) {
            (Some(_), _) => {
                let KernelFamily::LinearWindow { radius, scale, alpha } = self.config.kernel else { unreachable!() };
                let win = LinearWindowKernel::new(radius, scale, alpha)?;
                Ok((vec![Vec::new()], vec![cross_kernel_window(&win, &self.grid, points)?]))
            }
            (None, Some(k)) => {
                let coords: Vec<Vec<f64>> = (0..self.config.dim).map(|j| points.axis_coords(j)).collect();
                let mut factors = Vec::with_capacity(k.branches.len());
                let mut mats = Vec::with_capacity(k.branches.len());
                for b in &k.branches {
                    let f: Vec<DenseMatrix> = b
                        .axes
                        .iter()
                        .enumerate()
                        .map(|(j, p)| axis_cross(p, self.grid.axis(j), &coords[j]))
                        .collect();
                    mats.push(if points.is_empty() {
                        DenseMatrix::zeros(self.grid.len(), 0)
                    } else {
                        cross_from_axes(&f)
                    });
                    factors.push(f);
                }
                Ok((factors, mats))
            }
            (None, None) => Err(ModelError::InvalidConfig("operators not prepared".into())),
        }
    }

    pub fn tokenize(&self, params: &ParamVector, cloud: &PointCloud) -> Result<DenseMatrix> {
        self.check_params(params)?;
        Ok(self.tokenizer.forward(&params.values[self.range("tokenizer")], &self.features(cloud)?))
    }

    /// `V_G` (`M x h`) from tokens `V_P` on `cloud`.
    pub fn encode(&self, params: &ParamVector, prep: &Prepared, cloud: &PointCloud, vp: &DenseMatrix) -> Result<DenseMatrix> {
        let (_, kgp) = self.grid_cross(prep, cloud)?;
        let (_, _, cat) = self.encode_inner(prep, &kgp, vp)?;
        Ok(linear(&params.values[self.range("encoder_fusion")], self.fusion_in(), self.config.hidden, &cat))
    }

    fn fusion_in(&self) -> usize {
        self.config.branches * self.config.hidden
    }

    fn encode_inner(
        &self,
        prep: &Prepared,
        kgp: &[DenseMatrix],
        vp: &DenseMatrix,
    ) -> Result<(Vec<LatentTensor>, Vec<LatentTensor>, DenseMatrix)> {
        let sizes = self.grid.axis_sizes();
        let ops = self.ops(prep);
        let mut ins = Vec::with_capacity(ops.len());
        let mut outs = Vec::with_capacity(ops.len());
        for (q, op) in ops.iter().enumerate() {
            let b = LatentTensor::from_matrix(sizes.clone(), kgp[q.min(kgp.len() - 1)].matmul(vp)?)?;
            outs.push(op.apply(&b)?);
            ins.push(b);
        }
        let parts: Vec<DenseMatrix> = outs.iter().map(|t| t.clone().into_matrix()).collect();
        Ok((ins, outs, concat_cols(&parts)))
    }

    pub fn process(&self, params: &ParamVector, vg: &DenseMatrix) -> Result<DenseMatrix> {
        Ok(self.process_traced(&params.values[self.range("processor")], vg).0)
    }

    fn process_traced(&self, p: &[f64], vg: &DenseMatrix) -> (DenseMatrix, ProcTrace) {
        match self.config.processor {
            ProcessorKind::Identity => (vg.clone(), ProcTrace::Identity),
            ProcessorKind::Mlp { .. } => {
                let (mut y, tr) = self.proc_mlp.as_ref().unwrap().forward_traced(p, vg);
                add_into(&mut y, vg);
                (y, ProcTrace::Mlp(tr))
            }
            ProcessorKind::TinyAttention { heads } => attention_forward(p, self.config.hidden, heads, vg),
        }
    }

    /// Predictions (`N_q x out`) at `queries` from the processed latent field.
    pub fn decode(&self, params: &ParamVector, prep: &Prepared, vprime: &DenseMatrix, queries: &PointCloud) -> Result<DenseMatrix> {
        self.check_cloud(queries, None)?;
        let (_, kgq) = self.grid_cross(prep, queries)?;
        let vt = LatentTensor::from_matrix(self.grid.axis_sizes(), vprime.clone())?;
        let (_, cat) = self.decode_inner(prep, &kgq, &vt)?;
        let z = linear(&params.values[self.range("decoder_fusion")], self.fusion_in(), self.config.hidden, &cat);
        Ok(self.head.forward(&params.values[self.range("head")], &z))
    }

    fn decode_inner(&self, prep: &Prepared, kgq: &[DenseMatrix], vt: &LatentTensor) -> Result<(Vec<LatentTensor>, DenseMatrix)> {
        let ops = self.ops(prep);
        let mut ds = Vec::with_capacity(ops.len());
        let mut zs = Vec::with_capacity(ops.len());
        for (q, op) in ops.iter().enumerate() {
            let d = op.apply(vt)?;
            zs.push(kgq[q.min(kgq.len() - 1)].matmul_tn(&d.clone().into_matrix())?);
            ds.push(d);
        }
        Ok((ds, concat_cols(&zs)))
    }

    pub fn forward(&self, params: &ParamVector, input: &PointCloud, queries: &PointCloud) -> Result<DenseMatrix> {
        let prep = self.prepare(params)?;
        Ok(self.forward_traced(params, &prep, input, queries)?.0)
    }

    pub fn forward_traced(
        &self,
        params: &ParamVector,
        prep: &Prepared,
        input: &PointCloud,
        queries: &PointCloud,
    ) -> Result<(DenseMatrix, SampleTrace)> {
        self.check_params(params)?;
        self.check_cloud(queries, None)?;
        let v = &params.values;
        let feats = self.features(input)?;
        let (vp, tok) = self.tokenizer.forward_traced(&v[self.range("tokenizer")], &feats);
        let (enc_factors, kgp) = self.grid_cross(prep, input)?;
        let (enc_in, enc_out, enc_cat) = self.encode_inner(prep, &kgp, &vp)?;
        let vg = linear(&v[self.range("encoder_fusion")], self.fusion_in(), self.config.hidden, &enc_cat);
        let (vpm, proc) = self.process_traced(&v[self.range("processor")], &vg);
        let vprime = LatentTensor::from_matrix(self.grid.axis_sizes(), vpm)?;
        let (dec_factors, kgq) = self.grid_cross(prep, queries)?;
        let (dec_d, dec_cat) = self.decode_inner(prep, &kgq, &vprime)?;
        let z = linear(&v[self.range("decoder_fusion")], self.fusion_in(), self.config.hidden, &dec_cat);
        let (pred, head) = self.head.forward_traced(&v[self.range("head")], &z);
        let axes_of = |c: &PointCloud| (0..self.config.dim).map(|j| c.axis_coords(j)).collect::<Vec<_>>();
        let trace = SampleTrace {
            tok,
            vp,
            cloud_axes: axes_of(input),
            query_axes: axes_of(queries),
            enc_factors,
            kgp,
            enc_in,
            enc_out,
            enc_cat,
            proc,
            vprime,
            dec_factors,
            kgq,
            dec_d,
            dec_cat,
            head,
        };
        Ok((pred, trace))
    }

    /// Reverse sweep for one sample: the full parameter gradient of
    /// `<pred_bar, pred>`.
    pub fn backward(&self, params: &ParamVector, prep: &Prepared, tr: &SampleTrace, pred_bar: &DenseMatrix) -> Result<Vec<f64>> {
        let cfg = &self.config;
        let h = cfg.hidden;
        let v = &params.values;
        let mut g = vec![0.0; v.len()];
        let ops = self.ops(prep);
        let nb = ops.len();
        let learnable = prep.kernels.is_some();
        let mut alpha_bar = vec![0.0; nb];
        let mut gram_bar: Vec<Vec<DenseMatrix>> =
            prep.grams.iter().map(|gs| gs.iter().map(|k| DenseMatrix::zeros(k.rows(), k.cols())).collect()).collect();
        let sizes = self.grid.axis_sizes();

        let r = self.range("head");
        let z_bar = self.head.backward(&v[r.clone()], &tr.head, pred_bar, &mut g[r]);
        let r = self.range("decoder_fusion");
        let cat_bar = linear_backward(&v[r.clone()], self.fusion_in(), h, &tr.dec_cat, &z_bar, &mut g[r]);
        let mut vprime_bar = DenseMatrix::zeros(self.grid.len(), h);
        let mut kgq_bar = Vec::with_capacity(nb);
        for (q, zq_bar) in split_cols(&cat_bar, h).into_iter().enumerate() {
            let kgq = &tr.kgq[q.min(tr.kgq.len() - 1)];
            let d_bar = LatentTensor::from_matrix(sizes.clone(), kgq.matmul(&zq_bar)?)?;
            if learnable {
                kgq_bar.push(tr.dec_d[q].clone().into_matrix().matmul_nt(&zq_bar)?);
            }
            let og = ops[q].backward(&tr.vprime, &tr.dec_d[q], &d_bar)?;
            add_into(&mut vprime_bar, &og.input.into_matrix());
            alpha_bar[q] += og.alpha;
            for (acc, gk) in gram_bar.get_mut(q).into_iter().flatten().zip(&og.axis_grams) {
                add_into(acc, gk);
            }
        }

        let r = self.range("processor");
        let vg_bar = match &tr.proc {
            ProcTrace::Identity => vprime_bar,
            ProcTrace::Mlp(t) => {
                let mut xb = self.proc_mlp.as_ref().unwrap().backward(&v[r.clone()], t, &vprime_bar, &mut g[r]);
                add_into(&mut xb, &vprime_bar);
                xb
            }
            ProcTrace::Attention { .. } => {
                let ProcessorKind::TinyAttention { heads } = cfg.processor else { unreachable!() };
                attention_backward(&v[r.clone()], h, heads, &tr.proc, &vprime_bar, &mut g[r])
            }
        };

        let r = self.range("encoder_fusion");
        let cat_bar = linear_backward(&v[r.clone()], self.fusion_in(), h, &tr.enc_cat, &vg_bar, &mut g[r]);
        let mut vp_bar = DenseMatrix::zeros(tr.vp.rows(), h);
        let mut kgp_bar = Vec::with_capacity(nb);
        for (q, eq_bar) in split_cols(&cat_bar, h).into_iter().enumerate() {
            let e_bar = LatentTensor::from_matrix(sizes.clone(), eq_bar)?;
            let og = ops[q].backward(&tr.enc_in[q], &tr.enc_out[q], &e_bar)?;
            alpha_bar[q] += og.alpha;
            for (acc, gk) in gram_bar.get_mut(q).into_iter().flatten().zip(&og.axis_grams) {
                add_into(acc, gk);
            }
            let b_bar = og.input.into_matrix();
            let kgp = &tr.kgp[q.min(tr.kgp.len() - 1)];
            add_into(&mut vp_bar, &kgp.matmul_tn(&b_bar)?);
            if learnable {
                kgp_bar.push(b_bar.matmul_nt(&tr.vp)?);
            }
        }
        let r = self.range("tokenizer");
        self.tokenizer.backward(&v[r.clone()], &tr.tok, &vp_bar, &mut g[r]);

        if let Some(k) = &prep.kernels {
            for (q, b) in k.branches.iter().enumerate() {
                let mut acc = vec![[0.0; 3]; cfg.dim];
                for (j, p) in b.axes.iter().enumerate() {
                    let ga = axis_gram_vjp(p, self.grid.axis(j), self.grid.axis(j), &gram_bar[q][j]);
                    acc[j][0] += ga.d_log_c;
                    acc[j][1] += ga.d_beta;
                    acc[j][2] += ga.d_gamma;
                }
                for (factors, kbar, pts) in [
                    (&tr.enc_factors[q], &kgp_bar[q], &tr.cloud_axes),
                    (&tr.dec_factors[q], &kgq_bar[q], &tr.query_axes),
                ] {
                    if kbar.cols() == 0 {
                        continue;
                    }
                    for (j, fb) in cross_from_axes_vjp(factors, kbar).iter().enumerate() {
                        let ga = axis_gram_vjp(&b.axes[j], self.grid.axis(j), &pts[j], fb);
                        acc[j][0] += ga.d_log_c;
                        acc[j][1] += ga.d_beta;
                        acc[j][2] += ga.d_gamma;
                    }
                }
                for (j, a) in acc.iter().enumerate() {
                    for (k, val) in a.iter().enumerate() {
                        g[self.kernel_index(q, j, k)] += val;
                    }
                }
                g[self.alpha_index(q)] += alpha_bar[q];
            }
        }
        Ok(g)
    }
}

fn attention_forward(p: &[f64], h: usize, heads: usize, x: &DenseMatrix) -> (DenseMatrix, ProcTrace) {
    let w = |i: usize| DenseMatrix::new(h, h, p[i * h * h..(i + 1) * h * h].to_vec()).expect("square block");
    let (wq, wk, wv, wo) = (w(0), w(1), w(2), w(3));
    let q = x.matmul_nt(&wq).expect("shape");
    let k = x.matmul_nt(&wk).expect("shape");
    let v = x.matmul_nt(&wv).expect("shape");
    let m = x.rows();
    let dh = h / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut o = DenseMatrix::zeros(m, h);
    let mut probs = Vec::with_capacity(heads);
    for hd in 0..heads {
        let c0 = hd * dh;
        let mut pm = DenseMatrix::zeros(m, m);
        for i in 0..m {
            let qi = &q.row(i)[c0..c0 + dh];
            let row = pm.row_mut(i);
            for (j, r) in row.iter_mut().enumerate() {
                *r = scale * qi.iter().zip(&k.row(j)[c0..c0 + dh]).map(|(a, b)| a * b).sum::<f64>();
            }
            let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut s = 0.0;
            for r in row.iter_mut() {
                *r = (*r - mx).exp();
                s += *r;
            }
            row.iter_mut().for_each(|r| *r /= s);
        }
        for i in 0..m {
            for j in 0..m {
                let pij = pm.get(i, j);
                let vj = &v.row(j)[c0..c0 + dh];
                let oi = &mut o.row_mut(i)[c0..c0 + dh];
                oi.iter_mut().zip(vj).for_each(|(a, b)| *a += pij * b);
            }
        }
        probs.push(pm);
    }
    let mut y = o.matmul_nt(&wo).expect("shape");
    add_into(&mut y, x);
    (y, ProcTrace::Attention { x: x.clone(), q, k, v, probs, o })
}

fn attention_backward(p: &[f64], h: usize, heads: usize, tr: &ProcTrace, y_bar: &DenseMatrix, g: &mut [f64]) -> DenseMatrix {
    let ProcTrace::Attention { x, q, k, v, probs, o } = tr else { unreachable!() };
    let w = |i: usize| DenseMatrix::new(h, h, p[i * h * h..(i + 1) * h * h].to_vec()).expect("square block");
    let m = x.rows();
    let dh = h / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    // y = x + o Woᵀ
    let wo_bar = y_bar.matmul_tn(o).expect("shape");
    let o_bar = y_bar.matmul(&w(3)).expect("shape");
    let mut q_bar = DenseMatrix::zeros(m, h);
    let mut k_bar = DenseMatrix::zeros(m, h);
    let mut v_bar = DenseMatrix::zeros(m, h);
    for (hd, pm) in probs.iter().enumerate() {
        let c0 = hd * dh;
        for i in 0..m {
            let ob = &o_bar.row(i)[c0..c0 + dh];
            let mut p_bar = vec![0.0; m];
            for (j, pb) in p_bar.iter_mut().enumerate() {
                *pb = ob.iter().zip(&v.row(j)[c0..c0 + dh]).map(|(a, b)| a * b).sum();
                let pij = pm.get(i, j);
                v_bar.row_mut(j)[c0..c0 + dh].iter_mut().zip(ob).for_each(|(a, b)| *a += pij * b);
            }
            let inner: f64 = p_bar.iter().zip(pm.row(i)).map(|(a, b)| a * b).sum();
            for (j, &pb) in p_bar.iter().enumerate() {
                let s_bar = pm.get(i, j) * (pb - inner) * scale;
                if s_bar == 0.0 {
                    continue;
                }
                for c in c0..c0 + dh {
                    q_bar.add_at(i, c, s_bar * k.get(j, c));
                    k_bar.add_at(j, c, s_bar * q.get(i, c));
                }
            }
        }
    }
    let mut x_bar = y_bar.clone();
    for (idx, bar) in [(0, &q_bar), (1, &k_bar), (2, &v_bar)] {
        let wg = bar.matmul_tn(x).expect("shape");
        g[idx * h * h..(idx + 1) * h * h].iter_mut().zip(wg.values()).for_each(|(a, b)| *a += b);
        add_into(&mut x_bar, &bar.matmul(&w(idx)).expect("shape"));
    }
    g[3 * h * h..].iter_mut().zip(wo_bar.values()).for_each(|(a, b)| *a += b);
    x_bar
}
