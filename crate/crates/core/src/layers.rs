//! Input embedding, the separable ConvNext block and readouts.
//!
//! Feature fields are `P x O x C` tensors (points, fiber orientations,
//! channels); ℝ³ regimes use `O = 1`.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geom3d::SphereGrid;
use crate::invariants::{spatial_attrs, PairAttributes, Regime};
use crate::pointcloud::{NeighborGraph, PointCloud};

/// Total degree of kernel polynomials.
pub const KERNEL_DEGREE: usize = 2;
/// Hidden width multiplier of the pointwise MLP.
pub const EXPANSION: usize = 4;

/// Monomials of total degree ≤ 2 in `n` variables, constant included.
pub fn monomial_count(n: usize) -> usize {
    1 + n + n * (n + 1) / 2
}

/// Appends the degree-≤2 monomials of `vars` in graded lexicographic order:
/// `1, x₁..xₙ, x₁x₁, x₁x₂, .., x₁xₙ, x₂x₂, .., xₙxₙ`.
pub fn push_monomials(vars: &[f64], out: &mut Vec<f64>) {
    out.push(1.0);
    out.extend_from_slice(vars);
    for a in 0..vars.len() {
        for b in a..vars.len() {
            out.push(vars[a] * vars[b]);
        }
    }
}

/// `rows x M` monomial table of attribute rows.
pub fn monomial_table(attrs: &PairAttributes) -> Tensor {
    let m = monomial_count(attrs.width);
    let mut data = Vec::with_capacity(attrs.rows() * m);
    for r in 0..attrs.rows() {
        push_monomials(attrs.row(r), &mut data);
    }
    Tensor::new(vec![attrs.rows(), m], data).expect("monomial table shape")
}

/// Evaluates `k_c(a) = Σ_m coeffs[m, c] · monomial_m(a)` for every row of a
/// monomial table. Coefficients are stored `M x C`.
pub fn poly_kernel(tape: &mut Tape, monomials: Var, coeffs: Var) -> Result<Var> {
    tape.matmul(monomials, coeffs)
}

/// Which geometric quantities enter the network and how.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct InputSpec {
    pub coords_as_scalars: bool,
    pub coords_as_vectors: bool,
    pub aux_as_scalars: bool,
    pub aux_as_vectors: bool,
    pub global_frame: bool,
    /// Per-point scalar (typically one-hot) features taken from the cloud.
    pub scalar_channels: usize,
    /// Number of auxiliary vectors per point (e.g. velocities).
    pub aux_vectors: usize,
}

impl InputSpec {
    /// Width of the raw embedding before the learnable lift.
    pub fn channels(&self) -> usize {
        let v = self.aux_vectors;
        self.scalar_channels
            + 3 * usize::from(self.coords_as_scalars)
            + usize::from(self.coords_as_vectors)
            + 3 * v * usize::from(self.aux_as_scalars)
            + v * usize::from(self.aux_as_vectors)
            + 3 * usize::from(self.global_frame)
    }

    /// Whether any input is projected onto the fiber directions.
    pub fn needs_fiber(&self) -> bool {
        self.coords_as_vectors || self.aux_as_vectors || self.global_frame
    }

    pub fn flag_names(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.coords_as_scalars {
            out.push("coords_as_scalars");
        }
        if self.coords_as_vectors {
            out.push("coords_as_vectors");
        }
        if self.aux_as_scalars {
            out.push("aux_as_scalars");
        }
        if self.aux_as_vectors {
            out.push("aux_as_vectors");
        }
        if self.global_frame {
            out.push("global_frame");
        }
        out
    }
}

/// Raw input field `P x O x Cin` with channel blocks in this order:
/// scalar features, coordinates as scalars (3), coordinates projected on
/// each fiber direction (1), auxiliary vectors as scalars (3 each),
/// auxiliary vectors projected on the fiber (1 each), and the three axes of
/// the point's reference frame projected on the fiber (3).
pub fn embed(cloud: &PointCloud, grid: &SphereGrid, spec: &InputSpec) -> Result<Tensor> {
    let o = grid.len();
    if spec.needs_fiber() && o < 2 {
        return Err(Error::Config(format!(
            "inputs {:?} are projected onto fiber directions, which needs a sphere grid; \
             use coords_as_scalars/aux_as_scalars for ℝ³ models",
            spec.flag_names()
                .into_iter()
                .filter(|f| !f.ends_with("scalars"))
                .collect::<Vec<_>>()
        )));
    }
    if cloud.n_scalars != spec.scalar_channels {
        return Err(Error::Precondition(format!(
            "model expects {} scalar feature channels, cloud has {}",
            spec.scalar_channels, cloud.n_scalars
        )));
    }
    if (spec.aux_as_scalars || spec.aux_as_vectors) && cloud.n_vectors < spec.aux_vectors {
        return Err(Error::Precondition(format!(
            "model expects {} auxiliary vectors, cloud has {}",
            spec.aux_vectors, cloud.n_vectors
        )));
    }
    let c = spec.channels();
    let dirs = grid.directions();
    let p = cloud.len();
    let mut data = Vec::with_capacity(p * o * c);
    for i in 0..p {
        let x = cloud.positions[i];
        for n in dirs {
            for s in 0..spec.scalar_channels {
                data.push(cloud.scalar(i, s));
            }
            if spec.coords_as_scalars {
                data.extend_from_slice(x.as_slice());
            }
            if spec.coords_as_vectors {
                data.push(x.dot(n));
            }
            if spec.aux_as_scalars {
                for v in 0..spec.aux_vectors {
                    data.extend_from_slice(cloud.vector(i, v).as_slice());
                }
            }
            if spec.aux_as_vectors {
                for v in 0..spec.aux_vectors {
                    data.push(cloud.vector(i, v).dot(n));
                }
            }
            if spec.global_frame {
                for m in 0..3 {
                    data.push(cloud.frames[i].axis(m).dot(n));
                }
            }
        }
    }
    Tensor::new(vec![p, o, c], data)
}

/// One forward evaluation: a tape plus lazily inserted parameters.
pub struct Forward<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
    track: bool,
}

impl<'a> Forward<'a> {
    /// With `track`, parameter gradients are collected on backward.
    pub fn new(store: &'a ParamStore, track: bool) -> Self {
        Self {
            tape: Tape::new(),
            store,
            vars: vec![None; store.len()],
            track,
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.index()] {
            return v;
        }
        let v = self.tape.param(self.store, id, self.track);
        self.vars[id.index()] = Some(v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.tape.constant(t)
    }

    /// Uses `v` in place of parameter `id` from now on.
    pub fn bind(&mut self, id: ParamId, v: Var) {
        self.vars[id.index()] = Some(v);
    }
}

pub(crate) fn normal_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], variance: f64) -> Tensor {
    let dist = Normal::new(0.0, variance.sqrt()).expect("finite variance");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
        .expect("init shape")
}

/// Dense map over the last axis, weights `in x out` drawn from
/// `N(0, 1/in)`, bias initialized to zero.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            normal_tensor(rng, &[fan_in, fan_out], 1.0 / fan_in.max(1) as f64),
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])));
        Self {
            weight,
            bias,
            fan_in,
            fan_out,
        }
    }

    pub fn param_count(fan_in: usize, fan_out: usize, bias: bool) -> usize {
        fan_in * fan_out + if bias { fan_out } else { 0 }
    }

    pub fn forward(&self, fw: &mut Forward, x: Var) -> Result<Var> {
        let w = fw.param(self.weight);
        let y = fw.tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = fw.param(b);
                fw.tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Graph and kernel inputs shared by every block operating at one
/// resolution.
#[derive(Debug, Clone)]
pub struct LevelGeometry {
    pub targets: Vec<usize>,
    pub sources: Vec<usize>,
    pub n_points: usize,
    pub fibers: usize,
    /// `E x M` for ℝ³ regimes, `E·O x M` for fiber regimes.
    pub spatial_monomials: Tensor,
    /// `O·O x 3` monomials of `n_kᵀn_l`; absent for ℝ³ regimes.
    pub fiber_monomials: Option<Tensor>,
    /// Quadrature weights `w_l`, shaped `O x 1`.
    pub fiber_weights: Tensor,
}

impl LevelGeometry {
    pub fn new(
        regime: Regime,
        cloud: &PointCloud,
        graph: &NeighborGraph,
        grid: &SphereGrid,
        scale: f64,
    ) -> Result<Self> {
        let attrs = spatial_attrs(regime, cloud, graph, grid, scale)?;
        let fibers = if regime.has_fiber() { grid.len() } else { 1 };
        let fiber_monomials = regime.has_fiber().then(|| {
            let gram = grid.gram();
            let mut data = Vec::with_capacity(gram.len() * 3);
            for g in gram {
                push_monomials(&[g], &mut data);
            }
            Tensor::new(vec![fibers * fibers, 3], data).expect("fiber monomials")
        });
        let fiber_weights = if regime.has_fiber() {
            Tensor::new(vec![fibers, 1], grid.weights().to_vec())?
        } else {
            Tensor::full(&[1, 1], 1.0)
        };
        Ok(Self {
            targets: graph.targets.clone(),
            sources: graph.sources.clone(),
            n_points: cloud.len(),
            fibers,
            spatial_monomials: monomial_table(&attrs),
            fiber_monomials,
            fiber_weights,
        })
    }

    pub fn edges(&self) -> usize {
        self.targets.len()
    }
}

/// Tape handles of a [`LevelGeometry`]'s constants, inserted once per
/// forward pass and shared by the blocks of that level.
#[derive(Debug, Clone, Copy)]
pub struct LevelVars {
    pub spatial: Var,
    pub fiber: Option<Var>,
    pub weights: Var,
}

impl LevelVars {
    pub fn new(fw: &mut Forward, geo: &LevelGeometry) -> Self {
        Self {
            spatial: fw.constant(geo.spatial_monomials.clone()),
            fiber: geo.fiber_monomials.clone().map(|t| fw.constant(t)),
            weights: fw.constant(geo.fiber_weights.clone()),
        }
    }
}

/// Depthwise separable convolution followed by LayerNorm, a pointwise
/// `C → hidden → C` GELU MLP and a residual connection.
#[derive(Debug, Clone)]
pub struct ConvNextBlock {
    pub index: usize,
    pub channels: usize,
    pub spatial: ParamId,
    pub fiber: Option<ParamId>,
    pub conv_bias: ParamId,
    pub norm_scale: ParamId,
    pub norm_shift: ParamId,
    pub expand: Linear,
    pub contract: Linear,
}

impl ConvNextBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        index: usize,
        regime: Regime,
        channels: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let m = monomial_count(regime.spatial_vars());
        let spatial = store.add(
            format!("{name}.spatial_kernel"),
            normal_tensor(rng, &[m, channels], 1.0 / m as f64),
        );
        let fiber = regime.has_fiber().then(|| {
            store.add(
                format!("{name}.fiber_kernel"),
                normal_tensor(rng, &[3, channels], 1.0 / 3.0),
            )
        });
        let conv_bias = store.add(format!("{name}.conv_bias"), Tensor::zeros(&[channels]));
        let norm_scale = store.add(format!("{name}.norm_scale"), Tensor::full(&[channels], 1.0));
        let norm_shift = store.add(format!("{name}.norm_shift"), Tensor::zeros(&[channels]));
        let expand = Linear::new(store, &format!("{name}.expand"), channels, hidden, true, rng);
        let contract = Linear::new(store, &format!("{name}.contract"), hidden, channels, true, rng);
        Self {
            index,
            channels,
            spatial,
            fiber,
            conv_bias,
            norm_scale,
            norm_shift,
            expand,
            contract,
        }
    }

    pub fn param_count(regime: Regime, channels: usize, hidden: usize) -> usize {
        let c = channels;
        let h = hidden;
        monomial_count(regime.spatial_vars()) * c
            + if regime.has_fiber() { 3 * c } else { 0 }
            + 3 * c
            + Linear::param_count(c, h, true)
            + Linear::param_count(h, c, true)
    }

    /// Spatial message passing then fiber mixing, without bias:
    /// `out(i,k) = Σ_l k_fiber(n_kᵀn_l) w_l Σ_j k_spatial(a(xᵢ, n_l, xⱼ)) f(j,l)`.
    pub fn convolve(
        &self,
        fw: &mut Forward,
        x: Var,
        geo: &LevelGeometry,
        vars: &LevelVars,
    ) -> Result<Var> {
        let (e, o, c) = (geo.edges(), geo.fibers, self.channels);
        let coeffs = fw.param(self.spatial);
        let kernel = poly_kernel(&mut fw.tape, vars.spatial, coeffs)?;
        if !fw.tape.value(kernel).is_finite() {
            return Err(Error::NonFinite(format!("spatial kernel of block {}", self.index)));
        }
        let kernel = fw.tape.reshape(kernel, vec![e, o, c])?;
        let messages = fw.tape.gather_rows(x, &geo.sources)?;
        let messages = fw.tape.mul(messages, kernel)?;
        let mut y = fw.tape.scatter_add(messages, &geo.targets, geo.n_points)?;
        if let (Some(fid), Some(mono)) = (self.fiber, vars.fiber) {
            let coeffs = fw.param(fid);
            let k = poly_kernel(&mut fw.tape, mono, coeffs)?;
            if !fw.tape.value(k).is_finite() {
                return Err(Error::NonFinite(format!("fiber kernel of block {}", self.index)));
            }
            let k = fw.tape.reshape(k, vec![o, o, c])?;
            let k = fw.tape.mul(k, vars.weights)?;
            y = fw.tape.fiber_mix(y, k)?;
        }
        Ok(y)
    }

    pub fn forward(
        &self,
        fw: &mut Forward,
        x: Var,
        geo: &LevelGeometry,
        vars: &LevelVars,
    ) -> Result<Var> {
        let y = self.convolve(fw, x, geo, vars)?;
        let b = fw.param(self.conv_bias);
        let y = fw.tape.add(y, b)?;
        let y = fw.tape.layer_norm(y)?;
        let g = fw.param(self.norm_scale);
        let y = fw.tape.mul(y, g)?;
        let s = fw.param(self.norm_shift);
        let y = fw.tape.add(y, s)?;
        let y = self.expand.forward(fw, y)?;
        let y = fw.tape.gelu(y);
        let y = self.contract.forward(fw, y)?;
        fw.tape.add(x, y)
    }
}

/// Fiber weights `w_k / 4π`, shaped `O x 1`, for quadrature means.
fn fiber_mean_weights(grid: &SphereGrid, fibers: usize) -> Tensor {
    if fibers == 1 {
        return Tensor::full(&[1, 1], 1.0);
    }
    Tensor::new(
        vec![fibers, 1],
        grid.weights().iter().map(|w| w / (4.0 * PI)).collect(),
    )
    .expect("weights shape")
}

/// Quadrature mean over the fiber, optional per-sample mean over points,
/// then a linear map to the target width.
#[derive(Debug, Clone)]
pub struct InvariantReadout {
    pub linear: Linear,
}

impl InvariantReadout {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            linear: Linear::new(store, name, channels, outputs, true, rng),
        }
    }

    /// `x` is `P x O x C`; `groups` (sample index per point, `n_groups`
    /// total) selects global pooling. Output is `P x out` or `G x out`.
    pub fn forward(
        &self,
        fw: &mut Forward,
        x: Var,
        grid: &SphereGrid,
        groups: Option<(&[usize], usize)>,
    ) -> Result<Var> {
        let pooled = fiber_mean(fw, x, grid)?;
        let pooled = match groups {
            Some((idx, n)) => group_mean(fw, pooled, idx, n)?,
            None => pooled,
        };
        self.linear.forward(fw, pooled)
    }
}

/// `(1/4π) Σ_k w_k f(·, k, ·)`: `P x O x C → P x C`.
pub fn fiber_mean(fw: &mut Forward, x: Var, grid: &SphereGrid) -> Result<Var> {
    let o = fw.tape.shape(x)[1];
    if o != 1 && o != grid.len() {
        return Err(Error::Shape {
            op: "fiber_mean",
            detail: format!("field has {o} fibers, grid has {}", grid.len()),
        });
    }
    let w = fw.constant(fiber_mean_weights(grid, o));
    let y = fw.tape.mul(x, w)?;
    fw.tape.sum_axis(y, 1)
}

/// Mean of rows per group: `P x C → G x C`.
pub fn group_mean(fw: &mut Forward, x: Var, groups: &[usize], n_groups: usize) -> Result<Var> {
    let mut counts = vec![0.0; n_groups];
    for &g in groups {
        counts[g] += 1.0;
    }
    let sums = fw.tape.scatter_add(x, groups, n_groups)?;
    let inv = fw.constant(Tensor::new(
        vec![n_groups, 1],
        counts.iter().map(|c: &f64| 1.0 / c.max(1.0)).collect(),
    )?);
    fw.tape.mul(sums, inv)
}

/// Per-point vectors `(3/4π) Σ_k w_k f(xᵢ, n_k) n_k` from a learned
/// depthwise channel-to-one map.
#[derive(Debug, Clone)]
pub struct VectorReadout {
    pub weight: ParamId,
    pub channels: usize,
}

impl VectorReadout {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            format!("{name}.weight"),
            normal_tensor(rng, &[channels, 1], 1.0 / channels as f64),
        );
        Self { weight, channels }
    }

    /// `x` is `P x O x C`; output `P x 3`.
    pub fn forward(&self, fw: &mut Forward, x: Var, grid: &SphereGrid) -> Result<Var> {
        let w = fw.param(self.weight);
        let s = fw.tape.matmul(x, w)?;
        project_to_vectors(fw, s, grid)
    }
}

/// `(3/4π) Σ_k w_k s(·, k) n_k` for a `P x O x 1` (or `P x O`) signal.
pub fn project_to_vectors(fw: &mut Forward, signal: Var, grid: &SphereGrid) -> Result<Var> {
    let o = grid.len();
    if o < 2 {
        return Err(Error::Config(
            "vector readout needs a sphere grid with at least 2 directions".into(),
        ));
    }
    let shape = fw.tape.shape(signal).to_vec();
    let p = shape[0];
    let s = fw.tape.reshape(signal, vec![p, o])?;
    let mut proj = Vec::with_capacity(o * 3);
    for (n, w) in grid.directions().iter().zip(grid.weights()) {
        for d in 0..3 {
            proj.push(3.0 / (4.0 * PI) * w * n[d]);
        }
    }
    let proj = fw.constant(Tensor::new(vec![o, 3], proj)?);
    fw.tape.matmul(s, proj)
}
