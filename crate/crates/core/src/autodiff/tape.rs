//! Gradient tape: nodes are appended in construction order, which is a
//! valid topological order, and the backward pass walks them in reverse.

use super::params::{ParamId, ParamStore};
use super::tensor::{broadcast_shapes, Broadcast, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var, Broadcast, Broadcast),
    Sub(Var, Var, Broadcast, Broadcast),
    Mul(Var, Var, Broadcast, Broadcast),
    Scale(Var, f64),
    AddScalar(Var),
    /// `[rows, k] x [k, m]`; `rows` folds every leading axis of the left side.
    MatMul { a: Var, b: Var, rows: usize, k: usize, m: usize },
    GatherRows { src: Var, idx: Vec<usize> },
    ScatterAdd { src: Var, idx: Vec<usize> },
    SumAxis { src: Var, outer: usize, axis_len: usize, inner: usize, scale: f64 },
    BroadcastTo(Var, Broadcast),
    Gelu(Var),
    LayerNorm { src: Var, inv_std: Vec<f64> },
    Concat { parts: Vec<(Var, usize)>, outer: usize, inner_total: usize },
    Slice { src: Var, outer: usize, src_inner: usize, start: usize, inner: usize },
    PowI(Var, i32),
    Reshape(Var),
    LogSoftmax(Var),
    FiberMix { field: Var, kernel: Var, points: usize, fibers: usize, channels: usize },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

/// Exact (erf-based) GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `C[m x n] += A[m x k] * B[k x n]` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the caller passes buffers holding at least the extents implied
    // by (m, k, n) and the strides; `c` is a distinct, row-major m x n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Inserts a parameter; with `track` its gradient is reported by
    /// [`Tape::param_grads`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId, track: bool) -> Var {
        let v = self.push(store.get(id).clone(), Op::Leaf, track);
        if track {
            self.params.push((id, v));
        }
        v
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, Broadcast, Broadcast)> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shapes(name, &sa, &sb)?;
        let ba = Broadcast::new(&out_shape, &sa);
        let bb = Broadcast::new(&out_shape, &sb);
        let n: usize = out_shape.iter().product();
        let da = self.value(a).data();
        let db = self.value(b).data();
        let data: Vec<f64> = match (&ba, &bb) {
            (Broadcast::Same, Broadcast::Same) => {
                da.iter().zip(db).map(|(x, y)| f(*x, *y)).collect()
            }
            (Broadcast::Same, Broadcast::Suffix(m)) => {
                let mut out = Vec::with_capacity(n);
                for chunk in da.chunks(*m) {
                    out.extend(chunk.iter().zip(db).map(|(x, y)| f(*x, *y)));
                }
                out
            }
            _ => (0..n).map(|i| f(da[ba.index(i)], db[bb.index(i)])).collect(),
        };
        Ok((Tensor::new(out_shape, data)?, ba, bb))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, ba, bb) = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b, ba, bb), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, ba, bb) = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b, ba, bb), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (v, ba, bb) = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b, ba, bb), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let src = self.value(a);
        let v = Tensor::new(src.shape().to_vec(), src.data().iter().map(|x| x * c).collect())
            .expect("same shape");
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let src = self.value(a);
        let v = Tensor::new(src.shape().to_vec(), src.data().iter().map(|x| x + c).collect())
            .expect("same shape");
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    /// `a[..., k] @ b[k, m] -> [..., m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let k = sb[0];
        let m = sb[1];
        let rows: usize = sa[..sa.len() - 1].iter().product();
        let mut out = vec![0.0; rows * m];
        gemm(
            rows,
            k,
            m,
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            m as isize,
            1,
            &mut out,
        );
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(m);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, rows, k, m }, rg))
    }

    /// Selects rows along axis 0.
    pub fn gather_rows(&mut self, src: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(src).to_vec();
        if s.is_empty() {
            return Err(shape_err("gather_rows", "scalar input".into()));
        }
        let n = s[0];
        if let Some(bad) = idx.iter().find(|&&i| i >= n) {
            return Err(shape_err("gather_rows", format!("index {bad} out of {n} rows")));
        }
        let row: usize = s[1..].iter().product();
        let d = self.value(src).data();
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            out.extend_from_slice(&d[i * row..(i + 1) * row]);
        }
        let mut shape = s.clone();
        shape[0] = idx.len();
        let rg = self.rg(src);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::GatherRows {
                src,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Sums row `r` of `src` into output row `idx[r]`; output has `n_out` rows.
    /// Rows are accumulated in increasing `r`, so the reduction order is fixed.
    pub fn scatter_add(&mut self, src: Var, idx: &[usize], n_out: usize) -> Result<Var> {
        let s = self.shape(src).to_vec();
        if s.is_empty() || s[0] != idx.len() {
            return Err(shape_err(
                "scatter_add",
                format!("{s:?} with {} indices", idx.len()),
            ));
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= n_out) {
            return Err(shape_err("scatter_add", format!("index {bad} out of {n_out} rows")));
        }
        let row: usize = s[1..].iter().product();
        let d = self.value(src).data();
        let mut out = vec![0.0; n_out * row];
        for (r, &i) in idx.iter().enumerate() {
            let dst = &mut out[i * row..(i + 1) * row];
            for (o, v) in dst.iter_mut().zip(&d[r * row..(r + 1) * row]) {
                *o += v;
            }
        }
        let mut shape = s.clone();
        shape[0] = n_out;
        let rg = self.rg(src);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::ScatterAdd {
                src,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    fn reduce_axis(&mut self, src: Var, axis: usize, mean: bool) -> Result<Var> {
        let s = self.shape(src).to_vec();
        if axis >= s.len() {
            return Err(shape_err("reduce", format!("axis {axis} of {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let axis_len = s[axis];
        let inner: usize = s[axis + 1..].iter().product();
        let scale = if mean { 1.0 / axis_len.max(1) as f64 } else { 1.0 };
        let d = self.value(src).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for a in 0..axis_len {
                let base = (o * axis_len + a) * inner;
                for (x, v) in dst.iter_mut().zip(&d[base..base + inner]) {
                    *x += v;
                }
            }
            if mean {
                dst.iter_mut().for_each(|x| *x *= scale);
            }
        }
        let mut shape = s.clone();
        shape.remove(axis);
        let rg = self.rg(src);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::SumAxis {
                src,
                outer,
                axis_len,
                inner,
                scale,
            },
            rg,
        ))
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&mut self, src: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(src, axis, false)
    }

    pub fn mean_axis(&mut self, src: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(src, axis, true)
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum_all(&mut self, src: Var) -> Var {
        let n = self.value(src).len();
        let flat = self.reshape(src, vec![n]).expect("flatten");
        self.reduce_axis(flat, 0, false).expect("axis 0")
    }

    pub fn mean_all(&mut self, src: Var) -> Var {
        let n = self.value(src).len();
        let flat = self.reshape(src, vec![n]).expect("flatten");
        self.reduce_axis(flat, 0, true).expect("axis 0")
    }

    pub fn broadcast_to(&mut self, src: Var, shape: &[usize]) -> Result<Var> {
        let s = self.shape(src).to_vec();
        let out = broadcast_shapes("broadcast_to", &s, shape)?;
        if out != shape {
            return Err(shape_err("broadcast_to", format!("{s:?} -> {shape:?}")));
        }
        let b = Broadcast::new(shape, &s);
        let d = self.value(src).data();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|i| d[b.index(i)]).collect();
        let rg = self.rg(src);
        Ok(self.push(Tensor::new(shape.to_vec(), data)?, Op::BroadcastTo(src, b), rg))
    }

    pub fn gelu(&mut self, src: Var) -> Var {
        let s = self.value(src);
        let v = Tensor::new(s.shape().to_vec(), s.data().iter().map(|&x| gelu_scalar(x)).collect())
            .expect("same shape");
        let rg = self.rg(src);
        self.push(v, Op::Gelu(src), rg)
    }

    /// Normalizes over the last axis to zero mean and unit variance
    /// (`ε = 1e-5`), without affine parameters.
    pub fn layer_norm(&mut self, src: Var) -> Result<Var> {
        let s = self.shape(src).to_vec();
        let c = *s.last().ok_or_else(|| shape_err("layer_norm", "scalar input".into()))?;
        if c == 0 {
            return Err(shape_err("layer_norm", "empty last axis".into()));
        }
        let d = self.value(src).data();
        let rows = d.len() / c;
        let mut out = vec![0.0; d.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let x = &d[r * c..(r + 1) * c];
            let mean = x.iter().sum::<f64>() / c as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in out[r * c..(r + 1) * c].iter_mut().zip(x) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(src);
        Ok(self.push(Tensor::new(s, out)?, Op::LayerNorm { src, inv_std }, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat", "no inputs".into()))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(shape_err("concat", format!("axis {axis} of {s0:?}")));
        }
        let outer: usize = s0[..axis].iter().product();
        let mut meta = Vec::with_capacity(parts.len());
        let mut axis_total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != s0.len()
                || s[..axis] != s0[..axis]
                || s[axis + 1..] != s0[axis + 1..]
            {
                return Err(shape_err("concat", format!("{s0:?} vs {s:?} on axis {axis}")));
            }
            axis_total += s[axis];
            meta.push((p, s[axis..].iter().product::<usize>()));
        }
        let inner_total: usize = meta.iter().map(|m| m.1).sum();
        let mut out = Vec::with_capacity(outer * inner_total);
        for o in 0..outer {
            for &(p, inner) in &meta {
                out.extend_from_slice(&self.value(p).data()[o * inner..(o + 1) * inner]);
            }
        }
        let mut shape = s0.clone();
        shape[axis] = axis_total;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: meta,
                outer,
                inner_total,
            },
            rg,
        ))
    }

    /// `src[..., start..end, ...]` along `axis`.
    pub fn slice(&mut self, src: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(src).to_vec();
        if axis >= s.len() || start > end || end > s[axis] {
            return Err(shape_err("slice", format!("{start}..{end} on axis {axis} of {s:?}")));
        }
        let outer: usize = s[..axis].iter().product();
        let rest: usize = s[axis + 1..].iter().product();
        let src_inner = s[axis] * rest;
        let inner = (end - start) * rest;
        let d = self.value(src).data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            let base = o * src_inner + start * rest;
            out.extend_from_slice(&d[base..base + inner]);
        }
        let mut shape = s.clone();
        shape[axis] = end - start;
        let rg = self.rg(src);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Slice {
                src,
                outer,
                src_inner,
                start: start * rest,
                inner,
            },
            rg,
        ))
    }

    /// Integer power with exponent in `0..=2`.
    pub fn powi(&mut self, src: Var, exponent: i32) -> Result<Var> {
        if !(0..=2).contains(&exponent) {
            return Err(shape_err("powi", format!("unsupported exponent {exponent}")));
        }
        let s = self.value(src);
        let v = Tensor::new(
            s.shape().to_vec(),
            s.data().iter().map(|x| x.powi(exponent)).collect(),
        )?;
        let rg = self.rg(src);
        Ok(self.push(v, Op::PowI(src, exponent), rg))
    }

    pub fn reshape(&mut self, src: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(src).clone().reshape(shape)?;
        let rg = self.rg(src);
        Ok(self.push(v, Op::Reshape(src), rg))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, src: Var) -> Result<Var> {
        let s = self.shape(src).to_vec();
        let c = *s.last().ok_or_else(|| shape_err("log_softmax", "scalar input".into()))?;
        let d = self.value(src).data();
        let mut out = vec![0.0; d.len()];
        for (x, o) in d.chunks(c).zip(out.chunks_mut(c)) {
            let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for (oi, xi) in o.iter_mut().zip(x) {
                *oi = xi - lse;
            }
        }
        let rg = self.rg(src);
        Ok(self.push(Tensor::new(s, out)?, Op::LogSoftmax(src), rg))
    }

    /// Depthwise mixing along the fiber axis:
    /// `out[p, k, c] = Σ_l kernel[k, l, c] · field[p, l, c]`.
    pub fn fiber_mix(&mut self, field: Var, kernel: Var) -> Result<Var> {
        let sf = self.shape(field).to_vec();
        let sk = self.shape(kernel).to_vec();
        if sf.len() != 3 || sk.len() != 3 || sk[0] != sf[1] || sk[1] != sf[1] || sk[2] != sf[2] {
            return Err(shape_err("fiber_mix", format!("field {sf:?} kernel {sk:?}")));
        }
        let (points, fibers, channels) = (sf[0], sf[1], sf[2]);
        let f = self.value(field).data();
        let kv = self.value(kernel).data();
        let mut out = vec![0.0; f.len()];
        let oc = fibers * channels;
        for p in 0..points {
            let fp = &f[p * oc..(p + 1) * oc];
            let op = &mut out[p * oc..(p + 1) * oc];
            for k in 0..fibers {
                let dst = &mut op[k * channels..(k + 1) * channels];
                for l in 0..fibers {
                    let kk = &kv[(k * fibers + l) * channels..(k * fibers + l + 1) * channels];
                    let src = &fp[l * channels..(l + 1) * channels];
                    for ((d, a), b) in dst.iter_mut().zip(kk).zip(src) {
                        *d += a * b;
                    }
                }
            }
        }
        let rg = self.rg(field) || self.rg(kernel);
        Ok(self.push(
            Tensor::new(sf, out)?,
            Op::FiberMix {
                field,
                kernel,
                points,
                fibers,
                channels,
            },
            rg,
        ))
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every tracked parameter after [`Tape::backward`]. A
    /// parameter inserted more than once receives the sum.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<(ParamId, Tensor)> = Vec::new();
        for &(id, v) in &self.params {
            let shape = self.shape(v).to_vec();
            let g = self
                .grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; shape.iter().product()]);
            if let Some(existing) = out.iter_mut().find(|(i, _)| *i == id) {
                for (a, b) in existing.1.data_mut().iter_mut().zip(&g) {
                    *a += b;
                }
            } else {
                out.push((id, Tensor::new(shape, g).expect("param shape")));
            }
        }
        out
    }

    /// Reverse pass from a single-element output, seeding its gradient with 1.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.value(output).len() != 1 {
            return Err(shape_err(
                "backward",
                format!("output must be scalar, got {:?}", self.shape(output)),
            ));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[output.0] = Some(vec![1.0]);
        for id in (0..=output.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            self.backward_node(id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn backward_node(&mut self, id: usize, g: &[f64]) {
        // Split borrow: the op is read from `nodes`, gradients live in `grads`.
        let nodes = std::mem::take(&mut self.nodes);
        let node = &nodes[id];
        let val = |v: Var| nodes[v.0].value.data();
        let rg = |v: Var| nodes[v.0].requires_grad;
        macro_rules! acc {
            ($v:expr) => {{
                let n = nodes[$v.0].value.len();
                self.grads[$v.0].get_or_insert_with(|| vec![0.0; n])
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, ba, bb) => {
                if rg(*a) {
                    ba.reduce_into(g, acc!(*a));
                }
                if rg(*b) {
                    bb.reduce_into(g, acc!(*b));
                }
            }
            Op::Sub(a, b, ba, bb) => {
                if rg(*a) {
                    ba.reduce_into(g, acc!(*a));
                }
                if rg(*b) {
                    let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                    bb.reduce_into(&neg, acc!(*b));
                }
            }
            Op::Mul(a, b, ba, bb) => {
                let (da, db) = (val(*a), val(*b));
                if rg(*a) {
                    let t: Vec<f64> = g.iter().enumerate().map(|(i, x)| x * db[bb.index(i)]).collect();
                    ba.reduce_into(&t, acc!(*a));
                }
                if rg(*b) {
                    let t: Vec<f64> = g.iter().enumerate().map(|(i, x)| x * da[ba.index(i)]).collect();
                    bb.reduce_into(&t, acc!(*b));
                }
            }
            Op::Scale(a, c) => {
                let ga = acc!(*a);
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += c * y;
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let ga = acc!(*a);
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += y;
                }
            }
            &Op::MatMul { a, b, rows, k, m } => {
                if rg(a) {
                    // dA[rows x k] += G[rows x m] * B^T
                    let db = val(b);
                    let ga = acc!(a);
                    gemm(rows, m, k, g, m as isize, 1, db, 1, m as isize, ga);
                }
                if rg(b) {
                    // dB[k x m] += A^T[k x rows] * G
                    let da = val(a);
                    let gb = acc!(b);
                    gemm(k, rows, m, da, 1, k as isize, g, m as isize, 1, gb);
                }
            }
            Op::GatherRows { src, idx } => {
                let row = if idx.is_empty() { 0 } else { g.len() / idx.len() };
                let gs = acc!(*src);
                for (r, &i) in idx.iter().enumerate() {
                    for (x, y) in gs[i * row..(i + 1) * row].iter_mut().zip(&g[r * row..(r + 1) * row]) {
                        *x += y;
                    }
                }
            }
            Op::ScatterAdd { src, idx } => {
                let row = if idx.is_empty() { 0 } else { nodes[src.0].value.len() / idx.len() };
                let gs = acc!(*src);
                for (r, &i) in idx.iter().enumerate() {
                    for (x, y) in gs[r * row..(r + 1) * row].iter_mut().zip(&g[i * row..(i + 1) * row]) {
                        *x += y;
                    }
                }
            }
            &Op::SumAxis {
                src,
                outer,
                axis_len,
                inner,
                scale,
            } => {
                let gs = acc!(src);
                for o in 0..outer {
                    let go = &g[o * inner..(o + 1) * inner];
                    for a in 0..axis_len {
                        let base = (o * axis_len + a) * inner;
                        for (x, y) in gs[base..base + inner].iter_mut().zip(go) {
                            *x += scale * y;
                        }
                    }
                }
            }
            Op::BroadcastTo(src, b) => {
                b.reduce_into(g, acc!(*src));
            }
            Op::Gelu(src) => {
                let x = val(*src);
                let gs = acc!(*src);
                for ((acc, gi), xi) in gs.iter_mut().zip(g).zip(x) {
                    *acc += gi * gelu_grad(*xi);
                }
            }
            Op::LayerNorm { src, inv_std } => {
                let y = node.value.data();
                let c = node.value.shape().last().copied().unwrap_or(1);
                let gs = acc!(*src);
                for (r, is) in inv_std.iter().enumerate() {
                    let gr = &g[r * c..(r + 1) * c];
                    let yr = &y[r * c..(r + 1) * c];
                    let mean_g = gr.iter().sum::<f64>() / c as f64;
                    let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for ((acc, gi), yi) in gs[r * c..(r + 1) * c].iter_mut().zip(gr).zip(yr) {
                        *acc += is * (gi - mean_g - yi * mean_gy);
                    }
                }
            }
            Op::Concat {
                parts,
                outer,
                inner_total,
            } => {
                let mut offset = 0;
                for &(p, inner) in parts {
                    if rg(p) {
                        let gp = acc!(p);
                        for o in 0..*outer {
                            let src = &g[o * inner_total + offset..o * inner_total + offset + inner];
                            for (x, y) in gp[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                                *x += y;
                            }
                        }
                    }
                    offset += inner;
                }
            }
            &Op::Slice {
                src,
                outer,
                src_inner,
                start,
                inner,
            } => {
                let gs = acc!(src);
                for o in 0..outer {
                    let base = o * src_inner + start;
                    for (x, y) in gs[base..base + inner].iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                        *x += y;
                    }
                }
            }
            &Op::PowI(src, e) => {
                let x = val(src);
                let gs = acc!(src);
                for ((acc, gi), xi) in gs.iter_mut().zip(g).zip(x) {
                    *acc += gi * e as f64 * if e == 0 { 0.0 } else { xi.powi(e - 1) };
                }
            }
            Op::LogSoftmax(src) => {
                let y = node.value.data();
                let c = node.value.shape().last().copied().unwrap_or(1);
                let gs = acc!(*src);
                for r in 0..y.len() / c {
                    let gr = &g[r * c..(r + 1) * c];
                    let sum_g: f64 = gr.iter().sum();
                    for j in 0..c {
                        gs[r * c + j] += gr[j] - y[r * c + j].exp() * sum_g;
                    }
                }
            }
            &Op::FiberMix {
                field,
                kernel,
                points,
                fibers,
                channels,
            } => {
                let oc = fibers * channels;
                if rg(field) {
                    let kv = val(kernel);
                    let gf = acc!(field);
                    for p in 0..points {
                        for k in 0..fibers {
                            let gk = &g[p * oc + k * channels..p * oc + (k + 1) * channels];
                            for l in 0..fibers {
                                let kk = &kv[(k * fibers + l) * channels..(k * fibers + l + 1) * channels];
                                let dst = &mut gf[p * oc + l * channels..p * oc + (l + 1) * channels];
                                for ((d, a), b) in dst.iter_mut().zip(kk).zip(gk) {
                                    *d += a * b;
                                }
                            }
                        }
                    }
                }
                if rg(kernel) {
                    let fv = val(field);
                    let gk = acc!(kernel);
                    for p in 0..points {
                        for k in 0..fibers {
                            let gp = &g[p * oc + k * channels..p * oc + (k + 1) * channels];
                            for l in 0..fibers {
                                let fl = &fv[p * oc + l * channels..p * oc + (l + 1) * channels];
                                let dst = &mut gk[(k * fibers + l) * channels..(k * fibers + l + 1) * channels];
                                for ((d, a), b) in dst.iter_mut().zip(gp).zip(fl) {
                                    *d += a * b;
                                }
                            }
                        }
                    }
                }
            }
        }
        self.nodes = nodes;
    }
}
