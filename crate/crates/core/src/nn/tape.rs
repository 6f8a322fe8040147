//! Reverse-mode differentiation over a linear record of batched operations.
//!
//! Every operation works on row-major matrices (`[rows, cols]`) and records
//! exactly what its backward rule needs. Parameter leaves borrow their values
//! from a [`ParameterStore`], so building a graph never copies weights.

use std::collections::HashMap;

use super::params::{Gradients, ParameterStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`GradientTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a cubic 3D convolution with channels-last layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_size(&self) -> usize {
        (self.in_size + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn in_voxels(&self) -> usize {
        self.in_size.pow(3)
    }

    pub fn out_voxels(&self) -> usize {
        self.out_size().pow(3)
    }

    pub fn patch_len(&self) -> usize {
        self.kernel.pow(3) * self.in_channels
    }

    /// For each (output voxel, kernel tap) the input voxel it reads, if any.
    fn gather_map(&self) -> Vec<Option<usize>> {
        let (n, o, k) = (self.in_size as isize, self.out_size(), self.kernel);
        let mut map = Vec::with_capacity(o.pow(3) * k.pow(3));
        for oz in 0..o {
            for oy in 0..o {
                for ox in 0..o {
                    for kz in 0..k {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iz = (oz * self.stride + kz) as isize - self.padding as isize;
                                let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                                let inside = (0..n).contains(&iz) && (0..n).contains(&iy) && (0..n).contains(&ix);
                                map.push(inside.then(|| ((iz * n + iy) * n + ix) as usize));
                            }
                        }
                    }
                }
            }
        }
        map
    }
}

enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    MatMulNt {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    MulConst {
        a: Var,
        c: Vec<f64>,
    },
    BroadcastRows {
        a: Var,
    },
    Relu {
        a: Var,
    },
    LeakyRelu {
        a: Var,
        slope: f64,
    },
    Tanh {
        a: Var,
    },
    Embedding {
        table: Var,
        idx: Vec<usize>,
    },
    Conv3d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
        cols: Vec<f64>,
        map: Vec<Option<usize>>,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    RepeatRows {
        a: Var,
        times: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        group: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    MeanGroups {
        a: Var,
        group: usize,
    },
    Reshape {
        a: Var,
    },
    Sum {
        a: Var,
    },
    SumSquares {
        a: Var,
    },
    Scale {
        a: Var,
        s: f64,
    },
}

struct Node {
    /// `None` for parameter leaves, whose value lives in the store.
    value: Option<Tensor>,
    param: Option<usize>,
    op: Op,
}

const LAYER_NORM_EPS: f64 = 1e-5;

/// A single forward recording; supports exactly one backward pass.
pub struct GradientTape<'p> {
    store: Option<&'p ParameterStore>,
    nodes: Vec<Node>,
    param_vars: HashMap<usize, Var>,
    grads: Option<Vec<Option<Vec<f64>>>>,
}

fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_trans: bool, b: &[f64], b_trans: bool, c: &mut [f64], beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above against the logical extents
    // and strides describe row-major storage of those slices.
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn slot<'g>(grads: &'g mut [Option<Vec<f64>>], v: Var, len: usize) -> &'g mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl<'p> GradientTape<'p> {
    pub fn new(store: &'p ParameterStore) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            grads: None,
        }
    }

    /// A tape without parameters, for differentiating plain functions.
    pub fn detached() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            grads: None,
        }
    }

    pub fn store(&self) -> Option<&'p ParameterStore> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, node.param) {
            (Some(t), _) => t,
            (None, Some(idx)) => self
                .store
                .expect("parameter leaf recorded without a store")
                .by_index(idx),
            (None, None) => unreachable!("node without value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            param: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn guard_recording(&self) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::Usage(
                "cannot record onto a tape that has already been differentiated".into(),
            ));
        }
        Ok(())
    }

    /// Leaf bound to the named parameter; repeated requests share one node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        self.guard_recording()?;
        let store = self
            .store
            .ok_or_else(|| Error::Usage("tape has no parameter store".into()))?;
        let idx = store.index_of(name)?;
        if let Some(&v) = self.param_vars.get(&idx) {
            return Ok(v);
        }
        self.nodes.push(Node {
            value: None,
            param: Some(idx),
            op: Op::Leaf,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(idx, v);
        Ok(v)
    }

    /// Constant input; rejects non-finite data.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.guard_recording()?;
        t.ensure_finite("tape input")?;
        Ok(self.push(t, Op::Leaf))
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.guard_recording()?;
        let (rows, in_dim) = self.dims(x);
        let wt = self.value(w);
        if wt.shape().len() != 2 || wt.shape()[0] != in_dim {
            return Err(Error::shape("linear weight", &[in_dim, 0], wt.shape()));
        }
        let out_dim = wt.shape()[1];
        if self.value(b).len() != out_dim {
            return Err(Error::shape("linear bias", &[out_dim], self.value(b).shape()));
        }
        let mut out = vec![0.0; rows * out_dim];
        gemm(
            rows,
            in_dim,
            out_dim,
            self.value(x).data(),
            false,
            wt.data(),
            false,
            &mut out,
            0.0,
        );
        let bias = self.value(b).data();
        for row in out.chunks_mut(out_dim) {
            for (o, bb) in row.iter_mut().zip(bias) {
                *o += bb;
            }
        }
        Ok(self.push(Tensor::matrix(rows, out_dim, out)?, Op::Linear { x, w, b }))
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.guard_recording()?;
        let (m, k) = self.dims(a);
        let (n, kb) = self.dims(b);
        if k != kb {
            return Err(Error::shape("matmul_nt", &[n, k], &[n, kb]));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            true,
            &mut out,
            0.0,
        );
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulNt { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.guard_recording()?;
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() {
            return Err(Error::shape("add", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add { a, b }))
    }

    /// Elementwise product with a constant of the same size.
    pub fn mul_const(&mut self, a: Var, c: Vec<f64>) -> Result<Var> {
        self.guard_recording()?;
        let ta = self.value(a);
        if ta.len() != c.len() {
            return Err(Error::shape("mul_const", ta.shape(), &[c.len()]));
        }
        let data = ta.data().iter().zip(&c).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::MulConst { a, c }))
    }

    /// Repeats a single row (or flat vector) `rows` times.
    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Result<Var> {
        self.guard_recording()?;
        let ta = self.value(a);
        let cols = ta.len();
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            data.extend_from_slice(ta.data());
        }
        Ok(self.push(Tensor::matrix(rows, cols, data)?, Op::BroadcastRows { a }))
    }

    fn map_unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        self.guard_recording()?;
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, op))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map_unary(a, |x| x.max(0.0), Op::Relu { a })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.map_unary(a, |x| if x > 0.0 { x } else { slope * x }, Op::LeakyRelu { a, slope })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map_unary(a, f64::tanh, Op::Tanh { a })
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map_unary(a, |x| s * x, Op::Scale { a, s })
    }

    /// Row lookup: output row `r` is `table[idx[r]]`.
    pub fn embedding(&mut self, table: Var, idx: Vec<usize>) -> Result<Var> {
        self.guard_recording()?;
        let tt = self.value(table);
        let (n_rows, width) = (tt.rows(), tt.cols());
        let mut data = Vec::with_capacity(idx.len() * width);
        for &i in &idx {
            if i >= n_rows {
                return Err(Error::shape("embedding index", &[n_rows], &[i]));
            }
            data.extend_from_slice(tt.row(i));
        }
        let t = Tensor::matrix(idx.len(), width, data)?;
        Ok(self.push(t, Op::Embedding { table, idx }))
    }

    /// 3D convolution. `x` is `[batch, voxels * in_channels]` (channels last),
    /// `w` is `[kernel³ * in_channels, out_channels]`; the output is
    /// `[batch, out_voxels * out_channels]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeometry) -> Result<Var> {
        self.guard_recording()?;
        let (batch, in_len) = self.dims(x);
        if in_len != geom.in_voxels() * geom.in_channels {
            return Err(Error::shape(
                "conv3d input",
                &[batch, geom.in_voxels() * geom.in_channels],
                &[batch, in_len],
            ));
        }
        let patch = geom.patch_len();
        if self.value(w).shape() != [patch, geom.out_channels] {
            return Err(Error::shape(
                "conv3d weight",
                &[patch, geom.out_channels],
                self.value(w).shape(),
            ));
        }
        let map = geom.gather_map();
        let (ov, taps, cin) = (geom.out_voxels(), geom.kernel.pow(3), geom.in_channels);
        let xd = self.value(x).data();
        let mut cols = vec![0.0; batch * ov * patch];
        for bi in 0..batch {
            let src = &xd[bi * in_len..(bi + 1) * in_len];
            for o in 0..ov {
                let row = &mut cols[(bi * ov + o) * patch..(bi * ov + o + 1) * patch];
                for t in 0..taps {
                    if let Some(vox) = map[o * taps + t] {
                        row[t * cin..(t + 1) * cin].copy_from_slice(&src[vox * cin..(vox + 1) * cin]);
                    }
                }
            }
        }
        let cout = geom.out_channels;
        let mut out = vec![0.0; batch * ov * cout];
        gemm(
            batch * ov,
            patch,
            cout,
            &cols,
            false,
            self.value(w).data(),
            false,
            &mut out,
            0.0,
        );
        let bias = self.value(b).data();
        for row in out.chunks_mut(cout) {
            for (o, bb) in row.iter_mut().zip(bias) {
                *o += bb;
            }
        }
        let t = Tensor::matrix(batch, ov * cout, out)?;
        Ok(self.push(
            t,
            Op::Conv3d {
                x,
                w,
                b,
                geom,
                cols,
                map,
            },
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.guard_recording()?;
        let rows = self.dims(parts[0]).0;
        let widths: Vec<usize> = parts.iter().map(|&p| self.dims(p).1).collect();
        for &p in parts {
            if self.dims(p).0 != rows {
                return Err(Error::shape("concat_cols rows", &[rows], &[self.dims(p).0]));
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let t = Tensor::matrix(rows, total, data)?;
        Ok(self.push(t, Op::ConcatCols { parts: parts.to_vec() }))
    }

    /// Each row of `a` repeated `times` times consecutively.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Result<Var> {
        self.guard_recording()?;
        let (rows, cols) = self.dims(a);
        let mut data = Vec::with_capacity(rows * times * cols);
        for r in 0..rows {
            let row = &self.value(a).data()[r * cols..(r + 1) * cols];
            for _ in 0..times {
                data.extend_from_slice(row);
            }
        }
        let t = Tensor::matrix(rows * times, cols, data)?;
        Ok(self.push(t, Op::RepeatRows { a, times }))
    }

    /// Scaled dot-product attention within consecutive groups of `group`
    /// rows, split into `heads` column blocks.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, group: usize, heads: usize) -> Result<Var> {
        self.guard_recording()?;
        let (rows, dim) = self.dims(q);
        if self.dims(k) != (rows, dim) || self.dims(v) != (rows, dim) {
            return Err(Error::shape("attention k/v", &[rows, dim], self.value(k).shape()));
        }
        if group == 0 || rows % group != 0 || heads == 0 || dim % heads != 0 {
            return Err(Error::shape("attention grouping", &[group, heads], &[rows, dim]));
        }
        let dh = dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let batches = rows / group;
        let mut probs = vec![0.0; batches * heads * group * group];
        let mut out = vec![0.0; rows * dim];
        let mut scores = vec![0.0; group];
        for b in 0..batches {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..group {
                    let qi = &qd[(b * group + i) * dim + off..][..dh];
                    let mut max = f64::NEG_INFINITY;
                    for (l, s) in scores.iter_mut().enumerate() {
                        let kl = &kd[(b * group + l) * dim + off..][..dh];
                        *s = qi.iter().zip(kl).map(|(x, y)| x * y).sum::<f64>() * scale;
                        max = max.max(*s);
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let p = &mut probs[((b * heads + h) * group + i) * group..][..group];
                    for (pl, s) in p.iter_mut().zip(&scores) {
                        *pl = s / z;
                    }
                    let orow = &mut out[(b * group + i) * dim + off..][..dh];
                    for (l, &pl) in p.iter().enumerate() {
                        let vl = &vd[(b * group + l) * dim + off..][..dh];
                        for (o, x) in orow.iter_mut().zip(vl) {
                            *o += pl * x;
                        }
                    }
                }
            }
        }
        let t = Tensor::matrix(rows, dim, out)?;
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                group,
                heads,
                probs,
            },
        ))
    }

    /// Per-row normalization with learned gain and offset.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.guard_recording()?;
        let (rows, cols) = self.dims(x);
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return Err(Error::shape("layer_norm affine", &[cols], self.value(gamma).shape()));
        }
        let (xd, g, bt) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &xd[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for c in 0..cols {
                let xh = (row[c] - mean) * inv;
                xhat[r * cols + c] = xh;
                out[r * cols + c] = g[c] * xh + bt[c];
            }
        }
        let t = Tensor::matrix(rows, cols, out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Average of each consecutive block of `group` rows.
    pub fn mean_groups(&mut self, a: Var, group: usize) -> Result<Var> {
        self.guard_recording()?;
        let (rows, cols) = self.dims(a);
        if group == 0 || rows % group != 0 {
            return Err(Error::shape("mean_groups", &[group], &[rows]));
        }
        let n = rows / group;
        let mut out = vec![0.0; n * cols];
        let ad = self.value(a).data();
        for g in 0..n {
            let dst = &mut out[g * cols..(g + 1) * cols];
            for r in 0..group {
                for (d, x) in dst.iter_mut().zip(&ad[(g * group + r) * cols..][..cols]) {
                    *d += x;
                }
            }
            dst.iter_mut().for_each(|d| *d /= group as f64);
        }
        let t = Tensor::matrix(n, cols, out)?;
        Ok(self.push(t, Op::MeanGroups { a, group }))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        self.guard_recording()?;
        let t = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape { a }))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.guard_recording()?;
        let s = self.value(a).sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum { a }))
    }

    pub fn sum_squares(&mut self, a: Var) -> Result<Var> {
        self.guard_recording()?;
        let s = self.value(a).sum_squares();
        Ok(self.push(Tensor::scalar(s), Op::SumSquares { a }))
    }

    /// Sign of every rectifier output recorded so far. Two evaluations
    /// with equal patterns lie on the same linear piece.
    pub fn activation_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for n in &self.nodes {
            if let (Op::Relu { .. } | Op::LeakyRelu { .. }, Some(v)) = (&n.op, &n.value) {
                out.extend(v.data().iter().map(|&x| x > 0.0));
            }
        }
        out
    }

    /// Backpropagates a finite scalar loss.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let t = self.value(loss);
        if t.len() != 1 {
            return Err(Error::shape("backward loss", &[1], t.shape()));
        }
        t.ensure_finite("backward loss")?;
        self.backward_seeded(&[(loss, Tensor::scalar(1.0))])
    }

    /// Backpropagates explicit output gradients for one or more outputs.
    pub fn backward_seeded(&mut self, seeds: &[(Var, Tensor)]) -> Result<Gradients> {
        if self.grads.is_some() {
            return Err(Error::Usage("backward already ran on this tape".into()));
        }
        if self.nodes.is_empty() || seeds.is_empty() {
            return Err(Error::Usage("backward called without a recorded forward pass".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            if v.0 >= self.nodes.len() {
                return Err(Error::Usage("seed variable is not on this tape".into()));
            }
            let len = self.value(*v).len();
            if g.len() != len {
                return Err(Error::shape("backward seed", self.value(*v).shape(), g.shape()));
            }
            g.ensure_finite("backward seed")?;
            let s = slot(&mut grads, *v, len);
            for (a, b) in s.iter_mut().zip(g.data()) {
                *a += b;
            }
            last = last.max(v.0);
        }
        for i in (0..=last).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let out = match self.store {
            Some(store) => {
                let mut out = Gradients::zeros_like(store);
                for (&idx, &v) in &self.param_vars {
                    if let Some(g) = &grads[v.0] {
                        out.get_mut(idx).data_mut().copy_from_slice(g);
                    }
                }
                out
            }
            None => Gradients::zeros_like(&ParameterStore::new()),
        };
        self.grads = Some(grads);
        Ok(out)
    }

    /// Gradient accumulated at `v` by the last backward pass.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.as_ref()?.get(v.0)?.as_deref()
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (rows, in_dim) = self.dims(*x);
                let out_dim = self.value(*w).shape()[1];
                let wd = self.value(*w).data();
                gemm(
                    rows,
                    out_dim,
                    in_dim,
                    g,
                    false,
                    wd,
                    true,
                    slot(grads, *x, rows * in_dim),
                    1.0,
                );
                let xd = self.value(*x).data();
                gemm(
                    in_dim,
                    rows,
                    out_dim,
                    xd,
                    true,
                    g,
                    false,
                    slot(grads, *w, in_dim * out_dim),
                    1.0,
                );
                let db = slot(grads, *b, out_dim);
                for row in g.chunks(out_dim) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
            }
            Op::MatMulNt { a, b } => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).0;
                let bd = self.value(*b).data();
                gemm(m, n, k, g, false, bd, false, slot(grads, *a, m * k), 1.0);
                let ad = self.value(*a).data();
                gemm(n, m, k, g, true, ad, false, slot(grads, *b, n * k), 1.0);
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    for (d, x) in slot(grads, *v, g.len()).iter_mut().zip(g) {
                        *d += x;
                    }
                }
            }
            Op::MulConst { a, c } => {
                for ((d, x), cc) in slot(grads, *a, g.len()).iter_mut().zip(g).zip(c) {
                    *d += x * cc;
                }
            }
            Op::BroadcastRows { a } => {
                let cols = self.value(*a).len();
                let da = slot(grads, *a, cols);
                for row in g.chunks(cols) {
                    for (d, x) in da.iter_mut().zip(row) {
                        *d += x;
                    }
                }
            }
            Op::Relu { a } => {
                let y = self.nodes[i].value.as_ref().unwrap().data();
                for ((d, x), yy) in slot(grads, *a, g.len()).iter_mut().zip(g).zip(y) {
                    if *yy > 0.0 {
                        *d += x;
                    }
                }
            }
            Op::LeakyRelu { a, slope } => {
                let y = self.nodes[i].value.as_ref().unwrap().data();
                for ((d, x), yy) in slot(grads, *a, g.len()).iter_mut().zip(g).zip(y) {
                    *d += if *yy > 0.0 { *x } else { slope * x };
                }
            }
            Op::Tanh { a } => {
                let y = self.nodes[i].value.as_ref().unwrap().data();
                for ((d, x), yy) in slot(grads, *a, g.len()).iter_mut().zip(g).zip(y) {
                    *d += x * (1.0 - yy * yy);
                }
            }
            Op::Scale { a, s } => {
                for (d, x) in slot(grads, *a, g.len()).iter_mut().zip(g) {
                    *d += s * x;
                }
            }
            Op::Embedding { table, idx } => {
                let tt = self.value(*table);
                let width = tt.cols();
                let dt = slot(grads, *table, tt.len());
                for (r, &row) in idx.iter().enumerate() {
                    for (d, x) in dt[row * width..(row + 1) * width].iter_mut().zip(&g[r * width..]) {
                        *d += x;
                    }
                }
            }
            Op::Conv3d {
                x,
                w,
                b,
                geom,
                cols,
                map,
            } => {
                let (batch, in_len) = self.dims(*x);
                let (ov, patch, cout) = (geom.out_voxels(), geom.patch_len(), geom.out_channels);
                let (taps, cin) = (geom.kernel.pow(3), geom.in_channels);
                gemm(
                    patch,
                    batch * ov,
                    cout,
                    cols,
                    true,
                    g,
                    false,
                    slot(grads, *w, patch * cout),
                    1.0,
                );
                let db = slot(grads, *b, cout);
                for row in g.chunks(cout) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                let mut dcols = vec![0.0; batch * ov * patch];
                gemm(
                    batch * ov,
                    cout,
                    patch,
                    g,
                    false,
                    self.value(*w).data(),
                    true,
                    &mut dcols,
                    0.0,
                );
                let dx = slot(grads, *x, batch * in_len);
                for bi in 0..batch {
                    for o in 0..ov {
                        let row = &dcols[(bi * ov + o) * patch..][..patch];
                        for t in 0..taps {
                            if let Some(vox) = map[o * taps + t] {
                                let dst = &mut dx[bi * in_len + vox * cin..][..cin];
                                for (d, v) in dst.iter_mut().zip(&row[t * cin..(t + 1) * cin]) {
                                    *d += v;
                                }
                            }
                        }
                    }
                }
            }
            Op::ConcatCols { parts } => {
                let widths: Vec<usize> = parts.iter().map(|&p| self.dims(p).1).collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total.max(1);
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    let dp = slot(grads, p, rows * w);
                    for r in 0..rows {
                        for (d, x) in dp[r * w..(r + 1) * w].iter_mut().zip(&g[r * total + off..]) {
                            *d += x;
                        }
                    }
                    off += w;
                }
            }
            Op::RepeatRows { a, times } => {
                let (rows, cols) = self.dims(*a);
                let da = slot(grads, *a, rows * cols);
                for r in 0..rows {
                    for t in 0..*times {
                        let src = &g[(r * times + t) * cols..][..cols];
                        for (d, x) in da[r * cols..(r + 1) * cols].iter_mut().zip(src) {
                            *d += x;
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                group,
                heads,
                probs,
            } => {
                let (rows, dim) = self.dims(*q);
                let (group, heads) = (*group, *heads);
                let dh = dim / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qd, kd, vd) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut dq = vec![0.0; rows * dim];
                let mut dk = vec![0.0; rows * dim];
                let mut dv = vec![0.0; rows * dim];
                let mut dp = vec![0.0; group];
                for b in 0..rows / group {
                    for h in 0..heads {
                        let off = h * dh;
                        for i in 0..group {
                            let gi = &g[(b * group + i) * dim + off..][..dh];
                            let p = &probs[((b * heads + h) * group + i) * group..][..group];
                            let mut dot = 0.0;
                            for l in 0..group {
                                let vl = &vd[(b * group + l) * dim + off..][..dh];
                                dp[l] = gi.iter().zip(vl).map(|(x, y)| x * y).sum();
                                dot += p[l] * dp[l];
                                let dvl = &mut dv[(b * group + l) * dim + off..][..dh];
                                for (d, x) in dvl.iter_mut().zip(gi) {
                                    *d += p[l] * x;
                                }
                            }
                            let qi = &qd[(b * group + i) * dim + off..][..dh];
                            for l in 0..group {
                                let ds = p[l] * (dp[l] - dot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let kl = &kd[(b * group + l) * dim + off..][..dh];
                                let dqi = &mut dq[(b * group + i) * dim + off..][..dh];
                                for (d, x) in dqi.iter_mut().zip(kl) {
                                    *d += ds * x;
                                }
                                let dkl = &mut dk[(b * group + l) * dim + off..][..dh];
                                for (d, x) in dkl.iter_mut().zip(qi) {
                                    *d += ds * x;
                                }
                            }
                        }
                    }
                }
                for (var, buf) in [(*q, dq), (*k, dk), (*v, dv)] {
                    for (d, x) in slot(grads, var, rows * dim).iter_mut().zip(&buf) {
                        *d += x;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (rows, cols) = self.dims(*x);
                let gm = self.value(*gamma).data();
                let mut dgamma = vec![0.0; cols];
                let mut dbeta = vec![0.0; cols];
                let mut dx = vec![0.0; rows * cols];
                let n = cols as f64;
                for r in 0..rows {
                    let gr = &g[r * cols..(r + 1) * cols];
                    let xr = &xhat[r * cols..(r + 1) * cols];
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for c in 0..cols {
                        dgamma[c] += gr[c] * xr[c];
                        dbeta[c] += gr[c];
                        let d = gr[c] * gm[c];
                        sum_d += d;
                        sum_dx += d * xr[c];
                    }
                    for c in 0..cols {
                        let d = gr[c] * gm[c];
                        dx[r * cols + c] = inv_std[r] / n * (n * d - sum_d - xr[c] * sum_dx);
                    }
                }
                for (var, buf) in [(*x, dx), (*gamma, dgamma), (*beta, dbeta)] {
                    let len = buf.len();
                    for (d, v) in slot(grads, var, len).iter_mut().zip(&buf) {
                        *d += v;
                    }
                }
            }
            Op::MeanGroups { a, group } => {
                let (rows, cols) = self.dims(*a);
                let da = slot(grads, *a, rows * cols);
                for r in 0..rows {
                    let src = &g[(r / group) * cols..][..cols];
                    for (d, x) in da[r * cols..(r + 1) * cols].iter_mut().zip(src) {
                        *d += x / *group as f64;
                    }
                }
            }
            Op::Reshape { a } => {
                for (d, x) in slot(grads, *a, g.len()).iter_mut().zip(g) {
                    *d += x;
                }
            }
            Op::Sum { a } => {
                let len = self.value(*a).len();
                for d in slot(grads, *a, len).iter_mut() {
                    *d += g[0];
                }
            }
            Op::SumSquares { a } => {
                let av = self.value(*a).data();
                for (d, x) in slot(grads, *a, av.len()).iter_mut().zip(av) {
                    *d += 2.0 * x * g[0];
                }
            }
        }
    }
}
