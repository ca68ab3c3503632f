//! Reverse-mode automatic differentiation over dense f64 tensors.
//!
//! A [`Tape`] records every operation as it is evaluated; [`Tape::backward`]
//! walks the records in reverse and accumulates vector-Jacobian products.
//! Nodes that do not depend on any gradient-requiring leaf are skipped.

use std::sync::Arc;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::projection::Reprojection;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Sigmoid(Var),
    Abs(Var),
    Square(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    RowNorm(Var),
    Sum(Var),
    Mean(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    GlobalAvgPool(Var),
    MaxRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Slice(Var, usize),
    GatherPixels(Var, Arc<Vec<usize>>),
    GatherRows(Var, Arc<Vec<usize>>),
    RepeatRows(Var),
    Rot6d(Var),
    Rodrigues(Var),
    AffineApply(Var, Var),
    Reproject(Var, Arc<Reprojection>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::AddRow(..) => "add_row",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Abs(..) => "abs",
            Op::Square(..) => "square",
            Op::Log(..) => "log",
            Op::Clamp(..) => "clamp",
            Op::RowNorm(..) => "row_norm",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Conv2d { .. } => "conv2d",
            Op::GlobalAvgPool(..) => "global_avg_pool",
            Op::MaxRows(..) => "max_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::Reshape(..) => "reshape",
            Op::Slice(..) => "slice",
            Op::GatherPixels(..) => "gather_pixels",
            Op::GatherRows(..) => "gather_rows",
            Op::RepeatRows(..) => "repeat_rows",
            Op::Rot6d(..) => "rot6d",
            Op::Rodrigues(..) => "rodrigues",
            Op::AffineApply(..) => "affine_apply",
            Op::Reproject(..) => "reproject",
        }
    }
}

/// Names of every differentiable operation the tape records.
pub const OP_NAMES: [&str; 31] = [
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "add_row",
    "matmul",
    "transpose",
    "relu",
    "sigmoid",
    "abs",
    "square",
    "log",
    "clamp",
    "row_norm",
    "sum",
    "mean",
    "conv2d",
    "global_avg_pool",
    "max_rows",
    "concat_cols",
    "concat_rows",
    "reshape",
    "slice",
    "gather_pixels",
    "gather_rows",
    "repeat_rows",
    "rot6d",
    "rodrigues",
    "affine_apply",
    "reproject",
];

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    fault: Option<String>,
}

fn mismatch(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

fn mat_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape.as_slice() {
        [r, c] => Ok((*r, *c)),
        s => Err(mismatch(op, format!("expected a matrix, got shape {s:?}"))),
    }
}

/// Pivot quantities of the Gram-Schmidt map, shared by forward and backward.
struct GramSchmidt {
    c1: [f64; 3],
    c2: [f64; 3],
    c3: [f64; 3],
    nx: f64,
    nu: f64,
    y: [f64; 3],
}

const NORM_FLOOR: f64 = 1e-9;

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn gram_schmidt(a: &[f64]) -> GramSchmidt {
    let x = [a[0], a[1], a[2]];
    let y = [a[3], a[4], a[5]];
    let nx = dot(&x, &x).sqrt().max(NORM_FLOOR);
    let c1 = x.map(|v| v / nx);
    let d = dot(&c1, &y);
    let u = [y[0] - d * c1[0], y[1] - d * c1[1], y[2] - d * c1[2]];
    let nu = dot(&u, &u).sqrt().max(NORM_FLOOR);
    let c2 = u.map(|v| v / nu);
    let c3 = cross(&c1, &c2);
    GramSchmidt { c1, c2, c3, nx, nu, y }
}

fn skew(w: &[f64; 3]) -> [[f64; 3]; 3] {
    [[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]]
}

fn mat3_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// Coefficients of `R = I + a K + b K^2` and of their derivatives divided by
/// the angle.
fn rodrigues_coeffs(theta: f64) -> (f64, f64, f64, f64) {
    let t2 = theta * theta;
    let (a, b) = if theta < 1e-6 {
        (1.0 - t2 / 6.0, 0.5 - t2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / t2)
    };
    let (da, db) = if theta < 0.05 {
        let t4 = t2 * t2;
        (-1.0 / 3.0 + t2 / 30.0 - t4 / 840.0, -1.0 / 12.0 + t2 / 180.0 - t4 / 6720.0)
    } else {
        let (s, c) = theta.sin_cos();
        (
            (theta * c - s) / (t2 * theta),
            (theta * s - 2.0 * (1.0 - c)) / (t2 * t2),
        )
    };
    (a, b, da, db)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    /// Scales the backward contribution of every `op_name` node by 1.5, to
    /// check that the gradient suite notices broken VJPs.
    pub fn with_fault(op_name: &str) -> Self {
        Tape {
            fault: Some(op_name.to_string()),
            ..Tape::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient from the last [`backward`](Self::backward) call.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf whose gradient is tracked.
    pub fn var(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn binary(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let va = &self.value(a).data;
        let vb = &self.value(b).data;
        let data = va.iter().zip(vb).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, op, rg))
    }

    fn unary(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value(a);
        let t = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|x| f(*x)).collect(),
        };
        let rg = self.rg(&[a]);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(Op::Scale(a, s), a, |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(Op::AddScalar(a), a, |x| x + s)
    }

    /// `a[i, j] + b[j]` for a matrix `a` and a row vector `b` of width
    /// `cols(a)` (shape `[m]` or `[1, m]`).
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, m) = mat_dims("add_row", self.value(a))?;
        if self.value(b).numel() != m {
            return Err(mismatch("add_row", format!("row of {} for width {m}", self.value(b).numel())));
        }
        let vb = &self.value(b).data;
        let mut data = self.value(a).data.clone();
        for i in 0..n {
            for j in 0..m {
                data[i * m + j] += vb[j];
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor {
                shape: vec![n, m],
                data,
            },
            Op::AddRow(a, b),
            rg,
        ))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = mat_dims("matmul", self.value(a))?;
        let (k2, m) = mat_dims("matmul", self.value(b))?;
        if k != k2 {
            return Err(mismatch("matmul", format!("[{n}, {k}] x [{k2}, {m}]")));
        }
        let va = &self.value(a).data;
        let vb = &self.value(b).data;
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            let out = &mut data[i * m..(i + 1) * m];
            for (p, &x) in va[i * k..(i + 1) * k].iter().enumerate() {
                if x != 0.0 {
                    for (o, y) in out.iter_mut().zip(&vb[p * m..(p + 1) * m]) {
                        *o += x * y;
                    }
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor {
                shape: vec![n, m],
                data,
            },
            Op::MatMul(a, b),
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (n, m) = mat_dims("transpose", self.value(a))?;
        let va = &self.value(a).data;
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                data[j * n + i] = va[i * m + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor {
                shape: vec![m, n],
                data,
            },
            Op::Transpose(a),
            rg,
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Op::Relu(a), a, |x| x.max(0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Op::Sigmoid(a), a, sigmoid)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(Op::Abs(a), a, f64::abs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Op::Square(a), a, |x| x * x)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Op::Log(a), a, f64::ln)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(Op::Clamp(a, lo, hi), a, |x| x.clamp(lo, hi))
    }

    /// Euclidean norm of each row of a matrix, shape `[n]`.
    pub fn row_norm(&mut self, a: Var) -> Result<Var> {
        let (n, m) = mat_dims("row_norm", self.value(a))?;
        let va = &self.value(a).data;
        let data = (0..n)
            .map(|i| va[i * m..(i + 1) * m].iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor { shape: vec![n], data }, Op::RowNorm(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data.iter().sum::<f64>() / v.numel().max(1) as f64;
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// 2D convolution of `x [C, H, W]` with `w [O, C, k, k]` and bias `b [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (c, h, wd) = match self.shape(x) {
            [c, h, w] => (*c, *h, *w),
            s => return Err(mismatch("conv2d", format!("input shape {s:?}"))),
        };
        let (o, k) = match self.shape(w) {
            [o, ci, k, k2] if *ci == c && k == k2 => (*o, *k),
            s => return Err(mismatch("conv2d", format!("kernel shape {s:?} for {c} channels"))),
        };
        if self.value(b).numel() != o {
            return Err(mismatch("conv2d", format!("bias of {} for {o} filters", self.value(b).numel())));
        }
        if stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            return Err(mismatch("conv2d", format!("stride {stride}, pad {pad} on {h}x{wd}")));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        let geo = ConvGeom {
            c,
            h,
            w: wd,
            k,
            stride,
            pad,
            oh,
            ow,
        };
        let cols = im2col(&self.value(x).data, &geo);
        let (vw, vb) = (&self.value(w).data, &self.value(b).data);
        let (ck, n) = (c * k * k, oh * ow);
        let mut data = vec![0.0; o * n];
        for oc in 0..o {
            let out = &mut data[oc * n..(oc + 1) * n];
            out.iter_mut().for_each(|v| *v = vb[oc]);
            for j in 0..ck {
                let wv = vw[oc * ck + j];
                for (v, x) in out.iter_mut().zip(&cols[j * n..(j + 1) * n]) {
                    *v += wv * x;
                }
            }
        }
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(
            Tensor {
                shape: vec![o, oh, ow],
                data,
            },
            Op::Conv2d { x, w, b, stride, pad },
            rg,
        ))
    }

    /// Channel means of `[C, H, W]`, shape `[1, C]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let (c, hw) = match self.shape(a) {
            [c, h, w] => (*c, h * w),
            s => return Err(mismatch("global_avg_pool", format!("shape {s:?}"))),
        };
        let va = &self.value(a).data;
        let data = (0..c)
            .map(|i| va[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor {
                shape: vec![1, c],
                data,
            },
            Op::GlobalAvgPool(a),
            rg,
        ))
    }

    /// Column-wise maximum over rows, shape `[1, m]`. Ties go to the lowest
    /// row index.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let (n, m) = mat_dims("max_rows", self.value(a))?;
        if n == 0 {
            return Err(mismatch("max_rows", "no rows".into()));
        }
        let va = &self.value(a).data;
        let mut arg = vec![0usize; m];
        let mut data = va[..m].to_vec();
        for i in 1..n {
            for j in 0..m {
                if va[i * m + j] > data[j] {
                    data[j] = va[i * m + j];
                    arg[j] = i;
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor { shape: vec![1, m], data }, Op::MaxRows(a, arg), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(mismatch("concat_cols", "nothing to concatenate".into()));
        }
        let n = mat_dims("concat_cols", self.value(parts[0]))?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = mat_dims("concat_cols", self.value(*p))?;
            if r != n {
                return Err(mismatch("concat_cols", format!("{r} rows vs {n}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; n * total];
        let mut off = 0;
        for (p, &w) in parts.iter().zip(&widths) {
            let vp = &self.value(*p).data;
            for i in 0..n {
                data[i * total + off..i * total + off + w].copy_from_slice(&vp[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor {
                shape: vec![n, total],
                data,
            },
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(mismatch("concat_rows", "nothing to concatenate".into()));
        }
        let m = mat_dims("concat_rows", self.value(parts[0]))?.1;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            let (r, c) = mat_dims("concat_rows", self.value(*p))?;
            if c != m {
                return Err(mismatch("concat_rows", format!("{c} cols vs {m}")));
            }
            data.extend_from_slice(&self.value(*p).data);
            n += r;
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor { shape: vec![n, m], data }, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = Tensor::new(shape, self.value(a).data.clone())
            .map_err(|_| mismatch("reshape", format!("{:?} -> {shape:?}", self.shape(a))))?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Contiguous run of the flattened values starting at `start`, viewed with
    /// `shape`.
    pub fn slice(&mut self, a: Var, start: usize, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        let va = &self.value(a).data;
        if start + n > va.len() {
            return Err(mismatch("slice", format!("{start}+{n} past {}", va.len())));
        }
        let t = Tensor {
            shape: shape.to_vec(),
            data: va[start..start + n].to_vec(),
        };
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Slice(a, start), rg))
    }

    /// `out[v, c] = a[c, pix[v]]` for a feature map `a [C, H, W]` and flat
    /// pixel indices `pix`.
    pub fn gather_pixels(&mut self, a: Var, pix: Arc<Vec<usize>>) -> Result<Var> {
        let (c, hw) = match self.shape(a) {
            [c, h, w] => (*c, h * w),
            s => return Err(mismatch("gather_pixels", format!("shape {s:?}"))),
        };
        if let Some(&p) = pix.iter().find(|p| **p >= hw) {
            return Err(Error::IndexOutOfRange {
                what: "gather_pixels",
                index: p,
                limit: hw,
            });
        }
        let va = &self.value(a).data;
        let n = pix.len();
        let mut data = vec![0.0; n * c];
        for (v, &p) in pix.iter().enumerate() {
            for ch in 0..c {
                data[v * c + ch] = va[ch * hw + p];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor { shape: vec![n, c], data }, Op::GatherPixels(a, pix), rg))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let (n, m) = mat_dims("gather_rows", self.value(a))?;
        if let Some(&i) = idx.iter().find(|i| **i >= n) {
            return Err(Error::IndexOutOfRange {
                what: "gather_rows",
                index: i,
                limit: n,
            });
        }
        let va = &self.value(a).data;
        let mut data = Vec::with_capacity(idx.len() * m);
        for &i in idx.iter() {
            data.extend_from_slice(&va[i * m..(i + 1) * m]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor {
                shape: vec![idx.len(), m],
                data,
            },
            Op::GatherRows(a, idx),
            rg,
        ))
    }

    /// Tiles a single row `[1, m]` into `[n, m]`.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        let (r, m) = mat_dims("repeat_rows", self.value(a))?;
        if r != 1 {
            return Err(mismatch("repeat_rows", format!("expected one row, got {r}")));
        }
        let row = self.value(a).data.clone();
        let mut data = Vec::with_capacity(n * m);
        for _ in 0..n {
            data.extend_from_slice(&row);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor { shape: vec![n, m], data }, Op::RepeatRows(a), rg))
    }

    /// Six numbers `(x, y)` to a `[3, 3]` rotation by Gram-Schmidt. Norms are
    /// floored at 1e-9 so degenerate inputs stay finite.
    pub fn rot6d(&mut self, a: Var) -> Result<Var> {
        if self.value(a).numel() != 6 {
            return Err(mismatch("rot6d", format!("{} values", self.value(a).numel())));
        }
        let gs = gram_schmidt(&self.value(a).data);
        let mut data = vec![0.0; 9];
        for r in 0..3 {
            data[r * 3] = gs.c1[r];
            data[r * 3 + 1] = gs.c2[r];
            data[r * 3 + 2] = gs.c3[r];
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor { shape: vec![3, 3], data }, Op::Rot6d(a), rg))
    }

    /// Axis-angle `[3]` to a `[3, 3]` rotation.
    pub fn rodrigues(&mut self, a: Var) -> Result<Var> {
        if self.value(a).numel() != 3 {
            return Err(mismatch("rodrigues", format!("{} values", self.value(a).numel())));
        }
        let w = {
            let d = &self.value(a).data;
            [d[0], d[1], d[2]]
        };
        let theta = dot(&w, &w).sqrt();
        let (ca, cb, _, _) = rodrigues_coeffs(theta);
        let k = skew(&w);
        let k2 = mat3_mul(&k, &k);
        let mut data = vec![0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                data[i * 3 + j] = f64::from(u8::from(i == j)) + ca * k[i][j] + cb * k2[i][j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor { shape: vec![3, 3], data }, Op::Rodrigues(a), rg))
    }

    /// Applies per-row 3x4 affine maps `t [n, 12]` to points `p [n, 3]`.
    pub fn affine_apply(&mut self, t: Var, p: Var) -> Result<Var> {
        let (n, w) = mat_dims("affine_apply", self.value(t))?;
        let (n2, d) = mat_dims("affine_apply", self.value(p))?;
        if w != 12 || d != 3 || n != n2 {
            return Err(mismatch("affine_apply", format!("[{n}, {w}] on [{n2}, {d}]")));
        }
        let vt = &self.value(t).data;
        let vp = &self.value(p).data;
        let mut data = vec![0.0; n * 3];
        for i in 0..n {
            let m = &vt[i * 12..(i + 1) * 12];
            let q = &vp[i * 3..(i + 1) * 3];
            for r in 0..3 {
                data[i * 3 + r] = m[r * 4] * q[0] + m[r * 4 + 1] * q[1] + m[r * 4 + 2] * q[2] + m[r * 4 + 3];
            }
        }
        let rg = self.rg(&[t, p]);
        Ok(self.push(Tensor { shape: vec![n, 3], data }, Op::AffineApply(t, p), rg))
    }

    /// Averages per-vertex values into taxels, shape `[rows, cols]`.
    pub fn reproject(&mut self, a: Var, op: Arc<Reprojection>) -> Result<Var> {
        let data = op.forward(&self.value(a).data)?;
        let g = *op.geometry();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor {
                shape: vec![g.rows, g.cols],
                data,
            },
            Op::Reproject(a, op),
            rg,
        ))
    }

    /// Reverse pass from a single-element output. Gradients of earlier calls
    /// are discarded.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.value(out).numel() != 1 {
            return Err(mismatch("backward", format!("output shape {:?}", self.shape(out))));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[out.0] = Some(Tensor {
            shape: self.shape(out).to_vec(),
            data: vec![1.0],
        });
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            if let Some(f) = &self.fault {
                if f == self.nodes[i].op.name() {
                    g.data.iter_mut().for_each(|x| *x *= 1.5);
                }
            }
            self.propagate(i, &g.data, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Tensor>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value.data;
        let node = &nodes[i];
        let out = &node.value.data;
        // Accumulates into the gradient slot of `v` when it needs one.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let nd = &nodes[v.0];
            if !nd.requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(&nd.value.shape));
            f(&mut slot.data);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] * vb[k];
                    }
                });
                acc(*b, &mut |gb| {
                    for k in 0..g.len() {
                        gb[k] += g[k] * va[k];
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y)),
            Op::AddScalar(a) | Op::Reshape(a) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y))
            }
            Op::AddRow(a, b) => {
                let m = node.value.cols();
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                acc(*b, &mut |gb| {
                    for (k, y) in g.iter().enumerate() {
                        gb[k % m] += y;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let sa = &nodes[a.0].value.shape;
                let (n, k, m) = (sa[0], sa[1], node.value.shape[1]);
                acc(*a, &mut |ga| {
                    for r in 0..n {
                        let grow = &g[r * m..(r + 1) * m];
                        for p in 0..k {
                            let brow = &vb[p * m..(p + 1) * m];
                            ga[r * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for r in 0..n {
                        let grow = &g[r * m..(r + 1) * m];
                        for p in 0..k {
                            let x = va[r * k + p];
                            if x != 0.0 {
                                for (o, y) in gb[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                    *o += x * y;
                                }
                            }
                        }
                    }
                });
            }
            Op::Transpose(a) => {
                let (n, m) = (node.value.shape[1], node.value.shape[0]);
                acc(*a, &mut |ga| {
                    for r in 0..n {
                        for c in 0..m {
                            ga[r * m + c] += g[c * n + r];
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let va = val(*a);
                acc(*a, &mut |ga| {
                    for k in 0..g.len() {
                        if va[k] > 0.0 {
                            ga[k] += g[k];
                        }
                    }
                });
            }
            Op::Sigmoid(a) => acc(*a, &mut |ga| {
                for k in 0..g.len() {
                    ga[k] += g[k] * out[k] * (1.0 - out[k]);
                }
            }),
            Op::Abs(a) => {
                let va = val(*a);
                acc(*a, &mut |ga| {
                    for k in 0..g.len() {
                        if va[k] > 0.0 {
                            ga[k] += g[k];
                        } else if va[k] < 0.0 {
                            ga[k] -= g[k];
                        }
                    }
                });
            }
            Op::Square(a) => {
                let va = val(*a);
                acc(*a, &mut |ga| {
                    for k in 0..g.len() {
                        ga[k] += 2.0 * va[k] * g[k];
                    }
                });
            }
            Op::Log(a) => {
                let va = val(*a);
                acc(*a, &mut |ga| {
                    for k in 0..g.len() {
                        ga[k] += g[k] / va[k];
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let va = val(*a);
                acc(*a, &mut |ga| {
                    for k in 0..g.len() {
                        if va[k] >= *lo && va[k] <= *hi {
                            ga[k] += g[k];
                        }
                    }
                });
            }
            Op::RowNorm(a) => {
                let va = val(*a);
                let m = nodes[a.0].value.cols();
                acc(*a, &mut |ga| {
                    for (r, (&gr, &nr)) in g.iter().zip(out).enumerate() {
                        if nr > 0.0 {
                            for c in 0..m {
                                ga[r * m + c] += gr * va[r * m + c] / nr;
                            }
                        }
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let n = nodes[a.0].value.numel().max(1) as f64;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (c, h, wd) = {
                    let s = &nodes[x.0].value.shape;
                    (s[0], s[1], s[2])
                };
                let k = nodes[w.0].value.shape[2];
                let (o, oh, ow) = (node.value.shape[0], node.value.shape[1], node.value.shape[2]);
                let geo = ConvGeom {
                    c,
                    h,
                    w: wd,
                    k,
                    stride: *stride,
                    pad: *pad,
                    oh,
                    ow,
                };
                let (ck, n) = (c * k * k, oh * ow);
                let vw = val(*w);
                if nodes[w.0].requires_grad {
                    let cols = im2col(val(*x), &geo);
                    acc(*w, &mut |gw| {
                        for oc in 0..o {
                            let go = &g[oc * n..(oc + 1) * n];
                            for j in 0..ck {
                                gw[oc * ck + j] += go.iter().zip(&cols[j * n..(j + 1) * n]).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                    });
                }
                if nodes[x.0].requires_grad {
                    let mut gcols = vec![0.0; ck * n];
                    for oc in 0..o {
                        let go = &g[oc * n..(oc + 1) * n];
                        for j in 0..ck {
                            let wv = vw[oc * ck + j];
                            for (d, gv) in gcols[j * n..(j + 1) * n].iter_mut().zip(go) {
                                *d += wv * gv;
                            }
                        }
                    }
                    acc(*x, &mut |gx| col2im_add(&gcols, &geo, gx));
                }
                acc(*b, &mut |gb| {
                    for oc in 0..o {
                        gb[oc] += g[oc * oh * ow..(oc + 1) * oh * ow].iter().sum::<f64>();
                    }
                });
            }
            Op::GlobalAvgPool(a) => {
                let s = &nodes[a.0].value.shape;
                let hw = s[1] * s[2];
                acc(*a, &mut |ga| {
                    for (k, x) in ga.iter_mut().enumerate() {
                        *x += g[k / hw] / hw as f64;
                    }
                });
            }
            Op::MaxRows(a, arg) => {
                let m = arg.len();
                acc(*a, &mut |ga| {
                    for j in 0..m {
                        ga[arg[j] * m + j] += g[j];
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (n, total) = (node.value.shape[0], node.value.shape[1]);
                let mut off = 0;
                for p in parts {
                    let w = nodes[p.0].value.shape[1];
                    acc(*p, &mut |gp| {
                        for r in 0..n {
                            for c in 0..w {
                                gp[r * w + c] += g[r * total + off + c];
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = nodes[p.0].value.numel();
                    acc(*p, &mut |gp| {
                        gp.iter_mut().zip(&g[off..off + len]).for_each(|(x, y)| *x += y)
                    });
                    off += len;
                }
            }
            Op::Slice(a, start) => acc(*a, &mut |ga| {
                ga[*start..*start + g.len()].iter_mut().zip(g).for_each(|(x, y)| *x += y)
            }),
            Op::GatherPixels(a, pix) => {
                let s = &nodes[a.0].value.shape;
                let (c, hw) = (s[0], s[1] * s[2]);
                acc(*a, &mut |ga| {
                    for (v, &p) in pix.iter().enumerate() {
                        for ch in 0..c {
                            ga[ch * hw + p] += g[v * c + ch];
                        }
                    }
                });
            }
            Op::GatherRows(a, idx) => {
                let m = nodes[a.0].value.cols();
                acc(*a, &mut |ga| {
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..m {
                            ga[i * m + c] += g[r * m + c];
                        }
                    }
                });
            }
            Op::RepeatRows(a) => {
                let m = node.value.shape[1];
                acc(*a, &mut |ga| {
                    for (k, y) in g.iter().enumerate() {
                        ga[k % m] += y;
                    }
                });
            }
            Op::Rot6d(a) => {
                let gs = gram_schmidt(val(*a));
                let col = |j: usize| [g[j], g[3 + j], g[6 + j]];
                let (mut g1, mut g2, g3) = (col(0), col(1), col(2));
                let t1 = cross(&gs.c2, &g3);
                let t2 = cross(&g3, &gs.c1);
                for r in 0..3 {
                    g1[r] += t1[r];
                    g2[r] += t2[r];
                }
                let p2 = dot(&gs.c2, &g2);
                let gu = [0, 1, 2].map(|r| (g2[r] - gs.c2[r] * p2) / gs.nu);
                let cgu = dot(&gs.c1, &gu);
                let d = dot(&gs.c1, &gs.y);
                let gy = [0, 1, 2].map(|r| gu[r] - gs.c1[r] * cgu);
                for r in 0..3 {
                    g1[r] -= d * gu[r] + gs.y[r] * cgu;
                }
                let p1 = dot(&gs.c1, &g1);
                let gx = [0, 1, 2].map(|r| (g1[r] - gs.c1[r] * p1) / gs.nx);
                acc(*a, &mut |ga| {
                    for r in 0..3 {
                        ga[r] += gx[r];
                        ga[3 + r] += gy[r];
                    }
                });
            }
            Op::Rodrigues(a) => {
                let va = val(*a);
                let w = [va[0], va[1], va[2]];
                let theta = dot(&w, &w).sqrt();
                let (ca, cb, da, db) = rodrigues_coeffs(theta);
                let k = skew(&w);
                let k2 = mat3_mul(&k, &k);
                let mut gw = [0.0; 3];
                for (i, gwi) in gw.iter_mut().enumerate() {
                    let mut e = [0.0; 3];
                    e[i] = 1.0;
                    let ei = skew(&e);
                    let ek = mat3_mul(&ei, &k);
                    let ke = mat3_mul(&k, &ei);
                    let mut s = 0.0;
                    for r in 0..3 {
                        for c in 0..3 {
                            let d = da * w[i] * k[r][c]
                                + ca * ei[r][c]
                                + db * w[i] * k2[r][c]
                                + cb * (ek[r][c] + ke[r][c]);
                            s += g[r * 3 + c] * d;
                        }
                    }
                    *gwi = s;
                }
                acc(*a, &mut |ga| {
                    for r in 0..3 {
                        ga[r] += gw[r];
                    }
                });
            }
            Op::AffineApply(t, p) => {
                let (vt, vp) = (val(*t), val(*p));
                let n = node.value.shape[0];
                acc(*t, &mut |gt| {
                    for i in 0..n {
                        for r in 0..3 {
                            let y = g[i * 3 + r];
                            for c in 0..3 {
                                gt[i * 12 + r * 4 + c] += y * vp[i * 3 + c];
                            }
                            gt[i * 12 + r * 4 + 3] += y;
                        }
                    }
                });
                acc(*p, &mut |gp| {
                    for i in 0..n {
                        for c in 0..3 {
                            gp[i * 3 + c] += (0..3).map(|r| g[i * 3 + r] * vt[i * 12 + r * 4 + c]).sum::<f64>();
                        }
                    }
                });
            }
            Op::Reproject(a, op) => {
                let back = op.vjp(g).expect("reprojection sizes are fixed at record time");
                acc(*a, &mut |ga| ga.iter_mut().zip(&back).for_each(|(x, y)| *x += y));
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sizes of one convolution.
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

/// Row `(ic, ky, kx)` of the result holds the input value under that kernel
/// tap for every output position; out-of-image taps are 0.
fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let n = g.oh * g.ow;
    let mut cols = vec![0.0; g.c * g.k * g.k * n];
    for ic in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &mut cols[((ic * g.k + ky) * g.k + kx) * n..][..n];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let xrow = &x[(ic * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            row[oy * g.ow + ox] = xrow[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`], accumulated into `gx`.
fn col2im_add(cols: &[f64], g: &ConvGeom, gx: &mut [f64]) {
    let n = g.oh * g.ow;
    for ic in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = &cols[((ic * g.k + ky) * g.k + kx) * n..][..n];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (ic * g.h + iy as usize) * g.w;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            gx[base + ix as usize] += row[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}
