//! Dense 2-D tensors with reverse-mode differentiation.
//!
//! The tape is rebuilt on every forward pass: ops append nodes holding the
//! forward values plus a backward closure, and `Tape::backward` replays the
//! nodes in reverse. Everything is `f64`; vectors are `n x 1` or `1 x n`.

mod gradcheck;
mod store;

pub use gradcheck::{finite_diff_check, FiniteDiffReport, ParamCheck};
pub use store::{Forward, Init, ParamStore, Parameter};

use std::cell::{Ref, RefCell};

use crate::error::TensorError;

pub type Result<T> = std::result::Result<T, TensorError>;

/// Row-major 2-D value buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            rows * cols,
            data.len(),
            "tensor shape {rows}x{cols} does not match {} values",
            data.len()
        );
        Tensor { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn scalar(x: f64) -> Self {
        Tensor::new(1, 1, vec![x])
    }

    /// Build from nested rows; every row must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor::new(r, c, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, x: f64) {
        self.data[r * self.cols + c] = x;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

struct Node {
    op: &'static str,
    shape: [usize; 2],
    data: Vec<f64>,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    nonfinite: Option<(&'static str, usize)>,
}

/// Recording tape for one forward pass.
pub struct Tape {
    inner: RefCell<TapeInner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(TapeInner::default()),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// First op that produced a NaN or infinity, if any.
    pub fn first_nonfinite(&self) -> Option<(&'static str, usize)> {
        self.inner.borrow().nonfinite
    }

    /// Fails if any recorded op has produced non-finite values.
    pub fn check_finite(&self) -> Result<()> {
        match self.first_nonfinite() {
            Some((op, node)) => Err(TensorError::NonFinite { op, node }),
            None => Ok(()),
        }
    }

    fn push(
        &self,
        op: &'static str,
        shape: [usize; 2],
        data: Vec<f64>,
        parents: Vec<usize>,
        backward: Option<BackwardFn>,
        requires_grad: bool,
    ) -> Var<'_> {
        debug_assert_eq!(shape[0] * shape[1], data.len());
        let mut inner = self.inner.borrow_mut();
        let idx = inner.nodes.len();
        if inner.nonfinite.is_none() && !data.iter().all(|x| x.is_finite()) {
            inner.nonfinite = Some((op, idx));
        }
        inner.nodes.push(Node {
            op,
            shape,
            data,
            parents,
            backward,
            requires_grad,
            grad: None,
        });
        Var { tape: self, idx }
    }

    /// Record a leaf. Gradients are collected for it iff `requires_grad`.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        self.push(
            "leaf",
            value.shape(),
            value.data,
            vec![],
            None,
            requires_grad,
        )
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn scalar(&self, x: f64) -> Var<'_> {
        self.constant(Tensor::scalar(x))
    }

    /// Reverse sweep from a scalar loss. Each node is visited exactly once;
    /// gradients accumulate into every `requires_grad` node reachable from
    /// the loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        assert!(std::ptr::eq(loss.tape, self), "loss from another tape");
        self.check_finite()?;
        let mut inner = self.inner.borrow_mut();
        let shape = inner.nodes[loss.idx].shape;
        if shape != [1, 1] {
            return Err(TensorError::NonScalarLoss { shape });
        }
        for node in &mut inner.nodes {
            node.grad = None;
        }
        inner.nodes[loss.idx].grad = Some(vec![1.0]);
        for i in (0..=loss.idx).rev() {
            if inner.nodes[i].grad.is_none() || !inner.nodes[i].requires_grad {
                continue;
            }
            let Some(backward) = inner.nodes[i].backward.take() else {
                continue;
            };
            let grad_out = inner.nodes[i].grad.clone().expect("grad set");
            let contributions = backward(&grad_out);
            let parents = inner.nodes[i].parents.clone();
            debug_assert_eq!(contributions.len(), parents.len());
            for (parent, contrib) in parents.into_iter().zip(contributions) {
                let Some(contrib) = contrib else { continue };
                if !inner.nodes[parent].requires_grad {
                    continue;
                }
                match &mut inner.nodes[parent].grad {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contrib) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
            inner.nodes[i].backward = Some(backward);
        }
        Ok(())
    }

    /// Gradient of the last `backward` call w.r.t. `v`, if it was reached.
    pub fn grad(&self, v: Var<'_>) -> Option<Tensor> {
        let inner = self.inner.borrow();
        let node = &inner.nodes[v.idx];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.shape[0], node.shape[1], g.clone()))
    }
}

/// Handle to a tape node. Cheap to copy; all arithmetic goes through it.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> [usize; 2] {
        self.tape.inner.borrow().nodes[self.idx].shape
    }

    pub fn rows(&self) -> usize {
        self.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.shape()[1]
    }

    fn data_ref(&self) -> Ref<'t, [f64]> {
        Ref::map(self.tape.inner.borrow(), |inner| {
            inner.nodes[self.idx].data.as_slice()
        })
    }

    pub fn value(&self) -> Tensor {
        let [r, c] = self.shape();
        Tensor::new(r, c, self.data_ref().to_vec())
    }

    /// Scalar payload of a 1x1 node.
    pub fn item(&self) -> f64 {
        let d = self.data_ref();
        assert_eq!(d.len(), 1, "item() on non-scalar");
        d[0]
    }

    fn requires_grad(&self) -> bool {
        self.tape.inner.borrow().nodes[self.idx].requires_grad
    }

    fn unary(
        &self,
        op: &'static str,
        shape: [usize; 2],
        data: Vec<f64>,
        backward: BackwardFn,
    ) -> Var<'t> {
        let rg = self.requires_grad();
        self.tape.push(
            op,
            shape,
            data,
            vec![self.idx],
            if rg { Some(backward) } else { None },
            rg,
        )
    }

    fn binary(
        &self,
        other: Var<'t>,
        op: &'static str,
        shape: [usize; 2],
        data: Vec<f64>,
        backward: BackwardFn,
    ) -> Var<'t> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(
            op,
            shape,
            data,
            vec![self.idx, other.idx],
            if rg { Some(backward) } else { None },
            rg,
        )
    }

    fn assert_same_shape(&self, other: Var<'t>, op: &'static str) {
        assert_eq!(
            self.shape(),
            other.shape(),
            "{op}: shape mismatch {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
    }

    /// Matrix product `[m x k] . [k x n] -> [m x n]`.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        let [m, k] = self.shape();
        let [k2, n] = other.shape();
        if k != k2 {
            return Err(TensorError::DimMismatch {
                op: "matmul",
                lhs: [m, k],
                rhs: [k2, n],
            });
        }
        let a = self.data_ref().to_vec();
        let b = other.data_ref().to_vec();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += aip * b[p * n + j];
                }
            }
        }
        let (ga, gb) = (a, b);
        Ok(self.binary(
            other,
            "matmul",
            [m, n],
            out,
            Box::new(move |g| {
                // dA = g . B^T, dB = A^T . g
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    for p in 0..k {
                        let mut s = 0.0;
                        for j in 0..n {
                            s += g[i * n + j] * gb[p * n + j];
                        }
                        da[i * k + p] = s;
                    }
                }
                let mut db = vec![0.0; k * n];
                for p in 0..k {
                    for i in 0..m {
                        let a_ip = ga[i * k + p];
                        if a_ip == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[p * n + j] += a_ip * g[i * n + j];
                        }
                    }
                }
                vec![Some(da), Some(db)]
            }),
        ))
    }

    pub fn t(&self) -> Var<'t> {
        let [r, c] = self.shape();
        let d = self.data_ref().to_vec();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        self.unary(
            "transpose",
            [c, r],
            out,
            Box::new(move |g| {
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = g[j * r + i];
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let data = self.data_ref().iter().map(|x| x * c).collect();
        self.unary(
            "scale",
            self.shape(),
            data,
            Box::new(move |g| vec![Some(g.iter().map(|gi| gi * c).collect())]),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        let data = self.data_ref().iter().map(|x| x + c).collect();
        self.unary(
            "add_scalar",
            self.shape(),
            data,
            Box::new(move |g| vec![Some(g.to_vec())]),
        )
    }

    /// Broadcast multiply by a 1x1 node.
    pub fn scale_by(&self, s: Var<'t>) -> Var<'t> {
        assert_eq!(s.shape(), [1, 1], "scale_by expects a scalar node");
        let sv = s.item();
        let x = self.data_ref().to_vec();
        let data = x.iter().map(|xi| xi * sv).collect();
        self.binary(
            s,
            "scale_by",
            self.shape(),
            data,
            Box::new(move |g| {
                let gx: Vec<f64> = g.iter().map(|gi| gi * sv).collect();
                let gs: f64 = g.iter().zip(&x).map(|(gi, xi)| gi * xi).sum();
                vec![Some(gx), Some(vec![gs])]
            }),
        )
    }

    pub fn sum(&self) -> Var<'t> {
        let [r, c] = self.shape();
        let s: f64 = self.data_ref().iter().sum();
        self.unary(
            "sum",
            [1, 1],
            vec![s],
            Box::new(move |g| vec![Some(vec![g[0]; r * c])]),
        )
    }

    pub fn mean(&self) -> Var<'t> {
        let [r, c] = self.shape();
        let n = (r * c) as f64;
        let s: f64 = self.data_ref().iter().sum();
        self.unary(
            "mean",
            [1, 1],
            vec![s / n],
            Box::new(move |g| vec![Some(vec![g[0] / n; (n as usize).max(1)])]),
        )
    }

    /// Column-wise mean: `[r x c] -> [1 x c]`.
    pub fn mean_axis0(&self) -> Var<'t> {
        let [r, c] = self.shape();
        assert!(r > 0, "mean_axis0 on empty tensor");
        let d = self.data_ref().to_vec();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for j in 0..c {
                out[j] += d[i * c + j];
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        self.unary(
            "mean_axis0",
            [1, c],
            out,
            Box::new(move |g| {
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = g[j] / r as f64;
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    pub fn tanh(&self) -> Var<'t> {
        let y: Vec<f64> = self.data_ref().iter().map(|x| x.tanh()).collect();
        let yc = y.clone();
        self.unary(
            "tanh",
            self.shape(),
            y,
            Box::new(move |g| {
                vec![Some(
                    g.iter().zip(&yc).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect(),
                )]
            }),
        )
    }

    pub fn sigmoid(&self) -> Var<'t> {
        let y: Vec<f64> = self
            .data_ref()
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let yc = y.clone();
        self.unary(
            "sigmoid",
            self.shape(),
            y,
            Box::new(move |g| {
                vec![Some(
                    g.iter()
                        .zip(&yc)
                        .map(|(gi, yi)| gi * yi * (1.0 - yi))
                        .collect(),
                )]
            }),
        )
    }

    pub fn silu(&self) -> Var<'t> {
        let x = self.data_ref().to_vec();
        let y: Vec<f64> = x.iter().map(|v| v / (1.0 + (-v).exp())).collect();
        self.unary(
            "silu",
            self.shape(),
            y,
            Box::new(move |g| {
                vec![Some(
                    g.iter()
                        .zip(&x)
                        .map(|(gi, xi)| {
                            let s = 1.0 / (1.0 + (-xi).exp());
                            gi * s * (1.0 + xi * (1.0 - s))
                        })
                        .collect(),
                )]
            }),
        )
    }

    pub fn exp(&self) -> Var<'t> {
        let y: Vec<f64> = self.data_ref().iter().map(|x| x.exp()).collect();
        let yc = y.clone();
        self.unary(
            "exp",
            self.shape(),
            y,
            Box::new(move |g| vec![Some(g.iter().zip(&yc).map(|(gi, yi)| gi * yi).collect())]),
        )
    }

    /// Square root with zero gradient at the origin so `sqrt(sum of squares)`
    /// stays differentiable when the argument vanishes.
    pub fn sqrt_guard(&self) -> Var<'t> {
        let x = self.data_ref().to_vec();
        let y: Vec<f64> = x.iter().map(|v| if *v > 0.0 { v.sqrt() } else { 0.0 }).collect();
        let yc = y.clone();
        self.unary(
            "sqrt",
            self.shape(),
            y,
            Box::new(move |g| {
                vec![Some(
                    g.iter()
                        .zip(&yc)
                        .map(|(gi, yi)| if *yi > 1e-150 { gi / (2.0 * yi) } else { 0.0 })
                        .collect(),
                )]
            }),
        )
    }

    /// Clamp values into `[lo, hi]`; gradient passes through inside the band.
    pub fn clamp(&self, lo: f64, hi: f64) -> Var<'t> {
        let x = self.data_ref().to_vec();
        let y: Vec<f64> = x.iter().map(|v| v.clamp(lo, hi)).collect();
        self.unary(
            "clamp",
            self.shape(),
            y,
            Box::new(move |g| {
                vec![Some(
                    g.iter()
                        .zip(&x)
                        .map(|(gi, xi)| if *xi >= lo && *xi <= hi { *gi } else { 0.0 })
                        .collect(),
                )]
            }),
        )
    }

    /// arccos with the argument clamped slightly inside [-1, 1] so the
    /// gradient stays finite at the boundary.
    pub fn acos_clamped(&self) -> Var<'t> {
        const BOUND: f64 = 1.0 - 1e-7;
        let x = self.data_ref().to_vec();
        let y: Vec<f64> = x.iter().map(|v| v.clamp(-BOUND, BOUND).acos()).collect();
        self.unary(
            "acos",
            self.shape(),
            y,
            Box::new(move |g| {
                vec![Some(
                    g.iter()
                        .zip(&x)
                        .map(|(gi, xi)| {
                            if xi.abs() <= BOUND {
                                -gi / (1.0 - xi * xi).sqrt()
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                )]
            }),
        )
    }

    /// Row-wise softmax of `x / scale` with max-subtraction. Masked columns
    /// get zero weight; a fully masked row becomes all zeros.
    pub fn softmax_rows(&self, scale: f64, mask: Option<&[bool]>) -> Result<Var<'t>> {
        if scale <= 0.0 {
            return Err(TensorError::BadParameter {
                op: "softmax_rows",
                detail: format!("scale must be positive, got {scale}"),
            });
        }
        let [r, c] = self.shape();
        if let Some(m) = mask {
            if m.len() != c {
                return Err(TensorError::BadShape {
                    op: "softmax_rows",
                    shape: [r, c],
                    detail: format!("mask of length {}", m.len()),
                });
            }
        }
        let keep: Vec<bool> = match mask {
            Some(m) => m.to_vec(),
            None => vec![true; c],
        };
        let x = self.data_ref().to_vec();
        let mut y = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let mut mx = f64::NEG_INFINITY;
            for (j, v) in row.iter().enumerate() {
                if keep[j] {
                    mx = mx.max(v / scale);
                }
            }
            if mx == f64::NEG_INFINITY {
                continue; // fully masked row
            }
            let mut z = 0.0;
            for j in 0..c {
                if keep[j] {
                    let e = (row[j] / scale - mx).exp();
                    y[i * c + j] = e;
                    z += e;
                }
            }
            for j in 0..c {
                y[i * c + j] /= z;
            }
        }
        let yc = y.clone();
        Ok(self.unary(
            "softmax_rows",
            [r, c],
            y,
            Box::new(move |g| {
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let dot: f64 = (0..c).map(|j| g[i * c + j] * yc[i * c + j]).sum();
                    for j in 0..c {
                        gx[i * c + j] = yc[i * c + j] * (g[i * c + j] - dot) / scale;
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Var<'t>> {
        let [r, c] = self.shape();
        if rows * cols != r * c {
            return Err(TensorError::BadShape {
                op: "reshape",
                shape: [r, c],
                detail: format!("target {rows}x{cols}"),
            });
        }
        let data = self.data_ref().to_vec();
        Ok(self.unary(
            "reshape",
            [rows, cols],
            data,
            Box::new(move |g| vec![Some(g.to_vec())]),
        ))
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Var<'t> {
        let [r, c] = self.shape();
        assert!(start <= end && end <= r, "slice_rows {start}..{end} of {r}");
        let d = self.data_ref();
        let data = d[start * c..end * c].to_vec();
        self.unary(
            "slice_rows",
            [end - start, c],
            data,
            Box::new(move |g| {
                let mut gx = vec![0.0; r * c];
                gx[start * c..end * c].copy_from_slice(g);
                vec![Some(gx)]
            }),
        )
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Var<'t> {
        let [r, c] = self.shape();
        assert!(start <= end && end <= c, "slice_cols {start}..{end} of {c}");
        let d = self.data_ref().to_vec();
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&d[i * c + start..i * c + end]);
        }
        self.unary(
            "slice_cols",
            [r, w],
            data,
            Box::new(move |g| {
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    gx[i * c + start..i * c + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                vec![Some(gx)]
            }),
        )
    }

    pub fn row(&self, i: usize) -> Var<'t> {
        self.slice_rows(i, i + 1)
    }

    /// Add a `[1 x c]` bias row to every row of `[r x c]`.
    pub fn add_bias(&self, bias: Var<'t>) -> Var<'t> {
        let [r, c] = self.shape();
        assert_eq!(bias.shape(), [1, c], "add_bias: bias shape mismatch");
        let x = self.data_ref().to_vec();
        let b = bias.data_ref().to_vec();
        let mut data = x;
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += b[j];
            }
        }
        self.binary(
            bias,
            "add_bias",
            [r, c],
            data,
            Box::new(move |g| {
                let mut gb = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        gb[j] += g[i * c + j];
                    }
                }
                vec![Some(g.to_vec()), Some(gb)]
            }),
        )
    }
}

/// Stack vertically; all parts must share a column count.
pub fn concat_rows<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    assert!(!parts.is_empty(), "concat_rows of nothing");
    let tape = parts[0].tape;
    let c = parts[0].cols();
    let mut rows = 0;
    let mut data = Vec::new();
    let mut row_counts = Vec::with_capacity(parts.len());
    for p in parts {
        let [r, pc] = p.shape();
        if pc != c {
            return Err(TensorError::DimMismatch {
                op: "concat_rows",
                lhs: [rows, c],
                rhs: [r, pc],
            });
        }
        rows += r;
        row_counts.push(r);
        data.extend_from_slice(&p.data_ref());
    }
    let rg = parts.iter().any(Var::requires_grad);
    let parents: Vec<usize> = parts.iter().map(|p| p.idx).collect();
    let backward: BackwardFn = Box::new(move |g| {
        let mut out = Vec::with_capacity(row_counts.len());
        let mut offset = 0;
        for r in &row_counts {
            out.push(Some(g[offset * c..(offset + r) * c].to_vec()));
            offset += r;
        }
        out
    });
    Ok(tape.push(
        "concat_rows",
        [rows, c],
        data,
        parents,
        if rg { Some(backward) } else { None },
        rg,
    ))
}

/// Stack horizontally; all parts must share a row count.
pub fn concat_cols<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    assert!(!parts.is_empty(), "concat_cols of nothing");
    let tape = parts[0].tape;
    let r = parts[0].rows();
    let mut widths = Vec::with_capacity(parts.len());
    let mut total = 0;
    for p in parts {
        let [pr, pc] = p.shape();
        if pr != r {
            return Err(TensorError::DimMismatch {
                op: "concat_cols",
                lhs: [r, total],
                rhs: [pr, pc],
            });
        }
        widths.push(pc);
        total += pc;
    }
    let mut data = vec![0.0; r * total];
    let mut offset = 0;
    for p in parts {
        let pc = p.cols();
        let pd = p.data_ref();
        for i in 0..r {
            data[i * total + offset..i * total + offset + pc]
                .copy_from_slice(&pd[i * pc..(i + 1) * pc]);
        }
        offset += pc;
    }
    let rg = parts.iter().any(Var::requires_grad);
    let parents: Vec<usize> = parts.iter().map(|p| p.idx).collect();
    let backward: BackwardFn = Box::new(move |g| {
        let mut out = Vec::with_capacity(widths.len());
        let mut offset = 0;
        for w in &widths {
            let mut gp = vec![0.0; r * w];
            for i in 0..r {
                gp[i * w..(i + 1) * w].copy_from_slice(&g[i * total + offset..i * total + offset + w]);
            }
            out.push(Some(gp));
            offset += w;
        }
        out
    });
    Ok(tape.push(
        "concat_cols",
        [r, total],
        data,
        parents,
        if rg { Some(backward) } else { None },
        rg,
    ))
}

macro_rules! elementwise_binop {
    ($trait:ident, $method:ident, $name:literal, $fwd:expr, $bwd:expr) => {
        impl<'t> std::ops::$trait for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                self.assert_same_shape(rhs, $name);
                let a = self.data_ref().to_vec();
                let b = rhs.data_ref().to_vec();
                let fwd: fn(f64, f64) -> f64 = $fwd;
                let data: Vec<f64> = a.iter().zip(&b).map(|(x, y)| fwd(*x, *y)).collect();
                let bwd: fn(f64, f64, f64) -> (f64, f64) = $bwd;
                self.binary(
                    rhs,
                    $name,
                    self.shape(),
                    data,
                    Box::new(move |g| {
                        let mut ga = Vec::with_capacity(g.len());
                        let mut gb = Vec::with_capacity(g.len());
                        for ((gi, ai), bi) in g.iter().zip(&a).zip(&b) {
                            let (da, db) = bwd(*gi, *ai, *bi);
                            ga.push(da);
                            gb.push(db);
                        }
                        vec![Some(ga), Some(gb)]
                    }),
                )
            }
        }
    };
}

elementwise_binop!(Add, add, "add", |x, y| x + y, |g, _a, _b| (g, g));
elementwise_binop!(Sub, sub, "sub", |x, y| x - y, |g, _a, _b| (g, -g));
elementwise_binop!(Mul, mul, "mul", |x, y| x * y, |g, a, b| (g * b, g * a));
elementwise_binop!(Div, div, "div", |x, y| x / y, |g, a, b| (g / b, -g * a / (b * b)));

impl<'t> std::ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let eye = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let a = tape.constant(Tensor::from_rows(&[vec![3.0, -1.0], vec![2.5, 7.0]]));
        let out = eye.matmul(a).unwrap();
        assert_eq!(out.value(), a.value());
    }

    #[test]
    fn matmul_hand_computed() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = tape.constant(Tensor::from_rows(&[vec![0.0], vec![1.0]]));
        let out = a.matmul(b).unwrap();
        assert_eq!(out.value().data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(2, 2));
        let err = a.matmul(b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![1.0, -2.0, 0.5]]), true);
        let loss = x.sum();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_half_square_sum_is_x() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![1.5, -0.25, 3.0]]), true);
        let loss = (x * x).sum().scale(0.5);
        tape.backward(loss).unwrap();
        let g = tape.grad(x).unwrap();
        for (gi, xi) in g.data().iter().zip(x.value().data()) {
            approx(*gi, *xi, 1e-12);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(2, 2), true);
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, TensorError::NonScalarLoss { .. }));
    }

    #[test]
    fn unreachable_leaf_has_no_grad() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0), true);
        let y = tape.leaf(Tensor::scalar(5.0), true);
        let loss = x.scale(3.0);
        tape.backward(loss).unwrap();
        assert!(tape.grad(y).is_none());
        approx(tape.grad(x).unwrap().data()[0], 3.0, 1e-15);
    }

    #[test]
    fn softmax_uniform_row() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![0.7, 0.7, 0.7, 0.7]]));
        let y = x.softmax_rows(1.0, None).unwrap();
        for v in y.value().data() {
            approx(*v, 0.25, 1e-12);
        }
    }

    #[test]
    fn softmax_large_logits_stable() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![1000.0, 0.0]]));
        let y = x.softmax_rows(1.0, None).unwrap().value();
        assert!(tape.first_nonfinite().is_none());
        approx(y.data()[0], 1.0, 1e-12);
        approx(y.data()[1], 0.0, 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let tape = Tape::new();
        let mut vals = Vec::new();
        let mut s = 0.31;
        for _ in 0..25 {
            s = (s * 73.7).fract();
            vals.push((s - 0.5) * 2000.0);
        }
        let x = tape.constant(Tensor::new(5, 5, vals));
        let y = x.softmax_rows(2.0, None).unwrap().value();
        for i in 0..5 {
            let sum: f64 = (0..5).map(|j| y.get(i, j)).sum();
            approx(sum, 1.0, 1e-9);
        }
    }

    #[test]
    fn softmax_rejects_nonpositive_scale() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros(1, 2));
        assert!(matches!(
            x.softmax_rows(0.0, None),
            Err(TensorError::BadParameter { .. })
        ));
    }

    #[test]
    fn softmax_mask_zeroes_columns() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]));
        let y = x
            .softmax_rows(1.0, Some(&[true, false, true]))
            .unwrap()
            .value();
        approx(y.get(0, 1), 0.0, 0.0);
        approx(y.get(0, 0) + y.get(0, 2), 1.0, 1e-12);
    }

    #[test]
    fn nonfinite_is_detected_and_named() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::scalar(1e308));
        let y = x.exp();
        assert_eq!(y.value().data()[0], f64::INFINITY);
        let (op, _) = tape.first_nonfinite().unwrap();
        assert_eq!(op, "exp");
        assert!(tape.check_finite().is_err());
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0]]), true);
        let b = tape.leaf(Tensor::from_rows(&[vec![3.0, 4.0]]), true);
        let cat = concat_rows(&[a, b]).unwrap();
        assert_eq!(cat.shape(), [2, 2]);
        let back = cat.slice_rows(1, 2);
        assert_eq!(back.value().data(), &[3.0, 4.0]);
        let loss = (cat * cat).sum();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[2.0, 4.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[6.0, 8.0]);
    }

    #[test]
    fn grad_accumulates_over_reuse() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0), true);
        let y = x + x; // dy/dx = 2
        let loss = y.scale(5.0);
        tape.backward(loss).unwrap();
        approx(tape.grad(x).unwrap().data()[0], 10.0, 1e-12);
    }
}
