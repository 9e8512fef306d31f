//! Tape-based reverse-mode differentiation over dense rank-2 tensors.
//!
//! Every operation appends a node to a [`Graph`]. Nodes only reference
//! earlier nodes, so insertion order is a topological order and the
//! backward pass is a single reverse sweep over the tape.
//!
//! ```
//! use ndarray::array;
//! use xattn_core::grad::Graph;
//!
//! let mut g = Graph::new();
//! let x = g.leaf(array![[3.0]]);
//! let y = g.mul(x, x).unwrap();
//! let grads = g.backward(y).unwrap();
//! assert_eq!(grads.wrt(x)[[0, 0]], 6.0);
//! ```

use ndarray::{Array2, Axis, Zip};

use crate::error::{Error, Result};

/// Dense row-major matrix; vectors are `1×n` or `n×1`.
pub type Tensor = Array2<f64>;

/// Denominator clamp for cosine similarity and L2 normalization.
pub const NORM_CLAMP: f64 = 1e-12;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis2 {
    /// Reduce / normalize down each column (over rows).
    Rows,
    /// Reduce / normalize along each row (over columns).
    Cols,
}

impl Axis2 {
    fn nd(self) -> Axis {
        match self {
            Axis2::Rows => Axis(0),
            Axis2::Cols => Axis(1),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Concat {
        parts: Vec<Var>,
        axis: Axis2,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    /// Standardize each row (layer norm) or each column (batch norm).
    Standardize {
        x: Var,
        axis: Axis2,
        inv_std: Vec<f64>,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Sigmoid(Var),
    Relu(Var),
    Softmax {
        x: Var,
        axis: Axis2,
        scale: f64,
    },
    L2Normalize {
        x: Var,
        axis: Axis2,
        norms: Vec<f64>,
    },
    CosineRows(Var, Var),
    Sum {
        x: Var,
        axis: Option<Axis2>,
    },
    Mean {
        x: Var,
        axis: Option<Axis2>,
    },
    Bce {
        p: Var,
        targets: Tensor,
        eps: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// A computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Adjoint of `v`; exactly zero when `v` does not influence the output.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.adjoints[v.0] {
            Some(t) => t.clone(),
            None => Tensor::zeros(self.shapes[v.0]),
        }
    }

    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.adjoints[v.0].as_ref()
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    t.dim()
}

/// Whether `small` can be broadcast against `big` (equal, row vector,
/// column vector or scalar).
fn broadcastable(big: (usize, usize), small: (usize, usize)) -> bool {
    (small.0 == big.0 || small.0 == 1) && (small.1 == big.1 || small.1 == 1)
}

/// Sum `grad` down to `shape` along broadcast axes.
fn reduce_to(grad: Tensor, shape: (usize, usize)) -> Tensor {
    let mut g = grad;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn lanes_mut(t: &mut Tensor, axis: Axis2) -> ndarray::iter::LanesMut<'_, f64, ndarray::Ix1> {
    // Rows axis means "normalize each column", i.e. iterate columns.
    match axis {
        Axis2::Cols => t.rows_mut(),
        Axis2::Rows => t.columns_mut(),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        dims(&self.nodes[v.0].value)
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_leaf(&mut self, value: f64) -> Var {
        self.leaf(Tensor::from_elem((1, 1), value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let v = self.value(a).dot(self.value(b));
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.1 {
            return Err(Error::shape("matmul_t", sa, sb));
        }
        let v = self.value(a).dot(&self.value(b).t());
        Ok(self.push(v, Op::MatMulT(a, b)))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.value(x).t().to_owned();
        self.push(v, Op::Transpose(x))
    }

    /// Elementwise `a + b`, broadcasting `b` over rows and/or columns.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !broadcastable(sa, sb) {
            return Err(Error::shape("add", sa, sb));
        }
        let v = self.value(a) + self.value(b);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Elementwise `a ⊙ b`, broadcasting `b` over rows and/or columns.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !broadcastable(sa, sb) {
            return Err(Error::shape("mul", sa, sb));
        }
        let v = self.value(a) * self.value(b);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let v = self.value(x) * k;
        self.push(v, Op::Scale(x, k))
    }

    /// `x + c` for a constant `c`.
    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x) + c;
        self.push(v, Op::Offset(x))
    }

    pub fn concat(&mut self, parts: &[Var], axis: Axis2) -> Result<Var> {
        let first = parts
            .first()
            .copied()
            .ok_or_else(|| Error::InvalidConfig("concat of zero tensors".into()))?;
        let s0 = self.shape(first);
        for &p in &parts[1..] {
            let sp = self.shape(p);
            let ok = match axis {
                Axis2::Cols => sp.0 == s0.0,
                Axis2::Rows => sp.1 == s0.1,
            };
            if !ok {
                return Err(Error::shape("concat", s0, sp));
            }
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let nd_axis = match axis {
            Axis2::Cols => Axis(1),
            Axis2::Rows => Axis(0),
        };
        let v =
            ndarray::concatenate(nd_axis, &views).map_err(|_| Error::shape("concat", s0, s0))?;
        Ok(self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Rows `start..end` of `x`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(x);
        if start >= end || end > s.0 {
            return Err(Error::shape("slice_rows", s, (start, end)));
        }
        let v = self.value(x).slice(ndarray::s![start..end, ..]).to_owned();
        Ok(self.push(v, Op::SliceRows { x, start }))
    }

    fn standardize(&mut self, x: Var, axis: Axis2, eps: f64) -> Var {
        let mut v = self.value(x).clone();
        let mut inv_std = Vec::new();
        for mut lane in lanes_mut(&mut v, axis) {
            let n = lane.len() as f64;
            let mean = lane.sum() / n;
            let var = lane.iter().map(|&e| (e - mean) * (e - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            lane.mapv_inplace(|e| (e - mean) * inv);
            inv_std.push(inv);
        }
        self.push(v, Op::Standardize { x, axis, inv_std })
    }

    /// Per-row normalization to zero mean and unit (population) variance.
    /// Gain and bias are applied separately with [`Graph::mul`] / [`Graph::add`].
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        self.standardize(x, Axis2::Cols, eps)
    }

    /// Per-column normalization using the batch (row) statistics.
    pub fn batch_norm(&mut self, x: Var, eps: f64) -> Var {
        self.standardize(x, Axis2::Rows, eps)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let v = self.value(x).mapv(|e| if e > 0.0 { e } else { slope * e });
        self.push(v, Op::LeakyRelu { x, slope })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(sigmoid);
        self.push(v, Op::Sigmoid(x))
    }

    /// `max(x, 0)`.
    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(|e| e.max(0.0));
        self.push(v, Op::Relu(x))
    }

    /// Same as [`Graph::relu`]; reads better inside margin losses.
    pub fn hinge(&mut self, x: Var) -> Var {
        self.relu(x)
    }

    /// Softmax of `scale · x`, normalized along `axis`
    /// (`Axis2::Cols`: each row sums to one; `Axis2::Rows`: each column does).
    pub fn softmax(&mut self, x: Var, axis: Axis2, scale: f64) -> Var {
        let mut v = self.value(x) * scale;
        for mut lane in lanes_mut(&mut v, axis) {
            let max = lane.fold(f64::NEG_INFINITY, |m, &e| m.max(e));
            lane.mapv_inplace(|e| (e - max).exp());
            let z = lane.sum();
            lane.mapv_inplace(|e| e / z);
        }
        self.push(v, Op::Softmax { x, axis, scale })
    }

    /// Divide each lane along `axis` by its L2 norm (clamped below at
    /// [`NORM_CLAMP`]).
    pub fn l2_normalize(&mut self, x: Var, axis: Axis2) -> Var {
        let mut v = self.value(x).clone();
        let mut norms = Vec::new();
        for mut lane in lanes_mut(&mut v, axis) {
            let n = lane.dot(&lane).sqrt();
            let d = n.max(NORM_CLAMP);
            lane.mapv_inplace(|e| e / d);
            norms.push(n);
        }
        self.push(v, Op::L2Normalize { x, axis, norms })
    }

    /// Row-wise cosine similarity of two equally shaped matrices, `r×1`.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape("cosine_rows", sa, sb));
        }
        let mut out = Tensor::zeros((sa.0, 1));
        for (i, (ra, rb)) in self
            .value(a)
            .rows()
            .into_iter()
            .zip(self.value(b).rows())
            .enumerate()
        {
            let den = (ra.dot(&ra).sqrt() * rb.dot(&rb).sqrt()).max(NORM_CLAMP);
            out[[i, 0]] = ra.dot(&rb) / den;
        }
        Ok(self.push(out, Op::CosineRows(a, b)))
    }

    /// Sum over `axis`, or over everything when `axis` is `None` (`1×1`).
    pub fn sum(&mut self, x: Var, axis: Option<Axis2>) -> Var {
        let v = reduce(self.value(x), axis);
        self.push(v, Op::Sum { x, axis })
    }

    pub fn mean(&mut self, x: Var, axis: Option<Axis2>) -> Var {
        let src = self.value(x);
        let n = count(dims(src), axis) as f64;
        let v = reduce(src, axis) / n;
        self.push(v, Op::Mean { x, axis })
    }

    /// Per-row mean binary cross-entropy against fixed `targets`, `r×1`.
    /// Probabilities are clamped to `[eps, 1 - eps]`.
    pub fn bce(&mut self, p: Var, targets: &Tensor, eps: f64) -> Result<Var> {
        let sp = self.shape(p);
        if sp != targets.dim() {
            return Err(Error::shape("bce", sp, targets.dim()));
        }
        let mut out = Tensor::zeros((sp.0, 1));
        for (i, (pr, tr)) in self
            .value(p)
            .rows()
            .into_iter()
            .zip(targets.rows())
            .enumerate()
        {
            let s: f64 = pr
                .iter()
                .zip(tr.iter())
                .map(|(&p, &t)| {
                    let p = p.clamp(eps, 1.0 - eps);
                    -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
                })
                .sum();
            out[[i, 0]] = s / sp.1 as f64;
        }
        Ok(self.push(
            out,
            Op::Bce {
                p,
                targets: targets.clone(),
                eps,
            },
        ))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let so = self.shape(output);
        if so != (1, 1) {
            return Err(Error::shape("backward (scalar output)", so, (1, 1)));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        adj[output.0] = Some(Tensor::ones((1, 1)));

        for idx in (0..=output.0).rev() {
            let Some(dy) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &dy, &mut adj);
            adj[idx] = Some(dy);
        }

        adj.resize(self.nodes.len(), None);
        Ok(Gradients {
            adjoints: adj,
            shapes: self.nodes.iter().map(|n| dims(&n.value)).collect(),
        })
    }

    fn propagate(&self, node: &Node, dy: &Tensor, adj: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                accumulate(adj, *a, dy.dot(&val(*b).t()));
                accumulate(adj, *b, val(*a).t().dot(dy));
            }
            Op::MatMulT(a, b) => {
                accumulate(adj, *a, dy.dot(val(*b)));
                accumulate(adj, *b, dy.t().dot(val(*a)));
            }
            Op::Transpose(x) => accumulate(adj, *x, dy.t().to_owned()),
            Op::Add(a, b) => {
                accumulate(adj, *a, dy.clone());
                accumulate(adj, *b, reduce_to(dy.clone(), dims(val(*b))));
            }
            Op::Mul(a, b) => {
                accumulate(adj, *a, dy * val(*b));
                accumulate(adj, *b, reduce_to(dy * val(*a), dims(val(*b))));
            }
            Op::Scale(x, k) => accumulate(adj, *x, dy * *k),
            Op::Offset(x) => accumulate(adj, *x, dy.clone()),
            Op::Concat { parts, axis } => {
                let mut offset = 0;
                for &p in parts {
                    let s = dims(val(p));
                    let g = match axis {
                        Axis2::Cols => dy.slice(ndarray::s![.., offset..offset + s.1]).to_owned(),
                        Axis2::Rows => dy.slice(ndarray::s![offset..offset + s.0, ..]).to_owned(),
                    };
                    offset += match axis {
                        Axis2::Cols => s.1,
                        Axis2::Rows => s.0,
                    };
                    accumulate(adj, p, g);
                }
            }
            Op::SliceRows { x, start } => {
                let mut g = Tensor::zeros(dims(val(*x)));
                g.slice_mut(ndarray::s![*start..*start + dy.nrows(), ..])
                    .assign(dy);
                accumulate(adj, *x, g);
            }
            Op::Standardize { x, axis, inv_std } => {
                // dx = inv_std * (dy - mean(dy) - y * mean(dy * y)) per lane.
                let y = &node.value;
                let mut g = dy.clone();
                let lane_iter = match axis {
                    Axis2::Cols => g.rows_mut(),
                    Axis2::Rows => g.columns_mut(),
                };
                let y_lanes = match axis {
                    Axis2::Cols => y.rows(),
                    Axis2::Rows => y.columns(),
                };
                for ((mut gl, yl), &inv) in lane_iter.into_iter().zip(y_lanes).zip(inv_std) {
                    let n = gl.len() as f64;
                    let mean_dy = gl.sum() / n;
                    let mean_dyy = gl.dot(&yl) / n;
                    Zip::from(&mut gl)
                        .and(&yl)
                        .for_each(|g, &yv| *g = inv * (*g - mean_dy - yv * mean_dyy));
                }
                accumulate(adj, *x, g);
            }
            Op::LeakyRelu { x, slope } => {
                let mut g = dy.clone();
                Zip::from(&mut g).and(val(*x)).for_each(|g, &xv| {
                    if xv <= 0.0 {
                        *g *= slope
                    }
                });
                accumulate(adj, *x, g);
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                let mut g = dy.clone();
                Zip::from(&mut g)
                    .and(y)
                    .for_each(|g, &s| *g *= s * (1.0 - s));
                accumulate(adj, *x, g);
            }
            Op::Relu(x) => {
                let mut g = dy.clone();
                Zip::from(&mut g).and(val(*x)).for_each(|g, &xv| {
                    if xv <= 0.0 {
                        *g = 0.0
                    }
                });
                accumulate(adj, *x, g);
            }
            Op::Softmax { x, axis, scale } => {
                let y = &node.value;
                let mut g = dy * y;
                let ax = axis.nd();
                let dot = g.sum_axis(ax).insert_axis(ax);
                // g = y ⊙ (dy - Σ dy⊙y) · scale
                Zip::from(&mut g)
                    .and(y)
                    .and_broadcast(&dot)
                    .for_each(|g, &yv, &d| *g = scale * (*g - yv * d));
                accumulate(adj, *x, g);
            }
            Op::L2Normalize { x, axis, norms } => {
                let y = &node.value;
                let mut g = dy.clone();
                let (g_lanes, y_lanes) = match axis {
                    Axis2::Cols => (g.rows_mut(), y.rows()),
                    Axis2::Rows => (g.columns_mut(), y.columns()),
                };
                for ((mut gl, yl), &n) in g_lanes.into_iter().zip(y_lanes).zip(norms) {
                    if n == 0.0 {
                        gl.fill(0.0);
                    } else if n < NORM_CLAMP {
                        gl.mapv_inplace(|e| e / NORM_CLAMP);
                    } else {
                        let d = gl.dot(&yl);
                        Zip::from(&mut gl)
                            .and(&yl)
                            .for_each(|g, &yv| *g = (*g - yv * d) / n);
                    }
                }
                accumulate(adj, *x, g);
            }
            Op::CosineRows(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let mut ga = Tensor::zeros(dims(va));
                let mut gb = Tensor::zeros(dims(vb));
                for i in 0..va.nrows() {
                    let (ra, rb) = (va.row(i), vb.row(i));
                    let (na, nb) = (ra.dot(&ra).sqrt(), rb.dot(&rb).sqrt());
                    if na == 0.0 || nb == 0.0 {
                        continue;
                    }
                    let up = dy[[i, 0]];
                    let prod = na * nb;
                    if prod < NORM_CLAMP {
                        ga.row_mut(i).assign(&(&rb * (up / NORM_CLAMP)));
                        gb.row_mut(i).assign(&(&ra * (up / NORM_CLAMP)));
                        continue;
                    }
                    let c = node.value[[i, 0]];
                    ga.row_mut(i)
                        .assign(&((&rb / prod - &ra * (c / (na * na))) * up));
                    gb.row_mut(i)
                        .assign(&((&ra / prod - &rb * (c / (nb * nb))) * up));
                }
                accumulate(adj, *a, ga);
                accumulate(adj, *b, gb);
            }
            Op::Sum { x, axis } => {
                let g = expand(dy, dims(val(*x)), *axis, 1.0);
                accumulate(adj, *x, g);
            }
            Op::Mean { x, axis } => {
                let s = dims(val(*x));
                let g = expand(dy, s, *axis, 1.0 / count(s, *axis) as f64);
                accumulate(adj, *x, g);
            }
            Op::Bce { p, targets, eps } => {
                let vp = val(*p);
                let cols = vp.ncols() as f64;
                let mut g = Tensor::zeros(dims(vp));
                Zip::indexed(&mut g).for_each(|(i, j), g| {
                    let pv = vp[[i, j]];
                    if pv < *eps || pv > 1.0 - eps {
                        return;
                    }
                    let t = targets[[i, j]];
                    *g = dy[[i, 0]] * (-(t / pv) + (1.0 - t) / (1.0 - pv)) / cols;
                });
                accumulate(adj, *p, g);
            }
        }
    }
}

fn count(shape: (usize, usize), axis: Option<Axis2>) -> usize {
    match axis {
        None => shape.0 * shape.1,
        Some(Axis2::Rows) => shape.0,
        Some(Axis2::Cols) => shape.1,
    }
}

fn reduce(t: &Tensor, axis: Option<Axis2>) -> Tensor {
    match axis {
        None => Tensor::from_elem((1, 1), t.sum()),
        Some(a) => t.sum_axis(a.nd()).insert_axis(a.nd()),
    }
}

fn expand(dy: &Tensor, shape: (usize, usize), axis: Option<Axis2>, k: f64) -> Tensor {
    match axis {
        None => Tensor::from_elem(shape, dy[[0, 0]] * k),
        Some(_) => {
            let b = dy.broadcast(shape).expect("reduced shape broadcasts back");
            b.mapv(|e| e * k)
        }
    }
}

fn accumulate(adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut adj[v.0] {
        Some(a) => *a += &g,
        slot @ None => *slot = Some(g),
    }
}
