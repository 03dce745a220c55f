//! A small reverse-mode differentiation tape over batched row-major matrices.
//!
//! The primitive set is closed: affine maps, SiLU, layer normalization,
//! addition, column concatenation and a scaled squared-error reduction. That
//! is everything the score network and its training objective are built
//! from. Rows are independent batch elements for every primitive except the
//! squared-error reduction, which sums over all entries.

use crate::error::{Error, Result};

pub type NodeId = usize;

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn add_assign(&mut self, other: &Matrix) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

enum Op {
    Leaf,
    Param {
        offset: usize,
    },
    Affine {
        x: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Silu {
        x: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        shift: NodeId,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Concat {
        a: NodeId,
        b: NodeId,
    },
    SquaredError {
        x: NodeId,
        target: Option<NodeId>,
        scale: f64,
    },
}

struct Node {
    op: Op,
    value: Matrix,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn of(&self, id: NodeId) -> Option<&Matrix> {
        self.grads.get(id).and_then(Option::as_ref)
    }
}

/// `c = a·b + beta·c` for strided operands, `a` is m×k and `b` is k×n.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() >= m * n);
    // SAFETY: the asserted bounds cover every element the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, value: Matrix, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        self.nodes.len() - 1
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        let v = &self.nodes[id].value;
        (v.rows, v.cols)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn input(&mut self, value: Matrix, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, value, requires_grad)
    }

    /// A `rows × cols` block of the flat parameter vector starting at `offset`.
    pub fn param(
        &mut self,
        params: &[f64],
        offset: usize,
        rows: usize,
        cols: usize,
        requires_grad: bool,
    ) -> Result<NodeId> {
        let data = params
            .get(offset..offset + rows * cols)
            .ok_or(Error::ShapeMismatch {
                expected: offset + rows * cols,
                got: params.len(),
            })?
            .to_vec();
        Ok(self.push(
            Op::Param { offset },
            Matrix { rows, cols, data },
            requires_grad,
        ))
    }

    /// `x·Wᵀ + b` with `W` stored as `out × in` and `b` as `1 × out`.
    pub fn affine(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let (rows, fan_in) = self.shape(x);
        let (out, w_in) = self.shape(weight);
        if w_in != fan_in {
            return Err(Error::Autodiff(format!(
                "affine input has {fan_in} features but weight expects {w_in}"
            )));
        }
        if self.shape(bias) != (1, out) {
            return Err(Error::Autodiff(format!("affine bias must be 1×{out}")));
        }
        let mut y = Matrix::zeros(rows, out);
        let b = &self.nodes[bias].value.data;
        for r in 0..rows {
            y.data[r * out..(r + 1) * out].copy_from_slice(b);
        }
        gemm(
            rows,
            fan_in,
            out,
            &self.nodes[x].value.data,
            (fan_in, 1),
            &self.nodes[weight].value.data,
            (1, fan_in),
            1.0,
            &mut y.data,
        );
        let rg = self.needs(x) || self.needs(weight) || self.needs(bias);
        Ok(self.push(Op::Affine { x, weight, bias }, y, rg))
    }

    /// `x·sigmoid(x)`, elementwise.
    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let v = &self.nodes[x].value;
        let data = v.data.iter().map(|&z| z * sigmoid(z)).collect();
        let value = Matrix {
            rows: v.rows,
            cols: v.cols,
            data,
        };
        let rg = self.needs(x);
        self.push(Op::Silu { x }, value, rg)
    }

    /// Per-row normalization followed by an elementwise affine `gain`, `shift`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, shift: NodeId) -> Result<NodeId> {
        let (rows, cols) = self.shape(x);
        if self.shape(gain) != (1, cols) || self.shape(shift) != (1, cols) {
            return Err(Error::Autodiff(format!(
                "layer norm parameters must be 1×{cols}"
            )));
        }
        let xv = &self.nodes[x].value;
        let g = &self.nodes[gain].value.data;
        let b = &self.nodes[shift].value.data;
        let mut normalized = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut y = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let n = (row[c] - mean) * is;
                normalized[r * cols + c] = n;
                y.data[r * cols + c] = n * g[c] + b[c];
            }
        }
        let rg = self.needs(x) || self.needs(gain) || self.needs(shift);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                shift,
                normalized,
                inv_std,
            },
            y,
            rg,
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Autodiff(format!(
                "cannot add {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut value = self.nodes[a].value.clone();
        value.add_assign(&self.nodes[b].value);
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add { a, b }, value, rg))
    }

    /// Column-wise concatenation `[a | b]`.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ra != rb {
            return Err(Error::Autodiff(format!(
                "cannot concatenate {ra} rows with {rb} rows"
            )));
        }
        let cols = ca + cb;
        let mut value = Matrix::zeros(ra, cols);
        for r in 0..ra {
            value.data[r * cols..r * cols + ca].copy_from_slice(self.nodes[a].value.row(r));
            value.data[r * cols + ca..(r + 1) * cols].copy_from_slice(self.nodes[b].value.row(r));
        }
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Concat { a, b }, value, rg))
    }

    /// `scale·Σ (x − target)²` over every entry, a `1 × 1` node.
    pub fn squared_error(
        &mut self,
        x: NodeId,
        target: Option<NodeId>,
        scale: f64,
    ) -> Result<NodeId> {
        if let Some(t) = target {
            if self.shape(t) != self.shape(x) {
                return Err(Error::Autodiff(
                    "squared error target shape differs from input".into(),
                ));
            }
        }
        let xv = &self.nodes[x].value.data;
        let sum: f64 = match target {
            Some(t) => xv
                .iter()
                .zip(&self.nodes[t].value.data)
                .map(|(a, b)| (a - b).powi(2))
                .sum(),
            None => xv.iter().map(|a| a * a).sum(),
        };
        let rg = self.needs(x) || target.is_some_and(|t| self.needs(t));
        Ok(self.push(
            Op::SquaredError { x, target, scale },
            Matrix::scalar(scale * sum),
            rg,
        ))
    }

    /// Propagates `seed` (the cotangent of `root`) back through the tape.
    pub fn backward(&self, root: NodeId, seed: Matrix) -> Result<Gradients> {
        if (seed.rows, seed.cols) != self.shape(root) {
            return Err(Error::Autodiff(format!(
                "seed shape {:?} does not match root shape {:?}",
                (seed.rows, seed.cols),
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(seed);

        for id in (0..=root).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[id].take() else {
                continue;
            };
            match &node.op {
                Op::Leaf | Op::Param { .. } => {
                    grads[id] = Some(dy);
                }
                Op::Affine { x, weight, bias } => {
                    let (rows, fan_in) = self.shape(*x);
                    let out = node.value.cols;
                    if self.needs(*x) {
                        let mut dx = Matrix::zeros(rows, fan_in);
                        gemm(
                            rows,
                            out,
                            fan_in,
                            &dy.data,
                            (out, 1),
                            &self.nodes[*weight].value.data,
                            (fan_in, 1),
                            0.0,
                            &mut dx.data,
                        );
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.needs(*weight) {
                        let mut dw = Matrix::zeros(out, fan_in);
                        gemm(
                            out,
                            rows,
                            fan_in,
                            &dy.data,
                            (1, out),
                            &self.nodes[*x].value.data,
                            (fan_in, 1),
                            0.0,
                            &mut dw.data,
                        );
                        accumulate(&mut grads, *weight, dw);
                    }
                    if self.needs(*bias) {
                        let mut db = Matrix::zeros(1, out);
                        for r in 0..rows {
                            for (acc, g) in db.data.iter_mut().zip(dy.row(r)) {
                                *acc += g;
                            }
                        }
                        accumulate(&mut grads, *bias, db);
                    }
                }
                Op::Silu { x } => {
                    let xv = &self.nodes[*x].value;
                    let data = xv
                        .data
                        .iter()
                        .zip(&dy.data)
                        .map(|(&z, &g)| {
                            let s = sigmoid(z);
                            g * s * (1.0 + z * (1.0 - s))
                        })
                        .collect();
                    accumulate(
                        &mut grads,
                        *x,
                        Matrix {
                            rows: xv.rows,
                            cols: xv.cols,
                            data,
                        },
                    );
                }
                Op::LayerNorm {
                    x,
                    gain,
                    shift,
                    normalized,
                    inv_std,
                } => {
                    let (rows, cols) = self.shape(*x);
                    let g = &self.nodes[*gain].value.data;
                    if self.needs(*x) {
                        let mut dx = Matrix::zeros(rows, cols);
                        let n = cols as f64;
                        for r in 0..rows {
                            let dyr = dy.row(r);
                            let nr = &normalized[r * cols..(r + 1) * cols];
                            let mut sum_d = 0.0;
                            let mut sum_dn = 0.0;
                            for c in 0..cols {
                                let d = dyr[c] * g[c];
                                sum_d += d;
                                sum_dn += d * nr[c];
                            }
                            for c in 0..cols {
                                let d = dyr[c] * g[c];
                                dx.data[r * cols + c] =
                                    inv_std[r] / n * (n * d - sum_d - nr[c] * sum_dn);
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.needs(*gain) || self.needs(*shift) {
                        let mut dg = Matrix::zeros(1, cols);
                        let mut db = Matrix::zeros(1, cols);
                        for r in 0..rows {
                            for c in 0..cols {
                                let d = dy.data[r * cols + c];
                                dg.data[c] += d * normalized[r * cols + c];
                                db.data[c] += d;
                            }
                        }
                        if self.needs(*gain) {
                            accumulate(&mut grads, *gain, dg);
                        }
                        if self.needs(*shift) {
                            accumulate(&mut grads, *shift, db);
                        }
                    }
                }
                Op::Add { a, b } => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, dy.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, dy);
                    }
                }
                Op::Concat { a, b } => {
                    let (rows, ca) = self.shape(*a);
                    let cb = self.nodes[*b].value.cols;
                    let cols = ca + cb;
                    if self.needs(*a) {
                        let mut da = Matrix::zeros(rows, ca);
                        for r in 0..rows {
                            da.data[r * ca..(r + 1) * ca]
                                .copy_from_slice(&dy.data[r * cols..r * cols + ca]);
                        }
                        accumulate(&mut grads, *a, da);
                    }
                    if self.needs(*b) {
                        let mut db = Matrix::zeros(rows, cb);
                        for r in 0..rows {
                            db.data[r * cb..(r + 1) * cb]
                                .copy_from_slice(&dy.data[r * cols + ca..(r + 1) * cols]);
                        }
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::SquaredError { x, target, scale } => {
                    let upstream = dy.data[0];
                    let xv = &self.nodes[*x].value;
                    let diff: Vec<f64> = match target {
                        Some(t) => xv
                            .data
                            .iter()
                            .zip(&self.nodes[*t].value.data)
                            .map(|(a, b)| a - b)
                            .collect(),
                        None => xv.data.clone(),
                    };
                    let k = 2.0 * scale * upstream;
                    if self.needs(*x) {
                        let data = diff.iter().map(|d| k * d).collect();
                        accumulate(
                            &mut grads,
                            *x,
                            Matrix {
                                rows: xv.rows,
                                cols: xv.cols,
                                data,
                            },
                        );
                    }
                    if let Some(t) = target.filter(|t| self.needs(*t)) {
                        let data = diff.iter().map(|d| -k * d).collect();
                        accumulate(
                            &mut grads,
                            t,
                            Matrix {
                                rows: xv.rows,
                                cols: xv.cols,
                                data,
                            },
                        );
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Adds the gradient of every parameter node into the flat vector `out`.
    pub fn scatter_param_grads(&self, grads: &Gradients, out: &mut [f64]) {
        for (id, node) in self.nodes.iter().enumerate() {
            if let (Op::Param { offset }, Some(g)) = (&node.op, grads.of(id)) {
                for (o, v) in out[*offset..*offset + g.data.len()].iter_mut().zip(&g.data) {
                    *o += v;
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Value and gradient of a scalar loss with respect to a flat parameter vector.
///
/// `build` records the loss on a fresh tape and returns its root, which must be
/// a `1 × 1` node.
pub fn grad<F>(params: &[f64], build: F) -> Result<(f64, Vec<f64>)>
where
    F: FnOnce(&mut Graph, &[f64]) -> Result<NodeId>,
{
    let mut graph = Graph::new();
    let root = build(&mut graph, params)?;
    let (rows, cols) = graph.shape(root);
    if (rows, cols) != (1, 1) {
        return Err(Error::Autodiff(format!(
            "loss must be a scalar, got a {rows}×{cols} node"
        )));
    }
    let loss = graph.value(root).data[0];
    let mut out = vec![0.0; params.len()];
    if graph.needs(root) {
        let grads = graph.backward(root, Matrix::scalar(1.0))?;
        graph.scatter_param_grads(&grads, &mut out);
    }
    Ok((loss, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn half_squared_norm_has_identity_gradient() {
        let p = vec![0.5, -1.25, 3.0, 2.0];
        let (loss, g) = grad(&p, |graph, params| {
            let x = graph.param(params, 0, 2, 2, true)?;
            graph.squared_error(x, None, 0.5)
        })
        .unwrap();
        assert!((loss - 0.5 * p.iter().map(|v| v * v).sum::<f64>()).abs() < 1e-15);
        assert_eq!(g, p);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let p = vec![1.0, 2.0, 3.0];
        let (_, g) = grad(&p, |graph, _| {
            let x = graph.input(Matrix::new(1, 2, vec![1.0, 2.0])?, false);
            graph.squared_error(x, None, 1.0)
        })
        .unwrap();
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let err = grad(&[1.0, 2.0], |graph, params| graph.param(params, 0, 1, 2, true));
        assert!(matches!(err, Err(Error::Autodiff(_))));
    }

    #[test]
    fn shape_errors_surface() {
        let mut g = Graph::new();
        let a = g.input(Matrix::zeros(2, 3), false);
        let b = g.input(Matrix::zeros(3, 3), false);
        assert!(g.add(a, b).is_err());
        assert!(g.concat(a, b).is_err());
        let w = g.input(Matrix::zeros(4, 2), false);
        let bias = g.input(Matrix::zeros(1, 4), false);
        assert!(g.affine(a, w, bias).is_err());
    }

    /// Every primitive against central differences on a tiny composite graph.
    #[test]
    fn composite_graph_matches_finite_differences() {
        let mut r = rng::stream(3, 0);
        // layout: w1 (4×3), b1 (1×4), gain (1×4), shift (1×4), w2 (2×6), b2 (1×2)
        let n = 12 + 4 + 4 + 4 + 12 + 2;
        let params = rng::normal_vec(&mut r, n);
        let x = rng::normal_vec(&mut r, 5 * 3);
        let extra = rng::normal_vec(&mut r, 5 * 2);
        let target = rng::normal_vec(&mut r, 5 * 2);
        let loss = |p: &[f64]| {
            grad(p, |g, p| {
                let xin = g.input(Matrix::new(5, 3, x.clone())?, false);
                let w1 = g.param(p, 0, 4, 3, true)?;
                let b1 = g.param(p, 12, 1, 4, true)?;
                let gain = g.param(p, 16, 1, 4, true)?;
                let shift = g.param(p, 20, 1, 4, true)?;
                let w2 = g.param(p, 24, 2, 6, true)?;
                let b2 = g.param(p, 36, 1, 2, true)?;
                let h = g.affine(xin, w1, b1)?;
                let h2 = g.silu(h);
                let h3 = g.add(h, h2)?;
                let n = g.layer_norm(h3, gain, shift)?;
                let e = g.input(Matrix::new(5, 2, extra.clone())?, false);
                let c = g.concat(n, e)?;
                let o = g.affine(c, w2, b2)?;
                let t = g.input(Matrix::new(5, 2, target.clone())?, false);
                g.squared_error(o, Some(t), 0.3)
            })
            .unwrap()
        };
        let (_, analytic) = loss(&params);
        let h = 1e-5;
        for i in 0..n {
            let mut p = params.clone();
            p[i] += h;
            let up = loss(&p).0;
            p[i] -= 2.0 * h;
            let down = loss(&p).0;
            let fd = (up - down) / (2.0 * h);
            let tol = 1e-6f64.max(1e-4 * fd.abs().max(analytic[i].abs()));
            assert!((fd - analytic[i]).abs() < tol, "param {i}: fd {fd} vs {}", analytic[i]);
        }
    }

    #[test]
    fn input_cotangent_propagates() {
        let mut g = Graph::new();
        let x = g.input(Matrix::new(2, 2, vec![1.0, -1.0, 0.5, 2.0]).unwrap(), true);
        let y = g.silu(x);
        let seed = Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let grads = g.backward(y, seed).unwrap();
        let dx = grads.of(x).unwrap();
        let d = |z: f64| sigmoid(z) * (1.0 + z * (1.0 - sigmoid(z)));
        assert!((dx.data[0] - d(1.0)).abs() < 1e-15);
        assert_eq!(dx.data[1], 0.0);
        assert!((dx.data[3] - 2.0 * d(2.0)).abs() < 1e-15);
    }
}
