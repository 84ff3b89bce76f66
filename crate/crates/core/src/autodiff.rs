//! Reverse-mode differentiation over a tape of matrix operations.
//!
//! The vocabulary is deliberately small: products with (absolute) weight
//! matrices, bias broadcast, elementwise arithmetic, ReLU, min/max, a few
//! smooth unary maps and row slicing. That is enough to express forward
//! passes, interval bound propagation and the region costs built on them.
//!
//! A [`Graph`] is single-owner. Build one per loss evaluation, call
//! [`Graph::backward`] on a `1 x 1` node and read gradients of the leaves.

use crate::tensor::Matrix;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AdError {
    #[error("backward requires a scalar (1x1) output, got {0}x{1}")]
    NonScalar(usize, usize),
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AbsMatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ReluRows(Var, usize),
    Max(Var, Var),
    Min(Var, Var),
    Exp(Var),
    Sqrt(Var),
    Square(Var),
    Sum(Var),
    SumRows(Var),
    Rows(Var, usize),
    VStack(Var, Var),
    MulRow(Var, Var),
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required them.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for `v`; `None` when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, zero-filled when `v` does not influence the output.
    pub fn wrt(&self, v: Var, shape: (usize, usize)) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes; the working-set size of the computation.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable input.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input treated as constant; no gradient flows into it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copies the current value of `v` into a fresh constant (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.get(0, 0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `|a| * b`, the radius map of interval propagation.
    pub fn abs_matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).abs().matmul(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::AbsMatMul(a, b), ng)
    }

    /// Adds the column vector `bias` (`r x 1`) to every column of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.cols(), 1, "bias must be a column vector");
        let mut value = self.value(x).clone();
        value.add_row_bias(b.data());
        let ng = self.ng(x) || self.ng(bias);
        self.push(value, Op::AddBias(x, bias), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    /// Multiplies every row of `x` elementwise by the `1 x c` row `row`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let r = self.value(row);
        let xv = self.value(x);
        assert_eq!(r.shape(), (1, xv.cols()), "mul_row expects a 1 x cols row");
        let mut value = xv.clone();
        let c = value.cols();
        for i in 0..value.rows() {
            for (v, s) in value.row_mut(i).iter_mut().zip(r.data()) {
                *v *= s;
            }
        }
        debug_assert_eq!(c, r.cols());
        let ng = self.ng(x) || self.ng(row);
        self.push(value, Op::MulRow(x, row), ng)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).scale(s);
        let ng = self.ng(x);
        self.push(value, Op::Scale(x, s), ng)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).map(|v| v + s);
        let ng = self.ng(x);
        self.push(value, Op::AddScalar(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let rows = self.value(x).rows();
        self.relu_rows(x, rows)
    }

    /// ReLU on the first `count` rows, identity on the rest.
    pub fn relu_rows(&mut self, x: Var, count: usize) -> Var {
        let mut value = self.value(x).clone();
        let c = value.cols();
        for v in &mut value.data_mut()[..count * c] {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let ng = self.ng(x);
        self.push(value, Op::ReluRows(x, count), ng)
    }

    pub fn max(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), f64::max);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Max(a, b), ng)
    }

    pub fn min(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), f64::min);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Min(a, b), ng)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        let ng = self.ng(x);
        self.push(value, Op::Exp(x), ng)
    }

    /// Square root of a nonnegative input; the derivative at 0 is taken as 0.
    pub fn sqrt(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0).sqrt());
        let ng = self.ng(x);
        self.push(value, Op::Sqrt(x), ng)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        let ng = self.ng(x);
        self.push(value, Op::Square(x), ng)
    }

    /// Sum of all entries as a `1 x 1` node.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(x).sum());
        let ng = self.ng(x);
        self.push(value, Op::Sum(x), ng)
    }

    /// Column sums as a `1 x c` row.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut value = Matrix::zeros(1, xv.cols());
        for r in 0..xv.rows() {
            for (o, v) in value.data_mut().iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        let ng = self.ng(x);
        self.push(value, Op::SumRows(x), ng)
    }

    pub fn rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).row_slice(start, len);
        let ng = self.ng(x);
        self.push(value, Op::Rows(x, start), ng)
    }

    pub fn vstack(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).vstack(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::VStack(a, b), ng)
    }

    /// Reverse sweep from the scalar `out`.
    pub fn backward(&self, out: Var) -> Result<Gradients, AdError> {
        let shape = self.value(out).shape();
        if shape != (1, 1) {
            return Err(AdError::NonScalar(shape.0, shape.1));
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; out.0 + 1];
        grads[out.0] = Some(Matrix::filled(1, 1, 1.0));

        fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.ng(a) {
                        acc(&mut grads, a, g.matmul_nt(self.value(b)));
                    }
                    if self.ng(b) {
                        acc(&mut grads, b, self.value(a).matmul_tn(&g));
                    }
                }
                Op::AbsMatMul(a, b) => {
                    let av = self.value(a);
                    if self.ng(a) {
                        let ga = g.matmul_nt(self.value(b));
                        let ga = ga.zip_map(av, |gv, w| if w > 0.0 { gv } else if w < 0.0 { -gv } else { 0.0 });
                        acc(&mut grads, a, ga);
                    }
                    if self.ng(b) {
                        acc(&mut grads, b, av.abs().matmul_tn(&g));
                    }
                }
                Op::AddBias(x, bias) => {
                    if self.ng(bias) {
                        let mut gb = Matrix::zeros(g.rows(), 1);
                        for r in 0..g.rows() {
                            gb.set(r, 0, g.row(r).iter().sum());
                        }
                        acc(&mut grads, bias, gb);
                    }
                    if self.ng(x) {
                        acc(&mut grads, x, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(a) {
                        acc(&mut grads, a, g.clone());
                    }
                    if self.ng(b) {
                        acc(&mut grads, b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(a) {
                        acc(&mut grads, a, g.clone());
                    }
                    if self.ng(b) {
                        acc(&mut grads, b, g.scale(-1.0));
                    }
                }
                Op::Mul(a, b) => {
                    if self.ng(a) {
                        acc(&mut grads, a, g.zip_map(self.value(b), |x, y| x * y));
                    }
                    if self.ng(b) {
                        acc(&mut grads, b, g.zip_map(self.value(a), |x, y| x * y));
                    }
                }
                Op::MulRow(x, row) => {
                    let rv = self.value(row);
                    if self.ng(x) {
                        let mut gx = g.clone();
                        for r in 0..gx.rows() {
                            for (v, s) in gx.row_mut(r).iter_mut().zip(rv.data()) {
                                *v *= s;
                            }
                        }
                        acc(&mut grads, x, gx);
                    }
                    if self.ng(row) {
                        let xv = self.value(x);
                        let mut gr = Matrix::zeros(1, rv.cols());
                        for r in 0..g.rows() {
                            for ((o, gv), xval) in gr.data_mut().iter_mut().zip(g.row(r)).zip(xv.row(r)) {
                                *o += gv * xval;
                            }
                        }
                        acc(&mut grads, row, gr);
                    }
                }
                Op::Scale(x, s) => acc(&mut grads, x, g.scale(s)),
                Op::AddScalar(x) => acc(&mut grads, x, g),
                Op::ReluRows(x, count) => {
                    let xv = self.value(x);
                    let c = xv.cols();
                    let mut gx = g;
                    for (gv, v) in gx.data_mut()[..count * c].iter_mut().zip(&xv.data()[..count * c]) {
                        if *v <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    acc(&mut grads, x, gx);
                }
                Op::Max(a, b) => {
                    let (av, bv) = (self.value(a), self.value(b));
                    if self.ng(a) {
                        let mut ga = g.clone();
                        for ((gv, x), y) in ga.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                            if x < y {
                                *gv = 0.0;
                            }
                        }
                        acc(&mut grads, a, ga);
                    }
                    if self.ng(b) {
                        let mut gb = g;
                        for ((gv, x), y) in gb.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                            if x >= y {
                                *gv = 0.0;
                            }
                        }
                        acc(&mut grads, b, gb);
                    }
                }
                Op::Min(a, b) => {
                    let (av, bv) = (self.value(a), self.value(b));
                    if self.ng(a) {
                        let mut ga = g.clone();
                        for ((gv, x), y) in ga.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                            if x > y {
                                *gv = 0.0;
                            }
                        }
                        acc(&mut grads, a, ga);
                    }
                    if self.ng(b) {
                        let mut gb = g;
                        for ((gv, x), y) in gb.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                            if x <= y {
                                *gv = 0.0;
                            }
                        }
                        acc(&mut grads, b, gb);
                    }
                }
                Op::Exp(x) => acc(&mut grads, x, g.zip_map(&node.value, |gv, e| gv * e)),
                Op::Sqrt(x) => {
                    acc(&mut grads, x, g.zip_map(&node.value, |gv, s| if s > 0.0 { gv * 0.5 / s } else { 0.0 }))
                }
                Op::Square(x) => acc(&mut grads, x, g.zip_map(self.value(x), |gv, v| 2.0 * gv * v)),
                Op::Sum(x) => {
                    let (r, c) = self.value(x).shape();
                    acc(&mut grads, x, Matrix::filled(r, c, g.get(0, 0)));
                }
                Op::SumRows(x) => {
                    let (r, c) = self.value(x).shape();
                    let mut gx = Matrix::zeros(r, c);
                    for i in 0..r {
                        gx.row_mut(i).copy_from_slice(g.row(0));
                    }
                    acc(&mut grads, x, gx);
                }
                Op::Rows(x, start) => {
                    let (r, c) = self.value(x).shape();
                    let mut gx = Matrix::zeros(r, c);
                    gx.set_block(start, 0, &g);
                    acc(&mut grads, x, gx);
                }
                Op::VStack(a, b) => {
                    let ra = self.value(a).rows();
                    if self.ng(a) {
                        acc(&mut grads, a, g.row_slice(0, ra));
                    }
                    if self.ng(b) {
                        acc(&mut grads, b, g.row_slice(ra, g.rows() - ra));
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Matrix {
        Matrix::filled(1, 1, v)
    }

    #[test]
    fn linear_gradient() {
        let mut g = Graph::new();
        let w = g.param(scalar(2.0));
        let x = g.constant(scalar(3.0));
        let y = g.matmul(w, x);
        let grads = g.backward(y).unwrap();
        assert_eq!(g.scalar(y), 6.0);
        assert_eq!(grads.get(w).unwrap().get(0, 0), 3.0);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn inactive_relu_has_zero_gradient() {
        let mut g = Graph::new();
        let w = g.param(scalar(2.0));
        let b = g.param(scalar(-10.0));
        let x = g.constant(scalar(3.0));
        let z = g.matmul(w, x);
        let z = g.add_bias(z, b);
        let y = g.relu(z);
        let grads = g.backward(y).unwrap();
        assert_eq!(g.scalar(y), 0.0);
        assert_eq!(grads.wrt(w, (1, 1)).get(0, 0), 0.0);
        assert_eq!(grads.wrt(b, (1, 1)).get(0, 0), 0.0);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.param(scalar(0.0));
        let y = g.relu(x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x, (1, 1)).get(0, 0), 0.0);
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Matrix::zeros(2, 1));
        assert_eq!(g.backward(x).err(), Some(AdError::NonScalar(2, 1)));
    }

    /// Central finite differences over every op in the vocabulary.
    #[test]
    fn composite_program_matches_finite_differences() {
        fn program(g: &mut Graph, w: Var) -> Var {
            let x = g.constant(Matrix::from_rows(&[vec![0.3, -1.2], vec![0.7, 0.4], vec![-0.5, 0.9]]));
            let bias = g.constant(Matrix::column(&[0.1, -0.2]));
            let z = g.matmul(w, x);
            let z = g.add_bias(z, bias);
            let r = g.abs_matmul(w, x);
            let h = g.relu_rows(z, 1);
            let s = g.add(h, r);
            let e = g.exp(s);
            let q = g.square(z);
            let q = g.add_scalar(q, 1.0);
            let q = g.sqrt(q);
            let m = g.max(e, q);
            let n = g.min(e, q);
            let p = g.mul(m, n);
            let top = g.rows(p, 0, 1);
            let bottom = g.rows(p, 1, 1);
            let st = g.vstack(bottom, top);
            let row = g.sum_rows(st);
            let weighted = g.mul_row(st, row);
            let d = g.sub(weighted, z);
            let d = g.scale(d, 0.5);
            g.sum(d)
        }
        let w0 = Matrix::from_rows(&[vec![0.5, -0.3, 0.8], vec![-0.6, 0.2, 0.35]]);
        let mut g = Graph::new();
        let w = g.param(w0.clone());
        let out = program(&mut g, w);
        let grads = g.backward(out).unwrap();
        let analytic = grads.wrt(w, w0.shape());
        let h = 1e-6;
        for i in 0..w0.data().len() {
            let mut plus = w0.clone();
            plus.data_mut()[i] += h;
            let mut minus = w0.clone();
            minus.data_mut()[i] -= h;
            let mut gp = Graph::new();
            let wp = gp.param(plus);
            let fp = program(&mut gp, wp);
            let mut gm = Graph::new();
            let wm = gm.param(minus);
            let fm = program(&mut gm, wm);
            let fd = (gp.scalar(fp) - gm.scalar(fm)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!((fd - a).abs() <= 1e-6 * (1.0 + a.abs()), "entry {i}: fd {fd} vs analytic {a}");
        }
    }
}
