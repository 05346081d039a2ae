//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! Every operation on a [`Var`] appends a node to its [`Tape`]; a call to
//! [`Tape::backward`] then walks the nodes in reverse and accumulates
//! gradients for every node that (transitively) depends on a leaf created
//! with `requires_grad = true`.
//!
//! Forward-mode tangents are carried by [`Dual`]. The tangent arithmetic is
//! itself recorded on the tape, so one backward pass differentiates a loss
//! that mixes values and directional derivatives (the time derivative of the
//! log-wavefunction enters the training loss this way).

use std::cell::RefCell;
use std::f64::consts::FRAC_1_SQRT_2;
use std::rc::Rc;

/// Dense row-major `f64` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "Mat::from_vec: shape does not match data length");
        Self { rows, cols, data }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        let cols = data.len();
        Self::from_vec(1, cols, data)
    }

    pub fn scalar(x: f64) -> Self {
        Self::from_vec(1, 1, vec![x])
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_map(&self, other: &Mat, f: impl Fn(f64, f64) -> f64) -> Mat {
        debug_assert_eq!(self.shape(), other.shape());
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, c: f64) {
        for a in &mut self.data {
            *a *= c;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn matmul(&self, b: &Mat) -> Mat {
        assert_eq!(self.cols, b.rows, "matmul: inner dimensions differ");
        let mut out = Mat::zeros(self.rows, b.cols);
        gemm_nn(self.rows, self.cols, b.cols, &self.data, &b.data, &mut out.data, 0.0);
        out
    }
}

// C (m×n) = A (m×k) B (k×n) + beta C
fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths checked above; strides describe row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

// C (m×n) = A (m×k) Bᵀ, B stored (n×k)
fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: as above; B is read column-major through its strides.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), 1, k as isize,
            beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

// C (m×n) = Aᵀ B, A stored (k×m), B (k×n)
fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], beta: f64) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: as above; A is read column-major through its strides.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), 1, m as isize,
            b.as_ptr(), n as isize, 1,
            beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Gaussian error linear unit, `x Φ(x)`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

#[inline]
pub fn gelu_prime(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

#[inline]
pub fn gelu_second(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp() * (2.0 - x * x)
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNT(usize, usize),
    Bmm { a: usize, b: usize, batch: usize },
    BmmNT { a: usize, b: usize, batch: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Shift(usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    AddCol(usize, usize),
    MulCol(usize, usize),
    RowSum(usize),
    ColSum(usize),
    Sum(usize),
    Gelu(usize),
    GeluPrime(usize),
    Exp(usize),
    Sin(usize),
    Cos(usize),
    Powf(usize, f64),
    Softmax(usize),
    LogSumExp(usize),
    SliceCols { a: usize, start: usize },
    ConcatCols(Vec<usize>),
    GatherRows { a: usize, idx: Rc<[usize]> },
    Pick { a: usize, idx: Rc<[usize]> },
    TileRows { a: usize, times: usize },
    Reshape(usize),
    Transpose(usize),
}

struct Node {
    value: Rc<Mat>,
    op: Op,
    rg: bool,
}

/// Records operations for reverse-mode differentiation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let v = self.value();
        write!(f, "Var#{}({}x{})", self.id, v.rows, v.cols)
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Mat> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros of the given shape when `v` did not
    /// influence the root.
    pub fn get_or_zeros(&self, v: Var<'_>) -> Mat {
        match self.get(v) {
            Some(g) => g.clone(),
            None => {
                let val = v.value();
                Mat::zeros(val.rows, val.cols)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Mat, op: Op, rg: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Rc::new(value), op, rg });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub fn leaf(&self, value: Mat, requires_grad: bool) -> Var<'_> {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&self, value: Mat) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    fn value_of(&self, id: usize) -> Rc<Mat> {
        self.nodes.borrow()[id].value.clone()
    }

    fn rg_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].rg
    }

    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty(), "concat_cols: no inputs");
        let vals: Vec<Rc<Mat>> = parts.iter().map(|p| p.value()).collect();
        let rows = vals[0].rows;
        let cols: usize = vals.iter().map(|v| v.cols).sum();
        let mut out = Mat::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for v in &vals {
                assert_eq!(v.rows, rows, "concat_cols: row counts differ");
                out.row_mut(r)[off..off + v.cols].copy_from_slice(v.row(r));
                off += v.cols;
            }
        }
        let rg = parts.iter().any(|p| p.requires_grad());
        self.push(out, Op::ConcatCols(parts.iter().map(|p| p.id).collect()), rg)
    }

    /// Reverse sweep from a scalar (1×1) root.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let shape = root.value().shape();
        assert_eq!(shape, (1, 1), "backward: root must be a scalar");
        self.backward_seeded(root, Mat::scalar(1.0))
    }

    pub fn backward_seeded(&self, root: Var<'_>, seed: Mat) -> Gradients {
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        let mut grads: Vec<Option<Mat>> = (0..n).map(|_| None).collect();
        assert_eq!(seed.shape(), nodes[root.id].value.shape());
        grads[root.id] = Some(seed);

        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            if !node.rg {
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            backprop_node(&nodes, &mut grads, id, &g);
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Gradients { grads }
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Mat>], id: usize, g: Mat) {
    if !nodes[id].rg {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn acc_with(nodes: &[Node], grads: &mut [Option<Mat>], id: usize, f: impl FnOnce(&mut Mat)) {
    if !nodes[id].rg {
        return;
    }
    let v = &nodes[id].value;
    let slot = grads[id].get_or_insert_with(|| Mat::zeros(v.rows, v.cols));
    f(slot);
}

fn backprop_node(nodes: &[Node], grads: &mut [Option<Mat>], id: usize, g: &Mat) {
    let node = &nodes[id];
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (av.rows, av.cols, bv.cols);
            acc_with(nodes, grads, *a, |ga| gemm_nt(m, n, k, &g.data, &bv.data, &mut ga.data, 1.0));
            acc_with(nodes, grads, *b, |gb| gemm_tn(k, m, n, &av.data, &g.data, &mut gb.data, 1.0));
        }
        Op::MatMulNT(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (av.rows, av.cols, bv.rows);
            acc_with(nodes, grads, *a, |ga| gemm_nn(m, n, k, &g.data, &bv.data, &mut ga.data, 1.0));
            acc_with(nodes, grads, *b, |gb| gemm_tn(n, m, k, &g.data, &av.data, &mut gb.data, 1.0));
        }
        Op::Bmm { a, b, batch } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (av.rows / batch, av.cols, bv.cols);
            acc_with(nodes, grads, *a, |ga| {
                for s in 0..*batch {
                    gemm_nt(m, n, k, &g.data[s * m * n..], &bv.data[s * k * n..], &mut ga.data[s * m * k..], 1.0);
                }
            });
            acc_with(nodes, grads, *b, |gb| {
                for s in 0..*batch {
                    gemm_tn(k, m, n, &av.data[s * m * k..], &g.data[s * m * n..], &mut gb.data[s * k * n..], 1.0);
                }
            });
        }
        Op::BmmNT { a, b, batch } => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k, n) = (av.rows / batch, av.cols, bv.rows / batch);
            acc_with(nodes, grads, *a, |ga| {
                for s in 0..*batch {
                    gemm_nn(m, n, k, &g.data[s * m * n..], &bv.data[s * n * k..], &mut ga.data[s * m * k..], 1.0);
                }
            });
            acc_with(nodes, grads, *b, |gb| {
                for s in 0..*batch {
                    gemm_tn(n, m, k, &g.data[s * m * n..], &av.data[s * m * k..], &mut gb.data[s * n * k..], 1.0);
                }
            });
        }
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *b, g.map(|x| -x));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            accumulate(nodes, grads, *a, g.zip_map(bv, |x, y| x * y));
            accumulate(nodes, grads, *b, g.zip_map(av, |x, y| x * y));
        }
        Op::Scale(a, c) => accumulate(nodes, grads, *a, g.map(|x| x * c)),
        Op::Shift(a) => accumulate(nodes, grads, *a, g.clone()),
        Op::AddRow(a, row) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *row, col_sum(g));
        }
        Op::MulRow(a, row) => {
            let (av, rv) = (&nodes[*a].value, &nodes[*row].value);
            accumulate(nodes, grads, *a, mul_row(g, rv));
            accumulate(nodes, grads, *row, col_sum(&g.zip_map(av, |x, y| x * y)));
        }
        Op::AddCol(a, col) => {
            accumulate(nodes, grads, *a, g.clone());
            accumulate(nodes, grads, *col, row_sum(g));
        }
        Op::MulCol(a, col) => {
            let (av, cv) = (&nodes[*a].value, &nodes[*col].value);
            accumulate(nodes, grads, *a, mul_col(g, cv));
            accumulate(nodes, grads, *col, row_sum(&g.zip_map(av, |x, y| x * y)));
        }
        Op::RowSum(a) => {
            let av = &nodes[*a].value;
            acc_with(nodes, grads, *a, |ga| {
                for r in 0..av.rows {
                    let gr = g.data[r];
                    for x in ga.row_mut(r) {
                        *x += gr;
                    }
                }
            });
        }
        Op::ColSum(a) => {
            let av = &nodes[*a].value;
            acc_with(nodes, grads, *a, |ga| {
                for r in 0..av.rows {
                    for (x, gc) in ga.row_mut(r).iter_mut().zip(&g.data) {
                        *x += gc;
                    }
                }
            });
        }
        Op::Sum(a) => {
            let s = g.data[0];
            acc_with(nodes, grads, *a, |ga| ga.data.iter_mut().for_each(|x| *x += s));
        }
        Op::Gelu(a) => {
            let av = &nodes[*a].value;
            accumulate(nodes, grads, *a, g.zip_map(av, |gi, x| gi * gelu_prime(x)));
        }
        Op::GeluPrime(a) => {
            let av = &nodes[*a].value;
            accumulate(nodes, grads, *a, g.zip_map(av, |gi, x| gi * gelu_second(x)));
        }
        Op::Exp(a) => accumulate(nodes, grads, *a, g.zip_map(y, |gi, yi| gi * yi)),
        Op::Sin(a) => {
            let av = &nodes[*a].value;
            accumulate(nodes, grads, *a, g.zip_map(av, |gi, x| gi * x.cos()));
        }
        Op::Cos(a) => {
            let av = &nodes[*a].value;
            accumulate(nodes, grads, *a, g.zip_map(av, |gi, x| -gi * x.sin()));
        }
        Op::Powf(a, p) => {
            let av = &nodes[*a].value;
            accumulate(nodes, grads, *a, g.zip_map(av, |gi, x| gi * p * x.powf(p - 1.0)));
        }
        Op::Softmax(a) => {
            let mut ga = Mat::zeros(y.rows, y.cols);
            for r in 0..y.rows {
                let (yr, gr) = (y.row(r), g.row(r));
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for ((o, yi), gi) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                    *o = yi * (gi - dot);
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::LogSumExp(a) => {
            let av = &nodes[*a].value;
            let mut ga = softmax_rows(av, false);
            for r in 0..ga.rows {
                let gr = g.data[r];
                for x in ga.row_mut(r) {
                    *x *= gr;
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::SliceCols { a, start } => {
            let len = g.cols;
            acc_with(nodes, grads, *a, |ga| {
                for r in 0..g.rows {
                    for (x, gi) in ga.row_mut(r)[*start..*start + len].iter_mut().zip(g.row(r)) {
                        *x += gi;
                    }
                }
            });
        }
        Op::ConcatCols(ids) => {
            let mut off = 0;
            for &p in ids {
                let w = nodes[p].value.cols;
                acc_with(nodes, grads, p, |gp| {
                    for r in 0..g.rows {
                        for (x, gi) in gp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]) {
                            *x += gi;
                        }
                    }
                });
                off += w;
            }
        }
        Op::GatherRows { a, idx } => {
            acc_with(nodes, grads, *a, |ga| {
                for (r, &src) in idx.iter().enumerate() {
                    for (x, gi) in ga.row_mut(src).iter_mut().zip(g.row(r)) {
                        *x += gi;
                    }
                }
            });
        }
        Op::Pick { a, idx } => {
            acc_with(nodes, grads, *a, |ga| {
                for (r, &c) in idx.iter().enumerate() {
                    let cols = ga.cols;
                    ga.data[r * cols + c] += g.data[r];
                }
            });
        }
        Op::TileRows { a, times } => {
            let av = &nodes[*a].value;
            let block = av.rows * av.cols;
            acc_with(nodes, grads, *a, |ga| {
                for t in 0..*times {
                    for (x, gi) in ga.data.iter_mut().zip(&g.data[t * block..(t + 1) * block]) {
                        *x += gi;
                    }
                }
            });
        }
        Op::Reshape(a) => {
            let av = &nodes[*a].value;
            accumulate(nodes, grads, *a, Mat::from_vec(av.rows, av.cols, g.data.clone()));
        }
        Op::Transpose(a) => accumulate(nodes, grads, *a, g.transpose()),
    }
}

fn col_sum(m: &Mat) -> Mat {
    let mut out = Mat::zeros(1, m.cols);
    for r in 0..m.rows {
        for (o, x) in out.data.iter_mut().zip(m.row(r)) {
            *o += x;
        }
    }
    out
}

fn row_sum(m: &Mat) -> Mat {
    Mat::from_vec(m.rows, 1, (0..m.rows).map(|r| m.row(r).iter().sum()).collect())
}

fn mul_row(m: &Mat, row: &Mat) -> Mat {
    let mut out = m.clone();
    for r in 0..m.rows {
        for (o, s) in out.row_mut(r).iter_mut().zip(&row.data) {
            *o *= s;
        }
    }
    out
}

fn mul_col(m: &Mat, col: &Mat) -> Mat {
    let mut out = m.clone();
    for r in 0..m.rows {
        let s = col.data[r];
        for o in out.row_mut(r) {
            *o *= s;
        }
    }
    out
}

/// Row-wise softmax. With `causal`, row `r` only sees columns `j <= r % cols`;
/// masked entries are exactly zero and never enter the normalising sum.
pub fn softmax_rows(z: &Mat, causal: bool) -> Mat {
    let mut out = Mat::zeros(z.rows, z.cols);
    for r in 0..z.rows {
        let limit = if causal { r % z.cols + 1 } else { z.cols };
        let zr = &z.row(r)[..limit];
        let max = zr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out.row_mut(r)[..limit];
        let mut sum = 0.0;
        for (o, &x) in orow.iter_mut().zip(zr) {
            *o = (x - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    out
}

fn logsumexp_rows(z: &Mat) -> Mat {
    Mat::from_vec(
        z.rows,
        1,
        (0..z.rows)
            .map(|r| {
                let zr = z.row(r);
                let max = zr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                max + zr.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
            })
            .collect(),
    )
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Mat> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value().shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.rg_of(self.id)
    }

    /// A constant copy of this value, cut off from the gradient flow.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    fn unary(self, value: Mat, op: Op) -> Var<'t> {
        self.tape.push(value, op, self.requires_grad())
    }

    fn binary(self, other: Var<'t>, value: Mat, op: Op) -> Var<'t> {
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, op, rg)
    }

    pub fn matmul(self, b: Var<'t>) -> Var<'t> {
        let (av, bv) = (self.value(), b.value());
        assert_eq!(av.cols, bv.rows, "matmul: {:?} x {:?}", av.shape(), bv.shape());
        let mut out = Mat::zeros(av.rows, bv.cols);
        gemm_nn(av.rows, av.cols, bv.cols, &av.data, &bv.data, &mut out.data, 0.0);
        self.binary(b, out, Op::MatMul(self.id, b.id))
    }

    /// `self · bᵀ`
    pub fn matmul_nt(self, b: Var<'t>) -> Var<'t> {
        let (av, bv) = (self.value(), b.value());
        assert_eq!(av.cols, bv.cols, "matmul_nt: {:?} x {:?}^T", av.shape(), bv.shape());
        let mut out = Mat::zeros(av.rows, bv.rows);
        gemm_nt(av.rows, av.cols, bv.rows, &av.data, &bv.data, &mut out.data, 0.0);
        self.binary(b, out, Op::MatMulNT(self.id, b.id))
    }

    /// Block-diagonal product: `self` is `batch` stacked (m×k) blocks and
    /// `b` is `batch` stacked (k×n) blocks.
    pub fn bmm(self, b: Var<'t>, batch: usize) -> Var<'t> {
        let (av, bv) = (self.value(), b.value());
        assert!(av.rows % batch == 0 && bv.rows % batch == 0, "bmm: batch does not divide rows");
        let (m, k, n) = (av.rows / batch, av.cols, bv.cols);
        assert_eq!(bv.rows / batch, k, "bmm: inner dimensions differ");
        let mut out = Mat::zeros(batch * m, n);
        for s in 0..batch {
            gemm_nn(m, k, n, &av.data[s * m * k..], &bv.data[s * k * n..], &mut out.data[s * m * n..], 0.0);
        }
        self.binary(b, out, Op::Bmm { a: self.id, b: b.id, batch })
    }

    /// Block-diagonal `A_s B_sᵀ` over `batch` stacked blocks.
    pub fn bmm_nt(self, b: Var<'t>, batch: usize) -> Var<'t> {
        let (av, bv) = (self.value(), b.value());
        assert!(av.rows % batch == 0 && bv.rows % batch == 0, "bmm_nt: batch does not divide rows");
        assert_eq!(av.cols, bv.cols, "bmm_nt: inner dimensions differ");
        let (m, k, n) = (av.rows / batch, av.cols, bv.rows / batch);
        let mut out = Mat::zeros(batch * m, n);
        for s in 0..batch {
            gemm_nt(m, k, n, &av.data[s * m * k..], &bv.data[s * n * k..], &mut out.data[s * m * n..], 0.0);
        }
        self.binary(b, out, Op::BmmNT { a: self.id, b: b.id, batch })
    }

    pub fn add(self, b: Var<'t>) -> Var<'t> {
        let out = self.value().zip_map(&b.value(), |x, y| x + y);
        self.binary(b, out, Op::Add(self.id, b.id))
    }

    pub fn sub(self, b: Var<'t>) -> Var<'t> {
        let out = self.value().zip_map(&b.value(), |x, y| x - y);
        self.binary(b, out, Op::Sub(self.id, b.id))
    }

    pub fn mul(self, b: Var<'t>) -> Var<'t> {
        let out = self.value().zip_map(&b.value(), |x, y| x * y);
        self.binary(b, out, Op::Mul(self.id, b.id))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let out = self.value().map(|x| x * c);
        self.unary(out, Op::Scale(self.id, c))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn shift(self, c: f64) -> Var<'t> {
        let out = self.value().map(|x| x + c);
        self.unary(out, Op::Shift(self.id))
    }

    /// Adds a (1×n) row to every row.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        let (av, rv) = (self.value(), row.value());
        assert_eq!(rv.shape(), (1, av.cols), "add_row: shape mismatch");
        let mut out = (*av).clone();
        for r in 0..out.rows {
            for (o, x) in out.row_mut(r).iter_mut().zip(&rv.data) {
                *o += x;
            }
        }
        self.binary(row, out, Op::AddRow(self.id, row.id))
    }

    pub fn mul_row(self, row: Var<'t>) -> Var<'t> {
        let (av, rv) = (self.value(), row.value());
        assert_eq!(rv.shape(), (1, av.cols), "mul_row: shape mismatch");
        let out = mul_row(&av, &rv);
        self.binary(row, out, Op::MulRow(self.id, row.id))
    }

    /// Adds an (m×1) column to every column.
    pub fn add_col(self, col: Var<'t>) -> Var<'t> {
        let (av, cv) = (self.value(), col.value());
        assert_eq!(cv.shape(), (av.rows, 1), "add_col: shape mismatch");
        let mut out = (*av).clone();
        for r in 0..out.rows {
            let s = cv.data[r];
            for o in out.row_mut(r) {
                *o += s;
            }
        }
        self.binary(col, out, Op::AddCol(self.id, col.id))
    }

    pub fn mul_col(self, col: Var<'t>) -> Var<'t> {
        let (av, cv) = (self.value(), col.value());
        assert_eq!(cv.shape(), (av.rows, 1), "mul_col: shape mismatch");
        let out = mul_col(&av, &cv);
        self.binary(col, out, Op::MulCol(self.id, col.id))
    }

    pub fn row_sum(self) -> Var<'t> {
        let out = row_sum(&self.value());
        self.unary(out, Op::RowSum(self.id))
    }

    pub fn col_sum(self) -> Var<'t> {
        let out = col_sum(&self.value());
        self.unary(out, Op::ColSum(self.id))
    }

    pub fn sum(self) -> Var<'t> {
        let out = Mat::scalar(self.value().data.iter().sum());
        self.unary(out, Op::Sum(self.id))
    }

    pub fn gelu(self) -> Var<'t> {
        let out = self.value().map(gelu);
        self.unary(out, Op::Gelu(self.id))
    }

    pub fn gelu_prime(self) -> Var<'t> {
        let out = self.value().map(gelu_prime);
        self.unary(out, Op::GeluPrime(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        let out = self.value().map(f64::exp);
        self.unary(out, Op::Exp(self.id))
    }

    pub fn sin(self) -> Var<'t> {
        let out = self.value().map(f64::sin);
        self.unary(out, Op::Sin(self.id))
    }

    pub fn cos(self) -> Var<'t> {
        let out = self.value().map(f64::cos);
        self.unary(out, Op::Cos(self.id))
    }

    pub fn powf(self, p: f64) -> Var<'t> {
        let out = self.value().map(|x| x.powf(p));
        self.unary(out, Op::Powf(self.id, p))
    }

    pub fn softmax(self, causal: bool) -> Var<'t> {
        let out = softmax_rows(&self.value(), causal);
        self.unary(out, Op::Softmax(self.id))
    }

    /// Row-wise log-sum-exp, (m×n) → (m×1).
    pub fn logsumexp(self) -> Var<'t> {
        let out = logsumexp_rows(&self.value());
        self.unary(out, Op::LogSumExp(self.id))
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Var<'t> {
        let av = self.value();
        assert!(start + len <= av.cols, "slice_cols: out of range");
        let mut out = Mat::zeros(av.rows, len);
        for r in 0..av.rows {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        self.unary(out, Op::SliceCols { a: self.id, start })
    }

    pub fn gather_rows(self, idx: Rc<[usize]>) -> Var<'t> {
        let av = self.value();
        let mut out = Mat::zeros(idx.len(), av.cols);
        for (r, &src) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(av.row(src));
        }
        self.unary(out, Op::GatherRows { a: self.id, idx })
    }

    /// Selects column `idx[r]` of each row r, giving an (m×1) column.
    pub fn pick(self, idx: Rc<[usize]>) -> Var<'t> {
        let av = self.value();
        assert_eq!(idx.len(), av.rows, "pick: one index per row required");
        let out = Mat::from_vec(av.rows, 1, idx.iter().enumerate().map(|(r, &c)| av.at(r, c)).collect());
        self.unary(out, Op::Pick { a: self.id, idx })
    }

    /// Stacks `times` copies of this matrix vertically.
    pub fn tile_rows(self, times: usize) -> Var<'t> {
        let av = self.value();
        let mut data = Vec::with_capacity(av.len() * times);
        for _ in 0..times {
            data.extend_from_slice(&av.data);
        }
        self.unary(Mat::from_vec(av.rows * times, av.cols, data), Op::TileRows { a: self.id, times })
    }

    pub fn reshape(self, rows: usize, cols: usize) -> Var<'t> {
        let av = self.value();
        assert_eq!(rows * cols, av.len(), "reshape: element count differs");
        self.unary(Mat::from_vec(rows, cols, av.data.clone()), Op::Reshape(self.id))
    }

    pub fn transpose(self) -> Var<'t> {
        let out = self.value().transpose();
        self.unary(out, Op::Transpose(self.id))
    }
}

fn add_opt<'t>(a: Option<Var<'t>>, b: Option<Var<'t>>) -> Option<Var<'t>> {
    match (a, b) {
        (Some(a), Some(b)) => Some(a.add(b)),
        (a, None) => a,
        (None, b) => b,
    }
}

/// A value together with an optional forward-mode tangent. `tan == None`
/// means the tangent is identically zero.
#[derive(Clone, Copy, Debug)]
pub struct Dual<'t> {
    pub val: Var<'t>,
    pub tan: Option<Var<'t>>,
}

impl<'t> Dual<'t> {
    pub fn new(val: Var<'t>, tan: Option<Var<'t>>) -> Self {
        Self { val, tan }
    }

    pub fn constant(val: Var<'t>) -> Self {
        Self { val, tan: None }
    }

    /// Bilinear product rule shared by the matrix products.
    fn bilinear(self, other: Dual<'t>, f: impl Fn(Var<'t>, Var<'t>) -> Var<'t>) -> Dual<'t> {
        let val = f(self.val, other.val);
        let left = self.tan.map(|t| f(t, other.val));
        let right = other.tan.map(|t| f(self.val, t));
        Dual::new(val, add_opt(left, right))
    }

    pub fn matmul(self, other: Dual<'t>) -> Dual<'t> {
        self.bilinear(other, |a, b| a.matmul(b))
    }

    pub fn matmul_nt(self, other: Dual<'t>) -> Dual<'t> {
        self.bilinear(other, |a, b| a.matmul_nt(b))
    }

    pub fn bmm(self, other: Dual<'t>, batch: usize) -> Dual<'t> {
        self.bilinear(other, |a, b| a.bmm(b, batch))
    }

    pub fn bmm_nt(self, other: Dual<'t>, batch: usize) -> Dual<'t> {
        self.bilinear(other, |a, b| a.bmm_nt(b, batch))
    }

    pub fn mul(self, other: Dual<'t>) -> Dual<'t> {
        self.bilinear(other, |a, b| a.mul(b))
    }

    pub fn mul_row(self, row: Dual<'t>) -> Dual<'t> {
        self.bilinear(row, |a, b| a.mul_row(b))
    }

    pub fn mul_col(self, col: Dual<'t>) -> Dual<'t> {
        self.bilinear(col, |a, b| a.mul_col(b))
    }

    pub fn add(self, other: Dual<'t>) -> Dual<'t> {
        Dual::new(self.val.add(other.val), add_opt(self.tan, other.tan))
    }

    pub fn sub(self, other: Dual<'t>) -> Dual<'t> {
        let tan = match (self.tan, other.tan) {
            (Some(a), Some(b)) => Some(a.sub(b)),
            (a, None) => a,
            (None, Some(b)) => Some(b.neg()),
        };
        Dual::new(self.val.sub(other.val), tan)
    }

    pub fn add_row(self, row: Dual<'t>) -> Dual<'t> {
        let tan = match (self.tan, row.tan) {
            (Some(a), Some(r)) => Some(a.add_row(r)),
            (a, None) => a,
            (None, Some(r)) => {
                let zeros = self.val.tape().constant(Mat::zeros(self.val.shape().0, self.val.shape().1));
                Some(zeros.add_row(r))
            }
        };
        Dual::new(self.val.add_row(row.val), tan)
    }

    pub fn add_col(self, col: Dual<'t>) -> Dual<'t> {
        let tan = match (self.tan, col.tan) {
            (Some(a), Some(c)) => Some(a.add_col(c)),
            (a, None) => a,
            (None, Some(c)) => {
                let zeros = self.val.tape().constant(Mat::zeros(self.val.shape().0, self.val.shape().1));
                Some(zeros.add_col(c))
            }
        };
        Dual::new(self.val.add_col(col.val), tan)
    }

    pub fn scale(self, c: f64) -> Dual<'t> {
        Dual::new(self.val.scale(c), self.tan.map(|t| t.scale(c)))
    }

    pub fn shift(self, c: f64) -> Dual<'t> {
        Dual::new(self.val.shift(c), self.tan)
    }

    pub fn row_sum(self) -> Dual<'t> {
        Dual::new(self.val.row_sum(), self.tan.map(|t| t.row_sum()))
    }

    pub fn gelu(self) -> Dual<'t> {
        let tan = self.tan.map(|t| self.val.gelu_prime().mul(t));
        Dual::new(self.val.gelu(), tan)
    }

    pub fn exp(self) -> Dual<'t> {
        let val = self.val.exp();
        Dual::new(val, self.tan.map(|t| val.mul(t)))
    }

    pub fn powf(self, p: f64) -> Dual<'t> {
        let tan = self.tan.map(|t| self.val.powf(p - 1.0).scale(p).mul(t));
        Dual::new(self.val.powf(p), tan)
    }

    pub fn softmax(self, causal: bool) -> Dual<'t> {
        let s = self.val.softmax(causal);
        let tan = self.tan.map(|t| {
            let u = s.mul(t);
            u.sub(s.mul_col(u.row_sum()))
        });
        Dual::new(s, tan)
    }

    pub fn logsumexp(self) -> Dual<'t> {
        let tan = self.tan.map(|t| self.val.softmax(false).mul(t).row_sum());
        Dual::new(self.val.logsumexp(), tan)
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Dual<'t> {
        Dual::new(self.val.slice_cols(start, len), self.tan.map(|t| t.slice_cols(start, len)))
    }

    pub fn gather_rows(self, idx: Rc<[usize]>) -> Dual<'t> {
        Dual::new(self.val.gather_rows(idx.clone()), self.tan.map(|t| t.gather_rows(idx)))
    }

    pub fn pick(self, idx: Rc<[usize]>) -> Dual<'t> {
        Dual::new(self.val.pick(idx.clone()), self.tan.map(|t| t.pick(idx)))
    }

    pub fn tile_rows(self, times: usize) -> Dual<'t> {
        Dual::new(self.val.tile_rows(times), self.tan.map(|t| t.tile_rows(times)))
    }

    pub fn reshape(self, rows: usize, cols: usize) -> Dual<'t> {
        Dual::new(self.val.reshape(rows, cols), self.tan.map(|t| t.reshape(rows, cols)))
    }

    pub fn concat_cols(tape: &'t Tape, parts: &[Dual<'t>]) -> Dual<'t> {
        let val = tape.concat_cols(&parts.iter().map(|p| p.val).collect::<Vec<_>>());
        let tan = if parts.iter().any(|p| p.tan.is_some()) {
            let tans: Vec<Var<'t>> = parts
                .iter()
                .map(|p| {
                    p.tan.unwrap_or_else(|| {
                        let (r, c) = p.val.shape();
                        tape.constant(Mat::zeros(r, c))
                    })
                })
                .collect();
            Some(tape.concat_cols(&tans))
        } else {
            None
        };
        Dual::new(val, tan)
    }
}
