//! Reverse-mode automatic differentiation over dense row-major `f64` matrices.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s. Calling
//! [`Tape::backward`] on a scalar output walks the record in reverse and
//! returns the gradient of every tracked leaf. Tapes are single-threaded and
//! cheap to create; batches are split into chunks that each own a tape.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::fmt;
use std::rc::Rc;

/// Dense row-major matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix[{}x{}]", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            write!(f, "{:?}", self.data)?;
        }
        Ok(())
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::filled(1, 1, value)
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Stacks fixed-width rows.
    pub fn from_rows<const N: usize>(rows: &[[f64; N]]) -> Self {
        Self::from_vec(rows.len(), N, rows.iter().flatten().copied().collect())
    }

    /// Single column built from a slice.
    pub fn column(values: &[f64]) -> Self {
        Self::from_vec(values.len(), 1, values.to_vec())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
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

    /// Row `r` as a 3-vector. Panics unless the matrix has three columns.
    pub fn row3(&self, r: usize) -> [f64; 3] {
        assert_eq!(self.cols, 3);
        let row = self.row(r);
        [row[0], row[1], row[2]]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar matrix");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix::from_vec(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn select_rows(&self, rows: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(rows.len() * self.cols);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        Matrix::from_vec(rows.len(), self.cols, data)
    }

    /// Matrix product `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(
            self.rows,
            self.cols,
            other.cols,
            (&self.data, self.cols, 1),
            (&other.data, other.cols, 1),
            &mut out.data,
        );
        out
    }

    fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn reshaped(mut self, rows: usize, cols: usize) -> Matrix {
        assert_eq!(rows * cols, self.data.len(), "reshape size mismatch");
        self.rows = rows;
        self.cols = cols;
        self
    }
}

/// `c += a · b` for an `m×k` by `k×n` product with explicit strides.
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: (&[f64], usize, usize),
    b: (&[f64], usize, usize),
    c: &mut [f64],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: all strides and extents were derived from the owning matrices,
    // whose lengths cover the index ranges addressed by dgemm.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1 as isize,
            a.2 as isize,
            b.0.as_ptr(),
            b.1 as isize,
            b.2 as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

#[derive(Clone, Copy, Debug)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum UnaryKind {
    Relu,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Sin,
    Cos,
    Abs,
    Sqrt,
    Square,
    Affine(f64, f64),
    ClampMin(f64),
    Clamp(f64, f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Dense {
        x: usize,
        w: usize,
        b: usize,
        act: Activation,
    },
    MatMul(usize, usize),
    Binary(BinaryKind, usize, usize),
    Unary(UnaryKind, usize),
    ConcatCols(Vec<usize>),
    SliceCols {
        a: usize,
        start: usize,
    },
    Reshape(usize),
    SelectRows {
        a: usize,
        rows: Vec<usize>,
    },
    RepeatRows {
        a: usize,
        times: usize,
    },
    SumRowGroups {
        a: usize,
        group: usize,
    },
    SumCols(usize),
    SumAll(usize),
    ExclusiveCumsum(usize),
    RowNorm(usize),
    PosEnc {
        a: usize,
        freqs: usize,
    },
    Bilinear {
        img: usize,
        coords: usize,
        height: usize,
        width: usize,
    },
}

struct Node {
    value: Rc<Matrix>,
    op: Op,
    tracked: bool,
}

/// Operation record for one forward/backward evaluation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.len())
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value())
    }
}

/// Gradients of a scalar output with respect to tracked leaves.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when the output does not depend on it.
    pub fn get(&self, var: Var<'_>) -> Option<&Matrix> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`, materialized as zeros when absent.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Matrix {
        match self.get(var) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = var.shape();
                Matrix::zeros(r, c)
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

    /// Leaf that receives gradients.
    pub fn variable(&self, value: Matrix) -> Var<'_> {
        self.push_leaf(value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Matrix) -> Var<'_> {
        self.push_leaf(value, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Matrix::scalar(value))
    }

    fn push_leaf(&self, value: Matrix, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            tracked,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, value: Matrix, op: Op, parents: &[usize]) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let tracked = parents.iter().any(|&p| nodes[p].tracked);
        nodes.push(Node {
            value: Rc::new(value),
            op,
            tracked,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Matrix> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        assert!(std::ptr::eq(output.tape, self), "output belongs to another tape");
        let nodes = self.nodes.borrow();
        let (r, c) = nodes[output.id].value.shape();
        assert_eq!((r, c), (1, 1), "backward requires a scalar output");
        let mut grads: Vec<Option<Matrix>> = vec![None; output.id + 1];
        if !nodes[output.id].tracked {
            return Gradients { grads };
        }
        grads[output.id] = Some(Matrix::scalar(1.0));
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            propagate(&nodes, id, g, &mut grads);
        }
        Gradients { grads }
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Matrix>], id: usize, g: Matrix) {
    if !nodes[id].tracked {
        return;
    }
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Sums a broadcast gradient back down to `shape`.
fn reduce_to(g: Matrix, shape: (usize, usize)) -> Matrix {
    if g.shape() == shape {
        return g;
    }
    let (gr, gc) = g.shape();
    let mut out = Matrix::zeros(shape.0, shape.1);
    for r in 0..gr {
        let orow = if shape.0 == 1 { 0 } else { r };
        for c in 0..gc {
            let ocol = if shape.1 == 1 { 0 } else { c };
            out.data[orow * shape.1 + ocol] += g.data[r * gc + c];
        }
    }
    out
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize, what: &str| -> usize {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("cannot broadcast {what}: {a:?} vs {b:?}")
        }
    };
    (dim(a.0, b.0, "rows"), dim(a.1, b.1, "cols"))
}

fn broadcast_zip(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    if a.shape() == b.shape() {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Matrix::from_vec(a.rows, a.cols, data);
    }
    let (rows, cols) = broadcast_shape(a.shape(), b.shape());
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let ar = if a.rows == 1 { 0 } else { r };
        let br = if b.rows == 1 { 0 } else { r };
        for c in 0..cols {
            let ac = if a.cols == 1 { 0 } else { c };
            let bc = if b.cols == 1 { 0 } else { c };
            data.push(f(a.data[ar * a.cols + ac], b.data[br * b.cols + bc]));
        }
    }
    Matrix::from_vec(rows, cols, data)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn unary_forward(kind: UnaryKind, x: f64) -> f64 {
    match kind {
        UnaryKind::Relu => x.max(0.0),
        UnaryKind::Sigmoid => sigmoid(x),
        UnaryKind::Softplus => softplus(x),
        UnaryKind::Exp => x.exp(),
        UnaryKind::Log => x.ln(),
        UnaryKind::Sin => x.sin(),
        UnaryKind::Cos => x.cos(),
        UnaryKind::Abs => x.abs(),
        UnaryKind::Sqrt => x.sqrt(),
        UnaryKind::Square => x * x,
        UnaryKind::Affine(a, b) => a * x + b,
        UnaryKind::ClampMin(lo) => x.max(lo),
        UnaryKind::Clamp(lo, hi) => x.clamp(lo, hi),
    }
}

/// Local derivative given input `x` and output `y`.
fn unary_derivative(kind: UnaryKind, x: f64, y: f64) -> f64 {
    match kind {
        UnaryKind::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        UnaryKind::Sigmoid => y * (1.0 - y),
        UnaryKind::Softplus => sigmoid(x),
        UnaryKind::Exp => y,
        UnaryKind::Log => 1.0 / x,
        UnaryKind::Sin => x.cos(),
        UnaryKind::Cos => -x.sin(),
        UnaryKind::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        UnaryKind::Sqrt => {
            if y > 0.0 {
                0.5 / y
            } else {
                0.0
            }
        }
        UnaryKind::Square => 2.0 * x,
        UnaryKind::Affine(a, _) => a,
        UnaryKind::ClampMin(lo) => {
            if x >= lo {
                1.0
            } else {
                0.0
            }
        }
        UnaryKind::Clamp(lo, hi) => {
            if x >= lo && x <= hi {
                1.0
            } else {
                0.0
            }
        }
    }
}

fn propagate(nodes: &[Node], id: usize, g: Matrix, grads: &mut [Option<Matrix>]) {
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => unreachable!(),
        Op::Dense { x, w, b, act } => {
            let (x, w, b) = (*x, *w, *b);
            let mut dz = g;
            if *act == Activation::Relu {
                for (d, &y) in dz.data.iter_mut().zip(&out.data) {
                    if y <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let xv = &nodes[x].value;
            let wv = &nodes[w].value;
            let (n, k, m) = (xv.rows, xv.cols, wv.cols);
            if nodes[x].tracked {
                let mut dx = Matrix::zeros(n, k);
                // dX = dZ · Wᵀ
                gemm(n, m, k, (&dz.data, m, 1), (&wv.data, 1, m), &mut dx.data);
                accumulate(nodes, grads, x, dx);
            }
            if nodes[w].tracked {
                let mut dw = Matrix::zeros(k, m);
                // dW = Xᵀ · dZ
                gemm(k, n, m, (&xv.data, 1, k), (&dz.data, m, 1), &mut dw.data);
                accumulate(nodes, grads, w, dw);
            }
            if nodes[b].tracked {
                accumulate(nodes, grads, b, reduce_to(dz, (1, m)));
            }
        }
        Op::MatMul(a, b) => {
            let (a, b) = (*a, *b);
            let av = &nodes[a].value;
            let bv = &nodes[b].value;
            let (n, k, m) = (av.rows, av.cols, bv.cols);
            if nodes[a].tracked {
                let mut da = Matrix::zeros(n, k);
                gemm(n, m, k, (&g.data, m, 1), (&bv.data, 1, m), &mut da.data);
                accumulate(nodes, grads, a, da);
            }
            if nodes[b].tracked {
                let mut db = Matrix::zeros(k, m);
                gemm(k, n, m, (&av.data, 1, k), (&g.data, m, 1), &mut db.data);
                accumulate(nodes, grads, b, db);
            }
        }
        Op::Binary(kind, a, b) => {
            let (a, b) = (*a, *b);
            let av = &nodes[a].value;
            let bv = &nodes[b].value;
            if nodes[a].tracked {
                let ga = match kind {
                    BinaryKind::Add | BinaryKind::Sub => g.clone(),
                    BinaryKind::Mul => broadcast_zip(&g, bv, |g, b| g * b),
                    BinaryKind::Div => broadcast_zip(&g, bv, |g, b| g / b),
                };
                accumulate(nodes, grads, a, reduce_to(ga, av.shape()));
            }
            if nodes[b].tracked {
                let gb = match kind {
                    BinaryKind::Add => g,
                    BinaryKind::Sub => g.map(|v| -v),
                    BinaryKind::Mul => broadcast_zip(&g, av, |g, a| g * a),
                    BinaryKind::Div => {
                        let ratio = broadcast_zip(out, bv, |y, b| y / b);
                        broadcast_zip(&g, &ratio, |g, r| -g * r)
                    }
                };
                accumulate(nodes, grads, b, reduce_to(gb, bv.shape()));
            }
        }
        Op::Unary(kind, a) => {
            let a = *a;
            let xv = &nodes[a].value;
            let mut ga = g;
            for ((d, &x), &y) in ga.data.iter_mut().zip(&xv.data).zip(&out.data) {
                *d *= unary_derivative(*kind, x, y);
            }
            accumulate(nodes, grads, a, ga);
        }
        Op::ConcatCols(parts) => {
            let mut offset = 0;
            for &p in parts {
                let pc = nodes[p].value.cols;
                if nodes[p].tracked {
                    let mut gp = Matrix::zeros(g.rows, pc);
                    for r in 0..g.rows {
                        gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + pc]);
                    }
                    accumulate(nodes, grads, p, gp);
                }
                offset += pc;
            }
        }
        Op::SliceCols { a, start } => {
            let (a, start) = (*a, *start);
            let ac = nodes[a].value.cols;
            let mut ga = Matrix::zeros(g.rows, ac);
            for r in 0..g.rows {
                ga.row_mut(r)[start..start + g.cols].copy_from_slice(g.row(r));
            }
            accumulate(nodes, grads, a, ga);
        }
        Op::Reshape(a) => {
            let (r, c) = nodes[*a].value.shape();
            accumulate(nodes, grads, *a, g.reshaped(r, c));
        }
        Op::SelectRows { a, rows } => {
            let (r, c) = nodes[*a].value.shape();
            let mut ga = Matrix::zeros(r, c);
            for (i, &src) in rows.iter().enumerate() {
                for (d, s) in ga.row_mut(src).iter_mut().zip(g.row(i)) {
                    *d += s;
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::RepeatRows { a, times } => {
            let (r, c) = nodes[*a].value.shape();
            let mut ga = Matrix::zeros(r, c);
            for i in 0..r {
                for j in 0..*times {
                    for (d, s) in ga.row_mut(i).iter_mut().zip(g.row(i * times + j)) {
                        *d += s;
                    }
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::SumRowGroups { a, group } => {
            let (r, c) = nodes[*a].value.shape();
            let mut ga = Matrix::zeros(r, c);
            for i in 0..r {
                ga.row_mut(i).copy_from_slice(g.row(i / group));
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::SumCols(a) => {
            let (r, c) = nodes[*a].value.shape();
            let ga = Matrix::from_fn(r, c, |i, _| g.data[i]);
            accumulate(nodes, grads, *a, ga);
        }
        Op::SumAll(a) => {
            let (r, c) = nodes[*a].value.shape();
            accumulate(nodes, grads, *a, Matrix::filled(r, c, g.data[0]));
        }
        Op::ExclusiveCumsum(a) => {
            let (r, c) = nodes[*a].value.shape();
            let mut ga = Matrix::zeros(r, c);
            for i in 0..r {
                let grow = g.row(i);
                let arow = ga.row_mut(i);
                let mut acc = 0.0;
                for j in (0..c).rev() {
                    arow[j] = acc;
                    acc += grow[j];
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::RowNorm(a) => {
            let xv = &nodes[*a].value;
            let mut ga = Matrix::zeros(xv.rows, xv.cols);
            for i in 0..xv.rows {
                let norm = out.data[i];
                if norm > 0.0 {
                    let scale = g.data[i] / norm;
                    for (d, &x) in ga.row_mut(i).iter_mut().zip(xv.row(i)) {
                        *d = scale * x;
                    }
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::PosEnc { a, freqs } => {
            let xv = &nodes[*a].value;
            let k = xv.cols;
            let mut ga = Matrix::zeros(xv.rows, k);
            for i in 0..xv.rows {
                let grow = g.row(i);
                let yrow = out.row(i);
                let arow = ga.row_mut(i);
                arow.copy_from_slice(&grow[..k]);
                for l in 0..*freqs {
                    let w = PI * (1u64 << l) as f64;
                    let sin_off = k * (1 + 2 * l);
                    let cos_off = sin_off + k;
                    for j in 0..k {
                        // d sin(wx) = w cos(wx), d cos(wx) = -w sin(wx)
                        arow[j] += w
                            * (grow[sin_off + j] * yrow[cos_off + j]
                                - grow[cos_off + j] * yrow[sin_off + j]);
                    }
                }
            }
            accumulate(nodes, grads, *a, ga);
        }
        Op::Bilinear {
            img,
            coords,
            height,
            width,
        } => {
            let (img, coords, h, w) = (*img, *coords, *height, *width);
            let iv = &nodes[img].value;
            let cv = &nodes[coords].value;
            let ch = iv.cols;
            let mut gi = nodes[img].tracked.then(|| Matrix::zeros(iv.rows, ch));
            let mut gc = nodes[coords].tracked.then(|| Matrix::zeros(cv.rows, 2));
            for n in 0..cv.rows {
                let s = BilinearStencil::new(cv.get(n, 0), cv.get(n, 1), h, w);
                let grow = g.row(n);
                if let Some(gi) = gi.as_mut() {
                    for (idx, wt) in s.taps() {
                        for (d, &gv) in gi.row_mut(idx).iter_mut().zip(grow) {
                            *d += wt * gv;
                        }
                    }
                }
                if let Some(gc) = gc.as_mut() {
                    let mut dx = 0.0;
                    let mut dy = 0.0;
                    for (c, &gv) in grow.iter().enumerate().take(ch) {
                        let p00 = iv.get(s.i00, c);
                        let p01 = iv.get(s.i01, c);
                        let p10 = iv.get(s.i10, c);
                        let p11 = iv.get(s.i11, c);
                        dx += gv * ((1.0 - s.fy) * (p01 - p00) + s.fy * (p11 - p10));
                        dy += gv * ((1.0 - s.fx) * (p10 - p00) + s.fx * (p11 - p01));
                    }
                    if s.x_free {
                        gc.set(n, 0, dx);
                    }
                    if s.y_free {
                        gc.set(n, 1, dy);
                    }
                }
            }
            if let Some(gi) = gi {
                accumulate(nodes, grads, img, gi);
            }
            if let Some(gc) = gc {
                accumulate(nodes, grads, coords, gc);
            }
        }
    }
}

/// Four-tap bilinear footprint with coordinates clamped into the image.
struct BilinearStencil {
    i00: usize,
    i01: usize,
    i10: usize,
    i11: usize,
    fx: f64,
    fy: f64,
    x_free: bool,
    y_free: bool,
}

impl BilinearStencil {
    fn new(x: f64, y: f64, height: usize, width: usize) -> Self {
        let axis = |v: f64, n: usize| -> (usize, usize, f64, bool) {
            let hi = (n - 1) as f64;
            let free = v >= 0.0 && v <= hi;
            let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, hi) };
            if n == 1 {
                return (0, 0, 0.0, false);
            }
            let i0 = (v.floor() as usize).min(n - 2);
            (i0, i0 + 1, v - i0 as f64, free)
        };
        let (x0, x1, fx, x_free) = axis(x, width);
        let (y0, y1, fy, y_free) = axis(y, height);
        Self {
            i00: y0 * width + x0,
            i01: y0 * width + x1,
            i10: y1 * width + x0,
            i11: y1 * width + x1,
            fx,
            fy,
            x_free,
            y_free,
        }
    }

    fn taps(&self) -> [(usize, f64); 4] {
        [
            (self.i00, (1.0 - self.fx) * (1.0 - self.fy)),
            (self.i01, self.fx * (1.0 - self.fy)),
            (self.i10, (1.0 - self.fx) * self.fy),
            (self.i11, self.fx * self.fy),
        ]
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Matrix> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    pub fn rows(&self) -> usize {
        self.shape().0
    }

    pub fn cols(&self) -> usize {
        self.shape().1
    }

    /// Value of a 1×1 variable.
    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn is_tracked(&self) -> bool {
        self.tape.nodes.borrow()[self.id].tracked
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    /// Fused affine layer `act(self · w + b)` with `b` a single row.
    pub fn dense(self, w: Var<'t>, b: Var<'t>, act: Activation) -> Var<'t> {
        self.same_tape(&w);
        self.same_tape(&b);
        let x = self.value();
        let wv = w.value();
        let bv = b.value();
        assert_eq!(x.cols, wv.rows, "dense input width mismatch");
        assert_eq!(bv.shape(), (1, wv.cols), "dense bias shape mismatch");
        let mut out = Matrix::zeros(x.rows, wv.cols);
        for r in 0..x.rows {
            out.row_mut(r).copy_from_slice(&bv.data);
        }
        gemm(
            x.rows,
            x.cols,
            wv.cols,
            (&x.data, x.cols, 1),
            (&wv.data, wv.cols, 1),
            &mut out.data,
        );
        if act == Activation::Relu {
            for v in &mut out.data {
                *v = v.max(0.0);
            }
        }
        self.tape.push(
            out,
            Op::Dense {
                x: self.id,
                w: w.id,
                b: b.id,
                act,
            },
            &[self.id, w.id, b.id],
        )
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        let out = self.value().matmul(&other.value());
        self.tape
            .push(out, Op::MatMul(self.id, other.id), &[self.id, other.id])
    }

    fn binary(self, other: Var<'t>, kind: BinaryKind) -> Var<'t> {
        self.same_tape(&other);
        let a = self.value();
        let b = other.value();
        let out = match kind {
            BinaryKind::Add => broadcast_zip(&a, &b, |x, y| x + y),
            BinaryKind::Sub => broadcast_zip(&a, &b, |x, y| x - y),
            BinaryKind::Mul => broadcast_zip(&a, &b, |x, y| x * y),
            BinaryKind::Div => broadcast_zip(&a, &b, |x, y| x / y),
        };
        self.tape
            .push(out, Op::Binary(kind, self.id, other.id), &[self.id, other.id])
    }

    fn unary(self, kind: UnaryKind) -> Var<'t> {
        let out = self.value().map(|x| unary_forward(kind, x));
        self.tape.push(out, Op::Unary(kind, self.id), &[self.id])
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(UnaryKind::Relu)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(UnaryKind::Softplus)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(UnaryKind::Exp)
    }

    pub fn ln(self) -> Var<'t> {
        self.unary(UnaryKind::Log)
    }

    pub fn sin(self) -> Var<'t> {
        self.unary(UnaryKind::Sin)
    }

    pub fn cos(self) -> Var<'t> {
        self.unary(UnaryKind::Cos)
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(UnaryKind::Abs)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.unary(UnaryKind::Sqrt)
    }

    pub fn square(self) -> Var<'t> {
        self.unary(UnaryKind::Square)
    }

    /// `scale * self + shift`, elementwise.
    pub fn affine(self, scale: f64, shift: f64) -> Var<'t> {
        self.unary(UnaryKind::Affine(scale, shift))
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        self.affine(factor, 0.0)
    }

    pub fn add_scalar(self, shift: f64) -> Var<'t> {
        self.affine(1.0, shift)
    }

    /// `1 - self`.
    pub fn one_minus(self) -> Var<'t> {
        self.affine(-1.0, 1.0)
    }

    /// Elementwise `max(self, lo)`; zero gradient where clamped.
    pub fn clamp_min(self, lo: f64) -> Var<'t> {
        self.unary(UnaryKind::ClampMin(lo))
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.unary(UnaryKind::Clamp(lo, hi))
    }

    /// Multiplies by a constant matrix (broadcasting allowed).
    pub fn mul_const(self, m: &Matrix) -> Var<'t> {
        let c = self.tape.constant(m.clone());
        self * c
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty());
        let tape = parts[0].tape;
        let values: Vec<Rc<Matrix>> = parts.iter().map(|p| p.value()).collect();
        let rows = values[0].rows;
        assert!(values.iter().all(|v| v.rows == rows), "concat row mismatch");
        let cols: usize = values.iter().map(|v| v.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for v in &values {
                data.extend_from_slice(v.row(r));
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        tape.push(Matrix::from_vec(rows, cols, data), Op::ConcatCols(ids.clone()), &ids)
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Var<'t> {
        let a = self.value();
        assert!(start < end && end <= a.cols, "slice out of range");
        let w = end - start;
        let mut out = Matrix::zeros(a.rows, w);
        for r in 0..a.rows {
            out.row_mut(r).copy_from_slice(&a.row(r)[start..end]);
        }
        self.tape
            .push(out, Op::SliceCols { a: self.id, start }, &[self.id])
    }

    pub fn col(self, c: usize) -> Var<'t> {
        self.slice_cols(c, c + 1)
    }

    pub fn reshape(self, rows: usize, cols: usize) -> Var<'t> {
        let out = (*self.value()).clone().reshaped(rows, cols);
        self.tape.push(out, Op::Reshape(self.id), &[self.id])
    }

    pub fn select_rows(self, rows: &[usize]) -> Var<'t> {
        let out = self.value().select_rows(rows);
        self.tape.push(
            out,
            Op::SelectRows {
                a: self.id,
                rows: rows.to_vec(),
            },
            &[self.id],
        )
    }

    /// Repeats each row `times` times consecutively.
    pub fn repeat_rows(self, times: usize) -> Var<'t> {
        let a = self.value();
        let mut data = Vec::with_capacity(a.len() * times);
        for r in 0..a.rows {
            for _ in 0..times {
                data.extend_from_slice(a.row(r));
            }
        }
        let out = Matrix::from_vec(a.rows * times, a.cols, data);
        self.tape
            .push(out, Op::RepeatRows { a: self.id, times }, &[self.id])
    }

    /// Sums consecutive groups of `group` rows.
    pub fn sum_row_groups(self, group: usize) -> Var<'t> {
        let a = self.value();
        assert!(group > 0 && a.rows.is_multiple_of(group), "row count not divisible by group");
        let mut out = Matrix::zeros(a.rows / group, a.cols);
        for r in 0..a.rows {
            for (d, s) in out.row_mut(r / group).iter_mut().zip(a.row(r)) {
                *d += s;
            }
        }
        self.tape
            .push(out, Op::SumRowGroups { a: self.id, group }, &[self.id])
    }

    /// Per-row sum, producing a column.
    pub fn sum_cols(self) -> Var<'t> {
        let a = self.value();
        let out = Matrix::from_fn(a.rows, 1, |r, _| a.row(r).iter().sum());
        self.tape.push(out, Op::SumCols(self.id), &[self.id])
    }

    pub fn sum(self) -> Var<'t> {
        let total = self.value().data.iter().sum();
        self.tape
            .push(Matrix::scalar(total), Op::SumAll(self.id), &[self.id])
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Row-wise exclusive prefix sum: `y[r, c] = Σ_{j<c} x[r, j]`.
    pub fn exclusive_cumsum(self) -> Var<'t> {
        let a = self.value();
        let mut out = Matrix::zeros(a.rows, a.cols);
        for r in 0..a.rows {
            let mut acc = 0.0;
            for (o, &x) in out.row_mut(r).iter_mut().zip(a.row(r)) {
                *o = acc;
                acc += x;
            }
        }
        self.tape.push(out, Op::ExclusiveCumsum(self.id), &[self.id])
    }

    /// Euclidean norm of each row; the gradient at a zero row is zero.
    pub fn row_norm(self) -> Var<'t> {
        let a = self.value();
        let out = Matrix::from_fn(a.rows, 1, |r, _| {
            a.row(r).iter().map(|v| v * v).sum::<f64>().sqrt()
        });
        self.tape.push(out, Op::RowNorm(self.id), &[self.id])
    }

    /// Sinusoidal encoding of every row; see [`crate::fields::positional_encode`].
    pub fn positional_encoding(self, freqs: usize) -> Var<'t> {
        let a = self.value();
        let k = a.cols;
        let width = k * (2 * freqs + 1);
        let mut out = Matrix::zeros(a.rows, width);
        for r in 0..a.rows {
            let x = a.row(r);
            let o = out.row_mut(r);
            o[..k].copy_from_slice(x);
            for l in 0..freqs {
                let w = PI * (1u64 << l) as f64;
                let sin_off = k * (1 + 2 * l);
                for j in 0..k {
                    let (s, c) = (w * x[j]).sin_cos();
                    o[sin_off + j] = s;
                    o[sin_off + k + j] = c;
                }
            }
        }
        self.tape.push(
            out,
            Op::PosEnc {
                a: self.id,
                freqs,
            },
            &[self.id],
        )
    }

    /// Samples the `height×width` image stored one pixel per row at the
    /// continuous `(x, y)` coordinates in `coords`, with bilinear weights.
    /// Coordinates are clamped to the image; clamped axes get no gradient.
    pub fn bilinear(self, coords: Var<'t>, height: usize, width: usize) -> Var<'t> {
        self.same_tape(&coords);
        let img = self.value();
        let cv = coords.value();
        assert_eq!(img.rows, height * width, "image rows must equal height*width");
        assert_eq!(cv.cols, 2, "coords must have two columns");
        assert!(height > 0 && width > 0);
        let ch = img.cols;
        let mut out = Matrix::zeros(cv.rows, ch);
        for n in 0..cv.rows {
            let s = BilinearStencil::new(cv.get(n, 0), cv.get(n, 1), height, width);
            let orow = out.row_mut(n);
            for (idx, wt) in s.taps() {
                if wt != 0.0 {
                    for (o, &p) in orow.iter_mut().zip(img.row(idx)) {
                        *o += wt * p;
                    }
                }
            }
        }
        self.tape.push(
            out,
            Op::Bilinear {
                img: self.id,
                coords: coords.id,
                height,
                width,
            },
            &[self.id, coords.id],
        )
    }
}

impl<'t> std::ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, BinaryKind::Add)
    }
}

impl<'t> std::ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, BinaryKind::Sub)
    }
}

impl<'t> std::ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, BinaryKind::Mul)
    }
}

impl<'t> std::ops::Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Var<'t>) -> Var<'t> {
        self.binary(rhs, BinaryKind::Div)
    }
}

impl<'t> std::ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Checks d(sum(f(x) ⊙ probe))/dx against central differences.
    fn check_unary_op(name: &str, x0: Matrix, f: impl for<'t> Fn(Var<'t>) -> Var<'t>) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let probe_shape = {
            let tape = Tape::new();
            f(tape.constant(x0.clone())).shape()
        };
        let probe = random(probe_shape.0, probe_shape.1, &mut rng);
        let eval = |x: &Matrix| -> f64 {
            let tape = Tape::new();
            let y = f(tape.constant(x.clone()));
            y.value().data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
        };
        let tape = Tape::new();
        let x = tape.variable(x0.clone());
        let p = tape.constant(probe.clone());
        let loss = (f(x) * p).sum();
        let grads = tape.backward(loss);
        let analytic = grads.get_or_zeros(x);
        let numeric = central_difference(|v| eval(&Matrix::from_vec(x0.rows, x0.cols, v.to_vec())), x0.data(), 1e-6);
        let err = relative_error(analytic.data(), &numeric);
        assert!(err < 1e-6, "{name}: relative error {err}");
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(4, 3, &mut rng);
        let pos = x.map(|v| v.abs() + 0.2);
        check_unary_op("sigmoid", x.clone(), |v| v.sigmoid());
        check_unary_op("softplus", x.clone(), |v| v.softplus());
        check_unary_op("exp", x.clone(), |v| v.exp());
        check_unary_op("sin", x.clone(), |v| v.sin());
        check_unary_op("cos", x.clone(), |v| v.cos());
        check_unary_op("square", x.clone(), |v| v.square());
        check_unary_op("affine", x.clone(), |v| v.affine(-2.5, 0.3));
        check_unary_op("ln", pos.clone(), |v| v.ln());
        check_unary_op("sqrt", pos.clone(), |v| v.sqrt());
        check_unary_op("abs", pos.map(|v| v - 0.1), |v| v.abs());
        check_unary_op("product", x.clone(), |v| v * v.sin());
        check_unary_op("quotient", pos.clone(), |v| v.sin() / v);
    }

    #[test]
    fn broadcasting_binary_ops_reduce_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let row = random(1, 3, &mut rng);
        let col = random(5, 1, &mut rng).map(|v| v + 2.0);
        let full = random(5, 3, &mut rng);
        let (r2, c2, f2) = (row.clone(), col.clone(), full.clone());
        check_unary_op("row-broadcast", full.clone(), move |v| {
            let t = v.tape();
            v * t.constant(r2.clone()) + t.constant(r2.clone())
        });
        check_unary_op("col-broadcast div", full.clone(), move |v| {
            let t = v.tape();
            v / t.constant(c2.clone())
        });
        check_unary_op("broadcast operand", row.clone(), move |v| {
            let t = v.tape();
            (t.constant(f2.clone()) - v) * v
        });
        let f3 = full.clone();
        check_unary_op("col operand", col, move |v| {
            let t = v.tape();
            t.constant(f3.clone()) / v
        });
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(6, 4, &mut rng);
        check_unary_op("concat/slice", x.clone(), |v| {
            Var::concat_cols(&[v.slice_cols(1, 3), v.sin(), v.col(0)])
        });
        check_unary_op("reshape", x.clone(), |v| v.reshape(3, 8).exp());
        check_unary_op("select", x.clone(), |v| v.select_rows(&[5, 0, 0, 2]));
        check_unary_op("repeat", x.clone(), |v| v.repeat_rows(3).sin());
        check_unary_op("groups", x.clone(), |v| v.sum_row_groups(2));
        check_unary_op("sum_cols", x.clone(), |v| v.sum_cols().square());
        check_unary_op("cumsum", x.clone(), |v| v.exclusive_cumsum().exp());
        check_unary_op("row_norm", x.clone(), |v| v.row_norm());
        check_unary_op("posenc", x.clone(), |v| v.positional_encoding(3));
        check_unary_op("mean", x.clone(), |v| v.square().mean());
    }

    #[test]
    fn dense_and_matmul_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(7, 5, &mut rng);
        let w = random(5, 4, &mut rng);
        let b = random(1, 4, &mut rng);
        let (w1, b1) = (w.clone(), b.clone());
        check_unary_op("dense wrt x", x.clone(), move |v| {
            let t = v.tape();
            v.dense(t.constant(w1.clone()), t.constant(b1.clone()), Activation::Relu)
        });
        let (x2, b2) = (x.clone(), b.clone());
        check_unary_op("dense wrt w", w.clone(), move |v| {
            let t = v.tape();
            t.constant(x2.clone())
                .dense(v, t.constant(b2.clone()), Activation::Identity)
                .sin()
        });
        let (x3, w3) = (x.clone(), w.clone());
        check_unary_op("dense wrt b", b, move |v| {
            let t = v.tape();
            t.constant(x3.clone()).dense(t.constant(w3.clone()), v, Activation::Relu)
        });
        let w4 = w.clone();
        check_unary_op("matmul", x, move |v| {
            let t = v.tape();
            v.matmul(t.constant(w4.clone())).square()
        });
    }

    #[test]
    fn bilinear_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = random(12, 3, &mut rng); // 3x4 image
        let coords = Matrix::from_rows(&[[0.3, 0.7], [2.6, 1.2], [1.5, 1.9], [0.1, 0.05]]);
        let c1 = coords.clone();
        check_unary_op("bilinear wrt image", img.clone(), move |v| {
            let t = v.tape();
            v.bilinear(t.constant(c1.clone()), 3, 4)
        });
        check_unary_op("bilinear wrt coords", coords, move |v| {
            let t = v.tape();
            t.constant(img.clone()).bilinear(v, 3, 4)
        });
    }

    #[test]
    fn bilinear_is_exact_at_integer_coordinates() {
        let img = Matrix::from_fn(6, 2, |r, c| (r * 10 + c) as f64 * 0.37);
        let tape = Tape::new();
        let coords: Vec<[f64; 2]> = (0..3)
            .flat_map(|x| (0..2).map(move |y| [x as f64, y as f64]))
            .collect();
        let out = tape
            .constant(img.clone())
            .bilinear(tape.constant(Matrix::from_rows(&coords)), 2, 3)
            .value();
        for (n, [x, y]) in coords.iter().enumerate() {
            let idx = *y as usize * 3 + *x as usize;
            assert_eq!(out.row(n), img.row(idx));
        }
    }

    #[test]
    fn untracked_branches_receive_no_gradient() {
        let tape = Tape::new();
        let a = tape.variable(Matrix::scalar(2.0));
        let c = tape.constant(Matrix::scalar(3.0));
        let loss = (a * c).sum();
        let grads = tape.backward(loss);
        assert_eq!(grads.get(a).unwrap().item(), 3.0);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::new();
        let a = tape.variable(Matrix::scalar(1.5));
        let loss = (a * a + a.scale(2.0)).sum();
        let g = tape.backward(loss);
        assert!((g.get(a).unwrap().item() - 5.0).abs() < 1e-15);
    }

    #[test]
    fn row_norm_gradient_is_zero_at_origin() {
        let tape = Tape::new();
        let a = tape.variable(Matrix::zeros(2, 3));
        let g = tape.backward(a.row_norm().sum());
        assert!(g.get(a).unwrap().data().iter().all(|&v| v == 0.0));
    }
}
