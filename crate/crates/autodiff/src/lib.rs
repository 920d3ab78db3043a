//! Tape-based reverse-mode automatic differentiation over dense `f64`
//! matrices.
//!
//! Every value on the tape is a 2-D array. Row vectors stand in for 1-D
//! values and `[1, 1]` arrays for scalars. A [`Tape`] owns the computation
//! graph for one forward/backward pass; [`Var`] is a copyable handle into
//! it. Parameters live outside the tape in a [`ParamStore`] and are bound
//! as leaves at the start of each step.

use std::cell::RefCell;

use ndarray::{concatenate, s, Array2, Axis};

mod store;
pub use store::{Adam, AdamConfig, GradMap, ParamSnapshot, ParamStore, Sgd};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    Add(usize, usize),
    /// `[s,k] + [1,k]`, broadcast over rows.
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// `[s,k] * [1,k]`, broadcast over rows.
    MulRow(usize, usize),
    /// `[s,k] * [s,1]`, broadcast over columns.
    MulCol(usize, usize),
    /// `[s,k] / [s,1]`, broadcast over columns.
    DivCol(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Exp(usize),
    MatMul(usize, usize),
    Transpose(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    Tanh(usize),
    Gelu(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
    },
    GatherRows {
        table: usize,
        idx: Vec<usize>,
    },
    Rows {
        x: usize,
        start: usize,
        len: usize,
    },
    Cols {
        x: usize,
        start: usize,
        len: usize,
    },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SumAll(usize),
    /// Row-wise sum, `[s,k] -> [s,1]`.
    SumCols(usize),
    /// `y[i,0] = x[i, targets[i]]`.
    PickPerRow {
        x: usize,
        targets: Vec<usize>,
    },
}

struct Inner {
    vals: Vec<Array2<f64>>,
    ops: Vec<Op>,
    grads: Vec<Option<Array2<f64>>>,
}

/// Growable computation graph for a single forward/backward pass.
pub struct Tape {
    inner: RefCell<Inner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: RefCell::new(Inner {
                vals: Vec::new(),
                ops: Vec::new(),
                grads: Vec::new(),
            }),
        }
    }

    fn push(&self, val: Array2<f64>, op: Op) -> Var {
        let mut inner = self.inner.borrow_mut();
        inner.vals.push(val);
        inner.ops.push(op);
        inner.grads.push(None);
        Var(inner.vals.len() - 1)
    }

    /// Register a leaf value (parameter or constant input).
    pub fn leaf(&self, val: Array2<f64>) -> Var {
        self.push(val, Op::Leaf)
    }

    /// Scalar leaf, shape `[1,1]`.
    pub fn scalar(&self, v: f64) -> Var {
        self.leaf(Array2::from_elem((1, 1), v))
    }

    pub fn value(&self, v: Var) -> Array2<f64> {
        self.inner.borrow().vals[v.0].clone()
    }

    /// Value of a `[1,1]` node as `f64`.
    pub fn scalar_value(&self, v: Var) -> f64 {
        let inner = self.inner.borrow();
        let a = &inner.vals[v.0];
        assert_eq!(a.dim(), (1, 1), "scalar_value on non-scalar node");
        a[(0, 0)]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.inner.borrow().vals[v.0].dim()
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let (va, vb) = self.two(a, b);
        assert_eq!(va.dim(), vb.dim(), "add: shape mismatch");
        self.push(&va + &vb, Op::Add(a.0, b.0))
    }

    pub fn add_row(&self, a: Var, b: Var) -> Var {
        let (va, vb) = self.two(a, b);
        assert_eq!(vb.nrows(), 1, "add_row: rhs must be a row vector");
        assert_eq!(va.ncols(), vb.ncols(), "add_row: width mismatch");
        self.push(&va + &vb, Op::AddRow(a.0, b.0))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let (va, vb) = self.two(a, b);
        assert_eq!(va.dim(), vb.dim(), "sub: shape mismatch");
        self.push(&va - &vb, Op::Sub(a.0, b.0))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = self.two(a, b);
        assert_eq!(va.dim(), vb.dim(), "mul: shape mismatch");
        self.push(&va * &vb, Op::Mul(a.0, b.0))
    }

    pub fn mul_row(&self, a: Var, b: Var) -> Var {
        let (va, vb) = self.two(a, b);
        assert_eq!(vb.nrows(), 1, "mul_row: rhs must be a row vector");
        assert_eq!(va.ncols(), vb.ncols(), "mul_row: width mismatch");
        self.push(&va * &vb, Op::MulRow(a.0, b.0))
    }

    pub fn mul_col(&self, a: Var, b: Var) -> Var {
        let (va, vb) = self.two(a, b);
        assert_eq!(vb.ncols(), 1, "mul_col: rhs must be a column vector");
        assert_eq!(va.nrows(), vb.nrows(), "mul_col: height mismatch");
        self.push(&va * &vb, Op::MulCol(a.0, b.0))
    }

    pub fn div_col(&self, a: Var, b: Var) -> Var {
        let (va, vb) = self.two(a, b);
        assert_eq!(vb.ncols(), 1, "div_col: rhs must be a column vector");
        assert_eq!(va.nrows(), vb.nrows(), "div_col: height mismatch");
        self.push(&va / &vb, Op::DivCol(a.0, b.0))
    }

    pub fn neg(&self, a: Var) -> Var {
        let va = self.value(a);
        self.push(-va, Op::Neg(a.0))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let va = self.value(a);
        self.push(va * c, Op::Scale(a.0, c))
    }

    pub fn exp(&self, a: Var) -> Var {
        let va = self.value(a);
        self.push(va.mapv(f64::exp), Op::Exp(a.0))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (va, vb) = self.two(a, b);
        assert_eq!(va.ncols(), vb.nrows(), "matmul: inner dim mismatch");
        self.push(va.dot(&vb), Op::MatMul(a.0, b.0))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let va = self.value(a);
        self.push(va.t().to_owned(), Op::Transpose(a.0))
    }

    pub fn softmax_rows(&self, a: Var) -> Var {
        let va = self.value(a);
        self.push(softmax_rows(&va), Op::SoftmaxRows(a.0))
    }

    pub fn log_softmax_rows(&self, a: Var) -> Var {
        let va = self.value(a);
        self.push(log_softmax_rows(&va), Op::LogSoftmaxRows(a.0))
    }

    pub fn tanh(&self, a: Var) -> Var {
        let va = self.value(a);
        self.push(va.mapv(f64::tanh), Op::Tanh(a.0))
    }

    pub fn gelu(&self, a: Var) -> Var {
        let va = self.value(a);
        self.push(va.mapv(gelu), Op::Gelu(a.0))
    }

    /// Row-wise layer normalization with learnable `gamma`/`beta` (`[1,d]`).
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Var {
        let vx = self.value(x);
        let (vg, vb) = self.two(gamma, beta);
        assert_eq!(vg.dim(), (1, vx.ncols()), "layer_norm: gamma shape");
        assert_eq!(vb.dim(), (1, vx.ncols()), "layer_norm: beta shape");
        let xhat = normalize_rows(&vx);
        let y = &xhat * &vg + &vb;
        self.push(
            y,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
            },
        )
    }

    pub fn gather_rows(&self, table: Var, idx: &[usize]) -> Var {
        let vt = self.value(table);
        let mut out = Array2::zeros((idx.len(), vt.ncols()));
        for (i, &r) in idx.iter().enumerate() {
            assert!(r < vt.nrows(), "gather_rows: index out of range");
            out.row_mut(i).assign(&vt.row(r));
        }
        self.push(
            out,
            Op::GatherRows {
                table: table.0,
                idx: idx.to_vec(),
            },
        )
    }

    pub fn rows(&self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        assert!(start + len <= vx.nrows(), "rows: slice out of range");
        let out = vx.slice(s![start..start + len, ..]).to_owned();
        self.push(out, Op::Rows { x: x.0, start, len })
    }

    pub fn cols(&self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.value(x);
        assert!(start + len <= vx.ncols(), "cols: slice out of range");
        let out = vx.slice(s![.., start..start + len]).to_owned();
        self.push(out, Op::Cols { x: x.0, start, len })
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let vals: Vec<Array2<f64>> = parts.iter().map(|p| self.value(*p)).collect();
        let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
        let out = concatenate(Axis(0), &views).expect("concat_rows: width mismatch");
        self.push(out, Op::ConcatRows(parts.iter().map(|p| p.0).collect()))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let vals: Vec<Array2<f64>> = parts.iter().map(|p| self.value(*p)).collect();
        let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
        let out = concatenate(Axis(1), &views).expect("concat_cols: height mismatch");
        self.push(out, Op::ConcatCols(parts.iter().map(|p| p.0).collect()))
    }

    pub fn sum_all(&self, a: Var) -> Var {
        let va = self.value(a);
        self.push(Array2::from_elem((1, 1), va.sum()), Op::SumAll(a.0))
    }

    pub fn sum_cols(&self, a: Var) -> Var {
        let va = self.value(a);
        let out = va.sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(out, Op::SumCols(a.0))
    }

    pub fn pick_per_row(&self, x: Var, targets: &[usize]) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.nrows(), targets.len(), "pick_per_row: length mismatch");
        let mut out = Array2::zeros((targets.len(), 1));
        for (i, &t) in targets.iter().enumerate() {
            assert!(t < vx.ncols(), "pick_per_row: target out of range");
            out[(i, 0)] = vx[(i, t)];
        }
        self.push(
            out,
            Op::PickPerRow {
                x: x.0,
                targets: targets.to_vec(),
            },
        )
    }

    /// Mean of all entries, `[1,1]`.
    pub fn mean_all(&self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let s = self.sum_all(a);
        self.scale(s, 1.0 / (r * c) as f64)
    }

    fn two(&self, a: Var, b: Var) -> (Array2<f64>, Array2<f64>) {
        let inner = self.inner.borrow();
        (inner.vals[a.0].clone(), inner.vals[b.0].clone())
    }

    /// Run the backward pass from a scalar root.
    pub fn backward(&self, root: Var) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(
            inner.vals[root.0].dim(),
            (1, 1),
            "backward: root must be scalar"
        );
        inner.grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));

        let Inner { vals, ops, grads } = &mut *inner;
        for i in (0..=root.0).rev() {
            let g = match &grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            match &ops[i] {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    add_grad(grads, *a, &g);
                    add_grad(grads, *b, &g);
                }
                Op::AddRow(a, b) => {
                    add_grad(grads, *a, &g);
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    add_grad(grads, *b, &gb);
                }
                Op::Sub(a, b) => {
                    add_grad(grads, *a, &g);
                    add_grad(grads, *b, &(-&g));
                }
                Op::Mul(a, b) => {
                    add_grad(grads, *a, &(&g * &vals[*b]));
                    add_grad(grads, *b, &(&g * &vals[*a]));
                }
                Op::MulRow(a, b) => {
                    add_grad(grads, *a, &(&g * &vals[*b]));
                    let gb = (&g * &vals[*a]).sum_axis(Axis(0)).insert_axis(Axis(0));
                    add_grad(grads, *b, &gb);
                }
                Op::MulCol(a, b) => {
                    add_grad(grads, *a, &(&g * &vals[*b]));
                    let gb = (&g * &vals[*a]).sum_axis(Axis(1)).insert_axis(Axis(1));
                    add_grad(grads, *b, &gb);
                }
                Op::DivCol(a, b) => {
                    let vb = &vals[*b];
                    add_grad(grads, *a, &(&g / vb));
                    let gb = (&g * &vals[*a] / (vb * vb))
                        .sum_axis(Axis(1))
                        .insert_axis(Axis(1));
                    add_grad(grads, *b, &(-gb));
                }
                Op::Neg(a) => add_grad(grads, *a, &(-&g)),
                Op::Scale(a, c) => add_grad(grads, *a, &(&g * *c)),
                Op::Exp(a) => add_grad(grads, *a, &(&g * &vals[i])),
                Op::MatMul(a, b) => {
                    let ga = g.dot(&vals[*b].t());
                    let gb = vals[*a].t().dot(&g);
                    add_grad(grads, *a, &ga);
                    add_grad(grads, *b, &gb);
                }
                Op::Transpose(a) => add_grad(grads, *a, &g.t().to_owned()),
                Op::SoftmaxRows(a) => {
                    let y = &vals[i];
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    add_grad(grads, *a, &(y * &(&g - &dot)));
                }
                Op::LogSoftmaxRows(a) => {
                    let sm = vals[i].mapv(f64::exp);
                    let rows = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    add_grad(grads, *a, &(&g - &(sm * &rows)));
                }
                Op::Tanh(a) => {
                    let y = &vals[i];
                    add_grad(grads, *a, &(&g * &y.mapv(|t| 1.0 - t * t)));
                }
                Op::Gelu(a) => {
                    let dx = vals[*a].mapv(gelu_prime);
                    add_grad(grads, *a, &(&g * &dx));
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let vx = &vals[*x];
                    let xhat = normalize_rows(vx);
                    let d = vx.ncols() as f64;
                    let g_gamma = (&g * &xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let g_beta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &g * &vals[*gamma];
                    let mean_dxhat = dxhat.sum_axis(Axis(1)).insert_axis(Axis(1)) / d;
                    let mean_dxhat_xhat =
                        (&dxhat * &xhat).sum_axis(Axis(1)).insert_axis(Axis(1)) / d;
                    let inv_std = row_inv_std(vx);
                    let dx = (&dxhat - &mean_dxhat - &(&xhat * &mean_dxhat_xhat)) * &inv_std;
                    add_grad(grads, *x, &dx);
                    add_grad(grads, *gamma, &g_gamma);
                    add_grad(grads, *beta, &g_beta);
                }
                Op::GatherRows { table, idx } => {
                    let cols = vals[*table].ncols();
                    ensure_grad(grads, *table, vals[*table].dim());
                    let gt = grads[*table].as_mut().unwrap();
                    for (r, &src) in idx.iter().enumerate() {
                        for c in 0..cols {
                            gt[(src, c)] += g[(r, c)];
                        }
                    }
                }
                Op::Rows { x, start, len } => {
                    ensure_grad(grads, *x, vals[*x].dim());
                    let gx = grads[*x].as_mut().unwrap();
                    let mut slice = gx.slice_mut(s![*start..*start + *len, ..]);
                    slice += &g;
                }
                Op::Cols { x, start, len } => {
                    ensure_grad(grads, *x, vals[*x].dim());
                    let gx = grads[*x].as_mut().unwrap();
                    let mut slice = gx.slice_mut(s![.., *start..*start + *len]);
                    slice += &g;
                }
                Op::ConcatRows(parts) => {
                    let mut r0 = 0;
                    for &p in parts {
                        let rows = vals[p].nrows();
                        let gp = g.slice(s![r0..r0 + rows, ..]).to_owned();
                        add_grad(grads, p, &gp);
                        r0 += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut c0 = 0;
                    for &p in parts {
                        let cols = vals[p].ncols();
                        let gp = g.slice(s![.., c0..c0 + cols]).to_owned();
                        add_grad(grads, p, &gp);
                        c0 += cols;
                    }
                }
                Op::SumAll(a) => {
                    let ga = Array2::from_elem(vals[*a].dim(), g[(0, 0)]);
                    add_grad(grads, *a, &ga);
                }
                Op::SumCols(a) => {
                    let ones = Array2::from_elem((1, vals[*a].ncols()), 1.0);
                    add_grad(grads, *a, &g.dot(&ones));
                }
                Op::PickPerRow { x, targets } => {
                    ensure_grad(grads, *x, vals[*x].dim());
                    let gx = grads[*x].as_mut().unwrap();
                    for (r, &t) in targets.iter().enumerate() {
                        gx[(r, t)] += g[(r, 0)];
                    }
                }
            }
        }
    }

    /// Accumulated gradient of a node, if any path reached it.
    pub fn grad(&self, v: Var) -> Option<Array2<f64>> {
        self.inner.borrow().grads[v.0].clone()
    }
}

fn add_grad(grads: &mut [Option<Array2<f64>>], idx: usize, delta: &Array2<f64>) {
    match &mut grads[idx] {
        Some(g) => *g += delta,
        None => grads[idx] = Some(delta.clone()),
    }
}

fn ensure_grad(grads: &mut [Option<Array2<f64>>], idx: usize, dim: (usize, usize)) {
    if grads[idx].is_none() {
        grads[idx] = Some(Array2::zeros(dim));
    }
}

fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum: f64 = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn log_softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        row.mapv_inplace(|v| v - lse);
    }
    out
}

fn normalize_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let d = row.len() as f64;
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    out
}

fn row_inv_std(x: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((x.nrows(), 1));
    for (i, row) in x.rows().into_iter().enumerate() {
        let d = row.len() as f64;
        let mean = row.sum() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        out[(i, 0)] = 1.0 / (var + LN_EPS).sqrt();
    }
    out
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central finite-difference check of `f`'s gradient w.r.t. every
    /// entry of every input.
    fn fd_check(inputs: &[Array2<f64>], f: impl Fn(&Tape, &[Var]) -> Var, tol: f64) {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
        let out = f(&tape, &vars);
        tape.backward(out);
        let analytics: Vec<Array2<f64>> = vars
            .iter()
            .zip(inputs)
            .map(|(v, a)| tape.grad(*v).unwrap_or_else(|| Array2::zeros(a.dim())))
            .collect();

        let h = 1e-5;
        for (k, input) in inputs.iter().enumerate() {
            for r in 0..input.nrows() {
                for c in 0..input.ncols() {
                    let eval = |delta: f64| {
                        let mut shifted: Vec<Array2<f64>> = inputs.to_vec();
                        shifted[k][(r, c)] += delta;
                        let t = Tape::new();
                        let vs: Vec<Var> = shifted.iter().map(|a| t.leaf(a.clone())).collect();
                        t.scalar_value(f(&t, &vs))
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    let an = analytics[k][(r, c)];
                    let denom = fd.abs().max(an.abs()).max(1e-8);
                    assert!(
                        (fd - an).abs() / denom < tol,
                        "input {k} entry ({r},{c}): fd={fd:.8e} analytic={an:.8e}"
                    );
                }
            }
        }
    }

    #[test]
    fn grad_add_mul_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_mat(&mut rng, 3, 4);
        let b = rand_mat(&mut rng, 3, 4);
        fd_check(&[a, b], |t, v| {
            let s = t.add(v[0], v[1]);
            let m = t.mul(s, v[0]);
            let sc = t.scale(m, 0.7);
            t.sum_all(sc)
        }, 1e-6);
    }

    #[test]
    fn grad_broadcast_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_mat(&mut rng, 4, 3);
        let row = rand_mat(&mut rng, 1, 3);
        let col = rand_mat(&mut rng, 4, 1).mapv(|v| v + 2.5); // keep away from 0 for div
        fd_check(&[a, row, col], |t, v| {
            let x = t.add_row(v[0], v[1]);
            let x = t.mul_row(x, v[1]);
            let x = t.mul_col(x, v[2]);
            let x = t.div_col(x, v[2]);
            t.sum_all(x)
        }, 1e-5);
    }

    #[test]
    fn grad_matmul_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_mat(&mut rng, 3, 5);
        let b = rand_mat(&mut rng, 5, 2);
        fd_check(&[a, b], |t, v| {
            let m = t.matmul(v[0], v[1]);
            let mt = t.transpose(m);
            let sq = t.mul(mt, mt);
            t.sum_all(sq)
        }, 1e-6);
    }

    #[test]
    fn grad_softmax_log_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_mat(&mut rng, 3, 6);
        let w = rand_mat(&mut rng, 3, 6);
        fd_check(&[a.clone(), w.clone()], |t, v| {
            let sm = t.softmax_rows(v[0]);
            let weighted = t.mul(sm, v[1]);
            t.sum_all(weighted)
        }, 1e-5);
        fd_check(&[a, w], |t, v| {
            let ls = t.log_softmax_rows(v[0]);
            let weighted = t.mul(ls, v[1]);
            t.sum_all(weighted)
        }, 1e-5);
    }

    #[test]
    fn grad_activations() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_mat(&mut rng, 4, 4);
        fd_check(&[a.clone()], |t, v| {
            let y = t.tanh(v[0]);
            t.sum_all(y)
        }, 1e-6);
        fd_check(&[a.clone()], |t, v| {
            let y = t.gelu(v[0]);
            t.sum_all(y)
        }, 1e-5);
        fd_check(&[a], |t, v| {
            let y = t.exp(v[0]);
            t.sum_all(y)
        }, 1e-6);
    }

    #[test]
    fn grad_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_mat(&mut rng, 3, 8);
        let gamma = rand_mat(&mut rng, 1, 8);
        let beta = rand_mat(&mut rng, 1, 8);
        let w = rand_mat(&mut rng, 3, 8);
        fd_check(&[x, gamma, beta, w], |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2]);
            let weighted = t.mul(y, v[3]);
            t.sum_all(weighted)
        }, 1e-4);
    }

    #[test]
    fn grad_gather_slice_concat_pick() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let table = rand_mat(&mut rng, 6, 3);
        let other = rand_mat(&mut rng, 4, 3);
        fd_check(&[table, other], |t, v| {
            let g = t.gather_rows(v[0], &[0, 2, 2, 5]);
            let x = t.add(g, v[1]);
            let top = t.rows(x, 0, 2);
            let bottom = t.rows(x, 2, 2);
            let cat = t.concat_rows(&[top, bottom]);
            let left = t.cols(cat, 0, 2);
            let right = t.cols(cat, 2, 1);
            let cat2 = t.concat_cols(&[left, right]);
            let picked = t.pick_per_row(cat2, &[0, 1, 2, 0]);
            t.sum_all(picked)
        }, 1e-6);
    }

    #[test]
    fn grad_sum_cols_div_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let scores = rand_mat(&mut rng, 3, 5);
        let bias = rand_mat(&mut rng, 1, 5).mapv(|v| v.abs() + 0.5);
        let value = rand_mat(&mut rng, 5, 2);
        // biased-attention shaped composition: softmax, multiply by a
        // positive row bias, renormalize rows, weighted sum.
        fd_check(&[scores, bias, value], |t, v| {
            let probs = t.softmax_rows(v[0]);
            let biased = t.mul_row(probs, v[1]);
            let sums = t.sum_cols(biased);
            let normed = t.div_col(biased, sums);
            let out = t.matmul(normed, v[2]);
            t.sum_all(out)
        }, 1e-5);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let a = rand_mat(&mut rng, 4, 7);
            let sm = softmax_rows(&a);
            for row in sm.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grad_accumulates_over_reuse() {
        // the same leaf used twice must receive both contributions
        let a = Array2::from_elem((1, 1), 3.0);
        let t = Tape::new();
        let v = t.leaf(a);
        let sq = t.mul(v, v);
        t.backward(sq);
        let g = t.grad(v).unwrap();
        assert!((g[(0, 0)] - 6.0).abs() < 1e-12);
    }
}
