//! A small reverse-mode autodiff tape over dense `f64` matrices.
//!
//! Every forward pass records its operations on a fresh [`Tape`]; calling
//! [`Tape::backward`] with a seed gradient accumulates parameter gradients
//! into a [`ParamSet`]-shaped buffer. Row vectors are `1 x c` matrices.

use ndarray::{s, Array2, Axis};

use super::params::ParamSet;

pub type Mat = Array2<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(usize),
    /// Rows of a parameter table (embedding lookup).
    Gather { param: usize, rows: Vec<usize> },
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Scale(Var, f64),
    SoftmaxRows(Var),
    /// Row-wise normalization without affine terms.
    Normalize { x: Var, inv_std: Vec<f64> },
    Gelu(Var),
    ColSlice { x: Var, start: usize },
    ColConcat(Vec<Var>),
    MeanRows(Var),
    Row { x: Var, row: usize },
    Dropout { x: Var, mask: Mat },
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const LN_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn param(&mut self, params: &ParamSet, idx: usize) -> Var {
        self.push(params.tensor(idx).clone(), Op::Param(idx))
    }

    pub fn gather(&mut self, params: &ParamSet, idx: usize, rows: &[usize]) -> Var {
        let table = params.tensor(idx);
        let mut out = Mat::zeros((rows.len(), table.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).assign(&table.row(r));
        }
        self.push(
            out,
            Op::Gather {
                param: idx,
                rows: rows.to_vec(),
            },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) * self.value(row);
        self.push(v, Op::MulRow(a, row))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row /= sum;
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn normalize(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let c = x.ncols() as f64;
        let mut v = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in v.rows_mut() {
            let mean = row.sum() / c;
            row.mapv_inplace(|t| t - mean);
            let var = row.iter().map(|t| t * t).sum::<f64>() / c;
            let k = 1.0 / (var + LN_EPS).sqrt();
            row *= k;
            inv_std.push(k);
        }
        self.push(v, Op::Normalize { x: a, inv_std })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .mapv(|x| 0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh()));
        self.push(v, Op::Gelu(a))
    }

    pub fn col_slice(&mut self, a: Var, start: usize, width: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + width]).to_owned();
        self.push(v, Op::ColSlice { x: a, start })
    }

    pub fn col_concat(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts match");
        self.push(v, Op::ColConcat(parts.to_vec()))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = x.mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
        self.push(v, Op::MeanRows(a))
    }

    pub fn row(&mut self, a: Var, row: usize) -> Var {
        let v = self.value(a).slice(s![row..row + 1, ..]).to_owned();
        self.push(v, Op::Row { x: a, row })
    }

    /// `mask` holds 0 for dropped entries and `1/(1-p)` for kept ones.
    pub fn dropout(&mut self, a: Var, mask: Mat) -> Var {
        let v = self.value(a) * &mask;
        self.push(v, Op::Dropout { x: a, mask })
    }

    /// Back-propagates `seed` (shaped like `root`) and adds the resulting
    /// parameter gradients into `grads`.
    pub fn backward(&self, root: Var, seed: &Mat, grads: &mut ParamSet) {
        let mut adj: Vec<Option<Mat>> = (0..=root.0).map(|_| None).collect();
        adj[root.0] = Some(seed.clone());

        fn acc(adj: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut adj[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param(p) => {
                    *grads.tensor_mut(*p) += &g;
                }
                Op::Gather { param, rows } => {
                    let table = grads.tensor_mut(*param);
                    for (k, &r) in rows.iter().enumerate() {
                        let mut dst = table.row_mut(r);
                        dst += &g.row(k);
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *b, g.clone());
                    acc(&mut adj, *a, g);
                }
                Op::AddRow(a, r) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut adj, *r, gr);
                    acc(&mut adj, *a, g);
                }
                Op::MulRow(a, r) => {
                    let av = self.value(*a);
                    let rv = self.value(*r);
                    let gr = (&g * av).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut adj, *r, gr);
                    acc(&mut adj, *a, &g * rv);
                }
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    acc(&mut adj, *a, g.dot(&bv.t()));
                    acc(&mut adj, *b, av.t().dot(&g));
                }
                Op::MatMulT(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    acc(&mut adj, *a, g.dot(bv));
                    acc(&mut adj, *b, g.t().dot(av));
                }
                Op::Scale(a, k) => acc(&mut adj, *a, g * *k),
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = y * &g;
                    for (mut row, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let dot = row.sum();
                        row.zip_mut_with(&yrow, |r, &yy| *r -= yy * dot);
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::Normalize { x, inv_std } => {
                    let y = &node.value;
                    let c = y.ncols() as f64;
                    let mut ga = Mat::zeros(y.raw_dim());
                    for (r, k) in inv_std.iter().enumerate() {
                        let gr = g.row(r);
                        let yr = y.row(r);
                        let mean_g = gr.sum() / c;
                        let mean_gy = gr.dot(&yr) / c;
                        for j in 0..y.ncols() {
                            ga[(r, j)] = k * (gr[j] - mean_g - yr[j] * mean_gy);
                        }
                    }
                    acc(&mut adj, *x, ga);
                }
                Op::Gelu(a) => {
                    let xv = self.value(*a);
                    let mut ga = g;
                    ga.zip_mut_with(xv, |gg, &x| {
                        let u = GELU_K * (x + GELU_C * x * x * x);
                        let t = u.tanh();
                        let du = GELU_K * (1.0 + 3.0 * GELU_C * x * x);
                        *gg *= 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                    });
                    acc(&mut adj, *a, ga);
                }
                Op::ColSlice { x, start } => {
                    let xv = self.value(*x);
                    let mut ga = Mat::zeros(xv.raw_dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut adj, *x, ga);
                }
                Op::ColConcat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        acc(&mut adj, p, g.slice(s![.., off..off + w]).to_owned());
                        off += w;
                    }
                }
                Op::MeanRows(a) => {
                    let rows = self.value(*a).nrows();
                    let mut ga = Mat::zeros((rows, g.ncols()));
                    let share = &g.row(0) / rows as f64;
                    for mut r in ga.rows_mut() {
                        r.assign(&share);
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::Row { x, row } => {
                    let mut ga = Mat::zeros(self.value(*x).raw_dim());
                    ga.row_mut(*row).assign(&g.row(0));
                    acc(&mut adj, *x, ga);
                }
                Op::Dropout { x, mask } => acc(&mut adj, *x, g * mask),
            }
        }
    }
}
