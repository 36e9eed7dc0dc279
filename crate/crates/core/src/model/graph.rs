//! Reverse-mode differentiation over dense row-major matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and
//! accumulates parameter gradients into a [`Grads`] buffer. Graphs are cheap
//! and built per example; parameters are read through [`Params`].

use std::fmt::Debug;
use std::ops::AddAssign;

use ndarray::{s, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive};

/// Floating point type the engine runs on (`f32` for training, `f64` for
/// finite-difference checks).
pub trait Scalar:
    LinalgScalar + Float + FromPrimitive + ScalarOperand + AddAssign + Debug + Default + Send + Sync + 'static
{
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

pub type Mat<F> = Array2<F>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<F> {
    names: Vec<String>,
    values: Vec<Mat<F>>,
}

impl<F: Scalar> Default for Params<F> {
    fn default() -> Self {
        Params {
            names: Vec::new(),
            values: Vec::new(),
        }
    }
}

impl<F: Scalar> Params<F> {
    pub fn add(&mut self, name: impl Into<String>, value: Mat<F>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Mat<F> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat<F> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn zeros_like(&self) -> Grads<F> {
        Grads(self.values.iter().map(|v| Mat::zeros(v.raw_dim())).collect())
    }

    pub fn cast<G: Scalar>(&self) -> Params<G> {
        Params {
            names: self.names.clone(),
            values: self.values.iter().map(|v| v.mapv(|x| G::of(x.as_f64()))).collect(),
        }
    }
}

/// Gradient buffers aligned with a [`Params`] store.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<F>(pub Vec<Mat<F>>);

impl<F: Scalar> Grads<F> {
    pub fn get(&self, id: ParamId) -> &Mat<F> {
        &self.0[id.0]
    }

    pub fn add_assign(&mut self, other: &Grads<F>) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    pub fn norm(&self) -> f64 {
        self.0
            .iter()
            .flat_map(|m| m.iter())
            .map(|&x| {
                let x = x.as_f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, by: F) {
        for m in &mut self.0 {
            m.mapv_inplace(|x| x * by);
        }
    }

    pub fn zero(&mut self, id: ParamId) {
        self.0[id.0].fill(F::zero());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mask {
    None,
    /// Row `i` sees columns `0..=i`.
    Causal,
}

enum Op<F> {
    Constant,
    Param(ParamId),
    Rows {
        table: ParamId,
        idx: Vec<usize>,
    },
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, F),
    MulConst(Var, Mat<F>),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat<F>,
        inv_std: Vec<F>,
    },
    Softmax(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    WeightedNll {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<F>,
        probs: Mat<F>,
    },
}

struct Node<F> {
    value: Mat<F>,
    op: Op<F>,
}

pub struct Graph<'p, F> {
    params: &'p Params<F>,
    nodes: Vec<Node<F>>,
}

const LN_EPS: f64 = 1e-5;

impl<'p, F: Scalar> Graph<'p, F> {
    pub fn new(params: &'p Params<F>) -> Self {
        Graph {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p Params<F> {
        self.params
    }

    fn push(&mut self, value: Mat<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat<F> {
        &self.nodes[v.0].value
    }

    pub fn constant(&mut self, value: Mat<F>) -> Var {
        self.push(value, Op::Constant)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let value = self.params.get(id).clone();
        self.push(value, Op::Param(id))
    }

    /// Selects rows of a parameter table (embedding lookup).
    pub fn rows(&mut self, table: ParamId, idx: &[usize]) -> Var {
        let t = self.params.get(table);
        let mut out = Mat::zeros((idx.len(), t.ncols()));
        for (mut row, &i) in out.rows_mut().into_iter().zip(idx) {
            row.assign(&t.row(i));
        }
        self.push(
            out,
            Op::Rows {
                table,
                idx: idx.to_vec(),
            },
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// Adds a `1 × n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, by: F) -> Var {
        let v = self.value(a) * by;
        self.push(v, Op::Scale(a, by))
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Mat<F>) -> Var {
        let v = self.value(a) * &c;
        self.push(v, Op::MulConst(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| if x > F::zero() { x } else { F::zero() });
        self.push(v, Op::Relu(a))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let n = F::of(xv.ncols() as f64);
        let eps = F::of(LN_EPS);
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().fold(F::zero(), |acc, &v| acc + v * v) / n;
            let is = F::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| v * is);
            inv_std.push(is);
        }
        let out = &xhat * self.value(gain) + self.value(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Row-wise softmax with an optional causal mask.
    pub fn softmax(&mut self, x: Var, mask: Mask) -> Var {
        let mut v = self.value(x).clone();
        for (i, mut row) in v.rows_mut().into_iter().enumerate() {
            let visible = match mask {
                Mask::None => row.len(),
                Mask::Causal => (i + 1).min(row.len()),
            };
            let max = row
                .slice(s![..visible])
                .iter()
                .fold(F::neg_infinity(), |m, &x| m.max(x));
            let mut sum = F::zero();
            for (j, e) in row.iter_mut().enumerate() {
                if j < visible {
                    *e = (*e - max).exp();
                    sum += *e;
                } else {
                    *e = F::zero();
                }
            }
            row.mapv_inplace(|e| e / sum);
        }
        self.push(v, Op::Softmax(x))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<F>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// `Σ_i w_i · -log softmax(logits_i)[t_i]` as a `1 × 1` node.
    pub fn weighted_nll(&mut self, logits: Var, targets: &[usize], weights: &[F]) -> Var {
        let z = self.value(logits);
        assert_eq!(z.nrows(), targets.len());
        assert_eq!(targets.len(), weights.len());
        let mut probs = z.clone();
        let mut total = F::zero();
        for ((mut row, &t), &w) in probs.rows_mut().into_iter().zip(targets).zip(weights) {
            let max = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
            let target_logit = row[t];
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            total += w * (max + sum.ln() - target_logit);
            row.mapv_inplace(|e| e / sum);
        }
        let out = Mat::from_elem((1, 1), total);
        self.push(
            out,
            Op::WeightedNll {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        )
    }

    /// Gradients of the scalar `root` with respect to every parameter.
    pub fn backward(&self, root: Var, grads: &mut Grads<F>) {
        assert_eq!(self.value(root).dim(), (1, 1), "backward needs a scalar root");
        let mut adj: Vec<Option<Mat<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root.0] = Some(Mat::from_elem((1, 1), F::one()));

        fn acc<F: Scalar>(adj: &mut [Option<Mat<F>>], v: Var, g: Mat<F>) {
            match &mut adj[v.0] {
                Some(a) => *a += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => grads.0[id.0] += &g,
                Op::Rows { table, idx } => {
                    let tg = &mut grads.0[table.0];
                    for (row, &r) in g.rows().into_iter().zip(idx) {
                        let mut dst = tg.row_mut(r);
                        dst += &row;
                    }
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut adj, *b, g.clone());
                    acc(&mut adj, *a, g);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut adj, *row, gr);
                    acc(&mut adj, *a, g);
                }
                Op::Scale(a, by) => acc(&mut adj, *a, g * *by),
                Op::MulConst(a, c) => acc(&mut adj, *a, g * c),
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(&node.value).for_each(|d, &y| {
                        if y <= F::zero() {
                            *d = F::zero();
                        }
                    });
                    acc(&mut adj, *a, ga);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gain_v = self.value(*gain);
                    acc(&mut adj, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut adj, *gain, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    let dxhat = &g * gain_v;
                    let n = F::of(xhat.ncols() as f64);
                    let mut gx = Mat::zeros(g.raw_dim());
                    for r in 0..g.nrows() {
                        let dh = dxhat.row(r);
                        let h = xhat.row(r);
                        let sum_dh = dh.sum();
                        let sum_dh_h = dh.iter().zip(h).fold(F::zero(), |a, (&d, &x)| a + d * x);
                        let is = inv_std[r];
                        for c in 0..g.ncols() {
                            gx[(r, c)] = is / n * (n * dh[c] - sum_dh - h[c] * sum_dh_h);
                        }
                    }
                    acc(&mut adj, *x, gx);
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let mut gx = &g * y;
                    for (mut row, yrow) in gx.rows_mut().into_iter().zip(y.rows()) {
                        let dot = row.sum();
                        Zip::from(&mut row).and(&yrow).for_each(|d, &p| *d = *d - p * dot);
                    }
                    acc(&mut adj, *x, gx);
                }
                Op::SliceCols { x, start } => {
                    let src = self.value(*x);
                    let mut gx = Mat::zeros(src.raw_dim());
                    gx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut adj, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        acc(&mut adj, p, g.slice(s![.., at..at + w]).to_owned());
                        at += w;
                    }
                }
                Op::WeightedNll {
                    logits,
                    targets,
                    weights,
                    probs,
                } => {
                    let up = g[(0, 0)];
                    let mut gz = probs.clone();
                    for ((mut row, &t), &w) in gz.rows_mut().into_iter().zip(targets).zip(weights) {
                        row[t] = row[t] - F::one();
                        row.mapv_inplace(|d| d * w * up);
                    }
                    acc(&mut adj, *logits, gz);
                }
            }
        }
    }
}
