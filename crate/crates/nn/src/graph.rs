//! Define-by-run computation graph over 2-D `f64` matrices.
//!
//! Every value is an `Array2<f64>`; vectors are `1 × n` rows. A [`Graph`] is
//! built fresh for each forward pass and consumed by [`Graph::backward`].

use std::cell::{Ref, RefCell};
use std::collections::HashMap;

use ndarray::{s, Array2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::params::ParamId;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Softplus(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Reverse(Var, f64),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    Im2Col(Var, usize),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    param: Option<ParamId>,
}

/// Computation tape. Nodes are appended in topological order.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    train: bool,
    rng: RefCell<ChaCha8Rng>,
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize, axis: &str| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("incompatible {axis} for broadcast: {a:?} vs {b:?}")
        }
    };
    (dim(a.0, b.0, "rows"), dim(a.1, b.1, "cols"))
}

fn expand(x: &Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    if x.dim() == shape {
        x.clone()
    } else {
        x.broadcast(shape)
            .expect("broadcast checked by broadcast_shape")
            .to_owned()
    }
}

/// Sum a gradient of broadcast shape back down to `shape`.
fn reduce_to(g: Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let mut g = g;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn im2col(x: &Array2<f64>, k: usize) -> Array2<f64> {
    let (t, c) = x.dim();
    let pad = k / 2;
    let mut out = Array2::zeros((t, k * c));
    for row in 0..t {
        for j in 0..k {
            let src = row as isize + j as isize - pad as isize;
            if src >= 0 && (src as usize) < t {
                out.slice_mut(s![row, j * c..(j + 1) * c])
                    .assign(&x.row(src as usize));
            }
        }
    }
    out
}

impl Graph {
    /// Inference graph: dropout is the identity.
    pub fn eval() -> Self {
        Self::build(false, 0)
    }

    /// Training graph; dropout masks are drawn from a stream seeded by `seed`.
    pub fn train(seed: u64) -> Self {
        Self::build(true, seed)
    }

    fn build(train: bool, seed: u64) -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(256)),
            train,
            rng: RefCell::new(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    /// Inverted dropout; identity on eval graphs or when `p == 0`.
    pub fn dropout(&self, a: Var, p: f64) -> Var {
        if !self.train || p <= 0.0 {
            return a;
        }
        let keep = 1.0 - p;
        let shape = self.shape(a);
        let mask = {
            let mut rng = self.rng.borrow_mut();
            Array2::from_shape_fn(shape, |_| {
                if rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
        };
        let m = self.input(mask);
        self.mul(a, m)
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<f64>, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            param: None,
        });
        Var(nodes.len() - 1)
    }

    /// Constant or input leaf.
    pub fn input(&self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf bound to a trainable parameter; its gradient is reported under `id`.
    pub fn param_leaf(&self, id: ParamId, value: Array2<f64>) -> Var {
        let v = self.push(value, Op::Leaf);
        self.nodes.borrow_mut()[v.0].param = Some(id);
        v
    }

    pub fn value(&self, v: Var) -> Ref<'_, Array2<f64>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.dim()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "scalar() on non-scalar node");
        val[[0, 0]]
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).mapv(f);
        self.push(out, op)
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let out = {
            let (va, vb) = (self.value(a), self.value(b));
            let shape = broadcast_shape(va.dim(), vb.dim());
            let mut out = expand(&va, shape);
            Zip::from(&mut out)
                .and(&vb.broadcast(shape).expect("checked"))
                .for_each(|x, &y| *x = f(*x, y));
            out
        };
        self.push(out, op)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&*self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn transpose(&self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        self.push(out, Op::Transpose(a))
    }

    pub fn relu(&self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn ln(&self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn sqrt(&self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    /// Numerically stable `log(1 + e^x)`.
    pub fn softplus(&self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn square(&self, a: Var) -> Var {
        self.mul(a, a)
    }

    /// Gradient reversal: identity forward, gradient multiplied by `-scale` backward.
    pub fn reverse_grad(&self, a: Var, scale: f64) -> Var {
        assert!(scale >= 0.0, "gradient reversal scale must be nonnegative");
        let out = self.value(a).clone();
        self.push(out, Op::Reverse(a, scale))
    }

    /// Same value as `a`, cut from the backward pass.
    pub fn detach(&self, a: Var) -> Var {
        let v = self.value(a).clone();
        self.input(v)
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column sums: `m × n → 1 × n`.
    pub fn sum_rows(&self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(out, Op::SumRows(a))
    }

    /// Row sums: `m × n → m × 1`.
    pub fn sum_cols(&self, a: Var) -> Var {
        let out = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(out, Op::SumCols(a))
    }

    pub fn softmax_rows(&self, a: Var) -> Var {
        let out = softmax_rows(&self.value(a));
        self.push(out, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&self, a: Var) -> Var {
        let out = {
            let x = self.value(a);
            let mut out = x.clone();
            for mut row in out.rows_mut() {
                let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                row.mapv_inplace(|v| v - lse);
            }
            out
        };
        self.push(out, Op::LogSoftmaxRows(a))
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        let out = {
            let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
            ndarray::concatenate(Axis(1), &views).expect("row counts must agree")
        };
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&self, parts: &[Var]) -> Var {
        let out = {
            let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("column counts must agree")
        };
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(out, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(out, Op::SliceCols(a, start))
    }

    /// `out[i] = a[idx[i]]`; used for embedding lookup and duration expansion.
    pub fn gather_rows(&self, a: Var, idx: &[usize]) -> Var {
        let out = self.value(a).select(Axis(0), idx);
        self.push(out, Op::GatherRows(a, idx.to_vec()))
    }

    /// Same-padded sliding windows over rows: `T × C → T × (k·C)`, `k` odd.
    pub fn im2col(&self, a: Var, k: usize) -> Var {
        assert!(k % 2 == 1, "kernel width must be odd");
        let out = im2col(&self.value(a), k);
        self.push(out, Op::Im2Col(a, k))
    }

    /// Reverse-mode sweep from a `1 × 1` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.dim(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        let mut params: HashMap<ParamId, Array2<f64>> = HashMap::new();
        let mut leaves: HashMap<usize, Array2<f64>> = HashMap::new();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => {
                    if let Some(id) = node.param {
                        match params.get_mut(&id) {
                            Some(existing) => *existing += &g,
                            None => {
                                params.insert(id, g.clone());
                            }
                        }
                    }
                    leaves.insert(i, g);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, reduce_to(g.clone(), val(*a).dim()));
                    acc(&mut grads, *b, reduce_to(g.clone(), val(*b).dim()));
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, reduce_to(g.clone(), val(*a).dim()));
                    acc(&mut grads, *b, reduce_to(-&g, val(*b).dim()));
                }
                Op::Mul(a, b) => {
                    let shape = g.dim();
                    let ga = &g * &expand(val(*b), shape);
                    let gb = &g * &expand(val(*a), shape);
                    acc(&mut grads, *a, reduce_to(ga, val(*a).dim()));
                    acc(&mut grads, *b, reduce_to(gb, val(*b).dim()));
                }
                Op::Div(a, b) => {
                    let shape = g.dim();
                    let bb = expand(val(*b), shape);
                    let ga = &g / &bb;
                    let gb = -(&g * &node.value) / &bb;
                    acc(&mut grads, *a, reduce_to(ga, val(*a).dim()));
                    acc(&mut grads, *b, reduce_to(gb, val(*b).dim()));
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&val(*b).t());
                    let gb = val(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(val(*a))
                        .for_each(|g, &x| if x <= 0.0 { *g = 0.0 });
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = &g * &node.value.mapv(|y| y * (1.0 - y));
                    acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = &g * &node.value.mapv(|y| 1.0 - y * y);
                    acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => acc(&mut grads, *a, &g * &node.value),
                Op::Log(a) => acc(&mut grads, *a, &g / val(*a)),
                Op::Sqrt(a) => acc(&mut grads, *a, &g / &node.value.mapv(|y| 2.0 * y)),
                Op::Softplus(a) => acc(&mut grads, *a, &g * &val(*a).mapv(sigmoid)),
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::Reverse(a, c) => acc(&mut grads, *a, g * -*c),
                Op::SumAll(a) => {
                    let ga = Array2::from_elem(val(*a).dim(), g[[0, 0]]);
                    acc(&mut grads, *a, ga);
                }
                Op::SumRows(a) => acc(&mut grads, *a, expand(&g, val(*a).dim())),
                Op::SumCols(a) => acc(&mut grads, *a, expand(&g, val(*a).dim())),
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = y * &(&g - &dot);
                    acc(&mut grads, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let p = node.value.mapv(f64::exp);
                    let gsum = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = &g - &(&p * &gsum);
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = val(*p).ncols();
                        acc(&mut grads, *p, g.slice(s![.., off..off + w]).to_owned());
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let h = val(*p).nrows();
                        acc(&mut grads, *p, g.slice(s![off..off + h, ..]).to_owned());
                        off += h;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Array2::zeros(val(*a).dim());
                    ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(val(*a).dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::GatherRows(a, idx) => {
                    let mut ga = Array2::zeros(val(*a).dim());
                    for (row, &src) in idx.iter().enumerate() {
                        let mut dst = ga.row_mut(src);
                        dst += &g.row(row);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Im2Col(a, k) => {
                    let (t, c) = val(*a).dim();
                    let pad = k / 2;
                    let mut ga = Array2::zeros((t, c));
                    for row in 0..t {
                        for j in 0..*k {
                            let src = row as isize + j as isize - pad as isize;
                            if src >= 0 && (src as usize) < t {
                                let mut dst = ga.row_mut(src as usize);
                                dst += &g.slice(s![row, j * c..(j + 1) * c]);
                            }
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
            }
        }

        Gradients { params, leaves }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    params: HashMap<ParamId, Array2<f64>>,
    leaves: HashMap<usize, Array2<f64>>,
}

impl Gradients {
    /// Gradient for a parameter (summed over all leaves bound to it).
    pub fn param(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &HashMap<ParamId, Array2<f64>> {
        &self.params
    }

    /// Gradient reaching a leaf node, if any flowed there.
    pub fn wrt(&self, v: Var) -> Option<&Array2<f64>> {
        self.leaves.get(&v.0)
    }
}
