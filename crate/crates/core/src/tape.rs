//! Reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters
//! enter through [`Tape::param`] and are tagged with their index in the
//! owning [`ParamStore`](crate::params::ParamStore); [`Tape::backward`]
//! returns gradients for every node reachable from the chosen root, which
//! lets callers route different loss terms to different parameter groups
//! by differentiating different roots of the same graph.

use ndarray::{concatenate, s, Array2, Axis};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Concat(Vec<Var>),
    Slice(Var, usize, usize),
    Gather(Var, Vec<usize>),
    Blend(Array2<f64>, Var, Var),
    Sum(Var),
    SoftmaxXent {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Array2<f64>,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn scalar(x: f64) -> Array2<f64> {
    Array2::from_elem((1, 1), x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// A constant: gradients stop here.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.push(scalar(x), Op::Leaf)
    }

    /// Copy of `v`'s value as a new constant.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn param(&mut self, id: usize, value: &Array2<f64>) -> Var {
        self.push(value.clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// `a` (rows x n) plus a broadcast row vector `b` (1 x n).
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::AddRow(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) + k;
        self.push(v, Op::Offset(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    /// Elementwise clamp; the gradient is zero where the input lies outside `[lo, hi]`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    /// Column-wise concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat: row counts differ");
        self.push(v, Op::Concat(parts.to_vec()))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::Slice(a, start, end))
    }

    /// Rows of `table` selected by `rows` (embedding lookup).
    pub fn gather(&mut self, table: Var, rows: &[usize]) -> Var {
        let t = self.value(table);
        let v = t.select(Axis(0), rows);
        self.push(v, Op::Gather(table, rows.to_vec()))
    }

    /// Row-wise `mask * a + (1 - mask) * b` with a constant 0/1 column mask.
    pub fn blend(&mut self, mask: Array2<f64>, a: Var, b: Var) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        let mut v = vb.clone();
        for (r, m) in mask.column(0).iter().enumerate() {
            if *m != 0.0 {
                v.row_mut(r).assign(&va.row(r));
            }
        }
        self.push(v, Op::Blend(mask, a, b))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Sum over rows `r` of `weights[r] * -log softmax(logits[r])[targets[r]]`.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Var {
        let l = self.value(logits);
        assert_eq!(l.nrows(), targets.len());
        assert_eq!(l.nrows(), weights.len());
        let mut probs = Array2::zeros(l.raw_dim());
        let mut total = 0.0;
        for (r, row) in l.outer_iter().enumerate() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (c, x) in row.iter().enumerate() {
                let e = (x - max).exp();
                probs[[r, c]] = e;
                z += e;
            }
            probs.row_mut(r).mapv_inplace(|p| p / z);
            if weights[r] != 0.0 {
                let log_p = row[targets[r]] - max - z.ln();
                total -= weights[r] * log_p;
            }
        }
        self.push(
            scalar(total),
            Op::SoftmaxXent {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
        )
    }

    /// Sum of several scalars (or same-shaped nodes).
    pub fn add_all(&mut self, parts: &[Var]) -> Var {
        let mut acc = parts[0];
        for p in &parts[1..] {
            acc = self.add(acc, *p);
        }
        acc
    }

    /// Gradients of the scalar `root` with respect to every parameter it depends on.
    pub fn backward(&self, root: Var) -> Gradients {
        self.backward_with(root, &[])
    }

    /// Like [`backward`](Self::backward), additionally keeping the
    /// gradients of the nodes listed in `keep`.
    pub fn backward_with(&self, root: Var, keep: &[Var]) -> Gradients {
        let mut out = Gradients {
            params: Vec::new(),
            nodes: Vec::new(),
        };
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Array2::ones(self.nodes[root.0].value.raw_dim()));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if keep.contains(&Var(idx)) {
                out.nodes.push((Var(idx), g.clone()));
            }
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => match out.params.iter_mut().find(|(p, _)| p == id) {
                    Some((_, existing)) => *existing += &g,
                    None => out.params.push((*id, g)),
                },
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(a, b) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *b, gb);
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, k) => acc(&mut grads, *a, g * *k),
                Op::Offset(a) => acc(&mut grads, *a, g),
                Op::Tanh(a) => {
                    let ga = &g * &node.value.mapv(|y| 1.0 - y * y);
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let ga = &g * &node.value.mapv(|y| y * (1.0 - y));
                    acc(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(self.value(*a), |d, x| {
                        if *x <= 0.0 {
                            *d = 0.0
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => acc(&mut grads, *a, &g * &node.value),
                Op::Square(a) => {
                    let ga = &g * &(self.value(*a) * 2.0);
                    acc(&mut grads, *a, ga);
                }
                Op::Clamp(a, lo, hi) => {
                    let mut ga = g;
                    ga.zip_mut_with(self.value(*a), |d, x| {
                        if *x < *lo || *x > *hi {
                            *d = 0.0
                        }
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Concat(parts) => {
                    let mut col = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        let gp = g.slice(s![.., col..col + w]).to_owned();
                        acc(&mut grads, *p, gp);
                        col += w;
                    }
                }
                Op::Slice(a, start, end) => {
                    let mut ga = Array2::zeros(self.value(*a).raw_dim());
                    ga.slice_mut(s![.., *start..*end]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::Gather(table, rows) => {
                    let mut gt = Array2::zeros(self.value(*table).raw_dim());
                    for (r, &row) in rows.iter().enumerate() {
                        let mut dst = gt.row_mut(row);
                        dst += &g.row(r);
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::Blend(mask, a, b) => {
                    let mut ga = Array2::zeros(g.raw_dim());
                    let mut gb = Array2::zeros(g.raw_dim());
                    for (r, m) in mask.column(0).iter().enumerate() {
                        if *m != 0.0 {
                            ga.row_mut(r).assign(&g.row(r));
                        } else {
                            gb.row_mut(r).assign(&g.row(r));
                        }
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Sum(a) => {
                    let k = g[[0, 0]];
                    acc(&mut grads, *a, Array2::from_elem(self.value(*a).raw_dim(), k));
                }
                Op::SoftmaxXent {
                    logits,
                    targets,
                    weights,
                    probs,
                } => {
                    let k = g[[0, 0]];
                    let mut gl = probs.clone();
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        let mut row = gl.row_mut(r);
                        row[t] -= 1.0;
                        row *= w * k;
                    }
                    acc(&mut grads, *logits, gl);
                }
            }
        }
        out.params.sort_by_key(|(id, _)| *id);
        out
    }
}

fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Parameter gradients produced by [`Tape::backward`].
pub struct Gradients {
    params: Vec<(usize, Array2<f64>)>,
    nodes: Vec<(Var, Array2<f64>)>,
}

impl Gradients {
    /// Gradient for parameter `id`, summed over every tape node bound to it.
    pub fn param(&self, id: usize) -> Option<&Array2<f64>> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn params(&self) -> impl Iterator<Item = (usize, &Array2<f64>)> {
        self.params.iter().map(|(p, g)| (*p, g))
    }

    /// Gradient with respect to a specific node (requires it to have been
    /// requested via [`Tape::backward_with`]).
    pub fn node(&self, v: Var) -> Option<&Array2<f64>> {
        self.nodes.iter().find(|(n, _)| *n == v).map(|(_, g)| g)
    }
}
