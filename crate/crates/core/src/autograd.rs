//! Reverse-mode automatic differentiation over row-major matrices.
//!
//! A [`Graph`] records every operation applied during a forward pass. Leaves
//! are either constants or references into a [`ParamStore`]; calling
//! [`Graph::backward`] on a `1×1` node returns gradients for every parameter
//! that participated.

use std::rc::Rc;

use crate::params::{Gradients, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{
    attention_backward, attention_forward, gelu, gelu_grad, layer_norm_backward, layer_norm_forward, log_softmax,
    KeyLists, Matrix, RowMix,
};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Value<T> {
    Owned(Matrix<T>),
    Param(ParamId),
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    LayerNorm { x: Var, gain: Var, bias: Var, means: Vec<T>, rstds: Vec<T> },
    Gelu(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, pattern: Rc<KeyLists>, probs: Vec<T> },
    RowMix { x: Var, mix: Rc<RowMix<T>> },
    Concat(Vec<Var>),
    /// Sum over rows of `-log softmax(row)[target]`.
    CrossEntropy { logits: Var, targets: Vec<usize>, log_probs: Matrix<T> },
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self { params, nodes: Vec::new() }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Param(id) => self.params.value(*id),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, m: Matrix<T>) -> Var {
        self.push(m, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node { value: Value::Param(id), op: Op::Leaf, requires_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul_nt(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMulNt(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).rows, 1, "add_row expects a single row");
        let mut out = self.value(a).clone();
        out.add_row_assign(&self.value(row).data);
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let (out, means, rstds) = layer_norm_forward(self.value(x), &self.value(gain).data, &self.value(bias).data);
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(out, Op::LayerNorm { x, gain, bias, means, rstds }, rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, pattern: Rc<KeyLists>) -> Var {
        let (out, probs) = attention_forward(self.value(q), self.value(k), self.value(v), heads, &pattern);
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(out, Op::Attention { q, k, v, heads, pattern, probs }, rg)
    }

    pub fn row_mix(&mut self, x: Var, mix: Rc<RowMix<T>>) -> Var {
        let out = mix.apply(self.value(x));
        let rg = self.rg(x);
        self.push(out, Op::RowMix { x, mix }, rg)
    }

    pub fn gather(&mut self, x: Var, rows: &[usize]) -> Var {
        self.row_mix(x, Rc::new(RowMix::gather(rows)))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Matrix<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Matrix::vstack(&mats);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::Concat(parts.to_vec()), rg)
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax.
    pub fn cross_entropy_sum(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows, targets.len(), "one target per logit row");
        let mut log_probs = Matrix::zeros(lv.rows, lv.cols);
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < lv.cols, "target outside logit row");
            let lp = log_softmax(lv.row(r));
            total -= lp[t];
            log_probs.row_mut(r).copy_from_slice(&lp);
        }
        let rg = self.rg(logits);
        self.push(
            Matrix::from_vec(1, 1, vec![total]),
            Op::CrossEntropy { logits, targets: targets.to_vec(), log_probs },
            rg,
        )
    }

    pub fn sum_scalars(&mut self, parts: &[Var]) -> Var {
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p);
        }
        acc
    }

    /// Back-propagates from a `1×1` node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward expects a scalar");
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::from_vec(1, 1, vec![T::one()]));
        let mut out = Gradients::empty(self.params.len());

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Value::Param(id) = node.value {
                match out.grads[id.0].as_mut() {
                    Some(acc) => acc.add_assign(&g),
                    None => out.grads[id.0] = Some(g),
                }
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        let mut da = Matrix::zeros(self.value(*a).rows, self.value(*a).cols);
                        g.matmul_nt_into(self.value(*b), &mut da);
                        accumulate(&mut grads, *a, da);
                    }
                    if self.rg(*b) {
                        let mut db = Matrix::zeros(self.value(*b).rows, self.value(*b).cols);
                        self.value(*a).matmul_tn_into(&g, &mut db);
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::MatMulNt(a, b) => {
                    // out = a bᵀ: da = g b, db = gᵀ a
                    if self.rg(*a) {
                        let mut da = Matrix::zeros(self.value(*a).rows, self.value(*a).cols);
                        g.matmul_into(self.value(*b), &mut da);
                        accumulate(&mut grads, *a, da);
                    }
                    if self.rg(*b) {
                        let mut db = Matrix::zeros(self.value(*b).rows, self.value(*b).cols);
                        g.matmul_tn_into(self.value(*a), &mut db);
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.rg(*row) {
                        accumulate(&mut grads, *row, Matrix::row_vector(g.sum_rows()));
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g);
                    }
                }
                Op::Scale(a, s) => {
                    accumulate(&mut grads, *a, g.scale(*s));
                }
                Op::LayerNorm { x, gain, bias, means, rstds } => {
                    let xv = self.value(*x);
                    let gv = &self.value(*gain).data;
                    let mut dx = self.rg(*x).then(|| Matrix::zeros(xv.rows, xv.cols));
                    let mut dg = self.rg(*gain).then(|| vec![T::zero(); xv.cols]);
                    let mut db = self.rg(*bias).then(|| vec![T::zero(); xv.cols]);
                    layer_norm_backward(xv, gv, means, rstds, &g, dx.as_mut(), dg.as_deref_mut(), db.as_deref_mut());
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, dx);
                    }
                    if let Some(dg) = dg {
                        accumulate(&mut grads, *gain, Matrix::row_vector(dg));
                    }
                    if let Some(db) = db {
                        accumulate(&mut grads, *bias, Matrix::row_vector(db));
                    }
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let mut dx = g;
                    for (d, &xi) in dx.data.iter_mut().zip(&xv.data) {
                        *d *= gelu_grad(xi);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Attention { q, k, v, heads, pattern, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let mut dq = Matrix::zeros(qv.rows, qv.cols);
                    let mut dk = Matrix::zeros(kv.rows, kv.cols);
                    let mut dv = Matrix::zeros(vv.rows, vv.cols);
                    attention_backward(qv, kv, vv, *heads, pattern, probs, &g, &mut dq, &mut dk, &mut dv);
                    for (var, d) in [(*q, dq), (*k, dk), (*v, dv)] {
                        if self.rg(var) {
                            accumulate(&mut grads, var, d);
                        }
                    }
                }
                Op::RowMix { x, mix } => {
                    let xv = self.value(*x);
                    let mut dx = Matrix::zeros(xv.rows, xv.cols);
                    mix.backward(&g, &mut dx);
                    accumulate(&mut grads, *x, dx);
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let rows = self.value(p).rows;
                        if self.rg(p) {
                            let cols = g.cols;
                            let slice = g.data[start * cols..(start + rows) * cols].to_vec();
                            accumulate(&mut grads, p, Matrix::from_vec(rows, cols, slice));
                        }
                        start += rows;
                    }
                }
                Op::CrossEntropy { logits, targets, log_probs } => {
                    let scale = g.data[0];
                    let mut d = log_probs.map(|l| l.exp() * scale);
                    for (r, &t) in targets.iter().enumerate() {
                        let cols = d.cols;
                        d.data[r * cols + t] -= scale;
                    }
                    accumulate(&mut grads, *logits, d);
                }
            }
        }
        out
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Matrix<T>>], v: Var, g: Matrix<T>) {
    match grads[v.0].as_mut() {
        Some(acc) => acc.add_assign(&g),
        None => grads[v.0] = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{normal_matrix, LrGroup};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central differences on every parameter entry.
    fn check(store: &mut ParamStore<f64>, f: impl Fn(&mut Graph<f64>) -> Var) {
        let g = {
            let mut graph = Graph::new(store);
            let loss = f(&mut graph);
            graph.backward(loss)
        };
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let n = store.value(id).data.len();
            for i in 0..n {
                let orig = store.value(id).data[i];
                let h = 1e-6;
                store.value_mut(id).data[i] = orig + h;
                let up = {
                    let mut graph = Graph::new(store);
                    let l = f(&mut graph);
                    graph.value(l).data[0]
                };
                store.value_mut(id).data[i] = orig - h;
                let down = {
                    let mut graph = Graph::new(store);
                    let l = f(&mut graph);
                    graph.value(l).data[0]
                };
                store.value_mut(id).data[i] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = g.get(id).map_or(0.0, |m| m.data[i]);
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!((fd - an).abs() / denom < 1e-5, "param {} [{i}]: fd {fd} vs analytic {an}", store.get(id).name);
            }
        }
    }

    #[test]
    fn ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let x = store.add("x", normal_matrix(&mut rng, 4, 6, 1.0), false, LrGroup::Other);
        let w = store.add("w", normal_matrix(&mut rng, 6, 6, 0.5), true, LrGroup::Other);
        let b = store.add("b", normal_matrix(&mut rng, 1, 6, 0.5), false, LrGroup::Other);
        let gain = store.add("g", normal_matrix(&mut rng, 1, 6, 1.0), false, LrGroup::Other);
        let emb = store.add("e", normal_matrix(&mut rng, 3, 6, 1.0), false, LrGroup::Other);
        let mut pattern = KeyLists::new();
        pattern.push_query([0]);
        pattern.push_query([0, 1]);
        pattern.push_query([0, 2]);
        pattern.push_query([0, 1, 2, 3]);
        let pattern = Rc::new(pattern);
        let mut mix = RowMix::new();
        mix.push_row(&[(0, 0.25), (3, 0.75)]);
        mix.push_row(&[(2, 1.0)]);
        let mix = Rc::new(mix);

        check(&mut store, |g| {
            let xv = g.param(x);
            let wv = g.param(w);
            let bv = g.param(b);
            let gv = g.param(gain);
            let ev = g.param(emb);
            let h = g.layer_norm(xv, gv, bv);
            let q = g.matmul(h, wv);
            let q = g.add_row(q, bv);
            let a = g.attention(q, h, xv, 2, pattern.clone());
            let a = g.gelu(a);
            let r = g.add(a, xv);
            let m = g.row_mix(r, mix.clone());
            let both = g.concat(&[m, r]);
            let logits = g.matmul_nt(both, ev);
            let logits = g.scale(logits, 0.7);
            g.cross_entropy_sum(logits, &[0, 2, 1, 1, 0, 2])
        });
    }
}
