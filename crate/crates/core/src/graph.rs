//! Tape-based reverse-mode differentiation over a closed set of matrix
//! operators.
//!
//! A [`Graph`] is built by appending operations; every node is a
//! `rows x cols` matrix and nodes are stored in creation order, which is a
//! topological order. [`Graph::forward`] evaluates all nodes against a
//! [`ParamStore`]; [`Graph::backward`] walks the tape once in reverse from a
//! scalar root and accumulates parameter gradients into the store.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul_nn, matmul_nt, matmul_tn, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Input(Tensor),
    Param(ParamId),
    /// `x * w^T + b`, with `x: B x in`, `w: out x in`, `b: 1 x out`.
    Dense {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Softplus(NodeId),
    Softmax(NodeId),
    /// Mean softmax cross-entropy over rows.
    SoftmaxCe {
        logits: NodeId,
        labels: Vec<usize>,
    },
    /// Row `r` is the concatenation of `table[tokens[r * width + j]]` for a
    /// row width fixed by the node's shape.
    Embedding {
        table: NodeId,
        tokens: Vec<u32>,
    },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Max(NodeId, NodeId),
    Scale(NodeId, f64),
    Shift(NodeId, f64),
    /// Picks column `idx[r]` of each row `r`, producing a `B x 1` column.
    Gather {
        a: NodeId,
        idx: Vec<usize>,
    },
    Reshape(NodeId),
    Sum(NodeId),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Option<Vec<f64>>,
    /// Softmax probabilities kept for the cross-entropy backward pass.
    aux: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    evaluated: bool,
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

    fn push(&mut self, op: Op, rows: usize, cols: usize) -> NodeId {
        self.evaluated = false;
        self.nodes.push(Node {
            op,
            rows,
            cols,
            value: None,
            aux: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    /// Constant input; vectors become a single row.
    pub fn input(&mut self, t: Tensor) -> NodeId {
        let (r, c) = t.dims2();
        self.push(Op::Input(t), r, c)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let (r, c) = store.value(id).dims2();
        self.push(Op::Param(id), r, c)
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (bx, n_in) = self.shape(x);
        let (n_out, w_in) = self.shape(w);
        if n_in != w_in {
            return Err(Error::dim(format!(
                "dense input has {n_in} columns, weight expects {w_in}"
            )));
        }
        if let Some(b) = b {
            let (br, bc) = self.shape(b);
            if br * bc != n_out {
                return Err(Error::dim(format!(
                    "bias has {} entries, weight has {n_out} rows",
                    br * bc
                )));
            }
        }
        Ok(self.push(Op::Dense { x, w, b }, bx, n_out))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(Op::Relu(a), r, c)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(Op::Sigmoid(a), r, c)
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(Op::Softplus(a), r, c)
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(Op::Softmax(a), r, c)
    }

    pub fn softmax_ce(&mut self, logits: NodeId, labels: Vec<usize>) -> Result<NodeId> {
        let (r, c) = self.shape(logits);
        if labels.len() != r {
            return Err(Error::dim(format!("{} labels for {r} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index(format!("label {bad} with {c} classes")));
        }
        if r == 0 {
            return Err(Error::Data("cross-entropy over zero rows".into()));
        }
        Ok(self.push(Op::SoftmaxCe { logits, labels }, 1, 1))
    }

    pub fn embedding(&mut self, table: NodeId, tokens: Vec<u32>, width: usize) -> Result<NodeId> {
        let (vocab, dim) = self.shape(table);
        if width == 0 || !tokens.len().is_multiple_of(width) {
            return Err(Error::dim(format!(
                "{} tokens do not form rows of width {width}",
                tokens.len()
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::Index(format!("token {bad} with vocabulary {vocab}")));
        }
        let rows = tokens.len() / width;
        Ok(self.push(Op::Embedding { table, tokens }, rows, width * dim))
    }

    fn same_shape(&self, a: NodeId, b: NodeId) -> Result<(usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::dim(format!("elementwise shapes {sa:?} and {sb:?}")));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.same_shape(a, b)?;
        Ok(self.push(Op::Add(a, b), r, c))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.same_shape(a, b)?;
        Ok(self.push(Op::Mul(a, b), r, c))
    }

    /// Elementwise maximum; ties send the gradient to `a`.
    pub fn max(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.same_shape(a, b)?;
        Ok(self.push(Op::Max(a, b), r, c))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(Op::Scale(a, s), r, c)
    }

    pub fn shift(&mut self, a: NodeId, s: f64) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(Op::Shift(a, s), r, c)
    }

    pub fn gather(&mut self, a: NodeId, idx: Vec<usize>) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if idx.len() != r {
            return Err(Error::dim(format!("{} indices for {r} rows", idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= c) {
            return Err(Error::Index(format!("column {bad} of {c}")));
        }
        Ok(self.push(Op::Gather { a, idx }, r, 1))
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if r * c != rows * cols {
            return Err(Error::dim(format!("reshape {r}x{c} into {rows}x{cols}")));
        }
        Ok(self.push(Op::Reshape(a), rows, cols))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), 1, 1)
    }

    /// Value of an evaluated node.
    pub fn value(&self, id: NodeId) -> Result<Tensor> {
        let n = &self.nodes[id.0];
        let v = n
            .value
            .as_ref()
            .ok_or_else(|| Error::State("node read before forward".into()))?;
        Tensor::matrix(n.rows, n.cols, v.clone())
    }

    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        let n = &self.nodes[id.0];
        match &n.value {
            Some(v) if v.len() == 1 => Ok(v[0]),
            Some(_) => Err(Error::dim("node is not a scalar")),
            None => Err(Error::State("node read before forward".into())),
        }
    }

    fn val<'a>(nodes: &'a [Node], store: &'a ParamStore, id: NodeId) -> &'a [f64] {
        match &nodes[id.0].op {
            Op::Param(p) => store.value(*p).data(),
            _ => nodes[id.0]
                .value
                .as_deref()
                .expect("operands are evaluated before their users"),
        }
    }

    pub fn forward(&mut self, store: &ParamStore) -> Result<()> {
        for i in 0..self.nodes.len() {
            let (rows, cols) = (self.nodes[i].rows, self.nodes[i].cols);
            let nodes = &self.nodes;
            let v = |id: NodeId| Self::val(nodes, store, id);
            let mut aux = None;
            let out: Option<Vec<f64>> = match &nodes[i].op {
                Op::Input(t) => Some(t.data().to_vec()),
                Op::Param(p) => {
                    let (r, c) = store.value(*p).dims2();
                    if (r, c) != (rows, cols) {
                        return Err(Error::State(format!(
                            "parameter `{}` changed shape after graph construction",
                            store.name(*p)
                        )));
                    }
                    None
                }
                Op::Dense { x, w, b } => {
                    let n_in = nodes[x.0].cols;
                    let mut out = vec![0.0; rows * cols];
                    if let Some(b) = b {
                        let bv = v(*b);
                        for row in out.chunks_mut(cols) {
                            row.copy_from_slice(bv);
                        }
                        matmul_nt(rows, n_in, cols, v(*x), v(*w), &mut out, 1.0);
                    } else {
                        matmul_nt(rows, n_in, cols, v(*x), v(*w), &mut out, 0.0);
                    }
                    Some(out)
                }
                Op::Relu(a) => Some(v(*a).iter().map(|&z| z.max(0.0)).collect()),
                Op::Sigmoid(a) => Some(v(*a).iter().map(|&z| sigmoid(z)).collect()),
                Op::Softplus(a) => Some(v(*a).iter().map(|&z| softplus(z)).collect()),
                Op::Softmax(a) => {
                    let mut out = v(*a).to_vec();
                    for row in out.chunks_mut(cols) {
                        softmax_in_place(row);
                    }
                    Some(out)
                }
                Op::SoftmaxCe { logits, labels } => {
                    let c = nodes[logits.0].cols;
                    let mut probs = v(*logits).to_vec();
                    let mut loss = 0.0;
                    for (row, &l) in probs.chunks_mut(c).zip(labels) {
                        loss += log_softmax_at(row, l);
                        softmax_in_place(row);
                    }
                    aux = Some(probs);
                    Some(vec![loss / labels.len() as f64])
                }
                Op::Embedding { table, tokens, .. } => {
                    let dim = nodes[table.0].cols;
                    let tv = v(*table);
                    let mut out = Vec::with_capacity(rows * cols);
                    for &t in tokens {
                        let t = t as usize;
                        out.extend_from_slice(&tv[t * dim..(t + 1) * dim]);
                    }
                    Some(out)
                }
                Op::Add(a, b) => Some(v(*a).iter().zip(v(*b)).map(|(x, y)| x + y).collect()),
                Op::Mul(a, b) => Some(v(*a).iter().zip(v(*b)).map(|(x, y)| x * y).collect()),
                Op::Max(a, b) => Some(v(*a).iter().zip(v(*b)).map(|(x, y)| x.max(*y)).collect()),
                Op::Scale(a, s) => Some(v(*a).iter().map(|x| x * s).collect()),
                Op::Shift(a, s) => Some(v(*a).iter().map(|x| x + s).collect()),
                Op::Gather { a, idx } => {
                    let c = nodes[a.0].cols;
                    let av = v(*a);
                    Some(
                        idx.iter()
                            .enumerate()
                            .map(|(r, &j)| av[r * c + j])
                            .collect(),
                    )
                }
                Op::Reshape(a) => Some(v(*a).to_vec()),
                Op::Sum(a) => Some(vec![v(*a).iter().sum()]),
            };
            self.nodes[i].value = out;
            self.nodes[i].aux = aux;
        }
        self.evaluated = true;
        Ok(())
    }

    /// Accumulates `d root / d param` into `store` for every parameter the
    /// root depends on. `root` must be a `1 x 1` node.
    pub fn backward(&self, root: NodeId, store: &mut ParamStore) -> Result<()> {
        self.backward_seeded(root, &[1.0], store)
    }

    /// Like [`Graph::backward`] but with an explicit upstream gradient for
    /// `root`, which may have any shape.
    pub fn backward_seeded(
        &self,
        root: NodeId,
        seed: &[f64],
        store: &mut ParamStore,
    ) -> Result<()> {
        if !self.evaluated {
            return Err(Error::State("backward called before forward".into()));
        }
        let (rr, rc) = self.shape(root);
        if seed.len() != rr * rc {
            return Err(Error::dim(format!(
                "seed has {} entries for a {rr}x{rc} root",
                seed.len()
            )));
        }
        let nodes = &self.nodes;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(seed.to_vec());

        fn slot<'g>(
            grads: &'g mut [Option<Vec<f64>>],
            nodes: &[Node],
            id: NodeId,
        ) -> &'g mut Vec<f64> {
            let n = nodes[id.0].rows * nodes[id.0].cols;
            grads[id.0].get_or_insert_with(|| vec![0.0; n])
        }

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            match &node.op {
                Op::Input(_) => {}
                Op::Param(p) => {
                    for (acc, d) in store.grad_mut(*p).data_mut().iter_mut().zip(&g) {
                        *acc += d;
                    }
                }
                Op::Dense { x, w, b } => {
                    let (bsz, n_out) = (node.rows, node.cols);
                    let n_in = nodes[x.0].cols;
                    {
                        let wv = Self::val(nodes, store, *w).to_vec();
                        let gx = slot(&mut grads, nodes, *x);
                        matmul_nn(bsz, n_out, n_in, &g, &wv, gx, 1.0);
                    }
                    {
                        let xv = Self::val(nodes, store, *x).to_vec();
                        let gw = slot(&mut grads, nodes, *w);
                        matmul_tn(n_out, bsz, n_in, &g, &xv, gw, 1.0);
                    }
                    if let Some(b) = b {
                        let gb = slot(&mut grads, nodes, *b);
                        for row in g.chunks(n_out) {
                            for (acc, d) in gb.iter_mut().zip(row) {
                                *acc += d;
                            }
                        }
                    }
                }
                Op::Relu(a) => {
                    let av = Self::val(nodes, store, *a).to_vec();
                    let ga = slot(&mut grads, nodes, *a);
                    for ((acc, d), z) in ga.iter_mut().zip(&g).zip(&av) {
                        if *z > 0.0 {
                            *acc += d;
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    let out = node.value.as_deref().expect("evaluated");
                    let ga = slot(&mut grads, nodes, *a);
                    for ((acc, d), s) in ga.iter_mut().zip(&g).zip(out) {
                        *acc += d * s * (1.0 - s);
                    }
                }
                Op::Softplus(a) => {
                    let av = Self::val(nodes, store, *a).to_vec();
                    let ga = slot(&mut grads, nodes, *a);
                    for ((acc, d), z) in ga.iter_mut().zip(&g).zip(&av) {
                        *acc += d * sigmoid(*z);
                    }
                }
                Op::Softmax(a) => {
                    let out = node.value.as_deref().expect("evaluated");
                    let c = node.cols;
                    let ga = slot(&mut grads, nodes, *a);
                    for ((acc_row, g_row), p_row) in
                        ga.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c))
                    {
                        let dot: f64 = g_row.iter().zip(p_row).map(|(x, y)| x * y).sum();
                        for ((acc, gi), pi) in acc_row.iter_mut().zip(g_row).zip(p_row) {
                            *acc += pi * (gi - dot);
                        }
                    }
                }
                Op::SoftmaxCe { logits, labels } => {
                    let probs = node.aux.as_deref().expect("evaluated");
                    let c = nodes[logits.0].cols;
                    let scale = g[0] / labels.len() as f64;
                    let gl = slot(&mut grads, nodes, *logits);
                    for (r, &l) in labels.iter().enumerate() {
                        let row = &mut gl[r * c..(r + 1) * c];
                        for (j, acc) in row.iter_mut().enumerate() {
                            let onehot = if j == l { 1.0 } else { 0.0 };
                            *acc += scale * (probs[r * c + j] - onehot);
                        }
                    }
                }
                Op::Embedding { table, tokens, .. } => {
                    let dim = nodes[table.0].cols;
                    let gt = slot(&mut grads, nodes, *table);
                    for (pos, &t) in tokens.iter().enumerate() {
                        let t = t as usize;
                        let src = &g[pos * dim..(pos + 1) * dim];
                        for (acc, d) in gt[t * dim..(t + 1) * dim].iter_mut().zip(src) {
                            *acc += d;
                        }
                    }
                }
                Op::Add(a, b) => {
                    for id in [a, b] {
                        let ga = slot(&mut grads, nodes, *id);
                        for (acc, d) in ga.iter_mut().zip(&g) {
                            *acc += d;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let av = Self::val(nodes, store, *a).to_vec();
                    let bv = Self::val(nodes, store, *b).to_vec();
                    {
                        let ga = slot(&mut grads, nodes, *a);
                        for ((acc, d), y) in ga.iter_mut().zip(&g).zip(&bv) {
                            *acc += d * y;
                        }
                    }
                    let gb = slot(&mut grads, nodes, *b);
                    for ((acc, d), x) in gb.iter_mut().zip(&g).zip(&av) {
                        *acc += d * x;
                    }
                }
                Op::Max(a, b) => {
                    let av = Self::val(nodes, store, *a).to_vec();
                    let bv = Self::val(nodes, store, *b).to_vec();
                    let pick_a: Vec<bool> = av.iter().zip(&bv).map(|(x, y)| x >= y).collect();
                    {
                        let ga = slot(&mut grads, nodes, *a);
                        for ((acc, d), &on) in ga.iter_mut().zip(&g).zip(&pick_a) {
                            if on {
                                *acc += d;
                            }
                        }
                    }
                    let gb = slot(&mut grads, nodes, *b);
                    for ((acc, d), &on) in gb.iter_mut().zip(&g).zip(&pick_a) {
                        if !on {
                            *acc += d;
                        }
                    }
                }
                Op::Scale(a, s) => {
                    let ga = slot(&mut grads, nodes, *a);
                    for (acc, d) in ga.iter_mut().zip(&g) {
                        *acc += d * s;
                    }
                }
                Op::Shift(a, _) | Op::Reshape(a) => {
                    let ga = slot(&mut grads, nodes, *a);
                    for (acc, d) in ga.iter_mut().zip(&g) {
                        *acc += d;
                    }
                }
                Op::Gather { a, idx } => {
                    let c = nodes[a.0].cols;
                    let ga = slot(&mut grads, nodes, *a);
                    for (r, (&j, d)) in idx.iter().zip(&g).enumerate() {
                        ga[r * c + j] += d;
                    }
                }
                Op::Sum(a) => {
                    let ga = slot(&mut grads, nodes, *a);
                    for acc in ga.iter_mut() {
                        *acc += g[0];
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Max-shifted softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for z in row.iter_mut() {
        *z = (*z - max).exp();
        total += *z;
    }
    for z in row.iter_mut() {
        *z /= total;
    }
}

/// `-log softmax(row)[label]`, computed from the max-shifted log-sum-exp.
fn log_softmax_at(row: &[f64], label: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
    lse - row[label]
}

/// Softmax probabilities and the cross-entropy `-ln probs[label]`.
pub fn softmax_cross_entropy(logits: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    let n = logits.len();
    if label >= n {
        return Err(Error::Index(format!("label {label} with {n} classes")));
    }
    let loss = log_softmax_at(logits.data(), label);
    let mut probs = logits.data().to_vec();
    softmax_in_place(&mut probs);
    Ok((loss, Tensor::vector(probs)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ce_symmetric_logits() {
        let (loss, probs) = softmax_cross_entropy(&Tensor::vector(vec![0.0, 0.0]), 0).unwrap();
        assert_eq!(probs.data(), &[0.5, 0.5]);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn ce_is_stable_for_huge_logits() {
        let (loss, probs) = softmax_cross_entropy(&Tensor::vector(vec![1000.0, 0.0]), 0).unwrap();
        assert!(loss.is_finite() && loss.abs() < 1e-300);
        assert!(probs.is_finite());
        let (loss, _) = softmax_cross_entropy(&Tensor::vector(vec![1000.0, 0.0]), 1).unwrap();
        assert!((loss - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn ce_label_out_of_range() {
        assert!(matches!(
            softmax_cross_entropy(&Tensor::vector(vec![0.0, 0.0]), 2),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn backward_before_forward_is_a_state_error() {
        let mut store = ParamStore::new();
        let p = store.add("w", Tensor::scalar(1.0)).unwrap();
        let mut g = Graph::new();
        let w = g.param(&store, p);
        let s = g.sum(w);
        assert!(matches!(g.backward(s, &mut store), Err(Error::State(_))));
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut store = ParamStore::new();
        let p = store
            .add("w", Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        let mut g = Graph::new();
        let _w = g.param(&store, p);
        let c = g.input(Tensor::scalar(3.0));
        let s = g.sum(c);
        g.forward(&store).unwrap();
        g.backward(s, &mut store).unwrap();
        assert!(store.grad(p).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_dense_ce_closed_form() {
        let mut store = ParamStore::new();
        let w = store
            .add(
                "w",
                Tensor::matrix(3, 2, vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6]).unwrap(),
            )
            .unwrap();
        let b = store
            .add("b", Tensor::vector(vec![0.0, 0.1, -0.1]))
            .unwrap();
        let x = vec![0.7, -1.3];
        let mut g = Graph::new();
        let xn = g.input(Tensor::vector(x.clone()));
        let wn = g.param(&store, w);
        let bn = g.param(&store, b);
        let z = g.dense(xn, wn, Some(bn)).unwrap();
        let loss = g.softmax_ce(z, vec![2]).unwrap();
        g.forward(&store).unwrap();
        g.backward(loss, &mut store).unwrap();
        let logits = g.value(z).unwrap();
        let (_, probs) = softmax_cross_entropy(&Tensor::vector(logits.into_data()), 2).unwrap();
        for i in 0..3 {
            let delta = probs.data()[i] - if i == 2 { 1.0 } else { 0.0 };
            for (j, xj) in x.iter().enumerate() {
                let expect = delta * xj;
                assert!((store.grad(w).data()[i * 2 + j] - expect).abs() < 1e-14);
            }
            assert!((store.grad(b).data()[i] - delta).abs() < 1e-14);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut row = vec![3.0, -1.0, 0.5, 700.0];
        softmax_in_place(&mut row);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
