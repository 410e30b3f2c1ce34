//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends one node whose inputs already live on the tape, so the
//! node order is a topological order and `backward` is a single reverse
//! sweep. Parameters are copied onto the tape from a [`ParamStore`] and their
//! gradients are handed back with [`Tape::accumulate_into`].

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{mm_nn, mm_nt, mm_tn, Tensor};

const LN_EPS: f64 = 1e-5;
const GELU_C: f32 = 0.797_884_6; // sqrt(2 / pi)
const GELU_A: f32 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Boolean attention mask, `true` = key position may be attended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl Mask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::dim("mask", format!("{rows}x{cols} mask from {} flags", allowed.len())));
        }
        Ok(Mask { rows, cols, allowed })
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Mask { rows, cols, allowed: vec![true; rows * cols] }
    }

    pub fn causal(n: usize) -> Self {
        let mut allowed = vec![false; n * n];
        for q in 0..n {
            for k in 0..=q {
                allowed[q * n + k] = true;
            }
        }
        Mask { rows: n, cols: n, allowed }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.allowed[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.allowed[row * self.cols + col] = value;
    }

    pub fn allowed_count(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }

    /// Top-left `n × n` sub-mask.
    pub fn prefix(&self, n: usize) -> Mask {
        let mut allowed = Vec::with_capacity(n * n);
        for r in 0..n {
            allowed.extend_from_slice(&self.allowed[r * self.cols..r * self.cols + n]);
        }
        Mask { rows: n, cols: n, allowed }
    }

    pub fn first_degenerate_row(&self) -> Option<usize> {
        (0..self.rows).find(|&r| !self.allowed[r * self.cols..(r + 1) * self.cols].iter().any(|&a| a))
    }

    pub(crate) fn flags(&self) -> &[bool] {
        &self.allowed
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var, broadcast: bool },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f32 },
    MaskedSoftmax { a: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, normed: Vec<f32>, rstd: Vec<f32> },
    Gelu { a: Var },
    Embedding { table: Var, ids: Vec<usize> },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f32>, count: usize },
    ConcatRows { parts: Vec<Var> },
    ConcatCols { parts: Vec<Var> },
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    Sum { a: Var },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. One tape per forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
    backward_done: bool,
}

fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    /// Input tensor. Gradients are tracked when `requires_grad` is set on it.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        check_finite("leaf", &t)?;
        let needs = t.requires_grad;
        Ok(self.push(t, Op::Leaf, needs))
    }

    pub fn constant(&mut self, mut t: Tensor) -> Result<Var> {
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let src = store.get(id);
        let t = Tensor::new(src.shape().to_vec(), src.data().to_vec()).expect("stored shape is valid");
        self.push(t, Op::Param(id), src.requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::dim("matmul", format!("{m}x{k} by {k2}x{n}")));
        }
        let out = mm_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        self.finish("matmul", vec![m, n], out, Op::MatMul { a, b, trans_b: false }, &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(Error::dim("matmul_t", format!("{m}x{k} by ({n}x{k2})^T")));
        }
        let out = mm_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        self.finish("matmul_t", vec![m, n], out, Op::MatMul { a, b, trans_b: true }, &[a, b])
    }

    /// Elementwise sum; `b` may also be a single row broadcast over `a`'s rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let (bm, bn) = self.dims(b);
        let broadcast = if (bm, bn) == (m, n) {
            false
        } else if bm == 1 && bn == n {
            true
        } else {
            return Err(Error::dim("add", format!("{m}x{n} + {bm}x{bn}")));
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let out: Vec<f32> = if broadcast {
            av.iter().enumerate().map(|(i, x)| x + bv[i % n]).collect()
        } else {
            av.iter().zip(bv).map(|(x, y)| x + y).collect()
        };
        self.finish("add", vec![m, n], out, Op::Add { a, b, broadcast }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        if self.dims(b) != (m, n) {
            return Err(Error::dim("mul", format!("{m}x{n} * {:?}", self.dims(b))));
        }
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        self.finish("mul", vec![m, n], out, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f32) -> Result<Var> {
        let (m, n) = self.dims(a);
        let out = self.value(a).data().iter().map(|x| x * factor).collect();
        self.finish("scale", vec![m, n], out, Op::Scale { a, factor }, &[a])
    }

    /// Row softmax restricted to allowed positions; blocked entries are exactly 0.
    pub fn masked_softmax(&mut self, a: Var, mask: &Mask) -> Result<Var> {
        let (m, n) = self.dims(a);
        if (mask.rows, mask.cols) != (m, n) {
            return Err(Error::dim("masked_softmax", format!("scores {m}x{n}, mask {}x{}", mask.rows, mask.cols)));
        }
        if let Some(row) = mask.first_degenerate_row() {
            return Err(Error::DegenerateRow { row });
        }
        let x = self.value(a).data();
        let flags = mask.flags();
        let mut out = vec![0.0f32; m * n];
        for r in 0..m {
            let row = &x[r * n..(r + 1) * n];
            let allow = &flags[r * n..(r + 1) * n];
            let max = row
                .iter()
                .zip(allow)
                .filter(|(_, &ok)| ok)
                .fold(f32::NEG_INFINITY, |acc, (&v, _)| acc.max(v));
            let mut sum = 0.0f64;
            let mut exps = vec![0.0f64; n];
            for c in 0..n {
                if allow[c] {
                    let e = ((row[c] - max) as f64).exp();
                    exps[c] = e;
                    sum += e;
                }
            }
            for c in 0..n {
                if allow[c] {
                    out[r * n + c] = (exps[c] / sum) as f32;
                }
            }
        }
        self.finish("masked_softmax", vec![m, n], out, Op::MaskedSoftmax { a }, &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(Error::dim("layer_norm", format!("rows of width {n} with gain/bias of other width")));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut normed = vec![0.0f32; m * n];
        let mut rstd = vec![0.0f32; m];
        let mut out = vec![0.0f32; m * n];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[r] = rs as f32;
            for c in 0..n {
                let h = ((row[c] as f64 - mean) * rs) as f32;
                normed[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        self.finish(
            "layer_norm",
            vec![m, n],
            out,
            Op::LayerNorm { x, gamma, beta, normed, rstd },
            &[x, gamma, beta],
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a);
        let out = self
            .value(a)
            .data()
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        self.finish("gelu", vec![m, n], out, Op::Gelu { a }, &[a])
    }

    /// Gathers rows of `table`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.dims(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::dim("embedding", format!("id {bad} outside table of {rows} rows")));
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        self.finish("embedding", vec![ids.len(), d], out, Op::Embedding { table, ids: ids.to_vec() }, &[table])
    }

    /// Mean next-token negative log-likelihood over the flagged rows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], loss_positions: &[bool]) -> Result<Var> {
        let (m, n) = self.dims(logits);
        if targets.len() != m || loss_positions.len() != m {
            return Err(Error::dim(
                "cross_entropy",
                format!("{m} rows, {} targets, {} flags", targets.len(), loss_positions.len()),
            ));
        }
        let count = loss_positions.iter().filter(|&&f| f).count();
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0f32; m * n];
        let mut tgt = vec![None; m];
        let mut total = 0.0f64;
        for r in 0..m {
            if !loss_positions[r] {
                continue;
            }
            let t = targets[r];
            if t >= n {
                return Err(Error::dim("cross_entropy", format!("target {t} outside vocab {n}")));
            }
            tgt[r] = Some(t);
            let row = &x[r * n..(r + 1) * n];
            let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
            let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[t] as f64;
            for c in 0..n {
                probs[r * n + c] = ((row[c] as f64 - max).exp() / sum) as f32;
            }
        }
        let loss = (total / count as f64) as f32;
        self.finish(
            "cross_entropy",
            vec![1, 1],
            vec![loss],
            Op::CrossEntropy { logits, targets: tgt, probs, count },
            &[logits],
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts.first().map(|&p| self.dims(p).1).ok_or_else(|| Error::dim("concat_rows", "no parts"))?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims(p);
            if c != n {
                return Err(Error::dim("concat_rows", format!("width {c} vs {n}")));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        self.finish("concat_rows", vec![rows, n], out, Op::ConcatRows { parts: parts.to_vec() }, parts)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = parts.first().map(|&p| self.dims(p).0).ok_or_else(|| Error::dim("concat_cols", "no parts"))?;
        if parts.iter().any(|&p| self.dims(p).0 != m) {
            return Err(Error::dim("concat_cols", "row counts differ"));
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.dims(p).1).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        self.finish("concat_cols", vec![m, total], out, Op::ConcatCols { parts: parts.to_vec() }, parts)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if start >= end || end > m {
            return Err(Error::dim("slice_rows", format!("{start}..{end} of {m} rows")));
        }
        let out = self.value(a).data()[start * n..end * n].to_vec();
        self.finish("slice_rows", vec![end - start, n], out, Op::SliceRows { a, start }, &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if start >= end || end > n {
            return Err(Error::dim("slice_cols", format!("{start}..{end} of {n} cols")));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * (end - start));
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + end]);
        }
        self.finish("slice_cols", vec![m, end - start], out, Op::SliceCols { a, start }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().map(|&v| v as f64).sum::<f64>() as f32;
        self.finish("sum", vec![1, 1], vec![s], Op::Sum { a }, &[a])
    }

    fn finish(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<f32>, op: Op, inputs: &[Var]) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        check_finite(name, &t)?;
        let needs = inputs.iter().any(|&i| self.needs(i));
        Ok(self.push(t, op, needs))
    }

    /// Populates gradients of every tracked node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::TapeState("backward already ran on this tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::TapeState(format!("loss must be scalar, got shape {:?}", self.value(loss).shape())));
        }
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = self.grads[idx].take() else { continue };
            self.propagate(idx, &g);
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds parameter gradients from this tape into the store's grad buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        if !self.backward_done {
            return Err(Error::TapeState("no backward pass has run".into()));
        }
        for (node, grad) in self.nodes.iter().zip(&self.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, grad) {
                store.add_grad(*id, g);
            }
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, delta: Vec<f32>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.iter_mut().zip(&delta).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(delta),
        }
    }

    fn acc_with(&mut self, v: Var, f: impl FnOnce(&mut [f32])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let len = self.nodes[v.0].value.numel();
        let g = self.grads[v.0].get_or_insert_with(|| vec![0.0; len]);
        f(g);
    }

    fn propagate(&mut self, idx: usize, g: &[f32]) {
        let (m, n) = self.nodes[idx].value.dims2();
        // Ops are moved out temporarily so inputs can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul { a, b, trans_b } => {
                let (a, b) = (*a, *b);
                let (_, k) = self.dims(a);
                if self.needs(a) {
                    let bv = self.value(b).data();
                    let da = if *trans_b { mm_nn(g, bv, m, n, k) } else { mm_nt(g, bv, m, n, k) };
                    self.acc(a, da);
                }
                if self.needs(b) {
                    let av = self.value(a).data();
                    let db = if *trans_b { mm_tn(g, av, m, n, k) } else { mm_tn(av, g, m, k, n) };
                    self.acc(b, db);
                }
            }
            Op::Add { a, b, broadcast } => {
                self.acc(*a, g.to_vec());
                if *broadcast {
                    let mut db = vec![0.0f64; n];
                    for r in 0..m {
                        for c in 0..n {
                            db[c] += g[r * n + c] as f64;
                        }
                    }
                    self.acc(*b, db.into_iter().map(|x| x as f32).collect());
                } else {
                    self.acc(*b, g.to_vec());
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.needs(a) {
                    let d = g.iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
                    self.acc(a, d);
                }
                if self.needs(b) {
                    let d = g.iter().zip(self.value(a).data()).map(|(x, y)| x * y).collect();
                    self.acc(b, d);
                }
            }
            Op::Scale { a, factor } => {
                let d = g.iter().map(|x| x * factor).collect();
                self.acc(*a, d);
            }
            Op::MaskedSoftmax { a } => {
                let y = self.nodes[idx].value.data();
                let mut d = vec![0.0f32; m * n];
                for r in 0..m {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let inner: f64 = yr.iter().zip(gr).map(|(&p, &q)| p as f64 * q as f64).sum();
                    for c in 0..n {
                        d[r * n + c] = (yr[c] as f64 * (gr[c] as f64 - inner)) as f32;
                    }
                }
                self.acc(*a, d);
            }
            Op::LayerNorm { x, gamma, beta, normed, rstd } => {
                let gv = self.value(*gamma).data().to_vec();
                if self.needs(*x) {
                    let mut dx = vec![0.0f32; m * n];
                    for r in 0..m {
                        let h = &normed[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let mut mean_dh = 0.0f64;
                        let mut mean_dh_h = 0.0f64;
                        for c in 0..n {
                            let dh = (gr[c] * gv[c]) as f64;
                            mean_dh += dh;
                            mean_dh_h += dh * h[c] as f64;
                        }
                        mean_dh /= n as f64;
                        mean_dh_h /= n as f64;
                        for c in 0..n {
                            let dh = (gr[c] * gv[c]) as f64;
                            dx[r * n + c] = (rstd[r] as f64 * (dh - mean_dh - h[c] as f64 * mean_dh_h)) as f32;
                        }
                    }
                    self.acc(*x, dx);
                }
                let mut dg = vec![0.0f64; n];
                let mut db = vec![0.0f64; n];
                for r in 0..m {
                    for c in 0..n {
                        dg[c] += (g[r * n + c] * normed[r * n + c]) as f64;
                        db[c] += g[r * n + c] as f64;
                    }
                }
                self.acc(*gamma, dg.into_iter().map(|v| v as f32).collect());
                self.acc(*beta, db.into_iter().map(|v| v as f32).collect());
            }
            Op::Gelu { a } => {
                let d = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&x, &gy)| {
                        let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                        gy * (0.5 * (1.0 + t) + 0.5 * x * dt)
                    })
                    .collect();
                self.acc(*a, d);
            }
            Op::Embedding { table, ids } => {
                let d = n;
                self.acc_with(*table, |tg| {
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            tg[id * d + c] += g[r * d + c];
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let (lm, ln) = self.dims(*logits);
                let scale = g[0] / *count as f32;
                let mut d = vec![0.0f32; lm * ln];
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = *t {
                        for c in 0..ln {
                            d[r * ln + c] = probs[r * ln + c] * scale;
                        }
                        d[r * ln + t] -= scale;
                    }
                }
                self.acc(*logits, d);
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    self.acc(p, g[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::ConcatCols { parts } => {
                let mut col = 0;
                for &p in parts {
                    let w = self.dims(p).1;
                    let mut d = Vec::with_capacity(m * w);
                    for r in 0..m {
                        d.extend_from_slice(&g[r * n + col..r * n + col + w]);
                    }
                    self.acc(p, d);
                    col += w;
                }
            }
            Op::SliceRows { a, start } => {
                let start = *start;
                self.acc_with(*a, |ga| {
                    for (o, v) in ga[start * n..(start + m) * n].iter_mut().zip(g) {
                        *o += v;
                    }
                });
            }
            Op::SliceCols { a, start } => {
                let start = *start;
                let w = self.dims(*a).1;
                self.acc_with(*a, |ga| {
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * w + start + c] += g[r * n + c];
                        }
                    }
                });
            }
            Op::Sum { a } => {
                let len = self.value(*a).numel();
                self.acc(*a, vec![g[0]; len]);
            }
        }
        self.nodes[idx].op = op;
    }
}

/// Row-wise `log_softmax` of a plain slice, in `f64`.
pub fn log_softmax(row: &[f32]) -> Vec<f64> {
    let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
    let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
    row.iter().map(|&v| v as f64 - lse).collect()
}
