use std::borrow::Cow;
use std::collections::BTreeMap;
use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::{Float, Tensor};
use super::LAYER_NORM_EPS;
use crate::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddRow {
        a: Var,
        row: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: T,
    },
    Sum {
        a: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SelectRows {
        a: Var,
        rows: Vec<usize>,
    },
    SliceCols {
        a: Var,
        start: usize,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    Softmax {
        a: Var,
    },
    CausalSoftmax {
        a: Var,
        scale: T,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu {
        a: Var,
    },
    Dropout {
        a: Var,
        mask: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        count: usize,
    },
}

struct Node<'p, T: Clone> {
    shape: Vec<usize>,
    data: Cow<'p, [T]>,
    op: Op<T>,
    needs_grad: bool,
    param: Option<usize>,
}

/// A reverse-mode tape. Parameters are borrowed, not copied, for the lifetime of
/// the graph; gradients come back keyed by the slot the caller registered them
/// under, so tied weights registered once accumulate from every use.
pub struct Graph<'p, T: Float> {
    nodes: Vec<Node<'p, T>>,
    params: HashMap<usize, Var>,
    train: bool,
    rng: ChaCha8Rng,
}

/// Parameter gradients produced by [`Graph::backward`], keyed by parameter slot.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients<T> {
    slots: BTreeMap<usize, Vec<T>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, slot: usize) -> Option<&[T]> {
        self.slots.get(&slot).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &[T])> {
        self.slots.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for (slot, g) in &other.slots {
            match self.slots.get_mut(slot) {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a = *a + *b),
                None => {
                    self.slots.insert(*slot, g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.slots.values_mut() {
            g.iter_mut().for_each(|v| *v = *v * factor);
        }
    }

    /// Euclidean norm over every gradient entry, accumulated in `f64`.
    pub fn global_norm(&self) -> f64 {
        self.slots
            .values()
            .flat_map(|g| g.iter())
            .map(|v| {
                let x = v.as_f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Adds every slot into the matching tensor's `grad` accumulator.
    pub fn accumulate_into(&self, params: &mut [Tensor<T>]) -> Result<()> {
        for (slot, g) in &self.slots {
            let p = params.get_mut(*slot).ok_or_else(|| {
                Error::InvalidTensor(format!("gradient for unknown parameter slot {slot}"))
            })?;
            p.accumulate_grad(g)?;
        }
        Ok(())
    }
}

fn dims(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().expect("non-empty shape");
    (shape.iter().product::<usize>() / cols, cols)
}

impl<'p, T: Float> Graph<'p, T> {
    /// Inference graph: dropout is the identity.
    pub fn eval() -> Self {
        Self::with_mode(false, 0)
    }

    /// Training graph; `seed` fixes every dropout mask drawn on it.
    pub fn train(seed: u64) -> Self {
        Self::with_mode(true, seed)
    }

    fn with_mode(train: bool, seed: u64) -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            train,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers `tensor` as trainable parameter `slot`. Registering the same
    /// slot twice returns the original handle.
    pub fn param(&mut self, slot: usize, tensor: &'p Tensor<T>) -> Var {
        if let Some(v) = self.params.get(&slot) {
            return *v;
        }
        let v = self.push(Node {
            shape: tensor.shape().to_vec(),
            data: Cow::Borrowed(tensor.data()),
            op: Op::Leaf,
            needs_grad: tensor.requires_grad(),
            param: Some(slot),
        });
        self.params.insert(slot, v);
        v
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        let shape = tensor.shape().to_vec();
        self.owned(shape, tensor.into_data(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.to_vec()).expect("graph node shape is consistent")
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[0]
    }

    fn push(&mut self, node: Node<'p, T>) -> Var {
        self.nodes.push(node);
        Var(self.nodes.len() - 1)
    }

    fn owned(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.push(Node {
            shape,
            data: Cow::Owned(data),
            op,
            needs_grad,
            param: None,
        })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        dims(&self.nodes[v.0].shape)
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            left: self.nodes[a.0].shape.clone(),
            right: self.nodes[b.0].shape.clone(),
        }
    }

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (br, bc) = self.dims(b);
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb || self.shape(b).len() != 2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a),
            false,
            self.value(b),
            trans_b,
            &mut out,
            false,
        );
        let needs = self.needs(a) || self.needs(b);
        Ok(self.owned(vec![m, n], out, Op::MatMul { a, b, trans_b }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("add", a, b));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| *x + *y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.owned(self.shape(a).to_vec(), out, Op::Add { a, b }, needs))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (_, n) = self.dims(a);
        if self.value(row).len() != n {
            return Err(self.mismatch("add_row", a, row));
        }
        let r = self.value(row);
        let out = self
            .value(a)
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(x, y)| *x + *y))
            .collect();
        let needs = self.needs(a) || self.needs(row);
        Ok(self.owned(self.shape(a).to_vec(), out, Op::AddRow { a, row }, needs))
    }

    /// `x · w + b` with `w: in×out`, `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("mul", a, b));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| *x * *y)
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.owned(self.shape(a).to_vec(), out, Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let out = self.value(a).iter().map(|x| *x * factor).collect();
        let needs = self.needs(a);
        self.owned(self.shape(a).to_vec(), out, Op::Scale { a, factor }, needs)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let needs = self.needs(a);
        self.owned(vec![1], vec![s], Op::Sum { a }, needs)
    }

    /// Gathers rows of `table` (`V×d`) by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::TokenOutOfRange { id: bad, size: v });
        }
        if ids.is_empty() {
            return Err(Error::InvalidTensor("embedding lookup with no ids".into()));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let needs = self.needs(table);
        Ok(self.owned(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(a);
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return Err(Error::InvalidTensor(format!(
                "row {bad} out of range for {m} rows"
            )));
        }
        let x = self.value(a);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(&x[r * n..(r + 1) * n]);
        }
        let needs = self.needs(a);
        Ok(self.owned(
            vec![rows.len(), n],
            out,
            Op::SelectRows {
                a,
                rows: rows.to_vec(),
            },
            needs,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.dims(a);
        if start + len > n || len == 0 {
            return Err(Error::InvalidTensor(format!(
                "column slice {start}..{} out of range for {n} columns",
                start + len
            )));
        }
        let out = self
            .value(a)
            .chunks(n)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let needs = self.needs(a);
        Ok(self.owned(vec![m, len], out, Op::SliceCols { a, start }, needs))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidTensor("concat of zero parts".into()))?;
        let (m, _) = self.dims(first);
        for &p in parts {
            if self.dims(p).0 != m {
                return Err(self.mismatch("concat_cols", first, p));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.dims(p).1).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.owned(
            vec![m, total],
            out,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            needs,
        ))
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (_, n) = self.dims(a);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let needs = self.needs(a);
        self.owned(self.shape(a).to_vec(), out, Op::Softmax { a }, needs)
    }

    /// Row `i` of a square score matrix becomes the softmax of `scale · a[i, ..=i]`;
    /// entries above the diagonal are exactly zero.
    pub fn causal_softmax(&mut self, a: Var, scale: T) -> Result<Var> {
        let (m, n) = self.dims(a);
        if m != n {
            return Err(self.mismatch("causal_softmax", a, a));
        }
        let x = self.value(a);
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..i * n + i + 1];
            row.iter_mut()
                .zip(&x[i * n..i * n + i + 1])
                .for_each(|(o, v)| *o = *v * scale);
            softmax_in_place(row);
        }
        let needs = self.needs(a);
        Ok(self.owned(vec![m, n], out, Op::CausalSoftmax { a, scale }, needs))
    }

    /// Per-row normalization to zero mean and unit variance, then `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(gain).len() != n {
            return Err(self.mismatch("layer_norm", x, gain));
        }
        if self.value(bias).len() != n {
            return Err(self.mismatch("layer_norm", x, bias));
        }
        let eps = T::lit(LAYER_NORM_EPS);
        let nf = T::lit(n as f64);
        let xs = self.value(x);
        let (g, b) = (self.value(gain), self.value(bias));
        let mut xhat = vec![T::zero(); m * n];
        let mut rstd = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / nf;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * g[c] + b[c];
            }
        }
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.owned(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        let needs = self.needs(a);
        self.owned(self.shape(a).to_vec(), out, Op::Gelu { a }, needs)
    }

    /// Inverted dropout. Identity on eval graphs or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        if !self.train || p <= 0.0 {
            return a;
        }
        let keep = T::lit(1.0 / (1.0 - p));
        let n = self.value(a).len();
        let mask: Vec<T> = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        let out = self
            .value(a)
            .iter()
            .zip(&mask)
            .map(|(x, m)| *x * *m)
            .collect();
        let needs = self.needs(a);
        self.owned(self.shape(a).to_vec(), out, Op::Dropout { a, mask }, needs)
    }

    /// Mean cross-entropy of each row of `logits` against its target; `None`
    /// rows are ignored. Produces a single-element node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (m, c) = self.dims(logits);
        if targets.len() != m {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: self.shape(logits).to_vec(),
                right: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().flatten().find(|&&t| t >= c) {
            return Err(Error::TargetOutOfRange {
                id: bad,
                classes: c,
            });
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::NoLabeledPositions);
        }
        let x = self.value(logits);
        let mut probs = vec![T::zero(); m * c];
        let mut total = T::zero();
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            let row = &x[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|v| (*v - max).exp()).sum();
            total = total + (max + z.ln() - row[t]);
            for (p, v) in probs[r * c..(r + 1) * c].iter_mut().zip(row) {
                *p = (*v - max).exp() / z;
            }
        }
        let loss = total / T::lit(count as f64);
        let needs = self.needs(logits);
        Ok(self.owned(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            needs,
        ))
    }

    /// Gradients of the single-element `loss` with respect to every registered
    /// parameter reachable from it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.data.len() != 1 {
            return Err(Error::NotScalar(root.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    if let Some(slot) = node.param {
                        out.slots.insert(slot, g);
                    }
                }
                Op::MatMul { a, b, trans_b } => {
                    let (m, k) = self.dims(*a);
                    let n = node.shape[1];
                    if let Some(da) = self.grad_buf(&mut grads, *a) {
                        // da = g · op(b)ᵀ
                        T::gemm(m, n, k, &g, false, self.value(*b), !trans_b, da, true);
                    }
                    if let Some(db) = self.grad_buf(&mut grads, *b) {
                        if *trans_b {
                            // db (n×k) = gᵀ · a
                            T::gemm(n, m, k, &g, true, self.value(*a), false, db, true);
                        } else {
                            // db (k×n) = aᵀ · g
                            T::gemm(k, m, n, self.value(*a), true, &g, false, db, true);
                        }
                    }
                }
                Op::Add { a, b } => {
                    for v in [*a, *b] {
                        if let Some(d) = self.grad_buf(&mut grads, v) {
                            add_into(d, &g);
                        }
                    }
                }
                Op::AddRow { a, row } => {
                    if let Some(d) = self.grad_buf(&mut grads, *a) {
                        add_into(d, &g);
                    }
                    if let Some(d) = self.grad_buf(&mut grads, *row) {
                        let n = d.len();
                        for chunk in g.chunks(n) {
                            add_into(d, chunk);
                        }
                    }
                }
                Op::Mul { a, b } => {
                    if let Some(d) = self.grad_buf(&mut grads, *a) {
                        for ((d, g), y) in d.iter_mut().zip(&g).zip(self.value(*b)) {
                            *d = *d + *g * *y;
                        }
                    }
                    if let Some(d) = self.grad_buf(&mut grads, *b) {
                        for ((d, g), x) in d.iter_mut().zip(&g).zip(self.value(*a)) {
                            *d = *d + *g * *x;
                        }
                    }
                }
                Op::Scale { a, factor } => {
                    if let Some(d) = self.grad_buf(&mut grads, *a) {
                        for (d, g) in d.iter_mut().zip(&g) {
                            *d = *d + *g * *factor;
                        }
                    }
                }
                Op::Sum { a } => {
                    if let Some(d) = self.grad_buf(&mut grads, *a) {
                        d.iter_mut().for_each(|d| *d = *d + g[0]);
                    }
                }
                Op::Embedding { table, ids } => {
                    let width = node.shape[1];
                    if let Some(d) = self.grad_buf(&mut grads, *table) {
                        for (r, &id) in ids.iter().enumerate() {
                            add_into(
                                &mut d[id * width..(id + 1) * width],
                                &g[r * width..(r + 1) * width],
                            );
                        }
                    }
                }
                Op::SelectRows { a, rows } => {
                    let width = node.shape[1];
                    if let Some(d) = self.grad_buf(&mut grads, *a) {
                        for (r, &src) in rows.iter().enumerate() {
                            add_into(
                                &mut d[src * width..(src + 1) * width],
                                &g[r * width..(r + 1) * width],
                            );
                        }
                    }
                }
                Op::SliceCols { a, start } => {
                    let len = node.shape[1];
                    let (_, n) = self.dims(*a);
                    if let Some(d) = self.grad_buf(&mut grads, *a) {
                        for (drow, grow) in d.chunks_mut(n).zip(g.chunks(len)) {
                            add_into(&mut drow[*start..start + len], grow);
                        }
                    }
                }
                Op::ConcatCols { parts } => {
                    let total = node.shape[1];
                    let mut offset = 0;
                    for &p in parts {
                        let (_, w) = self.dims(p);
                        if let Some(d) = self.grad_buf(&mut grads, p) {
                            for (drow, grow) in d.chunks_mut(w).zip(g.chunks(total)) {
                                add_into(drow, &grow[offset..offset + w]);
                            }
                        }
                        offset += w;
                    }
                }
                Op::Softmax { a } => {
                    let n = node.shape[node.shape.len() - 1];
                    let y = &node.data;
                    if let Some(d) = self.grad_buf(&mut grads, *a) {
                        for ((drow, grow), yrow) in
                            d.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n))
                        {
                            softmax_backward(drow, grow, yrow, T::one());
                        }
                    }
                }
                Op::CausalSoftmax { a, scale } => {
                    let n = node.shape[1];
                    let y = &node.data;
                    if let Some(d) = self.grad_buf(&mut grads, *a) {
                        for i in 0..n {
                            let span = i * n..i * n + i + 1;
                            softmax_backward(
                                &mut d[span.clone()],
                                &g[span.clone()],
                                &y[span],
                                *scale,
                            );
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    rstd,
                } => {
                    let (m, n) = self.dims(*x);
                    let gv = self.value(*gain);
                    if let Some(d) = self.grad_buf(&mut grads, *gain) {
                        for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                            for c in 0..n {
                                d[c] = d[c] + grow[c] * hrow[c];
                            }
                        }
                    }
                    if let Some(d) = self.grad_buf(&mut grads, *bias) {
                        for grow in g.chunks(n) {
                            add_into(d, grow);
                        }
                    }
                    if let Some(d) = self.grad_buf(&mut grads, *x) {
                        let nf = T::lit(n as f64);
                        let mut dxhat = vec![T::zero(); n];
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            let hrow = &xhat[r * n..(r + 1) * n];
                            let mut s1 = T::zero();
                            let mut s2 = T::zero();
                            for c in 0..n {
                                dxhat[c] = grow[c] * gv[c];
                                s1 = s1 + dxhat[c];
                                s2 = s2 + dxhat[c] * hrow[c];
                            }
                            let k = rstd[r] / nf;
                            for c in 0..n {
                                let v = k * (nf * dxhat[c] - s1 - hrow[c] * s2);
                                d[r * n + c] = d[r * n + c] + v;
                            }
                        }
                    }
                }
                Op::Gelu { a } => {
                    if let Some(d) = self.grad_buf(&mut grads, *a) {
                        for ((d, g), x) in d.iter_mut().zip(&g).zip(self.value(*a)) {
                            *d = *d + *g * gelu_grad(*x);
                        }
                    }
                }
                Op::Dropout { a, mask } => {
                    if let Some(d) = self.grad_buf(&mut grads, *a) {
                        for ((d, g), m) in d.iter_mut().zip(&g).zip(mask) {
                            *d = *d + *g * *m;
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    count,
                } => {
                    let c = self.dims(*logits).1;
                    let k = g[0] / T::lit(*count as f64);
                    if let Some(d) = self.grad_buf(&mut grads, *logits) {
                        for (r, t) in targets.iter().enumerate() {
                            let Some(t) = *t else { continue };
                            let drow = &mut d[r * c..(r + 1) * c];
                            for (dv, p) in drow.iter_mut().zip(&probs[r * c..(r + 1) * c]) {
                                *dv = *dv + k * *p;
                            }
                            drow[t] = drow[t] - k;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut [T]> {
        if !self.needs(v) {
            return None;
        }
        let len = self.nodes[v.0].data.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
    }
}

fn add_into<T: Float>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d = *d + *s);
}

pub(crate) fn softmax_in_place<T: Float>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z = z + *v;
    }
    row.iter_mut().for_each(|v| *v = *v / z);
}

fn softmax_backward<T: Float>(d: &mut [T], g: &[T], y: &[T], scale: T) {
    let dot: T = g.iter().zip(y).map(|(a, b)| *a * *b).sum();
    for ((d, g), y) in d.iter_mut().zip(g).zip(y) {
        *d = *d + scale * *y * (*g - dot);
    }
}

const GELU_COEFF: f64 = 0.044715;

fn gelu<T: Float>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let inner = c * (x + T::lit(GELU_COEFF) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Float>(x: T) -> T {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(GELU_COEFF);
    let t = (c * (x + a * x * x * x)).tanh();
    let half = T::lit(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x)
}
