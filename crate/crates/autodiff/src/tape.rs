use crate::array::{log_sum_exp, NArray};
use crate::{AutodiffError, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, rows: usize, inner: usize, cols: usize },
    MatMulT { a: Var, b: Var, rows: usize, inner: usize, cols: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias { a: Var, bias: Var },
    Scale(Var, f64),
    Exp(Var),
    Sum(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize, end: usize },
    Reshape(Var),
    Embed { table: Var, ids: Vec<usize> },
    Sigmoid(Var),
    Tanh(Var),
    Dropout { a: Var, scale: Vec<f64> },
    MaskedFill { a: Var, mask: Vec<bool> },
    LogSoftmax(Var),
    LogSumExp(Var),
    Gather { a: Var, idx: Vec<usize> },
    OuterSum { a: Var, b: Var },
    UpperPairLse { s: Var, e: Var },
}

#[derive(Debug)]
struct Node {
    value: NArray,
    op: Op,
    tracked: bool,
}

/// Append-only record of array operations.
///
/// Every node's parents precede it, so a reverse sweep over the node list is a
/// valid topological order for [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> AutodiffError {
    AutodiffError::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
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

    /// Drops every node created after `len` nodes existed. Vars pointing past the
    /// cut become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.grads.clear();
    }

    pub fn value(&self, v: Var) -> &NArray {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: NArray, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: NArray) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: NArray) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            other => Err(AutodiffError::Rank {
                op,
                expected: 2,
                shape: other.to_vec(),
            }),
        }
    }

    /// `a · b` for `a: [r, k]`, `b: [k, c]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (rows, inner) = self.dims2("matmul", a)?;
        let (inner_b, cols) = self.dims2("matmul", b)?;
        if inner != inner_b {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let orow = &mut out[r * cols..(r + 1) * cols];
            for k in 0..inner {
                let x = av[r * inner + k];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[k * cols..(k + 1) * cols];
                for (o, y) in orow.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let tracked = self.tracked_any(&[a, b]);
        let value = NArray::new(vec![rows, cols], out)?;
        Ok(self.push(value, Op::MatMul { a, b, rows, inner, cols }, tracked))
    }

    /// `a · bᵀ` for `a: [r, k]`, `b: [c, k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (rows, inner) = self.dims2("matmul_t", a)?;
        let (cols, inner_b) = self.dims2("matmul_t", b)?;
        if inner != inner_b {
            return Err(mismatch("matmul_t", self.shape(a), self.shape(b)));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let arow = &av[r * inner..(r + 1) * inner];
            for c in 0..cols {
                let brow = &bv[c * inner..(c + 1) * inner];
                out[r * cols + c] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        let tracked = self.tracked_any(&[a, b]);
        let value = NArray::new(vec![rows, cols], out)?;
        Ok(self.push(value, Op::MatMulT { a, b, rows, inner, cols }, tracked))
    }

    fn zip_same(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NArray> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(op_name, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        NArray::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), tracked))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("sub", a, b, |x, y| x - y)?;
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), tracked))
    }

    /// Adds `bias: [c]` to every row of `a: [.., c]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let c = self.value(a).last_dim();
        if self.shape(bias) != [c] {
            return Err(mismatch("add_bias", self.shape(a), self.shape(bias)));
        }
        let bv = self.value(bias).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + bv[i % c])
            .collect();
        let value = NArray::new(self.shape(a).to_vec(), data)?;
        let tracked = self.tracked_any(&[a, bias]);
        Ok(self.push(value, Op::AddBias { a, bias }, tracked))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let src = self.value(a);
        let value = NArray::new(
            src.shape().to_vec(),
            src.data().iter().map(|x| x * factor).collect(),
        )
        .expect("shape preserved");
        let tracked = self.tracked_any(&[a]);
        self.push(value, Op::Scale(a, factor), tracked)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let src = self.value(a);
        let value = NArray::new(src.shape().to_vec(), src.data().iter().map(|x| f(*x)).collect())
            .expect("shape preserved");
        let tracked = self.tracked_any(&[a]);
        self.push(value, op, tracked)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    /// Sum of every entry, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        let tracked = self.tracked_any(&[a]);
        self.push(NArray::scalar(total), Op::Sum(a), tracked)
    }

    /// Concatenates rank-1 arrays along axis 0, or rank-2 arrays along axis 0 or 1.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or(AutodiffError::Empty("concat"))?;
        let rank = self.value(first).rank();
        if rank == 0 || rank > 2 || axis >= rank {
            return Err(AutodiffError::Rank {
                op: "concat",
                expected: 2,
                shape: self.shape(first).to_vec(),
            });
        }
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == rank
                && s.iter()
                    .zip(self.shape(first))
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(mismatch("concat", self.shape(first), s));
            }
        }
        let mut shape = self.shape(first).to_vec();
        shape[axis] = parts.iter().map(|p| self.shape(*p)[axis]).sum();
        let mut data = Vec::with_capacity(shape.iter().product());
        if axis == 0 {
            for p in parts {
                data.extend_from_slice(self.value(*p).data());
            }
        } else {
            for r in 0..shape[0] {
                for p in parts {
                    data.extend_from_slice(self.value(*p).row(r));
                }
            }
        }
        let value = NArray::new(shape, data)?;
        let tracked = self.tracked_any(parts);
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            tracked,
        ))
    }

    /// Half-open slice `start..end` along `axis` of a rank-1 or rank-2 array.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || shape.len() > 2 || axis >= shape.len() {
            return Err(AutodiffError::Rank {
                op: "slice",
                expected: 2,
                shape,
            });
        }
        if start > end || end > shape[axis] {
            return Err(AutodiffError::OutOfRange {
                op: "slice",
                index: end,
                bound: shape[axis],
            });
        }
        let src = self.value(a);
        let mut out_shape = shape.clone();
        out_shape[axis] = end - start;
        let data = if axis == 0 {
            let inner: usize = shape[1..].iter().product();
            src.data()[start * inner..end * inner].to_vec()
        } else {
            let mut d = Vec::with_capacity(shape[0] * (end - start));
            for r in 0..shape[0] {
                d.extend_from_slice(&src.row(r)[start..end]);
            }
            d
        };
        let value = NArray::new(out_shape, data)?;
        let tracked = self.tracked_any(&[a]);
        Ok(self.push(value, Op::Slice { a, axis, start, end }, tracked))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = NArray::new(shape.to_vec(), self.value(a).data().to_vec())?;
        let tracked = self.tracked_any(&[a]);
        Ok(self.push(value, Op::Reshape(a), tracked))
    }

    /// Rows of `table: [V, d]` selected by `ids`, giving `[ids.len(), d]`.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, dim) = self.dims2("embed", table)?;
        let tv = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= vocab {
                return Err(AutodiffError::OutOfRange {
                    op: "embed",
                    index: id,
                    bound: vocab,
                });
            }
            data.extend_from_slice(tv.row(id));
        }
        let value = NArray::new(vec![ids.len(), dim], data)?;
        let tracked = self.tracked_any(&[table]);
        Ok(self.push(
            value,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            tracked,
        ))
    }

    /// Inverted dropout: at train time each entry is zeroed with probability `rate`
    /// and survivors are scaled by `1 / (1 - rate)`. Identity otherwise.
    ///
    /// `uniform` must yield samples in `[0, 1)`.
    pub fn dropout(
        &mut self,
        a: Var,
        rate: f64,
        train: bool,
        uniform: &mut dyn FnMut() -> f64,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(AutodiffError::InvalidArgument(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if !train || rate == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - rate);
        let scale: Vec<f64> = (0..self.value(a).len())
            .map(|_| if uniform() < rate { 0.0 } else { keep })
            .collect();
        let src = self.value(a);
        let data = src.data().iter().zip(&scale).map(|(x, s)| x * s).collect();
        let value = NArray::new(src.shape().to_vec(), data)?;
        let tracked = self.tracked_any(&[a]);
        Ok(self.push(value, Op::Dropout { a, scale }, tracked))
    }

    /// Sets entries where `mask` is true to `-inf`; they receive zero gradient.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let src = self.value(a);
        if mask.len() != src.len() {
            return Err(mismatch("masked_fill", src.shape(), &[mask.len()]));
        }
        let data = src
            .data()
            .iter()
            .zip(mask)
            .map(|(x, m)| if *m { f64::NEG_INFINITY } else { *x })
            .collect();
        let value = NArray::new(src.shape().to_vec(), data)?;
        let tracked = self.tracked_any(&[a]);
        Ok(self.push(
            value,
            Op::MaskedFill {
                a,
                mask: mask.to_vec(),
            },
            tracked,
        ))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let cols = src.last_dim();
        let mut data = Vec::with_capacity(src.len());
        for r in 0..src.outer_len() {
            let row = src.row(r);
            let lse = log_sum_exp(row);
            if lse == f64::NEG_INFINITY {
                return Err(AutodiffError::NoValidEntries("log_softmax"));
            }
            data.extend(row.iter().map(|x| x - lse));
        }
        debug_assert_eq!(data.len(), src.outer_len() * cols);
        let value = NArray::new(src.shape().to_vec(), data)?;
        let tracked = self.tracked_any(&[a]);
        Ok(self.push(value, Op::LogSoftmax(a), tracked))
    }

    /// Log-sum-exp over the last axis; the result drops that axis.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        if src.rank() == 0 {
            return Err(AutodiffError::Rank {
                op: "logsumexp",
                expected: 1,
                shape: Vec::new(),
            });
        }
        let mut data = Vec::with_capacity(src.outer_len());
        for r in 0..src.outer_len() {
            let lse = log_sum_exp(src.row(r));
            if lse == f64::NEG_INFINITY {
                return Err(AutodiffError::NoValidEntries("logsumexp"));
            }
            data.push(lse);
        }
        let shape = src.shape()[..src.rank() - 1].to_vec();
        let value = NArray::new(shape, data)?;
        let tracked = self.tracked_any(&[a]);
        Ok(self.push(value, Op::LogSumExp(a), tracked))
    }

    /// Entries at flat (row-major) indices, as a rank-1 array.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let src = self.value(a);
        let mut data = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= src.len() {
                return Err(AutodiffError::OutOfRange {
                    op: "gather",
                    index: i,
                    bound: src.len(),
                });
            }
            data.push(src.data()[i]);
        }
        let value = NArray::vector(data);
        let tracked = self.tracked_any(&[a]);
        Ok(self.push(
            value,
            Op::Gather {
                a,
                idx: idx.to_vec(),
            },
            tracked,
        ))
    }

    /// `out[i, j] = a[i] + b[j]` for rank-1 `a` and `b`.
    pub fn outer_sum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, m) = match (self.shape(a), self.shape(b)) {
            ([n], [m]) => (*n, *m),
            (l, r) => return Err(mismatch("outer_sum", l, r)),
        };
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut data = Vec::with_capacity(n * m);
        for x in av {
            data.extend(bv.iter().map(|y| x + y));
        }
        let value = NArray::new(vec![n, m], data)?;
        let tracked = self.tracked_any(&[a, b]);
        Ok(self.push(value, Op::OuterSum { a, b }, tracked))
    }

    /// For each row `r`, `ln Σ_{i ≤ j} exp(s[r, i] + e[r, j])`, in O(n) per row.
    ///
    /// This is the log-normalizer of an additive score over the upper triangle of
    /// an `n × n` grid, computed with a running prefix log-sum-exp instead of
    /// materializing the grid.
    pub fn upper_pair_logsumexp(&mut self, s: Var, e: Var) -> Result<Var> {
        let (rows, n) = self.dims2("upper_pair_logsumexp", s)?;
        if self.shape(e) != [rows, n] {
            return Err(mismatch("upper_pair_logsumexp", self.shape(s), self.shape(e)));
        }
        let sv = self.value(s);
        let ev = self.value(e);
        let mut data = Vec::with_capacity(rows);
        for r in 0..rows {
            let prefix = prefix_lse(sv.row(r));
            let terms: Vec<f64> = prefix.iter().zip(ev.row(r)).map(|(p, x)| p + x).collect();
            let lse = log_sum_exp(&terms);
            if lse == f64::NEG_INFINITY {
                return Err(AutodiffError::NoValidEntries("upper_pair_logsumexp"));
            }
            data.push(lse);
        }
        let tracked = self.tracked_any(&[s, e]);
        Ok(self.push(NArray::vector(data), Op::UpperPairLse { s, e }, tracked))
    }

    /// Reverse sweep from a scalar `loss`. Gradients are read with [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.rank() != 0 {
            return Err(AutodiffError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last `backward` loss with respect to `v`; zeros when `v`
    /// did not influence the loss.
    pub fn grad(&self, v: Var) -> NArray {
        let shape = self.shape(v).to_vec();
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => NArray::new(shape, g.clone()).expect("gradient shape"),
            None => NArray::zeros(&shape),
        }
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].tracked {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        let out = &nodes[idx].value;
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul { a, b, rows, inner, cols } => {
                let (rows, inner, cols) = (*rows, *inner, *cols);
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                // dA = G · Bᵀ
                acc(*a, &mut |ga| {
                    for r in 0..rows {
                        let grow = &g[r * cols..(r + 1) * cols];
                        for k in 0..inner {
                            let brow = &bv[k * cols..(k + 1) * cols];
                            ga[r * inner + k] +=
                                grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                // dB = Aᵀ · G
                acc(*b, &mut |gb| {
                    for r in 0..rows {
                        let grow = &g[r * cols..(r + 1) * cols];
                        for k in 0..inner {
                            let x = av[r * inner + k];
                            let dst = &mut gb[k * cols..(k + 1) * cols];
                            for (d, y) in dst.iter_mut().zip(grow) {
                                *d += x * y;
                            }
                        }
                    }
                });
            }
            Op::MatMulT { a, b, rows, inner, cols } => {
                let (rows, inner, cols) = (*rows, *inner, *cols);
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                // out = A · Bᵀ, so dA = G · B and dB = Gᵀ · A
                acc(*a, &mut |ga| {
                    for r in 0..rows {
                        let dst = &mut ga[r * inner..(r + 1) * inner];
                        for c in 0..cols {
                            let x = g[r * cols + c];
                            if x == 0.0 {
                                continue;
                            }
                            for (d, y) in dst.iter_mut().zip(&bv[c * inner..(c + 1) * inner]) {
                                *d += x * y;
                            }
                        }
                    }
                });
                acc(*b, &mut |gb| {
                    for r in 0..rows {
                        let arow = &av[r * inner..(r + 1) * inner];
                        for c in 0..cols {
                            let x = g[r * cols + c];
                            if x == 0.0 {
                                continue;
                            }
                            for (d, y) in gb[c * inner..(c + 1) * inner].iter_mut().zip(arow) {
                                *d += x * y;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    for (d, x) in gb.iter_mut().zip(g) {
                        *d -= x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddBias { a, bias } => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*bias, &mut |gb| {
                    let c = gb.len();
                    for (i, x) in g.iter().enumerate() {
                        gb[i % c] += x;
                    }
                });
            }
            Op::Scale(a, f) => acc(*a, &mut |ga| {
                for (d, x) in ga.iter_mut().zip(g) {
                    *d += f * x;
                }
            }),
            Op::Exp(a) => acc(*a, &mut |ga| {
                for ((d, x), y) in ga.iter_mut().zip(g).zip(out.data()) {
                    *d += x * y;
                }
            }),
            Op::Sum(a) => acc(*a, &mut |ga| {
                for d in ga.iter_mut() {
                    *d += g[0];
                }
            }),
            Op::Concat { parts, axis } => {
                if *axis == 0 {
                    let mut offset = 0;
                    for p in parts {
                        let len = nodes[p.0].value.len();
                        acc(*p, &mut |gp| add_into(gp, &g[offset..offset + len]));
                        offset += len;
                    }
                } else {
                    let total = out.last_dim();
                    let mut col = 0;
                    for p in parts {
                        let width = nodes[p.0].value.last_dim();
                        acc(*p, &mut |gp| {
                            for (r, chunk) in gp.chunks_mut(width).enumerate() {
                                add_into(chunk, &g[r * total + col..r * total + col + width]);
                            }
                        });
                        col += width;
                    }
                }
            }
            Op::Slice { a, axis, start, end } => {
                let shape = nodes[a.0].value.shape();
                acc(*a, &mut |ga| {
                    if *axis == 0 {
                        let inner: usize = shape[1..].iter().product();
                        add_into(&mut ga[start * inner..end * inner], g);
                    } else {
                        let cols = shape[1];
                        let width = end - start;
                        for r in 0..shape[0] {
                            add_into(
                                &mut ga[r * cols + start..r * cols + end],
                                &g[r * width..(r + 1) * width],
                            );
                        }
                    }
                });
            }
            Op::Reshape(a) => acc(*a, &mut |ga| add_into(ga, g)),
            Op::Embed { table, ids } => {
                let dim = nodes[table.0].value.last_dim();
                acc(*table, &mut |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut gt[id * dim..(id + 1) * dim], &g[r * dim..(r + 1) * dim]);
                    }
                });
            }
            Op::Sigmoid(a) => acc(*a, &mut |ga| {
                for ((d, x), y) in ga.iter_mut().zip(g).zip(out.data()) {
                    *d += x * y * (1.0 - y);
                }
            }),
            Op::Tanh(a) => acc(*a, &mut |ga| {
                for ((d, x), y) in ga.iter_mut().zip(g).zip(out.data()) {
                    *d += x * (1.0 - y * y);
                }
            }),
            Op::Dropout { a, scale } => acc(*a, &mut |ga| {
                for ((d, x), s) in ga.iter_mut().zip(g).zip(scale) {
                    *d += x * s;
                }
            }),
            Op::MaskedFill { a, mask } => acc(*a, &mut |ga| {
                for ((d, x), m) in ga.iter_mut().zip(g).zip(mask) {
                    if !*m {
                        *d += x;
                    }
                }
            }),
            Op::LogSoftmax(a) => {
                let cols = out.last_dim();
                acc(*a, &mut |ga| {
                    for r in 0..out.outer_len() {
                        let grow = &g[r * cols..(r + 1) * cols];
                        let total: f64 = grow.iter().sum();
                        for (c, y) in out.row(r).iter().enumerate() {
                            ga[r * cols + c] += grow[c] - y.exp() * total;
                        }
                    }
                });
            }
            Op::LogSumExp(a) => {
                let src = &nodes[a.0].value;
                let cols = src.last_dim();
                acc(*a, &mut |ga| {
                    for r in 0..src.outer_len() {
                        let lse = out.data()[r];
                        for (c, x) in src.row(r).iter().enumerate() {
                            ga[r * cols + c] += g[r] * (x - lse).exp();
                        }
                    }
                });
            }
            Op::Gather { a, idx } => acc(*a, &mut |ga| {
                for (k, &i) in idx.iter().enumerate() {
                    ga[i] += g[k];
                }
            }),
            Op::OuterSum { a, b } => {
                let m = nodes[b.0].value.len();
                acc(*a, &mut |ga| {
                    for (i, d) in ga.iter_mut().enumerate() {
                        *d += g[i * m..(i + 1) * m].iter().sum::<f64>();
                    }
                });
                acc(*b, &mut |gb| {
                    for row in g.chunks(m) {
                        add_into(gb, row);
                    }
                });
            }
            Op::UpperPairLse { s, e } => {
                let sv = &nodes[s.0].value;
                let ev = &nodes[e.0].value;
                let n = sv.last_dim();
                let rows = sv.outer_len();
                // d/ds_i = Σ_{j ≥ i} p_ij = exp(s_i + suffix_lse(e)_i - z)
                acc(*s, &mut |gs| {
                    for r in 0..rows {
                        let z = out.data()[r];
                        let suffix = suffix_lse(ev.row(r));
                        for (i, x) in sv.row(r).iter().enumerate() {
                            gs[r * n + i] += g[r] * (x + suffix[i] - z).exp();
                        }
                    }
                });
                // d/de_j = Σ_{i ≤ j} p_ij = exp(e_j + prefix_lse(s)_j - z)
                acc(*e, &mut |ge| {
                    for r in 0..rows {
                        let z = out.data()[r];
                        let prefix = prefix_lse(sv.row(r));
                        for (j, x) in ev.row(r).iter().enumerate() {
                            ge[r * n + j] += g[r] * (x + prefix[j] - z).exp();
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn prefix_lse(xs: &[f64]) -> Vec<f64> {
    let mut acc = f64::NEG_INFINITY;
    xs.iter()
        .map(|&x| {
            acc = crate::array::log_add_exp(acc, x);
            acc
        })
        .collect()
}

fn suffix_lse(xs: &[f64]) -> Vec<f64> {
    let mut out = vec![f64::NEG_INFINITY; xs.len()];
    let mut acc = f64::NEG_INFINITY;
    for i in (0..xs.len()).rev() {
        acc = crate::array::log_add_exp(acc, xs[i]);
        out[i] = acc;
    }
    out
}
