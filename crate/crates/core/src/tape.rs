//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends one node holding its output value; [`Tape::backward`]
//! replays the nodes in reverse and accumulates parameter gradients into a
//! [`ParameterStore`]. A tape is built per forward pass and dropped afterwards.

use crate::error::{Error, Result};
use crate::params::{ParamId, ParameterStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Arguments passed to `log` are clamped from below at this value.
pub const LOG_FLOOR: f64 = 1e-12;
const LAYER_NORM_EPS: f64 = 1e-5;

/// Contiguous rows `[start, start + len)` forming one causal sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug)]
enum Op<S> {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Minimum(Var, Var),
    AddRow {
        x: Var,
        bias: Var,
    },
    Scale(Var, S),
    Offset(Var),
    Gelu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Clamp {
        x: Var,
        lo: S,
        hi: S,
    },
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        rstd: Vec<S>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        qkv: Var,
        segments: Vec<Segment>,
        heads: usize,
        probs: Vec<S>,
    },
    CrossEntropy {
        logits: Var,
        rows: Vec<usize>,
        targets: Vec<usize>,
        probs: Vec<S>,
    },
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    MeanRows(Var),
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Pick {
        x: Var,
        index: Vec<usize>,
    },
    Reshape(Var),
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
}

/// Gradients of one backward pass, addressable by [`Var`].
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

fn sum64<S: Scalar>(xs: impl Iterator<Item = S>) -> f64 {
    xs.map(Scalar::as_f64).sum()
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x);
    (y, dy)
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn vals(&self, v: Var) -> &[S] {
        self.nodes[v.0].value.values()
    }

    fn push(&mut self, name: &str, value: Tensor<S>, op: Op<S>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::non_finite(name));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims2(&self, v: Var, name: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [m, n] => Ok((*m, *n)),
            other => Err(Error::config(format!(
                "{name}: expected a matrix, got shape {other:?}"
            ))),
        }
    }

    fn same_shape(&self, a: Var, b: Var, name: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::config(format!(
                "{name}: shape mismatch {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Result<Var> {
        self.push("constant", value, Op::Constant)
    }

    /// Registers a parameter as a leaf; its gradient flows back into the store on `backward`.
    pub fn param(&mut self, store: &ParameterStore<S>, id: ParamId) -> Result<Var> {
        let mut value = store.get(id).clone();
        value.clear_grad();
        self.push("param", value, Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::config(format!(
                "matmul: inner dimensions {k} and {k2} differ"
            )));
        }
        let mut out = vec![S::zero(); m * n];
        S::gemm(
            m,
            k,
            n,
            self.vals(a),
            false,
            self.vals(b),
            false,
            &mut out,
            false,
        );
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b))
    }

    fn zip_with(
        &mut self,
        name: &str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let out: Vec<S> = self
            .vals(a)
            .iter()
            .zip(self.vals(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(name, Tensor::new(shape, out)?, op)
    }

    fn map(&mut self, name: &str, x: Var, f: impl Fn(S) -> S, op: Op<S>) -> Result<Var> {
        let out: Vec<S> = self.vals(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(name, Tensor::new(shape, out)?, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise minimum; on ties the gradient goes to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(
            "minimum",
            a,
            b,
            |x, y| if x <= y { x } else { y },
            Op::Minimum(a, b),
        )
    }

    /// `x[m, n] + bias[n]`, broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "add_row")?;
        if self.value(bias).len() != n {
            return Err(Error::config(format!(
                "add_row: bias of length {} for width {n}",
                self.value(bias).len()
            )));
        }
        let b = self.vals(bias);
        let out: Vec<S> = self
            .vals(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + b[i % n])
            .collect();
        self.push(
            "add_row",
            Tensor::new(vec![m, n], out)?,
            Op::AddRow { x, bias },
        )
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let f = S::of(factor);
        self.map("scale", x, |v| v * f, Op::Scale(x, f))
    }

    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = S::of(c);
        self.map("offset", x, |v| v + c, Op::Offset(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map("gelu", x, |v| S::of(gelu_parts(v.as_f64()).0), Op::Gelu(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map("exp", x, |v| v.exp(), Op::Exp(x))
    }

    /// Natural log with the argument clamped at [`LOG_FLOOR`].
    pub fn log(&mut self, x: Var) -> Result<Var> {
        let floor = S::of(LOG_FLOOR);
        self.map("log", x, |v| v.max(floor).ln(), Op::Log(x))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.map("square", x, |v| v * v, Op::Square(x))
    }

    /// Clamp into `[lo, hi]`; gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let (lo, hi) = (S::of(lo), S::of(hi));
        self.map("clamp", x, |v| v.max(lo).min(hi), Op::Clamp { x, lo, hi })
    }

    fn softmax_rows(&self, x: Var, name: &str) -> Result<(usize, usize, Vec<S>, Vec<S>)> {
        let (m, n) = self.dims2(x, name)?;
        let xs = self.vals(x);
        let mut probs = vec![S::zero(); m * n];
        let mut logp = vec![S::zero(); m * n];
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let total: f64 = row.iter().map(|&v| (v - max).as_f64().exp()).sum();
            let lse = total.ln();
            for j in 0..n {
                let shifted = (row[j] - max).as_f64();
                probs[i * n + j] = S::of((shifted - lse).exp());
                logp[i * n + j] = S::of(shifted - lse);
            }
        }
        Ok((m, n, probs, logp))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (m, n, probs, _) = self.softmax_rows(x, "softmax")?;
        self.push("softmax", Tensor::new(vec![m, n], probs)?, Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (m, n, _, logp) = self.softmax_rows(x, "log_softmax")?;
        self.push(
            "log_softmax",
            Tensor::new(vec![m, n], logp)?,
            Op::LogSoftmax(x),
        )
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of the row width.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "layer_norm")?;
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::config(
                "layer_norm: affine parameters do not match row width",
            ));
        }
        let xs = self.vals(x);
        let g = self.vals(gamma);
        let b = self.vals(beta);
        let mut out = vec![S::zero(); m * n];
        let mut rstd = Vec::with_capacity(m);
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mean = sum64(row.iter().copied()) / n as f64;
            let var = row
                .iter()
                .map(|&v| (v.as_f64() - mean).powi(2))
                .sum::<f64>()
                / n as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for j in 0..n {
                let xhat = (row[j].as_f64() - mean) * r;
                out[i * n + j] = S::of(xhat) * g[j] + b[j];
            }
            rstd.push(S::of(r));
        }
        self.push(
            "layer_norm",
            Tensor::new(vec![m, n], out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                rstd,
            },
        )
    }

    /// Rows of `table[vocab, width]` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, width) = self.dims2(table, "embedding")?;
        if ids.is_empty() {
            return Err(Error::config("embedding: empty id list"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::config(format!(
                "embedding: id {bad} outside table of {vocab} rows"
            )));
        }
        let t = self.vals(table);
        let mut out = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            out.extend_from_slice(&t[id * width..(id + 1) * width]);
        }
        self.push(
            "embedding",
            Tensor::new(vec![ids.len(), width], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    /// Multi-head causal self-attention over packed sequences.
    ///
    /// `qkv` is `[rows, 3·width]` holding query, key and value blocks side by side;
    /// each segment attends only within itself and only to earlier-or-equal rows.
    pub fn causal_attention(
        &mut self,
        qkv: Var,
        segments: &[Segment],
        heads: usize,
    ) -> Result<Var> {
        let (rows, w3) = self.dims2(qkv, "attention")?;
        if heads == 0 || w3 % (3 * heads) != 0 {
            return Err(Error::config(format!(
                "attention: width {} not divisible into {heads} heads",
                w3 / 3
            )));
        }
        let mut covered = 0;
        for s in segments {
            if s.start != covered || s.len == 0 {
                return Err(Error::config(
                    "attention: segments must tile the rows contiguously",
                ));
            }
            covered += s.len;
        }
        if covered != rows {
            return Err(Error::config("attention: segments do not cover every row"));
        }
        let width = w3 / 3;
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let x = self.vals(qkv);
        let mut out = vec![S::zero(); rows * width];
        let mut probs = Vec::new();
        let mut scores = Vec::new();
        for seg in segments {
            for h in 0..heads {
                let (qo, ko, vo) = (h * dh, width + h * dh, 2 * width + h * dh);
                for i in 0..seg.len {
                    let qi = &x[(seg.start + i) * w3 + qo..][..dh];
                    scores.clear();
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let kj = &x[(seg.start + j) * w3 + ko..][..dh];
                        let s = sum64(qi.iter().zip(kj).map(|(&a, &b)| a * b)) * scale;
                        max = max.max(s);
                        scores.push(s);
                    }
                    let total: f64 = scores.iter().map(|s| (s - max).exp()).sum();
                    let orow = &mut out[(seg.start + i) * width + h * dh..][..dh];
                    for (j, s) in scores.iter().enumerate() {
                        let p = S::of((s - max).exp() / total);
                        probs.push(p);
                        let vj = &x[(seg.start + j) * w3 + vo..][..dh];
                        for (o, &v) in orow.iter_mut().zip(vj) {
                            *o += p * v;
                        }
                    }
                }
            }
        }
        self.push(
            "attention",
            Tensor::new(vec![rows, width], out)?,
            Op::Attention {
                qkv,
                segments: segments.to_vec(),
                heads,
                probs,
            },
        )
    }

    /// Mean over `rows` of `−log softmax(logits[row])[target]`.
    pub fn cross_entropy(&mut self, logits: Var, rows: &[usize], targets: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(logits, "cross_entropy")?;
        if rows.len() != targets.len() || rows.is_empty() {
            return Err(Error::config(
                "cross_entropy: need equally many (non-zero) rows and targets",
            ));
        }
        if rows.iter().any(|&r| r >= m) || targets.iter().any(|&t| t >= n) {
            return Err(Error::config(
                "cross_entropy: row or target index out of range",
            ));
        }
        let xs = self.vals(logits);
        let mut probs = Vec::with_capacity(rows.len() * n);
        let mut total = 0.0;
        for (&r, &t) in rows.iter().zip(targets) {
            let row = &xs[r * n..(r + 1) * n];
            let max = row.iter().copied().fold(S::neg_infinity(), S::max).as_f64();
            let lse = row
                .iter()
                .map(|v| (v.as_f64() - max).exp())
                .sum::<f64>()
                .ln()
                + max;
            total += lse - row[t].as_f64();
            probs.extend(row.iter().map(|v| S::of((v.as_f64() - lse).exp())));
        }
        let loss = total / rows.len() as f64;
        self.push(
            "cross_entropy",
            Tensor::scalar(S::of(loss)),
            Op::CrossEntropy {
                logits,
                rows: rows.to_vec(),
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = sum64(self.vals(x).iter().copied());
        self.push("sum", Tensor::scalar(S::of(s)), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s = sum64(self.vals(x).iter().copied()) / n as f64;
        self.push("mean", Tensor::scalar(S::of(s)), Op::Mean(x))
    }

    /// Sum over the trailing axes: `[m, ...] → [m]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let m = v.rows();
        let out: Vec<S> = (0..m)
            .map(|i| S::of(sum64(v.row(i).iter().copied())))
            .collect();
        self.push("sum_rows", Tensor::new(vec![m], out)?, Op::SumRows(x))
    }

    /// Mean over the leading axis: `[m, n] → [n]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "mean_rows")?;
        let xs = self.vals(x);
        let out: Vec<S> = (0..n)
            .map(|j| S::of((0..m).map(|i| xs[i * n + j].as_f64()).sum::<f64>() / m as f64))
            .collect();
        self.push("mean_rows", Tensor::new(vec![n], out)?, Op::MeanRows(x))
    }

    /// Selects leading-axis slices by index (repeats allowed).
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let (m, w) = (v.rows(), v.row_len());
        if index.is_empty() || index.iter().any(|&i| i >= m) {
            return Err(Error::config("gather: empty or out-of-range index"));
        }
        let mut out = Vec::with_capacity(index.len() * w);
        for &i in index {
            out.extend_from_slice(v.row(i));
        }
        let mut shape = v.shape().to_vec();
        shape[0] = index.len();
        self.push(
            "gather",
            Tensor::new(shape, out)?,
            Op::Gather {
                x,
                index: index.to_vec(),
            },
        )
    }

    /// `out[i] = x[i, index[i]]`.
    pub fn pick(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(x, "pick")?;
        if index.len() != m || index.iter().any(|&j| j >= n) {
            return Err(Error::config("pick: index length or range mismatch"));
        }
        let xs = self.vals(x);
        let out: Vec<S> = index
            .iter()
            .enumerate()
            .map(|(i, &j)| xs[i * n + j])
            .collect();
        self.push(
            "pick",
            Tensor::new(vec![m], out)?,
            Op::Pick {
                x,
                index: index.to_vec(),
            },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, Op::Reshape(x))
    }

    /// Gradients of scalar `loss` with respect to every node.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Backpropagates `loss` and adds parameter gradients into `store`.
    ///
    /// Gradients accumulate: calling twice without `zero_grad` doubles them.
    pub fn backward(&self, loss: Var, store: &mut ParameterStore<S>) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::non_finite(format!("backward ({})", store.name(*id))));
                }
                store.get_mut(*id).accumulate_grad(g);
            }
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[idx];
        let out = node.value.values();
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [S])| {
            let buf = grads[v.0].get_or_insert_with(|| vec![S::zero(); nodes[v.0].value.len()]);
            f(buf);
        };
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (av, bv) = (self.vals(*a), self.vals(*b));
                acc(*a, &mut |da| S::gemm(m, n, k, g, false, bv, true, da, true));
                acc(*b, &mut |db| S::gemm(k, m, n, av, true, g, false, db, true));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.vals(*a), self.vals(*b));
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (self.vals(*a), self.vals(*b));
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        if av[i] <= bv[i] {
                            d[i] += g[i];
                        }
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        if av[i] > bv[i] {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::AddRow { x, bias } => {
                let n = self.value(*bias).len();
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g));
                acc(*bias, &mut |d| {
                    let mut sums = vec![0.0f64; n];
                    for (i, &gv) in g.iter().enumerate() {
                        sums[i % n] += gv.as_f64();
                    }
                    d.iter_mut().zip(sums).for_each(|(d, s)| *d += S::of(s));
                });
            }
            Op::Scale(x, f) => acc(*x, &mut |d| {
                d.iter_mut().zip(g).for_each(|(d, &g)| *d += g * *f)
            }),
            Op::Offset(x) | Op::Reshape(x) => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d += g))
            }
            Op::Gelu(x) => {
                let xv = self.vals(*x);
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * S::of(gelu_parts(xv[i].as_f64()).1);
                    }
                });
            }
            Op::Exp(x) => acc(*x, &mut |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * out[i];
                }
            }),
            Op::Log(x) => {
                let xv = self.vals(*x);
                let floor = S::of(LOG_FLOOR);
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        if xv[i] > floor {
                            d[i] += g[i] / xv[i];
                        }
                    }
                });
            }
            Op::Square(x) => {
                let xv = self.vals(*x);
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * (xv[i] + xv[i]);
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.vals(*x);
                acc(*x, &mut |d| {
                    for i in 0..d.len() {
                        if xv[i] >= *lo && xv[i] <= *hi {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let n = node.value.row_len();
                acc(*x, &mut |d| {
                    for (r, (grow, prow)) in g.chunks(n).zip(out.chunks(n)).enumerate() {
                        let dot = sum64(grow.iter().zip(prow).map(|(&a, &b)| a * b));
                        let dot = S::of(dot);
                        for j in 0..n {
                            d[r * n + j] += prow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let n = node.value.row_len();
                acc(*x, &mut |d| {
                    for (r, (grow, lrow)) in g.chunks(n).zip(out.chunks(n)).enumerate() {
                        let total = S::of(sum64(grow.iter().copied()));
                        for j in 0..n {
                            d[r * n + j] += grow[j] - lrow[j].exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                rstd,
            } => {
                let xv = self.vals(*x);
                let gv = self.vals(*gamma);
                let n = gv.len();
                let m = xv.len() / n;
                // recompute normalized activations from the saved statistics
                let mut xhat = vec![0.0f64; m * n];
                for i in 0..m {
                    let row = &xv[i * n..(i + 1) * n];
                    let mean = sum64(row.iter().copied()) / n as f64;
                    for j in 0..n {
                        xhat[i * n + j] = (row[j].as_f64() - mean) * rstd[i].as_f64();
                    }
                }
                acc(*gamma, &mut |d| {
                    let mut sums = vec![0.0f64; n];
                    for i in 0..m * n {
                        sums[i % n] += g[i].as_f64() * xhat[i];
                    }
                    d.iter_mut().zip(sums).for_each(|(d, s)| *d += S::of(s));
                });
                acc(*beta, &mut |d| {
                    let mut sums = vec![0.0f64; n];
                    for i in 0..m * n {
                        sums[i % n] += g[i].as_f64();
                    }
                    d.iter_mut().zip(sums).for_each(|(d, s)| *d += S::of(s));
                });
                acc(*x, &mut |d| {
                    for i in 0..m {
                        let r = rstd[i].as_f64();
                        let mut mean_dxhat = 0.0;
                        let mut mean_dxhat_xhat = 0.0;
                        for j in 0..n {
                            let dxh = g[i * n + j].as_f64() * gv[j].as_f64();
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xhat[i * n + j];
                        }
                        mean_dxhat /= n as f64;
                        mean_dxhat_xhat /= n as f64;
                        for j in 0..n {
                            let dxh = g[i * n + j].as_f64() * gv[j].as_f64();
                            d[i * n + j] +=
                                S::of(r * (dxh - mean_dxhat - xhat[i * n + j] * mean_dxhat_xhat));
                        }
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let w = self.shape(*table)[1];
                acc(*table, &mut |d| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..w {
                            d[id * w + j] += g[r * w + j];
                        }
                    }
                });
            }
            Op::Attention {
                qkv,
                segments,
                heads,
                probs,
            } => {
                let x = self.vals(*qkv);
                let w3 = self.shape(*qkv)[1];
                let width = w3 / 3;
                let dh = width / heads;
                let scale = S::of(1.0 / (dh as f64).sqrt());
                acc(*qkv, &mut |d| {
                    let mut p_off = 0;
                    let mut dp = Vec::new();
                    for seg in segments {
                        for h in 0..*heads {
                            let (qo, ko, vo) = (h * dh, width + h * dh, 2 * width + h * dh);
                            for i in 0..seg.len {
                                let ri = seg.start + i;
                                let gi = &g[ri * width + h * dh..][..dh];
                                let p = &probs[p_off..p_off + i + 1];
                                p_off += i + 1;
                                dp.clear();
                                for j in 0..=i {
                                    let vj = &x[(seg.start + j) * w3 + vo..][..dh];
                                    dp.push(S::of(sum64(gi.iter().zip(vj).map(|(&a, &b)| a * b))));
                                }
                                let dot = S::of(sum64(p.iter().zip(&dp).map(|(&a, &b)| a * b)));
                                for j in 0..=i {
                                    let rj = seg.start + j;
                                    for t in 0..dh {
                                        d[rj * w3 + vo + t] += p[j] * gi[t];
                                    }
                                    let ds = p[j] * (dp[j] - dot) * scale;
                                    if ds != S::zero() {
                                        for t in 0..dh {
                                            d[ri * w3 + qo + t] += ds * x[rj * w3 + ko + t];
                                            d[rj * w3 + ko + t] += ds * x[ri * w3 + qo + t];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                rows,
                targets,
                probs,
            } => {
                let n = self.shape(*logits)[1];
                let scale = g[0] / S::of(rows.len() as f64);
                acc(*logits, &mut |d| {
                    for (k, (&r, &t)) in rows.iter().zip(targets).enumerate() {
                        for j in 0..n {
                            d[r * n + j] += probs[k * n + j] * scale;
                        }
                        d[r * n + t] -= scale;
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => {
                let n = S::of(self.value(*x).len() as f64);
                acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::SumRows(x) => {
                let w = self.value(*x).row_len();
                acc(*x, &mut |d| {
                    for (i, d) in d.iter_mut().enumerate() {
                        *d += g[i / w];
                    }
                });
            }
            Op::MeanRows(x) => {
                let (m, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                let inv = S::of(1.0 / m as f64);
                acc(*x, &mut |d| {
                    for (i, d) in d.iter_mut().enumerate() {
                        *d += g[i % n] * inv;
                    }
                });
            }
            Op::Gather { x, index } => {
                let w = self.value(*x).row_len();
                acc(*x, &mut |d| {
                    for (r, &i) in index.iter().enumerate() {
                        for j in 0..w {
                            d[i * w + j] += g[r * w + j];
                        }
                    }
                });
            }
            Op::Pick { x, index } => {
                let n = self.shape(*x)[1];
                acc(*x, &mut |d| {
                    for (i, &j) in index.iter().enumerate() {
                        d[i * n + j] += g[i];
                    }
                });
            }
        }
    }
}
