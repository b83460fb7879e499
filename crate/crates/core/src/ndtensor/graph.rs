//! Tape-style computation graph.
//!
//! Nodes are appended in construction order, which is therefore a valid
//! topological order; [`Graph::backward`] walks the nodes strictly in
//! reverse. Every operation keeps whatever it needs for its vector-Jacobian
//! product inside its [`Op`] record.

use super::tensor::{kernels, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulBt(Var, Var),
    /// `b` broadcasts over the leading axes of `a`.
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu {
        x: Var,
        tanh: Vec<f64>,
    },
    RowSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    MeanRows(Var),
    MeanScalars(Vec<Var>),
    CrossEntropyMasked {
        logits: Var,
        targets: Vec<usize>,
        rows: Vec<usize>,
        probs: Vec<f64>,
    },
    MseMasked {
        pred: Var,
        target: Vec<f64>,
        rows: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn check_rows(context: &'static str, rows: &[usize], bound: usize) -> Result<()> {
    match rows.iter().find(|&&r| r >= bound) {
        Some(&index) => Err(Error::IndexOutOfRange { context, index, bound }),
        None => Ok(()),
    }
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

    fn push(&mut self, mut value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].value.requires_grad());
        value.set_requires_grad(rg);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that does not participate in differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        let mut value = value;
        value.set_requires_grad(false);
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is populated by [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        let mut value = value;
        value.set_requires_grad(true);
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2("matmul")?;
        let (k2, p) = tb.dims2("matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let data = kernels::matmul(ta.data(), tb.data(), m, k, p);
        let out = Tensor::new(vec![m, p], data)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` for `a: m×k`, `b: p×k`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2("matmul_bt")?;
        let (p, k2) = tb.dims2("matmul_bt")?;
        if k != k2 {
            return Err(mismatch("matmul_bt", ta, tb));
        }
        let data = kernels::matmul_bt(ta.data(), tb.data(), m, k, p);
        let out = Tensor::new(vec![m, p], data)?;
        Ok(self.push(out, Op::MatMulBt(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(mismatch("add", ta, tb));
        }
        let w = tb.numel();
        let mut data = ta.data().to_vec();
        for chunk in data.chunks_mut(w) {
            for (x, y) in chunk.iter_mut().zip(tb.data()) {
                *x += y;
            }
        }
        let out = Tensor::new(sa.to_vec(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * s).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).unwrap();
        self.push(out, Op::Scale(a, s), &[a])
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let tanh: Vec<f64> = ta.data().iter().map(|&x| kernels::gelu_tanh(x)).collect();
        let data = ta
            .data()
            .iter()
            .zip(&tanh)
            .map(|(&x, &t)| kernels::gelu_with(x, t))
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), data).unwrap();
        self.push(out, Op::Gelu { x: a, tanh }, &[a])
    }

    /// Softmax over the last axis.
    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let data = kernels::row_softmax(ta.data(), ta.cols(), "row_softmax")?;
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::RowSoftmax(a), &[a]))
    }

    /// Layer normalization over the last axis (population variance).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if tg.numel() != d || tg.shape().len() != 1 {
            return Err(mismatch("layer_norm", tx, tg));
        }
        if tb.numel() != d || tb.shape().len() != 1 {
            return Err(mismatch("layer_norm", tx, tb));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut data = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                data[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = tx.dims2("slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::IndexOutOfRange {
                context: "slice_cols",
                index: start + len,
                bound: c,
            });
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&tx.row(i)[start..start + len]);
        }
        let out = Tensor::new(vec![r, len], data)?;
        Ok(self.push(out, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        let (r, _) = first.dims2("concat_cols")?;
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            let (pr, pc) = t.dims2("concat_cols")?;
            if pr != r {
                return Err(mismatch("concat_cols", first, t));
            }
            total += pc;
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![r, total], data)?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Rows of a matrix in the given order (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = tx.dims2("gather_rows")?;
        check_rows("gather_rows", rows, r)?;
        if rows.is_empty() {
            return Err(Error::InvalidShape {
                shape: vec![0, c],
                reason: "gather_rows selects no rows".into(),
            });
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            data.extend_from_slice(tx.row(i));
        }
        let out = Tensor::new(vec![rows.len(), c], data)?;
        Ok(self.push(out, Op::GatherRows { x, rows: rows.to_vec() }, &[x]))
    }

    /// Mean over rows of a matrix, producing a `1 × c` matrix.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = tx.dims2("mean_rows")?;
        let mut data = vec![0.0; c];
        for i in 0..r {
            for (d, v) in data.iter_mut().zip(tx.row(i)) {
                *d += v;
            }
        }
        for d in &mut data {
            *d /= r as f64;
        }
        let out = Tensor::new(vec![1, c], data)?;
        Ok(self.push(out, Op::MeanRows(x), &[x]))
    }

    /// Average of scalar nodes.
    pub fn mean_scalars(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Data("mean of zero scalars".into()));
        }
        let mut s = 0.0;
        for &x in xs {
            let t = self.value(x);
            if !t.is_scalar() {
                return Err(Error::NotScalar(t.shape().to_vec()));
            }
            s += t.item();
        }
        let out = Tensor::scalar(s / xs.len() as f64);
        Ok(self.push(out, Op::MeanScalars(xs.to_vec()), xs))
    }

    /// Mean over `mask_rows` of `-log softmax(logits[i])[targets[i]]`.
    ///
    /// `targets` has one entry per row of `logits`; entries outside the
    /// mask are ignored.
    pub fn cross_entropy_masked(&mut self, logits: Var, targets: &[usize], mask_rows: &[usize]) -> Result<Var> {
        if mask_rows.is_empty() {
            return Err(Error::EmptyMask("cross_entropy_masked"));
        }
        let tl = self.value(logits);
        let (n, vocab) = tl.dims2("cross_entropy_masked")?;
        if targets.len() != n {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy_masked",
                left: tl.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        check_rows("cross_entropy_masked rows", mask_rows, n)?;
        let mut probs = Vec::with_capacity(mask_rows.len() * vocab);
        let mut loss = 0.0;
        for &i in mask_rows {
            let t = targets[i];
            if t >= vocab {
                return Err(Error::IndexOutOfRange {
                    context: "cross_entropy_masked target",
                    index: t,
                    bound: vocab,
                });
            }
            let row = tl.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return Err(Error::DegenerateRow {
                    op: "cross_entropy_masked",
                    row: i,
                });
            }
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - row[t];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let out = Tensor::scalar(loss / mask_rows.len() as f64);
        Ok(self.push(
            out,
            Op::CrossEntropyMasked {
                logits,
                targets: targets.to_vec(),
                rows: mask_rows.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Mean over masked rows and all channels of `(pred - target)²`.
    pub fn mse_masked(&mut self, pred: Var, target: &Tensor, mask_rows: &[usize]) -> Result<Var> {
        if mask_rows.is_empty() {
            return Err(Error::EmptyMask("mse_masked"));
        }
        let tp = self.value(pred);
        if tp.shape() != target.shape() {
            return Err(mismatch("mse_masked", tp, target));
        }
        let (n, c) = tp.dims2("mse_masked")?;
        check_rows("mse_masked rows", mask_rows, n)?;
        let mut loss = 0.0;
        for &i in mask_rows {
            for (p, t) in tp.row(i).iter().zip(target.row(i)) {
                loss += (p - t) * (p - t);
            }
        }
        let out = Tensor::scalar(loss / (mask_rows.len() * c) as f64);
        Ok(self.push(
            out,
            Op::MseMasked {
                pred,
                target: target.data().to_vec(),
                rows: mask_rows.to_vec(),
            },
            &[pred],
        ))
    }

    /// Clears all gradients and re-arms [`Graph::backward`].
    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            *node.value.grad_slot() = None;
        }
        self.backward_done = false;
    }

    /// Populates `grad` on every node that requires it with `∂loss/∂node`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::NotScalar(lt.shape().to_vec()));
        }
        // Gradient buffers start empty: the first contribution is moved in and
        // later ones are added. Nodes nothing flows into get zeros at the end.
        for node in &mut self.nodes {
            *node.value.grad_slot() = None;
        }
        self.backward_done = true;
        if self.value(loss).requires_grad() {
            *self.nodes[loss.0].value.grad_slot() = Some(vec![1.0]);
            for i in (0..=loss.0).rev() {
                let (before, rest) = self.nodes.split_at_mut(i);
                let node = &rest[0];
                if let Some(gout) = node.value.grad() {
                    propagate(before, node, gout)?;
                }
            }
        }
        for node in &mut self.nodes {
            if node.value.requires_grad() && node.value.grad().is_none() {
                *node.value.grad_slot() = Some(vec![0.0; node.value.numel()]);
            }
        }
        Ok(())
    }
}

fn needs(nodes: &[Node], v: Var) -> bool {
    nodes[v.0].value.requires_grad()
}

fn acc(nodes: &mut [Node], v: Var, contrib: Vec<f64>) {
    match nodes[v.0].value.grad_slot() {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(&contrib) {
                *a += b;
            }
        }
        slot => *slot = Some(contrib),
    }
}

/// The gradient buffer of `v`, zero-filled on first use.
fn slot(nodes: &mut [Node], v: Var) -> &mut Vec<f64> {
    let n = nodes[v.0].value.numel();
    nodes[v.0].value.grad_slot().get_or_insert_with(|| vec![0.0; n])
}

fn propagate(nodes: &mut [Node], node: &Node, gout: &[f64]) -> Result<()> {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let (m, k) = nodes[a.0].value.dims2("matmul")?;
            let p = out.cols();
            if needs(nodes, a) {
                let ga = kernels::matmul_bt(gout, nodes[b.0].value.data(), m, p, k);
                acc(nodes, a, ga);
            }
            if needs(nodes, b) {
                let gb = kernels::matmul_at(nodes[a.0].value.data(), gout, m, k, p);
                acc(nodes, b, gb);
            }
        }
        &Op::MatMulBt(a, b) => {
            let (m, k) = nodes[a.0].value.dims2("matmul_bt")?;
            let p = out.cols();
            if needs(nodes, a) {
                let ga = kernels::matmul(gout, nodes[b.0].value.data(), m, p, k);
                acc(nodes, a, ga);
            }
            if needs(nodes, b) {
                let gb = kernels::matmul_at(gout, nodes[a.0].value.data(), m, p, k);
                acc(nodes, b, gb);
            }
        }
        &Op::Add(a, b) => {
            if needs(nodes, a) {
                acc(nodes, a, gout.to_vec());
            }
            if needs(nodes, b) {
                let w = nodes[b.0].value.numel();
                let mut gb = vec![0.0; w];
                for chunk in gout.chunks(w) {
                    for (x, y) in gb.iter_mut().zip(chunk) {
                        *x += y;
                    }
                }
                acc(nodes, b, gb);
            }
        }
        &Op::Mul(a, b) => {
            if needs(nodes, a) {
                let ga: Vec<f64> = gout.iter().zip(nodes[b.0].value.data()).map(|(g, y)| g * y).collect();
                acc(nodes, a, ga);
            }
            if needs(nodes, b) {
                let gb: Vec<f64> = gout.iter().zip(nodes[a.0].value.data()).map(|(g, x)| g * x).collect();
                acc(nodes, b, gb);
            }
        }
        &Op::Scale(a, s) => {
            let ga: Vec<f64> = gout.iter().map(|g| g * s).collect();
            acc(nodes, a, ga);
        }
        Op::Gelu { x: a, tanh } => {
            let a = *a;
            let ga: Vec<f64> = gout
                .iter()
                .zip(nodes[a.0].value.data())
                .zip(tanh)
                .map(|((g, &x), &t)| g * kernels::gelu_grad_with(x, t))
                .collect();
            acc(nodes, a, ga);
        }
        &Op::RowSoftmax(a) => {
            let c = out.cols();
            let mut ga = vec![0.0; gout.len()];
            for ((y, gy), gx) in out.data().chunks(c).zip(gout.chunks(c)).zip(ga.chunks_mut(c)) {
                let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    gx[j] = y[j] * (gy[j] - dot);
                }
            }
            acc(nodes, a, ga);
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let d = out.cols();
            if needs(nodes, *gain) || needs(nodes, *bias) {
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                for (gy, h) in gout.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        gg[j] += gy[j] * h[j];
                        gb[j] += gy[j];
                    }
                }
                if needs(nodes, *gain) {
                    acc(nodes, *gain, gg);
                }
                if needs(nodes, *bias) {
                    acc(nodes, *bias, gb);
                }
            }
            if needs(nodes, *x) {
                let g = nodes[gain.0].value.data().to_vec();
                let mut gx = vec![0.0; gout.len()];
                for (r, ((gy, h), o)) in gout.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        let dh = gy[j] * g[j];
                        mean_dh += dh;
                        mean_dh_h += dh * h[j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        o[j] = rstd[r] * (gy[j] * g[j] - mean_dh - h[j] * mean_dh_h);
                    }
                }
                acc(nodes, *x, gx);
            }
        }
        &Op::SliceCols { x, start } => {
            let c = nodes[x.0].value.cols();
            let len = out.cols();
            let mut gx = vec![0.0; nodes[x.0].value.numel()];
            for (i, gy) in gout.chunks(len).enumerate() {
                gx[i * c + start..i * c + start + len].copy_from_slice(gy);
            }
            acc(nodes, x, gx);
        }
        Op::ConcatCols(parts) => {
            let total = out.cols();
            let mut offset = 0;
            for &p in parts {
                let pc = nodes[p.0].value.cols();
                if needs(nodes, p) {
                    let mut gp = Vec::with_capacity(nodes[p.0].value.numel());
                    for row in gout.chunks(total) {
                        gp.extend_from_slice(&row[offset..offset + pc]);
                    }
                    acc(nodes, p, gp);
                }
                offset += pc;
            }
        }
        Op::GatherRows { x, rows } => {
            let c = out.cols();
            let g = slot(nodes, *x);
            for (gy, &r) in gout.chunks(c).zip(rows) {
                for (a, b) in g[r * c..(r + 1) * c].iter_mut().zip(gy) {
                    *a += b;
                }
            }
        }
        &Op::MeanRows(x) => {
            let r = nodes[x.0].value.rows();
            let mut gx = Vec::with_capacity(nodes[x.0].value.numel());
            for _ in 0..r {
                gx.extend(gout.iter().map(|g| g / r as f64));
            }
            acc(nodes, x, gx);
        }
        Op::MeanScalars(xs) => {
            let share = gout[0] / xs.len() as f64;
            for &x in xs {
                if needs(nodes, x) {
                    acc(nodes, x, vec![share]);
                }
            }
        }
        Op::CrossEntropyMasked {
            logits,
            targets,
            rows,
            probs,
        } => {
            let vocab = nodes[logits.0].value.cols();
            let w = gout[0] / rows.len() as f64;
            let g = slot(nodes, *logits);
            for (p, &i) in probs.chunks(vocab).zip(rows) {
                let grow = &mut g[i * vocab..(i + 1) * vocab];
                for j in 0..vocab {
                    grow[j] += w * p[j];
                }
                grow[targets[i]] -= w;
            }
        }
        Op::MseMasked { pred, target, rows } => {
            let tp = &nodes[pred.0].value;
            let c = tp.cols();
            let w = 2.0 * gout[0] / (rows.len() * c) as f64;
            let mut gp = vec![0.0; tp.numel()];
            for &i in rows {
                for j in 0..c {
                    let k = i * c + j;
                    gp[k] += w * (tp.data()[k] - target[k]);
                }
            }
            acc(nodes, *pred, gp);
        }
    }
    Ok(())
}
