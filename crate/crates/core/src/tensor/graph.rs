use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{numel, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf(Option<ParamId>),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
        b_batched: bool,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Exp(Var),
    Log(Var),
    Neg(Var),
    Sum(Var),
    Mean(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    MaskedFill {
        x: Var,
        mask: Vec<bool>,
    },
    LogSoftmax(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Transpose(Var),
    Reshape(Var),
    NormalizeRows {
        x: Var,
        inv_norm: Vec<f64>,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    MaskedMeanPool {
        x: Var,
        weights: Vec<f64>,
        len: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients of the leaves of a graph after [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

/// A computation graph recorded during one forward pass.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order. The graph is meant to be dropped after `backward`.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

/// `c = alpha * op(a) * op(b) + beta * c` on strided row-major buffers.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len());
    assert!((k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(m * n <= c.len());
    // SAFETY: the asserts above keep every strided access inside the slices,
    // and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Sum that does not depend on the order of the terms: values are added
/// in ascending order.
pub fn canonical_sum(xs: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = xs.collect();
    v.sort_by(f64::total_cmp);
    v.iter().sum()
}

/// `0.5 * (1 + tanh(z))` written as a logistic of `2z`.
fn gelu_gate(x: f64) -> f64 {
    let z = GELU_C * (x + 0.044715 * x * x * x);
    1.0 / (1.0 + libm::exp(-2.0 * z))
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, f: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    f(buf);
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    // ---- leaves -------------------------------------------------------

    /// A constant input; receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf(None), t, false)
    }

    /// A free input whose gradient is reported in [`Gradients`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf(None), t, true)
    }

    /// Copies a parameter into the graph. Its gradient is accumulated into
    /// the store by `backward` when the parameter requires grad.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(Op::Leaf(Some(id)), p.value.clone(), p.requires_grad)
    }

    // ---- elementwise --------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch("add", sa, sb));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(sa.to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Add(a, b), t, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    /// Adds a vector `b` (length = last dim of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let n = last_dim(sa);
        if sb.len() != 1 || sb[0] != n {
            return Err(mismatch("add_row", sa, sb));
        }
        let bd = self.data(b);
        let mut data = self.data(a).to_vec();
        for row in data.chunks_mut(n) {
            for (x, y) in row.iter_mut().zip(bd) {
                *x += y;
            }
        }
        let t = Tensor::new(sa.to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::AddRow(a, b), t, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(mismatch("mul", sa, sb));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(sa.to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Op::Mul(a, b), t, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.data(a).iter().map(|x| x * c).collect();
        let t = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        let rg = self.rg(&[a]);
        self.push(Op::Scale(a, c), t, rg)
    }

    /// Multiplies every element of `a` by the one-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(mismatch("scale_by", self.shape(a), self.shape(s)));
        }
        let c = self.data(s)[0];
        let data = self.data(a).iter().map(|x| x * c).collect();
        let t = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        let rg = self.rg(&[a, s]);
        Ok(self.push(Op::ScaleBy(a, s), t, rg))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let data: Vec<f64> = self.data(a).iter().map(|x| libm::exp(*x)).collect();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain {
                op: "exp",
                detail: format!("overflow at input {}", self.data(a)[i]),
            });
        }
        let t = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Exp(a), t, rg))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.data(a).iter().find(|x| !(**x > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {x}"),
            });
        }
        let data = self.data(a).iter().map(|x| libm::log(*x)).collect();
        let t = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Log(a), t, rg))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|x| -x).collect();
        let t = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        let rg = self.rg(&[a]);
        self.push(Op::Neg(a), t, rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self
            .data(a)
            .iter()
            .map(|&x| x * gelu_gate(x))
            .collect();
        let t = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        let rg = self.rg(&[a]);
        self.push(Op::Gelu(a), t, rg)
    }

    /// Replaces entries where `mask` is true by `fill`.
    pub fn masked_fill(&mut self, a: Var, mask: &[bool], fill: f64) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(mismatch("masked_fill", self.shape(a), &[mask.len()]));
        }
        let data = self
            .data(a)
            .iter()
            .zip(mask)
            .map(|(x, m)| if *m { fill } else { *x })
            .collect();
        let t = Tensor {
            shape: self.shape(a).to_vec(),
            data,
        };
        let rg = self.rg(&[a]);
        Ok(self.push(
            Op::MaskedFill {
                x: a,
                mask: mask.to_vec(),
            },
            t,
            rg,
        ))
    }

    // ---- reductions ---------------------------------------------------

    /// Sum of all entries. Terms are added in ascending order so the result
    /// is invariant to permutations of the input.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = canonical_sum(self.data(a).iter().copied());
        let rg = self.rg(&[a]);
        self.push(Op::Sum(a), Tensor::scalar(s), rg)
    }

    /// Mean of all entries, summed like [`Graph::sum`].
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::Domain {
                op: "mean",
                detail: "empty tensor".into(),
            });
        }
        let s = canonical_sum(self.data(a).iter().copied());
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Mean(a), Tensor::scalar(s / n as f64), rg))
    }

    /// Per-sequence weighted mean of token rows.
    ///
    /// `a` has shape `[seqs * len, d]`; `mask[r]` marks the rows that take
    /// part in the mean of their sequence. Output shape is `[seqs, d]`.
    pub fn masked_mean_pool(&mut self, a: Var, len: usize, mask: &[bool]) -> Result<Var> {
        let shape = self.shape(a);
        if shape.len() != 2 || len == 0 || shape[0] % len != 0 || mask.len() != shape[0] {
            return Err(mismatch("masked_mean_pool", shape, &[mask.len(), len]));
        }
        let (rows, d) = (shape[0], shape[1]);
        let seqs = rows / len;
        let mut weights = vec![0.0; rows];
        for s in 0..seqs {
            let count = mask[s * len..(s + 1) * len].iter().filter(|m| **m).count();
            if count == 0 {
                return Err(Error::Domain {
                    op: "masked_mean_pool",
                    detail: format!("sequence {s} has no unmasked rows"),
                });
            }
            for t in 0..len {
                if mask[s * len + t] {
                    weights[s * len + t] = 1.0 / count as f64;
                }
            }
        }
        let x = self.data(a);
        let mut out = vec![0.0; seqs * d];
        for (r, w) in weights.iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            let dst = &mut out[(r / len) * d..(r / len + 1) * d];
            for (o, v) in dst.iter_mut().zip(&x[r * d..(r + 1) * d]) {
                *o += w * v;
            }
        }
        let t = Tensor::new(vec![seqs, d], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::MaskedMeanPool { x: a, weights, len }, t, rg))
    }

    // ---- linear algebra ----------------------------------------------

    /// Matrix product `a @ b`.
    ///
    /// `a` is `[m, k]` or `[batch, m, k]`; `b` is `[k, n]` (shared across
    /// the batch) or `[batch, k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// Matrix product `a @ b^T` with `b` of shape `[n, k]` or `[batch, n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let op_name = if trans_b { "matmul_nt" } else { "matmul" };
        let (batch, m, k) = match sa.len() {
            2 => (1, sa[0], sa[1]),
            3 => (sa[0], sa[1], sa[2]),
            _ => return Err(mismatch(op_name, &sa, &sb)),
        };
        let (b_batched, kb, n) = match (sb.len(), trans_b) {
            (2, false) => (false, sb[0], sb[1]),
            (2, true) => (false, sb[1], sb[0]),
            (3, false) if sb[0] == batch && sa.len() == 3 => (true, sb[1], sb[2]),
            (3, true) if sb[0] == batch && sa.len() == 3 => (true, sb[2], sb[1]),
            _ => return Err(mismatch(op_name, &sa, &sb)),
        };
        if kb != k {
            return Err(mismatch(op_name, &sa, &sb));
        }
        let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
        let mut out = vec![0.0; batch * m * n];
        {
            let ad = self.data(a);
            let bd = self.data(b);
            for bi in 0..batch {
                let bs = if b_batched { &bd[bi * k * n..(bi + 1) * k * n] } else { bd };
                gemm(
                    m,
                    k,
                    n,
                    &ad[bi * m * k..(bi + 1) * m * k],
                    k,
                    1,
                    bs,
                    rsb,
                    csb,
                    0.0,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        let shape = if sa.len() == 3 {
            vec![batch, m, n]
        } else {
            vec![m, n]
        };
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Op::MatMul {
                a,
                b,
                trans_b,
                b_batched,
                batch,
                m,
                k,
                n,
            },
            t,
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(mismatch("transpose", s, &[]));
        }
        let (r, c) = (s[0], s[1]);
        let x = self.data(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Transpose(a), t, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(a).len() {
            return Err(mismatch("reshape", self.shape(a), shape));
        }
        let t = Tensor::new(shape.to_vec(), self.data(a).to_vec())?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Reshape(a), t, rg))
    }

    /// Concatenates along the first axis; trailing dims must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| mismatch("concat_rows", &[], &[]))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let s = self.shape(*p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(mismatch("concat_rows", &tail, s));
            }
            rows += s[0];
            data.extend_from_slice(self.data(*p));
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(Op::ConcatRows(parts.to_vec()), t, rg))
    }

    /// Concatenates 2-D tensors along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| mismatch("concat_cols", &[], &[]))?;
        let rows = self.shape(*first)[0];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.shape(*p);
            if s.len() != 2 || s[0] != rows {
                return Err(mismatch("concat_cols", &[rows], s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (p, w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.data(*p)[r * w..(r + 1) * w]);
            }
        }
        let t = Tensor::new(vec![rows, total], data)?;
        let rg = self.rg(parts);
        Ok(self.push(Op::ConcatCols(parts.to_vec()), t, rg))
    }

    /// Rows `start..start + rows` of a tensor (first axis).
    pub fn slice_rows(&mut self, a: Var, start: usize, rows: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.is_empty() || start + rows > s[0] {
            return Err(mismatch("slice_rows", &s, &[start, rows]));
        }
        let stride: usize = s[1..].iter().product();
        let data = self.data(a)[start * stride..(start + rows) * stride].to_vec();
        let mut shape = s.clone();
        shape[0] = rows;
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::SliceRows { x: a, start }, t, rg))
    }

    /// Looks up rows of `table` (`[vocab, d]`), giving `[ids.len(), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(mismatch("embedding", s, &[]));
        }
        let (v, d) = (s[0], s[1]);
        if let Some(bad) = ids.iter().find(|i| **i >= v) {
            return Err(Error::Domain {
                op: "embedding",
                detail: format!("id {bad} out of range for vocabulary {v}"),
            });
        }
        let tab = self.data(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&tab[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            t,
            rg,
        ))
    }

    /// Picks `a[r, idx[r]]` from every row of a 2-D tensor.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || s[0] != idx.len() || idx.iter().any(|i| *i >= s[1]) {
            return Err(mismatch("gather", s, &[idx.len()]));
        }
        let c = s[1];
        let x = self.data(a);
        let data = idx.iter().enumerate().map(|(r, i)| x[r * c + i]).collect();
        let t = Tensor::new(vec![idx.len()], data)?;
        let rg = self.rg(&[a]);
        Ok(self.push(
            Op::Gather {
                x: a,
                idx: idx.to_vec(),
            },
            t,
            rg,
        ))
    }

    // ---- normalization -----------------------------------------------

    /// Log-softmax along the last axis, computed with max subtraction.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        let n = last_dim(s);
        if n == 0 || s.is_empty() {
            return Err(Error::Domain {
                op: "log_softmax",
                detail: "empty axis".into(),
            });
        }
        let mut out = Vec::with_capacity(self.value(a).len());
        for row in self.data(a).chunks(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + libm::log(canonical_sum(row.iter().map(|x| libm::exp(x - mx))));
            out.extend(row.iter().map(|x| x - lse));
        }
        let t = Tensor::new(s.to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::LogSoftmax(a), t, rg))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        let n = last_dim(s);
        if n == 0 || s.is_empty() {
            return Err(Error::Domain {
                op: "softmax",
                detail: "empty axis".into(),
            });
        }
        let mut out = Vec::with_capacity(self.value(a).len());
        for row in self.data(a).chunks(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let start = out.len();
            out.extend(row.iter().map(|x| libm::exp(x - mx)));
            let z: f64 = out[start..].iter().sum();
            out[start..].iter_mut().for_each(|v| *v /= z);
        }
        let t = Tensor::new(s.to_vec(), out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Softmax(a), t, rg))
    }

    /// Layer normalization over the last axis with affine gain and bias.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let d = last_dim(&s);
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(mismatch("layer_norm", &s, self.shape(gain)));
        }
        let rows = self.value(a).len() / d;
        let mut xhat = Vec::with_capacity(rows * d);
        let mut inv_std = Vec::with_capacity(rows);
        for row in self.data(a).chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            inv_std.push(is);
            xhat.extend(row.iter().map(|x| (x - mean) * is));
        }
        let (gd, bd) = (self.data(gain), self.data(bias));
        let mut out = xhat.clone();
        for row in out.chunks_mut(d) {
            for ((x, g), b) in row.iter_mut().zip(gd).zip(bd) {
                *x = *x * g + b;
            }
        }
        let t = Tensor::new(s, out)?;
        let rg = self.rg(&[a, gain, bias]);
        Ok(self.push(
            Op::LayerNorm {
                x: a,
                gain,
                bias,
                xhat,
                inv_std,
            },
            t,
            rg,
        ))
    }

    /// Scales every row of a 2-D tensor to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let d = last_dim(&s);
        let mut inv_norm = Vec::new();
        let mut out = Vec::with_capacity(self.value(a).len());
        for row in self.data(a).chunks(d) {
            let norm = libm::sqrt(row.iter().map(|x| x * x).sum::<f64>());
            if norm == 0.0 {
                return Err(Error::ZeroNorm);
            }
            inv_norm.push(1.0 / norm);
            out.extend(row.iter().map(|x| x / norm));
        }
        let t = Tensor::new(s, out)?;
        let rg = self.rg(&[a]);
        Ok(self.push(Op::NormalizeRows { x: a, inv_norm }, t, rg))
    }

    /// Cosine similarity of two vectors as a scalar node.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 1 || sa != sb || sa[0] == 0 {
            return Err(mismatch("cosine_similarity", &sa, &sb));
        }
        let a2 = self.reshape(a, &[1, sa[0]])?;
        let b2 = self.reshape(b, &[1, sb[0]])?;
        let an = self.normalize_rows(a2)?;
        let bn = self.normalize_rows(b2)?;
        let p = self.mul(an, bn)?;
        Ok(self.sum(p))
    }

    /// All pairwise cosine similarities between rows: `[n, d] x [m, d] -> [n, m]`.
    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let an = self.normalize_rows(a)?;
        let bn = self.normalize_rows(b)?;
        self.matmul_nt(an, bn)
    }

    // ---- backward -----------------------------------------------------

    /// Reverse-mode sweep from a scalar root.
    ///
    /// Gradients of parameter leaves are added to `store` (accumulating
    /// across calls until [`ParamStore::zero_grad`]); gradients of free
    /// variables are returned.
    pub fn backward(&self, root: Var, store: &mut ParamStore) -> Result<Gradients> {
        let rs = self.shape(root);
        if self.value(root).len() != 1 {
            return Err(Error::NonScalarRoot(rs.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        let mut leaf_grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if let Op::Leaf(param) = node.op {
                match param {
                    Some(id) => store.accumulate(id, &g),
                    None => {
                        leaf_grads[idx] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                    }
                }
                continue;
            }
            self.backward_node(idx, &g, &mut grads);
        }
        Ok(Gradients { grads: leaf_grads })
    }

    fn backward_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let need = |v: Var| self.nodes[v.0].requires_grad;
        let len = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf(_) => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if need(v) {
                        accumulate(&mut grads[v.0], len(v), |buf| {
                            buf.iter_mut().zip(g).for_each(|(d, s)| *d += s)
                        });
                    }
                }
            }
            Op::AddRow(a, b) => {
                if need(*a) {
                    accumulate(&mut grads[a.0], len(*a), |buf| {
                        buf.iter_mut().zip(g).for_each(|(d, s)| *d += s)
                    });
                }
                if need(*b) {
                    let n = len(*b);
                    accumulate(&mut grads[b.0], n, |buf| {
                        for row in g.chunks(n) {
                            buf.iter_mut().zip(row).for_each(|(d, s)| *d += s);
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.data(*a), self.data(*b));
                if need(*a) {
                    accumulate(&mut grads[a.0], ad.len(), |buf| {
                        for i in 0..buf.len() {
                            buf[i] += g[i] * bd[i];
                        }
                    });
                }
                if need(*b) {
                    accumulate(&mut grads[b.0], bd.len(), |buf| {
                        for i in 0..buf.len() {
                            buf[i] += g[i] * ad[i];
                        }
                    });
                }
            }
            Op::Scale(a, c) => {
                accumulate(&mut grads[a.0], len(*a), |buf| {
                    buf.iter_mut().zip(g).for_each(|(d, s)| *d += s * c)
                });
            }
            Op::ScaleBy(a, s) => {
                let c = self.data(*s)[0];
                if need(*a) {
                    accumulate(&mut grads[a.0], len(*a), |buf| {
                        buf.iter_mut().zip(g).for_each(|(d, gs)| *d += gs * c)
                    });
                }
                if need(*s) {
                    let ad = self.data(*a);
                    let ds: f64 = ad.iter().zip(g).map(|(x, gs)| x * gs).sum();
                    accumulate(&mut grads[s.0], 1, |buf| buf[0] += ds);
                }
            }
            Op::MatMul {
                a,
                b,
                trans_b,
                b_batched,
                batch,
                m,
                k,
                n,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let (ad, bd) = (self.data(*a), self.data(*b));
                if need(*a) {
                    // dA = dC op(B)^T
                    let (rs, cs) = if *trans_b { (k, 1) } else { (1, n) };
                    accumulate(&mut grads[a.0], ad.len(), |buf| {
                        for bi in 0..batch {
                            let bs = if *b_batched {
                                &bd[bi * k * n..(bi + 1) * k * n]
                            } else {
                                bd
                            };
                            gemm(
                                m,
                                n,
                                k,
                                &g[bi * m * n..(bi + 1) * m * n],
                                n,
                                1,
                                bs,
                                rs,
                                cs,
                                1.0,
                                &mut buf[bi * m * k..(bi + 1) * m * k],
                            );
                        }
                    });
                }
                if need(*b) {
                    accumulate(&mut grads[b.0], bd.len(), |buf| {
                        for bi in 0..batch {
                            let dst = if *b_batched {
                                &mut buf[bi * k * n..(bi + 1) * k * n]
                            } else {
                                &mut buf[..]
                            };
                            let gs = &g[bi * m * n..(bi + 1) * m * n];
                            let as_ = &ad[bi * m * k..(bi + 1) * m * k];
                            if *trans_b {
                                // dB [n, k] = dC^T A
                                gemm(n, m, k, gs, 1, n, as_, k, 1, 1.0, dst);
                            } else {
                                // dB [k, n] = A^T dC
                                gemm(k, m, n, as_, 1, k, gs, n, 1, 1.0, dst);
                            }
                        }
                    });
                }
            }
            Op::Exp(a) => {
                accumulate(&mut grads[a.0], len(*a), |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] * out[i];
                    }
                });
            }
            Op::Log(a) => {
                let ad = self.data(*a);
                accumulate(&mut grads[a.0], ad.len(), |buf| {
                    for i in 0..buf.len() {
                        buf[i] += g[i] / ad[i];
                    }
                });
            }
            Op::Neg(a) => {
                accumulate(&mut grads[a.0], len(*a), |buf| {
                    buf.iter_mut().zip(g).for_each(|(d, s)| *d -= s)
                });
            }
            Op::Sum(a) => {
                accumulate(&mut grads[a.0], len(*a), |buf| {
                    buf.iter_mut().for_each(|d| *d += g[0])
                });
            }
            Op::Mean(a) => {
                let n = len(*a);
                let s = g[0] / n as f64;
                accumulate(&mut grads[a.0], n, |buf| buf.iter_mut().for_each(|d| *d += s));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let l = len(*p);
                    if need(*p) {
                        accumulate(&mut grads[p.0], l, |buf| {
                            buf.iter_mut()
                                .zip(&g[off..off + l])
                                .for_each(|(d, s)| *d += s)
                        });
                    }
                    off += l;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut col = 0;
                for p in parts {
                    let w = self.shape(*p)[1];
                    if need(*p) {
                        accumulate(&mut grads[p.0], rows * w, |buf| {
                            for r in 0..rows {
                                for j in 0..w {
                                    buf[r * w + j] += g[r * total + col + j];
                                }
                            }
                        });
                    }
                    col += w;
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                accumulate(&mut grads[table.0], len(*table), |buf| {
                    for (r, &i) in ids.iter().enumerate() {
                        buf[i * d..(i + 1) * d]
                            .iter_mut()
                            .zip(&g[r * d..(r + 1) * d])
                            .for_each(|(dst, s)| *dst += s);
                    }
                });
            }
            Op::MaskedFill { x, mask } => {
                accumulate(&mut grads[x.0], len(*x), |buf| {
                    for i in 0..buf.len() {
                        if !mask[i] {
                            buf[i] += g[i];
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let n = last_dim(node.value.shape());
                accumulate(&mut grads[a.0], len(*a), |buf| {
                    for ((dst, gr), yr) in buf.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                        let gs: f64 = gr.iter().sum();
                        for j in 0..n {
                            dst[j] += gr[j] - libm::exp(yr[j]) * gs;
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let n = last_dim(node.value.shape());
                accumulate(&mut grads[a.0], len(*a), |buf| {
                    for ((dst, gr), yr) in buf.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dst[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = len(*gain);
                let gd = self.data(*gain);
                if need(*x) {
                    accumulate(&mut grads[x.0], len(*x), |buf| {
                        let mut dxhat = vec![0.0; d];
                        for (r, is) in inv_std.iter().enumerate() {
                            let gr = &g[r * d..(r + 1) * d];
                            let xr = &xhat[r * d..(r + 1) * d];
                            let mut s1 = 0.0;
                            let mut s2 = 0.0;
                            for j in 0..d {
                                dxhat[j] = gr[j] * gd[j];
                                s1 += dxhat[j];
                                s2 += dxhat[j] * xr[j];
                            }
                            let dst = &mut buf[r * d..(r + 1) * d];
                            let df = d as f64;
                            for j in 0..d {
                                dst[j] += is / df * (df * dxhat[j] - s1 - xr[j] * s2);
                            }
                        }
                    });
                }
                if need(*gain) {
                    accumulate(&mut grads[gain.0], d, |buf| {
                        for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                buf[j] += gr[j] * xr[j];
                            }
                        }
                    });
                }
                if need(*bias) {
                    accumulate(&mut grads[bias.0], d, |buf| {
                        for gr in g.chunks(d) {
                            buf.iter_mut().zip(gr).for_each(|(b, s)| *b += s);
                        }
                    });
                }
            }
            Op::Gelu(a) => {
                let ad = self.data(*a);
                accumulate(&mut grads[a.0], ad.len(), |buf| {
                    for i in 0..buf.len() {
                        let x = ad[i];
                        let s = gelu_gate(x);
                        let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        let dydx = s + 2.0 * x * s * (1.0 - s) * dinner;
                        buf[i] += g[i] * dydx;
                    }
                });
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (r, c) = (s[0], s[1]);
                accumulate(&mut grads[a.0], r * c, |buf| {
                    for i in 0..r {
                        for j in 0..c {
                            buf[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                accumulate(&mut grads[a.0], len(*a), |buf| {
                    buf.iter_mut().zip(g).for_each(|(d, s)| *d += s)
                });
            }
            Op::NormalizeRows { x, inv_norm } => {
                let d = last_dim(node.value.shape());
                accumulate(&mut grads[x.0], len(*x), |buf| {
                    for (r, inv) in inv_norm.iter().enumerate() {
                        let yr = &out[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            buf[r * d + j] += (gr[j] - yr[j] * dot) * inv;
                        }
                    }
                });
            }
            Op::Gather { x, idx } => {
                let c = self.shape(*x)[1];
                accumulate(&mut grads[x.0], len(*x), |buf| {
                    for (r, i) in idx.iter().enumerate() {
                        buf[r * c + i] += g[r];
                    }
                });
            }
            Op::MaskedMeanPool { x, weights, len: l } => {
                let d = self.shape(*x)[1];
                let l = *l;
                accumulate(&mut grads[x.0], len(*x), |buf| {
                    for (r, w) in weights.iter().enumerate() {
                        if *w == 0.0 {
                            continue;
                        }
                        let src = &g[(r / l) * d..(r / l + 1) * d];
                        buf[r * d..(r + 1) * d]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(dst, s)| *dst += w * s);
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let s = self.shape(*x);
                let stride: usize = s[1..].iter().product();
                let off = start * stride;
                accumulate(&mut grads[x.0], len(*x), |buf| {
                    buf[off..off + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, s)| *d += s)
                });
            }
        }
    }
}
