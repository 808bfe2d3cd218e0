//! The autodiff tape: op records, forward kernels, and the backward sweep.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use super::{Result, Scalar, Tensor, TensorError};

static GRAPH_IDS: AtomicU64 = AtomicU64::new(1);

type NodeId = usize;

/// One recorded op. Variants store input node ids plus whatever constants
/// the local gradient rule needs; values are read back off the tape.
enum Op<T: Scalar> {
    /// Trainable input; gradients accumulate into the shared slot.
    Leaf { sink: Arc<Mutex<Vec<T>>> },
    /// Untracked input, recorded only so sibling rules can read its value.
    Const,
    Matmul { a: NodeId, b: NodeId },
    Transpose { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: T },
    AddBias { x: NodeId, bias: NodeId },
    Silu { x: NodeId },
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: T },
    SoftmaxMasked { x: NodeId, visible: Arc<Vec<bool>> },
    Sum { x: NodeId },
    Mean { x: NodeId },
    Reshape { x: NodeId },
    GatherRows { table: NodeId, indices: Arc<Vec<usize>> },
    ConcatRows { parts: Vec<NodeId> },
    ConcatCols { parts: Vec<NodeId> },
    SliceCols { x: NodeId, start: usize, len: usize },
}

struct Node<T: Scalar> {
    value: Arc<Vec<T>>,
    shape: Vec<usize>,
    op: Op<T>,
    needs_grad: bool,
}

struct Inner<T: Scalar> {
    nodes: Vec<Node<T>>,
    /// Dedupe map from tensor identity to its tape node.
    known: HashMap<usize, NodeId>,
}

/// Reverse-mode tape. Ops are methods; the backward sweep visits each
/// recorded node exactly once in reverse topological (= insertion) order.
///
/// A graph is single-threaded by design; independent graphs can run on
/// independent threads over the same (read-only) parameter tensors.
pub struct Graph<T: Scalar> {
    id: u64,
    recording: bool,
    inner: Mutex<Inner<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            id: GRAPH_IDS.fetch_add(1, Ordering::Relaxed),
            recording: true,
            inner: Mutex::new(Inner {
                nodes: Vec::new(),
                known: HashMap::new(),
            }),
        }
    }

    /// Computes values without recording; `backward` on results is an error.
    pub fn no_grad() -> Self {
        let mut g = Graph::new();
        g.recording = false;
        g
    }

    pub fn backward(&self, root: &Tensor<T>) -> Result<()> {
        backward(root, self)
    }

    #[cfg(test)]
    fn node_count(&self) -> usize {
        self.inner.lock().unwrap().nodes.len()
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Graph::new()
    }
}

fn check_finite<T: Scalar>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

/// Rows × last-dim view of an arbitrary-rank shape.
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        Some((last, rest)) => (rest.iter().product(), *last),
        None => (1, 1),
    }
}

impl<T: Scalar> Graph<T> {
    /// Registers `t` on the tape if needed, returning (node, tracks-grad).
    fn ensure_node(&self, inner: &mut Inner<T>, t: &Tensor<T>) -> Result<(NodeId, bool)> {
        if let Some((gid, nid)) = t.node() {
            if gid != self.id {
                return Err(TensorError::GraphMismatch);
            }
            return Ok((nid, inner.nodes[nid].needs_grad));
        }
        let key = t.ident();
        if let Some(&nid) = inner.known.get(&key) {
            return Ok((nid, inner.nodes[nid].needs_grad));
        }
        let (op, needs) = match t.grad_slot() {
            Some(sink) => (Op::Leaf { sink: sink.clone() }, true),
            None => (Op::Const, false),
        };
        let nid = inner.nodes.len();
        inner.nodes.push(Node {
            value: t.data_arc().clone(),
            shape: t.shape().to_vec(),
            op,
            needs_grad: needs,
        });
        inner.known.insert(key, nid);
        Ok((nid, needs))
    }

    /// Finishes an op: finiteness check, optional tape record.
    fn emit(
        &self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        inputs: &[&Tensor<T>],
        make_op: impl FnOnce(&[NodeId]) -> Op<T>,
    ) -> Result<Tensor<T>> {
        check_finite(op_name, &data)?;
        if !self.recording {
            return Tensor::from_vec(shape, data);
        }
        let mut inner = self.inner.lock().unwrap();
        let mut ids = Vec::with_capacity(inputs.len());
        let mut any = false;
        for t in inputs {
            let (nid, needs) = self.ensure_node(&mut inner, t)?;
            ids.push(nid);
            any |= needs;
        }
        if !any {
            return Tensor::from_vec(shape, data);
        }
        let out = Tensor::from_vec(shape.clone(), data)?;
        let nid = inner.nodes.len();
        inner.nodes.push(Node {
            value: out.data_arc().clone(),
            shape,
            op: make_op(&ids),
            needs_grad: true,
        });
        Ok(out.with_node(self.id, nid))
    }

    /// c[i,j] = Σ_t a[i,t]·b[t,j]
    pub fn matmul(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let (ash, bsh) = (a.shape(), b.shape());
        if ash.len() != 2 || bsh.len() != 2 || ash[1] != bsh[0] {
            return Err(TensorError::ShapeMismatch(format!(
                "matmul {:?} x {:?}",
                ash, bsh
            )));
        }
        let (m, k, n) = (ash[0], ash[1], bsh[1]);
        let data = matmul_raw(a.data(), b.data(), m, k, n);
        self.emit("matmul", vec![m, n], data, &[a, b], |ids| Op::Matmul {
            a: ids[0],
            b: ids[1],
        })
    }

    pub fn transpose(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let sh = x.shape();
        if sh.len() != 2 {
            return Err(TensorError::ShapeMismatch(format!("transpose {:?}", sh)));
        }
        let (r, c) = (sh[0], sh[1]);
        let src = x.data();
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        self.emit("transpose", vec![c, r], data, &[x], |ids| Op::Transpose {
            x: ids[0],
        })
    }

    pub fn add(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip("add", a, b, |x, y| x + y, |ids| Op::Add {
            a: ids[0],
            b: ids[1],
        })
    }

    pub fn sub(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip("sub", a, b, |x, y| x - y, |ids| Op::Sub {
            a: ids[0],
            b: ids[1],
        })
    }

    pub fn mul(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.zip("mul", a, b, |x, y| x * y, |ids| Op::Mul {
            a: ids[0],
            b: ids[1],
        })
    }

    fn zip(
        &self,
        name: &'static str,
        a: &Tensor<T>,
        b: &Tensor<T>,
        f: impl Fn(T, T) -> T,
        make_op: impl FnOnce(&[NodeId]) -> Op<T>,
    ) -> Result<Tensor<T>> {
        if a.shape() != b.shape() {
            return Err(TensorError::ShapeMismatch(format!(
                "{} {:?} vs {:?}",
                name,
                a.shape(),
                b.shape()
            )));
        }
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        self.emit(name, a.shape().to_vec(), data, &[a, b], make_op)
    }

    pub fn scale(&self, x: &Tensor<T>, c: T) -> Result<Tensor<T>> {
        let data = x.data().iter().map(|v| *v * c).collect();
        self.emit("scale", x.shape().to_vec(), data, &[x], |ids| Op::Scale {
            x: ids[0],
            c,
        })
    }

    /// Adds a length-d bias to every last-axis row of `x`.
    pub fn add_bias(&self, x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
        let (rows, d) = rows_cols(x.shape());
        if bias.shape() != [d] {
            return Err(TensorError::ShapeMismatch(format!(
                "add_bias {:?} + {:?}",
                x.shape(),
                bias.shape()
            )));
        }
        let bv = bias.data();
        let mut data = x.data().to_vec();
        for r in 0..rows {
            for j in 0..d {
                data[r * d + j] = data[r * d + j] + bv[j];
            }
        }
        self.emit("add_bias", x.shape().to_vec(), data, &[x, bias], |ids| {
            Op::AddBias {
                x: ids[0],
                bias: ids[1],
            }
        })
    }

    /// x · sigmoid(x)
    pub fn silu(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let data = x.data().iter().map(|&v| v * sigmoid(v)).collect();
        self.emit("silu", x.shape().to_vec(), data, &[x], |ids| Op::Silu {
            x: ids[0],
        })
    }

    /// Per last-axis row: (x−μ)/sqrt(var+eps)·gamma + beta, population variance.
    pub fn layernorm(
        &self,
        x: &Tensor<T>,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        eps: T,
    ) -> Result<Tensor<T>> {
        let (rows, d) = rows_cols(x.shape());
        if d < 1 || gamma.shape() != [d] || beta.shape() != [d] {
            return Err(TensorError::ShapeMismatch(format!(
                "layernorm x {:?}, gamma {:?}, beta {:?}",
                x.shape(),
                gamma.shape(),
                beta.shape()
            )));
        }
        if !(eps > T::zero()) {
            return Err(TensorError::BadArg("layernorm eps must be > 0".into()));
        }
        let (xs, gs, bs) = (x.data(), gamma.data(), beta.data());
        let mut data = vec![T::zero(); rows * d];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let (mu, var) = mean_var(row);
            let inv = (var + eps).sqrt().recip();
            for j in 0..d {
                data[r * d + j] = (row[j] - mu) * inv * gs[j] + bs[j];
            }
        }
        self.emit(
            "layernorm",
            x.shape().to_vec(),
            data,
            &[x, gamma, beta],
            |ids| Op::LayerNorm {
                x: ids[0],
                gamma: ids[1],
                beta: ids[2],
                eps,
            },
        )
    }

    /// Row-wise softmax over visible entries; masked entries are exactly 0.
    /// `visible` is row-major with the same element count as `scores`.
    pub fn softmax_masked(&self, scores: &Tensor<T>, visible: &[bool]) -> Result<Tensor<T>> {
        let (rows, n) = rows_cols(scores.shape());
        if visible.len() != rows * n {
            return Err(TensorError::ShapeMismatch(format!(
                "softmax_masked scores {:?} vs mask of {}",
                scores.shape(),
                visible.len()
            )));
        }
        let xs = scores.data();
        let mut data = vec![T::zero(); rows * n];
        for r in 0..rows {
            let row = &xs[r * n..(r + 1) * n];
            let vis = &visible[r * n..(r + 1) * n];
            // max-subtraction over visible entries for stability
            let mut hi = T::neg_infinity();
            for j in 0..n {
                if vis[j] && row[j] > hi {
                    hi = row[j];
                }
            }
            if hi == T::neg_infinity() {
                return Err(TensorError::EmptyRow { row: r });
            }
            let mut denom = T::zero();
            for j in 0..n {
                if vis[j] {
                    let e = (row[j] - hi).exp();
                    data[r * n + j] = e;
                    denom = denom + e;
                }
            }
            for j in 0..n {
                data[r * n + j] = data[r * n + j] / denom;
            }
        }
        let visible = Arc::new(visible.to_vec());
        self.emit(
            "softmax_masked",
            scores.shape().to_vec(),
            data,
            &[scores],
            |ids| Op::SoftmaxMasked {
                x: ids[0],
                visible,
            },
        )
    }

    pub fn sum(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.data().iter().copied().sum();
        self.emit("sum", vec![], vec![s], &[x], |ids| Op::Sum { x: ids[0] })
    }

    /// Shape change over the same flat data.
    pub fn reshape(&self, x: &Tensor<T>, shape: Vec<usize>) -> Result<Tensor<T>> {
        let numel: usize = shape.iter().product();
        if numel != x.numel() {
            return Err(TensorError::ShapeMismatch(format!(
                "reshape {:?} -> {:?}",
                x.shape(),
                shape
            )));
        }
        let data = x.data().to_vec();
        self.emit("reshape", shape, data, &[x], |ids| Op::Reshape { x: ids[0] })
    }

    pub fn mean(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.numel() == 0 {
            return Err(TensorError::BadArg("mean of empty tensor".into()));
        }
        let s: T = x.data().iter().copied().sum();
        let m = s / T::of_f64(x.numel() as f64);
        self.emit("mean", vec![], vec![m], &[x], |ids| Op::Mean { x: ids[0] })
    }

    /// Row lookup: out[i] = table[indices[i]]. Backward scatter-adds, so this
    /// doubles as the embedding op and the sequence-position readout.
    pub fn gather_rows(&self, table: &Tensor<T>, indices: &[usize]) -> Result<Tensor<T>> {
        let sh = table.shape();
        if sh.len() != 2 {
            return Err(TensorError::ShapeMismatch(format!("gather_rows {:?}", sh)));
        }
        let (rows, d) = (sh[0], sh[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TensorError::BadArg(format!(
                "gather_rows index {} out of {} rows",
                bad, rows
            )));
        }
        let src = table.data();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let indices = Arc::new(indices.to_vec());
        self.emit(
            "gather_rows",
            vec![indices.len(), d],
            data,
            &[table],
            |ids| Op::GatherRows {
                table: ids[0],
                indices,
            },
        )
    }

    /// Stacks 2-D tensors along axis 0. All parts must share the column count.
    pub fn concat_rows(&self, parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        if parts.is_empty() {
            return Err(TensorError::BadArg("concat_rows of nothing".into()));
        }
        let d = parts[0].shape().last().copied().unwrap_or(1);
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (r, c) = rows_cols(p.shape());
            if c != d {
                return Err(TensorError::ShapeMismatch(format!(
                    "concat_rows column mismatch: {} vs {}",
                    c, d
                )));
            }
            rows += r;
            data.extend_from_slice(p.data());
        }
        self.emit("concat_rows", vec![rows, d], data, parts, |ids| {
            Op::ConcatRows {
                parts: ids.to_vec(),
            }
        })
    }

    /// Concatenates 2-D tensors along axis 1. All parts share the row count.
    pub fn concat_cols(&self, parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        if parts.is_empty() {
            return Err(TensorError::BadArg("concat_cols of nothing".into()));
        }
        let rows = parts[0].shape().first().copied().unwrap_or(1);
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let sh = p.shape();
                if sh.len() == 2 && sh[0] == rows {
                    Ok(sh[1])
                } else {
                    Err(TensorError::ShapeMismatch(format!(
                        "concat_cols wants [{}, _], got {:?}",
                        rows, sh
                    )))
                }
            })
            .collect::<Result<_>>()?;
        let total: usize = widths.iter().sum();
        let mut data = vec![T::zero(); rows * total];
        let mut off = 0;
        for (p, w) in parts.iter().zip(&widths) {
            let src = p.data();
            for r in 0..rows {
                data[r * total + off..r * total + off + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        self.emit("concat_cols", vec![rows, total], data, parts, |ids| {
            Op::ConcatCols {
                parts: ids.to_vec(),
            }
        })
    }

    /// Column window [start, start+len) of a 2-D tensor.
    pub fn slice_cols(&self, x: &Tensor<T>, start: usize, len: usize) -> Result<Tensor<T>> {
        let sh = x.shape();
        if sh.len() != 2 || start + len > sh[1] {
            return Err(TensorError::ShapeMismatch(format!(
                "slice_cols [{}, {}) of {:?}",
                start,
                start + len,
                sh
            )));
        }
        let (rows, cols) = (sh[0], sh[1]);
        let src = x.data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * cols + start..r * cols + start + len]);
        }
        self.emit("slice_cols", vec![rows, len], data, &[x], |ids| {
            Op::SliceCols {
                x: ids[0],
                start,
                len,
            }
        })
    }
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

fn mean_var<T: Scalar>(row: &[T]) -> (T, T) {
    let n = T::of_f64(row.len() as f64);
    let mu = row.iter().copied().sum::<T>() / n;
    let var = row
        .iter()
        .map(|&v| (v - mu) * (v - mu))
        .sum::<T>()
        / n;
    (mu, var)
}

/// Cache-friendly i-k-j matrix multiply.
pub(crate) fn matmul_raw<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        for t in 0..k {
            let av = a[i * k + t];
            if av == T::zero() {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + av * brow[j];
            }
        }
    }
    c
}

/// Populates d(root)/d(leaf) for every trainable leaf reachable from `root`.
/// Gradients accumulate across calls until the leaves are zeroed.
pub fn backward<T: Scalar>(root: &Tensor<T>, graph: &Graph<T>) -> Result<()> {
    let (gid, rid) = root.node().ok_or(TensorError::DetachedTensor)?;
    if gid != graph.id {
        return Err(TensorError::GraphMismatch);
    }
    if root.numel() != 1 {
        return Err(TensorError::NotScalar {
            numel: root.numel(),
        });
    }
    let inner = graph.inner.lock().unwrap();
    let nodes = &inner.nodes;
    let mut grads: Vec<Option<Vec<T>>> = vec![None; rid + 1];
    grads[rid] = Some(vec![T::one()]);

    for nid in (0..=rid).rev() {
        let Some(gout) = grads[nid].take() else {
            continue;
        };
        let node = &nodes[nid];
        // Accumulate a contribution into an earlier node's buffer.
        macro_rules! acc {
            ($dst:expr, $contrib:expr) => {{
                let dst: NodeId = $dst;
                if nodes[dst].needs_grad {
                    let buf = grads[dst]
                        .get_or_insert_with(|| vec![T::zero(); nodes[dst].value.len()]);
                    let contrib: Vec<T> = $contrib;
                    for (b, c) in buf.iter_mut().zip(contrib) {
                        *b = *b + c;
                    }
                }
            }};
        }

        match &node.op {
            Op::Const => {}
            Op::Leaf { sink } => {
                let mut slot = sink.lock().unwrap();
                for (s, g) in slot.iter_mut().zip(&gout) {
                    *s = *s + *g;
                }
            }
            Op::Matmul { a, b } => {
                let (m, k) = (nodes[*a].shape[0], nodes[*a].shape[1]);
                let n = nodes[*b].shape[1];
                // dA = dC·Bᵀ ; dB = Aᵀ·dC
                acc!(*a, {
                    let bt = transpose_raw(&nodes[*b].value, k, n);
                    matmul_raw(&gout, &bt, m, n, k)
                });
                acc!(*b, {
                    let at = transpose_raw(&nodes[*a].value, m, k);
                    matmul_raw(&at, &gout, k, m, n)
                });
            }
            Op::Transpose { x } => {
                let (r, c) = (node.shape[0], node.shape[1]);
                acc!(*x, transpose_raw(&gout, r, c));
            }
            Op::Add { a, b } => {
                acc!(*a, gout.clone());
                acc!(*b, gout.clone());
            }
            Op::Sub { a, b } => {
                acc!(*a, gout.clone());
                acc!(*b, gout.iter().map(|&g| -g).collect());
            }
            Op::Mul { a, b } => {
                acc!(*a, {
                    let bv = &nodes[*b].value;
                    gout.iter().zip(bv.iter()).map(|(&g, &v)| g * v).collect()
                });
                acc!(*b, {
                    let av = &nodes[*a].value;
                    gout.iter().zip(av.iter()).map(|(&g, &v)| g * v).collect()
                });
            }
            Op::Scale { x, c } => {
                acc!(*x, gout.iter().map(|&g| g * *c).collect());
            }
            Op::AddBias { x, bias } => {
                acc!(*x, gout.clone());
                acc!(*bias, {
                    let d = nodes[*bias].value.len();
                    let mut acc = vec![T::zero(); d];
                    for (i, &g) in gout.iter().enumerate() {
                        acc[i % d] = acc[i % d] + g;
                    }
                    acc
                });
            }
            Op::Silu { x } => {
                acc!(*x, {
                    let xv = &nodes[*x].value;
                    gout.iter()
                        .zip(xv.iter())
                        .map(|(&g, &v)| {
                            let s = sigmoid(v);
                            g * s * (T::one() + v * (T::one() - s))
                        })
                        .collect()
                });
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let d = nodes[*gamma].value.len();
                let rows = node.value.len() / d;
                let xv = &nodes[*x].value;
                let gv = &nodes[*gamma].value;
                let inv_d = T::of_f64(d as f64).recip();
                let mut dx = vec![T::zero(); xv.len()];
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                for r in 0..rows {
                    let row = &xv[r * d..(r + 1) * d];
                    let dy = &gout[r * d..(r + 1) * d];
                    let (mu, var) = mean_var(row);
                    let inv = (var + *eps).sqrt().recip();
                    // xh = normalized row; dxh = dy ∘ gamma
                    let mut s1 = T::zero(); // Σ dxh
                    let mut s2 = T::zero(); // Σ dxh ∘ xh
                    for j in 0..d {
                        let xh = (row[j] - mu) * inv;
                        let dxh = dy[j] * gv[j];
                        s1 = s1 + dxh;
                        s2 = s2 + dxh * xh;
                        dgamma[j] = dgamma[j] + dy[j] * xh;
                        dbeta[j] = dbeta[j] + dy[j];
                    }
                    for j in 0..d {
                        let xh = (row[j] - mu) * inv;
                        let dxh = dy[j] * gv[j];
                        dx[r * d + j] = inv * (dxh - inv_d * s1 - xh * inv_d * s2);
                    }
                }
                acc!(*x, dx);
                acc!(*gamma, dgamma);
                acc!(*beta, dbeta);
            }
            Op::SoftmaxMasked { x, visible } => {
                acc!(*x, {
                    let y = &node.value;
                    let (rows, n) = rows_cols(&node.shape);
                    let mut dx = vec![T::zero(); y.len()];
                    for r in 0..rows {
                        let yr = &y[r * n..(r + 1) * n];
                        let dyr = &gout[r * n..(r + 1) * n];
                        let vis = &visible[r * n..(r + 1) * n];
                        let dot: T = (0..n)
                            .filter(|&j| vis[j])
                            .map(|j| yr[j] * dyr[j])
                            .sum();
                        for j in 0..n {
                            if vis[j] {
                                dx[r * n + j] = yr[j] * (dyr[j] - dot);
                            }
                        }
                    }
                    dx
                });
            }
            Op::Sum { x } => {
                acc!(*x, vec![gout[0]; nodes[*x].value.len()]);
            }
            Op::Mean { x } => {
                let n = nodes[*x].value.len();
                let g = gout[0] / T::of_f64(n as f64);
                acc!(*x, vec![g; n]);
            }
            Op::Reshape { x } => {
                acc!(*x, gout.clone());
            }
            Op::GatherRows { table, indices } => {
                acc!(*table, {
                    let d = nodes[*table].shape[1];
                    let mut dt = vec![T::zero(); nodes[*table].value.len()];
                    for (row, &idx) in indices.iter().enumerate() {
                        for j in 0..d {
                            dt[idx * d + j] = dt[idx * d + j] + gout[row * d + j];
                        }
                    }
                    dt
                });
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p].value.len();
                    acc!(p, gout[off..off + len].to_vec());
                    off += len;
                }
            }
            Op::ConcatCols { parts } => {
                let total = node.shape[1];
                let rows = node.shape[0];
                let mut off = 0;
                for &p in parts {
                    let w = nodes[p].shape[1];
                    acc!(p, {
                        let mut dp = vec![T::zero(); rows * w];
                        for r in 0..rows {
                            dp[r * w..(r + 1) * w]
                                .copy_from_slice(&gout[r * total + off..r * total + off + w]);
                        }
                        dp
                    });
                    off += w;
                }
            }
            Op::SliceCols { x, start, len } => {
                acc!(*x, {
                    let cols = nodes[*x].shape[1];
                    let rows = nodes[*x].shape[0];
                    let mut dx = vec![T::zero(); rows * cols];
                    for r in 0..rows {
                        dx[r * cols + start..r * cols + start + len]
                            .copy_from_slice(&gout[r * len..(r + 1) * len]);
                    }
                    dx
                });
            }
        }
    }
    Ok(())
}

fn transpose_raw<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_grad;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_expansion() {
        let g = Graph::no_grad();
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        let c = g.matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let g = Graph::no_grad();
        let m = t(&[2, 2], &[3.0, -1.0, 0.5, 2.0]);
        let c = g.matmul(&Tensor::eye(2), &m).unwrap();
        assert_eq!(c.data(), m.data());
        let s = g.matmul(&t(&[1, 1], &[2.0]), &t(&[1, 1], &[3.0])).unwrap();
        assert_eq!(s.data(), &[6.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let g = Graph::no_grad();
        let a = t(&[2, 3], &[0.0; 6]);
        let b = t(&[2, 2], &[0.0; 4]);
        assert!(matches!(
            g.matmul(&a, &b),
            Err(TensorError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn layernorm_cases() {
        let g = Graph::no_grad();
        // constant row normalizes to beta exactly
        let x = t(&[1, 3], &[4.0, 4.0, 4.0]);
        let gamma = t(&[3], &[2.0, 3.0, 4.0]);
        let beta = t(&[3], &[0.5, -0.5, 1.0]);
        let y = g.layernorm(&x, &gamma, &beta, 1e-12).unwrap();
        let b = beta.data();
        for (v, e) in y.data().iter().zip(b) {
            assert!((v - e).abs() < 1e-5);
        }
        // x = [0, 2], eps = 1e-5: mu = 1, var = 1
        let x = t(&[1, 2], &[0.0, 2.0]);
        let ones = t(&[2], &[1.0, 1.0]);
        let zeros = t(&[2], &[0.0, 0.0]);
        let y = g.layernorm(&x, &ones, &zeros, 1e-5).unwrap();
        assert!((y.data()[0] + 0.99999).abs() < 1e-4);
        assert!((y.data()[1] - 0.99999).abs() < 1e-4);
    }

    #[test]
    fn softmax_masked_cases() {
        let g = Graph::no_grad();
        // single visible entry gets weight 1
        let y = g
            .softmax_masked(&t(&[1, 3], &[5.0, -2.0, 0.1]), &[false, true, false])
            .unwrap();
        assert_eq!(y.data(), &[0.0, 1.0, 0.0]);
        // equal logits, all visible
        let y = g
            .softmax_masked(&t(&[1, 4], &[0.7; 4]), &[true; 4])
            .unwrap();
        for v in y.data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
        // logits [0, ln 2] -> [1/3, 2/3]
        let y = g
            .softmax_masked(&t(&[1, 2], &[0.0, 2.0f64.ln()]), &[true, true])
            .unwrap();
        assert!((y.data()[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((y.data()[1] - 2.0 / 3.0).abs() < 1e-12);
        // fully masked row errors
        assert!(matches!(
            g.softmax_masked(&t(&[1, 2], &[0.0, 0.0]), &[false, false]),
            Err(TensorError::EmptyRow { row: 0 })
        ));
    }

    #[test]
    fn backward_sum_gives_ones() {
        let g = Graph::new();
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).with_grad();
        let s = g.sum(&x).unwrap();
        g.backward(&s).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn backward_square_sum() {
        let g = Graph::new();
        let x = t(&[3], &[1.0, -2.0, 3.0]).with_grad();
        let y = g.mul(&x, &x).unwrap();
        let s = g.sum(&y).unwrap();
        g.backward(&s).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_matmul_constant_right() {
        let g = Graph::new();
        let x = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).with_grad();
        let c = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = g.matmul(&x, &c).unwrap();
        let s = g.sum(&y).unwrap();
        g.backward(&s).unwrap();
        // grad rows = column sums of c
        assert_eq!(x.grad().unwrap(), vec![3.0, 7.0, 3.0, 7.0]);
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let g1 = Graph::new();
        let x = t(&[2], &[1.0, 1.0]).with_grad();
        let s = g1.sum(&x).unwrap();
        g1.backward(&s).unwrap();
        g1.backward(&s).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
        x.zero_grad();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn backward_detached_and_nonscalar() {
        let g: Graph<f64> = Graph::new();
        let x = t(&[2], &[1.0, 2.0]);
        assert!(matches!(g.backward(&x), Err(TensorError::DetachedTensor)));
        let xg = t(&[2], &[1.0, 2.0]).with_grad();
        let y = g.mul(&xg, &xg).unwrap();
        assert!(matches!(
            g.backward(&y),
            Err(TensorError::NotScalar { numel: 2 })
        ));
    }

    #[test]
    fn no_grad_graph_records_nothing() {
        let g = Graph::no_grad();
        let x = t(&[2], &[1.0, 2.0]).with_grad();
        let y = g.mul(&x, &x).unwrap();
        let s = g.sum(&y).unwrap();
        assert!(matches!(g.backward(&s), Err(TensorError::DetachedTensor)));
        assert_eq!(g.node_count(), 0);
    }

    #[test]
    fn nonfinite_output_is_an_error() {
        let g = Graph::no_grad();
        let x = t(&[1], &[1e308]);
        assert!(matches!(
            g.mul(&x, &x),
            Err(TensorError::NonFinite { .. })
        ));
    }

    #[test]
    fn finite_diff_matches_known_gradients() {
        // f(x) = x^2 at 3: derivative 6
        let f = |t: &Tensor<f64>| Ok(t.data()[0] * t.data()[0]);
        let x = t(&[1], &[3.0]);
        let fd = finite_diff_grad(f, &x, 1e-3).unwrap();
        assert!((fd.data()[0] - 6.0).abs() < 1e-6);
        // f(x) = sum(x): all ones
        let f = |t: &Tensor<f64>| Ok(t.data().iter().sum());
        let x = t(&[4], &[0.3, -2.0, 5.0, 0.0]);
        let fd = finite_diff_grad(f, &x, 1e-3).unwrap();
        for v in fd.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
        // ||x||^2 at 0: zero vector
        let f = |t: &Tensor<f64>| Ok(t.data().iter().map(|v| v * v).sum());
        let x = t(&[3], &[0.0; 3]);
        let fd = finite_diff_grad(f, &x, 1e-3).unwrap();
        for v in fd.data() {
            assert_eq!(*v, 0.0);
        }
    }
}
