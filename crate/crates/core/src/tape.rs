//! Reverse-mode autodiff over a flat op tape.
//!
//! The surrogate forward pass records every op here; `backward` replays the
//! tape in reverse and accumulates gradients for whichever leaves asked for
//! them. Ops are the minimal set the model and the binding losses need —
//! including a straight-through quantizer and KL terms that differentiate
//! directly through attention rows.

use alloc::vec;
use alloc::vec::Vec;

use crate::processor::quantize_unit;
use crate::tensor;

pub type NodeId = usize;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    /// a (m×k) · b (k×n)
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    MulElem(NodeId, NodeId),
    Scale(NodeId, f64),
    /// a (m×n) + row b (1×n) broadcast over rows
    AddRow(NodeId, NodeId),
    /// column window [start, start+cols) of the input
    SliceCols(NodeId, usize),
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    /// rows of a table picked by index (embedding lookup)
    GatherRows(NodeId, Vec<usize>),
    /// same buffer, new shape
    Reshape(NodeId),
    /// a (m×k) · bᵀ with b (n×k) — attention scores
    MatmulABt(NodeId, NodeId),
    /// per-row x/rms(x) * gain, gain broadcast as (1×n)
    RmsNorm(NodeId, NodeId),
    Gelu(NodeId),
    /// row-wise softmax over keys 0..=i for query row i; later keys exactly 0
    CausalSoftmax(NodeId),
    /// forward: 8-bit round-half-even grid; backward: identity
    QuantizeSte(NodeId),
    /// mean over (row, target-id) pairs of -log softmax(logits[row])[target]
    CrossEntropy(NodeId, Vec<(usize, usize)>),
    /// mean of the selected rows → (1×n)
    RowsMean(NodeId, Vec<usize>),
    /// KL(uniform over `support` ‖ max(row, floor)) → scalar
    KlUniform(NodeId, Vec<usize>, f64),
    /// sign · KL(const ref ‖ max(row, floor)) → scalar; ref carries no gradient
    KlConstRef(NodeId, Vec<f64>, f64, f64),
    SumAll(NodeId),
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradient of the root with respect to every node that wanted one.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Vec<f64>> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const RMS_EPS: f64 = 1e-8;

fn gelu_val(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let phi = libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * core::f64::consts::PI);
    0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2)) + x * phi
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

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id].value.len(), 1);
        self.nodes[id].value[0]
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        (self.nodes[id].rows, self.nodes[id].cols)
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> NodeId {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node { rows, cols, value, op, needs_grad });
        self.nodes.len() - 1
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    /// New leaf; `needs_grad = false` marks constants and frozen parameters.
    pub fn leaf(&mut self, rows: usize, cols: usize, value: Vec<f64>, needs_grad: bool) -> NodeId {
        self.push(rows, cols, value, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> NodeId {
        self.leaf(rows, cols, value, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> NodeId {
        self.constant(1, 1, vec![v])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let v = tensor::matmul(&self.nodes[a].value, &self.nodes[b].value, m, k, n);
        let g = self.wants(a) || self.wants(b);
        self.push(m, n, v, Op::Matmul(a, b), g)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b));
        let (m, n) = self.shape(a);
        let v = self.nodes[a].value.iter().zip(&self.nodes[b].value).map(|(x, y)| x + y).collect();
        let g = self.wants(a) || self.wants(b);
        self.push(m, n, v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b));
        let (m, n) = self.shape(a);
        let v = self.nodes[a].value.iter().zip(&self.nodes[b].value).map(|(x, y)| x - y).collect();
        let g = self.wants(a) || self.wants(b);
        self.push(m, n, v, Op::Sub(a, b), g)
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b));
        let (m, n) = self.shape(a);
        let v = self.nodes[a].value.iter().zip(&self.nodes[b].value).map(|(x, y)| x * y).collect();
        let g = self.wants(a) || self.wants(b);
        self.push(m, n, v, Op::MulElem(a, b), g)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let (m, n) = self.shape(a);
        let v = self.nodes[a].value.iter().map(|x| x * c).collect();
        let g = self.wants(a);
        self.push(m, n, v, Op::Scale(a, c), g)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let (rm, rn) = self.shape(row);
        assert_eq!((rm, rn), (1, n), "row broadcast shape");
        let mut v = self.nodes[a].value.clone();
        for i in 0..m {
            for j in 0..n {
                v[i * n + j] += self.nodes[row].value[j];
            }
        }
        let g = self.wants(a) || self.wants(row);
        self.push(m, n, v, Op::AddRow(a, row), g)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (m, n) = self.shape(a);
        assert!(start + len <= n);
        let mut v = Vec::with_capacity(m * len);
        for i in 0..m {
            v.extend_from_slice(&self.nodes[a].value[i * n + start..i * n + start + len]);
        }
        let g = self.wants(a);
        self.push(m, len, v, Op::SliceCols(a, start), g)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let m = self.shape(parts[0]).0;
        let n: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut v = Vec::with_capacity(m * n);
        for i in 0..m {
            for &p in parts {
                let pc = self.shape(p).1;
                assert_eq!(self.shape(p).0, m);
                v.extend_from_slice(&self.nodes[p].value[i * pc..(i + 1) * pc]);
            }
        }
        let g = parts.iter().any(|&p| self.wants(p));
        self.push(m, n, v, Op::ConcatCols(parts.to_vec()), g)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let n = self.shape(parts[0]).1;
        let m: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let mut v = Vec::with_capacity(m * n);
        for &p in parts {
            assert_eq!(self.shape(p).1, n);
            v.extend_from_slice(&self.nodes[p].value);
        }
        let g = parts.iter().any(|&p| self.wants(p));
        self.push(m, n, v, Op::ConcatRows(parts.to_vec()), g)
    }

    pub fn gather_rows(&mut self, table: NodeId, idx: &[usize]) -> NodeId {
        let (tr, tc) = self.shape(table);
        let mut v = Vec::with_capacity(idx.len() * tc);
        for &i in idx {
            assert!(i < tr, "gather index {i} out of {tr}");
            v.extend_from_slice(&self.nodes[table].value[i * tc..(i + 1) * tc]);
        }
        let g = self.wants(table);
        self.push(idx.len(), tc, v, Op::GatherRows(table, idx.to_vec()), g)
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        assert_eq!(self.nodes[a].value.len(), rows * cols);
        let v = self.nodes[a].value.clone();
        let g = self.wants(a);
        self.push(rows, cols, v, Op::Reshape(a), g)
    }

    pub fn matmul_abt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        assert_eq!(k, k2, "matmul_abt inner dims {k} vs {k2}");
        let mut v = vec![0.0; m * n];
        tensor::matmul_a_bt_acc(&mut v, &self.nodes[a].value, &self.nodes[b].value, m, k, n);
        let g = self.wants(a) || self.wants(b);
        self.push(m, n, v, Op::MatmulABt(a, b), g)
    }

    pub fn rmsnorm(&mut self, x: NodeId, gain: NodeId) -> NodeId {
        let (m, n) = self.shape(x);
        assert_eq!(self.shape(gain), (1, n));
        let mut v = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.nodes[x].value[i * n..(i + 1) * n];
            let ms = row.iter().map(|a| a * a).sum::<f64>() / n as f64;
            let inv = 1.0 / libm::sqrt(ms + RMS_EPS);
            for j in 0..n {
                v[i * n + j] = row[j] * inv * self.nodes[gain].value[j];
            }
        }
        let g = self.wants(x) || self.wants(gain);
        self.push(m, n, v, Op::RmsNorm(x, gain), g)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let v = self.nodes[a].value.iter().map(|&x| gelu_val(x)).collect();
        let g = self.wants(a);
        self.push(m, n, v, Op::Gelu(a), g)
    }

    /// Row-stochastic causal attention: row i is a softmax over keys 0..=i,
    /// entries past the diagonal are exactly zero.
    pub fn causal_softmax(&mut self, scores: NodeId) -> NodeId {
        let (m, n) = self.shape(scores);
        assert_eq!(m, n, "causal softmax expects square scores");
        let mut v = vec![0.0; m * n];
        for i in 0..m {
            let row = &self.nodes[scores].value[i * n..(i + 1) * n];
            let lim = i + 1;
            let mut mx = f64::NEG_INFINITY;
            for &s in &row[..lim] {
                mx = mx.max(s);
            }
            let mut z = 0.0;
            for j in 0..lim {
                let e = libm::exp(row[j] - mx);
                v[i * n + j] = e;
                z += e;
            }
            for j in 0..lim {
                v[i * n + j] /= z;
            }
        }
        let g = self.wants(scores);
        self.push(m, n, v, Op::CausalSoftmax(scores), g)
    }

    pub fn quantize_ste(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let v = self.nodes[a].value.iter().map(|&x| quantize_unit(x)).collect();
        let g = self.wants(a);
        self.push(m, n, v, Op::QuantizeSte(a), g)
    }

    /// Teacher-forcing loss: mean over `(row, id)` targets of the negative
    /// log-probability of `id` under the row's logits. Empty targets → 0.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[(usize, usize)]) -> NodeId {
        let (m, n) = self.shape(logits);
        let mut total = 0.0;
        for &(row, id) in targets {
            assert!(row < m && id < n, "target ({row},{id}) out of {m}x{n}");
            let r = &self.nodes[logits].value[row * n..(row + 1) * n];
            let mx = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + libm::log(r.iter().map(|&x| libm::exp(x - mx)).sum::<f64>());
            total += lse - r[id];
        }
        let v = if targets.is_empty() { 0.0 } else { total / targets.len() as f64 };
        let g = self.wants(logits) && !targets.is_empty();
        self.push(1, 1, vec![v], Op::CrossEntropy(logits, targets.to_vec()), g)
    }

    pub fn rows_mean(&mut self, a: NodeId, rows: &[usize]) -> NodeId {
        let (m, n) = self.shape(a);
        assert!(!rows.is_empty(), "rows_mean over empty set");
        let mut v = vec![0.0; n];
        for &r in rows {
            assert!(r < m);
            let row = &self.nodes[a].value[r * n..(r + 1) * n];
            for (x, &val) in v.iter_mut().zip(row) {
                *x += val;
            }
        }
        for x in &mut v {
            *x /= rows.len() as f64;
        }
        let g = self.wants(a);
        self.push(1, n, v, Op::RowsMean(a, rows.to_vec()), g)
    }

    /// KL(uniform over `support` ‖ max(row, floor)); row is (1×n).
    pub fn kl_uniform(&mut self, row: NodeId, support: &[usize], floor: f64) -> NodeId {
        let (m, n) = self.shape(row);
        assert_eq!(m, 1);
        assert!(!support.is_empty());
        let r = support.len() as f64;
        let mut v = -libm::log(r);
        for &j in support {
            assert!(j < n);
            let q = self.nodes[row].value[j].max(floor);
            v -= libm::log(q) / r;
        }
        let g = self.wants(row);
        self.push(1, 1, vec![v], Op::KlUniform(row, support.to_vec(), floor), g)
    }

    /// sign · KL(reference ‖ max(row, floor)); the reference is a constant.
    pub fn kl_const_ref(&mut self, row: NodeId, reference: &[f64], floor: f64, sign: f64) -> NodeId {
        let (m, n) = self.shape(row);
        assert_eq!(m, 1);
        assert_eq!(reference.len(), n);
        let mut v = 0.0;
        for (j, &p) in reference.iter().enumerate() {
            if p > 0.0 {
                let q = self.nodes[row].value[j].max(floor);
                v += p * libm::log(p / q);
            }
        }
        let g = self.wants(row);
        self.push(1, 1, vec![sign * v], Op::KlConstRef(row, reference.to_vec(), floor, sign), g)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a].value.iter().sum();
        let g = self.wants(a);
        self.push(1, 1, vec![v], Op::SumAll(a), g)
    }

    /// Accumulate d(root)/d(node) for every node on the path to a grad leaf.
    /// `root` must be scalar.
    pub fn backward(&self, root: NodeId) -> Gradients {
        assert_eq!(self.nodes[root].value.len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(vec![1.0]);

        for id in (0..=root).rev() {
            if !self.nodes[id].needs_grad {
                grads[id] = None;
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.accumulate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn grad_slot<'a>(
        &self,
        grads: &'a mut [Option<Vec<f64>>],
        id: NodeId,
    ) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[id].needs_grad {
            return None;
        }
        let len = self.nodes[id].value.len();
        Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
    }

    fn accumulate(&self, id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).1;
                if self.nodes[*a].needs_grad {
                    let bval = &self.nodes[*b].value;
                    let ga = self.grad_slot(grads, *a).unwrap();
                    tensor::matmul_a_bt_acc(ga, g, bval, m, n, k);
                }
                if self.nodes[*b].needs_grad {
                    let aval = &self.nodes[*a].value;
                    let gb = self.grad_slot(grads, *b).unwrap();
                    tensor::matmul_at_b_acc(gb, aval, g, m, k, n);
                }
            }
            Op::Add(a, b) => {
                for &p in &[*a, *b] {
                    if let Some(gp) = self.grad_slot(grads, p) {
                        for (x, y) in gp.iter_mut().zip(g) {
                            *x += y;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    for (x, y) in gb.iter_mut().zip(g) {
                        *x -= y;
                    }
                }
            }
            Op::MulElem(a, b) => {
                if self.nodes[*a].needs_grad {
                    let bval = self.nodes[*b].value.clone();
                    let ga = self.grad_slot(grads, *a).unwrap();
                    for i in 0..g.len() {
                        ga[i] += g[i] * bval[i];
                    }
                }
                if self.nodes[*b].needs_grad {
                    let aval = self.nodes[*a].value.clone();
                    let gb = self.grad_slot(grads, *b).unwrap();
                    for i in 0..g.len() {
                        gb[i] += g[i] * aval[i];
                    }
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += c * y;
                    }
                }
            }
            Op::AddRow(a, row) => {
                let (m, n) = (node.rows, node.cols);
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                if let Some(gr) = self.grad_slot(grads, *row) {
                    for i in 0..m {
                        for j in 0..n {
                            gr[j] += g[i * n + j];
                        }
                    }
                }
            }
            Op::SliceCols(a, start) => {
                let an = self.shape(*a).1;
                let (m, len) = (node.rows, node.cols);
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for i in 0..m {
                        for j in 0..len {
                            ga[i * an + start + j] += g[i * len + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let m = node.rows;
                let n = node.cols;
                let mut off = 0;
                for &p in parts {
                    let pc = self.shape(p).1;
                    if let Some(gp) = self.grad_slot(grads, p) {
                        for i in 0..m {
                            for j in 0..pc {
                                gp[i * pc + j] += g[i * n + off + j];
                            }
                        }
                    }
                    off += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let n = node.cols;
                let mut off = 0;
                for &p in parts {
                    let pm = self.shape(p).0;
                    if let Some(gp) = self.grad_slot(grads, p) {
                        gp.iter_mut()
                            .zip(&g[off * n..(off + pm) * n])
                            .for_each(|(x, y)| *x += y);
                    }
                    off += pm;
                }
            }
            Op::GatherRows(table, idx) => {
                let tc = self.shape(*table).1;
                if let Some(gt) = self.grad_slot(grads, *table) {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..tc {
                            gt[i * tc + j] += g[r * tc + j];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
            Op::MatmulABt(a, b) => {
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).0;
                if self.nodes[*a].needs_grad {
                    let bval = &self.nodes[*b].value;
                    let ga = self.grad_slot(grads, *a).unwrap();
                    tensor::matmul_acc(ga, g, bval, m, n, k);
                }
                if self.nodes[*b].needs_grad {
                    let aval = &self.nodes[*a].value;
                    let gb = self.grad_slot(grads, *b).unwrap();
                    tensor::matmul_at_b_acc(gb, g, aval, m, n, k);
                }
            }
            Op::RmsNorm(x, gain) => {
                let (m, n) = (node.rows, node.cols);
                let xval = &self.nodes[*x].value;
                let gval = &self.nodes[*gain].value;
                if self.nodes[*gain].needs_grad {
                    let mut acc = vec![0.0; n];
                    for i in 0..m {
                        let row = &xval[i * n..(i + 1) * n];
                        let ms = row.iter().map(|a| a * a).sum::<f64>() / n as f64;
                        let inv = 1.0 / libm::sqrt(ms + RMS_EPS);
                        for j in 0..n {
                            acc[j] += g[i * n + j] * row[j] * inv;
                        }
                    }
                    let gg = self.grad_slot(grads, *gain).unwrap();
                    for j in 0..n {
                        gg[j] += acc[j];
                    }
                }
                if self.nodes[*x].needs_grad {
                    let mut acc = vec![0.0; m * n];
                    for i in 0..m {
                        let row = &xval[i * n..(i + 1) * n];
                        let ms = row.iter().map(|a| a * a).sum::<f64>() / n as f64;
                        let r = libm::sqrt(ms + RMS_EPS);
                        let mut dotted = 0.0;
                        for j in 0..n {
                            dotted += g[i * n + j] * gval[j] * row[j];
                        }
                        let c = dotted / (n as f64 * r * r * r);
                        for j in 0..n {
                            acc[i * n + j] = g[i * n + j] * gval[j] / r - row[j] * c;
                        }
                    }
                    let gx = self.grad_slot(grads, *x).unwrap();
                    for i in 0..gx.len() {
                        gx[i] += acc[i];
                    }
                }
            }
            Op::Gelu(a) => {
                if self.nodes[*a].needs_grad {
                    let aval = self.nodes[*a].value.clone();
                    let ga = self.grad_slot(grads, *a).unwrap();
                    for i in 0..g.len() {
                        ga[i] += g[i] * gelu_grad(aval[i]);
                    }
                }
            }
            Op::CausalSoftmax(scores) => {
                let n = node.cols;
                if self.nodes[*scores].needs_grad {
                    let sval = node.value.clone();
                    let gs = self.grad_slot(grads, *scores).unwrap();
                    for i in 0..node.rows {
                        let lim = i + 1;
                        let srow = &sval[i * n..i * n + lim];
                        let grow = &g[i * n..i * n + lim];
                        let dot: f64 = srow.iter().zip(grow).map(|(s, gg)| s * gg).sum();
                        for j in 0..lim {
                            gs[i * n + j] += srow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::QuantizeSte(a) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
            }
            Op::CrossEntropy(logits, targets) => {
                if targets.is_empty() || !self.nodes[*logits].needs_grad {
                    return;
                }
                let n = self.shape(*logits).1;
                let lval = self.nodes[*logits].value.clone();
                let gl = self.grad_slot(grads, *logits).unwrap();
                let w = g[0] / targets.len() as f64;
                for &(row, id) in targets {
                    let r = &lval[row * n..(row + 1) * n];
                    let mx = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = r.iter().map(|&x| libm::exp(x - mx)).sum();
                    for j in 0..n {
                        let p = libm::exp(r[j] - mx) / z;
                        gl[row * n + j] += w * (p - if j == id { 1.0 } else { 0.0 });
                    }
                }
            }
            Op::RowsMean(a, rows) => {
                let n = node.cols;
                if let Some(ga) = self.grad_slot(grads, *a) {
                    let w = 1.0 / rows.len() as f64;
                    for &r in rows {
                        for j in 0..n {
                            ga[r * n + j] += g[j] * w;
                        }
                    }
                }
            }
            Op::KlUniform(row, support, floor) => {
                if self.nodes[*row].needs_grad {
                    let rv = self.nodes[*row].value.clone();
                    let gr = self.grad_slot(grads, *row).unwrap();
                    let w = g[0] / support.len() as f64;
                    for &j in support {
                        if rv[j] > *floor {
                            gr[j] -= w / rv[j];
                        }
                    }
                }
            }
            Op::KlConstRef(row, reference, floor, sign) => {
                if self.nodes[*row].needs_grad {
                    let rv = self.nodes[*row].value.clone();
                    let gr = self.grad_slot(grads, *row).unwrap();
                    for j in 0..reference.len() {
                        if reference[j] > 0.0 && rv[j] > *floor {
                            gr[j] -= sign * g[0] * reference[j] / rv[j];
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                }
            }
        }
    }
}
