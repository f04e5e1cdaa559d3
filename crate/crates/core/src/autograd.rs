//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every forward operation as a node appended to an
//! arena, so node order is a valid topological order. [`Graph::backward`]
//! walks the arena once in reverse. Gradient buffers are only allocated
//! for nodes that (transitively) depend on a leaf with `requires_grad`.
//!
//! Values are treated as matrices: a tensor of shape `[.., c]` is viewed as
//! `rows × c`, a 1-D tensor as a single row and a scalar as `1 × 1`.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::{normal_cdf, normal_pdf, Scalar};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Linear recombination of input rows: output row `i` is
/// `Σ (src, w) in plan[i] : w · x[src]`.
pub type RowPlan<T> = Vec<Vec<(usize, T)>>;

#[derive(Debug)]
enum Op<T: Scalar> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Transpose(Var),
    Add(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Softmax {
        x: Var,
        scale: T,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        stats: Vec<(T, T)>,
    },
    Gelu(Var),
    Relu(Var),
    Slice {
        x: Var,
        row0: usize,
        col0: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    CombineRows {
        x: Var,
        plan: Arc<RowPlan<T>>,
    },
    WeightedMean {
        rows: Var,
        weights: Var,
        normalized: Vec<T>,
        total: T,
    },
    StraightThrough {
        x: Var,
        scores: Var,
    },
    Sum(Var),
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T: Scalar> {
    shape: Vec<usize>,
    value: Arc<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Node<T> {
    fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            n => self.shape[..n - 1].iter().product(),
        }
    }

    fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }
}

/// Ordered record of forward operations.
#[derive(Debug, Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

fn check_finite<T: Scalar>(op: &str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{op}: non-finite input")))
    }
}

/// Row-major plain matrix multiply helper writing into `out` (accumulating when `beta = 1`).
#[allow(clippy::too_many_arguments)]
fn gemm_into<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    (rsa, csa): (usize, usize),
    b: &[T],
    (rsb, csb): (usize, usize),
    beta: T,
    out: &mut [T],
) {
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        rsa as isize,
        csa as isize,
        b,
        rsb as isize,
        csb as isize,
        beta,
        out,
        n as isize,
        1,
    );
}

/// Applies a row plan to a row-major matrix with `cols` columns.
///
/// Shared by the graph op and by numeric record replay so that both produce
/// bit-identical rows.
pub fn combine_rows<T: Scalar>(data: &[T], cols: usize, plan: &RowPlan<T>) -> Vec<T> {
    let mut out = vec![T::zero(); plan.len() * cols];
    for (dst, terms) in out.chunks_mut(cols.max(1)).zip(plan.iter()) {
        for &(src, w) in terms {
            let row = &data[src * cols..(src + 1) * cols];
            for (o, &v) in dst.iter_mut().zip(row) {
                *o += w * v;
            }
        }
    }
    out
}

/// Normalizes nonnegative weights to sum to one; all-zero weights fall back
/// to the uniform distribution. Returns `(normalized, total)`.
pub fn normalize_weights<T: Scalar>(weights: &[T]) -> (Vec<T>, T) {
    let total: T = weights.iter().copied().sum();
    if total > T::zero() {
        (weights.iter().map(|&w| w / total).collect(), total)
    } else {
        let u = T::one() / T::from_usize_lossy(weights.len().max(1));
        (vec![u; weights.len()], T::zero())
    }
}

/// Gradient buffer for `v`, allocated on first use; `None` for nodes that
/// do not require gradients.
fn grad_slot<'a, T: Scalar>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    let len = n.value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, op: Op<T>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>().max(1), value.len().max(1));
        self.nodes.push(Node {
            shape,
            value: Arc::new(value),
            requires_grad,
            op,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.node(*v).requires_grad)
    }

    /// Registers a tensor as a leaf, honoring its `requires_grad` flag. The
    /// payload is shared, not copied.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.shared_data(),
            requires_grad: t.requires_grad(),
            op: Op::Leaf,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor<T>) -> Var {
        let v = self.leaf(t);
        self.nodes[v.0].requires_grad = false;
        v
    }

    /// Leaf with an explicit gradient flag.
    pub fn input(&mut self, t: &Tensor<T>, requires_grad: bool) -> Var {
        let v = self.leaf(t);
        self.nodes[v.0].requires_grad = requires_grad;
        v
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn rows(&self, v: Var) -> usize {
        self.node(v).rows()
    }

    pub fn cols(&self, v: Var) -> usize {
        self.node(v).cols()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Snapshot of a node's value as a tensor (shares storage).
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::from_shared(n.shape.clone(), Arc::clone(&n.value))
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.node(v).grad.as_deref()
    }

    /// Number of nodes currently holding a gradient buffer.
    pub fn grad_buffer_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.grad.is_some()).count()
    }

    // ----- forward operations -----

    /// `a · b` for `a: m×k`, `b: k×n`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (na, nb) = (self.node(a), self.node(b));
        if na.shape.len() != 2 || nb.shape.len() != 2 {
            return Err(Error::dim("matmul", &na.shape, &nb.shape));
        }
        let (m, k) = (na.shape[0], na.shape[1]);
        let (k2, n) = if trans_b {
            (nb.shape[1], nb.shape[0])
        } else {
            (nb.shape[0], nb.shape[1])
        };
        if k != k2 {
            return Err(Error::dim("matmul", &na.shape, &nb.shape));
        }
        let bstride = if trans_b { (1, k) } else { (n, 1) };
        let mut out = vec![T::zero(); m * n];
        gemm_into(
            m,
            k,
            n,
            &na.value,
            (k, 1),
            &nb.value,
            bstride,
            T::zero(),
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul { a, b, trans_b }))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let n = self.node(x);
        let (r, c) = (n.rows(), n.cols());
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = n.value[i * c + j];
            }
        }
        let rg = self.rg(&[x]);
        self.push(vec![c, r], out, rg, Op::Transpose(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (self.node(a), self.node(b));
        if na.value.len() != nb.value.len() {
            return Err(Error::dim("add", &na.shape, &nb.shape));
        }
        let out = na
            .value
            .iter()
            .zip(nb.value.iter())
            .map(|(x, y)| *x + *y)
            .collect();
        let shape = na.shape.clone();
        let rg = self.rg(&[a, b]);
        Ok(self.push(shape, out, rg, Op::Add(a, b)))
    }

    /// Adds a bias vector along the last dimension.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (nx, nb) = (self.node(x), self.node(bias));
        let c = nx.cols();
        if nb.value.len() != c {
            return Err(Error::dim("add_bias", &nx.shape, &nb.shape));
        }
        let mut out = nx.value.to_vec();
        for row in out.chunks_mut(c) {
            for (o, b) in row.iter_mut().zip(nb.value.iter()) {
                *o += *b;
            }
        }
        let shape = nx.shape.clone();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(shape, out, rg, Op::AddBias { x, bias }))
    }

    /// `x · w + b` with `w: in×out`, `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let n = self.node(x);
        let out = n.value.iter().map(|v| *v * factor).collect();
        let shape = n.shape.clone();
        let rg = self.rg(&[x]);
        self.push(shape, out, rg, Op::Scale { x, factor })
    }

    /// Row-wise `softmax(scale · x)` with max subtraction.
    pub fn softmax_rows(&mut self, x: Var, scale: T) -> Result<Var> {
        // negated so that NaN is rejected too
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(scale > T::zero()) {
            return Err(Error::Contract(format!(
                "softmax scale must be > 0, got {scale}"
            )));
        }
        let n = self.node(x);
        check_finite("softmax_rows", &n.value)?;
        let c = n.cols();
        let mut out = vec![T::zero(); n.value.len()];
        for (src, dst) in n.value.chunks(c).zip(out.chunks_mut(c)) {
            let max = src.iter().fold(T::neg_infinity(), |m, v| m.max(*v));
            let mut total = T::zero();
            for (d, s) in dst.iter_mut().zip(src) {
                *d = ((*s - max) * scale).exp();
                total += *d;
            }
            for d in dst.iter_mut() {
                *d /= total;
            }
        }
        let shape = n.shape.clone();
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, rg, Op::Softmax { x, scale }))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (nx, ng, nb) = (self.node(x), self.node(gamma), self.node(beta));
        let c = nx.cols();
        if ng.value.len() != c || nb.value.len() != c {
            return Err(Error::dim("layer_norm", &nx.shape, &ng.shape));
        }
        let cf = T::from_usize_lossy(c);
        let mut out = vec![T::zero(); nx.value.len()];
        let mut stats = Vec::with_capacity(nx.rows());
        for (src, dst) in nx.value.chunks(c).zip(out.chunks_mut(c)) {
            let mean = src.iter().copied().sum::<T>() / cf;
            let var = src.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / cf;
            let denom = (var + eps).sqrt();
            // zero variance with eps = 0: collapse to beta
            let rstd = if denom > T::zero() {
                T::one() / denom
            } else {
                T::zero()
            };
            for (j, (d, s)) in dst.iter_mut().zip(src).enumerate() {
                *d = (*s - mean) * rstd * ng.value[j] + nb.value[j];
            }
            stats.push((mean, rstd));
        }
        let shape = nx.shape.clone();
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            shape,
            out,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
        ))
    }

    /// Exact GELU, `0.5·x·(1 + erf(x/√2))`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let n = self.node(x);
        let out = n.value.iter().map(|&v| v * normal_cdf(v)).collect();
        let shape = n.shape.clone();
        let rg = self.rg(&[x]);
        self.push(shape, out, rg, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let n = self.node(x);
        let out = n.value.iter().map(|&v| v.max(T::zero())).collect();
        let shape = n.shape.clone();
        let rg = self.rg(&[x]);
        self.push(shape, out, rg, Op::Relu(x))
    }

    /// Rectangular sub-block `[row0, row0+rows) × [col0, col0+cols)`.
    pub fn slice(
        &mut self,
        x: Var,
        row0: usize,
        rows: usize,
        col0: usize,
        cols: usize,
    ) -> Result<Var> {
        let n = self.node(x);
        let (r, c) = (n.rows(), n.cols());
        if row0 + rows > r || col0 + cols > c {
            return Err(Error::dim("slice", &n.shape, &[row0 + rows, col0 + cols]));
        }
        let mut out = Vec::with_capacity(rows * cols);
        for i in row0..row0 + rows {
            out.extend_from_slice(&n.value[i * c + col0..i * c + col0 + cols]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(vec![rows, cols], out, rg, Op::Slice { x, row0, col0 }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.node(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for p in parts {
            let n = self.node(*p);
            if n.cols() != c {
                return Err(Error::dim(
                    "concat_rows",
                    &self.node(parts[0]).shape,
                    &n.shape,
                ));
            }
            rows += n.rows();
            out.extend_from_slice(&n.value);
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![rows, c], out, rg, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.node(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|p| self.node(*p).cols()).collect();
        for p in parts {
            if self.node(*p).rows() != r {
                return Err(Error::dim(
                    "concat_cols",
                    &self.node(parts[0]).shape,
                    &self.node(*p).shape,
                ));
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.node(*p).value[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![r, total], out, rg, Op::ConcatCols(parts.to_vec())))
    }

    /// Gathers and linearly recombines rows according to `plan`.
    pub fn combine_rows(&mut self, x: Var, plan: Arc<RowPlan<T>>) -> Result<Var> {
        let n = self.node(x);
        let r = n.rows();
        if let Some(&(bad, _)) = plan.iter().flatten().find(|(src, _)| *src >= r) {
            return Err(Error::dim("combine_rows", &n.shape, &[bad]));
        }
        let c = n.cols();
        let out = combine_rows(&n.value, c, &plan);
        let rg = self.rg(&[x]);
        Ok(self.push(vec![plan.len(), c], out, rg, Op::CombineRows { x, plan }))
    }

    /// Selects rows by index (a row plan with unit weights).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let plan = idx.iter().map(|&i| vec![(i, T::one())]).collect();
        self.combine_rows(x, Arc::new(plan))
    }

    /// `Σ_j (w_j / Σ w) · rows_j`, a single output row. Differentiable in both
    /// the rows and the (nonnegative) weights. All-zero weights yield the plain
    /// mean with no gradient to the weights.
    pub fn weighted_mean(&mut self, rows: Var, weights: Var) -> Result<Var> {
        let (nr, nw) = (self.node(rows), self.node(weights));
        if nw.value.len() != nr.rows() {
            return Err(Error::dim("weighted_mean", &nr.shape, &nw.shape));
        }
        let (normalized, total) = normalize_weights(&nw.value);
        let plan = vec![normalized.iter().copied().enumerate().collect::<Vec<_>>()];
        let out = combine_rows(&nr.value, nr.cols(), &plan);
        let c = nr.cols();
        let rg = self.rg(&[rows, weights]);
        Ok(self.push(
            vec![1, c],
            out,
            rg,
            Op::WeightedMean {
                rows,
                weights,
                normalized,
                total,
            },
        ))
    }

    /// Forward identity on `x`; in the backward pass each row's score
    /// receives `Σ_c dy·x` as if `x` had been multiplied by a unit gate.
    pub fn straight_through(&mut self, x: Var, scores: Var) -> Result<Var> {
        let (nx, ns) = (self.node(x), self.node(scores));
        if ns.value.len() != nx.rows() {
            return Err(Error::dim("straight_through", &nx.shape, &ns.shape));
        }
        let out = nx.value.to_vec();
        let shape = nx.shape.clone();
        let rg = self.rg(&[x, scores]);
        Ok(self.push(shape, out, rg, Op::StraightThrough { x, scores }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.node(x).value.iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(vec![], vec![total], rg, Op::Sum(x))
    }

    /// Softmax cross-entropy of a single logit row against a class index.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let n = self.node(logits);
        let k = n.value.len();
        if target >= k {
            return Err(Error::Contract(format!(
                "target class {target} out of range for {k} logits"
            )));
        }
        let max = n.value.iter().fold(T::neg_infinity(), |m, v| m.max(*v));
        let exps: Vec<T> = n.value.iter().map(|v| (*v - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        let probs: Vec<T> = exps.iter().map(|e| *e / total).collect();
        let loss = total.ln() - (n.value[target] - max);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![],
            vec![loss],
            rg,
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
        ))
    }

    // ----- backward -----

    /// Reverse sweep from a scalar `loss`, populating gradients of every node
    /// that requires one. Nodes are visited once, in reverse creation order.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        if !self.node(loss).requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = self.nodes.iter_mut().map(|n| n.grad.take()).collect();
        for g in grads.iter_mut().skip(loss.0 + 1) {
            *g = None;
        }
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let Some(dy) = grads[id].take() else { continue };
            self.backward_node(id, &dy, &mut grads);
            grads[id] = Some(dy);
        }
        for (n, g) in self.nodes.iter_mut().zip(grads) {
            if n.requires_grad {
                n.grad = g;
            }
        }
        Ok(())
    }

    fn backward_node(&self, id: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let nodes = &self.nodes;
        macro_rules! with_grad {
            ($v:expr, |$g:ident| $body:block) => {
                if let Some($g) = grad_slot(nodes, grads, $v) $body
            };
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (na, nb) = (&nodes[a.0], &nodes[b.0]);
                let (m, k) = (na.shape[0], na.shape[1]);
                let n = node.shape[1];
                with_grad!(*a, |ga| {
                    // dA = dC · Bᵀ  (or dC · B when b was used transposed)
                    let bstride = if *trans_b { (k, 1) } else { (1, n) };
                    gemm_into(m, n, k, dy, (n, 1), &nb.value, bstride, T::one(), ga);
                });
                with_grad!(*b, |gb| {
                    if *trans_b {
                        // dB (n×k) = dCᵀ · A
                        gemm_into(n, m, k, dy, (1, n), &na.value, (k, 1), T::one(), gb);
                    } else {
                        // dB (k×n) = Aᵀ · dC
                        gemm_into(k, m, n, &na.value, (1, k), dy, (n, 1), T::one(), gb);
                    }
                });
            }
            Op::Transpose(x) => {
                let (r, c) = (node.shape[0], node.shape[1]);
                with_grad!(*x, |gx| {
                    for i in 0..r {
                        for j in 0..c {
                            gx[j * r + i] += dy[i * c + j];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    with_grad!(v, |g| {
                        g.iter_mut().zip(dy).for_each(|(g, d)| *g += *d);
                    });
                }
            }
            Op::AddBias { x, bias } => {
                with_grad!(*x, |gx| {
                    gx.iter_mut().zip(dy).for_each(|(g, d)| *g += *d);
                });
                let c = node.cols();
                with_grad!(*bias, |gb| {
                    for row in dy.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(g, d)| *g += *d);
                    }
                });
            }
            Op::Scale { x, factor } => {
                with_grad!(*x, |gx| {
                    gx.iter_mut().zip(dy).for_each(|(g, d)| *g += *d * *factor);
                });
            }
            Op::Softmax { x, scale } => {
                let c = node.cols();
                with_grad!(*x, |gx| {
                    for ((y, d), g) in node.value.chunks(c).zip(dy.chunks(c)).zip(gx.chunks_mut(c))
                    {
                        let dot: T = y.iter().zip(d).map(|(a, b)| *a * *b).sum();
                        for j in 0..c {
                            g[j] += *scale * y[j] * (d[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let c = node.cols();
                let cf = T::from_usize_lossy(c);
                let xv = &nodes[x.0].value;
                let gv = &nodes[gamma.0].value;
                let xhat = |i: usize, j: usize| (xv[i * c + j] - stats[i].0) * stats[i].1;
                with_grad!(*x, |gx| {
                    for (i, &(_, rstd)) in stats.iter().enumerate() {
                        let d = &dy[i * c..(i + 1) * c];
                        let mut mean_dh = T::zero();
                        let mut mean_dh_xh = T::zero();
                        for j in 0..c {
                            let dh = d[j] * gv[j];
                            mean_dh += dh;
                            mean_dh_xh += dh * xhat(i, j);
                        }
                        mean_dh /= cf;
                        mean_dh_xh /= cf;
                        for j in 0..c {
                            let dh = d[j] * gv[j];
                            gx[i * c + j] += rstd * (dh - mean_dh - xhat(i, j) * mean_dh_xh);
                        }
                    }
                });
                with_grad!(*gamma, |gg| {
                    for i in 0..stats.len() {
                        for j in 0..c {
                            gg[j] += dy[i * c + j] * xhat(i, j);
                        }
                    }
                });
                with_grad!(*beta, |gb| {
                    for row in dy.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(g, d)| *g += *d);
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = &nodes[x.0].value;
                with_grad!(*x, |gx| {
                    for ((g, d), &v) in gx.iter_mut().zip(dy).zip(xv.iter()) {
                        *g += *d * (normal_cdf(v) + v * normal_pdf(v));
                    }
                });
            }
            Op::Relu(x) => {
                let xv = &nodes[x.0].value;
                with_grad!(*x, |gx| {
                    for ((g, d), &v) in gx.iter_mut().zip(dy).zip(xv.iter()) {
                        if v > T::zero() {
                            *g += *d;
                        }
                    }
                });
            }
            Op::Slice { x, row0, col0 } => {
                let (rows, cols) = (node.shape[0], node.shape[1]);
                let c = nodes[x.0].cols();
                with_grad!(*x, |gx| {
                    for i in 0..rows {
                        for j in 0..cols {
                            gx[(row0 + i) * c + col0 + j] += dy[i * cols + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    with_grad!(*p, |g| {
                        g.iter_mut()
                            .zip(&dy[offset..offset + len])
                            .for_each(|(g, d)| *g += *d);
                    });
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.cols();
                let mut col0 = 0;
                for p in parts {
                    let w = nodes[p.0].cols();
                    let r = nodes[p.0].rows();
                    with_grad!(*p, |g| {
                        for i in 0..r {
                            for j in 0..w {
                                g[i * w + j] += dy[i * total + col0 + j];
                            }
                        }
                    });
                    col0 += w;
                }
            }
            Op::CombineRows { x, plan } => {
                let c = node.cols();
                with_grad!(*x, |gx| {
                    for (dst, terms) in plan.iter().enumerate() {
                        let d = &dy[dst * c..(dst + 1) * c];
                        for &(src, w) in terms {
                            for (g, dv) in gx[src * c..(src + 1) * c].iter_mut().zip(d) {
                                *g += w * *dv;
                            }
                        }
                    }
                });
            }
            Op::WeightedMean {
                rows,
                weights,
                normalized,
                total,
            } => {
                let c = node.cols();
                with_grad!(*rows, |gr| {
                    for (j, w) in normalized.iter().enumerate() {
                        for (g, d) in gr[j * c..(j + 1) * c].iter_mut().zip(dy) {
                            *g += *w * *d;
                        }
                    }
                });
                if *total > T::zero() {
                    let rv = &nodes[rows.0].value;
                    let dy_y: T = dy.iter().zip(node.value.iter()).map(|(a, b)| *a * *b).sum();
                    with_grad!(*weights, |gw| {
                        for (j, g) in gw.iter_mut().enumerate() {
                            let dy_r: T = dy
                                .iter()
                                .zip(&rv[j * c..(j + 1) * c])
                                .map(|(a, b)| *a * *b)
                                .sum();
                            *g += (dy_r - dy_y) / *total;
                        }
                    });
                }
            }
            Op::StraightThrough { x, scores } => {
                with_grad!(*x, |gx| {
                    gx.iter_mut().zip(dy).for_each(|(g, d)| *g += *d);
                });
                let c = node.cols();
                with_grad!(*scores, |gs| {
                    for (i, g) in gs.iter_mut().enumerate() {
                        let row = &node.value[i * c..(i + 1) * c];
                        *g += row
                            .iter()
                            .zip(&dy[i * c..(i + 1) * c])
                            .map(|(a, b)| *a * *b)
                            .sum::<T>();
                    }
                });
            }
            Op::Sum(x) => {
                with_grad!(*x, |gx| {
                    gx.iter_mut().for_each(|g| *g += dy[0]);
                });
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                with_grad!(*logits, |gl| {
                    for (j, (g, p)) in gl.iter_mut().zip(probs).enumerate() {
                        let onehot = if j == *target { T::one() } else { T::zero() };
                        *g += (*p - onehot) * dy[0];
                    }
                });
            }
        }
    }
}
