//! Dense-tensor engine with reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns an arena of nodes. Every operation records enough
//! provenance to replay the chain rule in reverse: calling
//! [`Tape::backward`] on a scalar loss walks the records once, in reverse
//! topological order, accumulating `d loss / d node` into each node that
//! requires gradients.
//!
//! Tensors are dense, row-major, `f64`. Rank is at most 2; vectors have
//! shape `[n]` and matrices `[n, m]`.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("dimension mismatch: left shape {left:?}, right shape {right:?} in {op}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected rank <= 2 with axis {axis} in range, got shape {shape:?}")]
    BadAxis {
        op: &'static str,
        axis: usize,
        shape: Vec<usize>,
    },
    #[error("NaN input propagated into {op}")]
    NanInput { op: &'static str },
    #[error("cross-sectional normalization needs at least 2 rows, got {rows}")]
    InsufficientCrossSection { rows: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("gate threshold must be nonnegative, got {0}")]
    NegativeThreshold(f64),
    #[error("masked softmax slice {slice} has no surviving entries")]
    EmptyMaskSlice { slice: usize },
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Provenance of a node, replayed during [`Tape::backward`].
#[derive(Debug, Clone)]
enum Op {
    /// Leaf: input data or parameter. No backward.
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    /// y = x . w (+ bias broadcast over rows). x: n*a, w: a*b.
    Linear {
        x: Var,
        w: Var,
        bias: Option<Var>,
    },
    MatMul(Var, Var),
    /// y = m . v where m: n*k, v: k.
    MatVec(Var, Var),
    /// out[i][j] = col[i] + row[j]; both length n.
    OuterSum(Var, Var),
    /// Column-wise concatenation of matrices sharing a row count.
    ConcatCols { parts: Vec<Var>, widths: Vec<usize> },
    Reshape(Var),
    Softmax { x: Var, axis: usize },
    /// Entries with mask 0 are exactly 0 in the output and get no gradient.
    MaskedSoftmax {
        x: Var,
        mask: Vec<f64>,
        axis: usize,
    },
    LeakyRelu { x: Var, slope: f64 },
    /// Per-column z-score with denominator n; degenerate columns map to 0.
    CrossSecNorm { x: Var, sigmas: Vec<f64> },
    /// scalar = sum_i max(0, x_i - theta)
    HingeSum { x: Var, theta: f64 },
    SumAll(Var),
    MeanAll(Var),
    /// Column means of an n*m matrix.
    MeanAxis0(Var),
    Dot(Var, Var),
    /// y = x - mean(x) over the whole tensor.
    Center(Var),
    Sqrt(Var),
    /// scalar = ||x||_2, with zero subgradient at the origin.
    L2Norm(Var),
    StackScalars(Vec<Var>),
    /// y[i][j] = x[i][j] * v[j]; v has one entry per column.
    ScaleColumns(Var, Var),
}

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Arena of tensor nodes plus the operation records connecting them.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(values.len(), numel(&shape));
        let grad = vec![0.0; values.len()];
        self.nodes.push(Node {
            shape,
            values,
            grad,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input: never accumulates gradient.
    pub fn input(&mut self, values: Vec<f64>, shape: &[usize]) -> Var {
        self.push(shape.to_vec(), values, false, Op::Leaf)
    }

    /// Trainable leaf: receives gradient on backward.
    pub fn param(&mut self, values: Vec<f64>, shape: &[usize]) -> Var {
        self.push(shape.to_vec(), values, true, Op::Leaf)
    }

    pub fn scalar_input(&mut self, v: f64) -> Var {
        self.input(vec![v], &[1])
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].values
    }

    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].values.len(), 1);
        self.nodes[v.0].values[0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Reset all gradient buffers to zero.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<(), DiffError> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(DiffError::ShapeMismatch {
                op,
                left: self.nodes[a.0].shape.clone(),
                right: self.nodes[b.0].shape.clone(),
            });
        }
        Ok(())
    }

    // ── Elementwise ─────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape(a, b, "add")?;
        let values: Vec<f64> = self.value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, values, self.rg(&[a, b]), Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape(a, b, "sub")?;
        let values: Vec<f64> = self.value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, values, self.rg(&[a, b]), Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape(a, b, "mul")?;
        let values: Vec<f64> = self.value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, values, self.rg(&[a, b]), Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape(a, b, "div")?;
        let values: Vec<f64> = self.value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x / y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, values, self.rg(&[a, b]), Op::Div(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let values: Vec<f64> = self.value(x).iter().map(|v| v * c).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, values, self.rg(&[x]), Op::Scale(x, c))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let values: Vec<f64> = self.value(x).iter().map(|v| v.sqrt()).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, values, self.rg(&[x]), Op::Sqrt(x))
    }

    // ── Linear algebra ──────────────────────────────────────────────

    /// y = x . w (+ bias broadcast over rows).
    ///
    /// Backward: dx = g . w^T, dw = x^T . g, dbias = column sums of g.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var, DiffError> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(DiffError::ShapeMismatch {
                op: "linear",
                left: xs,
                right: ws,
            });
        }
        let (n, a, b) = (xs[0], xs[1], ws[1]);
        if let Some(bv) = bias {
            if self.shape(bv) != [b] {
                return Err(DiffError::ShapeMismatch {
                    op: "linear bias",
                    left: self.shape(bv).to_vec(),
                    right: vec![b],
                });
            }
        }
        let mut values = vec![0.0; n * b];
        {
            let xv = self.value(x);
            let wv = self.value(w);
            for i in 0..n {
                for p in 0..a {
                    let xi = xv[i * a + p];
                    if xi == 0.0 {
                        continue;
                    }
                    for j in 0..b {
                        values[i * b + j] += xi * wv[p * b + j];
                    }
                }
            }
            if let Some(bv) = bias {
                let bvv = self.value(bv);
                for i in 0..n {
                    for j in 0..b {
                        values[i * b + j] += bvv[j];
                    }
                }
            }
        }
        let mut inputs = vec![x, w];
        if let Some(bv) = bias {
            inputs.push(bv);
        }
        let requires = self.rg(&inputs);
        Ok(self.push(vec![n, b], values, requires, Op::Linear { x, w, bias }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let (p, q, r) = (sa[0], sa[1], sb[1]);
        let mut values = vec![0.0; p * r];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..p {
                for t in 0..q {
                    let ait = av[i * q + t];
                    if ait == 0.0 {
                        continue;
                    }
                    for j in 0..r {
                        values[i * r + j] += ait * bv[t * r + j];
                    }
                }
            }
        }
        Ok(self.push(vec![p, r], values, self.rg(&[a, b]), Op::MatMul(a, b)))
    }

    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var, DiffError> {
        let (sm, sv) = (self.shape(m).to_vec(), self.shape(v).to_vec());
        if sm.len() != 2 || sv.len() != 1 || sm[1] != sv[0] {
            return Err(DiffError::ShapeMismatch {
                op: "matvec",
                left: sm,
                right: sv,
            });
        }
        let (n, k) = (sm[0], sm[1]);
        let mv = self.value(m);
        let vv = self.value(v);
        let values: Vec<f64> = (0..n)
            .map(|i| (0..k).map(|j| mv[i * k + j] * vv[j]).sum())
            .collect();
        Ok(self.push(vec![n], values, self.rg(&[m, v]), Op::MatVec(m, v)))
    }

    /// out[i][j] = col[i] + row[j]
    pub fn outer_sum(&mut self, col: Var, row: Var) -> Result<Var, DiffError> {
        let (sc, sr) = (self.shape(col).to_vec(), self.shape(row).to_vec());
        if sc.len() != 1 || sr.len() != 1 || sc[0] != sr[0] {
            return Err(DiffError::ShapeMismatch {
                op: "outer_sum",
                left: sc,
                right: sr,
            });
        }
        let n = sc[0];
        let cv = self.value(col);
        let rv = self.value(row);
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                values[i * n + j] = cv[i] + rv[j];
            }
        }
        Ok(self.push(vec![n, n], values, self.rg(&[col, row]), Op::OuterSum(col, row)))
    }

    /// Concatenate matrices along columns. Vectors are treated as single columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, DiffError> {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let rows = self.shape(parts[0])[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[0] != rows {
                return Err(DiffError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(parts[0]).to_vec(),
                    right: s.to_vec(),
                });
            }
            widths.push(if s.len() == 1 { 1 } else { s[1] });
        }
        let total: usize = widths.iter().sum();
        let mut values = vec![0.0; rows * total];
        let mut offset = 0;
        for (idx, &p) in parts.iter().enumerate() {
            let w = widths[idx];
            let pv = self.value(p);
            for i in 0..rows {
                values[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&pv[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let requires = self.rg(parts);
        Ok(self.push(
            vec![rows, total],
            values,
            requires,
            Op::ConcatCols {
                parts: parts.to_vec(),
                widths,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, DiffError> {
        if numel(shape) != numel(self.shape(x)) {
            return Err(DiffError::ShapeMismatch {
                op: "reshape",
                left: self.shape(x).to_vec(),
                right: shape.to_vec(),
            });
        }
        let values = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), values, self.rg(&[x]), Op::Reshape(x)))
    }

    // ── Activations / normalizations ────────────────────────────────

    /// Softmax along `axis`, numerically stabilized by a per-slice max shift.
    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> Result<Var, DiffError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(DiffError::BadAxis {
                op: "softmax_axis",
                axis,
                shape,
            });
        }
        if self.value(x).iter().any(|v| v.is_nan()) {
            return Err(DiffError::NanInput { op: "softmax_axis" });
        }
        let values = softmax_forward(self.value(x), &shape, axis, None)?;
        Ok(self.push(shape, values, self.rg(&[x]), Op::Softmax { x, axis }))
    }

    /// Softmax restricted to entries with mask 1; masked entries are exactly 0.
    pub fn masked_softmax_axis(
        &mut self,
        x: Var,
        mask: &[f64],
        axis: usize,
    ) -> Result<Var, DiffError> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(DiffError::BadAxis {
                op: "masked_softmax_axis",
                axis,
                shape,
            });
        }
        if mask.len() != numel(&shape) {
            return Err(DiffError::ShapeMismatch {
                op: "masked_softmax_axis",
                left: shape,
                right: vec![mask.len()],
            });
        }
        if self.value(x).iter().any(|v| v.is_nan()) {
            return Err(DiffError::NanInput {
                op: "masked_softmax_axis",
            });
        }
        let values = softmax_forward(self.value(x), &shape, axis, Some(mask))?;
        Ok(self.push(
            shape,
            values,
            self.rg(&[x]),
            Op::MaskedSoftmax {
                x,
                mask: mask.to_vec(),
                axis,
            },
        ))
    }

    /// y = x for x >= 0 else slope * x. Backward multiplier at exactly 0 is the slope.
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        debug_assert!(slope > 0.0 && slope < 1.0, "slope must be in (0,1)");
        let values: Vec<f64> = self.value(x)
            .iter()
            .map(|&v| if v >= 0.0 { v } else { slope * v })
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, values, self.rg(&[x]), Op::LeakyRelu { x, slope })
    }

    /// Per-column z-score over rows with denominator n. Columns whose
    /// standard deviation is below 1e-12 come back as all zeros.
    pub fn crosssec_norm(&mut self, x: Var) -> Result<Var, DiffError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(DiffError::BadAxis {
                op: "crosssec_norm",
                axis: 0,
                shape,
            });
        }
        let (n, m) = (shape[0], shape[1]);
        if n < 2 {
            return Err(DiffError::InsufficientCrossSection { rows: n });
        }
        let xv = self.value(x);
        let mut values = vec![0.0; n * m];
        let mut sigmas = vec![0.0; m];
        for j in 0..m {
            let mean: f64 = (0..n).map(|i| xv[i * m + j]).sum::<f64>() / n as f64;
            let var: f64 = (0..n)
                .map(|i| {
                    let d = xv[i * m + j] - mean;
                    d * d
                })
                .sum::<f64>()
                / n as f64;
            let sigma = var.sqrt();
            sigmas[j] = sigma;
            if sigma >= 1e-12 {
                for i in 0..n {
                    values[i * m + j] = (xv[i * m + j] - mean) / sigma;
                }
            }
        }
        Ok(self.push(shape, values, self.rg(&[x]), Op::CrossSecNorm { x, sigmas }))
    }

    /// 0/1 mask: 1 where a >= threshold. The mask is a constant leaf; no
    /// gradient flows back into `a` through it.
    pub fn gate_mask(&mut self, a: Var, threshold: f64) -> Result<Var, DiffError> {
        if threshold < 0.0 {
            return Err(DiffError::NegativeThreshold(threshold));
        }
        let values: Vec<f64> = self.value(a)
            .iter()
            .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        Ok(self.push(shape, values, false, Op::Leaf))
    }

    // ── Reductions ──────────────────────────────────────────────────

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().sum();
        self.push(vec![1], vec![s], self.rg(&[x]), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s: f64 = self.value(x).iter().sum::<f64>() / n as f64;
        self.push(vec![1], vec![s], self.rg(&[x]), Op::MeanAll(x))
    }

    /// Column means of an n*m matrix.
    pub fn mean_axis0(&mut self, x: Var) -> Result<Var, DiffError> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(DiffError::BadAxis {
                op: "mean_axis0",
                axis: 0,
                shape,
            });
        }
        let (n, m) = (shape[0], shape[1]);
        let xv = self.value(x);
        let values: Vec<f64> = (0..m)
            .map(|j| (0..n).map(|i| xv[i * m + j]).sum::<f64>() / n as f64)
            .collect();
        Ok(self.push(vec![m], values, self.rg(&[x]), Op::MeanAxis0(x)))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.same_shape(a, b, "dot")?;
        let s: f64 = self.value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .sum();
        Ok(self.push(vec![1], vec![s], self.rg(&[a, b]), Op::Dot(a, b)))
    }

    /// y = x - mean(x).
    pub fn center(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let mean: f64 = self.value(x).iter().sum::<f64>() / n as f64;
        let values: Vec<f64> = self.value(x).iter().map(|v| v - mean).collect();
        let shape = self.nodes[x.0].shape.clone();
        self.push(shape, values, self.rg(&[x]), Op::Center(x))
    }

    /// Euclidean norm as a scalar. Subgradient at the origin is zero.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().map(|v| v * v).sum::<f64>().sqrt();
        self.push(vec![1], vec![s], self.rg(&[x]), Op::L2Norm(x))
    }

    /// scalar = sum_i max(0, x_i - theta)
    pub fn hinge_sum(&mut self, x: Var, theta: f64) -> Var {
        let s: f64 = self.value(x).iter().map(|v| (v - theta).max(0.0)).sum();
        self.push(vec![1], vec![s], self.rg(&[x]), Op::HingeSum { x, theta })
    }

    /// Pack scalar nodes into one vector node.
    pub fn stack_scalars(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty(), "stack_scalars needs at least one scalar");
        let values: Vec<f64> = xs.iter().map(|&v| self.scalar(v)).collect();
        self.push(
            vec![xs.len()],
            values,
            self.rg(xs),
            Op::StackScalars(xs.to_vec()),
        )
    }

    /// y[i][j] = x[i][j] * v[j]
    pub fn scale_columns(&mut self, x: Var, v: Var) -> Result<Var, DiffError> {
        let (sx, sv) = (self.shape(x).to_vec(), self.shape(v).to_vec());
        if sx.len() != 2 || sv.len() != 1 || sx[1] != sv[0] {
            return Err(DiffError::ShapeMismatch {
                op: "scale_columns",
                left: sx,
                right: sv,
            });
        }
        let (n, m) = (sx[0], sx[1]);
        let xv = self.value(x);
        let vv = self.value(v);
        let mut values = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                values[i * m + j] = xv[i * m + j] * vv[j];
            }
        }
        Ok(self.push(vec![n, m], values, self.rg(&[x, v]), Op::ScaleColumns(x, v)))
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Accumulate d loss / d node into every node with `requires_grad`.
    ///
    /// Gradients are *added*: repeated calls without [`Tape::zero_grads`]
    /// accumulate. The loss node's own gradient is set to exactly 1.
    pub fn backward(&mut self, loss: Var) -> Result<(), DiffError> {
        if numel(self.shape(loss)) != 1 {
            return Err(DiffError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        self.nodes[loss.0].grad = vec![1.0];
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let op = self.nodes[idx].op.clone();
            self.backward_op(idx, &op);
        }
        Ok(())
    }

    fn add_grad(&mut self, v: Var, contrib: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let g = &mut self.nodes[v.0].grad;
        debug_assert_eq!(g.len(), contrib.len());
        for (dst, src) in g.iter_mut().zip(contrib) {
            *dst += src;
        }
    }

    fn backward_op(&mut self, out_idx: usize, op: &Op) {
        let g = self.nodes[out_idx].grad.clone();
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.add_grad(a, &g);
                self.add_grad(b, &g);
            }
            Op::Sub(a, b) => {
                self.add_grad(a, &g);
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                self.add_grad(b, &neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = g.iter().zip(self.value(b)).map(|(gi, bi)| gi * bi).collect();
                let db: Vec<f64> = g.iter().zip(self.value(a)).map(|(gi, ai)| gi * ai).collect();
                self.add_grad(a, &da);
                self.add_grad(b, &db);
            }
            Op::Div(a, b) => {
                let bv = self.value(b).to_vec();
                let av = self.value(a).to_vec();
                let da: Vec<f64> = g.iter().zip(&bv).map(|(gi, bi)| gi / bi).collect();
                let db: Vec<f64> = g
                    .iter()
                    .zip(av.iter().zip(&bv))
                    .map(|(gi, (ai, bi))| -gi * ai / (bi * bi))
                    .collect();
                self.add_grad(a, &da);
                self.add_grad(b, &db);
            }
            Op::Scale(x, c) => {
                let dx: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.add_grad(x, &dx);
            }
            Op::Sqrt(x) => {
                let y = self.nodes[out_idx].values.clone();
                let dx: Vec<f64> = g.iter().zip(&y).map(|(gi, yi)| gi / (2.0 * yi)).collect();
                self.add_grad(x, &dx);
            }
            Op::Linear { x, w, bias } => {
                let (n, a) = (self.shape(x)[0], self.shape(x)[1]);
                let b = self.shape(w)[1];
                let xv = self.value(x).to_vec();
                let wv = self.value(w).to_vec();
                // dx = g . w^T
                let mut dx = vec![0.0; n * a];
                for i in 0..n {
                    for j in 0..b {
                        let gij = g[i * b + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for p in 0..a {
                            dx[i * a + p] += gij * wv[p * b + j];
                        }
                    }
                }
                self.add_grad(x, &dx);
                // dw = x^T . g
                let mut dw = vec![0.0; a * b];
                for i in 0..n {
                    for p in 0..a {
                        let xip = xv[i * a + p];
                        if xip == 0.0 {
                            continue;
                        }
                        for j in 0..b {
                            dw[p * b + j] += xip * g[i * b + j];
                        }
                    }
                }
                self.add_grad(w, &dw);
                if let Some(bv) = bias {
                    let mut dbias = vec![0.0; b];
                    for i in 0..n {
                        for j in 0..b {
                            dbias[j] += g[i * b + j];
                        }
                    }
                    self.add_grad(bv, &dbias);
                }
            }
            Op::MatMul(a, b) => {
                let (p, q) = (self.shape(a)[0], self.shape(a)[1]);
                let r = self.shape(b)[1];
                let av = self.value(a).to_vec();
                let bv = self.value(b).to_vec();
                let mut da = vec![0.0; p * q];
                for i in 0..p {
                    for j in 0..r {
                        let gij = g[i * r + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for t in 0..q {
                            da[i * q + t] += gij * bv[t * r + j];
                        }
                    }
                }
                self.add_grad(a, &da);
                let mut db = vec![0.0; q * r];
                for i in 0..p {
                    for t in 0..q {
                        let ait = av[i * q + t];
                        if ait == 0.0 {
                            continue;
                        }
                        for j in 0..r {
                            db[t * r + j] += ait * g[i * r + j];
                        }
                    }
                }
                self.add_grad(b, &db);
            }
            Op::MatVec(m, v) => {
                let (n, k) = (self.shape(m)[0], self.shape(m)[1]);
                let mv = self.value(m).to_vec();
                let vv = self.value(v).to_vec();
                let mut dm = vec![0.0; n * k];
                let mut dv = vec![0.0; k];
                for i in 0..n {
                    let gi = g[i];
                    for j in 0..k {
                        dm[i * k + j] += gi * vv[j];
                        dv[j] += gi * mv[i * k + j];
                    }
                }
                self.add_grad(m, &dm);
                self.add_grad(v, &dv);
            }
            Op::OuterSum(col, row) => {
                let n = self.shape(col)[0];
                let mut dcol = vec![0.0; n];
                let mut drow = vec![0.0; n];
                for i in 0..n {
                    for j in 0..n {
                        dcol[i] += g[i * n + j];
                        drow[j] += g[i * n + j];
                    }
                }
                self.add_grad(col, &dcol);
                self.add_grad(row, &drow);
            }
            Op::ConcatCols {
                ref parts,
                ref widths,
            } => {
                let rows = self.shape(parts[0])[0];
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (idx, &p) in parts.iter().enumerate() {
                    let w = widths[idx];
                    let mut dp = vec![0.0; rows * w];
                    for i in 0..rows {
                        dp[i * w..(i + 1) * w]
                            .copy_from_slice(&g[i * total + offset..i * total + offset + w]);
                    }
                    self.add_grad(p, &dp);
                    offset += w;
                }
            }
            Op::Reshape(x) => {
                self.add_grad(x, &g);
            }
            Op::Softmax { x, axis } => {
                let y = self.nodes[out_idx].values.clone();
                let shape = self.shape(x).to_vec();
                let dx = softmax_backward(&g, &y, &shape, axis);
                self.add_grad(x, &dx);
            }
            Op::MaskedSoftmax { x, ref mask, axis } => {
                // Masked outputs are exactly 0, so the unmasked formula
                // already sends them zero gradient.
                let y = self.nodes[out_idx].values.clone();
                let shape = self.shape(x).to_vec();
                let mut dx = softmax_backward(&g, &y, &shape, axis);
                for (d, &m) in dx.iter_mut().zip(mask) {
                    if m == 0.0 {
                        *d = 0.0;
                    }
                }
                self.add_grad(x, &dx);
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(x).to_vec();
                let dx: Vec<f64> = g
                    .iter()
                    .zip(&xv)
                    .map(|(gi, &xi)| if xi > 0.0 { *gi } else { gi * slope })
                    .collect();
                self.add_grad(x, &dx);
            }
            Op::CrossSecNorm { x, ref sigmas } => {
                let (n, m) = (self.shape(x)[0], self.shape(x)[1]);
                let y = self.nodes[out_idx].values.clone();
                let mut dx = vec![0.0; n * m];
                for j in 0..m {
                    let sigma = sigmas[j];
                    if sigma < 1e-12 {
                        continue;
                    }
                    let gbar: f64 = (0..n).map(|i| g[i * m + j]).sum::<f64>() / n as f64;
                    let gybar: f64 =
                        (0..n).map(|i| g[i * m + j] * y[i * m + j]).sum::<f64>() / n as f64;
                    for i in 0..n {
                        dx[i * m + j] = (g[i * m + j] - gbar - y[i * m + j] * gybar) / sigma;
                    }
                }
                self.add_grad(x, &dx);
            }
            Op::HingeSum { x, theta } => {
                let xv = self.value(x).to_vec();
                let dx: Vec<f64> = xv
                    .iter()
                    .map(|&xi| if xi > theta { g[0] } else { 0.0 })
                    .collect();
                self.add_grad(x, &dx);
            }
            Op::SumAll(x) => {
                let dx = vec![g[0]; self.value(x).len()];
                self.add_grad(x, &dx);
            }
            Op::MeanAll(x) => {
                let n = self.value(x).len();
                let dx = vec![g[0] / n as f64; n];
                self.add_grad(x, &dx);
            }
            Op::MeanAxis0(x) => {
                let (n, m) = (self.shape(x)[0], self.shape(x)[1]);
                let mut dx = vec![0.0; n * m];
                for i in 0..n {
                    for j in 0..m {
                        dx[i * m + j] = g[j] / n as f64;
                    }
                }
                self.add_grad(x, &dx);
            }
            Op::Dot(a, b) => {
                let da: Vec<f64> = self.value(b).iter().map(|v| v * g[0]).collect();
                let db: Vec<f64> = self.value(a).iter().map(|v| v * g[0]).collect();
                self.add_grad(a, &da);
                self.add_grad(b, &db);
            }
            Op::Center(x) => {
                let n = g.len();
                let gbar: f64 = g.iter().sum::<f64>() / n as f64;
                let dx: Vec<f64> = g.iter().map(|gi| gi - gbar).collect();
                self.add_grad(x, &dx);
            }
            Op::L2Norm(x) => {
                let norm = self.nodes[out_idx].values[0].max(1e-12);
                let dx: Vec<f64> = self.value(x).iter().map(|v| g[0] * v / norm).collect();
                self.add_grad(x, &dx);
            }
            Op::StackScalars(ref xs) => {
                for (i, &v) in xs.iter().enumerate() {
                    self.add_grad(v, &[g[i]]);
                }
            }
            Op::ScaleColumns(x, v) => {
                let (n, m) = (self.shape(x)[0], self.shape(x)[1]);
                let xv = self.value(x).to_vec();
                let vv = self.value(v).to_vec();
                let mut dx = vec![0.0; n * m];
                let mut dv = vec![0.0; m];
                for i in 0..n {
                    for j in 0..m {
                        dx[i * m + j] = g[i * m + j] * vv[j];
                        dv[j] += g[i * m + j] * xv[i * m + j];
                    }
                }
                self.add_grad(x, &dx);
                self.add_grad(v, &dv);
            }
        }
    }
}

/// Shared softmax forward over rank-1/rank-2 tensors, optionally masked.
fn softmax_forward(
    x: &[f64],
    shape: &[usize],
    axis: usize,
    mask: Option<&[f64]>,
) -> Result<Vec<f64>, DiffError> {
    let (slices, stride, slice_len) = slice_layout(shape, axis);
    let mut out = vec![0.0; x.len()];
    for s in 0..slices {
        let base = slice_base(s, shape, axis);
        let alive = |t: usize| mask.map_or(true, |m| m[base + t * stride] != 0.0);
        let mut max = f64::NEG_INFINITY;
        for t in 0..slice_len {
            if alive(t) {
                max = max.max(x[base + t * stride]);
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(DiffError::EmptyMaskSlice { slice: s });
        }
        let mut denom = 0.0;
        for t in 0..slice_len {
            if alive(t) {
                let e = (x[base + t * stride] - max).exp();
                out[base + t * stride] = e;
                denom += e;
            }
        }
        for t in 0..slice_len {
            if alive(t) {
                out[base + t * stride] /= denom;
            }
        }
    }
    Ok(out)
}

fn softmax_backward(g: &[f64], y: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let (slices, stride, slice_len) = slice_layout(shape, axis);
    let mut dx = vec![0.0; g.len()];
    for s in 0..slices {
        let base = slice_base(s, shape, axis);
        let mut inner = 0.0;
        for t in 0..slice_len {
            inner += g[base + t * stride] * y[base + t * stride];
        }
        for t in 0..slice_len {
            let i = base + t * stride;
            dx[i] = y[i] * (g[i] - inner);
        }
    }
    dx
}

/// For rank-1 and rank-2 tensors, (number of slices, stride along axis, axis length).
fn slice_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    match (shape.len(), axis) {
        (1, 0) => (1, 1, shape[0]),
        (2, 0) => (shape[1], shape[1], shape[0]),
        (2, 1) => (shape[0], 1, shape[1]),
        _ => panic!("softmax supports rank <= 2, got shape {shape:?} axis {axis}"),
    }
}

fn slice_base(slice: usize, shape: &[usize], axis: usize) -> usize {
    match (shape.len(), axis) {
        (1, 0) => 0,
        (2, 0) => slice,
        (2, 1) => slice * shape[1],
        _ => unreachable!(),
    }
}

pub mod gradcheck {
    //! Central finite-difference oracle for gradient verification.
    //!
    //! Rebuilds the forward pass from scratch at perturbed leaf values, so
    //! the check is independent of any recorded backward rule.

    /// Central finite differences of `f` with respect to `values`, step `h`.
    ///
    /// `f` must rebuild its computation from the given leaf values and
    /// return the scalar output.
    pub fn finite_difference<F>(values: &[f64], h: f64, mut f: F) -> Vec<f64>
    where
        F: FnMut(&[f64]) -> f64,
    {
        let mut grad = vec![0.0; values.len()];
        let mut work = values.to_vec();
        for i in 0..values.len() {
            let orig = work[i];
            work[i] = orig + h;
            let up = f(&work);
            work[i] = orig - h;
            let down = f(&work);
            work[i] = orig;
            grad[i] = (up - down) / (2.0 * h);
        }
        grad
    }

    /// Worst relative error between analytic and finite-difference
    /// gradients. Pairs where both entries are below `atol` are ignored.
    pub fn max_rel_err(analytic: &[f64], numeric: &[f64], atol: f64) -> f64 {
        analytic
            .iter()
            .zip(numeric)
            .map(|(&a, &n)| {
                if a.abs() < atol && n.abs() < atol {
                    0.0
                } else {
                    (a - n).abs() / a.abs().max(n.abs()).max(atol)
                }
            })
            .fold(0.0, f64::max)
    }
}
