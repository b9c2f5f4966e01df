use super::{shape_err, Tensor, TensorError, LAYER_NORM_EPS};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    /// a · bᵀ
    MatMulNT(Var, Var),
    /// aᵀ · b
    MatMulTN(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// matrix + broadcast row
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Softmax(Var),
    LogSoftmax(Var, Option<Vec<bool>>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows {
        base: Var,
        src: Var,
        idx: Vec<usize>,
    },
    /// row i scaled by s[i]
    ScaleRows(Var, Var),
    SelectCol(Var, usize),
    /// out[i] = a[i, cols[i]]
    Pick(Var, Vec<usize>),
    SumAll(Var),
    Reshape(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation so gradients can be propagated back to
/// parameter leaves.
///
/// Parameter leaves borrow their values from the slice handed to
/// [`Tape::with_params`]; nothing is copied.
pub struct Tape<'p> {
    nodes: Vec<Node>,
    params: &'p [Tensor],
}

impl Default for Tape<'static> {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape<'static> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: &[],
        }
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<(), TensorError> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

/// out[m×n] += a[m×k] · b[k×n]
fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m×n] += a[m×k] · b[n×k]ᵀ
fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// out[k×n] += a[m×k]ᵀ · b[m×n]
fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl<'p> Tape<'p> {
    pub fn with_params(params: &'p [Tensor]) -> Self {
        Tape {
            nodes: Vec::new(),
            params,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(i)) => &self.params[*i],
            (None, _) => unreachable!("non-parameter node without a value"),
        }
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(
        &mut self,
        op_name: &'static str,
        rows: usize,
        cols: usize,
        data: Vec<f64>,
        op: Op,
        inputs: &[Var],
    ) -> Result<Var, TensorError> {
        check_finite(op_name, &data)?;
        let needs_grad = inputs.iter().any(|v| self.needs(*v));
        self.nodes.push(Node {
            value: Some(Tensor {
                shape: vec![rows, cols],
                data,
            }),
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A value that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that collects gradients in [`Tape::backward`] but is not a
    /// registered parameter. Used by gradient checks on raw inputs.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds every tensor of the parameter slice to a leaf, in order.
    pub fn bind_params(&mut self) -> Vec<Var> {
        (0..self.params.len())
            .map(|i| {
                self.nodes.push(Node {
                    value: None,
                    op: Op::Param(i),
                    needs_grad: true,
                });
                Var(self.nodes.len() - 1)
            })
            .collect()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}×{k}]·[{k2}×{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push("matmul", m, n, out, Op::MatMul(a, b), &[a, b])
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(shape_err("matmul_nt", format!("[{m}×{k}]·[{n}×{k2}]ᵀ")));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push("matmul_nt", m, n, out, Op::MatMulNT(a, b), &[a, b])
    }

    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, k) = self.dims(a);
        let (m2, n) = self.dims(b);
        if m != m2 {
            return Err(shape_err("matmul_tn", format!("[{m}×{k}]ᵀ·[{m2}×{n}]")));
        }
        let mut out = vec![0.0; k * n];
        gemm_tn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push("matmul_tn", k, n, out, Op::MatMulTN(a, b), &[a, b])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize), TensorError> {
        let da = self.dims(a);
        let db = self.dims(b);
        if da != db {
            return Err(shape_err(op, format!("{da:?} vs {db:?}")));
        }
        Ok(da)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (r, c) = self.same_shape("add", a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        self.push("add", r, c, out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (r, c) = self.same_shape("sub", a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        self.push("sub", r, c, out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (r, c) = self.same_shape("mul", a, b)?;
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        self.push("mul", r, c, out, Op::Mul(a, b), &[a, b])
    }

    /// Adds a `[1×n]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, TensorError> {
        let (m, n) = self.dims(a);
        if self.value(row).len() != n {
            return Err(shape_err(
                "add_row",
                format!("row of {} for {n} columns", self.value(row).len()),
            ));
        }
        let bias = self.value(row).data();
        let out = self
            .value(a)
            .data()
            .chunks(n)
            .flat_map(|r| r.iter().zip(bias).map(|(x, y)| x + y))
            .collect();
        self.push("add_row", m, n, out, Op::AddRow(a, row), &[a, row])
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        let (r, c) = self.dims(a);
        let out = self.value(a).data().iter().map(|x| x * s).collect();
        self.push("scale", r, c, out, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, c) = self.dims(a);
        let out = self.value(a).data().iter().map(|x| x.max(0.0)).collect();
        self.push("relu", r, c, out, Op::Relu(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, c) = self.dims(a);
        let out = self.value(a).data().iter().map(|x| x.tanh()).collect();
        self.push("tanh", r, c, out, Op::Tanh(a), &[a])
    }

    fn check_mask(&self, op: &'static str, m: usize, n: usize, mask: &Option<Vec<bool>>) -> Result<(), TensorError> {
        if let Some(mask) = mask {
            if mask.len() != m * n {
                return Err(shape_err(op, format!("mask of {} for [{m}×{n}]", mask.len())));
            }
        }
        Ok(())
    }

    /// Row-wise softmax; `mask[i*n+j] == true` acts as a `-inf` logit.
    pub fn softmax(&mut self, a: Var, mask: Option<Vec<bool>>) -> Result<Var, TensorError> {
        let (m, n) = self.dims(a);
        self.check_mask("softmax", m, n, &mask)?;
        let x = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let allowed = |j: usize| mask.as_ref().is_none_or(|mk| !mk[i * n + j]);
            let max = (0..n)
                .filter(|&j| allowed(j))
                .map(|j| x[i * n + j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(TensorError::Degenerate { op: "softmax", row: i });
            }
            let mut sum = 0.0;
            for j in (0..n).filter(|&j| allowed(j)) {
                let e = (x[i * n + j] - max).exp();
                out[i * n + j] = e;
                sum += e;
            }
            for v in &mut out[i * n..(i + 1) * n] {
                *v /= sum;
            }
        }
        self.push("softmax", m, n, out, Op::Softmax(a), &[a])
    }

    /// Row-wise log-softmax; masked entries are excluded from the
    /// normalizer and reported as 0 (they carry no probability mass).
    pub fn log_softmax(&mut self, a: Var, mask: Option<Vec<bool>>) -> Result<Var, TensorError> {
        let (m, n) = self.dims(a);
        self.check_mask("log_softmax", m, n, &mask)?;
        let x = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let allowed = |j: usize| mask.as_ref().is_none_or(|mk| !mk[i * n + j]);
            let max = (0..n)
                .filter(|&j| allowed(j))
                .map(|j| x[i * n + j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(TensorError::Degenerate {
                    op: "log_softmax",
                    row: i,
                });
            }
            let lse = max
                + (0..n)
                    .filter(|&j| allowed(j))
                    .map(|j| (x[i * n + j] - max).exp())
                    .sum::<f64>()
                    .ln();
            for j in (0..n).filter(|&j| allowed(j)) {
                out[i * n + j] = x[i * n + j] - lse;
            }
        }
        self.push("log_softmax", m, n, out, Op::LogSoftmax(a, mask), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, TensorError> {
        let (m, n) = self.dims(x);
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(shape_err("layer_norm", "gain/bias length must equal row width"));
        }
        let xd = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = g[j] * h + b[j];
            }
        }
        self.push(
            "layer_norm",
            m,
            n,
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let m = self.dims(parts[0]).0;
        if parts.iter().any(|p| self.dims(*p).0 != m) {
            return Err(shape_err("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|p| self.dims(*p).1).sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                out.extend_from_slice(self.value(*p).row(i));
            }
        }
        self.push("concat_cols", m, total, out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let n = self.dims(parts[0]).1;
        if parts.iter().any(|p| self.dims(*p).1 != n) {
            return Err(shape_err("concat_rows", "column counts differ"));
        }
        let mut out = Vec::new();
        for p in parts {
            out.extend_from_slice(self.value(*p).data());
        }
        let m = out.len() / n.max(1);
        self.push("concat_rows", m, n, out, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Row selection; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let (m, n) = self.dims(a);
        if let Some(bad) = idx.iter().find(|&&i| i >= m) {
            return Err(shape_err("gather_rows", format!("row {bad} of {m}")));
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(src.row(i));
        }
        self.push("gather_rows", idx.len(), n, out, Op::GatherRows(a, idx.to_vec()), &[a])
    }

    /// Copy of `base` with `src` row `k` added onto row `idx[k]`. Rows not
    /// named in `idx` are copied bit-for-bit.
    pub fn scatter_add_rows(&mut self, base: Var, src: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let (m, n) = self.dims(base);
        let (s, n2) = self.dims(src);
        if n != n2 || s != idx.len() || idx.iter().any(|&i| i >= m) {
            return Err(shape_err("scatter_add_rows", "index/shape mismatch"));
        }
        let mut out = self.value(base).data().to_vec();
        let sd = self.value(src).data();
        for (k, &i) in idx.iter().enumerate() {
            for j in 0..n {
                out[i * n + j] += sd[k * n + j];
            }
        }
        self.push(
            "scatter_add_rows",
            m,
            n,
            out,
            Op::ScatterAddRows {
                base,
                src,
                idx: idx.to_vec(),
            },
            &[base, src],
        )
    }

    /// Multiplies row `i` of `a` by the scalar `s[i]` (`s` is `[m×1]`).
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var, TensorError> {
        let (m, n) = self.dims(a);
        if self.value(s).len() != m {
            return Err(shape_err("scale_rows", "one scale per row required"));
        }
        let sd = self.value(s).data();
        let out = self
            .value(a)
            .data()
            .chunks(n)
            .zip(sd)
            .flat_map(|(r, f)| r.iter().map(move |x| x * f))
            .collect();
        self.push("scale_rows", m, n, out, Op::ScaleRows(a, s), &[a, s])
    }

    pub fn select_col(&mut self, a: Var, j: usize) -> Result<Var, TensorError> {
        let (m, n) = self.dims(a);
        if j >= n {
            return Err(shape_err("select_col", format!("column {j} of {n}")));
        }
        let out = (0..m).map(|i| self.value(a).get(i, j)).collect();
        self.push("select_col", m, 1, out, Op::SelectCol(a, j), &[a])
    }

    /// `out[i] = a[i, cols[i]]` as an `[m×1]` column.
    pub fn pick(&mut self, a: Var, cols: &[usize]) -> Result<Var, TensorError> {
        let (m, n) = self.dims(a);
        if cols.len() != m || cols.iter().any(|&c| c >= n) {
            return Err(shape_err("pick", "one in-range column per row required"));
        }
        let out = cols.iter().enumerate().map(|(i, &c)| self.value(a).get(i, c)).collect();
        self.push("pick", m, 1, out, Op::Pick(a, cols.to_vec()), &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.value(a).data().iter().sum();
        self.push("sum_all", 1, 1, vec![s], Op::SumAll(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, TensorError> {
        if self.value(a).len() != rows * cols {
            return Err(shape_err("reshape", "element count changes"));
        }
        let out = self.value(a).data().to_vec();
        self.push("reshape", rows, cols, out, Op::Reshape(a), &[a])
    }

    /// Multi-head scaled dot-product attention without projections: heads
    /// are contiguous column blocks of `q`, `k`, `v`, and the per-head
    /// outputs are concatenated back in the same layout.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<Vec<bool>>,
    ) -> Result<Var, TensorError> {
        let (a, d) = self.dims(q);
        let (n, dk) = self.dims(k);
        let (n2, dv) = self.dims(v);
        if dk != d || dv != d || n2 != n {
            return Err(shape_err("attention", "q/k/v widths or key counts differ"));
        }
        if heads == 0 || d % heads != 0 {
            return Err(shape_err("attention", format!("{d} not divisible by {heads} heads")));
        }
        self.check_mask("attention", a, n, &mask)?;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut probs = vec![0.0; heads * a * n];
        let mut out = vec![0.0; a * d];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..a {
                let p = &mut probs[(h * a + i) * n..(h * a + i + 1) * n];
                let mut max = f64::NEG_INFINITY;
                for j in 0..n {
                    if mask.as_ref().is_some_and(|mk| mk[i * n + j]) {
                        continue;
                    }
                    let mut s = 0.0;
                    for c in 0..dh {
                        s += qd[i * d + off + c] * kd[j * d + off + c];
                    }
                    p[j] = s * scale;
                    max = max.max(p[j]);
                }
                if max == f64::NEG_INFINITY {
                    return Err(TensorError::Degenerate { op: "attention", row: i });
                }
                let mut sum = 0.0;
                for j in 0..n {
                    if mask.as_ref().is_some_and(|mk| mk[i * n + j]) {
                        p[j] = 0.0;
                    } else {
                        p[j] = (p[j] - max).exp();
                        sum += p[j];
                    }
                }
                for j in 0..n {
                    p[j] /= sum;
                    if p[j] != 0.0 {
                        for c in 0..dh {
                            out[i * d + off + c] += p[j] * vd[j * d + off + c];
                        }
                    }
                }
            }
        }
        self.push(
            "attention",
            a,
            d,
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Propagates `seed · ∂root` back through the tape and adds the
    /// resulting parameter gradients into `param_grads` (one tensor per
    /// bound parameter, same order as the parameter slice).
    pub fn backward(&self, root: Var, seed: f64, param_grads: &mut [Tensor]) -> Result<(), TensorError> {
        let grads = self.gradients(root, seed)?;
        for (node, g) in self.nodes.iter().zip(grads) {
            if let (Op::Param(i), Some(g)) = (&node.op, g) {
                for (dst, src) in param_grads[*i].data_mut().iter_mut().zip(&g) {
                    *dst += src;
                }
            }
        }
        Ok(())
    }

    /// Gradient of `seed · root` with respect to a single recorded value.
    pub fn grad_of(&self, root: Var, seed: f64, wrt: Var) -> Result<Option<Tensor>, TensorError> {
        let mut grads = self.gradients(root, seed)?;
        let shape = self.value(wrt).shape().to_vec();
        Ok(grads[wrt.0].take().map(|g| Tensor { shape, data: g }))
    }

    fn gradients(&self, root: Var, seed: f64) -> Result<Vec<Option<Vec<f64>>>, TensorError> {
        if self.value(root).len() != 1 {
            return Err(shape_err("backward", "root must be a scalar"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![seed]);
        for idx in (0..=root.0).rev() {
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.propagate(idx, &gout, &mut grads);
            grads[idx] = Some(gout);
        }
        for g in grads.iter().flatten() {
            check_finite("backward", g)?;
        }
        Ok(grads)
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.as_ref();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                if self.needs(*a) {
                    let ga = accumulate(&mut grads[a.0], m * k);
                    gemm_nt(g, self.value(*b).data(), ga, m, n, k);
                }
                if self.needs(*b) {
                    let gb = accumulate(&mut grads[b.0], k * n);
                    gemm_tn(self.value(*a).data(), g, gb, m, k, n);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).0;
                if self.needs(*a) {
                    let ga = accumulate(&mut grads[a.0], m * k);
                    gemm_nn(g, self.value(*b).data(), ga, m, n, k);
                }
                if self.needs(*b) {
                    let gb = accumulate(&mut grads[b.0], n * k);
                    gemm_tn(g, self.value(*a).data(), gb, m, n, k);
                }
            }
            Op::MatMulTN(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                if self.needs(*a) {
                    let ga = accumulate(&mut grads[a.0], m * k);
                    gemm_nt(self.value(*b).data(), g, ga, m, n, k);
                }
                if self.needs(*b) {
                    let gb = accumulate(&mut grads[b.0], m * n);
                    gemm_nn(self.value(*a).data(), g, gb, m, k, n);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.needs(*v) {
                        let gv = accumulate(&mut grads[v.0], g.len());
                        gv.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if self.needs(*b) {
                    let gb = accumulate(&mut grads[b.0], g.len());
                    gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bv = self.value(*b).data();
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if self.needs(*b) {
                    let av = self.value(*a).data();
                    let gb = accumulate(&mut grads[b.0], g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::AddRow(a, row) => {
                let n = self.dims(*a).1;
                if self.needs(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if self.needs(*row) {
                    let gr = accumulate(&mut grads[row.0], n);
                    for r in g.chunks(n) {
                        gr.iter_mut().zip(r).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Scale(a, s) => {
                if self.needs(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(d, v)| *d += v * s);
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let av = self.value(*a).data();
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for i in 0..g.len() {
                        if av[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                if self.needs(*a) {
                    let y = out.unwrap().data();
                    let ga = accumulate(&mut grads[a.0], g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                }
            }
            Op::Softmax(a) => {
                if self.needs(*a) {
                    let y = out.unwrap();
                    let (m, n) = (y.rows(), y.cols());
                    let yd = y.data();
                    let ga = accumulate(&mut grads[a.0], m * n);
                    for i in 0..m {
                        let r = i * n..(i + 1) * n;
                        let dot: f64 = g[r.clone()].iter().zip(&yd[r.clone()]).map(|(x, y)| x * y).sum();
                        for j in r {
                            ga[j] += yd[j] * (g[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a, mask) => {
                if self.needs(*a) {
                    let y = out.unwrap();
                    let (m, n) = (y.rows(), y.cols());
                    let yd = y.data();
                    let ga = accumulate(&mut grads[a.0], m * n);
                    for i in 0..m {
                        let allowed = |j: usize| mask.as_ref().is_none_or(|mk| !mk[i * n + j]);
                        let gsum: f64 = (0..n).filter(|&j| allowed(j)).map(|j| g[i * n + j]).sum();
                        for j in (0..n).filter(|&j| allowed(j)) {
                            ga[i * n + j] += g[i * n + j] - yd[i * n + j].exp() * gsum;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (m, n) = self.dims(*x);
                let gv = self.value(*gain).data();
                if self.needs(*gain) {
                    let gg = accumulate(&mut grads[gain.0], n);
                    for i in 0..m * n {
                        gg[i % n] += g[i] * xhat[i];
                    }
                }
                if self.needs(*bias) {
                    let gb = accumulate(&mut grads[bias.0], n);
                    for i in 0..m * n {
                        gb[i % n] += g[i];
                    }
                }
                if self.needs(*x) {
                    let gx = accumulate(&mut grads[x.0], m * n);
                    for i in 0..m {
                        let r = i * n..(i + 1) * n;
                        let dxhat: Vec<f64> = r.clone().map(|k| g[k] * gv[k - i * n]).collect();
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dx = dxhat.iter().zip(&xhat[r.clone()]).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for (c, k) in r.enumerate() {
                            gx[k] += inv_std[i] * (dxhat[c] - mean_d - xhat[k] * mean_dx);
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let m = out.unwrap().rows();
                let total = out.unwrap().cols();
                let mut off = 0;
                for p in parts {
                    let w = self.dims(*p).1;
                    if self.needs(*p) {
                        let gp = accumulate(&mut grads[p.0], m * w);
                        for i in 0..m {
                            for c in 0..w {
                                gp[i * w + c] += g[i * total + off + c];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if self.needs(*p) {
                        let gp = accumulate(&mut grads[p.0], len);
                        gp.iter_mut().zip(&g[off..off + len]).for_each(|(d, s)| *d += s);
                    }
                    off += len;
                }
            }
            Op::GatherRows(a, idx) => {
                if self.needs(*a) {
                    let (m, n) = self.dims(*a);
                    let ga = accumulate(&mut grads[a.0], m * n);
                    for (k, &i) in idx.iter().enumerate() {
                        for c in 0..n {
                            ga[i * n + c] += g[k * n + c];
                        }
                    }
                }
            }
            Op::ScatterAddRows { base, src, idx } => {
                let n = self.dims(*base).1;
                if self.needs(*base) {
                    let gb = accumulate(&mut grads[base.0], g.len());
                    gb.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if self.needs(*src) {
                    let gs = accumulate(&mut grads[src.0], idx.len() * n);
                    for (k, &i) in idx.iter().enumerate() {
                        for c in 0..n {
                            gs[k * n + c] += g[i * n + c];
                        }
                    }
                }
            }
            Op::ScaleRows(a, s) => {
                let (m, n) = self.dims(*a);
                if self.needs(*a) {
                    let sd = self.value(*s).data();
                    let ga = accumulate(&mut grads[a.0], m * n);
                    for i in 0..m {
                        for c in 0..n {
                            ga[i * n + c] += g[i * n + c] * sd[i];
                        }
                    }
                }
                if self.needs(*s) {
                    let ad = self.value(*a).data();
                    let gs = accumulate(&mut grads[s.0], m);
                    for i in 0..m {
                        gs[i] += (0..n).map(|c| g[i * n + c] * ad[i * n + c]).sum::<f64>();
                    }
                }
            }
            Op::SelectCol(a, j) => {
                if self.needs(*a) {
                    let (m, n) = self.dims(*a);
                    let ga = accumulate(&mut grads[a.0], m * n);
                    for i in 0..m {
                        ga[i * n + j] += g[i];
                    }
                }
            }
            Op::Pick(a, cols) => {
                if self.needs(*a) {
                    let (m, n) = self.dims(*a);
                    let ga = accumulate(&mut grads[a.0], m * n);
                    for (i, &c) in cols.iter().enumerate() {
                        ga[i * n + c] += g[i];
                    }
                }
            }
            Op::SumAll(a) => {
                if self.needs(*a) {
                    let len = self.value(*a).len();
                    let ga = accumulate(&mut grads[a.0], len);
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Reshape(a) => {
                if self.needs(*a) {
                    let ga = accumulate(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, g, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (a, d) = self.dims(q);
        let n = self.dims(k).0;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut gq = vec![0.0; a * d];
        let mut gk = vec![0.0; n * d];
        let mut gv = vec![0.0; n * d];
        let mut dp = vec![0.0; n];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..a {
                let p = &probs[(h * a + i) * n..(h * a + i + 1) * n];
                let go = &g[i * d + off..i * d + off + dh];
                let mut dot = 0.0;
                for j in 0..n {
                    if p[j] == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    let mut s = 0.0;
                    for c in 0..dh {
                        s += go[c] * vd[j * d + off + c];
                        gv[j * d + off + c] += p[j] * go[c];
                    }
                    dp[j] = s;
                    dot += s * p[j];
                }
                for j in 0..n {
                    if p[j] == 0.0 {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - dot) * scale;
                    for c in 0..dh {
                        gq[i * d + off + c] += ds * kd[j * d + off + c];
                        gk[j * d + off + c] += ds * qd[i * d + off + c];
                    }
                }
            }
        }
        for (var, src) in [(q, gq), (k, gk), (v, gv)] {
            if self.needs(var) {
                let dst = accumulate(&mut grads[var.0], src.len());
                dst.iter_mut().zip(&src).for_each(|(d, s)| *d += s);
            }
        }
    }
}
