use super::{check_finite, Result, Tensor, TensorError};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;
const L2_EPS: f64 = 1e-12;

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that made it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How a broadcast operand maps output positions back to its own storage.
#[derive(Debug, Clone)]
enum Bcast {
    Same,
    /// Operand equals a trailing block of the output, repeated.
    Modulo(usize),
    Map(Vec<usize>),
}

impl Bcast {
    /// Source index for each of `total` output positions, in order.
    fn iter(&self, total: usize) -> BcastIter<'_> {
        match self {
            Bcast::Same => BcastIter::Same(0..total),
            Bcast::Modulo(n) => BcastIter::Modulo {
                n: *n,
                j: 0,
                left: total,
            },
            Bcast::Map(m) => BcastIter::Map(m[..total].iter()),
        }
    }
}

// Counting instead of `i % n` keeps integer division out of the hot loops.
enum BcastIter<'a> {
    Same(std::ops::Range<usize>),
    Modulo { n: usize, j: usize, left: usize },
    Map(std::slice::Iter<'a, usize>),
}

impl Iterator for BcastIter<'_> {
    type Item = usize;

    #[inline]
    fn next(&mut self) -> Option<usize> {
        match self {
            BcastIter::Same(r) => r.next(),
            BcastIter::Modulo { n, j, left } => {
                if *left == 0 {
                    return None;
                }
                let r = *j;
                *j += 1;
                if *j == *n {
                    *j = 0;
                }
                *left -= 1;
                Some(r)
            }
            BcastIter::Map(it) => it.next().copied(),
        }
    }
}

#[inline]
fn gelu_tanh(v: f64) -> f64 {
    let u = 2.0 * GELU_C * (v + GELU_K * v * v * v);
    1.0 - 2.0 / (u.exp() + 1.0)
}

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Exp,
    Log,
    Abs,
    Gelu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        kind: Binary,
        a: Var,
        b: Var,
        ia: Bcast,
        ib: Bcast,
    },
    Unary {
        kind: Unary,
        x: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_rhs: bool,
    },
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ScatterRows {
        x: Var,
        idx: Vec<usize>,
    },
    SumAxis {
        x: Var,
        axis: usize,
        scale: f64,
    },
    SumAll {
        x: Var,
        scale: f64,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    SmoothL1 {
        a: Var,
        b: Var,
        beta: f64,
    },
    StopGradient,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
///
/// A node has an entry only if it requires grad and lies on a path from the
/// loss. Nodes behind a stop-gradient boundary have none.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`Gradients::get`], but materializes zeros for absent entries.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

/// The recording tape. One graph per forward pass; nodes are immutable once
/// written.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    annotations: Vec<(String, Vec<usize>)>,
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

fn broadcast_index(src: &[usize], out: &[usize]) -> Bcast {
    if src == out {
        return Bcast::Same;
    }
    let trimmed: &[usize] = {
        let lead = src.iter().take_while(|&&d| d == 1).count();
        &src[lead..]
    };
    if trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == *trimmed {
        return Bcast::Modulo(trimmed.iter().product::<usize>().max(1));
    }
    let rank = out.len();
    let offset = rank - src.len();
    let src_strides = strides(src);
    let mut eff = vec![0; rank];
    for i in 0..src.len() {
        if src[i] != 1 {
            eff[i + offset] = src_strides[i];
        }
    }
    let total: usize = out.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    let mut pos = 0usize;
    for _ in 0..total {
        map.push(pos);
        for d in (0..rank).rev() {
            counter[d] += 1;
            pos += eff[d];
            if counter[d] < out[d] {
                break;
            }
            pos -= eff[d] * counter[d];
            counter[d] = 0;
        }
    }
    Bcast::Map(map)
}

/// `c[m,n] = alpha * a[m,k] @ b[k,n] + beta * c`, with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    // SAFETY: callers pass slices holding at least the strided extents above,
    // and `c` is a distinct, contiguous m×n row-major buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Splits a shape around `axis` into (outer, len, inner) extents.
fn lanes(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let eff: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let rank = out_shape.len();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    if rank == 0 {
        out.extend_from_slice(data);
        return (out_shape, out);
    }
    let inner_len = out_shape[rank - 1];
    let inner_stride = eff[rank - 1];
    let mut counter = vec![0usize; rank];
    let mut base = 0usize;
    let mut produced = 0usize;
    while produced < total {
        let mut p = base;
        for _ in 0..inner_len {
            out.push(data[p]);
            p += inner_stride;
        }
        produced += inner_len;
        for d in (0..rank - 1).rev() {
            counter[d] += 1;
            base += eff[d];
            if counter[d] < out_shape[d] {
                break;
            }
            base -= eff[d] * counter[d];
            counter[d] = 0;
        }
    }
    (out_shape, out)
}

fn add_into(dst: &mut Option<Vec<f64>>, src: &[f64]) {
    match dst {
        Some(d) => {
            for (x, y) in d.iter_mut().zip(src) {
                *x += y;
            }
        }
        None => *dst = Some(src.to_vec()),
    }
}

fn add_owned(dst: &mut Option<Vec<f64>>, src: Vec<f64>) {
    match dst {
        Some(d) => {
            for (x, y) in d.iter_mut().zip(&src) {
                *x += y;
            }
        }
        None => *dst = Some(src),
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a named shape observation; used to instrument model passes.
    pub fn annotate(&mut self, label: impl Into<String>, shape: &[usize]) {
        self.annotations.push((label.into(), shape.to_vec()));
    }

    pub fn annotations(&self) -> &[(String, Vec<usize>)] {
        &self.annotations
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        value: Tensor,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var> {
        check_finite(name, value.data())?;
        Ok(self.push(value, op, requires_grad))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(TensorError::AxisOutOfRange { op, axis, rank });
        }
        Ok(())
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    /// Identity on values; blocks gradient flow.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.push(v, Op::StopGradient, false)
    }

    fn binary(&mut self, kind: Binary, name: &'static str, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let out_shape = broadcast_shape(&sa, &sb).ok_or(TensorError::ShapeMismatch {
            op: name,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let ia = broadcast_index(&sa, &out_shape);
        let ib = broadcast_index(&sb, &out_shape);
        let total: usize = out_shape.iter().product();
        let da = self.value(a).data();
        let db = self.value(b).data();
        let f: fn(f64, f64) -> f64 = match kind {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
            Binary::Div => |x, y| x / y,
        };
        let data: Vec<f64> = match (&ia, &ib) {
            (Bcast::Same, Bcast::Same) => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            (Bcast::Same, Bcast::Modulo(n)) => {
                let mut out = Vec::with_capacity(total);
                for chunk in da.chunks_exact(*n) {
                    out.extend(chunk.iter().zip(db).map(|(&x, &y)| f(x, y)));
                }
                out
            }
            (Bcast::Modulo(n), Bcast::Same) => {
                let mut out = Vec::with_capacity(total);
                for chunk in db.chunks_exact(*n) {
                    out.extend(da.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
                }
                out
            }
            _ => ia
                .iter(total)
                .zip(ib.iter(total))
                .map(|(x, y)| f(da[x], db[y]))
                .collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        self.push_checked(
            name,
            Tensor::new(out_shape, data)?,
            Op::Binary { kind, a, b, ia, ib },
            rg,
        )
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, "mul", a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, "div", a, b)
    }

    fn unary(&mut self, kind: Unary, name: &'static str, x: Var) -> Result<Var> {
        let f: fn(f64) -> f64 = match kind {
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Abs => f64::abs,
            Unary::Gelu => |v| 0.5 * v * (1.0 + gelu_tanh(v)),
        };
        let src = self.value(x);
        let out = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&v| f(v)).collect())?;
        let rg = self.rg(x);
        self.push_checked(name, out, Op::Unary { kind, x }, rg)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, "exp", x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, "log", x)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Abs, "abs", x)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Gelu, "gelu", x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let src = self.value(x);
        let out = Tensor::new(src.shape().to_vec(), src.data().iter().map(|v| v * c).collect())?;
        let rg = self.rg(x);
        self.push_checked("scale", out, Op::Scale { x, c }, rg)
    }

    /// Matrix product over the last two axes.
    ///
    /// `a: [..., M, K]` times either a shared `b: [K, N]` or a batched
    /// `b: [..., K, N]` with identical leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(mismatch());
        }
        let lead = &sa[..sa.len() - 2];
        let batch: usize = lead.iter().product();
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && sb[..sb.len() - 2] != *lead {
            return Err(mismatch());
        }
        let mut out_shape = lead.to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![0.0; batch * m * n];
        let da = self.value(a).data();
        let db = self.value(b).data();
        let ki = k as isize;
        let ni = n as isize;
        if shared_rhs {
            gemm(batch * m, k, n, da, (ki, 1), db, (ni, 1), 0.0, &mut out);
        } else {
            for g in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &da[g * m * k..],
                    (ki, 1),
                    &db[g * k * n..],
                    (ni, 1),
                    0.0,
                    &mut out[g * m * n..(g + 1) * m * n],
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        self.push_checked(
            "matmul",
            Tensor::new(out_shape, out)?,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            },
            rg,
        )
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() {
            return Err(TensorError::ShapeMismatch {
                op: "permute",
                lhs: shape,
                rhs: axes.to_vec(),
            });
        }
        for &a in axes {
            if a >= shape.len() || seen[a] {
                return Err(TensorError::AxisOutOfRange {
                    op: "permute",
                    axis: a,
                    rank: shape.len(),
                });
            }
            seen[a] = true;
        }
        let (out_shape, data) = permute_data(self.value(x).data(), &shape, axes);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(TensorError::AxisOutOfRange {
                op: "transpose",
                axis: 1,
                rank: r,
            });
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(x);
        if shape.iter().product::<usize>() != src.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: src.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = src.reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape { x }, rg))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        self.check_axis("concat", *first, axis)?;
        let base = self.shape(*first).to_vec();
        let mut total_axis = 0;
        for &v in xs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total_axis += s[axis];
        }
        let (outer, _, inner) = lanes(&base, axis);
        let mut out_shape = base.clone();
        out_shape[axis] = total_axis;
        let mut data = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.check_axis("narrow", x, axis)?;
        let shape = self.shape(x).to_vec();
        if start + len > shape[axis] {
            return Err(TensorError::IndexOutOfRange {
                op: "narrow",
                index: start + len,
                extent: shape[axis],
            });
        }
        let (outer, full, inner) = lanes(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = o * full * inner + start * inner;
            data.extend_from_slice(&src[off..off + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::Narrow { x, axis, start },
            rg,
        ))
    }

    /// Selects slices along axis 0. Indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(TensorError::AxisOutOfRange {
                op: "gather_rows",
                axis: 0,
                rank: 0,
            });
        }
        let rows = shape[0];
        let width: usize = shape[1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    extent: rows,
                });
            }
            data.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        let mut out_shape = shape;
        out_shape[0] = idx.len();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Embedding lookup: rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// Adjoint of [`Graph::gather_rows`]: writes row `j` of `x` into row
    /// `idx[j]` of a zero tensor with `rows` rows, summing duplicates.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || shape[0] != idx.len() {
            return Err(TensorError::ShapeMismatch {
                op: "scatter_rows",
                lhs: shape,
                rhs: vec![idx.len()],
            });
        }
        let width: usize = shape[1..].iter().product();
        let src = self.value(x).data();
        let mut data = vec![0.0; rows * width];
        for (j, &i) in idx.iter().enumerate() {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange {
                    op: "scatter_rows",
                    index: i,
                    extent: rows,
                });
            }
            for (d, s) in data[i * width..(i + 1) * width]
                .iter_mut()
                .zip(&src[j * width..(j + 1) * width])
            {
                *d += s;
            }
        }
        let mut out_shape = shape;
        out_shape[0] = rows;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::ScatterRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    fn reduce_axis(&mut self, name: &'static str, x: Var, axis: usize, mean: bool) -> Result<Var> {
        self.check_axis(name, x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = lanes(&shape, axis);
        let scale = if mean { 1.0 / len as f64 } else { 1.0 };
        let src = self.value(x).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let row = &src[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *d += s;
                }
            }
        }
        if mean {
            data.iter_mut().for_each(|v| *v *= scale);
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(x);
        self.push_checked(
            name,
            Tensor::new(out_shape, data)?,
            Op::SumAxis { x, axis, scale },
            rg,
        )
    }

    /// Sum over `axis`, which is removed from the shape.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis("sum_axis", x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis("mean_axis", x, axis, true)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push_checked("sum", Tensor::scalar(s), Op::SumAll { x, scale: 1.0 }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(TensorError::Invalid("mean of an empty tensor".into()));
        }
        let scale = 1.0 / t.numel() as f64;
        let s: f64 = t.data().iter().sum::<f64>() * scale;
        let rg = self.rg(x);
        self.push_checked("mean", Tensor::scalar(s), Op::SumAll { x, scale }, rg)
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, log: bool) -> Result<Var> {
        let name = if log { "log_softmax" } else { "softmax" };
        self.check_axis(name, x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = lanes(&shape, axis);
        let src = self.value(x).data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let max = (0..len).map(|l| src[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for l in 0..len {
                    let e = (src[at(l)] - max).exp();
                    data[at(l)] = e;
                    z += e;
                }
                if log {
                    let lz = z.ln();
                    for l in 0..len {
                        data[at(l)] = src[at(l)] - max - lz;
                    }
                } else {
                    for l in 0..len {
                        data[at(l)] /= z;
                    }
                }
            }
        }
        let rg = self.rg(x);
        let op = if log {
            Op::LogSoftmax { x, axis }
        } else {
            Op::Softmax { x, axis }
        };
        self.push_checked(name, Tensor::new(shape, data)?, op, rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, false)
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, true)
    }

    /// Layer normalization over the last axis with learnable scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or(TensorError::AxisOutOfRange {
            op: "layer_norm",
            axis: 0,
            rank: 0,
        })?;
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(TensorError::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = src.len() / d.max(1);
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(src.len());
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                data.push((row[j] - mu) * rs * g[j] + b[j]);
            }
            mean.push(mu);
            rstd.push(rs);
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push_checked(
            "layer_norm",
            Tensor::new(shape, data)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            rg,
        )
    }

    /// Divides each last-axis row by its L2 norm (floored at 1e-12).
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim().max(1);
        let mut norms = Vec::with_capacity(t.numel() / d);
        let mut data = Vec::with_capacity(t.numel());
        for row in t.data().chunks(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(L2_EPS);
            norms.push(n);
            data.extend(row.iter().map(|v| v / n));
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        self.push_checked(
            "l2_normalize",
            Tensor::new(shape, data)?,
            Op::L2Normalize { x, norms },
            rg,
        )
    }

    /// Elementwise smooth-L1: `0.5 d²/β` for `|d| < β`, else `|d| − β/2`,
    /// where `d = a − b`. Shapes must match exactly.
    pub fn smooth_l1(&mut self, a: Var, b: Var, beta: f64) -> Result<Var> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(TensorError::Invalid(format!(
                "smooth_l1 beta must be positive, got {beta}"
            )));
        }
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op: "smooth_l1",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let da = self.value(a).data();
        let db = self.value(b).data();
        let data = da
            .iter()
            .zip(db)
            .map(|(x, y)| smooth_l1_value(x - y, beta))
            .collect();
        let shape = sa.to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push_checked(
            "smooth_l1",
            Tensor::new(shape, data)?,
            Op::SmoothL1 { a, b, beta },
            rg,
        )
    }

    /// Replays the tape in reverse from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        check_finite("backward", lv.data())?;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut out: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads: out });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                out[i] = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads: out })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Binary { kind, a, b, ia, ib } => {
                let (da, db) = (val(*a), val(*b));
                let n = g.len();
                if rg(*a) {
                    let mut ga = vec![0.0; da.len()];
                    for ((gi, xa), xb) in g.iter().zip(ia.iter(n)).zip(ib.iter(n)) {
                        ga[xa] += match kind {
                            Binary::Add | Binary::Sub => *gi,
                            Binary::Mul => gi * db[xb],
                            Binary::Div => gi / db[xb],
                        };
                    }
                    add_owned(&mut grads[a.0], ga);
                }
                if rg(*b) {
                    let mut gb = vec![0.0; db.len()];
                    for ((gi, xa), xb) in g.iter().zip(ia.iter(n)).zip(ib.iter(n)) {
                        gb[xb] += match kind {
                            Binary::Add => *gi,
                            Binary::Sub => -gi,
                            Binary::Mul => gi * da[xa],
                            Binary::Div => -gi * da[xa] / (db[xb] * db[xb]),
                        };
                    }
                    add_owned(&mut grads[b.0], gb);
                }
            }
            Op::Unary { kind, x } => {
                let xs = val(*x);
                let y = node.value.data();
                let gx: Vec<f64> = match kind {
                    Unary::Exp => g.iter().zip(y).map(|(g, y)| g * y).collect(),
                    Unary::Log => g.iter().zip(xs).map(|(g, x)| g / x).collect(),
                    Unary::Abs => g
                        .iter()
                        .zip(xs)
                        .map(|(g, x)| {
                            if *x > 0.0 {
                                *g
                            } else if *x < 0.0 {
                                -g
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                    Unary::Gelu => g
                        .iter()
                        .zip(xs)
                        .map(|(g, &x)| {
                            let t = gelu_tanh(x);
                            let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                            g * (0.5 * (1.0 + t) + 0.5 * x * dt)
                        })
                        .collect(),
                };
                add_owned(&mut grads[x.0], gx);
            }
            Op::Scale { x, c } => {
                add_owned(&mut grads[x.0], g.iter().map(|v| v * c).collect());
            }
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                shared_rhs,
            } => {
                let (batch, m, k, n) = (*batch, *m, *k, *n);
                let (da, db) = (val(*a), val(*b));
                let (ki, ni) = (k as isize, n as isize);
                if rg(*a) {
                    // dA = dC · Bᵀ
                    let ga = grads[a.0].get_or_insert_with(|| vec![0.0; batch * m * k]);
                    if *shared_rhs {
                        gemm(batch * m, n, k, g, (ni, 1), db, (1, ni), 1.0, ga);
                    } else {
                        for bi in 0..batch {
                            gemm(
                                m,
                                n,
                                k,
                                &g[bi * m * n..],
                                (ni, 1),
                                &db[bi * k * n..],
                                (1, ni),
                                1.0,
                                &mut ga[bi * m * k..(bi + 1) * m * k],
                            );
                        }
                    }
                }
                if rg(*b) {
                    // dB = Aᵀ · dC
                    if *shared_rhs {
                        let gb = grads[b.0].get_or_insert_with(|| vec![0.0; k * n]);
                        gemm(k, batch * m, n, da, (1, ki), g, (ni, 1), 1.0, gb);
                    } else {
                        let gb = grads[b.0].get_or_insert_with(|| vec![0.0; batch * k * n]);
                        for bi in 0..batch {
                            gemm(
                                k,
                                m,
                                n,
                                &da[bi * m * k..],
                                (1, ki),
                                &g[bi * m * n..],
                                (ni, 1),
                                1.0,
                                &mut gb[bi * k * n..(bi + 1) * k * n],
                            );
                        }
                    }
                }
            }
            Op::Permute { x, axes } => {
                let mut inv = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                let (_, gx) = permute_data(g, node.value.shape(), &inv);
                add_owned(&mut grads[x.0], gx);
            }
            Op::Reshape { x } => add_into(&mut grads[x.0], g),
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = lanes(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let len = self.nodes[v.0].value.shape()[*axis];
                    if rg(v) {
                        let mut gv = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let s = (o * total + offset) * inner;
                            gv.extend_from_slice(&g[s..s + len * inner]);
                        }
                        add_owned(&mut grads[v.0], gv);
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.nodes[x.0].value.shape();
                let (outer, full, inner) = lanes(xs, *axis);
                let len = node.value.shape()[*axis];
                let gx = grads[x.0].get_or_insert_with(|| vec![0.0; outer * full * inner]);
                for o in 0..outer {
                    let dst = o * full * inner + start * inner;
                    let src = o * len * inner;
                    for (d, s) in gx[dst..dst + len * inner]
                        .iter_mut()
                        .zip(&g[src..src + len * inner])
                    {
                        *d += s;
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let xt = &self.nodes[x.0].value;
                let width: usize = xt.shape()[1..].iter().product();
                let gx = grads[x.0].get_or_insert_with(|| vec![0.0; xt.numel()]);
                for (j, &i) in idx.iter().enumerate() {
                    for (d, s) in gx[i * width..(i + 1) * width]
                        .iter_mut()
                        .zip(&g[j * width..(j + 1) * width])
                    {
                        *d += s;
                    }
                }
            }
            Op::ScatterRows { x, idx } => {
                let width: usize = node.value.shape()[1..].iter().product();
                let mut gx = Vec::with_capacity(idx.len() * width);
                for &i in idx {
                    gx.extend_from_slice(&g[i * width..(i + 1) * width]);
                }
                add_owned(&mut grads[x.0], gx);
            }
            Op::SumAxis { x, axis, scale } => {
                let xs = self.nodes[x.0].value.shape();
                let (outer, len, inner) = lanes(xs, *axis);
                let gx = grads[x.0].get_or_insert_with(|| vec![0.0; outer * len * inner]);
                for o in 0..outer {
                    for l in 0..len {
                        let dst = (o * len + l) * inner;
                        for (d, s) in gx[dst..dst + inner]
                            .iter_mut()
                            .zip(&g[o * inner..(o + 1) * inner])
                        {
                            *d += s * scale;
                        }
                    }
                }
            }
            Op::SumAll { x, scale } => {
                let n = self.nodes[x.0].value.numel();
                let gx = grads[x.0].get_or_insert_with(|| vec![0.0; n]);
                let v = g[0] * scale;
                gx.iter_mut().for_each(|d| *d += v);
            }
            Op::Softmax { x, axis } | Op::LogSoftmax { x, axis } => {
                let log = matches!(node.op, Op::LogSoftmax { .. });
                let (outer, len, inner) = lanes(node.value.shape(), *axis);
                let y = node.value.data();
                let gx = grads[x.0].get_or_insert_with(|| vec![0.0; y.len()]);
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        if log {
                            let s: f64 = (0..len).map(|l| g[at(l)]).sum();
                            for l in 0..len {
                                gx[at(l)] += g[at(l)] - y[at(l)].exp() * s;
                            }
                        } else {
                            let s: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                            for l in 0..len {
                                gx[at(l)] += y[at(l)] * (g[at(l)] - s);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xs = val(*x);
                let gm = val(*gamma);
                let d = gm.len();
                let rows = mean.len();
                let mut ggamma = vec![0.0; d];
                let mut gbeta = vec![0.0; d];
                let mut gx = if rg(*x) {
                    Some(vec![0.0; xs.len()])
                } else {
                    None
                };
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for r in 0..rows {
                    let row = &xs[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    for j in 0..d {
                        xhat[j] = (row[j] - mean[r]) * rstd[r];
                        ggamma[j] += gr[j] * xhat[j];
                        gbeta[j] += gr[j];
                        dxhat[j] = gr[j] * gm[j];
                    }
                    if let Some(gx) = gx.as_mut() {
                        let m1 = dxhat.iter().sum::<f64>() / d as f64;
                        let m2 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>()
                            / d as f64;
                        for j in 0..d {
                            gx[r * d + j] = rstd[r] * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                }
                if let Some(gx) = gx {
                    add_owned(&mut grads[x.0], gx);
                }
                if rg(*gamma) {
                    add_owned(&mut grads[gamma.0], ggamma);
                }
                if rg(*beta) {
                    add_owned(&mut grads[beta.0], gbeta);
                }
            }
            Op::L2Normalize { x, norms } => {
                let y = node.value.data();
                let xs = val(*x);
                let d = y.len() / norms.len().max(1);
                let mut gx = vec![0.0; y.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let s = r * d..(r + 1) * d;
                    let (yr, gr) = (&y[s.clone()], &g[s.clone()]);
                    let raw = xs[s.clone()].iter().map(|v| v * v).sum::<f64>().sqrt();
                    if raw > L2_EPS {
                        let p: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            gx[r * d + j] = (gr[j] - yr[j] * p) / n;
                        }
                    } else {
                        for j in 0..d {
                            gx[r * d + j] = gr[j] / n;
                        }
                    }
                }
                add_owned(&mut grads[x.0], gx);
            }
            Op::SmoothL1 { a, b, beta } => {
                let (da, db) = (val(*a), val(*b));
                let dd: Vec<f64> = g
                    .iter()
                    .zip(da.iter().zip(db))
                    .map(|(g, (x, y))| g * smooth_l1_slope(x - y, *beta))
                    .collect();
                if rg(*b) {
                    add_owned(&mut grads[b.0], dd.iter().map(|v| -v).collect());
                }
                if rg(*a) {
                    add_owned(&mut grads[a.0], dd);
                }
            }
        }
    }
}

/// Scalar smooth-L1 of a difference `d`.
pub(crate) fn smooth_l1_value(d: f64, beta: f64) -> f64 {
    let ad = d.abs();
    if ad < beta {
        0.5 * d * d / beta
    } else {
        ad - 0.5 * beta
    }
}

fn smooth_l1_slope(d: f64, beta: f64) -> f64 {
    if d.abs() < beta {
        d / beta
    } else {
        d.signum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_slice(&[0.0, 0.0]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_slice(&[3.0, 4.0]));
        let y = g.l2_normalize(x).unwrap();
        assert!(close(g.value(y).data(), &[0.6, 0.8], 1e-15));
    }

    #[test]
    fn gather_picks_rows() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_slice(&[10.0, 20.0, 30.0]));
        let y = g.gather_rows(x, &[2, 0]).unwrap();
        assert_eq!(g.value(y).data(), &[30.0, 10.0]);
        assert!(matches!(
            g.gather_rows(x, &[3]),
            Err(TensorError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn square_sum_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_slice(&[1.0, 2.0, 3.0]));
        let sq = g.mul(x, x).unwrap();
        let l = g.sum(sq).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_slice(&[1.0, -2.0]));
        let y = g.param(Tensor::from_slice(&[0.5, 4.0]));
        let sx = g.stop_gradient(x);
        assert!(g.value(sx).bitwise_eq(g.value(x)));
        let p = g.mul(sx, y).unwrap();
        let l = g.sum(p).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.get(x).is_none());
        assert_eq!(grads.get_or_zeros(x, &[2]).data(), &[0.0, 0.0]);
        assert_eq!(grads.get(y).unwrap().data(), &[1.0, -2.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let a = g.scale(x, 2.0).unwrap();
        let b = g.add(a, x).unwrap();
        let grads = g.backward(b).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[3.0]);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([4, 5]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![4, 5]
            }
        );
        assert!(err.to_string().contains("[2, 3]") && err.to_string().contains("[4, 5]"));
        let e = g.add(a, b).unwrap_err();
        assert!(matches!(e, TensorError::ShapeMismatch { op: "add", .. }));
        assert!(matches!(
            g.softmax(a, 2),
            Err(TensorError::AxisOutOfRange { axis: 2, rank: 2, .. })
        ));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_slice(&[-1.0]));
        assert_eq!(g.log(x).unwrap_err(), TensorError::NonFinite { op: "log" });
        let z = g.constant(Tensor::from_slice(&[0.0]));
        assert!(g.div(x, z).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_slice(&[1.0, 2.0]));
        assert!(matches!(
            g.backward(x),
            Err(TensorError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn broadcast_general_map() {
        let mut g = Graph::new();
        let a = g.param(Tensor::new([2, 1, 3], (0..6).map(f64::from).collect()).unwrap());
        let b = g.param(Tensor::new([2, 2, 3], vec![1.0; 12]).unwrap());
        let c = g.add(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 2, 3]);
        assert_eq!(
            g.value(c).data(),
            &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 4.0, 5.0, 6.0]
        );
        let s = g.sum(c).unwrap();
        let gr = g.backward(s).unwrap();
        assert_eq!(gr.get(a).unwrap().data(), &[2.0; 6]);
        assert_eq!(gr.get(b).unwrap().data(), &[1.0; 12]);
    }

    #[test]
    fn permute_round_trip() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([2, 3, 4], (0..24).map(f64::from).collect()).unwrap());
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        // out[i][j][k] = x[j][k][i]
        assert_eq!(g.value(p).data()[1 * 6 + 1 * 3 + 2], (1 * 12 + 2 * 4 + 1) as f64);
        let q = g.permute(p, &[1, 2, 0]).unwrap();
        assert!(g.value(q).bitwise_eq(g.value(x)));
    }

    #[test]
    fn scatter_sums_duplicates() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new([3, 1], vec![1.0, 2.0, 4.0]).unwrap());
        let y = g.scatter_rows(x, &[1, 1, 0], 3).unwrap();
        assert_eq!(g.value(y).data(), &[4.0, 3.0, 0.0]);
    }

    #[test]
    fn smooth_l1_branches() {
        assert_eq!(smooth_l1_value(1.0, 2.0), 0.25);
        assert_eq!(smooth_l1_value(-3.0, 2.0), 2.0);
        assert_eq!(smooth_l1_value(2.0, 2.0), 1.0);
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros([1]));
        assert!(g.smooth_l1(a, a, 0.0).is_err());
    }
}
