//! Dense row-major f64 tensors and the forward kernels shared by the
//! recorded (differentiable) and plain execution paths.
//!
//! Broadcasting is deliberately restricted: `add`/`mul` accept a right operand
//! whose shape equals a suffix of the left's, and `matmul` broadcasts leading
//! batch axes by the same suffix rule. Anything else is a shape error.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

/// Dense tensor of 64-bit reals, row-major, rank <= 4.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::Shape { op, detail }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(shape_err(
                "new",
                format!("shape {:?} wants {} elements, got {}", shape, numel(&shape), data.len()),
            ));
        }
        if shape.len() > 4 {
            return Err(shape_err("new", format!("rank {} > 4", shape.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; numel(shape)] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; numel(shape)] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |v| v.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(shape_err("from_rows", "ragged rows".into()));
            }
            data.extend_from_slice(row);
        }
        Tensor::new(vec![r, c], data)
    }

    /// Zero-mean normal init with the given deviation, consuming the rng in
    /// row-major element order.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * std
            })
            .collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, (&ix, &dim)) in idx.iter().zip(&self.shape).enumerate() {
            debug_assert!(ix < dim, "index {ix} out of bounds for axis {i} (dim {dim})");
            off = off * dim + ix;
        }
        off
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, c: f64) {
        for a in self.data.iter_mut() {
            *a *= c;
        }
    }
}

/// Axis decomposition used by the reduction/softmax/normalization kernels:
/// element (o, i, j) of a tensor viewed as outer x axis x inner.
pub(crate) struct Lanes {
    pub outer: usize,
    pub len: usize,
    pub inner: usize,
}

pub(crate) fn lanes(shape: &[usize], axis: usize) -> Lanes {
    Lanes {
        outer: shape[..axis].iter().product(),
        len: shape[axis],
        inner: shape[axis + 1..].iter().product(),
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(shape_err(op, format!("axis {} out of range for shape {:?}", axis, shape)));
    }
    Ok(())
}

/// Right operand broadcasts if its shape equals a suffix of the left's.
fn suffix_broadcast(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<usize> {
    if rhs.len() > lhs.len() || lhs[lhs.len() - rhs.len()..] != *rhs {
        return Err(shape_err(
            op,
            format!("{:?} vs {:?}: right operand must match a suffix of the left", lhs, rhs),
        ));
    }
    Ok(numel(rhs).max(1))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let period = suffix_broadcast("add", &a.shape, &b.shape)?;
    let mut out = a.clone();
    for (chunk, _) in out.data.chunks_mut(period).zip(0..) {
        for (x, y) in chunk.iter_mut().zip(&b.data) {
            *x += y;
        }
    }
    Ok(out)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let period = suffix_broadcast("sub", &a.shape, &b.shape)?;
    let mut out = a.clone();
    for chunk in out.data.chunks_mut(period) {
        for (x, y) in chunk.iter_mut().zip(&b.data) {
            *x -= y;
        }
    }
    Ok(out)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let period = suffix_broadcast("mul", &a.shape, &b.shape)?;
    let mut out = a.clone();
    for chunk in out.data.chunks_mut(period) {
        for (x, y) in chunk.iter_mut().zip(&b.data) {
            *x *= y;
        }
    }
    Ok(out)
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    a.map(|v| v * c)
}

/// Sum-reduce a gradient of `lhs` shape back onto the broadcast `rhs` shape.
pub(crate) fn reduce_to_suffix(grad: &Tensor, rhs_shape: &[usize]) -> Tensor {
    let period = numel(rhs_shape).max(1);
    let mut out = Tensor::zeros(rhs_shape);
    for chunk in grad.data.chunks(period) {
        for (o, g) in out.data.iter_mut().zip(chunk) {
            *o += g;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// matmul

struct MatmulPlan {
    batch_out: Vec<usize>,
    batch_a: usize,
    batch_b: usize,
    m: usize,
    k: usize,
    n: usize,
}

fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(shape_err("matmul", format!("operands must be rank >= 2, got {:?} x {:?}", a, b)));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(shape_err("matmul", format!("inner dims differ: {:?} x {:?}", a, b)));
    }
    let ba = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let (long, short) = if ba.len() >= bb.len() { (ba, bb) } else { (bb, ba) };
    if long[long.len() - short.len()..] != *short {
        return Err(shape_err(
            "matmul",
            format!("batch axes of {:?} and {:?} do not suffix-broadcast", a, b),
        ));
    }
    Ok(MatmulPlan {
        batch_out: long.to_vec(),
        batch_a: numel(ba).max(1),
        batch_b: numel(bb).max(1),
        m,
        k,
        n,
    })
}

/// dgemm wrapper: C[m,n] += or = alpha * A * B with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
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

/// Batched matrix product with suffix-broadcast leading axes.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let plan = matmul_plan(&a.shape, &b.shape)?;
    let MatmulPlan { batch_out, batch_a, batch_b, m, k, n } = plan;
    let batch = numel(&batch_out).max(1);
    let mut out_shape = batch_out;
    out_shape.push(m);
    out_shape.push(n);
    let mut out = vec![0.0; batch * m * n];

    if batch_b == 1 && batch_a == batch {
        // Shared right operand: fold the batch into the row dimension.
        dgemm(batch * m, k, n, 1.0, &a.data, k as isize, 1, &b.data, n as isize, 1, 0.0, &mut out);
    } else {
        for i in 0..batch {
            let pa = (i % batch_a) * m * k;
            let pb = (i % batch_b) * k * n;
            dgemm(
                m,
                k,
                n,
                1.0,
                &a.data[pa..pa + m * k],
                k as isize,
                1,
                &b.data[pb..pb + k * n],
                n as isize,
                1,
                0.0,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
    }
    Tensor::new(out_shape, out)
}

/// Gradient helpers for matmul; `grad` has the output shape of `matmul(a, b)`.
pub(crate) fn matmul_grad_a(grad: &Tensor, a: &Tensor, b: &Tensor) -> Tensor {
    // dA = dC . B^T, batch-broadcast aware.
    let plan = matmul_plan(&a.shape, &b.shape).expect("checked at forward");
    let MatmulPlan { batch_out, batch_a, batch_b, m, k, n } = plan;
    let batch = numel(&batch_out).max(1);
    let mut out = vec![0.0; a.data.len()];
    if batch_a == batch {
        if batch_b == 1 {
            // dA_fold = dC_fold . B^T
            dgemm(batch * m, n, k, 1.0, &grad.data, n as isize, 1, &b.data, 1, n as isize, 0.0, &mut out);
        } else {
            for i in 0..batch {
                let pb = (i % batch_b) * k * n;
                dgemm(
                    m,
                    n,
                    k,
                    1.0,
                    &grad.data[i * m * n..(i + 1) * m * n],
                    n as isize,
                    1,
                    &b.data[pb..pb + k * n],
                    1,
                    n as isize,
                    0.0,
                    &mut out[i * m * k..(i + 1) * m * k],
                );
            }
        }
    } else {
        // a is broadcast across the batch: accumulate contributions in batch order.
        let mut tmp = vec![0.0; m * k];
        for i in 0..batch {
            let pa = (i % batch_a) * m * k;
            let pb = (i % batch_b) * k * n;
            dgemm(
                m,
                n,
                k,
                1.0,
                &grad.data[i * m * n..(i + 1) * m * n],
                n as isize,
                1,
                &b.data[pb..pb + k * n],
                1,
                n as isize,
                0.0,
                &mut tmp,
            );
            for (o, t) in out[pa..pa + m * k].iter_mut().zip(&tmp) {
                *o += t;
            }
        }
    }
    Tensor { shape: a.shape.clone(), data: out }
}

pub(crate) fn matmul_grad_b(grad: &Tensor, a: &Tensor, b: &Tensor) -> Tensor {
    // dB = A^T . dC, batch-broadcast aware.
    let plan = matmul_plan(&a.shape, &b.shape).expect("checked at forward");
    let MatmulPlan { batch_out, batch_a, batch_b, m, k, n } = plan;
    let batch = numel(&batch_out).max(1);
    let mut out = vec![0.0; b.data.len()];
    if batch_b == 1 && batch_a == batch {
        // dB = A_fold^T . dC_fold — the fold performs the batch sum.
        dgemm(k, batch * m, n, 1.0, &a.data, 1, k as isize, &grad.data, n as isize, 1, 0.0, &mut out);
    } else if batch_b == batch {
        for i in 0..batch {
            let pa = (i % batch_a) * m * k;
            dgemm(
                k,
                m,
                n,
                1.0,
                &a.data[pa..pa + m * k],
                1,
                k as isize,
                &grad.data[i * m * n..(i + 1) * m * n],
                n as isize,
                1,
                0.0,
                &mut out[i * k * n..(i + 1) * k * n],
            );
        }
    } else {
        let mut tmp = vec![0.0; k * n];
        for i in 0..batch {
            let pa = (i % batch_a) * m * k;
            let pb = (i % batch_b) * k * n;
            dgemm(
                k,
                m,
                n,
                1.0,
                &a.data[pa..pa + m * k],
                1,
                k as isize,
                &grad.data[i * m * n..(i + 1) * m * n],
                n as isize,
                1,
                0.0,
                &mut tmp,
            );
            for (o, t) in out[pb..pb + k * n].iter_mut().zip(&tmp) {
                *o += t;
            }
        }
    }
    Tensor { shape: b.shape.clone(), data: out }
}

// ---------------------------------------------------------------------------
// structural ops

pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| shape_err("concat", "no operands".into()))?;
    check_axis("concat", &first.shape, axis)?;
    let mut axis_total = 0;
    for p in parts {
        if p.rank() != first.rank()
            || p.shape[..axis] != first.shape[..axis]
            || p.shape[axis + 1..] != first.shape[axis + 1..]
        {
            return Err(shape_err(
                "concat",
                format!("incompatible shapes {:?} vs {:?} along axis {}", first.shape, p.shape, axis),
            ));
        }
        axis_total += p.shape[axis];
    }
    let mut shape = first.shape.clone();
    shape[axis] = axis_total;
    let outer: usize = first.shape[..axis].iter().product();
    let inner: usize = first.shape[axis + 1..].iter().product();
    let mut data = Vec::with_capacity(numel(&shape));
    for o in 0..outer {
        for p in parts {
            let block = p.shape[axis] * inner;
            data.extend_from_slice(&p.data[o * block..(o + 1) * block]);
        }
    }
    Tensor::new(shape, data)
}

pub fn slice(t: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    check_axis("slice", &t.shape, axis)?;
    if start + len > t.shape[axis] {
        return Err(shape_err(
            "slice",
            format!("range {}..{} out of bounds for axis {} of {:?}", start, start + len, axis, t.shape),
        ));
    }
    let l = lanes(&t.shape, axis);
    let mut shape = t.shape.clone();
    shape[axis] = len;
    let mut data = Vec::with_capacity(l.outer * len * l.inner);
    for o in 0..l.outer {
        let base = (o * l.len + start) * l.inner;
        data.extend_from_slice(&t.data[base..base + len * l.inner]);
    }
    Tensor::new(shape, data)
}

/// Scatter `grad` (shape of the slice) back into a zero tensor of `in_shape`.
pub(crate) fn slice_grad(grad: &Tensor, in_shape: &[usize], axis: usize, start: usize) -> Tensor {
    let l = lanes(in_shape, axis);
    let len = grad.shape[axis];
    let mut out = Tensor::zeros(in_shape);
    for o in 0..l.outer {
        let dst = (o * l.len + start) * l.inner;
        let src = o * len * l.inner;
        out.data[dst..dst + len * l.inner].copy_from_slice(&grad.data[src..src + len * l.inner]);
    }
    out
}

pub fn transpose(t: &Tensor, ax0: usize, ax1: usize) -> Result<Tensor> {
    check_axis("transpose", &t.shape, ax0)?;
    check_axis("transpose", &t.shape, ax1)?;
    if ax0 == ax1 {
        return Ok(t.clone());
    }
    let (a, b) = (ax0.min(ax1), ax0.max(ax1));
    let mut shape = t.shape.clone();
    shape.swap(a, b);
    let in_strides = strides(&t.shape);
    let out_shape = shape.clone();
    let mut data = vec![0.0; t.data.len()];
    // Iterate output row-major, reading from the permuted input offset.
    let mut idx = vec![0usize; out_shape.len()];
    for slot in data.iter_mut() {
        let mut src = 0;
        for (d, &ix) in idx.iter().enumerate() {
            let src_axis = if d == a { b } else if d == b { a } else { d };
            src += ix * in_strides[src_axis];
        }
        *slot = t.data[src];
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(shape, data)
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub fn embedding_lookup(table: &Tensor, indices: &[usize]) -> Result<Tensor> {
    if table.rank() != 2 {
        return Err(shape_err("embedding_lookup", format!("table must be rank 2, got {:?}", table.shape)));
    }
    let (rows, dim) = (table.shape[0], table.shape[1]);
    let mut data = Vec::with_capacity(indices.len() * dim);
    for &ix in indices {
        if ix >= rows {
            return Err(shape_err("embedding_lookup", format!("index {} out of {} rows", ix, rows)));
        }
        data.extend_from_slice(&table.data[ix * dim..(ix + 1) * dim]);
    }
    Tensor::new(vec![indices.len(), dim], data)
}

pub(crate) fn embedding_grad(grad: &Tensor, table_shape: &[usize], indices: &[usize]) -> Tensor {
    let dim = table_shape[1];
    let mut out = Tensor::zeros(table_shape);
    for (i, &ix) in indices.iter().enumerate() {
        let dst = &mut out.data[ix * dim..(ix + 1) * dim];
        for (o, g) in dst.iter_mut().zip(&grad.data[i * dim..(i + 1) * dim]) {
            *o += g;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// reductions

pub fn sum_axis(t: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis("sum", &t.shape, axis)?;
    let l = lanes(&t.shape, axis);
    let mut shape = t.shape.clone();
    shape.remove(axis);
    let mut data = vec![0.0; l.outer * l.inner];
    for o in 0..l.outer {
        for i in 0..l.len {
            let base = (o * l.len + i) * l.inner;
            let dst = &mut data[o * l.inner..(o + 1) * l.inner];
            for (d, v) in dst.iter_mut().zip(&t.data[base..base + l.inner]) {
                *d += v;
            }
        }
    }
    Tensor::new(shape, data)
}

pub fn mean_axis(t: &Tensor, axis: usize) -> Result<Tensor> {
    let mut out = sum_axis(t, axis)?;
    out.scale_assign(1.0 / t.shape[axis] as f64);
    Ok(out)
}

/// Broadcast a reduced-axis gradient back to the input shape (used by the
/// sum/mean backward passes).
pub(crate) fn unreduce_axis(grad: &Tensor, in_shape: &[usize], axis: usize, scale: f64) -> Tensor {
    let l = lanes(in_shape, axis);
    let mut out = Tensor::zeros(in_shape);
    for o in 0..l.outer {
        for i in 0..l.len {
            let base = (o * l.len + i) * l.inner;
            let src = &grad.data[o * l.inner..(o + 1) * l.inner];
            for (d, g) in out.data[base..base + l.inner].iter_mut().zip(src) {
                *d = g * scale;
            }
        }
    }
    out
}

pub fn sum_all(t: &Tensor) -> Tensor {
    Tensor::scalar(t.data.iter().sum())
}

pub fn mean_all(t: &Tensor) -> Tensor {
    Tensor::scalar(t.data.iter().sum::<f64>() / t.data.len() as f64)
}

// ---------------------------------------------------------------------------
// nonlinearities

pub fn softmax(t: &Tensor, axis: usize) -> Result<Tensor> {
    check_axis("softmax", &t.shape, axis)?;
    let l = lanes(&t.shape, axis);
    let mut out = t.clone();
    for o in 0..l.outer {
        for j in 0..l.inner {
            let base = o * l.len * l.inner + j;
            let mut max = f64::NEG_INFINITY;
            for i in 0..l.len {
                max = max.max(out.data[base + i * l.inner]);
            }
            if max == f64::NEG_INFINITY {
                return Err(shape_err("softmax", "all entries -inf along the reduced axis".into()));
            }
            let mut sum = 0.0;
            for i in 0..l.len {
                let e = (out.data[base + i * l.inner] - max).exp();
                out.data[base + i * l.inner] = e;
                sum += e;
            }
            let inv = 1.0 / sum;
            for i in 0..l.len {
                out.data[base + i * l.inner] *= inv;
            }
        }
    }
    Ok(out)
}

/// VJP of softmax given its output `y`: dx = (dy - sum(dy * y)) * y along axis.
pub(crate) fn softmax_grad(grad: &Tensor, y: &Tensor, axis: usize) -> Tensor {
    let l = lanes(&y.shape, axis);
    let mut out = grad.clone();
    for o in 0..l.outer {
        for j in 0..l.inner {
            let base = o * l.len * l.inner + j;
            let mut dot = 0.0;
            for i in 0..l.len {
                dot += grad.data[base + i * l.inner] * y.data[base + i * l.inner];
            }
            for i in 0..l.len {
                let p = base + i * l.inner;
                out.data[p] = (grad.data[p] - dot) * y.data[p];
            }
        }
    }
    out
}

pub fn leaky_relu(t: &Tensor, slope: f64) -> Tensor {
    t.map(|v| if v >= 0.0 { v } else { slope * v })
}

pub(crate) fn leaky_relu_grad(grad: &Tensor, x: &Tensor, slope: f64) -> Tensor {
    let mut out = grad.clone();
    for (g, &v) in out.data.iter_mut().zip(&x.data) {
        if v < 0.0 {
            *g *= slope;
        }
    }
    out
}

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_A: f64 = 0.044_715;

/// Tanh-form gelu. Returns (value, tanh-term) so the backward pass can reuse
/// the transcendental.
pub(crate) fn gelu_with_aux(t: &Tensor) -> (Tensor, Tensor) {
    let mut val = t.clone();
    let mut aux = t.clone();
    for (v, a) in val.data.iter_mut().zip(aux.data.iter_mut()) {
        let x = *v;
        let u = GELU_C * (x + GELU_A * x * x * x);
        let th = u.tanh();
        *a = th;
        *v = 0.5 * x * (1.0 + th);
    }
    (val, aux)
}

pub fn gelu(t: &Tensor) -> Tensor {
    gelu_with_aux(t).0
}

pub(crate) fn gelu_grad(grad: &Tensor, x: &Tensor, tanh_term: &Tensor) -> Tensor {
    let mut out = grad.clone();
    for ((g, &xv), &th) in out.data.iter_mut().zip(&x.data).zip(&tanh_term.data) {
        let du = GELU_C * (1.0 + 3.0 * GELU_A * xv * xv);
        let d = 0.5 * (1.0 + th) + 0.5 * xv * (1.0 - th * th) * du;
        *g *= d;
    }
    out
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Layer normalization along `axis` with affine gain/bias of length
/// `shape[axis]`. Returns (output, xhat, inv_std) — the latter two feed the
/// backward pass.
pub fn layer_norm_with_aux(
    t: &Tensor,
    axis: usize,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<(Tensor, Tensor, Tensor)> {
    check_axis("layer_norm", &t.shape, axis)?;
    let l = lanes(&t.shape, axis);
    if gain.len() != l.len || bias.len() != l.len {
        return Err(shape_err(
            "layer_norm",
            format!("gain/bias length {}/{} != axis dim {}", gain.len(), bias.len(), l.len),
        ));
    }
    let mut out = t.clone();
    let mut xhat = t.clone();
    let mut inv_std = Tensor::zeros(&[l.outer * l.inner]);
    let nf = l.len as f64;
    for o in 0..l.outer {
        for j in 0..l.inner {
            let base = o * l.len * l.inner + j;
            let mut mean = 0.0;
            for i in 0..l.len {
                mean += t.data[base + i * l.inner];
            }
            mean /= nf;
            let mut var = 0.0;
            for i in 0..l.len {
                let d = t.data[base + i * l.inner] - mean;
                var += d * d;
            }
            var /= nf;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std.data[o * l.inner + j] = istd;
            for i in 0..l.len {
                let p = base + i * l.inner;
                let xh = (t.data[p] - mean) * istd;
                xhat.data[p] = xh;
                out.data[p] = xh * gain.data[i] + bias.data[i];
            }
        }
    }
    Ok((out, xhat, inv_std))
}

pub fn layer_norm(t: &Tensor, axis: usize, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(layer_norm_with_aux(t, axis, gain, bias, eps)?.0)
}

/// VJP of layer_norm. Returns (dx, dgain, dbias).
pub(crate) fn layer_norm_grad(
    grad: &Tensor,
    xhat: &Tensor,
    inv_std: &Tensor,
    gain: &Tensor,
    axis: usize,
) -> (Tensor, Tensor, Tensor) {
    let l = lanes(&xhat.shape, axis);
    let nf = l.len as f64;
    let mut dx = Tensor::zeros(xhat.shape());
    let mut dgain = Tensor::zeros(&[l.len]);
    let mut dbias = Tensor::zeros(&[l.len]);
    for o in 0..l.outer {
        for j in 0..l.inner {
            let base = o * l.len * l.inner + j;
            let istd = inv_std.data[o * l.inner + j];
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for i in 0..l.len {
                let p = base + i * l.inner;
                let gy = grad.data[p] * gain.data[i];
                sum_g += gy;
                sum_gx += gy * xhat.data[p];
                dgain.data[i] += grad.data[p] * xhat.data[p];
                dbias.data[i] += grad.data[p];
            }
            for i in 0..l.len {
                let p = base + i * l.inner;
                let gy = grad.data[p] * gain.data[i];
                dx.data[p] = istd * (gy - (sum_g + xhat.data[p] * sum_gx) / nf);
            }
        }
    }
    (dx, dgain, dbias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn matmul_identity() {
        let a = Tensor::new(vec![3, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]).unwrap();
        let eye = Tensor::new(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(matmul(&a, &eye).unwrap(), a);
    }

    #[test]
    fn matmul_batched_matches_loop() {
        let a = Tensor::new(vec![2, 2, 3], (0..12).map(|v| v as f64).collect()).unwrap();
        let b = Tensor::new(vec![2, 3, 2], (0..12).map(|v| (v as f64) * 0.5).collect()).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 2, 2]);
        for batch in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    let mut s = 0.0;
                    for k in 0..3 {
                        s += a.at(&[batch, i, k]) * b.at(&[batch, k, j]);
                    }
                    assert_relative_eq!(c.at(&[batch, i, j]), s, max_relative = 1e-14);
                }
            }
        }
    }

    #[test]
    fn matmul_leading_broadcast_shared_rhs() {
        let a = Tensor::new(vec![2, 2, 2], vec![1., 2., 3., 4., 5., 6., 7., 8.]).unwrap();
        let w = Tensor::new(vec![2, 2], vec![1., 0., 0., 2.]).unwrap();
        let c = matmul(&a, &w).unwrap();
        assert_eq!(c.shape(), &[2, 2, 2]);
        assert_eq!(c.data(), &[1., 4., 3., 8., 5., 12., 7., 16.]);
    }

    #[test]
    fn matmul_broadcast_lhs() {
        // Unbatched left against batched right.
        let ones = Tensor::full(&[3, 1], 1.0);
        let v = Tensor::new(vec![2, 1, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let c = matmul(&ones, &v).unwrap();
        assert_eq!(c.shape(), &[2, 3, 3]);
        assert_eq!(c.at(&[1, 2, 0]), 4.0);
    }

    #[test]
    fn matmul_shape_error_reports_both() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn add_suffix_broadcast() {
        let a = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::new(vec![3], vec![10., 20., 30.]).unwrap();
        assert_eq!(add(&a, &b).unwrap().data(), &[11., 22., 33., 14., 25., 36.]);
        assert!(add(&a, &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn softmax_constant_row_is_uniform() {
        let t = Tensor::new(vec![3], vec![4.2, 4.2, 4.2]).unwrap();
        let s = softmax(&t, 0).unwrap();
        for &v in s.data() {
            assert_relative_eq!(v, 1.0 / 3.0, max_relative = 1e-15);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_with_mask() {
        let t = Tensor::new(vec![2, 3], vec![1.0, f64::NEG_INFINITY, 2.0, 0.5, 0.1, f64::NEG_INFINITY])
            .unwrap();
        let s = softmax(&t, 1).unwrap();
        for r in 0..2 {
            let sum: f64 = (0..3).map(|c| s.at(&[r, c])).sum();
            assert_relative_eq!(sum, 1.0, epsilon = 1e-12);
        }
        assert_eq!(s.at(&[0, 1]), 0.0);
        assert_eq!(s.at(&[1, 2]), 0.0);
    }

    #[test]
    fn layer_norm_two_point_row() {
        // mean 2, population std 1 -> [-1, 1] up to the eps term.
        let t = Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap();
        let gain = Tensor::full(&[2], 1.0);
        let bias = Tensor::zeros(&[2]);
        let out = layer_norm(&t, 1, &gain, &bias, LAYER_NORM_EPS).unwrap();
        assert_relative_eq!(out.at(&[0, 0]), -1.0, epsilon = 1e-5);
        assert_relative_eq!(out.at(&[0, 1]), 1.0, epsilon = 1e-5);
    }

    #[test]
    fn concat_slice_round_trip() {
        let a = Tensor::new(vec![2, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::new(vec![2, 3], vec![5., 6., 7., 8., 9., 10.]).unwrap();
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(slice(&c, 1, 0, 2).unwrap(), a);
        assert_eq!(slice(&c, 1, 2, 3).unwrap(), b);
    }

    #[test]
    fn transpose_round_trip() {
        let t = Tensor::new(vec![2, 3, 4], (0..24).map(|v| v as f64).collect()).unwrap();
        let tt = transpose(&t, 0, 2).unwrap();
        assert_eq!(tt.shape(), &[4, 3, 2]);
        assert_eq!(tt.at(&[3, 1, 0]), t.at(&[0, 1, 3]));
        assert_eq!(transpose(&tt, 0, 2).unwrap(), t);
    }

    #[test]
    fn reductions() {
        let t = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(sum_axis(&t, 0).unwrap().data(), &[5., 7., 9.]);
        assert_eq!(sum_axis(&t, 1).unwrap().data(), &[6., 15.]);
        assert_eq!(mean_axis(&t, 1).unwrap().data(), &[2., 5.]);
        assert_eq!(sum_all(&t).item(), 21.0);
        assert_relative_eq!(mean_all(&t).item(), 3.5);
    }

    #[test]
    fn embedding_gathers_rows() {
        let table = Tensor::new(vec![3, 2], vec![0., 1., 10., 11., 20., 21.]).unwrap();
        let out = embedding_lookup(&table, &[2, 0, 2]).unwrap();
        assert_eq!(out.data(), &[20., 21., 0., 1., 20., 21.]);
        let g = embedding_grad(&Tensor::full(&[3, 2], 1.0), &[3, 2], &[2, 0, 2]);
        assert_eq!(g.data(), &[1., 1., 0., 0., 2., 2.]);
    }
}
