//! Dense tensor engine with reverse-mode automatic differentiation.
//!
//! Tensors are immutable once written by their producing op and form a DAG
//! recorded at construction time (define-by-run). [`backprop`] walks that DAG
//! in reverse topological order and accumulates gradients into the leaf
//! tensors created with `requires_grad`.
//!
//! Storage is 32-bit: every op output is rounded through `f32` before it is
//! stored, while reductions (matmul inner products, softmax sums, norm stats)
//! accumulate in 64-bit. The finite-difference harness needs more headroom
//! than 32-bit storage allows, so [`full_precision`] temporarily disables the
//! rounding for the current thread.

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use rand::Rng;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch ({details})")]
    ShapeMismatch { op: &'static str, details: String },
    #[error("{op}: non-finite input value")]
    NonFinite { op: &'static str },
    #[error("backprop requires a scalar loss, got {numel} elements")]
    NonScalarLoss { numel: usize },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("{op}: index out of range ({details})")]
    IndexOutOfRange { op: &'static str, details: String },
    #[error("forward pass is not deterministic: two evaluations differ ({first} vs {second})")]
    NonDeterministicForward { first: f64, second: f64 },
}

pub type Result<T> = std::result::Result<T, TensorError>;

thread_local! {
    static FULL_PRECISION: Cell<bool> = const { Cell::new(false) };
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

/// Run `f` with 32-bit rounding disabled on this thread.
///
/// Used by the gradient checker so central differences see a smooth 64-bit
/// function instead of the 32-bit storage staircase.
pub fn full_precision<R>(f: impl FnOnce() -> R) -> R {
    struct Guard(bool);
    impl Drop for Guard {
        fn drop(&mut self) {
            FULL_PRECISION.with(|p| p.set(self.0));
        }
    }
    let guard = Guard(FULL_PRECISION.with(|p| p.get()));
    FULL_PRECISION.with(|p| p.set(true));
    let out = f();
    drop(guard);
    out
}

#[inline]
fn quantize(x: f64) -> f64 {
    if FULL_PRECISION.with(|p| p.get()) {
        x
    } else {
        x as f32 as f64
    }
}

fn quantize_vec(mut v: Vec<f64>) -> Vec<f64> {
    if !FULL_PRECISION.with(|p| p.get()) {
        for x in v.iter_mut() {
            *x = *x as f32 as f64;
        }
    }
    v
}

fn next_id() -> u64 {
    NEXT_ID.with(|n| {
        let id = n.get();
        n.set(id + 1);
        id
    })
}

/// Backward rule: receives the output gradient and a sink that accumulates
/// per-parent gradient contributions by parent position.
type BackwardFn = Box<dyn Fn(&[f64], &mut dyn FnMut(usize, Vec<f64>))>;

struct OpRecord {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    values: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    needs_grad: bool,
    op: Option<OpRecord>,
}

/// A dense row-major tensor. Cloning is cheap (shared handle).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = self.inner.values.borrow();
        let head: Vec<f64> = v.iter().take(4).copied().collect();
        write!(f, "Tensor{:?} {:?}…", self.inner.shape, head)
    }
}

fn check_finite(op: &'static str, v: &[f64]) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        Err(TensorError::NonFinite { op })
    } else {
        Ok(())
    }
}

impl Tensor {
    fn make(shape: Vec<usize>, values: Vec<f64>, requires_grad: bool, op: Option<OpRecord>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        let needs_grad =
            requires_grad || op.as_ref().is_some_and(|o| o.parents.iter().any(|p| p.needs_grad()));
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                values: RefCell::new(values),
                grad: RefCell::new(None),
                requires_grad,
                needs_grad,
                op,
            }),
        }
    }

    fn unary(
        op_name: &'static str,
        parent: &Tensor,
        shape: Vec<usize>,
        values: Vec<f64>,
        backward: BackwardFn,
    ) -> Tensor {
        let _ = op_name;
        Tensor::make(
            shape,
            quantize_vec(values),
            false,
            Some(OpRecord { parents: vec![parent.clone()], backward }),
        )
    }

    fn from_op(parents: Vec<Tensor>, shape: Vec<usize>, values: Vec<f64>, backward: BackwardFn) -> Tensor {
        Tensor::make(shape, quantize_vec(values), false, Some(OpRecord { parents, backward }))
    }

    /// New leaf tensor from raw values.
    pub fn from_vec(shape: &[usize], values: Vec<f64>, requires_grad: bool) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "value count must equal the product of the extents"
        );
        Tensor::make(shape.to_vec(), quantize_vec(values), requires_grad, None)
    }

    /// Constant leaf (no gradient ever accumulated).
    pub fn constant(shape: &[usize], values: Vec<f64>) -> Tensor {
        Tensor::from_vec(shape, values, false)
    }

    pub fn zeros(shape: &[usize], requires_grad: bool) -> Tensor {
        Tensor::from_vec(shape, vec![0.0; shape.iter().product()], requires_grad)
    }

    pub fn full(shape: &[usize], value: f64, requires_grad: bool) -> Tensor {
        Tensor::from_vec(shape, vec![value; shape.iter().product()], requires_grad)
    }

    /// Leaf filled from a zero-mean normal with the given deviation (Box-Muller).
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
        let n = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        while values.len() < n {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen();
            let radius = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            values.push(radius * theta.cos() * std);
            if values.len() < n {
                values.push(radius * theta.sin() * std);
            }
        }
        Tensor::from_vec(shape, values, true)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    fn needs_grad(&self) -> bool {
        self.inner.needs_grad
    }

    /// Snapshot of the stored values.
    pub fn values(&self) -> Vec<f64> {
        self.inner.values.borrow().clone()
    }

    /// Stored values rounded to their 32-bit storage form.
    pub fn values_f32(&self) -> Vec<f32> {
        self.inner.values.borrow().iter().map(|&x| x as f32).collect()
    }

    pub fn value_at(&self, idx: usize) -> f64 {
        self.inner.values.borrow()[idx]
    }

    /// The single value of a one-element tensor.
    pub fn scalar(&self) -> f64 {
        assert_eq!(self.numel(), 1, "scalar() on a tensor with {} elements", self.numel());
        self.inner.values.borrow()[0]
    }

    /// Overwrite one stored element. Only meaningful for leaves: optimizers
    /// and the finite-difference harness mutate parameters between forward
    /// passes, never tensors inside a recorded graph.
    pub fn set_value(&self, idx: usize, value: f64) {
        self.inner.values.borrow_mut()[idx] = quantize(value);
    }

    /// Replace all stored values.
    pub fn set_values(&self, values: &[f64]) {
        let mut v = self.inner.values.borrow_mut();
        assert_eq!(v.len(), values.len());
        for (dst, &src) in v.iter_mut().zip(values) {
            *dst = quantize(src);
        }
    }

    /// Snapshot of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    fn accumulate_persistent_grad(&self, delta: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        let buf = slot.get_or_insert_with(|| vec![0.0; self.numel()]);
        for (dst, &src) in buf.iter_mut().zip(delta) {
            *dst += src;
        }
    }

    /// Same underlying storage (identity of the tensor node).
    pub fn same_tensor(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.inner.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(TensorError::ShapeMismatch { op, details: format!("expected rank 2, got {s:?}") }),
        }
    }

    /// Rows/cols view: rank-1 `[n]` is one row, rank-2 `[r, c]` is `r` rows.
    fn row_view(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.inner.shape.as_slice() {
            [] => Err(TensorError::ShapeMismatch { op, details: "rank 0".into() }),
            [n] => Ok((1, *n)),
            s => {
                let cols = *s.last().unwrap();
                Ok((self.numel() / cols, cols))
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

/// `a · b` for rank-2 operands with matching inner extents.
///
/// Backward: `dA += dC·Bᵀ`, `dB += Aᵀ·dC`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2("matmul")?;
    let (k2, n) = b.dims2("matmul")?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            details: format!("{:?} · {:?}", a.shape(), b.shape()),
        });
    }
    let av = a.inner.values.borrow();
    let bv = b.inner.values.borrow();
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f64;
            for l in 0..k {
                acc += av[i * k + l] * bv[l * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    drop(av);
    drop(bv);
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        vec![a.clone(), b.clone()],
        vec![m, n],
        out,
        Box::new(move |g, sink| {
            let av = ac.inner.values.borrow();
            let bv = bc.inner.values.borrow();
            let mut da = vec![0.0f64; m * k];
            for i in 0..m {
                for l in 0..k {
                    let mut acc = 0.0f64;
                    for j in 0..n {
                        acc += g[i * n + j] * bv[l * n + j];
                    }
                    da[i * k + l] = acc;
                }
            }
            let mut db = vec![0.0f64; k * n];
            for l in 0..k {
                for j in 0..n {
                    let mut acc = 0.0f64;
                    for i in 0..m {
                        acc += av[i * k + l] * g[i * n + j];
                    }
                    db[l * n + j] = acc;
                }
            }
            sink(0, da);
            sink(1, db);
        }),
    ))
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = a.dims2("transpose")?;
    let av = a.inner.values.borrow();
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = av[i * n + j];
        }
    }
    drop(av);
    Ok(Tensor::from_op(
        vec![a.clone()],
        vec![n, m],
        out,
        Box::new(move |g, sink| {
            let mut da = vec![0.0f64; m * n];
            for i in 0..m {
                for j in 0..n {
                    da[i * n + j] = g[j * m + i];
                }
            }
            sink(0, da);
        }),
    ))
}

fn zip_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            details: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same_shape("add", a, b)?;
    let out = {
        let av = a.inner.values.borrow();
        let bv = b.inner.values.borrow();
        av.iter().zip(bv.iter()).map(|(x, y)| x + y).collect()
    };
    Ok(Tensor::from_op(
        vec![a.clone(), b.clone()],
        a.shape().to_vec(),
        out,
        Box::new(|g, sink| {
            sink(0, g.to_vec());
            sink(1, g.to_vec());
        }),
    ))
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same_shape("sub", a, b)?;
    let out = {
        let av = a.inner.values.borrow();
        let bv = b.inner.values.borrow();
        av.iter().zip(bv.iter()).map(|(x, y)| x - y).collect()
    };
    Ok(Tensor::from_op(
        vec![a.clone(), b.clone()],
        a.shape().to_vec(),
        out,
        Box::new(|g, sink| {
            sink(0, g.to_vec());
            sink(1, g.iter().map(|x| -x).collect());
        }),
    ))
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_same_shape("mul", a, b)?;
    let out = {
        let av = a.inner.values.borrow();
        let bv = b.inner.values.borrow();
        av.iter().zip(bv.iter()).map(|(x, y)| x * y).collect()
    };
    let (ac, bc) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        vec![a.clone(), b.clone()],
        a.shape().to_vec(),
        out,
        Box::new(move |g, sink| {
            let av = ac.inner.values.borrow();
            let bv = bc.inner.values.borrow();
            sink(0, g.iter().zip(bv.iter()).map(|(x, y)| x * y).collect());
            sink(1, g.iter().zip(av.iter()).map(|(x, y)| x * y).collect());
        }),
    ))
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    let out = a.inner.values.borrow().iter().map(|x| x * c).collect();
    Tensor::unary(
        "scale",
        a,
        a.shape().to_vec(),
        out,
        Box::new(move |g, sink| sink(0, g.iter().map(|x| x * c).collect())),
    )
}

pub fn neg(a: &Tensor) -> Tensor {
    scale(a, -1.0)
}

/// Broadcast add of a length-`c` vector to every row of an `r×c` matrix.
pub fn add_row(a: &Tensor, row: &Tensor) -> Result<Tensor> {
    let (r, c) = a.dims2("add_row")?;
    if row.numel() != c || row.rank() > 2 {
        return Err(TensorError::ShapeMismatch {
            op: "add_row",
            details: format!("matrix {:?} + row {:?}", a.shape(), row.shape()),
        });
    }
    let out = {
        let av = a.inner.values.borrow();
        let rv = row.inner.values.borrow();
        let mut out = vec![0.0f64; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = av[i * c + j] + rv[j];
            }
        }
        out
    };
    Ok(Tensor::from_op(
        vec![a.clone(), row.clone()],
        a.shape().to_vec(),
        out,
        Box::new(move |g, sink| {
            sink(0, g.to_vec());
            let mut dr = vec![0.0f64; c];
            for j in 0..c {
                let mut acc = 0.0f64;
                for i in 0..r {
                    acc += g[i * c + j];
                }
                dr[j] = acc;
            }
            sink(1, dr);
        }),
    ))
}

pub fn relu(a: &Tensor) -> Tensor {
    let out = a.inner.values.borrow().iter().map(|&x| x.max(0.0)).collect();
    let ac = a.clone();
    Tensor::unary(
        "relu",
        a,
        a.shape().to_vec(),
        out,
        Box::new(move |g, sink| {
            let av = ac.inner.values.borrow();
            sink(0, g.iter().zip(av.iter()).map(|(&gi, &x)| if x > 0.0 { gi } else { 0.0 }).collect());
        }),
    )
}

/// Row-wise softmax over the last axis, computed with max-subtraction.
pub fn softmax_rows(a: &Tensor) -> Result<Tensor> {
    let (rows, cols) = a.row_view("softmax")?;
    if cols == 0 {
        return Err(TensorError::Empty { op: "softmax" });
    }
    let av = a.inner.values.borrow();
    check_finite("softmax", &av)?;
    let mut out = vec![0.0f64; rows * cols];
    for i in 0..rows {
        let row = &av[i * cols..(i + 1) * cols];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0f64;
        for j in 0..cols {
            let e = (row[j] - max).exp();
            out[i * cols + j] = e;
            sum += e;
        }
        for j in 0..cols {
            out[i * cols + j] /= sum;
        }
    }
    drop(av);
    let probs = out.clone();
    Ok(Tensor::from_op(
        vec![a.clone()],
        a.shape().to_vec(),
        out,
        Box::new(move |g, sink| {
            // dx_j = w_j (g_j - Σ_k w_k g_k), probabilities after 32-bit store
            let mut da = vec![0.0f64; rows * cols];
            for i in 0..rows {
                let w = &probs[i * cols..(i + 1) * cols];
                let gr = &g[i * cols..(i + 1) * cols];
                let mut dot = 0.0f64;
                for j in 0..cols {
                    dot += w[j] * gr[j];
                }
                for j in 0..cols {
                    da[i * cols + j] = w[j] * (gr[j] - dot);
                }
            }
            sink(0, da);
        }),
    ))
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-wise layer normalization followed by the affine `x̂·gain + bias`.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (rows, cols) = x.row_view("layer_norm")?;
    if gain.numel() != cols || bias.numel() != cols {
        return Err(TensorError::ShapeMismatch {
            op: "layer_norm",
            details: format!("x {:?}, gain {:?}, bias {:?}", x.shape(), gain.shape(), bias.shape()),
        });
    }
    let xv = x.inner.values.borrow();
    let gv = gain.inner.values.borrow();
    let bv = bias.inner.values.borrow();
    let mut out = vec![0.0f64; rows * cols];
    let mut normalized = vec![0.0f64; rows * cols];
    let mut inv_sigma = vec![0.0f64; rows];
    for i in 0..rows {
        let row = &xv[i * cols..(i + 1) * cols];
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_sigma[i] = inv;
        for j in 0..cols {
            let xhat = (row[j] - mean) * inv;
            normalized[i * cols + j] = xhat;
            out[i * cols + j] = xhat * gv[j] + bv[j];
        }
    }
    drop(xv);
    drop(gv);
    drop(bv);
    let gc = gain.clone();
    Ok(Tensor::from_op(
        vec![x.clone(), gain.clone(), bias.clone()],
        x.shape().to_vec(),
        out,
        Box::new(move |g, sink| {
            let gv = gc.inner.values.borrow();
            let mut dx = vec![0.0f64; rows * cols];
            let mut dgain = vec![0.0f64; cols];
            let mut dbias = vec![0.0f64; cols];
            for i in 0..rows {
                let xhat = &normalized[i * cols..(i + 1) * cols];
                let gr = &g[i * cols..(i + 1) * cols];
                let mut mean_u = 0.0f64;
                let mut mean_ux = 0.0f64;
                for j in 0..cols {
                    let u = gv[j] * gr[j];
                    mean_u += u;
                    mean_ux += u * xhat[j];
                    dgain[j] += gr[j] * xhat[j];
                    dbias[j] += gr[j];
                }
                mean_u /= cols as f64;
                mean_ux /= cols as f64;
                for j in 0..cols {
                    let u = gv[j] * gr[j];
                    dx[i * cols + j] = (u - mean_u - xhat[j] * mean_ux) * inv_sigma[i];
                }
            }
            sink(0, dx);
            sink(1, dgain);
            sink(2, dbias);
        }),
    ))
}

/// Inverted dropout: keep with probability `1-p`, scale kept values by
/// `1/(1-p)`. In evaluation mode (`train = false`) or with `p = 0` this is
/// the identity and returns the input tensor unchanged.
pub fn dropout(x: &Tensor, p: f64, train: bool, rng: &mut impl Rng) -> Tensor {
    if !train || p <= 0.0 {
        return x.clone();
    }
    let keep = 1.0 - p;
    let inv = 1.0 / keep;
    let mask: Vec<f64> =
        (0..x.numel()).map(|_| if rng.gen::<f64>() < keep { inv } else { 0.0 }).collect();
    let out = x.inner.values.borrow().iter().zip(mask.iter()).map(|(v, m)| v * m).collect();
    let mask_b = mask.clone();
    Tensor::unary(
        "dropout",
        x,
        x.shape().to_vec(),
        out,
        Box::new(move |g, sink| {
            sink(0, g.iter().zip(mask_b.iter()).map(|(gi, m)| gi * m).collect());
        }),
    )
}

/// Select rows of `table` by index; backward scatter-adds into the table.
pub fn gather_rows(table: &Tensor, indices: &[usize]) -> Result<Tensor> {
    let (rows, cols) = table.dims2("gather_rows")?;
    if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
        return Err(TensorError::IndexOutOfRange {
            op: "gather_rows",
            details: format!("row {bad} of {rows}"),
        });
    }
    let tv = table.inner.values.borrow();
    let mut out = Vec::with_capacity(indices.len() * cols);
    for &i in indices {
        out.extend_from_slice(&tv[i * cols..(i + 1) * cols]);
    }
    drop(tv);
    let idx = indices.to_vec();
    let n = indices.len();
    Ok(Tensor::from_op(
        vec![table.clone()],
        vec![n, cols],
        out,
        Box::new(move |g, sink| {
            let mut dt = vec![0.0f64; rows * cols];
            for (k, &i) in idx.iter().enumerate() {
                for j in 0..cols {
                    dt[i * cols + j] += g[k * cols + j];
                }
            }
            sink(0, dt);
        }),
    ))
}

/// Stack rank-2 tensors with equal column counts on top of each other.
pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(TensorError::Empty { op: "concat_rows" });
    }
    let (_, cols) = parts[0].dims2("concat_rows")?;
    let mut total_rows = 0;
    for p in parts {
        let (r, c) = p.dims2("concat_rows")?;
        if c != cols {
            return Err(TensorError::ShapeMismatch {
                op: "concat_rows",
                details: format!("column counts differ: {cols} vs {c}"),
            });
        }
        total_rows += r;
    }
    let mut out = Vec::with_capacity(total_rows * cols);
    for p in parts {
        out.extend_from_slice(&p.inner.values.borrow());
    }
    let sizes: Vec<usize> = parts.iter().map(|p| p.numel()).collect();
    Ok(Tensor::from_op(
        parts.to_vec(),
        vec![total_rows, cols],
        out,
        Box::new(move |g, sink| {
            let mut offset = 0;
            for (k, &sz) in sizes.iter().enumerate() {
                sink(k, g[offset..offset + sz].to_vec());
                offset += sz;
            }
        }),
    ))
}

/// Concatenate rank-2 tensors with equal row counts side by side.
pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(TensorError::Empty { op: "concat_cols" });
    }
    let (rows, _) = parts[0].dims2("concat_cols")?;
    let mut widths = Vec::with_capacity(parts.len());
    let mut total_cols = 0;
    for p in parts {
        let (r, c) = p.dims2("concat_cols")?;
        if r != rows {
            return Err(TensorError::ShapeMismatch {
                op: "concat_cols",
                details: format!("row counts differ: {rows} vs {r}"),
            });
        }
        widths.push(c);
        total_cols += c;
    }
    let mut out = vec![0.0f64; rows * total_cols];
    let mut col_offset = 0;
    for (p, &w) in parts.iter().zip(&widths) {
        let pv = p.inner.values.borrow();
        for i in 0..rows {
            out[i * total_cols + col_offset..i * total_cols + col_offset + w]
                .copy_from_slice(&pv[i * w..(i + 1) * w]);
        }
        col_offset += w;
    }
    let widths_b = widths.clone();
    Ok(Tensor::from_op(
        parts.to_vec(),
        vec![rows, total_cols],
        out,
        Box::new(move |g, sink| {
            let mut col_offset = 0;
            for (k, &w) in widths_b.iter().enumerate() {
                let mut dp = vec![0.0f64; rows * w];
                for i in 0..rows {
                    dp[i * w..(i + 1) * w].copy_from_slice(
                        &g[i * total_cols + col_offset..i * total_cols + col_offset + w],
                    );
                }
                sink(k, dp);
                col_offset += w;
            }
        }),
    ))
}

pub fn slice_rows(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (rows, cols) = x.dims2("slice_rows")?;
    if start + len > rows {
        return Err(TensorError::IndexOutOfRange {
            op: "slice_rows",
            details: format!("rows {start}..{} of {rows}", start + len),
        });
    }
    let out = x.inner.values.borrow()[start * cols..(start + len) * cols].to_vec();
    Ok(Tensor::from_op(
        vec![x.clone()],
        vec![len, cols],
        out,
        Box::new(move |g, sink| {
            let mut dx = vec![0.0f64; rows * cols];
            dx[start * cols..(start + len) * cols].copy_from_slice(g);
            sink(0, dx);
        }),
    ))
}

pub fn slice_cols(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (rows, cols) = x.dims2("slice_cols")?;
    if start + len > cols {
        return Err(TensorError::IndexOutOfRange {
            op: "slice_cols",
            details: format!("cols {start}..{} of {cols}", start + len),
        });
    }
    let xv = x.inner.values.borrow();
    let mut out = Vec::with_capacity(rows * len);
    for i in 0..rows {
        out.extend_from_slice(&xv[i * cols + start..i * cols + start + len]);
    }
    drop(xv);
    Ok(Tensor::from_op(
        vec![x.clone()],
        vec![rows, len],
        out,
        Box::new(move |g, sink| {
            let mut dx = vec![0.0f64; rows * cols];
            for i in 0..rows {
                dx[i * cols + start..i * cols + start + len]
                    .copy_from_slice(&g[i * len..(i + 1) * len]);
            }
            sink(0, dx);
        }),
    ))
}

/// Sum of all elements (64-bit accumulation), as a `[1]` tensor.
pub fn sum_all(x: &Tensor) -> Tensor {
    let total: f64 = x.inner.values.borrow().iter().sum();
    let n = x.numel();
    Tensor::unary(
        "sum_all",
        x,
        vec![1],
        vec![total],
        Box::new(move |g, sink| sink(0, vec![g[0]; n])),
    )
}

/// Mean of all elements, as a `[1]` tensor.
pub fn mean_all(x: &Tensor) -> Result<Tensor> {
    let n = x.numel();
    if n == 0 {
        return Err(TensorError::Empty { op: "mean_all" });
    }
    Ok(scale(&sum_all(x), 1.0 / n as f64))
}

/// Natural log with the input clamped to at least `floor`.
pub fn log_clamped(x: &Tensor, floor: f64) -> Tensor {
    let out = x.inner.values.borrow().iter().map(|&v| v.max(floor).ln()).collect();
    let xc = x.clone();
    Tensor::unary(
        "log_clamped",
        x,
        x.shape().to_vec(),
        out,
        Box::new(move |g, sink| {
            let xv = xc.inner.values.borrow();
            sink(
                0,
                g.iter()
                    .zip(xv.iter())
                    .map(|(&gi, &v)| if v > floor { gi / v } else { 0.0 })
                    .collect(),
            );
        }),
    )
}

/// Elementwise square root. The backward guards against division by zero.
pub fn sqrt_elem(x: &Tensor) -> Tensor {
    let out: Vec<f64> = x.inner.values.borrow().iter().map(|&v| v.max(0.0).sqrt()).collect();
    let roots = out.clone();
    Tensor::unary(
        "sqrt",
        x,
        x.shape().to_vec(),
        out,
        Box::new(move |g, sink| {
            sink(0, g.iter().zip(roots.iter()).map(|(&gi, &r)| 0.5 * gi / r.max(1e-12)).collect());
        }),
    )
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: &Tensor) -> Tensor {
    let out = x
        .inner
        .values
        .borrow()
        .iter()
        .map(|&v| v.max(0.0) + (-v.abs()).exp().ln_1p())
        .collect();
    let xc = x.clone();
    Tensor::unary(
        "softplus",
        x,
        x.shape().to_vec(),
        out,
        Box::new(move |g, sink| {
            let xv = xc.inner.values.borrow();
            sink(
                0,
                g.iter()
                    .zip(xv.iter())
                    .map(|(&gi, &v)| gi / (1.0 + (-v).exp()))
                    .collect(),
            );
        }),
    )
}

pub fn sin_elem(x: &Tensor) -> Tensor {
    let out = x.inner.values.borrow().iter().map(|&v| v.sin()).collect();
    let xc = x.clone();
    Tensor::unary(
        "sin",
        x,
        x.shape().to_vec(),
        out,
        Box::new(move |g, sink| {
            let xv = xc.inner.values.borrow();
            sink(0, g.iter().zip(xv.iter()).map(|(&gi, &v)| gi * v.cos()).collect());
        }),
    )
}

pub fn cos_elem(x: &Tensor) -> Tensor {
    let out = x.inner.values.borrow().iter().map(|&v| v.cos()).collect();
    let xc = x.clone();
    Tensor::unary(
        "cos",
        x,
        x.shape().to_vec(),
        out,
        Box::new(move |g, sink| {
            let xv = xc.inner.values.borrow();
            sink(0, g.iter().zip(xv.iter()).map(|(&gi, &v)| -gi * v.sin()).collect());
        }),
    )
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

/// Reverse-mode pass from a scalar loss.
///
/// Gradients accumulate additively across fan-out; intermediate gradients
/// live only for the duration of the call, while leaves created with
/// `requires_grad` keep theirs until [`Tensor::zero_grad`]. Calling twice
/// without a reset therefore doubles the leaf gradients.
pub fn backprop(loss: &Tensor) -> Result<()> {
    if loss.numel() != 1 {
        return Err(TensorError::NonScalarLoss { numel: loss.numel() });
    }

    // Iterative post-order DFS over the needs-grad subgraph.
    let mut order: Vec<Tensor> = Vec::new();
    let mut visited: HashMap<u64, ()> = HashMap::new();
    let mut stack: Vec<(Tensor, usize)> = vec![(loss.clone(), 0)];
    visited.insert(loss.inner.id, ());
    while let Some((node, child)) = stack.pop() {
        let parents: Vec<Tensor> = match &node.inner.op {
            Some(op) => op.parents.iter().filter(|p| p.needs_grad()).cloned().collect(),
            None => Vec::new(),
        };
        if child < parents.len() {
            stack.push((node.clone(), child + 1));
            let p = parents[child].clone();
            if !visited.contains_key(&p.inner.id) {
                visited.insert(p.inner.id, ());
                stack.push((p, 0));
            }
        } else {
            order.push(node);
        }
    }

    let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
    grads.insert(loss.inner.id, vec![1.0]);

    for node in order.iter().rev() {
        let Some(g) = grads.remove(&node.inner.id) else { continue };
        if node.inner.requires_grad {
            node.accumulate_persistent_grad(&g);
        }
        if let Some(op) = &node.inner.op {
            let parents = &op.parents;
            (op.backward)(&g, &mut |slot: usize, delta: Vec<f64>| {
                let p = &parents[slot];
                if !p.needs_grad() {
                    return;
                }
                debug_assert_eq!(delta.len(), p.numel());
                grads
                    .entry(p.inner.id)
                    .and_modify(|buf| {
                        for (d, s) in buf.iter_mut().zip(&delta) {
                            *d += s;
                        }
                    })
                    .or_insert(delta);
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Central finite differences of `f` w.r.t. one leaf, in full precision.
    fn fd_grad(f: &dyn Fn() -> Tensor, leaf: &Tensor, h: f64) -> Vec<f64> {
        full_precision(|| {
            let mut out = Vec::with_capacity(leaf.numel());
            for i in 0..leaf.numel() {
                let orig = leaf.value_at(i);
                leaf.set_value(i, orig + h);
                let plus = f().scalar();
                leaf.set_value(i, orig - h);
                let minus = f().scalar();
                leaf.set_value(i, orig);
                out.push((plus - minus) / (2.0 * h));
            }
            out
        })
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            let denom = x.abs().max(y.abs()).max(1e-2);
            assert!(
                ((x - y) / denom).abs() < tol,
                "element {i}: {x} vs {y} (tol {tol})"
            );
        }
    }

    #[test]
    fn matmul_identity_passes_through() {
        let x = Tensor::from_vec(&[2, 2], vec![3.0, -1.0, 2.5, 4.0], false);
        let eye = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0], false);
        let y = matmul(&eye, &x).unwrap();
        assert_eq!(y.values(), x.values());
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0], false);
        let b = Tensor::from_vec(&[2, 1], vec![1.0, 1.0], false);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.values(), vec![3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_error() {
        let a = Tensor::zeros(&[2, 3], false);
        let b = Tensor::zeros(&[2, 3], false);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut r = rng(7);
        let a = Tensor::randn(&[3, 4], 1.0, &mut r);
        let b = Tensor::randn(&[4, 2], 1.0, &mut r);
        let f = || sum_all(&relu(&matmul(&a, &b).unwrap()));
        let loss = f();
        backprop(&loss).unwrap();
        let da = a.grad().unwrap();
        let db = b.grad().unwrap();
        assert_close(&da, &fd_grad(&|| f(), &a, 1e-3), 1e-3);
        assert_close(&db, &fd_grad(&|| f(), &b, 1e-3), 1e-3);
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let x = Tensor::from_vec(&[2], vec![0.0, 0.0], false);
        let s = softmax_rows(&x).unwrap();
        assert_eq!(s.values(), vec![0.5, 0.5]);

        let big = Tensor::from_vec(&[2], vec![1000.0, 0.0], false);
        let s = softmax_rows(&big).unwrap();
        assert!((s.value_at(0) - 1.0).abs() < 1e-6);
        assert!(s.value_at(1).abs() < 1e-6);
    }

    #[test]
    fn softmax_rejects_non_finite() {
        let x = Tensor::from_vec(&[2], vec![f64::NAN, 0.0], false);
        assert!(softmax_rows(&x).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one_in_range() {
        let mut r = rng(11);
        for _ in 0..50 {
            let vals: Vec<f64> = (0..8).map(|_| r.gen_range(-50.0..50.0)).collect();
            let x = Tensor::from_vec(&[2, 4], vals, false);
            let s = softmax_rows(&x).unwrap();
            let v = s.values();
            for row in v.chunks(4) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&p| p > 0.0));
            }
        }
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let mut r = rng(13);
        let x = Tensor::randn(&[1, 5], 1.0, &mut r);
        let w = Tensor::randn(&[1, 5], 1.0, &mut r);
        let f = || sum_all(&mul(&softmax_rows(&x).unwrap(), &w).unwrap());
        let loss = f();
        backprop(&loss).unwrap();
        assert_close(&x.grad().unwrap(), &fd_grad(&|| f(), &x, 1e-3), 1e-3);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let x = Tensor::from_vec(&[1, 4], vec![2.5; 4], false);
        let gain = Tensor::full(&[4], 1.0, false);
        let bias = Tensor::zeros(&[4], false);
        let y = layer_norm(&x, &gain, &bias).unwrap();
        for v in y.values() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_two_point_row() {
        // Row [1, -1]: mean 0, population variance 1, so outputs ±1/sqrt(1+eps).
        let x = Tensor::from_vec(&[1, 2], vec![1.0, -1.0], false);
        let gain = Tensor::full(&[2], 1.0, false);
        let bias = Tensor::zeros(&[2], false);
        let y = layer_norm(&x, &gain, &bias).unwrap();
        let expect = 1.0 / (1.0f64 + LAYER_NORM_EPS).sqrt();
        assert!((y.value_at(0) - expect).abs() < 1e-6);
        assert!((y.value_at(1) + expect).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_gradients_match_finite_differences() {
        let mut r = rng(17);
        let x = Tensor::randn(&[2, 8], 1.0, &mut r);
        let gain = Tensor::randn(&[8], 1.0, &mut r);
        let bias = Tensor::randn(&[8], 1.0, &mut r);
        let w = Tensor::randn(&[2, 8], 1.0, &mut r);
        let f = || sum_all(&mul(&layer_norm(&x, &gain, &bias).unwrap(), &w).unwrap());
        let loss = f();
        backprop(&loss).unwrap();
        assert_close(&x.grad().unwrap(), &fd_grad(&|| f(), &x, 1e-3), 1e-3);
        assert_close(&gain.grad().unwrap(), &fd_grad(&|| f(), &gain, 1e-3), 1e-3);
        assert_close(&bias.grad().unwrap(), &fd_grad(&|| f(), &bias, 1e-3), 1e-3);
    }

    #[test]
    fn backprop_sum_gives_ones() {
        let w = Tensor::randn(&[3, 2], 1.0, &mut rng(1));
        let loss = sum_all(&w);
        backprop(&loss).unwrap();
        assert_eq!(w.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn backprop_fanout_accumulates() {
        let w = Tensor::randn(&[3, 2], 1.0, &mut rng(2));
        let loss = sum_all(&add(&w, &w).unwrap());
        backprop(&loss).unwrap();
        assert_eq!(w.grad().unwrap(), vec![2.0; 6]);
    }

    #[test]
    fn backprop_without_reset_accumulates() {
        let w = Tensor::randn(&[2, 2], 1.0, &mut rng(3));
        let loss = sum_all(&w);
        backprop(&loss).unwrap();
        backprop(&loss).unwrap();
        assert_eq!(w.grad().unwrap(), vec![2.0; 4]);
    }

    #[test]
    fn backprop_rejects_non_scalar() {
        let w = Tensor::randn(&[2, 2], 1.0, &mut rng(4));
        let y = relu(&w);
        assert!(matches!(backprop(&y), Err(TensorError::NonScalarLoss { numel: 4 })));
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut r = rng(5);
        let x = Tensor::randn(&[4, 4], 1.0, &mut r);
        let y = dropout(&x, 0.5, false, &mut r);
        assert!(x.same_tensor(&y));
    }

    #[test]
    fn dropout_train_scales_kept_values() {
        let mut r = rng(6);
        let x = Tensor::full(&[1, 1000], 1.0, false);
        let y = dropout(&x, 0.1, true, &mut r);
        let v = y.values();
        let kept = v.iter().filter(|&&x| x != 0.0).count();
        for &val in v.iter().filter(|&&x| x != 0.0) {
            // Stored through 32-bit, so compare at f32 resolution.
            assert!((val - 1.0 / 0.9).abs() < 1e-6);
        }
        assert!(kept > 850 && kept < 950, "kept {kept} of 1000 at p=0.1");
    }

    #[test]
    fn gather_scatter_round_trip_gradients() {
        let mut r = rng(8);
        let table = Tensor::randn(&[5, 3], 1.0, &mut r);
        let w = Tensor::randn(&[4, 3], 1.0, &mut r);
        let f = || sum_all(&mul(&gather_rows(&table, &[1, 3, 1, 0]).unwrap(), &w).unwrap());
        let loss = f();
        backprop(&loss).unwrap();
        assert_close(&table.grad().unwrap(), &fd_grad(&|| f(), &table, 1e-3), 1e-3);
    }

    #[test]
    fn concat_and_slice_invert() {
        let mut r = rng(9);
        let a = Tensor::randn(&[2, 3], 1.0, &mut r);
        let b = Tensor::randn(&[1, 3], 1.0, &mut r);
        let cat = concat_rows(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(cat.shape(), &[3, 3]);
        let back = slice_rows(&cat, 2, 1).unwrap();
        assert_eq!(back.values(), b.values());

        let side = concat_cols(&[a.clone(), a.clone()]).unwrap();
        assert_eq!(side.shape(), &[2, 6]);
        let right = slice_cols(&side, 3, 3).unwrap();
        assert_eq!(right.values(), a.values());
    }

    #[test]
    fn slice_gradients_match_finite_differences() {
        let mut r = rng(10);
        let x = Tensor::randn(&[4, 6], 1.0, &mut r);
        let w = Tensor::randn(&[2, 3], 1.0, &mut r);
        let f = || {
            let s = slice_cols(&slice_rows(&x, 1, 2).unwrap(), 2, 3).unwrap();
            sum_all(&mul(&s, &w).unwrap())
        };
        let loss = f();
        backprop(&loss).unwrap();
        assert_close(&x.grad().unwrap(), &fd_grad(&|| f(), &x, 1e-3), 1e-3);
    }

    #[test]
    fn elementwise_gradients_match_finite_differences() {
        let mut r = rng(12);
        let x = Tensor::randn(&[2, 4], 0.8, &mut r);
        let f = || {
            let s = softplus(&sin_elem(&x));
            let c = cos_elem(&x);
            let sq = sqrt_elem(&add(&mul(&x, &x).unwrap(), &Tensor::full(&[2, 4], 0.5, false)).unwrap());
            sum_all(&mul(&add(&s, &c).unwrap(), &sq).unwrap())
        };
        let loss = f();
        backprop(&loss).unwrap();
        assert_close(&x.grad().unwrap(), &fd_grad(&|| f(), &x, 1e-3), 1e-3);
    }

    #[test]
    fn log_clamped_floors_small_values() {
        let x = Tensor::from_vec(&[3], vec![1.0, 1e-20, 0.0], false);
        let y = log_clamped(&x, 1e-12);
        assert!((y.value_at(0) - 0.0).abs() < 1e-12);
        // ln(1e-12) ≈ -27.63 stored through 32-bit: ~3e-6 absolute wiggle.
        assert!((y.value_at(1) - (1e-12f64).ln()).abs() < 1e-5);
        assert!((y.value_at(2) - (1e-12f64).ln()).abs() < 1e-5);
    }

    #[test]
    fn storage_is_32_bit_by_default() {
        let x = Tensor::from_vec(&[1], vec![0.1], false);
        assert_eq!(x.value_at(0), 0.1f32 as f64);
        let y = full_precision(|| Tensor::from_vec(&[1], vec![0.1], false));
        assert_eq!(y.value_at(0), 0.1);
    }
}
