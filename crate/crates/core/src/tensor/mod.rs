//! Dense float64 tensors and a reverse-mode gradient tape.
//!
//! The op set is deliberately enumerated rather than general: matrix multiply
//! (batched, broadcasting over leading dims), elementwise add/mul/div/max,
//! scalar affine, sigmoid family, softmax over the last dim, layer norm,
//! masked mean pooling, transpose/reshape, and reductions. Everything in the
//! alignment pipeline factors through these.

mod tape;

pub use tape::{Tape, Var, LOG_PROB_CLAMP, NEG_MASK};

use crate::error::TensorError;

pub type TResult<T> = std::result::Result<T, TensorError>;

/// Dense n-dimensional float64 array, row-major. Scalars have an empty shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> TResult<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "tensor",
                details: format!("shape {shape:?} holds {numel} values, got {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    /// Deterministic Gaussian init scaled by `std`.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| crate::rng::normal(rng) * std).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Value of a rank-0 or single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (i, &ix) in index.iter().enumerate() {
            debug_assert!(ix < self.shape[i]);
            flat = flat * self.shape[i] + ix;
        }
        self.data[flat]
    }
}

// ── shape helpers ────────────────────────────────────────────────────

/// Numpy-style broadcast of two shapes (right-aligned, 1 stretches).
pub(crate) fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        if da == db || da == 1 || db == 1 {
            out[i] = da.max(db);
        } else {
            return None;
        }
    }
    Some(out)
}

/// Row-major strides with 0 in broadcast positions, for `shape` viewed as `out`.
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - shape.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        strides[offset + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Odometer over `out` coordinates yielding flat offsets for two broadcast
/// operands. Avoids per-element div/mod.
pub(crate) fn for_each_broadcast2(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let numel: usize = out.iter().product();
    let mut coords = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for flat in 0..numel {
        f(flat, oa, ob);
        for d in (0..rank).rev() {
            coords[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if coords[d] < out[d] {
                break;
            }
            coords[d] = 0;
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
        }
    }
}

// ── matmul kernels ───────────────────────────────────────────────────
// Loop orders chosen so the inner loop runs over contiguous rows.

/// c[m,n] += a[m,k] * b[k,n]
pub(crate) fn matmul_nn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
}

/// c[m,k] += g[m,n] * b[k,n]^T  (dot of contiguous rows)
pub(crate) fn matmul_nt_acc(g: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += grow[j] * brow[j];
            }
            c[i * k + p] += acc;
        }
    }
}

/// c[k,n] += a[m,k]^T * g[m,n]  (axpy over contiguous rows)
pub(crate) fn matmul_tn_acc(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * grow[j];
            }
        }
    }
}
