//! Dense row-major f64 tensors with value semantics.
//!
//! Data sits behind an `Arc`, so clones are cheap and the tape can keep
//! saved activations alive without copying. All mutation happens on freshly
//! allocated buffers before they are wrapped.

use std::sync::Arc;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data mismatch"
        );
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let len = shape.iter().product();
        Tensor::new(shape, vec![0.0; len])
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(vec![1], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// Rows of a matrix view: the product of all leading dimensions.
    pub fn rows(&self) -> usize {
        if self.shape.len() <= 1 {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    /// Trailing dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::new(self.shape.clone(), self.data.iter().map(|v| f(*v)).collect())
    }

    /// True when both tensors share the same underlying buffer.
    pub fn same_buffer(a: &Tensor, b: &Tensor) -> bool {
        Arc::ptr_eq(&a.data, &b.data)
    }

    /// Same data, new shape (must preserve the element count).
    pub fn reshaped(&self, shape: Vec<usize>) -> Tensor {
        assert_eq!(shape.iter().product::<usize>(), self.len());
        Tensor {
            shape,
            data: Arc::clone(&self.data),
        }
    }
}

/// c[m,n] = a[m,k] @ b[k,n], accumulating into `c` scaled by `beta`.
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if k <= 8 {
        // Low-rank adapter backpropagation: accumulate k scaled rows of b
        // per output row instead of paying the gemm packing overhead.
        for i in 0..m {
            let ci = &mut c[i * n..(i + 1) * n];
            if beta == 0.0 {
                ci.fill(0.0);
            } else if beta != 1.0 {
                for v in ci.iter_mut() {
                    *v *= beta;
                }
            }
            for kk in 0..k {
                let scale = a[i * k + kk];
                let brow = &b[kk * n..(kk + 1) * n];
                for (cv, bv) in ci.iter_mut().zip(brow) {
                    *cv += scale * bv;
                }
            }
        }
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// c[m,n] = a[m,k] @ b[n,k]^T, accumulating into `c` scaled by `beta`.
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    if m == 1 || n <= 8 {
        // Single-query pointer products and low-rank adapter projections:
        // plain dots beat a packed gemm at these shapes.
        for i in 0..m {
            let ai = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let bj = &b[j * k..(j + 1) * k];
                let v = dot(ai, bj);
                let dst = &mut c[i * n + j];
                if beta == 0.0 {
                    *dst = v;
                } else {
                    *dst = beta * *dst + v;
                }
            }
        }
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// c[m,n] = a[k,m]^T @ b[k,n], accumulating into `c` scaled by `beta`.
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m <= 8 {
        // Adapter weight gradients: m output rows, each a k-long
        // strided-column dot against contiguous b rows.
        for i in 0..m {
            let ci = &mut c[i * n..(i + 1) * n];
            if beta == 0.0 {
                ci.fill(0.0);
            } else if beta != 1.0 {
                for v in ci.iter_mut() {
                    *v *= beta;
                }
            }
            for kk in 0..k {
                let scale = a[kk * m + i];
                let brow = &b[kk * n..(kk + 1) * n];
                for (cv, bv) in ci.iter_mut().zip(brow) {
                    *cv += scale * bv;
                }
            }
        }
        return;
    }
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in chunks * 4..a.len() {
        s += a[j] * b[j];
    }
    s
}
