//! Dense row-major tensors and the matrix kernels behind every layer.
//!
//! Parallelism lives only inside the matmul kernels: output rows (or column
//! chunks for single-row products) are computed independently, each with a
//! fixed sequential reduction order, so results are bit-identical no matter
//! how many threads run. `SMALIBERT_THREADS` caps the pool size.

use std::sync::OnceLock;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::zero(); len],
        }
    }

    pub fn filled(shape: &[usize], value: S) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                expect,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
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

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    /// The two dimensions of a rank-2 tensor.
    pub fn dims2(&self) -> (usize, usize) {
        assert_eq!(self.shape.len(), 2, "expected rank-2 tensor");
        (self.shape[0], self.shape[1])
    }

    pub fn row(&self, i: usize) -> &[S] {
        let (_, cols) = self.dims2();
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        let (_, cols) = self.dims2();
        &mut self.data[i * cols..(i + 1) * cols]
    }

    pub fn fill(&mut self, v: S) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn scale(&mut self, v: S) {
        self.data.iter_mut().for_each(|x| *x *= v);
    }

    pub fn add_assign(&mut self, other: &Tensor<S>) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn add(&self, other: &Tensor<S>) -> Tensor<S> {
        let mut out = self.clone();
        out.add_assign(other);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Debug-build guard against NaN/Inf leaking out of an op.
    #[inline]
    pub fn debug_check_finite(&self, context: &str) {
        #[cfg(debug_assertions)]
        {
            assert!(self.is_finite(), "non-finite value in {context}");
        }
        #[cfg(not(debug_assertions))]
        {
            let _ = context;
        }
    }

    pub fn convert<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| T::from_f64(x.into_f64())).collect(),
        }
    }
}

fn pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        let threads = std::env::var("SMALIBERT_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n > 0)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("thread pool")
    })
}

// Below this many multiply-accumulates the dispatch overhead dominates.
const PAR_THRESHOLD: usize = 1 << 21;

/// C[m,n] = A[m,k] x B[k,n].
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (m, k) = a.dims2();
    let (kb, n) = b.dims2();
    assert_eq!(k, kb, "matmul inner dimension mismatch");
    let mut out = Tensor::zeros(&[m, n]);
    let work = m * k * n;
    if work >= PAR_THRESHOLD && m >= 8 {
        pool().install(|| {
            out.data
                .par_chunks_mut(4 * n)
                .enumerate()
                .for_each(|(g, out_rows)| {
                    let i = g * 4;
                    let rows = out_rows.len() / n;
                    mm_block(&a.data[i * k..(i + rows) * k], k, b.data(), n, out_rows);
                });
        });
    } else if work >= PAR_THRESHOLD && m == 1 {
        // Single output row: split it into column chunks instead.
        let chunk = n.div_ceil(pool().current_num_threads().max(1));
        let b_data = b.data();
        let a_row = a.row(0);
        pool().install(|| {
            out.data
                .par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(ci, out_chunk)| {
                    let start = ci * chunk;
                    for (l, &av) in a_row.iter().enumerate() {
                        let b_row = &b_data[l * n + start..l * n + start + out_chunk.len()];
                        for (o, &bv) in out_chunk.iter_mut().zip(b_row) {
                            *o += av * bv;
                        }
                    }
                });
        });
    } else {
        for (i, out_rows) in out.data.chunks_mut(4 * n).enumerate() {
            let rows = out_rows.len() / n;
            mm_block(&a.data[i * 4 * k..(i * 4 + rows) * k], k, b.data(), n, out_rows);
        }
    }
    out
}

/// Up to four output rows per pass so each B row is loaded once for four
/// accumulator streams. Every output element keeps the sequential k order,
/// so results are bit-identical to the single-row kernel.
#[inline]
fn mm_block<S: Scalar>(a_rows: &[S], k: usize, b_data: &[S], n: usize, out_rows: &mut [S]) {
    let rows = out_rows.len() / n;
    match rows {
        4 => {
            let (o0, rest) = out_rows.split_at_mut(n);
            let (o1, rest) = rest.split_at_mut(n);
            let (o2, o3) = rest.split_at_mut(n);
            for l in 0..k {
                let a0 = a_rows[l];
                let a1 = a_rows[k + l];
                let a2 = a_rows[2 * k + l];
                let a3 = a_rows[3 * k + l];
                let b_row = &b_data[l * n..(l + 1) * n];
                for (((( &bv, y0), y1), y2), y3) in b_row
                    .iter()
                    .zip(o0.iter_mut())
                    .zip(o1.iter_mut())
                    .zip(o2.iter_mut())
                    .zip(o3.iter_mut())
                {
                    *y0 += a0 * bv;
                    *y1 += a1 * bv;
                    *y2 += a2 * bv;
                    *y3 += a3 * bv;
                }
            }
        }
        _ => {
            for (r, out_row) in out_rows.chunks_mut(n).enumerate() {
                mm_row(&a_rows[r * k..(r + 1) * k], b_data, n, out_row);
            }
        }
    }
}

#[inline]
fn mm_row<S: Scalar>(a_row: &[S], b_data: &[S], n: usize, out_row: &mut [S]) {
    for (l, &av) in a_row.iter().enumerate() {
        let b_row = &b_data[l * n..(l + 1) * n];
        for (o, &bv) in out_row.iter_mut().zip(b_row) {
            *o += av * bv;
        }
    }
}

/// C[m,n] = A[m,k] x B[n,k]^T. Both operands are scanned row-contiguously.
pub fn matmul_bt<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (m, k) = a.dims2();
    let (n, kb) = b.dims2();
    assert_eq!(k, kb, "matmul_bt inner dimension mismatch");
    let mut out = Tensor::zeros(&[m, n]);
    let run = |i: usize, out_row: &mut [S]| {
        let a_row = a.row(i);
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = b.row(j);
            let mut acc = S::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            *o = acc;
        }
    };
    if m * k * n >= PAR_THRESHOLD && m >= 2 {
        pool().install(|| {
            out.data
                .par_chunks_mut(n)
                .enumerate()
                .for_each(|(i, out_row)| run(i, out_row));
        });
    } else {
        for (i, out_row) in out.data.chunks_mut(n).enumerate() {
            run(i, out_row);
        }
    }
    out
}

/// C[m,n] = A[k,m]^T x B[k,n].
pub fn matmul_at<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (k, m) = a.dims2();
    let (kb, n) = b.dims2();
    assert_eq!(k, kb, "matmul_at inner dimension mismatch");
    let mut out = Tensor::zeros(&[m, n]);
    let a_data = a.data();
    let b_data = b.data();
    let run_block = |i: usize, out_rows: &mut [S]| {
        let rows = out_rows.len() / n;
        if rows == 4 {
            let (o0, rest) = out_rows.split_at_mut(n);
            let (o1, rest) = rest.split_at_mut(n);
            let (o2, o3) = rest.split_at_mut(n);
            for l in 0..k {
                let a0 = a_data[l * m + i];
                let a1 = a_data[l * m + i + 1];
                let a2 = a_data[l * m + i + 2];
                let a3 = a_data[l * m + i + 3];
                let b_row = &b_data[l * n..(l + 1) * n];
                for (((( &bv, y0), y1), y2), y3) in b_row
                    .iter()
                    .zip(o0.iter_mut())
                    .zip(o1.iter_mut())
                    .zip(o2.iter_mut())
                    .zip(o3.iter_mut())
                {
                    *y0 += a0 * bv;
                    *y1 += a1 * bv;
                    *y2 += a2 * bv;
                    *y3 += a3 * bv;
                }
            }
        } else {
            for (r, out_row) in out_rows.chunks_mut(n).enumerate() {
                for l in 0..k {
                    let av = a_data[l * m + i + r];
                    let b_row = &b_data[l * n..(l + 1) * n];
                    for (o, &bv) in out_row.iter_mut().zip(b_row) {
                        *o += av * bv;
                    }
                }
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m >= 8 {
        pool().install(|| {
            out.data
                .par_chunks_mut(4 * n)
                .enumerate()
                .for_each(|(g, out_rows)| run_block(g * 4, out_rows));
        });
    } else {
        for (g, out_rows) in out.data.chunks_mut(4 * n).enumerate() {
            run_block(g * 4, out_rows);
        }
    }
    out
}
