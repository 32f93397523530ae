use std::sync::atomic::{AtomicU8, Ordering};

/// Arithmetic width used inside the matrix kernels.
///
/// Everything outside the GEMM calls stays in 64-bit; `F32` only narrows the
/// products and accumulations of matmul and convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

static DEFAULT_PRECISION: AtomicU8 = AtomicU8::new(0);

/// Sets the precision picked up by tapes created afterwards.
pub fn set_default_precision(p: Precision) {
    DEFAULT_PRECISION.store(p as u8, Ordering::Relaxed);
}

pub fn default_precision() -> Precision {
    match DEFAULT_PRECISION.load(Ordering::Relaxed) {
        1 => Precision::F32,
        _ => Precision::F64,
    }
}

/// Strided matrix view: element (i, j) lives at `data[i * rs + j * cs]`.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    pub fn row_major(data: &'a [f64], cols: usize) -> Self {
        View {
            data,
            rs: cols,
            cs: 1,
        }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        View {
            data,
            rs: 1,
            cs: cols,
        }
    }
}

/// c (m×n, row stride `ldc`) = a (m×k) · b (k×n) + beta · c
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    prec: Precision,
    m: usize,
    k: usize,
    n: usize,
    a: View<'_>,
    b: View<'_>,
    beta: f64,
    c: &mut [f64],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(ldc >= n && c.len() >= (m - 1) * ldc + n);
    if k == 0 {
        for i in 0..m {
            c[i * ldc..i * ldc + n].iter_mut().for_each(|x| *x *= beta);
        }
        return;
    }
    check_view(&a, m, k);
    check_view(&b, k, n);
    match prec {
        Precision::F64 => unsafe {
            // SAFETY: bounds of both views were checked above and `c` holds m×n.
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data.as_ptr(),
                a.rs as isize,
                a.cs as isize,
                b.data.as_ptr(),
                b.rs as isize,
                b.cs as isize,
                beta,
                c.as_mut_ptr(),
                ldc as isize,
                1,
            )
        },
        Precision::F32 => {
            let a32 = pack_f32(&a, m, k);
            let b32 = pack_f32(&b, k, n);
            let mut c32 = vec![0f32; m * n];
            unsafe {
                // SAFETY: packed buffers are dense row-major with the stated extents.
                matrixmultiply::sgemm(
                    m,
                    k,
                    n,
                    1.0,
                    a32.as_ptr(),
                    k as isize,
                    1,
                    b32.as_ptr(),
                    n as isize,
                    1,
                    0.0,
                    c32.as_mut_ptr(),
                    n as isize,
                    1,
                )
            }
            for i in 0..m {
                for (dst, &v) in c[i * ldc..i * ldc + n].iter_mut().zip(&c32[i * n..(i + 1) * n]) {
                    *dst = beta * *dst + v as f64;
                }
            }
        }
    }
}

fn check_view(v: &View<'_>, rows: usize, cols: usize) {
    let last = (rows - 1) * v.rs + (cols - 1) * v.cs;
    assert!(last < v.data.len(), "matrix view out of bounds");
}

fn pack_f32(v: &View<'_>, rows: usize, cols: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            out.push(v.data[i * v.rs + j * v.cs] as f32);
        }
    }
    out
}
