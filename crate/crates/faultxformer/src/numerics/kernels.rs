//! Dense f64 matrix kernels used by the tape.
//!
//! All matrices are row-major slices. The multiply accumulates two output
//! rows per pass over B, which keeps the inner loop vectorizable and roughly
//! doubles throughput over the textbook triple loop on the shapes this
//! workload hits (tall-skinny activations times small weight matrices).

/// out[m,n] += a[m,k] * b[k,n]
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let mut i = 0;
    while i + 2 <= m {
        let a0 = &a[i * k..(i + 1) * k];
        let a1 = &a[(i + 1) * k..(i + 2) * k];
        let (row0, row1) = out[i * n..(i + 2) * n].split_at_mut(n);
        for p in 0..k {
            let x0 = a0[p];
            let x1 = a1[p];
            let brow = &b[p * n..(p + 1) * n];
            for ((o0, o1), &bv) in row0.iter_mut().zip(row1.iter_mut()).zip(brow.iter()) {
                *o0 += x0 * bv;
                *o1 += x1 * bv;
            }
        }
        i += 2;
    }
    if i < m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += aip * bv;
            }
        }
    }
}

/// out[m,n] = a[m,k] * b[k,n]
pub fn matmul(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    out.iter_mut().for_each(|v| *v = 0.0);
    matmul_acc(a, b, out, m, k, n);
}

/// Transpose a row-major [rows, cols] matrix into `out` ([cols, rows]).
pub fn transpose(a: &[f64], out: &mut [f64], rows: usize, cols: usize) {
    debug_assert_eq!(a.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for r in 0..rows {
        let arow = &a[r * cols..(r + 1) * cols];
        for (c, &v) in arow.iter().enumerate() {
            out[c * rows + r] = v;
        }
    }
}
