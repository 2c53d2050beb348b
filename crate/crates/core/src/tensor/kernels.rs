//! Flat row-major matrix kernels.
//!
//! All kernels accumulate into `out` so gradient buffers can be written
//! directly. Accumulation order per output element is fixed, which keeps
//! results bitwise reproducible across runs.

/// out[m×n] += a[m×k] * b[k×n]
pub fn mm_acc(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..i * k + k];
        let out_row = &mut out[i * n..i * n + n];
        // Pairs of k-steps give the vectorizer two independent streams.
        let mut p = 0;
        while p + 1 < k {
            let a0 = a_row[p];
            let a1 = a_row[p + 1];
            let b0 = &b[p * n..p * n + n];
            let b1 = &b[(p + 1) * n..(p + 1) * n + n];
            for j in 0..n {
                out_row[j] += a0 * b0[j] + a1 * b1[j];
            }
            p += 2;
        }
        if p < k {
            let a0 = a_row[p];
            let b0 = &b[p * n..p * n + n];
            for j in 0..n {
                out_row[j] += a0 * b0[j];
            }
        }
    }
}

/// out[m×n] += a[m×k] * b[n×k]^T  (rows of `b` are the columns of the product)
pub fn mm_nt_acc(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..i * k + k];
        let out_row = &mut out[i * n..i * n + n];
        for j in 0..n {
            out_row[j] += dot(a_row, &b[j * k..j * k + k]);
        }
    }
}

/// out[k×n] += a[m×k]^T * c[m×n]
pub fn mm_tn_acc(a: &[f32], c: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..i * k + k];
        let c_row = &c[i * n..i * n + n];
        for (p, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[p * n..p * n + n];
            for j in 0..n {
                out_row[j] += av * c_row[j];
            }
        }
    }
}

/// Dot product with eight striped accumulators and a fixed reduction order.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 8;
    let mut acc = [0.0f32; 8];
    for c in 0..chunks {
        let ao = &a[c * 8..c * 8 + 8];
        let bo = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += ao[l] * bo[l];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..n {
        tail += a[i] * b[i];
    }
    let even = (acc[0] + acc[4]) + (acc[2] + acc[6]);
    let odd = (acc[1] + acc[5]) + (acc[3] + acc[7]);
    (even + odd) + tail
}

/// out += alpha * x
#[inline]
pub fn axpy(alpha: f32, x: &[f32], out: &mut [f32]) {
    debug_assert_eq!(x.len(), out.len());
    for (o, &v) in out.iter_mut().zip(x.iter()) {
        *o += alpha * v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mm_naive(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f64;
                for p in 0..k {
                    s += a[i * k + p] as f64 * b[p * n + j] as f64;
                }
                out[i * n + j] = s as f32;
            }
        }
        out
    }

    #[test]
    fn kernels_agree_with_naive_triple_loop() {
        let (m, k, n) = (5, 7, 6);
        let a: Vec<f32> = (0..m * k).map(|i| ((i * 37 % 11) as f32 - 5.0) * 0.3).collect();
        let b: Vec<f32> = (0..k * n).map(|i| ((i * 29 % 13) as f32 - 6.0) * 0.2).collect();
        let want = mm_naive(&a, &b, m, k, n);

        let mut got = vec![0.0f32; m * n];
        mm_acc(&a, &b, m, k, n, &mut got);
        for (g, w) in got.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-5, "mm_acc {g} vs {w}");
        }

        // b transposed: b_t[n×k]
        let mut b_t = vec![0.0f32; n * k];
        for p in 0..k {
            for j in 0..n {
                b_t[j * k + p] = b[p * n + j];
            }
        }
        let mut got_nt = vec![0.0f32; m * n];
        mm_nt_acc(&a, &b_t, m, k, n, &mut got_nt);
        for (g, w) in got_nt.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-5, "mm_nt_acc {g} vs {w}");
        }

        // a transposed: a_t[k×m]; mm_tn(a_t, ·) must reproduce a * b
        let mut a_t = vec![0.0f32; k * m];
        for i in 0..m {
            for p in 0..k {
                a_t[p * m + i] = a[i * k + p];
            }
        }
        let mut got_tn = vec![0.0f32; m * n];
        mm_tn_acc(&a_t, &b, k, m, n, &mut got_tn);
        for (g, w) in got_tn.iter().zip(want.iter()) {
            assert!((g - w).abs() < 1e-5, "mm_tn_acc {g} vs {w}");
        }
    }

    #[test]
    #[ignore] // throughput probe, run manually with --nocapture
    fn matmul_throughput() {
        let sizes = [(2048, 64, 64), (2048, 64, 128), (512, 512, 512)];
        for (m, k, n) in sizes {
            let a = vec![0.5f32; m * k];
            let b = vec![0.25f32; k * n];
            let mut out = vec![0.0f32; m * n];
            let reps = (2e9 / (2.0 * (m * k * n) as f64)).ceil() as usize;
            let t0 = std::time::Instant::now();
            for _ in 0..reps {
                out.iter_mut().for_each(|v| *v = 0.0);
                mm_acc(&a, &b, m, k, n, &mut out);
            }
            let dt = t0.elapsed().as_secs_f64();
            let gflops = 2.0 * (m * k * n) as f64 * reps as f64 / dt / 1e9;
            println!("mm_acc   {m}x{k}x{n}: {gflops:.2} GFLOP/s");

            let bt = vec![0.25f32; n * k];
            let t0 = std::time::Instant::now();
            for _ in 0..reps {
                out.iter_mut().for_each(|v| *v = 0.0);
                mm_nt_acc(&a, &bt, m, k, n, &mut out);
            }
            let dt = t0.elapsed().as_secs_f64();
            let gflops = 2.0 * (m * k * n) as f64 * reps as f64 / dt / 1e9;
            println!("mm_nt_acc {m}x{k}x{n}: {gflops:.2} GFLOP/s");
        }
    }
}
