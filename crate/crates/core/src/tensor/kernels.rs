// Matrix-product kernels. Each output row is produced by exactly one thread
// with a fixed summation order, so results do not depend on the schedule.

use rayon::prelude::*;

const PAR_THRESHOLD: usize = 1 << 16;

fn rows_mut<F>(out: &mut [f64], width: usize, work: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if width == 0 {
        return;
    }
    if work >= PAR_THRESHOLD {
        out.par_chunks_mut(width)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    } else {
        out.chunks_mut(width)
            .enumerate()
            .for_each(|(i, row)| f(i, row));
    }
}

/// `a[m×k] · b[k×n]`
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    rows_mut(&mut out, n, m * k * n, |i, row| axpy_row(&a[i * k..(i + 1) * k], b, row));
    out
}

/// `row += Σ_p arow[p] · b[p, :]`, accumulated in increasing `p`.
fn axpy_row(arow: &[f64], b: &[f64], row: &mut [f64]) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the CPU supports AVX2, checked just above.
            unsafe { axpy_row_avx2(arow, b, row) };
            return;
        }
    }
    axpy_row_generic(arow, b, row);
}

// Wider vectors only; no FMA, so every element sees the same multiply and add
// sequence as the generic path and results are bit-identical.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn axpy_row_avx2(arow: &[f64], b: &[f64], row: &mut [f64]) {
    axpy_row_generic(arow, b, row);
}

#[inline(always)]
fn axpy_row_generic(arow: &[f64], b: &[f64], row: &mut [f64]) {
    let n = row.len();
    for (p, &av) in arow.iter().enumerate() {
        if av == 0.0 {
            continue;
        }
        let brow = &b[p * n..(p + 1) * n];
        for (o, &bv) in row.iter_mut().zip(brow) {
            *o += av * bv;
        }
    }
}

/// `a[m×k] · b[n×k]ᵀ`
pub(crate) fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    matmul(a, &transpose(b, n, k), m, k, n)
}

/// `a[k×m]ᵀ · b[k×n]`
pub(crate) fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    matmul(&transpose(a, k, m), b, m, k, n)
}

/// Transpose of a row-major `r×c` matrix.
pub(crate) fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (i, row) in x.chunks_exact(c.max(1)).enumerate().take(r) {
        for (j, &v) in row.iter().enumerate() {
            out[j * r + i] = v;
        }
    }
    out
}

/// Strides of a row-major shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Copies `data` (laid out as `shape`) into the axis order `perm`.
pub(crate) fn permute(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let numel = data.len();
    let mut out = Vec::with_capacity(numel);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..numel {
        out.push(data[offset]);
        // odometer increment over the output index
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}
