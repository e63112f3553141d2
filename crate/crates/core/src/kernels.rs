//! Low-level numeric kernels shared by the differentiable ops.
//!
//! Matrix products go through `matrixmultiply`. Large row-major products are
//! split into fixed-size row blocks and evaluated on the rayon pool; each
//! output row is computed by the same instruction sequence regardless of the
//! split, so results do not depend on the thread count.

use rayon::prelude::*;

/// Rows per parallel block. Fixed so the partition never depends on the pool size.
const ROW_BLOCK: usize = 64;
/// Below this many multiply-adds a product is evaluated inline.
const PAR_MIN_WORK: usize = 1 << 18;
/// Products this small skip packing and run as plain loops.
const SMALL_WORK: usize = 4096;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Strides {
    pub rs: usize,
    pub cs: usize,
}

impl Strides {
    pub const fn row_major(cols: usize) -> Self {
        Self { rs: cols, cs: 1 }
    }

    /// Strides that read a row-major `rows × cols` buffer as its transpose.
    pub const fn transposed(cols: usize) -> Self {
        Self { rs: 1, cs: cols }
    }
}

fn extent(rows: usize, cols: usize, s: Strides) -> usize {
    (rows - 1) * s.rs + (cols - 1) * s.cs + 1
}

/// `C[m×n] = alpha · A[m×k] · B[k×n] + beta · C`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    beta: f64,
    c: &mut [f64],
    sc: Strides,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let v = &mut c[i * sc.rs + j * sc.cs];
                *v *= beta;
            }
        }
        return;
    }
    assert!(extent(m, k, sa) <= a.len(), "gemm: A out of bounds");
    assert!(extent(k, n, sb) <= b.len(), "gemm: B out of bounds");
    assert!(extent(m, n, sc) <= c.len(), "gemm: C out of bounds");

    if m * k * n <= SMALL_WORK {
        small_gemm(m, k, n, alpha, a, sa, b, sb, beta, c, sc);
        return;
    }

    let contiguous = sc.cs == 1 && sc.rs == n;
    if contiguous && m > ROW_BLOCK && m * k * n >= PAR_MIN_WORK && rayon::current_num_threads() > 1 {
        c[..m * n]
            .par_chunks_mut(ROW_BLOCK * n)
            .enumerate()
            .for_each(|(blk, c_blk)| {
                let i0 = blk * ROW_BLOCK;
                let rows = c_blk.len() / n;
                // SAFETY: bounds were checked above for the full product; the
                // block reads rows i0..i0+rows of A and writes its own C rows.
                unsafe {
                    matrixmultiply::dgemm(
                        rows,
                        k,
                        n,
                        alpha,
                        a.as_ptr().add(i0 * sa.rs),
                        sa.rs as isize,
                        sa.cs as isize,
                        b.as_ptr(),
                        sb.rs as isize,
                        sb.cs as isize,
                        beta,
                        c_blk.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            });
        return;
    }

    // SAFETY: all three operands were bounds-checked against their strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            sa.rs as isize,
            sa.cs as isize,
            b.as_ptr(),
            sb.rs as isize,
            sb.cs as isize,
            beta,
            c.as_mut_ptr(),
            sc.rs as isize,
            sc.cs as isize,
        );
    }
}

/// Plain loops for tiny products. Contiguous `B` rows are accumulated into
/// output rows with axpy sweeps, contiguous `A` rows against contiguous `B`
/// columns use dot products, and anything else packs `B` first.
#[allow(clippy::too_many_arguments)]
fn small_gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    sa: Strides,
    b: &[f64],
    sb: Strides,
    beta: f64,
    c: &mut [f64],
    sc: Strides,
) {
    if sc.cs == 1 && sb.cs == 1 {
        for i in 0..m {
            let row = &mut c[i * sc.rs..i * sc.rs + n];
            if beta == 0.0 {
                row.fill(0.0);
            } else if beta != 1.0 {
                row.iter_mut().for_each(|v| *v *= beta);
            }
            for p in 0..k {
                let aip = alpha * a[i * sa.rs + p * sa.cs];
                for (r, &bv) in row.iter_mut().zip(&b[p * sb.rs..p * sb.rs + n]) {
                    *r += aip * bv;
                }
            }
        }
    } else if sa.cs == 1 && sb.rs == 1 {
        for i in 0..m {
            let ar = &a[i * sa.rs..i * sa.rs + k];
            for j in 0..n {
                let bc = &b[j * sb.cs..j * sb.cs + k];
                let acc: f64 = ar.iter().zip(bc).map(|(x, y)| x * y).sum();
                let dst = &mut c[i * sc.rs + j * sc.cs];
                *dst = if beta == 0.0 { alpha * acc } else { alpha * acc + beta * *dst };
            }
        }
    } else {
        let mut bp = Vec::with_capacity(k * n);
        for p in 0..k {
            bp.extend((0..n).map(|j| b[p * sb.rs + j * sb.cs]));
        }
        let mut row = vec![0.0; n];
        for i in 0..m {
            row.fill(0.0);
            for p in 0..k {
                let aip = a[i * sa.rs + p * sa.cs];
                for (r, &bv) in row.iter_mut().zip(&bp[p * n..(p + 1) * n]) {
                    *r += aip * bv;
                }
            }
            for (j, &acc) in row.iter().enumerate() {
                let dst = &mut c[i * sc.rs + j * sc.cs];
                *dst = if beta == 0.0 { alpha * acc } else { alpha * acc + beta * *dst };
            }
        }
    }
}

/// Calls `f(index, chunk)` for consecutive `size`-element chunks of `data`,
/// on the rayon pool when it has more than one thread. Chunks are
/// independent, so the result does not depend on the schedule.
pub(crate) fn for_each_chunk(data: &mut [f64], size: usize, f: impl Fn(usize, &mut [f64]) + Sync + Send) {
    if rayon::current_num_threads() > 1 {
        data.par_chunks_mut(size).enumerate().for_each(|(i, c)| f(i, c));
    } else {
        data.chunks_mut(size).enumerate().for_each(|(i, c)| f(i, c));
    }
}

/// Unrolls a channel-last batch `x[n, len, cin]` into rows of zero-padded
/// patches, `cols[n·len, kernel·cin]` with column index `tap·cin + channel`.
pub(crate) fn im2col(x: &[f64], n: usize, len: usize, cin: usize, kernel: usize) -> Vec<f64> {
    let pad = (kernel - 1) / 2;
    let width = kernel * cin;
    let mut cols = vec![0.0; n * len * width];
    for s in 0..n {
        let xs = &x[s * len * cin..(s + 1) * len * cin];
        for pos in 0..len {
            let row = &mut cols[(s * len + pos) * width..(s * len + pos + 1) * width];
            for tap in 0..kernel {
                let src = pos + tap;
                if src < pad || src - pad >= len {
                    continue;
                }
                let src = src - pad;
                row[tap * cin..(tap + 1) * cin].copy_from_slice(&xs[src * cin..(src + 1) * cin]);
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto `dx[n, len, cin]`.
pub(crate) fn col2im_add(dcols: &[f64], n: usize, len: usize, cin: usize, kernel: usize, dx: &mut [f64]) {
    let pad = (kernel - 1) / 2;
    let width = kernel * cin;
    for s in 0..n {
        let dxs = &mut dx[s * len * cin..(s + 1) * len * cin];
        for pos in 0..len {
            let row = &dcols[(s * len + pos) * width..(s * len + pos + 1) * width];
            for tap in 0..kernel {
                let src = pos + tap;
                if src < pad || src - pad >= len {
                    continue;
                }
                let src = src - pad;
                for (d, g) in dxs[src * cin..(src + 1) * cin]
                    .iter_mut()
                    .zip(&row[tap * cin..(tap + 1) * cin])
                {
                    *d += g;
                }
            }
        }
    }
}

/// Reorders a `[cout, cin, kernel]` weight into the `[kernel·cin, cout]`
/// matrix that multiplies [`im2col`] rows.
pub(crate) fn conv_weight_matrix(w: &[f64], cout: usize, cin: usize, kernel: usize) -> Vec<f64> {
    let mut m = vec![0.0; kernel * cin * cout];
    for o in 0..cout {
        for i in 0..cin {
            for tap in 0..kernel {
                m[(tap * cin + i) * cout + o] = w[(o * cin + i) * kernel + tap];
            }
        }
    }
    m
}

/// Inverse of [`conv_weight_matrix`], accumulating into `dw`.
pub(crate) fn conv_weight_matrix_add_back(m: &[f64], cout: usize, cin: usize, kernel: usize, dw: &mut [f64]) {
    for o in 0..cout {
        for i in 0..cin {
            for tap in 0..kernel {
                dw[(o * cin + i) * kernel + tap] += m[(tap * cin + i) * cout + o];
            }
        }
    }
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    strides
}

/// Materializes `x` (row-major, `shape`) with its axes reordered so that
/// output axis `d` is input axis `axes[d]`.
pub(crate) fn permute(x: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    if rank == 0 {
        return x.to_vec();
    }
    let in_strides = row_major_strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let inner = out_shape[rank - 1];
    let inner_stride = strides[rank - 1];
    let outer: usize = out_shape[..rank - 1].iter().product();

    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; rank - 1];
    let mut base = 0usize;
    for _ in 0..outer {
        if inner_stride == 1 {
            out.extend_from_slice(&x[base..base + inner]);
        } else {
            out.extend((0..inner).map(|j| x[base + j * inner_stride]));
        }
        // odometer over the outer axes
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            base += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

pub(crate) fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (d, &a) in axes.iter().enumerate() {
        inv[a] = d;
    }
    inv
}
