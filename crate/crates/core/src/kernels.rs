//! Raw numeric kernels on row-major slices.
//!
//! These are the hot loops behind the autograd ops. They parallelise over
//! independent output rows or channels through [`crate::par`].

use crate::par;

/// Below this many multiply-adds a gemm runs on the calling thread.
const PAR_GEMM_MIN_WORK: usize = 1 << 16;

/// `C = alpha * op(A) * op(B) + beta * C` where `C` is `[m, n]`.
///
/// `A` is `[m, k]` (or `[k, m]` when `a_trans`), `B` is `[k, n]` (or `[n, k]`
/// when `b_trans`). All buffers are dense row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: A has wrong length");
    assert_eq!(b.len(), k * n, "gemm: B has wrong length");
    assert_eq!(c.len(), m * n, "gemm: C has wrong length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };

    let rows_per_chunk = if m * n * k < PAR_GEMM_MIN_WORK || !par::is_parallel() {
        m
    } else {
        // Aim for a handful of chunks per thread without splitting tiny rows.
        let target = (m * n * k / PAR_GEMM_MIN_WORK).clamp(1, 64);
        m.div_ceil(target).max(1)
    };
    par::for_each_chunk(c, rows_per_chunk * n, |chunk_idx, c_chunk| {
        let r0 = chunk_idx * rows_per_chunk;
        let rows = c_chunk.len() / n;
        let a_off = &a[r0 * rsa..];
        // SAFETY: `a_off` covers rows r0..r0+rows of op(A) with strides
        // (rsa, csa) inside `a`; `b` is k x n under (rsb, csb); `c_chunk` is
        // rows x n row-major and exclusively borrowed.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                alpha,
                a_off.as_ptr(),
                rsa as isize,
                csa as isize,
                b.as_ptr(),
                rsb as isize,
                csb as isize,
                beta,
                c_chunk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

/// Same-padded 3x3 depthwise convolution, one filter per channel.
///
/// `x` is `[C, H, W]`, `w` is `[C, 9]`, `bias` is `[C]`.
pub fn dwconv3x3(x: &[f64], w: &[f64], bias: &[f64], c: usize, h: usize, wd: usize) -> Vec<f64> {
    let plane = h * wd;
    let mut out = vec![0.0; c * plane];
    par::for_each_chunk(&mut out, plane, |ch, dst| {
        let src = &x[ch * plane..(ch + 1) * plane];
        let k = &w[ch * 9..ch * 9 + 9];
        dst.iter_mut().for_each(|v| *v = bias[ch]);
        depthwise_accumulate(src, k, dst, h, wd, false);
    });
    out
}

/// Gradient of [`dwconv3x3`] w.r.t. its input: correlation with the flipped kernel.
pub fn dwconv3x3_grad_input(gy: &[f64], w: &[f64], c: usize, h: usize, wd: usize) -> Vec<f64> {
    let plane = h * wd;
    let mut out = vec![0.0; c * plane];
    par::for_each_chunk(&mut out, plane, |ch, dst| {
        let src = &gy[ch * plane..(ch + 1) * plane];
        let k = &w[ch * 9..ch * 9 + 9];
        depthwise_accumulate(src, k, dst, h, wd, true);
    });
    out
}

/// Gradients of [`dwconv3x3`] w.r.t. weights `[C, 9]` and bias `[C]`.
pub fn dwconv3x3_grad_params(
    x: &[f64],
    gy: &[f64],
    c: usize,
    h: usize,
    wd: usize,
) -> (Vec<f64>, Vec<f64>) {
    let plane = h * wd;
    let mut gw = vec![0.0; c * 10];
    par::for_each_chunk(&mut gw, 10, |ch, dst| {
        let xs = &x[ch * plane..(ch + 1) * plane];
        let gs = &gy[ch * plane..(ch + 1) * plane];
        for ky in 0..3 {
            for kx in 0..3 {
                let (dy, dx) = (ky as isize - 1, kx as isize - 1);
                let mut acc = 0.0;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let (x0, x1) = valid_span(dx, wd);
                    let grow = &gs[y * wd + x0..y * wd + x1];
                    let start = sy as usize * wd;
                    let xrow = &xs[(start as isize + x0 as isize + dx) as usize
                        ..(start as isize + x1 as isize + dx) as usize];
                    acc += grow.iter().zip(xrow).map(|(g, v)| g * v).sum::<f64>();
                }
                dst[ky * 3 + kx] = acc;
            }
        }
        dst[9] = gs.iter().sum();
    });
    let mut gb = Vec::with_capacity(c);
    let mut gk = Vec::with_capacity(c * 9);
    for ch in gw.chunks(10) {
        gk.extend_from_slice(&ch[..9]);
        gb.push(ch[9]);
    }
    (gk, gb)
}

/// Output columns `x` for which `x + dx` is inside `0..w`.
fn valid_span(dx: isize, w: usize) -> (usize, usize) {
    let x0 = (-dx).max(0) as usize;
    let x1 = (w as isize - dx.max(0)).max(0) as usize;
    (x0.min(w), x1.max(x0.min(w)))
}

/// `dst[y, x] += sum_k k[ky, kx] * src[y + ky - 1, x + kx - 1]` with zero padding.
/// With `flip` the kernel is rotated by 180 degrees (adjoint of the forward pass).
fn depthwise_accumulate(src: &[f64], k: &[f64], dst: &mut [f64], h: usize, w: usize, flip: bool) {
    for ky in 0..3 {
        for kx in 0..3 {
            let kv = if flip { k[8 - (ky * 3 + kx)] } else { k[ky * 3 + kx] };
            if kv == 0.0 {
                continue;
            }
            let (dy, dx) = (ky as isize - 1, kx as isize - 1);
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                let (x0, x1) = valid_span(dx, w);
                let srow = sy as usize * w;
                let drow = &mut dst[y * w + x0..y * w + x1];
                let s = &src[(srow as isize + x0 as isize + dx) as usize
                    ..(srow as isize + x1 as isize + dx) as usize];
                for (d, v) in drow.iter_mut().zip(s) {
                    *d += kv * v;
                }
            }
        }
    }
}

/// Unfolds same-padded 3x3 neighbourhoods: `[C, H, W] -> [C * 9, H * W]`.
pub fn im2col3x3(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let plane = h * w;
    let mut cols = vec![0.0; c * 9 * plane];
    par::for_each_chunk(&mut cols, 9 * plane, |ch, dst| {
        let src = &x[ch * plane..(ch + 1) * plane];
        for kk in 0..9 {
            let (dy, dx) = (kk as isize / 3 - 1, kk as isize % 3 - 1);
            let row = &mut dst[kk * plane..(kk + 1) * plane];
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                let (x0, x1) = valid_span(dx, w);
                let srow = sy as usize * w;
                row[y * w + x0..y * w + x1].copy_from_slice(
                    &src[(srow as isize + x0 as isize + dx) as usize
                        ..(srow as isize + x1 as isize + dx) as usize],
                );
            }
        }
    });
    cols
}

/// Adjoint of [`im2col3x3`]: folds `[C * 9, H * W]` columns back onto `[C, H, W]`.
pub fn col2im3x3(cols: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let plane = h * w;
    let mut out = vec![0.0; c * plane];
    par::for_each_chunk(&mut out, plane, |ch, dst| {
        let src = &cols[ch * 9 * plane..(ch + 1) * 9 * plane];
        for kk in 0..9 {
            let (dy, dx) = (kk as isize / 3 - 1, kk as isize % 3 - 1);
            let row = &src[kk * plane..(kk + 1) * plane];
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                let (x0, x1) = valid_span(dx, w);
                let drow = sy as usize * w;
                let d = &mut dst[(drow as isize + x0 as isize + dx) as usize
                    ..(drow as isize + x1 as isize + dx) as usize];
                for (o, v) in d.iter_mut().zip(&row[y * w + x0..y * w + x1]) {
                    *o += v;
                }
            }
        }
    });
    out
}
