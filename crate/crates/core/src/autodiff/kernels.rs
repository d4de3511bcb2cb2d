//! Raw numeric kernels behind the graph ops. Everything is NHWC row-major.

/// `c = a · b + beta · c` for row/column-strided operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (a.len() >= (m - 1) * rsa + (k - 1) * csa + 1));
    assert!(k == 0 || (b.len() >= (k - 1) * rsb + (n - 1) * csb + 1));
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub cin: usize,
    pub cout: usize,
    pub ksize: usize,
}

impl ConvDims {
    pub fn patch(&self) -> usize {
        self.ksize * self.ksize * self.cin
    }

    pub fn pixels(&self) -> usize {
        self.batch * self.height * self.width
    }
}

/// Valid `kx` range and first input column for output column `x`.
#[inline]
fn kx_span(x: usize, width: usize, ksize: usize) -> (usize, usize, usize) {
    let pad = ksize / 2;
    let lo = pad.saturating_sub(x);
    let hi = ksize.min(width + pad - x);
    (lo, hi, x + lo - pad)
}

/// Unfold zero-padded `ksize × ksize` neighbourhoods into rows of a
/// `(batch·H·W) × (k·k·Cin)` matrix.
pub(crate) fn im2col(input: &[f64], d: &ConvDims) -> Vec<f64> {
    let pad = d.ksize / 2;
    let patch = d.patch();
    let c = d.cin;
    let mut cols = vec![0.0; d.pixels() * patch];
    let plane = d.height * d.width * c;
    for (b, image) in input.chunks_exact(plane).enumerate().take(d.batch) {
        for y in 0..d.height {
            for x in 0..d.width {
                let row = (b * d.height + y) * d.width + x;
                let dst = &mut cols[row * patch..(row + 1) * patch];
                let (lo, hi, ix0) = kx_span(x, d.width, d.ksize);
                for ky in 0..d.ksize {
                    let Some(iy) = (y + ky).checked_sub(pad).filter(|&iy| iy < d.height) else {
                        continue;
                    };
                    let src = (iy * d.width + ix0) * c;
                    let off = (ky * d.ksize + lo) * c;
                    let n = (hi - lo) * c;
                    dst[off..off + n].copy_from_slice(&image[src..src + n]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add column gradients back onto the image.
pub(crate) fn col2im(cols: &[f64], d: &ConvDims) -> Vec<f64> {
    let pad = d.ksize / 2;
    let patch = d.patch();
    let c = d.cin;
    let plane = d.height * d.width * c;
    let mut out = vec![0.0; d.batch * plane];
    for (b, image) in out.chunks_exact_mut(plane).enumerate() {
        for y in 0..d.height {
            for x in 0..d.width {
                let row = (b * d.height + y) * d.width + x;
                let src = &cols[row * patch..(row + 1) * patch];
                let (lo, hi, ix0) = kx_span(x, d.width, d.ksize);
                for ky in 0..d.ksize {
                    let Some(iy) = (y + ky).checked_sub(pad).filter(|&iy| iy < d.height) else {
                        continue;
                    };
                    let dst = (iy * d.width + ix0) * c;
                    let off = (ky * d.ksize + lo) * c;
                    let n = (hi - lo) * c;
                    for (o, s) in image[dst..dst + n].iter_mut().zip(&src[off..off + n]) {
                        *o += s;
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv_forward(cols: &[f64], kernel: &[f64], bias: &[f64], d: &ConvDims) -> Vec<f64> {
    let rows = d.pixels();
    let mut out = Vec::with_capacity(rows * d.cout);
    for _ in 0..rows {
        out.extend_from_slice(bias);
    }
    gemm(
        rows,
        d.patch(),
        d.cout,
        cols,
        (d.patch(), 1),
        kernel,
        (d.cout, 1),
        1.0,
        &mut out,
    );
    out
}

/// Returns `(d_kernel, d_bias, d_cols)`; `d_cols` only when requested.
pub(crate) fn conv_backward(
    cols: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    d: &ConvDims,
    need_cols: bool,
) -> (Vec<f64>, Vec<f64>, Option<Vec<f64>>) {
    let rows = d.pixels();
    let patch = d.patch();
    let mut d_kernel = vec![0.0; patch * d.cout];
    gemm(
        patch,
        rows,
        d.cout,
        cols,
        (1, patch),
        grad_out,
        (d.cout, 1),
        0.0,
        &mut d_kernel,
    );
    let mut d_bias = vec![0.0; d.cout];
    for row in grad_out.chunks_exact(d.cout) {
        for (acc, g) in d_bias.iter_mut().zip(row) {
            *acc += g;
        }
    }
    let d_cols = need_cols.then(|| {
        let mut dc = vec![0.0; rows * patch];
        gemm(
            rows,
            d.cout,
            patch,
            grad_out,
            (d.cout, 1),
            kernel,
            (1, d.cout),
            0.0,
            &mut dc,
        );
        dc
    });
    (d_kernel, d_bias, d_cols)
}

/// 2×2 stride-2 max pooling. Returns values and the flat input index of
/// each window's maximum (first in row-major window order on ties).
pub(crate) fn maxpool2(
    input: &[f64],
    batch: usize,
    height: usize,
    width: usize,
    channels: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (height / 2, width / 2);
    let n = batch * oh * ow * channels;
    let mut values = Vec::with_capacity(n);
    let mut index = Vec::with_capacity(n);
    for b in 0..batch {
        let base = b * height * width * channels;
        for oy in 0..oh {
            for ox in 0..ow {
                for ch in 0..channels {
                    let mut best = base + ((2 * oy) * width + 2 * ox) * channels + ch;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let at = base + ((2 * oy + dy) * width + 2 * ox + dx) * channels + ch;
                        if input[at] > input[best] {
                            best = at;
                        }
                    }
                    values.push(input[best]);
                    index.push(best);
                }
            }
        }
    }
    (values, index)
}
