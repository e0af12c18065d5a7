//! Raw buffer kernels shared by the tape ops.

/// `c = alpha * op(a) * op(b) + beta * c` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// `a` and `b` are stored row-major in their untransposed form, so with
/// `trans_a` the buffer `a` holds a `k×m` matrix.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Shape bookkeeping for a 2-D convolution over `N×C×H×W` inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    /// Rows of the unfolded patch matrix.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Columns of the unfolded patch matrix (all output positions of the batch).
    pub fn positions(&self) -> usize {
        self.batch * self.out_height() * self.out_width()
    }
}

/// Unfolds the batch into a `patch_len × (N·OH·OW)` matrix.
pub fn im2col(x: &[f32], g: &ConvGeometry, cols: &mut [f32]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let spatial = oh * ow;
    let positions = g.positions();
    let (h, w) = (g.height as isize, g.width as isize);
    for c in 0..g.in_channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for n in 0..g.batch {
                    let src = &x[(n * g.in_channels + c) * g.height * g.width..][..g.height * g.width];
                    let out = &mut dst[n * spatial..(n + 1) * spatial];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                        let out_row = &mut out[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h {
                            out_row.fill(0.0);
                            continue;
                        }
                        let src_row = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                            *o = if ix < 0 || ix >= w { 0.0 } else { src_row[ix as usize] };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input grid.
pub fn col2im(cols: &[f32], g: &ConvGeometry, dx: &mut [f32]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let spatial = oh * ow;
    let positions = g.positions();
    let (h, w) = (g.height as isize, g.width as isize);
    for c in 0..g.in_channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let src = &cols[row * positions..(row + 1) * positions];
                for n in 0..g.batch {
                    let dst = &mut dx[(n * g.in_channels + c) * g.height * g.width..][..g.height * g.width];
                    let part = &src[n * spatial..(n + 1) * spatial];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.width..(iy as usize + 1) * g.width];
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                            if ix >= 0 && ix < w {
                                dst_row[ix as usize] += part[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f32], b: &[f32]) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_transposes_agree_with_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f32> = (0..m * k).map(|v| v as f32 * 0.1 - 0.4).collect();
        let b: Vec<f32> = (0..k * n).map(|v| (v as f32 * 0.37).sin()).collect();
        let expected = naive(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        gemm(m, k, n, &a, false, &b, false, &mut c, false);
        for (x, y) in c.iter().zip(&expected) {
            assert!((x - y).abs() < 1e-6);
        }

        let at: Vec<f32> = (0..k * m).map(|idx| a[(idx % m) * k + idx / m]).collect();
        let bt: Vec<f32> = (0..n * k).map(|idx| b[(idx % k) * n + idx / k]).collect();
        let mut c2 = vec![1.0; m * n];
        gemm(m, k, n, &at, true, &bt, true, &mut c2, true);
        for (x, y) in c2.iter().zip(&expected) {
            assert!((x - (y + 1.0)).abs() < 1e-6);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeometry {
            batch: 2,
            in_channels: 2,
            height: 5,
            width: 4,
            out_channels: 1,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let x: Vec<f32> = (0..2 * 2 * 5 * 4).map(|v| (v as f32 * 0.7).cos()).collect();
        let y: Vec<f32> = (0..g.patch_len() * g.positions())
            .map(|v| (v as f32 * 0.3).sin())
            .collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &g, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let lhs: f32 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f32 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-4, "{lhs} vs {rhs}");
    }
}
