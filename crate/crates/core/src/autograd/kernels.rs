//! Dense kernels used by the graph. Every reduction accumulates sequentially
//! in row-major order so results are bitwise reproducible on a given build.

use super::tensor::Float;

/// `out[n×m] = a[n×k] · b[k×m]`, overwriting `out`.
pub fn matmul<F: Float>(a: &[F], b: &[F], out: &mut [F], n: usize, k: usize, m: usize) {
    out.iter_mut().for_each(|v| *v = F::ZERO);
    matmul_acc(a, b, out, n, k, m);
}

/// `out[n×m] += a[n×k] · b[k×m]`.
pub fn matmul_acc<F: Float>(a: &[F], b: &[F], out: &mut [F], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::ZERO {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[n×k] += g[n×m] · b[k×m]ᵀ`.
pub fn matmul_acc_bt<F: Float>(g: &[F], b: &[F], out: &mut [F], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            out[i * k + p] += dot(grow, &b[p * m..(p + 1) * m]);
        }
    }
}

/// Dot product with eight interleaved partial sums, combined in a fixed order.
/// Not the same rounding as a left-to-right sum, but just as reproducible, and
/// it vectorizes.
pub fn dot<F: Float>(x: &[F], y: &[F]) -> F {
    let mut lanes = [F::ZERO; 8];
    let xs = x.chunks_exact(8);
    let ys = y.chunks_exact(8);
    let (xr, yr) = (xs.remainder(), ys.remainder());
    for (cx, cy) in xs.zip(ys) {
        for l in 0..8 {
            lanes[l] += cx[l] * cy[l];
        }
    }
    let mut tail = F::ZERO;
    for (&a, &b) in xr.iter().zip(yr) {
        tail += a * b;
    }
    ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7])) + tail
}

/// `out[k×m] += a[n×k]ᵀ · g[n×m]`.
pub fn matmul_acc_at<F: Float>(a: &[F], g: &[F], out: &mut [F], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::ZERO {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
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

    pub fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }

    pub fn valid(&self) -> bool {
        self.kernel > 0
            && self.stride > 0
            && self.height + 2 * self.padding >= self.kernel
            && self.width + 2 * self.padding >= self.kernel
    }
}

/// Unfolds one `C×H×W` image into a `(C·k·k) × (Ho·Wo)` column matrix.
pub fn im2col<F: Float>(img: &[F], g: &ConvGeometry, cols: &mut [F]) {
    im2col_at(img, g, cols, g.col_cols(), 0);
}

/// Like [`im2col`], but writes into a wider matrix with row length `ld`,
/// starting at column `offset`. Stacking a batch side by side this way turns
/// a per-image convolution into one large matrix product.
pub fn im2col_at<F: Float>(img: &[F], g: &ConvGeometry, cols: &mut [F], ld: usize, offset: usize) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let dst = &mut cols[row * ld + offset..row * ld + offset + ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        dst[oy * wo + ox] = if iy >= 0
                            && ix >= 0
                            && (iy as usize) < g.height
                            && (ix as usize) < g.width
                        {
                            plane[iy as usize * g.width + ix as usize]
                        } else {
                            F::ZERO
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds columns back into an image gradient.
pub fn col2im_acc<F: Float>(cols: &[F], g: &ConvGeometry, img: &mut [F]) {
    col2im_acc_at(cols, g, img, g.col_cols(), 0);
}

/// Adjoint of [`im2col_at`].
pub fn col2im_acc_at<F: Float>(cols: &[F], g: &ConvGeometry, img: &mut [F], ld: usize, offset: usize) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let k = g.kernel;
    let mut row = 0;
    for c in 0..g.in_channels {
        let plane = &mut img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..k {
            for kx in 0..k {
                let src = &cols[row * ld + offset..row * ld + offset + ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy as usize >= g.height {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix < 0 || ix as usize >= g.width {
                            continue;
                        }
                        plane[iy as usize * g.width + ix as usize] += src[oy * wo + ox];
                    }
                }
                row += 1;
            }
        }
    }
}

/// Numerically stable softmax of one row, written into `out`.
pub fn softmax_row<F: Float>(logits: &[F], out: &mut [F]) {
    let mut max = logits[0];
    for &v in &logits[1..] {
        max = max.max(v);
    }
    let mut sum = F::ZERO;
    for (o, &v) in out.iter_mut().zip(logits) {
        *o = (v - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

/// `log(sum(exp(row)))` computed stably.
pub fn log_sum_exp<F: Float>(row: &[F]) -> F {
    let mut max = row[0];
    for &v in &row[1..] {
        max = max.max(v);
    }
    let mut sum = F::ZERO;
    for &v in row {
        sum += (v - max).exp();
    }
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut out = [0.0; 4];
        matmul(&a, &b, &mut out, 2, 2, 2);
        assert_eq!(out, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeometry {
            in_channels: 2,
            height: 5,
            width: 4,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let img: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let cols_seed: Vec<f64> = (0..g.col_rows() * g.col_cols())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let mut cols = vec![0.0; cols_seed.len()];
        im2col(&img, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&cols_seed).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; img.len()];
        col2im_acc(&cols_seed, &g, &mut back);
        let rhs: f64 = back.iter().zip(&img).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
