//! Row-major dense kernels shared by the tape ops.
//!
//! All kernels accumulate into `out`, so callers zero it first when they
//! want a plain product. Loop order is fixed, which keeps every result
//! independent of how many rows are processed together.

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[k×n] += aᵀ · b` with `a[m×k]`, `b[m×n]`.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×k] += a · bᵀ` with `a[m×n]`, `b[k×n]`.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * k);
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * k + p] += acc;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding.0 - self.kernel.0) / self.stride.0 + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding.1 - self.kernel.1) / self.stride.1 + 1
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel.0 * self.kernel.1
    }

    /// Source pixel for output position `(oy, ox)` and kernel tap `(ky, kx)`,
    /// or `None` when it falls in the zero padding.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride.0 + ky).checked_sub(self.padding.0)?;
        let x = (ox * self.stride.1 + kx).checked_sub(self.padding.1)?;
        (y < self.height && x < self.width).then_some((y, x))
    }
}

/// Unfolds one `[C, H, W]` image into `[C·kh·kw, Ho·Wo]` columns.
pub(crate) fn im2col(image: &[f64], g: &ConvGeometry, cols: &mut [f64]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let positions = ho * wo;
    debug_assert_eq!(cols.len(), g.patch_len() * positions);
    let (kh, kw) = g.kernel;
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..ho {
                    for ox in 0..wo {
                        dst[oy * wo + ox] = match g.source(oy, ox, ky, kx) {
                            Some((y, x)) => plane[y * g.width + x],
                            None => 0.0,
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeometry, image: &mut [f64]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let positions = ho * wo;
    let (kh, kw) = g.kernel;
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let src = &cols[row * positions..(row + 1) * positions];
                for oy in 0..ho {
                    for ox in 0..wo {
                        if let Some((y, x)) = g.source(oy, ox, ky, kx) {
                            plane[y * g.width + x] += src[oy * wo + ox];
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

    #[test]
    fn transposed_kernels_agree_with_plain_gemm() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.5).collect(); // 2×3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3×4
        let mut plain = vec![0.0; 8];
        gemm(&a, &b, &mut plain, 2, 3, 4);

        let mut at = vec![0.0; 6]; // 3×2
        for i in 0..2 {
            for j in 0..3 {
                at[j * 2 + i] = a[i * 3 + j];
            }
        }
        let mut via_tn = vec![0.0; 8];
        gemm_tn(&at, &b, &mut via_tn, 3, 2, 4);
        assert_eq!(plain, via_tn);

        let mut bt = vec![0.0; 12]; // 4×3
        for i in 0..3 {
            for j in 0..4 {
                bt[j * 3 + i] = b[i * 4 + j];
            }
        }
        let mut via_nt = vec![0.0; 8];
        gemm_nt(&a, &bt, &mut via_nt, 2, 3, 4);
        for (x, y) in plain.iter().zip(&via_nt) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn im2col_and_col2im_are_adjoint() {
        let g = ConvGeometry {
            channels: 2,
            height: 5,
            width: 4,
            kernel: (3, 3),
            stride: (2, 2),
            padding: (1, 1),
        };
        let image: Vec<f64> = (0..40).map(|v| (v as f64 * 0.37).cos()).collect();
        let cols_len = g.patch_len() * g.out_height() * g.out_width();
        let probe: Vec<f64> = (0..cols_len).map(|v| (v as f64 * 0.11).sin()).collect();

        let mut cols = vec![0.0; cols_len];
        im2col(&image, &g, &mut cols);
        let lhs: f64 = cols.iter().zip(&probe).map(|(a, b)| a * b).sum();

        let mut back = vec![0.0; 40];
        col2im(&probe, &g, &mut back);
        let rhs: f64 = back.iter().zip(&image).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
