//! Dense matrix kernels on row-major slices. Every kernel accumulates into `c`.
//!
//! Each output element is summed over the inner index in ascending order, and
//! rows of the output never depend on other rows of the left operand, so a row
//! computed inside a batch is bit-identical to the same row computed alone.

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// Geometry of a same-padded 2-D cross-correlation over one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn pad(&self) -> usize {
        (self.kernel - 1) / 2
    }

    pub fn out_height(&self) -> usize {
        (self.height - 1) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width - 1) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn out_len(&self) -> usize {
        self.out_height() * self.out_width()
    }

    /// Unfolds one `C×H×W` image into a `(C·k·k)×(H'·W')` column matrix.
    pub fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let pad = self.pad() as isize;
        let k = self.kernel;
        let p = oh * ow;
        for c in 0..self.channels {
            let plane = &image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let y = (oy * self.stride + ki) as isize - pad;
                        for ox in 0..ow {
                            let x = (ox * self.stride + kj) as isize - pad;
                            dst[oy * ow + ox] = if y >= 0
                                && x >= 0
                                && (y as usize) < self.height
                                && (x as usize) < self.width
                            {
                                plane[y as usize * self.width + x as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): scatters columns back onto the image.
    pub fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let pad = self.pad() as isize;
        let k = self.kernel;
        let p = oh * ow;
        for c in 0..self.channels {
            let plane =
                &mut image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let y = (oy * self.stride + ki) as isize - pad;
                        if y < 0 || y as usize >= self.height {
                            continue;
                        }
                        for ox in 0..ow {
                            let x = (ox * self.stride + kj) as isize - pad;
                            if x >= 0 && (x as usize) < self.width {
                                plane[y as usize * self.width + x as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}
