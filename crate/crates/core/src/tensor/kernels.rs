// Raw loops behind the tape ops. All matrices are row-major slices.

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
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
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            c[i * n + j] += a_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
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

/// Zero padding that keeps the spatial size at stride 1: `dilation·(k−1)/2` per side.
pub fn same_padding(kernel: usize, dilation: usize) -> usize {
    dilation * (kernel - 1) / 2
}

/// Output extent of a same-padded convolution along one axis.
pub fn conv_output_size(size: usize, stride: usize) -> usize {
    (size - 1) / stride + 1
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        conv_output_size(self.height, self.stride)
    }

    pub fn out_w(&self) -> usize {
        conv_output_size(self.width, self.stride)
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// Visits every (column-matrix index, image index) pair that lies inside
    /// the image; padded taps are skipped.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let pad = same_padding(self.kernel, self.dilation) as isize;
        let (oh, ow) = (self.out_h(), self.out_w());
        let (h, w) = (self.height as isize, self.width as isize);
        for c in 0..self.channels {
            for ki in 0..self.kernel {
                for kj in 0..self.kernel {
                    let row = (c * self.kernel + ki) * self.kernel + kj;
                    let dy = (ki * self.dilation) as isize - pad;
                    let dx = (kj * self.dilation) as isize - pad;
                    for oy in 0..oh {
                        let y = (oy * self.stride) as isize + dy;
                        if y < 0 || y >= h {
                            continue;
                        }
                        for ox in 0..ow {
                            let x = (ox * self.stride) as isize + dx;
                            if x < 0 || x >= w {
                                continue;
                            }
                            let img = (c * self.height + y as usize) * self.width + x as usize;
                            f(row * oh * ow + oy * ow + ox, img);
                        }
                    }
                }
            }
        }
    }

    pub fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        cols.fill(0.0);
        self.for_each_tap(|ci, ii| cols[ci] = image[ii]);
    }

    pub fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        self.for_each_tap(|ci, ii| image[ii] += cols[ci]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
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

    fn transpose(rows: usize, cols: usize, a: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; a.len()];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = a[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn gemm_variants_agree_with_triple_loop() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        gemm_nn(m, k, n, &a, &b, &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        let bt = transpose(k, n, &b);
        let mut c = vec![0.0; m * n];
        gemm_nt(m, k, n, &a, &bt, &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        let at = transpose(m, k, &a);
        let mut c = vec![0.0; m * n];
        gemm_tn(m, k, n, &at, &b, &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn strided_output_size() {
        assert_eq!(conv_output_size(48, 2), 24);
        assert_eq!(conv_output_size(7, 2), 4);
        assert_eq!(conv_output_size(5, 1), 5);
        assert_eq!(same_padding(3, 4), 4);
    }
}
