use super::{gemm, MatRef, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.in_c * self.k * self.k
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h() * self.out_w()
    }

    /// 1x1, stride 1, no padding: the input already is the column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds `x` into a `[in_c * k * k, out_h * out_w]` matrix.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let mut cols = vec![T::zero(); g.patch_len() * p];
    let pad = g.pad as isize;
    for c in 0..g.in_c {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if g.stride == 1 {
                        // contiguous run of valid columns
                        let lo = (pad - kj as isize).max(0) as usize;
                        let hi = ((g.in_w as isize + pad - kj as isize).min(ow as isize)).max(0) as usize;
                        if lo < hi {
                            let s0 = (lo as isize + kj as isize - pad) as usize;
                            drow[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        }
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - pad;
                            if ix >= 0 && ix < g.in_w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input grid.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let pad = g.pad as isize;
    for c in 0..g.in_c {
        let plane = &mut dx[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    for (ox, &v) in srow.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        if ix >= 0 && ix < g.in_w as isize {
                            drow[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Returns the output `[out_c, out_h * out_w]` and the column matrix (empty
/// for pointwise convolutions, which read `x` directly).
pub(crate) fn conv_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    b: &[T],
    g: &ConvGeom,
    keep_cols: bool,
) -> (Vec<T>, Vec<T>) {
    let p = g.out_pixels();
    let mut out = vec![T::zero(); g.out_c * p];
    for (c, row) in out.chunks_mut(p).enumerate() {
        row.fill(b[c]);
    }
    let wm = MatRef::new(w, g.out_c, g.patch_len());
    if g.is_pointwise() {
        gemm(wm, MatRef::new(x, g.in_c, p), T::one(), &mut out);
        (out, Vec::new())
    } else {
        let cols = im2col(x, g);
        gemm(wm, MatRef::new(&cols, g.patch_len(), p), T::one(), &mut out);
        (out, if keep_cols { cols } else { Vec::new() })
    }
}

/// Accumulates `dw`, `db`, and (when requested) `dx`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward<T: Scalar>(
    x: &[T],
    cols: &[T],
    w: &[T],
    dout: &[T],
    g: &ConvGeom,
    dx: Option<&mut [T]>,
    dw: &mut [T],
    db: &mut [T],
) {
    let p = g.out_pixels();
    let k = g.patch_len();
    let col_src = if g.is_pointwise() { x } else { cols };
    let dout_m = MatRef::new(dout, g.out_c, p);
    gemm(dout_m, MatRef::new(col_src, k, p).t(), T::one(), dw);
    for (c, row) in dout.chunks(p).enumerate() {
        db[c] += row.iter().copied().sum::<T>();
    }
    if let Some(dx) = dx {
        let wt = MatRef::new(w, g.out_c, k).t();
        if g.is_pointwise() {
            gemm(wt, dout_m, T::one(), dx);
        } else {
            let mut dcols = vec![T::zero(); k * p];
            gemm(wt, dout_m, T::zero(), &mut dcols);
            col2im(&dcols, g, dx);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop convolution.
    fn naive(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let mut out = vec![0.0; g.out_c * oh * ow];
        for o in 0..g.out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[o];
                    for c in 0..g.in_c {
                        for ki in 0..g.k {
                            for kj in 0..g.k {
                                let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < g.in_h && (ix as usize) < g.in_w {
                                    acc += w[((o * g.in_c + c) * g.k + ki) * g.k + kj]
                                        * x[(c * g.in_h + iy as usize) * g.in_w + ix as usize];
                                }
                            }
                        }
                    }
                    out[(o * oh + oy) * ow + ox] = acc;
                }
            }
        }
        out
    }

    fn seq(n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|i| ((i * 7919 % 23) as f64 - 11.0) * scale).collect()
    }

    #[test]
    fn matches_naive_convolution() {
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (5, 1, 2), (3, 1, 0)] {
            let g = ConvGeom {
                in_c: 3,
                in_h: 7,
                in_w: 6,
                out_c: 4,
                k,
                stride,
                pad,
            };
            let x = seq(3 * 7 * 6, 0.1);
            let w = seq(4 * 3 * k * k, 0.05);
            let b = vec![0.1, -0.2, 0.3, 0.0];
            let (out, _) = conv_forward(&x, &w, &b, &g, true);
            let expect = naive(&x, &w, &b, &g);
            for (a, e) in out.iter().zip(&expect) {
                assert!((a - e).abs() < 1e-12, "k={k} s={stride} p={pad}");
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            in_c: 2,
            in_h: 5,
            in_w: 5,
            out_c: 1,
            k: 3,
            stride: 2,
            pad: 1,
        };
        let x = seq(50, 0.3);
        let cols = im2col(&x, &g);
        let y = seq(cols.len(), 0.7);
        let mut back = vec![0.0; 50];
        col2im(&y, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
