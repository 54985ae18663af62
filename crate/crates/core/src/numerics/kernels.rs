//! Raw loops behind the graph ops. Everything here works on flat row-major slices.

use crate::numerics::Scalar;

/// `c[m×n] (+)= op(a)[m×k] · op(b)[k×n]`, where `ta`/`tb` mean the operand is
/// stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<T: Scalar>(
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    m: usize,
    k: usize,
    n: usize,
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    T::gemm(m, k, n, a, rsa, csa, b, rsb, csb, beta, c);
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv1dDims {
    pub batch: usize,
    pub c_in: usize,
    pub n_in: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub n_out: usize,
}

impl Conv1dDims {
    pub fn patch(&self) -> usize {
        self.c_in * self.kernel
    }
    pub fn cols(&self) -> usize {
        self.batch * self.n_out
    }
}

/// Unfolds `x[B, C_in, N]` into `cols[C_in·k, B·N_out]`.
pub(crate) fn im2col_1d<T: Scalar>(x: &[T], d: &Conv1dDims) -> Vec<T> {
    let ncols = d.cols();
    let mut cols = vec![T::zero(); d.patch() * ncols];
    for c in 0..d.c_in {
        for t in 0..d.kernel {
            let row = &mut cols[(c * d.kernel + t) * ncols..(c * d.kernel + t + 1) * ncols];
            for b in 0..d.batch {
                let xs = &x[(b * d.c_in + c) * d.n_in..(b * d.c_in + c + 1) * d.n_in];
                for o in 0..d.n_out {
                    let pos = (o * d.stride + t) as isize - d.pad as isize;
                    if pos >= 0 && (pos as usize) < d.n_in {
                        row[b * d.n_out + o] = xs[pos as usize];
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im_1d<T: Scalar>(cols: &[T], d: &Conv1dDims, gx: &mut [T]) {
    let ncols = d.cols();
    for c in 0..d.c_in {
        for t in 0..d.kernel {
            let row = &cols[(c * d.kernel + t) * ncols..(c * d.kernel + t + 1) * ncols];
            for b in 0..d.batch {
                let gxs = &mut gx[(b * d.c_in + c) * d.n_in..(b * d.c_in + c + 1) * d.n_in];
                for o in 0..d.n_out {
                    let pos = (o * d.stride + t) as isize - d.pad as isize;
                    if pos >= 0 && (pos as usize) < d.n_in {
                        gxs[pos as usize] += row[b * d.n_out + o];
                    }
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv2dDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Conv2dDims {
    pub fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }
    pub fn spatial_out(&self) -> usize {
        self.ho * self.wo
    }
    pub fn cols(&self) -> usize {
        self.batch * self.spatial_out()
    }

    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        if y < 0 || x < 0 || y as usize >= self.h || x as usize >= self.w {
            None
        } else {
            Some(y as usize * self.w + x as usize)
        }
    }
}

pub(crate) fn im2col_2d<T: Scalar>(x: &[T], d: &Conv2dDims) -> Vec<T> {
    let ncols = d.cols();
    let plane = d.h * d.w;
    let so = d.spatial_out();
    let mut cols = vec![T::zero(); d.patch() * ncols];
    for c in 0..d.c_in {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let r = (c * d.kh + ky) * d.kw + kx;
                let row = &mut cols[r * ncols..(r + 1) * ncols];
                for b in 0..d.batch {
                    let xs = &x[(b * d.c_in + c) * plane..(b * d.c_in + c + 1) * plane];
                    for oy in 0..d.ho {
                        for ox in 0..d.wo {
                            if let Some(s) = d.source(oy, ox, ky, kx) {
                                row[b * so + oy * d.wo + ox] = xs[s];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im_2d<T: Scalar>(cols: &[T], d: &Conv2dDims, gx: &mut [T]) {
    let ncols = d.cols();
    let plane = d.h * d.w;
    let so = d.spatial_out();
    for c in 0..d.c_in {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let r = (c * d.kh + ky) * d.kw + kx;
                let row = &cols[r * ncols..(r + 1) * ncols];
                for b in 0..d.batch {
                    let gxs = &mut gx[(b * d.c_in + c) * plane..(b * d.c_in + c + 1) * plane];
                    for oy in 0..d.ho {
                        for ox in 0..d.wo {
                            if let Some(s) = d.source(oy, ox, ky, kx) {
                                gxs[s] += row[b * so + oy * d.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adaptive pooling bin `[start, end)` for output index `i`.
pub(crate) fn pool_bin(i: usize, n: usize, out: usize) -> (usize, usize) {
    let start = i * n / out;
    let end = ((i + 1) * n).div_ceil(out);
    (start, end)
}
