//! Raw compute kernels shared by the forward and backward passes.

use crate::scalar::Scalar;

/// Row-major matrix product `c (+)= op(a) * op(b)`, with `op(a)` of size
/// `m x k` and `op(b)` of size `k x n`. When `trans_a` is set, `a` is stored
/// as `k x m`; likewise `b` as `n x k` for `trans_b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|x| *x = T::zero());
        }
        return;
    }
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// Rows of the patch matrix.
    pub fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    /// Columns of the patch matrix (all samples side by side).
    pub fn p(&self) -> usize {
        self.n * self.ho * self.wo
    }
}

/// Gathers input patches into a `[cin*kh*kw, n*ho*wo]` matrix.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (hw_out, p) = (g.ho * g.wo, g.p());
    let mut cols = vec![T::zero(); g.k() * p];
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst_row = &mut cols[row * p..(row + 1) * p];
                for s in 0..g.n {
                    let plane = &x[(s * g.cin + c) * g.h * g.w..][..g.h * g.w];
                    let dst = &mut dst_row[s * hw_out..(s + 1) * hw_out];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * g.w..][..g.w];
                        let out = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *o = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a patch matrix back onto an input-shaped buffer.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (hw_out, p) = (g.ho * g.wo, g.p());
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src_row = &cols[row * p..(row + 1) * p];
                for s in 0..g.n {
                    let plane = &mut dx[(s * g.cin + c) * g.h * g.w..][..g.h * g.w];
                    let src = &src_row[s * hw_out..(s + 1) * hw_out];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * g.w..][..g.w];
                        for (ox, &v) in src[oy * g.wo..(oy + 1) * g.wo].iter().enumerate() {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[n, c, l]` <-> `[c, n*l]` reordering used around the conv GEMM.
pub(crate) fn nchw_to_cnl<T: Scalar>(x: &[T], n: usize, c: usize, l: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for s in 0..n {
        for ch in 0..c {
            out[ch * n * l + s * l..][..l].copy_from_slice(&x[(s * c + ch) * l..][..l]);
        }
    }
    out
}

pub(crate) fn cnl_to_nchw<T: Scalar>(x: &[T], n: usize, c: usize, l: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for s in 0..n {
        for ch in 0..c {
            out[(s * c + ch) * l..][..l].copy_from_slice(&x[ch * n * l + s * l..][..l]);
        }
    }
    out
}
