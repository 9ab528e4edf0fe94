//! Dense compute kernels. All dot products accumulate in `f64`.

use crate::scalar::Scalar;

/// Defines a kernel entry point that runs an AVX2-compiled copy of the
/// body when the CPU supports it. Only vector width changes: no fused
/// multiply-add is enabled, so both paths produce identical bits.
macro_rules! dispatch {
    ($(#[$doc:meta])* $name:ident, $avx:ident, $body:ident, ($($arg:ident: $ty:ty),*)) => {
        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = "avx2")]
        unsafe fn $avx<A: Scalar, B: Scalar, T: Scalar>(a: &[A], b: &[B], $($arg: $ty),*) -> Vec<T> {
            $body(a, b, $($arg),*)
        }

        $(#[$doc])*
        pub(crate) fn $name<A: Scalar, B: Scalar, T: Scalar>(a: &[A], b: &[B], $($arg: $ty),*) -> Vec<T> {
            #[cfg(target_arch = "x86_64")]
            if std::arch::is_x86_feature_detected!("avx2") {
                // SAFETY: the required CPU feature was detected at runtime.
                return unsafe { $avx(a, b, $($arg),*) };
            }
            $body(a, b, $($arg),*)
        }
    };
}

dispatch!(
    /// `a[m×k] · b[k×n]`.
    matmul_nn, matmul_nn_avx2, matmul_nn_body, (m: usize, k: usize, n: usize)
);
dispatch!(
    /// `a[m×k] · b[n×k]ᵀ`.
    matmul_nt, matmul_nt_avx2, matmul_nt_body, (m: usize, k: usize, n: usize)
);
dispatch!(
    /// `a[k×m]ᵀ · b[k×n]`.
    matmul_tn, matmul_tn_avx2, matmul_tn_body, (k: usize, m: usize, n: usize)
);

#[inline(always)]
fn matmul_nn_body<A: Scalar, B: Scalar, T: Scalar>(
    a: &[A],
    b: &[B],
    m: usize,
    k: usize,
    n: usize,
) -> Vec<T> {
    let mut out = Vec::with_capacity(m * n);
    let mut acc = vec![0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let row = &a[i * k..(i + 1) * k];
        for (p, &aip) in row.iter().enumerate() {
            let aip = aip.as_f64();
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (slot, &bv) in acc.iter_mut().zip(brow) {
                *slot += aip * bv.as_f64();
            }
        }
        out.extend(acc.iter().map(|&v| T::of(v)));
    }
    out
}

#[inline(always)]
fn matmul_nt_body<A: Scalar, B: Scalar, T: Scalar>(
    a: &[A],
    b: &[B],
    m: usize,
    k: usize,
    n: usize,
) -> Vec<T> {
    // widen once so the inner dot products run on plain f64 slices
    let bf: Vec<f64> = b[..n * k].iter().map(|v| v.as_f64()).collect();
    let mut row = vec![0f64; k];
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        for (d, s) in row.iter_mut().zip(&a[i * k..(i + 1) * k]) {
            *d = s.as_f64();
        }
        for col in bf.chunks_exact(k.max(1)).take(n) {
            out.push(T::of(dot(&row, col)));
        }
    }
    out
}

#[inline(always)]
fn matmul_tn_body<A: Scalar, B: Scalar, T: Scalar>(
    a: &[A],
    b: &[B],
    k: usize,
    m: usize,
    n: usize,
) -> Vec<T> {
    let mut acc = vec![0f64; m * n];
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &api) in arow.iter().enumerate() {
            let api = api.as_f64();
            if api == 0.0 {
                continue;
            }
            let dst = &mut acc[i * n..(i + 1) * n];
            for (slot, &bv) in dst.iter_mut().zip(brow) {
                *slot += api * bv.as_f64();
            }
        }
    }
    acc.into_iter().map(T::of).collect()
}

/// Dot product with four interleaved accumulators combined in a fixed
/// order, so the result is deterministic.
#[inline(always)]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = [0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        s[0] += x[0] * y[0];
        s[1] += x[1] * y[1];
        s[2] += x[2] * y[2];
        s[3] += x[3] * y[3];
    }
    let tail: f64 = ta.iter().zip(tb).map(|(x, y)| x * y).sum();
    (s[0] + s[1]) + (s[2] + s[3]) + tail
}

/// Geometry of a 2-D convolution or pooling window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn positions(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }
}

/// Unfolds `input[N×C×H×W]` into rows of `[C·kh·kw]`, one row per output
/// position, ordered `(n, oh, ow)`.
pub(crate) fn im2col<T: Scalar>(input: &[T], g: &ConvGeom) -> Vec<T> {
    let patch = g.patch();
    let mut cols = vec![T::zero(); g.positions() * patch];
    let (h, w) = (g.height as isize, g.width as isize);
    for n in 0..g.batch {
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let row = ((n * g.out_h + oh) * g.out_w + ow) * patch;
                let mut col = 0;
                for c in 0..g.channels {
                    let plane = (n * g.channels + c) * g.height * g.width;
                    for ki in 0..g.kh {
                        let y = (oh * g.stride + ki) as isize - g.pad as isize;
                        let x0 = (ow * g.stride) as isize - g.pad as isize;
                        if y >= 0 && y < h && x0 >= 0 && x0 + g.kw as isize <= w {
                            let src = plane + y as usize * g.width + x0 as usize;
                            cols[row + col..row + col + g.kw]
                                .copy_from_slice(&input[src..src + g.kw]);
                            col += g.kw;
                            continue;
                        }
                        for kj in 0..g.kw {
                            let x = x0 + kj as isize;
                            if y >= 0 && y < h && x >= 0 && x < w {
                                cols[row + col] = input[plane + y as usize * g.width + x as usize];
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub(crate) fn col2im<A: Scalar, T: Scalar>(cols: &[A], g: &ConvGeom) -> Vec<T> {
    let patch = g.patch();
    let mut out = vec![0f64; g.batch * g.channels * g.height * g.width];
    let (h, w) = (g.height as isize, g.width as isize);
    for n in 0..g.batch {
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let row = ((n * g.out_h + oh) * g.out_w + ow) * patch;
                let mut col = 0;
                for c in 0..g.channels {
                    let plane = (n * g.channels + c) * g.height * g.width;
                    for ki in 0..g.kh {
                        let y = (oh * g.stride + ki) as isize - g.pad as isize;
                        for kj in 0..g.kw {
                            let x = (ow * g.stride + kj) as isize - g.pad as isize;
                            if y >= 0 && y < h && x >= 0 && x < w {
                                out[plane + y as usize * g.width + x as usize] +=
                                    cols[row + col].as_f64();
                            }
                            col += 1;
                        }
                    }
                }
            }
        }
    }
    out.into_iter().map(T::of).collect()
}
