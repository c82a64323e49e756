//! Slice-level numerical kernels shared by the tape ops and by detached
//! (no-gradient) computations.

use super::Scalar;
use crate::par;

/// Rows of `c` handed to one task by [`gemm`].
const ROW_CHUNK: usize = 64;

/// Row-major `c = op(a) * op(b) + beta * c` with `op(a)` of shape `m x k` and
/// `op(b)` of shape `k x n`. `ta`/`tb` mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    par::for_each_chunk_mut(c, ROW_CHUNK * n, |chunk, out| {
        let r0 = chunk * ROW_CHUNK;
        let rows = out.len() / n;
        let a_off = if ta { r0 } else { r0 * k };
        // SAFETY: rows r0..r0+rows of op(a) lie inside `a` for both layouts,
        // `b` is read in full and `out` is exactly `rows x n`.
        unsafe {
            T::gemm_raw(
                rows,
                k,
                n,
                T::one(),
                a.as_ptr().add(a_off),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
}

/// Single-threaded variant of [`gemm`] for callers already running inside a
/// parallel region over independent problems.
#[allow(clippy::too_many_arguments)]
pub fn gemm_serial<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides derived from the asserted buffer lengths.
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

/// Masked, temperature-scaled softmax of one row. Masked entries get exactly
/// zero and are excluded from both the max and the normalizer. Returns `false`
/// when every entry is masked.
pub fn softmax_row<T: Scalar>(
    logits: &[T],
    temperature: f64,
    mask: Option<&[bool]>,
    out: &mut [T],
) -> bool {
    let live = |k: usize| mask.is_none_or(|m| !m[k]);
    let mut max = f64::NEG_INFINITY;
    for (k, &x) in logits.iter().enumerate() {
        if live(k) {
            max = max.max(x.f64() / temperature);
        }
    }
    if max == f64::NEG_INFINITY {
        return false;
    }
    let mut sum = 0.0f64;
    let mut tmp = vec![0.0f64; logits.len()];
    for (k, &x) in logits.iter().enumerate() {
        if live(k) {
            let e = (x.f64() / temperature - max).exp();
            tmp[k] = e;
            sum += e;
        }
    }
    for (o, e) in out.iter_mut().zip(&tmp) {
        *o = T::of(e / sum);
    }
    true
}

/// `log sum_k exp(x_k / temperature)` over the unmasked entries of a row.
pub fn logsumexp_row<T: Scalar>(logits: &[T], temperature: f64, mask: Option<&[bool]>) -> Option<f64> {
    let live = |k: usize| mask.is_none_or(|m| !m[k]);
    let mut max = f64::NEG_INFINITY;
    for (k, &x) in logits.iter().enumerate() {
        if live(k) {
            max = max.max(x.f64() / temperature);
        }
    }
    if max == f64::NEG_INFINITY {
        return None;
    }
    let sum: f64 = logits
        .iter()
        .enumerate()
        .filter(|(k, _)| live(*k))
        .map(|(_, &x)| (x.f64() / temperature - max).exp())
        .sum();
    Some(max + sum.ln())
}

/// Euclidean norm with `f64` accumulation.
pub fn norm<T: Scalar>(row: &[T]) -> f64 {
    row.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt()
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.f64() * y.f64()).sum()
}

/// Geometry of a 2-d convolution over one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
    ) -> Option<Self> {
        if stride == 0 || height + 2 * padding < kh || width + 2 * padding < kw {
            return None;
        }
        Some(Self {
            channels,
            height,
            width,
            kh,
            kw,
            stride,
            padding,
            out_h: (height + 2 * padding - kh) / stride + 1,
            out_w: (width + 2 * padding - kw) / stride + 1,
        })
    }

    /// Rows of the column matrix: `channels * kh * kw`.
    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    fn source(&self, oy: usize, ky: usize, ox: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky) as isize - self.padding as isize;
        let x = (ox * self.stride + kx) as isize - self.padding as isize;
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }
}

/// Unfolds one `C x H x W` sample into a `(C*kh*kw) x (out_h*out_w)` matrix.
pub fn im2col<T: Scalar>(g: &ConvGeometry, img: &[T], cols: &mut [T]) {
    let ol = g.out_len();
    for c in 0..g.channels {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ol..(row + 1) * ol];
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        dst[oy * g.out_w + ox] = match g.source(oy, ky, ox, kx) {
                            Some((y, x)) => img[(c * g.height + y) * g.width + x],
                            None => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T], img: &mut [T]) {
    let ol = g.out_len();
    for c in 0..g.channels {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ol..(row + 1) * ol];
                for oy in 0..g.out_h {
                    for ox in 0..g.out_w {
                        if let Some((y, x)) = g.source(oy, ky, ox, kx) {
                            let v = &mut img[(c * g.height + y) * g.width + x];
                            *v = *v + src[oy * g.out_w + ox];
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

    fn naive(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    let av = if ta { a[p * m + i] } else { a[i * k + p] };
                    let bv = if tb { b[j * k + p] } else { b[p * n + j] };
                    c[i * n + j] += av * bv;
                }
            }
        }
        c
    }

    #[test]
    fn gemm_all_transpose_combinations() {
        let (m, k, n) = (150, 7, 5);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        for ta in [false, true] {
            for tb in [false, true] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, &a, ta, &b, tb, 0.0, &mut c);
                assert_eq!(c, naive(m, k, n, &a, ta, &b, tb), "ta={ta} tb={tb}");
            }
        }
    }

    #[test]
    fn softmax_mask_excludes_entries() {
        let mut out = [0.0f64; 3];
        assert!(softmax_row(&[5.0, 1.0, 2.0], 1.0, Some(&[true, false, false]), &mut out));
        assert_eq!(out[0], 0.0);
        assert!((out[1] - 0.268_941_421).abs() < 1e-8);
        assert!(!softmax_row(&[1.0f64], 1.0, Some(&[true]), &mut out[..1]));
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = ConvGeometry::new(2, 5, 4, 3, 3, 2, 1).unwrap();
        let img: Vec<f64> = (0..40).map(|i| (i as f64).sin()).collect();
        let cols_probe: Vec<f64> = (0..g.patch_len() * g.out_len())
            .map(|i| (i as f64 * 0.7).cos())
            .collect();
        let mut cols = vec![0.0; cols_probe.len()];
        im2col(&g, &img, &mut cols);
        let mut back = vec![0.0; img.len()];
        col2im(&g, &cols_probe, &mut back);
        let lhs: f64 = cols.iter().zip(&cols_probe).map(|(a, b)| a * b).sum();
        let rhs: f64 = img.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
