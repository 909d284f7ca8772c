//! Dense numeric kernels: a channel-major 4-d tensor, im2col/col2im and the
//! forward/backward passes of strided convolutions and transposed
//! convolutions, all expressed as GEMMs.
//!
//! Tensors are laid out `[channels, batch, height, width]` so that the GEMM
//! `weights x im2col(input)` lands directly in the output layout.

use std::fmt::Debug;

use num_traits::Float;

/// Floating point element type of the network. Implemented for `f32`
/// (training) and `f64` (gradient checks).
pub trait Scalar: Float + Default + Debug + Send + Sync + std::iter::Sum + 'static {
    /// `c = alpha * a * b + beta * c` for an `m x k` times `k x n` product
    /// with arbitrary (non-negative) strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        beta: Self,
        c: &mut [Self],
        rsc: usize,
        csc: usize,
    );

    fn lit(v: f64) -> Self {
        Self::from(v).expect("literal representable")
    }
}

fn span(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

macro_rules! impl_scalar {
    ($t:ty, $f:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                beta: Self,
                c: &mut [Self],
                rsc: usize,
                csc: usize,
            ) {
                assert!(a.len() >= span(m, k, rsa, csa), "gemm: lhs too short");
                assert!(b.len() >= span(k, n, rsb, csb), "gemm: rhs too short");
                assert!(c.len() >= span(m, n, rsc, csc), "gemm: output too short");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every index touched lies within the spans checked above.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        rsc as isize,
                        csc as isize,
                    )
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// `[channels, batch, height, width]` tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: [usize; 4],
    pub data: Vec<T>,
}

impl<T> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape)
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(channels: usize, batch: usize, height: usize, width: usize) -> Self {
        Self {
            shape: [channels, batch, height, width],
            data: vec![T::zero(); channels * batch * height * width],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor data length");
        Self { shape, data }
    }

    pub fn channels(&self) -> usize {
        self.shape[0]
    }
    pub fn batch(&self) -> usize {
        self.shape[1]
    }
    pub fn height(&self) -> usize {
        self.shape[2]
    }
    pub fn width(&self) -> usize {
        self.shape[3]
    }
    pub fn plane(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    /// The `h x w` plane of channel `c`, sample `n`.
    pub fn plane_of(&self, c: usize, n: usize) -> &[T] {
        let p = self.plane();
        let off = (c * self.batch() + n) * p;
        &self.data[off..off + p]
    }

    pub fn plane_of_mut(&mut self, c: usize, n: usize) -> &mut [T] {
        let p = self.plane();
        let off = (c * self.batch() + n) * p;
        &mut self.data[off..off + p]
    }

    /// Copies channels `lo..hi` into a new tensor.
    pub fn channel_range(&self, lo: usize, hi: usize) -> Self {
        let per = self.batch() * self.plane();
        Self {
            shape: [hi - lo, self.batch(), self.height(), self.width()],
            data: self.data[lo * per..hi * per].to_vec(),
        }
    }

    /// Stacks tensors with equal batch/spatial dims along the channel axis.
    pub fn concat_channels(parts: &[&Self]) -> Self {
        let [_, n, h, w] = parts[0].shape;
        let mut data = Vec::new();
        let mut c = 0;
        for p in parts {
            assert_eq!(&p.shape[1..], &[n, h, w], "concat: mismatched dims");
            data.extend_from_slice(&p.data);
            c += p.channels();
        }
        Self {
            shape: [c, n, h, w],
            data,
        }
    }

    /// Extracts sample `n` as a single-sample tensor.
    pub fn sample(&self, n: usize) -> Self {
        let [c, _, h, w] = self.shape;
        let mut out = Self::zeros(c, 1, h, w);
        for ch in 0..c {
            out.plane_of_mut(ch, 0).copy_from_slice(self.plane_of(ch, n));
        }
        out
    }

    /// Concatenates single- or multi-sample tensors along the batch axis.
    pub fn stack_batch(parts: &[Self]) -> Self {
        let [c, _, h, w] = parts[0].shape;
        let n: usize = parts.iter().map(|p| p.batch()).sum();
        let mut out = Self::zeros(c, n, h, w);
        let mut at = 0;
        for p in parts {
            assert_eq!((p.channels(), p.height(), p.width()), (c, h, w), "stack: mismatched dims");
            for b in 0..p.batch() {
                for ch in 0..c {
                    out.plane_of_mut(ch, at).copy_from_slice(p.plane_of(ch, b));
                }
                at += 1;
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Spatial geometry of a convolution from a `big` grid to a `small` grid.
/// Transposed convolutions reuse it with the roles of input and output
/// swapped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub big_h: usize,
    pub big_w: usize,
    pub small_h: usize,
    pub small_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// "Same" geometry for an odd kernel: `small = ceil(big / stride)`.
    pub fn same(big_h: usize, big_w: usize, kernel: usize, stride: usize) -> Self {
        let pad = kernel / 2;
        let out = |n: usize| (n + 2 * pad - kernel) / stride + 1;
        Self {
            big_h,
            big_w,
            small_h: out(big_h),
            small_w: out(big_w),
            kernel,
            stride,
            pad,
        }
    }

    fn rows_per_channel(&self) -> usize {
        self.kernel * self.kernel
    }
}

/// Unfolds `x` (`[c, n, big_h, big_w]`) into `[c*k*k, n*small_h*small_w]`.
pub fn im2col<T: Scalar>(x: &[T], c: usize, n: usize, g: &ConvGeom) -> Vec<T> {
    im2col_range(x, c, n, 0..n, g)
}

/// [`im2col`] restricted to the samples in `batch`.
pub fn im2col_range<T: Scalar>(x: &[T], c: usize, n: usize, batch: std::ops::Range<usize>, g: &ConvGeom) -> Vec<T> {
    let k = g.kernel;
    let cols = batch.len() * g.small_h * g.small_w;
    let mut out = vec![T::zero(); c * k * k * cols];
    let big_plane = g.big_h * g.big_w;
    for ch in 0..c {
        for ky in 0..k {
            let (oy_lo, oy_hi) = valid_range(ky, g.pad, g.stride, g.big_h, g.small_h);
            for kx in 0..k {
                let (ox_lo, ox_hi) = valid_range(kx, g.pad, g.stride, g.big_w, g.small_w);
                let row = (ch * k + ky) * k + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for (b, sample) in batch.clone().enumerate() {
                    let src = &x[(ch * n + sample) * big_plane..(ch * n + sample + 1) * big_plane];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let src_row = &src[iy * g.big_w..(iy + 1) * g.big_w];
                        let base = (b * g.small_h + oy) * g.small_w;
                        let d = &mut dst[base + ox_lo..base + ox_hi];
                        let first = ox_lo * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            d.copy_from_slice(&src_row[first..first + d.len()]);
                        } else {
                            for (v, s) in d.iter_mut().zip(src_row[first..].iter().step_by(g.stride)) {
                                *v = *s;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Output positions `lo..hi` whose tap at offset `k_off` lands inside the
/// unpadded input.
fn valid_range(k_off: usize, pad: usize, stride: usize, big: usize, small: usize) -> (usize, usize) {
    let lo = if k_off >= pad { 0 } else { (pad - k_off).div_ceil(stride) };
    let hi = if big + pad > k_off { (big + pad - k_off).div_ceil(stride).min(small) } else { 0 };
    (lo.min(hi), hi)
}

/// Adjoint of [`im2col`]: scatters-and-adds `col` back into `x`.
pub fn col2im<T: Scalar>(col: &[T], c: usize, n: usize, g: &ConvGeom, x: &mut [T]) {
    col2im_range(col, c, n, 0..n, g, x)
}

/// [`col2im`] for a column block holding only the samples in `batch`.
pub fn col2im_range<T: Scalar>(col: &[T], c: usize, n: usize, batch: std::ops::Range<usize>, g: &ConvGeom, x: &mut [T]) {
    let k = g.kernel;
    let cols = batch.len() * g.small_h * g.small_w;
    let big_plane = g.big_h * g.big_w;
    assert_eq!(col.len(), c * k * k * cols);
    assert_eq!(x.len(), c * n * big_plane);
    for ch in 0..c {
        for ky in 0..k {
            let (oy_lo, oy_hi) = valid_range(ky, g.pad, g.stride, g.big_h, g.small_h);
            for kx in 0..k {
                let (ox_lo, ox_hi) = valid_range(kx, g.pad, g.stride, g.big_w, g.small_w);
                let row = (ch * k + ky) * k + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for (b, sample) in batch.clone().enumerate() {
                    let dst = &mut x[(ch * n + sample) * big_plane..(ch * n + sample + 1) * big_plane];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let base = (b * g.small_h + oy) * g.small_w;
                        let s = &src[base + ox_lo..base + ox_hi];
                        let first = ox_lo * g.stride + kx - g.pad;
                        let dst_row = &mut dst[iy * g.big_w + first..(iy + 1) * g.big_w];
                        if g.stride == 1 {
                            for (d, v) in dst_row.iter_mut().zip(s) {
                                *d = *d + *v;
                            }
                        } else {
                            for (d, v) in dst_row.iter_mut().step_by(g.stride).zip(s) {
                                *d = *d + *v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Scalar>(y: &mut Tensor<T>, bias: &[T]) {
    let per = y.batch() * y.plane();
    for (ch, chunk) in y.data.chunks_mut(per).enumerate() {
        let b = bias[ch];
        chunk.iter_mut().for_each(|v| *v = *v + b);
    }
}

fn bias_grad<T: Scalar>(dy: &Tensor<T>) -> Vec<T> {
    let per = dy.batch() * dy.plane();
    dy.data.chunks(per).map(|c| c.iter().copied().sum()).collect()
}

pub struct ParamGrads<T> {
    pub input: Tensor<T>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

/// Sample blocks whose column buffer stays around `COL_BLOCK` elements.
fn blocks(n: usize, per_sample: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    const COL_BLOCK: usize = 1 << 18;
    let step = (COL_BLOCK / per_sample.max(1)).clamp(1, n.max(1));
    (0..n).step_by(step).map(move |b| b..(b + step).min(n))
}

/// Strided convolution. `weight` is `[out, in, k, k]`.
pub fn conv_forward<T: Scalar>(x: &Tensor<T>, weight: &[T], bias: &[T], out_ch: usize, g: &ConvGeom) -> Tensor<T> {
    let (c, n) = (x.channels(), x.batch());
    let kk = c * g.rows_per_channel();
    let plane = g.small_h * g.small_w;
    let p = n * plane;
    let mut y = Tensor::zeros(out_ch, n, g.small_h, g.small_w);
    for range in blocks(n, kk * plane) {
        let pc = range.len() * plane;
        let col = im2col_range(&x.data, c, n, range.clone(), g);
        T::gemm(out_ch, kk, pc, T::one(), weight, kk, 1, &col, pc, 1, T::zero(), &mut y.data[range.start * plane..], p, 1);
    }
    add_bias(&mut y, bias);
    y
}

pub fn conv_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>, weight: &[T], g: &ConvGeom) -> ParamGrads<T> {
    let (c, n) = (x.channels(), x.batch());
    let out_ch = dy.channels();
    let kk = c * g.rows_per_channel();
    let plane = g.small_h * g.small_w;
    let p = n * plane;
    let mut dw = vec![T::zero(); out_ch * kk];
    let mut dx = Tensor::zeros(c, n, g.big_h, g.big_w);
    for range in blocks(n, kk * plane) {
        let pc = range.len() * plane;
        let off = range.start * plane;
        let mut col = im2col_range(&x.data, c, n, range.clone(), g);
        // dW += dY * col^T
        T::gemm(out_ch, pc, kk, T::one(), &dy.data[off..], p, 1, &col, 1, pc, T::one(), &mut dw, kk, 1);
        // dcol = W^T * dY
        T::gemm(kk, out_ch, pc, T::one(), weight, 1, kk, &dy.data[off..], p, 1, T::zero(), &mut col, pc, 1);
        col2im_range(&col, c, n, range, g, &mut dx.data);
    }
    ParamGrads {
        input: dx,
        weight: dw,
        bias: bias_grad(dy),
    }
}

/// Transposed convolution (the adjoint of [`conv_forward`] with the same
/// geometry) plus bias. `weight` is `[in, out, k, k]`; the input lives on the
/// small grid and the output on the big grid.
pub fn deconv_forward<T: Scalar>(x: &Tensor<T>, weight: &[T], bias: &[T], out_ch: usize, g: &ConvGeom) -> Tensor<T> {
    let (c, n) = (x.channels(), x.batch());
    let kk = out_ch * g.rows_per_channel();
    let plane = g.small_h * g.small_w;
    let p = n * plane;
    let mut y = Tensor::zeros(out_ch, n, g.big_h, g.big_w);
    for range in blocks(n, kk * plane) {
        let pc = range.len() * plane;
        let mut col = vec![T::zero(); kk * pc];
        T::gemm(kk, c, pc, T::one(), weight, 1, kk, &x.data[range.start * plane..], p, 1, T::zero(), &mut col, pc, 1);
        col2im_range(&col, out_ch, n, range, g, &mut y.data);
    }
    add_bias(&mut y, bias);
    y
}

pub fn deconv_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>, weight: &[T], g: &ConvGeom) -> ParamGrads<T> {
    let (c, n) = (x.channels(), x.batch());
    let out_ch = dy.channels();
    let kk = out_ch * g.rows_per_channel();
    let plane = g.small_h * g.small_w;
    let p = n * plane;
    let mut dx = Tensor::zeros(c, n, g.small_h, g.small_w);
    let mut dw = vec![T::zero(); c * kk];
    for range in blocks(n, kk * plane) {
        let pc = range.len() * plane;
        let off = range.start * plane;
        let dcol = im2col_range(&dy.data, out_ch, n, range, g);
        T::gemm(c, kk, pc, T::one(), weight, kk, 1, &dcol, pc, 1, T::zero(), &mut dx.data[off..], p, 1);
        T::gemm(c, pc, kk, T::one(), &x.data[off..], p, 1, &dcol, 1, pc, T::one(), &mut dw, kk, 1);
    }
    ParamGrads {
        input: dx,
        weight: dw,
        bias: bias_grad(dy),
    }
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + e^v)` without overflow.
pub fn softplus<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(len: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Direct nested-loop convolution, independent of im2col.
    fn naive_conv(x: &Tensor<f64>, w: &[f64], b: &[f64], out_ch: usize, g: &ConvGeom) -> Tensor<f64> {
        let (c, n) = (x.channels(), x.batch());
        let k = g.kernel;
        let mut y = Tensor::zeros(out_ch, n, g.small_h, g.small_w);
        for o in 0..out_ch {
            for s in 0..n {
                for oy in 0..g.small_h {
                    for ox in 0..g.small_w {
                        let mut acc = b[o];
                        for i in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.big_h as isize || ix >= g.big_w as isize {
                                        continue;
                                    }
                                    acc += w[((o * c + i) * k + ky) * k + kx]
                                        * x.plane_of(i, s)[iy as usize * g.big_w + ix as usize];
                                }
                            }
                        }
                        y.plane_of_mut(o, s)[oy * g.small_w + ox] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn same_geometry_ladder() {
        assert_eq!(ConvGeom::same(28, 28, 3, 2).small_h, 14);
        assert_eq!(ConvGeom::same(14, 14, 3, 2).small_h, 7);
        assert_eq!(ConvGeom::same(7, 7, 3, 1).small_h, 7);
        assert_eq!(ConvGeom::same(28, 28, 5, 1).small_h, 28);
    }

    #[test]
    fn conv_matches_naive() {
        for &(stride, k) in &[(1, 3), (2, 3), (2, 5)] {
            let g = ConvGeom::same(9, 9, k, stride);
            let x = Tensor::from_vec([3, 2, 9, 9], random(3 * 2 * 81, 1));
            let w = random(4 * 3 * k * k, 2);
            let b = random(4, 3);
            let fast = conv_forward(&x, &w, &b, 4, &g);
            let slow = naive_conv(&x, &w, &b, 4, &g);
            for (a, e) in fast.data.iter().zip(&slow.data) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deconv_is_adjoint_of_conv() {
        // <conv(x), y> == <x, deconv(y)> for zero bias, weight reinterpreted [in,out] <-> [out,in].
        let g = ConvGeom::same(8, 8, 3, 2);
        let x = Tensor::from_vec([2, 3, 8, 8], random(2 * 3 * 64, 4));
        let y = Tensor::from_vec([5, 3, 4, 4], random(5 * 3 * 16, 5));
        let w = random(5 * 2 * 9, 6);
        let conv = conv_forward(&x, &w, &[0.0; 5], 5, &g);
        // conv weight [5, 2, 3, 3] read as deconv weight [in=5, out=2, 3, 3].
        let de = deconv_forward(&y, &w, &[0.0; 2], 2, &g);
        let lhs: f64 = conv.data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&de.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom::same(7, 7, 3, 2);
        let x = random(2 * 2 * 49, 7);
        let col = random(2 * 9 * 2 * g.small_h * g.small_w, 8);
        let unfolded = im2col(&x, 2, 2, &g);
        let mut folded = vec![0.0; x.len()];
        col2im(&col, 2, 2, &g, &mut folded);
        let lhs: f64 = unfolded.iter().zip(&col).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&folded).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    fn fd_check(forward: impl Fn(&[f64], &[f64]) -> Tensor<f64>, x: Vec<f64>, w: Vec<f64>, probe: &[f64], analytic: (Vec<f64>, Vec<f64>)) {
        let h = 1e-6;
        let loss = |x: &[f64], w: &[f64]| -> f64 { forward(x, w).data.iter().zip(probe).map(|(a, b)| a * b).sum() };
        for (i, &g) in analytic.0.iter().enumerate() {
            let (mut p, mut m) = (x.clone(), x.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (loss(&p, &w) - loss(&m, &w)) / (2.0 * h);
            assert!((fd - g).abs() < 1e-6, "dx[{i}]: {fd} vs {g}");
        }
        for (i, &g) in analytic.1.iter().enumerate() {
            let (mut p, mut m) = (w.clone(), w.clone());
            p[i] += h;
            m[i] -= h;
            let fd = (loss(&x, &p) - loss(&x, &m)) / (2.0 * h);
            assert!((fd - g).abs() < 1e-6, "dw[{i}]: {fd} vs {g}");
        }
    }

    #[test]
    fn conv_backward_finite_differences() {
        let g = ConvGeom::same(6, 6, 3, 2);
        let x = random(2 * 2 * 36, 9);
        let w = random(3 * 2 * 9, 10);
        let probe = random(3 * 2 * 9, 11);
        let dy = Tensor::from_vec([3, 2, 3, 3], probe.clone());
        let grads = conv_backward(&Tensor::from_vec([2, 2, 6, 6], x.clone()), &dy, &w, &g);
        assert_eq!(grads.bias, (0..3).map(|c| probe[c * 18..(c + 1) * 18].iter().sum()).collect::<Vec<f64>>());
        fd_check(
            |x, w| conv_forward(&Tensor::from_vec([2, 2, 6, 6], x.to_vec()), w, &[0.0; 3], 3, &g),
            x,
            w,
            &probe,
            (grads.input.data, grads.weight),
        );
    }

    #[test]
    fn deconv_backward_finite_differences() {
        let g = ConvGeom::same(6, 6, 3, 2);
        let x = random(2 * 2 * 9, 12);
        let w = random(2 * 3 * 9, 13);
        let probe = random(3 * 2 * 36, 14);
        let dy = Tensor::from_vec([3, 2, 6, 6], probe.clone());
        let grads = deconv_backward(&Tensor::from_vec([2, 2, 3, 3], x.clone()), &dy, &w, &g);
        fd_check(
            |x, w| deconv_forward(&Tensor::from_vec([2, 2, 3, 3], x.to_vec()), w, &[0.0; 3], 3, &g),
            x,
            w,
            &probe,
            (grads.input.data, grads.weight),
        );
    }

    #[test]
    fn stable_sigmoid_and_softplus() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert!(sigmoid(-800.0f64) >= 0.0 && sigmoid(800.0f64) <= 1.0);
        assert!((softplus(0.0f64) - 2f64.ln()).abs() < 1e-15);
        assert!((softplus(800.0f64) - 800.0).abs() < 1e-9);
        assert!(softplus(-800.0f64) >= 0.0);
    }

    #[test]
    fn tensor_sample_stack_round_trip() {
        let t = Tensor::from_vec([2, 3, 2, 2], random(24, 15));
        let parts: Vec<_> = (0..3).map(|i| t.sample(i)).collect();
        assert_eq!(Tensor::stack_batch(&parts), t);
        let halves = Tensor::concat_channels(&[&t.channel_range(0, 1), &t.channel_range(1, 2)]);
        assert_eq!(halves, t);
    }
}
