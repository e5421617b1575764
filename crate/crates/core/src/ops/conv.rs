//! 2-D cross-correlation via im2col + GEMM.

use std::borrow::Cow;

use crate::tensor::{Result, Scalar, Tensor, TensorError};

/// Border handling for "same" convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Padding {
    #[default]
    Zero,
    Replicate,
    Circular,
}

impl Padding {
    /// Maps a possibly out-of-range coordinate onto the input, `None` for zero padding.
    #[inline]
    pub fn resolve(self, i: isize, n: usize) -> Option<usize> {
        let n_i = n as isize;
        if (0..n_i).contains(&i) {
            return Some(i as usize);
        }
        match self {
            Padding::Zero => None,
            Padding::Replicate => Some(i.clamp(0, n_i - 1) as usize),
            Padding::Circular => Some(i.rem_euclid(n_i) as usize),
        }
    }
}

impl std::fmt::Display for Padding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Padding::Zero => "zero",
            Padding::Replicate => "replicate",
            Padding::Circular => "circular",
        })
    }
}

impl std::str::FromStr for Padding {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "zero" => Ok(Padding::Zero),
            "replicate" => Ok(Padding::Replicate),
            "circular" => Ok(Padding::Circular),
            other => Err(format!("unknown padding `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dOptions {
    pub stride: usize,
    pub padding: Padding,
}

impl Default for Conv2dOptions {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: Padding::Zero,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, opts: Conv2dOptions) -> Result<Self> {
        let (n, c_in, h, w) = x.dims4()?;
        let (c_out, wc, kh, kw) = weight.dims4()?;
        if wc != c_in {
            return Err(TensorError::ShapeMismatch {
                expected: format!("weight with {c_in} input channels"),
                actual: weight.shape().to_vec(),
            });
        }
        if kh != kw || kh % 2 == 0 {
            return Err(TensorError::ShapeMismatch {
                expected: "square odd kernel".into(),
                actual: weight.shape().to_vec(),
            });
        }
        if opts.stride == 0 {
            return Err(TensorError::Invalid("stride must be >= 1".into()));
        }
        Ok(Self {
            n,
            c_in,
            h,
            w,
            c_out,
            k: kh,
            stride: opts.stride,
            oh: h.div_ceil(opts.stride),
            ow: w.div_ceil(opts.stride),
        })
    }

    fn rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }

    /// Output columns `a..b` of horizontal tap `kx` that read the contiguous
    /// input columns starting at `src`. Empty for strided convolutions.
    fn interior(&self, kx: usize) -> (usize, usize, usize) {
        let pad = self.k / 2;
        if self.stride != 1 {
            return (0, 0, 0);
        }
        if kx >= pad {
            let off = kx - pad;
            (0, self.ow.min(self.w.saturating_sub(off)), off)
        } else {
            ((pad - kx).min(self.ow), self.ow, 0)
        }
    }

    /// For each output coordinate and tap, the input coordinate it reads.
    fn tables(&self, padding: Padding) -> (Vec<Option<usize>>, Vec<Option<usize>>) {
        let pad = (self.k / 2) as isize;
        let build = |out: usize, len: usize| {
            let mut t = Vec::with_capacity(self.k * out);
            for tap in 0..self.k {
                for o in 0..out {
                    let i = (o * self.stride) as isize + tap as isize - pad;
                    t.push(padding.resolve(i, len));
                }
            }
            t
        };
        (build(self.oh, self.h), build(self.ow, self.w))
    }
}

fn im2col<T: Scalar>(
    g: &Geometry,
    plane: &[T],
    rows_tab: &[Option<usize>],
    cols_tab: &[Option<usize>],
    out: &mut [T],
) {
    let (k, oh, ow) = (g.k, g.oh, g.ow);
    let mut row = 0;
    for c in 0..g.c_in {
        let src = &plane[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            let ytab = &rows_tab[ky * oh..(ky + 1) * oh];
            for kx in 0..k {
                let xtab = &cols_tab[kx * ow..(kx + 1) * ow];
                let dst = &mut out[row * oh * ow..(row + 1) * oh * ow];
                for (oy, iy) in ytab.iter().enumerate() {
                    let d = &mut dst[oy * ow..(oy + 1) * ow];
                    match iy {
                        None => d.fill(T::zero()),
                        Some(iy) => {
                            let s = &src[iy * g.w..(iy + 1) * g.w];
                            let (a, b, off) = g.interior(kx);
                            for o in (0..a).chain(b..ow) {
                                d[o] = xtab[o].map_or(T::zero(), |ix| s[ix]);
                            }
                            d[a..b].copy_from_slice(&s[off..off + b - a]);
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im<T: Scalar>(
    g: &Geometry,
    cols: &[T],
    rows_tab: &[Option<usize>],
    cols_tab: &[Option<usize>],
    plane: &mut [T],
) {
    let (k, oh, ow) = (g.k, g.oh, g.ow);
    let mut row = 0;
    for c in 0..g.c_in {
        let dst = &mut plane[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..k {
            let ytab = &rows_tab[ky * oh..(ky + 1) * oh];
            for kx in 0..k {
                let xtab = &cols_tab[kx * ow..(kx + 1) * ow];
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for (oy, iy) in ytab.iter().enumerate() {
                    let Some(iy) = iy else { continue };
                    let s = &src[oy * ow..(oy + 1) * ow];
                    let d = &mut dst[iy * g.w..(iy + 1) * g.w];
                    let (a, b, off) = g.interior(kx);
                    for o in (0..a).chain(b..ow) {
                        if let Some(ix) = xtab[o] {
                            d[ix] += s[o];
                        }
                    }
                    for (dv, sv) in d[off..off + b - a].iter_mut().zip(&s[a..b]) {
                        *dv += *sv;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Same-padded 2-D cross-correlation.
///
/// `x` is `[N, C_in, H, W]`, `weight` is `[C_out, C_in, k, k]` with odd `k`,
/// `bias` is `[C_out]`. The output is `[N, C_out, ceil(H/s), ceil(W/s)]`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    opts: Conv2dOptions,
) -> Result<Tensor<T>> {
    let g = Geometry::new(x, weight, opts)?;
    if let Some(b) = bias {
        if b.shape() != [g.c_out] {
            return Err(TensorError::ShapeMismatch {
                expected: format!("bias [{}]", g.c_out),
                actual: b.shape().to_vec(),
            });
        }
    }
    let (rows_tab, cols_tab) = g.tables(opts.padding);
    let plane_in = g.c_in * g.h * g.w;
    let plane_out = g.c_out * g.cols();
    let mut out = vec![T::zero(); g.n * plane_out];
    let mut scratch = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.rows() * g.cols()]
    };
    for n in 0..g.n {
        let plane = &x.data()[n * plane_in..(n + 1) * plane_in];
        let cols: &[T] = if g.is_pointwise() {
            plane
        } else {
            im2col(&g, plane, &rows_tab, &cols_tab, &mut scratch);
            &scratch
        };
        let dst = &mut out[n * plane_out..(n + 1) * plane_out];
        if let Some(b) = bias {
            for (co, chunk) in dst.chunks_mut(g.cols()).enumerate() {
                chunk.fill(b.data()[co]);
            }
        }
        T::gemm(
            g.c_out,
            g.rows(),
            g.cols(),
            T::one(),
            weight.data(),
            false,
            cols,
            false,
            T::one(),
            dst,
        );
    }
    Tensor::new(vec![g.n, g.c_out, g.oh, g.ow], out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub struct Conv2dGrads<T: Scalar> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    opts: Conv2dOptions,
    want_input: bool,
) -> Result<Conv2dGrads<T>> {
    let g = Geometry::new(x, weight, opts)?;
    if grad_out.shape() != [g.n, g.c_out, g.oh, g.ow] {
        return Err(TensorError::ShapeMismatch {
            expected: format!("[{}, {}, {}, {}]", g.n, g.c_out, g.oh, g.ow),
            actual: grad_out.shape().to_vec(),
        });
    }
    let (rows_tab, cols_tab) = g.tables(opts.padding);
    let plane_in = g.c_in * g.h * g.w;
    let plane_out = g.c_out * g.cols();
    let mut dw = vec![T::zero(); weight.len()];
    let mut db = vec![T::zero(); g.c_out];
    let mut dx = want_input.then(|| vec![T::zero(); x.len()]);
    let mut scratch = vec![
        T::zero();
        if g.is_pointwise() {
            0
        } else {
            g.rows() * g.cols()
        }
    ];
    let mut dcols = vec![T::zero(); if want_input { g.rows() * g.cols() } else { 0 }];

    for n in 0..g.n {
        let plane = &x.data()[n * plane_in..(n + 1) * plane_in];
        let go = &grad_out.data()[n * plane_out..(n + 1) * plane_out];
        for (co, chunk) in go.chunks(g.cols()).enumerate() {
            db[co] += chunk.iter().copied().sum();
        }
        let cols: Cow<[T]> = if g.is_pointwise() {
            Cow::Borrowed(plane)
        } else {
            im2col(&g, plane, &rows_tab, &cols_tab, &mut scratch);
            Cow::Borrowed(&scratch)
        };
        // dW += dOut · colsᵀ
        T::gemm(
            g.c_out,
            g.cols(),
            g.rows(),
            T::one(),
            go,
            false,
            &cols,
            true,
            T::one(),
            &mut dw,
        );
        if let Some(dx) = dx.as_mut() {
            let dst = &mut dx[n * plane_in..(n + 1) * plane_in];
            if g.is_pointwise() {
                // dx = Wᵀ · dOut directly
                T::gemm(
                    g.rows(),
                    g.c_out,
                    g.cols(),
                    T::one(),
                    weight.data(),
                    true,
                    go,
                    false,
                    T::zero(),
                    dst,
                );
            } else {
                T::gemm(
                    g.rows(),
                    g.c_out,
                    g.cols(),
                    T::one(),
                    weight.data(),
                    true,
                    go,
                    false,
                    T::zero(),
                    &mut dcols,
                );
                col2im(&g, &dcols, &rows_tab, &cols_tab, dst);
            }
        }
    }
    Ok(Conv2dGrads {
        input: dx.map(|d| Tensor::new(x.shape().to_vec(), d)).transpose()?,
        weight: Tensor::new(weight.shape().to_vec(), dw)?,
        bias: Tensor::new(vec![g.c_out], db)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct sliding-window evaluation, independent of im2col/GEMM.
    fn conv_oracle(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: &[f64],
        stride: usize,
        padding: Padding,
    ) -> Tensor<f64> {
        let (n, ci, h, wd) = x.dims4().unwrap();
        let (co, _, k, _) = w.dims4().unwrap();
        let pad = (k / 2) as isize;
        let (oh, ow) = (h.div_ceil(stride), wd.div_ceil(stride));
        let mut out = Tensor::zeros(&[n, co, oh, ow]);
        for s in 0..n {
            for o in 0..co {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = b[o];
                        for c in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (y * stride) as isize + ky as isize - pad;
                                    let ix = (xx * stride) as isize + kx as isize - pad;
                                    let (Some(iy), Some(ix)) =
                                        (padding.resolve(iy, h), padding.resolve(ix, wd))
                                    else {
                                        continue;
                                    };
                                    acc += w.data()[((o * ci + c) * k + ky) * k + kx]
                                        * x.data()[((s * ci + c) * h + iy) * wd + ix];
                                }
                            }
                        }
                        out.data_mut()[((s * co + o) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
        out
    }

    fn lcg(seed: u64) -> impl FnMut(usize) -> f64 {
        let mut s = seed;
        move |_| {
            s = s
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        }
    }

    #[test]
    fn pointwise_identity() {
        let x = Tensor::<f64>::from_fn(&[1, 1, 4, 4], lcg(1));
        let w = Tensor::full(&[1, 1, 1, 1], 1.0);
        let y = conv2d(&x, &w, Some(&Tensor::zeros(&[1])), Conv2dOptions::default()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn averaging_preserves_constant_with_circular_padding() {
        let x = Tensor::<f64>::full(&[1, 1, 5, 5], 3.5);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0 / 9.0);
        let opts = Conv2dOptions {
            stride: 1,
            padding: Padding::Circular,
        };
        let y = conv2d(&x, &w, None, opts).unwrap();
        assert!(y.data().iter().all(|v| (v - 3.5).abs() < 1e-12));
    }

    #[test]
    fn matches_sliding_window_oracle() {
        for (seed, padding, stride) in [
            (3, Padding::Zero, 1),
            (4, Padding::Replicate, 1),
            (5, Padding::Circular, 1),
            (6, Padding::Zero, 2),
            (7, Padding::Circular, 2),
        ] {
            let mut r = lcg(seed);
            let x = Tensor::<f64>::from_fn(&[2, 2, 5, 5], &mut r);
            let w = Tensor::<f64>::from_fn(&[3, 2, 3, 3], &mut r);
            let b: Vec<f64> = (0..3).map(&mut r).collect();
            let bt = Tensor::new(vec![3], b.clone()).unwrap();
            let opts = Conv2dOptions { stride, padding };
            let got = conv2d(&x, &w, Some(&bt), opts).unwrap();
            let want = conv_oracle(&x, &w, &b, stride, padding);
            assert!(
                got.max_abs_diff(&want).unwrap() < 1e-12,
                "{padding:?} s={stride}"
            );
        }
    }

    #[test]
    fn rejects_channel_mismatch_and_even_kernels() {
        let x = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        let w = Tensor::<f64>::zeros(&[1, 3, 3, 3]);
        assert!(conv2d(&x, &w, None, Conv2dOptions::default()).is_err());
        let w = Tensor::<f64>::zeros(&[1, 2, 2, 2]);
        assert!(conv2d(&x, &w, None, Conv2dOptions::default()).is_err());
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        // <conv(x), g> == <x, dx> + <w, dw> - linearity check through both routes
        let mut r = lcg(9);
        for padding in [Padding::Zero, Padding::Replicate, Padding::Circular] {
            for stride in [1, 2] {
                let x = Tensor::<f64>::from_fn(&[2, 3, 6, 5], &mut r);
                let w = Tensor::<f64>::from_fn(&[2, 3, 3, 3], &mut r);
                let opts = Conv2dOptions { stride, padding };
                let y = conv2d(&x, &w, None, opts).unwrap();
                let go = Tensor::<f64>::from_fn(y.shape(), &mut r);
                let grads = conv2d_backward(&x, &w, &go, opts, true).unwrap();
                let lhs: f64 = y.data().iter().zip(go.data()).map(|(a, b)| a * b).sum();
                let via_x: f64 = x
                    .data()
                    .iter()
                    .zip(grads.input.as_ref().unwrap().data())
                    .map(|(a, b)| a * b)
                    .sum();
                let via_w: f64 = w
                    .data()
                    .iter()
                    .zip(grads.weight.data())
                    .map(|(a, b)| a * b)
                    .sum();
                assert!((lhs - via_x).abs() < 1e-10, "{padding:?} {stride}");
                assert!((lhs - via_w).abs() < 1e-10, "{padding:?} {stride}");
            }
        }
    }
}
