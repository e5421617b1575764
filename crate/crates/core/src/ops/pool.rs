//! Max pooling, dense (stride-1) max pooling and blurred subsampling.
//!
//! BlurPool is the composition `blur_subsample(dense_maxpool(x, k), H_m, s)`:
//! the max is evaluated densely so no samples are skipped, then a fixed
//! binomial low-pass filter is applied before keeping every `s`-th pixel.

use thiserror::Error;

use super::conv::Padding;
use super::kernel::{binomial_kernel, BlurKernel, UnsupportedKernelSize, SUPPORTED_BLUR_SIZES};
use crate::tensor::{Result, Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    MaxPool,
    BlurPool,
    /// One slot of a pyramidal schedule; behaves like `BlurPool`.
    PyramidalSlot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolSpec {
    pub kind: PoolKind,
    pub window: usize,
    pub stride: usize,
    pub blur_size: Option<usize>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PoolSpecError {
    #[error("pool window and stride must be >= 1 (window {window}, stride {stride})")]
    ZeroExtent { window: usize, stride: usize },
    #[error("blurred pooling requires a blur size")]
    MissingBlurSize,
    #[error(transparent)]
    BlurSize(#[from] UnsupportedKernelSize),
}

impl PoolSpec {
    pub fn max_pool() -> Self {
        Self {
            kind: PoolKind::MaxPool,
            window: 2,
            stride: 2,
            blur_size: None,
        }
    }

    pub fn blur_pool(blur_size: usize) -> Self {
        Self {
            kind: PoolKind::BlurPool,
            window: 2,
            stride: 2,
            blur_size: Some(blur_size),
        }
    }

    pub fn validate(&self) -> Result<(), PoolSpecError> {
        if self.window == 0 || self.stride == 0 {
            return Err(PoolSpecError::ZeroExtent {
                window: self.window,
                stride: self.stride,
            });
        }
        if self.kind != PoolKind::MaxPool {
            let m = self.blur_size.ok_or(PoolSpecError::MissingBlurSize)?;
            if !SUPPORTED_BLUR_SIZES.contains(&m) {
                return Err(UnsupportedKernelSize(m).into());
            }
        }
        Ok(())
    }
}

/// Pooled values plus, for each output element, the flat input index it came from.
pub struct Pooled<T: Scalar> {
    pub output: Tensor<T>,
    pub argmax: Vec<u32>,
}

/// Strided max pooling. `H` and `W` must be divisible by `stride`.
pub fn maxpool<T: Scalar>(x: &Tensor<T>, k: usize, stride: usize) -> Result<Tensor<T>> {
    maxpool_indexed(x, k, stride).map(|p| p.output)
}

pub fn maxpool_indexed<T: Scalar>(x: &Tensor<T>, k: usize, stride: usize) -> Result<Pooled<T>> {
    let (n, c, h, w) = x.dims4()?;
    if k == 0 || stride == 0 {
        return Err(TensorError::Invalid(
            "pool window and stride must be >= 1".into(),
        ));
    }
    if h % stride != 0 || w % stride != 0 {
        return Err(TensorError::Invalid(format!(
            "max pooling needs spatial size divisible by stride {stride}, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / stride, w / stride);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let src = x.data();
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = T::neg_infinity();
                let mut best_i = 0;
                for dy in 0..k {
                    let iy = oy * stride + dy;
                    if iy >= h {
                        break;
                    }
                    for dx in 0..k {
                        let ix = ox * stride + dx;
                        if ix >= w {
                            break;
                        }
                        let i = base + iy * w + ix;
                        if src[i] > best {
                            best = src[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_i as u32);
            }
        }
    }
    Ok(Pooled {
        output: Tensor::new(vec![n, c, oh, ow], out)?,
        argmax,
    })
}

/// Stride-1 max pooling with the window anchored at the top-left and the
/// bottom/right border replicated, so the output keeps the input size.
pub fn dense_maxpool<T: Scalar>(x: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    dense_maxpool_indexed(x, k, Padding::Replicate).map(|p| p.output)
}

/// Window offsets for dense pooling: top-left anchored, border resolved by `padding`.
/// Zero padding drops out-of-range taps, which for a max is the same as replicating.
fn dense_taps(len: usize, k: usize, padding: Padding) -> Vec<usize> {
    let padding = match padding {
        Padding::Zero => Padding::Replicate,
        p => p,
    };
    let mut t = Vec::with_capacity(len * k);
    for o in 0..len {
        for d in 0..k {
            t.push(
                padding
                    .resolve((o + d) as isize, len)
                    .expect("non-zero padding"),
            );
        }
    }
    t
}

/// Dense max pooling with an explicit border mode (replicate or circular).
pub fn dense_maxpool_indexed<T: Scalar>(
    x: &Tensor<T>,
    k: usize,
    padding: Padding,
) -> Result<Pooled<T>> {
    let (n, c, h, w) = x.dims4()?;
    if k == 0 {
        return Err(TensorError::Invalid("pool window must be >= 1".into()));
    }
    let (ty, tx) = (dense_taps(h, k, padding), dense_taps(w, k, padding));
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    let mut argmax = Vec::with_capacity(src.len());
    for p in 0..n * c {
        let base = p * h * w;
        for y in 0..h {
            for xx in 0..w {
                let mut best = T::neg_infinity();
                let mut best_i = 0;
                // scan order is row-major over the window, first strict max wins
                for &iy in &ty[y * k..(y + 1) * k] {
                    for &ix in &tx[xx * k..(xx + 1) * k] {
                        let i = base + iy * w + ix;
                        if src[i] > best {
                            best = src[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_i as u32);
            }
        }
    }
    Ok(Pooled {
        output: Tensor::new(x.shape().to_vec(), out)?,
        argmax,
    })
}

/// Number of dense max-pool windows whose maximum is within `tol` of a
/// different pixel in the same window.
pub fn dense_maxpool_ties<T: Scalar>(
    x: &Tensor<T>,
    k: usize,
    padding: Padding,
    tol: f64,
) -> Result<usize> {
    let (n, c, h, w) = x.dims4()?;
    let (ty, tx) = (dense_taps(h, k, padding), dense_taps(w, k, padding));
    let src = x.data();
    let mut ties = 0;
    let mut window = Vec::with_capacity(k * k);
    for p in 0..n * c {
        let base = p * h * w;
        for y in 0..h {
            for xx in 0..w {
                window.clear();
                for &iy in &ty[y * k..(y + 1) * k] {
                    for &ix in &tx[xx * k..(xx + 1) * k] {
                        window.push(base + iy * w + ix);
                    }
                }
                window.sort_unstable();
                window.dedup();
                let mut vals: Vec<f64> = window.iter().map(|&i| src[i].as_f64()).collect();
                vals.sort_by(|a, b| b.total_cmp(a));
                if vals.len() > 1 && vals[0] - vals[1] <= tol {
                    ties += 1;
                }
            }
        }
    }
    Ok(ties)
}

/// Like [`dense_maxpool_ties`] for strided, non-padded windows.
pub fn maxpool_ties<T: Scalar>(x: &Tensor<T>, k: usize, stride: usize, tol: f64) -> Result<usize> {
    let (n, c, h, w) = x.dims4()?;
    let src = x.data();
    let mut ties = 0;
    let mut vals = Vec::with_capacity(k * k);
    for p in 0..n * c {
        let base = p * h * w;
        for oy in 0..h / stride {
            for ox in 0..w / stride {
                vals.clear();
                for iy in (oy * stride..oy * stride + k).filter(|&i| i < h) {
                    for ix in (ox * stride..ox * stride + k).filter(|&i| i < w) {
                        vals.push(src[base + iy * w + ix].as_f64());
                    }
                }
                vals.sort_by(|a, b| b.total_cmp(a));
                if vals.len() > 1 && vals[0] - vals[1] <= tol {
                    ties += 1;
                }
            }
        }
    }
    Ok(ties)
}

/// Scatters `grad_out` back through recorded argmax indices.
pub fn pool_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    argmax: &[u32],
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    if grad_out.len() != argmax.len() {
        return Err(TensorError::Invalid(
            "gradient and argmax lengths differ".into(),
        ));
    }
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i as usize] += g;
    }
    Ok(dx)
}

/// Reflects `i` into `[0, n)` without repeating the edge sample.
#[inline]
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let r = i.rem_euclid(period);
    if r < n as isize {
        r as usize
    } else {
        (period - r) as usize
    }
}

struct BlurTaps<T> {
    weights: Vec<T>,
    offsets: Vec<isize>,
}

impl<T: Scalar> BlurTaps<T> {
    fn new(kernel: &BlurKernel) -> Self {
        Self {
            weights: kernel
                .weights()
                .iter()
                .map(|&w| T::from_f64_lossy(w))
                .collect(),
            offsets: (0..kernel.size()).map(|t| kernel.offset(t)).collect(),
        }
    }
}

/// Depthwise blur with `kernel ⊗ kernel` under reflect padding, keeping every
/// `factor`-th pixel from index 0. Output is `ceil(H/factor) x ceil(W/factor)`.
///
/// The 2-D filter is separable, so rows are filtered at the kept positions
/// only and then columns.
pub fn blur_subsample<T: Scalar>(
    x: &Tensor<T>,
    kernel: &BlurKernel,
    factor: usize,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if factor == 0 {
        return Err(TensorError::Invalid("subsample factor must be >= 1".into()));
    }
    let taps = BlurTaps::<T>::new(kernel);
    let (oh, ow) = (h.div_ceil(factor), w.div_ceil(factor));
    let mut out = vec![T::zero(); n * c * oh * ow];
    let mut tmp = vec![T::zero(); oh * w];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        tmp.fill(T::zero());
        for oy in 0..oh {
            let row = &mut tmp[oy * w..(oy + 1) * w];
            for (&wt, &off) in taps.weights.iter().zip(&taps.offsets) {
                let iy = reflect((oy * factor) as isize + off, h);
                for (t, &s) in row.iter_mut().zip(&src[iy * w..(iy + 1) * w]) {
                    *t += wt * s;
                }
            }
        }
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let row = &tmp[oy * w..(oy + 1) * w];
            for ox in 0..ow {
                let mut acc = T::zero();
                for (&wt, &off) in taps.weights.iter().zip(&taps.offsets) {
                    acc += wt * row[reflect((ox * factor) as isize + off, w)];
                }
                dst[oy * ow + ox] = acc;
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn blur_subsample_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    kernel: &BlurKernel,
    factor: usize,
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    let (n, c, h, w) = match input_shape {
        &[n, c, h, w] => (n, c, h, w),
        _ => {
            return Err(TensorError::ShapeMismatch {
                expected: "[N, C, H, W]".into(),
                actual: input_shape.to_vec(),
            })
        }
    };
    let (oh, ow) = (h.div_ceil(factor), w.div_ceil(factor));
    if grad_out.shape() != [n, c, oh, ow] {
        return Err(TensorError::ShapeMismatch {
            expected: format!("[{n}, {c}, {oh}, {ow}]"),
            actual: grad_out.shape().to_vec(),
        });
    }
    let taps = BlurTaps::<T>::new(kernel);
    let mut dx = vec![T::zero(); n * c * h * w];
    let mut dtmp = vec![T::zero(); oh * w];
    for p in 0..n * c {
        let go = &grad_out.data()[p * oh * ow..(p + 1) * oh * ow];
        dtmp.fill(T::zero());
        for oy in 0..oh {
            let row = &mut dtmp[oy * w..(oy + 1) * w];
            for ox in 0..ow {
                let g = go[oy * ow + ox];
                for (&wt, &off) in taps.weights.iter().zip(&taps.offsets) {
                    row[reflect((ox * factor) as isize + off, w)] += wt * g;
                }
            }
        }
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let row = &dtmp[oy * w..(oy + 1) * w];
            for (&wt, &off) in taps.weights.iter().zip(&taps.offsets) {
                let iy = reflect((oy * factor) as isize + off, h);
                for (d, &g) in dst[iy * w..(iy + 1) * w].iter_mut().zip(row) {
                    *d += wt * g;
                }
            }
        }
    }
    Tensor::new(input_shape.to_vec(), dx)
}

/// Anti-aliased max pooling: dense max, binomial blur, subsample.
pub fn blurpool<T: Scalar>(x: &Tensor<T>, spec: &PoolSpec) -> Result<Tensor<T>> {
    if spec.kind == PoolKind::MaxPool {
        return Err(TensorError::Invalid(
            "blurpool called with a max-pool spec".into(),
        ));
    }
    spec.validate()
        .map_err(|e| TensorError::Invalid(e.to_string()))?;
    let kernel = binomial_kernel(spec.blur_size.expect("validated"))
        .map_err(|e| TensorError::Invalid(e.to_string()))?;
    let dense = dense_maxpool(x, spec.window)?;
    blur_subsample(&dense, &kernel, spec.stride)
}

/// Applies whichever downsampling `spec` describes.
pub fn downsample<T: Scalar>(x: &Tensor<T>, spec: &PoolSpec) -> Result<Tensor<T>> {
    match spec.kind {
        PoolKind::MaxPool => maxpool(x, spec.window, spec.stride),
        _ => blurpool(x, spec),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn dense_maxpool_row_example() {
        let x = t(&[1, 1, 1, 4], &[1.0, 3.0, 2.0, 0.0]);
        let y = dense_maxpool(&x, 2).unwrap();
        assert_eq!(y.data(), &[3.0, 3.0, 2.0, 0.0]);
    }

    #[test]
    fn dense_maxpool_window_one_is_identity() {
        let x = t(&[1, 1, 2, 3], &[1.0, -2.0, 5.0, 0.5, 0.0, 9.0]);
        assert_eq!(dense_maxpool(&x, 1).unwrap(), x);
    }

    #[test]
    fn dense_maxpool_routes_ties_to_first_element() {
        let x = t(&[1, 1, 2, 2], &[1.0, 1.0, 1.0, 1.0]);
        let p = dense_maxpool_indexed(&x, 2, Padding::Replicate).unwrap();
        assert_eq!(p.argmax, vec![0, 1, 2, 3]);
        // the bottom-right window only ever sees one distinct pixel
        assert_eq!(
            dense_maxpool_ties(&x, 2, Padding::Replicate, 0.0).unwrap(),
            3
        );
        let y = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(
            dense_maxpool_ties(&y, 2, Padding::Replicate, 1e-5).unwrap(),
            0
        );
    }

    #[test]
    fn circular_dense_maxpool_wraps() {
        let x = t(&[1, 1, 1, 4], &[5.0, 3.0, 2.0, 0.0]);
        let p = dense_maxpool_indexed(&x, 2, Padding::Circular).unwrap();
        assert_eq!(p.output.data(), &[5.0, 3.0, 2.0, 5.0]);
    }

    #[test]
    fn maxpool_small_cases() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(maxpool(&x, 2, 2).unwrap().data(), &[4.0]);
        let odd = Tensor::<f64>::zeros(&[1, 1, 3, 4]);
        assert!(maxpool(&odd, 2, 2).is_err());
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..8).map(|i| reflect(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect(-4, 1), 0);
    }

    #[test]
    fn blur_subsample_degenerate_factor_is_pure_blur() {
        let k = binomial_kernel(2).unwrap();
        let x = t(&[1, 1, 1, 3], &[0.0, 2.0, 4.0]);
        let y = blur_subsample(&x, &k, 1).unwrap();
        // taps {0,+1}; last pixel reflects onto index 1
        assert_eq!(y.data(), &[1.0, 3.0, 3.0]);
    }

    #[test]
    fn blurpool_two_by_two_example() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let y = blurpool(
            &x,
            &PoolSpec {
                kind: PoolKind::BlurPool,
                window: 2,
                stride: 2,
                blur_size: Some(2),
            },
        )
        .unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert!((y.data()[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn blurpool_halves_128() {
        let x = Tensor::<f32>::zeros(&[1, 2, 128, 128]);
        for m in [2, 3, 5, 7] {
            let y = blurpool(&x, &PoolSpec::blur_pool(m)).unwrap();
            assert_eq!(y.shape(), &[1, 2, 64, 64]);
        }
    }

    #[test]
    fn spec_validation() {
        assert!(PoolSpec::max_pool().validate().is_ok());
        assert!(PoolSpec::blur_pool(4).validate().is_err());
        let mut s = PoolSpec::blur_pool(3);
        s.stride = 0;
        assert!(s.validate().is_err());
        s = PoolSpec::blur_pool(3);
        s.blur_size = None;
        assert_eq!(s.validate(), Err(PoolSpecError::MissingBlurSize));
    }

    #[test]
    fn blur_backward_is_adjoint() {
        let k = binomial_kernel(5).unwrap();
        let x = Tensor::<f64>::from_fn(&[1, 2, 7, 6], |i| ((i * 37) % 11) as f64 - 5.0);
        let y = blur_subsample(&x, &k, 2).unwrap();
        let g = Tensor::<f64>::from_fn(y.shape(), |i| ((i * 13) % 7) as f64 - 3.0);
        let dx = blur_subsample_backward(&g, &k, 2, x.shape()).unwrap();
        let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
