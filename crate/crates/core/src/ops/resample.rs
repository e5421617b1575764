//! Bilinear upsampling and circular shifts.

use crate::tensor::{Result, Scalar, Tensor, TensorError};

/// Source coordinate and blend weight for one output index (half-pixel centres).
#[derive(Debug, Clone, Copy)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

pub(crate) fn bilinear_taps(out_len: usize, in_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            Tap {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

/// Doubles both spatial dimensions with bilinear interpolation (half-pixel
/// aligned, edge samples clamped).
pub fn bilinear_upsample<T: Scalar>(x: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if factor != 2 {
        return Err(TensorError::Invalid(format!(
            "only x2 upsampling is supported, got x{factor}"
        )));
    }
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = (h * 2, w * 2);
    let ty = bilinear_taps(oh, h);
    let tx = bilinear_taps(ow, w);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for p in 0..n * c {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, a) in ty.iter().enumerate() {
            let fy = T::from_f64_lossy(a.frac);
            let r0 = &src[a.lo * w..(a.lo + 1) * w];
            let r1 = &src[a.hi * w..(a.hi + 1) * w];
            for (ox, b) in tx.iter().enumerate() {
                let fx = T::from_f64_lossy(b.frac);
                let top = r0[b.lo] + (r0[b.hi] - r0[b.lo]) * fx;
                let bot = r1[b.lo] + (r1[b.hi] - r1[b.lo]) * fx;
                dst[oy * ow + ox] = top + (bot - top) * fy;
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn bilinear_upsample_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    let &[n, c, h, w] = input_shape else {
        return Err(TensorError::ShapeMismatch {
            expected: "[N, C, H, W]".into(),
            actual: input_shape.to_vec(),
        });
    };
    let (oh, ow) = (h * 2, w * 2);
    if grad_out.shape() != [n, c, oh, ow] {
        return Err(TensorError::ShapeMismatch {
            expected: format!("[{n}, {c}, {oh}, {ow}]"),
            actual: grad_out.shape().to_vec(),
        });
    }
    let ty = bilinear_taps(oh, h);
    let tx = bilinear_taps(ow, w);
    let mut dx = vec![T::zero(); n * c * h * w];
    for p in 0..n * c {
        let go = &grad_out.data()[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, a) in ty.iter().enumerate() {
            let fy = T::from_f64_lossy(a.frac);
            for (ox, b) in tx.iter().enumerate() {
                let fx = T::from_f64_lossy(b.frac);
                let g = go[oy * ow + ox];
                let gt = g * (T::one() - fy);
                let gb = g * fy;
                dst[a.lo * w + b.lo] += gt * (T::one() - fx);
                dst[a.lo * w + b.hi] += gt * fx;
                dst[a.hi * w + b.lo] += gb * (T::one() - fx);
                dst[a.hi * w + b.hi] += gb * fx;
            }
        }
    }
    Tensor::new(input_shape.to_vec(), dx)
}

/// Torus shift of the two trailing axes: element `(r, c)` moves to
/// `(r + di, c + dj)` modulo the plane size. Rank-1 tensors shift by `di`.
pub fn circular_shift<T: Scalar>(x: &Tensor<T>, di: isize, dj: isize) -> Tensor<T> {
    let shape = x.shape();
    let (h, w, di, dj) = match shape.len() {
        1 => (1, shape[0], 0, di),
        r => (shape[r - 2], shape[r - 1], di, dj),
    };
    let plane = h * w;
    let mut out = vec![T::zero(); x.len()];
    for (src, dst) in x.data().chunks(plane).zip(out.chunks_mut(plane)) {
        for r in 0..h {
            let nr = (r as isize + di).rem_euclid(h as isize) as usize;
            for c in 0..w {
                let nc = (c as isize + dj).rem_euclid(w as isize) as usize;
                dst[nr * w + nc] = src[r * w + c];
            }
        }
    }
    Tensor::new(shape.to_vec(), out).expect("shape preserved")
}
