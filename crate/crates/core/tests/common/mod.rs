//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

pub mod grad;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shiftseg::data::Sample;
use shiftseg::ops::Padding;
use shiftseg::phantom::{generate_phantom, stem, PhantomSpec};
use shiftseg::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

pub fn at(t: &Tensor<f64>, n: usize, c: usize, y: usize, x: usize) -> f64 {
    let s = t.shape();
    t.data()[((n * s[1] + c) * s[2] + y) * s[3] + x]
}

fn pad_index(i: isize, n: usize, padding: Padding) -> Option<usize> {
    let n = n as isize;
    if (0..n).contains(&i) {
        return Some(i as usize);
    }
    match padding {
        Padding::Zero => None,
        Padding::Replicate => Some(if i < 0 { 0 } else { (n - 1) as usize }),
        Padding::Circular => Some((((i % n) + n) % n) as usize),
    }
}

/// Same-padded cross-correlation, one output pixel at a time.
pub fn conv2d(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
    stride: usize,
    padding: Padding,
) -> Tensor<f64> {
    let [n, ci, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let [co, _, k, _] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
    let p = (k / 2) as isize;
    let (oh, ow) = (h.div_ceil(stride), wd.div_ceil(stride));
    let mut out = Vec::new();
    for s in 0..n {
        for o in 0..co {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for c in 0..ci {
                        for dy in 0..k {
                            for dx in 0..k {
                                let iy =
                                    pad_index((oy * stride) as isize + dy as isize - p, h, padding);
                                let ix = pad_index(
                                    (ox * stride) as isize + dx as isize - p,
                                    wd,
                                    padding,
                                );
                                if let (Some(iy), Some(ix)) = (iy, ix) {
                                    acc += at(x, s, c, iy, ix) * at(w, o, c, dy, dx);
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    Tensor::new(vec![n, co, oh, ow], out).unwrap()
}

/// Strided max pooling over non-overlapping windows.
pub fn maxpool(x: &Tensor<f64>, k: usize, stride: usize) -> Tensor<f64> {
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let (oh, ow) = (h / stride, w / stride);
    let mut out = Vec::new();
    for s in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..k {
                        for dx in 0..k {
                            let (iy, ix) = (oy * stride + dy, ox * stride + dx);
                            if iy < h && ix < w {
                                m = m.max(at(x, s, ch, iy, ix));
                            }
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out).unwrap()
}

/// Stride-1 max over `k x k` windows anchored top-left, border extended by `padding`.
pub fn dense_maxpool(x: &Tensor<f64>, k: usize, padding: Padding) -> Tensor<f64> {
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let mut out = Vec::new();
    for s in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..k {
                        for dx in 0..k {
                            let iy = pad_index((y + dy) as isize, h, padding).unwrap();
                            let ix = pad_index((xx + dx) as isize, w, padding).unwrap();
                            m = m.max(at(x, s, ch, iy, ix));
                        }
                    }
                    out.push(m);
                }
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out).unwrap()
}

/// Row `m - 1` of Pascal's triangle over `2^(m-1)`.
pub fn binomial(m: usize) -> Vec<f64> {
    let mut row = vec![1u64];
    for _ in 1..m {
        let mut next = vec![1u64; row.len() + 1];
        for i in 1..row.len() {
            next[i] = row[i - 1] + row[i];
        }
        row = next;
    }
    let total: u64 = row.iter().sum();
    row.iter().map(|&v| v as f64 / total as f64).collect()
}

fn mirror(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
    }
    i as usize
}

/// Full 2-D depthwise blur with mirror padding, then every `s`-th pixel.
pub fn blur_subsample(x: &Tensor<f64>, m: usize, s: usize) -> Tensor<f64> {
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let wts = binomial(m);
    let first = -(((m - 1) / 2) as isize);
    let mut blurred = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for (a, wa) in wts.iter().enumerate() {
                        for (bb, wb) in wts.iter().enumerate() {
                            let iy = mirror(y as isize + first + a as isize, h);
                            let ix = mirror(xx as isize + first + bb as isize, w);
                            acc += wa * wb * at(x, b, ch, iy, ix);
                        }
                    }
                    blurred[((b * c + ch) * h + y) * w + xx] = acc;
                }
            }
        }
    }
    let (oh, ow) = (h.div_ceil(s), w.div_ceil(s));
    let mut out = Vec::new();
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    out.push(blurred[((b * c + ch) * h + oy * s) * w + ox * s]);
                }
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out).unwrap()
}

/// Half-pixel bilinear interpolation at twice the resolution, clamped at the edges.
pub fn upsample2(x: &Tensor<f64>) -> Tensor<f64> {
    let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let coord = |o: usize, len: usize| {
        let src = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = src.floor() as usize;
        (lo, (lo + 1).min(len - 1), src - lo as f64)
    };
    let mut out = Vec::new();
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..2 * h {
                for ox in 0..2 * w {
                    let (y0, y1, fy) = coord(oy, h);
                    let (x0, x1, fx) = coord(ox, w);
                    let top = at(x, b, ch, y0, x0) * (1.0 - fx) + at(x, b, ch, y0, x1) * fx;
                    let bot = at(x, b, ch, y1, x0) * (1.0 - fx) + at(x, b, ch, y1, x1) * fx;
                    out.push(top * (1.0 - fy) + bot * fy);
                }
            }
        }
    }
    Tensor::new(vec![n, c, 2 * h, 2 * w], out).unwrap()
}

pub fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Phantom samples `range` of the default generator.
pub fn phantoms(range: std::ops::Range<usize>) -> Vec<Sample> {
    let spec = PhantomSpec::default();
    range
        .map(|i| {
            let (image, mask) = generate_phantom(&spec, i);
            Sample {
                id: stem(i),
                image,
                mask,
            }
        })
        .collect()
}
