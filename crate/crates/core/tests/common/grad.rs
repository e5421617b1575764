//! Finite-difference suites over every differentiable op and the whole network.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use shiftseg::autodiff::{
    grad_check, GradCheckOptions, GradCheckReport, Graph, ParamStore, Tape, Var,
};
use shiftseg::ops::{binomial_kernel, Conv2dOptions, Padding};
use shiftseg::tensor::Tensor;
use shiftseg::unet::{build_unet, DownsamplingSpec, UNet, UNetConfig};

use super::{random, rng};

type Build = dyn Fn(&mut Tape<f64>, &ParamStore<f64>) -> shiftseg::autodiff::Result<Var>;

pub struct FnGraph(Box<Build>);

impl Graph<f64> for FnGraph {
    fn build(
        &self,
        tape: &mut Tape<f64>,
        params: &ParamStore<f64>,
    ) -> shiftseg::autodiff::Result<Var> {
        (self.0)(tape, params)
    }
}

pub fn graph(
    f: impl Fn(&mut Tape<f64>, &ParamStore<f64>) -> shiftseg::autodiff::Result<Var> + 'static,
) -> FnGraph {
    FnGraph(Box::new(f))
}

pub fn check(
    g: &FnGraph,
    params: &ParamStore<f64>,
    inputs: &[(&str, Tensor<f64>)],
) -> GradCheckReport {
    let inputs: Vec<_> = inputs
        .iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    grad_check(g, params, &inputs, GradCheckOptions::default()).unwrap()
}

/// Distinct values at least `2 / len` apart, so no pooling window holds a near-tie.
pub fn separated(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor<f64> {
    let len: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..len)
        .map(|i| 2.0 * i as f64 / len as f64 - 1.0)
        .collect();
    v.shuffle(r);
    Tensor::new(shape.to_vec(), v).unwrap()
}

type Binary = fn(&mut Tape<f64>, Var, Var) -> shiftseg::autodiff::Result<Var>;
type Unary = fn(&mut Tape<f64>, Var) -> shiftseg::autodiff::Result<Var>;

fn one_op(name: &str, r: &mut ChaCha8Rng) -> Vec<(String, GradCheckReport)> {
    let binaries: [(&str, Binary); 4] = [
        ("add", |t, a, b| t.add(a, b)),
        ("sub", |t, a, b| t.sub(a, b)),
        ("mul", |t, a, b| t.mul(a, b)),
        ("div", |t, a, b| t.div(a, b)),
    ];
    let unaries: [(&str, Unary); 7] = [
        ("add_scalar", |t, a| t.add_scalar(a, 0.7)),
        ("mul_scalar", |t, a| t.mul_scalar(a, -1.3)),
        ("relu", |t, a| t.relu(a)),
        ("sigmoid", |t, a| t.sigmoid(a)),
        ("sum", |t, a| t.sum(a)),
        ("mean", |t, a| t.mean(a)),
        ("sum_per_sample", |t, a| t.sum_per_sample(a)),
    ];
    let none = ParamStore::new();
    let mut out = Vec::new();
    if let Some(&(_, op)) = binaries.iter().find(|(n, _)| *n == name) {
        let a = random(&[2, 3], r);
        let b = Tensor::from_fn(&[2, 3], |_| r.gen_range(0.5..2.0));
        let g = graph(move |t, _| {
            let (a, b) = (t.bound("a")?, t.bound("b")?);
            op(t, a, b)
        });
        out.push((name.into(), check(&g, &none, &[("a", a), ("b", b)])));
    } else if let Some(&(_, op)) = unaries.iter().find(|(n, _)| *n == name) {
        let a = random(&[3, 2, 2], r);
        let g = graph(move |t, _| {
            let a = t.bound("a")?;
            op(t, a)
        });
        out.push((name.into(), check(&g, &none, &[("a", a)])));
    } else {
        match name {
            "conv2d" => {
                for padding in [Padding::Zero, Padding::Replicate, Padding::Circular] {
                    for stride in [1, 2] {
                        let mut p = ParamStore::new();
                        p.insert("w", random(&[2, 2, 3, 3], r));
                        p.insert("b", random(&[2], r));
                        let x = random(&[2, 2, 8, 8], r);
                        let g = graph(move |t, p| {
                            let x = t.bound("x")?;
                            let w = t.param_from(p, "w")?;
                            let b = t.param_from(p, "b")?;
                            t.conv2d(x, w, Some(b), Conv2dOptions { stride, padding })
                        });
                        out.push((
                            format!("conv2d {padding} stride {stride}"),
                            check(&g, &p, &[("x", x)]),
                        ));
                    }
                }
            }
            "maxpool" => {
                let g = graph(|t, _| {
                    let x = t.bound("x")?;
                    t.maxpool(x, 2, 2)
                });
                out.push((
                    name.into(),
                    check(&g, &none, &[("x", separated(&[1, 2, 6, 6], r))]),
                ));
            }
            "dense_maxpool" => {
                for padding in [Padding::Replicate, Padding::Circular] {
                    let g = graph(move |t, _| {
                        let x = t.bound("x")?;
                        t.dense_maxpool_padded(x, 2, padding)
                    });
                    let x = separated(&[1, 2, 5, 6], r);
                    out.push((
                        format!("dense_maxpool {padding}"),
                        check(&g, &none, &[("x", x)]),
                    ));
                }
            }
            "blur_subsample" => {
                for m in [2, 3, 5, 7] {
                    for s in [1, 2] {
                        let k = binomial_kernel(m).unwrap();
                        let g = graph(move |t, _| {
                            let x = t.bound("x")?;
                            t.blur_subsample(x, &k, s)
                        });
                        let x = random(&[1, 2, 7, 8], r);
                        out.push((format!("blur m={m} s={s}"), check(&g, &none, &[("x", x)])));
                    }
                }
            }
            "bilinear_upsample" => {
                let g = graph(|t, _| {
                    let x = t.bound("x")?;
                    t.bilinear_upsample(x)
                });
                out.push((
                    name.into(),
                    check(&g, &none, &[("x", random(&[1, 1, 4, 4], r))]),
                ));
            }
            "concat_channels" => {
                let g = graph(|t, _| {
                    let (a, b) = (t.bound("a")?, t.bound("b")?);
                    t.concat_channels(a, b)
                });
                let (a, b) = (random(&[2, 1, 3, 3], r), random(&[2, 2, 3, 3], r));
                out.push((name.into(), check(&g, &none, &[("a", a), ("b", b)])));
            }
            other => panic!("no gradient check for `{other}`"),
        }
    }
    out
}

pub const OPS: [&str; 17] = [
    "add",
    "sub",
    "mul",
    "div",
    "add_scalar",
    "mul_scalar",
    "relu",
    "sigmoid",
    "sum",
    "mean",
    "sum_per_sample",
    "conv2d",
    "maxpool",
    "dense_maxpool",
    "blur_subsample",
    "bilinear_upsample",
    "concat_channels",
];

/// Checks every op in `ops` on one random instance per seed.
pub fn op_suite(ops: &[&str], seeds: std::ops::Range<u64>) -> Vec<(String, GradCheckReport)> {
    let mut out = Vec::new();
    for op in ops {
        for seed in seeds.clone() {
            let mut r = rng(seed);
            out.extend(
                one_op(op, &mut r)
                    .into_iter()
                    .map(|(n, rep)| (format!("{n} seed {seed}"), rep)),
            );
        }
    }
    out
}

/// A network with small random biases.
pub fn generic_point(cfg: UNetConfig, seed: u64) -> UNet<f64> {
    let mut net = build_unet::<f64>(cfg, seed).unwrap();
    let mut r = rng(seed);
    // Zero biases put every unit fed by a zero patch exactly on a ReLU kink.
    for (name, p) in net.params_mut().iter_mut() {
        if name.ends_with("bias") {
            p.data_mut()
                .iter_mut()
                .for_each(|v| *v = r.gen_range(-0.1..0.1));
        }
    }
    net
}

/// Whole-network check at base 4, depth 4, on a 32x32 input.
pub fn unet_gradcheck(d: DownsamplingSpec) -> GradCheckReport {
    let cfg = UNetConfig {
        base_channels: 4,
        depth: 4,
        downsampling: d,
        input_size: (32, 32),
        ..UNetConfig::default()
    };
    let net = generic_point(cfg, 7);
    let mut r = rng(1);
    let x = Tensor::from_fn(&[1, 1, 32, 32], |_| r.gen_range(0.0..1.0));
    let opts = GradCheckOptions {
        max_entries: Some(16),
        ..GradCheckOptions::default()
    };
    grad_check(net.graph(), net.params(), &[("image".into(), x)], opts).unwrap()
}
