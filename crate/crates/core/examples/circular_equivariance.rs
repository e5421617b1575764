//! A stride-1 conv/ReLU/dense-max stack with circular padding commutes with
//! every circular shift; the strided network does not.
//!
//! cargo run --example circular_equivariance

use shiftseg::autodiff::Tape;
use shiftseg::ops::{circular_shift, Padding};
use shiftseg::tensor::Tensor;
use shiftseg::unet::{build_unet, DownsamplingSpec, UNet, UNetConfig};

fn prefix(net: &UNet<f64>, x: &Tensor<f64>) -> Result<Tensor<f64>, Box<dyn std::error::Error>> {
    let mut tape = Tape::new();
    let input = tape.input("image", x.clone())?;
    let out = net.graph().stride1_prefix(&mut tape, net.params(), input)?;
    Ok(tape.value(out).clone())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let x = Tensor::<f64>::from_fn(&[1, 1, 32, 32], |k| ((k * 7919) % 257) as f64 / 257.0);
    let cfg = UNetConfig {
        base_channels: 4,
        depth: 3,
        downsampling: DownsamplingSpec::BlurPool(3),
        input_size: (32, 32),
        padding: Padding::Circular,
    };
    let net = build_unet::<f64>(cfg, 3)?;
    let (p, y) = (prefix(&net, &x)?, net.forward(&x)?);
    for (di, dj) in [(1, 0), (0, 3), (5, -7), (16, 16)] {
        let xs = circular_shift(&x, di, dj);
        let e_prefix = prefix(&net, &xs)?.max_abs_diff(&circular_shift(&p, di, dj))?;
        let e_full = net
            .forward(&xs)?
            .max_abs_diff(&circular_shift(&y, di, dj))?;
        println!(
            "shift ({di:>2}, {dj:>2}): stride-1 prefix {e_prefix:.1e}   full network {e_full:.1e}"
        );
    }
    Ok(())
}
