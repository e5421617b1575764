//! Builds each downsampling variant and runs one forward pass.
//!
//! cargo run --example unet_variants

use shiftseg::tensor::Tensor;
use shiftseg::unet::{build_unet, DownsamplingSpec, UNetConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let variants = [
        DownsamplingSpec::MaxPool,
        DownsamplingSpec::BlurPool(3),
        DownsamplingSpec::BlurPool(5),
        DownsamplingSpec::BlurPool(7),
        DownsamplingSpec::pyramidal_default(),
    ];
    let x = Tensor::<f32>::from_fn(&[2, 1, 128, 128], |k| ((k % 128) as f32 / 127.0).sin());
    for d in variants {
        let cfg = UNetConfig::default().with_downsampling(d.clone());
        let net = build_unet::<f32>(cfg, 1)?;
        let t = std::time::Instant::now();
        let y = net.forward(&x)?;
        let (lo, hi) = y
            .data()
            .iter()
            .fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        println!(
            "{d:<10} params {:>7}  encoder {:?}  output {:?} in [{lo:.3}, {hi:.3}]  {:.2?}",
            net.param_count(),
            net.config().encoder_channels(),
            y.shape(),
            t.elapsed()
        );
    }
    Ok(())
}
