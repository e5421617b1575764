//! Finite-difference check of tape gradients through whole U-Nets.
//!
//! cargo run --example gradcheck

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use shiftseg::autodiff::{grad_check, GradCheckOptions};
use shiftseg::tensor::Tensor;
use shiftseg::unet::{build_unet, DownsamplingSpec, UNetConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::<f64>::from_fn(&[1, 1, 32, 32], |_| rng.gen_range(0.0..1.0));
    for d in [
        DownsamplingSpec::MaxPool,
        DownsamplingSpec::BlurPool(5),
        DownsamplingSpec::pyramidal_default(),
    ] {
        let cfg = UNetConfig {
            base_channels: 4,
            depth: 4,
            downsampling: d.clone(),
            input_size: (32, 32),
            ..UNetConfig::default()
        };
        let mut net = build_unet::<f64>(cfg, 7)?;
        // Nonzero biases move the check away from ReLU kinks at exactly zero.
        for (name, p) in net.params_mut().iter_mut() {
            if name.ends_with("bias") {
                p.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = rng.gen_range(-0.1..0.1));
            }
        }
        let opts = GradCheckOptions {
            max_entries: Some(16),
            ..GradCheckOptions::default()
        };
        let report = grad_check(
            net.graph(),
            net.params(),
            &[("image".into(), x.clone())],
            opts,
        )?;
        let checked: usize = report.entries.iter().map(|e| e.checked).sum();
        println!(
            "{d:<8} {checked} entries in {} tensors, {} skipped at kinks, max relative error {:.2e}: {}",
            report.entries.len(),
            report.kinked(),
            report.max_rel_error(),
            if report.passed() { "pass" } else { "FAIL" }
        );
    }
    Ok(())
}
