//! Binomial anti-aliasing kernels and what BlurPool does to a shifted edge.
//!
//! cargo run --example blur_kernels

use shiftseg::ops::{binomial_kernel, downsample, validate_kernel, PoolSpec, SUPPORTED_BLUR_SIZES};
use shiftseg::tensor::Tensor;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for m in SUPPORTED_BLUR_SIZES {
        let k = binomial_kernel(m)?;
        let nums: Vec<String> = k.numerators().iter().map(u64::to_string).collect();
        println!(
            "m={m}: [{}]/{}  constraints {}",
            nums.join(" "),
            k.denominator(),
            if validate_kernel(k.weights()).passes() {
                "ok"
            } else {
                "violated"
            }
        );
    }

    // A vertical step edge at column `c`, pooled with and without blur.
    let edge =
        |c: usize| Tensor::<f64>::from_fn(&[1, 1, 2, 16], |k| if k % 16 >= c { 1.0 } else { 0.0 });
    for spec in [
        PoolSpec::max_pool(),
        PoolSpec::blur_pool(3),
        PoolSpec::blur_pool(7),
    ] {
        println!("{:?} blur {:?}", spec.kind, spec.blur_size);
        for c in 6..=9 {
            let y = downsample(&edge(c), &spec)?;
            let row: Vec<String> = y.data()[..8].iter().map(|v| format!("{v:.2}")).collect();
            println!("  edge at {c}: {}", row.join(" "));
        }
    }
    Ok(())
}
