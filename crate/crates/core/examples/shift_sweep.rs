//! Runs the 121-translation sweep on one sample and prints the loss grid.
//!
//! cargo run --example shift_sweep -- [checkpoint.bin]

use shiftseg::data::Sample;
use shiftseg::phantom::{generate_phantom, stem, PhantomSpec};
use shiftseg::shift_eval::{error_mean, error_variance, eval_grid, Scoring, SHIFT};
use shiftseg::unet::{build_unet, read_checkpoint, UNet, UNetConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let model: UNet<f32> = match std::env::args().nth(1) {
        Some(p) => read_checkpoint(std::path::Path::new(&p))?.model,
        None => build_unet(UNetConfig::default(), 1)?,
    };
    let (image, mask) = generate_phantom(&PhantomSpec::default(), 100);
    let s = Sample {
        id: stem(100),
        image,
        mask,
    };
    let g = eval_grid(&model, &s, 1.0, Scoring::Soft)?;
    println!("rows j = -5..5, columns i = -5..5");
    for j in -SHIFT..=SHIFT {
        let row: Vec<String> = (-SHIFT..=SHIFT)
            .map(|i| format!("{:.4}", g.get(i, j)))
            .collect();
        println!("{j:>3}: {}", row.join(" "));
    }
    println!(
        "error_mean {:.5}  error_variance {:.3e}",
        error_mean(&g),
        error_variance(&g)
    );
    Ok(())
}
