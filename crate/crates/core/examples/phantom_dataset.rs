//! Generates a small synthetic ultrasound dataset and prints its statistics.
//!
//! cargo run --example phantom_dataset -- [out_dir]

use shiftseg::data::load_splits;
use shiftseg::phantom::{make_synthetic_dataset, PhantomSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "phantom-demo".into());
    let root = std::path::Path::new(&out);
    make_synthetic_dataset(root, (8, 2, 2), &PhantomSpec::default(), 1)?;
    let ds = load_splits(root)?;
    for (split, samples) in [("train", &ds.train), ("val", &ds.val), ("test", &ds.test)] {
        for s in samples.iter() {
            let img = s.image.data();
            let fg = s.mask.data().iter().filter(|&&m| m > 0.5).count();
            let mean = img.iter().sum::<f32>() / img.len() as f32;
            println!(
                "{split:<5} {}  {:?}  foreground {:.1}%  mean intensity {mean:.3}",
                s.id,
                s.size(),
                100.0 * fg as f64 / img.len() as f64
            );
        }
    }
    println!("written to {}", root.display());
    Ok(())
}
