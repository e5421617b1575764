//! Draws augmentation parameters and applies them to one phantom.
//!
//! cargo run --example augmentation

use shiftseg::data::{apply_augment, translate_augment, AugmentParams, Sample};
use shiftseg::phantom::{generate_phantom, stem, PhantomSpec};
use shiftseg::rng::sample_stream;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let (image, mask) = generate_phantom(&PhantomSpec::default(), 0);
    let s = Sample {
        id: stem(0),
        image,
        mask,
    };
    let params = AugmentParams::default();
    for epoch in 1..=5 {
        let mut rng = sample_stream(1, &s.id, epoch);
        let draw = params.draw(&mut rng);
        let out = apply_augment(&s, &draw, &mut rng)?;
        let fg = out.mask.data().iter().filter(|&&m| m > 0.5).count();
        println!(
            "epoch {epoch}: {draw:?}\n  -> {:?}, {fg} foreground pixels",
            out.size()
        );
    }
    let mut rng = sample_stream(1, &s.id, 0);
    let t = translate_augment(&s, &mut rng)?;
    println!("translation only: {:?}", t.size());
    Ok(())
}
