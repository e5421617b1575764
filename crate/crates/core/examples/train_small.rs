//! Trains a small pyramidal U-Net on freshly generated phantoms.
//!
//! cargo run --example train_small -- [epochs]

use shiftseg::data::{center_crop, to_batch, Sample, CROP_SIZE};
use shiftseg::phantom::{generate_phantom, stem, PhantomSpec};
use shiftseg::training::{dsc, progress_printer, train, AugMode, TrainConfig};
use shiftseg::unet::{build_unet, model_forward, DownsamplingSpec, UNetConfig};

fn samples(range: std::ops::Range<usize>) -> Vec<Sample> {
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

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let epochs = std::env::args().nth(1).map_or(Ok(10), |a| a.parse())?;
    let (train_set, val_set, test_set) = (samples(0..16), samples(16..20), samples(20..24));
    let cfg = TrainConfig {
        max_epochs: epochs,
        augmentation: AugMode::Translate,
        ..TrainConfig::default()
    };
    let ucfg = UNetConfig::default().with_downsampling(DownsamplingSpec::pyramidal_default());
    let mut model = build_unet::<f32>(ucfg, 1)?;
    let out = train(
        &cfg,
        &mut model,
        1,
        "demo",
        &train_set,
        &val_set,
        progress_printer(std::io::stdout()),
    )?;
    println!(
        "best epoch {} val loss {:.4}",
        out.best.meta.epoch, out.best.meta.val_loss
    );

    let crops = test_set
        .iter()
        .map(|s| center_crop(s, CROP_SIZE))
        .collect::<Result<Vec<_>, _>>()?;
    let (x, y) = to_batch(&crops)?;
    let pred = model_forward(&out.best.model, &x, 8)?.map(|p| if p > 0.5 { 1.0 } else { 0.0 });
    println!("test DSC {:.4}", dsc(&y, &pred, 1.0)?);
    Ok(())
}
