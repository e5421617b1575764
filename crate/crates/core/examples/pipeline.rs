//! The full simulate, train, evaluate, report pipeline at toy scale.
//!
//! cargo run --example pipeline -- [out_dir]

use shiftseg::cli::{cmd_evaluate, cmd_report, cmd_simulate, cmd_train, Context, RunConfig};

const CONFIG: &str = r#"
[simulate]
n_train = 8
n_val = 2
n_test = 2

[model]
base_channels = 4
depth = 2

[train]
cells = ["baseline/none", "bp3/none", "pbp:3-2/none", "baseline/translate"]
seeds = [1, 2]
max_epochs = 3
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "pipeline-demo".into());
    let ctx = Context {
        config: RunConfig::parse(CONFIG, "inline.toml".as_ref())?,
        out: out.into(),
        workers: 1,
    };
    let ds = cmd_simulate(&ctx)?;
    println!("dataset fingerprint {}", ds.fingerprint);
    let manifest = cmd_train(&ctx, &mut std::io::sink())?;
    println!("trained {} cells", manifest.cells.len());
    cmd_evaluate(&ctx)?;
    for r in cmd_report(&ctx.out)? {
        println!(
            "{:<10} {:<10} mean {:.4}  variance {:.3e}  ({} seeds x {} samples)",
            r.variant, r.aug_mode, r.mean_of_means, r.mean_of_variances, r.n_seeds, r.n_samples
        );
    }
    println!("outputs under {}", ctx.out.display());
    Ok(())
}
