use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use shiftseg::cli::{
    cmd_evaluate, cmd_report, cmd_simulate, cmd_train, Context, RunConfig, RunManifest, OUT_ENV,
};
use shiftseg::shift_eval::read_per_sample;
use shiftseg::Error;

const CONFIG: &str = r#"
[simulate]
n_train = 4
n_val = 2
n_test = 3

[model]
base_channels = 2
depth = 2

[train]
cells = ["baseline/none", "pbp:3-2/translate"]
seeds = [1, 2]
max_epochs = 2
"#;

fn context(out: &Path) -> Context {
    Context {
        config: RunConfig::parse(CONFIG, Path::new("cli.toml")).unwrap(),
        out: out.to_path_buf(),
        workers: 2,
    }
}

struct Pipeline {
    _dir: tempfile::TempDir,
    out: PathBuf,
    train_log: String,
}

/// One toy run through simulate, train and evaluate, shared by the tests.
fn pipeline() -> &'static Pipeline {
    static P: OnceLock<Pipeline> = OnceLock::new();
    P.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("out");
        let ctx = context(&out);
        cmd_simulate(&ctx).unwrap();
        let mut log = Vec::new();
        cmd_train(&ctx, &mut log).unwrap();
        cmd_evaluate(&ctx).unwrap();
        Pipeline {
            _dir: dir,
            out,
            train_log: String::from_utf8(log).unwrap(),
        }
    })
}

fn lines(p: &Path) -> Vec<String> {
    std::fs::read_to_string(p)
        .unwrap_or_else(|e| panic!("{}: {e}", p.display()))
        .lines()
        .map(String::from)
        .collect()
}

#[test]
fn simulate_writes_a_reproducible_dataset() {
    let p = pipeline();
    let ds = p.out.join("dataset");
    for f in ["splits.toml", "phantom.toml", "dataset.toml"] {
        assert!(ds.join(f).exists(), "{f}");
    }
    assert_eq!(std::fs::read_dir(ds.join("images")).unwrap().count(), 9);
    assert_eq!(std::fs::read_dir(ds.join("masks")).unwrap().count(), 9);

    let again = tempfile::tempdir().unwrap();
    let a = cmd_simulate(&context(&p.out)).unwrap();
    let b = cmd_simulate(&context(again.path())).unwrap();
    assert_eq!(a.fingerprint, b.fingerprint);
}

#[test]
fn train_records_every_cell() {
    let p = pipeline();
    let m = RunManifest::read(&p.out).unwrap().unwrap();
    assert_eq!(m.cells.len(), 4);
    for c in &m.cells {
        assert!(c.epochs_run >= 1 && c.epochs_run <= 2);
        let dir = p.out.join("runs").join(format!(
            "{}_{}_seed{}",
            c.variant.replace(':', "_"),
            c.aug_mode,
            c.seed
        ));
        assert!(dir.join("checkpoint.bin").exists());
        let log = lines(&dir.join("epochs.csv"));
        assert_eq!(log[0], "run_id,seed,epoch,train_loss,val_loss,best_so_far");
        assert_eq!(log.len(), 1 + c.epochs_run);
        assert!(c.run_id.starts_with(&format!(
            "{}_{}_seed{}-",
            c.variant.replace(':', "_"),
            c.aug_mode,
            c.seed
        )));
    }
    assert!(p.train_log.contains("epoch"), "{}", p.train_log);
}

#[test]
fn completed_cells_are_skipped_on_rerun() {
    let p = pipeline();
    let ctx = context(&p.out);
    let log_path = p
        .out
        .join("runs")
        .join("baseline_none_seed1")
        .join("epochs.csv");
    let before = std::fs::read(&log_path).unwrap();
    let mut log = Vec::new();
    let m = cmd_train(&ctx, &mut log).unwrap();
    let log = String::from_utf8(log).unwrap();
    assert_eq!(log.matches("already complete").count(), 4, "{log}");
    assert_eq!(m.cells.len(), 4);
    assert_eq!(std::fs::read(&log_path).unwrap(), before);
}

#[test]
fn evaluate_writes_one_row_per_translation() {
    let p = pipeline();
    for (variant, aug) in [("baseline", "none"), ("pbp_3-2", "translate")] {
        let dir = p.out.join("eval").join(variant).join(aug);
        for seed in [1, 2] {
            let g = lines(&dir.join(format!("grid_seed{seed}.csv")));
            assert_eq!(g[0], "sample_id,i,j,loss");
            assert_eq!(g.len() - 1, 3 * 121);
            assert_eq!(
                lines(&dir.join(format!("grid_seed{seed}_jfast.csv"))).len(),
                1 + 3 * 121
            );
        }
        let rows = read_per_sample(&dir.join("per_sample.csv")).unwrap();
        assert_eq!(rows.len(), 2 * 3);
    }
    let agg = lines(&p.out.join("eval").join("aggregate.csv"));
    assert_eq!(agg.len(), 3);
    assert!(agg[1].starts_with("baseline,none,"));
    assert!(agg[2].starts_with("pbp:3-2,translate,"));
}

#[test]
fn report_recomputes_the_aggregate() {
    let p = pipeline();
    let rows = cmd_report(&p.out).unwrap();
    assert_eq!(rows.len(), 2);
    let agg = lines(&p.out.join("eval").join("aggregate.csv"));
    for row in &rows {
        let line = agg
            .iter()
            .find(|l| {
                l.starts_with(&format!(
                    "{},{},",
                    row.variant.replace('_', ":"),
                    row.aug_mode
                ))
            })
            .unwrap();
        let f: Vec<&str> = line.split(',').collect();
        let mm: f64 = f[2].parse().unwrap();
        let mv: f64 = f[3].parse().unwrap();
        assert!((row.mean_of_means - mm).abs() < 1e-12);
        assert!((row.mean_of_variances - mv).abs() < 1e-12);
        assert_eq!((row.n_seeds, row.n_samples), (2, 3));
    }
    assert_eq!(lines(&p.out.join("report").join("summary.csv")).len(), 3);
    let grids: Vec<_> = std::fs::read_dir(p.out.join("report").join("grids"))
        .unwrap()
        .collect();
    assert_eq!(grids.len(), 2 * 3);
    let g = lines(&grids[0].as_ref().unwrap().path());
    assert_eq!(g.len(), 11);
    assert!(g.iter().all(|l| l.split(',').count() == 11));
}

#[test]
fn report_without_results_fails() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(cmd_report(dir.path()), Err(Error::NoInput(_))));
}

fn binary() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_shiftseg"));
    c.env_remove(OUT_ENV);
    c
}

#[test]
fn evaluate_without_checkpoints_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, CONFIG).unwrap();
    let out = binary()
        .args(["evaluate", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path().join("o"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("baseline_none_seed1") && err.contains("train"),
        "{err}"
    );
}

#[test]
fn config_errors_name_the_key_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[train]\nseeds = [1]\nmax_epoch = 3\n").unwrap();
    let out = binary()
        .args(["train", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("max_epoch") && err.contains("line 3"), "{err}");

    std::fs::write(
        &cfg,
        "[model]\ndepth = 3\n[train]\ncells = [\"pbp/none\"]\n",
    )
    .unwrap();
    let out = binary()
        .args(["train", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(!out.status.success());
    assert!(err.contains("[model]") && err.contains("depth"), "{err}");
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[simulate]\nn_train = 1\nn_val = 1\nn_test = 1\n").unwrap();
    let root = dir.path().join("from-env");
    let status = binary()
        .env(OUT_ENV, &root)
        .args(["simulate", "--seed", "4", "--config"])
        .arg(&cfg)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(root.join("dataset").join("splits.toml").exists());
    let spec = std::fs::read_to_string(root.join("dataset").join("phantom.toml")).unwrap();
    assert!(spec.contains("seed = 4"), "{spec}");
}
