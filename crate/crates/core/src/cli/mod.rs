//! Command-line orchestration: simulate, train, evaluate and report.
//!
//! Output layout under `--out`:
//!
//! ```text
//! dataset/                       images/, masks/, splits.toml, phantom.toml, dataset.toml
//! runs/<cell>/                   checkpoint.bin, epochs.csv, cell.toml
//! manifest.toml                  run manifest of every trained cell
//! eval/<variant>/<aug>/          per_sample.csv, grid_seed<k>.csv, grid_seed<k>_jfast.csv
//! eval/aggregate.csv
//! report/summary.csv, report/grids/<variant>__<aug>__<sample>.csv
//! ```

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{load_stems, Splits};
use crate::phantom::make_synthetic_dataset;
use crate::rng::{fingerprint, parallel_map};
use crate::shift_eval::{
    aggregate, aggregate_stats, eval_grid, read_per_sample, write_aggregate, write_grids,
    write_per_sample_runs, ConsistencyReport, SampleStat, ShiftGrid, GRID, SHIFT,
};
use crate::training::{progress_printer, train, write_epoch_log};
use crate::unet::{build_unet, read_checkpoint, write_checkpoint};
use crate::{Error, Result};

pub use config::{
    variant_dir, Cell, DataSection, EvaluateSection, ModelSection, RunConfig, SimulateSection,
    TrainSection,
};

pub const OUT_ENV: &str = "SHIFTSEG_OUT";
pub const DEFAULT_OUT: &str = "shiftseg-out";
pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Parser)]
#[command(
    name = "shiftseg",
    version,
    about = "Shift-consistency experiments for anti-aliased U-Nets"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Configuration file; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output root.
    #[arg(long, global = true, env = OUT_ENV, default_value = DEFAULT_OUT)]
    pub out: PathBuf,
    /// Cells or samples processed concurrently.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    /// Phantom seed for `simulate`; restricts the seed list for `train` and `evaluate`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Generate the synthetic phantom dataset.
    Simulate,
    /// Train every cell of the run matrix.
    Train,
    /// Run the translation sweep on every trained cell.
    Evaluate,
    /// Summarize evaluation results.
    Report,
}

/// Resolved inputs shared by every command.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
    pub workers: usize,
}

impl Context {
    pub fn from_cli(cli: &Cli) -> Result<Self> {
        let mut config = match &cli.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = cli.seed {
            match cli.command {
                Command::Simulate => config.phantom.seed = seed,
                _ => config.train.seeds = vec![seed],
            }
        }
        config.validate()?;
        Ok(Self {
            config,
            out: cli.out.clone(),
            workers: cli.workers.max(1),
        })
    }

    pub fn dataset_root(&self) -> PathBuf {
        self.config.dataset_root(&self.out)
    }

    pub fn cell_dir(&self, cell: &Cell) -> PathBuf {
        self.out.join("runs").join(cell.name())
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let ctx = Context::from_cli(cli)?;
    match cli.command {
        Command::Simulate => cmd_simulate(&ctx).map(|_| ()),
        Command::Train => cmd_train(&ctx, &mut std::io::stderr()).map(|_| ()),
        Command::Evaluate => cmd_evaluate(&ctx).map(|_| ()),
        Command::Report => cmd_report(&ctx.out).map(|_| ()),
    }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    fs::write(p, text).map_err(|e| Error::io(p, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub tool_version: String,
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub fingerprint: String,
}

/// Hash of the split manifest and every image and mask file.
pub fn dataset_fingerprint(root: &Path) -> Result<String> {
    let splits = Splits::read(root)?;
    let mut bytes = toml::to_string(&splits)
        .expect("splits serialize")
        .into_bytes();
    for stem in splits.train.iter().chain(&splits.val).chain(&splits.test) {
        for sub in ["images", "masks"] {
            let p = root.join(sub).join(format!("{stem}.pgm"));
            bytes.extend(fs::read(&p).map_err(|e| Error::io(&p, e))?);
        }
    }
    Ok(fingerprint(&bytes, 16))
}

pub fn cmd_simulate(ctx: &Context) -> Result<DatasetManifest> {
    let root = ctx.dataset_root();
    let s = &ctx.config.simulate;
    make_synthetic_dataset(
        &root,
        (s.n_train, s.n_val, s.n_test),
        &ctx.config.phantom,
        ctx.workers,
    )?;
    let manifest = DatasetManifest {
        tool_version: TOOL_VERSION.into(),
        seed: ctx.config.phantom.seed,
        n_train: s.n_train,
        n_val: s.n_val,
        n_test: s.n_test,
        fingerprint: dataset_fingerprint(&root)?,
    };
    write_text(
        &root.join("dataset.toml"),
        &toml::to_string(&manifest).expect("serializes"),
    )?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub variant: String,
    pub aug_mode: String,
    pub seed: u64,
    pub run_id: String,
    pub checkpoint: String,
    pub epoch_log: String,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs_run: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub dataset_fingerprint: String,
    pub config: String,
    pub cells: Vec<CellRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.toml";

impl RunManifest {
    pub fn read(out: &Path) -> Result<Option<Self>> {
        let p = out.join(MANIFEST_FILE);
        if !p.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        toml::from_str(&text)
            .map(Some)
            .map_err(|e| Error::format(&p, e.to_string()))
    }

    fn write(&self, out: &Path) -> Result<()> {
        write_text(
            &out.join(MANIFEST_FILE),
            &toml::to_string(self).expect("serializes"),
        )
    }
}

/// Run id of a cell: its name plus a hash of the configuration and dataset.
pub fn run_id(ctx: &Context, cell: &Cell, dataset_fp: &str) -> Result<String> {
    let model = build_unet::<f32>(ctx.config.unet_config(&cell.variant)?, cell.seed)?;
    let fp = ctx.config.train_config(cell.aug)?.fingerprint(&model);
    Ok(format!(
        "{}-{}",
        cell.name(),
        fingerprint(format!("{fp}{dataset_fp}").as_bytes(), 8)
    ))
}

fn train_cell(
    ctx: &Context,
    cell: &Cell,
    dataset_fp: &str,
    log: &Mutex<&mut (dyn Write + Send)>,
) -> Result<CellRecord> {
    let dir = ctx.cell_dir(cell);
    let id = run_id(ctx, cell, dataset_fp)?;
    let record_path = dir.join("cell.toml");
    if let Ok(text) = fs::read_to_string(&record_path) {
        if let Ok(done) = toml::from_str::<CellRecord>(&text) {
            if done.run_id == id && dir.join(&done.checkpoint).exists() {
                writeln!(log.lock().unwrap(), "{id}: already complete, skipping").ok();
                return Ok(done);
            }
        }
    }
    create_dir(&dir)?;
    let root = ctx.dataset_root();
    let splits = Splits::read(&root)?;
    let train_set = load_stems(&root, &splits.train)?;
    let val_set = load_stems(&root, &splits.val)?;
    let cfg = ctx.config.train_config(cell.aug)?;
    let mut model = build_unet::<f32>(ctx.config.unet_config(&cell.variant)?, cell.seed)?;
    let mut lines = Vec::new();
    let outcome = train(
        &cfg,
        &mut model,
        cell.seed,
        &id,
        &train_set,
        &val_set,
        progress_printer(&mut lines),
    )?;
    log.lock().unwrap().write_all(&lines).ok();
    write_checkpoint(
        &dir.join("checkpoint.bin"),
        &outcome.best.model,
        &outcome.best.meta,
    )?;
    write_epoch_log(&dir.join("epochs.csv"), &outcome.log)?;
    let record = CellRecord {
        variant: cell.variant.clone(),
        aug_mode: cell.aug.to_string(),
        seed: cell.seed,
        run_id: id,
        checkpoint: "checkpoint.bin".into(),
        epoch_log: "epochs.csv".into(),
        best_epoch: outcome.best.meta.epoch,
        best_val_loss: outcome.best.meta.val_loss,
        epochs_run: outcome.log.len(),
    };
    write_text(&record_path, &toml::to_string(&record).expect("serializes"))?;
    Ok(record)
}

/// Trains every cell, skipping cells already completed with the same run id.
/// Fails after all cells ran if any of them failed, naming each failure.
pub fn cmd_train(ctx: &Context, log: &mut (dyn Write + Send)) -> Result<RunManifest> {
    let root = ctx.dataset_root();
    let dataset_fp = dataset_fingerprint(&root)?;
    let cells = ctx.config.cells()?;
    let log = Mutex::new(log);
    let results = parallel_map(&cells, ctx.workers, |cell| {
        train_cell(ctx, cell, &dataset_fp, &log)
    });
    let log = log.into_inner().unwrap();

    let mut by_id: BTreeMap<String, CellRecord> = RunManifest::read(&ctx.out)?
        .filter(|m| m.dataset_fingerprint == dataset_fp)
        .map(|m| {
            m.cells
                .into_iter()
                .map(|c| (format!("{}/{}/{}", c.variant, c.aug_mode, c.seed), c))
                .collect()
        })
        .unwrap_or_default();
    let mut failed = Vec::new();
    for (cell, r) in cells.iter().zip(results) {
        match r {
            Ok(rec) => {
                by_id.insert(
                    format!("{}/{}/{}", rec.variant, rec.aug_mode, rec.seed),
                    rec,
                );
            }
            Err(e) => {
                writeln!(log, "cell {} failed: {e}", cell.name()).ok();
                failed.push(cell.name());
            }
        }
    }
    let manifest = RunManifest {
        tool_version: TOOL_VERSION.into(),
        dataset_fingerprint: dataset_fp,
        config: ctx.config.to_toml(),
        cells: by_id.into_values().collect(),
    };
    create_dir(&ctx.out)?;
    manifest.write(&ctx.out)?;
    if failed.is_empty() {
        Ok(manifest)
    } else {
        Err(Error::CellsFailed(failed))
    }
}

/// Evaluation output of one `(variant, augmentation)` pair.
#[derive(Debug, Clone)]
pub struct EvalGroup {
    pub variant: String,
    pub aug_mode: String,
    pub report: ConsistencyReport,
}

fn eval_dir(out: &Path, variant: &str, aug: &str) -> PathBuf {
    out.join("eval").join(variant_dir(variant)).join(aug)
}

/// Runs the translation sweep for every cell; a missing checkpoint is an
/// error naming its cell.
pub fn cmd_evaluate(ctx: &Context) -> Result<Vec<EvalGroup>> {
    let cells = ctx.config.cells()?;
    for cell in &cells {
        let p = ctx.cell_dir(cell).join("checkpoint.bin");
        if !p.exists() {
            return Err(Error::MissingCheckpoint {
                cell: cell.name(),
                path: p,
            });
        }
    }
    let root = ctx.dataset_root();
    let test = load_stems(&root, &Splits::read(&root)?.test)?;
    let eps = ctx.config.train.epsilon;
    let scoring = ctx.config.scoring()?;
    let results = parallel_map(
        &cells,
        ctx.workers,
        |cell| -> Result<(String, Vec<ShiftGrid>)> {
            let ck = read_checkpoint(&ctx.cell_dir(cell).join("checkpoint.bin"))?;
            let grids = test
                .iter()
                .map(|s| eval_grid(&ck.model, s, eps, scoring))
                .collect::<Result<Vec<_>>>()?;
            Ok((ck.meta.run_id, grids))
        },
    );

    let mut groups: BTreeMap<(String, String), Vec<(u64, String, Vec<ShiftGrid>)>> =
        BTreeMap::new();
    let mut order = Vec::new();
    for (cell, r) in cells.iter().zip(results) {
        let (run_id, grids) = r?;
        let key = (cell.variant.clone(), cell.aug.to_string());
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups
            .entry(key)
            .or_default()
            .push((cell.seed, run_id, grids));
    }
    let mut out = Vec::new();
    for key in order {
        let runs = &groups[&key];
        let dir = eval_dir(&ctx.out, &key.0, &key.1);
        create_dir(&dir)?;
        for (seed, _, grids) in runs {
            write_grids(&dir.join(format!("grid_seed{seed}.csv")), grids, true)?;
            write_grids(
                &dir.join(format!("grid_seed{seed}_jfast.csv")),
                grids,
                false,
            )?;
        }
        let per_sample: Vec<_> = runs
            .iter()
            .map(|(s, id, g)| (id.clone(), *s, g.clone()))
            .collect();
        write_per_sample_runs(&dir.join("per_sample.csv"), &per_sample)?;
        let report = aggregate(
            &runs
                .iter()
                .map(|(s, _, g)| (*s, g.clone()))
                .collect::<Vec<_>>(),
        )?;
        out.push(EvalGroup {
            variant: key.0,
            aug_mode: key.1,
            report,
        });
    }
    let rows: Vec<_> = out
        .iter()
        .map(|g| (g.variant.clone(), g.aug_mode.clone(), g.report.clone()))
        .collect();
    write_aggregate(&ctx.out.join("eval").join("aggregate.csv"), &rows)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub variant: String,
    pub aug_mode: String,
    pub mean_of_means: f64,
    pub mean_of_variances: f64,
    pub n_seeds: usize,
    pub n_samples: usize,
}

fn read_grid_file(path: &Path) -> Result<BTreeMap<String, [[f64; GRID]; GRID]>> {
    #[derive(Deserialize)]
    struct Row {
        sample_id: String,
        i: isize,
        j: isize,
        loss: f64,
    }
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    let mut out: BTreeMap<String, [[f64; GRID]; GRID]> = BTreeMap::new();
    for (k, row) in r.deserialize::<Row>().enumerate() {
        let row_no = k + 2;
        let row = row.map_err(|e| Error::format(path, format!("row {row_no}: {e}")))?;
        if row.i.abs() > SHIFT || row.j.abs() > SHIFT {
            return Err(Error::format(
                path,
                format!("row {row_no}: translation out of range"),
            ));
        }
        out.entry(row.sample_id).or_insert([[0.0; GRID]; GRID])[(row.i + SHIFT) as usize]
            [(row.j + SHIFT) as usize] = row.loss;
    }
    Ok(out)
}

/// Recomputes the variant-by-augmentation summary from the per-sample CSVs
/// and writes seed-averaged 11x11 grids for plotting.
pub fn cmd_report(out: &Path) -> Result<Vec<SummaryRow>> {
    let eval = out.join("eval");
    let mut files = Vec::new();
    if let Ok(variants) = fs::read_dir(&eval) {
        for v in variants.flatten().filter(|e| e.path().is_dir()) {
            for a in fs::read_dir(v.path())
                .map_err(|e| Error::io(v.path(), e))?
                .flatten()
            {
                let p = a.path().join("per_sample.csv");
                if p.exists() {
                    files.push((v.file_name(), a.file_name(), p));
                }
            }
        }
    }
    if files.is_empty() {
        return Err(Error::NoInput(eval));
    }
    files.sort();
    let report_dir = out.join("report");
    let grid_dir = report_dir.join("grids");
    create_dir(&grid_dir)?;
    let mut rows = Vec::new();
    for (variant, aug, path) in files {
        let (variant, aug) = (
            variant.to_string_lossy().into_owned(),
            aug.to_string_lossy().into_owned(),
        );
        let mut runs: BTreeMap<u64, Vec<SampleStat>> = BTreeMap::new();
        for (_, stat) in read_per_sample(&path)? {
            runs.entry(stat.seed).or_default().push(stat);
        }
        let report = aggregate_stats(&runs.into_iter().collect::<Vec<_>>())?;
        rows.push(SummaryRow {
            variant: variant.clone(),
            aug_mode: aug.clone(),
            mean_of_means: report.mean_of_means,
            mean_of_variances: report.mean_of_variances,
            n_seeds: report.n_seeds,
            n_samples: report.n_samples,
        });
        let dir = path.parent().expect("file in a directory");
        let mut sums: BTreeMap<String, ([[f64; GRID]; GRID], usize)> = BTreeMap::new();
        let mut grid_files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .flatten()
            .map(|e| e.path())
            .filter(|p| {
                let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
                name.starts_with("grid_seed") && !name.ends_with("_jfast.csv")
            })
            .collect();
        grid_files.sort();
        for gf in grid_files {
            for (sample, g) in read_grid_file(&gf)? {
                let e = sums.entry(sample).or_insert(([[0.0; GRID]; GRID], 0));
                for (a, b) in e.0.iter_mut().flatten().zip(g.iter().flatten()) {
                    *a += b;
                }
                e.1 += 1;
            }
        }
        for (sample, (g, n)) in sums {
            let mut text = String::new();
            // Rows are j (vertical) from -5 to 5, columns i from -5 to 5.
            for j in 0..GRID {
                let line: Vec<String> = (0..GRID)
                    .map(|i| format!("{:e}", g[i][j] / n as f64))
                    .collect();
                text.push_str(&line.join(","));
                text.push('\n');
            }
            write_text(
                &grid_dir.join(format!("{variant}__{aug}__{sample}.csv")),
                &text,
            )?;
        }
    }
    let path = report_dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::format(&path, e.to_string()))?;
    let csv_err = |e: csv::Error| Error::format(&path, e.to_string());
    w.write_record(crate::shift_eval::AGGREGATE_HEADER)
        .map_err(csv_err)?;
    for r in &rows {
        w.write_record([
            r.variant.clone(),
            r.aug_mode.clone(),
            format!("{:e}", r.mean_of_means),
            format!("{:e}", r.mean_of_variances),
            r.n_seeds.to_string(),
            r.n_samples.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}
