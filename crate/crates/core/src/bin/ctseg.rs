use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ctseg::config::KvFile;
use ctseg::data::io::{load_annotations, save_annotations};
use ctseg::data::{generate, Dataset};
use ctseg::eval::{evaluate, EvalReport};
use ctseg::model::Model;
use ctseg::train::recipe::{run_recipe_on, ExperimentConfig, Recipe, RecipeOutput};
use ctseg::train::train;
use ctseg::{Error, Result};

/// Environment variable holding the worker thread count.
const THREADS_VAR: &str = "CTSEG_THREADS";

#[derive(Parser)]
#[command(name = "ctseg", about = "Crop-then-segment mask head lab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Key-value config file with data./model./train./experiment. sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed; overrides train.seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Use a dataset written by gen-data instead of generating one.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset as annotations.json plus PNGs.
    GenData(Common),
    /// Train one model and write its checkpoint, loss trace and report.
    Train(Common),
    /// Evaluate a checkpoint on the val split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory written by train.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Single-factor grid: gt-vs-proposals or depth-sweep.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "depth-sweep")]
        recipe: String,
    },
    /// Hourglass ablations (no long-range skips, no encoder-decoder).
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "hg-ablations")]
        recipe: String,
    },
    /// Source x target transfer ratio matrix.
    SingleSource(Common),
    /// Teacher pseudo-labels, then a student trained on them.
    TwoStage(Common),
    /// Aggregate recipe CSVs found in --out into a seed-mean table.
    Report {
        #[arg(long)]
        out: PathBuf,
    },
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("{THREADS_VAR}={v} is not a thread count")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::InvalidArgument(format!("{THREADS_VAR}: {e}")))
}

fn experiment(c: &Common) -> Result<ExperimentConfig> {
    let cfg = match &c.config {
        Some(path) => {
            let kv = KvFile::load(path)?;
            let base = path.parent().unwrap_or(Path::new("."));
            ExperimentConfig::from_kv(&kv, base, c.seed)?
        }
        None => {
            let seed = c.seed.ok_or_else(|| {
                Error::InvalidArgument("no seed; pass --seed or a config with train.seed".into())
            })?;
            ExperimentConfig::with_seed(seed)
        }
    };
    fs::create_dir_all(&c.out).map_err(|e| Error::io(&c.out, e))?;
    let resolved = c.out.join("resolved.cfg");
    fs::write(&resolved, cfg.to_kv()).map_err(|e| Error::io(&resolved, e))?;
    Ok(cfg)
}

fn dataset(c: &Common, cfg: &ExperimentConfig) -> Result<Dataset> {
    match &c.data {
        Some(dir) => load_annotations(dir),
        None => generate(&cfg.data),
    }
}

fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    let mut csv = format!("{}\n", EvalReport::CSV_HEADER);
    for row in report.csv_rows() {
        csv.push_str(&row);
        csv.push('\n');
    }
    let p = dir.join("report.csv");
    fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
    print!("{}", report.summary());
    Ok(())
}

fn run_grid(c: &Common, name: &str) -> Result<()> {
    let recipe = Recipe::parse(name)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown recipe '{name}'")))?;
    let cfg = experiment(c)?;
    let data = dataset(c, &cfg)?;
    let out: RecipeOutput = run_recipe_on(recipe, &cfg, &data, Some(&c.out))?;
    out.write(&c.out)?;
    print!("{}", out.summary_text());
    print!("{}", out.deltas_csv());
    Ok(())
}

/// Seed mean and spread of every numeric summary column, per recipe and cell.
fn report(out: &Path) -> Result<()> {
    let mut found = false;
    let mut entries: Vec<PathBuf> = fs::read_dir(out)
        .map_err(|e| Error::io(out, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for path in entries {
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        if path.extension().and_then(|s| s.to_str()) != Some("csv") || Recipe::parse(stem).is_none()
        {
            continue;
        }
        found = true;
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
        let mut cells: Vec<(String, Vec<Vec<f64>>)> = Vec::new();
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            let values: Vec<f64> = f[4..]
                .iter()
                .map(|v| v.parse().unwrap_or(f64::NAN))
                .collect();
            match cells.iter_mut().find(|(l, _)| l == f[1]) {
                Some((_, v)) => v.push(values),
                None => cells.push((f[1].to_string(), vec![values])),
            }
        }
        println!("{stem}");
        println!("  {:<20} {}", "cell", header[4..].join("  "));
        for (label, rows) in cells {
            let cols: Vec<String> = (0..header.len() - 4)
                .map(|j| {
                    let v: Vec<f64> = rows.iter().map(|r| r[j]).collect();
                    let mean = v.iter().sum::<f64>() / v.len() as f64;
                    let spread = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                        - v.iter().cloned().fold(f64::INFINITY, f64::min);
                    format!("{mean:.4}±{:.4}", spread / 2.0)
                })
                .collect();
            println!("  {label:<20} {}", cols.join("  "));
        }
    }
    if !found {
        return Err(Error::InvalidArgument(format!(
            "no recipe CSVs in {}",
            out.display()
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::GenData(c) => {
            let cfg = experiment(&c)?;
            let data = generate(&cfg.data)?;
            save_annotations(&data, &c.out)?;
            let masked = data
                .train
                .iter()
                .flat_map(|r| &r.annotations)
                .filter(|a| a.has_mask())
                .count();
            let total: usize = data.records().map(|r| r.annotations.len()).sum();
            println!(
                "wrote {} train and {} val images, {total} instances ({masked} train masks) to {}",
                data.train.len(),
                data.val.len(),
                c.out.display()
            );
            Ok(())
        }
        Command::Train(c) => {
            let cfg = experiment(&c)?;
            let data = dataset(&c, &cfg)?;
            let mut model = Model::<f32>::new(&cfg.model, cfg.train.seed)?;
            let ckpt = c.out.join("checkpoint");
            let outcome = train(&mut model, &data.train, &data.val, &cfg.train, Some(&ckpt))?;
            let mut trace = "step,loss,update_norm\n".to_string();
            for (i, (l, n)) in outcome
                .loss_trace
                .iter()
                .zip(&outcome.update_norms)
                .enumerate()
            {
                trace += &format!("{},{l:.6},{n:.6e}\n", i + 1);
            }
            let p = c.out.join("loss.csv");
            fs::write(&p, trace).map_err(|e| Error::io(&p, e))?;
            let report = evaluate(
                &model,
                &data.val,
                &data.config.seen,
                "train",
                cfg.train.seed,
                &cfg.hash(),
            )?;
            write_report(&c.out, &report)
        }
        Command::Eval { common, checkpoint } => {
            let cfg = experiment(&common)?;
            let data = dataset(&common, &cfg)?;
            let model = Model::<f32>::load(&checkpoint)?;
            let report = evaluate(
                &model,
                &data.val,
                &data.config.seen,
                "eval",
                cfg.train.seed,
                &cfg.hash(),
            )?;
            write_report(&common.out, &report)
        }
        Command::Sweep { common, recipe } | Command::Ablate { common, recipe } => {
            run_grid(&common, &recipe)
        }
        Command::SingleSource(c) => run_grid(&c, Recipe::SingleSource.name()),
        Command::TwoStage(c) => run_grid(&c, Recipe::TwoStage.name()),
        Command::Report { out } => report(&out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
