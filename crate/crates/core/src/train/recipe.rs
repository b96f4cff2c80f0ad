//! Named experiment grids with paired seeds and CSV reports.
//!
//! Every cell of a recipe trains on the same generated dataset. Within a seed,
//! model initialization and batch order use that seed in every cell, so a
//! per-seed difference between cells is attributable to the cell's factor.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use super::{train, TrainConfig, TrainOutcome};
use crate::config::{parse_value, unknown_key, KvFile};
use crate::data::{export_pseudo_labels, generate, Category, Dataset, DatasetConfig, Record};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::heads::MaskHeadSpec;
use crate::model::{BoxMode, Model, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Recipe {
    GtVsProposals,
    DepthSweep,
    HgAblations,
    SingleSource,
    TwoStage,
}

impl Recipe {
    pub const ALL: [Recipe; 5] = [
        Recipe::GtVsProposals,
        Recipe::DepthSweep,
        Recipe::HgAblations,
        Recipe::SingleSource,
        Recipe::TwoStage,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Recipe::GtVsProposals => "gt-vs-proposals",
            Recipe::DepthSweep => "depth-sweep",
            Recipe::HgAblations => "hg-ablations",
            Recipe::SingleSource => "single-source",
            Recipe::TwoStage => "two-stage",
        }
    }

    pub fn parse(s: &str) -> Option<Recipe> {
        Recipe::ALL.into_iter().find(|r| r.name() == s)
    }
}

pub const DEPTH_SWEEP_HEADS: [&str; 6] = [
    "resnet-4",
    "resnet-12",
    "resnet-20",
    "hourglass-10",
    "hourglass-20",
    "hourglass-52",
];

/// Dataset, model and train configs plus the seed list shared by all cells.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub data: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    /// Head of the two-stage student and of its directly trained twin.
    pub student_head: MaskHeadSpec,
}

impl ExperimentConfig {
    /// Three consecutive seeds starting at `seed`, every other value default.
    pub fn with_seed(seed: u64) -> Self {
        let model = ModelConfig::default();
        let student_head = MaskHeadSpec::preset("resnet-4")
            .expect("preset")
            .with_width_divisor(model.head.width_divisor);
        ExperimentConfig {
            data: DatasetConfig::default(),
            model,
            train: TrainConfig::with_seed(seed),
            seeds: vec![seed, seed + 1, seed + 2],
            student_head,
        }
    }

    /// Reads `data.`, `model.`, `train.` and `experiment.` keys.
    ///
    /// A seed is mandatory: either `train.seed` or `seed_override`. Relative
    /// head-spec paths resolve against `base_dir`.
    pub fn from_kv(kv: &KvFile, base_dir: &Path, seed_override: Option<u64>) -> Result<Self> {
        kv.check_sections(&["data", "model", "train", "experiment"])?;
        let origin = &kv.origin;
        let train_entries = kv.section("train");
        let seed = match seed_override {
            Some(s) => s,
            None => {
                let e = train_entries
                    .iter()
                    .find(|e| e.key == "seed")
                    .ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "{origin}: no seed; set train.seed or pass --seed"
                        ))
                    })?;
                parse_value(e, origin)?
            }
        };
        let mut cfg = ExperimentConfig::with_seed(seed);
        for e in kv.section("data") {
            cfg.data.apply(&e, origin)?;
        }
        cfg.model
            .apply_all(&kv.section("model"), origin, base_dir)?;
        for e in train_entries.iter().filter(|e| e.key != "seed") {
            cfg.train.apply(e, origin)?;
        }
        cfg.student_head = cfg
            .student_head
            .with_width_divisor(cfg.model.head.width_divisor);
        let mut student_divisor = None;
        for e in kv.section("experiment") {
            match e.key.as_str() {
                "seeds" => {
                    cfg.seeds = e
                        .value
                        .split(',')
                        .map(|t| {
                            t.trim().parse().map_err(|err| {
                                Error::parse(origin, e.line, format!("seeds: '{t}': {err}"))
                            })
                        })
                        .collect::<Result<_>>()?
                }
                "student_head" => {
                    cfg.student_head = MaskHeadSpec::preset(&e.value)
                        .map_err(|err| Error::parse(origin, e.line, err.to_string()))?
                }
                "student_width_divisor" => student_divisor = Some(parse_value(&e, origin)?),
                _ => return Err(unknown_key(&e, origin)),
            }
        }
        let divisor = student_divisor.unwrap_or(cfg.model.head.width_divisor);
        cfg.student_head = cfg.student_head.with_width_divisor(divisor);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.student_head.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument("experiment: empty seed list".into()));
        }
        Ok(())
    }

    /// Canonical text of every setting that affects results.
    pub fn to_kv(&self) -> String {
        let mut s = self.data.to_kv("data.");
        s += &self.model.to_kv("model.");
        for line in self.model.head.to_text().lines() {
            let _ = writeln!(s, "# head {line}");
        }
        s += &self.train.to_kv("train.");
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(s, "experiment.seeds = {}", seeds.join(","));
        for line in self.student_head.to_text().lines() {
            let _ = writeln!(s, "# student {line}");
        }
        s
    }

    /// First 12 hex digits of the SHA-256 of [`Self::to_kv`].
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_kv().as_bytes());
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }
}

/// One trained and evaluated grid cell.
pub struct CellResult {
    pub label: String,
    pub seed: u64,
    pub report: EvalReport,
    pub outcome: TrainOutcome,
    pub model: Model<f32>,
}

/// Trains a fresh model seeded by `seed` and evaluates it on `val`.
#[allow(clippy::too_many_arguments)]
pub fn run_cell(
    label: &str,
    model: &ModelConfig,
    train_records: &[Record],
    val: &[Record],
    eval_seen: &[Category],
    train_cfg: &TrainConfig,
    seed: u64,
    config_hash: &str,
) -> Result<CellResult> {
    let mut m = Model::<f32>::new(model, seed)?;
    let cfg = TrainConfig {
        seed,
        ..train_cfg.clone()
    };
    let started = std::time::Instant::now();
    let outcome = train(&mut m, train_records, val, &cfg, None)?;
    let report = evaluate(&m, val, eval_seen, label, seed, config_hash)?;
    log::info!(
        "cell {label} seed {seed}: {} steps in {:.1}s, unseen mIOU {:.3}",
        cfg.steps,
        started.elapsed().as_secs_f64(),
        report.miou.unseen.unwrap_or(f64::NAN)
    );
    Ok(CellResult {
        label: label.to_string(),
        seed,
        report,
        outcome,
        model: m,
    })
}

/// A grid cell's label and model.
#[derive(Clone, Debug)]
pub struct Cell {
    pub label: String,
    pub model: ModelConfig,
}

/// Cells of the single-factor grid recipes.
pub fn grid(recipe: Recipe, exp: &ExperimentConfig) -> Result<Vec<Cell>> {
    let base = &exp.model;
    let divisor = base.head.width_divisor;
    let with_head = |head: MaskHeadSpec| ModelConfig {
        head,
        ..base.clone()
    };
    let cells = match recipe {
        Recipe::GtVsProposals => [BoxMode::GtOnly, BoxMode::ProposalsPlusGt]
            .into_iter()
            .map(|box_mode| Cell {
                label: box_mode.name().to_string(),
                model: ModelConfig {
                    box_mode,
                    ..base.clone()
                },
            })
            .collect(),
        Recipe::DepthSweep => DEPTH_SWEEP_HEADS
            .iter()
            .map(|name| {
                Ok(Cell {
                    label: name.to_string(),
                    model: with_head(MaskHeadSpec::preset(name)?.with_width_divisor(divisor)),
                })
            })
            .collect::<Result<_>>()?,
        Recipe::HgAblations => {
            let hg = MaskHeadSpec::preset("hourglass-20")?.with_width_divisor(divisor);
            vec![
                Cell {
                    label: "default".into(),
                    model: with_head(hg.clone()),
                },
                Cell {
                    label: "no_lrs".into(),
                    model: with_head(hg.clone().without_long_range_skips()),
                },
                Cell {
                    label: "no_ed".into(),
                    model: with_head(hg.without_encoder_decoder()),
                },
            ]
        }
        Recipe::SingleSource | Recipe::TwoStage => {
            return Err(Error::InvalidArgument(format!(
                "{} is not a single-factor grid",
                recipe.name()
            )))
        }
    };
    for c in &cells {
        c.model
            .validate()
            .map_err(|e| Error::InvalidArgument(format!("cell {}: {e}", c.label)))?;
    }
    Ok(cells)
}

/// Headline numbers of one cell and seed.
#[derive(Clone, Debug, PartialEq)]
pub struct CellSummary {
    pub label: String,
    pub seed: u64,
    pub report: EvalReport,
    pub final_loss: f64,
}

impl CellSummary {
    fn from_result(r: &CellResult) -> Self {
        CellSummary {
            label: r.label.clone(),
            seed: r.seed,
            report: r.report.clone(),
            final_loss: r.outcome.final_loss().unwrap_or(f64::NAN),
        }
    }

    pub fn unseen_miou(&self) -> f64 {
        self.report.miou.unseen.unwrap_or(f64::NAN)
    }

    pub fn seen_miou(&self) -> f64 {
        self.report.miou.seen.unwrap_or(f64::NAN)
    }
}

/// Source × target mIOU ratios, truncated at 1.
#[derive(Clone, Debug, PartialEq)]
pub struct RatioMatrix {
    pub sources: Vec<Category>,
    pub targets: Vec<Category>,
    /// `[seed][source][target]`.
    pub per_seed: Vec<Vec<Vec<f64>>>,
}

impl RatioMatrix {
    /// Seed-mean ratio for each source and target.
    pub fn mean(&self) -> Vec<Vec<f64>> {
        let n = self.per_seed.len().max(1) as f64;
        (0..self.sources.len())
            .map(|s| {
                (0..self.targets.len())
                    .map(|t| self.per_seed.iter().map(|m| m[s][t]).sum::<f64>() / n)
                    .collect()
            })
            .collect()
    }
}

/// Everything a recipe run produces.
#[derive(Clone, Debug, PartialEq)]
pub struct RecipeOutput {
    pub recipe: Recipe,
    pub config_hash: String,
    /// Seed-major, cell order within a seed.
    pub cells: Vec<CellSummary>,
    pub ratios: Option<RatioMatrix>,
}

fn fmt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| format!("{x:.6}"))
}

impl RecipeOutput {
    pub const SUMMARY_HEADER: &'static str =
        "recipe,cell,seed,config_hash,miou_all,miou_seen,miou_unseen,map_all,map_seen,map_unseen,final_loss";

    /// One row per cell and seed.
    pub fn summary_csv(&self) -> String {
        let mut s = format!("{}\n", Self::SUMMARY_HEADER);
        for c in &self.cells {
            let r = &c.report;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{:.6}",
                self.recipe.name(),
                c.label,
                c.seed,
                self.config_hash,
                fmt(r.miou.all),
                fmt(r.miou.seen),
                fmt(r.miou.unseen),
                fmt(r.map(None)),
                fmt(r.map(Some(true))),
                fmt(r.map(Some(false))),
                c.final_loss
            );
        }
        s
    }

    /// Every per-category metric of every cell.
    pub fn metrics_csv(&self) -> String {
        let mut s = format!("{}\n", EvalReport::CSV_HEADER);
        for c in &self.cells {
            for row in c.report.csv_rows() {
                s.push_str(&row);
                s.push('\n');
            }
        }
        s
    }

    /// Per-seed differences against the first cell of each seed, followed by
    /// seed medians.
    pub fn deltas_csv(&self) -> String {
        let mut s = "cell,reference,seed,delta_miou_seen,delta_miou_unseen\n".to_string();
        let mut by_label: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
        for seed_cells in self.per_seed() {
            let Some(reference) = seed_cells.first() else {
                continue;
            };
            for c in &seed_cells[1..] {
                let ds = c.seen_miou() - reference.seen_miou();
                let du = c.unseen_miou() - reference.unseen_miou();
                let _ = writeln!(
                    s,
                    "{},{},{},{ds:.6},{du:.6}",
                    c.label, reference.label, c.seed
                );
                match by_label.iter_mut().find(|(l, _)| *l == c.label) {
                    Some((_, v)) => v.push((ds, du)),
                    None => by_label.push((c.label.clone(), vec![(ds, du)])),
                }
            }
        }
        let reference = self.cells.first().map_or("", |c| c.label.as_str());
        for (label, v) in by_label {
            let seen = median(v.iter().map(|p| p.0).collect());
            let unseen = median(v.iter().map(|p| p.1).collect());
            let _ = writeln!(s, "{label},{reference},median,{seen:.6},{unseen:.6}");
        }
        s
    }

    pub fn ratio_csv(&self) -> Option<String> {
        let m = self.ratios.as_ref()?;
        let mut s = "seed,source,target,ratio\n".to_string();
        let seeds: Vec<u64> = self
            .per_seed()
            .iter()
            .filter_map(|c| c.first().map(|x| x.seed))
            .collect();
        for (k, grid) in m.per_seed.iter().enumerate() {
            for (i, src) in m.sources.iter().enumerate() {
                for (j, tgt) in m.targets.iter().enumerate() {
                    let _ = writeln!(
                        s,
                        "{},{},{},{:.6}",
                        seeds[k],
                        src.name(),
                        tgt.name(),
                        grid[i][j]
                    );
                }
            }
        }
        for (i, src) in m.sources.iter().enumerate() {
            for (j, tgt) in m.targets.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "mean,{},{},{:.6}",
                    src.name(),
                    tgt.name(),
                    m.mean()[i][j]
                );
            }
        }
        Some(s)
    }

    /// Cells grouped by seed, in run order.
    pub fn per_seed(&self) -> Vec<Vec<&CellSummary>> {
        let mut out: Vec<Vec<&CellSummary>> = Vec::new();
        for c in &self.cells {
            match out.last_mut() {
                Some(group) if group[0].seed == c.seed => group.push(c),
                _ => out.push(vec![c]),
            }
        }
        out
    }

    pub fn summary_text(&self) -> String {
        let mut s = format!(
            "recipe {} (config {})\n",
            self.recipe.name(),
            self.config_hash
        );
        for c in &self.cells {
            s += &c.report.summary();
        }
        s
    }

    /// Writes `<recipe>.csv`, `<recipe>_metrics.csv`, `<recipe>_deltas.csv`,
    /// the ratio matrix when present, and a text summary into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let name = self.recipe.name();
        let mut files = vec![
            (format!("{name}.csv"), self.summary_csv()),
            (format!("{name}_metrics.csv"), self.metrics_csv()),
            (format!("{name}_deltas.csv"), self.deltas_csv()),
            (format!("{name}_summary.txt"), self.summary_text()),
        ];
        if let Some(r) = self.ratio_csv() {
            files.push((format!("{name}_ratios.csv"), r));
        }
        for (f, text) in files {
            let p = dir.join(f);
            fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Persists a finished cell so an aborted recipe keeps its partial results.
fn checkpoint_cell(out: Option<&Path>, hash: &str, c: &CellSummary) -> Result<()> {
    let Some(dir) = out else { return Ok(()) };
    let dir = dir.join("cells");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let p = dir.join(format!("{}_seed{}.csv", c.label, c.seed));
    let mut text = format!("# config {hash}\n{}\n", EvalReport::CSV_HEADER);
    for row in c.report.csv_rows() {
        text.push_str(&row);
        text.push('\n');
    }
    fs::write(&p, text).map_err(|e| Error::io(&p, e))
}

/// A unit of parallel work: one cell at one seed on a given training set.
struct Job<'a> {
    label: String,
    model: ModelConfig,
    train: &'a [Record],
    eval_seen: Vec<Category>,
    seed: u64,
}

fn run_jobs(
    jobs: &[Job<'_>],
    val: &[Record],
    exp: &ExperimentConfig,
    out: Option<&Path>,
) -> Result<Vec<CellSummary>> {
    let hash = exp.hash();
    let results: Vec<Result<CellSummary>> = jobs
        .par_iter()
        .map(|j| {
            let r = run_cell(
                &j.label,
                &j.model,
                j.train,
                val,
                &j.eval_seen,
                &exp.train,
                j.seed,
                &hash,
            )?;
            let summary = CellSummary::from_result(&r);
            checkpoint_cell(out, &hash, &summary)?;
            Ok(summary)
        })
        .collect();
    results.into_iter().collect()
}

/// Runs `recipe` on a freshly generated dataset.
pub fn run_recipe(
    recipe: Recipe,
    exp: &ExperimentConfig,
    out: Option<&Path>,
) -> Result<RecipeOutput> {
    exp.validate()?;
    let dataset = generate(&exp.data)?;
    run_recipe_on(recipe, exp, &dataset, out)
}

/// Runs `recipe` on an existing dataset; `exp.data` only labels the report.
pub fn run_recipe_on(
    recipe: Recipe,
    exp: &ExperimentConfig,
    dataset: &Dataset,
    out: Option<&Path>,
) -> Result<RecipeOutput> {
    let hash = exp.hash();
    let seen = dataset.config.seen.clone();
    match recipe {
        Recipe::SingleSource => return single_source(exp, dataset, out),
        Recipe::TwoStage => return two_stage(exp, dataset, out),
        _ => {}
    }
    let cells = grid(recipe, exp)?;
    let jobs: Vec<Job<'_>> = exp
        .seeds
        .iter()
        .flat_map(|&seed| cells.iter().map(move |c| (seed, c)))
        .map(|(seed, c)| Job {
            label: c.label.clone(),
            model: c.model.clone(),
            train: &dataset.train,
            eval_seen: seen.clone(),
            seed,
        })
        .collect();
    Ok(RecipeOutput {
        recipe,
        config_hash: hash,
        cells: run_jobs(&jobs, &dataset.val, exp, out)?,
        ratios: None,
    })
}

const ALL_LABEL: &str = "all";

fn single_source(
    exp: &ExperimentConfig,
    dataset: &Dataset,
    out: Option<&Path>,
) -> Result<RecipeOutput> {
    let targets = dataset.config.categories.clone();
    let sources = if dataset.config.seen.is_empty() {
        targets.clone()
    } else {
        dataset.config.seen.clone()
    };
    for &t in &targets {
        if !dataset
            .val
            .iter()
            .flat_map(|r| &r.annotations)
            .any(|a| a.category == t)
        {
            return Err(Error::InvalidArgument(format!(
                "single-source: category {} has zero val instances",
                t.name()
            )));
        }
    }
    for &s in &sources {
        if !dataset
            .train
            .iter()
            .flat_map(|r| &r.annotations)
            .any(|a| a.category == s)
        {
            return Err(Error::InvalidArgument(format!(
                "single-source: category {} has zero train instances",
                s.name()
            )));
        }
    }
    let full = dataset.with_seen(&targets);
    let singles: Vec<Dataset> = sources.iter().map(|&s| dataset.with_seen(&[s])).collect();
    let mut jobs = Vec::new();
    for &seed in &exp.seeds {
        jobs.push(Job {
            label: ALL_LABEL.into(),
            model: exp.model.clone(),
            train: &full.train,
            eval_seen: targets.clone(),
            seed,
        });
        for (&s, d) in sources.iter().zip(&singles) {
            jobs.push(Job {
                label: format!("source_{}", s.name()),
                model: exp.model.clone(),
                train: &d.train,
                eval_seen: vec![s],
                seed,
            });
        }
    }
    let cells = run_jobs(&jobs, &dataset.val, exp, out)?;
    let per_cat = |c: &CellSummary, t: Category| c.report.miou.per_category.get(&t).copied();
    let mut per_seed = Vec::new();
    for group in cells.chunks(sources.len() + 1) {
        let baseline = &group[0];
        let grid = group[1..]
            .iter()
            .map(|c| {
                targets
                    .iter()
                    .map(|&t| {
                        let (num, den) = (
                            per_cat(c, t).unwrap_or(0.0),
                            per_cat(baseline, t).unwrap_or(0.0),
                        );
                        if den > 0.0 {
                            (num / den).min(1.0)
                        } else {
                            1.0
                        }
                    })
                    .collect()
            })
            .collect();
        per_seed.push(grid);
    }
    Ok(RecipeOutput {
        recipe: Recipe::SingleSource,
        config_hash: exp.hash(),
        cells,
        ratios: Some(RatioMatrix {
            sources,
            targets,
            per_seed,
        }),
    })
}

pub const TEACHER_LABEL: &str = "teacher";
pub const STUDENT_LABEL: &str = "student";
pub const DIRECT_LABEL: &str = "direct";

/// Teacher on partial masks, student on the teacher's pseudo-labels, and the
/// student architecture trained directly on partial masks as the reference.
fn two_stage(
    exp: &ExperimentConfig,
    dataset: &Dataset,
    out: Option<&Path>,
) -> Result<RecipeOutput> {
    let hash = exp.hash();
    let seen = dataset.config.seen.clone();
    let student_model = ModelConfig {
        head: exp.student_head.clone(),
        ..exp.model.clone()
    };
    let per_seed: Vec<Result<Vec<CellSummary>>> = exp
        .seeds
        .par_iter()
        .map(|&seed| {
            let teacher = run_cell(
                TEACHER_LABEL,
                &exp.model,
                &dataset.train,
                &dataset.val,
                &seen,
                &exp.train,
                seed,
                &hash,
            )?;
            let pseudo = export_pseudo_labels(&teacher.model, dataset)?;
            let jobs = [
                Job {
                    label: STUDENT_LABEL.into(),
                    model: student_model.clone(),
                    train: &pseudo.train,
                    eval_seen: seen.clone(),
                    seed,
                },
                Job {
                    label: DIRECT_LABEL.into(),
                    model: student_model.clone(),
                    train: &dataset.train,
                    eval_seen: seen.clone(),
                    seed,
                },
            ];
            let t = CellSummary::from_result(&teacher);
            checkpoint_cell(out, &hash, &t)?;
            let mut v = vec![t];
            v.extend(run_jobs(&jobs, &dataset.val, exp, out)?);
            Ok(v)
        })
        .collect();
    let mut cells = Vec::new();
    for r in per_seed {
        cells.extend(r?);
    }
    Ok(RecipeOutput {
        recipe: Recipe::TwoStage,
        config_hash: hash,
        cells,
        ratios: None,
    })
}
