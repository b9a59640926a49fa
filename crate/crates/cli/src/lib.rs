//! Commands behind the `vgcl` binary.
//!
//! Exit codes: 0 success, 1 failed check, 2 usage or configuration error,
//! 3 training diverged.

pub mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;
use vgcl_core::dataset::{filter_min_interactions, load_interactions_file};
use vgcl_core::encoder::sigma_rows;
use vgcl_core::evaluator::{group_analysis, GROUP_CUTOFF};
use vgcl_core::gradcheck::{grad_check, GradCheckOptions};
use vgcl_core::trainer::EpochRecord;
use vgcl_core::{
    evaluate, split_holdout, Checkpoint, DenseMatrix, GraphEncoder, InteractionTable, LoadOptions, MetricsReport,
    ModelParams, SplitDataset, SplitManifest, TrainConfig, TrainStatus, Variant,
};

pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("{0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] vgcl_core::Error),

    #[error("{0}")]
    CheckFailed(String),

    #[error("training diverged: {0}")]
    Diverged(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::CheckFailed(_) => 1,
            CliError::Diverged(_) | CliError::Core(vgcl_core::Error::NonFinite(_)) => 3,
            CliError::Config(_) | CliError::Usage(_) | CliError::Core(_) => 2,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| vgcl_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| vgcl_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrepareArgs {
    pub input: PathBuf,
    pub out: PathBuf,
    /// Keep only rows whose rating equals or exceeds this value.
    pub min_rating: Option<f64>,
    pub min_count: usize,
    pub test_ratio: f64,
    pub seed: u64,
}

impl PrepareArgs {
    pub fn new(input: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        Self {
            input: input.into(),
            out: out.into(),
            min_rating: None,
            min_count: 10,
            test_ratio: 0.2,
            seed: 0,
        }
    }
}

/// Loads, filters and splits a raw interaction file into `train.txt`,
/// `test.txt` and `manifest.txt` under `args.out`.
pub fn cmd_prepare(args: &PrepareArgs) -> CliResult<SplitManifest> {
    let raw = load_interactions_file(
        &args.input,
        &LoadOptions {
            min_rating: args.min_rating,
        },
    )?;
    let filtered = filter_min_interactions(&raw, args.min_count)?;
    let split = split_holdout(&filtered, args.test_ratio, args.seed)?;
    create_dir(&args.out)?;
    split.train.save_indexed(&args.out.join("train.txt"))?;
    split.test.save_indexed(&args.out.join("test.txt"))?;
    let manifest = SplitManifest {
        source: args.input.display().to_string(),
        seed: args.seed,
        test_ratio: args.test_ratio,
        min_count: args.min_count,
        min_rating: args.min_rating,
        n_users: split.n_users(),
        n_items: split.n_items(),
        train_pairs: split.train.len(),
        test_pairs: split.test.len(),
    };
    write_file(&args.out.join("manifest.txt"), manifest.render())?;
    Ok(manifest)
}

/// Reads a split written by [`cmd_prepare`].
pub fn load_split(dir: &Path) -> CliResult<SplitDataset> {
    let train = InteractionTable::load_indexed(&dir.join("train.txt"))?;
    let test = InteractionTable::load_indexed(&dir.join("test.txt"))?;
    if (train.n_users(), train.n_items()) != (test.n_users(), test.n_items()) {
        return Err(CliError::Usage(format!(
            "{}: train and test disagree on the number of users or items",
            dir.display()
        )));
    }
    Ok(SplitDataset { train, test })
}

/// Re-splits the union of both halves with a new seed.
fn resplit(data: &SplitDataset, seed: u64) -> CliResult<SplitDataset> {
    let ratio = data.test.len() as f64 / (data.train.len() + data.test.len()) as f64;
    let mut pairs = data.train.pairs().to_vec();
    pairs.extend_from_slice(data.test.pairs());
    let all = InteractionTable::new(pairs, data.n_users(), data.n_items())?;
    Ok(split_holdout(&all, ratio, seed)?)
}

/// User and item readouts of trained parameters.
pub fn readout(
    train: &InteractionTable,
    params: &ModelParams,
    layers: usize,
    include_layer0: bool,
) -> CliResult<(DenseMatrix, DenseMatrix)> {
    let adj = vgcl_core::build_graph(train);
    let prop = GraphEncoder::new(&adj, layers, include_layer0)?.propagate(&params.embeddings)?;
    let m = train.n_users();
    Ok((prop.readout.slice_rows(0, m), prop.readout.slice_rows(m, prop.readout.rows())))
}

/// Test metrics plus the per-degree group table.
pub fn final_report(
    data: &SplitDataset,
    params: &ModelParams,
    layers: usize,
    include_layer0: bool,
    variational: bool,
    cutoffs: &[usize],
    groups: usize,
) -> CliResult<MetricsReport> {
    let (users, items) = readout(&data.train, params, layers, include_layer0)?;
    let mut report = evaluate(&users, &items, &data.train, &data.test, cutoffs)?;
    let sigma = if variational {
        Some(sigma_rows(&users, &params.weight, &params.bias)?.sigma)
    } else {
        None
    };
    if data.n_users() >= groups {
        report.groups = Some(group_analysis(
            &users,
            &items,
            sigma.as_ref(),
            &data.train,
            &data.test,
            groups,
        )?);
    }
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub run_id: String,
    pub seed: u64,
    pub variant: Variant,
    pub status: TrainStatus,
    pub report: MetricsReport,
    pub dir: PathBuf,
}

fn render_log(log: &[EpochRecord], status: &TrainStatus, best: Option<(usize, f64)>) -> String {
    let mut out = String::new();
    for r in log {
        out.push_str(&r.render());
        out.push('\n');
    }
    let status = match status {
        TrainStatus::Completed => "status=completed".to_string(),
        TrainStatus::EarlyStopped { epoch } => format!("status=early_stopped epoch={epoch}"),
        TrainStatus::Diverged { epoch, batch, reason } => {
            format!("status=diverged epoch={epoch} batch={batch} reason=\"{reason}\"")
        }
    };
    out.push_str(&status);
    if let Some((epoch, ndcg)) = best {
        let _ = write!(out, " best_epoch={epoch} best_ndcg={ndcg}");
    }
    out.push('\n');
    out
}

/// Trains once and writes `config.txt`, `train.log`, `checkpoint.bin`,
/// `metrics.txt` and `report.txt` into `dir`.
fn run_one(data: &SplitDataset, cfg: &RunConfig, dir: &Path, run_id: &str) -> CliResult<RunResult> {
    create_dir(dir)?;
    write_file(&dir.join("config.txt"), cfg.echo())?;
    let t: TrainConfig = cfg.effective_train();
    let outcome = vgcl_core::train(data, &t)?;
    write_file(&dir.join("train.log"), render_log(&outcome.log, &outcome.status, outcome.best))?;
    Checkpoint {
        n_users: data.n_users(),
        n_items: data.n_items(),
        layers: t.layers,
        include_layer0: t.include_layer0,
        variant: Some(t.variant.to_string()),
        params: outcome.params.clone(),
    }
    .save(&dir.join("checkpoint.bin"))?;
    let variational = t.variant.variational() && !t.freeze_sigma_zero;
    let report = final_report(
        data,
        &outcome.params,
        t.layers,
        t.include_layer0,
        variational,
        &t.cutoffs,
        cfg.groups,
    )?;
    write_file(&dir.join("metrics.txt"), report.records(run_id, t.variant.name()))?;
    write_file(&dir.join("report.txt"), report.table())?;
    Ok(RunResult {
        run_id: run_id.to_string(),
        seed: t.seed,
        variant: t.variant,
        status: outcome.status,
        report,
        dir: dir.to_path_buf(),
    })
}

fn require_paths(cfg: &RunConfig) -> CliResult<(PathBuf, PathBuf)> {
    let mut missing = Vec::new();
    if cfg.data.is_none() {
        missing.push("data: required (directory produced by `prepare`)".to_string());
    }
    if cfg.out.is_none() {
        missing.push("out: required".to_string());
    }
    match (&cfg.data, &cfg.out) {
        (Some(d), Some(o)) => Ok((d.clone(), o.clone())),
        _ => Err(CliError::Config(missing)),
    }
}

/// Seed-varied runs of one variant; `repeat > 1` puts each in `run-<k>`.
fn run_repeats(data: &SplitDataset, cfg: &RunConfig, out: &Path) -> CliResult<Vec<RunResult>> {
    let mut results = Vec::new();
    for k in 0..cfg.repeat {
        let seed = cfg.train.seed + k as u64;
        let mut run_cfg = cfg.clone();
        run_cfg.train.seed = seed;
        run_cfg.repeat = 1;
        let dir = if cfg.repeat == 1 {
            out.to_path_buf()
        } else {
            out.join(format!("run-{k}"))
        };
        run_cfg.out = Some(dir.clone());
        let run_data = if cfg.resplit { resplit(data, seed)? } else { data.clone() };
        results.push(run_one(&run_data, &run_cfg, &dir, &format!("run{k}"))?);
    }
    Ok(results)
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Mean of every metric across runs, in the metrics record format.
pub fn aggregate_records(results: &[RunResult]) -> String {
    let mut out = String::new();
    let Some(first) = results.first() else {
        return out;
    };
    for (k, c) in first.report.cutoffs.iter().enumerate() {
        let recall = mean(results.iter().map(|r| r.report.recall[k]));
        let ndcg = mean(results.iter().map(|r| r.report.ndcg[k]));
        let _ = writeln!(out, "mean {} {c} recall {recall}", first.variant);
        let _ = writeln!(out, "mean {} {c} ndcg {ndcg}", first.variant);
    }
    out
}

fn diverged_runs(results: &[RunResult]) -> Vec<String> {
    results
        .iter()
        .filter_map(|r| match &r.status {
            TrainStatus::Diverged { epoch, batch, reason } => Some(format!(
                "{} ({}) at epoch {epoch} batch {batch}: {reason}; last good checkpoint kept in {}",
                r.run_id,
                r.variant,
                r.dir.display()
            )),
            _ => None,
        })
        .collect()
}

/// Validates, trains `repeat` times and writes artifacts under `out`.
pub fn cmd_train(cfg: &RunConfig) -> CliResult<Vec<RunResult>> {
    cfg.validate()?;
    let (data_dir, out) = require_paths(cfg)?;
    let data = load_split(&data_dir)?;
    create_dir(&out)?;
    if cfg.repeat > 1 {
        write_file(&out.join("config.txt"), cfg.echo())?;
    }
    let results = run_repeats(&data, cfg, &out)?;
    if cfg.repeat > 1 {
        write_file(&out.join("aggregate.txt"), aggregate_records(&results))?;
    }
    let diverged = diverged_runs(&results);
    if !diverged.is_empty() {
        return Err(CliError::Diverged(diverged.join("; ")));
    }
    Ok(results)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluateArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub cutoffs: Vec<usize>,
    pub groups: usize,
    pub out: Option<PathBuf>,
}

/// Scores a saved checkpoint on the test half of a prepared split.
pub fn cmd_evaluate(args: &EvaluateArgs) -> CliResult<MetricsReport> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let data = load_split(&args.data)?;
    if (ck.n_users, ck.n_items) != (data.n_users(), data.n_items()) {
        return Err(CliError::Usage(format!(
            "checkpoint has {} users / {} items, data has {} / {}",
            ck.n_users,
            ck.n_items,
            data.n_users(),
            data.n_items()
        )));
    }
    let variational = ck
        .variant
        .as_deref()
        .and_then(Variant::parse)
        .is_some_and(Variant::variational);
    let report = final_report(
        &data,
        &ck.params,
        ck.layers,
        ck.include_layer0,
        variational,
        &args.cutoffs,
        args.groups,
    )?;
    if let Some(out) = &args.out {
        create_dir(out)?;
        let variant = ck.variant.as_deref().unwrap_or("unknown");
        write_file(&out.join("metrics.txt"), report.records("eval", variant))?;
        write_file(&out.join("report.txt"), report.table())?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    /// `(seed, Recall@20, NDCG@20)` per run.
    pub runs: Vec<(u64, f64, f64)>,
}

impl AblationRow {
    pub fn mean_recall(&self) -> f64 {
        mean(self.runs.iter().map(|r| r.1))
    }

    pub fn mean_ndcg(&self) -> f64 {
        mean(self.runs.iter().map(|r| r.2))
    }

    pub fn median_ndcg(&self) -> f64 {
        median(self.runs.iter().map(|r| r.2).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn render(&self) -> String {
        let mut out = format!(
            "{:<10} {:>10} {:>10} {:>12}\n",
            "variant", "recall@20", "ndcg@20", "median_ndcg"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<10} {:>10.6} {:>10.6} {:>12.6}",
                r.variant.name(),
                r.mean_recall(),
                r.mean_ndcg(),
                r.median_ndcg()
            );
        }
        out
    }

    /// Per-run records, `seed variant recall@20 ndcg@20`.
    pub fn records(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            for (seed, recall, ndcg) in &r.runs {
                let _ = writeln!(out, "seed{seed} {} {GROUP_CUTOFF} recall {recall}", r.variant);
                let _ = writeln!(out, "seed{seed} {} {GROUP_CUTOFF} ndcg {ndcg}", r.variant);
            }
        }
        out
    }
}

/// Trains every variant with the same seeds and tabulates Recall@20 and
/// NDCG@20. The configured variant is ignored.
pub fn cmd_ablate(cfg: &RunConfig) -> CliResult<AblationTable> {
    let (data_dir, out) = require_paths(cfg)?;
    if !cfg.train.cutoffs.contains(&GROUP_CUTOFF) {
        return Err(CliError::Config(vec![format!(
            "cutoffs: ablation compares at {GROUP_CUTOFF}, which must be listed"
        )]));
    }
    let mut problems = Vec::new();
    let configs: Vec<RunConfig> = Variant::ALL
        .into_iter()
        .map(|v| {
            let mut c = cfg.clone();
            c.train.variant = v;
            problems.extend(c.train.problems().into_iter().map(|p| format!("{v}: {p}")));
            c
        })
        .collect();
    problems.dedup();
    if !problems.is_empty() {
        return Err(CliError::Config(problems));
    }
    let data = load_split(&data_dir)?;
    create_dir(&out)?;
    write_file(&out.join("config.txt"), cfg.echo())?;
    let mut rows = Vec::new();
    let mut all = Vec::new();
    for c in &configs {
        let results = run_repeats(&data, c, &out.join(c.train.variant.name()))?;
        rows.push(AblationRow {
            variant: c.train.variant,
            runs: results
                .iter()
                .map(|r| {
                    (
                        r.seed,
                        r.report.recall_at(GROUP_CUTOFF).expect("cutoff checked"),
                        r.report.ndcg_at(GROUP_CUTOFF).expect("cutoff checked"),
                    )
                })
                .collect(),
        });
        all.extend(results);
    }
    let table = AblationTable { rows };
    write_file(&out.join("ablation.txt"), table.render())?;
    write_file(&out.join("ablation_records.txt"), table.records())?;
    let diverged = diverged_runs(&all);
    if !diverged.is_empty() {
        return Err(CliError::Diverged(diverged.join("; ")));
    }
    Ok(table)
}

/// Gradient check over `instances` consecutive seeds starting at `seed`.
/// Returns the rendered reports; fails with exit code 1 if any check fails.
pub fn cmd_gradcheck(seed: u64, instances: usize) -> CliResult<String> {
    let mut out = String::new();
    let mut failed = Vec::new();
    for s in seed..seed + instances.max(1) as u64 {
        let report = grad_check(s, &GradCheckOptions::default())?;
        out.push_str(&report.render());
        if !report.passed() {
            failed.push(format!("seed {s}: {}", report.failures().join(", ")));
        }
    }
    if failed.is_empty() {
        Ok(out)
    } else {
        Err(CliError::CheckFailed(format!("{out}gradient check failed: {}", failed.join("; "))))
    }
}
