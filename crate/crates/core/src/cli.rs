//! Command-line driver: sweep, transform, prune, verify, and fixture generation.
//!
//! Exit codes: 0 success, 1 verification found a functional difference,
//! 2 configuration error, 3 data error, 4 internal invariant violation.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fixtures::{self, WeightInit};
use crate::graph::{format, load_graph, save_graph, WeightGraph};
use crate::importance::{
    loss_report, score_graph, Criterion, LossReport, ReportRow, TileShape, REPORT_HEADER,
};
use crate::oracle::{compare_models, SyntheticSpec};
use crate::pruner::{apply_mask, tile_prune, MaskFile, PrunePlan};
use crate::reparam::{apply_transform, tiletrans, TransformMode, TransformPlan};

pub const THREADS_ENV: &str = "TILEWISE_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "tilewise",
    version,
    about = "Tile pruning with permutation reparameterization"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Report tile and unstructured pruning loss over a range of sparsities.
    Sweep(SweepArgs),
    /// Permute layer groups and write the transformed model and its plan.
    Transform(TransformArgs),
    /// Prune at one sparsity and write the mask and the zeroed model.
    Prune(PruneArgs),
    /// Check that two models compute the same function on random inputs.
    Verify(VerifyArgs),
    /// Write one of the built-in fixture models.
    Fixture(FixtureArgs),
}

#[derive(Debug, Args)]
pub struct ModelArg {
    /// Model manifest (`<name>.json`, weights in `<name>.bin`).
    #[arg(long)]
    pub model: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub model: ModelArg,
    /// Tile shape `AxB`.
    #[arg(long)]
    pub tile: String,
    /// Comma-separated list, or `START:STOP:STEP` (inclusive).
    #[arg(long)]
    pub sparsity: String,
    #[arg(long, default_value = "l1")]
    pub criterion: String,
    #[arg(long, value_enum, default_value_t = TransformArg::None)]
    pub transform: TransformArg,
    /// CSV output; stdout when omitted.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long)]
    pub plan_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TransformArgs {
    #[command(flatten)]
    pub model: ModelArg,
    #[arg(long, value_enum, default_value_t = TransformArg::Row)]
    pub transform: TransformArg,
    #[arg(long, default_value = "l1")]
    pub criterion: String,
    /// Replay a saved plan instead of computing one.
    #[arg(long, conflicts_with = "transform")]
    pub plan: Option<PathBuf>,
    #[arg(long)]
    pub model_out: PathBuf,
    #[arg(long)]
    pub plan_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PruneArgs {
    #[command(flatten)]
    pub model: ModelArg,
    #[arg(long)]
    pub tile: String,
    /// A single sparsity in [0, 1].
    #[arg(long)]
    pub sparsity: String,
    #[arg(long, default_value = "l1")]
    pub criterion: String,
    #[arg(long, value_enum, default_value_t = TransformArg::None)]
    pub transform: TransformArg,
    #[arg(long)]
    pub mask_out: Option<PathBuf>,
    #[arg(long)]
    pub model_out: Option<PathBuf>,
    #[arg(long)]
    pub plan_out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub model: ModelArg,
    /// Model to compare against.
    #[arg(long)]
    pub against: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub rtol: f64,
    /// Draw integer inputs in [-N, N] instead of uniform reals.
    #[arg(long)]
    pub integer_inputs: Option<i32>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FixtureName {
    Alexnet,
    Resnet,
    ResidualExample,
    Mlp,
    SyntheticMlp,
}

#[derive(Debug, Args)]
pub struct FixtureArgs {
    #[arg(value_enum)]
    pub name: FixtureName,
    #[arg(long)]
    pub model_out: PathBuf,
    /// Weights in {-1, 0, 1} so forward passes on integer inputs are exact.
    #[arg(long)]
    pub integer_weights: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TransformArg {
    None,
    Row,
    Column,
}

impl TransformArg {
    pub fn mode(self) -> Option<TransformMode> {
        match self {
            TransformArg::None => None,
            TransformArg::Row => Some(TransformMode::Row),
            TransformArg::Column => Some(TransformMode::Column),
        }
    }
}

/// An error tagged with the pipeline stage that raised it.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub error: Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.stage, self.error)
    }
}

impl std::error::Error for StageError {}

trait Stage<T> {
    fn stage(self, stage: &'static str) -> Result<T, StageError>;
}

impl<T> Stage<T> for Result<T> {
    fn stage(self, stage: &'static str) -> Result<T, StageError> {
        self.map_err(|error| StageError { stage, error })
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Invariant(_) => 4,
        _ => 3,
    }
}

/// Parses `0.1,0.5` or `0:1:0.25` (inclusive; values rounded to 1e-9).
pub fn parse_sparsities(spec: &str) -> Result<Vec<f64>> {
    let bad = |why: &str| Error::Config(format!("sparsity {spec:?}: {why}"));
    let num = |s: &str| -> Result<f64> {
        let v: f64 = s.trim().parse().map_err(|_| bad("not a number"))?;
        if !(0.0..=1.0).contains(&v) {
            return Err(bad("values must lie in [0, 1]"));
        }
        Ok(v)
    };
    let values: Vec<f64> = if spec.contains(':') {
        let parts: Vec<&str> = spec.split(':').collect();
        let [start, stop, step] = parts[..] else {
            return Err(bad("ranges are START:STOP:STEP"));
        };
        let (start, stop) = (num(start)?, num(stop)?);
        let step: f64 = step
            .trim()
            .parse()
            .map_err(|_| bad("step is not a number"))?;
        if step.is_nan() || step <= 0.0 || stop < start {
            return Err(bad("need STEP > 0 and START <= STOP"));
        }
        let n = ((stop - start) / step + 1e-9).floor() as usize;
        (0..=n)
            .map(|k| ((start + k as f64 * step) * 1e9).round() / 1e9)
            .map(|v| v.min(1.0))
            .collect()
    } else {
        spec.split(',').map(num).collect::<Result<_>>()?
    };
    if values.is_empty() {
        return Err(bad("empty"));
    }
    Ok(values)
}

fn parse_single_sparsity(spec: &str) -> Result<f64> {
    match parse_sparsities(spec)?[..] {
        [s] => Ok(s),
        _ => Err(Error::Config(format!(
            "expected one sparsity, got {spec:?}"
        ))),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn model_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            Error::Config(format!("{THREADS_ENV}={v:?} is not a positive integer"))
        })?;
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| Error::Invariant(format!("thread pool: {e}")))
}

fn maybe_transform(
    g: &WeightGraph,
    c: Criterion,
    mode: Option<TransformMode>,
    plan_out: Option<&Path>,
) -> Result<Option<WeightGraph>, StageError> {
    let Some(mode) = mode else {
        return Ok(None);
    };
    let (out, plan) = tiletrans(g, c, mode).stage("transform")?;
    if let Some(p) = plan_out {
        let json = plan.to_json().stage("transform")?;
        write_file(p, json.as_bytes()).stage("write plan")?;
    }
    Ok(Some(out))
}

fn row(
    model: &str,
    t: TileShape,
    s: f64,
    c: Criterion,
    r: &LossReport,
    transformed: bool,
) -> ReportRow {
    ReportRow {
        model: model.to_string(),
        layer_set: "weighted".to_string(),
        tile_a: t.a,
        tile_b: t.b,
        sparsity: s,
        criterion: c,
        loss: r.loss,
        baseline_loss: r.baseline_loss,
        difference: r.difference,
        transformed,
    }
}

/// Rows for every sparsity, in sparsity order: the unstructured baseline
/// (unless the tile is already 1x1), the tile loss on the model as given,
/// and the tile loss after transformation when `transformed` is present.
pub fn sweep_rows(
    model: &str,
    g: &WeightGraph,
    transformed: Option<&WeightGraph>,
    t: TileShape,
    sparsities: &[f64],
    c: Criterion,
) -> Result<Vec<ReportRow>> {
    let plain = score_graph(g, c);
    let permuted = transformed.map(|tg| score_graph(tg, c));
    let per_point = sparsities
        .par_iter()
        .map(|&s| -> Result<Vec<ReportRow>> {
            let mut rows = Vec::with_capacity(3);
            if t != TileShape::UNIT {
                let r = loss_report(&plain, TileShape::UNIT, s)?;
                rows.push(row(model, TileShape::UNIT, s, c, &r, false));
            }
            rows.push(row(model, t, s, c, &loss_report(&plain, t, s)?, false));
            if let Some(layers) = &permuted {
                rows.push(row(model, t, s, c, &loss_report(layers, t, s)?, true));
            }
            Ok(rows)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_point.into_iter().flatten().collect())
}

pub fn write_report(rows: &[ReportRow], out: impl Write) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    let csv_err = |e: csv::Error| Error::Invariant(format!("csv writer: {e}"));
    w.write_record(REPORT_HEADER).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()
        .map_err(|e| Error::Invariant(format!("csv writer: {e}")))
}

pub fn read_report(input: impl std::io::Read) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(|e| Error::Parse(e.to_string()))?;
    if header.iter().ne(REPORT_HEADER) {
        return Err(Error::Parse(format!("unexpected report header {header:?}")));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Parse(e.to_string())))
        .collect()
}

fn run_sweep(a: &SweepArgs) -> Result<(), StageError> {
    let t: TileShape = a.tile.parse().stage("config")?;
    let c: Criterion = a.criterion.parse().stage("config")?;
    let sparsities = parse_sparsities(&a.sparsity).stage("config")?;
    let g = load_graph(&a.model.model).stage("load model")?;
    let tg = maybe_transform(&g, c, a.transform.mode(), a.plan_out.as_deref())?;
    let rows = sweep_rows(
        &model_name(&a.model.model),
        &g,
        tg.as_ref(),
        t,
        &sparsities,
        c,
    )
    .stage("sweep")?;
    match &a.report {
        Some(p) => {
            let mut buf = Vec::new();
            write_report(&rows, &mut buf).stage("report")?;
            write_file(p, &buf).stage("report")
        }
        None => write_report(&rows, std::io::stdout().lock()).stage("report"),
    }
}

fn run_transform(a: &TransformArgs) -> Result<(), StageError> {
    let c: Criterion = a.criterion.parse().stage("config")?;
    let g = load_graph(&a.model.model).stage("load model")?;
    let (out, plan) = if let Some(plan_path) = &a.plan {
        let text = fs::read_to_string(plan_path)
            .map_err(|e| Error::io(plan_path, e))
            .stage("load plan")?;
        let plan = TransformPlan::from_json(&text).stage("load plan")?;
        (apply_transform(&g, &plan).stage("replay plan")?, Some(plan))
    } else {
        match a.transform.mode() {
            Some(mode) => {
                let (out, plan) = tiletrans(&g, c, mode).stage("transform")?;
                (out, Some(plan))
            }
            None => {
                // Copy verbatim so the output is byte-identical to the input.
                let src_blob = format::blob_path(&a.model.model);
                let dst_blob = format::blob_path(&a.model_out);
                fs::copy(&a.model.model, &a.model_out)
                    .map_err(|e| Error::io(&a.model_out, e))
                    .stage("write model")?;
                fs::copy(&src_blob, &dst_blob)
                    .map_err(|e| Error::io(&dst_blob, e))
                    .stage("write model")?;
                return Ok(());
            }
        }
    };
    save_graph(&out, &a.model_out).stage("write model")?;
    if let (Some(p), Some(plan)) = (&a.plan_out, plan) {
        let json = plan.to_json().stage("write plan")?;
        write_file(p, json.as_bytes()).stage("write plan")?;
    }
    let active = load_plan_summary(&out, &g);
    println!("{active}");
    Ok(())
}

fn load_plan_summary(out: &WeightGraph, g: &WeightGraph) -> String {
    let changed = out
        .weighted_nodes()
        .filter(|&(id, w)| g.weight(id) != Some(w))
        .count();
    format!("transformed: {changed} weighted layers changed")
}

fn run_prune(a: &PruneArgs) -> Result<(), StageError> {
    let t: TileShape = a.tile.parse().stage("config")?;
    let c: Criterion = a.criterion.parse().stage("config")?;
    let s = parse_single_sparsity(&a.sparsity).stage("config")?;
    let plan = PrunePlan::new(t, s, c).stage("config")?;
    let g = load_graph(&a.model.model).stage("load model")?;
    let tg = maybe_transform(&g, c, a.transform.mode(), a.plan_out.as_deref())?;
    let g = tg.unwrap_or(g);
    let mask = tile_prune(&g, &plan).stage("prune")?;
    let report = loss_report(&score_graph(&g, c), t, s).stage("prune")?;
    if let Some(p) = &a.mask_out {
        let file = MaskFile::new(plan, &mask);
        let json = serde_json::to_string_pretty(&file)
            .map_err(|e| Error::Invariant(format!("mask serialization: {e}")))
            .stage("write mask")?;
        write_file(p, format!("{json}\n").as_bytes()).stage("write mask")?;
    }
    if let Some(p) = &a.model_out {
        let pruned = apply_mask(&g, &mask).stage("prune")?;
        save_graph(&pruned, p).stage("write model")?;
    }
    println!(
        "sparsity {:.6} loss {} baseline_loss {} difference {}",
        mask.achieved_sparsity(),
        report.loss,
        report.baseline_loss,
        report.difference
    );
    Ok(())
}

fn run_verify(a: &VerifyArgs) -> Result<bool, StageError> {
    if a.rtol.is_nan() || a.rtol < 0.0 {
        return Err(Error::Config(format!(
            "rtol {} must be non-negative",
            a.rtol
        )))
        .stage("config");
    }
    let g = load_graph(&a.model.model).stage("load model")?;
    let h = load_graph(&a.against).stage("load model")?;
    if !g.same_architecture(&h) {
        println!("architecture differs");
        return Ok(false);
    }
    let eq = compare_models(&g, &h, a.samples, a.seed, a.integer_inputs).stage("evaluate")?;
    let ok = eq.within(a.rtol);
    println!(
        "samples {} max_relative_error {:e} exact {} {}",
        eq.samples,
        eq.max_relative_error,
        eq.exact_samples,
        if ok { "equivalent" } else { "DIFFERENT" }
    );
    Ok(ok)
}

fn run_fixture(a: &FixtureArgs) -> Result<(), StageError> {
    let init = if a.integer_weights {
        WeightInit::SmallIntegers
    } else {
        WeightInit::Gaussian
    };
    let g = match a.name {
        FixtureName::Alexnet => fixtures::alexnet_like(init, a.seed),
        FixtureName::Resnet => fixtures::resnet_like(init, a.seed),
        FixtureName::ResidualExample => {
            fixtures::residual_example_random(8, init, a.seed).map(|(g, _)| g)
        }
        FixtureName::Mlp => fixtures::mlp(&[16, 32, 32, 10], init, a.seed),
        FixtureName::SyntheticMlp => fixtures::synthetic_mlp(4, SyntheticSpec::new(64, 64, a.seed)),
    }
    .stage("build fixture")?;
    save_graph(&g, &a.model_out).stage("write model")
}

/// Runs a parsed command; the returned code follows the module-level contract.
pub fn run(cli: &Cli) -> i32 {
    let pool = match thread_pool() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("tilewise: config: {e}");
            return exit_code(&e);
        }
    };
    let result = pool.install(|| match &cli.command {
        Command::Sweep(a) => run_sweep(a).map(|_| true),
        Command::Transform(a) => run_transform(a).map(|_| true),
        Command::Prune(a) => run_prune(a).map(|_| true),
        Command::Verify(a) => run_verify(a),
        Command::Fixture(a) => run_fixture(a).map(|_| true),
    });
    match result {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("tilewise: {e}");
            exit_code(&e.error)
        }
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn main_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(&cli),
        Err(e) => {
            let _ = e.print();
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sparsity_list_and_range() {
        assert_eq!(parse_sparsities("0, 0.5,1").unwrap(), vec![0.0, 0.5, 1.0]);
        assert_eq!(
            parse_sparsities("0:1:0.25").unwrap(),
            vec![0.0, 0.25, 0.5, 0.75, 1.0]
        );
        let r = parse_sparsities("0:1:0.1").unwrap();
        assert_eq!(r.len(), 11);
        assert_eq!(r[3], 0.3);
        assert_eq!(r[10], 1.0);
    }

    #[test]
    fn bad_sparsities_are_config_errors() {
        for s in ["1.5", "-0.1", "a", "0:1", "0:1:0", "1:0:0.1", ""] {
            let e = parse_sparsities(s).unwrap_err();
            assert_eq!(exit_code(&e), 2, "{s}");
        }
        assert!(parse_single_sparsity("0.1,0.2").is_err());
    }

    #[test]
    fn report_round_trips() {
        let rows = vec![ReportRow {
            model: "m".into(),
            layer_set: "weighted".into(),
            tile_a: 2,
            tile_b: 2,
            sparsity: 0.5,
            criterion: Criterion::L2,
            loss: 40.0,
            baseline_loss: 8.0,
            difference: 32.0,
            transformed: true,
        }];
        let mut buf = Vec::new();
        write_report(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(
            "model,layer_set,tile_a,tile_b,sparsity,criterion,loss,baseline_loss,difference,transformed\n"
        ));
        assert_eq!(read_report(&buf[..]).unwrap(), rows);
    }
}
