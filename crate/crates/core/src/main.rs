use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use contseq::harness::{
    cross_validate, evaluate, gen_synthetic, grid_search, load_dataset, render_table, train_and_evaluate,
    write_context, write_observations, GridConfig, HarnessError, History, LoadedData, MetricKind, MetricsReport,
    Result, RunConfig, SyntheticSpec,
};
use contseq::interp::{read_cache, write_cache, ChannelRole, Scheme};
use contseq::models::{Model, ModelKind, SplitInfo, TaskSpec};
use contseq::odesolve::{write_trace_csv, Method};
use contseq::preprocess::{assemble, prepare, split_indices, Batch, CausalMode, Impute, RawSubject, Standardizer};

const SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(name = "contseq", version, about = "Continuous-time sequence models for irregular longitudinal data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenSynth(GenSynthArgs),
    /// Standardise, transform and fit control signals; write the coefficient cache.
    Preprocess(PreprocessArgs),
    /// Sample a cached control signal densely as CSV.
    Interpolate(InterpolateArgs),
    /// Train one model on a seeded train/validation split.
    Train(TrainArgs),
    /// Evaluate a checkpoint on its validation split or a whole dataset.
    Evaluate(EvaluateArgs),
    /// K-fold cross-validation of one configuration.
    Cv(CvArgs),
    /// Cross-validated grid search.
    Grid(GridArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Observation CSV.
    #[arg(long)]
    data: PathBuf,
    /// Context CSV.
    #[arg(long)]
    context: Option<PathBuf>,
}

impl DataArgs {
    fn load(&self) -> Result<LoadedData> {
        for p in std::iter::once(&self.data).chain(&self.context) {
            if !p.is_file() {
                return Err(HarnessError::Config(format!("{}: no such file", p.display())));
            }
        }
        load_dataset(&self.data, self.context.as_deref())
    }
}

#[derive(Args)]
struct GenSynthArgs {
    /// JSON synthetic spec; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    subjects: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_task)]
    task: Option<TaskName>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    missingness: Option<f64>,
    #[arg(long)]
    features: Option<usize>,
    /// Observation CSV to write.
    #[arg(long)]
    out: PathBuf,
    /// Context CSV to write.
    #[arg(long)]
    context: Option<PathBuf>,
    /// Ground-truth manifest JSON to write.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

/// Flags overriding fields of a run config.
#[derive(Args, Default)]
struct RunOverrides {
    /// JSON run config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_kind)]
    model: Option<ModelKind>,
    #[arg(long, value_parser = parse_scheme)]
    scheme: Option<Scheme>,
    #[arg(long, value_parser = parse_causal)]
    causal: Option<CausalMode>,
    #[arg(long)]
    standardize: Option<bool>,
    #[arg(long, value_parser = parse_impute)]
    impute: Option<Impute>,
    #[arg(long, value_parser = parse_task)]
    task: Option<TaskName>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    latent: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    eval_batch_size: Option<usize>,
    /// Learning rate for every group except the head.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_head: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long, value_parser = parse_method)]
    method: Option<Method>,
    #[arg(long)]
    rtol: Option<f64>,
    #[arg(long)]
    atol: Option<f64>,
}

#[derive(Args)]
struct PreprocessArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    run: RunOverrides,
    /// Coefficient cache to write (train subjects first, then test).
    #[arg(long)]
    out: PathBuf,
    /// Manifest JSON to write.
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Args)]
struct InterpolateArgs {
    #[arg(long)]
    cache: PathBuf,
    /// Row of the cache to sample.
    #[arg(long, default_value_t = 0)]
    subject: usize,
    /// Pseudo-time spacing of the samples.
    #[arg(long, default_value_t = 0.05)]
    step: f64,
    /// CSV to write; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    run: RunOverrides,
    /// Checkpoint to write; the JSON sidecar goes next to it.
    #[arg(long)]
    out: PathBuf,
    /// History JSON; defaults to `<out>.history.json`.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Evaluate every subject instead of the recorded validation split.
    #[arg(long)]
    all: bool,
    #[arg(long)]
    eval_batch_size: Option<usize>,
    /// Result JSON to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Solver step trace CSV to write.
    #[arg(long)]
    trace_csv: Option<PathBuf>,
}

#[derive(Args)]
struct CvArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    run: RunOverrides,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    /// Fold seed; defaults to the training seed.
    #[arg(long)]
    fold_seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Grid JSON.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the base epoch count.
    #[arg(long)]
    epochs: Option<usize>,
    /// Report JSON to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Markdown table to write.
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(Clone, Copy)]
enum TaskName {
    Regression,
    Binary,
    Multiclass,
}

fn parse_task(s: &str) -> std::result::Result<TaskName, String> {
    match s {
        "regression" => Ok(TaskName::Regression),
        "binary" => Ok(TaskName::Binary),
        "multiclass" => Ok(TaskName::Multiclass),
        _ => Err("expected regression, binary or multiclass".into()),
    }
}

fn parse_kind(s: &str) -> std::result::Result<ModelKind, String> {
    ModelKind::parse(s).ok_or_else(|| "expected ncde, odernn, latentode, gruode or rnn".into())
}

fn parse_scheme(s: &str) -> std::result::Result<Scheme, String> {
    Scheme::parse(s).ok_or_else(|| "expected linear, hermite, monotonic, natural, rectilinear or recticubic".into())
}

fn parse_causal(s: &str) -> std::result::Result<CausalMode, String> {
    CausalMode::parse(s).ok_or_else(|| "expected copy, recti or none".into())
}

fn parse_impute(s: &str) -> std::result::Result<Impute, String> {
    match s {
        "interpolate" => Ok(Impute::Interpolate),
        "zero" => Ok(Impute::Zero),
        _ => Err("expected interpolate or zero".into()),
    }
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    match s {
        "euler" => Ok(Method::Euler),
        "rk4" => Ok(Method::Rk4),
        "dopri5" => Ok(Method::Dopri5),
        _ => Err("expected euler, rk4 or dopri5".into()),
    }
}

fn task_of(name: TaskName, classes: Option<usize>, current: TaskSpec) -> TaskSpec {
    match name {
        TaskName::Regression => TaskSpec::Regression,
        TaskName::Binary => TaskSpec::Binary,
        TaskName::Multiclass => {
            let prev = match current {
                TaskSpec::Multiclass { classes } => classes,
                _ => 4,
            };
            TaskSpec::Multiclass {
                classes: classes.unwrap_or(prev),
            }
        }
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let f = File::open(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_reader(BufReader::new(f))?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    Ok(())
}

impl RunOverrides {
    fn resolve(&self) -> Result<RunConfig> {
        let mut run: RunConfig = match &self.config {
            Some(p) => read_json(p)?,
            None => RunConfig::default(),
        };
        if let Some(k) = self.model {
            run.model.kind = k;
        }
        if let Some(s) = self.scheme {
            run.preprocess.scheme = s;
            if self.causal.is_none() {
                if s.is_recti() {
                    run.preprocess.causal = CausalMode::Recti;
                } else if run.preprocess.causal == CausalMode::Recti {
                    run.preprocess.causal = CausalMode::Copy;
                }
            }
        }
        if let Some(c) = self.causal {
            run.preprocess.causal = c;
        }
        if let Some(v) = self.standardize {
            run.preprocess.standardize = v;
        }
        if let Some(v) = self.impute {
            run.preprocess.impute = v;
        }
        if let Some(t) = self.task {
            run.task = task_of(t, self.classes, run.task);
        } else if let (Some(k), TaskSpec::Multiclass { .. }) = (self.classes, run.task) {
            run.task = TaskSpec::Multiclass { classes: k };
        }
        if let Some(v) = self.latent {
            run.model.latent = v;
        }
        if let Some(v) = self.hidden {
            run.model.hidden = v;
        }
        if let Some(v) = self.epochs {
            run.train.epochs = v;
        }
        if let Some(v) = self.batch_size {
            run.train.batch_size = v;
        }
        if let Some(v) = self.eval_batch_size {
            run.train.eval_batch_size = v;
        }
        if let Some(v) = self.lr {
            let a = &mut run.train.adam;
            a.lr_embedding = v;
            a.lr_update = v;
            a.lr_dynamics = v;
            a.lr_decoder = v;
        }
        if let Some(v) = self.lr_head {
            run.train.adam.lr_head = v;
        }
        if let Some(v) = self.seed {
            run.train.seed = v;
        }
        if let Some(v) = self.test_fraction {
            run.train.test_fraction = v;
        }
        if let Some(v) = self.method {
            run.model.solver.method = v;
        }
        if let Some(v) = self.rtol {
            run.model.solver.rtol = v;
        }
        if let Some(v) = self.atol {
            run.model.solver.atol = v;
        }
        run.validate()?;
        Ok(run)
    }
}

fn pick(subjects: &[RawSubject], idx: &[usize]) -> Vec<RawSubject> {
    idx.iter().map(|&i| subjects[i].clone()).collect()
}

fn check_fraction(f: f64) -> Result<()> {
    if (0.0..1.0).contains(&f) {
        Ok(())
    } else {
        Err(HarnessError::Config(format!("test fraction {f} must be in [0, 1)")))
    }
}

fn gen_synth(a: &GenSynthArgs) -> Result<()> {
    let mut spec: SyntheticSpec = match &a.config {
        Some(p) => read_json(p)?,
        None => SyntheticSpec::default(),
    };
    if let Some(v) = a.subjects {
        spec.subjects = v;
    }
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    if let Some(t) = a.task {
        spec.task = task_of(t, a.classes, spec.task);
    }
    if let Some(v) = a.missingness {
        spec.missingness = v;
    }
    if let Some(v) = a.features {
        spec.n_features = v;
    }
    let (data, manifest) = gen_synthetic(&spec)?;
    write_observations(&data, BufWriter::new(File::create(&a.out)?))?;
    if let Some(p) = &a.context {
        write_context(&data, BufWriter::new(File::create(p)?))?;
    }
    if let Some(p) = &a.manifest {
        write_json(p, &manifest)?;
    }
    let rows: usize = data.subjects.iter().map(|s| s.rows.len()).sum();
    print!("wrote {} subjects ({rows} rows) to {}", data.subjects.len(), a.out.display());
    match manifest.prevalence {
        Some(p) => println!("; positive fraction {p:.3}"),
        None => println!(),
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct PreprocessManifest {
    schema_version: u32,
    scheme: Scheme,
    causal: CausalMode,
    standardize: bool,
    impute: Impute,
    seed: u64,
    test_fraction: f64,
    standardizer: Standardizer,
    train_subjects: Vec<String>,
    test_subjects: Vec<String>,
    /// Cache rows holding the train split; the remainder is the test split.
    train_rows: usize,
    test_rows: usize,
}

fn preprocess_cmd(a: &PreprocessArgs) -> Result<()> {
    let run = a.run.resolve()?;
    check_fraction(run.train.test_fraction)?;
    let data = a.data.load()?;
    let (tr_idx, te_idx) = split_indices(data.subjects.len(), run.train.test_fraction, run.train.seed);
    let (tr_raw, te_raw) = (pick(&data.subjects, &tr_idx), pick(&data.subjects, &te_idx));
    let (st, tr, te) = prepare(&tr_raw, &te_raw, &run.preprocess)?;
    let mut signals = tr.signals();
    let test_rows = te.as_ref().map_or(0, |d| d.len());
    if let Some(te) = &te {
        signals.extend(te.signals());
    }
    write_cache(&signals, BufWriter::new(File::create(&a.out)?))?;
    let manifest = PreprocessManifest {
        schema_version: SCHEMA_VERSION,
        scheme: run.preprocess.scheme,
        causal: run.preprocess.causal,
        standardize: run.preprocess.standardize,
        impute: run.preprocess.impute,
        seed: run.train.seed,
        test_fraction: run.train.test_fraction,
        standardizer: st,
        train_subjects: tr_raw.iter().map(|s| s.id.clone()).collect(),
        test_subjects: te_raw.iter().map(|s| s.id.clone()).collect(),
        train_rows: tr.len(),
        test_rows,
    };
    write_json(&a.manifest, &manifest)?;
    println!(
        "cached {} signals ({} train, {test_rows} test) with {} channels to {}",
        signals.len(),
        tr.len(),
        tr.n_channels(),
        a.out.display()
    );
    Ok(())
}

fn interpolate_cmd(a: &InterpolateArgs) -> Result<()> {
    if !(a.step > 0.0 && a.step.is_finite()) {
        return Err(HarnessError::Config("--step must be positive".into()));
    }
    let signals = read_cache(BufReader::new(File::open(&a.cache)?))?;
    let sig = signals.get(a.subject).ok_or_else(|| {
        HarnessError::Config(format!("subject {} out of range (cache holds {})", a.subject, signals.len()))
    })?;
    let mut header = vec!["s".to_string()];
    let (mut nf, mut nc) = (0, 0);
    for role in sig.roles() {
        header.push(match role {
            ChannelRole::Feature => {
                nf += 1;
                format!("feature{}", nf - 1)
            }
            ChannelRole::Count => {
                nc += 1;
                format!("count{}", nc - 1)
            }
            ChannelRole::Time => "time".to_string(),
        });
    }
    let end = sig.n_knots().saturating_sub(1) as f64;
    let n = (end / a.step).round() as usize;
    let out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(out);
    w.write_record(&header)?;
    for i in 0..=n {
        let s = if i == n { end } else { i as f64 * a.step };
        let mut rec = vec![format!("{s:?}")];
        rec.extend(sig.evaluate(s).iter().map(|v| format!("{v:?}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    if let Some(p) = &a.out {
        println!("wrote {} samples of subject {} to {}", n + 1, a.subject, p.display());
    }
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct TrainReport {
    schema_version: u32,
    metric: MetricKind,
    /// Held-out metric after the last epoch.
    validation: Option<f64>,
    history: History,
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let run = a.run.resolve()?;
    check_fraction(run.train.test_fraction)?;
    let data = a.data.load()?;
    let (tr_idx, te_idx) = split_indices(data.subjects.len(), run.train.test_fraction, run.train.seed);
    let out = train_and_evaluate(&pick(&data.subjects, &tr_idx), &pick(&data.subjects, &te_idx), &run)?;
    let split = SplitInfo {
        seed: run.train.seed,
        test_fraction: run.train.test_fraction,
    };
    out.model.save(&a.out, &run.preprocess, &out.standardizer, Some(split))?;
    let report = TrainReport {
        schema_version: SCHEMA_VERSION,
        metric: out.history.metric,
        validation: out.evaluation.as_ref().map(|e| e.value),
        history: out.history,
    };
    let history_path = a.history.clone().unwrap_or_else(|| a.out.with_extension("history.json"));
    write_json(&history_path, &report)?;
    let last = report.history.records.last().map_or(f64::NAN, |r| r.train_loss);
    println!(
        "{} trained {} epochs on {} subjects; final train loss {last:.6}",
        run.model.kind,
        run.train.epochs,
        tr_idx.len()
    );
    if let Some(v) = report.validation {
        println!("validation {} = {v:.6} on {} subjects", report.metric.as_str(), te_idx.len());
    }
    println!("checkpoint {}, history {}", a.out.display(), history_path.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    schema_version: u32,
    metric: MetricKind,
    value: f64,
    subjects: usize,
    predictions: usize,
}

fn evaluate_cmd(a: &EvaluateArgs) -> Result<()> {
    let (model, meta) = Model::load(&a.checkpoint)?;
    let data = a.data.load()?;
    let raw = match (&meta.split, a.all) {
        (Some(sp), false) => {
            let (_, te) = split_indices(data.subjects.len(), sp.test_fraction, sp.seed);
            if te.is_empty() {
                return Err(HarnessError::Config("recorded split has no validation subjects; use --all".into()));
            }
            pick(&data.subjects, &te)
        }
        _ => data.subjects,
    };
    let ds = assemble(&raw, &meta.standardizer, &meta.preprocess, None)?;
    let ebs = a.eval_batch_size.unwrap_or(contseq::harness::TrainConfig::default().eval_batch_size);
    if ebs == 0 {
        return Err(HarnessError::Config("--eval-batch-size must be positive".into()));
    }
    let ev = evaluate(&model, &ds, ebs)?;
    if let Some(p) = &a.trace_csv {
        let mut rows = Vec::new();
        let idx: Vec<usize> = (0..ds.len()).collect();
        for chunk in idx.chunks(ebs) {
            let (_, trace) = model.predict_traced(&Batch::new(&ds, chunk))?;
            let base = rows.len();
            rows.extend(trace.into_iter().map(|mut r| {
                r.step += base;
                r
            }));
        }
        write_trace_csv(&rows, BufWriter::new(File::create(p)?))?;
    }
    let report = EvalReport {
        schema_version: SCHEMA_VERSION,
        metric: ev.metric,
        value: ev.value,
        subjects: raw.len(),
        predictions: ev.labels.len(),
    };
    if let Some(p) = &a.out {
        write_json(p, &report)?;
    }
    println!(
        "{} = {:?} over {} predictions from {} subjects",
        ev.metric.as_str(),
        ev.value,
        report.predictions,
        report.subjects
    );
    Ok(())
}

#[derive(Serialize)]
struct CvReport {
    schema_version: u32,
    seed: u64,
    run: RunConfig,
    report: MetricsReport,
}

fn cv_cmd(a: &CvArgs) -> Result<()> {
    let run = a.run.resolve()?;
    let data = a.data.load()?;
    let seed = a.fold_seed.unwrap_or(run.train.seed);
    let report = cross_validate(&data.subjects, &run, a.folds, seed)?;
    println!(
        "{} over {} folds: {:.4} ± {:.4}",
        report.metric.as_str(),
        report.folds.len(),
        report.mean,
        report.std
    );
    if let Some(p) = &a.out {
        write_json(
            p,
            &CvReport {
                schema_version: SCHEMA_VERSION,
                seed,
                run,
                report,
            },
        )?;
    }
    Ok(())
}

fn grid_cmd(a: &GridArgs) -> Result<()> {
    let mut grid: GridConfig = read_json(&a.config)?;
    if let Some(v) = a.folds {
        grid.folds = v;
    }
    if let Some(v) = a.seed {
        grid.seed = v;
    }
    if let Some(v) = a.epochs {
        grid.base.train.epochs = v;
    }
    let data = a.data.load()?;
    let report = grid_search(&data.subjects, &grid)?;
    let table = render_table(&report);
    print!("{table}");
    if let Some(p) = &a.out {
        write_json(p, &report)?;
    }
    if let Some(p) = &a.table {
        fs::write(p, &table)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenSynth(a) => gen_synth(a),
        Command::Preprocess(a) => preprocess_cmd(a),
        Command::Interpolate(a) => interpolate_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Cv(a) => cv_cmd(a),
        Command::Grid(a) => grid_cmd(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
