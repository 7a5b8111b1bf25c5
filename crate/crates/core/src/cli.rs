//! Command-line driver. Exit codes: 0 success, 1 usage or configuration
//! error, 2 data error.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::bench::{
    default_grid, generate, grid_search, run_online, source_accuracy, train_source_bn, train_source_head,
    Dataset, Method, RunConfig, RunRecord, Shift, SourceModel, SyntheticSpec, TrainOptions,
    DEFAULT_CLASSES, DEFAULT_COV_SCALE, DEFAULT_DIM, DEFAULT_SHIFT_SCALE, DEFAULT_TEST, DEFAULT_TRAIN_PER_CLASS,
    VALIDATION_FRACTION,
};
use crate::error::Error;
use crate::io::{
    features_from_csv, final_lines, read_features, read_model, read_results, write_features, write_model,
    write_results, FeatureFile, ResultLine,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug)]
enum CliError {
    Usage(String),
    Data(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidConfig(_) | Error::EmptyGrid => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn data_err(path: &Path, e: Error) -> CliError {
    match CliError::from(e) {
        CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
        usage => usage,
    }
}

#[derive(Parser, Debug)]
#[command(name = "tast", version, about = "Online test-time adaptation on feature streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic benchmark, or convert a CSV fixture.
    Gen(GenArgs),
    /// Train a source model on a labeled feature file.
    TrainSource(TrainArgs),
    /// Run one method over a test stream.
    Run(RunArgs),
    /// Select a config on validation data, then run it on the test stream.
    Grid(GridArgs),
    /// Summarize a result file.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ShiftKind {
    Identity,
    MeanShift,
    Rotation,
    Noise,
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Directory receiving train.tafs, val.tafs and test.tafs.
    #[arg(long, required_unless_present = "from_csv")]
    out_dir: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_CLASSES)]
    classes: usize,
    #[arg(long, default_value_t = DEFAULT_DIM)]
    dim: usize,
    #[arg(long, default_value_t = DEFAULT_CLASSES * DEFAULT_TRAIN_PER_CLASS)]
    n_train: usize,
    #[arg(long, default_value_t = DEFAULT_TEST)]
    n_test: usize,
    #[arg(long, default_value_t = DEFAULT_COV_SCALE)]
    cov_scale: f64,
    #[arg(long, value_enum, default_value = "mean-shift")]
    shift: ShiftKind,
    /// Shift scale, rotation angle in degrees, or noise sigma.
    #[arg(long, default_value_t = DEFAULT_SHIFT_SCALE)]
    shift_amount: f64,
    #[arg(long, default_value_t = VALIDATION_FRACTION)]
    val_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Convert `label,f1,...,fd` rows instead of generating.
    #[arg(long, requires = "out")]
    from_csv: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModelKind {
    Head,
    Bn,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "head")]
    kind: ModelKind,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// Full run config as JSON text or a path to a JSON file; the flags
    /// below override its fields.
    #[arg(long)]
    config_json: Option<String>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    ns: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    /// Per-class support cap; -1 keeps everything.
    #[arg(long, allow_negative_numbers = true)]
    m: Option<i64>,
    #[arg(long)]
    ne: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    d_phi: Option<usize>,
    /// Total support cap for tast_bn; 0 disables it.
    #[arg(long)]
    global_cap: Option<usize>,
    #[arg(long)]
    fixed_prototypes: bool,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Labeled test stream.
    #[arg(long)]
    test: PathBuf,
    /// Source model JSON; defaults to the head stored in the test file.
    #[arg(long)]
    model: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    /// Result file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GridArgs {
    #[arg(long)]
    val: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    model: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    results: PathBuf,
    #[arg(long)]
    csv: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self, fallback: Method) -> CliResult<RunConfig> {
        let mut config = match &self.config_json {
            Some(text) => {
                let text = if text.trim_start().starts_with('{') {
                    text.clone()
                } else {
                    fs::read_to_string(text).map_err(|e| CliError::Data(format!("{text}: {e}")))?
                };
                serde_json::from_str::<RunConfig>(&text)
                    .map_err(|e| CliError::Usage(format!("bad --config-json: {e}")))?
            }
            None => RunConfig::new(fallback),
        };
        if let Some(m) = &self.method {
            config.method = m.parse()?;
        }
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = self.$flag { config.$field = v; })*
            };
        }
        set!(ns => n_s, steps => steps, m => m, ne => n_e, tau => tau, lr => lr, batch_size => batch_size, seed => seed);
        if let Some(d) = self.d_phi {
            config.d_phi = Some(d);
        }
        if let Some(cap) = self.global_cap {
            config.global_cap = (cap > 0).then_some(cap);
        }
        if self.fixed_prototypes {
            config.fixed_prototypes = true;
        }
        config.validate()?;
        Ok(config)
    }
}

fn load_dataset(path: &Path) -> CliResult<(FeatureFile, Dataset)> {
    let file = read_features(path).map_err(|e| data_err(path, e))?;
    let data = file.dataset().map_err(|e| match e {
        Error::InvalidConfig(m) => CliError::Data(format!("{}: {m}", path.display())),
        other => data_err(path, other),
    })?;
    Ok((file, data))
}

fn load_model(model: Option<&Path>, fallback: &FeatureFile, fallback_path: &Path) -> CliResult<SourceModel> {
    match model {
        Some(p) => read_model(p).map_err(|e| data_err(p, e)),
        None => match fallback.linear_head() {
            Some(head) => Ok(SourceModel::Head { head: head.map_err(|e| data_err(fallback_path, e))? }),
            None => Err(CliError::Usage(format!(
                "{} carries no head; pass --model",
                fallback_path.display()
            ))),
        },
    }
}

fn open_out(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(io::BufWriter::new(fs::File::create(p)?)),
        None => Box::new(io::stdout().lock()),
    })
}

fn gen(args: &GenArgs) -> CliResult<()> {
    if let (Some(src), Some(out)) = (&args.from_csv, &args.out) {
        let text = fs::read_to_string(src).map_err(|e| CliError::Data(format!("{}: {e}", src.display())))?;
        let file = features_from_csv(&text, args.classes).map_err(|e| match e {
            Error::InvalidConfig(m) => CliError::Data(format!("{}: {m}", src.display())),
            other => other.into(),
        })?;
        write_features(out, &file)?;
        println!("{}", json!({ "out": out, "n": file.n(), "dim": file.dim(), "classes": file.num_classes }));
        return Ok(());
    }
    let out_dir = args.out_dir.as_ref().expect("clap enforces out_dir");
    let shift = match args.shift {
        ShiftKind::Identity => Shift::Identity,
        ShiftKind::MeanShift => Shift::MeanShift { scale: args.shift_amount },
        ShiftKind::Rotation => Shift::Rotation { degrees: args.shift_amount },
        ShiftKind::Noise => Shift::GaussianNoise { sigma: args.shift_amount },
    };
    let spec = SyntheticSpec::new(args.classes, args.dim, args.n_train, args.n_test, args.cov_scale, shift, args.seed)?;
    let (train, test) = generate(&spec)?;
    let (train, val) = train.split(args.val_fraction, args.seed)?;
    fs::create_dir_all(out_dir)?;
    for (name, data) in [("train", &train), ("val", &val), ("test", &test)] {
        write_features(out_dir.join(format!("{name}.tafs")), &FeatureFile::from_dataset(data, None))?;
    }
    fs::write(out_dir.join("spec.json"), serde_json::to_string_pretty(&spec).map_err(Error::from)?)?;
    println!(
        "{}",
        json!({ "out_dir": out_dir, "train": train.len(), "val": val.len(), "test": test.len() })
    );
    Ok(())
}

fn train_source(args: &TrainArgs) -> CliResult<()> {
    let (_, train) = load_dataset(&args.train)?;
    let mut opts = match args.kind {
        ModelKind::Head => TrainOptions::head_default(),
        ModelKind::Bn => TrainOptions::bn_default(),
    };
    opts.seed = args.seed;
    if let Some(e) = args.epochs {
        opts.epochs = e;
    }
    if let Some(lr) = args.lr {
        opts.lr = lr;
    }
    let (model, report) = match args.kind {
        ModelKind::Head => {
            let r = train_source_head(&train, &opts)?;
            (SourceModel::Head { head: r.model.clone() }, (r.train_accuracy, r.initial_loss, r.final_loss))
        }
        ModelKind::Bn => {
            let r = train_source_bn(&train, &opts)?;
            let (extractor, head) = r.model.clone();
            (SourceModel::Bn { extractor, head }, (r.train_accuracy, r.initial_loss, r.final_loss))
        }
    };
    let val_accuracy = match &args.val {
        Some(p) => Some(source_accuracy(&model, &load_dataset(p)?.1)?),
        None => None,
    };
    write_model(&args.out, &model)?;
    println!(
        "{}",
        json!({
            "model": args.out,
            "train_accuracy": report.0,
            "val_accuracy": val_accuracy,
            "initial_loss": report.1,
            "final_loss": report.2,
        })
    );
    Ok(())
}

fn run(args: &RunArgs) -> CliResult<()> {
    let config = args.config.resolve(Method::None)?;
    if args.config.method.is_none() && args.config.config_json.is_none() {
        return Err(CliError::Usage("run needs --method or --config-json".into()));
    }
    let (file, test) = load_dataset(&args.test)?;
    let model = load_model(args.model.as_deref(), &file, &args.test)?;
    let record = run_online(&model, &test, &config)?;
    write_results(open_out(args.out.as_deref())?, std::slice::from_ref(&record))?;
    eprintln!("{} final_accuracy={:.4}", record.method, record.final_accuracy());
    Ok(())
}

fn grid(args: &GridArgs) -> CliResult<()> {
    let base = args.config.resolve(Method::Tast)?;
    let (val_file, val) = load_dataset(&args.val)?;
    let (_, test) = load_dataset(&args.test)?;
    let model = load_model(args.model.as_deref(), &val_file, &args.val)?;
    let configs = default_grid(&base);
    let result = grid_search(&model, &val, &configs)?;
    let record: RunRecord = run_online(&model, &test, &result.best)?;
    write_results(open_out(args.out.as_deref())?, std::slice::from_ref(&record))?;
    let summary = json!({
        "best_index": result.best_index,
        "best_config": result.best,
        "validation_accuracy": result.best_accuracy,
        "test_accuracy": record.final_accuracy(),
    });
    if args.out.is_some() {
        println!("{summary}");
    } else {
        eprintln!("{summary}");
    }
    Ok(())
}

/// CSV columns of `report`.
pub const REPORT_COLUMNS: [&str; 10] =
    ["method", "N_s", "T", "M", "N_e", "tau", "lr", "batch_size", "seed", "final_accuracy"];

fn report_row(line: &ResultLine) -> [String; 10] {
    let c = &line.config;
    [
        line.method.clone(),
        c.n_s.to_string(),
        c.steps.to_string(),
        c.m.to_string(),
        c.n_e.to_string(),
        c.tau.to_string(),
        c.lr.to_string(),
        c.batch_size.to_string(),
        c.seed.to_string(),
        format!("{:.6}", line.cumulative_accuracy),
    ]
}

fn report(args: &ReportArgs) -> CliResult<()> {
    let file = fs::File::open(&args.results).map_err(|e| CliError::Data(format!("{}: {e}", args.results.display())))?;
    let lines = read_results(BufReader::new(file)).map_err(|e| match e {
        Error::InvalidConfig(m) => CliError::Data(m),
        other => data_err(&args.results, other),
    })?;
    if lines.is_empty() {
        return Err(CliError::Data(format!("{}: no results", args.results.display())));
    }
    let rows: Vec<[String; 10]> = final_lines(&lines).into_iter().map(report_row).collect();
    let mut widths = REPORT_COLUMNS.map(str::len);
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut table = String::new();
    for row in std::iter::once(REPORT_COLUMNS.map(String::from)).chain(rows.iter().cloned()) {
        let cells: Vec<String> = row.iter().zip(widths).map(|(c, w)| format!("{c:>w$}")).collect();
        writeln!(table, "{}", cells.join("  ").trim_end()).expect("string write");
    }
    print!("{table}");
    if let Some(path) = &args.csv {
        let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Data(e.to_string()))?;
        w.write_record(REPORT_COLUMNS).map_err(|e| CliError::Data(e.to_string()))?;
        for row in &rows {
            w.write_record(row).map_err(|e| CliError::Data(e.to_string()))?;
        }
        w.flush()?;
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let outcome = match &cli.command {
        Command::Gen(a) => gen(a),
        Command::TrainSource(a) => train_source(a),
        Command::Run(a) => run(a),
        Command::Grid(a) => grid(a),
        Command::Report(a) => report(a),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(CliError::Data(m)) => {
            eprintln!("error: {m}");
            EXIT_DATA
        }
    }
}
