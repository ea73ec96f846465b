use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use predcausal::dataset::{load_csv, read_csv, read_predictor_table, validate, write_csv, ColumnMapping, EndpointTransform};
use predcausal::error::{Error, Result};
use predcausal::moments::estimate_moments;
use predcausal::pipeline::{run_analyze, score_patients, AnalysisConfig, FittedModel};
use predcausal::plot;
use predcausal::report::{self, to_json_bytes, write_file, ScoreReport};
use predcausal::search::{enumerate_and_score, ChampionCriterion};
use predcausal::simulate::{simulate, write_truth_csv, PlantedTrial, SimulationSpec};
use predcausal::survival::{compare_arms, subgroup_audit};

const EXIT_OTHER: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_SCHEMA: u8 = 3;
const EXIT_DATA: u8 = 4;
const EXIT_INFEASIBLE: u8 = 5;

#[derive(Parser)]
#[command(name = "predcausal", version, about = "Individual causal treatment effect prediction for two-arm survival trials")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline and write report, model, search table and figures.
    Analyze(AnalyzeArgs),
    /// Score every predictor subset and write the search table.
    Search(AnalyzeArgs),
    /// Score patients against a saved model.
    Score(ScoreArgs),
    /// Kaplan-Meier curves and log-rank tests, by arm or by responder class.
    Survival(SurvivalArgs),
    /// Draw a synthetic trial from a joint normal model.
    Simulate(SimulateArgs),
    /// Check a CSV file and summarize what the analysis would use.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Patient-level CSV file.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "id")]
    id_column: String,
    #[arg(long, default_value = "arm")]
    arm_column: String,
    #[arg(long, default_value = "time")]
    time_column: String,
    #[arg(long, default_value = "event")]
    event_column: String,
    /// Comma-separated predictor columns; defaults to every other column.
    #[arg(long, value_delimiter = ',')]
    predictors: Option<Vec<String>>,
    /// Endpoint used for moment estimation: identity or log of time.
    #[arg(long, default_value = "identity", value_parser = ["identity", "log"])]
    endpoint_transform: String,
}

impl DataArgs {
    fn mapping(&self) -> ColumnMapping {
        ColumnMapping {
            id: self.id_column.clone(),
            arm: self.arm_column.clone(),
            time: self.time_column.clone(),
            event: self.event_column.clone(),
            predictors: self.predictors.clone(),
        }
    }

    fn transform(&self) -> EndpointTransform {
        self.endpoint_transform.parse().expect("restricted by clap")
    }
}

#[derive(Args)]
struct AnalyzeArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Directory for the output files.
    #[arg(long, default_value = "predcausal-out")]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0.01)]
    rho_step: f64,
    #[arg(long, default_value_t = 0.7)]
    threshold: f64,
    /// Largest subset size to enumerate.
    #[arg(long)]
    max_cardinality: Option<usize>,
    /// Worker threads; defaults to one per core.
    #[arg(long)]
    worker_count: Option<usize>,
    /// Recorded in the report.
    #[arg(long)]
    seed: Option<u64>,
    /// Statistic that picks the best subset of each size.
    #[arg(long, default_value = "mean", value_parser = ["mean", "min"])]
    criterion: String,
}

impl AnalyzeArgs {
    fn config(&self) -> AnalysisConfig {
        AnalysisConfig {
            input: self.data.input.clone(),
            column_mapping: self.data.mapping(),
            rho_step: self.rho_step,
            threshold: self.threshold,
            endpoint_transform: self.data.transform(),
            max_cardinality: self.max_cardinality,
            worker_count: self.worker_count,
            seed: self.seed,
            criterion: self.criterion.parse::<ChampionCriterion>().expect("restricted by clap"),
        }
    }
}

#[derive(Args)]
struct ScoreArgs {
    /// Model file written by `analyze`.
    #[arg(long)]
    model: PathBuf,
    /// CSV with an id column and the model's predictor columns.
    #[arg(long, conflicts_with = "value", required_unless_present = "value")]
    input: Option<PathBuf>,
    #[arg(long, default_value = "id")]
    id_column: String,
    /// One patient given as name=value pairs.
    #[arg(long, value_name = "NAME=VALUE")]
    value: Vec<String>,
    /// Identifier for the patient given with --value.
    #[arg(long, default_value = "patient")]
    patient_id: String,
    /// JSON output file; standard output when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Optional SVG of success probability against rho.
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Args)]
struct SurvivalArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Model file; when given, curves are split by responder class.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value = "predcausal-out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// JSON simulation spec.
    #[arg(long, conflicts_with = "planted", required_unless_present = "planted")]
    spec: Option<PathBuf>,
    /// Use the built-in 13-biomarker trial with 5 effect modifiers.
    #[arg(long)]
    planted: bool,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    censoring_rate: Option<f64>,
    /// Observed data CSV.
    #[arg(long)]
    output: PathBuf,
    /// Sidecar CSV with the latent outcomes of each patient.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Writes the resolved spec as JSON.
    #[arg(long)]
    spec_out: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    #[command(flatten)]
    data: DataArgs,
    /// JSON output file; standard output when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => EXIT_OTHER,
        Error::Csv(_) | Error::Json(_) | Error::MissingColumn { .. } | Error::Schema(_) | Error::Validation(_) => {
            EXIT_SCHEMA
        }
        Error::InsufficientData(_) | Error::Singular { .. } | Error::DegenerateTest(_) => EXIT_DATA,
        Error::Infeasible { .. } => EXIT_INFEASIBLE,
        Error::Domain(_) | Error::Capacity(_) => EXIT_USAGE,
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_owned(),
        source: e,
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_owned(),
        source: e,
    })
}

fn emit(output: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match output {
        Some(path) => write_file(path, bytes),
        None => std::io::stdout().write_all(bytes).map_err(|e| Error::Io {
            path: "<stdout>".into(),
            source: e,
        }),
    }
}

fn fmt_names(names: &[String]) -> String {
    names.join(", ")
}

fn analyze(args: &AnalyzeArgs) -> Result<()> {
    let cfg = args.config();
    let analysis = run_analyze(&cfg)?;
    let written = report::write_analysis(&args.out_dir, &analysis, &cfg)?;
    let names = &analysis.moments.predictor_names;
    let counts = report::ClassCounts::of(&analysis.curves);
    println!("subsets evaluated: {}", analysis.search.subset_count);
    println!(
        "selected model ({:?}): {} | pci min {:.4} mean {:.4} max {:.4} | accuracy {}",
        analysis.rule,
        fmt_names(&analysis.scored.subset.names(names)),
        analysis.scored.pci_min,
        analysis.scored.pci_mean,
        analysis.scored.pci_max,
        analysis.scored.accuracy.label()
    );
    println!("responders: {} good, {} rare, {} bad", counts.good, counts.rare, counts.bad);
    for w in &analysis.audit.warnings {
        eprintln!("warning: {w}");
    }
    for path in written {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn search(args: &AnalyzeArgs) -> Result<()> {
    let cfg = args.config();
    cfg.check()?;
    let ds = load_csv(&cfg.input, &cfg.column_mapping, cfg.endpoint_transform)?;
    let moments = estimate_moments(&ds)?;
    let grid = cfg.grid()?;
    let result = enumerate_and_score(&moments, &grid, &cfg.search_options())?;
    let written = report::write_search_outputs(&args.out_dir, &result)?;
    println!("subsets evaluated: {} ({} infeasible)", result.subset_count, result.infeasible_count);
    for (k, champion) in result.champions.iter().enumerate() {
        match champion {
            Some(p) => println!(
                "k={:2}  min {:.4}  mean {:.4}  max {:.4}  {}",
                k + 1,
                p.pci_min,
                p.pci_mean,
                p.pci_max,
                fmt_names(&p.subset.names(&moments.predictor_names))
            ),
            None => println!("k={:2}  no feasible subset", k + 1),
        }
    }
    match &result.selected {
        Some(p) => println!("selected: {}", fmt_names(&p.subset.names(&moments.predictor_names))),
        None => println!("no champion has minimum PCI above {}", result.threshold),
    }
    for path in written {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn parse_values(model: &FittedModel, pairs: &[String]) -> Result<Vec<f64>> {
    let names = &model.moments.predictor_names;
    let mut values = vec![f64::NAN; names.len()];
    for pair in pairs {
        let (name, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::Domain(format!("`{pair}` is not of the form name=value")))?;
        let j = names
            .iter()
            .position(|n| n == name.trim())
            .ok_or_else(|| Error::Domain(format!("`{name}` is not a predictor of the model")))?;
        values[j] = value
            .trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| Error::Domain(format!("`{value}` is not a finite number")))?;
    }
    for j in model.subset.indices() {
        if values[j].is_nan() {
            return Err(Error::Domain(format!("missing value for `{}`", names[j])));
        }
    }
    Ok(values)
}

fn score(args: &ScoreArgs) -> Result<()> {
    let model = FittedModel::from_json(&read_text(&args.model)?)?;
    let rows = match &args.input {
        Some(path) => {
            let file = fs::File::open(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            read_predictor_table(file, &args.id_column, &model.moments.predictor_names, &model.subset.indices())?
        }
        None => vec![(args.patient_id.clone(), parse_values(&model, &args.value)?)],
    };
    let curves = score_patients(&model, &rows)?;
    if let Some(path) = &args.plot {
        let title = format!("Probability of treatment success, model {}", fmt_names(&model.subset_names));
        write_file(path, plot::success_by_rho(&curves, &title).as_bytes())?;
    }
    emit(args.output.as_deref(), &to_json_bytes(&ScoreReport::new(&model, curves))?)
}

fn survival(args: &SurvivalArgs) -> Result<()> {
    create_dir(&args.out_dir)?;
    let json = args.out_dir.join("survival.json");
    match &args.model {
        None => {
            let ds = load_csv(&args.data.input, &args.data.mapping(), args.data.transform())?;
            let cmp = compare_arms(&ds)?;
            let svg = args.out_dir.join("survival_by_arm.svg");
            write_file(&json, &to_json_bytes(&cmp)?)?;
            write_file(&svg, plot::survival_by_arm(&cmp).as_bytes())?;
            if let Some(lr) = &cmp.log_rank {
                println!("treated vs control: log-rank statistic {:.4}, p = {:.3e}", lr.statistic, lr.p_value);
            }
            for w in &cmp.warnings {
                eprintln!("warning: {w}");
            }
            println!("wrote {}\nwrote {}", json.display(), svg.display());
        }
        Some(model_path) => {
            let model = FittedModel::from_json(&read_text(model_path)?)?;
            let mut mapping = args.data.mapping();
            if mapping.predictors.is_none() {
                mapping.predictors = Some(model.moments.predictor_names.clone());
            }
            let ds = load_csv(&args.data.input, &mapping, args.data.transform())?;
            let rows: Vec<(String, Vec<f64>)> = ds
                .records()
                .iter()
                .map(|r| {
                    let values = model
                        .moments
                        .predictor_names
                        .iter()
                        .map(|n| ds.predictor_index(n).map_or(f64::NAN, |j| r.predictors[j]))
                        .collect();
                    (r.id.clone(), values)
                })
                .collect();
            let curves = score_patients(&model, &rows)?;
            let audit = subgroup_audit(&ds, &curves)?;
            let svg = args.out_dir.join(report::FIG_SURVIVAL_FILE);
            write_file(&json, &to_json_bytes(&audit)?)?;
            write_file(&svg, plot::survival_by_class(&audit).as_bytes())?;
            for class in &audit.classes {
                if let Some(lr) = &class.log_rank {
                    println!("{} responders: log-rank statistic {:.4}, p = {:.3e}", class.class, lr.statistic, lr.p_value);
                }
            }
            for w in &audit.warnings {
                eprintln!("warning: {w}");
            }
            println!("wrote {}\nwrote {}", json.display(), svg.display());
        }
    }
    Ok(())
}

fn simulate_cmd(args: &SimulateArgs) -> Result<()> {
    let mut spec = match &args.spec {
        Some(path) => serde_json::from_str::<SimulationSpec>(&read_text(path)?)?,
        None => PlantedTrial::default().spec(),
    };
    if let Some(n) = args.n {
        spec.n = n;
    }
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(rate) = args.censoring_rate {
        spec.censoring_rate = rate;
    }
    let sim = simulate(&spec)?;
    let mut buf = Vec::new();
    write_csv(&sim.dataset, &mut buf)?;
    write_file(&args.output, &buf)?;
    if let Some(path) = &args.truth {
        let mut buf = Vec::new();
        write_truth_csv(&sim.truth, &mut buf)?;
        write_file(path, &buf)?;
    }
    if let Some(path) = &args.spec_out {
        write_file(path, &to_json_bytes(&spec)?)?;
    }
    println!("wrote {} patients to {}", spec.n, args.output.display());
    Ok(())
}

fn validate_cmd(args: &ValidateArgs) -> Result<()> {
    let file = fs::File::open(&args.data.input).map_err(|e| Error::Io {
        path: args.data.input.clone(),
        source: e,
    })?;
    let ds = read_csv(file, &args.data.mapping(), args.data.transform())?;
    let summary = validate(&ds);
    emit(args.output.as_deref(), &to_json_bytes(&summary)?)?;
    if !summary.is_sufficient() {
        return Err(Error::InsufficientData(format!(
            "each arm needs at least {} uncensored rows and no predictor may be constant",
            summary.required_uncensored_per_arm
        )));
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Analyze(a) => analyze(a),
        Command::Search(a) => search(a),
        Command::Score(a) => score(a),
        Command::Survival(a) => survival(a),
        Command::Simulate(a) => simulate_cmd(a),
        Command::Validate(a) => validate_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config_error = match &cli.command {
        Command::Analyze(a) | Command::Search(a) => a.config().check().err(),
        _ => None,
    };
    if let Some(e) = config_error {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_USAGE);
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
