use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use recency_core::data::{self, ColumnMap, Dataset, PreprocessOptions, StandardizationReport};
use recency_core::estimation::{backward_stepwise, best_variant, compare_eta_variants_with, fit, FitOptions};
use recency_core::model::{DEFAULT_FIX_ETA00, DEFAULT_FIX_ETA10};
use recency_core::optim::MaximizeOptions;
use recency_core::prediction::{incidence, recency_rate};
use recency_core::report::{sha256_file, variant_table, write_predictions, FitReport, RunManifest};
use recency_core::simulation::{generate, run_replicates, Scenario, ScenarioConfig};
use recency_core::ModelSpec;

const EXIT_NOT_CONVERGED: u8 = 2;

#[derive(Parser, Serialize)]
#[command(name = "recency", version, about = "Recency classification with partially observed labels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Serialize)]
enum Command {
    /// Fit the model to a CSV and write estimates, risks and a manifest.
    Fit(FitArgs),
    /// Compare eta variants by BIC, then run backward covariate deletion.
    Select(SelectArgs),
    /// Run a Monte Carlo scenario.
    Simulate(SimulateArgs),
    /// Score a CSV with a saved fit.
    Predict(PredictArgs),
    /// Write one simulated dataset as CSV.
    Generate(GenerateArgs),
}

#[derive(Args, Serialize)]
struct ColumnArgs {
    /// TOML file mapping field names to CSV headers.
    #[arg(long)]
    columns: Option<PathBuf>,
    #[arg(long)]
    col_id: Option<String>,
    #[arg(long)]
    col_weight: Option<String>,
    #[arg(long)]
    col_s: Option<String>,
    #[arg(long)]
    col_z: Option<String>,
    #[arg(long)]
    col_test_year: Option<String>,
    #[arg(long)]
    col_test_month: Option<String>,
    #[arg(long)]
    col_interview_year: Option<String>,
    #[arg(long)]
    col_interview_month: Option<String>,
    #[arg(long)]
    col_tested_past_year: Option<String>,
    #[arg(long)]
    col_age: Option<String>,
    #[arg(long)]
    col_gender: Option<String>,
    #[arg(long)]
    col_odn: Option<String>,
    #[arg(long)]
    col_vl: Option<String>,
    #[arg(long)]
    col_cd4: Option<String>,
}

impl ColumnArgs {
    fn resolve(&self) -> anyhow::Result<ColumnMap> {
        let mut map = match &self.columns {
            Some(p) => ColumnMap::from_toml_file(p).with_context(|| format!("reading {}", p.display()))?,
            None => ColumnMap::default(),
        };
        let overrides = [
            (&self.col_id, &mut map.id),
            (&self.col_weight, &mut map.weight),
            (&self.col_s, &mut map.s),
            (&self.col_z, &mut map.z),
            (&self.col_test_year, &mut map.test_year),
            (&self.col_test_month, &mut map.test_month),
            (&self.col_interview_year, &mut map.interview_year),
            (&self.col_interview_month, &mut map.interview_month),
            (&self.col_tested_past_year, &mut map.tested_past_year),
            (&self.col_age, &mut map.age),
            (&self.col_gender, &mut map.gender),
            (&self.col_odn, &mut map.odn),
            (&self.col_vl, &mut map.vl),
            (&self.col_cd4, &mut map.cd4),
        ];
        for (flag, field) in overrides {
            if let Some(v) = flag {
                *field = v.clone();
            }
        }
        Ok(map)
    }
}

#[derive(Args, Serialize)]
struct DataArgs {
    /// Input CSV.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    columns: ColumnArgs,
    /// Seed for month imputation and categorical viral loads.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Drop rows with a missing test month instead of imputing it.
    #[arg(long)]
    no_impute: bool,
    /// Accept categorical viral-load entries such as `<20`.
    #[arg(long)]
    categorical_vl: bool,
    /// Use covariates as given, without centering and scaling.
    #[arg(long)]
    no_standardize: bool,
}

#[derive(Args, Serialize)]
struct ModelArgs {
    /// Covariates entering the recency probability (default: every standard one present).
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,
    /// Value of eta00, or `free`.
    #[arg(long, allow_hyphen_values = true, default_value_t = DEFAULT_FIX_ETA00.to_string())]
    fix_eta00: String,
    /// Value of eta10, or `free`.
    #[arg(long, allow_hyphen_values = true, default_value_t = DEFAULT_FIX_ETA10.to_string())]
    fix_eta10: String,
    /// Treat the recent-reporting probability as identically one.
    #[arg(long, conflicts_with = "fix_eta00")]
    p0_one: bool,
    /// Fit the density-ratio extension.
    #[arg(long)]
    extended: bool,
    /// Covariates that also enter both reporting probabilities.
    #[arg(long, value_delimiter = ',')]
    eta_covariates: Vec<String>,
    /// Iteration cap per optimizer start.
    #[arg(long, default_value_t = MaximizeOptions::default().max_iterations)]
    max_iter: usize,
}

fn parse_fixed(flag: &str, value: &str) -> anyhow::Result<Option<f64>> {
    if value.eq_ignore_ascii_case("free") {
        return Ok(None);
    }
    match value.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => bail!("--{flag} expects a number or `free`, got `{value}`"),
    }
}

impl ModelArgs {
    fn spec(&self, covariates: Vec<String>) -> anyhow::Result<ModelSpec> {
        let eta10 = parse_fixed("fix-eta10", &self.fix_eta10)?;
        let mut spec = ModelSpec::new(covariates);
        spec = if self.p0_one {
            spec.with_p0_one(eta10)
        } else {
            spec.with_fixed_eta(parse_fixed("fix-eta00", &self.fix_eta00)?, eta10)
        };
        let eta_idx = self
            .eta_covariates
            .iter()
            .map(|n| {
                spec.covariate_names
                    .iter()
                    .position(|c| c == n)
                    .with_context(|| format!("eta covariate `{n}` is not among the covariates"))
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        spec = spec.with_extended(self.extended).with_eta_covariates(eta_idx);
        spec.validate()?;
        Ok(spec)
    }

    fn options(&self) -> FitOptions {
        let mut opts = FitOptions::default();
        opts.maximize.max_iterations = self.max_iter;
        opts
    }
}

#[derive(Args, Serialize)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct SelectArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Covariates considered for deletion (default: `--covariates`, else every standard one present).
    #[arg(long, value_delimiter = ',')]
    candidates: Option<Vec<String>>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct ScenarioArgs {
    /// Scenario number: 1, 2, 5, 6 or 7.
    #[arg(long, value_parser = parse_scenario)]
    scenario: u32,
    /// Total subjects per dataset (split evenly between training and test).
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// True recency coefficients, intercept first.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    beta: Option<Vec<f64>>,
    /// True reporting coefficients eta00,eta01,eta10,eta11.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    eta: Option<Vec<f64>>,
}

fn parse_scenario(s: &str) -> Result<u32, String> {
    let n: u32 = s.parse().map_err(|_| format!("`{s}` is not a scenario number"))?;
    Scenario::from_number(n).map(|_| n).map_err(|e| e.to_string())
}

impl ScenarioArgs {
    fn config(&self) -> anyhow::Result<ScenarioConfig> {
        let mut config = ScenarioConfig::preset(Scenario::from_number(self.scenario)?);
        if let Some(n) = self.n {
            config.n_total = n;
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(beta) = &self.beta {
            config.beta_true = beta.clone();
        }
        if let Some(eta) = &self.eta {
            config.eta_true = eta
                .as_slice()
                .try_into()
                .map_err(|_| anyhow::anyhow!("--eta needs exactly 4 values, got {}", eta.len()))?;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args, Serialize)]
struct SimulateArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long, default_value_t = 500)]
    reps: usize,
    /// Fit the density-ratio extension.
    #[arg(long)]
    extended: bool,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct PredictArgs {
    /// Fit JSON written by `recency fit`.
    #[arg(long)]
    fit: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    columns: ColumnArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    no_impute: bool,
    #[arg(long)]
    categorical_vl: bool,
    /// HIV prevalence, for incidence.
    #[arg(long, requires = "p_art")]
    p_hiv: Option<f64>,
    /// Fraction of positives on treatment, for incidence.
    #[arg(long, requires = "p_hiv")]
    p_art: Option<f64>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct GenerateArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

struct Run {
    started: String,
    inputs: BTreeMap<String, String>,
}

impl Run {
    fn new() -> Self {
        Self {
            started: now(),
            inputs: BTreeMap::new(),
        }
    }

    fn input(&mut self, path: &Path) -> anyhow::Result<()> {
        let hash = sha256_file(path).with_context(|| format!("cannot read {}", path.display()))?;
        self.inputs.insert(path.display().to_string(), hash);
        Ok(())
    }

    fn finish(self, out: &Path, command: &str, config: serde_json::Value, seed: Option<u64>) -> anyhow::Result<()> {
        let manifest = RunManifest {
            command: command.to_string(),
            config,
            seed,
            input_hashes: self.inputs,
            version: env!("CARGO_PKG_VERSION").to_string(),
            started: self.started,
            finished: now(),
        };
        write_json(&out.join("manifest.json"), &manifest)
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339()
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
    ))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("cannot write {}", path.display()))
}

fn out_dir(out: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))
}

fn load_dataset(
    args: &DataArgs,
    covariates: Option<Vec<String>>,
    run: &mut Run,
) -> anyhow::Result<(Dataset, StandardizationReport)> {
    run.input(&args.data)?;
    if let Some(p) = &args.columns.columns {
        run.input(p)?;
    }
    let table = data::load(&args.data, &args.columns.resolve()?)?;
    let opts = PreprocessOptions {
        seed: args.seed,
        covariates,
        impute_months: !args.no_impute,
        categorical_vl: args.categorical_vl,
        moments: None,
        standardize: !args.no_standardize,
    };
    let (dataset, report) = data::preprocess(&table, &opts)?;
    for d in &report.dropped {
        log::warn!("row {} ({}) dropped: {}", d.row, d.id, d.reason);
    }
    Ok((dataset, report))
}

fn exit_for(converged: bool) -> u8 {
    if converged {
        0
    } else {
        eprintln!("warning: optimizer did not converge; estimates are flagged");
        EXIT_NOT_CONVERGED
    }
}

fn cmd_fit(args: &FitArgs, config: serde_json::Value) -> anyhow::Result<u8> {
    let mut run = Run::new();
    let (dataset, prep) = load_dataset(&args.data, args.model.covariates.clone(), &mut run)?;
    let spec = args.model.spec(dataset.covariate_names.clone())?;
    let result = fit(&dataset.subjects, &spec, None, &args.model.options())?;
    let result = result.with_recency_rate(&dataset.subjects)?;
    out_dir(&args.out)?;
    let report = FitReport::from_fit(&result, &prep.moments);
    fs::write(args.out.join("fit.json"), report.to_json()? + "\n")?;
    write_predictions(
        create(&args.out.join("predictions.csv"))?,
        &dataset.ids,
        &dataset.subjects,
        &result.theta_hat,
        &spec,
    )?;
    run.finish(&args.out, "fit", config, Some(args.data.seed))?;
    println!(
        "fit: n={} log_pl={:.6} bic={:.6} converged={}",
        result.n_subjects, result.log_pl, result.bic, result.converged
    );
    if let Some(e) = &result.covariance_error {
        eprintln!("warning: no standard errors: {e}");
    }
    Ok(exit_for(result.converged))
}

fn cmd_select(args: &SelectArgs, config: serde_json::Value) -> anyhow::Result<u8> {
    let mut run = Run::new();
    let requested = args.candidates.clone().or_else(|| args.model.covariates.clone());
    let (dataset, prep) = load_dataset(&args.data, requested, &mut run)?;
    let candidates = dataset.covariate_names.clone();
    let base = args.model.spec(candidates.clone())?;
    let opts = args.model.options();

    let rows = compare_eta_variants_with(&dataset.subjects, &base, &opts);
    let best = best_variant(&rows).context("no eta variant could be fitted")?;
    println!("variant table:");
    for r in &rows {
        let mark = if r.variant == best.variant { "*" } else { " " };
        println!(
            "{mark} {:<24} k={} log_pl={:.4} bic={:.4} converged={}",
            r.variant.label(),
            r.n_free,
            r.log_pl,
            r.bic,
            r.converged
        );
    }
    let template = best.variant.apply(&ModelSpec {
        eta_covariates: Vec::new(),
        ..base.clone()
    });
    let step = backward_stepwise(&dataset, &candidates, &template, &opts)?;
    for s in &step.trace {
        match &s.deleted {
            Some(d) => println!("step: {:?} bic={:.4} -> delete {d}", s.covariates, s.bic),
            None => println!("step: {:?} bic={:.4} -> stop", s.covariates, s.bic),
        }
    }
    println!("selected: {:?}", step.selected);

    out_dir(&args.out)?;
    let table = variant_table(&rows);
    let mut w = csv::Writer::from_writer(create(&args.out.join("variants.csv"))?);
    for row in &table {
        w.serialize(row)?;
    }
    w.flush()?;
    write_json(
        &args.out.join("stepwise.json"),
        &serde_json::json!({
            "variant": best.variant.label(),
            "candidates": candidates,
            "selected": step.selected,
            "trace": step.trace,
        }),
    )?;
    let moments: Vec<_> = prep
        .moments
        .into_iter()
        .filter(|m| step.selected.contains(&m.name))
        .collect();
    let report = FitReport::from_fit(&step.fit, &moments);
    fs::write(args.out.join("fit.json"), report.to_json()? + "\n")?;
    run.finish(&args.out, "select", config, Some(args.data.seed))?;
    Ok(exit_for(step.fit.converged))
}

fn cmd_simulate(args: &SimulateArgs, config: serde_json::Value) -> anyhow::Result<u8> {
    let run = Run::new();
    let scenario = args.scenario.config()?;
    let spec = ModelSpec::new(scenario.covariate_names.clone()).with_extended(args.extended);
    let result = run_replicates(&scenario, args.reps, &spec, &FitOptions::default())?;
    out_dir(&args.out)?;
    write_json(&args.out.join("summary.json"), &result.summary)?;
    result.write_csv(create(&args.out.join("replicates.csv"))?)?;
    let config = serde_json::json!({ "args": config, "scenario": scenario, "spec": spec });
    run.finish(&args.out, "simulate", config, Some(scenario.seed))?;
    let s = &result.summary;
    println!("scenario {}: {}/{} replicates converged", scenario.scenario.number(), s.n_converged, s.n_reps);
    for p in &s.params {
        println!(
            "  {:<8} truth={:>8.4} mean={:>8.4} se={:>7.4} sd={:>7.4} coverage={:.3}",
            p.name, p.truth, p.mean_estimate, p.mean_se, p.sd, p.coverage
        );
    }
    println!(
        "  auc type1={:.4} type2={:.4} logistic={:.4} E(Y)={:.4}",
        s.auc_type1, s.auc_type2, s.auc_logistic, s.e_y_mean
    );
    Ok(if s.n_converged == 0 { EXIT_NOT_CONVERGED } else { 0 })
}

fn cmd_predict(args: &PredictArgs, config: serde_json::Value) -> anyhow::Result<u8> {
    let mut run = Run::new();
    run.input(&args.fit)?;
    run.input(&args.data)?;
    if let Some(p) = &args.columns.columns {
        run.input(p)?;
    }
    let text = fs::read_to_string(&args.fit).with_context(|| format!("cannot read {}", args.fit.display()))?;
    let report = FitReport::from_json(&text).with_context(|| format!("{} is not a fit report", args.fit.display()))?;
    let (spec, theta) = report.model()?;

    let table = data::load(&args.data, &args.columns.resolve()?)?;
    let available: Vec<&String> = table.columns.standard.iter().chain(&table.columns.extras).collect();
    let missing: Vec<&str> = spec
        .covariate_names
        .iter()
        .filter(|c| !available.contains(c))
        .map(String::as_str)
        .collect();
    if !missing.is_empty() {
        bail!("{} lacks covariate columns required by the fit: {}", args.data.display(), missing.join(", "));
    }
    let opts = PreprocessOptions {
        seed: args.seed,
        covariates: Some(spec.covariate_names.clone()),
        impute_months: !args.no_impute,
        categorical_vl: args.categorical_vl,
        standardize: !report.standardization.is_empty(),
        moments: Some(report.standardization.clone()),
    };
    let (dataset, _) = data::preprocess(&table, &opts)?;

    out_dir(&args.out)?;
    write_predictions(
        create(&args.out.join("predictions.csv"))?,
        &dataset.ids,
        &dataset.subjects,
        &theta,
        &spec,
    )?;
    let e_y = recency_rate(&dataset.subjects, &theta, &spec)?;
    println!("recency_rate: {e_y}");
    if let (Some(p_hiv), Some(p_art)) = (args.p_hiv, args.p_art) {
        println!("incidence: {}", incidence(p_hiv, p_art, e_y)?);
    }
    run.finish(&args.out, "predict", config, Some(args.seed))?;
    Ok(0)
}

fn cmd_generate(args: &GenerateArgs, config: serde_json::Value) -> anyhow::Result<u8> {
    let run = Run::new();
    let scenario = args.scenario.config()?;
    let g = generate(&scenario)?;
    out_dir(&args.out)?;
    let mut w = csv::Writer::from_writer(create(&args.out.join("data.csv"))?);
    let mut header: Vec<String> = ["id", "weight", "s", "z", "split", "y"].map(String::from).into();
    header.extend(scenario.covariate_names.iter().cloned());
    w.write_record(&header)?;
    let parts = [("train", &g.train, &g.y_train), ("test", &g.test, &g.y_test), ("holdout", &g.holdout, &g.y_holdout)];
    let mut id = 0;
    for (split, subjects, ys) in parts {
        for (s, y) in subjects.iter().zip(ys.iter()) {
            id += 1;
            let mut row = vec![
                id.to_string(),
                s.w.to_string(),
                s.s.to_string(),
                u8::from(s.z).to_string(),
                split.to_string(),
                u8::from(*y).to_string(),
            ];
            row.extend(s.covariates.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    let config = serde_json::json!({ "args": config, "scenario": scenario, "beta0": g.beta0 });
    run.finish(&args.out, "generate", config, Some(scenario.seed))?;
    println!("wrote {} rows to {}", id, args.out.join("data.csv").display());
    Ok(0)
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var("RECENCY_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .with_context(|| format!("RECENCY_THREADS must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<u8> {
    configure_threads()?;
    let config = serde_json::to_value(&cli.command)?;
    match &cli.command {
        Command::Fit(a) => cmd_fit(a, config),
        Command::Select(a) => cmd_select(a, config),
        Command::Simulate(a) => cmd_simulate(a, config),
        Command::Predict(a) => cmd_predict(a, config),
        Command::Generate(a) => cmd_generate(a, config),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
