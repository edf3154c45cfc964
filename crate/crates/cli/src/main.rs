mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use trialemu::cohort::{build_cohort, prepare_outcome, read_cohort, Outcome};
use trialemu::estimator::fit_and_evaluate;
use trialemu::evaluation::{rmse_factual, run_protocol};
use trialemu::ingest::{parse_events, sessions_for_log, write_sessions, EventLog, SessionCounts};
use trialemu::reference::{ReferenceRow, EARLY, LATE, TARGET_TRIAL_ATE};
use trialemu::synthetic::{generate, true_ate};
use trialemu::{Error, ModelTag};

use config::{ConfigError, RunConfig};

const EXIT_FAILURE: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_EMPTY_COHORT: u8 = 3;
const EXIT_BAD_TAG: u8 = 4;
const EXIT_BAD_SPEC: u8 = 5;

#[derive(Parser)]
#[command(name = "trialemu", version, about = "Cohort construction and treatment-effect estimation for emulated trials")]
struct Cli {
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true, env = "TRIALEMU_CONFIG")]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Slice events into prone/supine sessions and write sessions.csv.
    Ingest {
        /// Events file; defaults to paths.events.
        events: Option<PathBuf>,
    },
    /// Build the observation cohort and write cohort.csv.
    Cohort { events: Option<PathBuf> },
    /// Fit one model once and print its ATE and test RMSE.
    Estimate {
        /// One of lr, dripw, blocking, bart, tarnet, cfr.
        model: String,
        /// Cohort file; defaults to paths.cohort or <out>/cohort.csv.
        cohort: Option<PathBuf>,
    },
    /// Run the bootstrap protocol over the configured models.
    Evaluate { cohort: Option<PathBuf> },
    /// Write a synthetic cohort with potential outcomes.
    Simulate,
    /// Print an evaluation table next to the published estimates.
    Report {
        /// Directory written by `evaluate`; defaults to the output directory.
        dir: Option<PathBuf>,
    },
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io(_) | Error::Csv(_) | Error::Record { .. } => EXIT_IO,
            Error::Empty(_) => EXIT_EMPTY_COHORT,
            Error::InvalidConfig(_) => EXIT_BAD_SPEC,
            _ => EXIT_FAILURE,
        };
        Self::new(code, e.to_string())
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Unreadable(m) => Self::new(EXIT_IO, m),
            ConfigError::Invalid(m) => Self::new(EXIT_BAD_SPEC, m),
            ConfigError::Tag(m) => Self::new(EXIT_BAD_TAG, m),
        }
    }
}

type Run<T = ()> = Result<T, Failure>;

fn io_failure(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::new(EXIT_IO, format!("{}: {e}", path.display()))
}

fn open(path: &Path) -> Run<File> {
    File::open(path).map_err(|e| io_failure(path, e))
}

fn create(dir: &Path, name: &str) -> Run<BufWriter<File>> {
    fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    let path = dir.join(name);
    info!("writing {}", path.display());
    File::create(&path).map(BufWriter::new).map_err(|e| io_failure(&path, e))
}

fn write_text(dir: &Path, name: &str, text: &str) -> Run {
    let mut f = create(dir, name)?;
    f.write_all(text.as_bytes()).and_then(|_| f.flush()).map_err(|e| io_failure(&dir.join(name), e))
}

fn require_file(path: &Path) -> Run {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::new(EXIT_IO, format!("{}: no such file", path.display())))
    }
}

struct Context {
    config: RunConfig,
    out: PathBuf,
}

impl Context {
    fn cohort_path(&self, arg: Option<PathBuf>) -> PathBuf {
        arg.or_else(|| self.config.paths.cohort.clone()).unwrap_or_else(|| self.out.join("cohort.csv"))
    }

    fn read_events(&self, arg: Option<PathBuf>) -> Run<EventLog> {
        let path = arg.unwrap_or_else(|| self.config.paths.events.clone());
        require_file(&path)?;
        parse_events(open(&path)?, &self.config.schema).map_err(|e| {
            let code = Failure::from(e);
            Failure::new(code.code, format!("{}: {}", path.display(), code.message))
        })
    }
}

fn published(outcome: Outcome) -> &'static [ReferenceRow] {
    match outcome {
        Outcome::Early => &EARLY,
        Outcome::Late => &LATE,
    }
}

fn cmd_ingest(ctx: &Context, events: Option<PathBuf>) -> Run {
    let log = ctx.read_events(events)?;
    let sessions = sessions_for_log(&log, &ctx.config.spawn);
    write_sessions(create(&ctx.out, "sessions.csv")?, &sessions)?;
    let c = SessionCounts::of(&sessions);
    println!("supine(original+artificial)={} prone={}", c.supine(), c.prone);
    println!("original={} artificial={}", c.supine_original, c.supine_artificial);
    if log.warnings.out_of_order > 0 || !log.warnings.unknown_variables.is_empty() {
        eprintln!(
            "warning: {} out-of-order events, unknown variables: {:?}",
            log.warnings.out_of_order, log.warnings.unknown_variables
        );
    }
    Ok(())
}

fn cmd_cohort(ctx: &Context, events: Option<PathBuf>) -> Run {
    let log = ctx.read_events(events)?;
    let sessions = sessions_for_log(&log, &ctx.config.spawn);
    let (cohort, funnel) = build_cohort(&log, &sessions, &ctx.config.covariates, &ctx.config.cohort)?;
    println!("sessions in        {}", funnel.candidates);
    println!("baseline present   {}", funnel.candidates - funnel.missing_baseline);
    println!("criteria met       {}", funnel.kept);
    println!("early outcome      {}", cohort.with_outcome(Outcome::Early).len());
    println!("late outcome       {}", cohort.with_outcome(Outcome::Late).len());
    println!(
        "excluded: missing baseline {}, P/F {}, FiO2 {}, PEEP {}, prone duration {}",
        funnel.missing_baseline, funnel.pf_too_high, funnel.fio2_too_low, funnel.peep_too_low, funnel.prone_too_long
    );
    if cohort.is_empty() {
        return Err(Failure::new(EXIT_EMPTY_COHORT, "no observations passed the inclusion criteria"));
    }
    trialemu::cohort::write_cohort(create(&ctx.out, "cohort.csv")?, &cohort, &[])?;
    Ok(())
}

fn load_outcome_data(ctx: &Context, path: &Path) -> Run<trialemu::cohort::OutcomeData> {
    let cohort = read_cohort(open(path)?)?;
    let outcome = ctx.config.outcome()?;
    let e = &ctx.config.estimation;
    prepare_outcome(&cohort, outcome, ctx.config.seed, e.test_fraction, e.validation_fraction).map_err(|err| match err {
        Error::Empty(m) => Failure::new(EXIT_EMPTY_COHORT, format!("{}: {m}", path.display())),
        other => other.into(),
    })
}

fn cmd_estimate(ctx: &Context, model: &str, cohort: Option<PathBuf>) -> Run {
    let tag: ModelTag = model.parse().map_err(|e: Error| Failure::new(EXIT_BAD_TAG, e.to_string()))?;
    let path = ctx.cohort_path(cohort);
    require_file(&path)?;
    let data = load_outcome_data(ctx, &path)?;
    let fit = fit_and_evaluate(tag, &ctx.config.models, &data.train, &data.validation, &data.test, ctx.config.seed)?;
    let rmse = rmse_factual(&fit.test_predictions, &data.test.y)?;
    println!("model {}", tag.label());
    if let Some(cfg) = ctx.config.models.neural(tag) {
        println!("alpha = {}", cfg.alpha);
    }
    println!("ATE {:.2}", fit.ate);
    println!("test RMSE {rmse:.2}");
    Ok(())
}

fn cmd_evaluate(ctx: &Context, cohort: Option<PathBuf>) -> Run {
    let path = ctx.cohort_path(cohort);
    require_file(&path)?;
    let outcome = ctx.config.outcome()?;
    let models = ctx.config.model_tags()?;
    let data = load_outcome_data(ctx, &path)?;
    let plan = trialemu::evaluation::BootstrapPlan { seed: ctx.config.seed, ..ctx.config.bootstrap };
    let report = run_protocol(&data, Some(outcome), &models, &ctx.config.models, &plan)?;
    write_text(&ctx.out, "summary.toml", &report.summary(Some(published(outcome))))?;
    report.write_table(create(&ctx.out, "table.csv")?)?;
    report.write_boxplots(create(&ctx.out, "boxplots.csv")?)?;
    report.write_samples(create(&ctx.out, "samples.csv")?)?;
    report.write_overlap(create(&ctx.out, "overlap.csv")?)?;
    let text = report.render();
    write_text(&ctx.out, "report.txt", &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_simulate(ctx: &Context) -> Run {
    let spec = &ctx.config.simulate;
    spec.validate().map_err(|e| Failure::new(EXIT_BAD_SPEC, e.to_string()))?;
    let table = generate(spec, ctx.config.seed)?;
    table.write(create(&ctx.out, "synthetic.csv")?)?;
    println!("rows {} treated {} true ATE {:.4}", table.n(), table.t.iter().filter(|&&t| t == 1).count(), true_ate(&table));
    Ok(())
}

fn cmd_report(ctx: &Context, dir: Option<PathBuf>) -> Run {
    let outcome = ctx.config.outcome()?;
    let dir = dir.unwrap_or_else(|| ctx.out.clone());
    let table = dir.join("table.csv");
    let mut local = Vec::new();
    if table.is_file() {
        let mut r = csv::Reader::from_reader(open(&table)?);
        for rec in r.records() {
            let rec = rec.map_err(|e| io_failure(&table, e))?;
            local.push(rec.iter().map(str::to_string).collect::<Vec<_>>());
        }
    }
    println!("{:<10} {:<26} {:<26}", "model", "ATE here", format!("ATE published ({outcome})"));
    for row in published(outcome) {
        let here = local
            .iter()
            .find(|r| r.first().map(String::as_str) == Some(row.method.tag()))
            .map(|r| {
                if r.get(8).map(String::as_str) == Some("true") {
                    "failed".to_string()
                } else {
                    let f = |k: usize| r.get(k).and_then(|v| v.parse::<f64>().ok()).unwrap_or(f64::NAN);
                    format!("{:.2} ({:.2}, {:.2})", f(1), f(2), f(3))
                }
            })
            .unwrap_or_else(|| "-".into());
        let p = row.ate;
        let label = row.method.tag().parse::<ModelTag>().map(|t| t.label()).unwrap_or("?");
        println!("{label:<10} {here:<26} {:<26}", format!("{:.2} ({:.2}, {:.2})", p.mean, p.lo, p.hi));
    }
    let t = TARGET_TRIAL_ATE;
    println!("target-trial ATE {} ({}, {})", t.mean, t.lo, t.hi);
    Ok(())
}

fn run(cli: Cli) -> Run {
    let mut config = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate()?;
    let out = cli.out.unwrap_or_else(|| config.paths.out.clone());
    let ctx = Context { config, out };
    match cli.command {
        Command::Ingest { events } => cmd_ingest(&ctx, events),
        Command::Cohort { events } => cmd_cohort(&ctx, events),
        Command::Estimate { model, cohort } => cmd_estimate(&ctx, &model, cohort),
        Command::Evaluate { cohort } => cmd_evaluate(&ctx, cohort),
        Command::Simulate => cmd_simulate(&ctx),
        Command::Report { dir } => cmd_report(&ctx, dir),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
