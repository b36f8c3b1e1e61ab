//! Batch driver for the step-flow library.

pub mod config;
pub mod output;
pub mod selftest;

use std::path::PathBuf;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde_json::{json, Map, Value};

use stepflow_core::analysis::{
    consistency_report, convergence_study, ConsistencyRow, ConvergenceOptions,
};
use stepflow_core::continuum::{energy_bundle, integrate_pde, Formulation};
use stepflow_core::geometry::{build_height_field, height_to_phi, sample_step_train};
use stepflow_core::mesoscopic::{
    discrete_energy_for, integrate_ode, EnergyRecord, IntegrationFailure, Trajectory,
};
use stepflow_core::StepflowError;

use config::{ConfigError, RawConfig, RunConfig};
use output::{fmt_f64, trajectory_rows, RunDir};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_COLLISION: i32 = 3;
pub const EXIT_MONOTONICITY: i32 = 4;
pub const EXIT_UNDERFLOW: i32 = 5;
pub const EXIT_SELFTEST: i32 = 6;

/// Environment variable naming the default output root.
pub const OUTPUT_ENV: &str = "STEPFLOW_OUTPUT_DIR";

#[derive(Parser, Debug)]
#[command(
    name = "stepflow",
    version,
    about = "Step-flow ODE and continuum PDE driver",
    after_help = "Configuration keys may be overridden with --section.key=value."
)]
struct Cli {
    /// Configuration file of `section.key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Maximum number of concurrent sub-runs.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Shorthand for --ode.variant.
    #[arg(long, global = true)]
    variant: Option<String>,
    /// Shorthand for --pde.formulation.
    #[arg(long, global = true)]
    formulation: Option<String>,
    /// Shorthand for --output.directory.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Integrate the step ODE from the sampled profile.
    OdeRun,
    /// Integrate the continuum PDE in the h or phi form.
    PdeRun,
    /// Residuals of the consistency expansions over the N sweep.
    Consistency,
    /// Weighted-l2 convergence of the ODE to the PDE over the N sweep.
    Convergence,
    /// All energy formulations of the initial profile.
    EnergyReport,
    /// Run the invariant suites.
    Selftest,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::OdeRun => "ode-run",
            Command::PdeRun => "pde-run",
            Command::Consistency => "consistency",
            Command::Convergence => "convergence",
            Command::EnergyReport => "energy-report",
            Command::Selftest => "selftest",
        }
    }
}

/// Failure of a command with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure {
            code: EXIT_CONFIG,
            message: format!("invalid config: {e}"),
        }
    }
}

impl From<StepflowError> for Failure {
    fn from(e: StepflowError) -> Self {
        Failure {
            code: exit_code(&e),
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure {
            code: EXIT_FAILURE,
            message: format!("i/o error: {e}"),
        }
    }
}

/// Exit code for a library error.
pub fn exit_code(e: &StepflowError) -> i32 {
    match e.root() {
        StepflowError::StepCollision { .. }
        | StepflowError::SamplingCollision { .. }
        | StepflowError::QuadratureCollision { .. } => EXIT_COLLISION,
        StepflowError::MonotonicityLost { .. } | StepflowError::InverseUndefined => {
            EXIT_MONOTONICITY
        }
        StepflowError::StepSizeUnderflow { .. } => EXIT_UNDERFLOW,
        StepflowError::ProfileNotMonotone { .. }
        | StepflowError::GridSize { .. }
        | StepflowError::InvalidParameter(_)
        | StepflowError::LengthMismatch { .. }
        | StepflowError::GridMismatch(_) => EXIT_CONFIG,
        _ => EXIT_FAILURE,
    }
}

struct Outcome {
    fields: Map<String, Value>,
    code: i32,
}

impl Outcome {
    fn ok() -> Self {
        Self {
            fields: Map::new(),
            code: EXIT_OK,
        }
    }

    fn with(mut self, key: &str, value: Value) -> Self {
        self.fields.insert(key.into(), value);
        self
    }
}

struct Context {
    cfg: RunConfig,
    command: Command,
    jobs: usize,
}

impl Context {
    fn run_dir(&self) -> std::io::Result<RunDir> {
        let root = self
            .cfg
            .directory
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("stepflow-output"));
        let dir = RunDir::create(
            &root,
            &format!("{}-{}", self.cfg.prefix, self.command.name()),
        )?;
        dir.write_json(
            "meta.json",
            &json!({
                "artifact": env!("CARGO_PKG_NAME"),
                "version": env!("CARGO_PKG_VERSION"),
                "command": self.command.name(),
                "config": self.cfg.resolved,
            }),
        )?;
        Ok(dir)
    }
}

/// Splits `--section.key[=value]` overrides from the remaining arguments.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<String>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut iter = args.into_iter().peekable();
    while let Some(arg) = iter.next() {
        let is_override = arg
            .strip_prefix("--")
            .map(|body| body.split('=').next().unwrap_or("").contains('.'))
            .unwrap_or(false);
        if !is_override {
            rest.push(arg);
        } else if arg.contains('=') {
            overrides.push(arg);
        } else {
            match iter.next() {
                Some(value) => overrides.push(format!("{arg}={value}")),
                None => overrides.push(arg),
            }
        }
    }
    (rest, overrides)
}

fn load_config(cli: &Cli, overrides: &[String]) -> Result<RunConfig, Failure> {
    let mut raw = RawConfig::default();
    if let Some(path) = &cli.config {
        let text = std::fs::read_to_string(path).map_err(|e| Failure {
            code: EXIT_CONFIG,
            message: format!("invalid config: cannot read {}: {e}", path.display()),
        })?;
        raw.parse_text(&text)?;
    }
    if let Some(v) = &cli.variant {
        raw.set("ode.variant", v)?;
    }
    if let Some(f) = &cli.formulation {
        raw.set("pde.formulation", f)?;
    }
    if let Some(d) = &cli.output {
        raw.set("output.directory", &d.to_string_lossy())?;
    }
    for o in overrides {
        raw.apply_override(o)?;
    }
    Ok(RunConfig::from_raw(&raw)?)
}

/// Parses `argv` (including the program name), runs the command, prints a
/// one-line JSON summary and returns the exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let (args, overrides) = split_overrides(argv);
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let started = Instant::now();
    let command = cli.command;
    let result = load_config(&cli, &overrides).and_then(|cfg| {
        let ctx = Context {
            cfg,
            command,
            jobs: cli.jobs.max(1),
        };
        dispatch(&ctx)
    });
    let (mut fields, code) = match result {
        Ok(o) => {
            let status = if o.code == EXIT_OK { "ok" } else { "failed" };
            let mut f = o.fields;
            f.insert("status".into(), json!(status));
            (f, o.code)
        }
        Err(failure) => {
            eprintln!("stepflow {}: {}", command.name(), failure.message);
            let mut f = Map::new();
            f.insert("status".into(), json!("error"));
            f.insert("message".into(), json!(failure.message));
            f.insert("exit_code".into(), json!(failure.code));
            (f, failure.code)
        }
    };
    fields.insert("command".into(), json!(command.name()));
    fields.insert(
        "runtime_seconds".into(),
        json!(started.elapsed().as_secs_f64()),
    );
    println!("{}", Value::Object(fields));
    code
}

fn dispatch(ctx: &Context) -> Result<Outcome, Failure> {
    match ctx.command {
        Command::OdeRun => ode_run(ctx),
        Command::PdeRun => pde_run(ctx),
        Command::Consistency => consistency(ctx),
        Command::Convergence => convergence(ctx),
        Command::EnergyReport => energy_report(ctx),
        Command::Selftest => Ok(selftest_command(ctx)),
    }
}

fn energy_rows(records: &[EnergyRecord]) -> impl Iterator<Item = String> + '_ {
    records.iter().map(|r| {
        format!(
            "{},{},{},{}",
            fmt_f64(r.t),
            fmt_f64(r.energy),
            fmt_f64(r.dissipation),
            fmt_f64(r.identity_residual)
        )
    })
}

/// Writes trajectory and energy files, then converts a failure into an exit code.
fn finish_run<S>(
    dir: &RunDir,
    result: Result<Trajectory<S>, IntegrationFailure<S>>,
    values: impl Fn(&S) -> Vec<f64>,
) -> Result<Outcome, Failure> {
    let (traj, error) = match result {
        Ok(t) => (t, None),
        Err(f) => (f.partial, Some(f.error)),
    };
    dir.write_csv(
        "trajectory.csv",
        "t,index,value",
        trajectory_rows(&traj.times, traj.states.iter().map(&values)),
    )?;
    dir.write_csv(
        "energy.csv",
        "t,E,dissipation,identity_residual",
        energy_rows(&traj.energy),
    )?;
    match error {
        Some(e) => Err(e.into()),
        None => Ok(Outcome::ok()
            .with(
                "final_time",
                json!(traj.times.last().copied().unwrap_or(0.0)),
            )
            .with("accepted_steps", json!(traj.stats.accepted))
            .with("output", json!(dir.path().display().to_string()))),
    }
}

fn ode_run(ctx: &Context) -> Result<Outcome, Failure> {
    let cfg = &ctx.cfg;
    let h = build_height_field(cfg.profile, cfg.length, cfg.grid_m)?;
    let phi = height_to_phi(&h, cfg.grid_k)?;
    let train = sample_step_train(&phi, cfg.steps)?;
    let dir = ctx.run_dir()?;
    let result = integrate_ode(&train, cfg.ode_t, &cfg.ode, cfg.variant);
    finish_run(&dir, result, |s| s.positions().to_vec())
}

fn pde_run(ctx: &Context) -> Result<Outcome, Failure> {
    let cfg = &ctx.cfg;
    let h = build_height_field(cfg.profile, cfg.length, cfg.grid_m)?;
    match cfg.formulation {
        Formulation::Height => {
            let dir = ctx.run_dir()?;
            finish_run(&dir, integrate_pde(&h, cfg.pde_t, &cfg.pde), |s| s.values())
        }
        Formulation::Phi => {
            let phi = height_to_phi(&h, cfg.grid_k)?;
            let dir = ctx.run_dir()?;
            finish_run(&dir, integrate_pde(&phi, cfg.pde_t, &cfg.pde), |s| {
                s.values()
            })
        }
    }
}

fn consistency(ctx: &Context) -> Result<Outcome, Failure> {
    let cfg = &ctx.cfg;
    let report = consistency_report(cfg.profile, cfg.length, &cfg.sweep)?;
    let dir = ctx.run_dir()?;
    let families: [(&str, fn(&ConsistencyRow) -> f64); 12] = [
        ("I1", |r| r.i1),
        ("I1_leading", |r| r.i1_leading),
        ("I1_half_v1", |r| r.i1_half_v1),
        ("I2", |r| r.i2),
        ("I2_leading", |r| r.i2_leading),
        ("I3", |r| r.i3),
        ("I3_leading", |r| r.i3_leading),
        ("F", |r| r.f),
        ("F_leading", |r| r.f_leading),
        ("F_half_v1", |r| r.f_half_v1),
        ("fbar_total", |r| r.fbar),
        ("fbar_total_leading", |r| r.fbar_leading),
    ];
    let rows = families.iter().flat_map(|(name, g)| {
        report
            .rows
            .iter()
            .map(move |r| format!("{name},{},{},{}", r.steps, fmt_f64(r.a), fmt_f64(g(r))))
    });
    dir.write_csv("consistency.csv", "family,N,a,residual", rows)?;
    let orders = serde_json::to_value(report.orders).map_err(|e| Failure {
        code: EXIT_FAILURE,
        message: e.to_string(),
    })?;
    dir.write_json(
        "consistency.json",
        &json!({ "sweep": report.sweep, "orders": orders }),
    )?;
    Ok(Outcome::ok().with("orders", orders))
}

fn convergence(ctx: &Context) -> Result<Outcome, Failure> {
    let cfg = &ctx.cfg;
    let tighten = |o: stepflow_core::mesoscopic::IntegratorOptions| {
        stepflow_core::mesoscopic::IntegratorOptions {
            rtol: o.rtol * 1e-2,
            atol: o.atol * 1e-2,
            snapshot_stride: usize::MAX,
            ..o
        }
    };
    let opts = ConvergenceOptions {
        ode: stepflow_core::mesoscopic::IntegratorOptions {
            snapshot_stride: usize::MAX,
            ..cfg.ode
        },
        reference: tighten(cfg.ode),
        reference_grid: None,
        jobs: ctx.jobs,
    };
    let table = convergence_study(
        cfg.profile,
        cfg.length,
        &cfg.sweep,
        cfg.ode_t,
        cfg.variant,
        &opts,
    )?;
    let dir = ctx.run_dir()?;
    dir.write_csv(
        "convergence.csv",
        "N,a,error",
        table
            .rows
            .iter()
            .map(|r| format!("{},{},{}", r.steps, fmt_f64(r.a), fmt_f64(r.error))),
    )?;
    let value = serde_json::to_value(&table).map_err(|e| Failure {
        code: EXIT_FAILURE,
        message: e.to_string(),
    })?;
    dir.write_json("convergence.json", &value)?;
    let slope = table.fit.map(|f| f.slope);
    Ok(Outcome::ok()
        .with("slope", json!(slope))
        .with("errors_monotone", json!(table.errors_monotone))
        .with("variant", json!(cfg.variant.name())))
}

fn energy_report(ctx: &Context) -> Result<Outcome, Failure> {
    let cfg = &ctx.cfg;
    let h = build_height_field(cfg.profile, cfg.length, cfg.grid_m)?;
    let bundle = energy_bundle(&h)?;
    let phi = height_to_phi(&h, cfg.grid_k)?;
    let train = sample_step_train(&phi, cfg.steps)?;
    let e_n = discrete_energy_for(&train, cfg.variant)?;
    let dir = ctx.run_dir()?;
    let mut value = serde_json::to_value(bundle).map_err(|e| Failure {
        code: EXIT_FAILURE,
        message: e.to_string(),
    })?;
    value["e_n"] = json!(e_n);
    value["steps"] = json!(cfg.steps);
    dir.write_json("energy_report.json", &value)?;
    Ok(Outcome::ok().with("energies", value))
}

fn selftest_command(ctx: &Context) -> Outcome {
    let results = selftest::run_all(&ctx.cfg);
    let passed = results.iter().all(|s| s.passed);
    let suites: Vec<Value> = results
        .iter()
        .map(|s| json!({ "name": s.name, "passed": s.passed, "detail": s.detail, "seconds": s.seconds }))
        .collect();
    Outcome {
        fields: Map::new(),
        code: if passed { EXIT_OK } else { EXIT_SELFTEST },
    }
    .with("suites", Value::Array(suites))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strings(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn overrides_are_separated_from_flags() {
        let (rest, ov) = split_overrides(strings(&[
            "stepflow",
            "ode-run",
            "--profile.A=0.1",
            "--jobs",
            "2",
            "--ode.N",
            "16",
            "--config",
            "a.cfg",
        ]));
        assert_eq!(
            rest,
            strings(&["stepflow", "ode-run", "--jobs", "2", "--config", "a.cfg"])
        );
        assert_eq!(ov, strings(&["--profile.A=0.1", "--ode.N=16"]));
    }

    #[test]
    fn error_classes_map_to_exit_codes() {
        let collision = StepflowError::StepCollision {
            time: 0.0,
            spacing: 0.0,
            threshold: 1.0,
        };
        assert_eq!(exit_code(&collision), EXIT_COLLISION);
        let wrapped = StepflowError::SubRun {
            steps: 8,
            source: Box::new(StepflowError::StepSizeUnderflow { time: 0.0, dt: 0.0 }),
        };
        assert_eq!(exit_code(&wrapped), EXIT_UNDERFLOW);
        let mono = StepflowError::MonotonicityLost {
            time: 0.0,
            slope: 0.0,
            bound: -1.0,
        };
        assert_eq!(exit_code(&mono), EXIT_MONOTONICITY);
        assert_eq!(
            exit_code(&StepflowError::ProfileNotMonotone { amplitude: 2.0 }),
            EXIT_CONFIG
        );
    }
}
