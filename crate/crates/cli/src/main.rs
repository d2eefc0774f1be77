use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mimpc::config::ExperimentConfig;
use mimpc::experiment::{plot_script, run_stem, Experiment};
use mimpc::mpc::{ClosedLoopLog, LoopMode};
use mimpc::rounding::RoundingMethod;
use mimpc::{Error, ErrorKind};

/// Mixed-integer MPC experiments with sum-up rounding on an oversampling grid.
#[derive(Debug, Parser)]
#[command(name = "mimpc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve the relaxed OCP once from the configured initial state.
    SolveOcp(Common),
    /// Run one closed loop.
    ClosedLoop {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value_t = Mode::Rounded)]
        mode: Mode,
        /// Oversampling factor of the rounded loop.
        #[arg(long, default_value_t = 10)]
        dt_divisor: usize,
        #[arg(long, value_enum)]
        rounding: Option<Rounding>,
    },
    /// Run the relaxed loop and one rounded loop per configured divisor.
    Sweep(Common),
    /// Estimate regularity constants and the maximal fine step width.
    Bounds(Common),
    /// Write the plot script for the files produced by `sweep`.
    Report(Common),
}

#[derive(Debug, Args)]
struct Common {
    /// TOML configuration; benchmark defaults for anything not given.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Timing repeats per step.
    #[arg(long)]
    repeats: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Relaxed,
    Rounded,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Rounding {
    Sr,
    Sur,
}

impl From<Rounding> for RoundingMethod {
    fn from(r: Rounding) -> Self {
        match r {
            Rounding::Sr => RoundingMethod::Sr,
            Rounding::Sur => RoundingMethod::Sur,
        }
    }
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(steps) = self.steps {
            cfg.experiment.steps = steps;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(repeats) = self.repeats {
            cfg.experiment.repeats = repeats;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Infeasible => 3,
        ErrorKind::Overflow => 4,
        ErrorKind::Contract | ErrorKind::Io => 1,
    }
}

fn solve_ocp(common: &Common) -> Result<(), Error> {
    let exp = Experiment::new(common.load()?)?;
    let dir = &exp.config.output_dir;
    exp.write_setup(dir)?;
    let sol = exp.solve_once()?;
    let mut w = csv::Writer::from_path(dir.join("ocp_solution.csv")).map_err(Error::from)?;
    let n = exp.problem.state_dim();
    let m = exp.problem.cardinality();
    let mut header = vec!["k".to_string()];
    header.extend((1..=n).map(|i| format!("x{i}")));
    header.extend((1..=m).map(|i| format!("u_{i}")));
    w.write_record(&header).map_err(Error::from)?;
    for (k, x) in sol.states.iter().enumerate() {
        let mut row = vec![k.to_string()];
        row.extend(x.iter().map(f64::to_string));
        match sol.multipliers.get(k) {
            Some(u) => row.extend(u.weights().iter().map(f64::to_string)),
            None => row.extend(std::iter::repeat_n(String::new(), m)),
        }
        w.write_record(&row).map_err(Error::from)?;
    }
    w.flush()?;
    let d = &sol.diagnostics;
    println!("J_N = {}", sol.cost);
    println!("V_f(x_N) = {} (level {})", sol.terminal_value, exp.problem.terminal.level);
    println!("u_0 = {:?}", sol.multipliers[0].weights());
    println!(
        "iterations {} in {} rounds, stationarity {:.2e}, violation {:.2e}",
        d.iterations, d.outer_rounds, d.stationarity, d.violation
    );
    println!("wrote {}", dir.join("ocp_solution.csv").display());
    Ok(())
}

fn summarize(log: &ClosedLoopLog) {
    let trace = log.value_trace();
    println!(
        "{}: {} steps, V_N {:.6} -> {:.6}, |x_final| = {:.3e}, sigma_max {:.6}, gamma_max {:.6}",
        log.mode,
        log.records.len(),
        trace.first().copied().unwrap_or(f64::NAN),
        trace.last().copied().unwrap_or(f64::NAN),
        log.final_state.iter().map(|v| v * v).sum::<f64>().sqrt(),
        log.sigma_max(),
        log.gamma_max(),
    );
}

fn closed_loop(common: &Common, mode: Mode, dt_divisor: usize, rounding: Option<Rounding>) -> Result<(), Error> {
    let mut cfg = common.load()?;
    if let Some(r) = rounding {
        cfg.experiment.rounding = r.into();
    }
    if dt_divisor == 0 {
        return Err(Error::config("--dt-divisor", "must be at least 1"));
    }
    cfg.grid_spec()?
        .with_oversampling(dt_divisor)
        .map_err(|_| Error::config("--dt-divisor", "integration substep does not divide the fine step"))?;
    let exp = Experiment::new(cfg)?;
    let dir = exp.config.output_dir.clone();
    exp.write_setup(&dir)?;
    let (mode, stem) = match mode {
        Mode::Relaxed => (LoopMode::Relaxed, "relaxed".to_string()),
        Mode::Rounded => (exp.rounded_mode(dt_divisor), run_stem(dt_divisor)),
    };
    match exp.closed_loop(mode) {
        Ok(log) => {
            log.save(&dir, &stem)?;
            summarize(&log);
            println!("wrote {}", dir.join(format!("{stem}.csv")).display());
            Ok(())
        }
        Err(failure) => {
            failure.log.save(&dir, &stem)?;
            eprintln!(
                "partial log with {} steps written to {}",
                failure.log.records.len(),
                dir.join(format!("{stem}.csv")).display()
            );
            Err(failure.error)
        }
    }
}

fn sweep(common: &Common) -> Result<(), Error> {
    let exp = Experiment::new(common.load()?)?;
    let dir = exp.config.output_dir.clone();
    exp.write_setup(&dir)?;
    let result = exp.sweep()?;
    result.save(&dir)?;
    summarize(&result.relaxed);
    println!("{:>10} {:>10} {:>10} {:>10} {:>10}", "dt_divisor", "sigma_max", "gamma_max", "t_r [%]", "sigma_SUR");
    for r in &result.rows {
        println!(
            "{:>10} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            r.dt_divisor, r.sigma_max, r.gamma_max, r.t_r_percent, r.sigma_sur_bound
        );
    }
    println!("wrote {}", dir.join("summary.csv").display());
    Ok(())
}

fn bounds(common: &Common) -> Result<(), Error> {
    let exp = Experiment::new(common.load()?)?;
    let dir = exp.config.output_dir.clone();
    exp.write_setup(&dir)?;
    let (relaxed, sweep) = if exp.config.experiment.gamma.is_some() {
        (exp.closed_loop(LoopMode::Relaxed)?, None)
    } else {
        let s = exp.sweep()?;
        (s.relaxed.clone(), Some(s))
    };
    let report = exp.bounds(&relaxed, sweep.as_ref())?;
    let check = exp.terminal_check()?;
    #[derive(serde::Serialize)]
    struct BoundsFile<'a> {
        bounds: &'a mimpc::analysis::BoundsReport,
        terminal_check: &'a mimpc::ocp::TerminalCheck,
    }
    let text = toml::to_string(&BoundsFile {
        bounds: &report,
        terminal_check: &check,
    })
    .expect("bounds serialize");
    std::fs::write(dir.join("bounds.toml"), text)?;
    let k = &report.constants;
    println!("L = {:.4}, M = {:.4}, C = {:.4}", k.lipschitz, k.field_bound, k.field_rate);
    println!(
        "gamma = {:.4} ({}), dt_max = {:.5}, smallest divisor N_os = {}",
        report.gamma,
        if report.gamma_is_empirical { "empirical" } else { "configured" },
        report.dt_max,
        report.min_divisor
    );
    println!(
        "terminal set check: {:.1}% of {} samples pass (worst margin {:.3e})",
        100.0 * check.pass_fraction(),
        check.samples,
        check.worst_margin
    );
    println!("wrote {}", dir.join("bounds.toml").display());
    Ok(())
}

fn report(common: &Common) -> Result<(), Error> {
    let cfg = common.load()?;
    let exp = Experiment::new(cfg)?;
    let dir = &exp.config.output_dir;
    std::fs::create_dir_all(dir)?;
    let path = dir.join("plot_report.py");
    std::fs::write(&path, plot_script(&exp.config.experiment.divisors, exp.problem.state_dim()))?;
    if !Path::new(&dir.join("summary.csv")).exists() {
        eprintln!("note: {} has no sweep output yet; run `mimpc sweep` first", dir.display());
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::SolveOcp(c) => solve_ocp(c),
        Command::ClosedLoop {
            common,
            mode,
            dt_divisor,
            rounding,
        } => closed_loop(common, *mode, *dt_divisor, *rounding),
        Command::Sweep(c) => sweep(c),
        Command::Bounds(c) => bounds(c),
        Command::Report(c) => report(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
