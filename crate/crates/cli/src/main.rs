use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rcie_core::adaptation::VtildeGrid;
use rcie_core::experiment::{
    self, contour_v1v2, default_grid, gain_ratio_table, sweep_vtilde, AdaptationSection, ContourSection,
    ExperimentConfig, RunReport,
};
use rcie_core::Error;

/// Causal numerical differentiation with adaptive retrospective cost input
/// estimation.
#[derive(Debug, Parser)]
#[command(name = "rcie", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the estimator once and write per-step records and a summary.
    Differentiate(RunArgs),
    /// Constant-vtilde runs over a grid; writes rho and S-tilde at the final step.
    Sweep(RunArgs),
    /// Fixed V1/V2 runs over a grid with vtilde = 0; writes the rms error.
    Contour(ContourArgs),
    /// Scalar gain sequences versus the measurement/process variance ratio.
    GainRatio(GainRatioArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the noise seed of a generated signal.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads for grid studies (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Candidate or sweep grid, `logspace:LO:HI:COUNT` or `list:V,...`.
    #[arg(long)]
    grid: Option<VtildeGrid>,
    /// Use this constant vtilde instead of the configured mode.
    #[arg(long, conflicts_with = "adaptive")]
    constant_vtilde: Option<f64>,
    /// Select vtilde online from the candidate grid.
    #[arg(long)]
    adaptive: bool,
}

#[derive(Debug, Args)]
struct ContourArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    v1_grid: Option<VtildeGrid>,
    #[arg(long)]
    v2_grid: Option<VtildeGrid>,
}

#[derive(Debug, Args)]
struct GainRatioArgs {
    /// Grid of ratios `c = V2/V1`.
    #[arg(long, default_value = "logspace:1e-3:1e3:100")]
    c_grid: VtildeGrid,
    /// Last step of each gain sequence.
    #[arg(long, default_value_t = 3)]
    kmax: usize,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn load(common: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn apply_mode(cfg: &mut ExperimentConfig, args: &RunArgs) {
    if let Some(v) = args.constant_vtilde {
        cfg.adaptation = AdaptationSection::Constant { vtilde: v };
    } else if args.adaptive || args.grid.is_some() {
        let (old_grid, warmup) = match &cfg.adaptation {
            AdaptationSection::Adaptive { grid, warmup } => (Some(grid.clone()), *warmup),
            AdaptationSection::Constant { .. } => (None, None),
        };
        if args.adaptive || old_grid.is_some() {
            let grid = args.grid.clone().or(old_grid).unwrap_or_else(|| default_grid(cfg.model.order));
            cfg.adaptation = AdaptationSection::Adaptive { grid, warmup };
        }
    }
}

fn differentiate(args: RunArgs) -> Result<(), Error> {
    let mut cfg = load(&args.common)?;
    apply_mode(&mut cfg, &args);
    let resolved = cfg.resolve()?;
    for gap in &resolved.data.gaps {
        eprintln!("warning: time gap of {} at row {}", gap.dt, gap.row);
    }
    let out = resolved.run()?;
    let json = cfg.to_json_line();
    let dir = &args.common.out;
    experiment::write_records(&dir.join("records.csv"), &json, &out.records)?;
    let report = RunReport::new(&resolved, out.summary);
    experiment::write_json(&dir.join("summary.json"), &cfg, "summary", &report)?;
    let s = &report.summary;
    println!(
        "steps {}  rho_kf {}  steady_state_rho {}  s_tilde_kf {:e}  vtilde_kf {:e}",
        s.steps,
        fmt_opt(s.rho_final),
        fmt_opt(s.steady_state_rho),
        s.s_tilde_final,
        s.vtilde_final
    );
    Ok(())
}

fn sweep(args: RunArgs) -> Result<(), Error> {
    let mut cfg = load(&args.common)?;
    if args.constant_vtilde.is_some() || args.adaptive {
        return Err(Error::Config("sweep runs constant vtilde over --grid; mode flags do not apply".into()));
    }
    if let Some(grid) = &args.grid {
        cfg.sweep = Some(experiment::SweepSection { grid: grid.clone() });
    }
    let grid = cfg.sweep_grid();
    cfg.sweep = Some(experiment::SweepSection { grid: grid.clone() });
    let resolved = cfg.resolve()?;
    let table = sweep_vtilde(&resolved, &grid.values()?, args.common.jobs)?;
    let dir = &args.common.out;
    experiment::write_sweep(&dir.join("sweep.csv"), &cfg.to_json_line(), &table)?;
    experiment::write_json(&dir.join("sweep_summary.json"), &cfg, "sweep", &table)?;
    if let Some(i) = table.argmin_rho {
        println!("min rho_kf {} at vtilde {:e}", fmt_opt(table.rows[i].rho_kf), table.rows[i].vtilde);
    }
    let r = &table.rows[table.argmin_s_tilde];
    println!("min s_tilde_kf {:e} at vtilde {:e}", r.s_tilde_kf, r.vtilde);
    Ok(())
}

fn contour(args: ContourArgs) -> Result<(), Error> {
    let mut cfg = load(&args.common)?;
    let mut section = cfg.contour.clone().unwrap_or_default();
    if let Some(g) = args.v1_grid {
        section.v1_grid = g;
    }
    if let Some(g) = args.v2_grid {
        section.v2_grid = g;
    }
    cfg.contour = Some(section.clone());
    let resolved = cfg.resolve()?;
    let ContourSection { v1_grid, v2_grid } = section;
    let table = contour_v1v2(&resolved, &v1_grid.values()?, &v2_grid.values()?, args.common.jobs)?;
    experiment::write_contour(&args.common.out.join("contour.csv"), &cfg.to_json_line(), &table)?;
    println!("{} cells written", table.cells.len());
    Ok(())
}

fn gain_ratio(args: GainRatioArgs) -> Result<(), Error> {
    let rows = gain_ratio_table(&args.c_grid.values()?, args.kmax)?;
    let echo = format!(r#"{{"c_grid":"{}","kmax":{}}}"#, args.c_grid, args.kmax);
    experiment::write_gain_ratio(&args.out.join("gain_ratio.csv"), &echo, &rows, args.kmax)?;
    let worst = rows.iter().flat_map(|r| r.abs_diff.iter().copied()).fold(0.0, f64::max);
    println!("{} rows, max |closed form - recursion| {worst:e}", rows.len());
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.6}"))
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        e if e.is_numeric() => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Differentiate(a) => differentiate(a),
        Command::Sweep(a) => sweep(a),
        Command::Contour(a) => contour(a),
        Command::GainRatio(a) => gain_ratio(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match e.step() {
                Some(step) => eprintln!("error: numeric failure at step {step}: {e}"),
                None => eprintln!("error: {e}"),
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
