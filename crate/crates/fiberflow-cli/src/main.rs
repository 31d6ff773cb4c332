//! Command-line driver for the fiber suspension engine.
//!
//! Subcommands:
//! - `run <config.toml>` — run a configured scenario and write its output
//!   bundle (snapshots, stress series, diagnostics, manifest).
//! - `study near-quad --seed S` — accuracy study of the near-interaction
//!   quadrature on an ensemble of random fibers.
//! - `check hex-lattice --tol T` — consistency of sheared vs rectangular
//!   periodic cell descriptions through the Ewald sum.
//! - `converge <scenario> --dts 0.4,0.2,...` — temporal self-convergence
//!   table with fitted order.
//! - `moduli <config.toml> --omegas 3.14,6.28` — oscillatory elastic and
//!   viscous moduli sweep.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numerical/binding/output
//! failure, 4 failed acceptance-style check.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use fiberflow::harness::{
    self, builtin_config, fitted_slope, hexagonal_lattice_check, moduli_sweep,
    near_quadrature_study_sized, parse_scenario, run_to_directory, successive_refinement_errors,
    BandReport, RunConfig, RunOutcome, ScenarioOutputs,
};
use fiberflow::FiberflowError;

#[derive(Parser)]
#[command(
    name = "fiberflow",
    version,
    about = "Spectral simulator for suspensions of inextensible elastic fibers in Stokes flow"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario described by a TOML config and write its output bundle.
    Run {
        /// Path to the run configuration.
        config: PathBuf,
        /// Override the config's output directory.
        #[arg(long)]
        output: Option<PathBuf>,
        /// Also write whitespace-separated .dat tables for plotting.
        #[arg(long)]
        emit_plots: bool,
    },
    /// Accuracy and consistency studies.
    #[command(subcommand)]
    Study(StudyCommand),
    /// Cross-validation checks with hard pass/fail verdicts.
    #[command(subcommand)]
    Check(CheckCommand),
    /// Temporal self-convergence of a built-in scenario.
    Converge {
        /// Scenario name (falling-quartet, three-fiber-shear, stability, mesh).
        scenario: String,
        /// Comma-separated step sizes, e.g. --dts 0.4,0.2,0.1,0.05.
        #[arg(long, value_delimiter = ',', required = true, num_args = 2..)]
        dts: Vec<f64>,
        /// Inter-fiber solver: block or gmres.
        #[arg(long, default_value = "gmres")]
        mode: String,
        /// GMRES iterations per step.
        #[arg(long, default_value_t = 1)]
        iters: usize,
        /// Write the table as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write a convergence .dat table for plotting.
        #[arg(long)]
        emit_plots: bool,
    },
    /// Oscillatory moduli sweep on a configured suspension.
    Moduli {
        /// Path to the run configuration (mesh or stability style).
        config: PathBuf,
        /// Comma-separated angular frequencies in rad/s.
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        omegas: Vec<f64>,
        /// Strain amplitude.
        #[arg(long, default_value_t = 0.1)]
        gamma0: f64,
        /// Where to write moduli.json (defaults next to the config's output dir
        /// or the working directory).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write a moduli .dat table for plotting.
        #[arg(long)]
        emit_plots: bool,
    },
}

#[derive(Subcommand)]
enum StudyCommand {
    /// Near-interaction quadrature accuracy over random fiber/target pairs.
    NearQuad {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Fibers in the ensemble.
        #[arg(long, default_value_t = 100)]
        fibers: usize,
        /// Targets per fiber per distance band.
        #[arg(long, default_value_t = 100)]
        targets: usize,
        /// Write the full report as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write digit histograms as .dat tables for plotting.
        #[arg(long)]
        emit_plots: bool,
    },
}

#[derive(Subcommand)]
enum CheckCommand {
    /// Sheared-primitive vs rectangular lattice agreement through the Ewald sum.
    HexLattice {
        /// Truncation tolerance of both Ewald sums.
        #[arg(long, default_value_t = 1e-2)]
        tol: f64,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = dispatch(cli) {
        eprintln!("error: {err}");
        std::process::exit(harness::exit_code(&err));
    }
}

fn dispatch(cli: Cli) -> Result<(), FiberflowError> {
    match cli.command {
        Command::Run {
            config,
            output,
            emit_plots,
        } => cmd_run(&config, output, emit_plots),
        Command::Study(StudyCommand::NearQuad {
            seed,
            fibers,
            targets,
            out,
            emit_plots,
        }) => cmd_study_near_quad(seed, fibers, targets, out, emit_plots),
        Command::Check(CheckCommand::HexLattice { tol }) => cmd_check_hex(tol),
        Command::Converge {
            scenario,
            dts,
            mode,
            iters,
            out,
            emit_plots,
        } => cmd_converge(&scenario, &dts, &mode, iters, out, emit_plots),
        Command::Moduli {
            config,
            omegas,
            gamma0,
            out,
            emit_plots,
        } => cmd_moduli(&config, &omegas, gamma0, out, emit_plots),
    }
}

fn cmd_run(path: &Path, output: Option<PathBuf>, emit_plots: bool) -> Result<(), FiberflowError> {
    let mut config = RunConfig::load(path)?;
    if let Some(dir) = output {
        config.output_dir = Some(dir);
    }
    let (outputs, dir, manifest) = run_to_directory(&config)?;
    println!(
        "scenario {} ({} fibers, N = {}): {}",
        config.scenario, config.fiber.count, config.fiber.n, outputs.outcome.label()
    );
    println!(
        "steps {} · hydro evaluations {} · max |‖τ‖−1| = {:.3e}",
        manifest.steps_completed, manifest.hydro_evals, manifest.max_tangent_deviation
    );
    println!("bundle written to {} ({} files)", dir.display(), manifest.files.len());
    if emit_plots {
        write_run_plots(&outputs, &dir)?;
        println!("plot tables written to {}", dir.join("plots").display());
    }
    if let RunOutcome::Unstable { .. } = outputs.outcome {
        return Err(FiberflowError::Numerical(outputs.outcome.label()));
    }
    Ok(())
}

fn cmd_study_near_quad(
    seed: u64,
    fibers: usize,
    targets: usize,
    out: Option<PathBuf>,
    emit_plots: bool,
) -> Result<(), FiberflowError> {
    let study = near_quadrature_study_sized(seed, fibers, targets)?;
    let describe = |band: &BandReport| {
        format!(
            "{:>22}: {:5} pairs · min {:>5.2} digits · ≥3 digits {:6.2}% · ≥4 digits {:6.2}%",
            band.label,
            band.pairs,
            band.min_digits,
            100.0 * band.fraction_ge3,
            100.0 * band.fraction_ge4
        )
    };
    println!("near-interaction accuracy study (seed {seed}, {fibers} fibers × {targets} targets)");
    println!("{}", describe(&study.near_band));
    println!("{}", describe(&study.far_band));
    println!(
        "reference self-consistency: {:.2e} over {} smooth pairs, {:.2e} over {} fringe pairs",
        study.reference.smooth_max,
        study.reference.smooth_pairs,
        study.reference.fringe_max,
        study.reference.fringe_pairs
    );
    if let Some(path) = out {
        write_json(&path, &study)?;
        println!("report written to {}", path.display());
    }
    if emit_plots {
        let mut table = String::from("# digits  near_band_count  far_band_count\n");
        for d in 0..17 {
            let _ = writeln!(
                table,
                "{d} {} {}",
                study.near_band.histogram[d], study.far_band.histogram[d]
            );
        }
        let path = PathBuf::from(format!("near-quad-digits-seed{seed}.dat"));
        fs::write(&path, table)?;
        println!("histogram table written to {}", path.display());
    }
    Ok(())
}

fn cmd_check_hex(tol: f64) -> Result<(), FiberflowError> {
    let report = hexagonal_lattice_check(tol)?;
    println!(
        "lattice discrepancy {:.6e} at tolerance {:.1e} (threshold {:.1e}): {}",
        report.discrepancy,
        report.tol,
        report.threshold,
        if report.pass { "PASS" } else { "FAIL" }
    );
    if !report.pass {
        return Err(FiberflowError::CheckFailed(format!(
            "lattice discrepancy {:.3e} exceeds {:.1e}",
            report.discrepancy, report.threshold
        )));
    }
    Ok(())
}

fn cmd_converge(
    scenario: &str,
    dts: &[f64],
    mode: &str,
    iters: usize,
    out: Option<PathBuf>,
    emit_plots: bool,
) -> Result<(), FiberflowError> {
    let mut config = builtin_config(parse_scenario(scenario)?);
    config.stepper.mode = mode.into();
    config.stepper.gmres_iters = iters;
    config.validate()?;
    let rows = successive_refinement_errors(&config, dts)?;
    let slope = fitted_slope(&rows);
    println!("temporal self-convergence: {scenario} ({mode}, {iters} iterations)");
    println!("{:>10}  {:>14}", "dt", "error");
    for row in &rows {
        println!("{:>10.5}  {:>14.6e}", row.dt, row.error);
    }
    println!("fitted order: {slope:.3}");
    if let Some(path) = out {
        write_json(&path, &rows)?;
        println!("table written to {}", path.display());
    }
    if emit_plots {
        let mut table = String::from("# dt  error\n");
        for row in &rows {
            let _ = writeln!(table, "{} {}", row.dt, row.error);
        }
        let path = PathBuf::from(format!("converge-{scenario}-{mode}{iters}.dat"));
        fs::write(&path, table)?;
        println!("plot table written to {}", path.display());
    }
    Ok(())
}

fn cmd_moduli(
    config_path: &Path,
    omegas: &[f64],
    gamma0: f64,
    out: Option<PathBuf>,
    emit_plots: bool,
) -> Result<(), FiberflowError> {
    let config = RunConfig::load(config_path)?;
    let points = moduli_sweep(&config, omegas, gamma0)?;
    println!(
        "oscillatory moduli for {} (γ₀ = {gamma0}, {} fibers)",
        config.scenario, config.fiber.count
    );
    println!(
        "{:>12}  {:>14}  {:>14}  {:>14}",
        "omega", "G_elastic", "G_viscous", "G_visc_fluid"
    );
    for p in &points {
        println!(
            "{:>12.5}  {:>14.6e}  {:>14.6e}  {:>14.6e}",
            p.omega, p.g_elastic, p.g_viscous, p.g_viscous_fluid
        );
    }
    let out_path = out.unwrap_or_else(|| {
        config
            .output_dir
            .clone()
            .map(|d| d.join("moduli.json"))
            .unwrap_or_else(|| PathBuf::from("moduli.json"))
    });
    if let Some(parent) = out_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    write_json(&out_path, &points)?;
    println!("moduli written to {}", out_path.display());
    if emit_plots {
        let mut table = String::from("# omega  g_elastic  g_viscous  g_viscous_fluid\n");
        for p in &points {
            let _ = writeln!(
                table,
                "{} {} {} {}",
                p.omega, p.g_elastic, p.g_viscous, p.g_viscous_fluid
            );
        }
        let path = out_path.with_extension("dat");
        fs::write(&path, table)?;
        println!("plot table written to {}", path.display());
    }
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), FiberflowError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| FiberflowError::Output(format!("JSON serialization: {e}")))?;
    fs::write(path, text)?;
    Ok(())
}

/// Plot-friendly tables for a finished run: the stress series (periodic
/// runs) and per-fiber midpoint trajectories.
fn write_run_plots(outputs: &ScenarioOutputs, dir: &Path) -> Result<(), FiberflowError> {
    let plots = dir.join("plots");
    fs::create_dir_all(&plots)?;
    if !outputs.stress.is_empty() {
        let mut table = String::from("# t  fiber  crosslink  fluid  total\n");
        for (s, fl) in outputs.stress.iter().zip(&outputs.fluid_stress) {
            let _ = writeln!(
                table,
                "{} {} {} {} {}",
                s.t,
                s.fiber,
                s.crosslink,
                fl,
                s.total() + fl
            );
        }
        fs::write(plots.join("stress.dat"), table)?;
    }
    let mut table = String::from("# t  then center-of-mass x y z per fiber\n");
    for (t, snap) in outputs.snapshot_times.iter().zip(&outputs.snapshots) {
        let _ = write!(table, "{t}");
        for fiber in snap {
            let (mut cx, mut cy, mut cz) = (0.0, 0.0, 0.0);
            for x in &fiber.x {
                cx += x.x;
                cy += x.y;
                cz += x.z;
            }
            let m = fiber.x.len() as f64;
            let _ = write!(table, " {} {} {}", cx / m, cy / m, cz / m);
        }
        table.push('\n');
    }
    fs::write(plots.join("centers.dat"), table)?;
    Ok(())
}
