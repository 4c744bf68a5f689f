//! Command-line front end: certify, synthesize, sweep, and simulate
//! saturated consensus networks over stochastically switching topologies.
//!
//! Every command validates its config, writes a run manifest into the output
//! directory before computing anything, and uses stable exit codes:
//! 0 success/feasible, 1 usage or config error, 2 infeasible,
//! 3 numerical failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use satcon_core::disagreement::build_disagreement_system;
use satcon_core::lmi::{assemble_theorem1, Theorem1Params};
use satcon_core::markov::sample_trajectory;
use satcon_core::optimize::{
    max_disturbance_tolerance, max_tolerance_from_origin, solve, sweep, synthesize_gain,
    OriginSearch, RhoSearch, SolveReport, SolveStatus, SweepDriver, SweepParameter,
};
use satcon_core::regions::{export_region, EllipsoidFamily};
use satcon_core::simulate::{
    integrate, make_disturbance, verify_invariance, verify_invariance_from_origin,
    DisturbanceKind, DisturbanceSpec, IntegrationGrid,
};
use satcon_core::sysmodel::{load_model_path, serialize_model, GainMatrix, NetworkModel};

const EXIT_OK: u8 = 0;
const EXIT_USAGE: u8 = 1;
const EXIT_INFEASIBLE: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(
    name = "satcon",
    version,
    about = "Certify and explore consensus of input-saturated networks under stochastic switching"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Network description (TOML; see the repo README for the schema).
    #[arg(long)]
    config: PathBuf,
    /// Directory for manifests, certificates, and data exports.
    #[arg(long, default_value = "satcon-out")]
    out_dir: PathBuf,
    /// Seed for every stochastic component of the run.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Solve the fixed-gain certificate at given parameters and export the
    /// region family.
    Analyze {
        #[command(flatten)]
        common: CommonArgs,
        /// Total disturbance energy; implies eta = 1 and
        /// gamma = 1/(1 + n_rho) (region-to-region regime).
        #[arg(long)]
        nrho: Option<f64>,
        /// Per-agent energy bound (use with --eta and --gamma).
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        gamma: Option<f64>,
    },
    /// Maximize the certifiable disturbance energy.
    MaxTolerance {
        #[command(flatten)]
        common: CommonArgs,
        /// Consensus-point start (eta = 1, gamma = 1/(n rho)); this is the
        /// regime the bundled demo data is calibrated for.
        #[arg(long)]
        from_origin: bool,
        /// Grid for the region-to-region driver (comma list or a:b:step).
        #[arg(long)]
        gamma_grid: Option<String>,
        /// Run the tolerance over an actuator-limit grid and emit CSV.
        #[arg(long)]
        umax_grid: Option<String>,
    },
    /// Design a consensus gain and re-verify it in closed loop.
    Synthesize {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 0.01)]
        rho: f64,
        #[arg(long, default_value_t = 1.0)]
        eta: f64,
        /// Gamma grid to scan (comma list or a:b:step).
        #[arg(long)]
        gamma_grid: Option<String>,
    },
    /// Run a certificate driver over a parameter grid with per-point caching.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Which parameter to sweep: "umax" (tolerance driver) or "eps"
        /// (switching-rate scale, region-trace driver).
        #[arg(long)]
        parameter: String,
        #[arg(long)]
        umax_grid: Option<String>,
        #[arg(long)]
        eps_grid: Option<String>,
        /// Containment ratio for the region-trace driver.
        #[arg(long, default_value_t = 0.8)]
        gamma: f64,
        /// 1-based axis pair for the exported region slices.
        #[arg(long, default_value = "1,2")]
        slice_axes: String,
    },
    /// Integrate the switched saturated network and check a certificate.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        /// Certificate JSON produced by `analyze` or `max-tolerance`.
        #[arg(long)]
        certificate: PathBuf,
        /// zero | ramp | constant
        #[arg(long, default_value = "zero")]
        disturbance: String,
        /// 1-based index of the disturbed agent.
        #[arg(long, default_value_t = 1)]
        target_agent: usize,
        /// Per-channel amplitude (constant value or ramp slope), comma list.
        #[arg(long)]
        amplitude: Option<String>,
        /// Total energy budget for the disturbance.
        #[arg(long)]
        budget: Option<f64>,
        #[arg(long, default_value_t = 100)]
        realizations: usize,
        #[arg(long, default_value_t = 20.0)]
        horizon: f64,
        #[arg(long, default_value_t = 1e-3)]
        step: f64,
        /// Start every run from exact consensus instead of the region
        /// boundary.
        #[arg(long)]
        from_origin: bool,
        /// Subsampling stride for the exported realization tables.
        #[arg(long, default_value_t = 10)]
        record_stride: usize,
        /// How many realizations to export as CSV.
        #[arg(long, default_value_t = 2)]
        export_count: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Let clap print its rendered message, but keep usage errors on
            // exit code 1 (help/version stay 0).
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let code = match cli.command {
        Command::Analyze {
            common,
            nrho,
            rho,
            eta,
            gamma,
        } => cmd_analyze(common, nrho, rho, eta, gamma),
        Command::MaxTolerance {
            common,
            from_origin,
            gamma_grid,
            umax_grid,
        } => cmd_max_tolerance(common, from_origin, gamma_grid, umax_grid),
        Command::Synthesize {
            common,
            rho,
            eta,
            gamma_grid,
        } => cmd_synthesize(common, rho, eta, gamma_grid),
        Command::Sweep {
            common,
            parameter,
            umax_grid,
            eps_grid,
            gamma,
            slice_axes,
        } => cmd_sweep(common, parameter, umax_grid, eps_grid, gamma, slice_axes),
        Command::Simulate {
            common,
            certificate,
            disturbance,
            target_agent,
            amplitude,
            budget,
            realizations,
            horizon,
            step,
            from_origin,
            record_stride,
            export_count,
        } => cmd_simulate(SimulateArgs {
            common,
            certificate,
            disturbance,
            target_agent,
            amplitude,
            budget,
            realizations,
            horizon,
            step,
            from_origin,
            record_stride,
            export_count,
        }),
    };
    match code {
        Ok(c) => ExitCode::from(c),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(classify_error(&e))
        }
    }
}

fn classify_error(e: &satcon_core::Error) -> u8 {
    use satcon_core::Error;
    match e {
        Error::Solver(_) => EXIT_NUMERICAL,
        _ => EXIT_USAGE,
    }
}

// ---------------------------------------------------------------------------
// Manifest and serialization helpers
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct RunManifest {
    command: String,
    config: String,
    parameters: BTreeMap<String, serde_json::Value>,
    seed: u64,
    tool_version: String,
    outputs: Vec<String>,
}

fn write_manifest(
    out_dir: &Path,
    command: &str,
    config: &Path,
    seed: u64,
    parameters: BTreeMap<String, serde_json::Value>,
    outputs: &[&str],
) -> satcon_core::Result<()> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| satcon_core::Error::Parse(format!("out dir {}: {e}", out_dir.display())))?;
    let manifest = RunManifest {
        command: command.to_string(),
        config: config.display().to_string(),
        parameters,
        seed,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
    };
    write_json(&out_dir.join("manifest.json"), &manifest)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> satcon_core::Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| satcon_core::Error::Parse(format!("serialize: {e}")))?;
    std::fs::write(path, text)
        .map_err(|e| satcon_core::Error::Parse(format!("write {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> satcon_core::Result<()> {
    std::fs::write(path, text)
        .map_err(|e| satcon_core::Error::Parse(format!("write {}: {e}", path.display())))
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

#[derive(Serialize, Deserialize)]
struct CertificateDoc {
    kind: String,
    feasible: bool,
    rho: f64,
    eta: f64,
    gamma: f64,
    /// Total disturbance energy this certificate is associated with.
    n_rho: f64,
    /// Trajectories stay inside the region family at this level.
    outer_level: f64,
    /// Per-mode region shape matrices (level-1 family).
    shapes: Vec<Vec<Vec<f64>>>,
    solver_status: String,
    iterations: u32,
    solve_time_s: f64,
    worst_violation: f64,
}

fn certificate_doc(
    kind: &str,
    params: &Theorem1Params,
    n_rho: f64,
    report: &SolveReport,
    n_modes: usize,
) -> satcon_core::Result<CertificateDoc> {
    let family = satcon_core::optimize::certificate_family(report, n_modes, 1.0)?;
    Ok(CertificateDoc {
        kind: kind.to_string(),
        feasible: true,
        rho: params.rho,
        eta: params.eta,
        gamma: params.gamma,
        n_rho,
        outer_level: 1.0 / params.gamma,
        shapes: family.shapes.iter().map(matrix_rows).collect(),
        solver_status: report.solver_status.clone(),
        iterations: report.iterations,
        solve_time_s: report.solve_time_s,
        worst_violation: report.worst_violation,
    })
}

fn parse_grid(text: &str) -> satcon_core::Result<Vec<f64>> {
    let parse_one = |s: &str| -> satcon_core::Result<f64> {
        s.trim()
            .parse::<f64>()
            .map_err(|_| satcon_core::Error::Parse(format!("bad grid number `{s}`")))
    };
    if text.contains(':') {
        let parts: Vec<&str> = text.split(':').collect();
        if parts.len() != 3 {
            return Err(satcon_core::Error::Parse(
                "range grids use start:stop:step".into(),
            ));
        }
        let (start, stop, step) = (parse_one(parts[0])?, parse_one(parts[1])?, parse_one(parts[2])?);
        if !(step > 0.0) || stop < start {
            return Err(satcon_core::Error::Parse("empty or descending range".into()));
        }
        let mut out = Vec::new();
        let mut k = 0usize;
        loop {
            let v = start + step * k as f64;
            if v > stop + 1e-12 * step {
                break;
            }
            out.push(v);
            k += 1;
        }
        Ok(out)
    } else {
        text.split(',').map(parse_one).collect()
    }
}

fn parse_vector(text: &str) -> satcon_core::Result<DVector<f64>> {
    let vals = parse_grid(text)?;
    Ok(DVector::from_vec(vals))
}

fn json_f64(v: f64) -> serde_json::Value {
    serde_json::Number::from_f64(v)
        .map(serde_json::Value::Number)
        .unwrap_or(serde_json::Value::Null)
}

fn status_exit(status: SolveStatus) -> u8 {
    match status {
        SolveStatus::Feasible => EXIT_OK,
        SolveStatus::Infeasible => EXIT_INFEASIBLE,
        SolveStatus::NumericalFailure => EXIT_NUMERICAL,
    }
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn cmd_analyze(
    common: CommonArgs,
    nrho: Option<f64>,
    rho: Option<f64>,
    eta: Option<f64>,
    gamma: Option<f64>,
) -> satcon_core::Result<u8> {
    let model = load_model_path(&common.config)?;
    let n = model.n_agents as f64;
    let params = match (nrho, rho, eta, gamma) {
        (Some(nr), None, None, None) => Theorem1Params {
            rho: nr / n,
            eta: 1.0,
            gamma: 1.0 / (1.0 + nr),
        },
        (None, Some(r), Some(e), Some(g)) => Theorem1Params {
            rho: r,
            eta: e,
            gamma: g,
        },
        _ => {
            return Err(satcon_core::Error::Parse(
                "give either --nrho, or all of --rho --eta --gamma".into(),
            ))
        }
    };
    let mut parameters = BTreeMap::new();
    parameters.insert("rho".into(), json_f64(params.rho));
    parameters.insert("eta".into(), json_f64(params.eta));
    parameters.insert("gamma".into(), json_f64(params.gamma));
    write_manifest(
        &common.out_dir,
        "analyze",
        &common.config,
        common.seed,
        parameters,
        &["certificate.json"],
    )?;

    let sys = build_disagreement_system(&model)?;
    let prob = assemble_theorem1(&sys, &model.polytope, &params)?;
    let report = solve(&prob)?;
    match report.status {
        SolveStatus::Feasible => {
            let n_rho = (1.0 / params.gamma - 1.0) / params.eta;
            let doc = certificate_doc("analysis", &params, n_rho, &report, model.n_modes())?;
            write_json(&common.out_dir.join("certificate.json"), &doc)?;
            println!(
                "feasible: containment level {:.6} certified (worst violation {:.3e})",
                1.0 / params.gamma,
                report.worst_violation
            );
            println!("certificate written to {}", common.out_dir.join("certificate.json").display());
            Ok(EXIT_OK)
        }
        other => {
            println!("not certified: {:?} ({})", other, report.solver_status);
            Ok(status_exit(other))
        }
    }
}

fn cmd_max_tolerance(
    common: CommonArgs,
    from_origin: bool,
    gamma_grid: Option<String>,
    umax_grid: Option<String>,
) -> satcon_core::Result<u8> {
    let model = load_model_path(&common.config)?;
    let mut parameters = BTreeMap::new();
    parameters.insert("from_origin".into(), serde_json::Value::Bool(from_origin));
    if let Some(g) = &gamma_grid {
        parameters.insert("gamma_grid".into(), serde_json::Value::String(g.clone()));
    }
    if let Some(g) = &umax_grid {
        parameters.insert("umax_grid".into(), serde_json::Value::String(g.clone()));
    }

    if let Some(grid_text) = umax_grid {
        if !from_origin {
            return Err(satcon_core::Error::Parse(
                "--umax-grid sweeps use the origin driver; pass --from-origin".into(),
            ));
        }
        write_manifest(
            &common.out_dir,
            "max-tolerance",
            &common.config,
            common.seed,
            parameters,
            &["tolerance_vs_umax.csv"],
        )?;
        let grid = parse_grid(&grid_text)?;
        let result = sweep(
            &model,
            SweepParameter::UMax,
            &grid,
            SweepDriver::OriginTolerance,
            Some(&common.out_dir.join("cache")),
        )?;
        write_text(
            &common.out_dir.join("tolerance_vs_umax.csv"),
            &result.to_csv(),
        )?;
        let any = result.points.iter().any(|p| p.objective.is_some());
        for p in &result.points {
            match p.objective {
                Some(v) => println!("u_max = {:>6}: certified energy {v:.4}", p.value),
                None => println!("u_max = {:>6}: {}", p.value, p.status),
            }
        }
        return Ok(if any { EXIT_OK } else { EXIT_INFEASIBLE });
    }

    write_manifest(
        &common.out_dir,
        "max-tolerance",
        &common.config,
        common.seed,
        parameters,
        &["tolerance.json", "certificate.json"],
    )?;
    let sys = build_disagreement_system(&model)?;

    if from_origin {
        match max_tolerance_from_origin(&sys, &model.polytope, &OriginSearch::default())? {
            Some(result) => {
                let params = Theorem1Params {
                    rho: result.n_rho / model.n_agents as f64,
                    eta: 1.0,
                    gamma: result.gamma,
                };
                let doc = certificate_doc(
                    "origin-tolerance",
                    &params,
                    result.n_rho,
                    &result.certificate,
                    model.n_modes(),
                )?;
                write_json(&common.out_dir.join("certificate.json"), &doc)?;
                write_json(
                    &common.out_dir.join("tolerance.json"),
                    &serde_json::json!({
                        "driver": "origin",
                        "n_rho": result.n_rho,
                        "gamma": result.gamma,
                        "ceiling_hit": result.ceiling_hit,
                    }),
                )?;
                if result.ceiling_hit {
                    println!(
                        "certified total disturbance energy N*rho >= {:.4} (search ceiling hit)",
                        result.n_rho
                    );
                } else {
                    println!("certified total disturbance energy N*rho = {:.4}", result.n_rho);
                }
                Ok(EXIT_OK)
            }
            None => {
                println!("no tolerance certificate at any containment ratio");
                Ok(EXIT_INFEASIBLE)
            }
        }
    } else {
        let grid = match gamma_grid {
            Some(text) => parse_grid(&text)?,
            None => default_gamma_grid(),
        };
        match max_disturbance_tolerance(&sys, &model.polytope, &grid, &RhoSearch::default())? {
            Some(result) => {
                let params = Theorem1Params {
                    rho: result.rho,
                    eta: result.eta,
                    gamma: result.gamma,
                };
                let doc = certificate_doc(
                    "region-tolerance",
                    &params,
                    model.n_agents as f64 * result.rho,
                    &result.certificate,
                    model.n_modes(),
                )?;
                write_json(&common.out_dir.join("certificate.json"), &doc)?;
                write_json(
                    &common.out_dir.join("tolerance.json"),
                    &serde_json::json!({
                        "driver": "region",
                        "rho": result.rho,
                        "n_rho": model.n_agents as f64 * result.rho,
                        "gamma": result.gamma,
                        "eta": result.eta,
                        "ceiling_hit": result.ceiling_hit,
                        "per_gamma": result.per_gamma,
                    }),
                )?;
                println!(
                    "certified per-agent energy rho = {:.4} at gamma = {:.4}",
                    result.rho, result.gamma
                );
                Ok(EXIT_OK)
            }
            None => {
                println!("no tolerance certificate on the gamma grid");
                Ok(EXIT_INFEASIBLE)
            }
        }
    }
}

fn default_gamma_grid() -> Vec<f64> {
    // 40 log-spaced containment ratios in (1e-4, 0.9).
    let n = 40;
    let (lo, hi) = (1e-4f64, 0.9f64);
    (0..n)
        .map(|k| lo * (hi / lo).powf(k as f64 / (n - 1) as f64))
        .collect()
}

fn cmd_synthesize(
    common: CommonArgs,
    rho: f64,
    eta: f64,
    gamma_grid: Option<String>,
) -> satcon_core::Result<u8> {
    let model = load_model_path(&common.config)?;
    let grid = match gamma_grid {
        Some(text) => parse_grid(&text)?,
        None => vec![0.5, 0.2, 0.1, 0.05, 0.02, 0.01],
    };
    let mut parameters = BTreeMap::new();
    parameters.insert("rho".into(), json_f64(rho));
    parameters.insert("eta".into(), json_f64(eta));
    parameters.insert(
        "gamma_grid".into(),
        serde_json::Value::String(
            grid.iter()
                .map(|g| g.to_string())
                .collect::<Vec<_>>()
                .join(","),
        ),
    );
    write_manifest(
        &common.out_dir,
        "synthesize",
        &common.config,
        common.seed,
        parameters,
        &["gain.json", "config_with_gain.toml"],
    )?;

    match synthesize_gain(&model, &grid, rho, eta)? {
        Some(outcome) => {
            for w in &outcome.warnings {
                eprintln!("warning: {w}");
            }
            let doc = serde_json::json!({
                "K": matrix_rows(&outcome.gain),
                "method": outcome.method,
                "rho": outcome.params.rho,
                "eta": outcome.params.eta,
                "gamma": outcome.params.gamma,
                "reverification": {
                    "status": "feasible",
                    "worst_violation": outcome.certificate.worst_violation,
                    "solver_status": outcome.certificate.solver_status,
                },
            });
            write_json(&common.out_dir.join("gain.json"), &doc)?;
            let mut with_gain = model.clone();
            with_gain.gain = Some(GainMatrix::new(outcome.gain.clone(), &model.dynamics)?);
            write_text(
                &common.out_dir.join("config_with_gain.toml"),
                &serialize_model(&with_gain),
            )?;
            println!(
                "designed gain ({:?}) verified at rho = {}, eta = {}, gamma = {}",
                outcome.method, outcome.params.rho, outcome.params.eta, outcome.params.gamma
            );
            for i in 0..outcome.gain.nrows() {
                let row: Vec<String> = (0..outcome.gain.ncols())
                    .map(|j| format!("{:+.6}", outcome.gain[(i, j)]))
                    .collect();
                println!("  K[{i}] = [{}]", row.join(", "));
            }
            Ok(EXIT_OK)
        }
        None => {
            println!("no certifiable gain found on the gamma grid");
            Ok(EXIT_INFEASIBLE)
        }
    }
}

fn cmd_sweep(
    common: CommonArgs,
    parameter: String,
    umax_grid: Option<String>,
    eps_grid: Option<String>,
    gamma: f64,
    slice_axes: String,
) -> satcon_core::Result<u8> {
    let model = load_model_path(&common.config)?;
    let (param, grid_text, driver) = match parameter.as_str() {
        "umax" => (
            SweepParameter::UMax,
            umax_grid.ok_or_else(|| satcon_core::Error::Parse("--umax-grid required".into()))?,
            SweepDriver::OriginTolerance,
        ),
        "eps" => (
            SweepParameter::RateScale,
            eps_grid.ok_or_else(|| satcon_core::Error::Parse("--eps-grid required".into()))?,
            SweepDriver::RegionTrace { gamma },
        ),
        other => {
            return Err(satcon_core::Error::Parse(format!(
                "unknown sweep parameter `{other}` (use umax or eps)"
            )))
        }
    };
    let grid = parse_grid(&grid_text)?;
    let axes = {
        let v = parse_grid(&slice_axes)?;
        if v.len() != 2 {
            return Err(satcon_core::Error::Parse("--slice-axes wants two indices".into()));
        }
        (v[0] as usize - 1, v[1] as usize - 1)
    };

    let mut parameters = BTreeMap::new();
    parameters.insert("parameter".into(), serde_json::Value::String(parameter.clone()));
    parameters.insert("grid".into(), serde_json::Value::String(grid_text.clone()));
    parameters.insert("gamma".into(), json_f64(gamma));
    let csv_name = format!("sweep_{}.csv", param.name());
    write_manifest(
        &common.out_dir,
        "sweep",
        &common.config,
        common.seed,
        parameters,
        &[&csv_name],
    )?;

    let result = sweep(
        &model,
        param,
        &grid,
        driver,
        Some(&common.out_dir.join("cache")),
    )?;
    write_text(&common.out_dir.join(&csv_name), &result.to_csv())?;

    // Region exports for the trace driver: one JSON per feasible grid point.
    if let SweepDriver::RegionTrace { gamma } = driver {
        for point in result.points.iter().filter(|p| p.objective.is_some()) {
            let varied = model.with_scaled_rates(point.value)?;
            let sys = build_disagreement_system(&varied)?;
            if let Some(region) = satcon_core::optimize::maximize_region(
                &sys,
                &varied.polytope,
                gamma,
                satcon_core::optimize::RhoPolicy::LargestFeasible,
                &RhoSearch::default(),
            )? {
                let family = satcon_core::optimize::certificate_family(
                    &region.certificate,
                    model.n_modes(),
                    1.0,
                )?;
                let export = export_region(&family, axes)?;
                write_json(
                    &common
                        .out_dir
                        .join(format!("region_eps_{:.4}.json", point.value)),
                    &export,
                )?;
            }
        }
    }

    let mut feasible = 0usize;
    for p in &result.points {
        match p.objective {
            Some(v) => {
                feasible += 1;
                println!("{} = {:>8}: objective {v:.6}", result.parameter, p.value);
            }
            None => println!("{} = {:>8}: {}", result.parameter, p.value, p.status),
        }
    }
    Ok(if feasible > 0 { EXIT_OK } else { EXIT_INFEASIBLE })
}

struct SimulateArgs {
    common: CommonArgs,
    certificate: PathBuf,
    disturbance: String,
    target_agent: usize,
    amplitude: Option<String>,
    budget: Option<f64>,
    realizations: usize,
    horizon: f64,
    step: f64,
    from_origin: bool,
    record_stride: usize,
    export_count: usize,
}

fn cmd_simulate(args: SimulateArgs) -> satcon_core::Result<u8> {
    let model = load_model_path(&args.common.config)?;
    let gain = model.require_gain()?.clone();
    let cert_text = std::fs::read_to_string(&args.certificate).map_err(|e| {
        satcon_core::Error::Parse(format!("certificate {}: {e}", args.certificate.display()))
    })?;
    let cert: CertificateDoc = serde_json::from_str(&cert_text)
        .map_err(|e| satcon_core::Error::Parse(format!("certificate JSON: {e}")))?;
    let shapes: Vec<DMatrix<f64>> = cert
        .shapes
        .iter()
        .map(|rows| {
            let r = rows.len();
            let c = rows.first().map(|x| x.len()).unwrap_or(0);
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            DMatrix::from_row_slice(r, c, &flat)
        })
        .collect();
    let family = EllipsoidFamily::new(shapes, 1.0)?;

    let q = model.dynamics.disturbance_dim();
    let kind = match args.disturbance.as_str() {
        "zero" => DisturbanceKind::Zero,
        "ramp" => DisturbanceKind::Ramp(match &args.amplitude {
            Some(a) => parse_vector(a)?,
            None => DVector::from_element(q, 1.0),
        }),
        "constant" => DisturbanceKind::Constant(match &args.amplitude {
            Some(a) => parse_vector(a)?,
            None => DVector::from_element(q, 10.0),
        }),
        other => {
            return Err(satcon_core::Error::Parse(format!(
                "unknown disturbance kind `{other}`"
            )))
        }
    };
    if args.target_agent == 0 || args.target_agent > model.n_agents {
        return Err(satcon_core::Error::Parse(format!(
            "--target-agent must be in 1..={}",
            model.n_agents
        )));
    }
    let budget = args.budget.unwrap_or(cert.n_rho);
    let spec = match kind {
        DisturbanceKind::Zero => DisturbanceSpec::zero(),
        k => make_disturbance(k, vec![args.target_agent - 1], budget)?,
    };

    let mut parameters = BTreeMap::new();
    parameters.insert(
        "certificate".into(),
        serde_json::Value::String(args.certificate.display().to_string()),
    );
    parameters.insert(
        "disturbance".into(),
        serde_json::Value::String(args.disturbance.clone()),
    );
    parameters.insert("target_agent".into(), json_f64(args.target_agent as f64));
    parameters.insert("budget".into(), json_f64(budget));
    parameters.insert("t_off".into(), json_f64(spec.t_off));
    parameters.insert("realizations".into(), json_f64(args.realizations as f64));
    parameters.insert("horizon".into(), json_f64(args.horizon));
    parameters.insert("step".into(), json_f64(args.step));
    parameters.insert(
        "from_origin".into(),
        serde_json::Value::Bool(args.from_origin),
    );
    write_manifest(
        &args.common.out_dir,
        "simulate",
        &args.common.config,
        args.common.seed,
        parameters,
        &["invariance_report.json"],
    )?;

    let grid = IntegrationGrid::with_step(args.horizon, args.step);
    let report = if args.from_origin {
        verify_invariance_from_origin(
            &model,
            &gain,
            &family,
            cert.outer_level,
            &spec,
            budget,
            args.realizations,
            args.common.seed,
            &grid,
        )?
    } else {
        verify_invariance(
            &model,
            &gain,
            &family,
            cert.outer_level,
            &spec,
            budget,
            args.realizations,
            args.common.seed,
            &grid,
        )?
    };
    write_json(&args.common.out_dir.join("invariance_report.json"), &report)?;

    // Export the first few realizations verbatim for plotting.
    let generator = model.mixed_generator(None)?;
    for i in 0..args.export_count.min(args.realizations) {
        let run_seed = args
            .common
            .seed
            .wrapping_add(1_000_003u64.wrapping_mul(i as u64));
        let traj = sample_trajectory(
            &generator,
            &model.initial_distribution,
            args.horizon,
            run_seed,
        )?;
        let x0 = if args.from_origin {
            DVector::zeros(model.n_agents * model.dynamics.state_dim())
        } else {
            // Mirror the batch sampler's choice for this index.
            let z0 = satcon_core::regions::boundary_sample(
                &family.shapes[i % family.n_modes()],
                1.0,
                1,
                run_seed,
            )?
            .pop()
            .expect("one sample");
            satcon_core::disagreement::from_disagreement(
                &z0,
                &DVector::zeros(model.dynamics.state_dim()),
            )?
        };
        let real = integrate(&model, &gain, &traj, &spec, &x0, &grid, None)?;
        write_text(
            &args.common.out_dir.join(format!("realization_{i}.csv")),
            &real.to_csv(args.record_stride),
        )?;
        write_text(
            &args.common.out_dir.join(format!("switching_{i}.csv")),
            &traj.to_columnar(),
        )?;
    }

    println!(
        "{} realizations: {} violated the outer region (containment {:.4}%), max relative level {:.4}",
        report.realizations,
        report.violating_realizations,
        100.0 * report.containment_fraction,
        report.max_relative_level
    );
    println!(
        "mean-square disagreement: initial {:.4e}, final {:.4e}",
        report.mean_square_initial, report.mean_square_final
    );
    println!(
        "report written to {}",
        args.common.out_dir.join("invariance_report.json").display()
    );
    Ok(EXIT_OK)
}
