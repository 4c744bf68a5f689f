//! Conic-solver bridge, independent post-solve verification, and the
//! optimization drivers (tolerance maximization, gain estimation, region
//! maximization, parameter sweeps).
//!
//! The solver is an internal boundary: problems are lowered to standard conic
//! form, handed to Clarabel, and every claimed-feasible solution is
//! re-verified here by eigenvalue checks that do not trust the solver.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus as ClarabelStatus,
    SupportedConeT,
};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::disagreement::DisagreementSystem;
use crate::error::{Error, Result};
use crate::lmi::{
    add_containment, assemble_l2, assemble_origin_variant, assemble_theorem1, LmiProblem, Sense,
    Theorem1Params, VERIFY_TOL,
};
use crate::markov::GeneratorPolytope;
use crate::regions::{max_sym_eig, min_sym_eig, EllipsoidFamily};
use crate::sysmodel::NetworkModel;

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub verbose: bool,
    pub max_iter: u32,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            verbose: false,
            max_iter: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveStatus {
    Feasible,
    Infeasible,
    NumericalFailure,
}

/// Signed violation of one constraint in its required direction: largest
/// eigenvalue for `<= 0` constraints, negated smallest eigenvalue for
/// `>= 0`. Values at or below [`VERIFY_TOL`] verify.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConstraintMargin {
    pub label: String,
    pub violation: f64,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub status: SolveStatus,
    /// Matrix values of every decision variable (feasible solves only).
    pub values: BTreeMap<String, DMatrix<f64>>,
    pub margins: Vec<ConstraintMargin>,
    pub worst_violation: f64,
    pub objective: Option<f64>,
    pub iterations: u32,
    pub solve_time_s: f64,
    pub solver_status: String,
}

impl SolveReport {
    pub fn is_feasible(&self) -> bool {
        self.status == SolveStatus::Feasible
    }

    pub fn matrix(&self, name: &str) -> Result<&DMatrix<f64>> {
        self.values
            .get(name)
            .ok_or_else(|| Error::Solver(format!("report has no value for {name}")))
    }
}

fn empty_report(
    status: SolveStatus,
    solver_status: String,
    iterations: u32,
    t: f64,
) -> SolveReport {
    SolveReport {
        status,
        values: BTreeMap::new(),
        margins: Vec::new(),
        worst_violation: f64::NAN,
        objective: None,
        iterations,
        solve_time_s: t,
        solver_status,
    }
}

/// svec of the upper triangle, column-major, off-diagonals scaled by sqrt(2)
/// (the conic solver's packed symmetric layout).
fn svec(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut out = Vec::with_capacity(n * (n + 1) / 2);
    for j in 0..n {
        for i in 0..=j {
            if i == j {
                out.push(m[(i, j)]);
            } else {
                out.push(m[(i, j)] * std::f64::consts::SQRT_2);
            }
        }
    }
    out
}

/// Solves an assembled problem and independently verifies the result.
pub fn solve(problem: &LmiProblem) -> Result<SolveReport> {
    solve_with(problem, &SolverOptions::default())
}

pub fn solve_with(problem: &LmiProblem, options: &SolverOptions) -> Result<SolveReport> {
    let n = problem.n_slots();
    if n == 0 {
        return Err(Error::Solver("problem has no decision variables".into()));
    }

    // Conic data: rows are the nonnegative block then one PSD block per
    // constraint; s = b - A x with s in the cone product.
    let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
    let mut b: Vec<f64> = Vec::new();
    let mut triplets: Vec<(usize, usize, f64)> = Vec::new();
    let mut row0 = 0usize;

    let bounds = problem.slot_lower_bounds();
    if !bounds.is_empty() {
        cones.push(SupportedConeT::NonnegativeConeT(bounds.len()));
        for (r, (slot, bound)) in bounds.iter().enumerate() {
            b.push(-bound);
            triplets.push((row0 + r, *slot, -1.0));
        }
        row0 += bounds.len();
    }

    for c in problem.constraints() {
        let side = c.expr.nrows();
        let rows = side * (side + 1) / 2;
        cones.push(SupportedConeT::PSDTriangleConeT(side));
        let (f0, coeffs) = c.expr.coefficients(problem.vars());
        let sign = match c.sense {
            Sense::NegSemidef => -1.0,
            Sense::PosSemidef => 1.0,
        };
        for v in svec(&f0) {
            b.push(sign * v);
        }
        for (slot, fk) in coeffs {
            for (r, v) in svec(&fk).into_iter().enumerate() {
                if v != 0.0 {
                    triplets.push((row0 + r, slot, -sign * v));
                }
            }
        }
        row0 += rows;
    }

    let a = csc_from_triplets(row0, n, &mut triplets);
    let p = CscMatrix::<f64>::zeros((n, n));
    let mut q = vec![0.0; n];
    for (slot, coef) in problem.objective() {
        q[*slot] += coef;
    }

    let settings = DefaultSettingsBuilder::default()
        .verbose(options.verbose)
        .max_iter(options.max_iter)
        .build()
        .map_err(|e| Error::Solver(format!("settings: {e}")))?;
    let mut solver = DefaultSolver::new(&p, &q, &a, &b, &cones, settings)
        .map_err(|e| Error::Solver(format!("solver setup: {e}")))?;
    let t0 = Instant::now();
    // The solver can panic on pathologically conditioned cones (LAPACK
    // eigenvalue failures); report those as numerical failures instead of
    // taking the process down.
    let solved = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| solver.solve()));
    let elapsed = t0.elapsed().as_secs_f64();
    if solved.is_err() {
        return Ok(empty_report(
            SolveStatus::NumericalFailure,
            "SolverPanic".into(),
            0,
            elapsed,
        ));
    }
    let status = solver.solution.status;
    let iterations = solver.info.iterations;

    match status {
        ClarabelStatus::Solved | ClarabelStatus::AlmostSolved => {
            let x = solver.solution.x.clone();
            let mut report = verify_solution(problem, &x);
            report.iterations = iterations;
            report.solve_time_s = elapsed;
            report.solver_status = format!("{status:?}");
            if !problem.objective().is_empty() {
                report.objective = Some(
                    problem
                        .objective()
                        .iter()
                        .map(|(slot, coef)| coef * x[*slot])
                        .sum(),
                );
            }
            Ok(report)
        }
        ClarabelStatus::PrimalInfeasible | ClarabelStatus::AlmostPrimalInfeasible => Ok(
            empty_report(SolveStatus::Infeasible, format!("{status:?}"), iterations, elapsed),
        ),
        other => Ok(empty_report(
            SolveStatus::NumericalFailure,
            format!("{other:?}"),
            iterations,
            elapsed,
        )),
    }
}

/// Re-evaluates every constraint at `x` and classifies the solve; the check
/// shares no code path with the conic lowering (eigenvalues of the assembled
/// block expressions).
fn verify_solution(problem: &LmiProblem, x: &[f64]) -> SolveReport {
    let mut margins = Vec::with_capacity(problem.constraints().len());
    let mut worst = f64::NEG_INFINITY;
    for c in problem.constraints() {
        let value = c.expr.eval(problem.vars(), x);
        let violation = match c.sense {
            Sense::NegSemidef => max_sym_eig(&value),
            Sense::PosSemidef => -min_sym_eig(&value),
        };
        worst = worst.max(violation);
        margins.push(ConstraintMargin {
            label: c.label.clone(),
            violation,
        });
    }
    for (slot, bound) in problem.slot_lower_bounds() {
        worst = worst.max(bound - x[*slot]);
    }
    let status = if worst <= VERIFY_TOL {
        SolveStatus::Feasible
    } else {
        SolveStatus::NumericalFailure
    };
    SolveReport {
        status,
        values: problem.unpack_all(x),
        margins,
        worst_violation: worst,
        objective: None,
        iterations: 0,
        solve_time_s: 0.0,
        solver_status: String::new(),
    }
}

fn csc_from_triplets(
    rows: usize,
    cols: usize,
    triplets: &mut Vec<(usize, usize, f64)>,
) -> CscMatrix<f64> {
    triplets.sort_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));
    let mut colptr = Vec::with_capacity(cols + 1);
    let mut rowval = Vec::with_capacity(triplets.len());
    let mut nzval = Vec::with_capacity(triplets.len());
    let mut col = 0usize;
    colptr.push(0);
    for &(r, c, v) in triplets.iter() {
        while col < c {
            colptr.push(rowval.len());
            col += 1;
        }
        rowval.push(r);
        nzval.push(v);
    }
    while col < cols {
        colptr.push(rowval.len());
        col += 1;
    }
    CscMatrix::new(rows, cols, colptr, rowval, nzval)
}

/// Per-mode ellipsoid shapes `P_l = Y_l^{-1}` from a feasible report.
pub fn certificate_family(
    report: &SolveReport,
    n_modes: usize,
    level: f64,
) -> Result<EllipsoidFamily> {
    let mut shapes = Vec::with_capacity(n_modes);
    for l in 1..=n_modes {
        let y = report.matrix(&format!("Y{l}"))?;
        let p = y
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::NotPositiveDefinite(format!("Y{l} is singular")))?;
        shapes.push((&p + p.transpose()) * 0.5);
    }
    EllipsoidFamily::new(shapes, level)
}

/// Designed gain `K = Kbar F^{-1}` from a feasible synthesis report.
pub fn synthesized_gain(report: &SolveReport) -> Result<DMatrix<f64>> {
    let kbar = report.matrix("Kbar")?;
    let f = report.matrix("F")?;
    let f_inv = f
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::NotPositiveDefinite("F is singular".into()))?;
    Ok(kbar * f_inv)
}

// ---------------------------------------------------------------------------
// Bisection drivers
// ---------------------------------------------------------------------------

/// Relative tolerance used by the bisections; matches four-significant-figure
/// reporting of the certified scalars.
pub const BISECT_REL_TOL: f64 = 1e-3;

#[derive(Debug, Clone, Copy)]
pub struct OriginSearch {
    /// Smallest gamma probed; reaching it means the tolerance is reported as
    /// a ceiling hit (e.g. no disturbance path at all).
    pub gamma_floor: f64,
    /// Largest gamma probed (strictly below one).
    pub gamma_start: f64,
    pub rel_tol: f64,
    /// Known-feasible gamma to start from (monotone sweep chaining).
    pub upper_start: Option<f64>,
}

impl Default for OriginSearch {
    fn default() -> Self {
        Self {
            gamma_floor: 1e-9,
            gamma_start: 1.0 - 1e-6,
            rel_tol: BISECT_REL_TOL,
            upper_start: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OriginTolerance {
    /// Certified total disturbance energy `N rho = 1/gamma`.
    pub n_rho: f64,
    pub gamma: f64,
    pub certificate: SolveReport,
    pub ceiling_hit: bool,
}

fn origin_problem(
    sys: &DisagreementSystem,
    polytope: &GeneratorPolytope,
    gamma: f64,
) -> Result<LmiProblem> {
    let mut prob = assemble_origin_variant(sys, polytope, gamma)?;
    let names: Vec<String> = (1..=sys.n_modes()).map(|l| format!("Y{l}")).collect();
    add_containment(&mut prob, sys.n_z(), &names)?;
    Ok(prob)
}

/// Largest certified total disturbance energy for origin starts: minimizes
/// gamma by geometric bisection (feasibility is monotone increasing in
/// gamma) and returns `N rho = 1/gamma`. `None` means not certifiable even
/// at the loosest gamma.
pub fn max_tolerance_from_origin(
    sys: &DisagreementSystem,
    polytope: &GeneratorPolytope,
    search: &OriginSearch,
) -> Result<Option<OriginTolerance>> {
    let feasible = |gamma: f64| -> Result<Option<SolveReport>> {
        let report = solve(&origin_problem(sys, polytope, gamma)?)?;
        Ok(report.is_feasible().then_some(report))
    };

    let mut hi;
    let mut hi_report;
    let start = match search.upper_start {
        Some(g) if g > search.gamma_floor && g < 1.0 => g,
        _ => search.gamma_start,
    };
    match feasible(start)? {
        Some(r) => {
            hi = start;
            hi_report = r;
        }
        None => {
            if start == search.gamma_start {
                return Ok(None);
            }
            // The chained start should have been feasible; fall back to the
            // full bracket rather than failing the sweep point.
            match feasible(search.gamma_start)? {
                Some(r) => {
                    hi = search.gamma_start;
                    hi_report = r;
                }
                None => return Ok(None),
            }
        }
    }

    // Unbounded tolerance: feasible all the way down at the floor.
    if let Some(r) = feasible(search.gamma_floor)? {
        return Ok(Some(OriginTolerance {
            n_rho: 1.0 / search.gamma_floor,
            gamma: search.gamma_floor,
            certificate: r,
            ceiling_hit: true,
        }));
    }

    let mut lo = search.gamma_floor;
    while hi / lo - 1.0 > search.rel_tol {
        let mid = (lo * hi).sqrt();
        match feasible(mid)? {
            Some(r) => {
                hi = mid;
                hi_report = r;
            }
            None => lo = mid,
        }
    }
    Ok(Some(OriginTolerance {
        n_rho: 1.0 / hi,
        gamma: hi,
        certificate: hi_report,
        ceiling_hit: false,
    }))
}

#[derive(Debug, Clone, Copy)]
pub struct RhoSearch {
    pub rho_floor: f64,
    pub rho_cap: f64,
    pub rel_tol: f64,
}

impl Default for RhoSearch {
    fn default() -> Self {
        Self {
            rho_floor: 1e-9,
            rho_cap: 1e6,
            rel_tol: BISECT_REL_TOL,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DisturbanceTolerance {
    pub rho: f64,
    pub gamma: f64,
    pub eta: f64,
    pub certificate: SolveReport,
    pub ceiling_hit: bool,
    /// Outcome per grid point: `(gamma, certified rho)`.
    pub per_gamma: Vec<(f64, Option<f64>)>,
}

/// Region-to-region disturbance tolerance: for each gamma in the grid,
/// maximizes rho by bisection (the constraints are affine for fixed gamma)
/// with the inscribed-ellipsoid constraint included; returns the grid best.
/// The energy weight follows the containment relation
/// `gamma = 1/(1 + N rho eta)`.
pub fn max_disturbance_tolerance(
    sys: &DisagreementSystem,
    polytope: &GeneratorPolytope,
    gamma_grid: &[f64],
    search: &RhoSearch,
) -> Result<Option<DisturbanceTolerance>> {
    if gamma_grid.is_empty() {
        return Err(Error::structure("gamma grid must be non-empty"));
    }
    if gamma_grid.iter().any(|&g| !(g > 0.0 && g < 1.0)) {
        return Err(Error::structure("gamma grid must lie in (0, 1)"));
    }
    let n = sys.n_agents as f64;
    let eta_for = |gamma: f64, rho: f64| (1.0 / gamma - 1.0) / (n * rho);

    let mut best: Option<DisturbanceTolerance> = None;
    let mut per_gamma = Vec::with_capacity(gamma_grid.len());
    for &gamma in gamma_grid {
        let feasible = |rho: f64| -> Result<Option<SolveReport>> {
            let params = Theorem1Params {
                rho,
                eta: eta_for(gamma, rho),
                gamma,
            };
            let mut prob = assemble_theorem1(sys, polytope, &params)?;
            let names: Vec<String> = (1..=sys.n_modes()).map(|l| format!("Y{l}")).collect();
            add_containment(&mut prob, sys.n_z(), &names)?;
            let report = solve(&prob)?;
            Ok(report.is_feasible().then_some(report))
        };

        match bisect_max(search.rho_floor, search.rho_cap, search.rel_tol, &feasible)? {
            None => per_gamma.push((gamma, None)),
            Some((rho, report, ceiling_hit)) => {
                per_gamma.push((gamma, Some(rho)));
                if best.as_ref().is_none_or(|b| rho > b.rho) {
                    best = Some(DisturbanceTolerance {
                        rho,
                        gamma,
                        eta: eta_for(gamma, rho),
                        certificate: report,
                        ceiling_hit,
                        per_gamma: Vec::new(),
                    });
                }
            }
        }
    }
    Ok(best.map(|mut b| {
        b.per_gamma = per_gamma;
        b
    }))
}

/// Largest parameter in `[floor, cap]` whose monotone-decreasing feasibility
/// test passes: `None` if infeasible at the floor; `(value, report,
/// ceiling_hit)` otherwise.
fn bisect_max(
    floor: f64,
    cap: f64,
    rel_tol: f64,
    feasible: &dyn Fn(f64) -> Result<Option<SolveReport>>,
) -> Result<Option<(f64, SolveReport, bool)>> {
    let Some(floor_report) = feasible(floor)? else {
        return Ok(None);
    };
    if let Some(report) = feasible(cap)? {
        return Ok(Some((cap, report, true)));
    }
    let mut lo = floor;
    let mut lo_report = floor_report;
    let mut hi = cap;
    while hi / lo - 1.0 > rel_tol {
        let mid = (lo * hi).sqrt();
        match feasible(mid)? {
            Some(r) => {
                lo = mid;
                lo_report = r;
            }
            None => hi = mid,
        }
    }
    Ok(Some((lo, lo_report, false)))
}

#[derive(Debug, Clone)]
pub struct L2Gain {
    pub varrho: f64,
    pub certificate: SolveReport,
    pub floor_hit: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct VarrhoSearch {
    pub floor: f64,
    pub cap: f64,
    pub rel_tol: f64,
}

impl Default for VarrhoSearch {
    fn default() -> Self {
        Self {
            floor: 1e-6,
            cap: 1e6,
            rel_tol: BISECT_REL_TOL,
        }
    }
}

/// Smallest certified disturbance-to-output gain at the given per-agent
/// energy bound: bisection on `varrho^2` (feasibility is monotone
/// increasing). `None` means infeasible even at the cap.
pub fn estimate_l2_gain(
    sys: &DisagreementSystem,
    polytope: &GeneratorPolytope,
    rho: f64,
    c: &DMatrix<f64>,
    search: &VarrhoSearch,
) -> Result<Option<L2Gain>> {
    let feasible = |varrho_sq: f64| -> Result<Option<SolveReport>> {
        let report = solve(&assemble_l2(sys, polytope, rho, varrho_sq.sqrt(), c)?)?;
        Ok(report.is_feasible().then_some(report))
    };
    let floor_sq = search.floor * search.floor;
    let cap_sq = search.cap * search.cap;
    let Some(cap_report) = feasible(cap_sq)? else {
        return Ok(None);
    };
    if let Some(r) = feasible(floor_sq)? {
        return Ok(Some(L2Gain {
            varrho: search.floor,
            certificate: r,
            floor_hit: true,
        }));
    }
    let mut lo = floor_sq;
    let mut hi = cap_sq;
    let mut hi_report = cap_report;
    while hi / lo - 1.0 > search.rel_tol {
        let mid = (lo * hi).sqrt();
        match feasible(mid)? {
            Some(r) => {
                hi = mid;
                hi_report = r;
            }
            None => lo = mid,
        }
    }
    Ok(Some(L2Gain {
        varrho: hi.sqrt(),
        certificate: hi_report,
        floor_hit: false,
    }))
}

/// How the disturbance level is handled while maximizing the region.
#[derive(Debug, Clone, Copy)]
pub enum RhoPolicy {
    /// Bisect rho to the largest certifiable value at the fixed gamma, then
    /// minimize the inscribed-ellipsoid trace there.
    LargestFeasible,
    /// Minimize the trace at this fixed rho.
    Fixed(f64),
}

#[derive(Debug, Clone)]
pub struct RegionResult {
    pub z_shape: DMatrix<f64>,
    pub trace: f64,
    pub rho: f64,
    pub gamma: f64,
    pub certificate: SolveReport,
}

/// Maximizes the inscribed ellipsoid `E(Z, 1)` of the certified region at a
/// fixed gamma by minimizing `trace(Z)`; smaller trace means a larger
/// inscribed set.
pub fn maximize_region(
    sys: &DisagreementSystem,
    polytope: &GeneratorPolytope,
    gamma: f64,
    policy: RhoPolicy,
    search: &RhoSearch,
) -> Result<Option<RegionResult>> {
    let n = sys.n_agents as f64;
    let build = |rho: f64, with_trace: bool| -> Result<LmiProblem> {
        let params = Theorem1Params {
            rho,
            eta: (1.0 / gamma - 1.0) / (n * rho),
            gamma,
        };
        let mut prob = assemble_theorem1(sys, polytope, &params)?;
        let names: Vec<String> = (1..=sys.n_modes()).map(|l| format!("Y{l}")).collect();
        let z = add_containment(&mut prob, sys.n_z(), &names)?;
        if with_trace {
            prob.set_objective_min_trace(z);
        }
        Ok(prob)
    };

    let (rho, backoffs): (f64, &[f64]) = match policy {
        RhoPolicy::Fixed(rho) => (rho, &[1.0]),
        RhoPolicy::LargestFeasible => {
            let feasible = |rho: f64| -> Result<Option<SolveReport>> {
                let report = solve(&build(rho, false)?)?;
                Ok(report.is_feasible().then_some(report))
            };
            match bisect_max(search.rho_floor, search.rho_cap, search.rel_tol, &feasible)? {
                None => return Ok(None),
                // The trace solve sits next to the feasibility boundary;
                // back off slightly if it proves numerically marginal.
                Some((rho, _, _)) => (rho, &[1.0, 0.98, 0.9, 0.5]),
            }
        }
    };

    for factor in backoffs {
        let rho_try = rho * factor;
        let report = solve(&build(rho_try, true)?)?;
        if !report.is_feasible() {
            continue;
        }
        let z_shape = report.matrix("Z")?.clone();
        let trace = z_shape.trace();
        return Ok(Some(RegionResult {
            z_shape,
            trace,
            rho: rho_try,
            gamma,
            certificate: report,
        }));
    }
    Ok(None)
}

// ---------------------------------------------------------------------------
// Gain synthesis driver
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthesisMethod {
    /// The block-replicated-shape synthesis certificate was feasible.
    Structured,
    /// A seeded candidate gain was certified by the analysis inequalities and
    /// recentred by one fixed-shape gain re-solve.
    SeededAnalysis,
}

#[derive(Debug, Clone)]
pub struct SynthesisOutcome {
    pub gain: DMatrix<f64>,
    pub params: Theorem1Params,
    pub method: SynthesisMethod,
    /// Closed-loop analysis certificate at `params` with the returned gain;
    /// always verified feasible.
    pub certificate: SolveReport,
    pub warnings: Vec<String>,
}

/// Closed-loop analysis feasibility for a concrete gain.
fn analysis_certificate(
    model: &NetworkModel,
    gain: &DMatrix<f64>,
    params: &Theorem1Params,
) -> Result<Option<SolveReport>> {
    let mut closed = model.clone();
    closed.gain = Some(crate::sysmodel::GainMatrix::new(
        gain.clone(),
        &model.dynamics,
    )?);
    let sys = crate::disagreement::build_disagreement_system(&closed)?;
    let prob = assemble_theorem1(&sys, &closed.polytope, params)?;
    let report = solve(&prob)?;
    Ok(report.is_feasible().then_some(report))
}

/// Designs a consensus gain. The structured synthesis certificate is tried
/// first on every gamma in the grid; when it is infeasible throughout (which
/// happens whenever an unstable open loop must ride out gain-free modes, see
/// [`crate::lmi::assemble_synthesis`]), candidate gains proportional to `B'`
/// are screened against the analysis inequalities, the first certified one is
/// recentred by a fixed-shape re-solve, and the result is returned with its
/// closed-loop certificate. Every returned gain is analysis-verified at the
/// returned parameters; `None` means nothing could be certified.
pub fn synthesize_gain(
    model: &NetworkModel,
    gamma_grid: &[f64],
    rho: f64,
    eta: f64,
) -> Result<Option<SynthesisOutcome>> {
    if gamma_grid.is_empty() {
        return Err(Error::structure("gamma grid must be non-empty"));
    }
    let mut warnings = Vec::new();

    for &gamma in gamma_grid {
        let params = Theorem1Params { rho, eta, gamma };
        let assembly = crate::lmi::assemble_synthesis(model, &params)?;
        warnings = assembly.warnings.clone();
        let report = solve(&assembly.problem)?;
        if !report.is_feasible() {
            continue;
        }
        let gain = synthesized_gain(&report)?;
        if let Some(cert) = analysis_certificate(model, &gain, &params)? {
            return Ok(Some(SynthesisOutcome {
                gain,
                params,
                method: SynthesisMethod::Structured,
                certificate: cert,
                warnings,
            }));
        }
    }
    warnings.push(
        "structured synthesis infeasible on every gamma grid point; falling back to \
         seeded analysis-certified design"
            .to_string(),
    );

    let b = &model.dynamics.b;
    for &t in &[
        0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, -0.01, -0.1, -1.0,
    ] {
        let seed = b.transpose() * t;
        for &gamma in gamma_grid {
            let params = Theorem1Params { rho, eta, gamma };
            let Some(seed_cert) = analysis_certificate(model, &seed, &params)? else {
                continue;
            };
            // Recentre the gain: fix the certified shapes and re-solve the
            // same inequalities with the gain as the free variable.
            let refit = refit_gain(model, &seed_cert, &params)?;
            if let Some(gain) = refit {
                if let Some(cert) = analysis_certificate(model, &gain, &params)? {
                    return Ok(Some(SynthesisOutcome {
                        gain,
                        params,
                        method: SynthesisMethod::SeededAnalysis,
                        certificate: cert,
                        warnings,
                    }));
                }
            }
            return Ok(Some(SynthesisOutcome {
                gain: seed,
                params,
                method: SynthesisMethod::SeededAnalysis,
                certificate: seed_cert,
                warnings,
            }));
        }
    }
    Ok(None)
}

/// Fixes the shape variables from a feasible analysis certificate and
/// re-solves the same inequalities with the gain free; the inequalities are
/// affine in the gain once the shapes are constants.
fn refit_gain(
    model: &NetworkModel,
    cert: &SolveReport,
    params: &Theorem1Params,
) -> Result<Option<DMatrix<f64>>> {
    use crate::lmi::{LmiProblem, MatExpr, Sense, SymBlock};

    let n = model.n_agents;
    let m = model.dynamics.state_dim();
    let p = model.dynamics.input_dim();
    let q_dim = model.dynamics.disturbance_dim();
    let s_modes = model.n_modes();
    let (n_z, n_u, n_w) = (m * (n - 1), n * p, n * q_dim);
    let u_sel = crate::disagreement::pivot_selector(n);
    let w_sel = crate::disagreement::lift_selector(n);
    let eye_nm1 = DMatrix::<f64>::identity(n - 1, n - 1);
    let ia = eye_nm1.kronecker(&model.dynamics.a);
    let ub = u_sel.kronecker(&model.dynamics.b);
    let ud = u_sel.kronecker(&model.dynamics.d);

    let y_vals: Vec<DMatrix<f64>> = (1..=s_modes)
        .map(|l| cert.matrix(&format!("Y{l}")).cloned())
        .collect::<Result<_>>()?;
    let s_val = cert.matrix("S")?.clone();

    let mut prob = LmiProblem::new("gain refit (fixed shapes)");
    let k = prob.add_rectangular("K", p, m);
    let x: Vec<_> = (0..s_modes)
        .map(|l| prob.add_rectangular(format!("X{}", l + 1), n_u, n_z))
        .collect();

    let gamma_block = DMatrix::identity(n_w, n_w) * (-(1.0 - params.gamma) / params.gamma);
    let sqrt_rho_d = ud.transpose() * params.rho.sqrt();
    for l in 0..s_modes {
        let ulw = &u_sel * &model.modes[l].laplacian * &w_sel;
        let lw = &model.modes[l].laplacian * &w_sel;
        for (i, vertex) in model.polytope.vertices().iter().enumerate() {
            let mut dims = vec![n_z, n_u, n_w];
            dims.extend(std::iter::repeat(n_z).take(s_modes - 1));
            let mut blk = SymBlock::new(dims);
            blk.set(
                0,
                0,
                (MatExpr::constant(&ia * &y_vals[l])
                    - MatExpr::kron_outer_var(&ulw, &model.dynamics.b, k)
                        .right_mul(&y_vals[l]))
                .he()
                    + MatExpr::constant(y_vals[l].clone() * vertex[(l, l)]),
            );
            blk.set(
                1,
                0,
                MatExpr::constant(&s_val * ub.transpose()) - MatExpr::var(x[l]),
            );
            blk.set(1, 1, MatExpr::constant(&s_val * -2.0));
            blk.set(2, 0, MatExpr::constant(sqrt_rho_d.clone()));
            blk.set(2, 2, MatExpr::constant(gamma_block.clone()));
            let mut kk = 0;
            for j in 0..s_modes {
                if j == l {
                    continue;
                }
                let root = vertex[(l, j)].max(0.0).sqrt();
                let idx = 3 + kk;
                blk.set(idx, 0, MatExpr::constant(y_vals[l].clone() * root));
                blk.set(idx, idx, MatExpr::constant(-y_vals[j].clone()));
                kk += 1;
            }
            prob.constrain(
                format!("main[mode={},vertex={}]", l + 1, i + 1),
                blk.flatten(),
                Sense::NegSemidef,
            );
        }
        let corner = model.dynamics.u_max * model.dynamics.u_max * params.gamma;
        let eye_p = DMatrix::<f64>::identity(p, p);
        for q in 0..n_u {
            let mut sel = DMatrix::zeros(1, n_u);
            sel[(0, q)] = 1.0;
            let mut blk = SymBlock::new(vec![n_z, 1]);
            blk.set(0, 0, MatExpr::constant(y_vals[l].clone()));
            blk.set(
                1,
                0,
                MatExpr::kron_outer_var(&lw, &eye_p, k)
                    .right_mul(&y_vals[l])
                    .left_mul(&sel)
                    + MatExpr::var(x[l]).left_mul(&sel),
            );
            blk.set(1, 1, MatExpr::constant(DMatrix::from_element(1, 1, corner)));
            prob.constrain(
                format!("sector[mode={},row={}]", l + 1, q + 1),
                blk.flatten(),
                Sense::PosSemidef,
            );
        }
    }
    let report = solve(&prob)?;
    if !report.is_feasible() {
        return Ok(None);
    }
    Ok(Some(report.matrix("K")?.clone()))
}

// ---------------------------------------------------------------------------
// Parameter sweeps
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParameter {
    /// Actuator limit.
    UMax,
    /// Uniform scale on every generator-polytope vertex (switching speed).
    RateScale,
}

impl SweepParameter {
    pub fn name(&self) -> &'static str {
        match self {
            SweepParameter::UMax => "u_max",
            SweepParameter::RateScale => "rate_scale",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum SweepDriver {
    /// Origin-start tolerance; objective column is `N rho`.
    OriginTolerance,
    /// Region maximization at fixed gamma; objective column is `trace(Z)`.
    RegionTrace { gamma: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub objective: Option<f64>,
    pub status: String,
    #[serde(default)]
    pub detail: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub parameter: String,
    pub driver: String,
    pub points: Vec<SweepPoint>,
}

impl SweepResult {
    /// Columnar text: `parameter,value,objective,status`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("parameter,value,objective,status\n");
        for p in &self.points {
            let obj = p.objective.map(|v| format!("{v}")).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{}\n",
                self.parameter, p.value, obj, p.status
            ));
        }
        s
    }
}

/// Runs `driver` over a strictly increasing grid of parameter values.
///
/// Per-point results are cached as JSON files under `cache_dir` (atomic
/// tmp-and-rename writes, so concurrent writers degrade to last-write-wins)
/// and reused on re-runs, making sweeps resumable. The origin driver visits
/// points in increasing order and chains the previous optimal gamma as the
/// next feasible start: feasibility is monotone in both gamma and the
/// actuator limit, so the reported curve is monotone by construction instead
/// of monotone up to bisection wobble.
pub fn sweep(
    model: &NetworkModel,
    parameter: SweepParameter,
    grid: &[f64],
    driver: SweepDriver,
    cache_dir: Option<&Path>,
) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::structure("sweep grid must be non-empty"));
    }
    for w in grid.windows(2) {
        if !(w[1] > w[0]) {
            return Err(Error::structure("sweep grid must be strictly increasing"));
        }
    }
    if let Some(dir) = cache_dir {
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::Solver(format!("cache dir {}: {e}", dir.display())))?;
    }

    let driver_name = match driver {
        SweepDriver::OriginTolerance => "origin_tolerance".to_string(),
        SweepDriver::RegionTrace { .. } => "region_trace".to_string(),
    };

    let mut points = Vec::with_capacity(grid.len());
    let mut chained_gamma: Option<f64> = None;
    for &value in grid {
        let cache_file = cache_dir.map(|d| d.join(cache_key(parameter, &driver_name, value)));
        if let Some(path) = &cache_file {
            if let Some(point) = read_cached_point(path) {
                if let Some(g) = point.detail.get("gamma") {
                    chained_gamma = Some(*g);
                }
                points.push(point);
                continue;
            }
        }

        let varied = match parameter {
            SweepParameter::UMax => model.with_u_max(value)?,
            SweepParameter::RateScale => model.with_scaled_rates(value)?,
        };
        let sys = crate::disagreement::build_disagreement_system(&varied)?;
        let point = match driver {
            SweepDriver::OriginTolerance => {
                let search = OriginSearch {
                    upper_start: chained_gamma,
                    ..OriginSearch::default()
                };
                match max_tolerance_from_origin(&sys, &varied.polytope, &search)? {
                    Some(t) => {
                        chained_gamma = Some(t.gamma);
                        let mut detail = BTreeMap::new();
                        detail.insert("gamma".into(), t.gamma);
                        detail.insert("ceiling_hit".into(), f64::from(u8::from(t.ceiling_hit)));
                        SweepPoint {
                            value,
                            objective: Some(t.n_rho),
                            status: "feasible".into(),
                            detail,
                        }
                    }
                    None => SweepPoint {
                        value,
                        objective: None,
                        status: "infeasible".into(),
                        detail: BTreeMap::new(),
                    },
                }
            }
            SweepDriver::RegionTrace { gamma } => {
                match maximize_region(
                    &sys,
                    &varied.polytope,
                    gamma,
                    RhoPolicy::LargestFeasible,
                    &RhoSearch::default(),
                )? {
                    Some(r) => {
                        let mut detail = BTreeMap::new();
                        detail.insert("rho".into(), r.rho);
                        SweepPoint {
                            value,
                            objective: Some(r.trace),
                            status: "feasible".into(),
                            detail,
                        }
                    }
                    None => SweepPoint {
                        value,
                        objective: None,
                        status: "infeasible".into(),
                        detail: BTreeMap::new(),
                    },
                }
            }
        };

        if let Some(path) = &cache_file {
            write_cached_point(path, &point)?;
        }
        points.push(point);
    }
    Ok(SweepResult {
        parameter: parameter.name().into(),
        driver: driver_name,
        points,
    })
}

fn cache_key(parameter: SweepParameter, driver: &str, value: f64) -> String {
    format!("point_{}_{}_{value:.6e}.json", parameter.name(), driver)
}

fn read_cached_point(path: &Path) -> Option<SweepPoint> {
    let text = std::fs::read_to_string(path).ok()?;
    serde_json::from_str(&text).ok()
}

fn write_cached_point(path: &Path, point: &SweepPoint) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    let text = serde_json::to_string_pretty(point)
        .map_err(|e| Error::Solver(format!("cache serialize: {e}")))?;
    std::fs::write(&tmp, text).map_err(|e| Error::Solver(format!("cache write: {e}")))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::Solver(format!("cache rename: {e}")))?;
    Ok(())
}
