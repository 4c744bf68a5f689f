//! Monte-Carlo verification: fixed-step fourth-order integration of the
//! switched saturated network along sampled mode trajectories, with
//! energy-budgeted disturbances, and empirical checks of the certified
//! containment and gain properties.
//!
//! The integrator never steps across a mode jump or a disturbance cutoff:
//! integration is segmented exactly at those times, with the step shortened
//! inside each segment to keep a fixed grid. Saturation is evaluated inside
//! every stage, not frozen per step.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::disagreement::{from_disagreement, pivot_selector, saturate, SaturationSpec};
use crate::error::{Error, Result};
use crate::markov::{sample_trajectory, ModeTrajectory};
use crate::regions::{boundary_sample, contains, quadratic_levels, EllipsoidFamily};
use crate::sysmodel::{GainMatrix, NetworkModel};

/// State magnitude beyond which a realization is flagged divergent and
/// truncated instead of crashing.
pub const DIVERGENCE_LIMIT: f64 = 1e9;

#[derive(Debug, Clone, PartialEq)]
pub enum DisturbanceKind {
    Zero,
    /// Constant vector on each target agent until the cutoff.
    Constant(DVector<f64>),
    /// Linear ramp `slope * t` on each target agent until the cutoff.
    Ramp(DVector<f64>),
    /// Piecewise-linear samples (time, value) on each target agent.
    Samples {
        times: Vec<f64>,
        values: Vec<DVector<f64>>,
    },
}

/// An energy-budgeted disturbance: the cutoff time is chosen so the total
/// injected energy (summed over targets) stays within the declared budget.
#[derive(Debug, Clone, PartialEq)]
pub struct DisturbanceSpec {
    pub kind: DisturbanceKind,
    /// 0-based indices of disturbed agents.
    pub targets: Vec<usize>,
    pub t_off: f64,
    /// Closed-form total energy injected over `[0, t_off]`.
    pub total_energy: f64,
}

impl DisturbanceSpec {
    pub fn zero() -> Self {
        Self {
            kind: DisturbanceKind::Zero,
            targets: Vec::new(),
            t_off: f64::INFINITY,
            total_energy: 0.0,
        }
    }

    /// Per-target disturbance value at time `t`.
    fn eval_target(&self, t: f64, q: usize) -> DVector<f64> {
        if t >= self.t_off {
            return DVector::zeros(q);
        }
        self.eval_target_raw(t, q)
    }

    /// Value without the cutoff gate; integration segments never straddle the
    /// cutoff, so the active window is decided once per segment and stage
    /// evaluations at the segment end see the one-sided limit.
    fn eval_target_raw(&self, t: f64, q: usize) -> DVector<f64> {
        match &self.kind {
            DisturbanceKind::Zero => DVector::zeros(q),
            DisturbanceKind::Constant(c) => c.clone(),
            DisturbanceKind::Ramp(v) => v * t,
            DisturbanceKind::Samples { times, values } => {
                if times.is_empty() || t < times[0] {
                    return DVector::zeros(q);
                }
                match times.iter().position(|&tk| t < tk) {
                    Some(0) => DVector::zeros(q),
                    Some(k) => {
                        let (t0, t1) = (times[k - 1], times[k]);
                        let alpha = (t - t0) / (t1 - t0);
                        &values[k - 1] * (1.0 - alpha) + &values[k] * alpha
                    }
                    None => values.last().expect("non-empty samples").clone(),
                }
            }
        }
    }

    /// Stacked disturbance over all agents at time `t`.
    pub fn eval_stacked(&self, t: f64, n_agents: usize, q: usize) -> DVector<f64> {
        let mut w = DVector::zeros(n_agents * q);
        if matches!(self.kind, DisturbanceKind::Zero) {
            return w;
        }
        let value = self.eval_target(t, q);
        for &agent in &self.targets {
            w.rows_mut(agent * q, q).copy_from(&value);
        }
        w
    }

    /// Stacked disturbance without the cutoff gate (see `eval_target_raw`).
    fn eval_stacked_raw(&self, t: f64, n_agents: usize, q: usize) -> DVector<f64> {
        let mut w = DVector::zeros(n_agents * q);
        if matches!(self.kind, DisturbanceKind::Zero) {
            return w;
        }
        let value = self.eval_target_raw(t, q);
        for &agent in &self.targets {
            w.rows_mut(agent * q, q).copy_from(&value);
        }
        w
    }

    /// Segment boundaries this disturbance introduces inside `[0, horizon]`.
    fn breakpoints(&self, horizon: f64) -> Vec<f64> {
        let mut out = Vec::new();
        if self.t_off.is_finite() && self.t_off > 0.0 && self.t_off < horizon {
            out.push(self.t_off);
        }
        if let DisturbanceKind::Samples { times, .. } = &self.kind {
            out.extend(times.iter().copied().filter(|&t| t > 0.0 && t < horizon));
        }
        out
    }
}

/// Builds a disturbance whose total energy over `[0, t_off]` equals
/// `budget`: for a constant `c` on one agent the cutoff is
/// `budget / |c|^2`, for a ramp with slope `v` it is
/// `(3 budget / |v|^2)^(1/3)` (scaled by the number of targets).
pub fn make_disturbance(
    kind: DisturbanceKind,
    targets: Vec<usize>,
    budget: f64,
) -> Result<DisturbanceSpec> {
    if matches!(kind, DisturbanceKind::Zero) {
        return Ok(DisturbanceSpec::zero());
    }
    if targets.is_empty() {
        return Err(Error::structure("disturbance needs at least one target agent"));
    }
    if !(budget > 0.0) {
        return Err(Error::structure(format!(
            "energy budget must be positive, got {budget}"
        )));
    }
    let k = targets.len() as f64;
    let (t_off, total_energy) = match &kind {
        DisturbanceKind::Zero => unreachable!(),
        DisturbanceKind::Constant(c) => {
            let rate = k * c.norm_squared();
            if rate == 0.0 {
                (f64::INFINITY, 0.0)
            } else {
                (budget / rate, budget)
            }
        }
        DisturbanceKind::Ramp(v) => {
            let coef = k * v.norm_squared() / 3.0;
            if coef == 0.0 {
                (f64::INFINITY, 0.0)
            } else {
                ((budget / coef).cbrt(), budget)
            }
        }
        DisturbanceKind::Samples { times, values } => {
            if times.len() != values.len() || times.len() < 2 {
                return Err(Error::structure(
                    "sampled disturbance needs matching times and values, at least two",
                ));
            }
            if times.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::structure("sample times must be strictly increasing"));
            }
            // Trapezoid quadrature of |w|^2 for the piecewise-linear signal.
            let mut energy = 0.0;
            for i in 1..times.len() {
                let dt = times[i] - times[i - 1];
                energy += 0.5 * dt * (values[i - 1].norm_squared() + values[i].norm_squared());
            }
            energy *= k;
            if energy > budget * (1.0 + 1e-9) {
                return Err(Error::structure(format!(
                    "sampled disturbance energy {energy} exceeds the budget {budget}"
                )));
            }
            (*times.last().unwrap(), energy)
        }
    };
    Ok(DisturbanceSpec {
        kind,
        targets,
        t_off,
        total_energy,
    })
}

/// Fixed-step integration grid.
#[derive(Debug, Clone, Copy)]
pub struct IntegrationGrid {
    pub step: f64,
    pub horizon: f64,
}

impl IntegrationGrid {
    pub fn new(horizon: f64) -> Self {
        Self {
            step: 1e-3,
            horizon,
        }
    }

    pub fn with_step(horizon: f64, step: f64) -> Self {
        Self { step, horizon }
    }
}

/// One integrated path of the closed-loop network.
#[derive(Debug, Clone)]
pub struct Realization {
    pub times: Vec<f64>,
    /// Active mode per stored sample (0-based).
    pub modes: Vec<usize>,
    /// Stacked agent states.
    pub states: Vec<DVector<f64>>,
    /// Disagreement states (integrated independently in reduced coordinates).
    pub disagreements: Vec<DVector<f64>>,
    /// Stacked raw inputs.
    pub inputs: Vec<DVector<f64>>,
    pub saturated_inputs: Vec<DVector<f64>>,
    pub disturbances: Vec<DVector<f64>>,
    /// Running disturbance energy at each sample; nondecreasing.
    pub energy: Vec<f64>,
    /// Total disturbance energy at the end of the run.
    pub input_energy: f64,
    /// Integral of the squared output (when an output map was given).
    pub output_energy: f64,
    /// Max over samples of the reduced/stacked coordinate mismatch.
    pub max_consistency_error: f64,
    pub diverged: bool,
    pub mode_trajectory: ModeTrajectory,
}

impl Realization {
    /// Columnar export (`time, mode, x.., u.., sat_u.., w..`), subsampled by
    /// `stride`; the final sample is always included. Modes are 1-based.
    pub fn to_csv(&self, stride: usize) -> String {
        let stride = stride.max(1);
        let nx = self.states[0].len();
        let nu = self.inputs[0].len();
        let nw = self.disturbances[0].len();
        let mut s = String::from("time,mode");
        for i in 0..nx {
            s.push_str(&format!(",x{}", i + 1));
        }
        for i in 0..nu {
            s.push_str(&format!(",u{}", i + 1));
        }
        for i in 0..nu {
            s.push_str(&format!(",sat_u{}", i + 1));
        }
        for i in 0..nw {
            s.push_str(&format!(",w{}", i + 1));
        }
        s.push('\n');
        let last = self.times.len() - 1;
        let mut rows: Vec<usize> = (0..self.times.len()).step_by(stride).collect();
        if *rows.last().unwrap() != last {
            rows.push(last);
        }
        for k in rows {
            s.push_str(&format!("{},{}", self.times[k], self.modes[k] + 1));
            for v in self.states[k].iter() {
                s.push_str(&format!(",{v}"));
            }
            for v in self.inputs[k].iter() {
                s.push_str(&format!(",{v}"));
            }
            for v in self.saturated_inputs[k].iter() {
                s.push_str(&format!(",{v}"));
            }
            for v in self.disturbances[k].iter() {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

struct StackedMatrices {
    a_full: DMatrix<f64>,
    b_full: DMatrix<f64>,
    d_full: DMatrix<f64>,
    /// Per mode: stacked input map `L_l x K`.
    k_full: Vec<DMatrix<f64>>,
    a_red: DMatrix<f64>,
    b_red: DMatrix<f64>,
    d_red: DMatrix<f64>,
    /// Per mode: reduced input map `(L_l W) x K`.
    k_red: Vec<DMatrix<f64>>,
    u_kron_eye: DMatrix<f64>,
}

fn stacked_matrices(model: &NetworkModel, gain: &GainMatrix) -> StackedMatrices {
    let n = model.n_agents;
    let eye_n = DMatrix::<f64>::identity(n, n);
    let eye_n1 = DMatrix::<f64>::identity(n - 1, n - 1);
    let eye_m = DMatrix::<f64>::identity(model.dynamics.state_dim(), model.dynamics.state_dim());
    let u = pivot_selector(n);
    let w = crate::disagreement::lift_selector(n);
    StackedMatrices {
        a_full: eye_n.kronecker(&model.dynamics.a),
        b_full: eye_n.kronecker(&model.dynamics.b),
        d_full: eye_n.kronecker(&model.dynamics.d),
        k_full: model
            .modes
            .iter()
            .map(|md| md.laplacian.kronecker(&gain.k))
            .collect(),
        a_red: eye_n1.kronecker(&model.dynamics.a),
        b_red: u.kronecker(&model.dynamics.b),
        d_red: u.kronecker(&model.dynamics.d),
        k_red: model
            .modes
            .iter()
            .map(|md| (&md.laplacian * &w).kronecker(&gain.k))
            .collect(),
        u_kron_eye: u.kronecker(&eye_m),
    }
}

/// Integrates the stacked saturated dynamics and, simultaneously, the reduced
/// disagreement dynamics, recording every step. The two representations are
/// compared at every sample (`max_consistency_error`).
pub fn integrate(
    model: &NetworkModel,
    gain: &GainMatrix,
    trajectory: &ModeTrajectory,
    disturbance: &DisturbanceSpec,
    x0: &DVector<f64>,
    grid: &IntegrationGrid,
    output: Option<&DMatrix<f64>>,
) -> Result<Realization> {
    let n = model.n_agents;
    let m = model.dynamics.state_dim();
    let p = model.dynamics.input_dim();
    let q = model.dynamics.disturbance_dim();
    let n_z = m * (n - 1);
    if x0.len() != n * m {
        return Err(Error::dimension(format!(
            "initial state has {} entries, expected {}",
            x0.len(),
            n * m
        )));
    }
    if !(grid.step > 0.0) || !(grid.horizon > 0.0) {
        return Err(Error::structure("step and horizon must be positive"));
    }
    if let Some(c) = output {
        if c.ncols() != n_z {
            return Err(Error::dimension(format!(
                "output map has {} columns, expected {n_z}",
                c.ncols()
            )));
        }
    }
    for &agent in &disturbance.targets {
        if agent >= n {
            return Err(Error::structure(format!(
                "disturbance target agent {} out of range (N = {n})",
                agent + 1
            )));
        }
    }

    let mats = stacked_matrices(model, gain);
    let sat = SaturationSpec::new(model.dynamics.u_max, n * p)?;

    // Segment boundaries: mode jumps, disturbance breakpoints, horizon.
    let mut cuts: Vec<f64> = trajectory
        .jump_times
        .iter()
        .copied()
        .filter(|&t| t < grid.horizon)
        .collect();
    cuts.extend(disturbance.breakpoints(grid.horizon));
    cuts.push(grid.horizon);
    cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-15);

    let steps_estimate = (grid.horizon / grid.step).ceil() as usize + cuts.len() + 2;
    let mut rec = Realization {
        times: Vec::with_capacity(steps_estimate),
        modes: Vec::with_capacity(steps_estimate),
        states: Vec::with_capacity(steps_estimate),
        disagreements: Vec::with_capacity(steps_estimate),
        inputs: Vec::with_capacity(steps_estimate),
        saturated_inputs: Vec::with_capacity(steps_estimate),
        disturbances: Vec::with_capacity(steps_estimate),
        energy: Vec::with_capacity(steps_estimate),
        input_energy: 0.0,
        output_energy: 0.0,
        max_consistency_error: 0.0,
        diverged: false,
        mode_trajectory: trajectory.clone(),
    };

    let mut x = x0.clone();
    let mut z = &mats.u_kron_eye * &x;
    let mut e_w = 0.0;
    let mut e_y = 0.0;

    let mut record = |rec: &mut Realization,
                      t: f64,
                      mode: usize,
                      x: &DVector<f64>,
                      z: &DVector<f64>,
                      e_w: f64| {
        let u_raw = &mats.k_full[mode] * x;
        let sat_u = saturate(&u_raw, &sat);
        let w = disturbance.eval_stacked(t, n, q);
        let err = (z - &mats.u_kron_eye * x).amax();
        rec.max_consistency_error = rec.max_consistency_error.max(err);
        rec.times.push(t);
        rec.modes.push(mode);
        rec.states.push(x.clone());
        rec.disagreements.push(z.clone());
        rec.inputs.push(u_raw);
        rec.saturated_inputs.push(sat_u);
        rec.disturbances.push(w);
        rec.energy.push(e_w);
    };

    let mut t = 0.0;
    let mut mode = trajectory.mode_at(0.0);
    record(&mut rec, t, mode, &x, &z, e_w);

    'segments: for &cut in &cuts {
        if cut <= t {
            continue;
        }
        mode = trajectory.mode_at(0.5 * (t + cut));
        let active = 0.5 * (t + cut) < disturbance.t_off;
        let span = cut - t;
        let n_steps = (span / grid.step).ceil().max(1.0) as usize;
        let h = span / n_steps as f64;
        let seg_start = t;
        for i in 0..n_steps {
            let t_step = seg_start + i as f64 * h;
            // One RK4 step of the coupled (x, z, energy) system; saturation
            // is re-evaluated inside every stage.
            let deriv = |tau: f64, xs: &DVector<f64>, zs: &DVector<f64>| {
                let w = if active {
                    disturbance.eval_stacked_raw(tau, n, q)
                } else {
                    DVector::zeros(n * q)
                };
                let u_raw = &mats.k_full[mode] * xs;
                let dx = &mats.a_full * xs - &mats.b_full * saturate(&u_raw, &sat)
                    + &mats.d_full * &w;
                let uz = &mats.k_red[mode] * zs;
                let dz =
                    &mats.a_red * zs - &mats.b_red * saturate(&uz, &sat) + &mats.d_red * &w;
                let de_w = w.norm_squared();
                let de_y = output.map(|c| (c * zs).norm_squared()).unwrap_or(0.0);
                (dx, dz, de_w, de_y)
            };
            let (k1x, k1z, k1w, k1y) = deriv(t_step, &x, &z);
            let (k2x, k2z, k2w, k2y) = deriv(
                t_step + 0.5 * h,
                &(&x + &k1x * (0.5 * h)),
                &(&z + &k1z * (0.5 * h)),
            );
            let (k3x, k3z, k3w, k3y) = deriv(
                t_step + 0.5 * h,
                &(&x + &k2x * (0.5 * h)),
                &(&z + &k2z * (0.5 * h)),
            );
            let (k4x, k4z, k4w, k4y) = deriv(t_step + h, &(&x + &k3x * h), &(&z + &k3z * h));
            x += (k1x + k2x * 2.0 + k3x * 2.0 + k4x) * (h / 6.0);
            z += (k1z + k2z * 2.0 + k3z * 2.0 + k4z) * (h / 6.0);
            e_w += (k1w + 2.0 * k2w + 2.0 * k3w + k4w) * (h / 6.0);
            e_y += (k1y + 2.0 * k2y + 2.0 * k3y + k4y) * (h / 6.0);
            t = if i + 1 == n_steps {
                cut
            } else {
                seg_start + (i + 1) as f64 * h
            };
            if !x.iter().all(|v| v.is_finite()) || x.amax() > DIVERGENCE_LIMIT {
                rec.diverged = true;
                record(&mut rec, t, mode, &x, &z, e_w);
                break 'segments;
            }
            record(&mut rec, t, mode, &x, &z, e_w);
        }
        t = cut;
    }

    rec.input_energy = e_w;
    rec.output_energy = e_y;
    Ok(rec)
}

/// Outcome of a batch containment check against a certificate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub realizations: usize,
    /// Realizations with at least one sample outside the outer region.
    pub violating_realizations: usize,
    /// Fraction of all time samples inside the outer region.
    pub containment_fraction: f64,
    /// Largest per-mode quadratic level observed anywhere, relative to the
    /// outer level (1.0 sits exactly on the boundary).
    pub max_relative_level: f64,
    pub outer_level: f64,
    /// Mean squared disagreement magnitude at t = 0 and at the horizon.
    pub mean_square_initial: f64,
    pub mean_square_final: f64,
    /// Realizations whose injected energy exceeded the declared budget.
    pub energy_breaches: usize,
    pub declared_budget: f64,
    pub diverged: usize,
    pub max_consistency_error: f64,
    pub seed: u64,
}

/// Samples initial disagreements on the boundary of the inner region,
/// integrates under the given disturbance, and reports containment in the
/// outer region `R(z, outer_level)` along with mean-square decay statistics.
///
/// Initial points are drawn per mode shell and kept when they lie inside
/// every other ellipsoid (boundary of the intersection); if a shell yields
/// no such point, a random direction is rescaled onto the intersection
/// boundary instead.
#[allow(clippy::too_many_arguments)]
pub fn verify_invariance(
    model: &NetworkModel,
    gain: &GainMatrix,
    inner: &EllipsoidFamily,
    outer_level: f64,
    disturbance: &DisturbanceSpec,
    declared_budget: f64,
    count: usize,
    seed: u64,
    grid: &IntegrationGrid,
) -> Result<InvarianceReport> {
    let n_z = model.dynamics.state_dim() * (model.n_agents - 1);
    if inner.dim() != n_z {
        return Err(Error::dimension(format!(
            "certificate family lives in dimension {}, expected {n_z}",
            inner.dim()
        )));
    }
    let generator = model.mixed_generator(None)?;
    let outer = inner.at_level(outer_level)?;

    let runs: Vec<(usize, u64)> = (0..count)
        .map(|i| (i, seed.wrapping_add(1_000_003u64.wrapping_mul(i as u64))))
        .collect();
    let results: Result<Vec<_>> = runs
        .par_iter()
        .map(|&(i, run_seed)| {
            let shell = i % inner.n_modes();
            let z0 = boundary_point_of_intersection(inner, shell, run_seed)?;
            let x1 = DVector::zeros(model.dynamics.state_dim());
            let x0 = from_disagreement(&z0, &x1)?;
            let traj = sample_trajectory(
                &generator,
                &model.initial_distribution,
                grid.horizon,
                run_seed,
            )?;
            let real = integrate(model, gain, &traj, disturbance, &x0, grid, None)?;
            Ok(containment_stats(&real, &outer))
        })
        .collect();
    aggregate_invariance(results?, outer_level, declared_budget, seed)
}

/// Same check but starting from exact consensus (`z(0) = 0`).
#[allow(clippy::too_many_arguments)]
pub fn verify_invariance_from_origin(
    model: &NetworkModel,
    gain: &GainMatrix,
    family: &EllipsoidFamily,
    outer_level: f64,
    disturbance: &DisturbanceSpec,
    declared_budget: f64,
    count: usize,
    seed: u64,
    grid: &IntegrationGrid,
) -> Result<InvarianceReport> {
    let generator = model.mixed_generator(None)?;
    let outer = family.at_level(outer_level)?;
    let n = model.n_agents;
    let m = model.dynamics.state_dim();
    let runs: Vec<u64> = (0..count)
        .map(|i| seed.wrapping_add(1_000_003u64.wrapping_mul(i as u64)))
        .collect();
    let results: Result<Vec<_>> = runs
        .par_iter()
        .map(|&run_seed| {
            let x0 = DVector::zeros(n * m);
            let traj = sample_trajectory(
                &generator,
                &model.initial_distribution,
                grid.horizon,
                run_seed,
            )?;
            let real = integrate(model, gain, &traj, disturbance, &x0, grid, None)?;
            Ok(containment_stats(&real, &outer))
        })
        .collect();
    aggregate_invariance(results?, outer_level, declared_budget, seed)
}

struct RunStats {
    violated: bool,
    samples: usize,
    contained_samples: usize,
    max_relative_level: f64,
    initial_sq: f64,
    final_sq: f64,
    input_energy: f64,
    diverged: bool,
    consistency: f64,
}

fn containment_stats(real: &Realization, outer: &EllipsoidFamily) -> RunStats {
    let mut contained = 0usize;
    let mut max_rel: f64 = 0.0;
    for z in &real.disagreements {
        let levels = quadratic_levels(outer, z).expect("dimension checked");
        let worst = levels.into_iter().fold(0.0f64, f64::max);
        max_rel = max_rel.max(worst / outer.level);
        if worst <= outer.level * (1.0 + 1e-9) + 1e-9 {
            contained += 1;
        }
    }
    RunStats {
        violated: contained != real.disagreements.len(),
        samples: real.disagreements.len(),
        contained_samples: contained,
        max_relative_level: max_rel,
        initial_sq: real.disagreements[0].norm_squared(),
        final_sq: real.disagreements.last().unwrap().norm_squared(),
        input_energy: real.input_energy,
        diverged: real.diverged,
        consistency: real.max_consistency_error,
    }
}

fn aggregate_invariance(
    stats: Vec<RunStats>,
    outer_level: f64,
    declared_budget: f64,
    seed: u64,
) -> Result<InvarianceReport> {
    let realizations = stats.len();
    let total_samples: usize = stats.iter().map(|s| s.samples).sum();
    let contained: usize = stats.iter().map(|s| s.contained_samples).sum();
    Ok(InvarianceReport {
        realizations,
        violating_realizations: stats.iter().filter(|s| s.violated).count(),
        containment_fraction: contained as f64 / total_samples as f64,
        max_relative_level: stats
            .iter()
            .map(|s| s.max_relative_level)
            .fold(0.0, f64::max),
        outer_level,
        mean_square_initial: stats.iter().map(|s| s.initial_sq).sum::<f64>()
            / realizations as f64,
        mean_square_final: stats.iter().map(|s| s.final_sq).sum::<f64>() / realizations as f64,
        energy_breaches: stats
            .iter()
            .filter(|s| s.input_energy > declared_budget * (1.0 + 1e-6) + 1e-9)
            .count(),
        declared_budget,
        diverged: stats.iter().filter(|s| s.diverged).count(),
        max_consistency_error: stats.iter().map(|s| s.consistency).fold(0.0, f64::max),
        seed,
    })
}

/// A boundary point of the intersection region lying on the given mode's
/// shell, or (if that shell does not touch the intersection boundary after
/// repeated tries) a random direction scaled exactly onto the boundary.
fn boundary_point_of_intersection(
    family: &EllipsoidFamily,
    shell: usize,
    seed: u64,
) -> Result<DVector<f64>> {
    for attempt in 0..64u64 {
        let pts = boundary_sample(
            &family.shapes[shell],
            family.level,
            8,
            seed.wrapping_add(attempt.wrapping_mul(7_919)),
        )?;
        for z in pts {
            if contains(family, &z)? {
                return Ok(z);
            }
        }
    }
    let dir = boundary_sample(
        &DMatrix::identity(family.dim(), family.dim()),
        1.0,
        1,
        seed ^ 0x5bd1_e995,
    )?
    .pop()
    .expect("one sample");
    let worst = quadratic_levels(family, &dir)?
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(dir * (family.level / worst).sqrt())
}

/// Empirical disturbance-to-output energy measurement from consensus starts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct L2Measurement {
    pub realizations: usize,
    pub mean_output_energy: f64,
    pub std_error_output_energy: f64,
    pub mean_input_energy: f64,
    pub max_output_energy: f64,
    pub seed: u64,
}

/// Integrates from the origin under the disturbance and estimates the mean
/// output energy `E(int |C z|^2)`.
pub fn measure_l2(
    model: &NetworkModel,
    gain: &GainMatrix,
    c: &DMatrix<f64>,
    disturbance: &DisturbanceSpec,
    count: usize,
    seed: u64,
    grid: &IntegrationGrid,
) -> Result<L2Measurement> {
    let generator = model.mixed_generator(None)?;
    let n = model.n_agents;
    let m = model.dynamics.state_dim();
    let runs: Vec<u64> = (0..count)
        .map(|i| seed.wrapping_add(1_000_003u64.wrapping_mul(i as u64)))
        .collect();
    let energies: Result<Vec<(f64, f64)>> = runs
        .par_iter()
        .map(|&run_seed| {
            let x0 = DVector::zeros(n * m);
            let traj = sample_trajectory(
                &generator,
                &model.initial_distribution,
                grid.horizon,
                run_seed,
            )?;
            let real = integrate(model, gain, &traj, disturbance, &x0, grid, Some(c))?;
            Ok((real.output_energy, real.input_energy))
        })
        .collect();
    let energies = energies?;
    let nr = energies.len() as f64;
    let mean_out = energies.iter().map(|e| e.0).sum::<f64>() / nr;
    let var = energies
        .iter()
        .map(|e| (e.0 - mean_out).powi(2))
        .sum::<f64>()
        / (nr - 1.0).max(1.0);
    Ok(L2Measurement {
        realizations: energies.len(),
        mean_output_energy: mean_out,
        std_error_output_energy: (var / nr).sqrt(),
        mean_input_energy: energies.iter().map(|e| e.1).sum::<f64>() / nr,
        max_output_energy: energies.iter().map(|e| e.0).fold(0.0, f64::max),
        seed,
    })
}
