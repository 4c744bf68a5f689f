//! Certificate assemblers.
//!
//! Every assembler replicates its main inequality over the generator-polytope
//! vertices (robustness is certified at the vertices) and emits one sector
//! inequality per mode and stacked-input row. Shape variables carry a small
//! definiteness margin ([`super::SPD_MARGIN`]) so solver output verifies
//! robustly.

use nalgebra::DMatrix;

use crate::disagreement::{build_disagreement_system, DisagreementSystem};
use crate::error::{Error, Result};
use crate::markov::GeneratorPolytope;
use crate::sysmodel::NetworkModel;

use super::{LmiProblem, MatExpr, Sense, SymBlock, VarHandle, SPD_MARGIN};

/// Scalars fixing one analysis instance. `gamma` must lie in (0, 1); `rho`
/// and `eta` are positive. The caller picks the regime relation between them
/// (e.g. `gamma = 1/(1 + N rho eta)` for region-to-region containment,
/// `gamma = 1/(N rho eta)` for origin-start containment). `eta` does not
/// enter the inequalities directly; it is recorded so certificates can report
/// their containment levels.
#[derive(Debug, Clone, Copy)]
pub struct Theorem1Params {
    pub rho: f64,
    pub eta: f64,
    pub gamma: f64,
}

impl Theorem1Params {
    fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::structure(format!(
                "gamma must lie in (0, 1), got {}",
                self.gamma
            )));
        }
        if !(self.rho > 0.0) || !(self.eta > 0.0) {
            return Err(Error::structure(format!(
                "rho and eta must be positive, got rho={}, eta={}",
                self.rho, self.eta
            )));
        }
        Ok(())
    }
}

fn check_compatibility(sys: &DisagreementSystem, polytope: &GeneratorPolytope) -> Result<()> {
    if polytope.n_modes() != sys.n_modes() {
        return Err(Error::dimension(format!(
            "polytope over {} modes, system has {}",
            polytope.n_modes(),
            sys.n_modes()
        )));
    }
    Ok(())
}

fn sqrt_rate(rate: f64, vertex: usize, row: usize) -> Result<f64> {
    if rate < -1e-9 {
        return Err(Error::Generator {
            vertex,
            row,
            message: format!("negative off-diagonal rate {rate}"),
        });
    }
    Ok(rate.max(0.0).sqrt())
}

/// Shared variable set of the analysis problems.
struct AnalysisVars {
    y: Vec<VarHandle>,
    x: Vec<VarHandle>,
    s: VarHandle,
}

fn declare_analysis_vars(prob: &mut LmiProblem, sys: &DisagreementSystem) -> AnalysisVars {
    let s_modes = sys.n_modes();
    let y = (0..s_modes)
        .map(|l| prob.add_symmetric(format!("Y{}", l + 1), sys.n_z()))
        .collect::<Vec<_>>();
    let x = (0..s_modes)
        .map(|l| prob.add_rectangular(format!("X{}", l + 1), sys.n_u(), sys.n_z()))
        .collect::<Vec<_>>();
    // The sector multiplier is a positive diagonal matrix, so its inverse S
    // is declared diagonal; only the diagonal reaches the solver.
    let s = prob.add_diagonal("S", sys.n_u());
    for &yl in &y {
        prob.require_spd(yl, SPD_MARGIN);
    }
    prob.require_diag_lower(s, SPD_MARGIN);
    AnalysisVars { y, x, s }
}

/// Appends the mode-coupling blocks of a main inequality: for every other
/// mode `j`, an off-diagonal row `sqrt(rate_lj) * (base Y)` and a diagonal
/// `-Y_j`. Zero rates keep their (zero) block so the shape never varies.
fn set_coupling_blocks(
    blk: &mut SymBlock,
    first_block: usize,
    mode: usize,
    vertex_idx: usize,
    vertex: &DMatrix<f64>,
    y_row: &dyn Fn() -> MatExpr,
    y_diag: &dyn Fn(usize) -> MatExpr,
    n_modes: usize,
) -> Result<()> {
    let mut k = 0;
    for j in 0..n_modes {
        if j == mode {
            continue;
        }
        let root = sqrt_rate(vertex[(mode, j)], vertex_idx, mode)?;
        let idx = first_block + k;
        blk.set(idx, 0, y_row().scaled(root));
        blk.set(idx, idx, -y_diag(j));
        k += 1;
    }
    Ok(())
}

/// Emits one sector inequality `[[top, *], [row_q, corner]] >= 0` per stacked
/// input row.
fn add_sector_rows(
    prob: &mut LmiProblem,
    mode: usize,
    n_u: usize,
    n_z: usize,
    corner: f64,
    top: impl Fn() -> MatExpr,
    row: impl Fn(usize) -> MatExpr,
) {
    for q in 0..n_u {
        let mut blk = SymBlock::new(vec![n_z, 1]);
        blk.set(0, 0, top());
        blk.set(1, 0, row(q));
        blk.set(1, 1, MatExpr::constant(DMatrix::from_element(1, 1, corner)));
        prob.constrain(
            format!("sector[mode={},row={}]", mode + 1, q + 1),
            blk.flatten(),
            Sense::PosSemidef,
        );
    }
}

fn row_selector(n: usize, q: usize) -> DMatrix<f64> {
    let mut sel = DMatrix::zeros(1, n);
    sel[(0, q)] = 1.0;
    sel
}

/// Analysis inequality for a fixed gain: per mode `l` and polytope vertex,
/// the block matrix
///
/// ```text
/// [ He(drift_l Y_l) + rate_ll Y_l    *       *                 *     ]
/// [ S (U x B)' - X_l                -2 S     *                 *     ]
/// [ sqrt(rho) (U x D)'               0      -((1-g)/g) I       *     ]
/// [ sqrt(rate_lj) Y_l rows           0       0           -diag(Y_j) ]
/// ```
///
/// is required negative semidefinite, plus one sector inequality per mode and
/// input row with corner `u_max^2 gamma` and row `(L_l W x K)_q Y_l + X_l_q`
/// (the dead-zone set inclusion, with the auxiliary signal entering through
/// the sum exactly as in `check_sector_condition`). The disturbance diagonal
/// enters negated; the inequality is vacuous otherwise.
pub fn assemble_theorem1(
    sys: &DisagreementSystem,
    polytope: &GeneratorPolytope,
    params: &Theorem1Params,
) -> Result<LmiProblem> {
    params.validate()?;
    check_compatibility(sys, polytope)?;
    let (n_z, n_u, n_w, s_modes) = (sys.n_z(), sys.n_u(), sys.n_w(), sys.n_modes());

    let mut prob = LmiProblem::new("analysis (fixed gain)");
    prob.meta.insert("rho".into(), params.rho);
    prob.meta.insert("eta".into(), params.eta);
    prob.meta.insert("gamma".into(), params.gamma);
    let vars = declare_analysis_vars(&mut prob, sys);

    let gamma_block = DMatrix::identity(n_w, n_w) * (-(1.0 - params.gamma) / params.gamma);
    let sqrt_rho_d = sys.disturbance_map.transpose() * params.rho.sqrt();

    for l in 0..s_modes {
        for (i, vertex) in polytope.vertices().iter().enumerate() {
            let mut dims = vec![n_z, n_u, n_w];
            dims.extend(std::iter::repeat(n_z).take(s_modes - 1));
            let mut blk = SymBlock::new(dims);
            blk.set(
                0,
                0,
                MatExpr::var(vars.y[l]).left_mul(&sys.drift[l]).he()
                    + MatExpr::var(vars.y[l]).scaled(vertex[(l, l)]),
            );
            blk.set(
                1,
                0,
                MatExpr::var(vars.s).right_mul(&sys.sat_input_map.transpose())
                    - MatExpr::var(vars.x[l]),
            );
            blk.set(1, 1, MatExpr::var(vars.s).scaled(-2.0));
            blk.set(2, 0, MatExpr::constant(sqrt_rho_d.clone()));
            blk.set(2, 2, MatExpr::constant(gamma_block.clone()));
            set_coupling_blocks(
                &mut blk,
                3,
                l,
                i,
                vertex,
                &|| MatExpr::var(vars.y[l]),
                &|j| MatExpr::var(vars.y[j]),
                s_modes,
            )?;
            prob.constrain(
                format!("main[mode={},vertex={}]", l + 1, i + 1),
                blk.flatten(),
                Sense::NegSemidef,
            );
        }
        let corner = sys.u_max * sys.u_max * params.gamma;
        add_sector_rows(
            &mut prob,
            l,
            n_u,
            n_z,
            corner,
            || MatExpr::var(vars.y[l]),
            |q| {
                let gain_row = sys.feedback_rows[l].rows(q, 1).into_owned();
                MatExpr::var(vars.y[l]).left_mul(&gain_row)
                    + MatExpr::var(vars.x[l]).left_mul(&row_selector(n_u, q))
            },
        );
    }
    Ok(prob)
}

/// Origin-start variant: the disturbance row is absorbed into the corner
/// (`+ (U x D)(U x D)'`), the energy weight is fixed at one, and `gamma` is
/// interpreted as `1/(N rho)`. Sector inequalities keep the `Y_l` form.
pub fn assemble_origin_variant(
    sys: &DisagreementSystem,
    polytope: &GeneratorPolytope,
    gamma: f64,
) -> Result<LmiProblem> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::structure(format!(
            "gamma must lie in (0, 1), got {gamma}"
        )));
    }
    check_compatibility(sys, polytope)?;
    let (n_z, n_u, s_modes) = (sys.n_z(), sys.n_u(), sys.n_modes());

    let mut prob = LmiProblem::new("origin-start disturbance tolerance");
    prob.meta.insert("gamma".into(), gamma);
    prob.meta.insert("eta".into(), 1.0);
    prob.meta
        .insert("n_rho".into(), 1.0 / gamma);
    let vars = declare_analysis_vars(&mut prob, sys);

    let dd = &sys.disturbance_map * sys.disturbance_map.transpose();

    for l in 0..s_modes {
        for (i, vertex) in polytope.vertices().iter().enumerate() {
            let mut dims = vec![n_z, n_u];
            dims.extend(std::iter::repeat(n_z).take(s_modes - 1));
            let mut blk = SymBlock::new(dims);
            blk.set(
                0,
                0,
                MatExpr::var(vars.y[l]).left_mul(&sys.drift[l]).he()
                    + MatExpr::var(vars.y[l]).scaled(vertex[(l, l)])
                    + MatExpr::constant(dd.clone()),
            );
            blk.set(
                1,
                0,
                MatExpr::var(vars.s).right_mul(&sys.sat_input_map.transpose())
                    - MatExpr::var(vars.x[l]),
            );
            blk.set(1, 1, MatExpr::var(vars.s).scaled(-2.0));
            set_coupling_blocks(
                &mut blk,
                2,
                l,
                i,
                vertex,
                &|| MatExpr::var(vars.y[l]),
                &|j| MatExpr::var(vars.y[j]),
                s_modes,
            )?;
            prob.constrain(
                format!("main[mode={},vertex={}]", l + 1, i + 1),
                blk.flatten(),
                Sense::NegSemidef,
            );
        }
        let corner = sys.u_max * sys.u_max * gamma;
        add_sector_rows(
            &mut prob,
            l,
            n_u,
            n_z,
            corner,
            || MatExpr::var(vars.y[l]),
            |q| {
                let gain_row = sys.feedback_rows[l].rows(q, 1).into_owned();
                MatExpr::var(vars.y[l]).left_mul(&gain_row)
                    + MatExpr::var(vars.x[l]).left_mul(&row_selector(n_u, q))
            },
        );
    }
    Ok(prob)
}

/// Disturbance-to-output gain certificate: the origin-variant corner plus an
/// output row `C Y_l` against `-varrho^2 I`, with `gamma = 1/(N rho)`.
///
/// The sector inequality here uses the raw gain row `(L_l W x K)_q - X_l_q`
/// with no `Y_l` factor, exactly as this certificate family is stated; the
/// asymmetry with [`assemble_theorem1`] is kept rather than harmonized, and
/// it makes these sector rows non-binding (a free `X_l` row can absorb the
/// gain row), so the gain estimate leans on the multiplier block alone.
pub fn assemble_l2(
    sys: &DisagreementSystem,
    polytope: &GeneratorPolytope,
    rho: f64,
    varrho: f64,
    c: &DMatrix<f64>,
) -> Result<LmiProblem> {
    if !(rho > 0.0) || !(varrho > 0.0) {
        return Err(Error::structure(format!(
            "rho and varrho must be positive, got rho={rho}, varrho={varrho}"
        )));
    }
    if c.ncols() != sys.n_z() {
        return Err(Error::dimension(format!(
            "output matrix C has {} columns, expected {}",
            c.ncols(),
            sys.n_z()
        )));
    }
    check_compatibility(sys, polytope)?;
    let (n_z, n_u, s_modes) = (sys.n_z(), sys.n_u(), sys.n_modes());
    let n_y = c.nrows();
    let gamma = 1.0 / (sys.n_agents as f64 * rho);
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::structure(format!(
            "implied gamma = 1/(N rho) = {gamma} must lie in (0, 1)"
        )));
    }

    let mut prob = LmiProblem::new("disturbance-to-output gain");
    prob.meta.insert("rho".into(), rho);
    prob.meta.insert("gamma".into(), gamma);
    prob.meta.insert("varrho".into(), varrho);
    let vars = declare_analysis_vars(&mut prob, sys);

    let dd = &sys.disturbance_map * sys.disturbance_map.transpose();
    let out_corner = DMatrix::identity(n_y, n_y) * (-varrho * varrho);

    for l in 0..s_modes {
        for (i, vertex) in polytope.vertices().iter().enumerate() {
            let mut dims = vec![n_z, n_u];
            dims.extend(std::iter::repeat(n_z).take(s_modes - 1));
            dims.push(n_y);
            let out_block = dims.len() - 1;
            let mut blk = SymBlock::new(dims);
            blk.set(
                0,
                0,
                MatExpr::var(vars.y[l]).left_mul(&sys.drift[l]).he()
                    + MatExpr::var(vars.y[l]).scaled(vertex[(l, l)])
                    + MatExpr::constant(dd.clone()),
            );
            blk.set(
                1,
                0,
                MatExpr::var(vars.s).right_mul(&sys.sat_input_map.transpose())
                    - MatExpr::var(vars.x[l]),
            );
            blk.set(1, 1, MatExpr::var(vars.s).scaled(-2.0));
            set_coupling_blocks(
                &mut blk,
                2,
                l,
                i,
                vertex,
                &|| MatExpr::var(vars.y[l]),
                &|j| MatExpr::var(vars.y[j]),
                s_modes,
            )?;
            blk.set(out_block, 0, MatExpr::var(vars.y[l]).left_mul(c));
            blk.set(out_block, out_block, MatExpr::constant(out_corner.clone()));
            prob.constrain(
                format!("main[mode={},vertex={}]", l + 1, i + 1),
                blk.flatten(),
                Sense::NegSemidef,
            );
        }
        let corner = sys.u_max * sys.u_max * gamma;
        add_sector_rows(
            &mut prob,
            l,
            n_u,
            n_z,
            corner,
            || MatExpr::var(vars.y[l]),
            |q| {
                MatExpr::constant(sys.feedback_rows[l].rows(q, 1).into_owned())
                    - MatExpr::var(vars.x[l]).left_mul(&row_selector(n_u, q))
            },
        );
    }
    Ok(prob)
}

/// Result of [`assemble_synthesis`]: the problem plus any non-fatal notes.
pub struct SynthesisAssembly {
    pub problem: LmiProblem,
    pub warnings: Vec<String>,
}

/// Gain synthesis with block-replicated shape variables (`Ybar_l = I x F_l`)
/// and the gain entering through `Kbar = K F`; the sector inequality uses
/// `(L_l W x Kbar)_q - X_l_q` without a shape factor, exactly as stated for
/// this family, and the designed gain is recovered as `K = Kbar F^{-1}`.
///
/// One `F` is shared across every mode whose topology actually carries the
/// gain (nonzero Laplacian); gain-free modes get their own `F{l}` block.
/// Sharing `F` across all modes, as the plain change of variables suggests,
/// makes the coupling terms cancel the jump rates exactly and forces each
/// isolated mode to be stabilized alone, which is impossible for an unstable
/// open loop with an empty topology in the mode set; splitting the gain-free
/// modes keeps the synthesis convex without giving up a well-defined `K`.
pub fn assemble_synthesis(
    model: &NetworkModel,
    params: &Theorem1Params,
) -> Result<SynthesisAssembly> {
    params.validate()?;
    let mut warnings = Vec::new();
    if model.gain.is_some() {
        warnings.push(
            "model already has a gain K; synthesizing a new one (analysis is the usual intent)"
                .to_string(),
        );
    }
    let polytope = &model.polytope;
    let n = model.n_agents;
    let m = model.dynamics.state_dim();
    let p = model.dynamics.input_dim();
    let q_dim = model.dynamics.disturbance_dim();
    let s_modes = model.n_modes();
    if polytope.n_modes() != s_modes {
        return Err(Error::dimension(format!(
            "polytope over {} modes, model has {s_modes}",
            polytope.n_modes()
        )));
    }
    let (n_z, n_u, n_w) = (m * (n - 1), n * p, n * q_dim);

    let active: Vec<bool> = model
        .modes
        .iter()
        .map(|md| md.laplacian.amax() != 0.0)
        .collect();
    if !active.iter().any(|&a| a) {
        return Err(Error::structure(
            "no mode carries any edges; there is no gain to synthesize",
        ));
    }

    let u_sel = crate::disagreement::pivot_selector(n);
    let w_sel = crate::disagreement::lift_selector(n);
    let eye_nm1 = DMatrix::<f64>::identity(n - 1, n - 1);
    let eye_m = DMatrix::<f64>::identity(m, m);
    let ia = eye_nm1.kronecker(&model.dynamics.a);
    let ub = u_sel.kronecker(&model.dynamics.b);
    let ud = u_sel.kronecker(&model.dynamics.d);

    let mut prob = LmiProblem::new("gain synthesis");
    prob.meta.insert("rho".into(), params.rho);
    prob.meta.insert("eta".into(), params.eta);
    prob.meta.insert("gamma".into(), params.gamma);

    let f_shared = prob.add_symmetric("F", m);
    let kbar = prob.add_rectangular("Kbar", p, m);
    let f_by_mode: Vec<VarHandle> = active
        .iter()
        .enumerate()
        .map(|(l, &is_active)| {
            if is_active {
                f_shared
            } else {
                prob.add_symmetric(format!("F{}", l + 1), m)
            }
        })
        .collect();
    let x = (0..s_modes)
        .map(|l| prob.add_rectangular(format!("X{}", l + 1), n_u, n_z))
        .collect::<Vec<_>>();
    let s = prob.add_diagonal("S", n_u);
    prob.require_spd(f_shared, SPD_MARGIN);
    for (l, &is_active) in active.iter().enumerate() {
        if !is_active {
            prob.require_spd(f_by_mode[l], SPD_MARGIN);
        }
    }
    prob.require_diag_lower(s, SPD_MARGIN);

    let ybar = |l: usize| MatExpr::kron_outer_var(&eye_nm1, &eye_m, f_by_mode[l]);

    let gamma_block = DMatrix::identity(n_w, n_w) * (-(1.0 - params.gamma) / params.gamma);
    let sqrt_rho_d = ud.transpose() * params.rho.sqrt();

    for l in 0..s_modes {
        let ulw = &u_sel * &model.modes[l].laplacian * &w_sel;
        let lw = &model.modes[l].laplacian * &w_sel;
        for (i, vertex) in polytope.vertices().iter().enumerate() {
            let mut dims = vec![n_z, n_u, n_w];
            dims.extend(std::iter::repeat(n_z).take(s_modes - 1));
            let mut blk = SymBlock::new(dims);
            blk.set(
                0,
                0,
                (ybar(l).left_mul(&ia)
                    - MatExpr::kron_outer_var(&ulw, &model.dynamics.b, kbar))
                .he()
                    + ybar(l).scaled(vertex[(l, l)]),
            );
            blk.set(
                1,
                0,
                MatExpr::var(s).right_mul(&ub.transpose()) - MatExpr::var(x[l]),
            );
            blk.set(1, 1, MatExpr::var(s).scaled(-2.0));
            blk.set(2, 0, MatExpr::constant(sqrt_rho_d.clone()));
            blk.set(2, 2, MatExpr::constant(gamma_block.clone()));
            set_coupling_blocks(&mut blk, 3, l, i, vertex, &|| ybar(l), &ybar, s_modes)?;
            prob.constrain(
                format!("main[mode={},vertex={}]", l + 1, i + 1),
                blk.flatten(),
                Sense::NegSemidef,
            );
        }
        let corner = model.dynamics.u_max * model.dynamics.u_max * params.gamma;
        let eye_p = DMatrix::<f64>::identity(p, p);
        add_sector_rows(
            &mut prob,
            l,
            n_u,
            n_z,
            corner,
            || ybar(l),
            |q| {
                MatExpr::kron_outer_var(&lw, &eye_p, kbar).left_mul(&row_selector(n_u, q))
                    - MatExpr::var(x[l]).left_mul(&row_selector(n_u, q))
            },
        );
    }
    Ok(SynthesisAssembly {
        problem: prob,
        warnings,
    })
}

/// Adds the inscribed-ellipsoid constraints `[[Z, I], [I, Y_l]] >= 0` (one
/// per mode), which encode `E(Z, 1)` inside the intersection of the
/// `E(P_l, 1)`. Declares and returns the symmetric variable `Z`.
pub fn add_containment(prob: &mut LmiProblem, n_z: usize, y_names: &[String]) -> Result<VarHandle> {
    let z = prob.add_symmetric("Z", n_z);
    let eye = DMatrix::<f64>::identity(n_z, n_z);
    let y_handles: Vec<VarHandle> = y_names
        .iter()
        .map(|name| {
            let dv = prob
                .var_by_name(name)
                .ok_or_else(|| Error::structure(format!("no variable named {name}")))?;
            if dv.rows != n_z || dv.cols != n_z {
                return Err(Error::dimension(format!(
                    "variable {name} is {}x{}, expected {n_z}x{n_z}",
                    dv.rows, dv.cols
                )));
            }
            Ok(VarHandle {
                id: prob
                    .vars()
                    .iter()
                    .position(|v| v.name == *name)
                    .expect("var exists"),
                kind: dv.kind,
                rows: dv.rows,
                cols: dv.cols,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    for (l, yh) in y_handles.iter().enumerate() {
        let mut blk = SymBlock::new(vec![n_z, n_z]);
        blk.set(0, 0, MatExpr::var(z));
        blk.set(1, 0, MatExpr::constant(eye.clone()));
        blk.set(1, 1, MatExpr::var(*yh));
        prob.constrain(
            format!("containment[mode={}]", l + 1),
            blk.flatten(),
            Sense::PosSemidef,
        );
    }
    Ok(z)
}

/// Builds the reduced system and delegates to [`assemble_theorem1`];
/// convenience for callers holding a full model.
pub fn assemble_theorem1_from_model(
    model: &NetworkModel,
    params: &Theorem1Params,
) -> Result<LmiProblem> {
    let sys = build_disagreement_system(model)?;
    assemble_theorem1(&sys, &model.polytope, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::disagreement::build_disagreement_system;
    use crate::sysmodel::load_model;

    const DEMO_CONFIG: &str = r#"
[dynamics]
m = 2
p = 2
q = 2
u_max = 3.0
A = [0.1, -0.1, 0.1, -3.0]
B = [5.0, 0.0, 0.0, 1.0]
D = [1.0, 0.0, 0.0, 1.0]
K = [0.1, 0.5, 0.0, 0.0]

[[modes]]
adjacency = [[0, 0, 1], [0, 0, 0], [0, 1, 0]]

[[modes]]
adjacency = [[0, 0, 0], [0, 0, 0], [0, 0, 0]]

[[modes]]
adjacency = [[0, 0, 0], [0, 0, 1], [0, 0, 0]]

[polytope]
vertices = [[[-2.0, 1.0, 1.0], [2.0, -4.0, 2.0], [1.0, 1.0, -2.0]]]
"#;

    fn demo_system() -> (DisagreementSystem, GeneratorPolytope) {
        let model = load_model(DEMO_CONFIG).unwrap();
        let sys = build_disagreement_system(&model).unwrap();
        let polytope = model.polytope.clone();
        (sys, polytope)
    }

    #[test]
    fn theorem1_block_sides_and_counts() {
        let (sys, polytope) = demo_system();
        let params = Theorem1Params {
            rho: 10.0,
            eta: 1.0,
            gamma: 0.1,
        };
        let prob = assemble_theorem1(&sys, &polytope, &params).unwrap();
        let mains: Vec<_> = prob
            .constraints()
            .iter()
            .filter(|c| c.label.starts_with("main"))
            .collect();
        let sectors: Vec<_> = prob
            .constraints()
            .iter()
            .filter(|c| c.label.starts_with("sector"))
            .collect();
        assert_eq!(mains.len(), 3); // 3 modes x 1 vertex
        assert_eq!(sectors.len(), 18); // 3 modes x 6 rows
        for c in mains {
            // 4 + 6 + 6 + 2*4 = 24.
            assert_eq!(c.expr.nrows(), 24);
        }
        for c in sectors {
            assert_eq!(c.expr.nrows(), 5);
        }
    }

    #[test]
    fn single_mode_drops_coupling_blocks() {
        let single = r#"
[dynamics]
m = 2
p = 2
q = 2
u_max = 3.0
A = [0.1, -0.1, 0.1, -3.0]
B = [5.0, 0.0, 0.0, 1.0]
D = [1.0, 0.0, 0.0, 1.0]
K = [0.1, 0.5, 0.0, 0.0]

[[modes]]
adjacency = [[0, 0, 1], [0, 0, 0], [0, 1, 0]]

[polytope]
vertices = [[[0.0]]]
"#;
        let model = load_model(single).unwrap();
        let sys = build_disagreement_system(&model).unwrap();
        let params = Theorem1Params {
            rho: 1.0,
            eta: 1.0,
            gamma: 0.5,
        };
        let prob = assemble_theorem1(&sys, &model.polytope, &params).unwrap();
        let main = prob
            .constraints()
            .iter()
            .find(|c| c.label.starts_with("main"))
            .unwrap();
        // 4 + 6 + 6, no coupling rows.
        assert_eq!(main.expr.nrows(), 16);
    }

    #[test]
    fn origin_variant_block_side() {
        let (sys, polytope) = demo_system();
        let prob = assemble_origin_variant(&sys, &polytope, 0.01).unwrap();
        let main = prob
            .constraints()
            .iter()
            .find(|c| c.label.starts_with("main"))
            .unwrap();
        // 4 + 6 + 2*4 = 18.
        assert_eq!(main.expr.nrows(), 18);
    }

    #[test]
    fn variable_count_matches_printed_formula() {
        // The reference closed-form count treats the sector scaling S as one
        // symmetric Np x Np matrix per mode:
        //   (s/2) ((Np)^2 + (m(N-1))^2 + 2 N^2 p m + Np + m(N-1) - 2 N p m).
        // With N = 3, m = p = 2, s = 3 this is 165. Our S is a single shared
        // diagonal, so the count drops by s ((Np)^2 + Np)/2 (the per-mode
        // symmetric S's) and gains Np diagonal entries: 165 - 63 + 6 = 108.
        let (sys, polytope) = demo_system();
        let params = Theorem1Params {
            rho: 10.0,
            eta: 1.0,
            gamma: 0.1,
        };
        let prob = assemble_theorem1(&sys, &polytope, &params).unwrap();
        let (n, m, p, s) = (3.0f64, 2.0f64, 2.0f64, 3.0f64);
        let np = n * p;
        let mn1 = m * (n - 1.0);
        let printed = s / 2.0
            * (np * np + mn1 * mn1 + 2.0 * n * n * p * m + np + mn1 - 2.0 * np * m);
        assert_eq!(printed, 165.0);
        let ours = printed - s * (np * np + np) / 2.0 + np;
        assert_eq!(prob.n_slots() as f64, ours);
    }

    #[test]
    fn l2_appends_output_row() {
        let (sys, polytope) = demo_system();
        let c = DMatrix::<f64>::identity(4, 4);
        let prob = assemble_l2(&sys, &polytope, 100.0 / 3.0, 1.0, &c).unwrap();
        let main = prob
            .constraints()
            .iter()
            .find(|c| c.label.starts_with("main"))
            .unwrap();
        // 4 + 6 + 2*4 + 4 = 22.
        assert_eq!(main.expr.nrows(), 22);
    }

    #[test]
    fn synthesis_assembles_with_structured_shape() {
        let text = DEMO_CONFIG.replace("K = [0.1, 0.5, 0.0, 0.0]\n", "");
        let model = load_model(&text).unwrap();
        let params = Theorem1Params {
            rho: 10.0,
            eta: 1.0,
            gamma: 0.1,
        };
        let asm = assemble_synthesis(&model, &params).unwrap();
        assert!(asm.warnings.is_empty());
        assert!(asm.problem.var_by_name("F").is_some());
        assert!(asm.problem.var_by_name("Kbar").is_some());
        // Shared F for the two edge-carrying modes (3 slots), Kbar (4), a
        // separate F2 for the empty mode (3), X: 3 x 24, S: 6.
        assert!(asm.problem.var_by_name("F2").is_some());
        assert_eq!(asm.problem.n_slots(), 3 + 4 + 3 + 72 + 6);
        let with_gain = load_model(DEMO_CONFIG).unwrap();
        let asm2 = assemble_synthesis(&with_gain, &params).unwrap();
        assert_eq!(asm2.warnings.len(), 1);
    }

    #[test]
    fn containment_adds_one_block_per_mode() {
        let (sys, polytope) = demo_system();
        let mut prob = assemble_origin_variant(&sys, &polytope, 0.01).unwrap();
        let names: Vec<String> = (1..=3).map(|l| format!("Y{l}")).collect();
        add_containment(&mut prob, sys.n_z(), &names).unwrap();
        let blocks: Vec<_> = prob
            .constraints()
            .iter()
            .filter(|c| c.label.starts_with("containment"))
            .collect();
        assert_eq!(blocks.len(), 3);
        for b in blocks {
            assert_eq!(b.expr.nrows(), 8);
        }
        let _ = polytope;
    }

    #[test]
    fn assembled_expressions_are_exactly_symmetric() {
        let (sys, polytope) = demo_system();
        let params = Theorem1Params {
            rho: 10.0,
            eta: 1.0,
            gamma: 0.1,
        };
        let prob = assemble_theorem1(&sys, &polytope, &params).unwrap();
        for c in prob.constraints() {
            let (f0, coeffs) = c.expr.coefficients(prob.vars());
            assert_eq!(f0, f0.transpose(), "constant of {}", c.label);
            for (slot, fk) in coeffs {
                assert_eq!(fk, fk.transpose(), "slot {slot} of {}", c.label);
            }
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        let (sys, polytope) = demo_system();
        let bad = Theorem1Params {
            rho: 1.0,
            eta: 1.0,
            gamma: 1.5,
        };
        assert!(assemble_theorem1(&sys, &polytope, &bad).is_err());
        assert!(assemble_origin_variant(&sys, &polytope, 0.0).is_err());
        let c_bad = DMatrix::<f64>::identity(3, 3);
        assert!(assemble_l2(&sys, &polytope, 10.0, 1.0, &c_bad).is_err());
    }
}
