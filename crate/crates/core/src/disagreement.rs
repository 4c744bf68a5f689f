//! Pivot-relative disagreement coordinates and the reduced switched system.
//!
//! Agent 1 is the fixed pivot: `z_i = x_1 - x_{i+1}`. The selectors
//! `U = [1  -I]` and `W = [0  -I]'` map between stacked agent states and
//! disagreement coordinates, and satisfy `U 1 = 0`, `U W = I` exactly.
//! This module also owns the saturation and dead-zone nonlinearities and the
//! generalized sector condition they obey.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::sysmodel::NetworkModel;

/// `U = [1_{N-1}  -I_{N-1}]`, the (N-1)xN map from stacked states to
/// pivot-relative differences.
pub fn pivot_selector(n_agents: usize) -> DMatrix<f64> {
    let n = n_agents;
    let mut u = DMatrix::zeros(n - 1, n);
    for i in 0..n - 1 {
        u[(i, 0)] = 1.0;
        u[(i, i + 1)] = -1.0;
    }
    u
}

/// `W = [0_{N-1}  -I_{N-1}]'`, the Nx(N-1) right inverse of `U` used to lift
/// disagreements back to stacked states.
pub fn lift_selector(n_agents: usize) -> DMatrix<f64> {
    let n = n_agents;
    let mut w = DMatrix::zeros(n, n - 1);
    for i in 0..n - 1 {
        w[(i + 1, i)] = -1.0;
    }
    w
}

/// `z = (U x I_m) x`, blockwise `z_i = x_1 - x_{i+1}`.
pub fn to_disagreement(x: &DVector<f64>, n_agents: usize, state_dim: usize) -> Result<DVector<f64>> {
    if x.len() != n_agents * state_dim {
        return Err(Error::dimension(format!(
            "stacked state has {} entries, expected {}",
            x.len(),
            n_agents * state_dim
        )));
    }
    let m = state_dim;
    let mut z = DVector::zeros((n_agents - 1) * m);
    for i in 0..n_agents - 1 {
        for k in 0..m {
            z[i * m + k] = x[k] - x[(i + 1) * m + k];
        }
    }
    Ok(z)
}

/// `x = 1_N x x1 + (W x I_m) z`; left inverse of [`to_disagreement`] for the
/// given pivot state.
pub fn from_disagreement(z: &DVector<f64>, x1: &DVector<f64>) -> Result<DVector<f64>> {
    let m = x1.len();
    if m == 0 || z.len() % m != 0 {
        return Err(Error::dimension(format!(
            "disagreement length {} is not a multiple of the pivot state length {m}",
            z.len()
        )));
    }
    let n_agents = z.len() / m + 1;
    let mut x = DVector::zeros(n_agents * m);
    for k in 0..m {
        x[k] = x1[k];
    }
    for i in 0..n_agents - 1 {
        for k in 0..m {
            x[(i + 1) * m + k] = x1[k] - z[i * m + k];
        }
    }
    Ok(x)
}

/// Per-channel actuator limit for a stacked input of `channels` entries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SaturationSpec {
    pub u_max: f64,
    pub channels: usize,
}

impl SaturationSpec {
    pub fn new(u_max: f64, channels: usize) -> Result<Self> {
        if !(u_max > 0.0) {
            return Err(Error::structure(format!(
                "u_max must be positive, got {u_max}"
            )));
        }
        Ok(Self { u_max, channels })
    }
}

/// Componentwise `sign(u_r) min(u_max, |u_r|)`.
pub fn saturate(u: &DVector<f64>, spec: &SaturationSpec) -> DVector<f64> {
    debug_assert_eq!(u.len(), spec.channels);
    u.map(|v| v.clamp(-spec.u_max, spec.u_max))
}

/// Dead-zone `phi(u) = u - sat(u)`; zero inside the limits.
pub fn dead_zone(u: &DVector<f64>, spec: &SaturationSpec) -> DVector<f64> {
    debug_assert_eq!(u.len(), spec.channels);
    u.map(|v| v - v.clamp(-spec.u_max, spec.u_max))
}

/// Outcome of [`check_sector_condition`].
#[derive(Debug, Clone, Copy)]
pub struct SectorCheck {
    /// Whether `u` lies in the polyhedral set `S(aux, u_max)`, i.e.
    /// `|u_r + aux_r| <= u_max` for every channel; only then does the sector
    /// lemma make a claim.
    pub in_set: bool,
    /// The quadratic form `phi(u)' T (phi(u) + aux)`.
    pub value: f64,
    /// Whether the quadratic form is non-positive (up to rounding).
    pub holds: bool,
}

/// Evaluates the generalized sector condition for the dead-zone: whenever the
/// input lies in the polyhedral set `S(aux, u_max) = {u : |u_r + aux_r| <=
/// u_max}`, the quadratic form `phi(u)' T (phi(u) + aux)` is non-positive for
/// any positive diagonal `T`.
///
/// The sign convention is forced: the auxiliary signal must enter the set
/// through the sum when it enters the quadratic form with a plus, otherwise
/// the claim has one-channel counterexamples (u = 5, aux = 2.5, u_max = 3
/// gives phi = 2 and a quadratic value of 9).
pub fn check_sector_condition(
    u: &DVector<f64>,
    aux: &DVector<f64>,
    t: &DMatrix<f64>,
    spec: &SaturationSpec,
) -> Result<SectorCheck> {
    if u.len() != aux.len() || t.nrows() != u.len() || t.ncols() != u.len() {
        return Err(Error::dimension(
            "sector check needs u, aux of equal length and T square of the same size",
        ));
    }
    for i in 0..t.nrows() {
        for j in 0..t.ncols() {
            if i != j && t[(i, j)] != 0.0 {
                return Err(Error::structure("T must be diagonal"));
            }
        }
        if !(t[(i, i)] > 0.0) {
            return Err(Error::structure("T must have positive diagonal"));
        }
    }
    let in_set = (0..u.len()).all(|r| (u[r] + aux[r]).abs() <= spec.u_max);
    let phi = dead_zone(u, spec);
    let value = (phi.transpose() * t * (&phi + aux))[(0, 0)];
    let scale = phi.norm() * t.diagonal().amax() * (phi.norm() + aux.norm());
    let holds = value <= 1e-12 * scale.max(1.0);
    Ok(SectorCheck {
        in_set,
        value,
        holds,
    })
}

/// The reduced switched system in disagreement coordinates with every
/// Kronecker product expanded to a dense matrix.
///
/// Dynamics: `z' = drift[l] z + sat_input_map * phi(feedback_rows[l] z)
/// + disturbance_map * w`, where `phi` is the dead-zone and `w` stacks the
/// per-agent disturbances.
#[derive(Debug, Clone, PartialEq)]
pub struct DisagreementSystem {
    pub n_agents: usize,
    pub state_dim: usize,
    pub input_dim: usize,
    pub dist_dim: usize,
    pub u_max: f64,
    /// Per mode: `I x A - (U L W) x (B K)`.
    pub drift: Vec<DMatrix<f64>>,
    /// `U x B`; the dead-zone enters through this map.
    pub sat_input_map: DMatrix<f64>,
    /// Per mode: `(L W) x K`, the argument of the saturation.
    pub feedback_rows: Vec<DMatrix<f64>>,
    /// `U x D`.
    pub disturbance_map: DMatrix<f64>,
    /// `U`.
    pub pivot: DMatrix<f64>,
    /// `W`.
    pub lift: DMatrix<f64>,
}

impl DisagreementSystem {
    /// Reduced state dimension `m (N-1)`.
    pub fn n_z(&self) -> usize {
        self.state_dim * (self.n_agents - 1)
    }

    /// Stacked input dimension `N p`.
    pub fn n_u(&self) -> usize {
        self.n_agents * self.input_dim
    }

    /// Stacked disturbance dimension `N q`.
    pub fn n_w(&self) -> usize {
        self.n_agents * self.dist_dim
    }

    pub fn n_modes(&self) -> usize {
        self.drift.len()
    }

    pub fn saturation(&self) -> SaturationSpec {
        SaturationSpec {
            u_max: self.u_max,
            channels: self.n_u(),
        }
    }
}

/// Expands the model into the reduced system. Requires the feedback gain.
pub fn build_disagreement_system(model: &NetworkModel) -> Result<DisagreementSystem> {
    let gain = model.require_gain()?;
    let n = model.n_agents;
    let m = model.dynamics.state_dim();
    let u = pivot_selector(n);
    let w = lift_selector(n);

    // Exact algebraic identities of the selectors; integer arithmetic in f64.
    let ones = DVector::from_element(n, 1.0);
    assert_eq!((&u * &ones).amax(), 0.0, "U 1 = 0 must hold exactly");
    assert_eq!(
        (&u * &w - DMatrix::<f64>::identity(n - 1, n - 1)).amax(),
        0.0,
        "U W = I must hold exactly"
    );
    for mode in &model.modes {
        assert_eq!(
            (&mode.laplacian * &ones).amax(),
            0.0,
            "L 1 = 0 must hold exactly"
        );
    }

    let eye = DMatrix::<f64>::identity(n - 1, n - 1);
    let bk = &model.dynamics.b * &gain.k;
    let drift = model
        .modes
        .iter()
        .map(|mode| {
            eye.kronecker(&model.dynamics.a) - (&u * &mode.laplacian * &w).kronecker(&bk)
        })
        .collect();
    let feedback_rows = model
        .modes
        .iter()
        .map(|mode| (&mode.laplacian * &w).kronecker(&gain.k))
        .collect();

    Ok(DisagreementSystem {
        n_agents: n,
        state_dim: m,
        input_dim: model.dynamics.input_dim(),
        dist_dim: model.dynamics.disturbance_dim(),
        u_max: model.dynamics.u_max,
        drift,
        sat_input_map: u.kronecker(&model.dynamics.b),
        feedback_rows,
        disturbance_map: u.kronecker(&model.dynamics.d),
        pivot: u,
        lift: w,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sysmodel::{load_model, AgentDynamics, ModeTopology, NetworkModel};
    use crate::markov::GeneratorPolytope;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

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

    #[test]
    fn to_disagreement_scalar_states() {
        let x = DVector::from_row_slice(&[1.0, 2.0, 3.0]);
        let z = to_disagreement(&x, 3, 1).unwrap();
        assert_eq!(z, DVector::from_row_slice(&[-1.0, -2.0]));
    }

    #[test]
    fn consensus_maps_to_origin() {
        let c = DVector::from_row_slice(&[4.0, -1.0]);
        let mut x = DVector::zeros(6);
        for i in 0..3 {
            x.rows_mut(i * 2, 2).copy_from(&c);
        }
        let z = to_disagreement(&x, 3, 2).unwrap();
        assert_eq!(z.amax(), 0.0);
    }

    #[test]
    fn blockwise_subtraction_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let (n, m) = (3, 2);
        for _ in 0..20 {
            let x = DVector::from_fn(n * m, |_, _| rng.gen_range(-5.0..5.0));
            let z = to_disagreement(&x, n, m).unwrap();
            for i in 0..n - 1 {
                for k in 0..m {
                    let direct = x[k] - x[(i + 1) * m + k];
                    assert_eq!(z[i * m + k], direct);
                }
            }
        }
    }

    #[test]
    fn from_disagreement_reconstructs_consensus() {
        let c = DVector::from_row_slice(&[2.5]);
        let z = DVector::zeros(3);
        let x = from_disagreement(&z, &c).unwrap();
        assert_eq!(x, DVector::from_element(4, 2.5));
    }

    #[test]
    fn from_disagreement_inverts_example() {
        let z = DVector::from_row_slice(&[-1.0, -2.0]);
        let x1 = DVector::from_row_slice(&[1.0]);
        let x = from_disagreement(&z, &x1).unwrap();
        assert_eq!(x, DVector::from_row_slice(&[1.0, 2.0, 3.0]));
    }

    proptest! {
        #[test]
        fn round_trip_is_identity(
            z_raw in proptest::collection::vec(-100.0f64..100.0, 4),
            x1_raw in proptest::collection::vec(-100.0f64..100.0, 2),
        ) {
            let z = DVector::from_vec(z_raw);
            let x1 = DVector::from_vec(x1_raw);
            let x = from_disagreement(&z, &x1).unwrap();
            let z_back = to_disagreement(&x, 3, 2).unwrap();
            prop_assert!((z_back - &z).amax() <= 1e-12);
        }

        #[test]
        fn saturation_is_odd_and_splits(u_raw in proptest::collection::vec(-10.0f64..10.0, 6)) {
            let spec = SaturationSpec::new(3.0, 6).unwrap();
            let u = DVector::from_vec(u_raw);
            let sat_neg = saturate(&(-&u), &spec);
            let neg_sat = -saturate(&u, &spec);
            prop_assert_eq!(sat_neg, neg_sat);
            let rebuilt = dead_zone(&u, &spec) + saturate(&u, &spec);
            prop_assert!((rebuilt - &u).amax() <= 1e-15);
        }
    }

    #[test]
    fn saturate_clips() {
        let spec = SaturationSpec::new(3.0, 3).unwrap();
        let u = DVector::from_row_slice(&[5.0, -4.0, 1.0]);
        assert_eq!(saturate(&u, &spec), DVector::from_row_slice(&[3.0, -3.0, 1.0]));
        assert_eq!(dead_zone(&u, &spec), DVector::from_row_slice(&[2.0, -1.0, 0.0]));
    }

    #[test]
    fn interior_inputs_pass_through() {
        let spec = SaturationSpec::new(3.0, 2).unwrap();
        let u = DVector::from_row_slice(&[1.0, -2.9]);
        assert_eq!(saturate(&u, &spec), u);
        assert_eq!(dead_zone(&u, &spec).amax(), 0.0);
    }

    #[test]
    fn sector_condition_interior_case() {
        let spec = SaturationSpec::new(3.0, 1).unwrap();
        let t = DMatrix::from_diagonal_element(1, 1, 1.0);
        let u = DVector::from_row_slice(&[1.0]);
        let aux = DVector::from_row_slice(&[0.5]);
        let check = check_sector_condition(&u, &aux, &t, &spec).unwrap();
        assert!(check.in_set);
        assert_eq!(check.value, 0.0);
        assert!(check.holds);
    }

    #[test]
    fn sector_condition_outside_set_makes_no_claim() {
        // phi = 2 and the quadratic form is 2 (2 + 2.5) = 9 > 0, but
        // |5 + 2.5| > 3 so u is outside S(aux, u_max) and no claim is made.
        let spec = SaturationSpec::new(3.0, 1).unwrap();
        let t = DMatrix::from_diagonal_element(1, 1, 1.0);
        let u = DVector::from_row_slice(&[5.0]);
        let aux = DVector::from_row_slice(&[2.5]);
        let check = check_sector_condition(&u, &aux, &t, &spec).unwrap();
        assert!(!check.in_set);
        assert_eq!(check.value, 9.0);
        assert!(!check.holds);
    }

    #[test]
    fn sector_condition_randomized_inside_set() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let spec = SaturationSpec::new(2.0, 4).unwrap();
        for _ in 0..2000 {
            let aux = DVector::from_fn(4, |_, _| rng.gen_range(-6.0..6.0));
            let delta = DVector::from_fn(4, |_, _| rng.gen_range(-2.0..2.0));
            let u = &delta - &aux;
            let t = DMatrix::from_diagonal(&DVector::from_fn(4, |_, _| rng.gen_range(0.01..10.0)));
            let check = check_sector_condition(&u, &aux, &t, &spec).unwrap();
            assert!(check.in_set);
            assert!(check.holds, "violation: value {}", check.value);
        }
    }

    #[test]
    fn sector_condition_rejects_bad_t() {
        let spec = SaturationSpec::new(1.0, 2).unwrap();
        let u = DVector::zeros(2);
        let aux = DVector::zeros(2);
        let mut t = DMatrix::identity(2, 2);
        t[(0, 1)] = 0.5;
        assert!(check_sector_condition(&u, &aux, &t, &spec).is_err());
        let t2 = DMatrix::from_diagonal(&DVector::from_row_slice(&[1.0, 0.0]));
        assert!(check_sector_condition(&u, &aux, &t2, &spec).is_err());
    }

    #[test]
    fn demo_system_dimensions() {
        let model = load_model(DEMO_CONFIG).unwrap();
        let sys = build_disagreement_system(&model).unwrap();
        assert_eq!(sys.n_z(), 4);
        assert_eq!(sys.n_u(), 6);
        assert_eq!(sys.n_w(), 6);
        assert_eq!(sys.n_modes(), 3);
        assert_eq!(sys.drift[0].nrows(), 4);
        assert_eq!(sys.sat_input_map.shape(), (4, 6));
        assert_eq!(sys.feedback_rows[0].shape(), (6, 4));
        assert_eq!(sys.disturbance_map.shape(), (4, 6));
    }

    #[test]
    fn zero_laplacian_mode_has_open_loop_drift() {
        let model = load_model(DEMO_CONFIG).unwrap();
        let sys = build_disagreement_system(&model).unwrap();
        // Mode 1 is the empty graph.
        let eye = DMatrix::<f64>::identity(2, 2);
        let expected = eye.kronecker(&model.dynamics.a);
        assert_eq!(sys.drift[1], expected);
        assert_eq!(sys.feedback_rows[1].amax(), 0.0);
    }

    #[test]
    fn build_requires_gain() {
        let text = DEMO_CONFIG.replace("K = [0.1, 0.5, 0.0, 0.0]\n", "");
        let model = load_model(&text).unwrap();
        assert!(matches!(
            build_disagreement_system(&model),
            Err(Error::MissingGain(_))
        ));
    }

    /// Dead-zone form and saturated form of the reduced dynamics agree, and
    /// both match the projected stacked dynamics, on random states.
    #[test]
    fn representations_agree_on_random_states() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let model = random_small_model(&mut rng);
        let sys = build_disagreement_system(&model).unwrap();
        let (n, m) = (model.n_agents, model.dynamics.state_dim());
        let q = model.dynamics.disturbance_dim();
        let spec = sys.saturation();
        let eye_m = DMatrix::<f64>::identity(m, m);
        let eye_n = DMatrix::<f64>::identity(n, n);
        let stacked_a = eye_n.kronecker(&model.dynamics.a);
        let stacked_b = eye_n.kronecker(&model.dynamics.b);
        let stacked_d = eye_n.kronecker(&model.dynamics.d);
        let u_kron_i = sys.pivot.kronecker(&eye_m);
        let reduced_a = DMatrix::<f64>::identity(n - 1, n - 1).kronecker(&model.dynamics.a);
        let k = &model.gain.as_ref().unwrap().k;

        for _ in 0..25 {
            for mode in 0..sys.n_modes() {
                let z = DVector::from_fn(sys.n_z(), |_, _| rng.gen_range(-4.0..4.0));
                let x1 = DVector::from_fn(m, |_, _| rng.gen_range(-4.0..4.0));
                let w = DVector::from_fn(n * q, |_, _| rng.gen_range(-1.0..1.0));
                let x = from_disagreement(&z, &x1).unwrap();

                let u_in = &sys.feedback_rows[mode] * &z;
                // Dead-zone representation vs direct saturated representation.
                let saturated_form = sys.drift[mode].clone() * &z
                    + &sys.sat_input_map * dead_zone(&u_in, &spec)
                    + &sys.disturbance_map * &w;
                let direct_form = &reduced_a * &z
                    - &sys.sat_input_map * saturate(&u_in, &spec)
                    + &sys.disturbance_map * &w;
                assert!((&saturated_form - &direct_form).amax() <= 1e-12);

                // Projected stacked dynamics.
                let lap = &model.modes[mode].laplacian;
                let stacked_u = lap.kronecker(k) * &x;
                let stacked_rhs = &stacked_a * &x
                    - &stacked_b
                        * saturate(
                            &stacked_u,
                            &SaturationSpec::new(spec.u_max, n * model.dynamics.input_dim())
                                .unwrap(),
                        )
                    + &stacked_d * &w;
                let projected = &u_kron_i * stacked_rhs;
                assert!(
                    (&projected - &saturated_form).amax() <= 1e-12,
                    "mode {mode}: mismatch {}",
                    (&projected - &saturated_form).amax()
                );
            }
        }
    }

    fn random_small_model(rng: &mut rand_chacha::ChaCha8Rng) -> NetworkModel {
        let m = 2;
        let a = DMatrix::from_fn(m, m, |_, _| rng.gen_range(-1.0..1.0));
        let b = DMatrix::from_fn(m, 2, |_, _| rng.gen_range(-1.0..1.0));
        let d = DMatrix::from_fn(m, 1, |_, _| rng.gen_range(-1.0..1.0));
        let k = DMatrix::from_fn(2, m, |_, _| rng.gen_range(-1.0..1.0));
        let dynamics = AgentDynamics::new(a, b, d, 1.5).unwrap();
        let adj0 =
            DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        let adj1 =
            DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let modes = vec![
            ModeTopology::from_adjacency(0, adj0).unwrap(),
            ModeTopology::from_adjacency(1, adj1).unwrap(),
        ];
        let gen = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 2.0, -2.0]);
        let polytope = GeneratorPolytope::new(vec![gen]).unwrap();
        NetworkModel::new(dynamics, Some(k), modes, polytope, None).unwrap()
    }
}
