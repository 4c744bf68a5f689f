//! Continuous-time Markov chain over topology modes: generator validation,
//! polytopic mixing, and jump-trajectory sampling for simulation.
//!
//! Mode indices are 0-based throughout the crate; text exports use 1-based
//! labels to match the usual control-engineering convention.

use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used for generator row sums and simplex checks.
pub const GENERATOR_TOL: f64 = 1e-9;

/// Diagnostic outcome of [`validate_generator`]; never an error by itself.
#[derive(Debug, Clone)]
pub struct GeneratorDiagnostics {
    pub valid: bool,
    pub issues: Vec<String>,
}

/// Checks that `m` is a transition-rate matrix: square, non-negative
/// off-diagonals, zero row sums (within [`GENERATOR_TOL`]).
pub fn validate_generator(m: &DMatrix<f64>) -> GeneratorDiagnostics {
    let mut issues = Vec::new();
    if m.nrows() != m.ncols() {
        issues.push(format!("not square: {}x{}", m.nrows(), m.ncols()));
        return GeneratorDiagnostics {
            valid: false,
            issues,
        };
    }
    for i in 0..m.nrows() {
        let mut sum = 0.0;
        for j in 0..m.ncols() {
            let v = m[(i, j)];
            if !v.is_finite() {
                issues.push(format!("row {i}: non-finite entry at column {j}"));
            }
            if i != j && v < -GENERATOR_TOL {
                issues.push(format!("row {i}: negative off-diagonal rate {v} at column {j}"));
            }
            sum += v;
        }
        if sum.abs() > GENERATOR_TOL {
            issues.push(format!("row {i}: row sum {sum:e} exceeds tolerance"));
        }
    }
    GeneratorDiagnostics {
        valid: issues.is_empty(),
        issues,
    }
}

/// Vertex set of the uncertain transition-rate matrix. The admissible
/// generators are the convex combinations of the vertices.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorPolytope {
    vertices: Vec<DMatrix<f64>>,
}

impl GeneratorPolytope {
    /// Validates every vertex as a generator. Fails with the vertex and row
    /// of the first violation.
    pub fn new(vertices: Vec<DMatrix<f64>>) -> Result<Self> {
        if vertices.is_empty() {
            return Err(Error::structure("generator polytope has no vertices"));
        }
        let s = vertices[0].nrows();
        for (idx, v) in vertices.iter().enumerate() {
            if v.nrows() != s || v.ncols() != s {
                return Err(Error::dimension(format!(
                    "polytope vertex {idx} is {}x{}, expected {s}x{s}",
                    v.nrows(),
                    v.ncols()
                )));
            }
            let diag = validate_generator(v);
            if !diag.valid {
                // The first issue message starts with "row <i>: ...".
                let issue = diag.issues[0].clone();
                let row = issue
                    .strip_prefix("row ")
                    .and_then(|s| s.split(':').next())
                    .and_then(|s| s.parse::<usize>().ok())
                    .unwrap_or(0);
                return Err(Error::Generator {
                    vertex: idx,
                    row,
                    message: issue,
                });
            }
        }
        Ok(Self { vertices })
    }

    pub fn vertices(&self) -> &[DMatrix<f64>] {
        &self.vertices
    }

    pub fn vertex(&self, i: usize) -> &DMatrix<f64> {
        &self.vertices[i]
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    /// Number of chain states (matrix side).
    pub fn n_modes(&self) -> usize {
        self.vertices[0].nrows()
    }

    /// Convex combination of the vertices with `weights` on the unit simplex.
    pub fn mix(&self, weights: &[f64]) -> Result<DMatrix<f64>> {
        if weights.len() != self.n_vertices() {
            return Err(Error::dimension(format!(
                "{} mixing weights for {} vertices",
                weights.len(),
                self.n_vertices()
            )));
        }
        if weights.iter().any(|&w| w < -GENERATOR_TOL) {
            return Err(Error::structure("mixing weights must be non-negative"));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > GENERATOR_TOL {
            return Err(Error::structure(format!(
                "mixing weights sum to {sum}, expected 1"
            )));
        }
        let s = self.n_modes();
        let mut out = DMatrix::zeros(s, s);
        for (w, v) in weights.iter().zip(&self.vertices) {
            out += v * *w;
        }
        Ok(out)
    }

    /// Polytope with every vertex scaled by `factor` (a uniform change of
    /// switching speed). Scaling preserves generator validity for factor >= 0.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor >= 0.0) {
            return Err(Error::structure(format!(
                "rate scale must be non-negative, got {factor}"
            )));
        }
        GeneratorPolytope::new(self.vertices.iter().map(|v| v * factor).collect())
    }
}

/// One sampled path of the mode process on `[0, horizon]`.
///
/// `modes[k]` rules the interval `[jump_times[k-1], jump_times[k])` (with
/// `jump_times[-1] = 0` and the last interval closed at `horizon`), so
/// `modes.len() == jump_times.len() + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeTrajectory {
    pub modes: Vec<usize>,
    pub jump_times: Vec<f64>,
    pub horizon: f64,
}

impl ModeTrajectory {
    pub fn n_jumps(&self) -> usize {
        self.jump_times.len()
    }

    /// Mode ruling time `t` (clamped to the horizon).
    pub fn mode_at(&self, t: f64) -> usize {
        match self.jump_times.iter().position(|&jt| t < jt) {
            Some(k) => self.modes[k],
            None => *self.modes.last().expect("non-empty trajectory"),
        }
    }

    /// Consecutive `(start, end, mode)` segments covering `[0, horizon]`.
    pub fn segments(&self) -> Vec<(f64, f64, usize)> {
        let mut out = Vec::with_capacity(self.modes.len());
        let mut start = 0.0;
        for (k, &mode) in self.modes.iter().enumerate() {
            let end = if k < self.jump_times.len() {
                self.jump_times[k]
            } else {
                self.horizon
            };
            out.push((start, end, mode));
            start = end;
        }
        out
    }

    /// Columnar `time,mode` record of the switching signal (1-based modes).
    /// One row per segment start plus a closing row at the horizon.
    pub fn to_columnar(&self) -> String {
        let mut s = String::from("time,mode\n");
        for (start, _, mode) in self.segments() {
            s.push_str(&format!("{start},{}\n", mode + 1));
        }
        s.push_str(&format!(
            "{},{}\n",
            self.horizon,
            self.modes.last().unwrap() + 1
        ));
        s
    }
}

/// Samples a mode path by alternating exponential holding times with draws
/// from the embedded jump chain. Deterministic in `seed`. A mode with zero
/// exit rate is absorbing and its segment extends to the horizon.
pub fn sample_trajectory(
    generator: &DMatrix<f64>,
    initial_distribution: &[f64],
    horizon: f64,
    seed: u64,
) -> Result<ModeTrajectory> {
    let diag = validate_generator(generator);
    if !diag.valid {
        return Err(Error::structure(format!(
            "invalid generator: {}",
            diag.issues.join("; ")
        )));
    }
    let s = generator.nrows();
    if initial_distribution.len() != s {
        return Err(Error::dimension(format!(
            "initial distribution has {} entries for {s} modes",
            initial_distribution.len()
        )));
    }
    let sum: f64 = initial_distribution.iter().sum();
    if (sum - 1.0).abs() > GENERATOR_TOL || initial_distribution.iter().any(|&p| p < 0.0) {
        return Err(Error::structure(
            "initial distribution must lie on the unit simplex",
        ));
    }
    if !(horizon > 0.0) {
        return Err(Error::structure("horizon must be positive"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mode = draw_categorical(&mut rng, initial_distribution);
    let mut modes = vec![mode];
    let mut jump_times = Vec::new();
    let mut t = 0.0;
    loop {
        let rate = -generator[(mode, mode)];
        if rate <= GENERATOR_TOL {
            break; // absorbing
        }
        t += Exp::new(rate).expect("positive rate").sample(&mut rng);
        if t >= horizon {
            break;
        }
        let weights: Vec<f64> = (0..s)
            .map(|j| if j == mode { 0.0 } else { generator[(mode, j)] / rate })
            .collect();
        mode = draw_categorical(&mut rng, &weights);
        jump_times.push(t);
        modes.push(mode);
    }
    Ok(ModeTrajectory {
        modes,
        jump_times,
        horizon,
    })
}

fn draw_categorical(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let u: f64 = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}
