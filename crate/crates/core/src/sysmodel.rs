//! Network description: agent dynamics, per-mode directed topologies, the
//! actuator limit, and the structural checks performed at load time.
//!
//! The config document (TOML) is the single source of truth for a network;
//! see the repo README for the schema. Agent 1 is the fixed pivot of the
//! disagreement coordinates, so the loader records it as such and offers no
//! knob to change it.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::markov::GeneratorPolytope;

/// Open-loop agent dynamics `x' = A x + B sat(u) + D w` plus the per-channel
/// actuator limit.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentDynamics {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub u_max: f64,
}

impl AgentDynamics {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, d: DMatrix<f64>, u_max: f64) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::dimension(format!(
                "A must be square, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.nrows() != a.nrows() {
            return Err(Error::dimension(format!(
                "B has {} rows, expected {}",
                b.nrows(),
                a.nrows()
            )));
        }
        if d.nrows() != a.nrows() {
            return Err(Error::dimension(format!(
                "D has {} rows, expected {}",
                d.nrows(),
                a.nrows()
            )));
        }
        if !(u_max > 0.0) {
            return Err(Error::structure(format!(
                "u_max must be positive, got {u_max}"
            )));
        }
        Ok(Self { a, b, d, u_max })
    }

    /// State dimension of one agent.
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    /// Input dimension of one agent.
    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    /// Disturbance dimension of one agent.
    pub fn disturbance_dim(&self) -> usize {
        self.d.ncols()
    }
}

/// Static consensus feedback gain.
#[derive(Debug, Clone, PartialEq)]
pub struct GainMatrix {
    pub k: DMatrix<f64>,
}

impl GainMatrix {
    pub fn new(k: DMatrix<f64>, dynamics: &AgentDynamics) -> Result<Self> {
        if k.nrows() != dynamics.input_dim() || k.ncols() != dynamics.state_dim() {
            return Err(Error::dimension(format!(
                "K is {}x{}, expected {}x{}",
                k.nrows(),
                k.ncols(),
                dynamics.input_dim(),
                dynamics.state_dim()
            )));
        }
        Ok(Self { k })
    }
}

/// Builds the graph Laplacian `L = D - A` from a 0/1 adjacency matrix with a
/// zero diagonal. Row convention: `a[(i, j)] = 1` iff there is an edge from
/// node `j` into node `i`.
pub fn build_laplacian(adjacency: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = adjacency.nrows();
    if adjacency.ncols() != n {
        return Err(Error::dimension(format!(
            "adjacency must be square, got {}x{}",
            n,
            adjacency.ncols()
        )));
    }
    for i in 0..n {
        for j in 0..n {
            let v = adjacency[(i, j)];
            if i == j && v != 0.0 {
                return Err(Error::structure(format!(
                    "adjacency diagonal entry ({i},{i}) must be zero, got {v}"
                )));
            }
            if v != 0.0 && v != 1.0 {
                return Err(Error::structure(format!(
                    "adjacency entry ({i},{j}) must be 0 or 1, got {v}"
                )));
            }
        }
    }
    let mut lap = -adjacency.clone();
    for i in 0..n {
        lap[(i, i)] = adjacency.row(i).sum();
    }
    Ok(lap)
}

/// One communication topology, keyed by its 0-based mode id.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeTopology {
    pub id: usize,
    pub adjacency: DMatrix<f64>,
    pub laplacian: DMatrix<f64>,
}

impl ModeTopology {
    pub fn from_adjacency(id: usize, adjacency: DMatrix<f64>) -> Result<Self> {
        let laplacian = build_laplacian(&adjacency)?;
        Ok(Self {
            id,
            adjacency,
            laplacian,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.adjacency.nrows()
    }
}

/// True iff the union of the mode graphs contains a node with a directed path
/// to every other node (root-existence search over the union adjacency).
pub fn check_union_spanning_tree(modes: &[ModeTopology]) -> Result<bool> {
    if modes.is_empty() {
        return Err(Error::structure("spanning-tree check needs at least one mode"));
    }
    let n = modes[0].n_nodes();
    for m in modes {
        if m.n_nodes() != n {
            return Err(Error::dimension(format!(
                "mode {} has {} nodes, expected {n}",
                m.id,
                m.n_nodes()
            )));
        }
    }
    let mut union = DMatrix::<f64>::zeros(n, n);
    for m in modes {
        for i in 0..n {
            for j in 0..n {
                if m.adjacency[(i, j)] != 0.0 {
                    union[(i, j)] = 1.0;
                }
            }
        }
    }
    // a[(i, j)] = 1 means j -> i, so the out-neighbours of v sit in column v.
    'roots: for root in 0..n {
        let mut seen = vec![false; n];
        let mut stack = vec![root];
        seen[root] = true;
        while let Some(v) = stack.pop() {
            for i in 0..n {
                if union[(i, v)] != 0.0 && !seen[i] {
                    seen[i] = true;
                    stack.push(i);
                }
            }
        }
        if seen.iter().all(|&s| s) {
            return Ok(true);
        }
        // No early exit possible per-root beyond this; try the next one.
        continue 'roots;
    }
    Ok(false)
}

/// The complete network description ingested from config.
///
/// Immutable after construction; every field is validated by [`NetworkModel::new`]
/// or the config loader. The union spanning-tree property is recorded, not
/// enforced: the matrix-inequality certificates are the operative test.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkModel {
    pub dynamics: AgentDynamics,
    pub gain: Option<GainMatrix>,
    pub n_agents: usize,
    pub modes: Vec<ModeTopology>,
    pub polytope: GeneratorPolytope,
    /// Initial distribution of the mode process (defaults to uniform).
    pub initial_distribution: Vec<f64>,
    pub has_union_spanning_tree: bool,
}

impl NetworkModel {
    pub fn new(
        dynamics: AgentDynamics,
        gain: Option<DMatrix<f64>>,
        modes: Vec<ModeTopology>,
        polytope: GeneratorPolytope,
        initial_distribution: Option<Vec<f64>>,
    ) -> Result<Self> {
        if modes.is_empty() {
            return Err(Error::structure("at least one topology mode is required"));
        }
        let n = modes[0].n_nodes();
        if n < 2 {
            return Err(Error::structure("a network needs at least two agents"));
        }
        for m in &modes {
            if m.n_nodes() != n {
                return Err(Error::dimension(format!(
                    "mode {} is {}x{}, expected {n}x{n}",
                    m.id,
                    m.n_nodes(),
                    m.n_nodes()
                )));
            }
        }
        if polytope.n_modes() != modes.len() {
            return Err(Error::dimension(format!(
                "polytope is over {} modes but {} topologies were given",
                polytope.n_modes(),
                modes.len()
            )));
        }
        let gain = gain.map(|k| GainMatrix::new(k, &dynamics)).transpose()?;
        let s = modes.len();
        let initial_distribution = match initial_distribution {
            Some(mu) => {
                if mu.len() != s {
                    return Err(Error::dimension(format!(
                        "initial distribution has {} entries for {s} modes",
                        mu.len()
                    )));
                }
                let sum: f64 = mu.iter().sum();
                if (sum - 1.0).abs() > 1e-9 || mu.iter().any(|&p| p < 0.0) {
                    return Err(Error::structure(
                        "initial distribution must lie on the unit simplex",
                    ));
                }
                mu
            }
            None => vec![1.0 / s as f64; s],
        };
        let has_union_spanning_tree = check_union_spanning_tree(&modes)?;
        Ok(Self {
            dynamics,
            gain,
            n_agents: n,
            modes,
            polytope,
            initial_distribution,
            has_union_spanning_tree,
        })
    }

    pub fn n_modes(&self) -> usize {
        self.modes.len()
    }

    pub fn require_gain(&self) -> Result<&GainMatrix> {
        self.gain
            .as_ref()
            .ok_or_else(|| Error::MissingGain("model has no feedback gain K".into()))
    }

    /// Representative generator: convex mix of the polytope vertices;
    /// uniform weights when none are given.
    pub fn mixed_generator(&self, weights: Option<&[f64]>) -> Result<DMatrix<f64>> {
        match weights {
            Some(w) => self.polytope.mix(w),
            None => {
                let r = self.polytope.n_vertices();
                self.polytope.mix(&vec![1.0 / r as f64; r])
            }
        }
    }

    /// Copy with a different actuator limit (used by sweeps).
    pub fn with_u_max(&self, u_max: f64) -> Result<Self> {
        let mut out = self.clone();
        out.dynamics = AgentDynamics::new(
            self.dynamics.a.clone(),
            self.dynamics.b.clone(),
            self.dynamics.d.clone(),
            u_max,
        )?;
        Ok(out)
    }

    /// Copy with every polytope vertex scaled by `factor` (used by sweeps).
    pub fn with_scaled_rates(&self, factor: f64) -> Result<Self> {
        let mut out = self.clone();
        out.polytope = self.polytope.scaled(factor)?;
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Config document
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct ConfigDoc {
    dynamics: DynamicsSection,
    modes: Vec<ModeSection>,
    polytope: PolytopeSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    markov: Option<MarkovSection>,
}

/// Matrices are flat row-major arrays; `m`, `p`, `q` give the dimensions.
#[derive(Debug, Serialize, Deserialize)]
struct DynamicsSection {
    m: usize,
    p: usize,
    q: usize,
    u_max: f64,
    #[serde(rename = "A")]
    a: Vec<f64>,
    #[serde(rename = "B")]
    b: Vec<f64>,
    #[serde(rename = "D")]
    d: Vec<f64>,
    #[serde(rename = "K", default, skip_serializing_if = "Option::is_none")]
    k: Option<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModeSection {
    adjacency: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PolytopeSection {
    vertices: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MarkovSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    initial_distribution: Option<Vec<f64>>,
}

fn matrix_from_row_major(key: &str, rows: usize, cols: usize, data: &[f64]) -> Result<DMatrix<f64>> {
    if data.len() != rows * cols {
        return Err(Error::config(
            key,
            format!("expected {rows}x{cols} = {} entries, got {}", rows * cols, data.len()),
        ));
    }
    Ok(DMatrix::from_row_slice(rows, cols, data))
}

fn matrix_from_nested(key: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    if n == 0 {
        return Err(Error::config(key, "matrix has no rows"));
    }
    let cols = rows[0].len();
    for (i, r) in rows.iter().enumerate() {
        if r.len() != cols {
            return Err(Error::config(
                key,
                format!("row {i} has {} entries, row 0 has {cols}", r.len()),
            ));
        }
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(n, cols, &flat))
}

/// Parses and fully validates a config document.
pub fn load_model(text: &str) -> Result<NetworkModel> {
    let doc: ConfigDoc = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    let dy = &doc.dynamics;
    if dy.m == 0 || dy.p == 0 || dy.q == 0 {
        return Err(Error::config("dynamics", "dimensions m, p, q must be positive"));
    }
    let a = matrix_from_row_major("dynamics.A", dy.m, dy.m, &dy.a)?;
    let b = matrix_from_row_major("dynamics.B", dy.m, dy.p, &dy.b)?;
    let d = matrix_from_row_major("dynamics.D", dy.m, dy.q, &dy.d)?;
    let dynamics = AgentDynamics::new(a, b, d, dy.u_max)
        .map_err(|e| Error::config("dynamics", e.to_string()))?;
    let gain = dy
        .k
        .as_ref()
        .map(|k| matrix_from_row_major("dynamics.K", dy.p, dy.m, k))
        .transpose()?;

    if doc.modes.is_empty() {
        return Err(Error::config("modes", "at least one mode is required"));
    }
    let mut modes = Vec::with_capacity(doc.modes.len());
    for (id, section) in doc.modes.iter().enumerate() {
        let key = format!("modes[{id}].adjacency");
        let adj = matrix_from_nested(&key, &section.adjacency)?;
        let topo =
            ModeTopology::from_adjacency(id, adj).map_err(|e| Error::config(&key, e.to_string()))?;
        modes.push(topo);
    }

    let mut vertices = Vec::with_capacity(doc.polytope.vertices.len());
    for (i, rows) in doc.polytope.vertices.iter().enumerate() {
        vertices.push(matrix_from_nested(&format!("polytope.vertices[{i}]"), rows)?);
    }
    let polytope = GeneratorPolytope::new(vertices)
        .map_err(|e| Error::config("polytope.vertices", e.to_string()))?;

    let initial_distribution = doc
        .markov
        .as_ref()
        .and_then(|m| m.initial_distribution.clone());

    NetworkModel::new(dynamics, gain, modes, polytope, initial_distribution)
}

/// Reads and validates a config file.
pub fn load_model_path(path: &std::path::Path) -> Result<NetworkModel> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    load_model(&text)
}

/// Writes the model back out in the config schema. `load_model` of the result
/// reproduces the model exactly.
pub fn serialize_model(model: &NetworkModel) -> String {
    let dy = &model.dynamics;
    let doc = ConfigDoc {
        dynamics: DynamicsSection {
            m: dy.state_dim(),
            p: dy.input_dim(),
            q: dy.disturbance_dim(),
            u_max: dy.u_max,
            a: row_major(&dy.a),
            b: row_major(&dy.b),
            d: row_major(&dy.d),
            k: model.gain.as_ref().map(|g| row_major(&g.k)),
        },
        modes: model
            .modes
            .iter()
            .map(|m| ModeSection {
                adjacency: nested(&m.adjacency),
            })
            .collect(),
        polytope: PolytopeSection {
            vertices: model.polytope.vertices().iter().map(nested).collect(),
        },
        markov: Some(MarkovSection {
            initial_distribution: Some(model.initial_distribution.clone()),
        }),
    };
    toml::to_string_pretty(&doc).expect("config serialization cannot fail")
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.nrows() * m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.push(m[(i, j)]);
        }
    }
    out
}

fn nested(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}
