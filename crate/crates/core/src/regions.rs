//! Ellipsoid algebra for the certified sets: membership in the per-mode
//! intersection, inscribed-ellipsoid checks, boundary sampling, and 2-D
//! slices for plotting.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Membership tolerance for quadratic-level comparisons.
pub const MEMBERSHIP_TOL: f64 = 1e-9;

/// Per-mode shape matrices `P_l` and a common level `sigma`; the certified
/// region is the intersection of the ellipsoids `{z : z' P_l z <= sigma}`.
#[derive(Debug, Clone, PartialEq)]
pub struct EllipsoidFamily {
    pub shapes: Vec<DMatrix<f64>>,
    pub level: f64,
}

impl EllipsoidFamily {
    pub fn new(shapes: Vec<DMatrix<f64>>, level: f64) -> Result<Self> {
        if shapes.is_empty() {
            return Err(Error::structure("ellipsoid family needs at least one shape"));
        }
        if !(level > 0.0) {
            return Err(Error::structure(format!("level must be positive, got {level}")));
        }
        let n = shapes[0].nrows();
        for (i, p) in shapes.iter().enumerate() {
            if p.nrows() != n || p.ncols() != n {
                return Err(Error::dimension(format!(
                    "shape {i} is {}x{}, expected {n}x{n}",
                    p.nrows(),
                    p.ncols()
                )));
            }
            if min_sym_eig(p) <= 0.0 {
                return Err(Error::NotPositiveDefinite(format!("shape {i}")));
            }
        }
        Ok(Self { shapes, level })
    }

    pub fn dim(&self) -> usize {
        self.shapes[0].nrows()
    }

    pub fn n_modes(&self) -> usize {
        self.shapes.len()
    }

    /// Same shapes at a different level.
    pub fn at_level(&self, level: f64) -> Result<Self> {
        EllipsoidFamily::new(self.shapes.clone(), level)
    }
}

pub(crate) fn min_sym_eig(p: &DMatrix<f64>) -> f64 {
    let sym = (p + p.transpose()) * 0.5;
    sym.symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

pub(crate) fn max_sym_eig(p: &DMatrix<f64>) -> f64 {
    let sym = (p + p.transpose()) * 0.5;
    sym.symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Quadratic levels `z' P_l z` for every mode.
pub fn quadratic_levels(family: &EllipsoidFamily, z: &DVector<f64>) -> Result<Vec<f64>> {
    if z.len() != family.dim() {
        return Err(Error::dimension(format!(
            "point has {} entries, family lives in dimension {}",
            z.len(),
            family.dim()
        )));
    }
    Ok(family
        .shapes
        .iter()
        .map(|p| (z.transpose() * p * z)[(0, 0)])
        .collect())
}

/// True iff `z' P_l z <= sigma` for every mode (tolerance [`MEMBERSHIP_TOL`]).
pub fn contains(family: &EllipsoidFamily, z: &DVector<f64>) -> Result<bool> {
    Ok(quadratic_levels(family, z)?
        .into_iter()
        .all(|v| v <= family.level + MEMBERSHIP_TOL))
}

/// True iff the ellipsoid with shape `z_shape` (at level 1) sits inside every
/// member of the family at level 1; algebraically `z_shape - P_l >= -tol I`.
pub fn inscribed_check(z_shape: &DMatrix<f64>, family: &EllipsoidFamily) -> bool {
    family
        .shapes
        .iter()
        .all(|p| min_sym_eig(&(z_shape - p)) >= -MEMBERSHIP_TOL)
}

/// Points uniformly distributed on the shell `{z : z' P z = sigma}`: sphere
/// samples mapped through `sqrt(sigma) P^{-1/2}`.
pub fn boundary_sample(
    shape: &DMatrix<f64>,
    sigma: f64,
    count: usize,
    seed: u64,
) -> Result<Vec<DVector<f64>>> {
    let n = shape.nrows();
    if shape.ncols() != n {
        return Err(Error::dimension("shape matrix must be square"));
    }
    if !(sigma > 0.0) {
        return Err(Error::structure(format!("sigma must be positive, got {sigma}")));
    }
    let eig = ((shape + shape.transpose()) * 0.5).symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
        return Err(Error::NotPositiveDefinite("boundary_sample shape".into()));
    }
    let inv_sqrt_vals = eig.eigenvalues.map(|l| 1.0 / l.sqrt());
    let map = &eig.eigenvectors
        * DMatrix::from_diagonal(&inv_sqrt_vals)
        * eig.eigenvectors.transpose()
        * sigma.sqrt();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut g = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        let norm = g.norm();
        if norm == 0.0 {
            g[0] = 1.0;
        } else {
            g /= norm;
        }
        out.push(&map * g);
    }
    Ok(out)
}

/// Axis-aligned coordinate slice of every shape: the (i, j) principal
/// submatrix, describing `{(z_i, z_j) : z with all other coordinates zero
/// lies in the ellipsoid}`. Slices are conservative (a subset of the shadow
/// projection), so plotted regions never overstate the certificate.
pub fn slice_2d(
    family: &EllipsoidFamily,
    axes: (usize, usize),
) -> Result<Vec<DMatrix<f64>>> {
    let (i, j) = axes;
    let n = family.dim();
    if i >= n || j >= n || i == j {
        return Err(Error::structure(format!(
            "invalid slice axes ({i}, {j}) for dimension {n}"
        )));
    }
    Ok(family
        .shapes
        .iter()
        .map(|p| {
            DMatrix::from_row_slice(2, 2, &[p[(i, i)], p[(i, j)], p[(j, i)], p[(j, j)]])
        })
        .collect())
}

/// Plot-ready description of one 2-D ellipse `{v : v' S v <= level}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EllipseParams {
    pub center: [f64; 2],
    pub semi_axes: [f64; 2],
    pub rotation_rad: f64,
}

/// Semi-axes and rotation of the 2-D ellipse with shape `s2` at `level`.
pub fn ellipse_params(s2: &DMatrix<f64>, level: f64) -> Result<EllipseParams> {
    if s2.nrows() != 2 || s2.ncols() != 2 {
        return Err(Error::dimension("ellipse_params needs a 2x2 shape"));
    }
    let eig = ((s2 + s2.transpose()) * 0.5).symmetric_eigen();
    if eig.eigenvalues.iter().any(|&l| l <= 0.0) {
        return Err(Error::NotPositiveDefinite("ellipse shape".into()));
    }
    // Semi-axis along eigenvector v_k is sqrt(level / lambda_k).
    let a0 = (level / eig.eigenvalues[0]).sqrt();
    let a1 = (level / eig.eigenvalues[1]).sqrt();
    let v0 = eig.eigenvectors.column(0);
    Ok(EllipseParams {
        center: [0.0, 0.0],
        semi_axes: [a0, a1],
        rotation_rad: v0[1].atan2(v0[0]),
    })
}

/// JSON export of a certified region: shapes, level, and slice ellipses.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionExport {
    pub level: f64,
    pub slice_axes: [usize; 2],
    /// How the 2-D curves were obtained from the full-dimensional sets.
    pub slice_method: String,
    pub modes: Vec<RegionMode>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionMode {
    pub shape: Vec<Vec<f64>>,
    pub slice_shape: Vec<Vec<f64>>,
    pub ellipse: EllipseParams,
}

/// Builds the export document for `family` sliced along `axes`.
pub fn export_region(family: &EllipsoidFamily, axes: (usize, usize)) -> Result<RegionExport> {
    let slices = slice_2d(family, axes)?;
    let modes = family
        .shapes
        .iter()
        .zip(&slices)
        .map(|(p, s)| {
            Ok(RegionMode {
                shape: to_nested(p),
                slice_shape: to_nested(s),
                ellipse: ellipse_params(s, family.level)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RegionExport {
        level: family.level,
        slice_axes: [axes.0, axes.1],
        slice_method: "principal-submatrix-slice".into(),
        modes,
    })
}

fn to_nested(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
        let m = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        &m * m.transpose() + DMatrix::identity(n, n) * 0.2
    }

    #[test]
    fn origin_is_in_every_family() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shapes = vec![random_spd(&mut rng, 4), random_spd(&mut rng, 4)];
        let family = EllipsoidFamily::new(shapes, 1.0).unwrap();
        assert!(contains(&family, &DVector::zeros(4)).unwrap());
    }

    #[test]
    fn just_outside_unit_ball_is_out() {
        let family = EllipsoidFamily::new(vec![DMatrix::identity(3, 3)], 1.0).unwrap();
        let mut z = DVector::zeros(3);
        z[0] = 1.0 + 1e-3;
        assert!(!contains(&family, &z).unwrap());
        z[0] = 1.0 - 1e-3;
        assert!(contains(&family, &z).unwrap());
    }

    #[test]
    fn membership_is_conjunction_of_per_mode_tests() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let shapes: Vec<_> = (0..3).map(|_| random_spd(&mut rng, 4)).collect();
        let family = EllipsoidFamily::new(shapes.clone(), 2.0).unwrap();
        for _ in 0..200 {
            let z = DVector::from_fn(4, |_, _| rng.gen_range(-2.0..2.0));
            let direct = shapes
                .iter()
                .all(|p| (z.transpose() * p * &z)[(0, 0)] <= 2.0 + MEMBERSHIP_TOL);
            assert_eq!(contains(&family, &z).unwrap(), direct);
        }
    }

    #[test]
    fn inscribed_check_scalar_cases() {
        let family = EllipsoidFamily::new(vec![DMatrix::identity(3, 3)], 1.0).unwrap();
        assert!(inscribed_check(&(DMatrix::identity(3, 3) * 2.0), &family));
        assert!(!inscribed_check(&(DMatrix::identity(3, 3) * 0.5), &family));
    }

    #[test]
    fn inscribed_check_agrees_with_boundary_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..20 {
            let p = random_spd(&mut rng, 3);
            let z_shape = random_spd(&mut rng, 3);
            let family = EllipsoidFamily::new(vec![p.clone()], 1.0).unwrap();
            let inscribed = inscribed_check(&z_shape, &family);
            // Sample the boundary of E(z_shape, 1) and check containment in
            // E(p, 1). Strict separation in either direction confirms.
            let samples = boundary_sample(&z_shape, 1.0, 1000, trial).unwrap();
            let all_in = samples
                .iter()
                .all(|z| (z.transpose() * &p * z)[(0, 0)] <= 1.0 + 1e-6);
            if inscribed {
                assert!(all_in, "inscribed family violated by a boundary sample");
            } else {
                // A definite violation of Z >= P shows up on the boundary
                // unless it is marginal; allow marginal cases through.
                let worst = samples
                    .iter()
                    .map(|z| (z.transpose() * &p * z)[(0, 0)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let margin = min_sym_eig(&(&z_shape - &p));
                if margin < -1e-3 {
                    assert!(worst > 1.0, "expected a sampled violation, worst {worst}");
                }
            }
        }
    }

    #[test]
    fn boundary_samples_live_on_the_shell() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_spd(&mut rng, 4);
        let sigma = 2.5;
        for z in boundary_sample(&p, sigma, 500, 9).unwrap() {
            let level = (z.transpose() * &p * &z)[(0, 0)];
            assert!((level - sigma).abs() <= 1e-9 * sigma.max(1.0));
        }
    }

    #[test]
    fn identity_shape_gives_unit_norm_points() {
        for z in boundary_sample(&DMatrix::identity(3, 3), 1.0, 100, 1).unwrap() {
            assert!((z.norm() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn boundary_sample_mean_is_near_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = random_spd(&mut rng, 3);
        let samples = boundary_sample(&p, 1.0, 10_000, 12).unwrap();
        let mut mean = DVector::zeros(3);
        for z in &samples {
            mean += z;
        }
        mean /= samples.len() as f64;
        // Component standard error is about r/sqrt(n); allow 4 sigma with the
        // largest semi-axis as the scale.
        let r_max = 1.0 / min_sym_eig(&p).sqrt();
        assert!(mean.norm() <= 4.0 * r_max / (samples.len() as f64).sqrt() * 3.0);
    }

    #[test]
    fn slice_of_diagonal_shape_is_its_submatrix() {
        let p = DMatrix::from_diagonal(&DVector::from_row_slice(&[1.0, 4.0]));
        let family = EllipsoidFamily::new(vec![p.clone()], 1.0).unwrap();
        let slices = slice_2d(&family, (0, 1)).unwrap();
        assert_eq!(slices[0], p);
    }

    #[test]
    fn slice_of_identity_is_unit_disk() {
        let family = EllipsoidFamily::new(vec![DMatrix::identity(4, 4)], 1.0).unwrap();
        let slices = slice_2d(&family, (0, 1)).unwrap();
        assert_eq!(slices[0], DMatrix::identity(2, 2));
        let params = ellipse_params(&slices[0], 1.0).unwrap();
        assert!((params.semi_axes[0] - 1.0).abs() < 1e-12);
        assert!((params.semi_axes[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn slice_membership_implies_full_membership_for_padded_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = random_spd(&mut rng, 4);
        let family = EllipsoidFamily::new(vec![p.clone()], 1.0).unwrap();
        let slices = slice_2d(&family, (1, 3)).unwrap();
        for _ in 0..200 {
            let v = DVector::from_fn(2, |_, _| rng.gen_range(-3.0..3.0));
            let in_slice = (v.transpose() * &slices[0] * &v)[(0, 0)] <= 1.0 + MEMBERSHIP_TOL;
            let mut z = DVector::zeros(4);
            z[1] = v[0];
            z[3] = v[1];
            assert_eq!(in_slice, contains(&family, &z).unwrap());
        }
    }

    #[test]
    fn rejects_invalid_axes() {
        let family = EllipsoidFamily::new(vec![DMatrix::identity(3, 3)], 1.0).unwrap();
        assert!(slice_2d(&family, (0, 3)).is_err());
        assert!(slice_2d(&family, (1, 1)).is_err());
    }

    #[test]
    fn membership_invariant_under_congruence() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let p = random_spd(&mut rng, 3);
            let family = EllipsoidFamily::new(vec![p.clone()], 1.5).unwrap();
            // Random invertible map.
            let m = {
                let mut m = DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
                m += DMatrix::identity(3, 3) * 2.0;
                m
            };
            let m_inv = m.clone().try_inverse().unwrap();
            let p_mapped = m_inv.transpose() * &p * &m_inv;
            let mapped = EllipsoidFamily::new(vec![p_mapped], 1.5).unwrap();
            for _ in 0..50 {
                let z = DVector::from_fn(3, |_, _| rng.gen_range(-2.0..2.0));
                let a = contains(&family, &z).unwrap();
                let b = contains(&mapped, &(&m * &z)).unwrap();
                // Tolerance effects only matter exactly on the shell.
                let lv = quadratic_levels(&family, &z).unwrap()[0];
                if (lv - 1.5).abs() > 1e-6 {
                    assert_eq!(a, b);
                }
            }
        }
    }

    #[test]
    fn inscribed_and_member_of_inner_implies_member_of_family() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for trial in 0..10 {
            let p1 = random_spd(&mut rng, 3);
            let p2 = random_spd(&mut rng, 3);
            let family = EllipsoidFamily::new(vec![p1.clone(), p2.clone()], 1.0).unwrap();
            // Z = max eigenvalue envelope: P1 + P2 dominates both.
            let z_shape = &p1 + &p2;
            assert!(inscribed_check(&z_shape, &family));
            for z in boundary_sample(&z_shape, 1.0, 200, trial + 100).unwrap() {
                assert!(contains(&family, &z).unwrap());
            }
        }
    }
}
