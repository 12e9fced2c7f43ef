//! Boundary-value solving on the flat cylinder through its double.
//!
//! The cylinder S^1 x [0, L] embeds isometrically in the torus
//! S^1 x (circle of circumference 2(L + delta)); data extended to the
//! double orthogonally to the harmonic basis can be solved there with
//! the boundary-free machinery and restricted back. Only the flat
//! product double is built; with constant coefficients the blended
//! operator on the double coincides with the original, so no cutoff
//! enters.

use crate::elliptic::{
    flat_dot, flat_norm, min_norm_solve_with, Coefficient, EllipticError, EllipticOperator,
    HarmonicBasis,
};
use crate::fields::{derivative_magnitude_fields, FieldError, GridSection};
use crate::geometry::MetricField;
use crate::grid::Grid;
use crate::C64;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DoublingError {
    #[error("grid misaligned with the doubling: {0}")]
    GridMisaligned(String),
    #[error("Gram matrix of the masked harmonic basis is numerically singular (cond {cond:.3e}); the system is not free")]
    GramSingular { cond: f64 },
    #[error("extension failed orthogonality: residual {residual:.3e} above {allowance:.3e}")]
    NotOrthogonal { residual: f64, allowance: f64 },
    #[error(transparent)]
    Elliptic(#[from] EllipticError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("invalid doubling setup: {0}")]
    Invalid(String),
}

/// The cylinder N, its double Gamma, and the node bookkeeping between
/// them.
#[derive(Debug)]
pub struct DoubledDomain {
    pub inner: Grid,
    pub double: Grid,
    pub length: f64,
    pub margin: f64,
    /// inner node -> double node, an isometric embedding.
    pub embedding: Vec<usize>,
    /// Indicator of the embedded copy on the double's nodes.
    pub indicator_inner: Vec<f64>,
    /// Complement indicator; the two sum to one at every node.
    pub indicator_rest: Vec<f64>,
}

const ALIGN_TOL: f64 = 1e-9;

/// Builds the double of S^1 x [0, L] with extension margin `delta`.
/// The bounded axis of `inner` must place both y = L and y = L + delta
/// on grid lines of the common spacing.
pub fn build_double(inner: &Grid, delta: f64) -> Result<DoubledDomain, DoublingError> {
    if inner.ndim() != 2 || !inner.is_periodic(0) || inner.is_periodic(1) {
        return Err(DoublingError::Invalid(
            "expected S^1 x [0, L]: axis 0 periodic, axis 1 bounded".into(),
        ));
    }
    if delta < 0.0 {
        return Err(DoublingError::Invalid("negative extension margin".into()));
    }
    let length = inner.extents()[1];
    let h = inner.spacing(1);
    let ny_double_f = 2.0 * (length + delta) / h;
    let ny_double = ny_double_f.round();
    if (ny_double_f - ny_double).abs() > ALIGN_TOL || ny_double < 2.0 {
        return Err(DoublingError::GridMisaligned(format!(
            "2(L + delta)/h = {ny_double_f} is not an integer node count"
        )));
    }
    let ny_double = ny_double as usize;
    let nx = inner.dims()[0];
    let double = Grid::torus(&[nx, ny_double], &[inner.extents()[0], 2.0 * (length + delta)]);
    debug_assert!((double.spacing(1) - h).abs() <= ALIGN_TOL * h);

    let ny_inner = inner.dims()[1];
    let mut embedding = Vec::with_capacity(inner.len());
    for node in inner.nodes() {
        let m = inner.multi(node);
        embedding.push(double.index(&m));
    }
    let mut indicator_inner = vec![0.0; double.len()];
    for node in double.nodes() {
        let j = node % ny_double;
        if j < ny_inner {
            indicator_inner[node] = 1.0;
        }
    }
    let indicator_rest: Vec<f64> = indicator_inner.iter().map(|v| 1.0 - v).collect();
    if !indicator_rest.iter().any(|&v| v > 0.0) {
        return Err(DoublingError::Invalid("the complement of the copy is empty".into()));
    }
    Ok(DoubledDomain {
        inner: inner.clone(),
        double,
        length,
        margin: delta,
        embedding,
        indicator_inner,
        indicator_rest,
    })
}

impl DoubledDomain {
    /// Zero-extends a section on the cylinder to the double.
    pub fn embed(&self, u: &GridSection) -> Result<GridSection, DoublingError> {
        if u.grid() != &self.inner {
            return Err(DoublingError::Invalid("section lives on a different grid".into()));
        }
        let rank = u.rank();
        let mut out = GridSection::zeros(self.double.clone(), rank);
        for (node, &target) in self.embedding.iter().enumerate() {
            for c in 0..rank {
                out.data_mut()[target * rank + c] = u.value(node, c);
            }
        }
        Ok(out)
    }

    /// Restricts a section on the double to the cylinder.
    pub fn restrict(&self, u: &GridSection) -> Result<GridSection, DoublingError> {
        if u.grid() != &self.double {
            return Err(DoublingError::Invalid("section lives on a different grid".into()));
        }
        let rank = u.rank();
        let mut out = GridSection::zeros(self.inner.clone(), rank);
        for (node, &source) in self.embedding.iter().enumerate() {
            for c in 0..rank {
                out.data_mut()[node * rank + c] = u.value(source, c);
            }
        }
        Ok(out)
    }

    /// Inner nodes strictly between the two boundary circles.
    pub fn interior_nodes(&self) -> Vec<usize> {
        let ny = self.inner.dims()[1];
        self.inner
            .nodes()
            .filter(|node| {
                let j = node % ny;
                j > 0 && j < ny - 1
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ExtensionTrace {
    pub lambda: Vec<(f64, f64)>,
    pub mu: Vec<(f64, f64)>,
    pub gram_condition: f64,
    /// max_j |<omega', e_j>| / |omega|.
    pub orthogonality_residual: f64,
}

pub struct Extension {
    pub section: GridSection,
    pub trace: ExtensionTrace,
}

const GRAM_CONDITION_CAP: f64 = 1e8;
const ORTHOGONALITY_TOL: f64 = 1e-10;

/// Extends data on the cylinder to the double, orthogonally to every
/// harmonic section: omega' = omega 1_N - sum_k mu_k e_k 1_{Gamma\N}
/// with the Gram system gamma mu = lambda. An invertible Gram matrix
/// is the discrete witness that the masked harmonic system is free.
pub fn orthogonal_extension(
    domain: &DoubledDomain,
    omega: &GridSection,
    basis: &HarmonicBasis,
) -> Result<Extension, DoublingError> {
    let embedded = domain.embed(omega)?;
    let k = basis.len();
    if k == 0 {
        let norm = flat_norm(&embedded);
        return Ok(Extension {
            section: embedded,
            trace: ExtensionTrace {
                lambda: vec![],
                mu: vec![],
                gram_condition: 1.0,
                orthogonality_residual: if norm > 0.0 { 0.0 } else { 0.0 },
            },
        });
    }
    let masked: Vec<GridSection> = basis
        .sections
        .iter()
        .map(|e| e.masked(&domain.indicator_rest))
        .collect();
    let mut gram = DMatrix::<C64>::zeros(k, k);
    for j in 0..k {
        for i in 0..k {
            gram[(j, i)] = flat_dot(&masked[i], &masked[j]);
        }
    }
    let svd = gram.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !(cond < GRAM_CONDITION_CAP) {
        return Err(DoublingError::GramSingular { cond });
    }
    let lambda = DVector::<C64>::from_iterator(
        k,
        basis.sections.iter().map(|e| flat_dot(&embedded, e)),
    );
    let mu = gram
        .lu()
        .solve(&lambda)
        .ok_or(DoublingError::GramSingular { cond })?;

    let mut section = embedded;
    for (j, e) in masked.iter().enumerate() {
        section.add_scaled(e, -mu[j]);
    }
    let scale = flat_norm(omega).max(1e-300);
    let residual = basis
        .sections
        .iter()
        .map(|e| flat_dot(&section, e).norm())
        .fold(0.0f64, f64::max)
        / scale;
    if residual > ORTHOGONALITY_TOL {
        return Err(DoublingError::NotOrthogonal {
            residual,
            allowance: ORTHOGONALITY_TOL,
        });
    }
    // The complement correction leaves the copy untouched node for node.
    for (node, &target) in domain.embedding.iter().enumerate() {
        for c in 0..omega.rank() {
            debug_assert_eq!(section.value(target, c), omega.value(node, c));
        }
    }
    Ok(Extension {
        section,
        trace: ExtensionTrace {
            lambda: lambda.iter().map(|z| (z.re, z.im)).collect(),
            mu: mu.iter().map(|z| (z.re, z.im)).collect(),
            gram_condition: cond,
            orthogonality_residual: residual,
        },
    })
}

/// Centered-difference application of the operator on the double,
/// independent of the spectral path: first derivatives use the
/// two-point centered stencil, second derivatives the three-point one.
fn fd_apply(op: &EllipticOperator, u: &GridSection) -> GridSection {
    let grid = op.grid();
    let rank = op.rank();
    let fd_partial = |f: &GridSection, alpha: &[u32]| -> GridSection {
        let mut cur = f.clone();
        for (axis, &a) in alpha.iter().enumerate() {
            let h = grid.spacing(axis);
            let mut step = vec![0isize; grid.ndim()];
            for pass in 0..a {
                let second = a - pass >= 2;
                let mut next = GridSection::zeros(grid.clone(), rank);
                for node in grid.nodes() {
                    step[axis] = 1;
                    let up = grid.step(node, &step).unwrap();
                    step[axis] = -1;
                    let dn = grid.step(node, &step).unwrap();
                    step[axis] = 0;
                    for c in 0..rank {
                        let v = if second {
                            (cur.value(up, c) - cur.value(node, c) * 2.0 + cur.value(dn, c))
                                / (h * h)
                        } else {
                            (cur.value(up, c) - cur.value(dn, c)) / (2.0 * h)
                        };
                        next.data_mut()[node * rank + c] = v;
                    }
                }
                cur = next;
                // A three-point pass consumes both derivative orders.
                if second {
                    break;
                }
            }
        }
        cur
    };
    let mut out = GridSection::zeros(grid.clone(), rank);
    for t in op.terms() {
        let d = fd_partial(u, &t.alpha);
        for node in grid.nodes() {
            let m = match &t.coef {
                Coefficient::Constant(m) => m,
                Coefficient::Variable(v) => &v[node],
            };
            for i in 0..rank {
                let mut acc = C64::new(0.0, 0.0);
                for j in 0..rank {
                    acc += m[(i, j)] * d.value(node, j);
                }
                out.data_mut()[node * rank + i] += acc;
            }
        }
    }
    out
}

#[derive(Debug, Serialize)]
pub struct BoundarySolveReport {
    /// Relative residual of the double's solve, restricted to interior
    /// nodes of the copy (spectral path).
    pub spectral_residual: f64,
    /// Relative residual of an independent centered-difference
    /// discretization at interior nodes; decreases under refinement.
    pub fd_residual: f64,
    /// |u|_{W^{m,r}(N)} / |omega|_{L^r(N)}.
    pub norm_ratio: f64,
    pub trace: ExtensionTrace,
}

pub struct BoundarySolution {
    pub u: GridSection,
    pub report: BoundarySolveReport,
}

/// Solves D u = omega on the cylinder by extension, boundary-free
/// solve on the double, and restriction.
pub fn boundary_solve(
    op: &EllipticOperator,
    domain: &DoubledDomain,
    omega: &GridSection,
    r: f64,
) -> Result<BoundarySolution, DoublingError> {
    if op.grid() != &domain.double {
        return Err(DoublingError::Invalid("operator must live on the double".into()));
    }
    let basis = crate::elliptic::harmonic_basis(op)?;
    let ext = orthogonal_extension(domain, omega, &basis)?;
    let u_double = min_norm_solve_with(op, &ext.section, &basis)?;
    let u = domain.restrict(&u_double)?;

    let applied = op.apply(&u_double)?;
    let fd = fd_apply(op, &u_double);
    let interior = domain.interior_nodes();
    let mut spectral = 0.0f64;
    let mut fd_res = 0.0f64;
    let mut scale = 0.0f64;
    for &node in &interior {
        let target = domain.embedding[node];
        for c in 0..omega.rank() {
            let want = omega.value(node, c);
            scale = scale.max(want.norm());
            spectral = spectral.max((applied.value(target, c) - want).norm());
            fd_res = fd_res.max((fd.value(target, c) - want).norm());
        }
    }
    if scale > 0.0 {
        spectral /= scale;
        fd_res /= scale;
    }

    // W^{m,r}(N) assembled from spectral derivatives on the double,
    // integrated with the cylinder's trapezoid weights.
    let metric = MetricField::flat(domain.double.clone());
    let mags = derivative_magnitude_fields(&metric, &u_double, op.order())?;
    let mut w_norm = 0.0;
    for layer in &mags {
        let mut acc = 0.0;
        for (node, &target) in domain.embedding.iter().enumerate() {
            acc += layer[target].powf(r) * domain.inner.cell_weight(node);
        }
        w_norm += acc.powf(1.0 / r);
    }
    let mut omega_norm = 0.0;
    for node in domain.inner.nodes() {
        omega_norm += u_fiber(omega, node).powf(r) * domain.inner.cell_weight(node);
    }
    let omega_norm = omega_norm.powf(1.0 / r);
    let norm_ratio = if omega_norm > 0.0 { w_norm / omega_norm } else { 0.0 };

    Ok(BoundarySolution {
        u,
        report: BoundarySolveReport {
            spectral_residual: spectral,
            fd_residual: fd_res,
            norm_ratio,
            trace: ext.trace,
        },
    })
}

fn u_fiber(u: &GridSection, node: usize) -> f64 {
    (0..u.rank()).map(|c| u.value(node, c).norm_sqr()).sum::<f64>().sqrt()
}

/// Sup distance between a coarse solution and a refined one on the
/// coarse (common) nodes; the refined grid must halve the spacing.
pub fn restriction_delta(coarse: &GridSection, fine: &GridSection) -> Result<f64, DoublingError> {
    let gc = coarse.grid();
    let gf = fine.grid();
    if gc.ndim() != gf.ndim() || coarse.rank() != fine.rank() {
        return Err(DoublingError::Invalid("solution shapes differ".into()));
    }
    for axis in 0..gc.ndim() {
        let expect = if gc.is_periodic(axis) {
            2 * gc.dims()[axis]
        } else {
            2 * (gc.dims()[axis] - 1) + 1
        };
        if gf.dims()[axis] != expect || gf.is_periodic(axis) != gc.is_periodic(axis) {
            return Err(DoublingError::Invalid(format!(
                "axis {axis}: {} nodes is not a halving of {}",
                gf.dims()[axis],
                gc.dims()[axis]
            )));
        }
    }
    let mut worst = 0.0f64;
    for node in gc.nodes() {
        let m = gc.multi(node);
        let mf: Vec<usize> = m.iter().map(|&i| 2 * i).collect();
        let fnode = gf.index(&mf);
        for c in 0..coarse.rank() {
            worst = worst.max((coarse.value(node, c) - fine.value(fnode, c)).norm());
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use core::f64::consts::{PI, TAU};

    fn cylinder(nx: usize, ny: usize, length: f64) -> Grid {
        Grid::new(&[nx, ny], &[TAU, length], &[true, false])
    }

    #[test]
    fn double_geometry_and_embedding_are_isometric() {
        let inner = cylinder(16, 17, PI);
        let domain = build_double(&inner, PI / 8.0).unwrap();
        assert_eq!(domain.double.dims(), &[16, 36]);
        // vol Gamma = 2 vol M with M the extended cylinder.
        assert_relative_eq!(
            domain.double.volume(),
            2.0 * TAU * (PI + PI / 8.0),
            max_relative = 1e-12
        );
        for node in inner.nodes() {
            let target = domain.embedding[node];
            assert_eq!(inner.coord(node, 0), domain.double.coord(target, 0));
            assert_relative_eq!(
                inner.coord(node, 1),
                domain.double.coord(target, 1),
                epsilon = 1e-12
            );
            assert_eq!(domain.indicator_inner[target], 1.0);
        }
        let covered: f64 = domain.indicator_inner.iter().sum();
        assert_eq!(covered as usize, inner.len());
        for node in domain.double.nodes() {
            assert_eq!(domain.indicator_inner[node] + domain.indicator_rest[node], 1.0);
        }
    }

    #[test]
    fn zero_margin_is_accepted_and_offsets_rejected() {
        let inner = cylinder(8, 9, PI);
        let domain = build_double(&inner, 0.0).unwrap();
        assert_eq!(domain.double.dims(), &[8, 16]);
        let h = inner.spacing(1);
        let err = build_double(&inner, h / 3.0).unwrap_err();
        assert!(matches!(err, DoublingError::GridMisaligned(_)));
    }

    #[test]
    fn extension_against_the_constant_kernel_matches_the_closed_form() {
        let inner = cylinder(16, 17, PI);
        let domain = build_double(&inner, 0.0).unwrap();
        let op = EllipticOperator::laplacian(domain.double.clone());
        let basis = crate::elliptic::harmonic_basis(&op).unwrap();
        assert_eq!(basis.len(), 1);

        let omega = GridSection::from_scalar_fn(inner.clone(), |_| C64::new(1.0, 0.0));
        let ext = orthogonal_extension(&domain, &omega, &basis).unwrap();

        // One-dimensional Gram system in closed form: gamma_11 =
        // |e_1 1_rest|^2, lambda_1 = <1_N, e_1>, both against the
        // uniform cell measure of the double. The kernel section's
        // overall phase is arbitrary, so the oracle reads it off.
        let grid = &domain.double;
        let cell = grid.volume() / grid.len() as f64;
        let e = basis.sections[0].value(0, 0);
        assert_relative_eq!(e.norm(), 1.0 / grid.volume().sqrt(), max_relative = 1e-12);
        let n_inner: f64 = domain.indicator_inner.iter().sum();
        let n_rest: f64 = domain.indicator_rest.iter().sum();
        let gamma = e.norm_sqr() * n_rest * cell;
        let lambda = e.conj() * n_inner * cell;
        let mu = lambda / gamma;
        let got_mu = C64::new(ext.trace.mu[0].0, ext.trace.mu[0].1);
        let got_lambda = C64::new(ext.trace.lambda[0].0, ext.trace.lambda[0].1);
        assert_relative_eq!((got_mu - mu).norm(), 0.0, epsilon = 1e-12 * mu.norm());
        assert_relative_eq!((got_lambda - lambda).norm(), 0.0, epsilon = 1e-12 * lambda.norm());
        assert_eq!(ext.trace.gram_condition, 1.0);
        assert!(ext.trace.orthogonality_residual <= 1e-12);

        // The copy is untouched, the complement carries -mu e_1.
        for (node, &target) in domain.embedding.iter().enumerate() {
            assert_eq!(ext.section.value(target, 0), omega.value(node, 0));
        }
        for node in grid.nodes() {
            if domain.indicator_rest[node] == 1.0 {
                let want = -mu * e;
                assert!((ext.section.value(node, 0) - want).norm() <= 1e-12 * want.norm());
            }
        }
    }

    #[test]
    fn orthogonal_data_extends_by_zero() {
        let inner = cylinder(16, 9, PI);
        let domain = build_double(&inner, 0.0).unwrap();
        let op = EllipticOperator::laplacian(domain.double.clone());
        let basis = crate::elliptic::harmonic_basis(&op).unwrap();
        // Zero mean on every ring: already orthogonal to constants.
        let omega = GridSection::from_scalar_fn(inner.clone(), |x| C64::new(x[0].cos(), 0.0));
        let ext = orthogonal_extension(&domain, &omega, &basis).unwrap();
        assert!(ext.trace.mu[0].0.abs() <= 1e-12 && ext.trace.mu[0].1.abs() <= 1e-12);
        for node in domain.double.nodes() {
            if domain.indicator_rest[node] == 1.0 {
                assert!(ext.section.value(node, 0).norm() <= 1e-14);
            }
        }
    }

    fn boundary_problem(nx: usize) -> (DoubledDomain, EllipticOperator, GridSection) {
        let ny = nx / 2 + 1;
        let inner = cylinder(nx, ny, PI);
        let domain = build_double(&inner, 0.0).unwrap();
        let op = EllipticOperator::laplacian(domain.double.clone());
        let omega = GridSection::from_scalar_fn(inner.clone(), |x| {
            C64::new((x[1]).sin() * x[0].cos(), 0.0)
        });
        (domain, op, omega)
    }

    #[test]
    fn boundary_solve_satisfies_the_equation_inside() {
        let (domain, op, omega) = boundary_problem(32);
        let sol = boundary_solve(&op, &domain, &omega, 2.0).unwrap();
        assert!(sol.report.spectral_residual <= 1e-8, "{}", sol.report.spectral_residual);
        assert!(sol.report.fd_residual.is_finite());
        assert!(sol.report.norm_ratio.is_finite() && sol.report.norm_ratio > 0.0);
        assert!(sol.report.trace.orthogonality_residual <= 1e-10);
        assert_eq!(sol.u.grid(), &domain.inner);
    }

    #[test]
    fn zero_data_solves_to_zero() {
        let (domain, op, _) = boundary_problem(16);
        let omega = GridSection::zeros(domain.inner.clone(), 1);
        let sol = boundary_solve(&op, &domain, &omega, 2.0).unwrap();
        assert!(flat_norm(&sol.u) <= 1e-12);
        assert_eq!(sol.report.norm_ratio, 0.0);
    }

    #[test]
    fn refinement_shrinks_the_fd_residual_and_solution_delta() {
        let (d16, op16, w16) = boundary_problem(16);
        let (d32, op32, w32) = boundary_problem(32);
        let (d64, op64, w64) = boundary_problem(64);
        let s16 = boundary_solve(&op16, &d16, &w16, 2.0).unwrap();
        let s32 = boundary_solve(&op32, &d32, &w32, 2.0).unwrap();
        let s64 = boundary_solve(&op64, &d64, &w64, 2.0).unwrap();
        assert!(s32.report.fd_residual < s16.report.fd_residual);
        assert!(s64.report.fd_residual < s32.report.fd_residual);
        let d_coarse = restriction_delta(&s16.u, &s32.u).unwrap();
        let d_fine = restriction_delta(&s32.u, &s64.u).unwrap();
        assert!(d_fine < d_coarse, "{d_fine} vs {d_coarse}");
        // Norm ratios agree across resolutions (the bound is stable).
        assert_relative_eq!(
            s32.report.norm_ratio,
            s64.report.norm_ratio,
            max_relative = 0.1
        );
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let inner = cylinder(16, 9, PI);
        let domain = build_double(&inner, 0.0).unwrap();
        let other = GridSection::zeros(Grid::torus(&[16, 16], &[TAU, TAU]), 1);
        assert!(domain.embed(&other).is_err());
        let coarse = GridSection::zeros(cylinder(16, 9, PI), 1);
        let fine = GridSection::zeros(cylinder(32, 18, PI), 1);
        assert!(restriction_delta(&coarse, &fine).is_err());
    }
}
