//! End-to-end acceptance checks. Each test prints one verdict line
//! with its runtime so a full run reads as a short scoreboard.

use core::f64::consts::{PI, TAU};
use lirlab::covering::{build_cover, overlap_bound, overlap_stats};
use lirlab::doubling::{boundary_solve, build_double, restriction_delta};
use lirlab::elliptic::{
    flat_dot, flat_norm, harmonic_basis, harmonic_projection, local_series_solve,
    min_norm_solve_with, EllipticOperator,
};
use lirlab::exponents::{
    exponent_chain, interpolation_exponents, rat, step_bound, step_count_by_simulation,
    ExtendedExponent,
};
use lirlab::fields::{scaling_check, GridSection, ScalingProfile};
use lirlab::geometry::{
    build_metric, cf10_audit, inject_radius_field, radius_field, AdmissibleRadiusField,
    BallNodes, ManifoldModel, MetricField, RadiusProvenance,
};
use lirlab::lir::{bootstrap, constants_spread, verify_global_weighted, verify_local_estimate};
use lirlab::{Grid, C64};
use num::ToPrimitive;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn flat_torus(dims: &[usize]) -> MetricField {
    let extents = vec![TAU; dims.len()];
    build_metric(&ManifoldModel::FlatTorus { extents }, dims).unwrap()
}

fn verdict(index: u32, label: &str, ok: bool, start: Instant, budget: f64) -> bool {
    let elapsed = start.elapsed().as_secs_f64();
    let ok = ok && elapsed < budget;
    println!(
        "acceptance {index:02} {label}: {} ({elapsed:.1}s, budget {budget:.0}s)",
        if ok { "pass" } else { "FAIL" }
    );
    ok
}

#[test]
fn cover_overlap_stays_under_the_dimensional_bound() {
    let start = Instant::now();
    let metric = flat_torus(&[128, 128]);
    let field = radius_field(&metric, 0.1, 2).unwrap();
    let cover = build_cover(&metric, &field).unwrap();
    let stats = overlap_stats(&cover, &metric, 1);

    let bound = overlap_bound(0.1, 2);
    assert!((bound - 17600.0).abs() < 1e-9, "bound {bound}");
    let ok = cover.max_overlap as f64 <= bound && stats.pass && stats.integral_pass;
    println!(
        "  measured max overlap {} of allowed {bound}",
        cover.max_overlap
    );
    assert!(verdict(1, "cover overlap", ok, start, 10.0), "max overlap {}", cover.max_overlap);
}

#[test]
fn nearby_radii_are_comparable_on_both_field_kinds() {
    let start = Instant::now();
    let metric2 = flat_torus(&[128, 128]);
    let computed = radius_field(&metric2, 0.1, 2).unwrap();
    let audit_a = cf10_audit(&metric2, &computed, 10_000, 2);

    let metric3 = flat_torus(&[12, 12, 12]);
    let values: Vec<f64> = metric3
        .grid()
        .nodes()
        .map(|node| {
            if metric3.grid().coords(node)[0] < PI {
                0.3
            } else {
                1.0
            }
        })
        .collect();
    let injected = inject_radius_field(&metric3, values, 0.1, 1, 3).unwrap();
    let audit_b = cf10_audit(&metric3, &injected, 10_000, 4);

    let ok = audit_a.violations == 0
        && audit_b.violations == 0
        && audit_a.pairs_checked >= 10_000
        && audit_b.pairs_checked >= 10_000;
    assert!(
        verdict(2, "radius comparability", ok, start, 5.0),
        "violations {} / {}",
        audit_a.violations,
        audit_b.violations
    );
}

#[test]
fn exponent_arithmetic_matches_the_simulated_ladder() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut ok = true;
    for _ in 0..1000 {
        let n = rng.gen_range(1u32..=8);
        let m = rng.gen_range(1u32..=4);
        let q = rng.gen_range(1i64..=4);
        let p = rng.gen_range(2 * q..=32 * q);
        let r = rat(p, q);

        let chain = exponent_chain(n, m, &r).unwrap();
        let r_ext = ExtendedExponent::Finite(r.clone());
        let below = r_ext.ge(chain.t(chain.l - 1));
        let above = chain.t(chain.l).ge(&r_ext) && *chain.t(chain.l) != r_ext;
        ok &= below && above;

        // Every finite rung must agree with the floating-point ladder.
        let tau = m as f64 / n as f64;
        for (j, t) in chain.chain.iter().enumerate() {
            if let Some(t) = t.as_ratio() {
                let inv = 0.5 - j as f64 * tau;
                ok &= (t.to_f64().unwrap() - 1.0 / inv).abs() <= 1e-9 * (1.0 / inv).abs();
            }
        }

        let tau = rat(m as i64, n as i64);
        let bound = step_bound(&r, &rat(2, 1), &tau).unwrap();
        let sim = step_count_by_simulation(&r, &rat(2, 1), &tau).unwrap();
        ok &= sim <= bound;
    }

    let mut checked = 0;
    while checked < 1000 {
        let n = rng.gen_range(2u32..=12);
        let m = rng.gen_range(1u32..=3);
        let k = rng.gen_range(1u32..=5);
        if 2 * m * k >= n {
            continue;
        }
        let j = rng.gen_range(0..=k);
        let ie = interpolation_exponents(n, m, k, j).unwrap();
        ok &= ie.theta == rat(j as i64, k as i64);
        ok &= ie.alpha_j <= ie.beta_j;
        if j == k {
            ok &= ie.alpha_j == ie.beta_j;
        }
        checked += 1;
    }
    assert!(verdict(3, "exponent calculus", ok, start, 1.0));
}

#[test]
fn solver_reproduces_closed_forms_and_adjointness() {
    let start = Instant::now();

    let grid1 = Grid::torus(&[4096], &[TAU]);
    let op1 = EllipticOperator::laplacian(grid1.clone());
    let omega1 = GridSection::from_scalar_fn(grid1.clone(), |x| C64::new((3.0 * x[0]).cos(), 0.0));
    let basis1 = harmonic_basis(&op1).unwrap();
    let u1 = min_norm_solve_with(&op1, &omega1, &basis1).unwrap();
    let mut worst = 0.0f64;
    for node in grid1.nodes() {
        let want = (3.0 * grid1.coords(node)[0]).cos() / 9.0;
        worst = worst.max((u1.value(node, 0).re - want).abs());
        worst = worst.max(u1.value(node, 0).im.abs());
    }
    let closed_form_ok = worst <= 1e-10;

    let grid3 = Grid::torus(&[32, 32, 32], &[TAU, TAU, TAU]);
    let op3 = EllipticOperator::dirac(grid3.clone());
    let basis3 = harmonic_basis(&op3).unwrap();
    let mut omega3 = GridSection::random_band_limited(grid3.clone(), 2, 3, 5, false);
    let h = harmonic_projection(&omega3, &basis3);
    omega3.add_scaled(&h, C64::new(-1.0, 0.0));
    let u3 = min_norm_solve_with(&op3, &omega3, &basis3).unwrap();
    let mut diff = op3.apply(&u3).unwrap();
    diff.add_scaled(&omega3, C64::new(-1.0, 0.0));
    let residual = flat_norm(&diff) / flat_norm(&omega3);
    let solve_ok = residual <= 1e-9;

    let a = GridSection::random_band_limited(grid3.clone(), 2, 3, 6, false);
    let b = GridSection::random_band_limited(grid3.clone(), 2, 3, 7, false);
    let lhs = flat_dot(&op3.apply(&a).unwrap(), &b);
    let rhs = flat_dot(&a, &op3.adjoint_apply(&b).unwrap());
    let adjoint_ok = (lhs - rhs).norm() <= 1e-10 * lhs.norm().max(1.0);

    let ok = closed_form_ok && solve_ok && adjoint_ok;
    assert!(
        verdict(4, "solver oracle", ok, start, 30.0),
        "closed form {worst:.2e}, residual {residual:.2e}, adjoint gap {:.2e}",
        (lhs - rhs).norm()
    );
}

/// Exact wrapped-Euclidean ball. The grid-graph ball underfills a
/// Euclidean disc by a few percent (shortest lattice paths overshoot
/// straight lines), which would bias the smallness comparison.
fn euclidean_ball(grid: &Grid, center: usize, radius: f64) -> BallNodes {
    let mut members: Vec<(usize, f64)> = grid
        .nodes()
        .filter_map(|node| {
            let d2: f64 = (0..grid.ndim())
                .map(|a| grid.axis_offset(center, node, a).powi(2))
                .sum();
            let d = d2.sqrt();
            (d <= radius).then_some((node, d))
        })
        .collect();
    members.sort_by(|a, b| a.1.total_cmp(&b.1));
    BallNodes {
        center,
        radius,
        members,
    }
}

#[test]
fn series_solver_contracts_inside_the_small_ball() {
    let start = Instant::now();
    let metric = flat_torus(&[128, 128]);
    let grid = metric.grid();
    let op = EllipticOperator::laplacian(grid.clone());
    let center = grid.index(&[64, 64]);
    let ball = euclidean_ball(grid, center, 0.3);
    let omega = GridSection::random_band_limited(grid.clone(), 1, 4, 9, false);

    let sol = local_series_solve(&op, &omega, &ball).unwrap();
    let trace = &sol.trace;
    let smallness_ok =
        trace.smallness <= 0.25 && (trace.smallness / 0.08463 - 1.0).abs() <= 0.05;
    let h0 = trace.h_norms[0];
    let decay_ok = trace
        .h_norms
        .iter()
        .enumerate()
        .all(|(k, &h)| h <= 4.0f64.powi(-(k as i32)) * h0 * (1.0 + 1e-12));
    let final_ok = trace.final_projection <= 1e-9;

    println!(
        "  smallness {:.4}, iterations {}, final projection {:.2e}",
        trace.smallness, trace.iterations, trace.final_projection
    );
    let ok = smallness_ok && decay_ok && final_ok;
    assert!(verdict(5, "series solver", ok, start, 20.0));
}

/// Twenty sections mixing resolved trig modes, band-limited noise, a
/// bump, and the constant. The top modes oscillate faster than the
/// inverse of the smallest sweep radius.
fn line_family(grid: &Grid) -> Vec<GridSection> {
    let mut family = Vec::new();
    for k in [1u32, 2, 3, 4, 6, 8, 12, 16, 24, 32] {
        family.push(GridSection::from_scalar_fn(grid.clone(), move |x| {
            C64::new((k as f64 * x[0]).cos(), 0.0)
        }));
    }
    for k in [2u32, 5, 9, 17] {
        family.push(GridSection::from_scalar_fn(grid.clone(), move |x| {
            C64::new((k as f64 * x[0]).sin(), 0.0)
        }));
    }
    for (seed, kmax) in [(0u64, 6usize), (1, 12), (2, 24), (3, 32)] {
        family.push(GridSection::random_band_limited(grid.clone(), 1, kmax, seed, false));
    }
    family.push(GridSection::from_scalar_fn(grid.clone(), |x| {
        let d = (x[0] - PI).abs();
        let d = d.min(TAU - d);
        C64::new((-(d / 0.5).powi(2)).exp(), 0.0)
    }));
    family.push(GridSection::from_scalar_fn(grid.clone(), |_| C64::new(1.0, 0.0)));
    family
}

#[test]
fn local_estimate_constants_are_stable_across_the_sweep() {
    let start = Instant::now();
    let grid = Grid::torus(&[4096], &[TAU]);
    let metric = MetricField::flat(grid.clone());
    let op = EllipticOperator::laplacian(grid.clone());
    let family = line_family(&grid);
    assert_eq!(family.len(), 20);

    let report = verify_local_estimate(
        &op,
        &metric,
        &family,
        grid.index(&[2048]),
        &[1.0, 0.5, 0.25, 0.125],
        2.0,
    )
    .unwrap();

    let nonnegative = report.constants.iter().all(|&c| c >= 0.0 && c.is_finite());
    let slope = report.slope.unwrap();
    println!(
        "  constants {:?}, slope {slope:.3}",
        report.constants
    );
    let ok = report.pass && nonnegative && slope.abs() <= 0.2;
    assert!(verdict(6, "local estimate", ok, start, 60.0));
}

#[test]
fn bootstrap_climbs_the_chain_in_one_step() {
    let start = Instant::now();
    let metric = flat_torus(&[32, 32, 32]);
    let grid = metric.grid();
    let op = EllipticOperator::dirac(grid.clone());
    let basis = harmonic_basis(&op).unwrap();
    let omegas: Vec<GridSection> = (0..10)
        .map(|i| {
            let mut w = GridSection::random_band_limited(grid.clone(), 2, 3, 100 + i, false);
            let h = harmonic_projection(&w, &basis);
            w.add_scaled(&h, C64::new(-1.0, 0.0));
            w
        })
        .collect();

    let center = grid.index(&[16, 16, 16]);
    let report = bootstrap(&op, &metric, &omegas, center, 1.0, &rat(4, 1)).unwrap();

    println!(
        "  chain {:?}, steps {} of allowed {}, solve residual {:.2e}",
        report.chain, report.steps, report.step_bound, report.solve_residual
    );
    let ok = report.chain[0] == "2"
        && report.chain[1] == "6"
        && report.l == 1
        && report.steps == 1
        && report.step_bound == 2
        && report.steps as u64 <= report.step_bound
        && report.solve_residual <= 1e-9
        && report.pass();
    assert!(verdict(7, "bootstrap", ok, start, 120.0));
}

#[test]
fn every_section_splits_into_harmonic_and_solved_parts() {
    let start = Instant::now();
    let grid = Grid::torus(&[16, 16, 16], &[TAU, TAU, TAU]);
    let op = EllipticOperator::dirac(grid.clone());
    let basis = harmonic_basis(&op).unwrap();
    let mut ok = true;
    for i in 0..10 {
        let v = GridSection::random_band_limited(grid.clone(), 2, 3, 200 + i, false);
        let h = harmonic_projection(&v, &basis);
        let mut data = v.clone();
        data.add_scaled(&h, C64::new(-1.0, 0.0));
        let u = min_norm_solve_with(&op, &data, &basis).unwrap();

        let mut recon = op.apply(&u).unwrap();
        recon.add_scaled(&h, C64::new(1.0, 0.0));
        recon.add_scaled(&v, C64::new(-1.0, 0.0));
        let norm_v = flat_norm(&v);
        ok &= flat_norm(&recon) <= 1e-8 * norm_v;
        for e in &basis.sections {
            ok &= flat_dot(&data, e).norm() <= 1e-10 * norm_v.max(1.0);
        }
    }
    assert!(verdict(8, "direct decomposition", ok, start, 60.0));
}

#[test]
fn doubled_boundary_solutions_converge_under_refinement() {
    let start = Instant::now();
    let mut fd = Vec::new();
    let mut spectral = Vec::new();
    let mut orth = Vec::new();
    let mut solutions = Vec::new();
    for nx in [32usize, 64, 128] {
        let grid = Grid::new(&[nx, nx / 2 + 1], &[TAU, PI], &[true, false]);
        let domain = build_double(&grid, 0.0).unwrap();
        let op = EllipticOperator::laplacian(domain.double.clone());
        let omega = GridSection::from_scalar_fn(grid.clone(), |x| {
            C64::new(x[1].sin() * x[0].cos(), 0.0)
        });
        let sol = boundary_solve(&op, &domain, &omega, 2.0).unwrap();
        fd.push(sol.report.fd_residual);
        spectral.push(sol.report.spectral_residual);
        orth.push(sol.report.trace.orthogonality_residual);
        solutions.push(sol.u);
    }
    let deltas: Vec<f64> = solutions
        .windows(2)
        .map(|w| restriction_delta(&w[0], &w[1]).unwrap())
        .collect();

    println!(
        "  spectral {:.2e}, fd residuals {:?}, solution deltas {:?}",
        spectral[2], fd, deltas
    );
    let ok = spectral.iter().all(|&s| s <= 1e-6)
        && orth.iter().all(|&o| o <= 1e-10)
        && fd[0] > fd[1]
        && fd[1] > fd[2]
        && deltas[0] > deltas[1];
    assert!(verdict(9, "doubling", ok, start, 30.0));
}

#[test]
fn scaling_identities_hold_to_quadrature_tolerance() {
    let start = Instant::now();
    let metric = flat_torus(&[256, 256]);
    let center = metric.grid().index(&[128, 128]);
    // The embedding constant is a supremum over profiles; the flat
    // profile attains it and its ratio carries no radius power, while
    // oscillatory profiles sink as R^1. Fit over a small family.
    let profiles = [
        ScalingProfile::Constant(1.0),
        ScalingProfile::Coordinate(0),
        ScalingProfile::TrigMode {
            freq: vec![2.0, 3.0],
        },
    ];
    let mut ok = true;
    let mut constants = Vec::new();
    for radius in [1.0, 0.5, 0.25, 0.125] {
        let mut fitted = 0.0f64;
        for profile in &profiles {
            let report = scaling_check(&metric, center, profile, radius, 1, 1.5).unwrap();
            for order in &report.orders {
                ok &= order.pass;
            }
            let t = report.embedding_t.unwrap();
            assert!((t - 6.0).abs() < 1e-9, "conjugate exponent {t}");
            fitted = fitted.max(report.embedding_constant.unwrap());
        }
        constants.push(fitted);
    }
    let spread = constants.iter().cloned().fold(0.0f64, f64::max)
        / constants.iter().cloned().fold(f64::INFINITY, f64::min)
        - 1.0;
    println!("  fitted embedding constants {constants:?}, spread {spread:.3}");
    let ok = ok && spread <= 0.05;
    assert!(verdict(10, "scaling identities", ok, start, 30.0));
}

/// The same four zero-mean continuum sections sampled on any grid.
fn analytic_family(grid: &Grid) -> Vec<GridSection> {
    let modes: [fn(&[f64], usize) -> f64; 4] = [
        |x, c| if c == 0 { x[0].cos() } else { 0.0 },
        |x, c| if c == 1 { (2.0 * x[1]).sin() } else { 0.0 },
        |x, c| {
            if c == 0 {
                x[0].cos() * x[2].sin()
            } else {
                x[1].sin()
            }
        },
        |x, c| {
            if c == 0 {
                (x[0] + x[1]).sin()
            } else {
                (2.0 * x[2]).cos()
            }
        },
    ];
    modes
        .iter()
        .map(|f| GridSection::from_fn(grid.clone(), 2, |x, c| C64::new(f(x, c), 0.0)))
        .collect()
}

#[test]
fn weighted_global_constants_survive_refinement() {
    let start = Instant::now();
    let r = rat(4, 1);
    let mut ok = true;
    let mut by_variant: Vec<Vec<Vec<f64>>> = vec![Vec::new(), Vec::new()];
    for dims in [[12usize, 12, 12], [24, 24, 24]] {
        let metric = flat_torus(&dims);
        let grid = metric.grid();
        let op = EllipticOperator::dirac(grid.clone());
        let basis = harmonic_basis(&op).unwrap();
        let omegas: Vec<GridSection> = analytic_family(grid)
            .into_iter()
            .map(|mut w| {
                let h = harmonic_projection(&w, &basis);
                w.add_scaled(&h, C64::new(-1.0, 0.0));
                w
            })
            .collect();

        let unit = AdmissibleRadiusField::constant(
            grid,
            1.0,
            RadiusProvenance::Injected { eps: 0.1, m: 1 },
        );
        let two_scale = inject_radius_field(
            &metric,
            grid.nodes()
                .map(|n| if grid.coords(n)[0] < PI { 0.3 } else { 1.0 })
                .collect(),
            0.1,
            1,
            77,
        )
        .unwrap();

        for (slot, field) in [(0, unit), (1, two_scale)] {
            let report = verify_global_weighted(&op, &metric, &field, &omegas, &r).unwrap();
            ok &= report.pass();
            if slot == 0 {
                ok &= report.unweighted;
            }
            by_variant[slot].push(
                report
                    .weighted
                    .constants
                    .iter()
                    .chain(report.lr_form.constants.iter())
                    .cloned()
                    .collect(),
            );
        }
    }
    let spreads: Vec<f64> = by_variant
        .iter()
        .map(|pair| constants_spread(&pair[0], &pair[1]))
        .collect();
    println!("  constant spreads across refinement {spreads:?}");
    let ok = ok && spreads.iter().all(|&s| s <= 0.2);
    assert!(verdict(11, "weighted global estimate", ok, start, 120.0));
}
