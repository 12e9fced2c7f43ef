//! Vitali covers built from an admissible radius field.
//!
//! Seed radii are the admissible radii divided by 120. Selection walks the
//! candidates in decreasing-radius order (node order breaks ties) and
//! keeps a ball iff its seed ball is disjoint from everything kept so
//! far; kept balls are then inflated by 5. Because every node is its own
//! candidate, coverage can only fail if the radius field is inconsistent.

use crate::geometry::{metric_ball, AdmissibleRadiusField, MetricField};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

pub const SEED_DIVISOR: f64 = 120.0;
pub const INFLATION: f64 = 5.0;

#[derive(Debug, Error)]
pub enum CoverError {
    #[error("node {node} lies in no inflated ball (radius field inconsistent)")]
    CoverIncomplete { node: usize },
    #[error("invalid radius field: {0}")]
    InvalidField(String),
}

#[derive(Debug, Clone, Serialize)]
pub struct CoverBall {
    pub index: usize,
    pub center: usize,
    pub seed_radius: f64,
    pub inflated_radius: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AdmissibleCover {
    pub balls: Vec<CoverBall>,
    pub eps: f64,
    pub overlap_counts: Vec<u32>,
    pub max_overlap: u32,
    /// Theoretical overlap bound ((1+eps)/(1-eps))^{n/2} 120^n.
    pub bound: f64,
    pub candidates: usize,
}

pub fn overlap_bound(eps: f64, ndim: usize) -> f64 {
    ((1.0 + eps) / (1.0 - eps)).powf(ndim as f64 / 2.0) * SEED_DIVISOR.powi(ndim as i32)
}

/// Greedy Vitali selection with a 5x inflation.
pub fn build_cover(
    metric: &MetricField,
    field: &AdmissibleRadiusField,
) -> Result<AdmissibleCover, CoverError> {
    let grid = metric.grid();
    if field.values.len() != grid.len() {
        return Err(CoverError::InvalidField(format!(
            "field has {} values for {} nodes",
            field.values.len(),
            grid.len()
        )));
    }
    let seeds: Vec<f64> = field.values.iter().map(|r| r / SEED_DIVISOR).collect();
    for (node, &r) in seeds.iter().enumerate() {
        if !(r > 0.0) {
            return Err(CoverError::InvalidField(format!(
                "seed radius {r} at node {node} not positive"
            )));
        }
        if r > 1.0 / SEED_DIVISOR + 1e-15 {
            return Err(CoverError::InvalidField(format!(
                "seed radius {r} at node {node} above 1/120"
            )));
        }
    }
    let r_max = seeds.iter().cloned().fold(0.0f64, f64::max);

    let mut order: Vec<usize> = (0..grid.len()).collect();
    order.sort_unstable_by(|&a, &b| {
        seeds[b]
            .partial_cmp(&seeds[a])
            .unwrap()
            .then_with(|| a.cmp(&b))
    });

    // selected_radius[node] > 0 marks a kept center; vitali_witness maps
    // every candidate to the kept ball certifying B subset 5C.
    let mut selected_radius = vec![0.0f64; grid.len()];
    let mut kept: Vec<usize> = Vec::new();
    let mut vitali_witness = vec![usize::MAX; grid.len()];
    for &x in &order {
        let rx = seeds[x];
        // A kept center can conflict only within rx + r_max.
        let near = metric_ball(metric, x, rx + r_max);
        let mut conflict = None;
        for &(node, dist) in &near.members {
            if selected_radius[node] > 0.0 && node != x && dist <= rx + selected_radius[node] {
                conflict = Some(node);
                break;
            }
        }
        match conflict {
            Some(c) => vitali_witness[x] = c,
            None => {
                selected_radius[x] = rx;
                vitali_witness[x] = x;
                kept.push(x);
            }
        }
    }

    // Vitali certificate: the witness C was kept earlier, so r_C >= r_B
    // and d <= r_B + r_C; the triangle inequality then gives B subset 5C.
    for x in 0..grid.len() {
        let c = vitali_witness[x];
        debug_assert!(c != usize::MAX);
        debug_assert!(selected_radius[c] + 1e-15 >= seeds[x] * (1.0 - 1e-12));
    }

    let balls: Vec<CoverBall> = kept
        .iter()
        .enumerate()
        .map(|(index, &center)| CoverBall {
            index,
            center,
            seed_radius: seeds[center],
            inflated_radius: INFLATION * seeds[center],
        })
        .collect();

    let mut counts = vec![0u32; grid.len()];
    for ball in &balls {
        let members = metric_ball(metric, ball.center, ball.inflated_radius);
        for &(node, _) in &members.members {
            counts[node] += 1;
        }
    }
    if let Some(node) = counts.iter().position(|&c| c == 0) {
        return Err(CoverError::CoverIncomplete { node });
    }
    let max_overlap = counts.iter().cloned().max().unwrap_or(0);
    let eps = field.eps();
    Ok(AdmissibleCover {
        balls,
        eps,
        overlap_counts: counts,
        max_overlap,
        bound: overlap_bound(eps, grid.ndim()),
        candidates: grid.len(),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct OverlapReport {
    pub max_overlap: u32,
    pub bound: f64,
    pub pass: bool,
    /// Sum over balls of the integral of |f| on the ball.
    pub integral_lhs: f64,
    /// Bound times the L1 norm of f over the whole grid.
    pub integral_rhs: f64,
    pub integral_pass: bool,
    pub mean_overlap: f64,
}

/// Independent recount of the per-node overlaps plus the integral
/// consequence on a seeded nonnegative test field.
pub fn overlap_stats(cover: &AdmissibleCover, metric: &MetricField, seed: u64) -> OverlapReport {
    let grid = metric.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f: Vec<f64> = (0..grid.len()).map(|_| rng.gen_range(0.0..1.0)).collect();
    let cell = |node: usize| grid.cell_weight(node) * metric.sqrt_det(node);

    let mut counts = vec![0u32; grid.len()];
    let mut integral_lhs = 0.0;
    for ball in &cover.balls {
        let members = metric_ball(metric, ball.center, ball.inflated_radius);
        for &(node, _) in &members.members {
            counts[node] += 1;
            integral_lhs += f[node] * cell(node);
        }
    }
    let l1: f64 = (0..grid.len()).map(|n| f[n] * cell(n)).sum();
    let max_overlap = counts.iter().cloned().max().unwrap_or(0);
    let mean_overlap =
        counts.iter().map(|&c| c as f64).sum::<f64>() / grid.len().max(1) as f64;
    OverlapReport {
        max_overlap,
        bound: cover.bound,
        pass: (max_overlap as f64) <= cover.bound,
        integral_lhs,
        integral_rhs: cover.bound * l1,
        integral_pass: integral_lhs <= cover.bound * l1 * (1.0 + 1e-12),
        mean_overlap,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{inject_radius_field, MetricField, RadiusProvenance};
    use crate::grid::Grid;
    use approx::assert_relative_eq;
    use core::f64::consts::TAU;

    fn unit_field(grid: &Grid) -> AdmissibleRadiusField {
        AdmissibleRadiusField::constant(
            grid,
            1.0,
            RadiusProvenance::Injected { eps: 0.1, m: 2 },
        )
    }

    #[test]
    fn sparse_torus_keeps_every_node() {
        // Spacing far above 1/60: all seed balls are singletons.
        let grid = Grid::torus(&[64, 64], &[TAU, TAU]);
        let metric = MetricField::flat(grid.clone());
        let cover = build_cover(&metric, &unit_field(&grid)).unwrap();
        assert_eq!(cover.balls.len(), grid.len());
        assert_eq!(cover.max_overlap, 1);
        assert_relative_eq!(cover.bound, 17600.0, max_relative = 1e-12);
        for b in &cover.balls {
            assert_relative_eq!(b.inflated_radius, 5.0 * b.seed_radius);
            assert!(b.seed_radius <= 1.0 / 120.0 + 1e-15);
        }
    }

    #[test]
    fn dense_circle_prunes_and_still_covers() {
        let n = 2048;
        let grid = Grid::torus(&[n], &[TAU]);
        let metric = MetricField::flat(grid.clone());
        let cover = build_cover(&metric, &unit_field(&grid)).unwrap();
        assert!(cover.balls.len() < n / 4, "kept {}", cover.balls.len());

        // Oracle checks with exact circle distances.
        let arc = |a: usize, b: usize| {
            let d = (a as f64 - b as f64).abs() * TAU / n as f64;
            d.min(TAU - d)
        };
        for (i, bi) in cover.balls.iter().enumerate() {
            for bj in cover.balls.iter().skip(i + 1) {
                assert!(
                    arc(bi.center, bj.center) > bi.seed_radius + bj.seed_radius,
                    "seed balls at {} and {} intersect",
                    bi.center,
                    bj.center
                );
            }
        }
        let mut oracle_counts = vec![0u32; n];
        for node in 0..n {
            for b in &cover.balls {
                if arc(node, b.center) <= b.inflated_radius {
                    oracle_counts[node] += 1;
                }
            }
            assert!(oracle_counts[node] > 0, "node {node} uncovered");
        }
        assert_eq!(oracle_counts, cover.overlap_counts);
        assert!(cover.max_overlap as f64 <= cover.bound);
        assert!(cover.max_overlap >= 2);
    }

    #[test]
    fn single_node_grid_gets_one_ball() {
        let grid = Grid::torus(&[1], &[TAU]);
        let metric = MetricField::flat(grid.clone());
        let cover = build_cover(&metric, &unit_field(&grid)).unwrap();
        assert_eq!(cover.balls.len(), 1);
        assert_eq!(cover.max_overlap, 1);
    }

    #[test]
    fn injected_two_scale_field_respects_the_bound() {
        // Dense enough that selection prunes: spacing 0.5/32 < 1/60.
        let grid = Grid::torus(&[32, 32], &[0.5, 0.5]);
        let metric = MetricField::flat(grid.clone());
        let values: Vec<f64> = (0..grid.len())
            .map(|node| if grid.coord(node, 0) < 0.25 { 0.3 } else { 1.0 })
            .collect();
        let field = inject_radius_field(&metric, values, 0.1, 2, 5).unwrap();
        let cover = build_cover(&metric, &field).unwrap();
        assert!(cover.balls.len() < grid.len());
        assert!(cover.max_overlap >= 2);
        assert!((cover.max_overlap as f64) <= cover.bound);
        let report = overlap_stats(&cover, &metric, 11);
        assert_eq!(report.max_overlap, cover.max_overlap);
        assert!(report.pass);
        assert!(report.integral_pass);
        // Selected seed balls are pairwise disjoint in the chart metric
        // (flat model: chart distance is the metric distance).
        for (i, bi) in cover.balls.iter().enumerate() {
            for bj in cover.balls.iter().skip(i + 1) {
                let d = grid.chart_distance(bi.center, bj.center);
                assert!(d > bi.seed_radius + bj.seed_radius);
            }
        }
    }

    #[test]
    fn constant_volume_consequence_holds() {
        let grid = Grid::torus(&[512], &[TAU]);
        let metric = MetricField::flat(grid.clone());
        let cover = build_cover(&metric, &unit_field(&grid)).unwrap();
        // f = 1: sum of ball volumes against T * vol(M).
        let mut total = 0.0;
        for b in &cover.balls {
            let members = metric_ball(&metric, b.center, b.inflated_radius);
            total += members.members.len() as f64 * TAU / grid.len() as f64;
        }
        assert!(total <= cover.bound * TAU);
    }

    #[test]
    fn zero_radius_field_is_rejected() {
        let grid = Grid::torus(&[16], &[TAU]);
        let metric = MetricField::flat(grid.clone());
        let mut field = unit_field(&grid);
        field.values[3] = 0.0;
        assert!(matches!(
            build_cover(&metric, &field),
            Err(CoverError::InvalidField(_))
        ));
    }
}
