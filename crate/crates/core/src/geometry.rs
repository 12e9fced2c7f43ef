//! Metric models, grid-graph distance and admissible radius fields.
//!
//! Every model is conformally flat in its fixed chart: `g_ij = c(y) δ_ij`
//! with an analytic factor, so metric components and their derivatives are
//! exact (no finite-difference error enters the admissibility conditions).
//! Distance is the shortest-path length over axis and diagonal grid moves
//! with the metric taken as the endpoint average on each edge, which is the
//! second-order midpoint value.

use crate::grid::Grid;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cmp::Reverse;
use std::collections::BinaryHeap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("no admissible radius at node {node}: {detail}")]
    NotAdmissible { node: usize, detail: String },
    #[error("injected radius field rejected: R({a}) = {ra} vs R({b}) = {rb} at distance {d}")]
    InjectionRejected {
        a: usize,
        b: usize,
        ra: f64,
        rb: f64,
        d: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ManifoldModel {
    FlatTorus {
        extents: Vec<f64>,
    },
    /// Conformal factor `1 + amplitude · sin(Σ 2π freq_i y_i / extent_i)`.
    BumpyTorus {
        extents: Vec<f64>,
        amplitude: f64,
        frequency: Vec<i64>,
    },
    /// Flat cylinder: periodic first axis, bounded second axis.
    CylinderWithBoundary {
        circumference: f64,
        length: f64,
    },
}

#[derive(Debug, Clone)]
enum MetricKind {
    Flat,
    /// `c(y) = 1 + a sin(⟨φ, y⟩)` with physical frequencies φ.
    Bump { amplitude: f64, phys_freq: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct MetricField {
    grid: Grid,
    kind: MetricKind,
}

pub fn build_metric(model: &ManifoldModel, resolution: &[usize]) -> Result<MetricField, GeometryError> {
    let check_res = |res: &[usize], n: usize| {
        if res.len() != n {
            return Err(GeometryError::InvalidModel(format!(
                "resolution has {} axes, model has {n}",
                res.len()
            )));
        }
        if res.iter().any(|&d| d < 4) {
            return Err(GeometryError::InvalidModel(
                "need at least 4 nodes per axis".into(),
            ));
        }
        Ok(())
    };
    match model {
        ManifoldModel::FlatTorus { extents } => {
            check_res(resolution, extents.len())?;
            Ok(MetricField {
                grid: Grid::torus(resolution, extents),
                kind: MetricKind::Flat,
            })
        }
        ManifoldModel::BumpyTorus {
            extents,
            amplitude,
            frequency,
        } => {
            check_res(resolution, extents.len())?;
            if frequency.len() != extents.len() {
                return Err(GeometryError::InvalidModel(
                    "frequency vector length must match dimension".into(),
                ));
            }
            if amplitude.abs() >= 1.0 {
                return Err(GeometryError::InvalidModel(format!(
                    "|amplitude| = {} breaks positive definiteness",
                    amplitude.abs()
                )));
            }
            if frequency.iter().all(|&f| f == 0) {
                return Err(GeometryError::InvalidModel(
                    "bump frequency must be nonzero".into(),
                ));
            }
            let phys_freq = frequency
                .iter()
                .zip(extents)
                .map(|(&f, &p)| core::f64::consts::TAU * f as f64 / p)
                .collect();
            Ok(MetricField {
                grid: Grid::torus(resolution, extents),
                kind: MetricKind::Bump {
                    amplitude: *amplitude,
                    phys_freq,
                },
            })
        }
        ManifoldModel::CylinderWithBoundary {
            circumference,
            length,
        } => {
            check_res(resolution, 2)?;
            if *circumference <= 0.0 || *length <= 0.0 {
                return Err(GeometryError::InvalidModel("cylinder needs positive size".into()));
            }
            Ok(MetricField {
                grid: Grid::new(resolution, &[*circumference, *length], &[true, false]),
                kind: MetricKind::Flat,
            })
        }
    }
}

impl MetricField {
    /// Flat metric directly on a grid (degenerate and doubled grids).
    pub fn flat(grid: Grid) -> Self {
        MetricField {
            grid,
            kind: MetricKind::Flat,
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn is_flat(&self) -> bool {
        matches!(self.kind, MetricKind::Flat)
    }

    fn phase(&self, node: usize) -> f64 {
        match &self.kind {
            MetricKind::Flat => 0.0,
            MetricKind::Bump { phys_freq, .. } => (0..self.grid.ndim())
                .map(|a| phys_freq[a] * self.grid.coord(node, a))
                .sum(),
        }
    }

    /// Conformal factor `c` with `g_ij = c δ_ij`.
    pub fn factor(&self, node: usize) -> f64 {
        match &self.kind {
            MetricKind::Flat => 1.0,
            MetricKind::Bump { amplitude, .. } => 1.0 + amplitude * self.phase(node).sin(),
        }
    }

    /// `∂_axis c`, analytic.
    pub fn dfactor(&self, node: usize, axis: usize) -> f64 {
        match &self.kind {
            MetricKind::Flat => 0.0,
            MetricKind::Bump {
                amplitude,
                phys_freq,
            } => amplitude * phys_freq[axis] * self.phase(node).cos(),
        }
    }

    /// `|∂^β c|` at a node for a derivative multi-index, analytic.
    pub fn dfactor_abs(&self, node: usize, beta: &[u32]) -> f64 {
        match &self.kind {
            MetricKind::Flat => 0.0,
            MetricKind::Bump {
                amplitude,
                phys_freq,
            } => {
                let order: u32 = beta.iter().sum();
                let scale: f64 = beta
                    .iter()
                    .zip(phys_freq)
                    .map(|(&b, &f)| f.powi(b as i32))
                    .product();
                let phase = self.phase(node);
                let trig = if order % 2 == 0 { phase.sin() } else { phase.cos() };
                (amplitude * scale * trig).abs()
            }
        }
    }

    pub fn g_matrix(&self, node: usize) -> Vec<f64> {
        let n = self.grid.ndim();
        let c = self.factor(node);
        let mut g = vec![0.0; n * n];
        for i in 0..n {
            g[i * n + i] = c;
        }
        g
    }

    pub fn dg_matrix(&self, node: usize, axis: usize) -> Vec<f64> {
        let n = self.grid.ndim();
        let dc = self.dfactor(node, axis);
        let mut g = vec![0.0; n * n];
        for i in 0..n {
            g[i * n + i] = dc;
        }
        g
    }

    pub fn g_inverse(&self, node: usize) -> Vec<f64> {
        let n = self.grid.ndim();
        let c = self.factor(node);
        let mut g = vec![0.0; n * n];
        for i in 0..n {
            g[i * n + i] = 1.0 / c;
        }
        g
    }

    pub fn sqrt_det(&self, node: usize) -> f64 {
        self.factor(node).powf(self.grid.ndim() as f64 / 2.0)
    }

    /// (min, max) eigenvalue of `g` at a node.
    pub fn eigen_bounds(&self, node: usize) -> (f64, f64) {
        let c = self.factor(node);
        (c, c)
    }

    /// Length of the grid edge between neighbor nodes, metric at the edge
    /// midpoint approximated by the endpoint average.
    fn edge_length(&self, a: usize, b: usize, chart_step: f64) -> f64 {
        let c = 0.5 * (self.factor(a) + self.factor(b));
        c.sqrt() * chart_step
    }
}

/// Axis+diagonal moves: all nonzero offsets in `{-1,0,1}^n`.
pub fn neighbor_offsets(ndim: usize) -> Vec<Vec<isize>> {
    let mut offsets = Vec::new();
    let mut cur = vec![-1isize; ndim];
    loop {
        if cur.iter().any(|&c| c != 0) {
            offsets.push(cur.clone());
        }
        let mut i = 0;
        loop {
            if i == ndim {
                return offsets;
            }
            cur[i] += 1;
            if cur[i] <= 1 {
                break;
            }
            cur[i] = -1;
            i += 1;
        }
    }
}

/// Ball of the grid-graph metric: nodes with `d(center, ·) <= radius`,
/// sorted by distance (Dijkstra truncated at the radius).
#[derive(Debug, Clone)]
pub struct BallNodes {
    pub center: usize,
    pub radius: f64,
    /// `(node, distance)` sorted by distance; the center is first.
    pub members: Vec<(usize, f64)>,
}

pub fn metric_ball(metric: &MetricField, center: usize, radius: f64) -> BallNodes {
    let grid = metric.grid();
    let offsets = neighbor_offsets(grid.ndim());
    let steps: Vec<f64> = offsets
        .iter()
        .map(|off| {
            off.iter()
                .enumerate()
                .map(|(a, &o)| {
                    let d = o as f64 * grid.spacing(a);
                    d * d
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let mut dist: std::collections::HashMap<usize, f64> = std::collections::HashMap::new();
    let mut heap: BinaryHeap<Reverse<(u64, usize)>> = BinaryHeap::new();
    // Monotone map from distance to sortable bits (distances are >= 0).
    let key = |d: f64| d.to_bits();
    dist.insert(center, 0.0);
    heap.push(Reverse((key(0.0), center)));
    let mut members = Vec::new();
    while let Some(Reverse((dk, node))) = heap.pop() {
        let d = f64::from_bits(dk);
        if d > dist[&node] + 1e-15 {
            continue;
        }
        members.push((node, d));
        for (off, &step) in offsets.iter().zip(&steps) {
            if let Some(next) = grid.step(node, off) {
                let nd = d + metric.edge_length(node, next, step);
                if nd <= radius {
                    let better = dist.get(&next).map_or(true, |&old| nd < old - 1e-15);
                    if better {
                        dist.insert(next, nd);
                        heap.push(Reverse((key(nd), next)));
                    }
                }
            }
        }
    }
    BallNodes {
        center,
        radius,
        members,
    }
}

/// Grid-graph distance between two nodes (Dijkstra with early exit).
pub fn distance(metric: &MetricField, a: usize, b: usize) -> f64 {
    if a == b {
        return 0.0;
    }
    let grid = metric.grid();
    let offsets = neighbor_offsets(grid.ndim());
    let steps: Vec<f64> = offsets
        .iter()
        .map(|off| {
            off.iter()
                .enumerate()
                .map(|(ax, &o)| {
                    let d = o as f64 * grid.spacing(ax);
                    d * d
                })
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let mut dist = vec![f64::INFINITY; grid.len()];
    let mut heap: BinaryHeap<Reverse<(u64, usize)>> = BinaryHeap::new();
    dist[a] = 0.0;
    heap.push(Reverse((0f64.to_bits(), a)));
    while let Some(Reverse((dk, node))) = heap.pop() {
        let d = f64::from_bits(dk);
        if node == b {
            return d;
        }
        if d > dist[node] + 1e-15 {
            continue;
        }
        for (off, &step) in offsets.iter().zip(&steps) {
            if let Some(next) = grid.step(node, off) {
                let nd = d + metric.edge_length(node, next, step);
                if nd < dist[next] - 1e-15 {
                    dist[next] = nd;
                    heap.push(Reverse((nd.to_bits(), next)));
                }
            }
        }
    }
    f64::INFINITY
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RadiusProvenance {
    Computed { eps: f64, m: u32, tol: f64 },
    Injected { eps: f64, m: u32 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdmissibleRadiusField {
    pub values: Vec<f64>,
    pub provenance: RadiusProvenance,
}

impl AdmissibleRadiusField {
    pub fn constant(grid: &Grid, value: f64, provenance: RadiusProvenance) -> Self {
        AdmissibleRadiusField {
            values: vec![value; grid.len()],
            provenance,
        }
    }

    pub fn eps(&self) -> f64 {
        match self.provenance {
            RadiusProvenance::Computed { eps, .. } => eps,
            RadiusProvenance::Injected { eps, .. } => eps,
        }
    }

    pub fn order(&self) -> u32 {
        match self.provenance {
            RadiusProvenance::Computed { m, .. } => m,
            RadiusProvenance::Injected { m, .. } => m,
        }
    }
}

const RADIUS_TOL: f64 = 1e-4;

/// Multi-indices of total order in `[1, max_order]`.
fn derivative_indices(ndim: usize, max_order: u32) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut cur = vec![0u32; ndim];
    loop {
        let order: u32 = cur.iter().sum();
        if (1..=max_order).contains(&order) {
            out.push(cur.clone());
        }
        let mut i = 0;
        loop {
            if i == ndim {
                return out;
            }
            cur[i] += 1;
            if cur.iter().sum::<u32>() <= max_order {
                break;
            }
            cur[i] = 0;
            i += 1;
        }
    }
}

/// Chart validity cap: min(1, half the smallest periodic extent, distance
/// to the boundary on bounded axes).
/// Upper cap on any admissible radius at a node: one, half the smallest
/// period, and the distance to bounded-axis ends.
pub fn chart_cap(metric: &MetricField, node: usize) -> f64 {
    let grid = metric.grid();
    let mut cap = 1.0f64;
    for a in 0..grid.ndim() {
        if grid.is_periodic(a) {
            cap = cap.min(0.5 * grid.extents()[a]);
        } else {
            let y = grid.coord(node, a);
            cap = cap.min(y.min(grid.extents()[a] - y));
        }
    }
    cap
}

/// Both admissibility conditions at a single node: the metric is within ε
/// of the identity, and the first m-1 derivative orders of the components
/// sum below ε in sup norm.
fn conditions_at(metric: &MetricField, node: usize, eps: f64, betas: &[Vec<u32>]) -> (bool, bool) {
    let (lo, hi) = metric.eigen_bounds(node);
    let cond1 = lo >= 1.0 - eps && hi <= 1.0 + eps;
    let sum: f64 = betas.iter().map(|b| metric.dfactor_abs(node, b)).sum();
    (cond1, sum <= eps)
}

/// Whether the conditions hold at every node of the grid (constant-radius
/// short circuit: then every ball of every radius is admissible).
fn conditions_global(metric: &MetricField, eps: f64, betas: &[Vec<u32>]) -> bool {
    let grid = metric.grid();
    // Condition 2 sums per-β sups over the ball; over the whole grid the
    // per-node sum is an upper bound for the sup-sum, so testing it nodewise
    // is conservative only when β-wise maxima occur at one node. Test the
    // exact global sup-sum instead.
    let mut sup = vec![0.0f64; betas.len()];
    let mut cond1 = true;
    for node in grid.nodes() {
        let (lo, hi) = metric.eigen_bounds(node);
        if lo < 1.0 - eps || hi > 1.0 + eps {
            cond1 = false;
            break;
        }
        for (i, b) in betas.iter().enumerate() {
            sup[i] = sup[i].max(metric.dfactor_abs(node, b));
        }
    }
    cond1 && sup.iter().sum::<f64>() <= eps
}

/// Largest radius (up to bisection tolerance, capped at the chart cap) such
/// that the ball around `node` satisfies both admissibility conditions; the
/// returned value is a certified lower bound for the supremum.
pub fn admissible_radius(
    metric: &MetricField,
    node: usize,
    eps: f64,
    m: u32,
) -> Result<f64, GeometryError> {
    if m < 2 {
        return Err(GeometryError::InvalidModel("admissibility needs m >= 2".into()));
    }
    let betas = derivative_indices(metric.grid().ndim(), m - 1);
    let (c1, c2) = conditions_at(metric, node, eps, &betas);
    if !c1 {
        return Err(GeometryError::NotAdmissible {
            node,
            detail: "metric outside [1-eps, 1+eps] at the center".into(),
        });
    }
    if !c2 {
        return Err(GeometryError::NotAdmissible {
            node,
            detail: "derivative sum above eps at the center".into(),
        });
    }
    let cap = chart_cap(metric, node);
    if cap <= 0.0 {
        return Err(GeometryError::NotAdmissible {
            node,
            detail: "chart cap is zero (boundary node)".into(),
        });
    }
    // One truncated sweep; prefix maxima turn each bisection probe into a
    // binary search over the sorted ball.
    let ball = metric_ball(metric, node, cap);
    let k = ball.members.len();
    let mut pref_min = vec![0.0f64; k];
    let mut pref_max = vec![0.0f64; k];
    let mut pref_dsum = vec![0.0f64; k];
    let mut sups = vec![0.0f64; betas.len()];
    let mut cmin = f64::INFINITY;
    let mut cmax = f64::NEG_INFINITY;
    for (i, &(nd, _)) in ball.members.iter().enumerate() {
        let (lo, hi) = metric.eigen_bounds(nd);
        cmin = cmin.min(lo);
        cmax = cmax.max(hi);
        for (bi, b) in betas.iter().enumerate() {
            sups[bi] = sups[bi].max(metric.dfactor_abs(nd, b));
        }
        pref_min[i] = cmin;
        pref_max[i] = cmax;
        pref_dsum[i] = sups.iter().sum();
    }
    let ok_upto = |radius: f64| -> bool {
        // Index of the last member within `radius`.
        let idx = ball
            .members
            .partition_point(|&(_, d)| d <= radius)
            .saturating_sub(1);
        pref_min[idx] >= 1.0 - eps && pref_max[idx] <= 1.0 + eps && pref_dsum[idx] <= eps
    };
    if ok_upto(cap) {
        return Ok(cap);
    }
    let mut lo = 0.0;
    let mut hi = cap;
    while hi - lo > RADIUS_TOL {
        let mid = 0.5 * (lo + hi);
        if ok_upto(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if lo <= 0.0 {
        return Err(GeometryError::NotAdmissible {
            node,
            detail: "conditions break within bisection tolerance of the center".into(),
        });
    }
    Ok(lo)
}

/// Admissible radius at every node.
pub fn radius_field(metric: &MetricField, eps: f64, m: u32) -> Result<AdmissibleRadiusField, GeometryError> {
    if m < 2 {
        return Err(GeometryError::InvalidModel("admissibility needs m >= 2".into()));
    }
    let grid = metric.grid();
    let betas = derivative_indices(grid.ndim(), m - 1);
    let provenance = RadiusProvenance::Computed {
        eps,
        m,
        tol: RADIUS_TOL,
    };
    if grid.fully_periodic() && conditions_global(metric, eps, &betas) {
        let cap: f64 = (0..grid.ndim())
            .map(|a| 0.5 * grid.extents()[a])
            .fold(1.0, f64::min);
        return Ok(AdmissibleRadiusField::constant(grid, cap, provenance));
    }
    use rayon::prelude::*;
    let values: Result<Vec<f64>, GeometryError> = (0..grid.len())
        .into_par_iter()
        .map(|node| admissible_radius(metric, node, eps, m))
        .collect();
    Ok(AdmissibleRadiusField {
        values: values?,
        provenance,
    })
}

/// Report of the radius-comparability audit: whenever two nodes are within
/// a quarter of their summed radii, the radii differ by a factor of at most
/// four.
#[derive(Debug, Clone, Serialize)]
pub struct Cf10Audit {
    pub pairs_checked: usize,
    pub premise_hits: usize,
    pub violations: usize,
    pub worst_ratio: f64,
    pub witness: Option<(usize, usize)>,
}

pub fn cf10_audit(
    metric: &MetricField,
    field: &AdmissibleRadiusField,
    pairs: usize,
    seed: u64,
) -> Cf10Audit {
    let grid = metric.grid();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sources = ((pairs as f64).sqrt().ceil() as usize).max(1);
    let per_source = pairs.div_ceil(sources);
    let r_max = field.values.iter().cloned().fold(0.0, f64::max);
    let mut audit = Cf10Audit {
        pairs_checked: 0,
        premise_hits: 0,
        violations: 0,
        worst_ratio: 0.0,
        witness: None,
    };
    for _ in 0..sources {
        let a = rng.gen_range(0..grid.len());
        let ra = field.values[a];
        // Any pair with the premise true lies within this cutoff.
        let cutoff = 0.25 * (ra + r_max);
        let ball = metric_ball(metric, a, cutoff);
        let mut targets: Vec<(usize, f64)> = Vec::with_capacity(per_source);
        let near = per_source / 2;
        for _ in 0..near.min(ball.members.len()) {
            targets.push(*ball.members.choose(&mut rng).unwrap());
        }
        while targets.len() < per_source {
            let b = rng.gen_range(0..grid.len());
            let d = ball
                .members
                .iter()
                .find(|&&(n, _)| n == b)
                .map_or(f64::INFINITY, |&(_, d)| d);
            targets.push((b, d));
        }
        for (b, d) in targets {
            audit.pairs_checked += 1;
            let rb = field.values[b];
            if d <= 0.25 * (ra + rb) {
                audit.premise_hits += 1;
                let ratio = ra / rb;
                if ratio > audit.worst_ratio {
                    audit.worst_ratio = ratio;
                    if ratio > 4.0 + 1e-12 {
                        audit.violations += 1;
                        audit.witness = Some((a, b));
                    }
                }
            }
        }
    }
    audit
}

/// Accepts caller-provided radius values after range and comparability
/// checks; rejected fields report a witness pair.
pub fn inject_radius_field(
    metric: &MetricField,
    values: Vec<f64>,
    eps: f64,
    m: u32,
    seed: u64,
) -> Result<AdmissibleRadiusField, GeometryError> {
    let grid = metric.grid();
    if values.len() != grid.len() {
        return Err(GeometryError::InvalidModel(format!(
            "field has {} values, grid has {} nodes",
            values.len(),
            grid.len()
        )));
    }
    if let Some((node, &v)) = values
        .iter()
        .enumerate()
        .find(|&(_, &v)| !(v > 0.0 && v <= 1.0))
    {
        return Err(GeometryError::InvalidModel(format!(
            "radius {v} at node {node} outside (0, 1]"
        )));
    }
    let field = AdmissibleRadiusField {
        values,
        provenance: RadiusProvenance::Injected { eps, m },
    };
    let audit = cf10_audit(metric, &field, 10_000, seed);
    if let Some((a, b)) = audit.witness {
        return Err(GeometryError::InjectionRejected {
            a,
            b,
            ra: field.values[a],
            rb: field.values[b],
            d: distance(metric, a, b),
        });
    }
    Ok(field)
}
