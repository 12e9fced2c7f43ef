//! Elliptic operators on trivialized bundles: application, ellipticity
//! audits, kernel extraction, minimum-norm solves, harmonic projection,
//! and the local series construction that extends ball data to a right
//! hand side orthogonal to the harmonic basis.
//!
//! Convention: the Hodge Laplacian on functions is d*d, so its symbol is
//! |k|^2 and the spectrum is nonnegative. Adjoints are discrete adjoints
//! with respect to the flat chart inner product, which the spectral
//! derivative satisfies exactly.

use crate::fft::{derivative_symbol, NdFft};
use crate::fields::GridSection;
use crate::geometry::{BallNodes, MetricField};
use crate::grid::Grid;
use crate::C64;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EllipticError {
    #[error("rank mismatch: operator rank {expected}, section rank {got}")]
    RankMismatch { expected: usize, got: usize },
    #[error("grid mismatch between operator and section")]
    GridMismatch,
    #[error("not elliptic: principal symbol degenerate at node {node}, xi = {xi:?} (condition {cond:.3e})")]
    NotElliptic { node: usize, xi: Vec<f64>, cond: f64 },
    #[error("kernel threshold ambiguous: singular value {sigma:.3e} within a factor 10 of threshold {threshold:.3e}")]
    ThresholdAmbiguous { sigma: f64, threshold: f64 },
    #[error("right hand side not orthogonal to the harmonic basis: max overlap {max_overlap:.3e} vs allowance {allowance:.3e}")]
    NotOrthogonal { max_overlap: f64, allowance: f64 },
    #[error("no convergence after {iterations} iterations, last residual {last:.3e}")]
    NoConvergence {
        iterations: usize,
        last: f64,
        history: Vec<f64>,
    },
    #[error("ball too large for the series construction: max basis mass {max_mass:.4} exceeds {allowed:.4}")]
    BallTooLarge { max_mass: f64, allowed: f64 },
    #[error("invalid operator: {0}")]
    Invalid(String),
}

/// One coefficient matrix field, either shared by all nodes or per node.
#[derive(Debug, Clone)]
pub enum Coefficient {
    Constant(DMatrix<C64>),
    Variable(Vec<DMatrix<C64>>),
}

impl Coefficient {
    fn at(&self, node: usize) -> &DMatrix<C64> {
        match self {
            Coefficient::Constant(m) => m,
            Coefficient::Variable(v) => &v[node],
        }
    }

    fn mean(&self, len: usize, rank: usize) -> DMatrix<C64> {
        match self {
            Coefficient::Constant(m) => m.clone(),
            Coefficient::Variable(v) => {
                let mut acc = DMatrix::zeros(rank, rank);
                for m in v {
                    acc += m;
                }
                acc / C64::new(len as f64, 0.0)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct OperatorTerm {
    pub alpha: Vec<u32>,
    pub coef: Coefficient,
}

#[derive(Debug, Clone)]
pub struct EllipticOperator {
    grid: Grid,
    order: u32,
    rank: usize,
    terms: Vec<OperatorTerm>,
    constant: bool,
    /// Rough sup bound on coefficients and their first derivatives,
    /// recorded for the uniform-ellipticity audit header.
    c1_bound: f64,
    pub label: String,
}

fn scalar(v: f64) -> DMatrix<C64> {
    DMatrix::from_element(1, 1, C64::new(v, 0.0))
}

impl EllipticOperator {
    pub fn new(
        grid: Grid,
        order: u32,
        rank: usize,
        terms: Vec<OperatorTerm>,
        c1_bound: f64,
        label: &str,
    ) -> Result<Self, EllipticError> {
        if !(order == 1 || order == 2) {
            return Err(EllipticError::Invalid(format!("order {order} not in {{1, 2}}")));
        }
        for t in &terms {
            if t.alpha.len() != grid.ndim() {
                return Err(EllipticError::Invalid("multi-index dimension mismatch".into()));
            }
            if t.alpha.iter().sum::<u32>() > order {
                return Err(EllipticError::Invalid("term order above operator order".into()));
            }
            match &t.coef {
                Coefficient::Constant(m) => {
                    if m.nrows() != rank || m.ncols() != rank {
                        return Err(EllipticError::Invalid("coefficient rank mismatch".into()));
                    }
                }
                Coefficient::Variable(v) => {
                    if v.len() != grid.len() {
                        return Err(EllipticError::Invalid("coefficient field length mismatch".into()));
                    }
                }
            }
        }
        let constant = terms.iter().all(|t| matches!(t.coef, Coefficient::Constant(_)));
        Ok(EllipticOperator {
            grid,
            order,
            rank,
            terms,
            constant,
            c1_bound,
            label: label.to_string(),
        })
    }

    /// Hodge Laplacian on functions, d*d convention.
    pub fn laplacian(grid: Grid) -> Self {
        let n = grid.ndim();
        let terms = (0..n)
            .map(|a| {
                let mut alpha = vec![0u32; n];
                alpha[a] = 2;
                OperatorTerm {
                    alpha,
                    coef: Coefficient::Constant(scalar(-1.0)),
                }
            })
            .collect();
        EllipticOperator::new(grid, 2, 1, terms, 1.0, "laplacian (d*d)").unwrap()
    }

    /// Laplacian plus a constant zero-order term.
    pub fn laplacian_shifted(grid: Grid, c: f64) -> Self {
        let n = grid.ndim();
        let mut op = Self::laplacian(grid);
        op.terms.push(OperatorTerm {
            alpha: vec![0u32; n],
            coef: Coefficient::Constant(scalar(c)),
        });
        op.label = format!("laplacian + {c}");
        op
    }

    /// First-order Dirac-type operator sigma . grad on a rank-2 bundle
    /// over a three-dimensional grid.
    pub fn dirac(grid: Grid) -> Self {
        assert_eq!(grid.ndim(), 3, "Dirac-type operator wants three axes");
        let i = C64::new(0.0, 1.0);
        let one = C64::new(1.0, 0.0);
        let zero = C64::new(0.0, 0.0);
        let sigma = [
            DMatrix::from_row_slice(2, 2, &[zero, one, one, zero]),
            DMatrix::from_row_slice(2, 2, &[zero, -i, i, zero]),
            DMatrix::from_row_slice(2, 2, &[one, zero, zero, -one]),
        ];
        let terms = (0..3)
            .map(|a| {
                let mut alpha = vec![0u32; 3];
                alpha[a] = 1;
                OperatorTerm {
                    alpha,
                    coef: Coefficient::Constant(sigma[a].clone()),
                }
            })
            .collect();
        EllipticOperator::new(grid, 1, 2, terms, 1.0, "dirac (sigma . grad)").unwrap()
    }

    /// Degenerate example: a single repeated-axis second derivative.
    /// Not elliptic in more than one dimension.
    pub fn axis_degenerate(grid: Grid, axis: usize) -> Self {
        let n = grid.ndim();
        let mut alpha = vec![0u32; n];
        alpha[axis] = 2;
        let terms = vec![OperatorTerm {
            alpha,
            coef: Coefficient::Constant(scalar(-1.0)),
        }];
        EllipticOperator::new(grid, 2, 1, terms, 1.0, "single-axis second derivative").unwrap()
    }

    /// Laplace-Beltrami operator of a conformal metric, in the same d*d
    /// convention: -c^{-1} Delta_flat - (n/2 - 1) c^{-2} (dc . d).
    pub fn laplace_beltrami(metric: &MetricField) -> Self {
        let grid = metric.grid().clone();
        if metric.is_flat() {
            let mut op = Self::laplacian(grid);
            op.label = "laplace-beltrami (flat)".into();
            return op;
        }
        let n = grid.ndim();
        let len = grid.len();
        let mut terms = Vec::new();
        let mut sup_c1 = 0.0f64;
        for a in 0..n {
            let mut alpha2 = vec![0u32; n];
            alpha2[a] = 2;
            let second: Vec<DMatrix<C64>> = (0..len)
                .map(|node| scalar(-1.0 / metric.factor(node)))
                .collect();
            let mut alpha1 = vec![0u32; n];
            alpha1[a] = 1;
            let first: Vec<DMatrix<C64>> = (0..len)
                .map(|node| {
                    let c = metric.factor(node);
                    scalar(-(n as f64 / 2.0 - 1.0) * metric.dfactor(node, a) / (c * c))
                })
                .collect();
            for m in second.iter().chain(first.iter()) {
                sup_c1 = sup_c1.max(m[(0, 0)].norm());
            }
            terms.push(OperatorTerm {
                alpha: alpha2,
                coef: Coefficient::Variable(second),
            });
            terms.push(OperatorTerm {
                alpha: alpha1,
                coef: Coefficient::Variable(first),
            });
        }
        EllipticOperator::new(grid, 2, 1, terms, sup_c1, "laplace-beltrami").unwrap()
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn order(&self) -> u32 {
        self.order
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn is_constant(&self) -> bool {
        self.constant
    }

    pub fn terms(&self) -> &[OperatorTerm] {
        &self.terms
    }

    pub fn c1_bound(&self) -> f64 {
        self.c1_bound
    }

    /// Full symbol at a wavenumber vector (constant coefficients only).
    pub fn symbol(&self, kappa: &[f64]) -> DMatrix<C64> {
        assert!(self.constant, "symbol defined for constant coefficients");
        let mut s = DMatrix::zeros(self.rank, self.rank);
        for t in &self.terms {
            let factor = derivative_symbol(kappa, &t.alpha);
            s += t.coef.at(0) * factor;
        }
        s
    }

    /// Principal symbol at a node for a real covector xi (no factor i;
    /// norms are unaffected by the unimodular i^m).
    pub fn principal_symbol(&self, node: usize, xi: &[f64]) -> DMatrix<C64> {
        let mut s = DMatrix::zeros(self.rank, self.rank);
        for t in &self.terms {
            if t.alpha.iter().sum::<u32>() != self.order {
                continue;
            }
            let factor: f64 = xi
                .iter()
                .zip(&t.alpha)
                .map(|(x, &a)| x.powi(a as i32))
                .product();
            s += t.coef.at(node) * C64::new(factor, 0.0);
        }
        s
    }

    fn check_compatible(&self, u: &GridSection) -> Result<(), EllipticError> {
        if u.rank() != self.rank {
            return Err(EllipticError::RankMismatch {
                expected: self.rank,
                got: u.rank(),
            });
        }
        if u.grid() != &self.grid {
            return Err(EllipticError::GridMismatch);
        }
        Ok(())
    }

    /// D u. Constant coefficients on a torus go through the symbol; the
    /// general path differentiates term by term.
    pub fn apply(&self, u: &GridSection) -> Result<GridSection, EllipticError> {
        self.check_compatible(u)?;
        if self.constant && self.grid.fully_periodic() {
            return Ok(self.symbol_apply(u, false));
        }
        let mut out = GridSection::zeros(self.grid.clone(), self.rank);
        for t in &self.terms {
            let d = u.partial(&t.alpha);
            for node in 0..self.grid.len() {
                let m = t.coef.at(node);
                for i in 0..self.rank {
                    let mut acc = C64::new(0.0, 0.0);
                    for j in 0..self.rank {
                        acc += m[(i, j)] * d.value(node, j);
                    }
                    out.data_mut()[node * self.rank + i] += acc;
                }
            }
        }
        Ok(out)
    }

    /// D* v, the discrete adjoint for the flat chart inner product:
    /// per-mode conjugate transpose of the symbol, or term by term
    /// (-1)^{|alpha|} d^alpha (A^H v) with variable coefficients.
    pub fn adjoint_apply(&self, v: &GridSection) -> Result<GridSection, EllipticError> {
        self.check_compatible(v)?;
        if self.constant && self.grid.fully_periodic() {
            return Ok(self.symbol_apply(v, true));
        }
        let mut out = GridSection::zeros(self.grid.clone(), self.rank);
        for t in &self.terms {
            let mut w = GridSection::zeros(self.grid.clone(), self.rank);
            for node in 0..self.grid.len() {
                let m = t.coef.at(node);
                for i in 0..self.rank {
                    let mut acc = C64::new(0.0, 0.0);
                    for j in 0..self.rank {
                        acc += m[(j, i)].conj() * v.value(node, j);
                    }
                    w.data_mut()[node * self.rank + i] = acc;
                }
            }
            let sign = if t.alpha.iter().sum::<u32>() % 2 == 1 {
                -1.0
            } else {
                1.0
            };
            let d = w.partial(&t.alpha);
            for (o, x) in out.data_mut().iter_mut().zip(d.data()) {
                *o += x * sign;
            }
        }
        Ok(out)
    }

    fn symbol_apply(&self, u: &GridSection, adjoint: bool) -> GridSection {
        let fftp = NdFft::for_grid(&self.grid);
        let mut hats: Vec<Vec<C64>> = (0..self.rank)
            .map(|c| {
                let mut v = u.component(c);
                fftp.forward(&mut v);
                v
            })
            .collect();
        let n = self.grid.ndim();
        let mut kappa = vec![0.0; n];
        for bin in 0..self.grid.len() {
            let multi = self.grid.multi(bin);
            for a in 0..n {
                kappa[a] = self.grid.wavenumber(a, multi[a]);
            }
            let s = self.symbol(&kappa);
            let mut out = vec![C64::new(0.0, 0.0); self.rank];
            for i in 0..self.rank {
                for j in 0..self.rank {
                    let m = if adjoint {
                        s[(j, i)].conj()
                    } else {
                        s[(i, j)]
                    };
                    out[i] += m * hats[j][bin];
                }
            }
            for (i, v) in out.into_iter().enumerate() {
                hats[i][bin] = v;
            }
        }
        let mut result = GridSection::zeros(self.grid.clone(), self.rank);
        for (c, mut hat) in hats.into_iter().enumerate() {
            fftp.inverse(&mut hat);
            result.set_component(c, &hat);
        }
        result
    }

    /// Coefficients frozen at their node averages; used as the
    /// preconditioner model on the iterative paths.
    fn frozen_symbol(&self, kappa: &[f64]) -> DMatrix<C64> {
        let mut s = DMatrix::zeros(self.rank, self.rank);
        for t in &self.terms {
            let factor = derivative_symbol(kappa, &t.alpha);
            s += t.coef.mean(self.grid.len(), self.rank) * factor;
        }
        s
    }
}

/// Flat chart inner product with uniform cell weights.
pub fn flat_dot(u: &GridSection, v: &GridSection) -> C64 {
    debug_assert_eq!(u.grid(), v.grid());
    debug_assert_eq!(u.rank(), v.rank());
    let mut acc = C64::new(0.0, 0.0);
    for node in 0..u.grid().len() {
        let w = u.grid().cell_weight(node);
        for c in 0..u.rank() {
            acc += u.value(node, c) * v.value(node, c).conj() * w;
        }
    }
    acc
}

pub fn flat_norm(u: &GridSection) -> f64 {
    flat_dot(u, u).re.max(0.0).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum KernelSide {
    /// ker D: right null spaces of the symbol.
    Operator,
    /// ker D*: left null spaces of the symbol.
    Adjoint,
}

#[derive(Debug, Clone)]
pub struct HarmonicBasis {
    pub sections: Vec<GridSection>,
    pub side: KernelSide,
    pub threshold: f64,
    /// Max deviation of the Gram matrix from the identity.
    pub gram_residual: f64,
}

impl HarmonicBasis {
    pub fn len(&self) -> usize {
        self.sections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sections.is_empty()
    }

    pub fn coefficients(&self, v: &GridSection) -> Vec<C64> {
        self.sections.iter().map(|e| flat_dot(v, e)).collect()
    }
}

/// Projection onto the span of the basis: H(v) = sum <v, e_j> e_j.
pub fn harmonic_projection(v: &GridSection, basis: &HarmonicBasis) -> GridSection {
    let mut out = GridSection::zeros(v.grid().clone(), v.rank());
    for e in &basis.sections {
        let c = flat_dot(v, e);
        out.add_scaled(e, c);
    }
    out
}

fn gram_residual(sections: &[GridSection]) -> f64 {
    let mut worst = 0.0f64;
    for (j, ej) in sections.iter().enumerate() {
        for (k, ek) in sections.iter().enumerate() {
            let g = flat_dot(ej, ek);
            let want = if j == k { 1.0 } else { 0.0 };
            worst = worst.max((g - want).norm());
        }
    }
    worst
}

/// Basis of ker D* (the harmonic basis used for solvability checks).
pub fn harmonic_basis(op: &EllipticOperator) -> Result<HarmonicBasis, EllipticError> {
    kernel_basis(op, KernelSide::Adjoint)
}

pub fn kernel_basis(op: &EllipticOperator, side: KernelSide) -> Result<HarmonicBasis, EllipticError> {
    if op.is_constant() && op.grid().fully_periodic() {
        kernel_basis_symbol(op, side)
    } else {
        kernel_basis_iterative(op, side)
    }
}

/// Per-frequency null spaces of the symbol matrix.
fn kernel_basis_symbol(op: &EllipticOperator, side: KernelSide) -> Result<HarmonicBasis, EllipticError> {
    let grid = op.grid();
    let n = grid.ndim();
    let rank = op.rank();
    let mut kappa = vec![0.0; n];
    let mut svds = Vec::with_capacity(grid.len());
    let mut opnorm = 0.0f64;
    for bin in 0..grid.len() {
        let multi = grid.multi(bin);
        for a in 0..n {
            kappa[a] = grid.wavenumber(a, multi[a]);
        }
        let svd = op.symbol(&kappa).svd(true, true);
        for &s in svd.singular_values.iter() {
            opnorm = opnorm.max(s);
        }
        svds.push(svd);
    }
    let threshold = 1e-8 * opnorm;
    for svd in &svds {
        for &s in svd.singular_values.iter() {
            if s > threshold / 10.0 && s < threshold * 10.0 {
                return Err(EllipticError::ThresholdAmbiguous { sigma: s, threshold });
            }
        }
    }
    let volume = grid.volume();
    let mut sections = Vec::new();
    for (bin, svd) in svds.iter().enumerate() {
        let multi = grid.multi(bin);
        for a in 0..n {
            kappa[a] = grid.wavenumber(a, multi[a]);
        }
        for (idx, &s) in svd.singular_values.iter().enumerate() {
            if s > threshold {
                continue;
            }
            // Left null vectors span ker S^H, right null vectors ker S.
            let vec: Vec<C64> = match side {
                KernelSide::Adjoint => {
                    let u = svd.u.as_ref().unwrap();
                    (0..rank).map(|i| u[(i, idx)]).collect()
                }
                KernelSide::Operator => {
                    let vt = svd.v_t.as_ref().unwrap();
                    (0..rank).map(|i| vt[(idx, i)].conj()).collect()
                }
            };
            let mut section = GridSection::zeros(grid.clone(), rank);
            for node in 0..grid.len() {
                let x = grid.coords(node);
                let phase: f64 = x.iter().zip(&kappa).map(|(x, k)| x * k).sum();
                let wave = C64::new(0.0, phase).exp() / volume.sqrt();
                for c in 0..rank {
                    section.data_mut()[node * rank + c] = vec[c] * wave;
                }
            }
            sections.push(section);
        }
    }
    let gram = gram_residual(&sections);
    Ok(HarmonicBasis {
        sections,
        side,
        threshold,
        gram_residual: gram,
    })
}

/// Smallest singular subspace of D (or D*) by preconditioned inverse
/// subspace iteration on the corresponding normal operator.
fn kernel_basis_iterative(op: &EllipticOperator, side: KernelSide) -> Result<HarmonicBasis, EllipticError> {
    let grid = op.grid().clone();
    let rank = op.rank();
    // Normal operator whose kernel is the requested side:
    //   Adjoint side: G = D D*, Operator side: G = D* D.
    let normal = |x: &GridSection| -> GridSection {
        match side {
            KernelSide::Adjoint => op.apply(&op.adjoint_apply(x).unwrap()).unwrap(),
            KernelSide::Operator => op.adjoint_apply(&op.apply(x).unwrap()).unwrap(),
        }
    };
    let (opnorm, guess) = frozen_spectrum(op, side);
    let threshold = 1e-8 * opnorm;
    let delta = (1e-4 * opnorm).powi(2);
    let pre = SpectralPreconditioner::new(op, side, delta);

    let block = guess + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_ba5e);
    let mut basis: Vec<GridSection> = (0..block)
        .map(|_| {
            let mut s = GridSection::zeros(grid.clone(), rank);
            for v in s.data_mut().iter_mut() {
                *v = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            }
            s
        })
        .collect();
    orthonormalize(&mut basis);
    for _sweep in 0..4 {
        let mut next = Vec::with_capacity(basis.len());
        for b in &basis {
            let z = pcg_solve(
                |x| {
                    let mut g = normal(x);
                    g.add_scaled(x, C64::new(delta, 0.0));
                    g
                },
                pre.as_ref(),
                b,
                1e-12,
                400,
            )
            .map_err(|history| EllipticError::NoConvergence {
                iterations: history.len(),
                last: *history.last().unwrap_or(&f64::NAN),
                history,
            })?;
            next.push(z);
        }
        orthonormalize(&mut next);
        basis = next;
    }
    // Rayleigh-Ritz on the normal operator to split the spectrum.
    let k = basis.len();
    let mut ritz = DMatrix::<C64>::zeros(k, k);
    let images: Vec<GridSection> = basis.iter().map(&normal).collect();
    for i in 0..k {
        for j in 0..k {
            ritz[(i, j)] = flat_dot(&images[j], &basis[i]);
        }
    }
    let eig = nalgebra::SymmetricEigen::new(ritz);
    let mut kept = Vec::new();
    for (idx, &lambda) in eig.eigenvalues.iter().enumerate() {
        let sigma = lambda.max(0.0).sqrt();
        if sigma > threshold / 10.0 && sigma < threshold * 10.0 {
            return Err(EllipticError::ThresholdAmbiguous { sigma, threshold });
        }
        if sigma <= threshold {
            let mut s = GridSection::zeros(grid.clone(), rank);
            for (j, b) in basis.iter().enumerate() {
                s.add_scaled(b, eig.eigenvectors[(j, idx)]);
            }
            kept.push(s);
        }
    }
    orthonormalize(&mut kept);
    let gram = gram_residual(&kept);
    Ok(HarmonicBasis {
        sections: kept,
        side,
        threshold,
        gram_residual: gram,
    })
}

/// Operator norm estimate and kernel-dimension guess from the frozen
/// (node-averaged) symbol.
fn frozen_spectrum(op: &EllipticOperator, _side: KernelSide) -> (f64, usize) {
    let grid = op.grid();
    let n = grid.ndim();
    let mut kappa = vec![0.0; n];
    let mut opnorm = 0.0f64;
    let mut sigmas = Vec::new();
    for bin in 0..grid.len() {
        let multi = grid.multi(bin);
        for a in 0..n {
            kappa[a] = if grid.is_periodic(a) {
                grid.wavenumber(a, multi[a])
            } else {
                0.0
            };
        }
        let svd = op.frozen_symbol(&kappa).svd(false, false);
        for &s in svd.singular_values.iter() {
            opnorm = opnorm.max(s);
            sigmas.push(s);
        }
    }
    let guess = sigmas.iter().filter(|&&s| s <= 1e-8 * opnorm).count().max(1);
    (opnorm, guess)
}

fn orthonormalize(block: &mut Vec<GridSection>) {
    let mut out: Vec<GridSection> = Vec::with_capacity(block.len());
    for mut b in block.drain(..) {
        for q in &out {
            let c = flat_dot(&b, q);
            b.add_scaled(q, -c);
        }
        // Second pass guards against cancellation.
        for q in &out {
            let c = flat_dot(&b, q);
            b.add_scaled(q, -c);
        }
        let n = flat_norm(&b);
        if n > 1e-13 {
            out.push(b.scaled(C64::new(1.0 / n, 0.0)));
        }
    }
    *block = out;
}

/// Per-mode inverse of the frozen normal symbol plus a shift.
struct SpectralPreconditioner {
    fftp: NdFft,
    inverses: Vec<DMatrix<C64>>,
    rank: usize,
}

impl SpectralPreconditioner {
    fn new(op: &EllipticOperator, side: KernelSide, delta: f64) -> Option<Self> {
        let grid = op.grid();
        if !grid.fully_periodic() {
            return None;
        }
        let fftp = NdFft::for_grid(grid);
        let n = grid.ndim();
        let rank = op.rank();
        let mut kappa = vec![0.0; n];
        let mut inverses = Vec::with_capacity(grid.len());
        for bin in 0..grid.len() {
            let multi = grid.multi(bin);
            for a in 0..n {
                kappa[a] = grid.wavenumber(a, multi[a]);
            }
            let s = op.frozen_symbol(&kappa);
            let normal = match side {
                KernelSide::Adjoint => &s * s.adjoint(),
                KernelSide::Operator => s.adjoint() * &s,
            };
            let shifted = normal + DMatrix::identity(rank, rank) * C64::new(delta, 0.0);
            inverses.push(shifted.try_inverse().unwrap());
        }
        Some(SpectralPreconditioner { fftp, inverses, rank })
    }

    fn apply(&self, r: &GridSection) -> GridSection {
        let mut hats: Vec<Vec<C64>> = (0..self.rank)
            .map(|c| {
                let mut v = r.component(c);
                self.fftp.forward(&mut v);
                v
            })
            .collect();
        for bin in 0..self.inverses.len() {
            let m = &self.inverses[bin];
            let mut out = vec![C64::new(0.0, 0.0); self.rank];
            for i in 0..self.rank {
                for j in 0..self.rank {
                    out[i] += m[(i, j)] * hats[j][bin];
                }
            }
            for (i, v) in out.into_iter().enumerate() {
                hats[i][bin] = v;
            }
        }
        let mut result = GridSection::zeros(r.grid().clone(), self.rank);
        for (c, mut hat) in hats.into_iter().enumerate() {
            self.fftp.inverse(&mut hat);
            result.set_component(c, &hat);
        }
        result
    }
}

/// Preconditioned conjugate gradient on a self-adjoint positive system.
/// Returns Err(residual history) on stagnation.
fn pcg_solve(
    a: impl Fn(&GridSection) -> GridSection,
    pre: Option<&SpectralPreconditioner>,
    rhs: &GridSection,
    rel_tol: f64,
    max_iter: usize,
) -> Result<GridSection, Vec<f64>> {
    let rhs_norm = flat_norm(rhs);
    let mut x = GridSection::zeros(rhs.grid().clone(), rhs.rank());
    if rhs_norm == 0.0 {
        return Ok(x);
    }
    let mut r = rhs.clone();
    let mut z = match pre {
        Some(p) => p.apply(&r),
        None => r.clone(),
    };
    let mut p = z.clone();
    let mut rz = flat_dot(&r, &z);
    let mut history = Vec::new();
    for _ in 0..max_iter {
        let ap = a(&p);
        let pap = flat_dot(&ap, &p);
        let alpha = rz / pap;
        x.add_scaled(&p, alpha);
        r.add_scaled(&ap, -alpha);
        let res = flat_norm(&r) / rhs_norm;
        history.push(res);
        if res <= rel_tol {
            return Ok(x);
        }
        z = match pre {
            Some(pc) => pc.apply(&r),
            None => r.clone(),
        };
        let rz_new = flat_dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        let mut p_next = z.clone();
        p_next.add_scaled(&p, beta);
        p = p_next;
    }
    Err(history)
}

fn orthogonality_check(
    rhs: &GridSection,
    basis: &HarmonicBasis,
    allowance_rel: f64,
) -> Result<(), EllipticError> {
    let scale = flat_norm(rhs);
    if scale == 0.0 {
        return Ok(());
    }
    let max_overlap = basis
        .coefficients(rhs)
        .iter()
        .map(|c| c.norm())
        .fold(0.0f64, f64::max);
    if max_overlap > allowance_rel * scale {
        return Err(EllipticError::NotOrthogonal {
            max_overlap,
            allowance: allowance_rel * scale,
        });
    }
    Ok(())
}

enum SolveSide {
    Forward,
    Adjoint,
}

/// Minimum-norm solution of D u = omega. The right hand side must be
/// orthogonal to ker D* within 1e-8 relative.
pub fn min_norm_solve(op: &EllipticOperator, omega: &GridSection) -> Result<GridSection, EllipticError> {
    let basis = kernel_basis(op, KernelSide::Adjoint)?;
    min_norm_solve_with(op, omega, &basis)
}

pub fn min_norm_solve_with(
    op: &EllipticOperator,
    omega: &GridSection,
    adjoint_kernel: &HarmonicBasis,
) -> Result<GridSection, EllipticError> {
    solve_impl(op, omega, adjoint_kernel, SolveSide::Forward)
}

/// Minimum-norm solution of D* v = g; g must be orthogonal to ker D.
pub fn adjoint_solve(op: &EllipticOperator, g: &GridSection) -> Result<GridSection, EllipticError> {
    let basis = kernel_basis(op, KernelSide::Operator)?;
    solve_impl(op, g, &basis, SolveSide::Adjoint)
}

fn solve_impl(
    op: &EllipticOperator,
    rhs: &GridSection,
    obstruction: &HarmonicBasis,
    side: SolveSide,
) -> Result<GridSection, EllipticError> {
    op.check_compatible(rhs)?;
    orthogonality_check(rhs, obstruction, 1e-8)?;
    if op.is_constant() && op.grid().fully_periodic() {
        return Ok(pinv_solve(op, rhs, matches!(side, SolveSide::Adjoint)));
    }
    // Normal equations with kernel deflation: the minimizer of
    // |D u - rhs| orthogonal to the kernel on the solve side.
    let deflate_side = match side {
        SolveSide::Forward => KernelSide::Operator,
        SolveSide::Adjoint => KernelSide::Adjoint,
    };
    let deflation = kernel_basis(op, deflate_side)?;
    let normal = |x: &GridSection| -> GridSection {
        match side {
            SolveSide::Forward => op.adjoint_apply(&op.apply(x).unwrap()).unwrap(),
            SolveSide::Adjoint => op.apply(&op.adjoint_apply(x).unwrap()).unwrap(),
        }
    };
    let rhs_normal = match side {
        SolveSide::Forward => op.adjoint_apply(rhs).unwrap(),
        SolveSide::Adjoint => op.apply(rhs).unwrap(),
    };
    let pre_side = match side {
        SolveSide::Forward => KernelSide::Operator,
        SolveSide::Adjoint => KernelSide::Adjoint,
    };
    let (opnorm, _) = frozen_spectrum(op, pre_side);
    let delta = (1e-6 * opnorm).powi(2);
    let pre = SpectralPreconditioner::new(op, pre_side, delta);
    let deflate = |s: &mut GridSection| {
        for e in &deflation.sections {
            let c = flat_dot(s, e);
            s.add_scaled(e, -c);
        }
    };
    let mut rhs_defl = rhs_normal.clone();
    deflate(&mut rhs_defl);

    let rhs_scale = flat_norm(rhs);
    let mut x = GridSection::zeros(rhs.grid().clone(), rhs.rank());
    let mut r = rhs_defl.clone();
    let mut z = match &pre {
        Some(p) => p.apply(&r),
        None => r.clone(),
    };
    deflate(&mut z);
    let mut p = z.clone();
    let mut rz = flat_dot(&r, &z);
    let mut history = Vec::new();
    let max_iter = 600;
    for _ in 0..max_iter {
        let ap = normal(&p);
        let alpha = rz / flat_dot(&ap, &p);
        x.add_scaled(&p, alpha);
        r.add_scaled(&ap, -alpha);
        deflate(&mut r);
        let residual = {
            let image = match side {
                SolveSide::Forward => op.apply(&x).unwrap(),
                SolveSide::Adjoint => op.adjoint_apply(&x).unwrap(),
            };
            let mut d = image;
            d.add_scaled(rhs, C64::new(-1.0, 0.0));
            flat_norm(&d) / rhs_scale
        };
        history.push(residual);
        if residual <= 1e-9 {
            deflate(&mut x);
            return Ok(x);
        }
        z = match &pre {
            Some(pc) => pc.apply(&r),
            None => r.clone(),
        };
        deflate(&mut z);
        let rz_new = flat_dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        let mut p_next = z.clone();
        p_next.add_scaled(&p, beta);
        p = p_next;
    }
    Err(EllipticError::NoConvergence {
        iterations: max_iter,
        last: *history.last().unwrap_or(&f64::NAN),
        history,
    })
}

/// Exact minimum-norm solve by per-frequency pseudo-inversion of the
/// symbol (or its adjoint).
fn pinv_solve(op: &EllipticOperator, rhs: &GridSection, adjoint: bool) -> GridSection {
    let grid = op.grid();
    let n = grid.ndim();
    let rank = op.rank();
    let fftp = NdFft::for_grid(grid);
    let mut hats: Vec<Vec<C64>> = (0..rank)
        .map(|c| {
            let mut v = rhs.component(c);
            fftp.forward(&mut v);
            v
        })
        .collect();
    let mut kappa = vec![0.0; n];
    // Threshold relative to the global largest singular value.
    let mut opnorm = 0.0f64;
    let mut symbols = Vec::with_capacity(grid.len());
    for bin in 0..grid.len() {
        let multi = grid.multi(bin);
        for a in 0..n {
            kappa[a] = grid.wavenumber(a, multi[a]);
        }
        let mut s = op.symbol(&kappa);
        if adjoint {
            s = s.adjoint();
        }
        let svd = s.clone().svd(false, false);
        for &sv in svd.singular_values.iter() {
            opnorm = opnorm.max(sv);
        }
        symbols.push(s);
    }
    let eps = 1e-8 * opnorm;
    for (bin, s) in symbols.into_iter().enumerate() {
        let pinv = s.pseudo_inverse(eps).expect("svd available");
        let mut out = vec![C64::new(0.0, 0.0); rank];
        for i in 0..rank {
            for j in 0..rank {
                out[i] += pinv[(i, j)] * hats[j][bin];
            }
        }
        for (i, v) in out.into_iter().enumerate() {
            hats[i][bin] = v;
        }
    }
    let mut result = GridSection::zeros(grid.clone(), rank);
    for (c, mut hat) in hats.into_iter().enumerate() {
        fftp.inverse(&mut hat);
        result.set_component(c, &hat);
    }
    result
}

#[derive(Debug, Clone, Serialize)]
pub struct EllipticityReport {
    pub samples: usize,
    pub min_symbol_norm: f64,
    pub max_symbol_norm: f64,
    pub min_inverse_norm: f64,
    pub max_inverse_norm: f64,
    pub pass: bool,
}

/// Samples the principal symbol over nodes and unit covectors; the axis
/// directions are always included so degenerate operators are caught
/// deterministically.
pub fn ellipticity_audit(
    op: &EllipticOperator,
    samples: usize,
    cond_cap: f64,
    seed: u64,
) -> Result<EllipticityReport, EllipticError> {
    if samples < 1000 {
        return Err(EllipticError::Invalid("audit wants at least 1000 samples".into()));
    }
    let grid = op.grid();
    let n = grid.ndim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(samples);
    for a in 0..n {
        let mut e = vec![0.0; n];
        e[a] = 1.0;
        dirs.push(e.clone());
        e[a] = -1.0;
        dirs.push(e);
    }
    while dirs.len() < samples {
        let mut xi: Vec<f64> = (0..n)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let norm: f64 = xi.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        for v in xi.iter_mut() {
            *v /= norm;
        }
        dirs.push(xi);
    }
    let mut min_norm = f64::INFINITY;
    let mut max_norm = 0.0f64;
    let mut min_inv = f64::INFINITY;
    let mut max_inv = 0.0f64;
    for xi in &dirs {
        let node = rng.gen_range(0..grid.len());
        let s = op.principal_symbol(node, xi);
        let svd = s.svd(false, false);
        let smax = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
        let smin = svd
            .singular_values
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        if smin <= 0.0 || smax / smin > cond_cap {
            return Err(EllipticError::NotElliptic {
                node,
                xi: xi.clone(),
                cond: if smin > 0.0 { smax / smin } else { f64::INFINITY },
            });
        }
        min_norm = min_norm.min(smax);
        max_norm = max_norm.max(smax);
        min_inv = min_inv.min(1.0 / smin);
        max_inv = max_inv.max(1.0 / smin);
    }
    Ok(EllipticityReport {
        samples: dirs.len(),
        min_symbol_norm: min_norm,
        max_symbol_norm: max_norm,
        min_inverse_norm: min_inv,
        max_inverse_norm: max_inv,
        pass: true,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct SeriesTrace {
    /// |h_k| per iteration, starting at k = 0.
    pub h_norms: Vec<f64>,
    /// max_j |e_j 1_B| measured before iterating.
    pub smallness: f64,
    pub smallness_allowed: f64,
    pub iterations: usize,
    /// |P_h omega'| / |omega| after the series.
    pub final_projection: f64,
}

#[derive(Debug)]
pub struct SeriesSolution {
    /// The extension: equals omega on the ball, orthogonal to the basis.
    pub omega_prime: GridSection,
    /// Minimum-norm solution with D u = omega on the ball.
    pub u: GridSection,
    pub trace: SeriesTrace,
}

/// Local series construction: pushes the harmonic content of ball data
/// outside the ball, then solves globally.
pub fn local_series_solve(
    op: &EllipticOperator,
    omega: &GridSection,
    ball: &BallNodes,
) -> Result<SeriesSolution, EllipticError> {
    op.check_compatible(omega)?;
    let basis = harmonic_basis(op)?;
    let grid = op.grid();
    let mut mask = vec![0.0f64; grid.len()];
    for &(node, _) in &ball.members {
        mask[node] = 1.0;
    }
    let co_mask: Vec<f64> = mask.iter().map(|&m| 1.0 - m).collect();
    let omega_ball = omega.masked(&mask);
    let omega_norm = flat_norm(omega);

    let k = basis.len();
    let allowed = if k > 0 { 0.25 / (k as f64).sqrt() } else { f64::INFINITY };
    let smallness = basis
        .sections
        .iter()
        .map(|e| flat_norm(&e.masked(&mask)))
        .fold(0.0f64, f64::max);
    if k > 0 && smallness > allowed {
        return Err(EllipticError::BallTooLarge {
            max_mass: smallness,
            allowed,
        });
    }

    // Coefficient-space iteration: c_{k+1} = (I - M) c_k with
    // M_ij = <e_j 1_{B^c}, e_i>, accumulating the outside corrections.
    let coeffs0: Vec<C64> = basis.coefficients(&omega_ball);
    let mut h_norms = vec![norm_c(&coeffs0)];
    let mut omega_prime = omega_ball.clone();
    let mut trace_iters = 0usize;
    if k > 0 && h_norms[0] > 1e-14 * omega_norm.max(1e-300) {
        let mut m = DMatrix::<C64>::zeros(k, k);
        let restricted: Vec<GridSection> =
            basis.sections.iter().map(|e| e.masked(&co_mask)).collect();
        for j in 0..k {
            for i in 0..k {
                m[(i, j)] = flat_dot(&restricted[j], &basis.sections[i]);
            }
        }
        let mut c = DVector::from_vec(coeffs0.clone());
        let tol = 1e-10 * h_norms[0];
        for _iter in 0..64 {
            if c.norm() <= tol {
                break;
            }
            // omega_{k+1} = 1_{B^c} sum_j c_j e_j, subtracted from omega'.
            let mut correction = GridSection::zeros(grid.clone(), op.rank());
            for (j, e) in restricted.iter().enumerate() {
                correction.add_scaled(e, c[j]);
            }
            omega_prime.add_scaled(&correction, C64::new(-1.0, 0.0));
            c = &c - &m * &c;
            trace_iters += 1;
            h_norms.push(c.norm());
        }
        if *h_norms.last().unwrap() > tol {
            return Err(EllipticError::NoConvergence {
                iterations: trace_iters,
                last: *h_norms.last().unwrap(),
                history: h_norms,
            });
        }
    }
    let final_projection = flat_norm(&harmonic_projection(&omega_prime, &basis));
    if final_projection > 1e-9 * omega_norm.max(1e-300) {
        return Err(EllipticError::NoConvergence {
            iterations: trace_iters,
            last: final_projection,
            history: h_norms,
        });
    }
    let u = min_norm_solve_with(op, &omega_prime, &basis)?;
    Ok(SeriesSolution {
        omega_prime,
        u,
        trace: SeriesTrace {
            h_norms,
            smallness,
            smallness_allowed: allowed,
            iterations: trace_iters,
            final_projection: final_projection / omega_norm.max(1e-300),
        },
    })
}

fn norm_c(c: &[C64]) -> f64 {
    c.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
}
