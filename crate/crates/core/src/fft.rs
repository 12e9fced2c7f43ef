//! Spectral transforms and differentiation on structured grids.
//!
//! Periodic axes are differentiated exactly in Fourier space; bounded axes
//! fall back to fourth-order finite differences with Fornberg weights so
//! cylinder sections stay differentiable near their boundary.

use crate::grid::Grid;
use crate::C64;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

/// Per-axis FFT plans over the periodic axes of a grid.
pub struct NdFft {
    dims: Vec<usize>,
    axes: Vec<usize>,
    fwd: Vec<Arc<dyn Fft<f64>>>,
    inv: Vec<Arc<dyn Fft<f64>>>,
    strides: Vec<usize>,
}

impl NdFft {
    pub fn for_grid(grid: &Grid) -> Self {
        let axes: Vec<usize> = (0..grid.ndim()).filter(|&a| grid.is_periodic(a)).collect();
        Self::new(grid.dims(), &axes)
    }

    pub fn new(dims: &[usize], axes: &[usize]) -> Self {
        let mut planner = FftPlanner::new();
        let fwd = axes
            .iter()
            .map(|&a| planner.plan_fft_forward(dims[a]))
            .collect();
        let inv = axes
            .iter()
            .map(|&a| planner.plan_fft_inverse(dims[a]))
            .collect();
        let mut strides = vec![0usize; dims.len()];
        let mut acc = 1usize;
        for i in (0..dims.len()).rev() {
            strides[i] = acc;
            acc *= dims[i];
        }
        NdFft {
            dims: dims.to_vec(),
            axes: axes.to_vec(),
            fwd,
            inv,
            strides,
        }
    }

    fn transform_axis(&self, data: &mut [C64], which: usize, forward: bool) {
        let axis = self.axes[which];
        let n = self.dims[axis];
        if n == 1 {
            return;
        }
        let stride = self.strides[axis];
        let plan = if forward { &self.fwd[which] } else { &self.inv[which] };
        let total: usize = self.dims.iter().product();
        let lines = total / n;
        let mut scratch = vec![C64::new(0.0, 0.0); n];
        for line in 0..lines {
            // Decompose the line id into (outer block, inner offset).
            let outer = line / stride;
            let inner = line % stride;
            let base = outer * stride * n + inner;
            for j in 0..n {
                scratch[j] = data[base + j * stride];
            }
            plan.process(&mut scratch);
            for j in 0..n {
                data[base + j * stride] = scratch[j];
            }
        }
    }

    /// Unnormalized forward transform along the planned axes.
    pub fn forward(&self, data: &mut [C64]) {
        for which in 0..self.axes.len() {
            self.transform_axis(data, which, true);
        }
    }

    /// Inverse transform including the 1/N normalization.
    pub fn inverse(&self, data: &mut [C64]) {
        let mut scale = 1.0;
        for which in 0..self.axes.len() {
            self.transform_axis(data, which, false);
            scale *= self.dims[self.axes[which]] as f64;
        }
        let inv = 1.0 / scale;
        for v in data.iter_mut() {
            *v *= inv;
        }
    }
}

/// Visits every FFT bin of a fully periodic grid with its physical
/// wavenumber vector.
pub fn for_each_mode(grid: &Grid, mut f: impl FnMut(usize, &[f64])) {
    debug_assert!(grid.fully_periodic());
    let n = grid.ndim();
    let mut kappa = vec![0.0; n];
    for node in 0..grid.len() {
        let multi = grid.multi(node);
        for a in 0..n {
            kappa[a] = grid.wavenumber(a, multi[a]);
        }
        f(node, &kappa);
    }
}

/// Fourier multiplier of `∂^α` at wavenumber `κ`: `Π (iκ_a)^{α_a}`.
pub fn derivative_symbol(kappa: &[f64], alpha: &[u32]) -> C64 {
    let mut s = C64::new(1.0, 0.0);
    for (a, &ord) in alpha.iter().enumerate() {
        for _ in 0..ord {
            s *= C64::new(0.0, kappa[a]);
        }
    }
    s
}

/// Finite-difference weights on the offsets `nodes·h` approximating the
/// `m`-th derivative at offset `x0·h` (Fornberg's recursion).
pub fn fd_weights(nodes: &[f64], x0: f64, m: usize) -> Vec<f64> {
    let n = nodes.len();
    assert!(n > m);
    let mut c = vec![vec![0.0; m + 1]; n];
    c[0][0] = 1.0;
    let mut c1 = 1.0;
    let mut c4 = nodes[0] - x0;
    for i in 1..n {
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = nodes[i] - x0;
        for j in 0..i {
            let c3 = nodes[i] - nodes[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=m.min(i)).rev() {
                    c[i][k] = c1 * (k as f64 * c[i - 1][k - 1] - c5 * c[i - 1][k]) / c2;
                }
                c[i][0] = -c1 * c5 * c[i - 1][0] / c2;
            }
            for k in (1..=m.min(i)).rev() {
                c[j][k] = (c4 * c[j][k] - k as f64 * c[j][k - 1]) / c3;
            }
            c[j][0] = c4 * c[j][0] / c3;
        }
        c1 = c2;
    }
    c.into_iter().map(|row| row[m]).collect()
}

/// Differentiates one bounded axis with fourth-order stencils (centered in
/// the interior, one-sided near the endpoints).
fn fd_axis_derivative(grid: &Grid, data: &[C64], axis: usize, order: usize) -> Vec<C64> {
    let n = grid.dims()[axis];
    let h = grid.spacing(axis);
    let width = order + 4; // fourth-order accuracy for every row
    assert!(n >= width, "axis too short for fourth-order stencils");
    // Precompute one weight row per output index.
    let rows: Vec<(usize, Vec<f64>)> = (0..n)
        .map(|i| {
            let start = i.saturating_sub(width / 2).min(n - width);
            let offsets: Vec<f64> = (0..width).map(|j| (start + j) as f64).collect();
            let w = fd_weights(&offsets, i as f64, order);
            let scale = h.powi(-(order as i32));
            (start, w.into_iter().map(|v| v * scale).collect())
        })
        .collect();
    let mut out = vec![C64::new(0.0, 0.0); data.len()];
    let stride: usize = grid.dims()[axis + 1..].iter().product();
    let lines = data.len() / n;
    for line in 0..lines {
        let outer = line / stride;
        let inner = line % stride;
        let base = outer * stride * n + inner;
        for i in 0..n {
            let (start, w) = &rows[i];
            let mut acc = C64::new(0.0, 0.0);
            for (j, &wj) in w.iter().enumerate() {
                acc += data[base + (start + j) * stride] * wj;
            }
            out[base + i * stride] = acc;
        }
    }
    out
}

/// `∂^α` of a scalar lattice: spectral on periodic axes, fourth-order
/// finite differences on bounded axes.
pub fn partial_derivative(grid: &Grid, data: &[C64], alpha: &[u32]) -> Vec<C64> {
    assert_eq!(alpha.len(), grid.ndim());
    let spectral_alpha: Vec<u32> = (0..grid.ndim())
        .map(|a| if grid.is_periodic(a) { alpha[a] } else { 0 })
        .collect();
    let mut out = data.to_vec();
    if spectral_alpha.iter().any(|&o| o > 0) {
        let fft = NdFft::for_grid(grid);
        fft.forward(&mut out);
        let mut bin = 0usize;
        for_each_mode_partial(grid, |kappa| {
            out[bin] *= derivative_symbol(kappa, &spectral_alpha);
            bin += 1;
        });
        fft.inverse(&mut out);
    }
    for a in 0..grid.ndim() {
        if !grid.is_periodic(a) && alpha[a] > 0 {
            out = fd_axis_derivative(grid, &out, a, alpha[a] as usize);
        }
    }
    out
}

/// Mode visitor that tolerates bounded axes (their wavenumber slot is 0).
fn for_each_mode_partial(grid: &Grid, mut f: impl FnMut(&[f64])) {
    let n = grid.ndim();
    let mut kappa = vec![0.0; n];
    for node in 0..grid.len() {
        let multi = grid.multi(node);
        for a in 0..n {
            kappa[a] = if grid.is_periodic(a) {
                grid.wavenumber(a, multi[a])
            } else {
                0.0
            };
        }
        f(&kappa);
    }
}

/// Spectral interpolation of a fully periodic lattice onto the grid with
/// every axis doubled. Exact for band-limited data.
pub fn upsample2(grid: &Grid, data: &[C64]) -> (Grid, Vec<C64>) {
    assert!(grid.fully_periodic());
    let fine_dims: Vec<usize> = grid.dims().iter().map(|&d| 2 * d).collect();
    let fine = Grid::torus(&fine_dims, grid.extents());
    let fft = NdFft::for_grid(grid);
    let mut hat = data.to_vec();
    fft.forward(&mut hat);
    let mut fine_hat = vec![C64::new(0.0, 0.0); fine.len()];
    let gain = (fine.len() / grid.len()) as f64;
    for bin in 0..grid.len() {
        let multi = grid.multi(bin);
        let fine_multi: Vec<usize> = multi
            .iter()
            .zip(grid.dims())
            .map(|(&k, &n)| {
                let signed = if 2 * k <= n { k as isize } else { k as isize - n as isize };
                signed.rem_euclid(2 * n as isize) as usize
            })
            .collect();
        fine_hat[fine.index(&fine_multi)] = hat[bin] * gain;
    }
    let fine_fft = NdFft::for_grid(&fine);
    fine_fft.inverse(&mut fine_hat);
    (fine, fine_hat)
}
