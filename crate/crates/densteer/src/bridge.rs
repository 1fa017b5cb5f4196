//! Steering core in linearized coordinates: cost functional, optimal
//! control field, HJB/FPK residual evaluators, the backward/forward linear
//! PDE integrators, the Schrödinger fixed point, and Hopf-Cole recovery.
//!
//! Grid solves are restricted to one or two space axes (time-extruded
//! storage); higher-dimensional validation goes through particles.

use crate::density::{DensityError, GridDensity};
use crate::feedlin::{FeedbackLinearization, LinError};
use crate::grid::GridSpec;
use crate::par;
use crate::probe::probe_points;
use crate::vectorfield::{DomainBox, FieldError};
use nalgebra::{DMatrix, DVector};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BridgeError {
    #[error("bridge: explicit step violates the CFL bound; use nt >= {suggested_nt} or allow substepping")]
    CflViolation { suggested_nt: usize },
    #[error("bridge: positivity lost at time index {t_index} (min value {min:.3e})")]
    PositivityLoss { t_index: usize, min: f64 },
    #[error("bridge: field must be strictly positive (min value {min:.3e})")]
    Positivity { min: f64 },
    #[error("bridge: fixed point did not converge in {iterations} iterations (last change {last:.3e})")]
    NoConvergence {
        iterations: usize,
        last: f64,
        residual_history: Vec<f64>,
    },
    #[error("bridge: boundary division exceeded 1e12 (support mismatch, max quotient {max_quotient:.3e})")]
    DivisionBlowup { max_quotient: f64 },
    #[error("bridge: transformed input map is singular (|det| = {det:.3e})")]
    Singularity { det: f64 },
    #[error("bridge: grid solver supports 1 or 2 axes, got {dim}")]
    GridDim { dim: usize },
    #[error("bridge: boundary densities must share one grid")]
    GridMismatch,
    #[error(transparent)]
    Density(#[from] DensityError),
    #[error(transparent)]
    Lin(#[from] LinError),
    #[error(transparent)]
    Field(#[from] FieldError),
}

enum PlantMaps {
    /// `δ_τ ≡ 0`, `Γ_τ ≡ I`.
    Trivial,
    Linearization(Arc<FeedbackLinearization>),
    Custom {
        delta: Arc<dyn Fn(&[f64]) -> DVector<f64> + Send + Sync>,
        gamma: Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>,
    },
}

impl std::fmt::Debug for PlantMaps {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PlantMaps::Trivial => write!(f, "Trivial"),
            PlantMaps::Linearization(_) => write!(f, "Linearization"),
            PlantMaps::Custom { .. } => write!(f, "Custom"),
        }
    }
}

/// The steering problem data in linearized coordinates: Brunovsky pair,
/// composite maps `δ_τ = δ ∘ τ^{-1}` and `Γ_τ = Γ ∘ τ^{-1}`, noise level,
/// and the solver box.
#[derive(Debug)]
pub struct LinearizedPlant {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub epsilon: f64,
    pub z_box: DomainBox,
    maps: PlantMaps,
}

impl LinearizedPlant {
    /// Plant with trivial maps (`δ_τ = 0`, `Γ_τ = I`), e.g. toy chains.
    pub fn trivial(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        epsilon: f64,
        z_box: DomainBox,
    ) -> Result<Self, BridgeError> {
        let plant = LinearizedPlant {
            a,
            b,
            epsilon,
            z_box,
            maps: PlantMaps::Trivial,
        };
        plant.check_probe_invariants()?;
        Ok(plant)
    }

    /// Plant induced by a feedback linearization, with composite maps
    /// routed through `τ^{-1}`.
    pub fn from_linearization(
        fl: Arc<FeedbackLinearization>,
        epsilon: f64,
    ) -> Result<Self, BridgeError> {
        let plant = LinearizedPlant {
            a: fl.a.clone(),
            b: fl.b.clone(),
            epsilon,
            z_box: fl.z_domain.clone(),
            maps: PlantMaps::Linearization(fl),
        };
        plant.check_probe_invariants()?;
        Ok(plant)
    }

    pub fn custom(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        epsilon: f64,
        z_box: DomainBox,
        delta: Arc<dyn Fn(&[f64]) -> DVector<f64> + Send + Sync>,
        gamma: Arc<dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync>,
    ) -> Result<Self, BridgeError> {
        let plant = LinearizedPlant {
            a,
            b,
            epsilon,
            z_box,
            maps: PlantMaps::Custom { delta, gamma },
        };
        plant.check_probe_invariants()?;
        Ok(plant)
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    /// True when `δ_τ ≡ 0` and `Γ_τ ≡ I` (lets the simulators skip the
    /// per-step inverse).
    pub fn is_trivial_maps(&self) -> bool {
        matches!(self.maps, PlantMaps::Trivial)
    }

    /// `δ_τ(z)`.
    pub fn delta_tau(&self, z: &[f64]) -> Result<DVector<f64>, BridgeError> {
        match &self.maps {
            PlantMaps::Trivial => Ok(DVector::zeros(self.input_dim())),
            PlantMaps::Linearization(fl) => {
                let x = fl.inverse_map(z)?;
                Ok(fl.delta(&x)?)
            }
            PlantMaps::Custom { delta, .. } => Ok(delta(z)),
        }
    }

    /// `Γ_τ(z)`.
    pub fn gamma_tau(&self, z: &[f64]) -> Result<DMatrix<f64>, BridgeError> {
        match &self.maps {
            PlantMaps::Trivial => Ok(DMatrix::identity(self.input_dim(), self.input_dim())),
            PlantMaps::Linearization(fl) => {
                let x = fl.inverse_map(z)?;
                Ok(fl.gamma(&x)?)
            }
            PlantMaps::Custom { gamma, .. } => Ok(gamma(z)),
        }
    }

    fn delta_gamma_seeded(
        &self,
        z: &[f64],
        seed: Option<&[f64]>,
    ) -> Result<(DVector<f64>, DMatrix<f64>, Option<Vec<f64>>), BridgeError> {
        match &self.maps {
            PlantMaps::Linearization(fl) => {
                let x = fl.inverse_map_seeded(z, seed)?;
                let (d, g) = fl.delta_gamma(&x)?;
                Ok((d, g, Some(x)))
            }
            _ => Ok((self.delta_tau(z)?, self.gamma_tau(z)?, None)),
        }
    }

    /// `Γ_τ(z)^{-1}`.
    pub fn gamma_tau_inv(&self, z: &[f64]) -> Result<DMatrix<f64>, BridgeError> {
        let g = self.gamma_tau(z)?;
        invert(&g)
    }

    /// Diffusion matrix `D(z) = B Γ_τ^{-1} (B Γ_τ^{-1})^T`.
    pub fn diffusion_matrix(&self, z: &[f64]) -> Result<DMatrix<f64>, BridgeError> {
        let gi = self.gamma_tau_inv(z)?;
        let bgi = &self.b * gi;
        Ok(&bgi * bgi.transpose())
    }

    /// Probe-point checks of the stored invariants: `Γ_τ` invertible on the
    /// box and `D(z)` symmetric PSD.
    fn check_probe_invariants(&self) -> Result<(), BridgeError> {
        let center = self.z_box.center();
        let radius = self
            .z_box
            .lo
            .iter()
            .zip(&self.z_box.hi)
            .map(|(a, b)| 0.5 * (b - a))
            .fold(f64::INFINITY, f64::min);
        let mut points = vec![center.clone()];
        points.extend(probe_points(&center, 0.9 * radius, 16));
        for z in &points {
            let g = self.gamma_tau(z)?;
            let det = g.determinant().abs();
            if det <= 1e-8 * g.norm() {
                return Err(BridgeError::Singularity { det });
            }
            let d = self.diffusion_matrix(z)?;
            if (&d - d.transpose()).amax() > 1e-9 {
                return Err(BridgeError::Singularity { det });
            }
            let eig = d.symmetric_eigenvalues();
            if eig.iter().any(|&l| l < -1e-9 * (1.0 + d.amax())) {
                return Err(BridgeError::Singularity { det });
            }
        }
        Ok(())
    }
}

fn invert(m: &DMatrix<f64>) -> Result<DMatrix<f64>, BridgeError> {
    let det = m.determinant().abs();
    m.clone()
        .try_inverse()
        .filter(|_| det > 1e-14 * (1.0 + m.norm()))
        .ok_or(BridgeError::Singularity { det })
}

/// Running-cost integrand `L(z, v) = ||δ_τ(z) + Γ_τ(z) v||²`. The `1/2`
/// factor of the objective is applied by callers.
pub fn lagrangian_cost(
    plant: &LinearizedPlant,
    z: &[f64],
    v: &DVector<f64>,
) -> Result<f64, BridgeError> {
    let u = plant.delta_tau(z)? + plant.gamma_tau(z)? * v;
    Ok(u.norm_squared())
}

/// Perspective-function form of the cost in `(σ, m)` variables:
/// `½ ||δ_τ σ + Γ_τ m||² / σ` for `σ > 0`, `0` at `(0, 0)`, `+∞`
/// otherwise.
pub fn cost_j(
    plant: &LinearizedPlant,
    z: &[f64],
    sigma: f64,
    mflux: &DVector<f64>,
) -> Result<f64, BridgeError> {
    if sigma > 0.0 {
        let u = plant.delta_tau(z)? * sigma + plant.gamma_tau(z)? * mflux;
        return Ok(0.5 * u.norm_squared() / sigma);
    }
    if sigma == 0.0 && mflux.iter().all(|&v| v == 0.0) {
        return Ok(0.0);
    }
    Ok(f64::INFINITY)
}

/// Scalar field on a grid extruded over `nt + 1` uniformly spaced times in
/// `[0, 1]`.
#[derive(Debug, Clone)]
pub struct SpaceTimeField {
    pub grid: GridSpec,
    pub nt: usize,
    data: Vec<f64>,
}

impl SpaceTimeField {
    pub fn zeros(grid: GridSpec, nt: usize) -> Self {
        let len = (nt + 1) * grid.num_cells();
        SpaceTimeField {
            grid,
            nt,
            data: vec![0.0; len],
        }
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 / self.nt as f64
    }

    pub fn slice(&self, k: usize) -> &[f64] {
        let cells = self.grid.num_cells();
        &self.data[k * cells..(k + 1) * cells]
    }

    pub fn slice_mut(&mut self, k: usize) -> &mut [f64] {
        let cells = self.grid.num_cells();
        &mut self.data[k * cells..(k + 1) * cells]
    }

    pub fn map<F: Fn(f64) -> f64>(&self, f: F) -> SpaceTimeField {
        SpaceTimeField {
            grid: self.grid.clone(),
            nt: self.nt,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map<F: Fn(f64, f64) -> f64>(&self, other: &SpaceTimeField, f: F) -> SpaceTimeField {
        debug_assert_eq!(self.data.len(), other.data.len());
        SpaceTimeField {
            grid: self.grid.clone(),
            nt: self.nt,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// Max |value| over interior cells at interior times.
    pub fn max_interior_abs(&self) -> f64 {
        let mut worst = 0.0_f64;
        for k in 1..self.nt {
            for (c, &v) in self.slice(k).iter().enumerate() {
                if is_interior(&self.grid, c) {
                    worst = worst.max(v.abs());
                }
            }
        }
        worst
    }
}

fn is_interior(grid: &GridSpec, cell: usize) -> bool {
    grid.coords(cell)
        .iter()
        .zip(&grid.shape)
        .all(|(&c, &s)| c > 0 && c + 1 < s)
}

/// `m`-component control field on the same grid/time layout, stored
/// (time, component, cell).
#[derive(Debug, Clone)]
pub struct ControlField {
    pub grid: GridSpec,
    pub nt: usize,
    pub m: usize,
    data: Vec<f64>,
}

impl ControlField {
    pub fn zeros(grid: GridSpec, nt: usize, m: usize) -> Self {
        let len = (nt + 1) * m * grid.num_cells();
        ControlField {
            grid,
            nt,
            m,
            data: vec![0.0; len],
        }
    }

    pub fn component(&self, k: usize, comp: usize) -> &[f64] {
        let cells = self.grid.num_cells();
        let start = (k * self.m + comp) * cells;
        &self.data[start..start + cells]
    }

    pub fn component_mut(&mut self, k: usize, comp: usize) -> &mut [f64] {
        let cells = self.grid.num_cells();
        let start = (k * self.m + comp) * cells;
        &mut self.data[start..start + cells]
    }

    /// Multilinear in space, linear in time, nearest-value outside the box.
    pub fn interp_into(&self, z: &[f64], t: f64, out: &mut [f64]) {
        let tf = (t.clamp(0.0, 1.0)) * self.nt as f64;
        let k0 = (tf.floor() as usize).min(self.nt.saturating_sub(1));
        let frac = tf - k0 as f64;
        for comp in 0..self.m {
            let a = self.grid.interp(self.component(k0, comp), z);
            let b = self.grid.interp(self.component(k0 + 1, comp), z);
            out[comp] = (1.0 - frac) * a + frac * b;
        }
    }
}

/// Cell-precomputed plant data shared by the solvers: drift
/// `w(z) = A z - B Γ_τ^{-1} δ_τ`, diffusion matrix, and the control-law
/// matrices.
pub(crate) struct PlantOnGrid {
    pub grid: GridSpec,
    pub n: usize,
    pub m: usize,
    pub epsilon: f64,
    /// w per cell, layout (cell, axis).
    pub w: Vec<f64>,
    /// D per cell, layout (cell, row, col).
    pub d: Vec<f64>,
    /// (Γ_τ^T Γ_τ)^{-1} B^T per cell, layout (cell, comp, axis).
    pub quadinv_bt: Vec<f64>,
    /// Γ_τ^{-1} δ_τ per cell.
    pub gaminv_delta: Vec<f64>,
    /// δ_τ per cell.
    pub delta: Vec<f64>,
    /// Γ_τ per cell (row-major m x m).
    pub gamma: Vec<f64>,
}

impl PlantOnGrid {
    pub fn build(plant: &LinearizedPlant, grid: &GridSpec) -> Result<Self, BridgeError> {
        let n = plant.state_dim();
        let m = plant.input_dim();
        if grid.dim() != n {
            return Err(BridgeError::GridDim { dim: grid.dim() });
        }
        let cells = grid.num_cells();
        struct CellData {
            w: Vec<f64>,
            d: Vec<f64>,
            quadinv_bt: Vec<f64>,
            gaminv_delta: Vec<f64>,
            delta: Vec<f64>,
            gamma: Vec<f64>,
        }
        const CHUNK: usize = 256;
        let chunks = cells.div_ceil(CHUNK);
        let parts: Vec<Result<CellData, BridgeError>> = par::map_indexed(chunks, |ci| {
            let start = ci * CHUNK;
            let end = (start + CHUNK).min(cells);
            let len = end - start;
            let mut out = CellData {
                w: Vec::with_capacity(len * n),
                d: Vec::with_capacity(len * n * n),
                quadinv_bt: Vec::with_capacity(len * m * n),
                gaminv_delta: Vec::with_capacity(len * m),
                delta: Vec::with_capacity(len * m),
                gamma: Vec::with_capacity(len * m * m),
            };
            let mut seed: Option<Vec<f64>> = None;
            for c in start..end {
                let z = grid.center(c);
                let (delta, gamma, x) = plant.delta_gamma_seeded(&z, seed.as_deref())?;
                seed = x;
                let gamma_inv = invert(&gamma)?;
                let bgi = &plant.b * &gamma_inv;
                let d = &bgi * bgi.transpose();
                let gid = &gamma_inv * &delta;
                let zv = DVector::from_vec(z);
                let w = &plant.a * &zv - &plant.b * &gid;
                let quad_inv = invert(&(gamma.transpose() * &gamma))?;
                let qbt = quad_inv * plant.b.transpose();
                out.w.extend(w.iter());
                out.d.extend(d.iter().cloned());
                for r in 0..m {
                    for cx in 0..n {
                        out.quadinv_bt.push(qbt[(r, cx)]);
                    }
                }
                out.gaminv_delta.extend(gid.iter());
                out.delta.extend(delta.iter());
                for r in 0..m {
                    for cc in 0..m {
                        out.gamma.push(gamma[(r, cc)]);
                    }
                }
            }
            Ok(out)
        });
        let mut w = Vec::with_capacity(cells * n);
        let mut d = Vec::with_capacity(cells * n * n);
        let mut quadinv_bt = Vec::with_capacity(cells * m * n);
        let mut gaminv_delta = Vec::with_capacity(cells * m);
        let mut delta = Vec::with_capacity(cells * m);
        let mut gamma = Vec::with_capacity(cells * m * m);
        for part in parts {
            let part = part?;
            w.extend(part.w);
            d.extend(part.d);
            quadinv_bt.extend(part.quadinv_bt);
            gaminv_delta.extend(part.gaminv_delta);
            delta.extend(part.delta);
            gamma.extend(part.gamma);
        }
        Ok(PlantOnGrid {
            grid: grid.clone(),
            n,
            m,
            epsilon: plant.epsilon,
            w,
            d,
            quadinv_bt,
            gaminv_delta,
            delta,
            gamma,
        })
    }

    #[inline]
    pub fn w_at(&self, cell: usize, axis: usize) -> f64 {
        self.w[cell * self.n + axis]
    }

    #[inline]
    pub fn d_at(&self, cell: usize, row: usize, col: usize) -> f64 {
        self.d[(cell * self.n + row) * self.n + col]
    }

    /// Largest stable explicit step: advective Courant 0.9, diffusive 0.45.
    fn stable_dt(&self) -> f64 {
        let cells = self.grid.num_cells();
        let n = self.n;
        let mut adv_rate = 0.0_f64; // max over cells of Σ_a |w_a|/Δa
        let mut diff_rate = 0.0_f64; // max over cells of Σ_ab |D_ab|/(Δa Δb)
        let spacing: Vec<f64> = (0..n).map(|a| self.grid.spacing(a)).collect();
        for c in 0..cells {
            let mut ar = 0.0;
            let mut dr = 0.0;
            for a in 0..n {
                ar += self.w_at(c, a).abs() / spacing[a];
                for b in 0..n {
                    dr += self.d_at(c, a, b).abs() / (spacing[a] * spacing[b]);
                }
            }
            adv_rate = adv_rate.max(ar);
            diff_rate = diff_rate.max(dr);
        }
        let adv_dt = if adv_rate > 0.0 {
            0.9 / adv_rate
        } else {
            f64::INFINITY
        };
        let diff_dt = if diff_rate > 0.0 {
            0.45 / (self.epsilon * diff_rate)
        } else {
            f64::INFINITY
        };
        adv_dt.min(diff_dt)
    }
}

/// Time-stepping policy for the explicit schemes. `Auto` splits each
/// stored macro step into however many CFL-stable substeps are needed;
/// `Fixed` takes exactly one explicit step per stored step and errors out
/// when that violates the CFL bound.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stepping {
    #[default]
    Auto,
    Fixed,
}

fn substeps_for(pg: &PlantOnGrid, nt: usize, stepping: Stepping) -> Result<usize, BridgeError> {
    let dt_macro = 1.0 / nt as f64;
    let dt_limit = pg.stable_dt();
    if dt_macro <= dt_limit {
        return Ok(1);
    }
    match stepping {
        Stepping::Auto => Ok((dt_macro / dt_limit).ceil() as usize),
        Stepping::Fixed => Err(BridgeError::CflViolation {
            suggested_nt: (1.0 / dt_limit).ceil() as usize,
        }),
    }
}

/// One conservative forward substep:
/// `u += dt (-∇·(w u) + ε Σ_ab ∂²(D_ab u)/∂z_a∂z_b)`, flux form with
/// zero-flux boundary faces, donor-cell upwind advection, split
/// advect-then-diffuse passes.
fn forward_substep(pg: &PlantOnGrid, dt: f64, old: &[f64], tmp: &mut Vec<f64>, new: &mut [f64]) {
    let grid = &pg.grid;
    let n = pg.n;
    let strides = grid.strides();
    let shape = grid.shape.clone();
    let spacing: Vec<f64> = (0..n).map(|a| grid.spacing(a)).collect();
    let eps = pg.epsilon;

    // advection pass
    tmp.clear();
    tmp.extend(par::map_indexed(old.len(), |c| {
        let coords = grid.coords(c);
        let mut div = 0.0;
        for a in 0..n {
            let s = strides[a];
            let flux_right = if coords[a] + 1 < shape[a] {
                let wf = 0.5 * (pg.w_at(c, a) + pg.w_at(c + s, a));
                wf * if wf > 0.0 { old[c] } else { old[c + s] }
            } else {
                0.0
            };
            let flux_left = if coords[a] > 0 {
                let wf = 0.5 * (pg.w_at(c - s, a) + pg.w_at(c, a));
                wf * if wf > 0.0 { old[c - s] } else { old[c] }
            } else {
                0.0
            };
            div += (flux_right - flux_left) / spacing[a];
        }
        old[c] - dt * div
    }));

    // diffusion pass on the advected values, also flux form
    let adv: &[f64] = tmp;
    let diffused = par::map_indexed(adv.len(), |c| {
        let coords = grid.coords(c);
        // centered d/dz_j of (D_aj u) at a cell, one-sided at the walls
        let du_grad = |cell: usize, ccoords: &[usize], a: usize, j: usize| -> f64 {
            let s = strides[j];
            let up = ccoords[j] + 1 < shape[j];
            let down = ccoords[j] > 0;
            let val = |cc: usize| pg.d_at(cc, a, j) * adv[cc];
            match (down, up) {
                (true, true) => (val(cell + s) - val(cell - s)) / (2.0 * spacing[j]),
                (false, true) => (val(cell + s) - val(cell)) / spacing[j],
                (true, false) => (val(cell) - val(cell - s)) / spacing[j],
                (false, false) => 0.0,
            }
        };
        let mut div = 0.0;
        for a in 0..n {
            let s = strides[a];
            let q_right = if coords[a] + 1 < shape[a] {
                let mut q =
                    (pg.d_at(c + s, a, a) * adv[c + s] - pg.d_at(c, a, a) * adv[c]) / spacing[a];
                for j in 0..n {
                    if j != a {
                        let mut up_coords = coords.clone();
                        up_coords[a] += 1;
                        q += 0.5 * (du_grad(c, &coords, a, j) + du_grad(c + s, &up_coords, a, j));
                    }
                }
                q
            } else {
                0.0
            };
            let q_left = if coords[a] > 0 {
                let mut q =
                    (pg.d_at(c, a, a) * adv[c] - pg.d_at(c - s, a, a) * adv[c - s]) / spacing[a];
                for j in 0..n {
                    if j != a {
                        let mut dn_coords = coords.clone();
                        dn_coords[a] -= 1;
                        q += 0.5 * (du_grad(c, &coords, a, j) + du_grad(c - s, &dn_coords, a, j));
                    }
                }
                q
            } else {
                0.0
            };
            div += (q_right - q_left) / spacing[a];
        }
        adv[c] + dt * eps * div
    });
    new.copy_from_slice(&diffused);
}

/// One backward substep in reversed time:
/// `φ += dt (<∇φ, w> + ε <D, Hess φ>)`, upwind first derivatives (forward
/// difference where `w > 0`), centered second derivatives, copy-out
/// (homogeneous Neumann) walls.
fn backward_substep(pg: &PlantOnGrid, dt: f64, old: &[f64], tmp: &mut Vec<f64>, new: &mut [f64]) {
    let grid = &pg.grid;
    let n = pg.n;
    let strides = grid.strides();
    let shape = grid.shape.clone();
    let spacing: Vec<f64> = (0..n).map(|a| grid.spacing(a)).collect();
    let eps = pg.epsilon;

    // advection pass
    tmp.clear();
    tmp.extend(par::map_indexed(old.len(), |c| {
        let coords = grid.coords(c);
        let mut adv = 0.0;
        for a in 0..n {
            let s = strides[a];
            let w = pg.w_at(c, a);
            let dphi = if w > 0.0 {
                if coords[a] + 1 < shape[a] {
                    (old[c + s] - old[c]) / spacing[a]
                } else {
                    0.0
                }
            } else if coords[a] > 0 {
                (old[c] - old[c - s]) / spacing[a]
            } else {
                0.0
            };
            adv += w * dphi;
        }
        old[c] + dt * adv
    }));

    let base: &[f64] = tmp;
    let diffused = par::map_indexed(base.len(), |c| {
        let coords = grid.coords(c);
        let shifted = |a: usize, da: i64, b: usize, db: i64| -> f64 {
            let mut cc = coords.clone();
            let ca = cc[a] as i64 + da;
            cc[a] = ca.clamp(0, shape[a] as i64 - 1) as usize;
            if n > 1 {
                let cb = cc[b] as i64 + db;
                cc[b] = cb.clamp(0, shape[b] as i64 - 1) as usize;
            }
            base[grid.flat_index(&cc)]
        };
        let mut hess_term = 0.0;
        for a in 0..n {
            let up = shifted(a, 1, a, 0);
            let dn = shifted(a, -1, a, 0);
            hess_term += pg.d_at(c, a, a) * (up - 2.0 * base[c] + dn) / (spacing[a] * spacing[a]);
            for b in (a + 1)..n {
                let cross = (shifted(a, 1, b, 1) - shifted(a, 1, b, -1) - shifted(a, -1, b, 1)
                    + shifted(a, -1, b, -1))
                    / (4.0 * spacing[a] * spacing[b]);
                hess_term += 2.0 * pg.d_at(c, a, b) * cross;
            }
        }
        base[c] + dt * eps * hess_term
    });
    new.copy_from_slice(&diffused);
}

fn run_forward(
    pg: &PlantOnGrid,
    initial: &[f64],
    nt: usize,
    stepping: Stepping,
) -> Result<SpaceTimeField, BridgeError> {
    let substeps = substeps_for(pg, nt, stepping)?;
    let dt = 1.0 / (nt as f64 * substeps as f64);
    let cells = pg.grid.num_cells();
    let mut field = SpaceTimeField::zeros(pg.grid.clone(), nt);
    field.slice_mut(0).copy_from_slice(initial);
    let mut cur = initial.to_vec();
    let mut next = vec![0.0; cells];
    let mut tmp = Vec::with_capacity(cells);
    for k in 1..=nt {
        for _ in 0..substeps {
            forward_substep(pg, dt, &cur, &mut tmp, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        let min = cur.iter().cloned().fold(f64::INFINITY, f64::min);
        if min < -1e-10 {
            return Err(BridgeError::PositivityLoss { t_index: k, min });
        }
        for v in cur.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        field.slice_mut(k).copy_from_slice(&cur);
    }
    Ok(field)
}

fn run_backward(
    pg: &PlantOnGrid,
    terminal: &[f64],
    nt: usize,
    stepping: Stepping,
) -> Result<SpaceTimeField, BridgeError> {
    let substeps = substeps_for(pg, nt, stepping)?;
    let dt = 1.0 / (nt as f64 * substeps as f64);
    let cells = pg.grid.num_cells();
    let mut field = SpaceTimeField::zeros(pg.grid.clone(), nt);
    field.slice_mut(nt).copy_from_slice(terminal);
    let mut cur = terminal.to_vec();
    let mut next = vec![0.0; cells];
    let mut tmp = Vec::with_capacity(cells);
    for k in (0..nt).rev() {
        for _ in 0..substeps {
            backward_substep(pg, dt, &cur, &mut tmp, &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        let min = cur.iter().cloned().fold(f64::INFINITY, f64::min);
        if min < -1e-10 {
            return Err(BridgeError::PositivityLoss { t_index: k, min });
        }
        for v in cur.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        field.slice_mut(k).copy_from_slice(&cur);
    }
    Ok(field)
}

/// Integrate the backward equation
/// `∂φ/∂t + <∇φ, Az - BΓ_τ^{-1}δ_τ> + ε<D, Hess φ> = 0`
/// from `t = 1` down to `t = 0`. `nt` fixes the stored time resolution;
/// `Auto` stepping substeps internally to satisfy the CFL bound.
pub fn solve_backward_pde(
    plant: &LinearizedPlant,
    grid: &GridSpec,
    phi_terminal: &[f64],
    nt: usize,
    stepping: Stepping,
) -> Result<SpaceTimeField, BridgeError> {
    let min = phi_terminal.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        return Err(BridgeError::Positivity { min });
    }
    let pg = PlantOnGrid::build(plant, grid)?;
    run_backward(&pg, phi_terminal, nt, stepping)
}

/// Integrate the forward equation
/// `∂φ̂/∂t + ∇·((Az - BΓ_τ^{-1}δ_τ) φ̂) - ε Σ_ab ∂²(D_ab φ̂)/∂z_a∂z_b = 0`
/// from `t = 0` to `t = 1` in conservative flux form (mass is conserved to
/// rounding for interior-supported data).
pub fn solve_forward_pde(
    plant: &LinearizedPlant,
    grid: &GridSpec,
    phi_hat_initial: &[f64],
    nt: usize,
    stepping: Stepping,
) -> Result<SpaceTimeField, BridgeError> {
    let min = phi_hat_initial
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if min < 0.0 {
        return Err(BridgeError::Positivity { min });
    }
    let pg = PlantOnGrid::build(plant, grid)?;
    run_forward(&pg, phi_hat_initial, nt, stepping)
}

/// Central-difference gradient of one stored slice at one cell, one-sided
/// at the walls.
fn grad_at(grid: &GridSpec, values: &[f64], cell: usize, coords: &[usize], out: &mut [f64]) {
    let strides = grid.strides();
    for a in 0..grid.dim() {
        let s = strides[a];
        let h = grid.spacing(a);
        let up = coords[a] + 1 < grid.shape[a];
        let down = coords[a] > 0;
        out[a] = match (down, up) {
            (true, true) => (values[cell + s] - values[cell - s]) / (2.0 * h),
            (false, true) => (values[cell + s] - values[cell]) / h,
            (true, false) => (values[cell] - values[cell - s]) / h,
            (false, false) => 0.0,
        };
    }
}

/// Optimal control field `v(z, t) = (Γ_τ^T Γ_τ)^{-1} B^T ∇ψ - Γ_τ^{-1} δ_τ`
/// from a stored `ψ`. Cells where `ψ` is undefined (flagged support) take
/// the value of the nearest defined cell.
pub fn optimal_control_field(
    plant: &LinearizedPlant,
    psi: &SpaceTimeField,
) -> Result<ControlField, BridgeError> {
    let pg = PlantOnGrid::build(plant, &psi.grid)?;
    Ok(control_field_from_psi(&pg, psi))
}

pub(crate) fn control_field_from_psi(pg: &PlantOnGrid, psi: &SpaceTimeField) -> ControlField {
    let grid = &pg.grid;
    let n = pg.n;
    let m = pg.m;
    let cells = grid.num_cells();
    let strides = grid.strides();
    let mut v = ControlField::zeros(grid.clone(), psi.nt, m);
    let mut grad = vec![0.0; n];
    for k in 0..=psi.nt {
        let slice = psi.slice(k);
        let mut vals = vec![f64::NAN; cells * m];
        for c in 0..cells {
            let coords = grid.coords(c);
            let neighbors_ok = (0..n).all(|a| {
                let s = strides[a];
                let up_ok = coords[a] + 1 >= grid.shape[a] || slice[c + s].is_finite();
                let dn_ok = coords[a] == 0 || slice[c - s].is_finite();
                up_ok && dn_ok
            });
            if slice[c].is_finite() && neighbors_ok {
                grad_at(grid, slice, c, &coords, &mut grad);
                for comp in 0..m {
                    let mut acc = -pg.gaminv_delta[c * m + comp];
                    for a in 0..n {
                        acc += pg.quadinv_bt[(c * m + comp) * n + a] * grad[a];
                    }
                    vals[c * m + comp] = acc;
                }
            }
        }
        nearest_fill(grid, m, &mut vals);
        for comp in 0..m {
            let dst = v.component_mut(k, comp);
            for c in 0..cells {
                dst[c] = vals[c * m + comp];
            }
        }
    }
    v
}

/// Replace NaN cells with the value of the nearest (L1 grid distance)
/// defined cell. Rare path; plain scan.
fn nearest_fill(grid: &GridSpec, m: usize, vals: &mut [f64]) {
    let cells = grid.num_cells();
    let bad: Vec<usize> = (0..cells)
        .filter(|&c| (0..m).any(|j| !vals[c * m + j].is_finite()))
        .collect();
    if bad.is_empty() || bad.len() == cells {
        return;
    }
    let good: Vec<usize> = (0..cells)
        .filter(|&c| (0..m).all(|j| vals[c * m + j].is_finite()))
        .collect();
    for &c in &bad {
        let cc = grid.coords(c);
        let mut best = good[0];
        let mut best_d = usize::MAX;
        for &g in &good {
            let gc = grid.coords(g);
            let d: usize = cc.iter().zip(&gc).map(|(&a, &b)| a.abs_diff(b)).sum();
            if d < best_d {
                best_d = d;
                best = g;
            }
        }
        for j in 0..m {
            vals[c * m + j] = vals[best * m + j];
        }
    }
}

/// Pointwise residual of the HJB equation
/// `ψ_t + <∇ψ, Az> - <∇ψ, BΓ_τ^{-1}δ_τ> + ½<∇ψ, D∇ψ> (+ ε<D, Hess ψ>)`
/// with central differences; interior cells at interior times only
/// (boundary entries stay zero).
pub fn hjb_residual(
    plant: &LinearizedPlant,
    psi: &SpaceTimeField,
    include_diffusion: bool,
) -> Result<SpaceTimeField, BridgeError> {
    let pg = PlantOnGrid::build(plant, &psi.grid)?;
    let grid = psi.grid.clone();
    let n = pg.n;
    let cells = grid.num_cells();
    let strides = grid.strides();
    let dt = 1.0 / psi.nt as f64;
    let mut out = SpaceTimeField::zeros(grid.clone(), psi.nt);
    let mut grad = vec![0.0; n];
    for k in 1..psi.nt {
        let prev = psi.slice(k - 1);
        let here = psi.slice(k);
        let next = psi.slice(k + 1);
        let mut res = vec![0.0; cells];
        for c in 0..cells {
            if !is_interior(&grid, c) {
                continue;
            }
            let coords = grid.coords(c);
            grad_at(&grid, here, c, &coords, &mut grad);
            let psi_t = (next[c] - prev[c]) / (2.0 * dt);
            let z = grid.center(c);
            let zv = DVector::from_vec(z);
            let azv = &plant.a * &zv;
            let mut adv = 0.0;
            let mut drift = 0.0;
            for a in 0..n {
                adv += grad[a] * azv[a];
                // B Γ^{-1} δ = A z - w
                drift += grad[a] * (azv[a] - pg.w_at(c, a));
            }
            let mut quad = 0.0;
            for a in 0..n {
                for b in 0..n {
                    quad += grad[a] * pg.d_at(c, a, b) * grad[b];
                }
            }
            let mut r = psi_t + adv - drift + 0.5 * quad;
            if include_diffusion {
                let mut hess_term = 0.0;
                for a in 0..n {
                    let s = strides[a];
                    let ha = grid.spacing(a);
                    let second = (here[c + s] - 2.0 * here[c] + here[c - s]) / (ha * ha);
                    hess_term += pg.d_at(c, a, a) * second;
                    for b in (a + 1)..n {
                        let sb = strides[b];
                        let hb = grid.spacing(b);
                        let cross = (here[c + s + sb] - here[c + s - sb] - here[c - s + sb]
                            + here[c - s - sb])
                            / (4.0 * ha * hb);
                        hess_term += 2.0 * pg.d_at(c, a, b) * cross;
                    }
                }
                r += pg.epsilon * hess_term;
            }
            res[c] = if r.is_finite() { r } else { 0.0 };
        }
        out.slice_mut(k).copy_from_slice(&res);
    }
    Ok(out)
}

/// Pointwise residual of the controlled FPK equation
/// `σ_t + ∇·((Az + Bv) σ) - ε Σ_ab ∂²(D_ab σ)/∂z_a∂z_b` with central
/// differences on interior cells/times.
pub fn fpk_residual(
    plant: &LinearizedPlant,
    sigma: &SpaceTimeField,
    v: &ControlField,
) -> Result<SpaceTimeField, BridgeError> {
    let pg = PlantOnGrid::build(plant, &sigma.grid)?;
    let grid = sigma.grid.clone();
    let n = pg.n;
    let m = pg.m;
    let cells = grid.num_cells();
    let strides = grid.strides();
    let dt = 1.0 / sigma.nt as f64;
    let mut out = SpaceTimeField::zeros(grid.clone(), sigma.nt);
    // drift Az + Bv at (slice, cell, axis)
    let vel = |k: usize, c: usize, axis: usize| -> f64 {
        let z = grid.center(c);
        let mut acc = 0.0;
        for (j, zj) in z.iter().enumerate() {
            acc += plant.a[(axis, j)] * zj;
        }
        for comp in 0..m {
            acc += plant.b[(axis, comp)] * v.component(k, comp)[c];
        }
        acc
    };
    for k in 1..sigma.nt {
        let prev = sigma.slice(k - 1);
        let here = sigma.slice(k);
        let next = sigma.slice(k + 1);
        let mut res = vec![0.0; cells];
        for c in 0..cells {
            if !is_interior(&grid, c) {
                continue;
            }
            let sigma_t = (next[c] - prev[c]) / (2.0 * dt);
            let mut div = 0.0;
            for a in 0..n {
                let s = strides[a];
                let h = grid.spacing(a);
                let fp = vel(k, c + s, a) * here[c + s];
                let fm = vel(k, c - s, a) * here[c - s];
                div += (fp - fm) / (2.0 * h);
            }
            let mut diff = 0.0;
            for a in 0..n {
                let s = strides[a];
                let ha = grid.spacing(a);
                let du = |cc: usize, r: usize, q: usize| pg.d_at(cc, r, q) * here[cc];
                diff += (du(c + s, a, a) - 2.0 * du(c, a, a) + du(c - s, a, a)) / (ha * ha);
                for b in (a + 1)..n {
                    let sb = strides[b];
                    let hb = grid.spacing(b);
                    let cross = (du(c + s + sb, a, b) - du(c + s - sb, a, b)
                        - du(c - s + sb, a, b)
                        + du(c - s - sb, a, b))
                        / (4.0 * ha * hb);
                    diff += 2.0 * cross;
                }
            }
            let r = sigma_t + div - pg.epsilon * diff;
            res[c] = if r.is_finite() { r } else { 0.0 };
        }
        out.slice_mut(k).copy_from_slice(&res);
    }
    Ok(out)
}

/// Hopf-Cole recovery: `σ = φ φ̂`, `ψ = 2ε log φ`. Requires `φ > 0`.
pub fn hopf_cole_recover(
    phi: &SpaceTimeField,
    phi_hat: &SpaceTimeField,
    epsilon: f64,
) -> Result<(SpaceTimeField, SpaceTimeField), BridgeError> {
    let mut min = f64::INFINITY;
    for k in 0..=phi.nt {
        for &v in phi.slice(k) {
            min = min.min(v);
        }
    }
    if min <= 0.0 {
        return Err(BridgeError::Positivity { min });
    }
    let sigma = phi.zip_map(phi_hat, |a, b| a * b);
    let psi = phi.map(|v| 2.0 * epsilon * v.ln());
    Ok((sigma, psi))
}

/// Converged Schrödinger system: the factors, the recovered pair, the
/// optimal control field, and iteration diagnostics.
#[derive(Debug)]
pub struct SchrodingerSolution {
    pub epsilon: f64,
    pub phi: SpaceTimeField,
    pub phi_hat: SpaceTimeField,
    pub sigma_opt: SpaceTimeField,
    /// `2ε log φ`; NaN where the support was flagged.
    pub psi: SpaceTimeField,
    pub v_opt: ControlField,
    pub iterations: usize,
    /// L1 change of `φ̂(·, 0)` per iteration.
    pub residual_history: Vec<f64>,
    /// Fraction of boundary cells hit by the division guard.
    pub flagged_fraction: f64,
    /// L1 distances of the `σ_opt` boundary slices from the prescribed
    /// endpoint densities.
    pub boundary_l1: (f64, f64),
}

#[derive(Debug, Clone)]
pub struct FixedPointOptions {
    pub nt: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub stepping: Stepping,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        FixedPointOptions {
            nt: 200,
            tol: 1e-8,
            max_iter: 200,
            stepping: Stepping::Auto,
        }
    }
}

/// Guarded pointwise division `num / den`: cells with `den < 1e-12` yield
/// zero and are flagged; quotients beyond 1e12 abort (support mismatch).
fn guarded_div(num: &[f64], den: &[f64]) -> Result<(Vec<f64>, usize), BridgeError> {
    let mut flagged = 0usize;
    let mut out = Vec::with_capacity(num.len());
    for (&a, &b) in num.iter().zip(den) {
        if b < 1e-12 {
            flagged += 1;
            out.push(0.0);
        } else {
            let q = a / b;
            if q > 1e12 {
                return Err(BridgeError::DivisionBlowup { max_quotient: q });
            }
            out.push(q);
        }
    }
    Ok((out, flagged))
}

/// Fortet-style fixed point on the Schrödinger system: alternate forward
/// and backward solves with the multiplicative boundary couplings
/// `φ(·,1) = σ₁/φ̂(·,1)` and `φ̂(·,0) = σ₀/φ(·,0)` until `φ̂(·,0)`
/// stops moving in L1.
pub fn schrodinger_fixed_point(
    plant: &LinearizedPlant,
    sigma0: &GridDensity,
    sigma1: &GridDensity,
    opts: &FixedPointOptions,
) -> Result<SchrodingerSolution, BridgeError> {
    if sigma0.spec != sigma1.spec {
        return Err(BridgeError::GridMismatch);
    }
    let grid = sigma0.spec.clone();
    if grid.dim() > 2 {
        return Err(BridgeError::GridDim { dim: grid.dim() });
    }
    let pg = PlantOnGrid::build(plant, &grid)?;
    let cells = grid.num_cells();
    let vol = grid.cell_volume();

    let mut phi_hat0 = vec![1.0; cells];
    let mut history = Vec::new();
    let mut flagged_total = 0usize;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let phi_hat = run_forward(&pg, &phi_hat0, opts.nt, opts.stepping)?;
        let (phi1, f1) = guarded_div(&sigma1.values, phi_hat.slice(opts.nt))?;
        let phi = run_backward(&pg, &phi1, opts.nt, opts.stepping)?;
        let (phi_hat0_new, f0) = guarded_div(&sigma0.values, phi.slice(0))?;
        flagged_total = f0 + f1;
        let change: f64 = phi_hat0_new
            .iter()
            .zip(&phi_hat0)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            * vol;
        history.push(change);
        phi_hat0 = phi_hat0_new;
        if change < opts.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        let last = history.last().cloned().unwrap_or(f64::INFINITY);
        return Err(BridgeError::NoConvergence {
            iterations,
            last,
            residual_history: history,
        });
    }

    // one more sweep with the converged factor so the stored pair is
    // mutually consistent
    let phi_hat = run_forward(&pg, &phi_hat0, opts.nt, opts.stepping)?;
    let (phi1, _) = guarded_div(&sigma1.values, phi_hat.slice(opts.nt))?;
    let phi = run_backward(&pg, &phi1, opts.nt, opts.stepping)?;

    let sigma_opt = phi.zip_map(&phi_hat, |a, b| a * b);
    let epsilon = plant.epsilon;
    let psi = phi.map(|v| {
        if v > 0.0 {
            2.0 * epsilon * v.ln()
        } else {
            f64::NAN
        }
    });
    let v_opt = control_field_from_psi(&pg, &psi);

    let l1 = |slice: &[f64], target: &[f64]| -> f64 {
        slice
            .iter()
            .zip(target)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            * vol
    };
    let boundary_l1 = (
        l1(sigma_opt.slice(0), &sigma0.values),
        l1(sigma_opt.slice(opts.nt), &sigma1.values),
    );
    let flagged_fraction = flagged_total as f64 / (2.0 * cells as f64);

    Ok(SchrodingerSolution {
        epsilon,
        phi,
        phi_hat,
        sigma_opt,
        psi,
        v_opt,
        iterations,
        residual_history: history,
        flagged_fraction,
        boundary_l1,
    })
}

/// Grid quadrature of the objective `∫∫ ½ L(z, v_opt) σ_opt dz dt`
/// (trapezoid in time).
pub fn control_energy(
    plant: &LinearizedPlant,
    solution: &SchrodingerSolution,
) -> Result<f64, BridgeError> {
    let grid = &solution.sigma_opt.grid;
    let pg = PlantOnGrid::build(plant, grid)?;
    let cells = grid.num_cells();
    let m = pg.m;
    let vol = grid.cell_volume();
    let nt = solution.sigma_opt.nt;
    let dt = 1.0 / nt as f64;
    let mut total = 0.0;
    for k in 0..=nt {
        let sigma = solution.sigma_opt.slice(k);
        let mut slice_acc = 0.0;
        for c in 0..cells {
            if sigma[c] == 0.0 {
                continue;
            }
            let mut nrm2 = 0.0;
            for r in 0..m {
                let mut u = pg.delta[c * m + r];
                for q in 0..m {
                    u += pg.gamma[(c * m + r) * m + q] * solution.v_opt.component(k, q)[c];
                }
                nrm2 += u * u;
            }
            slice_acc += 0.5 * nrm2 * sigma[c] * vol;
        }
        let w = if k == 0 || k == nt { 0.5 } else { 1.0 };
        total += w * slice_acc * dt;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plant_1d(epsilon: f64) -> LinearizedPlant {
        LinearizedPlant::trivial(
            DMatrix::zeros(1, 1),
            DMatrix::identity(1, 1),
            epsilon,
            DomainBox::new(vec![-8.0], vec![8.0]).unwrap(),
        )
        .unwrap()
    }

    fn gaussian_slice(grid: &GridSpec, mean: f64, var: f64) -> Vec<f64> {
        (0..grid.num_cells())
            .map(|i| {
                let z = grid.center(i)[0];
                (-(z - mean) * (z - mean) / (2.0 * var)).exp()
                    / (2.0 * std::f64::consts::PI * var).sqrt()
            })
            .collect()
    }

    #[test]
    fn cost_functional_cases() {
        let plant = plant_1d(0.5);
        let z = [0.3];
        let delta = plant.delta_tau(&z).unwrap();
        let v = -(plant.gamma_tau_inv(&z).unwrap() * delta);
        assert!(lagrangian_cost(&plant, &z, &v).unwrap() < 1e-28);
        assert_eq!(cost_j(&plant, &z, 0.0, &DVector::zeros(1)).unwrap(), 0.0);
        assert_eq!(
            cost_j(&plant, &z, 0.0, &DVector::from_vec(vec![0.5])).unwrap(),
            f64::INFINITY
        );
        // homogeneity: σ = 2, m = 2 v0 gives ||v0||²
        let v0 = DVector::from_vec(vec![0.7]);
        let j = cost_j(&plant, &z, 2.0, &(&v0 * 2.0)).unwrap();
        assert!((j - v0.norm_squared()).abs() < 1e-14);
    }

    #[test]
    fn diffusion_matrix_trivial_case() {
        let plant = plant_1d(0.1);
        let d = plant.diffusion_matrix(&[0.0]).unwrap();
        assert!((d[(0, 0)] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn forward_solver_matches_heat_kernel() {
        // A = 0, δ = 0, D = 1: φ̂_t = ε φ̂_zz, so N(0, s0) -> N(0, s0 + 2εt)
        let eps = 0.25;
        let plant = plant_1d(eps);
        let grid = GridSpec::new(vec![-8.0], vec![8.0], vec![256]);
        let s0 = 0.5;
        let initial = gaussian_slice(&grid, 0.0, s0);
        let field = solve_forward_pde(&plant, &grid, &initial, 50, Stepping::Auto).unwrap();
        let expect = gaussian_slice(&grid, 0.0, s0 + 2.0 * eps);
        let err: f64 = field
            .slice(50)
            .iter()
            .zip(&expect)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            * grid.cell_volume();
        assert!(err < 5e-3, "L1 error {err}");
    }

    #[test]
    fn forward_solver_conserves_mass() {
        let plant = plant_1d(0.4);
        let grid = GridSpec::new(vec![-8.0], vec![8.0], vec![200]);
        let initial = gaussian_slice(&grid, -1.0, 0.25);
        let field = solve_forward_pde(&plant, &grid, &initial, 40, Stepping::Auto).unwrap();
        let vol = grid.cell_volume();
        let m0: f64 = field.slice(0).iter().sum::<f64>() * vol;
        for k in 1..=40 {
            let mk: f64 = field.slice(k).iter().sum::<f64>() * vol;
            assert!((mk - m0).abs() < 1e-10, "mass drift at k={k}: {}", mk - m0);
        }
    }

    #[test]
    fn forward_zero_stays_zero_and_cfl_guard_fires() {
        let plant = plant_1d(0.5);
        let grid = GridSpec::new(vec![-4.0], vec![4.0], vec![400]);
        let zero = vec![0.0; 400];
        let f = solve_forward_pde(&plant, &grid, &zero, 10, Stepping::Auto).unwrap();
        assert!(f.slice(10).iter().all(|&v| v == 0.0));
        // the golden resolution (400 cells, nt = 200) needs substepping
        let initial = gaussian_slice(&grid, 0.0, 0.25);
        match solve_forward_pde(&plant, &grid, &initial, 200, Stepping::Fixed) {
            Err(BridgeError::CflViolation { suggested_nt }) => {
                assert!(suggested_nt > 200, "suggested {suggested_nt}");
            }
            other => panic!("expected CFL violation, got {other:?}"),
        }
    }

    #[test]
    fn backward_constant_is_stationary() {
        let plant = plant_1d(0.5);
        let grid = GridSpec::new(vec![-4.0], vec![4.0], vec![100]);
        let ones = vec![1.0; 100];
        let field = solve_backward_pde(&plant, &grid, &ones, 20, Stepping::Auto).unwrap();
        for k in 0..=20 {
            for &v in field.slice(k) {
                assert!((v - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_solver_widens_gaussian() {
        // unnormalized exp(-z²/2v): evolving backward over time t adds 2εt
        // to v and scales the amplitude by sqrt(v/(v+2εt))
        let eps = 0.25;
        let plant = plant_1d(eps);
        let grid = GridSpec::new(vec![-8.0], vec![8.0], vec![256]);
        let v1 = 0.8;
        let terminal: Vec<f64> = (0..256)
            .map(|i| {
                let z = grid.center(i)[0];
                (-z * z / (2.0 * v1)).exp()
            })
            .collect();
        let field = solve_backward_pde(&plant, &grid, &terminal, 50, Stepping::Auto).unwrap();
        let v0 = v1 + 2.0 * eps;
        let amp = (v1 / v0).sqrt();
        let mut max_err = 0.0_f64;
        for i in 0..256 {
            let z = grid.center(i)[0];
            let expect = amp * (-z * z / (2.0 * v0)).exp();
            max_err = max_err.max((field.slice(0)[i] - expect).abs());
        }
        assert!(max_err < 2e-3, "max error {max_err}");
    }

    #[test]
    fn forward_solver_is_linear() {
        let plant = plant_1d(0.3);
        let grid = GridSpec::new(vec![-6.0], vec![6.0], vec![128]);
        let f1 = gaussian_slice(&grid, -1.0, 0.3);
        let f2 = gaussian_slice(&grid, 1.5, 0.6);
        let (a, b) = (0.7, -0.2);
        let combo: Vec<f64> = f1.iter().zip(&f2).map(|(x, y)| a * x + b * y).collect();
        let pg = PlantOnGrid::build(&plant, &grid).unwrap();
        let run = |input: &[f64]| -> Vec<f64> {
            let mut cur = input.to_vec();
            let mut next = vec![0.0; input.len()];
            let mut tmp = Vec::new();
            for _ in 0..64 {
                forward_substep(&pg, 1e-4, &cur, &mut tmp, &mut next);
                std::mem::swap(&mut cur, &mut next);
            }
            cur
        };
        let lhs = run(&combo);
        let r1 = run(&f1);
        let r2 = run(&f2);
        for i in 0..lhs.len() {
            let rhs = a * r1[i] + b * r2[i];
            assert!((lhs[i] - rhs).abs() < 1e-10, "cell {i}");
        }
    }

    #[test]
    fn hopf_cole_round_trip() {
        let grid = GridSpec::new(vec![-2.0], vec![2.0], vec![32]);
        let mut phi = SpaceTimeField::zeros(grid.clone(), 4);
        let mut phi_hat = SpaceTimeField::zeros(grid.clone(), 4);
        for k in 0..=4 {
            for (c, v) in phi.slice_mut(k).iter_mut().enumerate() {
                *v = 1.0 + 0.1 * (c as f64 / 32.0) + 0.05 * k as f64;
            }
            for v in phi_hat.slice_mut(k).iter_mut() {
                *v = 0.5;
            }
        }
        let eps = 0.4;
        let (sigma, psi) = hopf_cole_recover(&phi, &phi_hat, eps).unwrap();
        for k in 0..=4 {
            for (c, &p) in psi.slice(k).iter().enumerate() {
                let back = (p / (2.0 * eps)).exp();
                assert!((back - phi.slice(k)[c]).abs() < 1e-12);
                assert!((sigma.slice(k)[c] - phi.slice(k)[c] * 0.5).abs() < 1e-15);
            }
        }
        // φ ≡ 1 gives ψ ≡ 0 and σ = φ̂
        let ones = phi.map(|_| 1.0);
        let (sigma, psi) = hopf_cole_recover(&ones, &phi_hat, eps).unwrap();
        assert!(psi.slice(2).iter().all(|&v| v == 0.0));
        assert!(sigma
            .slice(2)
            .iter()
            .zip(phi_hat.slice(2))
            .all(|(a, b)| a == b));
    }

    #[test]
    fn optimal_control_trivial_cases() {
        let plant = plant_1d(0.5);
        let grid = GridSpec::new(vec![-2.0], vec![2.0], vec![64]);
        // constant ψ, δ = 0 -> v ≡ 0
        let psi = SpaceTimeField::zeros(grid.clone(), 4).map(|_| 3.7);
        let v = optimal_control_field(&plant, &psi).unwrap();
        assert!(v.component(2, 0).iter().all(|&x| x.abs() < 1e-12));
        // linear ψ = c z -> v ≡ B^T c = c
        let mut psi = SpaceTimeField::zeros(grid.clone(), 4);
        for k in 0..=4 {
            for (c, v) in psi.slice_mut(k).iter_mut().enumerate() {
                *v = 2.5 * grid.center(c)[0];
            }
        }
        let v = optimal_control_field(&plant, &psi).unwrap();
        for &x in v.component(1, 0) {
            assert!((x - 2.5).abs() < 1e-9, "{x}");
        }
    }

    #[test]
    fn fixed_point_converges_on_coarse_toy() {
        let plant = plant_1d(0.5);
        let grid = GridSpec::new(vec![-4.0], vec![4.0], vec![100]);
        let (s0, _) = GridDensity::from_fn(grid.clone(), |z| {
            (-(z[0] + 1.0) * (z[0] + 1.0) / 0.5).exp()
        })
        .unwrap();
        let (s1, _) = GridDensity::from_fn(grid.clone(), |z| {
            (-(z[0] - 1.0) * (z[0] - 1.0) / 0.5).exp()
        })
        .unwrap();
        let opts = FixedPointOptions {
            nt: 50,
            tol: 1e-8,
            max_iter: 200,
            stepping: Stepping::Auto,
        };
        let sol = schrodinger_fixed_point(&plant, &s0, &s1, &opts).unwrap();
        assert!(sol.iterations < 100, "iterations {}", sol.iterations);
        assert!(sol.boundary_l1.0 < 2e-2, "L1(0) = {}", sol.boundary_l1.0);
        assert!(sol.boundary_l1.1 < 2e-2, "L1(1) = {}", sol.boundary_l1.1);
        // mirror symmetry of the data under (z, t) -> (-z, 1-t): the
        // midpoint slice must be even
        let mid = sol.sigma_opt.slice(25);
        let cells = grid.num_cells();
        for c in 0..cells {
            let diff = (mid[c] - mid[cells - 1 - c]).abs();
            assert!(diff < 1e-9, "asymmetry {diff} at {c}");
        }
        // boundary coupling after convergence
        let vol = grid.cell_volume();
        let prod_err: f64 = sol
            .phi
            .slice(0)
            .iter()
            .zip(sol.phi_hat.slice(0))
            .zip(&s0.values)
            .map(|((p, q), s)| (p * q - s).abs())
            .sum::<f64>()
            * vol;
        assert!(prod_err < 1e-6, "coupling error {prod_err}");
    }

    #[test]
    fn fpk_residual_stationary_uniform() {
        // σ uniform, v ≡ 0, A = 0, δ = 0: residual vanishes identically
        let plant = plant_1d(0.5);
        let grid = GridSpec::new(vec![-1.0], vec![1.0], vec![40]);
        let sigma = SpaceTimeField::zeros(grid.clone(), 8).map(|_| 0.5);
        let v = ControlField::zeros(grid, 8, 1);
        let res = fpk_residual(&plant, &sigma, &v).unwrap();
        assert!(res.max_interior_abs() < 1e-14);
    }

    #[test]
    fn hjb_residual_zero_for_zero_psi() {
        let plant = plant_1d(0.5);
        let grid = GridSpec::new(vec![-1.0], vec![1.0], vec![40]);
        let psi = SpaceTimeField::zeros(grid, 8);
        let res = hjb_residual(&plant, &psi, true).unwrap();
        assert!(res.max_interior_abs() == 0.0);
    }

    #[test]
    fn fpk_residual_heat_kernel_refinement() {
        // analytic N(0, s0 + 2εt) with v = 0 satisfies the FPK; the
        // discrete residual must shrink under refinement
        let eps = 0.25;
        let plant = plant_1d(eps);
        let s0 = 0.5;
        let residual_at = |cells: usize, nt: usize| -> f64 {
            let grid = GridSpec::new(vec![-8.0], vec![8.0], vec![cells]);
            let mut sigma = SpaceTimeField::zeros(grid.clone(), nt);
            for k in 0..=nt {
                let var = s0 + 2.0 * eps * (k as f64 / nt as f64);
                let vals = gaussian_slice(&grid, 0.0, var);
                sigma.slice_mut(k).copy_from_slice(&vals);
            }
            let v = ControlField::zeros(grid, nt, 1);
            fpk_residual(&plant, &sigma, &v).unwrap().max_interior_abs()
        };
        let coarse = residual_at(64, 16);
        let fine = residual_at(128, 32);
        assert!(
            fine < coarse / 1.8,
            "residuals: coarse {coarse}, fine {fine}"
        );
    }
}
