//! Density representations (Gaussian, grid, particles), pushforward
//! through a diffeomorphism, recovery back to original coordinates, and
//! comparison metrics.

use crate::feedlin::{FeedbackLinearization, LinError};
use crate::grid::GridSpec;
use crate::par;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

/// Values below this are clamped to zero to avoid subnormal noise in
/// log-domain operations.
pub const DENSITY_FLOOR: f64 = 1e-300;

#[derive(Debug, Error)]
pub enum DensityError {
    #[error("density: covariance is not symmetric positive definite")]
    NotSpd,
    #[error("density: grid values must be nonnegative (cell {cell})")]
    NegativeValue { cell: usize },
    #[error("density: total mass {mass} is not 1 within 1e-6")]
    NotNormalized { mass: f64 },
    #[error("density: grid densities support at most 3 axes, got {dim}")]
    TooManyAxes { dim: usize },
    #[error("density: |det ∇τ| = {det:.3e} below 1e-12 at a cell center")]
    SingularJacobian { det: f64 },
    #[error("density: dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("density: map evaluation failed: {0}")]
    Map(String),
    #[error("density: point left the domain during transport")]
    DomainExit,
    #[error("density: weights must be nonnegative and sum to 1 (sum = {sum})")]
    BadWeights { sum: f64 },
    #[error("density: {0}")]
    Invalid(String),
    #[error("density: io: {0}")]
    Io(#[from] std::io::Error),
}

impl From<LinError> for DensityError {
    fn from(e: LinError) -> Self {
        DensityError::Map(e.to_string())
    }
}

/// Anything that can be evaluated as a probability density.
pub trait Density: Send + Sync {
    fn dim(&self) -> usize;
    fn pdf(&self, x: &[f64]) -> f64;
}

/// Densities that can produce particle samples.
pub trait SampleDensity: Density {
    fn sample_particles(&self, count: usize, rng: &mut dyn rand_core::RngCore)
        -> ParticleEnsemble;
}

/// Smooth invertible coordinate change with a Jacobian determinant.
pub trait Diffeomorphism: Send + Sync {
    fn dim(&self) -> usize;
    fn forward(&self, x: &[f64]) -> Result<Vec<f64>, DensityError>;
    /// `seed` is a warm start for iterative inverses; exact inverses may
    /// ignore it.
    fn inverse(&self, z: &[f64], seed: Option<&[f64]>) -> Result<Vec<f64>, DensityError>;
    fn jacobian_det(&self, x: &[f64]) -> Result<f64, DensityError>;
}

impl Diffeomorphism for FeedbackLinearization {
    fn dim(&self) -> usize {
        self.state_dim()
    }

    fn forward(&self, x: &[f64]) -> Result<Vec<f64>, DensityError> {
        Ok(self.tau_at(x)?)
    }

    fn inverse(&self, z: &[f64], seed: Option<&[f64]>) -> Result<Vec<f64>, DensityError> {
        Ok(self.inverse_map_seeded(z, seed)?)
    }

    fn jacobian_det(&self, x: &[f64]) -> Result<f64, DensityError> {
        Ok(self.tau_jacobian(x)?.determinant())
    }
}

/// Multivariate Gaussian density.
#[derive(Debug, Clone)]
pub struct GaussianDensity {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    log_norm: f64,
}

impl GaussianDensity {
    pub fn new(mean: Vec<f64>, cov: DMatrix<f64>) -> Result<Self, DensityError> {
        let n = mean.len();
        if cov.nrows() != n || cov.ncols() != n {
            return Err(DensityError::DimensionMismatch {
                left: cov.nrows(),
                right: n,
            });
        }
        if (&cov - cov.transpose()).amax() > 1e-12 {
            return Err(DensityError::NotSpd);
        }
        let chol = cov.clone().cholesky().ok_or(DensityError::NotSpd)?;
        let log_det: f64 = chol
            .l()
            .diagonal()
            .iter()
            .map(|d| 2.0 * d.ln())
            .sum();
        let log_norm = -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + log_det);
        Ok(GaussianDensity {
            mean: DVector::from_vec(mean),
            cov,
            chol,
            log_norm,
        })
    }

    pub fn isotropic(mean: Vec<f64>, variance: f64) -> Result<Self, DensityError> {
        let n = mean.len();
        Self::new(mean, DMatrix::identity(n, n) * variance)
    }

    /// Draw `count` samples with the provided uniform u64 source.
    pub fn sample(&self, count: usize, rng: &mut dyn rand_core::RngCore) -> ParticleEnsemble {
        let n = self.mean.len();
        let l = self.chol.l();
        let mut points = Vec::with_capacity(count * n);
        let mut pending: Option<f64> = None;
        let mut next_normal = |rng: &mut dyn rand_core::RngCore| -> f64 {
            if let Some(v) = pending.take() {
                return v;
            }
            let (a, b) = box_muller(rng.next_u64(), rng.next_u64());
            pending = Some(b);
            a
        };
        for _ in 0..count {
            let xi = DVector::from_iterator(n, (0..n).map(|_| next_normal(rng)));
            let x = &self.mean + &l * xi;
            points.extend(x.iter());
        }
        ParticleEnsemble::with_uniform_weights(n, points).expect("well-formed sample")
    }
}

/// Standard-normal pair from two uniform words (fixed consumption, which
/// keeps counter-keyed streams reproducible).
pub fn box_muller(w1: u64, w2: u64) -> (f64, f64) {
    // (0, 1] and [0, 1) uniforms from the top 53 bits
    let u1 = ((w1 >> 11) as f64 + 1.0) / 9007199254740992.0;
    let u2 = (w2 >> 11) as f64 / 9007199254740992.0;
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = 2.0 * std::f64::consts::PI * u2;
    (r * theta.cos(), r * theta.sin())
}

impl Density for GaussianDensity {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn pdf(&self, x: &[f64]) -> f64 {
        let d = DVector::from_column_slice(x) - &self.mean;
        let w = self.chol.solve(&d);
        (self.log_norm - 0.5 * d.dot(&w)).exp()
    }
}

impl SampleDensity for GaussianDensity {
    fn sample_particles(
        &self,
        count: usize,
        rng: &mut dyn rand_core::RngCore,
    ) -> ParticleEnsemble {
        self.sample(count, rng)
    }
}

/// Nonnegative density values at the centers of a regular grid, normalized
/// so that `Σ value · cell_volume = 1`.
#[derive(Debug, Clone)]
pub struct GridDensity {
    pub spec: GridSpec,
    pub values: Vec<f64>,
}

impl GridDensity {
    pub fn new(spec: GridSpec, values: Vec<f64>) -> Result<Self, DensityError> {
        if spec.dim() > 3 {
            return Err(DensityError::TooManyAxes { dim: spec.dim() });
        }
        if values.len() != spec.num_cells() {
            return Err(DensityError::DimensionMismatch {
                left: values.len(),
                right: spec.num_cells(),
            });
        }
        if let Some(cell) = values.iter().position(|&v| v < 0.0) {
            return Err(DensityError::NegativeValue { cell });
        }
        let mass: f64 = values.iter().sum::<f64>() * spec.cell_volume();
        if (mass - 1.0).abs() > 1e-6 {
            return Err(DensityError::NotNormalized { mass });
        }
        let values = values
            .into_iter()
            .map(|v| if v < DENSITY_FLOOR { 0.0 } else { v })
            .collect();
        Ok(GridDensity { spec, values })
    }

    /// Normalize raw nonnegative values; returns the density and the mass
    /// the raw data carried (the renormalization factor).
    pub fn from_unnormalized(spec: GridSpec, values: Vec<f64>) -> Result<(Self, f64), DensityError> {
        if let Some(cell) = values.iter().position(|&v| v < 0.0) {
            return Err(DensityError::NegativeValue { cell });
        }
        let mass: f64 = values.iter().sum::<f64>() * spec.cell_volume();
        if !(mass.is_finite() && mass > 0.0) {
            return Err(DensityError::Invalid(format!(
                "cannot normalize grid with mass {mass}"
            )));
        }
        let scaled = values.into_iter().map(|v| v / mass).collect();
        Ok((GridDensity::new(spec, scaled)?, mass))
    }

    /// Sample a density function at the cell centers and normalize.
    pub fn from_fn<F>(spec: GridSpec, f: F) -> Result<(Self, f64), DensityError>
    where
        F: Fn(&[f64]) -> f64 + Send + Sync,
    {
        let cells = spec.num_cells();
        let spec_ref = &spec;
        let values = par::map_indexed(cells, move |i| f(&spec_ref.center(i)).max(0.0));
        // raw mass here is Σ pdf(center)·vol, i.e. the cell-center quadrature
        // of the sampled density; its distance from 1 measures grid error
        Self::from_unnormalized(spec, values)
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.spec.cell_volume()
    }

    /// Weighted mean and covariance over cell centers.
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.spec.dim();
        let vol = self.spec.cell_volume();
        let mut mean = DVector::zeros(d);
        for (i, &v) in self.values.iter().enumerate() {
            let c = self.spec.center(i);
            for (k, &ck) in c.iter().enumerate() {
                mean[k] += v * vol * ck;
            }
        }
        let mut cov = DMatrix::zeros(d, d);
        for (i, &v) in self.values.iter().enumerate() {
            let c = self.spec.center(i);
            for a in 0..d {
                for b in 0..d {
                    cov[(a, b)] += v * vol * (c[a] - mean[a]) * (c[b] - mean[b]);
                }
            }
        }
        (mean, cov)
    }

    pub fn l1_distance(&self, other: &GridDensity) -> Result<f64, DensityError> {
        if self.spec != other.spec {
            return Err(DensityError::Invalid(
                "L1 distance needs matching grids".into(),
            ));
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            * self.spec.cell_volume())
    }

    /// Write `coordinates..., value` rows plus a sidecar `<path>.hdr` with
    /// the box and shape.
    pub fn write_csv(&self, path: &Path) -> Result<(), DensityError> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        let d = self.spec.dim();
        for a in 0..d {
            write!(file, "z{},", a + 1)?;
        }
        writeln!(file, "value")?;
        for (i, v) in self.values.iter().enumerate() {
            let c = self.spec.center(i);
            for ck in &c {
                write!(file, "{ck},")?;
            }
            writeln!(file, "{v}")?;
        }
        let hdr = sidecar_path(path);
        let mut hdr_file = std::io::BufWriter::new(std::fs::File::create(hdr)?);
        writeln!(hdr_file, "dim={}", d)?;
        writeln!(hdr_file, "shape={}", join(&self.spec.shape))?;
        writeln!(hdr_file, "lo={}", join(&self.spec.lo))?;
        writeln!(hdr_file, "hi={}", join(&self.spec.hi))?;
        Ok(())
    }

    /// Read a grid density written by [`GridDensity::write_csv`].
    pub fn read_csv(path: &Path) -> Result<Self, DensityError> {
        let hdr_path = sidecar_path(path);
        let hdr = std::fs::read_to_string(&hdr_path).map_err(|e| {
            DensityError::Invalid(format!("missing header {}: {e}", hdr_path.display()))
        })?;
        let mut shape = None;
        let mut lo = None;
        let mut hi = None;
        for line in hdr.lines() {
            let Some((key, val)) = line.split_once('=') else {
                continue;
            };
            match key.trim() {
                "shape" => shape = Some(parse_list::<usize>(val)?),
                "lo" => lo = Some(parse_list::<f64>(val)?),
                "hi" => hi = Some(parse_list::<f64>(val)?),
                _ => {}
            }
        }
        let (shape, lo, hi) = match (shape, lo, hi) {
            (Some(s), Some(l), Some(h)) => (s, l, h),
            _ => {
                return Err(DensityError::Invalid(format!(
                    "header {} lacks shape/lo/hi",
                    hdr_path.display()
                )))
            }
        };
        let spec = GridSpec::new(lo, hi, shape);
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut values = Vec::with_capacity(spec.num_cells());
        for (lineno, line) in file.lines().enumerate() {
            let line = line?;
            if lineno == 0 {
                continue; // header row
            }
            if line.trim().is_empty() {
                continue;
            }
            let last = line.rsplit(',').next().ok_or_else(|| {
                DensityError::Invalid(format!("bad csv row at line {}", lineno + 1))
            })?;
            let v: f64 = last.trim().parse().map_err(|_| {
                DensityError::Invalid(format!("bad value at line {}", lineno + 1))
            })?;
            values.push(v);
        }
        GridDensity::new(spec, values)
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".hdr");
    std::path::PathBuf::from(os)
}

fn join<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, DensityError> {
    s.trim()
        .split(',')
        .map(|tok| {
            tok.trim()
                .parse::<T>()
                .map_err(|_| DensityError::Invalid(format!("bad list entry '{tok}'")))
        })
        .collect()
}

impl Density for GridDensity {
    fn dim(&self) -> usize {
        self.spec.dim()
    }

    fn pdf(&self, x: &[f64]) -> f64 {
        if !self.spec.contains(x) {
            return 0.0;
        }
        self.spec.interp(&self.values, x).max(0.0)
    }
}

impl SampleDensity for GridDensity {
    /// Cell chosen by cumulative mass, then a uniform jitter inside it.
    fn sample_particles(
        &self,
        count: usize,
        rng: &mut dyn rand_core::RngCore,
    ) -> ParticleEnsemble {
        let d = self.spec.dim();
        let vol = self.spec.cell_volume();
        let cumulative: Vec<f64> = self
            .values
            .iter()
            .scan(0.0, |acc, &v| {
                *acc += v * vol;
                Some(*acc)
            })
            .collect();
        let total = *cumulative.last().unwrap_or(&1.0);
        let uniform = |rng: &mut dyn rand_core::RngCore| (rng.next_u64() >> 11) as f64 / 9007199254740992.0;
        let mut points = Vec::with_capacity(count * d);
        for _ in 0..count {
            let u = uniform(rng) * total;
            let cell = cumulative.partition_point(|&c| c < u).min(self.values.len() - 1);
            let center = self.spec.center(cell);
            for (a, &ca) in center.iter().enumerate() {
                let jitter = (uniform(rng) - 0.5) * self.spec.spacing(a);
                points.push(ca + jitter);
            }
        }
        ParticleEnsemble::with_uniform_weights(d, points).expect("well-formed sample")
    }
}

/// Weighted particle cloud in `R^n`, stored row-major (`N x n`).
#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    dim: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl ParticleEnsemble {
    pub fn new(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self, DensityError> {
        if dim == 0 || weights.is_empty() || points.len() != weights.len() * dim {
            return Err(DensityError::Invalid(
                "particle array shape mismatch".into(),
            ));
        }
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|&w| w < 0.0) || (sum - 1.0).abs() > 1e-12 {
            return Err(DensityError::BadWeights { sum });
        }
        Ok(ParticleEnsemble {
            dim,
            points,
            weights,
        })
    }

    pub fn with_uniform_weights(dim: usize, points: Vec<f64>) -> Result<Self, DensityError> {
        let count = points.len() / dim.max(1);
        if count == 0 {
            return Err(DensityError::Invalid("empty ensemble".into()));
        }
        let w = 1.0 / count as f64;
        let mut weights = vec![w; count];
        // nudge the last weight so the sum is exactly 1 in floating point
        let sum: f64 = weights.iter().sum();
        weights[count - 1] += 1.0 - sum;
        Self::new(dim, points, weights)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn points_flat(&self) -> &[f64] {
        &self.points
    }

    pub(crate) fn points_flat_mut(&mut self) -> &mut [f64] {
        &mut self.points
    }

    /// Apply a point map, keeping weights.
    pub fn map<F>(&self, f: F) -> Result<ParticleEnsemble, DensityError>
    where
        F: Fn(&[f64]) -> Result<Vec<f64>, DensityError> + Send + Sync,
    {
        let n = self.len();
        let dim = self.dim;
        let results: Vec<Result<Vec<f64>, DensityError>> =
            par::map_indexed(n, |i| f(self.point(i)));
        let mut points = Vec::with_capacity(n * dim);
        for r in results {
            let p = r?;
            if p.len() != dim {
                return Err(DensityError::DimensionMismatch {
                    left: p.len(),
                    right: dim,
                });
            }
            points.extend(p);
        }
        ParticleEnsemble::new(dim, points, self.weights.clone())
    }

    /// Weighted mean and covariance.
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.dim;
        let mut mean = DVector::zeros(d);
        for i in 0..self.len() {
            let w = self.weights[i];
            for (k, &x) in self.point(i).iter().enumerate() {
                mean[k] += w * x;
            }
        }
        let mut cov = DMatrix::zeros(d, d);
        for i in 0..self.len() {
            let w = self.weights[i];
            let p = self.point(i);
            for a in 0..d {
                for b in 0..d {
                    cov[(a, b)] += w * (p[a] - mean[a]) * (p[b] - mean[b]);
                }
            }
        }
        (mean, cov)
    }

    /// Weighted histogram of two coordinates on a 2D grid (used for the
    /// marginal checks of high-dimensional ensembles).
    pub fn histogram_2d(
        &self,
        axes: (usize, usize),
        spec: &GridSpec,
    ) -> Result<GridDensity, DensityError> {
        if spec.dim() != 2 {
            return Err(DensityError::DimensionMismatch {
                left: spec.dim(),
                right: 2,
            });
        }
        let mut values = vec![0.0; spec.num_cells()];
        let vol = spec.cell_volume();
        for i in 0..self.len() {
            let p = self.point(i);
            let x = [p[axes.0], p[axes.1]];
            if !spec.contains(&x) {
                continue;
            }
            let c0 = (((x[0] - spec.lo[0]) / spec.spacing(0)) as usize).min(spec.shape[0] - 1);
            let c1 = (((x[1] - spec.lo[1]) / spec.spacing(1)) as usize).min(spec.shape[1] - 1);
            values[spec.flat_index(&[c0, c1])] += self.weights[i] / vol;
        }
        Ok(GridDensity::from_unnormalized(spec.clone(), values)?.0)
    }

    /// Write `weight, coordinates...` rows.
    pub fn write_csv(&self, path: &Path) -> Result<(), DensityError> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(file, "weight")?;
        for a in 0..self.dim {
            write!(file, ",x{}", a + 1)?;
        }
        writeln!(file)?;
        for i in 0..self.len() {
            write!(file, "{}", self.weights[i])?;
            for x in self.point(i) {
                write!(file, ",{x}")?;
            }
            writeln!(file)?;
        }
        Ok(())
    }
}

/// Push a density through a diffeomorphism onto a grid:
/// `σ(z) = ρ(τ^{-1}(z)) / |det ∇τ(τ^{-1}(z))|` at cell centers, then
/// renormalize. Returns the density and the renormalization factor (mass
/// before normalization; 1 up to discretization error when the support
/// sits well inside the box).
pub fn pushforward_density(
    rho: &dyn Density,
    map: &dyn Diffeomorphism,
    out: &GridSpec,
) -> Result<(GridDensity, f64), DensityError> {
    if rho.dim() != map.dim() || out.dim() != map.dim() {
        return Err(DensityError::DimensionMismatch {
            left: rho.dim(),
            right: out.dim(),
        });
    }
    let cells = out.num_cells();
    const CHUNK: usize = 512;
    let chunks = cells.div_ceil(CHUNK);
    // chunked so the Newton warm start sweeps within a chunk while the
    // chunk layout (and therefore the output) is independent of threading
    let partial: Vec<Result<Vec<f64>, DensityError>> = par::map_indexed(chunks, |ci| {
        let start = ci * CHUNK;
        let end = (start + CHUNK).min(cells);
        let mut vals = Vec::with_capacity(end - start);
        let mut seed: Option<Vec<f64>> = None;
        for i in start..end {
            let z = out.center(i);
            let x = map.inverse(&z, seed.as_deref())?;
            let det = map.jacobian_det(&x)?.abs();
            if det < 1e-12 {
                return Err(DensityError::SingularJacobian { det });
            }
            let v = rho.pdf(&x) / det;
            vals.push(if v < DENSITY_FLOOR { 0.0 } else { v });
            seed = Some(x);
        }
        Ok(vals)
    });
    let mut values = Vec::with_capacity(cells);
    for part in partial {
        values.extend(part?);
    }
    GridDensity::from_unnormalized(out.clone(), values)
}

/// Pull a grid density in transformed coordinates back to the original
/// frame: `ρ(x) = σ(τ(x)) · |det ∇τ(x)|` at cell centers, renormalized.
pub fn recover_original_density(
    sigma: &GridDensity,
    map: &dyn Diffeomorphism,
    out: &GridSpec,
) -> Result<(GridDensity, f64), DensityError> {
    let cells = out.num_cells();
    let values: Vec<Result<f64, DensityError>> = par::map_indexed(cells, |i| {
        let x = out.center(i);
        let z = map.forward(&x)?;
        let det = map.jacobian_det(&x)?.abs();
        if det < 1e-12 {
            return Err(DensityError::SingularJacobian { det });
        }
        let v = sigma.pdf(&z) * det;
        Ok(if v < DENSITY_FLOOR { 0.0 } else { v })
    });
    let values = values.into_iter().collect::<Result<Vec<_>, _>>()?;
    GridDensity::from_unnormalized(out.clone(), values)
}

/// Pointwise pushforward of a particle ensemble (weights preserved).
pub fn pushforward_particles<F>(
    ens: &ParticleEnsemble,
    map: F,
) -> Result<ParticleEnsemble, DensityError>
where
    F: Fn(&[f64]) -> Result<Vec<f64>, DensityError> + Send + Sync,
{
    ens.map(map)
}

/// First Wasserstein distance of two 1D grid densities on the same box,
/// by CDF quadrature.
pub fn wasserstein1_1d(a: &GridDensity, b: &GridDensity) -> Result<f64, DensityError> {
    if a.spec.dim() != 1 || a.spec != b.spec {
        return Err(DensityError::Invalid(
            "wasserstein1_1d needs matching 1D grids".into(),
        ));
    }
    let vol = a.spec.cell_volume();
    let mut fa = 0.0;
    let mut fb = 0.0;
    let mut acc = 0.0;
    for (va, vb) in a.values.iter().zip(&b.values) {
        fa += va * vol;
        fb += vb * vol;
        acc += (fa - fb).abs() * vol;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct IdentityMap(usize);

    impl Diffeomorphism for IdentityMap {
        fn dim(&self) -> usize {
            self.0
        }
        fn forward(&self, x: &[f64]) -> Result<Vec<f64>, DensityError> {
            Ok(x.to_vec())
        }
        fn inverse(&self, z: &[f64], _seed: Option<&[f64]>) -> Result<Vec<f64>, DensityError> {
            Ok(z.to_vec())
        }
        fn jacobian_det(&self, _x: &[f64]) -> Result<f64, DensityError> {
            Ok(1.0)
        }
    }

    /// x -> a x componentwise
    struct ScaleMap(f64, usize);

    impl Diffeomorphism for ScaleMap {
        fn dim(&self) -> usize {
            self.1
        }
        fn forward(&self, x: &[f64]) -> Result<Vec<f64>, DensityError> {
            Ok(x.iter().map(|v| v * self.0).collect())
        }
        fn inverse(&self, z: &[f64], _seed: Option<&[f64]>) -> Result<Vec<f64>, DensityError> {
            Ok(z.iter().map(|v| v / self.0).collect())
        }
        fn jacobian_det(&self, _x: &[f64]) -> Result<f64, DensityError> {
            Ok(self.0.powi(self.1 as i32))
        }
    }

    fn gaussian_1d(mean: f64, var: f64) -> GaussianDensity {
        GaussianDensity::new(vec![mean], DMatrix::from_element(1, 1, var)).unwrap()
    }

    #[test]
    fn gaussian_requires_spd() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.4, 1.0]);
        assert!(GaussianDensity::new(vec![0.0, 0.0], bad).is_err());
        let neg = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(GaussianDensity::new(vec![0.0, 0.0], neg).is_err());
    }

    #[test]
    fn pushforward_identity_reproduces_density() {
        let rho = gaussian_1d(0.0, 1.0);
        let spec = GridSpec::new(vec![-6.0], vec![6.0], vec![200]);
        let (sigma, factor) = pushforward_density(&rho, &IdentityMap(1), &spec).unwrap();
        assert!((factor - 1.0).abs() < 1e-3);
        for i in (0..200).step_by(17) {
            let z = spec.center(i);
            assert!((sigma.pdf(&z) - rho.pdf(&z)).abs() < 1e-4);
        }
    }

    #[test]
    fn pushforward_scaling_matches_gaussian_oracle() {
        // τ(x) = 2x sends N(0,1) to N(0,4)
        let rho = gaussian_1d(0.0, 1.0);
        let spec = GridSpec::new(vec![-10.0], vec![10.0], vec![400]);
        let (sigma, _) = pushforward_density(&rho, &ScaleMap(2.0, 1), &spec).unwrap();
        let target = gaussian_1d(0.0, 4.0);
        for i in (0..400).step_by(13) {
            let z = spec.center(i);
            assert!(
                (sigma.values[i] - target.pdf(&z)).abs() < 1e-6,
                "at {z:?}: {} vs {}",
                sigma.values[i],
                target.pdf(&z)
            );
        }
    }

    #[test]
    fn recover_round_trips_identity() {
        let rho = gaussian_1d(0.3, 0.5);
        let spec = GridSpec::new(vec![-6.0], vec![6.0], vec![300]);
        let (sigma, _) = pushforward_density(&rho, &IdentityMap(1), &spec).unwrap();
        let (back, _) = recover_original_density(&sigma, &IdentityMap(1), &spec).unwrap();
        assert!(sigma.l1_distance(&back).unwrap() < 1e-9);
    }

    #[test]
    fn particles_push_and_weights() {
        let ens = ParticleEnsemble::new(
            5,
            vec![1.0, 2.0, 3.0, 4.0, 5.0],
            vec![1.0],
        )
        .unwrap();
        // hand image of the paper's change of coordinates
        let tau = |x: &[f64]| -> Result<Vec<f64>, DensityError> {
            Ok(vec![
                x[0] - x[4],
                x[1],
                x[2] - x[0] * x[3] + x[3] * x[4],
                x[3],
                x[4],
            ])
        };
        let out = pushforward_particles(&ens, tau).unwrap();
        assert_eq!(out.point(0), &[-4.0, 2.0, 19.0, 4.0, 5.0]);
        assert_eq!(out.weights(), &[1.0]);
        let id = pushforward_particles(&ens, |x| Ok(x.to_vec())).unwrap();
        assert_eq!(id.point(0), ens.point(0));
    }

    #[test]
    fn grid_moments_match_closed_forms() {
        let spec = GridSpec::new(vec![-8.0], vec![8.0], vec![640]);
        let (g, _) = GridDensity::from_fn(spec, |x| gaussian_1d(0.0, 1.0).pdf(x)).unwrap();
        let (mean, cov) = g.moments();
        assert!(mean[0].abs() < 1e-3);
        assert!((cov[(0, 0)] - 1.0).abs() < 1e-2);

        let spec = GridSpec::new(vec![0.0], vec![1.0], vec![100]);
        let (u, _) = GridDensity::from_fn(spec, |_| 1.0).unwrap();
        let (mean, cov) = u.moments();
        assert!((mean[0] - 0.5).abs() < 1e-3);
        assert!((cov[(0, 0)] - 1.0 / 12.0).abs() < 1e-3);
    }

    #[test]
    fn single_particle_moments() {
        let ens = ParticleEnsemble::new(2, vec![3.0, -1.0], vec![1.0]).unwrap();
        let (mean, cov) = ens.moments();
        assert_eq!(mean.as_slice(), &[3.0, -1.0]);
        assert!(cov.amax() == 0.0);
    }

    #[test]
    fn wasserstein_translation_oracle() {
        let spec = GridSpec::new(vec![-8.0], vec![8.0], vec![1600]);
        let (a, _) = GridDensity::from_fn(spec.clone(), |x| gaussian_1d(0.0, 0.5).pdf(x)).unwrap();
        let (b, _) = GridDensity::from_fn(spec.clone(), |x| gaussian_1d(0.8, 0.5).pdf(x)).unwrap();
        let w = wasserstein1_1d(&a, &b).unwrap();
        assert!((w - 0.8).abs() < 1e-3, "w = {w}");
        assert_eq!(wasserstein1_1d(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn wasserstein_point_masses() {
        let spec = GridSpec::new(vec![-0.5], vec![1.5], vec![2]);
        let mut va = vec![0.0; 2];
        va[0] = 1.0; // mass at center 0
        let mut vb = vec![0.0; 2];
        vb[1] = 1.0; // mass at center 1
        let a = GridDensity::from_unnormalized(spec.clone(), va).unwrap().0;
        let b = GridDensity::from_unnormalized(spec, vb).unwrap().0;
        let w = wasserstein1_1d(&a, &b).unwrap();
        assert!((w - 1.0).abs() < 1e-12);
    }

    #[test]
    fn grid_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = GridSpec::new(vec![-2.0, -1.0], vec![2.0, 1.0], vec![8, 4]);
        let (g, _) = GridDensity::from_fn(spec, |x| (-(x[0] * x[0] + x[1] * x[1])).exp()).unwrap();
        let path = dir.path().join("grid.csv");
        g.write_csv(&path).unwrap();
        let back = GridDensity::read_csv(&path).unwrap();
        assert_eq!(back.spec, g.spec);
        for (a, b) in back.values.iter().zip(&g.values) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn normalization_invariants_enforced() {
        let spec = GridSpec::new(vec![0.0], vec![1.0], vec![4]);
        assert!(GridDensity::new(spec.clone(), vec![1.0, 1.0, 1.0, 2.0]).is_err());
        assert!(GridDensity::new(spec.clone(), vec![4.0, 0.0, 0.0, -0.1]).is_err());
        assert!(GridDensity::new(spec, vec![1.0; 4]).is_ok());
    }
}
