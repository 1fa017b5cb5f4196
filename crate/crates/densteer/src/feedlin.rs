//! Full-state static feedback linearization: vector relative degree, the
//! triple `(δ, Γ, τ)`, its inverse, the Brunovsky pair `(A, B)`, the
//! span/involutivity feasibility test, and closed-loop verification.

use crate::probe::probe_points;
use crate::vectorfield::{
    lie_derived_field, matrix_rank, ad_field, ControlAffineSystem, DomainBox, FieldError,
    LieChain, ScalarField, VectorField,
};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinError {
    #[error("feedlin: no relative degree for output {output} up to order {kmax}")]
    NoRelativeDegree { output: usize, kmax: usize },
    #[error("feedlin: decoupling matrix singular at the expansion point (|det| = {det:.3e})")]
    SingularDecoupling { det: f64 },
    #[error("feedlin: relative degrees sum to {total} but the state dimension is {n}; system is not full-state static linearizable")]
    IncompleteLinearization { total: usize, n: usize },
    #[error("feedlin: Newton inverse did not converge within {iters} iterations (residual {residual:.3e})")]
    NewtonDivergence { iters: usize, residual: f64 },
    #[error("feedlin: decoupling matrix singular at evaluation point (|det| = {det:.3e})")]
    Singularity { det: f64 },
    #[error("feedlin: trajectory left the state domain at t = {t:.6}")]
    DomainExit { t: f64 },
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// Probe/tolerance knobs for the numerical "identically zero" decisions.
#[derive(Debug, Clone)]
pub struct RelDegOptions {
    /// A Lie-derivative expression counts as identically zero when its
    /// magnitude stays below this at every probe point.
    pub tol_zero: f64,
    pub n_probe: usize,
    pub r_probe: f64,
    /// Relative singular-value threshold for rank decisions.
    pub tol_rank: f64,
}

impl Default for RelDegOptions {
    fn default() -> Self {
        RelDegOptions {
            tol_zero: 1e-9,
            n_probe: 64,
            r_probe: 0.5,
            tol_rank: 1e-8,
        }
    }
}

/// Vector relative degree `π` with the decoupling matrix at the expansion
/// point.
#[derive(Debug, Clone)]
pub struct RelativeDegree {
    pub pi: Vec<usize>,
    pub total: usize,
    pub c0: DMatrix<f64>,
}

fn c_and_d(
    sys: &ControlAffineSystem,
    h: &[ScalarField],
    pi: &[usize],
    x: &[f64],
) -> Result<(DMatrix<f64>, DVector<f64>), LinError> {
    let m = sys.input_dim();
    let mut c = DMatrix::zeros(m, m);
    let mut d = DVector::zeros(m);
    let g_at_x: Vec<Vec<f64>> = sys
        .g
        .iter()
        .map(|g| g.eval(x))
        .collect::<Result<_, _>>()?;
    for (i, hi) in h.iter().enumerate() {
        let chain = LieChain::compute(hi, &sys.f, pi[i], x)?;
        for (j, gj) in g_at_x.iter().enumerate() {
            c[(i, j)] = chain.lie_along(pi[i] - 1, gj);
        }
        d[i] = chain.value(pi[i]);
    }
    Ok((c, d))
}

/// Decoupling matrix `C(x)` with entries `L_{g_j} L_f^{π_i - 1} h_i(x)`.
pub fn decoupling_matrix(
    sys: &ControlAffineSystem,
    h: &[ScalarField],
    rd: &RelativeDegree,
    x: &[f64],
) -> Result<DMatrix<f64>, LinError> {
    Ok(c_and_d(sys, h, &rd.pi, x)?.0)
}

/// Drift vector `d(x)` with entries `L_f^{π_i} h_i(x)`.
pub fn drift_vector(
    sys: &ControlAffineSystem,
    h: &[ScalarField],
    rd: &RelativeDegree,
    x: &[f64],
) -> Result<DVector<f64>, LinError> {
    Ok(c_and_d(sys, h, &rd.pi, x)?.1)
}

/// Compute the vector relative degree at `x0`. For each output, `π_i` is
/// the smallest `k` such that some `L_{g_j} L_f^{k-1} h_i` is
/// non-negligible over the probe set; all lower orders must vanish there.
pub fn vector_relative_degree(
    sys: &ControlAffineSystem,
    h: &[ScalarField],
    x0: &[f64],
    kmax: usize,
    opts: &RelDegOptions,
) -> Result<RelativeDegree, LinError> {
    let m = sys.input_dim();
    assert_eq!(h.len(), m, "need one output per input");
    let mut points = vec![x0.to_vec()];
    points.extend(probe_points(x0, opts.r_probe, opts.n_probe));

    // max over probes and inputs of |L_{g_j} L_f^s h_i|, per (i, s)
    let mut magnitude = vec![vec![0.0_f64; kmax]; m];
    for x in &points {
        let g_at_x: Vec<Vec<f64>> = sys
            .g
            .iter()
            .map(|g| g.eval(x))
            .collect::<Result<_, _>>()?;
        for (i, hi) in h.iter().enumerate() {
            let chain = LieChain::compute(hi, &sys.f, kmax, x)?;
            for s in 0..kmax {
                for gj in &g_at_x {
                    let v = chain.lie_along(s, gj).abs();
                    if v > magnitude[i][s] {
                        magnitude[i][s] = v;
                    }
                }
            }
        }
    }

    let mut pi = Vec::with_capacity(m);
    for (i, mags) in magnitude.iter().enumerate() {
        let first = mags.iter().position(|&v| v > opts.tol_zero);
        match first {
            Some(s) => pi.push(s + 1),
            None => {
                return Err(LinError::NoRelativeDegree {
                    output: i + 1,
                    kmax,
                })
            }
        }
    }
    let total = pi.iter().sum();
    let (c0, _) = c_and_d(sys, h, &pi, x0)?;
    let det = c0.determinant().abs();
    let scale = c0.norm().max(f64::MIN_POSITIVE);
    if det <= opts.tol_rank * scale {
        return Err(LinError::SingularDecoupling { det });
    }
    Ok(RelativeDegree { pi, total, c0 })
}

/// Analytic inverse of the linearizing coordinates, when one is known.
pub enum InverseMap {
    Expr(VectorField),
    Closure(std::sync::Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>),
}

impl std::fmt::Debug for InverseMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            InverseMap::Expr(_) => write!(f, "InverseMap::Expr"),
            InverseMap::Closure(_) => write!(f, "InverseMap::Closure"),
        }
    }
}

/// The feedback-linearizing triple `(δ, Γ, τ)` together with the Brunovsky
/// pair `(A, B)`. Immutable after construction.
#[derive(Debug)]
pub struct FeedbackLinearization {
    pub sys: ControlAffineSystem,
    pub h: Vec<ScalarField>,
    pub rd: RelativeDegree,
    pub x0: Vec<f64>,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// Linearizing coordinates as first-class fields, in block order.
    pub tau: VectorField,
    /// Image box of the state-domain corners under `τ`.
    pub z_domain: DomainBox,
    tau_inv_analytic: Option<InverseMap>,
    tol_rank: f64,
}

/// Brunovsky chain pair for relative degree blocks `π`.
pub fn brunovsky_pair(pi: &[usize]) -> (DMatrix<f64>, DMatrix<f64>) {
    let n: usize = pi.iter().sum();
    let m = pi.len();
    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, m);
    let mut offset = 0;
    for (i, &p) in pi.iter().enumerate() {
        for k in 0..p - 1 {
            a[(offset + k, offset + k + 1)] = 1.0;
        }
        b[(offset + p - 1, i)] = 1.0;
        offset += p;
    }
    (a, b)
}

/// Build the full linearization. Fails with `IncompleteLinearization`
/// unless the relative degrees sum to the state dimension.
pub fn build_linearization(
    sys: &ControlAffineSystem,
    h: &[ScalarField],
    x0: &[f64],
    opts: &RelDegOptions,
) -> Result<FeedbackLinearization, LinError> {
    let n = sys.state_dim();
    let rd = vector_relative_degree(sys, h, x0, n.max(2), opts)?;
    if rd.total != n {
        return Err(LinError::IncompleteLinearization { total: rd.total, n });
    }
    let (a, b) = brunovsky_pair(&rd.pi);
    let mut comps = Vec::with_capacity(n);
    for (i, hi) in h.iter().enumerate() {
        for k in 0..rd.pi[i] {
            comps.push(lie_derived_field(hi, &sys.f, k));
        }
    }
    let tau = VectorField::new(comps);

    let mut z_lo = vec![f64::INFINITY; n];
    let mut z_hi = vec![f64::NEG_INFINITY; n];
    for corner in sys.domain.corners() {
        let z = tau.eval(&corner)?;
        for i in 0..n {
            z_lo[i] = z_lo[i].min(z[i]);
            z_hi[i] = z_hi[i].max(z[i]);
        }
    }
    let z_domain = DomainBox::new(z_lo, z_hi)?;

    Ok(FeedbackLinearization {
        sys: sys.clone(),
        h: h.to_vec(),
        rd,
        x0: x0.to_vec(),
        a,
        b,
        tau,
        z_domain,
        tau_inv_analytic: None,
        tol_rank: opts.tol_rank,
    })
}

impl FeedbackLinearization {
    pub fn with_analytic_inverse(mut self, inv: InverseMap) -> Self {
        self.tau_inv_analytic = Some(inv);
        self
    }

    pub fn state_dim(&self) -> usize {
        self.sys.state_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.sys.input_dim()
    }

    fn chains(&self, x: &[f64], extra: usize) -> Result<Vec<LieChain>, LinError> {
        self.h
            .iter()
            .zip(&self.rd.pi)
            .map(|(hi, &p)| LieChain::compute(hi, &self.sys.f, p - 1 + extra, x).map_err(Into::into))
            .collect()
    }

    /// `z = τ(x)` in block order.
    pub fn tau_at(&self, x: &[f64]) -> Result<Vec<f64>, LinError> {
        let chains = self.chains(x, 0)?;
        let mut z = Vec::with_capacity(self.state_dim());
        for (chain, &p) in chains.iter().zip(&self.rd.pi) {
            for k in 0..p {
                z.push(chain.value(k));
            }
        }
        Ok(z)
    }

    /// Jacobian `∇τ(x)` (rows follow the block order of `τ`).
    pub fn tau_jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>, LinError> {
        let n = self.state_dim();
        let chains = self.chains(x, 1)?;
        let mut jac = DMatrix::zeros(n, n);
        let mut row = 0;
        for (chain, &p) in chains.iter().zip(&self.rd.pi) {
            for k in 0..p {
                for (col, g) in chain.gradient(k).iter().enumerate() {
                    jac[(row, col)] = *g;
                }
                row += 1;
            }
        }
        Ok(jac)
    }

    /// Decoupling matrix and drift Lie derivatives at `x`.
    pub fn c_and_d(&self, x: &[f64]) -> Result<(DMatrix<f64>, DVector<f64>), LinError> {
        c_and_d(&self.sys, &self.h, &self.rd.pi, x)
    }

    /// `δ(x) = -C(x)^{-1} d(x)` and `Γ(x) = C(x)^{-1}`.
    pub fn delta_gamma(&self, x: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>), LinError> {
        let (c, d) = self.c_and_d(x)?;
        let det = c.determinant().abs();
        if det <= self.tol_rank * c.norm() {
            return Err(LinError::Singularity { det });
        }
        let lu = c.lu();
        let gamma = lu
            .try_inverse()
            .ok_or(LinError::Singularity { det })?;
        let delta = -(&gamma * d);
        Ok((delta, gamma))
    }

    pub fn delta(&self, x: &[f64]) -> Result<DVector<f64>, LinError> {
        Ok(self.delta_gamma(x)?.0)
    }

    pub fn gamma(&self, x: &[f64]) -> Result<DMatrix<f64>, LinError> {
        Ok(self.delta_gamma(x)?.1)
    }

    /// Original-coordinate control `u = δ(x) + Γ(x) v`.
    pub fn pullback_control(&self, x: &[f64], v: &DVector<f64>) -> Result<DVector<f64>, LinError> {
        let (delta, gamma) = self.delta_gamma(x)?;
        Ok(delta + gamma * v)
    }

    /// `τ^{-1}(z)`, via the registered analytic inverse when present,
    /// otherwise damped Newton seeded at the domain center.
    pub fn inverse_map(&self, z: &[f64]) -> Result<Vec<f64>, LinError> {
        self.inverse_map_seeded(z, None)
    }

    pub fn inverse_map_seeded(&self, z: &[f64], seed: Option<&[f64]>) -> Result<Vec<f64>, LinError> {
        if let Some(inv) = &self.tau_inv_analytic {
            return match inv {
                InverseMap::Expr(field) => Ok(field.eval(z)?),
                InverseMap::Closure(f) => Ok(f(z)),
            };
        }
        let mut x = seed
            .map(|s| s.to_vec())
            .unwrap_or_else(|| self.sys.domain.center());
        let zt = DVector::from_column_slice(z);
        let mut residual = f64::INFINITY;
        for _ in 0..50 {
            let tz = DVector::from_vec(self.tau_at(&x)?);
            let r = &tz - &zt;
            residual = r.amax();
            if residual < 1e-12 {
                return Ok(x);
            }
            let jac = self.tau_jacobian(&x)?;
            let step = jac
                .lu()
                .solve(&r)
                .ok_or(LinError::Singularity { det: 0.0 })?;
            // damped update: halve until the residual shrinks
            let mut s = 1.0;
            let base_norm = r.norm();
            loop {
                let cand: Vec<f64> = x
                    .iter()
                    .zip(step.iter())
                    .map(|(xi, di)| xi - s * di)
                    .collect();
                let cand_res = DVector::from_vec(self.tau_at(&cand)?) - &zt;
                if cand_res.norm() < base_norm || s < 1.0 / 1024.0 {
                    x = cand;
                    break;
                }
                s *= 0.5;
            }
        }
        // converged enough for the 1e-9 contract?
        if residual < 1e-9 {
            return Ok(x);
        }
        Err(LinError::NewtonDivergence {
            iters: 50,
            residual,
        })
    }
}

/// Piecewise-constant control signal on `[0, T]`.
#[derive(Debug, Clone)]
pub struct PiecewiseConstant {
    /// Segment right endpoints, strictly increasing, last one = T.
    pub breaks: Vec<f64>,
    pub values: Vec<DVector<f64>>,
}

impl PiecewiseConstant {
    pub fn uniform(horizon: f64, values: Vec<DVector<f64>>) -> Self {
        let k = values.len();
        let breaks = (1..=k).map(|i| horizon * i as f64 / k as f64).collect();
        PiecewiseConstant { breaks, values }
    }

    pub fn value(&self, t: f64) -> &DVector<f64> {
        let idx = self
            .breaks
            .iter()
            .position(|&b| t < b)
            .unwrap_or(self.values.len() - 1);
        &self.values[idx]
    }
}

fn rk4_step<F>(x: &mut DVector<f64>, t: f64, dt: f64, rhs: &F) -> Result<(), LinError>
where
    F: Fn(f64, &DVector<f64>) -> Result<DVector<f64>, LinError>,
{
    let k1 = rhs(t, x)?;
    let k2 = rhs(t + 0.5 * dt, &(&*x + &k1 * (0.5 * dt)))?;
    let k3 = rhs(t + 0.5 * dt, &(&*x + &k2 * (0.5 * dt)))?;
    let k4 = rhs(t + dt, &(&*x + &k3 * dt))?;
    *x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
    Ok(())
}

/// Closed-loop check of the linearization: integrate the original dynamics
/// under `u = δ(x) + Γ(x) v(t)` and the Brunovsky dynamics from `τ(x0)`,
/// both with RK4, and return the maximum discrepancy of `τ(x(t))` vs
/// `z(t)` over the horizon.
pub fn verify_linearization(
    sys: &ControlAffineSystem,
    fl: &FeedbackLinearization,
    x0: &[f64],
    v_signal: &PiecewiseConstant,
    horizon: f64,
    dt: f64,
) -> Result<f64, LinError> {
    let steps = (horizon / dt).round() as usize;
    let mut x = DVector::from_column_slice(x0);
    let mut z = DVector::from_vec(fl.tau_at(x0)?);
    let x_rhs = |t: f64, x: &DVector<f64>| -> Result<DVector<f64>, LinError> {
        let xs = x.as_slice();
        let v = v_signal.value(t);
        let u = fl.pullback_control(xs, v)?;
        let f = DVector::from_vec(sys.f.eval(xs)?);
        let g = sys.input_matrix(xs)?;
        Ok(f + g * u)
    };
    let z_rhs = |t: f64, z: &DVector<f64>| -> Result<DVector<f64>, LinError> {
        Ok(&fl.a * z + &fl.b * v_signal.value(t))
    };
    let mut max_dev = 0.0_f64;
    for k in 0..steps {
        let t = k as f64 * dt;
        if !sys.domain.contains(x.as_slice()) {
            return Err(LinError::DomainExit { t });
        }
        rk4_step(&mut x, t, dt, &x_rhs)?;
        rk4_step(&mut z, t, dt, &z_rhs)?;
        let tz = DVector::from_vec(fl.tau_at(x.as_slice())?);
        max_dev = max_dev.max((tz - &z).amax());
    }
    Ok(max_dev)
}

/// Per-distribution findings for the Prop.-1 style feasibility check.
#[derive(Debug, Clone)]
pub struct DistributionReport {
    /// Index i of Δ_i.
    pub index: usize,
    pub rank_at_x0: usize,
    pub rank_min: usize,
    pub rank_max: usize,
    pub constant_dimension: bool,
    /// Involutivity verdict (checked for i <= n-2 only).
    pub involutive: Option<bool>,
    /// Field indices (into the `ad_f^k g_j` list, k-major) of the first
    /// bracket that escapes the span.
    pub witness: Option<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct Prop1Report {
    pub n: usize,
    pub m: usize,
    pub input_rank: usize,
    pub distributions: Vec<DistributionReport>,
    pub feasible: bool,
}

#[derive(Debug, Clone)]
pub struct Prop1Options {
    pub n_probe: usize,
    pub r_probe: f64,
    pub tol_rank: f64,
}

impl Default for Prop1Options {
    fn default() -> Self {
        Prop1Options {
            n_probe: 12,
            r_probe: 0.5,
            tol_rank: 1e-8,
        }
    }
}

/// Check the span/involutivity conditions for full-state feedback
/// linearizability at `x0`: Δ_i = span{ad_f^k g_j : k <= i} must have
/// constant dimension at the probe points, Δ_{n-1} must reach dimension n,
/// and Δ_0..Δ_{n-2} must be involutive. Pointwise numerical verdicts, not
/// a proof.
pub fn check_proposition1(
    sys: &ControlAffineSystem,
    x0: &[f64],
    opts: &Prop1Options,
) -> Result<Prop1Report, LinError> {
    let n = sys.state_dim();
    let m = sys.input_dim();
    let input_rank = sys.input_rank(x0, opts.tol_rank)?;

    // ad_f^k g_j in k-major order
    let fields: Vec<VectorField> = (0..n)
        .flat_map(|k| sys.g.iter().map(move |g| (k, g)))
        .map(|(k, g)| ad_field(&sys.f, g, k))
        .collect();

    let mut points = vec![x0.to_vec()];
    points.extend(probe_points(x0, opts.r_probe, opts.n_probe));

    // cache values and Jacobians of every field at every point
    let mut values: Vec<Vec<DVector<f64>>> = Vec::with_capacity(points.len());
    let mut jacobians: Vec<Vec<DMatrix<f64>>> = Vec::with_capacity(points.len());
    for x in &points {
        let mut vrow = Vec::with_capacity(fields.len());
        let mut jrow = Vec::with_capacity(fields.len());
        for field in &fields {
            vrow.push(DVector::from_vec(field.eval(x)?));
            jrow.push(field.jacobian(x)?);
        }
        values.push(vrow);
        jacobians.push(jrow);
    }

    let rank_of = |cols: &[DVector<f64>]| -> Result<usize, LinError> {
        let mut mat = DMatrix::zeros(n, cols.len());
        for (j, c) in cols.iter().enumerate() {
            mat.set_column(j, c);
        }
        matrix_rank(&mat, opts.tol_rank).map_err(Into::into)
    };

    let mut distributions = Vec::with_capacity(n);
    for i in 0..n {
        let width = (i + 1) * m;
        let rank_at_x0 = rank_of(&values[0][..width])?;
        let mut rank_min = rank_at_x0;
        let mut rank_max = rank_at_x0;
        for row in values.iter().skip(1) {
            let r = rank_of(&row[..width])?;
            rank_min = rank_min.min(r);
            rank_max = rank_max.max(r);
        }
        let mut involutive = None;
        let mut witness = None;
        if i + 2 <= n {
            let mut ok = true;
            'points: for (row, jrow) in values.iter().zip(&jacobians) {
                let base_rank = rank_of(&row[..width])?;
                let mut mat = DMatrix::zeros(n, width + 1);
                for (j, c) in row[..width].iter().enumerate() {
                    mat.set_column(j, c);
                }
                for a in 0..width {
                    for b in (a + 1)..width {
                        let bracket = &jrow[b] * &row[a] - &jrow[a] * &row[b];
                        mat.set_column(width, &bracket);
                        if matrix_rank(&mat, opts.tol_rank)? > base_rank {
                            ok = false;
                            witness = Some((a, b));
                            break 'points;
                        }
                    }
                }
            }
            involutive = Some(ok);
        }
        distributions.push(DistributionReport {
            index: i,
            rank_at_x0,
            rank_min,
            rank_max,
            constant_dimension: rank_min == rank_max,
            involutive,
            witness,
        });
    }

    let feasible = input_rank == m
        && distributions.iter().all(|d| d.constant_dimension)
        && distributions[n - 1].rank_at_x0 == n
        && distributions
            .iter()
            .all(|d| d.involutive.unwrap_or(true));

    Ok(Prop1Report {
        n,
        m,
        input_rank,
        distributions,
        feasible,
    })
}
