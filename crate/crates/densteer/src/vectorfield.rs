//! Smooth scalar/vector fields with exact nested differentiation, Lie
//! calculus operators, and distribution (span/involutivity) tests.

use crate::jet::{jet_space, Jet};
use nalgebra::{DMatrix, DVector};
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("vectorfield: arity mismatch: {left} vs {right}")]
    ArityMismatch { left: usize, right: usize },
    #[error("vectorfield: non-finite value in {context}")]
    Numerics { context: String },
    #[error("vectorfield: derivative order {requested} exceeds supported order {supported}")]
    Capability { requested: usize, supported: usize },
    #[error("vectorfield: point lies outside the declared domain (axis {axis})")]
    Domain { axis: usize },
    #[error("vectorfield: {0}")]
    Invalid(String),
}

/// Axis-aligned box in `R^n`.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl DomainBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self, FieldError> {
        if lo.len() != hi.len() {
            return Err(FieldError::ArityMismatch {
                left: lo.len(),
                right: hi.len(),
            });
        }
        for (axis, (a, b)) in lo.iter().zip(&hi).enumerate() {
            if !(a < b) {
                return Err(FieldError::Invalid(format!(
                    "empty domain on axis {axis}: [{a}, {b}]"
                )));
            }
        }
        Ok(DomainBox { lo, hi })
    }

    pub fn cube(dim: usize, half_width: f64) -> Self {
        DomainBox {
            lo: vec![-half_width; dim],
            hi: vec![half_width; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (lo, hi))| v >= lo && v <= hi)
    }

    pub fn check(&self, x: &[f64]) -> Result<(), FieldError> {
        for (axis, (v, (lo, hi))) in x.iter().zip(self.lo.iter().zip(&self.hi)).enumerate() {
            if v < lo || v > hi {
                return Err(FieldError::Domain { axis });
            }
        }
        Ok(())
    }

    pub fn center(&self) -> Vec<f64> {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(a, b)| 0.5 * (a + b))
            .collect()
    }

    /// All `2^n` corner points.
    pub fn corners(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        (0..1usize << n)
            .map(|mask| {
                (0..n)
                    .map(|i| {
                        if mask >> i & 1 == 1 {
                            self.hi[i]
                        } else {
                            self.lo[i]
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

/// Backend of a scalar field: a point evaluator plus a Taylor expander.
/// Implementations must be deterministic.
pub trait ScalarProgram: Send + Sync + fmt::Debug {
    fn arity(&self) -> usize;
    fn eval(&self, x: &[f64]) -> f64;
    /// Taylor expansion at `x` truncated at total degree `order`.
    fn taylor(&self, order: usize, x: &[f64]) -> Jet;
    fn describe(&self) -> String {
        "<program>".into()
    }
}

/// Smooth scalar field on `R^n`. Immutable and cheap to clone.
#[derive(Clone)]
pub struct ScalarField {
    program: Arc<dyn ScalarProgram>,
    max_order: usize,
}

impl fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ScalarField({})", self.program.describe())
    }
}

pub const DEFAULT_MAX_ORDER: usize = 32;

impl ScalarField {
    pub fn from_program(program: Arc<dyn ScalarProgram>) -> Self {
        ScalarField {
            program,
            max_order: DEFAULT_MAX_ORDER,
        }
    }

    pub fn with_max_order(mut self, max_order: usize) -> Self {
        self.max_order = max_order;
        self
    }

    pub fn arity(&self) -> usize {
        self.program.arity()
    }

    pub fn max_order(&self) -> usize {
        self.max_order
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64, FieldError> {
        let v = self.program.eval(x);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(FieldError::Numerics {
                context: format!("eval of {}", self.program.describe()),
            })
        }
    }

    /// Raw evaluation without the finiteness check.
    pub fn eval_raw(&self, x: &[f64]) -> f64 {
        self.program.eval(x)
    }

    pub fn taylor(&self, order: usize, x: &[f64]) -> Jet {
        self.program.taylor(order, x)
    }

    pub fn gradient(&self, x: &[f64]) -> Result<Vec<f64>, FieldError> {
        let jet = self.taylor(1, x);
        if !jet.is_finite() {
            return Err(FieldError::Numerics {
                context: format!("gradient of {}", self.program.describe()),
            });
        }
        Ok(jet.gradient())
    }

    pub fn describe(&self) -> String {
        self.program.describe()
    }
}

/// Smooth vector field on `R^n`, stored componentwise. The Jacobian comes
/// from the jet engine, never from finite differences.
#[derive(Debug, Clone)]
pub struct VectorField {
    comps: Vec<ScalarField>,
}

impl VectorField {
    pub fn new(comps: Vec<ScalarField>) -> Self {
        assert!(!comps.is_empty(), "vector field needs components");
        let arity = comps[0].arity();
        assert!(
            comps.iter().all(|c| c.arity() == arity),
            "vector field components must share arity"
        );
        VectorField { comps }
    }

    pub fn arity(&self) -> usize {
        self.comps[0].arity()
    }

    pub fn components(&self) -> &[ScalarField] {
        &self.comps
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>, FieldError> {
        self.comps.iter().map(|c| c.eval(x)).collect()
    }

    pub fn eval_raw(&self, x: &[f64]) -> Vec<f64> {
        self.comps.iter().map(|c| c.eval_raw(x)).collect()
    }

    /// Jacobian matrix with entry `(i, j) = ∂f_i/∂x_j`.
    pub fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>, FieldError> {
        let n = self.arity();
        let mut jac = DMatrix::zeros(self.comps.len(), n);
        for (i, c) in self.comps.iter().enumerate() {
            let grad = c.gradient(x)?;
            for (j, g) in grad.iter().enumerate() {
                jac[(i, j)] = *g;
            }
        }
        Ok(jac)
    }

    pub fn taylor_comps(&self, order: usize, x: &[f64]) -> Vec<Jet> {
        self.comps.iter().map(|c| c.taylor(order, x)).collect()
    }
}

/// Control-affine system `ẋ = f(x) + Σ g_i(x) u_i` on an axis-aligned
/// domain box.
#[derive(Debug, Clone)]
pub struct ControlAffineSystem {
    pub f: VectorField,
    pub g: Vec<VectorField>,
    pub domain: DomainBox,
}

impl ControlAffineSystem {
    pub fn new(f: VectorField, g: Vec<VectorField>, domain: DomainBox) -> Result<Self, FieldError> {
        let n = f.arity();
        if domain.dim() != n {
            return Err(FieldError::ArityMismatch {
                left: domain.dim(),
                right: n,
            });
        }
        if g.is_empty() {
            return Err(FieldError::Invalid("no input columns".into()));
        }
        if g.len() > n {
            return Err(FieldError::Invalid(format!(
                "more inputs ({}) than states ({n})",
                g.len()
            )));
        }
        for (j, gj) in g.iter().enumerate() {
            if gj.arity() != n || gj.components().len() != n {
                return Err(FieldError::Invalid(format!(
                    "input column {} has wrong dimension",
                    j + 1
                )));
            }
        }
        if f.components().len() != n {
            return Err(FieldError::Invalid("drift has wrong dimension".into()));
        }
        Ok(ControlAffineSystem { f, g, domain })
    }

    pub fn state_dim(&self) -> usize {
        self.f.arity()
    }

    pub fn input_dim(&self) -> usize {
        self.g.len()
    }

    /// The `n x m` input matrix `G(x) = [g_1(x) | ... | g_m(x)]`.
    pub fn input_matrix(&self, x: &[f64]) -> Result<DMatrix<f64>, FieldError> {
        let n = self.state_dim();
        let m = self.input_dim();
        let mut mat = DMatrix::zeros(n, m);
        for (j, gj) in self.g.iter().enumerate() {
            let col = gj.eval(x)?;
            for (i, v) in col.iter().enumerate() {
                mat[(i, j)] = *v;
            }
        }
        Ok(mat)
    }

    /// Numerical rank of `G(x)`; Prop. 1 requires this to equal `m` at the
    /// expansion point.
    pub fn input_rank(&self, x: &[f64], tol: f64) -> Result<usize, FieldError> {
        let mat = self.input_matrix(x)?;
        matrix_rank(&mat, tol)
    }

    pub fn drift_at(&self, x: &[f64]) -> Result<Vec<f64>, FieldError> {
        self.f.eval(x)
    }
}

/// Numerical rank by singular values: count of `σ_i > tol · σ_max`.
pub fn matrix_rank(mat: &DMatrix<f64>, tol: f64) -> Result<usize, FieldError> {
    let svals = mat.clone().singular_values();
    if svals.iter().any(|s| !s.is_finite()) {
        return Err(FieldError::Numerics {
            context: "singular values".into(),
        });
    }
    let smax = svals.iter().cloned().fold(0.0_f64, f64::max);
    if smax == 0.0 {
        return Ok(0);
    }
    Ok(svals.iter().filter(|&&s| s > tol * smax).count())
}

/// Lie derivative `L_ξ λ(x) = <∇λ(x), ξ(x)>`.
pub fn lie_derivative(
    lambda: &ScalarField,
    xi: &VectorField,
    x: &[f64],
) -> Result<f64, FieldError> {
    if lambda.arity() != xi.arity() {
        return Err(FieldError::ArityMismatch {
            left: lambda.arity(),
            right: xi.arity(),
        });
    }
    let grad = lambda.gradient(x)?;
    let v = xi.eval(x)?;
    Ok(grad.iter().zip(&v).map(|(a, b)| a * b).sum())
}

/// `k`-fold Lie derivative `L_ξ^k λ(x)`; `k = 0` returns `λ(x)`.
///
/// Computed by a jet pullback: expand `λ` at order `k` and `ξ` at order
/// `k - 1`, then apply `w ↦ <∇w, ξ>` `k` times, losing one valid order per
/// application.
pub fn lie_derivative_k(
    lambda: &ScalarField,
    xi: &VectorField,
    k: usize,
    x: &[f64],
) -> Result<f64, FieldError> {
    if lambda.arity() != xi.arity() {
        return Err(FieldError::ArityMismatch {
            left: lambda.arity(),
            right: xi.arity(),
        });
    }
    if k > lambda.max_order() {
        return Err(FieldError::Capability {
            requested: k,
            supported: lambda.max_order(),
        });
    }
    if k == 0 {
        return lambda.eval(x);
    }
    let chain = LieChain::compute(lambda, xi, k, x)?;
    Ok(chain.value(k))
}

/// Lie bracket `[ξ, η](x) = (∇η)ξ(x) − (∇ξ)η(x)`.
pub fn lie_bracket(xi: &VectorField, eta: &VectorField, x: &[f64]) -> Result<Vec<f64>, FieldError> {
    if xi.arity() != eta.arity() {
        return Err(FieldError::ArityMismatch {
            left: xi.arity(),
            right: eta.arity(),
        });
    }
    let jxi = xi.jacobian(x)?;
    let jeta = eta.jacobian(x)?;
    let vxi = DVector::from_vec(xi.eval(x)?);
    let veta = DVector::from_vec(eta.eval(x)?);
    let out = &jeta * &vxi - &jxi * &veta;
    Ok(out.iter().cloned().collect())
}

/// Iterated bracket `ad_f^k g(x)`; `k = 0` returns `g(x)`.
pub fn ad_k(f: &VectorField, g: &VectorField, k: usize, x: &[f64]) -> Result<Vec<f64>, FieldError> {
    if f.arity() != g.arity() {
        return Err(FieldError::ArityMismatch {
            left: f.arity(),
            right: g.arity(),
        });
    }
    if k == 0 {
        return g.eval(x);
    }
    let n = f.arity();
    // Expand both fields at order k; each bracket application consumes one
    // valid order of every participating jet.
    let f_jets = f.taylor_comps(k, x);
    let mut w = g.taylor_comps(k, x);
    for jet in f_jets.iter().chain(w.iter()) {
        if !jet.is_finite() {
            return Err(FieldError::Numerics {
                context: "ad_k jets".into(),
            });
        }
    }
    for _stage in 0..k {
        let mut next = Vec::with_capacity(n);
        for c in 0..n {
            // [f, w]_c = Σ_i ∂w_c/∂z_i f_i − ∂f_c/∂z_i w_i
            let mut acc = w[c].derivative(0) * f_jets[0].clone()
                - f_jets[c].derivative(0) * w[0].clone();
            for i in 1..n {
                acc = acc + w[c].derivative(i) * f_jets[i].clone()
                    - f_jets[c].derivative(i) * w[i].clone();
            }
            next.push(acc);
        }
        w = next;
    }
    Ok(w.iter().map(|jet| jet.value()).collect())
}

/// Rank of `span{fields}(x)` via SVD with a relative threshold.
pub fn distribution_rank(
    fields: &[VectorField],
    x: &[f64],
    tol: f64,
) -> Result<usize, FieldError> {
    if fields.is_empty() {
        return Err(FieldError::Invalid("empty field list".into()));
    }
    let n = fields[0].arity();
    let mut mat = DMatrix::zeros(n, fields.len());
    for (j, field) in fields.iter().enumerate() {
        let col = field.eval(x)?;
        for (i, v) in col.iter().enumerate() {
            mat[(i, j)] = *v;
        }
    }
    matrix_rank(&mat, tol)
}

/// Involutivity of `span{fields}` at a point: every pairwise bracket must
/// stay inside the span. On failure the first violating pair (0-based
/// indices into `fields`) is returned as a witness.
pub fn is_involutive(
    fields: &[VectorField],
    x: &[f64],
    tol: f64,
) -> Result<(bool, Option<(usize, usize)>), FieldError> {
    if fields.is_empty() {
        return Err(FieldError::Invalid("empty field list".into()));
    }
    let n = fields[0].arity();
    let k = fields.len();
    // One value + Jacobian per field; brackets are then pure matrix algebra.
    let mut values = Vec::with_capacity(k);
    let mut jacobians = Vec::with_capacity(k);
    for field in fields {
        values.push(DVector::from_vec(field.eval(x)?));
        jacobians.push(field.jacobian(x)?);
    }
    let mut base = DMatrix::zeros(n, k);
    for (j, v) in values.iter().enumerate() {
        base.set_column(j, v);
    }
    let base_rank = matrix_rank(&base, tol)?;
    let mut augmented = DMatrix::zeros(n, k + 1);
    augmented.view_mut((0, 0), (n, k)).copy_from(&base);
    for i in 0..k {
        for j in (i + 1)..k {
            let bracket = &jacobians[j] * &values[i] - &jacobians[i] * &values[j];
            augmented.set_column(k, &bracket);
            if matrix_rank(&augmented, tol)? > base_rank {
                return Ok((false, Some((i, j))));
            }
        }
    }
    Ok((true, None))
}

/// Values and gradients of the chain `h, L_f h, ..., L_f^k h` at one point.
///
/// This is the workhorse behind relative degrees, decoupling matrices, and
/// the linearizing coordinates: one jet expansion of `h` at order `kmax`
/// yields every stage by repeated pullback.
pub struct LieChain {
    values: Vec<f64>,
    grads: Vec<Vec<f64>>,
}

impl LieChain {
    pub fn compute(
        h: &ScalarField,
        f: &VectorField,
        kmax: usize,
        x: &[f64],
    ) -> Result<LieChain, FieldError> {
        let n = h.arity();
        let order = kmax.max(1);
        let space = jet_space(n, order);
        let f_jets = f.taylor_comps(order, x);
        let mut w = h.taylor(order, x);
        if !w.is_finite() || f_jets.iter().any(|jet| !jet.is_finite()) {
            return Err(FieldError::Numerics {
                context: "Lie chain jets".into(),
            });
        }
        let _ = space;
        let mut values = Vec::with_capacity(kmax + 1);
        let mut grads = Vec::with_capacity(kmax);
        for stage in 0..=kmax {
            values.push(w.value());
            if stage < kmax || kmax == 0 {
                // valid order of w is order - stage >= 1 here
                grads.push(w.gradient());
            }
            if stage < kmax {
                let mut next = w.derivative(0) * f_jets[0].clone();
                for i in 1..n {
                    next = next + w.derivative(i) * f_jets[i].clone();
                }
                w = next;
            }
        }
        if values.iter().any(|v| !v.is_finite())
            || grads.iter().flatten().any(|v| !v.is_finite())
        {
            return Err(FieldError::Numerics {
                context: "Lie chain values".into(),
            });
        }
        Ok(LieChain { values, grads })
    }

    /// `L_f^k h(x)`.
    pub fn value(&self, k: usize) -> f64 {
        self.values[k]
    }

    /// `∇L_f^k h(x)`, available for `k < kmax`.
    pub fn gradient(&self, k: usize) -> &[f64] {
        &self.grads[k]
    }

    /// `L_g L_f^k h(x)` for a column value `g(x)`.
    pub fn lie_along(&self, k: usize, g_at_x: &[f64]) -> f64 {
        self.grads[k]
            .iter()
            .zip(g_at_x)
            .map(|(a, b)| a * b)
            .sum()
    }
}

/// Scalar program for the derived field `L_f^k h`. Taylor expansion at
/// order `r` expands the base at order `r + k` and pulls back `k` times.
#[derive(Debug)]
pub struct LieDerivedProgram {
    h: ScalarField,
    f: VectorField,
    k: usize,
}

impl LieDerivedProgram {
    pub fn new(h: ScalarField, f: VectorField, k: usize) -> Self {
        assert_eq!(h.arity(), f.arity());
        LieDerivedProgram { h, f, k }
    }
}

impl ScalarProgram for LieDerivedProgram {
    fn arity(&self) -> usize {
        self.h.arity()
    }

    fn eval(&self, x: &[f64]) -> f64 {
        if self.k == 0 {
            return self.h.eval_raw(x);
        }
        match LieChain::compute(&self.h, &self.f, self.k, x) {
            Ok(chain) => chain.value(self.k),
            Err(_) => f64::NAN,
        }
    }

    fn taylor(&self, order: usize, x: &[f64]) -> Jet {
        let n = self.arity();
        let big = order + self.k;
        let f_jets = self.f.taylor_comps(big, x);
        let mut w = self.h.taylor(big, x);
        for _ in 0..self.k {
            let mut next = w.derivative(0) * f_jets[0].clone();
            for i in 1..n {
                next = next + w.derivative(i) * f_jets[i].clone();
            }
            w = next;
        }
        w.truncated(&jet_space(n, order))
    }

    fn describe(&self) -> String {
        format!("L_f^{} {}", self.k, self.h.describe())
    }
}

/// Derived field `L_f^k h` as a first-class scalar field.
pub fn lie_derived_field(h: &ScalarField, f: &VectorField, k: usize) -> ScalarField {
    ScalarField::from_program(Arc::new(LieDerivedProgram::new(h.clone(), f.clone(), k)))
}

#[derive(Debug)]
struct AdDerivedProgram {
    f: VectorField,
    g: VectorField,
    k: usize,
    comp: usize,
}

impl ScalarProgram for AdDerivedProgram {
    fn arity(&self) -> usize {
        self.f.arity()
    }

    fn eval(&self, x: &[f64]) -> f64 {
        match ad_k(&self.f, &self.g, self.k, x) {
            Ok(v) => v[self.comp],
            Err(_) => f64::NAN,
        }
    }

    fn taylor(&self, order: usize, x: &[f64]) -> Jet {
        let n = self.arity();
        let big = order + self.k;
        let f_jets = self.f.taylor_comps(big, x);
        let mut w = self.g.taylor_comps(big, x);
        for _ in 0..self.k {
            let mut next = Vec::with_capacity(n);
            for c in 0..n {
                let mut acc = w[c].derivative(0) * f_jets[0].clone()
                    - f_jets[c].derivative(0) * w[0].clone();
                for i in 1..n {
                    acc = acc + w[c].derivative(i) * f_jets[i].clone()
                        - f_jets[c].derivative(i) * w[i].clone();
                }
                next.push(acc);
            }
            w = next;
        }
        w[self.comp].truncated(&jet_space(n, order))
    }

    fn describe(&self) -> String {
        format!("ad_f^{} g [{}]", self.k, self.comp)
    }
}

/// Derived vector field `ad_f^k g` with jet-differentiable components, so
/// brackets of iterated brackets stay exact.
pub fn ad_field(f: &VectorField, g: &VectorField, k: usize) -> VectorField {
    let n = f.arity();
    VectorField::new(
        (0..n)
            .map(|comp| {
                ScalarField::from_program(Arc::new(AdDerivedProgram {
                    f: f.clone(),
                    g: g.clone(),
                    k,
                    comp,
                }))
            })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exprdsl::{parse_scalar, parse_vector};

    fn paper_drift() -> VectorField {
        parse_vector(
            &[
                "x2 + x2^2".into(),
                "x3 - x1*x4 + x4*x5".into(),
                "x2*x4 + x1*x5 - x5^2".into(),
                "x5".into(),
                "x2^2".into(),
            ],
            5,
        )
        .unwrap()
    }

    #[test]
    fn lie_derivative_orthogonal_field_is_zero() {
        let lambda = parse_scalar("x1", 2).unwrap();
        let xi = parse_vector(&["0".into(), "1".into()], 2).unwrap();
        let v = lie_derivative(&lambda, &xi, &[0.7, -1.3]).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn lie_derivative_of_first_output_is_x2() {
        // L_f h1 = (x2 + x2^2) - x2^2 = x2; hand-symbolic oracle.
        let h1 = parse_scalar("x1 - x5", 5).unwrap();
        let f = paper_drift();
        let v = lie_derivative(&h1, &f, &[0.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((v - 1.0).abs() < 1e-14);
        let v = lie_derivative(&h1, &f, &[0.0, 0.5, 0.0, 0.0, 0.0]).unwrap();
        assert!((v - 0.5).abs() < 1e-14);
    }

    #[test]
    fn lie_derivative_of_second_output() {
        // L_f h2 = x5
        let h2 = parse_scalar("x4", 5).unwrap();
        let f = paper_drift();
        let v = lie_derivative(&h2, &f, &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert!((v - 5.0).abs() < 1e-14);
    }

    #[test]
    fn iterated_lie_derivative_conventions() {
        let h1 = parse_scalar("x1 - x5", 5).unwrap();
        let f = paper_drift();
        let x = [0.3, -0.2, 0.1, 0.4, -0.5];
        assert_eq!(
            lie_derivative_k(&h1, &f, 0, &x).unwrap(),
            h1.eval(&x).unwrap()
        );
        // L_f^2 h1 = x3 - x1 x4 + x4 x5 (third linearizing coordinate)
        let v = lie_derivative_k(&h1, &f, 2, &[0.0; 5]).unwrap();
        assert!(v.abs() < 1e-14);
        let v = lie_derivative_k(&h1, &f, 2, &x).unwrap();
        let expected = 0.1 - 0.3 * 0.4 + 0.4 * (-0.5);
        assert!((v - expected).abs() < 1e-13);
        // L_f^2 h2 = x2^2
        let h2 = parse_scalar("x4", 5).unwrap();
        let v = lie_derivative_k(&h2, &f, 2, &[0.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((v - 1.0).abs() < 1e-13);
    }

    #[test]
    fn order_overflow_is_reported() {
        let h = parse_scalar("x1", 2).unwrap().with_max_order(3);
        let f = parse_vector(&["x2".into(), "0".into()], 2).unwrap();
        match lie_derivative_k(&h, &f, 4, &[0.0, 0.0]) {
            Err(FieldError::Capability {
                requested,
                supported,
            }) => {
                assert_eq!(requested, 4);
                assert_eq!(supported, 3);
            }
            other => panic!("expected capability error, got {other:?}"),
        }
    }

    #[test]
    fn bracket_of_field_with_itself_vanishes() {
        let xi = parse_vector(&["x2*x1".into(), "sin(x1)".into()], 2).unwrap();
        let b = lie_bracket(&xi, &xi, &[0.4, 1.2]).unwrap();
        assert!(b.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn shear_bracket_hand_oracle() {
        // xi = (x2, 0), eta = (0, 1): [xi, eta] = -(∇xi) eta = (-1, 0)
        let xi = parse_vector(&["x2".into(), "0".into()], 2).unwrap();
        let eta = parse_vector(&["0".into(), "1".into()], 2).unwrap();
        let b = lie_bracket(&xi, &eta, &[3.0, -7.0]).unwrap();
        assert_eq!(b, vec![-1.0, 0.0]);
    }

    #[test]
    fn constant_fields_commute() {
        let xi = parse_vector(&["2".into(), "1".into()], 2).unwrap();
        let eta = parse_vector(&["-1".into(), "3".into()], 2).unwrap();
        let b = lie_bracket(&xi, &eta, &[0.0, 0.0]).unwrap();
        assert_eq!(b, vec![0.0, 0.0]);
    }

    #[test]
    fn iterated_brackets_hand_oracle() {
        let f = parse_vector(&["x2".into(), "0".into()], 2).unwrap();
        let g = parse_vector(&["0".into(), "1".into()], 2).unwrap();
        let x = [0.9, -2.0];
        assert_eq!(ad_k(&f, &g, 0, &x).unwrap(), vec![0.0, 1.0]);
        assert_eq!(ad_k(&f, &g, 1, &x).unwrap(), vec![-1.0, 0.0]);
        assert_eq!(ad_k(&f, &g, 2, &x).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn ad_field_matches_pointwise_ad() {
        let f = paper_drift();
        let g1 = parse_vector(
            &[
                "0".into(),
                "0".into(),
                "cos(x1 - x5)".into(),
                "0".into(),
                "0".into(),
            ],
            5,
        )
        .unwrap();
        let x = [0.1, -0.2, 0.3, 0.05, -0.1];
        for k in 0..4 {
            let direct = ad_k(&f, &g1, k, &x).unwrap();
            let field = ad_field(&f, &g1, k);
            let via_field = field.eval(&x).unwrap();
            for (a, b) in direct.iter().zip(&via_field) {
                assert!((a - b).abs() < 1e-11, "k={k}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn rank_of_standard_and_collinear_fields() {
        let e1 = parse_vector(&["1".into(), "0".into()], 2).unwrap();
        let e2 = parse_vector(&["0".into(), "1".into()], 2).unwrap();
        let e1x2 = parse_vector(&["2".into(), "0".into()], 2).unwrap();
        let x = [0.0, 0.0];
        assert_eq!(
            distribution_rank(&[e1.clone(), e2], &x, 1e-8).unwrap(),
            2
        );
        assert_eq!(distribution_rank(&[e1, e1x2], &x, 1e-8).unwrap(), 1);
    }

    #[test]
    fn involutivity_detects_violating_pair() {
        let f1 = parse_vector(&["1".into(), "0".into(), "0".into()], 3).unwrap();
        let f2 = parse_vector(&["0".into(), "1".into(), "x1".into()], 3).unwrap();
        let (ok, witness) = is_involutive(&[f1.clone(), f2], &[0.0; 3], 1e-8).unwrap();
        assert!(!ok);
        assert_eq!(witness, Some((0, 1)));
        let (ok, witness) = is_involutive(&[f1], &[0.0; 3], 1e-8).unwrap();
        assert!(ok);
        assert!(witness.is_none());
    }

    #[test]
    fn constant_fields_are_involutive() {
        let f1 = parse_vector(&["1".into(), "0".into(), "0".into()], 3).unwrap();
        let f2 = parse_vector(&["0".into(), "1".into(), "0".into()], 3).unwrap();
        let (ok, _) = is_involutive(&[f1, f2], &[0.3, 0.1, -0.2], 1e-8).unwrap();
        assert!(ok);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let f = paper_drift();
        let x = [0.2, -0.3, 0.15, 0.4, -0.1];
        let jac = f.jacobian(&x).unwrap();
        let h = 1e-5;
        for j in 0..5 {
            let mut xp = x;
            let mut xm = x;
            xp[j] += h;
            xm[j] -= h;
            let fp = f.eval(&xp).unwrap();
            let fm = f.eval(&xm).unwrap();
            for i in 0..5 {
                let fd = (fp[i] - fm[i]) / (2.0 * h);
                let tol = 1e-5 * (1.0 + fd.abs());
                assert!(
                    (jac[(i, j)] - fd).abs() < tol,
                    "({i},{j}): jet {} vs fd {fd}",
                    jac[(i, j)]
                );
            }
        }
    }
}
