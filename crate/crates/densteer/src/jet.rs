//! Truncated multivariate Taylor ("jet") arithmetic.
//!
//! A [`Jet`] stores the Taylor coefficients of a smooth function at a point,
//! truncated at a total degree: `f(x0 + h) = Σ_α c_α h^α + O(|h|^{K+1})`.
//! All arithmetic and elementary functions propagate the full coefficient
//! vector, so nested derivatives of composite expressions are exact to
//! machine precision (unlike finite differences, which only serve as a
//! cross-check here).
//!
//! Coefficients of total degree `d` in a product, quotient, or elementary
//! composition depend only on input coefficients of degree `<= d`. The one
//! operation that loses information is [`Jet::derivative`], which needs
//! degree `d + 1` inputs for degree `d` outputs; callers that chain
//! derivatives (the Lie-calculus pullbacks) must start from a high enough
//! order and track how many valid degrees remain.

use once_cell::sync::Lazy;
use std::collections::HashMap;
use std::ops::{Add, Div, Mul, Neg, Sub};
use std::sync::{Arc, Mutex};

const NO_INDEX: u32 = u32::MAX;

/// Shared index tables for jets in `vars` variables truncated at total
/// degree `order`. Obtained through [`jet_space`], which caches one table
/// per `(vars, order)` pair.
#[derive(Debug)]
pub struct JetSpace {
    vars: usize,
    order: usize,
    /// Exponent vectors in graded lexicographic order; index 0 is the
    /// constant term. The monomials of order `K - 1` form a prefix of the
    /// monomials of order `K`, which lets lower-order results be read off
    /// as coefficient prefixes.
    monomials: Vec<Vec<u8>>,
    /// Coefficient triples `(i, j, k)` with `monomial_i * monomial_j =
    /// monomial_k`, covering every pair with compatible total degree.
    products: Vec<(u32, u32, u32)>,
    /// `raise[v][k]` is the index of `monomial_k + e_v`, or `NO_INDEX` when
    /// that would exceed the truncation order.
    raise: Vec<Vec<u32>>,
}

impl JetSpace {
    fn build(vars: usize, order: usize) -> Self {
        assert!(vars > 0, "jet space needs at least one variable");
        let mut monomials: Vec<Vec<u8>> = Vec::new();
        let mut current: Vec<Vec<u8>> = vec![vec![0u8; vars]];
        monomials.extend(current.iter().cloned());
        for _deg in 1..=order {
            // all exponent vectors of the next total degree, in lex order
            let mut next: Vec<Vec<u8>> = Vec::new();
            let mut seen: HashMap<Vec<u8>, ()> = HashMap::new();
            for m in &current {
                for v in 0..vars {
                    let mut e = m.clone();
                    e[v] += 1;
                    if seen.insert(e.clone(), ()).is_none() {
                        next.push(e);
                    }
                }
            }
            // descending lex within the degree block puts e_1, e_2, ... in
            // variable order, which `variable`/`gradient` rely on
            next.sort_by(|a, b| b.cmp(a));
            monomials.extend(next.iter().cloned());
            current = next;
        }
        let index: HashMap<Vec<u8>, u32> = monomials
            .iter()
            .enumerate()
            .map(|(i, m)| (m.clone(), i as u32))
            .collect();

        let degree = |m: &[u8]| -> usize { m.iter().map(|&e| e as usize).sum() };

        let mut products = Vec::new();
        for (i, mi) in monomials.iter().enumerate() {
            let di = degree(mi);
            for (j, mj) in monomials.iter().enumerate() {
                if di + degree(mj) > order {
                    continue;
                }
                let sum: Vec<u8> = mi.iter().zip(mj).map(|(a, b)| a + b).collect();
                products.push((i as u32, j as u32, index[&sum]));
            }
        }
        products.sort_by_key(|&(_, _, k)| k);

        let mut raise = vec![vec![NO_INDEX; monomials.len()]; vars];
        for (k, m) in monomials.iter().enumerate() {
            for v in 0..vars {
                if degree(m) < order {
                    let mut e = m.clone();
                    e[v] += 1;
                    raise[v][k] = index[&e];
                }
            }
        }

        JetSpace {
            vars,
            order,
            monomials,
            products,
            raise,
        }
    }

    pub fn vars(&self) -> usize {
        self.vars
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Number of stored coefficients, `C(vars + order, order)`.
    pub fn len(&self) -> usize {
        self.monomials.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn exponent(&self, idx: usize) -> &[u8] {
        &self.monomials[idx]
    }
}

static SPACES: Lazy<Mutex<HashMap<(usize, usize), Arc<JetSpace>>>> =
    Lazy::new(|| Mutex::new(HashMap::new()));

/// Cached jet space for `vars` variables at truncation `order`.
pub fn jet_space(vars: usize, order: usize) -> Arc<JetSpace> {
    let mut cache = SPACES.lock().expect("jet space cache poisoned");
    cache
        .entry((vars, order))
        .or_insert_with(|| Arc::new(JetSpace::build(vars, order)))
        .clone()
}

/// Truncated Taylor expansion of a scalar function at a point.
#[derive(Debug, Clone)]
pub struct Jet {
    space: Arc<JetSpace>,
    c: Vec<f64>,
}

impl Jet {
    pub fn constant(space: &Arc<JetSpace>, value: f64) -> Jet {
        let mut c = vec![0.0; space.len()];
        c[0] = value;
        Jet {
            space: space.clone(),
            c,
        }
    }

    /// Seed jet for coordinate `var` at base value `value`: the expansion
    /// of the projection `x ↦ x_var` around the base point.
    pub fn variable(space: &Arc<JetSpace>, var: usize, value: f64) -> Jet {
        assert!(var < space.vars());
        let mut c = vec![0.0; space.len()];
        c[0] = value;
        if space.order() >= 1 {
            // e_var is monomial index 1 + var in graded-lex order
            c[1 + var] = 1.0;
        }
        Jet {
            space: space.clone(),
            c,
        }
    }

    pub fn space(&self) -> &Arc<JetSpace> {
        &self.space
    }

    pub fn value(&self) -> f64 {
        self.c[0]
    }

    /// First-order coefficients, i.e. the gradient at the base point.
    pub fn gradient(&self) -> Vec<f64> {
        assert!(self.space.order() >= 1, "order-0 jet has no gradient");
        self.c[1..1 + self.space.vars()].to_vec()
    }

    /// The partial derivative `∂^α f` at the base point (coefficient times
    /// `α!`). Panics if the multi-index exceeds the truncation order.
    pub fn partial(&self, alpha: &[u8]) -> f64 {
        assert_eq!(alpha.len(), self.space.vars());
        let idx = self
            .space
            .monomials
            .iter()
            .position(|m| m == alpha)
            .expect("multi-index beyond truncation order");
        let fact: f64 = alpha
            .iter()
            .map(|&e| (1..=e as u64).product::<u64>() as f64)
            .product();
        self.c[idx] * fact
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.c
    }

    pub fn is_finite(&self) -> bool {
        self.c.iter().all(|v| v.is_finite())
    }

    /// Partial derivative `∂/∂x_var` as a jet in the same space. The top
    /// total degree of the result is unknowable and left at zero; callers
    /// must track the remaining valid order.
    pub fn derivative(&self, var: usize) -> Jet {
        let space = &self.space;
        let mut c = vec![0.0; space.len()];
        for k in 0..space.len() {
            let up = space.raise[var][k];
            if up != NO_INDEX {
                let exp_v = space.exponent(k)[var] as f64;
                c[k] = self.c[up as usize] * (exp_v + 1.0);
            }
        }
        Jet {
            space: space.clone(),
            c,
        }
    }

    /// Copy into a (usually smaller) space over the same variables. Relies
    /// on the graded ordering making lower-order monomials a prefix.
    pub fn truncated(&self, target: &Arc<JetSpace>) -> Jet {
        assert_eq!(target.vars(), self.space.vars());
        assert!(target.order() <= self.space.order());
        Jet {
            space: target.clone(),
            c: self.c[..target.len()].to_vec(),
        }
    }

    pub fn scale(&self, s: f64) -> Jet {
        Jet {
            space: self.space.clone(),
            c: self.c.iter().map(|v| v * s).collect(),
        }
    }

    fn mul_impl(&self, rhs: &Jet) -> Jet {
        debug_assert_eq!(self.space.len(), rhs.space.len());
        let mut c = vec![0.0; self.space.len()];
        for &(i, j, k) in &self.space.products {
            c[k as usize] += self.c[i as usize] * rhs.c[j as usize];
        }
        Jet {
            space: self.space.clone(),
            c,
        }
    }

    /// Composition `f ∘ self` where `taylor[j] = f^{(j)}(self.value())/j!`.
    /// Evaluated by Horner's scheme in `(self - value)`.
    fn compose(&self, taylor: &[f64]) -> Jet {
        let order = self.space.order();
        debug_assert_eq!(taylor.len(), order + 1);
        let mut h = self.clone();
        h.c[0] = 0.0;
        let mut acc = Jet::constant(&self.space, taylor[order]);
        for j in (0..order).rev() {
            acc = acc.mul_impl(&h);
            acc.c[0] += taylor[j];
        }
        acc
    }

    pub fn recip(&self) -> Jet {
        let u0 = self.value();
        let order = self.space.order();
        let mut taylor = vec![0.0; order + 1];
        let mut p = 1.0 / u0;
        for t in taylor.iter_mut() {
            *t = p;
            p *= -1.0 / u0;
        }
        self.compose(&taylor)
    }

    pub fn powi(&self, exp: i32) -> Jet {
        if exp == 0 {
            return Jet::constant(&self.space, 1.0);
        }
        if exp < 0 {
            return self.powi(-exp).recip();
        }
        let mut base = self.clone();
        let mut e = exp as u32;
        let mut acc: Option<Jet> = None;
        while e > 0 {
            if e & 1 == 1 {
                acc = Some(match acc {
                    Some(a) => a.mul_impl(&base),
                    None => base.clone(),
                });
            }
            e >>= 1;
            if e > 0 {
                base = base.mul_impl(&base);
            }
        }
        acc.expect("non-zero exponent")
    }

    pub fn sin(&self) -> Jet {
        let (s, c) = self.value().sin_cos();
        let cycle = [s, c, -s, -c];
        let order = self.space.order();
        let mut fact = 1.0;
        let mut taylor = vec![0.0; order + 1];
        for (j, t) in taylor.iter_mut().enumerate() {
            if j > 0 {
                fact *= j as f64;
            }
            *t = cycle[j % 4] / fact;
        }
        self.compose(&taylor)
    }

    pub fn cos(&self) -> Jet {
        let (s, c) = self.value().sin_cos();
        let cycle = [c, -s, -c, s];
        let order = self.space.order();
        let mut fact = 1.0;
        let mut taylor = vec![0.0; order + 1];
        for (j, t) in taylor.iter_mut().enumerate() {
            if j > 0 {
                fact *= j as f64;
            }
            *t = cycle[j % 4] / fact;
        }
        self.compose(&taylor)
    }

    pub fn tan(&self) -> Jet {
        self.sin() / self.cos()
    }

    pub fn exp(&self) -> Jet {
        let e0 = self.value().exp();
        let order = self.space.order();
        let mut fact = 1.0;
        let mut taylor = vec![0.0; order + 1];
        for (j, t) in taylor.iter_mut().enumerate() {
            if j > 0 {
                fact *= j as f64;
            }
            *t = e0 / fact;
        }
        self.compose(&taylor)
    }

    pub fn ln(&self) -> Jet {
        let u0 = self.value();
        let order = self.space.order();
        let mut taylor = vec![0.0; order + 1];
        taylor[0] = u0.ln();
        let mut pw = 1.0;
        for (j, t) in taylor.iter_mut().enumerate().skip(1) {
            pw *= u0;
            let sign = if j % 2 == 1 { 1.0 } else { -1.0 };
            *t = sign / (j as f64 * pw);
        }
        self.compose(&taylor)
    }

    pub fn sqrt(&self) -> Jet {
        let u0 = self.value();
        let order = self.space.order();
        let mut taylor = vec![0.0; order + 1];
        taylor[0] = u0.sqrt();
        // binom(1/2, j) * u0^(1/2 - j), built iteratively
        let mut coeff = taylor[0];
        for (j, t) in taylor.iter_mut().enumerate().skip(1) {
            coeff *= (0.5 - (j as f64 - 1.0)) / (j as f64 * u0);
            *t = coeff;
        }
        self.compose(&taylor)
    }
}

impl Add for Jet {
    type Output = Jet;
    fn add(mut self, rhs: Jet) -> Jet {
        for (a, b) in self.c.iter_mut().zip(&rhs.c) {
            *a += b;
        }
        self
    }
}

impl Sub for Jet {
    type Output = Jet;
    fn sub(mut self, rhs: Jet) -> Jet {
        for (a, b) in self.c.iter_mut().zip(&rhs.c) {
            *a -= b;
        }
        self
    }
}

impl Mul for Jet {
    type Output = Jet;
    fn mul(self, rhs: Jet) -> Jet {
        self.mul_impl(&rhs)
    }
}

impl Mul for &Jet {
    type Output = Jet;
    fn mul(self, rhs: &Jet) -> Jet {
        self.mul_impl(rhs)
    }
}

impl Div for Jet {
    type Output = Jet;
    fn div(self, rhs: Jet) -> Jet {
        self.mul_impl(&rhs.recip())
    }
}

impl Neg for Jet {
    type Output = Jet;
    fn neg(mut self) -> Jet {
        for a in self.c.iter_mut() {
            *a = -*a;
        }
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeds(space: &Arc<JetSpace>, x: &[f64]) -> Vec<Jet> {
        x.iter()
            .enumerate()
            .map(|(v, &xv)| Jet::variable(space, v, xv))
            .collect()
    }

    #[test]
    fn monomial_counts() {
        let s = jet_space(5, 5);
        assert_eq!(s.len(), 252); // C(10, 5)
        let s = jet_space(2, 3);
        assert_eq!(s.len(), 10);
    }

    #[test]
    fn lower_order_is_prefix() {
        let big = jet_space(3, 4);
        let small = jet_space(3, 2);
        for k in 0..small.len() {
            assert_eq!(big.monomials[k], small.monomials[k]);
        }
    }

    #[test]
    fn cube_derivative_is_exact() {
        let space = jet_space(1, 3);
        let x = Jet::variable(&space, 0, 2.0);
        let x3 = x.powi(3);
        assert_eq!(x3.value(), 8.0);
        assert_eq!(x3.gradient()[0], 12.0); // exact, not approximate
        assert_eq!(x3.partial(&[2]), 12.0); // d2/dx2 = 6x
        assert_eq!(x3.partial(&[3]), 6.0);
    }

    #[test]
    fn product_rule_multivariate() {
        let space = jet_space(2, 2);
        let xs = seeds(&space, &[1.5, -0.5]);
        // f = x0^2 * x1, grad = (2 x0 x1, x0^2)
        let f = xs[0].powi(2) * xs[1].clone();
        let g = f.gradient();
        assert!((g[0] - 2.0 * 1.5 * -0.5).abs() < 1e-15);
        assert!((g[1] - 2.25).abs() < 1e-15);
        // cross partial d2f/dx0dx1 = 2 x0
        assert!((f.partial(&[1, 1]) - 3.0).abs() < 1e-15);
    }

    #[test]
    fn elementary_functions_match_finite_differences() {
        let space = jet_space(2, 1);
        let x = [0.3, -0.7];
        let f = |x: &[f64]| (x[0] - x[1]).cos() * x[1].exp() + (1.0 + x[0] * x[0]).ln();
        let jf = {
            let xs = seeds(&space, &x);
            (xs[0].clone() - xs[1].clone()).cos() * xs[1].exp()
                + (Jet::constant(&space, 1.0) + xs[0].clone() * xs[0].clone()).ln()
        };
        assert!((jf.value() - f(&x)).abs() < 1e-14);
        let h = 1e-5;
        for v in 0..2 {
            let mut xp = x;
            let mut xm = x;
            xp[v] += h;
            xm[v] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let rel = (jf.gradient()[v] - fd).abs() / (1.0 + fd.abs());
            assert!(rel < 1e-9, "var {v}: jet {} vs fd {fd}", jf.gradient()[v]);
        }
    }

    #[test]
    fn sqrt_and_division_round_trip() {
        let space = jet_space(1, 4);
        let x = Jet::variable(&space, 0, 1.7);
        let y = x.sqrt() * x.sqrt();
        for (a, b) in y.coefficients().iter().zip(x.coefficients()) {
            assert!((a - b).abs() < 1e-13);
        }
        let z = x.clone() / x.clone();
        assert!((z.value() - 1.0).abs() < 1e-14);
        assert!(z.gradient()[0].abs() < 1e-14);
    }

    #[test]
    fn tan_matches_sin_over_cos_identity() {
        let space = jet_space(1, 3);
        let x = Jet::variable(&space, 0, 0.4);
        let t = x.tan();
        // d tan = 1 + tan^2
        let expected = 1.0 + 0.4f64.tan().powi(2);
        assert!((t.gradient()[0] - expected).abs() < 1e-13);
    }

    #[test]
    fn derivative_shift_drops_order() {
        let space = jet_space(1, 3);
        let x = Jet::variable(&space, 0, 2.0);
        let f = x.powi(3); // x^3
        let d = f.derivative(0); // 3x^2 valid to order 2
        assert_eq!(d.value(), 12.0);
        assert_eq!(d.gradient()[0], 12.0); // 6x at 2
        assert_eq!(d.partial(&[2]), 6.0);
    }

    #[test]
    fn non_finite_propagates() {
        let space = jet_space(1, 2);
        let x = Jet::variable(&space, 0, 0.0);
        let bad = x.recip();
        assert!(!bad.is_finite());
    }
}
