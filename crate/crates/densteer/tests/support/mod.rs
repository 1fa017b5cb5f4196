//! Shared oracles for the integration suites. Everything here is
//! independent of the solver code paths it checks: closed forms only.

/// Closed-form 1D Gaussian Schrödinger bridge for the prior
/// `dz = sqrt(2ε) dW` between `N(m0, var0)` and `N(m1, var1)` on the unit
/// horizon.
///
/// Both factors stay Gaussian: `φ̂(z, 0) ∝ exp(-(z - β̂)²/(2 v̂0))`
/// widens under the heat flow to variance parameter `v̂0 + 2εt`, and
/// `φ(z, 1) ∝ exp(-(z - β)²/(2 v1))` widens backward to `v1 + 2ε(1-t)`.
/// The multiplicative boundary conditions pin `(v̂0, v1)` through
///
/// ```text
/// 1/(v1 + 2ε) + 1/v̂0 = 1/var0
/// 1/v1 + 1/(v̂0 + 2ε) = 1/var1
/// ```
///
/// solved here by the same alternating substitution that makes the Fortet
/// recursion tick, and `(β, β̂)` through the matching linear system for
/// the means.
#[derive(Debug, Clone, Copy)]
pub struct GaussianBridge1d {
    pub eps: f64,
    pub v_hat0: f64,
    pub v1: f64,
    pub beta_hat: f64,
    pub beta: f64,
}

impl GaussianBridge1d {
    pub fn solve(m0: f64, var0: f64, m1: f64, var1: f64, eps: f64) -> GaussianBridge1d {
        let mut v_hat0 = var0;
        let mut v1 = var1;
        for _ in 0..10_000 {
            let new_v1 = 1.0 / (1.0 / var1 - 1.0 / (v_hat0 + 2.0 * eps));
            let new_v_hat0 = 1.0 / (1.0 / var0 - 1.0 / (new_v1 + 2.0 * eps));
            let delta = (new_v1 - v1).abs() + (new_v_hat0 - v_hat0).abs();
            v1 = new_v1;
            v_hat0 = new_v_hat0;
            if delta < 1e-15 {
                break;
            }
        }
        assert!(v_hat0 > 0.0 && v1 > 0.0, "bridge variances must be positive");
        // means: [1/(v1+2ε)  1/v̂0     ] (β)   (m0/var0)
        //        [1/v1        1/(v̂0+2ε)] (β̂) = (m1/var1)
        let a11 = 1.0 / (v1 + 2.0 * eps);
        let a12 = 1.0 / v_hat0;
        let a21 = 1.0 / v1;
        let a22 = 1.0 / (v_hat0 + 2.0 * eps);
        let det = a11 * a22 - a12 * a21;
        let b1 = m0 / var0;
        let b2 = m1 / var1;
        let beta = (a22 * b1 - a12 * b2) / det;
        let beta_hat = (-a21 * b1 + a11 * b2) / det;
        GaussianBridge1d {
            eps,
            v_hat0,
            v1,
            beta_hat,
            beta,
        }
    }

    /// Mean and variance of the bridge marginal `σ(·, t)`.
    pub fn mean_var(&self, t: f64) -> (f64, f64) {
        let vh = self.v_hat0 + 2.0 * self.eps * t;
        let vf = self.v1 + 2.0 * self.eps * (1.0 - t);
        let var = 1.0 / (1.0 / vh + 1.0 / vf);
        let mean = var * (self.beta_hat / vh + self.beta / vf);
        (mean, var)
    }

    /// Optimal drift `v(z, t) = ∂_z (2ε log φ)`.
    pub fn v_opt(&self, z: f64, t: f64) -> f64 {
        let vf = self.v1 + 2.0 * self.eps * (1.0 - t);
        2.0 * self.eps * (self.beta - z) / vf
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_reproduces_hand_computed_symmetric_case() {
        // m0 = -1, m1 = 1, var = 0.25, ε = 0.5: by symmetry
        // v = -0.25 + sqrt(0.3125) and β = v(v + 1)/0.25 · 1/... with the
        // values worked out by hand:
        let b = GaussianBridge1d::solve(-1.0, 0.25, 1.0, 0.25, 0.5);
        let v_expected = -0.25 + 0.3125_f64.sqrt();
        assert!((b.v_hat0 - v_expected).abs() < 1e-12, "{}", b.v_hat0);
        assert!((b.v1 - v_expected).abs() < 1e-12);
        let beta_expected = v_expected * (v_expected + 1.0) / (2.0 * 0.5 * 0.25);
        assert!((b.beta - beta_expected).abs() < 1e-10, "{}", b.beta);
        assert!((b.beta_hat + beta_expected).abs() < 1e-10);
        // endpoints reproduce the data
        let (m, v) = b.mean_var(0.0);
        assert!((m + 1.0).abs() < 1e-10 && (v - 0.25).abs() < 1e-12);
        let (m, v) = b.mean_var(1.0);
        assert!((m - 1.0).abs() < 1e-10 && (v - 0.25).abs() < 1e-12);
        // midpoint from the hand computation
        let (m, v) = b.mean_var(0.5);
        assert!(m.abs() < 1e-12);
        assert!((v - 0.40450849718747).abs() < 1e-10, "{v}");
    }

    #[test]
    fn oracle_handles_asymmetric_variances() {
        let b = GaussianBridge1d::solve(-0.5, 0.16, 1.2, 0.36, 0.3);
        let (m0, v0) = b.mean_var(0.0);
        assert!((m0 + 0.5).abs() < 1e-9 && (v0 - 0.16).abs() < 1e-10);
        let (m1, v1) = b.mean_var(1.0);
        assert!((m1 - 1.2).abs() < 1e-9 && (v1 - 0.36).abs() < 1e-10);
    }
}
