//! Quasi-random probe points for the numerical "identically zero" and
//! constant-dimension checks. Halton sequences give low-discrepancy
//! coverage of a box around the expansion point without an RNG.

const PRIMES: [u64; 8] = [2, 3, 5, 7, 11, 13, 17, 19];

fn halton(mut index: u64, base: u64) -> f64 {
    let mut f = 1.0;
    let mut r = 0.0;
    while index > 0 {
        f /= base as f64;
        r += f * (index % base) as f64;
        index /= base;
    }
    r
}

/// `count` Halton points in the cube of half-width `radius` centered at
/// `center`. Dimensions beyond the prime table wrap around, which is fine
/// at the state dimensions this crate targets.
pub fn probe_points(center: &[f64], radius: f64, count: usize) -> Vec<Vec<f64>> {
    let dim = center.len();
    (0..count)
        .map(|i| {
            (0..dim)
                .map(|d| {
                    let u = halton(i as u64 + 1, PRIMES[d % PRIMES.len()]);
                    center[d] + radius * (2.0 * u - 1.0)
                })
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn points_stay_in_box() {
        let pts = probe_points(&[1.0, -2.0], 0.5, 64);
        assert_eq!(pts.len(), 64);
        for p in &pts {
            assert!((p[0] - 1.0).abs() <= 0.5);
            assert!((p[1] + 2.0).abs() <= 0.5);
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(
            probe_points(&[0.0], 1.0, 8),
            probe_points(&[0.0], 1.0, 8)
        );
    }
}
