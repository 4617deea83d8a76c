//! Dense numeric primitives shared by the routing stack: row-major matrices,
//! a numerically stable softmax, a seeded deterministic generator, and the
//! central-difference oracle used to certify analytic gradients.
//!
//! Conventions
//!   * every quantity is `f64`; public entry points reject NaN and infinities
//!   * vectors are plain `Vec<f64>` slices, matrices are row-major
//!   * `softmax(x, T)` stabilizes by subtracting the max logit before the
//!     temperature division, so adding a constant to all logits cannot
//!     overflow and, when the additions are exact, leaves the output
//!     bit-identical

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Rejects slices containing NaN or infinities.
pub fn ensure_finite(what: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { what });
    }
    Ok(())
}

/// Rejects slices that are not probability vectors: entries must be finite,
/// nonnegative, and sum to one within 1e-9.
pub(crate) fn check_simplex(what: &'static str, pi: &[f64]) -> Result<()> {
    if pi.is_empty() {
        return Err(Error::EmptyInput { what });
    }
    ensure_finite(what, pi)?;
    if pi.iter().any(|&p| p < 0.0) {
        return Err(Error::InvalidConfig {
            reason: format!("{what}: negative probability"),
        });
    }
    let sum: f64 = pi.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig {
            reason: format!("{what}: probabilities sum to {sum}, not 1"),
        });
    }
    Ok(())
}

/// Inner product of two equal-length slices.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Sum of squared entries, no validation. Hot-path form of `l2_norm_squared`.
pub(crate) fn l2sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Squared Euclidean norm. Zero exactly when `v` is the zero vector.
pub fn l2_norm_squared(v: &[f64]) -> Result<f64> {
    ensure_finite("l2_norm_squared input", v)?;
    Ok(l2sq(v))
}

/// Softmax with temperature: `out_i = exp((x_i - max x) / T) / sum`.
///
/// The max subtraction happens before the temperature division, so the
/// largest exponent is always zero and the normalizer is at least one.
/// Output entries are strictly positive and sum to one up to rounding.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::EmptyInput {
            what: "softmax logits",
        });
    }
    ensure_finite("softmax logits", logits)?;
    if !temperature.is_finite() || temperature <= 0.0 {
        return Err(Error::NonPositive {
            what: "softmax temperature",
            value: temperature,
        });
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .map(|&z| ((z - max) / temperature).exp())
        .collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` per coordinate.
///
/// `f` must be smooth near `x` at scale `h`; the caller is responsible for
/// staying away from selection boundaries and other kinks.
pub fn finite_difference_gradient<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !h.is_finite() || h <= 0.0 {
        return Err(Error::NonPositive {
            what: "finite-difference step",
            value: h,
        });
    }
    ensure_finite("finite_difference_gradient point", x)?;
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                what: "finite-difference evaluation",
            });
        }
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Matrix> {
        if data.len() != rows * cols {
            return Err(Error::DimMismatch {
                what: "matrix data",
                expected: rows * cols,
                got: data.len(),
            });
        }
        ensure_finite("matrix data", &data)?;
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Matrix {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    /// Row-vector product `y = x M` for `x` of length `rows`; `y` has length `cols`.
    pub fn vecmat(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.rows, "vecmat: input length mismatch");
        let mut y = vec![0.0; self.cols];
        for (i, &xi) in x.iter().enumerate() {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            for (yj, &mij) in y.iter_mut().zip(row) {
                *yj += xi * mij;
            }
        }
        y
    }

    /// Matrix-vector product `y = M v` for `v` of length `cols`; `y` has length `rows`.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols, "matvec: input length mismatch");
        self.data.chunks_exact(self.cols).map(|row| dot(row, v)).collect()
    }

    /// Rank-one update `M[i][j] += scale * x[i] * y[j]`.
    pub fn add_outer(&mut self, x: &[f64], y: &[f64], scale: f64) {
        assert_eq!(x.len(), self.rows, "add_outer: row factor mismatch");
        assert_eq!(y.len(), self.cols, "add_outer: col factor mismatch");
        for (i, &xi) in x.iter().enumerate() {
            let s = scale * xi;
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (mij, &yj) in row.iter_mut().zip(y) {
                *mij += s * yj;
            }
        }
    }
}

/// Deterministic generator used everywhere randomness is needed.
///
/// Backed by ChaCha8 keyed with the 64-bit seed. ChaCha is a counter-based
/// stream, so identical seeds reproduce identical draws on every platform,
/// independent of call-site layout. All derived draws (uniform, normal,
/// shuffle, simplex) are built from `next_u64` with the fixed formulas below,
/// never from platform-dependent code paths.
#[derive(Debug, Clone)]
pub struct Rng {
    state: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Rng {
        Rng {
            state: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state.next_u64()
    }

    /// Uniform in `[0, 1)` using the top 53 bits of one `u64` draw.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[lo, hi)`.
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller: `sqrt(-2 ln u1) * cos(2 pi u2)`
    /// with `u1` in `(0, 1]`. Two uniform draws per sample.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform index in `[0, n)` by 128-bit multiply-shift.
    pub fn index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.index(i + 1);
            xs.swap(i, j);
        }
    }

    /// Uniform sample from the probability simplex: normalized i.i.d.
    /// exponentials `x_i = -ln(1 - u_i)`.
    pub fn simplex(&mut self, n: usize) -> Vec<f64> {
        debug_assert!(n > 0);
        let mut x: Vec<f64> = (0..n).map(|_| -(1.0 - self.uniform()).ln()).collect();
        let sum: f64 = x.iter().sum();
        for v in &mut x {
            *v /= sum;
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // The proptest prelude re-exports a trait with the same name.
    use super::Rng;

    #[test]
    fn softmax_equal_logits_is_uniform() {
        let pi = softmax(&[5.0, 5.0], 1.0).unwrap();
        assert_eq!(pi, vec![0.5, 0.5]);
        for c in [-300.0f64, -7.0, 0.0, 12.0, 250.0] {
            let pi = softmax(&[5.0 + c, 5.0 + c], 1.0).unwrap();
            assert_eq!(pi, vec![0.5, 0.5]);
        }
    }

    #[test]
    fn softmax_two_to_one_ratio() {
        let pi = softmax(&[2.0f64.ln(), 0.0], 1.0).unwrap();
        assert!((pi[0] - 2.0 / 3.0).abs() <= 1e-12);
        assert!((pi[1] - 1.0 / 3.0).abs() <= 1e-12);
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(matches!(
            softmax(&[], 1.0),
            Err(Error::EmptyInput { .. })
        ));
        assert!(matches!(
            softmax(&[f64::NAN, 0.0], 1.0),
            Err(Error::NonFinite { .. })
        ));
        assert!(matches!(
            softmax(&[0.0, 1.0], 0.0),
            Err(Error::NonPositive { .. })
        ));
        assert!(matches!(
            softmax(&[0.0, 1.0], -2.0),
            Err(Error::NonPositive { .. })
        ));
    }

    #[test]
    fn softmax_extreme_logits_stay_finite() {
        let pi = softmax(&[700.0, -700.0, 0.0], 1.0).unwrap();
        assert!(pi.iter().all(|p| p.is_finite()));
        assert!((pi.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert!(pi[0] > 0.999_999);
    }

    #[test]
    fn softmax_shift_invariance_exact_on_exact_additions() {
        // Integer logits plus integer shifts round-trip exactly, so the
        // stabilized form must give bit-identical output.
        let x = [3.0, -1.0, 0.0, 7.0];
        let base = softmax(&x, 1.0).unwrap();
        for c in [-1048576.0f64, -17.0, 1.0, 4096.0] {
            let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
            assert_eq!(softmax(&shifted, 1.0).unwrap(), base);
        }
    }

    #[test]
    fn l2_norm_squared_examples() {
        assert_eq!(l2_norm_squared(&[]).unwrap(), 0.0);
        assert_eq!(l2_norm_squared(&[0.0, 0.0]).unwrap(), 0.0);
        let v = [0.4, 0.1, 0.3, 0.2];
        assert!((l2_norm_squared(&v).unwrap() - 0.30).abs() <= 1e-12);
        assert!(l2_norm_squared(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn finite_difference_matches_softmax_jacobian_row() {
        // d softmax_0 / dx at x = [0, 0] is [1/4, -1/4].
        let f = |x: &[f64]| softmax(x, 1.0).unwrap()[0];
        let g = finite_difference_gradient(f, &[0.0, 0.0], 1e-6).unwrap();
        assert!((g[0] - 0.25).abs() <= 1e-8);
        assert!((g[1] + 0.25).abs() <= 1e-8);
    }

    #[test]
    fn finite_difference_rejects_bad_step_and_values() {
        let f = |_: &[f64]| 1.0;
        assert!(finite_difference_gradient(f, &[0.0], 0.0).is_err());
        assert!(finite_difference_gradient(f, &[0.0], -1e-5).is_err());
        let bad = |_: &[f64]| f64::NAN;
        assert!(finite_difference_gradient(bad, &[0.0], 1e-5).is_err());
    }

    #[test]
    fn matrix_shape_checks() {
        assert!(Matrix::new(2, 3, vec![0.0; 5]).is_err());
        let m = Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m.vecmat(&[1.0, 0.0]), vec![1.0, 2.0]);
        assert_eq!(m.vecmat(&[0.0, 1.0]), vec![3.0, 4.0]);
        assert_eq!(m.matvec(&[1.0, 0.0]), vec![1.0, 3.0]);
    }

    #[test]
    fn matrix_add_outer_accumulates() {
        let mut m = Matrix::zeros(2, 3);
        m.add_outer(&[1.0, 2.0], &[1.0, 0.0, -1.0], 0.5);
        assert_eq!(m.get(0, 0), 0.5);
        assert_eq!(m.get(1, 2), -1.0);
    }

    #[test]
    fn rng_streams_are_reproducible() {
        let mut a = Rng::new(7);
        let mut b = Rng::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = Rng::new(8);
        assert_ne!(Rng::new(7).next_u64(), c.next_u64());
    }

    #[test]
    fn rng_simplex_is_a_distribution() {
        let mut rng = Rng::new(3);
        for n in 1..20 {
            let pi = rng.simplex(n);
            assert_eq!(pi.len(), n);
            assert!(pi.iter().all(|&p| p > 0.0));
            assert!((pi.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn rng_shuffle_hits_all_permutations_of_three() {
        // Sanity, not a statistical test: all six orders appear.
        let mut rng = Rng::new(11);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..200 {
            let mut v = [0usize, 1, 2];
            rng.shuffle(&mut v);
            seen.insert(v);
        }
        assert_eq!(seen.len(), 6);
    }

    proptest! {
        #[test]
        fn softmax_is_a_probability_vector(
            xs in proptest::collection::vec(-40.0f64..40.0, 1..12),
            t in 0.1f64..10.0,
        ) {
            let pi = softmax(&xs, t).unwrap();
            prop_assert!(pi.iter().all(|&p| p > 0.0 && p <= 1.0));
            prop_assert!((pi.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn softmax_shift_invariance_within_rounding(
            xs in proptest::collection::vec(-30.0f64..30.0, 2..10),
            c in -30.0f64..30.0,
            t in 0.25f64..4.0,
        ) {
            let base = softmax(&xs, t).unwrap();
            let shifted: Vec<f64> = xs.iter().map(|v| v + c).collect();
            let moved = softmax(&shifted, t).unwrap();
            for (a, b) in base.iter().zip(&moved) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn softmax_sharpens_as_temperature_drops(
            xs in proptest::collection::vec(-10.0f64..10.0, 2..10),
            t_low in 0.2f64..1.0,
            scale in 1.5f64..8.0,
        ) {
            let t_high = t_low * scale;
            let sharp = softmax(&xs, t_low).unwrap();
            let smooth = softmax(&xs, t_high).unwrap();
            prop_assert!(l2sq(&sharp) >= l2sq(&smooth) - 1e-12);
        }

        #[test]
        fn finite_difference_matches_quadratic_gradient(
            xs in proptest::collection::vec(-3.0f64..3.0, 1..6),
        ) {
            // f(x) = sum_i (i + 1) x_i^2 has gradient 2 (i + 1) x_i.
            let f = |x: &[f64]| {
                x.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v * v).sum::<f64>()
            };
            let g = finite_difference_gradient(f, &xs, 1e-5).unwrap();
            for (i, (gi, xi)) in g.iter().zip(&xs).enumerate() {
                let expect = 2.0 * (i as f64 + 1.0) * xi;
                prop_assert!((gi - expect).abs() <= 1e-6);
            }
        }
    }
}
