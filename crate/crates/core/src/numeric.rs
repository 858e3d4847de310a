//! Scalar abstraction and the small numerical kernels shared across modules:
//! quadrature rules, spherical Bessel functions and Legendre polynomials.

use std::fmt::Debug;

use num_traits::{Float, FloatConst, FromPrimitive};

/// Floating point scalar the numerical kernels are generic over (`f32`, `f64`).
pub trait Scalar:
    Float + FloatConst + FromPrimitive + Debug + Default + Send + Sync + 'static
{
    /// Lossy conversion from `f64` constants.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).unwrap()
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Trapezoid rule on an arbitrary (sorted) abscissa.
///
/// *Panics* if the arrays have unequal lengths.
pub fn trapezoid<T: Scalar>(x: &[T], y: &[T]) -> T {
    assert_eq!(x.len(), y.len(), "trapezoid: unequal array lengths");
    let half = T::of(0.5);
    x.windows(2)
        .zip(y.windows(2))
        .fold(T::zero(), |acc, (xs, ys)| acc + half * (xs[1] - xs[0]) * (ys[0] + ys[1]))
}

/// Trapezoid weights for an arbitrary sorted abscissa, so that
/// `sum(w[i] * y[i])` equals [`trapezoid`].
pub fn trapezoid_weights<T: Scalar>(x: &[T]) -> Vec<T> {
    let n = x.len();
    let mut w = vec![T::zero(); n];
    if n < 2 {
        return w;
    }
    let half = T::of(0.5);
    for i in 0..n - 1 {
        let h = x[i + 1] - x[i];
        w[i] = w[i] + half * h;
        w[i + 1] = w[i + 1] + half * h;
    }
    w
}

/// Composite Simpson weights on a uniform grid with step `h`.
///
/// An even number of points is handled by closing the last interval with
/// the 3/8 rule.
pub fn simpson_weights<T: Scalar>(n: usize, h: T) -> Vec<T> {
    let mut w = vec![T::zero(); n];
    match n {
        0 => return w,
        1 => return w,
        2 => {
            w[0] = h * T::of(0.5);
            w[1] = h * T::of(0.5);
            return w;
        }
        3 => {
            let third = h / T::of(3.0);
            w[0] = third;
            w[1] = T::of(4.0) * third;
            w[2] = third;
            return w;
        }
        _ => {}
    }
    // Simpson over the first `m` points (odd), 3/8 rule on the last 4 if needed.
    let m = if n % 2 == 1 { n } else { n - 3 };
    let third = h / T::of(3.0);
    for i in 0..m {
        let c = if i == 0 || i == m - 1 {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        w[i] = w[i] + T::of(c) * third;
    }
    if m < n {
        let e = T::of(3.0) * h / T::of(8.0);
        let s = m - 1;
        for (k, c) in [1.0, 3.0, 3.0, 1.0].into_iter().enumerate() {
            w[s + k] = w[s + k] + T::of(c) * e;
        }
    }
    w
}

/// Cumulative trapezoid integral on a uniform grid, starting from zero.
pub fn cumulative_trapezoid<T: Scalar>(y: &[T], dx: T) -> Vec<T> {
    let mut out = Vec::with_capacity(y.len());
    let mut acc = T::zero();
    let half = T::of(0.5);
    for (i, &v) in y.iter().enumerate() {
        if i > 0 {
            acc = acc + half * dx * (y[i - 1] + v);
        }
        out.push(acc);
    }
    out
}

/// Spherical Bessel function of the first kind `j_l(x)` for `x >= 0`.
///
/// Uses the power series below `x = 1` and the closed forms above, which keeps
/// full relative accuracy near the origin for `l <= 2`.
pub fn spherical_bessel_j<T: Scalar>(l: u32, x: T) -> T {
    let x = x.abs();
    if x < T::one() {
        return spherical_bessel_series(l, x);
    }
    let (s, c) = x.sin_cos();
    match l {
        0 => s / x,
        1 => s / (x * x) - c / x,
        2 => (T::of(3.0) / (x * x) - T::one()) * s / x - T::of(3.0) * c / (x * x),
        _ => {
            // Upward recurrence is stable for x > l.
            let mut jm = s / x;
            let mut j = s / (x * x) - c / x;
            for k in 1..l {
                let next = T::of((2 * k + 1) as f64) / x * j - jm;
                jm = j;
                j = next;
            }
            j
        }
    }
}

fn spherical_bessel_series<T: Scalar>(l: u32, x: T) -> T {
    // j_l(x) = x^l sum_k (-x^2/2)^k / (k! (2l+2k+1)!!)
    let mut dfact = 1.0f64;
    for k in 1..=l {
        dfact *= (2 * k + 1) as f64;
    }
    let y = -x * x * T::of(0.5);
    let mut term = T::one() / T::of(dfact);
    let mut sum = term;
    for k in 1..20u32 {
        term = term * y / T::of((k * (2 * l + 2 * k + 1)) as f64);
        sum = sum + term;
        if term.abs() <= T::epsilon() * sum.abs() {
            break;
        }
    }
    sum * x.powi(l as i32)
}

/// Legendre polynomial `P_2(u)`.
#[inline]
pub fn legendre_p2<T: Scalar>(u: T) -> T {
    (T::of(3.0) * u * u - T::one()) * T::of(0.5)
}

/// `1 - cos(x)` without cancellation near zero.
#[inline]
pub fn one_minus_cos<T: Scalar>(x: T) -> T {
    let s = (x * T::of(0.5)).sin();
    T::of(2.0) * s * s
}

/// `n` points logarithmically spaced over `[lo, hi]`.
pub fn logspace<T: Scalar>(lo: T, hi: T, n: usize) -> Vec<T> {
    let (a, b) = (lo.ln(), hi.ln());
    if n == 1 {
        return vec![lo];
    }
    let step = (b - a) / T::of((n - 1) as f64);
    (0..n).map(|i| (a + step * T::of(i as f64)).exp()).collect()
}

/// Linear interpolation on a sorted abscissa; `None` outside the table.
pub fn interp_linear<T: Scalar>(x: &[T], y: &[T], at: T) -> Option<T> {
    if x.is_empty() || at < x[0] || at > x[x.len() - 1] {
        return None;
    }
    let i = x.partition_point(|&v| v <= at);
    if i == 0 {
        return Some(y[0]);
    }
    if i >= x.len() {
        return Some(y[x.len() - 1]);
    }
    let t = (at - x[i - 1]) / (x[i] - x[i - 1]);
    Some(y[i - 1] + t * (y[i] - y[i - 1]))
}

/// Elements per leaf of [`chunked_sum`].
pub const SUM_CHUNK: usize = 4096;

/// Parallel sum of `term(i)` over `0..n` whose rounding does not depend on
/// the thread count: fixed chunks are summed in order, then combined in
/// order.
pub fn chunked_sum<T, F>(n: usize, term: F) -> T
where
    T: std::ops::Add<Output = T> + Default + Send,
    F: Fn(usize) -> T + Sync,
{
    use rayon::prelude::*;
    let parts: Vec<T> = (0..n.div_ceil(SUM_CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut acc = T::default();
            for i in c * SUM_CHUNK..((c + 1) * SUM_CHUNK).min(n) {
                acc = acc + term(i);
            }
            acc
        })
        .collect();
    parts.into_iter().fold(T::default(), |a, b| a + b)
}

/// Binomial coefficient as `u128`, saturating on overflow.
pub fn binomial(n: u64, k: u64) -> u128 {
    let k = k.min(n - k.min(n));
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bessel_series_matches_closed_form_at_switch() {
        for l in 0..3 {
            let below = spherical_bessel_series(l, 0.999_999_f64);
            let above = spherical_bessel_j(l, 1.000_001_f64);
            assert!((below - above).abs() < 1e-6, "l={l}: {below} vs {above}");
        }
    }

    #[test]
    fn bessel_values() {
        assert_eq!(spherical_bessel_j(0, 0.0_f64), 1.0);
        assert_eq!(spherical_bessel_j(2, 0.0_f64), 0.0);
        // j_2(5) from tables
        assert!((spherical_bessel_j(2, 5.0_f64) - 0.134_731_210_085_125_5).abs() < 1e-14);
        assert!((spherical_bessel_j(1, 2.0_f64) - 0.435_397_774_979_992).abs() < 1e-14);
        // recurrence branch
        let j3 = spherical_bessel_j(3, 10.0_f64);
        assert!((j3 - (-0.039_495_844_984_470_33)).abs() < 1e-13, "{j3}");
    }

    #[test]
    fn simpson_integrates_cubics_exactly() {
        for n in [5usize, 6, 7, 10] {
            let h = 1.0 / (n - 1) as f64;
            let w = simpson_weights(n, h);
            let s: f64 = (0..n).map(|i| {
                let x = i as f64 * h;
                w[i] * (x * x * x - 2.0 * x + 1.0)
            }).sum();
            assert!((s - 0.25).abs() < 1e-14, "n={n}: {s}");
        }
    }

    #[test]
    fn trapezoid_weights_agree_with_rule() {
        let x = logspace(0.1_f64, 10.0, 17);
        let y: Vec<f64> = x.iter().map(|v| v.sin()).collect();
        let w = trapezoid_weights(&x);
        let a: f64 = w.iter().zip(&y).map(|(a, b)| a * b).sum();
        assert!((a - trapezoid(&x, &y)).abs() < 1e-14);
    }

    #[test]
    fn chunked_sum_matches_serial_order() {
        let n = 3 * SUM_CHUNK + 17;
        let v: Vec<f64> = (0..n).map(|i| ((i * 7919) % 1000) as f64 * 1e-3 + 1e-9).collect();
        let par = chunked_sum(n, |i| v[i]);
        let serial = v.chunks(SUM_CHUNK).map(|c| c.iter().fold(0.0, |a, b| a + b)).fold(0.0, |a, b| a + b);
        assert_eq!(par.to_bits(), serial.to_bits());
        assert_eq!(chunked_sum(0, |_| 1.0f64), 0.0);
    }

    #[test]
    fn binomials() {
        assert_eq!(binomial(8, 4), 70);
        assert_eq!(binomial(4, 3), 4);
        assert_eq!(binomial(16, 4), 1820);
    }

    #[test]
    fn generic_over_f32() {
        let v = spherical_bessel_j(0, 0.5_f32);
        assert!((v - 0.5_f32.sin() / 0.5).abs() < 1e-6);
        assert!((one_minus_cos(1e-4_f32) - 5e-9).abs() < 1e-12);
    }
}
