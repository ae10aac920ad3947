//! Order-insensitive aggregation of per-path results.

/// Neumaier-compensated running sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

pub fn compensated_sum<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let mut s = CompensatedSum::new();
    for x in xs {
        s.add(x);
    }
    s.value()
}

/// Sample moments of `value_i * exp(log_weight_i)`.
///
/// Weights are rescaled by the largest log-weight among nonzero values before
/// exponentiation; `mean` and `variance` are returned on the natural scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedMoments {
    pub mean: f64,
    pub second_moment: f64,
    /// Unbiased sample variance.
    pub variance: f64,
    pub n: usize,
    pub nonzero: usize,
}

impl WeightedMoments {
    pub fn std_error(&self) -> f64 {
        (self.variance / self.n as f64).sqrt()
    }
}

/// `pairs` holds `(value, log_weight)` per path.
pub fn weighted_moments(pairs: &[(f64, f64)]) -> WeightedMoments {
    let n = pairs.len();
    let shift = pairs
        .iter()
        .filter(|(v, _)| *v != 0.0)
        .map(|&(_, lw)| lw)
        .fold(f64::NEG_INFINITY, f64::max);
    let nonzero = pairs.iter().filter(|(v, _)| *v != 0.0).count();
    if nonzero == 0 || n == 0 {
        return WeightedMoments {
            mean: 0.0,
            second_moment: 0.0,
            variance: 0.0,
            n,
            nonzero,
        };
    }
    let mut s1 = CompensatedSum::new();
    let mut s2 = CompensatedSum::new();
    for &(v, lw) in pairs {
        if v != 0.0 {
            let x = v * (lw - shift).exp();
            s1.add(x);
            s2.add(x * x);
        }
    }
    let nf = n as f64;
    let m = s1.value() / nf;
    let q = s2.value() / nf;
    let var_scaled = if n > 1 {
        ((q - m * m) * nf / (nf - 1.0)).max(0.0)
    } else {
        0.0
    };
    let scale = shift.exp();
    WeightedMoments {
        mean: m * scale,
        second_moment: q * scale * scale,
        variance: var_scaled * scale * scale,
        n,
        nonzero,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let xs = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(compensated_sum(xs), 2.0);
    }

    #[test]
    fn unit_weights_reduce_to_bernoulli_moments() {
        let pairs: Vec<(f64, f64)> = (0..10).map(|i| (f64::from(u8::from(i < 3)), 0.0)).collect();
        let m = weighted_moments(&pairs);
        assert!((m.mean - 0.3).abs() < 1e-15);
        assert!((m.variance - 0.3 * 0.7 * 10.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn huge_log_weights_do_not_overflow() {
        let pairs = vec![(1.0, 800.0), (1.0, 800.0 + 2f64.ln()), (0.0, 5000.0)];
        let m = weighted_moments(&pairs);
        assert!(m.mean.is_infinite() || m.mean > 0.0);
        let small = vec![(1.0, -700.0), (1.0, -700.0 + 2f64.ln())];
        let ms = weighted_moments(&small);
        let expect = 1.5 * (-700f64).exp();
        assert!(((ms.mean - expect) / expect).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn aggregation_is_order_insensitive(mut xs in prop::collection::vec((0.0f64..1.0, -30.0f64..30.0), 2..200)) {
            let a = weighted_moments(&xs);
            xs.reverse();
            let b = weighted_moments(&xs);
            prop_assert!((a.mean - b.mean).abs() <= 1e-12 * a.mean.abs().max(1e-300));
            prop_assert!((a.variance - b.variance).abs() <= 1e-12 * a.variance.abs().max(1e-300));
        }
    }
}
