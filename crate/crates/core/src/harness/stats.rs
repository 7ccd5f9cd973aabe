use serde::{Deserialize, Serialize};

/// Descriptive statistics of one sample set. `std` is the sample standard
/// deviation (n - 1); quartiles interpolate linearly between order statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Summary {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Summary {
                n,
                mean: f64::NAN,
                std: f64::NAN,
                min: f64::NAN,
                q1: f64::NAN,
                median: f64::NAN,
                q3: f64::NAN,
                max: f64::NAN,
            };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        let mut sorted = xs.to_vec();
        sorted.sort_by(f64::total_cmp);
        Summary {
            n,
            mean,
            std,
            min: sorted[0],
            q1: quantile(&sorted, 0.25),
            median: quantile(&sorted, 0.5),
            q3: quantile(&sorted, 0.75),
            max: sorted[n - 1],
        }
    }
}

/// Quantile of sorted data, interpolating at position `q * (n - 1)`.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Median of unsorted values.
pub fn median(xs: &[f64]) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    quantile(&s, 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn known_values() {
        // Quartiles by linear interpolation of 1..=10: positions 2.25, 4.5, 6.75.
        let s = Summary::from_samples(&[7.0, 1.0, 4.0, 2.0, 9.0, 3.0, 10.0, 5.0, 8.0, 6.0]);
        assert_eq!(s.n, 10);
        assert_eq!(s.mean, 5.5);
        assert!((s.std - (55.0f64 / 6.0).sqrt()).abs() < 1e-12);
        assert_eq!((s.min, s.q1, s.median, s.q3, s.max), (1.0, 3.25, 5.5, 7.75, 10.0));
    }

    #[test]
    fn single_sample() {
        let s = Summary::from_samples(&[0.4]);
        assert_eq!((s.mean, s.std, s.q1, s.q3), (0.4, 0.0, 0.4, 0.4));
    }

    proptest! {
        #[test]
        fn order_statistics_are_consistent(xs in prop::collection::vec(0.0f64..1.0, 1..60)) {
            let s = Summary::from_samples(&xs);
            prop_assert!(s.min <= s.q1 && s.q1 <= s.median && s.median <= s.q3 && s.q3 <= s.max);
            prop_assert!(s.min <= s.mean + 1e-12 && s.mean <= s.max + 1e-12);
        }
    }
}
