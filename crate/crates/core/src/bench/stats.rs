use std::fmt;

use serde::{Deserialize, Serialize};

/// Mean and sample standard deviation (n - 1 denominator; 0 for one sample).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    /// `None` for an empty slice.
    pub fn of(samples: &[f64]) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        // Welford's update keeps the variance stable for long campaigns.
        let (mut mean, mut m2) = (0.0f64, 0.0f64);
        for (i, x) in samples.iter().enumerate() {
            let d = x - mean;
            mean += d / (i + 1) as f64;
            m2 += d * (x - mean);
        }
        let n = samples.len();
        let std = if n > 1 { (m2 / (n - 1) as f64).max(0.0).sqrt() } else { 0.0 };
        Some(Self { mean, std, n })
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = f.precision().unwrap_or(2);
        write!(f, "{:.p$}±{:.p$}", self.mean, self.std)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_sample_has_zero_std() {
        let m = MeanStd::of(&[3.5]).unwrap();
        assert_eq!((m.mean, m.std, m.n), (3.5, 0.0, 1));
        assert!(MeanStd::of(&[]).is_none());
    }

    #[test]
    fn sample_std_uses_n_minus_one() {
        let m = MeanStd::of(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]).unwrap();
        assert!((m.mean - 5.0).abs() < 1e-12);
        assert!((m.std - (32.0f64 / 7.0).sqrt()).abs() < 1e-12);
        assert_eq!(format!("{m}"), "5.00±2.14");
    }
}
