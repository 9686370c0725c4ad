//! Across-seed summaries.

use statrs::distribution::{ContinuousCDF, StudentsT};

/// Mean with a two-sided 95% Student-t interval.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    /// Half-width of the interval; zero when `n < 2`.
    pub half_width: f64,
}

impl Summary {
    pub fn low(&self) -> f64 {
        self.mean - self.half_width
    }

    pub fn high(&self) -> f64 {
        self.mean + self.half_width
    }

    /// A single observation gives no spread estimate.
    pub fn degenerate(&self) -> bool {
        self.n < 2
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// `None` for an empty sample.
pub fn summarize(xs: &[f64]) -> Option<Summary> {
    let n = xs.len();
    if n == 0 {
        return None;
    }
    let m = mean(xs);
    if n == 1 {
        return Some(Summary {
            n,
            mean: m,
            half_width: 0.0,
        });
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.975);
    Some(Summary {
        n,
        mean: m,
        half_width: t * (var / n as f64).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_samples_have_zero_width() {
        let s = summarize(&[2.0, 2.0]).unwrap();
        assert_eq!((s.mean, s.half_width), (2.0, 0.0));
    }

    #[test]
    fn single_sample_is_degenerate() {
        let s = summarize(&[3.5]).unwrap();
        assert!(s.degenerate());
        assert_eq!(s.low(), 3.5);
        assert!(summarize(&[]).is_none());
    }

    #[test]
    fn two_point_interval() {
        // t(0.975, 1) = 12.7062; sd = √2, se = 1
        let s = summarize(&[0.0, 2.0]).unwrap();
        assert!((s.half_width - 12.706_204_736).abs() < 1e-6);
    }
}
