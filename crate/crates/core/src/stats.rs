//! Monte Carlo summaries. Accumulation is always in `f64`.

use serde::Serialize;

/// A value with its standard error; `se == 0` marks an exact value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
    pub n: u64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Estimate { value, se: 0.0, n: 0 }
    }

    pub fn from_samples(xs: &[f64]) -> Self {
        let mut acc = Welford::default();
        xs.iter().for_each(|&x| acc.push(x));
        acc.estimate()
    }

    /// Sum of independent estimates.
    pub fn add(self, other: Estimate) -> Estimate {
        Estimate {
            value: self.value + other.value,
            se: self.se.hypot(other.se),
            n: self.n.max(other.n),
        }
    }

    pub fn scale(self, c: f64) -> Estimate {
        Estimate { value: c * self.value, se: c.abs() * self.se, n: self.n }
    }
}

/// Streaming mean and variance.
#[derive(Debug, Clone, Copy, Default)]
pub struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn estimate(&self) -> Estimate {
        let se = if self.n < 2 { 0.0 } else { (self.variance() / self.n as f64).sqrt() };
        Estimate { value: self.mean, se, n: self.n }
    }
}

/// Unbiased sample variance with its standard error from the fourth
/// central moment.
pub fn variance_estimate(xs: &[f64]) -> Estimate {
    let n = xs.len();
    if n < 4 {
        return Estimate { value: 0.0, se: f64::INFINITY, n: n as u64 };
    }
    let nf = n as f64;
    let mean = xs.iter().sum::<f64>() / nf;
    let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / nf;
    let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / nf;
    let s2 = m2 * nf / (nf - 1.0);
    let var_of_s2 = (m4 - m2 * m2 * (nf - 3.0) / (nf - 1.0)) / nf;
    Estimate { value: s2, se: var_of_s2.max(0.0).sqrt(), n: n as u64 }
}

/// Welch statistic `(a - b) / sqrt(se_a² + se_b²)`; 0 when both are exact
/// and equal, infinite when both are exact and differ.
pub fn welch_z(a: &Estimate, b: &Estimate) -> f64 {
    let d = a.value - b.value;
    let s = a.se.hypot(b.se);
    if s > 0.0 {
        d / s
    } else if d == 0.0 {
        0.0
    } else {
        d.signum() * f64::INFINITY
    }
}
