use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use super::MetricError;

pub const SIGNIFICANCE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: usize,
    /// One-tailed, alternative `mean(a - b) > 0`.
    pub p: f64,
    pub significant: bool,
}

/// Paired one-tailed t-test on `d = a - b` with `n - 1` degrees of freedom.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(MetricError::TooFew { need: 2, got: n });
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var <= 0.0 || d.iter().all(|&x| x == d[0]) {
        return Err(MetricError::ZeroVariance);
    }
    let t = mean / (var.sqrt() / (n as f64).sqrt());
    let df = n - 1;
    let dist = StudentsT::new(0.0, 1.0, df as f64).expect("df is positive");
    let p = dist.sf(t);
    Ok(TTest {
        t,
        df,
        p,
        significant: p < SIGNIFICANCE,
    })
}
