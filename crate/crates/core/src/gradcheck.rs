//! Finite-difference utilities for verifying analytic gradients.
//!
//! These helpers never touch the reverse-mode machinery: they only evaluate
//! caller-provided loss closures, so they stay an independent oracle for it.

use crate::error::Result;

/// Central difference `(f(x+h) - f(x-h)) / 2h`.
pub fn central_difference(mut f: impl FnMut(f64) -> Result<f64>, x0: f64, h: f64) -> Result<f64> {
    let hi = f(x0 + h)?;
    let lo = f(x0 - h)?;
    Ok((hi - lo) / (2.0 * h))
}

/// Relative error with an absolute floor of `1e-5` in the denominator, so
/// that near-zero gradient pairs are compared absolutely instead of
/// amplifying finite-difference roundoff.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-5);
    (a - b).abs() / denom
}

/// Worst entry found by a gradient check, for diagnostics.
#[derive(Debug, Clone, Default)]
pub struct WorstEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

impl WorstEntry {
    pub fn update(&mut self, param: &str, index: usize, analytic: f64, numeric: f64) {
        let rel = relative_error(analytic, numeric);
        if rel > self.rel_err {
            self.param = param.to_string();
            self.index = index;
            self.analytic = analytic;
            self.numeric = numeric;
            self.rel_err = rel;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_difference_of_square() {
        let fd = central_difference(|x| Ok(x * x), 3.0, 1e-5).unwrap();
        assert!((fd - 6.0).abs() < 1e-8);
    }

    #[test]
    fn relative_error_floors_small_values() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!(relative_error(1e-9, -1e-9) < 1e-3);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-12);
    }
}
