//! Error metrics for reconstructed channel responses.

use crate::CMat;

/// Normalized mean square error `||est - truth||_F^2 / ||truth||_F^2`.
///
/// Panics when the reference has zero energy; callers score an absent
/// estimate as 1.0 themselves rather than dividing by zero here.
pub fn nmse(est: &CMat, truth: &CMat) -> f64 {
    assert_eq!(est.shape(), truth.shape(), "NMSE operands must match");
    let denom = truth.norm_squared();
    assert!(denom > 0.0, "NMSE reference must have positive energy");
    (est - truth).norm_squared() / denom
}

/// NMSE restricted to the subcarrier rows `[start, end)`, i.e. one
/// bandwidth part of a full-band response.
pub fn nmse_rows(est: &CMat, truth: &CMat, start: usize, end: usize) -> f64 {
    assert_eq!(est.shape(), truth.shape(), "NMSE operands must match");
    assert!(start < end && end <= truth.nrows(), "row range out of bounds");
    let mut num = 0.0;
    let mut denom = 0.0;
    for r in start..end {
        for c in 0..truth.ncols() {
            num += (est[(r, c)] - truth[(r, c)]).norm_sqr();
            denom += truth[(r, c)].norm_sqr();
        }
    }
    assert!(denom > 0.0, "NMSE reference must have positive energy");
    num / denom
}

/// Time-averaged NMSE: the arithmetic mean of per-slot NMSE values.
pub fn tnmse(per_slot: &[f64]) -> f64 {
    assert!(!per_slot.is_empty(), "TNMSE needs at least one slot");
    per_slot.iter().sum::<f64>() / per_slot.len() as f64
}
