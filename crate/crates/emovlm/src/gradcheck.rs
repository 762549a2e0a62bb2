//! Central finite-difference verification of analytic gradients.
//!
//! The numeric side re-runs the forward pass only, so it stays independent of
//! the backward implementation it checks. Checks run in double precision
//! with step `h = 1e-5` and require relative error at most `1e-4` on every
//! probed coordinate.

use crate::params::ParamStore;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;

/// Gradient magnitude below which a coordinate is compared absolutely
/// instead of relatively; central differences on O(1) losses carry ~1e-9
/// noise, which would swamp a relative test against a near-zero gradient.
pub const NEGLIGIBLE: f64 = 1e-5;

/// Central difference of `eval` along one coordinate of a named parameter.
pub fn central_diff(
    store: &ParamStore,
    name: &str,
    idx: (usize, usize),
    h: f64,
    mut eval: impl FnMut(&ParamStore) -> f64,
) -> f64 {
    let mut s = store.clone();
    s.get_mut(name)[[idx.0, idx.1]] += h;
    let plus = eval(&s);
    s.get_mut(name)[[idx.0, idx.1]] -= 2.0 * h;
    let minus = eval(&s);
    (plus - minus) / (2.0 * h)
}

/// Relative error with a floor that keeps FD noise on negligible gradients
/// from exploding the ratio; exact agreement of two negligible values is 0.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let mag = analytic.abs().max(numeric.abs());
    if mag < NEGLIGIBLE {
        // both effectively zero: compare absolutely against the noise floor
        return if (analytic - numeric).abs() <= 1e-7 {
            0.0
        } else {
            1.0
        };
    }
    (analytic - numeric).abs() / mag
}
