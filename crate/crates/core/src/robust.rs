//! General robust cost function and its IRLS weights.
//!
//! One-parameter family interpolating between plain least squares
//! (`alpha = 2`), Cauchy (`alpha = 0`), and saturating losses (`alpha < 0`);
//! the solver consumes it through `rho` and the first-order reweighting
//! `weight`, applied to per-feature residual norms.

/// Shape `alpha` and scale `c` of the robust cost.
///
/// The `alpha -> 0` limit is an explicit branch (do not pass alpha = 0
/// expecting the general form); `c` must be positive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarronParams {
    pub alpha: f64,
    pub c: f64,
}

impl BarronParams {
    pub fn new(alpha: f64, c: f64) -> Self {
        assert!(c > 0.0, "scale c must be positive");
        assert!(alpha.is_finite(), "alpha must be finite");
        Self { alpha, c }
    }

    /// Supremum of `rho` over r >= 0: `|alpha - 2| / |alpha|` for
    /// `alpha < 0`, unbounded otherwise.
    pub fn rho_sup(&self) -> Option<f64> {
        if self.alpha < 0.0 {
            Some((self.alpha - 2.0).abs() / self.alpha.abs())
        } else {
            None
        }
    }
}

impl Default for BarronParams {
    fn default() -> Self {
        Self {
            alpha: -5.0,
            c: 0.5,
        }
    }
}

/// Robust cost of a nonnegative residual norm `r`.
///
/// alpha = 2: `(r/c)^2 / 2`; alpha = 0: `log((r/c)^2 / 2 + 1)`; otherwise
/// `(|alpha-2|/alpha) * (((r/c)^2/|alpha-2| + 1)^(alpha/2) - 1)`.
pub fn rho(r: f64, p: &BarronParams) -> f64 {
    debug_assert!(r >= 0.0);
    let u = (r / p.c).powi(2);
    if p.alpha == 2.0 {
        0.5 * u
    } else if p.alpha == 0.0 {
        (0.5 * u).ln_1p()
    } else {
        let b = (p.alpha - 2.0).abs();
        // (u/b + 1)^(alpha/2) - 1 via expm1/ln_1p; stays accurate for
        // |alpha| near zero where the direct power cancels badly.
        (b / p.alpha) * (0.5 * p.alpha * (u / b).ln_1p()).exp_m1()
    }
}

/// IRLS weight `w(r) = rho'(r) / r`, continuously extended to
/// `w(0) = 1/c^2`.
///
/// All branches share the closed form `(1/c^2) * ((r/c)^2/|alpha-2| + 1)
/// ^(alpha/2 - 1)` with `|alpha-2| = 2` covering both alpha = 0 and
/// alpha = 2.
pub fn weight(r: f64, p: &BarronParams) -> f64 {
    debug_assert!(r >= 0.0);
    let c_sq = p.c * p.c;
    if p.alpha == 2.0 {
        return 1.0 / c_sq;
    }
    let b = (p.alpha - 2.0).abs();
    let u = (r / p.c).powi(2);
    ((0.5 * p.alpha - 1.0) * (u / b).ln_1p()).exp() / c_sq
}
