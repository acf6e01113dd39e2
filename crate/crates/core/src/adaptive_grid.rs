//! Per-pixel elliptical resampling coordinates.
//!
//! A unit circle around a target pixel is carried by the local Jacobian `J`
//! of the backward map onto the ellipse `{J·c : |c| = 1}` in the source
//! image. Its principal axes give a locally adapted basis in which window
//! offsets are measured.

use crate::error::{Error, Result};
use crate::xform::Jacobian2;

/// Relative axis gap below which the ellipse is treated as a circle.
const CIRCLE_TOL: f64 = 1e-10;

/// Principal axes of the ellipse `J · S¹`.
///
/// `a` is attached to `e_x = (a cos ω, a sin ω)` and `b` to
/// `e_y = (-b sin ω, b cos ω)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptiveBasis {
    pub a: f64,
    pub b: f64,
    pub omega: f64,
    pub e_x: [f64; 2],
    pub e_y: [f64; 2],
}

impl AdaptiveBasis {
    pub fn new(a: f64, b: f64, omega: f64) -> Self {
        let (s, c) = omega.sin_cos();
        Self {
            a,
            b,
            omega,
            e_x: [a * c, a * s],
            e_y: [-b * s, b * c],
        }
    }

    pub fn identity() -> Self {
        Self::new(1.0, 1.0, 0.0)
    }
}

/// Ellipse parameters of the Jacobian image of the unit circle.
///
/// With `J = (u v)`, the ellipse satisfies
/// `1/A² + 1/B² = ‖J‖²_F / D²` and
/// `(cos 2ω, sin 2ω)·(1/A² − 1/B²) = (c − a, −2b) / D²`, where
/// `a = u_x² + v_x²`, `c = u_y² + v_y²`, `b = u_x u_y + v_x v_y` and `D = det J`.
/// Eliminating ω between the last two identities gives
/// `A² = (‖J‖²_F + R) / 2` with `R = √((a − c)² + 4b²)`, and `B = |D| / A`.
pub fn principal_axes(j: &Jacobian2) -> Result<AdaptiveBasis> {
    let det = j.det();
    if !(det.abs() > 1e-12) || !det.is_finite() {
        return Err(Error::SingularJacobian { det });
    }
    let [ux, uy] = j.u;
    let [vx, vy] = j.v;
    let a = ux * ux + vx * vx;
    let c = uy * uy + vy * vy;
    let b = ux * uy + vx * vy;
    let frob2 = a + c;
    let gap = (a - c).hypot(2.0 * b);
    if gap <= CIRCLE_TOL * frob2 {
        let r = det.abs().sqrt();
        return Ok(AdaptiveBasis::new(r, r, 0.0));
    }
    let omega = 0.5 * (2.0 * b).atan2(a - c);
    let major = (0.5 * (frob2 + gap)).sqrt();
    Ok(AdaptiveBasis::new(major, det.abs() / major, omega))
}

/// Expresses `o` in the ellipse basis: `diag(1/A, 1/B) · R(-ω) · o`.
pub fn adapt_offset(o: [f64; 2], basis: &AdaptiveBasis) -> [f64; 2] {
    let (s, c) = basis.omega.sin_cos();
    [(c * o[0] + s * o[1]) / basis.a, (-s * o[0] + c * o[1]) / basis.b]
}

/// Rescales `o` to the length it has in the ellipse basis, keeping its direction.
pub fn rescale_offset(o: [f64; 2], basis: &AdaptiveBasis) -> [f64; 2] {
    let norm = o[0].hypot(o[1]);
    if norm == 0.0 {
        return [0.0, 0.0];
    }
    let adapted = adapt_offset(o, basis);
    let k = adapted[0].hypot(adapted[1]) / norm;
    [k * o[0], k * o[1]]
}
