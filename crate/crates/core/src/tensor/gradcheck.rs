//! Central finite-difference gradient checking.
//!
//! Used by the test suite as the independent oracle for reverse-mode
//! differentiation: the analytic gradient of a scalar loss is compared
//! against `(f(x+h) - f(x-h)) / 2h` elementwise.

use super::Tensor;

#[derive(Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
}

/// Compare analytic gradients of `build(leaves)` against central finite
/// differences for every element of every leaf.
///
/// The error measure is `|ad - fd| / max(|ad|, |fd|, floor)`; the magnitude
/// floor absorbs f32 forward rounding in the difference quotient (for a
/// loss of size L the quotient carries ~eps_f32 * L / 2h of noise, about
/// 1e-4 for unit-scale losses at h = 1e-3). `build` must be a pure
/// function of the leaf data.
pub fn check_gradients(
    build: &dyn Fn(&[Tensor]) -> Tensor,
    leaves: &[Tensor],
    h: f32,
    rel_tol: f64,
) -> Result<GradCheckReport, String> {
    const FLOOR: f64 = 0.5;
    for l in leaves {
        l.zero_grad();
        l.set_requires_grad(true);
    }
    let loss = build(leaves);
    loss.backward().map_err(|e| e.to_string())?;
    let analytic: Vec<Option<Vec<f32>>> = leaves.iter().map(|l| l.grad()).collect();

    let mut checked = 0usize;
    let mut max_rel = 0.0f64;
    for (li, leaf) in leaves.iter().enumerate() {
        let base = leaf.to_vec();
        let ad = analytic[li]
            .as_ref()
            .ok_or_else(|| format!("leaf {li} received no gradient"))?;
        for e in 0..base.len() {
            let mut plus = base.clone();
            plus[e] += h;
            leaf.set_data(plus);
            let f_plus = build(leaves).item() as f64;
            let mut minus = base.clone();
            minus[e] -= h;
            leaf.set_data(minus);
            let f_minus = build(leaves).item() as f64;
            leaf.set_data(base.clone());

            let fd = (f_plus - f_minus) / (2.0 * h as f64);
            let a = ad[e] as f64;
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(FLOOR);
            if rel > max_rel {
                max_rel = rel;
            }
            if rel > rel_tol {
                return Err(format!(
                    "leaf {li} element {e}: analytic {a:.6e} vs finite-diff {fd:.6e} (rel {rel:.3e})"
                ));
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        checked,
        max_rel_err: max_rel,
    })
}
