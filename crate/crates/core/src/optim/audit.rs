//! Central finite-difference check of [`loss_gradient`](super::loss_gradient).

use serde::Serialize;

use super::{kink_signature, loss_gradient, total_loss, LossTarget, Prediction, ScaleStrategy};
use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates where a ±h step crosses an L1 kink or changes the median pixel.
    pub skipped_kinks: usize,
    /// (coordinate, analytic, numeric) for the worst coordinate.
    pub worst: Option<(usize, f64, f64)>,
}

/// Relative error with a floor so that two vanishing derivatives compare equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < 1e-9 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Compares the analytic gradient with `(f(x + h) - f(x - h)) / 2h` on every
/// coordinate whose ±h neighbourhood stays on one linear piece of the L1 terms.
pub fn gradient_audit(
    target: &LossTarget,
    pred: &Prediction,
    strategy: ScaleStrategy,
    mu_weight: f64,
    h: f64,
) -> Result<AuditReport> {
    let (_, grad) = loss_gradient(target, pred, strategy, mu_weight)?;
    let analytic: Vec<f64> = grad.coords().collect();
    let base_sig = kink_signature(target, pred, strategy)?;

    let mut report = AuditReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
        worst: None,
    };
    let mut probe = pred.clone();
    for (idx, &a) in analytic.iter().enumerate() {
        let x0 = *probe.coord_mut(idx);
        *probe.coord_mut(idx) = x0 + h;
        let sig_plus = kink_signature(target, &probe, strategy)?;
        let f_plus = total_loss(target, &probe, strategy, mu_weight)?.total;
        *probe.coord_mut(idx) = x0 - h;
        let sig_minus = kink_signature(target, &probe, strategy)?;
        let f_minus = total_loss(target, &probe, strategy, mu_weight)?.total;
        *probe.coord_mut(idx) = x0;

        if sig_plus != base_sig || sig_minus != base_sig {
            report.skipped_kinks += 1;
            continue;
        }
        let numeric = (f_plus - f_minus) / (2.0 * h);
        let err = relative_error(a, numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = err.max(report.max_rel_error);
            report.worst = Some((idx, a, numeric));
        }
    }
    Ok(report)
}
