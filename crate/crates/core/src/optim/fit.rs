//! Direct minimization of the loss over free per-pixel fields.
//!
//! Each step moves every coordinate against the sign of its gradient by a
//! per-coordinate step length, which grows while the sign is stable and
//! halves when it flips. Directions come from the loss with every `|r|`
//! smoothed to `sqrt(r² + eps²)`, which lets coupled coordinates leave a kink
//! together; acceptance always uses the exact loss, via a backtracking line
//! search on a global multiplier, so the trajectory never increases. When no
//! step is accepted `eps` shrinks tenfold, down to 1e-12.

use serde::{Deserialize, Serialize};

use super::{sgn, smoothed_gradient, total_loss, LossReport, LossTarget, Prediction, ScaleStrategy};
use crate::error::{Error, Result};

const GROW: f64 = 1.2;
const SHRINK: f64 = 0.5;
const MAX_BACKTRACKS: usize = 40;
const DIVERGENCE_RUN: usize = 10;
const EPS_SHRINK: f64 = 0.1;
const MIN_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub steps: usize,
    /// Initial per-coordinate step length, also the initial smoothing width.
    pub step_size: f64,
    pub mu_weight: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            step_size: 0.01,
            mu_weight: super::DEFAULT_MU_WEIGHT,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub prediction: Prediction,
    /// One report per accepted iterate, starting with the initial prediction.
    pub trajectory: Vec<LossReport>,
    /// True when the search stopped before `steps` (zero loss or no descent possible).
    pub converged: bool,
}

pub fn fit_free_parameters(
    target: &LossTarget,
    init: &Prediction,
    strategy: ScaleStrategy,
    config: &FitConfig,
) -> Result<FitOutcome> {
    if !(config.step_size > 0.0) {
        return Err(Error::Config("step size must be positive".into()));
    }
    let mut pred = init.clone();
    let mut eps = config.step_size;
    let (mut report, grad) = smoothed_gradient(target, &pred, strategy, config.mu_weight, eps)?;
    let mut grad: Vec<f64> = grad.coords().collect();
    let mut steps = vec![config.step_size; pred.len()];
    let mut trajectory = vec![report.clone()];
    let mut rising = 0usize;
    let mut converged = false;

    for _ in 0..config.steps {
        if report.total == 0.0 || grad.iter().all(|&g| g == 0.0) {
            converged = true;
            break;
        }
        let direction: Vec<f64> = grad.iter().zip(&steps).map(|(&g, &s)| -s * sgn(g)).collect();

        let mut eta = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let mut candidate = pred.clone();
            for (x, d) in candidate.coords_mut().zip(&direction) {
                *x += eta * d;
            }
            let r = total_loss(target, &candidate, strategy, config.mu_weight)?;
            if r.total <= report.total {
                accepted = Some((candidate, r));
                break;
            }
            eta *= 0.5;
        }
        let Some((candidate, new_report)) = accepted else {
            eps *= EPS_SHRINK;
            if eps < MIN_EPS {
                converged = true;
                break;
            }
            steps.iter_mut().for_each(|s| *s = s.max(eps));
            grad = smoothed_gradient(target, &pred, strategy, config.mu_weight, eps)?
                .1
                .coords()
                .collect();
            continue;
        };

        if new_report.total > report.total {
            rising += 1;
            if rising >= DIVERGENCE_RUN {
                return Err(Error::Diverged(rising));
            }
        } else {
            rising = 0;
        }

        let (_, new_grad) = smoothed_gradient(target, &candidate, strategy, config.mu_weight, eps)?;
        let new_grad: Vec<f64> = new_grad.coords().collect();
        for ((s, &g_old), &g_new) in steps.iter_mut().zip(&grad).zip(&new_grad) {
            *s *= eta;
            let agree = sgn(g_old) * sgn(g_new);
            if agree > 0.0 {
                *s *= GROW;
            } else if agree < 0.0 {
                *s *= SHRINK;
            }
        }
        pred = candidate;
        grad = new_grad;
        report = new_report;
        trajectory.push(report.clone());
    }

    Ok(FitOutcome {
        prediction: pred,
        trajectory,
        converged,
    })
}
