//! Scale-adaptive supervision for pointmaps and scene flow.
//!
//! Three L1 terms are combined as `total = l_x + l_s + mu_weight * l_mu`:
//! the pointmap term over both views, the scene-flow term over scene-flow
//! valid pixels, and an optical-flow term obtained by projecting the
//! predicted start and end points. How pointmap and scene-flow residuals are
//! scaled depends on the [`ScaleStrategy`] and the sample's metric flag.
//!
//! All arithmetic here is `f64`; grids are converted on the way in.

mod audit;
mod fit;

pub use audit::{gradient_audit, AuditReport};
pub use fit::{fit_free_parameters, FitConfig, FitOutcome};

use nalgebra::{Matrix2x3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::camera::CameraIntrinsics;
use crate::error::{Error, Result};
use crate::recipe;
use crate::tensors::{FieldGrid, SampleRecord, ValidityMask};

pub const DEFAULT_MU_WEIGHT: f64 = 0.1;

/// How dataset scale is handled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleStrategy {
    /// Rescale predictions by the median ground-truth/prediction norm ratio, then compare raw.
    Align,
    /// Always normalize both sides by their mean point distance.
    Always,
    /// Never normalize; ground truth is treated as metric.
    Never,
    /// Normalize only non-metric samples.
    Xor,
}

impl std::str::FromStr for ScaleStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "align" => Ok(Self::Align),
            "always" => Ok(Self::Always),
            "never" => Ok(Self::Never),
            "xor" => Ok(Self::Xor),
            other => Err(Error::Config(format!("unknown scale strategy `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Metric,
    Normalized,
    Aligned,
}

impl ScaleStrategy {
    pub fn mode(self, metric: bool) -> Mode {
        match self {
            Self::Align => Mode::Aligned,
            Self::Always => Mode::Normalized,
            Self::Never => Mode::Metric,
            Self::Xor if metric => Mode::Metric,
            Self::Xor => Mode::Normalized,
        }
    }
}

/// Residual scaling applied before the L1 norm.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Normalization {
    Raw,
    /// Divide ground truth by `z_gt` and predictions by `z_pred`.
    Scale {
        z_gt: f64,
        z_pred: f64,
    },
    /// Multiply predictions by the fitted scale.
    Align(f64),
}

impl Normalization {
    #[inline]
    fn residual(&self, gt: &Vector3<f64>, pred: &Vector3<f64>) -> Vector3<f64> {
        match *self {
            Normalization::Raw => gt - pred,
            Normalization::Scale { z_gt, z_pred } => gt / z_gt - pred / z_pred,
            Normalization::Align(s) => gt - pred * s,
        }
    }
}

pub type Points = Vec<Vector3<f64>>;

pub fn grid_to_points(grid: &FieldGrid) -> Points {
    (0..grid.len_pixels()).map(|i| grid.point(i)).collect()
}

pub fn points_to_grid(points: &[Vector3<f64>], height: usize, width: usize) -> FieldGrid {
    let mut grid = FieldGrid::zeros(height, width, 3);
    for (i, p) in points.iter().enumerate() {
        grid.set_point(i, p);
    }
    grid
}

/// Ground truth the losses compare against.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTarget {
    pub height: usize,
    pub width: usize,
    pub x1: Points,
    pub x2: Points,
    pub sf: Points,
    pub flow: Vec<Vector2<f64>>,
    pub m_x1: ValidityMask,
    pub m_x2: ValidityMask,
    pub m_sf: ValidityMask,
    pub intrinsics: CameraIntrinsics,
    pub metric: bool,
}

impl LossTarget {
    /// Builds a target from a sample carrying scene flow; pointmaps are
    /// unprojected from its depths.
    pub fn from_sample(sample: &SampleRecord) -> Result<Self> {
        let (sf, m_sf) = sample.sf.as_ref().ok_or_else(|| Error::MissingField("sf".into()))?;
        let (x1, x2) = recipe::gt_pointmaps(sample);
        let flow = sample
            .flow_fwd
            .data()
            .chunks_exact(2)
            .map(|f| Vector2::new(f[0] as f64, f[1] as f64))
            .collect();
        Ok(Self {
            height: sample.height(),
            width: sample.width(),
            x1: grid_to_points(&x1),
            x2: grid_to_points(&x2),
            sf: grid_to_points(sf),
            flow,
            m_x1: sample.m_d1.clone(),
            m_x2: sample.m_d2.clone(),
            m_sf: m_sf.clone(),
            intrinsics: sample.intrinsics,
            metric: sample.metric,
        })
    }

    /// The ground truth itself, as a prediction.
    pub fn oracle(&self) -> Prediction {
        Prediction {
            x1: self.x1.clone(),
            x2: self.x2.clone(),
            sf: self.sf.clone(),
        }
    }
}

/// Predicted pointmaps and CSO scene flow; also used to hold gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub x1: Points,
    pub x2: Points,
    pub sf: Points,
}

impl Prediction {
    pub fn zeros(n: usize) -> Self {
        Self {
            x1: vec![Vector3::zeros(); n],
            x2: vec![Vector3::zeros(); n],
            sf: vec![Vector3::zeros(); n],
        }
    }

    pub fn from_grids(x1: &FieldGrid, x2: &FieldGrid, sf: &FieldGrid) -> Self {
        Self {
            x1: grid_to_points(x1),
            x2: grid_to_points(x2),
            sf: grid_to_points(sf),
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        let scale = |v: &Points| v.iter().map(|p| p * s).collect();
        Self {
            x1: scale(&self.x1),
            x2: scale(&self.x2),
            sf: scale(&self.sf),
        }
    }

    /// Number of scalar coordinates (9 per pixel).
    pub fn len(&self) -> usize {
        9 * self.x1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x1.is_empty()
    }

    pub fn coords(&self) -> impl Iterator<Item = f64> + '_ {
        self.x1
            .iter()
            .chain(&self.x2)
            .chain(&self.sf)
            .flat_map(|v| v.iter().copied())
    }

    pub fn coords_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.x1
            .iter_mut()
            .chain(self.x2.iter_mut())
            .chain(self.sf.iter_mut())
            .flat_map(|v| v.iter_mut())
    }

    /// Mutable access to coordinate `index` in [`coords`](Self::coords) order.
    pub fn coord_mut(&mut self, index: usize) -> &mut f64 {
        let n = self.x1.len();
        let (field, rest) = (index / (3 * n), index % (3 * n));
        let v = match field {
            0 => &mut self.x1[rest / 3],
            1 => &mut self.x2[rest / 3],
            _ => &mut self.sf[rest / 3],
        };
        &mut v[rest % 3]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_x: f64,
    pub l_s: f64,
    pub l_mu: f64,
    pub total: f64,
    pub z_gt: f64,
    pub z_pred: f64,
    pub strategy: ScaleStrategy,
    pub mu_weight: f64,
    /// Fitted prediction scale, only under [`ScaleStrategy::Align`].
    pub alignment_scale: Option<f64>,
    pub valid_x: usize,
    pub valid_sf: usize,
    /// Scene-flow-valid pixels dropped from `l_mu` for non-positive depth.
    pub mu_excluded: usize,
}

impl LossReport {
    /// Per-valid-pixel means of the three terms, for cross-resolution comparison.
    pub fn means(&self) -> (f64, f64, f64) {
        let div = |a: f64, n: usize| if n == 0 { 0.0 } else { a / n as f64 };
        let mu_n = self.valid_sf.saturating_sub(self.mu_excluded);
        (
            div(self.l_x, self.valid_x),
            div(self.l_s, self.valid_sf),
            div(self.l_mu, mu_n),
        )
    }
}

#[inline]
fn l1(v: &Vector3<f64>) -> f64 {
    v.x.abs() + v.y.abs() + v.z.abs()
}

#[inline]
fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Derivative of the (optionally smoothed) absolute value.
#[inline]
fn dabs(x: f64, eps: f64) -> f64 {
    if eps > 0.0 {
        x / x.hypot(eps)
    } else {
        sgn(x)
    }
}

/// Mean distance from the camera-1 origin over the valid points of both views.
pub fn scale_factor(x1: &[Vector3<f64>], x2: &[Vector3<f64>], m1: &ValidityMask, m2: &ValidityMask) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (points, mask) in [(x1, m1), (x2, m2)] {
        for (i, p) in points.iter().enumerate() {
            if mask.is_valid(i) {
                sum += p.norm();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::NoValidPoints("scale factor needs at least one valid point"));
    }
    Ok(sum / count as f64)
}

/// Median of `a` (sorted in place); even lengths average the middle pair.
pub(crate) fn median_in_place(a: &mut [f64]) -> Option<f64> {
    if a.is_empty() {
        return None;
    }
    a.sort_by(|x, y| x.total_cmp(y));
    let n = a.len();
    Some(if n % 2 == 1 {
        a[n / 2]
    } else {
        0.5 * (a[n / 2 - 1] + a[n / 2])
    })
}

/// Ratios `‖gt‖ / ‖pred‖` over valid pixels of both views with nonzero
/// prediction, tagged by (view, pixel).
fn alignment_ratios(target: &LossTarget, pred: &Prediction) -> Vec<(f64, usize, usize)> {
    let mut ratios = Vec::new();
    for (view, (gt, p, m)) in [
        (&target.x1, &pred.x1, &target.m_x1),
        (&target.x2, &pred.x2, &target.m_x2),
    ]
    .into_iter()
    .enumerate()
    {
        for i in 0..gt.len() {
            let pn = p[i].norm();
            if m.is_valid(i) && pn > 0.0 {
                ratios.push((gt[i].norm() / pn, view, i));
            }
        }
    }
    ratios
}

/// Median ratio of ground-truth to predicted point norms across both views.
pub fn alignment_scale(target: &LossTarget, pred: &Prediction) -> Result<f64> {
    let mut r: Vec<f64> = alignment_ratios(target, pred).into_iter().map(|t| t.0).collect();
    median_in_place(&mut r).ok_or(Error::NoValidPoints("alignment needs a valid nonzero prediction"))
}

/// Resolves the residual scaling for a sample and strategy, also returning
/// `(z_gt, z_pred)` for reporting.
pub fn normalization(
    target: &LossTarget,
    pred: &Prediction,
    strategy: ScaleStrategy,
) -> Result<(Normalization, f64, f64)> {
    let n = target.x1.len();
    for (field, v) in [("x1_hat", &pred.x1), ("x2_hat", &pred.x2), ("sf_hat", &pred.sf)] {
        if v.len() != n {
            return Err(Error::ShapeMismatch {
                field: field.into(),
                expected: n,
                found: v.len(),
            });
        }
    }
    let z_gt = scale_factor(&target.x1, &target.x2, &target.m_x1, &target.m_x2)?;
    let z_pred = scale_factor(&pred.x1, &pred.x2, &target.m_x1, &target.m_x2)?;
    let norm = match strategy.mode(target.metric) {
        Mode::Metric => Normalization::Raw,
        Mode::Normalized => {
            if !(z_gt > 0.0 && z_pred > 0.0) {
                return Err(Error::NoValidPoints("normalization needs nonzero pointmap scales"));
            }
            Normalization::Scale { z_gt, z_pred }
        }
        Mode::Aligned => Normalization::Align(alignment_scale(target, pred)?),
    };
    Ok((norm, z_gt, z_pred))
}

/// Pointmap term over both views.
pub fn loss_pointmaps(target: &LossTarget, pred: &Prediction, norm: Normalization) -> f64 {
    let mut total = 0.0;
    for (gt, p, m) in [
        (&target.x1, &pred.x1, &target.m_x1),
        (&target.x2, &pred.x2, &target.m_x2),
    ] {
        for i in 0..gt.len() {
            if m.is_valid(i) {
                total += l1(&norm.residual(&gt[i], &p[i]));
            }
        }
    }
    total
}

/// Scene-flow term; scaled with the pointmap-derived normalization.
pub fn loss_sceneflow(
    pred_sf: &[Vector3<f64>],
    gt_sf: &[Vector3<f64>],
    m_sf: &ValidityMask,
    norm: Normalization,
) -> f64 {
    (0..gt_sf.len())
        .filter(|&i| m_sf.is_valid(i))
        .map(|i| l1(&norm.residual(&gt_sf[i], &pred_sf[i])))
        .sum()
}

/// Optical-flow term in pixels: `Σ ‖flow - (π(x1 + sf) - π(x1))‖₁`.
/// Returns the loss and the number of valid pixels skipped because a
/// projection had non-positive depth.
pub fn loss_flow(
    pred_x1: &[Vector3<f64>],
    pred_sf: &[Vector3<f64>],
    gt_flow: &[Vector2<f64>],
    m_sf: &ValidityMask,
    k: &CameraIntrinsics,
) -> (f64, usize) {
    let mut total = 0.0;
    let mut excluded = 0;
    for i in 0..gt_flow.len() {
        if !m_sf.is_valid(i) {
            continue;
        }
        let start = pred_x1[i];
        let end = start + pred_sf[i];
        match (k.project_point(&start), k.project_point(&end)) {
            (Some(a), Some(b)) => {
                let r = gt_flow[i] - (b - a);
                total += r.x.abs() + r.y.abs();
            }
            _ => excluded += 1,
        }
    }
    (total, excluded)
}

pub fn total_loss(
    target: &LossTarget,
    pred: &Prediction,
    strategy: ScaleStrategy,
    mu_weight: f64,
) -> Result<LossReport> {
    let (norm, z_gt, z_pred) = normalization(target, pred, strategy)?;
    let l_x = loss_pointmaps(target, pred, norm);
    let l_s = loss_sceneflow(&pred.sf, &target.sf, &target.m_sf, norm);
    let (l_mu, mu_excluded) = loss_flow(&pred.x1, &pred.sf, &target.flow, &target.m_sf, &target.intrinsics);
    Ok(LossReport {
        l_x,
        l_s,
        l_mu,
        total: l_x + l_s + mu_weight * l_mu,
        z_gt,
        z_pred,
        strategy,
        mu_weight,
        alignment_scale: match norm {
            Normalization::Align(s) => Some(s),
            _ => None,
        },
        valid_x: target.m_x1.count_valid() + target.m_x2.count_valid(),
        valid_sf: target.m_sf.count_valid(),
        mu_excluded,
    })
}

/// Jacobian of `π` at `p` (requires `p.z > 0`).
#[inline]
fn projection_jacobian(k: &CameraIntrinsics, p: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / p.z;
    Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * p.x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * p.y * iz * iz,
    )
}

/// Analytic subgradient of [`total_loss`] with respect to every predicted
/// coordinate. L1 kinks use subgradient 0. The chain rule runs through the
/// prediction scale `z_pred` (normalized mode), the fitted median scale
/// (aligned mode) and both projections of the flow term.
pub fn loss_gradient(
    target: &LossTarget,
    pred: &Prediction,
    strategy: ScaleStrategy,
    mu_weight: f64,
) -> Result<(LossReport, Prediction)> {
    smoothed_gradient(target, pred, strategy, mu_weight, 0.0)
}

/// Gradient with every `|r|` replaced by `sqrt(r² + eps²)`; `eps = 0` gives
/// the subgradient of [`loss_gradient`]. The report is always the exact loss.
pub(crate) fn smoothed_gradient(
    target: &LossTarget,
    pred: &Prediction,
    strategy: ScaleStrategy,
    mu_weight: f64,
    eps: f64,
) -> Result<(LossReport, Prediction)> {
    let sgn = |x: f64| dabs(x, eps);
    let sgn3 = |v: &Vector3<f64>| v.map(sgn);
    let report = total_loss(target, pred, strategy, mu_weight)?;
    let n = target.x1.len();
    let mut grad = Prediction::zeros(n);
    let mode = strategy.mode(target.metric);

    // Direct terms. `d_scale` accumulates dL/dz_pred (normalized) or dL/ds (aligned).
    let mut d_scale = 0.0;
    let views = [
        (&target.x1, &pred.x1, &target.m_x1),
        (&target.x2, &pred.x2, &target.m_x2),
    ];
    let scale_of = |z_pred: f64, s: f64| match mode {
        Mode::Metric => Normalization::Raw,
        Mode::Normalized => Normalization::Scale {
            z_gt: report.z_gt,
            z_pred,
        },
        Mode::Aligned => Normalization::Align(s),
    };
    let s_align = report.alignment_scale.unwrap_or(1.0);
    let norm = scale_of(report.z_pred, s_align);
    for (view, (gt, p, m)) in views.iter().enumerate() {
        let g = if view == 0 { &mut grad.x1 } else { &mut grad.x2 };
        for i in 0..n {
            if !m.is_valid(i) {
                continue;
            }
            let sigma = sgn3(&norm.residual(&gt[i], &p[i]));
            match mode {
                Mode::Metric => g[i] -= sigma,
                Mode::Normalized => {
                    g[i] -= sigma / report.z_pred;
                    d_scale += sigma.dot(&p[i]) / (report.z_pred * report.z_pred);
                }
                Mode::Aligned => {
                    g[i] -= sigma * s_align;
                    d_scale -= sigma.dot(&p[i]);
                }
            }
        }
    }
    for i in 0..n {
        if !target.m_sf.is_valid(i) {
            continue;
        }
        let sigma = sgn3(&norm.residual(&target.sf[i], &pred.sf[i]));
        match mode {
            Mode::Metric => grad.sf[i] -= sigma,
            Mode::Normalized => {
                grad.sf[i] -= sigma / report.z_pred;
                d_scale += sigma.dot(&pred.sf[i]) / (report.z_pred * report.z_pred);
            }
            Mode::Aligned => {
                grad.sf[i] -= sigma * s_align;
                d_scale -= sigma.dot(&pred.sf[i]);
            }
        }
    }

    // Scale chain rule.
    match mode {
        Mode::Metric => {}
        Mode::Normalized => {
            // z_pred = Σ M ‖X̂‖ / N
            let count = report.valid_x as f64;
            for (view, (_, p, m)) in views.iter().enumerate() {
                let g = if view == 0 { &mut grad.x1 } else { &mut grad.x2 };
                for i in 0..n {
                    let pn = p[i].norm();
                    if m.is_valid(i) && pn > 0.0 {
                        g[i] += p[i] * (d_scale / (pn * count));
                    }
                }
            }
        }
        Mode::Aligned => {
            // s = median of ‖X‖/‖X̂‖; only the middle element(s) move it.
            let mut ratios = alignment_ratios(target, pred);
            ratios.sort_by(|a, b| a.0.total_cmp(&b.0));
            let len = ratios.len();
            let middle: Vec<(usize, f64)> = if len % 2 == 1 {
                vec![(len / 2, 1.0)]
            } else {
                vec![(len / 2 - 1, 0.5), (len / 2, 0.5)]
            };
            for (idx, weight) in middle {
                let (_, view, i) = ratios[idx];
                let (gt, p) = if view == 0 {
                    (&target.x1, &pred.x1)
                } else {
                    (&target.x2, &pred.x2)
                };
                let pn = p[i].norm();
                // d(‖X‖/‖X̂‖)/dX̂ = -‖X‖ X̂ / ‖X̂‖³
                let dr = -p[i] * (gt[i].norm() / (pn * pn * pn));
                let g = if view == 0 { &mut grad.x1 } else { &mut grad.x2 };
                g[i] += dr * (weight * d_scale);
            }
        }
    }

    // Flow term through both projections.
    let k = &target.intrinsics;
    for i in 0..n {
        if !target.m_sf.is_valid(i) {
            continue;
        }
        let start = pred.x1[i];
        let end = start + pred.sf[i];
        let (Some(a), Some(b)) = (k.project_point(&start), k.project_point(&end)) else {
            continue;
        };
        let r = target.flow[i] - (b - a);
        let sigma = Vector2::new(sgn(r.x), sgn(r.y));
        let j_end = projection_jacobian(k, &end);
        let j_start = projection_jacobian(k, &start);
        // dL/dμ̂ = -σ; μ̂ = π(x1 + sf) - π(x1)
        let d_sf = -(j_end.transpose() * sigma) * mu_weight;
        let d_x1 = -((j_end - j_start).transpose() * sigma) * mu_weight;
        grad.sf[i] += d_sf;
        grad.x1[i] += d_x1;
    }

    Ok((report, grad))
}

/// Sign pattern of every residual plus the median pixel(s) used for
/// alignment. Two predictions with the same signature lie on the same linear
/// piece of the L1 terms.
pub(crate) fn kink_signature(target: &LossTarget, pred: &Prediction, strategy: ScaleStrategy) -> Result<Vec<i64>> {
    let (norm, _, _) = normalization(target, pred, strategy)?;
    let mut sig = Vec::new();
    let mut push3 = |v: Vector3<f64>| sig.extend(v.iter().map(|&c| sgn(c) as i64));
    for (gt, p, m) in [
        (&target.x1, &pred.x1, &target.m_x1),
        (&target.x2, &pred.x2, &target.m_x2),
        (&target.sf, &pred.sf, &target.m_sf),
    ] {
        for i in 0..gt.len() {
            if m.is_valid(i) {
                push3(norm.residual(&gt[i], &p[i]));
            }
        }
    }
    let k = &target.intrinsics;
    for i in 0..target.flow.len() {
        if !target.m_sf.is_valid(i) {
            continue;
        }
        let start = pred.x1[i];
        let end = start + pred.sf[i];
        match (k.project_point(&start), k.project_point(&end)) {
            (Some(a), Some(b)) => {
                let r = target.flow[i] - (b - a);
                sig.push(sgn(r.x) as i64);
                sig.push(sgn(r.y) as i64);
            }
            _ => sig.push(9),
        }
    }
    if let Normalization::Align(_) = norm {
        let mut ratios = alignment_ratios(target, pred);
        ratios.sort_by(|a, b| a.0.total_cmp(&b.0));
        let len = ratios.len();
        for idx in [len.saturating_sub(1) / 2, len / 2] {
            if let Some(&(_, view, i)) = ratios.get(idx) {
                sig.push((view * target.x1.len() + i) as i64);
            }
        }
    }
    Ok(sig)
}
