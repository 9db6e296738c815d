//! Scene-flow and depth metrics, median scale alignment, the depth + optical
//! flow baseline, and a batch evaluation harness.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraIntrinsics, RelativePose};
use crate::error::{Error, Result};
use crate::optim::median_in_place;
use crate::recipe::{self, RecipeConfig};
use crate::tensors::{FieldGrid, SampleRecord, SfKind, ValidityMask};

pub const ACC_STRICT_EPE: f64 = 0.05;
pub const ACC_STRICT_REL: f64 = 0.05;
pub const ACC_RELAX_EPE: f64 = 0.1;
pub const ACC_RELAX_REL: f64 = 0.1;
pub const OUTLIER_EPE: f64 = 0.3;
pub const OUTLIER_REL: f64 = 0.1;
pub const DELTA1_RATIO: f64 = 1.25;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SceneFlowMetrics {
    pub epe: f64,
    pub acc_s: f64,
    pub acc_r: f64,
    pub out: f64,
    pub valid_count: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub absrel: f64,
    pub delta1: f64,
    pub valid_count: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub epe: f64,
    pub acc_s: f64,
    pub acc_r: f64,
    pub out: f64,
    pub absrel_r: f64,
    pub delta1_r: f64,
    pub absrel_m: f64,
    pub delta1_m: f64,
    pub valid_count: usize,
    pub depth_valid_count: usize,
    pub alignment_scale: f64,
}

/// Predicted pointmaps and CSO scene flow for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictorOutput {
    pub x1_hat: FieldGrid,
    pub x2_hat: FieldGrid,
    pub sf_hat: FieldGrid,
}

/// Per-pixel EPE with relative thresholds. A pixel with zero ground-truth
/// flow is judged by its absolute error alone.
pub fn sceneflow_metrics(pred_sf: &FieldGrid, gt_sf: &FieldGrid, m_sf: &ValidityMask) -> Result<SceneFlowMetrics> {
    let (h, w) = (gt_sf.height(), gt_sf.width());
    pred_sf.check_shape("sf_hat", h, w, 3)?;
    gt_sf.check_shape("sf", h, w, 3)?;
    m_sf.check_shape("m_sf", h, w)?;
    let mut m = SceneFlowMetrics::default();
    for i in 0..h * w {
        if !m_sf.is_valid(i) {
            continue;
        }
        let gt = gt_sf.point(i);
        let e = (pred_sf.point(i) - gt).norm();
        let g = gt.norm();
        let rel = (g > 0.0).then(|| e / g);
        let under = |epe: f64, r: f64| e < epe || rel.is_some_and(|x| x < r);
        m.epe += e;
        m.acc_s += under(ACC_STRICT_EPE, ACC_STRICT_REL) as u8 as f64;
        m.acc_r += under(ACC_RELAX_EPE, ACC_RELAX_REL) as u8 as f64;
        m.out += (e > OUTLIER_EPE || rel.is_some_and(|x| x > OUTLIER_REL)) as u8 as f64;
        m.valid_count += 1;
    }
    if m.valid_count == 0 {
        return Err(Error::NoValidPoints("scene flow metrics need a valid pixel"));
    }
    let n = m.valid_count as f64;
    m.epe /= n;
    m.acc_s /= n;
    m.acc_r /= n;
    m.out /= n;
    Ok(m)
}

/// Median over valid pixels of `‖gt‖ / ‖pred‖`. Works for any channel count.
pub fn align_scale(pred: &FieldGrid, gt: &FieldGrid, mask: &ValidityMask) -> Result<f64> {
    let c = gt.channels();
    pred.check_shape("pred", gt.height(), gt.width(), c)?;
    mask.check_shape("mask", gt.height(), gt.width())?;
    let norm = |g: &FieldGrid, i: usize| {
        g.data()[i * c..(i + 1) * c]
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    };
    let mut ratios: Vec<f64> = (0..gt.len_pixels())
        .filter(|&i| mask.is_valid(i))
        .filter_map(|i| {
            let p = norm(pred, i);
            (p > 0.0).then(|| norm(gt, i) / p)
        })
        .collect();
    median_in_place(&mut ratios).ok_or(Error::NoValidPoints("alignment needs a valid nonzero prediction"))
}

/// AbsRel and δ₁. With `aligned` the prediction is first multiplied by
/// [`align_scale`]. A non-positive predicted depth counts as a δ₁ failure.
pub fn depth_metrics(pred_z: &FieldGrid, gt_z: &FieldGrid, mask: &ValidityMask, aligned: bool) -> Result<DepthMetrics> {
    let (h, w) = (gt_z.height(), gt_z.width());
    pred_z.check_shape("pred_z", h, w, 1)?;
    gt_z.check_shape("gt_z", h, w, 1)?;
    let s = if aligned { align_scale(pred_z, gt_z, mask)? } else { 1.0 };
    let mut m = DepthMetrics::default();
    for i in 0..h * w {
        if !mask.is_valid(i) {
            continue;
        }
        let d = gt_z.data()[i] as f64;
        if !(d > 0.0) {
            return Err(Error::invariant(
                "gt_z",
                format!("non-positive depth at valid pixel {i}"),
            ));
        }
        let p = s * pred_z.data()[i] as f64;
        m.absrel += (p - d).abs() / d;
        if p > 0.0 && (p / d).max(d / p) < DELTA1_RATIO {
            m.delta1 += 1.0;
        }
        m.valid_count += 1;
    }
    if m.valid_count == 0 {
        return Err(Error::NoValidPoints("depth metrics need a valid pixel"));
    }
    m.absrel /= m.valid_count as f64;
    m.delta1 /= m.valid_count as f64;
    Ok(m)
}

/// Depth + optical flow baseline: runs the uplift composition on predicted
/// depths. Without a pose, `x2_hat` stays in camera-2 coordinates.
#[allow(clippy::too_many_arguments)]
pub fn baseline_dof(
    d1: &FieldGrid,
    m_d1: &ValidityMask,
    d2: &FieldGrid,
    m_d2: &ValidityMask,
    flow: Option<(&FieldGrid, &ValidityMask)>,
    k: &CameraIntrinsics,
    pose: Option<&RelativePose>,
    config: &RecipeConfig,
) -> Result<(PredictorOutput, ValidityMask)> {
    let (flow, m_flow) = flow.ok_or_else(|| Error::MissingField("flow_fwd".into()))?;
    let sample = SampleRecord {
        d1: d1.clone(),
        m_d1: m_d1.clone(),
        d2: d2.clone(),
        m_d2: m_d2.clone(),
        flow_fwd: flow.clone(),
        m_flow_fwd: m_flow.clone(),
        flow_bwd: None,
        sf: None,
        sf_kind: SfKind::Cso,
        intrinsics: *k,
        pose_1_to_2: pose.copied().unwrap_or_else(RelativePose::identity),
        metric: true,
    };
    let res = recipe::uplift(&sample, config)?;
    Ok((
        PredictorOutput {
            x1_hat: res.x1,
            x2_hat: res.x2,
            sf_hat: res.sf,
        },
        res.mask_sf,
    ))
}

/// Ground truth for one evaluated sample.
#[derive(Clone, Debug)]
pub struct EvalSample {
    pub name: String,
    pub record: SampleRecord,
}

impl EvalSample {
    fn gt_sf(&self) -> Result<(&FieldGrid, &ValidityMask)> {
        self.record
            .sf
            .as_ref()
            .map(|(g, m)| (g, m))
            .ok_or_else(|| Error::MissingField("sf".into()))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Scale predicted pointmaps and scene flow by the median alignment scale
    /// before computing scene-flow metrics.
    pub align_sceneflow: bool,
    /// Weight per-sample means by valid pixel counts instead of averaging them.
    pub pixel_pooled: bool,
}

/// Metrics for one prediction against one sample.
pub fn evaluate_sample(sample: &EvalSample, pred: &PredictorOutput, config: &EvalConfig) -> Result<MetricsReport> {
    let r = &sample.record;
    let (h, w) = (r.height(), r.width());
    pred.x1_hat.check_shape("x1_hat", h, w, 3)?;
    pred.x2_hat.check_shape("x2_hat", h, w, 3)?;
    let (gt_sf, m_sf) = sample.gt_sf()?;
    if r.sf_kind != SfKind::Cso {
        return Err(Error::Config("ground-truth scene flow must be stored as cso".into()));
    }
    let (gt_x1, _) = recipe::gt_pointmaps(r);
    let scale = align_scale(&pred.x1_hat, &gt_x1, &r.m_d1)?;
    let sf_hat = if config.align_sceneflow {
        pred.sf_hat.scaled(scale as f32)
    } else {
        pred.sf_hat.clone()
    };
    let sfm = sceneflow_metrics(&sf_hat, gt_sf, m_sf)?;
    let pred_z = pred.x1_hat.channel(2);
    let rel = depth_metrics(&pred_z, &r.d1, &r.m_d1, true)?;
    let met = depth_metrics(&pred_z, &r.d1, &r.m_d1, false)?;
    Ok(MetricsReport {
        epe: sfm.epe,
        acc_s: sfm.acc_s,
        acc_r: sfm.acc_r,
        out: sfm.out,
        absrel_r: rel.absrel,
        delta1_r: rel.delta1,
        absrel_m: met.absrel,
        delta1_m: met.delta1,
        valid_count: sfm.valid_count,
        depth_valid_count: rel.valid_count,
        alignment_scale: scale,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SampleOutcome {
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    /// Sorted by sample name.
    pub samples: Vec<SampleOutcome>,
    pub aggregate: Option<MetricsReport>,
    pub failures: usize,
}

/// Deterministic reduction over per-sample reports (caller supplies a fixed order).
pub fn aggregate(reports: &[MetricsReport], pixel_pooled: bool) -> Option<MetricsReport> {
    if reports.is_empty() {
        return None;
    }
    let sf_weight = |r: &MetricsReport| if pixel_pooled { r.valid_count as f64 } else { 1.0 };
    let depth_weight = |r: &MetricsReport| if pixel_pooled { r.depth_valid_count as f64 } else { 1.0 };
    let sf_total: f64 = reports.iter().map(sf_weight).sum();
    let depth_total: f64 = reports.iter().map(depth_weight).sum();
    let mean = |f: fn(&MetricsReport) -> f64, weight: &dyn Fn(&MetricsReport) -> f64, total: f64| {
        reports.iter().map(|r| weight(r) * f(r)).sum::<f64>() / total
    };
    Some(MetricsReport {
        epe: mean(|r| r.epe, &sf_weight, sf_total),
        acc_s: mean(|r| r.acc_s, &sf_weight, sf_total),
        acc_r: mean(|r| r.acc_r, &sf_weight, sf_total),
        out: mean(|r| r.out, &sf_weight, sf_total),
        absrel_r: mean(|r| r.absrel_r, &depth_weight, depth_total),
        delta1_r: mean(|r| r.delta1_r, &depth_weight, depth_total),
        absrel_m: mean(|r| r.absrel_m, &depth_weight, depth_total),
        delta1_m: mean(|r| r.delta1_m, &depth_weight, depth_total),
        valid_count: reports.iter().map(|r| r.valid_count).sum(),
        depth_valid_count: reports.iter().map(|r| r.depth_valid_count).sum(),
        alignment_scale: mean(|r| r.alignment_scale, &|_| 1.0, reports.len() as f64),
    })
}

/// Evaluates `predictor` on every sample in parallel. Failures are recorded
/// per sample and excluded from the aggregate. Outcomes are sorted by name,
/// so the report does not depend on input order or completion order.
pub fn evaluate<P>(samples: &[EvalSample], predictor: P, config: &EvalConfig) -> EvalReport
where
    P: Fn(&EvalSample) -> Result<PredictorOutput> + Sync,
{
    let mut samples_out: Vec<SampleOutcome> = samples
        .par_iter()
        .map(|s| {
            let result = predictor(s).and_then(|p| evaluate_sample(s, &p, config));
            match result {
                Ok(m) => SampleOutcome {
                    name: s.name.clone(),
                    metrics: Some(m),
                    error: None,
                },
                Err(e) => SampleOutcome {
                    name: s.name.clone(),
                    metrics: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    samples_out.sort_by(|a, b| a.name.cmp(&b.name));
    let ok: Vec<MetricsReport> = samples_out.iter().filter_map(|s| s.metrics).collect();
    let failures = samples_out.len() - ok.len();
    EvalReport {
        aggregate: aggregate(&ok, config.pixel_pooled),
        samples: samples_out,
        failures,
    }
}

/// Predictor that returns the ground truth.
pub fn oracle_predictor(sample: &EvalSample) -> Result<PredictorOutput> {
    let (sf, _) = sample.gt_sf()?;
    let (x1, x2) = recipe::gt_pointmaps(&sample.record);
    Ok(PredictorOutput {
        x1_hat: x1,
        x2_hat: x2,
        sf_hat: sf.clone(),
    })
}
