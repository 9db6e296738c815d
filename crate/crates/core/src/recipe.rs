//! Pseudo ground-truth scene flow from depth, optical flow and camera pose.
//!
//! For every source pixel `p1` the pipeline unprojects `d1[p1]`, follows the
//! forward flow to `p2 = p1 + flow[p1]`, samples `d2` at `p2` and unprojects
//! along the camera-2 ray through `p2`. The native scene flow is the camera-2
//! end point minus the camera-1 start point.

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::camera::{self, Interpolation, RelativePose};
use crate::error::{Error, Result};
use crate::tensors::{self, FieldGrid, SampleRecord, SfKind, ValidityMask};

pub const DEFAULT_ALPHA1: f64 = 0.01;
pub const DEFAULT_ALPHA2: f64 = 0.5;

/// Forward-backward consistency constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleParams {
    pub alpha1: f64,
    pub alpha2: f64,
}

impl Default for CycleParams {
    fn default() -> Self {
        Self {
            alpha1: DEFAULT_ALPHA1,
            alpha2: DEFAULT_ALPHA2,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RecipeConfig {
    pub cycle: CycleParams,
    pub interpolation: Interpolation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpliftResult {
    /// Scene flow in the camera-2 frame (end point in camera 2 minus start in camera 1).
    pub sf: FieldGrid,
    pub mask_sf: ValidityMask,
    /// Camera-1 pointmap of frame 1.
    pub x1: FieldGrid,
    /// Frame-2 pointmap expressed in camera-1 coordinates.
    pub x2: FieldGrid,
    /// 1 where the forward-backward check passed.
    pub occlusion: ValidityMask,
    pub cyc_skipped: bool,
}

/// Provenance blob written next to uplifted tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecipeProvenance {
    pub alpha1: f64,
    pub alpha2: f64,
    pub interpolation: Interpolation,
    pub cyc_skipped: bool,
    pub sf_frame: String,
    pub sf_valid: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceFrame {
    Camera1,
    Camera2,
    World,
}

impl std::str::FromStr for ReferenceFrame {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "camera1" => Ok(Self::Camera1),
            "camera2" => Ok(Self::Camera2),
            "world" => Ok(Self::World),
            other => Err(Error::Config(format!("unknown reference frame `{other}`"))),
        }
    }
}

/// Forward-backward consistency: a pixel passes when
/// `|f + b(p + f)|² < α₁ (|f|² + |b(p + f)|²) + α₂`, with `b` sampled bilinearly.
/// Pixels whose backward lookup is out of bounds or hits an invalid backward
/// flow fail the check.
pub fn cycle_check(
    flow_fwd: &FieldGrid,
    flow_bwd: &FieldGrid,
    bwd_mask: Option<&ValidityMask>,
    params: &CycleParams,
) -> Result<ValidityMask> {
    let (h, w) = (flow_fwd.height(), flow_fwd.width());
    flow_fwd.check_shape("flow_fwd", h, w, 2)?;
    flow_bwd.check_shape("flow_bwd", h, w, 2)?;
    let all_valid;
    let bwd_mask = match bwd_mask {
        Some(m) => {
            m.check_shape("m_flow_bwd", h, w)?;
            m
        }
        None => {
            all_valid = ValidityMask::ones(h, w);
            &all_valid
        }
    };
    let mut out = ValidityMask::zeros(h, w);
    let mut back = [0.0f64; 2];
    for row in 0..h {
        for col in 0..w {
            let f = flow_fwd.at(row, col);
            let (fu, fv) = (f[0] as f64, f[1] as f64);
            let (u2, v2) = (col as f64 + fu, row as f64 + fv);
            if !camera::sample(flow_bwd, bwd_mask, u2, v2, Interpolation::Bilinear, &mut back) {
                continue;
            }
            let (du, dv) = (fu + back[0], fv + back[1]);
            let lhs = du * du + dv * dv;
            let rhs = params.alpha1 * (fu * fu + fv * fv + back[0] * back[0] + back[1] * back[1]) + params.alpha2;
            out.set(row, col, lhs < rhs);
        }
    }
    Ok(out)
}

/// Elementwise AND of the four validity terms.
pub fn compose_validity(
    m_flow: &ValidityMask,
    m_d1: &ValidityMask,
    m_d2_at_p2: &ValidityMask,
    cyc: &ValidityMask,
) -> Result<ValidityMask> {
    m_flow.and(m_d1)?.and(m_d2_at_p2)?.and(cyc)
}

/// Ground-truth pointmaps: frame 1 in camera 1, and frame 2 unprojected in
/// camera 2 then carried into camera-1 coordinates by the inverse pose.
pub fn gt_pointmaps(sample: &SampleRecord) -> (FieldGrid, FieldGrid) {
    let x1 = camera::unproject(&sample.d1, &sample.intrinsics);
    let x2_cam2 = camera::unproject(&sample.d2, &sample.intrinsics);
    let x2 = camera::transform(&x2_cam2, &sample.pose_1_to_2, true);
    (x1, x2)
}

/// Per-pixel warp of `d2` to the source lattice: returns the sampled depth at
/// `p2 = p1 + flow[p1]` and whether that lookup was valid.
fn warp_depth(d2: &FieldGrid, m_d2: &ValidityMask, flow: &FieldGrid, mode: Interpolation) -> (Vec<f64>, ValidityMask) {
    let (h, w) = (d2.height(), d2.width());
    let mut depth = vec![0.0; h * w];
    let mut valid = ValidityMask::zeros(h, w);
    let mut buf = [0.0f64];
    for row in 0..h {
        for col in 0..w {
            let f = flow.at(row, col);
            let (u2, v2) = (col as f64 + f[0] as f64, row as f64 + f[1] as f64);
            if camera::sample(d2, m_d2, u2, v2, mode, &mut buf) {
                depth[row * w + col] = buf[0];
                valid.set(row, col, true);
            }
        }
    }
    (depth, valid)
}

/// Uplifts depth + forward flow + pose into scene flow, pointmaps and the
/// composed validity mask. When the sample has no backward flow the cycle
/// check is skipped (all pixels pass) and `cyc_skipped` is set.
pub fn uplift(sample: &SampleRecord, config: &RecipeConfig) -> Result<UpliftResult> {
    sample.validate()?;
    let (h, w) = (sample.height(), sample.width());
    let k = &sample.intrinsics;

    let (occlusion, cyc_skipped) = match &sample.flow_bwd {
        Some((bwd, m_bwd)) => (cycle_check(&sample.flow_fwd, bwd, Some(m_bwd), &config.cycle)?, false),
        None => (ValidityMask::ones(h, w), true),
    };
    let (d2_at_p2, m_d2_at_p2) = warp_depth(&sample.d2, &sample.m_d2, &sample.flow_fwd, config.interpolation);
    let mask_sf = compose_validity(&sample.m_flow_fwd, &sample.m_d1, &m_d2_at_p2, &occlusion)?;

    let (x1, x2) = gt_pointmaps(sample);
    let mut sf = FieldGrid::zeros(h, w, 3);
    for row in 0..h {
        for col in 0..w {
            let i = row * w + col;
            if !mask_sf.is_valid(i) {
                continue;
            }
            let f = sample.flow_fwd.at(row, col);
            let start = k.unproject_pixel(col as f64, row as f64, sample.d1.data()[i] as f64);
            let end = k.unproject_pixel(col as f64 + f[0] as f64, row as f64 + f[1] as f64, d2_at_p2[i]);
            sf.set_point(i, &(end - start));
        }
    }
    Ok(UpliftResult {
        sf,
        mask_sf,
        x1,
        x2,
        occlusion,
        cyc_skipped,
    })
}

/// Re-expresses the native (camera-2) scene flow in another frame.
///
/// With start `x1` (camera 1) and end `e = x1 + sf` (camera 2):
/// `Camera2` returns `sf`; `Camera1` returns `pose⁻¹(e) - x1`; `World` takes
/// `world_from_camera1` and returns `W·pose⁻¹(e) - W·x1`. Invalid pixels are 0.
pub fn reframe_sceneflow(
    result: &UpliftResult,
    pose: &RelativePose,
    target: ReferenceFrame,
    world_from_camera1: Option<&RelativePose>,
) -> Result<FieldGrid> {
    let world = match (target, world_from_camera1) {
        (ReferenceFrame::World, None) => {
            return Err(Error::Config(
                "world reference frame needs a world-from-camera pose".into(),
            ))
        }
        (_, w) => w.copied().unwrap_or_else(RelativePose::identity),
    };
    if target == ReferenceFrame::Camera2 {
        return Ok(result.sf.clone());
    }
    let mut out = FieldGrid::zeros(result.sf.height(), result.sf.width(), 3);
    for i in 0..out.len_pixels() {
        if !result.mask_sf.is_valid(i) {
            continue;
        }
        let start = result.x1.point(i);
        let end_cam2 = start + result.sf.point(i);
        let end_cam1 = pose.apply_inverse(&end_cam2);
        let flow: Vector3<f64> = match target {
            ReferenceFrame::Camera1 => end_cam1 - start,
            _ => world.apply(&end_cam1) - world.apply(&start),
        };
        out.set_point(i, &flow);
    }
    Ok(out)
}

/// Writes `sf`, `m_sf`, `x1`, `x2` and `recipe.json` into an existing sample
/// directory and registers them in `meta.json`.
pub fn write_uplift(
    dir: &Path,
    result: &UpliftResult,
    config: &RecipeConfig,
    sf: &FieldGrid,
    frame: ReferenceFrame,
) -> Result<()> {
    tensors::write_grid(dir, "sf", sf)?;
    tensors::write_mask(dir, "m_sf", &result.mask_sf)?;
    tensors::write_grid(dir, "x1", &result.x1)?;
    tensors::write_grid(dir, "x2", &result.x2)?;
    let provenance = RecipeProvenance {
        alpha1: config.cycle.alpha1,
        alpha2: config.cycle.alpha2,
        interpolation: config.interpolation,
        cyc_skipped: result.cyc_skipped,
        sf_frame: serde_json::to_value(frame)
            .ok()
            .and_then(|v| v.as_str().map(String::from))
            .unwrap_or_default(),
        sf_valid: result.mask_sf.count_valid(),
    };
    let path = dir.join("recipe.json");
    let mut text = serde_json::to_string_pretty(&provenance).expect("provenance serializes");
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    tensors::add_fields(dir, &["sf", "m_sf", "x1", "x2"], Some(SfKind::Cso))
}
