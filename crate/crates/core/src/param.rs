//! Conversions between scene-flow parameterizations: camera-space offsets
//! (CSO), optical flow plus depth change (DDOF) and camera-2 end points (EP).

use crate::camera::{self, CameraIntrinsics, Interpolation};
use crate::error::Result;
use crate::tensors::{FieldGrid, SfKind, ValidityMask};

/// A 3-channel scene-flow payload tagged with how to read it.
#[derive(Clone, Debug, PartialEq)]
pub struct SfRepresentation {
    pub kind: SfKind,
    pub payload: FieldGrid,
}

fn check_pair(a: &FieldGrid, a_name: &str, b: &FieldGrid, b_name: &str) -> Result<()> {
    a.check_shape(a_name, b.height(), b.width(), 3)?;
    b.check_shape(b_name, a.height(), a.width(), 3)
}

/// `ep = x1 + sf`.
pub fn cso_to_ep(sf: &FieldGrid, x1: &FieldGrid) -> Result<FieldGrid> {
    check_pair(sf, "sf", x1, "x1")?;
    let data = sf.data().iter().zip(x1.data()).map(|(s, x)| x + s).collect();
    FieldGrid::new(sf.height(), sf.width(), 3, data)
}

/// `sf = ep - x1`.
pub fn ep_to_cso(ep: &FieldGrid, x1: &FieldGrid) -> Result<FieldGrid> {
    check_pair(ep, "ep", x1, "x1")?;
    let data = ep.data().iter().zip(x1.data()).map(|(e, x)| e - x).collect();
    FieldGrid::new(ep.height(), ep.width(), 3, data)
}

/// Splits CSO scene flow into optical flow `π(x1 + sf) - π(x1)` and depth
/// change `(x1 + sf)_z - x1_z`, both stored at the source pixel. Pixels with
/// a non-positive start or end depth are invalidated and zeroed.
pub fn cso_to_ddof(
    sf: &FieldGrid,
    x1: &FieldGrid,
    mask: &ValidityMask,
    k: &CameraIntrinsics,
) -> Result<(FieldGrid, FieldGrid, ValidityMask)> {
    check_pair(sf, "sf", x1, "x1")?;
    let (h, w) = (sf.height(), sf.width());
    mask.check_shape("mask", h, w)?;
    let mut mu = FieldGrid::zeros(h, w, 2);
    let mut dd = FieldGrid::zeros(h, w, 1);
    let mut out_mask = ValidityMask::zeros(h, w);
    for i in 0..h * w {
        if !mask.is_valid(i) {
            continue;
        }
        let start = x1.point(i);
        let end = start + sf.point(i);
        let (Some(p1), Some(p2)) = (k.project_point(&start), k.project_point(&end)) else {
            continue;
        };
        let flow = p2 - p1;
        mu.data_mut()[2 * i] = flow.x as f32;
        mu.data_mut()[2 * i + 1] = flow.y as f32;
        dd.data_mut()[i] = (end.z - start.z) as f32;
        out_mask.set_index(i, true);
    }
    Ok((mu, dd, out_mask))
}

/// Composes CSO scene flow from DDOF: forms `D₂ = x1_z + ΔD` on the source
/// lattice, unprojects it, samples that pointmap at `p + μ` and subtracts
/// `x1`. Lookups that leave the image or touch an invalid pixel are masked.
pub fn ddof_to_cso(
    mu: &FieldGrid,
    dd: &FieldGrid,
    x1: &FieldGrid,
    mask: &ValidityMask,
    k: &CameraIntrinsics,
    mode: Interpolation,
) -> Result<(FieldGrid, ValidityMask)> {
    let (h, w) = (x1.height(), x1.width());
    x1.check_shape("x1", h, w, 3)?;
    mu.check_shape("mu", h, w, 2)?;
    dd.check_shape("dd", h, w, 1)?;
    mask.check_shape("mask", h, w)?;

    let d2 = FieldGrid::from_fn(h, w, 1, |row, col, out| {
        let i = row * w + col;
        out[0] = x1.data()[3 * i + 2] + dd.data()[i];
    });
    let d2_mask = ValidityMask::from_fn(h, w, |row, col| mask.get(row, col) && d2.at(row, col)[0] > 0.0);
    let end_points = camera::unproject(&d2, k);

    let mut sf = FieldGrid::zeros(h, w, 3);
    let mut out_mask = ValidityMask::zeros(h, w);
    let mut end = [0.0f64; 3];
    for row in 0..h {
        for col in 0..w {
            let i = row * w + col;
            if !mask.is_valid(i) {
                continue;
            }
            let f = mu.at(row, col);
            let (u, v) = (col as f64 + f[0] as f64, row as f64 + f[1] as f64);
            if !camera::sample(&end_points, &d2_mask, u, v, mode, &mut end) {
                continue;
            }
            let start = x1.point(i);
            let flow = nalgebra::Vector3::new(end[0], end[1], end[2]) - start;
            sf.set_point(i, &flow);
            out_mask.set_index(i, true);
        }
    }
    Ok((sf, out_mask))
}

/// Converts any representation to CSO. DDOF payloads carry `(μ_u, μ_v, ΔD)`.
pub fn to_cso(
    rep: &SfRepresentation,
    x1: &FieldGrid,
    mask: &ValidityMask,
    k: &CameraIntrinsics,
    mode: Interpolation,
) -> Result<(FieldGrid, ValidityMask)> {
    rep.payload.check_shape("sf", x1.height(), x1.width(), 3)?;
    match rep.kind {
        SfKind::Cso => Ok((rep.payload.clone(), mask.clone())),
        SfKind::Ep => Ok((ep_to_cso(&rep.payload, x1)?, mask.clone())),
        SfKind::Ddof => {
            let mu = FieldGrid::from_fn(x1.height(), x1.width(), 2, |r, c, o| {
                o.copy_from_slice(&rep.payload.at(r, c)[..2])
            });
            let dd = rep.payload.channel(2);
            ddof_to_cso(&mu, &dd, x1, mask, k, mode)
        }
    }
}

/// Converts CSO scene flow to `kind`.
pub fn from_cso(
    sf: &FieldGrid,
    x1: &FieldGrid,
    mask: &ValidityMask,
    k: &CameraIntrinsics,
    kind: SfKind,
) -> Result<(SfRepresentation, ValidityMask)> {
    let (payload, mask) = match kind {
        SfKind::Cso => (sf.clone(), mask.clone()),
        SfKind::Ep => (cso_to_ep(sf, x1)?, mask.clone()),
        SfKind::Ddof => {
            let (mu, dd, m) = cso_to_ddof(sf, x1, mask, k)?;
            let packed = FieldGrid::from_fn(sf.height(), sf.width(), 3, |r, c, o| {
                o[..2].copy_from_slice(mu.at(r, c));
                o[2] = dd.at(r, c)[0];
            });
            (packed, m)
        }
    };
    Ok((SfRepresentation { kind, payload }, mask))
}
