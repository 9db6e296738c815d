//! Pinhole projection, unprojection, rigid poses and subpixel sampling.

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensors::{FieldGrid, ValidityMask};

/// Skew-free pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        let k = Self { fx, fy, cx, cy };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(Error::invariant(
                "intrinsics",
                format!("need fx > 0 and fy > 0, got fx={} fy={}", self.fx, self.fy),
            ));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn from_matrix(m: &Matrix3<f64>) -> Result<Self> {
        if m[(0, 1)] != 0.0 || m[(1, 0)] != 0.0 || m[(2, 0)] != 0.0 || m[(2, 1)] != 0.0 || m[(2, 2)] != 1.0 {
            return Err(Error::invariant(
                "intrinsics",
                "only skew-free pinhole matrices [fx 0 cx; 0 fy cy; 0 0 1] are supported",
            ));
        }
        Self::new(m[(0, 0)], m[(1, 1)], m[(0, 2)], m[(1, 2)])
    }

    /// `None` when the point is not strictly in front of the camera.
    #[inline]
    pub fn project_point(&self, p: &Vector3<f64>) -> Option<Vector2<f64>> {
        if p.z > 0.0 {
            Some(Vector2::new(
                self.fx * p.x / p.z + self.cx,
                self.fy * p.y / p.z + self.cy,
            ))
        } else {
            None
        }
    }

    #[inline]
    pub fn unproject_pixel(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) * depth / self.fx, (v - self.cy) * depth / self.fy, depth)
    }

    /// Ray direction through `(u, v)` with unit z-component.
    #[inline]
    pub fn ray(&self, u: f64, v: f64) -> Vector3<f64> {
        self.unproject_pixel(u, v, 1.0)
    }
}

/// Rigid transform from camera-1 coordinates to camera-2 coordinates: `x -> R x + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelativePose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

const ORTHO_TOL: f64 = 1e-6;

impl RelativePose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let gram = rotation.transpose() * rotation;
        let ortho_err = (gram - Matrix3::identity()).abs().max();
        if !(ortho_err <= ORTHO_TOL) {
            return Err(Error::invariant(
                "pose_1_to_2",
                format!("rotation is not orthonormal (max |RᵀR - I| = {ortho_err:e})"),
            ));
        }
        let det = rotation.determinant();
        if !((det - 1.0).abs() <= ORTHO_TOL) {
            return Err(Error::invariant(
                "pose_1_to_2",
                format!("rotation determinant is {det}, expected 1"),
            ));
        }
        if !translation.iter().all(|t| t.is_finite()) {
            return Err(Error::invariant("pose_1_to_2", "translation is not finite"));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    /// Rotation given as an axis-angle vector (radians).
    pub fn from_axis_angle(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: Rotation3::new(axis_angle).into_inner(),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    #[inline]
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    #[inline]
    pub fn apply_inverse(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.translation)
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RelativePose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Result<Self> {
        if m[(3, 0)] != 0.0 || m[(3, 1)] != 0.0 || m[(3, 2)] != 0.0 || m[(3, 3)] != 1.0 {
            return Err(Error::invariant(
                "pose_1_to_2",
                "bottom row of the homogeneous matrix must be [0 0 0 1]",
            ));
        }
        Self::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }
}

/// Subpixel lookup rule.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    #[default]
    Bilinear,
    Nearest,
}

/// Projects every mask-valid point. Points with `z <= 0` come back invalid.
pub fn project(points: &FieldGrid, mask: &ValidityMask, k: &CameraIntrinsics) -> (FieldGrid, ValidityMask) {
    assert_eq!(points.channels(), 3);
    let (h, w) = (points.height(), points.width());
    let mut out = FieldGrid::zeros(h, w, 2);
    let mut out_mask = ValidityMask::zeros(h, w);
    for i in 0..h * w {
        if !mask.is_valid(i) {
            continue;
        }
        if let Some(uv) = k.project_point(&points.point(i)) {
            let px = &mut out.data_mut()[i * 2..i * 2 + 2];
            px[0] = uv.x as f32;
            px[1] = uv.y as f32;
            out_mask.set_index(i, true);
        }
    }
    (out, out_mask)
}

/// Lifts a depth map to a pointmap in the camera frame. Validity is carried by
/// the caller's depth mask; depth 0 maps to the origin.
pub fn unproject(depth: &FieldGrid, k: &CameraIntrinsics) -> FieldGrid {
    assert_eq!(depth.channels(), 1);
    FieldGrid::from_fn(depth.height(), depth.width(), 3, |row, col, out| {
        let d = depth.at(row, col)[0] as f64;
        let p = k.unproject_pixel(col as f64, row as f64, d);
        out[0] = p.x as f32;
        out[1] = p.y as f32;
        out[2] = p.z as f32;
    })
}

/// Applies `pose` (or its inverse) to every point.
pub fn transform(points: &FieldGrid, pose: &RelativePose, inverse: bool) -> FieldGrid {
    assert_eq!(points.channels(), 3);
    let mut out = points.clone();
    for i in 0..points.len_pixels() {
        let p = points.point(i);
        let q = if inverse {
            pose.apply_inverse(&p)
        } else {
            pose.apply(&p)
        };
        out.set_point(i, &q);
    }
    out
}

/// Samples `grid` at subpixel `(u, v)`, writing `grid.channels()` values into `out`.
///
/// Bilinear mode blends the four neighbours and is valid only if every
/// neighbour carrying nonzero weight is in bounds and mask-valid, so an
/// integer coordinate touches exactly one pixel. Nearest mode rounds to the
/// closest pixel. Invalid lookups zero `out` and return `false`.
pub fn sample(grid: &FieldGrid, mask: &ValidityMask, u: f64, v: f64, mode: Interpolation, out: &mut [f64]) -> bool {
    let c = grid.channels();
    debug_assert!(out.len() >= c);
    let out = &mut out[..c];
    out.fill(0.0);
    if !(u.is_finite() && v.is_finite()) {
        return false;
    }
    let (h, w) = (grid.height() as i64, grid.width() as i64);
    match mode {
        Interpolation::Nearest => {
            let (col, row) = (u.round() as i64, v.round() as i64);
            if col < 0 || row < 0 || col >= w || row >= h || !mask.get(row as usize, col as usize) {
                return false;
            }
            for (o, &g) in out.iter_mut().zip(grid.at(row as usize, col as usize)) {
                *o = g as f64;
            }
            true
        }
        Interpolation::Bilinear => {
            let (u0, v0) = (u.floor(), v.floor());
            let (fu, fv) = (u - u0, v - v0);
            let (u0, v0) = (u0 as i64, v0 as i64);
            let taps = [
                (v0, u0, (1.0 - fu) * (1.0 - fv)),
                (v0, u0 + 1, fu * (1.0 - fv)),
                (v0 + 1, u0, (1.0 - fu) * fv),
                (v0 + 1, u0 + 1, fu * fv),
            ];
            for &(row, col, weight) in &taps {
                if weight == 0.0 {
                    continue;
                }
                if col < 0 || row < 0 || col >= w || row >= h || !mask.get(row as usize, col as usize) {
                    out.fill(0.0);
                    return false;
                }
                for (o, &g) in out.iter_mut().zip(grid.at(row as usize, col as usize)) {
                    *o += weight * g as f64;
                }
            }
            true
        }
    }
}

/// Convenience wrapper around [`sample`] returning the values and validity flag.
pub fn sample_bilinear(grid: &FieldGrid, mask: &ValidityMask, u: f64, v: f64) -> (Vec<f64>, bool) {
    let mut out = vec![0.0; grid.channels()];
    let ok = sample(grid, mask, u, v, Interpolation::Bilinear, &mut out);
    (out, ok)
}
