//! Analytic two-frame scenes: a background plane plus rigidly moving spheres
//! and boxes, seen by a moving pinhole camera.
//!
//! Depth comes from exact ray-primitive intersection at both timestamps.
//! Scene flow, forward and backward optical flow and occlusion follow in
//! closed form from each hit primitive's rigid motion. Everything is
//! expressed in camera-1 coordinates at `t1` ("world"); camera 2 sees
//! `y = R x + t` for the scene's camera motion `[R|t]`.

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraIntrinsics, RelativePose};
use crate::error::{Error, Result};
use crate::recipe::UpliftResult;
use crate::tensors::{FieldGrid, SampleRecord, SfKind, ValidityMask};

const HIT_EPS: f64 = 1e-9;
const VISIBILITY_TOL: f64 = 1e-6;

/// Plane `normal · x = offset` in camera-1 coordinates; static.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlaneSpec {
    pub normal: [f64; 3],
    pub offset: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Shape {
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    Box {
        center: [f64; 3],
        half_extents: [f64; 3],
        /// Orientation of the box axes, axis-angle in radians.
        axis_angle: [f64; 3],
    },
}

/// Motion between the two frames: rotation about the object's own center,
/// then translation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RigidMotion {
    pub axis_angle: [f64; 3],
    pub translation: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub motion: RigidMotion,
}

/// Camera-1 to camera-2 transform as axis-angle plus translation.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoseSpec {
    pub axis_angle: [f64; 3],
    pub translation: [f64; 3],
}

impl PoseSpec {
    pub fn pose(&self) -> RelativePose {
        RelativePose::from_axis_angle(self.axis_angle.into(), self.translation.into())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub background: PlaneSpec,
    pub objects: Vec<ObjectSpec>,
    pub camera_motion: PoseSpec,
    pub intrinsics: CameraIntrinsics,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    #[serde(default = "default_metric")]
    pub metric: bool,
}

fn default_metric() -> bool {
    true
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}

fn sym3(rng: &mut ChaCha8Rng, a: f64) -> [f64; 3] {
    [uniform(rng, -a, a), uniform(rng, -a, a), uniform(rng, -a, a)]
}

impl SceneSpec {
    fn default_intrinsics(height: usize, width: usize) -> CameraIntrinsics {
        let f = 0.9 * width as f64;
        CameraIntrinsics {
            fx: f,
            fy: f,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
        }
    }

    /// A random scene: tilted background plane, one to three objects with
    /// small rigid motions, and a small camera motion. Fully determined by `seed`.
    pub fn random(seed: u64, height: usize, width: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let intrinsics = Self::default_intrinsics(height, width);
        let normal = Vector3::new(uniform(&mut rng, -0.2, 0.2), uniform(&mut rng, -0.2, 0.2), 1.0).normalize();
        let plane_depth = uniform(&mut rng, 8.0, 12.0);
        let background = PlaneSpec {
            normal: normal.into(),
            offset: normal.z * plane_depth,
        };
        let n_objects = rng.gen_range(1..=3);
        let half_fov = 0.5 * width as f64 / intrinsics.fx;
        let objects = (0..n_objects)
            .map(|_| {
                let z = uniform(&mut rng, 3.0, 6.0);
                let spread = 0.6 * half_fov * z;
                let center = [
                    uniform(&mut rng, -spread, spread),
                    uniform(&mut rng, -spread, spread),
                    z,
                ];
                let shape = if rng.gen_bool(0.5) {
                    Shape::Sphere {
                        center,
                        radius: uniform(&mut rng, 0.3, 0.8),
                    }
                } else {
                    Shape::Box {
                        center,
                        half_extents: [
                            uniform(&mut rng, 0.2, 0.6),
                            uniform(&mut rng, 0.2, 0.6),
                            uniform(&mut rng, 0.2, 0.6),
                        ],
                        axis_angle: sym3(&mut rng, 0.5),
                    }
                };
                ObjectSpec {
                    shape,
                    motion: RigidMotion {
                        axis_angle: sym3(&mut rng, 0.1),
                        translation: sym3(&mut rng, 0.2),
                    },
                }
            })
            .collect();
        let camera_motion = PoseSpec {
            axis_angle: sym3(&mut rng, 0.02),
            translation: sym3(&mut rng, 0.15),
        };
        Self {
            background,
            objects,
            camera_motion,
            intrinsics,
            height,
            width,
            seed,
            metric: rng.gen_bool(0.5),
        }
    }

    /// A fronto-parallel plane and a purely lateral camera translation chosen
    /// so that every pixel moves by the same integer offset.
    pub fn integer_flow(seed: u64, height: usize, width: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let intrinsics = Self::default_intrinsics(height, width);
        let depth = uniform(&mut rng, 2.0, 10.0);
        let (du, dv) = loop {
            let du: i32 = rng.gen_range(-3..=3);
            let dv: i32 = rng.gen_range(-3..=3);
            if du != 0 || dv != 0 {
                break (du, dv);
            }
        };
        Self {
            background: PlaneSpec {
                normal: [0.0, 0.0, 1.0],
                offset: depth,
            },
            objects: Vec::new(),
            camera_motion: PoseSpec {
                axis_angle: [0.0; 3],
                translation: [
                    du as f64 * depth / intrinsics.fx,
                    dv as f64 * depth / intrinsics.fy,
                    0.0,
                ],
            },
            intrinsics,
            height,
            width,
            seed,
            metric: rng.gen_bool(0.5),
        }
    }
}

#[derive(Clone, Debug)]
enum Primitive {
    Plane {
        normal: Vector3<f64>,
        offset: f64,
    },
    Sphere {
        center: Vector3<f64>,
        radius: f64,
    },
    Box {
        center: Vector3<f64>,
        rotation: Matrix3<f64>,
        half: Vector3<f64>,
    },
}

impl Primitive {
    fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<f64> {
        match self {
            Primitive::Plane { normal, offset } => {
                let denom = normal.dot(dir);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = (offset - normal.dot(origin)) / denom;
                (t > HIT_EPS).then_some(t)
            }
            Primitive::Sphere { center, radius } => {
                let oc = origin - center;
                let a = dir.norm_squared();
                let b = oc.dot(dir);
                let c = oc.norm_squared() - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                // Stable root pair.
                let q = -b - sq.copysign(b);
                let (r1, r2) = (q / a, c / q);
                let (near, far) = if r1 < r2 { (r1, r2) } else { (r2, r1) };
                if near > HIT_EPS {
                    Some(near)
                } else if far > HIT_EPS {
                    Some(far)
                } else {
                    None
                }
            }
            Primitive::Box { center, rotation, half } => {
                let o = rotation.transpose() * (origin - center);
                let d = rotation.transpose() * dir;
                let mut t_near = f64::NEG_INFINITY;
                let mut t_far = f64::INFINITY;
                for axis in 0..3 {
                    if d[axis].abs() < 1e-15 {
                        if o[axis].abs() > half[axis] {
                            return None;
                        }
                        continue;
                    }
                    let t1 = (-half[axis] - o[axis]) / d[axis];
                    let t2 = (half[axis] - o[axis]) / d[axis];
                    t_near = t_near.max(t1.min(t2));
                    t_far = t_far.min(t1.max(t2));
                }
                if t_near > t_far {
                    None
                } else if t_near > HIT_EPS {
                    Some(t_near)
                } else if t_far > HIT_EPS {
                    Some(t_far)
                } else {
                    None
                }
            }
        }
    }

    fn contains(&self, p: &Vector3<f64>) -> bool {
        match self {
            Primitive::Plane { .. } => false,
            Primitive::Sphere { center, radius } => (p - center).norm() <= *radius,
            Primitive::Box { center, rotation, half } => {
                let q = rotation.transpose() * (p - center);
                (0..3).all(|a| q[a].abs() <= half[a])
            }
        }
    }

    fn center_and_radius(&self) -> Option<(Vector3<f64>, f64)> {
        match self {
            Primitive::Plane { .. } => None,
            Primitive::Sphere { center, radius } => Some((*center, *radius)),
            Primitive::Box { center, half, .. } => Some((*center, half.norm())),
        }
    }
}

/// Rigid motion of one primitive between the frames, in world coordinates.
#[derive(Clone, Debug)]
struct Motion {
    rotation: Matrix3<f64>,
    pivot: Vector3<f64>,
    translation: Vector3<f64>,
}

impl Motion {
    fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            pivot: Vector3::zeros(),
            translation: Vector3::zeros(),
        }
    }

    fn forward(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * (p - self.pivot) + self.pivot + self.translation
    }

    fn backward(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (p - self.pivot - self.translation) + self.pivot
    }
}

struct World {
    at_t1: Vec<Primitive>,
    at_t2: Vec<Primitive>,
    motions: Vec<Motion>,
}

impl World {
    fn build(spec: &SceneSpec) -> Result<Self> {
        let normal = Vector3::from(spec.background.normal);
        let n = normal.norm();
        if !(n > 0.0) {
            return Err(Error::DegenerateScene("background normal is zero".into()));
        }
        let plane = Primitive::Plane {
            normal: normal / n,
            offset: spec.background.offset / n,
        };
        let mut at_t1 = vec![plane.clone()];
        let mut at_t2 = vec![plane];
        let mut motions = vec![Motion::identity()];
        for obj in &spec.objects {
            let rotation = Rotation3::new(Vector3::from(obj.motion.axis_angle)).into_inner();
            let translation = Vector3::from(obj.motion.translation);
            let (p1, p2, pivot) = match &obj.shape {
                Shape::Sphere { center, radius } => {
                    if !(*radius > 0.0) {
                        return Err(Error::DegenerateScene("sphere radius must be positive".into()));
                    }
                    let c = Vector3::from(*center);
                    (
                        Primitive::Sphere {
                            center: c,
                            radius: *radius,
                        },
                        Primitive::Sphere {
                            center: c + translation,
                            radius: *radius,
                        },
                        c,
                    )
                }
                Shape::Box {
                    center,
                    half_extents,
                    axis_angle,
                } => {
                    let half = Vector3::from(*half_extents);
                    if half.iter().any(|&h| !(h > 0.0)) {
                        return Err(Error::DegenerateScene("box half extents must be positive".into()));
                    }
                    let c = Vector3::from(*center);
                    let orient = Rotation3::new(Vector3::from(*axis_angle)).into_inner();
                    (
                        Primitive::Box {
                            center: c,
                            rotation: orient,
                            half,
                        },
                        Primitive::Box {
                            center: c + translation,
                            rotation: rotation * orient,
                            half,
                        },
                        c,
                    )
                }
            };
            at_t1.push(p1);
            at_t2.push(p2);
            motions.push(Motion {
                rotation,
                pivot,
                translation,
            });
        }
        Ok(Self { at_t1, at_t2, motions })
    }

    fn nearest(prims: &[Primitive], origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, usize)> {
        prims
            .iter()
            .enumerate()
            .filter_map(|(i, p)| p.intersect(origin, dir).map(|t| (t, i)))
            .min_by(|a, b| a.0.total_cmp(&b.0))
    }
}

/// `π(to) - π(from)` written so that identical normalized coordinates give
/// exactly zero.
fn image_offset(k: &CameraIntrinsics, from: &Vector3<f64>, to: &Vector3<f64>) -> [f64; 2] {
    [
        k.fx * (to.x / to.z - from.x / from.z),
        k.fy * (to.y / to.z - from.y / from.z),
    ]
}

fn check_scene(spec: &SceneSpec, world: &World, pose: &RelativePose) -> Result<()> {
    spec.intrinsics.validate()?;
    if spec.height == 0 || spec.width == 0 {
        return Err(Error::DegenerateScene("resolution must be nonzero".into()));
    }
    let cam2_center = pose.apply_inverse(&Vector3::zeros());
    for (i, (p1, p2)) in world.at_t1.iter().zip(&world.at_t2).enumerate().skip(1) {
        if p1.contains(&Vector3::zeros()) || p2.contains(&cam2_center) {
            return Err(Error::DegenerateScene(format!("camera is inside object {}", i - 1)));
        }
        let (c1, r) = p1.center_and_radius().expect("objects have a center");
        let (c2, _) = p2.center_and_radius().expect("objects have a center");
        if c1.z - r <= 0.0 || pose.apply(&c2).z - r <= 0.0 {
            return Err(Error::DegenerateScene(format!(
                "object {} is not in front of both cameras",
                i - 1
            )));
        }
    }
    Ok(())
}

/// Renders `spec` into a sample (depths, forward and backward flow, no scene
/// flow) and the analytic ground truth.
///
/// Ground-truth scene flow is in the camera-2 frame. A source pixel is
/// ground-truth valid when it hits a surface, its moved point is in front of
/// camera 2, projects inside the image and is not hidden by a nearer surface
/// at `t2`. The `occlusion` mask is exactly that visibility test.
pub fn render(spec: &SceneSpec) -> Result<(SampleRecord, UpliftResult)> {
    let pose = spec.camera_motion.pose();
    let world = World::build(spec)?;
    check_scene(spec, &world, &pose)?;
    let k = &spec.intrinsics;
    let (h, w) = (spec.height, spec.width);
    let rt = pose.rotation().transpose();
    let cam2_origin = pose.apply_inverse(&Vector3::zeros());
    let (max_u, max_v) = ((w - 1) as f64, (h - 1) as f64);

    let mut d1 = FieldGrid::zeros(h, w, 1);
    let mut m_d1 = ValidityMask::zeros(h, w);
    let mut d2 = FieldGrid::zeros(h, w, 1);
    let mut m_d2 = ValidityMask::zeros(h, w);
    let mut flow_fwd = FieldGrid::zeros(h, w, 2);
    let mut m_fwd = ValidityMask::zeros(h, w);
    let mut flow_bwd = FieldGrid::zeros(h, w, 2);
    let mut m_bwd = ValidityMask::zeros(h, w);
    let mut sf = FieldGrid::zeros(h, w, 3);
    let mut mask_sf = ValidityMask::zeros(h, w);
    let mut visible = ValidityMask::zeros(h, w);
    let mut x1 = FieldGrid::zeros(h, w, 3);
    let mut x2 = FieldGrid::zeros(h, w, 3);

    for row in 0..h {
        for col in 0..w {
            let i = row * w + col;
            let (u, v) = (col as f64, row as f64);

            // Frame 1.
            let ray = k.ray(u, v);
            if let Some((depth, prim)) = World::nearest(&world.at_t1, &Vector3::zeros(), &ray) {
                let start = ray * depth;
                d1.data_mut()[i] = depth as f32;
                m_d1.set_index(i, true);
                x1.set_point(i, &start);
                let end = pose.apply(&world.motions[prim].forward(&start));
                if end.z > 0.0 {
                    let flow = image_offset(k, &start, &end);
                    let f = &mut flow_fwd.data_mut()[2 * i..2 * i + 2];
                    f[0] = flow[0] as f32;
                    f[1] = flow[1] as f32;
                    m_fwd.set_index(i, true);
                    sf.set_point(i, &(end - start));
                    let dir2 = rt * (end / end.z);
                    let seen = World::nearest(&world.at_t2, &cam2_origin, &dir2)
                        .is_some_and(|(t, _)| t >= end.z - VISIBILITY_TOL);
                    visible.set_index(i, seen);
                    // Judge the landing pixel with the flow as stored, so the
                    // mask agrees with what consumers of the sample compute.
                    let (fu, fv) = (f[0] as f64, f[1] as f64);
                    let inside = (0.0..=max_u).contains(&(u + fu)) && (0.0..=max_v).contains(&(v + fv));
                    mask_sf.set_index(i, seen && inside);
                }
            }

            // Frame 2.
            let dir2 = rt * ray;
            if let Some((depth, prim)) = World::nearest(&world.at_t2, &cam2_origin, &dir2) {
                let y = cam2_origin + dir2 * depth;
                d2.data_mut()[i] = depth as f32;
                m_d2.set_index(i, true);
                x2.set_point(i, &y);
                let back = world.motions[prim].backward(&y);
                if back.z > 0.0 {
                    let flow = image_offset(k, &(ray * depth), &back);
                    let f = &mut flow_bwd.data_mut()[2 * i..2 * i + 2];
                    f[0] = flow[0] as f32;
                    f[1] = flow[1] as f32;
                    m_bwd.set_index(i, true);
                }
            }
        }
    }

    let sample = SampleRecord {
        d1,
        m_d1,
        d2,
        m_d2,
        flow_fwd,
        m_flow_fwd: m_fwd,
        flow_bwd: Some((flow_bwd, m_bwd)),
        sf: None,
        sf_kind: SfKind::Cso,
        intrinsics: *k,
        pose_1_to_2: pose,
        metric: spec.metric,
    };
    let gt = UpliftResult {
        sf,
        mask_sf,
        x1,
        x2,
        occlusion: visible,
        cyc_skipped: false,
    };
    Ok((sample, gt))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane_scene(depth: f64, camera_translation: [f64; 3]) -> SceneSpec {
        SceneSpec {
            background: PlaneSpec {
                normal: [0.0, 0.0, 1.0],
                offset: depth,
            },
            objects: vec![],
            camera_motion: PoseSpec {
                axis_angle: [0.0; 3],
                translation: camera_translation,
            },
            intrinsics: CameraIntrinsics::new(20.0, 20.0, 4.0, 4.0).unwrap(),
            height: 9,
            width: 9,
            seed: 0,
            metric: true,
        }
    }

    #[test]
    fn static_plane_has_zero_flow() {
        let (s, gt) = render(&plane_scene(3.0, [0.0; 3])).unwrap();
        assert!(s.flow_fwd.data().iter().all(|&v| v == 0.0));
        assert!(gt.sf.data().iter().all(|&v| v == 0.0));
        assert_eq!(gt.mask_sf.count_valid(), 81);
    }

    #[test]
    fn camera_moving_back_from_plane() {
        // Camera centre moves by (0, 0, -1): points gain 1 in camera-2 depth.
        let (s, gt) = render(&plane_scene(2.0, [0.0, 0.0, 1.0])).unwrap();
        let centre = 4 * 9 + 4;
        assert_eq!(gt.sf.point(centre), Vector3::new(0.0, 0.0, 1.0));
        assert_eq!(s.d2.data()[centre], 3.0);
        assert_eq!(s.d1.data()[centre], 2.0);
    }

    #[test]
    fn seed_determines_scene() {
        assert_eq!(SceneSpec::random(11, 16, 16), SceneSpec::random(11, 16, 16));
        assert_ne!(SceneSpec::random(11, 16, 16), SceneSpec::random(12, 16, 16));
    }

    #[test]
    fn camera_inside_sphere_is_degenerate() {
        let mut spec = plane_scene(5.0, [0.0; 3]);
        spec.objects.push(ObjectSpec {
            shape: Shape::Sphere {
                center: [0.0, 0.0, 0.5],
                radius: 1.0,
            },
            motion: RigidMotion::default(),
        });
        assert!(matches!(render(&spec), Err(Error::DegenerateScene(_))));
    }

    #[test]
    fn box_and_sphere_intersections() {
        let sphere = Primitive::Sphere {
            center: Vector3::new(0.0, 0.0, 5.0),
            radius: 1.0,
        };
        assert_eq!(sphere.intersect(&Vector3::zeros(), &Vector3::z()), Some(4.0));
        let cube = Primitive::Box {
            center: Vector3::new(0.0, 0.0, 5.0),
            rotation: Matrix3::identity(),
            half: Vector3::new(1.0, 1.0, 0.5),
        };
        assert_eq!(cube.intersect(&Vector3::zeros(), &Vector3::z()), Some(4.5));
        assert_eq!(cube.intersect(&Vector3::zeros(), &Vector3::x()), None);
    }

    #[test]
    fn integer_flow_scene_has_integer_flow() {
        for seed in 0..5 {
            let (s, _) = render(&SceneSpec::integer_flow(seed, 12, 12)).unwrap();
            for v in s.flow_fwd.data() {
                assert_eq!(*v, v.round());
            }
        }
    }
}
