//! Independent reference implementations shared by the integration tests.
//! Written from the formulas with plain arrays so they share no code with
//! the library beyond data access.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sfkit::camera::CameraIntrinsics;
use sfkit::optim::{LossTarget, Prediction, ScaleStrategy};
use sfkit::synthworld::{render, SceneSpec};
use sfkit::tensors::{FieldGrid, SampleRecord, ValidityMask};

pub type P3 = [f64; 3];

pub fn sub(a: P3, b: P3) -> P3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add(a: P3, b: P3) -> P3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale(a: P3, s: f64) -> P3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn norm(a: P3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

pub fn l1(a: P3) -> f64 {
    a[0].abs() + a[1].abs() + a[2].abs()
}

pub fn point(grid: &FieldGrid, i: usize) -> P3 {
    let d = grid.data();
    [d[3 * i] as f64, d[3 * i + 1] as f64, d[3 * i + 2] as f64]
}

/// `K⁻¹ [u v 1]ᵀ · depth`.
pub fn unproject(k: &CameraIntrinsics, u: f64, v: f64, depth: f64) -> P3 {
    [(u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth]
}

pub fn project(k: &CameraIntrinsics, p: P3) -> Option<[f64; 2]> {
    (p[2] > 0.0).then(|| [k.fx * p[0] / p[2] + k.cx, k.fy * p[1] / p[2] + k.cy])
}

/// Textbook bilinear interpolation of channel `c` at `(u, v)`; `None` when a
/// neighbour with nonzero weight is outside the grid or masked.
pub fn bilinear(grid: &FieldGrid, mask: &ValidityMask, c: usize, u: f64, v: f64) -> Option<f64> {
    let (h, w) = (grid.height() as f64, grid.width() as f64);
    if !(u >= 0.0 && v >= 0.0 && u <= w - 1.0 && v <= h - 1.0) {
        return None;
    }
    let (u0, v0) = (u.floor(), v.floor());
    let (a, b) = (u - u0, v - v0);
    let mut acc = 0.0;
    for (du, dv, wt) in [
        (0.0, 0.0, (1.0 - a) * (1.0 - b)),
        (1.0, 0.0, a * (1.0 - b)),
        (0.0, 1.0, (1.0 - a) * b),
        (1.0, 1.0, a * b),
    ] {
        if wt == 0.0 {
            continue;
        }
        let (col, row) = ((u0 + du) as usize, (v0 + dv) as usize);
        if !mask.get(row, col) {
            return None;
        }
        acc += wt * grid.at(row, col)[c] as f64;
    }
    Some(acc)
}

pub fn median(mut a: Vec<f64>) -> f64 {
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let n = a.len();
    if n % 2 == 1 {
        a[n / 2]
    } else {
        (a[n / 2 - 1] + a[n / 2]) / 2.0
    }
}

/// Loss terms straight from their definitions: `(l_x, l_s, l_mu)`.
pub fn oracle_loss(t: &LossTarget, p: &Prediction, strategy: ScaleStrategy) -> (f64, f64, f64) {
    let n = t.x1.len();
    let arr = |v: &nalgebra::Vector3<f64>| [v.x, v.y, v.z];
    let views = [(&t.x1, &p.x1, &t.m_x1), (&t.x2, &p.x2, &t.m_x2)];

    let mean_dist = |pick_pred: bool| {
        let mut sum = 0.0;
        let mut cnt = 0.0;
        for (gt, pr, m) in views {
            for i in 0..n {
                if m.is_valid(i) {
                    sum += norm(arr(if pick_pred { &pr[i] } else { &gt[i] }));
                    cnt += 1.0;
                }
            }
        }
        sum / cnt
    };
    let normalized = match strategy {
        ScaleStrategy::Always => true,
        ScaleStrategy::Never | ScaleStrategy::Align => false,
        ScaleStrategy::Xor => !t.metric,
    };
    // residual = a·pred - b·gt
    let (a, b) = if strategy == ScaleStrategy::Align {
        let mut ratios = Vec::new();
        for (gt, pr, m) in views {
            for i in 0..n {
                let pn = norm(arr(&pr[i]));
                if m.is_valid(i) && pn > 0.0 {
                    ratios.push(norm(arr(&gt[i])) / pn);
                }
            }
        }
        (median(ratios), 1.0)
    } else if normalized {
        (1.0 / mean_dist(true), 1.0 / mean_dist(false))
    } else {
        (1.0, 1.0)
    };

    let mut l_x = 0.0;
    for (gt, pr, m) in views {
        for i in 0..n {
            if m.is_valid(i) {
                l_x += l1(sub(scale(arr(&pr[i]), a), scale(arr(&gt[i]), b)));
            }
        }
    }
    let mut l_s = 0.0;
    let mut l_mu = 0.0;
    for i in 0..n {
        if !t.m_sf.is_valid(i) {
            continue;
        }
        l_s += l1(sub(scale(arr(&p.sf[i]), a), scale(arr(&t.sf[i]), b)));
        let start = arr(&p.x1[i]);
        let end = add(start, arr(&p.sf[i]));
        if let (Some(pa), Some(pb)) = (project(&t.intrinsics, start), project(&t.intrinsics, end)) {
            l_mu += (t.flow[i].x - (pb[0] - pa[0])).abs() + (t.flow[i].y - (pb[1] - pa[1])).abs();
        }
    }
    (l_x, l_s, l_mu)
}

/// Rendered sample with its analytic scene flow attached as `sf`.
pub fn synth_sample(seed: u64, size: usize, metric: Option<bool>) -> SampleRecord {
    let mut spec = SceneSpec::random(seed, size, size);
    if let Some(m) = metric {
        spec.metric = m;
    }
    let (mut sample, gt) = render(&spec).expect("random scenes render");
    sample.sf = Some((gt.sf, gt.mask_sf));
    sample
}

pub fn synth_target(seed: u64, size: usize, metric: Option<bool>) -> LossTarget {
    LossTarget::from_sample(&synth_sample(seed, size, metric)).expect("sample has sf")
}

/// Ground truth plus uniform noise in `[-noise, noise]` on every coordinate.
pub fn noisy(target: &LossTarget, noise: f64, seed: u64) -> Prediction {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = target.oracle();
    for x in p.coords_mut() {
        *x += rng.gen_range(-noise..=noise);
    }
    p
}

/// Mean `‖ŝ - s‖₂` over scene-flow-valid pixels.
pub fn sf_epe(t: &LossTarget, p: &Prediction) -> f64 {
    let mut sum = 0.0;
    let mut n = 0.0;
    for i in 0..t.sf.len() {
        if t.m_sf.is_valid(i) {
            sum += (p.sf[i] - t.sf[i]).norm();
            n += 1.0;
        }
    }
    sum / n
}

pub fn random_grid(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize, lo: f32, hi: f32) -> FieldGrid {
    FieldGrid::from_fn(h, w, c, |_, _, out| {
        for x in out.iter_mut() {
            *x = rng.gen_range(lo..hi);
        }
    })
}

pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> ValidityMask {
    ValidityMask::from_fn(h, w, |_, _| rng.gen_bool(p))
}
