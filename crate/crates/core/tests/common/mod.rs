//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use convformer::metrics::Pose3D;
use convformer::{Rng, Tensor};
use rand_distr::{Distribution, StandardNormal};

/// Direct loops over `out[o, p] = b[o] + Σ_i Σ_t w[o, i, t] · x[i, p − pad + t]`.
pub fn naive_conv_same(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (cin, len) = (x.shape()[0], x.shape()[1]);
    let (cout, kernel) = (w.shape()[0], w.shape()[2]);
    let pad = (kernel - 1) / 2;
    Tensor::from_fn([cout, len], |idx| {
        let (o, p) = (idx / len, idx % len);
        let mut acc = b.at(&[o]);
        for i in 0..cin {
            for t in 0..kernel {
                let q = p as isize - pad as isize + t as isize;
                if (0..len as isize).contains(&q) {
                    acc += w.at(&[o, i, t]) * x.at(&[i, q as usize]);
                }
            }
        }
        acc
    })
}

/// Multi-head self-attention of `x[L, W]` with Q = K = V = x, per head and
/// per row with explicit loops.
pub fn vanilla_mhsa(x: &Tensor, heads: usize) -> Tensor {
    let (l, w) = (x.shape()[0], x.shape()[1]);
    let dh = w / heads;
    let mut out = vec![0.0; l * w];
    for h in 0..heads {
        for i in 0..l {
            let scores: Vec<f64> = (0..l)
                .map(|j| (0..dh).map(|c| x.at(&[i, h * dh + c]) * x.at(&[j, h * dh + c])).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dh {
                out[i * w + h * dh + c] = (0..l).map(|j| e[j] / z * x.at(&[j, h * dh + c])).sum();
            }
        }
    }
    Tensor::new([l, w], out).unwrap()
}

pub type Mat = [[f64; 3]; 3];

pub fn mat_vec(r: &Mat, v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| r[i][0] * v[0] + r[i][1] * v[1] + r[i][2] * v[2])
}

/// Uniform random rotation from a normalized Gaussian quaternion.
pub fn random_rotation(rng: &mut Rng) -> Mat {
    let q: [f64; 4] = [0; 4].map(|_| StandardNormal.sample(rng));
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

pub fn random_pose(rng: &mut Rng, joints: usize, spread: f64) -> Pose3D {
    let pts = (0..joints).map(|_| [0; 3].map(|_| { let z: f64 = StandardNormal.sample(rng); spread * z })).collect();
    Pose3D::new(pts).unwrap()
}

pub fn transform(pose: &Pose3D, r: &Mat, t: [f64; 3]) -> Pose3D {
    let pts = pose
        .joints()
        .iter()
        .map(|&p| {
            let q = mat_vec(r, p);
            [q[0] + t[0], q[1] + t[1], q[2] + t[2]]
        })
        .collect();
    Pose3D::new(pts).unwrap()
}

fn centered(p: &Pose3D) -> Vec<[f64; 3]> {
    let n = p.num_joints() as f64;
    let mut c = [0.0; 3];
    for j in p.joints() {
        for k in 0..3 {
            c[k] += j[k] / n;
        }
    }
    p.joints().iter().map(|j| [j[0] - c[0], j[1] - c[1], j[2] - c[2]]).collect()
}

/// Result of the exhaustive rotation search.
pub struct GridOptimum {
    /// Smallest `Σ ‖a_i − R b_i‖²` over the grid, centroids matched.
    pub objective: f64,
    /// `Σ ‖a_i‖·‖b_i‖` over the centered points, which bounds how far the
    /// objective can move when R turns by a small angle.
    pub lipschitz: f64,
}

/// `Σ ‖a_i − R b_i‖²` for centered `a`, `b` and a proper rotation `R`.
pub fn rigid_objective(a: &[[f64; 3]], b: &[[f64; 3]], r: &Mat) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| {
            let rq = mat_vec(r, *q);
            (0..3).map(|k| (p[k] - rq[k]).powi(2)).sum::<f64>()
        })
        .sum()
}

pub fn centered_pair(target: &Pose3D, source: &Pose3D) -> (Vec<[f64; 3]>, Vec<[f64; 3]>) {
    (centered(target), centered(source))
}

/// Brute force over Z-Y-X Euler angles on a 1° grid (yaw, roll in
/// [−180°, 180°), pitch in [−90°, 90°]) for the rotation that best maps the
/// centered `source` onto the centered `target`.
pub fn grid_search_rotation(target: &Pose3D, source: &Pose3D) -> GridOptimum {
    let (a, b) = centered_pair(target, source);
    // Σ ‖a − R b‖² = Σ‖a‖² + Σ‖b‖² − 2 Σ_ij R_ij M_ij with M = Σ a bᵀ
    let mut m = [[0.0; 3]; 3];
    for (p, q) in a.iter().zip(&b) {
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] += p[i] * q[j];
            }
        }
    }
    let norms: f64 = a.iter().chain(&b).map(|p| p.iter().map(|v| v * v).sum::<f64>()).sum();
    let lipschitz = a
        .iter()
        .zip(&b)
        .map(|(p, q)| p.iter().map(|v| v * v).sum::<f64>().sqrt() * q.iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum();
    let trig = |deg: i32| {
        let r = (deg as f64).to_radians();
        (r.cos(), r.sin())
    };
    let full: Vec<(f64, f64)> = (-180..180).map(trig).collect();
    let half: Vec<(f64, f64)> = (-90..=90).map(trig).collect();
    let mut best = f64::NEG_INFINITY;
    for &(cz, sz) in &full {
        for &(cy, sy) in &half {
            // columns of Rz·Ry; each roll then mixes the last two
            let r0 = [cz * cy, sz * cy, -sy];
            let r1 = [-sz, cz, 0.0];
            let r2 = [cz * sy, sz * sy, cy];
            let dot = |r: &[f64; 3], col: usize| (0..3).map(|i| r[i] * m[i][col]).sum::<f64>();
            let (d0, c11, c22) = (dot(&r0, 0), dot(&r1, 1), dot(&r2, 2));
            let (cross1, cross2) = (dot(&r1, 2), dot(&r2, 1));
            for &(cx, sx) in &full {
                // columns of Rz Ry Rx: c0 = r0, c1 = cx·r1 + sx·r2, c2 = −sx·r1 + cx·r2
                let tr = d0 + cx * (c11 + c22) + sx * (cross2 - cross1);
                best = best.max(tr);
            }
        }
    }
    GridOptimum {
        objective: norms - 2.0 * best,
        lipschitz,
    }
}

/// Angular distance covered by rounding each Euler angle to the 1° grid.
pub const GRID_RESOLUTION_RAD: f64 = 1.5 * std::f64::consts::PI / 180.0;
