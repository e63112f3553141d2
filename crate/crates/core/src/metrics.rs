//! Pose-error metrics: MPJPE, Procrustes-aligned MPJPE, velocity error,
//! PCK and its area under curve. Distances are in millimeters.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub const PCK_THRESHOLD_MM: f64 = 150.0;
pub const AUC_STEP_MM: f64 = 5.0;

/// A single 3D pose, `J × 3`, in millimeters.
#[derive(Clone, Debug, PartialEq)]
pub struct Pose3D {
    joints: Vec<[f64; 3]>,
}

impl Pose3D {
    pub fn new(joints: Vec<[f64; 3]>) -> Result<Self> {
        if joints.is_empty() {
            return Err(Error::Config("pose with no joints".into()));
        }
        if joints.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Pose3D::new"));
        }
        Ok(Self { joints })
    }

    /// Builds a pose from `3·J` interleaved coordinates.
    pub fn from_flat(coords: &[f64]) -> Result<Self> {
        if coords.len() % 3 != 0 {
            return Err(Error::dim("Pose3D::from_flat", &[coords.len()], &[3]));
        }
        Self::new(coords.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn joints(&self) -> &[[f64; 3]] {
        &self.joints
    }

    pub fn num_joints(&self) -> usize {
        self.joints.len()
    }

    /// Translates the pose so that joint `root` sits at the origin.
    pub fn root_relative(&self, root: usize) -> Self {
        let r = self.joints[root];
        let joints = self
            .joints
            .iter()
            .map(|j| [j[0] - r[0], j[1] - r[1], j[2] - r[2]])
            .collect();
        Self { joints }
    }

    pub fn is_root_relative(&self, root: usize) -> bool {
        self.joints.get(root) == Some(&[0.0; 3])
    }

    fn point(&self, i: usize) -> Vector3<f64> {
        Vector3::from(self.joints[i])
    }

    fn centroid(&self) -> Vector3<f64> {
        let sum = (0..self.joints.len()).fold(Vector3::zeros(), |acc, i| acc + self.point(i));
        sum / self.joints.len() as f64
    }
}

fn check_pair(op: &'static str, p: &Pose3D, q: &Pose3D) -> Result<()> {
    if p.num_joints() != q.num_joints() {
        return Err(Error::dim(op, &[p.num_joints(), 3], &[q.num_joints(), 3]));
    }
    Ok(())
}

/// Per-joint Euclidean distances.
pub fn joint_errors(p: &Pose3D, q: &Pose3D) -> Result<Vec<f64>> {
    check_pair("joint_errors", p, q)?;
    Ok(p.joints
        .iter()
        .zip(&q.joints)
        .map(|(a, b)| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt())
        .collect())
}

/// Mean per-joint position error (Protocol I).
pub fn mpjpe(p: &Pose3D, q: &Pose3D) -> Result<f64> {
    let e = joint_errors(p, q)?;
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

/// Whether Procrustes alignment may rescale the source pose.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AlignMode {
    /// Rotation and translation only.
    #[default]
    Rigid,
    /// Rotation, translation and a uniform scale.
    Similarity,
}

/// Transform `x ↦ scale·R·x + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
}

impl Alignment {
    pub fn apply(&self, pose: &Pose3D) -> Pose3D {
        let joints = (0..pose.num_joints())
            .map(|i| (self.scale * self.rotation * pose.point(i) + self.translation).into())
            .collect();
        Pose3D { joints }
    }
}

/// Least-squares alignment of `source` onto `target` (Kabsch, with the
/// reflection guard). When every source joint coincides the rotation is left
/// at identity and only centroids are matched.
pub fn procrustes(target: &Pose3D, source: &Pose3D, mode: AlignMode) -> Result<Alignment> {
    check_pair("procrustes", target, source)?;
    let (ct, cs) = (target.centroid(), source.centroid());
    let mut h = Matrix3::zeros();
    let mut spread = 0.0;
    for i in 0..target.num_joints() {
        let (a, b) = (target.point(i) - ct, source.point(i) - cs);
        h += b * a.transpose();
        spread += b.norm_squared();
    }
    if spread == 0.0 {
        return Ok(Alignment {
            rotation: Matrix3::identity(),
            translation: ct - cs,
            scale: 1.0,
        });
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u.expect("u requested"), svd.v_t.expect("v requested"));
    let v = v_t.transpose();
    let d = if (v * u.transpose()).determinant() < 0.0 { -1.0 } else { 1.0 };
    let flip = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d));
    let rotation = v * flip * u.transpose();
    let scale = match mode {
        AlignMode::Rigid => 1.0,
        AlignMode::Similarity => {
            let s = svd.singular_values;
            (s[0] + s[1] + d * s[2]) / spread
        }
    };
    Ok(Alignment {
        rotation,
        translation: ct - scale * rotation * cs,
        scale,
    })
}

/// MPJPE after rigid alignment of `q` onto `p` (Protocol II).
pub fn p_mpjpe(p: &Pose3D, q: &Pose3D) -> Result<f64> {
    p_mpjpe_with(p, q, AlignMode::Rigid)
}

pub fn p_mpjpe_with(p: &Pose3D, q: &Pose3D, mode: AlignMode) -> Result<f64> {
    let a = procrustes(p, q, mode)?;
    mpjpe(p, &a.apply(q))
}

fn velocities(seq: &[Pose3D]) -> Vec<Pose3D> {
    seq.windows(2)
        .map(|w| {
            let joints = w[1]
                .joints
                .iter()
                .zip(&w[0].joints)
                .map(|(b, a)| [b[0] - a[0], b[1] - a[1], b[2] - a[2]])
                .collect();
            Pose3D { joints }
        })
        .collect()
}

/// Mean per-joint velocity error in mm per frame (Protocol III).
pub fn mpjve(p: &[Pose3D], q: &[Pose3D]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::dim("mpjve", &[p.len()], &[q.len()]));
    }
    if p.len() < 2 {
        return Err(Error::Usage(format!("mpjve needs at least 2 frames, got {}", p.len())));
    }
    let (vp, vq) = (velocities(p), velocities(q));
    let mut total = 0.0;
    for (a, b) in vp.iter().zip(&vq) {
        total += mpjpe(a, b)?;
    }
    Ok(total / vp.len() as f64)
}

fn check_threshold(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::Config(format!("PCK threshold must be positive, got {t}")));
    }
    Ok(())
}

/// Percentage of `errors` strictly below `threshold`.
pub fn pck_from_errors(errors: &[f64], threshold: f64) -> Result<f64> {
    check_threshold(threshold)?;
    if errors.is_empty() {
        return Err(Error::Usage("PCK over zero joints".into()));
    }
    let hits = errors.iter().filter(|&&e| e < threshold).count();
    Ok(100.0 * hits as f64 / errors.len() as f64)
}

/// Percentage of joints of `q` within `threshold` mm of `p`.
pub fn pck(p: &Pose3D, q: &Pose3D, threshold: f64) -> Result<f64> {
    pck_from_errors(&joint_errors(p, q)?, threshold)
}

/// The default sweep: 5, 10, …, 150 mm.
pub fn auc_thresholds() -> Vec<f64> {
    let n = (PCK_THRESHOLD_MM / AUC_STEP_MM).round() as usize;
    (1..=n).map(|i| i as f64 * AUC_STEP_MM).collect()
}

/// Mean PCK over `thresholds`, as a percentage.
pub fn auc_from_errors(errors: &[f64], thresholds: &[f64]) -> Result<f64> {
    if thresholds.is_empty() {
        return Err(Error::Usage("AUC over an empty threshold list".into()));
    }
    let mut total = 0.0;
    for &t in thresholds {
        total += pck_from_errors(errors, t)?;
    }
    Ok(total / thresholds.len() as f64)
}

pub fn auc(p: &Pose3D, q: &Pose3D, thresholds: &[f64]) -> Result<f64> {
    auc_from_errors(&joint_errors(p, q)?, thresholds)
}

/// Aggregated metrics over a set of frames.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricReport {
    pub frames: usize,
    pub mpjpe: f64,
    pub p_mpjpe: f64,
    /// `None` when fewer than two frames were evaluated.
    pub mpjve: Option<f64>,
    pub pck: f64,
    pub auc: f64,
}

impl MetricReport {
    /// Evaluates `predicted` against `truth`, frame-aligned and in order.
    pub fn compute(truth: &[Pose3D], predicted: &[Pose3D]) -> Result<Self> {
        Self::compute_sequences(&[(truth, predicted)])
    }

    /// Pools several `(truth, predicted)` sequences. Position metrics average
    /// over all frames, velocity error over all transitions within sequences.
    pub fn compute_sequences(sequences: &[(&[Pose3D], &[Pose3D])]) -> Result<Self> {
        let (mut frames, mut transitions) = (0, 0);
        let (mut e1, mut e2, mut ev) = (0.0, 0.0, 0.0);
        let mut errors = Vec::new();
        for &(truth, predicted) in sequences {
            if truth.len() != predicted.len() {
                return Err(Error::dim("MetricReport", &[truth.len()], &[predicted.len()]));
            }
            for (p, q) in truth.iter().zip(predicted) {
                let e = joint_errors(p, q)?;
                e1 += e.iter().sum::<f64>() / e.len() as f64;
                e2 += p_mpjpe(p, q)?;
                errors.extend(e);
            }
            frames += truth.len();
            if truth.len() >= 2 {
                ev += mpjve(truth, predicted)? * (truth.len() - 1) as f64;
                transitions += truth.len() - 1;
            }
        }
        if frames == 0 {
            return Err(Error::Usage("metric report over zero frames".into()));
        }
        let n = frames as f64;
        Ok(Self {
            frames,
            mpjpe: e1 / n,
            p_mpjpe: e2 / n,
            mpjve: (transitions > 0).then(|| ev / transitions as f64),
            pck: pck_from_errors(&errors, PCK_THRESHOLD_MM)?,
            auc: auc_from_errors(&errors, &auc_thresholds())?,
        })
    }

    /// `(metric, value)` pairs in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        let mut v = vec![("mpjpe", self.mpjpe), ("p_mpjpe", self.p_mpjpe)];
        if let Some(x) = self.mpjve {
            v.push(("mpjve", x));
        }
        v.push(("pck150", self.pck));
        v.push(("auc", self.auc));
        v
    }
}

/// CSV with header `action,metric,value`, values at full precision.
pub fn report_csv(rows: &[(String, MetricReport)]) -> String {
    let mut out = String::from("action,metric,value\n");
    for (action, report) in rows {
        for (name, value) in report.entries() {
            out.push_str(&format!("{action},{name},{value:.16e}\n"));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use nalgebra::Rotation3;
    use rand::Rng as _;

    fn pose(j: &[[f64; 3]]) -> Pose3D {
        Pose3D::new(j.to_vec()).unwrap()
    }

    fn random_pose(rng: &mut crate::Rng, j: usize) -> Pose3D {
        Pose3D::new((0..j).map(|_| [0; 3].map(|_| rng.random_range(-500.0..500.0))).collect()).unwrap()
    }

    #[test]
    fn hand_cases() {
        let p = pose(&[[0.0; 3], [0.0; 3]]);
        let q = pose(&[[3.0, 4.0, 0.0], [0.0; 3]]);
        assert_eq!(mpjpe(&p, &q).unwrap(), 2.5);
        assert_eq!(mpjpe(&p, &p).unwrap(), 0.0);
        let shifted = pose(&[[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert_eq!(mpjpe(&p, &shifted).unwrap(), 1.0);
        assert!(mpjpe(&p, &pose(&[[0.0; 3]])).is_err());
    }

    #[test]
    fn pck_and_auc_boundaries() {
        let p = pose(&[[0.0; 3]; 4]);
        assert_eq!(pck(&p, &p, 150.0).unwrap(), 100.0);
        assert_eq!(auc(&p, &p, &auc_thresholds()).unwrap(), 100.0);
        let far = pose(&[[200.0, 0.0, 0.0]; 4]);
        assert_eq!(pck(&p, &far, 150.0).unwrap(), 0.0);
        assert_eq!(auc(&p, &far, &auc_thresholds()).unwrap(), 0.0);
        let mixed = pose(&[[10.0, 0.0, 0.0], [0.0, 10.0, 0.0], [300.0, 0.0, 0.0], [0.0, 0.0, 300.0]]);
        assert_eq!(pck(&p, &mixed, 150.0).unwrap(), 50.0);
        assert!(pck(&p, &p, 0.0).is_err());
        assert!(pck(&p, &p, -1.0).is_err());
        assert_eq!(auc_thresholds().len(), 30);
        assert_eq!(*auc_thresholds().last().unwrap(), 150.0);
    }

    #[test]
    fn mpjve_hand_case() {
        // joint 1 moves (0,0,0) -> (3,4,0) -> (3,4,0); the prediction stays still
        let still = pose(&[[0.0; 3], [0.0; 3]]);
        let truth = vec![still.clone(), pose(&[[0.0; 3], [3.0, 4.0, 0.0]]), pose(&[[0.0; 3], [3.0, 4.0, 0.0]])];
        let pred = vec![still.clone(), still.clone(), still];
        // velocity errors: frame 1 -> (5+0)/2, frame 2 -> 0
        assert_eq!(mpjve(&truth, &pred).unwrap(), 1.25);
        assert_eq!(mpjve(&truth, &truth).unwrap(), 0.0);
        assert!(mpjve(&truth[..1], &pred[..1]).is_err());
    }

    #[test]
    fn degenerate_source_uses_centroids() {
        let p = pose(&[[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]);
        let q = pose(&[[5.0, 5.0, 5.0]; 3]);
        let a = procrustes(&p, &q, AlignMode::Rigid).unwrap();
        assert_eq!(a.rotation, Matrix3::identity());
        let c = p.centroid();
        let expected = (0..3).map(|i| (p.point(i) - c).norm()).sum::<f64>() / 3.0;
        assert!((p_mpjpe(&p, &q).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn exact_rigid_copies_align_to_zero() {
        let mut rng = seeded(4);
        for _ in 0..20 {
            let p = random_pose(&mut rng, 17);
            let r = Rotation3::from_euler_angles(rng.random_range(-3.0..3.0), rng.random_range(-1.5..1.5), rng.random_range(-3.0..3.0));
            let t = Vector3::new(rng.random_range(-1e3..1e3), rng.random_range(-1e3..1e3), rng.random_range(-1e3..1e3));
            let q = Alignment { rotation: *r.matrix(), translation: t, scale: 1.0 }.apply(&p);
            assert!(p_mpjpe(&p, &q).unwrap() < 1e-9);
            let a = procrustes(&p, &q, AlignMode::Rigid).unwrap();
            assert!((a.rotation.determinant() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reflection_is_not_used() {
        // a mirrored copy cannot be aligned by a proper rotation
        let mut rng = seeded(8);
        let p = random_pose(&mut rng, 8);
        let mirrored = Pose3D::new(p.joints().iter().map(|j| [-j[0], j[1], j[2]]).collect()).unwrap();
        let a = procrustes(&p, &mirrored, AlignMode::Rigid).unwrap();
        assert!((a.rotation.determinant() - 1.0).abs() < 1e-12);
        assert!(p_mpjpe(&p, &mirrored).unwrap() > 1.0);
    }

    #[test]
    fn similarity_mode_recovers_scale() {
        let mut rng = seeded(9);
        let p = random_pose(&mut rng, 10);
        let r = Rotation3::from_euler_angles(0.3, -0.2, 1.1);
        let q = Alignment { rotation: *r.matrix(), translation: Vector3::new(4.0, 5.0, 6.0), scale: 0.5 }.apply(&p);
        assert!(p_mpjpe_with(&p, &q, AlignMode::Similarity).unwrap() < 1e-9);
        assert!(p_mpjpe(&p, &q).unwrap() > 1.0);
        let a = procrustes(&p, &q, AlignMode::Similarity).unwrap();
        assert!((a.scale - 2.0).abs() < 1e-12);
    }

    #[test]
    fn report_of_truth_against_itself() {
        let mut rng = seeded(2);
        let seq: Vec<Pose3D> = (0..5).map(|_| random_pose(&mut rng, 17)).collect();
        let r = MetricReport::compute(&seq, &seq).unwrap();
        assert_eq!((r.mpjpe, r.mpjve, r.pck, r.auc), (0.0, Some(0.0), 100.0, 100.0));
        assert!(r.p_mpjpe < 1e-9);
        let csv = report_csv(&[("walk".into(), r)]);
        assert_eq!(csv.lines().count(), 6);
        assert!(csv.starts_with("action,metric,value\nwalk,mpjpe,"));
    }
}
