//! Pose sequences: skeleton metadata, clips and their file format, sliding
//! windows with center-frame targets, flip augmentation and a synthetic
//! articulated-motion generator.

use std::path::Path;

use nalgebra::{Rotation3, Vector3};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Pose3D;
use crate::model::write_atomic;
use crate::rng;

pub const CLIP_FORMAT: &str = "convformer-clip";
pub const CLIP_VERSION: u32 = 1;

/// Human3.6M 17-joint layout.
pub const H36M_JOINTS: [&str; 17] = [
    "hip", "r_hip", "r_knee", "r_foot", "l_hip", "l_knee", "l_foot", "spine", "thorax", "neck", "head",
    "l_shoulder", "l_elbow", "l_wrist", "r_shoulder", "r_elbow", "r_wrist",
];
pub const H36M_PARENTS: [Option<usize>; 17] = [
    None,
    Some(0),
    Some(1),
    Some(2),
    Some(0),
    Some(4),
    Some(5),
    Some(0),
    Some(7),
    Some(8),
    Some(9),
    Some(8),
    Some(11),
    Some(12),
    Some(8),
    Some(14),
    Some(15),
];
pub const H36M_SYMMETRY: [(usize, usize); 6] = [(1, 4), (2, 5), (3, 6), (11, 14), (12, 15), (13, 16)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkeletonMeta {
    pub joint_names: Vec<String>,
    pub root: usize,
    /// Left/right joint pairs swapped by a horizontal flip.
    pub symmetry: Vec<(usize, usize)>,
    pub fps: f64,
}

impl SkeletonMeta {
    pub fn h36m() -> Self {
        Self {
            joint_names: H36M_JOINTS.iter().map(|s| s.to_string()).collect(),
            root: 0,
            symmetry: H36M_SYMMETRY.to_vec(),
            fps: 50.0,
        }
    }

    pub fn num_joints(&self) -> usize {
        self.joint_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.num_joints();
        if j == 0 {
            return Err(Error::Config("skeleton with no joints".into()));
        }
        if self.root >= j {
            return Err(Error::Config(format!("root {} out of range for {j} joints", self.root)));
        }
        if !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::Config(format!("fps must be positive, got {}", self.fps)));
        }
        if self.symmetry.iter().any(|&(a, b)| a == self.root || b == self.root) {
            return Err(Error::Config("root joint appears in a symmetry pair".into()));
        }
        mirror_map(j, &self.symmetry).map(|_| ())
    }
}

/// Joint permutation of a flip: `map[i]` is the joint that lands on `i`.
/// Fails unless the pairs form an involution over `j` joints.
pub fn mirror_map(j: usize, pairs: &[(usize, usize)]) -> Result<Vec<usize>> {
    let mut map: Vec<usize> = (0..j).collect();
    let mut seen = vec![false; j];
    for &(a, b) in pairs {
        if a >= j || b >= j {
            return Err(Error::Config(format!("symmetry pair ({a}, {b}) out of range for {j} joints")));
        }
        if a == b || seen[a] || seen[b] {
            return Err(Error::Config(format!("symmetry pair ({a}, {b}) is not part of an involution")));
        }
        seen[a] = true;
        seen[b] = true;
        map[a] = b;
        map[b] = a;
    }
    Ok(map)
}

/// Mirrors a `J × C` pose: negates the first coordinate and swaps each pair.
pub fn horizontal_flip(pose: &[f64], channels: usize, pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
    if channels == 0 || pose.len() % channels != 0 {
        return Err(Error::dim("horizontal_flip", &[pose.len()], &[channels]));
    }
    let map = mirror_map(pose.len() / channels, pairs)?;
    let mut out = vec![0.0; pose.len()];
    for (i, &src) in map.iter().enumerate() {
        let (dst, src) = (&mut out[i * channels..(i + 1) * channels], &pose[src * channels..(src + 1) * channels]);
        dst.copy_from_slice(src);
        dst[0] = -dst[0];
    }
    Ok(out)
}

/// A pose sequence. 3D is root-relative millimeters, 2D is image coordinates
/// normalized to `[-1, 1]` by the image half-extent.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionClip {
    meta: SkeletonMeta,
    poses3d: Vec<f32>,
    poses2d: Vec<f32>,
}

impl MotionClip {
    pub fn new(meta: SkeletonMeta, poses3d: Vec<f32>, poses2d: Vec<f32>) -> Result<Self> {
        meta.validate()?;
        let j = meta.num_joints();
        if poses3d.len() % (j * 3) != 0 || poses2d.len() % (j * 2) != 0 || poses3d.len() / 3 != poses2d.len() / 2 {
            return Err(Error::ExtentMismatch(format!(
                "{} 3D and {} 2D values do not describe the same frames of {j} joints",
                poses3d.len(),
                poses2d.len()
            )));
        }
        Ok(Self { meta, poses3d, poses2d })
    }

    pub fn meta(&self) -> &SkeletonMeta {
        &self.meta
    }

    pub fn len(&self) -> usize {
        self.poses3d.len() / (3 * self.meta.num_joints())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_joints(&self) -> usize {
        self.meta.num_joints()
    }

    pub fn poses3d(&self) -> &[f32] {
        &self.poses3d
    }

    pub fn poses2d(&self) -> &[f32] {
        &self.poses2d
    }

    pub fn frame3d(&self, i: usize) -> &[f32] {
        let n = 3 * self.num_joints();
        &self.poses3d[i * n..(i + 1) * n]
    }

    pub fn frame2d(&self, i: usize) -> &[f32] {
        let n = 2 * self.num_joints();
        &self.poses2d[i * n..(i + 1) * n]
    }

    pub fn pose(&self, i: usize) -> Pose3D {
        let coords: Vec<f64> = self.frame3d(i).iter().map(|&v| v as f64).collect();
        Pose3D::from_flat(&coords).expect("stored poses are finite")
    }

    /// Frames `start..end` as a new clip with the same metadata.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.len() {
            return Err(Error::Usage(format!("frame range {start}..{end} outside clip of {}", self.len())));
        }
        let (n3, n2) = (3 * self.num_joints(), 2 * self.num_joints());
        Self::new(
            self.meta.clone(),
            self.poses3d[start * n3..end * n3].to_vec(),
            self.poses2d[start * n2..end * n2].to_vec(),
        )
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), &self.to_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = ClipHeader {
            format: CLIP_FORMAT.into(),
            schema_version: CLIP_VERSION,
            joints: self.num_joints(),
            frames: self.len(),
            fps: self.meta.fps,
            joint_names: self.meta.joint_names.clone(),
            symmetry: self.meta.symmetry.clone(),
            root: self.meta.root,
            endianness: Endianness::Little,
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(b'\n');
        for v in self.poses3d.iter().chain(&self.poses2d) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::MalformedHeader("clip has no header line".into()))?;
        let header: ClipHeader =
            serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::MalformedHeader(e.to_string()))?;
        if header.format != CLIP_FORMAT {
            return Err(Error::MalformedHeader(format!("unexpected format {:?}", header.format)));
        }
        if header.schema_version != CLIP_VERSION {
            return Err(Error::VersionMismatch {
                found: header.schema_version,
                expected: CLIP_VERSION,
            });
        }
        if header.joint_names.len() != header.joints {
            return Err(Error::ExtentMismatch(format!(
                "header declares {} joints but names {}",
                header.joints,
                header.joint_names.len()
            )));
        }
        let count = header.frames * header.joints * 5;
        let payload = &bytes[nl + 1..];
        let want = count * 4;
        if payload.len() < want {
            return Err(Error::Truncated {
                expected: want,
                found: payload.len(),
            });
        }
        if payload.len() > want {
            return Err(Error::ExtentMismatch(format!("clip payload has {} trailing bytes", payload.len() - want)));
        }
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| {
                let b = c.try_into().expect("4 bytes");
                match header.endianness {
                    Endianness::Little => f32::from_le_bytes(b),
                    Endianness::Big => f32::from_be_bytes(b),
                }
            })
            .collect();
        let split = header.frames * header.joints * 3;
        let meta = SkeletonMeta {
            joint_names: header.joint_names,
            root: header.root,
            symmetry: header.symmetry,
            fps: header.fps,
        };
        Self::new(meta, values[..split].to_vec(), values[split..].to_vec())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Endianness {
    Little,
    Big,
}

/// First line of a clip file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClipHeader {
    pub format: String,
    pub schema_version: u32,
    pub joints: usize,
    pub frames: usize,
    pub fps: f64,
    pub joint_names: Vec<String>,
    pub symmetry: Vec<(usize, usize)>,
    pub root: usize,
    pub endianness: Endianness,
}

/// Source frame indices of the window of length `t` centered on `center`
/// in a clip of `n` frames, replicating the edge frames.
pub fn window_frames(n: usize, t: usize, center: usize) -> impl Iterator<Item = usize> {
    let half = (t / 2) as isize;
    let last = n as isize - 1;
    (-half..=half).map(move |o| (center as isize + o).clamp(0, last) as usize)
}

/// A `T × J × 2` input window and the `J × 3` pose of its center frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub center: usize,
    pub input: Vec<f64>,
    pub target: Vec<f64>,
}

/// One window per frame of `clip`, in frame order.
pub fn sliding_windows(clip: &MotionClip, t: usize) -> Result<Windows<'_>> {
    if t % 2 == 0 {
        return Err(Error::Config(format!("window length must be odd, got {t}")));
    }
    if clip.is_empty() {
        return Err(Error::Usage("sliding windows over an empty clip".into()));
    }
    Ok(Windows { clip, t, next: 0 })
}

pub struct Windows<'a> {
    clip: &'a MotionClip,
    t: usize,
    next: usize,
}

impl Windows<'_> {
    pub fn window_at(&self, center: usize) -> Window {
        let mut input = Vec::with_capacity(self.t * self.clip.num_joints() * 2);
        for f in window_frames(self.clip.len(), self.t, center) {
            input.extend(self.clip.frame2d(f).iter().map(|&v| v as f64));
        }
        Window {
            center,
            input,
            target: self.clip.frame3d(center).iter().map(|&v| v as f64).collect(),
        }
    }
}

impl Iterator for Windows<'_> {
    type Item = Window;

    fn next(&mut self) -> Option<Window> {
        if self.next >= self.clip.len() {
            return None;
        }
        self.next += 1;
        Some(self.window_at(self.next - 1))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = self.clip.len() - self.next;
        (n, Some(n))
    }
}

impl ExactSizeIterator for Windows<'_> {}

/// Pinhole camera looking down +z; image coordinates are normalized so the
/// image spans `[-1, 1]` horizontally.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub focal: f64,
    pub width: f64,
    pub height: f64,
}

impl Default for Camera {
    fn default() -> Self {
        Self {
            focal: 1000.0,
            width: 1000.0,
            height: 1000.0,
        }
    }
}

impl Camera {
    /// Pixel coordinates of a camera-frame point (mm).
    pub fn project_pixels(&self, p: [f64; 3]) -> [f64; 2] {
        [
            self.focal * p[0] / p[2] + self.width / 2.0,
            self.focal * p[1] / p[2] + self.height / 2.0,
        ]
    }

    pub fn project(&self, p: [f64; 3]) -> [f64; 2] {
        let [u, v] = self.project_pixels(p);
        let half = self.width / 2.0;
        [(u - self.width / 2.0) / half, (v - self.height / 2.0) / half]
    }
}

/// Subject distance from the camera, mm.
pub const SYNTH_DEPTH: f64 = 4500.0;

/// Bone vectors of the rest pose in the body frame (x left, y up, z toward
/// the camera), mm, indexed by child joint.
const REST_OFFSETS: [[f64; 3]; 17] = [
    [0.0, 0.0, 0.0],
    [-130.0, 0.0, 0.0],
    [0.0, -450.0, 0.0],
    [0.0, -440.0, 0.0],
    [130.0, 0.0, 0.0],
    [0.0, -450.0, 0.0],
    [0.0, -440.0, 0.0],
    [0.0, 230.0, 0.0],
    [0.0, 250.0, 0.0],
    [0.0, 110.0, 0.0],
    [0.0, 120.0, 0.0],
    [150.0, 0.0, 0.0],
    [0.0, -280.0, 0.0],
    [0.0, -250.0, 0.0],
    [-150.0, 0.0, 0.0],
    [0.0, -280.0, 0.0],
    [0.0, -250.0, 0.0],
];

/// Joint-angle ranges in radians per body axis `[x, y, z]`, indexed by
/// joint. Hinge joints bend one way only. Leaf joints carry no rotation.
const ANGLE_RANGES: [[(f64, f64); 3]; 17] = {
    const NONE: (f64, f64) = (0.0, 0.0);
    [
        [(-0.1, 0.1), (-0.4, 0.4), (-0.1, 0.1)],
        [(-0.8, 0.3), (-0.2, 0.2), (-0.3, 0.05)],
        [(0.0, 1.3), NONE, NONE],
        [NONE; 3],
        [(-0.8, 0.3), (-0.2, 0.2), (-0.05, 0.3)],
        [(0.0, 1.3), NONE, NONE],
        [NONE; 3],
        [(-0.2, 0.3), (-0.3, 0.3), (-0.15, 0.15)],
        [(-0.1, 0.1), (-0.1, 0.1), (-0.1, 0.1)],
        [(-0.3, 0.3), (-0.5, 0.5), (-0.2, 0.2)],
        [NONE; 3],
        [(-1.2, 0.6), (-0.3, 0.3), (0.0, 1.2)],
        [(-1.5, 0.0), NONE, NONE],
        [NONE; 3],
        [(-1.2, 0.6), (-0.3, 0.3), (-1.2, 0.0)],
        [(-1.5, 0.0), NONE, NONE],
        [NONE; 3],
    ]
};

/// One sinusoid per rotation axis of a joint, sweeping a sub-range of the
/// joint's limits.
#[derive(Clone, Copy, Debug)]
struct Oscillator {
    center: [f64; 3],
    amplitude: [f64; 3],
    omega: [f64; 3],
    phase: [f64; 3],
}

impl Oscillator {
    fn random(rng: &mut crate::Rng, ranges: &[(f64, f64); 3]) -> Self {
        let mut o = Self {
            center: [0.0; 3],
            amplitude: [0.0; 3],
            omega: [0.0; 3],
            phase: [0.0; 3],
        };
        for (a, &(lo, hi)) in ranges.iter().enumerate() {
            let half = 0.5 * (hi - lo) * rng.random_range(0.6..1.0);
            o.center[a] = 0.5 * (lo + hi);
            o.amplitude[a] = half;
            o.omega[a] = rng.random_range(0.02..0.15);
            o.phase[a] = rng.random_range(0.0..std::f64::consts::TAU);
        }
        o
    }

    fn rotation(&self, frame: f64) -> Rotation3<f64> {
        let a: [f64; 3] =
            std::array::from_fn(|i| self.center[i] + self.amplitude[i] * (self.omega[i] * frame + self.phase[i]).sin());
        Rotation3::from_euler_angles(a[0], a[1], a[2])
    }
}

/// Forward-kinematics motion before quantization to a clip.
#[derive(Clone, Debug)]
pub struct SynthMotion {
    pub meta: SkeletonMeta,
    pub camera: Camera,
    /// Per frame, per joint camera-frame position in mm.
    pub positions: Vec<Vec<[f64; 3]>>,
}

impl SynthMotion {
    pub fn bone_lengths(&self, frame: usize) -> Vec<f64> {
        let p = &self.positions[frame];
        H36M_PARENTS
            .iter()
            .enumerate()
            .filter_map(|(j, parent)| parent.map(|q| (Vector3::from(p[j]) - Vector3::from(p[q])).norm()))
            .collect()
    }

    pub fn to_clip(&self) -> MotionClip {
        let root = self.meta.root;
        let mut poses3d = Vec::with_capacity(self.positions.len() * 17 * 3);
        let mut poses2d = Vec::with_capacity(self.positions.len() * 17 * 2);
        for frame in &self.positions {
            let r = frame[root];
            for p in frame {
                poses3d.extend([p[0] - r[0], p[1] - r[1], p[2] - r[2]].map(|v| v as f32));
                poses2d.extend(self.camera.project(*p).map(|v| v as f32));
            }
        }
        MotionClip::new(self.meta.clone(), poses3d, poses2d).expect("generator output is congruent")
    }
}

/// Rest bone length of each non-root joint, indexed like [`SynthMotion::bone_lengths`].
pub fn rest_bone_lengths() -> Vec<f64> {
    (1..17).map(|j| Vector3::from(REST_OFFSETS[j]).norm()).collect()
}

/// Kinematic-chain motion on the 17-joint skeleton with smooth periodic
/// joint angles, seen by [`Camera::default`] from [`SYNTH_DEPTH`] mm.
pub fn synthesize(seed: u64, n_frames: usize) -> Result<SynthMotion> {
    if n_frames == 0 {
        return Err(Error::Config("synthetic clip needs at least one frame".into()));
    }
    let mut rng = rng::stream(seed, 0x5eed);
    let yaw0 = rng.random_range(-0.8..0.8);
    let joint_osc: Vec<Oscillator> = ANGLE_RANGES.iter().map(|r| Oscillator::random(&mut rng, r)).collect();
    let sway = rng.random_range(0.0..200.0);
    // body y is up while camera y points down
    let to_camera = Rotation3::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI);
    let mut positions = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        let t = f as f64;
        let mut global = vec![Rotation3::identity(); 17];
        let mut pos = vec![Vector3::zeros(); 17];
        global[0] = Rotation3::from_axis_angle(&Vector3::y_axis(), yaw0) * joint_osc[0].rotation(t);
        pos[0] = Vector3::new(sway * (0.013 * t).sin(), 0.0, 0.0);
        for j in 1..17 {
            let p = H36M_PARENTS[j].expect("non-root joint");
            pos[j] = pos[p] + global[p] * Vector3::from(REST_OFFSETS[j]);
            global[j] = global[p] * joint_osc[j].rotation(t);
        }
        let offset = Vector3::new(0.0, 0.0, SYNTH_DEPTH);
        positions.push(pos.iter().map(|p| (to_camera * p + offset).into()).collect());
    }
    Ok(SynthMotion {
        meta: SkeletonMeta::h36m(),
        camera: Camera::default(),
        positions,
    })
}

pub fn synth_motion(seed: u64, n_frames: usize) -> Result<MotionClip> {
    Ok(synthesize(seed, n_frames)?.to_clip())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_meta() -> SkeletonMeta {
        SkeletonMeta {
            joint_names: vec!["root".into(), "a".into(), "b".into()],
            root: 0,
            symmetry: vec![(1, 2)],
            fps: 10.0,
        }
    }

    #[test]
    fn h36m_metadata_is_valid() {
        let m = SkeletonMeta::h36m();
        m.validate().unwrap();
        let map = mirror_map(17, &m.symmetry).unwrap();
        assert!((0..17).all(|i| map[map[i]] == i));
    }

    #[test]
    fn malformed_symmetry_is_rejected() {
        assert!(mirror_map(3, &[(1, 1)]).is_err());
        assert!(mirror_map(3, &[(1, 2), (2, 0)]).is_err());
        assert!(mirror_map(3, &[(1, 5)]).is_err());
        let mut m = tiny_meta();
        m.symmetry = vec![(0, 1)];
        assert!(m.validate().is_err());
    }

    #[test]
    fn flip_swaps_a_mirrored_pair() {
        let pose = [0.0, 0.0, 0.0, 1.0, 2.0, 3.0, -1.0, 2.0, 3.0];
        let flipped = horizontal_flip(&pose, 3, &[(1, 2)]).unwrap();
        assert_eq!(flipped, vec![-0.0, 0.0, 0.0, 1.0, 2.0, 3.0, -1.0, 2.0, 3.0]);
        let asym = [5.0, 1.0, 1.0, 2.0, 7.0, 3.0];
        assert_eq!(horizontal_flip(&asym, 2, &[(1, 2)]).unwrap(), vec![-5.0, 1.0, -7.0, 3.0, -1.0, 2.0]);
        assert!(horizontal_flip(&asym, 4, &[]).is_err());
    }

    #[test]
    fn window_frames_replicate_edges() {
        assert_eq!(window_frames(1, 9, 0).collect::<Vec<_>>(), vec![0; 9]);
        assert_eq!(window_frames(100, 9, 50).collect::<Vec<_>>(), (46..=54).collect::<Vec<_>>());
        assert_eq!(window_frames(100, 5, 0).collect::<Vec<_>>(), vec![0, 0, 0, 1, 2]);
        assert_eq!(window_frames(100, 5, 99).collect::<Vec<_>>(), vec![97, 98, 99, 99, 99]);
    }

    #[test]
    fn windows_cover_every_frame() {
        let clip = synth_motion(1, 100).unwrap();
        let windows: Vec<Window> = sliding_windows(&clip, 9).unwrap().collect();
        assert_eq!(windows.len(), 100);
        for (k, w) in windows.iter().enumerate() {
            assert_eq!(w.center, k);
            assert_eq!(w.input.len(), 9 * 17 * 2);
            let mid = &w.input[4 * 34..5 * 34];
            assert!(mid.iter().zip(clip.frame2d(k)).all(|(&a, &b)| a == b as f64));
            assert!(w.target.iter().zip(clip.frame3d(k)).all(|(&a, &b)| a == b as f64));
        }
        let single = synth_motion(1, 1).unwrap();
        let w: Vec<Window> = sliding_windows(&single, 9).unwrap().collect();
        assert_eq!(w.len(), 1);
        assert!(w[0].input.chunks(34).all(|f| f == &w[0].input[..34]));
        assert!(sliding_windows(&clip, 4).is_err());
        assert!(sliding_windows(&clip.slice(0, 0).unwrap(), 3).is_err());
    }

    #[test]
    fn synthetic_motion_invariants() {
        let motion = synthesize(3, 200).unwrap();
        let rest = rest_bone_lengths();
        for f in 0..200 {
            for (a, b) in motion.bone_lengths(f).iter().zip(&rest) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        let clip = motion.to_clip();
        assert!((0..200).all(|f| clip.frame3d(f)[..3] == [0.0; 3]));
        assert!(clip.poses2d().iter().all(|v| v.abs() < 1.0));
        assert_eq!(clip, synth_motion(3, 200).unwrap());
        assert_ne!(clip, synth_motion(4, 200).unwrap());
        assert!(synth_motion(3, 0).is_err());
    }

    #[test]
    fn pinhole_projection_by_hand() {
        let c = Camera::default();
        // u = 1000·450/4500 + 500 = 600, v = 1000·(−900)/4500 + 500 = 300
        assert_eq!(c.project_pixels([450.0, -900.0, 4500.0]), [600.0, 300.0]);
        assert_eq!(c.project([450.0, -900.0, 4500.0]), [0.2, -0.4]);
        let motion = synthesize(5, 3).unwrap();
        let clip = motion.to_clip();
        let p = motion.positions[2][13];
        let expected = [1000.0 * p[0] / p[2] / 500.0, 1000.0 * p[1] / p[2] / 500.0];
        let got = &clip.frame2d(2)[26..28];
        assert!((got[0] as f64 - expected[0]).abs() < 1e-6 && (got[1] as f64 - expected[1]).abs() < 1e-6);
    }

    #[test]
    fn clip_bytes_round_trip() {
        let clip = synth_motion(2, 7).unwrap();
        let bytes = clip.to_bytes();
        assert_eq!(MotionClip::from_bytes(&bytes).unwrap(), clip);
        assert_eq!(MotionClip::from_bytes(&bytes).unwrap().to_bytes(), bytes);
    }

    #[test]
    fn damaged_clip_files_are_distinguished() {
        let clip = synth_motion(2, 4).unwrap();
        let bytes = clip.to_bytes();
        let truncated = MotionClip::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert_eq!(truncated.kind(), "truncated");
        let mut long = bytes.clone();
        long.extend_from_slice(&[0; 4]);
        assert_eq!(MotionClip::from_bytes(&long).unwrap_err().kind(), "extent_mismatch");
        let text = String::from_utf8_lossy(&bytes[..bytes.iter().position(|&b| b == b'\n').unwrap()]).into_owned();
        let body = &bytes[text.len()..];
        let with_header = |h: String| [h.into_bytes(), body.to_vec()].concat();
        let v2 = with_header(text.replace("\"schema_version\":1", "\"schema_version\":2"));
        assert_eq!(MotionClip::from_bytes(&v2).unwrap_err().kind(), "version_mismatch");
        let joints = with_header(text.replace("\"joints\":17", "\"joints\":16"));
        assert_eq!(MotionClip::from_bytes(&joints).unwrap_err().kind(), "extent_mismatch");
        assert_eq!(MotionClip::from_bytes(b"{not json\n").unwrap_err().kind(), "malformed_header");
        assert_eq!(MotionClip::from_bytes(b"no newline").unwrap_err().kind(), "malformed_header");
    }

    #[test]
    fn big_endian_payload_is_honored() {
        let clip = synth_motion(6, 3).unwrap();
        let bytes = clip.to_bytes();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let header = String::from_utf8(bytes[..nl].to_vec()).unwrap().replace("\"little\"", "\"big\"");
        let mut be = header.into_bytes();
        be.push(b'\n');
        for v in clip.poses3d().iter().chain(clip.poses2d()) {
            be.extend_from_slice(&v.to_be_bytes());
        }
        assert_eq!(MotionClip::from_bytes(&be).unwrap(), clip);
    }
}
