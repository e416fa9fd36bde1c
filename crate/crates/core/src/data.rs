//! Pose samples, the line-delimited dataset format, input normalization and
//! a forward-kinematics generator for synthetic articulated poses.
//!
//! A dataset file starts with an optional header line
//! `{"schema":"skelgnn-pose","version":1}` followed by one JSON record per
//! line:
//!
//! ```text
//! {"seq":"s01","frame":0,"joints_2d":[[x,y],...],"joints_3d":[[x,y,z],...],"image_size":[w,h],"action":"walk"}
//! ```
//!
//! `joints_3d` and `action` may be `null`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::DataError;
use crate::rng;
use crate::skeleton::SkeletonTopology;

pub const DATASET_SCHEMA: &str = "skelgnn-pose";
pub const DATASET_VERSION: u32 = 1;

/// One frame of 2D keypoints with optional 3D ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseSample {
    pub seq: String,
    pub frame: usize,
    pub joints_2d: Vec<[f64; 2]>,
    pub joints_3d: Option<Vec<[f64; 3]>>,
    pub image_size: [u32; 2],
    pub action: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    schema: String,
    version: u32,
}

/// Maps pixel coordinates to `[-1, 1]`: `x' = 2x/w - 1`, `y' = 2y/h - 1`.
pub fn normalize_2d(joints: &[[f64; 2]], image_size: [u32; 2]) -> Result<Vec<[f64; 2]>, DataError> {
    let [w, h] = image_size;
    if w == 0 || h == 0 {
        return Err(DataError::InvalidImageSize(w as f64, h as f64));
    }
    let (w, h) = (w as f64, h as f64);
    Ok(joints
        .iter()
        .map(|p| [2.0 * p[0] / w - 1.0, 2.0 * p[1] / h - 1.0])
        .collect())
}

/// Inverse of [`normalize_2d`].
pub fn denormalize_2d(joints: &[[f64; 2]], image_size: [u32; 2]) -> Result<Vec<[f64; 2]>, DataError> {
    let [w, h] = image_size;
    if w == 0 || h == 0 {
        return Err(DataError::InvalidImageSize(w as f64, h as f64));
    }
    let (w, h) = (w as f64, h as f64);
    Ok(joints
        .iter()
        .map(|p| [(p[0] + 1.0) * w / 2.0, (p[1] + 1.0) * h / 2.0])
        .collect())
}

fn parse_err(line: usize, message: impl ToString) -> DataError {
    DataError::ParseError {
        line,
        message: message.to_string(),
    }
}

/// Parses a dataset, checking every record against `num_joints`. Line
/// numbers in errors are 1-based.
pub fn read_dataset(reader: impl BufRead, num_joints: usize) -> Result<Vec<PoseSample>, DataError> {
    let mut out = Vec::new();
    let mut first = true;
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| parse_err(lineno, e))?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        if std::mem::take(&mut first) {
            if let Ok(h) = serde_json::from_str::<Header>(text) {
                if h.schema != DATASET_SCHEMA {
                    return Err(parse_err(lineno, format!("unknown schema `{}`", h.schema)));
                }
                if h.version != DATASET_VERSION {
                    return Err(parse_err(lineno, format!("unsupported version {}", h.version)));
                }
                continue;
            }
        }
        let s: PoseSample = serde_json::from_str(text).map_err(|e| parse_err(lineno, e))?;
        let mismatch = |found| DataError::JointCountMismatch {
            line: lineno,
            expected: num_joints,
            found,
        };
        if s.joints_2d.len() != num_joints {
            return Err(mismatch(s.joints_2d.len()));
        }
        if let Some(j3) = &s.joints_3d {
            if j3.len() != num_joints {
                return Err(mismatch(j3.len()));
            }
        }
        if s.image_size[0] == 0 || s.image_size[1] == 0 {
            return Err(parse_err(lineno, "image_size must be positive"));
        }
        out.push(s);
    }
    Ok(out)
}

pub fn load_dataset(path: &Path, num_joints: usize) -> Result<Vec<PoseSample>, DataError> {
    let file = fs::File::open(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    read_dataset(BufReader::new(file), num_joints)
}

/// Header line plus one record per line.
pub fn dataset_to_string(samples: &[PoseSample]) -> String {
    let header = Header {
        schema: DATASET_SCHEMA.into(),
        version: DATASET_VERSION,
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for s in samples {
        out.push_str(&serde_json::to_string(s).expect("sample serializes"));
        out.push('\n');
    }
    out
}

pub fn save_dataset(path: &Path, samples: &[PoseSample]) -> Result<(), DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(dataset_to_string(samples).as_bytes()).map_err(io)
}

/// For every sample, the indices of a `frames`-long window centred on it
/// within its sequence (ordered by frame). Windows that run past either end
/// of the sequence repeat the boundary frame.
pub fn temporal_windows(samples: &[PoseSample], frames: usize) -> Vec<Vec<usize>> {
    let mut by_seq: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_seq.entry(&s.seq).or_default().push(i);
    }
    let mut position = vec![(0usize, ""); samples.len()];
    for (seq, idx) in by_seq.iter_mut() {
        idx.sort_by_key(|&i| (samples[i].frame, i));
        for (p, &i) in idx.iter().enumerate() {
            position[i] = (p, seq);
        }
    }
    let half = frames as isize / 2;
    (0..samples.len())
        .map(|i| {
            let (p, seq) = position[i];
            let idx = &by_seq[seq];
            (0..frames as isize)
                .map(|k| {
                    let q = (p as isize + k - half).clamp(0, idx.len() as isize - 1);
                    idx[q as usize]
                })
                .collect()
        })
        .collect()
}

/// Parameters of the synthetic articulated rig. Angles rotate the bones
/// below a joint about the x, y and z axes (applied in z, y, x order).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticRigSpec {
    pub topology: SkeletonTopology,
    /// Per edge, in `topology.edges()` order.
    pub bone_lengths: Vec<f64>,
    /// Bone direction in the parent frame at zero angles, per edge.
    pub rest_directions: Vec<[f64; 3]>,
    /// Per joint and axis, `[lo, hi]` within `[-pi, pi]`.
    pub joint_angle_ranges: Vec<[[f64; 2]; 3]>,
    /// Range of the whole-body rotation about the vertical axis.
    pub yaw_range: [f64; 2],
    /// Weak-perspective scale range in pixels per unit.
    pub camera_scale: [f64; 2],
    pub image_size: [u32; 2],
    pub noise_std_2d: f64,
    /// Probability that a frame's 2D keypoints receive extra noise.
    pub outlier_prob: f64,
    pub outlier_std_2d: f64,
    pub actions: Vec<String>,
    pub seed: u64,
}

const H36M_LENGTHS: [f64; 16] = [
    132.0, 442.0, 454.0, 132.0, 442.0, 454.0, 233.0, 257.0, 121.0, 115.0, 151.0, 278.0, 251.0, 151.0, 278.0, 251.0,
];
const H36M_DIRS: [[f64; 3]; 16] = [
    [-1.0, 0.0, 0.0],
    [0.0, -1.0, 0.0],
    [0.0, -1.0, 0.0],
    [1.0, 0.0, 0.0],
    [0.0, -1.0, 0.0],
    [0.0, -1.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 1.0, 0.0],
    [1.0, 0.0, 0.0],
    [0.0, -1.0, 0.0],
    [0.0, -1.0, 0.0],
    [-1.0, 0.0, 0.0],
    [0.0, -1.0, 0.0],
    [0.0, -1.0, 0.0],
];

fn h36m_angle_ranges() -> Vec<[[f64; 2]; 3]> {
    let sym = |x: f64, y: f64, z: f64| [[-x, x], [-y, y], [-z, z]];
    let hip = [[-1.4, 0.4], [-0.4, 0.4], [-0.5, 0.3]];
    let knee = [[0.0, 2.0], [0.0, 0.0], [0.0, 0.0]];
    let shoulder = sym(1.4, 0.8, 1.2);
    let elbow = [[-2.2, 0.0], [0.0, 0.0], [0.0, 0.0]];
    vec![
        sym(0.3, 0.5, 0.3),
        hip,
        knee,
        sym(0.0, 0.0, 0.0),
        hip,
        knee,
        sym(0.0, 0.0, 0.0),
        sym(0.4, 0.3, 0.3),
        sym(0.2, 0.3, 0.2),
        sym(0.5, 0.6, 0.4),
        sym(0.0, 0.0, 0.0),
        shoulder,
        elbow,
        sym(0.0, 0.0, 0.0),
        shoulder,
        elbow,
        sym(0.0, 0.0, 0.0),
    ]
}

impl SyntheticRigSpec {
    /// Human-like proportions (mm) for the 17-joint preset; for other trees,
    /// unit-free 100-long bones with seeded rest directions.
    pub fn default_for(topology: &SkeletonTopology, seed: u64) -> Self {
        let n = topology.num_nodes();
        let e = topology.edges().len();
        let (bone_lengths, rest_directions, joint_angle_ranges) = if *topology == SkeletonTopology::h36m17() {
            (H36M_LENGTHS.to_vec(), H36M_DIRS.to_vec(), h36m_angle_ranges())
        } else {
            let mut r = rng::stream(0, "rest-directions");
            let normal = Normal::new(0.0, 1.0).expect("valid normal");
            let dirs = (0..e)
                .map(|_| [normal.sample(&mut r), normal.sample(&mut r), normal.sample(&mut r)])
                .collect();
            (vec![100.0; e], dirs, vec![[[-0.5, 0.5]; 3]; n])
        };
        SyntheticRigSpec {
            topology: topology.clone(),
            bone_lengths,
            rest_directions,
            joint_angle_ranges,
            yaw_range: [-PI, PI],
            camera_scale: [0.25, 0.35],
            image_size: [1000, 1000],
            noise_std_2d: 0.0,
            outlier_prob: 0.0,
            outlier_std_2d: 20.0,
            actions: ["walk", "reach", "crouch", "turn"].map(String::from).to_vec(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidSpec(m));
        let topo = &self.topology;
        if !topo.is_tree() {
            return bad("topology must be a tree".into());
        }
        let e = topo.edges().len();
        if self.bone_lengths.len() != e || self.rest_directions.len() != e {
            return bad(format!("need {e} bone lengths and rest directions"));
        }
        if let Some(l) = self.bone_lengths.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
            return bad(format!("bone length {l} must be positive"));
        }
        if self
            .rest_directions
            .iter()
            .any(|d| !(d.iter().all(|x| x.is_finite()) && d.iter().any(|&x| x != 0.0)))
        {
            return bad("rest directions must be finite and nonzero".into());
        }
        if self.joint_angle_ranges.len() != topo.num_nodes() {
            return bad(format!("need angle ranges for {} joints", topo.num_nodes()));
        }
        let in_range = |r: &[f64; 2]| -PI <= r[0] && r[0] <= r[1] && r[1] <= PI;
        if !self.joint_angle_ranges.iter().flatten().all(in_range) || !in_range(&self.yaw_range) {
            return bad("angle ranges must satisfy -pi <= lo <= hi <= pi".into());
        }
        let [s0, s1] = self.camera_scale;
        if !(s0 > 0.0 && s0 <= s1 && s1.is_finite()) {
            return bad("camera scale range must be positive and ordered".into());
        }
        if self.image_size[0] == 0 || self.image_size[1] == 0 {
            return bad("image size must be positive".into());
        }
        if !(self.noise_std_2d >= 0.0 && self.outlier_std_2d >= 0.0 && (0.0..=1.0).contains(&self.outlier_prob)) {
            return bad("noise levels must be nonnegative and outlier_prob in [0, 1]".into());
        }
        Ok(())
    }

    /// Mean of the declared bone lengths.
    pub fn mean_bone_length(&self) -> f64 {
        self.bone_lengths.iter().sum::<f64>() / self.bone_lengths.len() as f64
    }
}

type M3 = [[f64; 3]; 3];

fn mul(a: &M3, b: &M3) -> M3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    c
}

fn apply(a: &M3, v: &[f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i][0] * v[0] + a[i][1] * v[1] + a[i][2] * v[2])
}

fn rot_x(t: f64) -> M3 {
    let (s, c) = t.sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn rot_y(t: f64) -> M3 {
    let (s, c) = t.sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn rot_z(t: f64) -> M3 {
    let (s, c) = t.sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// Angle trajectory `centre + sum_i a_i sin(2 pi f_i t + phase_i)` with the
/// amplitudes summing to at most half the range, so it never leaves it.
struct Trajectory {
    centre: f64,
    terms: Vec<(f64, f64, f64)>,
}

impl Trajectory {
    fn sample(r: &mut rng::Rng, range: [f64; 2], tempo: f64) -> Self {
        let half = (range[1] - range[0]) / 2.0;
        let k = r.random_range(1..=3);
        let weights: Vec<f64> = (0..k).map(|_| r.random::<f64>()).collect();
        let total: f64 = weights.iter().sum::<f64>().max(1e-12);
        let terms = weights
            .iter()
            .map(|w| {
                let amp = half * w / total;
                let freq = tempo * r.random_range(0.002..0.01);
                let phase = r.random_range(0.0..2.0 * PI);
                (amp, freq, phase)
            })
            .collect();
        Trajectory {
            centre: (range[0] + range[1]) / 2.0,
            terms,
        }
    }

    fn at(&self, t: f64) -> f64 {
        self.centre
            + self
                .terms
                .iter()
                .map(|(a, f, p)| a * (2.0 * PI * f * t + p).sin())
                .sum::<f64>()
    }
}

/// Root-relative joint positions for one set of per-joint angles.
pub fn forward_kinematics(spec: &SyntheticRigSpec, angles: &[[f64; 3]], yaw: f64) -> Vec<[f64; 3]> {
    let topo = &spec.topology;
    let parents = topo.bfs_parents();
    let mut edge_of = vec![usize::MAX; topo.num_nodes()];
    for (k, &[a, b]) in topo.edges().iter().enumerate() {
        if parents[b] == Some(a) {
            edge_of[b] = k;
        } else {
            edge_of[a] = k;
        }
    }
    let local = |j: usize| {
        let [x, y, z] = angles[j];
        mul(&rot_z(z), &mul(&rot_y(y), &rot_x(x)))
    };
    let mut frame = vec![[[0.0; 3]; 3]; topo.num_nodes()];
    let mut pos = vec![[0.0; 3]; topo.num_nodes()];
    for v in topo.bfs_order() {
        match parents[v] {
            None => frame[v] = mul(&rot_y(yaw), &local(v)),
            Some(p) => {
                let k = edge_of[v];
                let d = spec.rest_directions[k];
                let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                let bone = d.map(|x| x / n * spec.bone_lengths[k]);
                let off = apply(&frame[p], &bone);
                pos[v] = [pos[p][0] + off[0], pos[p][1] + off[1], pos[p][2] + off[2]];
                frame[v] = mul(&frame[p], &local(v));
            }
        }
    }
    pos
}

/// `n_samples` frames in sequences of `n_frames_per_seq` (the last may be
/// shorter). 3D poses are root-relative; 2D keypoints are the weak-perspective
/// projection `(cx + s x, cy - s y)` plus Gaussian noise.
pub fn synthesize_dataset(
    spec: &SyntheticRigSpec,
    n_samples: usize,
    n_frames_per_seq: usize,
) -> Result<Vec<PoseSample>, DataError> {
    spec.validate()?;
    if n_frames_per_seq == 0 {
        return Err(DataError::InvalidSpec("frames per sequence must be positive".into()));
    }
    let n = spec.topology.num_nodes();
    let [w, h] = spec.image_size;
    let mut out = Vec::with_capacity(n_samples);
    let n_seq = n_samples.div_ceil(n_frames_per_seq);
    for q in 0..n_seq {
        let mut r = rng::stream(spec.seed, &format!("synth-seq-{q}"));
        let action = if spec.actions.is_empty() {
            None
        } else {
            Some(r.random_range(0..spec.actions.len()))
        };
        let tempo = 1.0 + 0.25 * action.unwrap_or(0) as f64;
        let trajectories: Vec<[Trajectory; 3]> = spec
            .joint_angle_ranges
            .iter()
            .map(|rg| [0, 1, 2].map(|a| Trajectory::sample(&mut r, rg[a], tempo)))
            .collect();
        let yaw_traj = Trajectory::sample(&mut r, spec.yaw_range, 0.2);
        let t0 = r.random_range(0.0..1000.0);
        let scale = r.random_range(spec.camera_scale[0]..=spec.camera_scale[1]);
        let cx = w as f64 / 2.0 + r.random_range(-0.05..0.05) * w as f64;
        let cy = h as f64 / 2.0 + r.random_range(-0.05..0.05) * h as f64;
        let noise = Normal::new(0.0, spec.noise_std_2d).map_err(|e| DataError::InvalidSpec(e.to_string()))?;
        let outlier = Normal::new(0.0, spec.outlier_std_2d).map_err(|e| DataError::InvalidSpec(e.to_string()))?;
        let len = n_frames_per_seq.min(n_samples - q * n_frames_per_seq);
        for f in 0..len {
            let t = t0 + f as f64;
            let angles: Vec<[f64; 3]> = trajectories.iter().map(|tr| [0, 1, 2].map(|a| tr[a].at(t))).collect();
            let j3 = forward_kinematics(spec, &angles, yaw_traj.at(t));
            let is_outlier = spec.outlier_prob > 0.0 && r.random::<f64>() < spec.outlier_prob;
            let j2 = j3
                .iter()
                .map(|p| {
                    let mut u = [cx + scale * p[0], cy - scale * p[1]];
                    if spec.noise_std_2d > 0.0 {
                        u[0] += noise.sample(&mut r);
                        u[1] += noise.sample(&mut r);
                    }
                    if is_outlier {
                        u[0] += outlier.sample(&mut r);
                        u[1] += outlier.sample(&mut r);
                    }
                    u
                })
                .collect::<Vec<_>>();
            debug_assert_eq!(j2.len(), n);
            out.push(PoseSample {
                seq: format!("seq{q:05}"),
                frame: f,
                joints_2d: j2,
                joints_3d: Some(j3),
                image_size: spec.image_size,
                action: action.map(|a| spec.actions[a].clone()),
            });
        }
    }
    Ok(out)
}
