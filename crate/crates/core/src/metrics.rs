//! Pose error metrics: MPJPE, Procrustes-aligned MPJPE, PCK/AUC and the
//! hard-pose error distribution.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::MetricError;

pub type Joint = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

fn dist(a: &Joint, b: &Joint) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn check(pred: &[Joint], gt: &[Joint]) -> Result<(), MetricError> {
    if pred.len() != gt.len() {
        return Err(MetricError::ShapeMismatch(pred.len(), gt.len()));
    }
    if pred.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(())
}

/// Euclidean error of every joint.
pub fn per_joint_errors(pred: &[Joint], gt: &[Joint]) -> Result<Vec<f64>, MetricError> {
    check(pred, gt)?;
    Ok(pred.iter().zip(gt).map(|(p, g)| dist(p, g)).collect())
}

/// Mean per-joint Euclidean error.
pub fn mpjpe(pred: &[Joint], gt: &[Joint]) -> Result<f64, MetricError> {
    let e = per_joint_errors(pred, gt)?;
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

/// Translates a pose so that joint `root` sits at the origin.
pub fn root_relative(pose: &[Joint], root: usize) -> Vec<Joint> {
    let r = pose[root];
    pose.iter().map(|j| [j[0] - r[0], j[1] - r[1], j[2] - r[2]]).collect()
}

/// Result of a similarity alignment `aligned = scale * R * pred + translation`.
#[derive(Clone, Debug, PartialEq)]
pub struct Alignment {
    pub aligned: Vec<Joint>,
    pub rotation: Mat3,
    pub scale: f64,
    pub translation: Joint,
}

fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

fn transpose(a: &Mat3) -> Mat3 {
    let mut t = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            t[i][j] = a[j][i];
        }
    }
    t
}

pub fn det3(a: &Mat3) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

/// Eigen-decomposition of a symmetric 3×3 matrix by cyclic Jacobi
/// rotations. Returns eigenvalues in descending order and the matching
/// eigenvectors as columns.
pub fn symmetric_eigen(m: &Mat3) -> ([f64; 3], Mat3) {
    let mut a = *m;
    let mut v = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let scale: f64 = a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    for _ in 0..64 {
        let off = a[0][1].powi(2) + a[0][2].powi(2) + a[1][2].powi(2);
        if off.sqrt() <= 1e-300_f64.max(1e-17 * scale) {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if a[p][q] == 0.0 {
                continue;
            }
            let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            for k in 0..3 {
                let (akp, akq) = (a[k][p], a[k][q]);
                a[k][p] = c * akp - s * akq;
                a[k][q] = s * akp + c * akq;
            }
            for k in 0..3 {
                let (apk, aqk) = (a[p][k], a[q][k]);
                a[p][k] = c * apk - s * aqk;
                a[q][k] = s * apk + c * aqk;
            }
            for row in &mut v {
                let (vp, vq) = (row[p], row[q]);
                row[p] = c * vp - s * vq;
                row[q] = s * vp + c * vq;
            }
        }
    }
    let mut order = [0, 1, 2];
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    let vals = order.map(|i| a[i][i]);
    let mut vecs = [[0.0; 3]; 3];
    for (c, &i) in order.iter().enumerate() {
        for r in 0..3 {
            vecs[r][c] = v[r][i];
        }
    }
    (vals, vecs)
}

fn col(m: &Mat3, c: usize) -> Joint {
    [m[0][c], m[1][c], m[2][c]]
}

fn dot(a: &Joint, b: &Joint) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: &Joint, b: &Joint) -> Joint {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn normalized(a: Joint) -> Joint {
    let n = dot(&a, &a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

fn mat_vec(m: &Mat3, v: &Joint) -> Joint {
    [dot(&m[0], v), dot(&m[1], v), dot(&m[2], v)]
}

fn centroid(p: &[Joint]) -> Joint {
    let n = p.len() as f64;
    let mut c = [0.0; 3];
    for j in p {
        for k in 0..3 {
            c[k] += j[k] / n;
        }
    }
    c
}

/// Least-squares similarity transform of `pred` onto `gt` (scale, proper
/// rotation, translation), from the SVD of the cross-covariance. Fails when
/// either point set is coincident or the covariance has rank below two.
pub fn procrustes_align(pred: &[Joint], gt: &[Joint]) -> Result<Alignment, MetricError> {
    check(pred, gt)?;
    if pred.len() < 3 {
        return Err(MetricError::DegenerateConfiguration("need at least three joints"));
    }
    let (mx, my) = (centroid(pred), centroid(gt));
    let x0: Vec<Joint> = pred
        .iter()
        .map(|p| [p[0] - mx[0], p[1] - mx[1], p[2] - mx[2]])
        .collect();
    let y0: Vec<Joint> = gt.iter().map(|p| [p[0] - my[0], p[1] - my[1], p[2] - my[2]]).collect();
    let norm_x: f64 = x0.iter().map(|p| dot(p, p)).sum();
    let norm_y: f64 = y0.iter().map(|p| dot(p, p)).sum();
    if norm_x == 0.0 || norm_y == 0.0 {
        return Err(MetricError::DegenerateConfiguration("coincident joints"));
    }
    // H = X0ᵀ Y0
    let mut h = [[0.0; 3]; 3];
    for (x, y) in x0.iter().zip(&y0) {
        for i in 0..3 {
            for j in 0..3 {
                h[i][j] += x[i] * y[j];
            }
        }
    }
    // H = U Σ Vᵀ with V from the eigenvectors of HᵀH.
    let (lambda, v) = symmetric_eigen(&mat_mul(&transpose(&h), &h));
    let sigma = lambda.map(|l| l.max(0.0).sqrt());
    // Eigenvalues of HᵀH carry absolute error near eps·σ1², so the rank test
    // compares squared singular values.
    if sigma[0] == 0.0 || lambda[1] <= 1e-14 * lambda[0] {
        return Err(MetricError::DegenerateConfiguration(
            "cross-covariance has rank below two",
        ));
    }
    let u1 = normalized(mat_vec(&h, &col(&v, 0)));
    let u2 = mat_vec(&h, &col(&v, 1));
    let u2 = normalized({
        let d = dot(&u1, &u2);
        [u2[0] - d * u1[0], u2[1] - d * u1[1], u2[2] - d * u1[2]]
    });
    let mut u3 = cross(&u1, &u2);
    if dot(&u3, &mat_vec(&h, &col(&v, 2))) < 0.0 {
        u3 = u3.map(|x| -x);
    }
    let u = [[u1[0], u2[0], u3[0]], [u1[1], u2[1], u3[1]], [u1[2], u2[2], u3[2]]];
    let d = if det3(&u) * det3(&v) < 0.0 { -1.0 } else { 1.0 };
    // R = V D Uᵀ maps centred pred onto centred gt.
    let vd = [
        [v[0][0], v[0][1], d * v[0][2]],
        [v[1][0], v[1][1], d * v[1][2]],
        [v[2][0], v[2][1], d * v[2][2]],
    ];
    let r = mat_mul(&vd, &transpose(&u));
    let scale = (sigma[0] + sigma[1] + d * sigma[2]) / norm_x;
    let rmx = mat_vec(&r, &mx);
    let t = [my[0] - scale * rmx[0], my[1] - scale * rmx[1], my[2] - scale * rmx[2]];
    let aligned = pred
        .iter()
        .map(|p| {
            let q = mat_vec(&r, p);
            [scale * q[0] + t[0], scale * q[1] + t[1], scale * q[2] + t[2]]
        })
        .collect();
    Ok(Alignment {
        aligned,
        rotation: r,
        scale,
        translation: t,
    })
}

/// MPJPE after similarity alignment.
pub fn pa_mpjpe(pred: &[Joint], gt: &[Joint]) -> Result<f64, MetricError> {
    let a = procrustes_align(pred, gt)?;
    mpjpe(&a.aligned, gt)
}

/// Fraction of errors strictly below `threshold`.
pub fn pck(errors: &[f64], threshold: f64) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    errors.iter().filter(|&&e| e < threshold).count() as f64 / errors.len() as f64
}

/// Mean PCK over `thresholds`.
pub fn auc(errors: &[f64], thresholds: &[f64]) -> f64 {
    if thresholds.is_empty() {
        return 0.0;
    }
    thresholds.iter().map(|&t| pck(errors, t)).sum::<f64>() / thresholds.len() as f64
}

/// Thresholds `5, 10, ..., 150`.
pub fn default_auc_thresholds() -> Vec<f64> {
    (1..=30).map(|i| 5.0 * i as f64).collect()
}

/// Histogram of per-sample errors with equal-width bins starting at 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width: f64,
    /// `counts.len() + 1` edges.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Mean error over the worst `p` fraction of samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardestMean {
    pub p: f64,
    pub count: usize,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardPoseReport {
    pub histogram: Histogram,
    pub hardest: Vec<HardestMean>,
}

/// Number of samples in the hardest `p` fraction of `n` (at least one).
pub fn hardest_count(n: usize, p: f64) -> usize {
    (((p * n as f64) - 1e-9).ceil() as usize).clamp(1, n)
}

/// Error histogram plus hardest-`p` means. Ties keep sample order.
pub fn hard_pose_report(errors: &[f64], bin_width: f64, percentiles: &[f64]) -> Result<HardPoseReport, MetricError> {
    if errors.is_empty() {
        return Err(MetricError::Empty);
    }
    let max = errors.iter().copied().fold(0.0, f64::max);
    let bins = (max / bin_width).floor() as usize + 1;
    let mut counts = vec![0; bins];
    for &e in errors {
        counts[((e / bin_width).floor() as usize).min(bins - 1)] += 1;
    }
    let edges = (0..=bins).map(|k| k as f64 * bin_width).collect();
    let mut order: Vec<usize> = (0..errors.len()).collect();
    order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]));
    let hardest = percentiles
        .iter()
        .map(|&p| {
            let k = hardest_count(errors.len(), p);
            let mean = order[..k].iter().map(|&i| errors[i]).sum::<f64>() / k as f64;
            HardestMean { p, count: k, mean }
        })
        .collect();
    Ok(HardPoseReport {
        histogram: Histogram {
            bin_width,
            edges,
            counts,
        },
        hardest,
    })
}

/// Metric settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub pck_threshold: f64,
    pub auc_thresholds: Vec<f64>,
    pub percentiles: Vec<f64>,
    pub bin_width: f64,
    pub root_relative: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            pck_threshold: 150.0,
            auc_thresholds: default_auc_thresholds(),
            percentiles: vec![0.01, 0.05, 0.1],
            bin_width: 5.0,
            root_relative: true,
        }
    }
}

/// Summary of a model's predictions over a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_samples: usize,
    pub mpjpe_mean: f64,
    pub pa_mpjpe_mean: f64,
    pub per_action: BTreeMap<String, f64>,
    pub pck_threshold: f64,
    pub pck: f64,
    pub auc: f64,
    pub error_histogram: Histogram,
    pub hardest: Vec<HardestMean>,
    /// Per-sample MPJPE in dataset order.
    pub per_sample_mpjpe: Vec<f64>,
}

impl EvalReport {
    /// Two-column `bin_start count` table.
    pub fn histogram_table(&self) -> String {
        let mut out = String::from("# bin_start count\n");
        for (e, c) in self.error_histogram.edges.iter().zip(&self.error_histogram.counts) {
            out.push_str(&format!("{e} {c}\n"));
        }
        out
    }
}

/// Scores predictions against ground truth. `root` is the root joint used
/// when `cfg.root_relative` is set.
pub fn evaluate(
    preds: &[Vec<Joint>],
    gts: &[Vec<Joint>],
    actions: &[Option<String>],
    root: usize,
    cfg: &MetricsConfig,
) -> Result<EvalReport, MetricError> {
    if preds.len() != gts.len() {
        return Err(MetricError::ShapeMismatch(preds.len(), gts.len()));
    }
    if preds.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut per_sample = Vec::with_capacity(preds.len());
    let mut pa = Vec::with_capacity(preds.len());
    let mut joint_errors = Vec::new();
    let mut by_action: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (i, (p, g)) in preds.iter().zip(gts).enumerate() {
        let (p, g) = if cfg.root_relative {
            (root_relative(p, root), root_relative(g, root))
        } else {
            (p.clone(), g.clone())
        };
        let errs = per_joint_errors(&p, &g)?;
        let m = errs.iter().sum::<f64>() / errs.len() as f64;
        joint_errors.extend(errs);
        per_sample.push(m);
        pa.push(pa_mpjpe(&p, &g)?);
        if let Some(Some(a)) = actions.get(i) {
            let e = by_action.entry(a.clone()).or_insert((0.0, 0));
            e.0 += m;
            e.1 += 1;
        }
    }
    let n = per_sample.len() as f64;
    let hard = hard_pose_report(&per_sample, cfg.bin_width, &cfg.percentiles)?;
    Ok(EvalReport {
        num_samples: per_sample.len(),
        mpjpe_mean: per_sample.iter().sum::<f64>() / n,
        pa_mpjpe_mean: pa.iter().sum::<f64>() / n,
        per_action: by_action.into_iter().map(|(k, (s, c))| (k, s / c as f64)).collect(),
        pck_threshold: cfg.pck_threshold,
        pck: pck(&joint_errors, cfg.pck_threshold),
        auc: auc(&joint_errors, &cfg.auc_thresholds),
        error_histogram: hard.histogram,
        hardest: hard.hardest,
        per_sample_mpjpe: per_sample,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    use super::*;
    use crate::rng;

    fn random_pose(r: &mut rng::Rng, n: usize) -> Vec<Joint> {
        (0..n)
            .map(|_| {
                [
                    r.sample(StandardNormal),
                    r.sample(StandardNormal),
                    r.sample(StandardNormal),
                ]
            })
            .collect()
    }

    #[test]
    fn mpjpe_examples() {
        let mut r = rng::stream(0, "p");
        let gt = random_pose(&mut r, 17);
        assert_eq!(mpjpe(&gt, &gt).unwrap(), 0.0);
        let shifted: Vec<Joint> = gt.iter().map(|j| [j[0] + 3.0, j[1] + 4.0, j[2]]).collect();
        assert!((mpjpe(&shifted, &gt).unwrap() - 5.0).abs() < 1e-12);
        let p = random_pose(&mut r, 17);
        let mut naive = 0.0;
        for i in 0..17 {
            let mut s = 0.0;
            for k in 0..3 {
                s += (p[i][k] - gt[i][k]) * (p[i][k] - gt[i][k]);
            }
            naive += s.sqrt();
        }
        assert!((mpjpe(&p, &gt).unwrap() - naive / 17.0).abs() < 1e-12);
        assert_eq!(mpjpe(&p[..3], &gt), Err(MetricError::ShapeMismatch(3, 17)));
        assert_eq!(mpjpe(&[], &[]), Err(MetricError::Empty));
    }

    #[test]
    fn eigen_reconstructs_matrix() {
        let m = [[4.0, 1.0, -2.0], [1.0, 3.0, 0.5], [-2.0, 0.5, 1.0]];
        let (vals, vecs) = symmetric_eigen(&m);
        assert!(vals[0] >= vals[1] && vals[1] >= vals[2]);
        for c in 0..3 {
            let v = col(&vecs, c);
            let mv = mat_vec(&m, &v);
            for k in 0..3 {
                assert!((mv[k] - vals[c] * v[k]).abs() < 1e-12);
            }
        }
    }

    pub(crate) fn random_rotation(r: &mut rng::Rng) -> Mat3 {
        let q: [f64; 4] = [
            r.sample(StandardNormal),
            r.sample(StandardNormal),
            r.sample(StandardNormal),
            r.sample(StandardNormal),
        ];
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        let [w, x, y, z] = q.map(|v| v / n);
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - z * w),
                2.0 * (x * z + y * w),
            ],
            [
                2.0 * (x * y + z * w),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - x * w),
            ],
            [
                2.0 * (x * z - y * w),
                2.0 * (y * z + x * w),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }

    #[test]
    fn procrustes_recovers_similarity_transforms() {
        let mut r = rng::stream(1, "p");
        for _ in 0..200 {
            let pred = random_pose(&mut r, 17);
            let rot = random_rotation(&mut r);
            let s = r.random_range(0.2..5.0);
            let t = [
                r.random_range(-9.0..9.0),
                r.random_range(-9.0..9.0),
                r.random_range(-9.0..9.0),
            ];
            let gt: Vec<Joint> = pred
                .iter()
                .map(|p| {
                    let q = mat_vec(&rot, p);
                    [s * q[0] + t[0], s * q[1] + t[1], s * q[2] + t[2]]
                })
                .collect();
            let a = procrustes_align(&pred, &gt).unwrap();
            assert!(mpjpe(&a.aligned, &gt).unwrap() <= 1e-9);
            assert!((a.scale - s).abs() < 1e-9);
            assert!((det3(&a.rotation) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn procrustes_identity_and_reflection() {
        let mut r = rng::stream(2, "p");
        let gt = random_pose(&mut r, 10);
        let a = procrustes_align(&gt, &gt).unwrap();
        for (p, g) in a.aligned.iter().zip(&gt) {
            for k in 0..3 {
                assert!((p[k] - g[k]).abs() < 1e-12);
            }
        }
        // A mirror image cannot be matched by a proper rotation.
        let mirrored: Vec<Joint> = gt.iter().map(|j| [-j[0], j[1], j[2]]).collect();
        let a = procrustes_align(&mirrored, &gt).unwrap();
        assert!((det3(&a.rotation) - 1.0).abs() < 1e-9);
        assert!(mpjpe(&a.aligned, &gt).unwrap() > 1e-3);
    }

    #[test]
    fn procrustes_degenerate_inputs() {
        let same = vec![[1.0, 2.0, 3.0]; 5];
        let mut r = rng::stream(3, "p");
        let p = random_pose(&mut r, 5);
        assert!(matches!(
            procrustes_align(&p, &same),
            Err(MetricError::DegenerateConfiguration(_))
        ));
        assert!(matches!(
            procrustes_align(&same, &p),
            Err(MetricError::DegenerateConfiguration(_))
        ));
        let line: Vec<Joint> = (0..5).map(|i| [i as f64, 0.0, 0.0]).collect();
        assert!(matches!(
            procrustes_align(&line, &p),
            Err(MetricError::DegenerateConfiguration(_))
        ));
        // planar sets have rank two and still align
        let plane: Vec<Joint> = p.iter().map(|j| [j[0], j[1], 0.0]).collect();
        let a = procrustes_align(&plane, &plane).unwrap();
        assert!(mpjpe(&a.aligned, &plane).unwrap() < 1e-12);
        assert!((det3(&a.rotation) - 1.0).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn alignment_never_hurts(seed in any::<u64>()) {
            let mut r = rng::stream(seed, "pair");
            let p = random_pose(&mut r, 17);
            let g = random_pose(&mut r, 17);
            prop_assert!(pa_mpjpe(&p, &g).unwrap() <= mpjpe(&p, &g).unwrap() + 1e-9);
        }

        #[test]
        fn mpjpe_is_rigid_invariant(seed in any::<u64>()) {
            let mut r = rng::stream(seed, "rigid");
            let p = random_pose(&mut r, 17);
            let g = random_pose(&mut r, 17);
            let rot = random_rotation(&mut r);
            let t = [1.0, -2.0, 0.5];
            let mv = |x: &Vec<Joint>| -> Vec<Joint> { x.iter().map(|j| { let q = mat_vec(&rot, j); [q[0] + t[0], q[1] + t[1], q[2] + t[2]] }).collect() };
            prop_assert!((mpjpe(&mv(&p), &mv(&g)).unwrap() - mpjpe(&p, &g).unwrap()).abs() < 1e-9);
        }

        #[test]
        fn pck_is_monotone(errors in prop::collection::vec(0.0f64..300.0, 1..50), a in 0.0f64..300.0, b in 0.0f64..300.0) {
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(pck(&errors, lo) <= pck(&errors, hi));
            let th = default_auc_thresholds();
            let mean = th.iter().map(|&t| pck(&errors, t)).sum::<f64>() / th.len() as f64;
            prop_assert_eq!(auc(&errors, &th), mean);
        }

        #[test]
        fn hardest_mean_is_monotone(errors in prop::collection::vec(0.0f64..300.0, 1..80)) {
            let ps: Vec<f64> = (1..=20).map(|i| i as f64 / 20.0).collect();
            let rep = hard_pose_report(&errors, 5.0, &ps).unwrap();
            prop_assert_eq!(rep.histogram.counts.iter().sum::<usize>(), errors.len());
            prop_assert!(rep.hardest.windows(2).all(|w| w[1].mean <= w[0].mean + 1e-12));
        }
    }

    #[test]
    fn pck_auc_examples() {
        let zeros = vec![0.0; 10];
        assert_eq!(pck(&zeros, 150.0), 1.0);
        assert_eq!(pck(&[300.0; 10], 150.0), 0.0);
        assert_eq!(pck(&[1.0, 1.0, 200.0, 200.0], 150.0), 0.5);
        let th = default_auc_thresholds();
        assert_eq!(auc(&zeros, &th), 1.0);
        assert_eq!(auc(&[151.0, 1e6], &th), 0.0);
        // error 75: below thresholds 80..150, i.e. 15 of 30
        assert_eq!(auc(&[75.0], &th), 0.5);
    }

    #[test]
    fn hard_pose_examples() {
        let errors: Vec<f64> = (1..=100).map(f64::from).collect();
        let rep = hard_pose_report(&errors, 10.0, &[0.05, 1.0]).unwrap();
        assert_eq!(rep.hardest[0].mean, 98.0);
        assert_eq!(rep.hardest[0].count, 5);
        assert_eq!(rep.hardest[1].mean, 50.5);
        assert_eq!(rep.histogram.counts.iter().sum::<usize>(), 100);
        assert_eq!(rep.histogram.counts[0], 9);
        let flat = vec![7.5; 13];
        let rep = hard_pose_report(&flat, 1.0, &[0.01, 0.5, 1.0]).unwrap();
        assert!(rep.hardest.iter().all(|h| h.mean == 7.5));
        assert_eq!(hard_pose_report(&[], 1.0, &[0.1]), Err(MetricError::Empty));
    }

    #[test]
    fn evaluate_groups_actions() {
        let mut r = rng::stream(5, "e");
        let gts: Vec<Vec<Joint>> = (0..4).map(|_| random_pose(&mut r, 5)).collect();
        let preds: Vec<Vec<Joint>> = gts
            .iter()
            .map(|g| g.iter().map(|j| [j[0] + 1.0, j[1], j[2]]).collect())
            .collect();
        let actions = vec![Some("walk".into()), Some("sit".into()), Some("walk".into()), None];
        let cfg = MetricsConfig {
            root_relative: false,
            ..MetricsConfig::default()
        };
        let rep = evaluate(&preds, &gts, &actions, 0, &cfg).unwrap();
        assert!((rep.mpjpe_mean - 1.0).abs() < 1e-12);
        assert!(rep.pa_mpjpe_mean < 1e-9);
        assert_eq!(rep.per_action.len(), 2);
        assert!((rep.per_action["walk"] - 1.0).abs() < 1e-12);
        assert_eq!(rep.pck, 1.0);
        // root-relative removes the uniform shift
        let rel = evaluate(&preds, &gts, &actions, 0, &MetricsConfig::default()).unwrap();
        assert!(rel.mpjpe_mean < 1e-12);
        assert!(rel.histogram_table().starts_with("# bin_start count\n0 4\n"));
    }
}
