//! Point-cloud containers, rotation sampling, and cloud normalization.
//!
//! All geometry is kept in 64-bit floats; network precision is narrowed
//! later, so the invariance tests here stay tight.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A 3D point in model coordinates.
pub type Point3 = [f64; 3];

/// Deterministic RNG seed. Same seed, same call sequence, same bits out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RngSeed(pub u64);

impl RngSeed {
    pub fn rng(self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.0)
    }

    /// Derive a child seed for an independent stream.
    pub fn child(self, salt: u64) -> RngSeed {
        let mut rng = ChaCha8Rng::seed_from_u64(self.0 ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        RngSeed(rng.gen())
    }
}

/// A point cloud with an optional class label and an opaque sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub positions: Vec<Point3>,
    pub label: Option<usize>,
    pub id: String,
}

impl PointCloud {
    pub fn new(positions: Vec<Point3>) -> Self {
        PointCloud {
            positions,
            label: None,
            id: String::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// A proper 3x3 rotation matrix (orthonormal, determinant +1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix {
    pub entries: [[f64; 3]; 3],
}

impl RotationMatrix {
    pub fn identity() -> Self {
        RotationMatrix {
            entries: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Rotation about the Z axis by `angle` radians.
    pub fn about_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        RotationMatrix {
            entries: [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Rotation about the X axis by `angle` radians.
    pub fn about_x(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        RotationMatrix {
            entries: [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]],
        }
    }

    /// Build from a unit quaternion (w, x, y, z).
    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64) -> Self {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        let (w, x, y, z) = (w / n, x / n, y / n, z / n);
        RotationMatrix {
            entries: [
                [
                    1.0 - 2.0 * (y * y + z * z),
                    2.0 * (x * y - w * z),
                    2.0 * (x * z + w * y),
                ],
                [
                    2.0 * (x * y + w * z),
                    1.0 - 2.0 * (x * x + z * z),
                    2.0 * (y * z - w * x),
                ],
                [
                    2.0 * (x * z - w * y),
                    2.0 * (y * z + w * x),
                    1.0 - 2.0 * (x * x + y * y),
                ],
            ],
        }
    }

    pub fn apply(&self, p: Point3) -> Point3 {
        let e = &self.entries;
        [
            e[0][0] * p[0] + e[0][1] * p[1] + e[0][2] * p[2],
            e[1][0] * p[0] + e[1][1] * p[1] + e[1][2] * p[2],
            e[2][0] * p[0] + e[2][1] * p[1] + e[2][2] * p[2],
        ]
    }

    pub fn transpose(&self) -> Self {
        let e = &self.entries;
        RotationMatrix {
            entries: [
                [e[0][0], e[1][0], e[2][0]],
                [e[0][1], e[1][1], e[2][1]],
                [e[0][2], e[1][2], e[2][2]],
            ],
        }
    }

    pub fn compose(&self, other: &RotationMatrix) -> Self {
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.entries[i][k] * other.entries[k][j]).sum();
            }
        }
        RotationMatrix { entries: out }
    }

    pub fn determinant(&self) -> f64 {
        let e = &self.entries;
        e[0][0] * (e[1][1] * e[2][2] - e[1][2] * e[2][1])
            - e[0][1] * (e[1][0] * e[2][2] - e[1][2] * e[2][0])
            + e[0][2] * (e[1][0] * e[2][1] - e[1][1] * e[2][0])
    }

    /// Max absolute deviation of R * R^T from the identity.
    pub fn orthonormality_error(&self) -> f64 {
        let rt = self.transpose();
        let prod = self.compose(&rt);
        let mut err: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                err = err.max((prod.entries[i][j] - target).abs());
            }
        }
        err.max((self.determinant() - 1.0).abs())
    }
}

/// Apply a rotation to every point; label and id are preserved.
pub fn rotate(cloud: &PointCloud, rotation: &RotationMatrix) -> PointCloud {
    PointCloud {
        positions: cloud.positions.iter().map(|&p| rotation.apply(p)).collect(),
        label: cloud.label,
        id: cloud.id.clone(),
    }
}

/// Rotation about the Z axis by an angle uniform in [0, 2π).
pub fn random_rotation_z(seed: RngSeed) -> RotationMatrix {
    let mut rng = seed.rng();
    let angle: f64 = rng.gen::<f64>() * std::f64::consts::TAU;
    RotationMatrix::about_z(angle)
}

/// Haar-uniform rotation from SO(3) via a normalized 4-Gaussian quaternion.
pub fn random_rotation_so3(seed: RngSeed) -> RotationMatrix {
    let mut rng = seed.rng();
    loop {
        let q: [f64; 4] = [
            standard_normal(&mut rng),
            standard_normal(&mut rng),
            standard_normal(&mut rng),
            standard_normal(&mut rng),
        ];
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-6 {
            return RotationMatrix::from_quaternion(q[0] / n, q[1] / n, q[2] / n, q[3] / n);
        }
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; consumes two uniforms per call.
    let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Result of normalization; `degenerate` is set when scaling had to be skipped.
#[derive(Debug, Clone)]
pub struct NormalizedCloud {
    pub cloud: PointCloud,
    pub degenerate: bool,
}

/// Center the cloud at the origin and scale the farthest point to norm 1.
///
/// A single-point cloud maps to the origin with scale left as 1; an
/// all-identical multi-point cloud is centered with scaling skipped and the
/// degenerate flag set.
pub fn normalize_cloud(cloud: &PointCloud) -> Result<NormalizedCloud> {
    if cloud.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let n = cloud.len() as f64;
    let mut centroid = [0.0; 3];
    for p in &cloud.positions {
        for a in 0..3 {
            centroid[a] += p[a];
        }
    }
    for c in centroid.iter_mut() {
        *c /= n;
    }
    let mut centered: Vec<Point3> = cloud
        .positions
        .iter()
        .map(|p| [p[0] - centroid[0], p[1] - centroid[1], p[2] - centroid[2]])
        .collect();
    let max_norm = centered
        .iter()
        .map(|p| norm(*p))
        .fold(0.0f64, f64::max);
    let degenerate = cloud.len() > 1 && max_norm <= 1e-12;
    if cloud.len() > 1 && max_norm > 1e-12 {
        for p in centered.iter_mut() {
            for a in 0..3 {
                p[a] /= max_norm;
            }
        }
    }
    Ok(NormalizedCloud {
        cloud: PointCloud {
            positions: centered,
            label: cloud.label,
            id: cloud.id.clone(),
        },
        degenerate,
    })
}

pub fn norm(p: Point3) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

pub fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn dist(a: Point3, b: Point3) -> f64 {
    norm(sub(a, b))
}

pub fn dot(a: Point3, b: Point3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Point3, b: Point3) -> Point3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quarter_turn_about_z() {
        let r = RotationMatrix::about_z(std::f64::consts::FRAC_PI_2);
        let p = r.apply([1.0, 0.0, 0.0]);
        assert!((p[0]).abs() < 1e-12);
        assert!((p[1] - 1.0).abs() < 1e-12);
        assert!((p[2]).abs() < 1e-12);
    }

    #[test]
    fn identity_rotation_is_bitwise() {
        let cloud = PointCloud::new(vec![[0.1, -2.5, 3.75], [1.0, 2.0, 3.0]]);
        let rotated = rotate(&cloud, &RotationMatrix::identity());
        assert_eq!(cloud.positions, rotated.positions);
    }

    #[test]
    fn rotation_then_inverse_recovers_cloud() {
        let cloud = PointCloud::new(vec![[1.0, 2.0, 3.0], [-0.5, 0.25, 1.5]]);
        let r = random_rotation_so3(RngSeed(7));
        let back = rotate(&rotate(&cloud, &r), &r.transpose());
        for (a, b) in cloud.positions.iter().zip(back.positions.iter()) {
            assert!(dist(*a, *b) < 1e-12);
        }
    }

    #[test]
    fn z_rotation_determinism_and_axis() {
        let a = random_rotation_z(RngSeed(42));
        let b = random_rotation_z(RngSeed(42));
        assert_eq!(a.entries, b.entries);
        let axis = a.apply([0.0, 0.0, 1.0]);
        assert!(dist(axis, [0.0, 0.0, 1.0]) < 1e-12);
    }

    #[test]
    fn z_rotation_angle_mean_over_seeds() {
        // angle recovered from the matrix is in [0, 2π); its mean should be π
        let mut sum = 0.0;
        let n = 10_000;
        for s in 0..n {
            let r = random_rotation_z(RngSeed(s));
            let angle = r.entries[1][0].atan2(r.entries[0][0]);
            let angle = if angle < 0.0 { angle + std::f64::consts::TAU } else { angle };
            sum += angle;
        }
        let mean = sum / n as f64;
        assert!((mean - std::f64::consts::PI).abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn so3_rotations_are_proper_rotations() {
        for s in 0..1000 {
            let r = random_rotation_so3(RngSeed(s));
            assert!(r.orthonormality_error() < 1e-12, "seed {s}");
        }
        let a = random_rotation_so3(RngSeed(5));
        let b = random_rotation_so3(RngSeed(5));
        assert_eq!(a.entries, b.entries);
    }

    #[test]
    fn so3_sphere_image_is_centered() {
        let mut mean = [0.0f64; 3];
        let n = 50_000;
        for s in 0..n {
            let p = random_rotation_so3(RngSeed(s)).apply([1.0, 0.0, 0.0]);
            for a in 0..3 {
                mean[a] += p[a];
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        for (a, m) in mean.iter().enumerate() {
            assert!(m.abs() < 0.02, "axis {a} mean {m}");
        }
    }

    #[test]
    fn normalize_two_point_cloud() {
        let cloud = PointCloud::new(vec![[1.0, 1.0, 1.0], [3.0, 1.0, 1.0]]);
        let out = normalize_cloud(&cloud).unwrap();
        assert!(!out.degenerate);
        assert!(dist(out.cloud.positions[0], [-1.0, 0.0, 0.0]) < 1e-12);
        assert!(dist(out.cloud.positions[1], [1.0, 0.0, 0.0]) < 1e-12);
    }

    #[test]
    fn normalize_is_idempotent() {
        let cloud = PointCloud::new(vec![[0.3, 0.1, -0.2], [-0.9, 0.4, 0.1], [0.6, -0.5, 0.1]]);
        let once = normalize_cloud(&cloud).unwrap().cloud;
        let twice = normalize_cloud(&once).unwrap().cloud;
        for (a, b) in once.positions.iter().zip(twice.positions.iter()) {
            assert!(dist(*a, *b) < 1e-12);
        }
        // normalization contract
        let centroid: f64 = once
            .positions
            .iter()
            .map(|p| p.iter().sum::<f64>())
            .sum::<f64>();
        assert!(centroid.abs() < 1e-9);
        let max_norm = once.positions.iter().map(|p| norm(*p)).fold(0.0, f64::max);
        assert!((max_norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn normalize_degenerate_clouds() {
        let single = normalize_cloud(&PointCloud::new(vec![[0.0, 0.0, 0.0]])).unwrap();
        assert_eq!(single.cloud.positions, vec![[0.0, 0.0, 0.0]]);
        assert!(!single.degenerate);

        let identical =
            normalize_cloud(&PointCloud::new(vec![[2.0, 2.0, 2.0], [2.0, 2.0, 2.0]])).unwrap();
        assert!(identical.degenerate);
        for p in &identical.cloud.positions {
            assert!(norm(*p) < 1e-12);
        }
    }

    #[test]
    fn rotation_preserves_pairwise_distances() {
        let cloud = PointCloud::new(vec![[0.1, 0.4, 0.9], [1.3, -0.2, 0.5], [-0.7, 0.8, -0.1]]);
        let r = random_rotation_so3(RngSeed(11));
        let rotated = rotate(&cloud, &r);
        for i in 0..cloud.len() {
            for j in 0..cloud.len() {
                let before = dist(cloud.positions[i], cloud.positions[j]);
                let after = dist(rotated.positions[i], rotated.positions[j]);
                assert!((before - after).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rotate_composes() {
        let cloud = PointCloud::new(vec![[1.0, 0.5, -0.3], [0.2, -0.9, 0.4]]);
        let r1 = random_rotation_so3(RngSeed(1));
        let r2 = random_rotation_so3(RngSeed(2));
        let composed = rotate(&cloud, &r1.compose(&r2));
        let sequential = rotate(&rotate(&cloud, &r2), &r1);
        for (a, b) in composed.positions.iter().zip(sequential.positions.iter()) {
            assert!(dist(*a, *b) < 1e-9);
        }
    }

    #[test]
    fn z_rotations_commute() {
        let a = random_rotation_z(RngSeed(3));
        let b = RotationMatrix::about_z(1.234);
        let ab = a.compose(&b);
        let ba = b.compose(&a);
        for i in 0..3 {
            for j in 0..3 {
                assert!((ab.entries[i][j] - ba.entries[i][j]).abs() < 1e-12);
            }
        }
    }
}
