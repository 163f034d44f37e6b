//! The three relative-position encodings, graded by which rotations they
//! are blind to:
//!
//! * CD — raw coordinate difference, rotation-equivariant, width 3.
//! * Z-RI — invariant under rotations about the Z axis, width 5.
//! * A-RI — invariant under any rotation about the origin, width 8.
//!
//! All encodings are computed in f64 regardless of network precision.
//! Angles use two-argument arctangents, never bare arccos.

use crate::geom::{cross, dist, dot, norm, sub, Point3, PointCloud};
use crate::neighborhood::{support_points, NeighborhoodIndex};

/// Which encoding a vector or tensor carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EncodingKind {
    Cd,
    Zri,
    Ari,
}

impl EncodingKind {
    pub const ALL: [EncodingKind; 3] = [EncodingKind::Cd, EncodingKind::Zri, EncodingKind::Ari];

    pub fn width(self) -> usize {
        match self {
            EncodingKind::Cd => 3,
            EncodingKind::Zri => 5,
            EncodingKind::Ari => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EncodingKind::Cd => "cd",
            EncodingKind::Zri => "zri",
            EncodingKind::Ari => "ari",
        }
    }

    /// CSV column names for one encoding entry, in equation order.
    pub fn component_names(self) -> &'static [&'static str] {
        match self {
            EncodingKind::Cd => &["dx", "dy", "dz"],
            EncodingKind::Zri => &["dz", "r_ij_xy", "r_i_xy", "r_j_xy", "theta_xy"],
            EncodingKind::Ari => &[
                "r_i", "r_ms", "r_ps", "r_pm", "r_sp", "r_mp", "r_pp", "theta_mp",
            ],
        }
    }
}

/// One scalar encoding; width always matches the kind.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodingVector {
    pub kind: EncodingKind,
    pub values: Vec<f64>,
}

/// Batched encodings aligned with a `NeighborhoodIndex`: entry (q, k) is
/// the scalar encoding of (query q, neighbor k), stored row-major as
/// M x K x width.
#[derive(Debug, Clone)]
pub struct EncodingTensor {
    pub kind: EncodingKind,
    pub queries: usize,
    pub k: usize,
    pub values: Vec<f64>,
}

impl EncodingTensor {
    pub fn entry(&self, q: usize, k: usize) -> &[f64] {
        let w = self.kind.width();
        let off = (q * self.k + k) * w;
        &self.values[off..off + w]
    }
}

/// Coordinate-difference encoding: p_j - p_i.
pub fn encode_cd(p_i: Point3, p_j: Point3) -> EncodingVector {
    EncodingVector {
        kind: EncodingKind::Cd,
        values: vec![p_j[0] - p_i[0], p_j[1] - p_i[1], p_j[2] - p_i[2]],
    }
}

/// Z-rotation-invariant encoding: Z offset plus distances and the
/// origin-centered angle in the X-Y projection.
pub fn encode_zri(p_i: Point3, p_j: Point3) -> EncodingVector {
    let pi_xy = [p_i[0], p_i[1]];
    let pj_xy = [p_j[0], p_j[1]];
    let r_i = (pi_xy[0] * pi_xy[0] + pi_xy[1] * pi_xy[1]).sqrt();
    let r_j = (pj_xy[0] * pj_xy[0] + pj_xy[1] * pj_xy[1]).sqrt();
    let r_ij = {
        let dx = pj_xy[0] - pi_xy[0];
        let dy = pj_xy[1] - pi_xy[1];
        (dx * dx + dy * dy).sqrt()
    };
    let theta = if r_i < 1e-12 || r_j < 1e-12 {
        0.0
    } else {
        // unsigned angle at the origin between the projections, in [0, π]
        let cross = pi_xy[0] * pj_xy[1] - pi_xy[1] * pj_xy[0];
        let dot = pi_xy[0] * pj_xy[0] + pi_xy[1] * pj_xy[1];
        cross.abs().atan2(dot)
    };
    EncodingVector {
        kind: EncodingKind::Zri,
        values: vec![p_j[2] - p_i[2], r_ij, r_i, r_j, theta],
    }
}

/// Arbitrary-rotation-invariant encoding: distances among the query p_i,
/// neighbor p_j, neighborhood center m_i, and ball/ray intersection s_i,
/// plus the signed dihedral angle about the s_i-p_i axis from the m_i
/// half-plane to the p_j half-plane.
pub fn encode_ari(p_i: Point3, p_j: Point3, m_i: Point3, s_i: Point3) -> EncodingVector {
    let r_i = norm(p_i);
    let r_ms = dist(m_i, s_i);
    let r_ps = dist(p_i, s_i);
    let r_pm = dist(p_i, m_i);
    let r_sp = dist(s_i, p_j);
    let r_mp = dist(m_i, p_j);
    let r_pp = dist(p_i, p_j);
    let theta = dihedral_about(sub(s_i, p_i), sub(m_i, p_i), sub(p_j, p_i));
    EncodingVector {
        kind: EncodingKind::Ari,
        values: vec![r_i, r_ms, r_ps, r_pm, r_sp, r_mp, r_pp, theta],
    }
}

/// Signed dihedral from the (axis, a) half-plane to the (axis, b)
/// half-plane, in (-π, π]. Returns 0 when either arm is parallel to the
/// axis (no half-plane defined) or the axis itself degenerates.
fn dihedral_about(axis: Point3, a: Point3, b: Point3) -> f64 {
    let axis_norm = norm(axis);
    if axis_norm < 1e-12 {
        return 0.0;
    }
    let u = [axis[0] / axis_norm, axis[1] / axis_norm, axis[2] / axis_norm];
    let reject = |v: Point3| -> Point3 {
        let t = dot(v, u);
        [v[0] - t * u[0], v[1] - t * u[1], v[2] - t * u[2]]
    };
    let wa = reject(a);
    let wb = reject(b);
    if norm(wa) < 1e-12 || norm(wb) < 1e-12 {
        return 0.0;
    }
    let theta = dot(u, cross(wa, wb)).atan2(dot(wa, wb));
    // atan2 yields [-π, π]; fold the closed lower end onto +π
    if theta <= -std::f64::consts::PI {
        std::f64::consts::PI
    } else {
        theta
    }
}

/// Batched encoding for every (query, neighbor) pair of a neighborhood.
/// For A-RI the support points are derived per query from the neighbor
/// list (center point) and the ball radius (intersection point).
pub fn encode_batch(
    cloud: &PointCloud,
    nbrs: &NeighborhoodIndex,
    kind: EncodingKind,
) -> EncodingTensor {
    let w = kind.width();
    let m = nbrs.query_indices.len();
    let mut values = Vec::with_capacity(m * nbrs.k * w);
    for (row, &qi) in nbrs.query_indices.iter().enumerate() {
        let p_i = cloud.positions[qi];
        let list = &nbrs.neighbor_lists[row];
        match kind {
            EncodingKind::Cd => {
                for &nj in list {
                    values.extend_from_slice(&encode_cd(p_i, cloud.positions[nj]).values);
                }
            }
            EncodingKind::Zri => {
                for &nj in list {
                    values.extend_from_slice(&encode_zri(p_i, cloud.positions[nj]).values);
                }
            }
            EncodingKind::Ari => {
                let sp = support_points(cloud, p_i, list, nbrs.radius);
                for &nj in list {
                    values.extend_from_slice(
                        &encode_ari(p_i, cloud.positions[nj], sp.center, sp.intersection).values,
                    );
                }
            }
        }
    }
    EncodingTensor {
        kind,
        queries: m,
        k: nbrs.k,
        values,
    }
}

/// Support intersection re-exported for callers that compute A-RI inputs
/// themselves.
pub use crate::neighborhood::support_intersection as ari_support_intersection;
