//! Neighborhood queries over point clouds: ball query with cap K,
//! farthest-point downsampling, and the two support points needed by the
//! arbitrary-rotation-invariant encoding.
//!
//! Everything here is a brute-force distance scan. At desk scale
//! (N <= 4096) that is fast enough, and it keeps results deterministic.

use crate::error::{Error, Result};
use crate::geom::{dist, norm, Point3, PointCloud, RngSeed};

/// Neighbor lists for a set of query points, each padded to exactly K entries.
#[derive(Debug, Clone)]
pub struct NeighborhoodIndex {
    pub query_indices: Vec<usize>,
    /// One list of exactly K point indices per query.
    pub neighbor_lists: Vec<Vec<usize>>,
    pub radius: f64,
    pub k: usize,
}

/// The two support points of a query ball: the neighborhood center m and
/// the ball/ray intersection s.
#[derive(Debug, Clone, Copy)]
pub struct SupportPoints {
    pub center_index: usize,
    pub center: Point3,
    pub intersection: Point3,
    pub radius: f64,
}

/// Up to K in-radius neighbors per query, ascending by distance; ties by
/// lower index. Short lists repeat cyclically; an empty ball falls back to
/// the globally nearest point repeated K times.
///
/// The `_seed` parameter is reserved for sampling-based neighbor selection;
/// the brute-force scan does not consume randomness.
pub fn ball_query(
    points: &PointCloud,
    queries: &[usize],
    radius: f64,
    k: usize,
    _seed: RngSeed,
) -> Result<NeighborhoodIndex> {
    assert!(radius > 0.0, "radius must be positive");
    assert!(k >= 1, "K must be at least 1");
    if points.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let mut neighbor_lists = Vec::with_capacity(queries.len());
    let mut scratch: Vec<(f64, usize)> = Vec::new();
    for &qi in queries {
        let q = points.positions[qi];
        scratch.clear();
        let mut nearest = (f64::INFINITY, 0usize);
        for (pi, p) in points.positions.iter().enumerate() {
            let d = dist(q, *p);
            if d <= radius {
                scratch.push((d, pi));
            }
            if d < nearest.0 {
                nearest = (d, pi);
            }
        }
        scratch.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let mut list = Vec::with_capacity(k);
        if scratch.is_empty() {
            list.resize(k, nearest.1);
        } else {
            for slot in 0..k {
                list.push(scratch[slot % scratch.len()].1);
            }
        }
        neighbor_lists.push(list);
    }
    Ok(NeighborhoodIndex {
        query_indices: queries.to_vec(),
        neighbor_lists,
        radius,
        k,
    })
}

/// Farthest-point sampling. Starts from index 0; each step takes the point
/// maximizing the minimum distance to the selected set, ties to the lowest
/// index.
pub fn farthest_point_sample(points: &PointCloud, m: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if n == 0 {
        return Err(Error::EmptyPointSet);
    }
    if m > n {
        return Err(Error::SampleCountTooLarge {
            requested: m,
            available: n,
        });
    }
    let mut selected = Vec::with_capacity(m);
    let mut min_dist = vec![f64::INFINITY; n];
    let mut current = 0usize;
    selected.push(current);
    for _ in 1..m {
        let cp = points.positions[current];
        let mut best = (f64::NEG_INFINITY, 0usize);
        for (i, p) in points.positions.iter().enumerate() {
            let d = dist(cp, *p);
            if d < min_dist[i] {
                min_dist[i] = d;
            }
            if min_dist[i] > best.0 {
                best = (min_dist[i], i);
            }
        }
        current = best.1;
        selected.push(current);
    }
    Ok(selected)
}

/// Index of the neighbor with minimum mean distance to the other distinct
/// neighbors. Padding duplicates are collapsed first; ties go to the lower
/// point index.
pub fn center_point(points: &PointCloud, neighbor_list: &[usize]) -> usize {
    assert!(!neighbor_list.is_empty(), "neighbor list must be non-empty");
    let mut distinct: Vec<usize> = neighbor_list.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() == 1 {
        return distinct[0];
    }
    // distinct is ascending, so on (near-)ties the lower index is kept
    let mut best = (f64::INFINITY, usize::MAX);
    for &cand in &distinct {
        let mut sum = 0.0;
        let mut count = 0usize;
        for &other in &distinct {
            if other != cand {
                sum += dist(points.positions[cand], points.positions[other]);
                count += 1;
            }
        }
        let mean = sum / count as f64;
        if mean < best.0 - 1e-12 {
            best = (mean, cand);
        }
    }
    best.1
}

/// Intersection of the query ball with the ray from the origin through the
/// query point: p + r * p/||p||. A query at the origin falls back to
/// p + (0, 0, r).
pub fn support_intersection(query: Point3, radius: f64) -> Point3 {
    assert!(radius > 0.0, "radius must be positive");
    let n = norm(query);
    if n > 1e-12 {
        [
            query[0] + radius * query[0] / n,
            query[1] + radius * query[1] / n,
            query[2] + radius * query[2] / n,
        ]
    } else {
        [query[0], query[1], query[2] + radius]
    }
}

/// Both support points for one query ball.
pub fn support_points(
    points: &PointCloud,
    query: Point3,
    neighbor_list: &[usize],
    radius: f64,
) -> SupportPoints {
    let center_index = center_point(points, neighbor_list);
    SupportPoints {
        center_index,
        center: points.positions[center_index],
        intersection: support_intersection(query, radius),
        radius,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{random_rotation_so3, rotate};

    fn cloud(points: &[Point3]) -> PointCloud {
        PointCloud::new(points.to_vec())
    }

    #[test]
    fn ball_query_with_cyclic_padding() {
        let pts = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
        let nbrs = ball_query(&pts, &[0], 1.5, 4, RngSeed(0)).unwrap();
        // in radius: self (d=0), (1,0,0) d=1, (0,1,0) d=1 (tie -> lower index first)
        assert_eq!(nbrs.neighbor_lists[0], vec![0, 1, 3, 0]);
    }

    #[test]
    fn ball_query_spec_example() {
        // query point is appended to the set so it can be indexed
        let pts = cloud(&[[1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]]);
        let nbrs = ball_query(&pts, &[3], 1.5, 4, RngSeed(0)).unwrap();
        // in radius of origin: self, (1,0,0), (0,1,0); self sorts first
        assert_eq!(nbrs.neighbor_lists[0], vec![3, 0, 2, 3]);
    }

    #[test]
    fn ball_query_covers_all_in_distance_order() {
        let pts = cloud(&[[0.0, 0.0, 0.0], [3.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let nbrs = ball_query(&pts, &[0], 10.0, 4, RngSeed(0)).unwrap();
        assert_eq!(nbrs.neighbor_lists[0], vec![0, 2, 3, 1]);
    }

    #[test]
    fn ball_query_fallback_to_nearest() {
        let pts = cloud(&[[5.0, 0.0, 0.0], [6.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.1, 0.0, 0.0]]);
        // query index 0 at (5,0,0), radius 0.1: only itself in radius
        let nbrs = ball_query(&pts, &[2], 0.05, 3, RngSeed(0)).unwrap();
        // (0,0,0) is its own neighbor at distance 0
        assert_eq!(nbrs.neighbor_lists[0], vec![2, 2, 2]);
    }

    #[test]
    fn ball_query_empty_cloud_errors() {
        let pts = PointCloud::new(vec![]);
        assert!(matches!(
            ball_query(&pts, &[], 1.0, 4, RngSeed(0)),
            Err(Error::EmptyPointSet)
        ));
    }

    #[test]
    fn fps_farthest_pair() {
        let pts = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.1, 0.0, 0.0], [0.9, 0.0, 0.0]]);
        assert_eq!(farthest_point_sample(&pts, 2).unwrap(), vec![0, 1]);
        assert_eq!(farthest_point_sample(&pts, 1).unwrap(), vec![0]);
    }

    #[test]
    fn fps_full_sample_is_permutation() {
        let pts = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 3.0]]);
        let mut idx = farthest_point_sample(&pts, 4).unwrap();
        idx.sort_unstable();
        assert_eq!(idx, vec![0, 1, 2, 3]);
        assert!(matches!(
            farthest_point_sample(&pts, 5),
            Err(Error::SampleCountTooLarge { .. })
        ));
    }

    #[test]
    fn center_point_collinear() {
        let pts = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        assert_eq!(center_point(&pts, &[0, 1, 2]), 1);
    }

    #[test]
    fn center_point_ties_to_lower_index() {
        let pts = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        assert_eq!(center_point(&pts, &[0, 1]), 0);
        // equilateral triangle: all means equal
        let tri = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, 0.75f64.sqrt(), 0.0]]);
        assert_eq!(center_point(&tri, &[0, 1, 2]), 0);
        // padding duplicates must not bias the mean
        assert_eq!(center_point(&tri, &[0, 1, 2, 2, 2]), 0);
    }

    #[test]
    fn center_point_single_neighbor() {
        let pts = cloud(&[[4.0, 5.0, 6.0]]);
        assert_eq!(center_point(&pts, &[0, 0, 0]), 0);
    }

    #[test]
    fn support_intersection_examples() {
        let s = support_intersection([2.0, 0.0, 0.0], 1.0);
        assert!(dist(s, [3.0, 0.0, 0.0]) < 1e-12);
        let s0 = support_intersection([0.0, 0.0, 0.0], 1.0);
        assert!(dist(s0, [0.0, 0.0, 1.0]) < 1e-12);
        // norm-5 query, radius 2: result norm is exactly 7
        let inv = 5.0 / 2.0f64.sqrt();
        let s5 = support_intersection([inv, inv, 0.0], 2.0);
        assert!((norm(s5) - 7.0).abs() < 1e-12);
    }

    #[test]
    fn support_intersection_on_ball_surface() {
        let q = [0.3, -0.4, 0.9];
        let s = support_intersection(q, 0.25);
        assert!((dist(s, q) - 0.25).abs() < 1e-9);
    }

    #[test]
    fn ball_query_equivariant_under_rotation() {
        let pts = cloud(&[
            [0.1, 0.2, 0.3],
            [0.5, -0.1, 0.2],
            [-0.3, 0.4, 0.0],
            [0.2, 0.2, 0.2],
            [0.9, 0.9, 0.9],
        ]);
        let r = random_rotation_so3(RngSeed(9));
        let rotated = rotate(&pts, &r);
        let queries = [0, 2, 4];
        let a = ball_query(&pts, &queries, 0.5, 3, RngSeed(0)).unwrap();
        let b = ball_query(&rotated, &queries, 0.5, 3, RngSeed(0)).unwrap();
        assert_eq!(a.neighbor_lists, b.neighbor_lists);
    }

    #[test]
    fn support_intersection_commutes_with_rotation() {
        let r = random_rotation_so3(RngSeed(21));
        for (i, q) in [[1.0, 2.0, 3.0], [0.1, -0.5, 0.2], [-2.0, 0.0, 1.0f64]]
            .iter()
            .enumerate()
        {
            let direct = support_intersection(r.apply(*q), 0.7);
            let routed = r.apply(support_intersection(*q, 0.7));
            assert!(dist(direct, routed) < 1e-9, "case {i}");
        }
    }

    #[test]
    fn center_point_invariant_under_rotation() {
        let pts = cloud(&[[0.1, 0.0, 0.0], [0.4, 0.3, 0.1], [0.0, 0.5, 0.2], [0.2, 0.2, 0.0]]);
        let r = random_rotation_so3(RngSeed(33));
        let rotated = rotate(&pts, &r);
        let list = [0, 1, 2, 3];
        assert_eq!(center_point(&pts, &list), center_point(&rotated, &list));
    }
}
