//! Farthest-point sampling and ball query on a sphere sample: the
//! subsample spreads out, and each query collects its radius neighborhood
//! with the center/intersection support points used by the A-RI encoding.

use pointsel::geom::{dist, RngSeed};
use pointsel::harness::sample_shape_surface;
use pointsel::neighborhood::{ball_query, center_point, farthest_point_sample, support_points};

fn main() {
    let cloud = sample_shape_surface("sphere", 256, RngSeed(4)).unwrap();
    let sampled = farthest_point_sample(&cloud, 16).unwrap();
    println!("fps picked {:?}", sampled);

    // minimum pairwise distance of the sample vs. the full cloud
    let min_pair = |idx: &[usize]| {
        let mut best = f64::INFINITY;
        for (a, &i) in idx.iter().enumerate() {
            for &j in &idx[a + 1..] {
                best = best.min(dist(cloud.positions[i], cloud.positions[j]));
            }
        }
        best
    };
    let all: Vec<usize> = (0..cloud.len()).collect();
    println!(
        "min pairwise distance: {:.4} (sampled) vs {:.4} (full cloud)",
        min_pair(&sampled),
        min_pair(&all)
    );

    let nbrs = ball_query(&cloud, &sampled, 0.4, 8, RngSeed(0)).unwrap();
    for row in 0..3 {
        let qi = nbrs.query_indices[row];
        let list = &nbrs.neighbor_lists[row];
        let center = center_point(&cloud, list);
        let sp = support_points(&cloud, cloud.positions[qi], list, nbrs.radius);
        println!(
            "query {qi}: neighbors {:?}, center point {center}, intersection {:?}",
            list, sp.intersection
        );
    }
}
