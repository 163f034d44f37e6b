//! Compute the three position encodings for one neighborhood and show how
//! each behaves under a rotation: CD rotates with the frame, Z-RI survives
//! a yaw, A-RI survives an arbitrary rotation.

use pointsel::encode::{encode_batch, EncodingKind};
use pointsel::geom::{random_rotation_so3, rotate, PointCloud, RngSeed, RotationMatrix};
use pointsel::neighborhood::ball_query;

fn main() {
    let cloud = PointCloud::new(vec![
        [0.0, 0.0, 0.0],
        [0.3, 0.1, 0.0],
        [0.1, 0.25, 0.1],
        [-0.2, 0.1, 0.2],
        [0.05, -0.3, 0.15],
    ]);
    let queries = vec![0];
    let nbrs = ball_query(&cloud, &queries, 0.6, 4, RngSeed(1)).unwrap();

    for kind in EncodingKind::ALL {
        let enc = encode_batch(&cloud, &nbrs, kind);
        println!("{} ({} components: {:?})", kind.name(), kind.width(), kind.component_names());
        for k in 0..enc.k {
            println!("  neighbor {k}: {:?}", enc.entry(0, k));
        }
    }

    // the invariance story, summarized as max deltas
    let yaw = RotationMatrix::about_z(1.1);
    let free = random_rotation_so3(RngSeed(7));
    for (label, r) in [("yaw", &yaw), ("free rotation", &free)] {
        let rotated = rotate(&cloud, r);
        let rnbrs = ball_query(&rotated, &queries, 0.6, 4, RngSeed(1)).unwrap();
        println!("max encoding change under {label}:");
        for kind in EncodingKind::ALL {
            let a = encode_batch(&cloud, &nbrs, kind);
            let b = encode_batch(&rotated, &rnbrs, kind);
            let delta = a
                .values
                .iter()
                .zip(b.values.iter())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f64, f64::max);
            println!("  {}: {delta:.3e}", kind.name());
        }
    }
}
