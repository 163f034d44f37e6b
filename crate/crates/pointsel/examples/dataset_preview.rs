//! Generate the synthetic shape dataset and print per-class statistics:
//! split sizes, mean point norm, and bounding box extents.

use pointsel::geom::RngSeed;
use pointsel::harness::{generate_synthetic_dataset, SHAPE_CLASSES};

fn main() {
    let classes: Vec<&str> = SHAPE_CLASSES.to_vec();
    let data = generate_synthetic_dataset(&classes, 10, 256, RngSeed(0)).unwrap();
    println!(
        "{} classes, {} train / {} test clouds",
        data.classes.len(),
        data.train.len(),
        data.test.len()
    );
    for (label, class) in data.classes.iter().enumerate() {
        let clouds: Vec<_> = data
            .train
            .iter()
            .filter(|c| c.label == Some(label))
            .collect();
        let mut norm_sum = 0.0f64;
        let mut count = 0usize;
        let mut extent = [0.0f64; 3];
        for cloud in &clouds {
            for p in &cloud.positions {
                norm_sum += (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                count += 1;
                for a in 0..3 {
                    extent[a] = extent[a].max(p[a].abs());
                }
            }
        }
        println!(
            "{class:>10}: {} train clouds, mean |p| {:.3}, max |xyz| ({:.2}, {:.2}, {:.2})",
            clouds.len(),
            norm_sum / count as f64,
            extent[0],
            extent[1],
            extent[2]
        );
    }
}
