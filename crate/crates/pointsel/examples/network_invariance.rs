//! Full-network rotation invariance: with the A-RI-only variant the
//! coordinate stem is gated off and every feature the network sees is
//! rotation invariant, so the logits of a rotated cloud match the original
//! to float32 tolerance.

use pointsel::geom::{random_rotation_so3, rotate, RngSeed};
use pointsel::harness::sample_shape_surface;
use pointsel::net::{init_parameters, logits, NetworkConfig, Variant};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() {
    let config = NetworkConfig::desk(5, Variant::Ari);
    let model = init_parameters(&config, 3).unwrap();
    let cloud = sample_shape_surface("torus", config.input_points, RngSeed(5)).unwrap();
    let base = logits(&cloud, &model).unwrap();
    println!("logits: {base:?}");
    let mut worst = 0.0f32;
    for trial in 0..10 {
        let r = random_rotation_so3(RngSeed(100 + trial));
        let rotated = logits(&rotate(&cloud, &r), &model).unwrap();
        let delta = base
            .iter()
            .zip(rotated.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        println!("trial {trial}: max logit delta {delta:.3e}");
        worst = worst.max(delta);
    }
    println!("worst over 10 rotations: {worst:.3e}");
}
