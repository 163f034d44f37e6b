//! Save a model, load it back, and verify the logits agree bitwise.

use pointsel::geom::RngSeed;
use pointsel::harness::sample_shape_surface;
use pointsel::net::{init_parameters, load_checkpoint, logits, save_checkpoint, NetworkConfig, Variant};

fn main() {
    let config = NetworkConfig::desk(5, Variant::Sel);
    let model = init_parameters(&config, 7).unwrap();
    let cloud = sample_shape_surface("cylinder", config.input_points, RngSeed(3)).unwrap();
    let before = logits(&cloud, &model).unwrap();

    let dir = std::env::temp_dir().join("pointsel-roundtrip");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("model.ckpt");
    save_checkpoint(&model, &path).unwrap();
    let size = std::fs::metadata(&path).unwrap().len();
    let restored = load_checkpoint(&path).unwrap();
    let after = logits(&cloud, &restored).unwrap();

    println!("checkpoint: {} ({size} bytes)", path.display());
    println!("logits before: {before:?}");
    println!("logits after:  {after:?}");
    assert_eq!(before, after, "round-trip must be bitwise");
    println!("bitwise identical");
}
