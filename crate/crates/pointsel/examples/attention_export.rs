//! Selection-gate inspection: train the selection variant briefly, then
//! dump the per-point gate means of the first strided block and count which
//! encoding wins where. During the mask-out window every point is A-RI by
//! construction; afterwards the other branches pick up mass.

use pointsel::geom::RngSeed;
use pointsel::harness::{
    attention_csv, export_attention, generate_synthetic_dataset, train, Rotation, TrainConfig,
};
use pointsel::net::{init_parameters, NetworkConfig, Variant};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn main() {
    let data =
        generate_synthetic_dataset(&["cube", "cone", "capsule"], 10, 256, RngSeed(9)).unwrap();
    let mut config = NetworkConfig::desk(3, Variant::Sel);
    config.input_points = 256;
    config.stage_points = [128, 64, 32, 16, 8];
    config.maskout_epochs = 4;
    let mut cfg = TrainConfig::desk(0);
    cfg.epochs = 8;

    let model = init_parameters(&config, 0).unwrap();
    let (model, _) = train(model, &data, &cfg, Rotation::None).unwrap();

    let cloud = &data.test[0];
    let rows = export_attention(&model, cloud, 0).unwrap();
    let mut counts = [0usize; 3];
    for r in &rows {
        counts[r.label] += 1;
    }
    println!(
        "{} query points: cd={} zri={} ari={}",
        rows.len(),
        counts[0],
        counts[1],
        counts[2]
    );
    let csv = attention_csv(&rows);
    for line in csv.lines().take(6) {
        println!("{line}");
    }
    println!("... ({} rows total)", rows.len());
}
