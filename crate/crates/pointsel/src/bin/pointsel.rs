//! Command-line front end: dataset generation, training, evaluation, the
//! regime matrix, encoding/attention exports, and gradient checks.
//!
//! Config files are flat `key=value` text holding both the `net.` and
//! `train.` namespaces. All exports are CSV. On failure the process exits
//! nonzero after printing a single `error=...` line to stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pointsel::diff::gradient_suite;
use pointsel::encode::{encode_batch, EncodingKind};
use pointsel::geom::{PointCloud, RngSeed};
use pointsel::harness::{
    attention_csv, evaluate, export_attention, export_loss_curves, generate_synthetic_dataset,
    run_regime_matrix, sample_shape_surface, train, Dataset, Regime, TrainConfig,
};
use pointsel::io::{read_xyz, write_xyz};
use pointsel::neighborhood::ball_query;
use pointsel::net::{
    init_parameters, load_checkpoint, parameter_count, save_checkpoint, NetworkConfig, Variant,
};
use pointsel::select::spe_mlp_gradient_check;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "pointsel", version, about = "Selective position encodings for point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key=value config file with net.* and train.* entries
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for CSV/checkpoint artifacts
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct DataArgs {
    /// Comma-separated class list
    #[arg(long, default_value = "sphere,cube,cylinder,cone,torus")]
    classes: String,
    #[arg(long, default_value_t = 25)]
    per_class: usize,
    #[arg(long, default_value_t = 512)]
    points: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train one variant under one regime's train-side rotation
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "sel")]
        variant: String,
        #[arg(long, default_value = "nn")]
        regime: String,
    },
    /// Evaluate a checkpoint under one regime's test-side rotation
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "nn")]
        regime: String,
    },
    /// Full variant x regime accuracy matrix
    Matrix {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Comma-separated subset of cd,zri,ari,fused,sel
        #[arg(long, default_value = "cd,zri,ari,fused,sel")]
        variants: String,
        /// Comma-separated training seeds
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
    },
    /// Dump one position encoding for a cloud's neighborhoods
    Encode {
        #[command(flatten)]
        common: Common,
        /// cd, zri or ari
        #[arg(long, default_value = "ari")]
        kind: String,
        /// xyz file; a unit sphere sample is generated when absent
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, default_value_t = 16)]
        k: usize,
        #[arg(long, default_value_t = 0.2)]
        radius: f64,
    },
    /// Per-point selection-gate export for a trained sel checkpoint
    Attention {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// xyz file; a unit sphere sample is generated when absent
        #[arg(long)]
        input: Option<PathBuf>,
        /// Strided-block stage index
        #[arg(long, default_value_t = 0)]
        stage: usize,
    },
    /// Central-difference checks for every tape op and the composed MLP
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate the synthetic shape dataset and write it as xyz files
    Dataset {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error={e}");
            ExitCode::FAILURE
        }
    }
}

fn build_dataset(args: &DataArgs, seed: u64) -> anyhow::Result<Dataset> {
    let classes: Vec<&str> = args.classes.split(',').map(str::trim).collect();
    Ok(generate_synthetic_dataset(
        &classes,
        args.per_class,
        args.points,
        RngSeed(seed),
    )?)
}

fn load_configs(common: &Common) -> anyhow::Result<(Option<NetworkConfig>, TrainConfig)> {
    match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            let net = if text.lines().any(|l| l.trim_start().starts_with("net.")) {
                Some(NetworkConfig::from_kv(&text)?)
            } else {
                None
            };
            let mut tc = TrainConfig::from_kv(&text)?;
            tc.seed = common.seed;
            Ok((net, tc))
        }
        None => Ok((None, TrainConfig::desk(common.seed))),
    }
}

fn load_cloud(input: &Option<PathBuf>, points: usize, seed: u64) -> anyhow::Result<PointCloud> {
    match input {
        Some(path) => Ok(read_xyz(path)?),
        None => Ok(sample_shape_surface("sphere", points, RngSeed(seed))?),
    }
}

fn write_out(dir: &Path, name: &str, text: &str) -> anyhow::Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    std::fs::write(&path, text)?;
    Ok(path)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train {
            common,
            data,
            variant,
            regime,
        } => {
            let variant = Variant::parse(&variant)?;
            let regime = Regime::parse(&regime)?;
            let dataset = build_dataset(&data, common.seed)?;
            let (net, train_cfg) = load_configs(&common)?;
            let mut config =
                net.unwrap_or_else(|| NetworkConfig::desk(dataset.classes.len(), variant));
            config.variant = variant;
            config.num_classes = dataset.classes.len();
            if !matches!(variant, Variant::Sel | Variant::Fused) {
                config.maskout_epochs = 0;
            }
            let model = init_parameters(&config, common.seed)?;
            eprintln!(
                "training {} ({} params) for {} epochs, train rotation {:?}",
                variant.name(),
                parameter_count(&config),
                train_cfg.epochs,
                regime.train_rotation,
            );
            let (model, history) = train(model, &dataset, &train_cfg, regime.train_rotation)?;
            let acc = evaluate(&model, &dataset, regime.test_rotation, RngSeed(common.seed))?;
            std::fs::create_dir_all(&common.out)?;
            let ckpt = common.out.join(format!("{}.ckpt", variant.name()));
            save_checkpoint(&model, &ckpt)?;
            let curves = export_loss_curves(&[(variant.name(), &history)]);
            let loss_path = write_out(&common.out, "loss.csv", &curves)?;
            println!(
                "final_loss={:.4} accuracy={:.4} regime={} checkpoint={} loss_csv={}",
                history.train_loss.last().unwrap(),
                acc,
                regime.name(),
                ckpt.display(),
                loss_path.display(),
            );
            Ok(())
        }
        Command::Eval {
            common,
            data,
            checkpoint,
            regime,
        } => {
            let regime = Regime::parse(&regime)?;
            let model = load_checkpoint(&checkpoint)?;
            let dataset = build_dataset(&data, common.seed)?;
            let acc = evaluate(&model, &dataset, regime.test_rotation, RngSeed(common.seed))?;
            println!(
                "accuracy={acc:.4} regime={} test_clouds={}",
                regime.name(),
                dataset.test.len()
            );
            Ok(())
        }
        Command::Matrix {
            common,
            data,
            variants,
            seeds,
        } => {
            let variants: Vec<Variant> = variants
                .split(',')
                .map(|v| Variant::parse(v.trim()))
                .collect::<Result<_, _>>()?;
            let seeds: Vec<u64> = seeds
                .split(',')
                .map(|s| s.trim().parse())
                .collect::<Result<_, _>>()?;
            let dataset = build_dataset(&data, common.seed)?;
            let (net, train_cfg) = load_configs(&common)?;
            let base = net.unwrap_or_else(|| NetworkConfig::desk(dataset.classes.len(), Variant::Sel));
            let matrix = run_regime_matrix(
                &base,
                &dataset,
                &train_cfg,
                &variants,
                &Regime::ALL,
                &seeds,
            );
            let csv = matrix.to_csv();
            let path = write_out(&common.out, "matrix.csv", &csv)?;
            print!("{csv}");
            println!("matrix_csv={}", path.display());
            Ok(())
        }
        Command::Encode {
            common,
            kind,
            input,
            k,
            radius,
        } => {
            let kind = match kind.as_str() {
                "cd" => EncodingKind::Cd,
                "zri" => EncodingKind::Zri,
                "ari" => EncodingKind::Ari,
                other => anyhow::bail!("unknown encoding kind '{other}'"),
            };
            let cloud = load_cloud(&input, 512, common.seed)?;
            let queries: Vec<usize> = (0..cloud.len()).collect();
            let nbrs = ball_query(&cloud, &queries, radius, k, RngSeed(common.seed))?;
            let enc = encode_batch(&cloud, &nbrs, kind);
            let mut csv = String::from("query,neighbor");
            for name in kind.component_names() {
                csv.push(',');
                csv.push_str(name);
            }
            csv.push('\n');
            for (row, &qi) in nbrs.query_indices.iter().enumerate() {
                for (ki, &nj) in nbrs.neighbor_lists[row].iter().enumerate() {
                    csv.push_str(&format!("{qi},{nj}"));
                    for v in enc.entry(row, ki) {
                        csv.push_str(&format!(",{v:.9}"));
                    }
                    csv.push('\n');
                }
            }
            let path = write_out(&common.out, &format!("encode_{}.csv", kind.name()), &csv)?;
            println!(
                "encoding={} queries={} k={} csv={}",
                kind.name(),
                enc.queries,
                enc.k,
                path.display()
            );
            Ok(())
        }
        Command::Attention {
            common,
            checkpoint,
            input,
            stage,
        } => {
            let model = load_checkpoint(&checkpoint)?;
            let cloud = load_cloud(&input, model.config.input_points, common.seed)?;
            let rows = export_attention(&model, &cloud, stage)?;
            let csv = attention_csv(&rows);
            let path = write_out(&common.out, "attention.csv", &csv)?;
            let mut counts = [0usize; 3];
            for r in &rows {
                counts[r.label] += 1;
            }
            println!(
                "stage={stage} points={} cd={} zri={} ari={} csv={}",
                rows.len(),
                counts[0],
                counts[1],
                counts[2],
                path.display()
            );
            Ok(())
        }
        Command::Gradcheck { seed } => {
            let mut worst = 0.0f64;
            for (name, rel) in gradient_suite(seed) {
                println!("op={name} rel_error={rel:.2e}");
                worst = worst.max(rel);
            }
            let composed = spe_mlp_gradient_check(seed);
            println!("op=spe_mlp rel_error={composed:.2e}");
            worst = worst.max(composed);
            if worst > 1e-3 {
                anyhow::bail!("gradient check failed, worst rel error {worst:.2e}");
            }
            println!("worst={worst:.2e} threshold=1.0e-3");
            Ok(())
        }
        Command::Dataset { common, data } => {
            let dataset = build_dataset(&data, common.seed)?;
            std::fs::create_dir_all(&common.out)?;
            let mut manifest = String::from("split,id,label,class,path\n");
            for (split, clouds) in [("train", &dataset.train), ("test", &dataset.test)] {
                let dir = common.out.join(split);
                std::fs::create_dir_all(&dir)?;
                for cloud in clouds.iter() {
                    let path = dir.join(format!("{}.xyz", cloud.id));
                    write_xyz(&path, cloud)?;
                    let label = cloud.label.unwrap();
                    manifest.push_str(&format!(
                        "{split},{},{label},{},{}\n",
                        cloud.id,
                        dataset.classes[label],
                        path.display()
                    ));
                }
            }
            let mpath = write_out(&common.out, "manifest.csv", &manifest)?;
            println!(
                "classes={} train={} test={} manifest={}",
                dataset.classes.len(),
                dataset.train.len(),
                dataset.test.len(),
                mpath.display()
            );
            Ok(())
        }
    }
}
