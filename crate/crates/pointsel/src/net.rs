//! Full network assembly: coordinate stem, embedding MLP, five residual
//! stages with strided downsampling, global max-pool, classification head.
//! Also parameter initialization and checkpoint persistence.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diff::{BnStats, Phase, Tape, Tensor, ValueId};
use crate::encode::EncodingKind;
use crate::error::{Error, Result};
use crate::geom::{PointCloud, RngSeed};
use crate::neighborhood::{ball_query, farthest_point_sample, NeighborhoodIndex};
use crate::select::{
    block_forward_captured, pointwise_mlp, selection_mlp_captured, BlockIds, BlockMlp, BlockStats,
    LayerIds, LinearIds, SelectionMlpIds, SelectionMlpSpec,
};

/// The five model rows of the ablation: one encoding everywhere, rigid
/// three-way fusion, or attention-gated selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Cd,
    Zri,
    Ari,
    Fused,
    Sel,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Cd,
        Variant::Zri,
        Variant::Ari,
        Variant::Fused,
        Variant::Sel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Cd => "cd",
            Variant::Zri => "zri",
            Variant::Ari => "ari",
            Variant::Fused => "fused",
            Variant::Sel => "sel",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant '{s}'")))
    }

    fn block_mlp(self) -> BlockMlp {
        match self {
            Variant::Cd => BlockMlp::Single(EncodingKind::Cd),
            Variant::Zri => BlockMlp::Single(EncodingKind::Zri),
            Variant::Ari => BlockMlp::Single(EncodingKind::Ari),
            Variant::Fused => BlockMlp::Fused,
            Variant::Sel => BlockMlp::Selection,
        }
    }
}

/// Static shape of the whole network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub variant: Variant,
    pub stage_channels: [usize; 5],
    pub blocks_per_stage: [usize; 5],
    pub input_points: usize,
    pub stage_points: [usize; 5],
    pub stage_radii: [f64; 5],
    pub k: usize,
    /// Mask-out window T: the CD and Z-RI gates (and the coordinate stem)
    /// are zeroed while epoch < T. `usize::MAX` keeps them off for good.
    pub maskout_epochs: usize,
    pub num_classes: usize,
    pub dropout: f64,
}

impl NetworkConfig {
    /// Desk-scale defaults: 512 points halving per stage, channels
    /// {12, 24, 48, 96, 192}, K = 16, radii doubling from 0.1.
    pub fn desk(num_classes: usize, variant: Variant) -> Self {
        NetworkConfig {
            variant,
            stage_channels: [12, 24, 48, 96, 192],
            blocks_per_stage: [1; 5],
            input_points: 512,
            stage_points: [256, 128, 64, 32, 16],
            stage_radii: [0.1, 0.2, 0.4, 0.8, 1.6],
            k: 16,
            maskout_epochs: match variant {
                Variant::Sel | Variant::Fused => 20,
                _ => 0,
            },
            num_classes,
            dropout: 0.3,
        }
    }

    /// The small published configuration; used for the parameter-count
    /// audit, not for desk-scale training.
    pub fn paper_small(num_classes: usize) -> Self {
        NetworkConfig {
            variant: Variant::Sel,
            stage_channels: [36, 72, 144, 288, 576],
            blocks_per_stage: [1; 5],
            input_points: 1024,
            stage_points: [512, 256, 128, 64, 32],
            stage_radii: [0.1, 0.2, 0.4, 0.8, 1.6],
            k: 16,
            maskout_epochs: 200,
            num_classes,
            dropout: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for w in self.stage_channels.windows(2) {
            if w[1] <= w[0] {
                return Err(Error::InvalidConfig(format!(
                    "stage channels must strictly increase, got {:?}",
                    self.stage_channels
                )));
            }
        }
        for (t, &c) in self.stage_channels.iter().enumerate() {
            // each block bottlenecks to C_t/2 and slices that into thirds
            if c % 6 != 0 {
                return Err(Error::InvalidConfig(format!(
                    "stage {t} channels {c} must be divisible by 6"
                )));
            }
        }
        let mut prev = self.input_points;
        for (t, &n) in self.stage_points.iter().enumerate() {
            if n == 0 || n > prev {
                return Err(Error::InvalidConfig(format!(
                    "stage {t} point count {n} must be in 1..={prev}"
                )));
            }
            prev = n;
        }
        for &b in &self.blocks_per_stage {
            if b == 0 {
                return Err(Error::InvalidConfig("blocks_per_stage must be >= 1".into()));
            }
        }
        for &r in &self.stage_radii {
            if !(r > 0.0) {
                return Err(Error::InvalidConfig("stage radii must be positive".into()));
            }
        }
        if self.k == 0 || self.num_classes < 2 {
            return Err(Error::InvalidConfig(
                "k must be >= 1 and num_classes >= 2".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig("dropout must be in [0, 1)".into()));
        }
        Ok(())
    }

    fn head_hidden(&self) -> usize {
        self.stage_channels[4] / 2
    }

    /// Serialize as flat `key=value` lines (namespaced under `net.`).
    pub fn to_kv(&self) -> String {
        let list = |xs: &[usize]| {
            xs.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let radii = self
            .stage_radii
            .iter()
            .map(|r| format!("{r}"))
            .collect::<Vec<_>>()
            .join(",");
        format!(
            "net.variant={}\nnet.stage_channels={}\nnet.blocks_per_stage={}\n\
             net.input_points={}\nnet.stage_points={}\nnet.stage_radii={}\n\
             net.k={}\nnet.maskout={}\nnet.num_classes={}\nnet.dropout={}\n",
            self.variant.name(),
            list(&self.stage_channels),
            list(&self.blocks_per_stage),
            self.input_points,
            list(&self.stage_points),
            radii,
            self.k,
            self.maskout_epochs,
            self.num_classes,
            self.dropout,
        )
    }

    /// Parse from `key=value` lines; missing keys fall back to the desk
    /// defaults for the parsed (or default `sel`) variant.
    pub fn from_kv(text: &str) -> Result<Self> {
        let map = parse_kv(text)?;
        let variant = match map.get("net.variant") {
            Some(v) => Variant::parse(v)?,
            None => Variant::Sel,
        };
        let mut cfg = NetworkConfig::desk(5, variant);
        let get_usize = |key: &str, default: usize| -> Result<usize> {
            match map.get(key) {
                Some(v) => v.parse().map_err(|_| Error::Parse {
                    context: key.to_string(),
                    message: format!("expected integer, got '{v}'"),
                }),
                None => Ok(default),
            }
        };
        fn get_arr<T: std::str::FromStr>(
            map: &BTreeMap<String, String>,
            key: &str,
            default: [T; 5],
        ) -> Result<[T; 5]>
        where
            T: Copy,
        {
            match map.get(key) {
                Some(v) => {
                    let parts: Vec<T> = v
                        .split(',')
                        .map(|p| p.trim().parse())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| Error::Parse {
                            context: key.to_string(),
                            message: format!("expected 5 comma-separated values, got '{v}'"),
                        })?;
                    parts.try_into().map_err(|_| Error::Parse {
                        context: key.to_string(),
                        message: format!("expected 5 values, got '{v}'"),
                    })
                }
                None => Ok(default),
            }
        }
        cfg.stage_channels = get_arr(&map, "net.stage_channels", cfg.stage_channels)?;
        cfg.blocks_per_stage = get_arr(&map, "net.blocks_per_stage", cfg.blocks_per_stage)?;
        cfg.input_points = get_usize("net.input_points", cfg.input_points)?;
        cfg.stage_points = get_arr(&map, "net.stage_points", cfg.stage_points)?;
        cfg.stage_radii = get_arr(&map, "net.stage_radii", cfg.stage_radii)?;
        cfg.k = get_usize("net.k", cfg.k)?;
        cfg.maskout_epochs = get_usize("net.maskout", cfg.maskout_epochs)?;
        cfg.num_classes = get_usize("net.num_classes", cfg.num_classes)?;
        if let Some(v) = map.get("net.dropout") {
            cfg.dropout = v.parse().map_err(|_| Error::Parse {
                context: "net.dropout".into(),
                message: format!("expected float, got '{v}'"),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parse flat `key=value` text; `#` comments and blank lines are skipped.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            context: format!("line {}", lineno + 1),
            message: format!("expected key=value, got '{line}'"),
        })?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

/// All learnable tensors and running statistics, keyed by name.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: NetworkConfig,
    pub params: BTreeMap<String, Tensor<f32>>,
    pub stats: BTreeMap<String, BnStats<f32>>,
    pub epoch: usize,
    pub seed: u64,
}

/// Whether the variant ever routes features through the non-invariant
/// coordinate stem. The A-RI-only network keeps it permanently zeroed so
/// the whole forward pass sees rotation-invariant inputs only.
fn stem_is_gated(config: &NetworkConfig, epoch: usize) -> bool {
    match config.variant {
        Variant::Ari => true,
        Variant::Sel | Variant::Fused => epoch < config.maskout_epochs,
        Variant::Cd | Variant::Zri => false,
    }
}

/// Shapes of one selection or point-wise MLP, as (suffix, shape) pairs.
fn mlp_param_shapes(variant: Variant, in_c: usize, out_c: usize) -> Vec<(String, Vec<usize>)> {
    let mut v = Vec::new();
    match variant {
        Variant::Sel | Variant::Fused => {
            let widths = [3usize, 5, 8];
            for (i, &w) in widths.iter().enumerate() {
                let inp = 2 * (in_c / 3) + w;
                let out = out_c / 3;
                v.push((format!("branch{i}.w"), vec![out, inp]));
                v.push((format!("branch{i}.b"), vec![out]));
                v.push((format!("branch{i}.gamma"), vec![out]));
                v.push((format!("branch{i}.beta"), vec![out]));
            }
            if variant == Variant::Sel {
                v.push(("select.w".into(), vec![out_c, in_c]));
                v.push(("select.b".into(), vec![out_c]));
            }
        }
        Variant::Cd | Variant::Zri | Variant::Ari => {
            let w = match variant {
                Variant::Cd => 3,
                Variant::Zri => 5,
                _ => 8,
            };
            v.push(("single.w".into(), vec![out_c, 2 * in_c + w]));
            v.push(("single.b".into(), vec![out_c]));
            v.push(("single.gamma".into(), vec![out_c]));
            v.push(("single.beta".into(), vec![out_c]));
        }
    }
    v
}

fn mlp_stat_channels(variant: Variant, out_c: usize) -> Vec<(String, usize)> {
    match variant {
        Variant::Sel | Variant::Fused => (0..3)
            .map(|i| (format!("branch{i}"), out_c / 3))
            .collect(),
        _ => vec![("single".into(), out_c)],
    }
}

/// Every parameter name and shape, in the canonical (initialization)
/// order.
pub fn parameter_layout(config: &NetworkConfig) -> Vec<(String, Vec<usize>)> {
    let c1 = config.stage_channels[0];
    let mut v = vec![
        ("stem.w".to_string(), vec![c1, 3]),
        ("stem.b".to_string(), vec![c1]),
    ];
    for (suffix, shape) in mlp_param_shapes(config.variant, c1, c1) {
        v.push((format!("embed.{suffix}"), shape));
    }
    let mut in_c = c1;
    for t in 0..5 {
        let out_c = config.stage_channels[t];
        for b in 0..config.blocks_per_stage[t] {
            let block_in = if b == 0 { in_c } else { out_c };
            let mid = out_c / 2;
            let p = format!("stage{t}.block{b}");
            v.push((format!("{p}.bottleneck.w"), vec![mid, block_in]));
            v.push((format!("{p}.bottleneck.b"), vec![mid]));
            v.push((format!("{p}.bottleneck.gamma"), vec![mid]));
            v.push((format!("{p}.bottleneck.beta"), vec![mid]));
            for (suffix, shape) in mlp_param_shapes(config.variant, mid, mid) {
                v.push((format!("{p}.{suffix}"), shape));
            }
            v.push((format!("{p}.expand.w"), vec![out_c, mid]));
            v.push((format!("{p}.expand.b"), vec![out_c]));
            v.push((format!("{p}.expand.gamma"), vec![out_c]));
            v.push((format!("{p}.expand.beta"), vec![out_c]));
            if block_in != out_c {
                v.push((format!("{p}.skip.w"), vec![out_c, block_in]));
                v.push((format!("{p}.skip.b"), vec![out_c]));
            }
        }
        in_c = out_c;
    }
    let c5 = config.stage_channels[4];
    let hidden = config.head_hidden();
    v.push(("head.fc1.w".into(), vec![c5, c5]));
    v.push(("head.fc1.b".into(), vec![c5]));
    v.push(("head.fc2.w".into(), vec![hidden, c5]));
    v.push(("head.fc2.b".into(), vec![hidden]));
    v.push(("head.fc3.w".into(), vec![config.num_classes, hidden]));
    v.push(("head.fc3.b".into(), vec![config.num_classes]));
    v
}

/// Every running-statistic name and channel width.
pub fn stat_layout(config: &NetworkConfig) -> Vec<(String, usize)> {
    let c1 = config.stage_channels[0];
    let mut v: Vec<(String, usize)> = mlp_stat_channels(config.variant, c1)
        .into_iter()
        .map(|(s, c)| (format!("embed.{s}"), c))
        .collect();
    for t in 0..5 {
        let out_c = config.stage_channels[t];
        for b in 0..config.blocks_per_stage[t] {
            let mid = out_c / 2;
            let p = format!("stage{t}.block{b}");
            v.push((format!("{p}.bottleneck"), mid));
            for (s, c) in mlp_stat_channels(config.variant, mid) {
                v.push((format!("{p}.{s}"), c));
            }
            v.push((format!("{p}.expand"), out_c));
        }
    }
    v
}

/// Total learnable scalar count.
pub fn parameter_count(config: &NetworkConfig) -> usize {
    parameter_layout(config)
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

/// Deterministic initialization: fan-in-scaled uniform weights, zero
/// biases, unit scales, zero shifts.
pub fn init_parameters(config: &NetworkConfig, seed: u64) -> Result<ModelState> {
    config.validate()?;
    let mut rng = RngSeed(seed).rng();
    let mut params = BTreeMap::new();
    for (name, shape) in parameter_layout(config) {
        let len: usize = shape.iter().product();
        let values = if name.ends_with(".w") {
            let fan_in = shape[1] as f64;
            let bound = (1.0 / fan_in).sqrt();
            (0..len)
                .map(|_| ((rng.gen::<f64>() * 2.0 - 1.0) * bound) as f32)
                .collect()
        } else if name.ends_with(".gamma") {
            vec![1.0f32; len]
        } else {
            vec![0.0f32; len]
        };
        params.insert(name, Tensor::new(shape, values));
    }
    let stats = stat_layout(config)
        .into_iter()
        .map(|(name, c)| (name, BnStats::new(c)))
        .collect();
    Ok(ModelState {
        config: config.clone(),
        params,
        stats,
        epoch: 0,
        seed,
    })
}

/// Sampling and neighbor structure for one cloud, reusable across
/// rotations of the same cloud (rotations preserve distances, hence
/// neighbor and sampling indices).
#[derive(Debug, Clone)]
pub struct NetPlan {
    pub embed_nbrs: NeighborhoodIndex,
    pub stages: Vec<StagePlan>,
}

#[derive(Debug, Clone)]
pub struct StagePlan {
    /// Rows sampled from the previous point set.
    pub sampled: Vec<usize>,
    pub strided_nbrs: NeighborhoodIndex,
    /// Neighborhoods of the sampled set within itself, for the plain
    /// blocks that follow.
    pub plain_nbrs: Option<NeighborhoodIndex>,
}

/// Compute the per-stage sampling rows and neighbor lists for a cloud.
pub fn plan(cloud: &PointCloud, config: &NetworkConfig) -> Result<NetPlan> {
    if cloud.positions.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let n = cloud.positions.len();
    let all: Vec<usize> = (0..n).collect();
    let embed_nbrs = ball_query(cloud, &all, config.stage_radii[0], config.k, RngSeed(0))?;
    let mut stages = Vec::with_capacity(5);
    let mut current = cloud.clone();
    for t in 0..5 {
        let want = config.stage_points[t].min(current.positions.len());
        let sampled = if want == current.positions.len() {
            (0..want).collect()
        } else {
            farthest_point_sample(&current, want)?
        };
        let strided_nbrs = ball_query(&current, &sampled, config.stage_radii[t], config.k, RngSeed(0))?;
        let next = PointCloud {
            positions: sampled.iter().map(|&i| current.positions[i]).collect(),
            label: current.label,
            id: current.id.clone(),
        };
        let plain_nbrs = if config.blocks_per_stage[t] > 1 {
            let rows: Vec<usize> = (0..next.positions.len()).collect();
            Some(ball_query(&next, &rows, config.stage_radii[t], config.k, RngSeed(0))?)
        } else {
            None
        };
        stages.push(StagePlan {
            sampled,
            strided_nbrs,
            plain_nbrs,
        });
        current = next;
    }
    Ok(NetPlan { embed_nbrs, stages })
}

/// A built forward graph: the tape, the logits node, per-parameter tape
/// bindings for gradient collection, and the captured selection gates of
/// each stage's strided block (Sel variant only).
pub struct ForwardPass {
    pub tape: Tape<f32>,
    pub logits: ValueId,
    pub bindings: BTreeMap<String, ValueId>,
    pub stage_alpha: Vec<Option<Vec<f32>>>,
}

fn bind_layer(b: &BTreeMap<String, ValueId>, prefix: &str) -> LayerIds {
    LayerIds {
        lin: LinearIds {
            w: b[&format!("{prefix}.w")],
            b: b[&format!("{prefix}.b")],
        },
        gamma: b[&format!("{prefix}.gamma")],
        beta: b[&format!("{prefix}.beta")],
    }
}

fn bind_mlp(
    b: &BTreeMap<String, ValueId>,
    prefix: &str,
    variant: Variant,
) -> (Option<SelectionMlpIds>, Option<LayerIds>) {
    match variant {
        Variant::Sel | Variant::Fused => {
            let branches = [0, 1, 2].map(|i| bind_layer(b, &format!("{prefix}.branch{i}")));
            let select_fc = (variant == Variant::Sel).then(|| LinearIds {
                w: b[&format!("{prefix}.select.w")],
                b: b[&format!("{prefix}.select.b")],
            });
            (Some(SelectionMlpIds { branches, select_fc }), None)
        }
        _ => (None, Some(bind_layer(b, &format!("{prefix}.single")))),
    }
}

fn stats_triplet(
    stats: &BTreeMap<String, BnStats<f32>>,
    prefix: &str,
    variant: Variant,
) -> [BnStats<f32>; 3]
{
    match variant {
        Variant::Sel | Variant::Fused => {
            [0, 1, 2].map(|i| stats[&format!("{prefix}.branch{i}")].clone())
        }
        _ => {
            let single = stats[&format!("{prefix}.single")].clone();
            [single.clone(), single.clone(), single]
        }
    }
}

fn store_stats_triplet(
    stats: &mut BTreeMap<String, BnStats<f32>>,
    prefix: &str,
    variant: Variant,
    triplet: [BnStats<f32>; 3],
) {
    match variant {
        Variant::Sel | Variant::Fused => {
            for (i, s) in triplet.into_iter().enumerate() {
                stats.insert(format!("{prefix}.branch{i}"), s);
            }
        }
        _ => {
            stats.insert(format!("{prefix}.single"), triplet.into_iter().next().unwrap());
        }
    }
}

/// Build the full forward graph for one cloud. `stats` is updated with
/// fresh running statistics when `phase` is `Train`. `dropout_rng` drives
/// the head dropout masks (ignored in eval).
#[allow(clippy::too_many_arguments)]
pub fn forward_pass(
    cloud: &PointCloud,
    config: &NetworkConfig,
    params: &BTreeMap<String, Tensor<f32>>,
    stats: &mut BTreeMap<String, BnStats<f32>>,
    epoch: usize,
    phase: Phase,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
    precomputed: Option<&NetPlan>,
) -> Result<ForwardPass> {
    config.validate()?;
    let owned_plan;
    let net_plan = match precomputed {
        Some(p) => p,
        None => {
            owned_plan = plan(cloud, config)?;
            &owned_plan
        }
    };
    let n = cloud.positions.len();
    if n == 0 {
        return Err(Error::EmptyPointSet);
    }

    let mut tape = Tape::<f32>::new();
    let train = phase == Phase::Train;
    let mut bindings = BTreeMap::new();
    for (name, tensor) in params {
        bindings.insert(name.clone(), tape.leaf(tensor.clone(), train));
    }
    let variant = config.variant;
    let c1 = config.stage_channels[0];

    // coordinate stem
    let coords: Vec<f32> = cloud
        .positions
        .iter()
        .flat_map(|p| p.iter().map(|&v| v as f32))
        .collect();
    let x = tape.constant(Tensor::new(vec![n, 3], coords));
    let mut f = tape.linear(x, bindings["stem.w"], bindings["stem.b"])?;
    if stem_is_gated(config, epoch) {
        // hard zero: the stem's rotation-sensitive features never reach
        // the invariant path, and its weights receive no gradient
        f = tape.mul_mask(f, vec![0.0f32; n * c1])?;
    }

    // embedding MLP over the full cloud
    let all_rows: Vec<usize> = (0..n).collect();
    let (sel_ids, single_ids) = bind_mlp(&bindings, "embed", variant);
    let mut triplet = stats_triplet(stats, "embed", variant);
    f = match variant {
        Variant::Sel | Variant::Fused => {
            let spec = SelectionMlpSpec {
                in_channels: c1,
                out_channels: c1,
                maskout_epochs: config.maskout_epochs,
            };
            let encodings: Vec<_> = EncodingKind::ALL
                .iter()
                .map(|&kind| crate::encode::encode_batch(cloud, &net_plan.embed_nbrs, kind))
                .collect();
            selection_mlp_captured(
                &mut tape,
                f,
                &all_rows,
                &net_plan.embed_nbrs,
                &encodings,
                &spec,
                sel_ids.as_ref().unwrap(),
                &mut triplet,
                epoch,
                phase,
                &mut None,
            )?
        }
        _ => {
            let kind = match variant {
                Variant::Cd => EncodingKind::Cd,
                Variant::Zri => EncodingKind::Zri,
                _ => EncodingKind::Ari,
            };
            pointwise_mlp(
                &mut tape,
                f,
                &all_rows,
                cloud,
                &net_plan.embed_nbrs,
                kind,
                single_ids.as_ref().unwrap(),
                &mut triplet[0],
                phase,
            )?
        }
    };
    if train {
        store_stats_triplet(stats, "embed", variant, triplet);
    }

    // five stages
    let mut current = cloud.clone();
    let mut stage_alpha: Vec<Option<Vec<f32>>> = Vec::with_capacity(5);
    for (t, sp) in net_plan.stages.iter().enumerate() {
        let out_c = config.stage_channels[t];
        let mid = out_c / 2;
        for b in 0..config.blocks_per_stage[t] {
            let prefix = format!("stage{t}.block{b}");
            let (sel_ids, single_ids) = bind_mlp(&bindings, &prefix, variant);
            let block_ids = BlockIds {
                bottleneck: bind_layer(&bindings, &format!("{prefix}.bottleneck")),
                selection: sel_ids,
                single: single_ids,
                expand: LinearIds {
                    w: bindings[&format!("{prefix}.expand.w")],
                    b: bindings[&format!("{prefix}.expand.b")],
                },
                expand_gamma: bindings[&format!("{prefix}.expand.gamma")],
                expand_beta: bindings[&format!("{prefix}.expand.beta")],
                skip: bindings
                    .get(&format!("{prefix}.skip.w"))
                    .map(|&w| LinearIds {
                        w,
                        b: bindings[&format!("{prefix}.skip.b")],
                    }),
            };
            let mut block_stats = BlockStats {
                bottleneck: stats[&format!("{prefix}.bottleneck")].clone(),
                branches: stats_triplet(stats, &prefix, variant),
                expand: stats[&format!("{prefix}.expand")].clone(),
            };
            let (rows, nbrs, cloud_ref): (Vec<usize>, &NeighborhoodIndex, &PointCloud) = if b == 0 {
                (sp.sampled.clone(), &sp.strided_nbrs, &current)
            } else {
                // plain blocks run on the already-sampled set
                let m = sp.sampled.len();
                ((0..m).collect(), sp.plain_nbrs.as_ref().unwrap(), &current)
            };
            let mut alpha = None;
            f = block_forward_captured(
                &mut tape,
                f,
                &rows,
                cloud_ref,
                nbrs,
                variant.block_mlp(),
                &block_ids,
                &mut block_stats,
                config.maskout_epochs,
                epoch,
                phase,
                &mut alpha,
            )?;
            if b == 0 {
                stage_alpha.push(alpha.map(|id| tape.values(id).to_vec()));
                current = PointCloud {
                    positions: sp.sampled.iter().map(|&i| current.positions[i]).collect(),
                    label: current.label,
                    id: current.id.clone(),
                };
                let _ = mid;
            }
            if train {
                stats.insert(format!("{prefix}.bottleneck"), block_stats.bottleneck);
                store_stats_triplet(stats, &prefix, variant, block_stats.branches);
                stats.insert(format!("{prefix}.expand"), block_stats.expand);
            }
        }
    }

    // global max-pool over the surviving points
    let m = current.positions.len();
    let c5 = config.stage_channels[4];
    let f3 = tape.reshape(f, vec![1, m, c5])?;
    let mut h = tape.max_over_neighbors(f3); // [1, C5]

    // head MLP (no batch norm: the head sees one pooled row per cloud)
    let mut dropout = |tape: &mut Tape<f32>, h: ValueId| -> Result<ValueId> {
        if !train || config.dropout == 0.0 {
            return Ok(h);
        }
        match dropout_rng.as_deref_mut() {
            Some(rng) => {
                let len: usize = tape.shape(h).iter().product();
                let keep = 1.0 - config.dropout;
                let scale = (1.0 / keep) as f32;
                let mask: Vec<f32> = (0..len)
                    .map(|_| if rng.gen::<f64>() < keep { scale } else { 0.0 })
                    .collect();
                tape.mul_mask(h, mask)
            }
            None => Ok(h),
        }
    };
    h = tape.linear(h, bindings["head.fc1.w"], bindings["head.fc1.b"])?;
    h = tape.relu(h);
    h = dropout(&mut tape, h)?;
    h = tape.linear(h, bindings["head.fc2.w"], bindings["head.fc2.b"])?;
    h = tape.relu(h);
    h = dropout(&mut tape, h)?;
    let logits = tape.linear(h, bindings["head.fc3.w"], bindings["head.fc3.b"])?;

    Ok(ForwardPass {
        tape,
        logits,
        bindings,
        stage_alpha,
    })
}

/// Eval-mode logits for one cloud. Side-effect free on the state.
pub fn logits(cloud: &PointCloud, state: &ModelState) -> Result<Vec<f32>> {
    let mut stats = state.stats.clone();
    let pass = forward_pass(
        cloud,
        &state.config,
        &state.params,
        &mut stats,
        state.epoch,
        Phase::Eval,
        None,
        None,
    )?;
    Ok(pass.tape.values(pass.logits).to_vec())
}

/// Per-point embedding (stem + embedding MLP only), eval mode.
pub fn embed_points(cloud: &PointCloud, state: &ModelState) -> Result<Tensor<f32>> {
    if cloud.positions.is_empty() {
        return Err(Error::EmptyPointSet);
    }
    let config = &state.config;
    config.validate()?;
    let n = cloud.positions.len();
    let all: Vec<usize> = (0..n).collect();
    let nbrs = ball_query(cloud, &all, config.stage_radii[0], config.k, RngSeed(0))?;
    let mut tape = Tape::<f32>::new();
    let mut bindings = BTreeMap::new();
    for (name, tensor) in &state.params {
        if name.starts_with("stem.") || name.starts_with("embed.") {
            bindings.insert(name.clone(), tape.leaf(tensor.clone(), false));
        }
    }
    let coords: Vec<f32> = cloud
        .positions
        .iter()
        .flat_map(|p| p.iter().map(|&v| v as f32))
        .collect();
    let x = tape.constant(Tensor::new(vec![n, 3], coords));
    let mut f = tape.linear(x, bindings["stem.w"], bindings["stem.b"])?;
    if stem_is_gated(config, state.epoch) {
        f = tape.mul_mask(f, vec![0.0f32; n * config.stage_channels[0]])?;
    }
    let (sel_ids, single_ids) = bind_mlp(&bindings, "embed", config.variant);
    let mut triplet = stats_triplet(&state.stats, "embed", config.variant);
    let out = match config.variant {
        Variant::Sel | Variant::Fused => {
            let spec = SelectionMlpSpec {
                in_channels: config.stage_channels[0],
                out_channels: config.stage_channels[0],
                maskout_epochs: config.maskout_epochs,
            };
            let encodings: Vec<_> = EncodingKind::ALL
                .iter()
                .map(|&kind| crate::encode::encode_batch(cloud, &nbrs, kind))
                .collect();
            selection_mlp_captured(
                &mut tape,
                f,
                &all,
                &nbrs,
                &encodings,
                &spec,
                sel_ids.as_ref().unwrap(),
                &mut triplet,
                state.epoch,
                Phase::Eval,
                &mut None,
            )?
        }
        _ => {
            let kind = match config.variant {
                Variant::Cd => EncodingKind::Cd,
                Variant::Zri => EncodingKind::Zri,
                _ => EncodingKind::Ari,
            };
            pointwise_mlp(
                &mut tape,
                f,
                &all,
                cloud,
                &nbrs,
                kind,
                single_ids.as_ref().unwrap(),
                &mut triplet[0],
                Phase::Eval,
            )?
        }
    };
    Ok(tape.tensor(out))
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"PSEL";
const CHECKPOINT_VERSION: u32 = 1;

/// Serialize a model state to the binary checkpoint format: magic,
/// version, config text block, epoch, seed, then named tensor records.
/// Running statistics are stored as `<name>.running_mean` /
/// `<name>.running_var` tensors.
pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let cfg = state.config.to_kv();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&(state.epoch as u64).to_le_bytes());
    out.extend_from_slice(&state.seed.to_le_bytes());

    let mut records: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    for (name, t) in &state.params {
        records.push((name.clone(), t.shape.clone(), t.values.clone()));
    }
    for (name, s) in &state.stats {
        records.push((
            format!("{name}.running_mean"),
            vec![s.mean.len()],
            s.mean.clone(),
        ));
        records.push((
            format!("{name}.running_var"),
            vec![s.var.len()],
            s.var.clone(),
        ));
    }
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, shape, values) in records {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(shape.len() as u8);
        for &e in &shape {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

struct ByteReader<R> {
    inner: R,
}

impl<R: Read> ByteReader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::CheckpointTruncated("unexpected end of file".into()))?;
        Ok(buf)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
}

/// Load a checkpoint, validating every tensor name and shape against the
/// embedded config.
pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let file = std::fs::File::open(path)?;
    let mut r = ByteReader {
        inner: std::io::BufReader::new(file),
    };
    let magic = r.bytes(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::CheckpointVersion(format!(
            "bad magic {magic:02x?}"
        )));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion(format!(
            "got version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let cfg_len = r.u32()? as usize;
    let cfg_text = String::from_utf8(r.bytes(cfg_len)?).map_err(|_| Error::Parse {
        context: "checkpoint config".into(),
        message: "config block is not UTF-8".into(),
    })?;
    let config = NetworkConfig::from_kv(&cfg_text)?;
    let epoch = r.u64()? as usize;
    let seed = r.u64()?;

    let mut expected: BTreeMap<String, Vec<usize>> = parameter_layout(&config).into_iter().collect();
    for (name, c) in stat_layout(&config) {
        expected.insert(format!("{name}.running_mean"), vec![c]);
        expected.insert(format!("{name}.running_var"), vec![c]);
    }

    let count = r.u32()? as usize;
    let mut tensors: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.bytes(name_len)?).map_err(|_| Error::Parse {
            context: "checkpoint tensor name".into(),
            message: "not UTF-8".into(),
        })?;
        let rank = r.bytes(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let want = expected
            .get(&name)
            .ok_or_else(|| Error::CheckpointUnknownTensor(name.clone()))?;
        if *want != shape {
            return Err(Error::ShapeMismatch {
                expected: format!("{name}: {want:?}"),
                got: format!("{shape:?}"),
            });
        }
        let len: usize = shape.iter().product();
        let raw = r.bytes(len * 4)?;
        let values: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(name, Tensor::new(shape, values));
    }
    for name in expected.keys() {
        if !tensors.contains_key(name) {
            return Err(Error::CheckpointTruncated(format!(
                "missing tensor {name}"
            )));
        }
    }

    let mut params = BTreeMap::new();
    for (name, _) in parameter_layout(&config) {
        params.insert(name.clone(), tensors.remove(&name).unwrap());
    }
    let mut stats = BTreeMap::new();
    for (name, _) in stat_layout(&config) {
        let mean = tensors.remove(&format!("{name}.running_mean")).unwrap();
        let var = tensors.remove(&format!("{name}.running_var")).unwrap();
        stats.insert(
            name,
            BnStats {
                mean: mean.values,
                var: var.values,
            },
        );
    }
    Ok(ModelState {
        config,
        params,
        stats,
        epoch,
        seed,
    })
}
