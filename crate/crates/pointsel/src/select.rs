//! The encoding-selection MLP and its residual blocks.
//!
//! Each query point gathers K neighbors, encodes their relative positions
//! three ways (CD / Z-RI / A-RI), runs each through its own branch MLP on
//! a third of the feature channels, gates the branches with per-point
//! sigmoid attention, and max-pools over the neighbors. A mask-out
//! schedule can hard-zero the CD and Z-RI gates for the first T epochs so
//! only the rotation-invariant branch trains.

use crate::diff::{BnStats, Phase, Scalar, Tape, Tensor, ValueId};
use crate::encode::{encode_batch, EncodingKind, EncodingTensor};
use crate::error::{Error, Result};
use crate::geom::PointCloud;
use crate::neighborhood::NeighborhoodIndex;

/// Tape handles for one linear layer.
#[derive(Debug, Clone, Copy)]
pub struct LinearIds {
    pub w: ValueId,
    pub b: ValueId,
}

/// Tape handles for linear + batch norm (the single MLP layer used
/// throughout: linear, batch norm, ReLU).
#[derive(Debug, Clone, Copy)]
pub struct LayerIds {
    pub lin: LinearIds,
    pub gamma: ValueId,
    pub beta: ValueId,
}

/// Tape handles for a full selection MLP: three branch layers plus the
/// attention FC.
#[derive(Debug, Clone, Copy)]
pub struct SelectionMlpIds {
    pub branches: [LayerIds; 3],
    /// Attention FC mapping the pre-slice feature (width C) to the
    /// concatenated branch output width. Absent for the rigid fusion
    /// variant, which fixes every gate at 1.
    pub select_fc: Option<LinearIds>,
}

/// Static shape of one selection MLP call.
#[derive(Debug, Clone, Copy)]
pub struct SelectionMlpSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Mask-out window T: CD and Z-RI gates are zero while epoch < T.
    pub maskout_epochs: usize,
}

fn layer_forward<F: Scalar>(
    tape: &mut Tape<F>,
    x: ValueId,
    layer: &LayerIds,
    stats: &mut BnStats<F>,
    _phase: Phase,
) -> Result<ValueId> {
    let y = tape.linear(x, layer.lin.w, layer.lin.b)?;
    // Every forward covers exactly one cloud, so normalization always uses
    // the current batch statistics; running stats are still tracked (and
    // persisted) but a lone cloud at inference must be normalized the same
    // way it was during training. Eval callers pass throwaway stat clones.
    let y = tape.batch_norm(y, layer.gamma, layer.beta, stats, true)?;
    Ok(tape.relu(y))
}

/// Per-point selection gates: sigmoid(FC(f)), shape [M, out].
pub fn selection_weights<F: Scalar>(
    tape: &mut Tape<F>,
    f_query: ValueId,
    fc: &LinearIds,
) -> Result<ValueId> {
    let pre = tape.linear(f_query, fc.w, fc.b)?;
    Ok(tape.sigmoid(pre))
}

/// Hard-zero the CD and Z-RI thirds of the gate tensor while epoch < T.
/// Zeroing through a constant mask also stops their gradients.
pub fn apply_maskout<F: Scalar>(
    tape: &mut Tape<F>,
    alpha: ValueId,
    epoch: usize,
    maskout_epochs: usize,
) -> Result<ValueId> {
    if epoch >= maskout_epochs {
        return Ok(alpha);
    }
    let shape = tape.shape(alpha).to_vec();
    let width = *shape.last().unwrap();
    let rows: usize = shape[..shape.len() - 1].iter().product();
    let third = width / 3;
    let mut mask = vec![F::zero(); rows * width];
    for r in 0..rows {
        for c in 2 * third..width {
            mask[r * width + c] = F::one();
        }
    }
    tape.mul_mask(alpha, mask)
}

/// Indices of each query's neighbors flattened to one [M*K] list into the
/// source rows.
fn flat_neighbor_indices(nbrs: &NeighborhoodIndex) -> Vec<usize> {
    nbrs.neighbor_lists.iter().flatten().copied().collect()
}

/// One branch: for every (query, neighbor) pair concatenate
/// [f_i, Δf_ij = f_j - f_i, P(p_i, p_j)] and apply the branch layer.
/// Output shape [M, K, out_width].
#[allow(clippy::too_many_arguments)]
pub fn branch_features<F: Scalar>(
    tape: &mut Tape<F>,
    f_source: ValueId,
    query_rows: &[usize],
    nbrs: &NeighborhoodIndex,
    encoding: &EncodingTensor,
    layer: &LayerIds,
    stats: &mut BnStats<F>,
    phase: Phase,
) -> Result<ValueId> {
    let m = query_rows.len();
    let k = nbrs.k;
    let c = *tape.shape(f_source).last().unwrap();
    let expected_in = 2 * c + encoding.kind.width();
    let got_in = tape.shape(layer.lin.w)[1];
    if got_in != expected_in {
        return Err(Error::ShapeMismatch {
            expected: format!(
                "branch weight input {expected_in} (2*{c} + {} for {})",
                encoding.kind.width(),
                encoding.kind.name()
            ),
            got: format!("{got_in}"),
        });
    }
    if encoding.queries != m || encoding.k != k {
        return Err(Error::ShapeMismatch {
            expected: format!("encoding tensor {m} x {k}"),
            got: format!("{} x {}", encoding.queries, encoding.k),
        });
    }

    // fused gather + Δf + concat: row (i, k) is [f_i, f_j - f_i, P(i, j)]
    let flat = flat_neighbor_indices(nbrs);
    let enc_vals: Vec<F> = encoding.values.iter().map(|&v| F::from_f64(v)).collect();
    let cat = tape.branch_input(
        f_source,
        query_rows,
        &flat,
        k,
        encoding.kind.width(),
        &enc_vals,
    )?; // [M*K, 2C+w]
    let out = layer_forward(tape, cat, layer, stats, phase)?;
    let out_w = *tape.shape(out).last().unwrap();
    tape.reshape(out, vec![m, k, out_w])
}

/// Running statistics for the three branch layers of one selection MLP.
pub type BranchStats<F> = [BnStats<F>; 3];

/// Full selection MLP forward (the weighted three-branch aggregation).
///
/// `f_source` is [N, C] over the source point set; `query_rows` indexes the
/// M query points within it (identical to 0..N for non-strided blocks).
/// Neighbor indices in `nbrs` refer to source rows. Output is [M, out].
#[allow(clippy::too_many_arguments)]
pub fn selection_mlp<F: Scalar>(
    tape: &mut Tape<F>,
    f_source: ValueId,
    query_rows: &[usize],
    cloud: &PointCloud,
    nbrs: &NeighborhoodIndex,
    spec: &SelectionMlpSpec,
    ids: &SelectionMlpIds,
    stats: &mut BranchStats<F>,
    epoch: usize,
    phase: Phase,
) -> Result<ValueId> {
    let encodings: Vec<EncodingTensor> = EncodingKind::ALL
        .iter()
        .map(|&kind| encode_batch(cloud, nbrs, kind))
        .collect();
    selection_mlp_with_encodings(
        tape, f_source, query_rows, nbrs, &encodings, spec, ids, stats, epoch, phase,
    )
}

/// Same as [`selection_mlp`] but with the three encoding tensors already
/// computed (in CD, Z-RI, A-RI order).
#[allow(clippy::too_many_arguments)]
pub fn selection_mlp_with_encodings<F: Scalar>(
    tape: &mut Tape<F>,
    f_source: ValueId,
    query_rows: &[usize],
    nbrs: &NeighborhoodIndex,
    encodings: &[EncodingTensor],
    spec: &SelectionMlpSpec,
    ids: &SelectionMlpIds,
    stats: &mut BranchStats<F>,
    epoch: usize,
    phase: Phase,
) -> Result<ValueId> {
    selection_mlp_captured(
        tape, f_source, query_rows, nbrs, encodings, spec, ids, stats, epoch, phase, &mut None,
    )
}

/// [`selection_mlp_with_encodings`] that additionally hands back the
/// post-maskout gate tensor ([M, out]) through `alpha_out`, for attention
/// inspection. Stays `None` for the rigid fusion variant.
#[allow(clippy::too_many_arguments)]
pub fn selection_mlp_captured<F: Scalar>(
    tape: &mut Tape<F>,
    f_source: ValueId,
    query_rows: &[usize],
    nbrs: &NeighborhoodIndex,
    encodings: &[EncodingTensor],
    spec: &SelectionMlpSpec,
    ids: &SelectionMlpIds,
    stats: &mut BranchStats<F>,
    epoch: usize,
    phase: Phase,
    alpha_out: &mut Option<ValueId>,
) -> Result<ValueId> {
    let m = query_rows.len();
    let c = *tape.shape(f_source).last().unwrap();
    if c != spec.in_channels {
        return Err(Error::ShapeMismatch {
            expected: format!("{} input channels", spec.in_channels),
            got: format!("{c}"),
        });
    }
    // pad with zero channels up to a multiple of 3 before slicing
    let f_padded = if c % 3 == 0 {
        f_source
    } else {
        let rows = tape.shape(f_source)[0];
        let pad = 3 - c % 3;
        let zeros = tape.constant(Tensor::zeros(vec![rows, pad]));
        tape.concat_last(&[f_source, zeros])?
    };
    let slices = tape.slice_last(f_padded, 3)?;

    let mut weighted = Vec::with_capacity(3);
    let alpha_parts = match &ids.select_fc {
        Some(fc) => {
            let f_query_full = tape.gather_rows(f_source, query_rows);
            let alpha = selection_weights(tape, f_query_full, fc)?;
            let alpha = apply_maskout(tape, alpha, epoch, spec.maskout_epochs)?;
            *alpha_out = Some(alpha);
            Some(tape.slice_last(alpha, 3)?)
        }
        None => None,
    };
    for (branch, &slice) in slices.iter().enumerate() {
        let g = branch_features(
            tape,
            slice,
            query_rows,
            nbrs,
            &encodings[branch],
            &ids.branches[branch],
            &mut stats[branch],
            phase,
        )?; // [M, K, out/3]
        let gated = match &alpha_parts {
            Some(parts) => tape.mul_broadcast_k(g, parts[branch])?,
            None => {
                // rigid fusion still honors mask-out: gates are constant
                // 1 (or 0 for the masked branches)
                if branch < 2 && epoch < spec.maskout_epochs {
                    let shape = tape.shape(g).to_vec();
                    let len = shape.iter().product();
                    tape.mul_mask(g, vec![F::zero(); len])?
                } else {
                    g
                }
            }
        };
        weighted.push(gated);
    }
    let cat = tape.concat_last(&weighted)?; // [M, K, out]
    let pooled = tape.max_over_neighbors(cat); // [M, out]
    debug_assert_eq!(tape.shape(pooled), &[m, spec.out_channels]);
    Ok(pooled)
}

/// The conventional point-wise MLP baseline: a single encoding kind on the
/// full (unsliced) feature width, max-pooled over neighbors.
#[allow(clippy::too_many_arguments)]
pub fn pointwise_mlp<F: Scalar>(
    tape: &mut Tape<F>,
    f_source: ValueId,
    query_rows: &[usize],
    cloud: &PointCloud,
    nbrs: &NeighborhoodIndex,
    kind: EncodingKind,
    layer: &LayerIds,
    stats: &mut BnStats<F>,
    phase: Phase,
) -> Result<ValueId> {
    let encoding = encode_batch(cloud, nbrs, kind);
    let g = branch_features(
        tape, f_source, query_rows, nbrs, &encoding, layer, stats, phase,
    )?;
    Ok(tape.max_over_neighbors(g))
}

/// Which MLP a block runs: attention-gated selection, rigid fusion, or a
/// single-encoding point-wise baseline.
#[derive(Debug, Clone, Copy)]
pub enum BlockMlp {
    Selection,
    Fused,
    Single(EncodingKind),
}

/// Tape handles for one residual block.
#[derive(Debug, Clone, Copy)]
pub struct BlockIds {
    pub bottleneck: LayerIds,
    pub selection: Option<SelectionMlpIds>,
    pub single: Option<LayerIds>,
    pub expand: LinearIds,
    pub expand_gamma: ValueId,
    pub expand_beta: ValueId,
    /// Projection for the skip path when channel widths change (always
    /// present for strided blocks).
    pub skip: Option<LinearIds>,
}

/// Running statistics for one block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockStats<F> {
    pub bottleneck: BnStats<F>,
    pub branches: BranchStats<F>,
    pub expand: BnStats<F>,
}

impl<F: Scalar> BlockStats<F> {
    pub fn new(bottleneck_c: usize, branch_out: usize, out_c: usize) -> Self {
        BlockStats {
            bottleneck: BnStats::new(bottleneck_c),
            branches: [
                BnStats::new(branch_out),
                BnStats::new(branch_out),
                BnStats::new(branch_out),
            ],
            expand: BnStats::new(out_c),
        }
    }
}

/// Residual block: bottleneck FC, MLP over neighbors, expanding FC,
/// identity skip (projected and row-gathered when strided), final ReLU.
///
/// For a non-strided block `query_rows` is 0..N and `out_channels` equals
/// the input width; a strided block passes the farthest-point-sampled
/// subset and a wider `out_channels`.
#[allow(clippy::too_many_arguments)]
pub fn block_forward<F: Scalar>(
    tape: &mut Tape<F>,
    x: ValueId,
    query_rows: &[usize],
    cloud: &PointCloud,
    nbrs: &NeighborhoodIndex,
    mlp: BlockMlp,
    ids: &BlockIds,
    stats: &mut BlockStats<F>,
    maskout_epochs: usize,
    epoch: usize,
    phase: Phase,
) -> Result<ValueId> {
    block_forward_captured(
        tape, x, query_rows, cloud, nbrs, mlp, ids, stats, maskout_epochs, epoch, phase,
        &mut None,
    )
}

/// [`block_forward`] that also hands back the block's selection gates
/// through `alpha_out` (see [`selection_mlp_captured`]).
#[allow(clippy::too_many_arguments)]
pub fn block_forward_captured<F: Scalar>(
    tape: &mut Tape<F>,
    x: ValueId,
    query_rows: &[usize],
    cloud: &PointCloud,
    nbrs: &NeighborhoodIndex,
    mlp: BlockMlp,
    ids: &BlockIds,
    stats: &mut BlockStats<F>,
    maskout_epochs: usize,
    epoch: usize,
    phase: Phase,
    alpha_out: &mut Option<ValueId>,
) -> Result<ValueId> {
    let out_channels = tape.shape(ids.expand.w)[0];
    let h = layer_forward(tape, x, &ids.bottleneck, &mut stats.bottleneck, phase)?;
    let mid_c = *tape.shape(h).last().unwrap();
    let pooled = match mlp {
        BlockMlp::Selection | BlockMlp::Fused => {
            let sel_ids = ids.selection.as_ref().expect("selection ids");
            let spec = SelectionMlpSpec {
                in_channels: mid_c,
                out_channels: tape.shape(sel_ids.branches[0].lin.w)[0] * 3,
                maskout_epochs,
            };
            let encodings: Vec<EncodingTensor> = EncodingKind::ALL
                .iter()
                .map(|&kind| encode_batch(cloud, nbrs, kind))
                .collect();
            selection_mlp_captured(
                tape,
                h,
                query_rows,
                nbrs,
                &encodings,
                &spec,
                sel_ids,
                &mut stats.branches,
                epoch,
                phase,
                alpha_out,
            )?
        }
        BlockMlp::Single(kind) => {
            let layer = ids.single.as_ref().expect("single-branch ids");
            pointwise_mlp(
                tape,
                h,
                query_rows,
                cloud,
                nbrs,
                kind,
                layer,
                &mut stats.branches[0],
                phase,
            )?
        }
    };
    let expanded = tape.linear(pooled, ids.expand.w, ids.expand.b)?;
    let expanded = tape.batch_norm(
        expanded,
        ids.expand_gamma,
        ids.expand_beta,
        &mut stats.expand,
        true, // batch statistics in every phase, see layer_forward
    )?;
    let skip = {
        let rows = tape.gather_rows(x, query_rows);
        match &ids.skip {
            Some(p) => tape.linear(rows, p.w, p.b)?,
            None => {
                let in_c = *tape.shape(x).last().unwrap();
                if in_c != out_channels {
                    return Err(Error::ShapeMismatch {
                        expected: format!("skip projection for {in_c} -> {out_channels}"),
                        got: "none".into(),
                    });
                }
                rows
            }
        }
    };
    let sum = tape.add(expanded, skip)?;
    Ok(tape.relu(sum))
}

/// Explicit-loop reimplementation of the selection MLP, independent of
/// the tape. Batch norm uses the statistics of the current pass, same
/// as the batched version.
#[allow(clippy::too_many_arguments)]
pub fn scalar_selection_mlp(
    tape: &Tape<f64>,
    f: &[Vec<f64>],
    query_rows: &[usize],
    cloud: &PointCloud,
    nbrs: &NeighborhoodIndex,
    ids: &SelectionMlpIds,
    masked: bool,
) -> Vec<Vec<f64>> {
    use crate::encode::{encode_ari, encode_cd, encode_zri};
    use crate::neighborhood::support_points;
    let c = f[0].len();
    let c3 = c / 3;
    let out3 = tape.shape(ids.branches[0].lin.w)[0];
    let eps = 1e-5f64;
    let m = query_rows.len();
    let k = nbrs.k;

    // pass 1: pre-activations for every (query, neighbor, branch, unit)
    let mut pre = vec![0.0f64; m * k * 3 * out3];
    for (row, &q) in query_rows.iter().enumerate() {
        let p_i = cloud.positions[q];
        let list = &nbrs.neighbor_lists[row];
        let sp = support_points(cloud, p_i, list, nbrs.radius);
        for (ki, &j) in list.iter().enumerate() {
            let p_j = cloud.positions[j];
            for branch in 0..3 {
                let enc = match branch {
                    0 => encode_cd(p_i, p_j),
                    1 => encode_zri(p_i, p_j),
                    _ => encode_ari(p_i, p_j, sp.center, sp.intersection),
                };
                let layer = &ids.branches[branch];
                let w = tape.values(layer.lin.w);
                let b = tape.values(layer.lin.b);
                let in_w = 2 * c3 + enc.values.len();
                for o in 0..out3 {
                    let mut acc = b[o];
                    for jc in 0..c3 {
                        let fi = f[q][branch * c3 + jc];
                        let fj = f[j][branch * c3 + jc];
                        acc += w[o * in_w + jc] * fi;
                        acc += w[o * in_w + c3 + jc] * (fj - fi);
                    }
                    for (jc, &ev) in enc.values.iter().enumerate() {
                        acc += w[o * in_w + 2 * c3 + jc] * ev;
                    }
                    pre[((row * k + ki) * 3 + branch) * out3 + o] = acc;
                }
            }
        }
    }

    // pass 2: per-branch batch statistics over all m*k rows
    let rows = (m * k) as f64;
    let mut mean = vec![0.0f64; 3 * out3];
    let mut var = vec![0.0f64; 3 * out3];
    for branch in 0..3 {
        for o in 0..out3 {
            let slot = branch * out3 + o;
            let mut s = 0.0;
            for r in 0..m * k {
                s += pre[(r * 3 + branch) * out3 + o];
            }
            mean[slot] = s / rows;
            let mut v = 0.0;
            for r in 0..m * k {
                v += (pre[(r * 3 + branch) * out3 + o] - mean[slot]).powi(2);
            }
            var[slot] = v / rows;
        }
    }

    // pass 3: normalize, gate, max-pool
    let mut outputs = Vec::new();
    for (row, &q) in query_rows.iter().enumerate() {
        let alpha: Vec<f64> = match &ids.select_fc {
            Some(fc) => {
                let w = tape.values(fc.w);
                let b = tape.values(fc.b);
                (0..3 * out3)
                    .map(|o| {
                        let mut acc = b[o];
                        for (jc, &fv) in f[q].iter().enumerate() {
                            acc += w[o * c + jc] * fv;
                        }
                        let a = 1.0 / (1.0 + (-acc).exp());
                        if masked && o < 2 * out3 {
                            0.0
                        } else {
                            a
                        }
                    })
                    .collect()
            }
            None => (0..3 * out3)
                .map(|o| if masked && o < 2 * out3 { 0.0 } else { 1.0 })
                .collect(),
        };
        let mut pooled = vec![f64::NEG_INFINITY; 3 * out3];
        for ki in 0..k {
            for branch in 0..3 {
                let layer = &ids.branches[branch];
                let gamma = tape.values(layer.gamma);
                let beta = tape.values(layer.beta);
                for o in 0..out3 {
                    let slot = branch * out3 + o;
                    let acc = pre[((row * k + ki) * 3 + branch) * out3 + o];
                    let bn = gamma[o] * (acc - mean[slot]) / (var[slot] + eps).sqrt() + beta[o];
                    let act = bn.max(0.0) * alpha[slot];
                    if act > pooled[slot] {
                        pooled[slot] = act;
                    }
                }
            }
        }
        outputs.push(pooled);
    }
    outputs
}

/// Central-difference check of the composed selection MLP with respect to
/// its input features, weights rebuilt identically per evaluation from
/// `seed`. Returns the max relative gradient error.
pub fn spe_mlp_gradient_check(seed: u64) -> f64 {
    use crate::geom::RngSeed;
    use rand::Rng;
    let mut rng = RngSeed(seed).rng();
    let n = 10;
    let c = 6;
    let out = 12;
    let cloud = PointCloud::new(
        (0..n)
            .map(|_| {
                [
                    rng.gen::<f64>() - 0.5,
                    rng.gen::<f64>() - 0.5,
                    rng.gen::<f64>() - 0.5,
                ]
            })
            .collect(),
    );
    let queries: Vec<usize> = (0..n).collect();
    let nbrs = crate::neighborhood::ball_query(&cloud, &queries, 0.8, 3, RngSeed(0)).unwrap();
    let fv: Vec<f64> = (0..n * c).map(|_| rng.gen::<f64>() - 0.5).collect();
    let f0 = Tensor::new(vec![n, c], fv);
    let weight_seed = seed ^ 0x5eed;
    crate::diff::grad_check(
        move |tape, fid| {
            let mut wrng = RngSeed(weight_seed).rng();
            let mut leaf = |shape: Vec<usize>| {
                let len: usize = shape.iter().product();
                let vals: Vec<f64> = (0..len).map(|_| wrng.gen::<f64>() - 0.5).collect();
                tape.leaf(Tensor::new(shape, vals), true)
            };
            let widths = [3usize, 5, 8];
            let branches = [0, 1, 2].map(|k| {
                let inp = 2 * (c / 3) + widths[k];
                LayerIds {
                    lin: LinearIds {
                        w: leaf(vec![out / 3, inp]),
                        b: leaf(vec![out / 3]),
                    },
                    gamma: leaf(vec![out / 3]),
                    beta: leaf(vec![out / 3]),
                }
            });
            let select_fc = Some(LinearIds {
                w: leaf(vec![out, c]),
                b: leaf(vec![out]),
            });
            let ids = SelectionMlpIds { branches, select_fc };
            let spec = SelectionMlpSpec {
                in_channels: c,
                out_channels: out,
                maskout_epochs: 0,
            };
            let mut stats: BranchStats<f64> =
                [BnStats::new(out / 3), BnStats::new(out / 3), BnStats::new(out / 3)];
            let y = selection_mlp(
                tape, fid, &queries, &cloud, &nbrs, &spec, &ids, &mut stats, 0, Phase::Train,
            )
            .unwrap();
            let s = tape.sigmoid(y);
            tape.sum(s)
        },
        &f0,
        1e-5,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{random_rotation_so3, rotate, PointCloud, RngSeed, RotationMatrix};
    use crate::neighborhood::ball_query;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    fn rand_vals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen::<f64>() - 0.5).collect()
    }

    fn make_layer(
        tape: &mut Tape<f64>,
        rng: &mut ChaCha8Rng,
        out: usize,
        inp: usize,
    ) -> LayerIds {
        let w = tape.leaf(Tensor::new(vec![out, inp], rand_vals(rng, out * inp)), true);
        let b = tape.leaf(Tensor::new(vec![out], rand_vals(rng, out)), true);
        let gamma = tape.leaf(Tensor::new(vec![out], vec![1.0; out]), true);
        let beta = tape.leaf(Tensor::zeros(vec![out]), true);
        LayerIds {
            lin: LinearIds { w, b },
            gamma,
            beta,
        }
    }

    fn make_selection_ids(
        tape: &mut Tape<f64>,
        rng: &mut ChaCha8Rng,
        c: usize,
        out: usize,
        with_fc: bool,
    ) -> SelectionMlpIds {
        let widths = [3usize, 5, 8];
        let branches = [0, 1, 2].map(|k| make_layer(tape, rng, out / 3, 2 * (c / 3) + widths[k]));
        let select_fc = with_fc.then(|| {
            let w = tape.leaf(Tensor::new(vec![out, c], rand_vals(rng, out * c)), true);
            let b = tape.leaf(Tensor::new(vec![out], rand_vals(rng, out)), true);
            LinearIds { w, b }
        });
        SelectionMlpIds { branches, select_fc }
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| [rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5])
                .collect(),
        )
    }

    #[test]
    fn selection_weights_zero_fc_gives_half() {
        let mut tape = Tape::<f64>::new();
        let f = tape.leaf(Tensor::zeros(vec![4, 12]), false);
        let w = tape.leaf(Tensor::zeros(vec![12, 12]), false);
        let b = tape.leaf(Tensor::zeros(vec![12]), false);
        let alpha = selection_weights(&mut tape, f, &LinearIds { w, b }).unwrap();
        assert_eq!(tape.shape(alpha), &[4, 12]);
        assert!(tape.values(alpha).iter().all(|&v| v == 0.5));
        // sliced into three C/3 gate vectors per point: 4 x 3 x 4
        let parts = tape.slice_last(alpha, 3).unwrap();
        assert_eq!(parts.len(), 3);
        assert_eq!(tape.shape(parts[0]), &[4, 4]);
    }

    #[test]
    fn selection_weights_saturate_with_large_bias() {
        let mut tape = Tape::<f64>::new();
        let f = tape.leaf(Tensor::zeros(vec![2, 6]), false);
        let w = tape.leaf(Tensor::zeros(vec![6, 6]), false);
        let b = tape.leaf(Tensor::new(vec![6], vec![20.0; 6]), false);
        let alpha = selection_weights(&mut tape, f, &LinearIds { w, b }).unwrap();
        assert!(tape.values(alpha).iter().all(|&v| v > 0.999));
    }

    #[test]
    fn maskout_window_examples() {
        let mut tape = Tape::<f64>::new();
        let alpha = tape.leaf(Tensor::new(vec![1, 3], vec![0.7, 0.3, 0.9]), true);
        let masked = apply_maskout(&mut tape, alpha, 0, 200).unwrap();
        assert_eq!(tape.values(masked), &[0.0, 0.0, 0.9]);
        // masked gates carry no gradient
        let s = tape.sum(masked);
        tape.backward(s);
        assert_eq!(tape.grad(alpha).unwrap(), &[0.0, 0.0, 1.0]);

        let boundary = apply_maskout(&mut tape, alpha, 200, 200).unwrap();
        assert_eq!(boundary, alpha);
        let disabled = apply_maskout(&mut tape, alpha, 0, 0).unwrap();
        assert_eq!(disabled, alpha);
    }

    #[test]
    fn branch_features_shape_contract() {
        let mut rng = RngSeed(1).rng();
        let mut tape = Tape::<f64>::new();
        let cloud = random_cloud(&mut rng, 8);
        let queries: Vec<usize> = (0..8).collect();
        let nbrs = ball_query(&cloud, &queries, 0.8, 4, RngSeed(0)).unwrap();
        let enc = encode_batch(&cloud, &nbrs, EncodingKind::Ari);
        // out = 24 -> per-branch width 8, C/3 = 2
        let layer = make_layer(&mut tape, &mut rng, 8, 2 * 2 + 8);
        let f = tape.leaf(Tensor::new(vec![8, 2], rand_vals(&mut rng, 16)), false);
        let mut stats = BnStats::new(8);
        let g = branch_features(
            &mut tape, f, &queries, &nbrs, &enc, &layer, &mut stats, Phase::Eval,
        )
        .unwrap();
        assert_eq!(tape.shape(g), &[8, 4, 8]);
    }

    #[test]
    fn branch_features_zero_features_depend_only_on_encoding() {
        let mut rng = RngSeed(2).rng();
        let mut tape = Tape::<f64>::new();
        let cloud = random_cloud(&mut rng, 5);
        let queries = vec![0, 3];
        let nbrs = ball_query(&cloud, &queries, 0.9, 3, RngSeed(0)).unwrap();
        let enc = encode_batch(&cloud, &nbrs, EncodingKind::Cd);
        let c3 = 2;
        let layer = make_layer(&mut tape, &mut rng, 4, 2 * c3 + 3);
        let f = tape.leaf(Tensor::zeros(vec![5, c3]), false);
        let mut stats = BnStats::new(4);
        let g = branch_features(
            &mut tape, f, &queries, &nbrs, &enc, &layer, &mut stats, Phase::Eval,
        )
        .unwrap();
        // manual: relu(bn(W_enc · enc + b)) with batch statistics
        let wv = tape.values(layer.lin.w).to_vec();
        let bv = tape.values(layer.lin.b).to_vec();
        let eps = 1e-5f64;
        let pairs: Vec<(usize, usize)> =
            (0..2).flat_map(|q| (0..3).map(move |k| (q, k))).collect();
        let mut pre = vec![0.0f64; pairs.len() * 4];
        for (row, &(q, k)) in pairs.iter().enumerate() {
            let e = enc.entry(q, k);
            for o in 0..4 {
                let mut acc = bv[o];
                for (j, &ev) in e.iter().enumerate() {
                    acc += wv[o * 7 + 2 * c3 + j] * ev;
                }
                pre[row * 4 + o] = acc;
            }
        }
        let rows = pairs.len() as f64;
        for o in 0..4 {
            let mean = (0..pairs.len()).map(|r| pre[r * 4 + o]).sum::<f64>() / rows;
            let var = (0..pairs.len())
                .map(|r| (pre[r * 4 + o] - mean).powi(2))
                .sum::<f64>()
                / rows;
            for row in 0..pairs.len() {
                let expected = ((pre[row * 4 + o] - mean) / (var + eps).sqrt()).max(0.0);
                let got = tape.values(g)[row * 4 + o];
                assert!((got - expected).abs() < 1e-9, "row {row} out {o}");
            }
        }
    }

    #[test]
    fn branch_features_rejects_wrong_width() {
        let mut rng = RngSeed(3).rng();
        let mut tape = Tape::<f64>::new();
        let cloud = random_cloud(&mut rng, 4);
        let queries = vec![0];
        let nbrs = ball_query(&cloud, &queries, 0.9, 2, RngSeed(0)).unwrap();
        let enc = encode_batch(&cloud, &nbrs, EncodingKind::Zri);
        let layer = make_layer(&mut tape, &mut rng, 4, 2 * 2 + 3); // CD width, not ZRI
        let f = tape.leaf(Tensor::zeros(vec![4, 2]), false);
        let mut stats = BnStats::new(4);
        let err = branch_features(
            &mut tape, f, &queries, &nbrs, &enc, &layer, &mut stats, Phase::Eval,
        );
        assert!(err.is_err());
    }

    fn run_batched_vs_scalar(masked: bool, with_fc: bool, seed: u64) {
        let mut rng = RngSeed(seed).rng();
        let n = 16;
        let c = 6;
        let out = 12;
        let cloud = random_cloud(&mut rng, n);
        let queries: Vec<usize> = (0..n).collect();
        let nbrs = ball_query(&cloud, &queries, 0.6, 5, RngSeed(0)).unwrap();
        let mut tape = Tape::<f64>::new();
        let ids = make_selection_ids(&mut tape, &mut rng, c, out, with_fc);
        let f_rows: Vec<Vec<f64>> = (0..n).map(|_| rand_vals(&mut rng, c)).collect();
        let f_flat: Vec<f64> = f_rows.iter().flatten().copied().collect();
        let f = tape.leaf(Tensor::new(vec![n, c], f_flat), false);
        let mut stats: BranchStats<f64> = [BnStats::new(out / 3), BnStats::new(out / 3), BnStats::new(out / 3)];
        // random running stats so eval BN is not a near-identity
        for st in stats.iter_mut() {
            for v in st.mean.iter_mut() {
                *v = rng.gen::<f64>() - 0.5;
            }
            for v in st.var.iter_mut() {
                *v = 0.5 + rng.gen::<f64>();
            }
        }
        let spec = SelectionMlpSpec {
            in_channels: c,
            out_channels: out,
            maskout_epochs: if masked { 10 } else { 0 },
        };
        let epoch = 0;
        let y = selection_mlp(
            &mut tape, f, &queries, &cloud, &nbrs, &spec, &ids, &mut stats, epoch, Phase::Eval,
        )
        .unwrap();
        let expected =
            scalar_selection_mlp(&tape, &f_rows, &queries, &cloud, &nbrs, &ids, masked);
        let got = tape.values(y);
        for (row, exp) in expected.iter().enumerate() {
            for (o, e) in exp.iter().enumerate() {
                let g = got[row * out + o];
                assert!((g - e).abs() < 1e-5, "seed {seed} row {row} out {o}: {g} vs {e}");
            }
        }
    }

    #[test]
    fn batched_matches_scalar_loop_oracle() {
        run_batched_vs_scalar(false, true, 10);
        run_batched_vs_scalar(false, true, 11);
        run_batched_vs_scalar(true, true, 12);
        run_batched_vs_scalar(false, false, 13);
        run_batched_vs_scalar(true, false, 14);
    }

    #[test]
    fn maskout_zeroes_masked_branch_channels() {
        let mut rng = RngSeed(20).rng();
        let n = 9;
        let c = 6;
        let out = 12;
        let cloud = random_cloud(&mut rng, n);
        let queries: Vec<usize> = (0..n).collect();
        let nbrs = ball_query(&cloud, &queries, 0.7, 4, RngSeed(0)).unwrap();
        let mut tape = Tape::<f64>::new();
        let ids = make_selection_ids(&mut tape, &mut rng, c, out, true);
        let f = tape.leaf(Tensor::new(vec![n, c], rand_vals(&mut rng, n * c)), false);
        let mut stats: BranchStats<f64> = [BnStats::new(4), BnStats::new(4), BnStats::new(4)];
        let spec = SelectionMlpSpec {
            in_channels: c,
            out_channels: out,
            maskout_epochs: 5,
        };
        let y = selection_mlp(
            &mut tape, f, &queries, &cloud, &nbrs, &spec, &ids, &mut stats, 0, Phase::Eval,
        )
        .unwrap();
        let yv = tape.values(y).to_vec();
        for row in 0..n {
            for o in 0..8 {
                assert_eq!(yv[row * out + o], 0.0, "row {row} channel {o}");
            }
        }
        // α3 channels unchanged relative to the unmasked run (bitwise)
        let mut stats2: BranchStats<f64> = [BnStats::new(4), BnStats::new(4), BnStats::new(4)];
        let y2 = selection_mlp(
            &mut tape, f, &queries, &cloud, &nbrs, &spec, &ids, &mut stats2, 5, Phase::Eval,
        )
        .unwrap();
        let y2v = tape.values(y2);
        for row in 0..n {
            for o in 8..12 {
                assert_eq!(yv[row * out + o], y2v[row * out + o]);
            }
        }
    }

    #[test]
    fn masked_output_invariant_under_so3() {
        // f fixed, cloud rotated: with the CD and Z-RI gates masked the
        // output depends on geometry only through the A-RI encoding
        let mut rng = RngSeed(30).rng();
        let n = 12;
        let c = 6;
        let out = 12;
        let cloud = random_cloud(&mut rng, n);
        let queries: Vec<usize> = (0..n).collect();
        let mut tape = Tape::<f64>::new();
        let ids = make_selection_ids(&mut tape, &mut rng, c, out, true);
        let f_vals = rand_vals(&mut rng, n * c);
        let f = tape.leaf(Tensor::new(vec![n, c], f_vals), false);
        let spec = SelectionMlpSpec {
            in_channels: c,
            out_channels: out,
            maskout_epochs: 1,
        };
        let nbrs = ball_query(&cloud, &queries, 0.7, 4, RngSeed(0)).unwrap();
        let mut stats: BranchStats<f64> = [BnStats::new(4), BnStats::new(4), BnStats::new(4)];
        let base = selection_mlp(
            &mut tape, f, &queries, &cloud, &nbrs, &spec, &ids, &mut stats, 0, Phase::Eval,
        )
        .unwrap();
        let base_v = tape.values(base).to_vec();
        for trial in 0..20 {
            let r = random_rotation_so3(RngSeed(1000 + trial));
            let rotated = rotate(&cloud, &r);
            let nbrs_r = ball_query(&rotated, &queries, 0.7, 4, RngSeed(0)).unwrap();
            let mut stats_r: BranchStats<f64> = [BnStats::new(4), BnStats::new(4), BnStats::new(4)];
            let y = selection_mlp(
                &mut tape, f, &queries, &rotated, &nbrs_r, &spec, &ids, &mut stats_r, 0, Phase::Eval,
            )
            .unwrap();
            let yv = tape.values(y);
            for (a, b) in base_v.iter().zip(yv.iter()) {
                assert!((a - b).abs() < 1e-4, "trial {trial}");
            }
        }
    }

    #[test]
    fn zri_plus_ari_invariant_under_z_rotation() {
        // α1 forced to ~0 via saturated negative bias rows; remaining
        // branches are Z-invariant
        let mut rng = RngSeed(40).rng();
        let n = 10;
        let c = 6;
        let out = 12;
        let out3 = out / 3;
        let cloud = random_cloud(&mut rng, n);
        let queries: Vec<usize> = (0..n).collect();
        let mut tape = Tape::<f64>::new();
        let mut ids = make_selection_ids(&mut tape, &mut rng, c, out, true);
        // rebuild the FC with zero first-third rows and -40 bias
        let mut w = tape.values(ids.select_fc.unwrap().w).to_vec();
        let mut b = tape.values(ids.select_fc.unwrap().b).to_vec();
        for o in 0..out3 {
            for jc in 0..c {
                w[o * c + jc] = 0.0;
            }
            b[o] = -40.0;
        }
        let wid = tape.leaf(Tensor::new(vec![out, c], w), false);
        let bid = tape.leaf(Tensor::new(vec![out], b), false);
        ids.select_fc = Some(LinearIds { w: wid, b: bid });
        let f = tape.leaf(Tensor::new(vec![n, c], rand_vals(&mut rng, n * c)), false);
        let spec = SelectionMlpSpec {
            in_channels: c,
            out_channels: out,
            maskout_epochs: 0,
        };
        let nbrs = ball_query(&cloud, &queries, 0.7, 4, RngSeed(0)).unwrap();
        let mut stats: BranchStats<f64> = [BnStats::new(4), BnStats::new(4), BnStats::new(4)];
        let base = selection_mlp(
            &mut tape, f, &queries, &cloud, &nbrs, &spec, &ids, &mut stats, 0, Phase::Eval,
        )
        .unwrap();
        let base_v = tape.values(base).to_vec();
        for trial in 0..20 {
            let r = RotationMatrix::about_z(0.3 + trial as f64);
            let rotated = rotate(&cloud, &r);
            let nbrs_r = ball_query(&rotated, &queries, 0.7, 4, RngSeed(0)).unwrap();
            let mut stats_r: BranchStats<f64> = [BnStats::new(4), BnStats::new(4), BnStats::new(4)];
            let y = selection_mlp(
                &mut tape, f, &queries, &rotated, &nbrs_r, &spec, &ids, &mut stats_r, 0, Phase::Eval,
            )
            .unwrap();
            for (a, bv) in base_v.iter().zip(tape.values(y).iter()) {
                assert!((a - bv).abs() < 1e-4, "trial {trial}");
            }
        }
    }

    #[test]
    fn pointwise_matches_selection_on_matched_parameters() {
        // rigid fusion with zero CD/Z-RI branch weights equals a
        // point-wise A-RI MLP whose weights read only the third slice
        let mut rng = RngSeed(50).rng();
        let n = 12;
        let c = 6;
        let c3 = c / 3;
        let out3 = 4usize;
        let cloud = random_cloud(&mut rng, n);
        let queries: Vec<usize> = (0..n).collect();
        let nbrs = ball_query(&cloud, &queries, 0.7, 4, RngSeed(0)).unwrap();
        let mut tape = Tape::<f64>::new();

        let branch3 = make_layer(&mut tape, &mut rng, out3, 2 * c3 + 8);
        let zero1 = {
            let w = tape.leaf(Tensor::zeros(vec![out3, 2 * c3 + 3]), false);
            let b = tape.leaf(Tensor::zeros(vec![out3]), false);
            let gamma = tape.leaf(Tensor::new(vec![out3], vec![1.0; out3]), false);
            let beta = tape.leaf(Tensor::zeros(vec![out3]), false);
            LayerIds { lin: LinearIds { w, b }, gamma, beta }
        };
        let zero2 = {
            let w = tape.leaf(Tensor::zeros(vec![out3, 2 * c3 + 5]), false);
            let b = tape.leaf(Tensor::zeros(vec![out3]), false);
            let gamma = tape.leaf(Tensor::new(vec![out3], vec![1.0; out3]), false);
            let beta = tape.leaf(Tensor::zeros(vec![out3]), false);
            LayerIds { lin: LinearIds { w, b }, gamma, beta }
        };
        let ids = SelectionMlpIds {
            branches: [zero1, zero2, branch3],
            select_fc: None,
        };

        // point-wise layer on full width: columns for f and Δf outside the
        // third slice are zero; encoding columns copy branch3
        let bw = tape.values(branch3.lin.w).to_vec();
        let in_full = 2 * c + 8;
        let in_b3 = 2 * c3 + 8;
        let mut wfull = vec![0.0; out3 * in_full];
        for o in 0..out3 {
            for jc in 0..c3 {
                wfull[o * in_full + 2 * c3 + jc] = bw[o * in_b3 + jc]; // f3 slice
                wfull[o * in_full + c + 2 * c3 + jc] = bw[o * in_b3 + c3 + jc]; // Δf3 slice
            }
            for jc in 0..8 {
                wfull[o * in_full + 2 * c + jc] = bw[o * in_b3 + 2 * c3 + jc];
            }
        }
        let pw_layer = {
            let w = tape.leaf(Tensor::new(vec![out3, in_full], wfull), false);
            let b = tape.leaf(tape.tensor(branch3.lin.b), false);
            let gamma = tape.leaf(tape.tensor(branch3.gamma), false);
            let beta = tape.leaf(tape.tensor(branch3.beta), false);
            LayerIds { lin: LinearIds { w, b }, gamma, beta }
        };

        let f = tape.leaf(Tensor::new(vec![n, c], rand_vals(&mut rng, n * c)), false);
        let spec = SelectionMlpSpec {
            in_channels: c,
            out_channels: 3 * out3,
            maskout_epochs: 0,
        };
        let mut sel_stats: BranchStats<f64> =
            [BnStats::new(out3), BnStats::new(out3), BnStats::new(out3)];
        let sel = selection_mlp(
            &mut tape, f, &queries, &cloud, &nbrs, &spec, &ids, &mut sel_stats, 0, Phase::Eval,
        )
        .unwrap();
        let mut pw_stats = BnStats::new(out3);
        let pw = pointwise_mlp(
            &mut tape,
            f,
            &queries,
            &cloud,
            &nbrs,
            EncodingKind::Ari,
            &pw_layer,
            &mut pw_stats,
            Phase::Eval,
        )
        .unwrap();
        let selv = tape.values(sel);
        let pwv = tape.values(pw);
        for row in 0..n {
            for o in 0..out3 {
                let a = selv[row * (3 * out3) + 2 * out3 + o];
                let b = pwv[row * out3 + o];
                assert!((a - b).abs() < 1e-5, "row {row} out {o}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn selection_mlp_gradient_integrity() {
        let mut rng = RngSeed(60).rng();
        let n = 8;
        let c = 6;
        let out = 12;
        let cloud = random_cloud(&mut rng, n);
        let queries: Vec<usize> = (0..n).collect();
        let nbrs = ball_query(&cloud, &queries, 0.8, 3, RngSeed(0)).unwrap();
        let f0 = Tensor::new(vec![n, c], rand_vals(&mut rng, n * c));
        // weights are rebuilt identically per evaluation from a fixed seed
        let rel = crate::diff::grad_check(
            move |tape, fid| {
                let mut wrng = RngSeed(61).rng();
                let ids = make_selection_ids(tape, &mut wrng, c, out, true);
                let spec = SelectionMlpSpec {
                    in_channels: c,
                    out_channels: out,
                    maskout_epochs: 0,
                };
                let mut stats: BranchStats<f64> =
                    [BnStats::new(4), BnStats::new(4), BnStats::new(4)];
                let y = selection_mlp(
                    tape, fid, &queries, &cloud, &nbrs, &spec, &ids, &mut stats, 0, Phase::Train,
                )
                .unwrap();
                let s = tape.sigmoid(y);
                tape.sum(s)
            },
            &f0,
            1e-5,
        );
        assert!(rel < 1e-3, "rel {rel}");
    }

    #[test]
    fn block_residual_neutrality_and_shapes() {
        let mut rng = RngSeed(70).rng();
        let n = 12;
        let c = 12;
        let cloud = random_cloud(&mut rng, n);
        let queries: Vec<usize> = (0..n).collect();
        let nbrs = ball_query(&cloud, &queries, 0.8, 4, RngSeed(0)).unwrap();
        let mut tape = Tape::<f64>::new();
        let bottleneck = make_layer(&mut tape, &mut rng, c / 2, c);
        let sel = make_selection_ids(&mut tape, &mut rng, c / 2, c / 2, true);
        let expand_w = tape.leaf(Tensor::new(vec![c, c / 2], rand_vals(&mut rng, c * c / 2)), true);
        let expand_b = tape.leaf(Tensor::zeros(vec![c]), true);
        // zero expand BN scale: block output must equal relu(skip)
        let expand_gamma = tape.leaf(Tensor::zeros(vec![c]), true);
        let expand_beta = tape.leaf(Tensor::zeros(vec![c]), true);
        let ids = BlockIds {
            bottleneck,
            selection: Some(sel),
            single: None,
            expand: LinearIds { w: expand_w, b: expand_b },
            expand_gamma,
            expand_beta,
            skip: None,
        };
        let mut stats = BlockStats::new(c / 2, c / 6, c);
        let xv = rand_vals(&mut rng, n * c);
        let x = tape.leaf(Tensor::new(vec![n, c], xv.clone()), false);
        let y = block_forward(
            &mut tape, x, &queries, &cloud, &nbrs, BlockMlp::Selection, &ids, &mut stats, 0, 0,
            Phase::Eval,
        )
        .unwrap();
        assert_eq!(tape.shape(y), &[n, c]);
        for (i, &v) in tape.values(y).iter().enumerate() {
            assert!((v - xv[i].max(0.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn strided_block_shape_contract() {
        let mut rng = RngSeed(80).rng();
        let n = 64;
        let c = 36;
        let c_out = 72;
        let cloud = random_cloud(&mut rng, n);
        let sampled = crate::neighborhood::farthest_point_sample(&cloud, 32).unwrap();
        let nbrs = ball_query(&cloud, &sampled, 0.5, 8, RngSeed(0)).unwrap();
        let mut tape = Tape::<f64>::new();
        let mid = c / 2;
        let sel_out = c_out / 2;
        let bottleneck = make_layer(&mut tape, &mut rng, mid, c);
        let sel = make_selection_ids(&mut tape, &mut rng, mid, sel_out, true);
        let expand_w =
            tape.leaf(Tensor::new(vec![c_out, sel_out], rand_vals(&mut rng, c_out * sel_out)), true);
        let expand_b = tape.leaf(Tensor::zeros(vec![c_out]), true);
        let expand_gamma = tape.leaf(Tensor::new(vec![c_out], vec![1.0; c_out]), true);
        let expand_beta = tape.leaf(Tensor::zeros(vec![c_out]), true);
        let skip_w = tape.leaf(Tensor::new(vec![c_out, c], rand_vals(&mut rng, c_out * c)), true);
        let skip_b = tape.leaf(Tensor::zeros(vec![c_out]), true);
        let ids = BlockIds {
            bottleneck,
            selection: Some(sel),
            single: None,
            expand: LinearIds { w: expand_w, b: expand_b },
            expand_gamma,
            expand_beta,
            skip: Some(LinearIds { w: skip_w, b: skip_b }),
        };
        let mut stats = BlockStats::new(mid, sel_out / 3, c_out);
        let x = tape.leaf(Tensor::new(vec![n, c], rand_vals(&mut rng, n * c)), false);
        let y = block_forward(
            &mut tape, x, &sampled, &cloud, &nbrs, BlockMlp::Selection, &ids, &mut stats, 0, 0,
            Phase::Eval,
        )
        .unwrap();
        assert_eq!(tape.shape(y), &[32, 72]);
    }
}
