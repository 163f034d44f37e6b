//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A `Tape` records every executed operation; `backward` replays the
//! records in exact reverse order, accumulating adjoints additively. The
//! op set is exactly what the network needs: affine maps, sigmoid, ReLU,
//! batch normalization, concat/slice along the last axis, elementwise and
//! broadcast products, neighbor gather/scatter, and max-pooling with
//! deterministic subgradient routing (lowest index on ties).
//!
//! Tensors are generic over `f32`/`f64`; training runs in f32, the
//! gradient-check suite runs the same graph in f64.

use crate::error::{Error, Result};

/// Element type for tensors. Provides a gemm kernel and f64 conversion.
pub trait Scalar:
    num_traits::Float + std::fmt::Debug + std::fmt::Display + Default + Send + Sync + 'static
{
    /// c[m,n] += alpha * a[m,k] * b[k,n], with explicit row/col strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    );
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    ) {
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            )
        }
    }
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    ) {
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            )
        }
    }
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// A dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    pub shape: Vec<usize>,
    pub values: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, values: Vec<F>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "shape/value length mismatch"
        );
        Tensor { shape, values }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            values: vec![F::zero(); len],
        }
    }

    pub fn scalar(v: F) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![v],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn from_f64(shape: Vec<usize>, values: &[f64]) -> Self {
        Tensor::new(shape, values.iter().map(|&v| F::from_f64(v)).collect())
    }
}

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValueId(usize);

/// Whether a forward pass uses batch statistics and dropout (train) or
/// running statistics (eval).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Batch-norm running statistics for one layer, updated in train mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats<F> {
    pub mean: Vec<F>,
    pub var: Vec<F>,
}

impl<F: Scalar> BnStats<F> {
    pub fn new(channels: usize) -> Self {
        BnStats {
            mean: vec![F::zero(); channels],
            var: vec![F::one(); channels],
        }
    }
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

enum Op<F> {
    Leaf,
    Linear {
        x: ValueId,
        w: ValueId,
        b: ValueId,
    },
    Sigmoid {
        x: ValueId,
    },
    Relu {
        x: ValueId,
    },
    BatchNormTrain {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        x_hat: Vec<F>,
        inv_std: Vec<F>,
    },
    BatchNormEval {
        x: ValueId,
        gamma: ValueId,
        scale: Vec<F>,
    },
    MaxK {
        x: ValueId,
        argmax: Vec<usize>,
    },
    ConcatLast {
        xs: Vec<ValueId>,
    },
    SliceLast {
        x: ValueId,
        part: usize,
        parts: usize,
    },
    Add {
        a: ValueId,
        b: ValueId,
    },
    Mul {
        a: ValueId,
        b: ValueId,
    },
    MulBroadcastK {
        g: ValueId,
        a: ValueId,
    },
    MulMask {
        x: ValueId,
        mask: Vec<F>,
    },
    BranchInput {
        f: ValueId,
        query: Vec<usize>,
        flat: Vec<usize>,
        k: usize,
        c: usize,
    },
    GatherRows {
        x: ValueId,
        idx: Vec<usize>,
    },
    SubBroadcastK {
        x: ValueId,
        q: ValueId,
    },
    Reshape {
        x: ValueId,
    },
    Sum {
        x: ValueId,
    },
    SoftmaxCrossEntropy {
        logits: ValueId,
        probs: Vec<F>,
        targets: Vec<F>,
    },
}

struct Node<F> {
    shape: Vec<usize>,
    values: Vec<F>,
    grad: Option<Vec<F>>,
    requires_grad: bool,
    op: Op<F>,
}

/// One forward/backward session. Single-owner: a tape and its tensors
/// belong to one logical thread; distinct tapes may run concurrently.
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<F>, requires_grad: bool, op: Op<F>) -> ValueId {
        self.nodes.push(Node {
            shape,
            values,
            grad: None,
            requires_grad,
            op,
        });
        ValueId(self.nodes.len() - 1)
    }

    /// Register an input tensor. `requires_grad` marks parameters and
    /// gradient-checked inputs.
    pub fn leaf(&mut self, tensor: Tensor<F>, requires_grad: bool) -> ValueId {
        self.push(tensor.shape, tensor.values, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, tensor: Tensor<F>) -> ValueId {
        self.leaf(tensor, false)
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: ValueId) -> &[F] {
        &self.nodes[id.0].values
    }

    pub fn tensor(&self, id: ValueId) -> Tensor<F> {
        Tensor {
            shape: self.nodes[id.0].shape.clone(),
            values: self.nodes[id.0].values.clone(),
        }
    }

    /// Gradient of the last `backward` target w.r.t. `id`, if it flowed.
    pub fn grad(&self, id: ValueId) -> Option<&[F]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn rows_of(shape: &[usize]) -> usize {
        shape[..shape.len() - 1].iter().product()
    }

    fn last_of(shape: &[usize]) -> usize {
        *shape.last().expect("rank >= 1")
    }

    /// Affine map along the last axis: y = x W^T + b, with w: [out, in].
    pub fn linear(&mut self, x: ValueId, w: ValueId, b: ValueId) -> Result<ValueId> {
        let (xs, ws, bs) = (
            self.nodes[x.0].shape.clone(),
            self.nodes[w.0].shape.clone(),
            self.nodes[b.0].shape.clone(),
        );
        let in_dim = Self::last_of(&xs);
        if ws.len() != 2 || ws[1] != in_dim || bs != vec![ws[0]] {
            return Err(Error::ShapeMismatch {
                expected: format!("w=[out,{in_dim}], b=[out] for x={xs:?}"),
                got: format!("w={ws:?}, b={bs:?}"),
            });
        }
        let out_dim = ws[0];
        let rows = Self::rows_of(&xs);
        let mut values = vec![F::zero(); rows * out_dim];
        // y = x (rows,in) * W^T (in,out)
        F::gemm(
            rows,
            in_dim,
            out_dim,
            F::one(),
            &self.nodes[x.0].values,
            in_dim as isize,
            1,
            &self.nodes[w.0].values,
            1,
            in_dim as isize,
            F::zero(),
            &mut values,
        );
        for r in 0..rows {
            for c in 0..out_dim {
                values[r * out_dim + c] = values[r * out_dim + c] + self.nodes[b.0].values[c];
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = out_dim;
        let rg = self.any_requires_grad(&[x, w, b]);
        Ok(self.push(shape, values, rg, Op::Linear { x, w, b }))
    }

    pub fn sigmoid(&mut self, x: ValueId) -> ValueId {
        let values: Vec<F> = self.nodes[x.0]
            .values
            .iter()
            .map(|&v| F::one() / (F::one() + (-v).exp()))
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.nodes[x.0].requires_grad;
        self.push(shape, values, rg, Op::Sigmoid { x })
    }

    pub fn relu(&mut self, x: ValueId) -> ValueId {
        let values: Vec<F> = self.nodes[x.0]
            .values
            .iter()
            .map(|&v| if v > F::zero() { v } else { F::zero() })
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.nodes[x.0].requires_grad;
        self.push(shape, values, rg, Op::Relu { x })
    }

    /// Batch normalization over a [rows, C] view of `x` (leading axes are
    /// flattened). Train mode normalizes by batch statistics and updates
    /// `stats` in place; eval mode reads `stats`.
    pub fn batch_norm(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        stats: &mut BnStats<F>,
        train: bool,
    ) -> Result<ValueId> {
        let shape = self.nodes[x.0].shape.clone();
        let c = Self::last_of(&shape);
        let rows = Self::rows_of(&shape);
        if self.nodes[gamma.0].shape != vec![c] || self.nodes[beta.0].shape != vec![c] {
            return Err(Error::ShapeMismatch {
                expected: format!("gamma,beta of width {c}"),
                got: format!(
                    "gamma={:?}, beta={:?}",
                    self.nodes[gamma.0].shape, self.nodes[beta.0].shape
                ),
            });
        }
        if stats.mean.len() != c {
            return Err(Error::ShapeMismatch {
                expected: format!("running stats of width {c}"),
                got: format!("{}", stats.mean.len()),
            });
        }
        let eps = F::from_f64(BN_EPS);
        let g = &self.nodes[gamma.0].values.clone();
        let b = &self.nodes[beta.0].values.clone();
        let xv = &self.nodes[x.0].values;
        let rg = self.any_requires_grad(&[x, gamma, beta]);
        if train {
            if rows < 2 {
                return Err(Error::BatchTooSmall(rows));
            }
            let n = F::from_f64(rows as f64);
            let mut mean = vec![F::zero(); c];
            for r in 0..rows {
                for ch in 0..c {
                    mean[ch] = mean[ch] + xv[r * c + ch];
                }
            }
            for m in mean.iter_mut() {
                *m = *m / n;
            }
            let mut var = vec![F::zero(); c];
            for r in 0..rows {
                for ch in 0..c {
                    let d = xv[r * c + ch] - mean[ch];
                    var[ch] = var[ch] + d * d;
                }
            }
            for v in var.iter_mut() {
                *v = *v / n;
            }
            let inv_std: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
            let mut x_hat = vec![F::zero(); rows * c];
            let mut values = vec![F::zero(); rows * c];
            for r in 0..rows {
                for ch in 0..c {
                    let h = (xv[r * c + ch] - mean[ch]) * inv_std[ch];
                    x_hat[r * c + ch] = h;
                    values[r * c + ch] = g[ch] * h + b[ch];
                }
            }
            // running stats: unbiased variance, momentum 0.1
            let momentum = F::from_f64(BN_MOMENTUM);
            let keep = F::one() - momentum;
            let unbias = F::from_f64(rows as f64 / (rows as f64 - 1.0));
            for ch in 0..c {
                stats.mean[ch] = keep * stats.mean[ch] + momentum * mean[ch];
                stats.var[ch] = keep * stats.var[ch] + momentum * var[ch] * unbias;
            }
            Ok(self.push(
                shape,
                values,
                rg,
                Op::BatchNormTrain {
                    x,
                    gamma,
                    beta,
                    x_hat,
                    inv_std,
                },
            ))
        } else {
            let scale: Vec<F> = (0..c)
                .map(|ch| g[ch] / (stats.var[ch] + eps).sqrt())
                .collect();
            let mut values = vec![F::zero(); rows * c];
            for r in 0..rows {
                for ch in 0..c {
                    values[r * c + ch] = scale[ch] * (xv[r * c + ch] - stats.mean[ch]) + b[ch];
                }
            }
            Ok(self.push(shape, values, rg, Op::BatchNormEval { x, gamma, scale }))
        }
    }

    /// Entrywise maximum over the middle axis of [M, K, C]. Adjoints route
    /// to the lowest-k argmax.
    pub fn max_over_neighbors(&mut self, x: ValueId) -> ValueId {
        let shape = self.nodes[x.0].shape.clone();
        assert!(shape.len() == 3, "max_over_neighbors expects [M, K, C]");
        let (m, k, c) = (shape[0], shape[1], shape[2]);
        assert!(k >= 1);
        let xv = &self.nodes[x.0].values;
        let mut values = vec![F::zero(); m * c];
        let mut argmax = vec![0usize; m * c];
        for mi in 0..m {
            for ch in 0..c {
                let mut best = xv[(mi * k) * c + ch];
                let mut best_k = 0usize;
                for ki in 1..k {
                    let v = xv[(mi * k + ki) * c + ch];
                    if v > best {
                        best = v;
                        best_k = ki;
                    }
                }
                values[mi * c + ch] = best;
                argmax[mi * c + ch] = best_k;
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        self.push(vec![m, c], values, rg, Op::MaxK { x, argmax })
    }

    /// Concatenate along the last axis. All leading extents must agree.
    pub fn concat_last(&mut self, xs: &[ValueId]) -> Result<ValueId> {
        assert!(!xs.is_empty());
        let lead = self.nodes[xs[0].0].shape[..self.nodes[xs[0].0].shape.len() - 1].to_vec();
        let mut total_last = 0;
        for &x in xs {
            let s = &self.nodes[x.0].shape;
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::ShapeMismatch {
                    expected: format!("leading extents {lead:?}"),
                    got: format!("{s:?}"),
                });
            }
            total_last += Self::last_of(s);
        }
        let rows: usize = lead.iter().product();
        let mut values = vec![F::zero(); rows * total_last];
        let mut offset = 0;
        for &x in xs {
            let w = Self::last_of(&self.nodes[x.0].shape);
            let xv = &self.nodes[x.0].values;
            for r in 0..rows {
                values[r * total_last + offset..r * total_last + offset + w]
                    .copy_from_slice(&xv[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let mut shape = lead;
        shape.push(total_last);
        let rg = self.any_requires_grad(xs);
        Ok(self.push(shape, values, rg, Op::ConcatLast { xs: xs.to_vec() }))
    }

    /// Slice the last axis into `parts` equal pieces.
    pub fn slice_last(&mut self, x: ValueId, parts: usize) -> Result<Vec<ValueId>> {
        let shape = self.nodes[x.0].shape.clone();
        let last = Self::last_of(&shape);
        if parts == 0 || last % parts != 0 {
            return Err(Error::NonDivisibleSlice {
                extent: last,
                parts,
            });
        }
        let w = last / parts;
        let rows = Self::rows_of(&shape);
        let rg = self.nodes[x.0].requires_grad;
        let mut out = Vec::with_capacity(parts);
        for part in 0..parts {
            let xv = &self.nodes[x.0].values;
            let mut values = vec![F::zero(); rows * w];
            for r in 0..rows {
                values[r * w..(r + 1) * w]
                    .copy_from_slice(&xv[r * last + part * w..r * last + (part + 1) * w]);
            }
            let mut s = shape[..shape.len() - 1].to_vec();
            s.push(w);
            out.push(self.push(s, values, rg, Op::SliceLast { x, part, parts }));
        }
        Ok(out)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", self.nodes[a.0].shape),
                got: format!("{:?}", self.nodes[b.0].shape),
            });
        }
        let values: Vec<F> = self.nodes[a.0]
            .values
            .iter()
            .zip(self.nodes[b.0].values.iter())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.any_requires_grad(&[a, b]);
        Ok(self.push(shape, values, rg, Op::Add { a, b }))
    }

    /// Elementwise product of same-shape tensors.
    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", self.nodes[a.0].shape),
                got: format!("{:?}", self.nodes[b.0].shape),
            });
        }
        let values: Vec<F> = self.nodes[a.0]
            .values
            .iter()
            .zip(self.nodes[b.0].values.iter())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.any_requires_grad(&[a, b]);
        Ok(self.push(shape, values, rg, Op::Mul { a, b }))
    }

    /// g: [M, K, C] scaled per point and channel by a: [M, C].
    pub fn mul_broadcast_k(&mut self, g: ValueId, a: ValueId) -> Result<ValueId> {
        let gs = self.nodes[g.0].shape.clone();
        let as_ = self.nodes[a.0].shape.clone();
        if gs.len() != 3 || as_.len() != 2 || gs[0] != as_[0] || gs[2] != as_[1] {
            return Err(Error::ShapeMismatch {
                expected: "g=[M,K,C], a=[M,C]".into(),
                got: format!("g={gs:?}, a={as_:?}"),
            });
        }
        let (m, k, c) = (gs[0], gs[1], gs[2]);
        let mut values = vec![F::zero(); m * k * c];
        {
            let gv = &self.nodes[g.0].values;
            let av = &self.nodes[a.0].values;
            for mi in 0..m {
                for ki in 0..k {
                    for ch in 0..c {
                        values[(mi * k + ki) * c + ch] = gv[(mi * k + ki) * c + ch] * av[mi * c + ch];
                    }
                }
            }
        }
        let rg = self.any_requires_grad(&[g, a]);
        Ok(self.push(gs, values, rg, Op::MulBroadcastK { g, a }))
    }

    /// Elementwise product with a constant mask; no gradient flows through
    /// masked (zero) entries.
    pub fn mul_mask(&mut self, x: ValueId, mask: Vec<F>) -> Result<ValueId> {
        if mask.len() != self.nodes[x.0].values.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("mask of length {}", self.nodes[x.0].values.len()),
                got: format!("{}", mask.len()),
            });
        }
        let values: Vec<F> = self.nodes[x.0]
            .values
            .iter()
            .zip(mask.iter())
            .map(|(&v, &m)| v * m)
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(shape, values, rg, Op::MulMask { x, mask }))
    }

    /// Gather rows of x: [N, C] at `idx`, producing [len(idx), C].
    /// Backward scatter-adds. With a flat [M*K] index list followed by a
    /// reshape this doubles as the neighbor gather.
    pub fn gather_rows(&mut self, x: ValueId, idx: &[usize]) -> ValueId {
        let shape = self.nodes[x.0].shape.clone();
        assert!(shape.len() == 2, "gather_rows expects [N, C]");
        let c = shape[1];
        let mut values = vec![F::zero(); idx.len() * c];
        {
            let xv = &self.nodes[x.0].values;
            for (r, &i) in idx.iter().enumerate() {
                values[r * c..(r + 1) * c].copy_from_slice(&xv[i * c..(i + 1) * c]);
            }
        }
        let rg = self.nodes[x.0].requires_grad;
        self.push(
            vec![idx.len(), c],
            values,
            rg,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        )
    }

    /// One fused pass building the per-(query, neighbor) branch input
    /// [M*K, 2C+w]: row (i, k) is [f_qi, f_j - f_qi, enc_row]. Equivalent
    /// to gather + gather + subtract + concat, but with a single
    /// allocation. The encoding columns are constant (no gradient).
    pub fn branch_input(
        &mut self,
        f: ValueId,
        query_rows: &[usize],
        flat: &[usize],
        k: usize,
        enc_width: usize,
        enc_values: &[F],
    ) -> Result<ValueId> {
        let fs = self.nodes[f.0].shape.clone();
        if fs.len() != 2 {
            return Err(Error::ShapeMismatch {
                expected: "f=[N,C]".into(),
                got: format!("{fs:?}"),
            });
        }
        let c = fs[1];
        let rows = query_rows.len() * k;
        if flat.len() != rows || enc_values.len() != rows * enc_width {
            return Err(Error::ShapeMismatch {
                expected: format!("{rows} neighbor rows, {} encoding values", rows * enc_width),
                got: format!("{} rows, {} values", flat.len(), enc_values.len()),
            });
        }
        let width = 2 * c + enc_width;
        let mut values = vec![F::zero(); rows * width];
        {
            let fv = &self.nodes[f.0].values;
            for r in 0..rows {
                let qi = query_rows[r / k];
                let j = flat[r];
                let out = &mut values[r * width..(r + 1) * width];
                out[..c].copy_from_slice(&fv[qi * c..(qi + 1) * c]);
                for ch in 0..c {
                    out[c + ch] = fv[j * c + ch] - fv[qi * c + ch];
                }
                out[2 * c..].copy_from_slice(&enc_values[r * enc_width..(r + 1) * enc_width]);
            }
        }
        let rg = self.nodes[f.0].requires_grad;
        Ok(self.push(
            vec![rows, width],
            values,
            rg,
            Op::BranchInput {
                f,
                query: query_rows.to_vec(),
                flat: flat.to_vec(),
                k,
                c,
            },
        ))
    }

    /// x: [M, K, C] minus q: [M, C] broadcast over K (the Δf construction).
    pub fn sub_broadcast_k(&mut self, x: ValueId, q: ValueId) -> Result<ValueId> {
        let xs = self.nodes[x.0].shape.clone();
        let qs = self.nodes[q.0].shape.clone();
        if xs.len() != 3 || qs.len() != 2 || xs[0] != qs[0] || xs[2] != qs[1] {
            return Err(Error::ShapeMismatch {
                expected: "x=[M,K,C], q=[M,C]".into(),
                got: format!("x={xs:?}, q={qs:?}"),
            });
        }
        let (m, k, c) = (xs[0], xs[1], xs[2]);
        let mut values = vec![F::zero(); m * k * c];
        {
            let xv = &self.nodes[x.0].values;
            let qv = &self.nodes[q.0].values;
            for mi in 0..m {
                for ki in 0..k {
                    for ch in 0..c {
                        values[(mi * k + ki) * c + ch] =
                            xv[(mi * k + ki) * c + ch] - qv[mi * c + ch];
                    }
                }
            }
        }
        let rg = self.any_requires_grad(&[x, q]);
        Ok(self.push(xs, values, rg, Op::SubBroadcastK { x, q }))
    }

    /// Reinterpret the value buffer under a new shape of equal length.
    pub fn reshape(&mut self, x: ValueId, shape: Vec<usize>) -> Result<ValueId> {
        if shape.iter().product::<usize>() != self.nodes[x.0].values.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} elements", self.nodes[x.0].values.len()),
                got: format!("{shape:?}"),
            });
        }
        let values = self.nodes[x.0].values.clone();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(shape, values, rg, Op::Reshape { x }))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: ValueId) -> ValueId {
        let total = self.nodes[x.0]
            .values
            .iter()
            .fold(F::zero(), |acc, &v| acc + v);
        let rg = self.nodes[x.0].requires_grad;
        self.push(vec![1], vec![total], rg, Op::Sum { x })
    }

    /// Mean softmax cross-entropy of logits [B, c] against target
    /// distributions [B, c] (label smoothing is baked into the targets).
    pub fn softmax_cross_entropy(&mut self, logits: ValueId, targets: &[F]) -> Result<ValueId> {
        let shape = self.nodes[logits.0].shape.clone();
        let c = Self::last_of(&shape);
        let rows = Self::rows_of(&shape);
        if targets.len() != rows * c {
            return Err(Error::ShapeMismatch {
                expected: format!("targets of length {}", rows * c),
                got: format!("{}", targets.len()),
            });
        }
        let xv = &self.nodes[logits.0].values;
        let mut probs = vec![F::zero(); rows * c];
        let mut loss = F::zero();
        for r in 0..rows {
            let row = &xv[r * c..(r + 1) * c];
            let max = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
            let mut denom = F::zero();
            for ch in 0..c {
                let e = (row[ch] - max).exp();
                probs[r * c + ch] = e;
                denom = denom + e;
            }
            let log_denom = denom.ln();
            for ch in 0..c {
                probs[r * c + ch] = probs[r * c + ch] / denom;
                let log_p = row[ch] - max - log_denom;
                loss = loss - targets[r * c + ch] * log_p;
            }
        }
        loss = loss / F::from_f64(rows as f64);
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            vec![1],
            vec![loss],
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
            },
        ))
    }

    fn any_requires_grad(&self, ids: &[ValueId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn grad_buf(&mut self, id: ValueId) -> &mut Vec<F> {
        let len = self.nodes[id.0].values.len();
        self.nodes[id.0].grad.get_or_insert_with(|| vec![F::zero(); len])
    }

    /// Run reverse-mode accumulation from a scalar output.
    pub fn backward(&mut self, output: ValueId) {
        assert_eq!(
            self.nodes[output.0].values.len(),
            1,
            "backward target must be scalar"
        );
        for node in self.nodes.iter_mut() {
            node.grad = None;
        }
        *self.grad_buf(output) = vec![F::one()];
        for i in (0..=output.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            // take the grad out instead of cloning; backward_node only
            // writes to earlier nodes' buffers
            let out_grad = match self.nodes[i].grad.take() {
                Some(g) => g,
                None => continue,
            };
            self.backward_node(i, &out_grad);
            self.nodes[i].grad = Some(out_grad);
        }
    }

    fn backward_node(&mut self, i: usize, dy: &[F]) {
        // take the op out so grad buffers can be borrowed mutably
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let in_dim = Self::last_of(&self.nodes[x.0].shape);
                let out_dim = self.nodes[w.0].shape[0];
                let rows = Self::rows_of(&self.nodes[x.0].shape);
                if self.nodes[x.0].requires_grad {
                    let wv = self.nodes[w.0].values.clone();
                    let gx = self.grad_buf(x);
                    // dX = dY (rows,out) * W (out,in)
                    F::gemm(
                        rows,
                        out_dim,
                        in_dim,
                        F::one(),
                        dy,
                        out_dim as isize,
                        1,
                        &wv,
                        in_dim as isize,
                        1,
                        F::one(),
                        gx,
                    );
                }
                if self.nodes[w.0].requires_grad {
                    let xv = self.nodes[x.0].values.clone();
                    let gw = self.grad_buf(w);
                    // dW = dY^T (out,rows) * X (rows,in)
                    F::gemm(
                        out_dim,
                        rows,
                        in_dim,
                        F::one(),
                        dy,
                        1,
                        out_dim as isize,
                        &xv,
                        in_dim as isize,
                        1,
                        F::one(),
                        gw,
                    );
                }
                if self.nodes[b.0].requires_grad {
                    let gb = self.grad_buf(b);
                    for r in 0..rows {
                        for c in 0..out_dim {
                            gb[c] = gb[c] + dy[r * out_dim + c];
                        }
                    }
                }
            }
            Op::Sigmoid { x } => {
                let x = *x;
                if self.nodes[x.0].requires_grad {
                    let yv = self.nodes[i].values.clone();
                    let gx = self.grad_buf(x);
                    for (k, (&y, &d)) in yv.iter().zip(dy.iter()).enumerate() {
                        gx[k] = gx[k] + d * y * (F::one() - y);
                    }
                }
            }
            Op::Relu { x } => {
                let x = *x;
                if self.nodes[x.0].requires_grad {
                    let xv = self.nodes[x.0].values.clone();
                    let gx = self.grad_buf(x);
                    for (k, (&v, &d)) in xv.iter().zip(dy.iter()).enumerate() {
                        if v > F::zero() {
                            gx[k] = gx[k] + d;
                        }
                    }
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let x_hat = x_hat.clone();
                let inv_std = inv_std.clone();
                let c = inv_std.len();
                let rows = x_hat.len() / c;
                let gv = self.nodes[gamma.0].values.clone();
                if self.nodes[beta.0].requires_grad {
                    let gb = self.grad_buf(beta);
                    for r in 0..rows {
                        for ch in 0..c {
                            gb[ch] = gb[ch] + dy[r * c + ch];
                        }
                    }
                }
                if self.nodes[gamma.0].requires_grad {
                    let gg = self.grad_buf(gamma);
                    for r in 0..rows {
                        for ch in 0..c {
                            gg[ch] = gg[ch] + dy[r * c + ch] * x_hat[r * c + ch];
                        }
                    }
                }
                if self.nodes[x.0].requires_grad {
                    // dx = γ * inv_std / n * (n*dxhat - Σdxhat - x̂ * Σ(dxhat·x̂))
                    let n = F::from_f64(rows as f64);
                    let mut sum_d = vec![F::zero(); c];
                    let mut sum_dh = vec![F::zero(); c];
                    for r in 0..rows {
                        for ch in 0..c {
                            let dxhat = dy[r * c + ch] * gv[ch];
                            sum_d[ch] = sum_d[ch] + dxhat;
                            sum_dh[ch] = sum_dh[ch] + dxhat * x_hat[r * c + ch];
                        }
                    }
                    let gx = self.grad_buf(x);
                    for r in 0..rows {
                        for ch in 0..c {
                            let dxhat = dy[r * c + ch] * gv[ch];
                            gx[r * c + ch] = gx[r * c + ch]
                                + inv_std[ch] / n
                                    * (n * dxhat - sum_d[ch] - x_hat[r * c + ch] * sum_dh[ch]);
                        }
                    }
                }
            }
            Op::BatchNormEval { x, gamma, scale } => {
                let (x, gamma) = (*x, *gamma);
                let scale = scale.clone();
                let c = scale.len();
                let rows = dy.len() / c;
                if self.nodes[x.0].requires_grad {
                    let gx = self.grad_buf(x);
                    for r in 0..rows {
                        for ch in 0..c {
                            gx[r * c + ch] = gx[r * c + ch] + dy[r * c + ch] * scale[ch];
                        }
                    }
                }
                if self.nodes[gamma.0].requires_grad {
                    // y = γ·(x-μ)/σ + β; dγ needs (x-μ)/σ = scale·(x-μ)/γ,
                    // recovered from the output minus β is not stored, so
                    // recompute from x directly
                    let xv = self.nodes[x.0].values.clone();
                    let gv = self.nodes[gamma.0].values.clone();
                    let gg = self.grad_buf(gamma);
                    for r in 0..rows {
                        for ch in 0..c {
                            let xhat = if gv[ch] != F::zero() {
                                xv[r * c + ch] * scale[ch] / gv[ch]
                            } else {
                                F::zero()
                            };
                            gg[ch] = gg[ch] + dy[r * c + ch] * xhat;
                        }
                    }
                }
            }
            Op::MaxK { x, argmax } => {
                let x = *x;
                let argmax = argmax.clone();
                if self.nodes[x.0].requires_grad {
                    let k = self.nodes[x.0].shape[1];
                    let c = self.nodes[x.0].shape[2];
                    let gx = self.grad_buf(x);
                    for (mc, &ki) in argmax.iter().enumerate() {
                        let (mi, ch) = (mc / c, mc % c);
                        gx[(mi * k + ki) * c + ch] = gx[(mi * k + ki) * c + ch] + dy[mc];
                    }
                }
            }
            Op::ConcatLast { xs } => {
                let xs = xs.clone();
                let total = Self::last_of(&self.nodes[i].shape);
                let rows = Self::rows_of(&self.nodes[i].shape);
                let mut offset = 0;
                for x in xs {
                    let w = Self::last_of(&self.nodes[x.0].shape);
                    if self.nodes[x.0].requires_grad {
                        let gx = self.grad_buf(x);
                        for r in 0..rows {
                            for c in 0..w {
                                gx[r * w + c] = gx[r * w + c] + dy[r * total + offset + c];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceLast { x, part, parts } => {
                let (x, part, parts) = (*x, *part, *parts);
                if self.nodes[x.0].requires_grad {
                    let last = Self::last_of(&self.nodes[x.0].shape);
                    let w = last / parts;
                    let rows = Self::rows_of(&self.nodes[x.0].shape);
                    let gx = self.grad_buf(x);
                    for r in 0..rows {
                        for c in 0..w {
                            gx[r * last + part * w + c] = gx[r * last + part * w + c] + dy[r * w + c];
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                for id in [a, b] {
                    if self.nodes[id.0].requires_grad {
                        let g = self.grad_buf(id);
                        for (k, &d) in dy.iter().enumerate() {
                            g[k] = g[k] + d;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                if self.nodes[a.0].requires_grad {
                    let bv = self.nodes[b.0].values.clone();
                    let ga = self.grad_buf(a);
                    for (k, &d) in dy.iter().enumerate() {
                        ga[k] = ga[k] + d * bv[k];
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let av = self.nodes[a.0].values.clone();
                    let gb = self.grad_buf(b);
                    for (k, &d) in dy.iter().enumerate() {
                        gb[k] = gb[k] + d * av[k];
                    }
                }
            }
            Op::MulBroadcastK { g, a } => {
                let (g, a) = (*g, *a);
                let shape = self.nodes[g.0].shape.clone();
                let (m, k, c) = (shape[0], shape[1], shape[2]);
                if self.nodes[g.0].requires_grad {
                    let av = self.nodes[a.0].values.clone();
                    let gg = self.grad_buf(g);
                    for mi in 0..m {
                        for ki in 0..k {
                            for ch in 0..c {
                                let idx = (mi * k + ki) * c + ch;
                                gg[idx] = gg[idx] + dy[idx] * av[mi * c + ch];
                            }
                        }
                    }
                }
                if self.nodes[a.0].requires_grad {
                    let gv = self.nodes[g.0].values.clone();
                    let ga = self.grad_buf(a);
                    for mi in 0..m {
                        for ki in 0..k {
                            for ch in 0..c {
                                let idx = (mi * k + ki) * c + ch;
                                ga[mi * c + ch] = ga[mi * c + ch] + dy[idx] * gv[idx];
                            }
                        }
                    }
                }
            }
            Op::MulMask { x, mask } => {
                let x = *x;
                let mask = mask.clone();
                if self.nodes[x.0].requires_grad {
                    let gx = self.grad_buf(x);
                    for (k, (&d, &m)) in dy.iter().zip(mask.iter()).enumerate() {
                        gx[k] = gx[k] + d * m;
                    }
                }
            }
            Op::BranchInput { f, query, flat, k, c } => {
                let f = *f;
                let (k, c) = (*k, *c);
                if self.nodes[f.0].requires_grad {
                    let rows = flat.len();
                    let width = dy.len() / rows;
                    // split the borrows: indices live in the op we took out
                    let query = query.clone();
                    let flat = flat.clone();
                    let gf = self.grad_buf(f);
                    for r in 0..rows {
                        let qi = query[r / k];
                        let j = flat[r];
                        let row = &dy[r * width..r * width + 2 * c];
                        for ch in 0..c {
                            gf[qi * c + ch] = gf[qi * c + ch] + row[ch] - row[c + ch];
                            gf[j * c + ch] = gf[j * c + ch] + row[c + ch];
                        }
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let x = *x;
                let idx = idx.clone();
                if self.nodes[x.0].requires_grad {
                    let c = self.nodes[x.0].shape[1];
                    let gx = self.grad_buf(x);
                    for (r, &i2) in idx.iter().enumerate() {
                        for ch in 0..c {
                            gx[i2 * c + ch] = gx[i2 * c + ch] + dy[r * c + ch];
                        }
                    }
                }
            }
            Op::SubBroadcastK { x, q } => {
                let (x, q) = (*x, *q);
                let shape = self.nodes[x.0].shape.clone();
                let (m, k, c) = (shape[0], shape[1], shape[2]);
                if self.nodes[x.0].requires_grad {
                    let gx = self.grad_buf(x);
                    for (idx, &d) in dy.iter().enumerate() {
                        gx[idx] = gx[idx] + d;
                    }
                }
                if self.nodes[q.0].requires_grad {
                    let gq = self.grad_buf(q);
                    for mi in 0..m {
                        for ki in 0..k {
                            for ch in 0..c {
                                gq[mi * c + ch] = gq[mi * c + ch] - dy[(mi * k + ki) * c + ch];
                            }
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                let x = *x;
                if self.nodes[x.0].requires_grad {
                    let gx = self.grad_buf(x);
                    for (k, &d) in dy.iter().enumerate() {
                        gx[k] = gx[k] + d;
                    }
                }
            }
            Op::Sum { x } => {
                let x = *x;
                if self.nodes[x.0].requires_grad {
                    let d = dy[0];
                    let gx = self.grad_buf(x);
                    for g in gx.iter_mut() {
                        *g = *g + d;
                    }
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                probs,
                targets,
            } => {
                let logits = *logits;
                let probs = probs.clone();
                let targets = targets.clone();
                if self.nodes[logits.0].requires_grad {
                    let c = Self::last_of(&self.nodes[logits.0].shape);
                    let rows = probs.len() / c;
                    let d = dy[0] / F::from_f64(rows as f64);
                    let gl = self.grad_buf(logits);
                    for k in 0..probs.len() {
                        gl[k] = gl[k] + d * (probs[k] - targets[k]);
                    }
                }
            }
        }
        self.nodes[i].op = op;
    }
}

/// Compare the reverse-mode gradient of a scalar-valued tensor function
/// against central finite differences. Returns the max relative error with
/// denominator max(|a|, |b|, 1e-8).
pub fn grad_check<Fn1>(f: Fn1, x: &Tensor<f64>, step: f64) -> f64
where
    Fn1: Fn(&mut Tape<f64>, ValueId) -> ValueId,
{
    assert!(step > 0.0);
    let analytic = {
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone(), true);
        let out = f(&mut tape, xid);
        tape.backward(out);
        tape.grad(xid)
            .map(|g| g.to_vec())
            .unwrap_or_else(|| vec![0.0; x.len()])
    };
    let eval = |values: &[f64]| -> f64 {
        let mut tape = Tape::new();
        let xid = tape.leaf(Tensor::new(x.shape.clone(), values.to_vec()), false);
        let out = f(&mut tape, xid);
        tape.values(out)[0]
    };
    let mut max_rel = 0.0f64;
    let mut perturbed = x.values.clone();
    for i in 0..x.len() {
        let orig = perturbed[i];
        perturbed[i] = orig + step;
        let plus = eval(&perturbed);
        perturbed[i] = orig - step;
        let minus = eval(&perturbed);
        perturbed[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    max_rel
}

/// Central-difference check for every differentiable tape operation.
/// Returns (operation, max relative error) pairs; inputs are ~10 random
/// points each, drawn from `seed`.
pub fn gradient_suite(seed: u64) -> Vec<(&'static str, f64)> {
    use rand::Rng;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut rand_t = |shape: Vec<usize>| {
        let len: usize = shape.iter().product();
        Tensor::new(
            shape,
            (0..len).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect(),
        )
    };
    // every closure must end in a scalar so grad_check can drive it
    let finish = |tape: &mut Tape<f64>, y: ValueId| {
        let s = tape.sigmoid(y);
        tape.sum(s)
    };
    let mut out = Vec::new();
    let mut case = |name: &'static str,
                    x: Tensor<f64>,
                    f: Box<dyn Fn(&mut Tape<f64>, ValueId) -> ValueId>| {
        out.push((name, grad_check(|t, x| f(t, x), &x, 1e-5)));
    };

    let w = rand_t(vec![4, 3]);
    let b = rand_t(vec![4]);
    {
        let (w, b) = (w.clone(), b.clone());
        case(
            "linear.x",
            rand_t(vec![3, 3]),
            Box::new(move |t, x| {
                let w = t.constant(w.clone());
                let b = t.constant(b.clone());
                let y = t.linear(x, w, b).unwrap();
                finish(t, y)
            }),
        );
    }
    {
        let x = rand_t(vec![3, 3]);
        let b = b.clone();
        case(
            "linear.w",
            w.clone(),
            Box::new(move |t, wid| {
                let x = t.constant(x.clone());
                let b = t.constant(b.clone());
                let y = t.linear(x, wid, b).unwrap();
                finish(t, y)
            }),
        );
    }
    {
        let x = rand_t(vec![3, 3]);
        let w = w.clone();
        case(
            "linear.b",
            b,
            Box::new(move |t, bid| {
                let x = t.constant(x.clone());
                let w = t.constant(w.clone());
                let y = t.linear(x, w, bid).unwrap();
                finish(t, y)
            }),
        );
    }
    case(
        "sigmoid",
        rand_t(vec![10]),
        Box::new(move |t, x| {
            let y = t.sigmoid(x);
            t.sum(y)
        }),
    );
    // keep relu inputs away from the kink at 0
    let mut relu_x = rand_t(vec![10]);
    for v in relu_x.values.iter_mut() {
        if v.abs() < 0.05 {
            *v += 0.1;
        }
    }
    case(
        "relu",
        relu_x,
        Box::new(move |t, x| {
            let y = t.relu(x);
            finish(t, y)
        }),
    );
    let gamma = rand_t(vec![2]);
    let beta = rand_t(vec![2]);
    for (name, train) in [("batch_norm.train.x", true), ("batch_norm.eval.x", false)] {
        let (gamma, beta) = (gamma.clone(), beta.clone());
        case(
            name,
            rand_t(vec![5, 2]),
            Box::new(move |t, x| {
                let g = t.constant(gamma.clone());
                let b = t.constant(beta.clone());
                let mut stats = BnStats::new(2);
                stats.var = vec![0.7, 1.3];
                stats.mean = vec![0.1, -0.2];
                let y = t.batch_norm(x, g, b, &mut stats, train).unwrap();
                finish(t, y)
            }),
        );
    }
    {
        let x = rand_t(vec![5, 2]);
        let beta = beta.clone();
        case(
            "batch_norm.gamma",
            gamma.clone(),
            Box::new(move |t, gid| {
                let x = t.constant(x.clone());
                let b = t.constant(beta.clone());
                let mut stats = BnStats::new(2);
                let y = t.batch_norm(x, gid, b, &mut stats, true).unwrap();
                finish(t, y)
            }),
        );
    }
    {
        let x = rand_t(vec![5, 2]);
        case(
            "batch_norm.beta",
            beta,
            Box::new(move |t, bid| {
                let x = t.constant(x.clone());
                let g = t.constant(gamma.clone());
                let mut stats = BnStats::new(2);
                let y = t.batch_norm(x, g, bid, &mut stats, true).unwrap();
                finish(t, y)
            }),
        );
    }
    case(
        "max_over_neighbors",
        rand_t(vec![2, 3, 2]),
        Box::new(move |t, x| {
            let y = t.max_over_neighbors(x);
            finish(t, y)
        }),
    );
    {
        let other = rand_t(vec![2, 3]);
        case(
            "concat_last",
            rand_t(vec![2, 2]),
            Box::new(move |t, x| {
                let o = t.constant(other.clone());
                let y = t.concat_last(&[x, o]).unwrap();
                finish(t, y)
            }),
        );
    }
    case(
        "slice_last",
        rand_t(vec![2, 6]),
        Box::new(move |t, x| {
            let parts = t.slice_last(x, 3).unwrap();
            let y = t.mul(parts[0], parts[2]).unwrap();
            finish(t, y)
        }),
    );
    {
        let other = rand_t(vec![3, 3]);
        case(
            "add",
            rand_t(vec![3, 3]),
            Box::new(move |t, x| {
                let o = t.constant(other.clone());
                let y = t.add(x, o).unwrap();
                finish(t, y)
            }),
        );
    }
    {
        let other = rand_t(vec![3, 3]);
        case(
            "mul",
            rand_t(vec![3, 3]),
            Box::new(move |t, x| {
                let o = t.constant(other.clone());
                let y = t.mul(x, o).unwrap();
                finish(t, y)
            }),
        );
    }
    {
        let a = rand_t(vec![2, 2]);
        case(
            "mul_broadcast_k.g",
            rand_t(vec![2, 3, 2]),
            Box::new(move |t, g| {
                let a = t.constant(a.clone());
                let y = t.mul_broadcast_k(g, a).unwrap();
                finish(t, y)
            }),
        );
    }
    {
        let g = rand_t(vec![2, 3, 2]);
        case(
            "mul_broadcast_k.a",
            rand_t(vec![2, 2]),
            Box::new(move |t, a| {
                let g = t.constant(g.clone());
                let y = t.mul_broadcast_k(g, a).unwrap();
                finish(t, y)
            }),
        );
    }
    case(
        "mul_mask",
        rand_t(vec![3, 2]),
        Box::new(move |t, x| {
            let y = t.mul_mask(x, vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0]).unwrap();
            finish(t, y)
        }),
    );
    case(
        "gather_rows",
        rand_t(vec![4, 2]),
        Box::new(move |t, x| {
            let y = t.gather_rows(x, &[2, 0, 2, 3]);
            finish(t, y)
        }),
    );
    {
        let enc = rand_t(vec![8]);
        case(
            "branch_input",
            rand_t(vec![4, 2]),
            Box::new(move |t, f| {
                let y = t
                    .branch_input(f, &[1, 3], &[0, 2, 3, 1], 2, 2, &enc.values)
                    .unwrap();
                finish(t, y)
            }),
        );
    }
    {
        let q = rand_t(vec![2, 2]);
        case(
            "sub_broadcast_k.x",
            rand_t(vec![2, 3, 2]),
            Box::new(move |t, x| {
                let q = t.constant(q.clone());
                let y = t.sub_broadcast_k(x, q).unwrap();
                finish(t, y)
            }),
        );
    }
    {
        let x = rand_t(vec![2, 3, 2]);
        case(
            "sub_broadcast_k.q",
            rand_t(vec![2, 2]),
            Box::new(move |t, q| {
                let x = t.constant(x.clone());
                let y = t.sub_broadcast_k(x, q).unwrap();
                finish(t, y)
            }),
        );
    }
    case(
        "reshape",
        rand_t(vec![2, 6]),
        Box::new(move |t, x| {
            let y = t.reshape(x, vec![2, 3, 2]).unwrap();
            let m = t.max_over_neighbors(y);
            finish(t, m)
        }),
    );
    case(
        "sum",
        rand_t(vec![3, 3]),
        Box::new(move |t, x| t.sum(x)),
    );
    case(
        "softmax_cross_entropy",
        rand_t(vec![2, 5]),
        Box::new(move |t, x| {
            let targets = vec![0.0, 0.9, 0.025, 0.025, 0.05, 0.05, 0.0, 0.9, 0.025, 0.025];
            t.softmax_cross_entropy(x, &targets).unwrap()
        }),
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;

    fn rand_tensor(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let len = shape.iter().product();
        Tensor::new(shape, (0..len).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect())
    }

    #[test]
    fn linear_hand_example() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 1.0]), false);
        let w = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]), false);
        let b = tape.leaf(Tensor::zeros(vec![2]), false);
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.values(y), &[3.0, 7.0]);
    }

    #[test]
    fn linear_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2, 2], vec![0.5, -0.25, 1.0, 2.0]), false);
        let w = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]), false);
        let b = tape.leaf(Tensor::zeros(vec![2]), false);
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.values(y), tape.values(x));
    }

    #[test]
    fn linear_shape_mismatch_names_shapes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![2, 3]), false);
        let w = tape.leaf(Tensor::zeros(vec![4, 2]), false);
        let b = tape.leaf(Tensor::zeros(vec![4]), false);
        let err = tape.linear(x, w, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn linear_gradient_matches_finite_differences() {
        let x = rand_tensor(vec![3, 4], 1);
        let rel = grad_check(
            |tape, xid| {
                let w = tape.leaf(rand_tensor(vec![2, 4], 2), false);
                let b = tape.leaf(rand_tensor(vec![2], 3), false);
                let y = tape.linear(xid, w, b).unwrap();
                tape.sum(y)
            },
            &x,
            1e-5,
        );
        assert!(rel < 1e-4, "rel {rel}");
    }

    #[test]
    fn sigmoid_values_and_antisymmetry() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![0.0, 1.7, -1.7]), false);
        let y = tape.sigmoid(x);
        assert_eq!(tape.values(y)[0], 0.5);
        assert!((tape.values(y)[1] - (1.0 - tape.values(y)[2])).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_gradient() {
        let x = rand_tensor(vec![6], 4);
        let rel = grad_check(
            |tape, xid| {
                let y = tape.sigmoid(xid);
                tape.sum(y)
            },
            &x,
            1e-5,
        );
        assert!(rel < 1e-4, "rel {rel}");
    }

    #[test]
    fn relu_values_and_mask() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]), true);
        let y = tape.relu(x);
        assert_eq!(tape.values(y), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y);
        tape.backward(s);
        // subgradient 0 at exactly 0
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn batch_norm_eval_neutral_statistics_is_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(rand_tensor(vec![4, 3], 5), false);
        let gamma = tape.leaf(Tensor::new(vec![3], vec![1.0; 3]), false);
        let beta = tape.leaf(Tensor::zeros(vec![3]), false);
        let mut stats = BnStats::new(3);
        let y = tape.batch_norm(x, gamma, beta, &mut stats, false).unwrap();
        // ε=1e-5 shifts the unit-variance scale by ~5e-6
        for (a, b) in tape.values(x).iter().zip(tape.values(y).iter()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn batch_norm_train_normalizes() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(rand_tensor(vec![16, 3], 6), false);
        let gamma = tape.leaf(Tensor::new(vec![3], vec![1.0; 3]), false);
        let beta = tape.leaf(Tensor::zeros(vec![3]), false);
        let mut stats = BnStats::new(3);
        let y = tape.batch_norm(x, gamma, beta, &mut stats, true).unwrap();
        let yv = tape.values(y);
        for ch in 0..3 {
            let mean: f64 = (0..16).map(|r| yv[r * 3 + ch]).sum::<f64>() / 16.0;
            let var: f64 = (0..16).map(|r| (yv[r * 3 + ch] - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn batch_norm_rejects_single_row_in_train() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![1, 3]), false);
        let gamma = tape.leaf(Tensor::new(vec![3], vec![1.0; 3]), false);
        let beta = tape.leaf(Tensor::zeros(vec![3]), false);
        let mut stats = BnStats::new(3);
        assert!(matches!(
            tape.batch_norm(x, gamma, beta, &mut stats, true),
            Err(Error::BatchTooSmall(1))
        ));
    }

    #[test]
    fn batch_norm_gradients_match_finite_differences() {
        let x = rand_tensor(vec![8, 3], 7);
        let rel = grad_check(
            |tape, xid| {
                let gamma = tape.leaf(rand_tensor(vec![3], 8), false);
                let beta = tape.leaf(rand_tensor(vec![3], 9), false);
                let mut stats = BnStats::new(3);
                let y = tape.batch_norm(xid, gamma, beta, &mut stats, true).unwrap();
                // nonlinear readout so dx is not trivially zero-summed
                let s = tape.sigmoid(y);
                tape.sum(s)
            },
            &x,
            1e-5,
        );
        assert!(rel < 1e-3, "rel {rel}");

        // γ and β paths
        let gamma0 = rand_tensor(vec![3], 10);
        let rel_g = grad_check(
            |tape, gid| {
                let x = tape.leaf(rand_tensor(vec![8, 3], 7), false);
                let beta = tape.leaf(rand_tensor(vec![3], 9), false);
                let mut stats = BnStats::new(3);
                let y = tape.batch_norm(x, gid, beta, &mut stats, true).unwrap();
                let s = tape.sigmoid(y);
                tape.sum(s)
            },
            &gamma0,
            1e-5,
        );
        assert!(rel_g < 1e-3, "rel {rel_g}");
    }

    #[test]
    fn max_over_neighbors_values_and_ties() {
        let mut tape = Tape::<f64>::new();
        // M=1, K=2, C=2: rows (1,5),(3,2)
        let x = tape.leaf(Tensor::new(vec![1, 2, 2], vec![1.0, 5.0, 3.0, 2.0]), true);
        let y = tape.max_over_neighbors(x);
        assert_eq!(tape.values(y), &[3.0, 5.0]);
        let s = tape.sum(y);
        tape.backward(s);
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0, 1.0, 0.0]);

        // duplicated maximal rows: gradient only to the lower k
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![1, 2, 1], vec![4.0, 4.0]), true);
        let y = tape.max_over_neighbors(x);
        let s = tape.sum(y);
        tape.backward(s);
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0]);
    }

    #[test]
    fn max_over_singleton_k_is_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]), false);
        let y = tape.max_over_neighbors(x);
        assert_eq!(tape.shape(y), &[2, 2]);
        assert_eq!(tape.values(y), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]), false);
        let b = tape.leaf(Tensor::new(vec![1, 1], vec![3.0]), false);
        let y = tape.concat_last(&[a, b]).unwrap();
        assert_eq!(tape.values(y), &[1.0, 2.0, 3.0]);

        let x = tape.leaf(Tensor::new(vec![1, 6], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), false);
        let parts = tape.slice_last(x, 3).unwrap();
        assert_eq!(tape.values(parts[0]), &[1.0, 2.0]);
        assert_eq!(tape.values(parts[1]), &[3.0, 4.0]);
        assert_eq!(tape.values(parts[2]), &[5.0, 6.0]);
        let back = tape.concat_last(&parts).unwrap();
        assert_eq!(tape.values(back), tape.values(x));

        assert!(matches!(
            tape.slice_last(y, 2),
            Err(Error::NonDivisibleSlice { extent: 3, parts: 2 })
        ));
    }

    #[test]
    fn adjoints_accumulate_additively() {
        // y = x + x must give dy/dx = 2
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![2], vec![1.0, -0.5]), true);
        let y = tape.add(x, x).unwrap();
        let s = tape.sum(y);
        tape.backward(s);
        assert_eq!(tape.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn grad_check_quadratic() {
        let x = Tensor::new(vec![1], vec![3.0]);
        let rel = grad_check(
            |tape, xid| {
                let sq = tape.mul(xid, xid).unwrap();
                tape.sum(sq)
            },
            &x,
            1e-5,
        );
        assert!(rel < 1e-10, "rel {rel}");
    }

    #[test]
    fn grad_check_constant_function() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]);
        let rel = grad_check(
            |tape, _xid| {
                let c = tape.leaf(Tensor::scalar(5.0), false);
                tape.sum(c)
            },
            &x,
            1e-5,
        );
        assert_eq!(rel, 0.0);
    }

    #[test]
    fn gather_and_sub_broadcast_gradients() {
        let x = rand_tensor(vec![5, 3], 11);
        let rel = grad_check(
            |tape, xid| {
                let g = tape.gather_rows(xid, &[0, 2, 2, 4]);
                let g3 = tape.reshape(g, vec![2, 2, 3]).unwrap();
                let q = tape.gather_rows(xid, &[1, 3]);
                let d = tape.sub_broadcast_k(g3, q).unwrap();
                let s = tape.sigmoid(d);
                tape.sum(s)
            },
            &x,
            1e-5,
        );
        assert!(rel < 1e-4, "rel {rel}");
    }

    #[test]
    fn branch_input_matches_gather_concat_chain() {
        // the fused op must agree with the explicit gather/Δf/concat chain
        // in values and gradients
        let x = rand_tensor(vec![5, 3], 20);
        let query = [0usize, 3];
        let flat = [1usize, 2, 0, 4, 3, 3];
        let enc: Vec<f64> = (0..12).map(|i| i as f64 * 0.1).collect();
        let mut tape = Tape::<f64>::new();
        let xid = tape.leaf(x.clone(), true);
        let fused = tape.branch_input(xid, &query, &flat, 3, 2, &enc).unwrap();
        assert_eq!(tape.shape(fused), &[6, 8]);
        let repeated = [0usize, 0, 0, 3, 3, 3];
        let fi = tape.gather_rows(xid, &repeated);
        let fj = tape.gather_rows(xid, &flat);
        let fj3 = tape.reshape(fj, vec![2, 3, 3]).unwrap();
        let q = tape.gather_rows(xid, &query);
        let d = tape.sub_broadcast_k(fj3, q).unwrap();
        let df = tape.reshape(d, vec![6, 3]).unwrap();
        let e = tape.constant(Tensor::new(vec![6, 2], enc.clone()));
        let chain = tape.concat_last(&[fi, df, e]).unwrap();
        assert_eq!(tape.values(fused), tape.values(chain));

        let rel = grad_check(
            |tape, xid| {
                let y = tape.branch_input(xid, &query, &flat, 3, 2, &enc).unwrap();
                let s = tape.sigmoid(y);
                tape.sum(s)
            },
            &x,
            1e-5,
        );
        assert!(rel < 1e-4, "rel {rel}");
    }

    #[test]
    fn mul_broadcast_k_gradients() {
        let x = rand_tensor(vec![2, 3, 4], 12);
        let rel = grad_check(
            |tape, xid| {
                let a = tape.leaf(rand_tensor(vec![2, 4], 13), false);
                let y = tape.mul_broadcast_k(xid, a).unwrap();
                let s = tape.sigmoid(y);
                tape.sum(s)
            },
            &x,
            1e-5,
        );
        assert!(rel < 1e-4, "rel {rel}");
        let a0 = rand_tensor(vec![2, 4], 14);
        let rel_a = grad_check(
            |tape, aid| {
                let g = tape.leaf(rand_tensor(vec![2, 3, 4], 12), false);
                let y = tape.mul_broadcast_k(g, aid).unwrap();
                let s = tape.sigmoid(y);
                tape.sum(s)
            },
            &a0,
            1e-5,
        );
        assert!(rel_a < 1e-4, "rel {rel_a}");
    }

    #[test]
    fn softmax_cross_entropy_gradient() {
        let x = rand_tensor(vec![2, 4], 15);
        let targets: Vec<f64> = vec![0.7, 0.1, 0.1, 0.1, 0.1, 0.1, 0.7, 0.1];
        let t2 = targets.clone();
        let rel = grad_check(
            move |tape, xid| tape.softmax_cross_entropy(xid, &t2).unwrap(),
            &x,
            1e-6,
        );
        assert!(rel < 1e-4, "rel {rel}");
    }

    #[test]
    fn replay_is_deterministic() {
        let run = || {
            let mut tape = Tape::<f32>::new();
            let x = tape.leaf(Tensor::from_f64(vec![4, 3], &[0.1, 0.2, 0.3, -0.4, 0.5, -0.6, 0.7, 0.8, -0.9, 1.0, -1.1, 1.2]), true);
            let w = tape.leaf(Tensor::from_f64(vec![2, 3], &[0.3, -0.2, 0.4, 0.5, 0.1, -0.7]), true);
            let b = tape.leaf(Tensor::from_f64(vec![2], &[0.05, -0.05]), true);
            let y = tape.linear(x, w, b).unwrap();
            let s = tape.sigmoid(y);
            let out = tape.sum(s);
            tape.backward(out);
            (
                tape.values(out).to_vec(),
                tape.grad(w).unwrap().to_vec(),
            )
        };
        let (v1, g1) = run();
        let (v2, g2) = run();
        assert_eq!(v1, v2);
        assert_eq!(g1, g2);
    }
}
