//! A tiny pre-norm Vision Transformer with a mean-pooling head.
//!
//! Per image: patchify → linear embed + positions → `depth` blocks of
//! `x + Attn(LN(x))`, `x + MLP(LN(x))` → final LN → mean over tokens →
//! classifier. Linear layers run on the tokens of the whole batch stacked
//! into one `(B·N) × D` matrix; attention runs per image.

use super::config::{MaskMode, ModelConfig};
use crate::attention::{attention_backward, attention_forward_with_masks, AttentionTrace, AttentionWeights, GmmParams, MaskParams, TensorInfo};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::mask::{init_kernels, KernelInit};
use crate::numerics::{gelu_from_tanh, gelu_grad_from_tanh, gelu_tanh, layer_norm, layer_norm_backward, matmul, matmul_nt, matmul_tn, LayerNormCache, Matrix, Rng};

const LN_EPS: f64 = 1e-5;
const POS_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1_g: Vec<f64>,
    pub ln1_b: Vec<f64>,
    pub attn: AttentionWeights,
    pub ln2_g: Vec<f64>,
    pub ln2_b: Vec<f64>,
    pub fc1_w: Matrix,
    pub fc1_b: Vec<f64>,
    pub fc2_w: Matrix,
    pub fc2_b: Vec<f64>,
}

/// Model parameters. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct TinyViT {
    pub config: ModelConfig,
    pub patch_w: Matrix,
    pub patch_b: Vec<f64>,
    pub pos: Matrix,
    pub blocks: Vec<Block>,
    pub norm_g: Vec<f64>,
    pub norm_b: Vec<f64>,
    pub head_w: Matrix,
    pub head_b: Vec<f64>,
}

fn lecun(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let std = 1.0 / (rows as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.normal(0.0, std))
}

fn zeros_like(m: &Matrix) -> Matrix {
    Matrix::zeros(m.rows(), m.cols())
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

impl TinyViT {
    /// Fresh parameters. Linear layers are LeCun-normal, positions
    /// `N(0, 0.02²)`, layer norms identity, mixture kernels drawn from
    /// [`KernelInit::default`], element-wise masks all ones.
    pub fn new(config: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (d, n, f) = (config.dim, config.patches(), config.patch_features());
        let hidden = d * config.mlp_ratio;
        let patch_w = lecun(f, d, rng);
        let pos = Matrix::from_fn(n, d, |_, _| rng.normal(0.0, POS_STD));
        let mut blocks = Vec::with_capacity(config.depth);
        for _ in 0..config.depth {
            let mask = match config.mask {
                MaskMode::None => MaskParams::None,
                MaskMode::Gmm => {
                    let slots: Vec<_> = (0..config.mask_slots())
                        .map(|_| init_kernels(rng, config.kernels, KernelInit::default()))
                        .collect();
                    MaskParams::Gmm(GmmParams::from_kernels(config.grid_side(), config.epsilon, &slots)?)
                }
                MaskMode::Elm => MaskParams::Elm(Matrix::filled(n, n, 1.0)),
            };
            let mut attn = AttentionWeights::random(d, config.heads, 1.0 / (d as f64).sqrt(), mask, rng)?;
            attn.placement = config.placement;
            let fc1_w = lecun(d, hidden, rng);
            let fc2_w = lecun(hidden, d, rng);
            blocks.push(Block {
                ln1_g: vec![1.0; d],
                ln1_b: vec![0.0; d],
                attn,
                ln2_g: vec![1.0; d],
                ln2_b: vec![0.0; d],
                fc1_w,
                fc1_b: vec![0.0; hidden],
                fc2_w,
                fc2_b: vec![0.0; d],
            });
        }
        let head_w = lecun(d, config.classes, rng);
        Ok(TinyViT {
            config: config.clone(),
            patch_w,
            patch_b: vec![0.0; d],
            pos,
            blocks,
            norm_g: vec![1.0; d],
            norm_b: vec![0.0; d],
            head_w,
            head_b: vec![0.0; config.classes],
        })
    }

    pub fn zeros_like(&self) -> Self {
        TinyViT {
            config: self.config.clone(),
            patch_w: zeros_like(&self.patch_w),
            patch_b: vec![0.0; self.patch_b.len()],
            pos: zeros_like(&self.pos),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln1_g: vec![0.0; b.ln1_g.len()],
                    ln1_b: vec![0.0; b.ln1_b.len()],
                    attn: b.attn.zeros_like(),
                    ln2_g: vec![0.0; b.ln2_g.len()],
                    ln2_b: vec![0.0; b.ln2_b.len()],
                    fc1_w: zeros_like(&b.fc1_w),
                    fc1_b: vec![0.0; b.fc1_b.len()],
                    fc2_w: zeros_like(&b.fc2_w),
                    fc2_b: vec![0.0; b.fc2_b.len()],
                })
                .collect(),
            norm_g: vec![0.0; self.norm_g.len()],
            norm_b: vec![0.0; self.norm_b.len()],
            head_w: zeros_like(&self.head_w),
            head_b: vec![0.0; self.head_b.len()],
        }
    }

    /// Names, shapes and decay flags, in the order of [`Self::tensors`].
    /// Weight decay applies to weight matrices only.
    pub fn tensor_infos(&self) -> Vec<TensorInfo> {
        let t = |name: String, shape: Vec<usize>, decay: bool| TensorInfo { name, shape, decay };
        let mshape = |m: &Matrix| vec![m.rows(), m.cols()];
        let mut out = vec![
            t("patch_w".into(), mshape(&self.patch_w), true),
            t("patch_b".into(), vec![self.patch_b.len()], false),
            t("pos".into(), mshape(&self.pos), false),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{l}.");
            out.push(t(format!("{p}ln1_g"), vec![b.ln1_g.len()], false));
            out.push(t(format!("{p}ln1_b"), vec![b.ln1_b.len()], false));
            out.extend(b.attn.tensor_infos(&format!("{p}attn.")));
            out.push(t(format!("{p}ln2_g"), vec![b.ln2_g.len()], false));
            out.push(t(format!("{p}ln2_b"), vec![b.ln2_b.len()], false));
            out.push(t(format!("{p}fc1_w"), mshape(&b.fc1_w), true));
            out.push(t(format!("{p}fc1_b"), vec![b.fc1_b.len()], false));
            out.push(t(format!("{p}fc2_w"), mshape(&b.fc2_w), true));
            out.push(t(format!("{p}fc2_b"), vec![b.fc2_b.len()], false));
        }
        out.push(t("norm_g".into(), vec![self.norm_g.len()], false));
        out.push(t("norm_b".into(), vec![self.norm_b.len()], false));
        out.push(t("head_w".into(), mshape(&self.head_w), true));
        out.push(t("head_b".into(), vec![self.head_b.len()], false));
        out
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.patch_w.as_slice(), &self.patch_b, self.pos.as_slice()];
        for b in &self.blocks {
            out.push(&b.ln1_g);
            out.push(&b.ln1_b);
            out.extend(b.attn.tensors());
            out.push(&b.ln2_g);
            out.push(&b.ln2_b);
            out.push(b.fc1_w.as_slice());
            out.push(&b.fc1_b);
            out.push(b.fc2_w.as_slice());
            out.push(&b.fc2_b);
        }
        out.extend([&self.norm_g[..], &self.norm_b, self.head_w.as_slice(), &self.head_b]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![self.patch_w.as_mut_slice(), &mut self.patch_b, self.pos.as_mut_slice()];
        for b in &mut self.blocks {
            out.push(&mut b.ln1_g);
            out.push(&mut b.ln1_b);
            out.extend(b.attn.tensors_mut());
            out.push(&mut b.ln2_g);
            out.push(&mut b.ln2_b);
            out.push(b.fc1_w.as_mut_slice());
            out.push(&mut b.fc1_b);
            out.push(b.fc2_w.as_mut_slice());
            out.push(&mut b.fc2_b);
        }
        out.extend([
            &mut self.norm_g[..],
            &mut self.norm_b,
            self.head_w.as_mut_slice(),
            &mut self.head_b,
        ]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Parameters belonging to attention masks (α, σ or element-wise entries).
    pub fn mask_param_count(&self) -> usize {
        self.blocks.iter().map(|b| b.attn.mask.param_count()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Forward pass from per-image patch matrices (`N × p²C` each).
    pub fn forward_patches(&self, patches: &[Matrix]) -> Result<(Matrix, ForwardTrace)> {
        let cfg = &self.config;
        let (n, d, f) = (cfg.patches(), cfg.dim, cfg.patch_features());
        if patches.iter().any(|p| p.shape() != (n, f)) {
            return Err(Error::shape(
                "vit_forward",
                format!("model expects {n}x{f} patch matrices"),
            ));
        }
        let bsz = patches.len();
        let mut stacked = Vec::with_capacity(bsz * n * f);
        for p in patches {
            stacked.extend_from_slice(p.as_slice());
        }
        let stacked = Matrix::from_vec(bsz * n, f, stacked)?;

        let mut x = matmul(&stacked, &self.patch_w)?;
        x.add_row_vector(&self.patch_b)?;
        for r in 0..bsz * n {
            add_into(x.row_mut(r), self.pos.row(r % n));
        }

        let mut blocks = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let (h1, ln1) = layer_norm(&x, &blk.ln1_g, &blk.ln1_b, LN_EPS)?;
            let mut attn_out = Vec::with_capacity(bsz * n * d);
            let mut attn = Vec::with_capacity(bsz);
            let masks = blk.attn.mask.head_masks(blk.attn.heads, n)?;
            for b in 0..bsz {
                let xb = rows_block(&h1, b * n, n);
                let (ob, tr) = attention_forward_with_masks(&xb, &blk.attn, masks.as_deref())?;
                attn_out.extend_from_slice(ob.as_slice());
                attn.push(tr);
            }
            let mut x_mid = Matrix::from_vec(bsz * n, d, attn_out)?;
            x_mid.add_assign(&x)?;

            let (h2, ln2) = layer_norm(&x_mid, &blk.ln2_g, &blk.ln2_b, LN_EPS)?;
            let mut pre = matmul(&h2, &blk.fc1_w)?;
            pre.add_row_vector(&blk.fc1_b)?;
            let tanh = pre.map(gelu_tanh);
            let mut act = pre.clone();
            for (a, &t) in act.as_mut_slice().iter_mut().zip(tanh.as_slice()) {
                *a = gelu_from_tanh(*a, t);
            }
            let mut x_out = matmul(&act, &blk.fc2_w)?;
            x_out.add_row_vector(&blk.fc2_b)?;
            x_out.add_assign(&x_mid)?;

            blocks.push(BlockTrace {
                ln1,
                attn,
                ln2,
                h2,
                pre,
                tanh,
                act,
            });
            x = x_out;
        }

        let (normed, final_ln) = layer_norm(&x, &self.norm_g, &self.norm_b, LN_EPS)?;
        let mut pooled = Matrix::zeros(bsz, d);
        for b in 0..bsz {
            let row = pooled.row_mut(b);
            for r in 0..n {
                add_into(row, normed.row(b * n + r));
            }
            for v in row.iter_mut() {
                *v /= n as f64;
            }
        }
        let mut logits = matmul(&pooled, &self.head_w)?;
        logits.add_row_vector(&self.head_b)?;
        Ok((
            logits,
            ForwardTrace {
                stacked,
                blocks,
                final_ln,
                pooled,
            },
        ))
    }

    /// Logits for a batch of images.
    pub fn forward(&self, batch: &[Sample]) -> Result<(Matrix, ForwardTrace)> {
        let patches = batch
            .iter()
            .map(|s| self.patchify(s))
            .collect::<Result<Vec<_>>>()?;
        self.forward_patches(&patches)
    }

    pub fn patchify(&self, sample: &Sample) -> Result<Matrix> {
        if sample.channels != self.config.channels || sample.side != self.config.image_side {
            return Err(Error::shape(
                "patchify",
                format!(
                    "{}x{}x{} image for a model expecting {}x{}x{}",
                    sample.channels,
                    sample.side,
                    sample.side,
                    self.config.channels,
                    self.config.image_side,
                    self.config.image_side
                ),
            ));
        }
        patchify(sample, self.config.patch)
    }

    /// Gradients of the loss given `∂L/∂logits`.
    pub fn backward(&self, trace: &ForwardTrace, dlogits: &Matrix) -> Result<TinyViT> {
        let cfg = &self.config;
        let (n, d) = (cfg.patches(), cfg.dim);
        let bsz = trace.pooled.rows();
        if dlogits.shape() != (bsz, cfg.classes) || trace.blocks.len() != self.blocks.len() {
            return Err(Error::Trace(format!(
                "trace for {bsz} images and {} blocks does not match upstream {:?}",
                trace.blocks.len(),
                dlogits.shape()
            )));
        }
        let mut g = self.zeros_like();
        g.head_w = matmul_tn(&trace.pooled, dlogits)?;
        g.head_b = dlogits.column_sums();
        let dpooled = matmul_nt(dlogits, &self.head_w)?;

        let mut dnormed = Matrix::zeros(bsz * n, d);
        for b in 0..bsz {
            let src: Vec<f64> = dpooled.row(b).iter().map(|v| v / n as f64).collect();
            for r in 0..n {
                dnormed.row_mut(b * n + r).copy_from_slice(&src);
            }
        }
        let (mut dx, dg, db) = layer_norm_backward(&trace.final_ln, &self.norm_g, &dnormed)?;
        g.norm_g = dg;
        g.norm_b = db;

        for (l, (blk, bt)) in self.blocks.iter().zip(&trace.blocks).enumerate().rev() {
            let gb = &mut g.blocks[l];
            // MLP branch; the residual passes dx through unchanged
            gb.fc2_w = matmul_tn(&bt.act, &dx)?;
            gb.fc2_b = dx.column_sums();
            let dact = matmul_nt(&dx, &blk.fc2_w)?;
            let mut dpre = dact;
            for ((v, &p), &t) in dpre.as_mut_slice().iter_mut().zip(bt.pre.as_slice()).zip(bt.tanh.as_slice()) {
                *v *= gelu_grad_from_tanh(p, t);
            }
            gb.fc1_w = matmul_tn(&bt.h2, &dpre)?;
            gb.fc1_b = dpre.column_sums();
            let dh2 = matmul_nt(&dpre, &blk.fc1_w)?;
            let (dmid, dg2, db2) = layer_norm_backward(&bt.ln2, &blk.ln2_g, &dh2)?;
            gb.ln2_g = dg2;
            gb.ln2_b = db2;
            let mut dx_mid = dx;
            dx_mid.add_assign(&dmid)?;

            // attention branch
            let mut dh1 = Vec::with_capacity(bsz * n * d);
            for (b, tr) in bt.attn.iter().enumerate() {
                let up = rows_block(&dx_mid, b * n, n);
                let (dxb, ga) = attention_backward(&blk.attn, tr, &up)?;
                dh1.extend_from_slice(dxb.as_slice());
                for (acc, v) in gb.attn.tensors_mut().into_iter().zip(ga.tensors()) {
                    add_into(acc, v);
                }
            }
            let dh1 = Matrix::from_vec(bsz * n, d, dh1)?;
            let (din, dg1, db1) = layer_norm_backward(&bt.ln1, &blk.ln1_g, &dh1)?;
            gb.ln1_g = dg1;
            gb.ln1_b = db1;
            dx_mid.add_assign(&din)?;
            dx = dx_mid;
        }

        for r in 0..bsz * n {
            add_into(g.pos.row_mut(r % n), dx.row(r));
        }
        g.patch_w = matmul_tn(&trace.stacked, &dx)?;
        g.patch_b = dx.column_sums();
        Ok(g)
    }

    /// Mean cross-entropy over the batch and its gradients.
    pub fn loss_and_grads(&self, batch: &[Sample]) -> Result<LossOutput> {
        let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
        let patches = batch
            .iter()
            .map(|s| self.patchify(s))
            .collect::<Result<Vec<_>>>()?;
        self.loss_and_grads_patches(&patches, &labels)
    }

    pub fn loss_and_grads_patches(&self, patches: &[Matrix], labels: &[usize]) -> Result<LossOutput> {
        if patches.len() != labels.len() || patches.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{} images with {} labels",
                patches.len(),
                labels.len()
            )));
        }
        let (logits, trace) = self.forward_patches(patches)?;
        let (loss, dlogits) = cross_entropy(&logits, labels)?;
        let grads = self.backward(&trace, &dlogits)?;
        let correct = (0..logits.rows())
            .filter(|&i| argmax(logits.row(i)) == labels[i])
            .count();
        Ok(LossOutput {
            loss,
            correct,
            logits,
            grads,
        })
    }
}

/// Result of [`TinyViT::loss_and_grads`].
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    /// Images whose arg-max logit equals the label.
    pub correct: usize,
    pub logits: Matrix,
    pub grads: TinyViT,
}

#[derive(Debug, Clone)]
struct BlockTrace {
    ln1: LayerNormCache,
    attn: Vec<AttentionTrace>,
    ln2: LayerNormCache,
    h2: Matrix,
    pre: Matrix,
    tanh: Matrix,
    act: Matrix,
}

/// Activations kept by [`TinyViT::forward_patches`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    stacked: Matrix,
    blocks: Vec<BlockTrace>,
    final_ln: LayerNormCache,
    pooled: Matrix,
}

impl ForwardTrace {
    /// Attention activations of image `image` in block `block`.
    pub fn attention(&self, block: usize, image: usize) -> &AttentionTrace {
        &self.blocks[block].attn[image]
    }
}

fn rows_block(m: &Matrix, start: usize, count: usize) -> Matrix {
    let c = m.cols();
    Matrix::from_vec(count, c, m.as_slice()[start * c..(start + count) * c].to_vec()).expect("row block in range")
}

/// `N × (p²·C)` patch matrix. Patches run row-major over the grid; within a
/// patch the feature index is `c·p² + row·p + col`.
pub fn patchify(sample: &Sample, p: usize) -> Result<Matrix> {
    let s = sample.side;
    if p == 0 || s % p != 0 {
        return Err(Error::InvalidArgument(format!(
            "image side {s} not divisible by patch size {p}"
        )));
    }
    if sample.image.len() != sample.channels * s * s {
        return Err(Error::shape(
            "patchify",
            format!("{} pixels for {}x{s}x{s}", sample.image.len(), sample.channels),
        ));
    }
    let g = s / p;
    let f = p * p * sample.channels;
    let mut out = Matrix::zeros(g * g, f);
    for gy in 0..g {
        for gx in 0..g {
            let row = out.row_mut(gy * g + gx);
            for c in 0..sample.channels {
                for py in 0..p {
                    for px in 0..p {
                        row[c * p * p + py * p + px] = sample.pixel(c, gy * p + py, gx * p + px);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Mean softmax cross-entropy and `∂L/∂logits`.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (b, c) = logits.shape();
    if labels.len() != b || b == 0 {
        return Err(Error::InvalidArgument(format!("{} labels for {b} logit rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidArgument(format!("label {bad} outside 0..{c}")));
    }
    let mut loss = 0.0;
    let mut grad = Matrix::zeros(b, c);
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[y];
        let g = grad.row_mut(i);
        for (j, gj) in g.iter_mut().enumerate() {
            *gj = ((row[j] - lse).exp() - if j == y { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    Ok((loss / b as f64, grad))
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
