//! Multi-head self-attention with an elementwise score mask.
//!
//! Per head `h`, with `d_k = D / H`:
//!
//! ```text
//! A_h = Q_h K_hᵀ / √d_k
//! B_h = A_h ∘ M_h
//! O_h = softmax_rows(B_h) V_h
//! out = concat_h(O_h) W_o + b_o
//! ```
//!
//! With [`MaskPlacement::PostSoftmax`] the mask multiplies the softmax output
//! instead (no renormalization).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{kernel_grads_from_tied, tie_offsets, unfold_mask, GaussianKernel};
use crate::numerics::{matmul, matmul_nt, matmul_tn, softmax_rows, softmax_rows_backward, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskPlacement {
    #[default]
    PreSoftmax,
    PostSoftmax,
}

/// Mixture-mask parameters for one attention block, stored flat as
/// `[slot][kernel][α, σ]` so the optimizer sees one contiguous tensor.
/// There is one slot per head, or a single slot shared by every head.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmParams {
    pub grid_side: usize,
    pub epsilon: f64,
    pub slots: usize,
    pub kernels_per_slot: usize,
    pub values: Vec<f64>,
}

impl GmmParams {
    pub fn from_kernels(grid_side: usize, epsilon: f64, slots: &[Vec<GaussianKernel>]) -> Result<Self> {
        let k = slots.first().map_or(0, |s| s.len());
        if slots.is_empty() || slots.iter().any(|s| s.len() != k) {
            return Err(Error::InvalidArgument(
                "mixture slots must be non-empty and hold equal kernel counts".into(),
            ));
        }
        let values = slots
            .iter()
            .flat_map(|s| s.iter().flat_map(|k| [k.alpha, k.sigma]))
            .collect();
        Ok(GmmParams {
            grid_side,
            epsilon,
            slots: slots.len(),
            kernels_per_slot: k,
            values,
        })
    }

    pub fn slot_kernels(&self, slot: usize) -> Vec<GaussianKernel> {
        let stride = 2 * self.kernels_per_slot;
        self.values[slot * stride..(slot + 1) * stride]
            .chunks_exact(2)
            .map(|p| GaussianKernel::new(p[0], p[1]))
            .collect()
    }

    fn slot_for_head(&self, head: usize) -> usize {
        if self.slots == 1 {
            0
        } else {
            head
        }
    }
}

/// Where a block's mask comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum MaskParams {
    None,
    Gmm(GmmParams),
    /// One dense `N × N` mask shared by every head.
    Elm(Matrix),
}

impl MaskParams {
    pub fn param_count(&self) -> usize {
        match self {
            MaskParams::None => 0,
            MaskParams::Gmm(g) => g.values.len(),
            MaskParams::Elm(m) => m.rows() * m.cols(),
        }
    }

    fn zeros_like(&self) -> Self {
        match self {
            MaskParams::None => MaskParams::None,
            MaskParams::Gmm(g) => MaskParams::Gmm(GmmParams {
                values: vec![0.0; g.values.len()],
                ..g.clone()
            }),
            MaskParams::Elm(m) => MaskParams::Elm(Matrix::zeros(m.rows(), m.cols())),
        }
    }

    fn as_slice(&self) -> Option<&[f64]> {
        match self {
            MaskParams::None => None,
            MaskParams::Gmm(g) => Some(&g.values),
            MaskParams::Elm(m) => Some(m.as_slice()),
        }
    }

    fn as_mut_slice(&mut self) -> Option<&mut [f64]> {
        match self {
            MaskParams::None => None,
            MaskParams::Gmm(g) => Some(&mut g.values),
            MaskParams::Elm(m) => Some(m.as_mut_slice()),
        }
    }

    fn shape(&self) -> Vec<usize> {
        match self {
            MaskParams::None => vec![],
            MaskParams::Gmm(g) => vec![g.slots, g.kernels_per_slot, 2],
            MaskParams::Elm(m) => vec![m.rows(), m.cols()],
        }
    }

    /// Per-head masks for a sequence of `n` tokens; `None` when unmasked.
    pub fn head_masks(&self, heads: usize, n: usize) -> Result<Option<Vec<Matrix>>> {
        match self {
            MaskParams::None => Ok(None),
            MaskParams::Gmm(g) => {
                if g.grid_side * g.grid_side != n {
                    return Err(Error::shape(
                        "attention_forward",
                        format!("{}x{} mask grid for {n} tokens", g.grid_side, g.grid_side),
                    ));
                }
                if g.slots != 1 && g.slots != heads {
                    return Err(Error::shape(
                        "attention_forward",
                        format!("{} mask slots for {heads} heads", g.slots),
                    ));
                }
                let slot_masks = (0..g.slots)
                    .map(|s| unfold_mask(&g.slot_kernels(s), g.grid_side, g.epsilon))
                    .collect::<Result<Vec<_>>>()?;
                Ok(Some(
                    (0..heads)
                        .map(|h| slot_masks[g.slot_for_head(h)].clone())
                        .collect(),
                ))
            }
            MaskParams::Elm(m) => {
                if m.shape() != (n, n) {
                    return Err(Error::shape(
                        "attention_forward",
                        format!("element-wise mask {:?} for {n} tokens", m.shape()),
                    ));
                }
                Ok(Some(vec![m.clone(); heads]))
            }
        }
    }
}

/// Name, shape and decay flag of one learnable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub decay: bool,
}

/// Projection weights and mask of one attention block. The same type holds
/// gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub heads: usize,
    pub placement: MaskPlacement,
    pub wq: Matrix,
    pub bq: Vec<f64>,
    pub wk: Matrix,
    pub bk: Vec<f64>,
    pub wv: Matrix,
    pub bv: Vec<f64>,
    pub wo: Matrix,
    pub bo: Vec<f64>,
    pub mask: MaskParams,
}

impl AttentionWeights {
    /// Weights drawn from `N(0, std²)`, zero biases, pre-softmax placement.
    pub fn random(dim: usize, heads: usize, std: f64, mask: MaskParams, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "embedding dim {dim} not divisible by {heads} heads"
            )));
        }
        let mut mat = || Matrix::from_fn(dim, dim, |_, _| rng.normal(0.0, std));
        let (wq, wk, wv, wo) = (mat(), mat(), mat(), mat());
        Ok(AttentionWeights {
            heads,
            placement: MaskPlacement::PreSoftmax,
            wq,
            bq: vec![0.0; dim],
            wk,
            bk: vec![0.0; dim],
            wv,
            bv: vec![0.0; dim],
            wo,
            bo: vec![0.0; dim],
            mask,
        })
    }

    pub fn dim(&self) -> usize {
        self.wq.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    pub fn zeros_like(&self) -> Self {
        let d = self.dim();
        AttentionWeights {
            heads: self.heads,
            placement: self.placement,
            wq: Matrix::zeros(d, d),
            bq: vec![0.0; d],
            wk: Matrix::zeros(d, d),
            bk: vec![0.0; d],
            wv: Matrix::zeros(d, d),
            bv: vec![0.0; d],
            wo: Matrix::zeros(d, d),
            bo: vec![0.0; d],
            mask: self.mask.zeros_like(),
        }
    }

    pub fn tensor_infos(&self, prefix: &str) -> Vec<TensorInfo> {
        let d = self.dim();
        let mut out = Vec::new();
        for name in ["q", "k", "v", "o"] {
            out.push(TensorInfo {
                name: format!("{prefix}w{name}"),
                shape: vec![d, d],
                decay: true,
            });
            out.push(TensorInfo {
                name: format!("{prefix}b{name}"),
                shape: vec![d],
                decay: false,
            });
        }
        match &self.mask {
            MaskParams::None => {}
            MaskParams::Gmm(_) => out.push(TensorInfo {
                name: format!("{prefix}gmm"),
                shape: self.mask.shape(),
                decay: false,
            }),
            MaskParams::Elm(_) => out.push(TensorInfo {
                name: format!("{prefix}elm"),
                shape: self.mask.shape(),
                decay: false,
            }),
        }
        out
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![
            self.wq.as_slice(),
            &self.bq,
            self.wk.as_slice(),
            &self.bk,
            self.wv.as_slice(),
            &self.bv,
            self.wo.as_slice(),
            &self.bo,
        ];
        out.extend(self.mask.as_slice());
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.wq.as_mut_slice(),
            &mut self.bq,
            self.wk.as_mut_slice(),
            &mut self.bk,
            self.wv.as_mut_slice(),
            &mut self.bv,
            self.wo.as_mut_slice(),
            &mut self.bo,
        ];
        out.extend(self.mask.as_mut_slice());
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// `(Q, K, V)` as full `N × D` matrices; head `h` owns columns
/// `[h·d_k, (h+1)·d_k)`.
pub fn qkv_project(x: &Matrix, w: &AttentionWeights) -> Result<(Matrix, Matrix, Matrix)> {
    if x.cols() != w.dim() {
        return Err(Error::shape(
            "qkv_project",
            format!("input has {} features, weights expect {}", x.cols(), w.dim()),
        ));
    }
    let project = |wm: &Matrix, b: &[f64]| -> Result<Matrix> {
        let mut out = matmul(x, wm)?;
        out.add_row_vector(b)?;
        Ok(out)
    };
    Ok((project(&w.wq, &w.bq)?, project(&w.wk, &w.bk)?, project(&w.wv, &w.bv)?))
}

/// `Q Kᵀ / √d_k`.
pub fn scores(q: &Matrix, k: &Matrix, head_dim: usize) -> Result<Matrix> {
    let scale = 1.0 / (head_dim as f64).sqrt();
    Ok(matmul_nt(q, k)?.scale(scale))
}

/// Elementwise `A ∘ M`.
pub fn apply_mask(a: &Matrix, m: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(Error::shape("apply_mask", format!("scores {:?} not square", a.shape())));
    }
    a.hadamard(m)
}

#[derive(Debug, Clone)]
struct HeadTrace {
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Pre-mask scores `A`.
    scores: Matrix,
    mask: Option<Matrix>,
    /// Softmax output.
    probs: Matrix,
    /// Rows actually multiplied into `V` (probs, or probs ∘ M after softmax).
    weights: Matrix,
}

/// Activations cached by [`attention_forward`].
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    x: Matrix,
    concat: Matrix,
    heads: Vec<HeadTrace>,
    placement: MaskPlacement,
    mask_kind: u8,
}

impl AttentionTrace {
    pub fn tokens(&self) -> usize {
        self.x.rows()
    }

    pub fn scores(&self, head: usize) -> &Matrix {
        &self.heads[head].scores
    }

    /// Masked scores `B` (equal to `A` when unmasked or masked after softmax).
    pub fn masked_scores(&self, head: usize) -> Matrix {
        let h = &self.heads[head];
        match (&h.mask, self.placement) {
            (Some(m), MaskPlacement::PreSoftmax) => h.scores.hadamard(m).expect("trace shapes"),
            _ => h.scores.clone(),
        }
    }

    pub fn probs(&self, head: usize) -> &Matrix {
        &self.heads[head].probs
    }

    pub fn mask(&self, head: usize) -> Option<&Matrix> {
        self.heads[head].mask.as_ref()
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }
}

fn mask_kind(m: &MaskParams) -> u8 {
    match m {
        MaskParams::None => 0,
        MaskParams::Gmm(_) => 1,
        MaskParams::Elm(_) => 2,
    }
}

pub fn attention_forward(x: &Matrix, w: &AttentionWeights) -> Result<(Matrix, AttentionTrace)> {
    let masks = w.mask.head_masks(w.heads, x.rows())?;
    attention_forward_with_masks(x, w, masks.as_deref())
}

/// [`attention_forward`] with the per-head masks already built by
/// [`MaskParams::head_masks`], so a batch can share them.
pub fn attention_forward_with_masks(
    x: &Matrix,
    w: &AttentionWeights,
    masks: Option<&[Matrix]>,
) -> Result<(Matrix, AttentionTrace)> {
    let n = x.rows();
    let dk = w.head_dim();
    if masks.is_some() == matches!(w.mask, MaskParams::None)
        || masks.is_some_and(|ms| ms.len() != w.heads || ms.iter().any(|m| m.shape() != (n, n)))
    {
        return Err(Error::shape(
            "attention_forward",
            format!("precomputed masks do not fit {} heads and {n} tokens", w.heads),
        ));
    }
    let (q, k, v) = qkv_project(x, w)?;

    let mut concat = Matrix::zeros(n, w.dim());
    let mut heads = Vec::with_capacity(w.heads);
    for h in 0..w.heads {
        let (qh, kh, vh) = (
            q.column_block(h * dk, dk),
            k.column_block(h * dk, dk),
            v.column_block(h * dk, dk),
        );
        let a = scores(&qh, &kh, dk)?;
        let mask = masks.map(|ms| ms[h].clone());
        let (probs, weights) = match (&mask, w.placement) {
            (None, _) => {
                let p = softmax_rows(&a);
                (p.clone(), p)
            }
            (Some(m), MaskPlacement::PreSoftmax) => {
                let p = softmax_rows(&apply_mask(&a, m)?);
                (p.clone(), p)
            }
            (Some(m), MaskPlacement::PostSoftmax) => {
                let p = softmax_rows(&a);
                let weighted = p.hadamard(m)?;
                (p, weighted)
            }
        };
        let oh = matmul(&weights, &vh)?;
        concat.set_column_block(h * dk, &oh);
        heads.push(HeadTrace {
            q: qh,
            k: kh,
            v: vh,
            scores: a,
            mask,
            probs,
            weights,
        });
    }
    let mut out = matmul(&concat, &w.wo)?;
    out.add_row_vector(&w.bo)?;
    Ok((
        out,
        AttentionTrace {
            x: x.clone(),
            concat,
            heads,
            placement: w.placement,
            mask_kind: mask_kind(&w.mask),
        },
    ))
}

/// Backward pass; returns `(∂L/∂x, ∂L/∂weights)` for upstream `∂L/∂out`.
pub fn attention_backward(
    w: &AttentionWeights,
    trace: &AttentionTrace,
    upstream: &Matrix,
) -> Result<(Matrix, AttentionWeights)> {
    let n = trace.tokens();
    let d = w.dim();
    if upstream.shape() != (n, d)
        || trace.x.cols() != d
        || trace.heads.len() != w.heads
        || trace.placement != w.placement
        || trace.mask_kind != mask_kind(&w.mask)
    {
        return Err(Error::Trace(format!(
            "trace for {} tokens x {} features / {} heads does not match weights ({d} features, {} heads) and upstream {:?}",
            n,
            trace.x.cols(),
            trace.heads.len(),
            w.heads,
            upstream.shape()
        )));
    }
    let dk = w.head_dim();
    let inv_sqrt = 1.0 / (dk as f64).sqrt();
    let mut grads = w.zeros_like();

    grads.wo = matmul_tn(&trace.concat, upstream)?;
    grads.bo = upstream.column_sums();
    let d_concat = matmul_nt(upstream, &w.wo)?;

    let mut dq = Matrix::zeros(n, d);
    let mut dk_full = Matrix::zeros(n, d);
    let mut dv = Matrix::zeros(n, d);
    let mut d_masks: Vec<Matrix> = Vec::new();

    for (h, ht) in trace.heads.iter().enumerate() {
        let doh = d_concat.column_block(h * dk, dk);
        let dvh = matmul_tn(&ht.weights, &doh)?;
        let d_weights = matmul_nt(&doh, &ht.v)?;
        let da = match (&ht.mask, trace.placement) {
            (None, _) => softmax_rows_backward(&ht.probs, &d_weights)?,
            (Some(m), MaskPlacement::PreSoftmax) => {
                let db = softmax_rows_backward(&ht.probs, &d_weights)?;
                d_masks.push(db.hadamard(&ht.scores)?);
                db.hadamard(m)?
            }
            (Some(m), MaskPlacement::PostSoftmax) => {
                d_masks.push(d_weights.hadamard(&ht.probs)?);
                softmax_rows_backward(&ht.probs, &d_weights.hadamard(m)?)?
            }
        };
        let dqh = matmul(&da, &ht.k)?.scale(inv_sqrt);
        let dkh = matmul_tn(&da, &ht.q)?.scale(inv_sqrt);
        dq.set_column_block(h * dk, &dqh);
        dk_full.set_column_block(h * dk, &dkh);
        dv.set_column_block(h * dk, &dvh);
    }

    match (&w.mask, &mut grads.mask) {
        (MaskParams::Gmm(p), MaskParams::Gmm(g)) => {
            let mut slot_up: Vec<Option<Matrix>> = vec![None; p.slots];
            for (h, dm) in d_masks.into_iter().enumerate() {
                let s = p.slot_for_head(h);
                match &mut slot_up[s] {
                    Some(acc) => acc.add_assign(&dm)?,
                    slot @ None => *slot = Some(dm),
                }
            }
            let stride = 2 * p.kernels_per_slot;
            for (s, up) in slot_up.into_iter().enumerate() {
                let Some(up) = up else { continue };
                let tied = tie_offsets(&up, p.grid_side)?;
                let kg = kernel_grads_from_tied(&p.slot_kernels(s), p.grid_side, p.epsilon, &tied);
                for (i, kgi) in kg.iter().enumerate() {
                    g.values[s * stride + 2 * i] = kgi.d_alpha;
                    g.values[s * stride + 2 * i + 1] = kgi.d_sigma;
                }
            }
        }
        (MaskParams::Elm(_), MaskParams::Elm(g)) => {
            for dm in &d_masks {
                g.add_assign(dm)?;
            }
        }
        _ => {}
    }

    grads.wq = matmul_tn(&trace.x, &dq)?;
    grads.bq = dq.column_sums();
    grads.wk = matmul_tn(&trace.x, &dk_full)?;
    grads.bk = dk_full.column_sums();
    grads.wv = matmul_tn(&trace.x, &dv)?;
    grads.bv = dv.column_sums();

    let mut dx = matmul_nt(&dq, &w.wq)?;
    dx.add_assign(&matmul_nt(&dk_full, &w.wk)?)?;
    dx.add_assign(&matmul_nt(&dv, &w.wv)?)?;
    Ok((dx, grads))
}
