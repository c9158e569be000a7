//! Gaussian mixture masks and the element-wise learnable mask baseline.
//!
//! A mixture of `K` kernels `(α_k, σ_k)` assigns every grid offset `(x, y)`
//! the value
//!
//! ```text
//! W(x, y) = Σ_k α_k · exp(−(x² + y²) / (2σ_k² + ε))
//! ```
//!
//! On a `g × g` patch grid the offsets span `(−g, g)` per axis, so the weight
//! matrix has side `2g − 1` with its center at `(g − 1, g − 1)`. Unfolding
//! maps patch pair `(i, j)` to offset `(|i mod g − j mod g|, |i div g − j div g|)`
//! and yields the `N × N` attention mask, `N = g²`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

/// Default ε added to `2σ²`.
pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianKernel {
    pub alpha: f64,
    /// Enters only as `σ²`; negative values are legal.
    pub sigma: f64,
}

impl GaussianKernel {
    pub const fn new(alpha: f64, sigma: f64) -> Self {
        GaussianKernel { alpha, sigma }
    }

    #[inline]
    fn denom(&self, epsilon: f64) -> f64 {
        2.0 * self.sigma * self.sigma + epsilon
    }

    /// Value of this single kernel at squared distance `d2`.
    #[inline]
    pub fn value(&self, d2: f64, epsilon: f64) -> f64 {
        self.alpha * (-d2 / self.denom(epsilon)).exp()
    }
}

/// Mixture value at squared offset distance `d2`, summed over kernels in order.
#[inline]
pub fn mixture_value(kernels: &[GaussianKernel], d2: f64, epsilon: f64) -> f64 {
    let mut acc = 0.0;
    for k in kernels {
        acc += k.value(d2, epsilon);
    }
    acc
}

/// Parameters of the normal distributions used to draw fresh kernels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelInit {
    pub mean_alpha: f64,
    pub std_alpha: f64,
    pub mean_sigma: f64,
    pub std_sigma: f64,
}

impl Default for KernelInit {
    fn default() -> Self {
        KernelInit {
            mean_alpha: 0.0,
            std_alpha: 2.0,
            mean_sigma: 10.0,
            std_sigma: 10.0,
        }
    }
}

/// Draws `k` kernels; each kernel takes its α draw, then its σ draw.
pub fn init_kernels(rng: &mut Rng, k: usize, init: KernelInit) -> Vec<GaussianKernel> {
    (0..k)
        .map(|_| {
            let alpha = rng.normal(init.mean_alpha, init.std_alpha);
            let sigma = rng.normal(init.mean_sigma, init.std_sigma);
            GaussianKernel { alpha, sigma }
        })
        .collect()
}

/// Absolute grid offset between two patches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct OffsetPair {
    pub dx: usize,
    pub dy: usize,
}

impl OffsetPair {
    #[inline]
    pub fn squared_distance(&self) -> f64 {
        (self.dx * self.dx + self.dy * self.dy) as f64
    }
}

#[inline]
fn offset_unchecked(i: usize, j: usize, g: usize) -> OffsetPair {
    OffsetPair {
        dx: (i % g).abs_diff(j % g),
        dy: (i / g).abs_diff(j / g),
    }
}

/// Offset between patch `i` and patch `j` on a `g × g` grid.
pub fn offset_of(i: usize, j: usize, g: usize) -> Result<OffsetPair> {
    let n = g * g;
    if g == 0 || i >= n || j >= n {
        return Err(Error::Index(format!(
            "patch pair ({i}, {j}) outside a {g}x{g} grid"
        )));
    }
    Ok(offset_unchecked(i, j, g))
}

fn check_grid(g: usize) -> Result<()> {
    if g == 0 {
        return Err(Error::InvalidArgument("grid side must be >= 1".into()));
    }
    Ok(())
}

/// `(2g − 1) × (2g − 1)` table of mixture values indexed by signed offset;
/// row is the vertical offset, column the horizontal one.
pub fn weight_matrix(kernels: &[GaussianKernel], g: usize, epsilon: f64) -> Result<Matrix> {
    check_grid(g)?;
    let side = 2 * g - 1;
    let c = (g - 1) as isize;
    Ok(Matrix::from_fn(side, side, |r, col| {
        let y = (r as isize - c).unsigned_abs();
        let x = (col as isize - c).unsigned_abs();
        mixture_value(kernels, (x * x + y * y) as f64, epsilon)
    }))
}

/// Mixture value for each non-negative offset, indexed `[dy * g + dx]`.
fn offset_table(kernels: &[GaussianKernel], g: usize, epsilon: f64) -> Vec<f64> {
    let mut table = Vec::with_capacity(g * g);
    for dy in 0..g {
        for dx in 0..g {
            table.push(mixture_value(kernels, (dx * dx + dy * dy) as f64, epsilon));
        }
    }
    table
}

/// The `N × N` mask, `N = g²`.
pub fn unfold_mask(kernels: &[GaussianKernel], g: usize, epsilon: f64) -> Result<Matrix> {
    check_grid(g)?;
    let table = offset_table(kernels, g, epsilon);
    let n = g * g;
    Ok(Matrix::from_fn(n, n, |i, j| {
        let off = offset_unchecked(i, j, g);
        table[off.dy * g + off.dx]
    }))
}

/// Gradient of a scalar loss with respect to one kernel.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KernelGrad {
    pub d_alpha: f64,
    pub d_sigma: f64,
}

/// Sums an `N × N` upstream gradient over entries sharing each offset,
/// indexed `[dy * g + dx]`.
pub fn tie_offsets(upstream: &Matrix, g: usize) -> Result<Vec<f64>> {
    let n = g * g;
    if upstream.shape() != (n, n) {
        return Err(Error::shape(
            "tie_offsets",
            format!("upstream {:?} for a {g}x{g} grid", upstream.shape()),
        ));
    }
    let mut tied = vec![0.0; n];
    for i in 0..n {
        for (j, &u) in upstream.row(i).iter().enumerate() {
            let off = offset_unchecked(i, j, g);
            tied[off.dy * g + off.dx] += u;
        }
    }
    Ok(tied)
}

/// Analytic `(∂L/∂α_k, ∂L/∂σ_k)` given `∂L/∂M` for the unfolded mask.
///
/// With `u = 2σ² + ε` and `d² = x² + y²`:
/// `∂M/∂α = exp(−d²/u)` and `∂M/∂σ = α·exp(−d²/u)·d²·4σ/u²`.
pub fn mask_param_grads(
    kernels: &[GaussianKernel],
    g: usize,
    epsilon: f64,
    upstream: &Matrix,
) -> Result<Vec<KernelGrad>> {
    check_grid(g)?;
    let tied = tie_offsets(upstream, g)?;
    Ok(kernel_grads_from_tied(kernels, g, epsilon, &tied))
}

pub(crate) fn kernel_grads_from_tied(
    kernels: &[GaussianKernel],
    g: usize,
    epsilon: f64,
    tied: &[f64],
) -> Vec<KernelGrad> {
    kernels
        .iter()
        .map(|k| {
            let u = k.denom(epsilon);
            let mut grad = KernelGrad::default();
            for dy in 0..g {
                for dx in 0..g {
                    let up = tied[dy * g + dx];
                    let d2 = (dx * dx + dy * dy) as f64;
                    let e = (-d2 / u).exp();
                    grad.d_alpha += up * e;
                    grad.d_sigma += up * k.alpha * e * d2 * 4.0 * k.sigma / (u * u);
                }
            }
            grad
        })
        .collect()
}

/// Learnable mask parameters added by mixture masks: `2·K·H·L`.
pub fn gmm_param_count(kernels: usize, heads: usize, layers: usize) -> usize {
    2 * kernels * heads * layers
}

/// Learnable mask parameters added by one `N × N` element-wise mask per layer.
pub fn elm_param_count(patches: usize, layers: usize) -> usize {
    layers * patches * patches
}

/// Per-layer, per-head kernel sets sharing one ε and grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmMaskBank {
    grid_side: usize,
    epsilon: f64,
    /// `[layer][head][kernel]`
    kernels: Vec<Vec<Vec<GaussianKernel>>>,
}

impl GmmMaskBank {
    pub fn new(
        grid_side: usize,
        epsilon: f64,
        kernels: Vec<Vec<Vec<GaussianKernel>>>,
    ) -> Result<Self> {
        check_grid(grid_side)?;
        if !(epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!("epsilon {epsilon} must be > 0")));
        }
        let k = kernels
            .first()
            .and_then(|l| l.first())
            .map_or(0, |h| h.len());
        let heads = kernels.first().map_or(0, |l| l.len());
        for layer in &kernels {
            if layer.len() != heads || layer.iter().any(|h| h.len() != k) {
                return Err(Error::InvalidArgument(
                    "every (layer, head) slot must hold the same number of kernels".into(),
                ));
            }
        }
        Ok(GmmMaskBank {
            grid_side,
            epsilon,
            kernels,
        })
    }

    /// Draws every slot from `init`, layer-major then head-major.
    pub fn sample(
        rng: &mut Rng,
        layers: usize,
        heads: usize,
        k: usize,
        grid_side: usize,
        epsilon: f64,
        init: KernelInit,
    ) -> Result<Self> {
        let kernels = (0..layers)
            .map(|_| (0..heads).map(|_| init_kernels(rng, k, init)).collect())
            .collect();
        GmmMaskBank::new(grid_side, epsilon, kernels)
    }

    pub fn layers(&self) -> usize {
        self.kernels.len()
    }

    pub fn heads(&self) -> usize {
        self.kernels.first().map_or(0, |l| l.len())
    }

    pub fn kernels_per_head(&self) -> usize {
        self.kernels
            .first()
            .and_then(|l| l.first())
            .map_or(0, |h| h.len())
    }

    pub fn grid_side(&self) -> usize {
        self.grid_side
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn kernels(&self, layer: usize, head: usize) -> &[GaussianKernel] {
        &self.kernels[layer][head]
    }

    pub fn kernels_mut(&mut self, layer: usize, head: usize) -> &mut Vec<GaussianKernel> {
        &mut self.kernels[layer][head]
    }

    pub fn mask(&self, layer: usize, head: usize) -> Result<Matrix> {
        unfold_mask(self.kernels(layer, head), self.grid_side, self.epsilon)
    }

    pub fn param_count(&self) -> usize {
        gmm_param_count(self.kernels_per_head(), self.heads(), self.layers())
    }
}

/// Dense `N × N` learnable mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementwiseMask {
    values: Matrix,
}

impl ElementwiseMask {
    pub fn new(n: usize, init_value: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("element-wise mask side must be >= 1".into()));
        }
        Ok(ElementwiseMask {
            values: Matrix::filled(n, n, init_value),
        })
    }

    pub fn from_matrix(values: Matrix) -> Result<Self> {
        if !values.is_square() || values.rows() == 0 {
            return Err(Error::shape(
                "ElementwiseMask",
                format!("mask must be square and non-empty, got {:?}", values.shape()),
            ));
        }
        Ok(ElementwiseMask { values })
    }

    pub fn side(&self) -> usize {
        self.values.rows()
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Matrix {
        &mut self.values
    }

    pub fn param_count(&self) -> usize {
        self.side() * self.side()
    }
}

/// All-ones element-wise mask, the identity for multiplicative masking.
pub fn elm_new(n: usize) -> Result<ElementwiseMask> {
    ElementwiseMask::new(n, 1.0)
}

/// Side `g` of a square patch grid with `n = g²` cells.
pub fn grid_side_for(n: usize) -> Result<usize> {
    let g = (n as f64).sqrt().round() as usize;
    if g == 0 || g * g != n {
        return Err(Error::InvalidArgument(format!(
            "{n} patches do not form a square grid"
        )));
    }
    Ok(g)
}
