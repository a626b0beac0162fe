//! Objective terms: the pairwise equivariance loss, reconstructions, the
//! equivariant code Φ, the supervised head loss, and RBF-kernel MMD.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::lie_group::GroupLookup;
use crate::nn::Mlp;
use crate::tensor::Tensor;

/// Points beyond which the median heuristic works on a fixed subsample.
pub const MEDIAN_SUBSAMPLE: usize = 2000;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    /// V-statistic, includes the diagonal; never negative.
    #[default]
    Biased,
    /// U-statistic, excludes the diagonal.
    Unbiased,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bandwidth {
    /// Median pooled pairwise distance, recomputed per call and treated as
    /// a constant for differentiation.
    #[default]
    Median,
    Fixed(f64),
}

/// RBF kernel `exp(−‖x − y‖² / (2σ²))` settings.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub bandwidth: Bandwidth,
    pub estimator: Estimator,
}

impl KernelConfig {
    pub fn fixed(sigma: f64) -> Self {
        KernelConfig {
            bandwidth: Bandwidth::Fixed(sigma),
            estimator: Estimator::Biased,
        }
    }

    pub fn unbiased(self) -> Self {
        KernelConfig {
            estimator: Estimator::Unbiased,
            ..self
        }
    }

    /// σ for the pooled rows of `batches`.
    pub fn sigma(&self, batches: &[&Tensor]) -> Result<f64> {
        match self.bandwidth {
            Bandwidth::Fixed(s) if s > 0.0 && s.is_finite() => Ok(s),
            Bandwidth::Fixed(s) => Err(Error::Config(format!("kernel bandwidth must be positive, got {s}"))),
            Bandwidth::Median => Ok(median_heuristic(batches)),
        }
    }
}

/// Median Euclidean distance over distinct pooled pairs. Falls back to 1
/// when every point coincides. Large pools use an evenly strided subsample
/// so the result stays deterministic.
pub fn median_heuristic(batches: &[&Tensor]) -> f64 {
    let total: usize = batches.iter().map(|b| b.rows()).sum();
    let stride = total.div_ceil(MEDIAN_SUBSAMPLE).max(1);
    let rows: Vec<&[f64]> = batches
        .iter()
        .flat_map(|b| (0..b.rows()).map(move |r| b.row_slice(r)))
        .step_by(stride)
        .collect();
    let mut d = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d.push(sq_dist(rows[i], rows[j]));
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    let med = m.sqrt();
    if med > 0.0 && med.is_finite() {
        med
    } else {
        1.0
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_sizes(n1: usize, n2: usize, est: Estimator) -> Result<()> {
    let min = match est {
        Estimator::Biased => 1,
        Estimator::Unbiased => 2,
    };
    if n1 < min || n2 < min {
        return Err(Error::Contract(format!(
            "{est:?} MMD needs at least {min} samples per batch, got {n1} and {n2}"
        )));
    }
    Ok(())
}

/// Mean of the kernel matrix between `a` and `b`, optionally dropping the
/// diagonal (only meaningful when `a` and `b` are the same batch).
fn kernel_mean(g: &mut Graph, a: Var, b: Var, sigma: f64, drop_diag: bool) -> Result<Var> {
    let d = g.sq_dists(a, b)?;
    let s = g.scale(d, -1.0 / (2.0 * sigma * sigma));
    let k = g.exp(s);
    if !drop_diag {
        return g.mean(k);
    }
    let n = g.value(a).rows() as f64;
    let total = g.sum(k);
    // Each diagonal entry is exp(0) = 1.
    let diag = g.constant(Tensor::scalar(-n));
    let off = g.add(total, diag)?;
    Ok(g.scale(off, 1.0 / (n * (n - 1.0))))
}

/// Squared MMD between two batches of codes with a given σ.
pub fn mmd2_with_sigma(g: &mut Graph, z1: Var, z2: Var, sigma: f64, est: Estimator) -> Result<Var> {
    let (n1, n2) = (g.value(z1).rows(), g.value(z2).rows());
    check_sizes(n1, n2, est)?;
    let unbiased = est == Estimator::Unbiased;
    let kxx = kernel_mean(g, z1, z1, sigma, unbiased)?;
    let kyy = kernel_mean(g, z2, z2, sigma, unbiased)?;
    let kxy = kernel_mean(g, z1, z2, sigma, false)?;
    let within = g.add(kxx, kyy)?;
    let cross = g.scale(kxy, 2.0);
    g.sub(within, cross)
}

pub fn mmd2(g: &mut Graph, z1: Var, z2: Var, cfg: &KernelConfig) -> Result<Var> {
    let sigma = cfg.sigma(&[g.value(z1), g.value(z2)])?;
    mmd2_with_sigma(g, z1, z2, sigma, cfg.estimator)
}

/// Mean of pairwise MMD² over all unordered site pairs, with one σ for the
/// pooled codes of every site.
pub fn mmd_multisite(g: &mut Graph, codes_by_site: &[Var], cfg: &KernelConfig) -> Result<Var> {
    if codes_by_site.len() < 2 {
        return Err(Error::Contract(format!(
            "multi-site MMD needs at least 2 sites, got {}",
            codes_by_site.len()
        )));
    }
    let sigma = {
        let views: Vec<&Tensor> = codes_by_site.iter().map(|&v| g.value(v)).collect();
        cfg.sigma(&views)?
    };
    let mut terms = Vec::new();
    for i in 0..codes_by_site.len() {
        for j in i + 1..codes_by_site.len() {
            terms.push(mmd2_with_sigma(g, codes_by_site[i], codes_by_site[j], sigma, cfg.estimator)?);
        }
    }
    let count = terms.len() as f64;
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(g.scale(acc, 1.0 / count))
}

/// Graph-free MMD² accumulated row by row, for evaluation sets too large
/// to hold a kernel matrix.
pub fn mmd2_value(x: &Tensor, y: &Tensor, sigma: f64, est: Estimator) -> Result<f64> {
    check_sizes(x.rows(), y.rows(), est)?;
    if x.cols() != y.cols() {
        return Err(Error::dim("mmd2_value", x.cols(), y.cols()));
    }
    let gamma = 1.0 / (2.0 * sigma * sigma);
    let within = |a: &Tensor| -> f64 {
        let n = a.rows();
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += (-gamma * sq_dist(a.row_slice(i), a.row_slice(j))).exp();
            }
        }
        let n = n as f64;
        match est {
            Estimator::Biased => (2.0 * off + n) / (n * n),
            Estimator::Unbiased => 2.0 * off / (n * (n - 1.0)),
        }
    };
    let mut cross = 0.0;
    for i in 0..x.rows() {
        for j in 0..y.rows() {
            cross += (-gamma * sq_dist(x.row_slice(i), y.row_slice(j))).exp();
        }
    }
    cross /= (x.rows() * y.rows()) as f64;
    Ok(within(x) + within(y) - 2.0 * cross)
}

/// Graph-free counterpart of [`mmd_multisite`].
pub fn mmd_multisite_value(codes_by_site: &[Tensor], cfg: &KernelConfig) -> Result<f64> {
    if codes_by_site.len() < 2 {
        return Err(Error::Contract(format!(
            "multi-site MMD needs at least 2 sites, got {}",
            codes_by_site.len()
        )));
    }
    let views: Vec<&Tensor> = codes_by_site.iter().collect();
    let sigma = cfg.sigma(&views)?;
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..codes_by_site.len() {
        for j in i + 1..codes_by_site.len() {
            total += mmd2_value(&codes_by_site[i], &codes_by_site[j], sigma, cfg.estimator)?;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Paired samples for the equivariance loss: row k of `xi` pairs with row
/// k of `xj`; covariates are already on the normalized scale.
#[derive(Clone, Debug)]
pub struct PairBatch {
    pub xi: Tensor,
    pub ci: Vec<f64>,
    pub xj: Tensor,
    pub cj: Vec<f64>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.ci.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ci.is_empty()
    }

    fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Contract("equivariance loss on an empty pair batch".into()));
        }
        let p = self.len();
        if self.cj.len() != p || self.xi.rows() != p || self.xj.rows() != p {
            return Err(Error::dim(
                "pair batch",
                p,
                format!("{}/{}/{}", self.cj.len(), self.xi.rows(), self.xj.rows()),
            ));
        }
        Ok(())
    }
}

/// Equivariance loss on already computed τ rows (`P×n²` each):
/// mean over pairs of ‖𝒢(i,j)τᵢ − τⱼ‖² + ‖𝒢(i,j)ᵀτⱼ − τᵢ‖².
pub fn stage1_loss_from_tau(
    g: &mut Graph,
    tau_i: Var,
    tau_j: Var,
    ci: &[f64],
    cj: &[f64],
    lookup: &mut GroupLookup,
) -> Result<Var> {
    let n = lookup.n();
    let p = ci.len();
    if p == 0 {
        return Err(Error::Contract("equivariance loss on an empty pair batch".into()));
    }
    if cj.len() != p || g.value(tau_i).shape() != (p, n * n) || g.value(tau_j).shape() != (p, n * n) {
        return Err(Error::dim(
            "stage1_loss",
            format!("{p}x{}", n * n),
            format!("{:?}/{:?}", g.value(tau_i).shape(), g.value(tau_j).shape()),
        ));
    }
    let mut fwd = Tensor::zeros(p, n * n);
    let mut bwd = Tensor::zeros(p, n * n);
    for k in 0..p {
        let rot = lookup.get(ci[k], cj[k])?.matrix();
        fwd.row_slice_mut(k).copy_from_slice(rot.data());
        bwd.row_slice_mut(k).copy_from_slice(rot.transpose().data());
    }
    let gf = g.constant(fwd);
    let gb = g.constant(bwd);
    let moved_i = g.rows_matmul(gf, tau_i, n)?;
    let r1 = g.sub(moved_i, tau_j)?;
    let moved_j = g.rows_matmul(gb, tau_j, n)?;
    let r2 = g.sub(moved_j, tau_i)?;
    let a = g.frobenius_sq(r1);
    let b = g.frobenius_sq(r2);
    let s = g.add(a, b)?;
    Ok(g.scale(s, 1.0 / p as f64))
}

/// Equivariance loss through the encoder and τ networks (both trainable).
pub fn stage1_loss(
    g: &mut Graph,
    pairs: &PairBatch,
    encoder: &Mlp,
    tau: &Mlp,
    lookup: &mut GroupLookup,
) -> Result<Var> {
    pairs.validate()?;
    let p = pairs.len();
    let mut stacked = pairs.xi.data().to_vec();
    stacked.extend_from_slice(pairs.xj.data());
    let x = g.constant(Tensor::from_vec(2 * p, pairs.xi.cols(), stacked)?);
    let l = encoder.forward(g, x, true)?;
    let t = tau.forward(g, l, true)?;
    let ti = g.select_rows(t, &(0..p).collect::<Vec<_>>())?;
    let tj = g.select_rows(t, &(p..2 * p).collect::<Vec<_>>())?;
    stage1_loss_from_tau(g, ti, tj, &pairs.ci, &pairs.cj, lookup)
}

/// Mean over rows of ‖x − x̂‖².
pub fn mean_sq_error(g: &mut Graph, x: Var, xhat: Var) -> Result<Var> {
    let rows = g.value(x).rows();
    if rows == 0 {
        return Err(Error::Contract("reconstruction loss on an empty batch".into()));
    }
    let diff = g.sub(x, xhat)?;
    let s = g.frobenius_sq(diff);
    Ok(g.scale(s, 1.0 / rows as f64))
}

/// Input-space reconstruction ‖X − 𝔇(𝔈(X))‖², averaged over the batch.
pub fn recon_x_loss(g: &mut Graph, x: Var, encoder: &Mlp, decoder: &Mlp, trainable: bool) -> Result<Var> {
    let l = encoder.forward(g, x, trainable)?;
    let xhat = decoder.forward(g, l, trainable)?;
    mean_sq_error(g, x, xhat)
}

/// Φ(ℓ) = R·b(Rᵀℓ) for given per-row rotations `rot` (`B×n²`).
pub fn phi_with_rotations(g: &mut Graph, l: Var, rot: Var, b: &Mlp, b_trainable: bool) -> Result<Var> {
    let n = g.value(l).cols();
    let u = g.rows_matvec(rot, l, n, true)?;
    let bu = b.forward(g, u, b_trainable)?;
    g.rows_matvec(rot, bu, n, false)
}

/// Φ(ℓ) = τ(ℓ)·b(τ(ℓ)ᵀℓ), the inverse taken as a transpose.
pub fn phi(g: &mut Graph, l: Var, tau: &Mlp, b: &Mlp, tau_trainable: bool, b_trainable: bool) -> Result<Var> {
    let rot = tau.forward(g, l, tau_trainable)?;
    phi_with_rotations(g, l, rot, b, b_trainable)
}

/// The second-stage terms for one batch.
#[derive(Clone, Copy, Debug)]
pub struct Stage2Terms {
    pub phi: Var,
    /// Mean ‖ℓ − Ψ(Φ)‖².
    pub recon: Var,
    /// Mean (Y − h(Φ))².
    pub pred: Var,
}

/// Builds Φ, the latent reconstruction and the prediction loss for a batch
/// of latents `l` (`B×n`) with labels `y` in {0, 1}. τ is frozen unless
/// `tau_trainable`.
#[allow(clippy::too_many_arguments)]
pub fn stage2_terms(
    g: &mut Graph,
    l: Var,
    y: &[f64],
    tau: &Mlp,
    b: &Mlp,
    psi: &Mlp,
    head: &Mlp,
    tau_trainable: bool,
) -> Result<Stage2Terms> {
    let rows = g.value(l).rows();
    if y.len() != rows {
        return Err(Error::dim("stage2_loss labels", rows, y.len()));
    }
    let phi = phi(g, l, tau, b, tau_trainable, true)?;
    let lhat = psi.forward(g, phi, true)?;
    let recon = mean_sq_error(g, l, lhat)?;
    let pred_out = head.forward(g, phi, true)?;
    let yv = g.constant(Tensor::from_vec(rows, 1, y.to_vec())?);
    let pred = mean_sq_error(g, yv, pred_out)?;
    Ok(Stage2Terms { phi, recon, pred })
}

/// Unweighted stage-two objective: reconstruction plus prediction.
pub fn stage2_loss(g: &mut Graph, l: Var, y: &[f64], tau: &Mlp, b: &Mlp, psi: &Mlp, head: &Mlp) -> Result<Var> {
    let t = stage2_terms(g, l, y, tau, b, psi, head, false)?;
    g.add(t.recon, t.pred)
}
