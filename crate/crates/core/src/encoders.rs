//! Latent mappings from observations to a low-dimensional space, their
//! losses, and the training loop.
//!
//! Seven learned or fitted models are supported (PCA, AE, beta-VAE, PC-AE,
//! PC-VAE, PC-Siamese, CE-Siamese) plus the raw-observation baseline. The
//! ground-truth [`OracleEncoder`] lives here too; it maps world states, not
//! observations, and is only used to check the downstream pipeline.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{AdamState, Mlp, NnError, Tape, TrainConfig};
use crate::synthgen::DataTuple;
use crate::worlds::{enumerate_states, WorldSpec, WorldState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("model has not been fitted")]
    NotFitted,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch contains no similar pairs")]
    NoSimilarPairsInBatch,
    #[error("cosine similarity undefined for a zero vector")]
    ZeroVector,
    #[error("pairing is not a perfect matching")]
    BadPairing,
    #[error("training diverged at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("state {0} is not a state of this world")]
    UnknownState(WorldState),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    /// Raw observations, no mapping.
    Raw,
    Pca,
    Ae,
    BetaVae,
    PcAe,
    PcVae,
    PcSiamese,
    CeSiamese,
}

impl ModelKind {
    /// The seven latent mapping models, in table order.
    pub const SEVEN: [ModelKind; 7] = [
        ModelKind::Pca,
        ModelKind::Ae,
        ModelKind::BetaVae,
        ModelKind::PcAe,
        ModelKind::PcVae,
        ModelKind::PcSiamese,
        ModelKind::CeSiamese,
    ];

    /// Models with a contrastive term.
    pub const CONTRASTIVE: [ModelKind; 4] = [
        ModelKind::PcAe,
        ModelKind::PcVae,
        ModelKind::PcSiamese,
        ModelKind::CeSiamese,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Raw => "raw",
            ModelKind::Pca => "pca",
            ModelKind::Ae => "ae",
            ModelKind::BetaVae => "bvae",
            ModelKind::PcAe => "pcae",
            ModelKind::PcVae => "pcvae",
            ModelKind::PcSiamese => "pcsia",
            ModelKind::CeSiamese => "cesia",
        }
    }

    /// Label used in report tables.
    pub fn label(self) -> &'static str {
        match self {
            ModelKind::Raw => "Raw obs.",
            ModelKind::Pca => "PCA",
            ModelKind::Ae => "AE",
            ModelKind::BetaVae => "β-VAE",
            ModelKind::PcAe => "PC-AE",
            ModelKind::PcVae => "PC-VAE",
            ModelKind::PcSiamese => "PC-Sia.",
            ModelKind::CeSiamese => "CE-Sia.",
        }
    }

    pub fn is_variational(self) -> bool {
        matches!(self, ModelKind::BetaVae | ModelKind::PcVae)
    }

    pub fn has_decoder(self) -> bool {
        matches!(
            self,
            ModelKind::Ae | ModelKind::BetaVae | ModelKind::PcAe | ModelKind::PcVae
        )
    }

    pub fn is_trainable(self) -> bool {
        !matches!(self, ModelKind::Raw | ModelKind::Pca)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .map(|c| c.to_ascii_lowercase())
            .collect();
        Ok(match norm.as_str() {
            "raw" | "identity" => ModelKind::Raw,
            "pca" => ModelKind::Pca,
            "ae" => ModelKind::Ae,
            "bvae" | "betavae" | "vae" => ModelKind::BetaVae,
            "pcae" => ModelKind::PcAe,
            "pcvae" => ModelKind::PcVae,
            "pcsia" | "pcsiamese" => ModelKind::PcSiamese,
            "cesia" | "cesiamese" => ModelKind::CeSiamese,
            _ => return Err(format!("unknown model kind `{s}`")),
        })
    }
}

/// Distance used inside the pairwise contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PcDistance {
    /// `(sum |z_i - z_j|)^2`
    SquaredL1,
    /// `sum (z_i - z_j)^2`
    SquaredL2,
}

impl PcDistance {
    pub fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            PcDistance::SquaredL1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>().powi(2),
            PcDistance::SquaredL2 => a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum(),
        }
    }

    /// Gradient of the distance with respect to `a` (the gradient for `b` is
    /// its negation).
    fn grad(self, a: &[f64], b: &[f64]) -> Vec<f64> {
        match self {
            PcDistance::SquaredL1 => {
                let l1: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
                a.iter()
                    .zip(b)
                    .map(|(x, y)| {
                        let d = x - y;
                        let sign = if d > 0.0 {
                            1.0
                        } else if d < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        2.0 * l1 * sign
                    })
                    .collect()
            }
            PcDistance::SquaredL2 => a.iter().zip(b).map(|(x, y)| 2.0 * (x - y)).collect(),
        }
    }
}

/// Loss weights, margins and architecture sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyper {
    /// Final PC weight of PC-AE.
    pub alpha: f64,
    /// Final PC weight of PC-VAE.
    pub gamma: f64,
    /// Final KL weight.
    pub beta: f64,
    /// Margin for PC-AE / PC-VAE; `None` measures it on a pretrained AE / beta-VAE.
    pub d_m: Option<f64>,
    /// Margin for PC-Siamese.
    pub d_m_siamese: f64,
    pub tau: f64,
    pub z_dim: usize,
    /// Fraction of epochs over which alpha and gamma ramp up from zero.
    pub ramp_fraction: f64,
    pub distance: PcDistance,
    pub hidden: Vec<usize>,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            alpha: 100.0,
            gamma: 2500.0,
            beta: 1.5,
            d_m: None,
            d_m_siamese: 0.5,
            tau: 0.5,
            z_dim: 12,
            ramp_fraction: 0.25,
            distance: PcDistance::SquaredL1,
            hidden: vec![64, 32],
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: &str| Err(EncoderError::InvalidConfig(m.to_string()));
        if !(self.alpha >= 0.0 && self.gamma >= 0.0 && self.beta >= 0.0) {
            return bad("loss weights must be non-negative");
        }
        if self.d_m.is_some_and(|d| d <= 0.0) || self.d_m_siamese <= 0.0 {
            return bad("margins must be positive");
        }
        if self.tau <= 0.0 {
            return bad("temperature must be positive");
        }
        if self.z_dim == 0 {
            return bad("latent dimension must be positive");
        }
        if !(0.0..=1.0).contains(&self.ramp_fraction) {
            return bad("ramp_fraction must lie in [0, 1]");
        }
        Ok(())
    }

    /// Loss weights in effect at `epoch` of `epochs`.
    pub fn weights_at(&self, kind: ModelKind, epoch: usize, epochs: usize, d_m: f64) -> LossWeights {
        let ramp_len = (self.ramp_fraction * epochs as f64).ceil();
        let ramp = if ramp_len <= 0.0 {
            1.0
        } else {
            (epoch as f64 / ramp_len).min(1.0)
        };
        let beta_ramp = if epochs <= 1 {
            1.0
        } else {
            epoch as f64 / (epochs - 1) as f64
        };
        LossWeights {
            alpha: self.alpha * ramp,
            gamma: self.gamma * ramp,
            beta: self.beta * beta_ramp,
            d_m: if kind == ModelKind::PcSiamese {
                self.d_m_siamese
            } else {
                d_m
            },
            tau: self.tau,
            distance: self.distance,
        }
    }
}

/// Effective loss coefficients for one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub gamma: f64,
    pub beta: f64,
    pub d_m: f64,
    pub tau: f64,
    pub distance: PcDistance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// `z_dim x dim`, row-major, orthonormal rows.
    pub components: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    pub z_dim: usize,
    /// Set when the covariance rank is below `z_dim`; trailing rows are an
    /// arbitrary orthonormal completion.
    pub degenerate: bool,
}

impl PcaModel {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn project(&self, o: &[f64]) -> Vec<f64> {
        let d = self.dim();
        (0..self.z_dim)
            .map(|r| {
                self.components[r * d..(r + 1) * d]
                    .iter()
                    .zip(o.iter().zip(&self.mean))
                    .map(|(c, (x, m))| c * (x - m))
                    .sum()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AutoEncoder {
    pub enc: Mlp,
    pub dec: Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EncoderModel {
    Raw { dim: usize },
    Pca(PcaModel),
    Ae(AutoEncoder),
    BetaVae(AutoEncoder),
    PcAe(AutoEncoder),
    PcVae(AutoEncoder),
    PcSiamese(Mlp),
    CeSiamese(Mlp),
}

impl EncoderModel {
    /// Freshly initialised trainable model (or an empty shell for PCA/raw).
    pub fn init<R: Rng + ?Sized>(
        kind: ModelKind,
        dim: usize,
        hyper: &Hyper,
        rng: &mut R,
    ) -> Result<Self, EncoderError> {
        let z = hyper.z_dim;
        let enc_dims = |out: usize| {
            let mut d = vec![dim];
            d.extend(&hyper.hidden);
            d.push(out);
            d
        };
        let dec_dims = {
            let mut d = vec![z];
            d.extend(hyper.hidden.iter().rev());
            d.push(dim);
            d
        };
        let ae = |rng: &mut R, enc_out: usize| -> Result<AutoEncoder, EncoderError> {
            let enc = Mlp::new_relu(&enc_dims(enc_out), rng)?;
            let dec = Mlp::new_relu(&dec_dims, rng)?;
            Ok(AutoEncoder { enc, dec })
        };
        Ok(match kind {
            ModelKind::Raw => EncoderModel::Raw { dim },
            ModelKind::Pca => EncoderModel::Pca(PcaModel {
                mean: vec![],
                components: vec![],
                eigenvalues: vec![],
                z_dim: z,
                degenerate: false,
            }),
            ModelKind::Ae => EncoderModel::Ae(ae(rng, z)?),
            ModelKind::BetaVae => EncoderModel::BetaVae(ae(rng, 2 * z)?),
            ModelKind::PcAe => EncoderModel::PcAe(ae(rng, z)?),
            ModelKind::PcVae => EncoderModel::PcVae(ae(rng, 2 * z)?),
            ModelKind::PcSiamese => EncoderModel::PcSiamese(Mlp::new_relu(&enc_dims(z), rng)?),
            ModelKind::CeSiamese => EncoderModel::CeSiamese(Mlp::new_relu(&enc_dims(z), rng)?),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            EncoderModel::Raw { .. } => ModelKind::Raw,
            EncoderModel::Pca(_) => ModelKind::Pca,
            EncoderModel::Ae(_) => ModelKind::Ae,
            EncoderModel::BetaVae(_) => ModelKind::BetaVae,
            EncoderModel::PcAe(_) => ModelKind::PcAe,
            EncoderModel::PcVae(_) => ModelKind::PcVae,
            EncoderModel::PcSiamese(_) => ModelKind::PcSiamese,
            EncoderModel::CeSiamese(_) => ModelKind::CeSiamese,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            EncoderModel::Raw { dim } => *dim,
            EncoderModel::Pca(p) => p.dim(),
            EncoderModel::Ae(a)
            | EncoderModel::BetaVae(a)
            | EncoderModel::PcAe(a)
            | EncoderModel::PcVae(a) => a.enc.input_dim(),
            EncoderModel::PcSiamese(n) | EncoderModel::CeSiamese(n) => n.input_dim(),
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            EncoderModel::Raw { dim } => *dim,
            EncoderModel::Pca(p) => p.z_dim,
            EncoderModel::Ae(a) | EncoderModel::PcAe(a) => a.enc.output_dim(),
            EncoderModel::BetaVae(a) | EncoderModel::PcVae(a) => a.enc.output_dim() / 2,
            EncoderModel::PcSiamese(n) | EncoderModel::CeSiamese(n) => n.output_dim(),
        }
    }

    /// Trainable networks, encoder first.
    pub fn nets(&self) -> Vec<&Mlp> {
        match self {
            EncoderModel::Raw { .. } | EncoderModel::Pca(_) => vec![],
            EncoderModel::Ae(a)
            | EncoderModel::BetaVae(a)
            | EncoderModel::PcAe(a)
            | EncoderModel::PcVae(a) => vec![&a.enc, &a.dec],
            EncoderModel::PcSiamese(n) | EncoderModel::CeSiamese(n) => vec![n],
        }
    }

    pub fn nets_mut(&mut self) -> Vec<&mut Mlp> {
        match self {
            EncoderModel::Raw { .. } | EncoderModel::Pca(_) => vec![],
            EncoderModel::Ae(a)
            | EncoderModel::BetaVae(a)
            | EncoderModel::PcAe(a)
            | EncoderModel::PcVae(a) => vec![&mut a.enc, &mut a.dec],
            EncoderModel::PcSiamese(n) | EncoderModel::CeSiamese(n) => vec![n],
        }
    }

    /// All trainable parameters concatenated in [`EncoderModel::nets`] order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.nets().iter().flat_map(|n| n.params().to_vec()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<(), EncoderError> {
        let total: usize = self.nets().iter().map(|n| n.n_params()).sum();
        if total != flat.len() {
            return Err(EncoderError::DimensionMismatch {
                expected: total,
                got: flat.len(),
            });
        }
        let mut off = 0;
        for net in self.nets_mut() {
            let n = net.n_params();
            net.params_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.nets().iter().all(|n| n.is_finite())
    }
}

/// Maps an observation to its latent point. Deterministic for every kind;
/// variational models return the posterior mean.
pub fn encode(model: &EncoderModel, o: &[f64]) -> Result<Vec<f64>, EncoderError> {
    if model.input_dim() == 0 {
        return Err(EncoderError::NotFitted);
    }
    if o.len() != model.input_dim() {
        return Err(EncoderError::DimensionMismatch {
            expected: model.input_dim(),
            got: o.len(),
        });
    }
    Ok(match model {
        EncoderModel::Raw { .. } => o.to_vec(),
        EncoderModel::Pca(p) => p.project(o),
        EncoderModel::Ae(a) | EncoderModel::PcAe(a) => a.enc.predict(o)?,
        EncoderModel::BetaVae(a) | EncoderModel::PcVae(a) => {
            let mut h = a.enc.predict(o)?;
            h.truncate(h.len() / 2);
            h
        }
        EncoderModel::PcSiamese(n) | EncoderModel::CeSiamese(n) => n.predict(o)?,
    })
}

/// Principal directions of `observations`, sorted by descending eigenvalue.
pub fn fit_pca(observations: &[Vec<f64>], z_dim: usize) -> Result<PcaModel, EncoderError> {
    let n = observations.len();
    if n < z_dim + 1 {
        return Err(EncoderError::TooFewSamples {
            needed: z_dim + 1,
            got: n,
        });
    }
    let d = observations[0].len();
    if z_dim > d {
        return Err(EncoderError::DimensionMismatch {
            expected: d,
            got: z_dim,
        });
    }
    let mut mean = vec![0.0; d];
    for o in observations {
        if o.len() != d {
            return Err(EncoderError::DimensionMismatch {
                expected: d,
                got: o.len(),
            });
        }
        for (m, v) in mean.iter_mut().zip(o) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut centred = vec![0.0; d];
    for o in observations {
        for ((c, v), m) in centred.iter_mut().zip(o).zip(&mean) {
            *c = v - m;
        }
        for r in 0..d {
            let cr = centred[r];
            for c in r..d {
                cov[(r, c)] += cr * centred[c];
            }
        }
    }
    for r in 0..d {
        for c in r..d {
            let v = cov[(r, c)] / (n - 1) as f64;
            cov[(r, c)] = v;
            cov[(c, r)] = v;
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let top = eig.eigenvalues[order[0]].max(0.0);
    let mut components = Vec::with_capacity(z_dim * d);
    let mut eigenvalues = Vec::with_capacity(z_dim);
    for &k in order.iter().take(z_dim) {
        let col = eig.eigenvectors.column(k);
        // sign convention: largest-magnitude entry positive
        let pivot = (0..d)
            .max_by(|&a, &b| col[a].abs().total_cmp(&col[b].abs()))
            .expect("non-empty");
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        components.extend(col.iter().map(|v| v * sign));
        eigenvalues.push(eig.eigenvalues[k]);
    }
    let degenerate = eigenvalues[z_dim - 1] <= 1e-12 * top.max(1e-300);
    Ok(PcaModel {
        mean,
        components,
        eigenvalues,
        z_dim,
        degenerate,
    })
}

/// Mean squared error.
pub fn loss_recon(o: &[f64], o_rec: &[f64]) -> f64 {
    o.iter().zip(o_rec).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / o.len() as f64
}

/// Gradient of [`loss_recon`] with respect to `o_rec`.
pub fn loss_recon_grad(o: &[f64], o_rec: &[f64]) -> Vec<f64> {
    let d = o.len() as f64;
    o_rec.iter().zip(o).map(|(r, x)| 2.0 * (r - x) / d).collect()
}

/// KL divergence of `N(mu, exp(logvar))` from the standard normal.
pub fn loss_kl(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(logvar)
        .map(|(m, lv)| m * m + lv.exp() - 1.0 - lv)
        .sum::<f64>()
}

/// Gradients of [`loss_kl`] with respect to `mu` and `logvar`.
pub fn loss_kl_grad(mu: &[f64], logvar: &[f64]) -> (Vec<f64>, Vec<f64>) {
    (mu.to_vec(), logvar.iter().map(|lv| 0.5 * (lv.exp() - 1.0)).collect())
}

/// Pairwise contrastive loss: pull similar pairs together, push action
/// pairs at least `d_m` apart.
pub fn loss_pc(z_i: &[f64], z_j: &[f64], s: u8, d_m: f64, distance: PcDistance) -> f64 {
    let d = distance.eval(z_i, z_j);
    if s == 1 {
        d
    } else {
        (d_m - d).max(0.0)
    }
}

/// Loss and gradient with respect to `z_i` (the `z_j` gradient is the negation).
pub fn loss_pc_grad(
    z_i: &[f64],
    z_j: &[f64],
    s: u8,
    d_m: f64,
    distance: PcDistance,
) -> (f64, Vec<f64>) {
    let d = distance.eval(z_i, z_j);
    if s == 1 {
        (d, distance.grad(z_i, z_j))
    } else if d_m - d > 0.0 {
        (d_m - d, distance.grad(z_i, z_j).into_iter().map(|g| -g).collect())
    } else {
        (0.0, vec![0.0; z_i.len()])
    }
}

fn cosine_units(batch: &[Vec<f64>]) -> Result<(Vec<Vec<f64>>, Vec<f64>), EncoderError> {
    let mut units = Vec::with_capacity(batch.len());
    let mut norms = Vec::with_capacity(batch.len());
    for z in batch {
        let n = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 || !n.is_finite() {
            return Err(EncoderError::ZeroVector);
        }
        units.push(z.iter().map(|v| v / n).collect());
        norms.push(n);
    }
    Ok((units, norms))
}

/// Normalised temperature-scaled cross-entropy over a batch of `2N` latent
/// points; `pairing[i]` is the index of `i`'s positive. Returns the mean
/// over all anchors and the gradient for every batch element.
pub fn loss_ntxent(
    batch: &[Vec<f64>],
    pairing: &[usize],
    tau: f64,
) -> Result<(f64, Vec<Vec<f64>>), EncoderError> {
    let n = batch.len();
    if n < 2 || !n.is_multiple_of(2) || pairing.len() != n {
        return Err(EncoderError::BadPairing);
    }
    for (i, &p) in pairing.iter().enumerate() {
        if p >= n || p == i || pairing[p] != i {
            return Err(EncoderError::BadPairing);
        }
    }
    let (units, norms) = cosine_units(batch)?;
    let sim = |a: usize, b: usize| -> f64 { units[a].iter().zip(&units[b]).map(|(x, y)| x * y).sum() };
    let mut s = vec![0.0; n * n];
    for a in 0..n {
        for b in a + 1..n {
            let v = sim(a, b);
            s[a * n + b] = v;
            s[b * n + a] = v;
        }
    }
    // coeff[i][k] = d loss_i / d S_ik
    let mut coeff = vec![0.0; n * n];
    let mut total = 0.0;
    for i in 0..n {
        let logits: Vec<(usize, f64)> = (0..n).filter(|&k| k != i).map(|k| (k, s[i * n + k] / tau)).collect();
        let max = logits.iter().map(|&(_, l)| l).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = logits.iter().map(|&(_, l)| (l - max).exp()).sum();
        let lse = max + denom.ln();
        total += lse - s[i * n + pairing[i]] / tau;
        for &(k, l) in &logits {
            let p = (l - max).exp() / denom;
            let target = if k == pairing[i] { 1.0 } else { 0.0 };
            coeff[i * n + k] = (p - target) / tau;
        }
    }
    let scale = 1.0 / n as f64;
    let dim = batch[0].len();
    let mut grads = Vec::with_capacity(n);
    for i in 0..n {
        let mut g_unit = vec![0.0; dim];
        for k in 0..n {
            if k == i {
                continue;
            }
            let c = (coeff[i * n + k] + coeff[k * n + i]) * scale;
            for (g, u) in g_unit.iter_mut().zip(&units[k]) {
                *g += c * u;
            }
        }
        let radial: f64 = g_unit.iter().zip(&units[i]).map(|(g, u)| g * u).sum();
        grads.push(
            g_unit
                .iter()
                .zip(&units[i])
                .map(|(g, u)| (g - radial * u) / norms[i])
                .collect(),
        );
    }
    Ok((total * scale, grads))
}

/// Batch loss and per-network gradients (in [`EncoderModel::nets`] order).
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grads: Vec<Vec<f64>>,
}

struct AeForward {
    enc_tape: Tape,
    dec_tape: Tape,
    /// Deterministic code (AE latent or posterior mean).
    code: Vec<f64>,
    logvar: Vec<f64>,
    recon: Vec<f64>,
}

fn ae_forward(ae: &AutoEncoder, o: &[f64], variational: bool, eps: &[f64]) -> Result<AeForward, EncoderError> {
    let (h, enc_tape) = ae.enc.forward(o)?;
    let (code, logvar, sample) = if variational {
        let z = h.len() / 2;
        let mu = h[..z].to_vec();
        let lv = h[z..].to_vec();
        let sample = (0..z).map(|k| mu[k] + (0.5 * lv[k]).exp() * eps[k]).collect();
        (mu, lv, sample)
    } else {
        (h.clone(), vec![], h)
    };
    let (recon, dec_tape) = ae.dec.forward(&sample)?;
    Ok(AeForward {
        enc_tape,
        dec_tape,
        code,
        logvar,
        recon,
    })
}

/// Loss of one AE / beta-VAE branch: recon + beta * KL.
fn ae_branch_loss(f: &AeForward, o: &[f64], variational: bool, beta: f64) -> f64 {
    let mut l = loss_recon(o, &f.recon);
    if variational {
        l += beta * loss_kl(&f.code, &f.logvar);
    }
    l
}

/// Backpropagates `scale * (recon + beta * KL)` plus an extra gradient on
/// the deterministic code.
#[allow(clippy::too_many_arguments)]
fn ae_backward(
    ae: &AutoEncoder,
    f: &AeForward,
    o: &[f64],
    variational: bool,
    beta: f64,
    eps: &[f64],
    scale: f64,
    code_grad: Option<&[f64]>,
    acc_enc: &mut [f64],
    acc_dec: &mut [f64],
) -> Result<(), EncoderError> {
    let g_rec: Vec<f64> = loss_recon_grad(o, &f.recon).iter().map(|g| scale * g).collect();
    let g_sample = ae.dec.backward_into(&f.dec_tape, &g_rec, acc_dec)?;
    let z = f.code.len();
    let mut g_h = if variational {
        let (g_mu, g_lv) = loss_kl_grad(&f.code, &f.logvar);
        let mut g = vec![0.0; 2 * z];
        for k in 0..z {
            let sigma = (0.5 * f.logvar[k]).exp();
            g[k] = g_sample[k] + scale * beta * g_mu[k];
            g[z + k] = g_sample[k] * eps[k] * 0.5 * sigma + scale * beta * g_lv[k];
        }
        g
    } else {
        g_sample
    };
    if let Some(cg) = code_grad {
        for (g, c) in g_h.iter_mut().zip(cg) {
            *g += c;
        }
    }
    ae.enc.backward_into(&f.enc_tape, &g_h, acc_enc)?;
    Ok(())
}

/// Mean batch loss of `model` and its gradients.
///
/// `eps` holds the reparameterisation noise for variational models, one
/// vector per observation (`2 * t` for `o_i` of tuple `t`, `2 * t + 1` for
/// `o_j`); it is ignored by the other kinds.
pub fn composite_loss(
    batch: &[&DataTuple],
    model: &EncoderModel,
    w: &LossWeights,
    eps: &[Vec<f64>],
) -> Result<LossGrad, EncoderError> {
    if batch.is_empty() {
        return Err(EncoderError::EmptyBatch);
    }
    let kind = model.kind();
    match model {
        EncoderModel::Raw { .. } | EncoderModel::Pca(_) => Err(EncoderError::InvalidConfig(format!(
            "{kind} has no gradient-based loss"
        ))),
        EncoderModel::Ae(ae) | EncoderModel::BetaVae(ae) | EncoderModel::PcAe(ae) | EncoderModel::PcVae(ae) => {
            let variational = kind.is_variational();
            if variational && eps.len() < 2 * batch.len() {
                return Err(EncoderError::DimensionMismatch {
                    expected: 2 * batch.len(),
                    got: eps.len(),
                });
            }
            let pc_weight = match kind {
                ModelKind::PcAe => w.alpha,
                ModelKind::PcVae => w.gamma,
                _ => 0.0,
            };
            let with_pc = matches!(kind, ModelKind::PcAe | ModelKind::PcVae);
            let beta = if variational { w.beta } else { 0.0 };
            let scale = 1.0 / batch.len() as f64;
            let mut g_enc = vec![0.0; ae.enc.n_params()];
            let mut g_dec = vec![0.0; ae.dec.n_params()];
            let mut total = 0.0;
            let none: Vec<f64> = vec![];
            for (t, tuple) in batch.iter().enumerate() {
                let (eps_i, eps_j) = if variational {
                    (&eps[2 * t], &eps[2 * t + 1])
                } else {
                    (&none, &none)
                };
                let fi = ae_forward(ae, &tuple.o_i, variational, eps_i)?;
                let fj = ae_forward(ae, &tuple.o_j, variational, eps_j)?;
                total += 0.5 * (ae_branch_loss(&fi, &tuple.o_i, variational, beta)
                    + ae_branch_loss(&fj, &tuple.o_j, variational, beta));
                let (cg_i, cg_j) = if with_pc {
                    let (l, g) = loss_pc_grad(&fi.code, &fj.code, tuple.s, w.d_m, w.distance);
                    total += pc_weight * l;
                    let gi: Vec<f64> = g.iter().map(|v| v * pc_weight * scale).collect();
                    let gj: Vec<f64> = gi.iter().map(|v| -v).collect();
                    (Some(gi), Some(gj))
                } else {
                    (None, None)
                };
                ae_backward(ae, &fi, &tuple.o_i, variational, beta, eps_i, 0.5 * scale, cg_i.as_deref(), &mut g_enc, &mut g_dec)?;
                ae_backward(ae, &fj, &tuple.o_j, variational, beta, eps_j, 0.5 * scale, cg_j.as_deref(), &mut g_enc, &mut g_dec)?;
            }
            Ok(LossGrad {
                loss: total * scale,
                grads: vec![g_enc, g_dec],
            })
        }
        EncoderModel::PcSiamese(net) => {
            let scale = 1.0 / batch.len() as f64;
            let mut g = vec![0.0; net.n_params()];
            let mut total = 0.0;
            for tuple in batch {
                let (zi, ti) = net.forward(&tuple.o_i)?;
                let (zj, tj) = net.forward(&tuple.o_j)?;
                let (l, gz) = loss_pc_grad(&zi, &zj, tuple.s, w.d_m, w.distance);
                total += l;
                if l == 0.0 && tuple.s == 0 {
                    continue;
                }
                let gi: Vec<f64> = gz.iter().map(|v| v * scale).collect();
                let gj: Vec<f64> = gi.iter().map(|v| -v).collect();
                net.backward_into(&ti, &gi, &mut g)?;
                net.backward_into(&tj, &gj, &mut g)?;
            }
            Ok(LossGrad {
                loss: total * scale,
                grads: vec![g],
            })
        }
        EncoderModel::CeSiamese(net) => {
            let pairs: Vec<&&DataTuple> = batch.iter().filter(|t| t.is_similar()).collect();
            if pairs.is_empty() {
                return Err(EncoderError::NoSimilarPairsInBatch);
            }
            let mut zs = Vec::with_capacity(2 * pairs.len());
            let mut tapes = Vec::with_capacity(2 * pairs.len());
            let mut pairing = Vec::with_capacity(2 * pairs.len());
            for (p, t) in pairs.iter().enumerate() {
                for o in [&t.o_i, &t.o_j] {
                    let (z, tape) = net.forward(o)?;
                    zs.push(z);
                    tapes.push(tape);
                }
                pairing.push(2 * p + 1);
                pairing.push(2 * p);
            }
            let (loss, gz) = loss_ntxent(&zs, &pairing, w.tau)?;
            let mut g = vec![0.0; net.n_params()];
            for (tape, gzk) in tapes.iter().zip(&gz) {
                net.backward_into(tape, gzk, &mut g)?;
            }
            Ok(LossGrad { loss, grads: vec![g] })
        }
    }
}

/// Mean contrastive distance over the action pairs (non-augmented, `s = 0`).
pub fn measure_action_distance(
    model: &EncoderModel,
    tuples: &[DataTuple],
    distance: PcDistance,
) -> Result<f64, EncoderError> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for t in tuples.iter().filter(|t| t.s == 0 && !t.augmented) {
        let zi = encode(model, &t.o_i)?;
        let zj = encode(model, &t.o_j)?;
        sum += distance.eval(&zi, &zj);
        count += 1;
    }
    if count == 0 {
        return Err(EncoderError::TooFewSamples { needed: 1, got: 0 });
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean per-tuple loss of each epoch (per-anchor for CE-Siamese).
    pub epoch_loss: Vec<f64>,
    /// Margin used by the PC term, when there is one.
    pub d_m: Option<f64>,
}

fn sample_eps(rng: &mut ChaCha8Rng, count: usize, z: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| (0..z).map(|_| rng.sample(StandardNormal)).collect())
        .collect()
}

/// Fits or trains a model of `kind` on `tuples`.
///
/// Training never sees ground-truth states: it takes tuples, not datasets.
pub fn train(
    kind: ModelKind,
    tuples: &[DataTuple],
    cfg: &TrainConfig,
    hyper: &Hyper,
) -> Result<(EncoderModel, TrainHistory), EncoderError> {
    cfg.validate().map_err(EncoderError::InvalidConfig)?;
    hyper.validate()?;
    if tuples.is_empty() {
        return Err(EncoderError::EmptyBatch);
    }
    let dim = tuples[0].o_i.len();
    match kind {
        ModelKind::Raw => return Ok((EncoderModel::Raw { dim }, TrainHistory::default())),
        ModelKind::Pca => {
            let obs: Vec<Vec<f64>> = tuples
                .iter()
                .filter(|t| !t.augmented)
                .flat_map(|t| [t.o_i.clone(), t.o_j.clone()])
                .collect();
            let pca = fit_pca(&obs, hyper.z_dim)?;
            return Ok((EncoderModel::Pca(pca), TrainHistory::default()));
        }
        _ => {}
    }

    let d_m = match kind {
        ModelKind::PcAe | ModelKind::PcVae => match hyper.d_m {
            Some(d) => d,
            None => {
                let base = if kind == ModelKind::PcAe {
                    ModelKind::Ae
                } else {
                    ModelKind::BetaVae
                };
                let (pre, _) = train(base, tuples, cfg, hyper)?;
                measure_action_distance(&pre, tuples, hyper.distance)?
            }
        },
        _ => hyper.d_m_siamese,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = EncoderModel::init(kind, dim, hyper, &mut rng)?;
    let mut adams: Vec<AdamState> = model
        .nets()
        .iter()
        .map(|n| AdamState::new(n.n_params(), cfg.lr))
        .collect();

    let pool: Vec<usize> = if kind == ModelKind::CeSiamese {
        (0..tuples.len()).filter(|&i| tuples[i].is_similar()).collect()
    } else {
        (0..tuples.len()).collect()
    };
    if pool.is_empty() {
        return Err(EncoderError::NoSimilarPairsInBatch);
    }
    let batch_len = if kind == ModelKind::CeSiamese {
        (cfg.batch_size / 2).max(1)
    } else {
        cfg.batch_size
    };
    let z = hyper.z_dim;
    let mut history = TrainHistory {
        epoch_loss: Vec::with_capacity(cfg.epochs),
        d_m: matches!(kind, ModelKind::PcAe | ModelKind::PcVae | ModelKind::PcSiamese).then_some(d_m),
    };
    let mut order = pool;
    for epoch in 0..cfg.epochs {
        let w = hyper.weights_at(kind, epoch, cfg.epochs, d_m);
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(batch_len) {
            let batch: Vec<&DataTuple> = chunk.iter().map(|&i| &tuples[i]).collect();
            let eps = if kind.is_variational() {
                sample_eps(&mut rng, 2 * batch.len(), z)
            } else {
                vec![]
            };
            let lg = composite_loss(&batch, &model, &w, &eps)?;
            if !lg.loss.is_finite() {
                return Err(EncoderError::Diverged { epoch });
            }
            sum += lg.loss * batch.len() as f64;
            for ((net, adam), g) in model.nets_mut().into_iter().zip(&mut adams).zip(&lg.grads) {
                adam.step(net.params_mut(), g)?;
            }
        }
        if !model.is_finite() {
            return Err(EncoderError::Diverged { epoch });
        }
        history.epoch_loss.push(sum / order.len() as f64);
    }
    Ok((model, history))
}

/// Ground-truth mapping from world states to one-hot latent points.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleEncoder {
    pub spec: WorldSpec,
    states: Vec<WorldState>,
    dim: usize,
}

impl OracleEncoder {
    /// One-hot embedding in `max(z_dim, #states)` dimensions.
    pub fn new(spec: &WorldSpec, z_dim: usize) -> Self {
        let states = enumerate_states(spec);
        let dim = z_dim.max(states.len());
        OracleEncoder {
            spec: *spec,
            states,
            dim,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn oracle_encode<R: Rng + ?Sized>(
        &self,
        state: WorldState,
        noise_scale: f64,
        rng: &mut R,
    ) -> Result<Vec<f64>, EncoderError> {
        let idx = self
            .states
            .binary_search(&state)
            .map_err(|_| EncoderError::UnknownState(state))?;
        let mut z = vec![0.0; self.dim];
        z[idx] = 1.0;
        if noise_scale > 0.0 {
            for v in &mut z {
                *v += noise_scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(z)
    }
}

/// Anything that can place an observation in a latent space for evaluation.
///
/// Learned models only look at the observation; the oracle looks only at the
/// ground-truth state, which evaluation code takes from the sidecar.
pub trait Embedder {
    fn embed(&self, obs: &[f64], state: WorldState, rng: &mut ChaCha8Rng) -> Result<Vec<f64>, EncoderError>;
}

impl Embedder for EncoderModel {
    fn embed(&self, obs: &[f64], _state: WorldState, _rng: &mut ChaCha8Rng) -> Result<Vec<f64>, EncoderError> {
        encode(self, obs)
    }
}

/// Oracle encoder with isotropic Gaussian perturbation.
#[derive(Debug, Clone)]
pub struct NoisyOracle {
    pub oracle: OracleEncoder,
    pub noise_scale: f64,
}

impl Embedder for NoisyOracle {
    fn embed(&self, _obs: &[f64], state: WorldState, rng: &mut ChaCha8Rng) -> Result<Vec<f64>, EncoderError> {
        self.oracle.oracle_encode(state, self.noise_scale, rng)
    }
}
