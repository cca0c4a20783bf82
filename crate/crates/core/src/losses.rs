//! Reconstruction, KL, classification, embedding and joint losses, with the
//! gradients the model's backward pass needs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{log_sum_exp, softmax, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconKind {
    Mse,
    Bce,
    L1,
}

impl ReconKind {
    #[inline]
    fn elementwise(self, a: f64, b: f64) -> f64 {
        match self {
            ReconKind::Mse => (a - b) * (a - b),
            ReconKind::L1 => (a - b).abs(),
            ReconKind::Bce => {
                // Saturated sigmoid outputs round to exactly 0 or 1.
                let b = b.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
                -(a * b.ln() + (1.0 - a) * (1.0 - b).ln())
            }
        }
    }
}

/// Loss terms of one evaluation, averaged the same way throughout.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl: f64,
    pub embed: f64,
    pub classification: f64,
    pub joint: f64,
}

impl LossBreakdown {
    pub fn new(recon: f64, kl: f64, classification: f64) -> Self {
        let embed = recon + kl;
        Self {
            recon,
            kl,
            embed,
            classification,
            joint: embed + classification,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.recon, self.kl, self.embed, self.classification, self.joint]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn check_recon_inputs(x: &[Vec<f64>], x_prime: &[Vec<f64>], kind: ReconKind) -> Result<()> {
    if x.is_empty() || x.len() != x_prime.len() {
        return Err(Error::dim("recon_loss (omics count)", x.len(), x_prime.len()));
    }
    for (k, (a, b)) in x.iter().zip(x_prime).enumerate() {
        if a.len() != b.len() || a.is_empty() {
            return Err(Error::dim(format!("recon_loss (omics {k})"), a.len(), b.len()));
        }
        if kind == ReconKind::Bce {
            if let Some(v) = a.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Domain(format!("bce target {v} outside [0, 1] (omics {k})")));
            }
            if let Some(v) = b.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
                return Err(Error::Domain(format!("bce prediction {v} outside (0, 1) (omics {k})")));
            }
        }
    }
    Ok(())
}

/// Mean element-wise loss per omics type, then mean over omics types.
pub fn recon_loss(x: &[Vec<f64>], x_prime: &[Vec<f64>], kind: ReconKind) -> Result<f64> {
    check_recon_inputs(x, x_prime, kind)?;
    let per_omics: f64 = x
        .iter()
        .zip(x_prime)
        .map(|(a, b)| a.iter().zip(b).map(|(&p, &q)| kind.elementwise(p, q)).sum::<f64>() / a.len() as f64)
        .sum();
    Ok(per_omics / x.len() as f64)
}

/// Closed-form KL(N(mu, diag sigma^2) || N(0, I)), summed over dimensions.
pub fn kl_divergence(mu: &[f64], sigma: &[f64]) -> Result<f64> {
    if mu.len() != sigma.len() {
        return Err(Error::dim("kl_divergence", mu.len(), sigma.len()));
    }
    if let Some(s) = sigma.iter().find(|s| !(**s > 0.0)) {
        return Err(Error::Domain(format!("sigma must be positive, got {s}")));
    }
    Ok(mu
        .iter()
        .zip(sigma)
        .map(|(&m, &s)| {
            let var = s * s;
            0.5 * (m * m + var - 1.0 - var.ln())
        })
        .sum())
}

/// KL term parameterized by log-variance, as the encoder emits it.
pub fn kl_from_logvar(mu: &[f64], logvar: &[f64]) -> f64 {
    mu.iter()
        .zip(logvar)
        .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum()
}

/// Cross-entropy of softmax(logits) against `label`, via log-sum-exp.
pub fn classification_loss(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::Index {
            what: "classes",
            index: label,
            len: logits.len(),
        });
    }
    Ok(log_sum_exp(logits) - logits[label])
}

/// Gradient of [`classification_loss`] with respect to the logits.
pub fn classification_grad(logits: &[f64], label: usize) -> Vec<f64> {
    let mut g = softmax(logits);
    g[label] -= 1.0;
    g
}

pub fn embedding_loss(
    x: &[Vec<f64>],
    x_prime: &[Vec<f64>],
    mu: &[f64],
    sigma: &[f64],
    kind: ReconKind,
) -> Result<f64> {
    Ok(recon_loss(x, x_prime, kind)? + kl_divergence(mu, sigma)?)
}

/// Mean of per-subset embedding losses plus the classification loss.
pub fn joint_loss(embed_per_subset: &[f64], classification: f64) -> Result<f64> {
    if embed_per_subset.is_empty() {
        return Err(Error::Validation("joint loss needs at least one subset embedding loss".into()));
    }
    Ok(embed_per_subset.iter().sum::<f64>() / embed_per_subset.len() as f64 + classification)
}

/// Batched reconstruction loss over sample-major matrices.
///
/// `targets[k]` optionally restricts omics `k` to a feature subset (the
/// subset-only comparison mode); the mean then runs over those features.
/// Returns per-sample losses and the gradient with respect to `x_prime`, or
/// with respect to the pre-sigmoid outputs when `kind` is `Bce`.
pub fn recon_loss_batch(
    x: &[Matrix],
    x_prime: &[Matrix],
    kind: ReconKind,
    targets: Option<&[&[usize]]>,
) -> Result<(Vec<f64>, Vec<Matrix>)> {
    if x.len() != x_prime.len() || x.is_empty() {
        return Err(Error::dim("recon_loss_batch (omics count)", x.len(), x_prime.len()));
    }
    let rows = x[0].rows();
    let omics_count = x.len() as f64;
    let mut losses = vec![0.0; rows];
    let mut grads = Vec::with_capacity(x.len());
    for (k, (a, b)) in x.iter().zip(x_prime).enumerate() {
        if a.shape() != b.shape() || a.rows() != rows {
            return Err(Error::dim(
                format!("recon_loss_batch (omics {k})"),
                format!("{:?}", a.shape()),
                format!("{:?}", b.shape()),
            ));
        }
        let all: Vec<usize>;
        let feats: &[usize] = match targets {
            Some(t) => t[k],
            None => {
                all = (0..a.cols()).collect();
                &all
            }
        };
        let scale = 1.0 / (feats.len() as f64 * omics_count);
        let mut g = Matrix::zeros(a.rows(), a.cols());
        for r in 0..rows {
            let (ar, br) = (a.row(r), b.row(r));
            let gr = g.row_mut(r);
            let mut sum = 0.0;
            for &f in feats {
                let (t, p) = (ar[f], br[f]);
                sum += kind.elementwise(t, p);
                gr[f] = scale
                    * match kind {
                        ReconKind::Mse => 2.0 * (p - t),
                        ReconKind::L1 => {
                            if p > t {
                                1.0
                            } else if p < t {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                        ReconKind::Bce => p - t,
                    };
            }
            losses[r] += sum * scale;
        }
        grads.push(g);
    }
    Ok((losses, grads))
}
