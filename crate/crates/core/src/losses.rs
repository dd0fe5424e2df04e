//! Training objectives other than the smoothness penalty.
//!
//! All logarithms are natural. The distribution-level functions
//! ([`entropy`], [`cross_entropy`]) take probabilities and use the clamped
//! tape `log`. The network-level losses read the log-softmax outputs carried
//! by [`BatchOutputs`] instead, which equal `ln p` wherever `p ≥ 1e-12` but
//! keep a non-zero gradient when a head saturates below the clamp floor.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::featio::Domain;
use crate::network::BatchOutputs;

/// Weights of the adversarial-adaptation objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Spatial-level domain loss weight.
    pub lambda_s: f64,
    /// Relation-level domain loss weight.
    pub lambda_r: f64,
    /// Temporal-level domain loss weight.
    pub lambda_t: f64,
    /// Attentive entropy weight.
    pub lambda_ae: f64,
    /// Conditional entropy on target predictions; 0 disables it.
    pub lambda_ce: f64,
    /// Peak gradient reversal strength.
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_s: 0.5,
            lambda_r: 0.5,
            lambda_t: 0.5,
            lambda_ae: 0.1,
            lambda_ce: 0.0,
            beta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_s, self.lambda_r, self.lambda_t, self.lambda_ae, self.lambda_ce, self.beta];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }

    /// All adaptation terms off: plain source classification.
    pub fn source_only() -> Self {
        LossWeights {
            lambda_s: 0.0,
            lambda_r: 0.0,
            lambda_t: 0.0,
            lambda_ae: 0.0,
            lambda_ce: 0.0,
            ..Default::default()
        }
    }
}

fn check_distribution(p: &Tensor, what: &str) -> Result<()> {
    if p.rank() != 2 {
        return Err(Error::contract(format!("{what} must be [n, k], got {:?}", p.shape())));
    }
    for (i, row) in p.rows().enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::contract(format!("{what} row {i} sums to {s}")));
        }
    }
    Ok(())
}

/// Per-row entropy `-Σ p ln p` of a `[n, k]` distribution.
pub fn entropy<'t>(p: Var<'t>) -> Result<Var<'t>> {
    check_distribution(&p.value(), "entropy input")?;
    Ok(p.mul(p.log())?.sum_axis(1)?.neg())
}

/// Per-row `-Σ p ln p` given `p` and its log.
pub(crate) fn entropy_from_log<'t>(p: Var<'t>, log_p: Var<'t>) -> Result<Var<'t>> {
    check_distribution(&p.value(), "entropy input")?;
    Ok(p.mul(log_p)?.sum_axis(1)?.neg())
}

/// Per-row `-log_p[label]` on log-probabilities.
pub(crate) fn cross_entropy_from_log<'t>(log_p: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    Ok(pick(log_p, labels)?.neg())
}

/// `ln p[i, labels[i]]` per row.
fn log_likelihood<'t>(p: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    pick(p.log(), labels)
}

/// `x[i, labels[i]]` per row.
fn pick<'t>(p: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let shape = p.shape();
    let (n, k) = (shape[0], shape[1]);
    if labels.len() != n {
        return Err(Error::contract(format!("{} labels for {n} rows", labels.len())));
    }
    let mut onehot = Tensor::zeros(vec![n, k]);
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::contract(format!("label {l} at row {i} outside [0, {k})")));
        }
        onehot.data_mut()[i * k + l] = 1.0;
    }
    p.mul(p.tape().constant(onehot))?.sum_axis(1)
}

/// Per-row `-ln p[label]`.
pub fn cross_entropy_rows<'t>(p: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    check_distribution(&p.value(), "cross-entropy input")?;
    Ok(log_likelihood(p, labels)?.neg())
}

/// Mean over rows of `-ln p[label]`.
pub fn cross_entropy<'t>(p: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    Ok(cross_entropy_rows(p, labels)?.mean())
}

/// Per-sample weighted discriminator cross-entropy
/// `λ_s L_sd^i + λ_r L_rd^i + λ_t L_td^i`. Spatial and relation terms average
/// over the sample's frames and windows.
pub(crate) fn domain_terms<'t>(out: &BatchOutputs<'t>, domains: &[Domain], w: &LossWeights) -> Result<Var<'t>> {
    let b = out.batch;
    if domains.len() != b {
        return Err(Error::contract(format!("{} domain labels for batch of {b}", domains.len())));
    }
    let d: Vec<usize> = domains.iter().map(|d| d.index()).collect();
    let spatial_labels: Vec<usize> = (0..b * out.frames).map(|r| d[r / out.frames]).collect();
    let relation_labels: Vec<usize> = (0..b * out.windows).map(|r| d[r % b]).collect();

    for (what, p) in [
        ("spatial domain", out.spatial_domain),
        ("relation domain", out.relation_domain),
        ("temporal domain", out.temporal_domain),
    ] {
        check_distribution(&p.value(), what)?;
    }
    let spatial = cross_entropy_from_log(out.spatial_domain_log, &spatial_labels)?
        .reshape(vec![b, out.frames])?
        .mean_axis(1)?;
    let relation = cross_entropy_from_log(out.relation_domain_log, &relation_labels)?
        .reshape(vec![out.windows, b])?
        .mean_axis(0)?;
    let temporal = cross_entropy_from_log(out.temporal_domain_log, &d)?;
    spatial
        .scale(w.lambda_s)
        .add(relation.scale(w.lambda_r))?
        .add(temporal.scale(w.lambda_t))
}

/// Domain loss `-(1/N) Σ_i (λ_s L_sd^i + λ_r L_rd^i + λ_t L_td^i)`, with each
/// `L^i` the discriminator cross-entropy against the sample's domain.
///
/// Training minimizes the negation of this value (the discriminator
/// cross-entropy); the gradient reversal layers turn that into maximization
/// for the feature extractors.
pub fn domain_loss<'t>(out: &BatchOutputs<'t>, domains: &[Domain], w: &LossWeights) -> Result<Var<'t>> {
    Ok(domain_terms(out, domains, w)?.mean().neg())
}

/// Per-sample `λ_ae (1 + H(temporal domain)) · H(ŷ)`; the attention factor is
/// detached from the gradient.
pub(crate) fn attentive_terms<'t>(out: &BatchOutputs<'t>, w: &LossWeights) -> Result<Var<'t>> {
    let attention = entropy_from_log(out.temporal_domain.stop_gradient(), out.temporal_domain_log.stop_gradient())?
        .add_scalar(1.0);
    let h = entropy_from_log(out.class_probs, out.class_log_probs)?;
    Ok(attention.mul(h)?.scale(w.lambda_ae))
}

/// Attentive entropy, averaged over the batch.
pub fn attentive_entropy<'t>(out: &BatchOutputs<'t>, w: &LossWeights) -> Result<Var<'t>> {
    Ok(attentive_terms(out, w)?.mean())
}

/// Prediction entropy of target rows, zero elsewhere.
pub(crate) fn target_entropy_terms<'t>(out: &BatchOutputs<'t>, domains: &[Domain]) -> Result<Var<'t>> {
    if domains.len() != out.batch {
        return Err(Error::contract("domain labels do not match batch"));
    }
    let mask = Tensor::new(
        vec![out.batch],
        domains.iter().map(|d| (*d == Domain::Target) as u8 as f64).collect(),
    )?;
    entropy_from_log(out.class_probs, out.class_log_probs)?.mul(out.class_probs.tape().constant(mask))
}

/// Mean prediction entropy over target samples; 0 when the batch has none.
pub fn conditional_entropy<'t>(out: &BatchOutputs<'t>, domains: &[Domain]) -> Result<Var<'t>> {
    let n_target = domains.iter().filter(|d| **d == Domain::Target).count();
    let terms = target_entropy_terms(out, domains)?;
    if n_target == 0 {
        return Ok(terms.sum().scale(0.0));
    }
    Ok(terms.sum().scale(1.0 / n_target as f64))
}
