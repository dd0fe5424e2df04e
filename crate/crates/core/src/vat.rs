//! Virtual adversarial training in feature space.
//!
//! The smoothness penalty of a clip `x` is `KL(G(x) ‖ G(x + r))`, where `G`
//! is the classification path of the network and `r` is the
//! (approximately) worst-case perturbation of L2 norm `epsilon` over the full
//! `T·D` sample. `r` is found by power iteration: start from a random unit
//! direction `d`, take the gradient of the divergence at `r = xi·d`,
//! normalize, repeat. During the outer update `r` is a constant and the clean
//! prediction is detached, so only the perturbed branch carries gradient.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::featio::Domain;
use crate::losses::{self, LossWeights};
use crate::network::{BatchOutputs, BoundParams, Network};
use crate::rng::{seeded, unit_vector};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VatConfig {
    /// Perturbation norm.
    pub epsilon: f64,
    pub lambda_vat: f64,
    pub power_iterations: usize,
    /// Probe scale for the power iteration.
    pub xi: f64,
}

impl Default for VatConfig {
    fn default() -> Self {
        VatConfig {
            epsilon: 1.0,
            lambda_vat: 0.01,
            power_iterations: 1,
            xi: 1e-1,
        }
    }
}

impl VatConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.xi > 0.0) || self.power_iterations == 0 {
            return Err(Error::config(format!(
                "VAT needs epsilon > 0, xi > 0, power_iterations >= 1: {self:?}"
            )));
        }
        if !(self.lambda_vat >= 0.0) || !self.lambda_vat.is_finite() {
            return Err(Error::config("lambda_vat must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Per-row `Σ_k p_k (ln p_k - ln q_k)`.
pub fn kl_divergence<'t>(p: Var<'t>, q: Var<'t>) -> Result<Var<'t>> {
    let (ps, qs) = (p.shape(), q.shape());
    if ps != qs || ps.len() != 2 {
        return Err(Error::contract(format!("KL operands differ: {ps:?} vs {qs:?}")));
    }
    for (name, v) in [("p", p.value()), ("q", q.value())] {
        for (i, row) in v.rows().enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::contract(format!("KL {name} row {i} sums to {s}")));
            }
        }
    }
    p.mul(p.log().sub(q.log())?)?.sum_axis(1)
}

/// Per-row `Σ_k p_k (log_p_k - log_q_k)` on log-probabilities; the form used
/// in training, where `q` may saturate below the log floor.
pub(crate) fn kl_from_log<'t>(p: Var<'t>, log_p: Var<'t>, log_q: Var<'t>) -> Result<Var<'t>> {
    if p.shape() != log_q.shape() || p.shape() != log_p.shape() {
        return Err(Error::contract(format!("KL operands differ: {:?} vs {:?}", p.shape(), log_q.shape())));
    }
    p.mul(log_p.sub(log_q)?)?.sum_axis(1)
}

/// Clean class distribution and its log, without gradient.
fn clean_prediction(net: &Network, x: &Tensor) -> Result<(Tensor, Tensor)> {
    let tape = Tape::new();
    let params = net.bind(&tape, false);
    let log_p = net.classify_log(&params, tape.constant(x.clone()))?;
    let log_p = (*log_p.value()).clone();
    Ok((log_p.map(f64::exp), log_p))
}

/// Result of the perturbation search for one batch.
#[derive(Clone, Debug)]
pub struct Perturbation {
    /// `[B, T*D]`, each row of norm `epsilon`.
    pub r: Tensor,
    /// Sample-iterations where the divergence gradient vanished and the
    /// previous direction was kept.
    pub fallbacks: usize,
}

/// Power-iteration search for the divergence-maximizing perturbation of
/// each sample. `seeds[i]` drives sample `i`'s random start.
pub fn adversarial_perturbation(net: &Network, x: &Tensor, cfg: &VatConfig, seeds: &[u64]) -> Result<Perturbation> {
    cfg.validate()?;
    let (b, width) = match x.shape() {
        [b, w] => (*b, *w),
        s => return Err(Error::contract(format!("VAT batch must be [B, T*D], got {s:?}"))),
    };
    if seeds.len() != b {
        return Err(Error::contract(format!("{} seeds for batch of {b}", seeds.len())));
    }
    let (clean, clean_log) = clean_prediction(net, x)?;
    let mut dirs = Vec::with_capacity(b * width);
    for &s in seeds {
        dirs.extend(unit_vector(&mut seeded(s), width));
    }
    let mut fallbacks = 0;
    for _ in 0..cfg.power_iterations {
        let tape = Tape::new();
        let params = net.bind(&tape, false);
        let probe = Tensor::new(vec![b, width], dirs.iter().map(|d| cfg.xi * d).collect())?;
        let r = tape.leaf(probe);
        let log_q = net.classify_log(&params, tape.constant(x.clone()).add(r)?)?;
        let kl = kl_from_log(tape.constant(clean.clone()), tape.constant(clean_log.clone()), log_q)?.sum();
        let grad = tape.backward(kl)?.wrt(r);
        for (d, g) in dirs.chunks_mut(width).zip(grad.data().chunks(width)) {
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm.is_finite() && norm > f64::MIN_POSITIVE {
                d.iter_mut().zip(g).for_each(|(di, gi)| *di = gi / norm);
            } else {
                fallbacks += 1;
            }
        }
    }
    let r = Tensor::new(vec![b, width], dirs.into_iter().map(|d| cfg.epsilon * d).collect())?;
    Ok(Perturbation { r, fallbacks })
}

/// Per-sample `KL(stop_grad(clean) ‖ G(x + r))` with `r` held fixed;
/// `clean` and `clean_log` are the clean distribution and its log.
pub fn lds_rows<'t>(
    net: &Network,
    params: &BoundParams<'t>,
    x: Var<'t>,
    r: &Tensor,
    clean: Var<'t>,
    clean_log: Var<'t>,
) -> Result<Var<'t>> {
    let tape = x.tape();
    let perturbed = x.add(tape.constant(r.clone()))?;
    let log_q = net.classify_log(params, perturbed)?;
    kl_from_log(clean.stop_gradient(), clean_log.stop_gradient(), log_q)
}

/// Mean smoothness penalty for a batch together with the perturbation used.
pub struct Lds<'t> {
    pub value: Var<'t>,
    pub perturbation: Perturbation,
}

pub fn lds<'t>(net: &Network, params: &BoundParams<'t>, x: &Tensor, cfg: &VatConfig, seeds: &[u64]) -> Result<Lds<'t>> {
    let perturbation = adversarial_perturbation(net, x, cfg, seeds)?;
    let tape = params
        .vars
        .first()
        .map(|v| v.tape())
        .ok_or_else(|| Error::contract("network has no parameters"))?;
    let xv = tape.constant(x.clone());
    let clean_log = net.classify_log(params, xv)?;
    let clean = net.classify(params, xv)?;
    let value = lds_rows(net, params, xv, &perturbation.r, clean, clean_log)?.mean();
    Ok(Lds { value, perturbation })
}

/// One mixed mini-batch.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, T*D]` normalized features.
    pub x: Tensor,
    pub labels: Vec<Option<usize>>,
    pub domains: Vec<Domain>,
    /// Per-sample seeds for the perturbation search.
    pub vat_seeds: Vec<u64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn counts(&self) -> LossCounts {
        LossCounts {
            all: self.len(),
            source: self.domains.iter().filter(|d| **d == Domain::Source).count(),
            target: self.domains.iter().filter(|d| **d == Domain::Target).count(),
        }
    }
}

/// Denominators of the batch means. A batch split into chunks passes the
/// whole batch's counts to every chunk so that chunk losses add up to the
/// batch loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossCounts {
    pub all: usize,
    pub source: usize,
    pub target: usize,
}

/// Weighted contributions to the total loss. `domain` is the discriminator
/// cross-entropy that is minimized, i.e. the negated domain loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub classification: f64,
    pub domain: f64,
    pub attentive: f64,
    pub vat: f64,
    pub conditional_entropy: f64,
    /// Unweighted mean smoothness penalty.
    pub lds: f64,
}

impl LossBreakdown {
    pub fn component_sum(&self) -> f64 {
        self.classification + self.domain + self.attentive + self.vat + self.conditional_entropy
    }

    pub(crate) fn accumulate(&mut self, other: &LossBreakdown) {
        self.total += other.total;
        self.classification += other.classification;
        self.domain += other.domain;
        self.attentive += other.attentive;
        self.vat += other.vat;
        self.conditional_entropy += other.conditional_entropy;
        self.lds += other.lds;
    }
}

pub struct TotalLoss<'t> {
    pub total: Var<'t>,
    pub breakdown: LossBreakdown,
    pub vat_fallbacks: usize,
}

/// Total objective: source classification + discriminator cross-entropy +
/// attentive entropy + `lambda_vat`·LDS over all samples + `lambda_ce`·target
/// entropy. Means use the batch's own counts.
pub fn total_loss<'t>(
    outputs: &BatchOutputs<'t>,
    batch: &Batch,
    net: &Network,
    params: &BoundParams<'t>,
    x: Var<'t>,
    w: &LossWeights,
    cfg: &VatConfig,
) -> Result<TotalLoss<'t>> {
    total_loss_with_counts(outputs, batch, net, params, x, w, cfg, batch.counts())
}

#[allow(clippy::too_many_arguments)]
pub fn total_loss_with_counts<'t>(
    outputs: &BatchOutputs<'t>,
    batch: &Batch,
    net: &Network,
    params: &BoundParams<'t>,
    x: Var<'t>,
    w: &LossWeights,
    cfg: &VatConfig,
    counts: LossCounts,
) -> Result<TotalLoss<'t>> {
    let tape = x.tape();
    let b = batch.len();
    if outputs.batch != b || batch.domains.len() != b || batch.vat_seeds.len() != b {
        return Err(Error::contract("batch fields disagree in length"));
    }
    let zero = || tape.constant(Tensor::scalar(0.0));
    let inv = |n: usize| if n == 0 { 0.0 } else { 1.0 / n as f64 };

    // source classification
    let mut labels = Vec::with_capacity(b);
    let mut source_mask = Vec::with_capacity(b);
    for (i, (l, d)) in batch.labels.iter().zip(&batch.domains).enumerate() {
        match (d, l) {
            (Domain::Source, Some(l)) => {
                labels.push(*l);
                source_mask.push(inv(counts.source));
            }
            (Domain::Source, None) => {
                return Err(Error::Validation {
                    index: i,
                    msg: "source training sample without label".into(),
                })
            }
            (Domain::Target, _) => {
                labels.push(0);
                source_mask.push(0.0);
            }
        }
    }
    let classification = if counts.source > 0 {
        let mask = tape.constant(Tensor::new(vec![b], source_mask)?);
        losses::cross_entropy_from_log(outputs.class_log_probs, &labels)?.mul(mask)?.sum()
    } else {
        zero()
    };

    let scale_all = inv(counts.all);
    let domain = if w.lambda_s + w.lambda_r + w.lambda_t > 0.0 {
        losses::domain_terms(outputs, &batch.domains, w)?.sum().scale(scale_all)
    } else {
        zero()
    };
    let attentive = if w.lambda_ae > 0.0 {
        losses::attentive_terms(outputs, w)?.sum().scale(scale_all)
    } else {
        zero()
    };

    let mut fallbacks = 0;
    let (vat, lds_mean) = if cfg.lambda_vat > 0.0 {
        let p = adversarial_perturbation(net, &batch.x, cfg, &batch.vat_seeds)?;
        fallbacks = p.fallbacks;
        let rows = lds_rows(net, params, x, &p.r, outputs.class_probs, outputs.class_log_probs)?;
        let lds_sum = rows.sum().scale(scale_all);
        (lds_sum.scale(cfg.lambda_vat), lds_sum.item())
    } else {
        (zero(), 0.0)
    };

    let conditional = if w.lambda_ce > 0.0 && counts.target > 0 {
        losses::target_entropy_terms(outputs, &batch.domains)?
            .sum()
            .scale(inv(counts.target) * w.lambda_ce)
    } else {
        zero()
    };

    let total = classification
        .add(domain)?
        .add(attentive)?
        .add(vat)?
        .add(conditional)?;
    let breakdown = LossBreakdown {
        total: total.item(),
        classification: classification.item(),
        domain: domain.item(),
        attentive: attentive.item(),
        vat: vat.item(),
        conditional_entropy: conditional.item(),
        lds: lds_mean,
    };
    Ok(TotalLoss {
        total,
        breakdown,
        vat_fallbacks: fallbacks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{ArchConfig, GrlSchedule, NetworkConfig};

    fn tiny() -> Network {
        let cfg = NetworkConfig::new(
            2,
            2,
            2,
            ArchConfig {
                spatial_hidden: 4,
                spatial_out: 3,
                relation_hidden: 4,
                relation_out: 3,
                disc_hidden: 3,
                relation_orders: vec![2],
                grl_schedule: GrlSchedule::Constant,
            },
        )
        .unwrap();
        Network::init(&cfg, 17).unwrap()
    }

    fn inputs(b: usize) -> Tensor {
        let mut rng = seeded(99);
        Tensor::from_fn(vec![b, 4], |_| crate::rng::normal(&mut rng))
    }

    #[test]
    fn kl_identities() {
        let tape = Tape::new();
        let p = tape.constant(Tensor::from_rows(&[vec![0.2, 0.5, 0.3]]).unwrap());
        assert_eq!(kl_divergence(p, p).unwrap().item(), 0.0);
        let one = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
        let half = tape.constant(Tensor::from_rows(&[vec![0.5, 0.5]]).unwrap());
        let v = kl_divergence(one, half).unwrap().item();
        assert!((v - 2f64.ln()).abs() <= 1e-12);
        assert!(kl_divergence(p, half).is_err());
    }

    #[test]
    fn perturbation_has_norm_epsilon() {
        let net = tiny();
        let x = inputs(6);
        let cfg = VatConfig {
            epsilon: 0.7,
            ..Default::default()
        };
        let p = adversarial_perturbation(&net, &x, &cfg, &[1, 2, 3, 4, 5, 6]).unwrap();
        for row in p.r.rows() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 0.7).abs() <= 1e-9);
        }
    }

    #[test]
    fn flat_network_falls_back_to_random_direction() {
        let mut net = tiny();
        net.zero_classifier();
        let x = inputs(3);
        let seeds = [10, 11, 12];
        let p = adversarial_perturbation(&net, &x, &VatConfig::default(), &seeds).unwrap();
        assert_eq!(p.fallbacks, 3);
        for (row, &s) in p.r.rows().zip(&seeds) {
            assert_eq!(row, unit_vector(&mut seeded(s), 4).as_slice());
        }
        let tape = Tape::new();
        let params = net.bind(&tape, true);
        let l = lds(&net, &params, &x, &VatConfig::default(), &seeds).unwrap();
        assert!(l.value.item().abs() <= 1e-12);
    }

    #[test]
    fn doubling_epsilon_doubles_r() {
        let net = tiny();
        let x = inputs(4);
        let seeds = [1, 2, 3, 4];
        let a = adversarial_perturbation(&net, &x, &VatConfig::default(), &seeds).unwrap();
        let cfg2 = VatConfig {
            epsilon: 2.0,
            ..Default::default()
        };
        let b = adversarial_perturbation(&net, &x, &cfg2, &seeds).unwrap();
        for (u, v) in a.r.data().iter().zip(b.r.data()) {
            assert_eq!(2.0 * u, *v);
        }
    }

    #[test]
    fn lds_is_non_negative() {
        let net = tiny();
        let tape = Tape::new();
        let params = net.bind(&tape, true);
        let l = lds(&net, &params, &inputs(5), &VatConfig::default(), &[5, 6, 7, 8, 9]).unwrap();
        assert!(l.value.item() >= 0.0);
    }

    #[test]
    fn invalid_config_rejected() {
        let bad = VatConfig {
            power_iterations: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = VatConfig {
            epsilon: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
