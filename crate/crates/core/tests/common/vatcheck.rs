//! Brute-force oracle for the adversarial direction (criterion 3): the
//! power-iteration perturbation is compared against random directions of
//! the same norm on random tiny networks (D = 2, T = 2, K = 2).
//!
//! The search is a second-order method, so it is judged where the KL is
//! close to quadratic on the ε-sphere: freshly initialized networks with
//! `ε = 3e-3` and `ξ = ε / 10` (the default ξ/ε ratio). Untrained networks
//! move their logits by more than 1 within `ε = 1`; there the KL is
//! strongly asymmetric between `r` and `-r` and the sign drawn by the
//! random start decides the comparison (see the decision ledger).

use super::*;
use featvat::autodiff::{Tape, Tensor};
use featvat::network::{Network, NetworkConfig};
use featvat::rng::unit_vector;
use featvat::vat::{self, VatConfig};

pub const NETWORKS: u64 = 20;
pub const DIRECTIONS: usize = 1000;

#[derive(Debug)]
pub struct Quality {
    pub cases: usize,
    pub beats_median: usize,
    pub beats_p95: usize,
}

/// `KL(p(x) ‖ p(x + r_j))` for every row `r_j` of `rs`.
pub fn kl_per_direction(net: &Network, x: &Tensor, rs: &Tensor) -> Vec<f64> {
    let (n, w) = (rs.shape()[0], rs.shape()[1]);
    let clean = net.predict(x).unwrap();
    let clean_rows = Tensor::from_fn(vec![n, clean.len()], |i| clean.data()[i % clean.len()]);
    let shifted = Tensor::from_fn(vec![n, w], |i| x.data()[i % w] + rs.data()[i]);
    let tape = Tape::new();
    let q = tape.constant(net.predict(&shifted).unwrap());
    vat::kl_divergence(tape.constant(clean_rows), q).unwrap().value().data().to_vec()
}

pub const ORACLE_EPSILON: f64 = 3e-3;

pub fn oracle_config() -> VatConfig {
    VatConfig {
        epsilon: ORACLE_EPSILON,
        xi: ORACLE_EPSILON / 10.0,
        ..Default::default()
    }
}

pub fn tiny_vat_net(seed: u64) -> Network {
    let cfg = NetworkConfig::new(2, 2, 2, tiny_arch(8, vec![2])).unwrap();
    Network::init(&cfg, seed).unwrap()
}

pub fn direction_quality(cfg: &VatConfig) -> Quality {
    let mut q = Quality {
        cases: 0,
        beats_median: 0,
        beats_p95: 0,
    };
    for n in 0..NETWORKS {
        let net = tiny_vat_net(1000 + n);
        let x = randn(&mut rng(2000 + n), &[1, 4]);
        let adv = vat::adversarial_perturbation(&net, &x, cfg, &[3000 + n]).unwrap();
        let adv_kl = kl_per_direction(&net, &x, &adv.r)[0];
        let mut r = rng(4000 + n);
        let dirs: Vec<f64> = (0..DIRECTIONS).flat_map(|_| unit_vector(&mut r, 4)).map(|v| cfg.epsilon * v).collect();
        let mut kls = kl_per_direction(&net, &x, &Tensor::new(vec![DIRECTIONS, 4], dirs).unwrap());
        kls.sort_by(f64::total_cmp);
        let median = 0.5 * (kls[DIRECTIONS / 2 - 1] + kls[DIRECTIONS / 2]);
        let p95 = kls[(DIRECTIONS * 95).div_ceil(100) - 1];
        q.cases += 1;
        q.beats_median += (adv_kl > median) as usize;
        q.beats_p95 += (adv_kl > p95) as usize;
    }
    q
}
