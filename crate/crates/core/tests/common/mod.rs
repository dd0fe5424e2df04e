//! Shared helpers for the integration tests: finite-difference oracles,
//! random inputs and tiny networks.
#![allow(dead_code)]

pub mod gradcheck;
pub mod vatcheck;

use featvat::autodiff::{Tape, Tensor, Var};
use featvat::network::{ArchConfig, GrlSchedule, Network, NetworkConfig};
use featvat::rng::{normal, seeded, uniform, StdRng};

/// Finite-difference step used by every gradient check.
pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> StdRng {
    seeded(seed)
}

pub fn randn(rng: &mut StdRng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| normal(rng))
}

/// Uniform entries in `[lo, hi)`.
pub fn rand_range(rng: &mut StdRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| lo + (hi - lo) * uniform(rng))
}

/// Entries with `|x| ≥ margin`, random sign.
pub fn rand_away_from_zero(rng: &mut StdRng, shape: &[usize], margin: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = margin + uniform(rng);
        if uniform(rng) < 0.5 {
            -m
        } else {
            m
        }
    })
}

pub fn dim(rng: &mut StdRng, lo: usize, hi: usize) -> usize {
    lo + (uniform(rng) * (hi - lo + 1) as f64) as usize % (hi - lo + 1)
}

/// Normwise relative error `max|a - n| / max(max|a|, max|n|, 1e-8)`.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(numeric)
        .map(|v| v.abs())
        .fold(1e-8, f64::max);
    diff / scale
}

/// Central-difference gradient of `f` with respect to every input entry.
pub fn numeric_grad(inputs: &[Tensor], f: &dyn Fn(&[Tensor]) -> f64) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for i in 0..inputs.len() {
        let mut g = Vec::with_capacity(inputs[i].len());
        for j in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            g.push((f(&plus) - f(&minus)) / (2.0 * FD_STEP));
        }
        out.push(g);
    }
    out
}

/// Relative error between tape gradients and central differences of a
/// scalar function built on a tape from leaf inputs.
pub fn check_op(inputs: &[Tensor], f: &dyn for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>) -> f64 {
    let tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&tape, &leaves);
    let grads = tape.backward(root).unwrap();
    let analytic: Vec<f64> = leaves.iter().flat_map(|l| grads.wrt(*l).into_data()).collect();
    let eval = |xs: &[Tensor]| {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&tape, &vars).item()
    };
    let numeric: Vec<f64> = numeric_grad(inputs, &eval).into_iter().flatten().collect();
    rel_err(&analytic, &numeric)
}

/// Contracts `y` with fixed random weights to a scalar.
pub fn contract<'t>(tape: &'t Tape, y: Var<'t>, seed: u64) -> Var<'t> {
    let w = randn(&mut rng(seed), &y.shape());
    y.mul(tape.constant(w)).unwrap().sum()
}

pub fn tiny_arch(width: usize, orders: Vec<usize>) -> ArchConfig {
    ArchConfig {
        spatial_hidden: width,
        spatial_out: width,
        relation_hidden: width,
        relation_out: width,
        disc_hidden: width,
        relation_orders: orders,
        grl_schedule: GrlSchedule::Constant,
    }
}

/// Random tiny network with every parameter (biases included) drawn from
/// N(0, 0.5²), so no ReLU pre-activation sits exactly on its kink and the
/// softmax heads stay away from saturation.
pub fn tiny_net(seed: u64, d: usize, t: usize, k: usize) -> Network {
    let orders = if t == 2 { vec![2] } else { vec![2, t] };
    let cfg = NetworkConfig::new(d, t, k, tiny_arch(3, orders)).unwrap();
    randomized(Network::init(&cfg, seed).unwrap(), seed)
}

/// Redraws every parameter of `net` from N(0, 0.5²).
pub fn randomized(mut net: Network, seed: u64) -> Network {
    let mut r = rng(seed ^ 0x5eed);
    for p in net.params_mut() {
        let noise = randn(&mut r, p.shape());
        for (a, b) in p.data_mut().iter_mut().zip(noise.data()) {
            *a = 0.5 * b;
        }
    }
    net
}

pub fn param_index(net: &Network, name: &str) -> usize {
    net.names().iter().position(|n| n == name).unwrap_or_else(|| panic!("no parameter {name}"))
}

/// Zeroes the output layers of the classifier and all three discriminators,
/// so every head is exactly uniform.
pub fn uniform_heads(mut net: Network) -> Network {
    for name in [
        "classifier.weight",
        "classifier.bias",
        "disc_spatial.out.weight",
        "disc_spatial.out.bias",
        "disc_relation.out.weight",
        "disc_relation.out.bias",
        "disc_temporal.out.weight",
        "disc_temporal.out.bias",
    ] {
        let i = param_index(&net, name);
        net.params_mut()[i].data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    net
}
