//! Central finite-difference checks (step 1e-5, f64) for every
//! differentiable tape operation and every training loss, 100+ randomized
//! cases each, relative error ≤ 1e-4. Shared by `tests/gradcheck.rs` and the
//! acceptance target.

use super::*;
use featvat::autodiff::{Tape, Tensor, Var};
use featvat::featio::Domain;
use featvat::losses::{self, LossWeights};
use featvat::network::Network;
use featvat::rng::uniform;
use featvat::vat;

const CASES: u64 = 100;
pub const CASES_PER_OP: u64 = CASES;
const TOL: f64 = 1e-4;

fn run_cases(name: &str, case: impl Fn(u64) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    for c in 0..CASES {
        let e = case(c);
        assert!(e <= TOL, "{name}: case {c} relative error {e:.3e}");
        worst = worst.max(e);
    }
    worst
}

fn shape2(seed: u64) -> [usize; 2] {
    let mut r = rng(seed);
    [dim(&mut r, 1, 4), dim(&mut r, 1, 5)]
}

/// x ↦ Σ w ⊙ op(x) for unary ops on a random [m, n] input.
fn unary(name: &str, gen: impl Fn(&mut featvat::rng::StdRng, &[usize]) -> Tensor, op: impl for<'t> Fn(Var<'t>) -> Var<'t>) {
    run_cases(name, |c| {
        let mut r = rng(1000 + c);
        let s = shape2(c);
        let x = gen(&mut r, &s);
        check_op(&[x], &|tape, v| contract(tape, op(v[0]), 77 + c))
    });
}

pub fn elementwise_unary_ops() {
    unary("neg", |r, s| randn(r, s), |x| x.neg());
    unary("scale", |r, s| randn(r, s), |x| x.scale(-1.7));
    unary("add_scalar", |r, s| randn(r, s), |x| x.add_scalar(0.3));
    unary("relu", |r, s| rand_away_from_zero(r, s, 0.05), |x| x.relu());
    unary("log", |r, s| rand_range(r, s, 0.1, 3.0), |x| x.log());
    unary("exp", |r, s| randn(r, s), |x| x.exp());
    unary("softmax", |r, s| randn(r, s), |x| x.softmax());
    unary("log_softmax", |r, s| randn(r, s), |x| x.log_softmax());
    unary("reshape", |r, s| randn(r, s), |x| {
        let n = x.value().len();
        x.reshape(vec![n]).unwrap()
    });
}

pub fn reductions() {
    unary("sum", |r, s| randn(r, s), |x| x.sum());
    unary("mean", |r, s| randn(r, s), |x| x.mean());
    unary("sum_axis0", |r, s| randn(r, s), |x| x.sum_axis(0).unwrap());
    unary("sum_axis1", |r, s| randn(r, s), |x| x.sum_axis(1).unwrap());
    unary("mean_axis0", |r, s| randn(r, s), |x| x.mean_axis(0).unwrap());
    unary("mean_axis1", |r, s| randn(r, s), |x| x.mean_axis(1).unwrap());
    unary("l2_norm", |r, s| rand_away_from_zero(r, s, 0.2), |x| x.l2_norm());
}

pub fn binary_ops_with_broadcasting() {
    type Bin = for<'t> fn(Var<'t>, Var<'t>) -> Var<'t>;
    let ops: [(&str, Bin); 4] = [
        ("add", |a, b| a.add(b).unwrap()),
        ("sub", |a, b| a.sub(b).unwrap()),
        ("mul", |a, b| a.mul(b).unwrap()),
        ("div", |a, b| a.div(b).unwrap()),
    ];
    for (name, op) in ops {
        run_cases(name, |c| {
            let mut r = rng(2000 + c);
            let s = shape2(c);
            let a = randn(&mut r, &s);
            // same shape, a trailing-row broadcast, or a scalar
            let bshape: Vec<usize> = match c % 3 {
                0 => s.to_vec(),
                1 => vec![s[1]],
                _ => vec![1],
            };
            let b = if name == "div" {
                rand_away_from_zero(&mut r, &bshape, 0.5)
            } else {
                randn(&mut r, &bshape)
            };
            check_op(&[a, b], &|tape, v| contract(tape, op(v[0], v[1]), 5 + c))
        });
    }
}

pub fn matmul_concat_slice() {
    run_cases("matmul", |c| {
        let mut r = rng(3000 + c);
        let (m, k, n) = (dim(&mut r, 1, 4), dim(&mut r, 1, 4), dim(&mut r, 1, 4));
        let a = randn(&mut r, &[m, k]);
        let b = randn(&mut r, &[k, n]);
        check_op(&[a, b], &|tape, v| contract(tape, v[0].matmul(v[1]).unwrap(), c))
    });
    // the documented example: d/da sum(a·b) at random 3×4, 4×2, ≤ 1e-6
    let mut r = rng(7);
    let e = check_op(&[randn(&mut r, &[3, 4]), randn(&mut r, &[4, 2])], &|_, v| {
        v[0].matmul(v[1]).unwrap().sum()
    });
    assert!(e <= 1e-6, "matmul example {e:e}");

    for axis in 0..2 {
        run_cases("concat", |c| {
            let mut r = rng(4000 + c);
            let s = shape2(c);
            let mut s2 = s;
            s2[axis] = dim(&mut r, 1, 3);
            let a = randn(&mut r, &s);
            let b = randn(&mut r, &s2);
            check_op(&[a, b], &|tape, v| contract(tape, Var::concat(&[v[0], v[1]], axis).unwrap(), c))
        });
    }
    run_cases("slice", |c| {
        let mut r = rng(5000 + c);
        let s = [dim(&mut r, 1, 3), dim(&mut r, 2, 6)];
        let start = dim(&mut r, 0, s[1] - 1);
        let end = dim(&mut r, start + 1, s[1]);
        check_op(&[randn(&mut r, &s)], &|tape, v| contract(tape, v[0].slice(1, start, end).unwrap(), c))
    });
}

pub fn composite_mlp_loss() {
    run_cases("mlp", |c| {
        let mut r = rng(6000 + c);
        let (n, d, h, k) = (dim(&mut r, 1, 4), dim(&mut r, 1, 4), dim(&mut r, 2, 5), dim(&mut r, 2, 4));
        let inputs = vec![
            randn(&mut r, &[n, d]),
            randn(&mut r, &[d, h]),
            randn(&mut r, &[h]),
            randn(&mut r, &[h, k]),
            randn(&mut r, &[k]),
        ];
        let labels: Vec<usize> = (0..n).map(|i| (i + c as usize) % k).collect();
        check_op(&inputs, &|_, v| {
            let hdn = v[0].matmul(v[1]).unwrap().add(v[2]).unwrap().relu();
            let p = hdn.matmul(v[3]).unwrap().add(v[4]).unwrap().softmax();
            losses::cross_entropy(p, &labels).unwrap()
        })
    });
}

pub fn distribution_losses() {
    let dist = |r: &mut featvat::rng::StdRng, s: &[usize]| randn(r, s);
    run_cases("entropy", |c| {
        let mut r = rng(7000 + c);
        let s = [dim(&mut r, 1, 4), dim(&mut r, 2, 5)];
        check_op(&[dist(&mut r, &s)], &|tape, v| contract(tape, losses::entropy(v[0].softmax()).unwrap(), c))
    });
    run_cases("cross_entropy", |c| {
        let mut r = rng(8000 + c);
        let s = [dim(&mut r, 1, 4), dim(&mut r, 2, 5)];
        let labels: Vec<usize> = (0..s[0]).map(|i| (i * 7 + c as usize) % s[1]).collect();
        check_op(&[dist(&mut r, &s)], &|_, v| losses::cross_entropy(v[0].softmax(), &labels).unwrap())
    });
    run_cases("kl_divergence", |c| {
        let mut r = rng(9000 + c);
        let s = [dim(&mut r, 1, 4), dim(&mut r, 2, 5)];
        let (p, q) = (dist(&mut r, &s), dist(&mut r, &s));
        check_op(&[p, q], &|tape, v| {
            contract(tape, vat::kl_divergence(v[0].softmax(), v[1].softmax()).unwrap(), c)
        })
    });
}

/// Random mixed domain labels with at least one of each.
fn domains(n: usize, c: u64) -> Vec<Domain> {
    (0..n)
        .map(|i| if (i as u64 + c) % 2 == 0 { Domain::Source } else { Domain::Target })
        .collect()
}

fn random_weights(c: u64) -> LossWeights {
    let mut r = rng(10_000 + c);
    LossWeights {
        lambda_s: uniform(&mut r),
        lambda_r: uniform(&mut r),
        lambda_t: uniform(&mut r),
        lambda_ae: uniform(&mut r),
        lambda_ce: uniform(&mut r),
        beta: 0.1 + 1.9 * uniform(&mut r),
    }
}

/// Indices of discriminator parameters (they sit behind the GRL).
fn disc_params(net: &Network) -> Vec<bool> {
    net.names().iter().map(|n| n.starts_with("disc_")).collect()
}

/// Compares network-parameter gradients of `loss` against finite differences
/// of `value`. Parameters behind the GRL must match exactly; the others are
/// expected to equal `reversal` times the finite difference.
fn check_network_loss(
    net: &Network,
    x: &Tensor,
    beta: f64,
    loss: &dyn for<'t> Fn(&Network, &featvat::network::BoundParams<'t>, &featvat::network::BatchOutputs<'t>) -> Var<'t>,
    value: &dyn Fn(&Network) -> f64,
    reversal: f64,
) -> f64 {
    let tape = Tape::new();
    let p = net.bind(&tape, true);
    let out = net.forward(&p, tape.constant(x.clone()), beta).unwrap();
    let root = loss(net, &p, &out);
    let grads = net.collect_grads(&p, &tape.backward(root).unwrap());
    let behind_grl = disc_params(net);
    let eval = |params: &[Tensor]| {
        let mut n = net.clone();
        n.params_mut().clone_from_slice(params);
        value(&n)
    };
    let numeric = numeric_grad(net.params(), &eval);
    let (mut a, mut n) = (Vec::new(), Vec::new());
    for (i, (g, fd)) in grads.iter().zip(&numeric).enumerate() {
        let factor = if behind_grl[i] { 1.0 } else { reversal };
        a.extend_from_slice(g.data());
        n.extend(fd.iter().map(|v| v * factor));
    }
    rel_err(&a, &n)
}

fn forward_value<R>(net: &Network, x: &Tensor, f: impl for<'t> Fn(&featvat::network::BatchOutputs<'t>) -> R) -> R {
    let tape = Tape::new();
    let p = net.bind(&tape, false);
    let out = net.forward(&p, tape.constant(x.clone()), 1.0).unwrap();
    f(&out)
}

pub fn domain_loss_eq1_through_grl() {
    run_cases("domain_loss", |c| {
        let mut r = rng(11_000 + c);
        let (d, t, k, b) = (dim(&mut r, 2, 3), dim(&mut r, 2, 3), 2, dim(&mut r, 2, 4));
        let net = tiny_net(c, d, t, k);
        let x = randn(&mut r, &[b, t * d]);
        let w = random_weights(c);
        let dom = domains(b, c);
        // the discriminators minimize the cross-entropy (-domain_loss);
        // everything upstream of the GRL receives -beta times that gradient
        check_network_loss(
            &net,
            &x,
            w.beta,
            &|_, _, out| losses::domain_loss(out, &dom, &w).unwrap().neg(),
            &|n| forward_value(n, &x, |out| -losses::domain_loss(out, &dom, &w).unwrap().item()),
            -w.beta,
        )
    });
}

pub fn attentive_entropy_eq2() {
    run_cases("attentive_entropy", |c| {
        let mut r = rng(12_000 + c);
        let (d, t, k, b) = (dim(&mut r, 2, 3), dim(&mut r, 2, 3), dim(&mut r, 2, 3), dim(&mut r, 1, 4));
        let net = tiny_net(100 + c, d, t, k);
        let x = randn(&mut r, &[b, t * d]);
        let w = random_weights(c);
        // the attention factor is detached: freeze it at the base point
        let attention: Vec<f64> = forward_value(&net, &x, |out| {
            losses::entropy(out.temporal_domain).unwrap().value().data().iter().map(|h| 1.0 + h).collect()
        });
        check_network_loss(
            &net,
            &x,
            1.0,
            &|_, _, out| losses::attentive_entropy(out, &w).unwrap(),
            &|n| {
                forward_value(n, &x, |out| {
                    let h = losses::entropy(out.class_probs).unwrap().value();
                    h.data().iter().zip(&attention).map(|(h, a)| w.lambda_ae * a * h).sum::<f64>() / b as f64
                })
            },
            1.0,
        )
    });
}

pub fn conditional_entropy_and_classification() {
    run_cases("conditional_entropy", |c| {
        let mut r = rng(13_000 + c);
        let (d, t, k, b) = (2, 2, dim(&mut r, 2, 4), dim(&mut r, 2, 4));
        let net = tiny_net(200 + c, d, t, k);
        let x = randn(&mut r, &[b, t * d]);
        let dom = domains(b, c);
        check_network_loss(
            &net,
            &x,
            1.0,
            &|_, _, out| losses::conditional_entropy(out, &dom).unwrap(),
            &|n| forward_value(n, &x, |out| losses::conditional_entropy(out, &dom).unwrap().item()),
            1.0,
        )
    });
    run_cases("classification", |c| {
        let mut r = rng(14_000 + c);
        let (d, t, k, b) = (2, 3, dim(&mut r, 2, 4), dim(&mut r, 1, 4));
        let net = tiny_net(300 + c, d, t, k);
        let x = randn(&mut r, &[b, t * d]);
        let labels: Vec<usize> = (0..b).map(|i| (i + c as usize) % k).collect();
        check_network_loss(
            &net,
            &x,
            1.0,
            &|_, _, out| losses::cross_entropy(out.class_probs, &labels).unwrap(),
            &|n| forward_value(n, &x, |out| losses::cross_entropy(out.class_probs, &labels).unwrap().item()),
            1.0,
        )
    });
}

pub fn vat_lds_term_with_fixed_r() {
    run_cases("lambda_vat * lds", |c| {
        let mut r = rng(15_000 + c);
        let (d, t, k, b) = (dim(&mut r, 2, 3), 2, 2, dim(&mut r, 1, 4));
        let net = tiny_net(400 + c, d, t, k);
        let x = randn(&mut r, &[b, t * d]);
        let cfg = vat::VatConfig::default();
        let seeds: Vec<u64> = (0..b as u64).map(|i| c * 31 + i).collect();
        let pert = vat::adversarial_perturbation(&net, &x, &cfg, &seeds).unwrap();
        let clean = net.predict(&x).unwrap();
        let lam = cfg.lambda_vat;
        let perturbed = {
            let mut xr = x.clone();
            xr.data_mut().iter_mut().zip(pert.r.data()).for_each(|(a, b)| *a += b);
            xr
        };
        check_network_loss(
            &net,
            &x,
            1.0,
            &|n, p, out| {
                let xv = out.class_probs.tape().constant(x.clone());
                vat::lds_rows(n, p, xv, &pert.r, out.class_probs, out.class_log_probs)
                    .unwrap()
                    .mean()
                    .scale(lam)
            },
            &|n| {
                // clean prediction frozen at the base point, r fixed
                let tape = Tape::new();
                let q = tape.constant(n.predict(&perturbed).unwrap());
                lam * vat::kl_divergence(tape.constant(clean.clone()), q).unwrap().mean().item()
            },
            1.0,
        )
    });
}

/// Every family above, in order.
pub fn all() {
    elementwise_unary_ops();
    reductions();
    binary_ops_with_broadcasting();
    matmul_concat_slice();
    composite_mlp_loss();
    distribution_losses();
    domain_loss_eq1_through_grl();
    attentive_entropy_eq2();
    conditional_entropy_and_classification();
    vat_lds_term_with_fixed_r();
}
