//! Runs the synthetic domain-adaptation comparison: source-only baseline,
//! full method without VAT, and full method, over several seeds.
//!
//! ```text
//! cargo run --release --example da_gate -- [SEEDS] [KEY=VALUE ...]
//! ```
//! Overrides use the same syntax as `featvat --set`.

use featvat::cli::RunConfig;
use featvat::featio::gen_synthetic;
use featvat::trainer::{evaluate, mean_lds, train};

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn main() {
    let mut args = std::env::args().skip(1);
    let seeds: u64 = args.next().map(|s| s.parse().unwrap()).unwrap_or(5);
    let mut base = RunConfig::default();
    for a in args {
        base.apply_override(&a).unwrap();
    }
    let modes = [("source_only", true, true), ("no_vat", false, false), ("full", false, true)];
    // MODES=full,no_vat restricts the comparison
    let only = std::env::var("MODES").ok();
    let modes: Vec<_> = modes
        .into_iter()
        .filter(|m| only.as_ref().is_none_or(|o| o.split(',').any(|x| x == m.0)))
        .collect();
    let mut results = vec![(Vec::new(), Vec::new(), Vec::new()); modes.len()];
    for seed in 0..seeds {
        let bench = gen_synthetic(&base.synthetic, seed).unwrap();
        for (m, (name, source_only, use_vat)) in modes.iter().enumerate() {
            let mut cfg = base.train.clone();
            cfg.seed = seed;
            cfg.source_only = *source_only;
            cfg.use_vat = *use_vat;
            let t = std::time::Instant::now();
            let (state, _) = train(&bench.source.train, &bench.target.train, &cfg).unwrap();
            let tgt = evaluate(&state, &bench.target.test, cfg.use_ema_eval).unwrap().accuracy;
            let src = evaluate(&state, &bench.source.test, cfg.use_ema_eval).unwrap().accuracy;
            let lds = mean_lds(state.network(cfg.use_ema_eval), &bench.target.test, &cfg.vat, 7, cfg.use_zscore).unwrap();
            println!(
                "seed {seed} {name:12} src {src:.3} tgt {tgt:.3} lds {lds:.5} ({:.1}s)",
                t.elapsed().as_secs_f64()
            );
            results[m].0.push(src);
            results[m].1.push(tgt);
            results[m].2.push(lds);
        }
    }
    for ((name, _, _), (s, t, l)) in modes.iter().zip(results) {
        println!("median {name:12} src {:.3} tgt {:.3} lds {:.5}", median(s), median(t), median(l));
    }
}
