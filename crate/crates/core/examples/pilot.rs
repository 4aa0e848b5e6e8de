//! Runs the synthetic end-to-end experiment and prints Top-N accuracy per method.
//!
//! Usage: `cargo run --release -p aqe-core --example pilot -- [key=value ...]`
//! with keys seed, lr, epochs, dpo_lr, dpo_epochs, batch, beta, pretrain_epochs, pretrain_lr, per_doc, n.

use std::time::Instant;

use aqe_core::pipeline::{run_experiment, ExperimentConfig};
use aqe_core::report::render_table;

fn main() {
    let mut cfg = ExperimentConfig::toy(7);
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').expect("key=value");
        match k {
            "seed" => {
                cfg.seed = v.parse().unwrap();
                cfg.pretrain.seed = cfg.seed;
                cfg.reranker.seed = cfg.seed;
            }
            "lr" => cfg.lr = v.parse().unwrap(),
            "epochs" => cfg.epochs = v.parse().unwrap(),
            "batch" => cfg.batch_size = v.parse().unwrap(),
            "dpo_lr" => cfg.dpo_lr = Some(v.parse().unwrap()),
            "dpo_epochs" => cfg.dpo_epochs = Some(v.parse().unwrap()),
            "beta" => cfg.beta = v.parse().unwrap(),
            "pretrain_epochs" => cfg.pretrain.epochs = v.parse().unwrap(),
            "pretrain_lr" => cfg.pretrain.lr = v.parse().unwrap(),
            "per_doc" => cfg.pretrain.per_doc = v.parse().unwrap(),
            "n" => cfg.generation.n = v.parse().unwrap(),
            other => panic!("unknown key {other}"),
        }
    }
    let start = Instant::now();
    let res = run_experiment(&cfg).expect("experiment");
    let rows: Vec<_> = res
        .reports
        .iter()
        .map(|(k, r)| (k.clone(), r.accuracy.clone()))
        .collect();
    print!("{}", render_table(&rows, &cfg.ns));
    println!(
        "rsft examples {}  pairs {}  dpo loss {:.4} -> {:.4}  margin {:.4} -> {:.4}",
        res.rsft_examples, res.pairs, res.dpo.initial_loss, res.dpo.final_loss, res.dpo.initial_margin, res.dpo.final_margin
    );
    for (k, r) in &res.reports {
        if let Some(d) = r.diversity {
            println!("{k}: diversity {d:.3}, example {:?}", r.per_query[0].expansion);
        }
    }
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
}
