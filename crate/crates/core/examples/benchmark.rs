//! Mean final accuracy of every method on the default mean-shift benchmark.
//!
//! cargo run --release --example benchmark -- [seeds]

use tast_core::bench::{
    generate, run_online, train_source_bn, train_source_head, Method, RunConfig, SourceModel, SyntheticSpec,
    TrainOptions,
};

fn main() -> tast_core::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let mut totals = vec![0.0; Method::ALL.len()];
    let mut bn_none_total = 0.0;
    for seed in 0..seeds {
        let spec = SyntheticSpec::default_mean_shift(seed)?;
        let (train, test) = generate(&spec)?;
        let head = train_source_head(&train, &TrainOptions { seed, ..TrainOptions::head_default() })?;
        let head_model = SourceModel::Head { head: head.model };
        let (extractor, bn_head) = train_source_bn(&train, &TrainOptions { seed, ..TrainOptions::bn_default() })?.model;
        let bn_model = SourceModel::Bn { extractor, head: bn_head };
        let mut row = format!("seed {seed}:");
        for (i, m) in Method::ALL.into_iter().enumerate() {
            let model = if m == Method::TastBn { &bn_model } else { &head_model };
            let acc = run_online(model, &test, &RunConfig { seed, ..RunConfig::new(m) })?.final_accuracy();
            totals[i] += acc;
            row += &format!(" {m}={acc:.4}");
        }
        let bn_none = run_online(&bn_model, &test, &RunConfig { seed, ..RunConfig::new(Method::None) })?.final_accuracy();
        bn_none_total += bn_none;
        println!("{row} bn_none={bn_none:.4}");
    }
    for (m, t) in Method::ALL.into_iter().zip(totals) {
        println!("{m:>8} {:.4}", t / seeds as f64);
    }
    println!("{:>8} {:.4}", "bn_none", bn_none_total / seeds as f64);
    Ok(())
}
