//! Mean TAST accuracy over temperature and adapter width on the default
//! mean-shift benchmark.
//!
//! cargo run --release --example sensitivity -- [seeds]

use tast_core::bench::{generate, run_online, train_source_head, Method, RunConfig, SourceModel, SyntheticSpec, TrainOptions};

fn main() -> tast_core::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5);
    let grid: Vec<(f64, usize)> = [0.01, 0.1, 1.0].into_iter().flat_map(|t| [(t, 4), (t, 16)]).collect();
    let mut totals = vec![0.0; grid.len()];
    for seed in 0..seeds {
        let spec = SyntheticSpec::default_mean_shift(seed)?;
        let (train, test) = generate(&spec)?;
        let head = train_source_head(&train, &TrainOptions { seed, ..TrainOptions::head_default() })?.model;
        let model = SourceModel::Head { head };
        for (i, &(tau, d_phi)) in grid.iter().enumerate() {
            let config = RunConfig { seed, tau, d_phi: Some(d_phi), ..RunConfig::new(Method::Tast) };
            totals[i] += run_online(&model, &test, &config)?.final_accuracy();
        }
    }
    for ((tau, d_phi), t) in grid.into_iter().zip(totals) {
        println!("tau={tau:<5} d_phi={d_phi:<3} {:.4}", t / seeds as f64);
    }
    Ok(())
}
