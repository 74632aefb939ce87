//! Adapt over the default shifted synthetic stream and compare with zero-shot.
//!
//! `cargo run --release --example simulate -- [seed]`

use semevo::io::RunConfig;
use semevo::workflow::{simulate, RunOptions};

fn main() -> semevo::Result<()> {
    let seed = std::env::args().nth(1).map_or(Ok(0), |s| s.parse()).expect("seed must be an integer");
    let mut cfg = RunConfig::default();
    cfg.apply_seed(seed);

    let zero_shot = simulate(&cfg, &RunOptions { baseline: true, ..Default::default() })?;
    let adapted = simulate(&cfg, &RunOptions::default())?;

    for r in [&zero_shot, &adapted] {
        let s = &r.summary;
        println!(
            "{:8} accuracy {:.4}  mAP50 {:.4}  kept {}  mean active {:.2}",
            s.method,
            s.accuracy.unwrap(),
            s.map50.unwrap(),
            s.kept,
            s.mean_active
        );
    }
    let init = adapted.initial_alignment.as_ref().unwrap();
    let fin = adapted.final_alignment.as_ref().unwrap();
    println!("category  refined  alignment to shifted prototype");
    for k in 0..init.len() {
        println!("{k:8}  {:7}  {:.4} -> {:.4}", adapted.refined_counts[k], init[k], fin[k]);
    }
    Ok(())
}
