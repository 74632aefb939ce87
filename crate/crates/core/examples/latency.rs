//! Per-image latency with 80 categories, 256-d embeddings, 30 proposals.
//!
//! `cargo run --release --example latency`

use std::time::Instant;

use semevo::synthetic::{generate_world, stream, ShiftConfig, WorldConfig};
use semevo::{Engine, Hyperparams};

fn main() -> semevo::Result<()> {
    let cfg = WorldConfig {
        num_categories: 80,
        dim: 256,
        images: 500,
        proposals_per_image: [30, 30],
        categories_per_image: [1, 5],
        shift: ShiftConfig { rotations: 64, angle: 0.1, translation: 0.05, proposal_noise: 0.0 },
        intra_class_std: 0.01,
        prototype_coherence: 0.0,
        separation_cap: 0.5,
        text_scale: 1.0,
        ..Default::default()
    };
    let world = generate_world(&cfg)?;
    for parallel in [false, true] {
        let mut engine = Engine::new(Hyperparams::default(), 80, 256)?.with_parallel(parallel);
        let mut times = Vec::with_capacity(cfg.images);
        for s in stream(&world, &cfg) {
            let s = s?;
            let start = Instant::now();
            engine.process_image(&s)?;
            times.push(start.elapsed().as_secs_f64() * 1e3);
        }
        times.sort_by(f64::total_cmp);
        let mean = times.iter().sum::<f64>() / times.len() as f64;
        println!(
            "{:10} mean {mean:.2} ms  p50 {:.2} ms  p99 {:.2} ms",
            if parallel { "parallel" } else { "sequential" },
            times[times.len() / 2],
            times[times.len() * 99 / 100]
        );
    }
    Ok(())
}
