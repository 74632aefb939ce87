//! Record prediction embeddings every 250 images and write them as CSV.

use semevo::io::RunConfig;
use semevo::workflow::{simulate, write_trajectory_file, RunOptions};

fn main() -> semevo::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.output.checkpoints = vec![0, 250, 500, 750];
    let result = simulate(&cfg, &RunOptions::from_config(&cfg))?;

    let dir = std::env::temp_dir().join(format!("semevo-trajectory-{}", std::process::id()));
    let path = write_trajectory_file(&dir, &result)?;
    println!("{} rows -> {}", result.trajectory.len(), path.display());
    for row in result.trajectory.iter().filter(|r| r.category == 0) {
        println!("checkpoint {:4}  category 0  alignment {:.4}", row.checkpoint, row.alignment.unwrap_or(f64::NAN));
    }
    Ok(())
}
