//! Cross-check the batched engine against the loop reference implementation
//! on every image of a short stream.

use semevo::io::RunConfig;
use semevo::synthetic::WorldConfig;
use semevo::workflow::{simulate, RunOptions};
use semevo::Hyperparams;

fn main() -> semevo::Result<()> {
    for (m_max, alpha) in [(0, 0.0), (2, 0.2), (4, 0.4)] {
        let cfg = RunConfig {
            world: Some(WorldConfig { images: 100, ..Default::default() }),
            hyperparams: Hyperparams { m_max, alpha, n: 300, ..Default::default() },
            ..Default::default()
        };
        let r = simulate(&cfg, &RunOptions { verify_every: Some(1), ..Default::default() })?;
        println!("m_max {m_max} alpha {alpha}: {} images verified, accuracy {:.4}", r.verified_images, r.summary.accuracy.unwrap());
    }
    Ok(())
}
