//! Sweep memory capacity and perturbation count over three seeds.

use semevo::io::{Grid, RunConfig};
use semevo::workflow::{ablate, RunOptions};

fn main() -> semevo::Result<()> {
    let cfg = RunConfig {
        grid: Some(Grid { m_max: vec![0, 2, 4], n: vec![100, 1000], seed: vec![0, 1, 2], ..Default::default() }),
        ..Default::default()
    };
    let mut rows: Vec<_> = ablate(&cfg, &RunOptions::default())?.into_iter().map(|r| r.summary).collect();
    rows.sort_by_key(|s| (s.n, s.m_max, s.seed));
    println!("   n  m_max  seed  accuracy  mAP50");
    for s in &rows {
        println!("{:4}  {:5}  {:4}  {:.4}    {:.4}", s.n, s.m_max, s.seed, s.accuracy.unwrap(), s.map50.unwrap());
    }
    Ok(())
}
