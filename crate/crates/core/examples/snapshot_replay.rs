//! Export a synthetic stream as JSON Lines, replay it, and check that the
//! replay matches adapting on the in-memory stream.

use semevo::io::{read_snapshot_stream, RunConfig, ValueWidth};
use semevo::synthetic::WorldConfig;
use semevo::workflow::{replay, simulate, write_world_stream, RunOptions};

fn main() -> semevo::Result<()> {
    let dir = std::env::temp_dir().join(format!("semevo-replay-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("stream.jsonl");

    let world = WorldConfig { images: 300, ..Default::default() };
    let written = write_world_stream(&world, &path, ValueWidth::F64)?;
    let reader = read_snapshot_stream(&path)?;
    let h = reader.header();
    println!(
        "wrote {written} snapshots ({} bytes), K = {}, d = {}, reference embeddings: {}",
        std::fs::metadata(&path)?.len(),
        h.categories.len(),
        h.dim,
        h.reference_embeddings.is_some()
    );

    let sim = RunConfig { world: Some(world), ..Default::default() };
    let rep = RunConfig { mode: semevo::io::Mode::Replay, input: Some(path.clone()), ..Default::default() };
    let a = simulate(&sim, &RunOptions::default())?;
    let b = replay(&rep, &RunOptions { verify_every: Some(50), ..Default::default() })?;
    println!(
        "simulate accuracy {:.4}, replay accuracy {:.4}, {} images cross-checked against the reference implementation",
        a.summary.accuracy.unwrap(),
        b.summary.accuracy.unwrap(),
        b.verified_images
    );
    assert_eq!(a.images, b.images);

    std::fs::remove_dir_all(&dir)?;
    Ok(())
}
